#![allow(dead_code)]

pub mod attention;
pub mod depth;
pub mod geometry;
pub mod gradients;
pub mod params;
pub mod temporal;
pub mod wbf;
