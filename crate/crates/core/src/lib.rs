//! Camera-lidar fusion in bird's-eye view without monocular depth.
//!
//! Camera columns are cross-attended by lidar features lifted onto each
//! camera's projected horizon, then splatted back to the BEV grid. Lift-Splat
//! baselines (learned, uniform and lidar depth), a synthetic scene generator,
//! depth metrics, temporal aggregation and box ensembling complete the
//! toolkit.

pub mod error;
pub mod exec;
pub mod io;
pub mod tensor;

pub mod boxfusion;
pub mod depth;
pub mod fusion_head;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod projection;
pub mod synthscene;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
