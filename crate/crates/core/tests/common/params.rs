use lasfusion::fusion_head::FusionMode;
use lasfusion::model::{Model, ModelConfig};
use lasfusion::projection::{count_parameters, Projector, ProjectorConfig, Variant};
use lasfusion::synthscene::SceneConfig;
use lasfusion::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const REFERENCE_FULL_SCALE: f64 = 0.9e6;

pub fn small(variant: Variant, tied: bool) -> ProjectorConfig {
    ProjectorConfig {
        variant,
        n_depth: 6,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        tied_heads: tied,
        cam_channels: 5,
        lidar_channels: 4,
        out_channels: 3,
        feat_height: 4,
    }
}

/// `(label, counted, hand tally)`; hand tallies are worked out term by term.
pub fn tallies() -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    // context 5*3+3 = 18
    let ctx = 18;
    // depth head 5*8+8 + 8*6+6 = 48 + 54
    let depth = 102;
    out.push(("small lift_splat".into(), count_parameters(&small(Variant::LiftSplat, true)), ctx + depth));
    out.push(("small uniform".into(), count_parameters(&small(Variant::Uniform, true)), ctx));
    out.push(("small lidar_depth".into(), count_parameters(&small(Variant::LidarDepth, true)), ctx));
    // cam_in 5*8+8, lidar_in 4*8+8, positions (4+6)*8, final norms 2*2*8, out 8*3+3
    let shared = 48 + 40 + 80 + 32 + 27;
    // tied attention: q,k,v 3*(8*4+4) + o 8*8+8 = 108 + 72
    let att_tied = 180;
    // untied attention: 3*(8*8+8) + 72 = 216 + 72
    let att_untied = 288;
    // feed-forward 8*16+16 + 16*8+8
    let ff = 280;
    let enc = |att: usize| 2 * 2 * 8 + att + ff;
    let dec = |att: usize| 3 * 2 * 8 + 2 * att + ff;
    out.push((
        "small lift_attend_splat tied".into(),
        count_parameters(&small(Variant::LiftAttendSplat, true)),
        shared + enc(att_tied) + dec(att_tied),
    ));
    out.push((
        "small lift_attend_splat untied".into(),
        count_parameters(&small(Variant::LiftAttendSplat, false)),
        shared + enc(att_untied) + dec(att_untied),
    ));
    let mut two = small(Variant::LiftAttendSplat, true);
    two.decoder_layers = 2;
    out.push((
        "small lift_attend_splat two decoders".into(),
        count_parameters(&two),
        shared + enc(att_tied) + 2 * dec(att_tied),
    ));
    for v in Variant::ALL {
        for tied in [true, false] {
            let cfg = small(v, tied);
            let mut store = ParamStore::new();
            Projector::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            out.push((format!("store {v} tied={tied}"), store.count(), count_parameters(&cfg)));
        }
    }
    // toy detector: backbone 7*8+8, cat-conv fusion 16*8*9+8, head 8*16*9+16 + 16*10+10
    let scene = SceneConfig::default();
    let rest = 64 + 1160 + 1168 + 170;
    for (v, proj) in [
        (Variant::LiftSplat, 72 + (8 * 32 + 32) + (32 * 24 + 24)),
        (Variant::Uniform, 72),
        (Variant::LidarDepth, 72),
    ] {
        let mc = ModelConfig {
            fusion: FusionMode::CatConv,
            ..ModelConfig::toy(v, &scene).unwrap()
        };
        let m = Model::new(&mc, 0).unwrap();
        out.push((format!("toy model {v}"), m.store.count(), rest + proj));
    }
    out
}

/// Full-scale projector count next to the reference figure, with the
/// relative deviation.
pub fn full_scale() -> (usize, f64) {
    let n = count_parameters(&ProjectorConfig::full_scale());
    (n, (n as f64 - REFERENCE_FULL_SCALE) / REFERENCE_FULL_SCALE)
}
