mod common;

use common::wbf::*;
use lasfusion::boxfusion::{wbf, Box3D};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn greedy_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..1000 {
        let lists = random_instance(&mut rng);
        check_against_oracle(&lists).unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

#[test]
fn tta_transforms_round_trip() {
    check_tta_round_trip(&mut ChaCha8Rng::seed_from_u64(5), 50).unwrap();
}

#[test]
fn mirror_tta_on_symmetric_scene_is_symmetric() {
    let n = check_mirror_symmetry(0..3, 1e-6).unwrap();
    assert!(n > 0);
}

fn instance() -> impl Strategy<Value = Vec<Vec<Box3D>>> {
    any::<u64>().prop_map(|s| random_instance(&mut ChaCha8Rng::seed_from_u64(s)))
}

proptest! {
    #[test]
    fn oracle_agrees(lists in instance()) {
        if let Err(e) = check_against_oracle(&lists) {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn output_bounded_and_scores_valid(lists in instance()) {
        let n: usize = lists.iter().map(Vec::len).sum();
        let out = wbf(&lists, &THRESHOLDS).unwrap();
        prop_assert!(out.len() <= n);
        prop_assert!(out.iter().all(|b| (0.0..=1.0).contains(&b.score)));
    }

    #[test]
    fn invariant_to_input_order(lists in instance(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = lists.clone();
        for l in &mut shuffled {
            l.shuffle(&mut rng);
        }
        prop_assert_eq!(wbf(&lists, &THRESHOLDS).unwrap(), wbf(&shuffled, &THRESHOLDS).unwrap());
    }
}
