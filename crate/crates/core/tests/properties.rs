mod common;

use common::*;
use exedit_core::data::{distort_mask, BBox, EditMask};
use exedit_core::diffusion::build_schedule;
use exedit_core::metrics::{fid, FeatureSet};
use exedit_core::sampler::timestep_sequence;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| (0..d).map(|j| r.sample::<f64, _>(StandardNormal) * (1.0 + j as f64) + (i % 3) as f64).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Translating a set leaves its covariance unchanged, so FID reduces to
    // the squared shift.
    #[test]
    fn fid_of_translated_set_is_squared_shift(
        seed in 0u64..1000,
        shift in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let a = cloud(200, 3, seed);
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let expected: f64 = shift.iter().map(|s| s * s).sum();
        let got = fid(&FeatureSet::new(a, "a").unwrap(), &FeatureSet::new(b, "b").unwrap()).unwrap();
        prop_assert!((got - expected).abs() < 1e-6 * (1.0 + expected), "{got} vs {expected}");
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = FeatureSet::new(cloud(100, 4, s1), "a").unwrap();
        let b = FeatureSet::new(cloud(120, 4, s2 + 5000), "b").unwrap();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
    }

    #[test]
    fn distorted_masks_are_connected_and_near_the_box(
        x in 0usize..20, y in 0usize..20, w in 6usize..12, h in 6usize..12, seed in 0u64..10_000,
    ) {
        let bbox = BBox::new(x, y, w, h);
        let m = distort_mask(&bbox, (32, 32), &mut rng(seed)).unwrap();
        prop_assert!(m.count() > 0);
        prop_assert!(m.is_connected());
        let r = m.bounding_rect().unwrap();
        prop_assert!(r.x + 6 >= x && r.y + 6 >= y);
        prop_assert!(r.x + r.w <= x + w + 6 && r.y + r.h <= y + h + 6);
    }

    #[test]
    fn mask_png_round_trip(bits in prop::collection::vec(0u8..2, 12 * 9)) {
        let m = EditMask::new(12, 9, bits).unwrap();
        prop_assert_eq!(EditMask::from_png(&m.to_png()).unwrap(), m);
    }

    #[test]
    fn timestep_sequences_descend_to_zero(total in 2usize..300, n in 1usize..300) {
        let n = n.min(total);
        let seq = timestep_sequence(total, n);
        prop_assert_eq!(seq.len(), n);
        prop_assert_eq!(*seq.last().unwrap(), 0);
        prop_assert!(seq[0] < total);
        prop_assert!(seq.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn schedules_preserve_variance(steps in 2usize..400, lo in 1e-5f64..1e-2, span in 1e-3f64..0.2) {
        let s = build_schedule(steps, lo, lo + span).unwrap();
        for t in 0..steps {
            let v = s.signal(t).powi(2) + s.noise(t).powi(2);
            prop_assert!((v - 1.0).abs() < 1e-12);
            if t > 0 {
                prop_assert!(s.signal(t) < s.signal(t - 1));
            }
        }
    }
}
