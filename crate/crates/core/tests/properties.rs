use proptest::prelude::*;

use tumor_ldm::data::format::{decode, encode, RawGrid};
use tumor_ldm::data::{hflip, ImageGrid};
use tumor_ldm::metrics::{local_metrics, mse, psnr_from_mse, ssim, UnitGrid};

fn unit_grid(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, n * n)
}

fn flip_values(values: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|i| values[(i / n) * n + (n - 1 - i % n)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_files_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let values: Vec<f32> = (0..h * w * c).map(|i| ((seed as f32) * 1e-19 + i as f32).sin()).collect();
        let raw = RawGrid { height: h, width: w, channels: c, values };
        prop_assert_eq!(decode(&encode(&raw)).unwrap(), raw);
    }

    #[test]
    fn metrics_are_invariant_under_joint_flips(a in unit_grid(12), b in unit_grid(12), r in 0usize..12, c in 0usize..12) {
        let (ga, gb) = (UnitGrid::new(12, 12, a.clone()).unwrap(), UnitGrid::new(12, 12, b.clone()).unwrap());
        let (fa, fb) = (
            UnitGrid::new(12, 12, flip_values(&a, 12)).unwrap(),
            UnitGrid::new(12, 12, flip_values(&b, 12)).unwrap(),
        );
        prop_assert!((mse(&ga, &gb).unwrap() - mse(&fa, &fb).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&ga, &gb).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-9);

        let mut m = vec![0.0f32; 144];
        m[r * 12 + c] = 1.0;
        let mask = ImageGrid::mask(12, 12, m).unwrap();
        let (l, lf) = (local_metrics(&ga, &gb, &mask).unwrap(), local_metrics(&fa, &fb, &hflip(&mask)).unwrap());
        prop_assert!((l.mse - lf.mse).abs() < 1e-12);
        prop_assert!((l.ssim - lf.ssim).abs() < 1e-9);
    }

    #[test]
    fn self_similarity_is_one(a in unit_grid(11)) {
        let g = UnitGrid::new(11, 11, a).unwrap();
        prop_assert_eq!(ssim(&g, &g).unwrap(), 1.0);
        prop_assert_eq!(mse(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn psnr_falls_as_mse_grows(x in 1e-6f64..1.0, dx in 1e-6f64..1.0) {
        prop_assert!(psnr_from_mse(x + dx, 1.0) < psnr_from_mse(x, 1.0));
    }
}
