use proptest::prelude::*;

use idfc::data::io::{decode_pfm, decode_ppm, encode_pfm};
use idfc::layers::ObservationMask;
use idfc::metrics::{delta, rel, rmse};
use idfc::model::{ModelConfig, Variant};
use idfc::tensor::Tensor;
use idfc::train::{Checkpoint, TrainConfig};

fn depth_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.1f64..20.0, n),
            prop::collection::vec(0.0f64..25.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metric_invariants((gt, pred, mut valid) in depth_pair(), scale in 0.01f64..100.0) {
        valid[0] = true;
        let n = gt.len();
        let mask = ObservationMask::from_bools(1, 1, n, &valid).unwrap();
        let (g, p) = (row(&gt), row(&pred));
        let d: Vec<f64> = (1..=3).map(|j| delta(&p, &g, &mask, j).unwrap()).collect();
        prop_assert!(0.0 <= d[0] && d[0] <= d[1] && d[1] <= d[2] && d[2] <= 100.0);
        prop_assert!(rmse(&p, &g, &mask).unwrap() >= 0.0);
        let r = rel(&p, &g, &mask).unwrap();
        let scaled = rel(&row(&pred.iter().map(|v| v * scale).collect::<Vec<_>>()),
                         &row(&gt.iter().map(|v| v * scale).collect::<Vec<_>>()), &mask).unwrap();
        prop_assert!((r - scaled).abs() <= 1e-12 * r.max(1.0));
        prop_assert_eq!(rmse(&g, &g, &mask).unwrap(), 0.0);
        prop_assert_eq!(delta(&g, &g, &mask, 1).unwrap(), 100.0);
    }

    #[test]
    fn pfm_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u32>()) {
        let data: Vec<f64> = (0..h * w).map(|i| (((seed as f64 + i as f64) * 0.37).sin() * 30.0) as f32 as f64).collect();
        let t = Tensor::new(&[1, 1, h, w], data).unwrap();
        let bytes = encode_pfm(&t).unwrap();
        prop_assert_eq!(decode_pfm(&bytes).unwrap(), t);
    }

    #[test]
    fn image_decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64), prefix in 0usize..3) {
        let mut input = [&b"P6\n"[..], &b"Pf\n"[..], &b""[..]][prefix].to_vec();
        input.extend(bytes);
        let _ = decode_ppm(&input);
        let _ = decode_pfm(&input);
    }

    #[test]
    fn corrupted_checkpoints_fail_cleanly(pos in any::<prop::sample::Index>(), flip in 1u8..=255, cut in any::<prop::sample::Index>()) {
        let cfg = TrainConfig::default().with_model(&ModelConfig::tiny(Variant::ContextOnly));
        let model = idfc::model::Model::new(cfg.model_config(), 2).unwrap();
        let bytes = Checkpoint::from_model(&model, 5, 9, &cfg).to_bytes();
        let mut bad = bytes.clone();
        bad[pos.index(bytes.len())] ^= flip;
        // A flipped byte never panics and never decodes to the original.
        if let Ok(c) = Checkpoint::from_bytes(&bad) {
            let _ = c.restore();
            prop_assert_ne!(c, Checkpoint::from_bytes(&bytes).unwrap());
        }
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut.index(bytes.len())]).is_err());
    }

    #[test]
    fn config_text_round_trip(lr in 0.0f64..1.0, seed in any::<u64>(), window in prop::sample::select(vec![0usize, 8, 16]),
                              variant in prop::sample::select(Variant::ALL.to_vec()), lo in 1usize..50, span in 0usize..100) {
        let cfg = TrainConfig { lr, seed, aggregation_window: window, variant, train_samples: Some((lo, lo + span)), ..TrainConfig::default() };
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back, cfg);
    }
}
