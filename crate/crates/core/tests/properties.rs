use farskip_core::check::random_small_config;
use farskip_core::model::generate::{generate, SamplingConfig};
use farskip_core::model::{checkpoint, router, ConnectivityMode, MaskSpec, Model};
use farskip_core::{ops, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn mode() -> impl Strategy<Value = ConnectivityMode> {
    prop::sample::select(ConnectivityMode::ALL.to_vec())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let p = ops::softmax_rows(&x).unwrap();
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn selected_gates_renormalize(x in matrix(4, 6), k in 1usize..=6) {
        let out = router::route_from_scores(ops::softmax_rows(&x).unwrap(), k).unwrap();
        for t in 0..4 {
            prop_assert!((out.token_gates(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut e = out.token_experts(t).to_vec();
            e.sort_unstable();
            e.dedup();
            prop_assert_eq!(e.len(), k);
        }
    }

    #[test]
    fn rms_norm_ignores_positive_row_scale(x in matrix(3, 5), s in 0.1f64..10.0) {
        prop_assume!(x.data().iter().any(|v| v.abs() > 1e-3));
        let g = Tensor::full(&[5], 1.0);
        let a = ops::rms_norm(&x, &g).unwrap();
        let b = ops::rms_norm(&ops::scale(&x, s), &g).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn rope_round_trips(x in matrix(6, 8)) {
        let back = ops::rope(&ops::rope(&x, 2, 3, false).unwrap(), 2, 3, true).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip_bytes(seed in any::<u64>(), modes in prop::collection::vec(mode(), 3)) {
        let cfg = random_small_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = cfg.n_layers;
        let model = Model::new(cfg).unwrap().with_modes(modes[..n].to_vec()).unwrap();
        let bytes = checkpoint::encode(&model, serde_json::json!({"seed": seed})).unwrap();
        let (back, meta) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(meta["seed"].as_u64(), Some(seed));
        prop_assert_eq!(checkpoint::encode(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn conversion_touches_only_masked_layers(seed in any::<u64>(), n in 0usize..=3, target in mode()) {
        let cfg = random_small_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let layers = cfg.n_layers;
        let model = Model::new(cfg).unwrap();
        let n = n.min(layers);
        let out = model.convert(&MaskSpec::LastN(n), target).unwrap();
        prop_assert!(out.params.bit_eq(&model.params));
        for l in 0..layers {
            let want = if l >= layers - n { target } else { ConnectivityMode::Regular };
            prop_assert_eq!(out.modes[l], want);
        }
        prop_assert_eq!(model.convert(&MaskSpec::None, target).unwrap(), model);
    }

    #[test]
    fn sampling_is_seeded(seed in any::<u64>(), temperature in 0.0f64..2.0) {
        let cfg = random_small_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let vocab = cfg.vocab;
        let model = Model::new(cfg).unwrap();
        let s = SamplingConfig { temperature, top_p: 0.9, seed };
        let a = generate(&model, &[0, 1], 5, &s).unwrap();
        prop_assert_eq!(&a, &generate(&model, &[0, 1], 5, &s).unwrap());
        prop_assert_eq!(a.len(), 7);
        prop_assert!(a.iter().all(|&t| t < vocab));
    }
}
