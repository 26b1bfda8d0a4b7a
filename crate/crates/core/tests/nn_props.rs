use ovhar_core::nn::{
    decode_checkpoint, encode_checkpoint, grad_check, load_checkpoint, save_checkpoint, BackwardFault, GradCheckOptions,
    ModelConfig, NnError, RegressorModel,
};
use ovhar_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn small(in_channels: usize, out_dim: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        filters: 4,
        kernel: 3,
        pool_size: 2,
        hidden: 5,
        out_dim,
    }
}

fn random_inputs(seed: u64, t: usize, c: usize, out: usize) -> (Tensor, Tensor) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let w = Tensor::from_vec(&[t, c], (0..t * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let y = Tensor::from_vec(&[out], (0..out).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    (w, y)
}

#[test]
fn analytic_gradients_match_finite_differences_across_seeds() {
    for seed in 0..6u64 {
        let cfg = small(3, 7);
        let model = RegressorModel::new(cfg, seed).unwrap();
        let (w, y) = random_inputs(100 + seed, 12, 3, 7);
        let report = grad_check(
            &model,
            &w,
            &y,
            GradCheckOptions {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
        assert!(report.checked >= 60, "seed {seed}: only {} probes", report.checked);
    }
}

#[test]
fn gradient_check_holds_for_the_default_architecture() {
    let model = RegressorModel::new(ModelConfig::new(3), 11).unwrap();
    let (w, y) = random_inputs(5, 20, 3, 768);
    let opts = GradCheckOptions {
        per_tensor: 8,
        seed: 3,
        ..Default::default()
    };
    let report = grad_check(&model, &w, &y, opts).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn sign_flipped_conv_gradient_is_caught() {
    let mut model = RegressorModel::new(small(2, 6), 4).unwrap();
    model.inject_fault(Some(BackwardFault::ConvSignFlip));
    let (w, y) = random_inputs(8, 10, 2, 6);
    let report = grad_check(&model, &w, &y, GradCheckOptions::default()).unwrap();
    assert!(!report.passed);
    assert!(report.worst_tensor.unwrap().starts_with("conv."), "{report:?}");
    assert!(report.max_rel_error > 1.0);
}

#[test]
fn saved_checkpoint_reloads_with_equal_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ovhr");
    let model = RegressorModel::new(small(3, 9), 77).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.seed, 77);
    let (w, _) = random_inputs(1, 16, 3, 9);
    assert_eq!(model.predict(&w).unwrap(), back.predict(&w).unwrap());
}

#[test]
fn default_checkpoint_is_parameter_bytes_plus_small_header() {
    let model = RegressorModel::new(ModelConfig::new(6), 0).unwrap();
    let bytes = encode_checkpoint(&model);
    let payload = model.parameter_count() * 8 + 2 * 8;
    assert!(bytes.len() > payload);
    assert!(bytes.len() - payload < 1024, "header overhead {}", bytes.len() - payload);
}

#[test]
fn every_truncation_is_rejected() {
    let model = RegressorModel::new(small(1, 2), 3).unwrap();
    let bytes = encode_checkpoint(&model);
    for cut in 0..bytes.len() {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
}

#[test]
fn future_version_is_refused() {
    let model = RegressorModel::new(small(1, 2), 3).unwrap();
    let mut bytes = encode_checkpoint(&model);
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&bytes),
        Err(NnError::UnsupportedVersion { found: 2, supported: 1 })
    ));
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (1usize..5, 1usize..6, 1usize..6, 1usize..4, 1usize..6, 1usize..10).prop_map(
        |(in_channels, filters, kernel, pool_size, hidden, out_dim)| ModelConfig {
            in_channels,
            filters,
            kernel,
            pool_size,
            hidden,
            out_dim,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(cfg in config_strategy(), seed in any::<u64>()) {
        let model = RegressorModel::new(cfg, seed).unwrap();
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.config(), cfg);
        prop_assert_eq!(back.seed, seed);
        for ((na, a), (nb, b)) in model.named_parameters().iter().zip(back.named_parameters().iter()) {
            prop_assert_eq!(na, nb);
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same, "{} differs", na);
        }
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupted_bytes_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let model = RegressorModel::new(small(2, 3), 9).unwrap();
        let mut bytes = encode_checkpoint(&model);
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        // Either a clean error or a model of a consistent shape.
        if let Ok(m) = decode_checkpoint(&bytes) {
            m.config().validate().unwrap();
        }
    }

    #[test]
    fn output_has_embedding_width_for_any_window_length(t in 2usize..40, seed in 0u64..1000) {
        let model = RegressorModel::new(small(2, 11), seed).unwrap();
        let (w, _) = random_inputs(seed, t, 2, 11);
        let out = model.predict(&w).unwrap();
        prop_assert_eq!(out.shape(), &[11]);
        prop_assert!(out.is_finite());
    }
}
