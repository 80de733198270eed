use cvdm_core::diffusion::{predict_y_from_eps, sample_forward};
use cvdm_core::io::{npy_bytes, parse_npy};
use cvdm_core::losses::kl_standard_normal;
use cvdm_core::metrics::{mae, ms_ssim, ssim, MetricConfig, MetricReport};
use cvdm_core::params::ParamStore;
use cvdm_core::sampler::{sampling_tables, BetaMode};
use cvdm_core::schedule::{AnalyticSchedule, ScheduleConfig, ScheduleExt, ScheduleMode, ScheduleModel};
use cvdm_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn learned(mode: ScheduleMode, seed: u64) -> (ParamStore, ScheduleModel) {
    let mut store = ParamStore::default();
    let cfg = ScheduleConfig {
        mode,
        hidden: 32,
        ..Default::default()
    };
    let model = ScheduleModel::new(&mut store, &cfg, 2, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, model)
}

fn image(values: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::new(&[1, 1, h, w], values.to_vec()).unwrap()
}

fn condition() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, 2 * 8 * 8).prop_map(|v| Tensor::new(&[1, 2, 8, 8], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn learned_gamma_is_monotone_and_starts_at_one(
        x in condition(),
        seed in 0u64..4,
        t1 in 0.0f64..1.0,
        dt in 0.0f64..1.0,
        global in any::<bool>(),
    ) {
        let mode = if global { ScheduleMode::Global } else { ScheduleMode::Pixelwise };
        let (store, model) = learned(mode, seed);
        let s = model.bind(&store);
        let t2 = t1 + dt * (1.0 - t1);
        let (g1, g2) = (s.gamma(t1, &x).unwrap(), s.gamma(t2, &x).unwrap());
        for (a, b) in g1.data().iter().zip(g2.data()) {
            prop_assert!(a >= b, "γ({t1}) = {a} < γ({t2}) = {b}");
        }
        prop_assert!(s.gamma(0.0, &x).unwrap().data().iter().all(|&v| v == 1.0));
        if global {
            let first = g1.data()[0];
            prop_assert!(g1.data().iter().all(|&v| v == first));
        }
    }

    #[test]
    fn matched_fixture_solves_the_relation(a in 0.1f64..8.0, b in 0.0f64..6.0, t in 0.01f64..0.99, l in 0.2f64..2.0) {
        let s = AnalyticSchedule::quadratic(a, b).with_lambda(Tensor::full(&[1, 1, 1], l));
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let h = 1e-5;
        let dg = (s.gamma(t + h, &x).unwrap().item() - s.gamma(t - h, &x).unwrap().item()) / (2.0 * h);
        let residual = dg + s.beta(t, &x).unwrap().item() * s.gamma(t, &x).unwrap().item();
        prop_assert!(residual.abs() < 1e-6, "residual {residual}");
    }

    #[test]
    fn ratio_tables_telescope(x in condition(), seed in 0u64..4, steps in 2usize..60) {
        let (store, model) = learned(ScheduleMode::Pixelwise, seed);
        let s = model.bind(&store);
        let tables = sampling_tables(&s, &x, &[1, 1, 8, 8], steps, BetaMode::RatioExact).unwrap();
        for k in [0, steps / 2, steps - 1] {
            let want = s.gamma((k + 1) as f64 / steps as f64, &x).unwrap();
            let mut product = Tensor::ones(&[1, 1, 8, 8]);
            for b in &tables.beta[..=k] {
                product = product.zip_map(b, |g, bb| g * (1.0 - bb)).unwrap();
            }
            for ((p, g), w) in product.data().iter().zip(tables.gamma[k].data()).zip(want.data()) {
                prop_assert!((g - w).abs() <= 1e-10 * w.abs());
                prop_assert!((p - w).abs() <= 1e-10 * w.abs().max(1e-300), "product {p} vs {w}");
            }
        }
    }

    #[test]
    fn forward_then_recover_is_identity(
        y in prop::collection::vec(-3.0f64..3.0, 16),
        eps in prop::collection::vec(-3.0f64..3.0, 16),
        gamma in 0.01f64..1.0,
    ) {
        let y = image(&y, 4, 4);
        let eps = image(&eps, 4, 4);
        let g = Tensor::full(&[1, 1, 4, 4], gamma);
        let z = sample_forward(&y, &g, &eps).unwrap();
        let back = predict_y_from_eps(&z, &g, &eps).unwrap();
        for (a, b) in back.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()) / gamma.sqrt());
        }
    }

    #[test]
    fn prior_kl_shrinks_with_final_gamma(y in -3.0f64..3.0, g in 1e-6f64..0.99, f in 0.01f64..0.99) {
        let kl = |g: f64| kl_standard_normal(g.sqrt() * y, 1.0 - g);
        prop_assert!(kl(g) >= 0.0);
        prop_assert!(kl(g * f) <= kl(g) + 1e-15);
    }

    #[test]
    fn metrics_are_symmetric(
        a in prop::collection::vec(0.0f64..1.0, 32 * 32),
        b in prop::collection::vec(0.0f64..1.0, 32 * 32),
    ) {
        let (a, b) = (image(&a, 32, 32), image(&b, 32, 32));
        let cfg = MetricConfig { data_range: 1.0, scales: 2 };
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!((ms_ssim(&a, &b, &cfg).unwrap() - ms_ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aggregates_are_sample_means(vals in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 16 * 16), 2..5)) {
        let truth = image(&vec![0.5; 256], 16, 16);
        let items: Vec<(String, Tensor, Tensor)> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| (i.to_string(), truth.clone(), image(v, 16, 16)))
            .collect();
        let cfg = MetricConfig { data_range: 1.0, scales: 1 };
        let r = MetricReport::evaluate(&items, &cfg).unwrap();
        let n = r.per_sample.len() as f64;
        let mean_mae = r.per_sample.iter().map(|s| s.mae).sum::<f64>() / n;
        let mean_ssim = r.per_sample.iter().map(|s| s.ms_ssim).sum::<f64>() / n;
        prop_assert!((r.aggregate.mae - mean_mae).abs() < 1e-12);
        prop_assert!((r.aggregate.ms_ssim - mean_ssim).abs() < 1e-12);
    }

    #[test]
    fn npy_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut r) * 1e3 - 5e2).collect();
        let t = Tensor::new(&shape, data).unwrap();
        let bytes = npy_bytes(&t);
        prop_assert_eq!(bytes.len() % 64, (8 * n) % 64);
        prop_assert_eq!(parse_npy(&bytes).unwrap(), t);
    }

    #[test]
    fn beta_mode_text_roundtrip(start in 1e-5f64..0.5, span in 0.0f64..0.4) {
        for mode in [BetaMode::LearnedOverT, BetaMode::RatioExact, BetaMode::FixedLinear { start, end: start + span }] {
            prop_assert_eq!(mode.to_string().parse::<BetaMode>().unwrap(), mode);
        }
    }
}

#[test]
fn schedule_map_follows_input_resolution() {
    let (store, model) = learned(ScheduleMode::Pixelwise, 0);
    let s = model.bind(&store);
    let small = s.lambda_map(&Tensor::zeros(&[1, 2, 8, 8])).unwrap();
    let large = s.lambda_map(&Tensor::zeros(&[1, 2, 32, 16])).unwrap();
    assert_eq!(small.shape(), [1, 1, 8, 8]);
    assert_eq!(large.shape(), [1, 1, 32, 16]);
}
