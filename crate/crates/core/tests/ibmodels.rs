use std::sync::Arc;

use ibrobust::datasets::{sample_toy_ours, DataSource};
use ibrobust::ibmodels::{
    ceb_loss, init_params, train, vib_loss, Anneal, Duration, EvalMode, InitScheme, Model,
    ModelKind, ModelSpec, Noise, OptimizerConfig, RateEstimator, TrainConfig,
};
use ibrobust::ndtape::{shifted_softplus, Tape, Tensor};
use ibrobust::rng::{self, fill_normal, Purpose};
use ibrobust::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        input_dim: 3,
        hidden: vec![4],
        bottleneck: Some(2),
        num_classes: 3,
        rescale_input: true,
        beta: 0.3,
        rho: 0.5,
        samples: 4,
        rate_estimator: RateEstimator::Analytic,
    }
}

fn initialized(spec: ModelSpec, seed: u64) -> Model {
    let mut m = Model::new(spec).unwrap();
    init_params(&mut m, InitScheme::XavierUniform, seed);
    // Nonzero biases so their gradients are exercised too.
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in &mut m.params.tensors {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    m
}

fn batch(n: usize, d: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|i| i % 3).collect();
    (x, y)
}

fn noise_seeded(seed: u64) -> rng::StreamRng {
    rng::stream(seed, Purpose::TrainNoise, 0, 0, 0)
}

/// Index of the VIB head tensors: (weight, bias).
fn head_index(spec: &ModelSpec) -> usize {
    2 * spec.hidden.len()
}

/// Bias that makes the softplus head output `sigma` exactly in exact arithmetic.
fn sigma_bias(sigma: f64) -> f64 {
    sigma.exp_m1().ln() + 5.0
}

#[test]
fn zero_final_layer_encodes_prior_like_gaussian() {
    let spec = small_spec(ModelKind::Vib);
    let mut m = initialized(spec.clone(), 1);
    let h = head_index(&spec);
    m.params.tensors[h] = Tensor::zeros(m.params.tensors[h].shape().to_vec());
    m.params.tensors[h + 1] = Tensor::zeros(m.params.tensors[h + 1].shape().to_vec());
    let (x, _) = batch(5, 3, 2);
    let (mu, sigma) = m.encode(&x).unwrap();
    assert_eq!(mu.shape(), &[5, 2]);
    assert!(mu.data().iter().all(|&v| v == 0.0));
    let expected = (1.0 + (-5.0f64).exp()).ln();
    assert!((expected - 0.0067).abs() < 1e-4);
    assert!(sigma.data().iter().all(|&s| (s - expected).abs() < 1e-15));
}

#[test]
fn ceb_encoder_has_unit_variance() {
    let m = initialized(small_spec(ModelKind::Ceb), 3);
    let (x, _) = batch(7, 3, 4);
    let (mu, sigma) = m.encode(&x).unwrap();
    assert_eq!(mu.shape(), &[7, 2]);
    assert!(sigma.data().iter().all(|&s| s == 1.0));
}

#[test]
fn rescaled_half_input_is_zero_preactivation() {
    // With zero weights except the first layer, 0.5 inputs give zero hidden
    // activations, hence the decoder bias alone sets the logits.
    let spec = small_spec(ModelKind::Det);
    let mut m = initialized(spec, 5);
    for t in &mut m.params.tensors {
        if t.rank() == 1 {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }
    let x = Tensor::full(vec![1, 3], 0.5);
    let tape = Tape::new();
    let bound = m.bind(&tape, false);
    let (h, _) = bound.encode(&tape.constant(x)).unwrap();
    assert!(h.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_rejects_wrong_width() {
    let m = initialized(small_spec(ModelKind::Vib), 1);
    assert!(matches!(m.encode(&Tensor::zeros(vec![2, 4])), Err(Error::Shape { .. })));
}

#[test]
fn vib_rate_vanishes_at_prior() {
    let spec = small_spec(ModelKind::Vib);
    let mut m = initialized(spec.clone(), 1);
    let h = head_index(&spec);
    m.params.tensors[h] = Tensor::zeros(m.params.tensors[h].shape().to_vec());
    m.params.tensors[h + 1] = Tensor::vector(vec![0.0, 0.0, sigma_bias(1.0), sigma_bias(1.0)]);
    let (x, y) = batch(6, 3, 1);
    let (_, _, rate) = vib_loss(&m, &x, &y, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
    assert!(rate.abs() < 1e-12, "rate {rate}");
}

#[test]
fn vib_beta_zero_loss_is_ce() {
    let mut spec = small_spec(ModelKind::Vib);
    spec.beta = 0.0;
    let m = initialized(spec, 2);
    let (x, y) = batch(6, 3, 1);
    let (loss, ce, rate) = vib_loss(&m, &x, &y, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
    assert!(rate > 0.0);
    assert_eq!(loss, ce);
}

#[test]
fn analytic_kl_nonnegative_and_matches_closed_form() {
    for seed in 0..50 {
        let m = initialized(small_spec(ModelKind::Vib), seed);
        let (x, y) = batch(4, 3, seed);
        let (mu, sigma) = m.encode(&x).unwrap();
        let oracle: f64 = mu
            .data()
            .iter()
            .zip(sigma.data())
            .map(|(&u, &s)| 0.5 * (u * u + s * s - 1.0 - 2.0 * s.ln()))
            .sum::<f64>()
            / 4.0;
        let (_, _, rate) = vib_loss(&m, &x, &y, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
        assert!(rate >= 0.0);
        assert!((rate - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }
}

/// Per-sample log-ratio values reproduced from the same noise stream, for a
/// single example.
fn per_sample_ratios(mu: &[f64], sigma: &[f64], log_ratio: impl Fn(&[f64]) -> f64, samples: usize, seed: u64) -> Vec<f64> {
    let k = mu.len();
    let mut r = noise_seeded(seed);
    let mut eps = vec![0.0; samples * k];
    fill_normal(&mut r, &mut eps);
    eps.chunks(k)
        .map(|e| {
            let z: Vec<f64> = (0..k).map(|j| mu[j] + sigma[j] * e[j]).collect();
            log_ratio(&z)
        })
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn sampled_vib_rate_agrees_with_analytic() {
    let s = 100_000;
    let mut spec = small_spec(ModelKind::Vib);
    spec.samples = s;
    let analytic_model = initialized(spec.clone(), 8);
    spec.rate_estimator = RateEstimator::Sampled;
    let sampled_model = Model::with_params(spec, analytic_model.params.clone()).unwrap();
    let (x, y) = batch(1, 3, 3);
    let (_, _, kl) = vib_loss(&analytic_model, &x, &y, &mut Noise::Shared(&mut noise_seeded(1))).unwrap();
    let (_, _, est) = vib_loss(&sampled_model, &x, &y, &mut Noise::Shared(&mut noise_seeded(1))).unwrap();

    let (mu, sigma) = analytic_model.encode(&x).unwrap();
    let (mu, sigma) = (mu.data().to_vec(), sigma.data().to_vec());
    let ratios = per_sample_ratios(
        &mu,
        &sigma,
        |z| {
            (0..z.len())
                .map(|j| {
                    let t = (z[j] - mu[j]) / sigma[j];
                    -0.5 * t * t - sigma[j].ln() + 0.5 * z[j] * z[j]
                })
                .sum()
        },
        s,
        1,
    );
    let (mc, se) = mean_and_se(&ratios);
    assert!((mc - est).abs() < 1e-9, "estimator {est} vs replay {mc}");
    assert!((est - kl).abs() <= 3.0 * se, "estimate {est} analytic {kl} se {se}");
}

#[test]
fn sampled_ceb_rate_agrees_with_analytic() {
    let s = 100_000;
    let mut spec = small_spec(ModelKind::Ceb);
    spec.samples = s;
    let analytic_model = initialized(spec.clone(), 9);
    spec.rate_estimator = RateEstimator::Sampled;
    let sampled_model = Model::with_params(spec, analytic_model.params.clone()).unwrap();
    let (x, _) = batch(1, 3, 5);
    let y = vec![2];
    let (_, _, rate) = ceb_loss(&analytic_model, &x, &y, &mut Noise::Shared(&mut noise_seeded(2))).unwrap();
    let (_, _, est) = ceb_loss(&sampled_model, &x, &y, &mut Noise::Shared(&mut noise_seeded(2))).unwrap();

    let (mu, _) = analytic_model.encode(&x).unwrap();
    let mu = mu.data().to_vec();
    let means = analytic_model.params.tensors.last().unwrap();
    let mu_y = means.row(2).to_vec();
    let oracle = 0.5 * mu.iter().zip(&mu_y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    assert!((rate - oracle).abs() < 1e-12);

    let ones = vec![1.0; mu.len()];
    let ratios = per_sample_ratios(
        &mu,
        &ones,
        |z| {
            (0..z.len())
                .map(|j| 0.5 * ((z[j] - mu_y[j]).powi(2) - (z[j] - mu[j]).powi(2)))
                .sum()
        },
        s,
        2,
    );
    let (mc, se) = mean_and_se(&ratios);
    assert!((mc - est).abs() < 1e-9);
    assert!((est - rate).abs() <= 3.0 * se, "estimate {est} analytic {rate} se {se}");
}

#[test]
fn ceb_rate_zero_when_means_match_and_rho_large_drops_rate() {
    let spec = small_spec(ModelKind::Ceb);
    let mut m = initialized(spec.clone(), 4);
    let (x, _) = batch(1, 3, 6);
    let (mu, _) = m.encode(&x).unwrap();
    let last = m.params.tensors.len() - 1;
    let mut means = m.params.tensors[last].clone();
    means.data_mut()[2..4].copy_from_slice(mu.data());
    m.params.tensors[last] = means;
    let (_, _, rate) = ceb_loss(&m, &x, &[1], &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
    assert!(rate.abs() < 1e-24);

    let mut spec = spec;
    spec.rho = 100.0;
    let m = initialized(spec, 4);
    let (x, y) = batch(5, 3, 7);
    let (loss, ce, rate) = ceb_loss(&m, &x, &y, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
    assert!(rate > 0.0);
    assert!((loss - ce).abs() < 1e-12);
}

#[test]
fn loss_kind_mismatch_is_error() {
    let m = initialized(small_spec(ModelKind::Det), 1);
    let (x, y) = batch(2, 3, 1);
    assert!(vib_loss(&m, &x, &y, &mut Noise::Shared(&mut noise_seeded(0))).is_err());
    assert!(ceb_loss(&m, &x, &y, &mut Noise::Shared(&mut noise_seeded(0))).is_err());
}

/// Central-difference check of the training loss against parameters and inputs.
fn loss_gradient_check(spec: ModelSpec) {
    let model = initialized(spec, 21);
    let (x, y) = batch(3, 3, 22);
    let eval = |m: &Model, x: &Tensor| -> (f64, Vec<Tensor>, Tensor) {
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let xv = tape.leaf(x.clone());
        let mut r = noise_seeded(5);
        let parts = bound.loss(&xv, &y, &mut Noise::Shared(&mut r), None).unwrap();
        let g = tape.backward(&parts.loss).unwrap();
        (parts.loss.item(), bound.params().iter().map(|p| g.wrt(p)).collect(), g.wrt(&xv))
    };
    let (_, pgrads, xgrad) = eval(&model, &x);
    let h = 1e-6;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-2);
    let mut worst: f64 = 0.0;
    for (ti, g) in pgrads.iter().enumerate() {
        for i in 0..g.numel() {
            let mut plus = model.clone();
            plus.params.tensors[ti].data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params.tensors[ti].data_mut()[i] -= h;
            let fd = (eval(&plus, &x).0 - eval(&minus, &x).0) / (2.0 * h);
            worst = worst.max(rel(g.data()[i], fd));
        }
    }
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&model, &plus).0 - eval(&model, &minus).0) / (2.0 * h);
        worst = worst.max(rel(xgrad.data()[i], fd));
    }
    assert!(worst <= 1e-5, "max relative error {worst:e}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    for kind in [ModelKind::Det, ModelKind::Vib, ModelKind::Ceb] {
        for est in [RateEstimator::Analytic, RateEstimator::Sampled] {
            let mut spec = small_spec(kind);
            spec.rate_estimator = est;
            loss_gradient_check(spec);
        }
    }
}

fn tiny_sigma_vib() -> Model {
    let spec = small_spec(ModelKind::Vib);
    let mut m = initialized(spec.clone(), 13);
    let h = head_index(&spec);
    let mut w = m.params.tensors[h].clone();
    let cols = w.shape()[1];
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        if i % cols >= 2 {
            *v = 0.0;
        }
    }
    m.params.tensors[h] = w;
    let mut b = m.params.tensors[h + 1].clone();
    b.data_mut()[2] = sigma_bias(1e-8);
    b.data_mut()[3] = sigma_bias(1e-8);
    m.params.tensors[h + 1] = b;
    m
}

#[test]
fn stochastic_prediction_collapses_to_mean_for_tiny_sigma() {
    let m = tiny_sigma_vib();
    let (x, _) = batch(5, 3, 3);
    let (_, sigma) = m.encode(&x).unwrap();
    assert!(sigma.data().iter().all(|&s| (s - 1e-8).abs() < 1e-12));
    let mean = m.predict(&x, EvalMode::Mean, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
    let stoch = m
        .predict(&x, EvalMode::Stochastic(12), &mut Noise::Shared(&mut noise_seeded(0)))
        .unwrap();
    for (a, b) in mean.data().iter().zip(stoch.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn predictions_are_distributions_and_reproducible() {
    let m = initialized(small_spec(ModelKind::Vib), 17);
    let (x, _) = batch(8, 3, 9);
    for mode in [EvalMode::Mean, EvalMode::Stochastic(12)] {
        let p = m.predict(&x, mode, &mut Noise::Shared(&mut noise_seeded(3))).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let q = m.predict(&x, mode, &mut Noise::Shared(&mut noise_seeded(3))).unwrap();
        assert_eq!(p, q);
    }
    let err = m.predict(&x, EvalMode::Stochastic(0), &mut Noise::Shared(&mut noise_seeded(3)));
    assert!(err.is_err());
}

#[test]
fn stochastic_predictions_with_different_seeds_are_close() {
    let mut spec = small_spec(ModelKind::Vib);
    spec.bottleneck = Some(3);
    let m = initialized(spec, 19);
    let (x, _) = batch(4, 3, 11);
    let a = m
        .predict(&x, EvalMode::Stochastic(10_000), &mut Noise::Shared(&mut noise_seeded(1)))
        .unwrap();
    let b = m
        .predict(&x, EvalMode::Stochastic(10_000), &mut Noise::Shared(&mut noise_seeded(2)))
        .unwrap();
    assert_ne!(a, b);
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() <= 5.0 / 100.0);
    }
}

#[test]
fn log_probs_are_log_of_predictions() {
    let m = initialized(small_spec(ModelKind::Vib), 23);
    let (x, _) = batch(6, 3, 12);
    for mode in [EvalMode::Mean, EvalMode::Stochastic(7)] {
        let p = m.predict(&x, mode, &mut Noise::Shared(&mut noise_seeded(4))).unwrap();
        let lp = m.log_probs(&x, mode, &mut Noise::Shared(&mut noise_seeded(4))).unwrap();
        for (a, b) in p.data().iter().zip(lp.data()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }
}

#[test]
fn det_model_prediction_ignores_mode() {
    let m = initialized(small_spec(ModelKind::Det), 29);
    let (x, _) = batch(6, 3, 13);
    let a = m.predict(&x, EvalMode::Mean, &mut Noise::Shared(&mut noise_seeded(1))).unwrap();
    let b = m
        .predict(&x, EvalMode::Stochastic(12), &mut Noise::Shared(&mut noise_seeded(2)))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn per_example_noise_ignores_batch_composition() {
    let m = initialized(small_spec(ModelKind::Vib), 31);
    let (x, _) = batch(6, 3, 14);
    let streams = |ids: std::ops::Range<u64>| -> Vec<rng::StreamRng> {
        ids.map(|i| rng::stream(0, Purpose::EvalNoise, i, 0, 0)).collect()
    };
    let mut all = streams(0..6);
    let full = m
        .predict(&x, EvalMode::Stochastic(12), &mut Noise::PerExample(&mut all))
        .unwrap();
    let tail = Tensor::new(vec![3, 3], x.data()[9..].to_vec()).unwrap();
    let mut some = streams(3..6);
    let part = m
        .predict(&tail, EvalMode::Stochastic(12), &mut Noise::PerExample(&mut some))
        .unwrap();
    assert_eq!(&full.data()[9..], part.data());
}

#[test]
fn mnist_sized_rows_are_batch_independent() {
    let mut m = Model::new(ModelSpec::mnist_vib(0.01)).unwrap();
    init_params(&mut m, InitScheme::XavierUniform, 0);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![7, 784], (0..7 * 784).map(|_| r.random::<f64>()).collect()).unwrap();
    let full = m.predict(&x, EvalMode::Mean, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
    for i in 0..7 {
        let row = Tensor::new(vec![1, 784], x.row(i).to_vec()).unwrap();
        let one = m.predict(&row, EvalMode::Mean, &mut Noise::Shared(&mut noise_seeded(0))).unwrap();
        assert_eq!(one.data(), full.row(i));
    }
}

#[test]
fn anneal_interpolates_on_natural_scale() {
    let vib = ModelSpec::mnist_vib(1e-2);
    let a = Anneal { initial: 1e-8, ramp: 10.0 };
    assert!((a.weight(&vib, 0.0) - 1e-8).abs() < 1e-20);
    assert!((a.weight(&vib, 5.0) / 1e-5 - 1.0).abs() < 1e-9);
    assert!((a.weight(&vib, 50.0) - 1e-2).abs() < 1e-15);
    let ceb = ModelSpec::mnist_ceb(5.0);
    let a = Anneal { initial: 100.0, ramp: 10.0 };
    assert!((a.weight(&ceb, 5.0) / (-52.5f64).exp() - 1.0).abs() < 1e-9);
    assert!((a.weight(&ceb, 10.0) / (-5.0f64).exp() - 1.0).abs() < 1e-12);
}

#[test]
fn training_reduces_loss_on_fixed_toy_batch() {
    let data = sample_toy_ours(100, 3).unwrap();
    let source = DataSource::Fixed(Arc::new(data));
    let mut model = Model::new(ModelSpec::toy_vib(2, 2, 1e-3)).unwrap();
    init_params(&mut model, InitScheme::XavierUniform, 0);
    let mut config = TrainConfig::toy(50, 0);
    config.resample = false;
    config.batch_size = 100;
    let trained = train(model, &source, &config).unwrap();
    assert_eq!(trained.history.len(), 50);
    let first = trained.history.first().unwrap().loss;
    let last = trained.history.last().unwrap().loss;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn toy_linear_recipe_reaches_high_accuracy() {
    let source = DataSource::Toy(ibrobust::datasets::ToyTask::Ours);
    let model = Model::new(ModelSpec::toy_linear(2)).unwrap();
    let trained = train(model, &source, &TrainConfig::toy(1000, 0)).unwrap();
    assert!(trained.polyak.is_none());
    let test = sample_toy_ours(10_000, 99).unwrap();
    let p = trained
        .eval_model()
        .predict(test.inputs(), EvalMode::Mean, &mut Noise::Shared(&mut noise_seeded(0)))
        .unwrap();
    let correct = p
        .data()
        .chunks(2)
        .zip(test.labels())
        .filter(|(row, &y)| ibrobust::ibmodels::argmax(row) == y)
        .count();
    let acc = correct as f64 / 10_000.0;
    assert!(acc >= 0.95, "clean accuracy {acc}");
}

#[test]
fn training_is_deterministic_and_keeps_polyak_copy() {
    let data = sample_toy_ours(256, 4).unwrap();
    let source = DataSource::Fixed(Arc::new(data));
    let mut model = Model::new(ModelSpec::toy_vib(2, 2, 1e-2)).unwrap();
    init_params(&mut model, InitScheme::XavierUniform, 2);
    let mut config = TrainConfig::mnist(7);
    config.duration = Duration::Epochs(3);
    config.batch_size = 64;
    config.anneal = Some(Anneal { initial: 1e-8, ramp: 2.0 });
    let a = train(model.clone(), &source, &config).unwrap();
    let b = train(model, &source, &config).unwrap();
    assert_eq!(a.raw, b.raw);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    assert!(a.polyak.is_some());
    assert_eq!(a.eval_model(), a.polyak.as_ref().unwrap());
    assert_ne!(a.eval_model(), &a.raw);
}

#[test]
fn divergence_reports_last_finite_parameters() {
    let source = DataSource::Toy(ibrobust::datasets::ToyTask::Ours);
    let model = Model::new(ModelSpec::toy_linear(2)).unwrap();
    let mut config = TrainConfig::toy(200, 0);
    config.optimizer = OptimizerConfig::Sgd { lr: 1e307, momentum: 0.9, nesterov: true };
    match train(model, &source, &config) {
        Err(Error::Diverged { last_finite, .. }) => assert!(last_finite.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.history)),
    }
}

#[test]
fn mismatched_dataset_is_rejected() {
    let source = DataSource::Fixed(Arc::new(sample_toy_ours(10, 0).unwrap()));
    let model = Model::new(ModelSpec::toy_linear(3)).unwrap();
    assert!(matches!(train(model, &source, &TrainConfig::toy(1, 0)), Err(Error::Data(_)) | Err(Error::InvalidArgument(_))));
}

#[test]
fn shifted_softplus_sigma_bias_helper() {
    assert!((shifted_softplus(sigma_bias(1.0)) - 1.0).abs() < 1e-14);
}
