use ibrobust::attacks::{
    auto_pgd, check_contract, cross_entropy, ensemble_aa_mt, fgs, multi_targeted, pgd,
    robust_accuracy, run_attack, standard_accuracy, write_records_csv, AttackConfig, Bounds,
    EnsembleConfig, Family, LossKind,
};
use ibrobust::ibmodels::{
    argmax, init_params, EvalMode, InitScheme, Model, ModelKind, ModelSpec, RateEstimator,
};
use ibrobust::ndtape::Tensor;
use ibrobust::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(input_dim: usize, classes: usize, w: Vec<f64>, b: Vec<f64>) -> Model {
    let spec = ModelSpec {
        kind: ModelKind::Det,
        input_dim,
        hidden: vec![],
        bottleneck: None,
        num_classes: classes,
        rescale_input: false,
        beta: 0.0,
        rho: 0.0,
        samples: 12,
        rate_estimator: RateEstimator::Analytic,
    };
    let mut m = Model::new(spec).unwrap();
    m.params.tensors[0] = Tensor::new(vec![input_dim, classes], w).unwrap();
    m.params.tensors[1] = Tensor::vector(b);
    m
}

fn mlp(kind: ModelKind, d: usize, classes: usize, seed: u64) -> Model {
    let spec = ModelSpec {
        kind,
        input_dim: d,
        hidden: vec![16],
        bottleneck: Some(4),
        num_classes: classes,
        rescale_input: true,
        beta: 0.01,
        rho: 1.0,
        samples: 6,
        rate_estimator: RateEstimator::Analytic,
    };
    let mut m = Model::new(spec).unwrap();
    init_params(&mut m, InitScheme::XavierUniform, seed);
    m
}

fn uniform_inputs(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(0.05..0.95)).collect()).unwrap()
}

/// Labels equal to the model's own clean prediction, so attacks start from
/// correctly classified points.
fn own_labels(model: &Model, x: &Tensor) -> Vec<usize> {
    let p = model
        .predict(x, EvalMode::Mean, &mut ibrobust::ibmodels::Noise::PerExample(&mut []))
        .unwrap_or_else(|_| {
            let mut r = ibrobust::rng::stream(0, ibrobust::rng::Purpose::EvalNoise, 0, 0, 0);
            model
                .predict(x, EvalMode::Mean, &mut ibrobust::ibmodels::Noise::Shared(&mut r))
                .unwrap()
        });
    let c = p.shape()[1];
    p.data().chunks(c).map(argmax).collect()
}

fn ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[test]
fn zero_epsilon_is_identity() {
    let model = mlp(ModelKind::Det, 5, 3, 1);
    let x = uniform_inputs(20, 5, 2);
    let mut y = own_labels(&model, &x);
    for l in y.iter_mut().step_by(3) {
        *l = (*l + 1) % 3;
    }
    for family in [Family::Fgs, Family::Pgd, Family::AutoPgd, Family::MultiTargeted] {
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.01,
            steps: 5,
            restarts: 2,
            ..AttackConfig::default()
        };
        let res = run_attack(&model, &x, &y, &ids(20), family, &cfg).unwrap();
        assert_eq!(res.x_adv, x, "{family}");
        for i in 0..20 {
            assert_eq!(res.success[i], i % 3 == 0, "{family} example {i}");
        }
    }
}

#[test]
fn fgs_on_linear_binary_model_matches_closed_form() {
    // No tied columns: a zero weight difference leaves the gradient sign to rounding.
    let w = vec![1.5, -0.5, -2.0, 0.0, 0.3, 0.9, 0.0, 1.0];
    let model = linear(4, 2, w.clone(), vec![0.1, -0.2]);
    let x = uniform_inputs(50, 4, 3);
    let y = own_labels(&model, &x);
    let eps = 0.07;
    let res = fgs(&model, &x, &y, &AttackConfig::fgs(eps, 0)).unwrap();
    for i in 0..50 {
        let other = 1 - y[i];
        for j in 0..4 {
            let dir = w[j * 2 + other] - w[j * 2 + y[i]];
            let expected = (x.row(i)[j] + eps * dir.signum()).clamp(0.0, 1.0);
            assert_eq!(res.x_adv.row(i)[j], expected, "example {i} coord {j} y {} x {}", y[i], x.row(i)[j]);
        }
    }
}

/// Worst-case cross-entropy of a linear model over the ε-box intersected
/// with `[0,1]`.
fn linear_worst_ce(w: &[f64], b: &[f64], classes: usize, x: &[f64], y: usize, eps: f64) -> f64 {
    // Binary: the loss is monotone in z_other - z_y, maximised at a vertex.
    let other = 1 - y;
    let xs: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let dir = w[j * classes + other] - w[j * classes + y];
            if dir > 0.0 {
                (v + eps).min(1.0)
            } else if dir < 0.0 {
                (v - eps).max(0.0)
            } else {
                v
            }
        })
        .collect();
    let logits: Vec<f64> = (0..classes)
        .map(|c| b[c] + xs.iter().enumerate().map(|(j, v)| v * w[j * classes + c]).sum::<f64>())
        .collect();
    cross_entropy(&logits, y)
}

#[test]
fn pgd_and_fgs_reach_linear_worst_case() {
    let w = vec![1.5, -0.5, -2.0, 0.0, 0.3, 0.9, 0.4, 1.0];
    let b = vec![0.1, -0.2];
    let model = linear(4, 2, w.clone(), b.clone());
    let x = uniform_inputs(40, 4, 5);
    let y = own_labels(&model, &x);
    let eps = 0.1;
    let cfg = AttackConfig {
        epsilon: eps,
        alpha: 0.025,
        steps: 10,
        restarts: 2,
        early_stop: false,
        ..AttackConfig::default()
    };
    let p = pgd(&model, &x, &y, &cfg).unwrap();
    let f = fgs(&model, &x, &y, &AttackConfig::fgs(eps, 0)).unwrap();
    for i in 0..40 {
        let oracle = linear_worst_ce(&w, &b, 2, x.row(i), y[i], eps);
        assert!((p.loss[i] - oracle).abs() <= 1e-6, "pgd {} vs {oracle}", p.loss[i]);
        assert!((f.loss[i] - oracle).abs() <= 1e-6, "fgs {} vs {oracle}", f.loss[i]);
    }
}

#[test]
fn multi_targeted_flips_to_nearest_linear_boundary() {
    let (d, c) = (5, 4);
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let w: Vec<f64> = (0..d * c).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let model = linear(d, c, w.clone(), b.clone());
    let mut checked = 0;
    for seed in 0..40u64 {
        let x = uniform_inputs(1, d, 100 + seed);
        let logits: Vec<f64> = (0..c)
            .map(|k| b[k] + (0..d).map(|j| x.row(0)[j] * w[j * c + k]).sum::<f64>())
            .collect();
        let y = argmax(&logits);
        // Minimal L∞ radius to make class t beat y, unbounded domain.
        let need: Vec<f64> = (0..c)
            .map(|t| {
                if t == y {
                    return f64::INFINITY;
                }
                let l1: f64 = (0..d).map(|j| (w[j * c + t] - w[j * c + y]).abs()).sum();
                (logits[y] - logits[t]) / l1
            })
            .collect();
        let nearest = (0..c).min_by(|&a, &b| need[a].total_cmp(&need[b])).unwrap();
        let mut sorted = need.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[1] < sorted[0] * 1.2 {
            continue;
        }
        let eps = sorted[0] * 1.1;
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: eps / 4.0,
            steps: 40,
            restarts: c - 1,
            loss: LossKind::Margin(None),
            bounds: Bounds::Unbounded,
            ..AttackConfig::default()
        };
        let res = multi_targeted(&model, &x, &[y], &cfg).unwrap();
        assert!(res.success[0]);
        let adv_logits: Vec<f64> = (0..c)
            .map(|k| b[k] + (0..d).map(|j| res.x_adv.row(0)[j] * w[j * c + k]).sum::<f64>())
            .collect();
        assert_eq!(argmax(&adv_logits), nearest);
        // Nothing smaller than the analytic radius breaks it.
        let tight = AttackConfig { epsilon: sorted[0] * 0.99, alpha: sorted[0] / 4.0, ..cfg };
        assert!(!multi_targeted(&model, &x, &[y], &tight).unwrap().success[0]);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn two_class_multi_targeted_is_margin_pgd() {
    let model = linear(3, 2, vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.4], vec![0.0, 0.0]);
    let x = uniform_inputs(10, 3, 8);
    let y = own_labels(&model, &x);
    let base = AttackConfig {
        epsilon: 0.1,
        alpha: 0.02,
        steps: 10,
        restarts: 3,
        loss: LossKind::Margin(None),
        early_stop: false,
        ..AttackConfig::default()
    };
    let a = multi_targeted(&model, &x, &y, &base).unwrap();
    assert!(a.loss.iter().all(|l| l.is_finite()));
    for i in 0..10 {
        let t = 1 - y[i];
        let targeted = AttackConfig { loss: LossKind::Margin(Some(t)), ..base.clone() };
        let b = multi_targeted(&model, &x.clone(), &y, &targeted).unwrap();
        assert_eq!(a.x_adv.row(i), b.x_adv.row(i));
    }
}

#[test]
fn dlr_rejects_two_classes() {
    let model = linear(2, 2, vec![1.0, -1.0, 0.5, 0.5], vec![0.0, 0.0]);
    let x = uniform_inputs(2, 2, 1);
    let cfg = AttackConfig { epsilon: 0.1, loss: LossKind::Dlr, ..AttackConfig::default() };
    assert!(auto_pgd(&model, &x, &[0, 1], &cfg).is_err());
    let ens = EnsembleConfig { epsilon: 0.1, ..EnsembleConfig::default() };
    assert!(ensemble_aa_mt(&model, &x, &[0, 1], &ids(2), &ens).is_err());
}

#[test]
fn auto_pgd_beats_pgd_on_most_examples() {
    let model = mlp(ModelKind::Det, 10, 3, 4);
    let x = uniform_inputs(60, 10, 12);
    let y = own_labels(&model, &x);
    let base = AttackConfig {
        epsilon: 0.1,
        alpha: 0.025,
        steps: 100,
        restarts: 5,
        early_stop: false,
        ..AttackConfig::default()
    };
    let a = auto_pgd(&model, &x, &y, &base).unwrap();
    let p = pgd(&model, &x, &y, &base).unwrap();
    let wins = (0..60).filter(|&i| a.loss[i] >= p.loss[i] - 1e-12).count();
    assert!(wins as f64 >= 0.9 * 60.0, "apgd >= pgd on {wins}/60");
}

#[test]
fn restart_curve_is_nested() {
    let model = mlp(ModelKind::Vib, 6, 3, 9);
    let x = uniform_inputs(40, 6, 13);
    let y = own_labels(&model, &x);
    let cfg = |restarts| AttackConfig {
        epsilon: 0.08,
        alpha: 0.02,
        steps: 5,
        restarts,
        ..AttackConfig::default()
    };
    let r1 = pgd(&model, &x, &y, &cfg(1)).unwrap();
    let r2 = pgd(&model, &x, &y, &cfg(2)).unwrap();
    let r8 = pgd(&model, &x, &y, &cfg(8)).unwrap();
    assert!(r2.robust_accuracy() <= r1.robust_accuracy());
    for i in 0..40 {
        assert!(!r1.success[i] || r2.success[i]);
        assert!(!r2.success[i] || r8.success[i]);
    }
    let curve: Vec<f64> = (1..=8).map(|r| r8.accuracy_at_restarts(r)).collect();
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(curve[0], r1.robust_accuracy());
    assert_eq!(curve[1], r2.robust_accuracy());

    let no_stop = pgd(&model, &x, &y, &AttackConfig { early_stop: false, ..cfg(8) }).unwrap();
    assert_eq!(no_stop.success, r8.success);
    assert_eq!(no_stop.broken_after, r8.broken_after);
}

#[test]
fn results_do_not_depend_on_chunking_or_threads() {
    let model = mlp(ModelKind::Vib, 6, 3, 2);
    let x = uniform_inputs(37, 6, 4);
    let y = own_labels(&model, &x);
    let cfg = AttackConfig {
        epsilon: 0.1,
        alpha: 0.03,
        steps: 4,
        restarts: 3,
        grad_mode: Some(EvalMode::Stochastic(4)),
        eval_mode: Some(EvalMode::Stochastic(4)),
        ..AttackConfig::default()
    };
    let base = pgd(&model, &x, &y, &cfg).unwrap();
    assert_eq!(base, pgd(&model, &x, &y, &cfg).unwrap());
    for chunk in [1, 5, 64] {
        let other = pgd(&model, &x, &y, &AttackConfig { chunk_size: chunk, ..cfg.clone() }).unwrap();
        assert_eq!(base, other, "chunk size {chunk}");
    }
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let other = pool.install(|| pgd(&model, &x, &y, &cfg).unwrap());
        assert_eq!(base, other, "{threads} threads");
    }
}

#[test]
fn tiny_sigma_stochastic_gradients_match_mean_mode() {
    let mut model = mlp(ModelKind::Vib, 6, 3, 6);
    // Zero the sigma half of the head and pin sigma to 1e-9.
    let h = 2;
    let k = 4;
    let mut w = model.params.tensors[h].clone();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        if i % (2 * k) >= k {
            *v = 0.0;
        }
    }
    model.params.tensors[h] = w;
    let mut b = model.params.tensors[h + 1].clone();
    for v in &mut b.data_mut()[k..] {
        *v = (1e-9f64).exp_m1().ln() + 5.0;
    }
    model.params.tensors[h + 1] = b;
    let x = uniform_inputs(15, 6, 7);
    let y = own_labels(&model, &x);
    let base = AttackConfig {
        epsilon: 0.1,
        alpha: 0.02,
        steps: 6,
        restarts: 1,
        eval_mode: Some(EvalMode::Mean),
        ..AttackConfig::default()
    };
    let mean = pgd(&model, &x, &y, &AttackConfig { grad_mode: Some(EvalMode::Mean), ..base.clone() }).unwrap();
    let stoch = pgd(&model, &x, &y, &AttackConfig { grad_mode: Some(EvalMode::Stochastic(1)), ..base }).unwrap();
    for (a, b) in mean.x_adv.data().iter().zip(stoch.x_adv.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    for (a, b) in mean.loss.iter().zip(&stoch.loss) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn robust_accuracy_contract_and_identity() {
    let model = mlp(ModelKind::Vib, 6, 3, 3);
    let x = uniform_inputs(30, 6, 9);
    let mut y = own_labels(&model, &x);
    y[0] = (y[0] + 1) % 3;
    let mode = EvalMode::Stochastic(12);
    let std = standard_accuracy(&model, &x, &y, &ids(30), mode, 5).unwrap();
    let same = robust_accuracy(&model, &x, &y, &ids(30), mode, 5, 0.1, Bounds::UNIT, |x, _| Ok(x.clone())).unwrap();
    assert_eq!(std, same);

    let outside = robust_accuracy(&model, &x, &y, &ids(30), mode, 5, 0.1, Bounds::UNIT, |x, _| {
        Ok(x.map(|v| v + 0.2))
    });
    assert!(matches!(outside, Err(Error::Contract(_))));
    let out_of_box = robust_accuracy(&model, &x, &y, &ids(30), mode, 5, 2.0, Bounds::UNIT, |x, _| {
        Ok(x.map(|v| v - 1.0))
    });
    assert!(matches!(out_of_box, Err(Error::Contract(_))));
}

#[test]
fn ensemble_short_circuits_and_intersects() {
    let model = mlp(ModelKind::Det, 6, 4, 5);
    let x = uniform_inputs(30, 6, 21);
    let y = own_labels(&model, &x);
    let cfg = EnsembleConfig {
        epsilon: 0.05,
        apgd_steps: 10,
        apgd_restarts: 2,
        mt_steps: 10,
        mt_restarts: 3,
        ..EnsembleConfig::default()
    };
    let ens = ensemble_aa_mt(&model, &x, &y, &ids(30), &cfg).unwrap();
    assert_eq!(ens.standard_accuracy(), 1.0);
    assert_eq!(ens.stages.len(), 3);
    assert_eq!(ens.stages[0].attacked, 30);
    for w in ens.stages.windows(2) {
        assert_eq!(w[1].attacked, w[0].attacked - w[0].broken);
    }
    check_contract(&x, &ens.x_adv, 0.05, Bounds::UNIT).unwrap();

    // Each stage run alone on every example.
    let stage = |family, loss, steps, restarts, alpha, tag| {
        let c = AttackConfig {
            epsilon: 0.05,
            alpha,
            steps,
            restarts,
            loss,
            stream_tag: tag,
            ..AttackConfig::default()
        };
        run_attack(&model, &x, &y, &ids(30), family, &c).unwrap()
    };
    let alone = [
        stage(Family::AutoPgd, LossKind::CrossEntropy, 10, 2, 0.1, 1),
        stage(Family::AutoPgd, LossKind::Dlr, 10, 2, 0.1, 2),
        stage(Family::MultiTargeted, LossKind::Margin(None), 10, 3, 0.05 / 4.0, 3),
    ];
    for res in &alone {
        assert!(ens.robust_accuracy() <= res.robust_accuracy());
        for i in 0..30 {
            assert!(!ens.robust[i] || !res.success[i]);
        }
    }

    // A model that gets everything wrong: nothing is attacked.
    let wrong: Vec<usize> = y.iter().map(|&l| (l + 1) % 4).collect();
    let none = ensemble_aa_mt(&model, &x, &wrong, &ids(30), &cfg).unwrap();
    assert_eq!(none.robust_accuracy(), 0.0);
    assert!(none.stages.iter().all(|s| s.attacked == 0 && s.broken == 0));
    assert!(none.records.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    write_records_csv(&path, &ens.records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("example_id,stage,restarts_used,success,final_loss,linf_dist\n"));
    assert_eq!(text.lines().count(), ens.records.len() + 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let model = mlp(ModelKind::Det, 3, 3, 0);
    let x = uniform_inputs(2, 3, 0);
    let y = [0, 1];
    let bad = [
        AttackConfig { epsilon: -0.1, ..AttackConfig::default() },
        AttackConfig { epsilon: 0.1, alpha: 0.0, ..AttackConfig::default() },
        AttackConfig { epsilon: 0.1, restarts: 0, ..AttackConfig::default() },
    ];
    for cfg in &bad {
        assert!(pgd(&model, &x, &y, cfg).is_err());
    }
    let outside = x.map(|v| v + 2.0);
    assert!(pgd(&model, &outside, &y, &AttackConfig::pgd(0.1, 1, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn adversarial_inputs_stay_in_ball_and_box(
        seed in 0u64..1000,
        eps in 0.0f64..0.6,
        family_ix in 0usize..4,
        stochastic in any::<bool>(),
    ) {
        let family = [Family::Fgs, Family::Pgd, Family::AutoPgd, Family::MultiTargeted][family_ix];
        let model = mlp(ModelKind::Vib, 5, 3, seed);
        let x = uniform_inputs(6, 5, seed + 1);
        let y: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 3).collect();
        let mode = if stochastic { EvalMode::Stochastic(3) } else { EvalMode::Mean };
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: (eps / 3.0).max(1e-3),
            steps: 3,
            restarts: 2,
            grad_mode: Some(mode),
            seed,
            ..AttackConfig::default()
        };
        let res = run_attack(&model, &x, &y, &ids(6), family, &cfg).unwrap();
        for (a, b) in x.data().iter().zip(res.x_adv.data()) {
            prop_assert!((a - b).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(b));
        }
    }
}
