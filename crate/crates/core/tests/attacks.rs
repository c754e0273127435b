mod common;

use common::oracles;
use labaug::attacks::{self, adversarial_training_step, AttackConfig, AttackFamily, LogitMode};
use labaug::data::synthesize_shapes;
use labaug::nn::{Arch, Model, ModelConfig};
use labaug::train::{self, supervised_step, BatchTargets, Regime, TrainConfig, Velocity};
use labaug::Tensor;
use rand::Rng;

fn tiny_model(k: usize, m: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(Arch::Mlp, k, m);
    cfg.input_shape = [1, 4, 4];
    cfg.hidden = vec![8];
    cfg.init_seed = seed;
    Model::new(cfg).unwrap()
}

fn random_batch(rng: &mut impl Rng, n: usize, k: usize) -> (Tensor<f32>, Vec<usize>) {
    let x = Tensor::from_fn(vec![n, 1, 4, 4], |_| rng.random::<f32>());
    let y = (0..n).map(|_| rng.random_range(0..k)).collect();
    (x, y)
}

#[test]
fn adversarial_inputs_stay_in_ball_and_unit_box() {
    let mut rng = labaug::seed::rng(11);
    for case in 0..1000u64 {
        let model = tiny_model(3, 2, case);
        let (x, y) = random_batch(&mut rng, 4, 3);
        let eps: f64 = rng.random_range(0.0..0.5);
        let mut cfg = if rng.random_bool(0.5) {
            AttackConfig::fgsm(eps)
        } else {
            AttackConfig::pgd(eps, rng.random_range(1..6))
        };
        if rng.random_bool(0.5) {
            cfg.logit_mode = LogitMode::FullKm;
        }
        let out = attacks::attack(&model, &x, &y, &cfg, case).unwrap();
        for (a, o) in out.adversarial.data().iter().zip(x.data()) {
            assert!((*a as f64 - *o as f64).abs() <= eps, "case {case}");
            assert!((0.0..=1.0).contains(a), "case {case}");
        }
    }
}

#[test]
fn single_step_pgd_is_fgsm() {
    let mut rng = labaug::seed::rng(5);
    for case in 0..50u64 {
        let model = tiny_model(4, 3, case);
        let (x, y) = random_batch(&mut rng, 8, 4);
        let eps = rng.random_range(0.01..0.3);
        let mut p = AttackConfig::pgd(eps, 1);
        p.step_size = eps;
        p.random_start = false;
        let a = attacks::fgsm(&model, &x, &y, &AttackConfig::fgsm(eps)).unwrap();
        let b = attacks::pgd(&model, &x, &y, &p, case).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
    }
}

/// An MLP whose hidden layer is the identity on non-negative inputs reduces
/// to a linear classifier, so FGSM must follow the sign of its closed-form
/// input gradient.
#[test]
fn fgsm_follows_linear_gradient_sign() {
    let (d, k, n) = (16, 3, 20);
    let mut cfg = ModelConfig::new(Arch::Mlp, k, 0);
    cfg.input_shape = [1, 4, 4];
    cfg.hidden = vec![d];
    let mut model = Model::new(cfg).unwrap();
    let eye = Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    *model.param_mut("fc0.weight").unwrap() = eye;
    let mut rng = labaug::seed::rng(8);
    let w: Vec<f32> = (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
    *model.param_mut("head.weight").unwrap() = Tensor::new(vec![d, k], w.clone()).unwrap();
    *model.param_mut("head.bias").unwrap() = Tensor::new(vec![k], b.clone()).unwrap();

    let x = Tensor::from_fn(vec![n, 1, 4, 4], |_| rng.random_range(0.2f32..0.8));
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let eps = 0.05;
    let out = attacks::fgsm(&model, &x, &y, &AttackConfig::fgsm(eps)).unwrap();

    let f = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let g = oracles::linear_input_gradient(&f(x.data()), &f(&w), &f(&b), &y, d, k);
    let mut checked = 0;
    for ((a, o), gi) in out.adversarial.data().iter().zip(x.data()).zip(&g) {
        if gi.abs() < 1e-5 {
            continue;
        }
        let moved = (*a as f64 - *o as f64) / eps;
        assert!(
            (moved - gi.signum()).abs() < 1e-5,
            "moved {moved} against gradient {gi}"
        );
        checked += 1;
    }
    assert!(checked > n * d / 2);
}

#[test]
fn masked_attack_ignores_operation_head() {
    let mut rng = labaug::seed::rng(21);
    let (k, m) = (4, 3);
    let model = tiny_model(k, m, 2);
    let mut poked = tiny_model(k, m, 2);
    let width = k + m;
    for v in poked
        .param_mut("head.weight")
        .unwrap()
        .data_mut()
        .iter_mut()
        .enumerate()
    {
        if v.0 % width >= k {
            *v.1 = rng.random_range(-5.0..5.0);
        }
    }
    for v in poked.param_mut("head.bias").unwrap().data_mut()[k..].iter_mut() {
        *v = rng.random_range(-5.0..5.0);
    }
    let (x, y) = random_batch(&mut rng, 16, k);
    for cfg in [AttackConfig::fgsm(0.1), AttackConfig::pgd(0.1, 5)] {
        let a = attacks::attack(&model, &x, &y, &cfg, 3).unwrap();
        let b = attacks::attack(&poked, &x, &y, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let mut full = cfg;
        full.logit_mode = LogitMode::FullKm;
        let c = attacks::attack(&poked, &x, &y, &full, 3).unwrap();
        assert_ne!(a.adversarial, c.adversarial);
    }
}

fn trained_shapes_model() -> (Model, labaug::data::Dataset) {
    let train_set = synthesize_shapes(400, 4, 1).unwrap();
    let test_set = synthesize_shapes(200, 4, 2).unwrap();
    let mut model_cfg = ModelConfig::new(Arch::Mlp, 4, 0);
    model_cfg.hidden = vec![64];
    let cfg = TrainConfig {
        regime: Regime::Standard,
        epochs: 4,
        batch_size: 50,
        lr0: 0.05,
        ..TrainConfig::default()
    };
    let out = train::train(&cfg, &model_cfg, &train_set).unwrap();
    (out.model, test_set)
}

fn error_under(model: &Model, x: &Tensor<f32>, y: &[usize], cfg: &AttackConfig) -> f64 {
    let adv = attacks::attack(model, x, y, cfg, 99).unwrap();
    let pred = model.predict(&adv.adversarial).unwrap();
    labaug::metrics::error_rate(&pred.classes, y).unwrap()
}

#[test]
fn more_pgd_steps_do_not_weaken_the_attack() {
    let (model, test) = trained_shapes_model();
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, y) = test.batch(&all);
    let clean = model.predict(&x).unwrap();
    let clean = labaug::metrics::error_rate(&clean.classes, &y).unwrap();
    let errs: Vec<f64> = [1, 5, 40]
        .iter()
        .map(|&s| error_under(&model, &x, &y, &AttackConfig::pgd(0.01, s)))
        .collect();
    eprintln!("clean {clean}, pgd errors at 1/5/40 steps: {errs:?}");
    assert!(errs[0] >= clean - 1.0);
    assert!(errs[1] >= errs[0] - 1.0 && errs[2] >= errs[1] - 1.0, "{errs:?}");
}

#[test]
fn zero_epsilon_adversarial_step_is_a_standard_step() {
    let mut rng = labaug::seed::rng(31);
    let (x, y) = random_batch(&mut rng, 12, 3);
    let targets = BatchTargets::one_hot(&y, 3);
    let mut a = tiny_model(3, 0, 4);
    let mut b = tiny_model(3, 0, 4);
    let mut va = Velocity::zeros_like(a.params());
    let mut vb = Velocity::zeros_like(b.params());
    for family in [AttackFamily::Fgsm, AttackFamily::Pgd] {
        let cfg = match family {
            AttackFamily::Fgsm => AttackConfig::fgsm(0.0),
            AttackFamily::Pgd => AttackConfig::pgd(0.0, 10),
        };
        for _ in 0..3 {
            let sa = adversarial_training_step(&mut a, &mut va, &x, &y, &targets, &cfg, 0.1, 0.9, 7).unwrap();
            let sb = supervised_step(&mut b, &mut vb, &x, &y, &targets, 0.1, 0.9).unwrap();
            assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());
        }
    }
    assert_eq!(a.params(), b.params());
}

#[test]
fn adversarial_training_stays_finite() {
    let mut rng = labaug::seed::rng(41);
    let mut model = tiny_model(3, 0, 5);
    let mut vel = Velocity::zeros_like(model.params());
    let cfg = AttackConfig::pgd(0.3, 3);
    for step in 0..100u64 {
        let (x, y) = random_batch(&mut rng, 8, 3);
        let targets = BatchTargets::one_hot(&y, 3);
        let s = adversarial_training_step(&mut model, &mut vel, &x, &y, &targets, &cfg, 0.1, 0.9, step).unwrap();
        assert!(s.loss.is_finite());
    }
    assert!(model
        .params()
        .iter()
        .all(|p| p.tensor.data().iter().all(|v| v.is_finite())));
}

/// Two separable clusters; FGSM training with eps below the margin should
/// still learn them.
#[test]
fn fgsm_training_learns_separable_toy() {
    let mut rng = labaug::seed::rng(51);
    let n = 64;
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Tensor::from_fn(vec![n, 1, 4, 4], |i| {
        let centre = if y[i / 16] == 0 { 0.2 } else { 0.8 };
        centre + rng.random_range(-0.1f32..0.1)
    });
    let targets = BatchTargets::one_hot(&y, 2);
    let mut model = tiny_model(2, 0, 6);
    let mut vel = Velocity::zeros_like(model.params());
    let cfg = AttackConfig::fgsm(0.1);
    for step in 0..150 {
        adversarial_training_step(&mut model, &mut vel, &x, &y, &targets, &cfg, 0.05, 0.9, step).unwrap();
    }
    assert_eq!(error_under(&model, &x, &y, &cfg), 0.0);
}

#[test]
fn flat_loss_reports_zero_gradient() {
    let mut model = tiny_model(3, 0, 7);
    for p in model.params_mut() {
        p.tensor.data_mut().fill(0.0);
    }
    let mut rng = labaug::seed::rng(61);
    let (x, y) = random_batch(&mut rng, 5, 3);
    for cfg in [AttackConfig::fgsm(0.1), AttackConfig::pgd(0.1, 4)] {
        let out = attacks::attack(&model, &x, &y, &cfg, 0).unwrap();
        assert!(out.zero_gradient);
        assert_eq!(out.adversarial, x);
    }
    let live = tiny_model(3, 0, 7);
    assert!(
        !attacks::fgsm(&live, &x, &y, &AttackConfig::fgsm(0.1))
            .unwrap()
            .zero_gradient
    );
}
