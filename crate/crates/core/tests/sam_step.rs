#![allow(clippy::needless_range_loop)]

use samlab::nn::{build_model, ForwardMode, ModelSpec, TrainableScope};
use samlab::optim::{sam_step, BaseOptimizer, OptimConfig, OptimizerKind, SamOptimizer};
use samlab::perturb::{ascent_step, PerturbSpec, Scope, Variant};
use samlab::{Model, Rng, Tensor};

fn batch(n: usize, d: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let x = (0..n * d).map(|_| rng.normal()).collect();
    let y = (0..n).map(|_| rng.below(classes)).collect();
    (Tensor::new(vec![n, d], x).unwrap(), y)
}

fn model(seed: u64) -> Model {
    build_model(&ModelSpec::mlp_bn(&[4, 6, 5, 3]), seed).unwrap()
}

fn sam_config(scope: Scope, m: Option<usize>) -> OptimConfig {
    let mut cfg = OptimConfig::new(BaseOptimizer::sgd(0.1, 0.9, 5e-4))
        .with_perturb(PerturbSpec::new(Variant::Sam, 0.05, scope));
    cfg.m = m;
    cfg
}

fn run(cfg: OptimConfig, steps: usize) -> Model {
    let mut net = model(1);
    let mut opt = SamOptimizer::new(cfg, &net.registry, net.trainable_mask()).unwrap();
    for s in 0..steps {
        let (x, y) = batch(8, 4, 3, 100 + s as u64);
        sam_step(&mut net, &x, &y, &mut opt, OptimizerKind::Sam, 0.1, 0.1).unwrap();
    }
    net
}

#[test]
fn m_equal_to_batch_matches_plain_path_bitwise() {
    let a = run(sam_config(Scope::All, None), 3);
    let b = run(sam_config(Scope::All, Some(8)), 3);
    assert_eq!(a.params, b.params);
    assert_eq!(a.norm_states, b.norm_states);
}

#[test]
fn two_sub_batches_average_independent_runs() {
    let net = model(2);
    let (x, y) = batch(8, 4, 3, 7);
    let spec = PerturbSpec::new(Variant::Sam, 0.05, Scope::All);
    let mut avg = vec![0.0; net.num_params()];
    for half in 0..2 {
        let rows = Tensor::new(vec![4, 4], x.data()[half * 16..half * 16 + 16].to_vec()).unwrap();
        let ys = &y[half * 4..half * 4 + 4];
        let g = net
            .loss_and_grad(&net.params, &rows, ys, ForwardMode::Train, 0.0, false, None)
            .unwrap()
            .grad;
        let step = ascent_step(&spec, &net.params, &g, &net.registry, None).unwrap();
        let w: Vec<f64> = net.params.iter().zip(&step.perturbation.eps).map(|(a, b)| a + b).collect();
        let gp = net
            .loss_and_grad(&w, &rows, ys, ForwardMode::Train, 0.0, false, None)
            .unwrap()
            .grad;
        for (a, b) in avg.iter_mut().zip(gp) {
            *a += 0.5 * b;
        }
    }
    let expected: Vec<f64> = net.params.iter().zip(&avg).map(|(w, g)| w - 0.1 * g).collect();

    let mut cfg = OptimConfig::new(BaseOptimizer::sgd(0.1, 0.0, 0.0)).with_perturb(spec);
    cfg.m = Some(4);
    let mut trained = net.clone();
    let mut opt = SamOptimizer::new(cfg, &trained.registry, trained.trainable_mask()).unwrap();
    sam_step(&mut trained, &x, &y, &mut opt, OptimizerKind::Sam, 0.1, 0.0).unwrap();
    for (a, b) in trained.params.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn vanishing_rho_is_a_plain_step() {
    let spec = PerturbSpec::new(Variant::Sam, 1e-30, Scope::All);
    let cfg = OptimConfig::new(BaseOptimizer::sgd(0.1, 0.9, 0.0)).with_perturb(spec);
    let mut a = model(3);
    let mut b = a.clone();
    let (x, y) = batch(8, 4, 3, 9);
    let mut opt = SamOptimizer::new(cfg.clone(), &a.registry, a.trainable_mask()).unwrap();
    sam_step(&mut a, &x, &y, &mut opt, OptimizerKind::Sam, 0.1, 0.0).unwrap();
    let mut opt = SamOptimizer::new(cfg, &b.registry, b.trainable_mask()).unwrap();
    sam_step(&mut b, &x, &y, &mut opt, OptimizerKind::Sgd, 0.1, 0.0).unwrap();
    for (p, q) in a.params.iter().zip(&b.params) {
        assert!((p - q).abs() < 1e-9);
    }
}

#[test]
fn step_leaves_the_perturbed_point() {
    let spec = PerturbSpec::new(Variant::Sam, 0.05, Scope::All);
    let cfg = OptimConfig::new(BaseOptimizer::sgd(0.1, 0.0, 0.0)).with_perturb(spec);
    let mut net = model(4);
    let before = net.params.clone();
    let (x, y) = batch(8, 4, 3, 11);
    let g = net
        .loss_and_grad(&before, &x, &y, ForwardMode::Train, 0.0, false, None)
        .unwrap()
        .grad;
    let step = ascent_step(&spec, &before, &g, &net.registry, None).unwrap();
    let w_pert: Vec<f64> = before.iter().zip(&step.perturbation.eps).map(|(a, b)| a + b).collect();
    let gp = net
        .loss_and_grad(&w_pert, &x, &y, ForwardMode::Train, 0.0, false, None)
        .unwrap()
        .grad;
    let mut opt = SamOptimizer::new(cfg, &net.registry, net.trainable_mask()).unwrap();
    sam_step(&mut net, &x, &y, &mut opt, OptimizerKind::Sam, 0.1, 0.0).unwrap();
    for i in 0..before.len() {
        assert_eq!(net.params[i], before[i] - 0.1 * gp[i]);
    }
    // a step that forgot to restore would have moved from the perturbed point
    assert!(net.params.iter().zip(&w_pert).zip(&gp).any(|((w, p), g)| *w != p - 0.1 * g));
}

#[test]
fn short_circuit_is_bit_equivalent() {
    let with = run(sam_config(Scope::OnlyNorm, None), 3);
    let mut cfg = sam_config(Scope::OnlyNorm, None);
    cfg.ascent_short_circuit = false;
    let without = run(cfg, 3);
    assert_eq!(with.params, without.params);
    assert_eq!(with.norm_states, without.norm_states);
}

#[test]
fn identical_runs_are_bit_identical() {
    for scope in [Scope::All, Scope::Random { sparsity: 0.5, seed: 1 }, Scope::FisherTopk { sparsity: 0.3 }] {
        let a = run(sam_config(scope, Some(3)), 4);
        let b = run(sam_config(scope, Some(3)), 4);
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn fix_norm_keeps_affine_parameters() {
    let mut spec = ModelSpec::mlp_bn(&[4, 6, 3]);
    spec.trainable_scope = TrainableScope::FixNorm;
    let mut net = build_model::<f64>(&spec, 0).unwrap();
    let before = net.params.clone();
    let mut opt = SamOptimizer::new(sam_config(Scope::All, None), &net.registry, net.trainable_mask()).unwrap();
    for s in 0..5 {
        let (x, y) = batch(8, 4, 3, s);
        sam_step(&mut net, &x, &y, &mut opt, OptimizerKind::Sam, 0.1, 0.1).unwrap();
    }
    for v in net.registry.views() {
        let same = net.params[v.range()] == before[v.range()];
        assert_eq!(same, v.tag.is_norm(), "{}", v.name);
    }
}

#[test]
fn running_stats_follow_the_perturbed_pass() {
    let spec = PerturbSpec::new(Variant::Sam, 0.05, Scope::All);
    let cfg = OptimConfig::new(BaseOptimizer::sgd(0.1, 0.0, 0.0)).with_perturb(spec);
    let mut net = model(5);
    let (x, y) = batch(8, 4, 3, 13);
    let g = net
        .loss_and_grad(&net.params, &x, &y, ForwardMode::Train, 0.0, false, None)
        .unwrap()
        .grad;
    let step = ascent_step(&spec, &net.params, &g, &net.registry, None).unwrap();
    let w_pert: Vec<f64> = net.params.iter().zip(&step.perturbation.eps).map(|(a, b)| a + b).collect();
    let stats = net
        .loss_and_grad(&w_pert, &x, &y, ForwardMode::Train, 0.0, false, None)
        .unwrap()
        .batch_stats;
    let mut opt = SamOptimizer::new(cfg, &net.registry, net.trainable_mask()).unwrap();
    sam_step(&mut net, &x, &y, &mut opt, OptimizerKind::Sam, 0.1, 0.0).unwrap();
    for (state, s) in net.norm_states.iter().zip(&stats) {
        let unbiased = s.unbiased_var();
        for k in 0..state.features() {
            assert!((state.running_mean[k] - 0.1 * s.mean[k]).abs() < 1e-15);
            assert!((state.running_var[k] - (0.9 + 0.1 * unbiased[k])).abs() < 1e-15);
        }
    }
}
