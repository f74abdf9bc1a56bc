use drtl_autograd::numeric::{central_difference, relative_error};
use drtl_autograd::{grad, Adam, Tensor, Var};
use drtl_core::backbones::{Arch, BackboneConfig, RestorationModel};
use drtl_core::data::{sample_patch_batch, PairItem, PairedDataset};
use drtl_core::rng;
use drtl_core::scenes::generate_scenes;
use drtl_core::synth::{synthesize_pairs, synthesize_pseudo_target, DistortionKind};
use drtl_core::trainers::*;
use drtl_core::Image;
use rand::Rng as _;

fn tiny(channels: usize, depth: usize, width: usize) -> BackboneConfig {
    BackboneConfig {
        arch: Arch::TinyDnCNN,
        depth,
        width,
        channels,
    }
}

fn tasks(n_img: usize, size: usize, channels: usize) -> Vec<PairedDataset> {
    let clean = generate_scenes(3, n_img, size, size, channels).unwrap();
    [DistortionKind::GaussNoise, DistortionKind::GaussBlur, DistortionKind::MixedModerate]
        .iter()
        .map(|&k| synthesize_pairs(&clean, k, 5).unwrap())
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        meta_lr: 1e-3,
        batch: 2,
        patch: 12,
        iterations: 10,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn max_diff(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs() as f64))
        .fold(0.0, f64::max)
}

#[test]
fn unit_weights_reproduce_plain_pretraining() {
    let t = tasks(4, 16, 1);
    let m = RestorationModel::<f32>::new(tiny(1, 3, 4), 1).unwrap();
    let cfg = small_cfg();
    let ones = GammaWeights::ones(t.len());
    let mut plain = Pretrainer::new(m.clone(), &t, None, &cfg).unwrap();
    let mut guided = Pretrainer::new(m, &t, Some(&ones), &cfg).unwrap();
    for _ in 0..20 {
        plain.iteration().unwrap();
        guided.iteration().unwrap();
        assert!(max_diff(plain.model().params(), guided.model().params()) <= 1e-7);
    }
}

#[test]
fn unit_weights_reproduce_plain_maml() {
    let t = tasks(4, 16, 1);
    let m = RestorationModel::<f32>::new(tiny(1, 3, 4), 1).unwrap();
    let cfg = small_cfg();
    let ones = GammaWeights::ones(t.len());
    let mut plain = MetaTrainer::new(m.clone(), &t, None, &cfg).unwrap();
    let mut guided = MetaTrainer::new(m, &t, Some(&ones), &cfg).unwrap();
    for _ in 0..10 {
        plain.iteration().unwrap();
        guided.iteration().unwrap();
        assert!(max_diff(plain.model().params(), guided.model().params()) <= 1e-7);
    }
}

/// Adam written out for one scalar.
struct ScalarAdam {
    lr: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        theta - self.lr * mh / (vh.sqrt() + 1e-8)
    }
}

#[test]
fn weighted_cycle_on_quadratic_toy_matches_closed_form() {
    // task i: L_i(theta) = 0.5 a_i (theta - c_i)^2, weighted by gamma_i
    let a = [1.0, 3.0, 0.5];
    let c = [2.0, -1.0, 0.3];
    let gamma = [0.4, 2.1, 0.0];
    let mut params = vec![Tensor::from_vec(&[1], vec![0.7f64]).unwrap()];
    let mut opt = Adam::new(0.05);
    let mut expect = 0.7;
    let mut oracle = ScalarAdam { lr: 0.05, m: 0.0, v: 0.0, t: 0 };
    for _cycle in 0..3 {
        for i in 0..3 {
            if gamma[i] == 0.0 {
                continue;
            }
            let (_, g) = weighted_gradient(&params, Some(gamma[i]), |p| {
                Ok(p[0].add_scalar(-c[i]).square().scale(0.5 * a[i]).sum())
            })
            .unwrap();
            assert!((g[0].data()[0] - gamma[i] * a[i] * (expect - c[i])).abs() < 1e-12);
            opt.step(&mut params, &g);
            expect = oracle.step(expect, gamma[i] * a[i] * (expect - c[i]));
            assert!((params[0].data()[0] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn scaling_all_weights_scales_raw_gradients() {
    let t = tasks(4, 16, 1);
    let m = RestorationModel::<f32>::new(tiny(1, 3, 4), 2).unwrap();
    let cfg = small_cfg();
    let base = GammaWeights::new(vec![0.5, 1.2, 0.8]).unwrap();
    let scaled = GammaWeights::new(base.gamma.iter().map(|g| g * 3.0).collect()).unwrap();
    let p1 = Pretrainer::new(m.clone(), &t, Some(&base), &cfg).unwrap();
    let p2 = Pretrainer::new(m, &t, Some(&scaled), &cfg).unwrap();
    let batch = sample_patch_batch(&t[1].items, 2, 12, &mut rng::from_seed(0)).unwrap();
    let (l1, g1) = p1.task_gradient(1, &batch).unwrap();
    let (l2, g2) = p2.task_gradient(1, &batch).unwrap();
    assert_eq!(l1, l2);
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((3.0 * x - y).abs() <= 1e-5 * (1.0 + y.abs()), "{x} {y}");
        }
    }
}

#[test]
fn second_order_quadratic_closed_form() {
    let (alpha, c) = (0.3, 1.7);
    for theta0 in [-2.0, 0.0, 0.5, 4.0] {
        let theta = vec![Var::param(Tensor::from_vec(&[1], vec![theta0]).unwrap())];
        let loss = |p: &[Var<f64>]| Ok(p[0].add_scalar(-c).square().scale(0.5).sum());
        let fast = inner_update(&theta, alpha, 1, true, loss).unwrap();
        let outer = loss(&fast).unwrap();
        let g = grad(&outer, &theta, false)[0].value().data()[0];
        let want = (1.0 - alpha) * (theta0 - alpha * (theta0 - c) - c);
        assert!((g - want).abs() < 1e-10, "{g} vs {want}");
        // first-order drops the (1 - alpha) factor
        let fast1 = inner_update(&theta, alpha, 1, false, loss).unwrap();
        let g1 = grad(&loss(&fast1).unwrap(), &theta, false)[0].value().data()[0];
        assert!((g1 - (theta0 - alpha * (theta0 - c) - c)).abs() < 1e-10);
    }
}

fn f64_items(n: usize, size: usize, seed: u64) -> Vec<PairItem> {
    let mut r = rng::from_seed(seed);
    (0..n)
        .map(|i| {
            let c = Image::new(size, size, 1, (0..size * size).map(|_| r.gen()).collect()).unwrap();
            let d = Image::new(size, size, 1, c.data().iter().map(|v| (v * 0.7 + 0.1 + r.gen::<f32>() * 0.1).min(1.0)).collect()).unwrap();
            PairItem { index: i, clean: c, distorted: d, record: None }
        })
        .collect()
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let model = RestorationModel::<f64>::new(tiny(1, 2, 2), 7).unwrap();
    assert!(model.param_count() <= 50);
    let cfg = TrainConfig {
        inner_lr: 0.1,
        second_order: true,
        ..TrainConfig::default()
    };
    let mut r = rng::from_seed(3);
    let eps: Vec<Episode> = (0..2)
        .map(|task| {
            let items = f64_items(3, 10, task as u64);
            Episode {
                task,
                support: sample_patch_batch(&items, 2, 8, &mut r).unwrap(),
                query: sample_patch_batch(&items, 2, 8, &mut r).unwrap(),
            }
        })
        .collect();
    let w = GammaWeights::new(vec![0.7, 1.3]).unwrap();
    let (_, g) = meta_gradient(&model, model.params(), &eps, Some(&w), &cfg).unwrap();
    let fd = central_difference(model.params(), 1e-6, |p| meta_gradient(&model, p, &eps, Some(&w), &cfg).unwrap().0);
    let (mut ok, mut n) = (0, 0);
    for (a, b) in g.iter().zip(&fd) {
        for (x, y) in a.data().iter().zip(b.data()) {
            n += 1;
            if relative_error(*x, *y, 1e-8) <= 1e-4 {
                ok += 1;
            }
        }
    }
    assert!(ok as f64 >= 0.95 * n as f64, "{ok}/{n} coordinates agree");
}

#[test]
fn inner_update_on_linear_l1_model() {
    // f(x) = w x, L = mean |w x - y|; x = [1, 2, -1], y = [0, 5, 0], w = 1
    // residuals w x - y = [1, -3, -1] with signs [+, -, -]
    // dL/dw = mean(sign * x) = (1 - 2 + 1) / 3 = 0
    // use y = [0, 1, 0] instead: residuals [1, 1, -1], dL/dw = (1 + 2 + 1) / 3
    let x = Var::constant(Tensor::from_vec(&[3], vec![1.0f64, 2.0, -1.0]).unwrap());
    let y = Var::constant(Tensor::from_vec(&[3], vec![0.0f64, 1.0, 0.0]).unwrap());
    let theta = vec![Var::param(Tensor::from_vec(&[1], vec![1.0f64]).unwrap())];
    let loss = |p: &[Var<f64>]| Ok(x.mul_bcast(&p[0]).sub(&y).abs().mean());
    let alpha = 0.25;
    let fast = inner_update(&theta, alpha, 1, false, loss).unwrap();
    let want = 1.0 - alpha * (4.0 / 3.0);
    assert!((fast[0].value().data()[0] - want).abs() < 1e-12);
    let same = inner_update(&theta, 0.0, 1, false, loss).unwrap();
    assert_eq!(same[0].value().data()[0], 1.0);
    assert_eq!(theta[0].value().data()[0], 1.0);
}

#[test]
fn meta_inner_update_is_identity_without_signal() {
    let mut model = RestorationModel::<f32>::new(tiny(1, 3, 4), 3).unwrap();
    model.zero_last_layer();
    let items: Vec<PairItem> = f64_items(2, 12, 1)
        .into_iter()
        .map(|mut p| {
            p.distorted = p.clean.clone();
            p
        })
        .collect();
    let batch = sample_patch_batch(&items, 2, 8, &mut rng::from_seed(0)).unwrap();
    let theta = model.param_vars();
    let fast = meta_inner_update(&model, &theta, &batch, 0.5, true).unwrap();
    for (a, b) in fast.iter().zip(&theta) {
        assert_eq!(a.value(), b.value());
    }
    let other = sample_patch_batch(&f64_items(2, 12, 2), 2, 8, &mut rng::from_seed(0)).unwrap();
    let fast = meta_inner_update(&model, &theta, &other, 0.0, true).unwrap();
    for (a, b) in fast.iter().zip(&theta) {
        assert_eq!(a.value(), b.value());
    }
}

#[test]
fn lr_schedule_and_validation() {
    let cfg = TrainConfig::default();
    assert!((cfg.lr_at(9000) - 1e-4 * 0.8f64.powi(3)).abs() < 1e-15);
    assert_eq!(cfg.lr_at(2999), 1e-4);
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr_decay: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
}

fn first_hit(trace: &[MetricPoint], threshold: f64) -> Option<usize> {
    trace.iter().find(|p| p.eval_psnr >= threshold).map(|p| p.iteration)
}

#[test]
fn pretrained_init_converges_faster() {
    let aux = tasks(8, 32, 3);
    let clean = generate_scenes(77, 10, 32, 32, 3).unwrap();
    let target = synthesize_pseudo_target(&clean, "target", 1).unwrap();
    let (train, eval) = target.items.split_at(4);
    for seed in 0..3 {
        let cfg = TrainConfig {
            lr: 2e-3,
            batch: 4,
            patch: 24,
            iterations: 150,
            eval_every: 10,
            seed,
            ..TrainConfig::default()
        };
        let init = RestorationModel::<f32>::new(tiny(3, 4, 8), seed).unwrap();
        let pre = pretrain(&init, &aux, None, &TrainConfig { iterations: 100, ..cfg.clone() }).unwrap().model;
        let warm = finetune(&pre, train, eval, &cfg).unwrap();
        let cold = train_baseline(init.config, train, eval, &cfg).unwrap();
        let best_cold = cold.trace.iter().map(|p| p.eval_psnr).fold(f64::NEG_INFINITY, f64::max);
        let threshold = best_cold - 0.1;
        let (w, c) = (first_hit(&warm.trace, threshold), first_hit(&cold.trace, threshold));
        assert!(w.is_some() && w < c, "seed {seed}: warm {w:?} cold {c:?}");
    }
}

#[test]
fn zero_weight_task_leaves_no_trace() {
    let t = tasks(4, 16, 1);
    let mut swapped = t.clone();
    let other = generate_scenes(99, 4, 16, 16, 1).unwrap();
    swapped[1] = synthesize_pairs(&other, DistortionKind::GaussBlur, 8).unwrap();
    let m = RestorationModel::<f32>::new(tiny(1, 3, 4), 5).unwrap();
    let cfg = TrainConfig { iterations: 6, ..small_cfg() };
    let w = GammaWeights::new(vec![1.3, 0.0, 0.7]).unwrap();
    let a = pretrain(&m, &t, Some(&w), &cfg).unwrap().model;
    let b = pretrain(&m, &swapped, Some(&w), &cfg).unwrap().model;
    assert_eq!(a.params(), b.params());
    let a = meta_train(&m, &t, Some(&w), &cfg).unwrap().model;
    let b = meta_train(&m, &swapped, Some(&w), &cfg).unwrap().model;
    assert_eq!(a.params(), b.params());
    // with a nonzero weight the swap does show
    let ones = GammaWeights::ones(3);
    let c = pretrain(&m, &t, Some(&ones), &cfg).unwrap().model;
    let d = pretrain(&m, &swapped, Some(&ones), &cfg).unwrap().model;
    assert_ne!(c.params(), d.params());
}
