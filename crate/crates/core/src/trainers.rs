//! Optimization regimes: plain and relation-weighted pre-training, plain and
//! relation-weighted MAML, fine-tuning and the from-scratch baseline.
//!
//! Each auxiliary task draws batches from its own random stream, so what a
//! task contributes never depends on the other tasks' data. A task whose
//! weight is exactly zero is skipped outright: no batch is drawn and no
//! optimizer step is taken.

use std::collections::BTreeMap;

use drtl_autograd::{grad, Adam, Float, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, RestorationModel};
use crate::data::{sample_patch_batch, PairItem, PairedDataset, PatchBatch};
use crate::error::{DrtlError, Result};
use crate::eval::{evaluate_model, psnr_format, MetricReport};
use crate::relation::RelationMatrix;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Adam step size for pre-training and fine-tuning.
    pub lr: f64,
    /// Adam step size for the MAML outer update.
    pub meta_lr: f64,
    /// Plain gradient step size of the MAML inner update.
    pub inner_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub patch: usize,
    pub iterations: usize,
    pub inner_steps: usize,
    pub second_order: bool,
    pub shuffle_tasks: bool,
    /// Sum the weighted task losses into one step per iteration instead of
    /// cycling through the tasks one step at a time.
    pub summed: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            meta_lr: 1e-4,
            inner_lr: 1e-2,
            lr_decay: 0.8,
            decay_every: 3000,
            batch: 32,
            patch: 64,
            iterations: 1000,
            inner_steps: 1,
            second_order: true,
            shuffle_tasks: false,
            summed: false,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DrtlError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.meta_lr > 0.0 && self.inner_lr >= 0.0) {
            return bad("lr and meta_lr must be > 0, inner_lr >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.batch == 0 || self.patch == 0 || self.decay_every == 0 {
            return bad("batch, patch and decay_every must be >= 1");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1");
        }
        Ok(())
    }

    /// Step size after `iteration` completed fine-tuning steps.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powi((iteration / self.decay_every) as i32)
    }
}

/// Per-task nonnegative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaWeights {
    pub gamma: Vec<f64>,
}

impl GammaWeights {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(DrtlError::Param(format!("weights must be finite and >= 0: {gamma:?}")));
        }
        Ok(Self { gamma })
    }

    pub fn ones(n: usize) -> Self {
        Self { gamma: vec![1.0; n] }
    }

    pub fn from_relation(rel: &RelationMatrix) -> Result<Self> {
        Self::new(rel.gamma.clone())
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Mean absolute error.
pub fn loss_l1<T: Float>(pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(DrtlError::Shape(format!(
            "l1 of {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target).abs().mean())
}

fn batch_vars<T: Float>(b: &PatchBatch) -> (Var<T>, Var<T>) {
    (
        Var::constant(b.distorted.cast::<T>()),
        Var::constant(b.clean.cast::<T>()),
    )
}

fn batch_loss<T: Float>(model: &RestorationModel<T>, params: &[Var<T>], b: &PatchBatch) -> Result<Var<T>> {
    let (x, y) = batch_vars::<T>(b);
    loss_l1(&model.forward_with_params(params, &x)?, &y)
}

fn check_tasks(tasks: &[PairedDataset], gamma: Option<&GammaWeights>) -> Result<()> {
    if tasks.is_empty() {
        return Err(DrtlError::Param("need at least one auxiliary task".into()));
    }
    if let Some(g) = gamma {
        if g.len() != tasks.len() {
            return Err(DrtlError::Param(format!(
                "{} weights for {} tasks",
                g.len(),
                tasks.len()
            )));
        }
    }
    if let Some(t) = tasks.iter().find(|t| t.is_empty()) {
        return Err(DrtlError::Param(format!("task {} has no pairs", t.kind)));
    }
    Ok(())
}

fn task_order(n: usize, shuffle: Option<&mut Rng>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(r);
    }
    order
}

fn diverged(step: usize, what: &str) -> DrtlError {
    DrtlError::Diverged {
        step,
        reason: format!("non-finite {what}"),
    }
}

/// Unweighted loss value and the gradient of `weight * loss` at `params`.
/// `None` differentiates the loss as is.
pub fn weighted_gradient<T: Float>(
    params: &[Tensor<T>],
    weight: Option<f64>,
    loss: impl FnOnce(&[Var<T>]) -> Result<Var<T>>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let theta: Vec<Var<T>> = params.iter().cloned().map(Var::param).collect();
    let l = loss(&theta)?;
    let raw = l.item().as_f64();
    let obj = match weight {
        Some(w) => l.scale(T::from_f64_lossy(w)),
        None => l,
    };
    let g = grad(&obj, &theta, false);
    Ok((raw, g.into_iter().map(|v| v.value().clone()).collect()))
}

/// Iterative pre-trainer.
///
/// With `gamma = None` each turn minimizes the plain task loss; with
/// weights, task `i`'s loss is scaled by `gamma[i]` before differentiation,
/// so the weight multiplies the gradient that reaches Adam.
pub struct Pretrainer<'a, T: Float> {
    model: RestorationModel<T>,
    tasks: &'a [PairedDataset],
    gamma: Option<GammaWeights>,
    cfg: TrainConfig,
    opt: Adam<T>,
    task_rngs: Vec<Rng>,
    order_rng: Rng,
    iteration: usize,
}

impl<'a, T: Float> Pretrainer<'a, T> {
    pub fn new(
        model: RestorationModel<T>,
        tasks: &'a [PairedDataset],
        gamma: Option<&GammaWeights>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_tasks(tasks, gamma)?;
        Ok(Self {
            model,
            tasks,
            gamma: gamma.cloned(),
            cfg: cfg.clone(),
            opt: Adam::new(T::from_f64_lossy(cfg.lr)),
            task_rngs: (0..tasks.len())
                .map(|i| rng::stream(cfg.seed, "pretrain-task", i as u64))
                .collect(),
            order_rng: rng::stream(cfg.seed, "pretrain-order", 0),
            iteration: 0,
        })
    }

    pub fn model(&self) -> &RestorationModel<T> {
        &self.model
    }

    pub fn into_model(self) -> RestorationModel<T> {
        self.model
    }

    /// Raw parameter gradient of task `i`'s (weighted) loss on `batch`.
    pub fn task_gradient(&self, i: usize, batch: &PatchBatch) -> Result<(f64, Vec<Tensor<T>>)> {
        let w = self.gamma.as_ref().map(|g| g.gamma[i]);
        weighted_gradient(self.model.params(), w, |p| batch_loss(&self.model, p, batch))
    }

    /// One pass over all tasks; returns the mean unweighted task loss.
    pub fn iteration(&mut self) -> Result<f64> {
        let step = self.iteration;
        let order = task_order(
            self.tasks.len(),
            self.cfg.shuffle_tasks.then_some(&mut self.order_rng),
        );
        let mut losses = Vec::with_capacity(order.len());
        let mut summed: Option<Vec<Tensor<T>>> = None;
        for i in order {
            if self.gamma.as_ref().is_some_and(|g| g.gamma[i] == 0.0) {
                continue;
            }
            let batch =
                sample_patch_batch(&self.tasks[i].items, self.cfg.batch, self.cfg.patch, &mut self.task_rngs[i])?;
            let (raw, g) = self.task_gradient(i, &batch)?;
            if !raw.is_finite() {
                return Err(diverged(step, "loss"));
            }
            losses.push(raw);
            if self.cfg.summed {
                summed = Some(match summed {
                    None => g,
                    Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.zip_map(b, |x, y| x + y)).collect(),
                });
            } else {
                self.opt.step(self.model.params_mut(), &g);
            }
        }
        if let Some(g) = summed {
            self.opt.step(self.model.params_mut(), &g);
        }
        if self.model.params().iter().any(|p| !p.all_finite()) {
            return Err(diverged(step, "parameters"));
        }
        self.iteration += 1;
        Ok(mean(&losses))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Float> {
    pub model: RestorationModel<T>,
    pub loss_log: Vec<f64>,
}

/// Runs `cfg.iterations` passes of [`Pretrainer`].
pub fn pretrain<T: Float>(
    model: &RestorationModel<T>,
    tasks: &[PairedDataset],
    gamma: Option<&GammaWeights>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut tr = Pretrainer::new(model.clone(), tasks, gamma, cfg)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        log.push(tr.iteration()?);
    }
    Ok(TrainOutcome {
        model: tr.into_model(),
        loss_log: log,
    })
}

/// `steps` plain gradient steps `theta - alpha * grad L` on a differentiable
/// loss. With `create_graph` the result stays differentiable with respect
/// to `theta` through the gradient itself.
pub fn inner_update<T: Float>(
    theta: &[Var<T>],
    alpha: T,
    steps: usize,
    create_graph: bool,
    loss: impl Fn(&[Var<T>]) -> Result<Var<T>>,
) -> Result<Vec<Var<T>>> {
    let mut fast = theta.to_vec();
    for _ in 0..steps {
        let l = loss(&fast)?;
        let g = grad(&l, &fast, create_graph);
        fast = fast.iter().zip(&g).map(|(p, gi)| p.sub(&gi.scale(alpha))).collect();
    }
    Ok(fast)
}

/// Look-ahead parameters after one inner step on `batch`.
pub fn meta_inner_update<T: Float>(
    model: &RestorationModel<T>,
    theta: &[Var<T>],
    batch: &PatchBatch,
    alpha: f64,
    create_graph: bool,
) -> Result<Vec<Var<T>>> {
    inner_update(theta, T::from_f64_lossy(alpha), 1, create_graph, |p| batch_loss(model, p, batch))
}

/// Support and query batches of one task.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task: usize,
    pub support: PatchBatch,
    pub query: PatchBatch,
}

/// Value and gradient of `sum_i w_i L_i(theta_i')` with respect to
/// `theta`, accumulated task by task. `weights = None` leaves the losses
/// unscaled.
pub fn meta_gradient<T: Float>(
    model: &RestorationModel<T>,
    params: &[Tensor<T>],
    episodes: &[Episode],
    weights: Option<&GammaWeights>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let theta: Vec<Var<T>> = params.iter().cloned().map(Var::param).collect();
    let mut acc: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut total = 0.0;
    for ep in episodes {
        let fast = inner_update(
            &theta,
            T::from_f64_lossy(cfg.inner_lr),
            cfg.inner_steps,
            cfg.second_order,
            |p| batch_loss(model, p, &ep.support),
        )?;
        let lq = batch_loss(model, &fast, &ep.query)?;
        let obj = match weights {
            Some(w) => lq.scale(T::from_f64_lossy(w.gamma[ep.task])),
            None => lq,
        };
        total += obj.item().as_f64();
        let g = grad(&obj, &theta, false);
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a = a.zip_map(gi.value(), |x, y| x + y);
        }
    }
    Ok((total, acc))
}

/// Iterative meta-trainer: inner plain-gradient steps per task on a support
/// batch, one Adam outer step on the summed query losses.
pub struct MetaTrainer<'a, T: Float> {
    model: RestorationModel<T>,
    tasks: &'a [PairedDataset],
    gamma: Option<GammaWeights>,
    cfg: TrainConfig,
    opt: Adam<T>,
    task_rngs: Vec<Rng>,
    order_rng: Rng,
    iteration: usize,
}

impl<'a, T: Float> MetaTrainer<'a, T> {
    pub fn new(
        model: RestorationModel<T>,
        tasks: &'a [PairedDataset],
        gamma: Option<&GammaWeights>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_tasks(tasks, gamma)?;
        Ok(Self {
            model,
            tasks,
            gamma: gamma.cloned(),
            cfg: cfg.clone(),
            opt: Adam::new(T::from_f64_lossy(cfg.meta_lr)),
            task_rngs: (0..tasks.len())
                .map(|i| rng::stream(cfg.seed, "meta-task", i as u64))
                .collect(),
            order_rng: rng::stream(cfg.seed, "meta-order", 0),
            iteration: 0,
        })
    }

    pub fn model(&self) -> &RestorationModel<T> {
        &self.model
    }

    pub fn into_model(self) -> RestorationModel<T> {
        self.model
    }

    /// Draws this iteration's episodes, skipping zero-weight tasks.
    pub fn sample_episodes(&mut self) -> Result<Vec<Episode>> {
        let order = task_order(
            self.tasks.len(),
            self.cfg.shuffle_tasks.then_some(&mut self.order_rng),
        );
        let mut eps = Vec::with_capacity(order.len());
        for i in order {
            if self.gamma.as_ref().is_some_and(|g| g.gamma[i] == 0.0) {
                continue;
            }
            let r = &mut self.task_rngs[i];
            let support = sample_patch_batch(&self.tasks[i].items, self.cfg.batch, self.cfg.patch, r)?;
            let query = sample_patch_batch(&self.tasks[i].items, self.cfg.batch, self.cfg.patch, r)?;
            eps.push(Episode {
                task: i,
                support,
                query,
            });
        }
        Ok(eps)
    }

    /// One outer update; returns the summed (weighted) query loss.
    pub fn iteration(&mut self) -> Result<f64> {
        let step = self.iteration;
        let eps = self.sample_episodes()?;
        if eps.is_empty() {
            self.iteration += 1;
            return Ok(0.0);
        }
        let (loss, g) = meta_gradient(&self.model, self.model.params(), &eps, self.gamma.as_ref(), &self.cfg)?;
        if !loss.is_finite() || g.iter().any(|t| !t.all_finite()) {
            return Err(diverged(step, "meta loss"));
        }
        self.opt.step(self.model.params_mut(), &g);
        self.iteration += 1;
        Ok(loss)
    }
}

pub fn meta_train<T: Float>(
    model: &RestorationModel<T>,
    tasks: &[PairedDataset],
    gamma: Option<&GammaWeights>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut tr = MetaTrainer::new(model.clone(), tasks, gamma, cfg)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        log.push(tr.iteration()?);
    }
    Ok(TrainOutcome {
        model: tr.into_model(),
        loss_log: log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub iteration: usize,
    pub lr: f64,
    /// Mean training loss since the previous point; absent before training.
    pub train_loss: Option<f64>,
    #[serde(with = "psnr_format")]
    pub eval_psnr: f64,
    pub eval_ssim: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Checkpoint with the highest eval PSNR (earliest on ties).
    pub model: RestorationModel<f32>,
    pub best_iteration: usize,
    pub trace: Vec<MetricPoint>,
    pub loss_log: Vec<f64>,
}

/// Adam on L1 over target patches with step decay; keeps the checkpoint
/// that scores best on `eval`. With an empty eval set the final model is
/// returned.
pub fn finetune(
    init: &RestorationModel<f32>,
    train: &[PairItem],
    eval: &[PairItem],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DrtlError::Param("target training set is empty".into()));
    }
    let mut model = init.clone();
    let mut opt = Adam::new(cfg.lr as f32);
    let mut r = rng::stream(cfg.seed, "finetune", 0);
    let mut trace = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut since_eval: Vec<f64> = Vec::new();
    let mut record = |it: usize, m: &RestorationModel<f32>, loss: Option<f64>, best: &mut (RestorationModel<f32>, usize, f64)| -> Result<()> {
        if eval.is_empty() {
            *best = (m.clone(), it, f64::NEG_INFINITY);
            return Ok(());
        }
        let rep = evaluate_model(m, eval, "finetune", cfg.seed)?;
        trace.push(MetricPoint {
            iteration: it,
            lr: cfg.lr_at(it),
            train_loss: loss,
            eval_psnr: rep.mean_psnr,
            eval_ssim: rep.mean_ssim,
        });
        if rep.mean_psnr > best.2 {
            *best = (m.clone(), it, rep.mean_psnr);
        }
        Ok(())
    };
    record(0, &model, None, &mut best)?;
    for it in 0..cfg.iterations {
        opt.lr = cfg.lr_at(it) as f32;
        let batch = sample_patch_batch(train, cfg.batch, cfg.patch, &mut r)?;
        let theta = model.param_vars();
        let loss = batch_loss(&model, &theta, &batch)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(diverged(it, "loss"));
        }
        let g: Vec<Tensor<f32>> = grad(&loss, &theta, false).into_iter().map(|v| v.value().clone()).collect();
        opt.step(model.params_mut(), &g);
        log.push(lv);
        since_eval.push(lv);
        let done = it + 1;
        if done % cfg.eval_every.max(1) == 0 || done == cfg.iterations {
            record(done, &model, Some(mean(&since_eval)), &mut best)?;
            since_eval.clear();
        }
    }
    Ok(FinetuneOutcome {
        model: best.0,
        best_iteration: best.1,
        trace,
        loss_log: log,
    })
}

/// Fine-tuning from a fresh initialization seeded by `cfg.seed`.
pub fn train_baseline(
    config: BackboneConfig,
    train: &[PairItem],
    eval: &[PairItem],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let init = RestorationModel::new(config, cfg.seed)?;
    finetune(&init, train, eval, cfg)
}

/// How a fine-tuning run's initialization was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    /// `pretrain` or `metatrain`.
    pub stage: String,
    pub train: TrainConfig,
    pub config_hash: String,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    pub loss_log: Vec<f64>,
    pub wall_time_secs: f64,
}

/// Provenance of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub regime: String,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitRecord>,
    pub loss_log: Vec<f64>,
    pub wall_time_secs: f64,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricReport>,
    pub status: String,
}
