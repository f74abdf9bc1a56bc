//! Distortion relation network.
//!
//! A small VGG-style extractor turns a residual patch (clean minus
//! distorted) into a feature `f`. The feature is attached as an extra node
//! to a graph of `Q` learnable memory prototypes; edge weights come from a
//! learned affine map of negated squared distances followed by a row
//! softmax, and one graph convolution produces the embedding `c` read off
//! the feature's node. Task embeddings are mean embeddings over a probe set
//! of patches, and cosine similarity between task embeddings gives the
//! relation coefficients.
//!
//! The single-sample graph operations on dense `f64` matrices are the
//! reference; training uses a fused batched form of the same algebra.

use std::collections::HashSet;
use std::path::Path;
use std::rc::Rc;

use drtl_autograd::{grad, no_grad, Adam, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{hash_pairs, sample_patch_batch, PairItem, PairedDataset};
use crate::error::{DrtlError, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrnConfig {
    pub channels: usize,
    /// Feature and embedding width; equals the last stage width.
    pub d: usize,
    /// Number of memory prototypes.
    pub q: usize,
    pub stage_widths: Vec<usize>,
    pub stage_convs: Vec<usize>,
    /// `false` bypasses the memory graph: the embedding is the raw feature.
    pub use_bank: bool,
    /// Fixed gain applied to residuals before the first convolution.
    pub input_gain: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub patch: usize,
    pub probe_n: usize,
    /// Fraction of each kind's images held out for accuracy measurement.
    pub heldout_fraction: f64,
    pub eval_patches_per_kind: usize,
    pub seed: u64,
}

impl Default for DrnConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            d: 64,
            q: 16,
            stage_widths: vec![8, 16, 32, 64],
            stage_convs: vec![1, 1, 2, 2],
            use_bank: true,
            input_gain: 10.0,
            lr: 1e-3,
            batch: 16,
            steps: 5000,
            patch: 64,
            probe_n: 64,
            heldout_fraction: 0.2,
            eval_patches_per_kind: 32,
            seed: 0,
        }
    }
}

impl DrnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DrtlError::Config(m));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_convs.len() {
            return bad("stage_widths and stage_convs must be non-empty and equally long".into());
        }
        if self.stage_convs.contains(&0) || self.stage_widths.contains(&0) {
            return bad("every stage needs at least one conv of width >= 1".into());
        }
        if *self.stage_widths.last().unwrap() != self.d {
            return bad(format!("last stage width must equal d = {}", self.d));
        }
        if self.q < 2 {
            return bad(format!("need q >= 2 memory nodes, got {}", self.q));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad("channels must be 1 or 3".into());
        }
        if self.patch < self.min_input() {
            return bad(format!("patch must be >= {}", self.min_input()));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.probe_n == 0 {
            return bad("lr, batch and probe_n must be positive".into());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Smallest accepted spatial size.
    pub fn min_input(&self) -> usize {
        32.max(1 << self.stage_widths.len())
    }

    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.channels;
        for (s, (&w, &n)) in self.stage_widths.iter().zip(&self.stage_convs).enumerate() {
            for j in 0..n {
                out.push((format!("extractor.s{s}c{j}.weight"), vec![w, cin, 3, 3]));
                out.push((format!("extractor.s{s}c{j}.bias"), vec![w]));
                cin = w;
            }
        }
        out.push(("bank.nodes".into(), vec![self.q, self.d]));
        out.push(("bank.w".into(), vec![1]));
        out.push(("bank.b".into(), vec![1]));
        out.push(("gcn.weight".into(), vec![self.d, self.d]));
        out
    }
}

/// Memory prototypes and the affine map on negated squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// `Q x d`.
    pub nodes: DMatrix<f64>,
    pub w: f64,
    pub b: f64,
}

impl MemoryBank {
    pub fn new(nodes: DMatrix<f64>, w: f64, b: f64) -> Result<Self> {
        if nodes.nrows() < 2 {
            return Err(DrtlError::Param("memory bank needs at least 2 nodes".into()));
        }
        if nodes.iter().any(|v| !v.is_finite()) || !w.is_finite() || !b.is_finite() {
            return Err(DrtlError::Param("memory bank holds non-finite values".into()));
        }
        Ok(Self { nodes, w, b })
    }

    pub fn q(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn d(&self) -> usize {
        self.nodes.ncols()
    }

    fn affine(&self, sqdist: f64) -> f64 {
        self.w * -sqdist + self.b
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row softmax of the affine-mapped distances from `f` to every node.
pub fn compute_projection_adjacency(f: &[f64], bank: &MemoryBank) -> Result<Vec<f64>> {
    if f.len() != bank.d() {
        return Err(DrtlError::Shape(format!(
            "feature has {} dims, bank has {}",
            f.len(),
            bank.d()
        )));
    }
    let logits: Vec<f64> = bank
        .nodes
        .row_iter()
        .map(|h| bank.affine(h.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum()))
        .collect();
    Ok(softmax(&logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryAdjacency {
    /// Affine-mapped pairwise distances; symmetric.
    pub logits: DMatrix<f64>,
    /// Row softmax of `logits`.
    pub weights: DMatrix<f64>,
}

pub fn compute_memory_adjacency(bank: &MemoryBank) -> MemoryAdjacency {
    let q = bank.q();
    let logits = DMatrix::from_fn(q, q, |m, n| {
        bank.affine((bank.nodes.row(m) - bank.nodes.row(n)).norm_squared())
    });
    let mut weights = DMatrix::zeros(q, q);
    for m in 0..q {
        let row: Vec<f64> = logits.row(m).iter().cloned().collect();
        for (n, v) in softmax(&row).into_iter().enumerate() {
            weights[(m, n)] = v;
        }
    }
    MemoryAdjacency { logits, weights }
}

/// `[[0, a_p], [a_p^T, (a_m + a_m^T)/2]] + I`, before degree normalization.
pub fn adjacency_with_self_loops(a_p: &[f64], a_m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = a_p.len();
    if a_m.nrows() != q || a_m.ncols() != q {
        return Err(DrtlError::Shape(format!(
            "projection row has {q} entries, memory adjacency is {}x{}",
            a_m.nrows(),
            a_m.ncols()
        )));
    }
    let mut a = DMatrix::identity(q + 1, q + 1);
    for i in 0..q {
        a[(0, i + 1)] += a_p[i];
        a[(i + 1, 0)] += a_p[i];
        for j in 0..q {
            a[(i + 1, j + 1)] += 0.5 * (a_m[(i, j)] + a_m[(j, i)]);
        }
    }
    Ok(a)
}

/// Symmetrically degree-normalized block adjacency `D^-1/2 (A + I) D^-1/2`.
pub fn assemble_adjacency(a_p: &[f64], a_m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = adjacency_with_self_loops(a_p, a_m)?;
    let inv: Vec<f64> = a.row_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Ok(DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * inv[i] * inv[j]))
}

/// One graph convolution, `ReLU(A X W)`.
pub fn gcn_forward(nodes: &DMatrix<f64>, a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() || a.ncols() != nodes.nrows() || nodes.ncols() != w.nrows() {
        return Err(DrtlError::Shape(format!(
            "gcn with A {}x{}, X {}x{}, W {}x{}",
            a.nrows(),
            a.ncols(),
            nodes.nrows(),
            nodes.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok((a * nodes * w).map(|v| v.max(0.0)))
}

/// Single-sample reference path from a feature to its embedding.
pub fn graph_embed(f: &[f64], bank: &MemoryBank, w: &DMatrix<f64>) -> Result<Vec<f64>> {
    let a_p = compute_projection_adjacency(f, bank)?;
    let a_m = compute_memory_adjacency(bank);
    let a = assemble_adjacency(&a_p, &a_m.weights)?;
    let mut nodes = DMatrix::zeros(bank.q() + 1, bank.d());
    nodes.row_mut(0).copy_from(&DVector::from_column_slice(f).transpose());
    for i in 0..bank.q() {
        nodes.row_mut(i + 1).copy_from(&bank.nodes.row(i));
    }
    let out = gcn_forward(&nodes, &a, w)?;
    Ok(out.row(0).iter().cloned().collect())
}

/// `-||x_i - h_j||^2` for every row pair, `[n, Q]`.
fn neg_sqdist(x: &Var<f32>, h: &Var<f32>) -> Var<f32> {
    let (n, q) = (x.shape()[0], h.shape()[0]);
    let xx = x.square().sum_to(&[n, 1]);
    let hh = h.square().sum_to(&[q, 1]).reshape(&[1, q]);
    x.matmul(&h.t()).scale(2.0).sub(&xx.broadcast_to(&[n, q])).sub(&hh.broadcast_to(&[n, q]))
}

/// Trainable relation network together with its classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Drn {
    pub config: DrnConfig,
    pub classes: Vec<String>,
    params: Vec<Tensor<f32>>,
}

const HEAD_W: &str = "head.weight";
const HEAD_B: &str = "head.bias";

impl Drn {
    pub fn new(config: DrnConfig, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "drn-init", 0);
        let mut params = Vec::new();
        for (name, shape) in Self::full_schema(&config, classes.len()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match name.as_str() {
                "bank.nodes" => (0..n).map(|_| r.gen_range(0.0..0.2)).collect(),
                "bank.w" => vec![1.0],
                "bank.b" => vec![0.0],
                "gcn.weight" => {
                    let bound = (6.0 / config.d as f64).sqrt();
                    (0..n).map(|_| r.gen_range(-bound..bound) as f32).collect()
                }
                HEAD_W => {
                    let bound = 1.0 / (config.d as f64).sqrt();
                    (0..n).map(|_| r.gen_range(-bound..bound) as f32).collect()
                }
                s if s.ends_with(".weight") => {
                    let bound = (6.0 / (shape[1] * 9) as f64).sqrt();
                    (0..n).map(|_| r.gen_range(-bound..bound) as f32).collect()
                }
                _ => vec![0.0; n],
            };
            params.push(Tensor::from_vec(&shape, data).expect("schema shape"));
        }
        Ok(Self {
            config,
            classes,
            params,
        })
    }

    fn full_schema(config: &DrnConfig, n_classes: usize) -> Vec<(String, Vec<usize>)> {
        let mut s = config.schema();
        s.push((HEAD_W.into(), vec![config.d, n_classes]));
        s.push((HEAD_B.into(), vec![n_classes]));
        s
    }

    pub fn from_named(config: DrnConfig, classes: Vec<String>, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let schema = Self::full_schema(&config, classes.len());
        if schema.len() != named.len() {
            return Err(DrtlError::Checkpoint(format!(
                "expected {} tensors, found {}",
                schema.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((sn, ss), (n, t)) in schema.iter().zip(named) {
            if *sn != n || ss.as_slice() != t.shape() {
                return Err(DrtlError::Checkpoint(format!(
                    "expected {sn} {ss:?}, found {n} {:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            classes,
            params,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        Self::full_schema(&self.config, self.classes.len())
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter().cloned())
            .collect()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    fn n_extractor(&self) -> usize {
        2 * self.config.stage_convs.iter().sum::<usize>()
    }

    fn idx(&self, name: &str) -> usize {
        Self::full_schema(&self.config, self.classes.len())
            .iter()
            .position(|(n, _)| n == name)
            .expect("known parameter")
    }

    /// The memory bank in reference form.
    pub fn bank(&self) -> MemoryBank {
        let nodes = &self.params[self.idx("bank.nodes")];
        MemoryBank {
            nodes: DMatrix::from_row_iterator(
                self.config.q,
                self.config.d,
                nodes.data().iter().map(|&v| v as f64),
            ),
            w: self.params[self.idx("bank.w")].data()[0] as f64,
            b: self.params[self.idx("bank.b")].data()[0] as f64,
        }
    }

    pub fn gcn_weight(&self) -> DMatrix<f64> {
        let w = &self.params[self.idx("gcn.weight")];
        DMatrix::from_row_iterator(self.config.d, self.config.d, w.data().iter().map(|&v| v as f64))
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1] != self.config.channels {
            return Err(DrtlError::Shape(format!(
                "expected B x {} x H x W residuals, got {x:?}",
                self.config.channels
            )));
        }
        if x[2] < self.config.min_input() || x[3] < self.config.min_input() {
            return Err(DrtlError::Shape(format!(
                "residuals must be at least {0}x{0}, got {1}x{2}",
                self.config.min_input(),
                x[2],
                x[3]
            )));
        }
        Ok(())
    }

    fn features_var(&self, p: &[Var<f32>], x: &Var<f32>) -> Var<f32> {
        let mut h = x.scale(self.config.input_gain as f32);
        let mut k = 0;
        for &n in &self.config.stage_convs {
            for _ in 0..n {
                let cout = p[k + 1].shape()[0];
                h = h.conv2d(&p[k]).add_bcast(&p[k + 1].reshape(&[1, cout, 1, 1])).relu();
                k += 2;
            }
            h = h.max_pool2();
        }
        h.global_avg_pool()
    }

    /// Batched graph embedding of `f` (`[B, d]`), algebraically identical
    /// to [`graph_embed`] applied row by row.
    fn embed_var(&self, p: &[Var<f32>], f: &Var<f32>) -> Var<f32> {
        if !self.config.use_bank {
            return f.clone();
        }
        let base = self.n_extractor();
        let (h, w, b, wg) = (&p[base], &p[base + 1], &p[base + 2], &p[base + 3]);
        let (bsz, q, d) = (f.shape()[0], self.config.q, self.config.d);
        let a_p = neg_sqdist(f, h).mul_bcast(w).add_bcast(b).softmax_rows();
        let a_m = neg_sqdist(h, h).mul_bcast(w).add_bcast(b).softmax_rows();
        let a_sym = a_m.add(&a_m.t()).scale(0.5);
        let deg0 = a_p.sum_to(&[bsz, 1]).add_scalar(1.0);
        let rows = a_sym.sum_to(&[q, 1]).reshape(&[1, q]);
        let deg_q = a_p.add_bcast(&rows).add_scalar(1.0);
        let norm = deg0.broadcast_to(&[bsz, q]).mul(&deg_q).powf(-0.5);
        let pre = f
            .mul(&deg0.recip().broadcast_to(&[bsz, d]))
            .add(&a_p.mul(&norm).matmul(h));
        pre.matmul(wg).relu()
    }

    fn logits_var(&self, p: &[Var<f32>], c: &Var<f32>) -> Var<f32> {
        let n = p.len();
        c.matmul(&p[n - 2]).add_bcast(&p[n - 1])
    }

    /// Raw extractor features, `[B, d]`.
    pub fn extract_features(&self, residuals: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(residuals.shape())?;
        Ok(no_grad(|| {
            let p = self.constants();
            self.features_var(&p, &Var::constant(residuals.clone())).value().clone()
        }))
    }

    /// Embeddings `c`, `[B, d]`, computed in chunks.
    pub fn embed_batch(&self, residuals: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(residuals.shape())?;
        let s = residuals.shape();
        let per: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(s[0] * self.config.d);
        no_grad(|| {
            let p = self.constants();
            for chunk in residuals.data().chunks(per * 32) {
                let b = chunk.len() / per;
                let x = Tensor::from_vec(&[b, s[1], s[2], s[3]], chunk.to_vec()).expect("chunk");
                let f = self.features_var(&p, &Var::constant(x));
                out.extend_from_slice(self.embed_var(&p, &f).value().data());
            }
        });
        Ok(Tensor::from_vec(&[s[0], self.config.d], out).expect("embedding size"))
    }

    /// Class scores for each residual, `[B, classes]`.
    pub fn classify(&self, residuals: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = self.embed_batch(residuals)?;
        Ok(no_grad(|| {
            let p = self.constants();
            self.logits_var(&p, &Var::constant(c)).value().clone()
        }))
    }

    fn constants(&self) -> Vec<Var<f32>> {
        self.params.iter().cloned().map(Var::constant).collect()
    }

    /// Cross-entropy loss and its parameter gradients on one batch.
    pub fn loss_and_grad(&self, residuals: &Tensor<f32>, labels: &[usize]) -> Result<(f64, Vec<Tensor<f32>>)> {
        self.check_input(residuals.shape())?;
        let bsz = residuals.shape()[0];
        let n = self.classes.len();
        if labels.len() != bsz || labels.iter().any(|&l| l >= n) {
            return Err(DrtlError::Param("labels do not match the batch".into()));
        }
        let p: Vec<Var<f32>> = self.params.iter().cloned().map(Var::param).collect();
        let f = self.features_var(&p, &Var::constant(residuals.clone()));
        let c = self.embed_var(&p, &f);
        let logp = self.logits_var(&p, &c).log_softmax_rows();
        let idx: Rc<[usize]> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
        let loss = logp.gather(idx, &[bsz]).mean().neg();
        let g = grad(&loss, &p, false);
        Ok((loss.item() as f64, g.into_iter().map(|v| v.value().clone()).collect()))
    }
}

/// Residual patches with class labels.
struct LabeledPatches {
    residuals: Tensor<f32>,
    labels: Vec<usize>,
}

fn labeled_patches(sets: &[Vec<PairItem>], per_kind: usize, patch: usize, r: &mut Rng) -> Result<LabeledPatches> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape = vec![0, 0, patch, patch];
    for (k, items) in sets.iter().enumerate() {
        if per_kind == 0 || items.is_empty() {
            continue;
        }
        let b = sample_patch_batch(items, per_kind, patch, r)?;
        shape[1] = b.clean.shape()[1];
        data.extend(b.residual().into_data());
        labels.extend(std::iter::repeat(k).take(per_kind));
    }
    shape[0] = labels.len();
    Ok(LabeledPatches {
        residuals: Tensor::from_vec(&shape, data).expect("patch data"),
        labels,
    })
}

/// Fraction of correctly classified residuals.
pub fn accuracy(drn: &Drn, residuals: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let logits = drn.classify(residuals)?;
    let n = drn.classes.len();
    let correct = logits
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct DrnOutcome {
    pub drn: Drn,
    pub loss_log: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Splits each kind's images into train and held-out parts by image.
pub fn heldout_split(ds: &PairedDataset, fraction: f64, seed: u64, label: u64) -> (Vec<PairItem>, Vec<PairItem>) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "drn-heldout-split", label));
    let n_hold = ((ds.len() as f64) * fraction).ceil() as usize;
    let n_hold = n_hold.min(ds.len().saturating_sub(1));
    let hold: HashSet<usize> = idx[..n_hold].iter().cloned().collect();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, it) in ds.items.iter().enumerate() {
        if hold.contains(&i) {
            held.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    (train, held)
}

/// Trains extractor, memory bank, graph weights and a linear head to
/// classify residual patches by distortion kind.
///
/// Each step draws a class uniformly per sample and a patch of that class.
/// The step size halves after 50% and again after 75% of the steps.
pub fn train_drn(aux: &[PairedDataset], cfg: &DrnConfig) -> Result<DrnOutcome> {
    cfg.validate()?;
    let kinds: Vec<String> = aux.iter().map(|d| d.kind.clone()).collect();
    let distinct: HashSet<&String> = kinds.iter().collect();
    if distinct.len() < 2 || distinct.len() != kinds.len() {
        return Err(DrtlError::Param(format!(
            "relation training needs at least 2 distinct kinds, got {kinds:?}"
        )));
    }
    if let Some(d) = aux.iter().find(|d| d.is_empty()) {
        return Err(DrtlError::Param(format!("dataset {} is empty", d.kind)));
    }
    let mut drn = Drn::new(cfg.clone(), kinds)?;
    let (train, held): (Vec<_>, Vec<_>) = aux
        .iter()
        .enumerate()
        .map(|(k, d)| heldout_split(d, cfg.heldout_fraction, cfg.seed, k as u64))
        .unzip();
    let mut opt = Adam::new(cfg.lr as f32);
    let mut r = rng::stream(cfg.seed, "drn-train", 0);
    let mut log = Vec::with_capacity(cfg.steps);
    let n = aux.len();
    for step in 0..cfg.steps {
        opt.lr = if step * 4 >= cfg.steps * 3 {
            cfg.lr / 4.0
        } else if step * 2 >= cfg.steps {
            cfg.lr / 2.0
        } else {
            cfg.lr
        } as f32;
        let mut data = Vec::new();
        let mut labels = Vec::with_capacity(cfg.batch);
        let mut c = cfg.channels;
        for _ in 0..cfg.batch {
            let k = r.gen_range(0..n);
            let b = sample_patch_batch(&train[k], 1, cfg.patch, &mut r)?;
            c = b.clean.shape()[1];
            data.extend(b.residual().into_data());
            labels.push(k);
        }
        let x = Tensor::from_vec(&[cfg.batch, c, cfg.patch, cfg.patch], data).expect("batch");
        let (loss, g) = drn.loss_and_grad(&x, &labels)?;
        if !loss.is_finite() {
            return Err(DrtlError::Diverged {
                step,
                reason: "non-finite classification loss".into(),
            });
        }
        opt.step(drn.params_mut(), &g);
        if drn.params().iter().any(|p| !p.all_finite()) {
            return Err(DrtlError::Diverged {
                step,
                reason: "non-finite parameters".into(),
            });
        }
        log.push(loss);
    }
    let mut er = rng::stream(cfg.seed, "drn-eval", 0);
    let tr = labeled_patches(&train, cfg.eval_patches_per_kind, cfg.patch, &mut er)?;
    let ho = labeled_patches(&held, cfg.eval_patches_per_kind, cfg.patch, &mut er)?;
    Ok(DrnOutcome {
        train_accuracy: accuracy(&drn, &tr.residuals, &tr.labels)?,
        heldout_accuracy: accuracy(&drn, &ho.residuals, &ho.labels)?,
        drn,
        loss_log: log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionEmbedding {
    pub kind: String,
    pub c: Vec<f64>,
    pub probe_n: usize,
}

fn dedup_pairs(samples: &[PairItem]) -> Vec<PairItem> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter(|p| seen.insert(hash_pairs(std::slice::from_ref(p))))
        .cloned()
        .collect()
}

/// Embeddings of `probe_n` random residual patches, `probe_n x d`.
///
/// Duplicate pairs are dropped before sampling, so repeating a pair in the
/// input does not change the probe set.
pub fn probe_embeddings(samples: &[PairItem], drn: &Drn, probe_n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(DrtlError::Relation("no samples to embed".into()));
    }
    if probe_n == 0 {
        return Err(DrtlError::Param("probe_n must be >= 1".into()));
    }
    let unique = dedup_pairs(samples);
    let b = sample_patch_batch(&unique, probe_n, drn.config.patch, &mut rng::stream(seed, "probe", 0))?;
    let c = drn.embed_batch(&b.residual())?;
    Ok(c.data()
        .chunks(drn.config.d)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect())
}

/// Mean embedding of a task over a probe set of patches.
pub fn embed_distortion(kind: &str, samples: &[PairItem], drn: &Drn, probe_n: usize, seed: u64) -> Result<DistortionEmbedding> {
    let rows = probe_embeddings(samples, drn, probe_n, seed)?;
    Ok(DistortionEmbedding {
        kind: kind.to_string(),
        c: mean_rows(&rows),
        probe_n,
    })
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DrtlError::Relation("embedding dimensions differ".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(DrtlError::Relation("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Floor applied to raw similarities before normalizing.
pub const GAMMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub kinds: Vec<String>,
    /// Cosine similarity of each auxiliary embedding with the target.
    pub raw: Vec<f64>,
    /// `max(raw, floor)` rescaled to mean 1.
    pub gamma: Vec<f64>,
    pub probe_n: usize,
    pub seed: u64,
}

pub fn normalize_gamma(raw: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = raw.iter().map(|r| r.max(GAMMA_FLOOR)).collect();
    let m = floored.iter().sum::<f64>() / floored.len() as f64;
    floored.iter().map(|v| v / m).collect()
}

pub fn relation_matrix(aux: &[DistortionEmbedding], target: &DistortionEmbedding, seed: u64) -> Result<RelationMatrix> {
    if aux.is_empty() {
        return Err(DrtlError::Relation("no auxiliary embeddings".into()));
    }
    let raw = aux
        .iter()
        .map(|a| cosine(&a.c, &target.c))
        .collect::<Result<Vec<_>>>()?;
    Ok(RelationMatrix {
        kinds: aux.iter().map(|a| a.kind.clone()).collect(),
        gamma: normalize_gamma(&raw),
        raw,
        probe_n: target.probe_n,
        seed,
    })
}

/// Pairwise cosine similarities; the diagonal is exactly 1.
pub fn similarity_matrix(embs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = embs.len();
    let mut s = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine(&embs[i], &embs[j])?;
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    Ok(s)
}

/// Projection onto the top two principal axes. Each axis is oriented so
/// that its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.is_empty() {
        return Ok(vec![]);
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(DrtlError::Shape("points need a common dimension >= 2".into()));
    }
    let n = points.len();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = xc.transpose() * &xc / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<DVector<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k).into_owned();
            let big = v.iter().cloned().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
            if big < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let r = xc.row(i);
            [r.dot(&axes[0].transpose()), r.dot(&axes[1].transpose())]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub kind: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<String>,
    /// Cosine similarity between task embeddings.
    pub heatmap: Vec<Vec<f64>>,
    pub points: Vec<ProjectedPoint>,
}

/// Builds the plot data: a 2-D projection of per-sample embeddings and the
/// task similarity heatmap.
pub fn graph_export(samples: &[(String, Vec<f64>)], tasks: &[DistortionEmbedding]) -> Result<GraphExport> {
    let pts: Vec<Vec<f64>> = samples.iter().map(|(_, v)| v.clone()).collect();
    let proj = pca_2d(&pts)?;
    let heatmap = similarity_matrix(&tasks.iter().map(|t| t.c.clone()).collect::<Vec<_>>())?;
    Ok(GraphExport {
        nodes: tasks.iter().map(|t| t.kind.clone()).collect(),
        heatmap,
        points: samples
            .iter()
            .zip(proj)
            .map(|((k, _), p)| ProjectedPoint {
                kind: k.clone(),
                x: p[0],
                y: p[1],
            })
            .collect(),
    })
}

pub fn export_graph(samples: &[(String, Vec<f64>)], tasks: &[DistortionEmbedding], out_path: &Path) -> Result<GraphExport> {
    let g = graph_export(samples, tasks)?;
    crate::fsio::write_json(out_path, &g)?;
    Ok(g)
}
