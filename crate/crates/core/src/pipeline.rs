//! Stage runner for one run directory.
//!
//! Every stage records a hash of the config slice it reads plus the output
//! hashes of the stages it depends on. A stage whose recorded hash matches
//! and whose outputs still exist is skipped, so rerunning an unchanged
//! config rewrites nothing.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbones::RestorationModel;
use crate::checkpoint::{self, BackboneMeta, DrnMeta};
use crate::config::{ExperimentConfig, GammaSource, Regime, Stage};
use crate::data::{self, few_shot_split, FewShotSplit, PairedDataset};
use crate::error::{io_err, DrtlError, Result};
use crate::eval::{self, evaluate_model, MetricReport, Report};
use crate::fsio::{hash_file, read_json, sha256_hex, write_atomic, write_json};
use crate::relation::{self, DistortionEmbedding, RelationMatrix};
use crate::rng::derive_seed;
use crate::scenes::generate_scenes;
use crate::synth;
use crate::trainers::{self, FinetuneOutcome, GammaWeights, InitRecord, RunManifest, TrainConfig};

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    pub fn stage_record(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    pub fn aux_root(&self) -> PathBuf {
        self.root.join("data").join("aux")
    }

    pub fn aux_manifest(&self, kind: &str) -> PathBuf {
        self.aux_root().join(kind).join("manifest.json")
    }

    pub fn target_root(&self) -> PathBuf {
        self.root.join("data").join("target")
    }

    pub fn drn_ckpt(&self, bank: bool) -> PathBuf {
        self.root.join(if bank { "drn" } else { "drn-nobank" }).join("drn.ckpt")
    }

    pub fn drn_log(&self, bank: bool) -> PathBuf {
        self.drn_ckpt(bank).with_file_name("train.json")
    }

    pub fn relation(&self, bank: bool) -> PathBuf {
        self.root.join(if bank { "relation.json" } else { "relation-nobank.json" })
    }

    pub fn graph(&self) -> PathBuf {
        self.root.join("graph.json")
    }

    pub fn run_dir(&self, regime: Regime, seed: u64) -> PathBuf {
        self.root.join("runs").join(regime.name()).join(format!("seed{seed}"))
    }

    pub fn sweep_dir(&self, k: usize, regime: Regime, seed: u64) -> PathBuf {
        self.root
            .join("sweep")
            .join(format!("k{k}"))
            .join(regime.name())
            .join(format!("seed{seed}"))
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn sweep_json(&self) -> PathBuf {
        self.root.join("sweep.json")
    }
}

/// Written after a stage completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_hash: String,
    pub config_hash: String,
    /// Output path (relative to the run directory when inside it) to
    /// SHA-256 of its content when the stage finished.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Holds the run directory's lock file while alive.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(DrtlError::Locked(path.parent().map(Path::to_path_buf).unwrap_or_default()))
            }
            Err(e) => Err(DrtlError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn hash_value(v: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("json value serializes"))
}

pub struct Pipeline<'a> {
    cfg: ExperimentConfig,
    layout: Layout,
    force: bool,
    progress: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg.run_dir());
        Ok(Self {
            cfg,
            layout,
            force: false,
            progress: Box::new(|_| {}),
        })
    }

    /// Reruns requested stages even when their hashes match.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn on_progress(mut self, f: impl FnMut(&str) + 'a) -> Self {
        self.progress = Box::new(f);
        self
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn say(&mut self, msg: &str) {
        (self.progress)(msg)
    }

    /// Runs the config's stages.
    pub fn run(&mut self) -> Result<Vec<(Stage, StageStatus)>> {
        let stages = self.cfg.stages.clone();
        self.run_stages(&stages)
    }

    /// Runs `stages` in dependency order.
    pub fn run_stages(&mut self, stages: &[Stage]) -> Result<Vec<(Stage, StageStatus)>> {
        fs::create_dir_all(&self.layout.root).map_err(io_err(&self.layout.root))?;
        let _lock = RunLock::acquire(self.layout.lock())?;
        write_atomic(&self.layout.config(), self.cfg.to_json().as_bytes())?;
        let mut done = Vec::new();
        for stage in Stage::ALL {
            if !stages.contains(&stage) {
                continue;
            }
            let status = self.run_stage(stage)?;
            done.push((stage, status));
        }
        Ok(done)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<StageStatus> {
        let cfg_part = self.stage_config(stage);
        let config_hash = hash_value(&cfg_part);
        let mut upstream = BTreeMap::new();
        for dep in self.dependencies(stage) {
            let rec = self.require(dep)?;
            upstream.insert(dep.name().to_string(), hash_value(&json!(rec.outputs)));
        }
        if stage == Stage::Report {
            if let Some(rec) = self.optional_record(Stage::Sweep) {
                upstream.insert("sweep".into(), hash_value(&json!(rec.outputs)));
            }
        }
        let input_hash = hash_value(&json!({
            "stage": stage,
            "config": cfg_part,
            "upstream": upstream,
        }));
        if !self.force {
            if let Some(rec) = self.optional_record(stage) {
                if rec.input_hash == input_hash {
                    self.say(&format!("{stage}: up to date, skipped"));
                    return Ok(StageStatus::Skipped);
                }
            }
        }
        self.say(&format!("{stage}: running"));
        let t0 = Instant::now();
        let outputs = match stage {
            Stage::Synth => self.stage_synth()?,
            Stage::TrainDrn => self.stage_train_drn(&config_hash)?,
            Stage::Relation => self.stage_relation()?,
            Stage::Pretrain | Stage::Metatrain => self.stage_init(stage, &config_hash)?,
            Stage::Finetune => self.stage_finetune(&config_hash)?,
            Stage::Baseline => self.stage_baseline(&config_hash)?,
            Stage::Sweep => self.stage_sweep(&config_hash)?,
            Stage::Eval => self.stage_eval()?,
            Stage::Report => self.stage_report()?,
        };
        let mut hashed = BTreeMap::new();
        for p in outputs {
            hashed.insert(self.rel(&p), hash_file(&p)?);
        }
        let rec = StageRecord {
            stage,
            input_hash,
            config_hash,
            outputs: hashed,
        };
        write_json(&self.layout.stage_record(stage), &rec)?;
        self.say(&format!("{stage}: done in {:.1}s", t0.elapsed().as_secs_f64()));
        Ok(StageStatus::Ran)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root)
            .map(|r| r.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| p.to_string_lossy().into_owned())
    }

    fn resolve(&self, key: &str) -> PathBuf {
        let p = Path::new(key);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.layout.root.join(p)
        }
    }

    fn optional_record(&self, stage: Stage) -> Option<StageRecord> {
        let rec: StageRecord = read_json(&self.layout.stage_record(stage)).ok()?;
        rec.outputs.keys().all(|k| self.resolve(k).exists()).then_some(rec)
    }

    /// The record of a finished upstream stage whose outputs all exist.
    fn require(&self, stage: Stage) -> Result<StageRecord> {
        let path = self.layout.stage_record(stage);
        let missing = |path: PathBuf| DrtlError::MissingArtifact {
            stage: stage.name().to_string(),
            path,
        };
        let rec: StageRecord = read_json(&path).map_err(|_| missing(path.clone()))?;
        if let Some(k) = rec.outputs.keys().find(|k| !self.resolve(k).exists()) {
            return Err(missing(self.resolve(k)));
        }
        Ok(rec)
    }

    fn init_regimes(&self, stage: Stage, regimes: &[Regime]) -> Vec<Regime> {
        regimes.iter().copied().filter(|r| r.init_stage() == Some(stage)).collect()
    }

    fn needs_relation(&self, regimes: &[Regime]) -> bool {
        self.cfg.gamma == GammaSource::Relation && regimes.iter().any(|r| r.guided())
    }

    fn dependencies(&self, stage: Stage) -> Vec<Stage> {
        let all = self.cfg.all_regimes();
        let main = &self.cfg.regimes;
        let inits = |regimes: &[Regime]| {
            let mut v = Vec::new();
            for s in [Stage::Pretrain, Stage::Metatrain] {
                if regimes.iter().any(|r| r.init_stage() == Some(s)) {
                    v.push(s);
                }
            }
            v
        };
        match stage {
            Stage::Synth => vec![],
            Stage::TrainDrn => vec![Stage::Synth],
            Stage::Relation => vec![Stage::Synth, Stage::TrainDrn],
            Stage::Pretrain | Stage::Metatrain => {
                let mine = self.init_regimes(stage, &all);
                let mut v = vec![Stage::Synth];
                if self.needs_relation(&mine) {
                    v.push(Stage::Relation);
                }
                v
            }
            Stage::Finetune => {
                let mut v = vec![Stage::Synth];
                v.extend(inits(main));
                v
            }
            Stage::Baseline => vec![Stage::Synth],
            Stage::Sweep => {
                let mut v = vec![Stage::Synth];
                if let Some(s) = &self.cfg.sweep {
                    v.extend(inits(&s.regimes));
                }
                v
            }
            Stage::Eval => {
                let mut v = vec![Stage::Synth];
                if main.iter().any(|r| *r != Regime::Baseline) {
                    v.push(Stage::Finetune);
                }
                if main.contains(&Regime::Baseline) {
                    v.push(Stage::Baseline);
                }
                v
            }
            Stage::Report => vec![Stage::Eval],
        }
    }

    /// The part of the config a stage reads.
    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        let gamma_file = match &c.gamma {
            GammaSource::File(p) => hash_file(p).ok(),
            _ => None,
        };
        match stage {
            Stage::Synth => json!({"seed": c.seed, "data": c.data}),
            Stage::TrainDrn => json!({
                "seed": c.seed,
                "drn": c.drn,
                "nobank": c.needs_nobank_relation(),
            }),
            Stage::Relation => json!({
                "seed": c.seed,
                "k": c.data.k,
                "probe_n": c.drn.probe_n,
                "nobank": c.needs_nobank_relation(),
            }),
            Stage::Pretrain | Stage::Metatrain => json!({
                "backbone": c.backbone,
                "train": if stage == Stage::Pretrain { &c.pretrain } else { &c.metatrain },
                "seeds": c.seeds,
                "regimes": self.init_regimes(stage, &c.all_regimes()),
                "gamma": c.gamma,
                "gamma_file": gamma_file,
            }),
            Stage::Finetune => json!({
                "seed": c.seed,
                "k": c.data.k,
                "train": c.finetune,
                "seeds": c.seeds,
                "regimes": c.regimes.iter().filter(|r| **r != Regime::Baseline).collect::<Vec<_>>(),
            }),
            Stage::Baseline => json!({
                "seed": c.seed,
                "k": c.data.k,
                "backbone": c.backbone,
                "train": c.finetune,
                "seeds": c.seeds,
                "enabled": c.regimes.contains(&Regime::Baseline),
            }),
            Stage::Sweep => json!({
                "seed": c.seed,
                "backbone": c.backbone,
                "train": c.finetune,
                "seeds": c.seeds,
                "sweep": c.sweep,
            }),
            Stage::Eval => json!({"seeds": c.seeds, "regimes": c.regimes}),
            Stage::Report => json!({"name": c.name, "seeds": c.seeds, "regimes": c.regimes}),
        }
    }

    // ---- data access ----

    fn target_manifest(&self, split: &str) -> PathBuf {
        let given = if split == "train" {
            &self.cfg.data.target_train
        } else {
            &self.cfg.data.target_test
        };
        given
            .clone()
            .unwrap_or_else(|| self.layout.target_root().join(split).join("manifest.json"))
    }

    fn load_aux(&self) -> Result<Vec<PairedDataset>> {
        self.cfg
            .data
            .aux_kinds
            .iter()
            .map(|k| data::load_pairs(&self.layout.aux_manifest(k.name())))
            .collect()
    }

    fn load_target(&self, split: &str) -> Result<PairedDataset> {
        data::load_pairs(&self.target_manifest(split))
    }

    fn split_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, "target-split", 0)
    }

    fn target_split(&self, train: &PairedDataset, k: usize) -> Result<FewShotSplit> {
        few_shot_split(train, k, self.split_seed())
    }

    fn gamma_for(&self, regime: Regime) -> Result<(Option<GammaWeights>, Option<String>)> {
        let n = self.cfg.data.aux_kinds.len();
        if !regime.guided() {
            return Ok((None, None));
        }
        let kinds: Vec<String> = self.cfg.data.aux_kinds.iter().map(|k| k.name().to_string()).collect();
        let from_relation = |path: &Path| -> Result<(Option<GammaWeights>, Option<String>)> {
            let rel: RelationMatrix = read_json(path)?;
            if rel.kinds != kinds {
                return Err(DrtlError::Relation(format!(
                    "{} lists kinds {:?}, expected {kinds:?}",
                    path.display(),
                    rel.kinds
                )));
            }
            Ok((Some(GammaWeights::from_relation(&rel)?), Some(hash_file(path)?)))
        };
        match &self.cfg.gamma {
            GammaSource::Ones => Ok((Some(GammaWeights::ones(n)), None)),
            GammaSource::Relation => from_relation(&self.layout.relation(regime.uses_bank())),
            GammaSource::File(p) => {
                if let Ok(w) = read_json::<Vec<f64>>(p) {
                    if w.len() != n {
                        return Err(DrtlError::Config(format!(
                            "gamma: {} has {} weights for {n} tasks",
                            p.display(),
                            w.len()
                        )));
                    }
                    Ok((Some(GammaWeights::new(w)?), Some(hash_file(p)?)))
                } else {
                    from_relation(p)
                }
            }
        }
    }

    fn dataset_hashes(&self, aux: Option<&[PairedDataset]>, train: &[data::PairItem]) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        if let Some(aux) = aux {
            for d in aux {
                m.insert(d.kind.clone(), d.content_hash());
            }
        }
        m.insert("target-train".into(), data::hash_pairs(train));
        m
    }

    // ---- stages ----

    fn stage_synth(&mut self) -> Result<Vec<PathBuf>> {
        let d = self.cfg.data.clone();
        let seed = self.cfg.seed;
        let mut outs = Vec::new();
        let clean = generate_scenes(derive_seed(seed, "aux-clean", 0), d.aux_count, d.image_size, d.image_size, d.channels)?;
        for &kind in &d.aux_kinds {
            self.say(&format!("synth: {kind}"));
            synth::make_auxiliary_dataset(&clean, kind, &self.layout.aux_root(), derive_seed(seed, "synth", 0))?;
            outs.push(self.layout.aux_manifest(kind.name()));
        }
        let n_train = if d.target_train.is_none() { d.target_train_count } else { 0 };
        let n_test = if d.target_test.is_none() { d.target_test_count } else { 0 };
        if n_train + n_test > 0 {
            let clean = generate_scenes(
                derive_seed(seed, "target-clean", 0),
                n_train + n_test,
                d.image_size,
                d.image_size,
                d.channels,
            )?;
            let root = self.layout.target_root();
            if n_train > 0 {
                synth::make_pseudo_target_dataset(&clean[..n_train], &root, "train", derive_seed(seed, "target", 0))?;
            }
            if n_test > 0 {
                synth::make_pseudo_target_dataset(&clean[n_train..], &root, "test", derive_seed(seed, "target", 1))?;
            }
        }
        outs.push(self.target_manifest("train"));
        outs.push(self.target_manifest("test"));
        Ok(outs)
    }

    fn stage_train_drn(&mut self, config_hash: &str) -> Result<Vec<PathBuf>> {
        let aux = self.load_aux()?;
        let mut outs = Vec::new();
        let variants: &[bool] = if self.cfg.needs_nobank_relation() { &[true, false] } else { &[true] };
        for &bank in variants {
            let mut dcfg = self.cfg.drn.clone();
            dcfg.use_bank = bank;
            dcfg.seed = derive_seed(self.cfg.seed, "drn", dcfg.seed);
            self.say(&format!("train-drn: {} steps, memory bank {}", dcfg.steps, if bank { "on" } else { "off" }));
            let out = relation::train_drn(&aux, &dcfg)?;
            self.say(&format!(
                "train-drn: train accuracy {:.3}, held-out accuracy {:.3}",
                out.train_accuracy, out.heldout_accuracy
            ));
            let ckpt = self.layout.drn_ckpt(bank);
            let meta = DrnMeta {
                q: dcfg.q,
                d: dcfg.d,
                classes: out.drn.classes.clone(),
                config: dcfg,
                config_hash: config_hash.to_string(),
                train_accuracy: out.train_accuracy,
                heldout_accuracy: out.heldout_accuracy,
            };
            checkpoint::save_drn(&ckpt, &out.drn, &meta)?;
            write_json(
                &self.layout.drn_log(bank),
                &json!({
                    "config_hash": config_hash,
                    "seed": meta.config.seed,
                    "train_accuracy": out.train_accuracy,
                    "heldout_accuracy": out.heldout_accuracy,
                    "loss_log": out.loss_log,
                }),
            )?;
            outs.push(checkpoint::meta_path(&ckpt));
            outs.push(self.layout.drn_log(bank));
            outs.push(ckpt);
        }
        Ok(outs)
    }

    fn stage_relation(&mut self) -> Result<Vec<PathBuf>> {
        let aux = self.load_aux()?;
        let target = self.load_target("train")?;
        let split = self.target_split(&target, self.cfg.data.k)?;
        let seed = self.cfg.seed;
        let probe_n = self.cfg.drn.probe_n;
        let mut outs = Vec::new();
        let variants: &[bool] = if self.cfg.needs_nobank_relation() { &[true, false] } else { &[true] };
        for &bank in variants {
            let (drn, _) = checkpoint::load_drn(&self.layout.drn_ckpt(bank))?;
            let mut samples = Vec::new();
            let mut embs = Vec::new();
            let sets = aux
                .iter()
                .map(|d| (d.kind.as_str(), d.items.as_slice()))
                .chain(std::iter::once(("target", split.train.as_slice())));
            for (i, (kind, items)) in sets.enumerate() {
                let rows = relation::probe_embeddings(items, &drn, probe_n, derive_seed(seed, "probe", i as u64))?;
                embs.push(DistortionEmbedding {
                    kind: kind.to_string(),
                    c: relation::mean_rows(&rows),
                    probe_n,
                });
                samples.extend(rows.into_iter().map(|r| (kind.to_string(), r)));
            }
            let target_emb = embs.pop().expect("target embedding");
            let rel = relation::relation_matrix(&embs, &target_emb, seed)?;
            let line: Vec<String> = rel
                .kinds
                .iter()
                .zip(&rel.gamma)
                .map(|(k, g)| format!("{k}={g:.3}"))
                .collect();
            self.say(&format!("relation: gamma {}", line.join(" ")));
            write_json(&self.layout.relation(bank), &rel)?;
            outs.push(self.layout.relation(bank));
            if bank {
                embs.push(target_emb);
                relation::export_graph(&samples, &embs, &self.layout.graph())?;
                outs.push(self.layout.graph());
            }
        }
        Ok(outs)
    }

    fn stage_init(&mut self, stage: Stage, config_hash: &str) -> Result<Vec<PathBuf>> {
        let aux = self.load_aux()?;
        let regimes = self.init_regimes(stage, &self.cfg.all_regimes());
        let base = if stage == Stage::Pretrain {
            self.cfg.pretrain.clone()
        } else {
            self.cfg.metatrain.clone()
        };
        let mut outs = Vec::new();
        for regime in regimes {
            let (gamma, relation_hash) = self.gamma_for(regime)?;
            for &seed in &self.cfg.seeds.clone() {
                self.say(&format!("{stage}: {regime} seed {seed}"));
                let tcfg = TrainConfig { seed, ..base.clone() };
                let model = RestorationModel::<f32>::new(self.cfg.backbone, seed)?;
                let t0 = Instant::now();
                let out = if stage == Stage::Pretrain {
                    trainers::pretrain(&model, &aux, gamma.as_ref(), &tcfg)?
                } else {
                    trainers::meta_train(&model, &aux, gamma.as_ref(), &tcfg)?
                };
                let dir = self.layout.run_dir(regime, seed);
                let ckpt = dir.join("init.ckpt");
                checkpoint::save_backbone(
                    &ckpt,
                    &out.model,
                    &BackboneMeta {
                        backbone: self.cfg.backbone,
                        regime: regime.name().into(),
                        config_hash: config_hash.into(),
                        seed,
                    },
                )?;
                let rec = InitRecord {
                    stage: stage.name().into(),
                    train: tcfg,
                    config_hash: config_hash.into(),
                    checkpoint: self.rel(&ckpt),
                    relation_hash: relation_hash.clone(),
                    gamma: gamma.as_ref().map(|g| g.gamma.clone()),
                    loss_log: out.loss_log,
                    wall_time_secs: t0.elapsed().as_secs_f64(),
                };
                write_json(&dir.join("init.json"), &rec)?;
                outs.push(checkpoint::meta_path(&ckpt));
                outs.push(ckpt);
            }
        }
        Ok(outs)
    }

    fn write_run(
        &self,
        dir: &Path,
        regime: Regime,
        seed: u64,
        k: Option<usize>,
        config_hash: &str,
        out: &FinetuneOutcome,
        init: Option<InitRecord>,
        dataset_hashes: BTreeMap<String, String>,
        tcfg: &TrainConfig,
        wall: f64,
    ) -> Result<(RunManifest, Vec<PathBuf>)> {
        let ckpt = dir.join("model.ckpt");
        checkpoint::save_backbone(
            &ckpt,
            &out.model,
            &BackboneMeta {
                backbone: self.cfg.backbone,
                regime: regime.name().into(),
                config_hash: config_hash.into(),
                seed,
            },
        )?;
        let mut lines = String::new();
        for p in &out.trace {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        let metrics = dir.join("metrics.jsonl");
        write_atomic(&metrics, lines.as_bytes())?;
        let manifest = RunManifest {
            regime: regime.name().into(),
            backbone: self.cfg.backbone,
            train: tcfg.clone(),
            config_hash: config_hash.into(),
            seed,
            dataset_hashes,
            relation_hash: init.as_ref().and_then(|i| i.relation_hash.clone()),
            gamma: init.as_ref().and_then(|i| i.gamma.clone()),
            k,
            init,
            loss_log: out.loss_log.clone(),
            wall_time_secs: wall,
            checkpoint: self.rel(&ckpt),
            eval: None,
            status: format!("complete; best iteration {}", out.best_iteration),
        };
        let mpath = dir.join("run_manifest.json");
        write_json(&mpath, &manifest)?;
        Ok((manifest, vec![checkpoint::meta_path(&ckpt), ckpt, metrics, mpath]))
    }

    /// Fine-tunes one regime and seed on a few-shot split.
    fn finetune_one(
        &mut self,
        regime: Regime,
        seed: u64,
        split: &FewShotSplit,
        k: Option<usize>,
        dir: &Path,
        config_hash: &str,
    ) -> Result<(RunManifest, Vec<PathBuf>)> {
        let tcfg = TrainConfig {
            seed,
            ..self.cfg.finetune.clone()
        };
        let t0 = Instant::now();
        let (out, init) = match regime.init_stage() {
            None => (trainers::train_baseline(self.cfg.backbone, &split.train, &split.eval, &tcfg)?, None),
            Some(stage) => {
                let idir = self.layout.run_dir(regime, seed);
                let ckpt = idir.join("init.ckpt");
                let missing = |path: PathBuf| DrtlError::MissingArtifact {
                    stage: stage.name().into(),
                    path,
                };
                if !ckpt.exists() {
                    return Err(missing(ckpt));
                }
                let (model, _) = checkpoint::load_backbone(&ckpt)?;
                let rec: InitRecord = read_json(&idir.join("init.json")).map_err(|_| missing(idir.join("init.json")))?;
                (trainers::finetune(&model, &split.train, &split.eval, &tcfg)?, Some(rec))
            }
        };
        let wall = t0.elapsed().as_secs_f64();
        let aux_hashes = if init.is_some() { Some(self.load_aux()?) } else { None };
        let hashes = self.dataset_hashes(aux_hashes.as_deref(), &split.train);
        self.write_run(dir, regime, seed, k, config_hash, &out, init, hashes, &tcfg, wall)
    }

    fn stage_finetune(&mut self, config_hash: &str) -> Result<Vec<PathBuf>> {
        let target = self.load_target("train")?;
        let split = self.target_split(&target, self.cfg.data.k)?;
        let mut outs = Vec::new();
        for regime in self.cfg.regimes.clone() {
            if regime == Regime::Baseline {
                continue;
            }
            for seed in self.cfg.seeds.clone() {
                self.say(&format!("finetune: {regime} seed {seed}"));
                let dir = self.layout.run_dir(regime, seed);
                let (_, o) = self.finetune_one(regime, seed, &split, None, &dir, config_hash)?;
                outs.extend(o);
            }
        }
        Ok(outs)
    }

    fn stage_baseline(&mut self, config_hash: &str) -> Result<Vec<PathBuf>> {
        if !self.cfg.regimes.contains(&Regime::Baseline) {
            return Ok(vec![]);
        }
        let target = self.load_target("train")?;
        let split = self.target_split(&target, self.cfg.data.k)?;
        let mut outs = Vec::new();
        for seed in self.cfg.seeds.clone() {
            self.say(&format!("baseline: seed {seed}"));
            let dir = self.layout.run_dir(Regime::Baseline, seed);
            let (_, o) = self.finetune_one(Regime::Baseline, seed, &split, None, &dir, config_hash)?;
            outs.extend(o);
        }
        Ok(outs)
    }

    fn stage_sweep(&mut self, config_hash: &str) -> Result<Vec<PathBuf>> {
        let sweep = self
            .cfg
            .sweep
            .clone()
            .ok_or_else(|| DrtlError::Config("sweep: no sweep block".into()))?;
        let target = self.load_target("train")?;
        let test = self.load_target("test")?;
        let mut outs = Vec::new();
        let mut manifests = Vec::new();
        for &k in &sweep.ks {
            let split = self.target_split(&target, k)?;
            for &regime in &sweep.regimes {
                for seed in self.cfg.seeds.clone() {
                    self.say(&format!("sweep: k={k} {regime} seed {seed}"));
                    let dir = self.layout.sweep_dir(k, regime, seed);
                    let (mut m, o) = self.finetune_one(regime, seed, &split, Some(k), &dir, config_hash)?;
                    let (model, _) = checkpoint::load_backbone(&dir.join("model.ckpt"))?;
                    m.eval = Some(evaluate_model(&model, &test.items, regime.name(), seed)?);
                    write_json(&dir.join("run_manifest.json"), &m)?;
                    outs.extend(o);
                    manifests.push(m);
                }
            }
        }
        let report = eval::build_report(&manifests)?;
        write_json(&self.layout.sweep_json(), &sweep_export(&report))?;
        outs.push(self.layout.sweep_json());
        Ok(outs)
    }

    fn stage_eval(&mut self) -> Result<Vec<PathBuf>> {
        let test = self.load_target("test")?;
        let mut outs = Vec::new();
        for regime in self.cfg.regimes.clone() {
            for seed in self.cfg.seeds.clone() {
                let dir = self.layout.run_dir(regime, seed);
                let mpath = dir.join("run_manifest.json");
                let stage = if regime == Regime::Baseline { Stage::Baseline } else { Stage::Finetune };
                let mut m: RunManifest = read_json(&mpath).map_err(|_| DrtlError::MissingArtifact {
                    stage: stage.name().into(),
                    path: mpath.clone(),
                })?;
                let (model, _) = checkpoint::load_backbone(&self.resolve(&m.checkpoint))?;
                let rep: MetricReport = evaluate_model(&model, &test.items, regime.name(), seed)?;
                self.say(&format!(
                    "eval: {regime} seed {seed}: {:.3} dB, SSIM {:.4}",
                    rep.mean_psnr, rep.mean_ssim
                ));
                m.eval = Some(rep);
                write_json(&mpath, &m)?;
                outs.push(mpath);
            }
        }
        Ok(outs)
    }

    /// Evaluated manifests of the main grid, in config order.
    pub fn main_manifests(&self) -> Result<Vec<RunManifest>> {
        let mut out = Vec::new();
        for &regime in &self.cfg.regimes {
            for &seed in &self.cfg.seeds {
                let p = self.layout.run_dir(regime, seed).join("run_manifest.json");
                let m: RunManifest = read_json(&p).map_err(|_| DrtlError::MissingArtifact {
                    stage: Stage::Eval.name().into(),
                    path: p.clone(),
                })?;
                if m.eval.is_none() {
                    return Err(DrtlError::MissingArtifact {
                        stage: Stage::Eval.name().into(),
                        path: p,
                    });
                }
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Evaluated sweep manifests, if the sweep stage has run.
    pub fn sweep_manifests(&self) -> Result<Vec<RunManifest>> {
        let Some(sweep) = &self.cfg.sweep else {
            return Ok(vec![]);
        };
        if self.optional_record(Stage::Sweep).is_none() {
            return Ok(vec![]);
        }
        let mut out = Vec::new();
        for &k in &sweep.ks {
            for &regime in &sweep.regimes {
                for &seed in &self.cfg.seeds {
                    out.push(read_json(&self.layout.sweep_dir(k, regime, seed).join("run_manifest.json"))?);
                }
            }
        }
        Ok(out)
    }

    fn stage_report(&mut self) -> Result<Vec<PathBuf>> {
        let mut manifests = self.main_manifests()?;
        manifests.extend(self.sweep_manifests()?);
        let report = eval::build_report(&manifests)?;
        write_json(&self.layout.report_json(), &report)?;
        let md = format!("# {}\n\n{}", self.cfg.name, eval::render_markdown(&report));
        write_atomic(&self.layout.report_md(), md.as_bytes())?;
        let mut outs = vec![self.layout.report_json(), self.layout.report_md()];
        if !report.sweep.is_empty() {
            write_json(&self.layout.sweep_json(), &sweep_export(&report))?;
            outs.push(self.layout.sweep_json());
        }
        Ok(outs)
    }
}

/// PSNR-versus-k series.
fn sweep_export(report: &Report) -> serde_json::Value {
    json!({
        "eval_hash": report.eval_hash,
        "psnr_cap": report.psnr_cap,
        "series": report.sweep,
    })
}

/// Loads a config file, or the named preset when `path` is `None`.
pub fn load_config(path: Option<&Path>, preset: Option<&str>) -> Result<ExperimentConfig> {
    match (path, preset) {
        (Some(p), _) => ExperimentConfig::load(p),
        (None, Some(name)) => crate::config::preset(name),
        (None, None) => Err(DrtlError::Config("no config given; pass --config or --preset".into())),
    }
}
