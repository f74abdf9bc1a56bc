//! Experiment configuration and the built-in presets.
//!
//! A config file is JSON; `//` line comments are stripped before parsing.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbones::{Arch, BackboneConfig};
use crate::error::{io_err, DrtlError, Result};
use crate::fsio::sha256_hex;
use crate::relation::DrnConfig;
use crate::synth::DistortionKind;
use crate::trainers::TrainConfig;

/// Environment variable naming the directory that holds run directories.
pub const OUT_ENV: &str = "DRTL_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    TrainDrn,
    Relation,
    Pretrain,
    Metatrain,
    Finetune,
    Baseline,
    Sweep,
    Eval,
    Report,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::TrainDrn,
        Stage::Relation,
        Stage::Pretrain,
        Stage::Metatrain,
        Stage::Finetune,
        Stage::Baseline,
        Stage::Sweep,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainDrn => "train-drn",
            Stage::Relation => "relation",
            Stage::Pretrain => "pretrain",
            Stage::Metatrain => "metatrain",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
            Stage::Sweep => "sweep",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = DrtlError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| DrtlError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Baseline,
    Pretrain,
    Maml,
    DrtlP,
    DrtlM,
    /// DRTL_m with weights from a relation network trained without its
    /// memory graph.
    DrtlMNoBank,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Baseline,
        Regime::Pretrain,
        Regime::Maml,
        Regime::DrtlP,
        Regime::DrtlM,
        Regime::DrtlMNoBank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Pretrain => "pretrain",
            Regime::Maml => "maml",
            Regime::DrtlP => "drtl-p",
            Regime::DrtlM => "drtl-m",
            Regime::DrtlMNoBank => "drtl-m-nobank",
        }
    }

    /// Stage that produces this regime's initialization, if any.
    pub fn init_stage(self) -> Option<Stage> {
        match self {
            Regime::Baseline => None,
            Regime::Pretrain | Regime::DrtlP => Some(Stage::Pretrain),
            Regime::Maml | Regime::DrtlM | Regime::DrtlMNoBank => Some(Stage::Metatrain),
        }
    }

    pub fn guided(self) -> bool {
        matches!(self, Regime::DrtlP | Regime::DrtlM | Regime::DrtlMNoBank)
    }

    /// Whether the relation weights come from the memory-graph network.
    pub fn uses_bank(self) -> bool {
        self != Regime::DrtlMNoBank
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = DrtlError;
    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| DrtlError::Config(format!("unknown regime {s:?}")))
    }
}

/// Where guided regimes take their task weights from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GammaSource {
    /// `relation.json` written by the relation stage.
    #[default]
    Relation,
    /// All ones, turning guided regimes into their unguided forms.
    Ones,
    /// A relation file, or a bare JSON array of weights.
    File(PathBuf),
}

impl FromStr for GammaSource {
    type Err = DrtlError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relation" => GammaSource::Relation,
            "ones" => GammaSource::Ones,
            "" => return Err(DrtlError::Config("gamma: empty value".into())),
            p => GammaSource::File(PathBuf::from(p)),
        })
    }
}

impl fmt::Display for GammaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaSource::Relation => f.write_str("relation"),
            GammaSource::Ones => f.write_str("ones"),
            GammaSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for GammaSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GammaSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub aux_kinds: Vec<DistortionKind>,
    /// Clean images per auxiliary kind.
    pub aux_count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub target_train_count: usize,
    pub target_test_count: usize,
    /// Manifest of real target training pairs; replaces the pseudo-target.
    pub target_train: Option<PathBuf>,
    /// Manifest of real target test pairs.
    pub target_test: Option<PathBuf>,
    /// Few-shot size: target pairs used for fine-tuning.
    pub k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            aux_kinds: DistortionKind::ALL.to_vec(),
            aux_count: 100,
            image_size: 96,
            channels: 3,
            target_train_count: 40,
            target_test_count: 30,
            target_train: None,
            target_test: None,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub regimes: Vec<Regime>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 15, 20, 25, 30],
            regimes: vec![Regime::Baseline, Regime::DrtlP],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    /// Seed for data synthesis and the relation network.
    pub seed: u64,
    /// One training run per regime and seed.
    pub seeds: Vec<u64>,
    pub stages: Vec<Stage>,
    /// Output root; the `DRTL_OUT` variable and `./runs` are the fallbacks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_root: Option<PathBuf>,
    pub data: DataConfig,
    pub drn: DrnConfig,
    pub backbone: BackboneConfig,
    pub pretrain: TrainConfig,
    pub metatrain: TrainConfig,
    pub finetune: TrainConfig,
    pub regimes: Vec<Regime>,
    pub gamma: GammaSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            seeds: vec![0],
            stages: Stage::ALL.iter().copied().filter(|&s| s != Stage::Sweep).collect(),
            out_root: None,
            data: DataConfig::default(),
            drn: DrnConfig::default(),
            backbone: BackboneConfig::tiny_dncnn(3),
            pretrain: TrainConfig::default(),
            metatrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            regimes: vec![
                Regime::Baseline,
                Regime::Pretrain,
                Regime::Maml,
                Regime::DrtlP,
                Regime::DrtlM,
            ],
            gamma: GammaSource::Relation,
            sweep: None,
        }
    }
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        DrtlError::Config(m) | DrtlError::Param(m) => DrtlError::Config(format!("{name}: {m}")),
        other => DrtlError::Config(format!("{name}: {other}")),
    })
}

fn check(name: &str, ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DrtlError::Config(format!("{name}: {}", msg())))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check("name", valid_name(&self.name), || {
            format!("{:?} must be non-empty and use only [A-Za-z0-9._-]", self.name)
        })?;
        check("seeds", !self.seeds.is_empty(), || "at least one seed is required".into())?;
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        check("seeds", seen.len() == self.seeds.len(), || "seeds must be distinct".into())?;
        check("stages", !self.stages.is_empty(), || "no stages requested".into())?;
        let d = &self.data;
        check("data.aux_kinds", !d.aux_kinds.is_empty(), || "at least one kind".into())?;
        let mut kinds = d.aux_kinds.clone();
        kinds.sort();
        kinds.dedup();
        check("data.aux_kinds", kinds.len() == d.aux_kinds.len(), || "kinds must be distinct".into())?;
        check("data.aux_count", d.aux_count >= 2, || format!("must be >= 2, got {}", d.aux_count))?;
        check("data.channels", d.channels == 1 || d.channels == 3, || {
            format!("must be 1 or 3, got {}", d.channels)
        })?;
        let min_size = self.drn.patch.max(self.pretrain.patch).max(self.metatrain.patch).max(self.finetune.patch);
        check("data.image_size", d.image_size >= min_size.max(11), || {
            format!("must be >= {} (largest patch), got {}", min_size.max(11), d.image_size)
        })?;
        if d.target_train.is_none() {
            check("data.target_train_count", d.target_train_count >= 1, || "must be >= 1".into())?;
            check("data.k", d.k >= 1 && d.k <= d.target_train_count, || {
                format!("must be in [1, {}], got {}", d.target_train_count, d.k)
            })?;
        }
        if d.target_test.is_none() {
            check("data.target_test_count", d.target_test_count >= 1, || "must be >= 1".into())?;
        }
        check("drn.channels", self.drn.channels == d.channels, || {
            format!("{} does not match data.channels {}", self.drn.channels, d.channels)
        })?;
        check("backbone.channels", self.backbone.channels == d.channels, || {
            format!("{} does not match data.channels {}", self.backbone.channels, d.channels)
        })?;
        field("drn", self.drn.validate())?;
        field("backbone", self.backbone.validate())?;
        field("pretrain", self.pretrain.validate())?;
        field("metatrain", self.metatrain.validate())?;
        field("finetune", self.finetune.validate())?;
        check("regimes", !self.regimes.is_empty(), || "at least one regime".into())?;
        let mut r = self.regimes.clone();
        r.sort();
        r.dedup();
        check("regimes", r.len() == self.regimes.len(), || "regimes must be distinct".into())?;
        if let Some(s) = &self.sweep {
            check("sweep.ks", !s.ks.is_empty(), || "at least one k".into())?;
            if d.target_train.is_none() {
                if let Some(&bad) = s.ks.iter().find(|&&k| k == 0 || k > d.target_train_count) {
                    return Err(DrtlError::Config(format!(
                        "sweep.ks: {bad} is outside [1, {}]",
                        d.target_train_count
                    )));
                }
            }
            check("sweep.regimes", !s.regimes.is_empty(), || "at least one regime".into())?;
            check("stages", self.stages.contains(&Stage::Sweep), || {
                "a sweep block is set but the sweep stage is not listed".into()
            })?;
        } else {
            check("sweep", !self.stages.contains(&Stage::Sweep), || {
                "the sweep stage needs a sweep block".into()
            })?;
        }
        Ok(())
    }

    /// Regimes run by any training stage, main grid first.
    pub fn all_regimes(&self) -> Vec<Regime> {
        let mut out = self.regimes.clone();
        if let Some(s) = &self.sweep {
            for &r in &s.regimes {
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn needs_nobank_relation(&self) -> bool {
        self.all_regimes().iter().any(|r| r.guided() && !r.uses_bank())
    }

    /// Parses JSON after removing `//` comments.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&strip_comments(s))
            .map_err(|e| DrtlError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&s).map_err(|e| match e {
            DrtlError::Config(m) => DrtlError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Hash of the whole config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// The output root, from the config, then `DRTL_OUT`, then `./runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out_root
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(&self.name)
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Drops `//` comments that are outside string literals.
pub fn strip_comments(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for line in s.lines() {
        let mut in_str = false;
        let mut escaped = false;
        let mut cut = line.len();
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if in_str {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_str = false;
                }
            } else if b == b'"' {
                in_str = true;
            } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                cut = i;
                break;
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

pub const PRESETS: [&str; 4] = ["table2-desk", "fig6-sweep", "table4-ablation", "smoke"];

fn desk_train(iterations: usize, eval_every: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        meta_lr: 1e-3,
        inner_lr: 1e-2,
        batch: 8,
        patch: 32,
        iterations,
        eval_every,
        decay_every: 3000,
        ..TrainConfig::default()
    }
}

fn desk() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0, 1, 2],
        backbone: BackboneConfig {
            arch: Arch::TinyDnCNN,
            depth: 5,
            width: 16,
            channels: 3,
        },
        pretrain: desk_train(900, 300),
        metatrain: desk_train(150, 50),
        finetune: desk_train(400, 50),
        ..ExperimentConfig::default()
    }
}

/// Ready-to-edit desk-scale configs for the standard experiments.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = desk();
    cfg.name = name.to_string();
    match name {
        "table2-desk" => {}
        "fig6-sweep" => {
            cfg.regimes = vec![Regime::Baseline, Regime::DrtlP];
            cfg.sweep = Some(SweepConfig::default());
            cfg.stages = Stage::ALL
                .iter()
                .copied()
                .filter(|&s| s != Stage::Metatrain)
                .collect();
        }
        "table4-ablation" => {
            cfg.regimes = vec![Regime::DrtlM, Regime::DrtlMNoBank];
            cfg.stages = Stage::ALL
                .iter()
                .copied()
                .filter(|&s| !matches!(s, Stage::Pretrain | Stage::Baseline | Stage::Sweep))
                .collect();
        }
        "smoke" => {
            cfg.seeds = vec![0];
            cfg.data.aux_count = 6;
            cfg.data.image_size = 40;
            cfg.data.target_train_count = 6;
            cfg.data.target_test_count = 3;
            cfg.data.k = 3;
            cfg.drn = DrnConfig {
                stage_widths: vec![4, 8, 8],
                stage_convs: vec![1, 1, 1],
                d: 8,
                q: 4,
                steps: 20,
                batch: 4,
                patch: 32,
                probe_n: 8,
                eval_patches_per_kind: 4,
                ..DrnConfig::default()
            };
            cfg.backbone.depth = 3;
            cfg.backbone.width = 4;
            for t in [&mut cfg.pretrain, &mut cfg.metatrain, &mut cfg.finetune] {
                t.iterations = 3;
                t.batch = 2;
                t.patch = 16;
                t.eval_every = 2;
            }
        }
        _ => {
            return Err(DrtlError::Config(format!(
                "unknown preset {name:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let back = ExperimentConfig::from_json_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert!(preset("table9").is_err());
    }

    #[test]
    fn comments_are_stripped_outside_strings() {
        let s = "{ // lead\n \"name\": \"a//b\" // tail\n}";
        let v: serde_json::Value = serde_json::from_str(&strip_comments(s)).unwrap();
        assert_eq!(v["name"], "a//b");
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_json_str(r#"{"data": {"k": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("data.k"), "{err}");
        let err = ExperimentConfig::from_json_str(r#"{"finetune": {"lr": -1}}"#).unwrap_err();
        assert!(err.to_string().contains("finetune"), "{err}");
        let err = ExperimentConfig::from_json_str(r#"{"sweep": {"ks": [5], "regimes": ["baseline"]}}"#).unwrap_err();
        assert!(err.to_string().contains("stages"), "{err}");
        let err = ExperimentConfig::from_json_str(r#"{"regimes": ["nope"]}"#).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn gamma_source_parses() {
        assert_eq!("ones".parse::<GammaSource>().unwrap(), GammaSource::Ones);
        assert_eq!("relation".parse::<GammaSource>().unwrap(), GammaSource::Relation);
        assert_eq!(
            "w.json".parse::<GammaSource>().unwrap(),
            GammaSource::File(PathBuf::from("w.json"))
        );
    }
}
