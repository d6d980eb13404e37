//! Model and run configuration.
//!
//! [`RunConfig`] is a flat `key = value` file. Every key has a default,
//! unknown keys are rejected, and [`RunConfig::echo`] prints the effective
//! configuration sorted by key.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tdtb::BridgeOrder;
use crate::tmce::{validate_keep_ratio, CeSource, EliminationStrategy, SegmentLayout};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// 1-based blocks after which search tokens are pruned.
    pub prune_layers: Vec<usize>,
    /// 1-based blocks after which the bridge runs (after pruning).
    pub tdtb_layers: Vec<usize>,
    pub tdtb_enabled: bool,
    pub bridge_order: BridgeOrder,
    pub keep_ratio: f64,
    pub elimination_strategy: EliminationStrategy,
    pub ce_source: CeSource,
    pub template_size: usize,
    pub search_size: usize,
    /// `false` freezes the dynamic slot to a copy of the static template.
    pub dynamic_template: bool,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub focal_gamma: f64,
    pub update_threshold: f64,
    pub template_factor: f64,
    pub search_factor: f64,
    pub score_window: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 16,
            dim: 64,
            heads: 4,
            depth: 12,
            mlp_ratio: 4,
            prune_layers: vec![4, 7, 10],
            tdtb_layers: vec![4],
            tdtb_enabled: true,
            bridge_order: BridgeOrder::TirFirst,
            keep_ratio: 0.7,
            elimination_strategy: EliminationStrategy::Tmce,
            ce_source: CeSource::Rgb,
            template_size: 128,
            search_size: 256,
            dynamic_template: true,
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            focal_gamma: 2.0,
            update_threshold: 0.65,
            template_factor: 2.0,
            search_factor: 4.0,
            score_window: false,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.dim == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return fail("patch_size, dim, depth and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        for (key, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.patch_size != 0 {
                return fail(format!("{key} {size} is not divisible by patch_size {}", self.patch_size));
            }
        }
        if let Some(l) = self.prune_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return fail(format!("prune layer {l} outside 1..={}", self.depth));
        }
        if let Some(l) = self.tdtb_layers.iter().find(|l| !self.prune_layers.contains(l)) {
            return fail(format!("tdtb layer {l} is not a prune layer"));
        }
        validate_keep_ratio(self.keep_ratio)?;
        for (key, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_l1", self.lambda_l1),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{key} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.update_threshold) {
            return fail(format!("update_threshold must lie in [0, 1], got {}", self.update_threshold));
        }
        for (key, v) in [("template_factor", self.template_factor), ("search_factor", self.search_factor)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{key} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch_size).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / self.patch_size).pow(2)
    }

    /// Side of the search feature grid.
    pub fn feat_size(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn layout(&self) -> SegmentLayout {
        SegmentLayout {
            n_static: self.template_tokens(),
            n_dynamic: self.template_tokens(),
            n_search: self.search_tokens(),
        }
    }

    pub fn prunes(&self) -> bool {
        self.elimination_strategy != EliminationStrategy::None
    }

    pub fn bridges_at(&self, layer: usize) -> bool {
        self.tdtb_enabled && self.tdtb_layers.contains(&layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch (0-based) from which learning rates are divided by ten;
    /// `None` means two thirds of the way through.
    pub lr_decay_epoch: Option<usize>,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Epochs over which the training keep ratio falls linearly from 1 to
    /// `keep_ratio`; 0 prunes at the configured ratio from the start.
    pub keep_warmup_epochs: usize,
    /// Largest frame distance between template and search samples.
    pub max_frame_gap: usize,
    /// Search-crop centre jitter as a fraction of the target size.
    pub jitter_shift: f64,
    /// Search-crop log-scale jitter.
    pub jitter_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            samples_per_epoch: 512,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            lr_backbone: 1e-3,
            lr_other: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epoch: None,
            grad_clip: 0.0,
            keep_warmup_epochs: 0,
            max_frame_gap: 10,
            jitter_shift: 0.75,
            jitter_scale: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch.unwrap_or((2 * self.epochs).div_ceil(3))
    }

    /// Keep ratio used for training in `epoch`.
    pub fn keep_ratio_at(&self, epoch: usize, target: f64) -> f64 {
        if epoch >= self.keep_warmup_epochs {
            target
        } else {
            1.0 - (1.0 - target) * epoch as f64 / self.keep_warmup_epochs as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub suites: Vec<String>,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub frame_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            suites: vec!["clean".into(), "low_light".into(), "thermal_crossover".into()],
            train_sequences: 24,
            test_sequences: 6,
            frames: 30,
            frame_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub pr_threshold: f64,
    pub npr_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pr_threshold: 20.0,
            npr_threshold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to read; empty means `<out_dir>/model.btmt`.
    pub checkpoint: PathBuf,
    /// Tracker output to evaluate; empty means `<out_dir>/results`.
    pub results_dir: PathBuf,
    /// One sequence to track; empty tracks the whole test split.
    pub sequence: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            data_dir: "data".into(),
            out_dir: "out".into(),
            checkpoint: PathBuf::new(),
            results_dir: PathBuf::new(),
            sequence: PathBuf::new(),
        }
    }
}

impl PathConfig {
    pub fn checkpoint(&self) -> PathBuf {
        if self.checkpoint.as_os_str().is_empty() {
            self.out_dir.join("model.btmt")
        } else {
            self.checkpoint.clone()
        }
    }

    pub fn results_dir(&self) -> PathBuf {
        if self.results_dir.as_os_str().is_empty() {
            self.out_dir.join("results")
        } else {
            self.results_dir.clone()
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data_dir.join("test")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
    pub bench_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            eval: EvalConfig::default(),
            paths: PathConfig::default(),
            bench_frames: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.samples_per_epoch < t.batch_size {
            return Err(Error::Config(
                "epochs and batch_size must be positive and samples_per_epoch >= batch_size".into(),
            ));
        }
        if self.gen.frames < 2 {
            return Err(Error::Config("gen_frames must be at least 2".into()));
        }
        if self.gen.frame_size < 32 {
            return Err(Error::Config("gen_frame_size must be at least 32".into()));
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.gen;
        let p = &mut self.paths;
        match key {
            "patch_size" => m.patch_size = parse(key, v)?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "depth" => m.depth = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "prune_layers" => m.prune_layers = parse_list(key, v)?,
            "tdtb_layers" => m.tdtb_layers = parse_list(key, v)?,
            "tdtb_enabled" => m.tdtb_enabled = parse(key, v)?,
            "bridge_order" => m.bridge_order = parse(key, v)?,
            "keep_ratio" => m.keep_ratio = parse(key, v)?,
            "elimination_strategy" => m.elimination_strategy = parse(key, v)?,
            "ce_source" => m.ce_source = parse(key, v)?,
            "template_size" => m.template_size = parse(key, v)?,
            "search_size" => m.search_size = parse(key, v)?,
            "dynamic_template" => m.dynamic_template = parse(key, v)?,
            "lambda_iou" => m.lambda_iou = parse(key, v)?,
            "lambda_l1" => m.lambda_l1 = parse(key, v)?,
            "focal_gamma" => m.focal_gamma = parse(key, v)?,
            "update_threshold" => m.update_threshold = parse(key, v)?,
            "template_factor" => m.template_factor = parse(key, v)?,
            "search_factor" => m.search_factor = parse(key, v)?,
            "score_window" => m.score_window = parse(key, v)?,
            "seed" => m.seed = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "samples_per_epoch" => t.samples_per_epoch = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "optimizer" => t.optimizer = parse(key, v)?,
            "lr_backbone" => t.lr_backbone = parse(key, v)?,
            "lr_other" => t.lr_other = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "lr_decay_epoch" => t.lr_decay_epoch = if v == "auto" { None } else { Some(parse(key, v)?) },
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "keep_warmup_epochs" => t.keep_warmup_epochs = parse(key, v)?,
            "max_frame_gap" => t.max_frame_gap = parse(key, v)?,
            "jitter_shift" => t.jitter_shift = parse(key, v)?,
            "jitter_scale" => t.jitter_scale = parse(key, v)?,
            "gen_suites" => g.suites = parse_list(key, v)?,
            "gen_train_sequences" => g.train_sequences = parse(key, v)?,
            "gen_test_sequences" => g.test_sequences = parse(key, v)?,
            "gen_frames" => g.frames = parse(key, v)?,
            "gen_frame_size" => g.frame_size = parse(key, v)?,
            "pr_threshold" => self.eval.pr_threshold = parse(key, v)?,
            "npr_threshold" => self.eval.npr_threshold = parse(key, v)?,
            "bench_frames" => self.bench_frames = parse(key, v)?,
            "data_dir" => p.data_dir = v.into(),
            "out_dir" => p.out_dir = v.into(),
            "checkpoint" => p.checkpoint = v.into(),
            "results_dir" => p.results_dir = v.into(),
            "sequence" => p.sequence = v.into(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let g = &self.gen;
        let p = &self.paths;
        let mut e = vec![
            ("patch_size", m.patch_size.to_string()),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("depth", m.depth.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("prune_layers", list(&m.prune_layers)),
            ("tdtb_layers", list(&m.tdtb_layers)),
            ("tdtb_enabled", m.tdtb_enabled.to_string()),
            ("bridge_order", m.bridge_order.to_string()),
            ("keep_ratio", m.keep_ratio.to_string()),
            ("elimination_strategy", m.elimination_strategy.to_string()),
            ("ce_source", m.ce_source.to_string()),
            ("template_size", m.template_size.to_string()),
            ("search_size", m.search_size.to_string()),
            ("dynamic_template", m.dynamic_template.to_string()),
            ("lambda_iou", m.lambda_iou.to_string()),
            ("lambda_l1", m.lambda_l1.to_string()),
            ("focal_gamma", m.focal_gamma.to_string()),
            ("update_threshold", m.update_threshold.to_string()),
            ("template_factor", m.template_factor.to_string()),
            ("search_factor", m.search_factor.to_string()),
            ("score_window", m.score_window.to_string()),
            ("seed", m.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("samples_per_epoch", t.samples_per_epoch.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("lr_backbone", t.lr_backbone.to_string()),
            ("lr_other", t.lr_other.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            (
                "lr_decay_epoch",
                t.lr_decay_epoch.map_or("auto".to_string(), |e| e.to_string()),
            ),
            ("grad_clip", t.grad_clip.to_string()),
            ("keep_warmup_epochs", t.keep_warmup_epochs.to_string()),
            ("max_frame_gap", t.max_frame_gap.to_string()),
            ("jitter_shift", t.jitter_shift.to_string()),
            ("jitter_scale", t.jitter_scale.to_string()),
            ("gen_suites", list(&g.suites)),
            ("gen_train_sequences", g.train_sequences.to_string()),
            ("gen_test_sequences", g.test_sequences.to_string()),
            ("gen_frames", g.frames.to_string()),
            ("gen_frame_size", g.frame_size.to_string()),
            ("pr_threshold", self.eval.pr_threshold.to_string()),
            ("npr_threshold", self.eval.npr_threshold.to_string()),
            ("bench_frames", self.bench_frames.to_string()),
            ("data_dir", path(&p.data_dir)),
            ("out_dir", path(&p.out_dir)),
            ("checkpoint", path(&p.checkpoint)),
            ("results_dir", path(&p.results_dir)),
            ("sequence", path(&p.sequence)),
        ];
        e.sort_by_key(|(k, _)| *k);
        e
    }

    /// The effective configuration as `key = value` lines.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
