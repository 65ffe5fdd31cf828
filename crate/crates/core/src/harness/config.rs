//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, lists are comma separated.
//! Unknown and repeated keys are errors. Every key maps to one field of
//! [`ExperimentConfig`] or of the [`TrainConfig`] template it carries.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::nets::Variant;
use crate::task::PretrainConfig;
use crate::trainer::{Scheme, TrainConfig};
use crate::Precision;

/// Evaluations a report can carry beyond mIoU, accuracy, MSE and payload.
pub const OPTIONAL_METRICS: [&str; 1] = ["perceptual"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher: PretrainConfig,
    /// Shared settings; scheme, seed and ratio are filled in per run.
    pub train: TrainConfig,
    /// Codebook size and widths for the residual (dagger) schemes.
    pub dagger_k: usize,
    pub dagger_widths: Vec<usize>,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub ratios: Vec<usize>,
    pub metrics: Vec<String>,
    pub out_dir: PathBuf,
    /// Saved segmenter to reuse instead of pre-training one.
    pub teacher_checkpoint: Option<PathBuf>,
    pub precision: Precision,
    /// Drives the dataset master seed and the segmenter initialisation.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        Self {
            teacher: PretrainConfig { seed: dataset.master_seed, ..PretrainConfig::default() },
            seed: dataset.master_seed,
            dataset,
            train: TrainConfig::new(Scheme::Vqvae),
            dagger_k: 256,
            dagger_widths: vec![32, 64],
            schemes: vec![Scheme::Vqvae, Scheme::GosvaeStar],
            seeds: vec![1, 2, 3],
            ratios: vec![4],
            metrics: vec!["perceptual".into()],
            out_dir: PathBuf::from("runs"),
            teacher_checkpoint: None,
            precision: Precision::Single,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, then applies `overrides`, which replace any setting of
    /// the same key in the text.
    pub fn parse_with(text: &str, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        let lines = text.lines().map(str::to_owned).enumerate();
        let extra = overrides.iter().map(|(k, v)| (usize::MAX, format!("{k} = {v}")));
        for (n, raw) in lines.chain(extra) {
            let line = raw.split('#').next().unwrap().trim();
            let n = if n == usize::MAX { n } else { n + 1 };
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if n != usize::MAX && overrides.iter().any(|(k, _)| *k == key) {
                continue;
            }
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {n}: `{key}` set twice")));
            }
            cfg.set(key, value)?;
        }
        if !seen.contains("teacher_seed") {
            cfg.teacher.seed = cfg.seed;
        }
        if !seen.contains("master_seed") {
            cfg.dataset.master_seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "n_train" => self.dataset.n_train = parse(key, v)?,
            "n_val" => self.dataset.n_val = parse(key, v)?,
            "height" => self.dataset.height = parse(key, v)?,
            "width" => self.dataset.width = parse(key, v)?,
            "classes" => self.dataset.classes = parse(key, v)?,
            "master_seed" => self.dataset.master_seed = parse(key, v)?,
            "teacher_epochs" => self.teacher.epochs = parse(key, v)?,
            "teacher_batch" => self.teacher.batch = parse(key, v)?,
            "teacher_lr" => self.teacher.lr = parse(key, v)?,
            "teacher_seed" => self.teacher.seed = parse(key, v)?,
            "k" => t.k = parse(key, v)?,
            "codeword_len" => t.codeword_len = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "finetune_epochs" => t.finetune_epochs = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "variant" => t.variant = parse(key, v)?,
            "widths" => t.widths = parse_list(key, v)?,
            "reseed_dead" => t.reseed_dead = parse_bool(key, v)?,
            "dagger_k" => self.dagger_k = parse(key, v)?,
            "dagger_widths" => self.dagger_widths = parse_list(key, v)?,
            "schemes" => self.schemes = parse_list(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "ratios" => self.ratios = parse_list(key, v)?,
            "metrics" => self.metrics = parse_list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "teacher_checkpoint" => self.teacher_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "precision" => self.precision = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.ratios.is_empty() {
            return Err(Error::Config("`ratios` must list at least one ratio".into()));
        }
        if let Some(m) = self.metrics.iter().find(|m| !OPTIONAL_METRICS.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown metric `{m}`")));
        }
        for &scheme in &self.schemes {
            for &r in &self.ratios {
                self.run_config(scheme, r, self.seeds[0]).validate()?;
            }
        }
        Ok(())
    }

    /// The training config of one `(scheme, r, seed)` run.
    pub fn run_config(&self, scheme: Scheme, ratio: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig { scheme, ratio, seed, ..self.train.clone() };
        if scheme.dagger() {
            c.k = self.dagger_k;
            c.widths = self.dagger_widths.clone();
            c.variant = Variant::Residual;
        }
        c
    }

    pub fn wants(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }

    /// The config in the same text format `parse` reads.
    pub fn render(&self) -> String {
        let d = &self.dataset;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("precision", format!("{:?}", self.precision).to_lowercase());
        kv("out_dir", self.out_dir.display().to_string());
        if let Some(t) = &self.teacher_checkpoint {
            kv("teacher_checkpoint", t.display().to_string());
        }
        kv("n_train", d.n_train.to_string());
        kv("n_val", d.n_val.to_string());
        kv("height", d.height.to_string());
        kv("width", d.width.to_string());
        kv("classes", d.classes.to_string());
        kv("master_seed", d.master_seed.to_string());
        kv("teacher_epochs", self.teacher.epochs.to_string());
        kv("teacher_batch", self.teacher.batch.to_string());
        kv("teacher_lr", self.teacher.lr.to_string());
        kv("teacher_seed", self.teacher.seed.to_string());
        kv("schemes", join(&self.schemes));
        kv("seeds", join(&self.seeds));
        kv("ratios", join(&self.ratios));
        kv("metrics", self.metrics.join(","));
        kv("k", t.k.to_string());
        kv("codeword_len", t.codeword_len.to_string());
        kv("beta", t.beta.to_string());
        kv("lr", t.lr.to_string());
        kv("epochs", t.epochs.to_string());
        kv("finetune_epochs", t.finetune_epochs.to_string());
        kv("batch", t.batch.to_string());
        kv("variant", format!("{:?}", t.variant).to_lowercase());
        kv("widths", join(&t.widths));
        kv("reseed_dead", t.reseed_dead.to_string());
        kv("dagger_k", self.dagger_k.to_string());
        kv("dagger_widths", join(&self.dagger_widths));
        s
    }
}
