//! Run configuration: one TOML document with a section per pipeline stage.
//! A single master seed fans out to a named substream per stage, so one
//! number reproduces the whole artifact chain; `seed` keys inside stage
//! sections are overwritten by the derived values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ldtl_core::data::ToyConfig;
use ldtl_core::distill::DistillConfig;
use ldtl_core::eval::{EvalConfig, EvalModelSpec, GeneratorKind, GridSpec};
use ldtl_core::foundation::AEConfig;
use ldtl_core::generator::GeneratorConfig;
use ldtl_core::rng::SeedTree;
use ldtl_core::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    /// Output directory; `--out` overrides it.
    pub out: PathBuf,
    pub train_fraction: f64,
    pub data: ToyConfig,
    pub autoencoder: AEConfig,
    pub scdg: GeneratorConfig,
    pub distill: DistillConfig,
    pub eval: EvalSection,
    /// Optional: when present, `eval` also runs the ablation grid.
    pub grid: Option<GridSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            train_fraction: 0.8,
            data: ToyConfig::default(),
            autoencoder: AEConfig::default(),
            scdg: GeneratorConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalSection::default(),
            grid: None,
        }
    }
}

/// Eval knobs plus the model under evaluation. Thread count and seed are
/// CLI-level concerns and deliberately not part of the file schema.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_trials: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub model: EvalModelSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        let base = EvalConfig::default();
        EvalSection {
            n_trials: base.n_trials,
            epochs: base.epochs,
            lr: base.lr,
            batch_size: base.batch_size,
            model: EvalModelSpec::default(),
        }
    }
}

impl EvalSection {
    pub fn to_config(&self, threads: usize, seed: u64) -> EvalConfig {
        EvalConfig {
            n_trials: self.n_trials,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            threads,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub spc: Vec<usize>,
    pub generators: Vec<GeneratorKind>,
    pub frozen: Vec<bool>,
    pub head_layers: Vec<usize>,
    /// Distillation seeds shared by every cell.
    pub seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        let base = GridSpec::default();
        GridSection {
            spc: base.spc,
            generators: base.generators,
            frozen: base.frozen,
            head_layers: base.head_layers,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            spc: self.spc.clone(),
            generators: self.generators.clone(),
            frozen: self.frozen.clone(),
            head_layers: self.head_layers.clone(),
        }
    }
}

impl RunConfig {
    /// Parse and validate every section up front, then fan the master seed
    /// out to the per-stage configs.
    pub fn load(path: &Path, seed_override: Option<u64>, out_override: Option<PathBuf>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        if let Some(o) = out_override {
            cfg.out = o;
        }

        let tree = SeedTree::new(cfg.seed);
        cfg.data.seed = tree.child("data").master();
        cfg.autoencoder.seed = tree.child("autoencoder").master();
        cfg.scdg.seed = tree.child("scdg").master();
        cfg.distill.seed = tree.child("distill").master();

        if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must be in (0, 1)",
                cfg.train_fraction
            )));
        }
        cfg.data.validate()?;
        cfg.autoencoder.validate()?;
        cfg.scdg.validate()?;
        cfg.distill.validate()?;
        cfg.eval
            .to_config(1, 0)
            .validate()?;
        if let Some(grid) = &cfg.grid {
            if grid.seeds.is_empty() {
                return Err(Error::Config("grid.seeds must not be empty".into()));
            }
            let spec = grid.spec();
            if spec.spc.is_empty()
                || spec.generators.is_empty()
                || spec.frozen.is_empty()
                || spec.head_layers.is_empty()
            {
                return Err(Error::Config("every grid axis needs at least one value".into()));
            }
        }
        Ok(cfg)
    }

    pub fn split_seed(&self) -> u64 {
        SeedTree::new(self.seed).child("split").master()
    }

    pub fn eval_seed(&self) -> u64 {
        SeedTree::new(self.seed).child("eval").master()
    }
}

// ---------------------------------------------------------------- paths

/// Artifact layout under the output directory. Every subcommand writes into
/// its own subtree and reads the upstream ones.
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Paths { out: out.to_path_buf() }
    }

    pub fn raw_matrix(&self) -> PathBuf {
        self.out.join("data/raw.mtx")
    }
    pub fn raw_labels(&self) -> PathBuf {
        self.out.join("data/raw.labels")
    }
    pub fn train_matrix(&self) -> PathBuf {
        self.out.join("data/train.mtx")
    }
    pub fn train_labels(&self) -> PathBuf {
        self.out.join("data/train.labels")
    }
    pub fn test_matrix(&self) -> PathBuf {
        self.out.join("data/test.mtx")
    }
    pub fn test_labels(&self) -> PathBuf {
        self.out.join("data/test.labels")
    }
    pub fn foundation(&self) -> PathBuf {
        self.out.join("checkpoints/foundation.ckpt")
    }
    pub fn generator(&self) -> PathBuf {
        self.out.join("checkpoints/scdg.ckpt")
    }
    pub fn synthetic_matrix(&self) -> PathBuf {
        self.out.join("synthetic/set.mtx")
    }
    pub fn synthetic_labels(&self) -> PathBuf {
        self.out.join("synthetic/set.labels")
    }
    pub fn trace(&self) -> PathBuf {
        self.out.join("synthetic/trace.csv")
    }
    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }
    pub fn eval_metrics(&self) -> PathBuf {
        self.out.join("metrics/eval.csv")
    }
    pub fn grid_metrics(&self) -> PathBuf {
        self.out.join("metrics/grid.csv")
    }
    pub fn grid_aggregate(&self) -> PathBuf {
        self.out.join("grid-aggregate.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.out.join("report.csv")
    }
}

/// Upstream artifacts must exist before a stage reads them; the error names
/// the path and the producing subcommand.
pub fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Artifact(format!(
            "missing artifact {}; run `{producer}` first",
            path.display()
        )))
    }
}
