//! Experiment orchestration behind the `otpel` commands.
//!
//! All artifacts live under the configured output directory:
//!
//! ```text
//! out_dir/
//!   source.bin  target.bin  backbone.bin  bank.bin
//!   runs/<label>/run.toml  pel.bin  metrics.csv  results.csv  distances.csv
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{corpus_mae, load_checkpoint, pretrain, save_checkpoint, BackboneConfig, PretrainConfig};
use crate::data::{generate, load_corpus, save_corpus, split, Corpus, CorpusSpec, Spectrogram};
use crate::error::{Error, Result};
use crate::eval::{collect_report, corpus_mcd, mean_std, write_results_csv, Report, ResultRow};
use crate::nn::{count_params, ParamRegistry};
use crate::ot::MetricKind;
use crate::pel::{assemble, load_sidecar, save_sidecar, AdaptedModel, Method, PelConfig};
use crate::train::{
    adapt, build_feature_bank, AdaptOutcome, distances_from_metrics, load_bank, read_metrics_csv, save_bank, write_distances_csv,
    write_metrics_csv, BankConfig, FeatureBank, TrainConfig,
};

pub const SEED_ENV: &str = "OTPEL_SEED";

pub const SOURCE_FILE: &str = "source.bin";
pub const TARGET_FILE: &str = "target.bin";
pub const BACKBONE_FILE: &str = "backbone.bin";
pub const BANK_FILE: &str = "bank.bin";
pub const SIDECAR_FILE: &str = "pel.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const RUN_META_FILE: &str = "run.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub source_train: f64,
    pub target_train: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            source_train: 0.9,
            target_train: 0.5,
            seed: 3,
        }
    }
}

/// One cell of the method × metric grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GridCell {
    pub method: Method,
    /// `None` runs without the regularizer.
    pub metric: Option<MetricKind>,
}

impl GridCell {
    pub fn label(&self) -> String {
        match self.metric {
            Some(m) => format!("{} w/ {}", self.method, m),
            None => self.method.to_string(),
        }
    }

    pub fn slug(&self) -> String {
        match self.metric {
            Some(m) => format!("{}_{}", self.method.slug(), m.label().to_ascii_lowercase()),
            None => self.method.slug().to_owned(),
        }
    }

    /// The eleven configurations of the method column: fine-tuning
    /// baselines alone, every PEL method with and without each metric.
    pub fn full_grid() -> Vec<GridCell> {
        let mut cells = vec![
            GridCell {
                method: Method::FullFt,
                metric: None,
            },
            GridCell {
                method: Method::DecoderFt,
                metric: None,
            },
        ];
        for method in [Method::Ir, Method::La, Method::IrLr] {
            for metric in [None, Some(MetricKind::Swd), Some(MetricKind::Mmd)] {
                cells.push(GridCell { method, metric });
            }
        }
        cells
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for GridCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, metric) = match s.split_once(" w/ ") {
            Some((m, k)) => (m.parse()?, Some(k.parse()?)),
            None => (s.parse()?, None),
        };
        let cell = GridCell { method, metric };
        if cell.metric.is_some() && !method.is_pel() {
            return Err(Error::Config(format!(
                "{s:?}: the regularizer applies to IR, LA and IR+LR only"
            )));
        }
        Ok(cell)
    }
}

impl TryFrom<String> for GridCell {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridCell> for String {
    fn from(c: GridCell) -> Self {
        c.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cells: Vec<GridCell>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cells: GridCell::full_grid(),
        }
    }
}

/// Everything a run depends on. `seed` drives backbone pretraining and
/// adaptation; corpus, split and bank seeds live in their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths are resolved against the config file's directory.
    pub out_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub source: CorpusSpec,
    pub target: CorpusSpec,
    pub split: SplitConfig,
    pub pretrain: PretrainConfig,
    pub bank: BankConfig,
    pub pel: PelConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            backbone: BackboneConfig::default(),
            source: CorpusSpec::source_default(),
            target: CorpusSpec::target_default(),
            split: SplitConfig::default(),
            pretrain: PretrainConfig::default(),
            bank: BankConfig::default(),
            pel: PelConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, applies `OTPEL_SEED` when set, and resolves the
    /// output directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        if cfg.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        for (name, spec) in [("source", &self.source), ("target", &self.target)] {
            if spec.vocab_size != self.backbone.vocab_size
                || spec.expansion_factor != self.backbone.expansion_factor
                || spec.n_mel != self.backbone.n_mel
            {
                return Err(Error::Config(format!(
                    "[{name}] vocab_size, expansion_factor and n_mel must match [backbone]"
                )));
            }
        }
        Ok(())
    }

    fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn train_config(&self, cell: GridCell) -> TrainConfig {
        let mut t = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        match cell.metric {
            Some(kind) => t.metric.kind = kind,
            None => t = t.without_ot(),
        }
        t
    }

    pub fn pel_config(&self, method: Method) -> PelConfig {
        PelConfig {
            method,
            ..self.pel.clone()
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    pub fn run_dir(&self, cell: GridCell) -> PathBuf {
        self.out_dir.join("runs").join(cell.slug())
    }
}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, producer })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Train/held-out splits of both corpora, as stored by `pretrain`.
pub struct Splits {
    pub source_train: Corpus,
    pub source_heldout: Corpus,
    pub target_train: Corpus,
    pub target_heldout: Corpus,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let source = load_corpus(&require(cfg.path(SOURCE_FILE), "pretrain")?)?;
    let target = load_corpus(&require(cfg.path(TARGET_FILE), "pretrain")?)?;
    let (source_train, source_heldout) = split(&source, cfg.split.source_train, cfg.split.seed)?;
    let (target_train, target_heldout) = split(&target, cfg.split.target_train, cfg.split.seed)?;
    Ok(Splits {
        source_train,
        source_heldout,
        target_train,
        target_heldout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainSummary {
    pub source_heldout_mae: f64,
    pub target_heldout_mae: f64,
    pub final_train_mae: f64,
    pub n_params: usize,
}

/// Generates both corpora, pretrains the backbone on the source training
/// split and writes `source.bin`, `target.bin` and `backbone.bin`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    create_dir(&cfg.out_dir)?;
    let source = generate(&cfg.source)?;
    let target = generate(&cfg.target)?;
    save_corpus(&source, &cfg.path(SOURCE_FILE))?;
    save_corpus(&target, &cfg.path(TARGET_FILE))?;
    let splits = load_splits(cfg)?;
    let out = pretrain(
        &cfg.backbone,
        &splits.source_train,
        Some(&splits.source_heldout),
        &cfg.pretrain_config(),
    )?;
    save_checkpoint(&cfg.backbone, &out.registry, &cfg.path(BACKBONE_FILE))?;
    let target_heldout_mae = corpus_mae(&splits.target_heldout, |u| out.backbone.predict(&u.tokens))?;
    Ok(PretrainSummary {
        source_heldout_mae: out.heldout_mae.expect("held-out split given"),
        target_heldout_mae,
        final_train_mae: *out.losses.last().unwrap_or(&f64::NAN),
        n_params: count_params(&out.registry).total,
    })
}

/// Captures source features at every decoder tap and writes `bank.bin`.
pub fn cmd_bank(cfg: &RunConfig) -> Result<FeatureBank> {
    let (backbone, _) = load_checkpoint(&cfg.backbone, &require(cfg.path(BACKBONE_FILE), "pretrain")?)?;
    let splits = load_splits(cfg)?;
    let bank = build_feature_bank(&backbone, &splits.source_train, &backbone.all_taps(), &cfg.bank)?;
    save_bank(&bank, &cfg.backbone, &cfg.bank, &cfg.path(BANK_FILE))?;
    Ok(bank)
}

/// Identifies the configuration a run directory was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub cell: GridCell,
}

fn read_meta(run_dir: &Path) -> Result<RunMeta> {
    let path = require(run_dir.join(RUN_META_FILE), "adapt")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Malformed {
        path,
        reason: e.to_string(),
    })
}

fn assemble_cell(cfg: &RunConfig, cell: GridCell) -> Result<(AdaptedModel, ParamRegistry)> {
    let ckpt = require(cfg.path(BACKBONE_FILE), "pretrain")?;
    assemble(&cfg.backbone, &ckpt, &cfg.pel_config(cell.method))
}

/// A finished adaptation run, not yet written to disk.
pub struct Adapted {
    pub cell: GridCell,
    pub model: AdaptedModel,
    pub registry: ParamRegistry,
    pub outcome: AdaptOutcome,
}

/// Adapts one grid cell on the target training split.
pub fn adapt_cell(cfg: &RunConfig, cell: GridCell) -> Result<Adapted> {
    if cell.metric.is_some() && !cell.method.is_pel() {
        return Err(Error::Config(format!(
            "{}: the regularizer applies to IR, LA and IR+LR only",
            cell.label()
        )));
    }
    let (model, registry) = assemble_cell(cfg, cell)?;
    let splits = load_splits(cfg)?;
    let bank = if cell.method.is_pel() {
        Some(load_bank(&require(cfg.path(BANK_FILE), "bank")?, &cfg.backbone, &cfg.bank)?)
    } else {
        None
    };
    let train = cfg.train_config(cell);
    let outcome = adapt(&model, &registry, &splits.target_train, bank.as_ref(), &train)?;
    Ok(Adapted {
        cell,
        model,
        registry,
        outcome,
    })
}

/// Writes `run.toml`, `pel.bin` and `metrics.csv` of a run and returns its
/// directory.
pub fn save_run(cfg: &RunConfig, run: &Adapted) -> Result<PathBuf> {
    let dir = cfg.run_dir(run.cell);
    create_dir(&dir)?;
    let meta = toml::to_string(&RunMeta { cell: run.cell }).map_err(|e| Error::Config(e.to_string()))?;
    let meta_path = dir.join(RUN_META_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    save_sidecar(&run.model, &run.registry, &dir.join(SIDECAR_FILE))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &run.outcome)?;
    Ok(dir)
}

/// [`adapt_cell`] followed by [`save_run`].
pub fn cmd_adapt(cfg: &RunConfig, cell: GridCell) -> Result<PathBuf> {
    save_run(cfg, &adapt_cell(cfg, cell)?)
}

/// Loads the adapted model stored in a run directory.
pub fn load_run(cfg: &RunConfig, run_dir: &Path) -> Result<(GridCell, AdaptedModel, ParamRegistry)> {
    let meta = read_meta(run_dir)?;
    let (model, reg) = assemble_cell(cfg, meta.cell)?;
    load_sidecar(&model, &reg, &require(run_dir.join(SIDECAR_FILE), "adapt")?)?;
    Ok((meta.cell, model, reg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub row: ResultRow,
    pub heldout_mae: f64,
}

/// Scores a run on the held-out target split and writes `results.csv`.
pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> Result<EvalSummary> {
    let (cell, model, reg) = load_run(cfg, run_dir)?;
    let rows = read_metrics_csv(&require(run_dir.join(METRICS_FILE), "adapt")?)?;
    let splits = load_splits(cfg)?;
    let heldout = &splits.target_heldout;
    let mcds = crate::tensor::no_grad(|| {
        corpus_mcd(heldout, |tokens| Spectrogram::from_tensor(&model.predict(tokens)?))
    })?;
    let (mcd_mean, mcd_std) = mean_std(&mcds);
    let row = ResultRow {
        method: cell.label(),
        metric: cell.metric.map_or("none", MetricKind::label).to_owned(),
        mcd_mean,
        mcd_std,
        ratio: count_params(&reg).ratio,
        final_mae: rows.last().map_or(f64::NAN, |r| r.l_mae),
    };
    write_results_csv(&run_dir.join(RESULTS_FILE), std::slice::from_ref(&row))?;
    let heldout_mae = corpus_mae(heldout, |u| model.predict(&u.tokens))?;
    Ok(EvalSummary { row, heldout_mae })
}

/// Extracts the per-epoch distance trajectory of a run into `distances.csv`.
pub fn cmd_distances(run_dir: &Path) -> Result<PathBuf> {
    let rows = read_metrics_csv(&require(run_dir.join(METRICS_FILE), "adapt")?)?;
    let out = run_dir.join(DISTANCES_FILE);
    write_distances_csv(&out, &distances_from_metrics(&rows))?;
    Ok(out)
}

/// Aggregates `results.csv` from each run directory, optionally writing the
/// combined CSV.
pub fn cmd_report(run_dirs: &[PathBuf], csv_out: Option<&Path>) -> Result<Report> {
    let report = collect_report(run_dirs);
    if let Some(path) = csv_out {
        write_results_csv(path, &report.rows)?;
    }
    Ok(report)
}

/// Adapt, evaluate and extract distances for one cell.
pub fn run_cell(cfg: &RunConfig, cell: GridCell) -> Result<EvalSummary> {
    let dir = cmd_adapt(cfg, cell)?;
    let summary = cmd_eval(cfg, &dir)?;
    cmd_distances(&dir)?;
    Ok(summary)
}
