//! Adaptation with the optimal-transport regularizer.
//!
//! Every step computes the supervised MAE and, at each PEL tap, the distance
//! between the adapted target features and a frozen bank of source
//! features. The total loss is `l_mae + λ(step)·l_ot` with `l_ot = -d`, so
//! minimizing it pushes the adapted target features away from the source
//! domain. Before `ot_start_step` the total is the MAE itself.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, TapPoint};
use crate::data::{Corpus, EpochSampler, Utterance};
use crate::error::{Error, Result};
use crate::format::{self, Record, Records, MAGIC_BANK};
use crate::nn::ParamRegistry;
use crate::optim::{Adam, Schedule};
use crate::ot::{subsample, DistanceMetric, FeatureCloud};
use crate::pel::AdaptedModel;
use crate::tensor::{no_grad, Tensor};

/// How the distance enters the total loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OtSign {
    /// `l_mae + λ·(−d)`: training increases the distance.
    #[default]
    Maximize,
    /// `l_mae + λ·d`: the literal subtraction of a negative loss.
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// `K`: first step at which the regularizer may be weighted.
    pub ot_start_step: usize,
    /// `W`: length of the linear ramp of λ after `K`; 0 is a hard switch.
    pub warm_ramp_steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub metric: DistanceMetric,
    pub ot_enabled: bool,
    pub ot_sign: OtSign,
    /// `γ`: scale of the regularizer once λ has ramped up, so the weighted
    /// term is `γ·λ·L_ot`.
    pub ot_weight: f64,
    pub seed: u64,
    /// Frame cap per cloud for the per-epoch distance measurement.
    pub measure_frames: usize,
    pub measure_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            ot_start_step: 300,
            warm_ramp_steps: 100,
            batch_size: 4,
            schedule: Schedule {
                peak_lr: 2e-3,
                warmup_steps: 100,
            },
            metric: DistanceMetric::default(),
            ot_enabled: true,
            ot_sign: OtSign::Maximize,
            ot_weight: 3e-4,
            seed: 0,
            measure_frames: 128,
            measure_seed: 77,
        }
    }
}

impl TrainConfig {
    /// Plain supervised adaptation: `K = T` and λ ≡ 0. The distance is still
    /// computed and logged.
    pub fn without_ot(mut self) -> Self {
        self.ot_enabled = false;
        self.ot_start_step = self.total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ot_start_step > self.total_steps {
            return Err(Error::Config(format!(
                "ot_start_step {} exceeds total_steps {}",
                self.ot_start_step, self.total_steps
            )));
        }
        if !(self.ot_weight.is_finite() && self.ot_weight > 0.0) {
            return Err(Error::Config(format!("ot_weight must be positive, got {}", self.ot_weight)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.measure_frames == 0 {
            return Err(Error::Config("measure_frames must be positive".into()));
        }
        self.metric.validate()
    }
}

/// λ for a zero-based step.
pub fn ot_coefficient(step: usize, cfg: &TrainConfig) -> f64 {
    if !cfg.ot_enabled || step < cfg.ot_start_step {
        return 0.0;
    }
    if cfg.warm_ramp_steps == 0 {
        return 1.0;
    }
    ((step - cfg.ot_start_step) as f64 / cfg.warm_ramp_steps as f64).clamp(0.0, 1.0)
}

/// Mean of `|pred − target|` over all cells.
pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mae", pred.shape(), target.shape()));
    }
    Ok(pred.sub(target)?.abs().mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_mae: f64,
    /// Absent when the model has no tap or no bank is available.
    pub l_ot: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            max_frames: 512,
            seed: 13,
        }
    }
}

/// Frozen source-domain features, one cloud per tap point.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub clouds: BTreeMap<TapPoint, FeatureCloud>,
}

impl FeatureBank {
    pub fn get(&self, tap: TapPoint) -> Result<&FeatureCloud> {
        self.clouds
            .get(&tap)
            .ok_or_else(|| Error::Config(format!("feature bank has no features for tap {tap}")))
    }
}

/// Collects up to `max_frames` tapped frames per tap from the frozen
/// backbone, visiting source utterances in a seeded order.
pub fn build_feature_bank(
    backbone: &Backbone,
    source: &Corpus,
    taps: &[TapPoint],
    cfg: &BankConfig,
) -> Result<FeatureBank> {
    if cfg.max_frames == 0 {
        return Err(Error::Config("feature bank needs max_frames > 0".into()));
    }
    if source.is_empty() {
        return Err(Error::Contract("feature bank needs a non-empty source corpus".into()));
    }
    if taps.is_empty() {
        return Err(Error::Config("feature bank needs at least one tap".into()));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut parts: BTreeMap<TapPoint, Vec<Tensor>> = BTreeMap::new();
    let mut frames = 0;
    no_grad(|| -> Result<()> {
        for i in order {
            if frames >= cfg.max_frames {
                break;
            }
            let out = backbone.forward(&source.utterances[i].tokens, &backbone.speaker, taps)?;
            let keep = out.mel.rows().min(cfg.max_frames - frames);
            let rows: Vec<usize> = (0..keep).collect();
            for tap in &out.taps {
                parts.entry(tap.point).or_default().push(tap.pre.gather_rows(&rows)?);
            }
            frames += keep;
        }
        Ok(())
    })?;
    let clouds = parts
        .into_iter()
        .map(|(tap, ps)| Ok((tap, FeatureCloud::new(Tensor::concat_rows(&ps)?.detach())?)))
        .collect::<Result<_>>()?;
    Ok(FeatureBank { clouds })
}

fn bank_hash(backbone: &BackboneConfig, cfg: &BankConfig) -> u64 {
    format::hash_str(&format!(
        "{}|bank;frames={};seed={}",
        backbone.canonical(),
        cfg.max_frames,
        cfg.seed
    ))
}

pub fn save_bank(bank: &FeatureBank, backbone: &BackboneConfig, cfg: &BankConfig, path: &Path) -> Result<()> {
    let records: Records = bank
        .clouds
        .iter()
        .map(|(tap, c)| {
            (
                tap.to_string(),
                Record {
                    shape: c.points().shape().to_vec(),
                    data: c.points().to_vec(),
                },
            )
        })
        .collect();
    format::write_tensor_file(path, MAGIC_BANK, bank_hash(backbone, cfg), &records)
}

pub fn load_bank(path: &Path, backbone: &BackboneConfig, cfg: &BankConfig) -> Result<FeatureBank> {
    let (hash, records) = format::read_tensor_file(path, MAGIC_BANK)?;
    format::expect_hash(path, hash, bank_hash(backbone, cfg))?;
    let malformed = |reason: String| Error::Malformed {
        path: path.into(),
        reason,
    };
    let mut clouds = BTreeMap::new();
    for (name, rec) in records {
        let tap: TapPoint = name.parse().map_err(|_| malformed(format!("unknown tap {name:?}")))?;
        if rec.shape.len() != 2 || rec.shape[1] != backbone.latent_dim {
            return Err(malformed(format!("tap {name} has shape {:?}", rec.shape)));
        }
        let cloud = FeatureCloud::new(Tensor::from_vec(&rec.shape, rec.data)?)
            .map_err(|e| malformed(e.to_string()))?;
        clouds.insert(tap, cloud);
    }
    if clouds.is_empty() {
        return Err(malformed("bank holds no features".into()));
    }
    Ok(FeatureBank { clouds })
}

/// One adaptation run in progress: optimizer state plus the random stream
/// used by the distance estimator, kept apart from batch sampling so that
/// turning the regularizer on or off never changes which batches are drawn.
pub struct Trainer<'a> {
    model: &'a AdaptedModel,
    bank: Option<&'a FeatureBank>,
    cfg: &'a TrainConfig,
    taps: Vec<TapPoint>,
    opt: Adam,
    ot_rng: ChaCha8Rng,
    last_finite: Option<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a AdaptedModel,
        reg: &ParamRegistry,
        bank: Option<&'a FeatureBank>,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let taps = if bank.is_some() { model.pel_taps() } else { Vec::new() };
        if let Some(bank) = bank {
            for &tap in &taps {
                bank.get(tap)?;
            }
        }
        let weighted = cfg.ot_enabled && cfg.ot_start_step < cfg.total_steps;
        if weighted && taps.is_empty() {
            return Err(Error::Config(format!(
                "the regularizer needs a feature bank and PEL taps; method {} with {} bank has none",
                model.config.method,
                if bank.is_some() { "a" } else { "no" }
            )));
        }
        Ok(Self {
            model,
            bank,
            cfg,
            taps,
            opt: Adam::new(reg),
            ot_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x07_7a5e),
            last_finite: None,
        })
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    /// Mean distance over taps between the adapted batch features and the
    /// bank.
    fn distance(&mut self, adapted: &BTreeMap<TapPoint, Vec<Tensor>>) -> Result<Tensor> {
        let bank = self.bank.expect("taps imply a bank");
        let mut total: Option<Tensor> = None;
        for &tap in &self.taps {
            let cloud = Tensor::concat_rows(&adapted[&tap])?;
            let d = self
                .cfg
                .metric
                .distance(&cloud, bank.get(tap)?.points(), &mut self.ot_rng)?;
            total = Some(match total {
                Some(t) => t.add(&d)?,
                None => d,
            });
        }
        Ok(total.expect("at least one tap").scale(1.0 / self.taps.len() as f64))
    }

    pub fn train_step(&mut self, batch: &[&Utterance], step: usize) -> Result<LossBreakdown> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut adapted: BTreeMap<TapPoint, Vec<Tensor>> = BTreeMap::new();
        for u in batch {
            let out = self.model.forward(&u.tokens, &self.taps)?;
            preds.push(out.mel);
            targets.push(u.mel.to_tensor());
            for tap in out.taps {
                adapted.entry(tap.point).or_default().push(tap.post);
            }
        }
        let l_mae = mae_loss(&Tensor::concat_rows(&preds)?, &Tensor::concat_rows(&targets)?)?;
        let lambda = ot_coefficient(step, self.cfg);

        let (total, l_ot) = if self.taps.is_empty() {
            (l_mae.clone(), None)
        } else if lambda == 0.0 {
            let d = no_grad(|| self.distance(&adapted))?;
            (l_mae.clone(), Some(-d.item()))
        } else {
            let d = self.distance(&adapted)?;
            let weighted = match self.cfg.ot_sign {
                OtSign::Maximize => d.neg().scale(self.cfg.ot_weight * lambda),
                OtSign::Minimize => d.scale(self.cfg.ot_weight * lambda),
            };
            (l_mae.add(&weighted)?, Some(-d.item()))
        };

        let value = total.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                last_finite: self.last_finite,
            });
        }
        total.backward()?;
        self.opt.step(self.cfg.schedule.lr(step));
        self.last_finite = Some(step);
        Ok(LossBreakdown {
            step,
            l_mae: l_mae.item(),
            l_ot,
            lambda,
            total: value,
        })
    }
}

/// Mean over the model's taps of the distance to the bank, before and after
/// each PEL layer, on up to `cfg.measure_frames` frames of `corpus`.
pub fn measure_distances(
    model: &AdaptedModel,
    corpus: &Corpus,
    bank: &FeatureBank,
    cfg: &TrainConfig,
) -> Result<Option<(f64, f64)>> {
    let taps = model.pel_taps();
    if taps.is_empty() || corpus.is_empty() {
        return Ok(None);
    }
    no_grad(|| {
        let mut pre: BTreeMap<TapPoint, Vec<Tensor>> = BTreeMap::new();
        let mut post: BTreeMap<TapPoint, Vec<Tensor>> = BTreeMap::new();
        for u in &corpus.utterances {
            for tap in model.forward(&u.tokens, &taps)?.taps {
                pre.entry(tap.point).or_default().push(tap.pre);
                post.entry(tap.point).or_default().push(tap.post);
            }
        }
        let (mut before, mut after) = (0.0, 0.0);
        for (i, &tap) in taps.iter().enumerate() {
            let rng = ChaCha8Rng::seed_from_u64(cfg.measure_seed.wrapping_add(i as u64));
            let source = bank.get(tap)?.points();
            let cap = |x: Tensor| {
                let n = x.rows().min(cfg.measure_frames);
                subsample(&x, n, &mut rng.clone())
            };
            let a = cap(Tensor::concat_rows(&pre[&tap])?)?;
            let b = cap(Tensor::concat_rows(&post[&tap])?)?;
            before += cfg.metric.distance(&a, source, &mut rng.clone())?.item();
            after += cfg.metric.distance(&b, source, &mut rng.clone())?.item();
        }
        let n = taps.len() as f64;
        Ok(Some((before / n, after / n)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochDistance {
    pub epoch: usize,
    /// Step about to run when the measurement was taken.
    pub step: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub log: Vec<LossBreakdown>,
    pub distances: Vec<EpochDistance>,
}

/// Runs `cfg.total_steps` steps on `corpus`. Distances to the bank are
/// measured at the start of every epoch.
pub fn adapt(
    model: &AdaptedModel,
    reg: &ParamRegistry,
    corpus: &Corpus,
    bank: Option<&FeatureBank>,
    cfg: &TrainConfig,
) -> Result<AdaptOutcome> {
    if corpus.is_empty() {
        return Err(Error::Contract("adaptation corpus is empty".into()));
    }
    let mut trainer = Trainer::new(model, reg, bank, cfg)?;
    let mut sampler = EpochSampler::new(corpus.len(), cfg.batch_size, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut distances = Vec::new();
    let mut measured_epoch = None;
    for step in 0..cfg.total_steps {
        if let Some(bank) = bank {
            let epoch = sampler.epoch();
            if measured_epoch != Some(epoch) {
                measured_epoch = Some(epoch);
                if let Some((before, after)) = measure_distances(model, corpus, bank, cfg)? {
                    distances.push(EpochDistance {
                        epoch,
                        step,
                        before,
                        after,
                    });
                }
            }
        }
        let batch: Vec<&Utterance> = sampler.next_batch().into_iter().map(|i| &corpus.utterances[i]).collect();
        let b = trainer.train_step(&batch, step)?;
        if step % 200 == 0 {
            log::debug!("step {step}: mae {:.5} total {:.5} λ {}", b.l_mae, b.total, b.lambda);
        }
        log.push(b);
    }
    Ok(AdaptOutcome { log, distances })
}

pub const METRICS_HEADER: [&str; 7] = ["step", "l_mae", "l_ot", "lambda", "total", "dist_before", "dist_after"];
pub const DISTANCES_HEADER: [&str; 4] = ["epoch", "step", "dist_before", "dist_after"];

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One row per step; distance columns are filled on the steps where an
/// epoch measurement was taken.
pub fn write_metrics_csv(path: &Path, outcome: &AdaptOutcome) -> Result<()> {
    let by_step: BTreeMap<usize, &EpochDistance> = outcome.distances.iter().map(|d| (d.step, d)).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(METRICS_HEADER)?;
    for b in &outcome.log {
        let d = by_step.get(&b.step);
        w.write_record([
            b.step.to_string(),
            num(b.l_mae),
            opt_num(b.l_ot),
            num(b.lambda),
            num(b.total),
            opt_num(d.map(|d| d.before)),
            opt_num(d.map(|d| d.after)),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// A parsed metrics log row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_mae: f64,
    pub l_ot: Option<f64>,
    pub lambda: f64,
    pub total: f64,
    pub dist_before: Option<f64>,
    pub dist_after: Option<f64>,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let malformed = |reason: String| Error::Malformed {
        path: path.into(),
        reason,
    };
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(malformed("unexpected metrics header".into()));
    }
    let field = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| malformed(format!("bad number {s:?}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let need = |i: usize| field(&rec[i])?.ok_or_else(|| malformed(format!("missing column {}", METRICS_HEADER[i])));
        rows.push(MetricsRow {
            step: rec[0].parse().map_err(|_| malformed(format!("bad step {:?}", &rec[0])))?,
            l_mae: need(1)?,
            l_ot: field(&rec[2])?,
            lambda: need(3)?,
            total: need(4)?,
            dist_before: field(&rec[5])?,
            dist_after: field(&rec[6])?,
        });
    }
    Ok(rows)
}

/// Extracts the per-epoch measurements of a metrics log.
pub fn distances_from_metrics(rows: &[MetricsRow]) -> Vec<EpochDistance> {
    rows.iter()
        .filter_map(|r| Some((r.step, r.dist_before?, r.dist_after?)))
        .enumerate()
        .map(|(epoch, (step, before, after))| EpochDistance {
            epoch,
            step,
            before,
            after,
        })
        .collect()
}

pub fn write_distances_csv(path: &Path, distances: &[EpochDistance]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(DISTANCES_HEADER)?;
    for d in distances {
        w.write_record([d.epoch.to_string(), d.step.to_string(), num(d.before), num(d.after)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
