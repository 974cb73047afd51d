//! Integral-probability-metric distances between latent feature clouds.
//!
//! Both estimators are differentiable in their first argument and treat a
//! cloud as the empirical measure over its rows.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A non-empty `[n × dim]` set of feature frames.
#[derive(Debug, Clone)]
pub struct FeatureCloud(Tensor);

impl FeatureCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.shape().len() != 2 || points.rows() == 0 {
            return Err(Error::Contract(format!(
                "feature cloud needs at least one row, got shape {:?}",
                points.shape()
            )));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricKind {
    Swd,
    Mmd,
}

impl MetricKind {
    pub fn label(self) -> &'static str {
        match self {
            MetricKind::Swd => "SWD",
            MetricKind::Mmd => "MMD",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "swd" => Ok(MetricKind::Swd),
            "mmd" => Ok(MetricKind::Mmd),
            _ => Err(Error::Config(format!("unknown metric {s:?}; expected one of SWD, MMD"))),
        }
    }
}

impl TryFrom<String> for MetricKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricKind> for String {
    fn from(m: MetricKind) -> Self {
        m.label().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwdConfig {
    pub n_projections: usize,
    /// Order of the per-slice Wasserstein distance; 1 or 2.
    pub p: u32,
    /// Draw the same projections on every call instead of from the caller's
    /// random stream.
    pub projection_seed: Option<u64>,
}

impl Default for SwdConfig {
    fn default() -> Self {
        Self {
            n_projections: 50,
            p: 2,
            projection_seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    /// RBF bandwidth σ; the median heuristic when unset.
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceMetric {
    pub kind: MetricKind,
    pub swd: SwdConfig,
    pub mmd: MmdConfig,
}

impl Default for DistanceMetric {
    fn default() -> Self {
        Self::of(MetricKind::Swd)
    }
}

impl DistanceMetric {
    pub fn of(kind: MetricKind) -> Self {
        Self {
            kind,
            swd: SwdConfig::default(),
            mmd: MmdConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.swd.n_projections == 0 {
            return Err(Error::Config("n_projections must be at least 1".into()));
        }
        if !matches!(self.swd.p, 1 | 2) {
            return Err(Error::Config(format!("SWD order must be 1 or 2, got {}", self.swd.p)));
        }
        if let Some(s) = self.mmd.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("MMD bandwidth must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// `d(u, v)`. Clouds of different sizes are first reduced to the smaller
    /// size by sampling rows without replacement.
    pub fn distance<R: Rng>(&self, u: &Tensor, v: &Tensor, rng: &mut R) -> Result<Tensor> {
        check_pair(u, v, "distance")?;
        let n = u.rows().min(v.rows());
        let u = subsample(u, n, rng)?;
        let v = subsample(v, n, rng)?;
        match self.kind {
            MetricKind::Swd => swd(&u, &v, &self.swd, rng),
            MetricKind::Mmd => mmd(&u, &v, &self.mmd),
        }
    }
}

fn check_pair(u: &Tensor, v: &Tensor, op: &'static str) -> Result<()> {
    if u.shape().len() != 2 || v.shape().len() != 2 || u.cols() != v.cols() {
        return Err(Error::shape(op, u.shape(), v.shape()));
    }
    if u.rows() == 0 || v.rows() == 0 {
        return Err(Error::Contract(format!("{op} of an empty cloud")));
    }
    Ok(())
}

/// `n` rows of `x` drawn without replacement, kept in their original order.
/// Returns `x` itself when it already has `n` rows.
pub fn subsample<R: Rng>(x: &Tensor, n: usize, rng: &mut R) -> Result<Tensor> {
    if x.rows() == n {
        return Ok(x.clone());
    }
    if n > x.rows() {
        return Err(Error::Contract(format!("cannot draw {n} rows from {}", x.rows())));
    }
    let mut rows = index::sample(rng, x.rows(), n).into_vec();
    rows.sort_unstable();
    x.gather_rows(&rows)
}

/// `[dim × count]` matrix of Gaussian directions normalized to unit length.
pub fn random_projections<R: Rng>(dim: usize, count: usize, rng: &mut R) -> Tensor {
    let mut cols = vec![0.0; dim * count];
    for l in 0..count {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            dir.iter_mut().for_each(|x| *x /= norm);
        }
        for (i, x) in dir.into_iter().enumerate() {
            cols[i * count + l] = x;
        }
    }
    Tensor::from_vec(&[dim, count], cols).expect("consistent shape")
}

/// Sliced Wasserstein distance `(1/L) Σ_l W_p^p` between equal-size clouds.
///
/// Each slice pairs sorted projections; gradients follow the sorting
/// permutation. Ties are broken by the stable original order.
pub fn swd<R: Rng>(u: &Tensor, v: &Tensor, cfg: &SwdConfig, rng: &mut R) -> Result<Tensor> {
    check_pair(u, v, "swd")?;
    if u.rows() != v.rows() {
        return Err(Error::Contract(format!(
            "swd needs equal sample counts, got {} and {}",
            u.rows(),
            v.rows()
        )));
    }
    if cfg.n_projections == 0 {
        return Err(Error::Config("n_projections must be at least 1".into()));
    }
    let theta = match cfg.projection_seed {
        Some(seed) => random_projections(u.cols(), cfg.n_projections, &mut ChaCha8Rng::seed_from_u64(seed)),
        None => random_projections(u.cols(), cfg.n_projections, rng),
    };
    let pu = u.matmul(&theta)?.sort_columns()?;
    let pv = v.matmul(&theta)?.sort_columns()?;
    let diff = pu.sub(&pv)?;
    let cost = match cfg.p {
        1 => diff.abs(),
        2 => diff.square(),
        p => return Err(Error::Config(format!("SWD order must be 1 or 2, got {p}"))),
    };
    Ok(cost.mean())
}

/// Bandwidth chosen by [`median_heuristic_bandwidth`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub sigma: f64,
    /// Set when every pooled point coincided and σ fell back to 1.
    pub fallback: bool,
}

/// Lower median of all pairwise Euclidean distances in the pooled cloud.
pub fn median_heuristic_bandwidth(u: &Tensor, v: &Tensor) -> Result<Bandwidth> {
    if u.shape().len() != 2 || v.shape().len() != 2 || u.cols() != v.cols() {
        return Err(Error::shape("median_heuristic", u.shape(), v.shape()));
    }
    let d = u.cols();
    let pooled: Vec<f64> = u.to_vec().into_iter().chain(v.to_vec()).collect();
    let n = pooled.len() / d.max(1);
    if n < 2 {
        return Err(Error::Contract("median heuristic needs at least two points".into()));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = (0..d).map(|k| (pooled[i * d + k] - pooled[j * d + k]).powi(2)).sum();
            dists.push(s.sqrt());
        }
    }
    let mid = (dists.len() - 1) / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = *median;
    if median > 0.0 {
        Ok(Bandwidth {
            sigma: median,
            fallback: false,
        })
    } else {
        log::warn!("median pairwise distance is zero; using bandwidth 1.0");
        Ok(Bandwidth {
            sigma: 1.0,
            fallback: true,
        })
    }
}

fn rbf_mean(a: &Tensor, b: &Tensor, sigma: f64) -> Result<Tensor> {
    Ok(a.pairwise_sq_dist(b)?.scale(-1.0 / (2.0 * sigma * sigma)).exp().mean())
}

/// Maximum mean discrepancy with an RBF kernel: the square root of the
/// biased V-statistic.
pub fn mmd(u: &Tensor, v: &Tensor, cfg: &MmdConfig) -> Result<Tensor> {
    Ok(mmd_squared(u, v, cfg)?.sqrt())
}

pub fn mmd_squared(u: &Tensor, v: &Tensor, cfg: &MmdConfig) -> Result<Tensor> {
    check_pair(u, v, "mmd")?;
    let sigma = match cfg.bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::Config(format!("MMD bandwidth must be positive, got {s}"))),
        None => median_heuristic_bandwidth(&u.detach(), &v.detach())?.sigma,
    };
    let kuu = rbf_mean(u, u, sigma)?;
    let kvv = rbf_mean(v, v, sigma)?;
    let kuv = rbf_mean(u, v, sigma)?;
    kuu.add(&kvv)?.sub(&kuv.scale(2.0))
}

/// `L_ot = -d(R(h_t), h_s)`. The source cloud is a constant reference and
/// must not carry gradient.
pub fn ot_loss<R: Rng>(adapted: &Tensor, source: &Tensor, metric: &DistanceMetric, rng: &mut R) -> Result<Tensor> {
    if source.requires_grad() {
        return Err(Error::Contract("source features must be detached from the graph".into()));
    }
    Ok(metric.distance(adapted, source, rng)?.neg())
}
