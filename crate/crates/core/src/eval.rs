//! Objective evaluation: mel cepstral distortion under dynamic time warping,
//! and the per-run results table.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Spectrogram};
use crate::error::{Error, Result};

/// Orthonormal DCT-II of one frame.
pub fn dct(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(i, x)| x * (PI * (i as f64 + 0.5) * k as f64 / nf).cos())
                .sum();
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            s * scale
        })
        .collect()
}

/// Cepstra of every frame, without the 0th (energy) coefficient.
pub fn cepstra(spec: &Spectrogram) -> Vec<Vec<f64>> {
    (0..spec.frames).map(|t| dct(spec.frame(t))[1..].to_vec()).collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Index pairs from `(0, 0)` to `(n−1, m−1)`.
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimal-cost monotone alignment with steps (1,0), (0,1) and (1,1).
/// Ties prefer the diagonal step.
pub fn dtw_align<F>(a: &[Vec<f64>], b: &[Vec<f64>], cost: F) -> Result<Alignment>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Contract("cannot align an empty sequence".into()));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + c;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let up = acc[(i - 1) * m + j];
            let left = acc[i * m + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[n * m - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McdResult {
    /// Distortion in dB.
    pub value: f64,
    pub n_aligned_frames: usize,
    pub path_length: usize,
}

const MCD_SCALE: f64 = 10.0 / LN_10;

/// Mel cepstral distortion between two spectrograms, averaged over the DTW
/// path.
pub fn mcd(reference: &Spectrogram, hypothesis: &Spectrogram) -> Result<McdResult> {
    if reference.frames == 0 || hypothesis.frames == 0 {
        return Err(Error::Contract("MCD needs at least one frame on each side".into()));
    }
    if reference.bins != hypothesis.bins {
        return Err(Error::shape(
            "mcd",
            &[reference.frames, reference.bins],
            &[hypothesis.frames, hypothesis.bins],
        ));
    }
    let (a, b) = (cepstra(reference), cepstra(hypothesis));
    let align = dtw_align(&a, &b, euclidean)?;
    let total: f64 = align
        .path
        .iter()
        .map(|&(i, j)| (2.0 * a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sqrt())
        .sum();
    Ok(McdResult {
        value: MCD_SCALE * total / align.path.len() as f64,
        n_aligned_frames: reference.frames.min(hypothesis.frames),
        path_length: align.path.len(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// MCD of `predict` against every utterance of `corpus`.
pub fn corpus_mcd<F>(corpus: &Corpus, mut predict: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<Spectrogram>,
{
    corpus
        .utterances
        .iter()
        .map(|u| Ok(mcd(&u.mel, &predict(&u.tokens)?)?.value))
        .collect()
}

pub const RESULTS_HEADER: [&str; 6] = ["method", "metric", "mcd_mean", "mcd_std", "ratio", "final_mae"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Run label, e.g. `IR+LR w/ MMD` or plain `LA`.
    pub method: String,
    /// `SWD`, `MMD`, or `none` when the regularizer was off.
    pub metric: String,
    pub mcd_mean: f64,
    pub mcd_std: f64,
    pub ratio: f64,
    pub final_mae: f64,
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(RESULTS_HEADER) {
        return Err(Error::Malformed {
            path: path.into(),
            reason: "unexpected results header".into(),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Rows gathered from run directories, plus the directories that had none.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<ResultRow>,
    pub absent: Vec<PathBuf>,
}

/// Collects `results.csv` from each run directory. Missing or unreadable
/// files are listed as absent.
pub fn collect_report(run_dirs: &[PathBuf]) -> Report {
    let mut report = Report::default();
    for dir in run_dirs {
        match read_results_csv(&dir.join("results.csv")) {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => {
                log::warn!("{}: {e}", dir.display());
                report.absent.push(dir.clone());
            }
        }
    }
    report
}

impl Report {
    /// Aligned text table with reference values for context.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:<6} {:>16} {:>9} {:>10}",
            "Method", "Metric", "MCD (dB)", "Params", "Final MAE"
        );
        let _ = writeln!(out, "{}", "-".repeat(63));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:<6} {:>8.3} ± {:<5.3} {:>8.3}% {:>10.5}",
                r.method,
                r.metric,
                r.mcd_mean,
                r.mcd_std,
                100.0 * r.ratio,
                r.final_mae
            );
        }
        for dir in &self.absent {
            let _ = writeln!(out, "(absent) {}", dir.display());
        }
        let _ = writeln!(
            out,
            "\nReference MCD at full scale on vocoded speech: FT 7.64, IR+LR w/ MMD 7.79 (not comparable)."
        );
        out
    }
}
