//! Deterministic synthetic corpora with a controllable "accent" shift.
//!
//! Each token owns a fixed spectral template spanning `expansion_factor`
//! frames. An utterance is a random token string whose spectrogram is the
//! concatenation of its templates plus Gaussian noise. The target accent
//! pushes every template through an invertible formant-like mixing of
//! neighbouring mel bins plus a spectral tilt. The template bank is shared
//! across accents, so source and target corpora differ only by that shift.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_file, ByteReader, ByteWriter, MAGIC_CORPUS};
use crate::tensor::Tensor;

pub const CORPUS_VERSION: u32 = 1;

/// A `[frames × bins]` matrix of mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if frames * bins != values.len() {
            return Err(Error::shape("spectrogram", &[frames, bins], &[values.len()]));
        }
        Ok(Self { frames, bins, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [frames, bins] => Self::new(frames, bins, t.to_vec()),
            ref other => Err(Error::shape("spectrogram", other, &[0, 0])),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.frames, self.bins], self.values.clone()).expect("consistent shape")
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.bins..(i + 1) * self.bins]
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub mel: Spectrogram,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub expansion_factor: usize,
    pub n_mel: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.mel.frames).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accent {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftParams {
    /// Weight moved from each bin onto the bin above it, in `[0, 1)`.
    pub formant_mix: f64,
    /// Offset added linearly from 0 at the lowest bin to `tilt` at the highest.
    pub tilt: f64,
    /// Probability that a token's frames are rotated by one position.
    pub duration_jitter: f64,
    pub jitter_seed: u64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            formant_mix: 0.6,
            tilt: 0.4,
            duration_jitter: 0.0,
            jitter_seed: 17,
        }
    }
}

impl ShiftParams {
    pub fn none() -> Self {
        Self {
            formant_mix: 0.0,
            tilt: 0.0,
            duration_jitter: 0.0,
            jitter_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub expansion_factor: usize,
    pub n_mel: usize,
    pub accent: Accent,
    pub shift: ShiftParams,
    pub noise_sigma: f64,
    /// Seed of the utterance stream (token strings and noise).
    pub seed: u64,
    /// Seed of the shared per-token template bank.
    pub template_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::source_default()
    }
}

impl CorpusSpec {
    pub fn source_default() -> Self {
        Self {
            vocab_size: 16,
            n_utterances: 500,
            min_tokens: 3,
            max_tokens: 8,
            expansion_factor: 4,
            n_mel: 20,
            accent: Accent::Source,
            shift: ShiftParams::default(),
            noise_sigma: 0.02,
            seed: 11,
            template_seed: 5,
        }
    }

    pub fn target_default() -> Self {
        Self {
            n_utterances: 40,
            accent: Accent::Target,
            seed: 23,
            ..Self::source_default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("bad token range {}..={}", self.min_tokens, self.max_tokens));
        }
        if self.expansion_factor == 0 || self.n_mel < 2 {
            return bad("expansion_factor must be >= 1 and n_mel >= 2".into());
        }
        if !(0.0..1.0).contains(&self.shift.formant_mix) {
            return bad(format!("formant_mix must lie in [0, 1), got {}", self.shift.formant_mix));
        }
        if !(0.0..=1.0).contains(&self.shift.duration_jitter) || !(self.noise_sigma >= 0.0) {
            return bad("duration_jitter must lie in [0, 1] and noise_sigma be >= 0".into());
        }
        Ok(())
    }
}

/// Source-accent templates: `[vocab][expansion_factor × n_mel]`.
fn base_templates(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.template_seed);
    let n = spec.n_mel;
    let hi = (n - 1) as f64;
    (0..spec.vocab_size)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(1.0..hi - 1.0), // centre
                        rng.random_range(-0.75..0.75),   // drift per frame
                        rng.random_range(1.0..2.5),      // width
                        rng.random_range(0.4..1.0),      // amplitude
                    )
                })
                .collect();
            let mut t = Vec::with_capacity(spec.expansion_factor * n);
            for k in 0..spec.expansion_factor {
                for b in 0..n {
                    let mut v = 0.1;
                    for &(c, drift, w, a) in &bumps {
                        let d = b as f64 - (c + drift * k as f64);
                        v += a * (-d * d / (2.0 * w * w)).exp();
                    }
                    t.push(v);
                }
            }
            t
        })
        .collect()
}

fn apply_shift(frame: &[f64], shift: &ShiftParams) -> Vec<f64> {
    let n = frame.len();
    let a = shift.formant_mix;
    (0..n)
        .map(|b| {
            let mixed = if b == 0 {
                frame[0]
            } else {
                (1.0 - a) * frame[b] + a * frame[b - 1]
            };
            mixed + shift.tilt * b as f64 / (n - 1) as f64
        })
        .collect()
}

/// The per-token template bank for the spec's accent.
pub fn templates(spec: &CorpusSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut bank = base_templates(spec);
    if spec.accent == Accent::Target {
        let n = spec.n_mel;
        let e = spec.expansion_factor;
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.shift.jitter_seed);
        for t in bank.iter_mut() {
            let shifted: Vec<f64> = t.chunks(n).flat_map(|f| apply_shift(f, &spec.shift)).collect();
            let roll = spec.shift.duration_jitter > 0.0 && jitter_rng.random_bool(spec.shift.duration_jitter);
            *t = if roll {
                (0..e)
                    .flat_map(|k| shifted[((k + e - 1) % e) * n..((k + e - 1) % e + 1) * n].to_vec())
                    .collect()
            } else {
                shifted
            };
        }
    }
    Ok(bank)
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    let bank = templates(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let per_token = spec.expansion_factor * spec.n_mel;
    let utterances = (0..spec.n_utterances)
        .map(|_| {
            let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
            let mut values = Vec::with_capacity(len * per_token);
            for &tok in &tokens {
                values.extend(bank[tok].iter().map(|v| v + noise.sample(&mut rng)));
            }
            Utterance {
                mel: Spectrogram::new(len * spec.expansion_factor, spec.n_mel, values)
                    .expect("consistent by construction"),
                tokens,
            }
        })
        .collect();
    Ok(Corpus {
        expansion_factor: spec.expansion_factor,
        n_mel: spec.n_mel,
        utterances,
    })
}

/// Yields index batches over `0..n`, reshuffling at the start of every
/// epoch. The last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Config("sampler needs a non-empty corpus and batch size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            cursor: 0,
            epoch: 0,
            rng,
        })
    }

    /// Number of completed passes.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor >= self.order.len() {
            self.epoch += 1;
        }
        batch
    }
}

/// Seeded disjoint partition into `(train, heldout)`.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n = corpus.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "fraction {train_fraction} of {n} utterances leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n_train);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        Corpus {
            expansion_factor: corpus.expansion_factor,
            n_mel: corpus.n_mel,
            utterances: ids.iter().map(|&i| corpus.utterances[i].clone()).collect(),
        }
    };
    Ok((pick(a), pick(b)))
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new(MAGIC_CORPUS);
    w.u32(CORPUS_VERSION);
    w.u32(corpus.expansion_factor as u32);
    w.u32(corpus.n_mel as u32);
    w.u32(corpus.utterances.len() as u32);
    for u in &corpus.utterances {
        w.u32(u.tokens.len() as u32);
        for &t in &u.tokens {
            w.u32(t as u32);
        }
        w.f64s(&u.mel.values);
    }
    w.finish(path)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let buf = read_file(path)?;
    let mut r = ByteReader::open(path, &buf, MAGIC_CORPUS)?;
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let expansion_factor = r.u32()? as usize;
    let n_mel = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let tokens = (0..len).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
        let frames = len * expansion_factor;
        let values = r.f64s(frames * n_mel)?;
        utterances.push(Utterance {
            tokens,
            mel: Spectrogram::new(frames, n_mel, values)?,
        });
    }
    r.finish()?;
    Ok(Corpus {
        expansion_factor,
        n_mel,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(accent: Accent) -> CorpusSpec {
        CorpusSpec {
            n_utterances: 10,
            accent,
            ..CorpusSpec::source_default()
        }
    }

    fn bits(c: &Corpus) -> Vec<u64> {
        c.utterances
            .iter()
            .flat_map(|u| u.tokens.iter().map(|&t| t as u64).chain(u.mel.values.iter().map(|v| v.to_bits())))
            .collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(Accent::Target)).unwrap();
        let b = generate(&small(Accent::Target)).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_shift_target_equals_source() {
        let mut s = small(Accent::Source);
        s.shift = ShiftParams::none();
        let mut t = small(Accent::Target);
        t.shift = ShiftParams::none();
        assert_eq!(bits(&generate(&s).unwrap()), bits(&generate(&t).unwrap()));
    }

    #[test]
    fn frame_count_contract() {
        let c = generate(&small(Accent::Source)).unwrap();
        for u in &c.utterances {
            assert_eq!(u.mel.frames, u.tokens.len() * c.expansion_factor);
        }
    }

    #[test]
    fn default_shift_gap_exceeds_five_sigma() {
        let src = CorpusSpec::source_default();
        let tgt = CorpusSpec::target_default();
        let a = templates(&src).unwrap();
        let b = templates(&tgt).unwrap();
        let n = src.n_mel;
        let mut per_bin = vec![0.0; n];
        let mut count = 0usize;
        for (ta, tb) in a.iter().zip(&b) {
            for (fa, fb) in ta.chunks(n).zip(tb.chunks(n)) {
                for bin in 0..n {
                    per_bin[bin] += fb[bin] - fa[bin];
                }
                count += 1;
            }
        }
        let gap = per_bin.iter().map(|s| (s / count as f64).abs()).sum::<f64>() / n as f64;
        assert!(gap > 5.0 * src.noise_sigma, "gap {gap}");
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 4, 1).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn tiny_vocab_rejected() {
        let spec = CorpusSpec { vocab_size: 1, ..small(Accent::Source) };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_examples() {
        let c = generate(&small(Accent::Source)).unwrap();
        let (a, b) = split(&c, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, _) = split(&c, 0.5, 3).unwrap();
        assert_eq!(bits(&a), bits(&a2));
        // Partition law: every utterance lands in exactly one side.
        let mut all: Vec<Vec<u64>> = a
            .utterances
            .iter()
            .chain(&b.utterances)
            .map(|u| u.mel.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> =
            c.utterances.iter().map(|u| u.mel.values.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split(&c, 0.01, 3).is_err());
        assert!(split(&c, 1.0, 3).is_err());
    }

    #[test]
    fn corpus_file_round_trip_and_damage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = generate(&small(Accent::Target)).unwrap();
        save_corpus(&c, &p).unwrap();
        let back = load_corpus(&p).unwrap();
        assert_eq!(bits(&c), bits(&back));

        let good = std::fs::read(&p).unwrap();
        let mut wrong = good.clone();
        wrong[0] = b'X';
        std::fs::write(&p, &wrong).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::BadMagic { .. })));

        let mut v2 = good.clone();
        v2[6] = 2;
        std::fs::write(&p, &v2).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::UnsupportedVersion { found: 2, .. })));

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Truncated { .. })));
    }
}
