//! Miniature sequence-to-spectrogram backbone.
//!
//! tokens → embedding → encoder blocks → length regulation (each token
//! repeated `expansion_factor` times) → + position and speaker embeddings
//! → decoder input `z` → N decoder blocks → linear mel head.
//!
//! A block is `LayerNorm(x + FFN(gelu(conv1d(x))))`. The decoder input and
//! every decoder block output pass through a [`LatentHook`], which is where
//! parameter-efficient layers are spliced in. With [`IdentityHook`] the
//! forward pass is the plain backbone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, EpochSampler, Utterance};
use crate::error::{Error, Result};
use crate::format::{self, Record, Records, MAGIC_BACKBONE};
use crate::nn::{Conv1d, Embedding, LayerNorm, Linear, ParamRegistry};
use crate::optim::{Adam, Schedule};
use crate::tensor::{no_grad, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const DECODER_PREFIX: &str = "backbone.decoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    /// Frames per token produced by the length regulator.
    pub expansion_factor: usize,
    pub n_mel: usize,
    pub conv_width: usize,
    /// Inner width of each block's feed-forward sub-layer.
    pub ffn_dim: usize,
    /// Seed of the fixed speaker embedding.
    pub speaker_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            latent_dim: 32,
            n_encoder_blocks: 2,
            n_decoder_blocks: 4,
            expansion_factor: 4,
            n_mel: 20,
            conv_width: 3,
            ffn_dim: 192,
            speaker_seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.latent_dim,
            self.n_decoder_blocks,
            self.expansion_factor,
            self.n_mel,
            self.ffn_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("backbone dimensions must be positive: {self:?}")));
        }
        if self.conv_width % 2 == 0 {
            return Err(Error::Config(format!("conv_width must be odd, got {}", self.conv_width)));
        }
        Ok(())
    }

    /// Canonical text form; its hash guards checkpoint compatibility.
    pub fn canonical(&self) -> String {
        format!(
            "vocab={};latent={};enc={};dec={};expand={};mel={};conv={};ffn={};speaker={}",
            self.vocab_size,
            self.latent_dim,
            self.n_encoder_blocks,
            self.n_decoder_blocks,
            self.expansion_factor,
            self.n_mel,
            self.conv_width,
            self.ffn_dim,
            self.speaker_seed
        )
    }

    pub fn hash(&self) -> u64 {
        format::hash_str(&self.canonical())
    }
}

/// Fixed speaker vector added to every decoder-input frame.
#[derive(Debug, Clone)]
pub struct SpeakerEmbedding {
    pub vector: Tensor,
}

impl SpeakerEmbedding {
    pub fn from_seed(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        let data = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            vector: Tensor::from_vec(&[dim], data).expect("consistent shape"),
        }
    }
}

/// Where a latent sequence is observed inside the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapPoint {
    /// `z`, the decoder input after position and speaker embeddings.
    DecoderInput,
    /// Output `hⁱ` of decoder block `i` (zero-based).
    Block(usize),
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapPoint::DecoderInput => write!(f, "input"),
            TapPoint::Block(i) => write!(f, "block{i}"),
        }
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "input" {
            return Ok(TapPoint::DecoderInput);
        }
        s.strip_prefix("block")
            .and_then(|i| i.parse().ok())
            .map(TapPoint::Block)
            .ok_or_else(|| Error::Config(format!("bad tap point {s:?} (use `input` or `block<i>`)")))
    }
}

/// Transforms applied to decoder latents between frozen stages.
pub trait LatentHook {
    fn on_decoder_input(&self, z: &Tensor) -> Result<Tensor>;
    fn on_block_output(&self, block: usize, h: &Tensor) -> Result<Tensor>;
}

pub struct IdentityHook;

impl LatentHook for IdentityHook {
    fn on_decoder_input(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }

    fn on_block_output(&self, _block: usize, h: &Tensor) -> Result<Tensor> {
        Ok(h.clone())
    }
}

/// A tapped latent before (`pre`) and after (`post`) its hook.
#[derive(Debug, Clone)]
pub struct Tap {
    pub point: TapPoint,
    pub pre: Tensor,
    pub post: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[frames × n_mel]`.
    pub mel: Tensor,
    pub taps: Vec<Tap>,
}

impl ForwardOutput {
    pub fn tap(&self, point: TapPoint) -> Option<&Tap> {
        self.taps.iter().find(|t| t.point == point)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub conv: Conv1d,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
    pub norm: LayerNorm,
}

impl Block {
    fn new<R: Rng>(reg: &mut ParamRegistry, name: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.latent_dim;
        Ok(Self {
            conv: Conv1d::new(reg, &format!("{name}.conv"), cfg.conv_width, d, d, rng)?,
            ffn_up: Linear::new(reg, &format!("{name}.ffn.up"), d, cfg.ffn_dim, rng)?,
            ffn_down: Linear::new(reg, &format!("{name}.ffn.down"), cfg.ffn_dim, d, rng)?,
            norm: LayerNorm::new(reg, &format!("{name}.norm"), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.conv.forward(x)?.gelu();
        let f = self.ffn_down.forward(&self.ffn_up.forward(&a)?.gelu())?;
        self.norm.forward(&x.add(&f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: Embedding,
    pub encoder: Vec<Block>,
    /// Position-within-token embedding, `[expansion_factor × latent_dim]`.
    pub position: Embedding,
    pub decoder: Vec<Block>,
    pub head: Linear,
    pub speaker: SpeakerEmbedding,
}

impl Backbone {
    /// Builds a freshly initialized backbone, registering every parameter
    /// under `backbone.`.
    pub fn new<R: Rng>(config: &BackboneConfig, reg: &mut ParamRegistry, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let embed = Embedding::new(reg, "backbone.embed", config.vocab_size, d, rng)?;
        let encoder = (0..config.n_encoder_blocks)
            .map(|i| Block::new(reg, &format!("backbone.encoder.block{i}"), config, rng))
            .collect::<Result<_>>()?;
        let position = Embedding::new(reg, "backbone.decoder.pos", config.expansion_factor, d, rng)?;
        let decoder = (0..config.n_decoder_blocks)
            .map(|i| Block::new(reg, &format!("backbone.decoder.block{i}"), config, rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(reg, "backbone.decoder.head", d, config.n_mel, rng)?;
        Ok(Self {
            config: config.clone(),
            embed,
            encoder,
            position,
            decoder,
            head,
            speaker: SpeakerEmbedding::from_seed(d, config.speaker_seed),
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// The decoder input `z` for a token string: `[tokens·expansion × latent]`.
    pub fn decoder_input(&self, tokens: &[usize], speaker: &SpeakerEmbedding) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut x = self.embed.forward(tokens)?;
        for block in &self.encoder {
            x = block.forward(&x)?;
        }
        let e = self.config.expansion_factor;
        let expand: Vec<usize> = (0..tokens.len()).flat_map(|t| std::iter::repeat_n(t, e)).collect();
        let within: Vec<usize> = (0..tokens.len()).flat_map(|_| 0..e).collect();
        x.gather_rows(&expand)?
            .add(&self.position.forward(&within)?)?
            .add_row(&speaker.vector)
    }

    /// Full forward pass through `hook`, recording the requested taps.
    pub fn forward_with(
        &self,
        tokens: &[usize],
        speaker: &SpeakerEmbedding,
        hook: &dyn LatentHook,
        taps: &[TapPoint],
    ) -> Result<ForwardOutput> {
        let mut recorded = Vec::new();
        let mut record = |point: TapPoint, pre: &Tensor, post: &Tensor| {
            if taps.contains(&point) {
                recorded.push(Tap {
                    point,
                    pre: pre.clone(),
                    post: post.clone(),
                });
            }
        };
        let z = self.decoder_input(tokens, speaker)?;
        let mut x = hook.on_decoder_input(&z)?;
        record(TapPoint::DecoderInput, &z, &x);
        for (i, block) in self.decoder.iter().enumerate() {
            let h = block.forward(&x)?;
            x = hook.on_block_output(i, &h)?;
            record(TapPoint::Block(i), &h, &x);
        }
        let mel = self.head.forward(&x)?;
        Ok(ForwardOutput { mel, taps: recorded })
    }

    pub fn forward(&self, tokens: &[usize], speaker: &SpeakerEmbedding, taps: &[TapPoint]) -> Result<ForwardOutput> {
        self.forward_with(tokens, speaker, &IdentityHook, taps)
    }

    /// Spectrogram for `tokens` with the backbone's own speaker and no hooks.
    pub fn predict(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward(tokens, &self.speaker, &[])?.mel)
    }

    /// Every tap point the decoder exposes.
    pub fn all_taps(&self) -> Vec<TapPoint> {
        std::iter::once(TapPoint::DecoderInput)
            .chain((0..self.config.n_decoder_blocks).map(TapPoint::Block))
            .collect()
    }
}

/// Writes all `backbone.` entries of `reg`.
pub fn save_checkpoint(config: &BackboneConfig, reg: &ParamRegistry, path: &Path) -> Result<()> {
    let records: Records = reg
        .iter()
        .filter(|(name, _)| name.starts_with(BACKBONE_PREFIX))
        .map(|(name, p)| {
            (
                name.to_owned(),
                Record {
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_vec(),
                },
            )
        })
        .collect();
    format::write_tensor_file(path, MAGIC_BACKBONE, config.hash(), &records)
}

/// Copies stored records into an already-built registry. Names and shapes
/// must match `expected` one-to-one; nothing is written unless all do.
pub(crate) fn install_records(path: &Path, reg: &ParamRegistry, expected: &[&str], records: &Records) -> Result<()> {
    let malformed = |reason: String| Error::Malformed {
        path: path.into(),
        reason,
    };
    if expected.len() != records.len() || expected.iter().any(|n| !records.contains_key(*n)) {
        return Err(malformed(format!(
            "record names do not match the model ({} stored, {} expected)",
            records.len(),
            expected.len()
        )));
    }
    for name in expected {
        let t = reg
            .get(name)
            .ok_or_else(|| Error::Contract(format!("registry has no parameter {name:?}")))?;
        if t.shape() != records[*name].shape.as_slice() {
            return Err(malformed(format!("record {name:?} has shape {:?}", records[*name].shape)));
        }
    }
    for name in expected {
        let t = reg.get(name).expect("checked above");
        t.update_data(|d| d.copy_from_slice(&records[*name].data));
    }
    Ok(())
}

/// Loads a checkpoint written for `config`. The returned registry holds the
/// backbone fully frozen.
pub fn load_checkpoint(config: &BackboneConfig, path: &Path) -> Result<(Backbone, ParamRegistry)> {
    let (hash, records) = format::read_tensor_file(path, MAGIC_BACKBONE)?;
    format::expect_hash(path, hash, config.hash())?;
    let mut reg = ParamRegistry::new();
    let backbone = Backbone::new(config, &mut reg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<&str> = reg.names().filter(|n| n.starts_with(BACKBONE_PREFIX)).collect();
    install_records(path, &reg, &names, &records)?;
    reg.freeze(BACKBONE_PREFIX)?;
    Ok((backbone, reg))
}

/// Mean absolute error over every frame-bin cell of a batch.
pub fn batch_mae<F>(batch: &[&Utterance], mut predict: F) -> Result<Tensor>
where
    F: FnMut(&Utterance) -> Result<Tensor>,
{
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for u in batch {
        preds.push(predict(u)?);
        targets.push(u.mel.to_tensor());
    }
    let pred = Tensor::concat_rows(&preds)?;
    let target = Tensor::concat_rows(&targets)?;
    if pred.shape() != target.shape() {
        return Err(Error::shape("mae", pred.shape(), target.shape()));
    }
    Ok(pred.sub(&target)?.abs().mean())
}

/// Held-out MAE over a whole corpus, evaluated without recording a graph.
pub fn corpus_mae<F>(corpus: &Corpus, predict: F) -> Result<f64>
where
    F: FnMut(&Utterance) -> Result<Tensor>,
{
    if corpus.is_empty() {
        return Err(Error::Contract("MAE over an empty corpus".into()));
    }
    let batch: Vec<&Utterance> = corpus.utterances.iter().collect();
    no_grad(|| batch_mae(&batch, predict).map(|t| t.item()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Held-out MAE the pretrained backbone must reach, if set.
    pub mae_threshold: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            schedule: Schedule {
                peak_lr: 3e-3,
                warmup_steps: 150,
            },
            seed: 1,
            mae_threshold: Some(0.1),
        }
    }
}

pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub registry: ParamRegistry,
    /// Training MAE per step.
    pub losses: Vec<f64>,
    pub heldout_mae: Option<f64>,
}

/// Trains every backbone parameter on `train` with Adam. The returned
/// registry is still trainable; freezing happens on load.
pub fn pretrain(
    config: &BackboneConfig,
    train: &Corpus,
    heldout: Option<&Corpus>,
    opts: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    if train.expansion_factor != config.expansion_factor || train.n_mel != config.n_mel {
        return Err(Error::Config("corpus framing does not match the backbone config".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reg = ParamRegistry::new();
    let backbone = Backbone::new(config, &mut reg, &mut rng)?;
    let mut opt = Adam::new(&reg);
    let mut sampler = EpochSampler::new(train.len(), opts.batch_size, opts.seed ^ 0x5eed)?;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<&Utterance> = sampler.next_batch().into_iter().map(|i| &train.utterances[i]).collect();
        let loss = batch_mae(&batch, |u| backbone.predict(&u.tokens))?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                last_finite: step.checked_sub(1),
            });
        }
        loss.backward()?;
        opt.step(opts.schedule.lr(step));
        losses.push(value);
        if step % 250 == 0 {
            log::debug!("pretrain step {step}: mae {value:.5}");
        }
    }
    let heldout_mae = heldout
        .map(|h| corpus_mae(h, |u| backbone.predict(&u.tokens)))
        .transpose()?;
    if let (Some(limit), Some(mae)) = (opts.mae_threshold, heldout_mae) {
        if mae >= limit {
            return Err(Error::Contract(format!(
                "pretrained backbone reached held-out MAE {mae:.4}, above the threshold {limit}"
            )));
        }
    }
    Ok(PretrainOutcome {
        backbone,
        registry: reg,
        losses,
        heldout_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, CorpusSpec};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            latent_dim: 8,
            ffn_dim: 16,
            n_decoder_blocks: 3,
            n_encoder_blocks: 1,
            n_mel: 6,
            vocab_size: 5,
            ..BackboneConfig::default()
        }
    }

    fn build(cfg: &BackboneConfig) -> (Backbone, ParamRegistry) {
        let mut reg = ParamRegistry::new();
        let b = Backbone::new(cfg, &mut reg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (b, reg)
    }

    #[test]
    fn empty_tokens_give_empty_spectrogram() {
        let (b, _) = build(&tiny());
        let out = b.predict(&[]).unwrap();
        assert_eq!(out.shape(), &[0, 6]);
    }

    #[test]
    fn out_of_range_token_is_vocabulary_error() {
        let (b, _) = build(&tiny());
        assert!(matches!(b.predict(&[0, 5]), Err(Error::Vocabulary { token: 5, vocab_size: 5 })));
    }

    #[test]
    fn frame_count_and_determinism() {
        let (b, _) = build(&tiny());
        let a = b.predict(&[1, 2, 3]).unwrap();
        assert_eq!(a.shape(), &[12, 6]);
        let c = b.predict(&[1, 2, 3]).unwrap();
        assert!(a.to_vec().iter().zip(c.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn taps_are_transparent() {
        let (b, _) = build(&tiny());
        let taps = b.all_taps();
        let tapped = b.forward(&[4, 0, 1, 1], &b.speaker, &taps).unwrap();
        let plain = b.predict(&[4, 0, 1, 1]).unwrap();
        assert_eq!(tapped.taps.len(), taps.len());
        assert_eq!(
            tapped.mel.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            plain.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // Feeding the tapped h¹ by hand into block 2 reproduces h².
        let h1 = &tapped.tap(TapPoint::Block(1)).unwrap().post;
        let h2 = b.decoder[2].forward(h1).unwrap();
        assert_eq!(h2.to_vec(), tapped.tap(TapPoint::Block(2)).unwrap().pre.to_vec());
    }

    #[test]
    fn tap_point_parsing() {
        assert_eq!("input".parse::<TapPoint>().unwrap(), TapPoint::DecoderInput);
        assert_eq!("block3".parse::<TapPoint>().unwrap(), TapPoint::Block(3));
        assert!("blockx".parse::<TapPoint>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.bin");
        let cfg = tiny();
        let (_, reg) = build(&cfg);
        save_checkpoint(&cfg, &reg, &path).unwrap();
        let (_, loaded) = load_checkpoint(&cfg, &path).unwrap();
        assert_eq!(reg.snapshot(), loaded.snapshot());
        assert_eq!(crate::nn::count_params(&loaded).trainable, 0);

        let other = BackboneConfig { latent_dim: 12, ..cfg.clone() };
        assert!(matches!(load_checkpoint(&other, &path), Err(Error::ConfigHash { .. })));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&cfg, &path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn pretraining_memorizes_one_utterance() {
        let cfg = tiny();
        let spec = CorpusSpec {
            vocab_size: 5,
            n_mel: 6,
            n_utterances: 1,
            ..CorpusSpec::source_default()
        };
        let corpus = generate(&spec).unwrap();
        let opts = PretrainConfig {
            steps: 400,
            batch_size: 1,
            schedule: Schedule { peak_lr: 1e-2, warmup_steps: 20 },
            seed: 3,
            mae_threshold: None,
        };
        let a = pretrain(&cfg, &corpus, None, &opts).unwrap();
        let last = *a.losses.last().unwrap();
        assert!(last < 0.05, "final training MAE {last}");
        let b = pretrain(&cfg, &corpus, None, &opts).unwrap();
        assert_eq!(last.to_bits(), b.losses.last().unwrap().to_bits());
    }
}
