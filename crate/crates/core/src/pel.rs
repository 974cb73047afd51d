//! Parameter-efficient layers and their insertion into the frozen decoder.
//!
//! * input reprogramming (IR): `z' = z + H(z)` on the decoder input
//! * latent reprogramming (LR): `h' = h + H(h)` between decoder blocks
//! * latent adapter (LA): `h' = h + up(gelu(down(h)))` after every block
//!
//! `H` is a linear layer, GELU, then a 1-D convolution back to the latent
//! width. The last sub-layer of each kind starts at zero, so a freshly
//! assembled model computes exactly what the backbone computes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    install_records, load_checkpoint, Backbone, BackboneConfig, ForwardOutput, LatentHook, TapPoint, BACKBONE_PREFIX,
    DECODER_PREFIX,
};
use crate::error::{Error, Result};
use crate::format::{self, Record, Records, MAGIC_SIDECAR};
use crate::nn::{Conv1d, Linear, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ReprogramNet {
    pub ff: Linear,
    pub conv: Conv1d,
}

impl ReprogramNet {
    pub fn new<R: Rng>(
        reg: &mut ParamRegistry,
        name: &str,
        latent_dim: usize,
        hidden: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ff: Linear::new(reg, &format!("{name}.ff"), latent_dim, hidden, rng)?,
            conv: Conv1d::zeroed(reg, &format!("{name}.conv"), width, hidden, latent_dim)?,
        })
    }

    /// The residual branch `H(z)`.
    pub fn residual(&self, z: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.ff.forward(z)?.gelu())
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        z.add(&self.residual(z)?)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterLayer {
    pub down: Linear,
    pub up: Linear,
}

impl AdapterLayer {
    pub fn new<R: Rng>(reg: &mut ParamRegistry, name: &str, latent_dim: usize, r: usize, rng: &mut R) -> Result<Self> {
        if r >= latent_dim {
            return Err(Error::Config(format!(
                "adapter bottleneck {r} must be smaller than the latent width {latent_dim}"
            )));
        }
        Ok(Self {
            down: Linear::new(reg, &format!("{name}.down"), latent_dim, r, rng)?,
            up: Linear::zeroed(reg, &format!("{name}.up"), r, latent_dim)?,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        h.add(&self.up.forward(&self.down.forward(h)?.gelu())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    None,
    Ir,
    La,
    IrLr,
    DecoderFt,
    FullFt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Ir,
        Method::La,
        Method::IrLr,
        Method::DecoderFt,
        Method::FullFt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Ir => "IR",
            Method::La => "LA",
            Method::IrLr => "IR+LR",
            Method::DecoderFt => "decoder-FT",
            Method::FullFt => "FT",
        }
    }

    /// Filesystem-friendly form of the label.
    pub fn slug(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Ir => "ir",
            Method::La => "la",
            Method::IrLr => "ir_lr",
            Method::DecoderFt => "decoder_ft",
            Method::FullFt => "ft",
        }
    }

    /// Whether the method adds layers rather than fine-tuning the backbone.
    pub fn is_pel(self) -> bool {
        matches!(self, Method::Ir | Method::La | Method::IrLr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match key.as_str() {
            "none" => Method::None,
            "ir" => Method::Ir,
            "la" => Method::La,
            "ir+lr" | "ir-lr" => Method::IrLr,
            "decoder-ft" => Method::DecoderFt,
            "ft" | "full-ft" => Method::FullFt,
            _ => {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.label()).collect();
                return Err(Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    valid.join(", ")
                )));
            }
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.label().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PelConfig {
    pub method: Method,
    /// Inner width of each reprogramming network.
    pub hidden: usize,
    /// Adapter bottleneck width `r`.
    pub bottleneck: usize,
    pub conv_width: usize,
    /// Blocks followed by a latent reprogramming layer; defaults to every
    /// block but the last.
    pub lr_blocks: Option<Vec<usize>>,
    /// Blocks followed by an adapter; defaults to every block.
    pub adapter_blocks: Option<Vec<usize>>,
    pub init_seed: u64,
}

impl Default for PelConfig {
    fn default() -> Self {
        Self {
            method: Method::IrLr,
            hidden: 8,
            bottleneck: 8,
            conv_width: 3,
            lr_blocks: None,
            adapter_blocks: None,
            init_seed: 31,
        }
    }
}

impl PelConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    fn positions(&self, n_blocks: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let lr = self
            .lr_blocks
            .clone()
            .unwrap_or_else(|| (0..n_blocks.saturating_sub(1)).collect());
        let la = self.adapter_blocks.clone().unwrap_or_else(|| (0..n_blocks).collect());
        for &b in lr.iter().chain(&la) {
            if b >= n_blocks {
                return Err(Error::Config(format!(
                    "insertion block {b} out of range for {n_blocks} decoder blocks"
                )));
            }
        }
        Ok((dedup(lr), dedup(la)))
    }

    pub fn canonical(&self, n_blocks: usize) -> Result<String> {
        let (lr, la) = self.positions(n_blocks)?;
        Ok(format!(
            "method={};hidden={};r={};conv={};lr={lr:?};la={la:?};seed={}",
            self.method, self.hidden, self.bottleneck, self.conv_width, self.init_seed
        ))
    }
}

fn dedup(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// A frozen backbone with parameter-efficient layers spliced into its
/// decoder.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub backbone: Backbone,
    pub config: PelConfig,
    pub input: Option<ReprogramNet>,
    pub reprogram: BTreeMap<usize, ReprogramNet>,
    pub adapters: BTreeMap<usize, AdapterLayer>,
}

impl LatentHook for AdaptedModel {
    fn on_decoder_input(&self, z: &Tensor) -> Result<Tensor> {
        match &self.input {
            Some(net) => net.forward(z),
            None => Ok(z.clone()),
        }
    }

    fn on_block_output(&self, block: usize, h: &Tensor) -> Result<Tensor> {
        let mut h = h.clone();
        if let Some(a) = self.adapters.get(&block) {
            h = a.forward(&h)?;
        }
        if let Some(r) = self.reprogram.get(&block) {
            h = r.forward(&h)?;
        }
        Ok(h)
    }
}

impl AdaptedModel {
    pub fn forward(&self, tokens: &[usize], taps: &[TapPoint]) -> Result<ForwardOutput> {
        self.backbone.forward_with(tokens, &self.backbone.speaker, self, taps)
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward(tokens, &[])?.mel)
    }

    /// Points where a PEL layer sits; these feed the optimal-transport loss.
    pub fn pel_taps(&self) -> Vec<TapPoint> {
        let mut taps = Vec::new();
        if self.input.is_some() {
            taps.push(TapPoint::DecoderInput);
        }
        let blocks: std::collections::BTreeSet<usize> =
            self.reprogram.keys().chain(self.adapters.keys()).copied().collect();
        taps.extend(blocks.into_iter().map(TapPoint::Block));
        taps
    }
}

/// Adds the layers for `cfg.method` to an existing backbone and sets the
/// trainable set: PEL parameters only, the decoder for decoder-FT, and
/// everything for full FT.
pub fn attach(backbone: Backbone, reg: &mut ParamRegistry, cfg: &PelConfig) -> Result<AdaptedModel> {
    let d = backbone.config.latent_dim;
    let n = backbone.config.n_decoder_blocks;
    let (lr_blocks, la_blocks) = cfg.positions(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut model = AdaptedModel {
        backbone,
        config: cfg.clone(),
        input: None,
        reprogram: BTreeMap::new(),
        adapters: BTreeMap::new(),
    };
    if matches!(cfg.method, Method::Ir | Method::IrLr) {
        model.input = Some(ReprogramNet::new(reg, "pel.ir", d, cfg.hidden, cfg.conv_width, &mut rng)?);
    }
    if cfg.method == Method::IrLr {
        for b in lr_blocks {
            let net = ReprogramNet::new(reg, &format!("pel.lr.block{b}"), d, cfg.hidden, cfg.conv_width, &mut rng)?;
            model.reprogram.insert(b, net);
        }
    }
    if cfg.method == Method::La {
        for b in la_blocks {
            let layer = AdapterLayer::new(reg, &format!("pel.la.block{b}"), d, cfg.bottleneck, &mut rng)?;
            model.adapters.insert(b, layer);
        }
    }
    reg.freeze(BACKBONE_PREFIX)?;
    match cfg.method {
        Method::DecoderFt => {
            reg.unfreeze(DECODER_PREFIX)?;
        }
        Method::FullFt => {
            reg.unfreeze(BACKBONE_PREFIX)?;
        }
        _ => {}
    }
    Ok(model)
}

/// Loads the frozen backbone checkpoint and attaches the configured layers.
pub fn assemble(
    backbone_cfg: &BackboneConfig,
    checkpoint: &Path,
    cfg: &PelConfig,
) -> Result<(AdaptedModel, ParamRegistry)> {
    let (backbone, mut reg) = load_checkpoint(backbone_cfg, checkpoint)?;
    let model = attach(backbone, &mut reg, cfg)?;
    Ok((model, reg))
}

fn sidecar_hash(model: &AdaptedModel) -> Result<u64> {
    let bb = &model.backbone.config;
    Ok(format::hash_str(&format!(
        "{}|{}",
        bb.canonical(),
        model.config.canonical(bb.n_decoder_blocks)?
    )))
}

/// Writes every trainable tensor to a sidecar file. The backbone file stays
/// untouched and can be shared across methods.
pub fn save_sidecar(model: &AdaptedModel, reg: &ParamRegistry, path: &Path) -> Result<()> {
    let records: Records = reg
        .trainable()
        .into_iter()
        .map(|(name, t)| {
            (
                name.to_owned(),
                Record {
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                },
            )
        })
        .collect();
    format::write_tensor_file(path, MAGIC_SIDECAR, sidecar_hash(model)?, &records)
}

/// Restores trained tensors from a sidecar into an assembled model.
pub fn load_sidecar(model: &AdaptedModel, reg: &ParamRegistry, path: &Path) -> Result<()> {
    let (hash, records) = format::read_tensor_file(path, MAGIC_SIDECAR)?;
    format::expect_hash(path, hash, sidecar_hash(model)?)?;
    let names: Vec<&str> = reg.trainable().into_iter().map(|(n, _)| n).collect();
    install_records(path, reg, &names, &records)
}
