// SPDX-License-Identifier: MIT OR Apache-2.0

//! Miniature vision-language transformer in two fusion variants.
//!
//! * [`Arch::CrossAttnFusion`]: text tokens run self-attention, then
//!   cross-attention onto the projected image patches, then an MLP.
//! * [`Arch::EarlyFusion`]: projected patches are prepended to the text and
//!   the joint sequence runs causal self-attention and MLP blocks.
//!
//! Both are pre-layer-norm; every submodule adds its output to the residual
//! stream, and the unembedding reads the final residual directly (there is
//! no final layer norm, so logits are linear in the residual). The forward pass records every submodule's pre-residual output,
//! every head's output slice and every attention pattern.

mod forward;
mod io;
mod planted;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::FEATURE_DIM;
use crate::numerics::{Rng, Tensor};

pub use forward::{
    forward, forward_with_overrides, forward_with_patches, ActivationOverride, ForwardTrace,
    SubmoduleTrace,
};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_SCHEMA};
pub use planted::{build_planted_model, HeadSite, PlantedSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    CrossAttnFusion,
    EarlyFusion,
}

/// Submodule kinds that contribute to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    SelfAttn,
    CrossAttn,
    Mlp,
}

impl Submodule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SelfAttn => "self_attn",
            Self::CrossAttn => "cross_attn",
            Self::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self_attn" => Some(Self::SelfAttn),
            "cross_attn" => Some(Self::CrossAttn),
            "mlp" => Some(Self::Mlp),
            _ => None,
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, Self::Mlp)
    }
}

impl Arch {
    /// Submodules of one layer in execution order.
    pub fn submodules(self) -> &'static [Submodule] {
        match self {
            Self::CrossAttnFusion => &[Submodule::SelfAttn, Submodule::CrossAttn, Submodule::Mlp],
            Self::EarlyFusion => &[Submodule::SelfAttn, Submodule::Mlp],
        }
    }

    /// Attention submodule where image and text meet.
    pub fn fusion_submodule(self) -> Submodule {
        match self {
            Self::CrossAttnFusion => Submodule::CrossAttn,
            Self::EarlyFusion => Submodule::SelfAttn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_patches: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::CrossAttnFusion,
            n_layers: 6,
            n_heads: 8,
            d_model: 32,
            d_mlp: 64,
            vocab_size: 64,
            n_patches: 16,
            max_text_len: 10,
        }
    }
}

impl ModelConfig {
    pub fn early_fusion() -> Self {
        Self {
            arch: Arch::EarlyFusion,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("n_patches", self.n_patches),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Total number of heads in one attention submodule kind.
    pub fn n_heads_total(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// Multi-head attention weights. Head `h` owns columns
/// `h*d_head..(h+1)*d_head` of the Q/K/V projections and the matching rows
/// of the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl Attention {
    fn zeros(d: usize) -> Self {
        Self {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w_in: Tensor,
    pub b_in: Vec<f64>,
    pub w_out: Tensor,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    /// Present only for cross-attention fusion.
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmModel {
    pub config: ModelConfig,
    pub planted: Option<PlantedSpec>,
    pub token_embedding: Tensor,
    pub patch_projector: Tensor,
    pub layers: Vec<Layer>,
    pub unembedding: Tensor,
}

impl VlmModel {
    /// All-zero weights with identity layer norms.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln_self: LayerNorm::identity(d),
                self_attn: Attention::zeros(d),
                cross: (config.arch == Arch::CrossAttnFusion)
                    .then(|| (LayerNorm::identity(d), Attention::zeros(d))),
                ln_mlp: LayerNorm::identity(d),
                mlp: Mlp {
                    w_in: Tensor::zeros(&[d, config.d_mlp]),
                    b_in: vec![0.0; config.d_mlp],
                    w_out: Tensor::zeros(&[config.d_mlp, d]),
                    b_out: vec![0.0; d],
                },
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            planted: None,
            token_embedding: Tensor::zeros(&[config.vocab_size, d]),
            patch_projector: Tensor::zeros(&[FEATURE_DIM, d]),
            layers,
            unembedding: Tensor::zeros(&[d, config.vocab_size]),
        })
    }

    /// Gaussian initialisation of every matrix and bias; layer norms stay
    /// at identity.
    pub fn random(config: &ModelConfig, rng: &mut Rng, std: f64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut fill = |t: &mut [f64]| t.iter_mut().for_each(|v| *v = std * rng.normal());
        fill(m.token_embedding.data_mut());
        fill(m.patch_projector.data_mut());
        for layer in &mut m.layers {
            let mut attns = vec![&mut layer.self_attn];
            if let Some((_, c)) = layer.cross.as_mut() {
                attns.push(c);
            }
            for a in attns {
                fill(a.w_q.data_mut());
                fill(a.w_k.data_mut());
                fill(a.w_v.data_mut());
                fill(a.w_o.data_mut());
            }
            fill(layer.mlp.w_in.data_mut());
            fill(&mut layer.mlp.b_in);
            fill(layer.mlp.w_out.data_mut());
            fill(&mut layer.mlp.b_out);
        }
        fill(m.unembedding.data_mut());
        Ok(m)
    }

    pub fn attention(&self, layer: usize, kind: Submodule) -> Option<&Attention> {
        let l = self.layers.get(layer)?;
        match kind {
            Submodule::SelfAttn => Some(&l.self_attn),
            Submodule::CrossAttn => l.cross.as_ref().map(|(_, a)| a),
            Submodule::Mlp => None,
        }
    }

    pub fn attention_mut(&mut self, layer: usize, kind: Submodule) -> Option<&mut Attention> {
        let l = self.layers.get_mut(layer)?;
        match kind {
            Submodule::SelfAttn => Some(&mut l.self_attn),
            Submodule::CrossAttn => l.cross.as_mut().map(|(_, a)| a),
            Submodule::Mlp => None,
        }
    }

    /// Every parameter block in serialisation order.
    pub(crate) fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.token_embedding.data(), self.patch_projector.data()];
        for l in &self.layers {
            out.extend([&l.ln_self.gain[..], &l.ln_self.bias[..]]);
            out.extend(attn_blocks(&l.self_attn));
            if let Some((ln, a)) = &l.cross {
                out.extend([&ln.gain[..], &ln.bias[..]]);
                out.extend(attn_blocks(a));
            }
            out.extend([&l.ln_mlp.gain[..], &l.ln_mlp.bias[..]]);
            out.extend([
                l.mlp.w_in.data(),
                &l.mlp.b_in[..],
                l.mlp.w_out.data(),
                &l.mlp.b_out[..],
            ]);
        }
        out.push(self.unembedding.data());
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.data_mut(),
            self.patch_projector.data_mut(),
        ];
        for l in &mut self.layers {
            out.extend([&mut l.ln_self.gain[..], &mut l.ln_self.bias[..]]);
            out.extend(attn_blocks_mut(&mut l.self_attn));
            if let Some((ln, a)) = &mut l.cross {
                out.extend([&mut ln.gain[..], &mut ln.bias[..]]);
                out.extend(attn_blocks_mut(a));
            }
            out.extend([&mut l.ln_mlp.gain[..], &mut l.ln_mlp.bias[..]]);
            out.extend([
                l.mlp.w_in.data_mut(),
                &mut l.mlp.b_in[..],
                l.mlp.w_out.data_mut(),
                &mut l.mlp.b_out[..],
            ]);
        }
        out.push(self.unembedding.data_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn attn_blocks(a: &Attention) -> [&[f64]; 4] {
    [a.w_q.data(), a.w_k.data(), a.w_v.data(), a.w_o.data()]
}

fn attn_blocks_mut(a: &mut Attention) -> [&mut [f64]; 4] {
    [
        a.w_q.data_mut(),
        a.w_k.data_mut(),
        a.w_v.data_mut(),
        a.w_o.data_mut(),
    ]
}

/// Location of an intervention: a submodule's pre-residual output at one
/// sequence position, or one head's output slice there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchSite {
    pub layer: usize,
    pub submodule: Submodule,
    pub head: Option<usize>,
    /// Position in the model's sequence (image tokens first for early fusion).
    pub token_pos: usize,
}

impl PatchSite {
    pub fn module(layer: usize, submodule: Submodule, token_pos: usize) -> Self {
        Self {
            layer,
            submodule,
            head: None,
            token_pos,
        }
    }

    pub fn head(layer: usize, submodule: Submodule, head: usize, token_pos: usize) -> Self {
        Self {
            layer,
            submodule,
            head: Some(head),
            token_pos,
        }
    }

    /// Checks indices against a model and a sequence length.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let err = |m: String| Err(Error::SiteOutOfRange(m));
        if self.layer >= config.n_layers {
            return err(format!("layer {} >= {}", self.layer, config.n_layers));
        }
        if !config.arch.submodules().contains(&self.submodule) {
            return err(format!(
                "{} not present in {:?}",
                self.submodule.as_str(),
                config.arch
            ));
        }
        if let Some(h) = self.head {
            if !self.submodule.is_attention() {
                return err("head index on an MLP site".into());
            }
            if h >= config.n_heads {
                return err(format!("head {h} >= {}", config.n_heads));
            }
        }
        if self.token_pos >= seq_len {
            return err(format!(
                "token {} >= sequence length {seq_len}",
                self.token_pos
            ));
        }
        Ok(())
    }
}
