// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::layout::FEATURE_DIM;
use crate::numerics::{gelu, layer_norm, matmul, softmax_in_place, Tensor, LN_EPS};
use crate::vocab::TokenId;
use crate::worldgen::PatchEmbeddings;

use super::{Arch, Attention, LayerNorm, PatchSite, Submodule, VlmModel};

/// Recorded state of one submodule in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmoduleTrace {
    pub kind: Submodule,
    /// Pre-residual contribution, `seq_len × d_model`.
    pub output: Tensor,
    /// Concatenated per-head outputs before the output projection
    /// (`seq_len × d_model`, head `h` in columns `h*d_head..`). Attention only.
    pub head_outputs: Option<Tensor>,
    /// Attention pattern per head, `seq_len × n_keys`. Attention only.
    pub attention: Vec<Tensor>,
}

/// Everything a forward pass computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub arch: Arch,
    pub d_model: usize,
    pub n_heads: usize,
    /// Sequence index of the first text token (0 for cross-attention fusion).
    pub text_offset: usize,
    pub seq_len: usize,
    /// `layers[l][i]` follows `arch.submodules()[i]`.
    pub layers: Vec<Vec<SubmoduleTrace>>,
    /// Logits at every position, `seq_len × vocab`.
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn submodule(&self, layer: usize, kind: Submodule) -> Option<&SubmoduleTrace> {
        let idx = self.arch.submodules().iter().position(|&k| k == kind)?;
        self.layers.get(layer).map(|l| &l[idx])
    }

    pub fn readout_pos(&self) -> usize {
        self.seq_len - 1
    }

    pub fn readout_logits(&self) -> &[f64] {
        self.logits.row(self.readout_pos())
    }

    /// Sequence index of text position `p`.
    pub fn text_pos(&self, p: usize) -> usize {
        self.text_offset + p
    }

    pub fn text_len(&self) -> usize {
        self.seq_len - self.text_offset
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// The recorded activation at `site`.
    pub fn value_at(&self, site: &PatchSite) -> Result<Vec<f64>> {
        let sub = self
            .submodule(site.layer, site.submodule)
            .ok_or_else(|| Error::SiteOutOfRange(format!("{site:?}")))?;
        if site.token_pos >= self.seq_len {
            return Err(Error::SiteOutOfRange(format!("{site:?}")));
        }
        match site.head {
            None => Ok(sub.output.row(site.token_pos).to_vec()),
            Some(h) => {
                let heads = sub
                    .head_outputs
                    .as_ref()
                    .ok_or_else(|| Error::SiteOutOfRange(format!("{site:?}")))?;
                let dh = self.d_head();
                Ok(heads.row(site.token_pos)[h * dh..(h + 1) * dh].to_vec())
            }
        }
    }
}

/// Hard replacement of the activation at `site` by `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationOverride {
    pub site: PatchSite,
    pub value: Vec<f64>,
}

pub fn forward(
    model: &VlmModel,
    image: &PatchEmbeddings,
    text: &[TokenId],
) -> Result<ForwardTrace> {
    forward_with_overrides(model, image, text, &[])
}

/// Forward pass in which every `site` takes the donor's recorded value; all
/// downstream computation proceeds from the substituted values.
pub fn forward_with_patches(
    model: &VlmModel,
    image: &PatchEmbeddings,
    text: &[TokenId],
    donor: &ForwardTrace,
    sites: &[PatchSite],
) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let seq_len = seq_len_for(model, text.len());
    if donor.arch != cfg.arch
        || donor.d_model != cfg.d_model
        || donor.n_heads != cfg.n_heads
        || donor.layers.len() != cfg.n_layers
        || donor.seq_len != seq_len
    {
        return Err(Error::TraceShapeMismatch(format!(
            "donor {:?} {} layers, seq {}; run {:?} {} layers, seq {seq_len}",
            donor.arch,
            donor.layers.len(),
            donor.seq_len,
            cfg.arch,
            cfg.n_layers
        )));
    }
    let overrides = sites
        .iter()
        .map(|s| {
            s.validate(cfg, seq_len)?;
            Ok(ActivationOverride {
                site: *s,
                value: donor.value_at(s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    forward_with_overrides(model, image, text, &overrides)
}

fn seq_len_for(model: &VlmModel, text_len: usize) -> usize {
    match model.config.arch {
        Arch::CrossAttnFusion => text_len,
        Arch::EarlyFusion => model.config.n_patches + text_len,
    }
}

fn validate_inputs(model: &VlmModel, image: &PatchEmbeddings, text: &[TokenId]) -> Result<()> {
    let cfg = &model.config;
    if text.is_empty() || text.len() > cfg.max_text_len {
        return Err(Error::Shape(format!(
            "text length {} outside 1..={}",
            text.len(),
            cfg.max_text_len
        )));
    }
    if let Some(t) = text.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if image.0.shape() != [cfg.n_patches, FEATURE_DIM] {
        return Err(Error::Shape(format!(
            "image {:?}, expected [{}, {FEATURE_DIM}]",
            image.0.shape(),
            cfg.n_patches
        )));
    }
    if !image.0.is_finite() {
        return Err(Error::NonFiniteInput("image embeddings".into()));
    }
    Ok(())
}

fn ln(x: &Tensor, p: &LayerNorm) -> Result<Tensor> {
    layer_norm(x, &p.gain, &p.bias, LN_EPS)
}

/// Multi-head attention of `queries` (already normed) over `memory`.
/// Returns the concatenated head outputs and per-head patterns.
fn attend(
    w: &Attention,
    queries: &Tensor,
    memory: &Tensor,
    n_heads: usize,
    causal_offset: Option<usize>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let q = matmul(queries, &w.w_q)?;
    let k = matmul(memory, &w.w_k)?;
    let v = matmul(memory, &w.w_v)?;
    let (sq, sk, d) = (q.rows(), k.rows(), q.cols());
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut z = Tensor::zeros(&[sq, d]);
    let mut patterns = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut pattern = Tensor::zeros(&[sq, sk]);
        for i in 0..sq {
            let visible = match causal_offset {
                Some(off) => (i + off + 1).min(sk),
                None => sk,
            };
            let qi = &q.row(i)[cols.clone()];
            let row = &mut pattern.row_mut(i)[..visible];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += qi[t] * kj[t];
                }
                *s = acc * scale;
            }
            softmax_in_place(row);
            let zi = &mut z.row_mut(i)[cols.clone()];
            for (j, &a) in pattern.row(i)[..visible].iter().enumerate() {
                let vj = &v.row(j)[cols.clone()];
                for t in 0..dh {
                    zi[t] += a * vj[t];
                }
            }
        }
        patterns.push(pattern);
    }
    Ok((z, patterns))
}

fn check_finite(t: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what()))
    }
}

/// Forward pass with arbitrary activation overrides. Head-level overrides
/// replace a head's output slice before the output projection; module-level
/// overrides replace the projected output afterwards.
pub fn forward_with_overrides(
    model: &VlmModel,
    image: &PatchEmbeddings,
    text: &[TokenId],
    overrides: &[ActivationOverride],
) -> Result<ForwardTrace> {
    validate_inputs(model, image, text)?;
    let cfg = &model.config;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let seq_len = seq_len_for(model, text.len());
    for o in overrides {
        o.site.validate(cfg, seq_len)?;
        let want = if o.site.head.is_some() { dh } else { d };
        if o.value.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "override at {:?} has {} values, expected {want}",
                o.site,
                o.value.len()
            )));
        }
    }

    let image_tokens = matmul(&image.0, &model.patch_projector)?;
    let text_rows: Vec<Vec<f64>> = text
        .iter()
        .map(|&t| model.token_embedding.row(t as usize).to_vec())
        .collect();
    let text_tokens = Tensor::from_rows(&text_rows)?;
    let (mut resid, text_offset) = match cfg.arch {
        Arch::CrossAttnFusion => (text_tokens, 0),
        Arch::EarlyFusion => (
            Tensor::vstack(&[&image_tokens, &text_tokens])?,
            cfg.n_patches,
        ),
    };
    let causal = match cfg.arch {
        Arch::CrossAttnFusion => None,
        Arch::EarlyFusion => Some(0),
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let mut subs = Vec::with_capacity(cfg.arch.submodules().len());
        for &kind in cfg.arch.submodules() {
            let here = overrides
                .iter()
                .filter(|o| o.site.layer == l && o.site.submodule == kind);
            let (mut output, head_outputs, attention) = match kind {
                Submodule::SelfAttn | Submodule::CrossAttn => {
                    let (norm, attn, memory, mask) = match kind {
                        Submodule::SelfAttn => (&layer.ln_self, &layer.self_attn, None, causal),
                        _ => {
                            let (n, a) = layer.cross.as_ref().expect("validated cross-attn site");
                            (n, a, Some(&image_tokens), None)
                        }
                    };
                    let h = ln(&resid, norm)?;
                    let (mut z, patterns) =
                        attend(attn, &h, memory.unwrap_or(&h), cfg.n_heads, mask)?;
                    for o in here.clone().filter(|o| o.site.head.is_some()) {
                        let head = o.site.head.expect("filtered");
                        z.row_mut(o.site.token_pos)[head * dh..(head + 1) * dh]
                            .copy_from_slice(&o.value);
                    }
                    let out = matmul(&z, &attn.w_o)?;
                    (out, Some(z), patterns)
                }
                Submodule::Mlp => {
                    let h = ln(&resid, &layer.ln_mlp)?;
                    let mut pre = matmul(&h, &layer.mlp.w_in)?;
                    add_bias(&mut pre, &layer.mlp.b_in);
                    let mut out = matmul(&gelu(&pre), &layer.mlp.w_out)?;
                    add_bias(&mut out, &layer.mlp.b_out);
                    (out, None, Vec::new())
                }
            };
            for o in here.filter(|o| o.site.head.is_none()) {
                output.row_mut(o.site.token_pos).copy_from_slice(&o.value);
            }
            check_finite(&output, || format!("layer {l} {}", kind.as_str()))?;
            resid = resid.add(&output)?;
            subs.push(SubmoduleTrace {
                kind,
                output,
                head_outputs,
                attention,
            });
        }
        layers.push(subs);
    }

    let logits = matmul(&resid, &model.unembedding)?;
    check_finite(&logits, || "final logits".into())?;
    Ok(ForwardTrace {
        arch: cfg.arch,
        d_model: d,
        n_heads: cfg.n_heads,
        text_offset,
        seq_len,
        layers,
        logits,
    })
}

fn add_bias(t: &mut Tensor, bias: &[f64]) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        for (x, b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}
