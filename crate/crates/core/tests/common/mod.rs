// SPDX-License-Identifier: MIT OR Apache-2.0

//! Straight-line reference forward pass over plain vectors, used as an
//! oracle for the library implementation.

#![allow(dead_code)]

use std::collections::BTreeMap;

use notice_bench::model::{Arch, Attention, LayerNorm, Submodule, VlmModel};
use notice_bench::numerics::Tensor;
use notice_bench::vocab::TokenId;
use notice_bench::worldgen::PatchEmbeddings;

type Mat = Vec<Vec<f64>>;

/// Replace one value before it reaches the residual stream.
#[derive(Debug, Clone)]
pub struct Substitution {
    pub layer: usize,
    pub submodule: Submodule,
    pub head: Option<usize>,
    pub pos: usize,
    pub value: Vec<f64>,
}

pub struct NaiveRun {
    pub logits: Mat,
    /// Pre-residual output per (layer, submodule).
    pub outputs: BTreeMap<(usize, Submodule), Mat>,
    /// Concatenated head outputs before the output projection.
    pub z: BTreeMap<(usize, Submodule), Mat>,
}

fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Tensor) -> Mat {
    a.iter()
        .map(|r| {
            (0..b.cols())
                .map(|j| {
                    let mut s = 0.0;
                    for (p, x) in r.iter().enumerate() {
                        s += x * b.get(p, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, p: &LayerNorm) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * p.gain[i] + p.bias[i])
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn attention(a: &Attention, x: &Mat, mem: &Mat, n_heads: usize, causal: bool) -> Mat {
    let q = mm(x, &a.w_q);
    let k = mm(mem, &a.w_k);
    let v = mm(mem, &a.w_v);
    let d = q[0].len();
    let dh = d / n_heads;
    let mut z = vec![vec![0.0; d]; x.len()];
    for h in 0..n_heads {
        let c = h * dh;
        for i in 0..x.len() {
            let visible = if causal { i + 1 } else { mem.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| {
                    (0..dh).map(|t| q[i][c + t] * k[j][c + t]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            for (j, pj) in p.iter().enumerate() {
                for t in 0..dh {
                    z[i][c + t] += pj * v[j][c + t];
                }
            }
        }
    }
    z
}

pub fn naive_forward(
    model: &VlmModel,
    image: &PatchEmbeddings,
    text: &[TokenId],
    subst: Option<&Substitution>,
) -> NaiveRun {
    let cfg = &model.config;
    let dh = cfg.d_model / cfg.n_heads;
    let img = mm(&rows(image.tensor()), &model.patch_projector);
    let txt: Mat = text
        .iter()
        .map(|&t| model.token_embedding.row(t as usize).to_vec())
        .collect();
    let mut x = match cfg.arch {
        Arch::CrossAttnFusion => txt,
        Arch::EarlyFusion => img.iter().cloned().chain(txt).collect(),
    };
    let mut outputs = BTreeMap::new();
    let mut zs = BTreeMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for &kind in cfg.arch.submodules() {
            let s = subst.filter(|s| s.layer == l && s.submodule == kind);
            let mut out = match kind {
                Submodule::Mlp => {
                    let h = norm(&x, &layer.ln_mlp);
                    let mut pre = mm(&h, &layer.mlp.w_in);
                    for r in &mut pre {
                        for (i, v) in r.iter_mut().enumerate() {
                            let u = *v + layer.mlp.b_in[i];
                            *v = 0.5 * u * (1.0 + libm::erf(u / std::f64::consts::SQRT_2));
                        }
                    }
                    let mut o = mm(&pre, &layer.mlp.w_out);
                    for r in &mut o {
                        for (i, v) in r.iter_mut().enumerate() {
                            *v += layer.mlp.b_out[i];
                        }
                    }
                    o
                }
                _ => {
                    let (ln, att, mem, causal) = if kind == Submodule::SelfAttn {
                        let h = norm(&x, &layer.ln_self);
                        (
                            h.clone(),
                            &layer.self_attn,
                            h,
                            cfg.arch == Arch::EarlyFusion,
                        )
                    } else {
                        let (n, a) = layer.cross.as_ref().unwrap();
                        (norm(&x, n), a, img.clone(), false)
                    };
                    let mut z = attention(att, &ln, &mem, cfg.n_heads, causal);
                    if let Some(s) = s.filter(|s| s.head.is_some()) {
                        let h = s.head.unwrap();
                        z[s.pos][h * dh..(h + 1) * dh].copy_from_slice(&s.value);
                    }
                    let o = mm(&z, &att.w_o);
                    zs.insert((l, kind), z);
                    o
                }
            };
            if let Some(s) = s.filter(|s| s.head.is_none()) {
                out[s.pos] = s.value.clone();
            }
            for (r, o) in x.iter_mut().zip(&out) {
                for (a, b) in r.iter_mut().zip(o) {
                    *a += b;
                }
            }
            outputs.insert((l, kind), out);
        }
    }
    NaiveRun {
        logits: mm(&x, &model.unembedding),
        outputs,
        z: zs,
    }
}

impl NaiveRun {
    pub fn readout(&self) -> &[f64] {
        self.logits.last().unwrap()
    }

    /// Value recorded at a site, in the shape a substitution expects.
    pub fn value(
        &self,
        layer: usize,
        submodule: Submodule,
        head: Option<usize>,
        pos: usize,
        dh: usize,
    ) -> Vec<f64> {
        match head {
            None => self.outputs[&(layer, submodule)][pos].clone(),
            Some(h) => self.z[&(layer, submodule)][pos][h * dh..(h + 1) * dh].to_vec(),
        }
    }
}
