// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, forward_with_overrides, ActivationOverride, HeadSite, PatchSite, Submodule, VlmModel,
};
use crate::numerics::Tensor;
use crate::worldgen::{embed_scene, VqaSample};

use super::{logit_gap, predict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Head output replaced by zeros.
    Zero,
    /// Head output replaced by its position-wise mean over the dataset.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutResult {
    pub site: HeadSite,
    pub submodule: Submodule,
    pub ablation: Ablation,
    /// Mean of `L(tau) - L(inc)` on clean runs minus the same under ablation.
    pub mean_drop: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Largest absolute change of any logit at any position.
    pub max_logit_change: f64,
}

/// Ablates each head in `sites` on its own (at every position of clean
/// runs) and reports the change in the clean logit gap and accuracy.
pub fn knockout(
    model: &VlmModel,
    dataset: &[VqaSample],
    submodule: Submodule,
    sites: &[HeadSite],
    ablation: Ablation,
) -> Result<Vec<KnockoutResult>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = &model.config;
    if !submodule.is_attention() {
        return Err(Error::SiteOutOfRange(format!(
            "{} has no heads",
            submodule.as_str()
        )));
    }
    for s in sites {
        PatchSite::head(s.layer, submodule, s.head, 0).validate(cfg, 1)?;
    }
    let dh = cfg.d_head();
    let inputs: Vec<_> = dataset
        .iter()
        .map(|s| (embed_scene(&s.clean_scene), s))
        .collect();
    let clean = inputs
        .par_iter()
        .map(|(img, s)| forward(model, img, &s.prompt_tokens))
        .collect::<Result<Vec<_>>>()?;

    let n = dataset.len() as f64;
    let gaps = |traces: &[crate::model::ForwardTrace]| -> (f64, f64) {
        let mut gap = 0.0;
        let mut hits = 0usize;
        for (t, s) in traces.iter().zip(dataset) {
            gap += logit_gap(t, s.correct_token, s.incorrect_token);
            let (a, b) = s.options();
            hits += usize::from(predict(t, a, b) == s.correct_token);
        }
        (gap / n, hits as f64 / n)
    };
    let (gap_before, acc_before) = gaps(&clean);

    let mut out = Vec::with_capacity(sites.len());
    for &site in sites {
        let replacement = match ablation {
            Ablation::Zero => None,
            Ablation::Mean => Some(mean_head_output(&clean, site, submodule, dh)),
        };
        let ablated = inputs
            .par_iter()
            .map(|(img, s)| {
                let len = s.prompt_tokens.len() + clean_offset(cfg);
                let overrides: Vec<ActivationOverride> = (0..len)
                    .map(|pos| ActivationOverride {
                        site: PatchSite::head(site.layer, submodule, site.head, pos),
                        value: match &replacement {
                            None => vec![0.0; dh],
                            Some(m) => m.row(pos).to_vec(),
                        },
                    })
                    .collect();
                forward_with_overrides(model, img, &s.prompt_tokens, &overrides)
            })
            .collect::<Result<Vec<_>>>()?;
        let (gap_after, acc_after) = gaps(&ablated);
        let max_logit_change = clean
            .iter()
            .zip(&ablated)
            .flat_map(|(a, b)| {
                a.logits
                    .data()
                    .iter()
                    .zip(b.logits.data())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max);
        out.push(KnockoutResult {
            site,
            submodule,
            ablation,
            mean_drop: gap_before - gap_after,
            accuracy_before: acc_before,
            accuracy_after: acc_after,
            max_logit_change,
        });
    }
    Ok(out)
}

fn clean_offset(cfg: &crate::model::ModelConfig) -> usize {
    match cfg.arch {
        crate::model::Arch::CrossAttnFusion => 0,
        crate::model::Arch::EarlyFusion => cfg.n_patches,
    }
}

/// Position-wise mean of one head's output over the clean traces; rows
/// past the longest sequence stay zero.
fn mean_head_output(
    traces: &[crate::model::ForwardTrace],
    site: HeadSite,
    submodule: Submodule,
    dh: usize,
) -> Tensor {
    let max_len = traces.iter().map(|t| t.seq_len).max().unwrap_or(0);
    let mut sum = Tensor::zeros(&[max_len, dh]);
    let mut count = vec![0usize; max_len];
    for t in traces {
        let z = t
            .submodule(site.layer, submodule)
            .and_then(|s| s.head_outputs.as_ref())
            .expect("validated attention site");
        for pos in 0..t.seq_len {
            let src = &z.row(pos)[site.head * dh..(site.head + 1) * dh];
            for (acc, v) in sum.row_mut(pos).iter_mut().zip(src) {
                *acc += v;
            }
            count[pos] += 1;
        }
    }
    for (pos, &c) in count.iter().enumerate() {
        if c > 0 {
            sum.row_mut(pos).iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sum
}
