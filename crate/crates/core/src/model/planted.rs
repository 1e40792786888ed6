// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built weights whose image-grounding route is known exactly.
//!
//! Cross-attention fusion:
//! * detector (cross-attention): an option word's query matches the group
//!   direction of the object's attribute in the keys; values copy the
//!   object's attribute codes back into dims 0..16 at the option position.
//! * mover (self-attention): the readout token attends to the option
//!   positions and copies their attribute codes to the readout.
//! * suppressor (cross-attention): option tokens attend to outlier patches
//!   and away from object patches.
//! * outlier suppressor (cross-attention): option tokens attend uniformly
//!   to every non-outlier patch.
//!
//! Early fusion plants the same functions in self-attention with the
//! readout token as the query and no mover.
//!
//! Suppressors only shape attention; their values are zero. Every other
//! head and every MLP is zero. Readers compare a dim against the
//! always-zero dim 23, which cancels the layer-norm mean exactly, and value
//! codes of group members are antipodal, so a zero input to a reader
//! produces an exactly zero output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    group_direction, value_code, COLOR_DIMS, COLOR_GROUP_DIMS, FEATURE_DIM, FUNCTION_FLAG,
    OPTION_FLAG, OUTLIER_DIMS, OUTLIER_VALUE, READOUT_FLAG, SCRATCH_DIMS, SHAPE_DIMS,
    SHAPE_GROUP_DIMS, ZERO_REF,
};
use crate::numerics::{Tensor, LN_EPS};
use crate::vocab::{self, Attribute, MIN_VOCAB, N_VALUES, PROMPT_LEN};
use crate::worldgen::N_PATCHES;

use super::{Arch, Attention, ModelConfig, Submodule, VlmModel};

/// Columns one planted head needs.
const HEAD_WIDTH: usize = 4;
/// Unembedding weight from an attribute dim to its word.
const UNEMBED_GAIN: f64 = 3.0;
/// Output gain of the cross-attention detector. Small writes leave the
/// layer-norm scale of the option tokens nearly unchanged, which keeps the
/// mover close to linear in the detector output.
const DETECTOR_GAIN: f64 = 0.01;
/// Output gain of the mover head.
const MOVER_GAIN: f64 = 10.0;

/// An attention head, addressed by layer and index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadSite {
    pub layer: usize,
    pub head: usize,
}

impl HeadSite {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl std::fmt::Display for HeadSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}.H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedSpec {
    pub detector: HeadSite,
    pub suppressor: HeadSite,
    pub outlier_suppressor: HeadSite,
    /// Self-attention head carrying the detector's output from the option
    /// positions to the readout (cross-attention fusion only).
    pub mover: HeadSite,
    /// Minimum attention logit of the detector onto matching patches.
    pub margin: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            detector: HeadSite::new(2, 3),
            suppressor: HeadSite::new(4, 1),
            outlier_suppressor: HeadSite::new(0, 5),
            mover: HeadSite::new(3, 0),
            margin: 10.0,
        }
    }
}

impl PlantedSpec {
    /// Heads of the fusion submodule with a planted function.
    pub fn fusion_heads(&self) -> [HeadSite; 3] {
        [self.detector, self.suppressor, self.outlier_suppressor]
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "margin {} must be positive",
                self.margin
            )));
        }
        let mut sites = vec![self.detector, self.suppressor, self.outlier_suppressor];
        if config.arch == Arch::CrossAttnFusion {
            sites.push(self.mover);
            if self.mover.layer <= self.detector.layer {
                return Err(Error::InvalidConfig(format!(
                    "mover {} must sit after detector {}",
                    self.mover, self.detector
                )));
            }
        }
        for s in &sites {
            if s.layer >= config.n_layers || s.head >= config.n_heads {
                return Err(Error::InvalidConfig(format!(
                    "planted head {s} outside {} layers × {} heads",
                    config.n_layers, config.n_heads
                )));
            }
        }
        for (i, a) in sites.iter().enumerate().take(3) {
            if sites[i + 1..3].contains(a) {
                return Err(Error::InvalidConfig(format!("planted head {a} used twice")));
            }
        }
        Ok(())
    }
}

/// Layer-norm scale (`sqrt(var + eps)`) of a vector.
fn ln_scale(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (var + LN_EPS).sqrt()
}

fn check_size(config: &ModelConfig) -> Result<()> {
    let small = |m: String| Err(Error::ConfigTooSmall(m));
    if config.d_model < FEATURE_DIM {
        return small(format!("d_model {} < {FEATURE_DIM}", config.d_model));
    }
    if config.d_head() < HEAD_WIDTH {
        return small(format!("d_head {} < {HEAD_WIDTH}", config.d_head()));
    }
    if config.vocab_size < MIN_VOCAB {
        return small(format!("vocab_size {} < {MIN_VOCAB}", config.vocab_size));
    }
    if config.max_text_len < PROMPT_LEN {
        return small(format!(
            "max_text_len {} < {PROMPT_LEN}",
            config.max_text_len
        ));
    }
    if config.n_patches != N_PATCHES {
        return small(format!("n_patches {} != {N_PATCHES}", config.n_patches));
    }
    Ok(())
}

fn token_embedding(config: &ModelConfig) -> Tensor {
    let mut e = Tensor::zeros(&[config.vocab_size, config.d_model]);
    for value in 0..N_VALUES as u8 {
        for (attr, dims) in [
            (Attribute::shape(value), SHAPE_GROUP_DIMS),
            (Attribute::color(value), COLOR_GROUP_DIMS),
        ] {
            let row = e.row_mut(attr.token() as usize);
            let g = group_direction(attr.group());
            row[dims.start] = g[0];
            row[dims.start + 1] = g[1];
            row[OPTION_FLAG] = 1.0;
            row[SCRATCH_DIMS.start + value as usize % 2] = 1.0;
        }
    }
    for (i, &w) in vocab::FUNCTION_WORDS.iter().enumerate() {
        let row = e.row_mut(w as usize);
        row[FUNCTION_FLAG] = 1.0;
        let code = i + 1;
        for bit in 0..3 {
            if code >> bit & 1 == 1 {
                row[SCRATCH_DIMS.start + bit] = 1.0;
            }
        }
    }
    e.row_mut(vocab::READOUT as usize)[READOUT_FLAG] = 1.0;
    e
}

fn attribute_rows_scale(e: &Tensor) -> f64 {
    (0..N_VALUES as u8)
        .flat_map(|v| [Attribute::shape(v), Attribute::color(v)])
        .map(|a| ln_scale(e.row(a.token() as usize)))
        .fold(0.0, f64::max)
}

/// `w[from, col] = s` and `w[ZERO_REF, col] = -s`: reads `from` relative to
/// the always-zero dim.
fn zero_sum_reader(w: &mut Tensor, from: usize, col: usize, s: f64) {
    w.set(from, col, w.get(from, col) + s);
    w.set(ZERO_REF, col, w.get(ZERO_REF, col) - s);
}

/// Values project the attribute one-hots onto their codes; the output
/// writes `gain` times the codes back onto the one-hot dims.
fn plant_attribute_copy(a: &mut Attention, c: usize, gain: f64) {
    for v in 0..N_VALUES {
        let code = value_code(v);
        for j in 0..2 {
            a.w_v.set(SHAPE_DIMS.start + v, c + j, code[j]);
            a.w_v.set(COLOR_DIMS.start + v, c + 2 + j, code[j]);
            a.w_o.set(c + j, SHAPE_DIMS.start + v, gain * code[j]);
            a.w_o.set(c + 2 + j, COLOR_DIMS.start + v, gain * code[j]);
        }
    }
}

/// Key column summing `dims`, made relative to the zero dim with `weight`.
fn indicator_key(a: &mut Attention, dims: std::ops::Range<usize>, col: usize, weight: f64) {
    let n = dims.len() as f64;
    for d in dims {
        a.w_k.set(d, col, weight);
    }
    a.w_k.set(ZERO_REF, col, -weight * n);
}

fn head_col(config: &ModelConfig, h: HeadSite) -> usize {
    h.head * config.d_head()
}

/// Builds the planted model. Construction is deterministic.
pub fn build_planted_model(config: &ModelConfig, spec: &PlantedSpec) -> Result<VlmModel> {
    config.validate()?;
    check_size(config)?;
    spec.validate(config)?;

    let mut m = VlmModel::zeros(config)?;
    m.planted = Some(spec.clone());
    m.token_embedding = token_embedding(config);
    for i in 0..FEATURE_DIM {
        m.patch_projector.set(i, i, 1.0);
    }
    for v in 0..N_VALUES {
        m.unembedding.set(
            SHAPE_DIMS.start + v,
            Attribute::shape(v as u8).token() as usize,
            UNEMBED_GAIN,
        );
        m.unembedding.set(
            COLOR_DIMS.start + v,
            Attribute::color(v as u8).token() as usize,
            UNEMBED_GAIN,
        );
    }

    let dh_sqrt = (config.d_head() as f64).sqrt();
    let margin = spec.margin;
    let sigma_attr = attribute_rows_scale(&m.token_embedding);
    let sigma_readout = ln_scale(m.token_embedding.row(vocab::READOUT as usize));
    let outlier_sum = OUTLIER_VALUE * OUTLIER_DIMS.len() as f64;

    match config.arch {
        Arch::CrossAttnFusion => {
            let fusion = Submodule::CrossAttn;

            let c = head_col(config, spec.detector);
            let a = m
                .attention_mut(spec.detector.layer, fusion)
                .expect("cross layer");
            let q = margin * dh_sqrt * sigma_attr;
            for (j, from) in SHAPE_GROUP_DIMS.chain(COLOR_GROUP_DIMS).enumerate() {
                zero_sum_reader(&mut a.w_q, from, c + j, q);
            }
            for v in 0..N_VALUES {
                let g = group_direction(v / 2);
                for j in 0..2 {
                    a.w_k.set(SHAPE_DIMS.start + v, c + j, g[j]);
                    a.w_k.set(COLOR_DIMS.start + v, c + 2 + j, g[j]);
                }
            }
            plant_attribute_copy(a, c, DETECTOR_GAIN);

            let c = head_col(config, spec.mover);
            let a = m
                .attention_mut(spec.mover.layer, Submodule::SelfAttn)
                .expect("layer");
            zero_sum_reader(
                &mut a.w_q,
                READOUT_FLAG,
                c,
                margin * dh_sqrt * sigma_readout,
            );
            zero_sum_reader(&mut a.w_k, OPTION_FLAG, c, 1.0);
            plant_attribute_copy(a, c, MOVER_GAIN);

            // Text-side scales stay below 1, so these give logits of at
            // least `margin` towards outliers.
            let s = margin * dh_sqrt / outlier_sum;
            let c = head_col(config, spec.suppressor);
            let a = m
                .attention_mut(spec.suppressor.layer, fusion)
                .expect("cross layer");
            zero_sum_reader(&mut a.w_q, OPTION_FLAG, c, s);
            zero_sum_reader(&mut a.w_q, OPTION_FLAG, c + 1, -s);
            for d in OUTLIER_DIMS {
                a.w_k.set(d, c, 1.0);
            }
            for d in SHAPE_DIMS.start..COLOR_DIMS.end {
                a.w_k.set(d, c + 1, 1.0);
            }

            let s = margin * dh_sqrt * sigma_attr / outlier_sum;
            let c = head_col(config, spec.outlier_suppressor);
            let a = m
                .attention_mut(spec.outlier_suppressor.layer, fusion)
                .expect("cross layer");
            zero_sum_reader(&mut a.w_q, OPTION_FLAG, c, s);
            for d in OUTLIER_DIMS {
                a.w_k.set(d, c, -1.0);
            }
        }
        Arch::EarlyFusion => {
            let fusion = Submodule::SelfAttn;
            let mut object_row = vec![0.0; FEATURE_DIM];
            object_row[SHAPE_DIMS.start] = 1.0;
            object_row[COLOR_DIMS.start] = 1.0;
            let sigma_object = ln_scale(&object_row);
            let mut outlier_row = vec![0.0; FEATURE_DIM];
            OUTLIER_DIMS.for_each(|d| outlier_row[d] = OUTLIER_VALUE);
            let sigma_outlier = ln_scale(&outlier_row);
            let object_key = 2.0 / sigma_object;
            let outlier_key = outlier_sum / sigma_outlier;
            let per_unit_key = margin * dh_sqrt * sigma_readout;

            let c = head_col(config, spec.detector);
            let a = m.attention_mut(spec.detector.layer, fusion).expect("layer");
            zero_sum_reader(&mut a.w_q, READOUT_FLAG, c, per_unit_key / object_key);
            indicator_key(a, SHAPE_DIMS.start..COLOR_DIMS.end, c, 1.0);
            plant_attribute_copy(a, c, DETECTOR_GAIN);

            let c = head_col(config, spec.suppressor);
            let a = m
                .attention_mut(spec.suppressor.layer, fusion)
                .expect("layer");
            zero_sum_reader(&mut a.w_q, READOUT_FLAG, c, per_unit_key / outlier_key);
            indicator_key(a, OUTLIER_DIMS, c, 1.0);
            zero_sum_reader(&mut a.w_q, READOUT_FLAG, c + 1, -per_unit_key / object_key);
            indicator_key(a, SHAPE_DIMS.start..COLOR_DIMS.end, c + 1, 1.0);

            let c = head_col(config, spec.outlier_suppressor);
            let a = m
                .attention_mut(spec.outlier_suppressor.layer, fusion)
                .expect("layer");
            zero_sum_reader(&mut a.w_q, READOUT_FLAG, c, per_unit_key / outlier_key);
            indicator_key(a, OUTLIER_DIMS, c, -1.0);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;
    use crate::worldgen::{embed_scene, generate_dataset, TaskVariant};

    fn predict(logits: &[f64], first: u32, second: u32) -> u32 {
        if logits[second as usize] > logits[first as usize] {
            second
        } else {
            first
        }
    }

    fn accuracy(m: &VlmModel, n: usize) -> f64 {
        let data = generate_dataset(n, 17, true, TaskVariant::Mixed).unwrap();
        let hits = data
            .iter()
            .filter(|s| {
                let tr = forward(m, &embed_scene(&s.clean_scene), &s.prompt_tokens).unwrap();
                let (a, b) = s.options();
                predict(tr.readout_logits(), a, b) == s.correct_token
            })
            .count();
        hits as f64 / n as f64
    }

    #[test]
    fn planted_models_answer_every_clean_sample() {
        for cfg in [ModelConfig::default(), ModelConfig::early_fusion()] {
            let m = build_planted_model(&cfg, &PlantedSpec::default()).unwrap();
            assert_eq!(accuracy(&m, 200), 1.0, "{:?}", cfg.arch);
        }
    }

    #[test]
    fn detector_knockout_gives_chance() {
        for cfg in [ModelConfig::default(), ModelConfig::early_fusion()] {
            let spec = PlantedSpec::default();
            let mut m = build_planted_model(&cfg, &spec).unwrap();
            let c = spec.detector.head * cfg.d_head();
            let a = m
                .attention_mut(spec.detector.layer, cfg.arch.fusion_submodule())
                .unwrap();
            for r in 0..cfg.d_model {
                for j in c..c + cfg.d_head() {
                    a.w_o.set(j, r, 0.0);
                }
            }
            assert_eq!(accuracy(&m, 200), 0.5, "{:?}", cfg.arch);
        }
    }

    #[test]
    fn detector_attends_to_object() {
        let spec = PlantedSpec::default();
        let m = build_planted_model(&ModelConfig::default(), &spec).unwrap();
        for s in generate_dataset(40, 5, true, TaskVariant::Mixed).unwrap() {
            let tr = forward(&m, &embed_scene(&s.clean_scene), &s.prompt_tokens).unwrap();
            let p = &tr
                .submodule(spec.detector.layer, Submodule::CrossAttn)
                .unwrap()
                .attention[spec.detector.head];
            let row = p.row(s.correct_text_pos());
            let mass: f64 = s.clean_scene.object_cells.iter().map(|&c| row[c]).sum();
            assert!(mass >= 0.9, "{mass}");
        }
    }

    #[test]
    fn rejects_small_or_inconsistent_configs() {
        let spec = PlantedSpec::default();
        let cfg = ModelConfig {
            d_model: 16,
            ..ModelConfig::default()
        };
        assert!(matches!(
            build_planted_model(&cfg, &spec),
            Err(Error::ConfigTooSmall(_))
        ));
        let cfg = ModelConfig {
            n_heads: 16,
            ..ModelConfig::default()
        };
        assert!(matches!(
            build_planted_model(&cfg, &spec),
            Err(Error::ConfigTooSmall(_))
        ));
        let dup = PlantedSpec {
            suppressor: spec.detector,
            ..spec.clone()
        };
        assert!(build_planted_model(&ModelConfig::default(), &dup).is_err());
        let late = PlantedSpec {
            detector: HeadSite::new(6, 0),
            ..spec
        };
        assert!(build_planted_model(&ModelConfig::default(), &late).is_err());
    }
}
