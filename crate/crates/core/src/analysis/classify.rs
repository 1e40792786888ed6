// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Arch, HeadSite, VlmModel};
use crate::worldgen::{embed_scene, VqaSample};

/// Decision thresholds of the attention-function classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierThresholds {
    /// Minimum absolute object mass for detection.
    pub detection_mass: f64,
    /// Minimum object mass as a multiple of the uniform baseline.
    pub detection_uniform_ratio: f64,
    /// Maximum object mass, as a multiple of the uniform baseline, for suppression.
    pub suppression_uniform_ratio: f64,
    /// Minimum outlier mass for suppression.
    pub suppression_outlier_mass: f64,
    /// Maximum outlier mass relative to the all-head average.
    pub outlier_ratio: f64,
    /// Minimum non-outlier entropy as a fraction of its maximum.
    pub entropy_fraction: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self {
            detection_mass: 0.5,
            detection_uniform_ratio: 3.0,
            suppression_uniform_ratio: 0.5,
            suppression_outlier_mass: 0.5,
            outlier_ratio: 0.5,
            entropy_fraction: 0.9,
        }
    }
}

impl ClassifierThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.detection_mass,
            self.detection_uniform_ratio,
            self.suppression_uniform_ratio,
            self.suppression_outlier_mass,
            self.outlier_ratio,
            self.entropy_fraction,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "classifier thresholds must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    ObjectDetection,
    ObjectSuppression,
    OutlierSuppression,
    Unclassified,
}

impl FunctionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ObjectDetection => "object_detection",
            Self::ObjectSuppression => "object_suppression",
            Self::OutlierSuppression => "outlier_suppression",
            Self::Unclassified => "unclassified",
        }
    }
}

/// Dataset-averaged attention masses of one head over image positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub mass_obj: f64,
    pub mass_outlier: f64,
    pub mass_bg: f64,
    /// Entropy (nats) of the attention restricted to non-outlier patches.
    pub entropy_non_outlier: f64,
    /// Largest possible value of `entropy_non_outlier`.
    pub entropy_max: f64,
    /// Object mass of uniform attention.
    pub uniform_obj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFunction {
    pub head: HeadSite,
    pub class: FunctionClass,
    pub evidence: Evidence,
}

fn sample_evidence(row: &[f64], sample: &VqaSample) -> Result<Evidence> {
    let scene = &sample.clean_scene;
    if scene.object_cells.is_empty() || scene.outlier_cells.is_empty() {
        return Err(Error::MissingGroundTruth(format!(
            "sample {} lacks object or outlier cells",
            sample.id
        )));
    }
    if let Some(&c) = scene
        .object_cells
        .iter()
        .chain(&scene.outlier_cells)
        .find(|&&c| c >= row.len())
    {
        return Err(Error::MissingGroundTruth(format!(
            "sample {} names cell {c} outside the image",
            sample.id
        )));
    }
    let total: f64 = row.iter().sum();
    let p: Vec<f64> = row.iter().map(|v| v / total).collect();
    let mass_obj: f64 = scene.object_cells.iter().map(|&c| p[c]).sum();
    let mass_outlier: f64 = scene.outlier_cells.iter().map(|&c| p[c]).sum();
    let non_outlier: Vec<f64> = (0..p.len())
        .filter(|c| !scene.outlier_cells.contains(c))
        .map(|c| p[c])
        .collect();
    let z: f64 = non_outlier.iter().sum();
    let entropy = if z > 0.0 {
        -non_outlier
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| (q / z) * (q / z).ln())
            .sum::<f64>()
    } else {
        0.0
    };
    Ok(Evidence {
        mass_obj,
        mass_outlier,
        mass_bg: 1.0 - mass_obj - mass_outlier,
        entropy_non_outlier: entropy,
        entropy_max: (non_outlier.len() as f64).ln(),
        uniform_obj: scene.object_cells.len() as f64 / p.len() as f64,
    })
}

/// Evidence of every head of the fusion submodule, per sample.
fn all_head_evidence(model: &VlmModel, sample: &VqaSample) -> Result<Vec<Evidence>> {
    let image = embed_scene(&sample.clean_scene);
    let trace = forward(model, &image, &sample.prompt_tokens)?;
    let arch = model.config.arch;
    let n_patches = image.n_patches();
    let (query, keys) = match arch {
        Arch::CrossAttnFusion => (trace.text_pos(sample.correct_text_pos()), 0..n_patches),
        Arch::EarlyFusion => (trace.readout_pos(), 0..n_patches),
    };
    let mut out = Vec::with_capacity(model.config.n_layers * model.config.n_heads);
    for layer in 0..model.config.n_layers {
        let sub = trace
            .submodule(layer, arch.fusion_submodule())
            .ok_or_else(|| Error::SiteOutOfRange(format!("layer {layer}")))?;
        for pattern in &sub.attention {
            out.push(sample_evidence(&pattern.row(query)[keys.clone()], sample)?);
        }
    }
    Ok(out)
}

fn decide(e: &Evidence, average_outlier: f64, t: &ClassifierThresholds) -> FunctionClass {
    if e.mass_obj >= t.detection_mass && e.mass_obj >= t.detection_uniform_ratio * e.uniform_obj {
        FunctionClass::ObjectDetection
    } else if e.mass_obj <= t.suppression_uniform_ratio * e.uniform_obj
        && e.mass_outlier >= t.suppression_outlier_mass
    {
        FunctionClass::ObjectSuppression
    } else if e.mass_outlier <= t.outlier_ratio * average_outlier
        && e.entropy_non_outlier >= t.entropy_fraction * e.entropy_max
    {
        FunctionClass::OutlierSuppression
    } else {
        FunctionClass::Unclassified
    }
}

/// Classifies every head of the fusion attention submodule. The query row
/// is the correct option token for cross-attention fusion and the readout
/// token, restricted to image positions, for early fusion.
pub fn classify_heads(
    model: &VlmModel,
    dataset: &[VqaSample],
    thresholds: &ClassifierThresholds,
) -> Result<BTreeMap<HeadSite, HeadFunction>> {
    thresholds.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_sample: Vec<Vec<Evidence>> = dataset
        .par_iter()
        .map(|s| all_head_evidence(model, s))
        .collect::<Result<_>>()?;
    let n_heads = model.config.n_heads;
    let n = dataset.len() as f64;
    let mut mean = vec![
        Evidence {
            mass_obj: 0.0,
            mass_outlier: 0.0,
            mass_bg: 0.0,
            entropy_non_outlier: 0.0,
            entropy_max: 0.0,
            uniform_obj: 0.0,
        };
        per_sample[0].len()
    ];
    for sample in &per_sample {
        for (m, e) in mean.iter_mut().zip(sample) {
            m.mass_obj += e.mass_obj / n;
            m.mass_outlier += e.mass_outlier / n;
            m.mass_bg += e.mass_bg / n;
            m.entropy_non_outlier += e.entropy_non_outlier / n;
            m.entropy_max += e.entropy_max / n;
            m.uniform_obj += e.uniform_obj / n;
        }
    }
    let average_outlier = mean.iter().map(|e| e.mass_outlier).sum::<f64>() / mean.len() as f64;
    Ok(mean
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let head = HeadSite::new(i / n_heads, i % n_heads);
            let class = decide(e, average_outlier, thresholds);
            (
                head,
                HeadFunction {
                    head,
                    class,
                    evidence: *e,
                },
            )
        })
        .collect())
}

/// Classifies one head; see [`classify_heads`].
pub fn classify_head_function(
    model: &VlmModel,
    dataset: &[VqaSample],
    head: HeadSite,
    thresholds: &ClassifierThresholds,
) -> Result<HeadFunction> {
    if head.layer >= model.config.n_layers || head.head >= model.config.n_heads {
        return Err(Error::SiteOutOfRange(format!("{head}")));
    }
    let mut all = classify_heads(model, dataset, thresholds)?;
    Ok(all.remove(&head).expect("head in range"))
}
