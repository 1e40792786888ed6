// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head-level analysis of sweep records: universal heads, mean reciprocal
//! rank, top-k overlap and attention-function classes.

mod classify;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cma::SiteRecord;
use crate::corruption::Modality;
use crate::error::{Error, Result};
use crate::model::HeadSite;
use crate::worldgen::TaskVariant;

pub use classify::{
    classify_head_function, classify_heads, ClassifierThresholds, Evidence, FunctionClass,
    HeadFunction,
};
pub use report::{
    head_reports, write_head_reports_csv, AnalysisReport, HeadReport, Overlap, SettingStat,
};

/// One (task, corruption modality) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Setting {
    pub task: TaskVariant,
    pub modality: Modality,
}

impl Setting {
    pub fn label(&self) -> String {
        let m = match self.modality {
            Modality::Image => "image",
            Modality::Text => "text",
        };
        format!("{}_{m}", self.task.as_str())
    }
}

/// Per-head summary value in one setting.
pub type HeadValues = BTreeMap<HeadSite, f64>;

/// Mean `|value|` per head over a head sweep's records.
pub fn head_mean_abs(records: &[SiteRecord]) -> HeadValues {
    let mut acc: BTreeMap<HeadSite, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(h) = r.head {
            let e = acc.entry(HeadSite::new(r.layer, h)).or_insert((0.0, 0));
            e.0 += r.value.abs();
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionLabel {
    Multimodal,
    VisionOnly,
    TextOnly,
    None,
}

impl UnionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Multimodal => "multimodal",
            Self::VisionOnly => "vision_only",
            Self::TextOnly => "text_only",
            Self::None => "none",
        }
    }
}

/// Selection bar of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingThreshold {
    pub setting: Setting,
    pub mean: f64,
    /// Population standard deviation over heads.
    pub std: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalHeads {
    pub thresholds: Vec<SettingThreshold>,
    /// Label of every head in the universe.
    pub labels: BTreeMap<HeadSite, UnionLabel>,
    /// `(value - mean) / std` per head, in the order of `thresholds`.
    pub z_scores: BTreeMap<HeadSite, Vec<f64>>,
}

impl UniversalHeads {
    pub fn with_label(&self, label: UnionLabel) -> Vec<HeadSite> {
        self.labels
            .iter()
            .filter(|(_, &l)| l == label)
            .map(|(&h, _)| h)
            .collect()
    }
}

fn same_universe<'a>(
    maps: impl IntoIterator<Item = (String, &'a HeadValues)>,
) -> Result<BTreeSet<HeadSite>> {
    let mut universe: Option<(String, BTreeSet<HeadSite>)> = None;
    for (name, m) in maps {
        let keys: BTreeSet<HeadSite> = m.keys().copied().collect();
        match &universe {
            None => universe = Some((name, keys)),
            Some((first, u)) if *u != keys => {
                return Err(Error::UniverseMismatch(format!(
                    "`{first}` has {} heads, `{name}` has {}",
                    u.len(),
                    keys.len()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(universe.map(|u| u.1).unwrap_or_default())
}

/// Flags heads whose value reaches `mean + k·std` in every setting.
/// Clearing the bar in every setting of both modalities gives
/// `multimodal`; clearing it in every task of one modality only gives
/// `vision_only` or `text_only`.
pub fn universal_heads(settings: &[(Setting, HeadValues)], k: f64) -> Result<UniversalHeads> {
    if settings.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 settings, got {}",
            settings.len()
        )));
    }
    let universe = same_universe(settings.iter().map(|(s, v)| (s.label(), v)))?;
    if universe.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 heads, got {}",
            universe.len()
        )));
    }
    let mut thresholds = Vec::with_capacity(settings.len());
    for (setting, values) in settings {
        let n = values.len() as f64;
        let mean = values.values().sum::<f64>() / n;
        let std = (values
            .values()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        if std == 0.0 {
            return Err(Error::DegenerateStd(setting.label()));
        }
        thresholds.push(SettingThreshold {
            setting: *setting,
            mean,
            std,
            threshold: mean + k * std,
        });
    }
    let modalities: BTreeSet<Modality> = settings.iter().map(|(s, _)| s.modality).collect();
    let mut labels = BTreeMap::new();
    let mut z_scores = BTreeMap::new();
    for &h in &universe {
        let mut cleared_by_modality: BTreeMap<Modality, bool> =
            modalities.iter().map(|&m| (m, true)).collect();
        let mut z = Vec::with_capacity(settings.len());
        for ((setting, values), t) in settings.iter().zip(&thresholds) {
            let v = values[&h];
            z.push((v - t.mean) / t.std);
            if v < t.threshold {
                cleared_by_modality.insert(setting.modality, false);
            }
        }
        let image = cleared_by_modality.get(&Modality::Image).copied();
        let text = cleared_by_modality.get(&Modality::Text).copied();
        let label = match (image, text) {
            (Some(true), Some(true)) => UnionLabel::Multimodal,
            (Some(true), _) => UnionLabel::VisionOnly,
            (_, Some(true)) => UnionLabel::TextOnly,
            _ => UnionLabel::None,
        };
        labels.insert(h, label);
        z_scores.insert(h, z);
    }
    Ok(UniversalHeads {
        thresholds,
        labels,
        z_scores,
    })
}

/// Mean reciprocal rank per head. In every sample heads are ranked by
/// `|value|` descending, ties broken by ascending `(layer, head)`.
pub fn head_mrr(records: &[SiteRecord]) -> Result<HeadValues> {
    let mut by_sample: BTreeMap<usize, Vec<(HeadSite, f64)>> = BTreeMap::new();
    for r in records {
        if let Some(h) = r.head {
            by_sample
                .entry(r.sample_id)
                .or_default()
                .push((HeadSite::new(r.layer, h), r.value.abs()));
        }
    }
    if by_sample.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums: HeadValues = BTreeMap::new();
    for heads in by_sample.values_mut() {
        heads.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (rank, (h, _)) in heads.iter().enumerate() {
            *sums.entry(*h).or_insert(0.0) += 1.0 / (rank + 1) as f64;
        }
    }
    let n = by_sample.len() as f64;
    Ok(sums.into_iter().map(|(h, s)| (h, s / n)).collect())
}

/// Heads sorted by value descending, ties by ascending `(layer, head)`.
pub fn ranked(values: &HeadValues) -> Vec<HeadSite> {
    let mut v: Vec<(HeadSite, f64)> = values.iter().map(|(&h, &x)| (h, x)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(h, _)| h).collect()
}

/// `|top_k(a) ∩ top_k(b)| / k` with `k = max(1, floor(fraction·n))`.
pub fn topk_overlap(a: &HeadValues, b: &HeadValues, fraction: f64) -> Result<f64> {
    let universe = same_universe([("a".to_string(), a), ("b".to_string(), b)])?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "top-k fraction {fraction} outside (0, 1]"
        )));
    }
    if universe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = ((fraction * universe.len() as f64).floor() as usize).max(1);
    let ta: BTreeSet<HeadSite> = ranked(a).into_iter().take(k).collect();
    let tb: BTreeSet<HeadSite> = ranked(b).into_iter().take(k).collect();
    Ok(ta.intersection(&tb).count() as f64 / k as f64)
}
