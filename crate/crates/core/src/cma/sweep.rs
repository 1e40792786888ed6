// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::error::{Error, Result};
use crate::model::{PatchSite, Submodule, VlmModel};
use crate::worldgen::VqaSample;

use super::{MetricKind, PreparedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Module,
    Head,
}

/// Token at which a head sweep patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTarget {
    /// The correct option word.
    Option,
    /// The final readout token.
    Readout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowAxis {
    TokenPos,
    Head,
}

/// One per-sample effect of one single-site patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub layer: usize,
    pub submodule: Submodule,
    pub head: Option<usize>,
    /// Text position (image tokens are not counted).
    pub token_pos: usize,
    pub sample_id: usize,
    pub metric: MetricKind,
    pub value: f64,
}

/// Mean effect per cell: rows are text positions or heads, columns layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMatrix {
    pub submodule: Submodule,
    pub metric: MetricKind,
    pub row_axis: RowAxis,
    pub n_rows: usize,
    pub n_layers: usize,
    /// `values[row][layer]`; cells without samples hold 0.
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

impl EffectMatrix {
    pub fn get(&self, row: usize, layer: usize) -> f64 {
        self.values[row][layer]
    }

    /// Cell with the largest `|value|`; the first in row-major order wins ties.
    pub fn argmax_abs(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (r, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| v.abs() > b) {
                    best = Some(((r, c), v.abs()));
                }
            }
        }
        best.map(|(rc, _)| rc)
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Means over records, reduced in `(row, layer, sample_id)` order.
    fn from_records(
        records: &[&SiteRecord],
        submodule: Submodule,
        metric: MetricKind,
        row_axis: RowAxis,
        n_rows: usize,
        n_layers: usize,
    ) -> Self {
        let mut sums = vec![vec![0.0; n_layers]; n_rows];
        let mut counts = vec![vec![0usize; n_layers]; n_rows];
        for r in records {
            let row = match row_axis {
                RowAxis::TokenPos => r.token_pos,
                RowAxis::Head => r.head.expect("head record"),
            };
            sums[row][r.layer] += r.value;
            counts[row][r.layer] += 1;
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                    .collect()
            })
            .collect();
        Self {
            submodule,
            metric,
            row_axis,
            n_rows,
            n_layers,
            values,
            counts,
        }
    }
}

/// Output of a sweep: one matrix per swept submodule and every per-sample
/// record behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub corruption: CorruptionSpec,
    pub metric: MetricKind,
    pub target: Option<HeadTarget>,
    pub n_samples: usize,
    /// Samples answered correctly on clean input and therefore swept.
    pub n_kept: usize,
    pub matrices: Vec<EffectMatrix>,
    #[serde(skip)]
    pub records: Vec<SiteRecord>,
}

impl SweepResult {
    pub fn matrix(&self, submodule: Submodule) -> Option<&EffectMatrix> {
        self.matrices.iter().find(|m| m.submodule == submodule)
    }
}

/// Runs `per_sample` over every clean-correct sample in parallel and
/// returns the records sorted by site and sample id, plus the kept count.
fn run<F>(
    model: &VlmModel,
    dataset: &[VqaSample],
    spec: &CorruptionSpec,
    seed: u64,
    per_sample: F,
) -> Result<(Vec<SiteRecord>, usize)>
where
    F: Fn(&PreparedSample) -> Result<Vec<SiteRecord>> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    spec.validate()?;
    let per: Vec<Option<Vec<SiteRecord>>> = dataset
        .par_iter()
        .map(|s| {
            let p = PreparedSample::new(model, s, spec, seed)?;
            if !p.clean_correct() {
                return Ok(None);
            }
            per_sample(&p).map(Some)
        })
        .collect::<Result<_>>()?;
    let kept = per.iter().filter(|r| r.is_some()).count();
    log::info!(
        "kept {kept} of {} samples answered correctly on clean input ({:.1}%)",
        dataset.len(),
        100.0 * kept as f64 / dataset.len() as f64
    );
    if kept == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut records: Vec<SiteRecord> = per.into_iter().flatten().flatten().collect();
    records.sort_by(|a, b| {
        (a.layer, a.submodule, a.head, a.token_pos, a.sample_id).cmp(&(
            b.layer,
            b.submodule,
            b.head,
            b.token_pos,
            b.sample_id,
        ))
    });
    Ok((records, kept))
}

/// Patches every `(layer, submodule, text position)` site on its own and
/// averages the metric per cell.
pub fn module_sweep(
    model: &VlmModel,
    dataset: &[VqaSample],
    spec: &CorruptionSpec,
    metric: MetricKind,
    seed: u64,
) -> Result<SweepResult> {
    let cfg = &model.config;
    let subs = cfg.arch.submodules();
    let (records, kept) = run(model, dataset, spec, seed, |p| {
        let offset = p.clean.text_offset;
        let mut out = Vec::new();
        for layer in 0..cfg.n_layers {
            for &sub in subs {
                for pos in 0..p.clean.text_len() {
                    let site = PatchSite::module(layer, sub, offset + pos);
                    out.push(SiteRecord {
                        layer,
                        submodule: sub,
                        head: None,
                        token_pos: pos,
                        sample_id: p.sample_id,
                        metric,
                        value: p.effect(model, &[site], metric)?,
                    });
                }
            }
        }
        Ok(out)
    })?;
    let matrices = subs
        .iter()
        .map(|&sub| {
            let rs: Vec<&SiteRecord> = records.iter().filter(|r| r.submodule == sub).collect();
            EffectMatrix::from_records(
                &rs,
                sub,
                metric,
                RowAxis::TokenPos,
                cfg.max_text_len,
                cfg.n_layers,
            )
        })
        .collect();
    Ok(SweepResult {
        kind: SweepKind::Module,
        corruption: spec.clone(),
        metric,
        target: None,
        n_samples: dataset.len(),
        n_kept: kept,
        matrices,
        records,
    })
}

/// Patches every head of the fusion submodule on its own at the target
/// token; the matrix is heads × layers.
pub fn head_sweep(
    model: &VlmModel,
    dataset: &[VqaSample],
    spec: &CorruptionSpec,
    metric: MetricKind,
    target: HeadTarget,
    seed: u64,
) -> Result<SweepResult> {
    let cfg = &model.config;
    let sub = cfg.arch.fusion_submodule();
    let (records, kept) = run(model, dataset, spec, seed, |p| {
        let pos = match target {
            HeadTarget::Option => p.correct_text_pos,
            HeadTarget::Readout => p.clean.text_len() - 1,
        };
        let seq_pos = p.clean.text_pos(pos);
        let mut out = Vec::with_capacity(cfg.n_heads_total());
        for layer in 0..cfg.n_layers {
            for head in 0..cfg.n_heads {
                let site = PatchSite::head(layer, sub, head, seq_pos);
                out.push(SiteRecord {
                    layer,
                    submodule: sub,
                    head: Some(head),
                    token_pos: pos,
                    sample_id: p.sample_id,
                    metric,
                    value: p.effect(model, &[site], metric)?,
                });
            }
        }
        Ok(out)
    })?;
    let rs: Vec<&SiteRecord> = records.iter().collect();
    let matrix =
        EffectMatrix::from_records(&rs, sub, metric, RowAxis::Head, cfg.n_heads, cfg.n_layers);
    Ok(SweepResult {
        kind: SweepKind::Head,
        corruption: spec.clone(),
        metric,
        target: Some(target),
        n_samples: dataset.len(),
        n_kept: kept,
        matrices: vec![matrix],
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::CorruptionMode;
    use crate::model::{build_planted_model, ModelConfig, PlantedSpec};
    use crate::worldgen::{generate_dataset, TaskVariant};

    fn planted() -> VlmModel {
        build_planted_model(&ModelConfig::default(), &PlantedSpec::default()).unwrap()
    }

    fn head_values(
        records: &[SiteRecord],
    ) -> std::collections::BTreeMap<(usize, usize), Vec<(usize, f64)>> {
        let mut out: std::collections::BTreeMap<(usize, usize), Vec<(usize, f64)>> =
            Default::default();
        for r in records {
            if let Some(h) = r.head {
                out.entry((r.layer, h))
                    .or_default()
                    .push((r.sample_id, r.value));
            }
        }
        out
    }

    #[test]
    fn null_corruption_gives_zero_matrices() {
        let m = planted();
        let data = generate_dataset(12, 3, true, TaskVariant::Mixed).unwrap();
        let null = CorruptionSpec::gaussian(0.0);
        let r = module_sweep(&m, &data, &null, MetricKind::LogitDifference, 0).unwrap();
        assert_eq!(r.matrices.len(), 3);
        for mat in &r.matrices {
            assert_eq!(mat.values.len(), 10);
            assert_eq!(mat.values[0].len(), 6);
            assert_eq!(mat.max_abs(), 0.0);
        }
    }

    #[test]
    fn cells_are_means_of_records() {
        let m = planted();
        let data = generate_dataset(8, 4, true, TaskVariant::Color).unwrap();
        let spec = CorruptionSpec::new(CorruptionMode::Sip);
        let r = head_sweep(
            &m,
            &data,
            &spec,
            MetricKind::LogitDifference,
            HeadTarget::Option,
            0,
        )
        .unwrap();
        let mat = &r.matrices[0];
        for ((layer, head), vals) in head_values(&r.records) {
            let mean = vals.iter().map(|v| v.1).sum::<f64>() / vals.len() as f64;
            assert_eq!(mat.get(head, layer), mean);
            assert_eq!(mat.counts[head][layer], r.n_kept);
        }
        assert_eq!(mat.argmax_abs(), Some((3, 2)));
    }

    #[test]
    fn sweeps_are_order_invariant() {
        let m = planted();
        let data = generate_dataset(8, 5, true, TaskVariant::Shape).unwrap();
        let mut rev = data.clone();
        rev.reverse();
        let spec = CorruptionSpec::new(CorruptionMode::Sip);
        let a = head_sweep(
            &m,
            &data,
            &spec,
            MetricKind::LogitDifference,
            HeadTarget::Option,
            0,
        )
        .unwrap();
        let b = head_sweep(
            &m,
            &rev,
            &spec,
            MetricKind::LogitDifference,
            HeadTarget::Option,
            0,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let m = planted();
        let spec = CorruptionSpec::new(CorruptionMode::Sip);
        assert!(matches!(
            module_sweep(&m, &[], &spec, MetricKind::LogitDifference, 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn zero_model_head_sweep_is_zero() {
        let m = VlmModel::zeros(&ModelConfig::default()).unwrap();
        let data = generate_dataset(12, 6, true, TaskVariant::Color).unwrap();
        let spec = CorruptionSpec::new(CorruptionMode::Sip);
        // Ties send every clean answer to the first option, so only the
        // samples whose correct option comes first survive the filter.
        let r = head_sweep(
            &m,
            &data,
            &spec,
            MetricKind::LogitDifference,
            HeadTarget::Readout,
            0,
        )
        .unwrap();
        assert_eq!(r.n_kept, 6);
        assert_eq!(r.matrices[0].max_abs(), 0.0);
    }
}
