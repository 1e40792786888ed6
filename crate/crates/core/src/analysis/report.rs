// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cma::SiteRecord;
use crate::error::{Error, Result};
use crate::model::HeadSite;

use super::{
    head_mean_abs, head_mrr, topk_overlap, universal_heads, Evidence, FunctionClass, HeadFunction,
    Setting, SettingThreshold, UnionLabel,
};

/// One head's numbers in one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingStat {
    pub setting: Setting,
    pub mean_abs: f64,
    pub z: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub settings: Vec<SettingStat>,
    pub label: UnionLabel,
    pub function: FunctionClass,
    pub evidence: Option<Evidence>,
}

/// Top-k MRR overlap between two settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub a: Setting,
    pub b: Setting,
    pub fraction: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub sigma_multiplier: f64,
    pub thresholds: Vec<SettingThreshold>,
    pub heads: Vec<HeadReport>,
    pub overlaps: Vec<Overlap>,
}

impl AnalysisReport {
    pub fn head(&self, site: HeadSite) -> Option<&HeadReport> {
        self.heads
            .iter()
            .find(|h| h.layer == site.layer && h.head == site.head)
    }
}

/// Builds one report row per head from head-sweep records of every setting.
pub fn head_reports(
    settings: &[(Setting, Vec<SiteRecord>)],
    sigma_multiplier: f64,
    topk_fraction: f64,
    functions: Option<&BTreeMap<HeadSite, HeadFunction>>,
) -> Result<AnalysisReport> {
    let means: Vec<_> = settings
        .iter()
        .map(|(s, r)| (*s, head_mean_abs(r)))
        .collect();
    let universal = universal_heads(&means, sigma_multiplier)?;
    let mrrs = settings
        .iter()
        .map(|(_, r)| head_mrr(r))
        .collect::<Result<Vec<_>>>()?;
    let mut heads = Vec::with_capacity(universal.labels.len());
    for (&site, &label) in &universal.labels {
        let z = &universal.z_scores[&site];
        let stats = means
            .iter()
            .zip(&mrrs)
            .zip(z)
            .map(|(((setting, m), mrr), &z)| {
                let mrr = *mrr.get(&site).ok_or_else(|| {
                    Error::UniverseMismatch(format!(
                        "{site} missing from ranks of {}",
                        setting.label()
                    ))
                })?;
                Ok(SettingStat {
                    setting: *setting,
                    mean_abs: m[&site],
                    z,
                    mrr,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = functions.and_then(|f| f.get(&site));
        heads.push(HeadReport {
            layer: site.layer,
            head: site.head,
            settings: stats,
            label,
            function: f.map_or(FunctionClass::Unclassified, |f| f.class),
            evidence: f.map(|f| f.evidence),
        });
    }
    let mut overlaps = Vec::new();
    for i in 0..settings.len() {
        for j in i + 1..settings.len() {
            overlaps.push(Overlap {
                a: settings[i].0,
                b: settings[j].0,
                fraction: topk_fraction,
                value: topk_overlap(&mrrs[i], &mrrs[j], topk_fraction)?,
            });
        }
    }
    Ok(AnalysisReport {
        sigma_multiplier,
        thresholds: universal.thresholds,
        heads,
        overlaps,
    })
}

/// Writes the head table as CSV with one column group per setting.
pub fn write_head_reports_csv(
    report: &AnalysisReport,
    comment: Option<&str>,
    mut w: impl Write,
) -> Result<()> {
    let mut header =
        String::from("layer,head,label,function,mass_obj,mass_outlier,mass_bg,entropy_non_outlier");
    for t in &report.thresholds {
        let l = t.setting.label();
        header.push_str(&format!(",mean_abs_{l},z_{l},mrr_{l}"));
    }
    let io = |e| Error::io("<head report>", e);
    if let Some(c) = comment {
        writeln!(w, "# {c}").map_err(io)?;
    }
    writeln!(w, "{header}").map_err(io)?;
    for h in &report.heads {
        let ev = h.evidence.map_or_else(
            || ",,,".to_string(),
            |e| {
                format!(
                    "{},{},{},{}",
                    e.mass_obj, e.mass_outlier, e.mass_bg, e.entropy_non_outlier
                )
            },
        );
        let mut line = format!(
            "{},{},{},{},{ev}",
            h.layer,
            h.head,
            h.label.as_str(),
            h.function.as_str()
        );
        for s in &h.settings {
            line.push_str(&format!(",{},{},{}", s.mean_abs, s.z, s.mrr));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}
