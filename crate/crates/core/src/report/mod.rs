// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, provenance stamps, the end-to-end pipeline and
//! SVG figures.

mod pipeline;
mod svg;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ClassifierThresholds;
use crate::cma::{Ablation, HeadTarget, MetricKind, SweepKind};
use crate::corruption::{CorruptionMode, CorruptionSpec};
use crate::error::{Error, Result};
use crate::model::{HeadSite, ModelConfig, PlantedSpec};
use crate::worldgen::TaskVariant;

pub use pipeline::{
    cmd_analyze, cmd_gen, cmd_knockout, cmd_plant, cmd_render, cmd_report, cmd_sweep, load_sweep,
    GenManifest, SweepOutput,
};
pub use svg::{render_bar_chart, render_heatmap};

/// Version tag stamped into every output file.
pub const SCHEMA_VERSION: &str = "notice-bench/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Samples per task variant.
    pub n: usize,
    pub balance: bool,
    pub tasks: Vec<TaskVariant>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 500,
            balance: true,
            tasks: TaskVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub target: HeadTarget,
    pub metric: MetricKind,
    pub corruptions: Vec<CorruptionSpec>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::Head,
            target: HeadTarget::Option,
            metric: MetricKind::LogitDifference,
            corruptions: vec![
                CorruptionSpec::new(CorruptionMode::Sip),
                CorruptionSpec::new(CorruptionMode::Str),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnockoutConfig {
    pub ablation: Ablation,
    /// Heads to ablate; every fusion head when absent.
    pub heads: Option<Vec<HeadSite>>,
}

impl Default for KnockoutConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Zero,
            heads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Bar is `mean + sigma_multiplier * std`.
    pub sigma_multiplier: f64,
    pub topk_fraction: f64,
    pub classifier: ClassifierThresholds,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sigma_multiplier: 2.0,
            topk_fraction: 0.01,
            classifier: ClassifierThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Palette {
    pub negative: String,
    pub zero: String,
    pub positive: String,
    pub bar: String,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            negative: "#2166ac".into(),
            zero: "#f7f7f7".into(),
            positive: "#b2182b".into(),
            bar: "#4d4d4d".into(),
        }
    }
}

impl Palette {
    pub fn validate(&self) -> Result<()> {
        for c in [&self.negative, &self.zero, &self.positive, &self.bar] {
            svg::parse_hex(c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Load weights from this file instead of planting them.
    pub model_path: Option<PathBuf>,
    pub planted: PlantedSpec,
    pub dataset: DatasetConfig,
    pub sweep: SweepConfig,
    pub knockout: KnockoutConfig,
    pub analysis: AnalysisConfig,
    /// Noise levels of the Gaussian baseline curve.
    pub noise_sigmas: Vec<f64>,
    pub palette: Palette,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            model_path: None,
            planted: PlantedSpec::default(),
            dataset: DatasetConfig::default(),
            sweep: SweepConfig::default(),
            knockout: KnockoutConfig::default(),
            analysis: AnalysisConfig::default(),
            noise_sigmas: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            palette: Palette::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model_path.is_none() {
            self.planted.validate(&self.model)?;
        }
        if self.dataset.n == 0 {
            return Err(Error::InvalidConfig("dataset.n must be positive".into()));
        }
        if self.dataset.tasks.is_empty() {
            return Err(Error::InvalidConfig("dataset.tasks is empty".into()));
        }
        if self.sweep.corruptions.is_empty() {
            return Err(Error::InvalidConfig("sweep.corruptions is empty".into()));
        }
        for c in &self.sweep.corruptions {
            c.validate()?;
        }
        for &s in &self.noise_sigmas {
            CorruptionSpec::gaussian(s).validate()?;
        }
        let a = &self.analysis;
        if !(a.sigma_multiplier.is_finite() && a.sigma_multiplier >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_multiplier {}",
                a.sigma_multiplier
            )));
        }
        if !(a.topk_fraction > 0.0 && a.topk_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "topk_fraction {} outside (0, 1]",
                a.topk_fraction
            )));
        }
        a.classifier.validate()?;
        self.palette.validate()
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Stamp identifying the configuration that produced an output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
        }
    }

    /// One-line form used in CSV and SVG comments.
    pub fn line(&self) -> String {
        format!(
            "schema_version={} config_hash={} seed={}",
            self.schema_version, self.config_hash, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_named() {
        let e = ExperimentConfig::from_json(r#"{"seed": 1, "bogus_field": 2}"#).unwrap_err();
        assert!(e.to_string().contains("bogus_field"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"dataset": {"size": 2}}"#).unwrap_err();
        assert!(e.to_string().contains("size"), "{e}");
    }

    #[test]
    fn defaults_round_trip_and_hash_ignores_out_dir() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let d = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c, d);
        let mut e = d.clone();
        e.out_dir = PathBuf::from("elsewhere");
        assert_eq!(c.hash(), e.hash());
        e.seed = 7;
        assert_ne!(c.hash(), e.hash());
        assert_eq!(c.hash().len(), 64);
    }

    fn check_schema(
        schema: &serde_json::Value,
        value: &serde_json::Value,
        root: &serde_json::Value,
        path: &str,
    ) {
        let schema = match schema.get("$ref").and_then(|r| r.as_str()) {
            Some(r) => &root["definitions"][r.rsplit('/').next().unwrap()],
            None => schema,
        };
        if let Some(d) = schema.get("default") {
            assert_eq!(d, value, "default of {path}");
        }
        if let Some(props) = schema.get("properties").and_then(|p| p.as_object()) {
            assert_eq!(
                schema["additionalProperties"], false,
                "{path} must be closed"
            );
            let obj = value
                .as_object()
                .unwrap_or_else(|| panic!("{path} is not an object"));
            let mut want: Vec<_> = props.keys().collect();
            let mut got: Vec<_> = obj.keys().collect();
            want.sort();
            got.sort();
            assert_eq!(want, got, "fields of {path}");
            for (k, sub) in props {
                check_schema(sub, &obj[k], root, &format!("{path}.{k}"));
            }
        }
    }

    #[test]
    fn published_schema_matches_defaults() {
        let schema: serde_json::Value =
            serde_json::from_str(include_str!("../../../../docs/config.schema.json")).unwrap();
        let value = serde_json::to_value(ExperimentConfig::default()).unwrap();
        check_schema(&schema, &value, &schema, "config");
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"analysis": {"topk_fraction": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r##"{"palette": {"zero": "#zzzzzz"}}"##).is_err());
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"noise_sigmas": [-1]}"#),
            Err(Error::NegativeSigma(_))
        ));
    }
}
