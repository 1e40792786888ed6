// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal mediation engine: clean, corrupt and patched runs, the two
//! patching metrics, single-site sweeps and head knockout.

mod knockout;
mod noise;
mod records;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_pair, CorruptionSpec, InputPair};
use crate::error::{Error, Result};
use crate::model::{forward, forward_with_patches, ForwardTrace, PatchSite, VlmModel};
use crate::numerics::softmax_in_place;
use crate::vocab::TokenId;
use crate::worldgen::VqaSample;

pub use knockout::{knockout, Ablation, KnockoutResult};
pub use noise::{noise_curve, NoisePoint};
pub use records::{read_records_csv, write_records_csv, RECORDS_HEADER};
pub use sweep::{
    head_sweep, module_sweep, EffectMatrix, HeadTarget, RowAxis, SiteRecord, SweepKind, SweepResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RestorationProbability,
    LogitDifference,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RestorationProbability => "restoration_probability",
            Self::LogitDifference => "logit_difference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "restoration_probability" => Ok(Self::RestorationProbability),
            "logit_difference" => Ok(Self::LogitDifference),
            other => Err(Error::MetricUnknown(other.to_string())),
        }
    }
}

/// Clean, corrupt and patched traces of one sample and one site set.
#[derive(Debug, Clone, Copy)]
pub struct RunTriple<'a> {
    pub clean: &'a ForwardTrace,
    pub corrupt: &'a ForwardTrace,
    pub patched: &'a ForwardTrace,
}

/// Full-vocabulary softmax probability of `token` at the readout position.
pub fn readout_probability(trace: &ForwardTrace, token: TokenId) -> f64 {
    let mut p = trace.readout_logits().to_vec();
    softmax_in_place(&mut p);
    p[token as usize]
}

/// `L(a) - L(b)` at the readout position.
pub fn logit_gap(trace: &ForwardTrace, a: TokenId, b: TokenId) -> f64 {
    let l = trace.readout_logits();
    l[a as usize] - l[b as usize]
}

/// `P'(tau) - P*(tau)`.
pub fn restoration_probability(t: &RunTriple, tau: TokenId) -> f64 {
    readout_probability(t.patched, tau) - readout_probability(t.corrupt, tau)
}

/// `(L'(tau) - L'(inc)) - (L*(tau) - L*(inc))`.
pub fn logit_difference(t: &RunTriple, tau: TokenId, tau_inc: TokenId) -> f64 {
    logit_gap(t.patched, tau, tau_inc) - logit_gap(t.corrupt, tau, tau_inc)
}

pub fn metric_value(kind: MetricKind, t: &RunTriple, tau: TokenId, tau_inc: TokenId) -> f64 {
    match kind {
        MetricKind::RestorationProbability => restoration_probability(t, tau),
        MetricKind::LogitDifference => logit_difference(t, tau, tau_inc),
    }
}

/// Two-choice answer: the option with the larger readout logit; ties go to
/// the option that appears first in the prompt.
pub fn predict(trace: &ForwardTrace, first: TokenId, second: TokenId) -> TokenId {
    let l = trace.readout_logits();
    if l[second as usize] > l[first as usize] {
        second
    } else {
        first
    }
}

/// One sample with its clean and corrupt runs.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: usize,
    pub inputs: InputPair,
    pub clean: ForwardTrace,
    pub corrupt: ForwardTrace,
    pub tau: TokenId,
    pub tau_inc: TokenId,
    /// Text position of the correct option.
    pub correct_text_pos: usize,
}

impl PreparedSample {
    pub fn new(
        model: &VlmModel,
        sample: &VqaSample,
        spec: &CorruptionSpec,
        seed: u64,
    ) -> Result<Self> {
        let inputs = corrupt_pair(sample, spec, seed)?;
        let clean = forward(model, &inputs.clean_image, &inputs.clean_text)?;
        let corrupt = forward(model, &inputs.corrupt_image, &inputs.corrupt_text)?;
        Ok(Self {
            sample_id: sample.id,
            inputs,
            clean,
            corrupt,
            tau: sample.correct_token,
            tau_inc: sample.incorrect_token,
            correct_text_pos: sample.correct_text_pos(),
        })
    }

    /// Whether the clean run picks the correct option.
    pub fn clean_correct(&self) -> bool {
        let t = &self.inputs.clean_text;
        let (a, b) = (
            t[crate::vocab::FIRST_OPTION_POS],
            t[crate::vocab::SECOND_OPTION_POS],
        );
        predict(&self.clean, a, b) == self.tau
    }

    /// Corrupt run with `sites` patched from the clean run.
    pub fn patch(&self, model: &VlmModel, sites: &[PatchSite]) -> Result<ForwardTrace> {
        forward_with_patches(
            model,
            &self.inputs.corrupt_image,
            &self.inputs.corrupt_text,
            &self.clean,
            sites,
        )
    }

    pub fn effect(&self, model: &VlmModel, sites: &[PatchSite], metric: MetricKind) -> Result<f64> {
        let patched = self.patch(model, sites)?;
        Ok(self.metric(&patched, metric))
    }

    pub fn metric(&self, patched: &ForwardTrace, metric: MetricKind) -> f64 {
        let t = RunTriple {
            clean: &self.clean,
            corrupt: &self.corrupt,
            patched,
        };
        metric_value(metric, &t, self.tau, self.tau_inc)
    }
}
