// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::error::{Error, Result};
use crate::model::VlmModel;
use crate::worldgen::VqaSample;

use super::{logit_gap, predict, PreparedSample};

/// Effect of Gaussian patch noise at one sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    /// Mean over samples of `|L(tau, inc) - L*(tau, inc)|`, the logit
    /// difference of restoring every site.
    pub mean_abs_logit_difference: f64,
    /// Two-choice accuracy of the corrupt runs.
    pub corrupt_accuracy: f64,
    pub n_samples: usize,
}

/// Noise-strength curve over `sigmas`. Every sigma reuses the same normal
/// draws per sample, so the curve is a deterministic function of `seed`.
pub fn noise_curve(
    model: &VlmModel,
    dataset: &[VqaSample],
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<NoisePoint>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let spec = CorruptionSpec::gaussian(sigma);
            let per = dataset
                .par_iter()
                .map(|s| {
                    let p = PreparedSample::new(model, s, &spec, seed)?;
                    let ld = logit_gap(&p.clean, p.tau, p.tau_inc)
                        - logit_gap(&p.corrupt, p.tau, p.tau_inc);
                    let t = &p.inputs.corrupt_text;
                    let hit = predict(
                        &p.corrupt,
                        t[crate::vocab::FIRST_OPTION_POS],
                        t[crate::vocab::SECOND_OPTION_POS],
                    ) == p.tau;
                    Ok((ld.abs(), hit))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = per.len() as f64;
            Ok(NoisePoint {
                sigma,
                mean_abs_logit_difference: per.iter().map(|x| x.0).sum::<f64>() / n,
                corrupt_accuracy: per.iter().filter(|x| x.1).count() as f64 / n,
                n_samples: per.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_planted_model, ModelConfig, PlantedSpec};
    use crate::worldgen::{generate_dataset, TaskVariant};

    #[test]
    fn zero_sigma_has_no_effect_and_noise_grows() {
        let m = build_planted_model(&ModelConfig::default(), &PlantedSpec::default()).unwrap();
        let data = generate_dataset(40, 1, true, TaskVariant::Mixed).unwrap();
        let c = noise_curve(&m, &data, &[0.0, 1.0, 4.0], 3).unwrap();
        assert_eq!(c[0].mean_abs_logit_difference, 0.0);
        assert_eq!(c[0].corrupt_accuracy, 1.0);
        assert!(c[1].mean_abs_logit_difference > 0.0);
        assert!(c[2].mean_abs_logit_difference >= c[1].mean_abs_logit_difference);
    }
}
