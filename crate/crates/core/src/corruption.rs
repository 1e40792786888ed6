// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corruption schemes: symmetric token replacement (STR) for text, semantic
//! image pairs (SIP) for images, and additive Gaussian noise on patch
//! embeddings as the baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::vocab::{self, TokenId};
use crate::worldgen::{embed_scene, PatchEmbeddings, VqaSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptionMode {
    #[serde(rename = "str")]
    Str,
    #[serde(rename = "sip")]
    Sip,
    #[serde(rename = "gaussian_noise")]
    GaussianNoise,
}

impl CorruptionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Str => "str",
            Self::Sip => "sip",
            Self::GaussianNoise => "gaussian_noise",
        }
    }

    /// Which input the mode corrupts.
    pub fn modality(self) -> Modality {
        match self {
            Self::Str => Modality::Text,
            Self::Sip | Self::GaussianNoise => Modality::Image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

fn default_sigma() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    /// Noise standard deviation; only read in Gaussian mode.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// RNG stream id for noise draws.
    #[serde(default)]
    pub stream: u64,
}

impl CorruptionSpec {
    pub fn new(mode: CorruptionMode) -> Self {
        Self {
            mode,
            sigma: default_sigma(),
            stream: 0,
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            mode: CorruptionMode::GaussianNoise,
            sigma,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma {} is not finite",
                self.sigma
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::NegativeSigma(self.sigma));
        }
        Ok(())
    }

    /// Short label such as `sip` or `gaussian_noise_s3`.
    pub fn label(&self) -> String {
        match self.mode {
            CorruptionMode::GaussianNoise => format!("gaussian_noise_s{}", self.sigma),
            m => m.as_str().to_string(),
        }
    }
}

/// Replaces both option tokens with the option pair of another sample that
/// shares neither option. Donors are drawn uniformly among eligible samples
/// of the same attribute kind.
pub fn corrupt_text(sample: &VqaSample, pool: &[VqaSample], rng: &mut Rng) -> Result<Vec<TokenId>> {
    let own = [sample.correct_token, sample.incorrect_token];
    let eligible: Vec<&VqaSample> = pool
        .iter()
        .filter(|d| d.varied_attribute == sample.varied_attribute)
        .filter(|d| {
            let (a, b) = d.options();
            !own.contains(&a) && !own.contains(&b)
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoCandidate(sample.id));
    }
    let donor = eligible[rng.below(eligible.len())];
    let (a, b) = donor.options();
    let mut out = sample.prompt_tokens.clone();
    out[vocab::FIRST_OPTION_POS] = a;
    out[vocab::SECOND_OPTION_POS] = b;
    Ok(out)
}

/// Embedding of the sample's paired image.
pub fn corrupt_image(sample: &VqaSample) -> PatchEmbeddings {
    embed_scene(&sample.corrupt_scene)
}

/// Adds i.i.d. `N(0, sigma²)` noise to every element.
pub fn corrupt_image_gaussian(
    emb: &PatchEmbeddings,
    sigma: f64,
    rng: &mut Rng,
) -> Result<PatchEmbeddings> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma {sigma} is not finite")));
    }
    if sigma == 0.0 {
        return Ok(emb.clone());
    }
    let data = emb
        .0
        .data()
        .iter()
        .map(|x| x + sigma * rng.normal())
        .collect();
    Ok(PatchEmbeddings(Tensor::new(emb.0.shape().to_vec(), data)?))
}

/// Clean and corrupt inputs for one sample.
#[derive(Debug, Clone)]
pub struct InputPair {
    pub clean_image: PatchEmbeddings,
    pub clean_text: Vec<TokenId>,
    pub corrupt_image: PatchEmbeddings,
    pub corrupt_text: Vec<TokenId>,
}

/// Noise stream for sample `id` under `spec`; the same underlying normal
/// draws are reused across sigma values.
pub fn noise_rng(seed: u64, spec: &CorruptionSpec, id: usize) -> Rng {
    Rng::with_stream(
        seed ^ spec.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        id as u64,
    )
}

/// Builds the clean/corrupt input pair of `sample`. Only one modality is
/// corrupted at a time.
pub fn corrupt_pair(sample: &VqaSample, spec: &CorruptionSpec, seed: u64) -> Result<InputPair> {
    spec.validate()?;
    let clean_image = embed_scene(&sample.clean_scene);
    let clean_text = sample.prompt_tokens.clone();
    let (corrupt_image, corrupt_text) = match spec.mode {
        CorruptionMode::Str => (clean_image.clone(), sample.corrupted_prompt_tokens.clone()),
        CorruptionMode::Sip => (corrupt_image(sample), clean_text.clone()),
        CorruptionMode::GaussianNoise => {
            let mut rng = noise_rng(seed, spec, sample.id);
            (
                corrupt_image_gaussian(&clean_image, spec.sigma, &mut rng)?,
                clean_text.clone(),
            )
        }
    };
    Ok(InputPair {
        clean_image,
        clean_text,
        corrupt_image,
        corrupt_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Attribute;
    use crate::worldgen::{generate_dataset, TaskVariant};

    #[test]
    fn str_substitutes_donor_pair() {
        let data = generate_dataset(40, 3, true, TaskVariant::Color).unwrap();
        let mut sample = data[0].clone();
        sample.prompt_tokens = vocab::prompt(Attribute::color(0), Attribute::color(2));
        sample.correct_token = Attribute::color(0).token();
        sample.incorrect_token = Attribute::color(2).token();
        let mut donor = data[1].clone();
        donor.prompt_tokens = vocab::prompt(Attribute::color(4), Attribute::color(7));
        let out = corrupt_text(&sample, &[donor], &mut Rng::new(0)).unwrap();
        assert_eq!(
            vocab::render(&out),
            "is this a green or ochre thing ? <READOUT>"
        );
    }

    #[test]
    fn str_without_candidate_fails() {
        let data = generate_dataset(4, 3, true, TaskVariant::Color).unwrap();
        let mut sample = data[0].clone();
        sample.prompt_tokens = vocab::prompt(Attribute::color(0), Attribute::color(2));
        sample.correct_token = Attribute::color(0).token();
        sample.incorrect_token = Attribute::color(2).token();
        let mut donor = data[1].clone();
        donor.prompt_tokens = vocab::prompt(Attribute::color(2), Attribute::color(5));
        let err = corrupt_text(&sample, &[donor], &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::NoCandidate(_)));
    }

    #[test]
    fn str_keeps_length_and_other_tokens() {
        let data = generate_dataset(100, 5, true, TaskVariant::Mixed).unwrap();
        for s in &data {
            assert_eq!(s.prompt_tokens.len(), s.corrupted_prompt_tokens.len());
            for (i, (a, b)) in s
                .prompt_tokens
                .iter()
                .zip(&s.corrupted_prompt_tokens)
                .enumerate()
            {
                if i != vocab::FIRST_OPTION_POS && i != vocab::SECOND_OPTION_POS {
                    assert_eq!(a, b);
                } else {
                    assert_ne!(*b, s.correct_token);
                    assert_ne!(*b, s.incorrect_token);
                }
            }
        }
    }

    #[test]
    fn gaussian_zero_sigma_is_identity() {
        let data = generate_dataset(2, 5, true, TaskVariant::Color).unwrap();
        let e = embed_scene(&data[0].clean_scene);
        let out = corrupt_image_gaussian(&e, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(out, e);
        assert!(matches!(
            corrupt_image_gaussian(&e, -1.0, &mut Rng::new(1)),
            Err(Error::NegativeSigma(_))
        ));
    }

    #[test]
    fn gaussian_moments() {
        let data = generate_dataset(2, 5, true, TaskVariant::Color).unwrap();
        let e = embed_scene(&data[0].clean_scene);
        let out = corrupt_image_gaussian(&e, 3.0, &mut Rng::new(12)).unwrap();
        let diffs: Vec<f64> = out
            .0
            .data()
            .iter()
            .zip(e.0.data())
            .map(|(a, b)| a - b)
            .collect();
        let n = diffs.len() as f64;
        assert_eq!(diffs.len(), 16 * 32);
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * 3.0 / n.sqrt(), "mean {mean}");
        assert!((std - 3.0).abs() <= 0.05 * 3.0, "std {std}");

        let again = corrupt_image_gaussian(&e, 3.0, &mut Rng::new(12)).unwrap();
        assert_eq!(out, again);
    }
}
