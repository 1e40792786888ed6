// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic micro-VQA world: 4×4 patch grids holding one 2×2 object plus
//! outlier patches, two-choice prompts, and image pairs that differ in
//! exactly one attribute.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruption;
use crate::error::{Error, Result};
use crate::layout;
use crate::numerics::{Rng, Tensor};
use crate::vocab::{self, Attribute, AttributeKind, TokenId, N_GROUPS, N_VALUES};

pub const GRID_SIDE: usize = 4;
pub const N_PATCHES: usize = GRID_SIDE * GRID_SIDE;
pub const OBJECT_SIDE: usize = 2;
pub const N_OUTLIERS: usize = 2;

pub const DATASET_SCHEMA: &str = "notice-bench/dataset/v1";

/// One synthetic image, described by its attributes rather than pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SceneRecord", into = "SceneRecord")]
pub struct Scene {
    pub shape: u8,
    pub color: u8,
    pub object_cells: BTreeSet<usize>,
    pub outlier_cells: BTreeSet<usize>,
    pub background_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    shape: String,
    color: String,
    object_cells: Vec<usize>,
    outlier_cells: Vec<usize>,
    background_seed: u64,
}

impl From<Scene> for SceneRecord {
    fn from(s: Scene) -> Self {
        Self {
            shape: vocab::SHAPE_NAMES[s.shape as usize].to_string(),
            color: vocab::COLOR_NAMES[s.color as usize].to_string(),
            object_cells: s.object_cells.into_iter().collect(),
            outlier_cells: s.outlier_cells.into_iter().collect(),
            background_seed: s.background_seed,
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = String;

    fn try_from(r: SceneRecord) -> std::result::Result<Self, String> {
        let find = |names: &[&str], n: &str| {
            names
                .iter()
                .position(|x| *x == n)
                .map(|p| p as u8)
                .ok_or_else(|| format!("unknown attribute `{n}`"))
        };
        let scene = Scene {
            shape: find(&vocab::SHAPE_NAMES, &r.shape)?,
            color: find(&vocab::COLOR_NAMES, &r.color)?,
            object_cells: r.object_cells.into_iter().collect(),
            outlier_cells: r.outlier_cells.into_iter().collect(),
            background_seed: r.background_seed,
        };
        scene.validate().map_err(|e| e.to_string())?;
        Ok(scene)
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("invalid scene: {m}")));
        if self.object_cells.is_empty() || self.outlier_cells.is_empty() {
            return bad("empty cell set");
        }
        if !self.object_cells.is_disjoint(&self.outlier_cells) {
            return bad("object and outlier cells overlap");
        }
        if self
            .object_cells
            .iter()
            .chain(&self.outlier_cells)
            .any(|&c| c >= N_PATCHES)
        {
            return bad("cell index outside the grid");
        }
        if self.shape as usize >= N_VALUES || self.color as usize >= N_VALUES {
            return bad("attribute outside the vocabulary");
        }
        Ok(())
    }

    pub fn attribute(&self, kind: AttributeKind) -> Attribute {
        match kind {
            AttributeKind::Shape => Attribute::shape(self.shape),
            AttributeKind::Color => Attribute::color(self.color),
        }
    }

    /// Copy of this scene with one attribute replaced.
    pub fn with_attribute(&self, a: Attribute) -> Scene {
        let mut s = self.clone();
        match a.kind {
            AttributeKind::Shape => s.shape = a.value,
            AttributeKind::Color => s.color = a.value,
        }
        s
    }

    pub fn background_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..N_PATCHES).filter(|c| !self.object_cells.contains(c) && !self.outlier_cells.contains(c))
    }
}

/// Patch feature matrix (`N_PATCHES × FEATURE_DIM`), the frozen-encoder
/// output the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings(pub Tensor);

impl PatchEmbeddings {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn n_patches(&self) -> usize {
        self.0.rows()
    }
}

/// Deterministic feature layout of a scene; see [`crate::layout`].
pub fn embed_scene(scene: &Scene) -> PatchEmbeddings {
    let mut t = Tensor::zeros(&[N_PATCHES, layout::FEATURE_DIM]);
    for &c in &scene.object_cells {
        t.set(c, layout::SHAPE_DIMS.start + scene.shape as usize, 1.0);
        t.set(c, layout::COLOR_DIMS.start + scene.color as usize, 1.0);
    }
    for &c in &scene.outlier_cells {
        for d in layout::OUTLIER_DIMS {
            t.set(c, d, layout::OUTLIER_VALUE);
        }
    }
    let mut rng = Rng::new(scene.background_seed);
    for c in scene.background_cells().collect::<Vec<_>>() {
        for d in layout::SCRATCH_DIMS {
            let u = rng.uniform() * 2.0 - 1.0;
            t.set(c, d, u * layout::BACKGROUND_NOISE);
        }
    }
    PatchEmbeddings(t)
}

/// Which attribute the generated samples vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVariant {
    Color,
    Shape,
    Mixed,
}

impl TaskVariant {
    pub const ALL: [TaskVariant; 3] = [TaskVariant::Color, TaskVariant::Shape, TaskVariant::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Color => "color",
            Self::Shape => "shape",
            Self::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionPosition {
    BeforeOr,
    AfterOr,
}

/// A clean/corrupt pair of images and prompts around one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: usize,
    pub task: TaskVariant,
    pub clean_scene: Scene,
    pub corrupt_scene: Scene,
    pub prompt_tokens: Vec<TokenId>,
    pub corrupted_prompt_tokens: Vec<TokenId>,
    pub correct_token: TokenId,
    pub incorrect_token: TokenId,
    pub varied_attribute: AttributeKind,
    pub correct_position: OptionPosition,
}

impl VqaSample {
    /// Text position of the correct option.
    pub fn correct_text_pos(&self) -> usize {
        match self.correct_position {
            OptionPosition::BeforeOr => vocab::FIRST_OPTION_POS,
            OptionPosition::AfterOr => vocab::SECOND_OPTION_POS,
        }
    }

    /// Option tokens as they appear in the prompt, first then second.
    pub fn options(&self) -> (TokenId, TokenId) {
        (
            self.prompt_tokens[vocab::FIRST_OPTION_POS],
            self.prompt_tokens[vocab::SECOND_OPTION_POS],
        )
    }

    pub fn readout_text_pos(&self) -> usize {
        self.prompt_tokens.len() - 1
    }

    /// Scenes differ only in the varied attribute.
    pub fn validate(&self) -> Result<()> {
        self.clean_scene.validate()?;
        self.corrupt_scene.validate()?;
        let varied = self.varied_attribute;
        let other = match varied {
            AttributeKind::Shape => AttributeKind::Color,
            AttributeKind::Color => AttributeKind::Shape,
        };
        let ok = self.clean_scene.attribute(varied) != self.corrupt_scene.attribute(varied)
            && self.clean_scene.attribute(other) == self.corrupt_scene.attribute(other)
            && self.clean_scene.object_cells == self.corrupt_scene.object_cells
            && self.clean_scene.outlier_cells == self.corrupt_scene.outlier_cells
            && self.clean_scene.background_seed == self.corrupt_scene.background_seed;
        if !ok || self.correct_token == self.incorrect_token {
            return Err(Error::Data(format!(
                "sample {} is not a one-attribute pair",
                self.id
            )));
        }
        if !self.prompt_tokens.contains(&vocab::OR) {
            return Err(Error::Data(format!("sample {} prompt lacks `or`", self.id)));
        }
        Ok(())
    }
}

fn random_scene(rng: &mut Rng) -> Scene {
    let r = rng.below(GRID_SIDE - OBJECT_SIDE + 1);
    let c = rng.below(GRID_SIDE - OBJECT_SIDE + 1);
    let object_cells: BTreeSet<usize> = (0..OBJECT_SIDE)
        .flat_map(|dr| (0..OBJECT_SIDE).map(move |dc| (r + dr) * GRID_SIDE + c + dc))
        .collect();
    let mut free: Vec<usize> = (0..N_PATCHES)
        .filter(|i| !object_cells.contains(i))
        .collect();
    rng.shuffle(&mut free);
    let outlier_cells = free[..N_OUTLIERS].iter().copied().collect();
    Scene {
        shape: rng.below(N_VALUES) as u8,
        color: rng.below(N_VALUES) as u8,
        object_cells,
        outlier_cells,
        background_seed: rng.next_u64(),
    }
}

/// Distractor of the same kind drawn from a different group.
fn draw_distractor(correct: Attribute, rng: &mut Rng) -> Result<Attribute> {
    let pool: Vec<u8> = (0..N_VALUES as u8)
        .filter(|&v| v as usize / 2 != correct.group())
        .collect();
    if pool.is_empty() || N_GROUPS < 2 {
        return Err(Error::VocabExhausted(format!(
            "no {} outside group {}",
            correct.kind.as_str(),
            correct.group()
        )));
    }
    let v = pool[rng.below(pool.len())];
    Ok(Attribute {
        kind: correct.kind,
        value: v,
    })
}

/// Generates `n` samples for `task`. Sample `i` draws from stream `i` of
/// `seed`, so generation is reproducible and order-independent.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    balance: bool,
    task: TaskVariant,
) -> Result<Vec<VqaSample>> {
    if balance && n % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "balanced dataset needs even n, got {n}"
        )));
    }
    let root = Rng::new(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.split(i as u64);
        let clean = random_scene(&mut rng);
        let kind = match task {
            TaskVariant::Color => AttributeKind::Color,
            TaskVariant::Shape => AttributeKind::Shape,
            TaskVariant::Mixed => {
                if rng.coin() {
                    AttributeKind::Color
                } else {
                    AttributeKind::Shape
                }
            }
        };
        let correct = clean.attribute(kind);
        let distractor = draw_distractor(correct, &mut rng)?;
        let position = if balance {
            if i % 2 == 0 {
                OptionPosition::BeforeOr
            } else {
                OptionPosition::AfterOr
            }
        } else if rng.coin() {
            OptionPosition::BeforeOr
        } else {
            OptionPosition::AfterOr
        };
        let prompt_tokens = match position {
            OptionPosition::BeforeOr => vocab::prompt(correct, distractor),
            OptionPosition::AfterOr => vocab::prompt(distractor, correct),
        };
        samples.push(VqaSample {
            id: i,
            task,
            corrupt_scene: clean.with_attribute(distractor),
            clean_scene: clean,
            corrupted_prompt_tokens: prompt_tokens.clone(),
            prompt_tokens,
            correct_token: correct.token(),
            incorrect_token: distractor.token(),
            varied_attribute: kind,
            correct_position: position,
        });
    }
    // Symmetric token replacement draws donors from the finished pool.
    let str_root = root.split(u64::MAX);
    let corrupted: Vec<Vec<TokenId>> = samples
        .iter()
        .map(|s| corruption::corrupt_text(s, &samples, &mut str_root.split(s.id as u64)))
        .collect::<Result<_>>()?;
    for (s, t) in samples.iter_mut().zip(corrupted) {
        s.corrupted_prompt_tokens = t;
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    schema_version: String,
    #[serde(flatten)]
    sample: VqaSample,
}

/// One JSON object per line, each tagged with the schema version.
pub fn write_jsonl(samples: &[VqaSample], mut w: impl Write) -> Result<()> {
    for s in samples {
        let line = SampleLine {
            schema_version: DATASET_SCHEMA.to_string(),
            sample: s.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<VqaSample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine = serde_json::from_str(&line)?;
        if rec.schema_version != DATASET_SCHEMA {
            return Err(Error::Data(format!(
                "line {}: schema `{}`, expected `{DATASET_SCHEMA}`",
                n + 1,
                rec.schema_version
            )));
        }
        rec.sample.validate()?;
        out.push(rec.sample);
    }
    Ok(out)
}

pub fn save_dataset(samples: &[VqaSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(samples, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<VqaSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(f))
}
