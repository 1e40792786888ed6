// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed token vocabulary of the micro-VQA world.
//!
//! Every word is a single token. Attribute words come in two kinds (shape,
//! color) of eight values each; the eight values of a kind are arranged in
//! four groups of two similar values.

use std::fmt;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const IS: TokenId = 1;
pub const THIS: TokenId = 2;
pub const A: TokenId = 3;
pub const OR: TokenId = 4;
pub const THING: TokenId = 5;
pub const SHAPE: TokenId = 6;
pub const QUESTION: TokenId = 7;
pub const READOUT: TokenId = 8;

/// Function words used by the prompt template.
pub const FUNCTION_WORDS: [TokenId; 7] = [IS, THIS, A, OR, THING, SHAPE, QUESTION];

/// Values per attribute kind.
pub const N_VALUES: usize = 8;
/// Groups of similar values per attribute kind.
pub const N_GROUPS: usize = 4;

const SHAPE_BASE: TokenId = 16;
const COLOR_BASE: TokenId = 24;

/// Smallest vocabulary that holds every token.
pub const MIN_VOCAB: usize = 32;

pub const SHAPE_NAMES: [&str; N_VALUES] = [
    "circle", "ring", "square", "box", "triangle", "arrow", "cat", "dog",
];
pub const COLOR_NAMES: [&str; N_VALUES] = [
    "red", "pink", "blue", "navy", "green", "olive", "yellow", "ochre",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Shape,
    Color,
}

impl AttributeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Shape => "shape",
            Self::Color => "color",
        }
    }
}

/// One attribute value, e.g. `Color(0)` = red.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attribute {
    pub kind: AttributeKind,
    pub value: u8,
}

impl Attribute {
    pub fn shape(value: u8) -> Self {
        Self {
            kind: AttributeKind::Shape,
            value,
        }
    }

    pub fn color(value: u8) -> Self {
        Self {
            kind: AttributeKind::Color,
            value,
        }
    }

    pub fn group(self) -> usize {
        self.value as usize / 2
    }

    pub fn token(self) -> TokenId {
        match self.kind {
            AttributeKind::Shape => SHAPE_BASE + TokenId::from(self.value),
            AttributeKind::Color => COLOR_BASE + TokenId::from(self.value),
        }
    }

    pub fn from_token(token: TokenId) -> Option<Self> {
        match token {
            t if (SHAPE_BASE..SHAPE_BASE + N_VALUES as TokenId).contains(&t) => {
                Some(Self::shape((t - SHAPE_BASE) as u8))
            }
            t if (COLOR_BASE..COLOR_BASE + N_VALUES as TokenId).contains(&t) => {
                Some(Self::color((t - COLOR_BASE) as u8))
            }
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self.kind {
            AttributeKind::Shape => SHAPE_NAMES[self.value as usize],
            AttributeKind::Color => COLOR_NAMES[self.value as usize],
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Surface form of a token, for logs and tests.
pub fn token_text(token: TokenId) -> String {
    if let Some(a) = Attribute::from_token(token) {
        return a.name().to_string();
    }
    match token {
        PAD => "<pad>",
        IS => "is",
        THIS => "this",
        A => "a",
        OR => "or",
        THING => "thing",
        SHAPE => "shape",
        QUESTION => "?",
        READOUT => "<READOUT>",
        _ => "<unused>",
    }
    .to_string()
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| token_text(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two-choice prompt: `is this a {first} or {second} {noun} ? <READOUT>`.
pub fn prompt(first: Attribute, second: Attribute) -> Vec<TokenId> {
    let noun = match first.kind {
        AttributeKind::Shape => SHAPE,
        AttributeKind::Color => THING,
    };
    vec![
        IS,
        THIS,
        A,
        first.token(),
        OR,
        second.token(),
        noun,
        QUESTION,
        READOUT,
    ]
}

/// Position of the option before "or".
pub const FIRST_OPTION_POS: usize = 3;
/// Position of the option after "or".
pub const SECOND_OPTION_POS: usize = 5;
/// Prompt length produced by [`prompt`].
pub const PROMPT_LEN: usize = 9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_roundtrip() {
        for v in 0..N_VALUES as u8 {
            for a in [Attribute::shape(v), Attribute::color(v)] {
                assert_eq!(Attribute::from_token(a.token()), Some(a));
            }
        }
        assert_eq!(Attribute::from_token(READOUT), None);
    }

    #[test]
    fn prompt_template() {
        let p = prompt(Attribute::color(0), Attribute::color(2));
        assert_eq!(render(&p), "is this a red or blue thing ? <READOUT>");
        assert_eq!(p.len(), PROMPT_LEN);
        assert_eq!(p[FIRST_OPTION_POS], Attribute::color(0).token());
        assert_eq!(p[SECOND_OPTION_POS], Attribute::color(2).token());
    }
}
