//! Label vocabularies shared by every task: the seven basic expressions and the
//! seventeen canonical action units.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_EMOTIONS: usize = 7;
pub const N_AUS: usize = 17;

/// Canonical action-unit ids, in head/column order.
pub const CANONICAL_AUS: [u32; N_AUS] = [1, 2, 4, 5, 6, 7, 9, 10, 11, 12, 15, 17, 20, 23, 24, 25, 26];

/// Position of an AU id in [`CANONICAL_AUS`].
pub fn au_index(au: u32) -> Result<usize> {
    CANONICAL_AUS
        .iter()
        .position(|&id| id == au)
        .ok_or(Error::UnknownAu(au))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Happiness,
    Sadness,
    Fear,
    Anger,
    Surprise,
    Disgust,
}

impl Emotion {
    pub const ALL: [Emotion; N_EMOTIONS] = [
        Emotion::Neutral,
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Fear,
        Emotion::Anger,
        Emotion::Surprise,
        Emotion::Disgust,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Result<Emotion> {
        Self::ALL
            .get(idx)
            .copied()
            .ok_or_else(|| Error::UnknownEmotion(idx.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
            Emotion::Fear => "fear",
            Emotion::Anger => "anger",
            Emotion::Surprise => "surprise",
            Emotion::Disgust => "disgust",
        }
    }

    pub fn adjective(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Happiness => "happy",
            Emotion::Sadness => "sad",
            Emotion::Fear => "fearful",
            Emotion::Anger => "angry",
            Emotion::Surprise => "surprised",
            Emotion::Disgust => "disgusted",
        }
    }

    pub fn adverb(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutrally",
            Emotion::Happiness => "happily",
            Emotion::Sadness => "sadly",
            Emotion::Fear => "fearfully",
            Emotion::Anger => "angrily",
            Emotion::Surprise => "surprisedly",
            Emotion::Disgust => "disgustedly",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    /// Accepts the noun form and the adjective form used by empirical tables
    /// ("happy", "fearful", ...).
    fn from_str(s: &str) -> Result<Emotion> {
        let lower = s.trim().to_ascii_lowercase();
        let emo = match lower.as_str() {
            "neutral" => Emotion::Neutral,
            "happiness" | "happy" => Emotion::Happiness,
            "sadness" | "sad" => Emotion::Sadness,
            "fear" | "fearful" => Emotion::Fear,
            "anger" | "angry" => Emotion::Anger,
            "surprise" | "surprised" => Emotion::Surprise,
            "disgust" | "disgusted" | "disguste" => Emotion::Disgust,
            _ => return Err(Error::UnknownEmotion(s.to_string())),
        };
        Ok(emo)
    }
}
