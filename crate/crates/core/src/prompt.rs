use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One token of the closed conditioning vocabulary: the eight synthetic
/// content families plus the two quality words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptId {
    Gradient,
    Checkerboard,
    Blobs,
    Stripes,
    Rings,
    Texture,
    Disk,
    Cross,
    HighQuality,
    LowQuality,
}

impl PromptId {
    pub const VOCAB: [PromptId; 10] = [
        PromptId::Gradient,
        PromptId::Checkerboard,
        PromptId::Blobs,
        PromptId::Stripes,
        PromptId::Rings,
        PromptId::Texture,
        PromptId::Disk,
        PromptId::Cross,
        PromptId::HighQuality,
        PromptId::LowQuality,
    ];
    pub const FAMILIES: [PromptId; 8] = [
        PromptId::Gradient,
        PromptId::Checkerboard,
        PromptId::Blobs,
        PromptId::Stripes,
        PromptId::Rings,
        PromptId::Texture,
        PromptId::Disk,
        PromptId::Cross,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn family(i: usize) -> PromptId {
        Self::FAMILIES[i % Self::FAMILIES.len()]
    }

    pub fn is_family(self) -> bool {
        self.index() < Self::FAMILIES.len()
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptId::Gradient => "gradient",
            PromptId::Checkerboard => "checkerboard",
            PromptId::Blobs => "blobs",
            PromptId::Stripes => "stripes",
            PromptId::Rings => "rings",
            PromptId::Texture => "texture",
            PromptId::Disk => "disk",
            PromptId::Cross => "cross",
            PromptId::HighQuality => "high-quality",
            PromptId::LowQuality => "low-quality",
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::VOCAB
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown prompt token {s:?}")))
    }
}

impl Serialize for PromptId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PromptId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated token list such as `"checkerboard,high-quality"`.
pub fn parse_prompts(s: &str) -> Result<Vec<PromptId>> {
    let tokens: Vec<PromptId> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if tokens.is_empty() {
        return Err(Error::config(format!("empty prompt list {s:?}")));
    }
    Ok(tokens)
}

pub fn format_prompts(p: &[PromptId]) -> String {
    p.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
}
