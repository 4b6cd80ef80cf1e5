//! The decomposition strategy and its ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// How reflectance and illumination are recombined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Additive,
    Multiplicative,
}

/// Where the split happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Latent,
    Pixel,
}

/// The full method and the four ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    /// Additive split of latent features of `ln(1 + I)`.
    Full,
    /// Classic pixel-space Retinex: 3-channel R times 1-channel L, both
    /// clipped to `[0, 1]`.
    V0PixelMult,
    /// Multiplicative split in latent space, no log transform.
    V1LatentMult,
    /// Additive split in latent space, no log transform.
    V2LatentAddNoLog,
    /// Additive split directly in RGB space of `ln(1 + I)`.
    V3RgbAddLog,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Full,
        Strategy::V0PixelMult,
        Strategy::V1LatentMult,
        Strategy::V2LatentAddNoLog,
        Strategy::V3RgbAddLog,
    ];

    pub fn combine(self) -> Combine {
        match self {
            Strategy::Full | Strategy::V2LatentAddNoLog | Strategy::V3RgbAddLog => {
                Combine::Additive
            }
            Strategy::V0PixelMult | Strategy::V1LatentMult => Combine::Multiplicative,
        }
    }

    pub fn space(self) -> Space {
        match self {
            Strategy::Full | Strategy::V1LatentMult | Strategy::V2LatentAddNoLog => Space::Latent,
            Strategy::V0PixelMult | Strategy::V3RgbAddLog => Space::Pixel,
        }
    }

    pub fn log_transform(self) -> bool {
        matches!(self, Strategy::Full | Strategy::V3RgbAddLog)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::V0PixelMult => "v0_pixel_mult",
            Strategy::V1LatentMult => "v1_latent_mult",
            Strategy::V2LatentAddNoLog => "v2_latent_add_nolog",
            Strategy::V3RgbAddLog => "v3_rgb_add_log",
        }
    }

    /// Channel counts of (R, L) for a latent width of `channels`.
    pub fn component_channels(self, channels: usize) -> (usize, usize) {
        match self {
            Strategy::V0PixelMult => (3, 1),
            Strategy::V3RgbAddLog => (3, 3),
            _ => (channels, channels),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s || st.as_str().split('_').next() == Some(s.as_str()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}`; expected one of full, v0, v1, v2, v3"
                ))
            })
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.as_str().to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}
