//! USDA soil texture classes from sand/silt/clay percentages.
//!
//! The boundaries form a decision table evaluated top to bottom (clay-rich
//! classes first); the first matching rule wins. The rules are also mutually
//! exclusive on their own, which the grid test below checks.
//!
//! | class           | rule (percent)                                               |
//! |-----------------|--------------------------------------------------------------|
//! | clay            | clay ≥ 40, sand ≤ 45, silt < 40                              |
//! | silty clay      | clay ≥ 40, silt ≥ 40                                         |
//! | sandy clay      | clay ≥ 35, sand > 45                                         |
//! | clay loam       | 27 ≤ clay < 40, 20 < sand ≤ 45                               |
//! | silty clay loam | 27 ≤ clay < 40, sand ≤ 20                                    |
//! | sandy clay loam | 20 ≤ clay < 35, silt < 28, sand > 45                         |
//! | loam            | 7 ≤ clay < 27, 28 ≤ silt < 50, sand ≤ 52                     |
//! | silt loam       | silt ≥ 50 and 12 ≤ clay < 27, or 50 ≤ silt < 80 and clay < 12 |
//! | silt            | silt ≥ 80, clay < 12                                         |
//! | sandy loam      | 7 ≤ clay < 20, sand > 52, silt + 2·clay ≥ 30, or             |
//! |                 | clay < 7, silt < 50, silt + 2·clay ≥ 30                      |
//! | loamy sand      | silt + 1.5·clay ≥ 15, silt + 2·clay < 30                     |
//! | sand            | silt + 1.5·clay < 15                                         |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UsdaError {
    #[error("invalid composition ({sand}, {silt}, {clay}): {reason}")]
    InvalidComposition {
        sand: f64,
        silt: f64,
        clay: f64,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureClass {
    Clay,
    SiltyClay,
    SandyClay,
    ClayLoam,
    SiltyClayLoam,
    SandyClayLoam,
    Loam,
    SiltLoam,
    Silt,
    SandyLoam,
    LoamySand,
    Sand,
}

impl TextureClass {
    pub const ALL: [TextureClass; 12] = [
        TextureClass::Clay,
        TextureClass::SiltyClay,
        TextureClass::SandyClay,
        TextureClass::ClayLoam,
        TextureClass::SiltyClayLoam,
        TextureClass::SandyClayLoam,
        TextureClass::Loam,
        TextureClass::SiltLoam,
        TextureClass::Silt,
        TextureClass::SandyLoam,
        TextureClass::LoamySand,
        TextureClass::Sand,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TextureClass::Clay => "clay",
            TextureClass::SiltyClay => "silty clay",
            TextureClass::SandyClay => "sandy clay",
            TextureClass::ClayLoam => "clay loam",
            TextureClass::SiltyClayLoam => "silty clay loam",
            TextureClass::SandyClayLoam => "sandy clay loam",
            TextureClass::Loam => "loam",
            TextureClass::SiltLoam => "silt loam",
            TextureClass::Silt => "silt",
            TextureClass::SandyLoam => "sandy loam",
            TextureClass::LoamySand => "loamy sand",
            TextureClass::Sand => "sand",
        }
    }

    /// Whether the class rule holds for percentages summing to 100.
    pub fn matches(&self, sand: f64, silt: f64, clay: f64) -> bool {
        match self {
            TextureClass::Clay => clay >= 40.0 && sand <= 45.0 && silt < 40.0,
            TextureClass::SiltyClay => clay >= 40.0 && silt >= 40.0,
            TextureClass::SandyClay => clay >= 35.0 && sand > 45.0,
            TextureClass::ClayLoam => {
                (27.0..40.0).contains(&clay) && sand > 20.0 && sand <= 45.0
            }
            TextureClass::SiltyClayLoam => (27.0..40.0).contains(&clay) && sand <= 20.0,
            TextureClass::SandyClayLoam => {
                (20.0..35.0).contains(&clay) && silt < 28.0 && sand > 45.0
            }
            TextureClass::Loam => {
                (7.0..27.0).contains(&clay) && (28.0..50.0).contains(&silt) && sand <= 52.0
            }
            TextureClass::SiltLoam => {
                (silt >= 50.0 && (12.0..27.0).contains(&clay))
                    || ((50.0..80.0).contains(&silt) && clay < 12.0)
            }
            TextureClass::Silt => silt >= 80.0 && clay < 12.0,
            TextureClass::SandyLoam => {
                ((7.0..20.0).contains(&clay) && sand > 52.0 && silt + 2.0 * clay >= 30.0)
                    || (clay < 7.0 && silt < 50.0 && silt + 2.0 * clay >= 30.0)
            }
            TextureClass::LoamySand => silt + 1.5 * clay >= 15.0 && silt + 2.0 * clay < 30.0,
            TextureClass::Sand => silt + 1.5 * clay < 15.0,
        }
    }
}

impl fmt::Display for TextureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classify percentages that sum to 100 within 0.5 (renormalised first).
pub fn classify(sand: f64, silt: f64, clay: f64) -> Result<TextureClass, UsdaError> {
    let invalid = |reason: &str| UsdaError::InvalidComposition {
        sand,
        silt,
        clay,
        reason: reason.into(),
    };
    if [sand, silt, clay].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("parts must be finite and nonnegative"));
    }
    let total = sand + silt + clay;
    if (total - 100.0).abs() > 0.5 {
        return Err(invalid("parts must sum to 100"));
    }
    let s = 100.0 / total;
    let (sand, silt, clay) = (sand * s, silt * s, clay * s);
    TextureClass::ALL
        .iter()
        .find(|c| c.matches(sand, silt, clay))
        .copied()
        .ok_or_else(|| invalid("no class rule matched"))
}

/// Classify parts closed to any constant (e.g. proportions).
pub fn classify_parts(parts: &[f64]) -> Result<TextureClass, UsdaError> {
    let [sand, silt, clay] = parts else {
        return Err(UsdaError::InvalidComposition {
            sand: f64::NAN,
            silt: f64::NAN,
            clay: f64::NAN,
            reason: format!("expected 3 parts, got {}", parts.len()),
        });
    };
    let total = sand + silt + clay;
    classify(100.0 * sand / total, 100.0 * silt / total, 100.0 * clay / total)
}
