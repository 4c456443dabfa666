use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    Off,
    Low,
    Default,
}

impl FromStr for NoiseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "low" => Ok(Self::Low),
            "default" => Ok(Self::Default),
            _ => Err(Error::Config(format!("unknown noise level '{s}'; expected off, low or default"))),
        }
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Low => "low",
            Self::Default => "default",
        })
    }
}

/// Sensor and perception corruption applied by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Depth noise standard deviation as a fraction of the true range.
    pub depth_sigma: f64,
    /// Position noise added to each flower detection, meters at 0.4 m range;
    /// scales linearly with range.
    pub position_sigma: f64,
    /// Row `i` is the distribution of the reported orientation class when the
    /// classifier's own answer is `i`.
    pub confusion: [[f64; 3]; 3],
    /// Extra per-channel pixel color noise on top of the class colors.
    pub color_sigma: f64,
}

fn symmetric_confusion(correct: f64) -> [[f64; 3]; 3] {
    let off = (1.0 - correct) / 2.0;
    let mut m = [[off; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = correct;
    }
    m
}

impl NoiseSpec {
    pub fn preset(level: NoiseLevel) -> Self {
        match level {
            NoiseLevel::Off => Self {
                depth_sigma: 0.0,
                position_sigma: 0.0,
                confusion: symmetric_confusion(1.0),
                color_sigma: 0.0,
            },
            NoiseLevel::Low => Self {
                depth_sigma: 0.004,
                position_sigma: 0.004,
                confusion: symmetric_confusion(0.92),
                color_sigma: 4.0,
            },
            NoiseLevel::Default => Self {
                depth_sigma: 0.008,
                position_sigma: 0.008,
                confusion: symmetric_confusion(0.8),
                color_sigma: 8.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("depth_sigma", self.depth_sigma),
            ("position_sigma", self.position_sigma),
            ("color_sigma", self.color_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("noise {name} must be non-negative, got {v}")));
            }
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("confusion row {i} must be a probability distribution")));
            }
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::preset(NoiseLevel::Default)
    }
}
