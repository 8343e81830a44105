use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Conv → ReLU → max-pool stages (VGG-like).
    PlainStack,
    /// Transition conv plus an identity-skip block per stage (ResNet-like).
    Residual,
    /// Parallel 1×1 and 3×3 branches of the stage width, concatenated (GoogLeNet-like).
    InceptionLite,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::PlainStack, Family::Residual, Family::InceptionLite];

    pub fn name(self) -> &'static str {
        match self {
            Family::PlainStack => "plain_stack",
            Family::Residual => "residual",
            Family::InceptionLite => "inception_lite",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classifier head. Only global-average-pool → dense → softmax is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    DenseSoftmax,
}

/// Affine input scaling `(x - mean) / std` applied to every pixel before the
/// first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.125 }
    }
}

impl InputNorm {
    pub const IDENTITY: InputNorm = InputNorm { mean: 0.0, std: 1.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input_hw: (usize, usize),
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub head: Head,
    #[serde(default)]
    pub input_norm: InputNorm,
}

fn default_classes() -> usize {
    NUM_CLASSES
}

impl ModelSpec {
    /// Desk-scale default: 32×32 grayscale input, two stages.
    pub fn desk(family: Family) -> Self {
        Self {
            family,
            input_hw: (32, 32),
            input_channels: 1,
            stage_widths: vec![8, 16],
            num_classes: NUM_CLASSES,
            head: Head::DenseSoftmax,
            input_norm: InputNorm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return Err(Error::InvalidSpec(format!("input size {:?} must be positive", self.input_hw)));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::InvalidSpec(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if !(self.input_norm.mean.is_finite() && self.input_norm.std.is_finite() && self.input_norm.std > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "input_norm needs a finite mean and positive std, got {:?}",
                self.input_norm
            )));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::InvalidSpec("stage_widths must not be empty".into()));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::InvalidSpec(format!("{} stage widths must be positive", self.family)));
        }
        Ok(())
    }
}
