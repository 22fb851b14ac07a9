use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma_r: f64,
    pub gamma_s: f64,
    pub gamma_imf: f64,
    pub gamma_h: f64,
    pub gamma_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_r: 1.0,
            gamma_s: 1.0,
            gamma_imf: 1.0,
            gamma_h: 1.0,
            gamma_e: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma_r, self.gamma_s, self.gamma_imf, self.gamma_h, self.gamma_e];
        if all.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.gamma_r <= 0.0 && self.gamma_s <= 0.0 {
            return Err(Error::Config("gamma_r or gamma_s must be positive".into()));
        }
        Ok(())
    }
}

/// How a decoder stage merges the matching encoder activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    #[default]
    Concat,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicNetConfig {
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub input_channels: usize,
    /// Channels of each of the two decoders' predictions.
    pub output_channels: usize,
    pub use_imf_loss: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub skip: SkipMode,
    /// Initialize transposed convolutions from N(0, 1) instead of He.
    #[serde(default)]
    pub paper_faithful_init: bool,
}

impl IntrinsicNetConfig {
    /// Three blocks of widths 16, 32, 64 for 32×32 inputs.
    pub fn desk() -> Self {
        IntrinsicNetConfig {
            block_widths: vec![16, 32, 64],
            convs_per_block: 2,
            input_channels: 3,
            output_channels: 3,
            use_imf_loss: true,
            loss_weights: LossWeights::default(),
            skip: SkipMode::Concat,
            paper_faithful_init: false,
        }
    }

    /// VGG16-like widths for 120×160 inputs.
    pub fn paper() -> Self {
        IntrinsicNetConfig {
            block_widths: vec![64, 128, 256, 512, 512],
            ..Self::desk()
        }
    }

    pub fn depth(&self) -> usize {
        self.block_widths.len()
    }

    /// Input extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_widths.len() < 2 {
            return Err(Error::Config("at least 2 encoder blocks are required".into()));
        }
        if self.block_widths.contains(&0) || self.convs_per_block == 0 {
            return Err(Error::Config("widths and convs_per_block must be positive".into()));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        self.loss_weights.validate()
    }
}

/// Representation of intrinsic gradients in RetiNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Per-channel magnitude, 3 channels per image.
    #[default]
    Magnitude,
    /// Per-channel `(gx, gy)`, 6 channels per image.
    Signed,
}

impl GradientMode {
    pub fn channels(self) -> usize {
        match self {
            GradientMode::Magnitude => 3,
            GradientMode::Signed => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    #[serde(default)]
    pub batch_norm: bool,
}

impl Stage2Config {
    pub fn paper() -> Self {
        Stage2Config {
            widths: vec![64, 128, 128, 64],
            kernel: 3,
            input_channels: 9,
            output_channels: 6,
            batch_norm: false,
        }
    }

    pub fn desk() -> Self {
        Stage2Config {
            widths: vec![16, 32, 32, 16],
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 3 {
            return Err(Error::Config(format!("stage-2 kernel must be 3, got {}", self.kernel)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("stage-2 widths must be non-empty and positive".into()));
        }
        if self.output_channels != 6 {
            return Err(Error::Config("stage 2 predicts 6 channels (reflectance and shading)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetiNetConfig {
    pub stage1: IntrinsicNetConfig,
    pub stage2: Stage2Config,
    #[serde(default)]
    pub gradients: GradientMode,
}

impl RetiNetConfig {
    pub fn new(base: IntrinsicNetConfig, stage2_widths: Vec<usize>, gradients: GradientMode) -> Self {
        let g = gradients.channels();
        RetiNetConfig {
            stage1: IntrinsicNetConfig {
                input_channels: 3 + g,
                output_channels: g,
                ..base
            },
            stage2: Stage2Config {
                widths: stage2_widths,
                input_channels: 3 + 2 * g,
                ..Stage2Config::paper()
            },
            gradients,
        }
    }

    pub fn desk() -> Self {
        Self::new(IntrinsicNetConfig::desk(), Stage2Config::desk().widths, GradientMode::Magnitude)
    }

    pub fn paper() -> Self {
        Self::new(IntrinsicNetConfig::paper(), Stage2Config::paper().widths, GradientMode::Magnitude)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        let g = self.gradients.channels();
        if self.stage1.input_channels != 3 + g || self.stage1.output_channels != g {
            return Err(Error::Config(format!(
                "stage 1 must map {} to {g} channels in {:?} mode",
                3 + g,
                self.gradients
            )));
        }
        if self.stage2.input_channels != 3 + 2 * g {
            return Err(Error::Config(format!(
                "stage 2 input must have {} channels, got {}",
                3 + 2 * g,
                self.stage2.input_channels
            )));
        }
        Ok(())
    }
}

/// Optimization and data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_end: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Largest shift in pixels; `None` scales ±20 px at height 120 to the
    /// actual height.
    pub max_shift: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Stated optimizer settings: lr 1e-5 decaying to 1e-7.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr0: 1e-5,
            lr_end: 1e-7,
            lr_power: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            max_shift: None,
            seed: 0,
        }
    }

    /// Learning rates scaled up a hundredfold for small networks.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_end: 1e-5,
            ..Self::paper()
        }
    }

    pub fn shift_for_height(&self, height: usize) -> usize {
        self.max_shift
            .unwrap_or_else(|| (20.0 * height as f64 / 120.0).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr0 >= self.lr_end) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr0 >= lr_end > 0, got {} and {}",
                self.lr0, self.lr_end
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_power <= 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1), weight_decay >= 0, lr_power > 0".into()));
        }
        Ok(())
    }
}
