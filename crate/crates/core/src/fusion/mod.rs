//! Text-conditioned feature synthesis: upsampling fusion blocks with
//! sentence- and word-level channel affines, a generator stacking them, a
//! conditioned discriminator, and the hinge adversarial losses.

pub mod block;
pub mod gan;

pub use block::{msa_block_tape, sentence_affine, word_affine, FusionMlps, MsaBlockParams};
pub use gan::{
    gan_losses, gan_losses_tape, synthesize_unseen, Discriminator, Generator, SynthSample,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Channel-major feature map: data[c][y][x] flattened as c*(h*w) + y*w + x.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::EmptyInput("feature map dims must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimMismatch(format!(
                "feature map {channels}x{height}x{width} needs {} entries, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map entry".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    /// View as a channels×(H·W) matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.channels, self.height * self.width, self.data.clone())
            .expect("feature map data is validated at construction")
    }

    pub fn from_matrix(m: &Matrix, height: usize, width: usize) -> Result<Self> {
        if m.cols() != height * width {
            return Err(Error::DimMismatch(format!(
                "matrix has {} columns, expected {}x{}",
                m.cols(),
                height,
                width
            )));
        }
        Self::new(m.rows(), height, width, m.data().to_vec())
    }

    /// Global average pool over the spatial grid → channels-long vector.
    pub fn pool(&self) -> Vec<f64> {
        let hw = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| {
                self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
                    .iter()
                    .sum::<f64>()
                    / hw
            })
            .collect()
    }
}

/// Generator shape: noise dimension, block count, channel width, and the
/// base grid the noise is projected onto. Spatial size doubles per block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub blocks: usize,
    /// Channels of every fusion block; must equal the text embedding dim so
    /// word attention over map columns is well-formed.
    pub channels: usize,
    pub out_channels: usize,
    pub base_h: usize,
    pub base_w: usize,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub attention: crate::alignment::AttentionMode,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            blocks: 7,
            channels: 8,
            out_channels: 8,
            base_h: 2,
            base_w: 2,
            mlp_hidden: 8,
            attention: crate::alignment::AttentionMode::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("block count must be >= 1".into()));
        }
        if self.noise_dim == 0 {
            return Err(Error::Config("noise dim must be >= 1".into()));
        }
        if self.channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.base_h == 0 || self.base_w == 0 {
            return Err(Error::Config("base resolution must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial size after all blocks: base · 2^blocks.
    pub fn out_size(&self) -> (usize, usize) {
        (self.base_h << self.blocks, self.base_w << self.blocks)
    }
}
