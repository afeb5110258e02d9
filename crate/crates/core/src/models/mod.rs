//! Network architectures: a generator made of three stacked U-Nets whose
//! supervised heads are averaged into the final output, and an image-level
//! discriminator built from Convolution-BatchNorm-LeakyReLU blocks with
//! feature taps for the perceptual loss.

mod discriminator;
mod generator;
mod unet;

pub use discriminator::{Discriminator, DiscriminatorOutput};
pub use generator::{Generator, GeneratorOutput};
pub use unet::UNet;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of a single U-Net in the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    /// Number of stride-2 encoder levels; input spatial dims must be
    /// divisible by `2^depth`.
    pub depth: usize,
    /// Channels of the first encoder level; each level doubles, capped at
    /// `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidArg("unet depth must be >= 1".into()));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ] {
            if v == 0 {
                return Err(Error::InvalidArg(format!("unet {name} must be positive")));
            }
        }
        if self.max_channels < self.base_channels {
            return Err(Error::InvalidArg(
                "unet max_channels must be >= base_channels".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of encoder level `k` (0-based).
    pub fn channels_at(&self, k: usize) -> usize {
        (self.base_channels << k).min(self.max_channels)
    }

    /// Input spatial dims must be divisible by this.
    pub fn required_divisor(&self) -> usize {
        1 << self.depth
    }
}

/// The three-U-Net generator stack.
///
/// U-Net `k > 1` consumes the channel concatenation of the original input
/// and U-Net `k-1`'s output; every head emits a full-resolution image and
/// the final output is the mean of the supervised heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub unets: Vec<UNetSpec>,
    /// 1-based head indices averaged into the final output (default all 3).
    pub supervision: Vec<usize>,
}

pub const GENERATOR_STACK_SIZE: usize = 3;

impl GeneratorSpec {
    /// Builds the canonical stack from one U-Net shape: three copies, with
    /// stacks 2 and 3 widened on the input side to accept the concatenated
    /// (input, previous output) pair, supervision on all heads.
    pub fn uniform(first: UNetSpec) -> Self {
        let mut unets = vec![first.clone()];
        for _ in 1..GENERATOR_STACK_SIZE {
            let mut u = first.clone();
            u.in_channels = first.in_channels + first.out_channels;
            unets.push(u);
        }
        GeneratorSpec {
            unets,
            supervision: (1..=GENERATOR_STACK_SIZE).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unets.len() != GENERATOR_STACK_SIZE {
            return Err(Error::InvalidArg(format!(
                "generator requires exactly {GENERATOR_STACK_SIZE} stacked U-Nets, got {}",
                self.unets.len()
            )));
        }
        for u in &self.unets {
            u.validate()?;
        }
        let out = self.unets[0].out_channels;
        let input = self.unets[0].in_channels;
        for (k, u) in self.unets.iter().enumerate().skip(1) {
            if u.out_channels != out {
                return Err(Error::InvalidArg(format!(
                    "unet {} out_channels {} != {}",
                    k + 1,
                    u.out_channels,
                    out
                )));
            }
            if u.in_channels != input + out {
                return Err(Error::InvalidArg(format!(
                    "unet {} in_channels must be {} (input {} + previous output {}), got {}",
                    k + 1,
                    input + out,
                    input,
                    out,
                    u.in_channels
                )));
            }
        }
        if self.supervision.is_empty() {
            return Err(Error::InvalidArg("supervision set must be non-empty".into()));
        }
        let mut prev = 0;
        for &s in &self.supervision {
            if s < 1 || s > GENERATOR_STACK_SIZE {
                return Err(Error::InvalidArg(format!("supervision head {s} out of range 1..=3")));
            }
            if s <= prev {
                return Err(Error::InvalidArg(
                    "supervision heads must be strictly increasing".into(),
                ));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.unets[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.unets[0].out_channels
    }

    pub fn required_divisor(&self) -> usize {
        self.unets.iter().map(|u| u.required_divisor()).max().unwrap_or(1)
    }
}

/// The image-level discriminator: a chain of Convolution-BatchNorm-LeakyReLU
/// blocks (stride 2 on odd blocks), global average pooling and a linear
/// logit head. No sigmoid: the least-squares losses act on raw logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    /// Output channels of each block.
    pub layer_channels: Vec<usize>,
    /// 1-based block indices whose activations feed the perceptual loss and
    /// LPIPS; strictly increasing.
    pub tap_layers: Vec<usize>,
    /// Channels of the concatenated (fundus, heightmap) input.
    pub in_channels: usize,
}

impl DiscriminatorSpec {
    pub fn default_taps() -> Vec<usize> {
        vec![1, 4, 6, 8]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_channels.is_empty() {
            return Err(Error::InvalidArg("discriminator needs at least one block".into()));
        }
        if self.layer_channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::InvalidArg("discriminator channels must be positive".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::InvalidArg("tap_layers must be non-empty".into()));
        }
        let mut prev = 0;
        for &t in &self.tap_layers {
            if t < 1 || t > self.layer_channels.len() {
                return Err(Error::InvalidArg(format!(
                    "tap layer {t} out of range 1..={}",
                    self.layer_channels.len()
                )));
            }
            if t <= prev {
                return Err(Error::InvalidArg("tap_layers must be strictly increasing".into()));
            }
            prev = t;
        }
        Ok(())
    }

    /// Stride of 1-based block `i`: 2 on odd blocks, 1 on even.
    pub fn stride_of(i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            layer_channels: vec![32, 64, 64, 128, 128, 256, 256, 256],
            tap_layers: Self::default_taps(),
            in_channels: 6,
        }
    }
}
