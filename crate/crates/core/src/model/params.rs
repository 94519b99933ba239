use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Linear, MlpBlock};
use crate::data::patch_count;
use crate::{Error, Result};

/// Shapes of one domain's forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    /// Token / prototype dimension.
    pub dim: usize,
    /// Width of the position-wise MLP blocks.
    pub hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub memory_size: usize,
}

impl ModelConfig {
    /// Reference layout: two encoder blocks, one decoder block, hidden width `2D`.
    pub fn new(
        lookback: usize,
        horizon: usize,
        patch_len: usize,
        dim: usize,
        memory_size: usize,
    ) -> Self {
        Self {
            lookback,
            horizon,
            patch_len,
            dim,
            hidden: 2 * dim,
            encoder_blocks: 2,
            decoder_blocks: 1,
            memory_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.lookback {
            return Err(Error::Config(format!(
                "patch length {} must lie in [1, lookback {}]",
                self.patch_len, self.lookback
            )));
        }
        if self.horizon == 0 || self.dim == 0 || self.hidden == 0 || self.memory_size == 0 {
            return Err(Error::Config(format!(
                "horizon, dim, hidden and memory size must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Patches per lookback window.
    pub fn patches(&self) -> usize {
        patch_count(self.lookback, self.patch_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embed: Linear,
    pub blocks: Vec<MlpBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub blocks: Vec<MlpBlock>,
    /// Flatten-and-project head, `(B*D) x F`.
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (d, h) = (config.dim, config.hidden);
        Self {
            encoder: EncoderParams {
                embed: Linear::init(config.patch_len, d, rng),
                blocks: (0..config.encoder_blocks)
                    .map(|_| MlpBlock::init(d, h, rng))
                    .collect(),
            },
            decoder: DecoderParams {
                blocks: (0..config.decoder_blocks)
                    .map(|_| MlpBlock::init(d, h, rng))
                    .collect(),
                head: Linear::init(config.patches() * d, config.horizon, rng),
            },
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, h) = (config.dim, config.hidden);
        Self {
            encoder: EncoderParams {
                embed: Linear::zeros(config.patch_len, d),
                blocks: (0..config.encoder_blocks)
                    .map(|_| MlpBlock::zeros(d, h))
                    .collect(),
            },
            decoder: DecoderParams {
                blocks: (0..config.decoder_blocks)
                    .map(|_| MlpBlock::zeros(d, h))
                    .collect(),
                head: Linear::zeros(config.patches() * d, config.horizon),
            },
        }
    }

    /// Linear layers in a fixed order with their dotted names.
    pub fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> = vec![("encoder.embed".into(), &self.encoder.embed)];
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            out.push((format!("encoder.blocks.{i}.up"), &b.up));
            out.push((format!("encoder.blocks.{i}.down"), &b.down));
        }
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            out.push((format!("decoder.blocks.{i}.up"), &b.up));
            out.push((format!("decoder.blocks.{i}.down"), &b.down));
        }
        out.push(("decoder.head".into(), &self.decoder.head));
        out
    }

    /// Every parameter tensor, in a fixed order, with its dotted name.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, lin) in self.linears() {
            out.push((
                format!("{name}.weight"),
                lin.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                lin.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out: Vec<(String, &mut Linear)> = Vec::new();
        out.push(("encoder.embed".into(), &mut self.encoder.embed));
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            out.push((format!("encoder.blocks.{i}.up"), &mut b.up));
            out.push((format!("encoder.blocks.{i}.down"), &mut b.down));
        }
        for (i, b) in self.decoder.blocks.iter_mut().enumerate() {
            out.push((format!("decoder.blocks.{i}.up"), &mut b.up));
            out.push((format!("decoder.blocks.{i}.down"), &mut b.down));
        }
        out.push(("decoder.head".into(), &mut self.decoder.head));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order and names.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, lin) in self.linears_mut() {
            out.push((
                format!("{name}.weight"),
                lin.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                lin.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
