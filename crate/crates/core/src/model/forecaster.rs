//! Forward and backward passes of the patch forecaster.
//!
//! ```text
//! lookback -> patches -> embed -> encoder blocks -> Z -> nearest prototype -> Zq
//!          -> decoder blocks -> flatten -> head -> de-normalize -> prediction
//! ```
//!
//! Gradient routing:
//! - the prediction loss reaches the decoder, and reaches the encoder through
//!   a straight-through copy of `dL/dZq` onto `Z`;
//! - the commitment term reaches the encoder only;
//! - the codebook term reaches the selected memory rows only.

use ndarray::{Array2, ArrayView2, Axis};

use super::layers::BlockCache;
use super::loss::{smooth_l1, smooth_l1_grad, LossBreakdown};
use super::params::{DecoderParams, EncoderParams, ModelConfig, ModelParams};
use crate::data::{patchify_into, ForecastInstance, NormStats, PatchSequence};
use crate::memory::{
    codebook_loss, commitment_loss, scatter_to_memory, PrototypeMemory, QuantizationResult,
};
use crate::{Error, Result};

/// Whether latents pass through the memory or skip it (`Zq = Z`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantizerMode {
    #[default]
    Memory,
    Bypass,
}

/// A stacked minibatch: `n` instances, `B` patches each.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(n*B) x S`, instance-major.
    pub patches: Array2<f64>,
    /// `n x F`, raw scale.
    pub targets: Array2<f64>,
    pub norms: Vec<NormStats>,
}

impl Batch {
    pub fn new<'a, I>(config: &ModelConfig, instances: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ForecastInstance>,
    {
        let (l, f, s, b) = (
            config.lookback,
            config.horizon,
            config.patch_len,
            config.patches(),
        );
        let mut patches = Vec::new();
        let mut targets = Vec::new();
        let mut norms = Vec::new();
        let mut row = vec![0.0; b * s];
        for inst in instances {
            if inst.lookback.len() != l || inst.target.len() != f {
                return Err(Error::ShapeMismatch(format!(
                    "instance has lookback {} / target {}, model expects {l} / {f}",
                    inst.lookback.len(),
                    inst.target.len()
                )));
            }
            patchify_into(&inst.lookback, &mut row);
            patches.extend_from_slice(&row);
            targets.extend_from_slice(&inst.target);
            norms.push(inst.norm);
        }
        let n = norms.len();
        if n == 0 {
            return Err(Error::Empty("batch has no instances".into()));
        }
        Ok(Self {
            patches: Array2::from_shape_vec((n * b, s), patches).expect("patch rows"),
            targets: Array2::from_shape_vec((n, f), targets).expect("target rows"),
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }
}

fn ensure_finite(x: &Array2<f64>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {layer}")))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    patches: Array2<f64>,
    caches: Vec<BlockCache>,
}

/// Patch rows `(n*B) x S` to latents `(n*B) x D`.
pub fn encode_rows(
    params: &EncoderParams,
    patches: Array2<f64>,
) -> Result<(Array2<f64>, EncoderTrace)> {
    if patches.ncols() != params.embed.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "patch length {} does not match embedding input {}",
            patches.ncols(),
            params.embed.input_dim()
        )));
    }
    let mut h = params.embed.forward(patches.view());
    ensure_finite(&h, "encoder.embed")?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let (out, cache) = block.forward(h);
        ensure_finite(&out, &format!("encoder.blocks.{i}"))?;
        caches.push(cache);
        h = out;
    }
    Ok((h, EncoderTrace { patches, caches }))
}

/// Latents `B x D` of one patch sequence.
pub fn encode(params: &EncoderParams, patches: &PatchSequence) -> Result<Array2<f64>> {
    Ok(encode_rows(params, patches.patches.clone())?.0)
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    caches: Vec<BlockCache>,
    flat: Array2<f64>,
}

/// Quantized rows `(n*B) x D` to raw-scale predictions `n x F`.
pub fn decode_rows(
    params: &DecoderParams,
    zq: Array2<f64>,
    norms: &[NormStats],
) -> Result<(Array2<f64>, DecoderTrace)> {
    let n = norms.len();
    let (rows, d) = zq.dim();
    if n == 0 || rows % n != 0 || (rows / n) * d != params.head.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "{rows} x {d} latents for {n} instances do not fit a head of input {}",
            params.head.input_dim()
        )));
    }
    if !zq.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("decoder input".into()));
    }
    let mut h = zq;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let (out, cache) = block.forward(h);
        ensure_finite(&out, &format!("decoder.blocks.{i}"))?;
        caches.push(cache);
        h = out;
    }
    let flat = h
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, params.head.input_dim()))
        .expect("row-major flatten");
    let mut pred = params.head.forward(flat.view());
    for (mut row, norm) in pred.outer_iter_mut().zip(norms) {
        row.mapv_inplace(|v| norm.denormalize(v));
    }
    ensure_finite(&pred, "decoder.head")?;
    Ok((pred, DecoderTrace { caches, flat }))
}

/// Raw-scale forecast of one instance from its quantized latents `B x D`.
pub fn decode_and_project(
    params: &DecoderParams,
    zq: ArrayView2<'_, f64>,
    norm: NormStats,
) -> Result<Vec<f64>> {
    let (pred, _) = decode_rows(params, zq.to_owned(), &[norm])?;
    Ok(pred.into_raw_vec_and_offset().0)
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub z: Array2<f64>,
    pub quantized: QuantizationResult,
    /// `n x F`, raw scale.
    pub predictions: Array2<f64>,
    pub mode: QuantizerMode,
    encoder: EncoderTrace,
    decoder: DecoderTrace,
}

pub fn forward_batch(
    model: &ModelParams,
    memory: &PrototypeMemory,
    batch: &Batch,
    mode: QuantizerMode,
) -> Result<ForwardPass> {
    let (z, encoder) = encode_rows(&model.encoder, batch.patches.clone())?;
    let quantized = match mode {
        QuantizerMode::Memory => memory.quantize(z.view())?,
        QuantizerMode::Bypass => QuantizationResult {
            indices: Vec::new(),
            quantized: z.clone(),
        },
    };
    let (predictions, decoder) =
        decode_rows(&model.decoder, quantized.quantized.clone(), &batch.norms)?;
    Ok(ForwardPass {
        z,
        quantized,
        predictions,
        mode,
        encoder,
        decoder,
    })
}

/// Gradients of the routed objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub model: ModelParams,
    /// `M x D`; nonzero only on rows selected in the forward pass.
    pub memory: Array2<f64>,
}

/// Loss of a forward pass against its batch targets.
pub fn batch_loss(pass: &ForwardPass, batch: &Batch, beta: f64) -> Result<LossBreakdown> {
    let residuals = &pass.predictions - &batch.targets;
    let prediction = residuals.iter().map(|&d| smooth_l1(d)).sum::<f64>() / residuals.len() as f64;
    let (commitment, codebook) = match pass.mode {
        QuantizerMode::Memory => (
            commitment_loss(pass.z.view(), pass.quantized.quantized.view())?.value,
            codebook_loss(pass.z.view(), pass.quantized.quantized.view())?.value,
        ),
        QuantizerMode::Bypass => (0.0, 0.0),
    };
    Ok(LossBreakdown::compose(
        prediction, commitment, codebook, beta,
    ))
}

/// Backpropagates the routed objective through a finished forward pass.
pub fn backward(
    model: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
    pass: &ForwardPass,
    beta: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let loss = batch_loss(pass, batch, beta)?;
    let mut grad = ModelParams::zeros(config);

    // Prediction loss -> decoder.
    let count = pass.predictions.len() as f64;
    let mut dout = (&pass.predictions - &batch.targets).mapv(|d| smooth_l1_grad(d) / count);
    for (mut row, norm) in dout.outer_iter_mut().zip(&batch.norms) {
        row *= norm.std;
    }
    let dflat = model.decoder.head.backward(
        pass.decoder.flat.view(),
        dout.view(),
        &mut grad.decoder.head,
    );
    let mut dh = dflat
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(pass.z.dim())
        .expect("unflatten to token rows");
    for ((block, cache), g) in model
        .decoder
        .blocks
        .iter()
        .zip(&pass.decoder.caches)
        .zip(grad.decoder.blocks.iter_mut())
        .rev()
    {
        dh = block.backward(cache, dh.view(), g);
    }

    // Straight-through copy plus the commitment pull; codebook pull on memory.
    let mut memory_grad = Array2::zeros((config.memory_size, config.dim));
    let mut dz = dh;
    if pass.mode == QuantizerMode::Memory {
        let commit = commitment_loss(pass.z.view(), pass.quantized.quantized.view())?;
        dz.scaled_add(beta, &commit.grad_latent);
        let book = codebook_loss(pass.z.view(), pass.quantized.quantized.view())?;
        memory_grad = scatter_to_memory(
            book.grad_quantized.view(),
            &pass.quantized.indices,
            config.memory_size,
        );
    }

    for ((block, cache), g) in model
        .encoder
        .blocks
        .iter()
        .zip(&pass.encoder.caches)
        .zip(grad.encoder.blocks.iter_mut())
        .rev()
    {
        dz = block.backward(cache, dz.view(), g);
    }
    model.encoder.embed.backward(
        pass.encoder.patches.view(),
        dz.view(),
        &mut grad.encoder.embed,
    );

    Ok((
        loss,
        Gradients {
            model: grad,
            memory: memory_grad,
        },
    ))
}

/// Forward plus backward for one batch.
pub fn compute_gradients(
    model: &ModelParams,
    config: &ModelConfig,
    memory: &PrototypeMemory,
    batch: &Batch,
    beta: f64,
    mode: QuantizerMode,
) -> Result<(LossBreakdown, Gradients, ForwardPass)> {
    let pass = forward_batch(model, memory, batch, mode)?;
    let (loss, grads) = backward(model, config, batch, &pass, beta)?;
    Ok((loss, grads, pass))
}

/// Re-standardizes each row of an `n x F` array with its instance statistics.
pub(crate) fn normalize_rows(pred: &Array2<f64>, norms: &[NormStats]) -> Array2<f64> {
    let mut out = pred.clone();
    for (mut row, norm) in out.axis_iter_mut(Axis(0)).zip(norms) {
        row.mapv_inplace(|v| norm.normalize(v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::patchify;
    use crate::model::layers::{Linear, MlpBlock};
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_encodes_to_zero() {
        let config = ModelConfig::new(8, 2, 4, 3, 4);
        let model = ModelParams::zeros(&config);
        let p = patchify(&[0.0; 8], 4).unwrap();
        let z = encode(&model.encoder, &p).unwrap();
        assert_eq!(z.dim(), (2, 3));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_embedding_returns_patches() {
        let enc = EncoderParams {
            embed: Linear {
                weight: Array2::eye(4),
                bias: Array1::zeros(4),
            },
            blocks: vec![],
        };
        let p = patchify(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4).unwrap();
        assert_eq!(encode(&enc, &p).unwrap(), p.patches);
    }

    #[test]
    fn encoding_is_bitwise_stable() {
        let config = ModelConfig::new(12, 3, 4, 5, 6);
        let model = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(3));
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let p = patchify(&x, 4).unwrap();
        let a = encode(&model.encoder, &p).unwrap();
        let b = encode(&model.encoder, &p).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn decode_is_affine_in_norm() {
        let dec = DecoderParams {
            blocks: vec![MlpBlock::zeros(2, 4)],
            head: Linear {
                weight: Array2::zeros((4, 3)),
                bias: array![1.0, -0.5, 2.0],
            },
        };
        let zq = Array2::zeros((2, 2));
        let y = decode_and_project(
            &dec,
            zq.view(),
            NormStats {
                mean: 3.0,
                std: 2.0,
            },
        )
        .unwrap();
        assert_eq!(y, vec![5.0, 2.0, 7.0]);
        let y = decode_and_project(&dec, zq.view(), NormStats::IDENTITY).unwrap();
        assert_eq!(y, vec![1.0, -0.5, 2.0]);
    }

    #[test]
    fn decode_output_has_horizon_length() {
        let config = ModelConfig::new(96, 96, 4, 8, 4);
        let model = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let zq = Array2::zeros((24, 8));
        let y = decode_and_project(&model.decoder, zq.view(), NormStats::IDENTITY).unwrap();
        assert_eq!(y.len(), 96);
        assert!(decode_and_project(
            &model.decoder,
            Array2::zeros((23, 8)).view(),
            NormStats::IDENTITY
        )
        .is_err());
    }

    #[test]
    fn non_finite_decoder_input_is_rejected() {
        let config = ModelConfig::new(4, 1, 4, 2, 2);
        let model = ModelParams::zeros(&config);
        let zq = array![[f64::NAN, 0.0]];
        assert!(matches!(
            decode_and_project(&model.decoder, zq.view(), NormStats::IDENTITY),
            Err(Error::NonFinite(_))
        ));
    }
}
