//! Finite-difference verification of the hand-derived gradients.
//!
//! Retrieval is frozen at the base point, so the objective becomes a smooth
//! function of every parameter:
//!
//! ```text
//! L(theta, P) = pred(dec(Z(theta) + Zq0 - Z0))
//!             + beta * mean((Z(theta) - Zq0)^2)
//!             + mean((Z0 - P[idx])^2)
//! ```
//!
//! where `Z0` and `Zq0 = P0[idx]` are constants taken from the base forward
//! pass. Its exact gradient is what the analytic backward pass must produce.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ForecastInstance, NormStats};
use crate::memory::PrototypeMemory;
use crate::model::{
    backward, decode_rows, encode_rows, forward_batch, smooth_l1, Batch, ModelConfig, ModelParams,
    QuantizerMode,
};
use crate::seed::{stream, Purpose};
use crate::{Error, Result};

/// Group name of the prototype memory in reports.
pub const MEMORY_GROUP: &str = "memory";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub step: f64,
    pub beta: f64,
    /// Test hook: perturb the analytic gradient of this group before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            tolerance: 1e-4,
            step: 1e-5,
            beta: 0.25,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub config: ModelConfig,
    pub instances: usize,
    /// Largest relative error per parameter group.
    pub max_relative_error: BTreeMap<String, f64>,
    pub unselected_rows_zero: bool,
    pub decoder_independent_of_quantization_terms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: Vec<TrialReport>,
    /// Largest relative error per group over all trials.
    pub max_relative_error: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradcheckReport {
    /// Groups over tolerance, worst first.
    pub fn failures(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .max_relative_error
            .iter()
            .filter(|(_, &e)| e.is_nan() || e >= self.tolerance)
            .map(|(g, &e)| (g.clone(), e))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    pub fn structural_failures(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| !t.unselected_rows_zero || !t.decoder_independent_of_quantization_terms)
            .count()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.structural_failures() == 0
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off on
/// near-zero entries from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Name of the parameter group a tensor belongs to (`decoder.head.weight` ->
/// `decoder.head`).
pub fn group_of(tensor: &str) -> &str {
    tensor
        .strip_suffix(".weight")
        .or_else(|| tensor.strip_suffix(".bias"))
        .unwrap_or(tensor)
}

/// A small random problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: ModelConfig,
    pub model: ModelParams,
    pub memory: PrototypeMemory,
    pub instances: Vec<ForecastInstance>,
}

/// Draws a configuration with at most 4 patches, dimension 6, 8 prototypes
/// and horizon 3.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R) -> Result<Problem> {
    let patch_len = rng.random_range(1..=3);
    let patches = rng.random_range(1..=4);
    // Any lookback in ((B - 1) S, B S] yields exactly B patches.
    let lookback = if patches == 1 {
        patch_len
    } else {
        patch_len * (patches - 1) + rng.random_range(1..=patch_len)
    };
    let dim = rng.random_range(1..=6);
    let m = rng.random_range(1..=8);
    let horizon = rng.random_range(1..=3);
    let mut config = ModelConfig::new(lookback, horizon, patch_len, dim, m);
    config.hidden = rng.random_range(1..=2 * dim);
    config.validate()?;
    let model = ModelParams::init(&config, rng);
    let memory = PrototypeMemory::init_with_rng(m, dim, rng)?;
    let n = rng.random_range(1..=3);
    let instances = (0..n)
        .map(|i| {
            let norm = NormStats {
                mean: rng.random_range(-2.0..2.0),
                std: rng.random_range(0.2..3.0),
            };
            ForecastInstance {
                lookback: (0..lookback).map(|_| rng.random_range(-2.0..2.0)).collect(),
                target: (0..horizon).map(|_| rng.random_range(-4.0..4.0)).collect(),
                channel: 0,
                start: i,
                norm,
            }
        })
        .collect();
    Ok(Problem {
        config,
        model,
        memory,
        instances,
    })
}

struct Frozen {
    indices: Vec<usize>,
    z0: Array2<f64>,
    zq0: Array2<f64>,
}

fn surrogate(
    model: &ModelParams,
    memory: &Array2<f64>,
    batch: &Batch,
    frozen: &Frozen,
    beta: f64,
) -> Result<f64> {
    let (z, _) = encode_rows(&model.encoder, batch.patches.clone())?;
    let decoder_input = &z + &frozen.zq0 - &frozen.z0;
    let (pred, _) = decode_rows(&model.decoder, decoder_input, &batch.norms)?;
    let pred_loss = pred
        .iter()
        .zip(batch.targets.iter())
        .map(|(p, y)| smooth_l1(p - y))
        .sum::<f64>()
        / pred.len() as f64;
    let count = z.len() as f64;
    let commit = z
        .iter()
        .zip(frozen.zq0.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / count;
    let mut book = 0.0;
    for (row, &k) in frozen.indices.iter().enumerate() {
        for j in 0..z.ncols() {
            book += (frozen.z0[[row, j]] - memory[[k, j]]).powi(2);
        }
    }
    Ok(pred_loss + beta * commit + book / count)
}

/// Checks one problem.
pub fn check_problem(problem: &Problem, options: &GradcheckOptions) -> Result<TrialReport> {
    let Problem {
        config,
        model,
        memory,
        instances,
    } = problem;
    let batch = Batch::new(config, instances)?;
    let pass = forward_batch(model, memory, &batch, QuantizerMode::Memory)?;
    let (_, base) = backward(model, config, &batch, &pass, options.beta)?;
    let frozen = Frozen {
        indices: pass.quantized.indices.clone(),
        z0: pass.z.clone(),
        zq0: pass.quantized.quantized.clone(),
    };

    let unselected_rows_zero = (0..memory.size())
        .filter(|k| !frozen.indices.contains(k))
        .all(|k| base.memory.row(k).iter().all(|&g| g == 0.0));

    // The decoder only sees the prediction loss, so neither beta nor dropping
    // the quantization terms may move its gradient.
    let mut decoder_independent_of_quantization_terms = true;
    for beta in [0.0, 1.0, 10.0] {
        let (_, other) = backward(model, config, &batch, &pass, beta)?;
        decoder_independent_of_quantization_terms &= other.model.decoder == base.model.decoder;
    }
    let mut bypassed = pass.clone();
    bypassed.mode = QuantizerMode::Bypass;
    let (_, plain) = backward(model, config, &batch, &bypassed, options.beta)?;
    decoder_independent_of_quantization_terms &= plain.model.decoder == base.model.decoder;

    let mut grads = base;
    if let Some(target) = &options.corrupt {
        for (name, t) in grads.model.tensors_mut() {
            if group_of(&name) == target {
                t.iter_mut().for_each(|g| *g = *g * 1.01 + 1e-3);
            }
        }
        if target == MEMORY_GROUP {
            grads.memory.mapv_inplace(|g| g * 1.01 + 1e-3);
        }
    }

    let h = options.step;
    let mut errors: BTreeMap<String, f64> = BTreeMap::new();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let mut probe = model.clone();
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let group = group_of(name).to_string();
        for (i, &g) in grad.iter().enumerate() {
            let original = probe.tensors()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = original + h;
            let up = surrogate(&probe, &memory.vectors, &batch, &frozen, options.beta)?;
            probe.tensors_mut()[ti].1[i] = original - h;
            let down = surrogate(&probe, &memory.vectors, &batch, &frozen, options.beta)?;
            probe.tensors_mut()[ti].1[i] = original;
            let err = relative_error(g, (up - down) / (2.0 * h));
            let slot = errors.entry(group.clone()).or_insert(0.0);
            *slot = slot.max(err);
        }
    }

    let mut vectors = memory.vectors.clone();
    let mut memory_err: f64 = 0.0;
    for k in 0..vectors.nrows() {
        for j in 0..vectors.ncols() {
            let original = vectors[[k, j]];
            vectors[[k, j]] = original + h;
            let up = surrogate(model, &vectors, &batch, &frozen, options.beta)?;
            vectors[[k, j]] = original - h;
            let down = surrogate(model, &vectors, &batch, &frozen, options.beta)?;
            vectors[[k, j]] = original;
            memory_err = memory_err.max(relative_error(
                grads.memory[[k, j]],
                (up - down) / (2.0 * h),
            ));
        }
    }
    errors.insert(MEMORY_GROUP.to_string(), memory_err);

    Ok(TrialReport {
        config: *config,
        instances: instances.len(),
        max_relative_error: errors,
        unselected_rows_zero,
        decoder_independent_of_quantization_terms,
    })
}

/// Runs `options.trials` random problems.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    if options.trials == 0 {
        return Err(Error::InvalidArgument(
            "gradcheck needs at least one trial".into(),
        ));
    }
    let mut trials = Vec::with_capacity(options.trials);
    let mut overall: BTreeMap<String, f64> = BTreeMap::new();
    for t in 0..options.trials {
        let mut rng = stream(options.seed, Purpose::Gradcheck, t as u64, 0);
        let problem = random_problem(&mut rng)?;
        let report = check_problem(&problem, options)?;
        for (g, &e) in &report.max_relative_error {
            let slot = overall.entry(g.clone()).or_insert(0.0);
            *slot = slot.max(e);
        }
        trials.push(report);
    }
    Ok(GradcheckReport {
        trials,
        max_relative_error: overall,
        tolerance: options.tolerance,
    })
}
