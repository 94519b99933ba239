use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forecaster::{backward, forward_batch, normalize_rows, Batch, Gradients, QuantizerMode};
use super::loss::LossBreakdown;
use super::optim::{AdamConfig, AdamState};
use super::params::{ModelConfig, ModelParams};
use crate::data::{ForecastInstance, WindowSet};
use crate::memory::{PrototypeMemory, QuantizationResult};
use crate::{Error, Result};

/// Anything that can hand out forecast instances by index.
pub trait InstanceSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> ForecastInstance;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl InstanceSource for [ForecastInstance] {
    fn len(&self) -> usize {
        <[ForecastInstance]>::len(self)
    }

    fn get(&self, index: usize) -> ForecastInstance {
        self[index].clone()
    }
}

impl InstanceSource for Vec<ForecastInstance> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> ForecastInstance {
        self[index].clone()
    }
}

impl InstanceSource for WindowSet<'_> {
    fn len(&self) -> usize {
        WindowSet::len(self)
    }

    fn get(&self, index: usize) -> ForecastInstance {
        WindowSet::get(self, index)
    }
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Weight of the commitment term.
    pub beta: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Count prototype usage over the last local epoch only instead of the whole round.
    pub usage_final_epoch_only: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta: 0.25,
            adam: AdamConfig::with_lr(1e-5),
            batch_size: 32,
            usage_final_epoch_only: false,
        }
    }
}

/// Scale on which evaluation metrics are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScale {
    /// Predictions and targets standardized by the lookback statistics.
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// One domain's trainable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub domain_id: String,
    pub config: ModelConfig,
    pub hyper: Hyperparams,
    pub model: ModelParams,
    pub memory: PrototypeMemory,
    pub model_opt: AdamState,
    pub memory_opt: AdamState,
}

/// Summary of one local round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrainStats {
    /// Mean batch loss over the round.
    pub loss: LossBreakdown,
    pub steps: usize,
    pub usage: Vec<u64>,
}

impl ClientState {
    pub fn new<R: Rng + ?Sized>(
        domain_id: impl Into<String>,
        config: ModelConfig,
        hyper: Hyperparams,
        memory: PrototypeMemory,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if hyper.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let domain_id = domain_id.into();
        let state = Self {
            model: ModelParams::init(&config, rng),
            domain_id: domain_id.clone(),
            config,
            hyper,
            memory: memory.with_domain(domain_id),
            model_opt: AdamState::default(),
            memory_opt: AdamState::default(),
        };
        state.check_memory_shape(&state.memory)?;
        Ok(state)
    }

    fn check_memory_shape(&self, memory: &PrototypeMemory) -> Result<()> {
        if memory.size() != self.config.memory_size || memory.dim() != self.config.dim {
            return Err(Error::ShapeMismatch(format!(
                "memory is {} x {}, client expects {} x {}",
                memory.size(),
                memory.dim(),
                self.config.memory_size,
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Replaces the local memory (a download from the server). Prototype
    /// optimizer moments restart because rows no longer line up.
    pub fn install_memory(&mut self, memory: PrototypeMemory) -> Result<()> {
        self.check_memory_shape(&memory)?;
        memory.check_finite()?;
        self.memory = memory.with_domain(self.domain_id.clone());
        self.memory.reset_usage();
        self.memory_opt.reset();
        Ok(())
    }

    /// Prediction, latents and retrieval for one instance.
    pub fn forward(
        &mut self,
        instance: &ForecastInstance,
        record_usage: bool,
    ) -> Result<(Vec<f64>, Array2<f64>, QuantizationResult)> {
        let batch = Batch::new(&self.config, [instance])?;
        let pass = forward_batch(&self.model, &self.memory, &batch, QuantizerMode::Memory)?;
        if record_usage {
            self.memory.record_usage(&pass.quantized.indices);
        }
        let pred = pass.predictions.row(0).to_vec();
        Ok((pred, pass.z, pass.quantized))
    }

    /// Gradients of one batch without updating anything.
    pub fn gradients(
        &self,
        instances: &[ForecastInstance],
        mode: QuantizerMode,
    ) -> Result<(LossBreakdown, Gradients)> {
        let batch = Batch::new(&self.config, instances)?;
        let pass = forward_batch(&self.model, &self.memory, &batch, mode)?;
        backward(&self.model, &self.config, &batch, &pass, self.hyper.beta)
    }

    /// One optimizer step on a batch, counting prototype usage.
    pub fn train_step(&mut self, instances: &[ForecastInstance]) -> Result<LossBreakdown> {
        self.train_step_with(instances, QuantizerMode::Memory)
    }

    pub fn train_step_with(
        &mut self,
        instances: &[ForecastInstance],
        mode: QuantizerMode,
    ) -> Result<LossBreakdown> {
        let batch = Batch::new(&self.config, instances)?;
        let pass = forward_batch(&self.model, &self.memory, &batch, mode)?;
        let (loss, grads) = backward(&self.model, &self.config, &batch, &pass, self.hyper.beta)?;
        if let Some((name, _)) = grads
            .model
            .tensors()
            .into_iter()
            .find(|(_, t)| !t.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "gradient of {name}; step aborted"
            )));
        }
        if !grads.memory.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient of memory; step aborted".into()));
        }
        if mode == QuantizerMode::Memory {
            self.memory.record_usage(&pass.quantized.indices);
        }
        self.apply_gradients(&grads);
        Ok(loss)
    }

    fn apply_gradients(&mut self, grads: &Gradients) {
        let adam = self.hyper.adam;
        let grad_tensors: Vec<&[f64]> = grads.model.tensors().into_iter().map(|(_, t)| t).collect();
        let params: Vec<&mut [f64]> = self
            .model
            .tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        self.model_opt.apply(&adam, params, grad_tensors);
        self.memory_opt.apply(
            &adam,
            vec![self.memory.vectors.as_slice_mut().expect("standard layout")],
            vec![grads.memory.as_slice().expect("standard layout")],
        );
    }

    /// `epochs` passes over `instances` in a seeded shuffled order. Usage is
    /// reset first and accumulated over the whole round.
    pub fn train_round<S, R>(
        &mut self,
        instances: &S,
        epochs: usize,
        rng: &mut R,
    ) -> Result<RoundTrainStats>
    where
        S: InstanceSource + ?Sized,
        R: Rng + ?Sized,
    {
        if epochs == 0 {
            return Err(Error::InvalidArgument(
                "local epochs must be at least 1".into(),
            ));
        }
        if instances.is_empty() {
            return Err(Error::Empty(format!(
                "no training instances for domain {}",
                self.domain_id
            )));
        }
        self.memory.reset_usage();
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        let mut buf = Vec::with_capacity(self.hyper.batch_size);
        for epoch in 0..epochs {
            if self.hyper.usage_final_epoch_only && epoch + 1 == epochs {
                self.memory.reset_usage();
            }
            order.shuffle(rng);
            for chunk in order.chunks(self.hyper.batch_size) {
                buf.clear();
                buf.extend(chunk.iter().map(|&i| instances.get(i)));
                let loss = self.train_step(&buf)?;
                sum.total += loss.total;
                sum.prediction += loss.prediction;
                sum.commitment += loss.commitment;
                sum.codebook += loss.codebook;
                steps += 1;
            }
        }
        let n = steps as f64;
        Ok(RoundTrainStats {
            loss: LossBreakdown {
                total: sum.total / n,
                prediction: sum.prediction / n,
                commitment: sum.commitment / n,
                codebook: sum.codebook / n,
            },
            steps,
            usage: self.memory.usage.clone(),
        })
    }

    /// Raw-scale forecasts for a set of instances, `n x F`. Read-only.
    pub fn predict<S: InstanceSource + ?Sized>(&self, instances: &S) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(instances.len() * self.config.horizon);
        let chunk = 256;
        let mut start = 0;
        while start < instances.len() {
            let end = (start + chunk).min(instances.len());
            let items: Vec<ForecastInstance> = (start..end).map(|i| instances.get(i)).collect();
            let batch = Batch::new(&self.config, &items)?;
            let pass = forward_batch(&self.model, &self.memory, &batch, QuantizerMode::Memory)?;
            rows.extend(pass.predictions.iter());
            start = end;
        }
        Array2::from_shape_vec((instances.len(), self.config.horizon), rows)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    /// MSE and MAE over every instance and horizon step. No usage is recorded
    /// and no parameter changes.
    pub fn evaluate<S: InstanceSource + ?Sized>(
        &self,
        instances: &S,
        scale: MetricScale,
    ) -> Result<Metrics> {
        if instances.is_empty() {
            return Err(Error::Empty(format!(
                "no evaluation instances for domain {}",
                self.domain_id
            )));
        }
        let mut se = 0.0;
        let mut ae = 0.0;
        let mut count = 0usize;
        let chunk = 256;
        let mut start = 0;
        while start < instances.len() {
            let end = (start + chunk).min(instances.len());
            let items: Vec<ForecastInstance> = (start..end).map(|i| instances.get(i)).collect();
            let batch = Batch::new(&self.config, &items)?;
            let pass = forward_batch(&self.model, &self.memory, &batch, QuantizerMode::Memory)?;
            let (pred, target) = match scale {
                MetricScale::Raw => (pass.predictions, batch.targets),
                MetricScale::Normalized => (
                    normalize_rows(&pass.predictions, &batch.norms),
                    normalize_rows(&batch.targets, &batch.norms),
                ),
            };
            for (p, y) in pred.iter().zip(target.iter()) {
                se += (p - y) * (p - y);
                ae += (p - y).abs();
            }
            count += pred.len();
            start = end;
        }
        Ok(Metrics {
            mse: se / count as f64,
            mae: ae / count as f64,
        })
    }
}

/// MSE / MAE between paired predictions and targets.
pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    let n = pred.len() as f64;
    Ok(Metrics {
        mse: pred
            .iter()
            .zip(target)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n,
        mae: pred
            .iter()
            .zip(target)
            .map(|(p, y)| (p - y).abs())
            .sum::<f64>()
            / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ForecastInstance, NormStats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_client(seed: u64) -> ClientState {
        let config = ModelConfig::new(8, 2, 4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = PrototypeMemory::init_with_rng(5, 3, &mut rng).unwrap();
        ClientState::new(
            "d0",
            config,
            Hyperparams {
                adam: AdamConfig::with_lr(1e-2),
                ..Default::default()
            },
            memory,
            &mut rng,
        )
        .unwrap()
    }

    fn instance(seed: u64) -> ForecastInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ForecastInstance {
            lookback: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            target: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            channel: 0,
            start: 0,
            norm: NormStats {
                mean: 0.5,
                std: 1.5,
            },
        }
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let mut c = tiny_client(0);
        let data = vec![instance(1)];
        assert!(c
            .train_round(&data, 0, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn usage_counts_every_patch_of_every_epoch() {
        let mut c = tiny_client(0);
        let data = vec![instance(1)];
        let stats = c
            .train_round(&data, 2, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(stats.usage.iter().sum::<u64>(), 2 * 2);
        assert_eq!(stats.steps, 2);

        let mut c = tiny_client(0);
        c.hyper.usage_final_epoch_only = true;
        let stats = c
            .train_round(&data, 3, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(stats.usage.iter().sum::<u64>(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..10).map(instance).collect();
        let run = || {
            let mut c = tiny_client(4);
            c.train_round(&data, 3, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
            c
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_prototype_memory_maps_every_patch_to_it() {
        let config = ModelConfig::new(8, 2, 4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let memory = PrototypeMemory::init_with_rng(1, 3, &mut rng).unwrap();
        let mut c =
            ClientState::new("d", config, Hyperparams::default(), memory, &mut rng).unwrap();
        let (pred, z, q) = c.forward(&instance(2), false).unwrap();
        assert_eq!(pred.len(), 2);
        assert_eq!(q.indices, vec![0, 0]);
        assert_eq!(q.quantized.row(0), q.quantized.row(1));
        assert_eq!(z.nrows(), 2);
    }

    #[test]
    fn memory_of_encoder_outputs_has_zero_quantization_loss() {
        let mut c = tiny_client(3);
        let inst = instance(5);
        let (_, z, _) = c.forward(&inst, false).unwrap();
        let mut vectors = c.memory.vectors.clone();
        vectors.row_mut(0).assign(&z.row(0));
        vectors.row_mut(1).assign(&z.row(1));
        c.memory.vectors = vectors;
        let (loss, _) = c
            .gradients(std::slice::from_ref(&inst), QuantizerMode::Memory)
            .unwrap();
        assert_eq!(loss.commitment, 0.0);
        assert_eq!(loss.codebook, 0.0);
    }

    #[test]
    fn evaluation_metrics() {
        assert_eq!(
            metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            Metrics { mse: 0.0, mae: 0.0 }
        );
        let m = metrics(&[2.0, 3.0, -1.0], &[1.0, 2.0, -2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        assert!(metrics(&[], &[]).is_err());

        let c = tiny_client(1);
        let empty: Vec<ForecastInstance> = Vec::new();
        assert!(c.evaluate(&empty, MetricScale::Normalized).is_err());
    }

    #[test]
    fn evaluation_averages_equal_sized_instances() {
        let c = tiny_client(2);
        let a = instance(1);
        let b = instance(2);
        let ma = c
            .evaluate(&vec![a.clone()], MetricScale::Normalized)
            .unwrap();
        let mb = c
            .evaluate(&vec![b.clone()], MetricScale::Normalized)
            .unwrap();
        let both = c.evaluate(&vec![a, b], MetricScale::Normalized).unwrap();
        assert!((both.mse - 0.5 * (ma.mse + mb.mse)).abs() < 1e-12);
    }

    #[test]
    fn evaluate_leaves_state_untouched() {
        let c = tiny_client(2);
        let before = c.clone();
        c.evaluate(&vec![instance(3)], MetricScale::Raw).unwrap();
        assert_eq!(c, before);
    }
}
