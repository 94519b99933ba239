use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};

use super::config::{NoiseKind, NoiseSpec};
use crate::memory::PrototypeMemory;
use crate::{Error, Result};

/// Laplace sample by inverse CDF of a uniform draw on `(-1/2, 1/2)`.
fn laplace<R: Rng + ?Sized>(mu: f64, scale: f64, rng: &mut R) -> f64 {
    let mut u: f64 = rng.random::<f64>() - 0.5;
    while u == -0.5 {
        u = rng.random::<f64>() - 0.5;
    }
    mu - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds i.i.d. noise to every prototype value. Usage counts are untouched.
pub fn inject_noise<R: Rng + ?Sized>(
    memory: &PrototypeMemory,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<PrototypeMemory> {
    spec.validate()?;
    let mut out = memory.clone();
    let invalid = |e: &dyn std::fmt::Display| Error::Config(format!("noise {spec:?}: {e}"));
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::Gaussian => {
            let dist = Normal::new(spec.mu, spec.lambda).map_err(|e| invalid(&e))?;
            out.vectors.mapv_inplace(|v| v + dist.sample(rng));
        }
        NoiseKind::Laplace => {
            out.vectors
                .mapv_inplace(|v| v + laplace(spec.mu, spec.lambda, rng));
        }
        NoiseKind::Exponential => {
            let dist = Exp::new(spec.lambda).map_err(|e| invalid(&e))?;
            out.vectors.mapv_inplace(|v| v + dist.sample(rng));
        }
    }
    Ok(out)
}
