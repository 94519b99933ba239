//! The discrete prototype memory (codebook).
//!
//! A memory holds `M` prototype vectors of dimension `D` plus a usage counter
//! per prototype. Retrieval snaps a latent vector to its nearest prototype in
//! Euclidean distance; ties go to the lowest index so simulations replay
//! exactly.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::seed::{stream, Purpose};
use crate::{Error, Result};

/// Where a memory slot came from in the most recent server assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Shared,
    Personalized,
    Fresh,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Shared => "shared",
            Provenance::Personalized => "personalized",
            Provenance::Fresh => "fresh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMemory {
    pub domain_id: String,
    /// `M x D`, one prototype per row.
    pub vectors: Array2<f64>,
    /// Number of patch latents assigned to each prototype since the last reset.
    pub usage: Vec<u64>,
    pub provenance: Vec<Provenance>,
}

/// Per-patch retrieval output.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// Row `b` is a copy of memory row `indices[b]`.
    pub quantized: Array2<f64>,
}

/// Rows drawn i.i.d. from `uniform(-1/sqrt(D), 1/sqrt(D))`.
pub fn sample_rows<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, dim), || dist.sample(rng))
}

impl PrototypeMemory {
    /// Randomly initialized memory; identical for identical `(m, d, seed)`.
    pub fn init(m: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Purpose::MemoryInit, 0, 0);
        Self::init_with_rng(m, d, &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "memory needs at least one row and one dimension, got {m} x {d}"
            )));
        }
        Ok(Self::from_vectors(
            sample_rows(m, d, rng),
            Provenance::Fresh,
        ))
    }

    pub fn from_vectors(vectors: Array2<f64>, provenance: Provenance) -> Self {
        let vectors = vectors.as_standard_layout().into_owned();
        let m = vectors.nrows();
        Self {
            domain_id: String::new(),
            vectors,
            usage: vec![0; m],
            provenance: vec![provenance; m],
        }
    }

    /// Replaces the per-row provenance; one entry per row.
    pub fn with_provenance(mut self, provenance: Vec<Provenance>) -> Result<Self> {
        if provenance.len() != self.size() {
            return Err(Error::ShapeMismatch(format!(
                "{} provenance entries for {} rows",
                provenance.len(),
                self.size()
            )));
        }
        self.provenance = provenance;
        Ok(self)
    }

    pub fn with_domain(mut self, domain_id: impl Into<String>) -> Self {
        self.domain_id = domain_id.into();
        self
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.vectors.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "memory of domain {:?}",
                self.domain_id
            )))
        }
    }

    /// Nearest prototype to `z`; lowest index wins ties. Does not touch usage.
    pub fn retrieve(&self, z: ArrayView1<'_, f64>) -> Result<(usize, ArrayView1<'_, f64>)> {
        if z.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "query has dimension {}, memory has {}",
                z.len(),
                self.dim()
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("retrieval query".into()));
        }
        let index = self.nearest(&z.to_vec());
        Ok((index, self.vectors.row(index)))
    }

    fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, row) in self.vectors.outer_iter().enumerate() {
            let dist = squared_distance(z, row.as_slice().expect("memory rows are contiguous"));
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        best
    }

    /// Read-only row-wise retrieval.
    pub fn quantize(&self, z: ArrayView2<'_, f64>) -> Result<QuantizationResult> {
        if z.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latents have dimension {}, memory has {}",
                z.ncols(),
                self.dim()
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("retrieval query".into()));
        }
        let z = z.as_standard_layout();
        let indices: Vec<usize> = z
            .outer_iter()
            .map(|row| self.nearest(row.as_slice().expect("standard layout")))
            .collect();
        let quantized = self.vectors.select(Axis(0), &indices);
        Ok(QuantizationResult { indices, quantized })
    }

    /// Row-wise retrieval, optionally counting each assignment in `usage`.
    pub fn retrieve_batch(
        &mut self,
        z: ArrayView2<'_, f64>,
        record_usage: bool,
    ) -> Result<QuantizationResult> {
        let result = self.quantize(z)?;
        if record_usage {
            self.record_usage(&result.indices);
        }
        Ok(result)
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    /// Flat little-endian wire form: `M*D` f64 prototype values (row-major)
    /// followed by `M` u64 usage counts. This is exactly what crosses the
    /// network in a round.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(wire_size(self.size(), self.dim()));
        for v in self.vectors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for u in &self.usage {
            out.extend_from_slice(&u.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_wire`](Self::to_wire). Provenance is not transmitted
    /// and comes back as [`Provenance::Fresh`].
    pub fn from_wire(bytes: &[u8], m: usize, d: usize) -> Result<Self> {
        if bytes.len() != wire_size(m, d) {
            return Err(Error::Serialization(format!(
                "expected {} bytes for a {m} x {d} memory, got {}",
                wire_size(m, d),
                bytes.len()
            )));
        }
        let (floats, counts) = bytes.split_at(m * d * 8);
        let values: Vec<f64> = floats
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let usage = counts
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let vectors = Array2::from_shape_vec((m, d), values)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(Self {
            domain_id: String::new(),
            vectors,
            usage,
            provenance: vec![Provenance::Fresh; m],
        })
    }

    /// Applies a row permutation: new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            domain_id: self.domain_id.clone(),
            vectors: self.vectors.select(Axis(0), perm),
            usage: perm.iter().map(|&i| self.usage[i]).collect(),
            provenance: perm.iter().map(|&i| self.provenance[i]).collect(),
        }
    }
}

/// Bytes of one serialized memory upload or download.
pub fn wire_size(m: usize, d: usize) -> usize {
    8 * m * d + 8 * m
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Value of a quantization loss together with its gradients with respect to
/// both inputs. One of the two gradients is always exactly zero: that input
/// sits behind a stop-gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLoss {
    pub value: f64,
    pub grad_latent: Array2<f64>,
    pub grad_quantized: Array2<f64>,
}

fn mean_sq(z: ArrayView2<'_, f64>, zq: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if z.dim() != zq.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            z.dim(),
            zq.dim()
        )));
    }
    let n = z.len().max(1) as f64;
    let diff = &z - &zq;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// `mean((Z - sg(Zq))^2)`: pulls latents toward their prototypes.
pub fn commitment_loss(z: ArrayView2<'_, f64>, zq: ArrayView2<'_, f64>) -> Result<QuantLoss> {
    let (value, grad) = mean_sq(z, zq)?;
    Ok(QuantLoss {
        value,
        grad_quantized: Array2::zeros(grad.dim()),
        grad_latent: grad,
    })
}

/// `mean((sg(Z) - Zq)^2)`: pulls the selected prototypes toward the latents.
pub fn codebook_loss(z: ArrayView2<'_, f64>, zq: ArrayView2<'_, f64>) -> Result<QuantLoss> {
    let (value, grad) = mean_sq(zq, z)?;
    Ok(QuantLoss {
        value,
        grad_latent: Array2::zeros(grad.dim()),
        grad_quantized: grad,
    })
}

/// Scatters per-patch gradients onto memory rows: row `k` receives the sum of
/// the gradients of every patch assigned to it; all other rows stay zero.
pub fn scatter_to_memory(
    grad_quantized: ArrayView2<'_, f64>,
    indices: &[usize],
    m: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((m, grad_quantized.ncols()));
    for (row, &k) in grad_quantized.outer_iter().zip(indices) {
        let mut target = out.row_mut(k);
        target += &row;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_argmin(memory: &Array2<f64>, z: &Array1<f64>) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..memory.nrows() {
            let mut d = 0.0;
            for j in 0..z.len() {
                d += (memory[[i, j]] - z[j]).powi(2);
            }
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    #[test]
    fn init_is_deterministic() {
        let a = PrototypeMemory::init(256, 64, 7).unwrap();
        let b = PrototypeMemory::init(256, 64, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.usage.iter().all(|&u| u == 0));
        assert!(a.provenance.iter().all(|&p| p == Provenance::Fresh));
        let mean = a.vectors.mean().unwrap();
        assert!(mean.abs() < 0.02, "mean {mean}");
        let bound = 1.0 / 8.0;
        assert!(a.vectors.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_edge_cases() {
        let one = PrototypeMemory::init(1, 1, 0).unwrap();
        assert!(one.vectors[[0, 0]].is_finite());
        assert!(PrototypeMemory::init(0, 4, 0).is_err());
        assert!(PrototypeMemory::init(4, 0, 0).is_err());
    }

    #[test]
    fn retrieve_examples() {
        let mem = PrototypeMemory::from_vectors(array![[0.0, 0.0], [1.0, 1.0]], Provenance::Fresh);
        let (i, row) = mem.retrieve(array![0.9, 0.8].view()).unwrap();
        assert_eq!(i, 1);
        assert_eq!(row, array![1.0, 1.0]);

        let tie = PrototypeMemory::from_vectors(array![[1.0, 0.0], [1.0, 0.0]], Provenance::Fresh);
        assert_eq!(tie.retrieve(array![2.0, 0.0].view()).unwrap().0, 0);

        let mem = PrototypeMemory::init(8, 3, 1).unwrap();
        let z = mem.vectors.row(3).to_owned();
        assert_eq!(mem.retrieve(z.view()).unwrap().0, 3);

        assert!(mem.retrieve(array![f64::NAN, 0.0, 0.0].view()).is_err());
        assert!(mem.retrieve(array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn batch_usage_accounting() {
        let mut mem = PrototypeMemory::init(16, 4, 3).unwrap();
        let z = mem.vectors.select(Axis(0), &[0, 0, 5]);
        let q = mem.retrieve_batch(z.view(), true).unwrap();
        assert_eq!(q.indices, vec![0, 0, 5]);
        assert_eq!(mem.usage[0], 2);
        assert_eq!(mem.usage[5], 1);
        assert_eq!(mem.usage.iter().sum::<u64>(), 3);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_rows(24, 4, &mut rng);
        mem.reset_usage();
        mem.retrieve_batch(z.view(), true).unwrap();
        assert_eq!(mem.usage.iter().sum::<u64>(), 24);

        let before = mem.usage.clone();
        mem.retrieve_batch(z.view(), false).unwrap();
        assert_eq!(mem.usage, before);
    }

    #[test]
    fn quantization_losses() {
        let z = array![[1.0, 1.0]];
        let zq = array![[0.0, 0.0]];
        assert_eq!(commitment_loss(z.view(), z.view()).unwrap().value, 0.0);
        assert_eq!(codebook_loss(z.view(), z.view()).unwrap().value, 0.0);
        let c = commitment_loss(z.view(), zq.view()).unwrap();
        assert_eq!(c.value, 1.0);
        assert!(c.grad_quantized.iter().all(|&g| g == 0.0));
        assert_eq!(c.grad_latent, array![[1.0, 1.0]]);
        let b = codebook_loss(z.view(), zq.view()).unwrap();
        assert!(b.grad_latent.iter().all(|&g| g == 0.0));
        assert_eq!(b.grad_quantized, array![[-1.0, -1.0]]);
        assert!(commitment_loss(z.view(), array![[1.0]].view()).is_err());
        assert!(codebook_loss(z.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn scatter_touches_only_selected_rows() {
        let g = array![[1.0, 2.0], [3.0, 4.0]];
        let out = scatter_to_memory(g.view(), &[2, 2], 5);
        assert_eq!(out.row(2), array![4.0, 6.0]);
        for k in [0, 1, 3, 4] {
            assert!(out.row(k).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wire_round_trip_and_size() {
        let mut mem = PrototypeMemory::init(256, 64, 9).unwrap();
        mem.usage[3] = 17;
        let bytes = mem.to_wire();
        assert_eq!(bytes.len(), 256 * 64 * 8 + 256 * 8);
        let back = PrototypeMemory::from_wire(&bytes, 256, 64).unwrap();
        assert_eq!(back.vectors, mem.vectors);
        assert_eq!(back.usage, mem.usage);
        assert!(PrototypeMemory::from_wire(&bytes[1..], 256, 64).is_err());
    }

    proptest! {
        #[test]
        fn retrieve_matches_brute_force(seed in any::<u64>(), m in 1usize..40, d in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mem = PrototypeMemory::init_with_rng(m, d, &mut rng).unwrap();
            let z = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            prop_assert_eq!(mem.retrieve(z.view()).unwrap().0, brute_argmin(&mem.vectors, &z));
        }

        #[test]
        fn quantized_rows_are_exact_copies(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mem = PrototypeMemory::init_with_rng(12, 5, &mut rng).unwrap();
            let z = sample_rows(9, 5, &mut rng);
            let q = mem.quantize(z.view()).unwrap();
            for (b, &k) in q.indices.iter().enumerate() {
                prop_assert!(k < 12);
                for j in 0..5 {
                    prop_assert_eq!(q.quantized[[b, j]].to_bits(), mem.vectors[[k, j]].to_bits());
                }
            }
        }

        #[test]
        fn permutation_covariance(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mem = PrototypeMemory::init_with_rng(10, 3, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..10).collect();
            perm.shuffle(&mut rng);
            let shuffled = mem.permuted(&perm);
            let z = sample_rows(6, 3, &mut rng);
            let a = mem.quantize(z.view()).unwrap();
            let b = shuffled.quantize(z.view()).unwrap();
            prop_assert_eq!(&a.quantized, &b.quantized);
            for (ia, ib) in a.indices.iter().zip(&b.indices) {
                prop_assert_eq!(perm[*ib], *ia);
            }
        }

        #[test]
        fn commitment_and_codebook_are_mirror_images(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = sample_rows(4, 3, &mut rng);
            let b = sample_rows(4, 3, &mut rng);
            let lhs = commitment_loss(a.view(), b.view()).unwrap().value;
            let rhs = codebook_loss(b.view(), a.view()).unwrap().value;
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn usage_equals_assignment_histogram(seed in any::<u64>(), batches in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mem = PrototypeMemory::init_with_rng(7, 2, &mut rng).unwrap();
            let mut stored = Vec::new();
            for _ in 0..batches {
                let z = sample_rows(5, 2, &mut rng);
                mem.retrieve_batch(z.view(), true).unwrap();
                stored.push(z);
            }
            let mut hist = vec![0u64; 7];
            for z in &stored {
                for row in z.outer_iter() {
                    hist[brute_argmin(&mem.vectors, &row.to_owned())] += 1;
                }
            }
            prop_assert_eq!(hist, mem.usage.clone());
        }
    }
}
