use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            bias: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// Position-wise residual MLP: `h + W2 gelu(W1 h + b1) + b2`, applied to each
/// token row independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpBlock {
    pub up: Linear,
    pub down: Linear,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl MlpBlock {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::init(dim, hidden, rng),
            down: Linear::init(hidden, dim, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::zeros(dim, hidden),
            down: Linear::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, h: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let pre = self.up.forward(h.view());
        let act = pre.mapv(gelu);
        let out = &h + &self.down.forward(act.view());
        (out, BlockCache { input: h, pre, act })
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dout: ArrayView2<'_, f64>,
        grad: &mut MlpBlock,
    ) -> Array2<f64> {
        let mut dact = self.down.backward(cache.act.view(), dout, &mut grad.down);
        ndarray::Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= gelu_grad(p));
        let dh = self
            .up
            .backward(cache.input.view(), dact.view(), &mut grad.up);
        dh + dout
    }
}
