//! Dense layers and shared MLPs with cached forward passes for backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Affine map `x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_simple_fn(output, || rng.random_range(-bound..=bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }
}

/// Shared MLP with ReLU after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations of every layer from a cached forward pass (`acts[0]` is the input).
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub acts: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds the input at least")
    }
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(input: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            layers.push(Dense::init(prev, w, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn zeros(input: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            layers.push(Dense::zeros(prev, w));
            prev = w;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Dense::output_dim).collect()
    }

    /// Checks that layer shapes chain from `input` through every width.
    pub fn check_chain(&self, input: usize, name: &str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch(format!("{name}: MLP has no layers")));
        }
        let mut prev = input;
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_dim() != prev {
                return Err(Error::ShapeMismatch(format!(
                    "{name}.mlp.{i}.weight expects input {}, previous layer gives {prev}",
                    l.input_dim()
                )));
            }
            if l.bias.len() != l.output_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}.mlp.{i}.bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
            prev = l.output_dim();
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(h.view());
            h.mapv_inplace(relu);
        }
        h
    }

    pub fn forward_trace(&self, x: Array2<f64>) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let mut h = layer.forward(acts.last().unwrap().view());
            h.mapv_inplace(relu);
            acts.push(h);
        }
        MlpTrace { acts }
    }

    /// Backpropagates `d_out` through a cached pass, accumulating into `grad`.
    /// Returns the gradient with respect to the MLP input.
    pub fn backward(&self, trace: &MlpTrace, d_out: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = d_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.acts[l + 1];
            // ReLU subgradient is zero at the kink
            ndarray::Zip::from(&mut d).and(out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            let input = &trace.acts[l];
            grad.layers[l].weight += &input.t().dot(&d);
            grad.layers[l].bias += &d.sum_axis(Axis(0));
            d = d.dot(&layer.weight.t());
        }
        d
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)`, evaluated without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(3, &[5, 4], &mut rng);
        let x = array![[0.3, -0.2, 0.9], [1.0, 0.4, -0.5]];
        let loss = |m: &Mlp| m.forward(x.view()).sum();
        let trace = mlp.forward_trace(x.clone());
        let mut grad = Mlp::zeros(3, &[5, 4]);
        mlp.backward(&trace, Array2::ones((2, 4)), &mut grad);
        let h = 1e-6;
        for l in 0..2 {
            for idx in 0..mlp.layers[l].weight.len() {
                let mut p = mlp.clone();
                let mut m = mlp.clone();
                p.layers[l].weight.as_slice_mut().unwrap()[idx] += h;
                m.layers[l].weight.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grad.layers[l].weight.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-6, "layer {l} idx {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn chain_check_names_the_bad_tensor() {
        let mut mlp = Mlp::zeros(4, &[8, 8]);
        assert!(mlp.check_chain(4, "sa1").is_ok());
        mlp.layers[1] = Dense::zeros(7, 8);
        let err = mlp.check_chain(4, "sa1").unwrap_err().to_string();
        assert!(err.contains("sa1.mlp.1.weight"), "{err}");
    }
}
