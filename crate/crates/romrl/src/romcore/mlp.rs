//! Fully connected networks with hand-rolled reverse mode.
//!
//! Both the residual correction term of the ROM and the neural feedback
//! policy are small dense networks.  Forward passes record layer inputs and
//! pre-activations so the adjoint pass can be replayed exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Output map applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputMap {
    Linear,
    /// `k * tanh(z)`: bounds every output component by `k`.
    ScaledTanh(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub hidden_activation: Activation,
    pub output: OutputMap,
}

/// Primal values recorded during one forward evaluation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each affine layer (length = number of layers).
    layer_inputs: Vec<DVector<f64>>,
    /// Pre-activation of each affine layer.
    pre_activations: Vec<DVector<f64>>,
}

/// Gradient with the same shape as the network parameters.
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn activate(act: Activation, z: &DVector<f64>) -> DVector<f64> {
    match act {
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::Tanh => z.map(f64::tanh),
    }
}

fn activate_grad(act: Activation, z: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    match act {
        Activation::Relu => z.zip_map(g, |zv, gv| if zv > 0.0 { gv } else { 0.0 }),
        Activation::Tanh => z.zip_map(g, |zv, gv| {
            let t = zv.tanh();
            (1.0 - t * t) * gv
        }),
    }
}

impl Mlp {
    /// Random-initialized network with the given layer widths, e.g.
    /// `[r + 1, 128, 128, 128, r]`.
    pub fn new<R: Rng>(
        sizes: &[usize],
        hidden_activation: Activation,
        output: OutputMap,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "network needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            // Kaiming-style scale; good enough for both relu and tanh here.
            let scale = (2.0 / n_in as f64).sqrt();
            weights.push(DMatrix::from_fn(n_out, n_in, |_, _| {
                (rng.gen::<f64>() * 2.0 - 1.0) * scale
            }));
            biases.push(DVector::zeros(n_out));
        }
        Mlp {
            weights,
            biases,
            hidden_activation,
            output,
        }
    }

    /// Zero the last affine layer so the initial network output is
    /// identically zero.
    pub fn zero_last_layer(&mut self) {
        if let Some(w) = self.weights.last_mut() {
            w.fill(0.0);
        }
        if let Some(b) = self.biases.last_mut() {
            b.fill(0.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        assert_eq!(x.len(), self.input_dim(), "mlp input dimension");
        let n = self.num_layers();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut h = x.clone();
        for l in 0..n {
            layer_inputs.push(h.clone());
            let z = &self.weights[l] * &h + &self.biases[l];
            pre_activations.push(z.clone());
            h = if l + 1 < n {
                activate(self.hidden_activation, &z)
            } else {
                match self.output {
                    OutputMap::Linear => z,
                    OutputMap::ScaledTanh(k) => z.map(|v| k * v.tanh()),
                }
            };
        }
        (
            h,
            MlpCache {
                layer_inputs,
                pre_activations,
            },
        )
    }

    /// Adjoint pass.  `out_grad` is dL/d(output); accumulates parameter
    /// gradients into `grad` and returns dL/d(input).
    pub fn backward(
        &self,
        cache: &MlpCache,
        out_grad: &DVector<f64>,
        grad: &mut MlpGrad,
    ) -> DVector<f64> {
        let n = self.num_layers();
        let mut g = match self.output {
            OutputMap::Linear => out_grad.clone(),
            OutputMap::ScaledTanh(k) => cache.pre_activations[n - 1].zip_map(out_grad, |z, gv| {
                let t = z.tanh();
                k * (1.0 - t * t) * gv
            }),
        };
        for l in (0..n).rev() {
            grad.weights[l].gemm(1.0, &g, &cache.layer_inputs[l].transpose(), 1.0);
            grad.biases[l] += &g;
            let gx = self.weights[l].tr_mul(&g);
            g = if l > 0 {
                activate_grad(self.hidden_activation, &cache.pre_activations[l - 1], &gx)
            } else {
                gx
            };
        }
        g
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weights: self
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn unflatten_into(&mut self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dimension(format!(
                "parameter vector length {} != {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&params.as_slice()[off..off + n]);
            off += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&params.as_slice()[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl MlpGrad {
    pub fn flatten(&self) -> DVector<f64> {
        let count: usize = self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = Vec::with_capacity(count);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Mlp::new(&[3, 8, 8, 2], Activation::Tanh, OutputMap::Linear, &mut rng)
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mlp::new(
            &[4, 16, 16, 16, 3],
            Activation::Relu,
            OutputMap::ScaledTanh(3e-4),
            &mut rng,
        );
        m.zero_last_layer();
        let y = m.forward(&DVector::from_fn(4, |i, _| i as f64 - 1.5));
        assert!(y.norm() == 0.0);
    }

    #[test]
    fn scaled_tanh_bounds_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 3e-4;
        let m = Mlp::new(
            &[2, 16, 4],
            Activation::Relu,
            OutputMap::ScaledTanh(k),
            &mut rng,
        );
        let y = m.forward(&DVector::from_vec(vec![1e9, -1e12]));
        assert!(y.amax() <= k);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = net();
        let x = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let (y, cache) = m.forward_cached(&x);
        // loss = sum(y^2)
        let out_grad = 2.0 * &y;
        let mut grad = m.zero_grad();
        let input_grad = m.backward(&cache, &out_grad, &mut grad);

        let loss = |m: &Mlp, x: &DVector<f64>| m.forward(x).norm_squared();
        let h = 1e-6;

        // input gradient check
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            assert!(
                (fd - input_grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input grad {i}: fd={fd} ad={}",
                input_grad[i]
            );
        }

        // a few parameter gradient checks
        let flat_grad = grad.flatten();
        let params = m.flatten();
        for idx in [0usize, 5, 17, params.len() - 1] {
            let mut mp = m.clone();
            let mut pp = params.clone();
            pp[idx] += h;
            mp.unflatten_into(&pp).unwrap();
            let fp = loss(&mp, &x);
            pp[idx] -= 2.0 * h;
            mp.unflatten_into(&pp).unwrap();
            let fm = loss(&mp, &x);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - flat_grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param grad {idx}: fd={fd} ad={}",
                flat_grad[idx]
            );
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let m = net();
        let p = m.flatten();
        let mut m2 = net();
        m2.unflatten_into(&p).unwrap();
        assert_eq!(m.flatten(), m2.flatten());
    }
}
