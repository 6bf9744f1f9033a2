//! Feedback controller variants and their evaluation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::romcore::{Activation, Mlp, MlpCache, MlpGrad, OutputMap};

/// Discrete transfer function in the `z^{-i}` coefficient convention:
/// `K(z) = (sum_i b_i z^-i) / (1 + sum_i a_i z^-i)`, evaluated as the
/// difference equation `u_k = sum b_i y_{k-i} - sum a_i u_{k-i}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteTf {
    /// Numerator coefficients `b_0 .. b_n`.
    pub b: Vec<f64>,
    /// Denominator coefficients `a_1 .. a_n` (the leading 1 is implicit).
    pub a: Vec<f64>,
    pub dt: f64,
}

impl DiscreteTf {
    pub fn order(&self) -> usize {
        self.a.len()
    }

    /// Gain at `z = 1`.
    pub fn dc_gain(&self) -> f64 {
        let num: f64 = self.b.iter().sum();
        let den: f64 = 1.0 + self.a.iter().sum::<f64>();
        num / den
    }

    /// Complex frequency response at `z = e^{i omega dt}`.
    pub fn response(&self, omega: f64) -> nalgebra::Complex<f64> {
        use nalgebra::Complex;
        let zinv = Complex::new(0.0, -omega * self.dt).exp();
        let mut num = Complex::new(0.0, 0.0);
        let mut zp = Complex::new(1.0, 0.0);
        for &bi in &self.b {
            num += bi * zp;
            zp *= zinv;
        }
        let mut den = Complex::new(1.0, 0.0);
        let mut zp = zinv;
        for &ai in &self.a {
            den += ai * zp;
            zp *= zinv;
        }
        num / den
    }
}

/// Bounded neural feedback policy: two hidden layers of 128 by default,
/// output through `scale * tanh(.)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralPolicy {
    pub net: Mlp,
}

pub const POLICY_HIDDEN: [usize; 2] = [128, 128];

impl NeuralPolicy {
    pub fn new<R: rand::Rng>(n_inputs: usize, scale: f64, rng: &mut R) -> Self {
        Self::with_hidden(n_inputs, &POLICY_HIDDEN, scale, rng)
    }

    pub fn with_hidden<R: rand::Rng>(
        n_inputs: usize,
        hidden: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, Activation::Relu, OutputMap::ScaledTanh(scale), rng);
        NeuralPolicy { net }
    }

    pub fn scale(&self) -> f64 {
        match self.net.output {
            OutputMap::ScaledTanh(s) => s,
            OutputMap::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Controller {
    Proportional { gain: f64 },
    DiscreteTf(DiscreteTf),
    Neural(NeuralPolicy),
}

/// Delay registers of a stateful controller evaluation, most recent first.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CtrlRegisters {
    pub inputs: Vec<f64>,
    pub outputs: Vec<f64>,
}

impl CtrlRegisters {
    pub fn for_controller(c: &Controller) -> Self {
        match c {
            Controller::DiscreteTf(tf) => CtrlRegisters {
                inputs: vec![0.0; tf.order()],
                outputs: vec![0.0; tf.order()],
            },
            _ => CtrlRegisters::default(),
        }
    }
}

/// Controller evaluation cache recorded during a differentiable rollout.
#[derive(Debug, Clone)]
pub enum CtrlCache {
    Stateless,
    Neural(MlpCache),
}

impl Controller {
    pub fn n_inputs(&self) -> usize {
        match self {
            Controller::Proportional { .. } => 1,
            Controller::DiscreteTf(_) => 1,
            Controller::Neural(p) => p.net.input_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Controller::Proportional { .. } => 1,
            Controller::DiscreteTf(tf) => tf.b.len() + tf.a.len(),
            Controller::Neural(p) => p.net.param_count(),
        }
    }

    pub fn flatten(&self) -> DVector<f64> {
        match self {
            Controller::Proportional { gain } => DVector::from_element(1, *gain),
            Controller::DiscreteTf(tf) => {
                let mut v = tf.b.clone();
                v.extend_from_slice(&tf.a);
                DVector::from_vec(v)
            }
            Controller::Neural(p) => p.net.flatten(),
        }
    }

    pub fn unflatten_into(&mut self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dimension(format!(
                "controller parameter length {} != {}",
                params.len(),
                self.param_count()
            )));
        }
        match self {
            Controller::Proportional { gain } => *gain = params[0],
            Controller::DiscreteTf(tf) => {
                let nb = tf.b.len();
                tf.b.copy_from_slice(&params.as_slice()[..nb]);
                tf.a.copy_from_slice(&params.as_slice()[nb..]);
            }
            Controller::Neural(p) => p.net.unflatten_into(params)?,
        }
        Ok(())
    }

    /// Zero-action check used by episode bookkeeping.
    pub fn is_zero(&self) -> bool {
        match self {
            Controller::Proportional { gain } => *gain == 0.0,
            Controller::DiscreteTf(tf) => tf.b.iter().all(|&v| v == 0.0),
            Controller::Neural(_) => false,
        }
    }

    /// Rollout evaluation at step `k`.  `inputs[k]` is the current input
    /// vector; `inputs`/`actions` of earlier steps back the transfer
    /// function delay registers (zero before step 0).
    pub(crate) fn eval_in_rollout(
        &self,
        k: usize,
        inputs: &[DVector<f64>],
        actions: &[f64],
    ) -> (f64, CtrlCache) {
        match self {
            Controller::Proportional { gain } => (gain * inputs[k][0], CtrlCache::Stateless),
            Controller::DiscreteTf(tf) => {
                let mut u = 0.0;
                for (i, &bi) in tf.b.iter().enumerate() {
                    if k >= i {
                        u += bi * inputs[k - i][0];
                    }
                }
                for (i, &ai) in tf.a.iter().enumerate() {
                    let lag = i + 1;
                    if k >= lag {
                        u -= ai * actions[k - lag];
                    }
                }
                (u, CtrlCache::Stateless)
            }
            Controller::Neural(p) => {
                let (y, cache) = p.net.forward_cached(&inputs[k]);
                (y[0], CtrlCache::Neural(cache))
            }
        }
    }

    /// Adjoint of `eval_in_rollout` at step `k`.  `action_adjoint` is
    /// dL/d(action_k); contributions are scattered into the parameter
    /// gradient, the per-step input adjoints, and (for the transfer
    /// function recursion) the adjoints of earlier actions.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_in_rollout(
        &self,
        k: usize,
        action_adjoint: f64,
        inputs: &[DVector<f64>],
        actions: &[f64],
        cache: &CtrlCache,
        theta_grad: &mut DVector<f64>,
        neural_grad: Option<&mut MlpGrad>,
        input_adjoints: &mut [DVector<f64>],
        action_adjoints: &mut [f64],
    ) {
        match self {
            Controller::Proportional { gain } => {
                theta_grad[0] += action_adjoint * inputs[k][0];
                input_adjoints[k][0] += action_adjoint * gain;
            }
            Controller::DiscreteTf(tf) => {
                let nb = tf.b.len();
                for (i, &bi) in tf.b.iter().enumerate() {
                    if k >= i {
                        theta_grad[i] += action_adjoint * inputs[k - i][0];
                        input_adjoints[k - i][0] += action_adjoint * bi;
                    }
                }
                for (i, &ai) in tf.a.iter().enumerate() {
                    let lag = i + 1;
                    if k >= lag {
                        theta_grad[nb + i] -= action_adjoint * actions[k - lag];
                        action_adjoints[k - lag] -= action_adjoint * ai;
                    }
                }
            }
            Controller::Neural(p) => {
                let CtrlCache::Neural(c) = cache else {
                    panic!("neural controller backward without cache");
                };
                let grad = neural_grad.expect("neural controller backward without grad buffer");
                let out = DVector::from_element(1, action_adjoint);
                let gx = p.net.backward(c, &out, grad);
                input_adjoints[k] += gx;
            }
        }
    }
}

/// Stateful single-step evaluation: returns the action and advances the
/// delay registers.
pub fn controller_eval(
    controller: &Controller,
    inputs: &DVector<f64>,
    registers: &mut CtrlRegisters,
) -> Result<f64> {
    if inputs.len() != controller.n_inputs() {
        return Err(Error::dimension(format!(
            "controller expects {} inputs, got {}",
            controller.n_inputs(),
            inputs.len()
        )));
    }
    let action = match controller {
        Controller::Proportional { gain } => gain * inputs[0],
        Controller::DiscreteTf(tf) => {
            let n = tf.order();
            let mut u = tf.b[0] * inputs[0];
            for i in 1..=n {
                u += tf.b[i] * registers.inputs[i - 1];
                u -= tf.a[i - 1] * registers.outputs[i - 1];
            }
            if n > 0 {
                registers.inputs.rotate_right(1);
                registers.inputs[0] = inputs[0];
                registers.outputs.rotate_right(1);
                registers.outputs[0] = u;
            }
            u
        }
        Controller::Neural(p) => p.net.forward(inputs)[0],
    };
    Ok(action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn proportional_matches_paper_k0() {
        let c = Controller::Proportional { gain: -223.65 };
        let mut regs = CtrlRegisters::for_controller(&c);
        let u = controller_eval(&c, &DVector::from_element(1, 1.0), &mut regs).unwrap();
        assert!((u - (-223.65)).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_zero_registers_give_zero_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let variants = vec![
            Controller::Proportional { gain: 2.0 },
            Controller::DiscreteTf(DiscreteTf {
                b: vec![-0.64, -1.52],
                a: vec![-0.990131],
                dt: 0.0558,
            }),
            Controller::Neural(NeuralPolicy::with_hidden(2, &[8, 8], 1.0, &mut rng)),
        ];
        for c in variants {
            let mut regs = CtrlRegisters::for_controller(&c);
            let inputs = DVector::zeros(c.n_inputs());
            // the neural net has zero biases and relu hidden units, but may
            // still produce a nonzero value at zero input through biases;
            // the constructor zeroes biases so the output is exactly 0.
            let u = controller_eval(&c, &inputs, &mut regs).unwrap();
            assert_eq!(u, 0.0);
        }
    }

    #[test]
    fn discrete_tf_step_response_matches_hand_recursion() {
        // First-order controller of the broadband design, unit step input.
        let tf = DiscreteTf {
            b: vec![-0.64, -1.52],
            a: vec![-0.990131],
            dt: 0.0558,
        };
        let c = Controller::DiscreteTf(tf.clone());
        let mut regs = CtrlRegisters::for_controller(&c);
        let mut expected_hist = vec![];
        for k in 0..20 {
            let u = controller_eval(&c, &DVector::from_element(1, 1.0), &mut regs).unwrap();
            // hand recursion: u_k = b0*1 + b1*y_{k-1} - a1*u_{k-1}
            let y_prev = if k >= 1 { 1.0 } else { 0.0 };
            let u_prev: f64 = *expected_hist.last().unwrap_or(&0.0);
            let expect = tf.b[0] + tf.b[1] * y_prev - tf.a[0] * u_prev;
            expected_hist.push(expect);
            assert!((u - expect).abs() < 1e-12, "step {k}: {u} vs {expect}");
        }
    }

    #[test]
    fn neural_policy_output_bounded_under_adversarial_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = NeuralPolicy::with_hidden(2, &[16], 0.3, &mut rng);
        let c = Controller::Neural(p);
        let mut regs = CtrlRegisters::for_controller(&c);
        for mag in [1e3, 1e9, 1e15] {
            let u =
                controller_eval(&c, &DVector::from_vec(vec![mag, -mag]), &mut regs).unwrap();
            assert!(u.abs() <= 0.3);
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut c = Controller::DiscreteTf(DiscreteTf {
            b: vec![1.0, 2.0, 3.0],
            a: vec![0.5, -0.25],
            dt: 0.1,
        });
        let p = c.flatten();
        assert_eq!(p.len(), 5);
        let mut p2 = p.clone();
        p2[3] = 9.0;
        c.unflatten_into(&p2).unwrap();
        if let Controller::DiscreteTf(tf) = &c {
            assert_eq!(tf.a[0], 9.0);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn stateful_eval_matches_rollout_eval_for_tf() {
        let tf = DiscreteTf {
            b: vec![0.3, -0.2, 0.1],
            a: vec![-0.5, 0.06],
            dt: 0.1,
        };
        let c = Controller::DiscreteTf(tf);
        let ys: Vec<f64> = (0..15).map(|k| ((k as f64) * 0.7).sin()).collect();
        let mut regs = CtrlRegisters::for_controller(&c);
        let mut inputs = Vec::new();
        let mut actions: Vec<f64> = Vec::new();
        for (k, &y) in ys.iter().enumerate() {
            inputs.push(DVector::from_element(1, y));
            let (u_roll, _) = c.eval_in_rollout(k, &inputs, &actions);
            let u_state =
                controller_eval(&c, &DVector::from_element(1, y), &mut regs).unwrap();
            assert!((u_roll - u_state).abs() < 1e-12, "step {k}");
            actions.push(u_roll);
        }
    }
}
