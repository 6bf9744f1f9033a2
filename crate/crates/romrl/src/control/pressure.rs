//! Surrogate mapping from reduced velocity states to the four wall
//! pressures, plus the two antisymmetric feedback signals formed from
//! them.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::romcore::{adam_update, Activation, AdamState, Mlp, OutputMap};

pub const PRESSURE_OUTPUTS: usize = 4;
/// Documented minimum number of paired samples for a fit.
pub const PRESSURE_MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureMapConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PressureMapConfig {
    fn default() -> Self {
        PressureMapConfig {
            hidden: vec![128, 128, 128],
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Fully connected map q_r -> (p1..p4); same family as the residual
/// network but with a linear output (pressures are unbounded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureMap {
    pub net: Mlp,
}

/// Evaluation result: the four pressures and the antisymmetric feedback
/// signals `y1 = p1 - p4`, `y2 = p2 - p3`.
pub fn pressure_map_eval(map: &PressureMap, q: &DVector<f64>) -> (DVector<f64>, f64, f64) {
    let p = map.net.forward(q);
    let y1 = p[0] - p[3];
    let y2 = p[1] - p[2];
    (p, y1, y2)
}

/// Mini-batch mean-squared-error fit of the pressure map.
pub fn pressure_map_fit(
    states: &[DVector<f64>],
    pressures: &[DVector<f64>],
    config: &PressureMapConfig,
) -> Result<PressureMap> {
    if states.len() != pressures.len() {
        return Err(Error::dimension(format!(
            "paired sample counts differ: {} states vs {} pressures",
            states.len(),
            pressures.len()
        )));
    }
    if states.len() < PRESSURE_MIN_SAMPLES {
        return Err(Error::config(format!(
            "pressure fit needs at least {PRESSURE_MIN_SAMPLES} samples, got {}",
            states.len()
        )));
    }
    let r = states[0].len();
    for p in pressures {
        if p.len() != PRESSURE_OUTPUTS {
            return Err(Error::dimension(format!(
                "pressure samples must have {PRESSURE_OUTPUTS} entries, got {}",
                p.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![r];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(PRESSURE_OUTPUTS);
    let mut net = Mlp::new(&sizes, Activation::Relu, OutputMap::Linear, &mut rng);
    let mut adam = AdamState::new(net.param_count(), config.learning_rate);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let batch = config.batch_size.max(1);
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = net.zero_grad();
            for &i in chunk {
                let (y, cache) = net.forward_cached(&states[i]);
                let out_grad = (2.0 / chunk.len() as f64) * (y - &pressures[i]);
                net.backward(&cache, &out_grad, &mut grad);
            }
            let mut params = net.flatten();
            adam_update(&mut params, &grad.flatten(), &mut adam);
            net.unflatten_into(&params)?;
        }
    }
    Ok(PressureMap { net })
}
