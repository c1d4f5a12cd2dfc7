//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        let zeros = shapes
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// One Adam step. Returns the updated parameters and the advanced state.
pub fn adam_update(
    params: &[&Tensor],
    grads: &[Tensor],
    state: &OptimizerState,
) -> Result<(Vec<Tensor>, OptimizerState)> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_update",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let step = state.step + 1;
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);

    let mut new_params = Vec::with_capacity(params.len());
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for (((p, g), m), v) in params.iter().zip(grads).zip(&state.m).zip(&state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim("adam_update", p.shape(), g.shape()));
        }
        let n = p.len();
        let (mut pd, mut md, mut vd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd.push(p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps));
            md.push(mi);
            vd.push(vi);
        }
        let shape = p.shape().to_vec();
        new_params.push(Tensor::new(shape.clone(), pd)?);
        new_m.push(Tensor::new(shape.clone(), md)?);
        new_v.push(Tensor::new(shape, vd)?);
    }
    Ok((
        new_params,
        OptimizerState {
            config: state.config,
            step,
            m: new_m,
            v: new_v,
        },
    ))
}
