//! Adam optimizer and gradient-norm clipping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> Moments<S> {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
        }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// `step` is 1-based: the first update after initialization passes 1.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    moments: &mut Moments<S>,
    step: u64,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), moments.m.len()],
        });
    }
    if step == 0 {
        return Err(Error::Contract("adam_step: step must be >= 1".to_string()));
    }
    let b1 = S::from_f64(hyper.beta1);
    let b2 = S::from_f64(hyper.beta2);
    let eps = S::from_f64(hyper.eps);
    let corr1 = S::from_f64(1.0 - hyper.beta1.powi(step as i32));
    let corr2 = S::from_f64(1.0 - hyper.beta2.powi(step as i32));
    let decay = S::from_f64(lr * hyper.weight_decay);
    let lr = S::from_f64(lr);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - decay * *p;
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [&mut [S]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.iter() {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
