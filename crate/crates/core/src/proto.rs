//! Prototype bank: soft assignment of slot summaries to shared prototypes,
//! aligned summaries, residual injection and the prototype losses.

use candle_core::{Tensor, Var, D};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Probabilities are floored at this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub p: Var,
}

impl PrototypeBank {
    pub fn new(store: &mut ParamStore, num: usize, width: usize, init_std: f64, rng: &mut impl Rng) -> Result<Self> {
        if num == 0 {
            return Err(Error::Config("the prototype bank needs at least one prototype".into()));
        }
        Ok(Self {
            p: store.normal("bank.p", &[num, width], init_std, rng)?,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.p.clone()]
    }

    pub fn prototypes(&self) -> &Tensor {
        self.p.as_tensor()
    }

    /// Summaries `(..., P, C)` to aligned summaries `(..., P, C)` and the
    /// assignment `(..., P, M)`.
    pub fn align(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = assign(s, self.prototypes())?;
        let aligned = aligned_summary(&w, self.prototypes())?;
        Ok((aligned, w))
    }
}

/// Softmax over prototypes of `s_i . p_k / sqrt(C)`, `(..., P, C) x (M, C) -> (..., P, M)`.
pub fn assign(s: &Tensor, protos: &Tensor) -> Result<Tensor> {
    let c = protos.dim(1)?;
    let logits = (s.broadcast_matmul(&protos.t()?)? / (c as f64).sqrt())?;
    // Subtracts the row maximum before exponentiating.
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
}

/// Convex combination of prototypes, `(..., P, M) x (M, C) -> (..., P, C)`.
pub fn aligned_summary(w: &Tensor, protos: &Tensor) -> Result<Tensor> {
    Ok(w.broadcast_matmul(protos)?)
}

/// Adds `beta * s_tilde_i` to every token of each active slot.
///
/// `z` is `(B, P, K, C)`, `s_tilde` is `(B, P, C)` and `active` is a `(B, P)`
/// 0/1 mask. Inactive slots are passed through untouched.
pub fn inject(z: &Tensor, s_tilde: &Tensor, beta: f64, active: &Tensor) -> Result<Tensor> {
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!("beta must be non-negative, got {beta}")));
    }
    if beta == 0.0 {
        return Ok(z.clone());
    }
    let shifted = z.broadcast_add(&(s_tilde * beta)?.unsqueeze(2)?)?;
    let keep = active.ne(0.0)?.unsqueeze(2)?.unsqueeze(3)?.broadcast_as(z.shape())?;
    Ok(keep.where_cond(&shifted, z)?)
}

/// Masked squared reconstruction error of summaries, summed over slots and
/// averaged over the batch. `s`, `s_tilde`: `(B, P, C)`, `mask`: `(B, P)`.
pub fn loss_rec(s: &Tensor, s_tilde: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let per_slot = (s - s_tilde)?.sqr()?.sum(D::Minus1)?;
    Ok(per_slot.mul(mask)?.sum(1)?.mean_all()?)
}

/// Masked `sum w log w` over prototypes (non-positive), summed over slots and
/// averaged over the batch. `w`: `(B, P, M)`, `mask`: `(B, P)`.
pub fn loss_ent(w: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let plogp = w.mul(&w.clamp(LOG_FLOOR, f64::MAX)?.log()?)?.sum(D::Minus1)?;
    Ok(plogp.mul(mask)?.sum(1)?.mean_all()?)
}

/// Weighted prototype objective `L_rec + lambda_ent L_ent + lambda_flow L_flow`.
pub fn loss_all(l_rec: &Tensor, l_ent: &Tensor, l_flow: &Tensor, lambda_ent: f64, lambda_flow: f64) -> Result<Tensor> {
    Ok(((l_rec + (l_ent * lambda_ent)?)? + (l_flow * lambda_flow)?)?)
}
