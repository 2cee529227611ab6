//! Slot-gating head: per-slot activation probabilities from the image
//! feature, the gating losses and threshold selection.

use candle_core::{Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Dense, ParamStore};

/// Probabilities are clamped to `[EPS, 1 - EPS]`.
pub const ALPHA_EPS: f64 = 1e-7;
const LOGIT_CLAMP: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct GateHead {
    l1: Dense,
    l2: Dense,
    pub p_max: usize,
}

impl GateHead {
    pub fn new(store: &mut ParamStore, feature_dim: usize, hidden: usize, p_max: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            l1: Dense::new(store, "gate.l1", feature_dim, hidden, rng)?,
            l2: Dense::new(store, "gate.l2", hidden, p_max, rng)?,
            p_max,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.l1.w.clone(), self.l1.b.clone(), self.l2.w.clone(), self.l2.b.clone()]
    }

    /// Features `(B, D)` to slot logits `(B, P)`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(features)?.silu()?)
    }

    /// Features `(B, D)` to clamped activations `(B, P)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        activations(&self.logits(features)?)
    }
}

/// Sigmoid of the logits, clamped away from 0 and 1.
pub fn activations(logits: &Tensor) -> Result<Tensor> {
    let a = sigmoid(&logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?)?;
    Ok(a.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)?)
}

/// Slot-wise binary cross-entropy `(B, P)` against the mask `(B, P)`,
/// averaged over slots and then over the batch.
pub fn loss_ce(alpha: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let pos = mask.mul(&alpha.log()?)?;
    let neg = (1.0 - mask)?.mul(&(1.0 - alpha)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Squared difference between the activation sum and the part count `(B)`,
/// averaged over the batch.
pub fn loss_count(alpha: &Tensor, n_obj: &Tensor) -> Result<Tensor> {
    Ok((alpha.sum(1)? - n_obj)?.sqr()?.mean_all()?)
}

pub fn loss_gate(alpha: &Tensor, mask: &Tensor, n_obj: &Tensor, lambda_ce: f64, lambda_count: f64) -> Result<Tensor> {
    let ce = (loss_ce(alpha, mask)? * lambda_ce)?;
    let count = (loss_count(alpha, n_obj)? * lambda_count)?;
    Ok((ce + count)?)
}

/// Slots whose activation exceeds `tau`; falls back to the single most
/// active slot when none does.
pub fn select_active(alpha: &[f32], tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Argument(format!("tau must lie in (0, 1), got {tau}")));
    }
    if alpha.is_empty() {
        return Err(Error::Argument("empty activation vector".into()));
    }
    let picked: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] as f64 > tau).collect();
    if !picked.is_empty() {
        return Ok(picked);
    }
    let best = (0..alpha.len())
        .max_by(|&a, &b| alpha[a].total_cmp(&alpha[b]).then(b.cmp(&a)))
        .unwrap();
    Ok(vec![best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut store = ParamStore::new(DType::F64);
        let gate = GateHead::new(&mut store, 4, 8, 5, &mut crate::nn::stream_rng(1, 1)).unwrap();
        for (_, v) in store.iter() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let a = gate.forward(&t(&[0.3, -1.0, 2.0, 0.5], &[1, 4])).unwrap();
        assert!(crate::nn::to_f64_vec(&a).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ce_cases() {
        let half = t(&[0.5; 4], &[1, 4]);
        let m = t(&[1.0, 1.0, 0.0, 0.0], &[1, 4]);
        assert!((scalar(loss_ce(&half, &m).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = activations(&t(&[100.0, 100.0, -100.0, -100.0], &[1, 4])).unwrap();
        let l = scalar(loss_ce(&perfect, &m).unwrap());
        assert!(l >= 0.0 && l <= -(1.0 - ALPHA_EPS).ln() + 1e-15, "{l}");
        let a = t(&[0.9, 0.1], &[1, 2]);
        let m2 = t(&[1.0, 0.0], &[1, 2]);
        assert!((scalar(loss_ce(&a, &m2).unwrap()) - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn count_cases() {
        let n = t(&[2.0], &[1]);
        assert_eq!(scalar(loss_count(&t(&[1.0, 1.0, 0.0, 0.0], &[1, 4]), &n).unwrap()), 0.0);
        assert_eq!(scalar(loss_count(&t(&[1.0, 1.0, 1.0, 0.0], &[1, 4]), &n).unwrap()), 1.0);
        assert_eq!(scalar(loss_count(&t(&[0.5; 8], &[1, 8]), &n).unwrap()), 4.0);
    }

    #[test]
    fn gate_loss_weighting() {
        let a = t(&[0.9, 0.1], &[1, 2]);
        let m = t(&[1.0, 0.0], &[1, 2]);
        let n = t(&[1.0], &[1]);
        assert_eq!(scalar(loss_gate(&a, &m, &n, 0.0, 0.0).unwrap()), 0.0);
        let ce = scalar(loss_ce(&a, &m).unwrap());
        assert_eq!(scalar(loss_gate(&a, &m, &n, 1.0, 0.0).unwrap()), ce);
        let count = scalar(loss_count(&a, &n).unwrap());
        let both = scalar(loss_gate(&a, &m, &n, 1.0, 0.1).unwrap());
        assert!((both - (ce + 0.1 * count)).abs() < 1e-15);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_active(&[0.9, 0.6, 0.4, 0.1], 0.5).unwrap(), vec![0, 1]);
        assert_eq!(select_active(&[0.2, 0.3, 0.1], 0.5).unwrap(), vec![1]);
        assert_eq!(select_active(&[0.7, 0.8, 0.9], 0.5).unwrap(), vec![0, 1, 2]);
        assert!(select_active(&[0.7], 1.0).is_err());
    }
}
