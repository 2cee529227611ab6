//! Fixed-capacity slot tensor: part tokens packed in canonical order, the
//! remainder filled with the frozen null embedding.

use candle_core::{DType, Device, Tensor, D};

use crate::codec::TokenMatrix;
use crate::error::{Error, Result};

/// Ground-truth slot mask: ones on the first `n_obj` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMask {
    pub n_obj: usize,
    pub p_max: usize,
}

impl SlotMask {
    pub fn new(n_obj: usize, p_max: usize) -> Result<Self> {
        if n_obj == 0 {
            return Err(Error::Argument("an object needs at least one part".into()));
        }
        if n_obj > p_max {
            return Err(Error::Capacity { parts: n_obj, p_max });
        }
        Ok(Self { n_obj, p_max })
    }

    pub fn values(&self) -> Vec<f32> {
        (0..self.p_max).map(|i| if i < self.n_obj { 1.0 } else { 0.0 }).collect()
    }

    pub fn is_active(&self, slot: usize) -> bool {
        slot < self.n_obj
    }

    /// Stacks masks into a `(B, P)` tensor of zeros and ones.
    pub fn batch_tensor(masks: &[SlotMask], dtype: DType) -> Result<Tensor> {
        let p = masks.first().map_or(0, |m| m.p_max);
        let flat: Vec<f32> = masks.iter().flat_map(|m| m.values()).collect();
        Ok(Tensor::from_vec(flat, (masks.len(), p), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Broadcasts the null embedding `(C)` to a slot `(K, C)`, cut off from gradients.
pub fn null_slot(e_null: &Tensor, tokens: usize) -> Result<Tensor> {
    let c = e_null.dim(0)?;
    Ok(e_null.detach().unsqueeze(0)?.broadcast_as((tokens, c))?.contiguous()?)
}

/// Packs part tokens `(K, C)` into a `(P_max, K, C)` slot tensor and its mask.
pub fn pack_slots(parts: &[TokenMatrix], p_max: usize, e_null: &Tensor) -> Result<(Tensor, SlotMask)> {
    let mask = SlotMask::new(parts.len(), p_max)?;
    let (k, c) = parts[0].tensor().dims2()?;
    if e_null.dims() != [c] {
        return Err(Error::Config(format!(
            "null embedding has shape {:?}, tokens have width {c}",
            e_null.dims()
        )));
    }
    let mut slots = Vec::with_capacity(p_max);
    for p in parts {
        if p.tensor().dims() != [k, c] {
            return Err(Error::Config(format!(
                "token matrices disagree in shape: {:?} vs ({k}, {c})",
                p.tensor().dims()
            )));
        }
        slots.push(p.tensor().clone());
    }
    let null = null_slot(e_null, k)?;
    while slots.len() < p_max {
        slots.push(null.clone());
    }
    Ok((Tensor::stack(&slots, 0)?, mask))
}

/// Slot summaries: mean over the token axis, `(..., P, K, C) -> (..., P, C)`.
pub fn slot_summary(z: &Tensor) -> Result<Tensor> {
    Ok(z.mean(D::Minus2)?)
}

/// The first `n_obj` slots as token matrices.
pub fn unpack_slots(z: &Tensor, mask: &SlotMask) -> Result<Vec<TokenMatrix>> {
    (0..mask.n_obj).map(|i| Ok(TokenMatrix(z.get(i)?))).collect()
}
