//! Condition-image encoder shared by the gate head and the flow backbone.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Dense, ParamStore};
use crate::synth::ConditionImage;

#[derive(Debug, Clone)]
pub struct ViewEncoder {
    l1: Dense,
    l2: Dense,
    pub image_size: usize,
    pub feature_dim: usize,
}

impl ViewEncoder {
    pub fn new(
        store: &mut ParamStore,
        image_size: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: Dense::new(store, "view.l1", image_size * image_size, hidden, rng)?,
            l2: Dense::new(store, "view.l2", hidden, feature_dim, rng)?,
            image_size,
            feature_dim,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.l1.w.clone(), self.l1.b.clone(), self.l2.w.clone(), self.l2.b.clone()]
    }

    /// Flattened images `(B, H*W)` to features `(B, D)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(images)?.silu()?)
    }

    pub fn encode_view(&self, img: &ConditionImage) -> Result<Tensor> {
        let x = images_tensor(&[img], self.image_size, self.l1.w.dtype())?;
        Ok(self.forward(&x)?.squeeze(0)?)
    }
}

/// Stacks images into `(B, H*W)`, checking their size.
pub fn images_tensor(images: &[&ConditionImage], size: usize, dtype: DType) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.size != size || img.pixels.len() != size * size {
            return Err(Error::Config(format!(
                "condition image is {}x{}, encoder expects {size}x{size}",
                img.size, img.size
            )));
        }
        flat.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(flat, (images.len(), size * size), &Device::Cpu)?.to_dtype(dtype)?)
}
