//! Small neural-network building blocks on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`"backbone.blocks.0.attn.qkv.w"`). Every initial value is drawn from a
//! seeded ChaCha stream so runs are reproducible; candle's own RNG is never used.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Seeded RNG for a named sub-stream of a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers so that independent consumers never share draws.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const NULL_EMBEDDING: u64 = 2;
    pub const CODEC_TRAIN: u64 = 3;
    pub const WARMUP: u64 = 4;
    pub const JOINT: u64 = 5;
    pub const DATA_TRAIN: u64 = 6;
    pub const DATA_TEST: u64 = 7;
    pub const SAMPLE: u64 = 8;
}

/// Standard normal draws scaled by `std`.
pub fn normal_values(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v * std
        })
        .collect()
}

/// Builds a CPU tensor of the requested dtype from f64 values.
pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
    Ok(if dtype == DType::F64 { t } else { t.to_dtype(dtype)? })
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    tensor_from_f64(normal_values(rng, n, std), shape, dtype)
}

/// Flattens any tensor to f64 values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Named trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Var> {
        let t = normal_tensor(rng, shape, std, self.dtype)?;
        self.insert(name.into(), t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &Device::Cpu)?;
        self.insert(name.into(), t)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::ones(shape, self.dtype, &Device::Cpu)?;
        self.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// All parameters whose name starts with `prefix`, in name order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Affine map applied over the last axis of an arbitrary-rank input.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
    in_dim: usize,
    out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(store, name, in_dim, out_dim, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.normal(format!("{name}.w"), &[in_dim, out_dim], std, rng)?;
        let b = store.zeros(format!("{name}.b"), &[out_dim])?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Argument("dense input is a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Config(format!(
                "dense layer expects last axis {}, got {last}",
                self.in_dim
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, self.in_dim))?
            .matmul(self.w.as_tensor())?
            .broadcast_add(self.b.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalisation over the last axis with a learnable affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(format!("{name}.gamma"), &[dim])?,
            beta: store.zeros(format!("{name}.beta"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Logistic function built from primitive ops so it differentiates in any dtype.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// True when every entry is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}
