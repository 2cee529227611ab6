//! Rectified-flow denoiser over slot tokens.
//!
//! The backbone is a pre-norm transformer over all `P_max * K` slot tokens
//! plus one prepended condition token (image feature projection plus a
//! sinusoidal time embedding). Null slots are never noised and never moved by
//! the sampler.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{all_finite, normal_tensor, stream_rng, streams, Dense, LayerNorm, ParamStore};
use crate::proto::{inject, PrototypeBank};
use crate::slots::{null_slot, slot_summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneShape {
    pub p_max: usize,
    pub tokens: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Dense,
    out: Dense,
    ln2: LayerNorm,
    ff1: Dense,
    ff2: Dense,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, hidden: usize, ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), hidden)?,
            qkv: Dense::new(store, &format!("{name}.qkv"), hidden, 3 * hidden, rng)?,
            out: Dense::new(store, &format!("{name}.out"), hidden, hidden, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), hidden)?,
            ff1: Dense::new(store, &format!("{name}.ff1"), hidden, ff, rng)?,
            ff2: Dense::new(store, &format!("{name}.ff2"), ff, hidden, rng)?,
        })
    }

    fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.ln1.gamma.clone(),
            self.ln1.beta.clone(),
            self.ln2.gamma.clone(),
            self.ln2.beta.clone(),
        ];
        for d in [&self.qkv, &self.out, &self.ff1, &self.ff2] {
            v.push(d.w.clone());
            v.push(d.b.clone());
        }
        v
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, n, h) = x.dims3()?;
        let dh = h / heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * h, h)?
                .reshape((b, n, heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, h))?;
        let x = (x + self.out.forward(&mixed)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&x)?)?.silu()?)?;
        Ok((x + ff)?)
    }
}

/// Anything that predicts a velocity field for slot tensors.
pub trait VelocityModel {
    /// `z_in`: `(B, P, K, C)`, `t`: `(B)`, `c`: `(B, D)`; returns `(B, P, K, C)`.
    fn velocity(&self, z_in: &Tensor, t: &Tensor, c: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct FlowBackbone {
    input: Dense,
    slot_pos: Var,
    token_pos: Var,
    cond: Dense,
    time1: Dense,
    time2: Dense,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    output: Dense,
    pub shape: BackboneShape,
}

impl FlowBackbone {
    pub fn new(store: &mut ParamStore, shape: BackboneShape, rng: &mut impl Rng) -> Result<Self> {
        let h = shape.hidden;
        if !h.is_multiple_of(shape.heads) || !h.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden width {h} must be even and divisible by {} heads",
                shape.heads
            )));
        }
        let input = Dense::new(store, "backbone.input", shape.width, h, rng)?;
        let slot_pos = store.normal("backbone.slot_pos", &[shape.p_max, h], 0.02, rng)?;
        let token_pos = store.normal("backbone.token_pos", &[shape.tokens, h], 0.02, rng)?;
        let cond = Dense::new(store, "backbone.cond", shape.feature_dim, h, rng)?;
        let time1 = Dense::new(store, "backbone.time1", h, h, rng)?;
        let time2 = Dense::new(store, "backbone.time2", h, h, rng)?;
        let blocks = (0..shape.blocks)
            .map(|i| Block::new(store, &format!("backbone.blocks.{i}"), h, h * shape.ff_mult, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, "backbone.ln_out", h)?;
        let output = Dense::new(store, "backbone.output", h, shape.width, rng)?;
        Ok(Self {
            input,
            slot_pos,
            token_pos,
            cond,
            time1,
            time2,
            blocks,
            ln_out,
            output,
            shape,
        })
    }

    /// Every backbone parameter.
    pub fn vars(&self) -> Vec<Var> {
        self.vars_from_block(0)
    }

    /// Parameters excluding blocks below `first_block`.
    pub fn vars_from_block(&self, first_block: usize) -> Vec<Var> {
        let mut v = vec![self.slot_pos.clone(), self.token_pos.clone()];
        for d in [&self.input, &self.cond, &self.time1, &self.time2, &self.output] {
            v.push(d.w.clone());
            v.push(d.b.clone());
        }
        v.push(self.ln_out.gamma.clone());
        v.push(self.ln_out.beta.clone());
        for b in self.blocks.iter().skip(first_block) {
            v.extend(b.vars());
        }
        v
    }

    fn dtype(&self) -> DType {
        self.slot_pos.dtype()
    }

    /// Sinusoidal embedding of `t` in `[0, 1]`, `(B) -> (B, hidden)`.
    fn time_embedding(&self, t: &Tensor) -> Result<Tensor> {
        let half = self.shape.hidden / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| 1000.0 * (-(10_000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        let freqs = Tensor::from_vec(freqs, (1, half), &Device::Cpu)?.to_dtype(self.dtype())?;
        let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
        Ok(Tensor::cat(&[args.sin()?, args.cos()?], 1)?)
    }

    /// Unchecked forward pass.
    pub fn forward(&self, z_in: &Tensor, t: &Tensor, c: &Tensor) -> Result<Tensor> {
        let s = &self.shape;
        let (b, p, k, width) = z_in.dims4()?;
        if (p, k, width) != (s.p_max, s.tokens, s.width) {
            return Err(Error::Config(format!(
                "slot tensor has shape {:?}, backbone expects (B, {}, {}, {})",
                z_in.dims(),
                s.p_max,
                s.tokens,
                s.width
            )));
        }
        let h = s.hidden;
        let pos = self
            .slot_pos
            .as_tensor()
            .unsqueeze(1)?
            .broadcast_add(&self.token_pos.as_tensor().unsqueeze(0)?)?;
        let x = self.input.forward(z_in)?.broadcast_add(&pos)?.reshape((b, p * k, h))?;
        let temb = self.time2.forward(&self.time1.forward(&self.time_embedding(t)?)?.silu()?)?;
        let cond = (self.cond.forward(c)? + temb)?.unsqueeze(1)?;
        let mut seq = Tensor::cat(&[cond, x], 1)?;
        for block in &self.blocks {
            seq = block.forward(&seq, s.heads)?;
        }
        let tokens = seq.narrow(1, 1, p * k)?;
        let out = self.output.forward(&self.ln_out.forward(&tokens)?)?;
        Ok(out.reshape((b, p, k, width))?)
    }
}

impl VelocityModel for FlowBackbone {
    fn velocity(&self, z_in: &Tensor, t: &Tensor, c: &Tensor) -> Result<Tensor> {
        for (name, x) in [("slot tensor", z_in), ("time", t), ("condition", c)] {
            if !all_finite(x)? {
                return Err(Error::Argument(format!("{name} has non-finite entries")));
            }
        }
        self.forward(z_in, t, c)
    }
}

/// `(B, P)` 0/1 mask broadcast to the `(B, P, K, C)` layout as a boolean selector.
fn slot_selector(mask: &Tensor, like: &Tensor) -> Result<Tensor> {
    Ok(mask.ne(0.0)?.unsqueeze(2)?.unsqueeze(3)?.broadcast_as(like.shape())?)
}

/// Rectified-flow interpolation `t z0 + (1 - t) eps` on active slots; null
/// slots are copied from `z0`. `t` has one entry per batch item.
pub fn noise(z0: &Tensor, eps: &Tensor, t: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let ts = crate::nn::to_f64_vec(t)?;
    if let Some(bad) = ts.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("flow time {bad} outside [0, 1]")));
    }
    let tb = t.reshape((t.dim(0)?, 1, 1, 1))?;
    let mixed = (z0.broadcast_mul(&tb)? + eps.broadcast_mul(&(1.0 - &tb)?)?)?;
    Ok(slot_selector(mask, z0)?.where_cond(&mixed, z0)?)
}

/// Masked flow-matching loss: per object, the squared error of `v` against
/// `z0 - eps` summed over supervised slots and tokens; averaged over the batch.
pub fn loss_mflow(v: &Tensor, z0: &Tensor, eps: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let per_slot = (v - (z0 - eps)?)?.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?;
    let zeros = per_slot.zeros_like()?;
    Ok(mask.ne(0.0)?.where_cond(&per_slot, &zeros)?.sum(1)?.mean_all()?)
}

/// Prior draw for one object, `(P, K, C)`, a function of the seed alone.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let mut rng = stream_rng(seed, streams::SAMPLE);
    normal_tensor(&mut rng, &[shape.0, shape.1, shape.2], 1.0, dtype)
}

/// Prototype guidance used by the sampler.
pub struct Guidance<'a> {
    pub bank: &'a PrototypeBank,
    pub beta: f64,
}

/// `(B, P)` 0/1 tensor from per-object active slot lists.
pub fn active_mask(active: &[Vec<usize>], p_max: usize, dtype: DType) -> Result<Tensor> {
    let mut flat = vec![0f32; active.len() * p_max];
    for (b, set) in active.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Argument(format!("object {b} has no active slots")));
        }
        for &i in set {
            if i >= p_max {
                return Err(Error::Argument(format!("active slot {i} outside capacity {p_max}")));
            }
            flat[b * p_max + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(flat, (active.len(), p_max), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Euler integration of the learned flow from the prior (`t = 0`) to data (`t = 1`).
///
/// Active slots start from a standard normal draw seeded per object; every
/// other slot holds the null embedding throughout. From the second step on,
/// prototype guidance is computed from the running clean estimate
/// `Z + (1 - t) v_prev` and injected into the backbone input.
/// Returns `(B, P, K, C)` with `P` and `K` taken from `slots`.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &dyn VelocityModel,
    guidance: Option<&Guidance<'_>>,
    active: &[Vec<usize>],
    c: &Tensor,
    steps: usize,
    seeds: &[u64],
    e_null: &Tensor,
    slots: (usize, usize),
) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::Argument("the sampler needs at least one step".into()));
    }
    if seeds.len() != active.len() || c.dim(0)? != active.len() {
        return Err(Error::Argument(
            "seeds, active sets and features disagree in batch size".into(),
        ));
    }
    let (p_max, tokens) = slots;
    let dtype = c.dtype();
    let width = e_null.dim(0)?;
    let mask = active_mask(active, p_max, dtype)?;
    let slabs = seeds
        .iter()
        .map(|&seed| initial_noise(seed, (p_max, tokens, width), dtype))
        .collect::<Result<Vec<_>>>()?;
    let prior = Tensor::stack(&slabs, 0)?;
    let null = null_slot(e_null, tokens)?.to_dtype(dtype)?;
    let nulls = null.unsqueeze(0)?.unsqueeze(0)?.broadcast_as(prior.shape())?;
    let select = slot_selector(&mask, &prior)?;
    // The state is integrated in f64 so rounding does not accumulate over steps.
    let mut z = select.where_cond(&prior, &nulls)?.to_dtype(DType::F64)?;
    let c = c.detach();
    let dt = 1.0 / steps as f64;
    let mut v_prev: Option<Tensor> = None;
    for i in 0..steps {
        let t_now = i as f64 * dt;
        let t = Tensor::full(t_now, active.len(), &Device::Cpu)?.to_dtype(dtype)?;
        let z_cur = z.to_dtype(dtype)?;
        let z_in = match (guidance, &v_prev) {
            (Some(g), Some(v)) if g.beta > 0.0 => {
                let clean = (&z + (v * (1.0 - t_now))?)?.to_dtype(dtype)?;
                let (aligned, _) = g.bank.align(&slot_summary(&clean)?)?;
                inject(&z_cur, &aligned.detach(), g.beta, &mask)?
            }
            _ => z_cur,
        };
        let v = model.velocity(&z_in, &t, &c)?.detach().to_dtype(DType::F64)?;
        let moved = (&z + (&v * dt)?)?;
        z = select.where_cond(&moved, &z)?;
        v_prev = Some(v);
    }
    Ok(z.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn shape() -> BackboneShape {
        BackboneShape {
            p_max: 3,
            tokens: 2,
            width: 4,
            feature_dim: 5,
            hidden: 8,
            blocks: 2,
            heads: 2,
            ff_mult: 2,
        }
    }

    fn backbone(dtype: DType) -> FlowBackbone {
        let mut store = ParamStore::new(dtype);
        FlowBackbone::new(&mut store, shape(), &mut stream_rng(4, streams::INIT)).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        normal_tensor(&mut stream_rng(seed, 0), shape, 1.0, DType::F64).unwrap()
    }

    #[test]
    fn noise_endpoints_and_null_slots() {
        let z0 = rand(&[2, 3, 2, 4], 1);
        let eps = rand(&[2, 3, 2, 4], 2);
        let mask = Tensor::new(&[[1.0f64, 0.0, 0.0], [1.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let ones = Tensor::ones(2, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            to_f64_vec(&noise(&z0, &eps, &ones, &mask).unwrap()).unwrap(),
            to_f64_vec(&z0).unwrap()
        );
        let at0 = noise(&z0, &eps, &zeros, &mask).unwrap();
        let (a, e, z) = (
            to_f64_vec(&at0).unwrap(),
            to_f64_vec(&eps).unwrap(),
            to_f64_vec(&z0).unwrap(),
        );
        for b in 0..2 {
            for p in 0..3 {
                let active = (b == 0 && p == 0) || (b == 1 && p < 2);
                for j in 0..8 {
                    let idx = (b * 3 + p) * 8 + j;
                    assert_eq!(a[idx], if active { e[idx] } else { z[idx] });
                }
            }
        }
        let bad = Tensor::new(&[1.5f64, 0.5], &Device::Cpu).unwrap();
        assert!(matches!(noise(&z0, &eps, &bad, &mask), Err(Error::Argument(_))));
    }

    #[test]
    fn loss_is_zero_on_the_target_and_ignores_null_slots() {
        let z0 = rand(&[1, 3, 2, 4], 1);
        let eps = rand(&[1, 3, 2, 4], 2);
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let target = (&z0 - &eps).unwrap();
        let l = loss_mflow(&target, &z0, &eps, &mask).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
        let junk = Tensor::cat(&[target.narrow(1, 0, 2).unwrap(), rand(&[1, 1, 2, 4], 9)], 1).unwrap();
        let l = loss_mflow(&junk, &z0, &eps, &mask).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn velocity_shape_and_non_finite_rejection() {
        let bb = backbone(DType::F64);
        let z = rand(&[2, 3, 2, 4], 1);
        let t = Tensor::new(&[0.2f64, 0.7], &Device::Cpu).unwrap();
        let c = rand(&[2, 5], 3);
        assert_eq!(bb.velocity(&z, &t, &c).unwrap().dims(), &[2, 3, 2, 4]);
        let nan = Tensor::new(&[f64::NAN, 0.7], &Device::Cpu).unwrap();
        assert!(matches!(bb.velocity(&z, &nan, &c), Err(Error::Argument(_))));
    }

    #[test]
    fn sampler_is_seeded_and_keeps_null_slots() {
        let bb = backbone(DType::F32);
        let e_null = normal_tensor(&mut stream_rng(1, 2), &[4], 1.0, DType::F32).unwrap();
        let c = normal_tensor(&mut stream_rng(1, 3), &[2, 5], 1.0, DType::F32).unwrap();
        let active = vec![vec![0], vec![0, 1]];
        let run = |seeds: &[u64]| {
            let z = sample(&bb, None, &active, &c, 4, seeds, &e_null, (3, 2)).unwrap();
            to_f64_vec(&z).unwrap()
        };
        let a = run(&[5, 6]);
        assert_eq!(a, run(&[5, 6]));
        assert_ne!(a, run(&[5, 7]));
        let null = to_f64_vec(&e_null).unwrap();
        for (b, p) in [(0, 1), (0, 2), (1, 2)] {
            for k in 0..2 {
                let start = ((b * 3 + p) * 2 + k) * 4;
                assert_eq!(&a[start..start + 4], null.as_slice());
            }
        }
        assert!(sample(&bb, None, &active, &c, 0, &[5, 6], &e_null, (3, 2)).is_err());
    }
}
