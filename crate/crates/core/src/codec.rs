//! Point-cloud part codec: a permutation-invariant encoder to `K x C` tokens
//! and an MLP decoder back to a fixed-size cloud.
//!
//! Tokens handed to the rest of the system are standardised per entry with
//! statistics fixed at the end of codec training (identity before that).

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{all_finite, normal_tensor, stream_rng, streams, Dense, ParamStore};
use crate::synth::{PartPointCloud, Point};

const POINT_HIDDEN: usize = 64;
const POINT_FEATURE: usize = 128;
const STD_FLOOR: f64 = 1e-4;

/// One part's latent tokens, shape `(K, C)`.
#[derive(Debug, Clone)]
pub struct TokenMatrix(pub Tensor);

impl TokenMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct PartCodec {
    enc1: Dense,
    enc2: Dense,
    proj: Dense,
    dec1: Dense,
    dec2_w: Var,
    dec2_b: Var,
    latent_mean: Var,
    latent_std: Var,
    pub tokens: usize,
    pub width: usize,
    pub points: usize,
}

impl PartCodec {
    pub fn new(
        store: &mut ParamStore,
        tokens: usize,
        width: usize,
        points: usize,
        decoder_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kc = tokens * width;
        let enc1 = Dense::new(store, "codec.enc1", 3, POINT_HIDDEN, rng)?;
        let enc2 = Dense::new(store, "codec.enc2", POINT_HIDDEN, POINT_FEATURE, rng)?;
        let proj = Dense::new(store, "codec.proj", POINT_FEATURE, kc, rng)?;
        let dec1 = Dense::new(store, "codec.dec1", kc, decoder_hidden, rng)?;
        let dec2_w = store.normal(
            "codec.dec2.w",
            &[decoder_hidden, points * 3],
            0.1 / (decoder_hidden as f64).sqrt(),
            rng,
        )?;
        let dec2_b = store.zeros("codec.dec2.b", &[3])?;
        let latent_mean = store.zeros("codec.latent_mean", &[tokens, width])?;
        let latent_std = store.ones("codec.latent_std", &[tokens, width])?;
        Ok(Self {
            enc1,
            enc2,
            proj,
            dec1,
            dec2_w,
            dec2_b,
            latent_mean,
            latent_std,
            tokens,
            width,
            points,
        })
    }

    /// Parameters updated by codec training (the standardisation buffers are not).
    pub fn trainable_vars(&self) -> Vec<Var> {
        vec![
            self.enc1.w.clone(),
            self.enc1.b.clone(),
            self.enc2.w.clone(),
            self.enc2.b.clone(),
            self.proj.w.clone(),
            self.proj.b.clone(),
            self.dec1.w.clone(),
            self.dec1.b.clone(),
            self.dec2_w.clone(),
            self.dec2_b.clone(),
        ]
    }

    pub fn dtype(&self) -> DType {
        self.dec2_w.dtype()
    }

    /// Unstandardised tokens for a batch of clouds `(B, N, 3) -> (B, K, C)`.
    pub fn encode_raw(&self, points: &Tensor) -> Result<Tensor> {
        let (b, _n, three) = points.dims3()?;
        if three != 3 {
            return Err(Error::Config(format!("expected xyz points, got width {three}")));
        }
        let h = self.enc1.forward(points)?.relu()?;
        let h = self.enc2.forward(&h)?.relu()?;
        let pooled = h.max(1)?;
        Ok(self.proj.forward(&pooled)?.reshape((b, self.tokens, self.width))?)
    }

    /// Standardised tokens `(B, K, C)`.
    pub fn encode(&self, points: &Tensor) -> Result<Tensor> {
        let raw = self.encode_raw(points)?;
        Ok(raw
            .broadcast_sub(self.latent_mean.as_tensor())?
            .broadcast_div(self.latent_std.as_tensor())?)
    }

    /// Decodes unstandardised tokens `(B, K, C) -> (B, N, 3)`.
    pub fn decode_raw(&self, raw: &Tensor) -> Result<Tensor> {
        let b = raw.dim(0)?;
        let flat = raw.reshape((b, self.tokens * self.width))?;
        let h = self.dec1.forward(&flat)?.silu()?;
        let pts = h.matmul(self.dec2_w.as_tensor())?.reshape((b, self.points, 3))?;
        Ok(pts.broadcast_add(self.dec2_b.as_tensor())?)
    }

    /// Decodes standardised tokens `(B, K, C) -> (B, N, 3)`.
    pub fn decode(&self, tokens: &Tensor) -> Result<Tensor> {
        let raw = tokens
            .broadcast_mul(self.latent_std.as_tensor())?
            .broadcast_add(self.latent_mean.as_tensor())?;
        self.decode_raw(&raw)
    }

    pub fn encode_part(&self, part: &PartPointCloud) -> Result<TokenMatrix> {
        if part.points.len() != self.points {
            return Err(Error::Config(format!(
                "codec expects {} points per part, got {}",
                self.points,
                part.points.len()
            )));
        }
        let pts = points_tensor(&[part.points.as_slice()], self.dtype())?;
        Ok(TokenMatrix(self.encode(&pts)?.squeeze(0)?))
    }

    pub fn decode_part(&self, tokens: &TokenMatrix) -> Result<PartPointCloud> {
        let t = tokens.tensor();
        if t.dims() != [self.tokens, self.width] {
            return Err(Error::Config(format!(
                "token matrix has shape {:?}, codec expects ({}, {})",
                t.dims(),
                self.tokens,
                self.width
            )));
        }
        if !all_finite(t)? {
            return Err(Error::Argument("token matrix has non-finite entries".into()));
        }
        let pts = self.decode(&t.unsqueeze(0)?)?.squeeze(0)?;
        Ok(PartPointCloud {
            points: tensor_points(&pts)?,
            type_id: 0,
            part_index: 0,
        })
    }

    /// Fixes the token standardisation from a batch of raw encodings `(B, K, C)`.
    pub fn set_latent_stats(&self, raw: &Tensor) -> Result<()> {
        let mean = raw.mean(0)?;
        let var = raw.broadcast_sub(&mean)?.sqr()?.mean(0)?;
        let std = var.sqrt()?.maximum(STD_FLOOR)?;
        self.latent_mean.set(&mean)?;
        self.latent_std.set(&std)?;
        Ok(())
    }
}

/// Stacks equally sized clouds into `(B, N, 3)`.
pub fn points_tensor(clouds: &[&[Point]], dtype: DType) -> Result<Tensor> {
    let n = clouds.first().map_or(0, |c| c.len());
    let mut flat = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        if c.len() != n {
            return Err(Error::Argument("clouds in a batch must have equal size".into()));
        }
        flat.extend(c.iter().flat_map(|p| p.iter().copied()));
    }
    let t = Tensor::from_vec(flat, (clouds.len(), n, 3), &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

/// `(N, 3)` tensor to points.
pub fn tensor_points(t: &Tensor) -> Result<Vec<Point>> {
    let rows = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(rows.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Batched symmetric L2 Chamfer distance between `(B, N, 3)` and `(B, M, 3)`,
/// averaged over the batch. Differentiable in both arguments.
pub fn chamfer_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let pn = pred.sqr()?.sum_keepdim(D::Minus1)?;
    let gn = gt.sqr()?.sum_keepdim(D::Minus1)?.transpose(1, 2)?;
    let cross = pred.matmul(&gt.transpose(1, 2)?.contiguous()?)?;
    let d = (pn.broadcast_add(&gn)? - (cross * 2.0)?)?.relu()?;
    let forward = d.min(2)?.mean(1)?;
    let backward = d.min(1)?.mean(1)?;
    Ok((forward + backward)?.mean(0)?)
}

#[derive(Debug, Clone)]
pub struct CodecTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub latent_noise: f64,
    pub seed: u64,
}

/// Trains the codec by Chamfer reconstruction, then fixes the token
/// standardisation over `parts`. Returns the mean loss of every epoch.
pub fn train_codec(codec: &PartCodec, parts: &[&[Point]], opts: &CodecTrainOptions) -> Result<Vec<f64>> {
    if parts.is_empty() {
        return Err(Error::Argument("codec training needs at least one part".into()));
    }
    let dtype = codec.dtype();
    let mut opt = AdamW::new(
        codec.trainable_vars(),
        ParamsAdamW {
            lr: opts.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = stream_rng(opts.seed, streams::CODEC_TRAIN);
    let mut order: Vec<usize> = (0..parts.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(opts.batch_size.max(1)).enumerate() {
            let clouds: Vec<&[Point]> = chunk.iter().map(|&i| parts[i]).collect();
            let gt = points_tensor(&clouds, dtype)?;
            let mut tokens = codec.encode_raw(&gt)?;
            if opts.latent_noise > 0.0 {
                let jitter = normal_tensor(&mut rng, tokens.dims(), opts.latent_noise, dtype)?;
                tokens = (tokens + jitter)?;
            }
            let loss = chamfer_loss(&codec.decode_raw(&tokens)?, &gt)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "codec".into(),
                    epoch,
                    step,
                    term: "chamfer".into(),
                });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    let mut raws = Vec::new();
    for chunk in parts.chunks(256) {
        raws.push(codec.encode_raw(&points_tensor(chunk, dtype)?)?.detach());
    }
    codec.set_latent_stats(&Tensor::cat(&raws, 0)?)?;
    Ok(history)
}

/// Mean reconstruction Chamfer distance of `parts` through encode and decode.
pub fn reconstruction_chamfer(codec: &PartCodec, parts: &[&[Point]]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in parts.chunks(128) {
        let gt = points_tensor(chunk, codec.dtype())?;
        let rec = codec.decode(&codec.encode(&gt)?)?;
        for (i, cloud) in chunk.iter().enumerate() {
            let pts = tensor_points(&rec.get(i)?)?;
            total += crate::metrics::chamfer_l2(&pts, cloud)?;
        }
    }
    Ok(total / parts.len() as f64)
}
