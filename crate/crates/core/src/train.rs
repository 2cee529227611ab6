//! Staged training: codec pretraining, gate and prototype warm-up, joint
//! fine-tuning of the flow backbone.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, CodecTrainOptions};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::flow::{loss_mflow, noise};
use crate::gate::{loss_ce, loss_count, select_active};
use crate::model::{Model, Stage};
use crate::nn::{normal_tensor, stream_rng, streams, tensor_from_f64};
use crate::proto::{inject, loss_all, loss_ent, loss_rec};
use crate::slots::{slot_summary, SlotMask};
use crate::view::images_tensor;

/// One training-log line: the epoch mean of one loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Echo each record to stderr as it is pushed.
    pub echo: bool,
}

impl TrainLog {
    pub fn push(&mut self, stage: &str, epoch: usize, term: &str, value: f64) {
        if self.echo {
            eprintln!("{stage} epoch {epoch} {term} {value:.6}");
        }
        self.records.push(LogRecord {
            stage: stage.into(),
            epoch,
            term: term.into(),
            value,
        });
    }

    /// Values of one term in epoch order.
    pub fn series(&self, stage: &str, term: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.term == term)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Clean latents of a dataset, ready for batching.
#[derive(Debug, Clone)]
pub struct LatentSet {
    /// `(N, P, K, C)`
    pub z0: Tensor,
    /// `(N, P)` canonical masks.
    pub mask: Tensor,
    /// `(N)` part counts.
    pub n_obj: Tensor,
    /// `(N, R*R)` flattened condition images.
    pub images: Tensor,
    pub counts: Vec<usize>,
}

impl LatentSet {
    pub fn build(model: &Model, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Argument("training needs a nonempty dataset".into()));
        }
        let dtype = model.dtype();
        let encoded = model.encode_objects(&data.objects)?;
        let masks: Vec<SlotMask> = encoded.iter().map(|(_, m)| *m).collect();
        let slots: Vec<Tensor> = encoded.into_iter().map(|(z, _)| z).collect();
        let counts: Vec<usize> = masks.iter().map(|m| m.n_obj).collect();
        let images: Vec<_> = data.images.iter().collect();
        Ok(Self {
            z0: Tensor::stack(&slots, 0)?.detach(),
            mask: SlotMask::batch_tensor(&masks, dtype)?,
            n_obj: tensor_from_f64(counts.iter().map(|&n| n as f64).collect(), &[counts.len()], dtype)?,
            images: images_tensor(&images, model.config.render_size, dtype)?,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::from_vec(ids, idx.len(), &Device::Cpu)?;
        Ok(Batch {
            z0: self.z0.index_select(&ids, 0)?,
            mask: self.mask.index_select(&ids, 0)?,
            n_obj: self.n_obj.index_select(&ids, 0)?,
            images: self.images.index_select(&ids, 0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub z0: Tensor,
    pub mask: Tensor,
    pub n_obj: Tensor,
    pub images: Tensor,
}

/// Noise draw for one joint-training batch.
#[derive(Debug, Clone)]
pub struct FlowDraw {
    /// `(B)` times in `[0, 1)`.
    pub t: Tensor,
    /// `(B, P, K, C)`
    pub eps: Tensor,
}

impl FlowDraw {
    pub fn sample(rng: &mut impl Rng, like: &Tensor) -> Result<Self> {
        let b = like.dim(0)?;
        let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        Ok(Self {
            t: tensor_from_f64(t, &[b], like.dtype())?,
            eps: normal_tensor(rng, like.dims(), 1.0, like.dtype())?,
        })
    }
}

/// Loss terms of one joint-training step.
#[derive(Debug, Clone)]
pub struct JointLosses {
    pub total: Tensor,
    pub flow: Tensor,
    pub gate: Option<(Tensor, Tensor)>,
    pub proto: Option<(Tensor, Tensor)>,
}

/// Joint objective for one batch. The flow mask is always the canonical
/// mask from the data; the gate only sees the image feature, so its losses
/// cannot reach the backbone.
pub fn joint_losses(model: &Model, batch: &Batch, draw: &FlowDraw) -> Result<JointLosses> {
    let cfg = &model.config;
    let c = model.view.forward(&batch.images)?;
    let z_t = noise(&batch.z0, &draw.eps, &draw.t, &batch.mask)?;
    let (z_in, proto) = if cfg.disable_bank {
        (z_t, None)
    } else {
        let (aligned, w) = model.bank.align(&slot_summary(&batch.z0)?)?;
        let rec = loss_rec(&slot_summary(&batch.z0)?, &aligned, &batch.mask)?;
        let ent = loss_ent(&w, &batch.mask)?;
        (inject(&z_t, &aligned, cfg.beta, &batch.mask)?, Some((rec, ent)))
    };
    let v = model.backbone.forward(&z_in, &draw.t, &c)?;
    let flow = loss_mflow(&v, &batch.z0, &draw.eps, &batch.mask)?;
    let mut total = match &proto {
        Some((rec, ent)) => loss_all(rec, ent, &flow, cfg.lambda_ent, cfg.lambda_flow)?,
        None => (&flow * cfg.lambda_flow)?,
    };
    let gate = if cfg.disable_gate {
        None
    } else {
        let alpha = model.gate.forward(&c)?;
        let ce = loss_ce(&alpha, &batch.mask)?;
        let count = loss_count(&alpha, &batch.n_obj)?;
        total = (total + ((&ce * cfg.lambda_ce)? + (&count * cfg.lambda_count)?)?)?;
        Some((ce, count))
    };
    Ok(JointLosses {
        total,
        flow,
        gate,
        proto,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// Running epoch means of named terms.
struct EpochMeans {
    names: Vec<&'static str>,
    sums: Vec<f64>,
    batches: usize,
}

impl EpochMeans {
    fn new(names: &[&'static str]) -> Self {
        Self {
            names: names.to_vec(),
            sums: vec![0.0; names.len()],
            batches: 0,
        }
    }

    fn add(&mut self, values: &[f64]) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v;
        }
        self.batches += 1;
    }

    fn flush(&self, log: &mut TrainLog, stage: &str, epoch: usize) {
        for (name, s) in self.names.iter().zip(&self.sums) {
            log.push(stage, epoch, name, s / self.batches.max(1) as f64);
        }
    }
}

fn check_finite(values: &[(&str, f64)], stage: &str, epoch: usize, step: usize) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::Divergence {
            stage: stage.into(),
            epoch,
            step,
            term: (*term).into(),
        }),
        None => Ok(()),
    }
}

/// Fraction of objects whose selected slot count equals the true count.
pub fn count_accuracy(alpha: &[Vec<f32>], counts: &[usize], tau: f64) -> Result<f64> {
    let mut hits = 0usize;
    for (a, &n) in alpha.iter().zip(counts) {
        if select_active(a, tau)?.len() == n {
            hits += 1;
        }
    }
    Ok(hits as f64 / counts.len().max(1) as f64)
}

/// Stage 0: trains the part codec on every part by Chamfer reconstruction
/// and fixes its token standardisation. The codec is frozen afterwards.
pub fn stage0_train_codec(model: &mut Model, data: &Dataset, log: &mut TrainLog) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("codec training needs a nonempty dataset".into()));
    }
    let cfg = model.config.clone();
    let parts: Vec<&[[f32; 3]]> = data
        .objects
        .iter()
        .flat_map(|o| o.parts.iter().map(|p| p.points.as_slice()))
        .collect();
    let history = train_codec(
        &model.codec,
        &parts,
        &CodecTrainOptions {
            epochs: cfg.epochs_codec,
            lr: cfg.lr_codec,
            batch_size: cfg.codec_batch_size,
            latent_noise: cfg.latent_noise,
            seed: cfg.seed,
        },
    )?;
    for (epoch, v) in history.iter().enumerate() {
        log.push("codec", epoch, "chamfer", *v);
    }
    if model.config.fixed_part_count.is_none() {
        let mean = data.objects.iter().map(|o| o.n_obj() as f64).sum::<f64>() / data.len() as f64;
        model.config.fixed_part_count = Some((mean.round() as usize).clamp(1, cfg.p_max));
    }
    model.stage = Stage::Codec;
    model.step += (history.len() * parts.len().div_ceil(cfg.codec_batch_size)) as u64;
    Ok(())
}

/// Distinct (category, part type) templates in a dataset.
pub fn template_count(data: &Dataset) -> usize {
    data.objects
        .iter()
        .flat_map(|o| o.parts.iter().map(move |p| (o.category_tag.clone(), p.type_id)))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Stage 1: trains the view encoder and gate on the gating losses and the
/// prototype bank on clean-latent reconstruction; codec and backbone stay frozen.
pub fn stage1_warmup(model: &mut Model, data: &Dataset, log: &mut TrainLog) -> Result<()> {
    if model.stage < Stage::Codec {
        return Err(Error::StageOrder("warm-up needs a trained codec (stage 0)".into()));
    }
    let cfg = model.config.clone();
    let templates = template_count(data);
    if !cfg.disable_bank && cfg.num_prototypes >= 4 * templates {
        return Err(Error::Config(format!(
            "num_prototypes ({}) must stay below four times the {templates} part templates in the data",
            cfg.num_prototypes
        )));
    }
    let set = LatentSet::build(model, data)?;
    let mut vars = Vec::new();
    if !cfg.disable_gate {
        vars.extend(model.view.vars());
        vars.extend(model.gate.vars());
    }
    if !cfg.disable_bank {
        vars.extend(model.bank.vars());
    }
    let mut opt = adam(vars.clone(), cfg.lr_warmup)?;
    let mut rng = stream_rng(cfg.seed, streams::WARMUP);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs_warmup {
        if vars.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        let mut means = EpochMeans::new(&["gate", "ce", "count", "rec", "ent"]);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = set.batch(idx)?;
            let zero = Tensor::zeros((), model.dtype(), &Device::Cpu)?;
            let (ce, count) = if cfg.disable_gate {
                (zero.clone(), zero.clone())
            } else {
                let alpha = model.gate.forward(&model.view.forward(&batch.images)?)?;
                (loss_ce(&alpha, &batch.mask)?, loss_count(&alpha, &batch.n_obj)?)
            };
            let (rec, ent) = if cfg.disable_bank {
                (zero.clone(), zero.clone())
            } else {
                let s = slot_summary(&batch.z0)?;
                let (aligned, w) = model.bank.align(&s)?;
                (loss_rec(&s, &aligned, &batch.mask)?, loss_ent(&w, &batch.mask)?)
            };
            let gate = ((&ce * cfg.lambda_ce)? + (&count * cfg.lambda_count)?)?;
            let proto = (&rec + (&ent * cfg.lambda_ent)?)?;
            let total = (&gate + &proto)?;
            let values = [
                ("gate", scalar(&gate)?),
                ("ce", scalar(&ce)?),
                ("count", scalar(&count)?),
                ("rec", scalar(&rec)?),
                ("ent", scalar(&ent)?),
            ];
            check_finite(&values, "warmup", epoch, step)?;
            opt.backward_step(&total)?;
            model.step += 1;
            means.add(&values.map(|(_, v)| v));
        }
        means.flush(log, "warmup", epoch);
        if !cfg.disable_gate {
            let alpha = model.gate.forward(&model.view.forward(&set.images)?)?;
            let alpha = alpha.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            log.push("warmup", epoch, "count_accuracy", count_accuracy(&alpha, &set.counts, cfg.tau)?);
        }
    }
    model.stage = Stage::Warmup;
    Ok(())
}

/// Stage 2: joint fine-tuning of backbone, bank, view encoder and gate.
pub fn stage2_joint(model: &mut Model, data: &Dataset, log: &mut TrainLog) -> Result<()> {
    if model.stage < Stage::Codec {
        return Err(Error::StageOrder("joint training needs a trained codec (stage 0)".into()));
    }
    if model.stage < Stage::Warmup && !model.config.disable_warmup {
        return Err(Error::StageOrder(
            "joint training needs the warm-up stage unless disable_warmup is set".into(),
        ));
    }
    let cfg = model.config.clone();
    let set = LatentSet::build(model, data)?;
    let first_block = if cfg.freeze_first_half { cfg.blocks / 2 } else { 0 };
    let mut vars = model.backbone.vars_from_block(first_block);
    vars.extend(model.view.vars());
    if !cfg.disable_bank {
        vars.extend(model.bank.vars());
    }
    if !cfg.disable_gate {
        vars.extend(model.gate.vars());
    }
    let mut opt = adam(vars, cfg.lr_joint)?;
    let mut rng = stream_rng(cfg.seed, streams::JOINT);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs_joint {
        order.shuffle(&mut rng);
        let mut means = EpochMeans::new(&["total", "flow", "ce", "count", "rec", "ent"]);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = set.batch(idx)?;
            let draw = FlowDraw::sample(&mut rng, &batch.z0)?;
            let l = joint_losses(model, &batch, &draw)?;
            let (ce, count) = match &l.gate {
                Some((a, b)) => (scalar(a)?, scalar(b)?),
                None => (0.0, 0.0),
            };
            let (rec, ent) = match &l.proto {
                Some((a, b)) => (scalar(a)?, scalar(b)?),
                None => (0.0, 0.0),
            };
            let values = [
                ("total", scalar(&l.total)?),
                ("flow", scalar(&l.flow)?),
                ("ce", ce),
                ("count", count),
                ("rec", rec),
                ("ent", ent),
            ];
            check_finite(&values, "joint", epoch, step)?;
            opt.backward_step(&l.total)?;
            model.step += 1;
            means.add(&values.map(|(_, v)| v));
        }
        means.flush(log, "joint", epoch);
    }
    model.stage = Stage::Joint;
    Ok(())
}

/// Centered moving average with the window clipped at the ends.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::synth::{gen_objects, render_silhouette};

    fn tiny() -> Config {
        Config {
            points_per_part: 32,
            render_size: 8,
            p_max: 4,
            max_parts: 4,
            tokens_per_part: 2,
            latent_dim: 4,
            codec_decoder_hidden: 16,
            feature_dim: 8,
            view_hidden: 8,
            gate_hidden: 8,
            num_prototypes: 3,
            hidden: 8,
            blocks: 2,
            heads: 2,
            ff_mult: 2,
            steps: 2,
            epochs_codec: 1,
            epochs_warmup: 1,
            epochs_joint: 1,
            batch_size: 4,
            ..Config::default()
        }
    }

    fn data(cfg: &Config) -> Dataset {
        let objects = gen_objects(&cfg.generator_spec(), 1, streams::DATA_TRAIN, 6, 0.1, 1).unwrap();
        let images = objects.iter().map(|o| render_silhouette(o, cfg.render_size)).collect();
        Dataset { objects, images }
    }

    fn snapshot(vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|v| crate::nn::to_f64_vec(v.as_tensor()).unwrap()).collect()
    }

    #[test]
    fn stage_order_is_enforced() {
        let cfg = tiny();
        let d = data(&cfg);
        let mut m = Model::new(&cfg).unwrap();
        let mut log = TrainLog::default();
        assert!(matches!(stage2_joint(&mut m, &d, &mut log), Err(Error::StageOrder(_))));
        assert!(matches!(stage1_warmup(&mut m, &d, &mut log), Err(Error::StageOrder(_))));
    }

    #[test]
    fn freeze_contracts_hold() {
        let cfg = tiny();
        let d = data(&cfg);
        let mut m = Model::new(&cfg).unwrap();
        let mut log = TrainLog::default();
        stage0_train_codec(&mut m, &d, &mut log).unwrap();
        let codec = snapshot(&m.codec.trainable_vars());
        let backbone = snapshot(&m.backbone.vars());
        let e_null = snapshot(&[m.e_null.clone()]);
        stage1_warmup(&mut m, &d, &mut log).unwrap();
        assert_eq!(snapshot(&m.backbone.vars()), backbone);
        assert_eq!(snapshot(&m.codec.trainable_vars()), codec);
        stage2_joint(&mut m, &d, &mut log).unwrap();
        assert_eq!(snapshot(&m.codec.trainable_vars()), codec);
        assert_eq!(snapshot(&[m.e_null.clone()]), e_null);
        assert_ne!(snapshot(&m.backbone.vars()), backbone);
        assert_eq!(log.series("joint", "flow").len(), 1);
    }

    #[test]
    fn disabled_bank_is_untouched() {
        let cfg = Config {
            disable_bank: true,
            ..tiny()
        };
        let d = data(&cfg);
        let mut m = Model::new(&cfg).unwrap();
        let mut log = TrainLog::default();
        stage0_train_codec(&mut m, &d, &mut log).unwrap();
        let bank = snapshot(&m.bank.vars());
        stage1_warmup(&mut m, &d, &mut log).unwrap();
        stage2_joint(&mut m, &d, &mut log).unwrap();
        assert_eq!(snapshot(&m.bank.vars()), bank);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0], 3), vec![1.5, 2.0, 2.5]);
        assert_eq!(smoothed(&[4.0], 5), vec![4.0]);
    }
}
