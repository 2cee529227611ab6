//! Property checks shared by the acceptance runner and the ordinary test
//! targets. Each returns a one-line summary on success and a description of
//! the first violation otherwise.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use slotgen::codec::TokenMatrix;
use slotgen::config::Config;
use slotgen::dataset::Dataset;
use slotgen::flow::{initial_noise, loss_mflow, noise, sample, BackboneShape, FlowBackbone, VelocityModel};
use slotgen::gate::{activations, loss_ce, loss_count};
use slotgen::metrics::{chamfer_l2, fscore, mean_pairwise_iou, Aabb};
use slotgen::model::Model;
use slotgen::nn::{normal_tensor, stream_rng, streams, to_f64_vec, ParamStore};
use slotgen::proto::{aligned_summary, assign, loss_ent, loss_rec};
use slotgen::slots::{pack_slots, SlotMask};
use slotgen::synth::{gen_objects, render_silhouette, Point};
use slotgen::train::{joint_losses, stage0_train_codec, stage2_joint, Batch, FlowDraw, LatentSet, TrainLog};

use super::*;

pub type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Metric implementations against double-loop oracles on random instances.
pub fn metric_oracles(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream_rng(seed, 11);
    let bounds = Aabb::unit_cube();
    let mut worst_cd = 0.0f64;
    for case in 0..instances {
        let (na, nb) = (rng.random_range(1..=128), rng.random_range(1..=128));
        let a = random_cloud(&mut rng, na);
        let b = random_cloud(&mut rng, nb);
        let tau = [0.05, 0.1, 0.2][case % 3];
        let cd = ok(chamfer_l2(&a, &b))?;
        let cd_ref = chamfer_oracle(&a, &b);
        worst_cd = worst_cd.max((cd - cd_ref).abs());
        ensure!((cd - cd_ref).abs() <= 1e-9, "case {case}: chamfer {cd} vs oracle {cd_ref}");
        let f = ok(fscore(&a, &b, tau))?;
        let f_ref = fscore_oracle(&a, &b, tau);
        ensure!((f - f_ref).abs() <= 1e-9, "case {case}: fscore {f} vs oracle {f_ref}");
        let parts: Vec<Vec<Point>> = (0..rng.random_range(1..=5))
            .map(|_| {
                let n = rng.random_range(1..=128);
                let c: [f32; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                let s = rng.random_range(0.02f32..0.3);
                (0..n)
                    .map(|_| {
                        [
                            c[0] + s * rng.random_range(-1.0f32..1.0),
                            c[1] + s * rng.random_range(-1.0f32..1.0),
                            c[2] + s * rng.random_range(-1.0f32..1.0),
                        ]
                    })
                    .collect()
            })
            .collect();
        let res = [64, 8, 3][case % 3];
        let iou = ok(mean_pairwise_iou(&parts, res, &bounds))?;
        let iou_ref = pair_iou_oracle(&parts, res, &bounds);
        ensure!((iou - iou_ref).abs() <= 1e-9, "case {case}: pair IoU {iou} vs oracle {iou_ref}");
    }
    Ok(format!("{instances} instances, max chamfer deviation {worst_cd:.2e}"))
}

fn prefix_mask(rng: &mut impl Rng, batch: usize, p: usize) -> (Tensor, Vec<usize>) {
    let counts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=p)).collect();
    let masks: Vec<SlotMask> = counts.iter().map(|&n| SlotMask::new(n, p).unwrap()).collect();
    (SlotMask::batch_tensor(&masks, DType::F64).unwrap(), counts)
}

/// Micro flow backbone used by the gradient checks.
pub fn micro_backbone(seed: u64) -> (ParamStore, FlowBackbone) {
    let mut store = ParamStore::new(DType::F64);
    let shape = BackboneShape {
        p_max: 2,
        tokens: 2,
        width: 4,
        feature_dim: 3,
        hidden: 8,
        blocks: 1,
        heads: 2,
        ff_mult: 2,
    };
    let bb = FlowBackbone::new(&mut store, shape, &mut stream_rng(seed, streams::INIT)).unwrap();
    (store, bb)
}

/// Central finite differences against autodiff for every training loss.
pub fn gradient_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream_rng(seed, 12);
    let mut worst = std::collections::BTreeMap::<&str, FdReport>::new();
    let mut record = |name: &'static str, r: FdReport| -> std::result::Result<(), String> {
        let entry = worst.entry(name).or_insert_with(|| r.clone());
        if r.max_rel >= entry.max_rel {
            *entry = r;
        }
        Ok(())
    };
    for _ in 0..instances {
        // Gate losses through the clamped sigmoid.
        let logits = var64(&mut rng, &[2, 5], 1.5);
        let (mask, counts) = prefix_mask(&mut rng, 2, 5);
        let n_obj = Tensor::from_vec(counts.iter().map(|&n| n as f64).collect::<Vec<_>>(), 2, &Device::Cpu).unwrap();
        let vars = vec![("logits".to_string(), logits.clone())];
        let ce = || loss_ce(&activations(logits.as_tensor())?, &mask);
        record("L_ce", ok(check_gradients(&vars, &ce, 16, &mut rng))?)?;
        let count = || loss_count(&activations(logits.as_tensor())?, &n_obj);
        record("L_count", ok(check_gradients(&vars, &count, 16, &mut rng))?)?;

        // Prototype losses through the assignment softmax.
        let s = var64(&mut rng, &[2, 3, 4], 1.0);
        let p = var64(&mut rng, &[3, 4], 1.0);
        let (mask, _) = prefix_mask(&mut rng, 2, 3);
        let vars = vec![("s".to_string(), s.clone()), ("p".to_string(), p.clone())];
        let rec = || {
            let w = assign(s.as_tensor(), p.as_tensor())?;
            loss_rec(s.as_tensor(), &aligned_summary(&w, p.as_tensor())?, &mask)
        };
        record("L_rec", ok(check_gradients(&vars, &rec, 24, &mut rng))?)?;
        let ent = || loss_ent(&assign(s.as_tensor(), p.as_tensor())?, &mask);
        record("L_ent", ok(check_gradients(&vars, &ent, 24, &mut rng))?)?;

        // Masked flow loss through a one-block backbone.
        let (store, bb) = micro_backbone(rng.random());
        let z0 = normal_tensor(&mut rng, &[2, 2, 2, 4], 1.0, DType::F64).unwrap();
        let eps = normal_tensor(&mut rng, &[2, 2, 2, 4], 1.0, DType::F64).unwrap();
        let t = Tensor::from_vec(vec![rng.random::<f64>(), rng.random::<f64>()], 2, &Device::Cpu).unwrap();
        let c = normal_tensor(&mut rng, &[2, 3], 1.0, DType::F64).unwrap();
        let (mask, _) = prefix_mask(&mut rng, 2, 2);
        let vars: Vec<(String, Var)> = store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let flow = || {
            let v = bb.forward(&noise(&z0, &eps, &t, &mask)?, &t, &c)?;
            loss_mflow(&v, &z0, &eps, &mask)
        };
        record("L_mflow", ok(check_gradients(&vars, &flow, 4, &mut rng))?)?;
    }
    let mut summary = Vec::new();
    for (name, r) in &worst {
        ensure!(r.max_rel < 1e-4, "{name}: max relative error {:.3e} at {}", r.max_rel, r.worst);
        summary.push(format!("{name} {:.1e}", r.max_rel));
    }
    Ok(format!("{instances} instances each; max rel err: {}", summary.join(", ")))
}

/// Backbone stand-in returning one fixed field.
pub struct ConstantField(pub Tensor);

impl VelocityModel for ConstantField {
    fn velocity(&self, z_in: &Tensor, _t: &Tensor, _c: &Tensor) -> slotgen::Result<Tensor> {
        Ok(self.0.broadcast_as(z_in.shape())?.contiguous()?)
    }
}

/// Noise endpoints, constant-velocity sampler exactness and masked-loss zeros.
pub fn flow_identities(seed: u64) -> Outcome {
    let mut rng = stream_rng(seed, 13);
    let shape = [3usize, 4, 2, 5];
    let z0 = normal_tensor(&mut rng, &shape, 1.0, DType::F32).unwrap();
    let eps = normal_tensor(&mut rng, &shape, 1.0, DType::F32).unwrap();
    let mask = Tensor::new(&[[1f32, 0., 0., 0.], [1., 1., 1., 0.], [1., 1., 1., 1.]], &Device::Cpu).unwrap();
    let m = to_f64_vec(&mask).unwrap();
    for (t_val, expect) in [(1.0f32, &z0), (0.0, &eps)] {
        let t = Tensor::new(&[t_val; 3], &Device::Cpu).unwrap();
        let out = to_f64_vec(&ok(noise(&z0, &eps, &t, &mask))?).unwrap();
        let (e, z) = (to_f64_vec(expect).unwrap(), to_f64_vec(&z0).unwrap());
        for (i, v) in out.iter().enumerate() {
            let active = m[i / 10] == 1.0;
            let want = if active { e[i] } else { z[i] };
            ensure!(*v == want, "noise at t={t_val}: entry {i} is {v}, expected {want}");
        }
    }

    let (p_max, k, c) = (4usize, 2usize, 5usize);
    let e_null = normal_tensor(&mut rng, &[c], 1.0, DType::F32).unwrap();
    let active = vec![vec![0, 1, 2]];
    let target = normal_tensor(&mut rng, &[p_max, k, c], 1.0, DType::F32).unwrap();
    let seed_obj = 77u64;
    let prior = initial_noise(seed_obj, (p_max, k, c), DType::F32).unwrap();
    let field = ConstantField((&target - &prior).unwrap().unsqueeze(0).unwrap());
    let feats = Tensor::zeros((1, 3), DType::F32, &Device::Cpu).unwrap();
    let mut worst = 0.0f64;
    for steps in [1usize, 4, 32] {
        let z = ok(sample(&field, None, &active, &feats, steps, &[seed_obj], &e_null, (p_max, k)))?;
        let (got, want, null) = (
            to_f64_vec(&z).unwrap(),
            to_f64_vec(&target).unwrap(),
            to_f64_vec(&e_null).unwrap(),
        );
        for (i, v) in got.iter().enumerate() {
            let slot = i / (k * c);
            if slot < 3 {
                worst = worst.max((v - want[i]).abs());
                ensure!((v - want[i]).abs() <= 1e-6, "{steps} steps: active entry {i} off by {}", (v - want[i]).abs());
            } else {
                ensure!(*v == null[i % c], "{steps} steps: null slot entry {i} moved");
            }
        }
    }

    let zeros = Tensor::zeros((3, 4), DType::F32, &Device::Cpu).unwrap();
    let v = normal_tensor(&mut rng, &shape, 1.0, DType::F32).unwrap();
    let l0 = ok(loss_mflow(&v, &z0, &eps, &zeros))?.to_scalar::<f32>().unwrap();
    ensure!(l0 == 0.0, "fully masked loss is {l0}");
    let exact = (&z0 - &eps).unwrap();
    let l1 = ok(loss_mflow(&exact, &z0, &eps, &mask))?.to_scalar::<f32>().unwrap();
    ensure!(l1 == 0.0, "loss at the exact target is {l1}");
    Ok(format!("endpoints exact; constant-field sampler max error {worst:.1e} over steps 1/4/32; masked zeros exact"))
}

/// A deliberately small configuration for fast end-to-end checks.
pub fn tiny_config() -> Config {
    Config {
        points_per_part: 32,
        render_size: 8,
        train_objects: 12,
        test_objects: 4,
        p_max: 4,
        max_parts: 4,
        tokens_per_part: 2,
        latent_dim: 4,
        codec_decoder_hidden: 16,
        feature_dim: 8,
        view_hidden: 16,
        gate_hidden: 8,
        num_prototypes: 3,
        hidden: 8,
        blocks: 2,
        heads: 2,
        ff_mult: 2,
        steps: 3,
        epochs_codec: 2,
        epochs_warmup: 2,
        epochs_joint: 2,
        batch_size: 4,
        codec_batch_size: 8,
        ..Config::default()
    }
}

pub fn tiny_data(cfg: &Config, stream: u64, count: usize) -> Dataset {
    let objects = gen_objects(&cfg.generator_spec(), cfg.seed, stream, count, cfg.iou_cap, 1).unwrap();
    let images = objects.iter().map(|o| render_silhouette(o, cfg.render_size)).collect();
    Dataset { objects, images }
}

fn all_zero_or_absent(grads: &candle_core::backprop::GradStore, var: &Var) -> bool {
    match grads.get(var.as_tensor()) {
        Some(g) => to_f64_vec(g).unwrap().iter().all(|&v| v == 0.0),
        None => true,
    }
}

/// The null embedding never receives gradient and never changes.
pub fn null_slot_isolation(seed: u64) -> Outcome {
    let mut rng = stream_rng(seed, 14);
    let (p_max, k, c) = (4usize, 2usize, 3usize);
    let e_null = var64(&mut rng, &[c], 1.0);
    let (store, bb) = {
        let mut store = ParamStore::new(DType::F64);
        let shape = BackboneShape {
            p_max,
            tokens: k,
            width: c,
            feature_dim: 3,
            hidden: 8,
            blocks: 1,
            heads: 2,
            ff_mult: 2,
        };
        let bb = FlowBackbone::new(&mut store, shape, &mut stream_rng(seed, streams::INIT)).unwrap();
        (store, bb)
    };
    let _ = store;
    let parts: Vec<TokenMatrix> = (0..2)
        .map(|_| TokenMatrix(normal_tensor(&mut rng, &[k, c], 1.0, DType::F64).unwrap()))
        .collect();
    let (z, m) = ok(pack_slots(&parts, p_max, e_null.as_tensor()))?;
    let z0 = z.unsqueeze(0).unwrap();
    let mask = SlotMask::batch_tensor(&[m], DType::F64).unwrap();
    let eps = normal_tensor(&mut rng, &[1, p_max, k, c], 1.0, DType::F64).unwrap();
    let t = Tensor::new(&[0.37f64], &Device::Cpu).unwrap();
    let feats = normal_tensor(&mut rng, &[1, 3], 1.0, DType::F64).unwrap();
    let loss = |eps: &Tensor| -> slotgen::Result<Tensor> {
        let v = bb.forward(&noise(&z0, eps, &t, &mask)?, &t, &feats)?;
        loss_mflow(&v, &z0, eps, &mask)
    };
    let l = ok(loss(&eps))?;
    let grads = ok(l.backward())?;
    ensure!(all_zero_or_absent(&grads, &e_null), "flow loss has a gradient on the null embedding");

    let mut perturbed = to_f64_vec(&eps).unwrap();
    for slot in m.n_obj..p_max {
        for j in 0..k * c {
            perturbed[slot * k * c + j] += rng.random_range(-5.0..5.0);
        }
    }
    let eps2 = Tensor::from_vec(perturbed, eps.dims(), &Device::Cpu).unwrap();
    let (a, b) = (l.to_scalar::<f64>().unwrap(), ok(loss(&eps2))?.to_scalar::<f64>().unwrap());
    ensure!(a.to_bits() == b.to_bits(), "null-slot noise changed the loss: {a} vs {b}");

    let cfg = Config {
        disable_warmup: true,
        epochs_joint: 1,
        ..tiny_config()
    };
    let data = tiny_data(&cfg, streams::DATA_TRAIN, 8);
    let mut model = ok(Model::new(&cfg))?;
    let mut log = TrainLog::default();
    ok(stage0_train_codec(&mut model, &data, &mut log))?;
    let before = to_f64_vec(model.e_null.as_tensor()).unwrap();
    ok(stage2_joint(&mut model, &data, &mut log))?;
    let after = to_f64_vec(model.e_null.as_tensor()).unwrap();
    ensure!(
        before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()),
        "null embedding changed during joint training"
    );
    Ok("zero gradient; null-noise perturbation bit-identical; unchanged over a joint epoch".into())
}

fn tiny_batch(model: &Model, data: &Dataset) -> Batch {
    let set = LatentSet::build(model, data).unwrap();
    set.batch(&(0..set.len()).collect::<Vec<_>>()).unwrap()
}

/// Gate losses never reach the backbone and the flow loss ignores the gate.
pub fn gate_decoupling(seed: u64) -> Outcome {
    let cfg = Config { seed, ..tiny_config() };
    let data = tiny_data(&cfg, streams::DATA_TRAIN, 6);
    let model = ok(Model::with_dtype(&cfg, DType::F64))?;
    let batch = tiny_batch(&model, &data);
    let draw = ok(FlowDraw::sample(&mut stream_rng(seed, 15), &batch.z0))?;
    let losses = ok(joint_losses(&model, &batch, &draw))?;
    let (ce, count) = losses.gate.clone().ok_or("gate losses missing")?;
    let gate_loss = ((ce * cfg.lambda_ce).unwrap() + (count * cfg.lambda_count).unwrap()).unwrap();
    let grads = ok(gate_loss.backward())?;
    let backbone = model.backbone.vars();
    for (i, v) in backbone.iter().enumerate() {
        ensure!(all_zero_or_absent(&grads, v), "gate loss reaches backbone tensor {i}");
    }
    let reached_gate = model.gate.vars().iter().any(|v| !all_zero_or_absent(&grads, v));
    ensure!(reached_gate, "gate loss does not train the gate");

    let flow_before = losses.flow.to_scalar::<f64>().unwrap();
    let mut rng = stream_rng(seed, 16);
    for v in model.gate.vars() {
        v.set(&normal_tensor(&mut rng, v.dims(), 3.0, DType::F64).unwrap()).unwrap();
    }
    let again = ok(joint_losses(&model, &batch, &draw))?;
    let flow_after = again.flow.to_scalar::<f64>().unwrap();
    ensure!(
        flow_before.to_bits() == flow_after.to_bits(),
        "flow loss moved with the gate: {flow_before} vs {flow_after}"
    );
    Ok(format!(
        "{} backbone tensors with zero gate gradient; flow loss bit-identical under random gate weights",
        backbone.len()
    ))
}
