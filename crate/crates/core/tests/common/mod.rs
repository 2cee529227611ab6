//! Shared test helpers: a central finite-difference gradient checker and
//! brute-force metric oracles.

#![allow(dead_code)]

pub mod checks;

use std::collections::HashSet;

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use slotgen::metrics::Aabb;
use slotgen::nn::{normal_tensor, to_f64_vec};
use slotgen::synth::Point;
use slotgen::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

/// Compares the autodiff gradient of `loss` against central differences on up
/// to `per_var` randomly chosen coordinates of every variable. Variables must
/// be f64. Every variable is restored before returning.
pub fn check_gradients(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Result<Tensor>,
    per_var: usize,
    rng: &mut impl Rng,
) -> Result<FdReport> {
    let grads = loss()?.backward()?;
    let mut report = FdReport {
        max_rel: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for (name, var) in vars {
        assert_eq!(var.dtype(), DType::F64, "{name} must be f64");
        let original = to_f64_vec(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; original.len()],
        };
        let picks: Vec<usize> = if original.len() <= per_var {
            (0..original.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..original.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), var.device())?)?;
                Ok(loss()?.to_scalar::<f64>()?)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            var.set(&Tensor::from_vec(original.clone(), var.dims(), var.device())?)?;
            let e = rel_err(analytic[i], numeric);
            report.checked += 1;
            if e > report.max_rel || report.worst.is_empty() {
                report.max_rel = report.max_rel.max(e);
                report.worst = format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }
    Ok(report)
}

pub fn var64(rng: &mut impl Rng, shape: &[usize], std: f64) -> Var {
    Var::from_tensor(&normal_tensor(rng, shape, std, DType::F64).unwrap()).unwrap()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-0.5f32..0.5),
                rng.random_range(-0.5f32..0.5),
                rng.random_range(-0.5f32..0.5),
            ]
        })
        .collect()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

pub fn chamfer_oracle(a: &[Point], b: &[Point]) -> f64 {
    let one_way = |x: &[Point], y: &[Point]| {
        let mut total = 0.0;
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                best = best.min(d2(p, q));
            }
            total += best;
        }
        total / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

pub fn fscore_oracle(pred: &[Point], gt: &[Point], tau: f64) -> f64 {
    let covered = |x: &[Point], y: &[Point]| {
        let mut hits = 0usize;
        for p in x {
            let mut any = false;
            for q in y {
                if d2(p, q) <= tau * tau {
                    any = true;
                }
            }
            hits += any as usize;
        }
        hits as f64 / x.len() as f64
    };
    let p = covered(pred, gt);
    let r = covered(gt, pred);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn voxel_set(points: &[Point], res: usize, b: &Aabb) -> HashSet<(usize, usize, usize)> {
    points
        .iter()
        .map(|p| {
            let idx = |a: usize| {
                let f = ((p[a] as f64 - b.min[a]) / (b.max[a] - b.min[a]) * res as f64).floor();
                (f.max(0.0) as usize).min(res - 1)
            };
            (idx(0), idx(1), idx(2))
        })
        .collect()
}

pub fn pair_iou_oracle(parts: &[Vec<Point>], res: usize, b: &Aabb) -> f64 {
    if parts.len() < 2 {
        return 0.0;
    }
    let sets: Vec<_> = parts.iter().map(|p| voxel_set(p, res, b)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let inter = sets[i].intersection(&sets[j]).count();
            let union = sets[i].union(&sets[j]).count();
            total += if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            pairs += 1;
        }
    }
    total / pairs as f64
}
