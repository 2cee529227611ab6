//! Whole-run drivers: the full training schedule and the ablation grid.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, EvalOptions, Predictor};
use crate::metrics::MetricsReport;
use crate::model::{Checkpoint, Model};
use crate::train::{stage0_train_codec, stage1_warmup, stage2_joint, TrainLog};

/// Runs warm-up (unless disabled) and joint training on a codec-trained model.
pub fn train_after_codec(model: &mut Model, data: &Dataset, log: &mut TrainLog) -> Result<()> {
    if !model.config.disable_warmup {
        stage1_warmup(model, data, log)?;
    }
    stage2_joint(model, data, log)
}

/// Every stage from a fresh initialisation.
pub fn train_all(config: &Config, data: &Dataset, log: &mut TrainLog) -> Result<Model> {
    let mut model = Model::new(config)?;
    stage0_train_codec(&mut model, data, log)?;
    train_after_codec(&mut model, data, log)?;
    Ok(model)
}

/// One row of the component ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub gate: bool,
    pub bank: bool,
    pub warmup: bool,
    pub report: MetricsReport,
    /// Wall time of the shared codec stage.
    pub codec_seconds: f64,
    /// Wall time of this setting's warm-up and joint training.
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Settings in table order: each component removed in turn, then the full model.
pub const ABLATION_GRID: [(&str, bool, bool, bool); 4] = [
    ("no-gate", false, true, true),
    ("no-bank", true, false, true),
    ("no-warmup", true, true, false),
    ("full", true, true, true),
];

/// Trains the codec once, then every grid setting from that shared
/// checkpoint with the same seed, and evaluates each on `test`.
pub fn ablate(
    config: &Config,
    train: &Dataset,
    test: &Dataset,
    opts: &EvalOptions,
    mut on_row: impl FnMut(&AblationRow, &TrainLog, &Model),
) -> Result<Vec<AblationRow>> {
    let base = Config {
        disable_gate: false,
        disable_bank: false,
        disable_warmup: false,
        ..config.clone()
    };
    let mut codec_log = TrainLog::default();
    let mut model = Model::new(&base)?;
    let clock = Instant::now();
    stage0_train_codec(&mut model, train, &mut codec_log)?;
    let codec_seconds = clock.elapsed().as_secs_f64();
    let shared: Checkpoint = model.to_checkpoint()?;
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for (setting, gate, bank, warmup) in ABLATION_GRID {
        let cfg = Config {
            disable_gate: !gate,
            disable_bank: !bank,
            disable_warmup: !warmup,
            ..shared.config.clone()
        };
        let mut model = Model::from_checkpoint_with(&shared, &cfg)?;
        let mut log = codec_log.clone();
        let clock = Instant::now();
        train_after_codec(&mut model, train, &mut log)?;
        let train_seconds = clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        let (report, _) = evaluate(Predictor::Model(&model), test, opts)?;
        let row = AblationRow {
            setting: setting.into(),
            gate,
            bank,
            warmup,
            report,
            codec_seconds,
            train_seconds,
            eval_seconds: clock.elapsed().as_secs_f64(),
        };
        on_row(&row, &log, &model);
        rows.push(row);
    }
    Ok(rows)
}

/// Fixed-order comparison table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut s = format!(
        "{:<11}{:>6}{:>6}{:>8}{:>12}{:>10}{:>10}{:>10}\n",
        "setting", "gate", "bank", "warmup", "chamfer", "fscore", "pair_iou", "count_acc"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<11}{:>6}{:>6}{:>8}{:>12.6}{:>10.4}{:>10.4}{:>10.4}\n",
            r.setting,
            mark(r.gate),
            mark(r.bank),
            mark(r.warmup),
            r.report.chamfer_l2,
            r.report.fscore,
            r.report.mean_pair_iou,
            r.report.gate_count_accuracy
        ));
    }
    s
}
