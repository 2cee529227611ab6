//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 bad
//! configuration, 4 missing or invalid checkpoint, 5 missing or corrupt
//! dataset. Failures print one line to stderr of the form
//! `error[code=<kind>]: <message>`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::dataset::{read_dataset, write_dataset, write_ply, Dataset, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, EvalOptions, Predictor};
use crate::model::{object_seed, Checkpoint, Model, Stage};
use crate::nn::{streams, to_f64_vec};
use crate::pipeline::{ablate, ablation_table};
use crate::slots::slot_summary;
use crate::synth::{gen_objects, render_silhouette};
use crate::train::{stage0_train_codec, stage1_warmup, stage2_joint, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "slotgen", version, about = "Image-conditioned part-based 3D generation on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON configuration file; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for data generation and evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Ablations {
    #[arg(long)]
    pub disable_gate: bool,
    #[arg(long)]
    pub disable_bank: bool,
    #[arg(long)]
    pub disable_warmup: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Sampling {
    /// Euler steps; defaults to the configured value.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Gate threshold; defaults to the configured value.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "0")]
    Codec,
    #[value(name = "1")]
    Warmup,
    #[value(name = "2")]
    Joint,
    #[value(name = "all")]
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test splits under `<out>/train` and `<out>/test`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run training stages; writes `checkpoint_stage<N>.bin`, `train_log.jsonl`, `config.json`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablations: Ablations,
        /// Dataset root (with a `train` split) or dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Input checkpoint for stages 1 and 2; defaults to the previous stage's file under `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate parts for each object of a dataset; writes `<out>/<object_id>/part_<slot>.ply` and `record.json`.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (with a `test` split) or dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Only the first N objects.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score generations on held-out data; writes `metrics.json` and `per_object.jsonl`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, required_unless_present = "oracle_passthrough")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle_passthrough: bool,
    },
    /// Train and evaluate the four component settings; writes `ablation.json`, `ablation.txt`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Dataset root with `train` and `test` splits.
        #[arg(long)]
        data: PathBuf,
    },
    /// Print gate activations, selections and true masks as JSON lines.
    InspectGates {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write prototypes and per-slot assignments to `<out>/prototypes.json`.
    ExportPrototypes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional dataset whose slot assignments are exported.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> (i32, &'static str) {
    match err {
        Error::Config(_) => (3, "bad-config"),
        Error::Checkpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointTensor { .. }
        | Error::ShapeMismatch { .. } => (4, "checkpoint"),
        Error::Manifest { .. } | Error::Object { .. } => (5, "dataset"),
        Error::StageOrder(_) => (1, "stage-order"),
        Error::Divergence { .. } => (1, "divergence"),
        _ => (1, "runtime"),
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let msg = err.to_string().replace('\n', " ");
            eprintln!("error[code={kind}]: {msg}");
            code
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_ablations(cfg: &mut Config, a: &Ablations) {
    cfg.disable_gate |= a.disable_gate;
    cfg.disable_bank |= a.disable_bank;
    cfg.disable_warmup |= a.disable_warmup;
}

/// `root/<split>` when it holds a manifest, else `root` itself.
fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.join(MANIFEST_FILE).exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn eval_options(cfg: &Config, sampling: &Sampling, jobs: usize) -> Result<EvalOptions> {
    let opts = EvalOptions {
        steps: sampling.steps.unwrap_or(cfg.steps),
        tau: sampling.tau.unwrap_or(cfg.tau),
        seed: cfg.seed,
        jobs,
        batch_size: 16,
    };
    if opts.steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    if !(opts.tau > 0.0 && opts.tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {}", opts.tau)));
    }
    Ok(opts)
}

/// Loads a checkpoint, optionally overriding the seed.
fn load_model(path: &Path, seed: Option<u64>) -> Result<Model> {
    let mut model = Model::load(path)?;
    if let Some(s) = seed {
        model.config.seed = s;
    }
    Ok(model)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            ablations,
            data,
            stage,
            checkpoint,
        } => train(&common, &ablations, &data, stage, checkpoint.as_deref()),
        Command::Sample {
            common,
            sampling,
            checkpoint,
            data,
            limit,
        } => sample_cmd(&common, &sampling, &checkpoint, &data, limit),
        Command::Eval {
            common,
            sampling,
            checkpoint,
            data,
            oracle_passthrough,
        } => eval_cmd(&common, &sampling, checkpoint.as_deref(), &data, oracle_passthrough),
        Command::Ablate { common, sampling, data } => ablate_cmd(&common, &sampling, &data),
        Command::InspectGates {
            common,
            sampling,
            checkpoint,
            data,
        } => inspect_gates(&common, &sampling, &checkpoint, &data),
        Command::ExportPrototypes {
            common,
            checkpoint,
            data,
        } => export_prototypes(&common, &checkpoint, data.as_deref()),
    }
}

/// Generates and renders one split.
pub fn make_split(cfg: &Config, stream: u64, count: usize, jobs: usize) -> Result<Dataset> {
    let objects = gen_objects(&cfg.generator_spec(), cfg.seed, stream, count, cfg.iou_cap, jobs)?;
    let images = objects.iter().map(|o| render_silhouette(o, cfg.render_size)).collect();
    Ok(Dataset { objects, images })
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    for (split, stream, count) in [
        ("train", streams::DATA_TRAIN, cfg.train_objects),
        ("test", streams::DATA_TEST, cfg.test_objects),
    ] {
        let data = make_split(&cfg, stream, count, common.jobs)?;
        write_dataset(&data, &common.out.join(split))?;
        println!("{split}: {} objects -> {}", data.len(), common.out.join(split).display());
    }
    Ok(())
}

fn checkpoint_path(out: &Path, stage: usize) -> PathBuf {
    out.join(format!("checkpoint_stage{stage}.bin"))
}

fn train(
    common: &Common,
    ablations: &Ablations,
    data: &Path,
    stage: StageArg,
    checkpoint: Option<&Path>,
) -> Result<()> {
    fs::create_dir_all(&common.out)?;
    let data = read_dataset(&split_dir(data, "train"))?;
    let mut log = TrainLog {
        echo: true,
        ..TrainLog::default()
    };
    let mut model = match stage {
        StageArg::Codec | StageArg::All => {
            let mut cfg = load_config(common)?;
            apply_ablations(&mut cfg, ablations);
            Model::new(&cfg)?
        }
        StageArg::Warmup | StageArg::Joint => {
            let default = if stage == StageArg::Joint && !ablations.disable_warmup {
                checkpoint_path(&common.out, 1)
            } else {
                checkpoint_path(&common.out, 0)
            };
            let path = checkpoint.map(Path::to_path_buf).unwrap_or(default);
            let ckpt = Checkpoint::load(&path)?;
            let mut cfg = match &common.config {
                Some(_) => {
                    let mut c = load_config(common)?;
                    c.fixed_part_count = c.fixed_part_count.or(ckpt.config.fixed_part_count);
                    c
                }
                None => {
                    let mut c = ckpt.config.clone();
                    if let Some(s) = common.seed {
                        c.seed = s;
                    }
                    c
                }
            };
            apply_ablations(&mut cfg, ablations);
            Model::from_checkpoint_with(&ckpt, &cfg)?
        }
    };
    let log_path = common.out.join("train_log.jsonl");
    let result = (|| -> Result<()> {
        if matches!(stage, StageArg::Codec | StageArg::All) {
            stage0_train_codec(&mut model, &data, &mut log)?;
            model.save(&checkpoint_path(&common.out, 0))?;
        }
        let warm = stage == StageArg::Warmup || (stage == StageArg::All && !model.config.disable_warmup);
        if warm {
            stage1_warmup(&mut model, &data, &mut log)?;
            model.save(&checkpoint_path(&common.out, 1))?;
        }
        if matches!(stage, StageArg::Joint | StageArg::All) {
            stage2_joint(&mut model, &data, &mut log)?;
            model.save(&checkpoint_path(&common.out, 2))?;
        }
        Ok(())
    })();
    log.append_to(&log_path)?;
    result?;
    model.config.save(&common.out.join("config.json"))?;
    println!("trained to stage {:?}, step {}", model.stage, model.step);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleRecord<'a> {
    object_id: &'a str,
    active_slots: &'a [usize],
    alpha: &'a [f32],
    seed: u64,
}

fn sample_cmd(common: &Common, sampling: &Sampling, checkpoint: &Path, data: &Path, limit: Option<usize>) -> Result<()> {
    let model = load_model(checkpoint, common.seed)?;
    if model.stage < Stage::Joint {
        return Err(Error::StageOrder("sampling needs a jointly trained checkpoint".into()));
    }
    let mut data = read_dataset(&split_dir(data, "test"))?;
    if let Some(n) = limit {
        data.objects.truncate(n);
        data.images.truncate(n);
    }
    let opts = eval_options(&model.config, sampling, common.jobs)?;
    let generations = predict(Predictor::Model(&model), &data, &opts)?;
    for (i, (obj, g)) in data.objects.iter().zip(&generations).enumerate() {
        let dir = common.out.join(&obj.object_id);
        fs::create_dir_all(&dir)?;
        for part in &g.parts {
            write_ply(&dir.join(format!("part_{}.ply", part.part_index)), &part.points)?;
        }
        let record = SampleRecord {
            object_id: &obj.object_id,
            active_slots: &g.active,
            alpha: &g.alpha,
            seed: object_seed(opts.seed, i),
        };
        write_json(&dir.join("record.json"), &record)?;
    }
    println!("wrote {} objects under {}", generations.len(), common.out.display());
    Ok(())
}

fn eval_cmd(
    common: &Common,
    sampling: &Sampling,
    checkpoint: Option<&Path>,
    data: &Path,
    oracle: bool,
) -> Result<()> {
    let data = read_dataset(&split_dir(data, "test"))?;
    let (report, rows) = if oracle {
        let cfg = load_config(common)?;
        evaluate(Predictor::OraclePassthrough, &data, &eval_options(&cfg, sampling, common.jobs)?)?
    } else {
        let path = checkpoint.ok_or_else(|| Error::Checkpoint("no checkpoint given".into()))?;
        let model = load_model(path, common.seed)?;
        let opts = eval_options(&model.config, sampling, common.jobs)?;
        evaluate(Predictor::Model(&model), &data, &opts)?
    };
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("metrics.json"), &report)?;
    let lines: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    fs::write(common.out.join("per_object.jsonl"), lines)?;
    print!("{}", report.table());
    Ok(())
}

fn ablate_cmd(common: &Common, sampling: &Sampling, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let opts = eval_options(&cfg, sampling, common.jobs)?;
    let train = read_dataset(&split_dir(data, "train"))?;
    let test = read_dataset(&split_dir(data, "test"))?;
    fs::create_dir_all(&common.out)?;
    let log_path = common.out.join("ablation_log.jsonl");
    let rows = ablate(&cfg, &train, &test, &opts, |row, log, _| {
        let tagged = TrainLog {
            records: log
                .records
                .iter()
                .map(|r| crate::train::LogRecord {
                    stage: format!("{}/{}", row.setting, r.stage),
                    ..r.clone()
                })
                .collect(),
            echo: false,
        };
        let _ = tagged.append_to(&log_path);
    })?;
    write_json(&common.out.join("ablation.json"), &rows)?;
    let table = ablation_table(&rows);
    fs::write(common.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GateLine<'a> {
    object_id: &'a str,
    alpha: &'a [f32],
    selected: Vec<usize>,
    mask: Vec<u8>,
}

fn inspect_gates(common: &Common, sampling: &Sampling, checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_model(checkpoint, common.seed)?;
    let data = read_dataset(&split_dir(data, "test"))?;
    let tau = eval_options(&model.config, sampling, common.jobs)?.tau;
    let images: Vec<_> = data.images.iter().collect();
    for (chunk_objs, chunk_imgs) in data.objects.chunks(64).zip(images.chunks(64)) {
        let alpha = model.gate_alpha(chunk_imgs)?;
        let selected = model.active_sets(&alpha, tau)?;
        for ((obj, a), s) in chunk_objs.iter().zip(&alpha).zip(selected) {
            let line = GateLine {
                object_id: &obj.object_id,
                alpha: a,
                selected: s,
                mask: (0..model.config.p_max).map(|i| u8::from(i < obj.n_obj())).collect(),
            };
            println!("{}", serde_json::to_string(&line)?);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SlotAssignment {
    object_id: String,
    weights: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct PrototypeExport {
    prototypes: Vec<Vec<f64>>,
    assignments: Vec<SlotAssignment>,
}

fn export_prototypes(common: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, common.seed)?;
    let m = model.config.num_prototypes;
    let rows = |t: &candle_core::Tensor, width: usize| -> Result<Vec<Vec<f64>>> {
        Ok(to_f64_vec(t)?.chunks(width).map(<[f64]>::to_vec).collect())
    };
    let prototypes = rows(model.bank.prototypes(), model.config.latent_dim)?;
    let mut assignments = Vec::new();
    if let Some(dir) = data {
        let data = read_dataset(&split_dir(dir, "test"))?;
        let encoded = model.encode_objects(&data.objects)?;
        for (obj, (z, mask)) in data.objects.iter().zip(encoded) {
            let (_, w) = model.bank.align(&slot_summary(&z)?)?;
            let mut weights = rows(&w, m)?;
            weights.truncate(mask.n_obj);
            assignments.push(SlotAssignment {
                object_id: obj.object_id.clone(),
                weights,
            });
        }
    }
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("prototypes.json");
    write_json(&path, &PrototypeExport { prototypes, assignments })?;
    println!("wrote {}", path.display());
    Ok(())
}
