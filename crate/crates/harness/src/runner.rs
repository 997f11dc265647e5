//! Training and evaluation runs with on-disk records.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdt_core::model::{build_model, evaluate, load_checkpoint, save_checkpoint, train_step, Batch, Optimizer};
use sdt_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::data::Dataset;
use crate::error::Failure;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const RUNS_FILE: &str = "runs.jsonl";

/// Offset between the train and test split seeds.
const TEST_SPLIT_OFFSET: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub variant: String,
    pub alpha: f64,
    pub seed: u64,
    pub params: usize,
    pub steps: u64,
    pub initial_test_loss: f64,
    pub initial_test_acc: f64,
    pub final_test_loss: f64,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
}

/// One line of `runs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub wall_clock_secs: f64,
    pub summary: Summary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub epoch_secs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// Directory holding this run's files, if any were written.
    pub dir: Option<PathBuf>,
}

/// Train and test splits for a config.
pub fn splits(cfg: &RunConfig) -> (Dataset, Dataset) {
    let train = cfg.task.generate(cfg.train_samples, cfg.data_seed);
    let test = cfg.task.generate(cfg.test_samples, cfg.data_seed.wrapping_add(TEST_SPLIT_OFFSET));
    (train, test)
}

fn gather<T: Scalar>(images: &Tensor<T>, labels: &[usize], idx: &[usize]) -> Batch<T> {
    let per = images.numel() / labels.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Batch {
        images: Tensor::new(shape, data).expect("gathered rows match shape"),
        labels: idx.iter().map(|&i| labels[i]).collect(),
    }
}

/// Trains `cfg`. With `out`, writes the run under `out/<run id>/` and
/// appends its record to `out/runs.jsonl`. `progress` sees every epoch.
pub fn train(cfg: &RunConfig, out: Option<&Path>, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<RunOutcome, Failure> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, out, progress),
        Precision::F64 => train_as::<f64>(cfg, out, progress),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, out: Option<&Path>, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<RunOutcome, Failure> {
    let started = Instant::now();
    let run_id = cfg.run_id();
    let (train_set, test_set) = splits(cfg);
    let train_images: Tensor<T> = train_set.images.cast();
    let test_images: Tensor<T> = test_set.images.cast();

    let (mut params, model) = build_model::<T>(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer(), &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_4a1e_u64.rotate_left(40));
    let (initial_test_loss, initial_test_acc) = evaluate(&model, &params, &test_images, &test_set.labels, cfg.batch_size)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut epoch_secs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = gather(&train_images, &train_set.labels, idx);
            lr = opt.config.lr_at(opt.step);
            let loss = train_step(&model, &mut params, &batch, &mut opt)
                .map_err(|e| Failure::Runtime(format!("epoch {epoch}, step {}: {e}", opt.step + 1)))?;
            loss_sum += loss.as_f64() * idx.len() as f64;
        }
        let (test_loss, test_acc) = evaluate(&model, &params, &test_images, &test_set.labels, cfg.batch_size)?;
        let m = EpochMetrics { epoch, train_loss: loss_sum / train_set.len() as f64, test_loss, test_acc, lr };
        progress(&m);
        epochs.push(m);
        epoch_secs.push(t0.elapsed().as_secs_f64());
    }

    let last = epochs.last().expect("at least one epoch");
    let summary = Summary {
        run_id: run_id.clone(),
        variant: cfg.model.decay.name().to_string(),
        alpha: cfg.model.alpha,
        seed: cfg.seed,
        params: params.numel(),
        steps: opt.step,
        initial_test_loss,
        initial_test_acc,
        final_test_loss: last.test_loss,
        final_test_acc: last.test_acc,
        best_test_acc: epochs.iter().map(|m| m.test_acc).fold(0.0, f64::max),
    };
    let total_secs = started.elapsed().as_secs_f64();
    let record = RunRecord { run_id: run_id.clone(), config: cfg.echo(), seed: cfg.seed, epochs, wall_clock_secs: total_secs, summary };

    let dir = match out {
        None => None,
        Some(root) => {
            let dir = root.join(&run_id);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(CONFIG_FILE), cfg.echo())?;
            let mut metrics = String::new();
            for m in &record.epochs {
                metrics.push_str(&serde_json::to_string(m)?);
                metrics.push('\n');
            }
            fs::write(dir.join(METRICS_FILE), metrics)?;
            fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&record.summary)? + "\n")?;
            fs::write(dir.join(TIMING_FILE), serde_json::to_string_pretty(&Timing { total_secs, epoch_secs })? + "\n")?;
            let mut w = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
            save_checkpoint(&mut w, &cfg.echo(), cfg.seed, &params, Some(&opt))?;
            w.flush()?;
            append_record(&root.join(RUNS_FILE), &record)?;
            Some(dir)
        }
    };
    Ok(RunOutcome { record, dir })
}

/// Every record in a `runs.jsonl` file.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, Failure> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Failure::from))
        .collect()
}

/// Appends unless a record with the same run id is already present.
fn append_record(path: &Path, record: &RunRecord) -> Result<(), Failure> {
    if read_records(path)?.iter().any(|r| r.run_id == record.run_id) {
        return Ok(());
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub run_config: String,
    pub seed: u64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Re-evaluates a checkpoint on the test split its config describes.
pub fn eval_checkpoint(path: &Path) -> Result<EvalReport, Failure> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Failure::Config(format!("cannot open {}: {e}", path.display())))?);
    let ckpt = load_checkpoint::<f64>(&mut r)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(&cfg, ckpt.params.into_iter().map(|(n, t)| (n, t.cast())).collect()),
        Precision::F64 => eval_as::<f64>(&cfg, ckpt.params),
    }
}

fn eval_as<T: Scalar>(cfg: &RunConfig, named: Vec<(String, Tensor<T>)>) -> Result<EvalReport, Failure> {
    let (mut params, model) = build_model::<T>(&cfg.model, cfg.seed)?;
    params.load_named(named)?;
    let (_, test) = splits(cfg);
    let (test_loss, test_acc) = evaluate(&model, &params, &test.images.cast(), &test.labels, cfg.batch_size)?;
    Ok(EvalReport { run_config: cfg.echo(), seed: cfg.seed, test_loss, test_acc })
}
