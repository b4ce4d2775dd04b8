//! The epoch loop, metrics.csv and checkpointing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use samlab::nn::{accuracy_count, build_model, ForwardMode};
use samlab::optim::{lr_at, sam_step, stage_controller, SamOptimizer, Schedule};
use samlab::{Model, Rng};

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "eps_scaled_norm_mean",
    "degenerate_events",
    "wall_ms",
];

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;
/// Stream of the run seed that drives data shuffling.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub eps_scaled_norm_mean: Option<f64>,
    pub degenerate_events: usize,
    pub wall_ms: u64,
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            float(self.lr),
            float(self.train_loss),
            float(self.train_acc),
            float(self.test_loss),
            float(self.test_acc),
            self.eps_scaled_norm_mean.map(float).unwrap_or_default(),
            self.degenerate_events.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Rows written during this invocation.
    pub rows: Vec<MetricsRow>,
    pub model: Model,
    pub checkpoint: PathBuf,
    pub progress: Progress,
}

/// Eval-mode cross-entropy (no smoothing) and accuracy over a whole split.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let n = data.len();
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.gather(chunk)?;
        let eval = model.loss_and_grad(
            &model.params,
            &x,
            &y,
            ForwardMode::Eval,
            0.0,
            false,
            Some(&vec![false; model.registry.views().len()]),
        )?;
        loss += eval.loss * chunk.len() as f64;
        correct += accuracy_count(&eval.logits, &y);
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

fn write_metrics(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_metrics(path: &Path, keep: usize) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .records()
        .take(keep)
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok(rows)
}

/// Train per `cfg`, writing `config.json`, `metrics.csv` and `checkpoint.json`
/// into `out`.
pub fn train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let split = load_dataset(&cfg.data)?;
    let (train_set, test_set) = (&split.train, &split.test);
    if train_set.len() < 2 * cfg.batch_size {
        return Err(Error::Config(format!(
            "training split of {} samples is smaller than two batches of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    if cfg.model.input_dim() != train_set.dim() || cfg.model.classes() < train_set.classes {
        return Err(Error::Config(format!(
            "model expects {} features and {} classes, data has {} and {}",
            cfg.model.input_dim(),
            cfg.model.classes(),
            train_set.dim(),
            train_set.classes
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let steps_per_epoch = train_set.len() / cfg.batch_size;
    let schedule = match cfg.optim.schedule {
        Schedule::Cosine { total_steps: None } => Schedule::Cosine {
            total_steps: Some(cfg.epochs * steps_per_epoch),
        },
        s => s,
    };
    let base_lr = cfg.optim.base.lr();
    let smoothing = cfg.label_smoothing;

    let (mut model, mut optimizer, mut rng, mut progress) = match &opts.resume {
        None => {
            let model = build_model::<f64>(&cfg.model, cfg.seed)?;
            let opt = SamOptimizer::new(cfg.optim.clone(), &model.registry, model.trainable_mask())?;
            (model, opt, Rng::with_stream(cfg.seed, SHUFFLE_STREAM), Progress { epoch: 0, step: 0 })
        }
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.run_config != *cfg {
                return Err(Error::Config(format!(
                    "{} was written by a different run configuration",
                    path.display()
                )));
            }
            let model = ckpt.model()?;
            let opt = SamOptimizer::new(cfg.optim.clone(), &model.registry, model.trainable_mask())?
                .with_state(ckpt.optimizer_state.clone())?;
            (model, opt, Rng::from_state(ckpt.rng_state), ckpt.progress)
        }
    };

    let config_path = out.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;
    let metrics_path = out.join("metrics.csv");
    let mut records = read_metrics(&metrics_path, progress.epoch)?;
    if records.len() != progress.epoch {
        records.clear();
    }
    write_metrics(&metrics_path, &records)?;

    let ckpt_path = out.join("checkpoint.json");
    let last_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut rows = Vec::new();
    let save = |model: &Model, opt: &SamOptimizer<f64>, rng: &Rng, progress: Progress, path: &Path| {
        Checkpoint::new(model, opt.state.clone(), rng.state(), progress, cfg.clone()).save(path)
    };

    while progress.epoch < last_epoch {
        let epoch = progress.epoch;
        let kind = stage_controller(&cfg.optim, epoch);
        let order = rng.permutation(train_set.len());
        let first_lr = lr_at(&schedule, base_lr, progress.step)?;
        let mut norm_sum = 0.0;
        let mut norm_count = 0usize;
        let mut degenerate = 0;
        let started = Instant::now();
        for batch in order.chunks_exact(cfg.batch_size) {
            let (x, y) = train_set.gather(batch)?;
            let lr = lr_at(&schedule, base_lr, progress.step)?;
            let m = sam_step(&mut model, &x, &y, &mut optimizer, kind, lr, smoothing)?;
            if let Some(v) = m.eps_scaled_norm {
                norm_sum += v;
                norm_count += 1;
            }
            degenerate += m.degenerate_events;
            progress.step += 1;
        }
        let wall_ms = if cfg.wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        progress.epoch += 1;
        let (train_loss, train_acc) = evaluate(&model, train_set)?;
        let (test_loss, test_acc) = evaluate(&model, test_set)?;
        let row = MetricsRow {
            epoch: progress.epoch,
            lr: first_lr,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
            eps_scaled_norm_mean: (norm_count > 0).then(|| norm_sum / norm_count as f64),
            degenerate_events: degenerate,
            wall_ms,
        };
        records.push(row.record());
        write_metrics(&metrics_path, &records)?;
        rows.push(row);
        if let Some(k) = cfg.checkpoint_every {
            if progress.epoch % k == 0 {
                let p = out.join(format!("checkpoint_epoch_{}.json", progress.epoch));
                save(&model, &optimizer, &rng, progress, &p)?;
            }
        }
    }
    save(&model, &optimizer, &rng, progress, &ckpt_path)?;
    Ok(RunOutcome {
        rows,
        model,
        checkpoint: ckpt_path,
        progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(epochs: usize, perturb: bool) -> RunConfig {
        let perturb = if perturb {
            r#", "perturb": {"variant": "sam", "rho": 0.05, "scope": {"kind": "only_norm"}}"#
        } else {
            ""
        };
        RunConfig::from_json(&format!(
            r#"{{
            "model": {{"architecture": {{"kind": "mlp_bn", "dims": [2, 8, 2]}}}},
            "optim": {{"base": {{"kind": "sgd", "lr": 0.1, "momentum": 0.9}},
                       "schedule": {{"kind": "cosine"}}{perturb}}},
            "data": {{"kind": {{"type": "spirals", "n": 120, "noise": 0.1, "seed": 1}}}},
            "epochs": {epochs},
            "batch_size": 16,
            "wall_clock": false
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn single_plain_epoch_writes_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&config(1, false), dir.path(), &TrainOptions::default()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields[6], "");
        assert_eq!(out.rows[0].lr, 0.1);
        assert!(dir.path().join("checkpoint.json").exists());
    }

    #[test]
    fn perturbed_run_reports_rho() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&config(1, true), dir.path(), &TrainOptions::default()).unwrap();
        let mean = out.rows[0].eps_scaled_norm_mean.unwrap();
        assert!((mean - 0.05).abs() < 1e-9);
    }
}
