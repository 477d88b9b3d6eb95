//! Dataset rendering, the checkpointing training loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use xdec_core::dataset::{assemble_dataset, render_job, render_jobs, DatasetConfig, EvalSet, UnpairedDataset};
use xdec_core::metrics::MetricReport;
use xdec_core::train::{LossReport, TrainConfig, Trainer};

use crate::checkpoint::Checkpoint;
use crate::io::{atomic_write, write_json};

pub const THREADS_ENV: &str = "XDEC_THREADS";
pub const LOSS_LOG: &str = "losses.tsv";
pub const FINAL_CHECKPOINT: &str = "final.xdec";

/// Worker count from `XDEC_THREADS`: unset uses all cores, 0 means one
/// deterministic thread.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={s:?} is not a count"))?;
            Ok(n.max(1))
        }
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(worker_threads()?).build()?)
}

/// Renders every phantom job on the worker pool. Output order, and so the
/// result, does not depend on the thread count.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<(UnpairedDataset, EvalSet)> {
    let jobs = render_jobs(cfg)?;
    let rendered = pool()?.install(|| {
        jobs.par_iter()
            .map(|j| render_job(cfg, j))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(assemble_dataset(cfg, &jobs, rendered)?)
}

pub fn loss_header() -> String {
    let mut s = String::from("step");
    for n in LossReport::NAMES {
        s.push('\t');
        s.push_str(n);
    }
    s
}

pub fn loss_row(step: u64, r: &LossReport) -> String {
    let mut s = step.to_string();
    for v in r.values() {
        let _ = write!(s, "\t{v}");
    }
    s
}

fn render_log(rows: &[String]) -> String {
    let mut s = loss_header();
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Rows of an existing loss log with step `≤ upto`.
fn existing_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let step: u64 = line
            .split('\t')
            .next()
            .unwrap_or("")
            .parse()
            .context("malformed loss log row")?;
        if step <= upto {
            rows.push(line.to_owned());
        }
    }
    Ok(rows)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.xdec")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoint: Checkpoint,
    pub losses: Vec<(u64, LossReport)>,
}

/// Trains to `config.steps`, writing `config.json`, periodic checkpoints, the
/// loss log and `final.xdec` into `out`.
///
/// With `resume`, training continues from that checkpoint's networks,
/// optimizer states and step with its stored configuration; only the target
/// step count comes from `config`.
pub fn train(
    config: &TrainConfig,
    data: &UnpairedDataset,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(u64, &LossReport),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            ensure!(
                ck.norm == data.norm,
                "checkpoint was trained on a dataset with a different normalization"
            );
            let mut t = ck.trainer;
            t.config.steps = config.steps;
            t
        }
        None => Trainer::for_dataset(config.clone(), data)?,
    };
    ensure!(
        trainer.config.image_size == data.image_size,
        "dataset images are {0}×{0}, model expects {1}×{1}",
        data.image_size,
        trainer.config.image_size
    );
    let cfg = trainer.config.clone();
    write_json(&out.join("config.json"), &cfg)?;
    let log_path = out.join(LOSS_LOG);
    let mut rows = if resume.is_some() {
        existing_rows(&log_path, trainer.step)?
    } else {
        Vec::new()
    };
    let mut losses = Vec::new();
    while trainer.step < cfg.steps {
        let batch = trainer.next_batch(data)?;
        let r = trainer
            .train_step(&batch)
            .with_context(|| format!("training step {}", trainer.step + 1))?;
        let step = trainer.step;
        rows.push(loss_row(step, &r));
        losses.push((step, r));
        progress(step, &r);
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step < cfg.steps {
            let ck = Checkpoint {
                trainer: trainer.clone(),
                norm: data.norm,
            };
            ck.save(&out.join(checkpoint_name(step)))?;
            atomic_write(&log_path, render_log(&rows).as_bytes())?;
        }
    }
    atomic_write(&log_path, render_log(&rows).as_bytes())?;
    let checkpoint = Checkpoint {
        trainer,
        norm: data.norm,
    };
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    checkpoint.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoint,
        losses,
    })
}

/// Fixed-width metric table.
pub fn format_report(report: &MetricReport) -> String {
    let mut s = format!("{:<12} {:>12} {:>12}\n", "Method", "r_l(1e4)", "PSNR(dB)");
    for r in &report.rows {
        let psnr = r.psnr_nonbone.map_or_else(|| "-".to_owned(), |p| format!("{p:.2}"));
        let _ = writeln!(s, "{:<12} {:>12.4} {:>12}", r.method, r.r_l, psnr);
    }
    s
}

pub fn check_eval_compatible(ck: &Checkpoint, eval: &EvalSet) -> Result<()> {
    if eval.image_size != ck.trainer.config.image_size {
        bail!(
            "eval images are {0}×{0}, checkpoint expects {1}×{1}",
            eval.image_size,
            ck.trainer.config.image_size
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use xdec_core::train::LossReport;

    #[test]
    fn log_rows_are_tab_separated() {
        assert_eq!(
            loss_header(),
            "step\tL_Dec\tL_advD\tL_advX\tL_advDec\tL_cycX\tL_cycD\tL_mask"
        );
        let r = LossReport {
            l_dec: 0.5,
            l_mask: 0.25,
            ..Default::default()
        };
        assert_eq!(loss_row(3, &r), "3\t0.5\t0\t0\t0\t0\t0\t0.25");
    }

    #[test]
    fn existing_rows_are_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(LOSS_LOG);
        let rows: Vec<String> = (1..=4).map(|s| loss_row(s, &LossReport::default())).collect();
        fs::write(&p, render_log(&rows)).unwrap();
        assert_eq!(existing_rows(&p, 2).unwrap(), rows[..2].to_vec());
    }
}
