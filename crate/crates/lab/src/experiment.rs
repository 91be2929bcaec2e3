//! Training runs, ablation grids and summaries.
//!
//! A run directory holds:
//!
//! * `config.toml`: the effective configuration, defaults included,
//! * `overrides.json`: command-line overrides applied to the file,
//! * `metrics.jsonl`: one record per evaluation point,
//! * `summary.md` and `summary.json`,
//! * `checkpoints/step-<N>.ckpt` and `checkpoints/final.ckpt`.
//!
//! An ablation grid writes one such directory per level below its root and
//! a comparative summary in the root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tiermoe_core::checkpoint::save_checkpoint;
use tiermoe_core::train::{evaluate, train_step, TrainState};

use crate::config::{ExperimentConfig, Overrides};
use crate::data::TaskSampler;
use crate::error::{LabError, LabResult};
use crate::metrics::{read_metrics, MetricsRecord, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub overrides: Overrides,
    /// Root for relative output directories.
    pub out_root: Option<PathBuf>,
    /// Print one line per evaluation point to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub state: TrainState,
}

/// Final metrics of one run, as listed in comparative summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub groups: usize,
    pub record: MetricsRecord,
}

fn write_echo(dir: &Path, cfg: &ExperimentConfig, overrides: &Overrides) -> LabResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(
        dir.join("overrides.json"),
        serde_json::to_string_pretty(overrides)?,
    )?;
    Ok(())
}

/// Trains one configuration (its ablation section is ignored) and writes
/// the run directory `dir`.
pub fn run_single(
    cfg: &ExperimentConfig,
    dir: &Path,
    overrides: &Overrides,
    progress: bool,
) -> LabResult<RunResult> {
    let cfg = cfg.effective();
    write_echo(dir, &cfg, overrides)?;
    let model = &cfg.model;
    let sampler = TaskSampler::new(cfg.task, model.vocab_size, &cfg.data)?;
    let eval_set =
        sampler.eval_batches(cfg.data.seed, cfg.data.eval_size, cfg.data.eval_batch_size)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let mut state = TrainState::new(model)?;
    let mut records = Vec::new();
    let start = Instant::now();
    while state.step < cfg.train_steps {
        let batch = sampler.train_batch(cfg.data.seed, state.step, cfg.data.batch_size)?;
        let report = train_step(&mut state, model, &batch)?;
        let done = state.step;
        if done % cfg.eval_every == 0 || done == cfg.train_steps {
            let eval = evaluate(&state, model, &eval_set)?;
            let rec = MetricsRecord::new(done, &report, eval, start.elapsed().as_secs_f64());
            writer.append(&rec)?;
            if progress {
                eprintln!("{}", progress_line(&rec));
            }
            records.push(rec);
        }
        let every = cfg.output.checkpoint_every;
        if every > 0 && done % every == 0 {
            save_checkpoint(&ckpt_dir.join(format!("step-{done}.ckpt")), &state, model)?;
        }
    }
    save_checkpoint(&ckpt_dir.join("final.ckpt"), &state, model)?;
    let row = SummaryRow {
        run: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        groups: model.num_groups(),
        record: records
            .last()
            .cloned()
            .expect("at least one evaluation point"),
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&row)?,
    )?;
    fs::write(dir.join("summary.md"), run_table(&records))?;
    Ok(RunResult {
        dir: dir.to_path_buf(),
        records,
        state,
    })
}

/// Runs `cfg` after applying the overrides: a single run, or every level of
/// its ablation grid followed by a comparative summary. Returns the output
/// directory.
pub fn run_experiment(mut cfg: ExperimentConfig, opts: &RunOptions) -> LabResult<PathBuf> {
    opts.overrides.apply(&mut cfg)?;
    let dir = cfg.output_dir(opts.out_root.as_deref());
    let variants = cfg.variants()?;
    if variants.is_empty() {
        run_single(&cfg, &dir, &opts.overrides, opts.progress)?;
        return Ok(dir);
    }
    write_echo(&dir, &cfg, &opts.overrides)?;
    let mut rows = Vec::new();
    for v in &variants {
        if opts.progress {
            eprintln!("== {}", v.label);
        }
        let sub = dir.join(&v.label);
        let mut sub_cfg = v.config.clone();
        sub_cfg.output.dir = sub.clone();
        let res = run_single(&sub_cfg, &sub, &opts.overrides, opts.progress)?;
        rows.push(SummaryRow {
            run: v.label.clone(),
            groups: v.config.model.num_groups(),
            record: res
                .records
                .last()
                .cloned()
                .expect("at least one evaluation point"),
        });
    }
    let axis = cfg
        .ablation
        .as_ref()
        .map(|a| a.axis.name())
        .unwrap_or_default();
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    fs::write(dir.join("summary.md"), comparison_table(axis, &rows))?;
    Ok(dir)
}

fn fmt_opt(x: Option<f64>, prec: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.prec$}"))
}

fn tiers(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{x:.3}"))
        .collect::<Vec<_>>()
        .join(" / ")
}

fn progress_line(r: &MetricsRecord) -> String {
    format!(
        "step {:>6}  loss {:.4}  ntp {:.4}  S {}  consistency {}  acc {:.3}  {:.1}s",
        r.step,
        r.loss.total,
        r.eval.ntp,
        fmt_opt(r.eval.separation, 3),
        fmt_opt(r.eval.ordinal_consistency, 2),
        r.eval.accuracy,
        r.wall_clock
    )
}

/// Markdown table with one row per evaluation point.
pub fn run_table(records: &[MetricsRecord]) -> String {
    let mut s = String::from(
        "| step | train total | train ntp | train erl | train balance | eval ntp | tier L̄ | S | consistency | accuracy | load entropy |\n\
         |---:|---:|---:|---:|---:|---:|---|---:|---:|---:|---:|\n",
    );
    for r in records {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} | {} | {:.4} | {:.3} |",
            r.step,
            r.loss.total,
            r.loss.ntp,
            r.loss.erl,
            r.loss.balance,
            r.eval.ntp,
            tiers(&r.eval.tier_avg_logprob),
            fmt_opt(r.eval.separation, 4),
            fmt_opt(r.eval.ordinal_consistency, 3),
            r.eval.accuracy,
            r.eval.load_entropy
        );
    }
    s
}

/// Markdown table comparing the final evaluation of several runs.
pub fn comparison_table(axis: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "| {axis} | C | steps | eval ntp | tier L̄ | S | consistency | accuracy | load entropy |\n\
         |---|---:|---:|---:|---|---:|---:|---:|---:|\n"
    );
    for row in rows {
        let e = &row.record.eval;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {} | {} | {} | {:.4} | {:.3} |",
            row.run,
            row.groups,
            row.record.step,
            e.ntp,
            tiers(&e.tier_avg_logprob),
            fmt_opt(e.separation, 4),
            fmt_opt(e.ordinal_consistency, 3),
            e.accuracy,
            e.load_entropy
        );
    }
    s
}

/// Summary of an existing run directory or ablation root, rebuilt from the
/// metrics files.
pub fn report(dir: &Path) -> LabResult<String> {
    let own = dir.join(METRICS_FILE);
    if own.is_file() {
        return Ok(run_table(&read_metrics(&own)?));
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).is_file())
        .collect();
    if subs.is_empty() {
        return Err(LabError::Data(format!(
            "no metrics found under {}",
            dir.display()
        )));
    }
    subs.sort();
    let mut rows = Vec::new();
    for sub in subs {
        let records = read_metrics(&sub.join(METRICS_FILE))?;
        let Some(last) = records.last() else { continue };
        rows.push(SummaryRow {
            run: sub
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            groups: last.eval.tier_avg_logprob.len(),
            record: last.clone(),
        });
    }
    Ok(comparison_table("run", &rows))
}
