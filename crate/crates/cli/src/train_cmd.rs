//! `mvmdl train`: regularizer sweeps with one directory per run.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use mvmdl_core::bounds::LogBase;
use mvmdl_core::experiment::{self, summarize, ExperimentConfig, RunResult, RunSpec, Summary};
use mvmdl_core::synth::{self, SynthDataset};
use mvmdl_core::training::{PriorEngine, Trainer};

use crate::error::{CliError, CliResult};
use crate::files;

pub const THREADS_ENV: &str = "MVMDL_THREADS";

/// Worker count from `MVMDL_THREADS`, defaulting to the available cores.
pub fn thread_count() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

pub fn run_dir(out: &Path, spec: &RunSpec) -> PathBuf {
    out.join("runs").join(spec.dir_name())
}

fn write_prior(dir: &Path, prior: &PriorEngine) -> CliResult<()> {
    match prior {
        PriorEngine::None | PriorEngine::Vib => Ok(()),
        PriorEngine::PerView(banks) => {
            for (k, bank) in banks.iter().enumerate() {
                files::write_text(&dir.join(format!("prior_view{k}.json")), &bank.to_json()?)?;
            }
            Ok(())
        }
        PriorEngine::Joint(p) => files::write_text(&dir.join("prior.json"), &p.to_json()?),
    }
}

fn write_checkpoint(dir: &Path, trainer: &Trainer) -> CliResult<()> {
    let (header, bytes) = trainer.models.to_checkpoint()?;
    files::write_text(&dir.join("model.json"), &header)?;
    files::write_bytes(&dir.join("model.bin"), &bytes)?;
    write_prior(dir, &trainer.prior)
}

#[derive(Serialize)]
struct Failure<'a> {
    spec: &'a RunSpec,
    error: String,
    step: u64,
}

fn write_run(dir: &Path, result: &RunResult, trainer: &Trainer) -> CliResult<()> {
    let rows: Vec<Vec<f64>> = result
        .epochs
        .iter()
        .map(|e| vec![e.epoch as f64, e.loss, e.ce, e.reg, e.learning_rate])
        .collect();
    files::write_csv(
        &dir.join("metrics.csv"),
        &["epoch", "loss", "ce", "reg", "learning_rate"],
        &rows,
    )?;
    write_checkpoint(dir, trainer)?;
    files::write_json(&dir.join("bound_report.json"), &result.bound)?;
    files::write_json(&dir.join("result.json"), result)
}

fn train_one(
    data: &SynthDataset,
    cfg: &ExperimentConfig,
    spec: RunSpec,
    out: &Path,
    base: LogBase,
) -> CliResult<RunResult> {
    let dir = run_dir(out, &spec);
    files::create_dir(&dir)?;
    let mut trainer = Trainer::new(experiment::run_config(&cfg.train, spec), &data.train)?;
    let epochs = match trainer.fit(&data.train) {
        Ok(e) => e,
        Err(e) => {
            // Keep the state that produced the failure for inspection.
            write_checkpoint(&dir, &trainer)?;
            files::write_json(
                &dir.join("failure.json"),
                &Failure {
                    spec: &spec,
                    error: e.to_string(),
                    step: trainer.step(),
                },
            )?;
            return Err(e.into());
        }
    };
    let result = experiment::measure(data, &trainer, spec, epochs, base)?;
    write_run(&dir, &result, &trainer)?;
    Ok(result)
}

/// Runs every (regularizer, lambda, seed) of `cfg` on `threads` workers and
/// writes per-run directories plus the merged summary.
pub fn run(cfg: &ExperimentConfig, out: &Path, base: LogBase, threads: usize) -> CliResult<Summary> {
    cfg.validate()?;
    files::create_dir(out)?;
    files::write_json(&out.join("config.json"), cfg)?;
    let data = synth::generate(&cfg.data)?;
    let specs = cfg.runs();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<CliResult<RunResult>>>> = Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, specs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() || stop.load(Ordering::Relaxed) {
                    break;
                }
                let res = train_one(&data, cfg, specs[i], out, base);
                if res.is_err() {
                    stop.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("no poisoned workers")[i] = Some(res);
            });
        }
    });
    let mut results = Vec::with_capacity(specs.len());
    for slot in slots.into_inner().expect("no poisoned workers").into_iter().flatten() {
        results.push(slot?);
    }
    write_summary(out, &results)
}

pub fn write_summary(out: &Path, results: &[RunResult]) -> CliResult<Summary> {
    let summary = summarize(results)?;
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.regularizer.to_string(),
                r.lambda.to_string(),
                r.seeds.to_string(),
                r.ghost_accuracy_mean.to_string(),
                r.ghost_accuracy_std.to_string(),
                r.train_accuracy_mean.to_string(),
                r.mdl_mean.to_string(),
            ]
        })
        .collect();
    let path = out.join("summary.csv");
    let io = |e: csv::Error| CliError::Io {
        path: path.clone(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record([
        "regularizer",
        "lambda",
        "seeds",
        "ghost_accuracy_mean",
        "ghost_accuracy_std",
        "train_accuracy_mean",
        "mdl_mean",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(CliError::io(&path))?;
    files::write_json(&out.join("summary.json"), &summary)?;
    files::write_text(&out.join("summary.md"), &summary.render_table())?;
    Ok(summary)
}
