//! `mvmdl report`: re-aggregates the runs of a training directory.

use std::fs;
use std::path::Path;

use mvmdl_core::experiment::{RunResult, Summary};

use crate::error::{CliError, CliResult};
use crate::files;
use crate::train_cmd;

/// Loads every `runs/*/result.json` under `run_dir`, in directory-name
/// order.
pub fn load_results(run_dir: &Path) -> CliResult<Vec<RunResult>> {
    let runs = run_dir.join("runs");
    let entries = fs::read_dir(&runs).map_err(CliError::io(&runs))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(CliError::io(&runs))?;
        if e.file_type().map_err(CliError::io(e.path()))?.is_dir() {
            dirs.push(e.path());
        }
    }
    if dirs.is_empty() {
        return Err(CliError::Config(format!("no runs found in {}", runs.display())));
    }
    dirs.sort();
    dirs.iter().map(|d| files::read_json(&d.join("result.json"))).collect()
}

/// Writes `summary.*` next to the runs and returns the summary.
pub fn run(run_dir: &Path, out: Option<&Path>) -> CliResult<Summary> {
    let results = load_results(run_dir)?;
    let out = out.unwrap_or(run_dir);
    files::create_dir(out)?;
    train_cmd::write_summary(out, &results)
}

/// Human-readable summary: the best-lambda table followed by every row.
pub fn render(summary: &Summary) -> String {
    let mut s = summary.render_table();
    s.push('\n');
    for r in &summary.rows {
        s.push_str(&format!(
            "{:<15} lambda {:<8} seeds {}  ghost {:.4} ± {:.4}  train {:.4}  mdl {:.1}\n",
            r.regularizer.to_string(),
            r.lambda,
            r.seeds,
            r.ghost_accuracy_mean,
            r.ghost_accuracy_std,
            r.train_accuracy_mean,
            r.mdl_mean
        ));
    }
    s
}
