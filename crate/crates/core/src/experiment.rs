//! Regularizer comparisons on synthetic data: one training run per
//! (regularizer, lambda, seed), seed aggregation and best-lambda selection.

use serde::{Deserialize, Serialize};

use crate::bounds::{self, BoundReport, BoundSpec, LogBase, RiskPair};
use crate::error::{Error, Result};
use crate::synth::{self, MultiViewData, SynthConfig, SynthDataset};
use crate::training::{self, EpochLog, RegularizerKind, TrainConfig, Trainer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: SynthConfig,
    /// Base settings; `regularizer`, `lambda` and `seed` are overridden per
    /// run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_regularizers")]
    pub regularizers: Vec<RegularizerKind>,
    /// Trade-offs tried for every regularizer other than `none`.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_regularizers() -> Vec<RegularizerKind> {
    vec![RegularizerKind::None, RegularizerKind::Vib, RegularizerKind::GpmMdl]
}

fn default_lambdas() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: SynthConfig::default(),
            train: TrainConfig::default(),
            regularizers: default_regularizers(),
            lambdas: default_lambdas(),
            seeds: default_seeds(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Precondition(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.train.validate()?;
        if self.regularizers.is_empty() || self.seeds.is_empty() {
            return Err(Error::Precondition("need at least one regularizer and one seed".into()));
        }
        if self.regularizers.iter().any(|r| *r != RegularizerKind::None) && self.lambdas.is_empty() {
            return Err(Error::Precondition("regularized runs need at least one lambda".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::Domain {
                what: "lambda",
                value: *l,
                range: "[0, inf)",
            });
        }
        if self.data.views.len() > 1 && self.regularizers.contains(&RegularizerKind::GmMdl) {
            return Err(Error::Precondition(
                "gm_mdl is single-view; use gpm_mdl or marginals_only".into(),
            ));
        }
        Ok(())
    }

    /// Every (regularizer, lambda, seed) combination in sweep order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &kind in &self.regularizers {
            let lambdas = if kind == RegularizerKind::None {
                vec![0.0]
            } else {
                self.lambdas.clone()
            };
            for &lambda in &lambdas {
                for &seed in &self.seeds {
                    out.push(RunSpec {
                        regularizer: kind,
                        lambda,
                        seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub regularizer: RegularizerKind,
    pub lambda: f64,
    pub seed: u64,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("{}_lambda{:e}_seed{}", self.regularizer, self.lambda, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: RunSpec,
    pub train_accuracy: f64,
    pub ghost_accuracy: f64,
    /// Description length of the training set in nats.
    pub mdl: f64,
    pub bound: BoundReport,
    pub epochs: Vec<EpochLog>,
}

/// L1 distance between the label histograms of two datasets.
pub fn label_tv(a: &MultiViewData, b: &MultiViewData) -> f64 {
    let (ca, cb) = (a.class_counts(), b.class_counts());
    ca.iter()
        .zip(&cb)
        .map(|(&x, &y)| (x as f64 / a.len() as f64 - y as f64 / b.len() as f64).abs())
        .sum()
}

/// Training settings of one run: `base` with the run's regularizer, lambda
/// and seed.
pub fn run_config(base: &TrainConfig, spec: RunSpec) -> TrainConfig {
    TrainConfig {
        regularizer: spec.regularizer,
        lambda: spec.lambda,
        seed: spec.seed,
        ..base.clone()
    }
}

/// Risks, description length and bounds of a trained model.
pub fn measure(
    data: &SynthDataset,
    trainer: &Trainer,
    spec: RunSpec,
    epochs: Vec<EpochLog>,
    base_log: LogBase,
) -> Result<RunResult> {
    let samples = trainer.cfg.samples_test;
    let eval_seed = spec.seed ^ 0xe7a1;
    let train_eval = training::evaluate(&trainer.models, &data.train, samples, eval_seed)?;
    let ghost_eval = training::evaluate(&trainer.models, &data.ghost, samples, eval_seed)?;
    let mdl = training::estimate_mdl(&trainer.models, &trainer.prior, &data.train)?.total;
    let n = data.train.len();
    let bound_spec = BoundSpec::new(
        n.max(10),
        data.train.classes,
        mdl.max(0.0),
        label_tv(&data.train, &data.ghost).min(2.0),
    )?;
    let risks = RiskPair::new(train_eval.risk, ghost_eval.risk)?;
    let bound = bounds::bound_report(&bound_spec, &risks, base_log)?;
    Ok(RunResult {
        spec,
        train_accuracy: train_eval.accuracy,
        ghost_accuracy: ghost_eval.accuracy,
        mdl,
        bound,
        epochs,
    })
}

/// Trains one model and measures it.
pub fn run_one(
    data: &SynthDataset,
    base: &TrainConfig,
    spec: RunSpec,
    base_log: LogBase,
) -> Result<(RunResult, Trainer)> {
    let mut trainer = Trainer::new(run_config(base, spec), &data.train)?;
    let epochs = trainer.fit(&data.train)?;
    Ok((measure(data, &trainer, spec, epochs, base_log)?, trainer))
}

/// Runs the whole sweep in order, calling `on_run` after each run.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    base_log: LogBase,
    mut on_run: impl FnMut(&RunResult, &Trainer) -> Result<()>,
) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let data = synth::generate(&cfg.data)?;
    let mut out = Vec::new();
    for spec in cfg.runs() {
        let (res, trainer) = run_one(&data, &cfg.train, spec, base_log)?;
        on_run(&res, &trainer)?;
        out.push(res);
    }
    Ok(out)
}

/// Mean and sample standard deviation over seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regularizer: RegularizerKind,
    pub lambda: f64,
    pub seeds: usize,
    pub ghost_accuracy_mean: f64,
    pub ghost_accuracy_std: f64,
    pub train_accuracy_mean: f64,
    pub mdl_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Row with the best mean ghost accuracy per regularizer. Rows are
    /// ordered by regularizer, then lambda, whatever the input order.
    pub best: Vec<SummaryRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(results: &[RunResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::Precondition("no runs to summarize".into()));
    }
    let mut keys: Vec<(RegularizerKind, f64)> = Vec::new();
    for r in results {
        let key = (r.spec.regularizer, r.spec.lambda);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let rank = |k: RegularizerKind| RegularizerKind::ALL.iter().position(|&a| a == k);
    keys.sort_by(|a, b| rank(a.0).cmp(&rank(b.0)).then(a.1.total_cmp(&b.1)));
    let rows: Vec<SummaryRow> = keys
        .iter()
        .map(|&(kind, lambda)| {
            let runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.spec.regularizer == kind && r.spec.lambda == lambda)
                .collect();
            let ghost: Vec<f64> = runs.iter().map(|r| r.ghost_accuracy).collect();
            let train: Vec<f64> = runs.iter().map(|r| r.train_accuracy).collect();
            let mdl: Vec<f64> = runs.iter().map(|r| r.mdl).collect();
            let (gm, gs) = mean_std(&ghost);
            SummaryRow {
                regularizer: kind,
                lambda,
                seeds: runs.len(),
                ghost_accuracy_mean: gm,
                ghost_accuracy_std: gs,
                train_accuracy_mean: mean_std(&train).0,
                mdl_mean: mean_std(&mdl).0,
            }
        })
        .collect();
    let mut best: Vec<SummaryRow> = Vec::new();
    for row in &rows {
        match best.iter_mut().find(|b| b.regularizer == row.regularizer) {
            Some(b) if row.ghost_accuracy_mean > b.ghost_accuracy_mean => *b = row.clone(),
            Some(_) => {}
            None => best.push(row.clone()),
        }
    }
    Ok(Summary { rows, best })
}

impl Summary {
    pub fn best_for(&self, kind: RegularizerKind) -> Option<&SummaryRow> {
        self.best.iter().find(|r| r.regularizer == kind)
    }

    /// Plain-text table: one column per regularizer with the best mean ghost
    /// accuracy, its standard deviation and the chosen lambda.
    pub fn render_table(&self) -> String {
        let mut head = String::from("|");
        let mut rule = String::from("|");
        let mut body = String::from("|");
        for b in &self.best {
            let cell = format!(
                " {:.3} ± {:.3} (λ={}) ",
                b.ghost_accuracy_mean, b.ghost_accuracy_std, b.lambda
            );
            let w = cell.chars().count().max(b.regularizer.label().len() + 2);
            head.push_str(&format!(" {:^1$} |", b.regularizer.label(), w - 2));
            rule.push_str(&format!("{}|", "-".repeat(w)));
            body.push_str(&format!("{cell:^w$}|"));
        }
        format!("{head}\n{rule}\n{body}\n")
    }
}
