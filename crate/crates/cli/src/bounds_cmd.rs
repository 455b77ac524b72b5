//! `mvmdl bounds`: bound-comparison curves and label-shift residuals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mvmdl_core::bounds::{self, LogBase, RiskPair};

use crate::error::{CliError, CliResult};
use crate::files;
use crate::svg::{Plot, Series};
use crate::SCHEMA_VERSION;

/// `steps` evenly spaced values from `start` to `stop` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match self.steps {
            0 => Vec::new(),
            1 => vec![self.start],
            s => (0..s)
                .map(|i| self.start + (self.stop - self.start) * i as f64 / (s - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub schema_version: u32,
    pub n: usize,
    pub classes: usize,
    /// Empirical risks, one fast-rate curve each.
    pub emp_risks: Vec<f64>,
    pub mdl_per_n: Grid,
    /// L1 distance between label histograms; `null` uses `sqrt(C / n)`.
    pub tv: Option<f64>,
    /// Training risk of the residual table.
    pub residual_emp_risk: f64,
    pub gen_errors: Grid,
    /// Multinomial label draws for a Monte-Carlo residual column; 0 skips it.
    pub mc_draws: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n: 50_000,
            classes: 10,
            emp_risks: vec![0.05, 0.01],
            mdl_per_n: Grid {
                start: 0.0,
                stop: 0.5,
                steps: 101,
            },
            tv: None,
            residual_emp_risk: 0.05,
            gen_errors: Grid {
                start: 0.005,
                stop: 0.5,
                steps: 100,
            },
            mc_draws: 0,
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Schema {
                path: "schema_version".into(),
                reason: format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        let bad = |path: &str, reason: &str| {
            Err(CliError::Schema {
                path: path.into(),
                reason: reason.into(),
            })
        };
        if self.n < 10 {
            return bad("n", "must be >= 10");
        }
        if self.classes == 0 {
            return bad("classes", "must be >= 1");
        }
        if self.emp_risks.is_empty() || self.emp_risks.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("emp_risks", "must be a nonempty list of values in [0, 1]");
        }
        if self.mdl_per_n.steps == 0 || self.mdl_per_n.values().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("mdl_per_n", "needs at least one step and nonnegative values");
        }
        if self.gen_errors.steps == 0 || self.gen_errors.values().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("gen_errors", "needs at least one step and nonnegative values");
        }
        if !(0.0..=1.0).contains(&self.residual_emp_risk) {
            return bad("residual_emp_risk", "must be in [0, 1]");
        }
        if let Some(tv) = self.tv {
            if !(0.0..=2.0).contains(&tv) {
                return bad("tv", "must be in [0, 2]");
            }
        }
        Ok(())
    }

    pub fn tv(&self) -> f64 {
        self.tv.unwrap_or_else(|| bounds::tv_sqrt_rule(self.classes, self.n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub emp_risk: f64,
    /// First grid value after which the fast-rate bound stays at or below
    /// the square-root bound.
    pub crossover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub n: usize,
    pub classes: usize,
    pub tv: f64,
    pub log_base: LogBase,
    /// Square-root bound at zero description length.
    pub sqrt_bound_at_zero: f64,
    pub curves: Vec<CurveSummary>,
    /// Largest residual / generalization-error ratio on the residual grid.
    pub max_residual_ratio: f64,
}

pub fn run(cfg: &BoundsConfig, out: &Path, base: LogBase, seed: u64) -> CliResult<BoundsSummary> {
    cfg.validate()?;
    files::create_dir(out)?;
    let tv = cfg.tv();
    let grid = cfg.mdl_per_n.values();

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut plot = Plot {
        title: format!("Generalization bounds, n = {}, C = {}", cfg.n, cfg.classes),
        x_label: "MDL / n".into(),
        y_label: "generalization bound".into(),
        series: Vec::new(),
    };
    for &emp in &cfg.emp_risks {
        let curve = bounds::bound_curve(cfg.n, cfg.classes, emp, tv, &grid, base)?;
        for p in &curve {
            rows.push(vec![emp, p.mdl_per_n, p.sqrt_bound, p.fast_rate_bound]);
        }
        if plot.series.is_empty() {
            plot.series.push(Series {
                name: "square-root".into(),
                points: curve.iter().map(|p| (p.mdl_per_n, p.sqrt_bound)).collect(),
                dashed: true,
            });
        }
        plot.series.push(Series {
            name: format!("fast-rate, risk {emp}"),
            points: curve.iter().map(|p| (p.mdl_per_n, p.fast_rate_bound)).collect(),
            dashed: false,
        });
        curves.push(CurveSummary {
            emp_risk: emp,
            crossover: bounds::crossover(&curve),
        });
    }
    files::write_csv(
        &out.join("bound_curve.csv"),
        &["emp_risk", "mdl_per_n", "sqrt_bound", "fast_rate_bound"],
        &rows,
    )?;
    files::write_text(&out.join("bound_curve.svg"), &plot.render())?;

    let gens = cfg.gen_errors.values();
    let residuals = bounds::residual_curve(cfg.residual_emp_risk, tv, &gens)?;
    let mc: Option<Vec<f64>> = if cfg.mc_draws > 0 {
        Some(
            residuals
                .iter()
                .map(|p| {
                    let risks = RiskPair::new(cfg.residual_emp_risk, (cfg.residual_emp_risk + p.gen_error).min(1.0))?;
                    bounds::label_shift_residual_mc(cfg.n, cfg.classes, &risks, cfg.mc_draws, seed)
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    let mut header = vec!["gen_error", "residual"];
    if mc.is_some() {
        header.push("residual_mc");
    }
    let rows: Vec<Vec<f64>> = residuals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = vec![p.gen_error, p.residual];
            if let Some(m) = &mc {
                r.push(m[i]);
            }
            r
        })
        .collect();
    files::write_csv(&out.join("residual.csv"), &header, &rows)?;
    let mut series = vec![
        Series {
            name: "residual".into(),
            points: residuals.iter().map(|p| (p.gen_error, p.residual)).collect(),
            dashed: false,
        },
        Series {
            name: "gen. error / 5".into(),
            points: residuals.iter().map(|p| (p.gen_error, p.gen_error / 5.0)).collect(),
            dashed: true,
        },
    ];
    if let Some(m) = &mc {
        series.push(Series {
            name: "residual (MC)".into(),
            points: residuals.iter().zip(m).map(|(p, &v)| (p.gen_error, v)).collect(),
            dashed: false,
        });
    }
    let residual_plot = Plot {
        title: format!("Label-shift residual, train risk {}", cfg.residual_emp_risk),
        x_label: "generalization error".into(),
        y_label: "residual (bits)".into(),
        series,
    };
    files::write_text(&out.join("residual.svg"), &residual_plot.render())?;

    let max_residual_ratio = residuals
        .iter()
        .filter(|p| p.gen_error > 0.0)
        .map(|p| p.residual / p.gen_error)
        .fold(0.0, f64::max);
    let summary = BoundsSummary {
        n: cfg.n,
        classes: cfg.classes,
        tv,
        log_base: base,
        sqrt_bound_at_zero: ((cfg.classes as f64 + 2.0) / cfg.n as f64).sqrt(),
        curves,
        max_residual_ratio,
    };
    files::write_json(&out.join("bounds_summary.json"), &summary)?;
    Ok(summary)
}
