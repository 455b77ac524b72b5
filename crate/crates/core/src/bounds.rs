//! Generalization-bound calculus.
//!
//! Entropy-type functions on Bernoulli parameters (in bits), the right-hand
//! sides of the square-root and fast-rate MDL bounds, the tail bound, the
//! distributed-MDL decomposition and the lossy variant. Everything here is a
//! pure function of its arguments.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Inputs outside `[0, 1]` by less than this are clamped instead of rejected.
pub const DOMAIN_TOL: f64 = 1e-12;

const GOLDEN_TOL: f64 = 1e-10;
const DEGENERATE_INTERVAL: f64 = 1e-12;
const BISECTION_ITERS: usize = 200;
const BISECTION_TOL: f64 = 1e-10;

fn unit(what: &'static str, x: f64) -> Result<f64> {
    if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&x) {
        return Err(Error::Domain {
            what,
            value: x,
            range: "[0, 1]",
        });
    }
    Ok(x.clamp(0.0, 1.0))
}

fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.log2()
    }
}

fn hb(x: f64) -> f64 {
    -plogp(x) - plogp(1.0 - x)
}

fn js_gap_unchecked(x1: f64, x2: f64) -> f64 {
    (2.0 * hb(0.5 * (x1 + x2)) - hb(x1) - hb(x2)).max(0.0)
}

/// Binary Shannon entropy in bits, with `0 log 0 = 0`.
pub fn binary_entropy(x: f64) -> Result<f64> {
    Ok(hb(unit("x", x)?))
}

/// Twice the Jensen-Shannon divergence between `Bern(x1)` and `Bern(x2)`,
/// in bits. Takes values in `[0, 2]`.
pub fn js_gap(x1: f64, x2: f64) -> Result<f64> {
    Ok(js_gap_unchecked(unit("x1", x1)?, unit("x2", x2)?))
}

/// Largest entropy gain from moving the two risks towards each other by at
/// most `eps` each (never past their midpoint).
///
/// The inner objective is concave, so a golden-section search on the
/// admissible interval, checked against both endpoints, finds the maximum.
pub fn risk_shift_gain(x1: f64, x2: f64, eps: f64) -> Result<f64> {
    let x1 = unit("x1", x1)?;
    let x2 = unit("x2", x2)?;
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Domain {
            what: "eps",
            value: eps,
            range: "[0, inf)",
        });
    }
    let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
    let len = eps.min(0.5 * (hi - lo));
    let objective = |e: f64| hb(lo + e) - hb(lo) + hb(hi - e) - hb(hi);
    let endpoints = objective(0.0).max(objective(len));
    if len < DEGENERATE_INTERVAL {
        return Ok(endpoints.max(0.0));
    }
    let best = golden_max(objective, 0.0, len, GOLDEN_TOL);
    Ok(best.max(endpoints).max(0.0))
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    f(0.5 * (a + b)).max(fc).max(fd)
}

/// `sup { x1 in [0,1] : js_gap(x1, x2) <= y }`, found by bisection on the
/// increasing branch `[x2, 1]`.
pub fn js_gap_inverse(y: f64, x2: f64) -> Result<f64> {
    if !(0.0..=2.0 + DOMAIN_TOL).contains(&y) {
        return Err(Error::Domain {
            what: "y",
            value: y,
            range: "[0, 2]",
        });
    }
    let x2 = unit("x2", x2)?;
    if y == 0.0 {
        return Ok(x2);
    }
    Ok(sup_monotone(x2, |x1| js_gap_unchecked(x1, x2) <= y))
}

/// Largest `x` in `[lo, 1]` with `feasible(x)`, for a predicate that holds on
/// an initial segment of the interval and at `lo`.
fn sup_monotone(lo: f64, feasible: impl Fn(f64) -> bool) -> f64 {
    if feasible(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (lo, 1.0);
    for _ in 0..BISECTION_ITERS {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Empirical risks on the training set and on the ghost set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPair {
    pub train_risk: f64,
    pub test_risk: f64,
}

impl RiskPair {
    pub fn new(train_risk: f64, test_risk: f64) -> Result<Self> {
        Ok(Self {
            train_risk: unit("train_risk", train_risk)?,
            test_risk: unit("test_risk", test_risk)?,
        })
    }

    pub fn equal(risk: f64) -> Result<Self> {
        Self::new(risk, risk)
    }
}

/// Parameters shared by all bound evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    /// Samples per dataset.
    pub n: usize,
    /// Number of classes.
    pub classes: usize,
    /// Description length of the latents, in nats.
    pub mdl: f64,
    /// `|| p_Y - p_Y' ||_1` between train and ghost label histograms.
    pub tv: f64,
    /// Tail confidence; only the tail bound reads it.
    pub delta: f64,
}

impl BoundSpec {
    pub fn new(n: usize, classes: usize, mdl: f64, tv: f64) -> Result<Self> {
        let spec = Self {
            n,
            classes,
            mdl,
            tv,
            delta: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if delta.is_nan() || delta <= 0.0 || delta > 1.0 {
            return Err(Error::Domain {
                what: "delta",
                value: delta,
                range: "(0, 1]",
            });
        }
        self.delta = delta;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Precondition("n must be >= 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Precondition("class count must be >= 1".into()));
        }
        if !self.mdl.is_finite() || self.mdl < 0.0 {
            return Err(Error::Domain {
                what: "mdl",
                value: self.mdl,
                range: "[0, inf)",
            });
        }
        if self.tv.is_nan() || self.tv < 0.0 || self.tv > 2.0 {
            return Err(Error::Domain {
                what: "tv",
                value: self.tv,
                range: "[0, 2]",
            });
        }
        Ok(())
    }

    fn require_fast_rate(&self) -> Result<()> {
        self.validate()?;
        if self.n < 10 {
            return Err(Error::Precondition(format!(
                "fast-rate bounds need n >= 10, got {}",
                self.n
            )));
        }
        Ok(())
    }
}

/// How the nats-valued MDL terms are combined with the bits-valued entropy
/// terms in the fast-rate bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    /// MDL and `log n` in nats added to entropy terms in bits, as written.
    #[default]
    Mixed,
    /// Everything converted to bits.
    Bits,
    /// Everything converted to nats.
    Nats,
}

impl LogBase {
    /// Converts a `(nats-term, bits-term)` sum into this base.
    fn combine(self, nats_term: f64, bits_term: f64) -> f64 {
        match self {
            LogBase::Mixed => nats_term + bits_term,
            LogBase::Bits => nats_term / LN_2 + bits_term,
            LogBase::Nats => nats_term + bits_term * LN_2,
        }
    }

    /// Converts a value expressed in this base into the bits scale of
    /// [`js_gap`].
    fn to_gap_bits(self, value: f64) -> f64 {
        match self {
            LogBase::Mixed | LogBase::Bits => value,
            LogBase::Nats => value / LN_2,
        }
    }
}

impl std::str::FromStr for LogBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(LogBase::Mixed),
            "bits" => Ok(LogBase::Bits),
            "nats" => Ok(LogBase::Nats),
            other => Err(Error::Precondition(format!(
                "unknown log base `{other}` (expected bits, nats or mixed)"
            ))),
        }
    }
}

/// `sqrt((2 MDL + C + 2) / n)`.
pub fn sqrt_mdl_bound(spec: &BoundSpec) -> Result<f64> {
    spec.validate()?;
    Ok(((2.0 * spec.mdl + spec.classes as f64 + 2.0) / spec.n as f64).sqrt())
}

/// The square-root bound plus a distortion allowance `epsilon`.
pub fn lossy_sqrt_bound(spec: &BoundSpec, epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Domain {
            what: "epsilon",
            value: epsilon,
            range: "[0, inf)",
        });
    }
    Ok(sqrt_mdl_bound(spec)? + epsilon)
}

/// Per-draw label-shift residual: the entropy gain available when the label
/// histograms of the two sets differ by `tv` in L1.
pub fn label_shift_residual(risks: &RiskPair, tv: f64) -> Result<f64> {
    if tv.is_nan() || !(0.0..=2.0).contains(&tv) {
        return Err(Error::Domain {
            what: "tv",
            value: tv,
            range: "[0, 2]",
        });
    }
    risk_shift_gain(risks.train_risk, risks.test_risk, 0.5 * tv)
}

/// Monte-Carlo average of the residual over multinomial label draws: two
/// sets of `n` labels drawn uniformly over `classes`, risks held fixed.
pub fn label_shift_residual_mc(n: usize, classes: usize, risks: &RiskPair, draws: usize, seed: u64) -> Result<f64> {
    if n == 0 || classes == 0 || draws == 0 {
        return Err(Error::Precondition("n, classes and draws must be positive".into()));
    }
    let mut rng = rng::stream(seed, &[0x7e5]);
    let mut acc = 0.0;
    let mut counts = vec![0i64; classes];
    for _ in 0..draws {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n {
            counts[rng.random_range(0..classes)] += 1;
        }
        for _ in 0..n {
            counts[rng.random_range(0..classes)] -= 1;
        }
        let tv = counts.iter().map(|c| c.unsigned_abs() as f64).sum::<f64>() / n as f64;
        acc += label_shift_residual(risks, tv.min(2.0))?;
    }
    Ok(acc / draws as f64)
}

/// Right-hand side of the fast-rate bound on `E[js_gap(test, train)]`:
/// `(MDL + log n) / n + residual`.
pub fn fast_rate_rhs(spec: &BoundSpec, risks: &RiskPair, base: LogBase) -> Result<f64> {
    spec.require_fast_rate()?;
    let n = spec.n as f64;
    let core = (spec.mdl + n.ln()) / n;
    Ok(base.combine(core, label_shift_residual(risks, spec.tv)?))
}

/// Generalization bound implied by the fast-rate inequality for explicitly
/// given risks: `inv_gap(min(2, rhs) | train) - train`.
pub fn fast_rate_gen_bound_at(spec: &BoundSpec, risks: &RiskPair, base: LogBase) -> Result<f64> {
    let rhs = base.to_gap_bits(fast_rate_rhs(spec, risks, base)?);
    Ok(js_gap_inverse(rhs.min(2.0), risks.train_risk)? - risks.train_risk)
}

/// Generalization bound of the fast-rate inequality at empirical risk
/// `emp_risk`, with the residual evaluated at the bounded test risk itself.
///
/// The residual depends on the (unknown) test risk, so the bound is the
/// largest test risk `x` consistent with
/// `js_gap(x, emp) - residual(emp, x) <= (MDL + log n) / n`.
/// The left side is nondecreasing in `x`, which makes this a bisection.
pub fn fast_rate_gen_bound(spec: &BoundSpec, emp_risk: f64, base: LogBase) -> Result<f64> {
    spec.require_fast_rate()?;
    let emp = unit("emp_risk", emp_risk)?;
    let n = spec.n as f64;
    let core = (spec.mdl + n.ln()) / n;
    let budget = match base {
        LogBase::Mixed => core,
        LogBase::Bits | LogBase::Nats => core / LN_2,
    };
    let half_tv = 0.5 * spec.tv;
    let feasible = |x: f64| {
        let gap = js_gap_unchecked(x, emp);
        gap <= budget || gap - risk_shift_gain(emp, x, half_tv).unwrap_or(0.0) <= budget
    };
    Ok(sup_monotone(emp, feasible) - emp)
}

/// Right-hand side of the tail bound with a per-draw divergence `kl` (nats):
/// `(kl + log(n / delta)) / n + residual`.
pub fn tail_rhs(spec: &BoundSpec, kl: f64, risks: &RiskPair, base: LogBase) -> Result<f64> {
    spec.require_fast_rate()?;
    if spec.delta.is_nan() || spec.delta <= 0.0 || spec.delta > 1.0 {
        return Err(Error::Domain {
            what: "delta",
            value: spec.delta,
            range: "(0, 1]",
        });
    }
    if kl.is_nan() || kl < 0.0 {
        return Err(Error::Domain {
            what: "kl",
            value: kl,
            range: "[0, inf)",
        });
    }
    let n = spec.n as f64;
    let core = (kl + (n / spec.delta).ln()) / n;
    Ok(base.combine(core, label_shift_residual(risks, spec.tv)?))
}

/// Distributed description length: marginal terms minus the joint coupling
/// term, and the square-root bound evaluated on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributedMdl {
    /// Sum of marginal terms minus the joint term, unclamped.
    pub value: f64,
    /// True when `value < 0`, which can only come from estimator error.
    pub negative: bool,
    /// Square-root bound with `max(value, 0)` as the MDL.
    pub bound: f64,
}

pub fn distributed_mdl(marginal_kls: &[f64], joint_term: f64, n: usize, classes: usize) -> Result<DistributedMdl> {
    if marginal_kls.is_empty() {
        return Err(Error::Precondition("need at least one view".into()));
    }
    if marginal_kls.iter().any(|v| !v.is_finite() || *v < 0.0) || !(joint_term >= 0.0) {
        return Err(Error::Precondition(
            "marginal and joint terms must be finite and nonnegative".into(),
        ));
    }
    let value = marginal_kls.iter().sum::<f64>() - joint_term;
    let spec = BoundSpec::new(n, classes, value.max(0.0), 0.0)?;
    Ok(DistributedMdl {
        value,
        negative: value < 0.0,
        bound: sqrt_mdl_bound(&spec)?,
    })
}

/// All bound evaluations for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub spec: BoundSpec,
    pub risks: RiskPair,
    pub log_base: LogBase,
    /// Square-root bound.
    pub sqrt_bound: f64,
    /// Fast-rate right-hand side at the measured risks.
    pub fast_rate_rhs: f64,
    /// Generalization bound from the fast-rate inequality at the train risk.
    pub fast_rate_gen_bound: f64,
    /// Label-shift residual at the measured risks.
    pub residual: f64,
    /// Tail right-hand side with `kl = mdl`.
    pub tail_rhs: f64,
    /// Measured gap `test - train`, for comparison.
    pub observed_gap: f64,
}

pub fn bound_report(spec: &BoundSpec, risks: &RiskPair, base: LogBase) -> Result<BoundReport> {
    Ok(BoundReport {
        spec: *spec,
        risks: *risks,
        log_base: base,
        sqrt_bound: sqrt_mdl_bound(spec)?,
        fast_rate_rhs: fast_rate_rhs(spec, risks, base)?,
        fast_rate_gen_bound: fast_rate_gen_bound(spec, risks.train_risk, base)?,
        residual: label_shift_residual(risks, spec.tv)?,
        tail_rhs: tail_rhs(spec, spec.mdl, risks, base)?,
        observed_gap: risks.test_risk - risks.train_risk,
    })
}

/// The `sqrt(C / n)` order of the label-histogram L1 distance.
pub fn tv_sqrt_rule(classes: usize, n: usize) -> f64 {
    (classes as f64 / n as f64).sqrt().min(2.0)
}

/// One point of the bound-comparison curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCurvePoint {
    pub mdl_per_n: f64,
    pub sqrt_bound: f64,
    pub fast_rate_bound: f64,
}

/// Both generalization bounds as functions of `MDL / n`.
pub fn bound_curve(
    n: usize,
    classes: usize,
    emp_risk: f64,
    tv: f64,
    mdl_per_n: &[f64],
    base: LogBase,
) -> Result<Vec<BoundCurvePoint>> {
    mdl_per_n
        .iter()
        .map(|&r| {
            let spec = BoundSpec::new(n, classes, r * n as f64, tv)?;
            Ok(BoundCurvePoint {
                mdl_per_n: r,
                sqrt_bound: sqrt_mdl_bound(&spec)?,
                fast_rate_bound: fast_rate_gen_bound(&spec, emp_risk, base)?,
            })
        })
        .collect()
}

/// Smallest grid value after which the fast-rate bound stays at or below the
/// square-root bound. `None` if it never does at the end of the grid.
pub fn crossover(curve: &[BoundCurvePoint]) -> Option<f64> {
    let last_above = curve.iter().rposition(|p| p.fast_rate_bound > p.sqrt_bound);
    match last_above {
        None => curve.first().map(|p| p.mdl_per_n),
        Some(i) if i + 1 < curve.len() => Some(curve[i + 1].mdl_per_n),
        Some(_) => None,
    }
}

/// One point of the residual-versus-generalization-error curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub gen_error: f64,
    pub residual: f64,
}

/// Residual at train risk `emp_risk` and test risk `emp_risk + g` for each
/// generalization error `g`.
pub fn residual_curve(emp_risk: f64, tv: f64, gen_errors: &[f64]) -> Result<Vec<ResidualPoint>> {
    gen_errors
        .iter()
        .map(|&g| {
            let risks = RiskPair::new(emp_risk, (emp_risk + g).min(1.0))?;
            Ok(ResidualPoint {
                gen_error: g,
                residual: label_shift_residual(&risks, tv)?,
            })
        })
        .collect()
}
