//! Diagonal-Gaussian algebra.
//!
//! Exact KL between diagonal Gaussians, the variational (`D_var`) and
//! product-integral (`D_prod`) estimates of KL against a Gaussian mixture, the
//! distortion-aware divergence used by the lossy regularizers, and a seeded
//! Monte-Carlo oracle.
//!
//! The slice kernels at the bottom are what the prior engines call in their
//! inner loops. They take variances, not standard deviations, and return
//! gradients with respect to the latent mean and variance.

use std::f64::consts::{E, PI};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Lower clamp applied to every variance.
pub const VAR_FLOOR: f64 = 1e-8;

/// Responsibilities below this are treated as exact zeros in `g log g`.
pub const GAMMA_ZERO: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a Gaussian, clamping variances to [`VAR_FLOOR`].
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: var.len(),
                context: "gaussian variance",
            });
        }
        if mean.is_empty() {
            return Err(Error::Precondition("gaussian dimension must be >= 1".into()));
        }
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let var = var.into_iter().map(|v| v.max(VAR_FLOOR)).collect();
        Ok(Self { mean, var })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        log_density(&self.mean, &self.var, u)
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy_term(&self.var)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Precondition("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::Dimension {
                expected: components.len(),
                got: weights.len(),
                context: "mixture weights",
            });
        }
        check_simplex(&weights, "mixture weights")?;
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: c.dim(),
                context: "mixture component",
            });
        }
        Ok(Self { weights, components })
    }

    pub fn single(component: DiagGaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(u))
            .collect();
        log_sum_exp(&terms)
    }
}

pub(crate) fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Precondition(format!("{what} must be finite and nonnegative")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Precondition(format!("{what} sum to {total}, not 1")));
    }
    Ok(())
}

fn same_dim(p: &DiagGaussian, d: usize) -> Result<()> {
    if p.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: p.dim(),
            context: "gaussian",
        });
    }
    Ok(())
}

/// `log sum exp(xs)`, shifted by the maximum. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Writes `softmax(logits)` into `out` and returns the log normalizer.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

/// `KL(p || q)` in nats.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    same_dim(q, p.dim())?;
    Ok(kl_term(&p.mean, &p.var, &q.mean, &q.var))
}

/// Variational estimate `sum_m g_m (KL(p || q_m) - log(a_m / g_m))`.
///
/// With `gamma = None` the minimizing responsibilities are used and the value
/// is `-log sum_m a_m exp(-KL(p || q_m))`.
pub fn d_var(p: &DiagGaussian, q: &GaussianMixture, gamma: Option<&[f64]>) -> Result<f64> {
    same_dim(p, q.dim())?;
    let kls: Vec<f64> = q
        .components
        .iter()
        .map(|c| kl_term(&p.mean, &p.var, &c.mean, &c.var))
        .collect();
    match gamma {
        None => {
            let logits: Vec<f64> = q.weights.iter().zip(&kls).map(|(a, k)| a.ln() - k).collect();
            Ok(-log_sum_exp(&logits))
        }
        Some(g) => {
            if g.len() != q.len() {
                return Err(Error::Dimension {
                    expected: q.len(),
                    got: g.len(),
                    context: "responsibilities",
                });
            }
            check_simplex(g, "responsibilities")?;
            variational_objective(g, &q.weights, &kls)
        }
    }
}

/// `sum_m g_m (div_m - log a_m + log g_m)` with `0 log 0 = 0`.
pub(crate) fn variational_objective(gamma: &[f64], alpha: &[f64], div: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for ((&g, &a), &k) in gamma.iter().zip(alpha).zip(div) {
        if g < GAMMA_ZERO {
            continue;
        }
        if a <= 0.0 {
            return Err(Error::Precondition(
                "positive responsibility on a zero-weight component".into(),
            ));
        }
        acc += g * (k - a.ln() + g.ln());
    }
    Ok(acc)
}

/// Which Gaussian integral enters the product estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProdVariant {
    /// `int p q_m` with the summed variances `var_p + var_q`.
    #[default]
    Exact,
    /// Component variances only; drops the dependence on `var_p`.
    TPrime,
}

/// Product-integral estimate `-(H(p) + log sum_m a_m t_m)`.
pub fn d_prod(p: &DiagGaussian, q: &GaussianMixture, variant: ProdVariant) -> Result<f64> {
    same_dim(p, q.dim())?;
    let logits: Vec<f64> = q
        .weights
        .iter()
        .zip(&q.components)
        .map(|(a, c)| {
            let lt = match variant {
                ProdVariant::Exact => log_t_exact(&p.mean, &p.var, &c.mean, &c.var),
                ProdVariant::TPrime => log_t_prime(&p.mean, &c.mean, &c.var),
            };
            a.ln() + lt
        })
        .collect();
    Ok(-(entropy_term(&p.var) + log_sum_exp(&logits)))
}

/// Mean of `d_var` (optimal responsibilities) and `d_prod` (exact integral).
pub fn d_est(p: &DiagGaussian, q: &GaussianMixture) -> Result<f64> {
    Ok(0.5 * (d_var(p, q, None)? + d_prod(p, q, ProdVariant::Exact)?))
}

/// Distortion-aware divergence between a latent and one component: a mean
/// term with fixed isotropic variance `scale / 2` plus a variance term with
/// both variances offset by `eps`. Single-view uses `scale = sqrt(d)`.
pub fn kl_lossy(p: &DiagGaussian, comp: &DiagGaussian, eps: f64, scale: f64) -> Result<f64> {
    same_dim(comp, p.dim())?;
    if !(eps > 0.0) || !(scale > 0.0) {
        return Err(Error::Precondition("eps and scale must be positive".into()));
    }
    Ok(lossy_term(&p.mean, &p.var, &comp.mean, &comp.var, eps, scale))
}

pub fn kl_lossy_single(p: &DiagGaussian, comp: &DiagGaussian, eps: f64) -> Result<f64> {
    kl_lossy(p, comp, eps, (p.dim() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `KL(p || q)` from `n_samples` draws of `p`.
pub fn mc_kl(p: &DiagGaussian, q: &GaussianMixture, n_samples: usize, seed: u64) -> Result<McEstimate> {
    same_dim(p, q.dim())?;
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, &[0x3c]);
    let d = p.dim();
    let sd: Vec<f64> = p.var.iter().map(|v| v.sqrt()).collect();
    let log_w: Vec<f64> = q.weights.iter().map(|w| w.ln()).collect();
    let mut u = vec![0.0; d];
    let mut terms = vec![0.0; q.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        for j in 0..d {
            let xi: f64 = StandardNormal.sample(&mut rng);
            u[j] = p.mean[j] + sd[j] * xi;
        }
        for (t, (lw, c)) in terms.iter_mut().zip(log_w.iter().zip(&q.components)) {
            *t = lw + c.log_density(&u);
        }
        let x = p.log_density(&u) - log_sum_exp(&terms);
        sum += x;
        sum_sq += x * x;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
    })
}

// Slice kernels. `pv`/`qv` are variances; gradients are accumulated with a
// weight into `g_mu` (d/d mean) and `g_var` (d/d latent variance).

pub(crate) fn log_density(mean: &[f64], var: &[f64], u: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((m, v), x) in mean.iter().zip(var).zip(u) {
        let z = x - m;
        acc += -0.5 * (2.0 * PI * v).ln() - 0.5 * z * z / v;
    }
    acc
}

pub(crate) fn entropy_term(pv: &[f64]) -> f64 {
    pv.iter().map(|v| 0.5 * (2.0 * PI * E * v).ln()).sum()
}

pub(crate) fn entropy_grad(pv: &[f64], w: f64, g_var: &mut [f64]) {
    for (g, v) in g_var.iter_mut().zip(pv) {
        *g += w * 0.5 / v;
    }
}

pub(crate) fn kl_term(pm: &[f64], pv: &[f64], qm: &[f64], qv: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..pm.len() {
        let dm = pm[j] - qm[j];
        acc += 0.5 * (qv[j] / pv[j]).ln() + (pv[j] + dm * dm) / (2.0 * qv[j]) - 0.5;
    }
    acc.max(0.0)
}

pub(crate) fn kl_grad(pm: &[f64], pv: &[f64], qm: &[f64], qv: &[f64], w: f64, g_mu: &mut [f64], g_var: &mut [f64]) {
    for j in 0..pm.len() {
        g_mu[j] += w * (pm[j] - qm[j]) / qv[j];
        g_var[j] += w * 0.5 * (1.0 / qv[j] - 1.0 / pv[j]);
    }
}

pub(crate) fn lossy_term(pm: &[f64], pv: &[f64], qm: &[f64], qv: &[f64], eps: f64, scale: f64) -> f64 {
    let mut mean_part = 0.0;
    let mut var_part = 0.0;
    for j in 0..pm.len() {
        let dm = pm[j] - qm[j];
        mean_part += dm * dm;
        let (a, b) = (pv[j] + eps, qv[j] + eps);
        var_part += 0.5 * (b / a).ln() + a / (2.0 * b) - 0.5;
    }
    mean_part / scale + var_part.max(0.0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lossy_grad(
    pm: &[f64],
    pv: &[f64],
    qm: &[f64],
    qv: &[f64],
    eps: f64,
    scale: f64,
    w: f64,
    g_mu: &mut [f64],
    g_var: &mut [f64],
) {
    for j in 0..pm.len() {
        g_mu[j] += w * 2.0 * (pm[j] - qm[j]) / scale;
        g_var[j] += w * 0.5 * (1.0 / (qv[j] + eps) - 1.0 / (pv[j] + eps));
    }
}

pub(crate) fn log_t_exact(pm: &[f64], pv: &[f64], qm: &[f64], qv: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..pm.len() {
        let s = pv[j] + qv[j];
        let dm = pm[j] - qm[j];
        acc += -0.5 * (2.0 * PI * s).ln() - dm * dm / (2.0 * s);
    }
    acc
}

pub(crate) fn log_t_prime(pm: &[f64], qm: &[f64], qv: &[f64]) -> f64 {
    log_density(qm, qv, pm)
}

/// Accumulates `w * d(log t')/d mean`.
pub(crate) fn log_t_prime_grad(pm: &[f64], qm: &[f64], qv: &[f64], w: f64, g_mu: &mut [f64]) {
    for j in 0..pm.len() {
        g_mu[j] -= w * (pm[j] - qm[j]) / qv[j];
    }
}

/// Mean-only integral of the lossy product estimate for one view, with
/// isotropic variance `scale / 2` on both sides.
pub(crate) fn log_t_lossy(pm: &[f64], qm: &[f64], scale: f64) -> f64 {
    let d = pm.len() as f64;
    let sq: f64 = pm.iter().zip(qm).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * PI * scale).ln() - sq / (2.0 * scale)
}

pub(crate) fn log_t_lossy_grad(pm: &[f64], qm: &[f64], scale: f64, w: f64, g_mu: &mut [f64]) {
    for j in 0..pm.len() {
        g_mu[j] -= w * (pm[j] - qm[j]) / scale;
    }
}

/// Entropy of the mean part of the lossy latent over `dims` coordinates.
pub(crate) fn lossy_entropy_const(dims: usize, scale: f64) -> f64 {
    0.5 * dims as f64 * (PI * E * scale).ln()
}
