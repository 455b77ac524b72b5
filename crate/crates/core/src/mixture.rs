//! Machinery shared by the single-view bank and the product mixture prior.
//!
//! A single-view bank is the `K = 1` case of everything here. Per-view work
//! (divergence matrices, integral terms, gradients, component M-step) only
//! touches that view's latents and components, which is what lets the
//! distributed runtime split it across clients without changing a bit.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, DiagGaussian, VAR_FLOOR};
use crate::prior_single::{KlEstimate, Mode, UpdateHyper};
use crate::rng;

/// Joint cells whose blended mass falls below this keep their weight.
pub const JOINT_CELL_MIN: f64 = 1e-6;

/// Upper limit on `M^K` for the dense joint weight tensor.
pub const JOINT_BUDGET: usize = 65_536;

pub(crate) fn joint_size(m: usize, k: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..k {
        total = match total.checked_mul(m) {
            Some(t) if t <= JOINT_BUDGET => t,
            _ => {
                return Err(Error::Budget {
                    m,
                    k,
                    budget: JOINT_BUDGET,
                })
            }
        };
    }
    Ok(total)
}

/// Decodes a row-major joint index into per-view component indices, first
/// view slowest.
pub fn joint_digits(mut idx: usize, m: usize, digits: &mut [usize]) {
    for d in digits.iter_mut().rev() {
        *d = idx % m;
        idx /= m;
    }
}

/// Divergence geometry of one view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ViewGeom {
    pub mode: Mode,
    pub estimate: KlEstimate,
    pub eps: f64,
    /// Isotropic scale of the lossy mean term: `sqrt(d)` for a single view,
    /// `sqrt(K d)` in the joint prior.
    pub scale: f64,
}

/// `max(sigma^2, floor)` elementwise.
pub(crate) fn latent_var(sigma: &Array2<f64>) -> Array2<f64> {
    sigma.mapv(|s| (s * s).max(VAR_FLOOR))
}

/// What a view contributes to the joint quantities: the `b x M` divergence
/// matrix, the `b x M` log-integral matrix (only when the product estimate is
/// in use) and the per-sample entropy terms.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ViewStats {
    pub div: Array2<f64>,
    pub log_t: Option<Array2<f64>>,
    pub entropy: Vec<f64>,
}

pub(crate) fn view_stats(
    geom: &ViewGeom,
    mu: &Array2<f64>,
    var: &Array2<f64>,
    labels: &[usize],
    comps: &[&[DiagGaussian]],
) -> ViewStats {
    let (b, d) = mu.dim();
    let m = comps[0].len();
    let mut div = Array2::zeros((b, m));
    let with_prod = geom.estimate == KlEstimate::AvgVarProd;
    let mut log_t = with_prod.then(|| Array2::zeros((b, m)));
    let mut entropy = vec![0.0; b];
    for i in 0..b {
        let (pm, pv) = (row(mu, i), row(var, i));
        for (j, c) in comps[labels[i]].iter().enumerate() {
            div[[i, j]] = match geom.mode {
                Mode::Lossless => gaussian::kl_term(pm, pv, c.mean(), c.var()),
                Mode::Lossy => gaussian::lossy_term(pm, pv, c.mean(), c.var(), geom.eps, geom.scale),
            };
            if let Some(lt) = log_t.as_mut() {
                lt[[i, j]] = match geom.mode {
                    Mode::Lossless => gaussian::log_t_prime(pm, c.mean(), c.var()),
                    Mode::Lossy => gaussian::log_t_lossy(pm, c.mean(), geom.scale),
                };
            }
        }
        if with_prod {
            entropy[i] = match geom.mode {
                Mode::Lossless => gaussian::entropy_term(pv),
                Mode::Lossy => gaussian::lossy_entropy_const(d, geom.scale),
            };
        }
    }
    ViewStats { div, log_t, entropy }
}

pub(crate) fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    a.row(i).to_slice().expect("row-major matrix")
}

/// Softmax over the joint index of `log a_{y_i} + sign * sum_k V_k[i, m_k]`,
/// with per-view marginals and log normalizers.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct JointRows {
    pub lse: Vec<f64>,
    pub marginals: Vec<Array2<f64>>,
    pub rows: Option<Array2<f64>>,
}

pub(crate) fn joint_softmax(
    log_alpha: &[Vec<f64>],
    m: usize,
    labels: &[usize],
    mats: &[&Array2<f64>],
    sign: f64,
    keep_rows: bool,
) -> JointRows {
    let k = mats.len();
    let b = labels.len();
    let size = log_alpha[0].len();
    let mut lse = vec![0.0; b];
    let mut marginals = vec![Array2::zeros((b, m)); k];
    let mut rows = keep_rows.then(|| Array2::zeros((b, size)));
    let mut logits = vec![0.0; size];
    let mut probs = vec![0.0; size];
    let mut digits = vec![0usize; k];
    for i in 0..b {
        let la = &log_alpha[labels[i]];
        for (idx, l) in logits.iter_mut().enumerate() {
            joint_digits(idx, m, &mut digits);
            let mut s = 0.0;
            for (v, &dg) in mats.iter().zip(&digits) {
                s += v[[i, dg]];
            }
            *l = la[idx] + sign * s;
        }
        lse[i] = gaussian::softmax_into(&logits, &mut probs);
        for (idx, &p) in probs.iter().enumerate() {
            joint_digits(idx, m, &mut digits);
            for (mg, &dg) in marginals.iter_mut().zip(&digits) {
                mg[[i, dg]] += p;
            }
        }
        if let Some(r) = rows.as_mut() {
            r.row_mut(i).iter_mut().zip(&probs).for_each(|(o, p)| *o = *p);
        }
    }
    JointRows { lse, marginals, rows }
}

/// Per-sample regularizer values from the joint passes.
pub(crate) fn sample_values(
    estimate: KlEstimate,
    gamma: &JointRows,
    beta: Option<&JointRows>,
    entropy_total: &[f64],
) -> Vec<f64> {
    match (estimate, beta) {
        (KlEstimate::AvgVarProd, Some(beta)) => gamma
            .lse
            .iter()
            .zip(&beta.lse)
            .zip(entropy_total)
            .map(|((g, bt), h)| 0.5 * (-g) + 0.5 * (-h - bt))
            .collect(),
        _ => gamma.lse.iter().map(|g| -g).collect(),
    }
}

/// Gradient of `weight * sum_i value_i` with respect to one view's latent
/// means and standard deviations, prior held fixed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn view_gradient(
    geom: &ViewGeom,
    mu: &Array2<f64>,
    sigma: &Array2<f64>,
    var: &Array2<f64>,
    labels: &[usize],
    comps: &[&[DiagGaussian]],
    gamma: &Array2<f64>,
    beta: Option<&Array2<f64>>,
    weight: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (b, d) = mu.dim();
    let mut g_mu = Array2::zeros((b, d));
    let mut g_sigma = Array2::zeros((b, d));
    let mut gm = vec![0.0; d];
    let mut gv = vec![0.0; d];
    let var_weight = match (geom.estimate, beta) {
        (KlEstimate::AvgVarProd, Some(_)) => 0.5 * weight,
        _ => weight,
    };
    for i in 0..b {
        gm.iter_mut().for_each(|x| *x = 0.0);
        gv.iter_mut().for_each(|x| *x = 0.0);
        let (pm, pv) = (row(mu, i), row(var, i));
        for (j, c) in comps[labels[i]].iter().enumerate() {
            let w = var_weight * gamma[[i, j]];
            match geom.mode {
                Mode::Lossless => gaussian::kl_grad(pm, pv, c.mean(), c.var(), w, &mut gm, &mut gv),
                Mode::Lossy => {
                    gaussian::lossy_grad(pm, pv, c.mean(), c.var(), geom.eps, geom.scale, w, &mut gm, &mut gv)
                }
            }
        }
        if let (KlEstimate::AvgVarProd, Some(beta)) = (geom.estimate, beta) {
            let half = 0.5 * weight;
            for (j, c) in comps[labels[i]].iter().enumerate() {
                // The product half enters with a minus sign.
                let w = -half * beta[[i, j]];
                match geom.mode {
                    Mode::Lossless => gaussian::log_t_prime_grad(pm, c.mean(), c.var(), w, &mut gm),
                    Mode::Lossy => gaussian::log_t_lossy_grad(pm, c.mean(), geom.scale, w, &mut gm),
                }
            }
            if geom.mode == Mode::Lossless {
                gaussian::entropy_grad(pv, -half, &mut gv);
            }
        }
        let sg = row(sigma, i);
        for j in 0..d {
            g_mu[[i, j]] = gm[j];
            // d var / d sigma = 2 sigma, except where the floor is active.
            g_sigma[[i, j]] = if sg[j] * sg[j] > VAR_FLOOR {
                2.0 * sg[j] * gv[j]
            } else {
                0.0
            };
        }
    }
    (g_mu, g_sigma)
}

/// Closed-form component parameters of one view for every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewCandidates {
    /// `[class][component]` mean vectors.
    pub means: Vec<Vec<Vec<f64>>>,
    /// `[class][component]` variance vectors.
    pub vars: Vec<Vec<Vec<f64>>>,
    /// `[class][component]` responsibility mass.
    pub mass: Vec<Vec<f64>>,
    /// `[class][component]` true where the mass was below `b_min` and the
    /// previous parameters were kept.
    pub kept: Vec<Vec<bool>>,
}

/// Output of an M-step: per-view component candidates, per-class weights
/// (joint index for the product prior) and which classes were present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub views: Vec<ViewCandidates>,
    pub weights: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn view_m_step(
    geom: &ViewGeom,
    mu: &Array2<f64>,
    var: &Array2<f64>,
    labels: &[usize],
    comps: &[&[DiagGaussian]],
    gamma: &Array2<f64>,
    beta: Option<&Array2<f64>>,
    b_min: f64,
) -> ViewCandidates {
    let classes = comps.len();
    let m = comps[0].len();
    let d = mu.ncols();
    let use_beta = geom.estimate == KlEstimate::AvgVarProd && beta.is_some();
    let mut mean_num = vec![vec![vec![0.0; d]; m]; classes];
    let mut mean_den = vec![vec![0.0; m]; classes];
    let mut var_num = vec![vec![vec![0.0; d]; m]; classes];
    let mut var_den = vec![vec![0.0; m]; classes];
    let mut mass = vec![vec![0.0; m]; classes];
    for (i, &c) in labels.iter().enumerate() {
        let (pm, pv) = (row(mu, i), row(var, i));
        for j in 0..m {
            let g = gamma[[i, j]];
            let bt = if use_beta { beta.unwrap()[[i, j]] } else { 0.0 };
            mass[c][j] += g;
            let w_mean = match (use_beta, geom.mode) {
                (false, _) => g,
                (true, Mode::Lossless) => 0.5 * (g + bt),
                (true, Mode::Lossy) => (2.0 * g + bt) / 3.0,
            };
            mean_den[c][j] += w_mean;
            for (acc, x) in mean_num[c][j].iter_mut().zip(pm) {
                *acc += w_mean * x;
            }
            let prev = comps[c][j].mean();
            match (geom.mode, use_beta) {
                (Mode::Lossless, false) => {
                    var_den[c][j] += g;
                    for t in 0..d {
                        let dm = pm[t] - prev[t];
                        var_num[c][j][t] += g * (pv[t] + dm * dm);
                    }
                }
                (Mode::Lossless, true) => {
                    var_den[c][j] += g + bt;
                    for t in 0..d {
                        let dm = pm[t] - prev[t];
                        var_num[c][j][t] += g * pv[t] + (g + bt) * dm * dm;
                    }
                }
                (Mode::Lossy, _) => {
                    var_den[c][j] += g;
                    for t in 0..d {
                        var_num[c][j][t] += g * pv[t];
                    }
                }
            }
        }
    }
    let mut means = Vec::with_capacity(classes);
    let mut vars = Vec::with_capacity(classes);
    let mut kept = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut cm = Vec::with_capacity(m);
        let mut cv = Vec::with_capacity(m);
        let mut ck = Vec::with_capacity(m);
        for j in 0..m {
            let low = mass[c][j] < b_min || mean_den[c][j] <= 0.0 || var_den[c][j] <= 0.0;
            if low {
                cm.push(comps[c][j].mean().to_vec());
                cv.push(comps[c][j].var().to_vec());
            } else {
                cm.push(mean_num[c][j].iter().map(|x| x / mean_den[c][j]).collect());
                cv.push(
                    var_num[c][j]
                        .iter()
                        .map(|x| (x / var_den[c][j]).max(VAR_FLOOR))
                        .collect(),
                );
            }
            ck.push(low);
        }
        means.push(cm);
        vars.push(cv);
        kept.push(ck);
    }
    ViewCandidates {
        means,
        vars,
        mass,
        kept,
    }
}

/// Weight candidates from joint responsibilities, blended with the product
/// weights when the average estimate is in use.
pub(crate) fn weight_candidates(
    prev: &[Vec<f64>],
    labels: &[usize],
    gamma_rows: &Array2<f64>,
    beta_rows: Option<&Array2<f64>>,
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let classes = prev.len();
    let size = prev[0].len();
    let mut mass = vec![vec![0.0; size]; classes];
    let mut present = vec![false; classes];
    for (i, &c) in labels.iter().enumerate() {
        present[c] = true;
        for idx in 0..size {
            let g = gamma_rows[[i, idx]];
            mass[c][idx] += match beta_rows {
                Some(b) => 0.5 * (g + b[[i, idx]]),
                None => g,
            };
        }
    }
    let weights = (0..classes)
        .map(|c| {
            if !present[c] {
                return prev[c].clone();
            }
            let kept_prev: f64 = (0..size)
                .filter(|&x| mass[c][x] < JOINT_CELL_MIN)
                .map(|x| prev[c][x])
                .sum();
            let live: f64 = mass[c].iter().filter(|&&x| x >= JOINT_CELL_MIN).sum();
            (0..size)
                .map(|x| {
                    if mass[c][x] < JOINT_CELL_MIN {
                        prev[c][x]
                    } else {
                        (1.0 - kept_prev) * mass[c][x] / live
                    }
                })
                .collect()
        })
        .collect();
    (weights, present)
}

/// Moving average plus Gaussian noise on one view's components for every
/// present class. Noise streams are keyed by `(class, view, component)`.
pub(crate) fn blend_view(
    hyper: &UpdateHyper,
    comps: &mut [Vec<DiagGaussian>],
    cand: &ViewCandidates,
    present: &[bool],
    view: usize,
    t: u64,
    seed: u64,
) -> Result<()> {
    let (z_mean, z_var) = hyper.noise.at(t + 1);
    let normal = |v: f64| Normal::new(0.0, v.sqrt()).expect("finite noise scale");
    let (n_mean, n_var) = (normal(z_mean), normal(z_var));
    for (c, class_comps) in comps.iter_mut().enumerate() {
        if !present[c] {
            continue;
        }
        for (j, comp) in class_comps.iter_mut().enumerate() {
            let mut rng = rng::stream(seed, &[c as u64, view as u64, j as u64]);
            let d = comp.dim();
            let mut mean = Vec::with_capacity(d);
            for t in 0..d {
                let blended = (1.0 - hyper.eta_mean) * comp.mean()[t] + hyper.eta_mean * cand.means[c][j][t];
                let noise = if z_mean > 0.0 { n_mean.sample(&mut rng) } else { 0.0 };
                mean.push(blended + noise);
            }
            let mut var = Vec::with_capacity(d);
            for t in 0..d {
                let blended = (1.0 - hyper.eta_var) * comp.var()[t] + hyper.eta_var * cand.vars[c][j][t];
                let noise = if z_var > 0.0 { n_var.sample(&mut rng) } else { 0.0 };
                var.push((blended + noise).max(VAR_FLOOR));
            }
            if hyper.mode == Mode::Lossy && hyper.normalize_means {
                normalize_mean(&mut mean);
            }
            *comp = DiagGaussian::new(mean, var)?;
        }
    }
    Ok(())
}

pub(crate) fn blend_weights(hyper: &UpdateHyper, weights: &mut [Vec<f64>], cand: &[Vec<f64>], present: &[bool]) {
    for (c, w) in weights.iter_mut().enumerate() {
        if !present[c] {
            continue;
        }
        for (x, y) in w.iter_mut().zip(&cand[c]) {
            *x = ((1.0 - hyper.eta_weight) * *x + hyper.eta_weight * y).max(0.0);
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
    }
}

/// Rescales a mean vector to norm `sqrt(d)`.
pub(crate) fn normalize_mean(mean: &mut [f64]) {
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        let target = (mean.len() as f64).sqrt();
        mean.iter_mut().for_each(|x| *x *= target / norm);
    }
}

/// k-means++ seeding of `m` centers among `candidates`, where `dist2(a, b)`
/// is the squared distance between two candidate indices. Returns positions
/// into `candidates`.
pub(crate) fn kmeanspp<R: rand::Rng>(
    candidates: usize,
    m: usize,
    dist2: impl Fn(usize, usize) -> f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(m);
    chosen.push(rng.random_range(0..candidates));
    let mut dmin: Vec<f64> = (0..candidates).map(|i| dist2(i, chosen[0])).collect();
    while chosen.len() < m {
        let total: f64 = dmin.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in dmin.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total weight")
        } else {
            let rest: Vec<usize> = (0..candidates).filter(|i| !chosen.contains(i)).collect();
            if rest.is_empty() {
                rng.random_range(0..candidates)
            } else {
                rest[rng.random_range(0..rest.len())]
            }
        };
        chosen.push(next);
        for (i, dm) in dmin.iter_mut().enumerate() {
            *dm = dm.min(dist2(i, next));
        }
    }
    chosen
}

/// `|N(0, 1)|` draws squared into variances.
pub(crate) fn init_vars<R: rand::Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let s: f64 = rand_distr::StandardNormal.sample(rng);
            (s * s).max(VAR_FLOOR)
        })
        .collect()
}
