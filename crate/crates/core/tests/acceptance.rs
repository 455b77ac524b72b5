//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Every numeric reference is computed here
//! by an independent oracle (brute-force grids, Monte Carlo, finite
//! differences) rather than by the library under test.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

use std::f64::consts::{LN_2, PI};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use mvmdl_core::bounds::{self, BoundSpec, LogBase};
use mvmdl_core::distributed::Simulator;
use mvmdl_core::experiment::{run_sweep, summarize, ExperimentConfig};
use mvmdl_core::gaussian::{self, DiagGaussian, GaussianMixture, ProdVariant};
use mvmdl_core::nets::{Models, Params};
use mvmdl_core::prior_multi::{
    redundancy_gap, JointWeights, MultiLatentBatch, ProductMixturePrior, ViewBank, ViewLatents,
};
use mvmdl_core::prior_single::{KlEstimate, LatentBatch, Mode, NoiseSchedule, PriorBankSingle, UpdateHyper};
use mvmdl_core::rng;
use mvmdl_core::synth::{generate, LevelName, MultiViewData, SynthConfig, ViewSpec};
use mvmdl_core::training::{self, loss_and_grads, step_noise, PriorEngine, RegularizerKind, TrainConfig, Trainer};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 11] = [
        (1, "bound golden values", 1, golden_values),
        (2, "entropy functions vs grid oracles", 30, grid_oracles),
        (3, "fast-rate bound below square-root bound", 10, bound_comparison),
        (4, "label-shift residual is small", 5, residual_small),
        (5, "KL sandwich", 300, kl_sandwich),
        (6, "E-step and M-step optimality", 120, em_optimality),
        (7, "gradient checks", 120, gradient_checks),
        (8, "redundancy property", 30, redundancy),
        (9, "distributed equivalence", 60, distributed_equivalence),
        (10, "directional experiment", 600, directional_experiment),
        (11, "prior symmetry", 60, prior_symmetry),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > Duration::from_secs(limit) => {
                Err(format!("runtime {:.1}s exceeds {limit}s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "criterion {id:>2} {tag} {name} [{:.2}s]: {detail}",
            elapsed.as_secs_f64()
        );
        failed += outcome.is_err() as usize;
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// Oracles for the entropy functions, written from their definitions.

fn hb(x: f64) -> f64 {
    let t = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() / LN_2 };
    t(x) + t(1.0 - x)
}

fn hd(x1: f64, x2: f64) -> f64 {
    2.0 * hb(0.5 * (x1 + x2)) - hb(x1) - hb(x2)
}

/// Maximum of the entropy gain over a uniform grid of shifts.
fn hc_grid(x1: f64, x2: f64, eps: f64, step: f64) -> f64 {
    let (lo, hi) = (x1.min(x2), x1.max(x2));
    let len = eps.min(0.5 * (hi - lo));
    let f = |e: f64| hb(lo + e) - hb(lo) + hb(hi - e) - hb(hi);
    let n = (len / step).floor() as usize;
    (0..=n).map(|k| f(k as f64 * step)).fold(f(len), f64::max).max(0.0)
}

/// Last point of `[lo, 1]` satisfying `ok`, scanning a coarse grid and then
/// a fine grid inside the last feasible coarse cell.
fn grid_sup(lo: f64, coarse: f64, fine: f64, ok: impl Fn(f64) -> bool) -> f64 {
    let n = ((1.0 - lo) / coarse).ceil() as usize;
    let mut last = lo;
    for k in 0..=n {
        let x = (lo + k as f64 * coarse).min(1.0);
        if ok(x) {
            last = x;
        }
    }
    let top = (last + coarse).min(1.0);
    let m = ((top - last) / fine).ceil() as usize;
    let mut best = last;
    for k in 0..=m {
        let x = (last + k as f64 * fine).min(top);
        if ok(x) {
            best = x;
        }
    }
    best
}

fn hd_inverse_grid(y: f64, x2: f64) -> f64 {
    grid_sup(x2, 1e-4, 1e-7, |x| hd(x, x2) <= y)
}

fn golden_values() -> Outcome {
    let spec = BoundSpec::new(50_000, 10, 0.0, 0.0).map_err(|e| e.to_string())?;
    let thm = bounds::sqrt_mdl_bound(&spec).unwrap();
    let want = (12.0f64 / 50_000.0).sqrt();
    ensure!((thm - want).abs() <= 1e-12, "sqrt bound {thm} vs {want}");
    let h = bounds::binary_entropy(0.25).unwrap();
    ensure!((h - 0.811278).abs() <= 1e-6, "h_b(0.25) = {h}");
    ensure!((h - hb(0.25)).abs() <= 1e-12, "h_b(0.25) vs definition");
    let g = bounds::js_gap(0.5, 0.0).unwrap();
    ensure!((g - 0.622556).abs() <= 1e-6, "h_D(0.5, 0) = {g}");
    Ok(format!("sqrt bound {thm:.12}, h_b {h:.6}, h_D {g:.6}"))
}

fn grid_oracles() -> Outcome {
    let mut r = rng::stream(2, &[]);
    let (mut worst_c, mut worst_inv) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let x1: f64 = r.random();
        let x2: f64 = r.random();
        let eps: f64 = r.random_range(0.0..0.1);
        let got = bounds::risk_shift_gain(x1, x2, eps).unwrap();
        let want = hc_grid(x1, x2, eps, 1e-6);
        worst_c = worst_c.max((got - want).abs());
        ensure!(
            (got - want).abs() <= 1e-6,
            "h_C({x1}, {x2}, {eps}) = {got}, grid {want}"
        );

        let x2: f64 = r.random_range(0.0..0.95);
        // Half the targets are reachable gaps, half uniform on [0, 2].
        let y = if i % 2 == 0 {
            hd(r.random_range(x2..1.0), x2)
        } else {
            r.random_range(0.0..2.0)
        };
        let got = bounds::js_gap_inverse(y, x2).unwrap();
        let want = hd_inverse_grid(y, x2);
        worst_inv = worst_inv.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-6, "h_D^-1({y} | {x2}) = {got}, grid {want}");
    }
    Ok(format!(
        "1000 inputs, max |h_C err| {worst_c:.2e}, max |h_D^-1 err| {worst_inv:.2e}"
    ))
}

const N_FIG: usize = 50_000;
const C_FIG: usize = 10;

fn fig_tv() -> f64 {
    (C_FIG as f64 / N_FIG as f64).sqrt()
}

/// Fast-rate generalization bound from its defining inequality, by grid.
fn fast_rate_oracle(mdl_per_n: f64, emp: f64) -> f64 {
    let n = N_FIG as f64;
    let budget = (mdl_per_n * n + n.ln()) / n;
    let half_tv = 0.5 * fig_tv();
    let x = grid_sup(emp, 1e-3, 1e-6, |x| {
        hd(x, emp) - hc_grid(emp, x, half_tv, 1e-6) <= budget
    });
    x - emp
}

fn sqrt_oracle(mdl_per_n: f64) -> f64 {
    ((2.0 * mdl_per_n * N_FIG as f64 + C_FIG as f64 + 2.0) / N_FIG as f64).sqrt()
}

fn bound_comparison() -> Outcome {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.005).collect();
    let curve = |emp: f64| bounds::bound_curve(N_FIG, C_FIG, emp, fig_tv(), &grid, LogBase::Mixed).unwrap();
    let c05 = curve(0.05);
    let c01 = curve(0.01);
    for (curve, emp) in [(&c05, 0.05), (&c01, 0.01)] {
        for p in curve.iter() {
            ensure!(
                (p.sqrt_bound - sqrt_oracle(p.mdl_per_n)).abs() <= 1e-12,
                "sqrt bound at {}",
                p.mdl_per_n
            );
        }
        for p in curve.iter().step_by(25) {
            let want = fast_rate_oracle(p.mdl_per_n, emp);
            ensure!(
                (p.fast_rate_bound - want).abs() <= 1e-5,
                "fast-rate bound at emp {emp}, mdl/n {}: {} vs oracle {want}",
                p.mdl_per_n,
                p.fast_rate_bound
            );
        }
    }
    let cross = |c: &[bounds::BoundCurvePoint]| {
        let last_above = c.iter().rposition(|p| p.fast_rate_bound > p.sqrt_bound);
        match last_above {
            None => Some(0),
            Some(i) if i + 1 < c.len() => Some(i + 1),
            Some(_) => None,
        }
    };
    let i05 = cross(&c05).ok_or("fast-rate bound never drops below the square-root bound at 0.05")?;
    let i01 = cross(&c01).ok_or("fast-rate bound never drops below the square-root bound at 0.01")?;
    ensure!(
        bounds::crossover(&c05) == Some(grid[i05]),
        "library crossover {:?} vs {}",
        bounds::crossover(&c05),
        grid[i05]
    );
    for p in &c05[i05..] {
        ensure!(p.fast_rate_bound <= p.sqrt_bound, "above sqrt bound at {}", p.mdl_per_n);
    }
    for i in i05.max(i01)..grid.len() {
        let gap05 = c05[i].sqrt_bound - c05[i].fast_rate_bound;
        let gap01 = c01[i].sqrt_bound - c01[i].fast_rate_bound;
        ensure!(
            gap01 >= gap05,
            "gap does not widen at mdl/n {}: {gap01} < {gap05}",
            grid[i]
        );
    }
    Ok(format!(
        "crossover at mdl/n {} (emp 0.05), {} (emp 0.01); gap widens on all {} points above",
        grid[i05],
        grid[i01],
        grid.len() - i05.max(i01)
    ))
}

fn residual_small() -> Outcome {
    let gens: Vec<f64> = (1..=100).map(|i| i as f64 * 0.005).collect();
    let pts = bounds::residual_curve(0.05, fig_tv(), &gens).unwrap();
    let mut worst = 0.0f64;
    for p in &pts {
        let want = hc_grid(0.05, (0.05 + p.gen_error).min(1.0), 0.5 * fig_tv(), 1e-6);
        ensure!(
            (p.residual - want).abs() <= 1e-6,
            "residual at {}: {} vs {want}",
            p.gen_error,
            p.residual
        );
        ensure!(
            p.residual < p.gen_error / 5.0,
            "residual {} >= gen/5 at {}",
            p.residual,
            p.gen_error
        );
        worst = worst.max(p.residual / p.gen_error);
    }
    Ok(format!("max residual/gen {worst:.4} over {} points", pts.len()))
}

// ---------------------------------------------------------------------------
// Random Gaussian instances.

fn random_gaussian(r: &mut impl Rng, d: usize) -> DiagGaussian {
    DiagGaussian::new(
        (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
        (0..d).map(|_| r.random_range(0.2..2.0)).collect(),
    )
    .unwrap()
}

fn random_simplex(r: &mut impl Rng, m: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| -r.random_range(1e-9..1.0f64).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn random_mixture(r: &mut impl Rng, d: usize, m: usize) -> GaussianMixture {
    let comps = (0..m).map(|_| random_gaussian(r, d)).collect();
    GaussianMixture::new(random_simplex(r, m), comps).unwrap()
}

fn log_normal(mean: &[f64], var: &[f64], u: &[f64]) -> f64 {
    mean.iter()
        .zip(var)
        .zip(u)
        .map(|((m, v), x)| -0.5 * (2.0 * PI * v).ln() - (x - m) * (x - m) / (2.0 * v))
        .sum()
}

/// Monte-Carlo `KL(p || q)`: mean and standard error of `log p - log q`.
fn mc_kl_oracle(p: &DiagGaussian, q: &GaussianMixture, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, &[0xacc]);
    let d = p.dim();
    let sd: Vec<f64> = p.var().iter().map(|v| v.sqrt()).collect();
    let mut u = vec![0.0; d];
    let mut logs = vec![0.0; q.len()];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut r);
            u[j] = p.mean()[j] + sd[j] * z;
        }
        for (l, (w, c)) in logs.iter_mut().zip(q.weights().iter().zip(q.components())) {
            *l = w.ln() + log_normal(c.mean(), c.var(), &u);
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lq = mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let v = log_normal(p.mean(), p.var(), &u) - lq;
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

fn kl_sandwich() -> Outcome {
    const INSTANCES: usize = 200;
    const SAMPLES: usize = 1_000_000;
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(16);
    let results: Vec<Result<f64, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t..INSTANCES)
                        .step_by(threads)
                        .map(|i| {
                            let mut r = rng::stream(5, &[i as u64]);
                            let d = r.random_range(1..=8);
                            let m = r.random_range(1..=5);
                            let p = random_gaussian(&mut r, d);
                            let q = random_mixture(&mut r, d, m);
                            let lo = gaussian::d_prod(&p, &q, ProdVariant::Exact).unwrap();
                            let hi = gaussian::d_var(&p, &q, None).unwrap();
                            let (kl, se) = mc_kl_oracle(&p, &q, SAMPLES, i as u64);
                            if lo - 3.0 * se <= kl && kl <= hi + 3.0 * se {
                                Ok(hi - lo)
                            } else {
                                Err(format!(
                                    "instance {i} (d={d}, M={m}): d_prod {lo}, mc {kl} ± {se}, d_var {hi}"
                                ))
                            }
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let mut widest = 0.0f64;
    for res in results {
        widest = widest.max(res?);
    }
    Ok(format!(
        "{INSTANCES} instances, {SAMPLES} samples each, widest sandwich {widest:.3} nats"
    ))
}

// ---------------------------------------------------------------------------
// E/M-step optimality.

fn var_only(mode: Mode) -> UpdateHyper {
    UpdateHyper {
        mode,
        kl_estimate: KlEstimate::VarOnly,
        normalize_means: false,
        b_min: 1e-12,
        noise: NoiseSchedule::none(),
        ..UpdateHyper::default()
    }
}

/// Divergence of one latent to one component for the γ-fixed objective.
fn divergence(mode: Mode, pm: &[f64], pv: &[f64], qm: &[f64], qv: &[f64], eps: f64, scale: f64) -> f64 {
    match mode {
        Mode::Lossless => pm
            .iter()
            .zip(pv)
            .zip(qm.iter().zip(qv))
            .map(|((a, va), (b, vb))| 0.5 * ((vb / va).ln() + (va + (a - b) * (a - b)) / vb - 1.0))
            .sum(),
        Mode::Lossy => {
            let mean: f64 = pm.iter().zip(qm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / scale;
            let var: f64 = pv
                .iter()
                .zip(qv)
                .map(|(a, b)| {
                    let (a, b) = (a + eps, b + eps);
                    0.5 * (b / a).ln() + a / (2.0 * b) - 0.5
                })
                .sum();
            mean + var
        }
    }
}

/// Components of one class for each view: `[view][component] (mean, var)`.
type Params2 = Vec<Vec<(Vec<f64>, Vec<f64>)>>;

/// `sum_i sum_idx g[i, idx] (sum_k div_k - log a_idx)` over joint indices
/// with view 0 as the most significant digit.
fn joint_objective(
    mode: Mode,
    lat: &[(Array2<f64>, Array2<f64>)],
    gamma: &Array2<f64>,
    comps: &Params2,
    alpha: &[f64],
    eps: f64,
) -> f64 {
    let k = lat.len();
    let m = comps[0].len();
    let d = lat[0].0.ncols();
    let scale = ((k * d) as f64).sqrt();
    let mut acc = 0.0;
    for i in 0..gamma.nrows() {
        for idx in 0..gamma.ncols() {
            let mut rest = idx;
            let mut div = 0.0;
            for kv in (0..k).rev() {
                let j = rest % m;
                rest /= m;
                let (mu, var) = &lat[kv];
                let (qm, qv) = &comps[kv][j];
                div += divergence(mode, &mu.row(i).to_vec(), &var.row(i).to_vec(), qm, qv, eps, scale);
            }
            acc += gamma[[i, idx]] * (div - alpha[idx].ln());
        }
    }
    acc
}

fn perturb(r: &mut impl Rng, x: &[f64], scale: f64, positive: bool) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(r);
            if positive {
                v * (scale * z).exp()
            } else {
                v + scale * z
            }
        })
        .collect()
}

fn perturb_simplex(r: &mut impl Rng, a: &[f64], scale: f64) -> Vec<f64> {
    let p = perturb(r, a, scale, true);
    let s: f64 = p.iter().sum();
    p.into_iter().map(|x| x / s).collect()
}

/// Checks one M-step: means with the candidate variances held, variances
/// with the means the update used held (previous means for the lossless
/// variance), weights with both held; 100 perturbations in total.
fn check_m_step(
    r: &mut impl Rng,
    mode: Mode,
    lat: &[(Array2<f64>, Array2<f64>)],
    gamma: &Array2<f64>,
    prev: &Params2,
    cand: &Params2,
    alpha: &[f64],
    eps: f64,
) -> Result<(), String> {
    let f = |c: &Params2, a: &[f64]| joint_objective(mode, lat, gamma, c, a, eps);
    let var_means: Params2 = match mode {
        Mode::Lossless => prev
            .iter()
            .zip(cand)
            .map(|(pv, cv)| pv.iter().zip(cv).map(|(p, c)| (p.0.clone(), c.1.clone())).collect())
            .collect(),
        Mode::Lossy => cand.clone(),
    };
    let base_mean = f(cand, alpha);
    let base_var = f(&var_means, alpha);
    for t in 0..100 {
        let scale = 10f64.powf(r.random_range(-3.0..-1.0));
        let (value, base, what) = match t % 3 {
            0 => {
                let c: Params2 = cand
                    .iter()
                    .map(|v| {
                        v.iter()
                            .map(|(m, s)| (perturb(r, m, scale, false), s.clone()))
                            .collect()
                    })
                    .collect();
                (f(&c, alpha), base_mean, "means")
            }
            1 => {
                let c: Params2 = var_means
                    .iter()
                    .map(|v| v.iter().map(|(m, s)| (m.clone(), perturb(r, s, scale, true))).collect())
                    .collect();
                (f(&c, alpha), base_var, "variances")
            }
            _ => (f(cand, &perturb_simplex(r, alpha, scale)), base_mean, "weights"),
        };
        if value < base - 1e-9 {
            return Err(format!(
                "{mode:?}: perturbed {what} improve the objective by {}",
                base - value
            ));
        }
    }
    Ok(())
}

fn random_latents(r: &mut impl Rng, b: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
    (
        Array2::from_shape_fn((b, d), |_| r.random_range(-2.0..2.0)),
        Array2::from_shape_fn((b, d), |_| r.random_range(0.3..1.5)),
    )
}

fn random_gamma(r: &mut impl Rng, b: usize, size: usize) -> Array2<f64> {
    let mut g = Array2::zeros((b, size));
    for i in 0..b {
        let row = random_simplex(r, size);
        for j in 0..size {
            g[[i, j]] = 0.5 * row[j] + 0.5 / size as f64;
        }
    }
    g
}

fn em_optimality() -> Outcome {
    let mut r = rng::stream(6, &[]);
    // E-step: 100 instances, 50 simplex alternatives each.
    for inst in 0..100 {
        let d = r.random_range(1..=6);
        let m = r.random_range(2..=5);
        let q = random_mixture(&mut r, d, m);
        let bank = PriorBankSingle::from_mixtures(vec![q.clone()], var_only(Mode::Lossless)).unwrap();
        let p = random_gaussian(&mut r, d);
        let mu = Array2::from_shape_vec((1, d), p.mean().to_vec()).unwrap();
        let sigma = Array2::from_shape_vec((1, d), p.var().iter().map(|v| v.sqrt()).collect()).unwrap();
        let gamma = bank.e_step(&LatentBatch::new(mu, sigma, vec![0]).unwrap()).unwrap();
        let g = gamma.row(0).to_vec();
        let best = gaussian::d_var(&p, &q, Some(&g)).unwrap();
        for _ in 0..50 {
            let alt = random_simplex(&mut r, m);
            let v = gaussian::d_var(&p, &q, Some(&alt)).unwrap();
            ensure!(
                best <= v + 1e-9,
                "instance {inst}: alternative {v} beats closed form {best}"
            );
        }
    }
    // M-step, single view and K = 2 joint, lossless and lossy.
    let mut checked = 0;
    for mode in [Mode::Lossless, Mode::Lossy] {
        for inst in 0..10 {
            let d = r.random_range(1..=4);
            let m = r.random_range(2..=4);
            let b = 8;
            let hyper = var_only(mode);

            let q = random_mixture(&mut r, d, m);
            let bank = PriorBankSingle::from_mixtures(vec![q.clone()], hyper).unwrap();
            let (mu, sigma) = random_latents(&mut r, b, d);
            let batch = LatentBatch::new(mu.clone(), sigma.clone(), vec![0; b]).unwrap();
            let gamma = random_gamma(&mut r, b, m);
            let cand = bank.m_step(&batch, &gamma).unwrap();
            let prev: Params2 = vec![q
                .components()
                .iter()
                .map(|c| (c.mean().to_vec(), c.var().to_vec()))
                .collect()];
            let new: Params2 = vec![(0..m)
                .map(|j| (cand.views[0].means[0][j].clone(), cand.views[0].vars[0][j].clone()))
                .collect()];
            let lat = vec![(mu, sigma.mapv(|s| s * s))];
            check_m_step(
                &mut r,
                mode,
                &lat,
                &gamma,
                &prev,
                &new,
                &cand.weights[0],
                hyper.eps_lossy,
            )
            .map_err(|e| format!("single view, instance {inst}: {e}"))?;

            let comps: Vec<Vec<DiagGaussian>> = (0..2)
                .map(|_| (0..m).map(|_| random_gaussian(&mut r, d)).collect())
                .collect();
            let joint = JointWeights {
                m,
                k: 2,
                weights: vec![random_simplex(&mut r, m * m)],
            };
            let views = comps
                .iter()
                .map(|c| ViewBank {
                    components: vec![c.clone()],
                    eps: hyper.eps_lossy,
                })
                .collect();
            let prior = ProductMixturePrior::from_parts(joint, views, hyper).unwrap();
            let lat2: Vec<(Array2<f64>, Array2<f64>)> = (0..2).map(|_| random_latents(&mut r, b, d)).collect();
            let batch = MultiLatentBatch::new(
                lat2.iter()
                    .map(|(mu, s)| ViewLatents {
                        mu: mu.clone(),
                        sigma: s.clone(),
                    })
                    .collect(),
                vec![0; b],
            )
            .unwrap();
            let gamma = random_gamma(&mut r, b, m * m);
            let cand = prior.m_step(&batch, &gamma).unwrap();
            let prev: Params2 = comps
                .iter()
                .map(|c| c.iter().map(|g| (g.mean().to_vec(), g.var().to_vec())).collect())
                .collect();
            let new: Params2 = cand
                .views
                .iter()
                .map(|v| (0..m).map(|j| (v.means[0][j].clone(), v.vars[0][j].clone())).collect())
                .collect();
            let lat2v: Vec<_> = lat2.into_iter().map(|(mu, s)| (mu, s.mapv(|x| x * x))).collect();
            check_m_step(
                &mut r,
                mode,
                &lat2v,
                &gamma,
                &prev,
                &new,
                &cand.weights[0],
                hyper.eps_lossy,
            )
            .map_err(|e| format!("joint K=2, instance {inst}: {e}"))?;
            checked += 2;
        }
    }
    Ok(format!(
        "E-step 100 x 50 alternatives; M-step {checked} instances x 100 perturbations"
    ))
}

// ---------------------------------------------------------------------------
// Gradient checks.

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn grad_cfg(kind: RegularizerKind, mode: Mode, estimate: KlEstimate) -> TrainConfig {
    TrainConfig {
        regularizer: kind,
        lambda: 0.7,
        batch_size: 8,
        epochs: 1,
        latent_dim: 3,
        hidden: vec![5],
        components: 2,
        samples_train: 2,
        prior: UpdateHyper {
            mode,
            kl_estimate: estimate,
            ..UpdateHyper::default()
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

fn gradient_cases() -> Vec<(RegularizerKind, Mode, KlEstimate, usize)> {
    let mut out = Vec::new();
    for k in 1..=3 {
        for estimate in [KlEstimate::AvgVarProd, KlEstimate::VarOnly] {
            out.push((RegularizerKind::Vib, Mode::Lossless, estimate, k));
            out.push((RegularizerKind::Cdvib, Mode::Lossless, estimate, k));
            out.push((RegularizerKind::MarginalsOnly, Mode::Lossless, estimate, k));
            for mode in [Mode::Lossless, Mode::Lossy] {
                if k == 1 {
                    out.push((RegularizerKind::GmMdl, mode, estimate, k));
                }
                out.push((RegularizerKind::GpmMdl, mode, estimate, k));
            }
        }
    }
    out
}

fn regularizer_gradient(prior: &PriorEngine, batch: &MultiLatentBatch) -> Result<(), String> {
    let reg = prior.regularizer(batch).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let value = |b: &MultiLatentBatch| prior.regularizer(b).unwrap().value;
    for kv in 0..batch.num_views() {
        for (which, analytic) in [("mu", &reg.grad_mu[kv]), ("sigma", &reg.grad_sigma[kv])] {
            for ((i, j), &g) in analytic.indexed_iter() {
                let shifted = |delta: f64| {
                    let mut b = batch.clone();
                    let t = if which == "mu" {
                        &mut b.views[kv].mu
                    } else {
                        &mut b.views[kv].sigma
                    };
                    t[[i, j]] += delta;
                    value(&b)
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                if rel_err(fd, g) >= 1e-3 && (fd - g).abs() >= 1e-8 {
                    return Err(format!("d/d{which}[{kv}][{i},{j}]: fd {fd}, analytic {g}"));
                }
            }
        }
    }
    Ok(())
}

fn loss_gradient(trainer: &Trainer, batch: &MultiViewData, cfg: &TrainConfig) -> Result<(), String> {
    let views = batch.num_views();
    let xi = step_noise(batch.len(), cfg.samples_train, cfg.latent_dim, views, 11);
    let (_, grads, _) = loss_and_grads(
        &trainer.models,
        &trainer.prior,
        batch,
        &xi,
        cfg.lambda,
        cfg.samples_train,
    )
    .map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.params().concat();
    let f = |m: &Models| {
        loss_and_grads(m, &trainer.prior, batch, &xi, cfg.lambda, cfg.samples_train)
            .unwrap()
            .0
            .loss
    };
    let h = 1e-5;
    let mut k = 0;
    for t in 0..trainer.models.params().len() {
        for j in 0..trainer.models.params()[t].len() {
            let mut a = trainer.models.clone();
            a.params_mut()[t][j] += h;
            let mut b = trainer.models.clone();
            b.params_mut()[t][j] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            if rel_err(fd, analytic[k]) >= 1e-3 && (fd - analytic[k]).abs() >= 1e-8 {
                return Err(format!("tensor {t} entry {j}: fd {fd}, analytic {}", analytic[k]));
            }
            k += 1;
        }
    }
    Ok(())
}

fn gradient_checks() -> Outcome {
    let cases = gradient_cases();
    for &(kind, mode, estimate, k) in &cases {
        let label = format!("{kind} {mode:?} {estimate:?} K={k}");
        let data = generate(&SynthConfig {
            n: 40,
            classes: 3,
            dim: 6,
            views: vec![ViewSpec::full(None); k],
            separation: 3.0,
            overlap: 0.1,
            seed: 1,
        })
        .unwrap()
        .train;
        let cfg = grad_cfg(kind, mode, estimate);
        let trainer = Trainer::new(cfg.clone(), &data).map_err(|e| format!("{label}: {e}"))?;
        let batch = data.select(&[0, 1]);
        loss_gradient(&trainer, &batch, &cfg).map_err(|e| format!("{label}, full loss: {e}"))?;

        let passes = trainer
            .models
            .encoders
            .iter()
            .zip(&batch.views)
            .map(|(e, x)| e.forward(x))
            .collect::<Result<Vec<_>, _>>()
            .unwrap();
        let latents = training::latents_of(&passes, &batch.labels).unwrap();
        regularizer_gradient(&trainer.prior, &latents).map_err(|e| format!("{label}, regularizer: {e}"))?;
    }
    Ok(format!(
        "{} configurations, regularizer and full loss, 2-sample batches",
        cases.len()
    ))
}

// ---------------------------------------------------------------------------

fn redundancy() -> Outcome {
    let mut r = rng::stream(8, &[]);
    let mut min_gap = f64::INFINITY;
    for inst in 0..50 {
        let clusters = 2 + inst % 3;
        let d = r.random_range(1..=4);
        let mu: Vec<Vec<f64>> = (0..clusters)
            .map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let sd: Vec<Vec<f64>> = (0..clusters)
            .map(|_| (0..d).map(|_| r.random_range(0.3..1.5)).collect())
            .collect();
        let w = random_simplex(&mut r, clusters);
        let assignment: Vec<usize> = (0..12).map(|_| r.random_range(0..clusters)).collect();
        let (r1, r2) = redundancy_gap(&mu, &sd, &w, &assignment, var_only(Mode::Lossless)).unwrap();

        // Oracle: each latent equals its own cluster component.
        let kl = |a: usize, b: usize| -> f64 {
            (0..d)
                .map(|j| {
                    let (va, vb) = (sd[a][j] * sd[a][j], sd[b][j] * sd[b][j]);
                    0.5 * ((vb / va).ln() + (va + (mu[a][j] - mu[b][j]).powi(2)) / vb - 1.0)
                })
                .sum()
        };
        let nlse = |i: usize, factor: f64| -> f64 {
            -(0..clusters)
                .map(|q| w[q] * (-factor * kl(i, q)).exp())
                .sum::<f64>()
                .ln()
        };
        let o1: f64 = assignment.iter().map(|&a| 2.0 * nlse(a, 1.0)).sum();
        let o2: f64 = assignment.iter().map(|&a| nlse(a, 2.0)).sum();
        ensure!(
            (r1 - o1).abs() <= 1e-9 * o1.abs().max(1.0),
            "instance {inst}: R1 {r1} vs oracle {o1}"
        );
        ensure!(
            (r2 - o2).abs() <= 1e-9 * o2.abs().max(1.0),
            "instance {inst}: R2 {r2} vs oracle {o2}"
        );
        ensure!(r2 <= r1 + 1e-12, "instance {inst}: R2 {r2} > R1 {r1}");
        min_gap = min_gap.min(r1 - r2);
    }
    let (r1, r2) = redundancy_gap(
        &[vec![0.4, -1.0]],
        &[vec![0.8, 1.2]],
        &[1.0],
        &[0; 7],
        var_only(Mode::Lossless),
    )
    .unwrap();
    ensure!((r1 - r2).abs() <= 1e-12, "R=1: R1 {r1} != R2 {r2}");
    Ok(format!("50 constructions, min R1 - R2 {min_gap:.4}; R=1 equal"))
}

fn sim_data(views: usize, n: usize) -> MultiViewData {
    generate(&SynthConfig {
        n,
        classes: 3,
        dim: 8,
        views: vec![ViewSpec::full(Some(LevelName::Light)); views],
        separation: 3.0,
        overlap: 0.1,
        seed: 5,
    })
    .unwrap()
    .train
}

fn sim_cfg(components: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        regularizer: RegularizerKind::GpmMdl,
        lambda: 0.5,
        batch_size,
        epochs: 1,
        latent_dim: 3,
        hidden: vec![8],
        components,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn prior_params(p: &ProductMixturePrior) -> Vec<f64> {
    let mut out: Vec<f64> = p.joint().weights.concat();
    for v in p.views() {
        for g in v.components.iter().flatten() {
            out.extend_from_slice(g.mean());
            out.extend_from_slice(g.var());
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn round_bytes(views: usize, b: usize, m: usize) -> usize {
    let data = sim_data(views, 64);
    let mono = Trainer::new(sim_cfg(m, b), &data).unwrap();
    let mut sim = Simulator::from_trainer(&mono).unwrap();
    sim.run_round(&data.select(&(0..b).collect::<Vec<_>>()))
        .unwrap()
        .wire_bytes
}

fn distributed_equivalence() -> Outcome {
    let data = sim_data(3, 200);
    let mut mono = Trainer::new(sim_cfg(2, 16), &data).unwrap();
    let mut sim = Simulator::from_trainer(&mono).unwrap();
    let batches = training::epoch_batches(17, data.len(), 16, 0);
    let mut worst = 0.0f64;
    for (round, idx) in batches.iter().cycle().take(20).enumerate() {
        let batch = data.select(idx);
        mono.train_step(&batch).unwrap();
        sim.run_round(&batch).unwrap();
        let PriorEngine::Joint(p) = &mono.prior else {
            unreachable!()
        };
        let dm = max_diff(&mono.models.params().concat(), &sim.models().params().concat());
        let dp = max_diff(&prior_params(p), &prior_params(&sim.prior().unwrap()));
        ensure!(
            dm <= 1e-9 && dp <= 1e-9,
            "round {round}: model diff {dm}, prior diff {dp}"
        );
        worst = worst.max(dm).max(dp);
    }
    // Second differences of wire bytes vanish along each of K, b and M.
    let along = |f: &dyn Fn(usize) -> usize, xs: [usize; 4]| -> Vec<usize> { xs.iter().map(|&x| f(x)).collect() };
    let linear = |v: &[usize]| v.windows(3).all(|w| w[2] + w[0] == 2 * w[1]);
    let by_m = along(&|m| round_bytes(3, 16, m), [2, 3, 4, 5]);
    let by_b = along(&|b| round_bytes(3, b, 3), [8, 12, 16, 20]);
    let by_k = along(&|k| round_bytes(k, 16, 3), [1, 2, 3, 4]);
    ensure!(linear(&by_m), "bytes not linear in M: {by_m:?}");
    ensure!(linear(&by_b), "bytes not linear in b: {by_b:?}");
    ensure!(linear(&by_k), "bytes not linear in K: {by_k:?}");
    Ok(format!(
        "20 rounds K=3, max diff {worst:.1e}; bytes by M {by_m:?}, by b {by_b:?}, by K {by_k:?}"
    ))
}

fn directional_experiment() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (views, kind) in [(2, RegularizerKind::GpmMdl), (1, RegularizerKind::GmMdl)] {
        let mut cfg = ExperimentConfig::default();
        cfg.data.views = vec![ViewSpec::full(Some(LevelName::Medium)); views];
        cfg.regularizers = vec![RegularizerKind::None, kind];
        let results = run_sweep(&cfg, LogBase::Mixed, |_, _| Ok(())).map_err(|e| e.to_string())?;
        let summary = summarize(&results).map_err(|e| e.to_string())?;
        let base = summary.best_for(RegularizerKind::None).ok_or("no baseline row")?;
        let best = summary.best_for(kind).ok_or("no regularized row")?;
        ok &= best.ghost_accuracy_mean >= base.ghost_accuracy_mean;
        lines.push(format!(
            "K={views}: {} (lambda {}) {:.4} vs no reg. {:.4}",
            kind.label(),
            best.lambda,
            best.ghost_accuracy_mean,
            base.ghost_accuracy_mean
        ));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn prior_symmetry() -> Outcome {
    let mut checked = 0;
    for seed in 0..5u64 {
        let mut r = rng::stream(11, &[seed]);
        let (b, d, m, classes) = (24, 3, 3, 3);
        let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
        let lat: Vec<ViewLatents> = (0..2)
            .map(|_| {
                let (mu, sigma) = random_latents(&mut r, b, d);
                ViewLatents { mu, sigma }
            })
            .collect();
        let batch = MultiLatentBatch::new(lat, labels.clone()).unwrap();
        let joint = ProductMixturePrior::init(&batch, classes, m, UpdateHyper::default(), seed).unwrap();
        let single = PriorBankSingle::init(&batch.view_batch(0), classes, m, UpdateHyper::default(), seed).unwrap();
        let samples: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((b, d), |_| r.random_range(-3.0..3.0)))
            .collect();
        let base_joint = joint.prior_log_density(&samples, &labels).unwrap();
        let base_single = single.prior_log_density(&samples[0], &labels).unwrap();
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..b).collect();
            for c in 0..classes {
                let mut idx: Vec<usize> = (0..b).filter(|&i| labels[i] == c).collect();
                let orig = idx.clone();
                idx.shuffle(&mut r);
                for (o, n) in orig.into_iter().zip(idx) {
                    perm[o] = n;
                }
            }
            let permuted: Vec<Array2<f64>> = samples
                .iter()
                .map(|s| Array2::from_shape_fn((b, d), |(i, j)| s[[perm[i], j]]))
                .collect();
            let pj = joint.prior_log_density(&permuted, &labels).unwrap();
            let ps = single.prior_log_density(&permuted[0], &labels).unwrap();
            ensure!((pj - base_joint).abs() <= 1e-9, "joint prior: {pj} vs {base_joint}");
            ensure!(
                (ps - base_single).abs() <= 1e-9,
                "single-view prior: {ps} vs {base_single}"
            );
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} label-preserving permutations, single-view and K=2 priors"
    ))
}
