//! Per-class Gaussian mixture prior bank for a single view.
//!
//! One mixture per class label. Each optimization step runs one E-step, one
//! closed-form M-step and a moving-average update with decaying noise; the
//! regularizer treats the bank as a constant.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, DiagGaussian, GaussianMixture, VAR_FLOOR};
use crate::mixture::{self, Candidates, ViewGeom};
use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Divergence of the encoder's own latent distribution.
    #[default]
    Lossless,
    /// Divergence of a perturbed latent with a fixed mean spread and an
    /// `eps` variance offset.
    Lossy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimate {
    /// Variational term only.
    VarOnly,
    /// Mean of the variational and product-integral terms.
    #[default]
    AvgVarProd,
}

/// Noise variances `(mean0, var0) * decay^t` added to the prior parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub mean0: f64,
    pub var0: f64,
    pub decay: f64,
}

impl NoiseSchedule {
    pub fn none() -> Self {
        Self {
            mean0: 0.0,
            var0: 0.0,
            decay: 1.0,
        }
    }

    pub fn at(&self, t: u64) -> (f64, f64) {
        let f = self.decay.powf(t as f64);
        (self.mean0 * f, self.var0 * f)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            mean0: 1e-4,
            var0: 1e-4,
            decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateHyper {
    pub eta_mean: f64,
    pub eta_var: f64,
    pub eta_weight: f64,
    pub noise: NoiseSchedule,
    pub eps_lossy: f64,
    pub mode: Mode,
    pub kl_estimate: KlEstimate,
    /// Components with less responsibility mass keep their parameters.
    pub b_min: f64,
    /// Rescale component means to norm `sqrt(d)` after each lossy update.
    pub normalize_means: bool,
}

impl Default for UpdateHyper {
    fn default() -> Self {
        Self {
            eta_mean: 0.5,
            eta_var: 0.5,
            eta_weight: 0.5,
            noise: NoiseSchedule::default(),
            eps_lossy: 1.0,
            mode: Mode::Lossless,
            kl_estimate: KlEstimate::AvgVarProd,
            b_min: 1e-3,
            normalize_means: true,
        }
    }
}

impl UpdateHyper {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("eta_mean", self.eta_mean),
            ("eta_var", self.eta_var),
            ("eta_weight", self.eta_weight),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain {
                    what,
                    value: v,
                    range: "[0, 1]",
                });
            }
        }
        let n = self.noise;
        if !(n.mean0 >= 0.0 && n.var0 >= 0.0 && n.decay >= 0.0) || !n.mean0.is_finite() || !n.var0.is_finite() {
            return Err(Error::Precondition(
                "noise schedule must be finite and nonnegative".into(),
            ));
        }
        if !(self.eps_lossy > 0.0) || !self.eps_lossy.is_finite() {
            return Err(Error::Domain {
                what: "eps_lossy",
                value: self.eps_lossy,
                range: "(0, inf)",
            });
        }
        if !(self.b_min >= 0.0) {
            return Err(Error::Domain {
                what: "b_min",
                value: self.b_min,
                range: "[0, inf)",
            });
        }
        Ok(())
    }

    /// Full replacement by the candidates, no noise.
    pub fn replace() -> Self {
        Self {
            eta_mean: 1.0,
            eta_var: 1.0,
            eta_weight: 1.0,
            noise: NoiseSchedule::none(),
            ..Self::default()
        }
    }
}

/// Per-sample latent parameters of one view with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LatentBatch {
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::Dimension {
                expected: mu.len(),
                got: sigma.len(),
                context: "latent sigma",
            });
        }
        if mu.nrows() != labels.len() {
            return Err(Error::Dimension {
                expected: mu.nrows(),
                got: labels.len(),
                context: "latent labels",
            });
        }
        if mu.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent batch".into()));
        }
        let floor = VAR_FLOOR.sqrt();
        let sigma = sigma.mapv(|s| s.abs().max(floor));
        Ok(Self {
            mu: mu.as_standard_layout().into_owned(),
            sigma: sigma.as_standard_layout().into_owned(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

/// Regularizer value with gradients per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularization {
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// One `b x d` matrix per view.
    pub grad_mu: Vec<Array2<f64>>,
    pub grad_sigma: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorBankSingle {
    mixtures: Vec<GaussianMixture>,
    hyper: UpdateHyper,
    /// Classes that had no samples at initialization.
    absent: Vec<bool>,
}

impl PriorBankSingle {
    /// k-means++ initialization from a (preferably enlarged) batch.
    pub fn init(latents: &LatentBatch, classes: usize, m: usize, hyper: UpdateHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        check_labels(&latents.labels, classes)?;
        if m == 0 {
            return Err(Error::Precondition("need at least one component".into()));
        }
        let d = latents.dim();
        let mut mixtures = Vec::with_capacity(classes);
        let mut absent = vec![false; classes];
        for (c, flag) in absent.iter_mut().enumerate() {
            let idx: Vec<usize> = (0..latents.len()).filter(|&i| latents.labels[i] == c).collect();
            if idx.is_empty() {
                *flag = true;
                mixtures.push(GaussianMixture::new(
                    vec![1.0 / m as f64; m],
                    vec![DiagGaussian::standard(d); m],
                )?);
                continue;
            }
            let mut rng = rng::stream(seed, &[c as u64]);
            let mu = &latents.mu;
            let chosen = mixture::kmeanspp(
                idx.len(),
                m,
                |a, b| sq_dist(mixture::row(mu, idx[a]), mixture::row(mu, idx[b])),
                &mut rng,
            );
            let mut comps = Vec::with_capacity(m);
            for &p in &chosen {
                let mut mean = mixture::row(mu, idx[p]).to_vec();
                if hyper.mode == Mode::Lossy && hyper.normalize_means {
                    mixture::normalize_mean(&mut mean);
                }
                comps.push(mean);
            }
            let comps = comps
                .into_iter()
                .map(|mean| DiagGaussian::new(mean, mixture::init_vars(d, &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            mixtures.push(GaussianMixture::new(vec![1.0 / m as f64; m], comps)?);
        }
        Ok(Self {
            mixtures,
            hyper,
            absent,
        })
    }

    pub fn from_mixtures(mixtures: Vec<GaussianMixture>, hyper: UpdateHyper) -> Result<Self> {
        hyper.validate()?;
        let first = mixtures
            .first()
            .ok_or_else(|| Error::Precondition("bank needs at least one class".into()))?;
        let (m, d) = (first.len(), first.dim());
        if let Some(bad) = mixtures.iter().find(|x| x.len() != m || x.dim() != d) {
            return Err(Error::Dimension {
                expected: m * d,
                got: bad.len() * bad.dim(),
                context: "class mixtures",
            });
        }
        let absent = vec![false; mixtures.len()];
        Ok(Self {
            mixtures,
            hyper,
            absent,
        })
    }

    pub fn mixtures(&self) -> &[GaussianMixture] {
        &self.mixtures
    }

    pub fn hyper(&self) -> &UpdateHyper {
        &self.hyper
    }

    pub fn set_hyper(&mut self, hyper: UpdateHyper) -> Result<()> {
        hyper.validate()?;
        self.hyper = hyper;
        Ok(())
    }

    pub fn absent_classes(&self) -> &[bool] {
        &self.absent
    }

    pub fn num_classes(&self) -> usize {
        self.mixtures.len()
    }

    pub fn num_components(&self) -> usize {
        self.mixtures[0].len()
    }

    pub fn dim(&self) -> usize {
        self.mixtures[0].dim()
    }

    fn geom(&self) -> ViewGeom {
        ViewGeom {
            mode: self.hyper.mode,
            estimate: self.hyper.kl_estimate,
            eps: self.hyper.eps_lossy,
            scale: (self.dim() as f64).sqrt(),
        }
    }

    fn comps(&self) -> Vec<&[DiagGaussian]> {
        self.mixtures.iter().map(|x| x.components()).collect()
    }

    fn log_alpha(&self) -> Vec<Vec<f64>> {
        self.mixtures
            .iter()
            .map(|x| x.weights().iter().map(|w| w.ln()).collect())
            .collect()
    }

    fn check(&self, latents: &LatentBatch) -> Result<()> {
        check_labels(&latents.labels, self.num_classes())?;
        if latents.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: latents.dim(),
                context: "latent dimension",
            });
        }
        Ok(())
    }

    fn passes(&self, latents: &LatentBatch, keep_rows: bool) -> Passes {
        let geom = self.geom();
        let var = mixture::latent_var(&latents.sigma);
        let comps = self.comps();
        let stats = mixture::view_stats(&geom, &latents.mu, &var, &latents.labels, &comps);
        let la = self.log_alpha();
        let m = self.num_components();
        let gamma = mixture::joint_softmax(&la, m, &latents.labels, &[&stats.div], -1.0, keep_rows);
        let beta = stats
            .log_t
            .as_ref()
            .map(|lt| mixture::joint_softmax(&la, m, &latents.labels, &[lt], 1.0, keep_rows));
        Passes {
            var,
            stats,
            gamma,
            beta,
        }
    }

    /// Responsibilities `softmax_m(log a_{y_i,m} - D(P_i || Q_{y_i,m}))`.
    pub fn e_step(&self, latents: &LatentBatch) -> Result<Array2<f64>> {
        self.check(latents)?;
        let p = self.passes(latents, false);
        Ok(p.gamma.marginals.into_iter().next().expect("one view"))
    }

    /// Product-integral weights `softmax_m(log a + log t)`; `None` under the
    /// variational-only estimate.
    pub fn prod_weights(&self, latents: &LatentBatch) -> Result<Option<Array2<f64>>> {
        self.check(latents)?;
        let p = self.passes(latents, false);
        Ok(p.beta.map(|b| b.marginals.into_iter().next().expect("one view")))
    }

    /// Closed-form candidates for fixed responsibilities `gamma`.
    pub fn m_step(&self, latents: &LatentBatch, gamma: &Array2<f64>) -> Result<Candidates> {
        self.check(latents)?;
        if gamma.dim() != (latents.len(), self.num_components()) {
            return Err(Error::Dimension {
                expected: latents.len() * self.num_components(),
                got: gamma.len(),
                context: "responsibilities",
            });
        }
        let p = self.passes(latents, false);
        let beta = p.beta.as_ref().map(|b| &b.marginals[0]);
        let geom = self.geom();
        let view = mixture::view_m_step(
            &geom,
            &latents.mu,
            &p.var,
            &latents.labels,
            &self.comps(),
            gamma,
            beta,
            self.hyper.b_min,
        );
        let prev: Vec<Vec<f64>> = self.mixtures.iter().map(|x| x.weights().to_vec()).collect();
        let (weights, present) = mixture::weight_candidates(&prev, &latents.labels, gamma, beta);
        Ok(Candidates {
            views: vec![view],
            weights,
            present,
        })
    }

    /// Moving-average update towards `cand` with iteration-`t` noise.
    pub fn apply_update(&mut self, cand: &Candidates, t: u64, seed: u64) -> Result<()> {
        self.apply_update_as_view(cand, t, seed, 0)
    }

    /// [`Self::apply_update`] with the noise streams of view `view`, so a
    /// bank can stand in for one view of a multi-view model.
    pub fn apply_update_as_view(&mut self, cand: &Candidates, t: u64, seed: u64, view: usize) -> Result<()> {
        let mut comps: Vec<Vec<DiagGaussian>> = self.mixtures.iter().map(|x| x.components().to_vec()).collect();
        let mut weights: Vec<Vec<f64>> = self.mixtures.iter().map(|x| x.weights().to_vec()).collect();
        mixture::blend_view(&self.hyper, &mut comps, &cand.views[0], &cand.present, view, t, seed)?;
        mixture::blend_weights(&self.hyper, &mut weights, &cand.weights, &cand.present);
        self.mixtures = weights
            .into_iter()
            .zip(comps)
            .map(|(w, c)| GaussianMixture::new(w, c))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// One E-step, M-step and update on the batch.
    pub fn step(&mut self, latents: &LatentBatch, t: u64, seed: u64) -> Result<Candidates> {
        let gamma = self.e_step(latents)?;
        let cand = self.m_step(latents, &gamma)?;
        self.apply_update(&cand, t, seed)?;
        Ok(cand)
    }

    /// Regularizer value summed over the batch, with gradients with respect
    /// to the latent means and standard deviations.
    pub fn regularizer(&self, latents: &LatentBatch) -> Result<Regularization> {
        self.check(latents)?;
        let p = self.passes(latents, false);
        let per_sample = mixture::sample_values(self.hyper.kl_estimate, &p.gamma, p.beta.as_ref(), &p.stats.entropy);
        let (g_mu, g_sigma) = mixture::view_gradient(
            &self.geom(),
            &latents.mu,
            &latents.sigma,
            &p.var,
            &latents.labels,
            &self.comps(),
            &p.gamma.marginals[0],
            p.beta.as_ref().map(|b| &b.marginals[0]),
            1.0,
        );
        Ok(Regularization {
            value: per_sample.iter().sum(),
            per_sample,
            grad_mu: vec![g_mu],
            grad_sigma: vec![g_sigma],
        })
    }

    /// `sum_i log Q_{y_i}(u_i)`.
    pub fn prior_log_density(&self, samples: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        check_labels(labels, self.num_classes())?;
        if samples.nrows() != labels.len() || samples.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: labels.len() * self.dim(),
                got: samples.len(),
                context: "prior samples",
            });
        }
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &c)| self.mixtures[c].log_density(&samples.row(i).to_vec()))
            .sum())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.layout())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let layout: BankLayout = serde_json::from_str(s)?;
        let mixtures = layout
            .classes
            .into_iter()
            .map(ClassLayout::into_mixture)
            .collect::<Result<Vec<_>>>()?;
        Self::from_mixtures(mixtures, layout.hyper)
    }

    fn layout(&self) -> BankLayout {
        BankLayout {
            hyper: self.hyper,
            classes: self.mixtures.iter().map(ClassLayout::from_mixture).collect(),
        }
    }
}

struct Passes {
    var: Array2<f64>,
    stats: mixture::ViewStats,
    gamma: mixture::JointRows,
    beta: Option<mixture::JointRows>,
}

/// Checkpoint layout: hyperparameters, then per class the weights, means and
/// variances of every component.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankLayout {
    hyper: UpdateHyper,
    classes: Vec<ClassLayout>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ClassLayout {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl ClassLayout {
    fn from_mixture(m: &GaussianMixture) -> Self {
        Self {
            weights: m.weights().to_vec(),
            means: m.components().iter().map(|c| c.mean().to_vec()).collect(),
            variances: m.components().iter().map(|c| c.var().to_vec()).collect(),
        }
    }

    fn into_mixture(self) -> Result<GaussianMixture> {
        let comps = self
            .means
            .into_iter()
            .zip(self.variances)
            .map(|(m, v)| DiagGaussian::new(m, v))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(self.weights, comps)
    }
}

/// KL of every latent to the standard normal, with gradients.
pub fn vib_regularizer(latents: &LatentBatch) -> Regularization {
    let (b, d) = latents.mu.dim();
    let var = mixture::latent_var(&latents.sigma);
    let zero = vec![0.0; d];
    let one = vec![1.0; d];
    let mut per_sample = Vec::with_capacity(b);
    let mut g_mu = Array2::zeros((b, d));
    let mut g_sigma = Array2::zeros((b, d));
    let mut gm = vec![0.0; d];
    let mut gv = vec![0.0; d];
    for i in 0..b {
        let (pm, pv) = (mixture::row(&latents.mu, i), mixture::row(&var, i));
        per_sample.push(gaussian::kl_term(pm, pv, &zero, &one));
        gm.iter_mut().for_each(|x| *x = 0.0);
        gv.iter_mut().for_each(|x| *x = 0.0);
        gaussian::kl_grad(pm, pv, &zero, &one, 1.0, &mut gm, &mut gv);
        let sg = mixture::row(&latents.sigma, i);
        for j in 0..d {
            g_mu[[i, j]] = gm[j];
            g_sigma[[i, j]] = if sg[j] * sg[j] > VAR_FLOOR {
                2.0 * sg[j] * gv[j]
            } else {
                0.0
            };
        }
    }
    Regularization {
        value: per_sample.iter().sum(),
        per_sample,
        grad_mu: vec![g_mu],
        grad_sigma: vec![g_sigma],
    }
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Precondition(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_batch(b: usize, d: usize, classes: usize, seed: u64) -> LatentBatch {
        let mut r = rng::stream(seed, &[]);
        let mu = Array2::from_shape_fn((b, d), |_| r.random_range(-2.0..2.0));
        let sigma = Array2::from_shape_fn((b, d), |_| r.random_range(0.3..1.5));
        let labels = (0..b).map(|i| i % classes).collect();
        LatentBatch::new(mu, sigma, labels).unwrap()
    }

    fn hyper(mode: Mode, est: KlEstimate) -> UpdateHyper {
        UpdateHyper {
            mode,
            kl_estimate: est,
            ..UpdateHyper::default()
        }
    }

    #[test]
    fn single_component_init_picks_a_class_sample() {
        let batch = random_batch(12, 3, 2, 1);
        let bank = PriorBankSingle::init(&batch, 2, 1, UpdateHyper::default(), 5).unwrap();
        for c in 0..2 {
            let mean = bank.mixtures()[c].components()[0].mean();
            assert!((0..12).any(|i| batch.labels[i] == c && batch.mu.row(i).to_vec() == mean));
        }
        let again = PriorBankSingle::init(&batch, 2, 1, UpdateHyper::default(), 5).unwrap();
        assert_eq!(bank, again);
    }

    #[test]
    fn class_with_exactly_m_samples_uses_all_of_them() {
        let batch = random_batch(8, 2, 2, 3);
        let bank = PriorBankSingle::init(&batch, 3, 4, UpdateHyper::default(), 9).unwrap();
        let mut means: Vec<Vec<f64>> = bank.mixtures()[0]
            .components()
            .iter()
            .map(|c| c.mean().to_vec())
            .collect();
        let mut expected: Vec<Vec<f64>> = (0..8)
            .filter(|i| i % 2 == 0)
            .map(|i| batch.mu.row(i).to_vec())
            .collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(means, expected);
        assert!(bank.absent_classes()[2]);
    }

    #[test]
    fn e_step_rows_are_on_the_simplex() {
        let batch = random_batch(20, 3, 2, 4);
        for mode in [Mode::Lossless, Mode::Lossy] {
            let bank = PriorBankSingle::init(&batch, 2, 3, hyper(mode, KlEstimate::VarOnly), 2).unwrap();
            let g = bank.e_step(&batch).unwrap();
            for r in g.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
        let bank = PriorBankSingle::init(&batch, 2, 1, UpdateHyper::default(), 2).unwrap();
        assert!(bank.e_step(&batch).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn equidistant_components_give_uniform_responsibilities() {
        let c0 = DiagGaussian::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let c1 = DiagGaussian::new(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mix = GaussianMixture::new(vec![0.5, 0.5], vec![c0, c1]).unwrap();
        let bank = PriorBankSingle::from_mixtures(vec![mix], UpdateHyper::default()).unwrap();
        let batch = LatentBatch::new(array![[0.0, 3.0]], array![[0.5, 0.5]], vec![0]).unwrap();
        let g = bank.e_step(&batch).unwrap();
        assert!((g[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_component_m_step_is_the_class_mean() {
        let batch = random_batch(10, 2, 2, 6);
        let bank = PriorBankSingle::init(&batch, 2, 1, hyper(Mode::Lossless, KlEstimate::VarOnly), 1).unwrap();
        let g = bank.e_step(&batch).unwrap();
        let cand = bank.m_step(&batch, &g).unwrap();
        for c in 0..2 {
            let rows: Vec<usize> = (0..10).filter(|i| i % 2 == c).collect();
            for j in 0..2 {
                let mean = rows.iter().map(|&i| batch.mu[[i, j]]).sum::<f64>() / rows.len() as f64;
                assert!((cand.views[0].means[c][0][j] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_samples_give_the_textbook_variance() {
        let mu = Array2::from_elem((4, 2), 0.7);
        let sigma = Array2::from_elem((4, 2), 0.4);
        let batch = LatentBatch::new(mu, sigma, vec![0; 4]).unwrap();
        let comp = DiagGaussian::new(vec![0.1, -0.3], vec![1.0, 2.0]).unwrap();
        let bank = PriorBankSingle::from_mixtures(
            vec![GaussianMixture::single(comp)],
            hyper(Mode::Lossless, KlEstimate::VarOnly),
        )
        .unwrap();
        let g = bank.e_step(&batch).unwrap();
        let cand = bank.m_step(&batch, &g).unwrap();
        let v = &cand.views[0].vars[0][0];
        assert!((v[0] - (0.16 + 0.36)).abs() < 1e-14);
        assert!((v[1] - (0.16 + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn update_extremes() {
        let batch = random_batch(16, 3, 2, 7);
        let mut h = UpdateHyper::replace();
        let bank = PriorBankSingle::init(&batch, 2, 2, h, 3).unwrap();
        let g = bank.e_step(&batch).unwrap();
        let cand = bank.m_step(&batch, &g).unwrap();
        let mut full = bank.clone();
        full.apply_update(&cand, 0, 1).unwrap();
        for c in 0..2 {
            for j in 0..2 {
                assert_eq!(
                    full.mixtures()[c].components()[j].mean(),
                    &cand.views[0].means[c][j][..]
                );
            }
            for (a, b) in full.mixtures()[c].weights().iter().zip(&cand.weights[c]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        h.eta_mean = 0.0;
        h.eta_var = 0.0;
        h.eta_weight = 0.0;
        let mut frozen = bank.clone();
        frozen.set_hyper(h).unwrap();
        frozen.apply_update(&cand, 0, 1).unwrap();
        assert_eq!(frozen.mixtures(), bank.mixtures());
    }

    #[test]
    fn noisy_variance_stays_above_floor() {
        let batch = random_batch(8, 2, 1, 8);
        let h = UpdateHyper {
            noise: NoiseSchedule {
                mean0: 0.0,
                var0: 1.0,
                decay: 1.0,
            },
            ..UpdateHyper::replace()
        };
        let mut bank = PriorBankSingle::init(&batch, 1, 2, h, 3).unwrap();
        let g = bank.e_step(&batch).unwrap();
        let mut cand = bank.m_step(&batch, &g).unwrap();
        for v in cand.views[0].vars[0].iter_mut() {
            v.iter_mut().for_each(|x| *x = VAR_FLOOR);
        }
        bank.apply_update(&cand, 0, 4).unwrap();
        for c in bank.mixtures()[0].components() {
            assert!(c.var().iter().all(|&v| v >= VAR_FLOOR));
        }
    }

    #[test]
    fn single_component_regularizer_is_plain_kl() {
        let batch = random_batch(6, 3, 2, 9);
        let bank = PriorBankSingle::init(&batch, 2, 1, hyper(Mode::Lossless, KlEstimate::VarOnly), 1).unwrap();
        let reg = bank.regularizer(&batch).unwrap();
        let mut expected = 0.0;
        for i in 0..6 {
            let var: Vec<f64> = batch.sigma.row(i).iter().map(|s| s * s).collect();
            let p = DiagGaussian::new(batch.mu.row(i).to_vec(), var).unwrap();
            expected += gaussian::kl_diag(&p, &bank.mixtures()[batch.labels[i]].components()[0]).unwrap();
        }
        assert!((reg.value - expected).abs() < 1e-12);
    }

    #[test]
    fn regularizer_vanishes_on_the_prior_itself() {
        let comp = DiagGaussian::new(vec![0.3, -0.2], vec![0.25, 0.64]).unwrap();
        let bank = PriorBankSingle::from_mixtures(
            vec![GaussianMixture::single(comp)],
            hyper(Mode::Lossless, KlEstimate::VarOnly),
        )
        .unwrap();
        let batch = LatentBatch::new(
            array![[0.3, -0.2], [0.3, -0.2]],
            array![[0.5, 0.8], [0.5, 0.8]],
            vec![0, 0],
        )
        .unwrap();
        assert!(bank.regularizer(&batch).unwrap().value.abs() < 1e-14);
    }

    #[test]
    fn vib_values() {
        let batch = LatentBatch::new(array![[0.0, 0.0]], array![[1.0, 1.0]], vec![0]).unwrap();
        assert_eq!(vib_regularizer(&batch).value, 0.0);
        let batch = LatentBatch::new(array![[1.0]], array![[1.0]], vec![0]).unwrap();
        assert!((vib_regularizer(&batch).value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let batch = random_batch(30, 4, 3, 10);
        let mut bank = PriorBankSingle::init(&batch, 3, 3, UpdateHyper::default(), 4).unwrap();
        bank.step(&batch, 0, 77).unwrap();
        let back = PriorBankSingle::from_json(&bank.to_json().unwrap()).unwrap();
        assert_eq!(back.mixtures(), bank.mixtures());
        assert_eq!(back.hyper(), bank.hyper());
    }

    #[test]
    fn lossy_responsibilities_are_weighted_attention() {
        // Normalized means and tied variances: the divergence differs across
        // components only through the inner product term.
        let d = 4;
        let scale = (d as f64).sqrt();
        let mut r = rng::stream(12, &[]);
        let comps: Vec<DiagGaussian> = (0..3)
            .map(|_| {
                let mut m: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                mixture::normalize_mean(&mut m);
                DiagGaussian::new(m, vec![0.7; d]).unwrap()
            })
            .collect();
        let alpha = vec![0.2, 0.5, 0.3];
        let mix = GaussianMixture::new(alpha.clone(), comps.clone()).unwrap();
        let bank = PriorBankSingle::from_mixtures(vec![mix], hyper(Mode::Lossy, KlEstimate::VarOnly)).unwrap();
        let batch = random_batch(5, d, 1, 13);
        let g = bank.e_step(&batch).unwrap();
        for i in 0..5 {
            let logits: Vec<f64> = (0..3)
                .map(|m| {
                    let ip: f64 = batch.mu.row(i).iter().zip(comps[m].mean()).map(|(a, b)| a * b).sum();
                    alpha[m].ln() + 2.0 * ip / scale
                })
                .collect();
            let mut expect = vec![0.0; 3];
            gaussian::softmax_into(&logits, &mut expect);
            for m in 0..3 {
                assert!((g[[i, m]] - expect[m]).abs() < 1e-10);
            }
        }
    }
}
