//! Joint Gaussians-product mixture prior over `K` views.
//!
//! Per class, a dense weight tensor over `[M]^K` (row-major, first view
//! slowest) and, per view, a bank of `M` diagonal Gaussian components. A joint
//! component is the product of one component from every view. The weights
//! live with [`JointWeights`]; each view's components live in a [`ViewBank`],
//! so the two halves can sit on different machines.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, DiagGaussian, GaussianMixture};
use crate::mixture::{self, Candidates, JointRows, ViewCandidates, ViewGeom, ViewStats};
use crate::prior_single::{
    check_labels, sq_dist, KlEstimate, LatentBatch, Mode, PriorBankSingle, Regularization, UpdateHyper,
};
use crate::rng;

/// Latent parameters of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLatents {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLatentBatch {
    pub views: Vec<ViewLatents>,
    pub labels: Vec<usize>,
}

impl MultiLatentBatch {
    pub fn new(views: Vec<ViewLatents>, labels: Vec<usize>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Precondition("need at least one view".into()));
        }
        let views = views
            .into_iter()
            .map(|v| {
                let b = LatentBatch::new(v.mu, v.sigma, labels.clone())?;
                Ok(ViewLatents {
                    mu: b.mu,
                    sigma: b.sigma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = views[0].mu.dim();
        if let Some(v) = views.iter().find(|v| v.mu.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim.1,
                got: v.mu.ncols(),
                context: "view latent shape",
            });
        }
        Ok(Self { views, labels })
    }

    pub fn from_single(batch: LatentBatch) -> Self {
        Self {
            views: vec![ViewLatents {
                mu: batch.mu,
                sigma: batch.sigma,
            }],
            labels: batch.labels,
        }
    }

    pub fn view_batch(&self, k: usize) -> LatentBatch {
        LatentBatch {
            mu: self.views[k].mu.clone(),
            sigma: self.views[k].sigma.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.views[0].mu.ncols()
    }
}

/// Per-class joint weights over `[M]^K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointWeights {
    pub m: usize,
    pub k: usize,
    /// `[class][joint index]`.
    pub weights: Vec<Vec<f64>>,
}

impl JointWeights {
    pub fn uniform(classes: usize, m: usize, k: usize) -> Result<Self> {
        let size = mixture::joint_size(m, k)?;
        Ok(Self {
            m,
            k,
            weights: vec![vec![1.0 / size as f64; size]; classes],
        })
    }

    pub fn size(&self) -> usize {
        self.weights[0].len()
    }

    pub fn log_weights(&self) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .map(|w| w.iter().map(|x| x.ln()).collect())
            .collect()
    }

    /// Marginal weights of view `k` for class `c`.
    pub fn marginal(&self, c: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        let mut digits = vec![0; self.k];
        for (idx, &w) in self.weights[c].iter().enumerate() {
            mixture::joint_digits(idx, self.m, &mut digits);
            out[digits[k]] += w;
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let size = mixture::joint_size(self.m, self.k)?;
        for w in &self.weights {
            if w.len() != size {
                return Err(Error::Dimension {
                    expected: size,
                    got: w.len(),
                    context: "joint weights",
                });
            }
            gaussian::check_simplex(w, "joint weights")?;
        }
        Ok(())
    }
}

/// One view's components for every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewBank {
    /// `[class][component]`.
    pub components: Vec<Vec<DiagGaussian>>,
    /// Variance offset of the lossy divergence for this view.
    pub eps: f64,
}

impl ViewBank {
    pub(crate) fn comps(&self) -> Vec<&[DiagGaussian]> {
        self.components.iter().map(|c| c.as_slice()).collect()
    }

    pub(crate) fn geom(&self, hyper: &UpdateHyper, k: usize) -> ViewGeom {
        let d = self.components[0][0].dim();
        ViewGeom {
            mode: hyper.mode,
            estimate: hyper.kl_estimate,
            eps: self.eps,
            scale: ((k * d) as f64).sqrt(),
        }
    }

    pub(crate) fn stats(
        &self,
        hyper: &UpdateHyper,
        k: usize,
        mu: &Array2<f64>,
        var: &Array2<f64>,
        labels: &[usize],
    ) -> ViewStats {
        mixture::view_stats(&self.geom(hyper, k), mu, var, labels, &self.comps())
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn gradient(
        &self,
        hyper: &UpdateHyper,
        k: usize,
        view: &ViewLatents,
        var: &Array2<f64>,
        labels: &[usize],
        gamma: &Array2<f64>,
        beta: Option<&Array2<f64>>,
        weight: f64,
    ) -> (Array2<f64>, Array2<f64>) {
        mixture::view_gradient(
            &self.geom(hyper, k),
            &view.mu,
            &view.sigma,
            var,
            labels,
            &self.comps(),
            gamma,
            beta,
            weight,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn m_step(
        &self,
        hyper: &UpdateHyper,
        k: usize,
        mu: &Array2<f64>,
        var: &Array2<f64>,
        labels: &[usize],
        gamma: &Array2<f64>,
        beta: Option<&Array2<f64>>,
    ) -> ViewCandidates {
        mixture::view_m_step(
            &self.geom(hyper, k),
            mu,
            var,
            labels,
            &self.comps(),
            gamma,
            beta,
            hyper.b_min,
        )
    }

    pub(crate) fn blend(
        &mut self,
        hyper: &UpdateHyper,
        cand: &ViewCandidates,
        present: &[bool],
        view: usize,
        t: u64,
        seed: u64,
    ) -> Result<()> {
        mixture::blend_view(hyper, &mut self.components, cand, present, view, t, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductMixturePrior {
    joint: JointWeights,
    views: Vec<ViewBank>,
    hyper: UpdateHyper,
    absent: Vec<bool>,
}

struct JointPasses {
    vars: Vec<Array2<f64>>,
    gamma: JointRows,
    beta: Option<JointRows>,
    entropy: Vec<f64>,
}

impl ProductMixturePrior {
    /// k-means++ on the summed per-view squared distances; every chosen
    /// sample fixes the means of one component index in all views at once.
    pub fn init(latents: &MultiLatentBatch, classes: usize, m: usize, hyper: UpdateHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        check_labels(&latents.labels, classes)?;
        if m == 0 {
            return Err(Error::Precondition("need at least one component".into()));
        }
        let k = latents.num_views();
        let joint = JointWeights::uniform(classes, m, k)?;
        let d = latents.dim();
        let mut views = vec![
            ViewBank {
                components: Vec::with_capacity(classes),
                eps: hyper.eps_lossy,
            };
            k
        ];
        let mut absent = vec![false; classes];
        for (c, flag) in absent.iter_mut().enumerate() {
            let idx: Vec<usize> = (0..latents.len()).filter(|&i| latents.labels[i] == c).collect();
            if idx.is_empty() {
                *flag = true;
                for v in views.iter_mut() {
                    v.components.push(vec![DiagGaussian::standard(d); m]);
                }
                continue;
            }
            let mut rng = rng::stream(seed, &[c as u64]);
            let dist = |a: usize, b: usize| {
                latents
                    .views
                    .iter()
                    .map(|v| sq_dist(mixture::row(&v.mu, idx[a]), mixture::row(&v.mu, idx[b])))
                    .sum::<f64>()
            };
            let chosen = mixture::kmeanspp(idx.len(), m, dist, &mut rng);
            let mut per_view: Vec<Vec<DiagGaussian>> = vec![Vec::with_capacity(m); k];
            for &p in &chosen {
                for (kv, out) in per_view.iter_mut().enumerate() {
                    let mut mean = mixture::row(&latents.views[kv].mu, idx[p]).to_vec();
                    if hyper.mode == Mode::Lossy && hyper.normalize_means {
                        mixture::normalize_mean(&mut mean);
                    }
                    out.push(DiagGaussian::new(mean, mixture::init_vars(d, &mut rng))?);
                }
            }
            for (v, comps) in views.iter_mut().zip(per_view) {
                v.components.push(comps);
            }
        }
        Ok(Self {
            joint,
            views,
            hyper,
            absent,
        })
    }

    pub fn from_parts(joint: JointWeights, views: Vec<ViewBank>, hyper: UpdateHyper) -> Result<Self> {
        hyper.validate()?;
        joint.validate()?;
        if views.len() != joint.k {
            return Err(Error::Dimension {
                expected: joint.k,
                got: views.len(),
                context: "view banks",
            });
        }
        let classes = joint.weights.len();
        let d = views[0].components[0][0].dim();
        for v in &views {
            if v.components.len() != classes
                || v.components
                    .iter()
                    .any(|c| c.len() != joint.m || c.iter().any(|g| g.dim() != d))
            {
                return Err(Error::Precondition(
                    "view bank shape does not match the joint weights".into(),
                ));
            }
            if !(v.eps > 0.0) {
                return Err(Error::Domain {
                    what: "view eps",
                    value: v.eps,
                    range: "(0, inf)",
                });
            }
        }
        Ok(Self {
            joint,
            views,
            hyper,
            absent: vec![false; classes],
        })
    }

    pub fn joint(&self) -> &JointWeights {
        &self.joint
    }

    pub fn views(&self) -> &[ViewBank] {
        &self.views
    }

    pub fn hyper(&self) -> &UpdateHyper {
        &self.hyper
    }

    pub fn set_hyper(&mut self, hyper: UpdateHyper) -> Result<()> {
        hyper.validate()?;
        self.hyper = hyper;
        Ok(())
    }

    pub fn set_view_eps(&mut self, eps: &[f64]) -> Result<()> {
        if eps.len() != self.views.len() || eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Precondition("one positive eps per view required".into()));
        }
        for (v, &e) in self.views.iter_mut().zip(eps) {
            v.eps = e;
        }
        Ok(())
    }

    pub fn absent_classes(&self) -> &[bool] {
        &self.absent
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_classes(&self) -> usize {
        self.joint.weights.len()
    }

    pub fn num_components(&self) -> usize {
        self.joint.m
    }

    pub fn dim(&self) -> usize {
        self.views[0].components[0][0].dim()
    }

    /// Mixture over view `k` induced by the joint prior for class `c`.
    pub fn marginal_mixture(&self, c: usize, k: usize) -> Result<GaussianMixture> {
        GaussianMixture::new(self.joint.marginal(c, k), self.views[k].components[c].clone())
    }

    /// Single-view bank of the induced marginals of view `k`.
    pub fn marginal_bank(&self, k: usize) -> Result<PriorBankSingle> {
        let mixtures = (0..self.num_classes())
            .map(|c| self.marginal_mixture(c, k))
            .collect::<Result<Vec<_>>>()?;
        let hyper = UpdateHyper {
            eps_lossy: self.views[k].eps,
            ..self.hyper
        };
        PriorBankSingle::from_mixtures(mixtures, hyper)
    }

    fn check(&self, latents: &MultiLatentBatch) -> Result<()> {
        check_labels(&latents.labels, self.num_classes())?;
        if latents.num_views() != self.num_views() || latents.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.num_views() * self.dim(),
                got: latents.num_views() * latents.dim(),
                context: "multi-view latents",
            });
        }
        Ok(())
    }

    fn passes(&self, latents: &MultiLatentBatch, keep_rows: bool) -> JointPasses {
        let k = self.num_views();
        let vars: Vec<Array2<f64>> = latents.views.iter().map(|v| mixture::latent_var(&v.sigma)).collect();
        let stats: Vec<ViewStats> = self
            .views
            .iter()
            .zip(latents.views.iter().zip(&vars))
            .map(|(bank, (v, var))| bank.stats(&self.hyper, k, &v.mu, var, &latents.labels))
            .collect();
        let la = self.joint.log_weights();
        let m = self.num_components();
        let divs: Vec<&Array2<f64>> = stats.iter().map(|s| &s.div).collect();
        let gamma = mixture::joint_softmax(&la, m, &latents.labels, &divs, -1.0, keep_rows);
        let beta = if self.hyper.kl_estimate == KlEstimate::AvgVarProd {
            let lts: Vec<&Array2<f64>> = stats.iter().map(|s| s.log_t.as_ref().expect("product terms")).collect();
            Some(mixture::joint_softmax(&la, m, &latents.labels, &lts, 1.0, keep_rows))
        } else {
            None
        };
        let entropy = (0..latents.len())
            .map(|i| stats.iter().map(|s| s.entropy[i]).sum())
            .collect();
        JointPasses {
            vars,
            gamma,
            beta,
            entropy,
        }
    }

    /// Joint responsibilities, `b x M^K`.
    pub fn e_step_joint(&self, latents: &MultiLatentBatch) -> Result<Array2<f64>> {
        self.check(latents)?;
        Ok(self.passes(latents, true).gamma.rows.expect("rows kept"))
    }

    /// Joint product-integral weights, `b x M^K`, under the average estimate.
    pub fn prod_weights_joint(&self, latents: &MultiLatentBatch) -> Result<Option<Array2<f64>>> {
        self.check(latents)?;
        Ok(self.passes(latents, true).beta.map(|b| b.rows.expect("rows kept")))
    }

    /// Closed-form candidates for fixed joint responsibilities.
    pub fn m_step(&self, latents: &MultiLatentBatch, gamma_joint: &Array2<f64>) -> Result<Candidates> {
        self.check(latents)?;
        let (b, size) = gamma_joint.dim();
        if b != latents.len() || size != self.joint.size() {
            return Err(Error::Dimension {
                expected: latents.len() * self.joint.size(),
                got: gamma_joint.len(),
                context: "joint responsibilities",
            });
        }
        let p = self.passes(latents, true);
        let gamma_marg = marginalize_gamma(gamma_joint, self.num_components(), self.num_views());
        let k = self.num_views();
        let views = (0..k)
            .map(|kv| {
                self.views[kv].m_step(
                    &self.hyper,
                    k,
                    &latents.views[kv].mu,
                    &p.vars[kv],
                    &latents.labels,
                    &gamma_marg[kv],
                    p.beta.as_ref().map(|bt| &bt.marginals[kv]),
                )
            })
            .collect();
        let beta_rows = p.beta.as_ref().map(|bt| bt.rows.as_ref().expect("rows kept"));
        let (weights, present) =
            mixture::weight_candidates(&self.joint.weights, &latents.labels, gamma_joint, beta_rows);
        Ok(Candidates {
            views,
            weights,
            present,
        })
    }

    pub fn apply_update(&mut self, cand: &Candidates, t: u64, seed: u64) -> Result<()> {
        for (kv, bank) in self.views.iter_mut().enumerate() {
            bank.blend(&self.hyper, &cand.views[kv], &cand.present, kv, t, seed)?;
        }
        mixture::blend_weights(&self.hyper, &mut self.joint.weights, &cand.weights, &cand.present);
        Ok(())
    }

    pub fn step(&mut self, latents: &MultiLatentBatch, t: u64, seed: u64) -> Result<Candidates> {
        let gamma = self.e_step_joint(latents)?;
        let cand = self.m_step(latents, &gamma)?;
        self.apply_update(&cand, t, seed)?;
        Ok(cand)
    }

    /// Joint regularizer summed over the batch, with per-view gradients.
    pub fn regularizer_joint(&self, latents: &MultiLatentBatch) -> Result<Regularization> {
        self.check(latents)?;
        let p = self.passes(latents, false);
        let per_sample = mixture::sample_values(self.hyper.kl_estimate, &p.gamma, p.beta.as_ref(), &p.entropy);
        let k = self.num_views();
        let mut grad_mu = Vec::with_capacity(k);
        let mut grad_sigma = Vec::with_capacity(k);
        for kv in 0..k {
            let (gm, gs) = self.views[kv].gradient(
                &self.hyper,
                k,
                &latents.views[kv],
                &p.vars[kv],
                &latents.labels,
                &p.gamma.marginals[kv],
                p.beta.as_ref().map(|bt| &bt.marginals[kv]),
                1.0,
            );
            grad_mu.push(gm);
            grad_sigma.push(gs);
        }
        Ok(Regularization {
            value: per_sample.iter().sum(),
            per_sample,
            grad_mu,
            grad_sigma,
        })
    }

    /// Sum over views of the single-view regularizer on each induced marginal.
    pub fn regularizer_marginals_only(&self, latents: &MultiLatentBatch) -> Result<Regularization> {
        self.check(latents)?;
        let mut total = Regularization {
            value: 0.0,
            per_sample: vec![0.0; latents.len()],
            grad_mu: Vec::new(),
            grad_sigma: Vec::new(),
        };
        for kv in 0..self.num_views() {
            let r = self.marginal_bank(kv)?.regularizer(&latents.view_batch(kv))?;
            total.value += r.value;
            total
                .per_sample
                .iter_mut()
                .zip(&r.per_sample)
                .for_each(|(a, b)| *a += b);
            total.grad_mu.extend(r.grad_mu);
            total.grad_sigma.extend(r.grad_sigma);
        }
        Ok(total)
    }

    /// `sum_i log Q_{y_i}(u_{i,1}, ..., u_{i,K})`.
    pub fn prior_log_density(&self, samples: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
        check_labels(labels, self.num_classes())?;
        if samples.len() != self.num_views()
            || samples
                .iter()
                .any(|s| s.nrows() != labels.len() || s.ncols() != self.dim())
        {
            return Err(Error::Dimension {
                expected: self.num_views(),
                got: samples.len(),
                context: "joint prior samples",
            });
        }
        let m = self.num_components();
        let dens: Vec<Array2<f64>> = self
            .views
            .iter()
            .zip(samples)
            .map(|(bank, s)| {
                Array2::from_shape_fn((labels.len(), m), |(i, j)| {
                    bank.components[labels[i]][j].log_density(&s.row(i).to_vec())
                })
            })
            .collect();
        let refs: Vec<&Array2<f64>> = dens.iter().collect();
        let rows = mixture::joint_softmax(&self.joint.log_weights(), m, labels, &refs, 1.0, false);
        Ok(rows.lse.iter().sum())
    }

    /// Estimate of `KL(p || Q_c)` for the product latent `p` (one Gaussian
    /// per view), using the configured estimate with the exact product
    /// integral.
    pub fn kl_estimate(&self, p: &[DiagGaussian], class: usize) -> Result<f64> {
        check_labels(&[class], self.num_classes())?;
        if p.len() != self.num_views() || p.iter().any(|g| g.dim() != self.dim()) {
            return Err(Error::Dimension {
                expected: self.num_views(),
                got: p.len(),
                context: "product latent",
            });
        }
        let m = self.num_components();
        let per_view = |f: &dyn Fn(&DiagGaussian, &DiagGaussian) -> f64| -> Vec<Vec<f64>> {
            p.iter()
                .zip(&self.views)
                .map(|(g, bank)| bank.components[class].iter().map(|q| f(g, q)).collect())
                .collect()
        };
        let joint_lse = |terms: &[Vec<f64>], sign: f64| -> f64 {
            let mut digits = vec![0; self.num_views()];
            let logits: Vec<f64> = self.joint.weights[class]
                .iter()
                .enumerate()
                .map(|(idx, a)| {
                    mixture::joint_digits(idx, m, &mut digits);
                    a.ln() + sign * digits.iter().zip(terms).map(|(&dg, t)| t[dg]).sum::<f64>()
                })
                .collect();
            gaussian::log_sum_exp(&logits)
        };
        let kls = per_view(&|g, q| gaussian::kl_term(g.mean(), g.var(), q.mean(), q.var()));
        let var_part = -joint_lse(&kls, -1.0);
        if self.hyper.kl_estimate == KlEstimate::VarOnly {
            return Ok(var_part);
        }
        let lts = per_view(&|g, q| gaussian::log_t_exact(g.mean(), g.var(), q.mean(), q.var()));
        let entropy: f64 = p.iter().map(|g| g.entropy()).sum();
        Ok(0.5 * (var_part - entropy - joint_lse(&lts, 1.0)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.layout())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let layout: PriorLayout = serde_json::from_str(s)?;
        let classes = layout.classes.len();
        let mut weights = Vec::with_capacity(classes);
        let mut views: Vec<ViewBank> = layout
            .view_eps
            .iter()
            .map(|&eps| ViewBank {
                components: Vec::with_capacity(classes),
                eps,
            })
            .collect();
        for class in layout.classes {
            weights.push(class.joint_weights);
            if class.views.len() != views.len() {
                return Err(Error::Precondition("class entry has the wrong number of views".into()));
            }
            for (bank, v) in views.iter_mut().zip(class.views) {
                let comps = v
                    .means
                    .into_iter()
                    .zip(v.variances)
                    .map(|(m, var)| DiagGaussian::new(m, var))
                    .collect::<Result<Vec<_>>>()?;
                bank.components.push(comps);
            }
        }
        let joint = JointWeights {
            m: layout.m,
            k: layout.k,
            weights,
        };
        Self::from_parts(joint, views, layout.hyper)
    }

    fn layout(&self) -> PriorLayout {
        PriorLayout {
            hyper: self.hyper,
            k: self.joint.k,
            m: self.joint.m,
            view_eps: self.views.iter().map(|v| v.eps).collect(),
            classes: (0..self.num_classes())
                .map(|c| ClassEntry {
                    joint_weights: self.joint.weights[c].clone(),
                    views: self
                        .views
                        .iter()
                        .map(|v| ViewEntry {
                            means: v.components[c].iter().map(|g| g.mean().to_vec()).collect(),
                            variances: v.components[c].iter().map(|g| g.var().to_vec()).collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Checkpoint layout. The joint weights of each class are row-major over
/// `(m_1, ..., m_K)` with `m_1` slowest.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorLayout {
    hyper: UpdateHyper,
    k: usize,
    m: usize,
    view_eps: Vec<f64>,
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    joint_weights: Vec<f64>,
    views: Vec<ViewEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

/// Per-view marginals of a `b x M^K` joint responsibility tensor.
pub fn marginalize_gamma(gamma_joint: &Array2<f64>, m: usize, k: usize) -> Vec<Array2<f64>> {
    let b = gamma_joint.nrows();
    let mut out = vec![Array2::zeros((b, m)); k];
    let mut digits = vec![0; k];
    for i in 0..b {
        for (idx, &g) in gamma_joint.row(i).iter().enumerate() {
            mixture::joint_digits(idx, m, &mut digits);
            for (o, &dg) in out.iter_mut().zip(&digits) {
                o[[i, dg]] += g;
            }
        }
    }
    out
}

/// Redundant-views construction: two views with identical latent parameters,
/// each sample drawn from one of `R` latent clusters. Returns the
/// marginals-only value and the joint value on the batch, with priors at
/// their matched forms: per view, components at the cluster parameters with
/// weights `cluster_weights`; jointly, mass only on equal index pairs.
pub fn redundancy_gap(
    cluster_mu: &[Vec<f64>],
    cluster_sigma: &[Vec<f64>],
    cluster_weights: &[f64],
    assignment: &[usize],
    hyper: UpdateHyper,
) -> Result<(f64, f64)> {
    let r = cluster_mu.len();
    if r == 0 || cluster_sigma.len() != r || cluster_weights.len() != r {
        return Err(Error::Precondition(
            "cluster parameters must have matching lengths".into(),
        ));
    }
    gaussian::check_simplex(cluster_weights, "cluster weights")?;
    if let Some(&bad) = assignment.iter().find(|&&a| a >= r) {
        return Err(Error::Precondition(format!("cluster index {bad} out of range")));
    }
    let d = cluster_mu[0].len();
    let comps = cluster_mu
        .iter()
        .zip(cluster_sigma)
        .map(|(m, s)| DiagGaussian::new(m.clone(), s.iter().map(|x| x * x).collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut joint = vec![0.0; r * r];
    for (q, &w) in cluster_weights.iter().enumerate() {
        joint[q * r + q] = w;
    }
    let prior = ProductMixturePrior::from_parts(
        JointWeights {
            m: r,
            k: 2,
            weights: vec![joint],
        },
        vec![
            ViewBank {
                components: vec![comps.clone()],
                eps: hyper.eps_lossy,
            },
            ViewBank {
                components: vec![comps],
                eps: hyper.eps_lossy,
            },
        ],
        hyper,
    )?;
    let b = assignment.len();
    let mu = Array2::from_shape_fn((b, d), |(i, j)| cluster_mu[assignment[i]][j]);
    let sigma = Array2::from_shape_fn((b, d), |(i, j)| cluster_sigma[assignment[i]][j]);
    let view = ViewLatents { mu, sigma };
    let batch = MultiLatentBatch::new(vec![view.clone(), view], vec![0; b])?;
    let r1 = prior.regularizer_marginals_only(&batch)?.value;
    let r2 = prior.regularizer_joint(&batch)?.value;
    Ok((r1, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_multi(b: usize, d: usize, k: usize, classes: usize, seed: u64) -> MultiLatentBatch {
        let mut r = rng::stream(seed, &[]);
        let views = (0..k)
            .map(|_| ViewLatents {
                mu: Array2::from_shape_fn((b, d), |_| r.random_range(-2.0..2.0)),
                sigma: Array2::from_shape_fn((b, d), |_| r.random_range(0.3..1.5)),
            })
            .collect();
        MultiLatentBatch::new(views, (0..b).map(|i| i % classes).collect()).unwrap()
    }

    fn var_only(mode: Mode) -> UpdateHyper {
        UpdateHyper {
            mode,
            kl_estimate: KlEstimate::VarOnly,
            ..UpdateHyper::default()
        }
    }

    #[test]
    fn single_view_reduction() {
        for hyper in [
            UpdateHyper::default(),
            var_only(Mode::Lossless),
            var_only(Mode::Lossy),
            UpdateHyper {
                mode: Mode::Lossy,
                ..UpdateHyper::default()
            },
        ] {
            let multi = random_multi(24, 3, 1, 2, 5);
            let single = multi.view_batch(0);
            let mut joint = ProductMixturePrior::init(&multi, 2, 3, hyper, 8).unwrap();
            let mut bank = PriorBankSingle::init(&single, 2, 3, hyper, 8).unwrap();
            for c in 0..2 {
                assert_eq!(joint.views()[0].components[c], bank.mixtures()[c].components());
            }
            let gj = joint.e_step_joint(&multi).unwrap();
            let gs = bank.e_step(&single).unwrap();
            assert!(gj.iter().zip(gs.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            let rj = joint.regularizer_joint(&multi).unwrap();
            let rs = bank.regularizer(&single).unwrap();
            assert!((rj.value - rs.value).abs() < 1e-9);
            assert!(rj.grad_mu[0]
                .iter()
                .zip(rs.grad_mu[0].iter())
                .all(|(a, b)| (a - b).abs() < 1e-9));
            joint.step(&multi, 0, 3).unwrap();
            bank.step(&single, 0, 3).unwrap();
            for c in 0..2 {
                let mix = joint.marginal_mixture(c, 0).unwrap();
                assert_eq!(mix.components(), bank.mixtures()[c].components());
                for (a, b) in mix.weights().iter().zip(bank.mixtures()[c].weights()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn marginals_match_brute_force() {
        let multi = random_multi(10, 2, 3, 2, 6);
        let prior = ProductMixturePrior::init(&multi, 2, 3, UpdateHyper::default(), 1).unwrap();
        let g = prior.e_step_joint(&multi).unwrap();
        let marg = marginalize_gamma(&g, 3, 3);
        for i in 0..10 {
            for k in 0..3 {
                for m in 0..3 {
                    let mut s = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            for c in 0..3 {
                                if [a, b, c][k] == m {
                                    s += g[[i, a * 9 + b * 3 + c]];
                                }
                            }
                        }
                    }
                    assert!((marg[k][[i, m]] - s).abs() < 1e-12);
                }
                assert!((marg[k].row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_is_a_configuration_error() {
        let multi = random_multi(4, 2, 8, 1, 1);
        assert!(matches!(
            ProductMixturePrior::init(&multi, 1, 5, UpdateHyper::default(), 1),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn product_weights_split_the_regularizer() {
        // With product-form weights and the variational estimate, the joint
        // regularizer is the sum of per-view marginal regularizers.
        let multi = random_multi(12, 3, 2, 1, 9);
        let mut prior = ProductMixturePrior::init(&multi, 1, 3, var_only(Mode::Lossless), 2).unwrap();
        let (a, b) = ([0.2, 0.5, 0.3], [0.6, 0.1, 0.3]);
        let w: Vec<f64> = (0..9).map(|i| a[i / 3] * b[i % 3]).collect();
        prior.joint.weights = vec![w];
        let joint = prior.regularizer_joint(&multi).unwrap().value;
        let marg = prior.regularizer_marginals_only(&multi).unwrap().value;
        assert!((joint - marg).abs() < 1e-9, "{joint} vs {marg}");
    }

    #[test]
    fn identical_views_double_the_marginal_value() {
        let one = random_multi(8, 2, 1, 1, 3);
        let v = one.views[0].clone();
        let two = MultiLatentBatch::new(vec![v.clone(), v], one.labels.clone()).unwrap();
        let prior = ProductMixturePrior::init(&two, 1, 2, UpdateHyper::default(), 5).unwrap();
        let bank = prior.marginal_bank(0).unwrap();
        let single = bank.regularizer(&one.view_batch(0)).unwrap().value;
        let mut prior2 = prior.clone();
        prior2.views[1] = prior2.views[0].clone();
        let both = prior2.regularizer_marginals_only(&two).unwrap().value;
        assert!((both - 2.0 * single).abs() < 1e-9);
    }

    #[test]
    fn redundancy_gap_cases() {
        let h = var_only(Mode::Lossless);
        let (r1, r2) = redundancy_gap(&[vec![0.3, 0.1]], &[vec![0.5, 0.9]], &[1.0], &[0, 0, 0], h).unwrap();
        assert!(r1.abs() < 1e-12 && r2.abs() < 1e-12);
        let mus = vec![vec![0.0, 0.0], vec![1.0, -0.5], vec![-0.7, 0.8]];
        let sig = vec![vec![0.5, 0.6], vec![0.8, 0.4], vec![0.7, 0.7]];
        let (r1, r2) = redundancy_gap(&mus, &sig, &[1.0 / 3.0; 3], &[0, 1, 2, 2, 1], h).unwrap();
        assert!(r2 <= r1, "{r2} > {r1}");
    }

    #[test]
    fn kl_estimate_reduces_to_single_view() {
        let multi = random_multi(10, 3, 1, 2, 21);
        let prior = ProductMixturePrior::init(&multi, 2, 3, UpdateHyper::default(), 2).unwrap();
        let p = DiagGaussian::new(vec![0.1, -0.4, 0.9], vec![0.5, 0.2, 1.3]).unwrap();
        let mix = prior.marginal_mixture(1, 0).unwrap();
        let got = prior.kl_estimate(std::slice::from_ref(&p), 1).unwrap();
        assert!((got - gaussian::d_est(&p, &mix).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let multi = random_multi(20, 3, 2, 2, 11);
        let mut prior = ProductMixturePrior::init(&multi, 2, 2, UpdateHyper::default(), 4).unwrap();
        prior.step(&multi, 0, 9).unwrap();
        let back = ProductMixturePrior::from_json(&prior.to_json().unwrap()).unwrap();
        assert_eq!(back.joint(), prior.joint());
        assert_eq!(back.views(), prior.views());
    }

    #[test]
    fn joint_weights_stay_on_the_simplex() {
        let multi = random_multi(30, 2, 2, 3, 12);
        let mut prior = ProductMixturePrior::init(&multi, 3, 3, UpdateHyper::default(), 4).unwrap();
        for t in 0..5 {
            prior.step(&multi, t, 100 + t).unwrap();
            for c in 0..3 {
                assert!((prior.joint().weights[c].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for k in 0..2 {
                    assert!((prior.joint().marginal(c, k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
