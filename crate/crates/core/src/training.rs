//! Supervised training with a latent-prior regularizer.
//!
//! Each step encodes every view, draws reparameterized latents, and minimizes
//! mean cross-entropy plus `lambda / b` times the regularizer summed over the
//! batch. Encoders and decoder move first; the prior is then refit on the
//! same batch from the latents of that forward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, DiagGaussian};
use crate::nets::{self, Adam, EncoderMlp, EncoderPass, Models};
use crate::prior_multi::{MultiLatentBatch, ProductMixturePrior, ViewLatents};
use crate::prior_single::{self, KlEstimate, PriorBankSingle, Regularization, UpdateHyper};
use crate::rng;
use crate::synth::MultiViewData;

const TAG_STEP: u64 = 0x57e9;
const TAG_PRIOR: u64 = 0x9e1;
const TAG_INIT: u64 = 0x1417;
const TAG_SHUFFLE: u64 = 0x5f1e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    Vib,
    Cdvib,
    GmMdl,
    GpmMdl,
    MarginalsOnly,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 6] = [
        Self::None,
        Self::Vib,
        Self::Cdvib,
        Self::GmMdl,
        Self::GpmMdl,
        Self::MarginalsOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Vib => "vib",
            Self::Cdvib => "cdvib",
            Self::GmMdl => "gm_mdl",
            Self::GpmMdl => "gpm_mdl",
            Self::MarginalsOnly => "marginals_only",
        }
    }

    /// Column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "no reg.",
            Self::Vib => "VIB",
            Self::Cdvib => "CDVIB",
            Self::GmMdl => "GM-MDL",
            Self::GpmMdl => "GPM-MDL",
            Self::MarginalsOnly => "marginals-only",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown regularizer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regularizer: RegularizerKind,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub samples_train: usize,
    pub samples_test: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Mixture components per class and view; `cdvib` always uses one.
    pub components: usize,
    /// Samples used to initialize the prior, as a multiple of the batch size.
    pub init_batches: usize,
    pub prior: UpdateHyper,
    /// Per-view variance offsets of the lossy divergence; defaults to
    /// `prior.eps_lossy` for every view.
    pub view_eps: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regularizer: RegularizerKind::None,
            lambda: 0.0,
            batch_size: 128,
            epochs: 30,
            learning_rate: 1e-3,
            lr_decay: 0.97,
            samples_train: 1,
            samples_test: 5,
            latent_dim: 8,
            hidden: vec![64, 64],
            components: 4,
            init_batches: 8,
            prior: UpdateHyper {
                mode: prior_single::Mode::Lossy,
                ..UpdateHyper::default()
            },
            view_eps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Domain {
                what: "lambda",
                value: self.lambda,
                range: "[0, inf)",
            });
        }
        if self.batch_size == 0 || self.samples_train == 0 || self.samples_test == 0 {
            return Err(Error::Precondition(
                "batch size and sample counts must be positive".into(),
            ));
        }
        if self.latent_dim == 0 || self.components == 0 || self.init_batches == 0 {
            return Err(Error::Precondition(
                "latent_dim, components and init_batches must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Precondition(
                "learning rate must be >= 0 and decay in (0, 1]".into(),
            ));
        }
        if let Some(eps) = &self.view_eps {
            if eps.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::Precondition("view_eps entries must be positive".into()));
            }
        }
        self.prior.validate()
    }
}

/// Prior state behind each regularizer kind.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorEngine {
    None,
    /// Fixed standard normal per view.
    Vib,
    /// Independent class-conditional mixture per view.
    PerView(Vec<PriorBankSingle>),
    Joint(ProductMixturePrior),
}

impl PriorEngine {
    /// Initializes the prior of `kind` from latent parameters.
    pub fn init(kind: RegularizerKind, latents: &MultiLatentBatch, classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let k = latents.num_views();
        let seed = rng::derive_seed(cfg.seed, &[TAG_INIT]);
        let eps = match &cfg.view_eps {
            Some(e) if e.len() != k => {
                return Err(Error::Dimension {
                    expected: k,
                    got: e.len(),
                    context: "view_eps",
                })
            }
            Some(e) => e.clone(),
            None => vec![cfg.prior.eps_lossy; k],
        };
        let per_view = |m: usize| -> Result<Self> {
            (0..k)
                .map(|kv| {
                    let hyper = UpdateHyper {
                        eps_lossy: eps[kv],
                        ..cfg.prior
                    };
                    PriorBankSingle::init(
                        &latents.view_batch(kv),
                        classes,
                        m,
                        hyper,
                        rng::derive_seed(seed, &[kv as u64]),
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map(Self::PerView)
        };
        match kind {
            RegularizerKind::None => Ok(Self::None),
            RegularizerKind::Vib => Ok(Self::Vib),
            RegularizerKind::Cdvib => per_view(1),
            RegularizerKind::MarginalsOnly => per_view(cfg.components),
            RegularizerKind::GmMdl if k != 1 => Err(Error::Precondition(format!(
                "gm_mdl is single-view; got {k} views (use gpm_mdl or marginals_only)"
            ))),
            RegularizerKind::GmMdl => per_view(cfg.components),
            RegularizerKind::GpmMdl => {
                let mut p = ProductMixturePrior::init(latents, classes, cfg.components, cfg.prior, seed)?;
                p.set_view_eps(&eps)?;
                Ok(Self::Joint(p))
            }
        }
    }

    /// Regularizer summed over the batch; zero for [`PriorEngine::None`].
    pub fn regularizer(&self, latents: &MultiLatentBatch) -> Result<Regularization> {
        match self {
            Self::None => Ok(Regularization {
                value: 0.0,
                per_sample: vec![0.0; latents.len()],
                grad_mu: latents.views.iter().map(|v| Array2::zeros(v.mu.dim())).collect(),
                grad_sigma: latents.views.iter().map(|v| Array2::zeros(v.mu.dim())).collect(),
            }),
            Self::Vib => Ok(sum_views(
                (0..latents.num_views()).map(|k| Ok(prior_single::vib_regularizer(&latents.view_batch(k)))),
                latents.len(),
            )?),
            Self::PerView(banks) => {
                check_views(banks.len(), latents)?;
                sum_views(
                    banks
                        .iter()
                        .enumerate()
                        .map(|(k, b)| b.regularizer(&latents.view_batch(k))),
                    latents.len(),
                )
            }
            Self::Joint(p) => p.regularizer_joint(latents),
        }
    }

    /// One E-step, M-step and moving-average update on the batch.
    pub fn update(&mut self, latents: &MultiLatentBatch, t: u64, seed: u64) -> Result<()> {
        match self {
            Self::None | Self::Vib => Ok(()),
            Self::PerView(banks) => {
                check_views(banks.len(), latents)?;
                for (k, bank) in banks.iter_mut().enumerate() {
                    let view = latents.view_batch(k);
                    let gamma = bank.e_step(&view)?;
                    let cand = bank.m_step(&view, &gamma)?;
                    bank.apply_update_as_view(&cand, t, seed, k)?;
                }
                Ok(())
            }
            Self::Joint(p) => p.step(latents, t, seed).map(|_| ()),
        }
    }

    /// Per-sample KL estimate of the latent to the class prior, using the
    /// configured estimate. Fixed-prior kinds use the standard normal.
    pub fn kl_estimates(&self, latents: &MultiLatentBatch) -> Result<Vec<f64>> {
        let b = latents.len();
        let k = latents.num_views();
        let gauss = |kv: usize, i: usize| -> Result<DiagGaussian> {
            let v = &latents.views[kv];
            DiagGaussian::new(v.mu.row(i).to_vec(), v.sigma.row(i).mapv(|s| s * s).to_vec())
        };
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let y = latents.labels[i];
            let value = match self {
                Self::None | Self::Vib => {
                    let mut acc = 0.0;
                    for kv in 0..k {
                        let p = gauss(kv, i)?;
                        acc += gaussian::kl_diag(&p, &DiagGaussian::standard(p.dim()))?;
                    }
                    acc
                }
                Self::PerView(banks) => {
                    let mut acc = 0.0;
                    for (kv, bank) in banks.iter().enumerate() {
                        let p = gauss(kv, i)?;
                        let q = &bank.mixtures()[y];
                        acc += match bank.hyper().kl_estimate {
                            KlEstimate::VarOnly => gaussian::d_var(&p, q, None)?,
                            KlEstimate::AvgVarProd => gaussian::d_est(&p, q)?,
                        };
                    }
                    acc
                }
                Self::Joint(prior) => {
                    let p = (0..k).map(|kv| gauss(kv, i)).collect::<Result<Vec<_>>>()?;
                    prior.kl_estimate(&p, y)?
                }
            };
            out.push(value);
        }
        Ok(out)
    }
}

fn check_views(expected: usize, latents: &MultiLatentBatch) -> Result<()> {
    if latents.num_views() != expected {
        return Err(Error::Dimension {
            expected,
            got: latents.num_views(),
            context: "views",
        });
    }
    Ok(())
}

fn sum_views(parts: impl Iterator<Item = Result<Regularization>>, b: usize) -> Result<Regularization> {
    let mut total = Regularization {
        value: 0.0,
        per_sample: vec![0.0; b],
        grad_mu: Vec::new(),
        grad_sigma: Vec::new(),
    };
    for r in parts {
        let r = r?;
        total.value += r.value;
        total
            .per_sample
            .iter_mut()
            .zip(&r.per_sample)
            .for_each(|(a, x)| *a += x);
        total.grad_mu.extend(r.grad_mu);
        total.grad_sigma.extend(r.grad_sigma);
    }
    Ok(total)
}

/// Loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub loss: f64,
    pub ce: f64,
    /// Regularizer summed over the batch.
    pub reg: f64,
}

/// Standard normal draws for one step: `b * samples` rows per view.
pub fn step_noise(batch: usize, samples: usize, latent: usize, views: usize, step_seed: u64) -> Vec<Array2<f64>> {
    (0..views)
        .map(|k| nets::draw_noise(batch * samples, latent, &mut rng::stream(step_seed, &[k as u64])))
        .collect()
}

/// Encoder gradient for one view from the decoder's draw gradients and the
/// regularizer gradients scaled by `reg_scale`.
#[allow(clippy::too_many_arguments)]
pub fn view_encoder_grad(
    enc: &EncoderMlp,
    pass: &EncoderPass,
    grad_u: &Array2<f64>,
    xi: &Array2<f64>,
    per_sample: usize,
    reg_mu: &Array2<f64>,
    reg_sigma: &Array2<f64>,
    reg_scale: f64,
) -> EncoderMlp {
    let (mut g_mu, mut g_sigma) = nets::pathwise_grads(grad_u, xi, per_sample);
    g_mu.scaled_add(reg_scale, reg_mu);
    g_sigma.scaled_add(reg_scale, reg_sigma);
    enc.backward(pass, &g_mu, &g_sigma)
}

/// Latent parameters of a forward pass.
pub fn latents_of(passes: &[EncoderPass], labels: &[usize]) -> Result<MultiLatentBatch> {
    MultiLatentBatch::new(
        passes
            .iter()
            .map(|p| ViewLatents {
                mu: p.mu.clone(),
                sigma: p.sigma.clone(),
            })
            .collect(),
        labels.to_vec(),
    )
}

/// Full objective and its gradient for fixed noise `xi` and a fixed prior.
/// Returns the loss terms, parameter gradients and the batch latents.
pub fn loss_and_grads(
    models: &Models,
    prior: &PriorEngine,
    batch: &MultiViewData,
    xi: &[Array2<f64>],
    lambda: f64,
    per_sample: usize,
) -> Result<(StepOutput, Models, MultiLatentBatch)> {
    if batch.num_views() != models.num_views() || xi.len() != models.num_views() {
        return Err(Error::Dimension {
            expected: models.num_views(),
            got: batch.num_views(),
            context: "views",
        });
    }
    let passes = models
        .encoders
        .iter()
        .zip(&batch.views)
        .map(|(e, x)| e.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let draws: Vec<Array2<f64>> = passes
        .iter()
        .zip(xi)
        .map(|(p, z)| nets::reparameterize(&p.mu, &p.sigma, z, per_sample))
        .collect();
    let dec = models.decoder.loss(&draws, &batch.labels, per_sample)?;
    let latents = latents_of(&passes, &batch.labels)?;
    let reg = prior.regularizer(&latents)?;
    let scale = lambda / batch.len() as f64;
    let out = StepOutput {
        loss: dec.ce + scale * reg.value,
        ce: dec.ce,
        reg: reg.value,
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} (cross-entropy {}, regularizer {})",
            out.loss, out.ce, out.reg
        )));
    }
    let encoders = (0..models.num_views())
        .map(|k| {
            view_encoder_grad(
                &models.encoders[k],
                &passes[k],
                &dec.grad_u[k],
                &xi[k],
                per_sample,
                &reg.grad_mu[k],
                &reg.grad_sigma[k],
                scale,
            )
        })
        .collect();
    Ok((
        out,
        Models {
            encoders,
            decoder: dec.grad,
        },
        latents,
    ))
}

/// Seed of step `t`; view `k` draws its noise from `stream(seed, [k])`.
pub fn step_seed(seed: u64, t: u64) -> u64 {
    rng::derive_seed(seed, &[TAG_STEP, t])
}

/// Seed of the prior update at the step with seed `step_seed`.
pub fn prior_seed(step_seed: u64) -> u64 {
    rng::derive_seed(step_seed, &[TAG_PRIOR])
}

/// Shuffled minibatch indices of one epoch.
pub fn epoch_batches(seed: u64, n: usize, batch_size: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[TAG_SHUFFLE, epoch as u64]));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn epoch_learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi(epoch as i32)
}

/// Metrics of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub reg: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub models: Models,
    pub prior: PriorEngine,
    pub cfg: TrainConfig,
    enc_opt: Vec<Adam>,
    dec_opt: Adam,
    classes: usize,
    step: u64,
}

impl Trainer {
    /// Fresh models; the prior is initialized from the encoded latents of
    /// `init_batches * batch_size` shuffled training samples.
    pub fn new(cfg: TrainConfig, data: &MultiViewData) -> Result<Self> {
        cfg.validate()?;
        let models = Models::new(&data.view_dims(), &cfg.hidden, cfg.latent_dim, data.classes, cfg.seed);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng::stream(cfg.seed, &[TAG_INIT]));
        idx.truncate(cfg.init_batches * cfg.batch_size);
        let subset = data.select(&idx);
        let passes = models
            .encoders
            .iter()
            .zip(&subset.views)
            .map(|(e, x)| e.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let prior = PriorEngine::init(
            cfg.regularizer,
            &latents_of(&passes, &subset.labels)?,
            data.classes,
            &cfg,
        )?;
        Self::from_parts(models, prior, cfg, data.classes)
    }

    pub fn from_parts(models: Models, prior: PriorEngine, cfg: TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            enc_opt: vec![Adam::new(cfg.learning_rate); models.num_views()],
            dec_opt: Adam::new(cfg.learning_rate),
            models,
            prior,
            cfg,
            classes,
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.enc_opt.iter_mut().for_each(|o| o.lr = lr);
        self.dec_opt.lr = lr;
    }

    pub fn train_step(&mut self, batch: &MultiViewData) -> Result<StepOutput> {
        let seed = step_seed(self.cfg.seed, self.step);
        let xi = step_noise(
            batch.len(),
            self.cfg.samples_train,
            self.cfg.latent_dim,
            self.models.num_views(),
            seed,
        );
        let (out, grads, latents) = loss_and_grads(
            &self.models,
            &self.prior,
            batch,
            &xi,
            self.cfg.lambda,
            self.cfg.samples_train,
        )?;
        for ((enc, opt), g) in self
            .models
            .encoders
            .iter_mut()
            .zip(&mut self.enc_opt)
            .zip(&grads.encoders)
        {
            opt.step(enc, g);
        }
        self.dec_opt.step(&mut self.models.decoder, &grads.decoder);
        self.prior.update(&latents, self.step, prior_seed(seed))?;
        self.step += 1;
        Ok(out)
    }

    /// Optimization steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn fit(&mut self, data: &MultiViewData) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let lr = epoch_learning_rate(&self.cfg, epoch);
            self.set_learning_rate(lr);
            let mut acc = (0.0, 0.0, 0.0);
            let batches = epoch_batches(self.cfg.seed, data.len(), self.cfg.batch_size, epoch);
            for idx in &batches {
                let out = self.train_step(&data.select(idx))?;
                acc.0 += out.loss;
                acc.1 += out.ce;
                acc.2 += out.reg;
            }
            let nb = batches.len().max(1) as f64;
            logs.push(EpochLog {
                epoch,
                loss: acc.0 / nb,
                ce: acc.1 / nb,
                reg: acc.2 / nb,
                learning_rate: lr,
            });
        }
        Ok(logs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Monte-Carlo 0-1 risk over latent draws.
    pub risk: f64,
    pub per_class_risk: Vec<f64>,
}

const EVAL_CHUNK: usize = 256;

/// 0-1 risk of the argmax of the softmax averaged over `n_samples` latent
/// draws per input.
pub fn evaluate(models: &Models, data: &MultiViewData, n_samples: usize, seed: u64) -> Result<Evaluation> {
    if n_samples == 0 {
        return Err(Error::Precondition("need at least one evaluation sample".into()));
    }
    let mut errors = vec![0.0; data.classes];
    let counts = data.class_counts();
    let d = models.latent_dim();
    for (chunk, start) in (0..data.len()).step_by(EVAL_CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let part = data.select(&idx);
        let mut draws = Vec::with_capacity(models.num_views());
        for (k, (enc, x)) in models.encoders.iter().zip(&part.views).enumerate() {
            let pass = enc.forward(x)?;
            let xi = nets::draw_noise(
                idx.len() * n_samples,
                d,
                &mut rng::stream(seed, &[chunk as u64, k as u64]),
            );
            draws.push(nets::reparameterize(&pass.mu, &pass.sigma, &xi, n_samples));
        }
        let refs: Vec<_> = draws.iter().map(|v| v.view()).collect();
        let u = ndarray::concatenate(ndarray::Axis(1), &refs).expect("aligned rows");
        let logits = models.decoder.logits(&u);
        let mut probs = Array2::<f64>::zeros((idx.len(), data.classes));
        for (r, row) in logits.rows().into_iter().enumerate() {
            let lse = gaussian::log_sum_exp(row.as_slice().expect("contiguous logits"));
            probs
                .row_mut(r / n_samples)
                .zip_mut_with(&row, |p, &v| *p += (v - lse).exp());
        }
        for (r, row) in probs.rows().into_iter().enumerate() {
            let y = part.labels[r];
            let pred = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, &v)| if v > best.1 { (c, v) } else { best },
                )
                .0;
            if pred != y {
                errors[y] += 1.0;
            }
        }
    }
    let risk = errors.iter().sum::<f64>() / data.len().max(1) as f64;
    let per_class_risk = errors
        .iter()
        .zip(&counts)
        .map(|(e, &c)| if c == 0 { 0.0 } else { e / c as f64 })
        .collect();
    Ok(Evaluation {
        accuracy: 1.0 - risk,
        risk,
        per_class_risk,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdlEstimate {
    pub total: f64,
    pub per_sample: Vec<f64>,
}

/// Plug-in description length of `data` under the prior: the sum over
/// samples of the KL estimate between the encoder's latent and the class
/// prior.
pub fn estimate_mdl(models: &Models, prior: &PriorEngine, data: &MultiViewData) -> Result<MdlEstimate> {
    let passes = models
        .encoders
        .iter()
        .zip(&data.views)
        .map(|(e, x)| e.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let per_sample = prior.kl_estimates(&latents_of(&passes, &data.labels)?)?;
    Ok(MdlEstimate {
        total: per_sample.iter().sum(),
        per_sample,
    })
}
