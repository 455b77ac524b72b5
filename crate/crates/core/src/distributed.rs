//! In-process simulation of `K` clients and one server training a
//! multi-view model with the joint product-mixture regularizer.
//!
//! Each client holds one view's encoder and its bank of prior components;
//! the server holds the decoder and the joint weight tensor. A round:
//!
//! 1. every client encodes its view, draws latents and reports its `b x M`
//!    divergence matrix (plus product terms and entropies) with the draws;
//! 2. the server forms joint responsibilities from the reports, steps the
//!    decoder, updates the joint weights and returns per-view marginal
//!    coefficients and draw gradients;
//! 3. every client steps its encoder, refits its components from the
//!    marginal coefficients and acknowledges with a digest of its bank.
//!
//! Messages cross the boundary only as bytes. Nothing of size `M^K` is sent.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixture;
use crate::nets::{self, Adam, DecoderLinear, EncoderMlp, EncoderPass, Models};
use crate::prior_multi::{JointWeights, ProductMixturePrior, ViewBank, ViewLatents};
use crate::prior_single::{KlEstimate, UpdateHyper};
use crate::rng;
use crate::synth::MultiViewData;
use crate::training::{self, PriorEngine, StepOutput, TrainConfig, Trainer};

const TAG_REPORT: u8 = 1;
const TAG_COEFFS: u8 = 2;
const TAG_ACK: u8 = 3;

/// Phase-1 message from client `view`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientKlReport {
    pub round: u64,
    pub view: u32,
    /// `b x M` divergences to the components of each sample's class.
    pub div: Array2<f64>,
    /// `b x M` log product integrals, present under the average estimate.
    pub log_t: Option<Array2<f64>>,
    /// Per-sample entropy term.
    pub entropy: Vec<f64>,
    /// Latent draws, `b * samples x d`.
    pub draws: Array2<f64>,
}

/// Phase-2 coefficients for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCoeffs {
    pub view: u32,
    /// `b x M` marginal responsibilities.
    pub gamma: Array2<f64>,
    /// `b x M` marginal product weights under the average estimate.
    pub beta: Option<Array2<f64>>,
    /// `C x M` marginal weights after this round's update.
    pub marginal_weights: Array2<f64>,
    /// Gradient of the mean cross-entropy with respect to the draws.
    pub grad_draws: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerCoeffs {
    pub round: u64,
    pub loss: f64,
    pub ce: f64,
    /// Joint regularizer summed over the batch; informational.
    pub reg: f64,
    pub views: Vec<ViewCoeffs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientAck {
    pub round: u64,
    pub view: u32,
    /// SHA-256 of the client's bank after the update.
    pub digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundMessage {
    Report(ClientKlReport),
    Coeffs(ServerCoeffs),
    Ack(ClientAck),
}

impl RoundMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Report(_) => "report",
            Self::Coeffs(_) => "coeffs",
            Self::Ack(_) => "ack",
        }
    }

    pub fn view(&self) -> Option<u32> {
        match self {
            Self::Report(r) => Some(r.view),
            Self::Coeffs(_) => None,
            Self::Ack(a) => Some(a.view),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn vec(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|x| self.f64(*x));
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        m.iter().for_each(|x| self.f64(*x));
    }

    fn opt_matrix(&mut self, m: Option<&Array2<f64>>) {
        match m {
            Some(m) => {
                self.u8(1);
                self.matrix(m);
            }
            None => self.u8(0),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                offset: self.pos,
                reason: format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::Decode {
                offset: at,
                reason: "non-finite value".into(),
            });
        }
        Ok(v)
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let vals = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((r, c), vals).expect("sized"))
    }

    fn opt_matrix(&mut self) -> Result<Option<Array2<f64>>> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(None),
            1 => self.matrix().map(Some),
            f => Err(Error::Decode {
                offset: at,
                reason: format!("bad option flag {f}"),
            }),
        }
    }
}

/// Frame: `u64` body length, then a tag byte and the fields, all
/// little-endian. Matrices are `u32` rows, `u32` columns, row-major `f64`.
pub fn serialize_message(msg: &RoundMessage) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        RoundMessage::Report(r) => {
            w.u8(TAG_REPORT);
            w.u64(r.round);
            w.u32(r.view);
            w.matrix(&r.div);
            w.opt_matrix(r.log_t.as_ref());
            w.vec(&r.entropy);
            w.matrix(&r.draws);
        }
        RoundMessage::Coeffs(c) => {
            w.u8(TAG_COEFFS);
            w.u64(c.round);
            w.f64(c.loss);
            w.f64(c.ce);
            w.f64(c.reg);
            w.u32(c.views.len() as u32);
            for v in &c.views {
                w.u32(v.view);
                w.matrix(&v.gamma);
                w.opt_matrix(v.beta.as_ref());
                w.matrix(&v.marginal_weights);
                w.matrix(&v.grad_draws);
            }
        }
        RoundMessage::Ack(a) => {
            w.u8(TAG_ACK);
            w.u64(a.round);
            w.u32(a.view);
            w.0.extend_from_slice(&a.digest);
        }
    }
    let body = w.0;
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn deserialize_message(buf: &[u8]) -> Result<RoundMessage> {
    let mut r = Reader { buf, pos: 0 };
    let len = r.u64()? as usize;
    if buf.len() - 8 != len {
        return Err(Error::Decode {
            offset: 0,
            reason: format!("frame declares {len} body bytes, buffer holds {}", buf.len() - 8),
        });
    }
    let at = r.pos;
    let msg = match r.u8()? {
        TAG_REPORT => RoundMessage::Report(ClientKlReport {
            round: r.u64()?,
            view: r.u32()?,
            div: r.matrix()?,
            log_t: r.opt_matrix()?,
            entropy: r.vec()?,
            draws: r.matrix()?,
        }),
        TAG_COEFFS => {
            let round = r.u64()?;
            let loss = r.f64()?;
            let ce = r.f64()?;
            let reg = r.f64()?;
            let n = r.u32()?;
            let views = (0..n)
                .map(|_| {
                    Ok(ViewCoeffs {
                        view: r.u32()?,
                        gamma: r.matrix()?,
                        beta: r.opt_matrix()?,
                        marginal_weights: r.matrix()?,
                        grad_draws: r.matrix()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            RoundMessage::Coeffs(ServerCoeffs {
                round,
                loss,
                ce,
                reg,
                views,
            })
        }
        TAG_ACK => RoundMessage::Ack(ClientAck {
            round: r.u64()?,
            view: r.u32()?,
            digest: r.take(32)?.try_into().expect("32 bytes"),
        }),
        t => {
            return Err(Error::Decode {
                offset: at,
                reason: format!("unknown message tag {t}"),
            })
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Decode {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    Ok(msg)
}

pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// One view's encoder, optimizer and prior components.
#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    view: usize,
    num_views: usize,
    encoder: EncoderMlp,
    opt: Adam,
    bank: ViewBank,
    hyper: UpdateHyper,
    pending: Option<Pending>,
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    pass: EncoderPass,
    var: Array2<f64>,
    xi: Array2<f64>,
    labels: Vec<usize>,
}

impl Client {
    pub fn view(&self) -> usize {
        self.view
    }

    pub fn encoder(&self) -> &EncoderMlp {
        &self.encoder
    }

    pub fn bank(&self) -> &ViewBank {
        &self.bank
    }

    /// Phase 1: encode, draw, and report divergences.
    pub fn report(
        &mut self,
        x: &Array2<f64>,
        labels: &[usize],
        round: u64,
        step_seed: u64,
        per_sample: usize,
    ) -> Result<ClientKlReport> {
        let pass = self.encoder.forward(x)?;
        let xi = nets::draw_noise(
            x.nrows() * per_sample,
            self.encoder.latent_dim(),
            &mut rng::stream(step_seed, &[self.view as u64]),
        );
        let draws = nets::reparameterize(&pass.mu, &pass.sigma, &xi, per_sample);
        let var = mixture::latent_var(&pass.sigma);
        let stats = self.bank.stats(&self.hyper, self.num_views, &pass.mu, &var, labels);
        self.pending = Some(Pending {
            pass,
            var,
            xi,
            labels: labels.to_vec(),
        });
        Ok(ClientKlReport {
            round,
            view: self.view as u32,
            div: stats.div,
            log_t: stats.log_t,
            entropy: stats.entropy,
            draws,
        })
    }

    /// Phase 3: encoder step and component refit from the marginal
    /// coefficients.
    pub fn apply(&mut self, coeffs: &ViewCoeffs, reg_scale: f64, round: u64, step_seed: u64) -> Result<ClientAck> {
        let p = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol(format!("view {}: coefficients before report", self.view)))?;
        let per_sample = p.xi.nrows() / p.labels.len();
        let view = ViewLatents {
            mu: p.pass.mu.clone(),
            sigma: p.pass.sigma.clone(),
        };
        let (rg_mu, rg_sigma) = self.bank.gradient(
            &self.hyper,
            self.num_views,
            &view,
            &p.var,
            &p.labels,
            &coeffs.gamma,
            coeffs.beta.as_ref(),
            1.0,
        );
        let grad = training::view_encoder_grad(
            &self.encoder,
            &p.pass,
            &coeffs.grad_draws,
            &p.xi,
            per_sample,
            &rg_mu,
            &rg_sigma,
            reg_scale,
        );
        self.opt.step(&mut self.encoder, &grad);
        let cand = self.bank.m_step(
            &self.hyper,
            self.num_views,
            &view.mu,
            &p.var,
            &p.labels,
            &coeffs.gamma,
            coeffs.beta.as_ref(),
        );
        let mut present = vec![false; self.bank.components.len()];
        p.labels.iter().for_each(|&y| present[y] = true);
        self.bank.blend(
            &self.hyper,
            &cand,
            &present,
            self.view,
            round,
            training::prior_seed(step_seed),
        )?;
        Ok(ClientAck {
            round,
            view: self.view as u32,
            digest: self.bank_digest(),
        })
    }

    pub fn bank_digest(&self) -> [u8; 32] {
        let mut bytes = Vec::new();
        for class in &self.bank.components {
            for g in class {
                for x in g.mean().iter().chain(g.var()) {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        digest(&bytes)
    }
}

/// Decoder, its optimizer and the joint weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Server {
    decoder: DecoderLinear,
    opt: Adam,
    joint: JointWeights,
    hyper: UpdateHyper,
}

impl Server {
    pub fn decoder(&self) -> &DecoderLinear {
        &self.decoder
    }

    pub fn joint(&self) -> &JointWeights {
        &self.joint
    }

    /// Validates that `reports` hold exactly one report per view for
    /// `round`, and orders them by view.
    pub fn collect(&self, reports: Vec<ClientKlReport>, round: u64) -> Result<Vec<ClientKlReport>> {
        let mut slots: Vec<Option<ClientKlReport>> = vec![None; self.joint.k];
        for r in reports {
            let v = r.view as usize;
            if v >= self.joint.k {
                return Err(Error::Protocol(format!("report from unknown view {v}")));
            }
            if r.round != round {
                return Err(Error::Protocol(format!(
                    "view {v} reported for round {} during round {round}",
                    r.round
                )));
            }
            if slots[v].is_some() {
                return Err(Error::Protocol(format!("duplicate report from view {v}")));
            }
            slots[v] = Some(r);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(v, s)| s.ok_or_else(|| Error::Protocol(format!("missing report from view {v}"))))
            .collect()
    }

    /// Phase 2.
    pub fn coefficients(
        &mut self,
        reports: &[ClientKlReport],
        labels: &[usize],
        round: u64,
        lambda: f64,
        per_sample: usize,
    ) -> Result<ServerCoeffs> {
        let m = self.joint.m;
        let b = labels.len();
        for r in reports {
            if r.div.dim() != (b, m) || r.entropy.len() != b || r.draws.nrows() != b * per_sample {
                return Err(Error::Protocol(format!("view {} report has the wrong shape", r.view)));
            }
        }
        let log_alpha = self.joint.log_weights();
        let divs: Vec<&Array2<f64>> = reports.iter().map(|r| &r.div).collect();
        let gamma = mixture::joint_softmax(&log_alpha, m, labels, &divs, -1.0, true);
        let beta = if self.hyper.kl_estimate == KlEstimate::AvgVarProd {
            let lts = reports
                .iter()
                .map(|r| {
                    r.log_t
                        .as_ref()
                        .ok_or_else(|| Error::Protocol(format!("view {} sent no product terms", r.view)))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(mixture::joint_softmax(&log_alpha, m, labels, &lts, 1.0, true))
        } else {
            None
        };
        let entropy: Vec<f64> = (0..b).map(|i| reports.iter().map(|r| r.entropy[i]).sum()).collect();
        let reg: f64 = mixture::sample_values(self.hyper.kl_estimate, &gamma, beta.as_ref(), &entropy)
            .iter()
            .sum();
        let draws: Vec<Array2<f64>> = reports.iter().map(|r| r.draws.clone()).collect();
        let dec = self.decoder.loss(&draws, labels, per_sample)?;
        let loss = dec.ce + lambda / b as f64 * reg;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "round {round}: loss {loss} (cross-entropy {}, regularizer {reg})",
                dec.ce
            )));
        }
        self.opt.step(&mut self.decoder, &dec.grad);
        let beta_rows = beta.as_ref().map(|x| x.rows.as_ref().expect("rows kept"));
        let (cand, present) = mixture::weight_candidates(
            &self.joint.weights,
            labels,
            gamma.rows.as_ref().expect("rows kept"),
            beta_rows,
        );
        mixture::blend_weights(&self.hyper, &mut self.joint.weights, &cand, &present);
        let classes = self.joint.weights.len();
        let mut gamma_marg = gamma.marginals.into_iter();
        let mut beta_marg = beta.map(|x| x.marginals.into_iter());
        let views = dec
            .grad_u
            .into_iter()
            .enumerate()
            .map(|(k, grad_draws)| ViewCoeffs {
                view: k as u32,
                gamma: gamma_marg.next().expect("one per view"),
                beta: beta_marg.as_mut().map(|it| it.next().expect("one per view")),
                marginal_weights: Array2::from_shape_fn((classes, m), |(c, j)| self.joint.marginal(c, k)[j]),
                grad_draws,
            })
            .collect();
        Ok(ServerCoeffs {
            round,
            loss,
            ce: dec.ce,
            reg,
            views,
        })
    }
}

/// Digest and size of one message on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub kind: String,
    pub view: Option<u32>,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub messages: Vec<MessageRecord>,
    pub wire_bytes: usize,
    /// Wall-clock nanoseconds of phases 1, 2 and 3.
    pub phase_nanos: [u128; 3],
    pub output: StepOutput,
}

/// Clients, server and the ordered per-endpoint queues.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub server: Server,
    pub clients: Vec<Client>,
    cfg: TrainConfig,
    round: u64,
    keep_payloads: bool,
    payloads: Vec<Vec<u8>>,
    logs: Vec<RoundLog>,
}

impl Simulator {
    /// Splits a monolithic trainer's state across clients and server. The
    /// trainer must carry a joint prior, or a single per-view bank.
    pub fn from_trainer(trainer: &Trainer) -> Result<Self> {
        let prior = match &trainer.prior {
            PriorEngine::Joint(p) => p.clone(),
            PriorEngine::PerView(banks) if banks.len() == 1 => {
                let bank = &banks[0];
                ProductMixturePrior::from_parts(
                    JointWeights {
                        m: bank.num_components(),
                        k: 1,
                        weights: bank.mixtures().iter().map(|x| x.weights().to_vec()).collect(),
                    },
                    vec![ViewBank {
                        components: bank.mixtures().iter().map(|x| x.components().to_vec()).collect(),
                        eps: bank.hyper().eps_lossy,
                    }],
                    *bank.hyper(),
                )?
            }
            _ => return Err(Error::Precondition("the simulator needs a mixture prior".into())),
        };
        let lr = trainer.cfg.learning_rate;
        let k = trainer.models.num_views();
        let clients = trainer
            .models
            .encoders
            .iter()
            .zip(prior.views())
            .enumerate()
            .map(|(v, (enc, bank))| Client {
                view: v,
                num_views: k,
                encoder: enc.clone(),
                opt: Adam::new(lr),
                bank: bank.clone(),
                hyper: *prior.hyper(),
                pending: None,
            })
            .collect();
        Ok(Self {
            server: Server {
                decoder: trainer.models.decoder.clone(),
                opt: Adam::new(lr),
                joint: prior.joint().clone(),
                hyper: *prior.hyper(),
            },
            clients,
            cfg: trainer.cfg.clone(),
            round: 0,
            keep_payloads: false,
            payloads: Vec::new(),
            logs: Vec::new(),
        })
    }

    /// Keeps every serialized message for [`Simulator::dump`].
    pub fn keep_payloads(&mut self, keep: bool) {
        self.keep_payloads = keep;
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn rounds(&self) -> u64 {
        self.round
    }

    pub fn models(&self) -> Models {
        Models {
            encoders: self.clients.iter().map(|c| c.encoder.clone()).collect(),
            decoder: self.server.decoder.clone(),
        }
    }

    pub fn prior(&self) -> Result<ProductMixturePrior> {
        ProductMixturePrior::from_parts(
            self.server.joint.clone(),
            self.clients.iter().map(|c| c.bank.clone()).collect(),
            self.server.hyper,
        )
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.server.opt.lr = lr;
        self.clients.iter_mut().for_each(|c| c.opt.lr = lr);
    }

    pub fn run_round(&mut self, batch: &MultiViewData) -> Result<&RoundLog> {
        self.run_round_filtered(batch, |_| true)
    }

    /// [`Simulator::run_round`] where messages rejected by `deliver` are
    /// dropped in transit.
    pub fn run_round_filtered(
        &mut self,
        batch: &MultiViewData,
        mut deliver: impl FnMut(&RoundMessage) -> bool,
    ) -> Result<&RoundLog> {
        if batch.num_views() != self.clients.len() {
            return Err(Error::Protocol(format!(
                "batch has {} views for {} clients",
                batch.num_views(),
                self.clients.len()
            )));
        }
        let round = self.round;
        let seed = training::step_seed(self.cfg.seed, round);
        let per_sample = self.cfg.samples_train;
        let mut records = Vec::new();
        let mut send =
            |msg: RoundMessage, queue: &mut VecDeque<Vec<u8>>, deliver: &mut dyn FnMut(&RoundMessage) -> bool| {
                let bytes = serialize_message(&msg);
                records.push(MessageRecord {
                    kind: msg.kind().into(),
                    view: msg.view(),
                    bytes: bytes.len(),
                    sha256: hex(&digest(&bytes)),
                });
                if deliver(&msg) {
                    queue.push_back(bytes);
                }
            };

        let t0 = Instant::now();
        let mut server_inbox = VecDeque::new();
        for (client, x) in self.clients.iter_mut().zip(&batch.views) {
            let report = client.report(x, &batch.labels, round, seed, per_sample)?;
            send(RoundMessage::Report(report), &mut server_inbox, &mut deliver);
        }
        let reports = server_inbox
            .drain(..)
            .map(|bytes| match deserialize_message(&bytes)? {
                RoundMessage::Report(r) => Ok(r),
                other => Err(Error::Protocol(format!(
                    "server received a {} message in phase 1",
                    other.kind()
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let reports = self.server.collect(reports, round)?;

        let t1 = Instant::now();
        let coeffs = self
            .server
            .coefficients(&reports, &batch.labels, round, self.cfg.lambda, per_sample)?;
        let output = StepOutput {
            loss: coeffs.loss,
            ce: coeffs.ce,
            reg: coeffs.reg,
        };
        let mut client_inbox = VecDeque::new();
        send(RoundMessage::Coeffs(coeffs), &mut client_inbox, &mut deliver);
        let coeffs = match client_inbox.pop_front().map(|b| deserialize_message(&b)).transpose()? {
            Some(RoundMessage::Coeffs(c)) => c,
            _ => {
                return Err(Error::Protocol(format!(
                    "round {round}: clients received no coefficients"
                )))
            }
        };
        if coeffs.views.len() != self.clients.len() {
            return Err(Error::Protocol("coefficients do not cover every view".into()));
        }

        let t2 = Instant::now();
        let reg_scale = self.cfg.lambda / batch.len() as f64;
        let mut acks = VecDeque::new();
        for (client, vc) in self.clients.iter_mut().zip(&coeffs.views) {
            let ack = client.apply(vc, reg_scale, round, seed)?;
            send(RoundMessage::Ack(ack), &mut acks, &mut deliver);
        }
        let mut acked = vec![false; self.clients.len()];
        for bytes in acks {
            match deserialize_message(&bytes)? {
                RoundMessage::Ack(a) if (a.view as usize) < acked.len() => acked[a.view as usize] = true,
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected {} message in phase 3",
                        other.kind()
                    )))
                }
            }
        }
        if let Some(v) = acked.iter().position(|a| !a) {
            return Err(Error::Protocol(format!("missing acknowledgement from view {v}")));
        }
        let t3 = Instant::now();

        if self.keep_payloads {
            for r in &reports {
                self.payloads.push(serialize_message(&RoundMessage::Report(r.clone())));
            }
            self.payloads.push(serialize_message(&RoundMessage::Coeffs(coeffs)));
        }
        let log = RoundLog {
            round,
            wire_bytes: records.iter().map(|r| r.bytes).sum(),
            messages: records,
            phase_nanos: [(t1 - t0).as_nanos(), (t2 - t1).as_nanos(), (t3 - t2).as_nanos()],
            output,
        };
        self.logs.push(log);
        self.round += 1;
        Ok(self.logs.last().expect("just pushed"))
    }

    /// Same epoch schedule as [`Trainer::fit`].
    pub fn fit(&mut self, data: &MultiViewData) -> Result<()> {
        for epoch in 0..self.cfg.epochs {
            self.set_learning_rate(training::epoch_learning_rate(&self.cfg, epoch));
            for idx in training::epoch_batches(self.cfg.seed, data.len(), self.cfg.batch_size, epoch) {
                self.run_round(&data.select(&idx))?;
            }
        }
        Ok(())
    }

    /// Writes `rounds.bin` (kept payloads, back to back) and `rounds.json`
    /// (the round logs).
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("rounds.bin"), self.payloads.concat())?;
        fs::write(dir.join("rounds.json"), serde_json::to_string_pretty(&self.logs)?)?;
        Ok(())
    }
}
