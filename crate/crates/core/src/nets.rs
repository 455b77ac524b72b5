//! Stochastic MLP encoders, a linear softmax decoder and Adam, with
//! hand-written backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, VAR_FLOOR};
use crate::rng;

pub const LEAKY_SLOPE: f64 = 0.1;
/// Upper clamp on the log-variance head.
pub const LOGVAR_MAX: f64 = 50.0;

/// Parameter tensors in a fixed order.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Affine layer `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.random_range(-a..a)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    fn backward(&self, x: &Array2<f64>, g_out: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &x.t().dot(g_out);
        grad.bias += &g_out.sum_axis(Axis(0));
        g_out.dot(&self.weight.t())
    }
}

impl Params for Dense {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// MLP with leaky-rectifier hidden layers whose last layer emits
/// `[mean | log variance]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMlp {
    layers: Vec<Dense>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPass {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    logvar: Array2<f64>,
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

impl EncoderMlp {
    pub fn new<R: Rng>(input: usize, hidden: &[usize], latent: usize, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * latent);
        Self {
            layers: sizes.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Precondition("encoder needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Dimension {
                    expected: w[0].output_dim(),
                    got: w[1].input_dim(),
                    context: "encoder layer chain",
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Dimension {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                    context: "encoder bias",
                });
            }
        }
        let out = layers.last().expect("non-empty").output_dim();
        if out == 0 || !out.is_multiple_of(2) {
            return Err(Error::Precondition(format!(
                "encoder output {out} must be even and positive"
            )));
        }
        let enc = Self { layers };
        if enc.params().iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(enc)
    }

    /// Same shapes, all zeros; also serves as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim() / 2
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<EncoderPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
                context: "encoder input",
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if l == last {
                h = z;
            } else {
                h = z.mapv(leaky);
                pre.push(z);
            }
        }
        let d = self.latent_dim();
        let mu = h.slice(ndarray::s![.., ..d]).to_owned();
        let logvar = h.slice(ndarray::s![.., d..]).to_owned();
        let sigma = logvar.mapv(|lv| lv.min(LOGVAR_MAX).exp().max(VAR_FLOOR).sqrt());
        Ok(EncoderPass {
            inputs,
            pre,
            logvar,
            mu,
            sigma,
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        let pass = self.forward(&Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row"))?;
        DiagGaussian::new(pass.mu.row(0).to_vec(), pass.sigma.row(0).mapv(|s| s * s).to_vec())
    }

    /// Parameter gradients given gradients on the mean and standard
    /// deviation outputs. The standard deviation carries no gradient where
    /// either clamp is active.
    pub fn backward(&self, pass: &EncoderPass, g_mu: &Array2<f64>, g_sigma: &Array2<f64>) -> EncoderMlp {
        let d = self.latent_dim();
        let b = g_mu.nrows();
        let mut g = Array2::zeros((b, 2 * d));
        g.slice_mut(ndarray::s![.., ..d]).assign(g_mu);
        for i in 0..b {
            for j in 0..d {
                let lv = pass.logvar[[i, j]];
                let active = lv < LOGVAR_MAX && lv.exp() > VAR_FLOOR;
                g[[i, d + j]] = if active {
                    g_sigma[[i, j]] * 0.5 * pass.sigma[[i, j]]
                } else {
                    0.0
                };
            }
        }
        let mut grad = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                g.zip_mut_with(&pass.pre[l], |gv, &z| {
                    if z <= 0.0 {
                        *gv *= LEAKY_SLOPE
                    }
                });
            }
            g = self.layers[l].backward(&pass.inputs[l], &g, &mut grad.layers[l]);
        }
        grad
    }
}

impl Params for EncoderMlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Linear map from the concatenated latents to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLinear {
    pub layer: Dense,
}

/// Decoder loss on a batch of latent draws.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// Mean cross-entropy over all draws.
    pub ce: f64,
    pub grad: DecoderLinear,
    /// Gradient of `ce` with respect to each view's draws.
    pub grad_u: Vec<Array2<f64>>,
}

impl DecoderLinear {
    pub fn new<R: Rng>(input: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            layer: Dense::xavier(input, classes, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer: Dense::zeros(self.layer.input_dim(), self.layer.output_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.layer.output_dim()
    }

    pub fn logits(&self, u: &Array2<f64>) -> Array2<f64> {
        self.layer.forward(u)
    }

    /// Softmax cross-entropy of draws `u_views` (rows aligned across views)
    /// against `labels`, where row `r` belongs to sample `r / per_sample`.
    pub fn loss(&self, u_views: &[Array2<f64>], labels: &[usize], per_sample: usize) -> Result<DecoderOutput> {
        let u = concat(u_views)?;
        if u.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: u.ncols(),
                context: "decoder input",
            });
        }
        let rows = u.nrows();
        if rows != labels.len() * per_sample {
            return Err(Error::Dimension {
                expected: labels.len() * per_sample,
                got: rows,
                context: "latent draws",
            });
        }
        let mut probs = self.logits(&u);
        let mut ce = 0.0;
        for (r, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
            let logits = row.to_vec();
            let lse = crate::gaussian::softmax_into(&logits, row.as_slice_mut().expect("row-major"));
            let y = labels[r / per_sample];
            ce += lse - logits[y];
            row[y] -= 1.0;
        }
        let scale = 1.0 / rows as f64;
        probs.mapv_inplace(|g| g * scale);
        let mut grad = self.zeros_like();
        let g_u = self.layer.backward(&u, &probs, &mut grad.layer);
        let mut grad_u = Vec::with_capacity(u_views.len());
        let mut col = 0;
        for v in u_views {
            grad_u.push(g_u.slice(ndarray::s![.., col..col + v.ncols()]).to_owned());
            col += v.ncols();
        }
        Ok(DecoderOutput {
            ce: ce * scale,
            grad,
            grad_u,
        })
    }
}

impl Params for DecoderLinear {
    fn params(&self) -> Vec<&[f64]> {
        self.layer.params()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer.params_mut()
    }
}

fn concat(views: &[Array2<f64>]) -> Result<Array2<f64>> {
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::concatenate(Axis(1), &refs).map_err(|_| Error::Precondition("latent draws have mismatched rows".into()))
}

/// Standard normal draws, `rows x d`.
pub fn draw_noise<R: Rng>(rows: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |_| StandardNormal.sample(rng))
}

/// Reparameterized draws `mu + sigma * xi`, `per_sample` consecutive rows
/// per input.
pub fn reparameterize(mu: &Array2<f64>, sigma: &Array2<f64>, xi: &Array2<f64>, per_sample: usize) -> Array2<f64> {
    let d = mu.ncols();
    Array2::from_shape_fn((xi.nrows(), d), |(r, j)| {
        let i = r / per_sample;
        mu[[i, j]] + sigma[[i, j]] * xi[[r, j]]
    })
}

/// Sums the draw gradients of each input into mean and standard deviation
/// gradients.
pub fn pathwise_grads(g_u: &Array2<f64>, xi: &Array2<f64>, per_sample: usize) -> (Array2<f64>, Array2<f64>) {
    let b = g_u.nrows() / per_sample;
    let d = g_u.ncols();
    let mut g_mu = Array2::zeros((b, d));
    let mut g_sigma = Array2::zeros((b, d));
    for r in 0..g_u.nrows() {
        let i = r / per_sample;
        for j in 0..d {
            g_mu[[i, j]] += g_u[[r, j]];
            g_sigma[[i, j]] += g_u[[r, j]] * xi[[r, j]];
        }
    }
    (g_mu, g_sigma)
}

/// `n` draws from `g`; row `s` is `mean + sd * xi_s`.
pub fn sample_latent(g: &DiagGaussian, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let d = g.dim();
    let xi = draw_noise(n, d, &mut rng::stream(seed, &[]));
    let mu = Array2::from_shape_vec((1, d), g.mean().to_vec()).expect("one row");
    let sd = Array2::from_shape_vec((1, d), g.var().iter().map(|v| v.sqrt()).collect()).expect("one row");
    Ok(reparameterize(&mu, &sd, &xi, n))
}

/// Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Params>(&mut self, model: &mut P, grad: &P) {
        let grads = grad.params();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Encoders (one per view) and the shared decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub encoders: Vec<EncoderMlp>,
    pub decoder: DecoderLinear,
}

impl Models {
    /// Xavier-initialized models; each network draws from its own stream.
    pub fn new(view_dims: &[usize], hidden: &[usize], latent: usize, classes: usize, seed: u64) -> Self {
        let encoders = view_dims
            .iter()
            .enumerate()
            .map(|(k, &dim)| EncoderMlp::new(dim, hidden, latent, &mut rng::stream(seed, &[0xe7c, k as u64])))
            .collect();
        let decoder = DecoderLinear::new(view_dims.len() * latent, classes, &mut rng::stream(seed, &[0xdec]));
        Self { encoders, decoder }
    }

    pub fn num_views(&self) -> usize {
        self.encoders.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoders[0].latent_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoders: self.encoders.iter().map(EncoderMlp::zeros_like).collect(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Shapes as JSON plus every parameter as little-endian `f64`, in
    /// [`Params`] order: encoders by view, then the decoder.
    pub fn to_checkpoint(&self) -> Result<(String, Vec<u8>)> {
        let header = CheckpointHeader {
            schema_version: 1,
            encoders: self
                .encoders
                .iter()
                .map(|e| e.layers.iter().map(|l| [l.input_dim(), l.output_dim()]).collect())
                .collect(),
            decoder: [self.decoder.input_dim(), self.decoder.classes()],
        };
        let mut bytes = Vec::with_capacity(8 * self.num_params());
        for p in self.params() {
            for x in p {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok((serde_json::to_string_pretty(&header)?, bytes))
    }

    pub fn from_checkpoint(json: &str, bytes: &[u8]) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_str(json)?;
        if header.schema_version != 1 {
            return Err(Error::Precondition(format!(
                "unsupported checkpoint schema {}",
                header.schema_version
            )));
        }
        let encoders = header
            .encoders
            .iter()
            .map(|shapes| EncoderMlp {
                layers: shapes.iter().map(|&[i, o]| Dense::zeros(i, o)).collect(),
            })
            .collect();
        let mut models = Self {
            encoders,
            decoder: DecoderLinear {
                layer: Dense::zeros(header.decoder[0], header.decoder[1]),
            },
        };
        let expected = 8 * models.num_params();
        if bytes.len() != expected {
            return Err(Error::Decode {
                offset: bytes.len().min(expected),
                reason: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let mut chunks = bytes.chunks_exact(8);
        for p in models.params_mut() {
            for x in p.iter_mut() {
                *x = f64::from_le_bytes(chunks.next().expect("sized").try_into().expect("8 bytes"));
            }
        }
        let encoders = models
            .encoders
            .into_iter()
            .map(|e| EncoderMlp::from_layers(e.layers))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoders,
            decoder: models.decoder,
        })
    }
}

impl Params for Models {
    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.encoders.iter().flat_map(|e| e.params()).collect();
        out.extend(self.decoder.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        out.extend(self.decoder.params_mut());
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    schema_version: u32,
    /// `[input, output]` per layer, per view.
    encoders: Vec<Vec<[usize; 2]>>,
    decoder: [usize; 2],
}
