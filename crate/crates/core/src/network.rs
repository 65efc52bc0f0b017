//! Shared-trunk network with three output heads.
//!
//! A stack of tanh layers feeds three linear heads: expression logits
//! (softmax), action-unit logits (sigmoid) and unbounded valence/arousal.
//! Gradients are computed analytically and can be verified against central
//! finite differences with [`gradient_check`].

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labels::{N_AUS, N_EMOTIONS};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Rows per chunk in [`Network::predict`]; fixed so results never depend on
/// the execution strategy.
const PREDICT_CHUNK: usize = 256;

/// AU probabilities are kept strictly inside (0, 1).
const PROB_CLAMP: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Width of the categorical head; 7 for basic expressions.
    pub emotion_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            dropout_rate: 0.5,
            seed: 0,
            emotion_classes: N_EMOTIONS,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidInput("input_dim must be at least 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidInput("hidden_dims must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidInput(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.emotion_classes < 2 {
            return Err(Error::InvalidInput("emotion head needs at least two classes".into()));
        }
        Ok(())
    }
}

/// Affine layer `x W + b`, weights stored fan_in × fan_out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit));
        Dense {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Every trainable tensor of the network. Also used for gradient buffers and
/// optimizer state, which share the same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub trunk: Vec<Dense>,
    pub emo: Dense,
    pub au: Dense,
    pub va: Dense,
}

impl Params {
    fn init(cfg: &NetworkConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fan_in = cfg.input_dim;
        let mut trunk = Vec::with_capacity(cfg.hidden_dims.len());
        for &h in &cfg.hidden_dims {
            trunk.push(Dense::glorot(fan_in, h, &mut rng));
            fan_in = h;
        }
        Params {
            trunk,
            emo: Dense::glorot(fan_in, cfg.emotion_classes, &mut rng),
            au: Dense::glorot(fan_in, N_AUS, &mut rng),
            va: Dense::glorot(fan_in, 2, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.weight.nrows(), d.weight.ncols());
        Params {
            trunk: self.trunk.iter().map(z).collect(),
            emo: z(&self.emo),
            au: z(&self.au),
            va: z(&self.va),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.emo, &self.au, &self.va])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([&mut self.emo, &mut self.au, &mut self.va])
    }

    pub fn len(&self) -> usize {
        self.layers().map(Dense::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view: per layer, weights in row-major order then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for d in self.layers() {
            out.extend(d.weight.iter());
            out.extend(d.bias.iter());
        }
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: self.len(),
                got: flat.len(),
            });
        }
        let mut values = flat.iter();
        for d in self.layers_mut() {
            for (dst, src) in d.weight.iter_mut().chain(d.bias.iter_mut()).zip(&mut values) {
                *dst = *src;
            }
        }
        Ok(())
    }

    pub fn get(&self, mut idx: usize) -> f64 {
        for d in self.layers() {
            if idx < d.weight.len() {
                return d.weight.as_slice().expect("standard layout")[idx];
            }
            idx -= d.weight.len();
            if idx < d.bias.len() {
                return d.bias[idx];
            }
            idx -= d.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn slot_mut(&mut self, mut idx: usize) -> &mut f64 {
        for d in self.layers_mut() {
            if idx < d.weight.len() {
                return &mut d.weight.as_slice_mut().expect("standard layout")[idx];
            }
            idx -= d.weight.len();
            if idx < d.bias.len() {
                return &mut d.bias[idx];
            }
            idx -= d.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn fill(&mut self, value: f64) {
        for d in self.layers_mut() {
            d.weight.fill(value);
            d.bias.fill(value);
        }
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for d in self.layers_mut() {
            d.weight *= factor;
            d.bias *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .all(|d| d.weight.iter().chain(d.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct Logits {
    pub emo: Array2<f64>,
    pub au: Array2<f64>,
    pub va: Array2<f64>,
}

/// Per-row network outputs: expression distribution, AU probabilities and
/// raw valence/arousal.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub emo_probs: Array2<f64>,
    pub au_probs: Array2<f64>,
    pub va: Array2<f64>,
}

impl Predictions {
    pub fn rows(&self) -> usize {
        self.emo_probs.nrows()
    }

    fn from_logits(logits: &Logits) -> Self {
        Predictions {
            emo_probs: softmax_rows(&logits.emo),
            au_probs: logits.au.mapv(sigmoid),
            va: logits.va.clone(),
        }
    }

    /// Stacks chunked predictions back together.
    pub fn concat(parts: &[Predictions]) -> Self {
        let cat = |f: fn(&Predictions) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("matching widths")
        };
        Predictions {
            emo_probs: cat(|p| &p.emo_probs),
            au_probs: cat(|p| &p.au_probs),
            va: cat(|p| &p.va),
        }
    }
}

/// Loss gradient with respect to the predictions (probabilities and VA).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrads {
    pub emo_probs: Array2<f64>,
    pub au_probs: Array2<f64>,
    pub va: Array2<f64>,
}

impl PredictionGrads {
    pub fn zeros(rows: usize, emotion_classes: usize) -> Self {
        PredictionGrads {
            emo_probs: Array2::zeros((rows, emotion_classes)),
            au_probs: Array2::zeros((rows, N_AUS)),
            va: Array2::zeros((rows, 2)),
        }
    }

    pub fn zeros_like(preds: &Predictions) -> Self {
        Self::zeros(preds.rows(), preds.emo_probs.ncols())
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &PredictionGrads) {
        self.emo_probs.scaled_add(alpha, &other.emo_probs);
        self.au_probs.scaled_add(alpha, &other.au_probs);
        self.va.scaled_add(alpha, &other.va);
    }

    /// Chains through softmax and sigmoid to get gradients on the logits.
    pub fn to_logit_grads(&self, preds: &Predictions) -> HeadGrads {
        let p = &preds.emo_probs;
        let g = &self.emo_probs;
        let dot = (p * g).sum_axis(Axis(1)).insert_axis(Axis(1));
        let emo = p * &(g - &dot);
        let au = &self.au_probs * &preds.au_probs.mapv(|q| q * (1.0 - q));
        HeadGrads {
            emo,
            au,
            va: self.va.clone(),
        }
    }
}

/// Upstream gradients on the head outputs (logits for the classifiers).
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub emo: Array2<f64>,
    pub au: Array2<f64>,
    pub va: Array2<f64>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    version: u64,
    /// Input of each trunk layer.
    inputs: Vec<Array2<f64>>,
    /// tanh outputs before dropout.
    activations: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers, when dropout was active.
    masks: Vec<Option<Array2<f64>>>,
    /// Output of the last trunk layer, shared by all heads.
    features: Array2<f64>,
}

pub struct Forward {
    pub logits: Logits,
    pub preds: Predictions,
    pub cache: Cache,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Params,
    grads: Params,
    version: u64,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        let grads = params.zeros_like();
        Ok(Network {
            config,
            params,
            grads,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    pub fn grads(&self) -> &Params {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Swaps the categorical head for a freshly initialized `classes`-way head.
    pub fn replace_emotion_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::InvalidInput("emotion head needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = self.params.emo.weight.nrows();
        self.params_mut().emo = Dense::glorot(fan_in, classes, &mut rng);
        self.grads.emo = Dense::zeros(fan_in, classes);
        self.config.emotion_classes = classes;
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite network input".into()));
        }
        Ok(())
    }

    /// Forward pass. Passing an RNG selects train mode, where inverted dropout
    /// is applied after every trunk layer.
    pub fn forward(&self, x: ArrayView2<f64>, train_rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        self.check_input(&x)?;
        let rate = self.config.dropout_rate;
        let mut rng = train_rng.filter(|_| rate > 0.0);

        let n_layers = self.params.trunk.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut activations = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut h = x.to_owned();
        for layer in &self.params.trunk {
            let a = layer.apply(&h.view()).mapv(f64::tanh);
            let mask = rng.as_deref_mut().map(|rng| {
                let keep = 1.0 - rate;
                Array2::from_shape_simple_fn(
                    a.raw_dim(),
                    || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    },
                )
            });
            let out = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            inputs.push(std::mem::replace(&mut h, out));
            activations.push(a);
            masks.push(mask);
        }

        let fv = h.view();
        let logits = Logits {
            emo: self.params.emo.apply(&fv),
            au: self.params.au.apply(&fv),
            va: self.params.va.apply(&fv),
        };
        let preds = Predictions::from_logits(&logits);
        Ok(Forward {
            logits,
            preds,
            cache: Cache {
                version: self.version,
                inputs,
                activations,
                masks,
                features: h,
            },
        })
    }

    /// Eval-mode predictions, computed in fixed-size row chunks.
    pub fn predict(&self, x: ArrayView2<f64>, exec: Exec) -> Result<Predictions> {
        self.check_input(&x)?;
        let starts: Vec<usize> = (0..x.nrows()).step_by(PREDICT_CHUNK).collect();
        let parts = exec.map(&starts, |&start| {
            let end = (start + PREDICT_CHUNK).min(x.nrows());
            self.forward(x.slice(s![start..end, ..]), None).map(|f| f.preds)
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(Predictions {
                emo_probs: Array2::zeros((0, self.config.emotion_classes)),
                au_probs: Array2::zeros((0, N_AUS)),
                va: Array2::zeros((0, 2)),
            });
        }
        Ok(Predictions::concat(&parts))
    }

    /// Accumulates parameter gradients for the given head gradients.
    pub fn backward(&mut self, cache: &Cache, upstream: &HeadGrads) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let rows = cache.features.nrows();
        for (name, g, width) in [
            ("emotion head gradient", &upstream.emo, self.config.emotion_classes),
            ("AU head gradient", &upstream.au, N_AUS),
            ("VA head gradient", &upstream.va, 2),
        ] {
            if g.nrows() != rows || g.ncols() != width {
                return Err(Error::Dimension {
                    context: name,
                    expected: rows * width,
                    got: g.len(),
                });
            }
        }

        let features = &cache.features;
        let mut d_feat = Array2::zeros(features.raw_dim());
        for (layer, grad, g) in [
            (&self.params.emo, &mut self.grads.emo, &upstream.emo),
            (&self.params.au, &mut self.grads.au, &upstream.au),
            (&self.params.va, &mut self.grads.va, &upstream.va),
        ] {
            grad.weight += &features.t().dot(g);
            grad.bias += &g.sum_axis(Axis(0));
            d_feat += &g.dot(&layer.weight.t());
        }

        let mut d_out = d_feat;
        for l in (0..self.params.trunk.len()).rev() {
            if let Some(mask) = &cache.masks[l] {
                d_out *= mask;
            }
            let a = &cache.activations[l];
            let dz = d_out * &a.mapv(|v| 1.0 - v * v);
            let grad = &mut self.grads.trunk[l];
            grad.weight += &cache.inputs[l].t().dot(&dz);
            grad.bias += &dz.sum_axis(Axis(0));
            d_out = dz.dot(&self.params.trunk[l].weight.t());
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.to_flat(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(ckpt.version));
        }
        let mut net = Network::new(ckpt.config.clone())?;
        net.params_mut().copy_from_flat(&ckpt.params)?;
        if !net.params.all_finite() {
            return Err(Error::InvalidInput("checkpoint holds non-finite parameters".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Versioned JSON dump of the configuration and the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: NetworkConfig,
    pub params: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms. Round-off in
/// the difference quotient is about `|loss| * 1e-16 / FD_STEP`, so smaller
/// floors flag noise on losses of order ten.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Compares analytic gradients of `loss` with central differences on
/// `coordinates` randomly chosen parameters (all of them if fewer exist).
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
/// The network runs in eval mode; a loss that returns different values for
/// identical predictions is rejected.
pub fn gradient_check<F>(
    net: &mut Network,
    x: ArrayView2<f64>,
    loss: F,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Predictions) -> Result<(f64, PredictionGrads)>,
{
    let fwd = net.forward(x, None)?;
    let (value, pgrads) = loss(&fwd.preds)?;
    let again = loss(&net.forward(x, None)?.preds)?.0;
    if value.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministicLoss {
            first: value,
            second: again,
        });
    }
    net.zero_grads();
    net.backward(&fwd.cache, &pgrads.to_logit_grads(&fwd.preds))?;
    let analytic = net.grads.clone();

    let total = net.num_params();
    let picked: BTreeSet<usize> = if coordinates >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, coordinates)
            .into_iter()
            .collect()
    };

    let eval_at = |net: &mut Network, idx: usize, value: f64| -> Result<f64> {
        *net.params_mut().slot_mut(idx) = value;
        Ok(loss(&net.forward(x, None)?.preds)?.0)
    };

    let mut max_rel: f64 = 0.0;
    for &idx in &picked {
        let orig = net.params.get(idx);
        let plus = eval_at(net, idx, orig + FD_STEP)?;
        let minus = eval_at(net, idx, orig - FD_STEP)?;
        *net.params_mut().slot_mut(idx) = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.get(idx);
        let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coordinates: picked.len(),
    })
}
