//! Parameterised function classes with exact reverse-mode gradients.
//!
//! Three architectures cover every critic, reward and policy network in the
//! crate: a lookup table, a bias-free linear model over a feature map, and a
//! two-layer tanh MLP.  Gradients are hand-derived through a closed set of
//! primitives (affine maps, tanh, square, log-softmax, min), so each loss can
//! be checked exhaustively against finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a cell index is turned into a feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// One-hot encoding over `n` cells, e.g. states or `(s, a)` pairs.
    OneHot { n: usize },
    /// Raw feature vectors of length `dim`.
    Identity { dim: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match *self {
            FeatureMap::OneHot { n } => n,
            FeatureMap::Identity { dim } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Arch {
    Tabular { cells: usize, out: usize },
    Linear { features: FeatureMap, out: usize },
    Mlp2 { features: FeatureMap, hidden: usize, out: usize },
}

impl Arch {
    pub fn n_params(&self) -> usize {
        match *self {
            Arch::Tabular { cells, out } => cells * out,
            Arch::Linear { features, out } => features.dim() * out,
            Arch::Mlp2 { features, hidden, out } => hidden * features.dim() + hidden + out * hidden + out,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            Arch::Tabular { out, .. } | Arch::Linear { out, .. } | Arch::Mlp2 { out, .. } => out,
        }
    }

    fn features(&self) -> Option<FeatureMap> {
        match *self {
            Arch::Tabular { .. } => None,
            Arch::Linear { features, .. } | Arch::Mlp2 { features, .. } => Some(features),
        }
    }
}

/// Output squashing applied on top of the raw network output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Identity,
    /// Hard clamp to `bounds`; zero gradient outside.
    Clamp,
    /// `lo + (hi - lo) * sigmoid(raw)`.
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Cell(usize),
    Vector(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFunction {
    pub arch: Arch,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub head: Head,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}

impl ParamFunction {
    pub fn zeros(arch: Arch) -> Self {
        ParamFunction {
            arch,
            params: vec![0.0; arch.n_params()],
            bounds: None,
            head: Head::Identity,
        }
    }

    /// Zero tables, Glorot-uniform weights and zero biases otherwise.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let mut f = Self::zeros(arch);
        match arch {
            Arch::Tabular { .. } => {}
            Arch::Linear { features, out } => {
                let a = (6.0 / (features.dim() + out) as f64).sqrt();
                f.params.iter_mut().for_each(|p| *p = rng.gen_range(-a..a));
            }
            Arch::Mlp2 { features, hidden, out } => {
                let d = features.dim();
                let a1 = (6.0 / (d + hidden) as f64).sqrt();
                let a2 = (6.0 / (hidden + out) as f64).sqrt();
                let (w1, rest) = f.params.split_at_mut(hidden * d);
                w1.iter_mut().for_each(|p| *p = rng.gen_range(-a1..a1));
                let w2 = &mut rest[hidden..hidden + out * hidden];
                w2.iter_mut().for_each(|p| *p = rng.gen_range(-a2..a2));
            }
        }
        f
    }

    pub fn with_head(mut self, head: Head, lo: f64, hi: f64) -> Self {
        self.head = head;
        self.bounds = Some([lo, hi]);
        self
    }

    #[inline]
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.arch.out_dim()
    }

    pub fn check_input(&self, input: Input<'_>) -> Result<()> {
        match (self.arch, input) {
            (Arch::Tabular { cells, .. }, Input::Cell(c)) if c < cells => Ok(()),
            (Arch::Tabular { cells, .. }, Input::Cell(c)) => Err(Error::shape("table cell", format!("< {cells}"), c)),
            (Arch::Tabular { .. }, Input::Vector(_)) => Err(Error::shape("tabular input", "cell index", "vector")),
            (_, input) => match (self.arch.features().expect("non-tabular"), input) {
                (FeatureMap::OneHot { n }, Input::Cell(c)) if c < n => Ok(()),
                (FeatureMap::OneHot { n }, Input::Cell(c)) => Err(Error::shape("one-hot cell", format!("< {n}"), c)),
                (FeatureMap::Identity { dim }, Input::Vector(x)) if x.len() == dim => Ok(()),
                (FeatureMap::Identity { dim }, Input::Vector(x)) => Err(Error::shape("feature vector", dim, x.len())),
                (FeatureMap::OneHot { n }, Input::Vector(x)) if x.len() == n => Ok(()),
                (fm, _) => Err(Error::shape("input", format!("{fm:?}"), "incompatible input")),
            },
        }
    }

    /// Checked forward pass.
    pub fn eval(&self, input: Input<'_>) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut out = vec![0.0; self.out_dim()];
        self.eval_into(input, &mut out);
        Ok(out)
    }

    /// Forward pass into `out` (length `out_dim`).  Inputs are assumed valid.
    pub fn eval_into(&self, input: Input<'_>, out: &mut [f64]) {
        self.raw_into(input, out);
        self.apply_head(out);
    }

    /// Forward for a single-output function.
    #[inline]
    pub fn eval_scalar(&self, input: Input<'_>) -> f64 {
        let mut out = [0.0];
        self.eval_into(input, &mut out);
        out[0]
    }

    fn apply_head(&self, out: &mut [f64]) {
        match (self.head, self.bounds) {
            (Head::Identity, _) | (_, None) => {}
            (Head::Clamp, Some([lo, hi])) => out.iter_mut().for_each(|y| *y = y.clamp(lo, hi)),
            (Head::Sigmoid, Some([lo, hi])) => out.iter_mut().for_each(|y| *y = lo + (hi - lo) * sigmoid(*y)),
        }
    }

    fn raw_into(&self, input: Input<'_>, out: &mut [f64]) {
        let p = &self.params;
        match self.arch {
            Arch::Tabular { out: k, .. } => {
                let Input::Cell(c) = input else { unreachable!("checked input") };
                out.copy_from_slice(&p[c * k..(c + 1) * k]);
            }
            Arch::Linear { features, out: k } => {
                let d = features.dim();
                for (j, o) in out.iter_mut().enumerate().take(k) {
                    let w = &p[j * d..(j + 1) * d];
                    *o = dot_features(w, input);
                }
            }
            Arch::Mlp2 { features, hidden, out: k } => {
                let h = self.hidden_activations(features, hidden, input);
                let d = features.dim();
                let w2 = &p[hidden * d + hidden..];
                for (j, o) in out.iter_mut().enumerate().take(k) {
                    let row = &w2[j * hidden..(j + 1) * hidden];
                    *o = row.iter().zip(&h).map(|(w, h)| w * h).sum::<f64>() + w2[k * hidden + j];
                }
            }
        }
    }

    fn hidden_activations(&self, features: FeatureMap, hidden: usize, input: Input<'_>) -> Vec<f64> {
        let d = features.dim();
        let p = &self.params;
        (0..hidden)
            .map(|j| {
                let w = &p[j * d..(j + 1) * d];
                (dot_features(w, input) + p[hidden * d + j]).tanh()
            })
            .collect()
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, input: Input<'_>, dout: &[f64], grad: &mut [f64]) {
        let k = self.out_dim();
        let mut draw = [0.0f64; 8];
        let mut heap;
        let draw: &mut [f64] = if k <= 8 {
            &mut draw[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        draw.copy_from_slice(dout);
        match (self.head, self.bounds) {
            (Head::Identity, _) | (_, None) => {}
            (Head::Clamp, Some([lo, hi])) => {
                let mut raw = vec![0.0; k];
                self.raw_into(input, &mut raw);
                for (d, r) in draw.iter_mut().zip(&raw) {
                    if *r < lo || *r > hi {
                        *d = 0.0;
                    }
                }
            }
            (Head::Sigmoid, Some([lo, hi])) => {
                let mut raw = vec![0.0; k];
                self.raw_into(input, &mut raw);
                for (d, r) in draw.iter_mut().zip(&raw) {
                    let s = sigmoid(*r);
                    *d *= (hi - lo) * s * (1.0 - s);
                }
            }
        }
        self.backward_raw(input, draw, grad);
    }

    fn backward_raw(&self, input: Input<'_>, dout: &[f64], grad: &mut [f64]) {
        match self.arch {
            Arch::Tabular { out: k, .. } => {
                let Input::Cell(c) = input else { unreachable!("checked input") };
                for (g, d) in grad[c * k..(c + 1) * k].iter_mut().zip(dout) {
                    *g += d;
                }
            }
            Arch::Linear { features, out: k } => {
                let d = features.dim();
                for j in 0..k {
                    add_features(&mut grad[j * d..(j + 1) * d], input, dout[j]);
                }
            }
            Arch::Mlp2 { features, hidden, out: k } => {
                let d = features.dim();
                let h = self.hidden_activations(features, hidden, input);
                let w2_off = hidden * d + hidden;
                let b2_off = w2_off + k * hidden;
                let mut dh = vec![0.0; hidden];
                for j in 0..k {
                    let dy = dout[j];
                    if dy == 0.0 {
                        continue;
                    }
                    grad[b2_off + j] += dy;
                    for i in 0..hidden {
                        grad[w2_off + j * hidden + i] += dy * h[i];
                        dh[i] += dy * self.params[w2_off + j * hidden + i];
                    }
                }
                for i in 0..hidden {
                    let dz = dh[i] * (1.0 - h[i] * h[i]);
                    if dz == 0.0 {
                        continue;
                    }
                    grad[hidden * d + i] += dz;
                    add_features(&mut grad[i * d..(i + 1) * d], input, dz);
                }
            }
        }
    }

    /// Index ranges of weight blocks (biases and tables excluded).
    pub fn weight_blocks(&self) -> Vec<std::ops::Range<usize>> {
        match self.arch {
            Arch::Tabular { .. } => vec![],
            Arch::Linear { .. } => vec![0..self.params.len()],
            Arch::Mlp2 { features, hidden, out } => {
                let d = features.dim();
                let w2 = hidden * d + hidden;
                vec![0..hidden * d, w2..w2 + out * hidden]
            }
        }
    }

    /// Index ranges of bias entries.
    pub fn bias_blocks(&self) -> Vec<std::ops::Range<usize>> {
        match self.arch {
            Arch::Tabular { .. } | Arch::Linear { .. } => vec![],
            Arch::Mlp2 { features, hidden, out } => {
                let d = features.dim();
                let b2 = hidden * d + hidden + out * hidden;
                vec![hidden * d..hidden * d + hidden, b2..b2 + out]
            }
        }
    }

    /// Rescale every weight block with norm above `radius` onto the ball.
    pub fn l2_project_weights(&mut self, radius: f64) {
        for block in self.weight_blocks() {
            let w = &mut self.params[block];
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > radius {
                let scale = radius / norm;
                w.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }

    /// Clip every parameter into `[lo, hi]`; the projection for box-bounded tables.
    pub fn clip_params(&mut self, lo: f64, hi: f64) {
        self.params.iter_mut().for_each(|p| *p = p.clamp(lo, hi));
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ParamFunction = serde_json::from_str(text)?;
        if f.params.len() != f.arch.n_params() {
            return Err(Error::shape("checkpoint params", f.arch.n_params(), f.params.len()));
        }
        Ok(f)
    }
}

#[inline]
fn dot_features(w: &[f64], input: Input<'_>) -> f64 {
    match input {
        Input::Cell(c) => w[c],
        Input::Vector(x) => w.iter().zip(x).map(|(w, x)| w * x).sum(),
    }
}

#[inline]
fn add_features(g: &mut [f64], input: Input<'_>, scale: f64) {
    match input {
        Input::Cell(c) => g[c] += scale,
        Input::Vector(x) => g.iter_mut().zip(x).for_each(|(g, x)| *g += scale * x),
    }
}

/// Loss value and exact gradient for a batch functional of `f`'s outputs.
///
/// `loss` receives the per-sample outputs and returns the loss together with
/// `d loss / d output` for each sample.
pub fn grad_params<F>(f: &ParamFunction, batch: &[Input<'_>], loss: F) -> (f64, Vec<f64>)
where
    F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let outputs: Vec<Vec<f64>> = batch
        .iter()
        .map(|&x| {
            let mut o = vec![0.0; f.out_dim()];
            f.eval_into(x, &mut o);
            o
        })
        .collect();
    let (value, douts) = loss(&outputs);
    let mut grad = vec![0.0; f.n_params()];
    for (&x, d) in batch.iter().zip(&douts) {
        f.backward(x, d, &mut grad);
    }
    (value, grad)
}

/// Adam optimiser state for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }

    pub fn for_fn(f: &ParamFunction, lr: f64) -> Self {
        Self::new(f.n_params(), lr)
    }

    /// One bias-corrected Adam step, in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter length");
        assert_eq!(grad.len(), self.m.len(), "adam: gradient length");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn adam_step(state: &mut AdamState, f: &mut ParamFunction, grad: &[f64]) {
    state.update(&mut f.params, grad);
}

/// A live network and its slowly tracking target copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPair {
    pub live: ParamFunction,
    pub target: ParamFunction,
    pub tau: f64,
}

impl TargetPair {
    pub fn new(live: ParamFunction, tau: f64) -> Self {
        TargetPair {
            target: live.clone(),
            live,
            tau,
        }
    }

    /// `target <- (1 - tau) * target + tau * live`.
    pub fn polyak_update(&mut self) -> Result<()> {
        if self.live.arch != self.target.arch {
            return Err(Error::shape("target pair", format!("{:?}", self.live.arch), format!("{:?}", self.target.arch)));
        }
        let tau = self.tau;
        for (t, l) in self.target.params.iter_mut().zip(&self.live.params) {
            *t = (1.0 - tau) * *t + tau * l;
        }
        Ok(())
    }

    pub fn sync(&mut self) {
        self.target.params.clone_from(&self.live.params);
    }
}

/// Numerically stable softmax into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `log softmax(logits)` into `out`.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}
