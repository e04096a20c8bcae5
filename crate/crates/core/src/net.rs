//! Small fully connected classifiers with hand-written differentiation.
//!
//! Everything runs in f64 on flat row-major buffers. The backward pass is
//! derived by hand and checked against central finite differences in the test
//! suite, so there is no autodiff dependency and gradient semantics are pinned
//! down exactly: the ReLU subgradient at zero is taken to be zero.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    /// Derivative w.r.t. the pre-activation; ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer, `weights` stored row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// Weights and biases drawn uniformly from `[-1/sqrt(in_dim), +1/sqrt(in_dim)]`.
    pub fn scaled_uniform(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Layer {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        }
    }

    fn check(&self) -> Result<(), NetError> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(NetError::ShapeMismatch(format!(
                "layer buffers do not match {}x{}",
                self.out_dim, self.in_dim
            )));
        }
        Ok(())
    }

    fn forward_into(&self, x: &[f64], pre: &mut Vec<f64>, post: &mut Vec<f64>) {
        pre.clear();
        post.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            pre.push(acc);
            post.push(self.activation.apply(acc));
        }
    }
}

/// Feature extractor: a stack of dense layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`, every layer ReLU-activated.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| Layer::scaled_uniform(w[0], w[1], Activation::Relu, &mut rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Linear classification head on top of the extractor features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearHead {
    pub n_classes: usize,
    pub feat_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn scaled_uniform(n_classes: usize, feat_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Layer::scaled_uniform(feat_dim, n_classes, Activation::Identity, &mut rng);
        LinearHead {
            n_classes,
            feat_dim,
            weights: layer.weights,
            bias: layer.bias,
        }
    }

    pub fn zeros(n_classes: usize, feat_dim: usize) -> Self {
        LinearHead {
            n_classes,
            feat_dim,
            weights: vec![0.0; n_classes * feat_dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.feat_dim..(class + 1) * self.feat_dim]
    }
}

/// How a freshly sized head is filled.
#[derive(Debug, Clone, Copy)]
pub enum HeadInit {
    Zeros,
    ScaledUniform { seed: u64 },
}

/// Extractor plus head. Output logits live over `head.n_classes` labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub extractor: Mlp,
    pub head: LinearHead,
}

/// Per-layer forward intermediates kept for the backward pass.
struct Trace {
    /// For layer k: (pre-activation, post-activation).
    stages: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Classifier {
    pub fn new(extractor: Mlp, n_classes: usize, seed: u64) -> Self {
        let feat_dim = extractor.output_dim();
        Classifier {
            extractor,
            head: LinearHead::scaled_uniform(n_classes, feat_dim, seed),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    fn validate(&self) -> Result<(), NetError> {
        for layer in &self.extractor.layers {
            layer.check()?;
        }
        if self.head.weights.len() != self.head.n_classes * self.head.feat_dim
            || self.head.bias.len() != self.head.n_classes
        {
            return Err(NetError::ShapeMismatch("head buffers".into()));
        }
        if self.extractor.output_dim() != self.head.feat_dim {
            return Err(NetError::ShapeMismatch(format!(
                "extractor emits {} features, head expects {}",
                self.extractor.output_dim(),
                self.head.feat_dim
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                context: "input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("input"));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut stages = Vec::with_capacity(self.extractor.layers.len());
        let mut cur: &[f64] = x;
        for layer in &self.extractor.layers {
            let mut pre = Vec::new();
            let mut post = Vec::new();
            layer.forward_into(cur, &mut pre, &mut post);
            stages.push((pre, post));
            cur = &stages.last().unwrap().1;
        }
        Trace { stages }
    }

    fn head_logits(&self, features: &[f64]) -> Vec<f64> {
        (0..self.head.n_classes)
            .map(|c| {
                let mut acc = self.head.bias[c];
                for (w, v) in self.head.row(c).iter().zip(features) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }

    /// Leaf logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let features = trace.stages.last().map_or_else(|| x.to_vec(), |s| s.1.clone());
        Ok(self.head_logits(&features))
    }

    /// Arg-max class of the logits; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, NetError> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Chain rule from a loss gradient w.r.t. the logits back to the input.
    pub fn input_gradient(&self, x: &[f64], logit_grad: &[f64]) -> Result<Vec<f64>, NetError> {
        if logit_grad.len() != self.head.n_classes {
            return Err(NetError::DimensionMismatch {
                context: "logit gradient",
                expected: self.head.n_classes,
                got: logit_grad.len(),
            });
        }
        self.check_input(x)?;
        let trace = self.trace(x);
        // d loss / d features = W_head^T g
        let mut delta = vec![0.0; self.head.feat_dim];
        for c in 0..self.head.n_classes {
            let g = logit_grad[c];
            if g != 0.0 {
                for (d, w) in delta.iter_mut().zip(self.head.row(c)) {
                    *d += g * w;
                }
            }
        }
        for (k, layer) in self.extractor.layers.iter().enumerate().rev() {
            let pre = &trace.stages[k].0;
            let mut delta_pre = delta;
            for (d, p) in delta_pre.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(*p);
            }
            let mut next = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let g = delta_pre[o];
                if g != 0.0 {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += g * w;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Parameter gradients averaged over `(input, logit gradient)` pairs.
    pub fn param_gradient(&self, batch: &[(&[f64], &[f64])]) -> Result<GradBundle, NetError> {
        if batch.is_empty() {
            return Err(NetError::ShapeMismatch("empty batch".into()));
        }
        let mut bundle = GradBundle::zeros_like(self);
        for &(x, logit_grad) in batch {
            self.check_input(x)?;
            if logit_grad.len() != self.head.n_classes {
                return Err(NetError::DimensionMismatch {
                    context: "logit gradient",
                    expected: self.head.n_classes,
                    got: logit_grad.len(),
                });
            }
            let trace = self.trace(x);
            let features: &[f64] = trace.stages.last().map_or(x, |s| &s.1);
            for c in 0..self.head.n_classes {
                let g = logit_grad[c];
                bundle.head.bias[c] += g;
                let row = &mut bundle.head.weights[c * self.head.feat_dim..(c + 1) * self.head.feat_dim];
                for (slot, f) in row.iter_mut().zip(features) {
                    *slot += g * f;
                }
            }
            let mut delta = vec![0.0; self.head.feat_dim];
            for c in 0..self.head.n_classes {
                let g = logit_grad[c];
                if g != 0.0 {
                    for (d, w) in delta.iter_mut().zip(self.head.row(c)) {
                        *d += g * w;
                    }
                }
            }
            for (k, layer) in self.extractor.layers.iter().enumerate().rev() {
                let pre = &trace.stages[k].0;
                let layer_input: &[f64] = if k == 0 { x } else { &trace.stages[k - 1].1 };
                let mut delta_pre = delta;
                for (d, p) in delta_pre.iter_mut().zip(pre) {
                    *d *= layer.activation.derivative(*p);
                }
                let grad = &mut bundle.layers[k];
                for o in 0..layer.out_dim {
                    let g = delta_pre[o];
                    grad.bias[o] += g;
                    if g != 0.0 {
                        let row = &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (slot, v) in row.iter_mut().zip(layer_input) {
                            *slot += g * v;
                        }
                    }
                }
                let mut next = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let g = delta_pre[o];
                    if g != 0.0 {
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (n, w) in next.iter_mut().zip(row) {
                            *n += g * w;
                        }
                    }
                }
                delta = next;
            }
        }
        bundle.scale(1.0 / batch.len() as f64);
        Ok(bundle)
    }

    /// New classifier with a head of `n_classes` rows over the same extractor.
    pub fn resize_head(&self, n_classes: usize, init: HeadInit) -> Classifier {
        let feat_dim = self.head.feat_dim;
        let head = match init {
            HeadInit::Zeros => LinearHead::zeros(n_classes, feat_dim),
            HeadInit::ScaledUniform { seed } => LinearHead::scaled_uniform(n_classes, feat_dim, seed),
        };
        Classifier {
            extractor: self.extractor.clone(),
            head,
        }
    }

    /// Swap in an explicitly built head (used by curriculum weight transfer).
    pub fn with_head(&self, head: LinearHead) -> Result<Classifier, NetError> {
        if head.feat_dim != self.head.feat_dim || head.weights.len() != head.n_classes * head.feat_dim {
            return Err(NetError::ShapeMismatch("replacement head".into()));
        }
        Ok(Classifier {
            extractor: self.extractor.clone(),
            head,
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
#[inline]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// log(sum(exp(z))) with max subtraction; never overflows for finite input.
pub fn logsumexp(z: &[f64]) -> f64 {
    debug_assert!(!z.is_empty());
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for &v in z {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>, NetError> {
    if z.is_empty() {
        return Err(NetError::ShapeMismatch("empty logits".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("logits"));
    }
    let lse = logsumexp(z);
    Ok(z.iter().map(|&v| v - lse).collect())
}

/// Gradient tensors mirroring a classifier's parameters.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
    pub head: LayerGrad,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradBundle {
    pub fn zeros_like(c: &Classifier) -> Self {
        GradBundle {
            layers: c
                .extractor
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            head: LayerGrad {
                weights: vec![0.0; c.head.weights.len()],
                bias: vec![0.0; c.head.bias.len()],
            },
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for v in t {
                *v *= s;
            }
        }
    }

    /// Adds `other`, tensor by tensor. Shapes must match.
    pub fn add(&mut self, other: &GradBundle) -> Result<(), NetError> {
        if self.layers.len() != other.layers.len() {
            return Err(NetError::ShapeMismatch("gradient bundles differ".into()));
        }
        for (a, b) in self
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .zip(other.layers.iter().chain(std::iter::once(&other.head)))
        {
            if a.weights.len() != b.weights.len() || a.bias.len() != b.bias.len() {
                return Err(NetError::ShapeMismatch("gradient bundles differ".into()));
            }
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

/// Adam hyper-parameters. The learning rate default matches the training
/// recipe this crate reproduces; desk-scale experiments usually raise it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(c: &Classifier, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = c
            .extractor
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .chain([c.head.weights.len(), c.head.bias.len()])
            .collect();
        AdamState {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step in place. A zero gradient leaves parameters
    /// unchanged (the moments stay zero and the update is exactly 0/eps).
    pub fn step(&mut self, c: &mut Classifier, g: &GradBundle) -> Result<(), NetError> {
        let params: Vec<&mut Vec<f64>> = c
            .extractor
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .chain([&mut c.head.weights, &mut c.head.bias])
            .collect();
        let grads: Vec<&Vec<f64>> = g
            .layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .chain([&g.head.weights, &g.head.bias])
            .collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NetError::ShapeMismatch("optimizer state".into()));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.len() != g.len() {
                return Err(NetError::ShapeMismatch("optimizer state".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Serialized model: parameters plus the tree it was trained against and the
/// curriculum stratum the head currently addresses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub extractor: Mlp,
    pub head: LinearHead,
    pub tree_path: String,
    pub current_height: usize,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint: {0}")]
    Io(#[source] io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[source] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub fn save_checkpoint(
    classifier: &Classifier,
    tree_path: &str,
    current_height: usize,
    path: &Path,
) -> Result<(), CheckpointError> {
    let ckpt = Checkpoint {
        extractor: classifier.extractor.clone(),
        head: classifier.head.clone(),
        tree_path: tree_path.to_string(),
        current_height,
    };
    let mut text = serde_json::to_string(&ckpt).map_err(CheckpointError::Parse)?;
    text.push('\n');
    fs::write(path, text).map_err(CheckpointError::Io)
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier, String, usize), CheckpointError> {
    let text = fs::read_to_string(path).map_err(CheckpointError::Io)?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(CheckpointError::Parse)?;
    let classifier = Classifier {
        extractor: ckpt.extractor,
        head: ckpt.head,
    };
    classifier.validate()?;
    Ok((classifier, ckpt.tree_path, ckpt.current_height))
}

/// Relative error with the denominator clamped away from zero, as used by all
/// gradient checks in this crate.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
