//! Feedforward network machinery: softmax with temperature, cross-entropy
//! against soft targets, backprop, and a deterministic mini-batch SGD loop.
//!
//! Parameters live in one flat buffer laid out layer by layer, weights first
//! (row-major, `outputs x inputs`) then biases. The checkpoint format writes
//! that buffer verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 minus top-2 entry. Requires at least two entries.
pub fn top_two_gap(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid("margin needs at least two classes"));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first - second)
}

/// Unnormalized class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("logit vector is empty"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite")));
        }
        Ok(LogitVector(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A probability vector over `K >= 1` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("distribution is empty"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!(
                "probability {i} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(ProbDist(probs))
    }

    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(ProbDist::new(probs.clone()).is_ok(), "{probs:?}");
        ProbDist(probs)
    }

    pub fn one_hot(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::invalid(format!(
                "one-hot index {index} out of range for {len} classes"
            )));
        }
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Ok(ProbDist(probs))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("distribution is empty"));
        }
        Ok(ProbDist(vec![1.0 / len as f64; len]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Top-1 minus top-2 probability, in `[0, 1]`.
    pub fn margin(&self) -> Result<f64> {
        top_two_gap(&self.0)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

/// `p(i) = exp(tau * s_i) / sum_j exp(tau * s_j)`, with max-subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<ProbDist> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::invalid("logit vector is empty"));
    }
    if let Some(i) = logits.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is not finite")));
    }
    Ok(ProbDist(softmax_raw(logits, tau)))
}

pub(crate) fn softmax_raw(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let mut out: Vec<f64> = logits.iter().map(|&s| (tau * (s - max)).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

fn log_softmax_raw(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let lse = logits
        .iter()
        .map(|&s| (tau * (s - max)).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&s| tau * (s - max) - lse).collect()
}

/// `H(target, pred) = -sum_i target(i) log pred(i)`, with `0 log 0 = 0`.
///
/// Returns `+inf` when `pred` puts zero mass on a class that `target` does not.
pub fn cross_entropy(target: &ProbDist, pred: &ProbDist) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::invalid(format!(
            "cross-entropy length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    let mut total = 0.0;
    for (&t, &q) in target.0.iter().zip(&pred.0) {
        if t == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Ok(f64::INFINITY);
        }
        total -= t * q.ln();
    }
    Ok(total)
}

/// Cross-entropy of `target` against `softmax(logits, tau)`, evaluated through
/// log-softmax so it stays finite for saturated logits.
pub fn softmax_cross_entropy(target: &ProbDist, logits: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if target.len() != logits.len() {
        return Err(Error::invalid(format!(
            "target has {} classes, logits have {}",
            target.len(),
            logits.len()
        )));
    }
    let log_p = log_softmax_raw(logits, tau);
    Ok(-target
        .0
        .iter()
        .zip(&log_p)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &lp)| t * lp)
        .sum::<f64>())
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl TrainSpec {
    fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.batch_size > n {
            return Err(Error::invalid(format!(
                "batch size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weights_at: usize,
    bias_at: usize,
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    widths: Vec<usize>,
    seed: u64,
    params: Vec<f64>,
    shapes: Vec<LayerShape>,
    metadata: BTreeMap<String, String>,
}

fn layer_shapes(widths: &[usize]) -> Result<(Vec<LayerShape>, usize)> {
    if widths.len() < 2 {
        return Err(Error::invalid(
            "network needs at least input and output widths",
        ));
    }
    if widths.contains(&0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    let mut shapes = Vec::with_capacity(widths.len() - 1);
    let mut at = 0;
    for pair in widths.windows(2) {
        let (inputs, outputs) = (pair[0], pair[1]);
        let weights_at = at;
        let bias_at = weights_at + inputs * outputs;
        at = bias_at + outputs;
        shapes.push(LayerShape {
            inputs,
            outputs,
            weights_at,
            bias_at,
        });
    }
    Ok((shapes, at))
}

impl Network {
    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let (shapes, count) = layer_shapes(widths)?;
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for shape in &shapes {
            let bound = 1.0 / (shape.inputs as f64).sqrt();
            for w in &mut params[shape.weights_at..shape.bias_at] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Network {
            widths: widths.to_vec(),
            seed,
            params,
            shapes,
            metadata: BTreeMap::new(),
        })
    }

    /// All parameters zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let (shapes, count) = layer_shapes(widths)?;
        Ok(Network {
            widths: widths.to_vec(),
            seed: 0,
            params: vec![0.0; count],
            shapes,
            metadata: BTreeMap::new(),
        })
    }

    /// Builds a network from explicit `(weights, biases)` per layer.
    pub fn from_layers(widths: &[usize], layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut net = Network::zeros(widths)?;
        if layers.len() != net.shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                net.shapes.len(),
                layers.len()
            )));
        }
        for (shape, (w, b)) in net.shapes.clone().iter().zip(layers) {
            if w.len() != shape.inputs * shape.outputs || b.len() != shape.outputs {
                return Err(Error::invalid("layer parameter shape mismatch"));
            }
            net.params[shape.weights_at..shape.bias_at].copy_from_slice(w);
            net.params[shape.bias_at..shape.bias_at + shape.outputs].copy_from_slice(b);
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("widths validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        self.shapes
            .iter()
            .map(|s| (s.inputs * s.outputs) as u64)
            .sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Attaches a `key=value` pair that travels with the checkpoint header.
    pub fn set_metadata(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |s: &str| s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=');
        if bad(key) || value.chars().any(char::is_whitespace) || value.is_empty() {
            return Err(Error::invalid(format!(
                "unusable metadata {key:?}={value:?}"
            )));
        }
        if key == "widths" || key == "seed" {
            return Err(Error::invalid(format!("metadata key {key} is reserved")));
        }
        self.metadata.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        self.check_input(x)?;
        Ok(LogitVector(self.forward_raw(x)))
    }

    pub(crate) fn forward_raw(&self, x: &[f64]) -> Vec<f64> {
        let mut current = x.to_vec();
        let last = self.shapes.len() - 1;
        for (l, shape) in self.shapes.iter().enumerate() {
            current = self.affine(shape, &current);
            if l != last {
                relu_in_place(&mut current);
            }
        }
        current
    }

    fn affine(&self, shape: &LayerShape, input: &[f64]) -> Vec<f64> {
        let weights = &self.params[shape.weights_at..shape.bias_at];
        let bias = &self.params[shape.bias_at..shape.bias_at + shape.outputs];
        weights
            .chunks_exact(shape.inputs)
            .zip(bias)
            .map(|(row, &b)| b + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Loss `H(target, softmax(f(x), tau))` and its gradient w.r.t. all
    /// parameters, in the flat parameter layout.
    pub fn loss_grad(&self, x: &[f64], target: &ProbDist, tau: f64) -> Result<LossGrad> {
        self.check_input(x)?;
        check_tau(tau)?;
        if target.len() != self.output_width() {
            return Err(Error::invalid(format!(
                "target has {} classes, network outputs {}",
                target.len(),
                self.output_width()
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let (loss, logit_grad) = self.backprop_into(x, target, tau, 1.0, &mut grad);
        Ok(LossGrad {
            loss,
            logit_grad,
            grad,
        })
    }

    /// Accumulates `scale * d loss / d params` into `grad`. Returns the loss and
    /// the (unscaled) logit gradient `tau * (p - target)`.
    fn backprop_into(
        &self,
        x: &[f64],
        target: &ProbDist,
        tau: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> (f64, Vec<f64>) {
        let last = self.shapes.len() - 1;
        // activations[l] is the input to layer l
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.shapes.len());
        activations.push(x.to_vec());
        let mut logits = Vec::new();
        for (l, shape) in self.shapes.iter().enumerate() {
            let mut z = self.affine(shape, &activations[l]);
            if l == last {
                logits = z;
            } else {
                relu_in_place(&mut z);
                activations.push(z);
            }
        }

        let log_p = log_softmax_raw(&logits, tau);
        let loss = -target
            .0
            .iter()
            .zip(&log_p)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, &lp)| t * lp)
            .sum::<f64>();
        let logit_grad: Vec<f64> = log_p
            .iter()
            .zip(&target.0)
            .map(|(&lp, &t)| tau * (lp.exp() - t))
            .collect();

        let mut delta = logit_grad.clone();
        for l in (0..=last).rev() {
            let shape = self.shapes[l];
            let input = &activations[l];
            let w_grad = &mut grad[shape.weights_at..shape.bias_at];
            for (row, &d) in w_grad.chunks_exact_mut(shape.inputs).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += scale * d * a;
                }
            }
            for (g, &d) in grad[shape.bias_at..shape.bias_at + shape.outputs]
                .iter_mut()
                .zip(&delta)
            {
                *g += scale * d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[shape.weights_at..shape.bias_at];
            let mut prev = vec![0.0; shape.inputs];
            for (row, &d) in weights.chunks_exact(shape.inputs).zip(&delta) {
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            // ReLU derivative: the stored activation is positive iff the unit was active.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        (loss, logit_grad)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        let mut bytes = Vec::with_capacity(64 + self.params.len() * 8);
        bytes.extend_from_slice(self.header().as_bytes());
        bytes.push(b'\n');
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        out.write_all(&bytes)
    }

    fn header(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let mut header = format!("netv1 widths={} seed={}", widths.join(","), self.seed);
        for (k, v) in &self.metadata {
            header.push_str(&format!(" {k}={v}"));
        }
        header
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Network::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let parse_err = |location: String, msg: String| Error::Parse {
            path: origin.to_string(),
            location,
            msg,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("line 1".into(), "missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| parse_err("line 1".into(), "header is not UTF-8".into()))?;
        let mut tokens = header.split(' ');
        if tokens.next() != Some("netv1") {
            return Err(parse_err("line 1".into(), "expected `netv1` header".into()));
        }
        let mut widths = None;
        let mut seed = None;
        let mut metadata = BTreeMap::new();
        for token in tokens {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| parse_err("line 1".into(), format!("bad field {token:?}")))?;
            match key {
                "widths" => {
                    let parsed: std::result::Result<Vec<usize>, _> =
                        value.split(',').map(str::parse).collect();
                    widths = Some(parsed.map_err(|_| {
                        parse_err("line 1".into(), format!("bad widths {value:?}"))
                    })?);
                }
                "seed" => {
                    seed =
                        Some(value.parse::<u64>().map_err(|_| {
                            parse_err("line 1".into(), format!("bad seed {value:?}"))
                        })?)
                }
                _ => {
                    metadata.insert(key.to_string(), value.to_string());
                }
            }
        }
        let widths = widths.ok_or_else(|| parse_err("line 1".into(), "missing widths".into()))?;
        let seed = seed.ok_or_else(|| parse_err("line 1".into(), "missing seed".into()))?;
        let (shapes, count) =
            layer_shapes(&widths).map_err(|e| parse_err("line 1".into(), e.to_string()))?;
        let blob = &bytes[newline + 1..];
        if blob.len() != count * 8 {
            return Err(parse_err(
                format!("byte offset {}", newline + 1),
                format!(
                    "expected {} parameter bytes, found {}",
                    count * 8,
                    blob.len()
                ),
            ));
        }
        let params = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Network {
            widths,
            seed,
            params,
            shapes,
            metadata,
        })
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.header())
    }
}

fn relu_in_place(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Output of [`Network::loss_grad`].
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// `tau * (softmax(logits, tau) - target)`
    pub logit_grad: Vec<f64>,
    /// Gradient in the flat parameter layout of [`Network::params`].
    pub grad: Vec<f64>,
}

/// One supervised example: features and a soft target.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub target: &'a ProbDist,
}

fn validate_examples(net: &Network, examples: &[Example<'_>]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.features.len() != net.input_width() {
            return Err(Error::invalid(format!(
                "example {i} has {} features, network expects {}",
                ex.features.len(),
                net.input_width()
            )));
        }
        if ex.target.len() != net.output_width() {
            return Err(Error::invalid(format!(
                "example {i} target has {} classes, network outputs {}",
                ex.target.len(),
                net.output_width()
            )));
        }
    }
    Ok(())
}

/// Plain mini-batch SGD on the mean soft-target cross-entropy.
///
/// Each epoch visits a fresh permutation drawn from `spec.shuffle_seed`; the
/// final short batch is kept. Bit-identical for identical inputs.
pub fn train(
    net: &Network,
    examples: &[Example<'_>],
    spec: &TrainSpec,
    tau: f64,
) -> Result<Network> {
    validate_examples(net, examples)?;
    spec.validate(examples.len())?;
    check_tau(tau)?;

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grad = vec![0.0; net.params.len()];
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &examples[i];
                net.backprop_into(ex.features, ex.target, tau, scale, &mut grad);
            }
            for (p, g) in net.params.iter_mut().zip(&grad) {
                *p -= spec.learning_rate * g;
            }
        }
    }
    Ok(net)
}

/// Mean soft-target cross-entropy over `examples`.
pub fn mean_loss(net: &Network, examples: &[Example<'_>], tau: f64) -> Result<f64> {
    validate_examples(net, examples)?;
    check_tau(tau)?;
    let mut total = 0.0;
    for ex in examples {
        total += softmax_cross_entropy(ex.target, &net.forward_raw(ex.features), tau)?;
    }
    Ok(total / examples.len() as f64)
}
