//! Small fully-connected networks with exact reverse-mode gradients, the
//! momentum SGD optimizer, finite-difference gradient checks and the model
//! file container.

use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.01;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Architecture of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

/// A chain of affine layers, each followed by its activation and optional
/// inverted dropout. Parameters live in one flat buffer: for every layer the
/// row-major `output x input` weight matrix followed by the bias.
#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    id: u64,
    generation: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params
    }
}

/// Forward-pass mode. Dropout only runs in training mode and draws its masks
/// from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Activations recorded by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    generation: u64,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Tape {
    /// Pre-activation values of every layer, in order.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    /// Smallest |pre-activation| over relu layers; near zero means the
    /// network sits on a kink and finite differences are unreliable there.
    pub fn kink_distance(&self, net: &DenseNet) -> f64 {
        net.layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

impl DenseNet {
    /// Builds a network from layer specs with zero parameters.
    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].output != w[1].input {
                return Err(Error::DimensionMismatch {
                    expected: w[0].output,
                    actual: w[1].input,
                    context: "adjacent layer dimensions",
                });
            }
        }
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Config(format!(
                    "dropout rate {} outside [0, 1)",
                    l.dropout
                )));
            }
            if l.input == 0 || l.output == 0 {
                return Err(Error::Config("layer dimensions must be positive".into()));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.output * l.input + l.output;
        }
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
            id: fresh_id(),
            generation: 0,
        })
    }

    /// Zero-mean Gaussian weights with standard deviation `std`, zero biases.
    pub fn gaussian<R: Rng + ?Sized>(layers: Vec<LayerSpec>, std: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for l in 0..net.layers.len() {
            let (w, _) = net.layer_ranges(l);
            for p in &mut net.params[w] {
                *p = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// `input -> hidden (relu, dropout) -> ... -> output (identity)`.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], dropout: f64, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("mlp needs at least input and output dims".into()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                input: w[0],
                output: w[1],
                activation: if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
                dropout: if i == last { 0.0 } else { dropout },
            })
            .collect();
        Self::gaussian(layers, INIT_STD, rng)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
                context: "parameter vector",
            });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// Sets the dropout rate of every layer that has a relu activation.
    pub fn set_dropout(&mut self, rate: f64) {
        for l in &mut self.layers {
            if l.activation == Activation::Relu {
                l.dropout = rate;
            }
        }
    }

    /// A network made of the first `n` layers, with copied parameters.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let mut net = Self::zeros(self.layers[..n].to_vec())?;
        let len = net.params.len();
        net.params.copy_from_slice(&self.params[..len]);
        Ok(net)
    }

    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let spec = &self.layers[l];
        let w0 = self.offsets[l];
        let b0 = w0 + spec.input * spec.output;
        (w0..b0, b0..b0 + spec.output)
    }

    pub fn forward(&self, input: &[f64], mode: Mode<'_>) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
                context: "network input",
            });
        }
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        let mut tape = Tape {
            net_id: self.id,
            generation: self.generation,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for (l, spec) in self.layers.iter().enumerate() {
            let (wr, br) = self.layer_ranges(l);
            let w = &self.params[wr];
            let b = &self.params[br];
            let z: Vec<f64> = (0..spec.output)
                .map(|o| {
                    let row = &w[o * spec.input..(o + 1) * spec.input];
                    row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b[o]
                })
                .collect();
            let mut out: Vec<f64> = match spec.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            let mask = match rng.as_mut() {
                Some(r) if spec.dropout > 0.0 => {
                    let keep = 1.0 - spec.dropout;
                    let m: Vec<f64> = (0..spec.output)
                        .map(|_| {
                            if r.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.iter_mut().zip(&m).for_each(|(o, k)| *o *= k);
                    Some(m)
                }
                _ => None,
            };
            tape.inputs.push(std::mem::replace(&mut x, out));
            tape.pre.push(z);
            tape.masks.push(mask);
        }
        Ok((x, tape))
    }

    /// Output only, evaluation mode.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input, Mode::Eval).map(|(o, _)| o)
    }

    /// Reverse-mode pass. Returns `(parameter gradients, input gradient)`.
    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let gin = self.backward_into(tape, output_grad, &mut grads)?;
        Ok((grads, gin))
    }

    /// Like [`backward`](Self::backward) but accumulates parameter gradients
    /// into `grads`.
    pub fn backward_into(&self, tape: &Tape, output_grad: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if tape.net_id != self.id || tape.generation != self.generation {
            return Err(Error::StaleTape);
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: output_grad.len(),
                context: "output gradient",
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: grads.len(),
                context: "gradient buffer",
            });
        }
        let mut g = output_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let spec = &self.layers[l];
            if let Some(m) = &tape.masks[l] {
                g.iter_mut().zip(m).for_each(|(gv, k)| *gv *= k);
            }
            if spec.activation == Activation::Relu {
                g.iter_mut()
                    .zip(&tape.pre[l])
                    .for_each(|(gv, z)| if *z <= 0.0 { *gv = 0.0 });
            }
            let (wr, br) = self.layer_ranges(l);
            let x = &tape.inputs[l];
            {
                let gw = &mut grads[wr.clone()];
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * spec.input..(o + 1) * spec.input];
                    row.iter_mut().zip(x).for_each(|(r, xv)| *r += go * xv);
                }
            }
            grads[br].iter_mut().zip(&g).for_each(|(b, gv)| *b += gv);
            let w = &self.params[wr];
            let mut gx = vec![0.0; spec.input];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &w[o * spec.input..(o + 1) * spec.input];
                gx.iter_mut().zip(row).for_each(|(a, wv)| *a += go * wv);
            }
            g = gx;
        }
        Ok(g)
    }
}

/// Momentum SGD hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Candidates (or scenes, for the whole-image model) per update.
    pub batch_size: usize,
    /// Passes over the training data.
    pub epochs: usize,
    /// Divide the learning rate by 10 after this many epochs (0 = never).
    pub lr_drop_after: usize,
    pub rng_seed: u64,
}

impl SgdConfig {
    /// Candidate-classifier settings: momentum 0.9, weight decay 5e-4, learning rate 0.01.
    pub fn local() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            epochs: 6,
            lr_drop_after: 4,
            rng_seed: 1,
        }
    }

    /// Whole-image grid scorer: momentum 0.9, weight decay 5e-4, learning rate 1e-4.
    pub fn global() -> Self {
        Self {
            learning_rate: 0.0001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            epochs: 20,
            lr_drop_after: 0,
            rng_seed: 2,
        }
    }

    /// Joint model fine-tuning: momentum 0.9, weight decay 5e-6, learning
    /// rate 1e-5, dropped by 10x after 4 passes; 64 candidates from 4 scenes.
    pub fn pairwise() -> Self {
        Self {
            learning_rate: 0.00001,
            momentum: 0.9,
            weight_decay: 0.000005,
            batch_size: 4,
            epochs: 6,
            lr_drop_after: 4,
            rng_seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn rate_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_drop_after > 0 && epoch >= self.lr_drop_after {
            self.learning_rate / 10.0
        } else {
            self.learning_rate
        }
    }
}

/// Velocity buffer of the momentum optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(n: usize) -> Self {
        Self {
            velocity: vec![0.0; n],
        }
    }
}

/// `v <- momentum * v - lr * (g + weight_decay * p); p <- p + v`.
///
/// Fails without touching `params` when any gradient entry is not finite.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut SgdState,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.len(),
            context: "sgd gradient",
        });
    }
    if state.velocity.is_empty() {
        state.velocity = vec![0.0; params.len()];
    }
    if state.velocity.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: state.velocity.len(),
            context: "sgd velocity",
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            location: format!("parameter {i}"),
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        *v = momentum * *v - learning_rate * (g + weight_decay * *p);
        *p += *v;
    }
    Ok(())
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Indices whose error exceeds the tolerance.
    pub failures: Vec<usize>,
}

impl GradCheckReport {
    pub fn describe(&self, names: impl Fn(usize) -> String) -> String {
        if self.passed {
            format!("ok (max rel error {:.3e})", self.max_rel_error)
        } else {
            let shown: Vec<String> = self.failures.iter().take(5).map(|&i| names(i)).collect();
            format!(
                "FAILED: max rel error {:.3e} at {} (tolerance {:.1e}); failing entries: {}",
                self.max_rel_error,
                names(self.worst_index),
                self.tolerance,
                shown.join(", ")
            )
        }
    }
}

/// Settings for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    /// Entries with magnitude below this are compared on an absolute scale.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            tolerance: 1e-6,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    cfg: FdConfig,
) -> GradCheckReport {
    let mut point = x.to_vec();
    let mut worst = (0.0f64, 0usize);
    let mut failures = Vec::new();
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + cfg.step;
        let up = f(&point);
        point[i] = orig - cfg.step;
        let down = f(&point);
        point[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let err = relative_error(analytic[i], numeric, cfg.floor);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i);
        }
        if !(err <= cfg.tolerance) {
            failures.push(i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance: cfg.tolerance,
        passed: failures.is_empty(),
        failures,
    }
}

/// Minimum distance from any relu pre-activation to zero that we accept as
/// "smooth" for a finite-difference probe.
pub const KINK_MARGIN: f64 = 1e-3;

/// Checks parameter gradients of `net` under `loss` (returning value and
/// d loss / d output) at `input`. Errors when the point sits on a relu kink.
pub fn grad_check(
    net: &DenseNet,
    loss: impl Fn(&[f64]) -> (f64, Vec<f64>),
    input: &[f64],
    cfg: FdConfig,
) -> Result<GradCheckReport> {
    let (out, tape) = net.forward(input, Mode::Eval)?;
    if tape.kink_distance(net) < KINK_MARGIN {
        return Err(Error::PersistentKink(1));
    }
    let (_, dout) = loss(&out);
    let (analytic, _) = net.backward(&tape, &dout)?;
    let mut probe = net.clone();
    Ok(check_gradient(
        |p| {
            probe.set_params(p).expect("same length");
            let o = probe.predict(input).expect("same dims");
            loss(&o).0
        },
        net.params(),
        &analytic,
        cfg,
    ))
}

/// [`grad_check`] with resampling: draws inputs from `sample` until one is
/// away from relu kinks, giving up after `max_attempts`.
pub fn grad_check_resampling(
    net: &DenseNet,
    loss: impl Fn(&[f64]) -> (f64, Vec<f64>),
    mut sample: impl FnMut() -> Vec<f64>,
    cfg: FdConfig,
    max_attempts: usize,
) -> Result<GradCheckReport> {
    for _ in 0..max_attempts {
        let x = sample();
        match grad_check(net, &loss, &x, cfg) {
            Err(Error::PersistentKink(_)) => continue,
            other => return other,
        }
    }
    Err(Error::PersistentKink(max_attempts))
}

/// Per-dimension standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Mean and standard deviation of every column; constant columns get a
    /// unit deviation.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for r in rows {
            if n == 0 {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::DimensionMismatch {
                    expected: sum.len(),
                    actual: r.len(),
                    context: "standardizer row",
                });
            }
            for (k, v) in r.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("standardizer input"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
                context: "standardizer input",
            });
        }
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// `mean` followed by `std`, for model files.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.std);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if !v.len().is_multiple_of(2) || v[v.len() / 2..].iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Model("malformed standardizer".into()));
        }
        let d = v.len() / 2;
        Ok(Self {
            mean: v[..d].to_vec(),
            std: v[d..].to_vec(),
        })
    }
}

/// One row of a training loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// `step,loss,learning_rate` CSV.
pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("step,loss,learning_rate\n");
    for t in trace {
        s.push_str(&format!("{},{:.9},{}\n", t.step, t.loss, t.learning_rate));
    }
    s
}

const MAGIC: &str = "ctxhead-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveHeader {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    nets: Vec<NetEntry>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

/// Model file: a magic line, a one-line JSON header describing architecture
/// and metadata, then every parameter and array as little-endian f64 in
/// header order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub nets: Vec<(String, DenseNet)>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl ModelArchive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: serde_json::Value::Object(Default::default()),
            nets: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn with_net(mut self, name: &str, net: DenseNet) -> Self {
        self.nets.push((name.to_string(), net));
        self
    }

    pub fn with_array(mut self, name: &str, values: Vec<f64>) -> Self {
        self.arrays.push((name.to_string(), values));
        self
    }

    pub fn net(&self, name: &str) -> Result<&DenseNet> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::Model(format!("missing network '{name}'")))
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.as_slice())
            .ok_or_else(|| Error::Model(format!("missing array '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ArchiveHeader {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            nets: self
                .nets
                .iter()
                .map(|(name, net)| NetEntry {
                    name: name.clone(),
                    layers: net.layers.clone(),
                })
                .collect(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    len: a.len(),
                })
                .collect(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(format!("{MAGIC} {FORMAT_VERSION}\n").as_bytes());
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        for (_, net) in &self.nets {
            for p in &net.params {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        for (_, a) in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = std::io::Cursor::new(bytes);
        let mut magic = String::new();
        reader
            .read_line(&mut magic)
            .map_err(|e| Error::Model(e.to_string()))?;
        let expected = format!("{MAGIC} {FORMAT_VERSION}");
        if magic.trim_end() != expected {
            return Err(Error::Model(format!("bad magic line '{}'", magic.trim_end())));
        }
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Model(e.to_string()))?;
        let header: ArchiveHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Model(e.to_string()))?;
        let mut rest = Vec::new();
        reader
            .read_to_end(&mut rest)
            .map_err(|e| Error::Model(e.to_string()))?;
        let mut floats = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        if rest.len() % 8 != 0 {
            return Err(Error::Model("payload is not a whole number of f64 values".into()));
        }
        let mut take = |n: usize, what: &str| -> Result<Vec<f64>> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Model(format!("truncated payload in '{what}'")));
            }
            Ok(v)
        };
        let mut nets = Vec::new();
        for entry in header.nets {
            let mut net = DenseNet::zeros(entry.layers)?;
            let p = take(net.num_params(), &entry.name)?;
            net.params.copy_from_slice(&p);
            nets.push((entry.name, net));
        }
        let mut arrays = Vec::new();
        for entry in header.arrays {
            let a = take(entry.len, &entry.name)?;
            arrays.push((entry.name, a));
        }
        if floats.next().is_some() {
            return Err(Error::Model("trailing data after declared arrays".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            nets,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
