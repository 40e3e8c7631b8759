//! Bias-free relu MLP with manual backpropagation.
//!
//! Layer `i` maps its input `aᵢ` to the pre-activation `zᵢ = Wᵢ aᵢ`; hidden
//! layers apply relu, the last layer emits raw logits into softmax
//! cross-entropy. The loss of a batch is the mean of the per-example losses.
//!
//! For each example and each layer the backward pass emits a slot
//! `(key, value)` with `key = aᵢ` and `value = -(lr / B) ∂loss/∂zᵢ`, so that the
//! sum of `value ⊗ key` over a batch is exactly the SGD increment applied to
//! `Wᵢ` in that step.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_dims, Error, Result};
use crate::linalg::{add_outer_products, axpy_f32, dot_f32, DenseMatrix};

/// 784 → 800 → 800 → 10.
pub const MNIST_DIMS: [usize; 4] = [784, 800, 800, 10];

/// Mixed into the run seed so weight init and data order draw from different streams.
const INIT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Uniform(-1/√fan_in, 1/√fan_in) initialisation.
pub fn init_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let bound = 1.0 / (cols as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseMatrix>,
    init_layers: Vec<DenseMatrix>,
    seed: u64,
}

/// Inputs of every linear layer plus the logits for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpForward {
    /// `inputs[i]` is `aᵢ`, the input of layer `i`; `inputs[0]` is the example.
    pub inputs: Vec<Vec<f32>>,
    pub logits: Vec<f32>,
}

impl MlpForward {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Recorded slots of one example: `layers[i] = (key, value)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleTrace {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
    pub loss: f64,
}

/// Recorded slots of one batch, grouped per layer in batch order.
#[derive(Clone, Debug, Default)]
pub struct BatchTrace {
    pub keys: Vec<Vec<Vec<f32>>>,
    pub values: Vec<Vec<Vec<f32>>>,
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy: returns `(loss, softmax − onehot)` in `f64`.
pub fn softmax_xent(logits: &[f32], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    (loss, grad)
}

fn relu_into(z: &[f64], out: &mut Vec<f32>) {
    out.clear();
    out.extend(z.iter().map(|&v| if v > 0.0 { v as f32 } else { 0.0 }));
}

impl MlpModel {
    /// Fresh model with uniform initialisation drawn from `seed`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("invalid layer dimensions {dims:?}")));
        }
        let mut rng = init_rng(seed);
        let layers: Vec<DenseMatrix> = dims
            .windows(2)
            .map(|w| init_uniform(w[1], w[0], &mut rng))
            .collect();
        Ok(MlpModel {
            init_layers: layers.clone(),
            layers,
            seed,
        })
    }

    /// The 784-800-800-10 classifier.
    pub fn mnist(seed: u64) -> Self {
        Self::new(&MNIST_DIMS, seed).expect("fixed dims are valid")
    }

    /// Model whose initial weights are the given matrices.
    pub fn from_weights(layers: Vec<DenseMatrix>) -> Result<Self> {
        Self::from_parts(layers.clone(), layers, 0)
    }

    pub fn from_parts(init_layers: Vec<DenseMatrix>, layers: Vec<DenseMatrix>, seed: u64) -> Result<Self> {
        if layers.is_empty() || layers.len() != init_layers.len() {
            return Err(Error::contract("layer lists must be non-empty and of equal length"));
        }
        for (i, (w, w0)) in layers.iter().zip(&init_layers).enumerate() {
            if (w.rows(), w.cols()) != (w0.rows(), w0.cols()) {
                return Err(Error::contract(format!("layer {i}: trained and initial shapes differ")));
            }
            if i > 0 && layers[i - 1].rows() != w.cols() {
                return Err(Error::contract(format!("layer {i}: input dim does not chain")));
            }
        }
        Ok(MlpModel {
            layers,
            init_layers,
            seed,
        })
    }

    pub fn layers(&self) -> &[DenseMatrix] {
        &self.layers
    }

    pub fn init_layers(&self) -> &[DenseMatrix] {
        &self.init_layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].cols()];
        d.extend(self.layers.iter().map(|w| w.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().rows()
    }

    pub fn forward(&self, x: &[f32]) -> Result<MlpForward> {
        ensure_dims("mlp input", self.input_dim(), x.len())?;
        let mut inputs = vec![x.to_vec()];
        let mut z = Vec::new();
        for (i, w) in self.layers.iter().enumerate() {
            let a = &inputs[i];
            z.clear();
            z.extend((0..w.rows()).map(|r| dot_f32(w.row(r), a)));
            if i + 1 < self.layers.len() {
                let mut next = Vec::with_capacity(z.len());
                relu_into(&z, &mut next);
                inputs.push(next);
            }
        }
        let logits = z.iter().map(|&v| v as f32).collect();
        Ok(MlpForward { inputs, logits })
    }

    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(self.forward(x)?.prediction())
    }

    /// `∂loss/∂zᵢ` for every layer of one example, for the unscaled per-example loss.
    pub fn output_gradients(&self, fwd: &MlpForward, label: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        if label >= self.output_dim() {
            return Err(Error::contract(format!("label {label} out of range")));
        }
        let (loss, top) = softmax_xent(&fwd.logits, label);
        let n = self.layers.len();
        let mut deltas = vec![Vec::new(); n];
        deltas[n - 1] = top;
        for i in (1..n).rev() {
            let w = &self.layers[i];
            let mut g = vec![0.0f64; w.cols()];
            for (r, &d) in deltas[i].iter().enumerate() {
                if d != 0.0 {
                    axpy_f32(&mut g, d, w.row(r));
                }
            }
            for (gj, &aj) in g.iter_mut().zip(&fwd.inputs[i]) {
                if aj <= 0.0 {
                    *gj = 0.0;
                }
            }
            deltas[i - 1] = g;
        }
        Ok((loss, deltas))
    }

    /// Recorded slots for one example.
    pub fn backward(&self, fwd: &MlpForward, label: usize, lr: f32, batch_size: usize) -> Result<ExampleTrace> {
        let (loss, deltas) = self.output_gradients(fwd, label)?;
        let scale = -f64::from(lr) / batch_size as f64;
        let layers = deltas
            .iter()
            .zip(&fwd.inputs)
            .map(|(d, a)| (a.clone(), d.iter().map(|&v| (scale * v) as f32).collect()))
            .collect();
        Ok(ExampleTrace { layers, loss })
    }

    /// Forward and backward for a whole batch against the current weights,
    /// without updating them. Bitwise identical to calling
    /// [`MlpModel::forward`] and [`MlpModel::backward`] per example.
    pub fn batch_trace(&self, inputs: &[&[f32]], labels: &[u8], lr: f32) -> Result<BatchTrace> {
        ensure_dims("labels", inputs.len(), labels.len())?;
        let bsz = inputs.len();
        let n = self.layers.len();
        for x in inputs {
            ensure_dims("mlp input", self.input_dim(), x.len())?;
        }
        for &l in labels {
            if l as usize >= self.output_dim() {
                return Err(Error::contract(format!("label {l} out of range")));
            }
        }
        // acts[i][b] is aᵢ of example b
        let mut acts: Vec<Vec<Vec<f32>>> = vec![inputs.iter().map(|x| x.to_vec()).collect()];
        let mut logits = vec![Vec::new(); bsz];
        for (i, w) in self.layers.iter().enumerate() {
            let mut z = vec![vec![0.0f64; w.rows()]; bsz];
            let a = &acts[i];
            for r in 0..w.rows() {
                let row = w.row(r);
                for (zb, ab) in z.iter_mut().zip(a) {
                    zb[r] = dot_f32(row, ab);
                }
            }
            if i + 1 < n {
                let next = z
                    .iter()
                    .map(|zb| {
                        let mut out = Vec::with_capacity(zb.len());
                        relu_into(zb, &mut out);
                        out
                    })
                    .collect();
                acts.push(next);
            } else {
                for (lb, zb) in logits.iter_mut().zip(&z) {
                    *lb = zb.iter().map(|&v| v as f32).collect::<Vec<f32>>();
                }
            }
        }

        let mut losses = Vec::with_capacity(bsz);
        let mut predictions = Vec::with_capacity(bsz);
        let mut delta: Vec<Vec<f64>> = Vec::with_capacity(bsz);
        for (lg, &label) in logits.iter().zip(labels) {
            let (loss, g) = softmax_xent(lg, label as usize);
            losses.push(loss);
            predictions.push(argmax(lg));
            delta.push(g);
        }
        let scale = -f64::from(lr) / bsz as f64;
        let mut values: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
        for i in (0..n).rev() {
            values[i] = delta
                .iter()
                .map(|d| d.iter().map(|&v| (scale * v) as f32).collect())
                .collect();
            if i == 0 {
                break;
            }
            let w = &self.layers[i];
            let mut g = vec![vec![0.0f64; w.cols()]; bsz];
            for r in 0..w.rows() {
                let row = w.row(r);
                for (gb, db) in g.iter_mut().zip(&delta) {
                    let d = db[r];
                    if d != 0.0 {
                        axpy_f32(gb, d, row);
                    }
                }
            }
            for (gb, ab) in g.iter_mut().zip(&acts[i]) {
                for (gj, &aj) in gb.iter_mut().zip(ab) {
                    if aj <= 0.0 {
                        *gj = 0.0;
                    }
                }
            }
            delta = g;
        }
        Ok(BatchTrace {
            keys: acts,
            values,
            losses,
            predictions,
        })
    }

    /// Applies `W ← W + Σ value ⊗ key` per layer, in the given pair order.
    pub fn apply_batch(&mut self, trace: &BatchTrace) -> Result<()> {
        for (i, w) in self.layers.iter_mut().enumerate() {
            let pairs: Vec<(&[f32], &[f32])> = trace.values[i]
                .iter()
                .zip(&trace.keys[i])
                .map(|(v, k)| (v.as_slice(), k.as_slice()))
                .collect();
            add_outer_products(w, &pairs)?;
        }
        Ok(())
    }

    /// Batched logits for evaluation, same arithmetic as [`MlpModel::forward`].
    pub fn predict_batch(&self, inputs: &[&[f32]]) -> Result<Vec<usize>> {
        let labels = vec![0u8; inputs.len()];
        Ok(self.batch_trace(inputs, &labels, 0.0)?.predictions)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.layers
    }
}

/// `W ← W + Σ_batch value ⊗ key` for every layer. No momentum, no decay.
pub fn sgd_step(model: &mut MlpModel, traces: &[ExampleTrace]) -> Result<()> {
    let n = model.layers.len();
    for t in traces {
        ensure_dims("trace layer count", n, t.layers.len())?;
    }
    for (i, w) in model.layers_mut().iter_mut().enumerate() {
        let pairs: Vec<(&[f32], &[f32])> = traces
            .iter()
            .map(|t| (t.layers[i].1.as_slice(), t.layers[i].0.as_slice()))
            .collect();
        add_outer_products(w, &pairs)?;
    }
    Ok(())
}

/// Free-function form of [`MlpModel::forward`].
pub fn mlp_forward(model: &MlpModel, x: &[f32]) -> Result<MlpForward> {
    model.forward(x)
}

/// Free-function form of [`MlpModel::backward`].
pub fn mlp_backward(model: &MlpModel, fwd: &MlpForward, label: usize, lr: f32, batch_size: usize) -> Result<ExampleTrace> {
    model.backward(fwd, label, lr, batch_size)
}
