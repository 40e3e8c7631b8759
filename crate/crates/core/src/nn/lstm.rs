//! One-layer LSTM language model whose four gate projections share a single
//! grouped linear layer.
//!
//! Per token: `gi = [embedding[:, token]; h]`, `z = W gi` with rows ordered
//! input, forget, cell, output gate. `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`,
//! `logits = U h'`. No biases anywhere.
//!
//! Training is truncated BPTT over fixed-length segments: the hidden state is
//! carried from one segment to the next but gradients stop at the boundary.
//! The loss is the mean cross-entropy over all `B × L` tokens of a step, and
//! gradients are clipped by global norm. Only the grouped layer is recorded:
//! one slot per token with `key = gi` and `value = -lr · clip_scale · ∂loss/∂z`.

use crate::error::{Error, Result};
use crate::linalg::{add_outer_products, axpy_f32, dot_f32, DenseMatrix};
use crate::recorder::{SlotMeta, TraceSink, LM_CLASS};

use super::mlp::{init_rng, init_uniform, softmax_xent};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLmModel {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// `embed_dim × vocab`, one column per token.
    pub embedding: DenseMatrix,
    /// `4·hidden × (embed + hidden)`.
    pub grouped_linear: DenseMatrix,
    pub grouped_linear_init: DenseMatrix,
    /// `vocab × hidden`.
    pub output_proj: DenseMatrix,
    pub embedding_init: DenseMatrix,
    pub output_proj_init: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Everything one forward step produces.
#[derive(Clone, Debug)]
pub struct LstmStep {
    pub state: LstmState,
    pub grouped_input: Vec<f32>,
    pub grouped_preact: Vec<f32>,
    pub logits: Vec<f32>,
    /// Activated gates `(i, f, g, o)` concatenated.
    gates: Vec<f64>,
    /// `tanh(c')`.
    cell_tanh: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmLmModel {
    pub fn new(vocab: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::contract("LSTM dimensions must be positive"));
        }
        let mut rng = init_rng(seed);
        let embedding = init_uniform(embed_dim, vocab, &mut rng);
        let grouped_linear = init_uniform(4 * hidden_dim, embed_dim + hidden_dim, &mut rng);
        let output_proj = init_uniform(vocab, hidden_dim, &mut rng);
        Ok(LstmLmModel {
            vocab,
            embed_dim,
            hidden_dim,
            grouped_linear_init: grouped_linear.clone(),
            embedding_init: embedding.clone(),
            output_proj_init: output_proj.clone(),
            embedding,
            grouped_linear,
            output_proj,
        })
    }

    /// Builds a model from explicit matrices, which also become the initial weights.
    pub fn from_weights(embedding: DenseMatrix, grouped_linear: DenseMatrix, output_proj: DenseMatrix) -> Result<Self> {
        let (embed_dim, vocab) = (embedding.rows(), embedding.cols());
        let hidden_dim = output_proj.cols();
        if grouped_linear.rows() != 4 * hidden_dim
            || grouped_linear.cols() != embed_dim + hidden_dim
            || output_proj.rows() != vocab
        {
            return Err(Error::contract("inconsistent LSTM weight shapes"));
        }
        Ok(LstmLmModel {
            vocab,
            embed_dim,
            hidden_dim,
            grouped_linear_init: grouped_linear.clone(),
            embedding_init: embedding.clone(),
            output_proj_init: output_proj.clone(),
            embedding,
            grouped_linear,
            output_proj,
        })
    }

    pub fn grouped_input_dim(&self) -> usize {
        self.embed_dim + self.hidden_dim
    }

    pub fn step(&self, token: u32, state: &LstmState) -> Result<LstmStep> {
        if token as usize >= self.vocab {
            return Err(Error::contract(format!("token {token} outside vocabulary of {}", self.vocab)));
        }
        if state.h.len() != self.hidden_dim || state.c.len() != self.hidden_dim {
            return Err(Error::contract("state dimension does not match hidden size"));
        }
        let h = self.hidden_dim;
        let mut gi = Vec::with_capacity(self.grouped_input_dim());
        gi.extend((0..self.embed_dim).map(|r| self.embedding.get(r, token as usize)));
        gi.extend_from_slice(&state.h);
        let z: Vec<f64> = (0..4 * h).map(|r| dot_f32(self.grouped_linear.row(r), &gi)).collect();
        let mut gates = vec![0.0f64; 4 * h];
        for k in 0..h {
            gates[k] = sigmoid(z[k]);
            gates[h + k] = sigmoid(z[h + k]);
            gates[2 * h + k] = z[2 * h + k].tanh();
            gates[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        let mut c_new = vec![0.0f32; h];
        let mut h_new = vec![0.0f32; h];
        let mut cell_tanh = vec![0.0f64; h];
        for k in 0..h {
            let c = gates[h + k] * f64::from(state.c[k]) + gates[k] * gates[2 * h + k];
            let tc = c.tanh();
            c_new[k] = c as f32;
            cell_tanh[k] = tc;
            h_new[k] = (gates[3 * h + k] * tc) as f32;
        }
        let logits = (0..self.vocab)
            .map(|r| dot_f32(self.output_proj.row(r), &h_new) as f32)
            .collect();
        Ok(LstmStep {
            state: LstmState { h: h_new, c: c_new },
            grouped_input: gi,
            grouped_preact: z.iter().map(|&v| v as f32).collect(),
            logits,
            gates,
            cell_tanh,
        })
    }

    /// Runs the prompt from a zero state and returns the grouped-layer input
    /// at its last token: the attention query for that prompt.
    pub fn query_for_prompt(&self, prompt: &[u32]) -> Result<Vec<f32>> {
        let mut state = LstmState::zeros(self.hidden_dim);
        let mut last = None;
        for &tok in prompt {
            let s = self.step(tok, &state)?;
            state = s.state.clone();
            last = Some(s.grouped_input);
        }
        last.ok_or_else(|| Error::contract("empty prompt"))
    }

    /// Average cross-entropy in bits per token, reading `tokens` as one stream
    /// from a zero state.
    pub fn bits_per_token(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::contract("need at least two tokens to evaluate"));
        }
        let mut state = LstmState::zeros(self.hidden_dim);
        let mut total = 0.0;
        for w in tokens.windows(2) {
            let s = self.step(w[0], &state)?;
            total += softmax_xent(&s.logits, w[1] as usize).0;
            state = s.state;
        }
        Ok(total / (tokens.len() - 1) as f64 / std::f64::consts::LN_2)
    }
}

/// Free-function form of [`LstmLmModel::step`].
pub fn lstm_step(model: &LstmLmModel, token: u32, state: &LstmState) -> Result<LstmStep> {
    model.step(token, state)
}

/// Gradients of the mean token loss over one set of segments.
#[derive(Clone, Debug)]
pub struct SegmentGradients {
    pub loss_sum: f64,
    pub tokens: usize,
    /// `∂loss/∂z` per recorded token, in slot order.
    pub preact_grads: Vec<Vec<f64>>,
    /// Grouped-layer input per recorded token, in slot order.
    pub grouped_inputs: Vec<Vec<f32>>,
    /// `(stream, offset in segment)` per recorded token, in slot order.
    pub slot_origin: Vec<(usize, usize)>,
    /// Row-major `embed × vocab`.
    pub embedding: Vec<f64>,
    /// Row-major `vocab × hidden`.
    pub output_proj: Vec<f64>,
    pub final_states: Vec<LstmState>,
}

impl SegmentGradients {
    /// Dense `∂loss/∂W` of the grouped layer.
    pub fn grouped_linear(&self, rows: usize, cols: usize) -> Vec<f64> {
        let mut g = vec![0.0f64; rows * cols];
        for (dz, gi) in self.preact_grads.iter().zip(&self.grouped_inputs) {
            for (r, &d) in dz.iter().enumerate() {
                if d != 0.0 {
                    axpy_f32(&mut g[r * cols..(r + 1) * cols], d, gi);
                }
            }
        }
        g
    }
}

impl LstmLmModel {
    /// Forward and backward over `B` parallel segments. `inputs[b]` and
    /// `targets[b]` have equal length `L`; slots are ordered time-major
    /// (all streams at offset 0, then offset 1, ...).
    pub fn segment_gradients(&self, inputs: &[Vec<u32>], targets: &[Vec<u32>], states: &[LstmState]) -> Result<SegmentGradients> {
        let b_count = inputs.len();
        if b_count == 0 || targets.len() != b_count || states.len() != b_count {
            return Err(Error::contract("segment batch sizes disagree"));
        }
        let len = inputs[0].len();
        if inputs.iter().chain(targets).any(|s| s.len() != len) || len == 0 {
            return Err(Error::contract("segments must share one non-zero length"));
        }
        let (h, e, v) = (self.hidden_dim, self.embed_dim, self.vocab);
        let inv_n = 1.0 / (b_count * len) as f64;

        // forward, keeping every step
        let mut caches: Vec<Vec<LstmStep>> = Vec::with_capacity(b_count);
        let mut prev_c: Vec<Vec<Vec<f32>>> = Vec::with_capacity(b_count);
        let mut loss_sum = 0.0;
        for b in 0..b_count {
            let mut state = states[b].clone();
            let mut steps = Vec::with_capacity(len);
            let mut cs = Vec::with_capacity(len);
            for t in 0..len {
                let s = self.step(inputs[b][t], &state)?;
                if targets[b][t] as usize >= v {
                    return Err(Error::contract(format!("target {} outside vocabulary", targets[b][t])));
                }
                loss_sum += softmax_xent(&s.logits, targets[b][t] as usize).0;
                cs.push(state.c.clone());
                state = s.state.clone();
                steps.push(s);
            }
            caches.push(steps);
            prev_c.push(cs);
        }

        let mut d_emb = vec![0.0f64; e * v];
        let mut d_out = vec![0.0f64; v * h];
        let mut dz_all = vec![vec![Vec::new(); len]; b_count];
        for b in 0..b_count {
            let mut dh_next = vec![0.0f64; h];
            let mut dc_next = vec![0.0f64; h];
            for t in (0..len).rev() {
                let s = &caches[b][t];
                let (_, mut dlogits) = softmax_xent(&s.logits, targets[b][t] as usize);
                dlogits.iter_mut().for_each(|d| *d *= inv_n);
                let mut dh = dh_next.clone();
                for (r, &d) in dlogits.iter().enumerate() {
                    axpy_f32(&mut d_out[r * h..(r + 1) * h], d, &s.state.h);
                    axpy_f32(&mut dh, d, self.output_proj.row(r));
                }
                let g = &s.gates;
                let mut dz = vec![0.0f64; 4 * h];
                for k in 0..h {
                    let (ig, fg, gg, og) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                    let tc = s.cell_tanh[k];
                    let d_o = dh[k] * tc;
                    let dc = dh[k] * og * (1.0 - tc * tc) + dc_next[k];
                    dz[k] = dc * gg * ig * (1.0 - ig);
                    dz[h + k] = dc * f64::from(prev_c[b][t][k]) * fg * (1.0 - fg);
                    dz[2 * h + k] = dc * ig * (1.0 - gg * gg);
                    dz[3 * h + k] = d_o * og * (1.0 - og);
                    dc_next[k] = dc * fg;
                }
                let mut dgi = vec![0.0f64; e + h];
                for (r, &d) in dz.iter().enumerate() {
                    if d != 0.0 {
                        axpy_f32(&mut dgi, d, self.grouped_linear.row(r));
                    }
                }
                let tok = inputs[b][t] as usize;
                for r in 0..e {
                    d_emb[r * v + tok] += dgi[r];
                }
                dh_next.copy_from_slice(&dgi[e..]);
                dz_all[b][t] = dz;
            }
        }

        let mut preact_grads = Vec::with_capacity(b_count * len);
        let mut grouped_inputs = Vec::with_capacity(b_count * len);
        let mut slot_origin = Vec::with_capacity(b_count * len);
        for t in 0..len {
            for b in 0..b_count {
                preact_grads.push(std::mem::take(&mut dz_all[b][t]));
                grouped_inputs.push(caches[b][t].grouped_input.clone());
                slot_origin.push((b, t));
            }
        }
        let final_states = caches.iter().map(|c| c[len - 1].state.clone()).collect();
        Ok(SegmentGradients {
            loss_sum,
            tokens: b_count * len,
            preact_grads,
            grouped_inputs,
            slot_origin,
            embedding: d_emb,
            output_proj: d_out,
            final_states,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub lr: f32,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub segment_len: usize,
    pub steps: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            lr: 1.0,
            clip_norm: 5.0,
            batch_size: 32,
            segment_len: 128,
            steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmStepReport {
    pub step: usize,
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

fn add_scaled(w: &mut DenseMatrix, grad: &[f64], scale: f64) {
    for (wij, &g) in w.data_mut().iter_mut().zip(grad) {
        *wij = (f64::from(*wij) + scale * g) as f32;
    }
}

/// Trains on `tokens` (corpus positions `base_position..`), recording the
/// grouped layer into `sink`.
pub fn lstm_train(
    model: &mut LstmLmModel,
    tokens: &[u32],
    base_position: u64,
    cfg: &LmTrainConfig,
    mut sink: Option<&mut dyn TraceSink>,
    mut on_step: impl FnMut(&LstmLmModel, &LmStepReport) -> Result<()>,
) -> Result<()> {
    let (b_count, len) = (cfg.batch_size, cfg.segment_len);
    if b_count == 0 || len == 0 {
        return Err(Error::contract("batch size and segment length must be positive"));
    }
    let chunk = tokens.len() / b_count;
    if chunk < len + 1 {
        return Err(Error::contract(format!(
            "corpus of {} tokens too short for {b_count} streams of segment length {len}",
            tokens.len()
        )));
    }
    let mut states = vec![LstmState::zeros(model.hidden_dim); b_count];
    let mut offset = 0usize;
    let rows = model.grouped_linear.rows();
    let cols = model.grouped_linear.cols();
    for step in 0..cfg.steps {
        if offset + len + 1 > chunk {
            offset = 0;
            states = vec![LstmState::zeros(model.hidden_dim); b_count];
        }
        let inputs: Vec<Vec<u32>> = (0..b_count)
            .map(|b| tokens[b * chunk + offset..b * chunk + offset + len].to_vec())
            .collect();
        let targets: Vec<Vec<u32>> = (0..b_count)
            .map(|b| tokens[b * chunk + offset + 1..b * chunk + offset + len + 1].to_vec())
            .collect();
        let grads = model.segment_gradients(&inputs, &targets, &states)?;
        let gw = grads.grouped_linear(rows, cols);
        let sq = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
        let norm = (sq(&gw) + sq(&grads.embedding) + sq(&grads.output_proj)).sqrt();
        let clip_scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let scale = -f64::from(cfg.lr) * clip_scale;
        let values: Vec<Vec<f32>> = grads
            .preact_grads
            .iter()
            .map(|dz| dz.iter().map(|&d| (scale * d) as f32).collect())
            .collect();
        if let Some(sink) = sink.as_deref_mut() {
            for ((value, key), &(b, t)) in values.iter().zip(&grads.grouped_inputs).zip(&grads.slot_origin) {
                let meta = SlotMeta {
                    step: step as u32,
                    index_in_batch: b as u16,
                    task: 0,
                    class_or_reserved: LM_CLASS,
                    sample_or_position: base_position + (b * chunk + offset + t) as u64,
                };
                sink.append(&meta, key, value)?;
            }
        }
        let pairs: Vec<(&[f32], &[f32])> = values
            .iter()
            .zip(&grads.grouped_inputs)
            .map(|(v, k)| (v.as_slice(), k.as_slice()))
            .collect();
        add_outer_products(&mut model.grouped_linear, &pairs)?;
        add_scaled(&mut model.embedding, &grads.embedding, scale);
        add_scaled(&mut model.output_proj, &grads.output_proj, scale);
        states = grads.final_states;
        offset += len;
        on_step(
            model,
            &LmStepReport {
                step,
                mean_loss: grads.loss_sum / grads.tokens as f64,
                grad_norm: norm,
                clip_scale,
            },
        )?;
    }
    Ok(())
}
