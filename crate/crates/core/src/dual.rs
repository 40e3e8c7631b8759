//! The dual form of a trained linear layer.
//!
//! A layer trained by gradient descent from `W₀` satisfies
//! `W = W₀ + Σₜ eₜ ⊗ xₜ`, so for any input `x`
//!
//! ```text
//! W x = W₀ x + Σₜ (xₜᵀ x) eₜ
//! ```
//!
//! The sum on the right is unnormalised dot attention over the recorded
//! memory: keys are the training inputs `xₜ`, values the error signals `eₜ`,
//! and `x` is the query. This module evaluates that right-hand side from a
//! trace and measures how closely it matches the primal `W x`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_dims, Error, Result};
use crate::linalg::{axpy_f32, dot_f32, dot_f32_f64, matvec_f64, max_abs, DenseMatrix};
use crate::nn::{LstmState, ModelCheckpoint};
use crate::recorder::{InMemoryTrace, KvMemory, SlotMeta};

/// `Σₜ (kₜᵀ q) vₜ` accumulated in `f64` in slot order.
pub fn unnormalised_attention(memory: &dyn KvMemory, q: &[f32]) -> Result<Vec<f64>> {
    Ok(unnormalised_attention_batch(memory, &[q])?.pop().expect("one query"))
}

/// Attention for several queries in a single pass over the memory.
pub fn unnormalised_attention_batch(memory: &dyn KvMemory, queries: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    for q in queries {
        ensure_dims("query", memory.d_in(), q.len())?;
    }
    let mut out = vec![vec![0.0f64; memory.d_out()]; queries.len()];
    memory.scan(&mut |_, _, key, value| {
        for (q, acc) in queries.iter().zip(out.iter_mut()) {
            let alpha = dot_f32(key, q);
            if alpha != 0.0 {
                axpy_f32(acc, alpha, value);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// `W₀ x + Attention(X, E, x)`.
pub fn dual_forward(w0: &DenseMatrix, memory: &dyn KvMemory, x: &[f32]) -> Result<Vec<f64>> {
    Ok(dual_forward_batch(w0, memory, &[x])?.pop().expect("one input"))
}

pub fn dual_forward_batch(w0: &DenseMatrix, memory: &dyn KvMemory, xs: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    if w0.rows() != memory.d_out() || w0.cols() != memory.d_in() {
        return Err(Error::contract(format!(
            "initial weights {}×{} do not match memory {}×{}",
            w0.rows(),
            w0.cols(),
            memory.d_out(),
            memory.d_in()
        )));
    }
    let mut out = unnormalised_attention_batch(memory, xs)?;
    for (x, acc) in xs.iter().zip(out.iter_mut()) {
        for (a, b) in acc.iter_mut().zip(matvec_f64(w0, x)?) {
            *a += b;
        }
    }
    Ok(out)
}

/// `W₀ + Σₜ eₜ ⊗ xₜ` re-accumulated independently in `f64`, row-major.
pub fn reconstruct_weights(w0: &DenseMatrix, memory: &dyn KvMemory) -> Result<Vec<f64>> {
    let (rows, cols) = (memory.d_out(), memory.d_in());
    if w0.rows() != rows || w0.cols() != cols {
        return Err(Error::contract("initial weights do not match memory shape"));
    }
    let mut w: Vec<f64> = w0.data().iter().map(|&v| f64::from(v)).collect();
    memory.scan(&mut |_, _, key, value| {
        for (r, &e) in value.iter().enumerate() {
            if e != 0.0 {
                axpy_f32(&mut w[r * cols..(r + 1) * cols], f64::from(e), key);
            }
        }
        Ok(())
    })?;
    Ok(w)
}

/// `‖reconstructed − W‖_F / ‖W‖_F`.
pub fn weight_reconstruction_error(w0: &DenseMatrix, w: &DenseMatrix, memory: &dyn KvMemory) -> Result<f64> {
    let rec = reconstruct_weights(w0, memory)?;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (&r, &t) in rec.iter().zip(w.data()) {
        let t = f64::from(t);
        diff += (r - t) * (r - t);
        norm += t * t;
    }
    Ok(relative(diff.sqrt(), norm.sqrt()))
}

fn relative(dev: f64, scale: f64) -> f64 {
    if dev == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        dev / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDuality {
    pub layer_id: u8,
    pub probes: usize,
    /// Largest `|primal − dual|` over all probes and output units.
    pub max_abs_dev: f64,
    /// Largest per-probe `‖primal − dual‖∞ / ‖primal‖∞`.
    pub max_rel_dev: f64,
    pub weight_recon_rel_frobenius: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualityReport {
    pub layers: Vec<LayerDuality>,
}

pub const DUALITY_CSV_HEADER: &str = "layer_id,probes,max_abs_dev,max_rel_dev,weight_recon_rel_frobenius";

impl DualityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(DUALITY_CSV_HEADER);
        s.push('\n');
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e}",
                l.layer_id, l.probes, l.max_abs_dev, l.max_rel_dev, l.weight_recon_rel_frobenius
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn max_rel_dev(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_dev).fold(0.0, f64::max)
    }

    pub fn max_weight_recon(&self) -> f64 {
        self.layers.iter().map(|l| l.weight_recon_rel_frobenius).fold(0.0, f64::max)
    }

    /// Fails with a verification error naming the first layer outside the tolerances.
    pub fn check(&self, output_tol: f64, weight_tol: f64) -> Result<()> {
        for l in &self.layers {
            if l.max_rel_dev.is_nan() || l.max_rel_dev > output_tol {
                return Err(Error::Verification(format!(
                    "layer {}: primal/dual relative deviation {:e} exceeds {:e}",
                    l.layer_id, l.max_rel_dev, output_tol
                )));
            }
            if l.weight_recon_rel_frobenius.is_nan() || l.weight_recon_rel_frobenius > weight_tol {
                return Err(Error::Verification(format!(
                    "layer {}: weight reconstruction error {:e} exceeds {:e}",
                    l.layer_id, l.weight_recon_rel_frobenius, weight_tol
                )));
            }
        }
        Ok(())
    }
}

/// Compares `W q` with the dual form for every query of every layer.
/// `layers[i] = (W₀, W)`; `queries[i]` are inputs of layer `i`.
pub fn verify_layers(
    layers: &[(&DenseMatrix, &DenseMatrix)],
    traces: &[&dyn KvMemory],
    queries: &[Vec<Vec<f32>>],
) -> Result<DualityReport> {
    if layers.len() != traces.len() || layers.len() != queries.len() {
        return Err(Error::contract(format!(
            "{} layers, {} traces, {} query sets",
            layers.len(),
            traces.len(),
            queries.len()
        )));
    }
    let mut report = DualityReport::default();
    for (i, ((w0, w), trace)) in layers.iter().zip(traces).enumerate() {
        if trace.is_partial() {
            return Err(Error::Verification(format!(
                "trace of layer {} is partial; refusing to verify",
                trace.layer_id()
            )));
        }
        if queries[i].is_empty() {
            return Err(Error::contract("verification needs at least one probe"));
        }
        let qs: Vec<&[f32]> = queries[i].iter().map(Vec::as_slice).collect();
        let duals = dual_forward_batch(w0, *trace, &qs)?;
        let (mut max_abs_dev, mut max_rel_dev) = (0.0f64, 0.0f64);
        for (q, dual) in qs.iter().zip(&duals) {
            let primal = matvec_f64(w, q)?;
            let diff: Vec<f64> = primal.iter().zip(dual).map(|(p, d)| p - d).collect();
            let dev = max_abs(&diff);
            max_abs_dev = max_abs_dev.max(dev);
            max_rel_dev = max_rel_dev.max(relative(dev, max_abs(&primal)));
        }
        report.layers.push(LayerDuality {
            layer_id: trace.layer_id(),
            probes: qs.len(),
            max_abs_dev,
            max_rel_dev,
            weight_recon_rel_frobenius: weight_reconstruction_error(w0, w, *trace)?,
        });
    }
    Ok(report)
}

/// Verification probes: input images for an MLP, token sequences for an LM.
#[derive(Clone, Debug)]
pub enum Probes {
    Images(Vec<Vec<f32>>),
    Tokens(Vec<Vec<u32>>),
}

/// Layer inputs the probes induce under the trained model, per recorded layer.
pub fn probe_queries(checkpoint: &ModelCheckpoint, probes: &Probes) -> Result<Vec<Vec<Vec<f32>>>> {
    match (checkpoint, probes) {
        (ModelCheckpoint::Mlp(m), Probes::Images(images)) => {
            let mut per_layer = vec![Vec::with_capacity(images.len()); m.layers().len()];
            for x in images {
                let fwd = m.forward(x)?;
                for (layer, input) in fwd.inputs.into_iter().enumerate() {
                    per_layer[layer].push(input);
                }
            }
            Ok(per_layer)
        }
        (ModelCheckpoint::Lstm { model, .. }, Probes::Tokens(seqs)) => {
            let mut queries = Vec::new();
            for seq in seqs {
                let mut state = LstmState::zeros(model.hidden_dim);
                for &tok in seq {
                    let s = model.step(tok, &state)?;
                    queries.push(s.grouped_input);
                    state = s.state;
                }
            }
            Ok(vec![queries])
        }
        _ => Err(Error::contract("probe kind does not match the model kind")),
    }
}

/// Checks the dual form of every recorded layer of a checkpoint.
pub fn verify_duality(checkpoint: &ModelCheckpoint, traces: &[&dyn KvMemory], probes: &Probes) -> Result<DualityReport> {
    let queries = probe_queries(checkpoint, probes)?;
    verify_layers(&checkpoint.recorded_layers(), traces, &queries)
}

/// Sums `terms` in order of increasing magnitude (ties by value), which makes
/// the result independent of the order the terms arrive in.
pub fn sorted_magnitude_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    terms.iter().sum()
}

/// Attention with each output component summed in sorted-magnitude order,
/// visiting slots in the order given (all slots when `order` is `None`).
///
/// Holds `T` terms per output component at a time, for property checks on
/// small and medium memories.
pub fn attention_sorted(memory: &dyn KvMemory, q: &[f32], order: Option<&[usize]>) -> Result<Vec<f64>> {
    ensure_dims("query", memory.d_in(), q.len())?;
    let t_len = memory.len();
    let order: Vec<usize> = match order {
        Some(o) => {
            let mut check = o.to_vec();
            check.sort_unstable();
            if check != (0..t_len).collect::<Vec<_>>() {
                return Err(Error::contract("order is not a permutation of the slots"));
            }
            o.to_vec()
        }
        None => (0..t_len).collect(),
    };
    let mut alphas = Vec::with_capacity(t_len);
    let mut values = InMemoryTrace::with_capacity(memory.layer_id(), 0, memory.d_out(), t_len);
    for &t in &order {
        let (meta, key, value): (SlotMeta, _, _) = memory.slot(t)?;
        alphas.push(dot_f32(&key, q));
        values.push(meta, &[], &value)?;
    }
    let mut terms = vec![0.0f64; t_len];
    Ok((0..memory.d_out())
        .map(|j| {
            for (i, term) in terms.iter_mut().enumerate() {
                *term = alphas[i] * f64::from(values.value(i)[j]);
            }
            sorted_magnitude_sum(&mut terms)
        })
        .collect())
}

/// True iff attention over a seeded random permutation of the slots matches
/// the unpermuted attention within `1e-9` relative.
pub fn permuted_attention_check(memory: &dyn KvMemory, q: &[f32], seed: u64) -> Result<bool> {
    let mut order: Vec<usize> = (0..memory.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = attention_sorted(memory, q, None)?;
    let permuted = attention_sorted(memory, q, Some(&order))?;
    let dev = max_abs(&base.iter().zip(&permuted).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(relative(dev, max_abs(&base)) <= 1e-9)
}

/// Both sides of `W₂ W₁ x = Attention(W₁ᵀ, W₂, x)`: the product of two linear
/// maps read as attention whose keys are the rows of `W₁` and whose values
/// are the columns of `W₂`.
pub fn ffn_attention_identity(w1: &DenseMatrix, w2: &DenseMatrix, x: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_dims("x", w1.cols(), x.len())?;
    ensure_dims("inner dimension", w1.rows(), w2.cols())?;
    let hidden = matvec_f64(w1, x)?;
    let lhs = (0..w2.rows()).map(|r| dot_f32_f64(w2.row(r), &hidden)).collect();
    let mut memory = InMemoryTrace::with_capacity(0, w1.cols(), w2.rows(), w1.rows());
    for t in 0..w1.rows() {
        memory.push(SlotMeta::default(), w1.row(t), &w2.column(t))?;
    }
    let rhs = unnormalised_attention(&memory, x)?;
    Ok((lhs, rhs))
}
