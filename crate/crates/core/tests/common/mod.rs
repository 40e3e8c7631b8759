//! Independent f64 references and small fixtures shared by the property
//! suite and the acceptance harness.
#![allow(dead_code)]

use dualform::linalg::DenseMatrix;
use dualform::nn::{LstmLmModel, LstmState, MlpModel};
use dualform::recorder::{InMemoryTrace, SlotMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// `max |a − b| / max |b|`.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Largest elementwise relative gap between two gradients. Entries whose
/// magnitude is below `floor` are compared against `floor` instead, since
/// central differences carry an absolute error of order ε².
pub fn grad_mismatch(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub const FD_EPS: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-6;

/// Mean cross-entropy of an f64 MLP with relu between layers.
pub fn mlp_loss_f64(layers: &[Vec<f64>], dims: &[usize], xs: &[Vec<f32>], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let mut a: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        for (i, w) in layers.iter().enumerate() {
            let (rows, cols) = (dims[i + 1], dims[i]);
            let mut z: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * a[c]).sum()).collect();
            if i + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[y as usize];
    }
    total / xs.len() as f64
}

/// Worst gradient mismatch of a small random MLP batch, over all layers.
pub fn mlp_fd_mismatch(seed: u64) -> f64 {
    let dims = [7usize, 6, 5, 4];
    let model = MlpModel::new(&dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xs: Vec<Vec<f32>> = (0..3).map(|_| rand_vec(&mut rng, 7, 0.0, 1.0)).collect();
    let labels: Vec<u8> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    let lr = 0.5f32;
    let refs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
    let trace = model.batch_trace(&refs, &labels, lr).unwrap();
    let layers64: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|w| w.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut worst = 0.0f64;
    for (i, w) in model.layers().iter().enumerate() {
        let (rows, cols) = (w.rows(), w.cols());
        // values are −(lr/B)·∂loss/∂z per example, so −Σ v⊗k / lr is the mean-loss gradient
        let mut analytic = vec![0.0f64; rows * cols];
        for (k, v) in trace.keys[i].iter().zip(&trace.values[i]) {
            for r in 0..rows {
                for c in 0..cols {
                    analytic[r * cols + c] -= f64::from(v[r]) * f64::from(k[c]) / f64::from(lr);
                }
            }
        }
        let numeric: Vec<f64> = (0..rows * cols)
            .map(|j| {
                let mut plus = layers64.clone();
                plus[i][j] += FD_EPS;
                let mut minus = layers64.clone();
                minus[i][j] -= FD_EPS;
                (mlp_loss_f64(&plus, &dims, &xs, &labels) - mlp_loss_f64(&minus, &dims, &xs, &labels)) / (2.0 * FD_EPS)
            })
            .collect();
        worst = worst.max(grad_mismatch(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

/// An f64 LSTM language model with the same gate layout as the library's.
pub struct LstmRef {
    pub v: usize,
    pub e: usize,
    pub h: usize,
    pub emb: Vec<f64>,
    pub grouped: Vec<f64>,
    pub out: Vec<f64>,
}

impl LstmRef {
    pub fn from(model: &LstmLmModel) -> Self {
        let cv = |m: &DenseMatrix| m.data().iter().map(|&x| f64::from(x)).collect();
        LstmRef {
            v: model.vocab,
            e: model.embed_dim,
            h: model.hidden_dim,
            emb: cv(&model.embedding),
            grouped: cv(&model.grouped_linear),
            out: cv(&model.output_proj),
        }
    }

    /// Mean next-token cross-entropy over all segments, from zero states.
    pub fn loss(&self, inputs: &[Vec<u32>], targets: &[Vec<u32>]) -> f64 {
        let (v, e, h) = (self.v, self.e, self.h);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut total = 0.0;
        let mut n = 0;
        for (seq, tgt) in inputs.iter().zip(targets) {
            let mut hs = vec![0.0f64; h];
            let mut cs = vec![0.0f64; h];
            for (&tok, &y) in seq.iter().zip(tgt) {
                let mut gi: Vec<f64> = (0..e).map(|r| self.emb[r * v + tok as usize]).collect();
                gi.extend(&hs);
                let z: Vec<f64> = (0..4 * h)
                    .map(|r| (0..e + h).map(|c| self.grouped[r * (e + h) + c] * gi[c]).sum())
                    .collect();
                for k in 0..h {
                    let (i, f, g, o) = (sig(z[k]), sig(z[h + k]), z[2 * h + k].tanh(), sig(z[3 * h + k]));
                    cs[k] = f * cs[k] + i * g;
                    hs[k] = o * cs[k].tanh();
                }
                let logits: Vec<f64> = (0..v).map(|r| (0..h).map(|c| self.out[r * h + c] * hs[c]).sum()).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                total += lse - logits[y as usize];
                n += 1;
            }
        }
        total / n as f64
    }
}

/// Worst gradient mismatch (grouped, embedding, output) of a randomized LSTM.
pub fn lstm_fd_mismatch(seed: u64, (v, e, h): (usize, usize, usize), inputs: &[Vec<u32>], targets: &[Vec<u32>]) -> f64 {
    let mut model = LstmLmModel::new(v, e, h, seed).unwrap();
    // larger weights than the default init so every gate is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    for w in model.grouped_linear.data_mut() {
        *w = rng.gen_range(-0.8..0.8);
    }
    for w in model.embedding.data_mut().iter_mut().chain(model.output_proj.data_mut()) {
        *w = rng.gen_range(-1.0..1.0);
    }
    let states = vec![LstmState::zeros(h); inputs.len()];
    let grads = model.segment_gradients(inputs, targets, &states).unwrap();
    let reference = LstmRef::from(&model);
    let mean = grads.loss_sum / grads.tokens as f64;
    assert!((mean - reference.loss(inputs, targets)).abs() < 1e-6, "forward passes disagree");
    let fd = |which: usize, len: usize| -> Vec<f64> {
        (0..len)
            .map(|j| {
                let mut p = LstmRef::from(&model);
                let mut m = LstmRef::from(&model);
                let (pp, mm) = match which {
                    0 => (&mut p.grouped, &mut m.grouped),
                    1 => (&mut p.emb, &mut m.emb),
                    _ => (&mut p.out, &mut m.out),
                };
                pp[j] += FD_EPS;
                mm[j] -= FD_EPS;
                (p.loss(inputs, targets) - m.loss(inputs, targets)) / (2.0 * FD_EPS)
            })
            .collect()
    };
    let g = grads.grouped_linear(4 * h, e + h);
    grad_mismatch(&g, &fd(0, g.len()), FD_FLOOR)
        .max(grad_mismatch(&grads.embedding, &fd(1, e * v), FD_FLOOR))
        .max(grad_mismatch(&grads.output_proj, &fd(2, v * h), FD_FLOOR))
}

/// A 5-4-3 relu net trained 10 steps at batch 4 on random data, with its
/// in-memory traces and 8 held-out probes.
pub fn toy_run(seed: u64) -> (MlpModel, Vec<InMemoryTrace>, Vec<Vec<f32>>) {
    let dims = [5usize, 4, 3];
    let mut model = MlpModel::new(&dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut mems: Vec<InMemoryTrace> = (0..2).map(|i| InMemoryTrace::new(i as u8, dims[i], dims[i + 1])).collect();
    for step in 0..10u32 {
        let xs: Vec<Vec<f32>> = (0..4).map(|_| rand_vec(&mut rng, 5, 0.0, 1.0)).collect();
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let refs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
        let trace = model.batch_trace(&refs, &labels, 0.1).unwrap();
        for (l, mem) in mems.iter_mut().enumerate() {
            for (b, &label) in labels.iter().enumerate() {
                let meta = SlotMeta {
                    step,
                    index_in_batch: b as u16,
                    class_or_reserved: label,
                    ..Default::default()
                };
                mem.push(meta, &trace.keys[l][b], &trace.values[l][b]).unwrap();
            }
        }
        model.apply_batch(&trace).unwrap();
    }
    let probes = (0..8).map(|_| rand_vec(&mut rng, 5, 0.0, 1.0)).collect();
    (model, mems, probes)
}

/// Per-layer queries (layer inputs) of `probes`.
pub fn layer_queries(model: &MlpModel, probes: &[Vec<f32>]) -> Vec<Vec<Vec<f32>>> {
    let fwd: Vec<_> = probes.iter().map(|p| model.forward(p).unwrap()).collect();
    (0..model.layers().len())
        .map(|l| fwd.iter().map(|f| f.inputs[l].clone()).collect())
        .collect()
}
