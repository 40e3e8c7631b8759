//! Dense kernels shared by every other module.
//!
//! Storage is `f32`, row-major. Every inner product and every accumulation
//! runs in `f64`, so sums over hundreds of thousands of recorded slots stay
//! well inside the duality tolerances.

use crate::error::{ensure_dims, Error, Result};

/// Independent partial sums kept by the reduction kernels. Fixed, so results
/// are reproducible bit for bit on a given build.
const LANES: usize = 32;

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite matrix entry at {pos}")));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from a closure evaluated at every `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense `f32` vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DenseVector(Vec<f32>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl From<Vec<f32>> for DenseVector {
    fn from(v: Vec<f32>) -> Self {
        DenseVector(v)
    }
}

impl From<&[f32]> for DenseVector {
    fn from(v: &[f32]) -> Self {
        DenseVector(v.to_vec())
    }
}

impl AsRef<[f32]> for DenseVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

fn check_finite(what: &str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::contract(format!("{what}: non-finite entry at {pos}"))),
        None => Ok(()),
    }
}

fn narrow(values: Vec<f64>) -> Vec<f32> {
    values.into_iter().map(|v| v as f32).collect()
}

/// `W x`, accumulated in `f64` and rounded to `f32`.
pub fn matvec(w: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    let out = matvec_f64(w, x.as_slice())?;
    let out = narrow(out);
    check_finite("matvec", &out)?;
    Ok(out.into())
}

/// `W x` without the final rounding.
pub fn matvec_f64(w: &DenseMatrix, x: &[f32]) -> Result<Vec<f64>> {
    ensure_dims("matvec input", w.cols, x.len())?;
    Ok((0..w.rows).map(|i| dot_f32(w.row(i), x)).collect())
}

/// `Wᵀ y`, accumulated in `f64` and rounded to `f32`.
pub fn matvec_transposed(w: &DenseMatrix, y: &DenseVector) -> Result<DenseVector> {
    let out = narrow(matvec_transposed_f64(w, y.as_slice())?);
    check_finite("matvec_transposed", &out)?;
    Ok(out.into())
}

pub fn matvec_transposed_f64(w: &DenseMatrix, y: &[f32]) -> Result<Vec<f64>> {
    ensure_dims("matvec_transposed input", w.rows, y.len())?;
    let mut acc = vec![0.0f64; w.cols];
    for (i, &yi) in y.iter().enumerate() {
        if yi != 0.0 {
            axpy_f32(&mut acc, f64::from(yi), w.row(i));
        }
    }
    Ok(acc)
}

/// Returns `W + e ⊗ x`.
pub fn outer_accumulate(w: &DenseMatrix, e: &DenseVector, x: &DenseVector) -> Result<DenseMatrix> {
    ensure_dims("outer_accumulate value", w.rows, e.dim())?;
    ensure_dims("outer_accumulate key", w.cols, x.dim())?;
    let mut out = w.clone();
    add_outer_products(&mut out, &[(e.as_slice(), x.as_slice())])?;
    check_finite("outer_accumulate", out.data())?;
    Ok(out)
}

/// `W ← W + Σ_b value_b ⊗ key_b`, one rounding per entry.
///
/// Each row's increment is summed over the pairs in the given order in `f64`
/// before being added to the stored `f32` weight. SGD updates and trace
/// replays both go through this function, which is what makes replaying a
/// trace reproduce the trained weights bit for bit.
pub fn add_outer_products(w: &mut DenseMatrix, pairs: &[(&[f32], &[f32])]) -> Result<()> {
    for (value, key) in pairs {
        ensure_dims("outer product value", w.rows, value.len())?;
        ensure_dims("outer product key", w.cols, key.len())?;
    }
    let mut acc = vec![0.0f64; w.cols];
    for i in 0..w.rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut touched = false;
        for (value, key) in pairs {
            let vi = value[i];
            if vi != 0.0 {
                axpy_f32(&mut acc, f64::from(vi), key);
                touched = true;
            }
        }
        if touched {
            for (wij, &a) in w.row_mut(i).iter_mut().zip(&acc) {
                *wij = (f64::from(*wij) + a) as f32;
            }
        }
    }
    Ok(())
}

/// `Σ aᵢ bᵢ` in `f64`.
pub fn dot(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    ensure_dims("dot", a.dim(), b.dim())?;
    Ok(dot_f32(a.as_slice(), b.as_slice()))
}

/// Unchecked dot product kernel. Panics in debug builds on length mismatch.
///
/// Products are symmetric and the reduction order depends only on the
/// index, so `dot_f32(a, b) == dot_f32(b, a)` bit for bit.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    for (l, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[l] += f64::from(*x) * f64::from(*y);
    }
    pairwise_sum(&mut acc)
}

/// Dot product of an `f32` slice with an `f64` slice.
#[inline]
pub fn dot_f32_f64(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * y[l];
        }
    }
    for (l, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[l] += f64::from(*x) * *y;
    }
    pairwise_sum(&mut acc)
}

#[inline]
fn pairwise_sum(acc: &mut [f64; LANES]) -> f64 {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0]
}

/// `acc ← acc + alpha · x`.
#[inline]
pub fn axpy_f32(acc: &mut [f64], alpha: f64, x: &[f32]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * f64::from(v);
    }
}

#[inline]
pub fn axpy_f64(acc: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Largest absolute entry.
pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> DenseVector {
        (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>().into()
    }

    // Element-wise double loop, no shared kernels.
    fn matvec_oracle(w: &DenseMatrix, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0f64; w.rows()];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &xj) in x.iter().enumerate() {
                *o += f64::from(w.get(i, j)) * f64::from(xj);
            }
        }
        out
    }

    #[test]
    fn matvec_identity_and_zero() {
        let y = matvec(&DenseMatrix::identity(2), &vec![3.0, -1.0].into()).unwrap();
        assert_eq!(y.as_slice(), &[3.0, -1.0]);
        let y = matvec(&DenseMatrix::zeros(2, 3), &vec![1.0, 2.0, 3.0].into()).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 5, 4);
        let x = random_vector(&mut rng, 4);
        let fast = matvec_f64(&w, x.as_slice()).unwrap();
        let slow = matvec_oracle(&w, x.as_slice());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 8.0 * f64::EPSILON * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn matvec_rejects_bad_shape() {
        let err = matvec(&DenseMatrix::zeros(2, 3), &vec![1.0, 2.0].into()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn transposed_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_matrix(&mut rng, 4, 3);
        let y = random_vector(&mut rng, 4);
        let fast = matvec_transposed_f64(&w, y.as_slice()).unwrap();
        let oracle = matvec_oracle(&w.transpose(), y.as_slice());
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let id = matvec_transposed(&DenseMatrix::identity(4), &y).unwrap();
        assert_eq!(id, y);
        let zero = matvec_transposed(&w, &DenseVector::zeros(4)).unwrap();
        assert_eq!(zero.as_slice(), &[0.0; 3]);
        assert!(matvec_transposed(&w, &DenseVector::zeros(3)).is_err());
    }

    #[test]
    fn outer_accumulate_small_cases() {
        let w = DenseMatrix::zeros(2, 2);
        let out = outer_accumulate(&w, &vec![1.0, 0.0].into(), &vec![0.0, 2.0].into()).unwrap();
        assert_eq!(out.row(0), &[0.0, 2.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_matrix(&mut rng, 3, 4);
        let same = outer_accumulate(&w, &DenseVector::zeros(3), &random_vector(&mut rng, 4)).unwrap();
        assert_eq!(same, w);
        assert!(outer_accumulate(&w, &DenseVector::zeros(2), &DenseVector::zeros(4)).is_err());
    }

    #[test]
    fn outer_sum_equals_value_times_key_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d_out, d_in, t) = (3, 4, 10);
        let values: Vec<DenseVector> = (0..t).map(|_| random_vector(&mut rng, d_out)).collect();
        let keys: Vec<DenseVector> = (0..t).map(|_| random_vector(&mut rng, d_in)).collect();
        let mut w = DenseMatrix::zeros(d_out, d_in);
        for (v, k) in values.iter().zip(&keys) {
            w = outer_accumulate(&w, v, k).unwrap();
        }
        // V Kᵀ by an explicit triple loop over the stacked matrices.
        let vm = DenseMatrix::from_fn(d_out, t, |i, s| values[s].as_slice()[i]);
        let km = DenseMatrix::from_fn(d_in, t, |j, s| keys[s].as_slice()[j]);
        for i in 0..d_out {
            for j in 0..d_in {
                let mut expect = 0.0f64;
                for s in 0..t {
                    expect += f64::from(vm.get(i, s)) * f64::from(km.get(j, s));
                }
                assert!((f64::from(w.get(i, j)) - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn outer_sum_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (d_out, d_in) = (4, 5);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..1000)
            .map(|_| {
                (
                    (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let accumulate = |order: &[usize]| {
            let mut acc = vec![0.0f64; d_out * d_in];
            for &t in order {
                let (v, k) = &pairs[t];
                for i in 0..d_out {
                    axpy_f64(&mut acc[i * d_in..(i + 1) * d_in], v[i], k);
                }
            }
            acc
        };
        let forward: Vec<usize> = (0..1000).collect();
        let mut shuffled = forward.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = accumulate(&forward);
        let b = accumulate(&shuffled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn dot_cases() {
        let e0: DenseVector = vec![1.0, 0.0].into();
        let e1: DenseVector = vec![0.0, 1.0].into();
        assert_eq!(dot(&e0, &e1).unwrap(), 0.0);
        let a: DenseVector = vec![3.0, 4.0].into();
        assert_eq!(dot(&a, &a).unwrap(), 25.0);
        assert!(dot(&a, &vec![1.0].into()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_vector(&mut rng, 100);
        let b = random_vector(&mut rng, 100);
        let mut oracle = 0.0f64;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            oracle += f64::from(*x) * f64::from(*y);
        }
        let fast = dot(&a, &b).unwrap();
        assert!((fast - oracle).abs() < 1e-13);
        assert_eq!(fast.to_bits(), dot(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
        let w = DenseMatrix::from_vec(1, 1, vec![f32::MAX]).unwrap();
        assert!(matvec(&w, &vec![f32::MAX].into()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn dot_is_symmetric(v in proptest::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 0..200)) {
            let (a, b): (Vec<f32>, Vec<f32>) = v.into_iter().unzip();
            proptest::prop_assert_eq!(dot_f32(&a, &b).to_bits(), dot_f32(&b, &a).to_bits());
        }

        #[test]
        fn matvec_agrees_with_loop(rows in 1usize..9, cols in 1usize..70, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_matrix(&mut rng, rows, cols);
            let x = random_vector(&mut rng, cols);
            let fast = matvec_f64(&w, x.as_slice()).unwrap();
            let slow = matvec_oracle(&w, x.as_slice());
            let scale: f64 = (0..cols).map(|j| f64::from(x.as_slice()[j]).abs()).sum();
            for (a, b) in fast.iter().zip(&slow) {
                proptest::prop_assert!((a - b).abs() <= 8.0 * f64::EPSILON * scale.max(1e-300));
            }
        }
    }
}
