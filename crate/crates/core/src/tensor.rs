//! Dense numeric core: row-major matrices, activations, batch normalization.
//!
//! Everything runs at a caller-chosen precision through the [`Real`] trait;
//! production paths use `f32`, the gradient-check harness re-runs the same
//! code at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

use crate::error::{Error, Result};

/// Scalar type the whole crate is generic over.
pub trait Real:
    Float + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. A batch of vectors is stored one vector per row;
/// a single vector is a 1-row buffer.
#[derive(Clone, PartialEq)]
pub struct TensorBuffer<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Debug> Debug for TensorBuffer<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TensorBuffer({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl<R: Real> TensorBuffer<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TensorBuffer {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "from_vec",
                format!("{}x{} needs {} elements, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(TensorBuffer { rows, cols, data })
    }

    /// 1-row buffer holding a single vector.
    pub fn row_vector(data: Vec<R>) -> Self {
        TensorBuffer {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = R::one();
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().fold(R::zero(), |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dimension(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// Standard matrix product, shape (self.rows, other.cols).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dimension(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == R::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`, shape (self.rows, other.rows). This is the batched
    /// affine application: rows of `self` are input vectors, rows of `other`
    /// are the weight matrix's output rows.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dimension(
                "matmul_nt",
                format!("{}x{} * ({}x{})^T", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = R::zero();
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * other`, shape (self.cols, other.cols). Used for weight
    /// gradients: dW = dY^T * X when Y = X * W^T.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dimension(
                "matmul_tn",
                format!("({}x{})^T * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Self::zeros(m, n);
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == R::zero() {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect();
        Ok(TensorBuffer {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a - *b).collect();
        Ok(TensorBuffer {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a * *b).collect();
        Ok(TensorBuffer {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: R) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        TensorBuffer {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Adds a 1-row bias to every row.
    pub fn add_row_broadcast(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dimension(
                "add_row_broadcast",
                format!("bias {}x{} against {}x{}", bias.rows, bias.cols, self.rows, self.cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += *b;
            }
        }
        Ok(out)
    }

    /// Column sums as a 1-row buffer. Backward of a row broadcast.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Horizontal concatenation: [self | other], row counts must match.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dimension(
                "concat_cols",
                format!("{} rows vs {} rows", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(TensorBuffer {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `left_cols`, inverse of `concat_cols`.
    pub fn split_cols(&self, left_cols: usize) -> Result<(Self, Self)> {
        if left_cols > self.cols {
            return Err(Error::dimension(
                "split_cols",
                format!("split at {} of {} cols", left_cols, self.cols),
            ));
        }
        let right_cols = self.cols - left_cols;
        let mut left = Self::zeros(self.rows, left_cols);
        let mut right = Self::zeros(self.rows, right_cols);
        for r in 0..self.rows {
            let row = self.row(r);
            left.data[r * left_cols..(r + 1) * left_cols].copy_from_slice(&row[..left_cols]);
            right.data[r * right_cols..(r + 1) * right_cols].copy_from_slice(&row[left_cols..]);
        }
        Ok((left, right))
    }

    /// Elementwise logistic sigmoid, numerically stable on both tails.
    pub fn sigmoid(&self) -> Self {
        self.map(|x| {
            if x >= R::zero() {
                R::one() / (R::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (R::one() + e)
            }
        })
    }

    /// Elementwise max(0, x).
    pub fn relu(&self) -> Self {
        self.map(|x| x.max(R::zero()))
    }

    pub fn tanh_act(&self) -> Self {
        self.map(|x| x.tanh())
    }
}

/// Per-unit scale/shift and running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<R> {
    pub gamma: TensorBuffer<R>,
    pub beta: TensorBuffer<R>,
    pub running_mean: TensorBuffer<R>,
    pub running_var: TensorBuffer<R>,
    pub momentum: R,
    pub epsilon: R,
}

impl<R: Real> BatchNormState<R> {
    /// gamma=1, beta=0, zero mean, unit variance.
    pub fn identity(units: usize) -> Self {
        BatchNormState {
            gamma: TensorBuffer::row_vector(vec![R::one(); units]),
            beta: TensorBuffer::zeros(1, units),
            running_mean: TensorBuffer::zeros(1, units),
            running_var: TensorBuffer::row_vector(vec![R::one(); units]),
            momentum: R::from_f64(0.9),
            epsilon: R::from_f64(1e-5),
        }
    }

    pub fn units(&self) -> usize {
        self.gamma.cols()
    }

    /// running <- momentum * running + (1 - momentum) * batch
    pub fn fold_update(&mut self, update: &BnStatsUpdate<R>) {
        let m = self.momentum;
        let one_minus = R::one() - m;
        self.running_mean = self
            .running_mean
            .scale(m)
            .add(&update.batch_mean.scale(one_minus))
            .expect("running stats shape");
        self.running_var = self
            .running_var
            .scale(m)
            .add(&update.batch_var.scale(one_minus))
            .expect("running stats shape");
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.units();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.rows() != 1 || t.cols() != n {
                return Err(Error::dimension(
                    "batch_norm_state",
                    format!("{name} is {}x{}, expected 1x{n}", t.rows(), t.cols()),
                ));
            }
        }
        if self.running_var.data().iter().any(|v| *v < R::zero()) {
            return Err(Error::Validation("running_var has negative entries".into()));
        }
        if self.epsilon <= R::zero() {
            return Err(Error::Validation("batch-norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Values retained by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<R> {
    x_hat: TensorBuffer<R>,
    inv_std: TensorBuffer<R>,
    gamma: TensorBuffer<R>,
    mode: BnMode,
}

/// Batch statistics observed by a train-mode forward. Callers fold them into
/// the running statistics with [`BatchNormState::fold_update`]; keeping the
/// fold explicit lets a sequence of steps apply updates in step order while
/// the forward pass itself stays pure.
#[derive(Clone, Debug)]
pub struct BnStatsUpdate<R> {
    pub batch_mean: TensorBuffer<R>,
    pub batch_var: TensorBuffer<R>,
}

/// (normalized output, backward cache, train-mode batch statistics)
pub type BnForward<R> = (TensorBuffer<R>, BnCache<R>, Option<BnStatsUpdate<R>>);

/// Pure batch-norm kernel: normalizes per unit over the batch (rows) in
/// train mode, with running statistics in infer mode. Train mode reports the
/// observed batch statistics instead of mutating `state`.
pub fn bn_forward<R: Real>(
    x: &TensorBuffer<R>,
    state: &BatchNormState<R>,
    mode: BnMode,
) -> Result<BnForward<R>> {
    let n = state.units();
    if x.cols() != n {
        return Err(Error::dimension(
            "batch_norm",
            format!("input has {} cols, state has {} units", x.cols(), n),
        ));
    }
    let b = x.rows();
    match mode {
        BnMode::Infer => {
            let inv_std = state.running_var.map(|v| R::one() / (v + state.epsilon).sqrt());
            let mut x_hat = TensorBuffer::zeros(b, n);
            for r in 0..b {
                for c in 0..n {
                    let v = (x.get(r, c) - state.running_mean.get(0, c)) * inv_std.get(0, c);
                    x_hat.set(r, c, v);
                }
            }
            let y = apply_gamma_beta(&x_hat, state);
            let cache = BnCache {
                x_hat,
                inv_std,
                gamma: state.gamma.clone(),
                mode,
            };
            Ok((y, cache, None))
        }
        BnMode::Train => {
            if b < 2 {
                return Err(Error::DegenerateBatch { rows: b });
            }
            let bf = R::from_f64(b as f64);
            let mut mean = TensorBuffer::zeros(1, n);
            for r in 0..b {
                for c in 0..n {
                    let v = mean.get(0, c) + x.get(r, c);
                    mean.set(0, c, v);
                }
            }
            mean = mean.scale(R::one() / bf);
            let mut var = TensorBuffer::zeros(1, n);
            for r in 0..b {
                for c in 0..n {
                    let d = x.get(r, c) - mean.get(0, c);
                    let v = var.get(0, c) + d * d;
                    var.set(0, c, v);
                }
            }
            var = var.scale(R::one() / bf);
            let inv_std = var.map(|v| R::one() / (v + state.epsilon).sqrt());
            let mut x_hat = TensorBuffer::zeros(b, n);
            for r in 0..b {
                for c in 0..n {
                    let v = (x.get(r, c) - mean.get(0, c)) * inv_std.get(0, c);
                    x_hat.set(r, c, v);
                }
            }
            let y = apply_gamma_beta(&x_hat, state);
            let cache = BnCache {
                x_hat,
                inv_std,
                gamma: state.gamma.clone(),
                mode,
            };
            Ok((
                y,
                cache,
                Some(BnStatsUpdate {
                    batch_mean: mean,
                    batch_var: var,
                }),
            ))
        }
    }
}

fn apply_gamma_beta<R: Real>(x_hat: &TensorBuffer<R>, state: &BatchNormState<R>) -> TensorBuffer<R> {
    let (b, n) = (x_hat.rows(), x_hat.cols());
    let mut y = TensorBuffer::zeros(b, n);
    for r in 0..b {
        for c in 0..n {
            y.set(r, c, state.gamma.get(0, c) * x_hat.get(r, c) + state.beta.get(0, c));
        }
    }
    y
}

/// Spec-shaped batch_norm: train mode mutates the running statistics in place.
pub fn batch_norm<R: Real>(
    x: &TensorBuffer<R>,
    state: &mut BatchNormState<R>,
    mode: BnMode,
) -> Result<(TensorBuffer<R>, BnCache<R>)> {
    let (y, cache, update) = bn_forward(x, state, mode)?;
    if let Some(u) = update {
        state.fold_update(&u);
    }
    Ok((y, cache))
}

/// Reverse-mode of `bn_forward`. Returns (grad_x, grad_gamma, grad_beta).
pub fn bn_backward<R: Real>(
    cache: &BnCache<R>,
    grad_y: &TensorBuffer<R>,
) -> Result<(TensorBuffer<R>, TensorBuffer<R>, TensorBuffer<R>)> {
    let (b, n) = (cache.x_hat.rows(), cache.x_hat.cols());
    if grad_y.rows() != b || grad_y.cols() != n {
        return Err(Error::dimension(
            "bn_backward",
            format!("grad {}x{} vs cache {}x{}", grad_y.rows(), grad_y.cols(), b, n),
        ));
    }
    let grad_gamma = grad_y.hadamard(&cache.x_hat)?.sum_rows();
    let grad_beta = grad_y.sum_rows();
    let mut grad_x = TensorBuffer::zeros(b, n);
    match cache.mode {
        BnMode::Infer => {
            for r in 0..b {
                for c in 0..n {
                    grad_x.set(r, c, grad_y.get(r, c) * cache.gamma.get(0, c) * cache.inv_std.get(0, c));
                }
            }
        }
        BnMode::Train => {
            // dx = gamma*inv_std * (dy - mean_b(dy) - x_hat*mean_b(dy*x_hat))
            let bf = R::from_f64(b as f64);
            let mean_dy = grad_y.sum_rows().scale(R::one() / bf);
            let mean_dy_xhat = grad_y.hadamard(&cache.x_hat)?.sum_rows().scale(R::one() / bf);
            for r in 0..b {
                for c in 0..n {
                    let centered = grad_y.get(r, c)
                        - mean_dy.get(0, c)
                        - cache.x_hat.get(r, c) * mean_dy_xhat.get(0, c);
                    grad_x.set(r, c, cache.gamma.get(0, c) * cache.inv_std.get(0, c) * centered);
                }
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity_preserves_vector() {
        let id = TensorBuffer::<f32>::identity(3);
        let v = TensorBuffer::from_vec(3, 1, vec![1.5, -2.0, 0.25]).unwrap();
        let out = id.matmul(&v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn matmul_scalar_product() {
        let a = TensorBuffer::<f32>::from_vec(1, 1, vec![2.0]).unwrap();
        let b = TensorBuffer::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        // Independent oracle: plain ijk triple loop.
        let mut rng = 0x243f6a88u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) as f32 - 0.5
        };
        let a = TensorBuffer::from_vec(4, 5, (0..20).map(|_| next()).collect()).unwrap();
        let b = TensorBuffer::from_vec(5, 3, (0..15).map(|_| next()).collect()).unwrap();
        let got = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0f32;
                for p in 0..5 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                assert_close(got.get(i, j) as f64, acc as f64, 1e-6, "matmul element");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = TensorBuffer::<f32>::zeros(2, 3);
        let b = TensorBuffer::<f32>::zeros(4, 2);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_nt_and_tn_agree_with_transpose() {
        let a = TensorBuffer::<f64>::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = TensorBuffer::<f64>::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let nt = a.matmul_nt(&w).unwrap();
        let via_t = a.matmul(&w.transpose()).unwrap();
        assert_eq!(nt, via_t);

        let b = TensorBuffer::<f64>::from_vec(2, 4, (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
        let tn = a.matmul_tn(&b).unwrap();
        let via_t2 = a.transpose().matmul(&b).unwrap();
        assert_eq!(tn, via_t2);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let x = TensorBuffer::<f32>::from_vec(1, 3, vec![0.0, 40.0, -40.0]).unwrap();
        let y = x.sigmoid();
        assert_close(y.get(0, 0) as f64, 0.5, 1e-9, "sigma(0)");
        assert_close(y.get(0, 1) as f64, 1.0, 1e-7, "sigma(+40)");
        assert_close(y.get(0, 2) as f64, 0.0, 1e-7, "sigma(-40)");
        assert!(y.is_all_finite());
    }

    #[test]
    fn sigmoid_symmetry_sums_to_one() {
        let xs = vec![-7.5f32, -1.0, -0.1, 0.3, 2.0, 9.0];
        let x = TensorBuffer::row_vector(xs.clone());
        let nx = x.scale(-1.0);
        let s = x.sigmoid();
        let sn = nx.sigmoid();
        for i in 0..xs.len() {
            assert_close((s.get(0, i) + sn.get(0, i)) as f64, 1.0, 1e-7, "sigma(x)+sigma(-x)");
        }
    }

    #[test]
    fn relu_definition_and_idempotence() {
        let x = TensorBuffer::<f32>::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = x.relu();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let neg = TensorBuffer::<f32>::from_vec(1, 4, vec![-3.0, -0.5, -1e9, -1e-9]).unwrap();
        assert!(neg.relu().data().iter().all(|v| *v == 0.0));
        assert_eq!(y.relu(), y);
    }

    #[test]
    fn bn_infer_identity_stats_is_identity() {
        let st = BatchNormState::<f32>::identity(3);
        let x = TensorBuffer::from_vec(2, 3, vec![0.4, -1.2, 3.0, 0.0, 5.5, -0.7]).unwrap();
        let (y, _, upd) = bn_forward(&x, &st, BnMode::Infer).unwrap();
        assert!(upd.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            // eps=1e-5 shifts the scale by ~5e-6 relative
            assert_close(*a as f64, *b as f64, 1e-4, "bn identity");
        }
    }

    #[test]
    fn bn_train_normalizes_to_beta_gamma() {
        let mut st = BatchNormState::<f64>::identity(2);
        st.gamma = TensorBuffer::row_vector(vec![2.0, 0.5]);
        st.beta = TensorBuffer::row_vector(vec![-1.0, 3.0]);
        st.epsilon = 1e-10;
        let x = TensorBuffer::from_vec(
            8,
            2,
            vec![
                1.0, -2.0, 2.0, 0.0, -0.5, 4.0, 3.0, 1.0, 0.25, -1.0, -2.0, 2.5, 1.5, 0.5, 0.75, -3.0,
            ],
        )
        .unwrap();
        let (y, _, upd) = bn_forward(&x, &st, BnMode::Train).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..8).map(|r| y.get(r, c)).sum::<f64>() / 8.0;
            let var: f64 = (0..8).map(|r| (y.get(r, c) - mean).powi(2)).sum::<f64>() / 8.0;
            assert_close(mean, st.beta.get(0, c), 1e-4, "batch mean == beta");
            assert_close(var, st.gamma.get(0, c).powi(2), 1e-4, "batch var == gamma^2");
        }
        let u = upd.unwrap();
        let batch_mean0: f64 = (0..8).map(|r| x.get(r, 0)).sum::<f64>() / 8.0;
        assert_close(u.batch_mean.get(0, 0), batch_mean0, 1e-12, "reported batch mean");
        // momentum fold: 0.9 * old + 0.1 * batch
        let mut st2 = st.clone();
        st2.fold_update(&u);
        assert_close(st2.running_mean.get(0, 0), 0.1 * batch_mean0, 1e-12, "running mean fold");
    }

    #[test]
    fn bn_train_rejects_degenerate_batch() {
        let st = BatchNormState::<f32>::identity(2);
        let x = TensorBuffer::zeros(1, 2);
        assert!(matches!(
            bn_forward(&x, &st, BnMode::Train),
            Err(Error::DegenerateBatch { rows: 1 })
        ));
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        // Scalar loss L = sum(y * coeff); FD oracle at f64 with step 1e-5.
        let mut st = BatchNormState::<f64>::identity(3);
        st.gamma = TensorBuffer::row_vector(vec![1.3, 0.7, -0.4]);
        st.beta = TensorBuffer::row_vector(vec![0.2, -0.1, 0.05]);
        let x = TensorBuffer::from_vec(
            4,
            3,
            vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7, -0.25, 0.8, 1.1, 2.2, -1.4, 0.6],
        )
        .unwrap();
        let coeff = TensorBuffer::from_vec(
            4,
            3,
            vec![1.0, -0.5, 0.25, 0.7, 1.2, -0.3, -1.1, 0.4, 0.9, 0.2, -0.8, 1.3],
        )
        .unwrap();
        let loss = |xp: &TensorBuffer<f64>, st: &BatchNormState<f64>, mode: BnMode| {
            let (y, _, _) = bn_forward(xp, st, mode).unwrap();
            y.hadamard(&coeff).unwrap().data().iter().sum::<f64>()
        };
        for mode in [BnMode::Train, BnMode::Infer] {
            let (_, cache, _) = bn_forward(&x, &st, mode).unwrap();
            let (gx, ggamma, gbeta) = bn_backward(&cache, &coeff).unwrap();
            let h = 1e-5;
            for idx in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let up = loss(&xp, &st, mode);
                xp.data_mut()[idx] -= 2.0 * h;
                let dn = loss(&xp, &st, mode);
                let fd = (up - dn) / (2.0 * h);
                let an = gx.data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "bn dx[{idx}] mode {mode:?}: fd={fd} an={an}");
            }
            for c in 0..3 {
                let mut stp = st.clone();
                stp.gamma.set(0, c, st.gamma.get(0, c) + h);
                let up = loss(&x, &stp, mode);
                stp.gamma.set(0, c, st.gamma.get(0, c) - h);
                let dn = loss(&x, &stp, mode);
                let fd = (up - dn) / (2.0 * h);
                let rel = (fd - ggamma.get(0, c)).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-3, "bn dgamma[{c}] mode {mode:?}");
                let mut stb = st.clone();
                stb.beta.set(0, c, st.beta.get(0, c) + h);
                let up = loss(&x, &stb, mode);
                stb.beta.set(0, c, st.beta.get(0, c) - h);
                let dn = loss(&x, &stb, mode);
                let fd = (up - dn) / (2.0 * h);
                let rel = (fd - gbeta.get(0, c)).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-3, "bn dbeta[{c}] mode {mode:?}");
            }
        }
    }

    #[test]
    fn batch_norm_mutates_running_stats_in_train_mode() {
        let mut st = BatchNormState::<f64>::identity(2);
        let x = TensorBuffer::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -0.5]).unwrap();
        let before = st.running_mean.clone();
        batch_norm(&x, &mut st, BnMode::Train).unwrap();
        assert_ne!(st.running_mean, before);
        let frozen = st.clone();
        batch_norm(&x, &mut st, BnMode::Infer).unwrap();
        assert_eq!(st, frozen);
    }
}
