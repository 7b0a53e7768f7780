//! Dense primitives: row-major matrices, softmax, scaled dot-product
//! attention with its hand-derived backward pass, a central-difference
//! gradient checker, Adam, and Xavier initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("attention over zero keys")]
    EmptyKeys,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("finite-difference step {0} outside (0, 1e-3]")]
    Step(f64),
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack the given rows of `source` into a new matrix.
    pub fn gather(source: &Mat, rows: &[u32]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * source.cols);
        for &r in rows {
            data.extend_from_slice(source.row(r as usize));
        }
        Self { rows: rows.len(), cols: source.cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction, in place.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Backward pass of softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, d_probs);
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - inner)).collect()
}

/// Cached forward pass of `attention(q, K, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTrace {
    pub query: Vec<f64>,
    pub keys: Mat,
    pub values: Mat,
    pub alpha: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub d_query: Vec<f64>,
    pub d_keys: Mat,
    pub d_values: Mat,
}

/// Scaled dot-product attention without projections:
/// `alpha = softmax(K q / sqrt(d))`, `output = sum_i alpha_i V_i`.
pub fn attention(query: &[f64], keys: Mat, values: Mat) -> Result<AttnTrace, NumericsError> {
    let d = query.len();
    if keys.rows() == 0 {
        return Err(NumericsError::EmptyKeys);
    }
    if keys.rows() != values.rows() || keys.cols() != d || values.cols() != d {
        return Err(NumericsError::Shape(format!(
            "q[{d}] K[{}x{}] V[{}x{}]",
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut alpha: Vec<f64> = (0..keys.rows()).map(|i| dot(keys.row(i), query) * scale).collect();
    softmax_in_place(&mut alpha);
    let mut output = vec![0.0; values.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        axpy(a, values.row(i), &mut output);
    }
    Ok(AttnTrace { query: query.to_vec(), keys, values, alpha, output })
}

/// Reverse-mode gradients of [`attention`] with respect to q, K and V.
pub fn attention_backward(trace: &AttnTrace, d_output: &[f64]) -> Result<AttnGrads, NumericsError> {
    let d = trace.query.len();
    if d_output.len() != trace.values.cols() {
        return Err(NumericsError::Shape(format!(
            "d_output[{}] for output[{}]",
            d_output.len(),
            trace.values.cols()
        )));
    }
    let kappa = trace.alpha.len();
    let scale = 1.0 / (d as f64).sqrt();

    let mut d_values = Mat::zeros(kappa, trace.values.cols());
    let mut d_alpha = vec![0.0; kappa];
    for i in 0..kappa {
        axpy(trace.alpha[i], d_output, d_values.row_mut(i));
        d_alpha[i] = dot(trace.values.row(i), d_output);
    }
    let d_scores = softmax_backward(&trace.alpha, &d_alpha);

    let mut d_query = vec![0.0; d];
    let mut d_keys = Mat::zeros(kappa, d);
    for i in 0..kappa {
        let g = d_scores[i] * scale;
        axpy(g, trace.keys.row(i), &mut d_query);
        axpy(g, &trace.query, d_keys.row_mut(i));
    }
    Ok(AttnGrads { d_query, d_keys, d_values })
}

/// Compare an analytic gradient against central differences.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(NumericsError::Step(epsilon));
    }
    if x.len() != analytic.len() {
        return Err(NumericsError::Shape(format!("{} params, {} grads", x.len(), analytic.len())));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let plus = f(&probe);
        probe[i] = x[i] - epsilon;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite("objective"));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update. A block with any non-finite gradient is
/// left untouched and reported as an error.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(NumericsError::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFinite("gradient"));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent, with the same non-finite guard as [`adam_step`].
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NumericsError> {
    if params.len() != grads.len() {
        return Err(NumericsError::Shape(format!("{} params, {} grads", params.len(), grads.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFinite("gradient"));
    }
    axpy(-lr, grads, params);
    Ok(())
}

/// Uniform Xavier initialization on `[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]`.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_with(rows, cols, &mut rng)
}

pub fn xavier_with<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Mat { rows, cols, data }
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}
