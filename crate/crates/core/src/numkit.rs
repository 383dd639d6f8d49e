//! Dense numeric kernels and the probability operations the locking rule is built on.
//!
//! All routines work in `f64`. KL divergences are evaluated in log space from
//! logits (or log-probabilities, which are logits with a zero partition term),
//! so no probability flooring is ever needed.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    /// Entries drawn i.i.d. from `N(0, std²)`, filled row by row.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Rows `start..start + height` as a new matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Self {
        Self {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `y = self · x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = selfᵀ · x`.
    pub fn mul_vec_transposed(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(*xi, self.row(i), &mut y);
        }
        y
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Product of `m` row vectors of width `k` (row-major, `lhs.len() = m·k`) with a `k×n` matrix.
pub fn matmul_rows(lhs: &[f64], rhs: &Matrix) -> Vec<f64> {
    let k = rhs.rows();
    let n = rhs.cols();
    debug_assert_eq!(lhs.len() % k.max(1), 0);
    let m = lhs.len().checked_div(k).unwrap_or(0);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a = &lhs[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a.iter().enumerate() {
            if a_ip != 0.0 {
                axpy(a_ip, rhs.row(p), o);
            }
        }
    }
    out
}

pub fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn linf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization of one row: `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect()
}

/// Natural-log probabilities of a categorical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    log_probs: Vec<f64>,
}

impl Posterior {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn into_log_probs(self) -> Vec<f64> {
        self.log_probs
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    /// Largest probability and the lowest index attaining it.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &v) in self.log_probs.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0, best.1.exp())
    }

    pub fn max_prob(&self) -> f64 {
        self.argmax().1
    }

    /// Wraps log-probabilities that are already normalized (checked to 1e-9).
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() || log_probs.iter().any(|v| v.is_nan() || *v > 1e-12) {
            return Err(Error::InvalidInput("log-probabilities must be non-empty and ≤ 0".into()));
        }
        let lse = log_sum_exp(&log_probs);
        if lse.abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "log-probabilities are not normalized (logsumexp = {lse:e})"
            )));
        }
        Ok(Self { log_probs })
    }
}

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}[{i}] is not finite")));
    }
    Ok(())
}

/// `z_i − logsumexp(z)`, stabilized by subtracting the maximum.
pub fn log_softmax(z: &[f64]) -> Result<Posterior> {
    if z.len() < 2 {
        return Err(Error::InvalidInput("log_softmax needs at least two logits".into()));
    }
    check_finite(z, "logit")?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(Posterior {
        log_probs: z.iter().map(|v| ((v - max) - log_total).min(0.0)).collect(),
    })
}

/// `e^{-x} − 1 + x`, which is non-negative for every real `x`.
fn exp_neg_remainder(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        let x2 = x * x;
        x2 * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0 + x2 * x2 / 720.0)
    } else {
        (-x).exp_m1() + x
    }
}

/// Round-off tolerance below which a negative KL is treated as zero, per unit
/// of operand magnitude (the largest `|log p|` or centred difference, at least 1).
pub const KL_NEGATIVE_TOLERANCE: f64 = 1e-12;

/// `KL(softmax(z_p) ‖ softmax(z_q))`.
///
/// With `δ = z_p − z_q` centred under `p`, the divergence equals
/// `log Σ_v p_v e^{−δ_v}`. When every centred difference is small it is evaluated
/// as `ln_1p(Σ_v p_v (e^{−δ_v} − 1 + δ_v))`, which keeps full relative precision
/// for nearly identical distributions and is exactly zero when `z_p = z_q`.
pub fn kl_from_logits(z_p: &[f64], z_q: &[f64]) -> Result<f64> {
    if z_p.len() != z_q.len() {
        return Err(Error::InvalidInput(format!(
            "KL operands differ in length ({} vs {})",
            z_p.len(),
            z_q.len()
        )));
    }
    check_finite(z_q, "logit")?;
    let lp = log_softmax(z_p)?;
    let p = lp.probs();
    let delta: Vec<f64> = z_p.iter().zip(z_q).map(|(a, b)| a - b).collect();
    // Measured from δ₀ so that a constant shift centres to exactly zero.
    let mean: f64 = delta[0] + p.iter().zip(&delta).map(|(pi, d)| pi * (d - delta[0])).sum::<f64>();
    let centred: Vec<f64> = delta.iter().map(|d| d - mean).collect();

    let kl = if centred.iter().all(|d| d.abs() <= 1.0) {
        let s: f64 = p
            .iter()
            .zip(&centred)
            .map(|(pi, d)| pi * exp_neg_remainder(*d))
            .sum();
        s.ln_1p()
    } else {
        let shifted: Vec<f64> = lp
            .log_probs()
            .iter()
            .zip(&centred)
            .map(|(l, d)| l - d)
            .collect();
        log_sum_exp(&shifted)
    };

    if kl < 0.0 {
        let scale = centred
            .iter()
            .chain(lp.log_probs())
            .fold(1.0f64, |m, v| m.max(v.abs()));
        if kl < -KL_NEGATIVE_TOLERANCE * scale {
            return Err(Error::InternalConsistency(format!("KL evaluated to {kl:e}")));
        }
        return Ok(0.0);
    }
    Ok(kl)
}

/// Nearest-rank percentile: the element at rank `⌈m·n/100⌉` (rank 1 when `m = 0`)
/// of the ascending sort.
pub fn percentile_nearest_rank(values: &[f64], m: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet("percentile of an empty sequence".into()));
    }
    if !(0.0..=100.0).contains(&m) {
        return Err(Error::InvalidInput(format!("percentile {m} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((m * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Power-iteration estimate of a largest singular value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const SPECTRAL_START_SEED: u64 = 0x5eed_5eed;

/// Largest singular value of `m` by power iteration on `mᵀm`.
///
/// Iteration stops once successive estimates differ by less than `tol`; if
/// `max_iters` is exhausted the last estimate is returned with
/// `converged = false`.
pub fn spectral_norm(m: &Matrix, max_iters: usize, tol: f64) -> Result<SpectralEstimate> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput("spectral norm of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("spectral norm of a non-finite matrix".into()));
    }
    let mut rng = SeededRng::new(SPECTRAL_START_SEED);
    let mut v = rng.unit_vector(m.cols());
    let mut sigma = l2_norm(&m.mul_vec(&v));
    for it in 1..=max_iters {
        let w = m.mul_vec_transposed(&m.mul_vec(&v));
        let norm = l2_norm(&w);
        if norm == 0.0 {
            return Ok(SpectralEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            });
        }
        v = w.into_iter().map(|x| x / norm).collect();
        let next = l2_norm(&m.mul_vec(&v));
        if (next - sigma).abs() < tol {
            return Ok(SpectralEstimate {
                value: next,
                iterations: it,
                converged: true,
            });
        }
        sigma = next;
    }
    Ok(SpectralEstimate {
        value: sigma,
        iterations: max_iters,
        converged: false,
    })
}

/// Default iteration budget used where spectral norms feed the bound constants.
pub const SPECTRAL_MAX_ITERS: usize = 20_000;
pub const SPECTRAL_TOL: f64 = 1e-14;
