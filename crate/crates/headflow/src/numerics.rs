//! Dense kernels and regression solvers.
//!
//! Two precision regimes coexist deliberately. Model tensors are `f32`
//! ([`Matrix`] stores `f32` row-major, matching the on-disk container), but
//! the regression and metric paths compute in `f64`: the solver contracts
//! (coordinate descent at `alpha = 0` agreeing with closed-form least squares
//! to 1e-8, exact anchor identities downstream) are not reachable in single
//! precision. Binary design entries and `f32` logits convert to `f64`
//! exactly, so nothing is lost at the boundary.
//!
//! The elastic net minimizes
//!
//! ```text
//! (1/(2M))·‖y − Xθ − b‖² + alpha·l1_ratio·‖θ‖₁ + ½·alpha·(1−l1_ratio)·‖θ‖₂²
//! ```
//!
//! with an unpenalized intercept `b`, i.e. the same convention as the usual
//! Python solvers, so published penalty strengths transfer unchanged. Design
//! columns are *not* standardized: masks must stay binary so coefficients
//! stay in normalized-logit units.

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from a row-major buffer; `data.len()` must equal `rows·cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix buffer holds {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// `a · b` for small dense operands (row-major, f32 accumulate).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Sentinel score meaning "this column is masked out of the distribution".
pub const MASK_SENTINEL: f32 = f32::NEG_INFINITY;

/// Row-wise numerically stable softmax.
///
/// `-inf` entries (see [`MASK_SENTINEL`]) map to exactly `0.0` when
/// `mask_sentinel_allowed` is set; otherwise they are rejected. A row that is
/// entirely sentinel has no distribution to represent and is a degeneracy
/// error, as is any non-finite non-sentinel input.
pub fn row_softmax(m: &Matrix, mask_sentinel_allowed: bool) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let dst = out.row_mut(r);
        dst.copy_from_slice(row);
        softmax_row(dst, mask_sentinel_allowed)
            .map_err(|e| Error::degenerate(format!("softmax row {r}: {e}")))?;
    }
    Ok(out)
}

/// In-place softmax over one score row; shared by [`row_softmax`] and the
/// attention kernels so masked attention has exactly one set of semantics.
pub(crate) fn softmax_row(row: &mut [f32], mask_sentinel_allowed: bool) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v.is_nan() {
            return Err(Error::invalid("NaN score".to_string()));
        }
        if v == f32::NEG_INFINITY {
            if !mask_sentinel_allowed {
                return Err(Error::invalid(
                    "mask sentinel (-inf) present but not allowed".to_string(),
                ));
            }
            continue;
        }
        if v == f32::INFINITY {
            return Err(Error::invalid("+inf score".to_string()));
        }
        if v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(Error::degenerate("all scores masked".to_string()));
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        if *v == f32::NEG_INFINITY {
            *v = 0.0;
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Regression
// ---------------------------------------------------------------------------

/// A fitted linear model `y ≈ Xθ + b`.
///
/// Solvers fill `theta`/`intercept`/`converged`; the goodness-of-fit fields
/// are populated later by whoever holds held-out data (metrics on training
/// rows would be self-grading).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RegressionFit {
    pub theta: Vec<f64>,
    pub intercept: f64,
    /// False when coordinate descent hit `max_iter` before the update norm
    /// dropped below tolerance. Deliberately a flag, not an error: a slightly
    /// unconverged fit is still reportable alongside its metrics.
    pub converged: bool,
    pub train_r2: Option<f64>,
    pub test_r2: Option<f64>,
    pub test_pearson: Option<f64>,
}

/// R² and Pearson correlation of predictions against truth.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitMetrics {
    pub r2: f64,
    pub pearson: f64,
}

fn validate_design(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::shape(format!(
            "design has {} rows but target has {} values",
            x.rows(),
            y.len()
        )));
    }
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::invalid("empty design matrix".to_string()));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite target value {v}")));
    }
    if let Some(v) = x.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!(
            "design entries must be binary 0/1, found {v}"
        )));
    }
    Ok(())
}

/// Centered copy of the design in column-major `f64`, plus column means.
fn centered_columns(x: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>) {
    let m = x.rows();
    let n = x.cols();
    let mut cols = vec![vec![0.0f64; m]; n];
    let mut means = vec![0.0f64; n];
    for j in 0..n {
        let mut sum = 0.0f64;
        for i in 0..m {
            let v = x.get(i, j) as f64;
            cols[j][i] = v;
            sum += v;
        }
        means[j] = sum / m as f64;
        for v in cols[j].iter_mut() {
            *v -= means[j];
        }
    }
    (cols, means)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[inline]
fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Elastic-net regression by cyclic coordinate descent.
///
/// Convergence criterion: the pass stops once no coordinate moved by more
/// than `tol` in a full sweep. Constant columns (zero variance after
/// centering) get a zero coefficient — there is nothing to attribute to a
/// feature that never varies.
pub fn elastic_net_fit(
    x: &Matrix,
    y: &[f64],
    alpha: f64,
    l1_ratio: f64,
    max_iter: usize,
    tol: f64,
) -> Result<RegressionFit> {
    validate_design(x, y)?;
    if !(0.0..=1.0).contains(&l1_ratio) {
        return Err(Error::invalid(format!("l1_ratio {l1_ratio} outside [0, 1]")));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha {alpha} must be finite and >= 0")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive".to_string()));
    }
    if tol <= 0.0 || !tol.is_finite() {
        return Err(Error::invalid(format!("tol {tol} must be finite and > 0")));
    }

    let m = x.rows();
    let n = x.cols();
    let mf = m as f64;
    let (cols, col_means) = centered_columns(x);
    let y_mean = mean(y);
    // Residual against the centered problem; theta starts at zero.
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut theta = vec![0.0f64; n];
    let col_sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();

    let l1 = alpha * l1_ratio;
    let l2 = alpha * (1.0 - l1_ratio);
    let mut converged = false;
    for _ in 0..max_iter {
        let mut max_delta = 0.0f64;
        for j in 0..n {
            if col_sq[j] == 0.0 {
                theta[j] = 0.0;
                continue;
            }
            let col = &cols[j];
            let mut rho = 0.0f64;
            for i in 0..m {
                rho += col[i] * resid[i];
            }
            rho += col_sq[j] * theta[j];
            let new = soft_threshold(rho / mf, l1) / (col_sq[j] / mf + l2);
            let delta = new - theta[j];
            if delta != 0.0 {
                for i in 0..m {
                    resid[i] -= delta * col[i];
                }
                theta[j] = new;
                let a = delta.abs();
                if a > max_delta {
                    max_delta = a;
                }
            }
        }
        if max_delta < tol {
            converged = true;
            break;
        }
    }

    let intercept = y_mean - col_means.iter().zip(&theta).map(|(m, t)| m * t).sum::<f64>();
    Ok(RegressionFit {
        theta,
        intercept,
        converged,
        train_r2: None,
        test_r2: None,
        test_pearson: None,
    })
}

/// Ordinary least squares via the normal equations (Cholesky on the centered
/// Gram matrix). This is the independent closed-form route the iterative
/// solver is checked against; it shares no code with coordinate descent.
///
/// Rank deficiency (duplicate/constant columns, too few rows) surfaces as a
/// degeneracy error rather than a pseudo-inverse answer.
pub fn ols_fit(x: &Matrix, y: &[f64]) -> Result<RegressionFit> {
    validate_design(x, y)?;
    let m = x.rows();
    let n = x.cols();
    if m <= n {
        return Err(Error::degenerate(format!(
            "least squares needs more rows than columns (got {m} rows, {n} columns + intercept)"
        )));
    }
    let (cols, col_means) = centered_columns(x);
    let y_mean = mean(y);
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();

    // Gram matrix and right-hand side.
    let mut g = vec![0.0f64; n * n];
    let mut b = vec![0.0f64; n];
    for j in 0..n {
        for k in j..n {
            let mut s = 0.0f64;
            for i in 0..m {
                s += cols[j][i] * cols[k][i];
            }
            g[j * n + k] = s;
            g[k * n + j] = s;
        }
        let mut s = 0.0f64;
        for i in 0..m {
            s += cols[j][i] * yc[i];
        }
        b[j] = s;
    }

    let theta = cholesky_solve(&g, &b, n)?;
    let intercept = y_mean - col_means.iter().zip(&theta).map(|(mu, t)| mu * t).sum::<f64>();
    Ok(RegressionFit {
        theta,
        intercept,
        converged: true,
        train_r2: None,
        test_r2: None,
        test_pearson: None,
    })
}

/// Solves `G x = b` for symmetric positive-definite `G` (n×n, row-major).
fn cholesky_solve(g: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let max_diag = (0..n).map(|j| g[j * n + j]).fold(0.0f64, f64::max);
    if max_diag <= 0.0 {
        return Err(Error::degenerate("singular design matrix (no column variance)".to_string()));
    }
    let tol = max_diag * 1e-10;
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        for k in 0..=j {
            let mut s = g[j * n + k];
            for p in 0..k {
                s -= l[j * n + p] * l[k * n + p];
            }
            if j == k {
                if s <= tol {
                    return Err(Error::degenerate(format!(
                        "singular design matrix (pivot {s:.3e} at column {j})"
                    )));
                }
                l[j * n + j] = s.sqrt();
            } else {
                l[j * n + k] = s / l[k * n + k];
            }
        }
    }
    // Forward then back substitution.
    let mut z = vec![0.0f64; n];
    for j in 0..n {
        let mut s = b[j];
        for p in 0..j {
            s -= l[j * n + p] * z[p];
        }
        z[j] = s / l[j * n + j];
    }
    let mut xsol = vec![0.0f64; n];
    for j in (0..n).rev() {
        let mut s = z[j];
        for p in j + 1..n {
            s -= l[p * n + j] * xsol[p];
        }
        xsol[j] = s / l[j * n + j];
    }
    Ok(xsol)
}

/// R² and Pearson correlation on paired vectors (typically held-out rows).
///
/// A constant `y_true` leaves both quantities undefined, and a constant
/// `y_pred` leaves Pearson undefined; both are degeneracy errors — reporting
/// a silent 0 or NaN would flow into ranking decisions downstream.
pub fn fit_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<FitMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "metric inputs differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::invalid("need at least two points for fit metrics".to_string()));
    }
    if y_true.iter().chain(y_pred).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in metric inputs".to_string()));
    }
    let n = y_true.len() as f64;
    let mt = mean(y_true);
    let mp = mean(y_pred);
    let mut ss_tot = 0.0;
    let mut ss_res = 0.0;
    let mut var_p = 0.0;
    let mut cov = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let dt = t - mt;
        let dp = p - mp;
        ss_tot += dt * dt;
        ss_res += (t - p) * (t - p);
        var_p += dp * dp;
        cov += dt * dp;
    }
    if ss_tot == 0.0 {
        return Err(Error::degenerate("zero-variance y_true: R²/Pearson undefined".to_string()));
    }
    if var_p == 0.0 {
        return Err(Error::degenerate("zero-variance y_pred: Pearson undefined".to_string()));
    }
    let _ = n;
    Ok(FitMetrics { r2: 1.0 - ss_res / ss_tot, pearson: cov / (ss_tot.sqrt() * var_p.sqrt()) })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
