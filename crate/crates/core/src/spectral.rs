//! Dense spectral kernel: SVD, Schatten norms, the diagonal embedding,
//! the principal Lambert W branch and singular-value soft-thresholding.
//!
//! All routines work in `f64` and are pure functions of their inputs.

use ndarray::{Array1, Array2, ArrayView2};

use crate::{Error, Matrix, Result};

/// Sweep cap for the one-sided Jacobi iteration.
const MAX_SWEEPS: usize = 80;

/// Iteration cap for Halley / Newton refinement of Lambert W.
const LAMBERT_MAX_ITER: usize = 50;

/// `-1/e`, the branch point of W.
pub const LAMBERT_BRANCH_POINT: f64 = -0.367_879_441_171_442_33;

/// Full singular value decomposition `a = u · diag(sigma) · vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `rows × rows`, orthonormal columns.
    pub u: Matrix,
    /// Length `min(rows, cols)`, descending, non-negative.
    pub sigma: Array1<f64>,
    /// `cols × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> Matrix {
        compose(&self.u, self.sigma.as_slice().unwrap(), &self.vt)
    }
}

/// Which Schatten norm to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchattenP {
    /// Nuclear norm, the sum of singular values.
    One,
    /// Frobenius norm.
    Two,
    /// Spectral norm, the largest singular value.
    Inf,
}

fn check_matrix(a: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Argument(format!(
            "matrix must be non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Column-major working copy used by the Jacobi sweeps.
struct Columns {
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl Columns {
    fn from_view(a: ArrayView2<'_, f64>) -> Self {
        let (m, n) = a.dim();
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            data.extend(a.column(j).iter().copied());
        }
        Columns { m, n, data }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            data[j * n + j] = 1.0;
        }
        Columns { m: n, n, data }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.m..(j + 1) * self.m]
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let m = self.m;
        let (lo, hi) = self.data.split_at_mut(q * m);
        let cp = &mut lo[p * m..(p + 1) * m];
        let cq = &mut hi[..m];
        for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
            let (a, b) = (*x, *y);
            *x = c * a - s * b;
            *y = s * a + c * b;
        }
    }
}

/// One-sided (Hestenes) Jacobi on the columns of `work` (m ≥ n). Rotations are
/// mirrored into `v` when given.
fn jacobi_sweeps(work: &mut Columns, mut v: Option<&mut Columns>) -> Result<()> {
    let n = work.n;
    let tol = (work.m as f64) * f64::EPSILON;
    // Columns below eps·‖A‖_F end up under the rank tolerance; rotating them
    // only chases round-off.
    let fro2: f64 = work.data.iter().map(|x| x * x).sum();
    let negligible = f64::EPSILON * f64::EPSILON * fro2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in work.col(p).iter().zip(work.col(q)) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                work.rotate(p, q, c, s);
                if let Some(v) = v.as_deref_mut() {
                    v.rotate(p, q, c, s);
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
    )))
}

/// Indices of the columns sorted by descending norm; ties keep index order.
fn descending_order(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    order
}

/// Extends `basis` (orthonormal vectors of length `m`) to a full basis of R^m
/// with Gram-Schmidt against the standard basis.
fn complete_basis(basis: &mut Vec<Vec<f64>>, m: usize) {
    let mut k = 0;
    while basis.len() < m && k < m {
        let mut cand = vec![0.0; m];
        cand[k] = 1.0;
        k += 1;
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for b in basis.iter() {
                let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in cand.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cand.iter_mut().for_each(|x| *x /= norm);
            basis.push(cand);
        }
    }
}

fn first_significant_is_negative(v: &[f64]) -> bool {
    v.iter()
        .find(|x| x.abs() > 1e-12)
        .is_some_and(|x| *x < 0.0)
}

/// `(U, sigma, V)` with `U` and `V` as column lists.
type ColumnSvd = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// SVD of a tall-or-square matrix (m ≥ n): U is m×m, V is n×n.
fn svd_tall(a: ArrayView2<'_, f64>) -> Result<ColumnSvd> {
    let (m, n) = a.dim();
    let mut work = Columns::from_view(a);
    let mut v = Columns::identity(n);
    jacobi_sweeps(&mut work, Some(&mut v))?;

    let norms: Vec<f64> = (0..n)
        .map(|j| work.col(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let order = descending_order(&norms);
    let sigma_max = norms[order[0]];
    let rank_tol = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        v_cols.push(v.col(j).to_vec());
        if s > rank_tol && s > 0.0 {
            sigma.push(s);
            u_cols.push(work.col(j).iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
        }
    }
    // Zero singular values come last; their left vectors are filled in by
    // completing the basis, which keeps them ordered after the nonzero ones.
    complete_basis(&mut u_cols, m);
    if u_cols.len() != m {
        return Err(Error::Numerical("failed to complete left singular basis".into()));
    }

    for i in 0..n {
        if first_significant_is_negative(&u_cols[i]) {
            u_cols[i].iter_mut().for_each(|x| *x = -*x);
            v_cols[i].iter_mut().for_each(|x| *x = -*x);
        }
    }
    for col in u_cols.iter_mut().skip(n) {
        if first_significant_is_negative(col) {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok((u_cols, sigma, v_cols))
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols.len()), |(i, j)| cols[j][i])
}

fn from_rows(rows_data: &[Vec<f64>], cols: usize) -> Matrix {
    Array2::from_shape_fn((rows_data.len(), cols), |(i, j)| rows_data[i][j])
}

/// Full SVD with a fixed sign convention: the first significant entry of every
/// left singular vector is non-negative.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    check_matrix(a.view())?;
    let (rows, cols) = a.dim();
    if rows >= cols {
        let (u, sigma, v) = svd_tall(a.view())?;
        Ok(SvdFactors {
            u: from_columns(&u, rows),
            sigma: Array1::from(sigma),
            vt: from_rows(&v, cols),
        })
    } else {
        // a^T = U' S V'^T  =>  a = V' S U'^T
        let (up, sigma, vp) = svd_tall(a.t())?;
        let mut left = vp;
        let mut right = up;
        // Re-apply the sign convention on the left vectors of `a`.
        for i in 0..sigma.len() {
            if first_significant_is_negative(&left[i]) {
                left[i].iter_mut().for_each(|x| *x = -*x);
                right[i].iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(SvdFactors {
            u: from_columns(&left, rows),
            sigma: Array1::from(sigma),
            vt: from_rows(&right, cols),
        })
    }
}

/// Singular values only, descending.
pub fn singular_values(a: &Matrix) -> Result<Array1<f64>> {
    check_matrix(a.view())?;
    let mut work = if a.nrows() >= a.ncols() {
        Columns::from_view(a.view())
    } else {
        Columns::from_view(a.t())
    };
    jacobi_sweeps(&mut work, None)?;
    let mut norms: Vec<f64> = (0..work.n)
        .map(|j| work.col(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(|x, y| y.total_cmp(x));
    Ok(Array1::from(norms))
}

pub fn schatten_norm(a: &Matrix, p: SchattenP) -> Result<f64> {
    match p {
        SchattenP::Two => {
            check_matrix(a.view())?;
            Ok(a.iter().map(|x| x * x).sum::<f64>().sqrt())
        }
        SchattenP::One => Ok(singular_values(a)?.sum()),
        SchattenP::Inf => Ok(singular_values(a)?[0]),
    }
}

pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    schatten_norm(a, SchattenP::One)
}

pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    schatten_norm(a, SchattenP::Inf)
}

/// Rectangular diagonal matrix with `sigma` on the main diagonal.
pub fn diag_embed(sigma: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if sigma.len() > rows.min(cols) {
        return Err(Error::Argument(format!(
            "{} diagonal values do not fit a {rows}x{cols} matrix",
            sigma.len()
        )));
    }
    let mut out = Array2::zeros((rows, cols));
    for (i, &s) in sigma.iter().enumerate() {
        out[[i, i]] = s;
    }
    Ok(out)
}

/// `u[:, :k] · diag(d) · vt[:k, :]` with `k = d.len()`.
pub fn compose(u: &Matrix, d: &[f64], vt: &Matrix) -> Matrix {
    let k = d.len();
    let mut left = u.slice(ndarray::s![.., ..k]).to_owned();
    for (j, &dj) in d.iter().enumerate() {
        left.column_mut(j).mapv_inplace(|x| x * dj);
    }
    left.dot(&vt.slice(ndarray::s![..k, ..]))
}

/// Principal branch W₀ of the Lambert function: the `w ≥ -1` with `w·e^w = x`.
///
/// Halley iteration, seeded with `ln(1+x)` for `x ≥ 0` and with the branch-point
/// series for `x < 0`.
pub fn lambert_w0(x: f64) -> Result<f64> {
    if x.is_nan() || x < LAMBERT_BRANCH_POINT {
        return Err(Error::Domain(format!(
            "lambert_w0 is defined for x >= -1/e, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == LAMBERT_BRANCH_POINT {
        return Ok(-1.0);
    }
    if x == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    if x > LOG_FORM_THRESHOLD {
        // w·e^w overflows during Halley steps this close to f64::MAX.
        return lambert_w0_log(x.ln());
    }
    let mut w = if x >= 0.0 {
        x.ln_1p()
    } else {
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    };
    for _ in 0..LAMBERT_MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let next = w - f / denom;
        let step = (next - w).abs();
        w = next.max(-1.0);
        if step <= 4.0 * f64::EPSILON * (1.0 + w.abs()) {
            return Ok(w);
        }
    }
    let residual = w * w.exp() - x;
    if residual.abs() <= 1e-12 * x.abs().max(1.0) {
        Ok(w)
    } else {
        Err(Error::Numerical(format!(
            "lambert_w0({x}) did not converge (residual {residual:e})"
        )))
    }
}

/// Above this argument `lambert_w0` switches to the log-domain solver.
const LOG_FORM_THRESHOLD: f64 = 1e280;

/// Root of `w + ln w = log_x` by Newton; only used where the root exceeds 600.
fn lambert_w0_log(log_x: f64) -> Result<f64> {
    let mut w = log_x - log_x.ln();
    for _ in 0..LAMBERT_MAX_ITER {
        let f = w + w.ln() - log_x;
        let next = w - f / (1.0 + 1.0 / w);
        let step = (next - w).abs();
        w = next;
        if step <= 4.0 * f64::EPSILON * w {
            return Ok(w);
        }
    }
    Err(Error::Numerical(format!(
        "lambert_w0 at log argument {log_x} did not converge"
    )))
}

/// `W₀(e^{log_x})` without forming `e^{log_x}`, for arguments that would overflow.
pub fn lambert_w0_exp(log_x: f64) -> Result<f64> {
    if log_x.is_nan() {
        return Err(Error::Domain("lambert_w0_exp of NaN".into()));
    }
    if log_x <= LOG_FORM_THRESHOLD.ln() {
        return lambert_w0(log_x.exp());
    }
    lambert_w0_log(log_x)
}

/// Proximal map of `lam·‖·‖_*`: soft-thresholds every singular value by `lam`.
pub fn svt_prox(a: &Matrix, lam: f64) -> Result<Matrix> {
    if !(lam >= 0.0) {
        return Err(Error::Argument(format!("threshold must be >= 0, got {lam}")));
    }
    let f = svd(a)?;
    let shrunk: Vec<f64> = f.sigma.iter().map(|s| (s - lam).max(0.0)).collect();
    Ok(compose(&f.u, &shrunk, &f.vt))
}
