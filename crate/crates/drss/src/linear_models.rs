//! Outcome-model estimators: least squares on polynomial expansions, an
//! l1-penalized variant with cross-validated penalty, and Gaussian kernel
//! ridge regression.
//!
//! All fitters consume labeled rows only and are pure functions of their
//! inputs (and seed), so they can run concurrently across folds.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

use crate::data::{make_folds, stream, RandomStream};
use crate::error::{Error, Result};

/// Singular values below this multiple of the largest one are treated as zero
/// in the least-squares solve.
const PINV_RTOL: f64 = 1e-10;

/// Coordinate-descent convergence: max coefficient change below
/// `CD_TOL * (1 + ||beta||_inf)`.
const CD_TOL: f64 = 1e-7;
const CD_MAX_SWEEPS: usize = 100_000;

/// Deterministic feature expansion applied before a linear fit.
///
/// `Polynomial { degree: 1 }` is the identity map. Degree `d` produces the
/// per-coordinate powers `x_j, x_j^2, ..., x_j^d` (no interaction terms), so a
/// fit on `p` covariates has `1 + d*p` coefficients including the intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    Polynomial { degree: usize },
}

impl FeatureMap {
    pub fn degree(&self) -> usize {
        match self {
            FeatureMap::Polynomial { degree } => *degree,
        }
    }

    /// Number of expanded features, excluding the intercept.
    pub fn n_features(&self, p: usize) -> usize {
        self.degree() * p
    }

    /// Write the expansion of `row` into `out` (length `n_features`).
    /// Layout: all first powers, then all second powers, and so on.
    fn expand_into(&self, row: &[f64], out: &mut [f64]) {
        let p = row.len();
        let d = self.degree();
        debug_assert_eq!(out.len(), d * p);
        out[..p].copy_from_slice(row);
        for deg in 2..=d {
            for j in 0..p {
                out[(deg - 1) * p + j] = out[(deg - 2) * p + j] * row[j];
            }
        }
    }
}

/// A fitted linear model on an expanded design; `beta[0]` is the intercept.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub beta: Vec<f64>,
    pub feature_map: FeatureMap,
}

impl LinearFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let p = row.len();
        let d = self.feature_map.degree();
        let mut acc = self.beta[0];
        let mut pow = vec![1.0; p];
        for deg in 1..=d {
            for j in 0..p {
                pow[j] *= row[j];
                acc += self.beta[1 + (deg - 1) * p + j] * pow[j];
            }
        }
        acc
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let p = x.ncols();
        if self.feature_map.n_features(p) + 1 != self.beta.len() {
            return Err(Error::DimensionMismatch(format!(
                "fit expects {} coefficients for {} columns, have {}",
                self.feature_map.n_features(p) + 1,
                p,
                self.beta.len()
            )));
        }
        Ok(x.rows()
            .into_iter()
            .map(|r| self.predict_row(r.as_slice().expect("row contiguous")))
            .collect())
    }
}

fn expanded_design(x: ArrayView2<'_, f64>, map: FeatureMap) -> Vec<f64> {
    let (n, p) = (x.nrows(), x.ncols());
    let q = map.n_features(p);
    let mut z = vec![0.0; n * q];
    for (i, row) in x.rows().into_iter().enumerate() {
        map.expand_into(row.as_slice().expect("row contiguous"), &mut z[i * q..(i + 1) * q]);
    }
    z
}

/// Least squares on the degree-`degree` expansion, solved by SVD with
/// singular values below `1e-10 * sigma_max` treated as zero (minimum-norm
/// solution on near-collinear designs).
pub fn fit_least_squares(
    x_lab: ArrayView2<'_, f64>,
    y_lab: &[f64],
    degree: usize,
) -> Result<LinearFit> {
    let n = x_lab.nrows();
    if n == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    if y_lab.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} outcomes",
            n,
            y_lab.len()
        )));
    }
    if degree == 0 {
        return Err(Error::InvalidSpec("polynomial degree must be >= 1".into()));
    }
    let map = FeatureMap::Polynomial { degree };
    let q = map.n_features(x_lab.ncols());
    let z = expanded_design(x_lab, map);
    let mut a = DMatrix::<f64>::zeros(n, q + 1);
    for i in 0..n {
        a[(i, 0)] = 1.0;
        for j in 0..q {
            a[(i, 1 + j)] = z[i * q + j];
        }
    }
    let b = DVector::from_column_slice(y_lab);
    let svd = a.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !(sigma_max.is_finite() && sigma_max > 0.0) {
        return Err(Error::RankDeficientDesign);
    }
    let beta = svd
        .solve(&b, PINV_RTOL * sigma_max)
        .map_err(|_| Error::RankDeficientDesign)?;
    Ok(LinearFit {
        beta: beta.as_slice().to_vec(),
        feature_map: map,
    })
}

/// Column statistics of an expanded design used to move between the
/// standardized scale (centered, unit sample SD) and the original scale.
struct Standardization {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Columns with zero sample SD; their slopes are fixed at zero.
    constant: Vec<bool>,
    y_mean: f64,
}

impl Standardization {
    fn compute(z: &[f64], n: usize, q: usize, y: &[f64]) -> Standardization {
        let mut mean = vec![0.0; q];
        let mut scale = vec![0.0; q];
        for i in 0..n {
            for j in 0..q {
                mean[j] += z[i * q + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for i in 0..n {
            for j in 0..q {
                let c = z[i * q + j] - mean[j];
                scale[j] += c * c;
            }
        }
        let mut constant = vec![false; q];
        for j in 0..q {
            scale[j] = (scale[j] / n as f64).sqrt();
            if scale[j] <= 0.0 {
                constant[j] = true;
                scale[j] = 1.0;
            }
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        Standardization { mean, scale, constant, y_mean }
    }

    /// Standardized design (column-major) and centered outcome.
    fn apply(&self, z: &[f64], n: usize, q: usize, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut zs = vec![0.0; n * q];
        for j in 0..q {
            let (m, s) = (self.mean[j], self.scale[j]);
            let col = &mut zs[j * n..(j + 1) * n];
            for i in 0..n {
                col[i] = (z[i * q + j] - m) / s;
            }
        }
        let yc: Vec<f64> = y.iter().map(|&v| v - self.y_mean).collect();
        (zs, yc)
    }

    /// Map a standardized-scale slope vector back to the original scale.
    fn unstandardize(&self, beta_std: &[f64]) -> (f64, Vec<f64>) {
        let mut slopes = vec![0.0; beta_std.len()];
        let mut intercept = self.y_mean;
        for j in 0..beta_std.len() {
            if !self.constant[j] {
                slopes[j] = beta_std[j] / self.scale[j];
                intercept -= slopes[j] * self.mean[j];
            }
        }
        (intercept, slopes)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `min 0.5/n * ||yc - Zs b||^2 + lambda*||b||_1`
/// on a standardized column-major design (`Zs' Zs / n` has unit diagonal).
/// `beta` is updated in place; `resid` must equal `yc - Zs beta` on entry.
fn coordinate_descent(
    zs: &[f64],
    n: usize,
    constant: &[bool],
    lambda: f64,
    beta: &mut [f64],
    resid: &mut [f64],
) {
    let q = beta.len();
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        let mut max_beta = 0.0f64;
        for j in 0..q {
            if constant[j] {
                continue;
            }
            let col = &zs[j * n..(j + 1) * n];
            let mut dot = 0.0;
            for i in 0..n {
                dot += col[i] * resid[i];
            }
            let rho = dot / n as f64 + beta[j];
            let new = soft_threshold(rho, lambda);
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..n {
                    resid[i] -= delta * col[i];
                }
                beta[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
            max_beta = max_beta.max(new.abs());
        }
        if max_delta < CD_TOL * (1.0 + max_beta) {
            break;
        }
    }
}

fn lasso_grid(lambda_max: f64) -> Vec<f64> {
    let lo = 1e-4 * lambda_max;
    let k = 100;
    (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            lambda_max * (lo / lambda_max).powf(t)
        })
        .collect()
}

struct LassoProblem {
    n: usize,
    q: usize,
    zs: Vec<f64>,
    yc: Vec<f64>,
    std: Standardization,
}

impl LassoProblem {
    fn build(x: ArrayView2<'_, f64>, y: &[f64], map: FeatureMap) -> LassoProblem {
        let (n, p) = (x.nrows(), x.ncols());
        let q = map.n_features(p);
        let z = expanded_design(x, map);
        let std = Standardization::compute(&z, n, q, y);
        let (zs, yc) = std.apply(&z, n, q, y);
        LassoProblem { n, q, zs, yc, std }
    }

    fn lambda_max(&self) -> f64 {
        let mut m = 0.0f64;
        for j in 0..self.q {
            if self.std.constant[j] {
                continue;
            }
            let col = &self.zs[j * self.n..(j + 1) * self.n];
            let dot: f64 = col.iter().zip(&self.yc).map(|(a, b)| a * b).sum();
            m = m.max((dot / self.n as f64).abs());
        }
        m
    }

    /// Solve the path for the given descending lambda sequence, returning the
    /// standardized-scale solution at each value.
    fn path(&self, lambdas: &[f64]) -> Vec<Vec<f64>> {
        let mut beta = vec![0.0; self.q];
        let mut resid = self.yc.clone();
        let mut out = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            coordinate_descent(&self.zs, self.n, &self.std.constant, lambda, &mut beta, &mut resid);
            out.push(beta.clone());
        }
        out
    }
}

/// l1-penalized least squares on the degree-`degree` expansion, with the
/// penalty chosen by `cv_folds`-fold cross-validation over a 100-point
/// log-spaced grid below `lambda_max`. Features are standardized internally;
/// the returned coefficients are on the original scale and the intercept is
/// unpenalized. A constant outcome yields the intercept-only fit.
pub fn fit_lasso(
    x_lab: ArrayView2<'_, f64>,
    y_lab: &[f64],
    degree: usize,
    cv_folds: usize,
    seed: u64,
) -> Result<LinearFit> {
    let n = x_lab.nrows();
    if n == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    if y_lab.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} outcomes",
            n,
            y_lab.len()
        )));
    }
    let map = FeatureMap::Polynomial { degree };
    let problem = LassoProblem::build(x_lab, y_lab, map);
    let lambda_max = problem.lambda_max();
    if lambda_max <= 0.0 {
        // Degenerate outcome: nothing to fit beyond the mean.
        let mut beta = vec![0.0; problem.q + 1];
        beta[0] = problem.std.y_mean;
        return Ok(LinearFit { beta, feature_map: map });
    }
    let grid = lasso_grid(lambda_max);
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }

    let plan = make_folds(n, cv_folds, RandomStream::derived(seed, stream::OUTCOME_CV, 0).stream_id)?;
    let mut cv_mse = vec![0.0f64; grid.len()];
    for k in 0..cv_folds {
        let train = plan.train_indices(k);
        let eval = plan.eval_indices(k);
        let xt = x_lab.select(ndarray::Axis(0), &train);
        let yt: Vec<f64> = train.iter().map(|&i| y_lab[i]).collect();
        let sub = LassoProblem::build(xt.view(), &yt, map);
        let betas = sub.path(&grid);
        let xe = x_lab.select(ndarray::Axis(0), &eval);
        let ye: Vec<f64> = eval.iter().map(|&i| y_lab[i]).collect();
        for (g, beta_std) in betas.iter().enumerate() {
            let (b0, slopes) = sub.std.unstandardize(beta_std);
            let fit = LinearFit {
                beta: std::iter::once(b0).chain(slopes.iter().cloned()).collect(),
                feature_map: map,
            };
            let pred = fit.predict(xe.view())?;
            let mse: f64 = pred
                .iter()
                .zip(&ye)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / eval.len() as f64;
            cv_mse[g] += mse / cv_folds as f64;
        }
    }
    // Smallest CV error; ties go to the larger (earlier) lambda.
    let mut best = 0;
    for g in 1..grid.len() {
        if cv_mse[g] < cv_mse[best] {
            best = g;
        }
    }
    let beta_std = problem.path(&grid[..=best]).pop().expect("nonempty path");
    let (b0, slopes) = problem.std.unstandardize(&beta_std);
    Ok(LinearFit {
        beta: std::iter::once(b0).chain(slopes).collect(),
        feature_map: map,
    })
}

/// Lasso fit at a fixed penalty (no cross-validation); same conventions as
/// [`fit_lasso`].
pub fn fit_lasso_at(
    x_lab: ArrayView2<'_, f64>,
    y_lab: &[f64],
    degree: usize,
    lambda: f64,
) -> Result<LinearFit> {
    let n = x_lab.nrows();
    if n == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    let map = FeatureMap::Polynomial { degree };
    let problem = LassoProblem::build(x_lab, y_lab, map);
    let beta_std = problem.path(&[lambda]).pop().expect("nonempty path");
    let (b0, slopes) = problem.std.unstandardize(&beta_std);
    Ok(LinearFit {
        beta: std::iter::once(b0).chain(slopes).collect(),
        feature_map: map,
    })
}

/// Gaussian-kernel ridge regression fit: dual weights solving
/// `(K + ridge * I) alpha = y` with `K_ij = exp(-||x_i - x_j||^2 / (2 h))`.
#[derive(Debug, Clone)]
pub struct KernelRidgeFit {
    pub support: ndarray::Array2<f64>,
    pub alpha: Vec<f64>,
    pub bandwidth: f64,
    pub ridge: f64,
}

impl KernelRidgeFit {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.support.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "fit has {} columns, data has {}",
                self.support.ncols(),
                x.ncols()
            )));
        }
        let mut out = Vec::with_capacity(x.nrows());
        for row in x.rows() {
            let r = row.as_slice().expect("row contiguous");
            let mut acc = 0.0;
            for (s, a) in self.support.rows().into_iter().zip(&self.alpha) {
                let srow = s.as_slice().expect("row contiguous");
                let mut d2 = 0.0;
                for (u, v) in r.iter().zip(srow) {
                    let d = u - v;
                    d2 += d * d;
                }
                acc += a * (-d2 / (2.0 * self.bandwidth)).exp();
            }
            out.push(acc);
        }
        Ok(out)
    }
}

fn gram(x: ArrayView2<'_, f64>, bandwidth: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let ri = x.row(i);
        let ri = ri.as_slice().expect("row contiguous");
        for j in i..n {
            let rj = x.row(j);
            let rj = rj.as_slice().expect("row contiguous");
            let mut d2 = 0.0;
            for (u, v) in ri.iter().zip(rj) {
                let d = u - v;
                d2 += d * d;
            }
            let v = (-d2 / (2.0 * bandwidth)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn solve_ridge(k: &DMatrix<f64>, ridge: f64, y: &[f64]) -> Result<Vec<f64>> {
    let n = k.nrows();
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let rhs = DVector::from_column_slice(y);
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&rhs).as_slice().to_vec()),
        None => {
            // One retry with a small absolute floor before giving up.
            let floor = 1e-10 * n as f64;
            for i in 0..n {
                a[(i, i)] += floor;
            }
            a.cholesky()
                .map(|c| c.solve(&rhs).as_slice().to_vec())
                .ok_or(Error::NumericallySingularGram)
        }
    }
}

/// Default ridge grid: 10 log-spaced values in `[1e-4, 1e2]`, scaled by the
/// number of labeled rows (Gram eigenvalues grow linearly with n).
fn default_ridge_grid(n: usize) -> Vec<f64> {
    (0..10)
        .map(|i| {
            let t = i as f64 / 9.0;
            n as f64 * 1e-4 * 1e6f64.powf(t)
        })
        .collect()
}

/// Kernel ridge regression with the ridge chosen by cross-validation.
/// `bandwidth` defaults to the covariate dimension when `None`.
pub fn fit_kernel_ridge(
    x_lab: ArrayView2<'_, f64>,
    y_lab: &[f64],
    bandwidth: Option<f64>,
    ridge_grid: Option<&[f64]>,
    cv_folds: usize,
    seed: u64,
) -> Result<KernelRidgeFit> {
    let n = x_lab.nrows();
    if n == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    if y_lab.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} outcomes",
            n,
            y_lab.len()
        )));
    }
    let bandwidth = bandwidth.unwrap_or(x_lab.ncols() as f64);
    if bandwidth <= 0.0 {
        return Err(Error::InvalidSpec("bandwidth must be positive".into()));
    }
    let default_grid;
    let grid: &[f64] = match ridge_grid {
        Some(g) if !g.is_empty() => g,
        Some(_) => return Err(Error::EmptyGrid),
        None => {
            default_grid = default_ridge_grid(n);
            &default_grid
        }
    };

    let ridge = if grid.len() == 1 || n <= cv_folds {
        grid[0]
    } else {
        let plan = make_folds(n, cv_folds, RandomStream::derived(seed, stream::OUTCOME_CV, 1).stream_id)?;
        let mut best = (f64::INFINITY, grid[0]);
        for &r in grid {
            let mut mse_sum = 0.0;
            for k in 0..cv_folds {
                let train = plan.train_indices(k);
                let eval = plan.eval_indices(k);
                let xt = x_lab.select(ndarray::Axis(0), &train);
                let yt: Vec<f64> = train.iter().map(|&i| y_lab[i]).collect();
                let kt = gram(xt.view(), bandwidth);
                let alpha = solve_ridge(&kt, r, &yt)?;
                let fit = KernelRidgeFit {
                    support: xt.clone(),
                    alpha,
                    bandwidth,
                    ridge: r,
                };
                let xe = x_lab.select(ndarray::Axis(0), &eval);
                let pred = fit.predict(xe.view())?;
                mse_sum += pred
                    .iter()
                    .zip(eval.iter().map(|&i| y_lab[i]))
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum::<f64>()
                    / eval.len() as f64;
            }
            let mse = mse_sum / cv_folds as f64;
            if mse < best.0 {
                best = (mse, r);
            }
        }
        best.1
    };

    let k = gram(x_lab, bandwidth);
    let alpha = solve_ridge(&k, ridge, y_lab)?;
    Ok(KernelRidgeFit {
        support: x_lab.to_owned(),
        alpha,
        bandwidth,
        ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = RandomStream::new(seed, 99).rng();
        Array2::from_shape_fn((n, p), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn two_point_line() {
        let x = array![[0.0], [1.0]];
        let fit = fit_least_squares(x.view(), &[1.0, 3.0], 1).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.beta[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_parabola() {
        let x = array![[-1.0], [0.0], [1.0]];
        let fit = fit_least_squares(x.view(), &[1.0, 0.0, 1.0], 2).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.beta[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.beta[2], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.predict_row(&[2.0]), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn matches_normal_equation_oracle() {
        let x = random_matrix(50, 3, 7);
        let mut rng = RandomStream::new(7, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| 0.5 + r[0] - 2.0 * r[1] + 0.3 * r[2] + 0.1 * rng.random::<f64>())
            .collect();
        let fit = fit_least_squares(x.view(), &y, 1).unwrap();

        // Independent oracle: solve the normal equations with a dense LU.
        let n = 50;
        let mut a = DMatrix::<f64>::zeros(n, 4);
        for i in 0..n {
            a[(i, 0)] = 1.0;
            for j in 0..3 {
                a[(i, 1 + j)] = x[(i, j)];
            }
        }
        let ata = a.transpose() * &a;
        let aty = a.transpose() * DVector::from_column_slice(&y);
        let oracle = ata.lu().solve(&aty).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(fit.beta[j], oracle[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let x = random_matrix(80, 4, 11);
        let mut rng = RandomStream::new(11, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r[0] * r[0] - r[3] + rng.random::<f64>())
            .collect();
        let fit = fit_least_squares(x.view(), &y, 2).unwrap();
        let pred = fit.predict(x.view()).unwrap();
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let map = FeatureMap::Polynomial { degree: 2 };
        let z = expanded_design(x.view(), map);
        let q = map.n_features(4);
        let scale = y.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let mean_resid: f64 = resid.iter().sum::<f64>() / 80.0;
        assert!(mean_resid.abs() / scale <= 1e-8);
        for j in 0..q {
            let dot: f64 = (0..80).map(|i| z[i * q + j] * resid[i]).sum();
            assert!(
                (dot / 80.0).abs() / scale <= 1e-8,
                "column {j} not orthogonal: {dot}"
            );
        }
    }

    #[test]
    fn polynomial_feature_count() {
        for (p, d) in [(3usize, 1usize), (3, 2), (5, 3)] {
            let map = FeatureMap::Polynomial { degree: d };
            assert_eq!(map.n_features(p) + 1, 1 + d * p);
        }
    }

    #[test]
    fn lasso_constant_outcome() {
        let x = random_matrix(30, 4, 3);
        let y = vec![2.5; 30];
        let fit = fit_lasso(x.view(), &y, 1, 5, 1).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 2.5, epsilon = 1e-12);
        assert!(fit.beta[1..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lasso_full_shrinkage_at_lambda_max() {
        let x = random_matrix(40, 5, 5);
        let mut rng = RandomStream::new(5, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| 1.0 + 2.0 * r[0] + rng.random::<f64>())
            .collect();
        let problem = LassoProblem::build(x.view(), &y, FeatureMap::Polynomial { degree: 1 });
        let lmax = problem.lambda_max();
        let fit = fit_lasso_at(x.view(), &y, 1, lmax * 1.0001).unwrap();
        let ymean = y.iter().sum::<f64>() / 40.0;
        assert_abs_diff_eq!(fit.beta[0], ymean, epsilon = 1e-10);
        assert!(fit.beta[1..].iter().all(|&b| b == 0.0));
    }

    /// Objective on the standardized scale.
    fn lasso_objective(problem: &LassoProblem, beta: &[f64], lambda: f64) -> f64 {
        let n = problem.n;
        let mut resid = problem.yc.clone();
        for j in 0..problem.q {
            if beta[j] != 0.0 {
                let col = &problem.zs[j * n..(j + 1) * n];
                for i in 0..n {
                    resid[i] -= beta[j] * col[i];
                }
            }
        }
        let sse: f64 = resid.iter().map(|r| r * r).sum();
        0.5 * sse / n as f64 + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    #[test]
    fn lasso_beats_proximal_gradient_oracle() {
        let x = random_matrix(100, 10, 13);
        let mut rng = RandomStream::new(13, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| 1.0 + 3.0 * r[0] - 2.0 * r[4] + 0.5 * rng.random::<f64>())
            .collect();
        let problem = LassoProblem::build(x.view(), &y, FeatureMap::Polynomial { degree: 1 });
        let lambda = 0.05 * problem.lambda_max();
        let beta_cd = problem.path(&[lambda]).pop().unwrap();

        // Independent oracle: projected (proximal) gradient run to tight
        // tolerance with a conservative fixed step.
        let n = problem.n;
        let q = problem.q;
        // Lipschitz bound: ||Zs||_2^2 / n <= trace(Zs'Zs)/n = q.
        let step = 1.0 / q as f64;
        let mut beta = vec![0.0f64; q];
        for _ in 0..200_000 {
            let mut resid = problem.yc.clone();
            for j in 0..q {
                if beta[j] != 0.0 {
                    let col = &problem.zs[j * n..(j + 1) * n];
                    for i in 0..n {
                        resid[i] -= beta[j] * col[i];
                    }
                }
            }
            let mut max_move = 0.0f64;
            for j in 0..q {
                let col = &problem.zs[j * n..(j + 1) * n];
                let g: f64 = -col.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let new = soft_threshold(beta[j] - step * g, step * lambda);
                max_move = max_move.max((new - beta[j]).abs());
                beta[j] = new;
            }
            if max_move < 1e-12 {
                break;
            }
        }
        let f_cd = lasso_objective(&problem, &beta_cd, lambda);
        let f_oracle = lasso_objective(&problem, &beta, lambda);
        assert!(
            f_cd <= f_oracle + 1e-8,
            "cd objective {f_cd} vs oracle {f_oracle}"
        );
    }

    #[test]
    fn lasso_kkt_conditions() {
        let x = random_matrix(60, 8, 17);
        let mut rng = RandomStream::new(17, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| 2.0 * r[1] - r[6] + 0.3 * rng.random::<f64>())
            .collect();
        let problem = LassoProblem::build(x.view(), &y, FeatureMap::Polynomial { degree: 1 });
        for frac in [0.5, 0.1, 0.01] {
            let lambda = frac * problem.lambda_max();
            let beta = problem.path(&[lambda]).pop().unwrap();
            let n = problem.n;
            let mut resid = problem.yc.clone();
            for j in 0..problem.q {
                let col = &problem.zs[j * n..(j + 1) * n];
                for i in 0..n {
                    resid[i] -= beta[j] * col[i];
                }
            }
            for j in 0..problem.q {
                let col = &problem.zs[j * n..(j + 1) * n];
                let g: f64 = -col.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                if beta[j] == 0.0 {
                    assert!(g.abs() <= lambda * (1.0 + 1e-6), "inactive KKT at {j}");
                } else {
                    assert!(
                        (g + lambda * beta[j].signum()).abs() <= 1e-6 * (1.0 + lambda),
                        "active KKT at {j}: {g}"
                    );
                }
            }
        }
    }

    #[test]
    fn lasso_path_l1_norm_monotone() {
        let x = random_matrix(40, 8, 23);
        let mut rng = RandomStream::new(23, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r[0] + r[1] - r[2] + 0.2 * rng.random::<f64>())
            .collect();
        let problem = LassoProblem::build(x.view(), &y, FeatureMap::Polynomial { degree: 1 });
        let grid = lasso_grid(problem.lambda_max());
        let betas = problem.path(&grid);
        let mut prev = -1.0f64;
        // Grid is descending in lambda, so the l1 norm must be nondecreasing.
        for beta in betas {
            let l1: f64 = beta.iter().map(|b| b.abs()).sum();
            assert!(l1 >= prev - 1e-9, "path not monotone: {l1} < {prev}");
            prev = l1;
        }
    }

    #[test]
    fn kernel_single_point() {
        let x = array![[1.5, -0.5]];
        for ridge in [0.1, 1.0, 10.0] {
            let fit =
                fit_kernel_ridge(x.view(), &[2.0], Some(2.0), Some(&[ridge]), 5, 1).unwrap();
            let pred = fit.predict(x.view()).unwrap();
            assert_abs_diff_eq!(pred[0], 2.0 / (1.0 + ridge), epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_large_ridge_shrinks_to_zero() {
        let x = random_matrix(20, 2, 31);
        let y: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.1).collect();
        let fit = fit_kernel_ridge(x.view(), &y, Some(2.0), Some(&[1e12]), 5, 1).unwrap();
        let pred = fit.predict(x.view()).unwrap();
        assert!(pred.iter().all(|p| p.abs() < 1e-9));
    }

    #[test]
    fn kernel_matches_dense_solve_oracle() {
        let x = random_matrix(30, 3, 37);
        let mut rng = RandomStream::new(37, 100).rng();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| (r[0] * 2.0).sin() + 0.1 * rng.random::<f64>())
            .collect();
        let ridge = 0.5;
        let fit = fit_kernel_ridge(x.view(), &y, Some(3.0), Some(&[ridge]), 5, 1).unwrap();

        // Independent oracle: LU solve of the same dual system.
        let mut k = gram(x.view(), 3.0);
        for i in 0..30 {
            k[(i, i)] += ridge;
        }
        let oracle = k.lu().solve(&DVector::from_column_slice(&y)).unwrap();
        for i in 0..30 {
            assert_abs_diff_eq!(fit.alpha[i], oracle[i], epsilon = 1e-8);
        }
        // At a support point the fit interpolates up to ridge-controlled error.
        let pred = fit.predict(x.view()).unwrap();
        let max_err = pred
            .iter()
            .zip(&y)
            .map(|(p, y)| (p - y).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1.0);
    }

    #[test]
    fn predict_affine_evaluation() {
        let fit = LinearFit {
            beta: vec![1.0, 2.0],
            feature_map: FeatureMap::Polynomial { degree: 1 },
        };
        let pred = fit.predict(array![[3.0]].view()).unwrap();
        assert_abs_diff_eq!(pred[0], 7.0, epsilon = 1e-15);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let fit = LinearFit {
            beta: vec![1.0, 2.0],
            feature_map: FeatureMap::Polynomial { degree: 1 },
        };
        assert!(fit.predict(array![[3.0, 1.0]].view()).is_err());
    }
}
