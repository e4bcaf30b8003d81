//! Small dense statistics: first principal component by power iteration,
//! 2-D PCA projection, direction-agnostic angles, fixed-lattice histogram
//! entropy and Spearman correlation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::embed::{dot, l2_norm};

/// Bin width of the global entropy lattice.
pub const DEFAULT_BIN_WIDTH: f64 = 0.05;
pub const DEFAULT_PCA_ITERS: usize = 1000;
pub const DEFAULT_PCA_TOL: f64 = 1e-9;

const COLLAPSE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("points are degenerate (all within {COLLAPSE_EPS:e} of their centroid)")]
    DegeneratePoints,
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("input has zero rank variance")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Unit-norm first principal direction.
    pub component: Vec<f64>,
    /// Variance of the projections onto `component` (divisor `m - 1`).
    pub explained_variance: f64,
    pub mean: Vec<f64>,
    pub iterations: usize,
}

/// Dominant eigenvector of the sample covariance of `points`.
///
/// Power iteration runs until the direction moves by less than `tol` or
/// `iters` steps are spent. When there are fewer points than dimensions the
/// iteration runs on the `m x m` Gram matrix and maps back.
pub fn pca_first_component<P: AsRef<[f64]>>(
    points: &[P],
    iters: usize,
    tol: f64,
) -> Result<PcaResult, MathError> {
    let centered = Centered::new(points)?;
    let (m, n) = (centered.rows, centered.cols);

    let (component, iterations) = if n <= m {
        let cov = centered.covariance();
        let start = centered.row(centered.farthest_row()).to_vec();
        power_iteration(&cov, n, start, iters, tol, None)
    } else {
        let gram = centered.gram();
        let mut start = vec![0.0; m];
        start[centered.farthest_row()] = 1.0;
        let (u, iterations) = power_iteration(&gram, m, start, iters, tol, None);
        let mut v = vec![0.0; n];
        for (i, weight) in u.iter().enumerate() {
            for (acc, x) in v.iter_mut().zip(centered.row(i)) {
                *acc += weight * x;
            }
        }
        normalize(&mut v);
        (v, iterations)
    };

    let mut component = component;
    normalize_sign(&mut component);
    let explained_variance = centered.variance_along(&component);
    Ok(PcaResult {
        component,
        explained_variance,
        mean: centered.mean,
        iterations,
    })
}

/// A 2-D PCA basis fit on one point set and applicable to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

impl Projection2d {
    /// Fits the top two principal directions (second by deflation).
    pub fn fit<P: AsRef<[f64]>>(basis_fit: &[P]) -> Result<Self, MathError> {
        let centered = Centered::new(basis_fit)?;
        let n = centered.cols;
        if n < 2 {
            return Err(MathError::TooFewPoints {
                needed: 2,
                found: n,
            });
        }
        let mut cov = centered.covariance();
        let start = centered.row(centered.farthest_row()).to_vec();
        let (mut first, _) =
            power_iteration(&cov, n, start, DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL, None);
        normalize_sign(&mut first);
        let lambda1 = rayleigh(&cov, n, &first);

        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] -= lambda1 * first[i] * first[j];
            }
        }
        let diag_max = (0..n)
            .map(|i| cov[i * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut second = if diag_max <= 1e-12 * lambda1.max(1.0) {
            orthogonal_complement(&first)
        } else {
            let j = (0..n)
                .max_by(|&a, &b| cov[a * n + a].total_cmp(&cov[b * n + b]))
                .unwrap_or(0);
            let start = cov[j * n..(j + 1) * n].to_vec();
            let (v, _) = power_iteration(
                &cov,
                n,
                start,
                DEFAULT_PCA_ITERS,
                DEFAULT_PCA_TOL,
                Some(&first),
            );
            v
        };
        normalize_sign(&mut second);
        let explained_variance = [
            centered.variance_along(&first),
            centered.variance_along(&second),
        ];
        Ok(Self {
            mean: centered.mean,
            axes: [first, second],
            explained_variance,
        })
    }

    pub fn project(&self, point: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (slot, axis) in out.iter_mut().zip(&self.axes) {
            *slot = point
                .iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((x, mu), a)| (x - mu) * a)
                .sum();
        }
        out
    }
}

/// Fits a 2-D PCA basis on `basis_fit` and projects `points` onto it.
pub fn project_2d<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    points: &[P],
    basis_fit: &[Q],
) -> Result<Vec<[f64; 2]>, MathError> {
    let projection = Projection2d::fit(basis_fit)?;
    Ok(points
        .iter()
        .map(|p| projection.project(p.as_ref()))
        .collect())
}

/// Angle in degrees between two lines, ignoring orientation: `[0, 90]`.
pub fn absolute_angle(u: &[f64], v: &[f64]) -> Result<f64, MathError> {
    if u.len() != v.len() {
        return Err(MathError::LengthMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu <= COLLAPSE_EPS || nv <= COLLAPSE_EPS {
        return Err(MathError::ZeroVector);
    }
    let cos = (dot(u, v).abs() / (nu * nv)).min(1.0);
    Ok(cos.acos().to_degrees())
}

/// Shannon entropy (nats) of `values` binned on the lattice
/// `[j * bin_width, (j + 1) * bin_width)`. Non-finite values are ignored.
pub fn histogram_entropy(values: &[f64], bin_width: f64) -> f64 {
    assert!(bin_width > 0.0, "bin width must be positive");
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut total = 0usize;
    for v in values.iter().filter(|v| v.is_finite()) {
        *counts.entry((v / bin_width).floor() as i64).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    entropy.max(0.0)
}

/// Average (fractional) 1-based ranks; tied values share the mean rank.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MathError> {
    if a.len() != b.len() {
        return Err(MathError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MathError::TooFewPoints {
            needed: 2,
            found: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(MathError::ConstantInput);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, MathError> {
    if a.len() != b.len() {
        return Err(MathError::LengthMismatch(a.len(), b.len()));
    }
    pearson(&fractional_ranks(a), &fractional_ranks(b))
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct Centered {
    data: Vec<f64>,
    mean: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Centered {
    fn new<P: AsRef<[f64]>>(points: &[P]) -> Result<Self, MathError> {
        let rows = points.len();
        if rows < 2 {
            return Err(MathError::TooFewPoints {
                needed: 2,
                found: rows,
            });
        }
        let cols = points[0].as_ref().len();
        let mut mean = vec![0.0; cols];
        for p in points {
            let p = p.as_ref();
            if p.len() != cols {
                return Err(MathError::LengthMismatch(cols, p.len()));
            }
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut data = Vec::with_capacity(rows * cols);
        for p in points {
            data.extend(p.as_ref().iter().zip(&mean).map(|(x, m)| x - m));
        }
        let centered = Self {
            data,
            mean,
            rows,
            cols,
        };
        if l2_norm(centered.row(centered.farthest_row())) <= COLLAPSE_EPS {
            return Err(MathError::DegeneratePoints);
        }
        Ok(centered)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn farthest_row(&self) -> usize {
        (0..self.rows)
            .map(|i| (i, dot(self.row(i), self.row(i))))
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0
    }

    fn covariance(&self) -> Vec<f64> {
        let n = self.cols;
        let mut cov = vec![0.0; n * n];
        for r in 0..self.rows {
            let x = self.row(r);
            for i in 0..n {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let dst = &mut cov[i * n..i * n + i + 1];
                for (c, xj) in dst.iter_mut().zip(&x[..=i]) {
                    *c += xi * xj;
                }
            }
        }
        let scale = 1.0 / (self.rows - 1) as f64;
        for i in 0..n {
            for j in 0..=i {
                let v = cov[i * n + j] * scale;
                cov[i * n + j] = v;
                cov[j * n + i] = v;
            }
        }
        cov
    }

    fn gram(&self) -> Vec<f64> {
        let m = self.rows;
        let scale = 1.0 / (m - 1) as f64;
        let mut gram = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j)) * scale;
                gram[i * m + j] = v;
                gram[j * m + i] = v;
            }
        }
        gram
    }

    fn variance_along(&self, direction: &[f64]) -> f64 {
        let ss: f64 = (0..self.rows)
            .map(|i| {
                let p = dot(self.row(i), direction);
                p * p
            })
            .sum();
        ss / (self.rows - 1) as f64
    }
}

fn mat_vec(matrix: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&matrix[i * n..(i + 1) * n], v);
    }
}

fn rayleigh(matrix: &[f64], n: usize, v: &[f64]) -> f64 {
    let mut mv = vec![0.0; n];
    mat_vec(matrix, n, v, &mut mv);
    dot(v, &mv)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = l2_norm(v);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Flips `v` so its entry of largest magnitude is non-negative.
fn normalize_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (i, x)| {
            if x.abs() > best.1 {
                (i, x.abs())
            } else {
                best
            }
        })
        .0;
    if v.get(pivot).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn project_out(v: &mut [f64], unit: &[f64]) {
    let d = dot(v, unit);
    v.iter_mut().zip(unit).for_each(|(x, u)| *x -= d * u);
}

fn power_iteration(
    matrix: &[f64],
    n: usize,
    mut v: Vec<f64>,
    iters: usize,
    tol: f64,
    orthogonal_to: Option<&[f64]>,
) -> (Vec<f64>, usize) {
    if let Some(u) = orthogonal_to {
        project_out(&mut v, u);
    }
    normalize(&mut v);
    let mut next = vec![0.0; n];
    for iter in 1..=iters {
        mat_vec(matrix, n, &v, &mut next);
        if let Some(u) = orthogonal_to {
            project_out(&mut next, u);
        }
        if normalize(&mut next) == 0.0 {
            return (v, iter);
        }
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut next);
        if change < tol {
            return (v, iter);
        }
    }
    (v, iters)
}

fn orthogonal_complement(unit: &[f64]) -> Vec<f64> {
    let j = (0..unit.len())
        .min_by(|&a, &b| unit[a].abs().total_cmp(&unit[b].abs()))
        .unwrap_or(0);
    let mut e = vec![0.0; unit.len()];
    e[j] = 1.0;
    project_out(&mut e, unit);
    normalize(&mut e);
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_on_axis_points() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let r = pca_first_component(&pts, DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL).unwrap();
        assert!((r.component[0] - 1.0).abs() < 1e-12);
        assert!(r.component[1].abs() < 1e-12);
        assert!((r.explained_variance - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.mean, vec![1.5, 0.0]);
    }

    #[test]
    fn pca_on_diagonal_and_sign_convention() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![-(i as f64), -(i as f64)]).collect();
        let r = pca_first_component(&pts, DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.component[0] - h).abs() < 1e-12);
        assert!((r.component[1] - h).abs() < 1e-12);
    }

    #[test]
    fn pca_gram_path_matches_covariance_path() {
        // 3 points in 5 dims uses the Gram route
        let pts = [
            vec![1.0, 2.0, 0.0, -1.0, 0.5],
            vec![0.0, 1.0, 1.0, 0.0, 0.0],
            vec![3.0, 0.5, -2.0, 1.0, 1.0],
        ];
        let r = pca_first_component(&pts, DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL).unwrap();
        let proj = Projection2d::fit(&pts).unwrap();
        let cos: f64 = dot(&r.component, &proj.axes[0]);
        assert!((cos.abs() - 1.0).abs() < 1e-9);
        assert!((r.explained_variance - proj.explained_variance[0]).abs() < 1e-9);
    }

    #[test]
    fn pca_rejects_identical_points() {
        let pts = [[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert_eq!(
            pca_first_component(&pts, 10, 1e-9).unwrap_err(),
            MathError::DegeneratePoints
        );
    }

    #[test]
    fn angles() {
        assert!((absolute_angle(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(absolute_angle(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert!((absolute_angle(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(
            absolute_angle(&[0.0, 0.0], &[1.0, 1.0]),
            Err(MathError::ZeroVector)
        );
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(histogram_entropy(&[0.3; 10], DEFAULT_BIN_WIDTH), 0.0);
        assert_eq!(histogram_entropy(&[0.01, 0.02], DEFAULT_BIN_WIDTH), 0.0);
        let spread: Vec<f64> = (0..100)
            .map(|j| (j as f64 + 0.5) * DEFAULT_BIN_WIDTH)
            .collect();
        assert!((histogram_entropy(&spread, DEFAULT_BIN_WIDTH) - 100f64.ln()).abs() < 1e-12);
        // negative values fall on the same global lattice
        assert!((histogram_entropy(&[-0.01, 0.01], DEFAULT_BIN_WIDTH) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MathError::ConstantInput)
        );
        assert_eq!(
            fractional_ranks(&[1.0, 2.0, 2.0, 3.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
    }

    #[test]
    fn quantiles_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.25), 1.75);
        assert_eq!(quantile_sorted(&v, 0.75), 3.25);
        assert_eq!(quantile_sorted(&[5.0], 0.5), 5.0);
    }

    #[test]
    fn projection_of_collinear_points_has_zero_second_coordinate() {
        let pts: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)])
            .collect();
        let coords = project_2d(&pts, &pts).unwrap();
        for c in coords {
            assert!(c[1].abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_projects_to_origin() {
        let pts = [
            vec![0.0, 0.0, 1.0],
            vec![2.0, 0.0, 0.0],
            vec![0.0, 4.0, 0.0],
        ];
        let projection = Projection2d::fit(&pts).unwrap();
        let c = projection.project(&projection.mean.clone());
        assert_eq!(c, [0.0, 0.0]);
    }
}
