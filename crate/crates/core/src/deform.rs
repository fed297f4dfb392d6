//! Gaussian-kernel resampling (GKR) and differentiable reordering (GDR).
//!
//! Both share one kernel, `W(d; σ) = exp(-d² / 2σ²)`, normalized over a
//! neighborhood: spatial KNN neighbors for resampling, all sequence
//! positions for reordering.
//!
//! Normalization subtracts the smallest squared distance in the
//! neighborhood before exponentiating. This leaves the normalized weights
//! unchanged mathematically but keeps the nearest term at exactly 1, so the
//! σ → 0 limits (hard assignment, even split between two equidistant
//! targets) are reached without the whole row underflowing to zero. The
//! stabilizer ε floors the denominator.

use crate::error::{Error, Result};
use crate::geometry::{dist2, knn, Point, PointCloud};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Two nearest-target distances closer than this count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Perturbation added to a sequential offset that lands exactly midway
/// between two targets.
pub const TIE_JITTER: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernelParams<T> {
    pub sigma: T,
    pub epsilon: f64,
}

impl<T: Scalar> GaussianKernelParams<T> {
    pub fn new(sigma: T, epsilon: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if !(epsilon > 0.0 && epsilon <= 1e-6) {
            return Err(Error::param("epsilon", format!("{epsilon} not in (0, 1e-6]")));
        }
        Ok(GaussianKernelParams { sigma, epsilon })
    }

    pub fn with_sigma(sigma: T) -> Result<Self> {
        Self::new(sigma, DEFAULT_EPSILON)
    }
}

fn check_sigma<T: Scalar>(sigma: T) -> Result<()> {
    let s = sigma.primal();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::param("sigma", format!("{s} must be positive and finite")));
    }
    Ok(())
}

/// `exp(-d² / 2σ²)`.
pub fn gaussian_weight<T: Scalar>(d: T, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    Ok((-(d * d) / (T::lit(2.0) * sigma * sigma)).exp())
}

/// `∂W/∂d = -d/σ² · W`.
pub fn gaussian_weight_grad<T: Scalar>(d: T, sigma: T) -> Result<T> {
    let w = gaussian_weight(d, sigma)?;
    Ok(-d / (sigma * sigma) * w)
}

/// Normalized kernel weights for a set of squared distances.
pub fn normalized_weights<T: Scalar>(d2: &[T], sigma: T, epsilon: f64) -> Vec<T> {
    let Some(shift) = d2.iter().copied().reduce(|a, b| a.min(b)) else {
        return Vec::new();
    };
    let two_var = T::lit(2.0) * sigma * sigma;
    let raw: Vec<T> = d2.iter().map(|&d| (-(d - shift) / two_var).exp()).collect();
    let total: T = raw.iter().copied().sum();
    let denom = total.max(T::lit(epsilon));
    raw.into_iter().map(|w| w / denom).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleResult<T> {
    /// Offset positions `p + Δp`.
    pub new_coords: Vec<Point<T>>,
    /// Interpolated features, one row per offset position.
    pub resampled: Mat<T>,
    /// `K_r` source indices per offset position, nearest first.
    pub neighbor_sets: Vec<Vec<usize>>,
    /// Normalized interpolation weights aligned with `neighbor_sets`.
    pub weights: Vec<Vec<T>>,
}

/// Resamples `features` at the offset positions `source + delta_p`.
///
/// Each offset point interpolates the features of its `k_r` nearest
/// source points (same batch only) with normalized Gaussian weights over
/// the Euclidean distance. The residual with the original features is left
/// to the caller.
pub fn gkr<T: Scalar>(
    source: &PointCloud<T>,
    features: &Mat<T>,
    delta_p: &Mat<T>,
    k_r: usize,
    kernel: &GaussianKernelParams<T>,
) -> Result<ResampleResult<T>> {
    let n = source.len();
    if features.rows() != n {
        return Err(Error::shape("gkr features", n, features.rows()));
    }
    delta_p.expect_shape("gkr delta_p", n, 3)?;
    if k_r == 0 {
        return Err(Error::param("k_r", "must be at least 1"));
    }
    check_sigma(kernel.sigma)?;

    let new_coords: Vec<Point<T>> = source
        .coords()
        .iter()
        .enumerate()
        .map(|(i, p)| [p[0] + delta_p[(i, 0)], p[1] + delta_p[(i, 1)], p[2] + delta_p[(i, 2)]])
        .collect();
    let neighbor_sets = knn(&new_coords, source, k_r, Some(source.batch_ids()))?;

    let mut resampled = Mat::zeros(n, features.cols());
    let mut weights = Vec::with_capacity(n);
    for (i, nbrs) in neighbor_sets.iter().enumerate() {
        let d2: Vec<T> = nbrs.iter().map(|&j| dist2(&new_coords[i], &source.coords()[j])).collect();
        let w = normalized_weights(&d2, kernel.sigma, kernel.epsilon);
        let out = resampled.row_mut(i);
        for (&j, &wj) in nbrs.iter().zip(&w) {
            for (o, &f) in out.iter_mut().zip(features.row(j)) {
                *o += wj * f;
            }
        }
        weights.push(w);
    }
    Ok(ResampleResult {
        new_coords,
        resampled,
        neighbor_sets,
        weights,
    })
}

/// Row-stochastic soft assignment of tokens to sequence positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReorderWeights<T> {
    /// `matrix[(i, j)]`: weight of target position `j` for token `i`.
    pub matrix: Mat<T>,
    /// `s = I + Δt`.
    pub shifted_index: Vec<T>,
    /// `J = [0, 1, …, N-1]`.
    pub target_index: Vec<T>,
    pub sigma_t: T,
}

pub fn gdr_weights<T: Scalar>(base_index: &[usize], delta_t: &[T], sigma_t: T) -> Result<ReorderWeights<T>> {
    if base_index.len() != delta_t.len() {
        return Err(Error::shape("gdr_weights delta_t", base_index.len(), delta_t.len()));
    }
    let shifted = base_index
        .iter()
        .zip(delta_t)
        .map(|(&i, &dt)| T::count(i) + dt)
        .collect();
    gdr_weights_shifted(shifted, sigma_t)
}

/// Weights for an already shifted index vector `s`.
pub fn gdr_weights_shifted<T: Scalar>(shifted_index: Vec<T>, sigma_t: T) -> Result<ReorderWeights<T>> {
    check_sigma(sigma_t)?;
    let n = shifted_index.len();
    let target_index: Vec<T> = (0..n).map(T::count).collect();
    let mut matrix = Mat::zeros(n, n);
    for (i, &s) in shifted_index.iter().enumerate() {
        let d2: Vec<T> = target_index.iter().map(|&j| (s - j) * (s - j)).collect();
        let w = normalized_weights(&d2, sigma_t, DEFAULT_EPSILON);
        matrix.row_mut(i).copy_from_slice(&w);
    }
    Ok(ReorderWeights {
        matrix,
        shifted_index,
        target_index,
        sigma_t,
    })
}

impl<T: Scalar> ReorderWeights<T> {
    pub fn len(&self) -> usize {
        self.shifted_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifted_index.is_empty()
    }
}

/// `∂W_ij/∂s_i = W_ij / σ² · (J_j − Σ_l W_il J_l)`.
///
/// The bracket is summed as `Σ_l W_il (J_j − J_l)`, which is equal since
/// rows sum to one and avoids cancellation when a row is nearly one-hot.
pub fn gdr_weight_grad<T: Scalar>(weights: &ReorderWeights<T>) -> Mat<T> {
    let n = weights.len();
    let inv_var = (weights.sigma_t * weights.sigma_t).recip();
    let j = &weights.target_index;
    Mat::from_fn(n, n, |r, c| {
        let row = weights.matrix.row(r);
        let spread: T = row.iter().zip(j).map(|(&w, &jl)| w * (j[c] - jl)).sum();
        row[c] * inv_var * spread
    })
}

/// `W · F`: row `i` of the output mixes the features of the positions
/// that token `i`'s weight row points at.
pub fn gdr_apply<T: Scalar>(weights: &ReorderWeights<T>, features: &Mat<T>) -> Result<Mat<T>> {
    if features.rows() != weights.len() {
        return Err(Error::shape("gdr_apply features", weights.len(), features.rows()));
    }
    weights.matrix.matmul(features)
}

/// Nearest target position for each shifted index, clamped to `[0, n)`;
/// exact ties go to the lower position.
pub fn hard_assignment<T: Scalar>(shifted_index: &[T]) -> Vec<usize> {
    let n = shifted_index.len();
    shifted_index
        .iter()
        .map(|s| nearest_two(s.primal(), n).0 .0)
        .collect()
}

/// `((nearest, dist), (second, dist))` among targets `0..n`.
fn nearest_two(s: f64, n: usize) -> ((usize, f64), (usize, f64)) {
    let top = n.saturating_sub(1) as f64;
    let lo = s.floor().clamp(0.0, top) as usize;
    let mut cand: Vec<(usize, f64)> = [lo.saturating_sub(1), lo, lo + 1, lo + 2]
        .into_iter()
        .filter(|&j| j < n)
        .map(|j| (j, (s - j as f64).abs()))
        .collect();
    cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    cand.dedup_by_key(|c| c.0);
    let first = cand[0];
    let second = cand.get(1).copied().unwrap_or((first.0, f64::INFINITY));
    (first, second)
}

/// Rows whose shifted index is equidistant (within [`TIE_TOLERANCE`]) to
/// two target positions. Returns `(row, lower target, upper target)`.
pub fn equidistant_rows<T: Scalar>(shifted_index: &[T]) -> Vec<(usize, usize, usize)> {
    let n = shifted_index.len();
    shifted_index
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let (a, b) = nearest_two(s.primal(), n);
            ((a.1 - b.1).abs() <= TIE_TOLERANCE).then(|| (i, a.0.min(b.0), a.0.max(b.0)))
        })
        .collect()
}

/// Adds [`TIE_JITTER`] to the offsets of rows that sit exactly midway
/// between two target positions; all other offsets pass through.
pub fn break_exact_ties<T: Scalar>(base_index: &[usize], delta_t: &[T]) -> Vec<T> {
    let n = base_index.len();
    base_index
        .iter()
        .zip(delta_t)
        .map(|(&b, &dt)| {
            let s = b as f64 + dt.primal();
            let (a, c) = nearest_two(s, n);
            if a.1 == c.1 {
                dt + T::lit(TIE_JITTER)
            } else {
                dt
            }
        })
        .collect()
}

/// Entropy (nats) of one weight row.
pub fn row_entropy<T: Scalar>(row: &[T]) -> f64 {
    row.iter()
        .map(|w| w.primal())
        .filter(|&w| w > 0.0)
        .map(|w| -w * w.ln())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquidistantRow {
    pub row: usize,
    pub targets: [usize; 2],
    pub weights: [f64; 2],
    pub gradients: [f64; 2],
}

/// Limit-case diagnostics for one σ.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitRecord {
    pub sigma: f64,
    /// `max |W_ij − 1/N|`; tends to 0 as σ → ∞.
    pub uniform_deviation: f64,
    /// `max |W_ij − P_ij|` against the hard nearest-position assignment,
    /// over rows that are not equidistant; tends to 0 as σ → 0.
    pub permutation_deviation: f64,
    pub equidistant: Vec<EquidistantRow>,
    /// `max |∂W_ij/∂s_i|` over all rows.
    pub max_gradient: f64,
    /// `max |Σ_j W_ij − 1|`.
    pub row_sum_deviation: f64,
}

pub fn gdr_limit_report(base_index: &[usize], delta_t: &[f64], sigmas: &[f64]) -> Result<Vec<LimitRecord>> {
    if sigmas.is_empty() {
        return Err(Error::EmptyInput("gdr_limit_report: sigma list"));
    }
    let mut out = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let w = gdr_weights(base_index, delta_t, sigma)?;
        let grad = gdr_weight_grad(&w);
        let n = w.len();
        let hard = hard_assignment(&w.shifted_index);
        let ties = equidistant_rows(&w.shifted_index);
        let is_tie = |r: usize| ties.iter().any(|t| t.0 == r);

        let mut uniform_deviation = 0.0f64;
        let mut permutation_deviation = 0.0f64;
        let mut row_sum_deviation = 0.0f64;
        for r in 0..n {
            let row = w.matrix.row(r);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                sum += v;
                uniform_deviation = uniform_deviation.max((v - 1.0 / n as f64).abs());
                if !is_tie(r) {
                    let p = if hard[r] == c { 1.0 } else { 0.0 };
                    permutation_deviation = permutation_deviation.max((v - p).abs());
                }
            }
            row_sum_deviation = row_sum_deviation.max((sum - 1.0).abs());
        }
        let equidistant = ties
            .iter()
            .map(|&(r, a, b)| EquidistantRow {
                row: r,
                targets: [a, b],
                weights: [w.matrix[(r, a)], w.matrix[(r, b)]],
                gradients: [grad[(r, a)], grad[(r, b)]],
            })
            .collect();
        out.push(LimitRecord {
            sigma,
            uniform_deviation,
            permutation_deviation,
            equidistant,
            max_gradient: grad.max_abs(),
            row_sum_deviation,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_weight(0.0, 0.3).unwrap(), 1.0);
        assert!((gaussian_weight(0.7, 0.7).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_weight(2.0f64, 1.0).unwrap() - 0.1353352832366127).abs() < 1e-15);
        assert_eq!(gaussian_weight(-1.3, 0.4).unwrap(), gaussian_weight(1.3, 0.4).unwrap());
        assert!(gaussian_weight(1.0, 0.0).is_err());
        assert!(gaussian_weight(1.0, -1.0).is_err());
        assert!((gaussian_weight_grad(1.0, 1.0).unwrap() + (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_params_validate_epsilon() {
        assert!(GaussianKernelParams::new(1.0, 0.0).is_err());
        assert!(GaussianKernelParams::new(1.0, 1e-5).is_err());
        assert!(GaussianKernelParams::new(1.0, 1e-8).is_ok());
    }

    fn line_cloud(n: usize) -> PointCloud<f64> {
        PointCloud::new((0..n).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn gkr_identity_at_zero_offset() {
        let cloud = line_cloud(5);
        let f = Mat::from_fn(5, 3, |r, c| (r * 3 + c) as f64 - 4.0);
        let kernel = GaussianKernelParams::with_sigma(1.0).unwrap();
        let res = gkr(&cloud, &f, &Mat::zeros(5, 3), 1, &kernel).unwrap();
        assert_eq!(res.resampled, f);
        for (i, n) in res.neighbor_sets.iter().enumerate() {
            assert_eq!(n, &vec![i]);
        }
    }

    #[test]
    fn gkr_equidistant_pair_averages() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let f = Mat::<f64>::from_rows(&[vec![2.0, -1.0], vec![4.0, 3.0]]).unwrap();
        let dp = Mat::from_rows(&[vec![0.5, 0.0, 0.0], vec![-0.5, 0.0, 0.0]]).unwrap();
        let kernel = GaussianKernelParams::with_sigma(0.3).unwrap();
        let res = gkr(&cloud, &f, &dp, 2, &kernel).unwrap();
        for r in 0..2 {
            assert!((res.resampled[(r, 0)] - 3.0).abs() < 1e-12);
            assert!((res.resampled[(r, 1)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gkr_errors() {
        let cloud = line_cloud(3);
        let f = Mat::zeros(3, 2);
        let kernel = GaussianKernelParams::with_sigma(1.0).unwrap();
        assert!(matches!(gkr(&cloud, &f, &Mat::zeros(3, 3), 4, &kernel), Err(Error::Size { .. })));
        assert!(gkr(&cloud, &f, &Mat::zeros(2, 3), 1, &kernel).is_err());
        assert!(gkr(&cloud, &Mat::zeros(2, 2), &Mat::zeros(3, 3), 1, &kernel).is_err());
    }

    #[test]
    fn gdr_sharp_is_permutation() {
        let base = [2usize, 0, 3, 1];
        let w = gdr_weights(&base, &[0.0f64; 4], 0.05).unwrap();
        for (i, &b) in base.iter().enumerate() {
            for j in 0..4 {
                let want = if j == b { 1.0 } else { 0.0 };
                assert!((w.matrix[(i, j)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gdr_wide_is_uniform() {
        let w = gdr_weights(&[0, 1, 2, 3, 4], &[0.3f64, -0.2, 0.0, 0.1, 0.4], 1e6).unwrap();
        for v in w.matrix.as_slice() {
            assert!((v - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn gdr_midpoint_splits_evenly() {
        let w = gdr_weights(&[0, 1, 2, 3], &[0.0f64, 0.5, 0.0, 0.0], 0.01).unwrap();
        assert!((w.matrix[(1, 1)] - 0.5).abs() < 1e-12);
        assert!((w.matrix[(1, 2)] - 0.5).abs() < 1e-12);
        assert_eq!(equidistant_rows(&w.shifted_index), vec![(1, 1, 2)]);
    }

    #[test]
    fn gdr_apply_extremes() {
        let f = Mat::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let wide = gdr_weights(&[0, 1, 2, 3], &[0.0; 4], 1e7).unwrap();
        let pooled = gdr_apply(&wide, &f).unwrap();
        for r in 0..4 {
            assert!((pooled[(r, 0)] - 3.0).abs() < 1e-9);
            assert!((pooled[(r, 1)] - 4.0).abs() < 1e-9);
        }
        assert!(gdr_apply(&wide, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn singleton_weights() {
        let w = gdr_weights(&[0], &[0.37], 0.2).unwrap();
        assert_eq!(w.matrix.as_slice(), &[1.0]);
    }

    #[test]
    fn hard_assignment_clamps_and_ties_low() {
        assert_eq!(hard_assignment(&[-0.7, 0.5, 2.2, 9.0]), vec![0, 0, 2, 3]);
    }

    #[test]
    fn tie_breaking_only_touches_exact_midpoints() {
        let dt = break_exact_ties(&[0, 1, 2], &[0.5, 0.4999, -0.5]);
        assert_eq!(dt, vec![0.5 + TIE_JITTER, 0.4999, -0.5 + TIE_JITTER]);
        // -0.5 from position 0 has a single nearest target in range
        assert_eq!(break_exact_ties(&[0, 1], &[-0.5, 0.0]), vec![-0.5, 0.0]);
    }

    #[test]
    fn limit_report_flags_constructed_tie() {
        let report = gdr_limit_report(&[0, 1, 2, 3], &[0.0, 0.5, 0.1, -0.2], &[1e-3]).unwrap();
        let rec = &report[0];
        assert_eq!(rec.equidistant.len(), 1);
        let e = &rec.equidistant[0];
        assert_eq!(e.targets, [1, 2]);
        assert!((e.weights[0] - 0.5).abs() < 1e-12);
        assert!(e.gradients[0] < -1e3 && e.gradients[1] > 1e3);
        assert!(rec.permutation_deviation < 1e-12);
        assert!(gdr_limit_report(&[0], &[0.0], &[]).is_err());
    }
}
