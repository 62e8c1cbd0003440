//! Scalar certificates of token consensus.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::manifold::TokenConfiguration;

/// Tolerance for ties in the argmax set of [`hemisphere_lyapunov`].
pub const ARGMAX_TIE_TOL: f64 = 1e-12;

/// `E = 1 − (1/ℓ) Σ_{i=1..ℓ} |cos(y_1, y_i)|` with Euclidean cosines.
/// Sign-insensitive: antipodal tokens count as aligned.
pub fn consensus_e(y: &TokenConfiguration) -> f64 {
    let pts = y.points();
    let first = pts.column(0);
    let n0 = first.norm();
    let sum: f64 = pts
        .column_iter()
        .map(|c| (first.dot(&c) / (n0 * c.norm())).abs().min(1.0))
        .sum();
    (1.0 - sum / y.ell() as f64).max(0.0)
}

/// Largest Euclidean distance between two tokens.
pub fn pairwise_spread(y: &TokenConfiguration) -> f64 {
    let pts = y.points();
    let mut best = 0.0f64;
    for i in 0..pts.ncols() {
        for j in i + 1..pts.ncols() {
            best = best.max((pts.column(i) - pts.column(j)).norm());
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct HemisphereLyapunov {
    /// `max_i (1 − vᵀ y_i)`.
    pub value: f64,
    /// Tokens attaining the maximum within [`ARGMAX_TIE_TOL`].
    pub argmax: Vec<usize>,
}

pub fn hemisphere_lyapunov(y: &TokenConfiguration, v: &DVector<f64>) -> HemisphereLyapunov {
    let vals: Vec<f64> = y.points().column_iter().map(|c| 1.0 - v.dot(&c)).collect();
    let value = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax = vals
        .iter()
        .enumerate()
        .filter(|(_, &x)| value - x <= ARGMAX_TIE_TOL)
        .map(|(i, _)| i)
        .collect();
    HemisphereLyapunov { value, argmax }
}

/// Forward-difference quotients `(f_{k+1} − f_k)/Δ` of a series sampled on a
/// uniform grid; one fewer entry than the series.
pub fn dini_upper_estimate(series: &[f64], dt: f64) -> Vec<f64> {
    series.windows(2).map(|w| (w[1] - w[0]) / dt).collect()
}

/// `referenceᵀ y_i(t)` over the stored states; outer index is the token.
pub fn alignment_series(trajectory: &Trajectory, reference: &DVector<f64>) -> Vec<Vec<f64>> {
    let ell = trajectory.initial_state().ell();
    (0..ell)
        .map(|i| {
            trajectory
                .states
                .iter()
                .map(|s| reference.dot(&s.points().column(i)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopEigenpair {
    pub lambda: f64,
    /// Unit vector, first nonzero component positive.
    pub vector: DVector<f64>,
    /// The top eigenvalue is separated from the next by more than the gap tolerance.
    pub multiplicity_ok: bool,
}

/// Largest eigenpair of a symmetric matrix. `gap_tol` defaults to `1e-8·‖U‖₂`.
pub fn top_eigenpair(u: &DMatrix<f64>, gap_tol: Option<f64>) -> Result<TopEigenpair> {
    if !u.is_square() || u.nrows() == 0 {
        return Err(Error::Contract("top_eigenpair needs a nonempty square matrix".into()));
    }
    if (u - u.transpose()).amax() > 1e-12 * u.amax().max(1.0) {
        return Err(Error::Contract("top_eigenpair needs a symmetric matrix".into()));
    }
    let eig = SymmetricEigen::new(u.clone());
    let mut order: Vec<usize> = (0..u.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda = eig.eigenvalues[order[0]];
    let mut vector: DVector<f64> = eig.eigenvectors.column(order[0]).into_owned();
    vector /= vector.norm();
    if let Some(first) = vector.iter().copied().find(|x| x.abs() > 1e-14) {
        if first < 0.0 {
            vector = -vector;
        }
    }
    let norm = eig.eigenvalues.amax();
    let tol = gap_tol.unwrap_or(1e-8 * norm);
    let multiplicity_ok = match order.get(1) {
        Some(&k) => lambda - eig.eigenvalues[k] > tol,
        None => true,
    };
    Ok(TopEigenpair {
        lambda,
        vector,
        multiplicity_ok,
    })
}

/// `2^{−(ℓ−1)} Σ_{μ=0}^{n−1} C(ℓ−1, μ)`: the probability that `ℓ` independent
/// uniform points on the unit sphere of `ℝⁿ` lie in a common open hemisphere.
pub fn wendel_probability(ell: usize, n: usize) -> Result<f64> {
    if ell == 0 || n == 0 {
        return Err(Error::Contract(format!(
            "wendel_probability needs ell >= 1 and n >= 1 (got {ell}, {n})"
        )));
    }
    if n >= ell {
        return Ok(1.0);
    }
    let m = ell - 1;
    if m <= 100 {
        let mut sum: u128 = 0;
        let mut binom: u128 = 1;
        for mu in 0..n {
            sum += binom;
            binom = binom * (m - mu) as u128 / (mu + 1) as u128;
        }
        // Exact integer sum, rounded once.
        let scale = 2f64.powi(m as i32);
        return Ok((sum as f64) / scale);
    }
    // Log-space sum for very large ℓ.
    let ln_choose = |k: usize| -> f64 {
        (0..k).map(|i| ((m - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
    };
    let terms: Vec<f64> = (0..n).map(ln_choose).collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ln_sum = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
    Ok((ln_sum - m as f64 * std::f64::consts::LN_2).exp().min(1.0))
}

/// Whether the columns of `pts` (points of `ℝ^d`, in general position) lie in a
/// common open hemisphere. If they do, some closed hemisphere containing them
/// has `d − 1` of them on its boundary, so enumerating those normals suffices.
pub fn common_hemisphere(pts: &DMatrix<f64>) -> bool {
    let d = pts.nrows();
    let ell = pts.ncols();
    if ell <= d {
        return true;
    }
    let check = |normal: &DVector<f64>| {
        [1.0, -1.0].iter().any(|s| {
            pts.column_iter()
                .all(|c| s * normal.dot(&c) >= -1e-12)
        })
    };
    if d == 1 {
        return check(&DVector::from_element(1, 1.0));
    }
    let mut subset: Vec<usize> = (0..d - 1).collect();
    loop {
        let rows = DMatrix::from_fn(d - 1, d, |r, c| pts[(c, subset[r])]);
        let normal = DVector::from_fn(d, |k, _| {
            let minor = rows.clone().remove_column(k);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor.determinant()
        });
        if normal.norm() > 1e-12 && check(&normal) {
            return true;
        }
        // Next (d−1)-subset of 0..ell in lexicographic order.
        let k = d - 1;
        let mut i = k;
        while i > 0 && subset[i - 1] == ell - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        subset[i - 1] += 1;
        for j in i..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

/// Fraction of `samples` draws of `ℓ` uniform points on the unit sphere of `ℝⁿ`
/// that lie in a common hemisphere.
pub fn wendel_monte_carlo(rng: &mut impl Rng, ell: usize, n: usize, samples: usize) -> Result<f64> {
    if ell == 0 || n == 0 || samples == 0 {
        return Err(Error::Contract(
            "wendel_monte_carlo needs ell, n and samples >= 1".into(),
        ));
    }
    let mut hits = 0usize;
    for _ in 0..samples {
        let mut pts = DMatrix::from_fn(n, ell, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut c in pts.column_iter_mut() {
            let norm = c.norm();
            c /= norm;
        }
        if common_hemisphere(&pts) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::MetricMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(cols: &[[f64; 3]]) -> TokenConfiguration {
        let pts = DMatrix::from_fn(3, cols.len(), |i, j| cols[j][i]);
        TokenConfiguration::new(pts, &MetricMatrix::identity(3)).unwrap()
    }

    #[test]
    fn consensus_metric_examples() {
        let a = [0.0, 0.6, 0.8];
        assert_eq!(consensus_e(&sphere(&[a, a, a])), 0.0);
        let e = consensus_e(&sphere(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        assert!((e - 2.0 / 3.0).abs() < 1e-15);
        let e = consensus_e(&sphere(&[a, [0.0, -0.6, -0.8], [0.0, -0.6, -0.8]]));
        assert!(e.abs() < 1e-15);
    }

    #[test]
    fn spread_examples() {
        let a = [0.0, 0.6, 0.8];
        assert_eq!(pairwise_spread(&sphere(&[a, a])), 0.0);
        assert_eq!(pairwise_spread(&sphere(&[a, [0.0, -0.6, -0.8]])), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = crate::manifold::sample_box_projected(&mut rng, 7, &MetricMatrix::identity(3), 0.5).unwrap();
        let mut brute = 0.0f64;
        for i in 0..7 {
            for j in 0..7 {
                let d: f64 = (0..3).map(|k| (y.points()[(k, i)] - y.points()[(k, j)]).powi(2)).sum();
                brute = brute.max(d.sqrt());
            }
        }
        assert!((pairwise_spread(&y) - brute).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_examples() {
        let v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let l = hemisphere_lyapunov(&sphere(&[[1.0, 0.0, 0.0]; 3]), &v);
        assert_eq!((l.value, l.argmax), (0.0, vec![0, 1, 2]));
        let l = hemisphere_lyapunov(&sphere(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]), &v);
        assert_eq!(l.value, 2.0);
        let s = 0.75f64.sqrt();
        let l = hemisphere_lyapunov(&sphere(&[[1.0, 0.0, 0.0], [0.5, s, 0.0]]), &v);
        assert!((l.value - 0.5).abs() < 1e-15);
        assert_eq!(l.argmax, vec![1]);
    }

    #[test]
    fn dini_examples() {
        assert!(dini_upper_estimate(&[3.0; 5], 0.1).iter().all(|&q| q == 0.0));
        let grid: Vec<f64> = (0..10).map(|k| k as f64 * 0.25).collect();
        assert!(dini_upper_estimate(&grid, 0.25).iter().all(|&q| q == 1.0));
        assert!(dini_upper_estimate(&[1.0], 0.1).is_empty());
    }

    #[test]
    fn eigenpair_examples() {
        let id = top_eigenpair(&DMatrix::identity(3, 3), None).unwrap();
        assert!(!id.multiplicity_ok);
        let d = top_eigenpair(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.0])), None).unwrap();
        assert_eq!(d.lambda, 2.0);
        assert!((d.vector - DVector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-15);
        assert!(d.multiplicity_ok);
        let ns = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(top_eigenpair(&ns, None), Err(Error::Contract(_))));
    }

    fn power_iteration(u: &DMatrix<f64>) -> (f64, DVector<f64>) {
        // Shift so the largest algebraic eigenvalue dominates in magnitude.
        let shift = u.iter().map(|x| x.abs()).sum::<f64>();
        let a = u + DMatrix::identity(u.nrows(), u.ncols()) * shift;
        let mut x = DVector::from_element(u.nrows(), 1.0);
        for _ in 0..20_000 {
            x = &a * &x;
            x /= x.norm();
        }
        if x[0] < 0.0 {
            x = -x;
        }
        ((x.transpose() * u * &x)[0], x)
    }

    #[test]
    fn eigenpair_matches_power_iteration() {
        let u = DMatrix::from_row_slice(
            3,
            3,
            &[-0.2590, 0.4965, 0.5609, 0.4965, -0.7174, -0.5003, 0.5609, -0.5003, -0.0247],
        );
        let top = top_eigenpair(&u, None).unwrap();
        let (lambda, v) = power_iteration(&u);
        assert!((top.lambda - lambda).abs() < 1e-8);
        assert!((&top.vector - v).amax() < 1e-8);
        assert!(top.multiplicity_ok);
        assert!((&u * &top.vector - &top.vector * top.lambda).norm() <= 1e-10 * u.norm());
    }

    #[test]
    fn wendel_examples() {
        assert_eq!(wendel_probability(4, 2).unwrap(), 0.5);
        assert_eq!(wendel_probability(3, 5).unwrap(), 1.0);
        assert_eq!(wendel_probability(2, 1).unwrap(), 0.5);
        assert_eq!(wendel_probability(1, 1).unwrap(), 1.0);
        assert!(wendel_probability(0, 1).is_err());
        // Exact and log-space paths agree near the switch.
        let exact = wendel_probability(101, 60).unwrap();
        assert!((0.0..1.0).contains(&exact));
        let big = wendel_probability(400, 200).unwrap();
        assert!((big - 0.5).abs() < 0.05);
    }

    #[test]
    fn hemisphere_enumeration_on_the_circle() {
        let pts = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, 0.1]);
        assert!(common_hemisphere(&pts));
        let c = |a: f64| [a.cos(), a.sin()];
        let tri = [c(0.0), c(2.1), c(4.2)];
        let pts = DMatrix::from_fn(2, 3, |i, j| tri[j][i]);
        assert!(!common_hemisphere(&pts));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mc = wendel_monte_carlo(&mut rng, 2, 1, 20_000).unwrap();
        assert!((mc - 0.5).abs() < 3.0 * (0.25f64 / 20_000.0).sqrt());
    }

    proptest! {
        #[test]
        fn wendel_monotone(ell in 1usize..60, n in 1usize..60) {
            let p = wendel_probability(ell, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(wendel_probability(ell, n + 1).unwrap() >= p);
            prop_assert!(wendel_probability(ell + 1, n).unwrap() <= p);
        }

        #[test]
        fn consensus_e_zero_iff_collinear(seed in any::<u64>(), ell in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = crate::manifold::sample_box_projected(&mut rng, ell, &MetricMatrix::identity(3), 0.5).unwrap();
            let e = consensus_e(&y);
            prop_assert!((0.0..=1.0).contains(&e));
            let first = y.points().column(0).into_owned();
            let signs: Vec<f64> = (0..ell).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let aligned = DMatrix::from_fn(3, ell, |i, j| signs[j] * first[i]);
            let aligned = TokenConfiguration::new(aligned, &MetricMatrix::identity(3)).unwrap();
            prop_assert!(consensus_e(&aligned) < 1e-12);
        }
    }
}
