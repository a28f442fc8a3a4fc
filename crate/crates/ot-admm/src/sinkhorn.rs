//! Sinkhorn scaling for entropically regularized optimal transport on
//! bipartite cost matrices.
//!
//! Alternates the marginal scalings `u ← a ⊘ (K v)`, `v ← b ⊘ (Kᵀ u)` on the
//! Gibbs kernel `K = exp(−C/γ)` and returns `diag(u) K diag(v)`. Below a
//! kernel-underflow threshold the same fixed point is computed in the log
//! domain with log-sum-exp reductions, which stays stable for small γ where
//! the plain kernel underflows.

use nalgebra::DMatrix;

use crate::error::BaselineError;

/// Parameters of a Sinkhorn solve.
#[derive(Debug, Clone, Copy)]
pub struct SinkhornParams {
    /// Entropic regularization weight; must be positive.
    pub gamma: f64,
    /// Termination threshold on the L1 marginal error.
    pub tol: f64,
    pub max_iters: usize,
    /// Switch to log-domain iterations when `gamma < threshold · max|C|`.
    pub log_domain_threshold: f64,
}

impl SinkhornParams {
    pub fn new(gamma: f64) -> Self {
        SinkhornParams {
            gamma,
            tol: 1e-9,
            max_iters: 100_000,
            log_domain_threshold: 0.05,
        }
    }
}

/// A bipartite transport plan with its realized marginals.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub matrix: DMatrix<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// `‖row sums − a‖₁ + ‖col sums − b‖₁` at termination.
    pub marginal_error: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Whether the run used log-domain updates.
    pub log_domain: bool,
}

/// Solve the entropic OT problem between `a` and `b` under `cost`.
///
/// Marginals must be strictly positive with equal sums. Hitting the
/// iteration budget reports `converged = false` on the result rather than
/// failing.
pub fn sinkhorn(
    cost: &DMatrix<f64>,
    a: &[f64],
    b: &[f64],
    params: &SinkhornParams,
) -> Result<Coupling, BaselineError> {
    let (n, mcols) = cost.shape();
    if a.len() != n || b.len() != mcols {
        return Err(BaselineError::Dimension(format!(
            "cost is {n}x{mcols} but marginals have {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    if !(params.gamma > 0.0) {
        return Err(BaselineError::BadGamma(params.gamma));
    }
    if a.iter().any(|&x| !(x > 0.0)) || b.iter().any(|&x| !(x > 0.0)) {
        return Err(BaselineError::BadMarginals(
            "entries must be strictly positive".to_string(),
        ));
    }
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    if (sum_a - sum_b).abs() > 1e-9 * (1.0 + sum_a.abs()) {
        return Err(BaselineError::BadMarginals(format!(
            "sums differ: {sum_a} vs {sum_b}"
        )));
    }

    let max_cost = cost.iter().fold(0.0f64, |acc, &c| acc.max(c.abs()));
    let log_domain = params.gamma < params.log_domain_threshold * max_cost;
    let (matrix, converged, iterations) = if log_domain {
        log_domain_iterations(cost, a, b, params)
    } else {
        scaling_iterations(cost, a, b, params)
    };

    let row_marginal: Vec<f64> = (0..n).map(|i| matrix.row(i).sum()).collect();
    let col_marginal: Vec<f64> = (0..mcols).map(|j| matrix.column(j).sum()).collect();
    let marginal_error = l1_error(&row_marginal, a) + l1_error(&col_marginal, b);
    Ok(Coupling {
        matrix,
        row_marginal,
        col_marginal,
        marginal_error,
        converged,
        iterations,
        log_domain,
    })
}

fn l1_error(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).sum()
}

fn marginal_error_of(p: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows: Vec<f64> = (0..p.nrows()).map(|i| p.row(i).sum()).collect();
    let cols: Vec<f64> = (0..p.ncols()).map(|j| p.column(j).sum()).collect();
    l1_error(&rows, a) + l1_error(&cols, b)
}

fn scaling_iterations(
    cost: &DMatrix<f64>,
    a: &[f64],
    b: &[f64],
    params: &SinkhornParams,
) -> (DMatrix<f64>, bool, usize) {
    let (n, m) = cost.shape();
    let kernel = cost.map(|c| (-c / params.gamma).exp());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| kernel[(i, j)] * v[j]).sum();
            u[i] = a[i] / kv;
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| kernel[(i, j)] * u[i]).sum();
            v[j] = b[j] / ku;
        }
        iterations += 1;
        let p = DMatrix::from_fn(n, m, |i, j| u[i] * kernel[(i, j)] * v[j]);
        if marginal_error_of(&p, a, b) < params.tol {
            converged = true;
            return (p, converged, iterations);
        }
    }
    let p = DMatrix::from_fn(n, m, |i, j| u[i] * kernel[(i, j)] * v[j]);
    (p, converged, iterations)
}

fn log_domain_iterations(
    cost: &DMatrix<f64>,
    a: &[f64],
    b: &[f64],
    params: &SinkhornParams,
) -> (DMatrix<f64>, bool, usize) {
    let (n, m) = cost.shape();
    let gamma = params.gamma;
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;
    let plan = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / gamma).exp())
    };
    while iterations < params.max_iters {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[(i, j)]) / gamma));
            f[i] = gamma * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / gamma));
            g[j] = gamma * (log_b[j] - lse);
        }
        iterations += 1;
        let p = plan(&f, &g);
        if marginal_error_of(&p, a, b) < params.tol {
            converged = true;
            return (p, converged, iterations);
        }
    }
    (plan(&f, &g), converged, iterations)
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_cost_gives_product_coupling() {
        let cost = DMatrix::from_element(3, 3, 2.0);
        let a = [0.2, 0.3, 0.5];
        let b = [0.4, 0.4, 0.2];
        let c = sinkhorn(&cost, &a, &b, &SinkhornParams::new(1.0)).unwrap();
        assert!(c.converged);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(c.matrix[(i, j)], a[i] * b[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn one_by_one_problem() {
        let cost = DMatrix::from_element(1, 1, 3.0);
        let c = sinkhorn(&cost, &[1.0], &[1.0], &SinkhornParams::new(0.5)).unwrap();
        assert_abs_diff_eq!(c.matrix[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_by_two_matches_closed_form() {
        // For cost [[0,1],[1,0]] and uniform marginals the scalings are
        // symmetric, giving diagonal 0.5/(1+k) and off-diagonal 0.5k/(1+k)
        // with k = exp(−1/γ); this is the unique fixed point.
        let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mut params = SinkhornParams::new(1.0);
        params.tol = 1e-12;
        let c = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], &params).unwrap();
        let k = (-1.0f64).exp();
        let diag = 0.5 / (1.0 + k);
        let off = 0.5 * k / (1.0 + k);
        assert_abs_diff_eq!(c.matrix[(0, 0)], diag, epsilon = 1e-9);
        assert_abs_diff_eq!(c.matrix[(1, 1)], diag, epsilon = 1e-9);
        assert_abs_diff_eq!(c.matrix[(0, 1)], off, epsilon = 1e-9);
        assert_abs_diff_eq!(c.matrix[(1, 0)], off, epsilon = 1e-9);
        assert!(c.matrix[(0, 0)] > c.matrix[(0, 1)]);
        assert!(c.marginal_error <= 1e-6);
    }

    #[test]
    fn cost_shift_leaves_coupling_unchanged() {
        let cost = DMatrix::from_row_slice(2, 3, &[0.3, 1.0, 0.2, 0.8, 0.1, 0.6]);
        let shifted = cost.map(|c| c + 7.5);
        let a = [0.6, 0.4];
        let b = [0.3, 0.3, 0.4];
        let params = SinkhornParams::new(0.7);
        let c1 = sinkhorn(&cost, &a, &b, &params).unwrap();
        let c2 = sinkhorn(&shifted, &a, &b, &params).unwrap();
        for (x, y) in c1.matrix.iter().zip(c2.matrix.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
    }

    #[test]
    fn log_domain_engages_for_small_gamma_and_matches_marginals() {
        let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let params = SinkhornParams::new(0.01);
        let c = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], &params).unwrap();
        assert!(c.log_domain);
        assert!(c.converged);
        assert!(c.marginal_error <= 1e-8);
        for i in 0..2 {
            assert_abs_diff_eq!(c.row_marginal[i], 0.5, epsilon = 1e-8);
            assert_abs_diff_eq!(c.col_marginal[i], 0.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn both_domains_agree_at_the_threshold() {
        let cost = DMatrix::from_row_slice(2, 2, &[0.2, 0.9, 0.7, 0.1]);
        let a = [0.45, 0.55];
        let b = [0.5, 0.5];
        let mut lo = SinkhornParams::new(0.2);
        lo.log_domain_threshold = 10.0; // force log domain
        let mut hi = SinkhornParams::new(0.2);
        hi.log_domain_threshold = 0.0; // force scaling domain
        let c_log = sinkhorn(&cost, &a, &b, &lo).unwrap();
        let c_std = sinkhorn(&cost, &a, &b, &hi).unwrap();
        assert!(c_log.log_domain && !c_std.log_domain);
        for (x, y) in c_log.matrix.iter().zip(c_std.matrix.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-7);
        }
    }

    #[test]
    fn rejections_and_non_convergence_flag() {
        let cost = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            sinkhorn(&cost, &[0.5, 0.0], &[0.25, 0.25], &SinkhornParams::new(1.0)),
            Err(BaselineError::BadMarginals(_))
        ));
        assert!(matches!(
            sinkhorn(&cost, &[0.5, 0.5], &[0.2, 0.2], &SinkhornParams::new(1.0)),
            Err(BaselineError::BadMarginals(_))
        ));
        assert!(matches!(
            sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], &SinkhornParams::new(0.0)),
            Err(BaselineError::BadGamma(_))
        ));

        let hard = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0]);
        let mut params = SinkhornParams::new(1.0);
        params.max_iters = 1;
        params.tol = 1e-15;
        let c = sinkhorn(&hard, &[0.9, 0.1], &[0.1, 0.9], &params).unwrap();
        assert!(!c.converged);
        assert_eq!(c.iterations, 1);
    }

    #[test]
    fn entropic_coupling_is_strictly_positive() {
        let cost = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]);
        let c = sinkhorn(&cost, &[0.7, 0.3], &[0.2, 0.8], &SinkhornParams::new(1.0)).unwrap();
        assert_eq!(sparsity_count(&c.matrix), 4);
    }

    fn sparsity_count(m: &DMatrix<f64>) -> usize {
        m.iter().filter(|v| v.abs() > 1e-6).count()
    }
}
