//! Controllability of the pair `(M, N)`.
//!
//! Two complementary tests are provided.
//!
//! **Generalized rank condition.** From the matrix polynomials
//!
//! ```text
//! P₀(t) = N(t),        P_k(t) = −M(t) P_{k−1}(t) + P'_{k−1}(t),
//! ```
//!
//! form the blocks `r_k = P_k(T)` for `k = 0, …, β` with `β = ⌊d/n⌋` and
//! stack them into `𝓡 = [r₀ … r_β] ∈ ℝ^{d×(β+1)n}`. Full row rank of `𝓡`
//! is *sufficient* for controllability; for constant pairs it reduces to the
//! classical Kalman test `rank [N, MN, …, M^β N] = d` because
//! `P_k = (−1)^k M^k N`.
//!
//! **Controllability Gramian.** The matrix
//!
//! ```text
//! G = ∫₀ᵀ Φ(s,T) N(s) N(s)ᵀ Φ(s,T)ᵀ ds
//! ```
//!
//! is positive definite *iff* the system is controllable, so its smallest
//! eigenvalue is a definitive certificate (up to quadrature accuracy).
//!
//! For drifts that commute across times, `M(t₁)M(t₂) = M(t₂)M(t₁)`, the
//! blocks simplify to combinations of complete Bell polynomials in the
//! derivatives of `−M` at the terminal time; [`bell_rank_blocks`] evaluates
//! that form and must agree with the recursion.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linsys::{
    check_same_horizon, spectral_norm, steering_samples, symmetric_min_eig, FlowMap, MatrixCurve,
};
use crate::quad::simpson_weights;

/// Default relative threshold on singular values for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Largest commutator residual tolerated by [`bell_rank_blocks`].
pub const COMMUTATION_TOL: f64 = 1e-10;

/// Which certificate(s) a [`ControllabilityReport`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllabilityMethod {
    Rank,
    Gramian,
    Both,
}

/// Outcome of the controllability tests.
///
/// The Gramian fields are `None` when `method` is [`ControllabilityMethod::Rank`].
/// Each test is a sufficient certificate on its own, so with `method = Both`
/// the verdict is positive when either certificate holds (the Gramian test is
/// also necessary; the rank test is not).
#[derive(Debug, Clone)]
pub struct ControllabilityReport {
    /// `β = ⌊d/n⌋`.
    pub beta: usize,
    /// Blocks `r_0, …, r_β`, each `d×n`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Horizontal concatenation `𝓡 = [r_0 … r_β]`.
    pub rank_matrix: DMatrix<f64>,
    /// Singular values of `𝓡` in descending order.
    pub singular_values: Vec<f64>,
    /// Count of singular values above `rank_tol · σ_max`.
    pub numerical_rank: usize,
    /// Threshold used for the numerical rank.
    pub rank_tol: f64,
    /// Controllability Gramian, symmetrized.
    pub gramian: Option<DMatrix<f64>>,
    /// Smallest eigenvalue of the Gramian.
    pub gramian_min_eig: Option<f64>,
    /// Scale-invariant positivity floor `1e−12 · trace(G)/d` used for the verdict.
    pub gramian_tol: Option<f64>,
    pub controllable: bool,
    pub method: ControllabilityMethod,
}

/// Binomial coefficient as a float (arguments stay tiny here).
fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn check_pair(m: &MatrixCurve, n: &MatrixCurve) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if n.rows() != m.rows() {
        return Err(Error::Shape(format!(
            "drift is {}x{} but input matrix has {} rows",
            m.rows(),
            m.cols(),
            n.rows()
        )));
    }
    let (tm, tn) = (m.horizon(), n.horizon());
    if (tm - tn).abs() > 1e-9 * (1.0 + tm.abs()) {
        return Err(Error::GridMismatch(format!(
            "drift horizon {tm} differs from input-matrix horizon {tn}"
        )));
    }
    Ok(())
}

/// The matrix polynomials `P_0(t), …, P_kmax(t)`.
///
/// Computed by expanding the recursion `P_k = −M P_{k−1} + P'_{k−1}` into a
/// table of derivative evaluations (Leibniz product rule), so every entry is
/// exact whenever the curve forms certify exact derivatives. Sampled curves
/// support `k_max ≤ 1`; higher orders surface a capability error.
pub fn matrix_polynomials(
    m: &MatrixCurve,
    n: &MatrixCurve,
    t: f64,
    k_max: usize,
) -> Result<Vec<DMatrix<f64>>> {
    check_pair(m, n)?;
    // table[k][j] = j-th derivative of P_k at t, kept for j ≤ k_max − k.
    let mut table: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(k_max + 1);
    let base: Result<Vec<_>> = (0..=k_max).map(|j| n.eval(t, j)).collect();
    table.push(base?);
    for k in 1..=k_max {
        let prev = &table[k - 1];
        let mut row = Vec::with_capacity(k_max - k + 1);
        for j in 0..=(k_max - k) {
            // D^j P_k = D^{j+1} P_{k−1} − Σ_i C(j,i) M^{(i)} D^{j−i} P_{k−1}
            let mut acc = prev[j + 1].clone();
            for i in 0..=j {
                acc -= binom(j, i) * m.eval(t, i)? * &prev[j - i];
            }
            row.push(acc);
        }
        table.push(row);
    }
    Ok(table.into_iter().map(|row| row.into_iter().next().expect("j = 0 entry")).collect())
}

/// Numerical rank: singular values above `rank_tol · σ_max`.
fn numerical_rank(singular_values: &[f64], rank_tol: f64) -> usize {
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    if sigma_max <= 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > rank_tol * sigma_max).count()
}

/// Generalized rank condition: assemble `r_k = P_k(T)`, stack `𝓡`, and take
/// its numerical rank by singular value decomposition.
pub fn rank_condition(
    m: &MatrixCurve,
    n: &MatrixCurve,
    rank_tol: f64,
) -> Result<ControllabilityReport> {
    check_pair(m, n)?;
    let d = m.rows();
    let n_inputs = n.cols();
    let beta = d / n_inputs;
    let horizon = m.horizon();
    let blocks = matrix_polynomials(m, n, horizon, beta)?;

    let mut rank_matrix = DMatrix::zeros(d, (beta + 1) * n_inputs);
    for (k, block) in blocks.iter().enumerate() {
        rank_matrix.view_mut((0, k * n_inputs), (d, n_inputs)).copy_from(block);
    }
    let mut singular_values: Vec<f64> = rank_matrix.singular_values().iter().copied().collect();
    singular_values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    let rank = numerical_rank(&singular_values, rank_tol);

    Ok(ControllabilityReport {
        beta,
        blocks,
        rank_matrix,
        singular_values,
        numerical_rank: rank,
        rank_tol,
        gramian: None,
        gramian_min_eig: None,
        gramian_tol: None,
        controllable: rank == d,
        method: ControllabilityMethod::Rank,
    })
}

/// Classical Kalman test for a constant pair: rank of `[N, MN, …, M^β N]`.
///
/// Kept as an independent reference implementation for cross-checking the
/// generalized condition on constant systems.
pub fn classical_kalman_rank(m: &DMatrix<f64>, n: &DMatrix<f64>, rank_tol: f64) -> usize {
    let d = m.nrows();
    let beta = d / n.ncols();
    let mut stacked = DMatrix::zeros(d, (beta + 1) * n.ncols());
    let mut power = n.clone();
    for k in 0..=beta {
        stacked.view_mut((0, k * n.ncols()), (d, n.ncols())).copy_from(&power);
        if k < beta {
            power = m * &power;
        }
    }
    let mut sv: Vec<f64> = stacked.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    numerical_rank(&sv, rank_tol)
}

/// Terminal blocks `r_k` via complete Bell polynomials, valid for drifts that
/// commute across times.
///
/// With `x_j = −M^{(j−1)}(T)` and the recurrence
/// `B_{k+1} = Σ_i C(k,i) B_{k−i} x_{i+1}`, the blocks are
/// `r_k = Σ_m C(k,m) B_m N^{(k−m)}(T)`. The commutation hypothesis is checked
/// numerically on a deterministic sample of time pairs before anything is
/// evaluated.
pub fn bell_rank_blocks(m: &MatrixCurve, n: &MatrixCurve) -> Result<Vec<DMatrix<f64>>> {
    check_pair(m, n)?;
    let d = m.rows();
    let beta = d / n.cols();
    let horizon = m.horizon();

    // Commutation precondition on an 8-point deterministic sample.
    let sample: Vec<f64> = (0..8).map(|i| horizon * i as f64 / 7.0).collect();
    let values: Result<Vec<_>> = sample.iter().map(|&t| m.eval(t, 0)).collect();
    let values = values?;
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            let commutator = &values[i] * &values[j] - &values[j] * &values[i];
            worst = worst.max(commutator.norm());
        }
    }
    if worst > COMMUTATION_TOL {
        return Err(Error::NonCommuting(worst));
    }

    // Bell recurrence with matrix arguments x_j = −M^{(j−1)}(T).
    let x: Result<Vec<_>> = (0..beta.max(1)).map(|j| Ok(-m.eval(horizon, j)?)).collect();
    let x = x?;
    let mut bell = vec![DMatrix::<f64>::identity(d, d)];
    for k in 0..beta {
        let mut next = DMatrix::zeros(d, d);
        for i in 0..=k {
            next += binom(k, i) * &bell[k - i] * &x[i];
        }
        bell.push(next);
    }

    let mut blocks = Vec::with_capacity(beta + 1);
    for k in 0..=beta {
        let mut r_k = DMatrix::zeros(d, n.cols());
        for m_idx in 0..=k {
            r_k += binom(k, m_idx) * &bell[m_idx] * n.eval(horizon, k - m_idx)?;
        }
        blocks.push(r_k);
    }
    Ok(blocks)
}

/// Controllability Gramian `G = ∫₀ᵀ Φ(s,T) N(s) N(s)ᵀ Φ(s,T)ᵀ ds` by
/// composite Simpson quadrature on the flow grid, symmetrized.
pub fn gramian(flow: &FlowMap, n: &MatrixCurve) -> Result<DMatrix<f64>> {
    check_same_horizon(flow, n)?;
    let d = flow.dim();
    let kernels = steering_samples(flow, n)?;
    let weights = simpson_weights(flow.steps(), flow.step())?;
    let mut g = DMatrix::zeros(d, d);
    for (b, w) in kernels.iter().zip(&weights) {
        g += *w * b * b.transpose();
    }
    let sym = (&g + g.transpose()) * 0.5;
    Ok(sym)
}

/// Scale-invariant positivity floor for the Gramian verdict:
/// `1e−12 · trace(G) / d`.
pub fn gramian_tol(g: &DMatrix<f64>) -> f64 {
    1e-12 * g.trace() / g.nrows() as f64
}

/// Full report: generalized rank condition plus Gramian certificate.
pub fn full_report(
    m: &MatrixCurve,
    n: &MatrixCurve,
    flow: &FlowMap,
    rank_tol: f64,
) -> Result<ControllabilityReport> {
    let mut report = rank_condition(m, n, rank_tol)?;
    let g = gramian(flow, n)?;
    let min_eig = symmetric_min_eig(&g);
    let tol = gramian_tol(&g);
    let by_rank = report.numerical_rank == m.rows();
    let by_gramian = min_eig > tol;
    report.controllable = by_rank || by_gramian;
    report.gramian = Some(g);
    report.gramian_min_eig = Some(min_eig);
    report.gramian_tol = Some(tol);
    report.method = ControllabilityMethod::Both;
    Ok(report)
}

/// Spectral norm of the Gramian's inverse, used by explicit cost bounds.
pub fn gramian_inverse_norm(g: &DMatrix<f64>) -> Result<f64> {
    let inv = g
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotControllable("Gramian is singular".into()))?;
    Ok(spectral_norm(&inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsys::{build_flow, DEFAULT_FLOW_TOL};
    use crate::systems;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_pair_blocks_are_signed_powers() {
        let (m, n) = systems::double_integrator(1.0).unwrap();
        let blocks = matrix_polynomials(&m, &n, 0.3, 1).unwrap();
        assert_eq!(blocks[0], DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        // P₁ = −M N = (−1, 0)ᵀ
        assert_eq!(blocks[1], DMatrix::from_row_slice(2, 1, &[-1.0, 0.0]));
    }

    #[test]
    fn scalar_linear_drift_blocks() {
        // M(t) = t, N = 1: P₁(t) = −t, P₂(t) = t² − 1.
        let m = MatrixCurve::polynomial(vec![vec![vec![0.0, 1.0]]], 2.0).unwrap();
        let n = MatrixCurve::constant(DMatrix::from_row_slice(1, 1, &[1.0]), 2.0).unwrap();
        let blocks = matrix_polynomials(&m, &n, 2.0, 2).unwrap();
        assert_abs_diff_eq!(blocks[1][(0, 0)], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(blocks[2][(0, 0)], 4.0 - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_drift_blocks_are_input_derivatives() {
        // M = 0, N(t) = [[t², 1]]: P₁ = N′(t) = [[2t, 0]].
        let m = MatrixCurve::zeros(1, 1, 1.0).unwrap();
        let n = MatrixCurve::polynomial(vec![vec![vec![0.0, 0.0, 1.0], vec![1.0]]], 1.0).unwrap();
        let blocks = matrix_polynomials(&m, &n, 0.5, 1).unwrap();
        assert_abs_diff_eq!(blocks[1][(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(blocks[1][(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn double_integrator_is_controllable_by_rank() {
        let (m, n) = systems::double_integrator(1.0).unwrap();
        let report = rank_condition(&m, &n, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(report.beta, 2);
        assert_eq!(report.numerical_rank, 2);
        assert!(report.controllable);
    }

    #[test]
    fn zero_input_is_never_controllable() {
        let (m, _) = systems::double_integrator(1.0).unwrap();
        let n = MatrixCurve::zeros(2, 1, 1.0).unwrap();
        let report = rank_condition(&m, &n, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(report.numerical_rank, 0);
        assert!(!report.controllable);
    }

    #[test]
    fn rotation_single_input_rank_matrix() {
        let (m, n) = systems::rotation_single_input(1.0).unwrap();
        let report = rank_condition(&m, &n, DEFAULT_RANK_TOL).unwrap();
        // [N, −MN, …] starts [[0,−1],[1,0]]; full rank already at k = 1.
        assert_eq!(report.blocks[0], DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(report.blocks[1], DMatrix::from_row_slice(2, 1, &[-1.0, 0.0]));
        assert_eq!(report.numerical_rank, 2);
    }

    #[test]
    fn generalized_matches_classical_kalman_on_random_constant_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let (m, n) = systems::random_constant_pair(&mut rng, 4, 2, 1.0).unwrap();
            let report = rank_condition(&m, &n, DEFAULT_RANK_TOL).unwrap();
            let (m0, n0) = (m.eval(0.0, 0).unwrap(), n.eval(0.0, 0).unwrap());
            let classical = classical_kalman_rank(&m0, &n0, DEFAULT_RANK_TOL);
            assert_eq!(report.numerical_rank == 4, classical == 4);
        }
    }

    #[test]
    fn bell_blocks_match_recursion_for_commuting_drift() {
        // M(t) = t·J commutes across times; single input forces β = 2.
        let coeffs = vec![
            vec![vec![], vec![0.0, 1.0]],
            vec![vec![0.0, -1.0], vec![]],
        ];
        let m = MatrixCurve::polynomial(coeffs, 1.3).unwrap();
        let n = MatrixCurve::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), 1.3).unwrap();
        let bell = bell_rank_blocks(&m, &n).unwrap();
        let recursive = matrix_polynomials(&m, &n, 1.3, 2).unwrap();
        assert_eq!(bell.len(), recursive.len());
        for (b, r) in bell.iter().zip(&recursive) {
            assert!((b - r).norm() <= 1e-8, "Bell block differs from recursion:\n{b}\nvs\n{r}");
        }
    }

    #[test]
    fn bell_blocks_reject_non_commuting_drift() {
        let coeffs = vec![
            vec![vec![], vec![0.0, 1.0]],
            vec![vec![], vec![1.0]],
        ];
        let m = MatrixCurve::polynomial(coeffs, 1.0).unwrap();
        let n = MatrixCurve::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), 1.0).unwrap();
        assert!(matches!(bell_rank_blocks(&m, &n), Err(Error::NonCommuting(_))));
    }

    #[test]
    fn double_integrator_gramian_closed_form() {
        let (m, n) = systems::double_integrator(1.0).unwrap();
        let flow = build_flow(&m, 200, DEFAULT_FLOW_TOL).unwrap();
        let g = gramian(&flow, &n).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]);
        assert!((g - expected).norm() < 1e-10);
    }

    #[test]
    fn trivial_gramians() {
        let (m, n) = systems::euclidean(3, 2.0).unwrap();
        let flow = build_flow(&m, 100, DEFAULT_FLOW_TOL).unwrap();
        let g = gramian(&flow, &n).unwrap();
        assert!((g - 2.0 * DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);

        let zero_n = MatrixCurve::zeros(3, 2, 2.0).unwrap();
        let g0 = gramian(&flow, &zero_n).unwrap();
        assert!(g0.norm() < 1e-15);
    }

    #[test]
    fn rank_implies_positive_gramian() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let (m, n) = systems::random_constant_pair(&mut rng, 3, 1, 1.0).unwrap();
            let flow = build_flow(&m, 200, DEFAULT_FLOW_TOL).unwrap();
            let report = full_report(&m, &n, &flow, DEFAULT_RANK_TOL).unwrap();
            if report.numerical_rank == 3 {
                assert!(report.gramian_min_eig.unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn gramian_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..5 {
            let (m, n) = systems::random_constant_pair(&mut rng, 4, 2, 1.0).unwrap();
            let flow = build_flow(&m, 200, DEFAULT_FLOW_TOL).unwrap();
            let g = gramian(&flow, &n).unwrap();
            assert!(symmetric_min_eig(&g) > -1e-10);
            assert!((g.clone() - g.transpose()).norm() <= 1e-10 * g.norm().max(1.0));
        }
    }
}
