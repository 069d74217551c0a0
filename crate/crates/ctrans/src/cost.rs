//! Point-to-point transport costs of a controllable linear system.
//!
//! For `p > 1` the cost of steering `x` to `y` over the horizon is
//!
//! ```text
//! c_p(x,y) = min { ∫₀ᵀ |α(t)|ᵖ dt  :  E(α) = y },
//! E(α)     = Φ(0,T) x + ∫₀ᵀ Φ(τ,T) N(τ) α(τ) dτ.
//! ```
//!
//! The minimizer is parametrized by a unique multiplier `ξ ∈ ℝᵈ`:
//! `α*(t) = p^{1−q} j_q(N(t)ᵀ Φ(t,T)ᵀ ξ)` with the duality map
//! `j_r(v) = |v|^{r−2} v` and conjugate exponent `q = p/(p−1)`. The solver
//! finds `ξ` by minimizing the strictly convex dual
//!
//! ```text
//! F(ξ) = (1/(q·p^{q−1})) ∫₀ᵀ |N(τ)ᵀΦ(τ,T)ᵀ ξ|^q dτ − ⟨y − Φ(0,T)x, ξ⟩,
//! ```
//!
//! whose gradient is exactly the endpoint residual `E(α_ξ) − y`. A damped
//! Newton iteration with Armijo backtracking does the work; when `q < 2`
//! makes the Hessian integrand singular near zeros of `NᵀΦᵀξ`, the step
//! falls back to Barzilai–Borwein gradient steps. For `p = 2` everything is
//! closed-form through the Gramian: `ξ = 2 G⁻¹(y − Φ(0,T)x)` and
//! `c_2(x,y) = (y − Φ(0,T)x)ᵀ G⁻¹ (y − Φ(0,T)x)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngExt};

use crate::control::{gramian, gramian_inverse_norm, gramian_tol};
use crate::error::{Error, Result};
use crate::linsys::{steering_samples, FlowMap, MatrixCurve};
use crate::quad::simpson_weights;

/// A Hölder-conjugate exponent pair `1/p + 1/q = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityExponents {
    pub p: f64,
    pub q: f64,
}

impl DualityExponents {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::InvalidInput(format!("exponent p must satisfy p > 1, got {p}")));
        }
        Ok(Self { p, q: p / (p - 1.0) })
    }
}

/// Tolerances and iteration caps for the point solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Endpoint-residual target; also the degeneracy threshold for
    /// `y ≈ Φ(0,T)x`.
    pub solve_tol: f64,
    /// Newton/Barzilai–Borwein iteration cap.
    pub max_iter: usize,
    /// Tolerance for quadrature-level consistency checks.
    pub quad_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            solve_tol: 1e-8,
            max_iter: 200,
            quad_tol: 1e-8,
        }
    }
}

/// Solution of one point-to-point problem.
#[derive(Debug, Clone)]
pub struct OptimalControl {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub p: f64,
    /// `c_p(x,y)`, the Simpson quadrature of `|α*(t)|ᵖ`.
    pub cost: f64,
    /// Lagrange multiplier `ξ_p(x,y)`.
    pub xi: DVector<f64>,
    /// `α*(t_k)` on the flow grid.
    pub alpha_samples: Vec<DVector<f64>>,
    /// `‖E(α*) − y‖`.
    pub endpoint_residual: f64,
    pub solver_iterations: usize,
}

/// Duality map `j_r(v) = |v|^{r−2} v`, with `j_r(0) = 0`.
pub fn j_dual(v: &DVector<f64>, r: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm == 0.0 {
        return DVector::zeros(v.len());
    }
    v * norm.powf(r - 2.0)
}

/// End-point map `E(α) = Φ(0,T)x + ∫₀ᵀ Φ(τ,T)N(τ)α(τ) dτ` evaluated by
/// composite Simpson from control samples aligned with the flow grid.
pub fn endpoint(
    flow: &FlowMap,
    n: &MatrixCurve,
    x: &DVector<f64>,
    alpha_samples: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let kernels = steering_samples(flow, n)?;
    if alpha_samples.len() != kernels.len() {
        return Err(Error::GridMismatch(format!(
            "{} control samples for a grid of {} nodes",
            alpha_samples.len(),
            kernels.len()
        )));
    }
    let weights = simpson_weights(flow.steps(), flow.step())?;
    let mut out = flow.end() * x;
    for ((b, a), w) in kernels.iter().zip(alpha_samples).zip(&weights) {
        out += *w * b * a;
    }
    Ok(out)
}

/// The convex dual problem shared by the grid solver and the
/// piecewise-constant transcription solver: minimize
/// `F(ξ) = (1/(q·p^{q−1})) Σ_k w_k |B_kᵀξ|^q − Δᵀξ`.
struct DualProblem<'a> {
    kernels: &'a [DMatrix<f64>],
    weights: &'a [f64],
    delta: &'a DVector<f64>,
    exps: DualityExponents,
}

impl DualProblem<'_> {
    fn dim(&self) -> usize {
        self.delta.len()
    }

    /// `α_k(ξ) = p^{1−q} j_q(B_kᵀ ξ)`.
    fn alpha(&self, xi: &DVector<f64>) -> Vec<DVector<f64>> {
        let scale = self.exps.p.powf(1.0 - self.exps.q);
        self.kernels
            .iter()
            .map(|b| scale * j_dual(&(b.transpose() * xi), self.exps.q))
            .collect()
    }

    fn objective(&self, xi: &DVector<f64>) -> f64 {
        let (p, q) = (self.exps.p, self.exps.q);
        let mut quad = 0.0;
        for (b, w) in self.kernels.iter().zip(self.weights) {
            quad += w * (b.transpose() * xi).norm().powf(q);
        }
        quad / (q * p.powf(q - 1.0)) - self.delta.dot(xi)
    }

    /// `∇F(ξ) = Σ_k w_k B_k α_k(ξ) − Δ`, the endpoint residual vector.
    fn gradient(&self, xi: &DVector<f64>) -> DVector<f64> {
        let scale = self.exps.p.powf(1.0 - self.exps.q);
        let mut g = -self.delta.clone();
        for (b, w) in self.kernels.iter().zip(self.weights) {
            let z = b.transpose() * xi;
            g += (*w * scale) * b * j_dual(&z, self.exps.q);
        }
        g
    }

    /// `∇²F(ξ) = p^{1−q} Σ_k w_k |z_k|^{q−2} B_k (I + (q−2) ẑ_k ẑ_kᵀ) B_kᵀ`
    /// with `z_k = B_kᵀ ξ` (the directional factor `q−1` sits inside
    /// `I + (q−2) ẑẑᵀ`); nodes with vanishing `z_k` are skipped when the
    /// exponent `q − 2` is negative, and a trace-scaled ridge keeps the
    /// factorization alive near that degeneracy.
    fn hessian(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let (p, q) = (self.exps.p, self.exps.q);
        let d = self.dim();
        let factor = p.powf(1.0 - q);
        let z_scale = self
            .kernels
            .iter()
            .map(|b| (b.transpose() * xi).norm())
            .fold(0.0, f64::max);
        let floor = 1e-12 * z_scale.max(1e-300);
        let mut h = DMatrix::zeros(d, d);
        for (b, w) in self.kernels.iter().zip(self.weights) {
            let z = b.transpose() * xi;
            let norm = z.norm();
            if norm == 0.0 || (q < 2.0 && norm < floor) {
                continue;
            }
            let zhat = &z / norm;
            let core = DMatrix::identity(z.len(), z.len()) + (q - 2.0) * &zhat * zhat.transpose();
            h += (factor * w * norm.powf(q - 2.0)) * b * core * b.transpose();
        }
        if q < 2.0 {
            let ridge = 1e-12 * h.trace().max(0.0) / d as f64;
            for i in 0..d {
                h[(i, i)] += ridge;
            }
        }
        h
    }

    /// Damped Newton with Armijo backtracking, falling back to safeguarded
    /// Barzilai–Borwein gradient steps when the Newton model degenerates.
    /// Returns `(ξ, iterations)`; convergence means `‖∇F‖ ≤ grad_tol`.
    fn solve(
        &self,
        mut xi: DVector<f64>,
        grad_tol: f64,
        max_iter: usize,
    ) -> Result<(DVector<f64>, usize)> {
        const ARMIJO_C1: f64 = 1e-4;
        let mut f = self.objective(&xi);
        let mut g = self.gradient(&xi);
        let mut best = (g.norm(), xi.clone());
        let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (ξ, ∇F) of previous iterate

        for iter in 0..max_iter {
            if g.norm() <= grad_tol {
                return Ok((xi, iter));
            }

            // Objective evaluations carry round-off of order eps · Σ|terms|;
            // near the optimum the true decrease sinks below that noise and an
            // exact sufficient-decrease test deadlocks the line search.  Allow
            // the noise in the comparison — the gradient test above remains
            // the sole convergence criterion.
            let noise = 1e-13 * (1.0 + f.abs());

            // Newton direction, with escalating ridge if the factorization fails.
            let h = self.hessian(&xi);
            let mut direction = None;
            let mut ridge = 0.0;
            let base = h.trace().abs().max(1e-300) / self.dim() as f64;
            for _ in 0..4 {
                let mut hr = h.clone();
                for i in 0..self.dim() {
                    hr[(i, i)] += ridge;
                }
                if let Some(chol) = Cholesky::new(hr) {
                    direction = Some(chol.solve(&(-&g)));
                    break;
                }
                ridge = if ridge == 0.0 { 1e-10 * base } else { ridge * 100.0 };
            }

            let mut stepped = false;
            if let Some(s) = direction {
                let slope = g.dot(&s);
                if slope < 0.0 {
                    let mut tau = 1.0;
                    while tau >= 1e-14 {
                        let cand = &xi + tau * &s;
                        let f_cand = self.objective(&cand);
                        if f_cand <= f + ARMIJO_C1 * tau * slope + noise {
                            prev = Some((xi.clone(), g.clone()));
                            xi = cand;
                            f = f_cand;
                            g = self.gradient(&xi);
                            stepped = true;
                            break;
                        }
                        tau *= 0.5;
                    }
                }
            }

            if !stepped {
                // Barzilai–Borwein safeguarded gradient step.
                let mut tau = match &prev {
                    Some((xi_prev, g_prev)) => {
                        let s = &xi - xi_prev;
                        let dg = &g - g_prev;
                        let denom = s.dot(&dg);
                        if denom.abs() > 1e-300 {
                            (s.dot(&s) / denom).abs().clamp(1e-10, 1e10)
                        } else {
                            1.0 / (1.0 + g.norm())
                        }
                    }
                    None => 1.0 / (1.0 + g.norm()),
                };
                let slope = -g.dot(&g);
                loop {
                    let cand = &xi - tau * &g;
                    let f_cand = self.objective(&cand);
                    if f_cand <= f + ARMIJO_C1 * tau * slope + noise || tau < 1e-14 {
                        prev = Some((xi.clone(), g.clone()));
                        xi = cand;
                        f = f_cand;
                        g = self.gradient(&xi);
                        break;
                    }
                    tau *= 0.5;
                }
            }

            if g.norm() < best.0 {
                best = (g.norm(), xi.clone());
            }
        }

        if best.0 <= grad_tol {
            return Ok((best.1, max_iter));
        }
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual: best.0,
        })
    }
}

/// Reusable point-problem solver: precomputes the steering kernels, Simpson
/// weights, and the Gramian factorization for one `(flow, N)` pair so whole
/// cost matrices and path ensembles can be solved without redundant work.
/// All methods take `&self`; the solver is safe to share across threads.
pub struct PointSolver<'a> {
    flow: &'a FlowMap,
    kernels: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    gramian: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> PointSolver<'a> {
    pub fn new(flow: &'a FlowMap, n: &MatrixCurve) -> Result<Self> {
        let kernels = steering_samples(flow, n)?;
        let weights = simpson_weights(flow.steps(), flow.step())?;
        let g = gramian(flow, n)?;
        let chol = Cholesky::new(g.clone());
        Ok(Self {
            flow,
            kernels,
            weights,
            gramian: g,
            chol,
        })
    }

    pub fn flow(&self) -> &FlowMap {
        self.flow
    }

    pub fn gramian(&self) -> &DMatrix<f64> {
        &self.gramian
    }

    /// Steering kernels `Φ(t_k,T) N(t_k)` on the flow grid.
    pub fn kernels(&self) -> &[DMatrix<f64>] {
        &self.kernels
    }

    /// `Φ(0,T) x`.
    pub fn drift_endpoint(&self, x: &DVector<f64>) -> DVector<f64> {
        self.flow.end() * x
    }

    fn check_points(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        let d = self.flow.dim();
        if x.len() != d || y.len() != d {
            return Err(Error::Shape(format!(
                "points of dimension {} and {} for a system of dimension {d}",
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn gramian_solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let tol = gramian_tol(&self.gramian);
        let min_eig = crate::linsys::symmetric_min_eig(&self.gramian);
        if min_eig <= tol {
            return Err(Error::NotControllable(format!(
                "Gramian minimum eigenvalue {min_eig:.3e} at or below floor {tol:.3e}"
            )));
        }
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| Error::NotControllable("Gramian Cholesky factorization failed".into()))?;
        Ok(chol.solve(rhs))
    }

    fn zero_solution(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        p: f64,
        residual: f64,
    ) -> OptimalControl {
        let n_inputs = self.kernels[0].ncols();
        OptimalControl {
            x: x.clone(),
            y: y.clone(),
            p,
            cost: 0.0,
            xi: DVector::zeros(y.len()),
            alpha_samples: vec![DVector::zeros(n_inputs); self.kernels.len()],
            endpoint_residual: residual,
            solver_iterations: 0,
        }
    }

    /// Closed-form `p = 2` solution through the Gramian.
    pub fn solve_p2(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        opts: &SolverOptions,
    ) -> Result<OptimalControl> {
        self.check_points(x, y)?;
        let delta = y - self.drift_endpoint(x);
        if delta.norm() <= opts.solve_tol {
            return Ok(self.zero_solution(x, y, 2.0, delta.norm()));
        }
        let lambda = self.gramian_solve(&delta)?;
        let alpha_samples: Vec<DVector<f64>> =
            self.kernels.iter().map(|b| b.transpose() * &lambda).collect();
        let cost = delta.dot(&lambda);
        let reached: DVector<f64> = self
            .kernels
            .iter()
            .zip(&self.weights)
            .zip(&alpha_samples)
            .fold(self.drift_endpoint(x), |acc, ((b, w), a)| acc + *w * b * a);
        Ok(OptimalControl {
            x: x.clone(),
            y: y.clone(),
            p: 2.0,
            cost,
            xi: 2.0 * lambda,
            alpha_samples,
            endpoint_residual: (reached - y).norm(),
            solver_iterations: 0,
        })
    }

    /// General `p > 1` solution by dual Newton iteration.
    pub fn solve(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        exps: DualityExponents,
        opts: &SolverOptions,
    ) -> Result<OptimalControl> {
        self.check_points(x, y)?;
        let delta = y - self.drift_endpoint(x);
        if delta.norm() <= opts.solve_tol {
            return Ok(self.zero_solution(x, y, exps.p, delta.norm()));
        }
        let problem = DualProblem {
            kernels: &self.kernels,
            weights: &self.weights,
            delta: &delta,
            exps,
        };
        // Initial guess: the p = 2 multiplier rescaled, exact when p = 2.
        let init = exps.p * self.gramian_solve(&delta)?;
        let grad_tol = opts.solve_tol * (1.0 + y.norm());
        let (xi, iterations) = problem.solve(init, grad_tol, opts.max_iter)?;

        let alpha_samples = problem.alpha(&xi);
        let mut cost = 0.0;
        for (a, w) in alpha_samples.iter().zip(&self.weights) {
            cost += w * a.norm().powf(exps.p);
        }
        let residual = problem.gradient(&xi).norm();
        Ok(OptimalControl {
            x: x.clone(),
            y: y.clone(),
            p: exps.p,
            cost,
            xi,
            alpha_samples,
            endpoint_residual: residual,
            solver_iterations: iterations,
        })
    }

    /// Metric value `d_p(x,z) = c_p(x, Φ(0,T)z)^{1/p}`.
    pub fn metric(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        exps: DualityExponents,
        opts: &SolverOptions,
    ) -> Result<f64> {
        let y = self.drift_endpoint(z);
        Ok(self.solve(x, &y, exps, opts)?.cost.powf(1.0 / exps.p))
    }
}

/// One-shot closed-form `p = 2` solve (convenience around
/// [`PointSolver::solve_p2`] taking a precomputed Gramian for validation).
pub fn solve_p2(
    flow: &FlowMap,
    n: &MatrixCurve,
    g: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<OptimalControl> {
    let solver = PointSolver::new(flow, n)?;
    if (g - &solver.gramian).norm() > 1e-8 * (1.0 + g.norm()) {
        return Err(Error::GridMismatch(
            "supplied Gramian does not match the flow/input pair".into(),
        ));
    }
    solver.solve_p2(x, y, opts)
}

/// One-shot general-`p` solve; see [`PointSolver::solve`].
pub fn solve_general_p(
    flow: &FlowMap,
    n: &MatrixCurve,
    x: &DVector<f64>,
    y: &DVector<f64>,
    exps: DualityExponents,
    opts: &SolverOptions,
) -> Result<OptimalControl> {
    PointSolver::new(flow, n)?.solve(x, y, exps, opts)
}

/// Metric value `d_p(x,z) = c_p(x, Φ(0,T)z)^{1/p}`; see [`PointSolver::metric`].
pub fn cost_metric(
    flow: &FlowMap,
    n: &MatrixCurve,
    x: &DVector<f64>,
    z: &DVector<f64>,
    exps: DualityExponents,
    opts: &SolverOptions,
) -> Result<f64> {
    PointSolver::new(flow, n)?.metric(x, z, exps, opts)
}

/// Empirical two-sided comparison between `c_p(x,y)` and `|y − Φ(0,T)x|ᵖ`.
#[derive(Debug, Clone)]
pub struct ComparisonBounds {
    /// Smallest sampled ratio `c_p / |y−Φ(0,T)x|ᵖ`.
    pub k1: f64,
    /// Largest sampled ratio.
    pub k2: f64,
    /// All sampled ratios (one per direction).
    pub ratios: Vec<f64>,
    /// The computable upper constant `T · ‖Φ(·,T)‖ᵖ_∞ · ‖N‖ᵖ_∞ · ‖G⁻¹‖ᵖ`.
    pub analytic_upper: f64,
}

/// Sample unit directions `u = (y − Φ(0,T)x)/|·|` and collect the cost
/// ratios; by `p`-homogeneity of the cost in the endpoint gap the ratio only
/// depends on the direction. Also assembles the explicit analytic upper
/// constant for cross-checking `k2`.
pub fn comparison_bounds(
    flow: &FlowMap,
    n: &MatrixCurve,
    exps: DualityExponents,
    sample_count: usize,
    rng: &mut impl Rng,
    opts: &SolverOptions,
) -> Result<ComparisonBounds> {
    let solver = PointSolver::new(flow, n)?;
    let d = flow.dim();
    let x = DVector::zeros(d);
    let mut ratios = Vec::with_capacity(sample_count);
    while ratios.len() < sample_count {
        let mut u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));
        let norm = u.norm();
        if norm < 0.1 {
            continue; // reject near-degenerate draws
        }
        u /= norm;
        ratios.push(solver.solve(&x, &u, exps, opts)?.cost);
    }
    let k1 = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let k2 = ratios.iter().copied().fold(0.0, f64::max);

    let phi_sup = flow.sup_backward_norm();
    let n_sup = n.sup_spectral_norm(flow.steps());
    let g_inv_norm = gramian_inverse_norm(&solver.gramian)?;
    let analytic_upper = flow.horizon()
        * phi_sup.powf(exps.p)
        * n_sup.powf(exps.p)
        * g_inv_norm.powf(exps.p);

    Ok(ComparisonBounds {
        k1,
        k2,
        ratios,
        analytic_upper,
    })
}

/// Direct-transcription reference: optimal piecewise-constant control on
/// `cells` uniform cells, with the steering kernel frozen at each cell
/// midpoint. Solves the finite-dimensional convex program exactly (through
/// its dual) and returns its optimal value, which converges to `c_p(x,y)`
/// as `cells → ∞`.
pub fn transcription_cost(
    flow: &FlowMap,
    n: &MatrixCurve,
    x: &DVector<f64>,
    y: &DVector<f64>,
    exps: DualityExponents,
    cells: usize,
    opts: &SolverOptions,
) -> Result<f64> {
    if cells == 0 {
        return Err(Error::InvalidInput("transcription needs at least one cell".into()));
    }
    let d = flow.dim();
    if x.len() != d || y.len() != d {
        return Err(Error::Shape("point dimension differs from system dimension".into()));
    }
    let horizon = flow.horizon();
    let dt = horizon / cells as f64;
    let mut kernels = Vec::with_capacity(cells);
    for k in 0..cells {
        let mid = (k as f64 + 0.5) * dt;
        kernels.push(crate::linsys::steering_at(flow, n, mid)?);
    }
    let weights = vec![dt; cells];
    let delta = y - flow.end() * x;
    if delta.norm() <= opts.solve_tol {
        return Ok(0.0);
    }

    // Discrete Gramian of the transcribed endpoint map for the initial guess.
    let mut g = DMatrix::zeros(d, d);
    for (b, w) in kernels.iter().zip(&weights) {
        g += *w * b * b.transpose();
    }
    let chol = Cholesky::new((&g + g.transpose()) * 0.5)
        .ok_or_else(|| Error::NotControllable("transcribed endpoint map is degenerate".into()))?;
    let init = exps.p * chol.solve(&delta);

    let problem = DualProblem {
        kernels: &kernels,
        weights: &weights,
        delta: &delta,
        exps,
    };
    let grad_tol = opts.solve_tol * (1.0 + y.norm());
    let (xi, _) = problem.solve(init, grad_tol, opts.max_iter)?;
    let mut value = 0.0;
    for (a, w) in problem.alpha(&xi).iter().zip(&weights) {
        value += w * a.norm().powf(exps.p);
    }
    Ok(value)
}
