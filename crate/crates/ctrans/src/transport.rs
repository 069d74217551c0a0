//! Static optimal transport between discrete measures under the control cost.
//!
//! The ground cost between atoms is `c_p(x, y)` from [`crate::cost`]; the
//! coupling problem is the classical transportation linear program
//! `min Σ_{ij} π_{ij} c_{ij}` over nonnegative matrices whose row sums equal
//! the source weights and whose column sums equal the target weights.  The
//! default solver is the exact transportation simplex (northwest-corner
//! start, MODI pivoting, Bland's rule against cycling); an entropically
//! regularized solver is available separately for large instances where its
//! documented bias is acceptable.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cost::{DualityExponents, PointSolver, SolverOptions};
use crate::error::{Error, Result};
use crate::linsys::{FlowMap, MatrixCurve};

/// Weights of a measure must sum to one within this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Plans must reproduce their marginals within this tolerance.
pub const MARGINAL_TOL: f64 = 1e-10;

/// Dual feasibility slack allowed by the simplex optimality certificate.
pub const CERTIFICATE_TOL: f64 = 1e-9;

/// Upper bound on the size accepted by the permutation-enumeration oracle.
pub const ENUMERATION_LIMIT: usize = 8;

/// Weighted point cloud with unit total mass.
///
/// All atoms share one ambient dimension, every weight is strictly positive,
/// and the weights sum to one within [`WEIGHT_SUM_TOL`].  Finite support
/// makes every `p`-th moment finite, so membership in `𝒫_p(ℝ^d)` is
/// automatic.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Validates and wraps a weighted point cloud.
    pub fn new(points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("zero-dimensional atoms".into()));
        }
        for (k, x) in points.iter().enumerate() {
            if x.len() != dim {
                return Err(Error::InvalidMeasure(format!(
                    "atom {k} has dimension {} but atom 0 has dimension {dim}",
                    x.len()
                )));
            }
            if !x.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidMeasure(format!("atom {k} is not finite")));
            }
        }
        for (k, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "weight {k} is {w}; weights must be positive"
                )));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, not 1 within {WEIGHT_SUM_TOL:e}"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Uniform measure on the given points (weight `1/n` each).
    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        let weights = vec![w; points.len()];
        Self::new(points, weights)
    }

    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// A validated measure always has at least one atom.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ambient dimension of the atoms.
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// All atoms.
    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// All weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Atom `i`.
    pub fn point(&self, i: usize) -> &DVector<f64> {
        &self.points[i]
    }

    /// Weight of atom `i`.
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// `p`-th moment `Σ_i w_i |x_i|^p`.
    pub fn p_moment(&self, p: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * x.norm().powf(p))
            .sum()
    }
}

/// One nonzero cell of a coupling matrix: mass moved from source atom `i`
/// to target atom `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

/// Coupling between two discrete measures together with its transport cost
/// and the dual potentials produced by the solver.
///
/// Invariants for simplex output: row sums reproduce the source weights and
/// column sums the target weights within [`MARGINAL_TOL`]; at most
/// `|μ| + |ν| − 1` entries carry mass; the potentials satisfy
/// `u_i + v_j ≤ c_ij + `[`CERTIFICATE_TOL`] everywhere with equality on the
/// entries (complementary slackness).  The entropic solver fills the same
/// fields but its plan is dense and its potentials are regularized duals,
/// not a feasibility certificate.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Sparse list of cells with `mass > 0`, sorted row-major.
    pub entries: Vec<PlanEntry>,
    /// Transport cost `Σ mass_ij · c_ij`.
    pub cost: f64,
    /// Simplex pivots or Sinkhorn sweeps performed.
    pub iterations: usize,
    /// Dual potential per source atom.
    pub u: Vec<f64>,
    /// Dual potential per target atom.
    pub v: Vec<f64>,
    /// Number of source atoms.
    pub source_len: usize,
    /// Number of target atoms.
    pub target_len: usize,
}

impl TransportPlan {
    /// Mass sent out of each source atom.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.source_len];
        for e in &self.entries {
            sums[e.i] += e.mass;
        }
        sums
    }

    /// Mass received by each target atom.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.target_len];
        for e in &self.entries {
            sums[e.j] += e.mass;
        }
        sums
    }

    /// Largest deviation of the plan's marginals from the given measures.
    pub fn max_marginal_error(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let rows = self.row_sums();
        let cols = self.col_sums();
        let row_err = rows
            .iter()
            .zip(mu.weights())
            .map(|(s, w)| (s - w).abs())
            .fold(0.0_f64, f64::max);
        let col_err = cols
            .iter()
            .zip(nu.weights())
            .map(|(s, w)| (s - w).abs())
            .fold(0.0_f64, f64::max);
        row_err.max(col_err)
    }

    /// Largest dual feasibility violation `max_{ij} (u_i + v_j − c_ij)`.
    ///
    /// At a simplex optimum this is ≤ [`CERTIFICATE_TOL`]; a nonpositive
    /// value proves the plan optimal up to round-off.
    pub fn max_dual_violation(&self, costs: &DMatrix<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.source_len {
            for j in 0..self.target_len {
                worst = worst.max(self.u[i] + self.v[j] - costs[(i, j)]);
            }
        }
        worst
    }

    /// Largest complementary-slackness residual `|c_ij − u_i − v_j|` over
    /// the cells that carry mass.
    pub fn max_basic_slack(&self, costs: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|e| (costs[(e.i, e.j)] - self.u[e.i] - self.v[e.j]).abs())
            .fold(0.0_f64, f64::max)
    }

    /// Dual objective `Σ_i u_i μ_i + Σ_j v_j ν_j`; equals the cost at a
    /// simplex optimum (strong duality).
    pub fn dual_objective(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let du: f64 = self.u.iter().zip(mu.weights()).map(|(u, w)| u * w).sum();
        let dv: f64 = self.v.iter().zip(nu.weights()).map(|(v, w)| v * w).sum();
        du + dv
    }

    /// Cost of this plan under a different cost matrix.
    pub fn evaluate(&self, costs: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|e| e.mass * costs[(e.i, e.j)])
            .sum()
    }
}

/// Builds the matrix of ground costs `c_p(x_i, y_j)` between all atom pairs.
///
/// Entries are computed in parallel; the result (including which entry
/// reports the first failure) is deterministic for a fixed flow, grid, and
/// tolerance set because entries are assembled in row-major order.  The
/// `p = 2` closed form is used when `exps.p == 2`, the dual Newton solver
/// otherwise.
pub fn cost_matrix(
    flow: &FlowMap,
    n: &MatrixCurve,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    exps: DualityExponents,
    opts: &SolverOptions,
) -> Result<DMatrix<f64>> {
    if mu.dim() != flow.dim() || nu.dim() != flow.dim() {
        return Err(Error::Shape(format!(
            "measure dimensions {} and {} do not match the state dimension {}",
            mu.dim(),
            nu.dim(),
            flow.dim()
        )));
    }
    let solver = PointSolver::new(flow, n)?;
    let rows = mu.len();
    let cols = nu.len();
    let cells: Vec<Result<f64>> = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / cols, k % cols);
            let solved = if exps.p == 2.0 {
                solver.solve_p2(mu.point(i), nu.point(j), opts)
            } else {
                solver.solve(mu.point(i), nu.point(j), exps, opts)
            };
            solved.map(|oc| oc.cost)
        })
        .collect();
    let mut costs = DMatrix::zeros(rows, cols);
    for (k, cell) in cells.into_iter().enumerate() {
        let (i, j) = (k / cols, k % cols);
        costs[(i, j)] = cell.map_err(|e| Error::CostEntry {
            i,
            j,
            source: Box::new(e),
        })?;
    }
    Ok(costs)
}

/// Transportation simplex state: a spanning-tree basis over the bipartite
/// graph whose nodes are the `m` source atoms and `n` target atoms.
struct Simplex<'a> {
    costs: &'a DMatrix<f64>,
    m: usize,
    n: usize,
    /// Basic cells `(i, j, mass)`; always exactly `m + n − 1` of them,
    /// forming a spanning tree (degenerate cells carry zero mass).
    basis: Vec<(usize, usize, f64)>,
    /// Entering threshold: reduced costs above `−pivot_tol` count as
    /// nonnegative, so termination certifies optimality to that slack.
    pivot_tol: f64,
}

impl<'a> Simplex<'a> {
    fn new(costs: &'a DMatrix<f64>, supply: &[f64], demand: &[f64]) -> Self {
        let scale = 1.0 + costs.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
        let mut s = Self {
            costs,
            m: supply.len(),
            n: demand.len(),
            basis: Vec::with_capacity(supply.len() + demand.len() - 1),
            pivot_tol: 1e-12 * scale,
        };
        s.northwest_start(supply, demand);
        s
    }

    /// Northwest-corner initial basis.  Walks from cell (0,0) to
    /// (m−1,n−1) moving right or down, so it emits exactly `m + n − 1`
    /// cells; simultaneous row/column exhaustion advances the row only,
    /// leaving a zero-mass (degenerate) basic cell in the next row.
    fn northwest_start(&mut self, supply: &[f64], demand: &[f64]) {
        let mut supply = supply.to_vec();
        let mut demand = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let q = supply[i].min(demand[j]);
            self.basis.push((i, j, q));
            supply[i] -= q;
            demand[j] -= q;
            if i == self.m - 1 && j == self.n - 1 {
                break;
            } else if j == self.n - 1 {
                i += 1;
            } else if i == self.m - 1 {
                j += 1;
            } else if supply[i] == 0.0 {
                // Exhausted row (also the tie case: both hit zero).
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    /// Adjacency lists of the basis tree.  Node ids: `0..m` are rows,
    /// `m..m+n` are columns; edge payload is the basis index.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (idx, &(i, j, _)) in self.basis.iter().enumerate() {
            adj[i].push((self.m + j, idx));
            adj[self.m + j].push((i, idx));
        }
        adj
    }

    /// MODI potentials: solve `u_i + v_j = c_ij` on basic cells by
    /// propagating from `u_0 = 0` through the basis tree.
    fn potentials(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let adj = self.adjacency();
        let mut u = vec![0.0; self.m];
        let mut v = vec![0.0; self.n];
        let mut seen = vec![false; self.m + self.n];
        let mut stack = vec![0_usize];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(other, idx) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    let (i, j, _) = self.basis[idx];
                    if other >= self.m {
                        v[other - self.m] = self.costs[(i, j)] - u[i];
                    } else {
                        u[other] = self.costs[(i, j)] - v[j];
                    }
                    stack.push(other);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok((u, v))
        } else {
            Err(Error::InvalidInput(
                "internal: transportation basis is not a spanning tree".into(),
            ))
        }
    }

    /// Entering cell by Bland's rule: the first non-basic cell in row-major
    /// order whose reduced cost is below `−pivot_tol`.
    fn entering(&self, u: &[f64], v: &[f64]) -> Option<(usize, usize)> {
        let mut basic = vec![false; self.m * self.n];
        for &(i, j, _) in &self.basis {
            basic[i * self.n + j] = true;
        }
        for i in 0..self.m {
            for j in 0..self.n {
                if !basic[i * self.n + j] && self.costs[(i, j)] - u[i] - v[j] < -self.pivot_tol {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// One pivot: add the entering cell, shift mass around the unique cycle
    /// it closes in the basis tree, and drop the blocking cell (smallest
    /// row-major index among the ties, again Bland's rule).
    fn pivot(&mut self, enter: (usize, usize)) -> Result<()> {
        let adj = self.adjacency();
        // Tree path from row node enter.0 to column node m + enter.1.
        let start = enter.0;
        let goal = self.m + enter.1;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(node) = queue.pop_front() {
            if node == goal {
                break;
            }
            for &(other, idx) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((node, idx));
                    queue.push_back(other);
                }
            }
        }
        if !seen[goal] {
            return Err(Error::InvalidInput(
                "internal: entering cell closes no cycle in the basis tree".into(),
            ));
        }
        // Edges along the path, ordered from the entering row outward; the
        // cycle alternates +θ (entering) / −θ / +θ / ... so odd path
        // positions lose mass.
        let mut path = Vec::new();
        let mut node = goal;
        while node != start {
            let (prev, idx) = parent[node].expect("path nodes have parents");
            path.push(idx);
            node = prev;
        }
        path.reverse();
        let losing: Vec<usize> = path.iter().copied().step_by(2).collect();

        // Blocking cell: minimum mass among losers, ties to the smallest
        // row-major cell index.
        let mut theta = f64::INFINITY;
        let mut leave = losing[0];
        for &idx in &losing {
            let (i, j, mass) = self.basis[idx];
            let (li, lj, _) = self.basis[leave];
            if mass < theta - 0.0 || (mass == theta && (i, j) < (li, lj)) {
                theta = mass;
                leave = idx;
            }
        }

        for (pos, &idx) in path.iter().enumerate() {
            let cell = &mut self.basis[idx];
            if pos % 2 == 0 {
                cell.2 = (cell.2 - theta).max(0.0);
            } else {
                cell.2 += theta;
            }
        }
        self.basis[leave] = (enter.0, enter.1, theta);
        Ok(())
    }

    /// Pivots to optimality; returns the final potentials and pivot count.
    fn run(&mut self, max_pivots: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        for pivots in 0..=max_pivots {
            let (u, v) = self.potentials()?;
            match self.entering(&u, &v) {
                None => return Ok((u, v, pivots)),
                Some(cell) => self.pivot(cell)?,
            }
        }
        Err(Error::CyclingGuard(max_pivots))
    }
}

/// Solves the transportation linear program exactly.
///
/// Northwest-corner start, MODI pivoting, Bland's rule for both the
/// entering and the blocking cell, so the pivot sequence — and hence the
/// tie-breaking among equally optimal plans — is deterministic.  The
/// returned potentials certify optimality: `u_i + v_j ≤ c_ij` up to
/// round-off everywhere, with equality on cells that carry mass.
pub fn solve_plan(
    costs: &DMatrix<f64>,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<TransportPlan> {
    let (m, n) = (mu.len(), nu.len());
    if costs.nrows() != m || costs.ncols() != n {
        return Err(Error::Shape(format!(
            "cost matrix is {}x{} but the measures have {m} and {n} atoms",
            costs.nrows(),
            costs.ncols()
        )));
    }
    if !costs.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
    }
    let total_mu: f64 = mu.weights().iter().sum();
    let total_nu: f64 = nu.weights().iter().sum();
    if (total_mu - total_nu).abs() > MARGINAL_TOL {
        return Err(Error::Unbalanced(format!(
            "source mass {total_mu} != target mass {total_nu}"
        )));
    }

    let mut simplex = Simplex::new(costs, mu.weights(), nu.weights());
    let max_pivots = 1000 + 100 * (m + n);
    let (u, v, iterations) = simplex.run(max_pivots)?;

    let mut entries: Vec<PlanEntry> = simplex
        .basis
        .iter()
        .filter(|&&(_, _, mass)| mass > 0.0)
        .map(|&(i, j, mass)| PlanEntry { i, j, mass })
        .collect();
    entries.sort_by_key(|e| (e.i, e.j));
    let cost = entries.iter().map(|e| e.mass * costs[(e.i, e.j)]).sum();
    Ok(TransportPlan {
        entries,
        cost,
        iterations,
        u,
        v,
        source_len: m,
        target_len: n,
    })
}

/// Brute-force minimum of the uniform transportation problem over all
/// pairings, for cross-checking the simplex on small square instances.
///
/// Returns the lexicographically first optimal permutation `σ` and the
/// transport value `(1/n) Σ_i c[i, σ(i)]` — the cost of the plan that moves
/// mass `1/n` along each pair, which is optimal for uniform measures
/// because the transportation polytope's vertices are permutation matrices.
pub fn permutation_minimum(costs: &DMatrix<f64>) -> Result<(Vec<usize>, f64)> {
    let n = costs.nrows();
    if costs.ncols() != n {
        return Err(Error::Shape(format!(
            "permutation oracle needs a square matrix, got {}x{}",
            n,
            costs.ncols()
        )));
    }
    if n == 0 || n > ENUMERATION_LIMIT {
        return Err(Error::InvalidInput(format!(
            "permutation oracle handles 1..={ENUMERATION_LIMIT} atoms, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best: f64 = perm.iter().enumerate().map(|(i, &j)| costs[(i, j)]).sum();
    while next_permutation(&mut perm) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| costs[(i, j)]).sum();
        if total < best {
            best = total;
            best_perm = perm.clone();
        }
    }
    Ok((best_perm, best / n as f64))
}

/// Advances `perm` to its lexicographic successor; `false` once exhausted.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let Some(pivot) = (0..n - 1).rev().find(|&k| perm[k] < perm[k + 1]) else {
        return false;
    };
    let swap = (pivot + 1..n).rev().find(|&k| perm[k] > perm[pivot]).unwrap();
    perm.swap(pivot, swap);
    perm[pivot + 1..].reverse();
    true
}

/// Entropically regularized transport via log-domain Sinkhorn iterations.
///
/// Minimizes `Σ π c + eps · KL(π | μ ⊗ ν)`, so the returned plan is dense
/// and its cost is biased upward relative to [`solve_plan`] by an amount
/// that vanishes as `eps → 0` (at the price of slower convergence).  The
/// stored potentials are the regularized duals, not a feasibility
/// certificate.  Iterations stop once both marginals match within
/// `marginal_tol`; exceeding `max_iter` is reported as non-convergence with
/// the residual achieved.
pub fn solve_plan_sinkhorn(
    costs: &DMatrix<f64>,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    marginal_tol: f64,
    max_iter: usize,
) -> Result<TransportPlan> {
    let (m, n) = (mu.len(), nu.len());
    if costs.nrows() != m || costs.ncols() != n {
        return Err(Error::Shape(format!(
            "cost matrix is {}x{} but the measures have {m} and {n} atoms",
            costs.nrows(),
            costs.ncols()
        )));
    }
    if !costs.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "regularization strength must be positive, got {eps}"
        )));
    }
    if !(marginal_tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidInput(
            "marginal tolerance and iteration budget must be positive".into(),
        ));
    }

    let log_a: Vec<f64> = mu.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = nu.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0_f64; m];
    let mut g = vec![0.0_f64; n];

    // π_ij = exp((f_i + g_j − c_ij)/eps + log_a_i + log_b_j); each half-sweep
    // rescales one set of potentials so the matching marginal becomes exact.
    let log_plan = |f: &[f64], g: &[f64], i: usize, j: usize| {
        (f[i] + g[j] - costs[(i, j)]) / eps + log_a[i] + log_b[j]
    };
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_iter {
        for (i, fi) in f.iter_mut().enumerate() {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - costs[(i, j)]) / eps + log_b[j]));
            *fi = -eps * lse;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - costs[(i, j)]) / eps + log_a[i]));
            *gj = -eps * lse;
        }
        // Columns are exact after the g-sweep; convergence is measured on
        // the rows.
        residual = (0..m)
            .map(|i| {
                let row: f64 = (0..n).map(|j| log_plan(&f, &g, i, j).exp()).sum();
                (row - mu.weight(i)).abs()
            })
            .fold(0.0_f64, f64::max);
        if residual <= marginal_tol {
            let mut entries = Vec::with_capacity(m * n);
            let mut cost = 0.0;
            for i in 0..m {
                for j in 0..n {
                    let mass = log_plan(&f, &g, i, j).exp();
                    if mass > 0.0 {
                        entries.push(PlanEntry { i, j, mass });
                        cost += mass * costs[(i, j)];
                    }
                }
            }
            return Ok(TransportPlan {
                entries,
                cost,
                iterations: sweep,
                u: f,
                v: g,
                source_len: m,
                target_len: n,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Numerically stable `log Σ exp`.
fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}
