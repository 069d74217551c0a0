//! Dynamic side of the transport problem: path ensembles, actions, weak
//! continuity-equation residuals, and the static/dynamic equivalence check.
//!
//! A transport plan between discrete measures is realized as a finite
//! ensemble of optimally controlled trajectories — one path per plan entry,
//! carrying that entry's mass.  The ensemble induces the interpolating
//! measures `ρ_t` (particles at time `t`) and a Lagrangian velocity field
//! represented by per-path controls.  Its action `Σ_k w_k ∫|α_k|^p dt` is
//! the dynamic transport value `𝒟_p`, which matches the static optimum
//! `𝒞_p` whenever trajectories do not coincide; coincidences are detected
//! and the Jensen-averaged field action is reported alongside.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::control::{gramian_inverse_norm, gramian_tol};
use crate::cost::{endpoint, DualityExponents, PointSolver, SolverOptions};
use crate::error::{Error, Result};
use crate::linsys::{spectral_norm, FlowMap, MatrixCurve};
use crate::quad::simpson_weights;
use crate::transport::{
    cost_matrix, solve_plan, DiscreteMeasure, PlanEntry, TransportPlan, MARGINAL_TOL,
};

/// Two trajectory samples closer than this coincide for field-averaging.
pub const COLLISION_TOL: f64 = 1e-9;

/// Default ceiling for the per-step dynamics residual of a valid ensemble.
pub const DEFAULT_PATH_TOL: f64 = 1e-6;

/// Default ceiling for normalized continuity residuals at 1000 grid steps.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-6;

/// Static/dynamic agreement: `|𝒟_p − 𝒞_p| ≤ EQUIVALENCE_TOL · (1 + 𝒞_p)`.
pub const EQUIVALENCE_TOL: f64 = 1e-8;

/// Perturbed admissible actions must stay above `𝒞_p − PERTURBATION_SLACK`.
pub const PERTURBATION_SLACK: f64 = 1e-9;

/// One weighted controlled trajectory from a source atom to a target atom.
#[derive(Debug, Clone)]
pub struct EnsemblePath {
    /// Mass carried by this path (the plan entry's mass).
    pub weight: f64,
    /// Index of the source atom `x_i`.
    pub source_index: usize,
    /// Index of the target atom `y_j`.
    pub target_index: usize,
    /// State samples `γ(t_k)` on the shared grid.
    pub trajectory: Vec<DVector<f64>>,
    /// Control samples `α(t_k)`.
    pub controls: Vec<DVector<f64>>,
    /// Velocity samples `M(t_k)γ(t_k) + N(t_k)α(t_k)`, cached so weak-form
    /// evaluations need no curve arguments.
    pub velocities: Vec<DVector<f64>>,
}

/// Finite ensemble of weighted controlled trajectories on a shared grid.
///
/// Total weight is 1 (the paths inherit the plan masses), every trajectory
/// starts exactly at its source atom, and the sampled dynamics hold along
/// each path within the construction quadrature.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    paths: Vec<EnsemblePath>,
    grid: Vec<f64>,
    source_len: usize,
    target_len: usize,
    n_inputs: usize,
}

impl PathEnsemble {
    /// All paths.
    pub fn paths(&self) -> &[EnsemblePath] {
        &self.paths
    }

    /// Shared time grid `0 = t_0 < … < t_K = T`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Number of grid intervals.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    /// Time horizon `T`.
    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.paths[0].trajectory[0].len()
    }

    /// Control dimension.
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// Number of source atoms of the originating plan.
    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Number of target atoms of the originating plan.
    pub fn target_len(&self) -> usize {
        self.target_len
    }

    /// Total mass carried by the paths.
    pub fn total_weight(&self) -> f64 {
        self.paths.iter().map(|p| p.weight).sum()
    }

    /// The interpolating measure `ρ_{t_k}`: particle positions at node `k`
    /// with the path weights.  Coincident particles stay separate atoms.
    pub fn measure_at(&self, k: usize) -> Result<DiscreteMeasure> {
        let points = self.paths.iter().map(|p| p.trajectory[k].clone()).collect();
        let weights = self.paths.iter().map(|p| p.weight).collect();
        DiscreteMeasure::new(points, weights)
    }

    /// Largest `p`-th moment of `ρ_{t_k}` over the grid.
    pub fn sup_p_moment(&self, p: f64) -> f64 {
        (0..self.grid.len())
            .map(|k| {
                self.paths
                    .iter()
                    .map(|path| path.weight * path.trajectory[k].norm().powf(p))
                    .sum()
            })
            .fold(0.0_f64, f64::max)
    }

    /// Radius of the smallest origin-centered ball containing every
    /// trajectory sample.
    pub fn data_radius(&self) -> f64 {
        self.paths
            .iter()
            .flat_map(|p| p.trajectory.iter())
            .map(|x| x.norm())
            .fold(0.0_f64, f64::max)
    }

    /// Mass grouped by source atom; equals the source weights within the
    /// plan's marginal tolerance.
    pub fn source_marginal(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.source_len];
        for p in &self.paths {
            sums[p.source_index] += p.weight;
        }
        sums
    }

    /// Mass grouped by target atom.
    pub fn target_marginal(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.target_len];
        for p in &self.paths {
            sums[p.target_index] += p.weight;
        }
        sums
    }

    /// Largest one-step dynamics residual over all paths:
    /// `‖γ(t_{k+1}) − Φ(t_k,t_{k+1})γ(t_k) − ∫ Φ(τ,t_{k+1})N(τ)α(τ)dτ‖`,
    /// with the cell integral evaluated by the trapezoid rule from the node
    /// samples.  Independent of the construction quadrature, so it is a
    /// genuine consistency check of the stored trajectories against the
    /// stored controls; scales as `O(h³)` on smooth instances.
    pub fn max_step_residual(&self, flow: &FlowMap, n: &MatrixCurve) -> Result<f64> {
        if self.grid.len() != flow.grid().len()
            || (self.horizon() - flow.horizon()).abs() > 1e-12 * (1.0 + flow.horizon())
        {
            return Err(Error::GridMismatch(
                "ensemble grid differs from the flow grid".into(),
            ));
        }
        let h = flow.step();
        let k_steps = self.steps();
        let n_nodes: Vec<DMatrix<f64>> = (0..=k_steps)
            .map(|k| n.eval(self.grid[k], 0))
            .collect::<Result<_>>()?;
        let mut worst: f64 = 0.0;
        for k in 0..k_steps {
            // Φ(t_k, t_{k+1}) = Φ(t_{k+1}, T)⁻¹ Φ(t_k, T).
            let step_flow = flow
                .backward_at(k + 1)
                .clone()
                .lu()
                .solve(flow.backward_at(k))
                .ok_or_else(|| {
                    Error::Singular("transition factor in the step residual".into())
                })?;
            for path in &self.paths {
                let forced = &step_flow * &(&n_nodes[k] * &path.controls[k])
                    + &n_nodes[k + 1] * &path.controls[k + 1];
                let predicted = &step_flow * &path.trajectory[k] + (0.5 * h) * forced;
                worst = worst.max((&path.trajectory[k + 1] - predicted).norm());
            }
        }
        Ok(worst)
    }
}

/// Realizes a transport plan as a path ensemble: for each positive-mass
/// entry `(i, j)`, solves the point problem `x_i → y_j` and integrates the
/// controlled trajectory on the flow grid via variation of constants,
/// `γ(t) = Φ(T,t)[Φ(0,T)x + ∫₀ᵗ Φ(τ,T)N(τ)α(τ)dτ]`, with prefix-Simpson
/// cell integrals so that `γ(T)` reproduces the solver's endpoint
/// quadrature exactly.  Construction is parallel over entries.
pub fn plan_to_ensemble(
    plan: &TransportPlan,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    flow: &FlowMap,
    n: &MatrixCurve,
    exps: DualityExponents,
    opts: &SolverOptions,
) -> Result<PathEnsemble> {
    if plan.source_len != mu.len() || plan.target_len != nu.len() {
        return Err(Error::Shape(format!(
            "plan is {}x{} but the measures have {} and {} atoms",
            plan.source_len,
            plan.target_len,
            mu.len(),
            nu.len()
        )));
    }
    if plan.max_marginal_error(mu, nu) > MARGINAL_TOL {
        return Err(Error::InvalidInput(
            "plan marginals do not match the measures".into(),
        ));
    }
    let solver = PointSolver::new(flow, n)?;
    let end_inv = flow
        .end()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("terminal flow Φ(0,T)".into()))?;
    let k_steps = flow.steps();
    let grid = flow.grid().to_vec();
    let n_nodes: Vec<DMatrix<f64>> = (0..=k_steps)
        .map(|k| n.eval(grid[k], 0))
        .collect::<Result<_>>()?;

    let paths: Vec<EnsemblePath> = plan
        .entries
        .par_iter()
        .map(|entry| {
            build_path(
                entry, mu, nu, flow, &solver, &end_inv, &n_nodes, exps, opts,
            )
            .map_err(|e| Error::CostEntry {
                i: entry.i,
                j: entry.j,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    Ok(PathEnsemble {
        paths,
        grid,
        source_len: plan.source_len,
        target_len: plan.target_len,
        n_inputs: n.cols(),
    })
}

/// Builds the trajectory, controls, and velocities for one plan entry.
#[allow(clippy::too_many_arguments)]
fn build_path(
    entry: &PlanEntry,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    flow: &FlowMap,
    solver: &PointSolver,
    end_inv: &DMatrix<f64>,
    n_nodes: &[DMatrix<f64>],
    exps: DualityExponents,
    opts: &SolverOptions,
) -> Result<EnsemblePath> {
    let x = mu.point(entry.i);
    let y = nu.point(entry.j);
    let solved = if exps.p == 2.0 {
        solver.solve_p2(x, y, opts)?
    } else {
        solver.solve(x, y, exps, opts)?
    };
    let controls = solved.alpha_samples;
    let k_steps = flow.steps();

    // Forcing samples B(t_k) α_k with B = Φ(·,T)N and their prefix
    // integrals; the full-grid prefix coincides with composite Simpson, so
    // the terminal state matches the solver's endpoint quadrature.
    let forcing: Vec<DVector<f64>> = (0..=k_steps)
        .map(|k| &solver.kernels()[k] * &controls[k])
        .collect();
    let prefixes = prefix_integrals(&forcing, flow.step());

    let base = flow.end() * x;
    let mut trajectory = Vec::with_capacity(k_steps + 1);
    for (k, prefix) in prefixes.iter().enumerate() {
        if k == 0 {
            trajectory.push(x.clone());
        } else if k == k_steps {
            trajectory.push(&base + prefix);
        } else {
            trajectory.push(flow.forward_at(k) * (end_inv * (&base + prefix)));
        }
    }

    let velocities = (0..=k_steps)
        .map(|k| flow.drift_at(k) * &trajectory[k] + &n_nodes[k] * &controls[k])
        .collect();

    Ok(EnsemblePath {
        weight: entry.mass,
        source_index: entry.i,
        target_index: entry.j,
        trajectory,
        controls,
        velocities,
    })
}

/// Running integrals `S_k ≈ ∫₀^{t_k} f dτ` of node samples on a uniform
/// grid with an even interval count.  Even prefixes use composite Simpson
/// (so `S_K` is exactly the full Simpson sum); odd prefixes add the
/// integral of the quadratic through the surrounding three nodes,
/// `∫_{t_{k−1}}^{t_k} = h(5f_{k−1} + 8f_k − f_{k+1})/12`, keeping the whole
/// table fourth-order accurate.
fn prefix_integrals(values: &[DVector<f64>], h: f64) -> Vec<DVector<f64>> {
    let dim = values[0].len();
    let k_steps = values.len() - 1;
    let mut prefixes = Vec::with_capacity(values.len());
    prefixes.push(DVector::zeros(dim));
    for k in 1..=k_steps {
        if k % 2 == 0 {
            let simpson_pair =
                (h / 3.0) * (&values[k - 2] + 4.0 * &values[k - 1] + &values[k]);
            prefixes.push(&prefixes[k - 2] + simpson_pair);
        } else {
            let half_cell =
                (h / 12.0) * (5.0 * &values[k - 1] + 8.0 * &values[k] - &values[k + 1]);
            prefixes.push(&prefixes[k - 1] + half_cell);
        }
    }
    prefixes
}

/// Pushes each path's weight to its endpoint pair, recovering the plan the
/// ensemble realizes.  Entries with the same index pair are merged; the
/// plan cost is the weighted sum of per-path actions (the dynamic value the
/// paths actually attain).  The potentials of a recovered plan are zero:
/// the pushforward carries no optimality certificate.
pub fn ensemble_to_plan(ensemble: &PathEnsemble, exps: DualityExponents) -> Result<TransportPlan> {
    let mut merged: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for path in ensemble.paths() {
        *merged.entry((path.source_index, path.target_index)).or_insert(0.0) += path.weight;
    }
    let entries: Vec<PlanEntry> = merged
        .into_iter()
        .map(|((i, j), mass)| PlanEntry { i, j, mass })
        .collect();
    let report = dynamic_action(ensemble, exps)?;
    Ok(TransportPlan {
        entries,
        cost: report.path_action,
        iterations: 0,
        u: vec![0.0; ensemble.source_len],
        v: vec![0.0; ensemble.target_len],
        source_len: ensemble.source_len,
        target_len: ensemble.target_len,
    })
}

/// Two paths passing within [`COLLISION_TOL`] of each other at a grid node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidenceEvent {
    /// Node time.
    pub time: f64,
    /// Node index.
    pub time_index: usize,
    /// Lower path index.
    pub path_a: usize,
    /// Higher path index.
    pub path_b: usize,
}

/// Action of an ensemble, with coincidence diagnostics.
#[derive(Debug, Clone)]
pub struct ActionReport {
    /// `Σ_paths weight · Simpson(|α|^p)` — the dynamic value attained by
    /// the per-path controls.
    pub path_action: f64,
    /// Per-path unweighted actions `∫|α_k|^p dt`.
    pub path_actions: Vec<f64>,
    /// All detected coincidences.
    pub coincidences: Vec<CoincidenceEvent>,
    /// Action of the disintegration-averaged velocity field, reported only
    /// when coincidences exist; Jensen's inequality makes it ≤ the path
    /// action, possibly strictly.
    pub field_action: Option<f64>,
}

/// Evaluates the dynamic action `Σ_k w_k ∫₀ᵀ |α_k(t)|^p dt` by the shared
/// Simpson rule, detects trajectory coincidences, and — when any exist —
/// also evaluates the action of the averaged field (controls of coincident
/// particles replaced by their weighted mean).
pub fn dynamic_action(ensemble: &PathEnsemble, exps: DualityExponents) -> Result<ActionReport> {
    let k_steps = ensemble.steps();
    let h = ensemble.horizon() / k_steps as f64;
    let weights = simpson_weights(k_steps, h)?;

    let path_actions: Vec<f64> = ensemble
        .paths()
        .iter()
        .map(|path| {
            path.controls
                .iter()
                .zip(&weights)
                .map(|(a, w)| w * a.norm().powf(exps.p))
                .sum()
        })
        .collect();
    let path_action: f64 = ensemble
        .paths()
        .iter()
        .zip(&path_actions)
        .map(|(p, a)| p.weight * a)
        .sum();

    let coincidences = detect_coincidences(ensemble);
    let field_action = if coincidences.is_empty() {
        None
    } else {
        Some(field_action(ensemble, exps, &weights))
    };

    Ok(ActionReport {
        path_action,
        path_actions,
        coincidences,
        field_action,
    })
}

/// Pairwise particle-distance scan over all grid nodes.
fn detect_coincidences(ensemble: &PathEnsemble) -> Vec<CoincidenceEvent> {
    let paths = ensemble.paths();
    let mut events = Vec::new();
    for (k, &time) in ensemble.grid().iter().enumerate() {
        for a in 0..paths.len() {
            for b in a + 1..paths.len() {
                let gap = (&paths[a].trajectory[k] - &paths[b].trajectory[k]).norm();
                if gap < COLLISION_TOL {
                    events.push(CoincidenceEvent {
                        time,
                        time_index: k,
                        path_a: a,
                        path_b: b,
                    });
                }
            }
        }
    }
    events
}

/// Path-halving union-find lookup.
fn uf_find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Action of the disintegration-averaged field: at each node, particles
/// within [`COLLISION_TOL`] of each other (transitively) form a cluster
/// whose control is replaced by the weighted mean, then
/// `Σ_k w_k Σ_clusters W_c |ᾱ_c|^p`.  Without coincidences every cluster
/// is a singleton and the value equals the path action.
fn field_action(ensemble: &PathEnsemble, exps: DualityExponents, weights: &[f64]) -> f64 {
    let paths = ensemble.paths();
    let mut total = 0.0;
    for (k, w_k) in weights.iter().enumerate() {
        // Union-find over paths by proximity at this node.
        let mut parent: Vec<usize> = (0..paths.len()).collect();
        for a in 0..paths.len() {
            for b in a + 1..paths.len() {
                if (&paths[a].trajectory[k] - &paths[b].trajectory[k]).norm() < COLLISION_TOL {
                    let (ra, rb) = (uf_find(&mut parent, a), uf_find(&mut parent, b));
                    if ra != rb {
                        parent[ra] = rb;
                    }
                }
            }
        }
        let mut cluster_weight = vec![0.0_f64; paths.len()];
        let mut cluster_control = vec![DVector::zeros(ensemble.n_inputs()); paths.len()];
        for (idx, path) in paths.iter().enumerate() {
            let root = uf_find(&mut parent, idx);
            cluster_weight[root] += path.weight;
            cluster_control[root] += path.weight * &path.controls[k];
        }
        let node_value: f64 = (0..paths.len())
            .filter(|&root| cluster_weight[root] > 0.0)
            .map(|root| {
                let mean = &cluster_control[root] / cluster_weight[root];
                cluster_weight[root] * mean.norm().powf(exps.p)
            })
            .sum();
        total += w_k * node_value;
    }
    total
}

/// A compactly supported `C¹` space-time test function `φ(t, x)` with its
/// exact partial derivatives and an analytic bound on
/// `‖φ‖_{C¹} = sup|φ| + sup|∂_t φ| + sup|∇φ|`.
pub struct TestFunction {
    /// Human-readable description of the factorization.
    pub label: String,
    value: Box<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
    time_derivative: Box<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
    gradient: Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Upper bound on the `C¹` norm, used to normalize residuals.
    pub c1_norm: f64,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction")
            .field("label", &self.label)
            .field("c1_norm", &self.c1_norm)
            .finish()
    }
}

impl TestFunction {
    /// Wraps closures for `φ`, `∂_t φ`, and `∇φ` with a `C¹`-norm bound.
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(f64, &DVector<f64>) -> f64 + Send + Sync + 'static,
        time_derivative: impl Fn(f64, &DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        c1_norm: f64,
    ) -> Self {
        Self {
            label: label.into(),
            value: Box::new(value),
            time_derivative: Box::new(time_derivative),
            gradient: Box::new(gradient),
            c1_norm,
        }
    }

    /// `φ(t, x)`.
    pub fn value(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.value)(t, x)
    }

    /// `∂_t φ(t, x)`.
    pub fn time_derivative(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.time_derivative)(t, x)
    }

    /// `∇_x φ(t, x)`.
    pub fn gradient(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(t, x)
    }
}

/// Spatial factor of a battery member: `1`, `x_i`, or `x_i x_j`.
#[derive(Debug, Clone, Copy)]
enum SpatialFactor {
    One,
    Linear(usize),
    Quadratic(usize, usize),
}

impl SpatialFactor {
    fn eval(self, x: &DVector<f64>) -> f64 {
        match self {
            SpatialFactor::One => 1.0,
            SpatialFactor::Linear(i) => x[i],
            SpatialFactor::Quadratic(i, j) => x[i] * x[j],
        }
    }

    fn grad(self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        match self {
            SpatialFactor::One => {}
            SpatialFactor::Linear(i) => g[i] = 1.0,
            SpatialFactor::Quadratic(i, j) => {
                g[i] += x[j];
                g[j] += x[i];
            }
        }
        g
    }

    /// Upper bound on `|P|` over the ball of radius `ball`.
    fn sup(self, ball: f64) -> f64 {
        match self {
            SpatialFactor::One => 1.0,
            SpatialFactor::Linear(_) => ball,
            SpatialFactor::Quadratic(_, _) => ball * ball,
        }
    }

    /// Upper bound on `|∇P|` over the ball of radius `ball`.
    fn grad_sup(self, ball: f64) -> f64 {
        match self {
            SpatialFactor::One => 0.0,
            SpatialFactor::Linear(_) => 1.0,
            SpatialFactor::Quadratic(i, j) if i == j => 2.0 * ball,
            SpatialFactor::Quadratic(_, _) => ball,
        }
    }

    fn label(self) -> String {
        match self {
            SpatialFactor::One => "1".into(),
            SpatialFactor::Linear(i) => format!("x{}", i + 1),
            SpatialFactor::Quadratic(i, j) => format!("x{}*x{}", i + 1, j + 1),
        }
    }
}

/// The fixed test battery: the temporal bump `b(t) = 16t²(T−t)²/T⁴`
/// (vanishing with its derivative at both endpoints) times each spatial
/// polynomial in `{1, x_i, x_i x_j (i ≤ j)}`, truncated by a radial `C²`
/// quintic-smoothstep cutoff that is 1 on the data ball of radius `R` and 0
/// outside radius `2R`.  Since all trajectory samples stay inside the
/// plateau, the cutoff never affects evaluations along paths, but it makes
/// every `φ` compactly supported as the weak formulation requires.
pub fn default_battery(dim: usize, horizon: f64, data_radius: f64) -> Vec<TestFunction> {
    let t_end = horizon;
    // Strictly positive plateau radius, slightly inflated so samples on the
    // boundary stay inside.
    let radius = (data_radius * (1.0 + 1e-9)).max(1e-6);
    let bump = move |t: f64| 16.0 * t * t * (t_end - t) * (t_end - t) / t_end.powi(4);
    let bump_dt =
        move |t: f64| 32.0 * t * (t_end - t) * (t_end - 2.0 * t) / t_end.powi(4);
    // max_t |b| = 1 at t = T/2; max_t |b'| = 16/(3√3 T).
    let bump_sup = 1.0;
    let bump_dt_sup = 16.0 / (3.0 * 3.0_f64.sqrt() * t_end);

    // Quintic smoothstep cutoff χ(r): 1 on [0, R], 0 on [2R, ∞), C²,
    // with |χ'| ≤ (15/8)/R.
    let cutoff = move |r: f64| -> f64 {
        if r <= radius {
            1.0
        } else if r >= 2.0 * radius {
            0.0
        } else {
            let u = (r - radius) / radius;
            1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
        }
    };
    let cutoff_dr = move |r: f64| -> f64 {
        if r <= radius || r >= 2.0 * radius {
            0.0
        } else {
            let u = (r - radius) / radius;
            -(30.0 * u * u - 60.0 * u * u * u + 30.0 * u * u * u * u) / radius
        }
    };
    let cutoff_dr_sup = (15.0 / 8.0) / radius;

    let mut spatials = vec![SpatialFactor::One];
    spatials.extend((0..dim).map(SpatialFactor::Linear));
    for i in 0..dim {
        for j in i..dim {
            spatials.push(SpatialFactor::Quadratic(i, j));
        }
    }

    spatials
        .into_iter()
        .map(|spatial| {
            let ball = 2.0 * radius;
            let c1_norm = bump_sup * spatial.sup(ball)
                + bump_dt_sup * spatial.sup(ball)
                + bump_sup * (spatial.grad_sup(ball) + spatial.sup(ball) * cutoff_dr_sup);
            let value =
                move |t: f64, x: &DVector<f64>| bump(t) * spatial.eval(x) * cutoff(x.norm());
            let time_derivative =
                move |t: f64, x: &DVector<f64>| bump_dt(t) * spatial.eval(x) * cutoff(x.norm());
            let gradient = move |t: f64, x: &DVector<f64>| {
                let r = x.norm();
                let chi = cutoff(r);
                let dchi = cutoff_dr(r);
                let radial = if r > 0.0 && dchi != 0.0 {
                    (dchi * spatial.eval(x) / r) * x
                } else {
                    DVector::zeros(x.len())
                };
                bump(t) * (spatial.grad(x) * chi + radial)
            };
            TestFunction::new(
                format!("bump(t)*{}*cutoff(|x|)", spatial.label()),
                value,
                time_derivative,
                gradient,
                c1_norm,
            )
        })
        .collect()
}

/// Weak continuity-equation residuals: for each test function, the Simpson
/// quadrature of `Σ_paths w · [∂_t φ(t, γ(t)) + ∇φ(t, γ(t)) · γ'(t)]`.
/// Since each `φ` vanishes at `t = 0` and `t = T`, the exact integral is
/// zero, so the returned value is a pure discretization residual; it must
/// stay below `residual_tol · ‖φ‖_{C¹}` for a valid ensemble.  Evaluation
/// is parallel over test functions.  Test functions that fail to vanish at
/// the endpoints (sampled along every path) are rejected.
pub fn continuity_residual(
    ensemble: &PathEnsemble,
    test_fns: &[TestFunction],
) -> Result<Vec<f64>> {
    let k_steps = ensemble.steps();
    let h = ensemble.horizon() / k_steps as f64;
    let weights = simpson_weights(k_steps, h)?;
    let t_end = ensemble.horizon();

    for tf in test_fns {
        let scale = 1.0 + tf.c1_norm;
        for path in ensemble.paths() {
            let at0 = tf.value(0.0, &path.trajectory[0]).abs();
            let at_t = tf.value(t_end, &path.trajectory[k_steps]).abs();
            if at0 > 1e-12 * scale || at_t > 1e-12 * scale {
                return Err(Error::InvalidTestFunction(format!(
                    "'{}' does not vanish at the time boundary ({at0:.3e}, {at_t:.3e})",
                    tf.label
                )));
            }
        }
    }

    Ok(test_fns
        .par_iter()
        .map(|tf| {
            let mut residual = 0.0;
            for path in ensemble.paths() {
                let mut along = 0.0;
                for k in 0..=k_steps {
                    let t = ensemble.grid()[k];
                    let x = &path.trajectory[k];
                    let dt_part = tf.time_derivative(t, x);
                    let grad_part = tf.gradient(t, x).dot(&path.velocities[k]);
                    along += weights[k] * (dt_part + grad_part);
                }
                residual += path.weight * along;
            }
            residual
        })
        .collect())
}

/// Moment-bound check: the supremum over the grid of the `p`-th moment of
/// `ρ_t` against the explicitly assembled constant
/// `2^{p−1}‖Φ‖^p_∞ (1+‖N‖_∞)^p (1+T^{p/q}) (1+2^{p−1}C_p(1+‖Φ(0,T)‖))`
/// times `(moment_p(μ) + moment_p(ν))`, where
/// `C_p = T‖Φ‖^p_∞‖N‖^p_∞‖G⁻¹‖^p` is the explicit upper constant for the
/// point cost and `‖Φ‖_∞` is the sampled two-parameter flow norm.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// `sup_k moment_p(ρ_{t_k})`.
    pub sup_moment: f64,
    /// The assembled constant multiplying the endpoint moments.
    pub constant: f64,
    /// `moment_p(μ)`.
    pub mu_moment: f64,
    /// `moment_p(ν)`.
    pub nu_moment: f64,
    /// `constant · (mu_moment + nu_moment)`.
    pub bound: f64,
    /// Whether `sup_moment ≤ bound`.
    pub ok: bool,
}

/// Evaluates the moment bound for an ensemble transporting `μ` to `ν`.
pub fn moment_bound(
    ensemble: &PathEnsemble,
    flow: &FlowMap,
    n: &MatrixCurve,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    exps: DualityExponents,
) -> Result<MomentReport> {
    let p = exps.p;
    let horizon = flow.horizon();
    let phi_sup = flow.sup_flow_norm(40)?;
    let n_sup = n.sup_spectral_norm(flow.steps());
    let g = crate::control::gramian(flow, n)?;
    let min_eig = crate::linsys::symmetric_min_eig(&g);
    if min_eig <= gramian_tol(&g) {
        return Err(Error::NotControllable(format!(
            "Gramian minimum eigenvalue {min_eig:.3e} is not positive"
        )));
    }
    let g_inv_norm = gramian_inverse_norm(&g)?;
    let c_p_const =
        horizon * phi_sup.powf(p) * n_sup.powf(p) * g_inv_norm.powf(p);
    let two_pow = 2.0_f64.powf(p - 1.0);
    let constant = two_pow
        * phi_sup.powf(p)
        * (1.0 + n_sup).powf(p)
        * (1.0 + horizon.powf(p / exps.q))
        * (1.0 + two_pow * c_p_const * (1.0 + spectral_norm(flow.end())));

    let sup_moment = ensemble.sup_p_moment(p);
    let mu_moment = mu.p_moment(p);
    let nu_moment = nu.p_moment(p);
    let bound = constant * (mu_moment + nu_moment);
    Ok(MomentReport {
        sup_moment,
        constant,
        mu_moment,
        nu_moment,
        bound,
        ok: sup_moment <= bound,
    })
}

/// One admissible perturbation of one path's control and the total action
/// it attains; admissibility means the endpoint quadrature is unchanged.
#[derive(Debug, Clone)]
pub struct PerturbationSample {
    /// Index of the perturbed path.
    pub path_index: usize,
    /// Perturbation amplitude `δ`.
    pub amplitude: f64,
    /// Residual endpoint shift of the perturbed path (quadrature level).
    pub endpoint_shift: f64,
    /// Total ensemble action with the perturbed control in place.
    pub action: f64,
}

/// Full static/dynamic equivalence report.
#[derive(Debug)]
pub struct EquivalenceReport {
    /// Ground cost matrix `c_p(x_i, y_j)`.
    pub costs: DMatrix<f64>,
    /// Optimal static plan.
    pub plan: TransportPlan,
    /// Static optimum `𝒞_p`.
    pub static_cost: f64,
    /// Realized ensemble and its diagnostics.
    pub ensemble: PathEnsemble,
    /// Dynamic value `𝒟_p` attained by the ensemble.
    pub dynamic_action: f64,
    /// Per-path unweighted actions (the decomposition of the dynamic value).
    pub path_actions: Vec<f64>,
    /// `|𝒟_p − 𝒞_p|`.
    pub gap: f64,
    /// `EQUIVALENCE_TOL · (1 + 𝒞_p)`.
    pub gap_tol: f64,
    /// Whether the gap is within tolerance.
    pub equivalent: bool,
    /// Detected trajectory coincidences.
    pub coincidences: Vec<CoincidenceEvent>,
    /// Averaged-field action when coincidences exist.
    pub field_action: Option<f64>,
    /// Raw battery residuals.
    pub residuals: Vec<f64>,
    /// `C¹` norms of the battery members (for normalization).
    pub residual_norms: Vec<f64>,
    /// Residual tolerance used for the pass verdict.
    pub residual_tol: f64,
    /// Whether every `|r| ≤ residual_tol · ‖φ‖_{C¹}`.
    pub residuals_ok: bool,
    /// Endpoint-preserving perturbations and their total actions.
    pub perturbations: Vec<PerturbationSample>,
    /// Whether every perturbed action ≥ `𝒞_p − PERTURBATION_SLACK`.
    pub perturbations_ok: bool,
    /// Moment-bound check.
    pub moment: MomentReport,
}

/// End-to-end equivalence verification: computes the static optimum, builds
/// the realizing ensemble, evaluates the dynamic action and the weak
/// residual battery, probes the minimality of the dynamic value with
/// endpoint-preserving control perturbations, and checks the interpolating
/// measures' moment bound.  Failure of any check is reported in the fields,
/// not as an error; errors are reserved for computational breakdowns.
#[allow(clippy::too_many_arguments)]
pub fn verify_equivalence(
    flow: &FlowMap,
    n: &MatrixCurve,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    exps: DualityExponents,
    opts: &SolverOptions,
    perturbation_count: usize,
    rng: &mut impl rand::Rng,
) -> Result<EquivalenceReport> {
    let costs = cost_matrix(flow, n, mu, nu, exps, opts)?;
    let plan = solve_plan(&costs, mu, nu)?;
    let static_cost = plan.cost;

    let ensemble = plan_to_ensemble(&plan, mu, nu, flow, n, exps, opts)?;
    let action = dynamic_action(&ensemble, exps)?;
    let gap = (action.path_action - static_cost).abs();
    let gap_tol = EQUIVALENCE_TOL * (1.0 + static_cost);

    let battery = default_battery(flow.dim(), flow.horizon(), ensemble.data_radius());
    let residuals = continuity_residual(&ensemble, &battery)?;
    let residual_norms: Vec<f64> = battery.iter().map(|tf| tf.c1_norm).collect();
    let residuals_ok = residuals
        .iter()
        .zip(&residual_norms)
        .all(|(r, norm)| r.abs() <= DEFAULT_RESIDUAL_TOL * norm);

    let perturbations = perturb_actions(
        &ensemble,
        flow,
        n,
        exps,
        &action.path_actions,
        action.path_action,
        perturbation_count,
        rng,
    )?;
    let perturbations_ok = perturbations
        .iter()
        .all(|s| s.action >= static_cost - PERTURBATION_SLACK);

    let moment = moment_bound(&ensemble, flow, n, mu, nu, exps)?;

    Ok(EquivalenceReport {
        costs,
        static_cost,
        dynamic_action: action.path_action,
        path_actions: action.path_actions,
        gap,
        gap_tol,
        equivalent: gap <= gap_tol,
        coincidences: action.coincidences,
        field_action: action.field_action,
        residuals,
        residual_norms,
        residual_tol: DEFAULT_RESIDUAL_TOL,
        residuals_ok,
        perturbations,
        perturbations_ok,
        moment,
        plan,
        ensemble,
    })
}

/// Samples endpoint-preserving control perturbations `α̃ = α + δ(η − Pη)`,
/// where `η` is a random smooth control built on `{sin(πt/T), sin(2πt/T),
/// t(T−t)/T²}` and `Pη = Bᵀ G⁻¹ (Σ w B η)` is the correction that cancels
/// the endpoint shift of `η` at the quadrature level (computed with the
/// `p = 2` machinery).  Since the perturbed pair steers between the same
/// endpoints, its action can only exceed the optimal one.
#[allow(clippy::too_many_arguments)]
fn perturb_actions(
    ensemble: &PathEnsemble,
    flow: &FlowMap,
    n: &MatrixCurve,
    exps: DualityExponents,
    path_actions: &[f64],
    total_action: f64,
    count: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<PerturbationSample>> {
    use rand::RngExt;

    let solver = PointSolver::new(flow, n)?;
    let k_steps = flow.steps();
    let h = flow.step();
    let weights = simpson_weights(k_steps, h)?;
    let t_end = flow.horizon();
    let n_inputs = ensemble.n_inputs();

    let mut samples = Vec::with_capacity(count);
    for trial in 0..count {
        let path_index = trial % ensemble.paths().len();
        let path = &ensemble.paths()[path_index];

        // Random smooth control on a fixed small basis.
        let coeff: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(n_inputs, |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        let eta: Vec<DVector<f64>> = (0..=k_steps)
            .map(|k| {
                let t = flow.grid()[k];
                let s1 = (std::f64::consts::PI * t / t_end).sin();
                let s2 = (2.0 * std::f64::consts::PI * t / t_end).sin();
                let s3 = t * (t_end - t) / (t_end * t_end);
                s1 * &coeff[0] + s2 * &coeff[1] + s3 * &coeff[2]
            })
            .collect();

        // Endpoint shift of η and its Gramian correction.
        let shift: DVector<f64> = solver
            .kernels()
            .iter()
            .zip(&weights)
            .zip(&eta)
            .fold(DVector::zeros(flow.dim()), |acc, ((b, w), e)| {
                acc + (b * e) * *w
            });
        let lambda = solver.gramian_solve(&shift)?;
        let delta = rng.random_range(0.05..=0.5);
        let perturbed: Vec<DVector<f64>> = (0..=k_steps)
            .map(|k| {
                &path.controls[k]
                    + delta * (&eta[k] - solver.kernels()[k].transpose() * &lambda)
            })
            .collect();

        // Admissibility: the perturbed control reaches the same endpoint.
        let reached = endpoint(flow, n, &path.trajectory[0], &perturbed)?;
        let endpoint_shift = (&reached - endpoint(flow, n, &path.trajectory[0], &path.controls)?)
            .norm();

        let perturbed_path_action: f64 = perturbed
            .iter()
            .zip(&weights)
            .map(|(a, w)| w * a.norm().powf(exps.p))
            .sum();
        let action = total_action
            + path.weight * (perturbed_path_action - path_actions[path_index]);
        samples.push(PerturbationSample {
            path_index,
            amplitude: delta,
            endpoint_shift,
            action,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::solve_general_p;
    use crate::linsys::{build_flow, DEFAULT_FLOW_TOL};
    use crate::systems;
    use crate::transport::permutation_minimum;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vecd(coords: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(coords)
    }

    fn uniform_random_measure(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> DiscreteMeasure {
        let points = (0..len)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        DiscreteMeasure::uniform(points).unwrap()
    }

    #[test]
    fn single_pair_path_realizes_the_point_cost() {
        let (m, n) = systems::double_integrator(1.0).unwrap();
        let flow = build_flow(&m, 256, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mu = DiscreteMeasure::uniform(vec![vecd(&[0.0, 0.0])]).unwrap();
        let nu = DiscreteMeasure::uniform(vec![vecd(&[1.0, 0.0])]).unwrap();
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();

        assert_eq!(ensemble.paths().len(), 1);
        let path = &ensemble.paths()[0];
        assert_eq!(path.trajectory[0], vecd(&[0.0, 0.0]));
        assert!((path.trajectory.last().unwrap() - vecd(&[1.0, 0.0])).norm() <= 1e-8);

        let report = dynamic_action(&ensemble, exps).unwrap();
        assert_relative_eq!(report.path_action, 12.0, epsilon = 1e-9);
        assert!(report.coincidences.is_empty());
        assert!(report.field_action.is_none());

        // The trapezoid-rule step check is independent of construction.
        assert!(ensemble.max_step_residual(&flow, &n).unwrap() <= DEFAULT_PATH_TOL);
    }

    #[test]
    fn zero_cost_pairing_gives_flow_trajectories() {
        let (m, n) = systems::rotation(1.0).unwrap();
        let flow = build_flow(&m, 64, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(1.5).unwrap();
        let opts = SolverOptions::default();
        let xs = vec![vecd(&[1.0, 0.0]), vecd(&[0.0, -1.0])];
        let ys: Vec<DVector<f64>> = xs.iter().map(|x| flow.end() * x).collect();
        let mu = DiscreteMeasure::uniform(xs.clone()).unwrap();
        let nu = DiscreteMeasure::uniform(ys).unwrap();
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();

        for path in ensemble.paths() {
            assert_eq!(path.source_index, path.target_index);
            for a in &path.controls {
                assert_eq!(a.norm(), 0.0);
            }
            for (k, state) in path.trajectory.iter().enumerate() {
                let free = flow.forward_at(k) * &xs[path.source_index];
                assert!((state - free).norm() <= 1e-10);
            }
        }
        let report = dynamic_action(&ensemble, exps).unwrap();
        assert_eq!(report.path_action, 0.0);
    }

    #[test]
    fn round_trip_reproduces_plan_entries_exactly() {
        let (m, n) = systems::euclidean(2, 1.0).unwrap();
        let flow = build_flow(&m, 64, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(3.0).unwrap();
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(501);
        let mu = uniform_random_measure(&mut rng, 4, 2);
        let nu = uniform_random_measure(&mut rng, 5, 2);
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();
        let recovered = ensemble_to_plan(&ensemble, exps).unwrap();

        assert_eq!(plan.entries.len(), recovered.entries.len());
        for (a, b) in plan.entries.iter().zip(&recovered.entries) {
            assert_eq!(a.i, b.i);
            assert_eq!(a.j, b.j);
            assert_eq!(a.mass.to_bits(), b.mass.to_bits());
        }
        // The recovered cost is the attained dynamic value.
        assert_relative_eq!(recovered.cost, plan.cost, epsilon = 1e-8 * (1.0 + plan.cost));
    }

    #[test]
    fn pushforward_is_order_free_and_crossing_paths_map_off_diagonal() {
        let (m, n) = systems::euclidean(1, 1.0).unwrap();
        let flow = build_flow(&m, 32, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mu = DiscreteMeasure::uniform(vec![vecd(&[-1.0]), vecd(&[1.0])]).unwrap();
        let nu = DiscreteMeasure::uniform(vec![vecd(&[-1.0]), vecd(&[1.0])]).unwrap();
        // Force the crossing pairing by hand: x1→y2, x2→y1.
        let plan = TransportPlan {
            entries: vec![
                PlanEntry { i: 0, j: 1, mass: 0.5 },
                PlanEntry { i: 1, j: 0, mass: 0.5 },
            ],
            cost: 4.0,
            iterations: 0,
            u: vec![0.0; 2],
            v: vec![0.0; 2],
            source_len: 2,
            target_len: 2,
        };
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();
        let recovered = ensemble_to_plan(&ensemble, exps).unwrap();
        assert_eq!(recovered.entries.len(), 2);
        assert!(recovered.entries.iter().all(|e| e.i != e.j));

        let mut reversed = ensemble.clone();
        reversed.paths.reverse();
        let recovered_reversed = ensemble_to_plan(&reversed, exps).unwrap();
        for (a, b) in recovered.entries.iter().zip(&recovered_reversed.entries) {
            assert_eq!((a.i, a.j), (b.i, b.j));
            assert_eq!(a.mass.to_bits(), b.mass.to_bits());
        }
    }

    #[test]
    fn crossing_straight_lines_trigger_coincidence_and_jensen_drop() {
        let (m, n) = systems::euclidean(1, 1.0).unwrap();
        let flow = build_flow(&m, 32, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mu = DiscreteMeasure::uniform(vec![vecd(&[-1.0]), vecd(&[1.0])]).unwrap();
        let nu = DiscreteMeasure::uniform(vec![vecd(&[-1.0]), vecd(&[1.0])]).unwrap();
        let plan = TransportPlan {
            entries: vec![
                PlanEntry { i: 0, j: 1, mass: 0.5 },
                PlanEntry { i: 1, j: 0, mass: 0.5 },
            ],
            cost: 4.0,
            iterations: 0,
            u: vec![0.0; 2],
            v: vec![0.0; 2],
            source_len: 2,
            target_len: 2,
        };
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();
        let report = dynamic_action(&ensemble, exps).unwrap();

        // The lines ±(2t−1) meet at the exact mid-grid node.
        assert!(!report.coincidences.is_empty());
        let event = report.coincidences[0];
        assert_eq!(event.time_index, 16);
        assert_relative_eq!(report.path_action, 4.0, epsilon = 1e-9);
        // Opposite controls average to zero at the meeting node.
        let field = report.field_action.unwrap();
        assert!(field < report.path_action - 1e-3);
    }

    #[test]
    fn action_matches_euclidean_plan_cost() {
        let (m, n) = systems::euclidean(2, 1.0).unwrap();
        let flow = build_flow(&m, 64, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(502);
        let mu = uniform_random_measure(&mut rng, 3, 2);
        let nu = uniform_random_measure(&mut rng, 3, 2);
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();
        let report = dynamic_action(&ensemble, exps).unwrap();
        assert!(report.coincidences.is_empty());
        assert!((report.path_action - plan.cost).abs() <= 1e-9 * (1.0 + plan.cost));

        let (_, oracle) = permutation_minimum(&costs).unwrap();
        assert!((plan.cost - oracle).abs() <= 1e-12);
    }

    #[test]
    fn battery_residuals_are_small_and_shrink_with_refinement() {
        let (m, n) = systems::double_integrator(1.0).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(503);
        let mu = uniform_random_measure(&mut rng, 3, 2);
        let nu = uniform_random_measure(&mut rng, 3, 2);

        let run = |steps: usize| -> Vec<f64> {
            let flow = build_flow(&m, steps, DEFAULT_FLOW_TOL).unwrap();
            let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
            let plan = solve_plan(&costs, &mu, &nu).unwrap();
            let ensemble =
                plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();
            let battery =
                default_battery(flow.dim(), flow.horizon(), ensemble.data_radius());
            let residuals = continuity_residual(&ensemble, &battery).unwrap();
            for (r, tf) in residuals.iter().zip(&battery) {
                assert!(
                    r.abs() <= DEFAULT_RESIDUAL_TOL * tf.c1_norm,
                    "residual {r:.3e} too large for '{}' at {steps} steps",
                    tf.label
                );
            }
            residuals
        };

        let coarse = run(1000);
        let fine = run(2000);
        for (c, f) in coarse.iter().zip(&fine) {
            // Refinement must shrink every residual that is above the
            // round-off floor by at least the rate criterion.
            if c.abs() > 1e-13 {
                assert!(
                    f.abs() * 8.0 <= c.abs() + 1e-15,
                    "residual did not shrink: {c:.3e} -> {f:.3e}"
                );
            }
        }
    }

    #[test]
    fn constant_test_function_is_rejected() {
        let (m, n) = systems::euclidean(1, 1.0).unwrap();
        let flow = build_flow(&m, 16, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mu = DiscreteMeasure::uniform(vec![vecd(&[0.0])]).unwrap();
        let nu = DiscreteMeasure::uniform(vec![vecd(&[1.0])]).unwrap();
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();

        let bad = TestFunction::new(
            "constant one",
            |_, _| 1.0,
            |_, _| 0.0,
            |_, x: &DVector<f64>| DVector::zeros(x.len()),
            1.0,
        );
        let err = continuity_residual(&ensemble, &[bad]);
        assert!(matches!(err, Err(Error::InvalidTestFunction(_))));

        let zero = TestFunction::new(
            "zero",
            |_, _| 0.0,
            |_, _| 0.0,
            |_, x: &DVector<f64>| DVector::zeros(x.len()),
            0.0,
        );
        let residuals = continuity_residual(&ensemble, &[zero]).unwrap();
        assert_eq!(residuals[0], 0.0);
    }

    #[test]
    fn equivalence_holds_on_euclidean_uniform_instances() {
        let (m, n) = systems::euclidean(2, 1.0).unwrap();
        let flow = build_flow(&m, 200, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(504);
        let mu = uniform_random_measure(&mut rng, 5, 2);
        let nu = uniform_random_measure(&mut rng, 5, 2);

        let report =
            verify_equivalence(&flow, &n, &mu, &nu, exps, &opts, 10, &mut rng).unwrap();
        assert!(report.equivalent, "gap {} tol {}", report.gap, report.gap_tol);
        assert!(report.residuals_ok);
        assert!(report.perturbations_ok);
        assert!(report.moment.ok);
        for s in &report.perturbations {
            assert!(s.endpoint_shift <= 1e-10);
            assert!(s.action >= report.static_cost - PERTURBATION_SLACK);
        }

        // Euclidean sanity: the static value is the brute-force W_p^p.
        let (_, oracle) = permutation_minimum(&report.costs).unwrap();
        assert!((report.static_cost - oracle).abs() <= 1e-12);
    }

    #[test]
    fn equivalence_on_point_masses_reduces_to_the_point_cost() {
        let (m, n) = systems::rotation(1.5).unwrap();
        let flow = build_flow(&m, 150, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(1.5).unwrap();
        let opts = SolverOptions::default();
        let x = vecd(&[0.3, -0.7]);
        let y = vecd(&[-0.2, 0.4]);
        let mu = DiscreteMeasure::uniform(vec![x.clone()]).unwrap();
        let nu = DiscreteMeasure::uniform(vec![y.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(505);

        let report =
            verify_equivalence(&flow, &n, &mu, &nu, exps, &opts, 5, &mut rng).unwrap();
        let point = solve_general_p(&flow, &n, &x, &y, exps, &opts).unwrap();
        assert_relative_eq!(report.static_cost, point.cost, epsilon = 1e-10);
        assert!(report.equivalent);
        assert!(report.perturbations_ok);
    }

    #[test]
    fn marginals_of_the_ensemble_match_the_measures() {
        let (m, n) = systems::euclidean(2, 1.0).unwrap();
        let flow = build_flow(&m, 64, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(2.0).unwrap();
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(506);
        let mu = uniform_random_measure(&mut rng, 4, 2);
        let nu = uniform_random_measure(&mut rng, 6, 2);
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();

        for (sum, w) in ensemble.source_marginal().iter().zip(mu.weights()) {
            assert!((sum - w).abs() <= MARGINAL_TOL);
        }
        for (sum, w) in ensemble.target_marginal().iter().zip(nu.weights()) {
            assert!((sum - w).abs() <= MARGINAL_TOL);
        }
        // Initial particles sit exactly on the source atoms.
        let rho0 = ensemble.measure_at(0).unwrap();
        for (path, point) in ensemble.paths().iter().zip(rho0.points()) {
            assert_eq!(point, mu.point(path.source_index));
        }
        assert_relative_eq!(ensemble.total_weight(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn moment_bound_reports_finite_constant() {
        let (m, n) = systems::double_integrator(1.0).unwrap();
        let flow = build_flow(&m, 64, DEFAULT_FLOW_TOL).unwrap();
        let exps = DualityExponents::new(3.0).unwrap();
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(507);
        let mu = uniform_random_measure(&mut rng, 3, 2);
        let nu = uniform_random_measure(&mut rng, 3, 2);
        let costs = cost_matrix(&flow, &n, &mu, &nu, exps, &opts).unwrap();
        let plan = solve_plan(&costs, &mu, &nu).unwrap();
        let ensemble = plan_to_ensemble(&plan, &mu, &nu, &flow, &n, exps, &opts).unwrap();
        let report = moment_bound(&ensemble, &flow, &n, &mu, &nu, exps).unwrap();
        assert!(report.constant.is_finite());
        assert!(report.sup_moment > 0.0);
        assert!(report.ok, "sup {} bound {}", report.sup_moment, report.bound);
    }
}
