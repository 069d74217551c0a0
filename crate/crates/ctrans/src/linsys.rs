//! Time-dependent system matrices and the state-transition flow.
//!
//! A linear control system on the horizon `[0, T]`,
//!
//! ```text
//! γ'(t) = M(t) γ(t) + N(t) α(t),
//! ```
//!
//! is described by two [`MatrixCurve`]s: the square drift `M` (d×d) and the
//! input matrix `N` (d×n). The homogeneous part induces the state-transition
//! flow `Φ(s,t)` mapping states at time `s` to states at time `t`; it solves
//!
//! ```text
//! d/dt Φ(s,t) = M(t) Φ(s,t),      d/ds Φ(s,t) = −Φ(s,t) M(s),      Φ(t,t) = id,
//! ```
//!
//! and obeys the composition law `Φ(τ,t) Φ(s,τ) = Φ(s,t)` together with the
//! growth bound `‖Φ(s,t)‖ ≤ exp(M₁ |t−s|)` where `M₁ = sup_t ‖M(t)‖`.
//! [`build_flow`] tabulates `Φ(0,t_k)` and `Φ(t_k,T)` on a uniform grid with
//! classical fixed-step fourth-order Runge–Kutta and verifies those laws
//! before returning a [`FlowMap`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative slack used when snapping time queries to the horizon or grid.
const TIME_SNAP: f64 = 1e-9;

/// Multiplicative slack allowed on the exponential growth bound check.
const GROWTH_SLACK: f64 = 1e-6;

/// How a [`MatrixCurve`] stores its time dependency.
#[derive(Debug, Clone)]
pub enum CurveForm {
    /// Constant matrix; all derivatives vanish.
    Constant(DMatrix<f64>),
    /// Per-entry polynomial in `t`; `coeffs[r][c]` lists coefficients in
    /// ascending powers. Derivatives of every order are exact.
    Polynomial(Vec<Vec<Vec<f64>>>),
    /// Uniform samples with spacing `dt`; values are interpolated with a
    /// piecewise cubic. Only first derivatives (centred differences) are
    /// available — higher orders cannot be certified from samples.
    Sampled { dt: f64, values: Vec<DMatrix<f64>> },
}

impl CurveForm {
    fn name(&self) -> &'static str {
        match self {
            CurveForm::Constant(_) => "constant",
            CurveForm::Polynomial(_) => "polynomial",
            CurveForm::Sampled { .. } => "sampled",
        }
    }
}

/// A matrix-valued curve `t ↦ A(t)` on a horizon `[0, T]` with derivative
/// queries, used for both the drift `M(t)` and the input matrix `N(t)`.
#[derive(Debug, Clone)]
pub struct MatrixCurve {
    rows: usize,
    cols: usize,
    horizon: f64,
    form: CurveForm,
    /// Centred-difference first derivatives at the sample nodes
    /// (sampled form only).
    sampled_deriv: Option<Vec<DMatrix<f64>>>,
}

impl MatrixCurve {
    /// Constant curve `A(t) ≡ value`.
    pub fn constant(value: DMatrix<f64>, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if value.is_empty() {
            return Err(Error::Shape("empty constant matrix".into()));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Self {
            rows: value.nrows(),
            cols: value.ncols(),
            horizon,
            form: CurveForm::Constant(value),
            sampled_deriv: None,
        })
    }

    /// Zero curve of the given shape.
    pub fn zeros(rows: usize, cols: usize, horizon: f64) -> Result<Self> {
        Self::constant(DMatrix::zeros(rows, cols), horizon)
    }

    /// Constant identity curve of dimension `d`.
    pub fn identity(d: usize, horizon: f64) -> Result<Self> {
        Self::constant(DMatrix::identity(d, d), horizon)
    }

    /// Polynomial curve; `coeffs[r][c]` holds the entry's coefficients in
    /// ascending powers of `t` (an empty list means the entry is zero).
    pub fn polynomial(coeffs: Vec<Vec<Vec<f64>>>, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        let rows = coeffs.len();
        if rows == 0 {
            return Err(Error::Shape("polynomial curve with zero rows".into()));
        }
        let cols = coeffs[0].len();
        if cols == 0 {
            return Err(Error::Shape("polynomial curve with zero columns".into()));
        }
        for (r, row) in coeffs.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "polynomial row {r} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            for entry in row {
                if !entry.iter().all(|c| c.is_finite()) {
                    return Err(Error::InvalidInput("non-finite polynomial coefficient".into()));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            horizon,
            form: CurveForm::Polynomial(coeffs),
            sampled_deriv: None,
        })
    }

    /// Sampled curve on the uniform grid `0, dt, 2·dt, …`; the horizon is
    /// `(values.len() − 1) · dt`. At least two samples are required.
    pub fn sampled(dt: f64, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("sample spacing must be positive, got {dt}")));
        }
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sampled curve needs at least 2 samples, got {}",
                values.len()
            )));
        }
        let rows = values[0].nrows();
        let cols = values[0].ncols();
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("empty sample matrix".into()));
        }
        for (k, v) in values.iter().enumerate() {
            if v.nrows() != rows || v.ncols() != cols {
                return Err(Error::Shape(format!(
                    "sample {k} is {}x{}, expected {rows}x{cols}",
                    v.nrows(),
                    v.ncols()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite entry in sample {k}")));
            }
        }
        let horizon = dt * (values.len() - 1) as f64;
        let sampled_deriv = Some(centred_differences(&values, dt));
        Ok(Self {
            rows,
            cols,
            horizon,
            form: CurveForm::Sampled { dt, values },
            sampled_deriv,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn form(&self) -> &CurveForm {
        &self.form
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Highest derivative order this curve can certify exactly
    /// (`usize::MAX` stands for every order).
    pub fn max_derivative_order(&self) -> usize {
        match self.form {
            CurveForm::Constant(_) | CurveForm::Polynomial(_) => usize::MAX,
            CurveForm::Sampled { .. } => 1,
        }
    }

    /// Value (`order = 0`) or `order`-th time derivative of the curve at `t`.
    pub fn eval(&self, t: f64, order: usize) -> Result<DMatrix<f64>> {
        let t = clamp_time(t, self.horizon)?;
        match &self.form {
            CurveForm::Constant(value) => Ok(if order == 0 {
                value.clone()
            } else {
                DMatrix::zeros(self.rows, self.cols)
            }),
            CurveForm::Polynomial(coeffs) => {
                let mut out = DMatrix::zeros(self.rows, self.cols);
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        out[(r, c)] = poly_derivative(&coeffs[r][c], t, order);
                    }
                }
                Ok(out)
            }
            CurveForm::Sampled { dt, values } => match order {
                0 => Ok(interpolate_uniform(values, *dt, t)),
                1 => {
                    let table = self.sampled_deriv.as_ref().expect("built in constructor");
                    Ok(interpolate_uniform(table, *dt, t))
                }
                _ => Err(Error::UnsupportedDerivative {
                    order,
                    form: self.form.name(),
                }),
            },
        }
    }

    /// Largest spectral norm of the curve over a uniform sampling of
    /// `samples + 1` points on the horizon.
    pub fn sup_spectral_norm(&self, samples: usize) -> f64 {
        let n = samples.max(1);
        (0..=n)
            .map(|k| {
                let t = self.horizon * k as f64 / n as f64;
                self.eval(t, 0).map(|m| spectral_norm(&m)).unwrap_or(0.0)
            })
            .fold(0.0, f64::max)
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidInput(format!(
            "horizon must be a nonnegative real, got {horizon}"
        )));
    }
    Ok(())
}

/// Snap `t` onto `[0, horizon]` if it is within round-off, otherwise reject.
fn clamp_time(t: f64, horizon: f64) -> Result<f64> {
    let slack = TIME_SNAP * (1.0 + horizon.abs());
    if t < -slack || t > horizon + slack {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    Ok(t.clamp(0.0, horizon))
}

/// `order`-th derivative of a polynomial with ascending coefficients at `t`.
fn poly_derivative(coeffs: &[f64], t: f64, order: usize) -> f64 {
    let mut acc = 0.0;
    for (k, &c) in coeffs.iter().enumerate().skip(order) {
        // falling factorial k·(k−1)···(k−order+1)
        let mut fact = 1.0;
        for j in 0..order {
            fact *= (k - j) as f64;
        }
        acc += c * fact * t.powi((k - order) as i32);
    }
    acc
}

/// Centred first differences on a uniform table, second-order one-sided at
/// the ends (first-order when only two samples exist).
fn centred_differences(values: &[DMatrix<f64>], dt: f64) -> Vec<DMatrix<f64>> {
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    if n == 2 {
        let d = (&values[1] - &values[0]) / dt;
        return vec![d.clone(), d];
    }
    for k in 0..n {
        let d = if k == 0 {
            (-3.0 * &values[0] + 4.0 * &values[1] - &values[2]) / (2.0 * dt)
        } else if k == n - 1 {
            (3.0 * &values[n - 1] - 4.0 * &values[n - 2] + &values[n - 3]) / (2.0 * dt)
        } else {
            (&values[k + 1] - &values[k - 1]) / (2.0 * dt)
        };
        out.push(d);
    }
    out
}

/// Interpolate a uniformly tabulated matrix function at `t`.
///
/// Exact at the nodes; piecewise Lagrange cubic (quadratic or linear when
/// the table is too short) in between.
pub(crate) fn interpolate_uniform(table: &[DMatrix<f64>], dt: f64, t: f64) -> DMatrix<f64> {
    let n = table.len();
    let u = t / dt;
    let nearest = u.round();
    if (u - nearest).abs() <= TIME_SNAP && (nearest as usize) < n {
        return table[nearest as usize].clone();
    }
    if n == 2 {
        let s = u.clamp(0.0, 1.0);
        return &table[0] * (1.0 - s) + &table[1] * s;
    }
    if n == 3 {
        let s = u.clamp(0.0, 2.0);
        let w0 = (s - 1.0) * (s - 2.0) / 2.0;
        let w1 = -s * (s - 2.0);
        let w2 = s * (s - 1.0) / 2.0;
        return &table[0] * w0 + &table[1] * w1 + &table[2] * w2;
    }
    // Four-point window j..j+3 around the query, clamped to the table.
    let cell = (u.floor() as isize).clamp(0, n as isize - 2) as usize;
    let j = cell.saturating_sub(1).min(n - 4);
    let s = u - j as f64;
    let w0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0;
    let w1 = s * (s - 2.0) * (s - 3.0) / 2.0;
    let w2 = -s * (s - 1.0) * (s - 3.0) / 2.0;
    let w3 = s * (s - 1.0) * (s - 2.0) / 6.0;
    &table[j] * w0 + &table[j + 1] * w1 + &table[j + 2] * w2 + &table[j + 3] * w3
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn symmetric_min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// The state-transition flow of `γ' = M(t) γ`, tabulated on a uniform grid.
#[derive(Debug, Clone)]
pub struct FlowMap {
    dim: usize,
    grid: Vec<f64>,
    /// `forward[k] = Φ(0, t_k)`
    forward: Vec<DMatrix<f64>>,
    /// `backward[k] = Φ(t_k, T)`
    backward: Vec<DMatrix<f64>>,
    /// `Φ(0, T)`
    end: DMatrix<f64>,
    /// `drift[k] = M(t_k)`, kept so downstream consumers can form the
    /// vector field `M(t)γ + N(t)α` without re-evaluating the curve.
    drift: Vec<DMatrix<f64>>,
    /// Sampled bound `M₁ = sup_t ‖M(t)‖` (spectral norm).
    op_norm_bound_m1: f64,
    flow_tol: f64,
}

/// Default number of grid steps for flow construction.
pub const DEFAULT_GRID_STEPS: usize = 1000;

/// Default Frobenius-norm tolerance for the flow consistency checks.
pub const DEFAULT_FLOW_TOL: f64 = 1e-8;

/// Integrate the state-transition flow of `M` on a uniform grid with
/// `grid_steps` intervals (even, ≥ 2) using classical fixed-step RK4, both
/// forward from the identity (`Φ(0,t)`) and backward from the identity
/// (`Φ(s,T)`), then verify the composition law `Φ(t_k,T) Φ(0,t_k) = Φ(0,T)`
/// within `flow_tol` and the exponential growth bound.
pub fn build_flow(m: &MatrixCurve, grid_steps: usize, flow_tol: f64) -> Result<FlowMap> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if grid_steps < 2 || grid_steps % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "grid steps must be even and at least 2, got {grid_steps}"
        )));
    }
    if !(flow_tol > 0.0) {
        return Err(Error::InvalidInput(format!("flow tolerance must be positive, got {flow_tol}")));
    }
    let d = m.rows();
    let horizon = m.horizon();
    let k_steps = grid_steps;
    let h = horizon / k_steps as f64;
    let grid: Vec<f64> = (0..=k_steps).map(|k| k as f64 * h).collect();

    // Drift values at nodes and midpoints: evals[2k] = M(t_k), evals[2k+1] = M(t_k + h/2).
    let mut evals = Vec::with_capacity(2 * k_steps + 1);
    for k in 0..k_steps {
        evals.push(m.eval(grid[k], 0)?);
        evals.push(m.eval(grid[k] + 0.5 * h, 0)?);
    }
    evals.push(m.eval(grid[k_steps], 0)?);

    // Sampled sup-norm bound for the growth check, refined with quarter points.
    let mut m1 = evals.iter().map(spectral_norm).fold(0.0, f64::max);
    for k in 0..k_steps {
        for frac in [0.25, 0.75] {
            m1 = m1.max(spectral_norm(&m.eval(grid[k] + frac * h, 0)?));
        }
    }

    // Forward sweep: dΦ/dt = M(t) Φ, Φ(0,0) = id.
    let mut forward = Vec::with_capacity(k_steps + 1);
    forward.push(DMatrix::identity(d, d));
    for k in 0..k_steps {
        let m0 = &evals[2 * k];
        let mh = &evals[2 * k + 1];
        let m1m = &evals[2 * k + 2];
        let phi = &forward[k];
        let k1 = m0 * phi;
        let k2 = mh * &(phi + 0.5 * h * &k1);
        let k3 = mh * &(phi + 0.5 * h * &k2);
        let k4 = m1m * &(phi + h * &k3);
        forward.push(phi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
    }

    // Backward sweep: dΨ/ds = −Ψ M(s), Ψ(T) = id, integrated from s = T down.
    let mut backward = vec![DMatrix::identity(d, d); k_steps + 1];
    for k in (0..k_steps).rev() {
        let m_right = &evals[2 * k + 2];
        let mh = &evals[2 * k + 1];
        let m_left = &evals[2 * k];
        let psi = &backward[k + 1];
        let step = -h;
        let k1 = -(psi * m_right);
        let k2 = -(&(psi + 0.5 * step * &k1) * mh);
        let k3 = -(&(psi + 0.5 * step * &k2) * mh);
        let k4 = -(&(psi + step * &k3) * m_left);
        backward[k] = psi + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }

    let end = forward[k_steps].clone();

    // Composition-law consistency: Φ(t_k,T) Φ(0,t_k) = Φ(0,T) at every node.
    for k in 0..=k_steps {
        let residual = (&backward[k] * &forward[k] - &end).norm();
        if residual > flow_tol {
            return Err(Error::FlowAccuracy {
                residual,
                tol: flow_tol,
                index: k,
            });
        }
    }

    // Growth bound ‖Φ‖ ≤ exp(M₁ |t−s|), checked on the tabulated families.
    for k in 0..=k_steps {
        let fwd_bound = (m1 * grid[k]).exp() * (1.0 + GROWTH_SLACK);
        let bwd_bound = (m1 * (horizon - grid[k])).exp() * (1.0 + GROWTH_SLACK);
        let fwd = spectral_norm(&forward[k]);
        let bwd = spectral_norm(&backward[k]);
        if fwd > fwd_bound || bwd > bwd_bound {
            return Err(Error::FlowAccuracy {
                residual: fwd.max(bwd),
                tol: fwd_bound.min(bwd_bound),
                index: k,
            });
        }
    }

    let drift = (0..=k_steps).map(|k| evals[2 * k].clone()).collect();

    Ok(FlowMap {
        dim: d,
        grid,
        forward,
        backward,
        end,
        drift,
        op_norm_bound_m1: m1,
        flow_tol,
    })
}

impl FlowMap {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Grid nodes `0 = t_0 < … < t_K = T`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Number of grid intervals `K`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    /// Uniform step `h = T / K`.
    pub fn step(&self) -> f64 {
        if self.grid.len() > 1 {
            self.grid[1] - self.grid[0]
        } else {
            0.0
        }
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }

    /// `Φ(0, t_k)`.
    pub fn forward_at(&self, k: usize) -> &DMatrix<f64> {
        &self.forward[k]
    }

    /// `Φ(t_k, T)`.
    pub fn backward_at(&self, k: usize) -> &DMatrix<f64> {
        &self.backward[k]
    }

    /// `Φ(0, T)`.
    pub fn end(&self) -> &DMatrix<f64> {
        &self.end
    }

    /// Sampled bound `M₁ = sup_t ‖M(t)‖`.
    pub fn op_norm_bound_m1(&self) -> f64 {
        self.op_norm_bound_m1
    }

    pub fn flow_tol(&self) -> f64 {
        self.flow_tol
    }

    /// Largest spectral norm among the tabulated `Φ(t_k, T)`.
    pub fn sup_backward_norm(&self) -> f64 {
        self.backward.iter().map(spectral_norm).fold(0.0, f64::max)
    }

    /// `M(t_k)`.
    pub fn drift_at(&self, k: usize) -> &DMatrix<f64> {
        &self.drift[k]
    }

    /// Sampled two-parameter norm `sup_{s,t} ‖Φ(s, t)‖` over an
    /// approximately `samples × samples` subgrid of node pairs (both time
    /// orders).  The tabulated one-parameter families are always included,
    /// so the result is at least `max(sup_k ‖Φ(0,t_k)‖, sup_k ‖Φ(t_k,T)‖)`
    /// and at least 1 (from `Φ(t,t) = I`).
    pub fn sup_flow_norm(&self, samples: usize) -> Result<f64> {
        let mut sup = self
            .forward
            .iter()
            .chain(self.backward.iter())
            .map(spectral_norm)
            .fold(1.0_f64, f64::max);
        let k_steps = self.steps();
        let stride = (k_steps / samples.max(1)).max(1);
        let nodes: Vec<f64> = (0..=k_steps)
            .step_by(stride)
            .chain(std::iter::once(k_steps))
            .map(|k| self.grid[k])
            .collect();
        for &s in &nodes {
            for &t in &nodes {
                sup = sup.max(spectral_norm(&self.flow_at(s, t)?));
            }
        }
        Ok(sup)
    }

    /// `Φ(0, t)` — exact at grid nodes, piecewise cubic in between.
    pub fn forward_interp(&self, t: f64) -> Result<DMatrix<f64>> {
        let t = clamp_time(t, self.horizon())?;
        Ok(interpolate_uniform(&self.forward, self.step(), t))
    }

    /// `Φ(t, T)` — exact at grid nodes, piecewise cubic in between.
    pub fn backward_interp(&self, t: f64) -> Result<DMatrix<f64>> {
        let t = clamp_time(t, self.horizon())?;
        Ok(interpolate_uniform(&self.backward, self.step(), t))
    }

    /// `Φ(s, t)` for arbitrary `s, t ∈ [0, T]`, assembled as
    /// `Φ(0,t) · Φ(0,s)⁻¹`; exact at grid nodes up to the flow tolerance.
    pub fn flow_at(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        let s = clamp_time(s, self.horizon())?;
        let t = clamp_time(t, self.horizon())?;
        let a = interpolate_uniform(&self.forward, self.step(), t);
        if s == 0.0 {
            return Ok(a);
        }
        let b = interpolate_uniform(&self.forward, self.step(), s);
        // A · B⁻¹ computed as (B⁻ᵀ Aᵀ)ᵀ through one LU factorization.
        let solved = b
            .transpose()
            .lu()
            .solve(&a.transpose())
            .ok_or_else(|| Error::Singular(format!("Φ(0,{s}) is not invertible")))?;
        Ok(solved.transpose())
    }
}

/// Steering kernels `B_k = Φ(t_k, T) N(t_k)` on the flow grid.
///
/// These are the integrands shared by the end-point map, the controllability
/// Gramian, and every control-cost quadrature.
pub fn steering_samples(flow: &FlowMap, n: &MatrixCurve) -> Result<Vec<DMatrix<f64>>> {
    check_same_horizon(flow, n)?;
    if n.rows() != flow.dim() {
        return Err(Error::Shape(format!(
            "input matrix has {} rows, system dimension is {}",
            n.rows(),
            flow.dim()
        )));
    }
    flow.grid()
        .iter()
        .enumerate()
        .map(|(k, &t)| Ok(flow.backward_at(k) * n.eval(t, 0)?))
        .collect()
}

/// Steering kernel `Φ(t, T) N(t)` at an arbitrary time.
pub fn steering_at(flow: &FlowMap, n: &MatrixCurve, t: f64) -> Result<DMatrix<f64>> {
    Ok(flow.backward_interp(t)? * n.eval(t, 0)?)
}

pub(crate) fn check_same_horizon(flow: &FlowMap, curve: &MatrixCurve) -> Result<()> {
    let t_flow = flow.horizon();
    let t_curve = curve.horizon();
    if (t_flow - t_curve).abs() > TIME_SNAP * (1.0 + t_flow.abs()) {
        return Err(Error::GridMismatch(format!(
            "flow horizon {t_flow} differs from curve horizon {t_curve}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation_curve(horizon: f64) -> MatrixCurve {
        MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), horizon)
            .unwrap()
    }

    fn rotation_closed_form(t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()])
    }

    #[test]
    fn constant_curve_eval_and_derivatives() {
        let m = MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), 1.0)
            .unwrap();
        assert_eq!(m.eval(0.3, 0).unwrap(), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(m.eval(0.3, 1).unwrap(), DMatrix::zeros(2, 2));
        assert_eq!(m.eval(0.3, 7).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn polynomial_derivatives_are_exact() {
        // M(t) = [[t]]: first derivative 1 everywhere.
        let m = MatrixCurve::polynomial(vec![vec![vec![0.0, 1.0]]], 2.0).unwrap();
        assert_abs_diff_eq!(m.eval(2.0, 1).unwrap()[(0, 0)], 1.0);
        // N(t) = [[t², 1]]: second derivative (2, 0).
        let n = MatrixCurve::polynomial(vec![vec![vec![0.0, 0.0, 1.0], vec![1.0]]], 1.0).unwrap();
        let d2 = n.eval(0.5, 2).unwrap();
        assert_abs_diff_eq!(d2[(0, 0)], 2.0);
        assert_abs_diff_eq!(d2[(0, 1)], 0.0);
        // Third derivative of t² vanishes.
        assert_abs_diff_eq!(n.eval(0.5, 3).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn time_outside_horizon_rejected() {
        let m = MatrixCurve::identity(2, 1.0).unwrap();
        assert!(matches!(m.eval(1.5, 0), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(m.eval(-0.1, 0), Err(Error::TimeOutOfRange { .. })));
        // Round-off snaps are allowed.
        assert!(m.eval(1.0 + 1e-13, 0).is_ok());
    }

    #[test]
    fn sampled_curve_interpolates_and_limits_derivatives() {
        // Samples of A(t) = [[t³]] on a fine grid; cubic interpolation is exact.
        let dt = 0.05;
        let values: Vec<DMatrix<f64>> = (0..=20)
            .map(|k| DMatrix::from_row_slice(1, 1, &[(k as f64 * dt).powi(3)]))
            .collect();
        let a = MatrixCurve::sampled(dt, values).unwrap();
        assert_abs_diff_eq!(a.horizon(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.eval(0.512, 0).unwrap()[(0, 0)], 0.512f64.powi(3), epsilon = 1e-12);
        // Centred differences are second order: h² error on t³ is 4·h²·t·… modest.
        let d = a.eval(0.5, 1).unwrap()[(0, 0)];
        assert_abs_diff_eq!(d, 3.0 * 0.25, epsilon = 1e-2);
        assert!(matches!(
            a.eval(0.5, 2),
            Err(Error::UnsupportedDerivative { order: 2, .. })
        ));
    }

    #[test]
    fn nilpotent_flow_matches_matrix_exponential() {
        let m = MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), 1.0)
            .unwrap();
        let flow = build_flow(&m, 100, DEFAULT_FLOW_TOL).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((flow.end() - &expected).norm() < 1e-10);
    }

    #[test]
    fn zero_drift_flow_is_identity_everywhere() {
        let m = MatrixCurve::zeros(3, 3, 2.0).unwrap();
        let flow = build_flow(&m, 50, DEFAULT_FLOW_TOL).unwrap();
        for k in 0..=flow.steps() {
            assert!((flow.forward_at(k) - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);
        }
        let phi = flow.flow_at(0.3, 1.7).unwrap();
        assert!((phi - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn rotation_flow_matches_closed_form() {
        let horizon = std::f64::consts::FRAC_PI_2;
        let flow = build_flow(&rotation_curve(horizon), 1000, DEFAULT_FLOW_TOL).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((flow.end() - &expected).norm() < 1e-8);
        // Interior grid point.
        let k = 400;
        let t = flow.grid()[k];
        assert!((flow.forward_at(k) - rotation_closed_form(t)).norm() < 1e-10);
    }

    #[test]
    fn commuting_time_varying_flow_matches_closed_form() {
        // M(t) = t · J with J the rotation generator commutes with itself at
        // all times; Φ(0,t) is the rotation by ∫₀ᵗ s ds = t²/2.
        let coeffs = vec![
            vec![vec![], vec![0.0, 1.0]],
            vec![vec![0.0, -1.0], vec![]],
        ];
        let m = MatrixCurve::polynomial(coeffs, 1.5).unwrap();
        let flow = build_flow(&m, 600, DEFAULT_FLOW_TOL).unwrap();
        let angle = 1.5f64 * 1.5 / 2.0;
        assert!((flow.end() - rotation_closed_form(angle)).norm() < 1e-9);
    }

    #[test]
    fn flow_at_identity_and_inverse_pair() {
        let flow = build_flow(&rotation_curve(1.0), 200, DEFAULT_FLOW_TOL).unwrap();
        let t = flow.grid()[77];
        assert!((flow.flow_at(t, t).unwrap() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
        let ab = flow.flow_at(0.0, 1.0).unwrap() * flow.flow_at(1.0, 0.0).unwrap();
        assert!((ab - DMatrix::<f64>::identity(2, 2)).norm() < 10.0 * DEFAULT_FLOW_TOL);
    }

    #[test]
    fn double_integrator_flow_between_interior_times() {
        let m = MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), 1.0)
            .unwrap();
        let flow = build_flow(&m, 100, DEFAULT_FLOW_TOL).unwrap();
        let phi = flow.flow_at(0.25, 0.75).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!((phi - expected).norm() < 1e-9);
    }

    #[test]
    fn semigroup_property_on_random_grid_triples() {
        let flow = build_flow(&rotation_curve(2.0), 400, DEFAULT_FLOW_TOL).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut idx = [0usize; 3];
            for i in &mut idx {
                *i = rng.random_range(0..=flow.steps());
            }
            idx.sort_unstable();
            let [a, b, c] = idx.map(|k| flow.grid()[k]);
            let lhs = flow.flow_at(b, c).unwrap() * flow.flow_at(a, b).unwrap();
            let rhs = flow.flow_at(a, c).unwrap();
            assert!(
                (lhs - rhs).norm() <= 10.0 * DEFAULT_FLOW_TOL,
                "semigroup violated at grid times ({a}, {b}, {c})"
            );
        }
    }

    #[test]
    fn rk4_error_drops_by_at_least_twelve_per_halving() {
        let horizon = std::f64::consts::FRAC_PI_2;
        let exact = rotation_closed_form(horizon);
        let err = |steps: usize| {
            let flow = build_flow(&rotation_curve(horizon), steps, 1e-3).unwrap();
            (flow.end() - &exact).norm()
        };
        let e1 = err(50);
        let e2 = err(100);
        assert!(e1 / e2 >= 12.0, "RK4 halving ratio {} below 12", e1 / e2);
    }

    #[test]
    fn growth_bound_holds_on_tabulated_flow() {
        let flow = build_flow(&rotation_curve(3.0), 300, DEFAULT_FLOW_TOL).unwrap();
        let m1 = flow.op_norm_bound_m1();
        assert_abs_diff_eq!(m1, 1.0, epsilon = 1e-12);
        for k in 0..=flow.steps() {
            let bound = (m1 * flow.grid()[k]).exp() * (1.0 + 1e-6);
            assert!(spectral_norm(flow.forward_at(k)) <= bound);
        }
    }

    #[test]
    fn off_grid_interpolation_is_fourth_order_accurate() {
        let horizon = 1.0;
        let flow = build_flow(&rotation_curve(horizon), 100, DEFAULT_FLOW_TOL).unwrap();
        let t = 0.123456;
        let interp = flow.forward_interp(t).unwrap();
        assert!((interp - rotation_closed_form(t)).norm() < 1e-8);
    }

    #[test]
    fn odd_or_tiny_grid_rejected() {
        assert!(build_flow(&rotation_curve(1.0), 3, DEFAULT_FLOW_TOL).is_err());
        assert!(build_flow(&rotation_curve(1.0), 0, DEFAULT_FLOW_TOL).is_err());
    }

    #[test]
    fn non_square_drift_rejected() {
        let m = MatrixCurve::zeros(2, 1, 1.0).unwrap();
        assert!(matches!(
            build_flow(&m, 10, DEFAULT_FLOW_TOL),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn steering_samples_shape_and_values() {
        let m = MatrixCurve::zeros(2, 2, 1.0).unwrap();
        let n = MatrixCurve::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), 1.0).unwrap();
        let flow = build_flow(&m, 10, DEFAULT_FLOW_TOL).unwrap();
        let b = steering_samples(&flow, &n).unwrap();
        assert_eq!(b.len(), 11);
        for bk in &b {
            assert!((bk - DMatrix::from_row_slice(2, 1, &[0.0, 1.0])).norm() < 1e-14);
        }
    }
}
