//! Ready-made example systems used by the test suite, the benchmarks, and
//! the command-line examples.

use nalgebra::DMatrix;
use rand::{Rng, RngExt};

use crate::error::Result;
use crate::linsys::MatrixCurve;

/// Trivial dynamics `M = 0`, `N = I_d`: the cost reduces to the plain
/// Euclidean expression `c_p(x,y) = |y−x|ᵖ / T^{p−1}`.
pub fn euclidean(d: usize, horizon: f64) -> Result<(MatrixCurve, MatrixCurve)> {
    Ok((
        MatrixCurve::zeros(d, d, horizon)?,
        MatrixCurve::identity(d, horizon)?,
    ))
}

/// The double integrator: position–velocity dynamics with scalar force input,
/// `M = [[0,1],[0,0]]`, `N = (0,1)ᵀ`.
pub fn double_integrator(horizon: f64) -> Result<(MatrixCurve, MatrixCurve)> {
    Ok((
        MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), horizon)?,
        MatrixCurve::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), horizon)?,
    ))
}

/// Harmonic rotation with full actuation: `M = [[0,1],[−1,0]]`, `N = I₂`.
pub fn rotation(horizon: f64) -> Result<(MatrixCurve, MatrixCurve)> {
    Ok((
        MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), horizon)?,
        MatrixCurve::identity(2, horizon)?,
    ))
}

/// Harmonic rotation driven through the second coordinate only:
/// `M = [[0,1],[−1,0]]`, `N = (0,1)ᵀ`.
pub fn rotation_single_input(horizon: f64) -> Result<(MatrixCurve, MatrixCurve)> {
    Ok((
        MatrixCurve::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), horizon)?,
        MatrixCurve::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), horizon)?,
    ))
}

/// A commuting time-varying drift `M(t) = t·J` (J the rotation generator)
/// with full actuation; the flow is the rotation by `t²/2`.
pub fn scaled_rotation(horizon: f64) -> Result<(MatrixCurve, MatrixCurve)> {
    let coeffs = vec![
        vec![vec![], vec![0.0, 1.0]],
        vec![vec![0.0, -1.0], vec![]],
    ];
    Ok((
        MatrixCurve::polynomial(coeffs, horizon)?,
        MatrixCurve::identity(2, horizon)?,
    ))
}

/// A constant pair `(M, N)` with entries drawn uniformly from `[−1, 1]`.
pub fn random_constant_pair(
    rng: &mut impl Rng,
    d: usize,
    n: usize,
    horizon: f64,
) -> Result<(MatrixCurve, MatrixCurve)> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..=1.0));
    let b = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..=1.0));
    Ok((
        MatrixCurve::constant(m, horizon)?,
        MatrixCurve::constant(b, horizon)?,
    ))
}
