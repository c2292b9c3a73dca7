use nalgebra::DMatrix;

use super::{design_matrix, fit_with_design, targets, EquationKind, FitReport, SparseModel};
use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::library::{enumerate_monomials, LibrarySpec, Symbol};
use crate::regression::{fit_all, SolverConfig};

/// Polynomial library of degree `d` over current states and their values at
/// fixed lags (non-positive; zero lags are skipped).
pub fn bb_library(n_states: usize, lags: &[f64], degree: u32) -> Result<LibrarySpec> {
    let mut symbols: Vec<Symbol> = (0..n_states).map(Symbol::Current).collect();
    for &lag in lags {
        if lag > 0.0 || !lag.is_finite() {
            return Err(Error::InvalidAtom(format!("lag {lag} must be non-positive")));
        }
        if lag < 0.0 {
            symbols.extend((0..n_states).map(|j| Symbol::Lagged(j, lag)));
        }
    }
    LibrarySpec::new(Vec::new(), enumerate_monomials(&symbols, degree))
}

/// Black-box baseline: `x'(t) ≈ Θ(x(t), x(t+σ_1), …, x(t+σ_K)) Ξ` with no
/// quadrature weighting and no σ-dependent atoms.
pub fn bb_sindy(
    traj: &Trajectory,
    lags: &[f64],
    degree: u32,
    solver: &SolverConfig,
) -> Result<(SparseModel, FitReport)> {
    let spec = bb_library(traj.n_states(), lags, degree)?;
    let kinds = vec![EquationKind::Dide; traj.n_states()];
    let (y, source) = targets(traj, &kinds)?;
    let lib = design_matrix(traj, &spec, None)?;
    fit_with_design(lib, &y, &kinds, spec, None, solver, source)
}

fn is_uniform(times: &[f64]) -> bool {
    let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    times.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1.0))
}

/// Integral SINDy for ODEs: regress `x(t_i) − x(t_0)` on left-rectangle
/// cumulative sums `h Σ_{k<i} Θ(x(t_k))` of a degree-`d` polynomial library.
///
/// Non-uniform samples are first resampled by linear interpolation onto a
/// uniform grid with the same number of points.
pub fn integral_sindy_ode(traj: &Trajectory, degree: u32, solver: &SolverConfig) -> Result<(SparseModel, FitReport)> {
    let m = traj.len();
    if m < 2 {
        return Err(Error::InvalidTrajectory("integral SINDy needs at least two samples".into()));
    }
    let n = traj.n_states();
    let times = traj.times();
    let states = if is_uniform(times) {
        traj.states().clone()
    } else {
        let (t0, t1) = (times[0], times[m - 1]);
        let mut out = DMatrix::zeros(m, n);
        let mut buf = vec![0.0; n];
        for i in 0..m {
            let t = t0 + (t1 - t0) * i as f64 / (m - 1) as f64;
            traj.value_at(t, &mut buf);
            out.row_mut(i).copy_from_slice(&buf);
        }
        out
    };
    let h = (times[m - 1] - times[0]) / (m - 1) as f64;
    let symbols: Vec<Symbol> = (0..n).map(Symbol::Current).collect();
    let spec = LibrarySpec::new(Vec::new(), enumerate_monomials(&symbols, degree))?;
    let uniform = Trajectory::new(
        (0..m).map(|i| times[0] + h * i as f64).collect(),
        states.clone(),
    )?;
    let theta = design_matrix(&uniform, &spec, None)?.matrix;
    let p = theta.ncols();
    let mut cumulative = DMatrix::zeros(m - 1, p);
    let mut acc = vec![0.0; p];
    for i in 1..m {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += h * theta[(i - 1, c)];
        }
        cumulative.row_mut(i - 1).copy_from_slice(&acc);
    }
    let target = DMatrix::from_fn(m - 1, n, |i, j| states[(i + 1, j)] - states[(0, j)]);
    let fit = fit_all(&cumulative, &target, solver)?;
    let residual = &target - &cumulative * &fit.xi;
    let rows = residual.nrows() as f64;
    let rmse = residual.column_iter().map(|c| (c.norm_squared() / rows).sqrt()).collect();
    let warnings = fit
        .columns
        .iter()
        .enumerate()
        .flat_map(|(j, c)| c.warnings.iter().map(move |w| (j, w.clone())))
        .collect();
    let mut row_mask = vec![true; m];
    row_mask[0] = false;
    let model = SparseModel::new(spec, fit.xi, vec![EquationKind::Dide; n], None)?;
    Ok((model, FitReport { rmse, row_mask, derivative_source: None, warnings }))
}
