//! Sparse regression: sequential thresholded least squares and LASSO.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Stls,
    Lasso,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Stls => "stls",
            Solver::Lasso => "lasso",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stls" => Ok(Solver::Stls),
            "lasso" => Ok(Solver::Lasso),
            other => Err(Error::Config(format!("unknown solver `{other}` (expected stls|lasso)"))),
        }
    }
}

/// Solver selection and hyperparameters. `lambda` is the hard threshold for
/// STLS and the ℓ₁ weight for LASSO.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub solver: Solver,
    pub lambda: f64,
    pub max_iters: usize,
    pub normalize_columns: bool,
    pub lasso_tol: f64,
    pub lasso_max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Stls,
            lambda: 1e-2,
            max_iters: 25,
            normalize_columns: true,
            lasso_tol: 1e-8,
            lasso_max_sweeps: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn stls(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }

    pub fn lasso(lambda: f64) -> Self {
        Self { solver: Solver::Lasso, lambda, ..Self::default() }
    }
}

/// A design matrix and one target column.
#[derive(Debug, Clone, Copy)]
pub struct RegressionProblem<'a> {
    pub design: &'a DMatrix<f64>,
    pub target: &'a DVector<f64>,
}

impl<'a> RegressionProblem<'a> {
    pub fn new(design: &'a DMatrix<f64>, target: &'a DVector<f64>) -> Result<Self> {
        if design.nrows() != target.len() {
            return Err(Error::InvalidProblem(format!(
                "design has {} rows but the target has {}",
                design.nrows(),
                target.len()
            )));
        }
        if design.ncols() == 0 {
            return Err(Error::InvalidProblem("empty library".into()));
        }
        if design.nrows() == 0 {
            return Err(Error::InvalidProblem("no rows".into()));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("design has non-finite entries".into()));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("target has non-finite entries".into()));
        }
        Ok(Self { design, target })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// The least-squares subproblem had numerical rank below its column count;
    /// the minimum-norm solution was used.
    RankDeficient { rank: usize, columns: usize },
    EmptySupport,
    NotConverged { iterations: usize },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::RankDeficient { rank, columns } => {
                write!(f, "rank-deficient support ({rank} of {columns}); minimum-norm solution used")
            }
            Warning::EmptySupport => f.write_str("all coefficients were thresholded to zero"),
            Warning::NotConverged { iterations } => write!(f, "not converged after {iterations} iterations"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCoefficients {
    pub xi: DVector<f64>,
    pub support: Vec<usize>,
    pub iterations: usize,
    pub warnings: Vec<Warning>,
}

impl SparseCoefficients {
    fn from_xi(xi: DVector<f64>, iterations: usize, mut warnings: Vec<Warning>) -> Self {
        let support: Vec<usize> = (0..xi.len()).filter(|&k| xi[k] != 0.0).collect();
        if support.is_empty() && !warnings.contains(&Warning::EmptySupport) {
            warnings.push(Warning::EmptySupport);
        }
        Self { xi, support, iterations, warnings }
    }
}

/// Minimum-norm least squares on the selected columns.
fn least_squares(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    columns: &[usize],
    normalize: bool,
) -> (DVector<f64>, Option<Warning>) {
    let sub = design.select_columns(columns.iter());
    let m = sub.nrows() as f64;
    let scales: Vec<f64> = sub
        .column_iter()
        .map(|c| {
            let rms = (c.norm_squared() / m).sqrt();
            if normalize && rms > 0.0 {
                rms
            } else {
                1.0
            }
        })
        .collect();
    let mut a = sub;
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).unscale_mut(*s);
    }
    let (rows, cols) = a.shape();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * rows.max(cols) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let coef = if smax == 0.0 {
        DVector::zeros(cols)
    } else {
        svd.solve(target, tol).expect("u and v were computed")
    };
    let raw = DVector::from_iterator(cols, coef.iter().zip(&scales).map(|(c, s)| c / s));
    let warning = (rank < cols).then_some(Warning::RankDeficient { rank, columns: cols });
    (raw, warning)
}

/// Sequential thresholded least squares with raw-scale thresholding.
pub fn stls(problem: RegressionProblem<'_>, config: &SolverConfig) -> Result<SparseCoefficients> {
    let lambda = config.lambda;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidProblem(format!("lambda must be non-negative, got {lambda}")));
    }
    let p = problem.design.ncols();
    let mut support: Vec<usize> = (0..p).collect();
    let mut warnings = Vec::new();
    let mut xi = DVector::zeros(p);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters.max(1) {
        iterations += 1;
        let (coef, warning) = least_squares(problem.design, problem.target, &support, config.normalize_columns);
        xi.fill(0.0);
        for (c, &k) in coef.iter().zip(&support) {
            xi[k] = *c;
        }
        let next: Vec<usize> = support.iter().copied().filter(|&k| xi[k].abs() >= lambda).collect();
        if next == support {
            if let Some(w) = warning {
                warnings.push(w);
            }
            converged = true;
            break;
        }
        for k in 0..p {
            if !next.contains(&k) {
                xi[k] = 0.0;
            }
        }
        support = next;
        if support.is_empty() {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(Warning::NotConverged { iterations });
    }
    let mut out = SparseCoefficients::from_xi(xi, iterations, warnings);
    // Exact zeros from the solve stay in the support when λ = 0.
    if lambda == 0.0 {
        out.support = support;
    }
    Ok(out)
}

/// Coordinate descent on `½‖y − Θξ‖² + λ‖ξ‖₁` with soft thresholding.
pub fn lasso(problem: RegressionProblem<'_>, config: &SolverConfig) -> Result<SparseCoefficients> {
    let lambda = config.lambda;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidProblem(format!("lambda must be non-negative, got {lambda}")));
    }
    let design = problem.design;
    let p = design.ncols();
    let norms: Vec<f64> = design.column_iter().map(|c| c.norm_squared()).collect();
    let mut xi = DVector::<f64>::zeros(p);
    let mut residual = problem.target.clone();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < config.lasso_max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for k in 0..p {
            if norms[k] == 0.0 {
                continue;
            }
            let col = design.column(k);
            let rho = col.dot(&residual) + norms[k] * xi[k];
            let new = soft_threshold(rho, lambda) / norms[k];
            let delta = new - xi[k];
            if delta != 0.0 {
                residual.axpy(-delta, &col, 1.0);
                xi[k] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < config.lasso_tol {
            converged = true;
            break;
        }
    }
    let warnings = if converged { Vec::new() } else { vec![Warning::NotConverged { iterations: sweeps }] };
    Ok(SparseCoefficients::from_xi(xi, sweeps, warnings))
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

pub fn solve(problem: RegressionProblem<'_>, config: &SolverConfig) -> Result<SparseCoefficients> {
    match config.solver {
        Solver::Stls => stls(problem, config),
        Solver::Lasso => lasso(problem, config),
    }
}

/// Coefficients for every target column, stacked as `p × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFit {
    pub xi: DMatrix<f64>,
    pub columns: Vec<SparseCoefficients>,
}

/// Fits each target column independently against a shared design.
pub fn fit_all(design: &DMatrix<f64>, targets: &DMatrix<f64>, config: &SolverConfig) -> Result<StackedFit> {
    let columns: Vec<SparseCoefficients> = (0..targets.ncols())
        .into_par_iter()
        .map(|j| {
            let target = targets.column(j).into_owned();
            RegressionProblem::new(design, &target)
                .and_then(|problem| solve(problem, config))
                .map_err(|e| Error::Column { column: j, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let mut xi = DMatrix::zeros(design.ncols(), targets.ncols());
    for (j, c) in columns.iter().enumerate() {
        xi.set_column(j, &c.xi);
    }
    Ok(StackedFit { xi, columns })
}
