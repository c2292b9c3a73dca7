//! Kernel identification (DD-SINDy), the two baselines, reconstruction error,
//! rendering and model files.

mod baselines;
mod model_file;
mod render;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::dataset::{estimate_derivatives, DerivativeSource, Trajectory};
use crate::error::{Error, Result};
use crate::library::{assemble, AssembledLibrary, LibrarySpec};
use crate::quadrature::{QuadratureKind, QuadratureRule};
use crate::regression::{fit_all, SolverConfig, Warning};

pub use baselines::{bb_library, bb_sindy, integral_sindy_ode};
pub use model_file::{parse_model, write_model};
pub use render::{parse_rendered, render_model, RenderedEquation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquationKind {
    /// Renewal equation: `x_j(t) = G_j(x_t)`.
    Re,
    /// Delay integro-differential equation: `x_j'(t) = G_j(x_t)`.
    Dide,
}

impl fmt::Display for EquationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EquationKind::Re => "RE",
            EquationKind::Dide => "DIDE",
        })
    }
}

impl FromStr for EquationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RE" => Ok(EquationKind::Re),
            "DIDE" => Ok(EquationKind::Dide),
            other => Err(Error::Config(format!("unknown equation kind `{other}` (expected RE|DIDE)"))),
        }
    }
}

/// Delay window plus quadrature settings used to discretise it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub lower: f64,
    pub upper: f64,
    pub kind: QuadratureKind,
    pub nodes: usize,
}

impl Discretization {
    pub fn new(kind: QuadratureKind, nodes: usize, lower: f64, upper: f64) -> Self {
        Self { lower, upper, kind, nodes }
    }

    pub fn rule(&self) -> Result<QuadratureRule> {
        if self.upper > 0.0 {
            return Err(Error::InvalidRule(format!(
                "delay window [{}, {}] must end at or before 0",
                self.lower, self.upper
            )));
        }
        QuadratureRule::new(self.kind, self.nodes, self.lower, self.upper)
    }
}

/// Identified coefficients `Ξ` (one column per state component) together with
/// everything needed to re-evaluate the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub spec: LibrarySpec,
    pub labels: Vec<String>,
    pub xi: DMatrix<f64>,
    pub kinds: Vec<EquationKind>,
    /// Absent for models without integral terms.
    pub discretization: Option<Discretization>,
}

impl SparseModel {
    pub fn new(
        spec: LibrarySpec,
        xi: DMatrix<f64>,
        kinds: Vec<EquationKind>,
        discretization: Option<Discretization>,
    ) -> Result<Self> {
        let labels = spec.labels();
        if xi.nrows() != labels.len() || xi.ncols() != kinds.len() {
            return Err(Error::InvalidModel(format!(
                "coefficient matrix is {}x{}, expected {}x{}",
                xi.nrows(),
                xi.ncols(),
                labels.len(),
                kinds.len()
            )));
        }
        if !spec.slots().is_empty() {
            return Err(Error::InvalidModel(format!("unresolved parameter slots {:?}", spec.slots())));
        }
        if spec.has_integral() {
            let Some(d) = discretization else {
                return Err(Error::InvalidModel("integral terms need a delay window".into()));
            };
            if !(d.lower < d.upper && d.upper <= 0.0) {
                return Err(Error::InvalidModel(format!(
                    "delay window [{}, {}] must satisfy a < b <= 0",
                    d.lower, d.upper
                )));
            }
        }
        if spec.max_state().is_some_and(|j| j >= kinds.len()) {
            return Err(Error::InvalidModel("library refers to more states than equations".into()));
        }
        Ok(Self { spec, labels, xi, kinds, discretization })
    }

    pub fn n_states(&self) -> usize {
        self.kinds.len()
    }

    pub fn coefficient(&self, equation: usize, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|k| self.xi[(k, equation)])
    }

    /// Labels with non-zero coefficients in `equation`.
    pub fn active(&self, equation: usize) -> Vec<&str> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(k, _)| self.xi[(*k, equation)] != 0.0)
            .map(|(_, l)| l.as_str())
            .collect()
    }

    /// Design matrix of this model's library on `traj`.
    pub fn design(&self, traj: &Trajectory) -> Result<AssembledLibrary> {
        design_matrix(traj, &self.spec, self.discretization.as_ref())
    }

    /// Right-hand sides `Θ Ξ` on the retained rows of `traj`.
    pub fn predict(&self, traj: &Trajectory) -> Result<(AssembledLibrary, DMatrix<f64>)> {
        let lib = self.design(traj)?;
        let pred = &lib.matrix * &self.xi;
        Ok((lib, pred))
    }

    /// Recovered kernel `g_j(σ, x)` on a σ grid, with every shifted and
    /// current state set to `state`.
    pub fn evaluate_kernel(&self, equation: usize, sigmas: &[f64], state: &[f64]) -> Vec<f64> {
        let nd = self.spec.distributed.len();
        sigmas
            .iter()
            .map(|&s| {
                let mut g = 0.0;
                for (k, atom) in self.spec.distributed.iter().enumerate() {
                    let c = self.xi[(k, equation)];
                    if c != 0.0 {
                        g += c * atom.eval(s, state, state);
                    }
                }
                for (k, link) in self.spec.linked.iter().enumerate() {
                    let c = self.xi[(nd + k, equation)];
                    if c != 0.0 {
                        g += c * link.integral_scale * link.integral.eval(s, state, state);
                    }
                }
                g
            })
            .collect()
    }
}

fn design_matrix(traj: &Trajectory, spec: &LibrarySpec, disc: Option<&Discretization>) -> Result<AssembledLibrary> {
    if spec.has_integral() {
        let disc = disc.ok_or_else(|| Error::InvalidModel("integral terms need a delay window".into()))?;
        assemble(traj, &disc.rule()?, spec)
    } else {
        crate::library::concat(&[crate::library::assemble_instantaneous(traj, &spec.instantaneous)?])
    }
}

/// Regression targets: states for RE components, derivatives for DIDE ones.
///
/// Stored derivative columns (exact or measured) are preferred; missing or
/// all-NaN columns fall back to finite differences.
pub fn targets(traj: &Trajectory, kinds: &[EquationKind]) -> Result<(DMatrix<f64>, Option<DerivativeSource>)> {
    if kinds.len() != traj.n_states() {
        return Err(Error::LengthMismatch { expected: traj.n_states(), got: kinds.len() });
    }
    let mut out = traj.states().clone();
    let mut source = None;
    let mut estimated: Option<DMatrix<f64>> = None;
    for (j, kind) in kinds.iter().enumerate() {
        if *kind == EquationKind::Re {
            continue;
        }
        let stored = traj
            .derivs()
            .map(|d| d.column(j).into_owned())
            .filter(|c| c.iter().any(|v| v.is_finite()));
        let (column, src) = match stored {
            Some(c) => (c, traj.deriv_source()),
            None => {
                if estimated.is_none() {
                    estimated = Some(estimate_derivatives(traj).map_err(|_| Error::MissingDerivatives(j))?);
                }
                (estimated.as_ref().unwrap().column(j).into_owned(), DerivativeSource::Estimated)
            }
        };
        out.set_column(j, &column);
        source = Some(match (source, src) {
            (Some(DerivativeSource::Estimated), _) | (_, DerivativeSource::Estimated) => DerivativeSource::Estimated,
            (Some(DerivativeSource::Measured), _) | (_, DerivativeSource::Measured) => DerivativeSource::Measured,
            _ => DerivativeSource::Exact,
        });
    }
    Ok((out, source))
}

fn retained_targets(targets: &DMatrix<f64>, lib: &AssembledLibrary) -> DMatrix<f64> {
    targets.select_rows(lib.retained_rows().iter())
}

/// Diagnostics of a single fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Training residual RMSE per component.
    pub rmse: Vec<f64>,
    pub row_mask: Vec<bool>,
    pub derivative_source: Option<DerivativeSource>,
    pub warnings: Vec<(usize, Warning)>,
}

/// Quadrature-weighted library and per-equation sparse regression.
pub fn dd_sindy(
    traj: &Trajectory,
    kinds: &[EquationKind],
    spec: &LibrarySpec,
    disc: Discretization,
    solver: &SolverConfig,
) -> Result<(SparseModel, FitReport)> {
    spec.validate()?;
    let (y, source) = targets(traj, kinds)?;
    let disc_opt = spec.has_integral().then_some(disc);
    let lib = design_matrix(traj, spec, disc_opt.as_ref())?;
    fit_design(lib, &y, kinds, spec.clone(), disc_opt, solver, source)
}

fn fit_design(
    lib: AssembledLibrary,
    y: &DMatrix<f64>,
    kinds: &[EquationKind],
    spec: LibrarySpec,
    disc: Option<Discretization>,
    solver: &SolverConfig,
    source: Option<DerivativeSource>,
) -> Result<(SparseModel, FitReport)> {
    let y = retained_targets(y, &lib);
    let fit = fit_all(&lib.matrix, &y, solver)?;
    let residual = &y - &lib.matrix * &fit.xi;
    let rows = residual.nrows() as f64;
    let rmse = residual.column_iter().map(|c| (c.norm_squared() / rows).sqrt()).collect();
    let warnings = fit
        .columns
        .iter()
        .enumerate()
        .flat_map(|(j, c)| c.warnings.iter().map(move |w| (j, w.clone())))
        .collect();
    let model = SparseModel::new(spec, fit.xi, kinds.to_vec(), disc)?;
    let report = FitReport { rmse, row_mask: lib.row_mask, derivative_source: source, warnings };
    Ok((model, report))
}

/// Residual statistics of a model over training and validation rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub train: f64,
    pub val: f64,
    /// RMSE over every residual of both subsets.
    pub combined: f64,
    pub train_count: usize,
    pub val_count: usize,
}

/// Sum of squared residuals and residual count of `model` on `traj`.
pub fn residual_sum(model: &SparseModel, traj: &Trajectory) -> Result<(f64, usize)> {
    let (y, _) = targets(traj, &model.kinds)?;
    let (lib, pred) = model.predict(traj)?;
    let y = retained_targets(&y, &lib);
    let r = y - pred;
    Ok((r.norm_squared(), r.len()))
}

/// Per-component residual RMSE of `model` on `traj`.
pub fn component_rmse(model: &SparseModel, traj: &Trajectory) -> Result<Vec<f64>> {
    let (y, _) = targets(traj, &model.kinds)?;
    let (lib, pred) = model.predict(traj)?;
    let r = retained_targets(&y, &lib) - pred;
    let rows = r.nrows() as f64;
    Ok(r.column_iter().map(|c| (c.norm_squared() / rows).sqrt()).collect())
}

/// Reconstruction error `ε`: RMSE of `Y − ΘΞ` over all components and over
/// both the training and validation rows.
pub fn reconstruction_error(model: &SparseModel, train: &Trajectory, val: &Trajectory) -> Result<Reconstruction> {
    let (ss_t, n_t) = residual_sum(model, train)?;
    let (ss_v, n_v) = residual_sum(model, val)?;
    let rms = |ss: f64, n: usize| if n == 0 { 0.0 } else { (ss / n as f64).sqrt() };
    Ok(Reconstruction {
        train: rms(ss_t, n_t),
        val: rms(ss_v, n_v),
        combined: rms(ss_t + ss_v, n_t + n_v),
        train_count: n_t,
        val_count: n_v,
    })
}

/// Largest absolute coefficient error against `truth` (`(equation, label, value)`
/// triples); labels missing from the model count with coefficient 0, and
/// every other coefficient is compared against 0.
pub fn coefficient_errors(model: &SparseModel, truth: &[(usize, &str, f64)]) -> Vec<(usize, String, f64, f64)> {
    let mut out = Vec::new();
    for j in 0..model.n_states() {
        for (k, label) in model.labels.iter().enumerate() {
            let want = truth
                .iter()
                .find(|(e, l, _)| *e == j && l == label)
                .map_or(0.0, |t| t.2);
            let got = model.xi[(k, j)];
            if want != 0.0 || got != 0.0 {
                out.push((j, label.clone(), got, want));
            }
        }
        for (e, l, v) in truth {
            if *e == j && !model.labels.iter().any(|x| x == l) {
                out.push((j, l.to_string(), 0.0, *v));
            }
        }
    }
    out
}

pub(crate) fn fit_with_design(
    lib: AssembledLibrary,
    y: &DMatrix<f64>,
    kinds: &[EquationKind],
    spec: LibrarySpec,
    disc: Option<Discretization>,
    solver: &SolverConfig,
    source: Option<DerivativeSource>,
) -> Result<(SparseModel, FitReport)> {
    fit_design(lib, y, kinds, spec, disc, solver, source)
}
