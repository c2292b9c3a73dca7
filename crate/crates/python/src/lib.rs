use std::collections::BTreeMap;

use ddsindy::dataset::{self, SplitSpec};
use ddsindy::identify::{self, Discretization};
use ddsindy::library::Params;
use ddsindy::optimize::{self, Problem, SwarmConfig};
use ddsindy::presets::{preset, Preset};
use ddsindy::quadrature::{self, QuadratureKind};
use ddsindy::regression::{self, RegressionProblem, SolverConfig};
use ddsindy::simulate;
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(ddsindy, DdsindyError, PyException);

fn err(e: ddsindy::Error) -> PyErr {
    DdsindyError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(DdsindyError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn kind(name: &str) -> PyResult<QuadratureKind> {
    name.parse().map_err(err)
}

/// Time series with optional derivative columns and a pre-`t0` history.
#[pyclass(name = "Trajectory", module = "ddsindy", from_py_object)]
#[derive(Clone)]
struct PyTrajectory(dataset::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[new]
    fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> PyResult<Self> {
        dataset::Trajectory::new(times, matrix(&states)?).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        dataset::load_trajectory(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        dataset::write_csv(&self.0, &mut buf).map_err(err)?;
        std::fs::write(path, buf).map_err(|e| DdsindyError::new_err(e.to_string()))
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times().to_vec()
    }

    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        rows(self.0.states())
    }

    #[getter]
    fn derivs(&self) -> Option<Vec<Vec<f64>>> {
        self.0.derivs().map(rows)
    }

    fn with_noise(&self, level: f64, seed: u64) -> PyResult<Self> {
        dataset::add_noise(&self.0, level, seed).map(Self).map_err(err)
    }

    /// Chronological split into training and validation parts.
    fn split(&self, train_fraction: f64) -> PyResult<(Self, Self)> {
        let spec = SplitSpec::new(train_fraction).map_err(err)?;
        let (a, b) = dataset::split(&self.0, spec).map_err(err)?;
        Ok((Self(a), Self(b)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(samples={}, states={})", self.0.len(), self.0.n_states())
    }
}

#[pyclass(name = "QuadratureRule", module = "ddsindy", from_py_object)]
#[derive(Clone)]
struct PyQuadratureRule(quadrature::QuadratureRule);

#[pymethods]
impl PyQuadratureRule {
    /// `kind` is one of rectangles, trapezoid, clenshaw-curtis.
    #[new]
    fn new(kind_name: &str, nodes: usize, lower: f64, upper: f64) -> PyResult<Self> {
        quadrature::QuadratureRule::new(kind(kind_name)?, nodes, lower, upper).map(Self).map_err(err)
    }

    #[getter]
    fn nodes(&self) -> Vec<f64> {
        self.0.nodes().to_vec()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights().to_vec()
    }

    fn integrate(&self, samples: Vec<f64>) -> PyResult<f64> {
        self.0.integrate(&samples).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("QuadratureRule({}, K={}, [{}, {}])", self.0.kind(), self.0.len(), self.0.lower(), self.0.upper())
    }
}

/// Identified sparse model.
#[pyclass(name = "Model", module = "ddsindy", from_py_object)]
#[derive(Clone)]
struct PyModel(identify::SparseModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        identify::parse_model(text).map(Self).map_err(err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.labels.clone()
    }

    /// Coefficient matrix, one row per library term and one column per equation.
    #[getter]
    fn coefficients(&self) -> Vec<Vec<f64>> {
        rows(&self.0.xi)
    }

    fn coefficient(&self, equation: usize, label: &str) -> Option<f64> {
        self.0.coefficient(equation, label)
    }

    fn active(&self, equation: usize) -> Vec<String> {
        self.0.active(equation).into_iter().map(str::to_string).collect()
    }

    /// Training, validation and combined residual RMSE.
    fn rmse(&self, train: &PyTrajectory, val: &PyTrajectory) -> PyResult<(f64, f64, f64)> {
        let r = identify::reconstruction_error(&self.0, &train.0, &val.0).map_err(err)?;
        Ok((r.train, r.val, r.combined))
    }

    fn kernel(&self, equation: usize, sigmas: Vec<f64>, state: Vec<f64>) -> Vec<f64> {
        self.0.evaluate_kernel(equation, &sigmas, &state)
    }

    #[pyo3(signature = (precision = 6))]
    fn render(&self, precision: usize) -> String {
        identify::render_model(&self.0, precision)
    }

    fn to_text(&self) -> String {
        identify::write_model(&self.0)
    }

    fn __repr__(&self) -> String {
        identify::render_model(&self.0, 4)
    }
}

/// Noiseless data of a named benchmark and its generating coefficients
/// as `(equation, label, value)`.
#[pyfunction]
#[pyo3(name = "simulate", signature = (name, params = None))]
fn simulate_benchmark(name: &str, params: Option<BTreeMap<String, f64>>) -> PyResult<(PyTrajectory, Vec<(usize, String, f64)>)> {
    let b = simulate::benchmark(name, &params.unwrap_or_default()).map_err(err)?;
    let traj = b.generate().map_err(err)?;
    Ok((PyTrajectory(traj), b.truth))
}

fn solver(method: &str, lambda: f64) -> PyResult<SolverConfig> {
    match method {
        "stls" => Ok(SolverConfig::stls(lambda)),
        "lasso" => Ok(SolverConfig::lasso(lambda)),
        other => Err(DdsindyError::new_err(format!("unknown solver `{other}` (stls, lasso)"))),
    }
}

/// Sparse regression of `target` on the columns of `design`.
#[pyfunction]
#[pyo3(signature = (design, target, lam, method = "stls"))]
fn sparse_regression(design: Vec<Vec<f64>>, target: Vec<f64>, lam: f64, method: &str) -> PyResult<Vec<f64>> {
    let a = matrix(&design)?;
    let y = DVector::from_vec(target);
    let problem = RegressionProblem::new(&a, &y).map_err(err)?;
    let config = solver(method, lam)?;
    let fit = regression::solve(problem, &config).map_err(err)?;
    Ok(fit.xi.iter().copied().collect())
}

fn setup(
    name: &str,
    degree: Option<u32>,
    quadrature: Option<&str>,
    nodes: Option<usize>,
    lam: Option<f64>,
) -> PyResult<Preset> {
    let mut p = preset(name, degree).map_err(err)?;
    let d = p.discretization;
    p.discretization = Discretization::new(
        quadrature.map(kind).transpose()?.unwrap_or(d.kind),
        nodes.unwrap_or(d.nodes),
        d.lower,
        d.upper,
    );
    p.solver.lambda = lam.unwrap_or(p.solver.lambda);
    Ok(p)
}

/// Fits the library of a named benchmark on `train`; `window` replaces the
/// default delay window and `params` fills atom parameter slots.
#[pyfunction]
#[pyo3(name = "identify", signature = (benchmark, train, degree = None, quadrature = None, nodes = None, lam = None, window = None, params = None))]
#[allow(clippy::too_many_arguments)]
fn identify_benchmark(
    benchmark: &str,
    train: &PyTrajectory,
    degree: Option<u32>,
    quadrature: Option<&str>,
    nodes: Option<usize>,
    lam: Option<f64>,
    window: Option<(f64, f64)>,
    params: Option<BTreeMap<String, f64>>,
) -> PyResult<PyModel> {
    let mut p = setup(benchmark, degree, quadrature, nodes, lam)?;
    if let Some((a, b)) = window {
        p.discretization.lower = a;
        p.discretization.upper = b;
    }
    let spec = match params {
        Some(v) => p.spec.resolve(&v).map_err(err)?,
        None => p.spec.clone(),
    };
    let (model, _) = identify::dd_sindy(&train.0, &p.kinds, &spec, p.discretization, &p.solver).map_err(err)?;
    Ok(PyModel(model))
}

/// Particle-swarm search over the default parameter space of a benchmark.
/// Returns the read-out parameters, the objective value and the final model.
#[pyfunction]
#[pyo3(name = "optimize", signature = (benchmark, train, val, seed = 0, max_evals = None))]
fn optimize_benchmark(
    py: Python<'_>,
    benchmark: &str,
    train: &PyTrajectory,
    val: &PyTrajectory,
    seed: u64,
    max_evals: Option<usize>,
) -> PyResult<(BTreeMap<String, f64>, f64, PyModel)> {
    let p = setup(benchmark, None, None, None, None)?;
    let space = p
        .space
        .clone()
        .ok_or_else(|| DdsindyError::new_err(format!("`{benchmark}` has no parameters to search")))?;
    let swarm = SwarmConfig { seed, max_evals: max_evals.unwrap_or(p.swarm.max_evals), ..p.swarm.clone() };
    let (train, val) = (train.0.clone(), val.0.clone());
    let opt = py
        .detach(|| {
            let problem = Problem {
                train: &train,
                val: &val,
                kinds: p.kinds.clone(),
                spec: p.spec.clone(),
                discretization: p.discretization,
                solver: p.solver.clone(),
            };
            optimize::optimize_and_identify(&space, &swarm, &problem)
        })
        .map_err(err)?;
    Ok((opt.params, opt.objective, PyModel(opt.model)))
}

/// Gamma-kernel parameters `(n, tau, alpha, d1, a)` from searched slots.
#[pyfunction]
fn ricker_parameters(params: Params) -> PyResult<(u32, f64, f64, f64, f64)> {
    let r = optimize::ricker_postprocess(&params).map_err(err)?;
    Ok((r.n, r.tau, r.alpha, r.d1, r.a))
}

#[pymodule]
#[pyo3(name = "ddsindy")]
pub fn ddsindy_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DdsindyError", m.py().get_type::<DdsindyError>())?;
    m.add("BENCHMARKS", simulate::BENCHMARKS.to_vec())?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyQuadratureRule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_regression, m)?)?;
    m.add_function(wrap_pyfunction!(identify_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(ricker_parameters, m)?)?;
    Ok(())
}
