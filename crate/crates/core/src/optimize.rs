//! Particle-swarm search over delay windows and kernel parameters around
//! the sparse regression.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::identify::{dd_sindy, reconstruction_error, Discretization, EquationKind, FitReport, SparseModel};
use crate::library::{LibrarySpec, Params};
use crate::regression::SolverConfig;

/// Objective value for infeasible parameter vectors.
pub const PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    /// Searched continuously, rounded when read out.
    pub integer: bool,
}

/// What a parameter drives besides custom-atom slots of the same name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindTarget {
    WindowLower,
    WindowUpper,
    Nodes,
}

impl FromStr for BindTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window_lower" => Ok(BindTarget::WindowLower),
            "window_upper" => Ok(BindTarget::WindowUpper),
            "nodes" | "K" => Ok(BindTarget::Nodes),
            other => Err(Error::Config(format!(
                "unknown binding `{other}` (expected window_lower|window_upper|nodes)"
            ))),
        }
    }
}

impl fmt::Display for BindTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindTarget::WindowLower => "window_lower",
            BindTarget::WindowUpper => "window_upper",
            BindTarget::Nodes => "nodes",
        })
    }
}

/// `scale · param`, written `tau`, `-a_star` or `-10*tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub scale: f64,
    pub param: String,
}

impl FromStr for Scaled {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (scale, name) = match s.rsplit_once('*') {
            Some((c, name)) => (
                c.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad binding `{s}`")))?,
                name.trim(),
            ),
            None => match s.strip_prefix('-') {
                Some(name) => (-1.0, name.trim()),
                None => (1.0, s),
            },
        };
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("bad binding `{s}`")));
        }
        Ok(Scaled { scale, param: name.to_string() })
    }
}

impl fmt::Display for Scaled {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scale {
            1.0 => write!(f, "{}", self.param),
            -1.0 => write!(f, "-{}", self.param),
            s => write!(f, "{s}*{}", self.param),
        }
    }
}

/// `larger − smaller ≥ gap`; violations are infeasible.
#[derive(Debug, Clone, PartialEq)]
pub struct MinGap {
    pub larger: String,
    pub smaller: String,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSpace {
    pub params: Vec<ParamDef>,
    pub bindings: Vec<(BindTarget, Scaled)>,
    pub gaps: Vec<MinGap>,
}

impl ParamSpace {
    pub fn new(params: Vec<ParamDef>) -> Result<Self> {
        let space = ParamSpace { params, ..Default::default() };
        space.validate()?;
        Ok(space)
    }

    pub fn bind(mut self, target: BindTarget, expr: &str) -> Result<Self> {
        let scaled: Scaled = expr.parse()?;
        if !self.params.iter().any(|p| p.name == scaled.param) {
            return Err(Error::Config(format!("binding `{target}` refers to unknown parameter `{}`", scaled.param)));
        }
        self.bindings.retain(|(t, _)| *t != target);
        self.bindings.push((target, scaled));
        Ok(self)
    }

    pub fn min_gap(mut self, larger: &str, smaller: &str, gap: f64) -> Result<Self> {
        for name in [larger, smaller] {
            if !self.params.iter().any(|p| p.name == name) {
                return Err(Error::Config(format!("constraint refers to unknown parameter `{name}`")));
            }
        }
        self.gaps.push(MinGap { larger: larger.into(), smaller: smaller.into(), gap });
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config("parameter space is empty".into()));
        }
        for (i, p) in self.params.iter().enumerate() {
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return Err(Error::Config(format!("parameter `{}` needs finite min < max", p.name)));
            }
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Config(format!("parameter `{}` declared twice", p.name)));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.params.iter().map(|p| (p.lower, p.upper)).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Named values for a position; integer parameters are rounded.
    pub fn read_out(&self, rho: &[f64]) -> Params {
        self.params
            .iter()
            .zip(rho)
            .map(|(p, &v)| (p.name.clone(), if p.integer { v.round() } else { v }))
            .collect()
    }

    /// Named values as the objective sees them (no rounding).
    pub fn continuous(&self, rho: &[f64]) -> Params {
        self.params.iter().zip(rho).map(|(p, &v)| (p.name.clone(), v)).collect()
    }

    fn feasible(&self, params: &Params) -> bool {
        self.gaps.iter().all(|g| params[&g.larger] - params[&g.smaller] >= g.gap)
    }

    /// Applies window and node bindings to `base`.
    pub fn discretization(&self, base: Discretization, params: &Params) -> Discretization {
        let mut d = base;
        for (target, s) in &self.bindings {
            let v = s.scale * params[&s.param];
            match target {
                BindTarget::WindowLower => d.lower = v,
                BindTarget::WindowUpper => d.upper = v,
                BindTarget::Nodes => d.nodes = v.round().max(1.0) as usize,
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmConfig {
    pub particles: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub max_evals: usize,
    /// Relative improvement of the best objective below which an iteration
    /// counts as stalled.
    pub stall_tol: f64,
    pub stall_iters: usize,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            particles: 25,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            max_evals: 2000,
            stall_tol: 1e-4,
            stall_iters: 15,
            seed: 0,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("the swarm needs at least 2 particles".into()));
        }
        if self.max_evals < self.particles {
            return Err(Error::Config("max_evals must be at least the number of particles".into()));
        }
        if !(self.stall_tol > 0.0) {
            return Err(Error::Config("stall_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub evals: usize,
    pub best_objective: f64,
    pub best: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptTrace {
    pub rows: Vec<TraceRow>,
}

impl OptTrace {
    pub fn evals(&self) -> usize {
        self.rows.last().map_or(0, |r| r.evals)
    }

    /// CSV with header `iter,evals,best_objective,<names...>`.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = format!("iter,evals,best_objective,{}\n", names.join(","));
        for r in &self.rows {
            let values: Vec<String> = r.best.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{},{},{}\n", r.iter, r.evals, r.best_objective, values.join(",")));
        }
        out
    }
}

/// Global-best particle swarm minimisation of `f` over a box.
///
/// Random draws for an iteration are taken from the seeded stream before the
/// swarm is evaluated in parallel, and results are reduced in particle order,
/// so the outcome does not depend on thread scheduling.
pub fn particle_swarm<F>(bounds: &[(f64, f64)], config: &SwarmConfig, f: F) -> Result<(Vec<f64>, f64, OptTrace)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::Config("swarm bounds need min < max in every dimension".into()));
    }
    let dim = bounds.len();
    let np = config.particles;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Vec<Vec<f64>> = (0..np)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..np)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| 0.1 * (hi - lo) * rng.random_range(-1.0..=1.0))
                .collect()
        })
        .collect();
    let eval = |x: &[Vec<f64>]| -> Vec<f64> {
        x.par_iter()
            .map(|p| {
                let y = f(p);
                if y.is_nan() {
                    f64::INFINITY
                } else {
                    y
                }
            })
            .collect()
    };

    let mut fx = eval(&x);
    let mut evals = np;
    let mut pbest = x.clone();
    let mut pbest_f = fx.clone();
    let mut g = 0;
    for i in 1..np {
        if fx[i] < fx[g] {
            g = i;
        }
    }
    let mut gbest = x[g].clone();
    let mut gbest_f = fx[g];
    let mut trace = OptTrace::default();
    trace.rows.push(TraceRow { iter: 0, evals, best_objective: gbest_f, best: gbest.clone() });

    let mut stalled = 0;
    let mut iter = 0;
    while evals + np <= config.max_evals && stalled < config.stall_iters {
        iter += 1;
        let draws: Vec<(f64, f64)> = (0..np * dim).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        for i in 0..np {
            for d in 0..dim {
                let (r1, r2) = draws[i * dim + d];
                v[i][d] = config.inertia * v[i][d]
                    + config.cognitive * r1 * (pbest[i][d] - x[i][d])
                    + config.social * r2 * (gbest[d] - x[i][d]);
                x[i][d] += v[i][d];
                let (lo, hi) = bounds[d];
                if x[i][d] < lo {
                    x[i][d] = lo;
                    v[i][d] = -v[i][d];
                } else if x[i][d] > hi {
                    x[i][d] = hi;
                    v[i][d] = -v[i][d];
                }
            }
        }
        fx = eval(&x);
        evals += np;
        let previous = gbest_f;
        for i in 0..np {
            if fx[i] < pbest_f[i] {
                pbest_f[i] = fx[i];
                pbest[i].clone_from(&x[i]);
                if fx[i] < gbest_f {
                    gbest_f = fx[i];
                    gbest.clone_from(&x[i]);
                }
            }
        }
        let improvement = previous - gbest_f;
        if improvement < config.stall_tol * previous.abs().max(f64::MIN_POSITIVE) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        trace.rows.push(TraceRow { iter, evals, best_objective: gbest_f, best: gbest.clone() });
    }
    Ok((gbest, gbest_f, trace))
}

/// Data and fixed settings for the outer search.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub train: &'a Trajectory,
    pub val: &'a Trajectory,
    pub kinds: Vec<EquationKind>,
    pub spec: LibrarySpec,
    pub discretization: Discretization,
    pub solver: SolverConfig,
}

impl Problem<'_> {
    /// Fits at the given parameter values.
    pub fn fit(&self, space: &ParamSpace, params: &Params) -> Result<(SparseModel, FitReport)> {
        if !space.feasible(params) {
            return Err(Error::InvalidProblem("parameter constraints violated".into()));
        }
        let disc = space.discretization(self.discretization, params);
        if self.spec.has_integral() && !(disc.lower < disc.upper && disc.upper <= 0.0) {
            return Err(Error::InvalidProblem(format!("window [{}, {}] is empty or not in the past", disc.lower, disc.upper)));
        }
        let spec = self.spec.resolve(params)?;
        dd_sindy(self.train, &self.kinds, &spec, disc, &self.solver)
    }

    /// `ε(ρ)`: combined train and validation residual RMSE, or [`PENALTY`]
    /// when the parameters are infeasible.
    pub fn objective(&self, space: &ParamSpace, params: &Params) -> f64 {
        self.fit(space, params)
            .and_then(|(model, _)| reconstruction_error(&model, self.train, self.val))
            .map(|r| r.combined)
            .ok()
            .filter(|e| e.is_finite())
            .unwrap_or(PENALTY)
    }

    fn check(&self, space: &ParamSpace) -> Result<()> {
        space.validate()?;
        let names = space.names();
        if let Some(missing) = self.spec.slots().into_iter().find(|s| !names.contains(&s.as_str())) {
            return Err(Error::Config(format!("atom parameter `{missing}` has no search range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimum {
    /// Read-out parameter values (integers rounded).
    pub params: Params,
    pub objective: f64,
    pub model: SparseModel,
    pub report: FitReport,
    pub trace: OptTrace,
    /// Objective evaluations, i.e. inner regressions, excluding the final fit.
    pub calls: usize,
}

/// Outcome of the swarm stage alone.
#[derive(Debug, Clone)]
pub struct Search {
    /// Read-out parameter values (integers rounded).
    pub params: Params,
    pub trace: OptTrace,
    pub calls: usize,
}

impl Search {
    /// Fits once more at the read-out point.
    pub fn finish(self, space: &ParamSpace, problem: &Problem<'_>) -> Result<Optimum> {
        let (model, report) = problem.fit(space, &self.params)?;
        let objective = reconstruction_error(&model, problem.train, problem.val)?.combined;
        Ok(Optimum { params: self.params, objective, model, report, trace: self.trace, calls: self.calls })
    }
}

pub fn search(space: &ParamSpace, config: &SwarmConfig, problem: &Problem<'_>) -> Result<Search> {
    problem.check(space)?;
    let calls = AtomicUsize::new(0);
    let (best, _, trace) = particle_swarm(&space.bounds(), config, |rho| {
        calls.fetch_add(1, Ordering::Relaxed);
        problem.objective(space, &space.continuous(rho))
    })?;
    Ok(Search { params: space.read_out(&best), trace, calls: calls.into_inner() })
}

/// Searches `space` with a particle swarm, then fits once more at the best
/// read-out point.
pub fn optimize_and_identify(space: &ParamSpace, config: &SwarmConfig, problem: &Problem<'_>) -> Result<Optimum> {
    search(space, config, problem)?.finish(space, problem)
}

/// Gamma-kernel parameters recovered from the `n`, `tau`, `rate` (α + d₁)
/// and `a` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RickerParams {
    pub n: u32,
    pub tau: f64,
    pub alpha: f64,
    pub d1: f64,
    pub a: f64,
    pub warning: Option<String>,
}

pub fn ricker_postprocess(params: &Params) -> Result<RickerParams> {
    let get = |k: &str| params.get(k).copied().ok_or_else(|| Error::UnresolvedParameter(k.to_string()));
    let n = get("n")?.round();
    if n < 1.0 {
        return Err(Error::InvalidProblem(format!("shape n = {n} must be at least 1")));
    }
    let tau = get("tau")?;
    let alpha = n / tau;
    let d1 = get("rate")? - alpha;
    let warning = (d1 < 0.0).then(|| format!("negative maturation death rate d1 = {d1}"));
    Ok(RickerParams { n: n as u32, tau, alpha, d1, a: get("a")?, warning })
}

/// Recovers `τ` from a fit whose Erlang atom carries a free coefficient `c`
/// next to an instantaneous `x1` term `−d₀`: with `e^η` known,
/// `c = d₀ e^η (τ_slot/τ)ⁿ`. Returns the slots with `tau` replaced.
pub fn ricker_tau_from_fit(params: &Params, model: &SparseModel, eta: f64) -> Result<Params> {
    let kernel = model
        .labels
        .iter()
        .find(|l| l.starts_with("erlang("))
        .ok_or_else(|| Error::InvalidModel("no Erlang atom in the model".into()))?;
    let c = model.coefficient(0, kernel).unwrap_or(0.0);
    let d0 = -model.coefficient(0, "x1").unwrap_or(0.0);
    let ratio = d0 * eta.exp() / c;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidModel(format!("kernel coefficient {c} and d0 = {d0} do not fix tau")));
    }
    let mut out = params.clone();
    let get = |k: &str| params.get(k).copied().ok_or_else(|| Error::UnresolvedParameter(k.to_string()));
    out.insert("tau".into(), get("tau")? * ratio.powf(1.0 / get("n")?.round()));
    Ok(out)
}

/// `γ = −d₀ e^η αⁿ / (n−1)!`, the coefficient of `σ^{n−1} e^{(α+d₁)σ} e^{−a x} x`.
pub fn ricker_gamma(d0: f64, eta: f64, p: &RickerParams) -> f64 {
    let factorial: f64 = (1..p.n).map(f64::from).product();
    let sign = if p.n.is_multiple_of(2) { -1.0 } else { 1.0 };
    sign * d0 * eta.exp() * p.alpha.powi(p.n as i32) / factorial
}
