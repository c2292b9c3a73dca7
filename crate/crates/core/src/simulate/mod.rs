//! Forward solvers for renewal equations, delay integro-differential
//! equations and coupled systems, plus the benchmark models.

mod benchmarks;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DerivativeSource, History, Trajectory};
use crate::error::{Error, Result};
use crate::identify::{EquationKind, SparseModel};
use crate::quadrature::QuadratureRule;

pub use benchmarks::{benchmark, Benchmark, Recipe, Sampling, BENCHMARKS};

/// Kernel `g(σ, x(t+σ), x(t))`.
pub type KernelFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Non-integral part `f(x(t))`; the second argument returns `x_j(t+ℓ)` for a
/// fixed lag `ℓ ≤ 0`.
pub type InstantFn = Arc<dyn Fn(&[f64], &dyn Fn(usize, f64) -> f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct DistributedTerm {
    pub rule: QuadratureRule,
    pub kernel: KernelFn,
}

#[derive(Clone)]
pub struct ComponentDef {
    pub kind: EquationKind,
    pub instantaneous: Option<InstantFn>,
    pub distributed: Vec<DistributedTerm>,
    /// Fixed lags read by `instantaneous` (all non-positive).
    pub lags: Vec<f64>,
}

#[derive(Clone)]
pub enum InitialFunction {
    Constant(Vec<f64>),
    Function(Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>),
}

impl InitialFunction {
    fn eval(&self, t: f64, out: &mut [f64]) {
        match self {
            InitialFunction::Constant(v) => out.copy_from_slice(v),
            InitialFunction::Function(f) => f(t, out),
        }
    }
}

/// A system of RE and DIDE components with an initial function on
/// `[-history_span, 0]`.
#[derive(Clone)]
pub struct ModelDef {
    pub name: String,
    pub components: Vec<ComponentDef>,
    pub history: InitialFunction,
    pub history_span: f64,
}

impl ModelDef {
    pub fn n_states(&self) -> usize {
        self.components.len()
    }

    pub fn kinds(&self) -> Vec<EquationKind> {
        self.components.iter().map(|c| c.kind).collect()
    }

    fn validate(&self, h: f64) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidModel("no components".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidModel(format!("step {h} must be positive")));
        }
        for (j, c) in self.components.iter().enumerate() {
            for term in &c.distributed {
                if term.rule.upper() > 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "component {}: window [{}, {}] must end at or before 0",
                        j + 1,
                        term.rule.lower(),
                        term.rule.upper()
                    )));
                }
                if -term.rule.lower() > self.history_span + 1e-12 {
                    return Err(Error::InvalidModel(format!(
                        "component {}: window reaches {} but the initial function covers only [-{}, 0]",
                        j + 1,
                        term.rule.lower(),
                        self.history_span
                    )));
                }
                let delays = term.rule.nodes().iter().map(|s| -s);
                match c.kind {
                    EquationKind::Re if term.rule.upper() > -h => {
                        return Err(Error::InvalidModel(format!(
                            "component {}: renewal window [{}, {}] is not strictly lagged by the step {h}; \
                             implicit (fixed-point) renewal solves are not supported",
                            j + 1,
                            term.rule.lower(),
                            term.rule.upper()
                        )))
                    }
                    _ => {
                        if let Some(d) = delays.clone().find(|&d| d > 0.0 && d < h * (1.0 - 1e-12)) {
                            return Err(Error::InvalidModel(format!(
                                "component {}: step {h} exceeds the delay {d}; stage values would need the future",
                                j + 1
                            )));
                        }
                    }
                }
            }
            for &lag in &c.lags {
                if lag > 0.0 || (lag < 0.0 && -lag < h * (1.0 - 1e-12)) || (lag == 0.0 && c.kind == EquationKind::Re) {
                    return Err(Error::InvalidModel(format!("component {}: unsupported lag {lag}", j + 1)));
                }
            }
        }
        Ok(())
    }
}

/// Solution on the uniform grid `t_i = i·h`.
pub struct Solution<'a> {
    model: &'a ModelDef,
    h: f64,
    states: Vec<Vec<f64>>,
    rates: Vec<Vec<f64>>,
}

impl Solution<'_> {
    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| i as f64 * self.h).collect()
    }

    /// State at time `t ∈ [-history_span, T]`.
    pub fn value(&self, t: f64, out: &mut [f64]) {
        lookup(self.model, self.h, &self.states, &self.rates, t, out);
    }

    /// Right-hand side of every component at `t`; for RE components this is
    /// the value of the renewal functional.
    pub fn rhs(&self, t: f64) -> Vec<f64> {
        let n = self.model.n_states();
        let mut current = vec![0.0; n];
        self.value(t, &mut current);
        let past = |s: f64, out: &mut [f64]| lookup(self.model, self.h, &self.states, &self.rates, s, out);
        (0..n).map(|j| component_rhs(self.model, j, &current, t, &past)).collect()
    }

    /// Samples at `times` with exact right-hand-side derivatives for DIDE
    /// components (NaN for RE components) and the initial function recorded
    /// as history.
    pub fn sample(&self, times: &[f64]) -> Result<Trajectory> {
        let n = self.model.n_states();
        let t_end = (self.states.len() - 1) as f64 * self.h;
        if times.iter().any(|&t| t < 0.0 || t > t_end * (1.0 + 1e-12)) {
            return Err(Error::InvalidModel(format!("sample times must lie in [0, {t_end}]")));
        }
        let mut states = DMatrix::zeros(times.len(), n);
        let mut derivs = DMatrix::from_element(times.len(), n, f64::NAN);
        let mut buf = vec![0.0; n];
        for (i, &t) in times.iter().enumerate() {
            self.value(t, &mut buf);
            states.row_mut(i).copy_from_slice(&buf);
            let rhs = self.rhs(t);
            for (j, c) in self.model.components.iter().enumerate() {
                if c.kind == EquationKind::Dide {
                    derivs[(i, j)] = rhs[j];
                }
            }
        }
        let history = match &self.model.history {
            InitialFunction::Constant(v) => History::constant(-self.model.history_span, 0.0, v)?,
            InitialFunction::Function(f) => {
                let count = ((self.model.history_span / self.h).ceil() as usize).max(1) + 1;
                let ht: Vec<f64> = (0..count)
                    .map(|i| -self.model.history_span * (1.0 - i as f64 / (count - 1) as f64))
                    .collect();
                let mut hv = DMatrix::zeros(count, n);
                for (i, &t) in ht.iter().enumerate() {
                    f(t, &mut buf);
                    hv.row_mut(i).copy_from_slice(&buf);
                }
                History::new(ht, hv)?
            }
        };
        Trajectory::new(times.to_vec(), states)?
            .with_derivatives(derivs, DerivativeSource::Exact)?
            .with_history(history)
    }

    /// The solution on its own grid.
    pub fn trajectory(&self) -> Result<Trajectory> {
        self.sample(&self.grid())
    }
}

fn hermite(t0: f64, t1: f64, y0: f64, y1: f64, d0: f64, d1: f64, t: f64) -> f64 {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * h * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * h * d1
}

/// Value of the computed solution (or initial function) at `t`: cubic
/// Hermite for DIDE components, linear for RE components.
fn lookup(model: &ModelDef, h: f64, states: &[Vec<f64>], rates: &[Vec<f64>], t: f64, out: &mut [f64]) {
    if t < -1e-9 * h {
        model.history.eval(t, out);
        return;
    }
    let last = states.len() - 1;
    let pos = t.max(0.0) / h;
    let mut k = pos.floor() as usize;
    if k >= last {
        // At (or rounding past) the newest grid point.
        debug_assert!(pos <= last as f64 + 1e-6, "lookup at {t} beyond computed range");
        out.copy_from_slice(&states[last]);
        return;
    }
    if pos - (k as f64) > 1.0 - 1e-12 {
        k += 1;
        if k >= last {
            out.copy_from_slice(&states[last]);
            return;
        }
    }
    let (t0, t1) = (k as f64 * h, (k + 1) as f64 * h);
    for (j, c) in model.components.iter().enumerate() {
        let (y0, y1) = (states[k][j], states[k + 1][j]);
        out[j] = match c.kind {
            EquationKind::Dide => hermite(t0, t1, y0, y1, rates[k][j], rates[k + 1][j], t),
            EquationKind::Re => y0 + (y1 - y0) * (t - t0) / h,
        };
    }
}

/// Right-hand side of component `j` at time `t` given the current state and
/// a lookup for past values.
fn component_rhs(model: &ModelDef, j: usize, current: &[f64], t: f64, past: &dyn Fn(f64, &mut [f64])) -> f64 {
    let comp = &model.components[j];
    let n = model.n_states();
    let mut total = 0.0;
    if let Some(f) = &comp.instantaneous {
        let lagged = |state: usize, lag: f64| {
            if lag == 0.0 {
                return current[state];
            }
            let mut buf = vec![0.0; n];
            past(t + lag, &mut buf);
            buf[state]
        };
        total += f(current, &lagged);
    }
    let mut buf = vec![0.0; n];
    for term in &comp.distributed {
        let mut acc = 0.0;
        for (&s, &w) in term.rule.nodes().iter().zip(term.rule.weights()) {
            if s == 0.0 {
                buf.copy_from_slice(current);
            } else {
                past(t + s, &mut buf);
            }
            acc += w * (term.kernel)(s, &buf, current);
        }
        total += acc;
    }
    total
}

/// General fixed-step solver: renewal components are evaluated explicitly
/// from strictly lagged values, DIDE components advance by classical RK4.
pub fn solve(model: &ModelDef, t_end: f64, h: f64) -> Result<Solution<'_>> {
    model.validate(h)?;
    let steps = (t_end / h).round() as usize;
    if steps == 0 || ((steps as f64) * h - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::InvalidModel(format!("horizon {t_end} must be a positive multiple of the step {h}")));
    }
    let n = model.n_states();
    let dide: Vec<usize> = (0..n).filter(|&j| model.components[j].kind == EquationKind::Dide).collect();
    let re: Vec<usize> = (0..n).filter(|&j| model.components[j].kind == EquationKind::Re).collect();

    let mut states: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    let mut rates: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);

    // Completes a state at time `t` from DIDE values: renewal components in
    // order, then DIDE rates.
    let complete = |t: f64, x: &mut Vec<f64>, states: &[Vec<f64>], rates: &[Vec<f64>]| -> Vec<f64> {
        let past = |s: f64, out: &mut [f64]| {
            if states.is_empty() {
                model.history.eval(s, out)
            } else {
                lookup(model, h, states, rates, s, out)
            }
        };
        for &j in &re {
            x[j] = component_rhs(model, j, x, t, &past);
        }
        let mut f = vec![0.0; n];
        for &j in &dide {
            f[j] = component_rhs(model, j, x, t, &past);
        }
        f
    };

    let mut x0 = vec![0.0; n];
    model.history.eval(0.0, &mut x0);
    let f0 = complete(0.0, &mut x0, &states, &rates);
    states.push(x0);
    rates.push(f0);

    for i in 0..steps {
        let t = i as f64 * h;
        let xi = states[i].clone();
        let fi = rates[i].clone();
        let stage = |c: f64, k: &[f64], states: &[Vec<f64>], rates: &[Vec<f64>]| {
            let mut x = xi.clone();
            for &j in &dide {
                x[j] = xi[j] + c * h * k[j];
            }
            let f = complete(t + c * h, &mut x, states, rates);
            (x, f)
        };
        // Stage lookups reach at most `t_i + h + σ ≤ t_i` except for nodes
        // at σ = 0, which read the stage value directly.
        let (_, k2) = stage(0.5, &fi, &states, &rates);
        let (_, k3) = stage(0.5, &k2, &states, &rates);
        let (_, k4) = stage(1.0, &k3, &states, &rates);
        let mut next = xi.clone();
        for &j in &dide {
            next[j] = xi[j] + h / 6.0 * (fi[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let f_next = complete(t + h, &mut next, &states, &rates);
        if next.iter().chain(&f_next).any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("non-finite state at t = {}", t + h)));
        }
        states.push(next);
        rates.push(f_next);
    }
    Ok(Solution { model, h, states, rates })
}

fn require_kinds(model: &ModelDef, want: Option<EquationKind>) -> Result<()> {
    if let Some(k) = want {
        if let Some(j) = model.components.iter().position(|c| c.kind != k) {
            return Err(Error::InvalidModel(format!("component {} is not {k}", j + 1)));
        }
    }
    Ok(())
}

/// Renewal equations only; returns the grid trajectory.
pub fn solve_re(model: &ModelDef, t_end: f64, h: f64) -> Result<Trajectory> {
    require_kinds(model, Some(EquationKind::Re))?;
    solve(model, t_end, h)?.trajectory()
}

/// DIDEs only; returns the grid trajectory with exact derivatives.
pub fn solve_dide(model: &ModelDef, t_end: f64, h: f64) -> Result<Trajectory> {
    require_kinds(model, Some(EquationKind::Dide))?;
    solve(model, t_end, h)?.trajectory()
}

/// Mixed RE/DIDE systems.
pub fn solve_coupled(model: &ModelDef, t_end: f64, h: f64) -> Result<Trajectory> {
    solve(model, t_end, h)?.trajectory()
}

/// Gamma density `αⁿ(−σ)^{n−1}e^{ασ}/(n−1)!` on `σ ≤ 0`.
pub fn gamma_density(n: u32, alpha: f64, sigma: f64) -> Result<f64> {
    if sigma > 0.0 {
        return Err(Error::InvalidModel(format!("gamma density is defined for σ ≤ 0, got {sigma}")));
    }
    if n == 0 || !(alpha > 0.0) {
        return Err(Error::InvalidModel(format!("gamma density needs n ≥ 1 and α > 0 (n = {n}, α = {alpha})")));
    }
    let factorial: f64 = (1..n).map(f64::from).product();
    Ok(alpha.powi(n as i32) * (-sigma).powi(n as i32 - 1) * (alpha * sigma).exp() / factorial)
}

/// `m` uniform sample times on `[t0, t1]`.
pub fn uniform_times(t0: f64, t1: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![t0];
    }
    (0..m)
        .map(|i| if i == m - 1 { t1 } else { t0 + (t1 - t0) * i as f64 / (m - 1) as f64 })
        .collect()
}

/// `m` strictly increasing times on `[t0, t1]` whose gaps vary by a seeded
/// log-uniform factor in `[1/spread, spread]`.
pub fn jittered_times(t0: f64, t1: f64, m: usize, spread: f64, seed: u64) -> Vec<f64> {
    if m < 2 {
        return vec![t0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln = spread.max(1.0).ln();
    let gaps: Vec<f64> = (0..m - 1).map(|_| (rng.random_range(-1.0..=1.0) * ln).exp()).collect();
    let total: f64 = gaps.iter().sum();
    let mut out = Vec::with_capacity(m);
    let mut t = t0;
    out.push(t0);
    for g in &gaps[..m - 2] {
        t += (t1 - t0) * g / total;
        out.push(t);
    }
    out.push(t1);
    out
}

/// Simulation model for an identified sparse model, integrating with the
/// model's own quadrature rule.
pub fn model_from_sparse(model: &SparseModel, history: InitialFunction, history_span: f64) -> Result<ModelDef> {
    let rule = match model.discretization {
        Some(d) if model.spec.has_integral() => Some(d.rule()?),
        _ => None,
    };
    let nd = model.spec.distributed.len();
    let nl = model.spec.linked.len();
    let mut components = Vec::with_capacity(model.n_states());
    for j in 0..model.n_states() {
        let col: Vec<f64> = model.xi.column(j).iter().copied().collect();
        let dist: Vec<(f64, crate::library::Atom)> = model
            .spec
            .distributed
            .iter()
            .enumerate()
            .filter(|(k, _)| col[*k] != 0.0)
            .map(|(k, a)| (col[k], a.clone()))
            .chain(
                model
                    .spec
                    .linked
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| col[nd + k] != 0.0)
                    .map(|(k, l)| (col[nd + k] * l.integral_scale, l.integral.clone())),
            )
            .collect();
        let inst: Vec<(f64, crate::library::Atom)> = model
            .spec
            .instantaneous
            .iter()
            .enumerate()
            .filter(|(k, _)| col[nd + nl + k] != 0.0)
            .map(|(k, a)| (col[nd + nl + k], a.clone()))
            .chain(
                model
                    .spec
                    .linked
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| col[nd + k] != 0.0)
                    .map(|(k, l)| (col[nd + k] * l.current_scale, l.current.clone())),
            )
            .collect();
        let mut lags: Vec<f64> = inst
            .iter()
            .flat_map(|(_, a)| {
                a.factors().iter().filter_map(|f| match f {
                    crate::library::Factor::Lagged { lag, .. } => Some(*lag),
                    _ => None,
                })
            })
            .collect();
        lags.sort_by(f64::total_cmp);
        lags.dedup();
        let instantaneous: Option<InstantFn> = (!inst.is_empty()).then(|| {
            Arc::new(move |x: &[f64], lagged: &dyn Fn(usize, f64) -> f64| {
                inst.iter().map(|(c, a)| c * a.eval_instantaneous(x, lagged)).sum()
            }) as InstantFn
        });
        let distributed = match (&rule, dist.is_empty()) {
            (Some(rule), false) => vec![DistributedTerm {
                rule: rule.clone(),
                kernel: Arc::new(move |s: f64, shifted: &[f64], current: &[f64]| {
                    dist.iter().map(|(c, a)| c * a.eval(s, shifted, current)).sum()
                }),
            }],
            _ => Vec::new(),
        };
        components.push(ComponentDef { kind: model.kinds[j], instantaneous, distributed, lags });
    }
    Ok(ModelDef { name: "identified".into(), components, history, history_span })
}
