use std::sync::Arc;

use super::{
    jittered_times, solve, uniform_times, ComponentDef, DistributedTerm, InitialFunction, InstantFn, KernelFn, ModelDef,
};
use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::identify::EquationKind;
use crate::library::{erlang_factor, Params};
use crate::quadrature::{QuadratureKind, QuadratureRule};

pub const BENCHMARKS: [&str; 4] = ["logistic_re", "ricker_simple", "ricker_advanced", "daphnia"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Uniform,
    /// Seeded non-uniform grid, see [`jittered_times`].
    Jittered { spread: f64, seed: u64 },
}

/// How a benchmark dataset is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recipe {
    pub t_end: f64,
    pub samples: usize,
    pub train_fraction: f64,
    pub step: f64,
    pub quadrature: QuadratureKind,
    pub nodes: usize,
    pub sampling: Sampling,
}

impl Recipe {
    pub fn times(&self) -> Vec<f64> {
        match self.sampling {
            Sampling::Uniform => uniform_times(0.0, self.t_end, self.samples),
            Sampling::Jittered { spread, seed } => jittered_times(0.0, self.t_end, self.samples, spread, seed),
        }
    }
}

pub struct Benchmark {
    pub name: &'static str,
    pub model: ModelDef,
    pub recipe: Recipe,
    /// Every model and recipe parameter after overrides.
    pub params: Params,
    /// Generating coefficients as `(equation, label, value)` in the labels of
    /// the benchmark's identification library.
    pub truth: Vec<(usize, String, f64)>,
}

impl Benchmark {
    pub fn truth_refs(&self) -> Vec<(usize, &str, f64)> {
        self.truth.iter().map(|(j, l, c)| (*j, l.as_str(), *c)).collect()
    }

    /// Noiseless samples of the benchmark on its recipe grid.
    pub fn generate(&self) -> Result<Trajectory> {
        solve(&self.model, self.recipe.t_end, self.recipe.step)?.sample(&self.recipe.times())
    }
}

fn take(params: &mut Params, overrides: &Params, defaults: &[(&str, f64)]) {
    for (k, v) in defaults {
        params.insert((*k).to_string(), overrides.get(*k).copied().unwrap_or(*v));
    }
}

fn instant(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Option<InstantFn> {
    Some(Arc::new(move |x: &[f64], _: &dyn Fn(usize, f64) -> f64| f(x)))
}

/// Builds a named benchmark; `overrides` may replace any model parameter
/// (e.g. `beta`) or recipe setting (`t_end`, `m`, `split`, `h`, `k_sim`,
/// `spread`, `seed`, `history`). Constant initial functions are recorded
/// on `[-history, 0]` so that searched windows longer than the true one
/// still see the same rows.
pub fn benchmark(name: &str, overrides: &Params) -> Result<Benchmark> {
    let mut p = Params::new();
    let (recipe_defaults, quadrature): (&[(&str, f64)], QuadratureKind) = match name {
        "logistic_re" => (&[("t_end", 20.0), ("m", 100.0), ("split", 0.5), ("h", 0.005), ("k_sim", 401.0)], QuadratureKind::Trapezoid),
        "ricker_simple" => (&[("t_end", 20.0), ("m", 100.0), ("split", 0.8), ("h", 0.01), ("k_sim", 50.0), ("history", 20.0)], QuadratureKind::Rectangles),
        "ricker_advanced" => (&[("t_end", 20.0), ("m", 500.0), ("split", 0.8), ("h", 0.01), ("k_sim", 500.0), ("history", 20.0)], QuadratureKind::Rectangles),
        "daphnia" => (
            &[("t_end", 50.0), ("m", 1733.0), ("split", 0.8), ("h", 0.01), ("k_sim", 101.0), ("spread", 3.0), ("seed", 0.0), ("history", 8.0)],
            QuadratureKind::Trapezoid,
        ),
        _ => {
            return Err(Error::UnknownBenchmark(name.to_string()))
        }
    };
    let model_defaults: &[(&str, f64)] = match name {
        "logistic_re" => &[("phi", 0.5)],
        "ricker_simple" => &[("d0", 1.0), ("eta", 80f64.ln()), ("d1", 0.0), ("a", 1.0), ("n", 4.0), ("tau", 1.0), ("phi", 0.5)],
        "ricker_advanced" => &[
            ("d0", 1.0),
            ("eta", 80f64.ln()),
            ("d1", 0.5),
            ("a", std::f64::consts::PI / 10.0),
            ("n", 4.0),
            ("tau", 1.0),
            ("phi", 0.5),
        ],
        _ => &[("r", 1.0), ("gamma", 1.0), ("K", 1.0), ("a_star", 3.0), ("a_dagger", 4.0), ("beta", 4.0), ("b0", 0.1)],
    };
    take(&mut p, overrides, recipe_defaults);
    take(&mut p, overrides, model_defaults);
    if let Some(k) = overrides.keys().find(|k| !p.contains_key(*k) && !(name == "daphnia" && *k == "s0")) {
        return Err(Error::Config(format!("benchmark `{name}` has no parameter `{k}`")));
    }
    let samples = p["m"];
    let nodes = p["k_sim"];
    if samples < 2.0 || samples.fract() != 0.0 || nodes < 1.0 || nodes.fract() != 0.0 {
        return Err(Error::Config("`m` and `k_sim` must be positive integers".into()));
    }
    let sampling = if name == "daphnia" {
        if p["seed"] < 0.0 || p["seed"].fract() != 0.0 {
            return Err(Error::Config("`seed` must be a non-negative integer".into()));
        }
        Sampling::Jittered { spread: p["spread"], seed: p["seed"] as u64 }
    } else {
        Sampling::Uniform
    };
    let recipe = Recipe {
        t_end: p["t_end"],
        samples: samples as usize,
        train_fraction: p["split"],
        step: p["h"],
        quadrature,
        nodes: nodes as usize,
        sampling,
    };
    let (model, truth) = match name {
        "logistic_re" => logistic(&p, &recipe)?,
        "daphnia" => {
            let s0 = overrides.get("s0").copied().unwrap_or(1.0 / (p["beta"] * (p["a_dagger"] - p["a_star"])));
            p.insert("s0".into(), s0);
            daphnia(&p, &recipe)?
        }
        _ => ricker(name, &mut p, &recipe)?,
    };
    Ok(Benchmark {
        name: BENCHMARKS.iter().find(|b| **b == name).expect("matched above"),
        model,
        recipe,
        params: p,
        truth,
    })
}

type Built = (ModelDef, Vec<(usize, String, f64)>);

fn logistic(p: &Params, recipe: &Recipe) -> Result<Built> {
    let rule = QuadratureRule::new(recipe.quadrature, recipe.nodes, -3.0, -1.0)?;
    let kernel: KernelFn = Arc::new(|s, x, _| (s + 1.0) * x[0] * (1.0 - x[0]));
    let model = ModelDef {
        name: "logistic_re".into(),
        components: vec![ComponentDef {
            kind: EquationKind::Re,
            instantaneous: None,
            distributed: vec![DistributedTerm { rule, kernel }],
            lags: Vec::new(),
        }],
        history: InitialFunction::Constant(vec![p["phi"]]),
        history_span: 3.0,
    };
    let truth = [("x1d", 1.0), ("sig*x1d", 1.0), ("x1d^2", -1.0), ("sig*x1d^2", -1.0)];
    Ok((model, truth.iter().map(|(l, c)| (0, l.to_string(), *c)).collect()))
}

/// `x' = d0 (∫ F e^{η + d1 σ − a x(t+σ)} x(t+σ) dσ − x)` with a gamma kernel
/// of shape `n` and mean `τ`, truncated to `[−10τ, 0]`.
fn ricker(name: &str, p: &mut Params, recipe: &Recipe) -> Result<Built> {
    let (d0, eta, d1, a, n, tau) = (p["d0"], p["eta"], p["d1"], p["a"], p["n"], p["tau"]);
    if !(n >= 1.0 && n.fract() == 0.0 && tau > 0.0) {
        return Err(Error::Config(format!("gamma kernel needs integer n ≥ 1 and τ > 0 (n = {n}, τ = {tau})")));
    }
    let alpha = n / tau;
    let factorial: f64 = (1..n as u32).map(f64::from).product();
    let gamma = -d0 * eta.exp() * alpha.powf(n) / factorial;
    p.insert("alpha".into(), alpha);
    p.insert("gamma".into(), gamma);
    let rule = QuadratureRule::new(recipe.quadrature, recipe.nodes, -10.0 * tau, 0.0)?;
    let scale = d0 * eta.exp();
    let kernel: KernelFn = Arc::new(move |s, x, _| {
        scale * erlang_factor(n, tau, s) * ((alpha + d1) * s - a * x[0]).exp() * x[0]
    });
    let model = ModelDef {
        name: name.into(),
        components: vec![ComponentDef {
            kind: EquationKind::Dide,
            instantaneous: instant(move |x| -d0 * x[0]),
            distributed: vec![DistributedTerm { rule, kernel }],
            lags: Vec::new(),
        }],
        history: InitialFunction::Constant(vec![p["phi"]]),
        history_span: p["history"].max(10.0 * tau),
    };
    let mut truth = vec![(0, "x1".to_string(), -d0)];
    if d1 == 0.0 && n == 4.0 {
        truth.insert(0, (0, format!("sig^3*exp({alpha}*sig)*exp(-{a}*x1d)*x1d"), gamma));
    }
    Ok((model, truth))
}

/// `b(t) = β S(t) ∫_{−a†}^{−a*} b(t+σ) dσ`,
/// `S'(t) = r S (1 − S/K) − γ S ∫_{−a†}^{−a*} b(t+σ) dσ`.
fn daphnia(p: &Params, recipe: &Recipe) -> Result<Built> {
    let (r, gamma, k, beta) = (p["r"], p["gamma"], p["K"], p["beta"]);
    let (a_star, a_dagger) = (p["a_star"], p["a_dagger"]);
    if !(0.0 < a_star && a_star < a_dagger) {
        return Err(Error::Config(format!("need 0 < a_star < a_dagger (got {a_star}, {a_dagger})")));
    }
    let rule = QuadratureRule::new(recipe.quadrature, recipe.nodes, -a_dagger, -a_star)?;
    let birth: KernelFn = Arc::new(move |_, x, current| beta * current[1] * x[0]);
    let consumption: KernelFn = Arc::new(move |_, x, current| -gamma * current[1] * x[0]);
    let model = ModelDef {
        name: "daphnia".into(),
        components: vec![
            ComponentDef {
                kind: EquationKind::Re,
                instantaneous: None,
                distributed: vec![DistributedTerm { rule: rule.clone(), kernel: birth }],
                lags: Vec::new(),
            },
            ComponentDef {
                kind: EquationKind::Dide,
                instantaneous: instant(move |x| r * x[1] * (1.0 - x[1] / k)),
                distributed: vec![DistributedTerm { rule, kernel: consumption }],
                lags: Vec::new(),
            },
        ],
        history: InitialFunction::Constant(vec![p["b0"], p["s0"]]),
        history_span: p["history"].max(a_dagger),
    };
    let truth = vec![
        (0, "x1d*x2".to_string(), beta),
        (1, "x1d*x2".to_string(), -gamma),
        (1, "x2".to_string(), r),
        (1, "x2^2".to_string(), -r / k),
    ];
    Ok((model, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::gamma_density;

    fn none() -> Params {
        Params::new()
    }

    fn over(pairs: &[(&str, f64)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn unknown_names_list_the_valid_ones() {
        let err = benchmark("nosuch", &none()).err().unwrap().to_string();
        for name in BENCHMARKS {
            assert!(err.contains(name), "{err}");
        }
        assert!(benchmark("logistic_re", &over(&[("beta", 1.0)])).is_err());
    }

    #[test]
    fn logistic_kernel_and_initial_value() {
        let b = benchmark("logistic_re", &none()).unwrap();
        let term = &b.model.components[0].distributed[0];
        assert_eq!((term.kernel)(-2.0, &[0.5], &[0.5]), -0.25);
        let traj = b.generate().unwrap();
        assert_eq!(traj.len(), 100);
        assert_eq!(*traj.times().last().unwrap(), 20.0);
        assert!((traj.states()[(0, 0)] + 0.5).abs() <= 1e-12);
    }

    #[test]
    fn logistic_zero_history_stays_zero() {
        let b = benchmark("logistic_re", &over(&[("phi", 0.0)])).unwrap();
        let traj = b.generate().unwrap();
        assert!(traj.states().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logistic_stepper_self_converges() {
        let coarse = benchmark("logistic_re", &over(&[("h", 0.02)])).unwrap().generate().unwrap();
        let fine = benchmark("logistic_re", &over(&[("h", 0.01)])).unwrap().generate().unwrap();
        let finer = benchmark("logistic_re", &over(&[("h", 0.005)])).unwrap().generate().unwrap();
        let sup = |a: &Trajectory, b: &Trajectory| (a.states() - b.states()).amax();
        let (e1, e2) = (sup(&coarse, &fine), sup(&fine, &finer));
        assert!(e2 <= 0.02 && e2 <= e1, "{e1} {e2}");
    }

    #[test]
    fn ricker_simple_gamma() {
        let b = benchmark("ricker_simple", &none()).unwrap();
        assert!((b.params["gamma"] + 10240.0 / 3.0).abs() <= 1e-9);
        assert_eq!(b.truth[0].1, "sig^3*exp(4*sig)*exp(-1*x1d)*x1d");
    }

    fn constant_rhs(model: &ModelDef, x: f64) -> f64 {
        let c = &model.components[0];
        let f = c.instantaneous.as_ref().unwrap();
        let t = &c.distributed[0];
        f(&[x], &|_, _| x) + t.rule.nodes().iter().zip(t.rule.weights()).map(|(&s, &w)| w * (t.kernel)(s, &[x], &[x])).sum::<f64>()
    }

    #[test]
    fn ricker_equilibria() {
        let exact = benchmark("ricker_simple", &over(&[("k_sim", 129.0)])).unwrap();
        // With a high-order rule the residual at ln 80 is the truncation tail.
        let fine = ModelDef {
            components: vec![ComponentDef {
                distributed: vec![DistributedTerm {
                    rule: QuadratureRule::new(QuadratureKind::ClenshawCurtis, 129, -10.0, 0.0).unwrap(),
                    kernel: exact.model.components[0].distributed[0].kernel.clone(),
                }],
                ..exact.model.components[0].clone()
            }],
            ..exact.model.clone()
        };
        assert!(constant_rhs(&fine, 80f64.ln()).abs() <= 1e-6);

        let adv = ModelDef {
            components: vec![ComponentDef {
                distributed: vec![DistributedTerm {
                    rule: QuadratureRule::new(QuadratureKind::ClenshawCurtis, 129, -10.0, 0.0).unwrap(),
                    kernel: benchmark("ricker_advanced", &none()).unwrap().model.components[0].distributed[0].kernel.clone(),
                }],
                ..fine.components[0].clone()
            }],
            ..fine.clone()
        };
        let x = 10.0 / std::f64::consts::PI * (80.0 * (8.0f64 / 9.0).powi(4)).ln();
        assert!(constant_rhs(&adv, x).abs() <= 1e-6);
    }

    #[test]
    fn ricker_discrete_equilibrium_is_preserved() {
        let b = benchmark("ricker_simple", &none()).unwrap();
        let t = &b.model.components[0].distributed[0];
        let mass: f64 = t.rule.nodes().iter().zip(t.rule.weights()).map(|(&s, &w)| w * gamma_density(4, 4.0, s).unwrap()).sum();
        let x = (80.0 * mass).ln();
        let model = ModelDef { history: InitialFunction::Constant(vec![x]), ..b.model.clone() };
        let traj = solve(&model, 20.0, 0.01).unwrap().trajectory().unwrap();
        assert!(traj.states().iter().all(|v| (v - x).abs() <= 1e-10));
        assert!(traj.derivs().unwrap().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn daphnia_history_and_truth() {
        let b = benchmark("daphnia", &none()).unwrap();
        assert_eq!(b.params["s0"], 0.25);
        let traj = b.generate().unwrap();
        assert_eq!(traj.len(), 1733);
        assert!((traj.states()[(0, 0)] - 0.1).abs() <= 1e-12);
        assert!(traj.derivs().unwrap().column(0).iter().all(|v| v.is_nan()));
        // β = 4 lies past the Hopf point: S keeps oscillating late in the run.
        let late: Vec<f64> = (0..traj.len()).filter(|&i| traj.times()[i] > 30.0).map(|i| traj.states()[(i, 1)]).collect();
        let spread = late.iter().cloned().fold(f64::MIN, f64::max) - late.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 1e-2, "{spread}");
    }

    #[test]
    fn daphnia_without_consumers_is_logistic() {
        let b = benchmark("daphnia", &over(&[("b0", 0.0), ("s0", 0.1)])).unwrap();
        let traj = b.generate().unwrap();
        for (i, &t) in traj.times().iter().enumerate() {
            let exact = 1.0 / (1.0 + 9.0 * (-t).exp());
            assert_eq!(traj.states()[(i, 0)], 0.0);
            assert!((traj.states()[(i, 1)] - exact).abs() <= 1e-8);
        }
    }

    #[test]
    fn daphnia_below_the_transcritical_point_loses_consumers() {
        let b = benchmark("daphnia", &over(&[("beta", 0.8), ("s0", 1.0)])).unwrap();
        let traj = b.generate().unwrap();
        assert!(traj.states()[(traj.len() - 1, 0)] < 1e-2);
        assert!((traj.states()[(traj.len() - 1, 1)] - 1.0).abs() < 1e-2);
    }
}
