//! Identification settings matching each benchmark.

use crate::error::{Error, Result};
use crate::identify::{Discretization, EquationKind};
use crate::library::{
    distributed_monomials, enumerate_monomials, with_multipliers, Atom, Factor, LibrarySpec, ParamValue, Symbol,
};
use crate::quadrature::QuadratureKind;
use crate::optimize::{BindTarget, ParamDef, ParamSpace, SwarmConfig};
use crate::regression::SolverConfig;

#[derive(Debug, Clone)]
pub struct Preset {
    pub kinds: Vec<EquationKind>,
    pub spec: LibrarySpec,
    pub discretization: Discretization,
    pub solver: SolverConfig,
    pub degree: u32,
    /// Default outer search, for benchmarks with unknown parameters.
    pub space: Option<ParamSpace>,
    pub swarm: SwarmConfig,
}

fn param(name: &str, lower: f64, upper: f64, integer: bool) -> ParamDef {
    ParamDef { name: name.to_string(), lower, upper, integer }
}

fn slot(name: &str) -> ParamValue {
    ParamValue::Slot(name.to_string())
}

/// Default identification setup for a benchmark; `degree` overrides the
/// polynomial degree of the library.
pub fn preset(name: &str, degree: Option<u32>) -> Result<Preset> {
    match name {
        "logistic_re" => {
            let d = degree.unwrap_or(3);
            let spec = LibrarySpec::new(distributed_monomials(&[Symbol::Sigma, Symbol::Shifted(0)], d, true), Vec::new())?;
            Ok(Preset {
                kinds: vec![EquationKind::Re],
                spec,
                discretization: Discretization::new(QuadratureKind::Trapezoid, 128, -3.0, -1.0),
                solver: SolverConfig::stls(1e-5),
                degree: d,
                space: None,
                swarm: SwarmConfig::default(),
            })
        }
        "ricker_simple" => {
            let d = degree.unwrap_or(4);
            let base = enumerate_monomials(&[Symbol::Sigma, Symbol::Shifted(0)], d);
            let multipliers = [
                Factor::ExpDelay(ParamValue::Fixed(4.0)),
                Factor::ExpNegState { state: 0, rate: ParamValue::Fixed(1.0) },
            ];
            let spec = LibrarySpec::new(with_multipliers(&base, &multipliers)?, ricker_instantaneous())?;
            Ok(Preset {
                kinds: vec![EquationKind::Dide],
                spec,
                discretization: Discretization::new(QuadratureKind::Rectangles, 50, -10.0, 0.0),
                solver: SolverConfig::stls(1e-2),
                degree: d,
                space: None,
                swarm: SwarmConfig::default(),
            })
        }
        "ricker_advanced" => {
            let integral = Atom::new(vec![
                Factor::Erlang { shape: slot("n"), mean: slot("tau") },
                Factor::ExpDelay(slot("rate")),
                Factor::ExpNegState { state: 0, rate: slot("a") },
                Factor::Shifted { state: 0, power: 1 },
            ])?;
            let current = Atom::new(vec![Factor::Current { state: 0, power: 1 }])?;
            Ok(Preset {
                kinds: vec![EquationKind::Dide],
                spec: LibrarySpec::new(vec![integral], vec![current])?,
                discretization: Discretization::new(QuadratureKind::Trapezoid, 100, -10.0, 0.0),
                solver: SolverConfig::stls(1e-2),
                degree: 1,
                space: Some(
                    ParamSpace::new(vec![
                        param("n", 1.0, 8.0, true),
                        param("tau", 0.5, 2.0, false),
                        param("rate", 2.0, 8.0, false),
                        param("a", 0.05, 1.0, false),
                    ])?
                    .bind(BindTarget::WindowLower, "-10*tau")?,
                ),
                swarm: SwarmConfig { inertia: 0.6, stall_iters: 30, ..SwarmConfig::default() },
            })
        }
        "daphnia" => {
            let d = degree.unwrap_or(2);
            let distributed = distributed_monomials(&[Symbol::Shifted(0), Symbol::Shifted(1), Symbol::Current(1)], d, false)
                .into_iter()
                .filter(|a| !a.is_constant())
                .collect();
            let instantaneous = enumerate_monomials(&[Symbol::Current(1)], d);
            Ok(Preset {
                kinds: vec![EquationKind::Re, EquationKind::Dide],
                spec: LibrarySpec::new(distributed, instantaneous)?,
                discretization: Discretization::new(QuadratureKind::Trapezoid, 8, -4.0, -3.0),
                solver: SolverConfig::stls(1e-3),
                degree: d,
                space: Some(
                    ParamSpace::new(vec![param("a_star", 1.0, 5.0, false), param("a_dagger", 1.5, 8.0, false)])?
                        .bind(BindTarget::WindowLower, "-a_dagger")?
                        .bind(BindTarget::WindowUpper, "-a_star")?
                        .min_gap("a_dagger", "a_star", 0.5)?,
                ),
                swarm: SwarmConfig::default(),
            })
        }
        other => Err(Error::UnknownBenchmark(other.to_string())),
    }
}

fn ricker_instantaneous() -> Vec<Atom> {
    enumerate_monomials(&[Symbol::Current(0)], 1)
}
