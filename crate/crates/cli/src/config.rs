use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ddsindy::dataset::{add_noise, load_trajectory, Trajectory};
use ddsindy::identify::{Discretization, EquationKind};
use ddsindy::library::{distributed_monomials, enumerate_monomials, Atom, LibrarySpec, Params, Symbol};
use ddsindy::optimize::{BindTarget, ParamDef, ParamSpace, SwarmConfig};
use ddsindy::presets::{preset, Preset};
use ddsindy::quadrature::QuadratureKind;
use ddsindy::regression::SolverConfig;
use ddsindy::simulate::{benchmark, Benchmark};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    pub library: Option<LibrarySection>,
    pub quadrature: Option<QuadratureSection>,
    pub solver: Option<SolverSection>,
    pub optimize: Option<OptimizeSection>,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub benchmark: Option<String>,
    pub path: Option<PathBuf>,
    /// Benchmark model and recipe overrides.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Params,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    pub split: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySection {
    pub degree: Option<u32>,
    /// Equation kinds per state, `RE` or `DIDE`.
    pub kinds: Option<Vec<String>>,
    /// Base symbols for polynomial enumeration: `sig`, `x1d` (shifted), `x1` (current).
    pub symbols: Option<Vec<String>>,
    /// Explicit atom labels; replaces the enumerated library.
    pub atoms: Option<Vec<String>>,
    #[serde(default)]
    pub keep_pure_current: bool,
    /// Values for parameter slots in atoms when not searched.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Params,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Window {
    Fixed([f64; 2]),
    Keyword(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSection {
    pub kind: Option<String>,
    #[serde(rename = "K")]
    pub nodes: Option<usize>,
    pub window: Option<Window>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: Option<String>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub integer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapEntry {
    pub larger: String,
    pub smaller: String,
    pub gap: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    #[serde(default)]
    pub params: BTreeMap<String, ParamEntry>,
    #[serde(default)]
    pub bind: BTreeMap<String, String>,
    #[serde(default)]
    pub min_gap: Vec<GapEntry>,
    pub particles: Option<usize>,
    pub inertia: Option<f64>,
    pub cognitive: Option<f64>,
    pub social: Option<f64>,
    pub max_evals: Option<usize>,
    pub stall_tol: Option<f64>,
    pub stall_iters: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub dir: Option<PathBuf>,
    #[serde(default = "default_precision")]
    pub precision: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { dir: None, precision: default_precision() }
    }
}

fn default_precision() -> usize {
    6
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub benchmark: Option<String>,
    pub data: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub nodes: Option<usize>,
    pub quadrature: Option<String>,
    pub seed: Option<u64>,
    pub split: Option<f64>,
    pub degree: Option<u32>,
    pub noise: Option<f64>,
    pub set: Vec<(String, f64)>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(b) = &o.benchmark {
            self.data.benchmark = Some(b.clone());
            self.data.path = None;
        }
        if let Some(p) = &o.data {
            self.data.path = Some(p.clone());
            self.data.benchmark = None;
        }
        if let Some(n) = o.noise {
            self.data.noise = n;
        }
        if let Some(s) = o.seed {
            self.data.seed = s;
            if let Some(opt) = &mut self.optimize {
                opt.seed = Some(s);
            }
        }
        if let Some(s) = o.split {
            self.data.split = Some(s);
        }
        for (k, v) in &o.set {
            self.data.params.insert(k.clone(), *v);
        }
        if let Some(d) = o.degree {
            self.library.get_or_insert_with(Default::default).degree = Some(d);
        }
        if o.nodes.is_some() || o.quadrature.is_some() {
            let q = self.quadrature.get_or_insert_with(Default::default);
            if o.nodes.is_some() {
                q.nodes = o.nodes;
            }
            if o.quadrature.is_some() {
                q.kind = o.quadrature.clone();
            }
        }
        if let Some(l) = o.lambda {
            self.solver.get_or_insert_with(Default::default).lambda = Some(l);
        }
    }

    pub fn benchmark(&self) -> Result<Option<Benchmark>, CliError> {
        match &self.data.benchmark {
            Some(name) => Ok(Some(benchmark(name, &self.data.params)?)),
            None => Ok(None),
        }
    }

    /// Short name used for output directories.
    pub fn run_name(&self) -> String {
        if let Some(b) = &self.data.benchmark {
            return b.clone();
        }
        self.data
            .path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map_or("run".to_string(), |s| s.to_string_lossy().into_owned())
    }

    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(d) = &self.report.dir {
            return d.clone();
        }
        let root = std::env::var_os("DDSINDY_OUT").map_or(PathBuf::from("out"), PathBuf::from);
        root.join(self.run_name())
    }
}

/// Everything an identification run needs after resolving config, preset
/// and overrides.
pub struct Resolved {
    pub bench: Option<Benchmark>,
    pub slot_values: Params,
    pub degree: Option<u32>,
    pub data: Trajectory,
    pub split: f64,
    pub kinds: Vec<EquationKind>,
    pub spec: LibrarySpec,
    pub discretization: Discretization,
    pub solver: SolverConfig,
    pub space: Option<ParamSpace>,
    pub swarm: SwarmConfig,
}

fn parse_symbol(s: &str) -> Result<Symbol, CliError> {
    let bad = || CliError::Usage(format!("unknown symbol `{s}` (expected sig, xN or xNd)"));
    if s == "sig" {
        return Ok(Symbol::Sigma);
    }
    let rest = s.strip_prefix('x').ok_or_else(bad)?;
    let (digits, shifted) = match rest.strip_suffix('d') {
        Some(d) => (d, true),
        None => (rest, false),
    };
    let idx: usize = digits.parse().map_err(|_| bad())?;
    if idx == 0 {
        return Err(bad());
    }
    Ok(if shifted { Symbol::Shifted(idx - 1) } else { Symbol::Current(idx - 1) })
}

fn library_from_section(lib: &LibrarySection, degree: u32) -> Result<Option<LibrarySpec>, CliError> {
    if let Some(atoms) = &lib.atoms {
        return Ok(Some(LibrarySpec::from_labels(atoms)?));
    }
    let Some(names) = &lib.symbols else {
        return Ok(None);
    };
    let symbols = names.iter().map(|s| parse_symbol(s)).collect::<Result<Vec<_>, _>>()?;
    let distributed: Vec<Atom> = distributed_monomials(&symbols, degree, lib.keep_pure_current)
        .into_iter()
        .filter(|a| a.is_distributed() && !a.is_constant())
        .collect();
    let current: Vec<Symbol> = symbols.iter().copied().filter(|s| matches!(s, Symbol::Current(_))).collect();
    let instantaneous = if current.is_empty() { Vec::new() } else { enumerate_monomials(&current, degree) };
    Ok(Some(LibrarySpec::new(distributed, instantaneous)?))
}

fn space_from_section(o: &OptimizeSection) -> Result<ParamSpace, CliError> {
    let params = o
        .params
        .iter()
        .map(|(name, p)| ParamDef { name: name.clone(), lower: p.min, upper: p.max, integer: p.integer })
        .collect();
    let mut space = ParamSpace::new(params)?;
    for (target, expr) in &o.bind {
        let target: BindTarget = target.parse()?;
        space = space.bind(target, expr)?;
    }
    for g in &o.min_gap {
        space = space.min_gap(&g.larger, &g.smaller, g.gap)?;
    }
    Ok(space)
}

fn swarm_from_section(base: SwarmConfig, o: &OptimizeSection) -> SwarmConfig {
    SwarmConfig {
        particles: o.particles.unwrap_or(base.particles),
        inertia: o.inertia.unwrap_or(base.inertia),
        cognitive: o.cognitive.unwrap_or(base.cognitive),
        social: o.social.unwrap_or(base.social),
        max_evals: o.max_evals.unwrap_or(base.max_evals),
        stall_tol: o.stall_tol.unwrap_or(base.stall_tol),
        stall_iters: o.stall_iters.unwrap_or(base.stall_iters),
        seed: o.seed.unwrap_or(base.seed),
    }
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let bench = self.benchmark()?;
        let lib = self.library.clone().unwrap_or_default();
        let preset: Option<Preset> = match &bench {
            Some(b) => Some(preset(b.name, lib.degree)?),
            None => None,
        };
        let mut data = match (&bench, &self.data.path) {
            (Some(b), _) => b.generate()?,
            (None, Some(p)) => load_trajectory(p)?,
            (None, None) => return Err(CliError::Usage("[data] needs `benchmark` or `path`".into())),
        };
        if self.data.noise > 0.0 {
            data = add_noise(&data, self.data.noise, self.data.seed)?;
        }
        let split = self
            .data
            .split
            .or(bench.as_ref().map(|b| b.recipe.train_fraction))
            .unwrap_or(0.8);

        let degree = lib.degree.or(preset.as_ref().map(|p| p.degree)).unwrap_or(2);
        let spec = match (library_from_section(&lib, degree)?, &preset) {
            (Some(s), _) => s,
            (None, Some(p)) => p.spec.clone(),
            (None, None) => {
                return Err(CliError::Usage("[library] needs `atoms` or `symbols` when no benchmark is given".into()))
            }
        };
        let kinds = match (&lib.kinds, &preset) {
            (Some(k), _) => k.iter().map(|s| s.parse()).collect::<Result<Vec<EquationKind>, _>>()?,
            (None, Some(p)) => p.kinds.clone(),
            (None, None) => vec![EquationKind::Dide; data.n_states()],
        };

        let q = self.quadrature.clone().unwrap_or_default();
        let base = preset.as_ref().map(|p| p.discretization);
        let kind: QuadratureKind = match &q.kind {
            Some(k) => k.parse()?,
            None => base.map_or(QuadratureKind::Trapezoid, |d| d.kind),
        };
        let nodes = q.nodes.or(base.map(|d| d.nodes)).unwrap_or(50);
        let (window, optimized_window) = match &q.window {
            Some(Window::Fixed([a, b])) => ((*a, *b), false),
            Some(Window::Keyword(k)) if k == "optimize" => (base.map_or((-1.0, 0.0), |d| (d.lower, d.upper)), true),
            Some(Window::Keyword(k)) => {
                return Err(CliError::Usage(format!("window must be [lower, upper] or \"optimize\", got `{k}`")))
            }
            None => match base {
                Some(d) => ((d.lower, d.upper), false),
                None if spec.has_integral() => {
                    return Err(CliError::Usage("[quadrature] needs a window for integral atoms".into()))
                }
                None => ((-1.0, 0.0), false),
            },
        };
        let discretization = Discretization::new(kind, nodes, window.0, window.1);

        let s = self.solver.clone().unwrap_or_default();
        let mut solver = preset.as_ref().map_or_else(|| SolverConfig::stls(1e-2), |p| p.solver.clone());
        if let Some(m) = &s.method {
            solver.solver = m.parse()?;
        }
        if let Some(l) = s.lambda {
            solver.lambda = l;
        }

        let base_swarm = preset.as_ref().map_or_else(SwarmConfig::default, |p| p.swarm.clone());
        let (space, swarm) = match &self.optimize {
            Some(o) if !o.params.is_empty() => (Some(space_from_section(o)?), swarm_from_section(base_swarm, o)),
            Some(o) => (preset.as_ref().and_then(|p| p.space.clone()), swarm_from_section(base_swarm, o)),
            None => (preset.as_ref().and_then(|p| p.space.clone()), base_swarm),
        };
        if let Some(sp) = &space {
            let binds_window = sp
                .bindings
                .iter()
                .any(|(t, _)| matches!(t, BindTarget::WindowLower | BindTarget::WindowUpper));
            if binds_window && matches!(q.window, Some(Window::Fixed(_))) {
                return Err(CliError::Usage(
                    "the window is both fixed in [quadrature] and bound to search parameters".into(),
                ));
            }
            if optimized_window && !binds_window {
                return Err(CliError::Usage("window = \"optimize\" needs a window binding in [optimize.bind]".into()));
            }
        }
        Ok(Resolved {
            bench,
            slot_values: lib.params.clone(),
            degree: lib.degree,
            data,
            split,
            kinds,
            spec,
            discretization,
            solver,
            space,
            swarm,
        })
    }
}
