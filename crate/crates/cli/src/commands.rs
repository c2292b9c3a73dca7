use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use ddsindy::dataset::{add_noise, split, write_csv, SplitSpec, Trajectory};
use ddsindy::identify::{
    bb_sindy, coefficient_errors, dd_sindy, reconstruction_error, render_model, targets, write_model, Discretization,
    FitReport, SparseModel,
};
use ddsindy::library::Params;
use ddsindy::optimize::{ricker_gamma, ricker_postprocess, ricker_tau_from_fit, search, Optimum, Problem};
use ddsindy::presets::preset;
use ddsindy::quadrature::QuadratureKind;
use ddsindy::regression::SolverConfig;
use ddsindy::simulate::{benchmark, Benchmark};

use crate::config::{Resolved, RunConfig};
use crate::report::{self, Row};
use crate::{at, CliError, Method};

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Usage(format!("cannot serialise config: {e}")))?;
    write(dir.join("config.toml"), text)
}

#[derive(Serialize)]
struct TruthEntry {
    equation: usize,
    term: String,
    value: f64,
}

#[derive(Serialize)]
struct Metadata {
    benchmark: String,
    samples: usize,
    t_end: f64,
    step: f64,
    quadrature: String,
    nodes: usize,
    train_fraction: f64,
    noise: f64,
    seed: u64,
    params: Params,
    truth: Vec<TruthEntry>,
}

pub fn simulate(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let bench = cfg.benchmark()?.ok_or_else(|| CliError::Usage("simulate needs --benchmark or [data] benchmark".into()))?;
    let mut traj = bench.generate().map_err(at("simulation"))?;
    if cfg.data.noise > 0.0 {
        traj = add_noise(&traj, cfg.data.noise, cfg.data.seed)?;
    }
    let mut csv = Vec::new();
    write_csv(&traj, &mut csv)?;
    write(dir.join(format!("{}.csv", bench.name)), csv)?;
    let meta = Metadata {
        benchmark: bench.name.to_string(),
        samples: bench.recipe.samples,
        t_end: bench.recipe.t_end,
        step: bench.recipe.step,
        quadrature: bench.recipe.quadrature.to_string(),
        nodes: bench.recipe.nodes,
        train_fraction: bench.recipe.train_fraction,
        noise: cfg.data.noise,
        seed: cfg.data.seed,
        params: bench.params.clone(),
        truth: bench
            .truth
            .iter()
            .map(|(j, l, v)| TruthEntry { equation: j + 1, term: l.clone(), value: *v })
            .collect(),
    };
    let text = toml::to_string(&meta).map_err(|e| CliError::Usage(format!("cannot serialise metadata: {e}")))?;
    write(dir.join(format!("{}.meta.toml", bench.name)), text)?;
    save_config(cfg, dir)?;
    println!("wrote {} samples of {} to {}", traj.len(), bench.name, dir.display());
    Ok(())
}

/// Coefficient rows. Every library term is compared against zero when the
/// benchmark truth covers the whole library; with searched atom parameters
/// only the listed terms have a reference value.
fn coefficient_rows(run: &str, model: &SparseModel, bench: Option<&Benchmark>, complete: bool) -> Vec<Row> {
    let truth: Vec<(usize, &str, f64)> = bench
        .map(|b| b.truth_refs().into_iter().filter(|(_, l, _)| model.labels.iter().any(|m| m == l)).collect())
        .unwrap_or_default();
    let mut rows = Vec::new();
    if bench.is_some() && complete {
        for (j, label, got, want) in coefficient_errors(model, &truth) {
            rows.push(Row::new(run, "coefficient", j + 1, &label, got, Some(want)));
        }
        return rows;
    }
    for j in 0..model.n_states() {
        for (k, label) in model.labels.iter().enumerate() {
            let value = model.xi[(k, j)];
            let want = truth.iter().find(|(e, l, _)| *e == j && l == label).map(|t| t.2);
            if value != 0.0 || want.is_some() {
                rows.push(Row::new(run, "coefficient", j + 1, label, value, want));
            }
        }
    }
    rows
}

fn fit_table(model: &SparseModel, train: &Trajectory, val: &Trajectory) -> Result<String, CliError> {
    let n = model.n_states();
    let mut out = String::from("t,subset");
    for j in 1..=n {
        write!(out, ",target{j},fitted{j}").unwrap();
    }
    out.push('\n');
    for (subset, traj) in [("train", train), ("val", val)] {
        let (y, _) = targets(traj, &model.kinds)?;
        let (lib, pred) = model.predict(traj)?;
        for (r, &i) in lib.retained_rows().iter().enumerate() {
            write!(out, "{},{subset}", traj.times()[i]).unwrap();
            for j in 0..n {
                write!(out, ",{},{}", y[(i, j)], pred[(r, j)]).unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn kernel_table(model: &SparseModel, data: &Trajectory) -> Option<String> {
    let d = model.discretization?;
    if !model.spec.has_integral() {
        return None;
    }
    let n = model.n_states();
    let states = data.states();
    let mean: Vec<f64> = (0..n).map(|j| states.column(j).mean()).collect();
    let sigmas: Vec<f64> = (0..=100).map(|i| d.lower + (d.upper - d.lower) * i as f64 / 100.0).collect();
    let curves: Vec<Vec<f64>> = (0..n).map(|j| model.evaluate_kernel(j, &sigmas, &mean)).collect();
    let mut out = String::from("sigma");
    for j in 1..=n {
        write!(out, ",g{j}").unwrap();
    }
    out.push('\n');
    for (i, s) in sigmas.iter().enumerate() {
        write!(out, "{s}").unwrap();
        for c in &curves {
            write!(out, ",{}", c[i]).unwrap();
        }
        out.push('\n');
    }
    Some(out)
}

struct Outputs<'a> {
    run: &'a str,
    method: &'a str,
    model: &'a SparseModel,
    fit: &'a FitReport,
    train: &'a Trajectory,
    val: &'a Trajectory,
    data: &'a Trajectory,
    solver: &'a SolverConfig,
    rows: Vec<Row>,
    precision: usize,
}

fn write_outputs(dir: &Path, o: Outputs<'_>) -> Result<(), CliError> {
    let rec = reconstruction_error(o.model, o.train, o.val).map_err(at("evaluation"))?;
    let mut rows = o.rows;
    rows.push(Row::new(o.run, "rmse", 0, "train", rec.train, None));
    rows.push(Row::new(o.run, "rmse", 0, "val", rec.val, None));

    write(dir.join("model.txt"), write_model(o.model))?;
    write(dir.join("report.csv"), report::to_csv(&rows))?;
    write(dir.join("fit.csv"), fit_table(o.model, o.train, o.val)?)?;
    if let Some(k) = kernel_table(o.model, o.data) {
        write(dir.join("kernel.csv"), k)?;
    }

    let mut text = format!("run: {}\nmethod: {}\n", o.run, o.method);
    if let Some(d) = o.model.discretization {
        writeln!(text, "window: [{}, {}], {} with K = {}", d.lower, d.upper, d.kind, d.nodes).unwrap();
    }
    writeln!(text, "solver: {} with lambda = {}", o.solver.solver, o.solver.lambda).unwrap();
    if let Some(src) = o.fit.derivative_source {
        writeln!(text, "derivatives: {src:?}").unwrap();
    }
    for (j, w) in &o.fit.warnings {
        writeln!(text, "warning (equation {}): {w}", j + 1).unwrap();
    }
    writeln!(text, "rmse: train {:.3e}, validation {:.3e}\n", rec.train, rec.val).unwrap();
    text.push_str(&render_model(o.model, o.precision));
    text.push('\n');
    text.push_str(&report::table(&rows, o.precision.min(3)));
    write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn identify(cfg: &RunConfig, dir: &Path, method: Method, name: Option<&str>) -> Result<(), CliError> {
    let r: Resolved = cfg.resolve()?;
    let (train, val) = split(&r.data, SplitSpec::new(r.split)?)?;
    let run = name.map_or_else(
        || match method {
            Method::Dd => cfg.run_name(),
            Method::Bb => format!("{}-bb", cfg.run_name()),
        },
        str::to_string,
    );
    let (model, fit) = match method {
        Method::Dd => {
            let spec = if r.spec.slots().is_empty() { r.spec.clone() } else { r.spec.resolve(&r.slot_values)? };
            dd_sindy(&train, &r.kinds, &spec, r.discretization, &r.solver).map_err(at("identification"))?
        }
        Method::Bb => {
            let lags: Vec<f64> = r.discretization.rule()?.nodes().iter().copied().filter(|&s| s < 0.0).collect();
            bb_sindy(&train, &lags, r.degree.unwrap_or(2), &r.solver).map_err(at("identification"))?
        }
    };
    let complete = method == Method::Dd && r.spec.slots().is_empty();
    let rows = coefficient_rows(&run, &model, r.bench.as_ref(), complete);
    save_config(cfg, dir)?;
    write_outputs(
        dir,
        Outputs {
            run: &run,
            method: match method {
                Method::Dd => "dd-sindy",
                Method::Bb => "bb-sindy",
            },
            model: &model,
            fit: &fit,
            train: &train,
            val: &val,
            data: &r.data,
            solver: &r.solver,
            rows,
            precision: cfg.report.precision,
        },
    )
}

#[derive(Serialize)]
struct OptimumFile {
    objective: f64,
    calls: usize,
    params: Params,
    #[serde(skip_serializing_if = "Option::is_none")]
    ricker: Option<RickerFile>,
}

#[derive(Serialize)]
struct RickerFile {
    n: u32,
    tau: f64,
    alpha: f64,
    d1: f64,
    a: f64,
    d0: f64,
    gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
}

fn ricker_summary(opt: &Optimum, eta: f64) -> Option<RickerFile> {
    if !["n", "tau", "rate", "a"].iter().all(|k| opt.params.contains_key(*k)) {
        return None;
    }
    let params = ricker_tau_from_fit(&opt.params, &opt.model, eta).unwrap_or_else(|_| opt.params.clone());
    let p = ricker_postprocess(&params).ok()?;
    let d0 = -opt.model.coefficient(0, "x1").unwrap_or(0.0);
    Some(RickerFile {
        n: p.n,
        tau: p.tau,
        alpha: p.alpha,
        d1: p.d1,
        a: p.a,
        d0,
        gamma: ricker_gamma(d0, eta, &p),
        warning: p.warning.clone(),
    })
}

pub fn optimize(cfg: &RunConfig, dir: &Path, name: Option<&str>) -> Result<(), CliError> {
    let r = cfg.resolve()?;
    let space = r
        .space
        .clone()
        .ok_or_else(|| CliError::Usage("optimize needs a parameter space in [optimize.params]".into()))?;
    let (train, val) = split(&r.data, SplitSpec::new(r.split)?)?;
    let run = name.map_or_else(|| cfg.run_name(), str::to_string);
    let problem = Problem {
        train: &train,
        val: &val,
        kinds: r.kinds.clone(),
        spec: r.spec.clone(),
        discretization: r.discretization,
        solver: r.solver.clone(),
    };
    save_config(cfg, dir)?;
    let found = search(&space, &r.swarm, &problem).map_err(at("parameter search"))?;
    write(dir.join("trace.csv"), found.trace.to_csv(&space.names()))?;
    let opt = found.finish(&space, &problem).map_err(at("final fit"))?;

    let bench = r.bench.as_ref();
    let truth = |k: &str| bench.and_then(|b| b.params.get(k).copied());
    let mut rows = Vec::new();
    let eta = bench.and_then(|b| b.params.get("eta").copied()).unwrap_or(80f64.ln());
    let ricker = ricker_summary(&opt, eta);
    match &ricker {
        Some(p) => {
            for (k, v) in [("n", p.n as f64), ("tau", p.tau), ("alpha", p.alpha), ("d1", p.d1), ("a", p.a), ("d0", p.d0), ("gamma", p.gamma)] {
                rows.push(Row::new(&run, "optimized", 0, k, v, truth(k)));
            }
        }
        None => {
            for (k, v) in &opt.params {
                rows.push(Row::new(&run, "optimized", 0, k, *v, truth(k)));
            }
        }
    }
    rows.extend(coefficient_rows(&run, &opt.model, bench, r.spec.slots().is_empty()));
    rows.push(Row::new(&run, "search", 0, "objective", opt.objective, None));
    rows.push(Row::new(&run, "search", 0, "calls", opt.calls as f64, None));

    let file = OptimumFile { objective: opt.objective, calls: opt.calls, params: opt.params.clone(), ricker };
    let text = toml::to_string(&file).map_err(|e| CliError::Usage(format!("cannot serialise optimum: {e}")))?;
    write(dir.join("optimum.toml"), text)?;
    println!("optimum after {} objective calls: {:?}", opt.calls, opt.params);
    write_outputs(
        dir,
        Outputs {
            run: &run,
            method: "dd-sindy + particle swarm",
            model: &opt.model,
            fit: &opt.report,
            train: &train,
            val: &val,
            data: &r.data,
            solver: &r.solver,
            rows,
            precision: cfg.report.precision,
        },
    )
}

pub fn report(inputs: &[PathBuf], dir: &Path, precision: usize) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one report CSV (or --sweep)".into()));
    }
    let tables = inputs.iter().map(|p| report::read_csv(p)).collect::<Result<Vec<_>, _>>()?;
    let rows = report::merge(tables);
    let text = report::table(&rows, precision);
    write(dir.join("comparison.csv"), report::to_csv(&rows))?;
    write(dir.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub struct SweepGrid {
    pub nodes: Vec<usize>,
    pub samples: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub kinds: Vec<String>,
}

struct Cell {
    kind: QuadratureKind,
    nodes: usize,
    samples: usize,
    lambda: f64,
}

/// Coefficient error and RMSE over a grid of quadrature kinds, node counts,
/// sample counts and thresholds.
pub fn sweep(name: &str, grid: &SweepGrid, dir: &Path) -> Result<(), CliError> {
    let base = benchmark(name, &Params::new())?;
    let p = preset(name, None)?;
    if !p.spec.slots().is_empty() {
        return Err(CliError::Usage(format!("`{name}` has searched atom parameters; sweeps need a fixed library")));
    }
    let kinds = if grid.kinds.is_empty() {
        QuadratureKind::ALL.to_vec()
    } else {
        grid.kinds.iter().map(|k| k.parse()).collect::<Result<Vec<QuadratureKind>, _>>()?
    };
    let nodes = if grid.nodes.is_empty() { vec![8, 16, 32, 64, 128] } else { grid.nodes.clone() };
    let samples = if grid.samples.is_empty() { vec![base.recipe.samples] } else { grid.samples.clone() };
    let lambdas = if grid.lambdas.is_empty() { vec![p.solver.lambda] } else { grid.lambdas.clone() };

    let mut data = BTreeMap::new();
    for &m in &samples {
        let b = benchmark(name, &[("m".to_string(), m as f64)].into_iter().collect())?;
        let traj = b.generate().map_err(at("simulation"))?;
        data.insert(m, (split(&traj, SplitSpec::new(b.recipe.train_fraction)?)?, b.truth));
    }
    let mut cells = Vec::new();
    for &kind in &kinds {
        for &k in &nodes {
            for &m in &samples {
                for &lambda in &lambdas {
                    cells.push(Cell { kind, nodes: k, samples: m, lambda });
                }
            }
        }
    }
    let results: Vec<(f64, f64, f64)> = cells
        .par_iter()
        .map(|c| {
            let ((train, val), truth) = &data[&c.samples];
            let truth: Vec<(usize, &str, f64)> = truth.iter().map(|(j, l, v)| (*j, l.as_str(), *v)).collect();
            let disc = Discretization::new(c.kind, c.nodes, p.discretization.lower, p.discretization.upper);
            let solver = SolverConfig { lambda: c.lambda, ..p.solver.clone() };
            dd_sindy(train, &p.kinds, &p.spec, disc, &solver)
                .and_then(|(model, _)| {
                    let rec = reconstruction_error(&model, train, val)?;
                    let err = coefficient_errors(&model, &truth)
                        .iter()
                        .map(|(_, _, g, w)| (g - w).abs())
                        .fold(0.0, f64::max);
                    Ok((err, rec.train, rec.val))
                })
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN))
        })
        .collect();

    let mut csv = String::from("quadrature,K,m,lambda,coef_error,rmse_train,rmse_val\n");
    let mut text = format!("{:<16} {:>5} {:>6} {:>9} {:>11} {:>11} {:>11}\n", "quadrature", "K", "m", "lambda", "coef_err", "rmse_train", "rmse_val");
    for (c, (e, tr, va)) in cells.iter().zip(&results) {
        writeln!(csv, "{},{},{},{},{e},{tr},{va}", c.kind, c.nodes, c.samples, c.lambda).unwrap();
        writeln!(
            text,
            "{:<16} {:>5} {:>6} {:>9.1e} {e:>11.3e} {tr:>11.3e} {va:>11.3e}",
            c.kind.as_str(),
            c.nodes,
            c.samples,
            c.lambda
        )
        .unwrap();
    }
    write(dir.join("sweep.csv"), csv)?;
    write(dir.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(())
}
