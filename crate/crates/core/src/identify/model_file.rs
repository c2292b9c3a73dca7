//! Plain-text model files.
//!
//! ```text
//! [window]
//! lower = -3
//! upper = -1
//!
//! [quadrature]
//! kind = trapezoid
//! nodes = 128
//!
//! [equation 1]
//! kind = RE
//! x1d = 1.0000000000000002
//! sig*x1d = 0
//! ```
//!
//! Every equation lists every library label in the same order; coefficients
//! are written with shortest round-trip formatting, so reading a file back
//! reproduces the model exactly. `[window]` and `[quadrature]` are omitted
//! for models without integral terms. Lines starting with `#` are comments.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{Discretization, EquationKind, SparseModel};
use crate::error::{Error, Result};
use crate::library::LibrarySpec;

pub fn write_model(model: &SparseModel) -> String {
    let mut out = String::new();
    if let Some(d) = model.discretization {
        let _ = writeln!(out, "[window]\nlower = {}\nupper = {}\n", d.lower, d.upper);
        let _ = writeln!(out, "[quadrature]\nkind = {}\nnodes = {}\n", d.kind, d.nodes);
    }
    for j in 0..model.n_states() {
        let _ = writeln!(out, "[equation {}]\nkind = {}", j + 1, model.kinds[j]);
        for (k, label) in model.labels.iter().enumerate() {
            let _ = writeln!(out, "{label} = {}", model.xi[(k, j)]);
        }
        out.push('\n');
    }
    out
}

#[derive(Default)]
struct Equation {
    kind: Option<EquationKind>,
    terms: Vec<(String, f64)>,
}

enum Section {
    None,
    Window,
    Quadrature,
    Equation(usize),
}

pub fn parse_model(text: &str) -> Result<SparseModel> {
    let err = |line: usize, msg: &str| Error::ModelFile(format!("line {}: {msg}", line + 1));
    let mut section = Section::None;
    let (mut lower, mut upper, mut kind, mut nodes) = (None, None, None, None);
    let mut equations: Vec<Equation> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = match name.trim() {
                "window" => Section::Window,
                "quadrature" => Section::Quadrature,
                other => {
                    let idx = other
                        .strip_prefix("equation")
                        .and_then(|i| i.trim().parse::<usize>().ok())
                        .filter(|&i| i == equations.len() + 1)
                        .ok_or_else(|| err(n, &format!("unexpected section [{other}]")))?;
                    equations.push(Equation::default());
                    Section::Equation(idx - 1)
                }
            };
            continue;
        }
        let (key, value) = line.rsplit_once(" = ").ok_or_else(|| err(n, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let number = || value.parse::<f64>().map_err(|_| err(n, &format!("bad number `{value}`")));
        match section {
            Section::None => return Err(err(n, "entry outside of a section")),
            Section::Window => match key {
                "lower" => lower = Some(number()?),
                "upper" => upper = Some(number()?),
                _ => return Err(err(n, &format!("unknown window key `{key}`"))),
            },
            Section::Quadrature => match key {
                "kind" => kind = Some(value.parse().map_err(|e: Error| err(n, &e.to_string()))?),
                "nodes" => nodes = Some(value.parse::<usize>().map_err(|_| err(n, "bad node count"))?),
                _ => return Err(err(n, &format!("unknown quadrature key `{key}`"))),
            },
            Section::Equation(j) => {
                if key == "kind" {
                    equations[j].kind = Some(value.parse().map_err(|e: Error| err(n, &e.to_string()))?);
                } else {
                    equations[j].terms.push((key.to_string(), number()?));
                }
            }
        }
    }
    let Some(first) = equations.first() else {
        return Err(Error::ModelFile("no equations".into()));
    };
    let labels: Vec<String> = first.terms.iter().map(|(l, _)| l.clone()).collect();
    let mut xi = DMatrix::zeros(labels.len(), equations.len());
    let mut kinds = Vec::with_capacity(equations.len());
    for (j, eq) in equations.iter().enumerate() {
        let same = eq.terms.len() == labels.len() && eq.terms.iter().zip(&labels).all(|((l, _), m)| l == m);
        if !same {
            return Err(Error::ModelFile(format!("equation {} lists different labels", j + 1)));
        }
        for (k, (_, c)) in eq.terms.iter().enumerate() {
            xi[(k, j)] = *c;
        }
        kinds.push(eq.kind.ok_or_else(|| Error::ModelFile(format!("equation {} has no kind", j + 1)))?);
    }
    let spec = LibrarySpec::from_labels(&labels)?;
    let discretization = match (lower, upper, kind, nodes) {
        (Some(l), Some(u), Some(k), Some(n)) => Some(Discretization::new(k, n, l, u)),
        (None, None, None, None) => None,
        _ => return Err(Error::ModelFile("incomplete [window]/[quadrature] sections".into())),
    };
    SparseModel::new(spec, xi, kinds, discretization)
}
