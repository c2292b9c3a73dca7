//! Human-readable equations, e.g.
//! `x1(t) = ∫_{-3}^{-1} [ 1.00·x1(t+s) - 1.00·s·x1(t+s)^2 ] ds - 0.50·x1(t)`.

use super::{EquationKind, SparseModel};
use crate::error::{Error, Result};
use crate::library::{Atom, Factor, LinkedTerm};

fn render_factor(f: &Factor) -> String {
    fn pow(base: String, p: u32) -> String {
        if p == 1 {
            base
        } else {
            format!("{base}^{p}")
        }
    }
    match f {
        Factor::Erlang { shape, mean } => format!("erlang({shape},{mean};s)"),
        Factor::Delay(p) => pow("s".into(), *p),
        Factor::ExpDelay(rate) => format!("exp({rate}*s)"),
        Factor::ExpNegState { state, rate } => format!("exp(-{rate}*x{}(t+s))", state + 1),
        Factor::Shifted { state, power } => pow(format!("x{}(t+s)", state + 1), *power),
        Factor::Current { state, power } => pow(format!("x{}(t)", state + 1), *power),
        Factor::Lagged { state, lag, power } => pow(format!("x{}(t{lag})", state + 1), *power),
    }
}

fn render_atom(atom: &Atom) -> Option<String> {
    if atom.is_constant() {
        return None;
    }
    Some(atom.factors().iter().map(render_factor).collect::<Vec<_>>().join("·"))
}

fn format_coef(c: f64, precision: usize) -> String {
    let a = c.abs();
    if a != 0.0 && (a < 10f64.powi(-(precision as i32)) || a >= 1e7) {
        format!("{a:.precision$e}")
    } else {
        format!("{a:.precision$}")
    }
}

fn push_term(out: &mut String, coef: f64, body: Option<String>, precision: usize) {
    let sign = if coef < 0.0 { "-" } else { "+" };
    if out.is_empty() {
        if coef < 0.0 {
            out.push('-');
        }
    } else {
        out.push_str(&format!(" {sign} "));
    }
    out.push_str(&format_coef(coef, precision));
    if let Some(b) = body {
        out.push('·');
        out.push_str(&b);
    }
}

fn render_linked(link: &LinkedTerm, lower: f64, upper: f64) -> String {
    let integral = render_atom(&link.integral).unwrap_or_else(|| "1".into());
    let current = render_atom(&link.current).unwrap_or_else(|| "1".into());
    let sign = if link.current_scale < 0.0 { "-" } else { "+" };
    format!(
        "{{{}·∫_{{{lower}}}^{{{upper}}} {integral} ds {sign} {}·{current}}}",
        link.integral_scale,
        link.current_scale.abs()
    )
}

/// Renders every equation, omitting zero terms; coefficients use `precision`
/// decimals (scientific notation for very small or large magnitudes).
pub fn render_model(model: &SparseModel, precision: usize) -> String {
    let nd = model.spec.distributed.len();
    let nl = model.spec.linked.len();
    let mut lines = Vec::new();
    for j in 0..model.n_states() {
        let lhs = match model.kinds[j] {
            EquationKind::Re => format!("x{}(t)", j + 1),
            EquationKind::Dide => format!("x{}'(t)", j + 1),
        };
        let mut rhs = String::new();
        let mut integrand = String::new();
        for (k, atom) in model.spec.distributed.iter().enumerate() {
            let c = model.xi[(k, j)];
            if c != 0.0 {
                push_term(&mut integrand, c, render_atom(atom), precision);
            }
        }
        if !integrand.is_empty() {
            let d = model.discretization.expect("validated");
            rhs.push_str(&format!("∫_{{{}}}^{{{}}} [ {integrand} ] ds", d.lower, d.upper));
        }
        for (k, link) in model.spec.linked.iter().enumerate() {
            let c = model.xi[(nd + k, j)];
            if c != 0.0 {
                let d = model.discretization.expect("validated");
                push_term(&mut rhs, c, Some(render_linked(link, d.lower, d.upper)), precision);
            }
        }
        for (k, atom) in model.spec.instantaneous.iter().enumerate() {
            let c = model.xi[(nd + nl + k, j)];
            if c != 0.0 {
                push_term(&mut rhs, c, render_atom(atom), precision);
            }
        }
        if rhs.is_empty() {
            rhs.push('0');
        }
        lines.push(format!("{lhs} = {rhs}"));
    }
    lines.join("\n")
}

/// One equation read back from [`render_model`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedEquation {
    pub state: usize,
    pub kind: EquationKind,
    pub window: Option<(f64, f64)>,
    /// Library labels with their printed coefficients.
    pub terms: Vec<(String, f64)>,
}

/// Maps a rendered factor product back to the label grammar.
fn label_of(rendered: &str) -> Result<String> {
    let mut tokens = Vec::new();
    for token in rendered.split('·') {
        let mut t = token.trim().to_string();
        if t.starts_with("erlang(") {
            t = t.replace(";s)", ")");
        }
        t = t.replace("*s)", "*sig)").replace("(t+s)", "d").replace("(t)", "");
        if let Some(pos) = t.find("(t") {
            let close = t[pos..].find(')').ok_or_else(|| Error::InvalidAtom(token.to_string()))? + pos;
            t = format!("{}[{}]{}", &t[..pos], &t[pos + 2..close], &t[close + 1..]);
        }
        if t == "s" || t.starts_with("s^") {
            t = format!("sig{}", &t[1..]);
        }
        tokens.push(t);
    }
    Ok(tokens.join("*"))
}

/// Splits `a + b - c` at top-level signs, returning signed pieces.
fn signed_terms(s: &str) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let mut sign = 1.0;
    let bytes: Vec<(usize, char)> = s.char_indices().collect();
    let mut i = 0;
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ' ' if depth == 0 && i + 2 < bytes.len() && bytes[i + 2].1 == ' ' && matches!(bytes[i + 1].1, '+' | '-') => {
                out.push((sign, s[start..pos].trim().to_string()));
                sign = if bytes[i + 1].1 == '-' { -1.0 } else { 1.0 };
                start = bytes[i + 2].0 + 1;
                i += 3;
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    out.push((sign, s[start..].trim().to_string()));
    out.retain(|(_, t)| !t.is_empty());
    if let Some(first) = out.first_mut() {
        if let Some(rest) = first.1.strip_prefix('-') {
            first.0 = -first.0;
            first.1 = rest.to_string();
        }
    }
    out
}

fn coef_and_body(term: &str) -> Result<(f64, Option<&str>)> {
    let bad = || Error::ModelFile(format!("cannot read term `{term}`"));
    match term.split_once('·') {
        Some((c, body)) => Ok((c.parse().map_err(|_| bad())?, Some(body))),
        None => Ok((term.parse().map_err(|_| bad())?, None)),
    }
}

fn parse_window(s: &str) -> Result<((f64, f64), &str)> {
    let bad = || Error::ModelFile(format!("cannot read integral bounds in `{s}`"));
    let rest = s.strip_prefix("∫_{").ok_or_else(bad)?;
    let (lower, rest) = rest.split_once("}^{").ok_or_else(bad)?;
    let (upper, rest) = rest.split_once('}').ok_or_else(bad)?;
    Ok(((lower.parse().map_err(|_| bad())?, upper.parse().map_err(|_| bad())?), rest.trim()))
}

fn distributed_label(rendered: Option<&str>) -> Result<String> {
    let label = match rendered {
        Some(b) => label_of(b)?,
        None => "1".into(),
    };
    let atom = Atom::parse(&label)?.0;
    Ok(atom.distributed_label())
}

fn parse_linked(body: &str) -> Result<(String, (f64, f64))> {
    let bad = || Error::ModelFile(format!("cannot read linked term `{body}`"));
    let inner = body.strip_prefix('{').and_then(|b| b.strip_suffix('}')).ok_or_else(bad)?;
    let (scale, rest) = inner.split_once('·').ok_or_else(bad)?;
    let (window, rest) = parse_window(rest)?;
    let (integrand, rest) = rest.split_once(" ds ").ok_or_else(bad)?;
    let (sign, rest) = rest.split_at(1);
    let (cscale, current) = rest.trim().split_once('·').ok_or_else(bad)?;
    let cscale: f64 = cscale.parse().map_err(|_| bad())?;
    let current = if current == "1" { Atom::constant() } else { Atom::parse(&label_of(current)?)?.0 };
    let integral = if integrand == "1" { Atom::constant() } else { Atom::parse(&label_of(integrand)?)?.0 };
    let link = LinkedTerm {
        integral_scale: scale.parse().map_err(|_| bad())?,
        integral,
        current_scale: if sign == "-" { -cscale } else { cscale },
        current,
    };
    Ok((link.label(), window))
}

/// Parses [`render_model`] output back into labels and coefficients.
pub fn parse_rendered(text: &str) -> Result<Vec<RenderedEquation>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (lhs, rhs) = line
            .split_once(" = ")
            .ok_or_else(|| Error::ModelFile(format!("missing `=` in `{line}`")))?;
        let lhs = lhs.trim();
        let (kind, name) = match lhs.strip_suffix("'(t)") {
            Some(name) => (EquationKind::Dide, name),
            None => (EquationKind::Re, lhs.strip_suffix("(t)").unwrap_or(lhs)),
        };
        let state = name
            .strip_prefix('x')
            .and_then(|j| j.parse::<usize>().ok())
            .and_then(|j| j.checked_sub(1))
            .ok_or_else(|| Error::ModelFile(format!("bad left-hand side `{lhs}`")))?;
        let mut eq = RenderedEquation { state, kind, window: None, terms: Vec::new() };
        if rhs.trim() == "0" {
            out.push(eq);
            continue;
        }
        for (sign, term) in signed_terms(rhs.trim()) {
            if term.starts_with("∫_{") {
                let (window, rest) = parse_window(&term)?;
                eq.window = Some(window);
                let inner = rest
                    .strip_prefix('[')
                    .and_then(|r| r.strip_suffix("] ds"))
                    .ok_or_else(|| Error::ModelFile(format!("bad integral `{term}`")))?;
                for (s, t) in signed_terms(inner.trim()) {
                    let (c, body) = coef_and_body(&t)?;
                    eq.terms.push((distributed_label(body)?, s * c));
                }
                continue;
            }
            let (c, body) = coef_and_body(&term)?;
            match body {
                Some(b) if b.starts_with('{') => {
                    let (label, window) = parse_linked(b)?;
                    eq.window = Some(window);
                    eq.terms.push((label, sign * c));
                }
                Some(b) => eq.terms.push((Atom::parse(&label_of(b)?)?.0.label(), sign * c)),
                None => eq.terms.push(("1".into(), sign * c)),
            }
        }
        out.push(eq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::Discretization;
    use crate::library::LibrarySpec;
    use crate::quadrature::QuadratureKind;
    use nalgebra::DMatrix;

    fn logistic_model() -> SparseModel {
        let labels = ["sig^0", "x1d", "sig*x1d", "x1d^2", "sig*x1d^2", "x1"];
        let spec = LibrarySpec::from_labels(&labels).unwrap();
        let xi = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 1.0, -1.0, -1.0, -0.5]);
        let disc = Discretization::new(QuadratureKind::Trapezoid, 128, -3.0, -1.0);
        SparseModel::new(spec, xi, vec![EquationKind::Re], Some(disc)).unwrap()
    }

    #[test]
    fn renders_integral_and_instantaneous_terms() {
        let text = render_model(&logistic_model(), 2);
        assert_eq!(
            text,
            "x1(t) = ∫_{-3}^{-1} [ 1.00·x1(t+s) + 1.00·s·x1(t+s) - 1.00·x1(t+s)^2 - 1.00·s·x1(t+s)^2 ] ds - 0.50·x1(t)"
        );
    }

    #[test]
    fn empty_model_renders_zero() {
        let mut model = logistic_model();
        model.xi.fill(0.0);
        assert_eq!(render_model(&model, 2), "x1(t) = 0");
    }

    #[test]
    fn round_trip_through_text() {
        let labels = [
            "sig^0",
            "sig^3*exp(4.5*sig)*exp(-0.3142*x1d)*x1d",
            "link(80*[erlang(4,1)*exp(4.5*sig)*exp(-0.3142*x1d)*x1d]-1*[x1])",
            "1",
            "x1[-0.5]^2",
            "x2",
        ];
        let spec = LibrarySpec::from_labels(&labels).unwrap();
        let xi = DMatrix::from_row_slice(6, 2, &[
            0.25, 0.0, //
            -3413.3333, 1.0, //
            0.98765, 0.0, //
            -0.001, 2.0, //
            0.0, 3.5, //
            1e-9, -1.0,
        ]);
        let disc = Discretization::new(QuadratureKind::Trapezoid, 100, -10.0, 0.0);
        let model = SparseModel::new(spec, xi, vec![EquationKind::Dide, EquationKind::Re], Some(disc)).unwrap();
        let text = render_model(&model, 4);
        let parsed = parse_rendered(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        for eq in &parsed {
            let j = eq.state;
            assert_eq!(eq.kind, model.kinds[j]);
            let active = model.active(j);
            assert_eq!(eq.terms.len(), active.len(), "{text}");
            for (label, c) in &eq.terms {
                let want = model.coefficient(j, label).unwrap_or_else(|| panic!("{label} in {text}"));
                assert!((c - want).abs() <= 0.5e-4 * want.abs().max(1.0), "{label}: {c} vs {want}");
            }
        }
        assert_eq!(parsed[0].window, Some((-10.0, 0.0)));
    }
}
