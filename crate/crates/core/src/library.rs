//! Symbolic candidate atoms and the quadrature-weighted design matrix.
//!
//! Labels follow a small grammar that round-trips through [`Atom::parse`]:
//!
//! | factor                      | label              |
//! |-----------------------------|--------------------|
//! | `σ^p`                       | `sig^p` (`sig`)    |
//! | `x_j(t+σ)^p`                | `xjd^p` (`xjd`)    |
//! | `x_j(t)^p`                  | `xj^p` (`xj`)      |
//! | `x_j(t+ℓ)^p`, fixed lag     | `xj[ℓ]^p`          |
//! | `e^{θσ}`                    | `exp(θ*sig)`       |
//! | `e^{-θ x_j(t+σ)}`           | `exp(-θ*xjd)`      |
//! | `(n/τ)^n (-σ)^{n-1}/Γ(n)`   | `erlang(n,τ)`      |
//!
//! Factors are joined by `*`; parameters may be numbers or `$name` slots.
//! Distributed atoms without any σ-dependent factor carry a leading `sig^0`
//! so that their labels never collide with instantaneous ones.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;

/// Named values for parameter slots.
pub type Params = BTreeMap<String, f64>;

/// A numeric parameter, either fixed or filled in later by name.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Fixed(f64),
    Slot(String),
}

impl ParamValue {
    pub fn value(&self) -> Result<f64> {
        match self {
            ParamValue::Fixed(v) => Ok(*v),
            ParamValue::Slot(name) => Err(Error::UnresolvedParameter(name.clone())),
        }
    }

    fn resolve(&self, params: &Params) -> Result<ParamValue> {
        match self {
            ParamValue::Fixed(v) => Ok(ParamValue::Fixed(*v)),
            ParamValue::Slot(name) => params
                .get(name)
                .map(|v| ParamValue::Fixed(*v))
                .ok_or_else(|| Error::UnresolvedParameter(name.clone())),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix('$') {
            if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(Error::InvalidAtom(s.to_string()));
            }
            return Ok(ParamValue::Slot(name.to_string()));
        }
        s.parse().map(ParamValue::Fixed).map_err(|_| Error::InvalidAtom(s.to_string()))
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Fixed(v) => write!(f, "{v}"),
            ParamValue::Slot(name) => write!(f, "${name}"),
        }
    }
}

/// One multiplicative factor of an atom. State indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Normalised gamma density without its exponential part.
    Erlang { shape: ParamValue, mean: ParamValue },
    Delay(u32),
    ExpDelay(ParamValue),
    ExpNegState { state: usize, rate: ParamValue },
    Shifted { state: usize, power: u32 },
    Current { state: usize, power: u32 },
    Lagged { state: usize, lag: f64, power: u32 },
}

impl Factor {
    fn rank(&self) -> (u8, usize, u64) {
        match self {
            Factor::Erlang { .. } => (0, 0, 0),
            Factor::Delay(_) => (1, 0, 0),
            Factor::ExpDelay(_) => (2, 0, 0),
            Factor::ExpNegState { state, .. } => (3, *state, 0),
            Factor::Shifted { state, .. } => (4, *state, 0),
            Factor::Current { state, .. } => (5, *state, 0),
            // Lags are non-positive; order by increasing delay.
            Factor::Lagged { state, lag, .. } => (6, *state, (0.0 - lag).to_bits()),
        }
    }

    /// True for factors that vary with the delay variable.
    pub fn is_distributed(&self) -> bool {
        matches!(
            self,
            Factor::Erlang { .. }
                | Factor::Delay(_)
                | Factor::ExpDelay(_)
                | Factor::ExpNegState { .. }
                | Factor::Shifted { .. }
        )
    }

    fn depends_on_sigma_only(&self) -> bool {
        matches!(self, Factor::Erlang { .. } | Factor::Delay(_) | Factor::ExpDelay(_))
    }

    fn is_zero_power(&self) -> bool {
        match self {
            Factor::Delay(p) => *p == 0,
            Factor::Shifted { power, .. } | Factor::Current { power, .. } | Factor::Lagged { power, .. } => {
                *power == 0
            }
            _ => false,
        }
    }

    fn params(&self) -> Vec<&ParamValue> {
        match self {
            Factor::Erlang { shape, mean } => vec![shape, mean],
            Factor::ExpDelay(rate) | Factor::ExpNegState { rate, .. } => vec![rate],
            _ => Vec::new(),
        }
    }

    fn resolve(&self, params: &Params) -> Result<Factor> {
        Ok(match self {
            Factor::Erlang { shape, mean } => Factor::Erlang {
                shape: shape.resolve(params)?,
                mean: mean.resolve(params)?,
            },
            Factor::ExpDelay(rate) => Factor::ExpDelay(rate.resolve(params)?),
            Factor::ExpNegState { state, rate } => Factor::ExpNegState {
                state: *state,
                rate: rate.resolve(params)?,
            },
            other => other.clone(),
        })
    }

    fn sigma_value(&self, sigma: f64) -> f64 {
        match self {
            Factor::Erlang { shape, mean } => {
                let n = shape.value().expect("resolved");
                let tau = mean.value().expect("resolved");
                erlang_factor(n, tau, sigma)
            }
            Factor::Delay(p) => sigma.powi(*p as i32),
            Factor::ExpDelay(rate) => (rate.value().expect("resolved") * sigma).exp(),
            _ => 1.0,
        }
    }

    fn state_value(&self, shifted: &[f64], current: &[f64]) -> f64 {
        match self {
            Factor::ExpNegState { state, rate } => (-rate.value().expect("resolved") * shifted[*state]).exp(),
            Factor::Shifted { state, power } => shifted[*state].powi(*power as i32),
            Factor::Current { state, power } => current[*state].powi(*power as i32),
            _ => 1.0,
        }
    }

    fn label(&self) -> String {
        fn pow(base: String, p: u32) -> String {
            if p == 1 {
                base
            } else {
                format!("{base}^{p}")
            }
        }
        match self {
            Factor::Erlang { shape, mean } => format!("erlang({shape},{mean})"),
            Factor::Delay(p) => pow("sig".into(), *p),
            Factor::ExpDelay(rate) => format!("exp({rate}*sig)"),
            Factor::ExpNegState { state, rate } => format!("exp(-{rate}*x{}d)", state + 1),
            Factor::Shifted { state, power } => pow(format!("x{}d", state + 1), *power),
            Factor::Current { state, power } => pow(format!("x{}", state + 1), *power),
            Factor::Lagged { state, lag, power } => pow(format!("x{}[{lag}]", state + 1), *power),
        }
    }

    fn parse(token: &str) -> Result<Factor> {
        let bad = || Error::InvalidAtom(token.to_string());
        let (base, power) = split_power(token).ok_or_else(bad)?;
        if let Some(inner) = base.strip_prefix("erlang(").and_then(|s| s.strip_suffix(')')) {
            let (n, tau) = inner.split_once(',').ok_or_else(bad)?;
            return Ok(Factor::Erlang {
                shape: ParamValue::parse(n)?,
                mean: ParamValue::parse(tau)?,
            });
        }
        if let Some(inner) = base.strip_prefix("exp(").and_then(|s| s.strip_suffix(')')) {
            if let Some(rate) = inner.strip_suffix("*sig") {
                return Ok(Factor::ExpDelay(ParamValue::parse(rate)?));
            }
            let rest = inner.strip_prefix('-').ok_or_else(bad)?;
            let (rate, var) = rest.rsplit_once('*').ok_or_else(bad)?;
            let state = var
                .strip_prefix('x')
                .and_then(|v| v.strip_suffix('d'))
                .and_then(parse_state)
                .ok_or_else(bad)?;
            return Ok(Factor::ExpNegState { state, rate: ParamValue::parse(rate)? });
        }
        if base == "sig" {
            return Ok(Factor::Delay(power));
        }
        let var = base.strip_prefix('x').ok_or_else(bad)?;
        if let Some(idx) = var.strip_suffix('d') {
            let state = parse_state(idx).ok_or_else(bad)?;
            return Ok(Factor::Shifted { state, power });
        }
        if let Some((idx, lag)) = var.split_once('[') {
            let state = parse_state(idx).ok_or_else(bad)?;
            let lag: f64 = lag.strip_suffix(']').ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if lag > 0.0 || !lag.is_finite() {
                return Err(bad());
            }
            return Ok(Factor::Lagged { state, lag, power });
        }
        let state = parse_state(var).ok_or_else(bad)?;
        Ok(Factor::Current { state, power })
    }
}

fn parse_state(s: &str) -> Option<usize> {
    let j: usize = s.parse().ok()?;
    j.checked_sub(1)
}

/// Splits a trailing `^p` off a factor token; bare tokens have power 1.
fn split_power(token: &str) -> Option<(&str, u32)> {
    match token.rfind('^') {
        Some(pos) if !token[pos..].contains(')') && !token[pos..].contains(']') => {
            Some((&token[..pos], token[pos + 1..].parse().ok()?))
        }
        _ => Some((token, 1)),
    }
}

/// `(n/τ)^n (-σ)^{n-1} / Γ(n)`; together with `e^{nσ/τ}` this is the gamma
/// density with shape `n` and mean `τ`.
pub fn erlang_factor(n: f64, tau: f64, sigma: f64) -> f64 {
    let s = -sigma;
    if s == 0.0 {
        return if n == 1.0 { 1.0 / tau } else if n > 1.0 { 0.0 } else { f64::INFINITY };
    }
    (n * (n / tau).ln() + (n - 1.0) * s.ln() - ln_gamma(n)).exp()
}

/// Product of factors, kept in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    factors: Vec<Factor>,
}

impl Atom {
    pub fn constant() -> Self {
        Self { factors: Vec::new() }
    }

    pub fn new(mut factors: Vec<Factor>) -> Result<Self> {
        factors.retain(|f| !f.is_zero_power());
        factors.sort_by_key(|f| f.rank());
        if let Some(w) = factors.windows(2).find(|w| w[0].rank() == w[1].rank()) {
            return Err(Error::InvalidAtom(format!("duplicate factor {}", w[1].label())));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    /// True when the atom needs a delay integral to be evaluated.
    pub fn is_distributed(&self) -> bool {
        self.factors.iter().any(Factor::is_distributed)
    }

    /// True when every factor is a power of a current state (and there is one).
    pub fn is_pure_current(&self) -> bool {
        !self.factors.is_empty() && self.factors.iter().all(|f| matches!(f, Factor::Current { .. }))
    }

    pub fn has_lags(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::Lagged { .. }))
    }

    /// Total polynomial degree (exponential and Erlang factors count zero).
    pub fn degree(&self) -> u32 {
        self.factors
            .iter()
            .map(|f| match f {
                Factor::Delay(p) => *p,
                Factor::Shifted { power, .. } | Factor::Current { power, .. } | Factor::Lagged { power, .. } => {
                    *power
                }
                _ => 0,
            })
            .sum()
    }

    /// Degree in the state variables only.
    pub fn state_degree(&self) -> u32 {
        self.degree() - self.factors.iter().map(|f| if let Factor::Delay(p) = f { *p } else { 0 }).sum::<u32>()
    }

    pub fn max_state(&self) -> Option<usize> {
        self.factors
            .iter()
            .filter_map(|f| match f {
                Factor::ExpNegState { state, .. }
                | Factor::Shifted { state, .. }
                | Factor::Current { state, .. }
                | Factor::Lagged { state, .. } => Some(*state),
                _ => None,
            })
            .max()
    }

    pub fn slots(&self) -> Vec<&str> {
        self.factors
            .iter()
            .flat_map(Factor::params)
            .filter_map(|p| match p {
                ParamValue::Slot(name) => Some(name.as_str()),
                ParamValue::Fixed(_) => None,
            })
            .collect()
    }

    pub fn is_resolved(&self) -> bool {
        self.slots().is_empty()
    }

    pub fn resolve(&self, params: &Params) -> Result<Atom> {
        let factors = self.factors.iter().map(|f| f.resolve(params)).collect::<Result<_>>()?;
        Ok(Atom { factors })
    }

    pub fn times(&self, other: &Atom) -> Result<Atom> {
        let mut factors = self.factors.clone();
        factors.extend(other.factors.iter().cloned());
        Atom::new(factors)
    }

    fn ensure_resolved(&self) -> Result<()> {
        match self.slots().first() {
            Some(name) => Err(Error::UnresolvedParameter(name.to_string())),
            None => Ok(()),
        }
    }

    /// Part of the atom depending on σ alone.
    pub fn sigma_part(&self, sigma: f64) -> f64 {
        self.factors.iter().filter(|f| f.depends_on_sigma_only()).map(|f| f.sigma_value(sigma)).product()
    }

    /// Part of the atom depending on shifted and current states.
    pub fn state_part(&self, shifted: &[f64], current: &[f64]) -> f64 {
        self.factors.iter().map(|f| f.state_value(shifted, current)).product()
    }

    /// Full value `a(σ, x(t+σ), x(t))`. Lagged factors evaluate to 1 here.
    pub fn eval(&self, sigma: f64, shifted: &[f64], current: &[f64]) -> f64 {
        self.sigma_part(sigma) * self.state_part(shifted, current)
    }

    /// Value of an instantaneous atom; `lagged(j, ℓ)` supplies `x_j(t+ℓ)`.
    pub fn eval_instantaneous(&self, current: &[f64], lagged: &dyn Fn(usize, f64) -> f64) -> f64 {
        self.factors
            .iter()
            .map(|f| match f {
                Factor::Current { state, power } => current[*state].powi(*power as i32),
                Factor::Lagged { state, lag, power } => lagged(*state, *lag).powi(*power as i32),
                _ => 1.0,
            })
            .product()
    }

    /// Label for the instantaneous block.
    pub fn label(&self) -> String {
        if self.factors.is_empty() {
            return "1".into();
        }
        self.factors.iter().map(Factor::label).collect::<Vec<_>>().join("*")
    }

    /// Label for the distributed block.
    pub fn distributed_label(&self) -> String {
        if self.is_distributed() {
            self.label()
        } else if self.factors.is_empty() {
            "sig^0".into()
        } else {
            format!("sig^0*{}", self.label())
        }
    }

    /// Parses a single-atom label, returning the atom and whether it belongs to
    /// the distributed block.
    pub fn parse(label: &str) -> Result<(Atom, bool)> {
        let label = label.trim();
        if label == "1" {
            return Ok((Atom::constant(), false));
        }
        let mut tokens = split_top_level(label, '*');
        let mut forced = false;
        if tokens.first().map(|t| t.trim()) == Some("sig^0") {
            forced = true;
            tokens.remove(0);
        }
        let factors = tokens
            .iter()
            .map(|t| Factor::parse(t.trim()))
            .collect::<Result<Vec<_>>>()?;
        let atom = Atom::new(factors)?;
        let distributed = forced || atom.is_distributed();
        if atom.is_distributed() && atom.has_lags() {
            return Err(Error::InvalidAtom(label.to_string()));
        }
        Ok((atom, distributed))
    }
}

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut depth = 0i32;
    let mut start = 0;
    let mut out = Vec::new();
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// A distributed integral and an instantaneous atom sharing one coefficient:
/// `c · (s_int · ∫ atom dσ + s_cur · current)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedTerm {
    pub integral_scale: f64,
    pub integral: Atom,
    pub current_scale: f64,
    pub current: Atom,
}

impl LinkedTerm {
    pub fn label(&self) -> String {
        format!(
            "link({}*[{}]{:+}*[{}])",
            self.integral_scale,
            self.integral.label(),
            self.current_scale,
            self.current.label()
        )
        .replace("+-", "-")
    }

    pub fn parse(label: &str) -> Result<LinkedTerm> {
        let bad = || Error::InvalidAtom(label.to_string());
        let inner = label.trim().strip_prefix("link(").and_then(|s| s.strip_suffix(')')).ok_or_else(bad)?;
        let open = inner.find("*[").ok_or_else(bad)?;
        let integral_scale: f64 = inner[..open].parse().map_err(|_| bad())?;
        let rest = &inner[open + 2..];
        let close = matching_bracket(rest).ok_or_else(bad)?;
        let integral = Atom::parse(&rest[..close])?.0;
        let rest = &rest[close + 1..];
        let open = rest.find("*[").ok_or_else(bad)?;
        let current_scale: f64 = rest[..open].trim_start_matches('+').parse().map_err(|_| bad())?;
        let current = Atom::parse(rest[open + 2..].strip_suffix(']').ok_or_else(bad)?)?.0;
        Ok(LinkedTerm { integral_scale, integral, current_scale, current })
    }

    pub fn resolve(&self, params: &Params) -> Result<LinkedTerm> {
        Ok(LinkedTerm {
            integral: self.integral.resolve(params)?,
            current: self.current.resolve(params)?,
            ..self.clone()
        })
    }
}

/// Index of the `]` closing an already-opened bracket.
fn matching_bracket(s: &str) -> Option<usize> {
    let mut depth = 1i32;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Candidate terms split into the quadrature-weighted block, linked terms and
/// the unweighted block. Columns are laid out in that order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LibrarySpec {
    pub distributed: Vec<Atom>,
    pub linked: Vec<LinkedTerm>,
    pub instantaneous: Vec<Atom>,
}

impl LibrarySpec {
    pub fn new(distributed: Vec<Atom>, instantaneous: Vec<Atom>) -> Result<Self> {
        let spec = Self { distributed, linked: Vec::new(), instantaneous };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_linked(mut self, term: LinkedTerm) -> Result<Self> {
        self.linked.push(term);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.instantaneous.iter().find(|a| a.is_distributed()) {
            return Err(Error::InvalidAtom(format!(
                "{} is not instantaneous (σ-dependent or shifted factor)",
                a.label()
            )));
        }
        if let Some(a) = self.distributed.iter().find(|a| a.has_lags()) {
            return Err(Error::InvalidAtom(format!("{} mixes fixed lags into the integral", a.label())));
        }
        let labels = self.labels();
        let mut sorted = labels.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidAtom(format!("duplicate atom {}", w[0])));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.distributed.len() + self.linked.len() + self.instantaneous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_integral(&self) -> bool {
        !self.distributed.is_empty() || !self.linked.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.distributed
            .iter()
            .map(Atom::distributed_label)
            .chain(self.linked.iter().map(LinkedTerm::label))
            .chain(self.instantaneous.iter().map(Atom::label))
            .collect()
    }

    /// Rebuilds a spec from labels (as stored in a model file).
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut spec = LibrarySpec::default();
        for label in labels {
            let label = label.as_ref();
            if label.trim_start().starts_with("link(") {
                spec.linked.push(LinkedTerm::parse(label)?);
                continue;
            }
            match Atom::parse(label)? {
                (atom, true) => spec.distributed.push(atom),
                (atom, false) => spec.instantaneous.push(atom),
            }
        }
        if spec.labels().iter().zip(labels).any(|(a, b)| a != b.as_ref().trim()) {
            return Err(Error::InvalidAtom(
                "labels must list distributed, linked and instantaneous terms in that order".into(),
            ));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn slots(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .distributed
            .iter()
            .chain(self.linked.iter().flat_map(|l| [&l.integral, &l.current]))
            .chain(&self.instantaneous)
            .flat_map(|a| a.slots().into_iter().map(String::from))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn resolve(&self, params: &Params) -> Result<LibrarySpec> {
        Ok(LibrarySpec {
            distributed: self.distributed.iter().map(|a| a.resolve(params)).collect::<Result<_>>()?,
            linked: self.linked.iter().map(|l| l.resolve(params)).collect::<Result<_>>()?,
            instantaneous: self.instantaneous.iter().map(|a| a.resolve(params)).collect::<Result<_>>()?,
        })
    }

    pub fn max_state(&self) -> Option<usize> {
        self.distributed
            .iter()
            .chain(self.linked.iter().flat_map(|l| [&l.integral, &l.current]))
            .chain(&self.instantaneous)
            .filter_map(Atom::max_state)
            .max()
    }
}

/// Base symbols for polynomial enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Symbol {
    Sigma,
    Shifted(usize),
    Current(usize),
    Lagged(usize, f64),
}

impl Symbol {
    fn factor(self, power: u32) -> Factor {
        match self {
            Symbol::Sigma => Factor::Delay(power),
            Symbol::Shifted(state) => Factor::Shifted { state, power },
            Symbol::Current(state) => Factor::Current { state, power },
            Symbol::Lagged(state, lag) => Factor::Lagged { state, lag, power },
        }
    }
}

/// All monomials of total degree `≤ d` in `symbols`, graded and, within a
/// degree, in descending lexicographic order of the exponent vector.
pub fn enumerate_monomials(symbols: &[Symbol], d: u32) -> Vec<Atom> {
    let mut out = Vec::new();
    for degree in 0..=d {
        let mut exps = vec![0u32; symbols.len()];
        push_exponents(symbols, &mut exps, 0, degree, &mut out);
    }
    out
}

fn push_exponents(symbols: &[Symbol], exps: &mut [u32], pos: usize, left: u32, out: &mut Vec<Atom>) {
    if pos + 1 >= symbols.len() {
        if let Some(last) = exps.last_mut() {
            *last = left;
        } else if left > 0 {
            return;
        }
        let factors = symbols.iter().zip(exps.iter()).map(|(s, &p)| s.factor(p)).collect();
        out.push(Atom::new(factors).expect("distinct symbols"));
        return;
    }
    for p in (0..=left).rev() {
        exps[pos] = p;
        push_exponents(symbols, exps, pos + 1, left - p, out);
    }
    exps[pos] = 0;
}

/// Multiplies every atom by every subset of `multipliers` (empty subset
/// first, then subsets in binary-counting order).
pub fn with_multipliers(atoms: &[Atom], multipliers: &[Factor]) -> Result<Vec<Atom>> {
    let mut out = Vec::with_capacity(atoms.len() << multipliers.len());
    for mask in 0..1usize << multipliers.len() {
        let extra: Vec<Factor> = multipliers
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, f)| f.clone())
            .collect();
        let extra = Atom::new(extra)?;
        for atom in atoms {
            out.push(atom.times(&extra)?);
        }
    }
    Ok(out)
}

/// Monomials for the distributed block; pure current-state monomials are
/// dropped unless `keep_pure_current` is set.
pub fn distributed_monomials(symbols: &[Symbol], d: u32, keep_pure_current: bool) -> Vec<Atom> {
    enumerate_monomials(symbols, d)
        .into_iter()
        .filter(|a| keep_pure_current || !a.is_pure_current())
        .collect()
}

/// Evaluated design matrix with its column labels and retained-row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledLibrary {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
    /// `row_mask[i]` is true when trajectory row `i` is a row of `matrix`.
    pub row_mask: Vec<bool>,
}

impl AssembledLibrary {
    pub fn retained_rows(&self) -> Vec<usize> {
        self.row_mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
    }

    /// Keeps the rows selected by `mask` (a subset of `row_mask`).
    fn restrict(&self, mask: &[bool]) -> AssembledLibrary {
        let keep: Vec<usize> = self
            .retained_rows()
            .iter()
            .enumerate()
            .filter(|(_, &row)| mask[row])
            .map(|(r, _)| r)
            .collect();
        AssembledLibrary {
            matrix: self.matrix.select_rows(keep.iter()),
            labels: self.labels.clone(),
            row_mask: mask.to_vec(),
        }
    }
}

fn check_finite(lib: &AssembledLibrary) -> Result<()> {
    for (c, col) in lib.matrix.column_iter().enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem(format!("non-finite entries in column {}", lib.labels[c])));
        }
    }
    Ok(())
}

fn check_states(traj: &Trajectory, atoms: &[&Atom]) -> Result<()> {
    let n = traj.n_states();
    for a in atoms {
        a.ensure_resolved()?;
        if a.max_state().is_some_and(|j| j >= n) {
            return Err(Error::InvalidAtom(format!("{} refers to a state beyond x{n}", a.label())));
        }
    }
    Ok(())
}

/// Columns `Σ_k w_k a(σ_k, x(t_i+σ_k), x(t_i))` for every atom.
pub fn assemble_distributed(traj: &Trajectory, rule: &QuadratureRule, atoms: &[Atom]) -> Result<AssembledLibrary> {
    check_states(traj, &atoms.iter().collect::<Vec<_>>())?;
    let labels = atoms.iter().map(Atom::distributed_label).collect();
    let m = traj.len();
    let n = traj.n_states();
    let k = rule.len();

    // Shifted values on the full row grid; uncovered rows are dropped below.
    let mut mask = vec![true; m];
    let mut shifted = Vec::with_capacity(k);
    for &sigma in rule.nodes() {
        let s = traj.shifted_values(sigma.min(0.0));
        let mut full = DMatrix::from_element(m, n, f64::NAN);
        let mut r = 0;
        for (i, &keep) in s.mask.iter().enumerate() {
            if keep {
                full.set_row(i, &s.values.row(r));
                r += 1;
            } else {
                mask[i] = false;
            }
        }
        shifted.push(full);
    }
    let rows: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyRows { lower: rule.lower(), upper: rule.upper() });
    }

    // w_k times the σ-only part of every atom.
    let weighted: Vec<Vec<f64>> = rule
        .nodes()
        .iter()
        .zip(rule.weights())
        .map(|(&s, &w)| atoms.iter().map(|a| w * a.sigma_part(s)).collect())
        .collect();

    let p = atoms.len();
    let states = traj.states();
    let row_values: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|&i| {
            let current: Vec<f64> = states.row(i).iter().copied().collect();
            let mut acc = vec![0.0; p];
            let mut buf = vec![0.0; n];
            for (node, wk) in weighted.iter().enumerate() {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = shifted[node][(i, j)];
                }
                for (a, atom) in atoms.iter().enumerate() {
                    if wk[a] != 0.0 {
                        acc[a] += wk[a] * atom.state_part(&buf, &current);
                    }
                }
            }
            acc
        })
        .collect();
    let matrix = DMatrix::from_fn(rows.len(), p, |r, c| row_values[r][c]);
    let lib = AssembledLibrary { matrix, labels, row_mask: mask };
    check_finite(&lib)?;
    Ok(lib)
}

/// Unweighted columns `a(x(t_i))`; rows whose lagged lookups lack data are masked.
pub fn assemble_instantaneous(traj: &Trajectory, atoms: &[Atom]) -> Result<AssembledLibrary> {
    if let Some(a) = atoms.iter().find(|a| a.is_distributed()) {
        return Err(Error::InvalidAtom(format!("{} is not instantaneous", a.label())));
    }
    check_states(traj, &atoms.iter().collect::<Vec<_>>())?;
    let m = traj.len();
    let n = traj.n_states();
    let mut lags: Vec<f64> = atoms
        .iter()
        .flat_map(|a| {
            a.factors.iter().filter_map(|f| match f {
                Factor::Lagged { lag, .. } => Some(*lag),
                _ => None,
            })
        })
        .collect();
    lags.sort_by(f64::total_cmp);
    lags.dedup();

    let mut mask = vec![true; m];
    let mut lagged = Vec::with_capacity(lags.len());
    for &lag in &lags {
        let s = traj.shifted_values(lag);
        let mut full = DMatrix::from_element(m, n, f64::NAN);
        let mut r = 0;
        for (i, &keep) in s.mask.iter().enumerate() {
            if keep {
                full.set_row(i, &s.values.row(r));
                r += 1;
            } else {
                mask[i] = false;
            }
        }
        lagged.push(full);
    }
    let rows: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        let lower = lags.first().copied().unwrap_or(0.0);
        return Err(Error::EmptyRows { lower, upper: 0.0 });
    }
    let states = traj.states();
    let matrix = DMatrix::from_fn(rows.len(), atoms.len(), |r, c| {
        let i = rows[r];
        let current: Vec<f64> = states.row(i).iter().copied().collect();
        let lookup = |j: usize, lag: f64| {
            let idx = lags.partition_point(|&l| l < lag);
            lagged[idx][(i, j)]
        };
        atoms[c].eval_instantaneous(&current, &lookup)
    });
    let lib = AssembledLibrary {
        matrix,
        labels: atoms.iter().map(Atom::label).collect(),
        row_mask: mask,
    };
    check_finite(&lib)?;
    Ok(lib)
}

/// Columns for linked terms.
pub fn assemble_linked(traj: &Trajectory, rule: &QuadratureRule, terms: &[LinkedTerm]) -> Result<AssembledLibrary> {
    let integrals: Vec<Atom> = terms.iter().map(|t| t.integral.clone()).collect();
    let currents: Vec<Atom> = terms.iter().map(|t| t.current.clone()).collect();
    let dist = assemble_distributed(traj, rule, &integrals)?;
    let inst = assemble_instantaneous(traj, &currents)?;
    let joined = concat(&[dist, inst])?;
    let p = terms.len();
    let matrix = DMatrix::from_fn(joined.matrix.nrows(), p, |r, c| {
        terms[c].integral_scale * joined.matrix[(r, c)] + terms[c].current_scale * joined.matrix[(r, p + c)]
    });
    Ok(AssembledLibrary {
        matrix,
        labels: terms.iter().map(LinkedTerm::label).collect(),
        row_mask: joined.row_mask,
    })
}

/// Horizontal concatenation restricted to the common retained rows.
pub fn concat(blocks: &[AssembledLibrary]) -> Result<AssembledLibrary> {
    let Some(first) = blocks.first() else {
        return Err(Error::InvalidProblem("no library blocks to concatenate".into()));
    };
    if blocks.len() == 1 {
        return Ok(first.clone());
    }
    let m = first.row_mask.len();
    if let Some(b) = blocks.iter().find(|b| b.row_mask.len() != m) {
        return Err(Error::LengthMismatch { expected: m, got: b.row_mask.len() });
    }
    let mask: Vec<bool> = (0..m).map(|i| blocks.iter().all(|b| b.row_mask[i])).collect();
    if !mask.iter().any(|&k| k) {
        return Err(Error::DisjointMasks);
    }
    let restricted: Vec<AssembledLibrary> = blocks.iter().map(|b| b.restrict(&mask)).collect();
    let rows = restricted[0].matrix.nrows();
    let cols: usize = restricted.iter().map(|b| b.matrix.ncols()).sum();
    let mut matrix = DMatrix::zeros(rows, cols);
    let mut labels = Vec::with_capacity(cols);
    let mut c0 = 0;
    for b in &restricted {
        matrix.view_mut((0, c0), (rows, b.matrix.ncols())).copy_from(&b.matrix);
        c0 += b.matrix.ncols();
        labels.extend(b.labels.iter().cloned());
    }
    Ok(AssembledLibrary { matrix, labels, row_mask: mask })
}

/// Full design matrix for a resolved spec: distributed, linked, instantaneous.
pub fn assemble(traj: &Trajectory, rule: &QuadratureRule, spec: &LibrarySpec) -> Result<AssembledLibrary> {
    let mut blocks = Vec::new();
    if !spec.distributed.is_empty() {
        blocks.push(assemble_distributed(traj, rule, &spec.distributed)?);
    }
    if !spec.linked.is_empty() {
        blocks.push(assemble_linked(traj, rule, &spec.linked)?);
    }
    if !spec.instantaneous.is_empty() {
        blocks.push(assemble_instantaneous(traj, &spec.instantaneous)?);
    }
    concat(&blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::History;
    use crate::quadrature::QuadratureKind;
    use approx::assert_relative_eq;

    fn labels(atoms: &[Atom]) -> Vec<String> {
        atoms.iter().map(Atom::distributed_label).collect()
    }

    fn constant_traj(value: f64, lower: f64) -> Trajectory {
        let times: Vec<f64> = (0..21).map(|i| i as f64).collect();
        let states = DMatrix::from_element(21, 1, value);
        Trajectory::new(times, states)
            .unwrap()
            .with_history(History::constant(lower, 0.0, &[value]).unwrap())
            .unwrap()
    }

    #[test]
    fn monomial_counts_and_order() {
        let syms = [Symbol::Sigma, Symbol::Shifted(0)];
        assert_eq!(
            labels(&enumerate_monomials(&syms, 2)),
            ["sig^0", "sig", "x1d", "sig^2", "sig*x1d", "x1d^2"]
        );
        assert_eq!(enumerate_monomials(&syms, 4).len(), 15);
        let one = enumerate_monomials(&[Symbol::Shifted(0)], 1);
        assert_eq!(labels(&one), ["sig^0", "x1d"]);
        // Pure powers of σ are always present.
        let all = labels(&enumerate_monomials(&syms, 3));
        for p in ["sig", "sig^2", "sig^3"] {
            assert!(all.contains(&p.to_string()));
        }
    }

    #[test]
    fn pure_current_atoms_are_dropped_from_the_integral() {
        let syms = [Symbol::Shifted(0), Symbol::Current(0)];
        let atoms = distributed_monomials(&syms, 2, false);
        assert!(atoms.iter().all(|a| !a.is_pure_current()));
        assert_eq!(atoms.len(), 6 - 2);
        assert_eq!(distributed_monomials(&syms, 2, true).len(), 6);
    }

    #[test]
    fn labels_round_trip() {
        for label in [
            "sig^3*exp(4.5*sig)*exp(-0.3142*x1d)*x1d",
            "erlang($n,$tau)*exp($rate*sig)*exp(-$a*x1d)*x1d",
            "sig*x1d^2",
            "x1d*x2",
            "x2*x1[-0.25]^2",
            "x2^2",
            "sig^0",
            "sig^0*x2",
        ] {
            let (atom, dist) = Atom::parse(label).unwrap();
            let back = if dist { atom.distributed_label() } else { atom.label() };
            assert_eq!(back, label);
        }
        assert!(!Atom::parse("1").unwrap().1);
        assert!(Atom::parse("x1d*x1d").is_err());
        assert!(Atom::parse("y1").is_err());
        assert!(Atom::parse("x0").is_err());
        assert!(Atom::parse("x1[0.5]").is_err());
    }

    #[test]
    fn linked_label_round_trip() {
        let term = LinkedTerm {
            integral_scale: 80.0,
            integral: Atom::parse("erlang(4,1)*exp(4.5*sig)*exp(-0.5*x1d)*x1d").unwrap().0,
            current_scale: -1.0,
            current: Atom::parse("x1").unwrap().0,
        };
        let label = term.label();
        assert_eq!(label, "link(80*[erlang(4,1)*exp(4.5*sig)*exp(-0.5*x1d)*x1d]-1*[x1])");
        assert_eq!(LinkedTerm::parse(&label).unwrap(), term);
    }

    #[test]
    fn erlang_factor_matches_closed_form() {
        // (n/τ)^n (-σ)^{n-1}/(n-1)! at n=4, τ=1, σ=-1 is 256/6.
        assert_relative_eq!(erlang_factor(4.0, 1.0, -1.0), 256.0 / 6.0, max_relative = 1e-12);
        assert_eq!(erlang_factor(4.0, 1.0, 0.0), 0.0);
        assert_relative_eq!(erlang_factor(1.0, 2.0, 0.0), 0.5);
    }

    #[test]
    fn single_node_rule_scales_atom_values() {
        let traj = constant_traj(0.5, -3.0);
        let rule = QuadratureRule::new(QuadratureKind::Rectangles, 1, -3.0, -1.0).unwrap();
        let atoms = vec![Atom::parse("sig*x1d").unwrap().0];
        let lib = assemble_distributed(&traj, &rule, &atoms).unwrap();
        for v in lib.matrix.iter() {
            assert_relative_eq!(*v, 2.0 * (-3.0 * 0.5), max_relative = 1e-14);
        }
    }

    #[test]
    fn constant_data_integrates_in_closed_form() {
        let traj = constant_traj(0.5, -3.0);
        let rule = QuadratureRule::new(QuadratureKind::Trapezoid, 128, -3.0, -1.0).unwrap();
        let atoms = vec![Atom::parse("sig*x1d").unwrap().0, Atom::constant()];
        let lib = assemble_distributed(&traj, &rule, &atoms).unwrap();
        assert_eq!(lib.matrix.nrows(), 21);
        for i in 0..21 {
            assert_relative_eq!(lib.matrix[(i, 0)], -2.0, max_relative = 1e-12);
            assert_relative_eq!(lib.matrix[(i, 1)], 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn rows_without_coverage_are_masked() {
        let times: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let traj = Trajectory::new(times, DMatrix::from_element(11, 1, 1.0)).unwrap();
        let rule = QuadratureRule::new(QuadratureKind::Trapezoid, 5, -3.0, -1.0).unwrap();
        let lib = assemble_distributed(&traj, &rule, &[Atom::constant()]).unwrap();
        assert_eq!(lib.matrix.nrows(), 8);
        assert_eq!(&lib.row_mask[..4], &[false, false, false, true]);
        let wide = QuadratureRule::new(QuadratureKind::Trapezoid, 5, -30.0, -1.0).unwrap();
        assert!(matches!(
            assemble_distributed(&traj, &wide, &[Atom::constant()]),
            Err(Error::EmptyRows { .. })
        ));
    }

    #[test]
    fn instantaneous_block() {
        let times = vec![0.0, 1.0];
        let states = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 3.0]);
        let traj = Trajectory::new(times, states).unwrap();
        let atoms = vec![Atom::parse("x2").unwrap().0, Atom::parse("x2^2").unwrap().0, Atom::constant()];
        let lib = assemble_instantaneous(&traj, &atoms).unwrap();
        assert_eq!(lib.matrix.row(0).iter().copied().collect::<Vec<_>>(), [2.0, 4.0, 1.0]);
        assert_eq!(lib.labels, ["x2", "x2^2", "1"]);
        assert!(assemble_instantaneous(&traj, &[Atom::parse("x1d").unwrap().0]).is_err());
    }

    #[test]
    fn lagged_atoms_read_shifted_data() {
        let times: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let states = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let traj = Trajectory::new(times, states).unwrap();
        let atoms = vec![Atom::parse("x1[-1.5]").unwrap().0, Atom::parse("x1").unwrap().0];
        let lib = assemble_instantaneous(&traj, &atoms).unwrap();
        assert_eq!(lib.retained_rows(), [2, 3, 4, 5]);
        assert_relative_eq!(lib.matrix[(0, 0)], 0.5);
        assert_relative_eq!(lib.matrix[(0, 1)], 2.0);
    }

    #[test]
    fn concat_merges_masks() {
        let a = AssembledLibrary {
            matrix: DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            labels: vec!["a".into()],
            row_mask: vec![false, true, true],
        };
        let b = AssembledLibrary {
            matrix: DMatrix::from_row_slice(2, 1, &[10.0, 20.0]),
            labels: vec!["b".into()],
            row_mask: vec![true, true, false],
        };
        let c = concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.row_mask, [false, true, false]);
        assert_eq!(c.matrix, DMatrix::from_row_slice(1, 2, &[1.0, 20.0]));
        assert_eq!(concat(&[a.clone()]).unwrap(), a);
        let d = AssembledLibrary { row_mask: vec![true, false, false], ..b };
        let e = AssembledLibrary { row_mask: vec![false, false, true], ..a };
        assert!(matches!(concat(&[d, e]), Err(Error::DisjointMasks)));
    }

    #[test]
    fn unresolved_slots_are_rejected() {
        let traj = constant_traj(0.5, -3.0);
        let rule = QuadratureRule::new(QuadratureKind::Trapezoid, 5, -3.0, -1.0).unwrap();
        let atom = Atom::parse("exp($r*sig)").unwrap().0;
        assert!(matches!(
            assemble_distributed(&traj, &rule, &[atom.clone()]),
            Err(Error::UnresolvedParameter(_))
        ));
        let params = Params::from([("r".to_string(), 0.0)]);
        let lib = assemble_distributed(&traj, &rule, &[atom.resolve(&params).unwrap()]).unwrap();
        assert_relative_eq!(lib.matrix[(0, 0)], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn spec_rejects_misplaced_atoms() {
        let shifted = Atom::parse("x1d").unwrap().0;
        assert!(LibrarySpec::new(vec![], vec![shifted.clone()]).is_err());
        assert!(LibrarySpec::new(vec![shifted.clone(), shifted], vec![]).is_err());
        let spec = LibrarySpec::new(
            vec![Atom::constant(), Atom::parse("x1d").unwrap().0],
            vec![Atom::constant(), Atom::parse("x1").unwrap().0],
        )
        .unwrap();
        assert_eq!(spec.labels(), ["sig^0", "x1d", "1", "x1"]);
        assert_eq!(LibrarySpec::from_labels(&spec.labels()).unwrap(), spec);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_traj(values: &[f64]) -> Trajectory {
            let m = values.len();
            let times: Vec<f64> = (0..m).map(|i| i as f64 * 0.25).collect();
            Trajectory::new(times, DMatrix::from_column_slice(m, 1, values))
                .unwrap()
                .with_history(History::new(vec![-2.0, -1.0], DMatrix::from_column_slice(2, 1, &values[..2])).unwrap())
                .unwrap()
        }

        proptest! {
            #[test]
            fn columns_scale_with_state_degree(
                values in proptest::collection::vec(-2.0f64..2.0, 12..30),
                c in 0.2f64..3.0,
            ) {
                let traj = random_traj(&values);
                let scaled_values: Vec<f64> = values.iter().map(|v| c * v).collect();
                let scaled = random_traj(&scaled_values);
                let rule = QuadratureRule::new(QuadratureKind::Trapezoid, 9, -2.0, -0.5).unwrap();
                let mut atoms = distributed_monomials(&[Symbol::Sigma, Symbol::Shifted(0), Symbol::Current(0)], 3, false);
                atoms.push(Atom::parse("exp(-0.7*sig)*x1d^2").unwrap().0);
                let a = assemble_distributed(&traj, &rule, &atoms).unwrap();
                let b = assemble_distributed(&scaled, &rule, &atoms).unwrap();
                for (col, atom) in atoms.iter().enumerate() {
                    let factor = c.powi(atom.state_degree() as i32);
                    for r in 0..a.matrix.nrows() {
                        let expect = factor * a.matrix[(r, col)];
                        prop_assert!((b.matrix[(r, col)] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
                    }
                }
            }

            #[test]
            fn permuting_atoms_permutes_columns(
                values in proptest::collection::vec(-2.0f64..2.0, 12..20),
                seed in 0u64..1000,
            ) {
                let traj = random_traj(&values);
                let rule = QuadratureRule::new(QuadratureKind::ClenshawCurtis, 7, -2.0, -0.5).unwrap();
                let atoms = enumerate_monomials(&[Symbol::Sigma, Symbol::Shifted(0)], 3);
                let mut order: Vec<usize> = (0..atoms.len()).collect();
                let mut s = seed;
                for i in (1..order.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    order.swap(i, (s >> 33) as usize % (i + 1));
                }
                let permuted: Vec<Atom> = order.iter().map(|&i| atoms[i].clone()).collect();
                let a = assemble_distributed(&traj, &rule, &atoms).unwrap();
                let b = assemble_distributed(&traj, &rule, &permuted).unwrap();
                for (new, &old) in order.iter().enumerate() {
                    prop_assert_eq!(&b.labels[new], &a.labels[old]);
                    prop_assert_eq!(b.matrix.column(new), a.matrix.column(old));
                }
            }
        }
    }
}
