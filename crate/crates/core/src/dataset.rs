//! Sampled time series: ingestion, validation, shifted lookups, noise and splits.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Marker line separating the pre-initial history rows from the samples.
pub const T0_MARKER: &str = "# --- t0 ---";

/// Where the derivative columns of a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSource {
    /// Right-hand side evaluated by the generating simulator.
    Exact,
    /// Columns read from a data file.
    Measured,
    /// Finite differences of the state samples.
    Estimated,
}

impl std::fmt::Display for DerivativeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DerivativeSource::Exact => "exact",
            DerivativeSource::Measured => "measured",
            DerivativeSource::Estimated => "estimated",
        })
    }
}

/// State values observed before the first sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl History {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidTrajectory("history segment is empty".into()));
        }
        if values.nrows() != times.len() {
            return Err(Error::InvalidTrajectory(format!(
                "history has {} times but {} value rows",
                times.len(),
                values.nrows()
            )));
        }
        check_increasing(&times, "history")?;
        Ok(Self { times, values })
    }

    /// Constant history `value` sampled on `[lower, upper]` (two points suffice for
    /// piecewise-linear lookups).
    pub fn constant(lower: f64, upper: f64, value: &[f64]) -> Result<Self> {
        let times = if lower < upper { vec![lower, upper] } else { vec![upper] };
        let values = DMatrix::from_fn(times.len(), value.len(), |_, j| value[j]);
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Time samples of an `n`-component state with optional derivatives and history.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: DMatrix<f64>,
    derivs: Option<DMatrix<f64>>,
    deriv_source: DerivativeSource,
    history: Option<History>,
}

fn check_increasing(times: &[f64], what: &str) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidTrajectory(format!("{what} times must be finite")));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidTrajectory(format!(
            "non-monotone {what} times: {} followed by {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidTrajectory("no samples".into()));
        }
        check_increasing(&times, "sample")?;
        if states.nrows() != times.len() {
            return Err(Error::InvalidTrajectory(format!(
                "{} times but {} state rows",
                times.len(),
                states.nrows()
            )));
        }
        if states.ncols() == 0 {
            return Err(Error::InvalidTrajectory("at least one state component is required".into()));
        }
        Ok(Self {
            times,
            states,
            derivs: None,
            deriv_source: DerivativeSource::Measured,
            history: None,
        })
    }

    pub fn with_derivatives(mut self, derivs: DMatrix<f64>, source: DerivativeSource) -> Result<Self> {
        if derivs.shape() != self.states.shape() {
            return Err(Error::InvalidTrajectory(format!(
                "derivative shape {:?} does not match state shape {:?}",
                derivs.shape(),
                self.states.shape()
            )));
        }
        self.derivs = Some(derivs);
        self.deriv_source = source;
        Ok(self)
    }

    pub fn with_history(mut self, history: History) -> Result<Self> {
        if history.values.ncols() != self.n_states() {
            return Err(Error::InvalidTrajectory(format!(
                "history has {} components, samples have {}",
                history.values.ncols(),
                self.n_states()
            )));
        }
        if *history.times.last().unwrap() > self.times[0] {
            return Err(Error::InvalidTrajectory(
                "history times must not exceed the first sample time".into(),
            ));
        }
        self.history = Some(history);
        Ok(self)
    }

    pub fn without_derivatives(mut self) -> Self {
        self.derivs = None;
        self
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn derivs(&self) -> Option<&DMatrix<f64>> {
        self.derivs.as_ref()
    }

    pub fn deriv_source(&self) -> DerivativeSource {
        self.deriv_source
    }

    pub fn history(&self) -> Option<&History> {
        self.history.as_ref()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.states.ncols()
    }

    /// Earliest time for which a state value is available.
    pub fn earliest_time(&self) -> f64 {
        self.history.as_ref().map_or(self.times[0], |h| h.times[0])
    }

    fn time_tolerance(&self) -> f64 {
        let scale = self
            .earliest_time()
            .abs()
            .max(self.times[self.len() - 1].abs())
            .max(1.0);
        1e-10 * scale
    }

    /// Piecewise-linear state value at time `t`, written into `out`.
    ///
    /// Returns `false` (leaving `out` untouched) when `t` lies before every
    /// available sample; values are never extrapolated.
    pub fn value_at(&self, t: f64, out: &mut [f64]) -> bool {
        let tol = self.time_tolerance();
        let t0 = self.times[0];
        let last = self.times[self.len() - 1];
        if t > last + tol || t < self.earliest_time() - tol {
            return false;
        }
        if t >= t0 - tol {
            let t = t.clamp(t0, last);
            interpolate(&self.times, &self.states, t, out);
            return true;
        }
        let hist = self.history.as_ref().expect("checked above");
        let h_last = *hist.times.last().unwrap();
        if t >= h_last {
            // Between the last history point and the first sample.
            let w = (t - h_last) / (t0 - h_last);
            for (j, o) in out.iter_mut().enumerate() {
                *o = (1.0 - w) * hist.values[(hist.len() - 1, j)] + w * self.states[(0, j)];
            }
            return true;
        }
        interpolate(&hist.times, &hist.values, t.max(hist.times[0]), out);
        true
    }

    /// State values at `times[i] + sigma` for every row that has data coverage.
    pub fn shifted_values(&self, sigma: f64) -> Shifted {
        assert!(sigma <= 0.0, "shifts must be non-positive, got {sigma}");
        let n = self.n_states();
        let mut mask = vec![false; self.len()];
        let mut rows = Vec::with_capacity(self.len() * n);
        let mut buf = vec![0.0; n];
        for (i, &t) in self.times.iter().enumerate() {
            if self.value_at(t + sigma, &mut buf) {
                mask[i] = true;
                rows.extend_from_slice(&buf);
            }
        }
        let kept = rows.len() / n;
        Shifted {
            values: DMatrix::from_row_slice(kept, n, &rows),
            mask,
        }
    }

    /// Row subset `[start, end)` with the history left untouched.
    fn rows(&self, start: usize, end: usize) -> (Vec<f64>, DMatrix<f64>, Option<DMatrix<f64>>) {
        let times = self.times[start..end].to_vec();
        let states = self.states.rows(start, end - start).into_owned();
        let derivs = self.derivs.as_ref().map(|d| d.rows(start, end - start).into_owned());
        (times, states, derivs)
    }
}

impl History {
    fn len(&self) -> usize {
        self.times.len()
    }
}

fn interpolate(times: &[f64], values: &DMatrix<f64>, t: f64, out: &mut [f64]) {
    let idx = times.partition_point(|&s| s <= t);
    if idx == 0 {
        for (j, o) in out.iter_mut().enumerate() {
            *o = values[(0, j)];
        }
        return;
    }
    if idx == times.len() {
        for (j, o) in out.iter_mut().enumerate() {
            *o = values[(idx - 1, j)];
        }
        return;
    }
    let (t_lo, t_hi) = (times[idx - 1], times[idx]);
    let w = (t - t_lo) / (t_hi - t_lo);
    for (j, o) in out.iter_mut().enumerate() {
        *o = (1.0 - w) * values[(idx - 1, j)] + w * values[(idx, j)];
    }
}

/// Result of [`Trajectory::shifted_values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Shifted {
    /// One row per retained trajectory row.
    pub values: DMatrix<f64>,
    /// `mask[i]` is true when row `i` was retained.
    pub mask: Vec<bool>,
}

/// Three-point finite differences (non-uniform grids allowed), one-sided at both ends.
pub fn estimate_derivatives(traj: &Trajectory) -> Result<DMatrix<f64>> {
    let m = traj.len();
    if m < 3 {
        return Err(Error::InvalidTrajectory(format!(
            "derivative estimation needs at least 3 samples, got {m}"
        )));
    }
    let t = traj.times();
    let x = traj.states();
    let mut d = DMatrix::zeros(m, x.ncols());
    for j in 0..x.ncols() {
        {
            let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
            d[(0, j)] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * x[(0, j)]
                + (h1 + h2) / (h1 * h2) * x[(1, j)]
                - h1 / (h2 * (h1 + h2)) * x[(2, j)];
        }
        for i in 1..m - 1 {
            let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
            d[(i, j)] = -h2 / (h1 * (h1 + h2)) * x[(i - 1, j)]
                + (h2 - h1) / (h1 * h2) * x[(i, j)]
                + h1 / (h2 * (h1 + h2)) * x[(i + 1, j)];
        }
        {
            let (h1, h2) = (t[m - 2] - t[m - 3], t[m - 1] - t[m - 2]);
            d[(m - 1, j)] = h2 / (h1 * (h1 + h2)) * x[(m - 3, j)]
                - (h1 + h2) / (h1 * h2) * x[(m - 2, j)]
                + (2.0 * h2 + h1) / (h2 * (h1 + h2)) * x[(m - 1, j)];
        }
    }
    Ok(d)
}

/// Adds zero-mean Gaussian noise with standard deviation `level * RMS(column)` to
/// each state component. Derivatives, when present, are re-estimated from the
/// perturbed states. The history segment is left unperturbed.
pub fn add_noise(traj: &Trajectory, level: f64, seed: u64) -> Result<Trajectory> {
    if !(level >= 0.0) {
        return Err(Error::InvalidTrajectory(format!("noise level must be >= 0, got {level}")));
    }
    if level == 0.0 {
        return Ok(traj.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = traj.clone();
    let m = traj.len() as f64;
    for j in 0..traj.n_states() {
        let col = traj.states.column(j);
        let rms = (col.iter().map(|v| v * v).sum::<f64>() / m).sqrt();
        let std = level * rms;
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).expect("finite positive std");
        for i in 0..traj.len() {
            noisy.states[(i, j)] += normal.sample(&mut rng);
        }
    }
    if noisy.derivs.is_some() {
        let est = estimate_derivatives(&noisy)?;
        // Components without derivative data (renewal components) stay NaN.
        let old = noisy.derivs.as_ref().unwrap();
        let merged = DMatrix::from_fn(est.nrows(), est.ncols(), |i, j| {
            if old.column(j).iter().all(|v| v.is_nan()) {
                f64::NAN
            } else {
                est[(i, j)]
            }
        });
        noisy.derivs = Some(merged);
        noisy.deriv_source = DerivativeSource::Estimated;
    }
    Ok(noisy)
}

/// Contiguous prefix split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    train_fraction: f64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::InvalidSplit(format!(
                "train fraction must lie in (0, 1], got {train_fraction}"
            )));
        }
        Ok(Self { train_fraction })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction
    }

    /// Number of training rows out of `m`: `ceil(fraction * m)`.
    pub fn train_rows(&self, m: usize) -> usize {
        ((self.train_fraction * m as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Splits into a training prefix and a validation remainder.
///
/// The validation trajectory's history is the original history followed by the
/// training rows, so shifted lookups from validation rows can reach back into the
/// training era.
pub fn split(traj: &Trajectory, spec: SplitSpec) -> Result<(Trajectory, Trajectory)> {
    let m = traj.len();
    let n_train = spec.train_rows(m);
    if n_train == 0 || n_train >= m {
        return Err(Error::InvalidSplit(format!(
            "fraction {} of {m} rows leaves an empty subset",
            spec.train_fraction
        )));
    }
    let (t, x, d) = traj.rows(0, n_train);
    let mut train = Trajectory::new(t, x)?;
    if let Some(d) = d {
        train = train.with_derivatives(d, traj.deriv_source)?;
    }
    if let Some(h) = &traj.history {
        train = train.with_history(h.clone())?;
    }

    let (t, x, d) = traj.rows(n_train, m);
    let mut val = Trajectory::new(t, x)?;
    if let Some(d) = d {
        val = val.with_derivatives(d, traj.deriv_source)?;
    }
    let mut h_times = Vec::new();
    let mut h_rows: Vec<f64> = Vec::new();
    let n = traj.n_states();
    if let Some(h) = &traj.history {
        for (i, &ht) in h.times.iter().enumerate() {
            // A history point at t0 would duplicate the first training time.
            if ht < traj.times[0] {
                h_times.push(ht);
                h_rows.extend(h.values.row(i).iter());
            }
        }
    }
    for i in 0..n_train {
        h_times.push(traj.times[i]);
        h_rows.extend(traj.states.row(i).iter());
    }
    let hist = History::new(h_times.clone(), DMatrix::from_row_slice(h_times.len(), n, &h_rows))?;
    val = val.with_history(hist)?;
    Ok((train, val))
}

/// Reads the dataset CSV format from a file.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    read_csv(file).map_err(|e| match e {
        Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
        Error::InvalidTrajectory(msg) => Error::Load(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses the dataset CSV format: header `t,x1,...,xn[,dx1,...,dxn]`, `#` comments,
/// optional history rows preceding a [`T0_MARKER`] line.
pub fn read_csv(reader: impl Read) -> Result<Trajectory> {
    let reader = BufReader::new(reader);
    let mut header: Option<(usize, bool)> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut history_rows: Option<Vec<Vec<f64>>> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if trimmed == T0_MARKER {
                if history_rows.is_some() {
                    return Err(Error::Load(format!("line {}: duplicate t0 marker", lineno + 1)));
                }
                history_rows = Some(std::mem::take(&mut rows));
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        match header {
            None => header = Some(parse_header(&fields)?),
            Some((n, has_d)) => {
                let width = 1 + n * if has_d { 2 } else { 1 };
                if fields.len() != width {
                    return Err(Error::Load(format!(
                        "line {}: ragged row with {} fields, expected {width}",
                        lineno + 1,
                        fields.len()
                    )));
                }
                let row = fields
                    .iter()
                    .map(|f| {
                        f.parse::<f64>().map_err(|_| {
                            Error::Load(format!("line {}: cannot parse `{f}` as a number", lineno + 1))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
        }
    }
    let (n, has_d) = header.ok_or_else(|| Error::Load("missing header line".into()))?;
    if rows.is_empty() {
        return Err(Error::Load("no data rows".into()));
    }
    let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let states = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][1 + j]);
    let mut traj = Trajectory::new(times, states)?;
    if has_d {
        let derivs = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][1 + n + j]);
        traj = traj.with_derivatives(derivs, DerivativeSource::Measured)?;
    }
    if let Some(hist) = history_rows.filter(|h| !h.is_empty()) {
        let times: Vec<f64> = hist.iter().map(|r| r[0]).collect();
        let values = DMatrix::from_fn(hist.len(), n, |i, j| hist[i][1 + j]);
        traj = traj.with_history(History::new(times, values)?)?;
    }
    Ok(traj)
}

fn parse_header(fields: &[&str]) -> Result<(usize, bool)> {
    if fields.first() != Some(&"t") {
        return Err(Error::Load(format!("header must start with `t`, got `{}`", fields.join(","))));
    }
    let rest = &fields[1..];
    let n = rest.iter().take_while(|f| f.starts_with('x')).count();
    if n == 0 {
        return Err(Error::Load("header declares no state columns".into()));
    }
    for (j, f) in rest[..n].iter().enumerate() {
        if *f != format!("x{}", j + 1) {
            return Err(Error::Load(format!("unexpected state column `{f}`")));
        }
    }
    let d = &rest[n..];
    if d.is_empty() {
        return Ok((n, false));
    }
    if d.len() != n || d.iter().enumerate().any(|(j, f)| *f != format!("dx{}", j + 1)) {
        return Err(Error::Load(format!("derivative columns must be dx1..dx{n}")));
    }
    Ok((n, true))
}

/// Writes the dataset CSV format. Numbers use the shortest round-trip representation.
pub fn write_csv(traj: &Trajectory, mut w: impl Write) -> Result<()> {
    let n = traj.n_states();
    let has_d = traj.derivs.is_some();
    let mut line = String::from("t");
    for j in 1..=n {
        write!(line, ",x{j}").unwrap();
    }
    if has_d {
        for j in 1..=n {
            write!(line, ",dx{j}").unwrap();
        }
    }
    writeln!(w, "{line}")?;
    if let Some(h) = &traj.history {
        for i in 0..h.times.len() {
            line.clear();
            write!(line, "{}", h.times[i]).unwrap();
            for j in 0..n {
                write!(line, ",{}", h.values[(i, j)]).unwrap();
            }
            if has_d {
                for _ in 0..n {
                    line.push_str(",NaN");
                }
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w, "{T0_MARKER}")?;
    }
    for i in 0..traj.len() {
        line.clear();
        write!(line, "{}", traj.times[i]).unwrap();
        for j in 0..n {
            write!(line, ",{}", traj.states[(i, j)]).unwrap();
        }
        if let Some(d) = &traj.derivs {
            for j in 0..n {
                write!(line, ",{}", d[(i, j)]).unwrap();
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
