use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

pub const HEADER: &str = "run,section,equation,name,value,truth,abs_error";

/// One result entry: a coefficient, an optimized value, an RMSE or a search statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run: String,
    pub section: String,
    /// 1-based equation index, 0 for run-level entries.
    pub equation: usize,
    pub name: String,
    pub value: f64,
    pub truth: Option<f64>,
}

impl Row {
    pub fn new(run: &str, section: &str, equation: usize, name: &str, value: f64, truth: Option<f64>) -> Self {
        Row { run: run.into(), section: section.into(), equation, name: name.into(), value, truth }
    }

    pub fn abs_error(&self) -> Option<f64> {
        self.truth.map(|t| (self.value - t).abs())
    }

    fn key(&self) -> (String, String, usize, String) {
        (self.run.clone(), self.section.clone(), self.equation, self.name.clone())
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            quote(&r.run),
            quote(&r.section),
            r.equation,
            quote(&r.name),
            r.value,
            opt(r.truth),
            opt(r.abs_error())
        )
        .unwrap();
    }
    out
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read report {}: {e}", path.display())))?;
    let bad = |line: usize, what: &str| CliError::Usage(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(bad(1, "not a report CSV (unexpected header)")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f = split_line(line);
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 1, &format!("bad number `{s}`")));
        rows.push(Row {
            run: f[0].clone(),
            section: f[1].clone(),
            equation: f[2].trim().parse().map_err(|_| bad(i + 1, "bad equation index"))?,
            name: f[3].clone(),
            value: num(&f[4])?,
            truth: if f[5].trim().is_empty() { None } else { Some(num(&f[5])?) },
        });
    }
    Ok(rows)
}

/// Concatenates runs; a later entry with the same run, section, equation and
/// name replaces an earlier one, so merging is idempotent.
pub fn merge(inputs: Vec<Vec<Row>>) -> Vec<Row> {
    let mut order: Vec<(String, String, usize, String)> = Vec::new();
    let mut map = BTreeMap::new();
    for row in inputs.into_iter().flatten() {
        let key = row.key();
        if map.insert(key.clone(), row).is_none() {
            order.push(key);
        }
    }
    order.into_iter().map(|k| map.remove(&k).unwrap()).collect()
}

/// Side-by-side comparison: one line per entry, one column per run; cells
/// show the absolute error when a truth value is known, the value otherwise.
pub fn table(rows: &[Row], precision: usize) -> String {
    let mut runs: Vec<&str> = Vec::new();
    let mut entries: Vec<(&str, usize, &str)> = Vec::new();
    for r in rows {
        if !runs.contains(&r.run.as_str()) {
            runs.push(&r.run);
        }
        let e = (r.section.as_str(), r.equation, r.name.as_str());
        if !entries.contains(&e) {
            entries.push(e);
        }
    }
    let mut grid: Vec<Vec<String>> = vec![
        ["section", "eq", "term"].iter().map(|s| s.to_string()).chain(runs.iter().map(|s| s.to_string())).collect(),
    ];
    for (section, eq, name) in &entries {
        let mut line = vec![
            section.to_string(),
            if *eq == 0 { String::new() } else { eq.to_string() },
            name.to_string(),
        ];
        for run in &runs {
            let cell = rows
                .iter()
                .find(|r| r.run == *run && r.section == *section && r.equation == *eq && r.name == *name)
                .map_or("-".to_string(), |r| match r.abs_error() {
                    Some(e) => format!("{e:.precision$e}"),
                    None => format!("{:.precision$e}", r.value),
                });
            line.push(cell);
        }
        grid.push(line);
    }
    let widths: Vec<usize> =
        (0..grid[0].len()).map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for line in &grid {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out.push_str("(cells: absolute error where a ground truth is known, value otherwise)\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_idempotent_merge() {
        let rows = vec![
            Row::new("a", "coefficient", 1, "sig*x1d", 0.99, Some(1.0)),
            Row::new("a", "rmse", 0, "train", 1e-3, None),
            Row::new("b,c", "coefficient", 1, "x1", -1.0, Some(-1.0)),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, to_csv(&rows)).unwrap();
        let back = read_csv(&p).unwrap();
        assert_eq!(back, rows);
        assert_eq!(merge(vec![back.clone(), back.clone()]), rows);
    }

    #[test]
    fn table_has_a_column_per_run() {
        let rows = vec![
            Row::new("dd", "coefficient", 1, "x1", -0.99, Some(-1.0)),
            Row::new("bb", "coefficient", 1, "x1", -0.9, Some(-1.0)),
        ];
        let t = table(&rows, 2);
        let head = t.lines().next().unwrap();
        assert!(head.contains("dd") && head.contains("bb"));
        assert!(t.contains("1.00e-2") && t.contains("1.00e-1"), "{t}");
    }
}
