//! Turns a metrics or episode CSV into one `(x, y)` file per numeric column.

use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// One plottable column.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn parse_cell(s: &str) -> Option<f64> {
    match s.trim() {
        "" => None,
        "true" => Some(1.0),
        "false" => Some(0.0),
        v => v.parse().ok(),
    }
}

/// The first column is x; every other column with at least one numeric cell
/// becomes a series. Empty cells are skipped, `true`/`false` read as 1/0.
pub fn read_series(path: &Path) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 {
        return Err(CliError::Input(format!("{}: need an x column and at least one y column", path.display())));
    }
    let mut series: Vec<Series> = headers
        .iter()
        .skip(1)
        .map(|h| Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let x = record
            .get(0)
            .and_then(parse_cell)
            .ok_or_else(|| CliError::Input(format!("{}: row {} has no numeric x", path.display(), line + 1)))?;
        for (s, cell) in series.iter_mut().zip(record.iter().skip(1)) {
            if let Some(y) = parse_cell(cell) {
                s.points.push((x, y));
            }
        }
    }
    series.retain(|s| !s.points.is_empty());
    if series.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    Ok(series)
}

/// Trailing moving average: point `i` becomes the mean of points
/// `max(0, i - window + 1) ..= i`, so the first points average fewer values.
/// A window of 1 leaves the series unchanged.
pub fn moving_average(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let window = window.max(1);
    let mut sum = 0.0;
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            sum += y;
            if i >= window {
                sum -= points[i - window].1;
            }
            (x, sum / (i + 1).min(window) as f64)
        })
        .collect()
}

/// Write `<out>/<column>.csv` with header `x,y` for every series.
pub fn export(input: &Path, out: &Path, window: usize) -> Result<Vec<PathBuf>> {
    if window == 0 {
        return Err(CliError::Usage("--window must be at least 1".into()));
    }
    let series = read_series(input)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut written = Vec::new();
    for s in series {
        let path = out.join(format!("{}.csv", s.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
        w.write_record(["x", "y"]).map_err(io)?;
        for (x, y) in moving_average(&s.points, window) {
            w.write_record([x.to_string(), y.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
