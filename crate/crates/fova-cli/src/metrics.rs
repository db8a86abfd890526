//! Metrics serialization and the continual-learning summary scores.

use fova_core::error::{Error, Result};
use fova_core::federation::{metrics_csv_header, metrics_csv_row, RoundMetrics};
use ndarray::Array2;

/// Average final performance over phases: the mean of the last score row.
/// Backward transfer: how much earlier phases' scores moved by the end,
/// `BWT = (1/(P-1)) * sum_{j<P-1} (a[P-1][j] - a[j][j])`. A single phase has
/// no backward transfer; `None` is the sentinel.
pub fn per_bwt(scores: &Array2<f64>) -> Result<(f64, Option<f64>)> {
    let (rows, cols) = scores.dim();
    if rows == 0 || rows != cols {
        return Err(Error::Argument(format!(
            "score matrix must be square and nonempty, got {rows}x{cols}"
        )));
    }
    let p = rows;
    let last = p - 1;
    let per = (0..p).map(|j| scores[[last, j]]).sum::<f64>() / p as f64;
    if p == 1 {
        return Ok((per, None));
    }
    let bwt = (0..p - 1)
        .map(|j| scores[[last, j]] - scores[[j, j]])
        .sum::<f64>()
        / (p - 1) as f64;
    Ok((per, Some(bwt)))
}

/// Renders the per-round metrics CSV (exact header from the round loop).
pub fn metrics_to_csv(metrics: &[RoundMetrics]) -> Result<String> {
    let first = metrics
        .first()
        .ok_or_else(|| Error::Argument("no metrics to serialize".into()))?;
    let mut out = metrics_csv_header(first.j_clients.len());
    out.push('\n');
    for m in metrics {
        out.push_str(&metrics_csv_row(m));
        out.push('\n');
    }
    Ok(out)
}

/// A parsed metrics CSV: round indices plus the tracked columns.
#[derive(Debug, Clone)]
pub struct ParsedMetrics {
    pub rounds: Vec<usize>,
    pub j_global: Vec<f64>,
    pub j_client_mean: Vec<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<ParsedMetrics> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Argument("empty metrics file".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Argument(format!("metrics header missing column {name}")))
    };
    let round_idx = find("round")?;
    let jg_idx = find("j_global")?;
    let jcm_idx = find("j_client_mean")?;

    let mut parsed = ParsedMetrics {
        rounds: Vec::new(),
        j_global: Vec::new(),
        j_client_mean: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Argument(format!(
                "metrics line {}: {} fields, expected {}",
                i + 2,
                fields.len(),
                columns.len()
            )));
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx]
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("metrics line {}: bad number", i + 2)))
        };
        parsed.rounds.push(
            fields[round_idx]
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("metrics line {}: bad round index", i + 2)))?,
        );
        parsed.j_global.push(num(jg_idx)?);
        parsed.j_client_mean.push(num(jcm_idx)?);
    }
    Ok(parsed)
}

/// Column-wise mean and (population) standard deviation across seeds.
pub fn mean_std(series: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_series = series.len();
    if n_series == 0 {
        return Err(Error::Argument("no series to aggregate".into()));
    }
    let len = series[0].len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::Argument("series have unequal lengths".into()));
    }
    let mut means = Vec::with_capacity(len);
    let mut stds = Vec::with_capacity(len);
    for i in 0..len {
        let mean = series.iter().map(|s| s[i]).sum::<f64>() / n_series as f64;
        let var = series.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n_series as f64;
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok((means, stds))
}
