use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use super::{EpisodeRecord, RunStatus};
use crate::episodegen::Regime;
use crate::metrics::EpisodeMetrics;
use crate::policies::{PolicyKind, Track};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 when n = 1.
    pub se: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        if let Some(&first) = values.first() {
            if values.iter().all(|&v| v == first) {
                return Self {
                    mean: first,
                    se: 0.0,
                };
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            se: var.sqrt() / n.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub regime: Regime,
    pub track: Track,
    pub budget: u64,
    pub policy: PolicyKind,
    pub episodes: usize,
    /// Aligned with [`EpisodeMetrics::SCALAR_NAMES`].
    pub metrics: Vec<MetricSummary>,
}

impl AggregateRow {
    pub fn metric(&self, name: &str) -> Option<MetricSummary> {
        EpisodeMetrics::SCALAR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.metrics[i])
    }
}

/// Group successful records by condition. Conditions with no successful
/// episode produce no row.
pub fn aggregate(records: &[EpisodeRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Regime, Track, u64, PolicyKind), Vec<&EpisodeMetrics>> =
        BTreeMap::new();
    for r in records {
        if r.status != RunStatus::Ok {
            continue;
        }
        if let Some(m) = &r.metrics {
            groups
                .entry((r.regime, r.track, r.budget, r.policy))
                .or_default()
                .push(m);
        }
    }
    groups
        .into_iter()
        .map(|((regime, track, budget, policy), ms)| {
            let columns: Vec<[f64; 13]> = ms.iter().map(|m| m.scalars()).collect();
            let metrics = (0..EpisodeMetrics::SCALAR_NAMES.len())
                .map(|j| MetricSummary::of(&columns.iter().map(|c| c[j]).collect::<Vec<_>>()))
                .collect();
            AggregateRow {
                regime,
                track,
                budget,
                policy,
                episodes: ms.len(),
                metrics,
            }
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ReadRecordsError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parse a per-episode results file. Blank lines are ignored.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>, ReadRecordsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| ReadRecordsError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["regime", "track", "budget", "policy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for name in EpisodeMetrics::SCALAR_NAMES {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_se"));
    }
    header.push("episodes".to_string());
    w.write_record(&header)?;

    for row in rows {
        let mut rec = vec![
            row.regime.as_str().to_string(),
            row.track.as_str().to_string(),
            row.budget.to_string(),
            row.policy.as_str().to_string(),
        ];
        for m in &row.metrics {
            rec.push(format!("{:.6}", m.mean));
            rec.push(format!("{:.6}", m.se));
        }
        rec.push(row.episodes.to_string());
        w.write_record(&rec)?;
    }
    w.flush()
}
