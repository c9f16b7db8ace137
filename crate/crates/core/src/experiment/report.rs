use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{ExperimentConfig, Protocol};
use super::ExperimentError;
use crate::metrics::{adjusted_parity, mean_and_population_std, summarize};
use crate::nested::TrainLog;

/// One score from one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub holdout: Option<i32>,
    pub seed: u64,
    /// `None` for scores over the whole test set.
    pub domain: Option<i32>,
    pub metric: String,
    pub value: f64,
}

/// A score averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub holdout: Option<i32>,
    pub domain: Option<i32>,
    pub metric: String,
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Adjusted parity over seed-averaged per-domain scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub model: String,
    /// The fold for `scope = "fold"`; `None` for the sweep over folds.
    pub holdout: Option<i32>,
    /// `"fold"`: across all test domains of one fold. `"sweep"`: across
    /// folds, each contributing its held-out domain.
    pub scope: String,
    pub metric: String,
    pub value: f64,
    pub mean: f64,
    pub population_std: f64,
    pub n_domains: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub runs: Vec<ScoreRow>,
    pub summary: Vec<SummaryRow>,
    pub parity: Vec<ParityRow>,
}

type Key = (String, Option<i32>, Option<i32>, String);

impl MetricsReport {
    pub fn build(cfg: &ExperimentConfig, runs: Vec<ScoreRow>) -> Result<Self, ExperimentError> {
        let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            groups
                .entry((r.model.clone(), r.holdout, r.domain, r.metric.clone()))
                .or_default()
                .push(r.value);
        }
        let summary: Vec<SummaryRow> = groups
            .into_iter()
            .map(|((model, holdout, domain, metric), v)| {
                let s = summarize(&v);
                SummaryRow {
                    model,
                    holdout,
                    domain,
                    metric,
                    mean: s.mean,
                    std_err: s.std_err,
                    n: s.n,
                }
            })
            .collect();
        let parity = if cfg.protocol == Protocol::LeaveOneDomainOut {
            parity_rows(&summary, "digit_f1")?
        } else {
            Vec::new()
        };
        let mut seeds = cfg.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        Ok(Self {
            protocol: cfg.protocol,
            config: cfg.to_json(),
            seeds,
            runs,
            summary,
            parity,
        })
    }

    pub fn mean(
        &self,
        model: &str,
        holdout: Option<i32>,
        domain: Option<i32>,
        metric: &str,
    ) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| {
                s.model == model && s.holdout == holdout && s.domain == domain && s.metric == metric
            })
            .map(|s| s.mean)
    }

    pub fn parity(&self, model: &str, holdout: Option<i32>) -> Option<f64> {
        self.parity
            .iter()
            .find(|p| p.model == model && p.holdout == holdout)
            .map(|p| p.value)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), ExperimentError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|source| ExperimentError::io(path, source))
    }

    /// Flat table: one line per run score, seed summary and parity value.
    pub fn write_csv(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut rows = Vec::new();
        for r in &self.runs {
            rows.push(CsvRow {
                record: "run",
                model: r.model.clone(),
                holdout: r.holdout,
                domain: r.domain,
                scope: None,
                metric: r.metric.clone(),
                seed: Some(r.seed),
                value: r.value,
                std_err: None,
                n: Some(1),
            });
        }
        for s in &self.summary {
            rows.push(CsvRow {
                record: "mean",
                model: s.model.clone(),
                holdout: s.holdout,
                domain: s.domain,
                scope: None,
                metric: s.metric.clone(),
                seed: None,
                value: s.mean,
                std_err: Some(s.std_err),
                n: Some(s.n),
            });
        }
        for p in &self.parity {
            rows.push(CsvRow {
                record: "parity",
                model: p.model.clone(),
                holdout: p.holdout,
                domain: None,
                scope: Some(p.scope.clone()),
                metric: p.metric.clone(),
                seed: None,
                value: p.value,
                std_err: None,
                n: Some(p.n_domains),
            });
        }
        write_stamped_csv(path, &self.stamp(), &rows)
    }

    fn stamp(&self) -> Value {
        serde_json::json!({ "config": self.config, "seeds": self.seeds })
    }
}

fn parity_rows(summary: &[SummaryRow], metric: &str) -> Result<Vec<ParityRow>, ExperimentError> {
    let mut per_fold: BTreeMap<(String, i32), Vec<(i32, f64)>> = BTreeMap::new();
    for s in summary.iter().filter(|s| s.metric == metric) {
        if let (Some(h), Some(d)) = (s.holdout, s.domain) {
            per_fold
                .entry((s.model.clone(), h))
                .or_default()
                .push((d, s.mean));
        }
    }
    let row = |model: &str,
               holdout: Option<i32>,
               scope: &str,
               scores: &[f64]|
     -> Result<ParityRow, ExperimentError> {
        let (mean, population_std) = mean_and_population_std(scores);
        Ok(ParityRow {
            model: model.to_string(),
            holdout,
            scope: scope.to_string(),
            metric: metric.to_string(),
            value: adjusted_parity(scores)?,
            mean,
            population_std,
            n_domains: scores.len(),
        })
    };
    let mut out = Vec::new();
    let mut held_out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((model, h), scores) in &per_fold {
        let values: Vec<f64> = scores.iter().map(|&(_, v)| v).collect();
        if values.len() >= 2 {
            out.push(row(model, Some(*h), "fold", &values)?);
        }
        if let Some(&(_, v)) = scores.iter().find(|&&(d, _)| d == *h) {
            held_out.entry(model.clone()).or_default().push(v);
        }
    }
    for (model, scores) in &held_out {
        if scores.len() >= 2 {
            out.push(row(model, None, "sweep", scores)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow {
    record: &'static str,
    model: String,
    holdout: Option<i32>,
    domain: Option<i32>,
    scope: Option<String>,
    metric: String,
    seed: Option<u64>,
    value: f64,
    std_err: Option<f64>,
    n: Option<usize>,
}

/// Per-epoch mean of one loss component of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub model: String,
    pub holdout: Option<i32>,
    pub seed: u64,
    pub epoch: usize,
    pub beta: f64,
    pub component: String,
    pub value: f64,
}

impl LossRow {
    pub fn from_log(model: &str, holdout: Option<i32>, seed: u64, log: &TrainLog) -> Vec<LossRow> {
        log.epochs
            .iter()
            .flat_map(|e| {
                e.components.iter().map(move |(c, v)| LossRow {
                    model: model.to_string(),
                    holdout,
                    seed,
                    epoch: e.epoch,
                    beta: e.beta,
                    component: c.clone(),
                    value: *v,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub x: f64,
    pub y: f64,
    pub class: i32,
    pub domain: i32,
}

/// CSV with a leading `# ` line holding the JSON reproducibility stamp.
pub fn write_stamped_csv<T: Serialize>(
    path: &Path,
    stamp: &Value,
    rows: &[T],
) -> Result<(), ExperimentError> {
    let file = std::fs::File::create(path).map_err(|source| ExperimentError::io(path, source))?;
    let mut file = std::io::BufWriter::new(file);
    writeln!(
        file,
        "# {}",
        serde_json::to_string(stamp).expect("stamp serializes")
    )
    .map_err(|s| ExperimentError::io(path, s))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|s| ExperimentError::io(path, s))
}

/// Reads a file written by [`write_stamped_csv`]: the stamp and the rows.
pub fn read_stamped_csv<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<(Value, Vec<T>), ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::io(path, source))?;
    let bad = |detail: String| ExperimentError::Csv {
        path: path.to_path_buf(),
        detail,
    };
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| bad("missing stamp line".into()))?;
    let stamp = first
        .strip_prefix("# ")
        .ok_or_else(|| bad("missing stamp line".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| bad(e.to_string())))?;
    let rows = csv::Reader::from_reader(rest.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Ok((stamp, rows))
}
