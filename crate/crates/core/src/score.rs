//! SUPERB-style aggregate score over a table of task metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[serde(alias = "higher")]
    HigherBetter,
    #[serde(alias = "lower")]
    LowerBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetric {
    pub u: f64,
    pub sota: f64,
    pub fbank: f64,
    pub direction: Direction,
}

pub type MetricTable = BTreeMap<String, TaskMetric>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub score: f64,
    pub per_task: BTreeMap<String, f64>,
}

/// `1000·(u − fbank)/(sota − fbank)` per task, averaged. The same formula
/// covers lower-is-better metrics: the slope turns negative and SOTA still
/// maps to 1000. The direction flag is only checked against the ordering of
/// `sota` and `fbank`.
pub fn task_score(name: &str, m: &TaskMetric) -> Result<f64> {
    if ![m.u, m.sota, m.fbank].iter().all(|v| v.is_finite()) {
        return Err(Error::Score(format!("{name}: non-finite metric")));
    }
    if m.sota == m.fbank {
        return Err(Error::Score(format!("{name}: sota equals fbank ({})", m.sota)));
    }
    let sota_better = match m.direction {
        Direction::HigherBetter => m.sota > m.fbank,
        Direction::LowerBetter => m.sota < m.fbank,
    };
    if !sota_better {
        return Err(Error::Score(format!("{name}: sota {} is not better than fbank {} for {:?}", m.sota, m.fbank, m.direction)));
    }
    Ok(1000.0 * ((m.u - m.fbank) / (m.sota - m.fbank)))
}

pub fn superb_score(table: &MetricTable) -> Result<ScoreReport> {
    if table.is_empty() {
        return Err(Error::Score("empty metric table".into()));
    }
    let mut per_task = BTreeMap::new();
    for (name, m) in table {
        per_task.insert(name.clone(), task_score(name, m)?);
    }
    let score = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(ScoreReport { score, per_task })
}

pub fn parse_table(json: &str) -> Result<MetricTable> {
    Ok(serde_json::from_str(json)?)
}
