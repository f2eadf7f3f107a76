//! Accuracy matrices, sequence-level metrics and the paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{LabError, Result};

/// Column name of the held-out aggregate.
pub const HELD_OUT: &str = "held_out";

/// Row `k` holds accuracies (0–100) after stage `k`; row 0 is the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(LabError::Input(format!("row has {} cells for {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn column(&self, task: &str) -> Result<usize> {
        self.columns.iter().position(|c| c == task).ok_or_else(|| LabError::Input(format!("matrix has no column {task}")))
    }

    pub fn get(&self, stage: usize, task: &str) -> Result<f64> {
        let c = self.column(task)?;
        let v = self
            .rows
            .get(stage)
            .and_then(|r| r.get(c))
            .copied()
            .ok_or_else(|| LabError::Input(format!("missing cell (stage {stage}, {task})")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LabError::Input(format!("non-finite cell (stage {stage}, {task})")))
        }
    }

    /// Long-form CSV with header `stage,task,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,task,accuracy\n");
        for (k, row) in self.rows.iter().enumerate() {
            for (c, v) in self.columns.iter().zip(row) {
                out.push_str(&format!("{k},{c},{v}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("stage,task,accuracy") {
            return Err(LabError::Input("matrix CSV must start with header stage,task,accuracy".into()));
        }
        let mut m = AccuracyMatrix::new(Vec::new());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || LabError::Input(format!("malformed matrix CSV line {}: {line}", i + 2));
            let mut parts = line.split(',');
            let (Some(s), Some(task), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let stage: usize = s.trim().parse().map_err(|_| bad())?;
            let value: f64 = v.trim().parse().map_err(|_| bad())?;
            let col = match m.columns.iter().position(|c| c == task) {
                Some(c) => c,
                None if stage == 0 => {
                    m.columns.push(task.to_string());
                    m.columns.len() - 1
                }
                None => return Err(bad()),
            };
            while m.rows.len() <= stage {
                m.rows.push(Vec::new());
            }
            let row = &mut m.rows[stage];
            if row.len() != col {
                return Err(bad());
            }
            row.push(value);
        }
        if m.rows.iter().any(|r| r.len() != m.columns.len()) || m.rows.is_empty() {
            return Err(LabError::Input("matrix CSV has missing cells".into()));
        }
        Ok(m)
    }
}

/// The four sequence-level summaries, in percentage points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub target_learning: f64,
    pub target_forgetting: f64,
    pub target_overall: f64,
    pub held_out_forgetting: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `targets[k]` is the task trained at stage `k + 1`.
pub fn compute_metrics(matrix: &AccuracyMatrix, targets: &[String]) -> Result<SequenceMetrics> {
    let k_final = targets.len();
    if k_final == 0 {
        return Err(LabError::Input("no target tasks".into()));
    }
    if matrix.rows.len() != k_final + 1 {
        return Err(LabError::Input(format!("matrix has {} rows for {} stages", matrix.rows.len(), k_final)));
    }
    let mut learning = Vec::with_capacity(k_final);
    let mut forgetting = Vec::with_capacity(k_final);
    let mut overall = Vec::with_capacity(k_final);
    for (i, task) in targets.iter().enumerate() {
        let stage = i + 1;
        let base = matrix.get(0, task)?;
        let own = matrix.get(stage, task)?;
        let last = matrix.get(k_final, task)?;
        learning.push(own - base);
        overall.push(last - base);
        if stage < k_final {
            forgetting.push(last - own);
        }
    }
    Ok(SequenceMetrics {
        target_learning: mean(&learning),
        target_forgetting: mean(&forgetting),
        target_overall: mean(&overall),
        held_out_forgetting: matrix.get(k_final, HELD_OUT)? - matrix.get(0, HELD_OUT)?,
    })
}

/// Two-sided p-value of the paired-differences t statistic, `n − 1` degrees of freedom.
///
/// Zero-variance differences give `p = 1` when they are all zero and `p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::Input(format!(
            "paired t-test needs two equal samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if m == 0.0 { 1.0 } else { 0.0 });
    }
    let t = m / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| LabError::Internal(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

/// The paired t statistic (for reporting).
pub fn paired_t_statistic(a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.len() < 2 || a.len() != b.len() {
        return None;
    }
    let n = d.len() as f64;
    let m = mean(&d);
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Some(m / (sd / n.sqrt()))
}
