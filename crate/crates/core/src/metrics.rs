//! Continual-learning metrics over lower-triangular accuracy matrices.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `a[t][i]`: accuracy on task `i`'s test split after training task `t`,
/// defined for `i <= t`. Entries are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(n_tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(n_tasks);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the evaluations after the next task; the row must hold one
    /// entry per task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.n_tasks {
            return Err(Error::Invalid(format!("matrix already has {} rows", self.n_tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::dim("accuracy row", t + 1, row.len()));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Invalid(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n_tasks
    }

    fn final_row(&self) -> Result<&[f64]> {
        if !self.is_complete() || self.n_tasks == 0 {
            return Err(Error::Invalid(format!(
                "matrix has {} of {} rows",
                self.rows.len(),
                self.n_tasks
            )));
        }
        Ok(&self.rows[self.n_tasks - 1])
    }

    /// Mean of each row: accuracy over the tasks seen after every session.
    pub fn session_means(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    /// Delimited text with an `after_task` column and one column per task;
    /// undefined cells are left empty.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("after_task");
        for i in 0..self.n_tasks {
            out.push_str(&format!(",task_{}", i + 1));
        }
        out.push('\n');
        for (t, r) in self.rows.iter().enumerate() {
            out.push_str(&(t + 1).to_string());
            for i in 0..self.n_tasks {
                out.push(',');
                if let Some(a) = r.get(i) {
                    out.push_str(&format!("{a:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let n_tasks = reader.headers()?.len().saturating_sub(1);
        let mut m = Self::new(n_tasks);
        for rec in reader.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Invalid(format!("accuracy cell {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Final-row mean: `(1/N) Σ_i a[N][i]`.
pub fn avg_acc(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `(1/(N−1)) Σ_{i<N} (max_{i ≤ t < N} a[t][i] − a[N][i])`.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.n_tasks();
    if n < 2 {
        return Err(Error::Invalid(format!("forgetting needs at least 2 tasks, got {n}")));
    }
    let last = m.final_row()?;
    let total: f64 = (0..n - 1)
        .map(|i| {
            let best = (i..n - 1)
                .map(|t| m.rows[t][i])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .sum();
    Ok(total / (n - 1) as f64)
}

/// `2SO/(S+O)`, zero when both are zero. Inputs share one scale.
pub fn harmonic_mean(state_acc: f64, object_acc: f64) -> Result<f64> {
    if state_acc < 0.0 || object_acc < 0.0 || !state_acc.is_finite() || !object_acc.is_finite() {
        return Err(Error::Invalid(format!(
            "harmonic mean of {state_acc} and {object_acc}"
        )));
    }
    let sum = state_acc + object_acc;
    Ok(if sum == 0.0 {
        0.0
    } else {
        2.0 * state_acc * object_acc / sum
    })
}

/// Mean and sample standard deviation; the deviation is zero for a single
/// value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_row_mean() {
        let m = AccuracyMatrix::from_rows(2, vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
        assert!((avg_acc(&m).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn two_task_forgetting() {
        let m = AccuracyMatrix::from_rows(2, vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
        assert!((forgetting(&m).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn backward_transfer_is_negative() {
        let m = AccuracyMatrix::from_rows(3, vec![vec![0.5], vec![0.6, 0.5], vec![0.7, 0.6, 0.9]]).unwrap();
        assert!(forgetting(&m).unwrap() <= 0.0);
    }

    #[test]
    fn incomplete_or_single_rejected() {
        let m = AccuracyMatrix::from_rows(2, vec![vec![0.9]]).unwrap();
        assert!(avg_acc(&m).is_err());
        let one = AccuracyMatrix::from_rows(1, vec![vec![0.9]]).unwrap();
        assert!(forgetting(&one).is_err());
        assert!(AccuracyMatrix::from_rows(2, vec![vec![0.9, 0.1]]).is_err());
        assert!(AccuracyMatrix::from_rows(1, vec![vec![1.5]]).is_err());
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(91.81, 96.67).unwrap() - 94.18).abs() < 0.01);
        assert!((harmonic_mean(50.0, 100.0).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(37.5, 37.5).unwrap(), 37.5);
        assert!(harmonic_mean(-1.0, 2.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = AccuracyMatrix::from_rows(3, vec![vec![0.5], vec![0.25, 0.75], vec![0.125, 0.5, 1.0]]).unwrap();
        let text = m.to_csv_string();
        assert!(text.starts_with("after_task,task_1,task_2,task_3\n1,0.500000,,\n"));
        assert_eq!(AccuracyMatrix::from_csv_str(&text).unwrap(), m);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
