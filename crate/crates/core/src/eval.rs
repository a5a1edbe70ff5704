//! Confusion matrices, OLS with interaction terms, backward elimination,
//! MAD outlier filtering and convergence summaries over session traces.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::simuser::Trace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records")]
    Empty,
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("column {name} has {got} values, expected {expected}")]
    ColumnLength { name: String, got: usize, expected: usize },
    #[error("non-finite value in regression input")]
    NonFinite,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Real,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub predicted: usize,
    pub actual: usize,
    pub subject_id: u32,
    pub group: Group,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ClassificationRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Rows are actual classes, columns predicted.
pub fn confusion_matrix(records: &[ClassificationRecord], classes: usize) -> Result<Vec<Vec<usize>>> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut m = vec![vec![0; classes]; classes];
    for r in records {
        for index in [r.actual, r.predicted] {
            if index >= classes {
                return Err(EvalError::ClassIndex { index, classes });
            }
        }
        m[r.actual][r.predicted] += 1;
    }
    Ok(m)
}

/// Diagonal over row sum; `None` for classes that never occur as actual.
pub fn per_class_accuracy(matrix: &[Vec<usize>]) -> Vec<Option<f64>> {
    matrix
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect()
}

pub fn matrix_csv(matrix: &[Vec<usize>], names: &[String]) -> String {
    let mut out = String::from("actual");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for (n, row) in names.iter().zip(matrix) {
        out.push_str(n);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub name: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub terms: Vec<TermEstimate>,
    /// Uncentered when the model has no intercept.
    pub r_squared: f64,
    pub f_statistic: f64,
    pub f_p_value: f64,
    pub df_residual: usize,
    pub residuals: Vec<f64>,
}

impl RegressionResult {
    pub fn term(&self, name: &str) -> Option<&TermEstimate> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }
}

/// Two-sided p-value of a t statistic.
pub fn t_p_value(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Upper tail of the F distribution.
pub fn f_p_value(f: f64, df1: f64, df2: f64) -> f64 {
    if !f.is_finite() {
        return 0.0;
    }
    if f <= 0.0 {
        return 1.0;
    }
    beta_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)).clamp(0.0, 1.0)
}

/// Named design columns plus a response.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub columns: Vec<(String, Vec<f64>)>,
    pub response: Vec<f64>,
    pub intercept: bool,
}

pub const INTERCEPT: &str = "intercept";

impl Design {
    pub fn new(columns: Vec<(String, Vec<f64>)>, response: Vec<f64>, intercept: bool) -> Result<Self> {
        let n = response.len();
        for (name, c) in &columns {
            if c.len() != n {
                return Err(EvalError::ColumnLength { name: name.clone(), got: c.len(), expected: n });
            }
        }
        if columns.iter().flat_map(|(_, c)| c).chain(&response).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(Self { columns, response, intercept })
    }

    pub fn rows(&self) -> usize {
        self.response.len()
    }

    fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.intercept.then(|| INTERCEPT.to_string()).into_iter().collect();
        names.extend(self.columns.iter().map(|(n, _)| n.clone()));
        names
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.rows();
        let mut cols: Vec<&[f64]> = self.columns.iter().map(|(_, c)| c.as_slice()).collect();
        let ones = vec![1.0; n];
        if self.intercept {
            cols.insert(0, &ones);
        }
        DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r])
    }

    fn without(&self, name: &str) -> Self {
        Self {
            columns: self.columns.iter().filter(|(n, _)| n != name).cloned().collect(),
            response: self.response.clone(),
            intercept: self.intercept,
        }
    }

    pub fn fit(&self) -> Result<RegressionResult> {
        let x = self.matrix();
        let (n, p) = x.shape();
        if n <= p {
            return Err(EvalError::TooFewRows { needed: p + 1, got: n });
        }
        let y = DVector::from_column_slice(&self.response);
        let xtx = x.transpose() * &x;
        let sv = xtx.clone().singular_values();
        let max_sv = sv.max();
        if !(max_sv > 0.0) || sv.min() <= max_sv * 1e-12 {
            return Err(EvalError::RankDeficient);
        }
        let inv = xtx.cholesky().ok_or(EvalError::RankDeficient)?.inverse();
        let beta = &inv * (x.transpose() * &y);
        let resid = &y - &x * &beta;
        let sse = resid.norm_squared();
        let df = n - p;
        // Exact fits leave round-off residuals; floor the variance there so
        // zero coefficients do not get spurious significance.
        let floor = (1e-10 * y.norm()).powi(2) / n as f64;
        let sigma2 = (sse / df as f64).max(floor);
        let names = self.names();
        let terms = (0..p)
            .map(|j| {
                let se = (sigma2 * inv[(j, j)]).sqrt();
                let t = beta[j] / se;
                TermEstimate { name: names[j].clone(), coefficient: beta[j], std_error: se, t, p: t_p_value(t, df as f64) }
            })
            .collect();
        let (sst, df_model) = if self.intercept {
            let mean = y.mean();
            (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>(), p - 1)
        } else {
            (y.norm_squared(), p)
        };
        let r_squared = if sst > 0.0 { (1.0 - sse / sst).clamp(0.0, 1.0) } else { 1.0 };
        let (f_statistic, f_p) = if df_model == 0 {
            (f64::NAN, 1.0)
        } else {
            let f = ((sst - sse) / df_model as f64) / sigma2;
            (f, f_p_value(f, df_model as f64, df as f64))
        };
        Ok(RegressionResult { terms, r_squared, f_statistic, f_p_value: f_p, df_residual: df, residuals: resid.iter().copied().collect() })
    }
}

/// One subject-and-class observation: class `c`, subject-level factor `i`,
/// accuracy on real and on generated stimuli.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub c: f64,
    pub i: f64,
    pub acc_r: f64,
    pub acc_g: f64,
}

pub const INTERACTION_TERMS: [&str; 6] = ["c", "i", "acc_r", "c:i", "c:acc_r", "i:acc_r"];

/// `acc_g ~ c + i + acc_r + c:i + c:acc_r + i:acc_r`.
pub fn interaction_design(rows: &[RegressionRow], intercept: bool) -> Result<Design> {
    let needed = INTERACTION_TERMS.len() + 1 + usize::from(intercept);
    if rows.len() < needed {
        return Err(EvalError::TooFewRows { needed, got: rows.len() });
    }
    let col = |f: fn(&RegressionRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let columns = vec![
        col(|r| r.c),
        col(|r| r.i),
        col(|r| r.acc_r),
        col(|r| r.c * r.i),
        col(|r| r.c * r.acc_r),
        col(|r| r.i * r.acc_r),
    ];
    let named = INTERACTION_TERMS.iter().map(|s| s.to_string()).zip(columns).collect();
    Design::new(named, col(|r| r.acc_g), intercept)
}

pub fn ols_interactions(rows: &[RegressionRow], intercept: bool) -> Result<RegressionResult> {
    interaction_design(rows, intercept)?.fit()
}

/// Drops the highest-p term at or above `threshold` and refits until every
/// remaining term is significant or one term is left. The intercept is
/// never dropped.
pub fn stepwise_backward(design: &Design, threshold: f64) -> Result<RegressionResult> {
    let mut design = design.clone();
    loop {
        let fit = design.fit()?;
        if design.columns.len() <= 1 {
            return Ok(fit);
        }
        let worst = fit
            .terms
            .iter()
            .filter(|t| t.name != INTERCEPT)
            .max_by(|a, b| a.p.total_cmp(&b.p))
            .expect("at least two terms");
        if worst.p < threshold {
            return Ok(fit);
        }
        design = design.without(&worst.name.clone());
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub const MAD_SCALE: f64 = 1.4826;

/// Indices of values within `k` scaled MADs of the median.
pub fn outlier_filter(values: &[f64], k: f64) -> Result<Vec<usize>> {
    if values.len() < 3 {
        return Err(EvalError::TooFewRows { needed: 3, got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let med = median(&sorted(values.iter().copied()));
    let mad = median(&sorted(values.iter().map(|v| (v - med).abs())));
    let limit = k * MAD_SCALE * mad;
    Ok((0..values.len()).filter(|&i| (values[i] - med).abs() <= limit).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub sessions: usize,
    pub median_reduction: f64,
    pub min_reduction: f64,
    pub max_reduction: f64,
    pub median_initial: f64,
    pub median_final: f64,
    /// Sessions whose distance sequence never increased.
    pub monotone_sessions: usize,
    pub init_exhausted: usize,
    /// Mean distance per iteration, carrying each session's last value forward.
    pub mean_curve: Vec<f64>,
}

pub fn convergence_summary(traces: &[Trace]) -> Result<ConvergenceSummary> {
    if traces.is_empty() {
        return Err(EvalError::Empty);
    }
    let reductions = sorted(traces.iter().map(|t| t.summary.reduction()));
    let curves: Vec<Vec<f64>> = traces.iter().map(Trace::distances).collect();
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    let mean_curve = (0..len)
        .map(|k| curves.iter().map(|c| c[k.min(c.len() - 1)]).sum::<f64>() / curves.len() as f64)
        .collect();
    Ok(ConvergenceSummary {
        sessions: traces.len(),
        median_reduction: median(&reductions),
        min_reduction: reductions[0],
        max_reduction: reductions[reductions.len() - 1],
        median_initial: median(&sorted(traces.iter().map(|t| t.summary.initial_distance))),
        median_final: median(&sorted(traces.iter().map(|t| t.summary.final_distance))),
        monotone_sessions: curves.iter().filter(|c| c.windows(2).all(|w| w[1] <= w[0])).count(),
        init_exhausted: traces.iter().filter(|t| t.summary.init_exhausted).count(),
        mean_curve,
    })
}

pub fn format_regression(title: &str, r: &RegressionResult) -> String {
    let mut out = format!("{title}\n{:<10} {:>12} {:>12} {:>9} {:>9}\n", "term", "coef", "std.err", "t", "p");
    for t in &r.terms {
        let _ = writeln!(out, "{:<10} {:>12.6} {:>12.6} {:>9.3} {:>9.4}", t.name, t.coefficient, t.std_error, t.t, t.p);
    }
    let _ = writeln!(out, "R^2 {:.4}  F {:.3} (p {:.4}), residual df {}", r.r_squared, r.f_statistic, r.f_p_value, r.df_residual);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(actual: usize, predicted: usize) -> ClassificationRecord {
        ClassificationRecord { predicted, actual, subject_id: 0, group: Group::Real }
    }

    #[test]
    fn confusion_basics() {
        let m = confusion_matrix(&[rec(0, 0), rec(1, 1), rec(2, 2)], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert!(per_class_accuracy(&m).iter().all(|a| *a == Some(1.0)));
        let m = confusion_matrix(&[rec(2, 0)], 3).unwrap();
        assert_eq!(m[2][0], 1);
        assert_eq!(m.iter().flatten().sum::<usize>(), 1);
        assert!(matches!(confusion_matrix(&[], 3), Err(EvalError::Empty)));
        assert!(matches!(confusion_matrix(&[rec(3, 0)], 3), Err(EvalError::ClassIndex { .. })));
    }

    #[test]
    fn t_and_f_tails() {
        assert!((t_p_value(0.0, 10.0) - 1.0).abs() < 1e-12);
        // t(10) two-sided 5% critical value
        assert!((t_p_value(2.228_138_85, 10.0) - 0.05).abs() < 1e-6);
        // F(3, 20) upper 5% critical value
        assert!((f_p_value(3.098_391_2, 3.0, 20.0) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn exact_fit_and_single_term() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let d = Design::new(vec![("x".into(), x)], y, false).unwrap();
        let r = stepwise_backward(&d, 0.05).unwrap();
        assert_eq!(r.names(), vec!["x"]);
        assert!((r.terms[0].coefficient - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_detected() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let d = Design::new(vec![("a".into(), x.clone()), ("b".into(), x.iter().map(|v| 2.0 * v).collect())], x, false).unwrap();
        assert!(matches!(d.fit(), Err(EvalError::RankDeficient)));
    }

    #[test]
    fn mad_filter() {
        assert_eq!(outlier_filter(&[1.0, 1.0, 1.0, 100.0], 2.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(outlier_filter(&[1.0, 2.0, 3.0, 4.0, 5.0], 2.0).unwrap().len(), 5);
        assert_eq!(outlier_filter(&[2.0, 2.0, 2.0], 2.0).unwrap(), vec![0, 1, 2]);
        assert!(outlier_filter(&[1.0, 2.0], 2.0).is_err());
    }
}
