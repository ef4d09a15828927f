//! Classification metrics, effort-aware CostEffort@L, change-size buckets
//! and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::CommitPrediction;
use crate::repo_miner::Label;

pub const DEFAULT_L_VALUES: [f64; 2] = [5.0, 20.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no label for predicted commit {repo_id}/{commit_hash}")]
    MissingLabel { repo_id: String, commit_hash: String },
    #[error("CostEffort is undefined without any actual VF commit")]
    NoVulnerabilityFixes,
    #[error("L must lie in (0, 100], got {0}")]
    InvalidL(f64),
}

/// Ground truth keyed by `(repo_id, commit_hash)`.
pub type CommitLabels = BTreeMap<(String, String), Label>;

fn label_of(p: &CommitPrediction, labels: &CommitLabels) -> Result<Label, EvalError> {
    labels
        .get(&(p.repo_id.clone(), p.commit_hash.clone()))
        .copied()
        .ok_or_else(|| EvalError::MissingLabel {
            repo_id: p.repo_id.clone(),
            commit_hash: p.commit_hash.clone(),
        })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    fn add(&mut self, predicted: Label, actual: Label) {
        match (predicted.is_vf(), actual.is_vf()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(self) -> ClassificationMetrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassificationMetrics {
            f1,
            precision,
            recall,
            counts: self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

/// Binary metrics on the VF class; 0/0 is taken as 0.
pub fn classification_metrics(
    preds: &[CommitPrediction],
    labels: &CommitLabels,
) -> Result<ClassificationMetrics, EvalError> {
    let mut counts = Counts::default();
    for p in preds {
        counts.add(p.predicted, label_of(p, labels)?);
    }
    Ok(counts.metrics())
}

/// Inspection order: probability descending, then smaller change first,
/// then `(repo_id, commit_hash)`.
pub fn effort_ranking(preds: &[CommitPrediction]) -> Vec<&CommitPrediction> {
    let mut ranked: Vec<_> = preds.iter().collect();
    ranked.sort_by(|a, b| {
        b.commit_prob
            .total_cmp(&a.commit_prob)
            .then(a.commit_loc.cmp(&b.commit_loc))
            .then_with(|| (&a.repo_id, &a.commit_hash).cmp(&(&b.repo_id, &b.commit_hash)))
    });
    ranked
}

/// Fraction of actual VF commits found when inspecting the ranking until
/// the next commit would push cumulative LOC past `ceil(L% × total LOC)`.
pub fn cost_effort(preds: &[CommitPrediction], labels: &CommitLabels, l_percent: f64) -> Result<f64, EvalError> {
    if !(l_percent > 0.0 && l_percent <= 100.0) {
        return Err(EvalError::InvalidL(l_percent));
    }
    let actual: Vec<Label> = preds.iter().map(|p| label_of(p, labels)).collect::<Result<_, _>>()?;
    let total_vf = actual.iter().filter(|l| l.is_vf()).count();
    if total_vf == 0 {
        return Err(EvalError::NoVulnerabilityFixes);
    }
    let total_loc: usize = preds.iter().map(|p| p.commit_loc).sum();
    let budget = (l_percent * total_loc as f64 / 100.0).ceil() as usize;
    let mut spent = 0;
    let mut found = 0;
    for p in effort_ranking(preds) {
        if spent + p.commit_loc > budget {
            break;
        }
        spent += p.commit_loc;
        if label_of(p, labels)?.is_vf() {
            found += 1;
        }
    }
    Ok(found as f64 / total_vf as f64)
}

/// Change-size buckets `(1,20], (20,40], …, (100,∞)`; sizes 0 and 1 join
/// the first bucket.
pub const BUCKET_UPPER: [Option<usize>; 6] = [Some(20), Some(40), Some(60), Some(80), Some(100), None];

pub fn bucket_index(loc: usize) -> usize {
    BUCKET_UPPER
        .iter()
        .position(|u| u.is_none_or(|u| loc <= u))
        .expect("last bucket is unbounded")
}

pub fn bucket_name(i: usize) -> String {
    let lower = if i == 0 { 1 } else { BUCKET_UPPER[i - 1].expect("bounded") };
    match BUCKET_UPPER[i] {
        Some(u) => format!("({lower},{u}]"),
        None => format!("({lower},inf)"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub range: String,
    /// Absent for an empty bucket.
    pub f1: Option<f64>,
    pub count: usize,
    pub proportion: f64,
}

pub fn bucketed_f1(preds: &[CommitPrediction], labels: &CommitLabels) -> Result<Vec<BucketResult>, EvalError> {
    let mut counts = [Counts::default(); 6];
    for p in preds {
        counts[bucket_index(p.commit_loc)].add(p.predicted, label_of(p, labels)?);
    }
    let total = preds.len();
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, c)| BucketResult {
            range: bucket_name(i),
            f1: (c.total() > 0).then(|| c.metrics().f1),
            count: c.total(),
            proportion: if total == 0 { 0.0 } else { c.total() as f64 / total as f64 },
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEffortAt {
    pub l: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
    pub cost_effort: Vec<CostEffortAt>,
    pub buckets: Vec<BucketResult>,
}

pub fn evaluate(
    method: impl Into<String>,
    preds: &[CommitPrediction],
    labels: &CommitLabels,
    l_values: &[f64],
) -> Result<EvalReport, EvalError> {
    let m = classification_metrics(preds, labels)?;
    let cost_effort = l_values
        .iter()
        .map(|&l| cost_effort(preds, labels, l).map(|value| CostEffortAt { l, value }))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        method: method.into(),
        f1: m.f1,
        precision: m.precision,
        recall: m.recall,
        counts: m.counts,
        cost_effort,
        buckets: bucketed_f1(preds, labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Text,
    Json,
}

fn table(reports: &[EvalReport], first_column: &str) -> Vec<Vec<String>> {
    let mut header = vec![first_column.to_string(), "F1".into(), "Precision".into(), "Recall".into()];
    if let Some(r) = reports.first() {
        header.extend(r.cost_effort.iter().map(|c| format!("CostEffort@{}", c.l)));
    }
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.method.clone(), format!("{:.3}", r.f1), format!("{:.3}", r.precision), format!("{:.3}", r.recall)];
        row.extend(r.cost_effort.iter().map(|c| format!("{:.3}", c.value)));
        rows.push(row);
    }
    rows
}

/// One row per report, in the order given. `first_column` names the row
/// key, e.g. `Method` or `Window size`.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat, first_column: &str) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports).expect("report serializes") + "\n",
        ReportFormat::Csv => table(reports, first_column)
            .iter()
            .map(|row| row.join(",") + "\n")
            .collect(),
        ReportFormat::Text => {
            let rows = table(reports, first_column);
            let widths: Vec<usize> = (0..rows[0].len())
                .map(|c| rows.iter().map(|r| r.get(c).map_or(0, String::len)).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            for row in &rows {
                let cells: Vec<String> = row
                    .iter()
                    .enumerate()
                    .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                    .collect();
                let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            }
            out
        }
    }
}

/// Bucket table: range, commit count, proportion and F1 (`-` when empty).
pub fn emit_buckets(report: &EvalReport) -> String {
    let mut out = String::from("Range,Count,Proportion,F1\n");
    for b in &report.buckets {
        let f1 = b.f1.map_or("-".to_string(), |f| format!("{f:.3}"));
        let _ = writeln!(out, "{},{},{:.3},{}", b.range, b.count, b.proportion, f1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(hash: &str, prob: f64, loc: usize) -> CommitPrediction {
        CommitPrediction {
            repo_id: "r".into(),
            commit_hash: hash.into(),
            file_probs: vec![("f".into(), prob)],
            commit_prob: prob,
            predicted: if prob > 0.5 { Label::Vf } else { Label::Nvf },
            commit_loc: loc,
        }
    }

    fn labels(items: &[(&str, Label)]) -> CommitLabels {
        items.iter().map(|(h, l)| (("r".to_string(), h.to_string()), *l)).collect()
    }

    #[test]
    fn metric_examples() {
        let preds = [pred("a", 0.9, 1), pred("b", 0.9, 1), pred("c", 0.1, 1), pred("d", 0.1, 1)];
        let l = labels(&[("a", Label::Vf), ("b", Label::Nvf), ("c", Label::Vf), ("d", Label::Nvf)]);
        let m = classification_metrics(&preds, &l).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));

        let none = [pred("a", 0.1, 1)];
        let m = classification_metrics(&none, &labels(&[("a", Label::Vf)])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));

        assert!(matches!(
            classification_metrics(&none, &CommitLabels::new()),
            Err(EvalError::MissingLabel { .. })
        ));
    }

    #[test]
    fn cost_effort_hand_example() {
        let preds = [pred("a", 0.9, 10), pred("b", 0.8, 40), pred("c", 0.7, 30), pred("d", 0.1, 20)];
        let l = labels(&[("a", Label::Vf), ("b", Label::Nvf), ("c", Label::Vf), ("d", Label::Nvf)]);
        assert_eq!(cost_effort(&preds, &l, 50.0).unwrap(), 0.5);
        assert_eq!(cost_effort(&preds, &l, 100.0).unwrap(), 1.0);
        assert_eq!(
            cost_effort(&preds, &labels(&[("a", Label::Nvf), ("b", Label::Nvf), ("c", Label::Nvf), ("d", Label::Nvf)]), 5.0),
            Err(EvalError::NoVulnerabilityFixes)
        );
        assert_eq!(cost_effort(&preds, &l, 0.0), Err(EvalError::InvalidL(0.0)));
    }

    #[test]
    fn budget_is_exact_for_integer_percentages() {
        // 7% of 100 is 7, not 8 as a naive 0.07 × 100 would round up to.
        let preds = [pred("a", 0.9, 7), pred("b", 0.8, 93)];
        let l = labels(&[("a", Label::Vf), ("b", Label::Vf)]);
        assert_eq!(cost_effort(&preds, &l, 7.0).unwrap(), 0.5);
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(bucket_index(0), 0);
        assert_eq!(bucket_index(1), 0);
        assert_eq!(bucket_index(20), 0);
        assert_eq!(bucket_index(21), 1);
        assert_eq!(bucket_index(100), 4);
        assert_eq!(bucket_index(101), 5);
        assert_eq!(bucket_name(0), "(1,20]");
        assert_eq!(bucket_name(5), "(100,inf)");
    }

    #[test]
    fn buckets_report_absent_f1() {
        let preds = [pred("a", 0.9, 10), pred("b", 0.1, 10)];
        let l = labels(&[("a", Label::Vf), ("b", Label::Nvf)]);
        let b = bucketed_f1(&preds, &l).unwrap();
        assert_eq!(b[0].proportion, 1.0);
        assert_eq!(b[0].f1, Some(1.0));
        assert!(b[1..].iter().all(|x| x.f1.is_none() && x.count == 0));
    }

    #[test]
    fn report_shapes() {
        let preds = [pred("a", 0.9, 2), pred("b", 0.2, 38)];
        let l = labels(&[("a", Label::Vf), ("b", Label::Nvf)]);
        let r = evaluate("EmbedSubtract_Duo", &preds, &l, &DEFAULT_L_VALUES).unwrap();
        let csv = emit_report(std::slice::from_ref(&r), ReportFormat::Csv, "Method");
        assert_eq!(
            csv,
            "Method,F1,Precision,Recall,CostEffort@5,CostEffort@20\nEmbedSubtract_Duo,1.000,1.000,1.000,1.000,1.000\n"
        );
        let text = emit_report(&[r.clone(), r.clone()], ReportFormat::Text, "Method");
        assert_eq!(text.lines().count(), 3);
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
        let json: Vec<EvalReport> = serde_json::from_str(&emit_report(&[r.clone()], ReportFormat::Json, "Method")).unwrap();
        assert_eq!(json[0], r);
    }
}
