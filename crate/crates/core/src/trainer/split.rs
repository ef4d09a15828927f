//! Cross-project and temporal train/validation/test partitioning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repo_miner::CommitRecord;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("repository `{0}` has commits but is listed in no partition")]
    UnlistedRepo(String),
    #[error("repository `{0}` is listed in more than one partition")]
    OverlappingRepo(String),
    #[error("train fraction must lie in (0, 1]")]
    InvalidFraction,
    #[error("no VF commits before the test boundary to place the train/val cut")]
    NoVulnerabilityFixes,
    #[error("the train/val cut leaves no VF commit in train (ties at the boundary timestamp)")]
    EmptyTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy")]
pub enum SplitSpec {
    /// Explicit repository lists; no repository may appear twice.
    CrossProject {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
    /// Chronological: the first `train_fraction` of VF commits (by time)
    /// train, the remaining VF commits validate, and everything at or after
    /// `test_start` is test.
    Temporal {
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        test_start: Option<i64>,
    },
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<CommitRecord>,
    pub val: Vec<CommitRecord>,
    pub test: Vec<CommitRecord>,
}

impl Splits {
    pub fn get(&self, p: Partition) -> &[CommitRecord] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    fn push(&mut self, p: Partition, r: CommitRecord) {
        match p {
            Partition::Train => self.train.push(r),
            Partition::Val => self.val.push(r),
            Partition::Test => self.test.push(r),
        }
    }
}

/// Timestamp boundaries of a temporal split. Train is `ts <= train_until`,
/// val is `train_until < ts < test_start`, test is `ts >= test_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalCut {
    pub train_until: i64,
    pub test_start: Option<i64>,
}

impl TemporalCut {
    pub fn partition(&self, ts: i64) -> Partition {
        if self.test_start.is_some_and(|t| ts >= t) {
            Partition::Test
        } else if ts <= self.train_until {
            Partition::Train
        } else {
            Partition::Val
        }
    }
}

/// Place the train/val cut after `round(train_fraction × #VF)` VF commits.
/// When the cut falls inside a run of equal timestamps it moves earlier so
/// that the whole run goes to validation.
pub fn temporal_cut(
    records: &[CommitRecord],
    train_fraction: f64,
    test_start: Option<i64>,
) -> Result<TemporalCut, SplitError> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(SplitError::InvalidFraction);
    }
    let mut vf: Vec<i64> = records
        .iter()
        .filter(|r| r.label.is_vf() && test_start.is_none_or(|t| r.timestamp < t))
        .map(|r| r.timestamp)
        .collect();
    if vf.is_empty() {
        return Err(SplitError::NoVulnerabilityFixes);
    }
    vf.sort_unstable();
    let mut n = ((train_fraction * vf.len() as f64).round() as usize).clamp(1, vf.len());
    while n < vf.len() && vf[n] == vf[n - 1] {
        n -= 1;
        if n == 0 {
            return Err(SplitError::EmptyTrain);
        }
    }
    Ok(TemporalCut {
        train_until: vf[n - 1],
        test_start,
    })
}

/// Partition labelled records. Output partitions keep input order.
pub fn split_dataset(records: Vec<CommitRecord>, spec: &SplitSpec) -> Result<Splits, SplitError> {
    let mut out = Splits::default();
    match spec {
        SplitSpec::CrossProject { train, val, test } => {
            let mut owner: BTreeMap<&str, Partition> = BTreeMap::new();
            for (p, repos) in [(Partition::Train, train), (Partition::Val, val), (Partition::Test, test)] {
                for repo in repos {
                    if owner.insert(repo, p).is_some_and(|prev| prev != p) {
                        return Err(SplitError::OverlappingRepo(repo.clone()));
                    }
                }
            }
            if let Some(r) = records.iter().find(|r| !owner.contains_key(r.repo_id.as_str())) {
                return Err(SplitError::UnlistedRepo(r.repo_id.clone()));
            }
            for r in records {
                let p = owner[r.repo_id.as_str()];
                out.push(p, r);
            }
        }
        SplitSpec::Temporal {
            train_fraction,
            test_start,
        } => {
            let cut = temporal_cut(&records, *train_fraction, *test_start)?;
            for r in records {
                out.push(cut.partition(r.timestamp), r);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repo_miner::Label;

    fn rec(repo: &str, ts: i64, label: Label) -> CommitRecord {
        CommitRecord {
            repo_id: repo.into(),
            commit_hash: format!("{ts:040x}"),
            timestamp: ts,
            label,
            files: Vec::new(),
        }
    }

    fn temporal(f: f64, t: Option<i64>) -> SplitSpec {
        SplitSpec::Temporal {
            train_fraction: f,
            test_start: t,
        }
    }

    #[test]
    fn ninety_percent_of_ten() {
        let records: Vec<_> = (1..=10).map(|t| rec("a", t, Label::Vf)).collect();
        let s = split_dataset(records, &temporal(0.9, None)).unwrap();
        assert_eq!(s.train.iter().map(|r| r.timestamp).collect::<Vec<_>>(), (1..=9).collect::<Vec<_>>());
        assert_eq!(s.val.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![10]);
        assert!(s.test.is_empty());
    }

    #[test]
    fn nvf_between_train_and_val_goes_to_val() {
        let mut records: Vec<_> = (1..=10).map(|t| rec("a", t * 10, Label::Vf)).collect();
        records.push(rec("a", 95, Label::Nvf));
        records.push(rec("a", 90, Label::Nvf));
        records.push(rec("a", 500, Label::Nvf));
        let s = split_dataset(records, &temporal(0.9, Some(200))).unwrap();
        assert!(s.val.iter().any(|r| r.timestamp == 95));
        assert!(s.train.iter().any(|r| r.timestamp == 90));
        assert_eq!(s.test.len(), 1);
    }

    #[test]
    fn tied_boundary_moves_cut_earlier() {
        let records: Vec<_> = [1, 2, 3, 3].iter().map(|&t| rec("a", t, Label::Vf)).collect();
        let cut = temporal_cut(&records, 0.75, None).unwrap();
        assert_eq!(cut.train_until, 2);
        let all_tied: Vec<_> = [5, 5].iter().map(|&t| rec("a", t, Label::Vf)).collect();
        assert_eq!(temporal_cut(&all_tied, 0.5, None), Err(SplitError::EmptyTrain));
    }

    #[test]
    fn temporal_errors() {
        assert_eq!(
            split_dataset(vec![rec("a", 1, Label::Nvf)], &temporal(0.9, None)),
            Err(SplitError::NoVulnerabilityFixes)
        );
        assert_eq!(split_dataset(Vec::new(), &temporal(0.0, None)), Err(SplitError::InvalidFraction));
    }

    #[test]
    fn cross_project_lists() {
        let spec = SplitSpec::CrossProject {
            train: vec!["A".into(), "B".into()],
            val: vec!["C".into()],
            test: vec!["D".into()],
        };
        let records = vec![rec("A", 1, Label::Vf), rec("C", 2, Label::Nvf), rec("D", 3, Label::Vf), rec("B", 4, Label::Nvf)];
        let s = split_dataset(records.clone(), &spec).unwrap();
        assert_eq!(s.train.len(), 2);
        assert_eq!(s.val[0].repo_id, "C");
        assert_eq!(s.test[0].repo_id, "D");

        let mut extra = records;
        extra.push(rec("E", 5, Label::Nvf));
        assert_eq!(split_dataset(extra, &spec), Err(SplitError::UnlistedRepo("E".into())));

        let overlap = SplitSpec::CrossProject {
            train: vec!["A".into()],
            val: vec!["A".into()],
            test: vec![],
        };
        assert_eq!(split_dataset(Vec::new(), &overlap), Err(SplitError::OverlappingRepo("A".into())));
    }

    #[test]
    fn spec_json_shape() {
        let s: SplitSpec = serde_json::from_str(r#"{"strategy":"Temporal"}"#).unwrap();
        assert_eq!(s, temporal(0.9, None));
        let s: SplitSpec =
            serde_json::from_str(r#"{"strategy":"CrossProject","train":["a"],"val":[],"test":["b"]}"#).unwrap();
        assert!(matches!(s, SplitSpec::CrossProject { .. }));
    }
}
