//! Commit-level prediction: the mean of the file-level probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change_builder::{build_commit_changes, ContextualChange};
use crate::delta_model::{encode_input, DeltaModel, ModelError};
use crate::repo_miner::{CommitRecord, Label};
use crate::tokenizer::Vocabulary;

/// Commits whose mean probability is strictly above this are predicted VF.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("commit {repo_id}/{commit_hash} has no file changes")]
    EmptyCommit { repo_id: String, commit_hash: String },
    #[error("{repo_id}/{commit_hash}: {source}")]
    Model {
        repo_id: String,
        commit_hash: String,
        #[source]
        source: ModelError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitPrediction {
    pub repo_id: String,
    pub commit_hash: String,
    /// Per-file probabilities, sorted by path.
    pub file_probs: Vec<(String, f64)>,
    pub commit_prob: f64,
    pub predicted: Label,
    pub commit_loc: usize,
}

impl CommitPrediction {
    pub fn key(&self) -> (&str, &str) {
        (&self.repo_id, &self.commit_hash)
    }
}

/// Add `x` to a list of non-overlapping partial sums without rounding.
fn grow(partials: &mut Vec<f64>, mut x: f64) {
    let mut kept = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[kept] = lo;
            kept += 1;
        }
        x = hi;
    }
    partials.truncate(kept);
    partials.push(x);
}

fn total(partials: &[f64]) -> f64 {
    partials.iter().rev().fold(0.0, |acc, p| acc + p)
}

/// Mean of `n` values within one ulp of the exact result: the sum is kept
/// exact, and the residual of the first quotient is folded back in.
fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    let mut partials = Vec::new();
    values.for_each(|v| grow(&mut partials, v));
    let n = n as f64;
    let q = total(&partials) / n;
    let p = q * n;
    grow(&mut partials, -p);
    grow(&mut partials, -q.mul_add(n, -p));
    q + total(&partials) / n
}

/// Average file probabilities into a commit prediction.
///
/// Files are summed in sorted-path order so the result does not depend on
/// the order they arrive in.
pub fn aggregate(
    repo_id: &str,
    commit_hash: &str,
    mut file_probs: Vec<(String, f64)>,
    commit_loc: usize,
) -> Result<CommitPrediction, InferenceError> {
    if file_probs.is_empty() {
        return Err(InferenceError::EmptyCommit {
            repo_id: repo_id.to_string(),
            commit_hash: commit_hash.to_string(),
        });
    }
    file_probs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let commit_prob = mean(file_probs.iter().map(|(_, p)| *p), file_probs.len());
    Ok(CommitPrediction {
        repo_id: repo_id.to_string(),
        commit_hash: commit_hash.to_string(),
        file_probs,
        commit_prob,
        predicted: if commit_prob > THRESHOLD { Label::Vf } else { Label::Nvf },
        commit_loc,
    })
}

fn predict_built(
    repo_id: &str,
    commit_hash: &str,
    changes: &[&ContextualChange],
    model: &DeltaModel<f32>,
    vocab: &Vocabulary,
) -> Result<CommitPrediction, InferenceError> {
    let wrap = |source: ModelError| InferenceError::Model {
        repo_id: repo_id.to_string(),
        commit_hash: commit_hash.to_string(),
        source,
    };
    let max_len = model.config.encoder.max_len;
    let mut probs = Vec::with_capacity(changes.len());
    let mut loc = 0;
    for cc in changes {
        let input = encode_input(cc, model.variant(), vocab, max_len).map_err(|e| wrap(e.into()))?;
        probs.push((cc.path.clone(), model.predict_file(&input).map_err(wrap)?));
        loc += cc.loc();
    }
    aggregate(repo_id, commit_hash, probs, loc)
}

/// Build every file at context `k`, score it with `model` and average.
pub fn predict_commit(
    commit: &CommitRecord,
    model: &DeltaModel<f32>,
    vocab: &Vocabulary,
    k: usize,
) -> Result<CommitPrediction, InferenceError> {
    let changes = build_commit_changes(commit, k);
    let refs: Vec<_> = changes.iter().collect();
    predict_built(&commit.repo_id, &commit.commit_hash, &refs, model, vocab)
}

/// One prediction per commit, in input order.
pub fn predict_corpus(
    commits: &[CommitRecord],
    model: &DeltaModel<f32>,
    vocab: &Vocabulary,
    k: usize,
) -> Result<Vec<CommitPrediction>, InferenceError> {
    crate::par::map(commits, |c| predict_commit(c, model, vocab, k))
        .into_iter()
        .collect()
}

/// Group already-built file changes by commit (first-appearance order) and
/// predict each commit.
pub fn predict_changes(
    changes: &[ContextualChange],
    model: &DeltaModel<f32>,
    vocab: &Vocabulary,
) -> Result<Vec<CommitPrediction>, InferenceError> {
    let groups = group_by_commit(changes, |c| (c.repo_id.as_str(), c.commit_hash.as_str()));
    crate::par::map(&groups, |g| {
        let (repo, hash) = (&g[0].repo_id, &g[0].commit_hash);
        predict_built(repo, hash, g, model, vocab)
    })
    .into_iter()
    .collect()
}

/// Stable grouping by commit key, groups in first-appearance order.
pub fn group_by_commit<'a, T>(items: &'a [T], key: impl Fn(&T) -> (&str, &str)) -> Vec<Vec<&'a T>> {
    let mut index: std::collections::HashMap<(String, String), usize> = Default::default();
    let mut groups: Vec<Vec<&T>> = Vec::new();
    for item in items {
        let (r, h) = key(item);
        let slot = *index.entry((r.to_string(), h.to_string())).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(item);
    }
    groups
}
