//! Commit mining from local git clones, label ingestion and NVF downsampling.

mod diff;
mod git;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diff::{apply_hunks, diff_lines, split_lines};

/// Files whose first 8000 bytes contain a NUL are treated as binary.
const BINARY_PROBE_LEN: usize = 8000;

/// Default NVF:VF ratio used when downsampling training data.
pub const DEFAULT_NVF_RATIO: f64 = 38.0;

#[derive(Debug, Error)]
pub enum MineError {
    #[error("not a git repository: {0}")]
    NotARepository(PathBuf),
    #[error("git: {0}")]
    Git(String),
    #[error("invalid time range: since {since} > until {until}")]
    InvalidRange { since: i64, until: i64 },
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cannot read labels file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("labels file {path}: expected header `repo_id,commit_hash,vuln_id`")]
    Header { path: PathBuf },
    #[error("labels file {path}, row {row}: {reason}")]
    Malformed {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("labels file {path}, row {row}: {repo_id}@{commit_hash} already labelled {existing}, got {conflicting}")]
    Conflict {
        path: PathBuf,
        row: usize,
        repo_id: String,
        commit_hash: String,
        existing: String,
        conflicting: String,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DownsampleError {
    #[error("cannot downsample without any VF records")]
    NoVulnerabilityFixes,
    #[error("ratio must be positive and finite")]
    InvalidRatio,
}

/// Commit or file label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "VF")]
    Vf,
    #[serde(rename = "NVF")]
    Nvf,
}

impl Label {
    pub fn is_vf(self) -> bool {
        self == Label::Vf
    }

    /// 1.0 for VF, 0.0 for NVF.
    pub fn target(self) -> f64 {
        if self.is_vf() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Vf => "VF",
            Label::Nvf => "NVF",
        })
    }
}

/// One contiguous change inside a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    /// 1-based index of the first removed line in the old file.
    pub old_start: usize,
    pub removed_lines: Vec<String>,
    /// 1-based index of the first added line in the new file.
    pub new_start: usize,
    pub added_lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    pub hunks: Vec<Hunk>,
    pub old_file_lines: Vec<String>,
    pub new_file_lines: Vec<String>,
    pub removed_loc: usize,
    pub added_loc: usize,
}

impl FileChange {
    /// Diff two versions of a file. Returns `None` when nothing changed.
    pub fn from_versions(
        path: impl Into<String>,
        old_file_lines: Vec<String>,
        new_file_lines: Vec<String>,
    ) -> Option<Self> {
        let hunks = diff_lines(&old_file_lines, &new_file_lines);
        if hunks.is_empty() {
            return None;
        }
        let removed_loc = hunks.iter().map(|h| h.removed_lines.len()).sum();
        let added_loc = hunks.iter().map(|h| h.added_lines.len()).sum();
        Some(Self {
            path: path.into(),
            hunks,
            old_file_lines,
            new_file_lines,
            removed_loc,
            added_loc,
        })
    }

    pub fn loc(&self) -> usize {
        self.removed_loc + self.added_loc
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub repo_id: String,
    pub commit_hash: String,
    /// Committer time, UTC seconds.
    pub timestamp: i64,
    pub label: Label,
    pub files: Vec<FileChange>,
}

impl CommitRecord {
    /// Removed plus added lines over all files.
    pub fn loc(&self) -> usize {
        self.files.iter().map(FileChange::loc).sum()
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.repo_id, &self.commit_hash)
    }
}

/// Canonical ordering of mined records: timestamp, then repo, then hash.
pub fn sort_records(records: &mut [CommitRecord]) {
    records.sort_by(|a, b| {
        (a.timestamp, &a.repo_id, &a.commit_hash).cmp(&(b.timestamp, &b.repo_id, &b.commit_hash))
    });
}

/// Inclusive commit-time window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub since: i64,
    pub until: i64,
}

impl TimeRange {
    pub const ALL: TimeRange = TimeRange {
        since: i64::MIN,
        until: i64::MAX,
    };

    pub fn contains(&self, ts: i64) -> bool {
        self.since <= ts && ts <= self.until
    }
}

fn is_binary(bytes: &[u8]) -> bool {
    bytes[..bytes.len().min(BINARY_PROBE_LEN)].contains(&0)
}

/// Mine every non-merge commit reachable from HEAD whose commit time lies in
/// `range`. Records come back unlabelled (NVF) in ascending timestamp order.
pub fn mine_repository(
    repo_path: &Path,
    repo_id: &str,
    range: TimeRange,
) -> Result<Vec<CommitRecord>, MineError> {
    if range.since > range.until {
        return Err(MineError::InvalidRange {
            since: range.since,
            until: range.until,
        });
    }
    let repo = git::Repo::open(repo_path)?;
    let commits = repo.commits()?;
    if commits.is_empty() {
        return Ok(Vec::new());
    }
    let mut blobs = repo.blob_reader()?;
    let mut records = Vec::new();
    for c in commits
        .iter()
        .filter(|c| c.parents <= 1 && range.contains(c.timestamp))
    {
        match mine_commit(&repo, &mut blobs, c) {
            Ok(files) if !files.is_empty() => records.push(CommitRecord {
                repo_id: repo_id.to_owned(),
                commit_hash: c.hash.clone(),
                timestamp: c.timestamp,
                label: Label::Nvf,
                files,
            }),
            Ok(_) => {}
            Err(e) => {
                log::warn!("skipping commit {} in {repo_id}: {e}", c.hash);
                // The batch reader may be out of sync after a failed read.
                blobs = repo.blob_reader()?;
            }
        }
    }
    // Stable: commits sharing a timestamp keep their topological order.
    records.sort_by_key(|r| r.timestamp);
    Ok(records)
}

fn mine_commit(
    repo: &git::Repo,
    blobs: &mut git::BlobReader,
    commit: &git::CommitRef,
) -> Result<Vec<FileChange>, MineError> {
    let mut files = Vec::new();
    for change in repo.tree_changes(&commit.hash)? {
        let old = match &change.old_blob {
            Some(oid) => blobs.read(oid)?,
            None => Vec::new(),
        };
        let new = match &change.new_blob {
            Some(oid) => blobs.read(oid)?,
            None => Vec::new(),
        };
        if is_binary(&old) || is_binary(&new) {
            continue;
        }
        let old_lines = split_lines(&String::from_utf8_lossy(&old));
        let new_lines = split_lines(&String::from_utf8_lossy(&new));
        if let Some(fc) = FileChange::from_versions(change.path, old_lines, new_lines) {
            files.push(fc);
        }
    }
    Ok(files)
}

/// Mine several repositories, one worker per repository, and merge the
/// output in canonical `(timestamp, repo_id, commit_hash)` order.
pub fn mine_repositories(
    repos: &[(String, PathBuf)],
    range: TimeRange,
) -> Result<Vec<CommitRecord>, MineError> {
    let per_repo: Vec<Result<Vec<CommitRecord>, MineError>> =
        crate::par::map(repos, |(id, path)| mine_repository(path, id, range));
    let mut all = Vec::new();
    for r in per_repo {
        all.extend(r?);
    }
    sort_records(&mut all);
    Ok(all)
}

/// `(repo_id, commit_hash) -> vulnerability id`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    entries: BTreeMap<(String, String), String>,
}

impl LabelMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, repo_id: &str, commit_hash: &str) -> Option<&str> {
        self.entries
            .get(&(repo_id.to_owned(), commit_hash.to_owned()))
            .map(String::as_str)
    }

    pub fn contains(&self, repo_id: &str, commit_hash: &str) -> bool {
        self.get(repo_id, commit_hash).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.entries
            .iter()
            .map(|((r, c), v)| (r.as_str(), c.as_str(), v.as_str()))
    }
}

/// Parse the `repo_id,commit_hash,vuln_id` labels CSV.
pub fn load_labels(path: &Path) -> Result<LabelMap, LabelError> {
    let file = std::fs::File::open(path).map_err(|source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_labels(BufReader::new(file), path)
}

fn parse_labels(reader: impl BufRead, path: &Path) -> Result<LabelMap, LabelError> {
    let mut lines = reader.lines();
    let io_err = |source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    };
    match lines.next() {
        Some(header) => {
            let header = header.map_err(io_err)?;
            if header.trim_end_matches('\r') != "repo_id,commit_hash,vuln_id" {
                return Err(LabelError::Header {
                    path: path.to_path_buf(),
                });
            }
        }
        None => {
            return Err(LabelError::Header {
                path: path.to_path_buf(),
            })
        }
    }
    let mut map = LabelMap::default();
    for (idx, line) in lines.enumerate() {
        let row = idx + 2;
        let line = line.map_err(io_err)?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let malformed = |reason: &str| LabelError::Malformed {
            path: path.to_path_buf(),
            row,
            reason: reason.to_owned(),
        };
        if fields.len() != 3 {
            return Err(malformed("expected 3 comma-separated fields"));
        }
        let (repo_id, hash, vuln) = (fields[0], fields[1], fields[2]);
        if repo_id.is_empty() {
            return Err(malformed("empty repo_id"));
        }
        if hash.len() != 40 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(malformed("commit_hash must be 40 hex characters"));
        }
        if vuln.is_empty() {
            return Err(malformed("empty vuln_id"));
        }
        let key = (repo_id.to_owned(), hash.to_ascii_lowercase());
        match map.entries.get(&key) {
            Some(existing) if existing != vuln => {
                return Err(LabelError::Conflict {
                    path: path.to_path_buf(),
                    row,
                    repo_id: key.0,
                    commit_hash: key.1,
                    existing: existing.clone(),
                    conflicting: vuln.to_owned(),
                })
            }
            Some(_) => {}
            None => {
                map.entries.insert(key, vuln.to_owned());
            }
        }
    }
    Ok(map)
}

/// Label each record VF iff its `(repo_id, commit_hash)` is in `labels`.
pub fn attach_labels<'a, I>(records: I, labels: &'a LabelMap) -> impl Iterator<Item = CommitRecord> + 'a
where
    I: IntoIterator<Item = CommitRecord>,
    I::IntoIter: 'a,
{
    records.into_iter().map(move |mut r| {
        r.label = if labels.contains(&r.repo_id, &r.commit_hash) {
            Label::Vf
        } else {
            Label::Nvf
        };
        r
    })
}

/// Keep every VF record and a seeded uniform sample of at most
/// `ceil(ratio * #VF)` NVF records; output in canonical order.
pub fn downsample_nvf(
    records: &[CommitRecord],
    ratio: f64,
    seed: u64,
) -> Result<Vec<CommitRecord>, DownsampleError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(DownsampleError::InvalidRatio);
    }
    let (vf, nvf): (Vec<&CommitRecord>, Vec<&CommitRecord>) =
        records.iter().partition(|r| r.label.is_vf());
    if vf.is_empty() {
        return Err(DownsampleError::NoVulnerabilityFixes);
    }
    let target = ((ratio * vf.len() as f64).ceil() as usize).min(nvf.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, nvf.len(), target).into_vec();
    picked.sort_unstable();
    let mut out: Vec<CommitRecord> = vf.into_iter().cloned().collect();
    out.extend(picked.into_iter().map(|i| nvf[i].clone()));
    sort_records(&mut out);
    Ok(out)
}

/// Write records as JSON lines.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read JSON lines, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(hash_byte: u8, ts: i64, label: Label) -> CommitRecord {
        let fc = FileChange::from_versions("a.txt", vec![], vec!["x".into()]).unwrap();
        CommitRecord {
            repo_id: "r".into(),
            commit_hash: format!("{:02x}", hash_byte).repeat(20),
            timestamp: ts,
            label,
            files: vec![fc],
        }
    }

    fn population(vf: usize, nvf: usize) -> Vec<CommitRecord> {
        let mut recs = Vec::new();
        for i in 0..vf + nvf {
            let label = if i < vf { Label::Vf } else { Label::Nvf };
            let mut r = record((i % 256) as u8, i as i64, label);
            r.commit_hash = format!("{:040x}", i);
            recs.push(r);
        }
        recs
    }

    fn parse(text: &str) -> Result<LabelMap, LabelError> {
        parse_labels(text.as_bytes(), Path::new("labels.csv"))
    }

    const H1: &str = "1111111111111111111111111111111111111111";
    const H2: &str = "2222222222222222222222222222222222222222";

    #[test]
    fn labels_header_only() {
        assert!(parse("repo_id,commit_hash,vuln_id\n").unwrap().is_empty());
    }

    #[test]
    fn labels_two_rows_and_duplicate() {
        let two = format!("repo_id,commit_hash,vuln_id\nA,{H1},CVE-1\nB,{H2},CVE-2\n");
        assert_eq!(parse(&two).unwrap().len(), 2);
        let dup = format!("{two}A,{H1},CVE-1\n");
        assert_eq!(parse(&dup).unwrap().len(), 2);
    }

    #[test]
    fn labels_conflict_and_malformed() {
        let conflict = format!("repo_id,commit_hash,vuln_id\nA,{H1},CVE-1\nA,{H1},CVE-9\n");
        assert!(matches!(
            parse(&conflict),
            Err(LabelError::Conflict { row: 3, .. })
        ));
        let malformed = format!("repo_id,commit_hash,vuln_id\nA,{H1}\n");
        assert!(matches!(
            parse(&malformed),
            Err(LabelError::Malformed { row: 2, .. })
        ));
        assert!(matches!(parse("a,b\n"), Err(LabelError::Header { .. })));
    }

    #[test]
    fn attach_labels_by_key() {
        let mut vf = record(1, 1, Label::Nvf);
        vf.commit_hash = H1.into();
        let other = record(2, 2, Label::Nvf);
        let labels = parse(&format!("repo_id,commit_hash,vuln_id\nr,{H1},CVE-1\n")).unwrap();
        let out: Vec<_> = attach_labels(vec![vf, other], &labels).collect();
        assert_eq!(out[0].label, Label::Vf);
        assert_eq!(out[1].label, Label::Nvf);
        assert_eq!(attach_labels(Vec::new(), &labels).count(), 0);
    }

    #[test]
    fn downsample_counts() {
        let recs = population(10, 1000);
        let out = downsample_nvf(&recs, 30.0, 7).unwrap();
        assert_eq!(out.iter().filter(|r| r.label.is_vf()).count(), 10);
        assert_eq!(out.len(), 310);
        let small = population(10, 20);
        assert_eq!(downsample_nvf(&small, 30.0, 7).unwrap().len(), 30);
    }

    #[test]
    fn downsample_is_seeded() {
        let recs = population(10, 1000);
        let a = serde_json::to_vec(&downsample_nvf(&recs, 30.0, 3).unwrap()).unwrap();
        let b = serde_json::to_vec(&downsample_nvf(&recs, 30.0, 3).unwrap()).unwrap();
        let c = serde_json::to_vec(&downsample_nvf(&recs, 30.0, 4).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn downsample_requires_vf() {
        assert_eq!(
            downsample_nvf(&population(0, 5), 2.0, 0),
            Err(DownsampleError::NoVulnerabilityFixes)
        );
    }

    #[test]
    fn binary_probe_window() {
        let mut bytes = vec![b'a'; 9000];
        bytes[8500] = 0;
        assert!(!is_binary(&bytes));
        bytes[10] = 0;
        assert!(is_binary(&bytes));
    }
}
