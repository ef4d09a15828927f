//! Thin wrapper over the `git` command line.
//!
//! Commit listing and tree diffs go through one process per call; blob
//! contents are streamed through a single long-lived `git cat-file --batch`
//! process per repository.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::MineError;

/// Object id of the all-zero blob git reports for a missing side.
const NULL_OID_PREFIX: &str = "0000000000";
const SUBMODULE_MODE: &str = "160000";

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct CommitRef {
    pub hash: String,
    pub timestamp: i64,
    pub parents: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct TreeChange {
    pub path: String,
    pub old_blob: Option<String>,
    pub new_blob: Option<String>,
}

pub(crate) struct Repo {
    path: PathBuf,
}

impl Repo {
    pub fn open(path: &Path) -> Result<Self, MineError> {
        let out = Command::new("git")
            .arg("-C")
            .arg(path)
            .args(["rev-parse", "--git-dir"])
            .stderr(Stdio::null())
            .output()
            .map_err(|e| MineError::Git(format!("cannot run git: {e}")))?;
        if !out.status.success() {
            return Err(MineError::NotARepository(path.to_path_buf()));
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    fn git(&self) -> Command {
        let mut cmd = Command::new("git");
        cmd.arg("-C").arg(&self.path);
        cmd
    }

    fn has_head(&self) -> bool {
        self.git()
            .args(["rev-parse", "--verify", "--quiet", "HEAD"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    /// All commits reachable from HEAD, oldest first.
    pub fn commits(&self) -> Result<Vec<CommitRef>, MineError> {
        if !self.has_head() {
            return Ok(Vec::new());
        }
        let out = self
            .git()
            .args(["log", "--reverse", "--format=%H %ct %P", "HEAD"])
            .output()
            .map_err(|e| MineError::Git(e.to_string()))?;
        if !out.status.success() {
            return Err(MineError::Git(
                String::from_utf8_lossy(&out.stderr).trim().to_owned(),
            ));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let mut commits = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let mut parts = line.split(' ');
            let hash = parts.next().unwrap_or_default().to_owned();
            let timestamp = parts
                .next()
                .and_then(|t| t.parse::<i64>().ok())
                .ok_or_else(|| MineError::Git(format!("malformed log line: {line}")))?;
            let parents = parts.filter(|p| !p.is_empty()).count();
            commits.push(CommitRef {
                hash,
                timestamp,
                parents,
            });
        }
        Ok(commits)
    }

    /// Files touched by a non-merge commit relative to its parent (or the
    /// empty tree for a root commit). Renames are reported as delete + add.
    pub fn tree_changes(&self, hash: &str) -> Result<Vec<TreeChange>, MineError> {
        let out = self
            .git()
            .args([
                "diff-tree",
                "-r",
                "--root",
                "--no-renames",
                "--no-commit-id",
                "--no-abbrev",
                "-z",
                hash,
            ])
            .output()
            .map_err(|e| MineError::Git(e.to_string()))?;
        if !out.status.success() {
            return Err(MineError::Git(
                String::from_utf8_lossy(&out.stderr).trim().to_owned(),
            ));
        }
        parse_raw_diff(&out.stdout)
    }

    pub fn blob_reader(&self) -> Result<BlobReader, MineError> {
        let mut child = self
            .git()
            .args(["cat-file", "--batch"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| MineError::Git(e.to_string()))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(BlobReader {
            child,
            stdin: Some(stdin),
            stdout,
        })
    }
}

/// Parse `git diff-tree -r -z` raw output.
fn parse_raw_diff(bytes: &[u8]) -> Result<Vec<TreeChange>, MineError> {
    let mut fields = bytes.split(|b| *b == 0).filter(|f| !f.is_empty());
    let mut changes = Vec::new();
    while let Some(meta) = fields.next() {
        let meta = String::from_utf8_lossy(meta);
        let path = fields
            .next()
            .map(|p| String::from_utf8_lossy(p).into_owned())
            .ok_or_else(|| MineError::Git("raw diff entry without path".into()))?;
        let parts: Vec<&str> = meta.trim_start_matches(':').split(' ').collect();
        if parts.len() < 5 {
            return Err(MineError::Git(format!("malformed raw diff entry: {meta}")));
        }
        if parts[0] == SUBMODULE_MODE || parts[1] == SUBMODULE_MODE {
            continue;
        }
        let blob = |oid: &str| (!oid.starts_with(NULL_OID_PREFIX)).then(|| oid.to_owned());
        changes.push(TreeChange {
            path,
            old_blob: blob(parts[2]),
            new_blob: blob(parts[3]),
        });
    }
    Ok(changes)
}

pub(crate) struct BlobReader {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl BlobReader {
    pub fn read(&mut self, oid: &str) -> Result<Vec<u8>, MineError> {
        let stdin = self.stdin.as_mut().expect("stdin open while reader alive");
        writeln!(stdin, "{oid}").map_err(|e| MineError::Git(e.to_string()))?;
        stdin.flush().map_err(|e| MineError::Git(e.to_string()))?;
        let mut header = String::new();
        self.stdout
            .read_line(&mut header)
            .map_err(|e| MineError::Git(e.to_string()))?;
        let parts: Vec<&str> = header.trim_end().split(' ').collect();
        if parts.len() != 3 {
            return Err(MineError::Git(format!(
                "cannot read object {oid}: {}",
                header.trim_end()
            )));
        }
        let size: usize = parts[2]
            .parse()
            .map_err(|_| MineError::Git(format!("bad object header: {}", header.trim_end())))?;
        let mut buf = vec![0u8; size + 1];
        self.stdout
            .read_exact(&mut buf)
            .map_err(|e| MineError::Git(e.to_string()))?;
        buf.pop();
        Ok(buf)
    }
}

impl Drop for BlobReader {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.wait();
    }
}
