//! Throwaway git repositories with pinned authors and commit times.

use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

pub struct FixtureRepo {
    dir: TempDir,
}

impl FixtureRepo {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let repo = Self { dir };
        repo.git(&["init", "-q", "-b", "main"], 0);
        repo
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn path_buf(&self) -> PathBuf {
        self.dir.path().to_path_buf()
    }

    pub fn git(&self, args: &[&str], ts: i64) -> String {
        let date = format!("@{ts} +0000");
        let out = Command::new("git")
            .arg("-C")
            .arg(self.path())
            .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.com", "-c", "commit.gpgsign=false"])
            .args(args)
            .env("GIT_AUTHOR_DATE", &date)
            .env("GIT_COMMITTER_DATE", &date)
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("HOME", self.path())
            .output()
            .expect("git runs");
        assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn write(&self, name: &str, content: impl AsRef<[u8]>) {
        let p = self.path().join(name);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(&p, content).unwrap();
    }

    /// Write text files, commit everything at `ts` and return the new hash.
    pub fn commit(&self, files: &[(&str, &str)], ts: i64) -> String {
        for (name, content) in files {
            self.write(name, content);
        }
        self.git(&["add", "-A"], ts);
        self.git(&["commit", "-q", "--allow-empty", "-m", &format!("commit at {ts}")], ts);
        self.git(&["rev-parse", "HEAD"], ts).trim().to_string()
    }
}

/// `n` numbered lines joined with newlines, with a trailing newline.
pub fn numbered(n: usize, tag: &str) -> String {
    (1..=n).map(|i| format!("{tag} line {i}\n")).collect()
}

pub fn replace_line(text: &str, line: usize, with: &str) -> String {
    text.lines()
        .enumerate()
        .map(|(i, l)| if i + 1 == line { format!("{with}\n") } else { format!("{l}\n") })
        .collect()
}
