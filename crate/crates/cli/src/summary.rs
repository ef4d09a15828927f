//! Dataset statistics laid out as File/Commit rows by VF, NVF and project
//! counts per partition.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use deltafix_core::repo_miner::CommitRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub vf_commits: usize,
    pub nvf_commits: usize,
    pub vf_files: usize,
    pub nvf_files: usize,
    pub projects: usize,
}

pub fn count(records: &[CommitRecord]) -> Counts {
    let mut c = Counts::default();
    let mut projects = BTreeSet::new();
    for r in records {
        projects.insert(r.repo_id.as_str());
        if r.label.is_vf() {
            c.vf_commits += 1;
            c.vf_files += r.files.len();
        } else {
            c.nvf_commits += 1;
            c.nvf_files += r.files.len();
        }
    }
    c.projects = projects.len();
    c
}

/// Aligned text table, one column group per named partition.
pub fn render(parts: &[(&str, Counts)]) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut groups = vec![String::new()];
    let mut header = vec![String::new()];
    let mut file = vec!["File".to_string()];
    let mut commit = vec!["Commit".to_string()];
    for (name, c) in parts {
        groups.extend([name.to_string(), String::new(), String::new()]);
        header.extend(["#V.F.".to_string(), "#N.V.F".to_string(), "#Project".to_string()]);
        file.extend([c.vf_files.to_string(), c.nvf_files.to_string(), c.projects.to_string()]);
        commit.extend([c.vf_commits.to_string(), c.nvf_commits.to_string(), c.projects.to_string()]);
    }
    rows.extend([groups, header, file, commit]);
    let widths: Vec<usize> = (0..rows[1].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 { format!("{v:<w$}", w = widths[i]) } else { format!("{v:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
