//! Planted-pattern commits: VF iff a sentinel call is removed and not
//! re-added, so the label is only visible in the before/after difference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::repo_miner::{CommitRecord, FileChange, Label};

pub const SENTINEL: &str = "strcpy";
pub const PLANTED_REPO: &str = "planted";

const NAMES: [&str; 8] = ["buf", "len", "dst", "src", "idx", "ptr", "val", "tmp"];
const CALLS: [&str; 6] = ["memset", "printf", "assert", "update", "free", "log"];

/// Where the sentinel appears in one planted change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    RemovedOnly,
    Neither,
    Both,
    AddedOnly,
}

impl Placement {
    pub fn label(self) -> Label {
        if self == Placement::RemovedOnly {
            Label::Vf
        } else {
            Label::Nvf
        }
    }
}

fn statement(rng: &mut ChaCha8Rng, call: &str) -> String {
    let a = NAMES[rng.random_range(0..NAMES.len())];
    let b = NAMES[rng.random_range(0..NAMES.len())];
    format!("  {call}({a}, {b});")
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    let call = CALLS[rng.random_range(0..CALLS.len())];
    statement(rng, call)
}

/// One single-file commit with the sentinel placed as requested.
pub fn planted_change(rng: &mut ChaCha8Rng, placement: Placement, index: usize) -> CommitRecord {
    let (before_has, after_has) = match placement {
        Placement::RemovedOnly => (true, false),
        Placement::Neither => (false, false),
        Placement::Both => (true, true),
        Placement::AddedOnly => (false, true),
    };
    let ctx_before: Vec<String> = (0..2).map(|_| filler(rng)).collect();
    let ctx_after: Vec<String> = (0..2).map(|_| filler(rng)).collect();
    let removed = if before_has { statement(rng, SENTINEL) } else { filler(rng) };
    let mut added = if after_has { statement(rng, SENTINEL) } else { filler(rng) };
    while added == removed {
        added = if after_has { statement(rng, SENTINEL) } else { filler(rng) };
    }
    let assemble = |mid: &str| {
        let mut lines = vec!["void f() {".to_string()];
        lines.extend(ctx_before.iter().cloned());
        lines.push(mid.to_string());
        lines.extend(ctx_after.iter().cloned());
        lines.push("}".to_string());
        lines
    };
    let file = FileChange::from_versions("src/f.c", assemble(&removed), assemble(&added))
        .expect("removed and added lines differ");
    CommitRecord {
        repo_id: PLANTED_REPO.to_string(),
        commit_hash: format!("{:040x}", index),
        timestamp: index as i64,
        label: placement.label(),
        files: vec![file],
    }
}

/// `n` planted commits, half VF and the NVF half split evenly over the
/// three non-VF placements. Hashes encode `first_index..first_index + n`,
/// so sets drawn with disjoint index ranges never collide.
pub fn planted_dataset(n: usize, seed: u64, first_index: usize) -> Vec<CommitRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nvf = [Placement::Neither, Placement::Both, Placement::AddedOnly];
    let mut placements: Vec<Placement> = (0..n)
        .map(|i| if i % 2 == 0 { Placement::RemovedOnly } else { nvf[(i / 2) % 3] })
        .collect();
    placements.shuffle(&mut rng);
    placements
        .into_iter()
        .enumerate()
        .map(|(i, p)| planted_change(&mut rng, p, first_index + i))
        .collect()
}
