//! The planted-pattern task laid out as a work directory.

use std::path::{Path, PathBuf};

use deltafix_core::repo_miner::{write_jsonl, CommitRecord};
use deltafix_core::synthetic::planted_dataset;
use serde_json::json;

pub const TRAIN_REPO: &str = "planted";
pub const VAL_REPO: &str = "planted-val";
pub const TEST_REPO: &str = "planted-test";

fn renamed(mut recs: Vec<CommitRecord>, repo: &str) -> Vec<CommitRecord> {
    recs.iter_mut().for_each(|r| r.repo_id = repo.to_string());
    recs
}

/// 64 training commits, 32 validation and 32 held-out test commits, all
/// with disjoint hashes.
pub fn planted_records(seed: u64) -> Vec<CommitRecord> {
    let mut all = renamed(planted_dataset(64, seed, 0), TRAIN_REPO);
    all.extend(renamed(planted_dataset(32, seed + 1000, 64), TEST_REPO));
    all.extend(renamed(planted_dataset(32, seed + 500, 96), VAL_REPO));
    all
}

/// Pinned small configuration that learns the planted pattern.
pub fn planted_config(workdir: &Path, seed: u64, max_steps: usize) -> serde_json::Value {
    json!({
        "workdir": workdir,
        "k": 1,
        "max_len": 48,
        "vocab_size": 320,
        "encoder": {"dim": 32, "layers": 1, "heads": 2, "ffn_mult": 2},
        "variant": "EmbedSubtract_Duo",
        "train": {"learning_rate": 3e-3, "batch_size": 16, "epochs": 50, "max_steps": max_steps},
        "split": {"strategy": "CrossProject", "train": [TRAIN_REPO], "val": [VAL_REPO], "test": [TEST_REPO]},
        "nvf_ratio": null,
        "l_values": [5, 20],
        "seed": seed,
    })
}

/// Write `commits.jsonl` and `config.json` under `dir`; returns the config
/// path.
pub fn planted_workdir(dir: &Path, seed: u64, max_steps: usize) -> PathBuf {
    let work = dir.join("work");
    std::fs::create_dir_all(&work).unwrap();
    let mut f = std::fs::File::create(work.join("commits.jsonl")).unwrap();
    write_jsonl(&mut f, &planted_records(seed)).unwrap();
    let cfg = dir.join("config.json");
    let text = serde_json::to_string_pretty(&planted_config(&work, seed, max_steps)).unwrap();
    std::fs::write(&cfg, text).unwrap();
    cfg
}
