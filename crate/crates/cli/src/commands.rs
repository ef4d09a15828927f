//! The six subcommands. Each returns the text it would print.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use deltafix_core::change_builder::{build_commit_changes, ContextualChange, Variant};
use deltafix_core::evaluation::{emit_buckets, emit_report, evaluate, CommitLabels, EvalReport, ReportFormat};
use deltafix_core::inference::{predict_changes, CommitPrediction};
use deltafix_core::repo_miner::{attach_labels, downsample_nvf, load_labels, mine_repositories, CommitRecord};
use deltafix_core::tokenizer::{train_vocab, Vocabulary};
use deltafix_core::trainer::{
    load_checkpoint, prepare_examples, save_checkpoint, split_dataset, train, write_loss_row, CheckpointMeta,
    EpochSummary, Partition, TrainOutcome, LOSS_LOG_HEADER,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::summary;
use crate::workdir::{
    read_records, sha256_file, write_manifest, write_records, write_text, WorkdirLock, BUILD_DIR, CHECKPOINT, COMMITS, LOSS_LOG,
    PREDICTIONS, VOCAB,
};
use crate::CliError;

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found: {}", path.display())))
    }
}

/// Mine every configured repository, label commits and write
/// `commits.jsonl`.
pub fn cmd_mine(cfg: &RunConfig) -> Result<String, CliError> {
    if let Some(labels) = &cfg.labels {
        require_file(labels, "labels file")?;
    } else if !cfg.repos.is_empty() {
        return Err(CliError::Usage("`labels` must be set to mine repositories".into()));
    }
    if let Some(r) = cfg.repos.iter().find(|r| !r.path.is_dir()) {
        return Err(CliError::Data(format!("repository `{}` not found: {}", r.id, r.path.display())));
    }
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;

    let labels = match &cfg.labels {
        Some(p) => load_labels(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => Default::default(),
    };
    let repos: Vec<(String, PathBuf)> = cfg.repos.iter().map(|r| (r.id.clone(), r.path.clone())).collect();
    let mined = mine_repositories(&repos, cfg.time_range()).map_err(CliError::data)?;
    let records: Vec<CommitRecord> = attach_labels(mined, &labels).collect();
    let matched = records.iter().filter(|r| r.label.is_vf()).count();
    if matched < labels.len() {
        log::warn!("{} labelled commits were not found among mined commits", labels.len() - matched);
    }

    let out = cfg.workdir.join(COMMITS);
    write_records(&out, &records)?;
    let inputs: Vec<PathBuf> = cfg.labels.iter().cloned().collect();
    write_manifest(&cfg.workdir, "mine", cfg, &inputs, std::slice::from_ref(&out))?;
    Ok(summary::render(&[("All", summary::count(&records))]))
}

/// Partitioned, downsampled and context-built data plus its vocabulary.
pub struct Built {
    pub train: Vec<ContextualChange>,
    pub val: Vec<ContextualChange>,
    pub test: Vec<ContextualChange>,
    pub vocab: Vocabulary,
    pub summary: String,
    /// `repo_id/commit_hash` per partition, for auditing.
    pub ids: SplitIds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn downsample(records: Vec<CommitRecord>, cfg: &RunConfig, salt: u64, part: &str) -> Result<Vec<CommitRecord>, CliError> {
    let Some(ratio) = cfg.nvf_ratio else {
        return Ok(records);
    };
    if !records.iter().any(|r| r.label.is_vf()) {
        log::warn!("{part} partition has no VF commit; NVF kept as is");
        return Ok(records);
    }
    downsample_nvf(&records, ratio, cfg.seed ^ salt).map_err(CliError::data)
}

/// Split, downsample train/val NVF (test keeps everything), build every
/// file at context `k` and train the vocabulary on the training texts.
pub fn build_dataset(cfg: &RunConfig, records: Vec<CommitRecord>, k: usize) -> Result<Built, CliError> {
    let splits = split_dataset(records, &cfg.split).map_err(CliError::data)?;
    let train_recs = downsample(splits.train, cfg, 0, "train")?;
    let val_recs = downsample(splits.val, cfg, 1, "val")?;
    let test_recs = splits.test;
    if test_recs.is_empty() {
        log::warn!("the test partition is empty; set `test_start` or list test repositories");
    }
    let summary = summary::render(&[
        ("Training Set", summary::count(&train_recs)),
        ("Validation Set", summary::count(&val_recs)),
        ("Testing Set", summary::count(&test_recs)),
    ]);
    let ids = |rs: &[CommitRecord]| rs.iter().map(|r| format!("{}/{}", r.repo_id, r.commit_hash)).collect();
    let ids = SplitIds {
        train: ids(&train_recs),
        val: ids(&val_recs),
        test: ids(&test_recs),
    };
    let build = |rs: &[CommitRecord]| rs.iter().flat_map(|r| build_commit_changes(r, k)).collect::<Vec<_>>();
    let (train, val, test) = (build(&train_recs), build(&val_recs), build(&test_recs));
    let vocab = train_vocab(
        train.iter().flat_map(|c| [c.code_before.as_str(), c.code_after.as_str()]),
        cfg.vocab_size,
    )
    .map_err(|e| CliError::Data(format!("vocabulary: {e}")))?;
    Ok(Built {
        train,
        val,
        test,
        vocab,
        summary,
        ids,
    })
}

fn read_commits(cfg: &RunConfig) -> Result<Vec<CommitRecord>, CliError> {
    let path = cfg.workdir.join(COMMITS);
    require_file(&path, "mined commits (run `mine` first)")?;
    read_records(&path)
}

fn partition_path(cfg: &RunConfig, p: Partition) -> PathBuf {
    cfg.workdir.join(BUILD_DIR).join(format!("{}.jsonl", p.name()))
}

/// Sidecar describing the built JSONL files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildHeader {
    pub k: usize,
    pub variant_agnostic: bool,
    pub source_sha256: String,
}

/// Write `build/{train,val,test}.jsonl`, `build/vocab.json` and a summary.
pub fn cmd_build(cfg: &RunConfig) -> Result<String, CliError> {
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let records = read_commits(cfg)?;
    let built = build_dataset(cfg, records, cfg.k)?;
    let dir = cfg.workdir.join(BUILD_DIR);
    let mut outputs = Vec::new();
    for (p, changes) in [(Partition::Train, &built.train), (Partition::Val, &built.val), (Partition::Test, &built.test)] {
        let path = partition_path(cfg, p);
        write_records(&path, changes)?;
        outputs.push(path);
    }
    let vocab_path = dir.join(VOCAB);
    write_text(&vocab_path, &built.vocab.to_json())?;
    let summary_path = dir.join("summary.txt");
    write_text(&summary_path, &built.summary)?;
    let ids_path = dir.join("splits.json");
    write_text(&ids_path, &serde_json::to_string_pretty(&built.ids).expect("ids serialize"))?;
    let commits = cfg.workdir.join(COMMITS);
    let header = BuildHeader {
        k: cfg.k,
        variant_agnostic: true,
        source_sha256: sha256_file(&commits)?,
    };
    let header_path = dir.join("header.json");
    write_text(&header_path, &(serde_json::to_string_pretty(&header).expect("header serializes") + "\n"))?;
    outputs.extend([vocab_path, summary_path, ids_path, header_path]);
    write_manifest(&dir, "build", cfg, &[commits], &outputs)?;
    Ok(built.summary)
}

fn read_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    require_file(path, "vocabulary")?;
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    Vocabulary::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_built(path: &Path, k: usize) -> Result<Vec<ContextualChange>, CliError> {
    require_file(path, "built changes (run `build` first)")?;
    let changes: Vec<ContextualChange> = read_records(path)?;
    if let Some(c) = changes.iter().find(|c| c.k != k) {
        return Err(CliError::Data(format!(
            "{} was built with k={} but the run uses k={k}; rebuild first",
            path.display(),
            c.k
        )));
    }
    Ok(changes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    variant: Variant,
    k: usize,
    steps: usize,
    best_epoch: usize,
    epochs: Vec<EpochSummary>,
}

/// Train one variant into `dir`: `model.ckpt`, a streamed `loss_log.csv`
/// and `train_summary.json`.
fn train_into(
    cfg: &RunConfig,
    variant: Variant,
    k: usize,
    train_changes: &[ContextualChange],
    val_changes: &[ContextualChange],
    vocab: &Vocabulary,
    dir: &Path,
) -> Result<(TrainOutcome, Vec<PathBuf>), CliError> {
    let tokenize = |c: &[ContextualChange]| {
        prepare_examples(c, variant, vocab, cfg.max_len).map_err(|e| CliError::Data(format!("tokenizing: {e}")))
    };
    let (train_set, val_set) = (tokenize(train_changes)?, tokenize(val_changes)?);
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let log_path = dir.join(LOSS_LOG);
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(CliError::io(&log_path))?;
    let mut log = BufWriter::new(log_file);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(CliError::io(&log_path))?;
    let mut log_err = None;
    let model_cfg = cfg.model_config(variant, vocab.len());
    let result = train(&train_set, &val_set, model_cfg, &cfg.train_config_for(variant, k), |r| {
        if log_err.is_none() {
            log_err = write_loss_row(&mut log, r).and_then(|_| log.flush()).err();
        }
    });
    if let Some(e) = log_err {
        return Err(CliError::io(&log_path)(e));
    }
    let outcome = result.map_err(|e| CliError::Training(e.to_string()))?;

    let ckpt = dir.join(CHECKPOINT);
    let meta = CheckpointMeta {
        model: model_cfg,
        k,
        vocab: vocab.clone(),
    };
    save_checkpoint(&meta, &outcome.model, &ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    let summary_path = dir.join("train_summary.json");
    let summary = TrainSummary {
        variant,
        k,
        steps: outcome.steps,
        best_epoch: outcome.best_epoch,
        epochs: outcome.epochs.clone(),
    };
    write_text(&summary_path, &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    Ok((outcome, vec![ckpt, log_path, summary_path]))
}

fn describe(outcome: &TrainOutcome) -> String {
    let best = outcome
        .epochs
        .iter()
        .find(|e| e.epoch == outcome.best_epoch)
        .expect("best epoch was logged");
    format!(
        "trained {} steps; best epoch {} (validation F1 {:.3}, loss {:.4})\n",
        outcome.steps, best.epoch, best.val_f1, best.val_loss
    )
}

/// Train the configured variant on `build/train.jsonl`, selecting on
/// `build/val.jsonl`.
pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let vocab_path = cfg.workdir.join(BUILD_DIR).join(VOCAB);
    let vocab = read_vocab(&vocab_path)?;
    let train_path = partition_path(cfg, Partition::Train);
    let val_path = partition_path(cfg, Partition::Val);
    let train_changes = read_built(&train_path, cfg.k)?;
    let val_changes = read_built(&val_path, cfg.k)?;
    let (outcome, outputs) = train_into(cfg, cfg.variant, cfg.k, &train_changes, &val_changes, &vocab, &cfg.workdir)?;
    write_manifest(&cfg.workdir, "train", cfg, &[vocab_path, train_path, val_path], &outputs)?;
    Ok(describe(&outcome))
}

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    /// Defaults to `<workdir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Built changes to score; defaults to `<workdir>/build/test.jsonl`.
    pub input: Option<PathBuf>,
}

/// Score built changes with a checkpoint and write `predictions.jsonl`.
pub fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> Result<String, CliError> {
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cfg.workdir.join(CHECKPOINT));
    let input = args.input.clone().unwrap_or_else(|| partition_path(cfg, Partition::Test));
    require_file(&ckpt_path, "checkpoint")?;
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let ckpt = load_checkpoint(&ckpt_path).map_err(|e| CliError::Data(format!("{}: {e}", ckpt_path.display())))?;
    ckpt.check_max_len(cfg.max_len)
        .map_err(|e| CliError::Data(format!("{}: {e}", ckpt_path.display())))?;
    let changes = read_built(&input, ckpt.meta.k)?;
    let preds = predict_changes(&changes, &ckpt.model, &ckpt.meta.vocab).map_err(CliError::data)?;
    let out = cfg.workdir.join(PREDICTIONS);
    write_records(&out, &preds)?;
    write_manifest(&cfg.workdir, "predict", cfg, &[ckpt_path, input], std::slice::from_ref(&out))?;
    let vf = preds.iter().filter(|p| p.predicted.is_vf()).count();
    Ok(format!("{} commits scored, {vf} predicted VF\n", preds.len()))
}

fn commit_labels(changes: &[ContextualChange]) -> CommitLabels {
    changes
        .iter()
        .map(|c| ((c.repo_id.clone(), c.commit_hash.clone()), c.label))
        .collect()
}

fn write_reports(dir: &Path, reports: &[EvalReport], first_column: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for (name, format) in [("report.csv", ReportFormat::Csv), ("report.txt", ReportFormat::Text), ("report.json", ReportFormat::Json)] {
        let path = dir.join(name);
        write_text(&path, &emit_report(reports, format, first_column))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Evaluate `predictions.jsonl` against the labels in `build/test.jsonl`.
pub fn cmd_evaluate(cfg: &RunConfig, predictions: Option<&Path>) -> Result<String, CliError> {
    let pred_path = predictions.map_or_else(|| cfg.workdir.join(PREDICTIONS), Path::to_path_buf);
    require_file(&pred_path, "predictions")?;
    let test_path = partition_path(cfg, Partition::Test);
    require_file(&test_path, "built test changes")?;
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let preds: Vec<CommitPrediction> = read_records(&pred_path)?;
    let labels = commit_labels(&read_records::<ContextualChange>(&test_path)?);
    let report = evaluate(cfg.variant.name(), &preds, &labels, &cfg.l_values).map_err(CliError::data)?;
    let mut outputs = write_reports(&cfg.workdir, std::slice::from_ref(&report), "Method")?;
    let buckets = cfg.workdir.join("buckets.csv");
    write_text(&buckets, &emit_buckets(&report))?;
    outputs.push(buckets);
    write_manifest(&cfg.workdir, "evaluate", cfg, &[pred_path, test_path], &outputs)?;
    Ok(emit_report(&[report.clone()], ReportFormat::Text, "Method") + "\n" + &emit_buckets(&report))
}

fn predict_and_evaluate(
    cfg: &RunConfig,
    label: &str,
    outcome: &TrainOutcome,
    vocab: &Vocabulary,
    test: &[ContextualChange],
    dir: &Path,
) -> Result<(EvalReport, PathBuf), CliError> {
    let preds = predict_changes(test, &outcome.model, vocab).map_err(CliError::data)?;
    let path = dir.join(PREDICTIONS);
    write_records(&path, &preds)?;
    let report = evaluate(label, &preds, &commit_labels(test), &cfg.l_values).map_err(CliError::data)?;
    Ok((report, path))
}

/// Train and evaluate all six variants on one split, or with `sweep_k` the
/// configured variant once per context size. Reports are rewritten after
/// every row so a failure keeps the finished rows.
pub fn cmd_ablate(cfg: &RunConfig, sweep_k: Option<&[usize]>) -> Result<String, CliError> {
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let commits = cfg.workdir.join(COMMITS);
    let records = read_commits(cfg)?;
    let root = cfg.workdir.join("ablate");
    let mut outputs = Vec::new();
    let mut reports = Vec::new();

    let (dir, first_column) = match sweep_k {
        None => {
            let built = build_dataset(cfg, records, cfg.k)?;
            let ids = root.join("splits.json");
            write_text(&ids, &serde_json::to_string_pretty(&built.ids).expect("ids serialize"))?;
            outputs.push(ids);
            for variant in Variant::ALL {
                let dir = root.join(variant.name());
                let (outcome, files) = train_into(cfg, variant, cfg.k, &built.train, &built.val, &built.vocab, &dir)?;
                let (report, preds) = predict_and_evaluate(cfg, variant.name(), &outcome, &built.vocab, &built.test, &dir)?;
                outputs.extend(files);
                outputs.push(preds);
                reports.push(report);
                write_reports(&root, &reports, "Method")?;
            }
            (root, "Method")
        }
        Some(ks) => {
            let dir = root.join("sweep_k");
            for &k in ks {
                let built = build_dataset(cfg, records.clone(), k)?;
                let kdir = dir.join(format!("k{k}"));
                let (outcome, files) = train_into(cfg, cfg.variant, k, &built.train, &built.val, &built.vocab, &kdir)?;
                let (report, preds) = predict_and_evaluate(cfg, &k.to_string(), &outcome, &built.vocab, &built.test, &kdir)?;
                outputs.extend(files);
                outputs.push(preds);
                reports.push(report);
                write_reports(&dir, &reports, "Window size")?;
            }
            (dir, "Window size")
        }
    };
    outputs.extend(write_reports(&dir, &reports, first_column)?);
    write_manifest(&dir, "ablate", cfg, &[commits], &outputs)?;
    Ok(emit_report(&reports, ReportFormat::Text, first_column))
}
