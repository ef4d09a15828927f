//! Browser bindings: build a contextual change, tokenize text with a BPE
//! vocabulary trained on the spot, and draw a cost-effort curve.
//!
//! Every export returns a JSON string; the plain-Rust versions are public
//! so they can be tested off the browser.

use deltafix_core::change_builder::{build_contextual_change, render_variant_input, Provenance, Variant};
use deltafix_core::evaluation::{cost_effort, effort_ranking, CommitLabels};
use deltafix_core::inference::{CommitPrediction, THRESHOLD};
use deltafix_core::repo_miner::{FileChange, Label};
use deltafix_core::tokenizer::{train_vocab, MIN_VOCAB_SIZE};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn split_lines(text: &str) -> Vec<String> {
    text.lines().map(str::to_string).collect()
}

/// Context regions at `k` plus every variant's model input.
pub fn contextual_change_json(before: &str, after: &str, k: usize) -> Result<Value, String> {
    let fc = FileChange::from_versions("input.c", split_lines(before), split_lines(after))
        .ok_or("the two versions are identical")?;
    let prov = Provenance {
        repo_id: "demo".into(),
        commit_hash: "0".repeat(40),
        path: fc.path.clone(),
    };
    let cc = build_contextual_change(&fc, k, Label::Nvf, prov);
    let variants: Vec<Value> = Variant::ALL
        .iter()
        .map(|&v| json!({ "name": v.name(), "texts": render_variant_input(&cc, v).texts }))
        .collect();
    Ok(json!({
        "hunks": fc.hunks.len(),
        "removed_loc": cc.removed_loc,
        "added_loc": cc.added_loc,
        "code_before": cc.code_before,
        "code_after": cc.code_after,
        "variants": variants,
    }))
}

/// Train a vocabulary of `vocab_size` on `corpus` and split `text` with it.
pub fn tokenize_json(corpus: &str, text: &str, vocab_size: usize) -> Result<Value, String> {
    let vocab = train_vocab(std::iter::once(corpus), vocab_size.max(MIN_VOCAB_SIZE)).map_err(|e| e.to_string())?;
    let ids = vocab.tokenize(text);
    let pieces: Vec<String> = ids.iter().map(|&id| vocab.decode(&[id])).collect();
    Ok(json!({
        "vocab_size": vocab.len(),
        "merges": vocab.merges().len(),
        "ids": ids,
        "pieces": pieces,
    }))
}

/// One commit per line, `name,probability,loc,label` with label `1` for a
/// fix. Returns the inspection order and CostEffort@L for L = 1..100.
pub fn cost_effort_json(rows: &str) -> Result<Value, String> {
    let mut preds = Vec::new();
    let mut labels = CommitLabels::new();
    for (n, line) in rows.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let [name, prob, loc, label] = cells[..] else {
            return Err(format!("line {}: expected name,probability,loc,label", n + 1));
        };
        let prob: f64 = prob.parse().map_err(|_| format!("line {}: bad probability {prob:?}", n + 1))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(format!("line {}: probability {prob} outside [0, 1]", n + 1));
        }
        let loc: usize = loc.parse().map_err(|_| format!("line {}: bad loc {loc:?}", n + 1))?;
        let label = match label {
            "1" => Label::Vf,
            "0" => Label::Nvf,
            other => return Err(format!("line {}: label must be 0 or 1, got {other:?}", n + 1)),
        };
        let key = ("demo".to_string(), name.to_string());
        if labels.insert(key, label).is_some() {
            return Err(format!("line {}: duplicate commit {name:?}", n + 1));
        }
        preds.push(CommitPrediction {
            repo_id: "demo".into(),
            commit_hash: name.into(),
            file_probs: vec![(name.into(), prob)],
            commit_prob: prob,
            predicted: if prob > THRESHOLD { Label::Vf } else { Label::Nvf },
            commit_loc: loc,
        });
    }
    let curve = (1..=100)
        .map(|l| cost_effort(&preds, &labels, l as f64).map(|v| json!([l, v])))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let order: Vec<&str> = effort_ranking(&preds).iter().map(|p| p.commit_hash.as_str()).collect();
    Ok(json!({ "order": order, "curve": curve }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn contextual_change(before: &str, after: &str, k: usize) -> Result<String, JsValue> {
    to_js(contextual_change_json(before, after, k))
}

#[wasm_bindgen]
pub fn tokenize(corpus: &str, text: &str, vocab_size: usize) -> Result<String, JsValue> {
    to_js(tokenize_json(corpus, text, vocab_size))
}

#[wasm_bindgen]
pub fn cost_effort_curve(rows: &str) -> Result<String, JsValue> {
    to_js(cost_effort_json(rows))
}
