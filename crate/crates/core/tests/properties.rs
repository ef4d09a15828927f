//! Randomized invariants across the pipeline modules.

use std::collections::BTreeMap;

use deltafix_core::change_builder::Variant;
use deltafix_core::delta_model::{equivalent_concat_model, fuse, DeltaModel, EncodedInput, FusionMode, ModelConfig};
use deltafix_core::encoder::{init_params, EmbeddingVector, EncoderConfig};
use deltafix_core::evaluation::{classification_metrics, cost_effort, CommitLabels};
use deltafix_core::inference::{aggregate, CommitPrediction};
use deltafix_core::repo_miner::{apply_hunks, downsample_nvf, CommitRecord, FileChange, Label};
use deltafix_core::tensor::Tensor;
use deltafix_core::tokenizer::{encode, encode_pair, train_vocab, TokenSequence, BOS, EOS, PAD, SEP};
use deltafix_core::trainer::{split_dataset, SplitSpec};
use proptest::prelude::*;

fn label(vf: bool) -> Label {
    if vf {
        Label::Vf
    } else {
        Label::Nvf
    }
}

// ---- repo_miner ----

fn line_vec() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0u8..5, 0..30).prop_map(|v| v.into_iter().map(|c| format!("l{c}")).collect())
}

fn record(repo: &str, idx: usize, ts: i64, vf: bool) -> CommitRecord {
    let fc = FileChange::from_versions("f.c", Vec::new(), vec![format!("{idx}")]).unwrap();
    CommitRecord {
        repo_id: repo.to_string(),
        commit_hash: format!("{idx:040x}"),
        timestamp: ts,
        label: label(vf),
        files: vec![fc],
    }
}

/// Records over repos `r0..r5` with clustered timestamps (ties happen).
fn records() -> impl Strategy<Value = Vec<CommitRecord>> {
    prop::collection::vec((0usize..6, 0i64..40, prop::bool::weighted(0.3)), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (repo, ts, vf))| record(&format!("r{repo}"), i, ts, vf))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hunks_round_trip_and_are_well_formed(old in line_vec(), new in line_vec()) {
        let Some(fc) = FileChange::from_versions("f", old.clone(), new.clone()) else {
            prop_assert_eq!(old, new);
            return Ok(());
        };
        prop_assert_eq!(apply_hunks(&fc.old_file_lines, &fc.hunks), Some(new.clone()));
        let removed: usize = fc.hunks.iter().map(|h| h.removed_lines.len()).sum();
        let added: usize = fc.hunks.iter().map(|h| h.added_lines.len()).sum();
        prop_assert_eq!((removed, added), (fc.removed_loc, fc.added_loc));
        let mut prev_end = 0;
        for h in &fc.hunks {
            prop_assert!(!(h.removed_lines.is_empty() && h.added_lines.is_empty()));
            prop_assert!(h.old_start >= 1 && h.new_start >= 1);
            prop_assert!(h.old_start - 1 + h.removed_lines.len() <= old.len());
            prop_assert!(h.new_start - 1 + h.added_lines.len() <= new.len());
            prop_assert!(h.old_start - 1 >= prev_end);
            prev_end = h.old_start - 1 + h.removed_lines.len();
        }
    }

    #[test]
    fn downsampling_keeps_every_vf_and_alters_nothing(recs in records(), ratio in 0.1f64..5.0, seed in any::<u64>()) {
        let vf = recs.iter().filter(|r| r.label.is_vf()).count();
        prop_assume!(vf > 0);
        let out = downsample_nvf(&recs, ratio, seed).unwrap();
        prop_assert_eq!(&out, &downsample_nvf(&recs, ratio, seed).unwrap());
        prop_assert_eq!(out.iter().filter(|r| r.label.is_vf()).count(), vf);
        let nvf_avail = recs.len() - vf;
        let want = nvf_avail.min((ratio * vf as f64).ceil() as usize);
        prop_assert_eq!(out.len() - vf, want);
        prop_assert!(out.iter().all(|o| recs.contains(o)));
        prop_assert!(out.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }
}

// ---- tokenizer ----

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "ab", " ", "\n", "(", "_x", "é", "if", "  "]), 0..30)
        .prop_map(|v| v.concat())
}

fn check_layout(seq: &TokenSequence, max_len: usize, seps: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(seq.ids.len(), max_len);
    prop_assert!(seq.attention_length >= 2 && seq.attention_length <= max_len);
    prop_assert_eq!(seq.ids[0], BOS);
    prop_assert_eq!(seq.ids[seq.attention_length - 1], EOS);
    prop_assert!(seq.ids[seq.attention_length..].iter().all(|&t| t == PAD));
    let inner = &seq.ids[1..seq.attention_length - 1];
    prop_assert_eq!(inner.iter().filter(|&&t| t == SEP).count(), seps);
    prop_assert!(inner.iter().all(|&t| t == SEP || t >= 5));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn encoding_is_total_and_well_laid_out(corpus in prop::collection::vec(text(), 1..5), x in text(), y in text(), max_len in 2usize..40, size in 261usize..300) {
        let vocab = train_vocab(corpus.iter().map(String::as_str), size).unwrap();
        prop_assert!(vocab.len() <= size);
        let seq = encode(&x, &vocab, max_len).unwrap();
        check_layout(&seq, max_len, 0)?;
        prop_assert_eq!(&seq, &encode(&x, &vocab, max_len).unwrap());
        if !seq.truncated {
            prop_assert_eq!(vocab.decode(&seq.ids), x.clone());
        }
        if max_len >= 3 {
            check_layout(&encode_pair(&x, &y, &vocab, max_len).unwrap(), max_len, 1)?;
        }
        let json = vocab.to_json();
        let back = deltafix_core::tokenizer::Vocabulary::from_json(&json).unwrap();
        prop_assert_eq!(&back, &vocab);
        prop_assert_eq!(back.to_json(), json);
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair(corpus in prop::collection::vec("[abc]{2,12}", 1..6)) {
        // Letters only, so every text is one merge chunk.
        let mut counts: BTreeMap<(u8, u8), u64> = BTreeMap::new();
        for t in &corpus {
            for w in t.as_bytes().windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let top = counts.values().max().copied().unwrap();
        // BTreeMap iterates in lexicographic order: first maximum wins ties.
        let (want, _) = counts.iter().find(|(_, &c)| c == top).unwrap();
        let vocab = train_vocab(corpus.iter().map(String::as_str), 262).unwrap();
        let [l, r] = vocab.merges()[0];
        prop_assert_eq!(vocab.token_bytes(l).unwrap(), &[want.0][..]);
        prop_assert_eq!(vocab.token_bytes(r).unwrap(), &[want.1][..]);
    }
}

#[test]
fn abab_corpus_merges_a_then_b() {
    let corpus = vec!["abab"; 4];
    let vocab = train_vocab(corpus, 262).unwrap();
    assert_eq!(vocab.merges().len(), 1);
    let [l, r] = vocab.merges()[0];
    assert_eq!((vocab.token_bytes(l).unwrap(), vocab.token_bytes(r).unwrap()), (&b"a"[..], &b"b"[..]));
}

// ---- encoder and delta_model ----

fn enc_cfg(layers: usize, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 24,
        dim: 8,
        layers,
        heads: 2,
        ffn_mult: 2,
        max_len,
    }
}

fn seq_of(content: &[u32], max_len: usize) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend_from_slice(content);
    ids.push(EOS);
    let attention_length = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence {
        ids,
        attention_length,
        truncated: false,
    }
}

fn content() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(5u32..24, 0..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn extra_padding_never_changes_the_embedding(c in content(), layers in 0usize..4, seed in 0u64..1000) {
        let long = init_params::<f64>(enc_cfg(layers, 24), seed).unwrap();
        let mut short = long.clone();
        short.config.max_len = 12;
        short.pos_emb = Tensor {
            shape: vec![12, 8],
            data: long.pos_emb.data[..12 * 8].to_vec(),
        };
        let a = long.forward(&seq_of(&c, 24)).unwrap();
        let b = short.forward(&seq_of(&c, 12)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn subtraction_is_antisymmetric(a in prop::collection::vec(-10.0f64..10.0, 1..16), seed in any::<u64>()) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.37 - (seed % 7) as f64 + i as f64).collect();
        let (ea, eb) = (EmbeddingVector(a), EmbeddingVector(b));
        let ab = fuse(&ea, &eb, FusionMode::Subtract).unwrap().0;
        let ba = fuse(&eb, &ea, FusionMode::Subtract).unwrap().0;
        prop_assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn encoder_ownership_matches_the_variant(c in content(), seed in 0u64..1000) {
        for v in [Variant::EmbedSubtractDuo, Variant::EmbedConcatDuo, Variant::EmbedSubtractSingle] {
            let mut m = DeltaModel::<f64>::init(ModelConfig::new(v, enc_cfg(1, 12)), seed).unwrap();
            let s = seq_of(&c, 12);
            let before = m.encoder_before().forward(&s).unwrap();
            m.encoder_after_mut().tok_emb.data.iter_mut().for_each(|x| *x += 0.5);
            let changed = m.encoder_before().forward(&s).unwrap() != before;
            prop_assert_eq!(changed, !v.is_dual_encoder(), "{}", v);
        }
    }

    #[test]
    fn concat_construction_is_logit_identical(a in content(), b in content(), seed in 0u64..1000) {
        let m = DeltaModel::<f64>::init(ModelConfig::new(Variant::EmbedSubtractDuo, enc_cfg(2, 12)), seed).unwrap();
        let c = equivalent_concat_model(&m).unwrap();
        let seqs = vec![seq_of(&a, 12), seq_of(&b, 12)];
        let input = EncodedInput { variant: Variant::EmbedSubtractDuo, seqs: seqs.clone() };
        let concat_input = EncodedInput { variant: Variant::EmbedConcatDuo, seqs };
        let (x, y) = (m.logit(&input).unwrap(), c.logit(&concat_input).unwrap());
        prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        prop_assert_eq!(m.predict_file(&input).unwrap(), m.predict_file(&input).unwrap());
    }
}

// ---- splits ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cross_project_partitions_are_repo_disjoint(recs in records(), owner in prop::collection::vec(0usize..3, 6)) {
        let lists: Vec<Vec<String>> = (0..3)
            .map(|p| (0..6).filter(|r| owner[*r] == p).map(|r| format!("r{r}")).collect())
            .collect();
        let spec = SplitSpec::CrossProject { train: lists[0].clone(), val: lists[1].clone(), test: lists[2].clone() };
        let s = split_dataset(recs.clone(), &spec).unwrap();
        prop_assert_eq!(&s, &split_dataset(recs.clone(), &spec).unwrap());
        for (p, part) in [&s.train, &s.val, &s.test].into_iter().enumerate() {
            prop_assert!(part.iter().all(|r| lists[p].contains(&r.repo_id)));
        }
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), recs.len());
    }

    #[test]
    fn unlisted_repositories_are_rejected(recs in records()) {
        let spec = SplitSpec::CrossProject { train: vec!["r0".into()], val: vec![], test: vec![] };
        let has_other = recs.iter().any(|r| r.repo_id != "r0");
        prop_assert_eq!(split_dataset(recs, &spec).is_err(), has_other);
    }

    #[test]
    fn temporal_partitions_are_time_ordered(recs in records(), frac in 0.05f64..=1.0, test_start in prop::option::of(10i64..45)) {
        let spec = SplitSpec::Temporal { train_fraction: frac, test_start };
        let Ok(s) = split_dataset(recs.clone(), &spec) else { return Ok(()) };
        prop_assert_eq!(&s, &split_dataset(recs.clone(), &spec).unwrap());
        let max = |v: &[CommitRecord]| v.iter().map(|r| r.timestamp).max();
        let min = |v: &[CommitRecord]| v.iter().map(|r| r.timestamp).min();
        if let (Some(a), Some(b)) = (max(&s.train), min(&s.val)) { prop_assert!(a < b); }
        if let (Some(a), Some(b)) = (max(&s.val), min(&s.test)) { prop_assert!(a < b); }
        if let (Some(a), Some(b)) = (max(&s.train), min(&s.test)) { prop_assert!(a < b); }
        // "First fraction of VF commits": never more than the rounded share
        // (the cut only moves earlier to keep equal timestamps together).
        let eligible: Vec<i64> = recs.iter().filter(|r| r.label.is_vf() && test_start.is_none_or(|t| r.timestamp < t)).map(|r| r.timestamp).collect();
        let share = ((frac * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
        let train_vf = s.train.iter().filter(|r| r.label.is_vf()).count();
        prop_assert!(train_vf >= 1 && train_vf <= share);
        let mut sorted = eligible.clone();
        sorted.sort_unstable();
        if share == eligible.len() || sorted[share - 1] != sorted[share] {
            prop_assert_eq!(train_vf, share);
        }
    }
}

// ---- inference ----

/// `|x - sum(g) / (n * 2^53)| <= ulp(x)` in exact integer arithmetic, for
/// `x >= 2^-8` (so `x * 2^60` and `ulp(x) * 2^60` are integers).
fn within_one_ulp(x: f64, grid: &[u64]) -> bool {
    let n = grid.len() as i128;
    let num: i128 = grid.iter().map(|&g| g as i128).sum();
    let ulp = f64::from_bits(x.to_bits() + 1) - x;
    let (xi, ui) = ((x * 2f64.powi(60)) as i128, (ulp * 2f64.powi(60)) as i128);
    (xi * n - (num << 7)).abs() <= ui * n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn commit_prob_is_an_exact_order_free_mean(
        grid in prop::collection::vec(1u64 << 45..=1u64 << 53, 1..20),
        seed in any::<u64>(),
    ) {
        let probs: Vec<f64> = grid.iter().map(|&g| g as f64 / 2f64.powi(53)).collect();
        let files: Vec<(String, f64)> = probs.iter().enumerate().map(|(i, &p)| (format!("f{i:02}.c"), p)).collect();
        let p = aggregate("r", "h", files.clone(), 1).unwrap();
        prop_assert!(within_one_ulp(p.commit_prob, &grid));
        let mut shuffled = files.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed.rotate_left(i as u32) % n as u64) as usize);
        }
        let q = aggregate("r", "h", shuffled, 1).unwrap();
        prop_assert_eq!(p.commit_prob.to_bits(), q.commit_prob.to_bits());
        prop_assert_eq!(p.predicted, label(p.commit_prob > 0.5));
    }
}

// ---- evaluation ----

fn pred(i: usize, prob: f64, loc: usize) -> CommitPrediction {
    CommitPrediction {
        repo_id: format!("r{}", i % 3),
        commit_hash: format!("{i:040x}"),
        file_probs: vec![("f".into(), prob)],
        commit_prob: prob,
        predicted: label(prob > 0.5),
        commit_loc: loc,
    }
}

type Instance = (Vec<CommitPrediction>, CommitLabels);

fn instance() -> impl Strategy<Value = Instance> {
    prop::collection::vec((0u32..=8, 0usize..30, any::<bool>()), 1..=20).prop_map(|v| {
        let preds: Vec<_> = v.iter().enumerate().map(|(i, (p, loc, _))| pred(i, *p as f64 / 8.0, *loc)).collect();
        let labels = preds
            .iter()
            .zip(&v)
            .map(|(p, (_, _, vf))| ((p.repo_id.clone(), p.commit_hash.clone()), label(*vf)))
            .collect();
        (preds, labels)
    })
}

/// Rank by (prob desc, loc asc, repo, hash), then take the longest prefix
/// whose LOC fits `ceil(L * total / 100)`, all in integers.
fn oracle(preds: &[CommitPrediction], labels: &CommitLabels, l: u64) -> f64 {
    let mut ranked: Vec<&CommitPrediction> = preds.iter().collect();
    ranked.sort_by_key(|p| (std::cmp::Reverse((p.commit_prob * 8.0) as u32), p.commit_loc, p.repo_id.clone(), p.commit_hash.clone()));
    let total: u64 = preds.iter().map(|p| p.commit_loc as u64).sum();
    let budget = (l * total).div_ceil(100);
    let is_vf = |p: &CommitPrediction| labels[&(p.repo_id.clone(), p.commit_hash.clone())].is_vf();
    let mut best = 0;
    for m in 0..=ranked.len() {
        let spent: u64 = ranked[..m].iter().map(|p| p.commit_loc as u64).sum();
        if spent <= budget {
            best = m;
        } else {
            break;
        }
    }
    let found = ranked[..best].iter().filter(|p| is_vf(p)).count();
    found as f64 / preds.iter().filter(|p| is_vf(p)).count() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn cost_effort_matches_the_prefix_oracle((preds, labels) in instance()) {
        prop_assume!(labels.values().any(|l| l.is_vf()));
        let mut last = 0.0;
        for l in 1..=100u64 {
            let got = cost_effort(&preds, &labels, l as f64).unwrap();
            prop_assert_eq!(got, oracle(&preds, &labels, l), "L = {}", l);
            prop_assert!(got >= last);
            last = got;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn cost_effort_depends_only_on_the_ranking((preds, labels) in instance(), l in 1u32..=100) {
        prop_assume!(labels.values().any(|l| l.is_vf()));
        let base = cost_effort(&preds, &labels, l as f64).unwrap();
        for f in [|p: f64| p * 0.5, |p: f64| p * p, |p: f64| (p + 1.0).ln()] {
            let moved: Vec<_> = preds.iter().map(|p| CommitPrediction { commit_prob: f(p.commit_prob), ..p.clone() }).collect();
            prop_assert_eq!(cost_effort(&moved, &labels, l as f64).unwrap(), base);
        }
    }

    #[test]
    fn metrics_ignore_input_order((preds, labels) in instance(), seed in any::<u64>()) {
        let mut perm = preds.clone();
        let n = perm.len();
        for i in 0..n {
            perm.swap(i, (seed.rotate_left(i as u32) % n as u64) as usize);
        }
        prop_assert_eq!(classification_metrics(&preds, &labels).unwrap(), classification_metrics(&perm, &labels).unwrap());
    }
}
