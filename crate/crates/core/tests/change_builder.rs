//! Golden renderings and context-window properties.

use std::collections::BTreeSet;
use std::path::Path;

use deltafix_core::change_builder::{
    build_contextual_change, render_variant_input, ContextualChange, Provenance, Variant, SEP_MARKER,
};
use deltafix_core::repo_miner::{FileChange, Label};
use proptest::prelude::*;

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn lines(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("line {i}")).collect()
}

fn patched(n: usize, at: &[usize]) -> Vec<String> {
    (1..=n)
        .map(|i| if at.contains(&i) { format!("patched {i}") } else { format!("line {i}") })
        .collect()
}

fn prov() -> Provenance {
    Provenance {
        repo_id: "r".into(),
        commit_hash: "0".repeat(40),
        path: "f.c".into(),
    }
}

fn build(fc: &FileChange, k: usize) -> ContextualChange {
    build_contextual_change(fc, k, Label::Vf, prov())
}

#[test]
fn single_hunk_goldens() {
    let fc = FileChange::from_versions("f.c", lines(10), patched(10, &[5])).unwrap();
    let k3 = build(&fc, 3);
    assert_eq!(k3.code_before, golden("single_k3.before"));
    assert_eq!(k3.code_after, golden("single_k3.after"));
    assert_eq!(render_variant_input(&k3, Variant::RawGitDiff).texts, [golden("single_k3.raw")]);

    let k0 = build(&fc, 0);
    assert_eq!(k0.code_before, golden("single_k0.before"));
    assert_eq!(k0.code_after, golden("single_k0.after"));
    assert_eq!(render_variant_input(&k0, Variant::CodeConcatNoContext).texts, [golden("single_k0.nocontext")]);
}

#[test]
fn touching_contexts_merge_into_one_region() {
    let fc = FileChange::from_versions("f.c", lines(14), patched(14, &[5, 9])).unwrap();
    assert_eq!(fc.hunks.len(), 2);
    let cc = build(&fc, 3);
    assert_eq!(cc.code_before, golden("two_hunks_k3.before"));
    assert_eq!(cc.code_after, golden("two_hunks_k3.after"));
    assert_eq!(cc.code_before, union_oracle(&fc, 3, true));
}

/// Render context by taking the union of every hunk's `k`-window as a set
/// of line indices and cutting it into maximal contiguous runs.
fn union_oracle(fc: &FileChange, k: usize, old: bool) -> String {
    let file = if old { &fc.old_file_lines } else { &fc.new_file_lines };
    let mut keep = BTreeSet::new();
    for h in &fc.hunks {
        let (start, len) = if old {
            (h.old_start - 1, h.removed_lines.len())
        } else {
            (h.new_start - 1, h.added_lines.len())
        };
        let lo = start.saturating_sub(k);
        let hi = (start + len + k).min(file.len());
        keep.extend(lo..hi);
    }
    let mut runs: Vec<Vec<&str>> = Vec::new();
    let mut prev: Option<usize> = None;
    for i in keep {
        if prev != Some(i.wrapping_sub(1)) || runs.is_empty() {
            runs.push(Vec::new());
        }
        runs.last_mut().unwrap().push(&file[i]);
        prev = Some(i);
    }
    runs.iter().map(|r| r.join("\n")).collect::<Vec<_>>().join("\n\n")
}

/// Old and new versions over a small alphabet, so edits often collide.
fn versions() -> impl Strategy<Value = FileChange> {
    (prop::collection::vec(0u8..6, 0..40), prop::collection::vec((0usize..40, 0u8..4, 0u8..6), 1..8))
        .prop_filter_map("no change", |(old, edits)| {
            let old: Vec<String> = old.iter().map(|c| format!("s{c}")).collect();
            let mut new = old.clone();
            for (at, op, c) in edits {
                let at = at.min(new.len());
                match op {
                    0 => new.insert(at, format!("n{c}")),
                    1 if at < new.len() => {
                        new.remove(at);
                    }
                    _ if at < new.len() => new[at] = format!("m{c}"),
                    _ => new.push(format!("t{c}")),
                }
            }
            FileChange::from_versions("f.c", old, new)
        })
}

fn content_lines(text: &str) -> Vec<&str> {
    text.split('\n').filter(|l| !l.is_empty()).collect()
}

fn is_subsequence(small: &[&str], big: &[&str]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

const SWEEP: [usize; 6] = [0, 1, 3, 5, 7, 9];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn context_grows_monotonically(fc in versions()) {
        let built: Vec<ContextualChange> = SWEEP.iter().map(|&k| build(&fc, k)).collect();
        for w in built.windows(2) {
            prop_assert!(is_subsequence(&content_lines(&w[0].code_before), &content_lines(&w[1].code_before)));
            prop_assert!(is_subsequence(&content_lines(&w[0].code_after), &content_lines(&w[1].code_after)));
        }
    }

    #[test]
    fn regions_match_the_union_oracle(fc in versions(), k in 0usize..6) {
        let cc = build(&fc, k);
        prop_assert_eq!(&cc.code_before, &union_oracle(&fc, k, true));
        prop_assert_eq!(&cc.code_after, &union_oracle(&fc, k, false));
    }

    #[test]
    fn zero_context_is_exactly_the_changed_lines(fc in versions()) {
        let cc = build(&fc, 0);
        let removed: Vec<&str> = fc.hunks.iter().flat_map(|h| &h.removed_lines).map(String::as_str).collect();
        let added: Vec<&str> = fc.hunks.iter().flat_map(|h| &h.added_lines).map(String::as_str).collect();
        prop_assert_eq!(content_lines(&cc.code_before), removed);
        prop_assert_eq!(content_lines(&cc.code_after), added);
    }

    #[test]
    fn renderings_are_deterministic_and_exact(fc in versions(), k in 0usize..10) {
        let cc = build(&fc, k);
        prop_assert_eq!(&cc, &build(&fc, k));
        let concat = render_variant_input(&cc, Variant::CodeConcat);
        prop_assert_eq!(&concat.texts[0], &format!("{}{SEP_MARKER}{}", cc.code_before, cc.code_after));
        for v in Variant::ALL {
            let n = render_variant_input(&cc, v).texts.len();
            prop_assert_eq!(n, if v.is_two_stream() { 2 } else { 1 });
        }
    }

    #[test]
    fn pure_addition_before_is_only_context(
        old in prop::collection::vec(0u8..6, 0..20),
        ins in prop::collection::vec(0u8..6, 1..5),
        at in 0usize..20,
        k in 0usize..5,
    ) {
        let old: Vec<String> = old.iter().map(|c| format!("o{c}")).collect();
        let mut new = old.clone();
        let at = at.min(new.len());
        new.splice(at..at, ins.iter().map(|c| format!("a{c}")));
        let fc = FileChange::from_versions("f.c", old.clone(), new).unwrap();
        prop_assert!(fc.hunks.iter().all(|h| h.removed_lines.is_empty()));
        let cc = build(&fc, k);
        prop_assert!(content_lines(&cc.code_before).iter().all(|l| l.starts_with('o')));
        prop_assert_eq!(content_lines(&cc.code_before).len(), union_oracle(&fc, k, true).split('\n').filter(|l| !l.is_empty()).count());
        if k == 0 {
            prop_assert!(cc.code_before.is_empty());
        }
    }
}
