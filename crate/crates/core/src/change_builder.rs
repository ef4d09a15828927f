//! Context-reserved `(code_before, code_after)` construction and the raw
//! text layouts of each representation variant.
//!
//! Every hunk is widened by `k` lines of context on both sides. Hunks whose
//! widened regions overlap or touch are merged into one region, so shared
//! context is emitted once. `code_before` renders each region from the old
//! file and `code_after` from the new file; regions are separated by a
//! single blank line.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::repo_miner::{CommitRecord, FileChange, Label};

/// Default context window.
pub const DEFAULT_CONTEXT_LINES: usize = 3;

/// Human-readable separator shown where two texts are joined with the
/// tokenizer's SEP token.
pub const SEP_MARKER: &str = "\u{27e8}SEP\u{27e9}";

const REGION_SEPARATOR: &str = "\n\n";

/// The six code-change representation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "EmbedConcat_Duo")]
    EmbedConcatDuo,
    #[serde(rename = "EmbedSubtract_Single")]
    EmbedSubtractSingle,
    #[serde(rename = "CodeConcat")]
    CodeConcat,
    #[serde(rename = "CodeConcat_NoContext")]
    CodeConcatNoContext,
    #[serde(rename = "RawGitDiff")]
    RawGitDiff,
    #[serde(rename = "EmbedSubtract_Duo")]
    EmbedSubtractDuo,
}

impl Variant {
    /// All variants in ablation-report row order, the proposed design last.
    pub const ALL: [Variant; 6] = [
        Variant::EmbedConcatDuo,
        Variant::EmbedSubtractSingle,
        Variant::CodeConcat,
        Variant::CodeConcatNoContext,
        Variant::RawGitDiff,
        Variant::EmbedSubtractDuo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EmbedConcatDuo => "EmbedConcat_Duo",
            Variant::EmbedSubtractSingle => "EmbedSubtract_Single",
            Variant::CodeConcat => "CodeConcat",
            Variant::CodeConcatNoContext => "CodeConcat_NoContext",
            Variant::RawGitDiff => "RawGitDiff",
            Variant::EmbedSubtractDuo => "EmbedSubtract_Duo",
        }
    }

    /// Embed* variants encode before and after texts separately.
    pub fn is_two_stream(self) -> bool {
        matches!(
            self,
            Variant::EmbedConcatDuo | Variant::EmbedSubtractSingle | Variant::EmbedSubtractDuo
        )
    }

    /// Variants owning two independent encoders.
    pub fn is_dual_encoder(self) -> bool {
        matches!(self, Variant::EmbedConcatDuo | Variant::EmbedSubtractDuo)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Where a file change came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub repo_id: String,
    pub commit_hash: String,
    pub path: String,
}

/// The context-reserved pair for one file at context window `k`, plus the
/// context-free and raw-diff renderings needed by the other variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualChange {
    pub repo_id: String,
    pub commit_hash: String,
    pub path: String,
    pub k: usize,
    pub code_before: String,
    pub code_after: String,
    pub removed_loc: usize,
    pub added_loc: usize,
    pub label: Label,
    /// Removed lines only, hunks separated by a blank line.
    pub removed_code: String,
    /// Added lines only, hunks separated by a blank line.
    pub added_code: String,
    /// Per region: context before, added lines, removed lines, context after.
    pub raw_diff: String,
}

impl ContextualChange {
    pub fn loc(&self) -> usize {
        self.removed_loc + self.added_loc
    }
}

/// A merged context region of one file change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Indices into `FileChange::hunks`.
    pub hunks: Range<usize>,
    /// 0-based half-open line range in the old file.
    pub old: Range<usize>,
    /// 0-based half-open line range in the new file.
    pub new: Range<usize>,
}

fn old_span(fc: &FileChange, i: usize) -> Range<usize> {
    let h = &fc.hunks[i];
    let start = h.old_start - 1;
    start..start + h.removed_lines.len()
}

fn new_span(fc: &FileChange, i: usize) -> Range<usize> {
    let h = &fc.hunks[i];
    let start = h.new_start - 1;
    start..start + h.added_lines.len()
}

/// Merge hunks whose `k`-line context windows overlap or touch.
pub fn context_regions(fc: &FileChange, k: usize) -> Vec<Region> {
    let mut regions: Vec<Region> = Vec::new();
    for i in 0..fc.hunks.len() {
        let (old, new) = (old_span(fc, i), new_span(fc, i));
        if let Some(last) = regions.last_mut() {
            let prev = old_span(fc, last.hunks.end - 1);
            // Unchanged lines between the hunks; identical in both versions.
            let gap = old.start - prev.end;
            if gap <= 2 * k {
                last.hunks.end = i + 1;
                last.old.end = (old.end + k).min(fc.old_file_lines.len());
                last.new.end = (new.end + k).min(fc.new_file_lines.len());
                continue;
            }
        }
        regions.push(Region {
            hunks: i..i + 1,
            old: old.start.saturating_sub(k)..(old.end + k).min(fc.old_file_lines.len()),
            new: new.start.saturating_sub(k)..(new.end + k).min(fc.new_file_lines.len()),
        });
    }
    regions
}

/// Render non-empty line blocks separated by a blank line.
fn join_blocks<'a>(blocks: impl IntoIterator<Item = &'a [String]>) -> String {
    blocks
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|b| b.join("\n"))
        .collect::<Vec<_>>()
        .join(REGION_SEPARATOR)
}

fn render_raw_region(fc: &FileChange, region: &Region) -> Vec<String> {
    let old = &fc.old_file_lines;
    let mut lines: Vec<String> = Vec::new();
    let first = old_span(fc, region.hunks.start);
    lines.extend_from_slice(&old[region.old.start..first.start]);
    for i in region.hunks.clone() {
        let h = &fc.hunks[i];
        lines.extend_from_slice(&h.added_lines);
        lines.extend_from_slice(&h.removed_lines);
        let end = old_span(fc, i).end;
        let next = if i + 1 < region.hunks.end {
            old_span(fc, i + 1).start
        } else {
            region.old.end
        };
        lines.extend_from_slice(&old[end..next]);
    }
    lines
}

/// Build the context-reserved pair for one file change.
pub fn build_contextual_change(
    fc: &FileChange,
    k: usize,
    label: Label,
    provenance: Provenance,
) -> ContextualChange {
    let regions = context_regions(fc, k);
    let code_before = join_blocks(regions.iter().map(|r| &fc.old_file_lines[r.old.clone()]));
    let code_after = join_blocks(regions.iter().map(|r| &fc.new_file_lines[r.new.clone()]));
    let removed_code = join_blocks(fc.hunks.iter().map(|h| &h.removed_lines[..]));
    let added_code = join_blocks(fc.hunks.iter().map(|h| &h.added_lines[..]));
    let raw: Vec<Vec<String>> = regions.iter().map(|r| render_raw_region(fc, r)).collect();
    let raw_diff = join_blocks(raw.iter().map(Vec::as_slice));
    ContextualChange {
        repo_id: provenance.repo_id,
        commit_hash: provenance.commit_hash,
        path: provenance.path,
        k,
        code_before,
        code_after,
        removed_loc: fc.removed_loc,
        added_loc: fc.added_loc,
        label,
        removed_code,
        added_code,
        raw_diff,
    }
}

/// One contextual change per file; every file inherits the commit label.
pub fn build_commit_changes(commit: &CommitRecord, k: usize) -> Vec<ContextualChange> {
    commit
        .files
        .iter()
        .map(|fc| {
            build_contextual_change(
                fc,
                k,
                commit.label,
                Provenance {
                    repo_id: commit.repo_id.clone(),
                    commit_hash: commit.commit_hash.clone(),
                    path: fc.path.clone(),
                },
            )
        })
        .collect()
}

/// Raw text input of one variant for one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantInput {
    pub variant: Variant,
    /// Two segments (before, after) for Embed* variants, one otherwise.
    pub texts: Vec<String>,
    /// Byte offset of [`SEP_MARKER`] in the single segment, for the
    /// concatenating variants.
    pub sep_at: Option<usize>,
}

impl VariantInput {
    /// The two halves around the separator, if this input has one.
    pub fn sep_halves(&self) -> Option<(&str, &str)> {
        let at = self.sep_at?;
        let text = &self.texts[0];
        Some((&text[..at], &text[at + SEP_MARKER.len()..]))
    }
}

fn with_sep(variant: Variant, a: &str, b: &str) -> VariantInput {
    VariantInput {
        variant,
        texts: vec![format!("{a}{SEP_MARKER}{b}")],
        sep_at: Some(a.len()),
    }
}

/// Render the raw input of `variant` for a built change.
pub fn render_variant_input(cc: &ContextualChange, variant: Variant) -> VariantInput {
    match variant {
        Variant::EmbedSubtractDuo | Variant::EmbedSubtractSingle | Variant::EmbedConcatDuo => {
            VariantInput {
                variant,
                texts: vec![cc.code_before.clone(), cc.code_after.clone()],
                sep_at: None,
            }
        }
        Variant::CodeConcat => with_sep(variant, &cc.code_before, &cc.code_after),
        Variant::CodeConcatNoContext => with_sep(variant, &cc.removed_code, &cc.added_code),
        Variant::RawGitDiff => VariantInput {
            variant,
            texts: vec![cc.raw_diff.clone()],
            sep_at: None,
        },
    }
}
