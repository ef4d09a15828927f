//! Line-level diffing between two versions of a file.

use similar::{capture_diff_slices, Algorithm, DiffOp};

use super::Hunk;

/// Split raw file text into lines on `\n` only.
///
/// Carriage returns and other whitespace are kept verbatim. A trailing
/// newline does not produce an extra empty line.
pub fn split_lines(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').map(str::to_owned).collect()
}

/// Compute the hunks turning `old` into `new`.
///
/// A hunk is a maximal run of non-equal edit operations of a shortest edit
/// script, so two hunks are always separated by at least one unchanged line.
/// For a pure insertion `old_start` is the 1-based old line the new lines are
/// inserted before (`old.len() + 1` when appending); `new_start` follows the
/// same convention for pure deletions.
pub fn diff_lines(old: &[String], new: &[String]) -> Vec<Hunk> {
    let ops = capture_diff_slices(Algorithm::Myers, old, new);
    let mut hunks = Vec::new();
    let mut current: Option<Hunk> = None;
    for op in ops {
        if let DiffOp::Equal { .. } = op {
            if let Some(h) = current.take() {
                hunks.push(h);
            }
            continue;
        }
        let (_, old_range, new_range) = op.as_tag_tuple();
        let hunk = current.get_or_insert_with(|| Hunk {
            old_start: old_range.start + 1,
            removed_lines: Vec::new(),
            new_start: new_range.start + 1,
            added_lines: Vec::new(),
        });
        hunk.removed_lines.extend_from_slice(&old[old_range]);
        hunk.added_lines.extend_from_slice(&new[new_range]);
    }
    if let Some(h) = current {
        hunks.push(h);
    }
    hunks
}

/// Apply `hunks` to `old`, reproducing the new version of the file.
///
/// Returns `None` when the hunks do not fit `old` (out of bounds, overlapping
/// or removed lines that do not match).
pub fn apply_hunks(old: &[String], hunks: &[Hunk]) -> Option<Vec<String>> {
    let mut out = Vec::with_capacity(old.len());
    let mut cursor = 0usize;
    for h in hunks {
        let start = h.old_start.checked_sub(1)?;
        if start < cursor || start + h.removed_lines.len() > old.len() {
            return None;
        }
        out.extend_from_slice(&old[cursor..start]);
        if old[start..start + h.removed_lines.len()] != h.removed_lines[..] {
            return None;
        }
        out.extend_from_slice(&h.added_lines);
        cursor = start + h.removed_lines.len();
    }
    out.extend_from_slice(&old[cursor..]);
    Some(out)
}
