use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

/// Identity of one cache entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntryId {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: EntryId,
    pub score: f32,
}

/// Total preference order: higher score, then more recent position, then
/// lower layer, then lower head.
pub fn preference(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.id.position.cmp(&a.id.position))
        .then(a.id.layer.cmp(&b.id.layer))
        .then(a.id.head.cmp(&b.id.head))
}

/// Indices (ascending) of the `keep` most preferred candidates.
pub fn select_retained(entries: &[Candidate], keep: usize) -> Result<Vec<usize>> {
    if keep > entries.len() {
        return Err(Error::InvalidInput(format!(
            "cannot keep {keep} of {} entries",
            entries.len()
        )));
    }
    if entries.iter().any(|c| c.score.is_nan()) {
        return Err(Error::Numeric("NaN importance score".into()));
    }
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    if keep == 0 {
        return Ok(Vec::new());
    }
    if keep < idx.len() {
        idx.select_nth_unstable_by(keep - 1, |&a, &b| preference(&entries[a], &entries[b]));
        idx.truncate(keep);
    }
    idx.sort_unstable();
    Ok(idx)
}
