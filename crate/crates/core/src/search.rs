//! Stage-1 exhaustive cosine search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::GlobalDescriptor;
use crate::linalg;
use crate::store::DescriptorStore;

/// Default result list length.
pub const DEFAULT_K: usize = 100;

/// Rows scanned per parallel task.
const BLOCK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f32,
}

/// Results for one query, best first. Ties on score are ordered by ascending
/// document id, so every list has a single valid order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    pub k_limit: usize,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The ranking order: higher score first, then ascending id.
pub fn rank_order(score_a: f32, id_a: &str, score_b: f32, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(unit_cosine(a, b))
}

#[inline]
pub(crate) fn unit_cosine(a: &[f32], b: &[f32]) -> f32 {
    (linalg::dot(a, b) as f32).clamp(-1.0, 1.0)
}

/// Heap element ordered so that the heap's maximum is the worst candidate.
struct Candidate<'a> {
    score: f32,
    id: &'a str,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.score, self.id, other.score, other.id)
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

fn scan_block<'a>(
    query: &[f32],
    store: &'a DescriptorStore,
    rows: std::ops::Range<usize>,
    k: usize,
) -> Vec<Candidate<'a>> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for i in rows {
        let candidate = Candidate {
            score: unit_cosine(query, store.row(i)),
            id: &store.ids()[i],
        };
        if heap.len() < k {
            heap.push(candidate);
        } else if let Some(worst) = heap.peek() {
            if candidate < *worst {
                heap.pop();
                heap.push(candidate);
            }
        }
    }
    heap.into_vec()
}

fn check(query: &GlobalDescriptor, store: &DescriptorStore, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if !query.normalized {
        return Err(Error::UnnormalizedQuery);
    }
    if query.dim() != store.channels() {
        return Err(Error::DimensionMismatch {
            expected: store.channels(),
            actual: query.dim(),
        });
    }
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(())
}

fn finish(query: &GlobalDescriptor, mut candidates: Vec<Candidate<'_>>, k: usize) -> RankedList {
    candidates.sort_unstable();
    candidates.truncate(k);
    RankedList {
        query_id: query.id.clone(),
        entries: candidates
            .into_iter()
            .map(|c| RankedEntry {
                doc_id: c.id.to_string(),
                score: c.score,
            })
            .collect(),
        k_limit: k,
    }
}

/// The `k` store documents most similar to `query`.
///
/// Rows are scanned in parallel blocks, each keeping its own bounded heap; the
/// per-block survivors are merged under the total ranking order, so the result
/// does not depend on how the scan was partitioned.
pub fn top_k(query: &GlobalDescriptor, store: &DescriptorStore, k: usize) -> Result<RankedList> {
    check(query, store, k)?;
    let n = store.len();
    let candidates: Vec<Candidate<'_>> = (0..n.div_ceil(BLOCK_ROWS))
        .into_par_iter()
        .flat_map_iter(|b| {
            let rows = b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n);
            scan_block(&query.vector, store, rows, k)
        })
        .collect();
    Ok(finish(query, candidates, k))
}

/// Single-threaded [`top_k`].
pub fn top_k_serial(query: &GlobalDescriptor, store: &DescriptorStore, k: usize) -> Result<RankedList> {
    check(query, store, k)?;
    let candidates = scan_block(&query.vector, store, 0..store.len(), k);
    Ok(finish(query, candidates, k))
}
