//! Stage-2 patch matching and re-ordering of a stage-1 result list.
//!
//! Every query patch is compared with every document patch; the best match
//! per query patch is kept and those maxima are averaged. The score is
//! directional: it averages over the *query's* patches, so
//! `local_score(a, b)` and `local_score(b, a)` generally differ.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::{extract_patches, FeatureMap, PatchSet};
use crate::fusion::{fuse, FusionModel};
use crate::linalg;
use crate::search::{rank_order, RankedEntry, RankedList};
use crate::store::Manifest;

pub fn local_score(query: &PatchSet, doc: &PatchSet) -> Result<f32> {
    if query.is_empty() || doc.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    if query.channels() != doc.channels() {
        return Err(Error::DimensionMismatch {
            expected: query.channels(),
            actual: doc.channels(),
        });
    }
    let mut total = 0.0f64;
    for q in query.patches() {
        let best = doc
            .patches()
            .map(|d| linalg::dot(q, d))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(((total / query.len() as f64) as f32).clamp(-1.0, 1.0))
}

/// Supplies document feature maps on demand.
pub trait MapSource: Sync {
    fn feature_map(&self, id: &str) -> Result<FeatureMap>;
}

impl MapSource for HashMap<String, FeatureMap> {
    fn feature_map(&self, id: &str) -> Result<FeatureMap> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::MissingFeatureMap(id.to_string()))
    }
}

/// Reads maps from the files a manifest points at.
pub struct ManifestSource<'a> {
    manifest: &'a Manifest,
    by_id: HashMap<&'a str, &'a crate::store::ManifestEntry>,
}

impl<'a> ManifestSource<'a> {
    pub fn new(manifest: &'a Manifest) -> Self {
        ManifestSource {
            manifest,
            by_id: manifest.by_id(),
        }
    }
}

impl MapSource for ManifestSource<'_> {
    fn feature_map(&self, id: &str) -> Result<FeatureMap> {
        let entry = self
            .by_id
            .get(id)
            .ok_or_else(|| Error::MissingFeatureMap(id.to_string()))?;
        self.manifest.read_map(entry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub doc_id: String,
    pub global_score: f32,
    pub local_score: f32,
    pub final_score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankedList {
    pub query_id: String,
    pub entries: Vec<ScoredPair>,
    pub k_limit: usize,
}

impl RerankedList {
    pub fn to_ranked_list(&self) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| RankedEntry {
                    doc_id: e.doc_id.clone(),
                    score: e.final_score,
                })
                .collect(),
            k_limit: self.k_limit,
        }
    }
}

/// Re-orders `initial` by the fused global and local score.
///
/// Candidate maps are fetched from `source` one at a time. A candidate with a
/// zero-norm patch gets a local score of 0; a zero patch in the query map is an
/// error.
pub fn rerank(
    query_id: &str,
    query_map: &FeatureMap,
    initial: &RankedList,
    source: &dyn MapSource,
    fusion: &FusionModel,
) -> Result<RerankedList> {
    let query = extract_patches(query_map).map_err(|e| e.for_document(query_id))?;
    let scored: Vec<Result<ScoredPair>> = initial
        .entries
        .par_iter()
        .map(|entry| {
            let map = source.feature_map(&entry.doc_id)?;
            let local = match extract_patches(&map) {
                Ok(doc) => local_score(&query, &doc).map_err(|e| e.for_document(&entry.doc_id))?,
                Err(Error::ZeroPatch(_)) => 0.0,
                Err(e) => return Err(e.for_document(&entry.doc_id)),
            };
            Ok(ScoredPair {
                doc_id: entry.doc_id.clone(),
                global_score: entry.score,
                local_score: local,
                final_score: fuse(entry.score, local, fusion),
            })
        })
        .collect();
    let mut entries = scored.into_iter().collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| rank_order(a.final_score, &a.doc_id, b.final_score, &b.doc_id));
    Ok(RerankedList {
        query_id: query_id.to_string(),
        entries,
        k_limit: initial.k_limit,
    })
}
