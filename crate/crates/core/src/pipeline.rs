//! Manifest-driven glue between the stages: batch search, batch re-ranking,
//! and assembling training data for the head and fusion trainers.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::{average_pool, extract_patches, FeatureMap};
use crate::fusion::{FusionModel, FusionSample};
use crate::head::{ProjectionHead, TrainSample};
use crate::rerank::{local_score, rerank, ManifestSource, MapSource, RerankedList};
use crate::search::{top_k, RankedList};
use crate::store::{stage_one_descriptor, DescriptorStore, Manifest, ManifestEntry, Split};

/// Stage-1 results for every `query` entry of the manifest, in manifest order.
pub fn search_queries(
    manifest: &Manifest,
    store: &DescriptorStore,
    head: Option<&ProjectionHead>,
    k: usize,
) -> Result<Vec<RankedList>> {
    let queries: Vec<&ManifestEntry> = manifest.split(Split::Query).collect();
    queries
        .par_iter()
        .map(|entry| {
            let map = manifest.read_map(entry)?;
            let query = stage_one_descriptor(&map, head).map_err(|e| e.for_document(&entry.id))?;
            top_k(&query, store, k)
        })
        .collect()
}

/// Maps of store documents, read through the manifest.
struct StoreSource<'a> {
    inner: ManifestSource<'a>,
    store: &'a DescriptorStore,
}

impl MapSource for StoreSource<'_> {
    fn feature_map(&self, id: &str) -> Result<FeatureMap> {
        if self.store.index_of(id).is_none() {
            return Err(Error::MissingFeatureMap(id.to_string()));
        }
        self.inner.feature_map(id)
    }
}

/// Re-ranks stage-1 lists; query and document maps come from the manifest.
pub fn rerank_lists(
    manifest: &Manifest,
    store: &DescriptorStore,
    lists: &[RankedList],
    fusion: &FusionModel,
) -> Result<Vec<RerankedList>> {
    let by_id = manifest.by_id();
    let source = StoreSource {
        inner: ManifestSource::new(manifest),
        store,
    };
    lists
        .iter()
        .map(|list| {
            let entry = by_id
                .get(list.query_id.as_str())
                .ok_or_else(|| Error::UnknownQuery(list.query_id.clone()))?;
            let query_map = manifest.read_map(entry)?;
            rerank(&list.query_id, &query_map, list, &source, fusion)
        })
        .collect()
}

/// Pooled descriptors of a split, labelled; all-zero descriptors are dropped.
pub fn pooled_samples(manifest: &Manifest, split: Split) -> Result<Vec<TrainSample>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    let samples: Vec<Option<TrainSample>> = entries
        .par_iter()
        .map(|entry| {
            let pooled = average_pool(&manifest.read_map(entry)?);
            Ok(pooled.vector.iter().any(|v| *v != 0.0).then(|| TrainSample {
                label: entry.label.clone(),
                vector: pooled.vector,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(samples.into_iter().flatten().collect())
}

/// Fusion training samples harvested from the `train` split.
///
/// Every train document queries the other train documents; its top `k`
/// neighbours contribute one sample each, relevant when the labels agree.
pub fn harvest_fusion_samples(
    manifest: &Manifest,
    head: Option<&ProjectionHead>,
    k: usize,
) -> Result<Vec<FusionSample>> {
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    let maps: Vec<FeatureMap> = entries
        .par_iter()
        .map(|e| manifest.read_map(e))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut usable = Vec::new();
    for (entry, map) in entries.iter().zip(&maps) {
        match stage_one_descriptor(map, head) {
            Ok(d) => {
                rows.push((d, entry.label.clone()));
                usable.push(map);
            }
            Err(Error::ZeroVector) => {}
            Err(e) => return Err(e.for_document(&entry.id)),
        }
    }
    let Some(channels) = rows.first().map(|(d, _)| d.dim()) else {
        return Ok(Vec::new());
    };
    let queries: Vec<_> = rows.iter().map(|(d, _)| d.clone()).collect();
    let store = DescriptorStore::from_descriptors(channels, rows)?;
    let patches: HashMap<&str, Option<crate::feature::PatchSet>> =
        usable.iter().map(|m| (m.id(), extract_patches(m).ok())).collect();

    let per_query: Vec<Vec<FusionSample>> = queries
        .par_iter()
        .map(|q| {
            let list = top_k(q, &store, k + 1)?;
            let q_label = store.label_of(&q.id);
            let q_patches = &patches[q.id.as_str()];
            let mut out = Vec::with_capacity(k);
            for e in list.entries.iter().filter(|e| e.doc_id != q.id).take(k) {
                let local = match (q_patches, &patches[e.doc_id.as_str()]) {
                    (Some(a), Some(b)) => local_score(a, b)?,
                    _ => 0.0,
                };
                out.push(FusionSample {
                    global_score: e.score,
                    local_score: local,
                    relevant: store.label_of(&e.doc_id) == q_label,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}
