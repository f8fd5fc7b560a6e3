//! mAP@k evaluation.
//!
//! Average precision at `k` is normalized by `min(|relevant|, k)`, the
//! convention of the Google Landmark Retrieval challenge:
//!
//! ```text
//! AP@k = 1 / min(m, k) * sum_{i <= k} rel(i) * precision(i)
//! ```

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::search::RankedList;
use crate::store::{Manifest, Split};

pub fn average_precision_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (i, doc) in ranked.iter().take(k).enumerate() {
        if relevant.contains(doc) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: f64,
    pub relevant_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub query_count: usize,
    pub map_at_k: f64,
    pub k: usize,
    pub per_query: Vec<QueryAp>,
    /// Queries skipped because no index document shares their label.
    pub excluded: Vec<String>,
}

/// Scores each list against the manifest's index-split labels.
pub fn evaluate(lists: &[RankedList], manifest: &Manifest) -> Result<EvalReport> {
    if lists.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let by_id = manifest.by_id();
    let mut relevant_by_label: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in manifest.split(Split::Index) {
        relevant_by_label
            .entry(e.label.as_str())
            .or_default()
            .insert(e.id.as_str());
    }

    let mut per_query = Vec::with_capacity(lists.len());
    let mut excluded = Vec::new();
    for list in lists {
        let entry = by_id
            .get(list.query_id.as_str())
            .filter(|e| e.split == Split::Query)
            .ok_or_else(|| Error::UnknownQuery(list.query_id.clone()))?;
        let Some(relevant) = relevant_by_label.get(entry.label.as_str()) else {
            excluded.push(list.query_id.clone());
            continue;
        };
        let ranked: Vec<&str> = list.ids().collect();
        per_query.push(QueryAp {
            query_id: list.query_id.clone(),
            ap: average_precision_at_k(&ranked, relevant, list.k_limit)?,
            relevant_total: relevant.len(),
        });
    }
    if per_query.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let map_at_k = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        query_count: per_query.len(),
        map_at_k,
        k: lists[0].k_limit,
        per_query,
        excluded,
    })
}

impl EvalReport {
    /// One `query_id \t ap \t relevant_total` line per query, then a
    /// `# mAP@k` summary line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for q in &self.per_query {
            out.push_str(&format!("{}\t{}\t{}\n", q.query_id, q.ap, q.relevant_total));
        }
        out.push_str(&format!(
            "# mAP@{}\t{}\tqueries={}\texcluded={}\n",
            self.k,
            self.map_at_k,
            self.query_count,
            self.excluded.len()
        ));
        out
    }

    /// JSON Lines: one object per query followed by one summary object.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            summary: bool,
            query_count: usize,
            k: usize,
            map_at_k: f64,
            excluded: &'a [String],
        }
        let mut out = String::new();
        for q in &self.per_query {
            out.push_str(&serde_json::to_string(q).expect("serializable"));
            out.push('\n');
        }
        let summary = Summary {
            summary: true,
            query_count: self.query_count,
            k: self.k,
            map_at_k: self.map_at_k,
            excluded: &self.excluded,
        };
        out.push_str(&serde_json::to_string(&summary).expect("serializable"));
        out.push('\n');
        out
    }
}
