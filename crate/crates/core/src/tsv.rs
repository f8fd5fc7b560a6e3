//! Ranked-list TSV exchanged between pipeline stages.
//!
//! Each line is `query_id \t rank \t doc_id \t score`, with re-ranked output
//! appending `\t global_score \t local_score \t final_score`. Ranks are
//! 1-based and a query's lines are contiguous.

use crate::error::{Error, Result};
use crate::rerank::RerankedList;
use crate::search::{RankedEntry, RankedList};

pub fn format_ranked(lists: &[RankedList]) -> String {
    let mut out = String::new();
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", list.query_id, i + 1, e.doc_id, e.score));
        }
    }
    out
}

pub fn format_reranked(lists: &[RerankedList]) -> String {
    let mut out = String::new();
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                list.query_id,
                i + 1,
                e.doc_id,
                e.final_score,
                e.global_score,
                e.local_score,
                e.final_score
            ));
        }
    }
    out
}

fn malformed(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::Malformed {
        what: "ranked list",
        detail: format!("line {line}: {detail}"),
    }
}

/// Parses ranked-list TSV; every list gets `k_limit`.
pub fn parse_ranked(text: &str, k_limit: usize) -> Result<Vec<RankedList>> {
    let mut lists: Vec<RankedList> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 && fields.len() != 7 {
            return Err(malformed(lineno, "expected 4 or 7 tab-separated fields"));
        }
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad rank {:?}", fields[1])))?;
        let score: f32 = fields[3]
            .parse()
            .ok()
            .filter(|s: &f32| s.is_finite())
            .ok_or_else(|| malformed(lineno, format!("bad score {:?}", fields[3])))?;
        let query = fields[0];
        let continues = lists.last().is_some_and(|l| l.query_id == query);
        if !continues {
            if lists.iter().any(|l| l.query_id == query) {
                return Err(malformed(lineno, format!("query {query:?} is not contiguous")));
            }
            lists.push(RankedList {
                query_id: query.to_string(),
                entries: Vec::new(),
                k_limit,
            });
        }
        let list = lists.last_mut().unwrap();
        if rank != list.entries.len() + 1 {
            return Err(malformed(
                lineno,
                format!("expected rank {}, found {rank}", list.entries.len() + 1),
            ));
        }
        if list.entries.iter().any(|e| e.doc_id == fields[2]) {
            return Err(malformed(lineno, format!("duplicate document {:?}", fields[2])));
        }
        list.entries.push(RankedEntry {
            doc_id: fields[2].to_string(),
            score,
        });
    }
    Ok(lists)
}
