mod common;

use std::collections::HashMap;

use common::*;
use patchrank::{extract_patches, local_score, rerank, FeatureMap, FusionModel, PatchSet, RankedEntry, RankedList};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_map(r: &mut rand_chacha::ChaCha8Rng, id: &str, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(id, h, w, c, gaussian(r, h * w * c)).unwrap()
}

fn patches_of(map: &FeatureMap) -> Vec<Vec<f32>> {
    map.data().chunks(map.channels()).map(unit).collect()
}

/// Candidates with random global scores, listed in stage-1 order.
fn candidates(r: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize) -> (RankedList, HashMap<String, FeatureMap>) {
    let mut maps = HashMap::new();
    let mut entries = Vec::new();
    for i in 0..n {
        let id = format!("c{:03}", i);
        maps.insert(id.clone(), random_map(r, &id, 3, 3, c));
        entries.push(RankedEntry {
            doc_id: id,
            score: r.random_range(-1.0f32..1.0),
        });
    }
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    (
        RankedList {
            query_id: "q".into(),
            entries,
            k_limit: 100,
        },
        maps,
    )
}

#[test]
fn mean_fusion_matches_brute_force_resort() {
    let mut r = rng(3);
    let query = random_map(&mut r, "q", 3, 3, 16);
    let (initial, maps) = candidates(&mut r, 100, 16);
    let out = rerank("q", &query, &initial, &maps, &FusionModel::linear(0.5).unwrap()).unwrap();

    let q_patches = patches_of(&query);
    let mut want: Vec<(String, f32)> = initial
        .entries
        .iter()
        .map(|e| {
            let local = naive_local_score(&q_patches, &patches_of(&maps[&e.doc_id]));
            (e.doc_id.clone(), ((f64::from(e.score) + local) / 2.0) as f32)
        })
        .collect();
    want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));

    assert_eq!(
        out.entries.iter().map(|e| e.doc_id.as_str()).collect::<Vec<_>>(),
        want.iter().map(|w| w.0.as_str()).collect::<Vec<_>>()
    );
    for (e, w) in out.entries.iter().zip(&want) {
        assert!((e.final_score - w.1).abs() < 1e-6);
    }
}

#[test]
fn global_only_fusion_keeps_stage_one_order() {
    let mut r = rng(4);
    let query = random_map(&mut r, "q", 2, 2, 8);
    let (initial, maps) = candidates(&mut r, 60, 8);
    let out = rerank("q", &query, &initial, &maps, &FusionModel::global_only()).unwrap();
    assert_eq!(out.to_ranked_list(), initial);
}

#[test]
fn patch_twin_overtakes_an_equal_global_score() {
    let mut r = rng(5);
    let query = random_map(&mut r, "q", 2, 2, 4);
    // A: the query's patches in another order. B: patches orthogonal to all of the query's.
    let mut positions: Vec<Vec<f32>> = query.data().chunks(4).map(<[f32]>::to_vec).collect();
    positions.reverse();
    let twin = FeatureMap::new("a", 2, 2, 4, positions.concat()).unwrap();
    let c = 8;
    let q8 = FeatureMap::new(
        "q",
        2,
        2,
        c,
        query
            .data()
            .chunks(4)
            .flat_map(|p| [p, &[0.0; 4][..]].concat())
            .collect(),
    )
    .unwrap();
    let twin8 = FeatureMap::new(
        "a",
        2,
        2,
        c,
        twin.data()
            .chunks(4)
            .flat_map(|p| [p, &[0.0; 4][..]].concat())
            .collect(),
    )
    .unwrap();
    let ortho = FeatureMap::new(
        "b",
        2,
        2,
        c,
        (0..4).flat_map(|_| [[0.0; 4], [0.5; 4]].concat()).collect(),
    )
    .unwrap();
    let maps: HashMap<String, FeatureMap> = [("a".to_string(), twin8), ("b".to_string(), ortho)].into();
    let initial = RankedList {
        query_id: "q".into(),
        entries: vec![
            RankedEntry {
                doc_id: "b".into(),
                score: 0.4,
            },
            RankedEntry {
                doc_id: "a".into(),
                score: 0.4,
            },
        ],
        k_limit: 2,
    };
    // same score: stage-1 order is by id, so put b first manually to force a swap
    let out = rerank("q", &q8, &initial, &maps, &FusionModel::linear(0.5).unwrap()).unwrap();
    assert_eq!(out.entries[0].doc_id, "a");
    assert!((out.entries[0].local_score - 1.0).abs() < 1e-6);
    assert!(out.entries[1].local_score.abs() < 1e-6);
}

#[test]
fn score_is_directional() {
    let q = PatchSet::from_vectors("q", &[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
    let d = PatchSet::from_vectors("d", &[vec![1.0f32, 0.0]]).unwrap();
    assert_eq!(local_score(&q, &d).unwrap(), 0.5);
    assert_eq!(local_score(&d, &q).unwrap(), 1.0);
}

fn arb_patches() -> impl Strategy<Value = (Vec<Vec<f32>>, u64)> {
    (1usize..12, 1usize..10, any::<u64>()).prop_map(|(n, c, seed)| {
        let mut r = rng(seed);
        let v = (0..n)
            .map(|_| {
                let mut p = gaussian(&mut r, c);
                p[0] += 0.1; // keep away from zero
                p
            })
            .collect();
        (v, seed)
    })
}

proptest! {
    #[test]
    fn self_match_is_one((vectors, _) in arb_patches()) {
        let a = PatchSet::from_vectors("a", &vectors).unwrap();
        prop_assert!((local_score(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn permutation_invariance((vectors, seed) in arb_patches(), (others, _) in arb_patches()) {
        let c = vectors[0].len();
        let doc: Vec<Vec<f32>> = others.iter().map(|o| o.iter().cycle().take(c).copied().collect()).collect();
        let q = PatchSet::from_vectors("q", &vectors).unwrap();
        let d = PatchSet::from_vectors("d", &doc).unwrap();
        let base = local_score(&q, &d).unwrap();

        let mut r = rng(seed ^ 1);
        let mut shuffled = doc.clone();
        shuffled.shuffle(&mut r);
        let d2 = PatchSet::from_vectors("d", &shuffled).unwrap();
        prop_assert_eq!(local_score(&q, &d2).unwrap(), base);

        let mut qs = vectors.clone();
        qs.shuffle(&mut r);
        let q2 = PatchSet::from_vectors("q", &qs).unwrap();
        prop_assert!((local_score(&q2, &d).unwrap() - base).abs() <= 1e-7);
    }

    #[test]
    fn appending_doc_patches((vectors, seed) in arb_patches()) {
        let c = vectors[0].len();
        let mut r = rng(seed ^ 2);
        let q = PatchSet::from_vectors("q", &vectors).unwrap();
        let mut doc: Vec<Vec<f32>> = (0..3).map(|_| { let mut p = gaussian(&mut r, c); p[0] += 0.1; p }).collect();
        let base = local_score(&q, &PatchSet::from_vectors("d", &doc).unwrap()).unwrap();

        let copy = doc[1].clone();
        doc.push(copy);
        prop_assert_eq!(local_score(&q, &PatchSet::from_vectors("d", &doc).unwrap()).unwrap(), base);

        let mut fresh = gaussian(&mut r, c);
        fresh[0] += 0.1;
        doc.push(fresh);
        prop_assert!(local_score(&q, &PatchSet::from_vectors("d", &doc).unwrap()).unwrap() >= base);
    }

    #[test]
    fn rerank_is_a_permutation(seed in any::<u64>(), alpha in 0.0f32..=1.0) {
        let mut r = rng(seed);
        let query = random_map(&mut r, "q", 2, 3, 5);
        let (initial, maps) = candidates(&mut r, 20, 5);
        let out = rerank("q", &query, &initial, &maps, &FusionModel::linear(alpha).unwrap()).unwrap();
        let mut a: Vec<&str> = out.entries.iter().map(|e| e.doc_id.as_str()).collect();
        let mut b: Vec<&str> = initial.ids().collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert!(out.entries.iter().all(|e| e.local_score <= 1.0 + 1e-6));
    }
}

#[test]
fn extracted_patches_feed_local_score() {
    let mut r = rng(6);
    let m = random_map(&mut r, "m", 7, 7, 32);
    let p = extract_patches(&m).unwrap();
    assert_eq!(p.len(), 49);
    assert!((local_score(&p, &p).unwrap() - 1.0).abs() < 1e-6);
}
