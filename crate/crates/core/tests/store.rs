#![allow(clippy::needless_range_loop)]

mod common;

use std::path::PathBuf;

use common::*;
use patchrank::feature::{average_pool, l2_normalize};
use patchrank::store::{sha256_hex, write_manifest};
use patchrank::{
    build_store, load_manifest, write_feature_file, DescriptorStore, Error, FeatureMap, ManifestEntry, ProjectionHead,
    Split,
};

fn write_docs(dir: &std::path::Path, maps: &[(FeatureMap, &str, Split)], with_hash: bool) -> PathBuf {
    std::fs::create_dir_all(dir.join("f")).unwrap();
    let entries: Vec<ManifestEntry> = maps
        .iter()
        .map(|(m, label, split)| {
            let rel = PathBuf::from("f").join(format!("{}.prfm", m.id()));
            write_feature_file(m, dir.join(&rel)).unwrap();
            let sha = if with_hash {
                sha256_hex(&std::fs::read(dir.join(&rel)).unwrap())
            } else {
                String::new()
            };
            ManifestEntry {
                id: m.id().into(),
                label: label.to_string(),
                split: *split,
                feature_path: rel,
                sha256: sha,
            }
        })
        .collect();
    let path = dir.join("manifest.tsv");
    write_manifest(&path, &entries).unwrap();
    path
}

fn random_map(seed: u64, id: &str) -> FeatureMap {
    let mut r = rng(seed);
    FeatureMap::new(id, 3, 2, 5, gaussian(&mut r, 30)).unwrap()
}

#[test]
fn builds_rows_from_pooled_maps() {
    let dir = tempfile::tempdir().unwrap();
    let maps: Vec<FeatureMap> = (0..3).map(|i| random_map(i, &format!("doc{i}"))).collect();
    let docs: Vec<_> = maps.iter().map(|m| (m.clone(), "L", Split::Index)).collect();
    let manifest = load_manifest(write_docs(dir.path(), &docs, true)).unwrap();
    let out = build_store(&manifest, None).unwrap();
    assert!(out.skipped.is_empty());
    assert_eq!(out.store.len(), 3);
    assert_eq!(out.store.ids(), ["doc0", "doc1", "doc2"]);
    for (i, m) in maps.iter().enumerate() {
        // mean over positions in f64, then normalize
        let mut mean = vec![0.0f64; 5];
        for p in 0..6 {
            for c in 0..5 {
                mean[c] += f64::from(m.data()[p * 5 + c]) / 6.0;
            }
        }
        let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in out.store.row(i).iter().zip(&mean) {
            assert!((f64::from(*a) - b / n).abs() <= 1e-6);
        }
        let direct = l2_normalize(&average_pool(m).vector).unwrap();
        assert_eq!(out.store.row(i), direct.as_slice());
    }
}

#[test]
fn zero_map_is_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let zero = FeatureMap::new("blank", 3, 2, 5, vec![0.0; 30]).unwrap();
    let docs = vec![
        (random_map(1, "a"), "L", Split::Index),
        (zero, "L", Split::Index),
        (random_map(2, "b"), "M", Split::Index),
        (random_map(3, "q"), "L", Split::Query),
    ];
    let manifest = load_manifest(write_docs(dir.path(), &docs, false)).unwrap();
    let out = build_store(&manifest, None).unwrap();
    assert_eq!(out.store.ids(), ["a", "b"]);
    assert_eq!(out.store.labels(), ["L", "M"]);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].id, "blank");
}

#[test]
fn identity_head_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let docs: Vec<_> = (0..6)
        .map(|i| (random_map(10 + i, &format!("x{i}")), "L", Split::Index))
        .collect();
    let manifest = load_manifest(write_docs(dir.path(), &docs, true)).unwrap();
    let plain = build_store(&manifest, None).unwrap().store;
    let ident = build_store(&manifest, Some(&ProjectionHead::identity(5)))
        .unwrap()
        .store;
    for i in 0..plain.len() {
        for (a, b) in plain.row(i).iter().zip(ident.row(i)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
    assert_eq!(plain.encode(), build_store(&manifest, None).unwrap().store.encode());
    let path = dir.path().join("s.prst");
    plain.save(&path).unwrap();
    assert_eq!(DescriptorStore::load(&path).unwrap().encode(), plain.encode());
}

#[test]
fn projected_store_has_head_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let docs: Vec<_> = (0..3)
        .map(|i| (random_map(20 + i, &format!("y{i}")), "L", Split::Index))
        .collect();
    let manifest = load_manifest(write_docs(dir.path(), &docs, true)).unwrap();
    let store = build_store(&manifest, Some(&ProjectionHead::random(5, 3, 1)))
        .unwrap()
        .store;
    assert_eq!(store.channels(), 3);
    assert!(matches!(
        build_store(&manifest, Some(&ProjectionHead::random(4, 3, 1))),
        Err(Error::Document { .. })
    ));
}

#[test]
fn checksum_mismatch_names_the_document() {
    let dir = tempfile::tempdir().unwrap();
    let docs = vec![
        (random_map(1, "a"), "L", Split::Index),
        (random_map(2, "b"), "L", Split::Index),
    ];
    let path = write_docs(dir.path(), &docs, true);
    write_feature_file(&random_map(99, "b"), dir.path().join("f/b.prfm")).unwrap();
    let err = build_store(&load_manifest(path).unwrap(), None).unwrap_err();
    match err {
        Error::Document { id, source } => {
            assert_eq!(id, "b");
            assert!(matches!(*source, Error::ChecksumMismatch { .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let docs = vec![(random_map(1, "a"), "L", Split::Index)];
    let path = write_docs(dir.path(), &docs, false);
    std::fs::remove_file(dir.path().join("f/a.prfm")).unwrap();
    let err = build_store(&load_manifest(path).unwrap(), None).unwrap_err();
    assert!(matches!(err.root(), Error::Io { .. }));
}
