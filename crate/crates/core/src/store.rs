//! On-disk feature files, the dataset manifest, and the descriptor store.
//!
//! `PRFM` feature file layout (all little-endian):
//!
//! | bytes        | field                               |
//! |--------------|-------------------------------------|
//! | 4            | magic `PRFM`                        |
//! | 2            | version, u16 = 1                    |
//! | 12           | H, W, C as u32                      |
//! | 4 * H * W * C| f32 payload in `(h, w, c)` order    |
//!
//! `PRST` store file layout: magic, u16 version, u32 row count N, u32 channel
//! count C, then N records of (u32 length + UTF-8 id, u32 length + UTF-8
//! label), then the N x C row-major f32 matrix.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::feature::{average_pool, FeatureMap, GlobalDescriptor};
use crate::head::ProjectionHead;
use crate::linalg;

pub const FEATURE_MAGIC: &[u8; 4] = b"PRFM";
pub const FEATURE_VERSION: u16 = 1;
pub const STORE_MAGIC: &[u8; 4] = b"PRST";
pub const STORE_VERSION: u16 = 1;

/// Rows of a store must have unit norm within this tolerance.
pub const ROW_NORM_TOLERANCE: f64 = 1e-4;

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut w = Writer::with_header(FEATURE_MAGIC, FEATURE_VERSION, 12 + 4 * map.data().len());
    w.u32(map.height() as u32);
    w.u32(map.width() as u32);
    w.u32(map.channels() as u32);
    w.f32s(map.data());
    w.finish()
}

pub fn decode_feature_map(id: impl Into<String>, bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::open("feature file", bytes, FEATURE_MAGIC, FEATURE_VERSION)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or(Error::InvalidShape {
            height: h,
            width: w,
            channels: c,
            len: 0,
        })?;
    let data = r.finite_f32s(count, "payload")?;
    r.finish()?;
    FeatureMap::new(id, h, w, c, data)
}

pub fn write_feature_file(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &encode_feature_map(map))
}

/// Reads a `PRFM` file. The map's id is the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = binio::read_file(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_map(id, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Index,
    Query,
    Train,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Index => "index",
            Split::Query => "query",
            Split::Train => "train",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "index" => Ok(Split::Index),
            "query" => Ok(Split::Query),
            "train" => Ok(Split::Train),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub feature_path: PathBuf,
    /// Lower-case hex SHA-256 of the feature file, or empty to skip verification.
    pub sha256: String,
}

/// Parses manifest text: one `id \t label \t split \t feature_path \t sha256`
/// record per line, `#` comments and blank lines ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 || fields[0].is_empty() || fields[3].is_empty() {
            return Err(Error::MalformedLine(lineno));
        }
        let split = fields[2].parse().map_err(|_| Error::BadSplit(lineno))?;
        if !seen.insert(fields[0]) {
            return Err(Error::DuplicateId(fields[0].to_string()));
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            label: fields[1].to_string(),
            split,
            feature_path: PathBuf::from(fields[3]),
            sha256: fields[4].to_ascii_lowercase(),
        });
    }
    Ok(entries)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.label,
            e.split,
            e.feature_path.display(),
            e.sha256
        ));
    }
    out
}

/// A parsed manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            root: root.into(),
            entries,
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.feature_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn by_id(&self) -> HashMap<&str, &ManifestEntry> {
        self.entries.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    /// Reads an entry's feature file, verifying its checksum when one is recorded.
    pub fn read_map(&self, entry: &ManifestEntry) -> Result<FeatureMap> {
        let path = self.resolve(entry);
        let inner = || -> Result<FeatureMap> {
            let bytes = binio::read_file(&path)?;
            if !entry.sha256.is_empty() {
                let actual = sha256_hex(&bytes);
                if actual != entry.sha256 {
                    return Err(Error::ChecksumMismatch {
                        path: path.clone(),
                        expected: entry.sha256.clone(),
                        actual,
                    });
                }
            }
            decode_feature_map(entry.id.clone(), &bytes)
        };
        inner().map_err(|e| e.for_document(&entry.id))
    }
}

/// Loads a manifest file; relative feature paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest::new(root, parse_manifest(&text)?))
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    binio::write_file(path.as_ref(), format_manifest(entries).as_bytes())
}

/// Unit-norm global descriptors of the index collection, one row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStore {
    channels: usize,
    ids: Vec<String>,
    labels: Vec<String>,
    matrix: Vec<f32>,
}

impl DescriptorStore {
    pub fn from_rows(channels: usize, ids: Vec<String>, labels: Vec<String>, matrix: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidConfig("store channel count must be positive".into()));
        }
        if labels.len() != ids.len() || matrix.len() != ids.len() * channels {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * channels,
                actual: matrix.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (row, v) in matrix.chunks_exact(channels).enumerate() {
            let norm = linalg::norm(v);
            if !((norm - 1.0).abs() <= ROW_NORM_TOLERANCE) {
                return Err(Error::NonUnitRow { row, norm });
            }
        }
        Ok(DescriptorStore {
            channels,
            ids,
            labels,
            matrix,
        })
    }

    /// Builds a store from already-normalized descriptors and their labels.
    pub fn from_descriptors(channels: usize, rows: Vec<(GlobalDescriptor, String)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        let mut matrix = Vec::with_capacity(rows.len() * channels);
        for (d, label) in rows {
            if d.dim() != channels {
                return Err(Error::DimensionMismatch {
                    expected: channels,
                    actual: d.dim(),
                });
            }
            ids.push(d.id);
            labels.push(label);
            matrix.extend_from_slice(&d.vector);
        }
        Self::from_rows(channels, ids, labels, matrix)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.channels..(i + 1) * self.channels]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.index_of(id).map(|i| self.labels[i].as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_header(STORE_MAGIC, STORE_VERSION, 8 + self.matrix.len() * 4);
        w.u32(self.ids.len() as u32);
        w.u32(self.channels as u32);
        for (id, label) in self.ids.iter().zip(&self.labels) {
            w.str(id);
            w.str(label);
        }
        w.f32s(&self.matrix);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("store file", bytes, STORE_MAGIC, STORE_VERSION)?;
        let n = r.u32("row count")? as usize;
        let c = r.u32("channel count")? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            ids.push(r.str("id")?);
            labels.push(r.str("label")?);
        }
        let matrix = r.finite_f32s(n.saturating_mul(c), "matrix")?;
        r.finish()?;
        Self::from_rows(c, ids, labels, matrix)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&binio::read_file(path.as_ref())?)
    }
}

/// A document left out of the store because its descriptor was degenerate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub store: DescriptorStore,
    pub skipped: Vec<Skipped>,
}

/// Pooled (and optionally projected) unit descriptor of one map.
pub fn stage_one_descriptor(map: &FeatureMap, head: Option<&ProjectionHead>) -> Result<GlobalDescriptor> {
    let pooled = average_pool(map);
    match head {
        Some(head) => head.project(&pooled),
        None => pooled.normalize(),
    }
}

/// Builds the store from the manifest's `index` entries, in manifest order.
///
/// Documents whose descriptor has zero norm are skipped and reported; any other
/// failure aborts with the offending id attached.
pub fn build_store(manifest: &Manifest, head: Option<&ProjectionHead>) -> Result<BuildOutcome> {
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Index).collect();
    let results: Vec<Result<Option<GlobalDescriptor>>> = entries
        .par_iter()
        .map(|entry| {
            let map = manifest.read_map(entry)?;
            match stage_one_descriptor(&map, head) {
                Ok(d) => Ok(Some(d)),
                Err(Error::ZeroVector) => Ok(None),
                Err(e) => Err(e.for_document(&entry.id)),
            }
        })
        .collect();

    let channels = head
        .map(ProjectionHead::out_dim)
        .or_else(|| {
            results
                .iter()
                .find_map(|r| r.as_ref().ok().and_then(Option::as_ref).map(GlobalDescriptor::dim))
        })
        .unwrap_or(1);
    let mut rows = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for (entry, result) in entries.iter().zip(results) {
        match result? {
            Some(d) => {
                if d.dim() != channels {
                    return Err(Error::DimensionMismatch {
                        expected: channels,
                        actual: d.dim(),
                    }
                    .for_document(&entry.id));
                }
                rows.push((d, entry.label.clone()))
            }
            None => skipped.push(Skipped {
                id: entry.id.clone(),
                reason: Error::ZeroVector.to_string(),
            }),
        }
    }
    Ok(BuildOutcome {
        store: DescriptorStore::from_descriptors(channels, rows)?,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_map_file_bytes() {
        let map = FeatureMap::new("a", 1, 1, 1, vec![1.0]).unwrap();
        let bytes = encode_feature_map(&map);
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[..4], b"PRFM");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[18..], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn reference_shape_file_size() {
        let map = FeatureMap::new("a", 7, 7, 1280, vec![0.5; 62720]).unwrap();
        assert_eq!(encode_feature_map(&map).len(), 250_898);
    }

    #[test]
    fn decode_errors_name_the_field() {
        let map = FeatureMap::new("a", 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_feature_map(&map);

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_map("a", &bad), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_feature_map("a", &bad),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));

        assert!(matches!(
            decode_feature_map("a", &good[..good.len() - 1]),
            Err(Error::TruncatedFile { .. })
        ));

        let mut bad = good.clone();
        let off = 18 + 4 * 2;
        bad[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_map("a", &bad), Err(Error::NonFiniteValue(2))));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_feature_map("a", &long), Err(Error::Malformed { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.prfm");
        let map = FeatureMap::new("m", 2, 3, 2, (0..12).map(|i| i as f32 * -0.3).collect()).unwrap();
        write_feature_file(&map, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), map);
    }

    proptest! {
        #[test]
        fn feature_bytes_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..20, seed in any::<u64>()) {
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| {
                    let bits = (seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) as u32;
                    let v = f32::from_bits(bits);
                    if v.is_finite() { v } else { i as f32 }
                })
                .collect();
            let map = FeatureMap::new("x", h, w, c, data).unwrap();
            let back = decode_feature_map("x", &encode_feature_map(&map)).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                map.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!((back.height(), back.width(), back.channels()), (h, w, c));
        }
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\na\tL1\tindex\ta.prfm\t\nb\tL2\tquery\tb.prfm\tABCD\n";
        let entries = parse_manifest(text).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].id, "a");
        assert_eq!(entries[1].split, Split::Query);
        assert_eq!(entries[1].sha256, "abcd");
        assert_eq!(parse_manifest(&format_manifest(&entries)).unwrap(), entries);
    }

    #[test]
    fn manifest_errors() {
        assert!(matches!(
            parse_manifest("a\tL\tindex\ta\t\na\tL\tquery\tb\t\n"),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
        assert!(matches!(
            parse_manifest("#c\na\tL\ttest\ta\t\n"),
            Err(Error::BadSplit(2))
        ));
        assert!(matches!(parse_manifest("a\tL\tindex\n"), Err(Error::MalformedLine(1))));
        assert!(matches!(
            parse_manifest("a L index a.prfm x\n"),
            Err(Error::MalformedLine(1))
        ));
    }

    #[test]
    fn store_rejects_non_unit_rows() {
        let r = DescriptorStore::from_rows(2, vec!["a".into()], vec!["l".into()], vec![1.0, 1.0]);
        assert!(matches!(r, Err(Error::NonUnitRow { row: 0, .. })));
    }

    #[test]
    fn store_bytes_round_trip() {
        let store = DescriptorStore::from_rows(
            2,
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![1.0, 0.0, 0.6, 0.8],
        )
        .unwrap();
        assert_eq!(DescriptorStore::decode(&store.encode()).unwrap(), store);
        assert_eq!(store.label_of("b"), Some("y"));
    }
}
