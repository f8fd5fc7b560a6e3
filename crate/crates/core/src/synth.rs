//! Synthetic feature-map datasets for exercising the pipeline without a CNN.
//!
//! Each class has a prototype map. A prototype's positions are a group mean
//! plus a class-specific deviation whose spatial mean is zero, so the pooled
//! descriptor of a prototype is exactly its group mean. Classes in the same
//! group (`group_size > 1`) are distractors for one another: identical pooled
//! descriptors, unrelated patches. Members are the prototype, optionally with
//! positions shuffled, plus Gaussian noise.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::store::{encode_feature_map, sha256_hex, write_manifest, ManifestEntry, Split};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const FEATURE_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of per-element member noise.
    pub noise: f32,
    /// Shuffle prototype positions independently for every member.
    pub permute: bool,
    pub seed: u64,
    /// Number of consecutive classes sharing one pooled descriptor.
    pub group_size: usize,
    /// Dimension of the subspace group means are drawn from; `None` = all channels.
    pub signal_rank: Option<usize>,
    /// Per-channel standard deviation of group means.
    pub mean_scale: f32,
    pub queries_per_class: usize,
    pub train_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 20,
            per_class: 10,
            height: 7,
            width: 7,
            channels: 64,
            noise: 0.0,
            permute: false,
            seed: 0,
            group_size: 1,
            signal_rank: None,
            mean_scale: 1.0,
            queries_per_class: 2,
            train_per_class: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("classes and map dimensions must be positive");
        }
        if self.per_class < self.queries_per_class + self.train_per_class + 1 {
            return bad("per_class must leave at least one index member after queries and train");
        }
        if self.group_size == 0 {
            return bad("group_size must be positive");
        }
        if matches!(self.signal_rank, Some(r) if r == 0 || r > self.channels) {
            return bad("signal_rank must be in 1..=channels");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() || !(self.mean_scale >= 0.0) {
            return bad("noise and mean_scale must be finite and non-negative");
        }
        Ok(())
    }
}

/// One generated document.
#[derive(Debug, Clone)]
pub struct SynthDoc {
    pub entry: ManifestEntry,
    pub map: FeatureMap,
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample(StandardNormal)
}

/// Generates the dataset in memory. Feature paths are `features/<id>.prfm`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthDoc>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w, c) = (config.height, config.width, config.channels);
    let positions = h * w;
    let rank = config.signal_rank.unwrap_or(c);

    let basis: Vec<f32> = (0..c * rank).map(|_| normal(&mut rng)).collect();
    let basis_scale = config.mean_scale / (rank as f32).sqrt();
    let groups = config.classes.div_ceil(config.group_size);
    let group_means: Vec<Vec<f32>> = (0..groups)
        .map(|_| {
            let coeffs: Vec<f32> = (0..rank).map(|_| normal(&mut rng)).collect();
            (0..c)
                .map(|ch| {
                    let row = &basis[ch * rank..(ch + 1) * rank];
                    basis_scale * row.iter().zip(&coeffs).map(|(b, a)| b * a).sum::<f32>()
                })
                .collect()
        })
        .collect();

    let mut used_ids = HashSet::new();
    let mut docs = Vec::with_capacity(config.classes * config.per_class);
    for class in 0..config.classes {
        let mean = &group_means[class / config.group_size];
        let mut deviation: Vec<f32> = (0..positions * c).map(|_| normal(&mut rng)).collect();
        for ch in 0..c {
            let avg = (0..positions).map(|p| deviation[p * c + ch]).sum::<f32>() / positions as f32;
            for p in 0..positions {
                deviation[p * c + ch] -= avg;
            }
        }
        let prototype: Vec<f32> = deviation.iter().enumerate().map(|(i, d)| mean[i % c] + d).collect();

        let label = format!("L{class:03}");
        for member in 0..config.per_class {
            let mut order: Vec<usize> = (0..positions).collect();
            if config.permute {
                order.shuffle(&mut rng);
            }
            let mut data = Vec::with_capacity(positions * c);
            for &src in &order {
                data.extend_from_slice(&prototype[src * c..(src + 1) * c]);
            }
            if config.noise > 0.0 {
                for v in &mut data {
                    *v += config.noise * normal(&mut rng);
                }
            }
            let id = loop {
                let candidate = format!("d{:08x}", rng.random::<u32>());
                if used_ids.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let split = if member < config.queries_per_class {
                Split::Query
            } else if member < config.queries_per_class + config.train_per_class {
                Split::Train
            } else {
                Split::Index
            };
            let map = FeatureMap::new(id.clone(), h, w, c, data)?;
            docs.push(SynthDoc {
                entry: ManifestEntry {
                    feature_path: PathBuf::from(FEATURE_DIR).join(format!("{id}.prfm")),
                    id,
                    label: label.clone(),
                    split,
                    sha256: String::new(),
                },
                map,
            });
        }
    }
    Ok(docs)
}

/// Generates the dataset and writes `manifest.tsv` plus one `PRFM` file per
/// document under `out_dir`. Returns the manifest path.
pub fn write_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let feature_dir = out_dir.join(FEATURE_DIR);
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut entries = Vec::new();
    for doc in generate(config)? {
        let bytes = encode_feature_map(&doc.map);
        let path = out_dir.join(&doc.entry.feature_path);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            sha256: sha256_hex(&bytes),
            ..doc.entry
        });
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
