//! Feature-map tensors and the descriptors derived from them.
//!
//! A [`FeatureMap`] holds the `H x W x C` activations of one image in
//! `(h, w, c)` row-major order. Average pooling over the spatial positions
//! gives the global descriptor used for stage-1 search; the per-position
//! channel vectors, normalized, form the [`PatchSet`] used for re-ranking.

use crate::error::{Error, Result};
use crate::linalg;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    id: String,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(id: impl Into<String>, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height.checked_mul(width).and_then(|n| n.checked_mul(channels));
        if height == 0 || width == 0 || channels == 0 || expected != Some(data.len()) {
            return Err(Error::InvalidShape {
                height,
                width,
                channels,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(FeatureMap {
            id: id.into(),
            height,
            width,
            channels,
            data,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The channel vector at spatial position `(h, w)`.
    pub fn position(&self, h: usize, w: usize) -> &[f32] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub id: String,
    pub vector: Vec<f32>,
    pub normalized: bool,
}

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Returns the L2-normalized descriptor.
    pub fn normalize(self) -> Result<Self> {
        Ok(GlobalDescriptor {
            vector: l2_normalize(&self.vector)?,
            id: self.id,
            normalized: true,
        })
    }
}

/// Unit-norm patch vectors of one image, stored as a row-major
/// `count x channels` block.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    id: String,
    channels: usize,
    data: Vec<f32>,
}

impl PatchSet {
    /// Builds a patch set from raw vectors, normalizing each one.
    pub fn from_vectors<V: AsRef<[f32]>>(id: impl Into<String>, vectors: &[V]) -> Result<Self> {
        let channels = vectors.first().ok_or(Error::EmptyPatchSet)?.as_ref().len();
        if channels == 0 {
            return Err(Error::EmptyPatchSet);
        }
        let mut data = Vec::with_capacity(channels * vectors.len());
        for (p, v) in vectors.iter().enumerate() {
            let v = v.as_ref();
            if v.len() != channels {
                return Err(Error::DimensionMismatch {
                    expected: channels,
                    actual: v.len(),
                });
            }
            let unit = l2_normalize(v).map_err(|_| Error::ZeroPatch(p))?;
            data.extend_from_slice(&unit);
        }
        Ok(PatchSet {
            id: id.into(),
            channels,
            data,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn patch(&self, p: usize) -> &[f32] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn patches(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels)
    }
}

/// Mean of every channel over all spatial positions.
pub fn average_pool(map: &FeatureMap) -> GlobalDescriptor {
    let c = map.channels;
    let mut sums = vec![0.0f64; c];
    for position in map.data.chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(position) {
            *s += f64::from(*v);
        }
    }
    let n = map.positions() as f64;
    GlobalDescriptor {
        id: map.id.clone(),
        vector: sums.into_iter().map(|s| (s / n) as f32).collect(),
        normalized: false,
    }
}

pub fn l2_normalize(vector: &[f32]) -> Result<Vec<f32>> {
    let norm = linalg::norm(vector);
    if !(norm >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(vector.iter().map(|v| (f64::from(*v) / norm) as f32).collect())
}

/// Splits a map into its `H * W` position vectors; patch `p = h * W + w`.
pub fn extract_patches(map: &FeatureMap) -> Result<PatchSet> {
    let c = map.channels;
    let mut data = Vec::with_capacity(map.data.len());
    for (p, position) in map.data.chunks_exact(c).enumerate() {
        let unit = l2_normalize(position).map_err(|_| Error::ZeroPatch(p))?;
        data.extend_from_slice(&unit);
    }
    Ok(PatchSet {
        id: map.id.clone(),
        channels: c,
        data,
    })
}

/// The stage-1 descriptor of a map: `l2_normalize(average_pool(map))`.
pub fn global_descriptor(map: &FeatureMap) -> Result<GlobalDescriptor> {
    average_pool(map).normalize()
}
