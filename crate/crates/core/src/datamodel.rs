//! Value types shared by every stage of the pipeline.
//!
//! Everything here is immutable once built. Feature payloads live behind an
//! `Arc<[f32]>` so that overlapping sliding-window sequences share storage
//! with the traversal they were cut from.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar position in meters (UTM-style easting/northing).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTag {
    pub easting: f64,
    pub northing: f64,
}

impl GeoTag {
    pub fn new(easting: f64, northing: f64) -> Result<Self> {
        let tag = Self { easting, northing };
        tag.validate()?;
        Ok(tag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.easting.is_finite() && self.northing.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "non-finite geotag ({}, {})",
                self.easting, self.northing
            )))
        }
    }

    /// Distance without the finiteness check, for hot loops over validated tags.
    #[inline]
    pub fn distance_unchecked(&self, other: &GeoTag) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// Euclidean distance in meters between two geotags.
pub fn geo_distance(a: &GeoTag, b: &GeoTag) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.distance_unchecked(b))
}

/// Spatial arrangement of the local features of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// CNN-style `H x W` grid of feature cells.
    Grid { h: usize, w: usize },
    /// Transformer-style list of `T` token embeddings.
    Tokens { t: usize },
}

impl FeatureLayout {
    /// Number of local descriptors one frame contributes.
    pub fn cells(&self) -> usize {
        match *self {
            FeatureLayout::Grid { h, w } => h * w,
            FeatureLayout::Tokens { t } => t,
        }
    }
}

/// Per-frame features: `cells x dim` row-major `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    layout: FeatureLayout,
    dim: usize,
    data: Arc<[f32]>,
}

impl FeatureTensor {
    pub fn new(layout: FeatureLayout, dim: usize, data: impl Into<Arc<[f32]>>) -> Result<Self> {
        let data = data.into();
        let cells = layout.cells();
        if cells == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "layout {layout:?} with dim {dim} has an empty extent"
            )));
        }
        if data.len() != cells * dim {
            return Err(Error::Shape(format!(
                "layout {layout:?} x dim {dim} needs {} values, got {}",
                cells * dim,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature value at index {bad}")));
        }
        Ok(Self { layout, dim, data })
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cells(&self) -> usize {
        self.layout.cells()
    }

    /// Local descriptor `i` in row-major cell order.
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub geotag: GeoTag,
    pub features: FeatureTensor,
}

/// Ordered run of `L >= 1` frames sharing one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    seq_id: String,
    frames: Vec<Frame>,
}

impl Sequence {
    pub fn new(seq_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Shape("a sequence needs at least one frame".into()));
        }
        check_common_layout(&frames)?;
        for f in &frames {
            f.geotag.validate()?;
        }
        Ok(Self { seq_id: seq_id.into(), frames })
    }

    pub fn seq_id(&self) -> &str {
        &self.seq_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn layout(&self) -> FeatureLayout {
        self.frames[0].features.layout()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].features.dim()
    }

    pub fn geotags(&self) -> Vec<GeoTag> {
        self.frames.iter().map(|f| f.geotag).collect()
    }

    /// Same frames in reverse order, same id.
    pub fn reversed(&self) -> Sequence {
        let mut frames = self.frames.clone();
        frames.reverse();
        Sequence { seq_id: self.seq_id.clone(), frames }
    }

    /// Contiguous sub-sequence `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Sequence> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside sequence of length {}",
                start + len,
                self.frames.len()
            )));
        }
        Ok(Sequence {
            seq_id: self.seq_id.clone(),
            frames: self.frames[start..start + len].to_vec(),
        })
    }
}

fn check_common_layout(frames: &[Frame]) -> Result<()> {
    let first = &frames[0].features;
    for (i, f) in frames.iter().enumerate().skip(1) {
        if f.features.layout() != first.layout() || f.features.dim() != first.dim() {
            return Err(Error::LayoutMismatch(format!(
                "frame {i} has {:?} x {} but frame 0 has {:?} x {}",
                f.features.layout(),
                f.features.dim(),
                first.layout(),
                first.dim()
            )));
        }
    }
    Ok(())
}

/// `M` local descriptors of dimension `D`, stored row-major in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet {
    count: usize,
    dim: usize,
    vectors: Vec<f64>,
}

impl LocalDescriptorSet {
    pub fn new(count: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if count == 0 || dim == 0 || vectors.len() != count * dim {
            return Err(Error::Shape(format!(
                "local set {count} x {dim} cannot hold {} values",
                vectors.len()
            )));
        }
        Ok(Self { count, dim, vectors })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, m: usize) -> &[f64] {
        &self.vectors[m * self.dim..(m + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.vectors.chunks_exact(self.dim)
    }
}

/// Reinterpret all frame-level features as one set of local descriptors.
///
/// Order is frame-major (all of frame 0 first) and row-major within a frame.
pub fn fuse_frames(frames: &[Frame]) -> Result<LocalDescriptorSet> {
    if frames.is_empty() {
        return Err(Error::Shape("cannot fuse an empty frame list".into()));
    }
    check_common_layout(frames)?;
    let dim = frames[0].features.dim();
    let count: usize = frames.iter().map(|f| f.features.cells()).sum();
    let mut vectors = Vec::with_capacity(count * dim);
    for f in frames {
        vectors.extend(f.features.data().iter().map(|&v| v as f64));
    }
    LocalDescriptorSet::new(count, dim, vectors)
}

pub fn fuse_to_local_set(seq: &Sequence) -> Result<LocalDescriptorSet> {
    fuse_frames(seq.frames())
}

/// Fixed-size vector representing a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialDescriptor {
    values: Vec<f64>,
    normalized: bool,
}

impl SequentialDescriptor {
    pub fn new(values: Vec<f64>, normalized: bool) -> Self {
        Self { values, normalized }
    }

    /// L2-normalize `values`; an all-zero vector stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self { values, normalized: true }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
