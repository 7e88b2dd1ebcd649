//! Trainable heads mapping a [`Sequence`] to a [`SequentialDescriptor`].

mod baselines;
mod checkpoint;
mod kmeans;
mod seqvlad;

use rayon::prelude::*;

pub use baselines::{Cat, Fc, FcGradients, FrameHead, TemporalConv, TemporalConvGradients};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use kmeans::{init_seqvlad, kmeans, sample_local_descriptors, DEFAULT_LLOYD_ITERATIONS, DEFAULT_SAMPLE_SIZE};
pub use seqvlad::{SeqVlad, SeqVladGradients, SeqVladParams, DEFAULT_ALPHA, DEFAULT_MAX_OUTPUT_DIM};

use crate::datamodel::{fuse_to_local_set, Sequence, SequentialDescriptor};
use crate::error::{Error, Result};

/// Default number of SeqVLAD clusters.
pub const DEFAULT_CLUSTERS: usize = 64;

pub(crate) const NORM_EPS: f64 = 1e-12;

/// Normalize in place; returns the denominator `max(|v|, eps)`.
pub(crate) fn l2_normalize(v: &mut [f64]) -> f64 {
    let denom = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= denom);
    denom
}

/// Gradient through `y = v / max(|v|, eps)` given the output `y`.
pub(crate) fn l2_normalize_backward(y: &[f64], denom: f64, upstream: &[f64]) -> Vec<f64> {
    if denom <= NORM_EPS {
        return upstream.iter().map(|g| g / denom).collect();
    }
    let proj: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    y.iter().zip(upstream).map(|(yi, gi)| (gi - yi * proj) / denom).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    SeqVlad,
    Cat,
    Fc,
    TemporalConv,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::SeqVlad => "seqvlad",
            HeadKind::Cat => "cat",
            HeadKind::Fc => "fc",
            HeadKind::TemporalConv => "tconv",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seqvlad" => Ok(HeadKind::SeqVlad),
            "cat" => Ok(HeadKind::Cat),
            "fc" => Ok(HeadKind::Fc),
            "tconv" => Ok(HeadKind::TemporalConv),
            other => Err(Error::Config(format!("unknown head {other:?} (seqvlad, cat, fc, tconv)"))),
        }
    }
}

/// Gradients for every parameter tensor of a head, in [`Head::parameters`]
/// order, plus the gradient with respect to the head's input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub params: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl HeadGradients {
    pub fn accumulate(&mut self, other: &HeadGradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().chain(&self.input).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    SeqVlad(SeqVlad),
    Cat(Cat),
    Fc { fc: Fc, frame_head: FrameHead },
    TemporalConv { conv: TemporalConv, frame_head: FrameHead },
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::SeqVlad(_) => HeadKind::SeqVlad,
            Head::Cat(_) => HeadKind::Cat,
            Head::Fc { .. } => HeadKind::Fc,
            Head::TemporalConv { .. } => HeadKind::TemporalConv,
        }
    }

    /// Whether sequences of any length map to comparable descriptors.
    pub fn is_length_flexible(&self) -> bool {
        !matches!(self, Head::Fc { .. })
    }

    /// Descriptor dimension for sequences of `seq_len` frames with `D`-dim features.
    pub fn output_dim(&self, seq_len: usize, feature_dim: usize) -> Result<usize> {
        match self {
            Head::SeqVlad(v) => Ok(v.output_dim()),
            Head::Cat(c) => Ok(seq_len * c.frame_head.output_dim(feature_dim)),
            Head::Fc { fc, .. } => {
                if seq_len != fc.seq_len() {
                    return Err(Error::Shape(format!(
                        "FC head is tied to L={}, got L={seq_len}",
                        fc.seq_len()
                    )));
                }
                Ok(fc.out_dim())
            }
            Head::TemporalConv { conv, .. } => {
                if seq_len < conv.width() {
                    return Err(Error::Shape(format!("L={seq_len} shorter than kernel width {}", conv.width())));
                }
                Ok(conv.dim())
            }
        }
    }

    pub fn describe(&self, seq: &Sequence) -> Result<SequentialDescriptor> {
        match self {
            Head::SeqVlad(v) => v.forward(&fuse_to_local_set(seq)?),
            Head::Cat(c) => c.forward(seq),
            Head::Fc { fc, frame_head } => fc.forward_flat(&frame_head.describe_frames(seq)?),
            Head::TemporalConv { conv, frame_head } => conv.forward_frames(&frame_head.describe_frames(seq)?),
        }
    }

    /// Describe many sequences; data-parallel, output in input order.
    pub fn describe_all(&self, seqs: &[Sequence]) -> Result<Vec<SequentialDescriptor>> {
        seqs.par_iter().map(|s| self.describe(s)).collect()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        match self {
            Head::SeqVlad(v) => vec![&v.params.centroids, &v.params.assign_weights, &v.params.assign_bias],
            Head::Cat(_) => vec![],
            Head::Fc { fc, .. } => vec![&fc.weight, &fc.bias],
            Head::TemporalConv { conv, .. } => vec![&conv.kernel, &conv.bias],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Head::SeqVlad(v) => {
                let p = &mut v.params;
                vec![&mut p.centroids, &mut p.assign_weights, &mut p.assign_bias]
            }
            Head::Cat(_) => vec![],
            Head::Fc { fc, .. } => vec![&mut fc.weight, &mut fc.bias],
            Head::TemporalConv { conv, .. } => vec![&mut conv.kernel, &mut conv.bias],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Gradient of `upstream . describe(seq)` with respect to every parameter.
    pub fn backward(&self, seq: &Sequence, upstream: &[f64]) -> Result<HeadGradients> {
        match self {
            Head::SeqVlad(v) => {
                let g = v.backward(&fuse_to_local_set(seq)?, upstream)?;
                Ok(HeadGradients { params: vec![g.centroids, g.assign_weights, g.assign_bias], input: g.input })
            }
            Head::Cat(_) => {
                let dim = self.output_dim(seq.len(), seq.dim())?;
                if upstream.len() != dim {
                    return Err(Error::Shape(format!("upstream has {} values, CAT output has {dim}", upstream.len())));
                }
                // Frame descriptors are fixed, so the gradient stops here.
                Ok(HeadGradients { params: vec![], input: vec![] })
            }
            Head::Fc { fc, frame_head } => {
                let g = fc.backward_flat(&frame_head.describe_frames(seq)?, upstream)?;
                Ok(HeadGradients { params: vec![g.weight, g.bias], input: g.input })
            }
            Head::TemporalConv { conv, frame_head } => {
                let g = conv.backward_frames(&frame_head.describe_frames(seq)?, upstream)?;
                Ok(HeadGradients { params: vec![g.kernel, g.bias], input: g.input })
            }
        }
    }

    pub fn zero_gradients(&self) -> HeadGradients {
        HeadGradients { params: self.parameters().iter().map(|p| vec![0.0; p.len()]).collect(), input: vec![] }
    }
}
