//! Fusion baselines built on per-frame descriptors: concatenation (late
//! fusion), a fully-connected layer and a depthwise temporal convolution
//! (intermediate fusion).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{fuse_frames, Frame, Sequence, SequentialDescriptor};
use crate::error::{Error, Result};

use super::seqvlad::SeqVlad;
use super::{l2_normalize, l2_normalize_backward};

/// Maps one frame to a single-image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameHead {
    /// Average of the frame's local features, L2-normalized.
    MeanPool,
    /// Single-frame NetVLAD.
    NetVlad(SeqVlad),
}

impl FrameHead {
    pub fn output_dim(&self, feature_dim: usize) -> usize {
        match self {
            FrameHead::MeanPool => feature_dim,
            FrameHead::NetVlad(v) => v.output_dim(),
        }
    }

    pub fn describe(&self, frame: &Frame) -> Result<Vec<f64>> {
        match self {
            FrameHead::MeanPool => {
                let t = &frame.features;
                let mut acc = vec![0.0f64; t.dim()];
                for c in 0..t.cells() {
                    for (a, &v) in acc.iter_mut().zip(t.cell(c)) {
                        *a += v as f64;
                    }
                }
                let n = t.cells() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                l2_normalize(&mut acc);
                Ok(acc)
            }
            FrameHead::NetVlad(v) => {
                let set = fuse_frames(std::slice::from_ref(frame))?;
                Ok(v.forward(&set)?.into_values())
            }
        }
    }

    /// Row-major `L x D_frame` matrix of frame descriptors.
    pub fn describe_frames(&self, seq: &Sequence) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for f in seq.frames() {
            out.extend(self.describe(f)?);
        }
        Ok(out)
    }
}

/// Concatenation of frame descriptors in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cat {
    pub frame_head: FrameHead,
}

impl Cat {
    pub fn new(frame_head: FrameHead) -> Self {
        Self { frame_head }
    }

    pub fn forward(&self, seq: &Sequence) -> Result<SequentialDescriptor> {
        Ok(SequentialDescriptor::normalized(self.frame_head.describe_frames(seq)?))
    }
}

/// Affine map of the flattened `L x D_frame` frame descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct Fc {
    seq_len: usize,
    frame_dim: usize,
    out_dim: usize,
    /// `(L * D_frame) x D_out` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

impl Fc {
    pub fn new(seq_len: usize, frame_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if seq_len == 0 || frame_dim == 0 || out_dim == 0 {
            return Err(Error::Config("FC dimensions must be >= 1".into()));
        }
        if weight.len() != seq_len * frame_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "FC {}x{out_dim} got {} weights and {} biases",
                seq_len * frame_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { seq_len, frame_dim, out_dim, weight, bias })
    }

    /// Gaussian weights with variance `1 / fan_in`, zero bias.
    pub fn random(seq_len: usize, frame_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let fan_in = seq_len * frame_dim;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..fan_in * out_dim).map(|_| normal.sample(&mut rng)).collect();
        Self::new(seq_len, frame_dim, out_dim, weight, vec![0.0; out_dim])
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn check(&self, input: &[f64]) -> Result<()> {
        let rows = self.seq_len * self.frame_dim;
        if input.len() != rows {
            return Err(Error::Shape(format!(
                "FC expects {rows} inputs ({} frames x {}), got {}; the FC head is tied to its training length",
                self.seq_len,
                self.frame_dim,
                input.len()
            )));
        }
        Ok(())
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &x) in input.iter().enumerate() {
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            for (zo, w) in z.iter_mut().zip(row) {
                *zo += x * w;
            }
        }
        z
    }

    pub fn forward_flat(&self, input: &[f64]) -> Result<SequentialDescriptor> {
        self.check(input)?;
        let mut z = self.affine(input);
        l2_normalize(&mut z);
        Ok(SequentialDescriptor::new(z, true))
    }

    pub fn backward_flat(&self, input: &[f64], upstream: &[f64]) -> Result<FcGradients> {
        self.check(input)?;
        if upstream.len() != self.out_dim {
            return Err(Error::Shape(format!("FC upstream has {} values, expected {}", upstream.len(), self.out_dim)));
        }
        let mut y = self.affine(input);
        let denom = l2_normalize(&mut y);
        let dz = l2_normalize_backward(&y, denom, upstream);
        let mut weight = vec![0.0; self.weight.len()];
        let mut dx = vec![0.0; input.len()];
        for (i, &x) in input.iter().enumerate() {
            let r = i * self.out_dim..(i + 1) * self.out_dim;
            let wrow = &self.weight[r.clone()];
            let grow = &mut weight[r];
            let mut acc = 0.0;
            for o in 0..self.out_dim {
                grow[o] = x * dz[o];
                acc += wrow[o] * dz[o];
            }
            dx[i] = acc;
        }
        Ok(FcGradients { weight, bias: dz, input: dx })
    }
}

/// Depthwise temporal convolution over frame descriptors, mean-pooled over time.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConv {
    width: usize,
    dim: usize,
    /// `width x D` row-major, one filter tap per row.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConvGradients {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

impl TemporalConv {
    pub fn new(width: usize, dim: usize, kernel: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if width == 0 || dim == 0 {
            return Err(Error::Config("temporal conv needs width >= 1 and D >= 1".into()));
        }
        if kernel.len() != width * dim || bias.len() != dim {
            return Err(Error::Shape(format!(
                "temporal conv {width}x{dim} got {} taps and {} biases",
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self { width, dim, kernel, bias })
    }

    /// Every tap `1 / width`: starts out as a moving average.
    pub fn averaging(width: usize, dim: usize) -> Result<Self> {
        Self::new(width, dim, vec![1.0 / width as f64; width * dim], vec![0.0; dim])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn frames_in(&self, frames: &[f64]) -> Result<usize> {
        if frames.is_empty() || frames.len() % self.dim != 0 {
            return Err(Error::Shape(format!(
                "{} values is not a whole number of {}-d frame descriptors",
                frames.len(),
                self.dim
            )));
        }
        let l = frames.len() / self.dim;
        if self.width > l {
            return Err(Error::Shape(format!("kernel width {} exceeds sequence length {l}", self.width)));
        }
        Ok(l)
    }

    fn pooled(&self, frames: &[f64], l: usize) -> Vec<f64> {
        let d = self.dim;
        let steps = l - self.width + 1;
        let mut acc = vec![0.0; d];
        for t in 0..steps {
            for j in 0..self.width {
                let f = &frames[(t + j) * d..(t + j + 1) * d];
                let k = &self.kernel[j * d..(j + 1) * d];
                for c in 0..d {
                    acc[c] += k[c] * f[c];
                }
            }
        }
        acc.iter_mut().zip(&self.bias).for_each(|(a, b)| *a = *a / steps as f64 + b);
        acc
    }

    pub fn forward_frames(&self, frames: &[f64]) -> Result<SequentialDescriptor> {
        let l = self.frames_in(frames)?;
        let mut y = self.pooled(frames, l);
        l2_normalize(&mut y);
        Ok(SequentialDescriptor::new(y, true))
    }

    pub fn backward_frames(&self, frames: &[f64], upstream: &[f64]) -> Result<TemporalConvGradients> {
        let l = self.frames_in(frames)?;
        if upstream.len() != self.dim {
            return Err(Error::Shape(format!("upstream has {} values, expected {}", upstream.len(), self.dim)));
        }
        let d = self.dim;
        let mut y = self.pooled(frames, l);
        let denom = l2_normalize(&mut y);
        let dp = l2_normalize_backward(&y, denom, upstream);
        let steps = l - self.width + 1;
        let scale = 1.0 / steps as f64;
        let mut kernel = vec![0.0; self.kernel.len()];
        let mut input = vec![0.0; frames.len()];
        for t in 0..steps {
            for j in 0..self.width {
                for c in 0..d {
                    let fi = (t + j) * d + c;
                    kernel[j * d + c] += scale * dp[c] * frames[fi];
                    input[fi] += scale * dp[c] * self.kernel[j * d + c];
                }
            }
        }
        Ok(TemporalConvGradients { kernel, bias: dp, input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{FeatureLayout, FeatureTensor, GeoTag};

    fn seq(vals: &[[f32; 2]]) -> Sequence {
        let frames = vals
            .iter()
            .enumerate()
            .map(|(i, v)| Frame {
                frame_id: i.to_string(),
                geotag: GeoTag::new(i as f64, 0.0).unwrap(),
                features: FeatureTensor::new(FeatureLayout::Tokens { t: 1 }, 2, v.to_vec()).unwrap(),
            })
            .collect();
        Sequence::new("s", frames).unwrap()
    }

    #[test]
    fn cat_single_frame_is_frame_descriptor() {
        let s = seq(&[[3.0, 4.0]]);
        let cat = Cat::new(FrameHead::MeanPool);
        assert_eq!(cat.forward(&s).unwrap().values(), &[0.6, 0.8]);
    }

    #[test]
    fn cat_reversal_reverses_blocks() {
        let s = seq(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let cat = Cat::new(FrameHead::MeanPool);
        let a = cat.forward(&s).unwrap();
        let b = cat.forward(&s.reversed()).unwrap();
        assert_eq!(a.dim(), 6);
        assert_eq!(&a.values()[0..2], &b.values()[4..6]);
        assert_ne!(a, b);
    }

    #[test]
    fn fc_identity_is_normalized_passthrough() {
        let fc = Fc::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(fc.forward_flat(&[3.0, 4.0]).unwrap().values(), &[0.6, 0.8]);
    }

    #[test]
    fn fc_zero_weight_is_constant() {
        let fc = Fc::new(2, 2, 2, vec![0.0; 8], vec![0.0, 2.0]).unwrap();
        for x in [[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 9.0, 0.0]] {
            assert_eq!(fc.forward_flat(&x).unwrap().values(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn fc_rejects_other_lengths() {
        let fc = Fc::random(5, 4, 3, 0).unwrap();
        assert!(matches!(fc.forward_flat(&[0.0; 12]), Err(Error::Shape(_))));
        assert!(fc.forward_flat(&[0.1; 20]).is_ok());
    }

    #[test]
    fn tconv_unit_width_is_mean() {
        let tc = TemporalConv::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let y = tc.forward_frames(&[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((y.values()[0] - s).abs() < 1e-12 && (y.values()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn tconv_full_width_is_weighted_sum() {
        let tc = TemporalConv::new(3, 1, vec![1.0, 2.0, -1.0], vec![0.0]).unwrap();
        assert_eq!(tc.forward_frames(&[1.0, 1.0, 1.0]).unwrap().values(), &[1.0]);
        assert_eq!(tc.forward_frames(&[1.0, 0.0, 3.0]).unwrap().values(), &[-1.0]);
        assert!(matches!(tc.forward_frames(&[1.0, 1.0]), Err(Error::Shape(_))));
    }
}
