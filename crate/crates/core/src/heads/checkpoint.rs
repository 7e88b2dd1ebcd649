//! Versioned binary checkpoints for heads.
//!
//! ```text
//! magic    b"SQPH"
//! version  u16 = 1
//! head     u16 (0 = seqvlad, 1 = cat, 2 = fc, 3 = tconv)
//! nshape   u32, then nshape u32 shape fields
//! payload  f32 values, little-endian
//! ```
//!
//! Shape fields per head (a frame head is encoded as `tag, K, D, intra`,
//! with tag 0 = mean-pool and 1 = NetVLAD):
//!
//! * seqvlad: `K, D, intra`; payload centroids, weights, biases
//! * cat: frame head; payload frame-head NetVLAD params if any
//! * fc: `L, D_frame, D_out`, frame head; payload weight, bias, frame head
//! * tconv: `width, D`, frame head; payload kernel, bias, frame head

use std::path::Path;

use crate::error::{Error, Result};

use super::baselines::{Cat, Fc, FrameHead, TemporalConv};
use super::seqvlad::{SeqVlad, SeqVladParams};
use super::Head;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQPH";
const VERSION: u16 = 1;

struct Writer {
    shape: Vec<u32>,
    payload: Vec<f32>,
}

impl Writer {
    fn dims(&mut self, v: &[usize]) -> Result<()> {
        for &x in v {
            self.shape
                .push(u32::try_from(x).map_err(|_| Error::Shape(format!("{x} does not fit in u32")))?);
        }
        Ok(())
    }

    fn values(&mut self, v: &[f64]) {
        self.payload.extend(v.iter().map(|&x| x as f32));
    }

    fn seqvlad_shape(&mut self, v: &SeqVlad) -> Result<()> {
        self.dims(&[v.params.k(), v.params.dim(), v.intra_norm as usize])
    }

    fn seqvlad_values(&mut self, v: &SeqVlad) {
        self.values(&v.params.centroids);
        self.values(&v.params.assign_weights);
        self.values(&v.params.assign_bias);
    }

    fn frame_shape(&mut self, f: &FrameHead) -> Result<()> {
        match f {
            FrameHead::MeanPool => self.dims(&[0, 0, 0, 0]),
            FrameHead::NetVlad(v) => {
                self.dims(&[1])?;
                self.seqvlad_shape(v)
            }
        }
    }

    fn frame_values(&mut self, f: &FrameHead) {
        if let FrameHead::NetVlad(v) = f {
            self.seqvlad_values(v);
        }
    }
}

pub fn encode_checkpoint(head: &Head) -> Result<Vec<u8>> {
    let mut w = Writer { shape: Vec::new(), payload: Vec::new() };
    let tag: u16 = match head {
        Head::SeqVlad(v) => {
            w.seqvlad_shape(v)?;
            w.seqvlad_values(v);
            0
        }
        Head::Cat(c) => {
            w.frame_shape(&c.frame_head)?;
            w.frame_values(&c.frame_head);
            1
        }
        Head::Fc { fc, frame_head } => {
            w.dims(&[fc.seq_len(), fc.frame_dim(), fc.out_dim()])?;
            w.frame_shape(frame_head)?;
            w.values(&fc.weight);
            w.values(&fc.bias);
            w.frame_values(frame_head);
            2
        }
        Head::TemporalConv { conv, frame_head } => {
            w.dims(&[conv.width(), conv.dim()])?;
            w.frame_shape(frame_head)?;
            w.values(&conv.kernel);
            w.values(&conv.bias);
            w.frame_values(frame_head);
            3
        }
    };
    let mut out = Vec::with_capacity(12 + 4 * (w.shape.len() + w.payload.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(w.shape.len() as u32).to_le_bytes());
    for s in &w.shape {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &w.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    shape: std::slice::Iter<'a, usize>,
    payload: &'a [f32],
}

impl Reader<'_> {
    fn dim(&mut self) -> Result<usize> {
        self.shape.next().copied().ok_or_else(|| Error::Format("checkpoint shape header too short".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.payload.len() < n {
            return Err(Error::Format(format!(
                "checkpoint payload needs {n} more values, {} left",
                self.payload.len()
            )));
        }
        let (head, rest) = self.payload.split_at(n);
        self.payload = rest;
        Ok(head.iter().map(|&v| v as f64).collect())
    }

    fn seqvlad_shape(&mut self) -> Result<(usize, usize, bool)> {
        Ok((self.dim()?, self.dim()?, self.dim()? != 0))
    }

    fn seqvlad_values(&mut self, (k, d, intra): (usize, usize, bool)) -> Result<SeqVlad> {
        let c = self.values(k * d)?;
        let w = self.values(k * d)?;
        let b = self.values(k)?;
        Ok(SeqVlad::new(SeqVladParams::new(k, d, c, w, b)?).with_intra_norm(intra))
    }

    fn frame_shape(&mut self) -> Result<Option<(usize, usize, bool)>> {
        match self.dim()? {
            0 => {
                for _ in 0..3 {
                    self.dim()?;
                }
                Ok(None)
            }
            1 => Ok(Some(self.seqvlad_shape()?)),
            t => Err(Error::Format(format!("unknown frame head tag {t}"))),
        }
    }

    fn frame_values(&mut self, shape: Option<(usize, usize, bool)>) -> Result<FrameHead> {
        match shape {
            None => Ok(FrameHead::MeanPool),
            Some(s) => Ok(FrameHead::NetVlad(self.seqvlad_values(s)?)),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Head> {
    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an SQPH checkpoint".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SQPH version {version}")));
    }
    let tag = u16::from_le_bytes([bytes[6], bytes[7]]);
    let nshape = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < nshape * 4 || (body.len() - nshape * 4) % 4 != 0 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let word = |c: &[u8]| u32::from_le_bytes(c.try_into().unwrap());
    let shape: Vec<usize> = body[..nshape * 4].chunks_exact(4).map(|c| word(c) as usize).collect();
    let payload: Vec<f32> = body[nshape * 4..].chunks_exact(4).map(|c| f32::from_bits(word(c))).collect();
    let mut r = Reader { shape: shape.iter(), payload: &payload };
    let head = match tag {
        0 => {
            let s = r.seqvlad_shape()?;
            Head::SeqVlad(r.seqvlad_values(s)?)
        }
        1 => {
            let f = r.frame_shape()?;
            Head::Cat(Cat::new(r.frame_values(f)?))
        }
        2 => {
            let (l, df, dout) = (r.dim()?, r.dim()?, r.dim()?);
            let f = r.frame_shape()?;
            let weight = r.values(l * df * dout)?;
            let bias = r.values(dout)?;
            let frame_head = r.frame_values(f)?;
            Head::Fc { fc: Fc::new(l, df, dout, weight, bias)?, frame_head }
        }
        3 => {
            let (ws, d) = (r.dim()?, r.dim()?);
            let f = r.frame_shape()?;
            let kernel = r.values(ws * d)?;
            let bias = r.values(d)?;
            let frame_head = r.frame_values(f)?;
            Head::TemporalConv { conv: TemporalConv::new(ws, d, kernel, bias)?, frame_head }
        }
        t => return Err(Error::Format(format!("unknown head tag {t}"))),
    };
    if r.shape.next().is_some() || !r.payload.is_empty() {
        return Err(Error::Format("trailing data in checkpoint".into()));
    }
    Ok(head)
}

pub fn save_checkpoint(head: &Head, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(head)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Head> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_exact(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * 0.25 + salt) as f32) as f64).collect()
    }

    #[test]
    fn every_head_round_trips() {
        let vlad = SeqVlad::new(SeqVladParams::new(2, 3, f32_exact(6, 0.5), f32_exact(6, -1.0), f32_exact(2, 3.0)).unwrap());
        let heads = vec![
            Head::SeqVlad(vlad.clone().with_intra_norm(false)),
            Head::Cat(Cat::new(FrameHead::MeanPool)),
            Head::Cat(Cat::new(FrameHead::NetVlad(vlad.clone()))),
            Head::Fc { fc: Fc::new(2, 3, 4, f32_exact(24, 0.1), f32_exact(4, 0.0)).unwrap(), frame_head: FrameHead::MeanPool },
            Head::TemporalConv {
                conv: TemporalConv::new(2, 6, f32_exact(12, 1.0), f32_exact(6, 2.0)).unwrap(),
                frame_head: FrameHead::NetVlad(vlad),
            },
        ];
        for h in heads {
            let bytes = encode_checkpoint(&h).unwrap();
            assert_eq!(decode_checkpoint(&bytes).unwrap(), h);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let h = Head::TemporalConv {
            conv: TemporalConv::averaging(2, 3).unwrap(),
            frame_head: FrameHead::MeanPool,
        };
        let bytes = encode_checkpoint(&h).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(b"SQPX00000000"), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
