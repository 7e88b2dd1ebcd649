//! Exhaustive nearest-neighbour index over sequential descriptors.
//!
//! Descriptors are stored as `f32`; distances are accumulated in `f64`.
//! The persisted `SQPI` layout is
//!
//! ```text
//! magic b"SQPI" | version u16 = 1 | reserved u16 | count u32 | dim u32
//! count * dim f32 descriptors
//! per entry: id_len u32, id bytes (UTF-8), tags u32, tags * (easting f64, northing f64)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::datamodel::{GeoTag, Sequence, SequentialDescriptor};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"SQPI";
const VERSION: u16 = 1;

/// Bytes needed to hold `count` descriptors of `dim` `f32` values.
pub fn memory_estimate_bytes(count: usize, dim: usize) -> u64 {
    count as u64 * dim as u64 * 4
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    geotags: Vec<Vec<GeoTag>>,
}

impl RetrievalIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("index dimension must be positive".into()));
        }
        Ok(RetrievalIndex { dim, data: Vec::new(), ids: Vec::new(), geotags: Vec::new() })
    }

    /// Index `descriptors[i]` under `seqs[i]`'s id and geotags.
    pub fn build(seqs: &[Sequence], descriptors: &[SequentialDescriptor]) -> Result<Self> {
        if seqs.len() != descriptors.len() {
            return Err(Error::Shape(format!("{} sequences but {} descriptors", seqs.len(), descriptors.len())));
        }
        let first = descriptors.first().ok_or(Error::EmptyIndex)?;
        let mut index = RetrievalIndex::new(first.dim())?;
        for (s, d) in seqs.iter().zip(descriptors) {
            index.push(s.seq_id(), s.geotags(), d.values())?;
        }
        Ok(index)
    }

    /// Build from raw rows; used by benchmarks and tests.
    pub fn from_rows(dim: usize, rows: Vec<f32>, ids: Vec<String>, geotags: Vec<Vec<GeoTag>>) -> Result<Self> {
        if dim == 0 || rows.len() != ids.len() * dim || geotags.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} values, {} ids and {} geotag lists do not form a dim-{dim} index",
                rows.len(),
                ids.len(),
                geotags.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate index id {id:?}")));
            }
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("index rows contain non-finite values".into()));
        }
        Ok(RetrievalIndex { dim, data: rows, ids, geotags })
    }

    pub fn push(&mut self, id: &str, geotags: Vec<GeoTag>, descriptor: &[f64]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::Shape(format!(
                "descriptor for {id} has dim {}, index has {}",
                descriptor.len(),
                self.dim
            )));
        }
        if self.ids.iter().any(|x| x == id) {
            return Err(Error::InvalidInput(format!("duplicate index id {id:?}")));
        }
        if !descriptor.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("descriptor for {id} is not finite")));
        }
        self.data.extend(descriptor.iter().map(|&v| v as f32));
        self.ids.push(id.to_string());
        self.geotags.push(geotags);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn geotags(&self, i: usize) -> &[GeoTag] {
        &self.geotags[i]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn memory_bytes(&self) -> u64 {
        memory_estimate_bytes(self.len(), self.dim)
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query has dim {}, index has {}", query.len(), self.dim)));
        }
        Ok(())
    }

    /// Exact top-`n` neighbours under L2, ascending; ties go to the smaller id.
    pub fn knn_search(&self, query: &[f64], n: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        let mut cand: Vec<(f64, usize)> = self
            .data
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, row)| {
                let d: f64 = row
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| {
                        let t = a as f64 - b;
                        t * t
                    })
                    .sum();
                (d, i)
            })
            .collect();
        let n = n.min(cand.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        if n < cand.len() {
            cand.select_nth_unstable_by(n - 1, order);
            cand.truncate(n);
        }
        cand.sort_unstable_by(order);
        Ok(cand.into_iter().map(|(d, index)| Neighbor { index, distance: d.sqrt() }).collect())
    }

    /// [`knn_search`](Self::knn_search) for many queries, in parallel.
    pub fn knn_batch(&self, queries: &[SequentialDescriptor], n: usize) -> Result<Vec<Vec<Neighbor>>> {
        queries.par_iter().map(|q| self.knn_search(q.values(), n)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (id, tags) in self.ids.iter().zip(&self.geotags) {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(tags.len() as u32).to_le_bytes());
            for t in tags {
                out.extend_from_slice(&t.easting.to_le_bytes());
                out.extend_from_slice(&t.northing.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not an SQPI index".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SQPI version {version}")));
        }
        r.u16()?;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let floats = count.checked_mul(dim).ok_or_else(|| Error::Format("index size overflows".into()))?;
        let raw = r.take(floats.checked_mul(4).ok_or_else(|| Error::Format("index size overflows".into()))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut ids = Vec::with_capacity(count);
        let mut geotags = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("index id is not UTF-8".into()))?;
            ids.push(id.to_string());
            let ntags = r.u32()? as usize;
            let mut tags = Vec::with_capacity(ntags.min(1 << 16));
            for _ in 0..ntags {
                let (e, n) = (r.f64()?, r.f64()?);
                tags.push(GeoTag::new(e, n).map_err(|e| Error::Format(e.to_string()))?);
            }
            geotags.push(tags);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after index", bytes.len() - r.pos)));
        }
        RetrievalIndex::from_rows(dim, data, ids, geotags).map_err(|e| match e {
            Error::Shape(m) | Error::InvalidInput(m) | Error::Numerical(m) => Error::Format(m),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("index truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
