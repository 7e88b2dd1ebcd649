//! On-disk dataset layout.
//!
//! A dataset directory holds one `*.sqpf` feature blob per traversal and a
//! `manifest.jsonl` with one sequence per line. Blob layout, all little-endian:
//!
//! ```text
//! 0   magic    b"SQPF"
//! 4   version  u16 = 1
//! 6   layout   u16 (0 = grid, 1 = tokens)
//! 8   a        u32 (H for grid, T for tokens)
//! 12  b        u32 (W for grid, 0 for tokens)
//! 16  dim      u32
//! 20  frames   u32
//! 24  payload  frames x cells x dim f32, row-major
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureLayout, FeatureTensor, Frame, GeoTag, Sequence};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SQPF";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: u64 = 24;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Database => "database",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub offset: u64,
    pub easting: f64,
    pub northing: f64,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub split: Split,
    pub role: Role,
    pub seq_id: String,
    /// Feature blob, relative to the dataset root.
    pub file: String,
    pub frames: Vec<FrameRecord>,
}

/// Sequences of one split and role, resolved against a dataset root.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    split: Split,
    role: Role,
    sequences: Vec<SequenceRecord>,
    by_id: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(
        root: impl Into<PathBuf>,
        split: Split,
        role: Role,
        sequences: Vec<SequenceRecord>,
    ) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(sequences.len());
        for (i, rec) in sequences.iter().enumerate() {
            if rec.split != split || rec.role != role {
                return Err(Error::Format(format!(
                    "record {} belongs to {}/{}",
                    rec.seq_id,
                    rec.split.as_str(),
                    rec.role.as_str()
                )));
            }
            if rec.frames.is_empty() {
                return Err(Error::Format(format!("record {} has no frames", rec.seq_id)));
            }
            if by_id.insert(rec.seq_id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate seq_id {}", rec.seq_id)));
            }
        }
        Ok(Self { root: root.into(), split, role, sequences, by_id })
    }

    /// Read `root/manifest.jsonl`, keeping the lines for `split`/`role`.
    pub fn load(root: impl AsRef<Path>, split: Split, role: Role) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let mut sequences = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SequenceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
            if rec.split == split && rec.role == role {
                sequences.push(rec);
            }
        }
        Self::new(root, split, role, sequences)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn sequences(&self) -> &[SequenceRecord] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, seq_id: &str) -> Option<&SequenceRecord> {
        self.by_id.get(seq_id).map(|&i| &self.sequences[i])
    }
}

/// A parsed feature blob held in memory.
#[derive(Debug, Clone)]
pub struct FeatureBlob {
    layout: FeatureLayout,
    dim: usize,
    frames: usize,
    bytes: Vec<u8>,
}

impl FeatureBlob {
    pub fn parse(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN as usize {
            return Err(Error::Format(format!("blob of {} bytes has no header", bytes.len())));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::Format("bad magic, expected SQPF".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u16_at(4);
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported SQPF version {version}")));
        }
        let (a, b) = (u32_at(8), u32_at(12));
        let layout = match u16_at(6) {
            0 => FeatureLayout::Grid { h: a, w: b },
            1 => FeatureLayout::Tokens { t: a },
            tag => return Err(Error::Format(format!("unknown layout tag {tag}"))),
        };
        let dim = u32_at(16);
        let frames = u32_at(20);
        if layout.cells() == 0 || dim == 0 {
            return Err(Error::Format(format!("degenerate header {layout:?} x {dim}")));
        }
        let expected = FEATURE_HEADER_LEN as usize + frames * layout.cells() * dim * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "blob length {} does not match header ({expected} bytes expected)",
                bytes.len()
            )));
        }
        Ok(Self { layout, dim, frames, bytes })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(bytes)
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    fn frame_bytes(&self) -> u64 {
        (self.layout.cells() * self.dim * 4) as u64
    }

    /// Byte offset of frame `i` in the blob.
    pub fn offset_of(&self, i: usize) -> u64 {
        FEATURE_HEADER_LEN + i as u64 * self.frame_bytes()
    }

    pub fn tensor_at(&self, offset: u64) -> Result<FeatureTensor> {
        let fb = self.frame_bytes();
        if offset < FEATURE_HEADER_LEN || (offset - FEATURE_HEADER_LEN) % fb != 0 {
            return Err(Error::Format(format!("offset {offset} is not a frame boundary")));
        }
        let start = offset as usize;
        let end = start + fb as usize;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("offset {offset} past end of blob")));
        }
        let data: Vec<f32> = self.bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureTensor::new(self.layout, self.dim, data)
            .map_err(|e| Error::Format(format!("frame at offset {offset}: {e}")))
    }
}

/// Encode a traversal of same-layout tensors as an SQPF blob.
pub fn encode_blob(tensors: &[&FeatureTensor]) -> Result<Vec<u8>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Shape("cannot encode an empty traversal".into()))?;
    let layout = first.layout();
    let dim = first.dim();
    let (tag, a, b) = match layout {
        FeatureLayout::Grid { h, w } => (0u16, h, w),
        FeatureLayout::Tokens { t } => (1u16, t, 0),
    };
    let mut out =
        Vec::with_capacity(FEATURE_HEADER_LEN as usize + tensors.len() * layout.cells() * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    for v in [a, b, dim, tensors.len()] {
        let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in tensors {
        if t.layout() != layout || t.dim() != dim {
            return Err(Error::LayoutMismatch(format!(
                "traversal mixes {layout:?} x {dim} with {:?} x {}",
                t.layout(),
                t.dim()
            )));
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Accumulates traversal blobs and manifest lines for a dataset directory.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: BufWriter<File>,
}

impl DatasetWriter {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let manifest = BufWriter::new(File::create(root.join(MANIFEST_FILE))?);
        Ok(Self { root, manifest })
    }

    /// Write `frames` as blob `file_name` and one manifest line per window.
    ///
    /// Each window is `(seq_id, start, len)` over `frames`.
    pub fn write_traversal(
        &mut self,
        split: Split,
        role: Role,
        file_name: &str,
        frames: &[Frame],
        windows: &[(String, usize, usize)],
    ) -> Result<()> {
        let tensors: Vec<&FeatureTensor> = frames.iter().map(|f| &f.features).collect();
        let bytes = encode_blob(&tensors)?;
        fs::write(self.root.join(file_name), &bytes)?;
        let frame_bytes = (frames[0].features.cells() * frames[0].features.dim() * 4) as u64;
        for (seq_id, start, len) in windows {
            if *len == 0 || start + len > frames.len() {
                return Err(Error::Shape(format!("window {seq_id} outside traversal")));
            }
            let rec = SequenceRecord {
                split,
                role,
                seq_id: seq_id.clone(),
                file: file_name.to_string(),
                frames: (*start..start + len)
                    .map(|i| FrameRecord {
                        frame_id: frames[i].frame_id.clone(),
                        offset: FEATURE_HEADER_LEN + i as u64 * frame_bytes,
                        easting: frames[i].geotag.easting,
                        northing: frames[i].geotag.northing,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut self.manifest, &rec)?;
            self.manifest.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Write standalone sequences, each into its own blob.
    pub fn write_sequences(&mut self, split: Split, role: Role, seqs: &[Sequence]) -> Result<()> {
        for (i, seq) in seqs.iter().enumerate() {
            let file = format!("{}_{}_{i:06}.sqpf", split.as_str(), role.as_str());
            let window = [(seq.seq_id().to_string(), 0, seq.len())];
            self.write_traversal(split, role, &file, seq.frames(), &window)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.flush()?;
        Ok(())
    }
}

fn sequence_from_record(rec: &SequenceRecord, blob: &FeatureBlob, cache: &mut HashMap<u64, FeatureTensor>) -> Result<Sequence> {
    let mut frames = Vec::with_capacity(rec.frames.len());
    for fr in &rec.frames {
        let features = match cache.get(&fr.offset) {
            Some(t) => t.clone(),
            None => {
                let t = blob.tensor_at(fr.offset)?;
                cache.insert(fr.offset, t.clone());
                t
            }
        };
        frames.push(Frame {
            frame_id: fr.frame_id.clone(),
            geotag: GeoTag::new(fr.easting, fr.northing)?,
            features,
        });
    }
    Sequence::new(rec.seq_id.clone(), frames)
}

/// Load one sequence bit-exactly as stored.
pub fn load_features(manifest: &DatasetManifest, seq_id: &str) -> Result<Sequence> {
    let rec = manifest
        .get(seq_id)
        .ok_or_else(|| Error::NotFound(format!("seq_id {seq_id:?}")))?;
    let blob = FeatureBlob::read(manifest.root().join(&rec.file))?;
    sequence_from_record(rec, &blob, &mut HashMap::new())
}

/// Load every sequence of a manifest, in manifest order.
///
/// Each blob is read once; windows that share a frame share its storage.
pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<Sequence>> {
    let mut blobs: HashMap<&str, (FeatureBlob, HashMap<u64, FeatureTensor>)> = HashMap::new();
    let mut out = Vec::with_capacity(manifest.len());
    for rec in manifest.sequences() {
        if !blobs.contains_key(rec.file.as_str()) {
            let blob = FeatureBlob::read(manifest.root().join(&rec.file))?;
            blobs.insert(rec.file.as_str(), (blob, HashMap::new()));
        }
        let (blob, cache) = blobs.get_mut(rec.file.as_str()).unwrap();
        out.push(sequence_from_record(rec, blob, cache)?);
    }
    Ok(out)
}
