//! Reversed-database and sequence-length experiments.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Frame, Sequence, SequentialDescriptor};
use crate::error::{Error, Result};
use crate::heads::{FrameHead, Head};
use crate::retrieval::RetrievalIndex;

use super::{evaluate, evaluate_descriptors, evaluate_sequence_matching, EvalConfig, EvalReport};

/// A retrieval method under evaluation.
#[derive(Debug, Clone)]
pub enum Method {
    Descriptor { name: String, head: Head },
    SequenceMatching { frame_head: FrameHead, velocities: Vec<f64> },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Descriptor { name, .. } => name,
            Method::SequenceMatching { .. } => "seqmatch",
        }
    }

    pub fn evaluate(&self, database: &[Sequence], queries: &[Sequence], cfg: &EvalConfig) -> Result<EvalReport> {
        match self {
            Method::Descriptor { name, head } => {
                let index = RetrievalIndex::build(database, &head.describe_all(database)?)?;
                let mut r = evaluate(&index, queries, head, cfg)?;
                r.method = name.clone();
                Ok(r)
            }
            Method::SequenceMatching { frame_head, velocities } => {
                evaluate_sequence_matching(database, queries, frame_head, velocities, cfg)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseDbResult {
    pub method: String,
    pub forward: EvalReport,
    pub reversed: EvalReport,
    /// Largest L-infinity gap between a database descriptor and that of its
    /// reversal; descriptor methods only.
    pub max_descriptor_diff: Option<f64>,
}

fn linf(a: &SequentialDescriptor, b: &SequentialDescriptor) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Evaluate each method with the database as is and with every database
/// sequence's frames reversed. Queries are left untouched.
pub fn experiment_reverse_db(
    methods: &[Method],
    database: &[Sequence],
    queries: &[Sequence],
    cfg: &EvalConfig,
) -> Result<Vec<ReverseDbResult>> {
    let reversed_db: Vec<Sequence> = database.iter().map(Sequence::reversed).collect();
    methods
        .iter()
        .map(|m| match m {
            Method::Descriptor { name, head } => {
                let fwd_desc = head.describe_all(database)?;
                let rev_desc = head.describe_all(&reversed_db)?;
                let diff = fwd_desc.iter().zip(&rev_desc).map(|(a, b)| linf(a, b)).fold(0.0, f64::max);
                let qdesc = head.describe_all(queries)?;
                let fwd = evaluate_descriptors(name, &RetrievalIndex::build(database, &fwd_desc)?, queries, &qdesc, cfg)?;
                let rev =
                    evaluate_descriptors(name, &RetrievalIndex::build(&reversed_db, &rev_desc)?, queries, &qdesc, cfg)?;
                Ok(ReverseDbResult { method: name.clone(), forward: fwd, reversed: rev, max_descriptor_diff: Some(diff) })
            }
            Method::SequenceMatching { .. } => Ok(ReverseDbResult {
                method: m.name().to_string(),
                forward: m.evaluate(database, queries, cfg)?,
                reversed: m.evaluate(&reversed_db, queries, cfg)?,
                max_descriptor_diff: None,
            }),
        })
        .collect()
}

/// Cut windows `[s, s + len)` for each `s` in `starts` from a traversal.
pub fn cut_windows(frames: &[Frame], prefix: &str, len: usize, starts: &[usize]) -> Result<Vec<Sequence>> {
    starts
        .iter()
        .map(|&s| {
            if len == 0 || s + len > frames.len() {
                return Err(Error::Shape(format!(
                    "window [{s}, {}) outside traversal of {} frames",
                    s + len,
                    frames.len()
                )));
            }
            Sequence::new(format!("{prefix}-L{len}-{s:05}"), frames[s..s + len].to_vec())
        })
        .collect()
}

/// Traversals to re-window at each tested length.
#[derive(Debug, Clone, Copy)]
pub struct SeqLengthSetup<'a> {
    pub database_frames: &'a [Frame],
    pub query_frames: &'a [Frame],
    pub query_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub length: usize,
    pub descriptor_dim: usize,
    pub report: EvalReport,
}

/// Recall per sequence length. Database windows use stride 1; query windows
/// start at the same frames for every length so the query set is fixed.
pub fn experiment_seq_length(
    head: &Head,
    setup: SeqLengthSetup<'_>,
    lengths: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<LengthRow>> {
    if !head.is_length_flexible() {
        return Err(Error::UnsupportedHead(format!(
            "{} head has a fixed input length and cannot be evaluated at other lengths",
            head.kind().as_str()
        )));
    }
    if setup.query_stride == 0 {
        return Err(Error::Config("query stride must be positive".into()));
    }
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    if max_len == 0 || lengths.contains(&0) {
        return Err(Error::Config(format!("sequence lengths must be positive, got {lengths:?}")));
    }
    if setup.query_frames.len() < max_len || setup.database_frames.len() < max_len {
        return Err(Error::Shape(format!("traversals are shorter than the longest length {max_len}")));
    }
    let query_starts: Vec<usize> = (0..=setup.query_frames.len() - max_len).step_by(setup.query_stride).collect();
    lengths
        .iter()
        .map(|&len| {
            let db_starts: Vec<usize> = (0..=setup.database_frames.len() - len).collect();
            let database = cut_windows(setup.database_frames, "db", len, &db_starts)?;
            let queries = cut_windows(setup.query_frames, "q", len, &query_starts)?;
            let descriptor_dim = head.output_dim(len, database[0].dim())?;
            let index = RetrievalIndex::build(&database, &head.describe_all(&database)?)?;
            let report = evaluate(&index, &queries, head, cfg)?;
            Ok(LengthRow { length: len, descriptor_dim, report })
        })
        .collect()
}
