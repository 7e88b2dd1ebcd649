//! Recall@N under the 25 m any-frame criterion, and the experiment suites
//! built on it.

mod bench;
mod experiments;
mod geo;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{GeoTag, Sequence, SequentialDescriptor};
use crate::error::{Error, Result};
use crate::heads::{FrameHead, Head};
use crate::retrieval::{rank_by_sequence_matching, RetrievalIndex};

pub use bench::{bench_csv, bench_knn, linear_fit, BenchConfig, BenchRow, LinearFit};
pub use geo::GeoIndex;
pub use experiments::{
    cut_windows, experiment_reverse_db, experiment_seq_length, LengthRow, Method, ReverseDbResult, SeqLengthSetup,
};

pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
pub const DEFAULT_RECALL_NS: [usize; 4] = [1, 5, 10, 20];

/// True iff some query frame is strictly closer than `threshold_m` to some
/// database frame.
pub fn is_correct_match_tags(query: &[GeoTag], database: &[GeoTag], threshold_m: f64) -> bool {
    query.iter().any(|q| database.iter().any(|d| q.distance_unchecked(d) < threshold_m))
}

pub fn is_correct_match(query: &Sequence, database: &Sequence) -> bool {
    is_correct_match_tags(&query.geotags(), &database.geotags(), DEFAULT_THRESHOLD_M)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ns: Vec<usize>,
    pub threshold_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ns: DEFAULT_RECALL_NS.to_vec(), threshold_m: DEFAULT_THRESHOLD_M }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns.contains(&0) {
            return Err(Error::Config(format!("recall cutoffs must be positive, got {:?}", self.ns)));
        }
        if !(self.threshold_m.is_finite() && self.threshold_m > 0.0) {
            return Err(Error::Config(format!("threshold must be positive, got {}", self.threshold_m)));
        }
        Ok(())
    }

    fn max_n(&self) -> usize {
        self.ns.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub query_id: String,
    /// Database ids in rank order, up to the largest N.
    pub retrieved: Vec<String>,
    /// 1-based rank of the first correct match among `retrieved`.
    pub first_correct_rank: Option<usize>,
    pub positives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub extract_ms_per_seq: f64,
    pub match_ms_per_query: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ns: Vec<usize>,
    /// `recalls[i]` is recall@`ns[i]`.
    pub recalls: Vec<f64>,
    pub threshold_m: f64,
    pub queries_total: usize,
    /// Queries with no geographic positive in the database; excluded from recall.
    pub queries_without_positive: usize,
    pub database_size: usize,
    pub descriptor_dim: usize,
    pub memory_bytes: u64,
    pub timing: Timing,
    pub hits: Vec<QueryHit>,
}

impl EvalReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&x| x == n).map(|i| self.recalls[i])
    }

    pub fn queries_evaluated(&self) -> usize {
        self.queries_total - self.queries_without_positive
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `n,recall` row per cutoff.
    pub fn recalls_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "n", "recall"]).map_err(csv_err)?;
        for (n, r) in self.ns.iter().zip(&self.recalls) {
            w.write_record([self.method.clone(), n.to_string(), format!("{r:.6}")]).map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Per-query hit table.
    pub fn hits_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["query_id", "positives", "first_correct_rank", "retrieved"]).map_err(csv_err)?;
        for h in &self.hits {
            w.write_record([
                h.query_id.clone(),
                h.positives.to_string(),
                h.first_correct_rank.map(|r| r.to_string()).unwrap_or_default(),
                h.retrieved.join(" "),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Score rankings against geography. `rankings[q]` lists database indices
/// best first.
pub fn score_rankings(
    method: &str,
    queries: &[Sequence],
    rankings: &[Vec<usize>],
    db_ids: &[String],
    db_geotags: &[Vec<GeoTag>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if rankings.len() != queries.len() {
        return Err(Error::Shape(format!("{} rankings for {} queries", rankings.len(), queries.len())));
    }
    let max_n = cfg.max_n();
    let geo = GeoIndex::new(db_geotags.to_vec(), cfg.threshold_m);
    let hits: Vec<QueryHit> = queries
        .par_iter()
        .zip(rankings)
        .map(|(q, ranking)| {
            let qtags = q.geotags();
            let positives = geo.positives(&qtags).len();
            let retrieved: Vec<usize> = ranking.iter().copied().take(max_n).collect();
            let first_correct_rank = retrieved
                .iter()
                .position(|&j| geo.is_positive(&qtags, j))
                .map(|r| r + 1);
            QueryHit {
                query_id: q.seq_id().to_string(),
                retrieved: retrieved.iter().map(|&j| db_ids[j].clone()).collect(),
                first_correct_rank,
                positives,
            }
        })
        .collect();
    let without = hits.iter().filter(|h| h.positives == 0).count();
    if without > 0 {
        log::info!("{method}: {without} of {} queries have no positive and are excluded", hits.len());
    }
    let denom = (hits.len() - without) as f64;
    let recalls = cfg
        .ns
        .iter()
        .map(|&n| {
            if denom == 0.0 {
                return 0.0;
            }
            let found =
                hits.iter().filter(|h| h.positives > 0 && h.first_correct_rank.is_some_and(|r| r <= n)).count();
            found as f64 / denom
        })
        .collect();
    Ok(EvalReport {
        method: method.to_string(),
        ns: cfg.ns.clone(),
        recalls,
        threshold_m: cfg.threshold_m,
        queries_total: hits.len(),
        queries_without_positive: without,
        database_size: db_ids.len(),
        descriptor_dim: 0,
        memory_bytes: 0,
        timing: Timing::default(),
        hits,
    })
}

/// Evaluate precomputed query descriptors against `index`.
pub fn evaluate_descriptors(
    method: &str,
    index: &RetrievalIndex,
    queries: &[Sequence],
    descriptors: &[SequentialDescriptor],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if queries.len() != descriptors.len() {
        return Err(Error::Shape(format!("{} queries but {} descriptors", queries.len(), descriptors.len())));
    }
    let start = Instant::now();
    let neighbours = index.knn_batch(descriptors, cfg.max_n())?;
    let match_ms = start.elapsed().as_secs_f64() * 1e3;
    let rankings: Vec<Vec<usize>> = neighbours.into_iter().map(|h| h.into_iter().map(|n| n.index).collect()).collect();
    let db_geotags: Vec<Vec<GeoTag>> = (0..index.len()).map(|i| index.geotags(i).to_vec()).collect();
    let mut report = score_rankings(method, queries, &rankings, index.ids(), &db_geotags, cfg)?;
    report.descriptor_dim = index.dim();
    report.memory_bytes = index.memory_bytes();
    report.timing.match_ms_per_query = match_ms / queries.len().max(1) as f64;
    Ok(report)
}

/// Describe `queries` with `head` and score them against `index`.
pub fn evaluate(index: &RetrievalIndex, queries: &[Sequence], head: &Head, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let start = Instant::now();
    let descs = head.describe_all(queries)?;
    let extract_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut report = evaluate_descriptors(head.kind().as_str(), index, queries, &descs, cfg)?;
    report.timing.extract_ms_per_seq = extract_ms / queries.len().max(1) as f64;
    Ok(report)
}

/// Rank every database sequence for every query by sequence matching over
/// per-frame descriptors.
pub fn evaluate_sequence_matching(
    database: &[Sequence],
    queries: &[Sequence],
    frame_head: &FrameHead,
    velocities: &[f64],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let first = database.first().ok_or(Error::EmptyIndex)?;
    let dim = frame_head.output_dim(first.dim());
    let start = Instant::now();
    let db_frames: Vec<Vec<f64>> = database.par_iter().map(|s| frame_head.describe_frames(s)).collect::<Result<_>>()?;
    let q_frames: Vec<Vec<f64>> = queries.par_iter().map(|s| frame_head.describe_frames(s)).collect::<Result<_>>()?;
    let extract_ms = start.elapsed().as_secs_f64() * 1e3;
    let ids: Vec<String> = database.iter().map(|s| s.seq_id().to_string()).collect();
    let start = Instant::now();
    let max_n = cfg.max_n();
    let rankings: Vec<Vec<usize>> = q_frames
        .iter()
        .map(|q| {
            Ok(rank_by_sequence_matching(q, &db_frames, &ids, dim, velocities, max_n)?.into_iter().map(|r| r.0).collect())
        })
        .collect::<Result<_>>()?;
    let match_ms = start.elapsed().as_secs_f64() * 1e3;
    let db_geotags: Vec<Vec<GeoTag>> = database.iter().map(|s| s.geotags()).collect();
    let mut report = score_rankings("seqmatch", queries, &rankings, &ids, &db_geotags, cfg)?;
    let frames: usize = database.iter().map(|s| s.len()).sum();
    report.descriptor_dim = dim;
    report.memory_bytes = crate::retrieval::memory_estimate_bytes(frames, dim);
    report.timing = Timing {
        extract_ms_per_seq: extract_ms / (database.len() + queries.len()) as f64,
        match_ms_per_query: match_ms / queries.len().max(1) as f64,
    };
    Ok(report)
}
