//! Sequence matching over a frame-to-frame similarity matrix, assuming
//! constant velocity along the database traversal.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default set of relative velocities searched per start offset.
pub const DEFAULT_VELOCITIES: [f64; 3] = [0.8, 1.0, 1.25];

/// Cosine similarities between query frames (rows) and database frames (cols).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (ab / denom).clamp(-1.0, 1.0)
    }
}

impl SimilarityMatrix {
    /// `query` and `database` are row-major frame descriptor matrices of width `dim`.
    pub fn from_frames(query: &[f64], database: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || query.len() % dim != 0 || database.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "frame matrices of {} and {} values do not have width {dim}",
                query.len(),
                database.len()
            )));
        }
        let rows = query.len() / dim;
        let cols = database.len() / dim;
        let mut values = Vec::with_capacity(rows * cols);
        for q in query.chunks_exact(dim) {
            for d in database.chunks_exact(dim) {
                values.push(cosine(q, d));
            }
        }
        Ok(SimilarityMatrix { rows, cols, values })
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", values.len())));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("similarities must lie in [-1, 1]".into()));
        }
        Ok(SimilarityMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqMatch {
    pub start: usize,
    pub velocity: f64,
    pub score: f64,
}

/// Best constant-velocity line through `sim`: row `i` maps to column
/// `start + round(v * i)`. Lines leaving the matrix are skipped. Ties keep
/// the earliest start, then the earliest velocity in `velocities`.
pub fn seq_match_score(sim: &SimilarityMatrix, velocities: &[f64]) -> Result<SeqMatch> {
    if velocities.is_empty() || velocities.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!("velocities must be finite and non-negative, got {velocities:?}")));
    }
    if sim.rows == 0 || sim.cols < sim.rows.min(1) {
        return Err(Error::Shape("similarity matrix is empty".into()));
    }
    let mut best: Option<SeqMatch> = None;
    for start in 0..sim.cols {
        for &v in velocities {
            let last = start as f64 + (v * (sim.rows - 1) as f64).round();
            if last >= sim.cols as f64 {
                continue;
            }
            let score: f64 = (0..sim.rows).map(|i| sim.get(i, start + (v * i as f64).round() as usize)).sum();
            if best.is_none_or(|b| score > b.score) {
                best = Some(SeqMatch { start, velocity: v, score });
            }
        }
    }
    best.ok_or_else(|| {
        Error::Shape(format!(
            "no velocity line of {} query frames fits in {} database frames",
            sim.rows, sim.cols
        ))
    })
}

/// Rank database sequences for one query by their best line score,
/// descending; ties go to the smaller `ids` entry. Returns `(db index, score)`.
pub fn rank_by_sequence_matching(
    query: &[f64],
    database: &[Vec<f64>],
    ids: &[String],
    dim: usize,
    velocities: &[f64],
    n: usize,
) -> Result<Vec<(usize, f64)>> {
    if database.len() != ids.len() {
        return Err(Error::Shape(format!("{} database sequences but {} ids", database.len(), ids.len())));
    }
    if database.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut scored: Vec<(usize, f64)> = database
        .par_iter()
        .enumerate()
        .map(|(j, db)| {
            let sim = SimilarityMatrix::from_frames(query, db, dim)?;
            Ok((j, seq_match_score(&sim, velocities).map(|m| m.score).unwrap_or(f64::NEG_INFINITY)))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0])));
    scored.truncate(n);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    #[test]
    fn self_match_aligns_with_unit_velocity() {
        let frames = identity(8);
        let q = frames[2 * 8..7 * 8].to_vec();
        let sim = SimilarityMatrix::from_frames(&q, &frames, 8).unwrap();
        let m = seq_match_score(&sim, &DEFAULT_VELOCITIES).unwrap();
        assert_eq!((m.start, m.velocity, m.score), (2, 1.0, 5.0));
    }

    #[test]
    fn out_of_bounds_lines_are_skipped() {
        let sim = SimilarityMatrix::from_values(3, 3, vec![0.5; 9]).unwrap();
        let m = seq_match_score(&sim, &[1.25, 1.0]).unwrap();
        // 1.25 reaches column round(2.5) = 3 from start 0, so only v = 1 fits.
        assert_eq!((m.start, m.velocity), (0, 1.0));
        let wide = SimilarityMatrix::from_values(3, 2, vec![0.5; 6]).unwrap();
        assert!(matches!(seq_match_score(&wide, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn reversed_database_scores_below_forward() {
        let frames = identity(5);
        let mut rev = Vec::new();
        for r in frames.chunks_exact(5).rev() {
            rev.extend_from_slice(r);
        }
        let fwd = seq_match_score(&SimilarityMatrix::from_frames(&frames, &frames, 5).unwrap(), &DEFAULT_VELOCITIES)
            .unwrap();
        let bwd =
            seq_match_score(&SimilarityMatrix::from_frames(&frames, &rev, 5).unwrap(), &DEFAULT_VELOCITIES).unwrap();
        assert!(bwd.score < fwd.score);
    }

    #[test]
    fn ranking_prefers_matching_sequence() {
        let frames = identity(4);
        let other: Vec<f64> = frames.iter().map(|v| 1.0 - v).collect();
        let ids = vec!["x".to_string(), "y".to_string()];
        let r = rank_by_sequence_matching(&frames, &[other, frames.clone()], &ids, 4, &[1.0], 5).unwrap();
        assert_eq!(r[0].0, 1);
        assert_eq!(r.len(), 2);
    }
}
