//! k-means++ seeding followed by a fixed number of Lloyd iterations.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Sequence;
use crate::error::{Error, Result};

use super::seqvlad::{SeqVlad, SeqVladParams};

pub const DEFAULT_LLOYD_ITERATIONS: usize = 10;
pub const DEFAULT_SAMPLE_SIZE: usize = 50_000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Cluster `data` (`n x dim`) into `k` centroids.
pub fn kmeans(data: &[f64], dim: usize, k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values is not a multiple of dim {dim}", data.len())));
    }
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[0..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centroids.extend(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(point(i), &centroids, dim).0;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for kk in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[kk] > 0 {
                for j in 0..dim {
                    centroids[kk * dim + j] = sums[kk * dim + j] / counts[kk] as f64;
                }
            }
        }
    }
    Ok(centroids)
}

/// Sample up to `sample_size` local descriptors from `seqs` without replacement.
pub fn sample_local_descriptors(seqs: &[Sequence], sample_size: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, usize)> {
    let first = seqs.first().ok_or_else(|| Error::Config("no sequences to sample from".into()))?;
    let dim = first.dim();
    let mut locals: Vec<&[f32]> = Vec::new();
    for s in seqs {
        if s.dim() != dim {
            return Err(Error::Shape(format!("sequence {} has D={} but expected {dim}", s.seq_id(), s.dim())));
        }
        for f in s.frames() {
            for c in 0..f.features.cells() {
                locals.push(f.features.cell(c));
            }
        }
    }
    let take = sample_size.min(locals.len());
    let mut picked = index::sample(rng, locals.len(), take).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(take * dim);
    for i in picked {
        out.extend(locals[i].iter().map(|&v| v as f64));
    }
    Ok((out, dim))
}

/// SeqVLAD head whose centroids come from k-means over training descriptors.
pub fn init_seqvlad(seqs: &[Sequence], k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<SeqVlad> {
    let (data, dim) = sample_local_descriptors(seqs, DEFAULT_SAMPLE_SIZE, rng)?;
    let centroids = kmeans(&data, dim, k, DEFAULT_LLOYD_ITERATIONS, rng)?;
    Ok(SeqVlad::new(SeqVladParams::from_centroids(k, dim, centroids, alpha)?))
}
