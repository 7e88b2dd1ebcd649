//! Independent reference implementations used as test oracles. None of these
//! call into the code under test beyond plain data accessors.
#![allow(dead_code)]

pub mod fd;

use seqplace::{GeoTag, LocalDescriptorSet};

pub const FD_EPS: f64 = 1e-3;

/// Five-point central finite-difference gradient of `f` at `x` with step
/// `FD_EPS`; truncation error is fourth order in the step.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |h: f64| {
                probe[i] = orig + h;
                f(&probe)
            };
            let g = (-at(2.0 * FD_EPS) + 8.0 * at(FD_EPS) - 8.0 * at(-FD_EPS) + at(-2.0 * FD_EPS)) / (12.0 * FD_EPS);
            probe[i] = orig;
            g
        })
        .collect()
}

/// `|a - n| / max(|a| + |n|, floor)` over whole vectors. The floor sits above
/// the roundoff of a difference quotient, so two vanishing gradients agree.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-6)
}

/// Single-image NetVLAD written as two explicit loops over clusters and
/// descriptors, with intra- and global L2 normalization.
pub fn netvlad_two_loop(
    x: &[Vec<f64>],
    centroids: &[Vec<f64>],
    weights: &[Vec<f64>],
    bias: &[f64],
    intra: bool,
) -> Vec<f64> {
    let k = centroids.len();
    let d = centroids[0].len();
    let mut out = Vec::with_capacity(k * d);
    for kk in 0..k {
        let mut block = vec![0.0; d];
        for xm in x {
            let logits: Vec<f64> =
                (0..k).map(|j| weights[j].iter().zip(xm).map(|(w, v)| w * v).sum::<f64>() + bias[j]).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let a = (logits[kk] - mx).exp() / z;
            for j in 0..d {
                block[j] += a * (xm[j] - centroids[kk][j]);
            }
        }
        if intra {
            let n = block.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            block.iter_mut().for_each(|v| *v /= n);
        }
        out.extend(block);
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn rows(set: &LocalDescriptorSet) -> Vec<Vec<f64>> {
    set.iter().map(|r| r.to_vec()).collect()
}

/// Full sort of every database row by (L2 distance, id).
pub fn naive_knn(db: &[Vec<f32>], ids: &[String], q: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = db
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.iter().zip(q).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>()))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(ids[a.0].cmp(&ids[b.0])));
    all.truncate(n);
    all.into_iter().map(|(i, d)| (i, d.sqrt())).collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues descending and matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|i| (m[i][i], (0..n).map(|k| v[k][i]).collect())).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    pairs.into_iter().unzip()
}

/// Sample covariance with the `n - 1` denominator.
pub fn covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect()
}

/// Min over all frame pairs of Euclidean distance, compared strictly.
pub fn brute_force_match(q: &[GeoTag], d: &[GeoTag], threshold: f64) -> bool {
    let mut best = f64::INFINITY;
    for a in q {
        for b in d {
            let dist = ((a.easting - b.easting).powi(2) + (a.northing - b.northing).powi(2)).sqrt();
            best = best.min(dist);
        }
    }
    best < threshold
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
