//! Query latency and memory as a function of database size.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::GeoTag;
use crate::error::{Error, Result};
use crate::retrieval::{memory_estimate_bytes, RetrievalIndex};

use super::{csv_err, finish_csv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub warmup: usize,
    pub measured: usize,
    pub top_n: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![10_000, 20_000, 40_000, 80_000],
            dims: vec![512],
            warmup: 10,
            measured: 100,
            top_n: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_db: usize,
    pub dim: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 paired points, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept: my - slope * mx, r2 })
}

fn unit_rows(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|v| (v / norm) as f32));
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Time single-query exhaustive search over random unit descriptors.
pub fn bench_knn(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.measured == 0 || cfg.top_n == 0 {
        return Err(Error::Config("bench needs at least one measured query and top_n >= 1".into()));
    }
    let mut rows = Vec::new();
    for &dim in &cfg.dims {
        let Some(&largest) = cfg.sizes.iter().max() else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(dim as u64);
        let data = unit_rows(largest, dim, &mut rng);
        let queries: Vec<Vec<f64>> = unit_rows(cfg.warmup + cfg.measured, dim, &mut rng)
            .chunks_exact(dim)
            .map(|q| q.iter().map(|&v| v as f64).collect())
            .collect();
        for &n in &cfg.sizes {
            let ids = (0..n).map(|i| format!("{i:08}")).collect();
            let index = RetrievalIndex::from_rows(dim, data[..n * dim].to_vec(), ids, vec![Vec::<GeoTag>::new(); n])?;
            let mut times = Vec::with_capacity(cfg.measured);
            for (i, q) in queries.iter().enumerate() {
                let t = Instant::now();
                std::hint::black_box(index.knn_search(q, cfg.top_n)?);
                if i >= cfg.warmup {
                    times.push(t.elapsed().as_secs_f64() * 1e3);
                }
            }
            let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
            rows.push(BenchRow { n_db: n, dim, mean_ms, median_ms: median(&mut times), memory_bytes: memory_estimate_bytes(n, dim) });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n_db", "dim", "mean_ms", "median_ms", "memory_bytes"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n_db.to_string(),
            r.dim.to_string(),
            format!("{:.6}", r.mean_ms),
            format!("{:.6}", r.median_ms),
            r.memory_bytes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_header_only() {
        let cfg = BenchConfig { sizes: vec![], ..BenchConfig::default() };
        let rows = bench_knn(&cfg).unwrap();
        assert_eq!(bench_csv(&rows).unwrap(), "n_db,dim,mean_ms,median_ms,memory_bytes\n");
    }

    #[test]
    fn exact_line_fits_perfectly() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_sweep_reports_memory() {
        let cfg = BenchConfig { sizes: vec![50, 100], dims: vec![8], warmup: 1, measured: 3, top_n: 5, seed: 1 };
        let rows = bench_knn(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].memory_bytes, 3200);
    }
}
