//! Deterministic synthetic world standing in for real street-level imagery.
//!
//! Each split owns a smooth random route with landmarks scattered around it.
//! A frame is a virtual camera on the route whose grid cells look at points
//! ahead of it; a cell's feature is the softmax-weighted mix of the embeddings
//! of the landmarks near the point it looks at. Two traversals (database and
//! query) drive the same route and differ by per-frame noise and by a
//! per-traversal appearance shift.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{DatasetWriter, Role, Split};
use crate::datamodel::{FeatureLayout, FeatureTensor, Frame, GeoTag, Sequence};
use crate::error::{Error, Result};

/// Parameters of the synthetic world. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub seed: u64,
    /// Landmarks per split.
    pub n_landmarks: usize,
    /// Feature dimension `D`.
    pub landmark_dim: usize,
    /// Per-value Gaussian noise on every frame feature.
    pub noise_sigma: f64,
    /// Magnitude of the per-traversal appearance shift.
    pub domain_shift_sigma: f64,
    /// Number of shared appearance directions the shift lives in.
    pub domain_shift_rank: usize,
    pub route_length_m: f64,
    pub frame_spacing_m: f64,
    pub seq_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// When non-zero, frames use a token layout with this many tokens.
    pub tokens: usize,
    /// Spatial kernel width of a landmark.
    pub landmark_width_m: f64,
    /// Landmarks are scattered up to this far from the route centerline.
    pub landmark_spread_m: f64,
    /// Fixed per-cell jitter of the viewing offsets.
    pub cell_jitter_m: f64,
    /// Along-route offset of the query traversal relative to the database.
    pub query_offset_m: f64,
    /// Every `query_stride`-th window of the query traversal becomes a query.
    pub query_stride: usize,
    /// Rank of the shared clutter subspace (0 disables clutter).
    pub clutter_rank: usize,
    /// Per-cell magnitude of clutter inside that subspace.
    pub clutter_sigma: f64,
    /// When non-zero, landmark embeddings are drawn from this many shared
    /// appearance types, so distant places can look alike.
    pub appearance_vocab: usize,
    /// Per-landmark deviation from its appearance type.
    pub appearance_jitter: f64,
    /// L2-normalize every cell feature after noise, as backbone features
    /// usually are before pooling.
    pub normalize_cells: bool,
    /// Instead of a random shift per traversal, leave database traversals
    /// unshifted and move every query traversal by one shared shift of norm
    /// exactly `domain_shift_sigma`, like a fixed change of conditions.
    pub shift_per_role: bool,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_landmarks: 1000,
            landmark_dim: 64,
            noise_sigma: 0.1,
            domain_shift_sigma: 1.0,
            domain_shift_rank: 1,
            route_length_m: 10_020.0,
            frame_spacing_m: 5.0,
            seq_len: 5,
            grid_h: 3,
            grid_w: 3,
            tokens: 0,
            landmark_width_m: 6.0,
            landmark_spread_m: 25.0,
            cell_jitter_m: 1.0,
            query_offset_m: 2.5,
            query_stride: 5,
            clutter_rank: 0,
            clutter_sigma: 0.0,
            appearance_vocab: 16,
            appearance_jitter: 0.3,
            normalize_cells: false,
            shift_per_role: true,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_landmarks == 0 {
            return bad("n_landmarks must be >= 1");
        }
        if self.landmark_dim == 0 || self.seq_len == 0 || self.query_stride == 0 {
            return bad("landmark_dim, seq_len and query_stride must be >= 1");
        }
        if self.tokens == 0 && (self.grid_h == 0 || self.grid_w == 0) {
            return bad("grid_h and grid_w must be >= 1");
        }
        if !(self.frame_spacing_m > 0.0 && self.frame_spacing_m.is_finite()) {
            return bad("frame_spacing_m must be positive");
        }
        if !(self.route_length_m > 0.0 && self.route_length_m.is_finite()) {
            return bad("route_length_m must be positive");
        }
        if !(self.landmark_width_m > 0.0) {
            return bad("landmark_width_m must be positive");
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("domain_shift_sigma", self.domain_shift_sigma),
            ("cell_jitter_m", self.cell_jitter_m),
            ("landmark_spread_m", self.landmark_spread_m),
            ("clutter_sigma", self.clutter_sigma),
            ("appearance_jitter", self.appearance_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.frames_per_traversal() < self.seq_len {
            return bad("route too short for one sequence");
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        if self.tokens > 0 {
            FeatureLayout::Tokens { t: self.tokens }
        } else {
            FeatureLayout::Grid { h: self.grid_h, w: self.grid_w }
        }
    }

    /// Frames recorded per traversal: one every `frame_spacing_m` along the route.
    pub fn frames_per_traversal(&self) -> usize {
        ((self.route_length_m / self.frame_spacing_m) + 1e-9).floor() as usize
    }

    /// Sliding windows (stride 1) per database traversal.
    pub fn database_sequences(&self) -> usize {
        (self.frames_per_traversal() + 1).saturating_sub(self.seq_len)
    }

    pub fn query_sequences(&self) -> usize {
        self.database_sequences().div_ceil(self.query_stride)
    }
}

/// One traversal plus the sequences cut from it.
#[derive(Debug, Clone)]
pub struct Traversal {
    pub frames: Vec<Frame>,
    pub sequences: Vec<Sequence>,
    /// `(seq_id, start, len)` for each sequence, in order.
    pub windows: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub database: Traversal,
    pub queries: Traversal,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticWorldConfig,
    pub splits: Vec<SplitData>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &SplitData {
        self.splits.iter().find(|s| s.split == split).expect("all splits generated")
    }

    /// Write blobs, `manifest.jsonl` and `world.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut writer = DatasetWriter::create(dir)?;
        for s in &self.splits {
            for (role, trav) in [(Role::Database, &s.database), (Role::Query, &s.queries)] {
                let file = format!("{}_{}.sqpf", s.split.as_str(), role.as_str());
                writer.write_traversal(s.split, role, &file, &trav.frames, &trav.windows)?;
            }
        }
        writer.finish()?;
        let echo = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(dir.join("world.json"), echo)?;
        Ok(())
    }
}

/// Build the whole world in memory. Pure function of `cfg`.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = cfg.landmark_dim;
    let mut world_rng = stream(cfg.seed, 0);
    let views = view_offsets(cfg, &mut world_rng);
    let shift_basis = orthonormal_basis(d, cfg.domain_shift_rank.min(d), &mut world_rng);
    let clutter_basis = orthonormal_basis(d, cfg.clutter_rank.min(d), &mut world_rng);
    let vocab: Vec<Vec<f64>> = (0..cfg.appearance_vocab).map(|_| unit_gaussian(d, &mut world_rng)).collect();
    let condition_shift = {
        let mut v = sample_shift(cfg, &shift_basis, &mut stream(cfg.seed, 100));
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|a| *a *= cfg.domain_shift_sigma / n);
        }
        v
    };
    let mut splits = Vec::with_capacity(3);
    for (si, split) in Split::ALL.iter().enumerate() {
        let mut rng = stream(cfg.seed, 1 + si as u64);
        let origin = (500_000.0 + 40_000.0 * si as f64, 4_000_000.0);
        let route = Route::random(origin, cfg.route_length_m + 200.0, &mut rng);
        let landmarks = Landmarks::random(cfg, &route, &vocab, &mut rng);
        let traversal = |role: Role, offset: f64, tag: u64| -> Result<Traversal> {
            let mut trng = stream(cfg.seed, 10 * (si as u64 + 1) + tag);
            let shift = if cfg.shift_per_role {
                match role {
                    Role::Database => vec![0.0; d],
                    Role::Query => condition_shift.clone(),
                }
            } else {
                sample_shift(cfg, &shift_basis, &mut trng)
            };
            let frames = render_traversal(
                cfg, *split, role, offset, &route, &landmarks, &views, &shift, &clutter_basis,
                &mut trng,
            )?;
            let stride = if role == Role::Query { cfg.query_stride } else { 1 };
            cut_windows(*split, role, frames, cfg.seq_len, stride)
        };
        let database = traversal(Role::Database, 0.0, 1)?;
        let queries = traversal(Role::Query, cfg.query_offset_m, 2)?;
        splits.push(SplitData { split: *split, database, queries });
    }
    Ok(SyntheticDataset { config: cfg.clone(), splits })
}

/// Generate the world and write it to `dir`.
pub fn generate_synthetic_dataset(cfg: &SyntheticWorldConfig, dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let ds = generate_world(cfg)?;
    ds.write(dir)?;
    Ok(ds)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|a| a / n).collect()
}

/// Route sampled every meter: position and heading.
struct Route {
    points: Vec<(f64, f64, f64)>,
    /// Arc length of `points[0]`; the route starts a little before s = 0.
    s0: f64,
}

impl Route {
    fn random(origin: (f64, f64), length: f64, rng: &mut ChaCha8Rng) -> Self {
        let s0 = -100.0;
        let n = (length - s0).ceil() as usize + 1;
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut curvature = 0.0f64;
        let (mut x, mut y) = origin;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push((x, y, heading));
            // Curvature itself drifts so the route bends smoothly.
            curvature = 0.98 * curvature + 0.002 * gaussian(rng);
            curvature = curvature.clamp(-0.02, 0.02);
            heading += curvature;
            x += heading.cos();
            y += heading.sin();
        }
        Self { points, s0 }
    }

    fn at(&self, s: f64) -> (f64, f64, f64) {
        let u = (s - self.s0).clamp(0.0, (self.points.len() - 1) as f64);
        let i = (u.floor() as usize).min(self.points.len() - 2);
        let t = u - i as f64;
        let (x0, y0, h0) = self.points[i];
        let (x1, y1, h1) = self.points[i + 1];
        (x0 + t * (x1 - x0), y0 + t * (y1 - y0), h0 + t * (h1 - h0))
    }
}

/// Landmark positions with a spatial hash for neighbourhood queries.
struct Landmarks {
    pos: Vec<(f64, f64)>,
    emb: Vec<f64>,
    dim: usize,
    bucket: f64,
    grid: HashMap<(i64, i64), Vec<usize>>,
    inv_two_w2: f64,
}

impl Landmarks {
    fn random(cfg: &SyntheticWorldConfig, route: &Route, vocab: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.landmark_dim;
        let mut pos = Vec::with_capacity(cfg.n_landmarks);
        let mut emb = Vec::with_capacity(cfg.n_landmarks * d);
        for _ in 0..cfg.n_landmarks {
            let s = rng.random_range(-30.0..cfg.route_length_m + 60.0);
            let lateral = rng.random_range(-cfg.landmark_spread_m..=cfg.landmark_spread_m);
            let (x, y, h) = route.at(s);
            pos.push((x - h.sin() * lateral, y + h.cos() * lateral));
            if vocab.is_empty() {
                emb.extend(unit_gaussian(d, rng));
            } else {
                let base = &vocab[rng.random_range(0..vocab.len())];
                let scale = cfg.appearance_jitter / (d as f64).sqrt();
                let v: Vec<f64> = base.iter().map(|b| b + scale * gaussian(rng)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                emb.extend(v.iter().map(|a| a / n));
            }
        }
        let bucket = 4.0 * cfg.landmark_width_m;
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &(x, y)) in pos.iter().enumerate() {
            grid.entry(((x / bucket).floor() as i64, (y / bucket).floor() as i64))
                .or_default()
                .push(i);
        }
        let w = cfg.landmark_width_m;
        Self { pos, emb, dim: d, bucket, grid, inv_two_w2: 1.0 / (2.0 * w * w) }
    }

    /// Softmax over landmarks of `-d^2 / 2w^2`, mixing their embeddings into `out`.
    fn feature_at(&self, p: (f64, f64), out: &mut [f64]) {
        let (bx, by) = ((p.0 / self.bucket).floor() as i64, (p.1 / self.bucket).floor() as i64);
        let mut near: Vec<usize> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = self.grid.get(&(bx + dx, by + dy)) {
                    near.extend_from_slice(v);
                }
            }
        }
        if near.is_empty() {
            near = (0..self.pos.len()).collect();
        }
        // Sorted so the accumulation order depends only on the location.
        near.sort_unstable();
        let logits: Vec<f64> = near
            .iter()
            .map(|&j| {
                let (x, y) = self.pos[j];
                -((p.0 - x).powi(2) + (p.1 - y).powi(2)) * self.inv_two_w2
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&j, &wgt) in near.iter().zip(&weights) {
            let a = wgt / total;
            if a < 1e-12 {
                continue;
            }
            let e = &self.emb[j * self.dim..(j + 1) * self.dim];
            for (o, v) in out.iter_mut().zip(e) {
                *o += a * v;
            }
        }
    }
}

/// (forward, lateral) viewing offsets for each cell, jittered once per world.
fn view_offsets(cfg: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let base: Vec<(f64, f64)> = match cfg.layout() {
        FeatureLayout::Grid { h, w } => (0..h)
            .flat_map(|r| {
                (0..w).map(move |c| (4.0 + 5.0 * r as f64, (c as f64 - (w as f64 - 1.0) / 2.0) * 6.0))
            })
            .collect(),
        FeatureLayout::Tokens { t } => (0..t)
            .map(|_| (rng.random_range(2.0..20.0), rng.random_range(-10.0..10.0)))
            .collect(),
    };
    let jitter = Normal::new(0.0, cfg.cell_jitter_m.max(0.0)).unwrap();
    base.into_iter()
        .map(|(f, l)| (f + jitter.sample(rng), l + jitter.sample(rng)))
        .collect()
}

/// `rank` orthonormal vectors in `R^dim`, row-major.
fn orthonormal_basis(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= dot * c);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

fn sample_shift(cfg: &SyntheticWorldConfig, basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = cfg.landmark_dim;
    let mut shift = vec![0.0; d];
    if cfg.domain_shift_sigma == 0.0 {
        return shift;
    }
    if basis.is_empty() {
        shift.iter_mut().for_each(|s| *s = cfg.domain_shift_sigma * gaussian(rng) / (d as f64).sqrt());
    } else {
        let scale = cfg.domain_shift_sigma / (basis.len() as f64).sqrt();
        for b in basis {
            let g = scale * gaussian(rng);
            shift.iter_mut().zip(b).for_each(|(s, v)| *s += g * v);
        }
    }
    shift
}

#[allow(clippy::too_many_arguments)]
fn render_traversal(
    cfg: &SyntheticWorldConfig,
    split: Split,
    role: Role,
    offset: f64,
    route: &Route,
    landmarks: &Landmarks,
    views: &[(f64, f64)],
    shift: &[f64],
    clutter: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Frame>> {
    let d = cfg.landmark_dim;
    let n = cfg.frames_per_traversal();
    let layout = cfg.layout();
    let mut cell = vec![0.0f64; d];
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let s = k as f64 * cfg.frame_spacing_m + offset;
        let (x, y, h) = route.at(s);
        let (fx, fy) = (h.cos(), h.sin());
        let mut data = Vec::with_capacity(layout.cells() * d);
        for &(fwd, lat) in views {
            let p = (x + fx * fwd - fy * lat, y + fy * fwd + fx * lat);
            landmarks.feature_at(p, &mut cell);
            for (c, s) in cell.iter_mut().zip(shift) {
                *c += s;
            }
            if cfg.clutter_sigma > 0.0 && !clutter.is_empty() {
                let scale = cfg.clutter_sigma / (clutter.len() as f64).sqrt();
                for b in clutter {
                    let g = scale * gaussian(rng);
                    cell.iter_mut().zip(b).for_each(|(c, v)| *c += g * v);
                }
            }
            if cfg.noise_sigma > 0.0 {
                for c in cell.iter_mut() {
                    *c += cfg.noise_sigma * gaussian(rng);
                }
            }
            if cfg.normalize_cells {
                let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    cell.iter_mut().for_each(|v| *v /= n);
                }
            }
            data.extend(cell.iter().map(|&v| v as f32));
        }
        frames.push(Frame {
            frame_id: format!("{}-{}-f{k:05}", split.as_str(), role.as_str()),
            geotag: GeoTag::new(x, y)?,
            features: FeatureTensor::new(layout, d, data)?,
        });
    }
    Ok(frames)
}

fn cut_windows(split: Split, role: Role, frames: Vec<Frame>, len: usize, stride: usize) -> Result<Traversal> {
    let mut sequences = Vec::new();
    let mut windows = Vec::new();
    for start in (0..=frames.len().saturating_sub(len)).step_by(stride) {
        let id = format!("{}-{}-{start:05}", split.as_str(), role.as_str());
        sequences.push(Sequence::new(id.clone(), frames[start..start + len].to_vec())?);
        windows.push((id, start, len));
    }
    Ok(Traversal { frames, sequences, windows })
}
