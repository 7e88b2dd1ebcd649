//! SeqVLAD: VLAD pooling over the local descriptors of every frame.
//!
//! With `a_k(x) = softmax_k(w_k . x + b_k)` the pooled block for cluster `k` is
//! `V(k) = sum_m a_k(x_m) (x_m - c_k)`. Blocks are optionally L2-normalized one
//! by one (intra-normalization) and the concatenation is L2-normalized.
//!
//! The sum runs over the descriptors in lexicographic order, so the output is
//! bit-identical under any permutation of frames or cells.

use std::cmp::Ordering;

use crate::datamodel::{LocalDescriptorSet, SequentialDescriptor};
use crate::error::{Error, Result};

use super::{l2_normalize, l2_normalize_backward};

/// Largest `K * D` accepted unless overridden.
pub const DEFAULT_MAX_OUTPUT_DIM: usize = 1 << 20;

/// NetVLAD-style sharpness used when deriving assignment weights from centroids.
pub const DEFAULT_ALPHA: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SeqVladParams {
    k: usize,
    dim: usize,
    /// `K x D` row-major.
    pub centroids: Vec<f64>,
    /// `K x D` row-major.
    pub assign_weights: Vec<f64>,
    /// `K`.
    pub assign_bias: Vec<f64>,
}

impl SeqVladParams {
    pub fn new(
        k: usize,
        dim: usize,
        centroids: Vec<f64>,
        assign_weights: Vec<f64>,
        assign_bias: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("SeqVLAD needs K >= 1 and D >= 1".into()));
        }
        if centroids.len() != k * dim || assign_weights.len() != k * dim || assign_bias.len() != k {
            return Err(Error::Shape(format!(
                "SeqVLAD params for K={k}, D={dim}: got {} centroids, {} weights, {} biases",
                centroids.len(),
                assign_weights.len(),
                assign_bias.len()
            )));
        }
        let all = centroids.iter().chain(&assign_weights).chain(&assign_bias);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite SeqVLAD parameter".into()));
        }
        Ok(Self { k, dim, centroids, assign_weights, assign_bias })
    }

    /// `w_k = 2 alpha c_k`, `b_k = -alpha |c_k|^2`: the softmax then approximates
    /// nearest-centroid assignment.
    pub fn from_centroids(k: usize, dim: usize, centroids: Vec<f64>, alpha: f64) -> Result<Self> {
        if centroids.len() != k * dim {
            return Err(Error::Shape(format!("{} centroid values for K={k}, D={dim}", centroids.len())));
        }
        let assign_weights = centroids.iter().map(|c| 2.0 * alpha * c).collect();
        let assign_bias = centroids
            .chunks_exact(dim)
            .map(|c| -alpha * c.iter().map(|v| v * v).sum::<f64>())
            .collect();
        Self::new(k, dim, centroids, assign_weights, assign_bias)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    fn weight(&self, k: usize) -> &[f64] {
        &self.assign_weights[k * self.dim..(k + 1) * self.dim]
    }
}

/// Gradients of a scalar loss through [`SeqVlad::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeqVladGradients {
    pub centroids: Vec<f64>,
    pub assign_weights: Vec<f64>,
    pub assign_bias: Vec<f64>,
    /// `M x D`, in the input order of the local descriptors.
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqVlad {
    pub params: SeqVladParams,
    pub intra_norm: bool,
    pub max_output_dim: usize,
}

struct ForwardTrace {
    order: Vec<usize>,
    /// Soft-assignment, `M x K`, rows in `order`.
    assign: Vec<f64>,
    mass: Vec<f64>,
    /// Pre-normalization blocks `V(k)`, `K x D`.
    vlad: Vec<f64>,
    /// Intra-normalized blocks and their denominators.
    blocks: Vec<f64>,
    block_denoms: Vec<f64>,
    out: Vec<f64>,
    global_denom: f64,
}

impl SeqVlad {
    pub fn new(params: SeqVladParams) -> Self {
        Self { params, intra_norm: true, max_output_dim: DEFAULT_MAX_OUTPUT_DIM }
    }

    pub fn with_intra_norm(mut self, on: bool) -> Self {
        self.intra_norm = on;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.params.k * self.params.dim
    }

    fn check(&self, set: &LocalDescriptorSet) -> Result<()> {
        if set.dim() != self.params.dim {
            return Err(Error::Shape(format!(
                "local descriptors have D={} but SeqVLAD expects D={}",
                set.dim(),
                self.params.dim
            )));
        }
        if self.output_dim() > self.max_output_dim {
            return Err(Error::Config(format!(
                "K*D = {} exceeds the configured maximum {}",
                self.output_dim(),
                self.max_output_dim
            )));
        }
        Ok(())
    }

    /// Soft-assignment rows `a_k(x_m)`, `M x K`, in input order.
    pub fn soft_assign(&self, set: &LocalDescriptorSet) -> Result<Vec<f64>> {
        self.check(set)?;
        let k = self.params.k;
        let mut out = vec![0.0; set.count() * k];
        for (m, x) in set.iter().enumerate() {
            self.assign_row(x, &mut out[m * k..(m + 1) * k]);
        }
        Ok(out)
    }

    fn assign_row(&self, x: &[f64], row: &mut [f64]) {
        let p = &self.params;
        for (kk, r) in row.iter_mut().enumerate() {
            *r = dot(p.weight(kk), x) + p.assign_bias[kk];
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        row.iter_mut().for_each(|r| *r /= total);
    }

    /// Residual blocks `V(k)` before any normalization, `K x D`.
    pub fn aggregate(&self, set: &LocalDescriptorSet) -> Result<Vec<f64>> {
        self.check(set)?;
        Ok(self.trace(set).vlad)
    }

    pub fn forward(&self, set: &LocalDescriptorSet) -> Result<SequentialDescriptor> {
        self.check(set)?;
        Ok(SequentialDescriptor::new(self.trace(set).out, true))
    }

    fn trace(&self, set: &LocalDescriptorSet) -> ForwardTrace {
        let (k, d) = (self.params.k, self.params.dim);
        let order = canonical_order(set);
        let mut assign = vec![0.0; set.count() * k];
        let mut mass = vec![0.0; k];
        let mut vlad = vec![0.0; k * d];
        for (row, &m) in order.iter().enumerate() {
            let x = set.vector(m);
            let a = &mut assign[row * k..(row + 1) * k];
            self.assign_row(x, a);
            for kk in 0..k {
                let w = a[kk];
                mass[kk] += w;
                let c = self.params.centroid(kk);
                let v = &mut vlad[kk * d..(kk + 1) * d];
                for j in 0..d {
                    v[j] += w * (x[j] - c[j]);
                }
            }
        }
        let mut blocks = vlad.clone();
        let mut block_denoms = vec![1.0; k];
        if self.intra_norm {
            for (kk, b) in blocks.chunks_exact_mut(d).enumerate() {
                block_denoms[kk] = l2_normalize(b);
            }
        }
        let mut out = blocks.clone();
        let global_denom = l2_normalize(&mut out);
        ForwardTrace { order, assign, mass, vlad, blocks, block_denoms, out, global_denom }
    }

    /// Backpropagate `upstream = dL/d(output)` to the parameters and inputs.
    pub fn backward(&self, set: &LocalDescriptorSet, upstream: &[f64]) -> Result<SeqVladGradients> {
        self.check(set)?;
        let (k, d) = (self.params.k, self.params.dim);
        if upstream.len() != k * d {
            return Err(Error::Shape(format!(
                "upstream gradient has {} values, SeqVLAD output has {}",
                upstream.len(),
                k * d
            )));
        }
        let t = self.trace(set);
        let mut d_vlad = l2_normalize_backward(&t.out, t.global_denom, upstream);
        if self.intra_norm {
            for kk in 0..k {
                let r = kk * d..(kk + 1) * d;
                let g = l2_normalize_backward(&t.blocks[r.clone()], t.block_denoms[kk], &d_vlad[r.clone()]);
                d_vlad[r].copy_from_slice(&g);
            }
        }

        let p = &self.params;
        let mut g_c = vec![0.0; k * d];
        for kk in 0..k {
            for j in 0..d {
                g_c[kk * d + j] = -t.mass[kk] * d_vlad[kk * d + j];
            }
        }
        let dv_dot_c: Vec<f64> = (0..k).map(|kk| dot(&d_vlad[kk * d..(kk + 1) * d], p.centroid(kk))).collect();

        let mut g_w = vec![0.0; k * d];
        let mut g_b = vec![0.0; k];
        let mut g_x = vec![0.0; set.count() * d];
        let mut d_assign = vec![0.0; k];
        for (row, &m) in t.order.iter().enumerate() {
            let x = set.vector(m);
            let a = &t.assign[row * k..(row + 1) * k];
            let gx = &mut g_x[m * d..(m + 1) * d];
            for kk in 0..k {
                let dv = &d_vlad[kk * d..(kk + 1) * d];
                d_assign[kk] = dot(dv, x) - dv_dot_c[kk];
                for j in 0..d {
                    gx[j] += a[kk] * dv[j];
                }
            }
            let mean: f64 = a.iter().zip(&d_assign).map(|(ai, di)| ai * di).sum();
            for kk in 0..k {
                let dz = a[kk] * (d_assign[kk] - mean);
                g_b[kk] += dz;
                let w = p.weight(kk);
                let gw = &mut g_w[kk * d..(kk + 1) * d];
                for j in 0..d {
                    gw[j] += dz * x[j];
                    gx[j] += dz * w[j];
                }
            }
        }
        Ok(SeqVladGradients { centroids: g_c, assign_weights: g_w, assign_bias: g_b, input: g_x })
    }
}

/// Indices of the local descriptors sorted lexicographically by value.
fn canonical_order(set: &LocalDescriptorSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.count()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (set.vector(a), set.vector(b));
        for (x, y) in va.iter().zip(vb) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        a.cmp(&b)
    });
    order
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(m: usize, d: usize, rng: &mut ChaCha8Rng) -> LocalDescriptorSet {
        LocalDescriptorSet::new(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_head(k: usize, d: usize, rng: &mut ChaCha8Rng) -> SeqVlad {
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        SeqVlad::new(SeqVladParams::new(k, d, r(k * d), r(k * d), r(k)).unwrap())
    }

    #[test]
    fn single_cluster_is_scaled_mean_residual() {
        // Dyadic values keep every operation exact.
        let vals: Vec<f64> = vec![1.0, -2.0, 3.5, 0.25, 4.0, 1.5, -0.5, 2.0];
        let set = LocalDescriptorSet::new(4, 2, vals.clone()).unwrap();
        let head = SeqVlad::new(SeqVladParams::new(1, 2, vec![0.5, -1.0], vec![0.3, 0.7], vec![0.1]).unwrap());
        let v = head.aggregate(&set).unwrap();
        let mean = [(1.0 + 3.5 + 4.0 - 0.5) / 4.0, (-2.0 + 0.25 + 1.5 + 2.0) / 4.0];
        assert_eq!(v, vec![4.0 * (mean[0] - 0.5), 4.0 * (mean[1] + 1.0)]);
    }

    #[test]
    fn assignments_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(20, 5, &mut rng);
        let head = random_head(7, 5, &mut rng);
        let a = head.soft_assign(&set).unwrap();
        for row in a.chunks_exact(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_gives_bit_identical_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(12, 4, &mut rng);
        let head = random_head(3, 4, &mut rng);
        let mut rows: Vec<Vec<f64>> = set.iter().map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.swap(1, 7);
        let shuffled = LocalDescriptorSet::new(12, 4, rows.concat()).unwrap();
        assert_eq!(head.forward(&set).unwrap(), head.forward(&shuffled).unwrap());
    }

    #[test]
    fn output_is_unit_norm_and_dim_k_times_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = random_head(6, 3, &mut rng);
        for m in [1, 4, 17] {
            let out = head.forward(&random_set(m, 3, &mut rng)).unwrap();
            assert_eq!(out.dim(), 18);
            let n: f64 = out.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let head = head.with_intra_norm(false);
        let n: f64 = head.forward(&random_set(5, 3, &mut rng)).unwrap().values().iter().map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shape_and_size_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = random_head(2, 3, &mut rng);
        let set = random_set(4, 5, &mut rng);
        assert!(matches!(head.forward(&set), Err(Error::Shape(_))));
        let ok = random_set(4, 3, &mut rng);
        assert!(matches!(head.backward(&ok, &[0.0; 5]), Err(Error::Shape(_))));
        head.max_output_dim = 5;
        assert!(matches!(head.forward(&ok), Err(Error::Config(_))));
        assert!(SeqVladParams::new(0, 3, vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(6, 4, &mut rng);
        let head = random_head(3, 4, &mut rng);
        let g = head.backward(&set, &[0.0; 12]).unwrap();
        for v in g.centroids.iter().chain(&g.assign_weights).chain(&g.assign_bias).chain(&g.input) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn bias_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for intra in [true, false] {
            let set = random_set(9, 4, &mut rng);
            let head = random_head(5, 4, &mut rng).with_intra_norm(intra);
            let up: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = head.backward(&set, &up).unwrap();
            assert!(g.assign_bias.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_init_is_nearest_centroid_like() {
        let c = vec![0.0, 0.0, 1.0, 1.0];
        let head = SeqVlad::new(SeqVladParams::from_centroids(2, 2, c, DEFAULT_ALPHA).unwrap());
        let set = LocalDescriptorSet::new(2, 2, vec![0.1, 0.0, 0.9, 1.1]).unwrap();
        let a = head.soft_assign(&set).unwrap();
        assert!(a[0] > 0.999 && a[3] > 0.999);
    }
}
