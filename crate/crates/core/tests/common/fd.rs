//! Finite-difference gradient checks. Each returns the worst relative error
//! over every checked tensor, or `None` when the case sits too close to a
//! point where the check is not meaningful.

use seqplace::heads::{Fc, SeqVlad, TemporalConv};
use seqplace::training::triplet_loss;
use seqplace::LocalDescriptorSet;

use super::{numeric_gradient, relative_error};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Smallest per-cluster residual norm and the norm of the whole residual
/// block, before any normalization.
fn residual_norms(head: &SeqVlad, set: &LocalDescriptorSet) -> (f64, f64) {
    let (k, d) = (head.params.k(), head.params.dim());
    let p = &head.params;
    let mut v = vec![0.0; k * d];
    for x in set.vectors().chunks_exact(d) {
        let logits: Vec<f64> = (0..k).map(|j| dot(&p.assign_weights[j * d..(j + 1) * d], x) + p.assign_bias[j]).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k {
            for t in 0..d {
                v[j * d + t] += e[j] / z * (x[t] - p.centroids[j * d + t]);
            }
        }
    }
    let min_cluster = v.chunks_exact(d).map(norm).fold(f64::INFINITY, f64::min);
    (min_cluster, norm(&v))
}

pub fn seqvlad(head: &SeqVlad, set: &LocalDescriptorSet, g: &[f64]) -> Option<f64> {
    // Normalizing a near-zero residual is too curved for a 1e-3 probe.
    let (min_cluster, total) = residual_norms(head, set);
    if total <= 0.5 || (head.intra_norm && min_cluster <= 0.5) {
        return None;
    }
    let analytic = head.backward(set, g).ok()?;
    let f = |h: &SeqVlad, s: &LocalDescriptorSet| dot(h.forward(s).unwrap().values(), g);
    let p = &head.params;
    let num_c = numeric_gradient(&p.centroids, |v| {
        let mut h = head.clone();
        h.params.centroids = v.to_vec();
        f(&h, set)
    });
    let num_w = numeric_gradient(&p.assign_weights, |v| {
        let mut h = head.clone();
        h.params.assign_weights = v.to_vec();
        f(&h, set)
    });
    let num_b = numeric_gradient(&p.assign_bias, |v| {
        let mut h = head.clone();
        h.params.assign_bias = v.to_vec();
        f(&h, set)
    });
    let num_x = numeric_gradient(set.vectors(), |v| {
        f(head, &LocalDescriptorSet::new(set.count(), set.dim(), v.to_vec()).unwrap())
    });
    Some(
        [
            relative_error(&analytic.centroids, &num_c),
            relative_error(&analytic.assign_weights, &num_w),
            relative_error(&analytic.assign_bias, &num_b),
            relative_error(&analytic.input, &num_x),
        ]
        .into_iter()
        .fold(0.0, f64::max),
    )
}

pub fn fc(fc: &Fc, x: &[f64], g: &[f64]) -> Option<f64> {
    let dout = fc.out_dim();
    let z: Vec<f64> = (0..dout)
        .map(|o| fc.bias[o] + x.iter().enumerate().map(|(i, xi)| xi * fc.weight[i * dout + o]).sum::<f64>())
        .collect();
    if norm(&z) <= 0.5 {
        return None;
    }
    let analytic = fc.backward_flat(x, g).ok()?;
    let f = |h: &Fc, x: &[f64]| dot(h.forward_flat(x).unwrap().values(), g);
    let num_w = numeric_gradient(&fc.weight, |v| {
        let mut h = fc.clone();
        h.weight = v.to_vec();
        f(&h, x)
    });
    let num_b = numeric_gradient(&fc.bias, |v| {
        let mut h = fc.clone();
        h.bias = v.to_vec();
        f(&h, x)
    });
    let num_x = numeric_gradient(x, |v| f(fc, v));
    Some(
        relative_error(&analytic.weight, &num_w)
            .max(relative_error(&analytic.bias, &num_b))
            .max(relative_error(&analytic.input, &num_x)),
    )
}

pub fn tconv(conv: &TemporalConv, x: &[f64], g: &[f64]) -> Option<f64> {
    let analytic = conv.backward_frames(x, g).ok()?;
    let f = |c: &TemporalConv, x: &[f64]| dot(c.forward_frames(x).unwrap().values(), g);
    let num_k = numeric_gradient(&conv.kernel, |v| {
        let mut c = conv.clone();
        c.kernel = v.to_vec();
        f(&c, x)
    });
    let num_b = numeric_gradient(&conv.bias, |v| {
        let mut c = conv.clone();
        c.bias = v.to_vec();
        f(&c, x)
    });
    let num_x = numeric_gradient(x, |v| f(conv, v));
    Some(
        relative_error(&analytic.kernel, &num_k)
            .max(relative_error(&analytic.bias, &num_b))
            .max(relative_error(&analytic.input, &num_x)),
    )
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Summed hinge, written out independently of the library.
fn hinge(q: &[f64], p: &[f64], negs: &[Vec<f64>], margin: f64) -> f64 {
    negs.iter().map(|n| (sq(q, p) - sq(q, n) + margin).max(0.0)).sum()
}

pub fn triplet(q: &[f64], p: &[f64], negs: &[Vec<f64>], margin: f64) -> Option<f64> {
    // Stay away from the hinge so the loss is differentiable within the probe.
    if negs.iter().any(|n| (sq(q, p) - sq(q, n) + margin).abs() <= 0.05) {
        return None;
    }
    let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
    let tl = triplet_loss(q, p, &refs, margin).ok()?;
    let mut worst = (tl.loss - hinge(q, p, negs, margin)).abs();
    worst = worst.max(relative_error(&tl.grad_query, &numeric_gradient(q, |v| hinge(v, p, negs, margin))));
    worst = worst.max(relative_error(&tl.grad_positive, &numeric_gradient(p, |v| hinge(q, v, negs, margin))));
    for (i, gn) in tl.grad_negatives.iter().enumerate() {
        let num = numeric_gradient(&negs[i], |v| {
            let mut ns = negs.to_vec();
            ns[i] = v.to_vec();
            hinge(q, p, &ns, margin)
        });
        worst = worst.max(relative_error(gn, &num));
    }
    Some(worst)
}
