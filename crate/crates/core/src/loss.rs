//! Training losses: per-strip Batch-All triplet, cross-entropy and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add, scale, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    /// Triplet weight.
    pub alpha: f64,
    /// Cross-entropy weight.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.margin) && ok(self.alpha) && ok(self.beta)) {
            return Err(Error::Config(format!(
                "loss margin, alpha and beta must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Triplet bookkeeping for one batch, summed over strips.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TripletStats {
    /// Valid (anchor, positive, negative) triples.
    pub triplets: usize,
    /// Triples with strictly positive hinge.
    pub active: usize,
    /// Set when the batch has no positive pair or no negative at all.
    pub degenerate: bool,
}

impl TripletStats {
    pub fn nonzero_fraction(&self) -> f64 {
        if self.triplets == 0 {
            0.0
        } else {
            self.active as f64 / self.triplets as f64
        }
    }
}

fn distance_matrix<T: Scalar>(e: &[T], strip: usize, strips: usize, d: usize, b: usize) -> Vec<T> {
    let row = |i: usize| &e[(i * strips + strip) * d..][..d];
    let mut dist = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i + 1..b {
            let s: T = row(i).iter().zip(row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum();
            dist[i * b + j] = s.sqrt();
            dist[j * b + i] = dist[i * b + j];
        }
    }
    dist
}

/// Batch-All triplet loss on `[B, s, d]` embeddings.
///
/// For every strip, euclidean distances give hinge terms
/// `max(0, D(a,p) - D(a,n) + margin)` over all valid triples; their sum is
/// divided by the number of strictly positive terms (0 when none). The strip
/// losses are averaged. The gradient of `D` at zero distance is taken as 0.
pub fn batch_all_triplet<T: Scalar>(emb: &Var<T>, labels: &[usize], margin: f64) -> Result<(Var<T>, TripletStats)> {
    let s = emb.shape();
    if s.len() != 3 || s[0] != labels.len() {
        return Err(Error::shape(
            "batch_all_triplet",
            format!("embeddings {s:?} with {} labels", labels.len()),
        ));
    }
    let (b, strips, d) = (s[0], s[1], s[2]);
    let m = T::from_f64(margin);
    let e = emb.data();
    let mut stats = TripletStats::default();
    let has_pos = (0..b).any(|i| (0..b).any(|j| i != j && labels[i] == labels[j]));
    let has_neg = labels.iter().any(|&l| l != labels[0]);
    stats.degenerate = !(has_pos && has_neg);

    let mut total = T::zero();
    // Per strip: dL/dD for the distance matrix, plus the matrix itself.
    let mut coeffs: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(strips);
    for st in 0..strips {
        let dist = distance_matrix(e, st, strips, d, b);
        let mut sum = T::zero();
        let mut active = Vec::new();
        for a in 0..b {
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..b {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    stats.triplets += 1;
                    let h = dist[a * b + p] - dist[a * b + n] + m;
                    if h > T::zero() {
                        sum += h;
                        active.push((a, p, n));
                    }
                }
            }
        }
        stats.active += active.len();
        let mut gd = vec![T::zero(); b * b];
        if !active.is_empty() {
            let nt = T::from_usize(active.len());
            total += sum / nt;
            let w = T::one() / (nt * T::from_usize(strips));
            for (a, p, n) in active {
                gd[a * b + p] += w;
                gd[a * b + n] -= w;
            }
        }
        coeffs.push((gd, dist));
    }
    let loss = total / T::from_usize(strips);

    let value = Tensor::scalar(loss);
    let out = Var::from_op(value, vec![emb.clone()], move |ctx| {
        let e = ctx.inputs[0].data();
        let go = ctx.grad[0];
        let mut g = vec![T::zero(); e.len()];
        for (st, (gd, dist)) in coeffs.iter().enumerate() {
            for i in 0..b {
                for j in 0..b {
                    let c = gd[i * b + j];
                    let dij = dist[i * b + j];
                    if c == T::zero() || dij == T::zero() {
                        continue;
                    }
                    let f = go * c / dij;
                    let (ri, rj) = ((i * strips + st) * d, (j * strips + st) * d);
                    for k in 0..d {
                        let diff = f * (e[ri + k] - e[rj + k]);
                        g[ri + k] += diff;
                        g[rj + k] -= diff;
                    }
                }
            }
        }
        vec![Some(g)]
    });
    Ok((out, stats))
}

/// Mean softmax cross-entropy of `logits[B, K]` against class indices.
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {s:?} with {} labels", labels.len()),
        ));
    }
    let (b, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {k} classes")));
    }
    let z = logits.data();
    let mut probs = vec![T::zero(); b * k];
    let mut total = T::zero();
    for r in 0..b {
        let row = &z[r * k..][..k];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += lse - row[labels[r]];
        for c in 0..k {
            probs[r * k + c] = (row[c] - lse).exp();
        }
    }
    let inv_b = T::one() / T::from_usize(b);
    let labels = labels.to_vec();
    let value = Tensor::scalar(total * inv_b);
    Ok(Var::from_op(value, vec![logits.clone()], move |ctx| {
        let go = ctx.grad[0] * inv_b;
        let mut g: Vec<T> = probs.iter().map(|&p| p * go).collect();
        for (r, &l) in labels.iter().enumerate() {
            g[r * k + l] -= go;
        }
        vec![Some(g)]
    }))
}

/// `alpha * l_tri + beta * l_ce`; a missing cross-entropy term counts as 0.
pub fn combine<T: Scalar>(l_tri: &Var<T>, l_ce: Option<&Var<T>>, alpha: f64, beta: f64) -> Result<Var<T>> {
    let tri = scale(l_tri, alpha);
    match l_ce {
        Some(ce) if beta != 0.0 => add(&tri, &scale(ce, beta)),
        _ => Ok(tri),
    }
}
