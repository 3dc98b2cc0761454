//! Training objective and its exact gradients.
//!
//! `total = bpr + beta_u * contrast_user + beta_i * contrast_item + lambda * reg`
//!
//! * `bpr` is the mean of `softplus(-(y_pos - y_neg))` over the triplet batch.
//! * each contrastive term is the mean over sampled same-kind pairs of
//!   `w * exp((1 - s) * cos(e_a, e_b))` on layer-0 embeddings, with the
//!   normalisation inside the computation graph.
//! * `reg` is the squared L2 norm of the layer-0 rows touched by the triplet
//!   batch plus every relation scalar.
//!
//! The forward pass is linear, so its backward pass is the transposed
//! propagation with the same coefficients; scalar gradients accumulate
//! `<upstream_k, e_t^(l-1)> / sqrt(|N_k||N_t|)` over the entries using them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckg::{neighbor_overlap, CollaborativeKG, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::model::{propagate, propagate_into, propagate_layer_transposed_into, EmbeddingState, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub contrast_user: f64,
    pub contrast_item: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TripletBatch {
    /// `(user, positive item, negative item)`
    pub entries: Vec<(NodeId, NodeId, NodeId)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastPair {
    pub a: NodeId,
    pub b: NodeId,
    pub s: f64,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastPairBatch {
    pub kind: NodeKind,
    pub pairs: Vec<ContrastPair>,
    /// Multiplier on the pair mean. `1.0` gives the mean form; the number of
    /// ordered pairs of the node population turns it into an estimate of the
    /// full pairwise sum.
    pub scale: f64,
}

impl ContrastPairBatch {
    pub fn empty(kind: NodeKind) -> Self {
        Self {
            kind,
            pairs: Vec::new(),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub layers: usize,
    pub beta_u: f64,
    pub beta_i: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub layer0: Matrix,
    pub scalars: Vec<f64>,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BPR loss, `-ln sigma(pos - neg)` per entry.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::invalid("positive and negative score vectors differ in length"));
    }
    if scores_pos.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| softplus(-(p - n)))
        .sum();
    Ok(sum / scores_pos.len() as f64)
}

fn unit_norm(layer0: &Matrix, node: NodeId) -> Result<f64> {
    let n = norm(layer0.row(node.index()));
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "layer-0 embedding of node {} cannot be normalised",
            node.0
        )));
    }
    Ok(n)
}

/// Contrastive term and, when `grad` is given, `coef * d(term)/d(layer0)`
/// accumulated into it.
fn contrastive_with_grad(
    batch: &ContrastPairBatch,
    layer0: &Matrix,
    mut grad: Option<(&mut Matrix, f64)>,
) -> Result<f64> {
    if batch.pairs.is_empty() {
        return Ok(0.0);
    }
    let factor = batch.scale / batch.pairs.len() as f64;
    let mut loss = 0.0;
    for p in &batch.pairs {
        let (xa, xb) = (layer0.row(p.a.index()), layer0.row(p.b.index()));
        let (na, nb) = (unit_norm(layer0, p.a)?, unit_norm(layer0, p.b)?);
        let cos = dot(xa, xb) / (na * nb);
        let e = ((1.0 - p.s) * cos).exp();
        loss += p.w * e;
        if let Some((g, coef)) = grad.as_mut() {
            let dcos = *coef * factor * p.w * (1.0 - p.s) * e;
            if dcos == 0.0 {
                continue;
            }
            let inv = 1.0 / (na * nb);
            let (ca, cb) = (cos / (na * na), cos / (nb * nb));
            let xa = xa.to_vec();
            let xb = xb.to_vec();
            let ga = g.row_mut(p.a.index());
            for j in 0..xa.len() {
                ga[j] += dcos * (xb[j] * inv - ca * xa[j]);
            }
            let gb = g.row_mut(p.b.index());
            for j in 0..xb.len() {
                gb[j] += dcos * (xa[j] * inv - cb * xb[j]);
            }
        }
    }
    Ok(loss * factor)
}

/// `scale * mean_pairs w * exp((1 - s) * cos(e_a, e_b))` over layer-0 rows.
pub fn contrastive_loss(batch: &ContrastPairBatch, layer0: &Matrix) -> Result<f64> {
    contrastive_with_grad(batch, layer0, None)
}

/// Sum of squares over the given layer-0 rows and all relation scalars.
pub fn l2_reg(layer0: &Matrix, rows: &[NodeId], scalars: &[f64]) -> f64 {
    let emb: f64 = rows.iter().map(|r| {
        let x = layer0.row(r.index());
        dot(x, x)
    }).sum();
    emb + scalars.iter().map(|s| s * s).sum::<f64>()
}

/// Unique layer-0 rows referenced by a triplet batch, sorted.
pub fn touched_rows(batch: &TripletBatch) -> Vec<NodeId> {
    let mut rows: Vec<NodeId> = batch
        .entries
        .iter()
        .flat_map(|&(u, p, n)| [u, p, n])
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

fn finite(component: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { component, value })
    }
}

/// Loss only, without gradients (used by finite-difference checks).
pub fn total_loss(
    g: &CollaborativeKG,
    params: &Parameters,
    cfg: &ObjectiveConfig,
    triplets: &TripletBatch,
    user_pairs: &ContrastPairBatch,
    item_pairs: &ContrastPairBatch,
) -> Result<LossBreakdown> {
    let state = propagate(g, &params.layer0, &params.scalars, cfg.layers)?;
    let bpr = bpr_forward(&state, triplets, None);
    breakdown(bpr, params, cfg, triplets, user_pairs, item_pairs, None)
}

fn bpr_forward(state: &EmbeddingState, batch: &TripletBatch, mut grad: Option<&mut Matrix>) -> f64 {
    let e = state.combined();
    if let Some(g) = grad.as_mut() {
        g.reset(e.rows(), e.cols());
    }
    let n = batch.entries.len();
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for &(u, p, q) in &batch.entries {
        let (eu, ep, eq) = (e.row(u.index()), e.row(p.index()), e.row(q.index()));
        let x = dot(eu, ep) - dot(eu, eq);
        loss += softplus(-x);
        if let Some(g) = grad.as_mut() {
            // d softplus(-x) / dx = -sigmoid(-x)
            let c = -sigmoid(-x) * inv;
            let diff: Vec<f64> = ep.iter().zip(eq).map(|(a, b)| a - b).collect();
            let eu = eu.to_vec();
            for (gj, dj) in g.row_mut(u.index()).iter_mut().zip(&diff) {
                *gj += c * dj;
            }
            for (gj, uj) in g.row_mut(p.index()).iter_mut().zip(&eu) {
                *gj += c * uj;
            }
            for (gj, uj) in g.row_mut(q.index()).iter_mut().zip(&eu) {
                *gj -= c * uj;
            }
        }
    }
    loss * inv
}

fn breakdown(
    bpr: f64,
    params: &Parameters,
    cfg: &ObjectiveConfig,
    triplets: &TripletBatch,
    user_pairs: &ContrastPairBatch,
    item_pairs: &ContrastPairBatch,
    mut grad_layer0: Option<&mut Matrix>,
) -> Result<LossBreakdown> {
    let bpr = finite("bpr", bpr)?;
    let contrast_user = finite(
        "contrast_user",
        contrastive_with_grad(user_pairs, &params.layer0, grad_layer0.as_deref_mut().map(|g| (g, cfg.beta_u)))?,
    )?;
    let contrast_item = finite(
        "contrast_item",
        contrastive_with_grad(item_pairs, &params.layer0, grad_layer0.as_deref_mut().map(|g| (g, cfg.beta_i)))?,
    )?;
    let rows = touched_rows(triplets);
    let reg = finite("reg", l2_reg(&params.layer0, &rows, params.scalars.slots()))?;
    if let Some(g) = grad_layer0 {
        for r in &rows {
            let x = params.layer0.row(r.index()).to_vec();
            for (gj, xj) in g.row_mut(r.index()).iter_mut().zip(&x) {
                *gj += 2.0 * cfg.lambda * xj;
            }
        }
    }
    let total = finite(
        "total",
        bpr + cfg.beta_u * contrast_user + cfg.beta_i * contrast_item + cfg.lambda * reg,
    )?;
    Ok(LossBreakdown {
        bpr,
        contrast_user,
        contrast_item,
        reg,
        total,
    })
}

const SCALAR_CHUNK: usize = 512;

/// `sum_e <upstream[k], below[t_e]> * norm_e`, binned by scalar slot.
/// Chunks are fixed-size and reduced in order so the result does not depend
/// on the thread count.
fn scalar_contributions(g: &CollaborativeKG, upstream: &Matrix, below: &Matrix, num_slots: usize) -> Vec<f64> {
    let (offsets, neighbors, slots, norms) = g.csr();
    let n = g.num_nodes();
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(SCALAR_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; num_slots];
            for k in c * SCALAR_CHUNK..((c + 1) * SCALAR_CHUNK).min(n) {
                let up = upstream.row(k);
                if up.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for e in offsets[k]..offsets[k + 1] {
                    acc[slots[e] as usize] += norms[e] * dot(up, below.row(neighbors[e].index()));
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; num_slots];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Reusable buffers for repeated loss-and-gradient evaluations on one graph.
#[derive(Debug, Default)]
pub struct Workspace {
    state: EmbeddingState,
    grad_combined: Matrix,
    down: Matrix,
    pub grads: Gradients,
}

/// Backpropagates a gradient on the combined embeddings through the layer
/// mean and all propagation layers.
pub fn backprop_combined(
    g: &CollaborativeKG,
    params: &Parameters,
    state: &EmbeddingState,
    grad_combined: &Matrix,
) -> Result<Gradients> {
    let mut grads = Gradients::default();
    backprop_into(g, params, state, grad_combined, &mut Matrix::default(), &mut grads)?;
    Ok(grads)
}

fn backprop_into(
    g: &CollaborativeKG,
    params: &Parameters,
    state: &EmbeddingState,
    grad_combined: &Matrix,
    down: &mut Matrix,
    grads: &mut Gradients,
) -> Result<()> {
    let layers = state.num_layers();
    let w = 1.0 / (layers + 1) as f64;
    let upstream = &mut grads.layer0;
    upstream.copy_from(grad_combined);
    upstream.scale(w);
    let scalars = &mut grads.scalars;
    scalars.clear();
    scalars.resize(params.scalars.slots().len(), 0.0);
    for l in (1..=layers).rev() {
        let contrib = scalar_contributions(g, upstream, state.layer(l - 1), scalars.len());
        for (s, c) in scalars.iter_mut().zip(contrib) {
            *s += c;
        }
        propagate_layer_transposed_into(g, upstream, &params.scalars, down)?;
        down.axpy(w, grad_combined);
        std::mem::swap(upstream, down);
    }
    Ok(())
}

pub fn total_loss_and_grads(
    g: &CollaborativeKG,
    params: &Parameters,
    cfg: &ObjectiveConfig,
    triplets: &TripletBatch,
    user_pairs: &ContrastPairBatch,
    item_pairs: &ContrastPairBatch,
) -> Result<(LossBreakdown, Gradients)> {
    let mut ws = Workspace::default();
    let loss = total_loss_and_grads_in(&mut ws, g, params, cfg, triplets, user_pairs, item_pairs)?;
    Ok((loss, ws.grads))
}

/// [`total_loss_and_grads`] leaving the gradients in `ws.grads`.
pub fn total_loss_and_grads_in(
    ws: &mut Workspace,
    g: &CollaborativeKG,
    params: &Parameters,
    cfg: &ObjectiveConfig,
    triplets: &TripletBatch,
    user_pairs: &ContrastPairBatch,
    item_pairs: &ContrastPairBatch,
) -> Result<LossBreakdown> {
    propagate_into(g, &params.layer0, &params.scalars, cfg.layers, &mut ws.state)?;
    let bpr = bpr_forward(&ws.state, triplets, Some(&mut ws.grad_combined));
    backprop_into(g, params, &ws.state, &ws.grad_combined, &mut ws.down, &mut ws.grads)?;
    let loss = breakdown(
        bpr,
        params,
        cfg,
        triplets,
        user_pairs,
        item_pairs,
        Some(&mut ws.grads.layer0),
    )?;
    for (gs, s) in ws.grads.scalars.iter_mut().zip(params.scalars.slots()) {
        *gs += 2.0 * cfg.lambda * s;
    }
    Ok(loss)
}

/// Samples `count` ordered pairs `a != b` uniformly from `candidates` and
/// attaches their neighbor overlap.
pub fn sample_contrast_pairs<R: Rng + ?Sized>(
    g: &CollaborativeKG,
    kind: NodeKind,
    candidates: &[NodeId],
    count: usize,
    scale: f64,
    rng: &mut R,
) -> Result<ContrastPairBatch> {
    let mut batch = ContrastPairBatch {
        kind,
        pairs: Vec::with_capacity(count),
        scale,
    };
    if candidates.len() < 2 {
        return Ok(batch);
    }
    let n = candidates.len();
    for _ in 0..count {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (candidates[i], candidates[j]);
        let o = neighbor_overlap(g, a, b)?;
        batch.pairs.push(ContrastPair { a, b, s: o.s, w: o.w });
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: f64, w: f64) -> ContrastPairBatch {
        ContrastPairBatch {
            kind: NodeKind::User,
            pairs: vec![ContrastPair { a: NodeId(0), b: NodeId(1), s, w }],
            scale: 1.0,
        }
    }

    #[test]
    fn bpr_hand_values() {
        let l = bpr_loss(&[0.3, -2.0], &[0.3, -2.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bpr_loss(&[1.0], &[0.0]).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(bpr_loss(&[800.0], &[-800.0]).unwrap() < 1e-300);
        assert!((bpr_loss(&[-800.0], &[800.0]).unwrap() - 1600.0).abs() < 1e-9);
        assert!(bpr_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn contrastive_hand_values() {
        let x = Matrix::from_vec(2, 2, vec![0.3, -0.1, 2.0, 5.0]).unwrap();
        assert!((contrastive_loss(&pair(1.0, 0.4), &x).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(contrastive_loss(&pair(0.2, 0.0), &x).unwrap(), 0.0);
        let same = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let v = contrastive_loss(&pair(0.0, 0.75), &same).unwrap();
        assert!((v - 0.75 * std::f64::consts::E).abs() < 1e-12);
        assert!((v - 2.038_711).abs() < 1e-6);
    }

    #[test]
    fn contrastive_rejects_zero_rows() {
        let x = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(contrastive_loss(&pair(0.0, 0.5), &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reg_hand_values() {
        let x = Matrix::from_vec(2, 2, vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        assert_eq!(l2_reg(&x, &[NodeId(0)], &[]), 25.0);
        assert_eq!(l2_reg(&Matrix::zeros(2, 2), &[NodeId(0), NodeId(1)], &[0.0]), 0.0);
        let mut y = x.clone();
        y.scale(2.0);
        assert_eq!(l2_reg(&y, &[NodeId(0), NodeId(1)], &[2.0]), 4.0 * l2_reg(&x, &[NodeId(0), NodeId(1)], &[1.0]));
    }
}
