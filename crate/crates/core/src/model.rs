//! Learnable parameters and the forward pass.
//!
//! Layer `l` computes, for every node `k`,
//! `e_k^(l) = sum_{(t, r) in N_k} alpha_{r, t->k} / sqrt(|N_k| |N_t|) * e_t^(l-1)`,
//! and the final representation is the unweighted mean over layers `0..=L`.
//! There is no self loop, no activation and no feature transform.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckg::{CollaborativeKG, Direction, NodeId, NodeKind, NodeSpace, RelationId};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            init_seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        Ok(())
    }
}

/// One scalar per relation and direction, stored interleaved as
/// `[fwd_0, bwd_0, fwd_1, bwd_1, ...]` so that a message's slot indexes it
/// directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScalars {
    values: Vec<f64>,
}

impl RelationScalars {
    pub fn constant(num_relations: usize, value: f64) -> Self {
        Self {
            values: vec![value; 2 * num_relations],
        }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self {
            values: pairs.iter().flat_map(|&(f, b)| [f, b]).collect(),
        }
    }

    pub fn from_slots(values: Vec<f64>) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::invalid("relation scalar table must hold pairs"));
        }
        Ok(Self { values })
    }

    pub fn num_relations(&self) -> usize {
        self.values.len() / 2
    }

    pub fn forward(&self, r: RelationId) -> f64 {
        self.values[Direction::Forward.slot(r)]
    }

    pub fn backward(&self, r: RelationId) -> f64 {
        self.values[Direction::Backward.slot(r)]
    }

    pub fn get(&self, r: RelationId, dir: Direction) -> f64 {
        self.values[dir.slot(r)]
    }

    pub fn set(&mut self, r: RelationId, dir: Direction, value: f64) {
        self.values[dir.slot(r)] = value;
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.chunks_exact(2).map(|c| (c[0], c[1]))
    }

    #[inline]
    pub fn slots(&self) -> &[f64] {
        &self.values
    }

    pub fn slots_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Layer-0 embeddings and relation scalars: the full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layer0: Matrix,
    pub scalars: RelationScalars,
}

impl Parameters {
    pub fn dim(&self) -> usize {
        self.layer0.cols()
    }

    pub fn num_values(&self) -> usize {
        self.layer0.as_slice().len() + self.scalars.slots().len()
    }
}

/// Xavier-uniform initialisation of the embedding table
/// (`fan_in + fan_out = |nodes| + d`) and of each scalar (treated as a `1x1`
/// parameter, bound `sqrt(3)`).
pub fn init_parameters(g: &CollaborativeKG, cfg: &ModelConfig) -> Result<Parameters> {
    cfg.validate()?;
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let bound = xavier_bound(n, cfg.dim);
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..n * cfg.dim).map(|_| dist.sample(&mut rng)).collect();
    let layer0 = Matrix::from_vec(n, cfg.dim, data).expect("shape");
    let sbound = xavier_bound(1, 1);
    let sdist = Uniform::new_inclusive(-sbound, sbound);
    let scalars = RelationScalars {
        values: (0..2 * g.num_relations()).map(|_| sdist.sample(&mut rng)).collect(),
    };
    Ok(Parameters { layer0, scalars })
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Per-layer embeddings `e^(0..=L)` and their mean `e*`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingState {
    layers: Vec<Matrix>,
    combined: Matrix,
}

impl EmbeddingState {
    pub fn layer0(&self) -> &Matrix {
        &self.layers[0]
    }

    /// `e^(l)` for `l` in `0..=L`.
    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    /// All layers including layer 0.
    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn combined(&self) -> &Matrix {
        &self.combined
    }
}

fn check_shapes(g: &CollaborativeKG, x: &Matrix, scalars: &RelationScalars) -> Result<()> {
    if x.rows() != g.num_nodes() {
        return Err(Error::invalid(format!(
            "embedding rows {} != node count {}",
            x.rows(),
            g.num_nodes()
        )));
    }
    if scalars.num_relations() != g.num_relations() {
        return Err(Error::invalid(format!(
            "scalar table covers {} relations, graph has {}",
            scalars.num_relations(),
            g.num_relations()
        )));
    }
    Ok(())
}

/// One propagation layer: `out[k] = sum_e alpha[slot_e] * norm_e * x[t_e]`.
pub fn propagate_layer(g: &CollaborativeKG, x: &Matrix, scalars: &RelationScalars) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    propagate_layer_into(g, x, scalars, &mut out)?;
    Ok(out)
}

/// [`propagate_layer`] writing into an existing buffer (resized as needed).
pub fn propagate_layer_into(g: &CollaborativeKG, x: &Matrix, scalars: &RelationScalars, out: &mut Matrix) -> Result<()> {
    check_shapes(g, x, scalars)?;
    aggregate(g, x, scalars, out, 0);
    Ok(())
}

/// Transpose of [`propagate_layer`]: `out[t] = sum_k coef(t -> k) * y[k]`.
///
/// Row `t` lists each `k` that `t` sends to; the message `t -> k` uses the
/// opposite slot of the entry stored at row `t`.
pub fn propagate_layer_transposed(
    g: &CollaborativeKG,
    y: &Matrix,
    scalars: &RelationScalars,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    propagate_layer_transposed_into(g, y, scalars, &mut out)?;
    Ok(out)
}

pub fn propagate_layer_transposed_into(
    g: &CollaborativeKG,
    y: &Matrix,
    scalars: &RelationScalars,
    out: &mut Matrix,
) -> Result<()> {
    check_shapes(g, y, scalars)?;
    aggregate(g, y, scalars, out, 1);
    Ok(())
}

// `slot_xor` 0 pulls with each entry's own slot, 1 with the mirrored one.
fn aggregate(g: &CollaborativeKG, x: &Matrix, scalars: &RelationScalars, out: &mut Matrix, slot_xor: u32) {
    let d = x.cols();
    if !out.same_shape(x) {
        out.reset(x.rows(), d);
    }
    let (offsets, neighbors, slots, norms) = g.csr();
    let alpha = scalars.slots();
    out.as_mut_slice()
        .par_chunks_mut(d.max(1))
        .enumerate()
        .for_each(|(k, row)| {
            row.fill(0.0);
            for e in offsets[k]..offsets[k + 1] {
                let c = alpha[(slots[e] ^ slot_xor) as usize] * norms[e];
                let src = x.row(neighbors[e].index());
                for (o, s) in row.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        });
}

pub fn propagate(
    g: &CollaborativeKG,
    layer0: &Matrix,
    scalars: &RelationScalars,
    layers: usize,
) -> Result<EmbeddingState> {
    let mut state = EmbeddingState::default();
    propagate_into(g, layer0, scalars, layers, &mut state)?;
    Ok(state)
}

/// [`propagate`] reusing the buffers of an earlier state.
pub fn propagate_into(
    g: &CollaborativeKG,
    layer0: &Matrix,
    scalars: &RelationScalars,
    layers: usize,
    state: &mut EmbeddingState,
) -> Result<()> {
    check_shapes(g, layer0, scalars)?;
    let all = &mut state.layers;
    all.truncate(layers + 1);
    while all.len() < layers + 1 {
        all.push(Matrix::zeros(0, 0));
    }
    all[0].copy_from(layer0);
    for l in 1..=layers {
        let (below, above) = all.split_at_mut(l);
        aggregate(g, &below[l - 1], scalars, &mut above[0], 0);
    }
    let w = 1.0 / (layers + 1) as f64;
    let combined = &mut state.combined;
    if layers == 0 {
        combined.copy_from(layer0);
    } else {
        combined.reset(layer0.rows(), layer0.cols());
        for m in all.iter() {
            combined.axpy(w, m);
        }
    }
    Ok(())
}

/// Unweighted mean over layers.
pub fn combine(per_layer: &[Matrix]) -> Result<Matrix> {
    let first = per_layer.first().ok_or_else(|| Error::invalid("combine needs at least one layer"))?;
    if per_layer.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::invalid("all layers must share one shape"));
    }
    if per_layer.len() == 1 {
        return Ok(first.clone());
    }
    let w = 1.0 / per_layer.len() as f64;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for m in per_layer {
        out.axpy(w, m);
    }
    Ok(out)
}

/// `e*_u . e*_i`.
pub fn score(e_star: &Matrix, space: NodeSpace, u: NodeId, i: NodeId) -> Result<f64> {
    if space.kind(u) != Some(NodeKind::User) {
        return Err(Error::invalid(format!("node {} is not a user", u.0)));
    }
    if space.kind(i) != Some(NodeKind::Item) {
        return Err(Error::invalid(format!("node {} is not an item", i.0)));
    }
    Ok(dot(e_star.row(u.index()), e_star.row(i.index())))
}

/// Scores of `u` against every item, indexed by item offset.
pub fn score_all_items(e_star: &Matrix, space: NodeSpace, u: NodeId) -> Result<Vec<f64>> {
    if space.kind(u) != Some(NodeKind::User) {
        return Err(Error::invalid(format!("node {} is not a user", u.0)));
    }
    let eu = e_star.row(u.index());
    Ok(space.item_range().map(|i| dot(eu, e_star.row(i))).collect())
}
