//! Independent reference implementations used by the oracle and acceptance
//! suites. Nothing here calls into the library's propagation or metric code.
//!
//! The acceptance suite lives in this crate so that it runs after every other
//! test target in the workspace.

use std::collections::HashSet;
use std::path::PathBuf;

use lightkg::{CollaborativeKG, Matrix, NodeId, RelationScalars};
use nalgebra::DMatrix;

pub fn to_dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Dense propagation operator built straight from the edge list: degrees are
/// recounted from the triplets, and each triplet contributes one entry per
/// direction.
pub fn dense_operator(g: &CollaborativeKG, scalars: &RelationScalars) -> DMatrix<f64> {
    let n = g.num_nodes();
    let mut deg = vec![0usize; n];
    for t in g.edges() {
        deg[t.head.index()] += 1;
        deg[t.tail.index()] += 1;
    }
    let mut a = DMatrix::zeros(n, n);
    for t in g.edges() {
        let (h, tl) = (t.head.index(), t.tail.index());
        let norm = 1.0 / ((deg[h] * deg[tl]) as f64).sqrt();
        a[(tl, h)] += scalars.forward(t.relation) * norm;
        a[(h, tl)] += scalars.backward(t.relation) * norm;
    }
    a
}

/// Plain LightGCN layers on the bipartite interaction graph:
/// `E^(l) = D^-1/2 A D^-1/2 E^(l-1)` with `A = [[0, R], [R^T, 0]]`.
/// Returns layers `0..=layers`, laid out over the same node indices.
pub fn lightgcn_layers(
    num_nodes: usize,
    interactions: &[(NodeId, NodeId)],
    e0: &DMatrix<f64>,
    layers: usize,
) -> Vec<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::zeros(num_nodes, num_nodes);
    let unique: HashSet<(NodeId, NodeId)> = interactions.iter().copied().collect();
    for &(u, i) in &unique {
        a[(u.index(), i.index())] = 1.0;
        a[(i.index(), u.index())] = 1.0;
    }
    let d_inv_sqrt = DMatrix::from_diagonal(&a.column_sum().map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }));
    let a_hat = &d_inv_sqrt * a * &d_inv_sqrt;
    let mut out = vec![e0.clone()];
    for l in 0..layers {
        let next = &a_hat * &out[l];
        out.push(next);
    }
    out
}

pub fn frobenius_rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Reference top-K: full sort of every unmasked item by descending score,
/// ties by ascending item index.
pub fn naive_top_k(scores: &[f64], masked: &HashSet<usize>, k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|j| !masked.contains(j)).collect();
    items.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    items.truncate(k);
    items
}

/// Reference Recall@K and MRR@K over users, in the given user order.
pub fn naive_metrics(rankings: &[(Vec<usize>, HashSet<usize>)]) -> (f64, f64) {
    let mut recall = 0.0;
    let mut mrr = 0.0;
    for (top, relevant) in rankings {
        let hits = top.iter().filter(|j| relevant.contains(j)).count();
        recall += hits as f64 / relevant.len() as f64;
        if let Some(pos) = top.iter().position(|j| relevant.contains(j)) {
            mrr += 1.0 / (pos + 1) as f64;
        }
    }
    let n = rankings.len() as f64;
    (recall / n, mrr / n)
}

pub struct LastFmFiles {
    pub interactions: PathBuf,
    pub kg: PathBuf,
    pub links: Option<PathBuf>,
}

/// Locates the Last.FM files under `LIGHTKG_LASTFM_DIR` or `<workspace>/data/lastfm`.
pub fn lastfm_files() -> Result<LastFmFiles, String> {
    let dir = std::env::var_os("LIGHTKG_LASTFM_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/lastfm"));
    let pick = |names: &[&str]| names.iter().map(|n| dir.join(n)).find(|p| p.is_file());
    let interactions = pick(&["lastfm.inter", "interactions.tsv"]);
    let kg = pick(&["lastfm.kg", "kg.tsv"]);
    match (interactions, kg) {
        (Some(interactions), Some(kg)) => Ok(LastFmFiles {
            interactions,
            kg,
            links: pick(&["lastfm.link", "links.tsv"]),
        }),
        _ => Err(format!(
            "BLOCKED: Last.FM dataset not found in {} (set LIGHTKG_LASTFM_DIR to a directory holding lastfm.inter and lastfm.kg)",
            dir.display()
        )),
    }
}
