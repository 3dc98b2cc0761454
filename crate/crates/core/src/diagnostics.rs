//! Post-training analyses: spread of the effective aggregation coefficients,
//! the largest learned relation scalars, and with/without-KG comparisons.
//!
//! All variances here are population variances (divide by N).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ckg::{CollaborativeKG, Direction, NodeId, RelationId};
use crate::config::RunConfig;
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::evaluator::EvalReport;
use crate::experiment::run_corpus;
use crate::model::RelationScalars;

pub fn population_variance(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("coefficient group"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Effective coefficient `alpha / sqrt(|N_k| |N_t|)` of every directed
/// message, in adjacency order.
pub fn coefficients(g: &CollaborativeKG, scalars: &RelationScalars) -> Result<Vec<f64>> {
    if scalars.num_relations() != g.num_relations() {
        return Err(Error::invalid(format!(
            "{} relation scalars for {} relations",
            scalars.num_relations(),
            g.num_relations()
        )));
    }
    let (_, _, slots, norms) = g.csr();
    let s = scalars.slots();
    Ok(slots.iter().zip(norms).map(|(&slot, &n)| s[slot as usize] * n).collect())
}

pub fn coefficient_variance(g: &CollaborativeKG, scalars: &RelationScalars) -> Result<f64> {
    population_variance(&coefficients(g, scalars)?)
}

/// Relations followed outward from an anchor, one per hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationPath(pub Vec<RelationId>);

impl RelationPath {
    pub fn single(r: RelationId) -> Self {
        Self(vec![r])
    }

    /// Parses relation names separated by `/`, e.g. `film.actor/film.actor`.
    pub fn parse(text: &str, names: &[String]) -> Result<Self> {
        let rels = text
            .split('/')
            .map(|part| {
                names
                    .iter()
                    .position(|n| n == part.trim())
                    .map(|i| RelationId(i as u32))
                    .ok_or_else(|| Error::invalid(format!("unknown relation `{}`", part.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        if rels.is_empty() {
            return Err(Error::invalid("empty relation path"));
        }
        Ok(Self(rels))
    }
}

/// Contribution weight of every node reached from `anchor` along `path` to
/// the anchor's propagated embedding: the product of the per-hop
/// coefficients, summed over walks ending at the same node. The anchor
/// itself is excluded.
pub fn path_coefficients(
    g: &CollaborativeKG,
    scalars: &RelationScalars,
    anchor: NodeId,
    path: &RelationPath,
) -> Result<BTreeMap<NodeId, f64>> {
    if anchor.index() >= g.num_nodes() {
        return Err(Error::invalid(format!("node {} out of range", anchor.0)));
    }
    if path.0.is_empty() {
        return Err(Error::invalid("empty relation path"));
    }
    if let Some(r) = path.0.iter().find(|r| r.index() >= g.num_relations()) {
        return Err(Error::invalid(format!("relation {} out of range", r.0)));
    }
    let mut frontier = BTreeMap::from([(anchor, 1.0)]);
    for &r in &path.0 {
        let mut next = BTreeMap::new();
        for (&node, &w) in &frontier {
            for nb in g.neighbors(node).filter(|nb| nb.relation == r) {
                let c = scalars.slots()[nb.slot] * nb.norm;
                *next.entry(nb.node).or_insert(0.0) += w * c;
            }
        }
        frontier = next;
    }
    frontier.remove(&anchor);
    Ok(frontier)
}

pub fn per_relation_group_variance(
    g: &CollaborativeKG,
    scalars: &RelationScalars,
    anchor: NodeId,
    path: &RelationPath,
) -> Result<f64> {
    let group: Vec<f64> = path_coefficients(g, scalars, anchor, path)?.into_values().collect();
    population_variance(&group)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarRow {
    pub relation: String,
    pub direction: Direction,
    pub value: f64,
    /// This direction holds the larger of the relation's two scalars.
    pub larger_direction: bool,
}

/// Every (relation, direction) scalar in descending order of value, cut to
/// the first `n` (clamped to the table size). Ties keep relation order,
/// forward before backward.
pub fn top_relation_scalars(scalars: &RelationScalars, names: &[String], n: usize) -> Vec<ScalarRow> {
    let mut rows: Vec<ScalarRow> = scalars
        .slots()
        .iter()
        .enumerate()
        .map(|(slot, &value)| {
            let (r, dir) = Direction::from_slot(slot);
            let other = scalars.slots()[slot ^ 1];
            ScalarRow {
                relation: names
                    .get(r.index())
                    .cloned()
                    .unwrap_or_else(|| format!("relation{}", r.0)),
                direction: dir,
                value,
                larger_direction: value > other || (value == other && dir == Direction::Forward),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.value.total_cmp(&a.value));
    rows.truncate(n);
    rows
}

pub fn direction_label(dir: Direction) -> &'static str {
    match dir {
        Direction::Forward => "head->tail",
        Direction::Backward => "tail->head",
    }
}

pub fn scalar_table(rows: &[ScalarRow]) -> String {
    let width = rows.iter().map(|r| r.relation.len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:<4} {:<width$} {:<10} {:>12}  larger\n", "rank", "relation", "direction", "value");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<4} {:<width$} {:<10} {:>12.6}  {}\n",
            i + 1,
            r.relation,
            direction_label(r.direction),
            r.value,
            if r.larger_direction { "*" } else { "" }
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_kg: EvalReport,
    pub without_kg: EvalReport,
    /// `(with - without) / without` on test Recall@K; infinite when the
    /// baseline scored zero.
    pub recall_improvement: f64,
    pub mrr_improvement: f64,
}

fn relative(with: f64, without: f64) -> f64 {
    if without == 0.0 {
        if with == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (with - without) / without
    }
}

/// Trains on the full graph and on the interactions alone with the same
/// seeds and settings, then compares test metrics. The split is identical
/// because it only depends on the interaction list and the seed.
pub fn kg_ablation_run(corpus: &Corpus, cfg: &RunConfig) -> Result<AblationReport> {
    let with_kg = run_corpus(corpus, cfg)?.test;
    let without_kg = run_corpus(&corpus.without_kg(), cfg)?.test;
    Ok(AblationReport {
        recall_improvement: relative(with_kg.recall_at_k, without_kg.recall_at_k),
        mrr_improvement: relative(with_kg.mrr_at_k, without_kg.mrr_at_k),
        with_kg,
        without_kg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub coefficient_variance: f64,
    pub num_coefficients: usize,
    pub variance_kind: String,
    pub top_scalars: Vec<ScalarRow>,
}

pub fn diagnose(g: &CollaborativeKG, scalars: &RelationScalars, top: usize) -> Result<DiagnosticsReport> {
    let c = coefficients(g, scalars)?;
    Ok(DiagnosticsReport {
        coefficient_variance: population_variance(&c)?,
        num_coefficients: c.len(),
        variance_kind: "population".into(),
        top_scalars: top_relation_scalars(scalars, g.relation_names(), top),
    })
}

impl DiagnosticsReport {
    pub fn to_table(&self) -> String {
        format!(
            "aggregation coefficients: {}\npopulation variance: {:.6}\n\n{}",
            self.num_coefficients,
            self.coefficient_variance,
            scalar_table(&self.top_scalars)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckg::{build_ckg, NodeSpace, Triplet, INTERACT_NAME};

    fn star() -> CollaborativeKG {
        // one user with two items; item 1 also has three extra users
        let space = NodeSpace::new(4, 2, 0);
        let pairs = [
            (space.user(0), space.item(0)),
            (space.user(0), space.item(1)),
            (space.user(1), space.item(1)),
            (space.user(2), space.item(1)),
            (space.user(3), space.item(1)),
        ];
        CollaborativeKG::new(space, vec![INTERACT_NAME.into()], pairs, std::iter::empty::<Triplet>()).unwrap()
    }

    #[test]
    fn variance_by_hand() {
        assert_eq!(population_variance(&[3.0; 5]).unwrap(), 0.0);
        assert_eq!(population_variance(&[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.25);
        assert!((population_variance(&[1.0, 0.5]).unwrap() - 0.0625).abs() < 1e-15);
        assert!(matches!(population_variance(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn regular_graph_has_zero_variance() {
        let (g, _) = build_ckg(&[("u0", "i0"), ("u1", "i1")], &[] as &[(&str, &str, &str)]).unwrap();
        let s = RelationScalars::constant(1, 0.7);
        assert_eq!(coefficient_variance(&g, &s).unwrap(), 0.0);
    }

    #[test]
    fn group_variance_at_anchor() {
        let g = star();
        let s = RelationScalars::constant(1, 1.0);
        let path = RelationPath::single(RelationId::INTERACT);
        let c = path_coefficients(&g, &s, g.space().user(0), &path).unwrap();
        // user 0 has degree 2, items have degrees 1 and 4
        let vals: Vec<f64> = c.values().copied().collect();
        assert!((vals[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((vals[1] - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        let expected = population_variance(&vals).unwrap();
        let got = per_relation_group_variance(&g, &s, g.space().user(0), &path).unwrap();
        assert_eq!(got, expected);

        // single-edge group
        let one = per_relation_group_variance(&g, &s, g.space().user(1), &path).unwrap();
        assert_eq!(one, 0.0);
        // identical-degree group: users 1..3 seen from item 1 plus user 0 (degree 2)
        let from_item = path_coefficients(&g, &s, g.space().item(1), &path).unwrap();
        assert_eq!(from_item.len(), 4);
    }

    #[test]
    fn two_hop_paths_exclude_anchor() {
        let g = star();
        let s = RelationScalars::constant(1, 1.0);
        let path = RelationPath(vec![RelationId::INTERACT, RelationId::INTERACT]);
        let c = path_coefficients(&g, &s, g.space().user(1), &path).unwrap();
        assert_eq!(c.keys().copied().collect::<Vec<_>>(), vec![g.space().user(0), g.space().user(2), g.space().user(3)]);
        let names = vec![INTERACT_NAME.to_string()];
        assert_eq!(RelationPath::parse("interact/interact", &names).unwrap(), path);
        assert!(RelationPath::parse("nope", &names).is_err());
    }

    #[test]
    fn top_scalars_are_a_sorted_permutation() {
        let s = RelationScalars::from_pairs(&[(0.5, 2.0), (1.5, -1.0), (0.1, 0.1)]);
        let names: Vec<String> = ["interact", "a", "b"].iter().map(|s| s.to_string()).collect();
        let all = top_relation_scalars(&s, &names, 100);
        assert_eq!(all.len(), 6);
        let mut values: Vec<f64> = all.iter().map(|r| r.value).collect();
        assert!(values.windows(2).all(|w| w[0] >= w[1]));
        values.sort_by(f64::total_cmp);
        let mut expected = s.slots().to_vec();
        expected.sort_by(f64::total_cmp);
        assert_eq!(values, expected);
        assert_eq!(all[0].relation, "interact");
        assert_eq!(all[0].direction, Direction::Backward);
        assert!(all[0].larger_direction);
        let one = top_relation_scalars(&s, &names, 1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].value, 2.0);
        assert_eq!(all.iter().filter(|r| r.larger_direction).count(), 3);
    }

    #[test]
    fn table_lists_every_row() {
        let s = RelationScalars::from_pairs(&[(0.5, 2.0)]);
        let t = scalar_table(&top_relation_scalars(&s, &["interact".into()], 5));
        assert_eq!(t.lines().count(), 3);
    }
}
