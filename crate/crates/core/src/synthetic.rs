//! Random and structured synthetic graphs for verification and benchmarking.

use std::collections::HashSet;

use rand::Rng;

use crate::ckg::{CollaborativeKG, NodeId, NodeSpace, RelationId, Triplet, INTERACT_NAME};
use crate::error::Result;

fn relation_names(kg_relations: usize) -> Vec<String> {
    std::iter::once(INTERACT_NAME.to_string())
        .chain((0..kg_relations).map(|r| format!("rel{r}")))
        .collect()
}

/// Small random CKG with at most `max_nodes` nodes. Every user and item has
/// at least one interaction.
pub fn random_ckg<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize) -> Result<CollaborativeKG> {
    let max_nodes = max_nodes.max(4);
    let users = rng.gen_range(2..=(max_nodes / 3).max(2));
    let items = rng.gen_range(2..=(max_nodes / 3).max(2));
    let entities = rng.gen_range(0..=max_nodes - users - items);
    let space = NodeSpace::new(users, items, entities);
    let relations = if entities > 0 || items > 1 { rng.gen_range(1..=3) } else { 0 };

    let mut interactions = HashSet::new();
    for u in 0..users {
        interactions.insert((space.user(u), space.item(rng.gen_range(0..items))));
    }
    for i in 0..items {
        interactions.insert((space.user(rng.gen_range(0..users)), space.item(i)));
    }
    for _ in 0..rng.gen_range(0..=users * items / 2) {
        interactions.insert((space.user(rng.gen_range(0..users)), space.item(rng.gen_range(0..items))));
    }
    let kg_nodes = items + entities;
    let mut kg = Vec::new();
    if relations > 0 {
        let kg_node = |k: usize| NodeId((users + k) as u32);
        for e in 0..entities {
            kg.push(Triplet {
                head: kg_node(rng.gen_range(0..items)),
                relation: RelationId(rng.gen_range(1..=relations) as u32),
                tail: space.entity(e),
            });
        }
        for _ in 0..rng.gen_range(0..=kg_nodes) {
            let (h, t) = (rng.gen_range(0..kg_nodes), rng.gen_range(0..kg_nodes));
            if h != t {
                kg.push(Triplet {
                    head: kg_node(h),
                    relation: RelationId(rng.gen_range(1..=relations) as u32),
                    tail: kg_node(t),
                });
            }
        }
    }
    let mut interactions: Vec<_> = interactions.into_iter().collect();
    interactions.sort();
    CollaborativeKG::new(space, relation_names(relations), interactions, kg)
}

/// Random interaction-only graph. Users and items may end up isolated.
pub fn random_bipartite<R: Rng + ?Sized>(
    rng: &mut R,
    users: usize,
    items: usize,
    edges: usize,
) -> Result<CollaborativeKG> {
    let space = NodeSpace::new(users, items, 0);
    let mut set = HashSet::new();
    set.insert((space.user(0), space.item(0)));
    for _ in 0..edges {
        set.insert((space.user(rng.gen_range(0..users)), space.item(rng.gen_range(0..items))));
    }
    let mut pairs: Vec<_> = set.into_iter().collect();
    pairs.sort();
    CollaborativeKG::new(space, relation_names(0), pairs, std::iter::empty())
}

/// Synthetic dataset sized by edge counts: `interactions` user–item pairs
/// and `kg_triplets` item/entity triplets over `kg_relations` relation types.
/// Roughly 20 interactions per user and per item, 10 triplets per entity.
pub struct ScaledGraph {
    pub space: NodeSpace,
    pub relation_names: Vec<String>,
    pub interactions: Vec<(NodeId, NodeId)>,
    pub kg: Vec<Triplet>,
}

pub fn scaled_graph<R: Rng + ?Sized>(
    rng: &mut R,
    interactions: usize,
    kg_triplets: usize,
    kg_relations: usize,
) -> ScaledGraph {
    let users = (interactions / 20).max(2);
    let items = (interactions / 20).max(2);
    let entities = (kg_triplets / 10).max(1);
    let space = NodeSpace::new(users, items, entities);
    let mut set = HashSet::with_capacity(interactions);
    while set.len() < interactions.min(users * items) {
        set.insert((space.user(rng.gen_range(0..users)), space.item(rng.gen_range(0..items))));
    }
    let mut pairs: Vec<_> = set.into_iter().collect();
    pairs.sort();
    let mut kg = HashSet::with_capacity(kg_triplets);
    let kg_nodes = items + entities;
    while kg.len() < kg_triplets {
        let h = space.item(rng.gen_range(0..items));
        let t = NodeId((users + rng.gen_range(0..kg_nodes)) as u32);
        if h != t {
            kg.insert(Triplet {
                head: h,
                relation: RelationId(rng.gen_range(1..=kg_relations.max(1)) as u32),
                tail: t,
            });
        }
    }
    let mut kg: Vec<_> = kg.into_iter().collect();
    kg.sort();
    ScaledGraph {
        space,
        relation_names: relation_names(kg_relations.max(1)),
        interactions: pairs,
        kg,
    }
}

impl ScaledGraph {
    pub fn graph(&self) -> Result<CollaborativeKG> {
        CollaborativeKG::new(
            self.space,
            self.relation_names.clone(),
            self.interactions.iter().copied(),
            self.kg.iter().copied(),
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ckg::NodeKind;

    #[test]
    fn random_ckg_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let g = random_ckg(&mut rng, 20).unwrap();
            assert!(g.num_nodes() <= 20);
            for kind in [NodeKind::User, NodeKind::Item] {
                assert!(g.nodes_of_kind(kind).all(|n| g.degree(n) > 0));
            }
        }
    }

    #[test]
    fn scaled_graph_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = scaled_graph(&mut rng, 2_000, 3_000, 4);
        let g = s.graph().unwrap();
        assert_eq!(g.num_interactions(), 2_000);
        assert_eq!(g.num_kg_triplets(), 3_000);
    }
}
