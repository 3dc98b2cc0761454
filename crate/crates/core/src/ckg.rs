//! Collaborative knowledge graph: the user–item interaction graph merged with
//! the item–entity knowledge graph into one typed graph over a unified node
//! space.
//!
//! Node indices are laid out as `[users | items | entities]`, so the kind of a
//! node is recoverable from its index alone. Every stored triplet is mirrored,
//! and the adjacency is kept in CSR form with rows sorted by
//! `(neighbor, relation)`, which lets neighbor-set intersection run as a linear
//! merge.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    User,
    Item,
    Entity,
}

/// Index into the unified node space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Relation type index. Index 0 is reserved for the user–item interaction
/// relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl RelationId {
    pub const INTERACT: RelationId = RelationId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn is_interaction(self) -> bool {
        self == Self::INTERACT
    }
}

pub const INTERACT_NAME: &str = "interact";

/// Sizes of the three contiguous node ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpace {
    pub users: usize,
    pub items: usize,
    pub entities: usize,
}

impl NodeSpace {
    pub fn new(users: usize, items: usize, entities: usize) -> Self {
        Self {
            users,
            items,
            entities,
        }
    }

    pub fn len(&self) -> usize {
        self.users + self.items + self.entities
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self, node: NodeId) -> Option<NodeKind> {
        let i = node.index();
        if i < self.users {
            Some(NodeKind::User)
        } else if i < self.users + self.items {
            Some(NodeKind::Item)
        } else if i < self.len() {
            Some(NodeKind::Entity)
        } else {
            None
        }
    }

    pub fn user(&self, u: usize) -> NodeId {
        debug_assert!(u < self.users);
        NodeId(u as u32)
    }

    pub fn item(&self, i: usize) -> NodeId {
        debug_assert!(i < self.items);
        NodeId((self.users + i) as u32)
    }

    pub fn entity(&self, e: usize) -> NodeId {
        debug_assert!(e < self.entities);
        NodeId((self.users + self.items + e) as u32)
    }

    /// Position of an item node within the item range.
    pub fn item_offset(&self, node: NodeId) -> Option<usize> {
        (self.kind(node) == Some(NodeKind::Item)).then(|| node.index() - self.users)
    }

    pub fn user_range(&self) -> Range<usize> {
        0..self.users
    }

    pub fn item_range(&self) -> Range<usize> {
        self.users..self.users + self.items
    }

    pub fn range(&self, kind: NodeKind) -> Range<usize> {
        match kind {
            NodeKind::User => self.user_range(),
            NodeKind::Item => self.item_range(),
            NodeKind::Entity => self.users + self.items..self.len(),
        }
    }
}

/// Directed typed edge `(head, relation, tail)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

/// Which of a relation's two scalars applies to a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Message from head to tail, aggregated into the tail.
    Forward,
    /// Message from tail to head, aggregated into the head.
    Backward,
}

impl Direction {
    pub fn slot(self, relation: RelationId) -> usize {
        match self {
            Direction::Forward => 2 * relation.index(),
            Direction::Backward => 2 * relation.index() + 1,
        }
    }

    pub fn from_slot(slot: usize) -> (RelationId, Direction) {
        let dir = if slot % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        (RelationId((slot / 2) as u32), dir)
    }
}

/// Immutable collaborative knowledge graph with a mirrored CSR adjacency.
#[derive(Debug, Clone)]
pub struct CollaborativeKG {
    space: NodeSpace,
    relation_names: Vec<String>,
    edges: Vec<Triplet>,
    offsets: Vec<usize>,
    neighbors: Vec<NodeId>,
    relations: Vec<RelationId>,
    // scalar slot of the message flowing from `neighbors[e]` into the row node
    slots: Vec<u32>,
    // 1 / sqrt(|N_k| |N_t|) per adjacency entry
    norms: Vec<f64>,
    interaction_count: usize,
}

/// One adjacency entry of row `k`: the neighbor `t`, the relation joining
/// them, and the scalar slot used for the message `t -> k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: NodeId,
    pub relation: RelationId,
    pub slot: usize,
    pub norm: f64,
}

impl CollaborativeKG {
    /// Builds the graph from already-indexed interactions and KG triplets.
    ///
    /// Duplicate edges are dropped. `relation_names[0]` must name the
    /// interaction relation.
    pub fn new(
        space: NodeSpace,
        relation_names: Vec<String>,
        interactions: impl IntoIterator<Item = (NodeId, NodeId)>,
        kg: impl IntoIterator<Item = Triplet>,
    ) -> Result<Self> {
        if relation_names.is_empty() {
            return Err(Error::Structure(
                "relation vocabulary must contain the interaction relation".into(),
            ));
        }
        let mut edges = Vec::new();
        let mut interaction_count = 0usize;
        for (u, i) in interactions {
            if space.kind(u) != Some(NodeKind::User) || space.kind(i) != Some(NodeKind::Item) {
                return Err(Error::Structure(format!(
                    "interaction edge ({}, {}) must connect a user to an item",
                    u.0, i.0
                )));
            }
            edges.push(Triplet {
                head: u,
                relation: RelationId::INTERACT,
                tail: i,
            });
            interaction_count += 1;
        }
        if interaction_count == 0 {
            return Err(Error::Empty("interaction list"));
        }
        for t in kg {
            let ok_end = |n: NodeId| matches!(space.kind(n), Some(NodeKind::Item | NodeKind::Entity));
            if !ok_end(t.head) || !ok_end(t.tail) {
                return Err(Error::Structure(format!(
                    "KG triplet ({}, {}, {}) must connect items or entities",
                    t.head.0, t.relation.0, t.tail.0
                )));
            }
            if t.relation.is_interaction() || t.relation.index() >= relation_names.len() {
                return Err(Error::Structure(format!(
                    "KG triplet uses invalid relation {}",
                    t.relation.0
                )));
            }
            edges.push(t);
        }
        edges.sort_unstable();
        edges.dedup();
        let interaction_count = edges
            .iter()
            .filter(|t| t.relation.is_interaction())
            .count();

        let n = space.len();
        let mut degree = vec![0usize; n];
        for t in &edges {
            degree[t.head.index()] += 1;
            degree[t.tail.index()] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let total = *offsets.last().unwrap();
        let mut rows: Vec<(NodeId, RelationId, u32)> = vec![(NodeId(0), RelationId(0), 0); total];
        let mut cursor = offsets[..n].to_vec();
        for t in &edges {
            // row head receives the tail -> head message
            rows[cursor[t.head.index()]] =
                (t.tail, t.relation, Direction::Backward.slot(t.relation) as u32);
            cursor[t.head.index()] += 1;
            rows[cursor[t.tail.index()]] =
                (t.head, t.relation, Direction::Forward.slot(t.relation) as u32);
            cursor[t.tail.index()] += 1;
        }
        for k in 0..n {
            rows[offsets[k]..offsets[k + 1]].sort_unstable();
        }
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect();
        let mut neighbors = Vec::with_capacity(total);
        let mut relations = Vec::with_capacity(total);
        let mut slots = Vec::with_capacity(total);
        let mut norms = Vec::with_capacity(total);
        for k in 0..n {
            for &(t, r, s) in &rows[offsets[k]..offsets[k + 1]] {
                neighbors.push(t);
                relations.push(r);
                slots.push(s);
                norms.push(inv_sqrt[k] * inv_sqrt[t.index()]);
            }
        }
        Ok(Self {
            space,
            relation_names,
            edges,
            offsets,
            neighbors,
            relations,
            slots,
            norms,
            interaction_count,
        })
    }

    pub fn space(&self) -> NodeSpace {
        self.space
    }

    pub fn num_nodes(&self) -> usize {
        self.space.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    /// Deduplicated triplets, sorted.
    pub fn edges(&self) -> &[Triplet] {
        &self.edges
    }

    pub fn num_interactions(&self) -> usize {
        self.interaction_count
    }

    pub fn num_kg_triplets(&self) -> usize {
        self.edges.len() - self.interaction_count
    }

    /// Number of directed adjacency entries (twice the triplet count).
    pub fn num_entries(&self) -> usize {
        self.neighbors.len()
    }

    #[inline]
    pub fn degree(&self, node: NodeId) -> usize {
        let k = node.index();
        self.offsets[k + 1] - self.offsets[k]
    }

    #[inline]
    pub fn row_range(&self, node: NodeId) -> Range<usize> {
        let k = node.index();
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn neighbors(&self, node: NodeId) -> impl Iterator<Item = Neighbor> + '_ {
        self.row_range(node).map(move |e| Neighbor {
            node: self.neighbors[e],
            relation: self.relations[e],
            slot: self.slots[e] as usize,
            norm: self.norms[e],
        })
    }

    /// Raw CSR arrays `(offsets, neighbors, slots, norms)` for the propagation
    /// kernels.
    pub(crate) fn csr(&self) -> (&[usize], &[NodeId], &[u32], &[f64]) {
        (&self.offsets, &self.neighbors, &self.slots, &self.norms)
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.space.range(kind).map(|k| NodeId(k as u32))
    }

    /// Nodes of `kind` with at least one incident edge.
    pub fn connected_nodes(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes_of_kind(kind)
            .filter(|&n| self.degree(n) > 0)
            .collect()
    }

    /// Interaction edges as `(user, item)` pairs.
    pub fn interactions(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges
            .iter()
            .filter(|t| t.relation.is_interaction())
            .map(|t| (t.head, t.tail))
    }

    pub fn kg_triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.edges
            .iter()
            .filter(|t| !t.relation.is_interaction())
            .copied()
    }

    /// Copy of this graph with every KG triplet removed.
    pub fn without_kg(&self) -> Result<Self> {
        Self::new(
            self.space,
            self.relation_names.clone(),
            self.interactions().collect::<Vec<_>>(),
            std::iter::empty(),
        )
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if node.index() >= self.space.len() {
            return Err(Error::invalid(format!(
                "node {} outside node space of {}",
                node.0,
                self.space.len()
            )));
        }
        Ok(())
    }

    /// Size of the multiset intersection of the two neighbor lists, compared
    /// on `(neighbor, relation)`.
    pub fn common_neighbors(&self, a: NodeId, b: NodeId) -> usize {
        let ra = self.row_range(a);
        let rb = self.row_range(b);
        let (mut i, mut j) = (ra.start, rb.start);
        let mut common = 0;
        while i < ra.end && j < rb.end {
            let ka = (self.neighbors[i], self.relations[i]);
            let kb = (self.neighbors[j], self.relations[j]);
            match ka.cmp(&kb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    common += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        common
    }
}

/// Neighbor-overlap similarity `s` and degree weight `w` of a node pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborOverlap {
    pub s: f64,
    pub w: f64,
}

/// `s = |N_a ∩ N_b| / sqrt(|N_a||N_b|)` and `w = 1 - 1/sqrt(|N_a||N_b|)`,
/// over the full CKG adjacency.
pub fn neighbor_overlap(g: &CollaborativeKG, a: NodeId, b: NodeId) -> Result<NeighborOverlap> {
    g.check_node(a)?;
    g.check_node(b)?;
    let (da, db) = (g.degree(a), g.degree(b));
    if da == 0 || db == 0 {
        return Err(Error::Degenerate(format!(
            "neighbor overlap of zero-degree node ({} or {})",
            a.0, b.0
        )));
    }
    let root = ((da * db) as f64).sqrt();
    let s = g.common_neighbors(a, b) as f64 / root;
    Ok(NeighborOverlap {
        s: s.min(1.0),
        w: 1.0 - 1.0 / root,
    })
}

/// Per-edge aggregation coefficient `alpha / sqrt(|N_k| |N_t|)`.
pub fn degree_norm_coefficient(g: &CollaborativeKG, k: NodeId, t: NodeId, alpha: f64) -> Result<f64> {
    g.check_node(k)?;
    g.check_node(t)?;
    let (dk, dt) = (g.degree(k), g.degree(t));
    if dk == 0 || dt == 0 {
        return Err(Error::Degenerate(format!(
            "aggregation coefficient over zero-degree node ({} or {})",
            k.0, t.0
        )));
    }
    Ok(alpha / ((dk * dt) as f64).sqrt())
}

/// Builds a CKG from raw identifiers: users first, then items, then entities,
/// each in first-appearance order.
pub fn build_ckg<S: AsRef<str>>(
    interactions: &[(S, S)],
    kg_triplets: &[(S, S, S)],
) -> Result<(CollaborativeKG, Corpus)> {
    let corpus = Corpus::from_raw(interactions, kg_triplets, &Default::default())?;
    let graph = corpus.graph(&corpus.interactions)?;
    Ok((graph, corpus))
}
