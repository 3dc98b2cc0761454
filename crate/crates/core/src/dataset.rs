//! Dataset loading, raw-id indexing, the 8:1:1 split and sparsity sampling.
//!
//! File formats (UTF-8, tab separated):
//!
//! * interactions: `user_id  item_id  [rating  [timestamp]]`, optional header
//!   (recognised by a non-numeric third field, or by typed `name:type` columns)
//! * KG: `head_id  relation_name  tail_id`
//! * item links (optional): `item_id  entity_id`, rewriting KG entity ids to
//!   the item they denote
//!
//! Item ids and entity ids share the KG namespace: an id that appears in the
//! interaction file's item column is an item, anything else is an entity.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckg::{CollaborativeKG, NodeId, NodeSpace, RelationId, Triplet, INTERACT_NAME};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user_raw: String,
    pub item_raw: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// String interner preserving first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: u32) -> &str {
        &self.names[i as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    pub users: Interner,
    pub items: Interner,
    pub entities: Interner,
    pub relations: Interner,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusOptions {
    /// Reject item links that name items absent from the interaction file.
    pub strict: bool,
    /// `item_raw -> entity_raw`; KG occurrences of the entity denote the item.
    pub item_links: Vec<(String, String)>,
}

/// Indexed dataset: vocabulary, node space, deduplicated interactions and KG
/// triplets. Split-independent; graphs for a given training set are built
/// from it with [`Corpus::graph`].
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub space: NodeSpace,
    /// Deduplicated `(user, item)` pairs in first-appearance order.
    pub interactions: Vec<(NodeId, NodeId)>,
    pub kg: Vec<Triplet>,
}

impl Corpus {
    pub fn from_raw<S: AsRef<str>>(
        interactions: &[(S, S)],
        kg_triplets: &[(S, S, S)],
        options: &CorpusOptions,
    ) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::Empty("interaction list"));
        }
        let mut vocab = Vocabulary::default();
        vocab.relations.intern(INTERACT_NAME);
        let mut pairs = Vec::with_capacity(interactions.len());
        for (u, i) in interactions {
            let u = vocab.users.intern(u.as_ref());
            let i = vocab.items.intern(i.as_ref());
            pairs.push((u, i));
        }

        let mut entity_to_item: HashMap<&str, &str> = HashMap::new();
        for (item, entity) in &options.item_links {
            if vocab.items.get(item).is_none() {
                if options.strict {
                    return Err(Error::Structure(format!(
                        "item link references unknown item `{item}`"
                    )));
                }
                continue;
            }
            entity_to_item.entry(entity.as_str()).or_insert(item.as_str());
        }

        enum End {
            Item(u32),
            Entity(u32),
        }
        let resolve = |raw: &str, vocab: &mut Vocabulary| -> End {
            let raw = entity_to_item.get(raw).copied().unwrap_or(raw);
            match vocab.items.get(raw) {
                Some(i) => End::Item(i),
                None => End::Entity(vocab.entities.intern(raw)),
            }
        };
        let mut raw_kg = Vec::with_capacity(kg_triplets.len());
        for (h, r, t) in kg_triplets {
            let rel = r.as_ref();
            if rel == INTERACT_NAME {
                return Err(Error::Structure(format!(
                    "KG relation name `{INTERACT_NAME}` is reserved"
                )));
            }
            let head = resolve(h.as_ref(), &mut vocab);
            let rel = vocab.relations.intern(rel);
            let tail = resolve(t.as_ref(), &mut vocab);
            raw_kg.push((head, rel, tail));
        }

        let space = NodeSpace::new(vocab.users.len(), vocab.items.len(), vocab.entities.len());
        let node = |e: &End| match *e {
            End::Item(i) => space.item(i as usize),
            End::Entity(x) => space.entity(x as usize),
        };
        let kg = raw_kg
            .iter()
            .map(|(h, r, t)| Triplet {
                head: node(h),
                relation: RelationId(*r),
                tail: node(t),
            })
            .collect();

        let mut seen = HashSet::with_capacity(pairs.len());
        let interactions = pairs
            .into_iter()
            .filter(|p| seen.insert(*p))
            .map(|(u, i)| (space.user(u as usize), space.item(i as usize)))
            .collect();

        Ok(Self {
            vocab,
            space,
            interactions,
            kg,
        })
    }

    pub fn from_records(
        records: &[InteractionRecord],
        kg: &[RawTriplet],
        options: &CorpusOptions,
    ) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = records
            .iter()
            .map(|r| (r.user_raw.as_str(), r.item_raw.as_str()))
            .collect();
        let triplets: Vec<(&str, &str, &str)> = kg
            .iter()
            .map(|t| (t.head.as_str(), t.relation.as_str(), t.tail.as_str()))
            .collect();
        Self::from_raw(&pairs, &triplets, options)
    }

    pub fn relation_names(&self) -> Vec<String> {
        self.vocab.relations.names().to_vec()
    }

    /// Graph over the full node space using `train` as the interaction edges.
    pub fn graph(&self, train: &[(NodeId, NodeId)]) -> Result<CollaborativeKG> {
        CollaborativeKG::new(
            self.space,
            self.relation_names(),
            train.iter().copied(),
            self.kg.iter().copied(),
        )
    }

    /// Same users and items (identical node indices), no entities, no KG.
    pub fn without_kg(&self) -> Self {
        let mut vocab = self.vocab.clone();
        vocab.entities = Interner::default();
        let mut relations = Interner::default();
        relations.intern(INTERACT_NAME);
        vocab.relations = relations;
        Self {
            vocab,
            space: NodeSpace::new(self.space.users, self.space.items, 0),
            interactions: self.interactions.clone(),
            kg: Vec::new(),
        }
    }

    pub fn user_node(&self, raw: &str) -> Option<NodeId> {
        self.vocab.users.get(raw).map(|u| self.space.user(u as usize))
    }

    pub fn item_node(&self, raw: &str) -> Option<NodeId> {
        self.vocab.items.get(raw).map(|i| self.space.item(i as usize))
    }

    /// Raw identifier of any node.
    pub fn raw_name(&self, node: NodeId) -> &str {
        let k = node.index();
        let s = self.space;
        if k < s.users {
            self.vocab.users.name(k as u32)
        } else if k < s.users + s.items {
            self.vocab.items.name((k - s.users) as u32)
        } else {
            self.vocab.entities.name((k - s.users - s.items) as u32)
        }
    }
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn is_typed_header(fields: &[&str]) -> bool {
    fields.iter().any(|f| f.contains(':'))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_interactions(path: &Path, min_rating: Option<f64>) -> Result<Vec<InteractionRecord>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if first {
            first = false;
            let non_numeric_third = fields.get(2).is_some_and(|f| f.trim().parse::<f64>().is_err());
            if non_numeric_third || is_typed_header(&fields) {
                continue;
            }
        }
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_error(path, line_no, "expected `user<TAB>item[<TAB>rating[<TAB>timestamp]]`"));
        }
        let rating = match fields.get(2).map(|f| f.trim()) {
            None | Some("") => None,
            Some(f) => Some(
                f.parse::<f64>()
                    .map_err(|_| parse_error(path, line_no, format!("invalid rating `{f}`")))?,
            ),
        };
        let timestamp = match fields.get(3).map(|f| f.trim()) {
            None | Some("") => None,
            Some(f) => Some(match f.parse::<i64>() {
                Ok(t) => t,
                Err(_) => f
                    .parse::<f64>()
                    .map(|t| t as i64)
                    .map_err(|_| parse_error(path, line_no, format!("invalid timestamp `{f}`")))?,
            }),
        };
        if let (Some(min), Some(r)) = (min_rating, rating) {
            if r < min {
                continue;
            }
        }
        out.push(InteractionRecord {
            user_raw: fields[0].to_string(),
            item_raw: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    Ok(out)
}

pub fn load_kg(path: &Path) -> Result<Vec<RawTriplet>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if std::mem::take(&mut first) && (is_typed_header(&fields) || fields[0] == "head_id") {
            continue;
        }
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_error(path, n + 1, "expected `head<TAB>relation<TAB>tail`"));
        }
        out.push(RawTriplet {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn load_item_links(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if std::mem::take(&mut first) && (is_typed_header(&fields) || fields[0] == "item_id") {
            continue;
        }
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_error(path, n + 1, "expected `item<TAB>entity`"));
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

/// Loads interaction and (optional) KG files. A missing KG path means an
/// interaction-only dataset.
pub fn load_dataset(
    interaction_path: &Path,
    kg_path: Option<&Path>,
    min_rating: Option<f64>,
) -> Result<(Vec<InteractionRecord>, Vec<RawTriplet>)> {
    let records = load_interactions(interaction_path, min_rating)?;
    let kg = match kg_path {
        Some(p) => load_kg(p)?,
        None => Vec::new(),
    };
    Ok((records, kg))
}

/// Train/validation/test partition of the indexed interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<(NodeId, NodeId)>,
    pub validation: Vec<(NodeId, NodeId)>,
    pub test: Vec<(NodeId, NodeId)>,
    pub seed: u64,
    /// Size of the full interaction list the split was drawn from.
    pub total_interactions: usize,
}

/// Global uniform 80/10/10 split: validation and test get `floor(n/10)` each,
/// train takes the remainder.
pub fn split_811(records: &[(NodeId, NodeId)], seed: u64) -> Result<SplitDataset> {
    if records.is_empty() {
        return Err(Error::Empty("interaction list"));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = n / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i]).collect::<Vec<_>>();
    Ok(SplitDataset {
        validation: pick(&order[..tenth]),
        test: pick(&order[tenth..2 * tenth]),
        train: pick(&order[2 * tenth..]),
        seed,
        total_interactions: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneStats {
    pub validation_dropped: usize,
    pub test_dropped: usize,
}

impl SplitDataset {
    /// Drops validation/test pairs whose user or item never occurs in train.
    pub fn prune_unrankable(&mut self) -> PruneStats {
        let users: HashSet<NodeId> = self.train.iter().map(|p| p.0).collect();
        let items: HashSet<NodeId> = self.train.iter().map(|p| p.1).collect();
        let keep = |p: &(NodeId, NodeId)| users.contains(&p.0) && items.contains(&p.1);
        let (v, t) = (self.validation.len(), self.test.len());
        self.validation.retain(keep);
        self.test.retain(keep);
        PruneStats {
            validation_dropped: v - self.validation.len(),
            test_dropped: t - self.test.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// Ratios used to emulate sparse scenarios.
pub const SPARSITY_RATIO_GRID: [f64; 5] = [0.8, 0.4, 0.2, 0.1, 0.05];

/// Subsamples the training set to `floor(ratio * total_interactions)` pairs
/// (capped by the train pool). Validation, test and the KG are untouched.
pub fn sample_sparsity(split: &SplitDataset, spec: SamplingSpec) -> Result<SplitDataset> {
    if !(spec.ratio > 0.0 && spec.ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "sampling ratio {} outside (0, 1]",
            spec.ratio
        )));
    }
    let target = ((spec.ratio * split.total_interactions as f64).floor() as usize).min(split.train.len());
    let mut out = split.clone();
    if target < split.train.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (chosen, _) = out.train.partial_shuffle(&mut rng, target);
        out.train = chosen.to_vec();
    }
    Ok(out)
}

/// Sorted item lists per user.
#[derive(Debug, Clone)]
pub struct UserItems {
    lists: Vec<Vec<NodeId>>,
}

impl UserItems {
    pub fn new(space: NodeSpace, pairs: &[(NodeId, NodeId)]) -> Self {
        let mut lists = vec![Vec::new(); space.users];
        for &(u, i) in pairs {
            lists[u.index()].push(i);
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Self { lists }
    }

    pub fn items(&self, user: NodeId) -> &[NodeId] {
        &self.lists[user.index()]
    }

    pub fn contains(&self, user: NodeId, item: NodeId) -> bool {
        self.lists[user.index()].binary_search(&item).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.lists.len()
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn pairs(n: usize) -> Vec<(NodeId, NodeId)> {
        (0..n).map(|k| (NodeId(k as u32), NodeId((n + k) as u32))).collect()
    }

    #[test]
    fn rating_filter() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "inter.tsv", "u1\ti1\t5\nu1\ti2\t3\n");
        let recs = load_interactions(&p, Some(4.0)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].item_raw, "i1");
    }

    #[test]
    fn header_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "user\titem\trating\nu\ti\t1\n");
        assert_eq!(load_interactions(&p, None).unwrap().len(), 1);
        let p = write(
            &dir,
            "b.inter",
            "user_id:token\titem_id:token\trating:float\ttimestamp:float\n1\t2\t3\t881250949\n",
        );
        let recs = load_interactions(&p, None).unwrap();
        assert_eq!(recs[0].timestamp, Some(881250949));
        let p = write(&dir, "c.kg", "head_id:token\trelation_id:token\ttail_id:token\na\tr\tb\n");
        assert_eq!(load_kg(&p).unwrap().len(), 1);
    }

    #[test]
    fn empty_kg_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "kg.tsv", "");
        assert!(load_kg(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "inter.tsv", "u\ti\t1\nbroken\n");
        let err = load_interactions(&p, None).unwrap_err();
        match err {
            Error::Parse { path, line, .. } => {
                assert_eq!(line, 2);
                assert!(path.ends_with("inter.tsv"));
            }
            other => panic!("unexpected {other}"),
        }
        let p = write(&dir, "kg.tsv", "a\tr\n");
        assert!(matches!(load_kg(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions(Path::new("/nonexistent/x.tsv"), None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn corpus_orders_users_items_entities() {
        let corpus = Corpus::from_raw(
            &[("bob", "x"), ("amy", "y"), ("bob", "y"), ("bob", "x")],
            &[("x", "genre", "rock"), ("rock", "sub", "y")],
            &CorpusOptions::default(),
        )
        .unwrap();
        assert_eq!(corpus.space, NodeSpace::new(2, 2, 1));
        assert_eq!(corpus.user_node("bob"), Some(NodeId(0)));
        assert_eq!(corpus.item_node("y"), Some(NodeId(3)));
        assert_eq!(corpus.raw_name(NodeId(4)), "rock");
        // duplicate interaction dropped
        assert_eq!(corpus.interactions.len(), 3);
        assert_eq!(corpus.vocab.relations.names(), ["interact", "genre", "sub"]);
    }

    #[test]
    fn item_links_and_strict_mode() {
        let links = vec![("x".to_string(), "m.01".to_string())];
        let corpus = Corpus::from_raw(
            &[("u", "x")],
            &[("m.01", "r", "m.02")],
            &CorpusOptions {
                strict: true,
                item_links: links,
            },
        )
        .unwrap();
        assert_eq!(corpus.kg[0].head, corpus.item_node("x").unwrap());
        assert_eq!(corpus.space.entities, 1);

        let bad = CorpusOptions {
            strict: true,
            item_links: vec![("ghost".into(), "m.01".into())],
        };
        assert!(matches!(
            Corpus::from_raw(&[("u", "x")], &[("m.01", "r", "m.02")], &bad),
            Err(Error::Structure(_))
        ));
        let lenient = CorpusOptions {
            strict: false,
            ..bad
        };
        assert!(Corpus::from_raw(&[("u", "x")], &[("m.01", "r", "m.02")], &lenient).is_ok());
    }

    #[test]
    fn split_sizes() {
        let s = split_811(&pairs(10), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let s = split_811(&pairs(21_173), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (16_939, 2_117, 2_117));
        assert!(split_811(&[], 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let data = pairs(500);
        let a = split_811(&data, 42).unwrap();
        assert_eq!(a, split_811(&data, 42).unwrap());
        assert_ne!(a.train, split_811(&data, 43).unwrap().train);
        let mut all: Vec<_> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
        all.sort();
        let mut expect = data.clone();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn prune_drops_cold_pairs() {
        let u = |k| NodeId(k);
        let mut s = SplitDataset {
            train: vec![(u(0), u(10)), (u(1), u(11))],
            validation: vec![(u(0), u(11)), (u(2), u(10))],
            test: vec![(u(1), u(12))],
            seed: 0,
            total_interactions: 5,
        };
        let stats = s.prune_unrankable();
        assert_eq!(s.validation, vec![(u(0), u(11))]);
        assert!(s.test.is_empty());
        assert_eq!(stats, PruneStats { validation_dropped: 1, test_dropped: 1 });
    }

    #[test]
    fn sampling() {
        let split = split_811(&pairs(21_173), 3).unwrap();
        let full = sample_sparsity(&split, SamplingSpec { ratio: 1.0, seed: 9 }).unwrap();
        assert_eq!(full, split);
        let sparse = sample_sparsity(&split, SamplingSpec { ratio: 0.1, seed: 9 }).unwrap();
        assert_eq!(sparse.train.len(), 2_117);
        assert_eq!(sparse.validation, split.validation);
        assert_eq!(sparse.test, split.test);
        assert_eq!(sparse, sample_sparsity(&split, SamplingSpec { ratio: 0.1, seed: 9 }).unwrap());
        let dense = sample_sparsity(&split, SamplingSpec { ratio: 0.8, seed: 9 }).unwrap();
        assert_eq!(dense.train.len(), 16_938);
        let train: HashSet<_> = split.train.iter().collect();
        assert!(sparse.train.iter().all(|p| train.contains(p)));
        for bad in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(sample_sparsity(&split, SamplingSpec { ratio: bad, seed: 0 }).is_err());
        }
    }
}
