//! Knowledge graph storage, indexing, file ingestion and edge hold-out.
//!
//! A [`KnowledgeGraph`] holds KG facts and user-item interactions in one
//! triple store. Interactions are ordinary triples whose relation is the
//! graph's `like_rel`; users and items are subsets of the entity vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sets::IdSet;

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("empty graph")]
    EmptyGraph,
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("interaction triple ({head}, {rel}, {tail}) must link a user to an item")]
    InvalidInteraction { head: String, rel: String, tail: String },
    #[error("hold-out fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("cannot hold out {wanted} triples without orphaning an entity or relation (only {achieved} removable)")]
    SplitInfeasible { wanted: usize, achieved: usize },
    #[error("split manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn read_file(path: &Path) -> Result<String, KgError> {
    fs::read_to_string(path).map_err(|source| KgError::Io { path: path.display().to_string(), source })
}

fn write_file(path: &Path, contents: &str) -> Result<(), KgError> {
    fs::write(path, contents).map_err(|source| KgError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Self { head, rel, tail }
    }
}

/// Bidirectional name <-> dense id map. Ids follow insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::new();
        for n in names {
            let n = n.into();
            if v.get(&n).is_some() {
                return Err(KgError::Manifest(format!("duplicate vocabulary name `{n}`")));
            }
            v.intern(&n);
        }
        Ok(v)
    }

    /// Returns the id of `name`, inserting it if new.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

static EMPTY: IdSet = IdSet::new();

/// Indexed knowledge graph including the user-item interaction subgraph.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    items: IdSet,
    users: IdSet,
    like_rel: RelationId,
    out_index: HashMap<(EntityId, RelationId), IdSet>,
    in_index: HashMap<(RelationId, EntityId), IdSet>,
    incoming: Vec<Vec<(RelationId, EntityId)>>,
}

impl KnowledgeGraph {
    /// Builds and indexes a graph. Duplicate triples are collapsed to their
    /// first occurrence.
    pub fn new(
        entities: Vocab,
        relations: Vocab,
        triples: Vec<Triple>,
        items: IdSet,
        users: IdSet,
        like_rel: RelationId,
    ) -> Result<Self, KgError> {
        if triples.is_empty() {
            return Err(KgError::EmptyGraph);
        }
        let mut seen = HashSet::with_capacity(triples.len());
        let triples: Vec<Triple> = triples.into_iter().filter(|t| seen.insert(*t)).collect();

        let n_ent = entities.len() as u32;
        let n_rel = relations.len() as u32;
        for t in &triples {
            assert!(t.head < n_ent && t.tail < n_ent && t.rel < n_rel, "triple id out of vocabulary range");
        }
        assert!(items.iter().chain(users.iter()).all(|e| e < n_ent), "item/user id out of range");
        assert!(like_rel < n_rel, "like relation out of range");

        for t in triples.iter().filter(|t| t.rel == like_rel) {
            if !users.contains(t.head) || !items.contains(t.tail) {
                return Err(KgError::InvalidInteraction {
                    head: entities.name(t.head).to_owned(),
                    rel: relations.name(t.rel).to_owned(),
                    tail: entities.name(t.tail).to_owned(),
                });
            }
        }

        let mut out_raw: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut in_raw: HashMap<(RelationId, EntityId), Vec<EntityId>> = HashMap::new();
        let mut incoming = vec![Vec::new(); entities.len()];
        for t in &triples {
            out_raw.entry((t.head, t.rel)).or_default().push(t.tail);
            in_raw.entry((t.rel, t.tail)).or_default().push(t.head);
            incoming[t.tail as usize].push((t.rel, t.head));
        }
        for inc in &mut incoming {
            inc.sort_unstable();
        }
        let out_index = out_raw.into_iter().map(|(k, v)| (k, IdSet::from_unsorted(v))).collect();
        let in_index = in_raw.into_iter().map(|(k, v)| (k, IdSet::from_unsorted(v))).collect();

        Ok(Self { entities, relations, triples, items, users, like_rel, out_index, in_index, incoming })
    }

    /// Same vocabularies, items, users and like relation; different edges.
    pub fn with_triples(&self, triples: Vec<Triple>) -> Result<Self, KgError> {
        Self::new(
            self.entities.clone(),
            self.relations.clone(),
            triples,
            self.items.clone(),
            self.users.clone(),
            self.like_rel,
        )
    }

    /// Parses in-memory file contents. See [`load_graph`] for the format.
    pub fn parse(triples: &str, items: &str, users: &str, like_rel_name: &str) -> Result<Self, KgError> {
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let triples = parse_triples(triples, "triples", &mut entities, &mut relations, true)?;
        Self::assemble(entities, relations, triples, items, users, like_rel_name)
    }

    /// Parses triples against fixed vocabularies; unknown names are errors.
    pub fn parse_with_vocab(
        mut entities: Vocab,
        mut relations: Vocab,
        triples: &str,
        items: &str,
        users: &str,
        like_rel_name: &str,
    ) -> Result<Self, KgError> {
        let triples = parse_triples(triples, "triples", &mut entities, &mut relations, false)?;
        Self::assemble(entities, relations, triples, items, users, like_rel_name)
    }

    fn assemble(
        entities: Vocab,
        relations: Vocab,
        triples: Vec<Triple>,
        items: &str,
        users: &str,
        like_rel_name: &str,
    ) -> Result<Self, KgError> {
        if triples.is_empty() {
            return Err(KgError::EmptyGraph);
        }
        let resolve = |text: &str| -> Result<IdSet, KgError> {
            name_lines(text)
                .map(|n| entities.get(n).ok_or_else(|| KgError::UnknownEntity(n.to_owned())))
                .collect::<Result<Vec<_>, _>>()
                .map(IdSet::from_unsorted)
        };
        let items = resolve(items)?;
        let users = resolve(users)?;
        let like_rel = relations
            .get(like_rel_name)
            .ok_or_else(|| KgError::UnknownRelation(like_rel_name.to_owned()))?;
        Self::new(entities, relations, triples, items, users, like_rel)
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn items(&self) -> &IdSet {
        &self.items
    }

    pub fn users(&self) -> &IdSet {
        &self.users
    }

    pub fn like_rel(&self) -> RelationId {
        self.like_rel
    }

    pub fn is_item(&self, e: EntityId) -> bool {
        self.items.contains(e)
    }

    /// Tails `t` with `(e, r, t)` in the graph.
    pub fn neighbors_out(&self, e: EntityId, r: RelationId) -> &IdSet {
        self.out_index.get(&(e, r)).unwrap_or(&EMPTY)
    }

    /// Heads `h` with `(h, r, t)` in the graph.
    pub fn neighbors_in(&self, r: RelationId, t: EntityId) -> &IdSet {
        self.in_index.get(&(r, t)).unwrap_or(&EMPTY)
    }

    /// All `(relation, head)` pairs pointing at `t`, sorted.
    pub fn incoming(&self, t: EntityId) -> &[(RelationId, EntityId)] {
        &self.incoming[t as usize]
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.neighbors_out(t.head, t.rel).contains(t.tail)
    }

    /// Digest of both vocabularies, used to pair checkpoints with datasets.
    pub fn vocab_hash(&self) -> String {
        vocab_hash(&self.entities, &self.relations)
    }

    /// Triple file contents: one `head\trel\ttail` line per triple, in store order.
    pub fn triples_tsv(&self) -> String {
        triples_to_tsv(&self.triples, &self.entities, &self.relations)
    }

    pub fn items_text(&self) -> String {
        names_to_lines(self.items.iter().map(|e| self.entities.name(e)))
    }

    pub fn users_text(&self) -> String {
        names_to_lines(self.users.iter().map(|e| self.entities.name(e)))
    }

    #[cfg(test)]
    pub(crate) fn out_index_len(&self) -> usize {
        self.out_index.values().map(IdSet::len).sum()
    }
}

pub fn vocab_hash(entities: &Vocab, relations: &Vocab) -> String {
    let mut h = Sha256::new();
    for n in entities.names() {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    h.update(b"\x00");
    for n in relations.names() {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn triples_to_tsv(triples: &[Triple], entities: &Vocab, relations: &Vocab) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(entities.name(t.head));
        out.push('\t');
        out.push_str(relations.name(t.rel));
        out.push('\t');
        out.push_str(entities.name(t.tail));
        out.push('\n');
    }
    out
}

pub fn names_to_lines<'a>(names: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for n in names {
        out.push_str(n);
        out.push('\n');
    }
    out
}

fn name_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty())
}

fn parse_triples(
    text: &str,
    file: &str,
    entities: &mut Vocab,
    relations: &mut Vocab,
    grow: bool,
) -> Result<Vec<Triple>, KgError> {
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(KgError::Parse {
                file: file.to_owned(),
                line: line_no,
                msg: format!("expected `head<TAB>relation<TAB>tail`, found {} field(s)", fields.len()),
            });
        }
        let ent = |v: &mut Vocab, n: &str| {
            if grow {
                Ok(v.intern(n))
            } else {
                v.get(n).ok_or_else(|| KgError::UnknownEntity(n.to_owned()))
            }
        };
        let head = ent(entities, fields[0])?;
        let rel = if grow {
            relations.intern(fields[1])
        } else {
            relations.get(fields[1]).ok_or_else(|| KgError::UnknownRelation(fields[1].to_owned()))?
        };
        let tail = ent(entities, fields[2])?;
        triples.push(Triple { head, rel, tail });
    }
    Ok(triples)
}

/// Loads a graph from a tab-separated triple file plus item and user name
/// lists. Ids are assigned in first-appearance order over the triple file.
pub fn load_graph(
    triple_file: &Path,
    item_file: &Path,
    user_file: &Path,
    like_rel_name: &str,
) -> Result<KnowledgeGraph, KgError> {
    let triples = read_file(triple_file)?;
    let items = read_file(item_file)?;
    let users = read_file(user_file)?;
    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    let file = triple_file.display().to_string();
    let triples = parse_triples(&triples, &file, &mut entities, &mut relations, true)?;
    KnowledgeGraph::assemble(entities, relations, triples, &items, &users, like_rel_name)
}

/// A knowledge graph with a held-out edge set.
#[derive(Debug, Clone)]
pub struct KgSplit {
    pub full: KnowledgeGraph,
    pub train: KnowledgeGraph,
    pub held_out: Vec<Triple>,
    pub fraction: f64,
    pub seed: u64,
}

/// Holds out `round(fraction * |triples|)` edges uniformly at random.
///
/// Edges are visited in a seeded random order. A visited edge is held out
/// only if every symbol it touches (head, tail, relation) keeps at least one
/// remaining training edge; otherwise it stays in training and the next edge
/// in the order takes its slot.
pub fn split_edges(kg: &KnowledgeGraph, fraction: f64, seed: u64) -> Result<KgSplit, KgError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(KgError::InvalidFraction(fraction));
    }
    let triples = kg.triples();
    let wanted = (fraction * triples.len() as f64).round() as usize;

    let mut ent_count = vec![0usize; kg.num_entities()];
    let mut rel_count = vec![0usize; kg.num_relations()];
    for t in triples {
        ent_count[t.head as usize] += 1;
        if t.tail != t.head {
            ent_count[t.tail as usize] += 1;
        }
        rel_count[t.rel as usize] += 1;
    }

    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut held = vec![false; triples.len()];
    let mut n_held = 0;
    for &idx in &order {
        if n_held == wanted {
            break;
        }
        let t = triples[idx];
        let removable = ent_count[t.head as usize] > 1 && ent_count[t.tail as usize] > 1 && rel_count[t.rel as usize] > 1;
        if !removable {
            continue;
        }
        ent_count[t.head as usize] -= 1;
        if t.tail != t.head {
            ent_count[t.tail as usize] -= 1;
        }
        rel_count[t.rel as usize] -= 1;
        held[idx] = true;
        n_held += 1;
    }
    if n_held < wanted {
        return Err(KgError::SplitInfeasible { wanted, achieved: n_held });
    }

    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for (t, h) in triples.iter().zip(&held) {
        if *h {
            held_out.push(*t);
        } else {
            train.push(*t);
        }
    }
    Ok(KgSplit { full: kg.clone(), train: kg.with_triples(train)?, held_out, fraction, seed })
}

/// Contents of `split.json` in a split directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub like: String,
    pub fraction: f64,
    pub seed: u64,
    pub full_triples: usize,
    pub train_triples: usize,
    pub held_out_triples: usize,
    pub vocab_hash: String,
    pub content_hash: String,
}

pub const SPLIT_FILES: [&str; 6] = ["entities.txt", "relations.txt", "items.txt", "users.txt", "train.tsv", "held_out.tsv"];

impl KgSplit {
    /// Writes the split directory and returns its manifest.
    ///
    /// Vocabularies are written explicitly so that the train graph reloads
    /// with the full graph's ids even when a symbol first appears in a
    /// held-out edge.
    pub fn save(&self, dir: &Path) -> Result<SplitManifest, KgError> {
        fs::create_dir_all(dir).map_err(|source| KgError::Io { path: dir.display().to_string(), source })?;
        let full = &self.full;
        let contents = [
            names_to_lines(full.entities().names().iter().map(String::as_str)),
            names_to_lines(full.relations().names().iter().map(String::as_str)),
            full.items_text(),
            full.users_text(),
            self.train.triples_tsv(),
            triples_to_tsv(&self.held_out, full.entities(), full.relations()),
        ];
        let mut hasher = Sha256::new();
        for (name, body) in SPLIT_FILES.iter().zip(&contents) {
            write_file(&dir.join(name), body)?;
            hasher.update(name.as_bytes());
            hasher.update(b"\0");
            hasher.update(body.as_bytes());
        }
        let manifest = SplitManifest {
            like: full.relations().name(full.like_rel()).to_owned(),
            fraction: self.fraction,
            seed: self.seed,
            full_triples: full.triples().len(),
            train_triples: self.train.triples().len(),
            held_out_triples: self.held_out.len(),
            vocab_hash: full.vocab_hash(),
            content_hash: hex::encode(hasher.finalize()),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join("split.json"), &(json + "\n"))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(KgSplit, SplitManifest), KgError> {
        let manifest: SplitManifest = serde_json::from_str(&read_file(&dir.join("split.json"))?)
            .map_err(|e| KgError::Manifest(e.to_string()))?;
        let entities = Vocab::from_names(name_lines(&read_file(&dir.join("entities.txt"))?))?;
        let relations = Vocab::from_names(name_lines(&read_file(&dir.join("relations.txt"))?))?;
        let items = read_file(&dir.join("items.txt"))?;
        let users = read_file(&dir.join("users.txt"))?;
        let train_text = read_file(&dir.join("train.tsv"))?;
        let held_text = read_file(&dir.join("held_out.tsv"))?;

        let train = KnowledgeGraph::parse_with_vocab(
            entities.clone(),
            relations.clone(),
            &train_text,
            &items,
            &users,
            &manifest.like,
        )?;
        let (mut e2, mut r2) = (entities, relations);
        let held_out = parse_triples(&held_text, "held_out.tsv", &mut e2, &mut r2, false)?;
        let mut all = train.triples().to_vec();
        all.extend_from_slice(&held_out);
        let full = train.with_triples(all)?;
        if full.vocab_hash() != manifest.vocab_hash {
            return Err(KgError::Manifest("vocabulary hash does not match split.json".into()));
        }
        let split = KgSplit { full, train, held_out, fraction: manifest.fraction, seed: manifest.seed };
        Ok((split, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::parse("a\tr1\tx\na\tr1\ty\nu\tlikes\tx\n", "x\ny\n", "u\n", "likes").unwrap()
    }

    #[test]
    fn load_counts_and_index() {
        let kg = toy();
        assert_eq!(kg.num_entities(), 4);
        assert_eq!(kg.num_relations(), 2);
        assert_eq!(kg.triples().len(), 3);
        let a = kg.entities().get("a").unwrap();
        let r1 = kg.relations().get("r1").unwrap();
        let names: Vec<&str> = kg.neighbors_out(a, r1).iter().map(|e| kg.entities().name(e)).collect();
        assert_eq!(names, ["x", "y"]);
        let x = kg.entities().get("x").unwrap();
        assert!(kg.neighbors_out(x, r1).is_empty());
    }

    #[test]
    fn ids_follow_first_appearance() {
        let kg = toy();
        assert_eq!(kg.entities().names(), ["a", "x", "y", "u"]);
        assert_eq!(kg.relations().names(), ["r1", "likes"]);
    }

    #[test]
    fn empty_graph_rejected() {
        assert!(matches!(KnowledgeGraph::parse("", "", "", "likes"), Err(KgError::EmptyGraph)));
        assert!(matches!(KnowledgeGraph::parse("\n\n", "", "", "likes"), Err(KgError::EmptyGraph)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KnowledgeGraph::parse("a\tr\tb\na r c\n", "b\n", "a\n", "r").unwrap_err();
        match err {
            KgError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_names_rejected() {
        let e = KnowledgeGraph::parse("a\tr1\tx\n", "zz\n", "", "r1").unwrap_err();
        assert!(matches!(e, KgError::UnknownEntity(n) if n == "zz"));
        let e = KnowledgeGraph::parse("a\tr1\tx\n", "x\n", "", "likes").unwrap_err();
        assert!(matches!(e, KgError::UnknownRelation(n) if n == "likes"));
    }

    #[test]
    fn interaction_must_link_user_to_item() {
        let e = KnowledgeGraph::parse("a\tlikes\tx\n", "x\n", "", "likes").unwrap_err();
        assert!(matches!(e, KgError::InvalidInteraction { .. }));
    }

    #[test]
    fn duplicate_triples_collapse() {
        let kg = KnowledgeGraph::parse("a\tr\tb\na\tr\tb\nu\tl\tb\n", "b\n", "u\n", "l").unwrap();
        assert_eq!(kg.triples().len(), 2);
        assert_eq!(kg.out_index_len(), 2);
    }

    #[test]
    fn split_keeps_lone_relation() {
        // `rare` has exactly one triple; it must stay in training whatever the seed.
        let mut text = String::new();
        for i in 0..19 {
            text.push_str(&format!("h{}\tr\tt{}\n", i % 4, i % 5));
        }
        text.push_str("h0\trare\tt0\n");
        text.push_str("u\tl\tt1\n");
        let kg = KnowledgeGraph::parse(&text, "t0\nt1\n", "u\n", "l").unwrap();
        let rare = kg.relations().get("rare").unwrap();
        for seed in 0..200 {
            let split = split_edges(&kg, 0.3, seed).unwrap();
            assert!(split.held_out.iter().all(|t| t.rel != rare));
            for r in 0..kg.num_relations() as u32 {
                assert!(split.train.triples().iter().any(|t| t.rel == r), "relation {r} orphaned");
            }
        }
    }

    #[test]
    fn split_infeasible_reports_error() {
        let kg = KnowledgeGraph::parse("a\tr\tb\nu\tl\tb\n", "b\n", "u\n", "l").unwrap();
        assert!(matches!(split_edges(&kg, 0.5, 1), Err(KgError::SplitInfeasible { .. })));
        assert!(matches!(split_edges(&kg, 1.5, 1), Err(KgError::InvalidFraction(_))));
        assert!(matches!(split_edges(&kg, 0.0, 1), Err(KgError::InvalidFraction(_))));
    }
}
