//! Benchmark construction: grounded recommendation instances per query shape.
//!
//! Requirements are sampled backward from a seed item, so every sampled
//! query has at least one answer. Train records are answered on the train
//! graph; valid and test records are answered on the full graph and kept
//! only when at least one joint answer needs a held-out edge.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{names_to_lines, vocab_hash, EntityId, KgError, KgSplit, KnowledgeGraph, RelationId, Vocab};
use crate::oracle::{answer_all, answer_requirement, graded_answers};
use crate::query::{
    classify_shape, parse_query_in, serialize_query_in, AnswerSets, RecInstance, QueryError, QueryNode,
    QueryShape, Template,
};
use crate::sets::IdSet;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("zero-shot shape {0} cannot be requested for the train split")]
    ZeroShotInTrain(QueryShape),
    #[error("sampling failed: {0}")]
    SamplingFailure(&'static str),
    #[error("no user has a training interaction")]
    NoUsers,
    #[error("sampling fell short of the requested counts:\n{}", format_shortfalls(.0))]
    Shortfall(Vec<Shortfall>),
    #[error("{file}:{line}: {msg}")]
    Record { file: String, line: usize, msg: String },
    #[error("{file}:{line}: {source}")]
    Query {
        file: String,
        line: usize,
        #[source]
        source: QueryError,
    },
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_shortfalls(s: &[Shortfall]) -> String {
    s.iter()
        .map(|s| format!("  {} {}: wanted {}, got {}", s.split, s.shape, s.wanted, s.got))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub split: SplitName,
    pub shape: QueryShape,
    pub wanted: usize,
    pub got: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, valid, test)"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Requested records per split and shape; absent means zero.
    pub counts: BTreeMap<SplitName, BTreeMap<QueryShape, usize>>,
    pub seed: u64,
    /// Consecutive failed attempts tolerated per split and shape.
    pub max_retries: usize,
    /// Largest requirement answer set an instance may have.
    pub answer_cap: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { counts: BTreeMap::new(), seed: 0, max_retries: 1000, answer_cap: 100 }
    }
}

impl DatasetConfig {
    /// `train` records per basic shape, `valid` and `test` per shape.
    pub fn uniform(train: usize, valid: usize, test: usize, seed: u64) -> Self {
        let mut cfg = Self { seed, ..Self::default() };
        for s in QueryShape::BASIC {
            cfg.set(SplitName::Train, s, train);
        }
        for s in QueryShape::ALL {
            cfg.set(SplitName::Valid, s, valid);
            cfg.set(SplitName::Test, s, test);
        }
        cfg
    }

    pub fn set(&mut self, split: SplitName, shape: QueryShape, n: usize) {
        self.counts.entry(split).or_default().insert(shape, n);
    }

    pub fn count(&self, split: SplitName, shape: QueryShape) -> usize {
        self.counts.get(&split).and_then(|m| m.get(&shape)).copied().unwrap_or(0)
    }

    /// Parses `key = value` lines. Keys are `seed`, `max_retries`,
    /// `answer_cap` and `<split>.<shape>` where the shape may also be the
    /// group `basic`, `zero_shot` or `all`. Later lines override earlier
    /// ones; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| DatasetError::Config { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|_| err(format!("`{key}` needs a non-negative integer, got `{v}`")));
            match key {
                "seed" => cfg.seed = num(value)?,
                "max_retries" => cfg.max_retries = num(value)? as usize,
                "answer_cap" => cfg.answer_cap = num(value)? as usize,
                _ => {
                    let (split, shape) = key.split_once('.').ok_or_else(|| err(format!("unknown key `{key}`")))?;
                    let split: SplitName = split.parse().map_err(err)?;
                    let shapes: Vec<QueryShape> = match shape {
                        "basic" => QueryShape::BASIC.to_vec(),
                        "zero_shot" => QueryShape::ZERO_SHOT.to_vec(),
                        "all" => QueryShape::ALL.to_vec(),
                        s => vec![s.parse().map_err(|e: QueryError| err(e.to_string()))?],
                    };
                    let n = num(value)? as usize;
                    for s in shapes {
                        cfg.set(split, s, n);
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for s in QueryShape::ZERO_SHOT {
            if self.count(SplitName::Train, s) > 0 {
                return Err(DatasetError::ZeroShotInTrain(s));
            }
        }
        if self.answer_cap == 0 {
            return Err(DatasetError::Config { line: 0, msg: "answer_cap must be positive".into() });
        }
        if self.max_retries == 0 {
            return Err(DatasetError::Config { line: 0, msg: "max_retries must be positive".into() });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sampling

const LOCAL_TRIES: usize = 4;

fn random_incoming<R: Rng>(kg: &KnowledgeGraph, target: EntityId, rng: &mut R) -> Option<(RelationId, EntityId)> {
    let like = kg.like_rel();
    let edges: Vec<_> = kg.incoming(target).iter().filter(|(r, _)| *r != like).copied().collect();
    edges.choose(rng).copied()
}

/// Tail of a uniformly drawn non-interaction edge.
fn random_target<R: Rng>(kg: &KnowledgeGraph, rng: &mut R) -> Option<EntityId> {
    let like = kg.like_rel();
    for _ in 0..64 {
        let t = kg.triples().choose(rng)?;
        if t.rel != like {
            return Some(t.tail);
        }
    }
    None
}

fn ground<R: Rng>(kg: &KnowledgeGraph, t: &Template, target: EntityId, rng: &mut R) -> Option<QueryNode> {
    match t {
        Template::Anchor => Some(QueryNode::anchor(target)),
        Template::Project(child) => (0..LOCAL_TRIES).find_map(|_| {
            let (r, head) = random_incoming(kg, target, rng)?;
            ground(kg, child, head, rng).map(|c| QueryNode::project(r, c))
        }),
        Template::And(ts) => (0..LOCAL_TRIES).find_map(|_| {
            let cs: Option<Vec<_>> = ts.iter().map(|c| ground(kg, c, target, rng)).collect();
            distinct(cs?).and_then(|cs| QueryNode::and(cs).ok())
        }),
        Template::Or(ts) => (0..LOCAL_TRIES).find_map(|_| {
            let mut cs = vec![ground(kg, &ts[0], target, rng)?];
            for c in &ts[1..] {
                let other = random_target(kg, rng)?;
                cs.push(ground(kg, c, other, rng)?);
            }
            distinct(cs).and_then(|cs| QueryNode::or(cs).ok())
        }),
    }
}

fn distinct(cs: Vec<QueryNode>) -> Option<Vec<QueryNode>> {
    let set: HashSet<&QueryNode> = cs.iter().collect();
    (set.len() == cs.len()).then_some(cs)
}

/// One backward-sampling attempt. Draws a seed item uniformly and grounds
/// the shape's template so that the seed is an answer. The interaction
/// relation never appears in requirements.
pub fn sample_requirement<R: Rng>(kg: &KnowledgeGraph, shape: QueryShape, rng: &mut R) -> Result<QueryNode, DatasetError> {
    let seed = kg.items().as_slice().choose(rng).copied().ok_or(DatasetError::SamplingFailure("no items"))?;
    let q = ground(kg, &shape.template(), seed, rng).ok_or(DatasetError::SamplingFailure("dead-end entity"))?;
    debug_assert!(answer_requirement(kg, &q).contains(seed));
    Ok(q)
}

/// Users who like at least one of `items` on `kg`.
fn likers(kg: &KnowledgeGraph, items: &IdSet) -> IdSet {
    let like = kg.like_rel();
    IdSet::from_unsorted(items.iter().flat_map(|i| kg.neighbors_in(like, i).iter()).collect())
}

/// One attempt at a full instance for `which` split.
pub fn sample_instance<R: Rng>(
    split: &KgSplit,
    shape: QueryShape,
    which: SplitName,
    answer_cap: usize,
    rng: &mut R,
) -> Result<RecInstance, DatasetError> {
    let kg = if which == SplitName::Train { &split.train } else { &split.full };
    let requirement = sample_requirement(kg, shape, rng)?;
    let req_answers = answer_requirement(kg, &requirement);
    if req_answers.len() > answer_cap {
        return Err(DatasetError::SamplingFailure("requirement over answer cap"));
    }
    let candidates = likers(kg, &req_answers);
    if which == SplitName::Train {
        let user = candidates.as_slice().choose(rng).copied().ok_or(DatasetError::SamplingFailure("no user"))?;
        let answers = answer_all(kg, user, &requirement);
        return Ok(RecInstance { user, requirement, shape, answers, hard: None });
    }
    let train_req = answer_requirement(&split.train, &requirement);
    let like = kg.like_rel();
    let eligible: Vec<EntityId> = candidates
        .iter()
        .filter(|&u| {
            let easy = train_req.intersection(split.train.neighbors_out(u, like));
            req_answers.intersection(split.full.neighbors_out(u, like)).iter().any(|i| !easy.contains(i))
        })
        .collect();
    let user = eligible.choose(rng).copied().ok_or(DatasetError::SamplingFailure("no hard answer"))?;
    let graded = graded_answers(split, user, &requirement);
    Ok(RecInstance { user, requirement, shape, answers: graded.full, hard: Some(graded.hard) })
}

/// Records of one shape for every split, in train, valid, test order.
fn sample_shape(split: &KgSplit, cfg: &DatasetConfig, shape: QueryShape) -> (Vec<Vec<RecInstance>>, Vec<Shortfall>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + shape as u64);
    let mut seen: HashSet<(EntityId, QueryNode)> = HashSet::new();
    let mut out = Vec::new();
    let mut short = Vec::new();
    for which in SplitName::ALL {
        let wanted = cfg.count(which, shape);
        let mut records = Vec::with_capacity(wanted);
        let mut failures = 0;
        while records.len() < wanted && failures < cfg.max_retries {
            match sample_instance(split, shape, which, cfg.answer_cap, &mut rng) {
                Ok(inst) if seen.insert((inst.user, inst.requirement.clone())) => {
                    records.push(inst);
                    failures = 0;
                }
                _ => failures += 1,
            }
        }
        if records.len() < wanted {
            short.push(Shortfall { split: which, shape, wanted, got: records.len() });
        }
        out.push(records);
    }
    (out, short)
}

/// Samples every requested record. Shapes are sampled in parallel, each
/// from its own stream derived from the config seed.
pub fn build_dataset(split: &KgSplit, cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let like = split.train.like_rel();
    if !split.train.users().iter().any(|u| !split.train.neighbors_out(u, like).is_empty()) {
        return Err(DatasetError::NoUsers);
    }
    let per_shape: Vec<_> = QueryShape::ALL.par_iter().map(|&s| sample_shape(split, cfg, s)).collect();
    let shortfalls: Vec<Shortfall> = per_shape.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
    if !shortfalls.is_empty() {
        return Err(DatasetError::Shortfall(shortfalls));
    }
    let mut splits: [Vec<RecInstance>; 3] = Default::default();
    for (records, _) in per_shape {
        for (dst, src) in splits.iter_mut().zip(records) {
            dst.extend(src);
        }
    }
    let [train, valid, test] = splits;
    let full = &split.full;
    Ok(Dataset {
        entities: full.entities().clone(),
        relations: full.relations().clone(),
        items: full.items().clone(),
        users: full.users().clone(),
        like_rel: like,
        train,
        valid,
        test,
    })
}

// ---------------------------------------------------------------------------
// Dataset files

/// A benchmark in memory: vocabularies plus the three record lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub entities: Vocab,
    pub relations: Vocab,
    pub items: IdSet,
    pub users: IdSet,
    pub like_rel: RelationId,
    pub train: Vec<RecInstance>,
    pub valid: Vec<RecInstance>,
    pub test: Vec<RecInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerNames {
    #[serde(rename = "A")]
    pub joint: Vec<String>,
    #[serde(rename = "A_l")]
    pub requirement: Vec<String>,
    #[serde(rename = "A_u")]
    pub preference: Vec<String>,
}

/// One JSON-lines record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordJson {
    pub user: String,
    pub query: String,
    pub shape: QueryShape,
    pub answers: AnswerNames,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<AnswerNames>,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub answer_cap: usize,
    pub max_retries: usize,
    pub like: String,
    pub vocab_hash: String,
    pub records: BTreeMap<SplitName, usize>,
    /// sha256 of every emitted file except this manifest.
    pub files: BTreeMap<String, String>,
}

pub const VOCAB_FILES: [&str; 4] = ["entities.txt", "relations.txt", "items.txt", "users.txt"];

impl Dataset {
    pub fn split(&self, which: SplitName) -> &[RecInstance] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn vocab_hash(&self) -> String {
        vocab_hash(&self.entities, &self.relations)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    fn names(&self, s: &IdSet) -> Vec<String> {
        s.iter().map(|e| self.entities.name(e).to_owned()).collect()
    }

    fn answer_names(&self, a: &AnswerSets) -> AnswerNames {
        AnswerNames {
            joint: self.names(&a.joint),
            requirement: self.names(&a.requirement),
            preference: self.names(&a.preference),
        }
    }

    pub fn to_record(&self, inst: &RecInstance) -> RecordJson {
        RecordJson {
            user: self.entities.name(inst.user).to_owned(),
            query: serialize_query_in(&inst.requirement, &self.entities, &self.relations),
            shape: inst.shape,
            answers: self.answer_names(&inst.answers),
            hard: inst.hard.as_ref().map(|h| self.answer_names(h)),
        }
    }

    pub fn to_jsonl(&self, which: SplitName) -> String {
        let mut out = String::new();
        for inst in self.split(which) {
            out.push_str(&serde_json::to_string(&self.to_record(inst)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    fn decode_record(&self, rec: RecordJson, file: &str, line: usize) -> Result<RecInstance, DatasetError> {
        let bad = |msg: String| DatasetError::Record { file: file.to_owned(), line, msg };
        let resolve = |names: &[String]| -> Result<IdSet, DatasetError> {
            names
                .iter()
                .map(|n| self.entities.get(n).ok_or_else(|| bad(format!("unknown entity `{n}`"))))
                .collect::<Result<Vec<_>, _>>()
                .map(IdSet::from_unsorted)
        };
        let sets = |a: &AnswerNames| -> Result<AnswerSets, DatasetError> {
            Ok(AnswerSets {
                joint: resolve(&a.joint)?,
                requirement: resolve(&a.requirement)?,
                preference: resolve(&a.preference)?,
            })
        };
        let user = self.entities.get(&rec.user).ok_or_else(|| bad(format!("unknown user `{}`", rec.user)))?;
        let requirement = parse_query_in(&rec.query, &self.entities, &self.relations)
            .map_err(|source| DatasetError::Query { file: file.to_owned(), line, source })?;
        if classify_shape(&requirement) != Some(rec.shape) {
            return Err(bad(format!("query does not have shape {}", rec.shape)));
        }
        let answers = sets(&rec.answers)?;
        let hard = rec.hard.as_ref().map(sets).transpose()?;
        Ok(RecInstance { user, requirement, shape: rec.shape, answers, hard })
    }

    pub fn parse_jsonl(&self, text: &str, file: &str) -> Result<Vec<RecInstance>, DatasetError> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let rec: RecordJson = serde_json::from_str(raw)
                .map_err(|e| DatasetError::Record { file: file.to_owned(), line: i + 1, msg: e.to_string() })?;
            out.push(self.decode_record(rec, file, i + 1)?);
        }
        Ok(out)
    }

    /// Writes the dataset directory and returns the manifest written to
    /// `dataset.json`.
    pub fn save(&self, dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest, DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = vec![
            (VOCAB_FILES[0].to_owned(), names_to_lines(self.entities.names().iter().map(String::as_str))),
            (VOCAB_FILES[1].to_owned(), names_to_lines(self.relations.names().iter().map(String::as_str))),
            (VOCAB_FILES[2].to_owned(), names_to_lines(self.items.iter().map(|e| self.entities.name(e)))),
            (VOCAB_FILES[3].to_owned(), names_to_lines(self.users.iter().map(|e| self.entities.name(e)))),
        ];
        for which in SplitName::ALL {
            files.push((which.file_name(), self.to_jsonl(which)));
        }
        files.push(("stats.txt".to_owned(), self.stats().to_string()));
        let mut hashes = BTreeMap::new();
        for (name, body) in &files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
            hashes.insert(name.clone(), hex::encode(Sha256::digest(body.as_bytes())));
        }
        let manifest = DatasetManifest {
            seed: cfg.seed,
            answer_cap: cfg.answer_cap,
            max_retries: cfg.max_retries,
            like: self.relations.name(self.like_rel).to_owned(),
            vocab_hash: self.vocab_hash(),
            records: SplitName::ALL.into_iter().map(|s| (s, self.split(s).len())).collect(),
            files: hashes,
        };
        let path = dir.join("dataset.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, json).map_err(io_err(&path))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Dataset, DatasetManifest), DatasetError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(io_err(&path))
        };
        let manifest: DatasetManifest =
            serde_json::from_str(&read("dataset.json")?).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        let lines = |text: String| -> Vec<String> {
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect()
        };
        let entities = Vocab::from_names(lines(read(VOCAB_FILES[0])?))?;
        let relations = Vocab::from_names(lines(read(VOCAB_FILES[1])?))?;
        let resolve = |text: String| -> Result<IdSet, DatasetError> {
            lines(text)
                .iter()
                .map(|n| entities.get(n).ok_or_else(|| DatasetError::Kg(KgError::UnknownEntity(n.clone()))))
                .collect::<Result<Vec<_>, _>>()
                .map(IdSet::from_unsorted)
        };
        let items = resolve(read(VOCAB_FILES[2])?)?;
        let users = resolve(read(VOCAB_FILES[3])?)?;
        let like_rel =
            relations.get(&manifest.like).ok_or_else(|| DatasetError::Kg(KgError::UnknownRelation(manifest.like.clone())))?;
        let mut ds = Dataset { entities, relations, items, users, like_rel, train: vec![], valid: vec![], test: vec![] };
        if ds.vocab_hash() != manifest.vocab_hash {
            return Err(DatasetError::Manifest("vocabulary hash does not match dataset.json".into()));
        }
        for which in SplitName::ALL {
            let name = which.file_name();
            let records = ds.parse_jsonl(&read(&name)?, &name)?;
            match which {
                SplitName::Train => ds.train = records,
                SplitName::Valid => ds.valid = records,
                SplitName::Test => ds.test = records,
            }
        }
        Ok((ds, manifest))
    }

    pub fn stats(&self) -> DatasetStats {
        let mut rows = Vec::new();
        for which in SplitName::ALL {
            for shape in QueryShape::ALL {
                let recs: Vec<_> = self.split(which).iter().filter(|r| r.shape == shape).collect();
                if recs.is_empty() {
                    continue;
                }
                let n = recs.len() as f64;
                let mean = |f: &dyn Fn(&RecInstance) -> usize| recs.iter().map(|r| f(r) as f64).sum::<f64>() / n;
                rows.push(StatsRow {
                    split: which,
                    shape,
                    count: recs.len(),
                    mean_requirement: mean(&|r| r.answers.requirement.len()),
                    mean_joint: mean(&|r| r.answers.joint.len()),
                    mean_hard: recs[0].hard.is_some().then(|| mean(&|r| r.hard.as_ref().map_or(0, |h| h.joint.len()))),
                });
            }
        }
        DatasetStats { rows }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub split: SplitName,
    pub shape: QueryShape,
    pub count: usize,
    pub mean_requirement: f64,
    pub mean_joint: f64,
    pub mean_hard: Option<f64>,
}

/// Per split and shape: record count and mean answer-set sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub rows: Vec<StatsRow>,
}

impl DatasetStats {
    pub fn count(&self, split: SplitName) -> usize {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.count).sum()
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = format!("{:<6} {:<5} {:>7} {:>9} {:>9} {:>9}\n", "split", "shape", "count", "mean|A_l|", "mean|A|", "mean_hard");
        for r in &self.rows {
            let hard = r.mean_hard.map_or_else(|| "-".to_owned(), |h| format!("{h:.2}"));
            let _ = writeln!(
                out,
                "{:<6} {:<5} {:>7} {:>9.2} {:>9.2} {:>9}",
                r.split.name(),
                r.shape.name(),
                r.count,
                r.mean_requirement,
                r.mean_joint,
                hard
            );
        }
        for which in SplitName::ALL {
            let _ = writeln!(out, "{:<6} {:<5} {:>7}", which.name(), "total", self.count(which));
        }
        f.write_str(&out)
    }
}

// ---------------------------------------------------------------------------
// Verification

/// Checks every record against the oracle on its defining graph. Returns
/// one message per violation.
pub fn verify_dataset(split: &KgSplit, ds: &Dataset, answer_cap: usize) -> Vec<String> {
    let mut problems = Vec::new();
    for which in SplitName::ALL {
        for (i, rec) in ds.split(which).iter().enumerate() {
            let at = format!("{}.jsonl record {}", which.name(), i + 1);
            if classify_shape(&rec.requirement) != Some(rec.shape) {
                problems.push(format!("{at}: shape mismatch"));
            }
            if !rec.answers.is_consistent() {
                problems.push(format!("{at}: A != A_l & A_u"));
            }
            if rec.answers.joint.is_empty() {
                problems.push(format!("{at}: empty A"));
            }
            if rec.answers.requirement.len() > answer_cap {
                problems.push(format!("{at}: |A_l| above cap"));
            }
            if which == SplitName::Train {
                if rec.shape.is_zero_shot() {
                    problems.push(format!("{at}: zero-shot shape in train"));
                }
                if rec.hard.is_some() {
                    problems.push(format!("{at}: train record has hard answers"));
                }
                if answer_all(&split.train, rec.user, &rec.requirement) != rec.answers {
                    problems.push(format!("{at}: answers differ from train-graph oracle"));
                }
                continue;
            }
            let Some(hard) = &rec.hard else {
                problems.push(format!("{at}: missing hard answers"));
                continue;
            };
            let graded = graded_answers(split, rec.user, &rec.requirement);
            if graded.full != rec.answers || &graded.hard != hard {
                problems.push(format!("{at}: answers differ from oracle"));
            }
            if hard.joint.is_empty() {
                problems.push(format!("{at}: no hard answer"));
            }
            let easy = answer_all(&split.train, rec.user, &rec.requirement).joint;
            if !hard.joint.is_disjoint(&easy) {
                problems.push(format!("{at}: hard answer reachable on train graph"));
            }
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::split_edges;

    #[test]
    fn one_hop_from_single_in_edge() {
        let kg = KnowledgeGraph::parse("a\tr1\tx\nu\tl\tx\n", "x\n", "u\n", "l").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = sample_requirement(&kg, QueryShape::OneP, &mut rng).unwrap();
        assert_eq!(q, QueryNode::project(0, QueryNode::anchor(0)));
        assert!(matches!(sample_requirement(&kg, QueryShape::TwoI, &mut rng), Err(DatasetError::SamplingFailure(_))));
    }

    #[test]
    fn config_groups_and_overrides() {
        let cfg = DatasetConfig::parse("seed = 9\ntrain.basic = 5\ntrain.3i = 0 # none\ntest.all=2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.count(SplitName::Train, QueryShape::TwoP), 5);
        assert_eq!(cfg.count(SplitName::Train, QueryShape::ThreeI), 0);
        assert_eq!(cfg.count(SplitName::Test, QueryShape::UP), 2);
        assert_eq!(cfg.count(SplitName::Valid, QueryShape::OneP), 0);
        assert!(matches!(DatasetConfig::parse("train.2u = 1"), Err(DatasetError::ZeroShotInTrain(QueryShape::TwoU))));
        assert!(matches!(DatasetConfig::parse("train.2u = 0").map(|c| c.count(SplitName::Train, QueryShape::TwoU)), Ok(0)));
        assert!(matches!(DatasetConfig::parse("bogus = 1"), Err(DatasetError::Config { line: 1, .. })));
        assert!(matches!(DatasetConfig::parse("\n\ntest.9p = 1"), Err(DatasetError::Config { line: 3, .. })));
        assert!(matches!(DatasetConfig::parse("seed = -1"), Err(DatasetError::Config { .. })));
    }

    #[test]
    fn infeasible_counts_report_shortfall() {
        let kg = KnowledgeGraph::parse(
            "a\tr1\tx\nb\tr1\ty\na\tr2\ty\nu\tl\tx\nu\tl\ty\nv\tl\ty\n",
            "x\ny\n",
            "u\nv\n",
            "l",
        )
        .unwrap();
        let split = split_edges(&kg, 0.2, 1).unwrap();
        let mut cfg = DatasetConfig { max_retries: 50, ..DatasetConfig::default() };
        cfg.set(SplitName::Train, QueryShape::ThreeP, 3);
        match build_dataset(&split, &cfg) {
            Err(DatasetError::Shortfall(s)) => {
                assert_eq!(s, vec![Shortfall { split: SplitName::Train, shape: QueryShape::ThreeP, wanted: 3, got: 0 }]);
            }
            other => panic!("{other:?}"),
        }
    }
}
