//! Cluster-structured synthetic knowledge graphs for tests and demos.
//!
//! Items fall into latent clusters. Attribute entities point at items of
//! (mostly) their own cluster through several item relations, categories
//! group attributes, and one top-level node per cluster groups categories,
//! so 1-3 hop requirement chains all end at items. Items also link to a
//! few same-cluster neighbours. Users favour one or two clusters and like
//! items mostly from them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{KgError, KnowledgeGraph, Triple, Vocab};

pub const LIKE_RELATION: &str = "likes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub items: usize,
    pub users: usize,
    /// Relations from attributes to items.
    pub item_relations: usize,
    /// Attribute entities per cluster per item relation.
    pub attributes_per_cluster: usize,
    /// Attributes each item receives per item relation.
    pub attributes_per_item: usize,
    pub categories_per_cluster: usize,
    /// Same-cluster `similar` links per item.
    pub similar_per_item: usize,
    pub likes_per_user: usize,
    /// Probability that an attribute or like ignores the cluster structure.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// About 200 entities and 1000 triples.
    pub fn small(seed: u64) -> Self {
        Self {
            clusters: 4,
            items: 80,
            users: 40,
            item_relations: 3,
            attributes_per_cluster: 4,
            attributes_per_item: 2,
            categories_per_cluster: 2,
            similar_per_item: 1,
            likes_per_user: 10,
            noise: 0.05,
            seed,
        }
    }

    /// Several hundred items; enough hard answers for held-out evaluation.
    pub fn medium(seed: u64) -> Self {
        Self {
            clusters: 6,
            items: 420,
            users: 150,
            item_relations: 3,
            attributes_per_cluster: 6,
            attributes_per_item: 2,
            categories_per_cluster: 3,
            similar_per_item: 2,
            likes_per_user: 20,
            noise: 0.05,
            seed,
        }
    }
}

/// Generated graph as file contents, ready for [`KnowledgeGraph::parse`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticGraph {
    pub triples_tsv: String,
    pub items: String,
    pub users: String,
}

impl SyntheticGraph {
    pub fn to_graph(&self) -> Result<KnowledgeGraph, KgError> {
        KnowledgeGraph::parse(&self.triples_tsv, &self.items, &self.users, LIKE_RELATION)
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticGraph {
    assert!(cfg.clusters > 0 && cfg.items >= cfg.clusters, "need at least one item per cluster");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.clusters;
    let item_cluster: Vec<usize> = (0..cfg.items).map(|i| i % c).collect();
    let by_cluster: Vec<Vec<usize>> = (0..c).map(|k| (0..cfg.items).filter(|&i| item_cluster[i] == k).collect()).collect();
    let mut lines: Vec<String> = Vec::new();
    let mut edge = |h: String, r: &str, t: String| lines.push(format!("{h}\t{r}\t{t}"));

    let pick_cluster = |rng: &mut ChaCha8Rng, home: usize| if rng.gen_bool(cfg.noise) { rng.gen_range(0..c) } else { home };

    for (i, &home) in item_cluster.iter().enumerate() {
        for r in 0..cfg.item_relations {
            let mut chosen = Vec::new();
            while chosen.len() < cfg.attributes_per_item.min(cfg.attributes_per_cluster) {
                let k = pick_cluster(&mut rng, home);
                let a = (k, rng.gen_range(0..cfg.attributes_per_cluster));
                if !chosen.contains(&a) {
                    chosen.push(a);
                }
            }
            for (k, j) in chosen {
                edge(format!("attr{r}_{k}_{j}"), &format!("tagged{r}"), format!("item{i}"));
            }
        }
        let peers = &by_cluster[home];
        for _ in 0..cfg.similar_per_item {
            let j = *peers.choose(&mut rng).expect("cluster nonempty");
            if j != i {
                edge(format!("item{j}"), "similar", format!("item{i}"));
            }
        }
    }
    for k in 0..c {
        for r in 0..cfg.item_relations {
            for j in 0..cfg.attributes_per_cluster {
                let cat = rng.gen_range(0..cfg.categories_per_cluster);
                edge(format!("cat{k}_{cat}"), "groups", format!("attr{r}_{k}_{j}"));
            }
        }
        for cat in 0..cfg.categories_per_cluster {
            edge(format!("top{k}"), "contains", format!("cat{k}_{cat}"));
        }
    }
    for u in 0..cfg.users {
        let mut favourites = vec![rng.gen_range(0..c)];
        if rng.gen_bool(0.5) {
            favourites.push(rng.gen_range(0..c));
        }
        let mut liked = Vec::new();
        let want = cfg.likes_per_user.min(cfg.items);
        while liked.len() < want {
            let home = *favourites.choose(&mut rng).expect("nonempty");
            let k = pick_cluster(&mut rng, home);
            let i = *by_cluster[k].choose(&mut rng).expect("cluster nonempty");
            if !liked.contains(&i) {
                liked.push(i);
            }
        }
        for i in liked {
            edge(format!("user{u}"), LIKE_RELATION, format!("item{i}"));
        }
    }

    let mut triples_tsv = lines.join("\n");
    triples_tsv.push('\n');
    let items = (0..cfg.items).map(|i| format!("item{i}\n")).collect();
    let users = (0..cfg.users).map(|u| format!("user{u}\n")).collect();
    SyntheticGraph { triples_tsv, items, users }
}

/// Uniform random graph: the first third of the entities are items, the
/// next sixth users; relation `r0` is the interaction relation and links
/// users to items, the other relations link arbitrary entities. Entities
/// may be isolated.
pub fn random_graph(entities: usize, relations: usize, triples: usize, seed: u64) -> KnowledgeGraph {
    assert!(entities >= 6 && relations >= 2, "graph too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = entities / 3;
    let n_users = (entities / 6).max(1);
    let mut edges = Vec::with_capacity(triples);
    for t in 0..triples {
        let rel = if t % 5 == 0 { 0 } else { rng.gen_range(1..relations as u32) };
        let (head, tail) = if rel == 0 {
            ((n_items + rng.gen_range(0..n_users)) as u32, rng.gen_range(0..n_items) as u32)
        } else {
            (rng.gen_range(0..entities) as u32, rng.gen_range(0..entities) as u32)
        };
        edges.push(Triple { head, rel, tail });
    }
    let ents = Vocab::from_names((0..entities).map(|e| format!("e{e}"))).expect("distinct names");
    let rels = Vocab::from_names((0..relations).map(|r| format!("r{r}"))).expect("distinct names");
    let items = (0..n_items as u32).collect();
    let users = (n_items as u32..(n_items + n_users) as u32).collect();
    KnowledgeGraph::new(ents, rels, edges, items, users, 0).expect("valid graph")
}
