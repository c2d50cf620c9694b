//! The learnable query-embedding recommender.
//!
//! Requirement queries are embedded recursively: an anchor looks up its
//! entity row, a projection adds the relation row, an intersection mixes its
//! operands with per-dimension attention from a two-layer network, and a
//! union takes the element-wise max. The user preference is the 1-hop
//! query `user + likes`, and the joint query is the intersection of the
//! requirement and preference embeddings through the same attention network.
//!
//! A multi-gate mixture of experts then produces one embedding per task
//! (joint, requirement, preference). Experts see only the joint query;
//! each gate sees its own task's query. All tasks share one scoring tower,
//! `sigmoid(gamma - ||q_task - item||_1)`.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::kg::{EntityId, RelationId};
use crate::query::QueryNode;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown model variant `{0}` (expected mtl, shared-bottom, single-task, no-al, no-au)")]
    UnknownVariant(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// The three prediction tasks, in loss-weight order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Requirement and preference jointly (`A`).
    Joint,
    /// Requirement only (`A_l`).
    Requirement,
    /// Preference only (`A_u`).
    Preference,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Joint, Task::Requirement, Task::Preference];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Architecture / loss ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Experts plus one softmax gate per task.
    Mtl,
    /// Experts averaged uniformly; every task shares one representation.
    SharedBottom,
    /// No experts or gates; trained on `A` only.
    SingleTask,
    /// Full model without the requirement loss term.
    NoAl,
    /// Full model without the preference loss term.
    NoAu,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Mtl, Variant::SharedBottom, Variant::SingleTask, Variant::NoAl, Variant::NoAu];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mtl => "mtl",
            Variant::SharedBottom => "shared-bottom",
            Variant::SingleTask => "single-task",
            Variant::NoAl => "no-al",
            Variant::NoAu => "no-au",
        }
    }

    pub fn uses_experts(self) -> bool {
        !matches!(self, Variant::SingleTask)
    }

    pub fn uses_gates(self) -> bool {
        matches!(self, Variant::Mtl | Variant::NoAl | Variant::NoAu)
    }

    /// Task weights after applying the variant's loss ablation.
    pub fn effective_weights(self, w: [f64; 3]) -> [f64; 3] {
        match self {
            Variant::Mtl | Variant::SharedBottom => w,
            Variant::SingleTask => [w[0], 0.0, 0.0],
            Variant::NoAl => [w[0], 0.0, w[2]],
            Variant::NoAu => [w[0], w[1], 0.0],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub experts: usize,
    pub gamma: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, experts: 4, gamma: 12.0, variant: Variant::Mtl }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::InvalidConfig("dim must be positive".into()));
        }
        if self.experts == 0 {
            return Err(ModelError::InvalidConfig("expert count must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(ModelError::InvalidConfig(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    entity: ParamId,
    relation: ParamId,
    omega_hidden: ParamId,
    omega_out: ParamId,
    experts: Vec<ParamId>,
    gates: Option<[ParamId; 3]>,
}

/// Model parameters together with the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct RecModel<T> {
    config: ModelConfig,
    like_rel: RelationId,
    params: ParamStore<T>,
    ids: ParamIds,
}

/// Names of the parameter tensors, in store order, for a given config.
pub fn param_layout(config: &ModelConfig, num_entities: usize, num_relations: usize) -> Vec<(String, usize, usize)> {
    let d = config.dim;
    let k = config.experts;
    let mut out = vec![
        ("entity_emb".to_owned(), num_entities, d),
        ("relation_emb".to_owned(), num_relations, d),
        ("intersect.hidden".to_owned(), 2 * d + 1, d),
        ("intersect.out".to_owned(), d + 1, 2 * d),
    ];
    if config.variant.uses_experts() {
        for s in 0..k {
            out.push((format!("expert.{s}"), d + 1, d));
        }
    }
    if config.variant.uses_gates() {
        for g in ["gate.joint", "gate.requirement", "gate.preference"] {
            out.push((g.to_owned(), d + 1, k));
        }
    }
    out
}

/// Per-task embeddings of one (user, requirement) pair, as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbeddings<T> {
    pub requirement: Vec<T>,
    pub preference: Vec<T>,
    pub joint: Vec<T>,
    /// Task-specific outputs of the mixture head, indexed by [`Task::index`].
    pub tasks: [Vec<T>; 3],
}

/// Tape handles of the three query embeddings before the mixture head.
#[derive(Debug, Clone, Copy)]
pub struct QueryVars {
    pub joint: Var,
    pub requirement: Var,
    pub preference: Var,
}

impl<T: Scalar> RecModel<T> {
    /// Randomly initialized model. Embedding rows are uniform in
    /// `±0.5/sqrt(d)`; affine weights (bias row included) are uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn new(
        config: ModelConfig,
        num_entities: usize,
        num_relations: usize,
        like_rel: RelationId,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let emb_bound = 0.5 / (d as f64).sqrt();
        let mut params = ParamStore::new();
        for (name, rows, cols) in param_layout(&config, num_entities, num_relations) {
            let bound = if name.ends_with("_emb") { emb_bound } else { 1.0 / ((rows - 1) as f64).sqrt() };
            let dist = Uniform::new_inclusive(-bound, bound);
            let data = (0..rows * cols).map(|_| T::lit(dist.sample(&mut rng))).collect();
            params.add(name, Tensor::from_vec(rows, cols, data));
        }
        Self::from_params(config, like_rel, params)
    }

    /// Wraps existing tensors, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, like_rel: RelationId, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let entity = params.find("entity_emb").ok_or_else(|| ModelError::InvalidConfig("missing entity_emb".into()))?;
        let relation =
            params.find("relation_emb").ok_or_else(|| ModelError::InvalidConfig("missing relation_emb".into()))?;
        let layout = param_layout(&config, params.get(entity).rows(), params.get(relation).rows());
        if layout.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, rows, cols), (_, p)) in layout.iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != (*rows, *cols) {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter `{}` {}x{} does not match expected `{name}` {rows}x{cols}",
                    p.name,
                    p.value.rows(),
                    p.value.cols()
                )));
            }
        }
        if like_rel as usize >= params.get(relation).rows() {
            return Err(ModelError::InvalidConfig("like relation outside relation table".into()));
        }
        let find = |n: &str| params.find(n).expect("layout checked");
        let experts = if config.variant.uses_experts() {
            (0..config.experts).map(|s| find(&format!("expert.{s}"))).collect()
        } else {
            Vec::new()
        };
        let gates = config
            .variant
            .uses_gates()
            .then(|| [find("gate.joint"), find("gate.requirement"), find("gate.preference")]);
        let ids = ParamIds { entity, relation, omega_hidden: find("intersect.hidden"), omega_out: find("intersect.out"), experts, gates };
        Ok(Self { config, like_rel, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn like_rel(&self) -> RelationId {
        self.like_rel
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_entities(&self) -> usize {
        self.params.get(self.ids.entity).rows()
    }

    pub fn num_relations(&self) -> usize {
        self.params.get(self.ids.relation).rows()
    }

    pub fn entity_param(&self) -> ParamId {
        self.ids.entity
    }

    pub fn relation_param(&self) -> ParamId {
        self.ids.relation
    }

    pub fn entity_embedding(&self, e: EntityId) -> &[T] {
        self.params.get(self.ids.entity).row(e as usize)
    }

    fn gamma(&self) -> T {
        T::lit(self.config.gamma)
    }

    // -- tape-level operators ------------------------------------------------

    pub fn embed_anchor(&self, tape: &mut Tape<'_, T>, e: EntityId) -> Var {
        tape.gather(self.ids.entity, e as usize)
    }

    /// `base + r`
    pub fn embed_projection(&self, tape: &mut Tape<'_, T>, base: Var, r: RelationId) -> Var {
        let rel = tape.gather(self.ids.relation, r as usize);
        tape.add(base, rel)
    }

    /// Attention-weighted per-dimension convex combination of two queries.
    pub fn embed_intersection(&self, tape: &mut Tape<'_, T>, a: Var, b: Var) -> Var {
        let d = self.config.dim;
        let x = tape.concat(&[a, b]);
        let h = tape.affine(self.ids.omega_hidden, x);
        let h = tape.relu(h);
        // Output column 2j is branch a's logit for dimension j, 2j+1 is b's.
        let logits = tape.affine(self.ids.omega_out, h);
        let logits = tape.reshape(logits, d, 2);
        let weights = tape.softmax_last_dim(logits);
        tape.weighted_sum(weights, &[a, b])
    }

    pub fn embed_union(&self, tape: &mut Tape<'_, T>, a: Var, b: Var) -> Var {
        tape.elementwise_max(a, b)
    }

    /// Requirement embedding; n-ary intersections and unions fold left over
    /// the canonical child order.
    pub fn embed_requirement(&self, tape: &mut Tape<'_, T>, q: &QueryNode) -> Var {
        match q {
            QueryNode::Anchor(e) => self.embed_anchor(tape, *e),
            QueryNode::Project(r, c) => {
                let base = self.embed_requirement(tape, c);
                self.embed_projection(tape, base, *r)
            }
            QueryNode::And(cs) => {
                let mut acc = self.embed_requirement(tape, &cs[0]);
                for c in &cs[1..] {
                    let next = self.embed_requirement(tape, c);
                    acc = self.embed_intersection(tape, acc, next);
                }
                acc
            }
            QueryNode::Or(cs) => {
                let mut acc = self.embed_requirement(tape, &cs[0]);
                for c in &cs[1..] {
                    let next = self.embed_requirement(tape, c);
                    acc = self.embed_union(tape, acc, next);
                }
                acc
            }
        }
    }

    /// `user + likes`
    pub fn embed_user_preference(&self, tape: &mut Tape<'_, T>, user: EntityId) -> Var {
        let u = self.embed_anchor(tape, user);
        self.embed_projection(tape, u, self.like_rel)
    }

    /// Intersection of requirement and preference through the shared network.
    pub fn embed_joint(&self, tape: &mut Tape<'_, T>, requirement: Var, preference: Var) -> Var {
        self.embed_intersection(tape, requirement, preference)
    }

    pub fn embed_queries(&self, tape: &mut Tape<'_, T>, user: EntityId, q: &QueryNode) -> QueryVars {
        let requirement = self.embed_requirement(tape, q);
        let preference = self.embed_user_preference(tape, user);
        let joint = self.embed_joint(tape, requirement, preference);
        QueryVars { joint, requirement, preference }
    }

    /// Expert outputs `relu(affine_s(q))`; empty for the single-task variant.
    pub fn experts(&self, tape: &mut Tape<'_, T>, joint: Var) -> Vec<Var> {
        self.ids
            .experts
            .iter()
            .map(|&w| {
                let a = tape.affine(w, joint);
                tape.relu(a)
            })
            .collect()
    }

    /// Softmax mixing weights of one task's gate.
    pub fn gate_weights(&self, tape: &mut Tape<'_, T>, task: Task, input: Var) -> Option<Var> {
        let gates = self.ids.gates?;
        let logits = tape.affine(gates[task.index()], input);
        Some(tape.softmax_last_dim(logits))
    }

    /// One task's embedding from the mixture head.
    pub fn task_embedding(&self, tape: &mut Tape<'_, T>, task: Task, qv: &QueryVars, experts: &[Var]) -> Var {
        match self.config.variant {
            Variant::SingleTask => qv.joint,
            Variant::SharedBottom => {
                let k = experts.len();
                let w = tape.constant(Tensor::vector(vec![T::one() / T::lit(k as f64); k]));
                tape.weighted_sum(w, experts)
            }
            Variant::Mtl | Variant::NoAl | Variant::NoAu => {
                let input = match task {
                    Task::Joint => qv.joint,
                    Task::Requirement => qv.requirement,
                    Task::Preference => qv.preference,
                };
                let w = self.gate_weights(tape, task, input).expect("gated variant has gates");
                tape.weighted_sum(w, experts)
            }
        }
    }

    /// All three task embeddings.
    pub fn mtl_transform(&self, tape: &mut Tape<'_, T>, qv: &QueryVars) -> [Var; 3] {
        let experts = self.experts(tape, qv.joint);
        Task::ALL.map(|t| self.task_embedding(tape, t, qv, &experts))
    }

    /// `gamma - ||q - item||_1`, the pre-sigmoid score.
    pub fn score_logit(&self, tape: &mut Tape<'_, T>, q_task: Var, item: EntityId) -> Var {
        let e = self.embed_anchor(tape, item);
        let d = tape.l1_distance(q_task, e);
        tape.offset_neg(self.gamma(), d)
    }

    // -- value-level API -----------------------------------------------------

    /// Forward pass without gradients.
    pub fn task_embeddings(&self, user: EntityId, q: &QueryNode) -> TaskEmbeddings<T> {
        let mut tape = Tape::new(&self.params);
        let qv = self.embed_queries(&mut tape, user, q);
        let stars = self.mtl_transform(&mut tape, &qv);
        let v = |tape: &Tape<'_, T>, x: Var| tape.value(x).data().to_vec();
        TaskEmbeddings {
            requirement: v(&tape, qv.requirement),
            preference: v(&tape, qv.preference),
            joint: v(&tape, qv.joint),
            tasks: stars.map(|s| v(&tape, s)),
        }
    }

    /// Pre-sigmoid score of one item; strictly monotone in [`Self::score`].
    pub fn logit(&self, q_task: &[T], item: EntityId) -> T {
        let e = self.entity_embedding(item);
        let dist = q_task.iter().zip(e).fold(T::zero(), |acc, (a, b)| acc + (*a - *b).abs());
        self.gamma() - dist
    }

    /// `sigmoid(gamma - ||q_task - item||_1)`
    pub fn score(&self, q_task: &[T], item: EntityId) -> T {
        let z = self.logit(q_task, item);
        if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        }
    }
}
