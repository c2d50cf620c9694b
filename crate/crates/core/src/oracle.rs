//! Exact query answering by graph traversal.
//!
//! Intermediate variables range over all entities; only the final answer
//! set is restricted to items.

use std::collections::HashMap;

use crate::kg::{EntityId, KgSplit, KnowledgeGraph};
use crate::query::{AnswerSets, QueryNode};
use crate::sets::IdSet;

/// Bottom-up set evaluator. Identical subqueries are evaluated once.
pub struct Evaluator<'g, 'q> {
    kg: &'g KnowledgeGraph,
    memo: HashMap<&'q QueryNode, IdSet>,
}

impl<'g, 'q> Evaluator<'g, 'q> {
    pub fn new(kg: &'g KnowledgeGraph) -> Self {
        Self { kg, memo: HashMap::new() }
    }

    /// Entities satisfying `q`, unrestricted.
    pub fn eval(&mut self, q: &'q QueryNode) -> IdSet {
        if let Some(hit) = self.memo.get(q) {
            return hit.clone();
        }
        let out = match q {
            QueryNode::Anchor(e) => IdSet::singleton(*e),
            QueryNode::Project(r, c) => {
                let src = self.eval(c);
                let mut acc = Vec::new();
                for x in &src {
                    acc.extend(self.kg.neighbors_out(x, *r).iter());
                }
                IdSet::from_unsorted(acc)
            }
            QueryNode::And(cs) => {
                let mut it = cs.iter();
                let first = it.next().map(|c| self.eval(c)).unwrap_or_default();
                it.fold(first, |acc, c| {
                    if acc.is_empty() {
                        acc
                    } else {
                        acc.intersection(&self.eval(c))
                    }
                })
            }
            QueryNode::Or(cs) => cs.iter().fold(IdSet::new(), |acc, c| acc.union(&self.eval(c))),
        };
        self.memo.insert(q, out.clone());
        out
    }
}

/// Tree evaluation without memoization.
pub fn eval_entities(kg: &KnowledgeGraph, q: &QueryNode) -> IdSet {
    match q {
        QueryNode::Anchor(e) => IdSet::singleton(*e),
        QueryNode::Project(r, c) => {
            let mut acc = Vec::new();
            for x in &eval_entities(kg, c) {
                acc.extend(kg.neighbors_out(x, *r).iter());
            }
            IdSet::from_unsorted(acc)
        }
        QueryNode::And(cs) => {
            let mut sets = cs.iter().map(|c| eval_entities(kg, c));
            let first = sets.next().unwrap_or_default();
            sets.fold(first, |acc, s| acc.intersection(&s))
        }
        QueryNode::Or(cs) => cs.iter().fold(IdSet::new(), |acc, c| acc.union(&eval_entities(kg, c))),
    }
}

/// Items satisfying the requirement (`A_l`).
pub fn answer_requirement(kg: &KnowledgeGraph, q: &QueryNode) -> IdSet {
    Evaluator::new(kg).eval(q).intersection(kg.items())
}

/// Items the user interacted with (`A_u`).
pub fn answer_preference(kg: &KnowledgeGraph, user: EntityId) -> IdSet {
    kg.neighbors_out(user, kg.like_rel()).intersection(kg.items())
}

/// `A = A_u ∩ A_l`
pub fn answer_joint(kg: &KnowledgeGraph, user: EntityId, q: &QueryNode) -> IdSet {
    answer_all(kg, user, q).joint
}

pub fn answer_all(kg: &KnowledgeGraph, user: EntityId, q: &QueryNode) -> AnswerSets {
    let requirement = answer_requirement(kg, q);
    let preference = answer_preference(kg, user);
    let joint = requirement.intersection(&preference);
    AnswerSets { joint, requirement, preference }
}

/// Joint answers split into those reachable on the train graph (easy)
/// and those that need a held-out edge (hard).
pub fn hard_answers(split: &KgSplit, user: EntityId, q: &QueryNode) -> (IdSet, IdSet) {
    let easy = answer_joint(&split.train, user, q);
    let hard = answer_joint(&split.full, user, q).difference(&easy);
    (easy, hard)
}

/// Easy/hard partition of all three answer sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradedAnswers {
    /// Answers on the full graph.
    pub full: AnswerSets,
    /// Full-graph answers not reachable on the train graph.
    pub hard: AnswerSets,
}

pub fn graded_answers(split: &KgSplit, user: EntityId, q: &QueryNode) -> GradedAnswers {
    let easy = answer_all(&split.train, user, q);
    let full = answer_all(&split.full, user, q);
    let hard = AnswerSets {
        joint: full.joint.difference(&easy.joint),
        requirement: full.requirement.difference(&easy.requirement),
        preference: full.preference.difference(&easy.preference),
    };
    GradedAnswers { full, hard }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::split_edges;
    use crate::query::parse_query;

    fn kg() -> KnowledgeGraph {
        KnowledgeGraph::parse(
            "a\tr1\tx\nb\tr2\tx\na\tr1\ty\nu\tlikes\tx\nu\tlikes\tz\nv\tlikes\ty\nz\tr3\tz\nw\tr4\ta\n",
            "x\ny\nz\n",
            "u\nv\nw\n",
            "likes",
        )
        .unwrap()
    }

    fn names(kg: &KnowledgeGraph, s: &IdSet) -> Vec<String> {
        s.iter().map(|e| kg.entities().name(e).to_owned()).collect()
    }

    /// Truth of `q[i]` by direct search over candidate witnesses.
    fn holds(kg: &KnowledgeGraph, q: &QueryNode, x: EntityId) -> bool {
        match q {
            QueryNode::Anchor(e) => *e == x,
            QueryNode::Project(r, c) => (0..kg.num_entities() as u32)
                .any(|m| kg.triples().iter().any(|t| t.head == m && t.rel == *r && t.tail == x) && holds(kg, c, m)),
            QueryNode::And(cs) => cs.iter().all(|c| holds(kg, c, x)),
            QueryNode::Or(cs) => cs.iter().any(|c| holds(kg, c, x)),
        }
    }

    fn enumerate(kg: &KnowledgeGraph, q: &QueryNode) -> IdSet {
        kg.items().iter().filter(|&i| holds(kg, q, i)).collect()
    }

    #[test]
    fn intersection_and_union_examples() {
        let kg = kg();
        let and = parse_query("(and (p r1 (e a)) (p r2 (e b)))", &kg).unwrap();
        assert_eq!(names(&kg, &answer_requirement(&kg, &and)), ["x"]);
        assert_eq!(answer_requirement(&kg, &and), enumerate(&kg, &and));
        let or = parse_query("(or (p r1 (e a)) (p r2 (e b)))", &kg).unwrap();
        assert_eq!(names(&kg, &answer_requirement(&kg, &or)), ["x", "y"]);
        assert_eq!(answer_requirement(&kg, &or), enumerate(&kg, &or));
    }

    #[test]
    fn projection_of_empty_set_is_empty() {
        let kg = kg();
        let q = parse_query("(p r3 (p r1 (e b)))", &kg).unwrap();
        assert!(answer_requirement(&kg, &q).is_empty());
    }

    #[test]
    fn intermediate_variables_are_not_item_filtered() {
        // `m` is not an item but the 2p chain passes through it.
        let kg = KnowledgeGraph::parse("e\tr1\tm\nm\tr2\tx\nu\tl\tx\n", "x\n", "u\n", "l").unwrap();
        let q = parse_query("(p r2 (p r1 (e e)))", &kg).unwrap();
        assert_eq!(names(&kg, &answer_requirement(&kg, &q)), ["x"]);
        let q1 = parse_query("(p r1 (e e))", &kg).unwrap();
        assert!(answer_requirement(&kg, &q1).is_empty());
    }

    #[test]
    fn preference_examples() {
        let kg = kg();
        let u = kg.entities().get("u").unwrap();
        let w = kg.entities().get("w").unwrap();
        assert_eq!(names(&kg, &answer_preference(&kg, u)), ["x", "z"]);
        assert!(answer_preference(&kg, w).is_empty());
        let as_1p = QueryNode::project(kg.like_rel(), QueryNode::anchor(u));
        assert_eq!(answer_preference(&kg, u), answer_requirement(&kg, &as_1p));
    }

    #[test]
    fn joint_is_intersection() {
        let kg = kg();
        let u = kg.entities().get("u").unwrap();
        let q = parse_query("(p r1 (e a))", &kg).unwrap();
        let all = answer_all(&kg, u, &q);
        assert_eq!(names(&kg, &all.requirement), ["x", "y"]);
        assert_eq!(names(&kg, &all.joint), ["x"]);
        assert!(all.is_consistent());
        let v = kg.entities().get("v").unwrap();
        let q2 = parse_query("(p r2 (e b))", &kg).unwrap();
        assert!(answer_joint(&kg, v, &q2).is_empty());
    }

    #[test]
    fn hard_answers_need_held_out_edges() {
        let mut text = String::from("a\tr1\tx\na\tr1\ty\nu\tlikes\tx\nu\tlikes\ty\n");
        for i in 0..30 {
            text.push_str(&format!("f{}\tr1\ty\nf{}\tr2\tx\n", i % 3, i % 3));
        }
        let kg = KnowledgeGraph::parse(&text, "x\ny\n", "u\n", "likes").unwrap();
        let u = kg.entities().get("u").unwrap();
        let q = parse_query("(p r1 (e a))", &kg).unwrap();
        let edge_ax = crate::kg::Triple::new(kg.entities().get("a").unwrap(), 0, kg.entities().get("x").unwrap());
        for seed in 0..50 {
            let split = split_edges(&kg, 0.2, seed).unwrap();
            let (easy, hard) = hard_answers(&split, u, &q);
            assert!(easy.is_disjoint(&hard));
            if split.held_out.contains(&edge_ax) {
                assert!(hard.contains(edge_ax.tail));
            }
            if split.held_out.is_empty() {
                assert!(hard.is_empty());
            }
        }
    }

    #[test]
    fn memoized_matches_tree_evaluation() {
        let kg = kg();
        let shared = "(p r1 (e a))";
        let q = parse_query(&format!("(or (and {shared} (p r2 (e b))) (and {shared} (p likes (e u))))"), &kg).unwrap();
        assert_eq!(Evaluator::new(&kg).eval(&q), eval_entities(&kg, &q));
    }
}
