//! Logical requirement queries: AST, canonical s-expression syntax and
//! shape classification.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! query  := (p REL node) | (and node node ...) | (or node node ...)
//! node   := query | (e NAME)
//! ```
//!
//! Names are bare atoms, or double-quoted with `\"` and `\\` escapes when
//! they contain whitespace, parentheses or quotes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Vocab};
use crate::sets::IdSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown entity `{name}` at byte {offset}")]
    UnknownEntity { name: String, offset: usize },
    #[error("unknown relation `{name}` at byte {offset}")]
    UnknownRelation { name: String, offset: usize },
    #[error("`{op}` at byte {offset} needs at least 2 operands, found {found}")]
    Arity { op: &'static str, offset: usize, found: usize },
    #[error("a bare anchor is not a requirement; wrap it in a projection")]
    BareAnchor,
    #[error("unknown query shape `{0}`")]
    UnknownShape(String),
}

/// Logical requirement AST.
///
/// `And`/`Or` children are kept sorted (by the derived structural order over
/// ids) so that equal queries compare, hash and serialize identically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueryNode {
    Anchor(EntityId),
    Project(RelationId, Box<QueryNode>),
    And(Vec<QueryNode>),
    Or(Vec<QueryNode>),
}

impl QueryNode {
    pub fn anchor(e: EntityId) -> Self {
        QueryNode::Anchor(e)
    }

    pub fn project(r: RelationId, child: QueryNode) -> Self {
        QueryNode::Project(r, Box::new(child))
    }

    pub fn and(children: Vec<QueryNode>) -> Result<Self, QueryError> {
        if children.len() < 2 {
            return Err(QueryError::Arity { op: "and", offset: 0, found: children.len() });
        }
        let mut children = children;
        children.sort();
        Ok(QueryNode::And(children))
    }

    pub fn or(children: Vec<QueryNode>) -> Result<Self, QueryError> {
        if children.len() < 2 {
            return Err(QueryError::Arity { op: "or", offset: 0, found: children.len() });
        }
        let mut children = children;
        children.sort();
        Ok(QueryNode::Or(children))
    }

    /// Re-sorts every `And`/`Or` child list, bottom-up.
    pub fn canonicalize(self) -> Self {
        match self {
            QueryNode::Anchor(e) => QueryNode::Anchor(e),
            QueryNode::Project(r, c) => QueryNode::Project(r, Box::new(c.canonicalize())),
            QueryNode::And(cs) => {
                let mut cs: Vec<_> = cs.into_iter().map(QueryNode::canonicalize).collect();
                cs.sort();
                QueryNode::And(cs)
            }
            QueryNode::Or(cs) => {
                let mut cs: Vec<_> = cs.into_iter().map(QueryNode::canonicalize).collect();
                cs.sort();
                QueryNode::Or(cs)
            }
        }
    }

    pub fn is_canonical(&self) -> bool {
        match self {
            QueryNode::Anchor(_) => true,
            QueryNode::Project(_, c) => c.is_canonical(),
            QueryNode::And(cs) | QueryNode::Or(cs) => {
                cs.len() >= 2 && cs.windows(2).all(|w| w[0] <= w[1]) && cs.iter().all(QueryNode::is_canonical)
            }
        }
    }

    pub fn is_anchor(&self) -> bool {
        matches!(self, QueryNode::Anchor(_))
    }

    /// Anchor entities, in traversal order.
    pub fn anchors(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let QueryNode::Anchor(e) = n {
                out.push(*e);
            }
        });
        out
    }

    pub fn relations(&self) -> Vec<RelationId> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let QueryNode::Project(r, _) = n {
                out.push(*r);
            }
        });
        out
    }

    fn visit(&self, f: &mut impl FnMut(&QueryNode)) {
        f(self);
        match self {
            QueryNode::Anchor(_) => {}
            QueryNode::Project(_, c) => c.visit(f),
            QueryNode::And(cs) | QueryNode::Or(cs) => cs.iter().for_each(|c| c.visit(f)),
        }
    }
}

/// Query templates of the benchmark taxonomy.
///
/// The first five are the basic shapes used for training and testing; the
/// last four only appear at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryShape {
    #[serde(rename = "1p")]
    OneP,
    #[serde(rename = "2p")]
    TwoP,
    #[serde(rename = "3p")]
    ThreeP,
    #[serde(rename = "2i")]
    TwoI,
    #[serde(rename = "3i")]
    ThreeI,
    #[serde(rename = "ip")]
    IP,
    #[serde(rename = "pi")]
    PI,
    #[serde(rename = "2u")]
    TwoU,
    #[serde(rename = "up")]
    UP,
}

/// Structural pattern of a [`QueryShape`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Template {
    Anchor,
    Project(Box<Template>),
    And(Vec<Template>),
    Or(Vec<Template>),
}

impl Template {
    fn p(child: Template) -> Template {
        Template::Project(Box::new(child))
    }

    /// Whether `q` instantiates this template. And/Or operands match as a
    /// multiset, so child order is irrelevant.
    pub fn matches(&self, q: &QueryNode) -> bool {
        match (self, q) {
            (Template::Anchor, QueryNode::Anchor(_)) => true,
            (Template::Project(t), QueryNode::Project(_, c)) => t.matches(c),
            (Template::And(ts), QueryNode::And(cs)) | (Template::Or(ts), QueryNode::Or(cs)) => {
                ts.len() == cs.len() && match_unordered(ts, cs, &mut vec![false; cs.len()])
            }
            _ => false,
        }
    }
}

fn match_unordered(ts: &[Template], cs: &[QueryNode], used: &mut Vec<bool>) -> bool {
    let Some((t, rest)) = ts.split_first() else {
        return true;
    };
    for i in 0..cs.len() {
        if !used[i] && t.matches(&cs[i]) {
            used[i] = true;
            if match_unordered(rest, cs, used) {
                return true;
            }
            used[i] = false;
        }
    }
    false
}

impl QueryShape {
    pub const ALL: [QueryShape; 9] = [
        QueryShape::OneP,
        QueryShape::TwoP,
        QueryShape::ThreeP,
        QueryShape::TwoI,
        QueryShape::ThreeI,
        QueryShape::IP,
        QueryShape::PI,
        QueryShape::TwoU,
        QueryShape::UP,
    ];
    pub const BASIC: [QueryShape; 5] =
        [QueryShape::OneP, QueryShape::TwoP, QueryShape::ThreeP, QueryShape::TwoI, QueryShape::ThreeI];
    pub const ZERO_SHOT: [QueryShape; 4] = [QueryShape::IP, QueryShape::PI, QueryShape::TwoU, QueryShape::UP];

    pub fn name(self) -> &'static str {
        match self {
            QueryShape::OneP => "1p",
            QueryShape::TwoP => "2p",
            QueryShape::ThreeP => "3p",
            QueryShape::TwoI => "2i",
            QueryShape::ThreeI => "3i",
            QueryShape::IP => "ip",
            QueryShape::PI => "pi",
            QueryShape::TwoU => "2u",
            QueryShape::UP => "up",
        }
    }

    pub fn is_zero_shot(self) -> bool {
        Self::ZERO_SHOT.contains(&self)
    }

    pub fn template(self) -> Template {
        use Template::{And, Anchor, Or};
        let p = Template::p;
        match self {
            QueryShape::OneP => p(Anchor),
            QueryShape::TwoP => p(p(Anchor)),
            QueryShape::ThreeP => p(p(p(Anchor))),
            QueryShape::TwoI => And(vec![p(Anchor), p(Anchor)]),
            QueryShape::ThreeI => And(vec![p(Anchor), p(Anchor), p(Anchor)]),
            QueryShape::IP => p(And(vec![p(Anchor), p(Anchor)])),
            QueryShape::PI => And(vec![p(p(Anchor)), p(Anchor)]),
            QueryShape::TwoU => Or(vec![p(Anchor), p(Anchor)]),
            QueryShape::UP => p(Or(vec![p(Anchor), p(Anchor)])),
        }
    }
}

impl fmt::Display for QueryShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryShape {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QueryShape::ALL
            .into_iter()
            .find(|shape| shape.name() == s)
            .ok_or_else(|| QueryError::UnknownShape(s.to_owned()))
    }
}

/// Exact template match; `None` for queries outside the taxonomy.
pub fn classify_shape(q: &QueryNode) -> Option<QueryShape> {
    QueryShape::ALL.into_iter().find(|s| s.template().matches(q))
}

/// A requirement paired with the user issuing it, and its answer sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecInstance {
    pub user: EntityId,
    pub requirement: QueryNode,
    pub shape: QueryShape,
    pub answers: AnswerSets,
    /// Answers reachable only through held-out edges (valid/test records).
    pub hard: Option<AnswerSets>,
}

/// The three answer sets of a recommendation instance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSets {
    /// Items satisfying both the requirement and the user's preference.
    pub joint: IdSet,
    pub requirement: IdSet,
    pub preference: IdSet,
}

impl AnswerSets {
    pub fn is_consistent(&self) -> bool {
        self.joint == self.requirement.intersection(&self.preference)
    }
}

// ---------------------------------------------------------------------------
// Text syntax

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open(usize),
    Close(usize),
    Atom(String, usize),
}

fn tokenize(text: &str) -> Result<Vec<Token>, QueryError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'(' => {
                tokens.push(Token::Open(i));
                i += 1;
            }
            b')' => {
                tokens.push(Token::Close(i));
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            b'"' => {
                let start = i;
                i += 1;
                let mut buf = Vec::new();
                loop {
                    match bytes.get(i) {
                        None => {
                            return Err(QueryError::Syntax { offset: start, msg: "unterminated string".into() })
                        }
                        Some(b'"') => {
                            i += 1;
                            break;
                        }
                        Some(b'\\') => {
                            match bytes.get(i + 1) {
                                Some(&e @ (b'"' | b'\\')) => buf.push(e),
                                _ => {
                                    return Err(QueryError::Syntax { offset: i, msg: "invalid escape".into() })
                                }
                            }
                            i += 2;
                        }
                        Some(&b) => {
                            buf.push(b);
                            i += 1;
                        }
                    }
                }
                let s = String::from_utf8(buf).expect("slice of valid utf-8 between ascii quotes");
                tokens.push(Token::Atom(s, start));
            }
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')' | b'"') && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(Token::Atom(text[start..i].to_owned(), start));
            }
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
    entities: &'a Vocab,
    relations: &'a Vocab,
}

impl Parser<'_> {
    fn offset(&self) -> usize {
        match self.tokens.get(self.pos) {
            Some(Token::Open(o) | Token::Close(o) | Token::Atom(_, o)) => *o,
            None => self.end,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, QueryError> {
        Err(QueryError::Syntax { offset: self.offset(), msg: msg.into() })
    }

    fn expect_open(&mut self) -> Result<usize, QueryError> {
        match self.tokens.get(self.pos) {
            Some(Token::Open(o)) => {
                let o = *o;
                self.pos += 1;
                Ok(o)
            }
            None => self.err("unexpected end of input, expected `(`"),
            _ => self.err("expected `(`"),
        }
    }

    fn expect_close(&mut self) -> Result<(), QueryError> {
        match self.tokens.get(self.pos) {
            Some(Token::Close(_)) => {
                self.pos += 1;
                Ok(())
            }
            None => self.err("unexpected end of input, expected `)`"),
            _ => self.err("expected `)`"),
        }
    }

    fn atom(&mut self) -> Result<(String, usize), QueryError> {
        match self.tokens.get(self.pos) {
            Some(Token::Atom(s, o)) => {
                let r = (s.clone(), *o);
                self.pos += 1;
                Ok(r)
            }
            None => self.err("unexpected end of input, expected a name"),
            _ => self.err("expected a name"),
        }
    }

    fn node(&mut self) -> Result<QueryNode, QueryError> {
        let open = self.expect_open()?;
        let (op, op_offset) = self.atom()?;
        let node = match op.as_str() {
            "e" => {
                let (name, offset) = self.atom()?;
                let id = self.entities.get(&name).ok_or(QueryError::UnknownEntity { name, offset })?;
                QueryNode::Anchor(id)
            }
            "p" => {
                let (name, offset) = self.atom()?;
                let rel = self.relations.get(&name).ok_or(QueryError::UnknownRelation { name, offset })?;
                let child = self.node()?;
                QueryNode::project(rel, child)
            }
            "and" | "or" => {
                let mut children = Vec::new();
                while matches!(self.tokens.get(self.pos), Some(Token::Open(_))) {
                    children.push(self.node()?);
                }
                let op: &'static str = if op == "and" { "and" } else { "or" };
                if children.len() < 2 {
                    return Err(QueryError::Arity { op, offset: open, found: children.len() });
                }
                children.sort();
                if op == "and" {
                    QueryNode::And(children)
                } else {
                    QueryNode::Or(children)
                }
            }
            _ => {
                return Err(QueryError::Syntax {
                    offset: op_offset,
                    msg: format!("unknown operator `{op}` (expected p, and, or, e)"),
                })
            }
        };
        self.expect_close()?;
        Ok(node)
    }
}

/// Parses a requirement, resolving names against `kg`'s vocabularies.
/// The result is canonical.
pub fn parse_query(text: &str, kg: &KnowledgeGraph) -> Result<QueryNode, QueryError> {
    parse_query_in(text, kg.entities(), kg.relations())
}

/// [`parse_query`] against bare vocabularies.
pub fn parse_query_in(text: &str, entities: &Vocab, relations: &Vocab) -> Result<QueryNode, QueryError> {
    let q = parse_node_in(text, entities, relations)?;
    if q.is_anchor() {
        return Err(QueryError::BareAnchor);
    }
    Ok(q)
}

/// Like [`parse_query`] but also accepts a bare `(e NAME)`.
pub fn parse_node(text: &str, kg: &KnowledgeGraph) -> Result<QueryNode, QueryError> {
    parse_node_in(text, kg.entities(), kg.relations())
}

pub fn parse_node_in(text: &str, entities: &Vocab, relations: &Vocab) -> Result<QueryNode, QueryError> {
    let mut p = Parser { tokens: tokenize(text)?, pos: 0, end: text.len(), entities, relations };
    let q = p.node()?;
    if p.pos != p.tokens.len() {
        return p.err("trailing input after query");
    }
    Ok(q)
}

fn needs_quotes(name: &str) -> bool {
    name.is_empty() || name.bytes().any(|b| b.is_ascii_whitespace() || matches!(b, b'(' | b')' | b'"' | b'\\'))
}

fn push_name(out: &mut String, name: &str) {
    if needs_quotes(name) {
        out.push('"');
        for c in name.chars() {
            if c == '"' || c == '\\' {
                out.push('\\');
            }
            out.push(c);
        }
        out.push('"');
    } else {
        out.push_str(name);
    }
}

fn write_node(out: &mut String, q: &QueryNode, entities: &Vocab, relations: &Vocab) {
    match q {
        QueryNode::Anchor(e) => {
            out.push_str("(e ");
            push_name(out, entities.name(*e));
            out.push(')');
        }
        QueryNode::Project(r, c) => {
            out.push_str("(p ");
            push_name(out, relations.name(*r));
            out.push(' ');
            write_node(out, c, entities, relations);
            out.push(')');
        }
        QueryNode::And(cs) | QueryNode::Or(cs) => {
            out.push_str(if matches!(q, QueryNode::And(_)) { "(and" } else { "(or" });
            for c in cs {
                out.push(' ');
                write_node(out, c, entities, relations);
            }
            out.push(')');
        }
    }
}

/// Canonical s-expression text for a node.
///
/// Children are emitted in stored order, so callers must pass canonical
/// nodes for the output to be canonical; every constructor in this module
/// produces canonical nodes.
pub fn serialize_query(q: &QueryNode, kg: &KnowledgeGraph) -> String {
    serialize_query_in(q, kg.entities(), kg.relations())
}

pub fn serialize_query_in(q: &QueryNode, entities: &Vocab, relations: &Vocab) -> String {
    let mut out = String::new();
    write_node(&mut out, q, entities, relations);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg() -> KnowledgeGraph {
        KnowledgeGraph::parse(
            "e1\tr1\tm\nm\tr2\tx\ne2\tr2\tx\ne3\tr3\tx\nu\tlikes\tx\nodd name\tr1\tm\n",
            "x\n",
            "u\n",
            "likes",
        )
        .unwrap()
    }

    #[test]
    fn parses_pi_example() {
        let kg = kg();
        let q = parse_query("(and (p r2 (p r1 (e e1))) (p r2 (e e2)))", &kg).unwrap();
        assert_eq!(classify_shape(&q), Some(QueryShape::PI));
        assert!(q.is_canonical());
    }

    #[test]
    fn bare_anchor_is_not_a_requirement() {
        assert_eq!(parse_query("(e e1)", &kg()), Err(QueryError::BareAnchor));
        assert!(parse_node("(e e1)", &kg()).is_ok());
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        let kg = kg();
        match parse_query("(p r1 (e e1)", &kg) {
            Err(QueryError::Syntax { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
        match parse_query("(p r1 (x e1))", &kg) {
            Err(QueryError::Syntax { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
        match parse_query("(p r1 (e e1)) junk", &kg) {
            Err(QueryError::Syntax { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_query("(and (p r1 (e e1)))", &kg), Err(QueryError::Arity { found: 1, .. })));
        assert!(matches!(parse_query("(or)", &kg), Err(QueryError::Arity { found: 0, .. })));
        assert!(matches!(
            parse_query("(p r1 (e nobody))", &kg),
            Err(QueryError::UnknownEntity { offset: 9, .. })
        ));
        assert!(matches!(parse_query("(p zz (e e1))", &kg), Err(QueryError::UnknownRelation { .. })));
    }

    #[test]
    fn whitespace_insensitive() {
        let kg = kg();
        let a = parse_query("(and(p r1(e e1))(p r2 (e e2)))", &kg).unwrap();
        let b = parse_query("  ( and\n\t(p r1 (e e1))   (p r2 (e e2)) )\n", &kg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn serialize_is_order_independent() {
        let kg = kg();
        let a = parse_query("(and (p r1 (e e1)) (p r2 (e e2)))", &kg).unwrap();
        let b = parse_query("(and (p r2 (e e2)) (p r1 (e e1)))", &kg).unwrap();
        assert_eq!(serialize_query(&a, &kg), serialize_query(&b, &kg));
        let one = parse_query("(p r1 (e e1))", &kg).unwrap();
        assert_eq!(serialize_query(&one, &kg), "(p r1 (e e1))");
    }

    #[test]
    fn quoted_names_round_trip() {
        let kg = kg();
        let q = parse_query("(p r1 (e \"odd name\"))", &kg).unwrap();
        let text = serialize_query(&q, &kg);
        assert_eq!(text, "(p r1 (e \"odd name\"))");
        assert_eq!(parse_query(&text, &kg).unwrap(), q);
    }

    #[test]
    fn classify_templates() {
        let (a, b, c) = (QueryNode::anchor(0), QueryNode::anchor(1), QueryNode::anchor(2));
        let p = |r, n| QueryNode::project(r, n);
        assert_eq!(classify_shape(&p(0, a.clone())), Some(QueryShape::OneP));
        assert_eq!(classify_shape(&p(0, p(1, a.clone()))), Some(QueryShape::TwoP));
        assert_eq!(classify_shape(&p(0, p(1, p(2, a.clone())))), Some(QueryShape::ThreeP));
        let i3 = QueryNode::and(vec![p(0, a.clone()), p(1, b.clone()), p(2, c.clone())]).unwrap();
        assert_eq!(classify_shape(&i3), Some(QueryShape::ThreeI));
        let i2 = QueryNode::and(vec![p(0, a.clone()), p(1, b.clone())]).unwrap();
        assert_eq!(classify_shape(&i2), Some(QueryShape::TwoI));
        assert_eq!(classify_shape(&p(3, i2)), Some(QueryShape::IP));
        let u2 = QueryNode::or(vec![p(0, a.clone()), p(1, b.clone())]).unwrap();
        assert_eq!(classify_shape(&u2), Some(QueryShape::TwoU));
        assert_eq!(classify_shape(&p(2, u2)), Some(QueryShape::UP));
        let pi = QueryNode::and(vec![p(0, b.clone()), p(1, p(0, a.clone()))]).unwrap();
        assert_eq!(classify_shape(&pi), Some(QueryShape::PI));
        // outside the taxonomy
        assert_eq!(classify_shape(&a), None);
        assert_eq!(classify_shape(&p(0, p(1, p(2, p(3, a.clone()))))), None);
        let odd = QueryNode::and(vec![p(0, p(1, a.clone())), p(1, p(0, b))]).unwrap();
        assert_eq!(classify_shape(&odd), None);
    }

    #[test]
    fn shape_names_round_trip() {
        for s in QueryShape::ALL {
            assert_eq!(s.name().parse::<QueryShape>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert_eq!(QueryShape::ALL.iter().filter(|s| s.is_zero_shot()).count(), 4);
    }
}
