//! Sorted, de-duplicated id sets.

use serde::{Deserialize, Serialize};

use crate::kg::EntityId;

/// A set of entity ids kept as a sorted vector.
///
/// Iteration order is ascending id, which keeps every downstream consumer
/// (file writers, samplers, rankers) deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdSet(Vec<EntityId>);

impl IdSet {
    pub const fn new() -> Self {
        Self(Vec::new())
    }

    pub fn singleton(id: EntityId) -> Self {
        Self(vec![id])
    }

    /// Builds a set from arbitrary ids, sorting and removing duplicates.
    pub fn from_unsorted(mut ids: Vec<EntityId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[EntityId] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<EntityId> {
        self.0
    }

    pub fn intersection(&self, other: &IdSet) -> IdSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len().min(b.len()));
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        IdSet(out)
    }

    pub fn union(&self, other: &IdSet) -> IdSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        IdSet(out)
    }

    /// `self \ other`
    pub fn difference(&self, other: &IdSet) -> IdSet {
        IdSet(self.0.iter().copied().filter(|&x| !other.contains(x)).collect())
    }

    pub fn is_subset(&self, other: &IdSet) -> bool {
        self.0.iter().all(|&x| other.contains(x))
    }

    pub fn is_disjoint(&self, other: &IdSet) -> bool {
        self.intersection(other).is_empty()
    }
}

impl FromIterator<EntityId> for IdSet {
    fn from_iter<I: IntoIterator<Item = EntityId>>(iter: I) -> Self {
        IdSet::from_unsorted(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a IdSet {
    type Item = EntityId;
    type IntoIter = std::iter::Copied<std::slice::Iter<'a, EntityId>>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn set_algebra_matches_btreeset(a in proptest::collection::vec(0u32..40, 0..30),
                                        b in proptest::collection::vec(0u32..40, 0..30)) {
            use std::collections::BTreeSet;
            let (sa, sb): (BTreeSet<u32>, BTreeSet<u32>) =
                (a.iter().copied().collect(), b.iter().copied().collect());
            let (ia, ib) = (IdSet::from_unsorted(a), IdSet::from_unsorted(b));
            prop_assert_eq!(ia.intersection(&ib).into_vec(), sa.intersection(&sb).copied().collect::<Vec<_>>());
            prop_assert_eq!(ia.union(&ib).into_vec(), sa.union(&sb).copied().collect::<Vec<_>>());
            prop_assert_eq!(ia.difference(&ib).into_vec(), sa.difference(&sb).copied().collect::<Vec<_>>());
        }
    }
}
