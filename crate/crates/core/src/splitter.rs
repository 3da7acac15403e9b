//! Patient-grouped K-fold assignment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;

/// Fold id per sample; samples sharing a group always share a fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn new(k: usize, fold_of: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = fold_of.iter().find(|&&f| f >= k) {
            return Err(Error::Index { index: bad, limit: k });
        }
        Ok(Self { k, fold_of })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Groups by (size descending, id ascending), each to the currently smallest
/// fold by sample count, lowest index on ties.
pub fn group_kfold<G: AsRef<str>>(group_ids: &[G], k: usize) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in group_ids.iter().enumerate() {
        members.entry(g.as_ref()).or_default().push(i);
    }
    if members.len() < k {
        return Err(Error::InsufficientGroups { groups: members.len(), folds: k });
    }
    let mut groups: Vec<(&str, Vec<usize>)> = members.into_iter().collect();
    // stable sort keeps ascending ids within equal sizes
    groups.sort_by_key(|g| std::cmp::Reverse(g.1.len()));
    let mut sizes = vec![0usize; k];
    let mut fold_of = vec![0; group_ids.len()];
    for (_, idx) in &groups {
        let target = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 2");
        sizes[target] += idx.len();
        for &i in idx {
            fold_of[i] = target;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// (train, validation) sample indices for one fold, each ascending.
pub fn fold_iter(assignment: &FoldAssignment, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= assignment.k {
        return Err(Error::Index { index: fold, limit: assignment.k });
    }
    Ok((0..assignment.len()).partition(|&i| assignment.fold_of[i] != fold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons_fill_each_fold_once() {
        let a = group_kfold(&["a", "b", "c", "d"], 4).unwrap();
        assert_eq!(a.fold_sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn too_few_groups() {
        let ids = ["a", "a", "b", "c", "c"];
        assert!(matches!(group_kfold(&ids, 5), Err(Error::InsufficientGroups { groups: 3, folds: 5 })));
        assert!(group_kfold(&ids, 1).is_err());
    }

    #[test]
    fn traced_greedy_example() {
        let mut ids = vec!["A"; 5];
        ids.extend(["B"; 3]);
        ids.extend(["C"; 2]);
        ids.extend(["D"; 2]);
        let a = group_kfold(&ids, 2).unwrap();
        let folds: Vec<usize> = ["A", "B", "C", "D"]
            .iter()
            .map(|g| a.fold_of()[ids.iter().position(|x| x == g).unwrap()])
            .collect();
        assert_eq!(folds, vec![0, 1, 1, 0]);
        let (train, val) = fold_iter(&a, 0).unwrap();
        assert_eq!((train.len(), val.len()), (5, 7));
        assert!(fold_iter(&a, 2).is_err());
    }
}
