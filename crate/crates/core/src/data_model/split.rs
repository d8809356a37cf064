//! Genus-centered seen/unseen class splitting.
//!
//! Every genus (level L−1 node) with two or more species contributes
//! exactly one unseen species; any remaining budget toward the target
//! fraction is drawn from singleton-genus species, so unseen classes always
//! come from distinct genera.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::taxonomy::TaxonomyTree;

/// Disjoint leaf-name sets covering the whole class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn is_seen(&self, leaf: &str) -> bool {
        self.seen.contains(leaf)
    }

    pub fn is_unseen(&self, leaf: &str) -> bool {
        self.unseen.contains(leaf)
    }

    /// Checks disjointness, cover, and the one-unseen-per-multi-species-genus
    /// floor against a tree.
    pub fn validate(&self, tree: &TaxonomyTree) -> Result<()> {
        if !self.seen.is_disjoint(&self.unseen) {
            return Err(Error::Validation(vec!["seen and unseen overlap".into()]));
        }
        let all: BTreeSet<String> = tree.leaf_names().iter().map(|s| s.to_string()).collect();
        let union: BTreeSet<String> = self.seen.union(&self.unseen).cloned().collect();
        if union != all {
            return Err(Error::Validation(vec![
                "split does not cover the class set exactly".into(),
            ]));
        }
        for genus in tree.nodes_at_level(tree.depth() - 1) {
            let children = &tree.node(genus).children;
            if children.len() >= 2 {
                let unseen_here = children
                    .iter()
                    .filter(|c| self.unseen.contains(&tree.node(**c).name))
                    .count();
                if unseen_here == 0 {
                    return Err(Error::Validation(vec![format!(
                        "multi-species genus '{}' has no unseen species",
                        tree.node(genus).name
                    )]));
                }
            }
        }
        Ok(())
    }
}

/// Seen/unseen split over the leaves of `tree`.
///
/// Deterministic for a given seed: leaves are ordered lexicographically and
/// then shuffled by the seeded generator before any choice is made.
pub fn genus_split(
    tree: &TaxonomyTree,
    target_unseen_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if tree.depth() < 2 {
        return Err(Error::Config(
            "genus_split needs a tree of depth >= 2".into(),
        ));
    }
    if !(target_unseen_fraction > 0.0 && target_unseen_fraction < 0.5) {
        return Err(Error::Config(format!(
            "unseen fraction must lie in (0, 0.5), got {target_unseen_fraction}"
        )));
    }

    let n_leaves = tree.leaf_count();
    let target = (target_unseen_fraction * n_leaves as f64).round() as usize;

    let genera = tree.nodes_at_level(tree.depth() - 1);
    let mut multi: Vec<Vec<String>> = Vec::new();
    let mut singleton_pool: Vec<String> = Vec::new();
    for g in genera {
        let mut names: Vec<String> = tree
            .node(g)
            .children
            .iter()
            .map(|c| tree.node(*c).name.clone())
            .collect();
        names.sort();
        if names.len() >= 2 {
            multi.push(names);
        } else {
            singleton_pool.extend(names);
        }
    }

    let floor = multi.len();
    if floor > target + singleton_pool.len() {
        return Err(Error::InfeasibleFraction(format!(
            "one unseen species per multi-species genus needs {floor} unseen classes, \
             but the target is {target} and only {} singleton genera exist",
            singleton_pool.len()
        )));
    }

    let mut rng = Rng::new(seed);
    let mut unseen: BTreeSet<String> = BTreeSet::new();
    for names in &mut multi {
        rng.shuffle(names);
        unseen.insert(names[0].clone());
    }

    // Singleton genera are the only discretionary pool once floors are set.
    singleton_pool.sort();
    rng.shuffle(&mut singleton_pool);
    let extra = target.saturating_sub(floor).min(singleton_pool.len());
    for name in singleton_pool.iter().take(extra) {
        unseen.insert(name.clone());
    }

    let seen: BTreeSet<String> = tree
        .leaf_names()
        .iter()
        .map(|s| s.to_string())
        .filter(|s| !unseen.contains(s))
        .collect();
    Ok(SplitAssignment { seen, unseen })
}
