//! Hierarchical class tree: levels 0 (root) through L (leaves), per-node
//! semantic vectors, and path queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, cosine};

/// Index of a node inside its tree. Ids are assigned in depth-first order
/// with children sorted by name, so a given set of rows always produces the
/// same numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub name: String,
    pub level: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct TaxonomyTree {
    nodes: Vec<TreeNode>,
    depth: usize, // L: level of the leaves
    leaves_by_name: BTreeMap<String, NodeId>,
}

const ROOT_NAME: &str = "<root>";

impl TaxonomyTree {
    /// Builds the tree from `(leaf name, ancestor names root-ward→leaf-ward)`
    /// rows. All rows must have the same number of ancestors; leaf names are
    /// globally unique; non-leaf nodes are identified by their full path so
    /// the same name may appear under different parents.
    pub fn build(rows: &[(String, Vec<String>)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("taxonomy rows".into()));
        }
        let depth = rows[0].1.len() + 1;
        for (leaf, ancestors) in rows {
            if ancestors.len() + 1 != depth {
                return Err(Error::RaggedDepth(format!(
                    "leaf '{leaf}' has {} ancestors, expected {}",
                    ancestors.len(),
                    depth - 1
                )));
            }
        }

        // Nodes keyed by full path; index assignment happens after sorting.
        let mut paths: Vec<Vec<String>> = vec![vec![ROOT_NAME.to_string()]];
        let mut seen_paths: std::collections::BTreeSet<Vec<String>> =
            std::collections::BTreeSet::new();
        seen_paths.insert(paths[0].clone());
        let mut leaf_names = std::collections::BTreeSet::new();
        for (leaf, ancestors) in rows {
            if !leaf_names.insert(leaf.clone()) {
                return Err(Error::DuplicateLeaf(leaf.clone()));
            }
            let mut path = vec![ROOT_NAME.to_string()];
            for a in ancestors {
                path.push(a.clone());
                if seen_paths.insert(path.clone()) {
                    paths.push(path.clone());
                }
            }
            path.push(leaf.clone());
            if !seen_paths.insert(path.clone()) {
                return Err(Error::DuplicateLeaf(leaf.clone()));
            }
            paths.push(path);
        }

        // Sorting full paths lexicographically yields a preorder walk with
        // children alphabetical under each parent.
        paths.sort();
        let index_of: BTreeMap<Vec<String>, usize> = paths
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();

        let mut nodes: Vec<TreeNode> = paths
            .iter()
            .map(|p| TreeNode {
                name: p.last().unwrap().clone(),
                level: p.len() - 1,
                parent: if p.len() == 1 {
                    None
                } else {
                    Some(NodeId(index_of[&p[..p.len() - 1].to_vec()]))
                },
                children: Vec::new(),
            })
            .collect();
        for i in 0..nodes.len() {
            if let Some(parent) = nodes[i].parent {
                nodes[parent.0].children.push(NodeId(i));
            }
        }

        let mut leaves_by_name = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.level == depth {
                leaves_by_name.insert(node.name.clone(), NodeId(i));
            }
        }
        // Every declared leaf sits at level L; interior rows cannot collide
        // with leaves because a collision would need a path that is both
        // terminal and extended, which DuplicateLeaf above rejects.
        if leaves_by_name.len() != rows.len() {
            return Err(Error::DuplicateLeaf(
                "an ancestor path collides with a leaf path".into(),
            ));
        }

        Ok(Self {
            nodes,
            depth,
            leaves_by_name,
        })
    }

    /// L: the level index of the leaves (root is level 0).
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn leaf(&self, name: &str) -> Result<NodeId> {
        self.leaves_by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))
    }

    /// Leaf names in deterministic (lexicographic) order.
    pub fn leaf_names(&self) -> Vec<&str> {
        self.leaves_by_name.keys().map(|s| s.as_str()).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves_by_name.len()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.node(id).level == self.depth
    }

    /// Ordered node list root→leaf; length L+1.
    pub fn path(&self, leaf_name: &str) -> Result<Vec<NodeId>> {
        let leaf = self.leaf(leaf_name)?;
        let mut chain = Vec::with_capacity(self.depth + 1);
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            chain.push(id);
            cur = self.node(id).parent;
        }
        chain.reverse();
        Ok(chain)
    }

    /// Node ids at one level, in id order.
    pub fn nodes_at_level(&self, level: usize) -> Vec<NodeId> {
        self.node_ids()
            .filter(|id| self.node(*id).level == level)
            .collect()
    }

    /// Number of nodes per level 0..=L.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.depth + 1];
        for n in &self.nodes {
            counts[n.level] += 1;
        }
        counts
    }

    /// All leaf descendants of a node (the node itself if it is a leaf).
    pub fn leaf_descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            if self.is_leaf(cur) {
                out.push(cur);
            } else {
                stack.extend(self.node(cur).children.iter().rev());
            }
        }
        out
    }

    /// JSON document with stable field names, for golden-file checks.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<TreeNodeJson> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TreeNodeJson {
                id: i,
                level: n.level,
                parent: n.parent.map(|p| p.0),
                name: n.name.clone(),
            })
            .collect();
        serde_json::json!({
            "levels": self.depth + 1,
            "nodes": nodes,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeNodeJson {
    id: usize,
    level: usize,
    parent: Option<usize>,
    name: String,
}

/// Per-node semantic vectors; non-leaf vectors aggregate leaf descendants.
#[derive(Debug, Clone)]
pub struct NodeSemantics {
    vectors: Vec<Vec<f64>>, // indexed by NodeId
    dim: usize,
}

impl NodeSemantics {
    pub fn vector(&self, id: NodeId) -> &[f64] {
        &self.vectors[id.0]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Mean of leaf-descendant vectors then L2 normalization; leaves are the
/// normalized inputs.
pub fn aggregate_semantics(
    tree: &TaxonomyTree,
    leaf_vectors: &BTreeMap<String, Vec<f64>>,
) -> Result<NodeSemantics> {
    let dim = leaf_vectors
        .values()
        .next()
        .ok_or_else(|| Error::EmptyInput("leaf vectors".into()))?
        .len();
    for name in tree.leaf_names() {
        let v = leaf_vectors
            .get(name)
            .ok_or_else(|| Error::MissingLeafVector(name.to_string()))?;
        if v.len() != dim {
            return Err(Error::DimMismatch(format!(
                "leaf vector '{name}' has dim {}, expected {dim}",
                v.len()
            )));
        }
    }

    let mut vectors = vec![Vec::new(); tree.len()];
    for id in tree.node_ids() {
        let mut acc = vec![0.0; dim];
        let leaves = tree.leaf_descendants(id);
        for leaf in &leaves {
            let v = &leaf_vectors[&tree.node(*leaf).name];
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        let n = leaves.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        numerics::normalize(&mut acc)
            .map_err(|_| Error::ZeroNorm(format!("aggregate at node {}", tree.node(id).name)))?;
        vectors[id.0] = acc;
    }
    Ok(NodeSemantics { vectors, dim })
}

/// exp(−cosine(W_a, W_b)): semantically close nodes get small weight.
pub fn node_similarity(sem: &NodeSemantics, a: NodeId, b: NodeId) -> Result<f64> {
    Ok((-cosine(sem.vector(a), sem.vector(b))?).exp())
}

/// Precomputed node-pair similarity table; vectors are frozen after
/// alignment so one table serves the whole training run.
#[derive(Debug, Clone)]
pub struct NodeSimilarityTable {
    values: Vec<f64>,
    n: usize,
}

impl NodeSimilarityTable {
    /// All-ones table: every negative weighted equally, i.e. the
    /// semantics-unaware ablation of the contrastive loss.
    pub fn uniform(n_nodes: usize) -> Self {
        Self {
            values: vec![1.0; n_nodes * n_nodes],
            n: n_nodes,
        }
    }

    pub fn build(tree: &TaxonomyTree, sem: &NodeSemantics) -> Result<Self> {
        let n = tree.len();
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let s = node_similarity(sem, NodeId(a), NodeId(b))?;
                values[a * n + b] = s;
                values[b * n + a] = s;
            }
        }
        Ok(Self { values, n })
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> f64 {
        self.values[a.0 * self.n + b.0]
    }
}
