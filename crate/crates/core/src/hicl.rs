//! Multi-level semantics-aware hierarchical contrastive loss with
//! momentum prototype caches.
//!
//! Every tree node keeps a prototype vector. A feature with ground-truth
//! leaf c is pulled toward the prototypes on c's root→leaf path (one term
//! per level, weighted by the aggregation function φ) and contrasted
//! against all node prototypes, with each negative weighted by the
//! semantic similarity of its node to the positive node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Tape, Var};
use crate::taxonomy::{NodeId, NodeSemantics, NodeSimilarityTable, TaxonomyTree};

/// Per-level aggregation weight φ(l).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiKind {
    /// φ(l) = 1
    One,
    /// φ(l) = l
    #[default]
    Identity,
    /// φ(l) = l²
    Square,
}

impl PhiKind {
    pub fn weight(&self, level: usize) -> f64 {
        match self {
            PhiKind::One => 1.0,
            PhiKind::Identity => level as f64,
            PhiKind::Square => (level * level) as f64,
        }
    }
}

/// How the negative set of the contrastive denominator is enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeEnumeration {
    /// Each tree node appears exactly once.
    #[default]
    Unique,
    /// Nodes enumerated as (leaf, level) pairs; shared ancestors repeat
    /// once per descendant leaf.
    PerLeaf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiclConfig {
    pub tau: f64,
    pub phi: PhiKind,
    pub momentum: f64,
    #[serde(default)]
    pub negatives: NegativeEnumeration,
    /// Re-normalize prototypes to unit norm after each momentum update.
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for HiclConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            phi: PhiKind::default(),
            momentum: 0.99,
            negatives: NegativeEnumeration::default(),
            renormalize: true,
        }
    }
}

impl HiclConfig {
    pub fn validate(&self, tree: &TaxonomyTree) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        let total: f64 = (0..=tree.depth()).map(|l| self.phi.weight(l)).sum();
        if !(total > 0.0) {
            return Err(Error::Config(
                "phi must give positive total weight over levels".into(),
            ));
        }
        Ok(())
    }
}

/// One prototype per tree node, refreshed by momentum updates along
/// ground-truth paths.
#[derive(Debug, Clone)]
pub struct MomentumCacheBank {
    prototypes: Vec<Vec<f64>>, // indexed by NodeId
    dim: usize,
    momentum: f64,
    renormalize: bool,
    steps: u64,
}

impl MomentumCacheBank {
    pub fn prototype(&self, id: NodeId) -> &[f64] {
        &self.prototypes[id.0]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }
}

/// Initializes one unit-norm prototype per node from the aligned semantic
/// vectors, optionally projected into the feature dimension. With no
/// projector the dimensions must already match.
pub fn init_caches(
    tree: &TaxonomyTree,
    sem: &NodeSemantics,
    projector: Option<&Matrix>,
    config: &HiclConfig,
) -> Result<MomentumCacheBank> {
    config.validate(tree)?;
    let dim = match projector {
        Some(p) => {
            if p.cols() != sem.dim() {
                return Err(Error::DimMismatch(format!(
                    "projector expects {} columns for semantic dim {}",
                    p.cols(),
                    sem.dim()
                )));
            }
            p.rows()
        }
        None => sem.dim(),
    };
    let mut prototypes = Vec::with_capacity(tree.len());
    for id in tree.node_ids() {
        let w = sem.vector(id);
        let mut v = match projector {
            Some(p) => {
                let col = Matrix::column(w.to_vec())?;
                p.matmul(&col)?.data().to_vec()
            }
            None => w.to_vec(),
        };
        numerics::normalize(&mut v)
            .map_err(|_| Error::ZeroNorm(format!("prototype init for node {}", tree.node(id).name)))?;
        prototypes.push(v);
    }
    Ok(MomentumCacheBank {
        prototypes,
        dim,
        momentum: config.momentum,
        renormalize: config.renormalize,
        steps: 0,
    })
}

/// The negative node list with, for repeats, one entry per occurrence.
fn negative_nodes(tree: &TaxonomyTree, mode: NegativeEnumeration) -> Vec<NodeId> {
    match mode {
        NegativeEnumeration::Unique => tree.node_ids().collect(),
        NegativeEnumeration::PerLeaf => {
            let mut out = Vec::new();
            for leaf in tree.leaf_names() {
                let path = tree.path(leaf).expect("leaf names come from the tree");
                out.extend(path);
            }
            out
        }
    }
}

/// Per-feature loss term on the tape; gradients flow to `x` only, the
/// prototypes enter as constants.
pub fn hicl_term_tape(
    tape: &mut Tape,
    x: Var,
    leaf: &str,
    bank: &MomentumCacheBank,
    tree: &TaxonomyTree,
    sim: &NodeSimilarityTable,
    config: &HiclConfig,
) -> Result<Var> {
    config.validate(tree)?;
    let path = tree
        .path(leaf)
        .map_err(|_| Error::UnknownClass(leaf.to_string()))?;
    if tape.value(x).shape() != (bank.dim(), 1) {
        return Err(Error::DimMismatch(format!(
            "feature must be {}x1, got {}x{}",
            bank.dim(),
            tape.value(x).rows(),
            tape.value(x).cols()
        )));
    }

    let negatives = negative_nodes(tree, config.negatives);
    // Logits x·M/τ for every negative occurrence, as scalar nodes.
    let mut logits = Vec::with_capacity(negatives.len());
    for node in &negatives {
        let proto = tape.constant(Matrix::column(bank.prototype(*node).to_vec())?);
        let d = tape.dot(x, proto)?;
        logits.push(tape.scale(d, 1.0 / config.tau));
    }
    let packed = tape.concat_scalars(&logits)?;

    let total_phi: f64 = (0..=tree.depth()).map(|l| config.phi.weight(l)).sum();
    let mut weighted_terms = Vec::with_capacity(path.len());
    for (level, pos_node) in path.iter().enumerate() {
        let phi = config.phi.weight(level);
        if phi == 0.0 {
            continue;
        }
        // log Σ_n s(pos, n)·exp(z_n − b) + b  ==  logsumexp(z + log s)
        let log_s: Vec<f64> = negatives
            .iter()
            .map(|n| sim.get(*pos_node, *n).ln())
            .collect();
        let shift = tape.constant(Matrix::row(log_s)?);
        let shifted = tape.add(packed, shift)?;
        let lse = tape.logsumexp(shifted);

        let proto = tape.constant(Matrix::column(bank.prototype(*pos_node).to_vec())?);
        let d = tape.dot(x, proto)?;
        let pos = tape.scale(d, 1.0 / config.tau);
        let f_l = tape.sub(pos, lse)?;
        weighted_terms.push(tape.scale(f_l, phi));
    }
    let packed_terms = tape.concat_scalars(&weighted_terms)?;
    let sum = tape.sum(packed_terms);
    Ok(tape.scale(sum, -1.0 / total_phi))
}

/// Plain per-feature loss value.
pub fn hicl_term(
    x: &[f64],
    leaf: &str,
    bank: &MomentumCacheBank,
    tree: &TaxonomyTree,
    sim: &NodeSimilarityTable,
    config: &HiclConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(Matrix::column(x.to_vec())?);
    let term = hicl_term_tape(&mut tape, xv, leaf, bank, tree, sim, config)?;
    Ok(tape.value(term).scalar_value())
}

/// Batch mean of per-feature terms, on the tape.
pub fn hicl_loss_tape(
    tape: &mut Tape,
    batch: &[(Var, &str)],
    bank: &MomentumCacheBank,
    tree: &TaxonomyTree,
    sim: &NodeSimilarityTable,
    config: &HiclConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("hicl batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (x, leaf) in batch {
        terms.push(hicl_term_tape(tape, *x, leaf, bank, tree, sim, config)?);
    }
    tape.mean_of(&terms)
}

/// Plain batch loss value.
pub fn hicl_loss(
    batch: &[(Vec<f64>, String)],
    bank: &MomentumCacheBank,
    tree: &TaxonomyTree,
    sim: &NodeSimilarityTable,
    config: &HiclConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<(Var, &str)> = batch
        .iter()
        .map(|(x, leaf)| {
            Ok((
                tape.constant(Matrix::column(x.clone())?),
                leaf.as_str(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = hicl_loss_tape(&mut tape, &vars, bank, tree, sim, config)?;
    Ok(tape.value(loss).scalar_value())
}

/// θ ← m·θ + (1−m)·x for every node on the ground-truth path; exactly L+1
/// prototypes are touched. Re-normalizes afterwards when configured.
pub fn momentum_update(
    bank: &mut MomentumCacheBank,
    x: &[f64],
    leaf: &str,
    tree: &TaxonomyTree,
) -> Result<()> {
    if x.len() != bank.dim {
        return Err(Error::DimMismatch(format!(
            "feature dim {} vs bank dim {}",
            x.len(),
            bank.dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("momentum update feature".into()));
    }
    let path = tree
        .path(leaf)
        .map_err(|_| Error::UnknownClass(leaf.to_string()))?;
    let m = bank.momentum;
    for node in path {
        let proto = &mut bank.prototypes[node.0];
        for (p, xv) in proto.iter_mut().zip(x.iter()) {
            *p = m * *p + (1.0 - m) * xv;
        }
        if bank.renormalize {
            numerics::normalize(proto)
                .map_err(|_| Error::ZeroNorm(format!("prototype at node {}", node.0)))?;
        }
    }
    bank.steps += 1;
    Ok(())
}
