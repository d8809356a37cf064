//! Hierarchical classification head: one linear classifier per non-leaf
//! node over that node's children, a class-agnostic box regressor at the
//! root, and path-decoding inference.

use std::collections::BTreeMap;

use crate::data_model::BBox;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Rng, Tape, Var};
use crate::taxonomy::{NodeId, TaxonomyTree};

/// Per-node classifiers (children×dim weight + bias) and the root box
/// regressor (4×dim).
#[derive(Debug, Clone)]
pub struct HierHead {
    pub feature_dim: usize,
    classifiers: BTreeMap<NodeId, (Matrix, Matrix)>,
    pub regressor: (Matrix, Matrix),
}

/// Tape handles for the head's parameters.
#[derive(Debug, Clone)]
pub struct HierHeadVars {
    pub classifiers: BTreeMap<NodeId, (Var, Var)>,
    pub regressor: (Var, Var),
}

impl HierHead {
    pub fn new(tree: &TaxonomyTree, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut classifiers = BTreeMap::new();
        for id in tree.node_ids() {
            let children = &tree.node(id).children;
            if children.is_empty() {
                continue;
            }
            let k = children.len();
            let w = Matrix::new(k, feature_dim, rng.uniform_vec(k * feature_dim, -0.1, 0.1))?;
            let b = Matrix::new(k, 1, rng.uniform_vec(k, -0.1, 0.1))?;
            classifiers.insert(id, (w, b));
        }
        let rw = Matrix::new(4, feature_dim, rng.uniform_vec(4 * feature_dim, -0.1, 0.1))?;
        let rb = Matrix::new(4, 1, rng.uniform_vec(4, -0.1, 0.1))?;
        Ok(Self {
            feature_dim,
            classifiers,
            regressor: (rw, rb),
        })
    }

    pub fn classifier(&self, id: NodeId) -> Option<&(Matrix, Matrix)> {
        self.classifiers.get(&id)
    }

    pub fn classifier_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.classifiers.keys().copied()
    }

    pub fn classifiers_mut(&mut self) -> impl Iterator<Item = (&NodeId, &mut (Matrix, Matrix))> {
        self.classifiers.iter_mut()
    }

    /// All parameters in deterministic order: classifiers by node id, then
    /// the regressor.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for (w, b) in self.classifiers.values_mut() {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.regressor.0);
        out.push(&mut self.regressor.1);
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        for (w, b) in self.classifiers.values() {
            out.push(w);
            out.push(b);
        }
        out.push(&self.regressor.0);
        out.push(&self.regressor.1);
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HierHeadVars {
        let mut reg = |m: &Matrix, tape: &mut Tape| {
            if trainable {
                tape.input(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        HierHeadVars {
            classifiers: self
                .classifiers
                .iter()
                .map(|(id, (w, b))| (*id, (reg(w, tape), reg(b, tape))))
                .collect(),
            regressor: (reg(&self.regressor.0, tape), reg(&self.regressor.1, tape)),
        }
    }

    pub fn grads(&self, tape: &Tape, vars: &HierHeadVars) -> Vec<Matrix> {
        let mut out = Vec::new();
        for (id, _) in self.classifiers.iter() {
            let (w, b) = &vars.classifiers[id];
            out.push(tape.grad(*w));
            out.push(tape.grad(*b));
        }
        out.push(tape.grad(vars.regressor.0));
        out.push(tape.grad(vars.regressor.1));
        out
    }

    fn logits(&self, id: NodeId, x: &[f64]) -> Result<Vec<f64>> {
        let (w, b) = self
            .classifiers
            .get(&id)
            .ok_or_else(|| Error::Config(format!("node {} has no classifier", id.0)))?;
        if x.len() != self.feature_dim {
            return Err(Error::DimMismatch(format!(
                "feature dim {} vs head dim {}",
                x.len(),
                self.feature_dim
            )));
        }
        let xv = Matrix::column(x.to_vec())?;
        Ok(w.matmul(&xv)?.add(b)?.data().to_vec())
    }

    /// Predicted box deltas (dx, dy, dw, dh) from the root regressor.
    pub fn regress(&self, x: &[f64]) -> Result<[f64; 4]> {
        if x.len() != self.feature_dim {
            return Err(Error::DimMismatch(format!(
                "feature dim {} vs head dim {}",
                x.len(),
                self.feature_dim
            )));
        }
        let xv = Matrix::column(x.to_vec())?;
        let out = self.regressor.0.matmul(&xv)?.add(&self.regressor.1)?;
        Ok([out.get(0, 0), out.get(1, 0), out.get(2, 0), out.get(3, 0)])
    }
}

/// One decoding step: chosen child and its conditional probability.
#[derive(Debug, Clone)]
pub struct PathStep {
    pub node: NodeId,
    pub conditional: f64,
}

/// Greedy root→leaf decode plus the full leaf posterior distribution.
#[derive(Debug, Clone)]
pub struct PathPrediction {
    /// Chosen child per level, root-ward first.
    pub steps: Vec<PathStep>,
    pub leaf: String,
    /// Product of the greedy path conditionals.
    pub score: f64,
    /// Posterior over every leaf, in `tree.leaf_names()` order.
    pub leaf_posteriors: Vec<(String, f64)>,
}

/// Softmax at every non-leaf node; leaf posterior is the product of path
/// conditionals; greedy decoding takes the argmax child per level.
pub fn head_forward(head: &HierHead, tree: &TaxonomyTree, x: &[f64]) -> Result<PathPrediction> {
    // conditional probability of each node given its parent
    let mut conditional = vec![1.0; tree.len()];
    for id in tree.node_ids() {
        if tree.node(id).children.is_empty() {
            continue;
        }
        let logits = head.logits(id, x)?;
        let probs = numerics::softmax_rows(&Matrix::row(logits)?);
        for (child, p) in tree.node(id).children.iter().zip(probs.data()) {
            conditional[child.0] = *p;
        }
    }

    let mut leaf_posteriors = Vec::with_capacity(tree.leaf_count());
    for name in tree.leaf_names() {
        let mut p = 1.0;
        for id in tree.path(name)? {
            p *= conditional[id.0];
        }
        leaf_posteriors.push((name.to_string(), p));
    }

    let mut steps = Vec::with_capacity(tree.depth());
    let mut cur = tree.root();
    let mut score = 1.0;
    while !tree.node(cur).children.is_empty() {
        let (best, best_p) = tree
            .node(cur)
            .children
            .iter()
            .map(|c| (*c, conditional[c.0]))
            .fold((NodeId(usize::MAX), f64::NEG_INFINITY), |acc, item| {
                if item.1 > acc.1 {
                    item
                } else {
                    acc
                }
            });
        steps.push(PathStep {
            node: best,
            conditional: best_p,
        });
        score *= best_p;
        cur = best;
    }

    Ok(PathPrediction {
        steps,
        leaf: tree.node(cur).name.clone(),
        score,
        leaf_posteriors,
    })
}

/// Sum over the ground-truth path of per-node cross-entropy against the
/// correct child, on the tape.
pub fn hier_ce_loss_tape(
    tape: &mut Tape,
    head_vars: &HierHeadVars,
    tree: &TaxonomyTree,
    x: Var,
    leaf: &str,
) -> Result<Var> {
    let path = tree.path(leaf)?;
    let mut terms = Vec::with_capacity(path.len() - 1);
    for pair in path.windows(2) {
        let (parent, child) = (pair[0], pair[1]);
        let (w, b) = head_vars
            .classifiers
            .get(&parent)
            .ok_or_else(|| Error::Config(format!("node {} has no classifier", parent.0)))?;
        let wx = tape.matmul(*w, x)?;
        let logits = tape.add(wx, *b)?;
        let child_pos = tree
            .node(parent)
            .children
            .iter()
            .position(|c| *c == child)
            .expect("path entries are parent/child");
        let lse = tape.logsumexp(logits);
        let correct = tape.entry(logits, child_pos, 0)?;
        terms.push(tape.sub(lse, correct)?);
    }
    let packed = tape.concat_scalars(&terms)?;
    Ok(tape.sum(packed))
}

/// Plain loss value.
pub fn hier_ce_loss(head: &HierHead, tree: &TaxonomyTree, x: &[f64], leaf: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = head.register(&mut tape, false);
    let xv = tape.constant(Matrix::column(x.to_vec())?);
    let loss = hier_ce_loss_tape(&mut tape, &vars, tree, xv, leaf)?;
    Ok(tape.value(loss).scalar_value())
}

/// Flat cross-entropy over leaf posteriors, exposed for comparison with the
/// per-node scheme.
pub fn flat_ce_loss(head: &HierHead, tree: &TaxonomyTree, x: &[f64], leaf: &str) -> Result<f64> {
    let pred = head_forward(head, tree, x)?;
    let p = pred
        .leaf_posteriors
        .iter()
        .find(|(name, _)| name == leaf)
        .ok_or_else(|| Error::UnknownLeaf(leaf.to_string()))?
        .1;
    Ok(-p.max(1e-300).ln())
}

/// Scalar loss components entering the total training objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub rpn: f64,
    pub reg: f64,
    pub avss: f64,
    pub d: f64,
    pub g: f64,
    pub hicl: f64,
}

/// λ weights over the avss, adversarial and hierarchical-contrastive terms.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_avss: f64,
    pub lambda_gan: f64,
    pub lambda_hicl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_avss: 0.1,
            lambda_gan: 0.5,
            lambda_hicl: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_avss", self.lambda_avss),
            ("lambda_gan", self.lambda_gan),
            ("lambda_hicl", self.lambda_hicl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// L = L_RPN + L_Reg + λ1·L_avss + λ2·(L_D + L_G) + λ3·L_hicl.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let parts = [c.rpn, c.reg, c.avss, c.d, c.g, c.hicl];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss components {parts:?}")));
    }
    Ok(c.rpn
        + c.reg
        + w.lambda_avss * c.avss
        + w.lambda_gan * (c.d + c.g)
        + w.lambda_hicl * c.hicl)
}

/// Tape version over scalar component nodes, same weighting.
pub fn total_loss_tape(
    tape: &mut Tape,
    rpn: Var,
    reg: Var,
    avss: Var,
    d: Var,
    g: Var,
    hicl: Var,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let avss_w = tape.scale(avss, w.lambda_avss);
    let gan_sum = tape.add(d, g)?;
    let gan_w = tape.scale(gan_sum, w.lambda_gan);
    let hicl_w = tape.scale(hicl, w.lambda_hicl);
    let mut acc = tape.add(rpn, reg)?;
    acc = tape.add(acc, avss_w)?;
    acc = tape.add(acc, gan_w)?;
    tape.add(acc, hicl_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn two_leaf_tree() -> TaxonomyTree {
        TaxonomyTree::build(&[
            ("a".into(), vec![]),
            ("b".into(), vec![]),
        ])
        .unwrap()
    }

    fn balanced_binary() -> TaxonomyTree {
        TaxonomyTree::build(&[
            ("l00".into(), vec!["g0".into()]),
            ("l01".into(), vec!["g0".into()]),
            ("l10".into(), vec!["g1".into()]),
            ("l11".into(), vec!["g1".into()]),
        ])
        .unwrap()
    }

    fn zeroed_head(tree: &TaxonomyTree, dim: usize) -> HierHead {
        let mut head = HierHead::new(tree, dim, 1).unwrap();
        for p in head.params_mut() {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        head
    }

    #[test]
    fn uniform_logits_give_uniform_posteriors() {
        let tree = two_leaf_tree();
        let head = zeroed_head(&tree, 3);
        let pred = head_forward(&head, &tree, &[0.1, 0.2, 0.3]).unwrap();
        for (_, p) in &pred.leaf_posteriors {
            assert!((p - 0.5).abs() < 1e-12);
        }

        let tree4 = balanced_binary();
        let head4 = zeroed_head(&tree4, 3);
        let pred4 = head_forward(&head4, &tree4, &[0.1, 0.2, 0.3]).unwrap();
        for (_, p) in &pred4.leaf_posteriors {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn posteriors_form_a_distribution_for_any_parameters() {
        let mut rng = Rng::new(31);
        for trial in 0..20 {
            let tree = balanced_binary();
            let head = HierHead::new(&tree, 4, trial).unwrap();
            let x = rng.uniform_vec(4, -3.0, 3.0);
            let pred = head_forward(&head, &tree, &x).unwrap();
            let total: f64 = pred.leaf_posteriors.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-8, "sum {total}");
            assert!(pred.leaf_posteriors.iter().all(|(_, p)| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn posteriors_match_flat_enumeration_oracle() {
        let mut rng = Rng::new(32);
        let tree = balanced_binary();
        let head = HierHead::new(&tree, 4, 99).unwrap();
        let x = rng.uniform_vec(4, -1.0, 1.0);
        let pred = head_forward(&head, &tree, &x).unwrap();

        // Oracle: multiply conditionals along each path explicitly.
        let softmax = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        for (name, got) in &pred.leaf_posteriors {
            let path = tree.path(name).unwrap();
            let mut want = 1.0;
            for pair in path.windows(2) {
                let (w, b) = head.classifier(pair[0]).unwrap();
                let mut logits = Vec::new();
                for r in 0..w.rows() {
                    let mut acc = b.get(r, 0);
                    for c in 0..w.cols() {
                        acc += w.get(r, c) * x[c];
                    }
                    logits.push(acc);
                }
                let probs = softmax(&logits);
                let pos = tree
                    .node(pair[0])
                    .children
                    .iter()
                    .position(|c| *c == pair[1])
                    .unwrap();
                want *= probs[pos];
            }
            assert!((got - want).abs() < 1e-12, "{name}: got {got} want {want}");
        }
    }

    #[test]
    fn greedy_decode_matches_posterior_argmax_and_disagreements_counted() {
        let mut rng = Rng::new(33);
        let tree = balanced_binary();
        let mut disagreements = 0;
        for trial in 0..50 {
            let head = HierHead::new(&tree, 4, 1000 + trial).unwrap();
            let x = rng.uniform_vec(4, -2.0, 2.0);
            let pred = head_forward(&head, &tree, &x).unwrap();
            let argmax = pred
                .leaf_posteriors
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            if pred.leaf != *argmax.0 {
                disagreements += 1;
            }
        }
        // On a depth-2 balanced tree greedy and global argmax rarely differ;
        // report rather than hide any splits.
        eprintln!("greedy vs posterior-argmax disagreements: {disagreements}/50");
        assert!(disagreements <= 5, "unexpectedly many: {disagreements}");
    }

    #[test]
    fn perfect_logits_drive_ce_to_zero_and_uniform_to_log2_sum() {
        let tree = balanced_binary();
        let head = zeroed_head(&tree, 2);
        // uniform logits on a binary 2-level tree: loss = 2·log 2
        let loss = hier_ce_loss(&head, &tree, &[0.5, -0.5], "l01").unwrap();
        assert!((loss - 2.0 * (2.0_f64).ln()).abs() < 1e-12);

        // saturated correct logits: loss → 0
        let mut strong = zeroed_head(&tree, 2);
        for (id, (w, b)) in strong.classifiers_mut() {
            let _ = id;
            *w = Matrix::zeros(w.rows(), w.cols());
            // favor child 0 at every node by a large margin
            let mut bb = Matrix::zeros(b.rows(), 1);
            bb.set(0, 0, 50.0);
            *b = bb;
        }
        let first_leaf = {
            let root = tree.root();
            let g0 = tree.node(root).children[0];
            let c = tree.node(g0).children[0];
            tree.node(c).name.clone()
        };
        let loss = hier_ce_loss(&strong, &tree, &[0.0, 0.0], &first_leaf).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn ce_gradient_checks_out() {
        let tree = balanced_binary();
        let head = HierHead::new(&tree, 4, 7).unwrap();
        let mut rng = Rng::new(34);
        let x = Matrix::column(rng.uniform_vec(4, -1.0, 1.0)).unwrap();

        // differentiate w.r.t. the feature and all classifier parameters
        let mut inputs = vec![x];
        for p in head.params() {
            inputs.push(p.clone());
        }
        let tree_c = tree.clone();
        let head_c = head.clone();
        let f = move |tape: &mut Tape, vars: &[Var]| {
            let x = vars[0];
            let mut it = vars[1..].iter().copied();
            let classifiers: BTreeMap<NodeId, (Var, Var)> = head_c
                .classifier_nodes()
                .map(|id| (id, (it.next().unwrap(), it.next().unwrap())))
                .collect();
            let vars = HierHeadVars {
                classifiers,
                regressor: (it.next().unwrap(), it.next().unwrap()),
            };
            hier_ce_loss_tape(tape, &vars, &tree_c, x, "l10")
        };
        let err = grad_check(f, &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn total_loss_weighting_and_linearity() {
        let w = LossWeights::default();
        let zero = LossComponents::default();
        assert_eq!(total_loss(&zero, &w).unwrap(), 0.0);

        let ones = LossComponents {
            rpn: 1.0,
            reg: 1.0,
            avss: 1.0,
            d: 1.0,
            g: 1.0,
            hicl: 1.0,
        };
        let v = total_loss(&ones, &w).unwrap();
        assert!((v - 3.11).abs() < 1e-12, "got {v}");

        // doubling λ3 doubles exactly the hicl contribution
        let mut w2 = w;
        w2.lambda_hicl *= 2.0;
        let v2 = total_loss(&ones, &w2).unwrap();
        assert!((v2 - v - w.lambda_hicl).abs() < 1e-12);

        let bad = LossComponents {
            rpn: f64::NAN,
            ..LossComponents::default()
        };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn total_loss_tape_matches_plain_and_gradient_is_lambda() {
        let w = LossWeights::default();
        let comps = [0.3, 0.7, 1.3, 0.2, -0.4, 2.0];
        let mats: Vec<Matrix> = comps.iter().map(|&v| Matrix::scalar(v)).collect();
        let w_c = w;
        let f = move |tape: &mut Tape, vars: &[Var]| {
            total_loss_tape(tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], &w_c)
        };
        let err = grad_check(f, &mats, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");

        let mut tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.input(m.clone())).collect();
        let loss = total_loss_tape(
            &mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], &w,
        )
        .unwrap();
        let want = total_loss(
            &LossComponents {
                rpn: comps[0],
                reg: comps[1],
                avss: comps[2],
                d: comps[3],
                g: comps[4],
                hicl: comps[5],
            },
            &w,
        )
        .unwrap();
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
        tape.backward(loss).unwrap();
        assert!((tape.grad(vars[2]).scalar_value() - w.lambda_avss).abs() < 1e-12);
        assert!((tape.grad(vars[5]).scalar_value() - w.lambda_hicl).abs() < 1e-12);
    }

    #[test]
    fn regressor_output_is_four_deltas() {
        let tree = two_leaf_tree();
        let head = HierHead::new(&tree, 3, 5).unwrap();
        let d = head.regress(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(d.len(), 4);
        assert!(head.regress(&[0.1]).is_err());
        let _ = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    }
}
