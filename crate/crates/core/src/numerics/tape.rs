//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Values are dense matrices (scalars are 1×1). Operations append nodes to
//! the tape; `backward` walks the tape once in reverse and accumulates
//! gradients. A tape that has run backward must be reset before reuse.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const ZERO_NORM_TOL: f64 = 1e-12;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf value; `trainable` decides whether gradients are tracked.
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    /// Elementwise min(0, x); the hinge building block.
    MinZero(usize),
    /// Elementwise smooth-L1: 0.5x² for |x|<1, |x|−0.5 otherwise.
    SmoothL1(usize),
    /// Sum of all entries → 1×1.
    Sum(usize),
    /// Row-wise mean over columns: r×c → r×1.
    MeanCols(usize),
    SoftmaxRows(usize),
    /// log Σ exp over all entries → 1×1, max-shifted.
    LogSumExp(usize),
    /// Column-wise cosine of two equal-shape matrices → 1×N. Zero-norm
    /// columns (rejected at construction unless lenient) carry value 0 and
    /// zero gradient; backward re-detects them from the stored values.
    CosineCols(usize, usize),
    /// out[r,c] = a[r,c] * s[r] with s a column vector.
    MulColBroadcast(usize, usize),
    /// out[r,c] = a[r,c] + s[r].
    AddColBroadcast(usize, usize),
    /// Multiply a matrix by a 1×1 node.
    MulScalar(usize, usize),
    /// Extract column j → r×1.
    Col(usize, usize),
    /// Extract entry (r, c) → 1×1.
    Entry(usize, usize, usize),
    /// Pack 1×1 nodes into a 1×k row.
    ConcatScalars(Vec<usize>),
    /// Stack vertically: (ra×c, rb×c) → (ra+rb)×c.
    ConcatRows(usize, usize),
    Reshape(usize),
    /// Bilinear ×2 upsample of a C×(H·W) map; taps precomputed per output pixel.
    Upsample2x {
        src: usize,
        taps: Vec<Vec<(usize, f64)>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all recorded nodes and re-arms backward.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Registers a differentiable input.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that gradients never flow into.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; zeros if the node was not reached.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.scale(-1.0);
        let ng = self.needs(a.0);
        self.push(v, Op::Neg(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.scale(k);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + k);
        let ng = self.needs(a.0);
        self.push(v, Op::AddConst(a.0), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(v, Op::MatMul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.transpose();
        let ng = self.needs(a.0);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        let ng = self.needs(a.0);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn min_zero(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.min(0.0));
        let ng = self.needs(a.0);
        self.push(v, Op::MinZero(a.0), ng)
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        });
        let ng = self.needs(a.0);
        self.push(v, Op::SmoothL1(a.0), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.nodes[a.0].value.data().iter().sum());
        let ng = self.needs(a.0);
        self.push(v, Op::Sum(a.0), ng)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = m.shape();
        let mut out = Matrix::zeros(r, 1);
        for i in 0..r {
            out.set(i, 0, m.row_slice(i).iter().sum::<f64>() / c as f64);
        }
        let ng = self.needs(a.0);
        self.push(out, Op::MeanCols(a.0), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(&self.nodes[a.0].value);
        let ng = self.needs(a.0);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(logsumexp_slice(self.nodes[a.0].value.data()));
        let ng = self.needs(a.0);
        self.push(v, Op::LogSumExp(a.0), ng)
    }

    /// Cosine of corresponding columns of `a` and `b` → 1×N.
    ///
    /// With `lenient` a zero-norm column yields 0 with zero gradient;
    /// otherwise it is a `ZeroNorm` error.
    pub fn cosine_cols(&mut self, a: Var, b: Var, lenient: bool) -> Result<Var> {
        self.binary_same_shape(a, b, "cosine_cols")?;
        let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = ma.cols();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let ca = ma.col(j);
            let cb = mb.col(j);
            let na = super::matrix::norm(&ca);
            let nb = super::matrix::norm(&cb);
            if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
                if lenient {
                    out[j] = 0.0;
                    continue;
                }
                return Err(Error::ZeroNorm(format!("cosine_cols column {j}")));
            }
            out[j] = super::matrix::dot(&ca, &cb) / (na * nb);
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Matrix::raw(1, n, out), Op::CosineCols(a.0, b.0), ng))
    }

    pub fn mul_col_broadcast(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rs, cs) = self.shape(s);
        if rs != ra || cs != 1 {
            return Err(Error::DimMismatch(format!(
                "mul_col_broadcast {ra}x{ca} with {rs}x{cs}"
            )));
        }
        let (ma, ms) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let mut out = Matrix::zeros(ra, ca);
        for r in 0..ra {
            let k = ms.get(r, 0);
            for c in 0..ca {
                out.set(r, c, ma.get(r, c) * k);
            }
        }
        let ng = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(out, Op::MulColBroadcast(a.0, s.0), ng))
    }

    pub fn add_col_broadcast(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rs, cs) = self.shape(s);
        if rs != ra || cs != 1 {
            return Err(Error::DimMismatch(format!(
                "add_col_broadcast {ra}x{ca} with {rs}x{cs}"
            )));
        }
        let (ma, ms) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let mut out = Matrix::zeros(ra, ca);
        for r in 0..ra {
            let k = ms.get(r, 0);
            for c in 0..ca {
                out.set(r, c, ma.get(r, c) + k);
            }
        }
        let ng = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(out, Op::AddColBroadcast(a.0, s.0), ng))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::DimMismatch("mul_scalar: rhs must be 1x1".into()));
        }
        let k = self.nodes[s.0].value.scalar_value();
        let v = self.nodes[a.0].value.scale(k);
        let ng = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(v, Op::MulScalar(a.0, s.0), ng))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if j >= c {
            return Err(Error::DimMismatch(format!("col {j} of {r}x{c}")));
        }
        let v = Matrix::raw(r, 1, self.nodes[a.0].value.col(j));
        let ng = self.needs(a.0);
        Ok(self.push(v, Op::Col(a.0, j), ng))
    }

    pub fn entry(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if r >= rows || c >= cols {
            return Err(Error::DimMismatch(format!(
                "entry ({r},{c}) of {rows}x{cols}"
            )));
        }
        let v = Matrix::scalar(self.nodes[a.0].value.get(r, c));
        let ng = self.needs(a.0);
        Ok(self.push(v, Op::Entry(a.0, r, c), ng))
    }

    pub fn concat_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_scalars".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        let mut ng = false;
        for p in parts {
            if self.shape(*p) != (1, 1) {
                return Err(Error::DimMismatch("concat_scalars: non-scalar part".into()));
            }
            data.push(self.nodes[p.0].value.scalar_value());
            ng |= self.needs(p.0);
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Matrix::raw(1, data.len(), data), Op::ConcatScalars(ids), ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(Error::DimMismatch(format!(
                "concat_rows: {ra}x{ca} over {rb}x{cb}"
            )));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Matrix::raw(ra + rb, ca, data), Op::ConcatRows(a.0, b.0), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if rows * cols != m.len() {
            return Err(Error::DimMismatch(format!(
                "reshape {}x{} to {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        let v = Matrix::raw(rows, cols, m.data().to_vec());
        let ng = self.needs(a.0);
        Ok(self.push(v, Op::Reshape(a.0), ng))
    }

    /// Bilinear ×2 upsample of a C×(H·W) feature matrix → C×(2H·2W).
    /// Constant maps are preserved exactly.
    pub fn upsample2x(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if m.cols() != h * w {
            return Err(Error::DimMismatch(format!(
                "upsample2x expects {}x{} columns, matrix has {}",
                h,
                w,
                m.cols()
            )));
        }
        let taps = bilinear2x_taps(h, w);
        let channels = m.rows();
        let mut out = Matrix::zeros(channels, 4 * h * w);
        for c in 0..channels {
            for (p_out, tl) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(p_in, wgt) in tl {
                    acc += wgt * m.get(c, p_in);
                }
                out.set(c, p_out, acc);
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(out, Op::Upsample2x { src: a.0, taps }, ng))
    }

    // -- composite conveniences ------------------------------------------

    /// xᵀy for column vectors → 1×1.
    pub fn dot(&mut self, x: Var, y: Var) -> Result<Var> {
        let xt = self.transpose(x);
        self.matmul(xt, y)
    }

    /// Mean of a set of scalar nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let packed = self.concat_scalars(parts)?;
        let s = self.sum(packed);
        Ok(self.scale(s, 1.0 / parts.len() as f64))
    }

    // -- backward ---------------------------------------------------------

    /// Runs reverse accumulation from a scalar root. Each node is visited
    /// once; running twice without `reset` is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::TapeReused);
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::DimMismatch(
                "backward root must be a 1x1 scalar".into(),
            ));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let deposit = |grads: &mut [Option<Matrix>], nodes: &[Node], pid: usize, m: Matrix| {
            if !nodes[pid].needs_grad {
                return;
            }
            match &mut grads[pid] {
                Some(acc) => acc.accumulate(&m),
                slot @ None => *slot = Some(m),
            }
        };
        let val = |pid: usize| &self.nodes[pid].value;

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                deposit(grads, &self.nodes, *a, g.clone());
                deposit(grads, &self.nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                deposit(grads, &self.nodes, *a, g.clone());
                deposit(grads, &self.nodes, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                deposit(grads, &self.nodes, *a, g.hadamard(val(*b)).unwrap());
                deposit(grads, &self.nodes, *b, g.hadamard(val(*a)).unwrap());
            }
            Op::Neg(a) => deposit(grads, &self.nodes, *a, g.scale(-1.0)),
            Op::Scale(a, k) => deposit(grads, &self.nodes, *a, g.scale(*k)),
            Op::AddConst(a) => deposit(grads, &self.nodes, *a, g.clone()),
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()).unwrap();
                let db = val(*a).transpose().matmul(g).unwrap();
                deposit(grads, &self.nodes, *a, da);
                deposit(grads, &self.nodes, *b, db);
            }
            Op::Transpose(a) => deposit(grads, &self.nodes, *a, g.transpose()),
            Op::Relu(a) => {
                let m = val(*a).zip_map(g, |x, gg| if x > 0.0 { gg } else { 0.0 }).unwrap();
                deposit(grads, &self.nodes, *a, m);
            }
            Op::MinZero(a) => {
                let m = val(*a).zip_map(g, |x, gg| if x < 0.0 { gg } else { 0.0 }).unwrap();
                deposit(grads, &self.nodes, *a, m);
            }
            Op::SmoothL1(a) => {
                let m = val(*a)
                    .zip_map(g, |x, gg| if x.abs() < 1.0 { gg * x } else { gg * x.signum() })
                    .unwrap();
                deposit(grads, &self.nodes, *a, m);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                let k = g.scalar_value();
                deposit(grads, &self.nodes, *a, Matrix::zeros(r, c).map(|_| k));
            }
            Op::MeanCols(a) => {
                let (r, c) = val(*a).shape();
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0) / c as f64;
                    for j in 0..c {
                        m.set(i, j, gi);
                    }
                }
                deposit(grads, &self.nodes, *a, m);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (r, c) = y.shape();
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    let mut dgy = 0.0;
                    for j in 0..c {
                        dgy += g.get(i, j) * y.get(i, j);
                    }
                    for j in 0..c {
                        m.set(i, j, y.get(i, j) * (g.get(i, j) - dgy));
                    }
                }
                deposit(grads, &self.nodes, *a, m);
            }
            Op::LogSumExp(a) => {
                let src = val(*a);
                let k = g.scalar_value();
                let soft = softmax_slice(src.data());
                let m = Matrix::raw(
                    src.rows(),
                    src.cols(),
                    soft.iter().map(|s| s * k).collect(),
                );
                deposit(grads, &self.nodes, *a, m);
            }
            Op::CosineCols(a, b) => {
                let (ma, mb) = (val(*a), val(*b));
                let (r, n) = ma.shape();
                let mut da = Matrix::zeros(r, n);
                let mut db = Matrix::zeros(r, n);
                for j in 0..n {
                    let ca = ma.col(j);
                    let cb = mb.col(j);
                    let na = super::matrix::norm(&ca);
                    let nb = super::matrix::norm(&cb);
                    if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
                        continue; // lenient column carried value 0 with zero gradient
                    }
                    let cosv = super::matrix::dot(&ca, &cb) / (na * nb);
                    let gj = g.get(0, j);
                    for i in 0..r {
                        da.set(i, j, gj * (cb[i] / (na * nb) - cosv * ca[i] / (na * na)));
                        db.set(i, j, gj * (ca[i] / (na * nb) - cosv * cb[i] / (nb * nb)));
                    }
                }
                deposit(grads, &self.nodes, *a, da);
                deposit(grads, &self.nodes, *b, db);
            }
            Op::MulColBroadcast(a, s) => {
                let (ma, ms) = (val(*a), val(*s));
                let (r, c) = ma.shape();
                let mut da = Matrix::zeros(r, c);
                let mut ds = Matrix::zeros(r, 1);
                for i in 0..r {
                    let k = ms.get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..c {
                        da.set(i, j, g.get(i, j) * k);
                        acc += g.get(i, j) * ma.get(i, j);
                    }
                    ds.set(i, 0, acc);
                }
                deposit(grads, &self.nodes, *a, da);
                deposit(grads, &self.nodes, *s, ds);
            }
            Op::AddColBroadcast(a, s) => {
                let (r, c) = val(*a).shape();
                let mut ds = Matrix::zeros(r, 1);
                for i in 0..r {
                    ds.set(i, 0, (0..c).map(|j| g.get(i, j)).sum());
                }
                deposit(grads, &self.nodes, *a, g.clone());
                deposit(grads, &self.nodes, *s, ds);
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).scalar_value();
                let da = g.scale(k);
                let ds = Matrix::scalar(
                    g.data()
                        .iter()
                        .zip(val(*a).data().iter())
                        .map(|(gg, aa)| gg * aa)
                        .sum(),
                );
                deposit(grads, &self.nodes, *a, da);
                deposit(grads, &self.nodes, *s, ds);
            }
            Op::Col(a, j) => {
                let (r, c) = val(*a).shape();
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.set(i, *j, g.get(i, 0));
                }
                deposit(grads, &self.nodes, *a, m);
            }
            Op::Entry(a, rr, cc) => {
                let (r, c) = val(*a).shape();
                let mut m = Matrix::zeros(r, c);
                m.set(*rr, *cc, g.scalar_value());
                deposit(grads, &self.nodes, *a, m);
            }
            Op::ConcatScalars(ids) => {
                for (t, pid) in ids.iter().enumerate() {
                    deposit(grads, &self.nodes, *pid, Matrix::scalar(g.get(0, t)));
                }
            }
            Op::ConcatRows(a, b) => {
                let (ra, c) = val(*a).shape();
                let (rb, _) = val(*b).shape();
                let da = Matrix::raw(ra, c, g.data()[..ra * c].to_vec());
                let db = Matrix::raw(rb, c, g.data()[ra * c..].to_vec());
                deposit(grads, &self.nodes, *a, da);
                deposit(grads, &self.nodes, *b, db);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                deposit(grads, &self.nodes, *a, Matrix::raw(r, c, g.data().to_vec()));
            }
            Op::Upsample2x { src, taps } => {
                let (channels, cols) = val(*src).shape();
                let mut m = Matrix::zeros(channels, cols);
                for ch in 0..channels {
                    for (p_out, tl) in taps.iter().enumerate() {
                        let gg = g.get(ch, p_out);
                        if gg == 0.0 {
                            continue;
                        }
                        for &(p_in, wgt) in tl {
                            m.set(ch, p_in, m.get(ch, p_in) + wgt * gg);
                        }
                    }
                }
                deposit(grads, &self.nodes, *src, m);
            }
        }
    }
}

/// Stable log Σ exp of a slice; the slice is non-empty by Matrix invariants.
pub(crate) fn logsumexp_slice(z: &[f64]) -> f64 {
    let b = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    b + z.iter().map(|v| (v - b).exp()).sum::<f64>().ln()
}

fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let b = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - b).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Row-stabilized softmax over each row of a matrix.
pub(crate) fn softmax_rows_value(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let soft = softmax_slice(m.row_slice(i));
        for j in 0..c {
            out.set(i, j, soft[j]);
        }
    }
    out
}

/// 1D bilinear ×2 taps with half-pixel centers, duplicates merged after clamping.
fn bilinear2x_line(n: usize) -> Vec<Vec<(usize, f64)>> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let t = src - i0;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(2);
            for (idx, wgt) in [(i0 as isize, 1.0 - t), (i0 as isize + 1, t)] {
                if wgt == 0.0 {
                    continue;
                }
                let clamped = idx.clamp(0, n as isize - 1) as usize;
                if let Some(slot) = taps.iter_mut().find(|(i, _)| *i == clamped) {
                    slot.1 += wgt;
                } else {
                    taps.push((clamped, wgt));
                }
            }
            taps
        })
        .collect()
}

fn bilinear2x_taps(h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
    let rows = bilinear2x_line(h);
    let cols = bilinear2x_line(w);
    let mut out = Vec::with_capacity(4 * h * w);
    for ry in &rows {
        for cx in &cols {
            let mut taps = Vec::with_capacity(4);
            for &(iy, wy) in ry {
                for &(ix, wx) in cx {
                    taps.push((iy * w + ix, wy * wx));
                }
            }
            out.push(taps);
        }
    }
    out
}
