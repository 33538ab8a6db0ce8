//! Reverse-mode automatic differentiation over batched matrices.
//!
//! Every node holds a row-major `rows × cols` block of `f64`. Rows index
//! sample paths and columns index state components, so one tape records the
//! computation for a whole chunk of paths at once. Binary elementwise
//! operations broadcast any operand dimension of size 1.
//!
//! Node values live in one contiguous arena, and nodes are appended in
//! evaluation order, so the inputs of a node always sit at lower offsets than
//! the node itself. [`Tape::backward`] walks the nodes once in reverse and
//! only visits nodes that depend on a parameter.

use std::fmt;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    MatMul(Var, Var),
    RowDot(Var, Var),
    RowMatVec(Var, Var),
    RowSum(Var),
    Sum(Var),
    Square(Var),
    RowSquareNorm(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Powi(Var, i32),
    Concat(Var, Var),
    /// `aux[start..start + count]` holds source ids, followed by one pick per row.
    Gather {
        start: u32,
        count: u32,
    },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    offset: usize,
    needs_grad: bool,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Strides for reading an operand broadcast to the output shape.
#[derive(Clone, Copy, Debug)]
struct Bcast {
    rows: usize,
    cols: usize,
    a_rs: usize,
    a_cs: usize,
    b_rs: usize,
    b_cs: usize,
}

impl Bcast {
    fn new(a: (usize, usize), b: (usize, usize), what: &str) -> Self {
        let dim = |x: usize, y: usize| -> usize {
            if x == y || y == 1 {
                x
            } else if x == 1 {
                y
            } else {
                panic!("{what}: cannot broadcast {a:?} with {b:?}")
            }
        };
        let rows = dim(a.0, b.0);
        let cols = dim(a.1, b.1);
        let strides = |s: (usize, usize)| (if s.0 == 1 { 0 } else { s.1 }, if s.1 == 1 { 0 } else { 1 });
        let (a_rs, a_cs) = strides(a);
        let (b_rs, b_cs) = strides(b);
        Bcast {
            rows,
            cols,
            a_rs,
            a_cs,
            b_rs,
            b_cs,
        }
    }

    fn same_shape(&self) -> bool {
        self.a_cs == 1 && self.b_cs == 1 && self.a_rs == self.cols && self.b_rs == self.cols
    }
}

/// A recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    grads: Vec<f64>,
    aux: Vec<u32>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("values", &self.values.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocated arenas.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.grads.clear();
        self.aux.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.index()];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.values[n.offset..n.offset + n.len()]
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.shape(v), (1, 1), "scalar() on non-scalar node");
        self.value(v)[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    /// Gradient accumulated by the last backward pass.
    pub fn grad(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.grads[n.offset..n.offset + n.len()]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, needs_grad: bool) -> (Var, usize) {
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        let id = u32::try_from(self.nodes.len()).expect("tape node count overflow");
        self.nodes.push(Node {
            op,
            rows,
            cols,
            offset,
            needs_grad,
        });
        (Var(id), offset)
    }

    fn node(&self, v: Var) -> Node {
        self.nodes[v.index()]
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: &[f64], needs_grad: bool) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf data length does not match shape");
        let (v, off) = self.push(Op::Input, rows, cols, needs_grad);
        self.values[off..].copy_from_slice(data);
        v
    }

    /// A constant block; gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        self.leaf(rows, cols, data, false)
    }

    /// A `1 × 1` constant.
    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(1, 1, &[x], false)
    }

    /// A constant block filled with `x`.
    pub fn filled(&mut self, rows: usize, cols: usize, x: f64) -> Var {
        let (v, off) = self.push(Op::Input, rows, cols, false);
        self.values[off..].fill(x);
        v
    }

    /// A differentiable leaf.
    pub fn parameter(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        self.leaf(rows, cols, data, true)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let na = self.node(a);
        let (v, off) = self.push(op, na.rows, na.cols, na.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        let src = &lo[na.offset..na.offset + na.len()];
        for (o, &x) in hi.iter_mut().zip(src) {
            *o = f(x);
        }
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (na, nb) = (self.node(a), self.node(b));
        let bc = Bcast::new((na.rows, na.cols), (nb.rows, nb.cols), "elementwise op");
        let (v, off) = self.push(op, bc.rows, bc.cols, na.needs_grad || nb.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        let av = &lo[na.offset..na.offset + na.len()];
        let bv = &lo[nb.offset..nb.offset + nb.len()];
        if bc.same_shape() {
            for ((o, &x), &y) in hi.iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        } else {
            for r in 0..bc.rows {
                let out = &mut hi[r * bc.cols..(r + 1) * bc.cols];
                let (ar, br) = (r * bc.a_rs, r * bc.b_rs);
                for (c, o) in out.iter_mut().enumerate() {
                    *o = f(av[ar + c * bc.a_cs], bv[br + c * bc.b_cs]);
                }
            }
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a, c), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// ReLU; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn powi(&mut self, a: Var, k: i32) -> Var {
        self.unary(a, Op::Powi(a, k), |x| x.powi(k))
    }

    /// Matrix product `(r × k) · (k × c)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(
            na.cols, nb.rows,
            "matmul: inner dimensions differ ({}x{} · {}x{})",
            na.rows, na.cols, nb.rows, nb.cols
        );
        let (v, off) = self.push(Op::MatMul(a, b), na.rows, nb.cols, na.needs_grad || nb.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        gemm(
            na.rows,
            na.cols,
            nb.cols,
            &lo[na.offset..],
            (na.cols, 1),
            &lo[nb.offset..],
            (nb.cols, 1),
            hi,
            0.0,
        );
        v
    }

    fn row_pair(&self, a: Var, b: Var, what: &str) -> (Node, Node, usize) {
        let (na, nb) = (self.node(a), self.node(b));
        let rows = match (na.rows, nb.rows) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("{what}: row counts {} and {} differ", na.rows, nb.rows),
        };
        (na, nb, rows)
    }

    /// Row-wise inner product: `(B × k), (B × k) → B × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (na, nb, rows) = self.row_pair(a, b, "row_dot");
        assert_eq!(na.cols, nb.cols, "row_dot: column counts differ");
        let k = na.cols;
        let (ars, brs) = (if na.rows == 1 { 0 } else { k }, if nb.rows == 1 { 0 } else { k });
        let (v, off) = self.push(Op::RowDot(a, b), rows, 1, na.needs_grad || nb.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        for (r, o) in hi.iter_mut().enumerate() {
            let x = &lo[na.offset + r * ars..na.offset + r * ars + k];
            let y = &lo[nb.offset + r * brs..nb.offset + r * brs + k];
            *o = x.iter().zip(y).map(|(p, q)| p * q).sum();
        }
        v
    }

    /// Row-wise matrix-vector product: each row of `a` holds a `p × k`
    /// matrix (row-major) and each row of `x` a `k`-vector; the result is
    /// `B × p`.
    pub fn row_matvec(&mut self, a: Var, x: Var) -> Var {
        let (na, nx, rows) = self.row_pair(a, x, "row_matvec");
        let k = nx.cols;
        assert!(
            k > 0 && na.cols % k == 0,
            "row_matvec: {} columns is not a multiple of vector length {k}",
            na.cols
        );
        let p = na.cols / k;
        let (ars, xrs) = (if na.rows == 1 { 0 } else { na.cols }, if nx.rows == 1 { 0 } else { k });
        let (v, off) = self.push(Op::RowMatVec(a, x), rows, p, na.needs_grad || nx.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        for r in 0..rows {
            let xr = &lo[nx.offset + r * xrs..nx.offset + r * xrs + k];
            for i in 0..p {
                let ar = &lo[na.offset + r * ars + i * k..na.offset + r * ars + (i + 1) * k];
                hi[r * p + i] = ar.iter().zip(xr).map(|(m, y)| m * y).sum();
            }
        }
        v
    }

    /// Row sums: `B × k → B × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let (v, off) = self.push(Op::RowSum(a), na.rows, 1, na.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        for (r, o) in hi.iter_mut().enumerate() {
            *o = lo[na.offset + r * na.cols..na.offset + (r + 1) * na.cols].iter().sum();
        }
        v
    }

    /// Row-wise squared Euclidean norm: `B × k → B × 1`.
    pub fn row_square_norm(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let (v, off) = self.push(Op::RowSquareNorm(a), na.rows, 1, na.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        for (r, o) in hi.iter_mut().enumerate() {
            *o = lo[na.offset + r * na.cols..na.offset + (r + 1) * na.cols]
                .iter()
                .map(|x| x * x)
                .sum();
        }
        v
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let (v, off) = self.push(Op::Sum(a), 1, 1, na.needs_grad);
        let s: f64 = self.values[na.offset..na.offset + na.len()].iter().sum();
        self.values[off] = s;
        v
    }

    /// Column concatenation `[a | b]`; a single-row operand is repeated to
    /// match the other's row count.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (na, nb, rows) = self.row_pair(a, b, "concat");
        let cols = na.cols + nb.cols;
        let (v, off) = self.push(Op::Concat(a, b), rows, cols, na.needs_grad || nb.needs_grad);
        let (lo, hi) = self.values.split_at_mut(off);
        for r in 0..rows {
            let ra = if na.rows == 1 { 0 } else { r };
            let rb = if nb.rows == 1 { 0 } else { r };
            let out = &mut hi[r * cols..(r + 1) * cols];
            out[..na.cols].copy_from_slice(&lo[na.offset + ra * na.cols..na.offset + (ra + 1) * na.cols]);
            out[na.cols..].copy_from_slice(&lo[nb.offset + rb * nb.cols..nb.offset + (rb + 1) * nb.cols]);
        }
        v
    }

    /// Row `r` of the result is row `r` of `sources[picks[r]]`. All sources
    /// share one shape.
    pub fn gather(&mut self, sources: &[Var], picks: &[usize]) -> Var {
        assert!(!sources.is_empty(), "gather: no sources");
        let first = self.node(sources[0]);
        assert_eq!(picks.len(), first.rows, "gather: one pick per row required");
        let mut needs_grad = false;
        for &s in sources {
            let ns = self.node(s);
            assert_eq!((ns.rows, ns.cols), (first.rows, first.cols), "gather: shapes differ");
            needs_grad |= ns.needs_grad;
        }
        let start = self.aux.len() as u32;
        self.aux.extend(sources.iter().map(|s| s.0));
        self.aux.extend(picks.iter().map(|&p| {
            assert!(p < sources.len(), "gather: pick {p} out of range");
            p as u32
        }));
        let op = Op::Gather {
            start,
            count: sources.len() as u32,
        };
        let (v, off) = self.push(op, first.rows, first.cols, needs_grad);
        let cols = first.cols;
        for (r, &p) in picks.iter().enumerate() {
            let src = self.nodes[sources[p].index()].offset + r * cols;
            self.values.copy_within(src..src + cols, off + r * cols);
        }
        v
    }

    /// Backward pass from a `1 × 1` root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be 1x1");
        self.backward_seeded(&[(root, &[1.0])]);
    }

    /// Backward pass with explicit output cotangents.
    pub fn backward_seeded(&mut self, seeds: &[(Var, &[f64])]) {
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
        let mut last = 0;
        for (v, seed) in seeds {
            let n = self.node(*v);
            assert_eq!(seed.len(), n.len(), "seed length does not match node shape");
            for (g, s) in self.grads[n.offset..n.offset + n.len()].iter_mut().zip(*seed) {
                *g += s;
            }
            last = last.max(v.index());
        }
        if seeds.is_empty() {
            return;
        }
        for idx in (0..=last).rev() {
            let node = self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Input) {
                continue;
            }
            self.propagate(node);
        }
    }

    fn propagate(&mut self, node: Node) {
        let (lo, hi) = self.grads.split_at_mut(node.offset);
        let g = &hi[..node.len()];
        let vals = &self.values;
        let nodes = &self.nodes;
        let out = &vals[node.offset..node.offset + node.len()];
        let slot = |v: Var| nodes[v.index()];
        match node.op {
            Op::Input => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (na, nb) = (slot(a), slot(b));
                let bc = Bcast::new((na.rows, na.cols), (nb.rows, nb.cols), "add");
                if na.needs_grad {
                    accumulate_bcast(&mut lo[na.offset..], g, bc, bc.a_rs, bc.a_cs, |gi, _| gi);
                }
                if nb.needs_grad {
                    accumulate_bcast(&mut lo[nb.offset..], g, bc, bc.b_rs, bc.b_cs, |gi, _| sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (na, nb) = (slot(a), slot(b));
                let bc = Bcast::new((na.rows, na.cols), (nb.rows, nb.cols), "mul");
                let av = &vals[na.offset..na.offset + na.len()];
                let bv = &vals[nb.offset..nb.offset + nb.len()];
                if na.needs_grad {
                    accumulate_bcast(&mut lo[na.offset..], g, bc, bc.a_rs, bc.a_cs, |gi, (r, c)| {
                        gi * bv[r * bc.b_rs + c * bc.b_cs]
                    });
                }
                if nb.needs_grad {
                    accumulate_bcast(&mut lo[nb.offset..], g, bc, bc.b_rs, bc.b_cs, |gi, (r, c)| {
                        gi * av[r * bc.a_rs + c * bc.a_cs]
                    });
                }
            }
            Op::Scale(a, c) => {
                let na = slot(a);
                for (d, &gi) in lo[na.offset..na.offset + na.len()].iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Shift(a, _) => {
                let na = slot(a);
                for (d, &gi) in lo[na.offset..na.offset + na.len()].iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Square(a) | Op::Relu(a) | Op::Sin(a) | Op::Cos(a) | Op::Exp(a) | Op::Log(a) | Op::Powi(a, _) => {
                let na = slot(a);
                let x = &vals[na.offset..na.offset + na.len()];
                let dst = &mut lo[na.offset..na.offset + na.len()];
                match node.op {
                    Op::Square(_) => zip3(dst, g, x, |gi, xi| 2.0 * xi * gi),
                    Op::Relu(_) => zip3(dst, g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
                    Op::Sin(_) => zip3(dst, g, x, |gi, xi| gi * xi.cos()),
                    Op::Cos(_) => zip3(dst, g, x, |gi, xi| -gi * xi.sin()),
                    Op::Exp(_) => {
                        for ((d, &gi), &o) in dst.iter_mut().zip(g).zip(out) {
                            *d += gi * o;
                        }
                    }
                    Op::Log(_) => zip3(dst, g, x, |gi, xi| gi / xi),
                    Op::Powi(_, k) => zip3(
                        dst,
                        g,
                        x,
                        |gi, xi| {
                            if k == 0 {
                                0.0
                            } else {
                                gi * k as f64 * xi.powi(k - 1)
                            }
                        },
                    ),
                    _ => unreachable!(),
                }
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (slot(a), slot(b));
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                if na.needs_grad {
                    // dA += G · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n, 1),
                        &vals[nb.offset..],
                        (1, n),
                        &mut lo[na.offset..na.offset + na.len()],
                        1.0,
                    );
                }
                if nb.needs_grad {
                    // dB += Aᵀ · G
                    gemm(
                        k,
                        m,
                        n,
                        &vals[na.offset..],
                        (1, k),
                        g,
                        (n, 1),
                        &mut lo[nb.offset..nb.offset + nb.len()],
                        1.0,
                    );
                }
            }
            Op::RowDot(a, b) => {
                let (na, nb) = (slot(a), slot(b));
                let k = na.cols;
                let (ars, brs) = (if na.rows == 1 { 0 } else { k }, if nb.rows == 1 { 0 } else { k });
                if na.needs_grad {
                    for (r, &gi) in g.iter().enumerate() {
                        let y = &vals[nb.offset + r * brs..nb.offset + r * brs + k];
                        let d = &mut lo[na.offset + r * ars..na.offset + r * ars + k];
                        for (di, yi) in d.iter_mut().zip(y) {
                            *di += gi * yi;
                        }
                    }
                }
                if nb.needs_grad {
                    for (r, &gi) in g.iter().enumerate() {
                        let x = &vals[na.offset + r * ars..na.offset + r * ars + k];
                        let d = &mut lo[nb.offset + r * brs..nb.offset + r * brs + k];
                        for (di, xi) in d.iter_mut().zip(x) {
                            *di += gi * xi;
                        }
                    }
                }
            }
            Op::RowMatVec(a, x) => {
                let (na, nx) = (slot(a), slot(x));
                let k = nx.cols;
                let p = na.cols / k;
                let (ars, xrs) = (if na.rows == 1 { 0 } else { na.cols }, if nx.rows == 1 { 0 } else { k });
                for r in 0..node.rows {
                    for i in 0..p {
                        let gi = g[r * p + i];
                        if na.needs_grad {
                            let xr = &vals[nx.offset + r * xrs..nx.offset + r * xrs + k];
                            let base = na.offset + r * ars + i * k;
                            for (d, xv) in lo[base..base + k].iter_mut().zip(xr) {
                                *d += gi * xv;
                            }
                        }
                        if nx.needs_grad {
                            let ar = &vals[na.offset + r * ars + i * k..na.offset + r * ars + (i + 1) * k];
                            let base = nx.offset + r * xrs;
                            for (d, av) in lo[base..base + k].iter_mut().zip(ar) {
                                *d += gi * av;
                            }
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                let na = slot(a);
                for (r, &gi) in g.iter().enumerate() {
                    for d in &mut lo[na.offset + r * na.cols..na.offset + (r + 1) * na.cols] {
                        *d += gi;
                    }
                }
            }
            Op::RowSquareNorm(a) => {
                let na = slot(a);
                for (r, &gi) in g.iter().enumerate() {
                    let range = na.offset + r * na.cols..na.offset + (r + 1) * na.cols;
                    for (d, &x) in lo[range.clone()].iter_mut().zip(&vals[range]) {
                        *d += 2.0 * gi * x;
                    }
                }
            }
            Op::Sum(a) => {
                let na = slot(a);
                let gi = g[0];
                for d in &mut lo[na.offset..na.offset + na.len()] {
                    *d += gi;
                }
            }
            Op::Concat(a, b) => {
                let (na, nb) = (slot(a), slot(b));
                for r in 0..node.rows {
                    let gr = &g[r * node.cols..(r + 1) * node.cols];
                    if na.needs_grad {
                        let ra = if na.rows == 1 { 0 } else { r };
                        let d = &mut lo[na.offset + ra * na.cols..na.offset + (ra + 1) * na.cols];
                        for (di, gi) in d.iter_mut().zip(&gr[..na.cols]) {
                            *di += gi;
                        }
                    }
                    if nb.needs_grad {
                        let rb = if nb.rows == 1 { 0 } else { r };
                        let d = &mut lo[nb.offset + rb * nb.cols..nb.offset + (rb + 1) * nb.cols];
                        for (di, gi) in d.iter_mut().zip(&gr[na.cols..]) {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Gather { start, count } => {
                let start = start as usize;
                let count = count as usize;
                let sources = &self.aux[start..start + count];
                let picks = &self.aux[start + count..start + count + node.rows];
                let cols = node.cols;
                for (r, &p) in picks.iter().enumerate() {
                    let ns = nodes[sources[p as usize] as usize];
                    if !ns.needs_grad {
                        continue;
                    }
                    let d = &mut lo[ns.offset + r * cols..ns.offset + (r + 1) * cols];
                    for (di, gi) in d.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *di += gi;
                    }
                }
            }
        }
    }

    /// Hash of the sign pattern of every ReLU input on the tape. Two
    /// evaluations with the same signature lie on the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                let na = self.nodes[a.index()];
                for &x in &self.values[na.offset..na.offset + na.len()] {
                    h ^= u64::from(x > 0.0);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn zip3(dst: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x) {
        *d += f(gi, xi);
    }
}

/// Accumulates `f(g[r, c], (r, c))` into a broadcast operand with the given
/// strides; stride 0 sums over the broadcast dimension.
fn accumulate_bcast(
    dst: &mut [f64],
    g: &[f64],
    bc: Bcast,
    rs: usize,
    cs: usize,
    f: impl Fn(f64, (usize, usize)) -> f64,
) {
    if rs == bc.cols && cs == 1 {
        for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(gi, (i / bc.cols, i % bc.cols));
        }
        return;
    }
    for r in 0..bc.rows {
        for c in 0..bc.cols {
            dst[r * rs + c * cs] += f(g[r * bc.cols + c], (r, c));
        }
    }
}

/// `c = beta * c + a · b` with `a: m × k`, `b: k × n`, `c: m × n` row-major;
/// operand strides are `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs out of bounds");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Central differences of a scalar function of one parameter block.
    fn numeric_grad(data: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..data.len())
            .map(|i| {
                let mut p = data.to_vec();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                let down = f(&p);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn check(rows: usize, cols: usize, data: &[f64], build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |p: &[f64]| {
            let mut t = Tape::new();
            let x = t.parameter(rows, cols, p);
            let out = build(&mut t, x);
            let s = t.sum(out);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let x = t.parameter(rows, cols, data);
        let out = build(&mut t, x);
        let s = t.sum(out);
        t.backward(s);
        let analytic = t.grad(x).to_vec();
        let numeric = numeric_grad(data, eval);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_relative_eq!(a, n, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    const DATA: [f64; 6] = [0.3, -1.2, 0.7, 2.0, -0.4, 1.1];

    #[test]
    fn elementwise_grads() {
        check(2, 3, &DATA, |t, x| t.sin(x));
        check(2, 3, &DATA, |t, x| t.cos(x));
        check(2, 3, &DATA, |t, x| t.exp(x));
        check(2, 3, &DATA, |t, x| t.square(x));
        check(2, 3, &DATA, |t, x| t.powi(x, 3));
        check(2, 3, &DATA, |t, x| t.relu(x));
        check(2, 3, &DATA, |t, x| {
            let s = t.square(x);
            let s = t.shift(s, 1.0);
            t.ln(s)
        });
        check(2, 3, &DATA, |t, x| t.scale(x, -2.5));
        check(2, 3, &DATA, |t, x| t.mul(x, x));
    }

    #[test]
    fn broadcast_grads() {
        // row vector, column vector and scalar operands
        check(1, 3, &DATA[..3], |t, x| {
            let m = t.constant(2, 3, &DATA);
            t.mul(m, x)
        });
        check(2, 1, &DATA[..2], |t, x| {
            let m = t.constant(2, 3, &DATA);
            t.sub(m, x)
        });
        check(1, 1, &DATA[..1], |t, x| {
            let m = t.constant(2, 3, &DATA);
            let p = t.mul(x, m);
            t.add(p, x)
        });
    }

    #[test]
    fn reduction_grads() {
        check(2, 3, &DATA, |t, x| t.row_square_norm(x));
        check(2, 3, &DATA, |t, x| {
            let r = t.row_sum(x);
            t.square(r)
        });
        check(2, 3, &DATA, |t, x| {
            let c = t.constant(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
            let d = t.row_dot(x, c);
            t.square(d)
        });
    }

    #[test]
    fn matmul_and_matvec_grads() {
        let w = [0.5, -0.3, 0.8, 1.5, 0.1, -0.7];
        check(3, 2, &w, |t, b| {
            let a = t.constant(2, 3, &DATA);
            let p = t.matmul(a, b);
            t.square(p)
        });
        check(2, 3, &DATA, |t, a| {
            let b = t.constant(3, 2, &w);
            let p = t.matmul(a, b);
            t.sin(p)
        });
        // two rows, each a 1×3 matrix times a 3-vector
        check(2, 3, &DATA, |t, a| {
            let v = t.constant(2, 3, &w);
            let p = t.row_matvec(a, v);
            t.square(p)
        });
        check(2, 3, &w, |t, v| {
            let a = t.constant(2, 6, &[DATA, DATA].concat());
            let p = t.row_matvec(a, v);
            t.square(p)
        });
    }

    #[test]
    fn concat_and_gather_grads() {
        check(1, 2, &DATA[..2], |t, e| {
            let x = t.constant(3, 2, &DATA);
            let c = t.concat(e, x);
            t.square(c)
        });
        check(3, 2, &DATA, |t, x| {
            let y = t.scale(x, 2.0);
            let z = t.sin(x);
            let g = t.gather(&[x, y, z], &[2, 0, 1]);
            t.square(g)
        });
    }

    #[test]
    fn matmul_values() {
        let mut t = Tape::new();
        let a = t.constant(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t.constant(2, 1, &[5.0, 6.0]);
        let p = t.matmul(a, b);
        assert_eq!(t.value(p), &[17.0, 39.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(1, 2, &[1.0, 2.0]);
        let p = t.parameter(1, 2, &[3.0, 4.0]);
        let m = t.mul(c, p);
        let s = t.sum(m);
        t.backward(s);
        assert_eq!(t.grad(c), &[0.0, 0.0]);
        assert_eq!(t.grad(p), &[1.0, 2.0]);
        assert!(!t.needs_grad(c));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let p = t.parameter(2, 3, &DATA);
        let s = t.sin(p);
        let q = t.row_square_norm(s);
        let r = t.sum(q);
        t.backward(r);
        let first = t.grad(p).to_vec();
        t.backward(r);
        assert_eq!(
            first.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            t.grad(p).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    #[should_panic(expected = "cannot broadcast")]
    fn mismatched_shapes_panic() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, &DATA);
        let b = t.constant(3, 2, &DATA);
        t.add(a, b);
    }
}
