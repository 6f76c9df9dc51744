//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass
//! (typically one sentence). Every primitive appends a node holding its output
//! value and enough structure to push gradients back to its inputs. Calling
//! [`Tape::backward`] on a scalar walks the nodes in reverse creation order and
//! collects parameter gradients into a [`Gradients`].
//!
//! Values are flat `f64` buffers tagged with a `(rows, cols)` shape; vectors
//! are `n x 1`. Parameter leaves borrow their storage, so building a tape over
//! a large embedding matrix costs nothing until a gradient reaches it.

use std::borrow::Cow;
use std::ops::Range;

use super::params::{Gradients, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather { src: Var, row: usize },
    MatVec { mat: Var, x: Var, rows: Range<usize> },
    MatVecRows { mat: Var, x: Var, rows: Vec<usize> },
    VecMat { x: Var, mat: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    LogSoftmax(Var),
    LogSumExp(Var),
    Pick { src: Var, index: usize },
    Sum(Var),
    Dot(Var, Var),
}

struct Node<'p> {
    op: Op,
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        debug_assert_eq!(node.value.len(), 1, "scalar() on a non-scalar node");
        node.value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Number of elements in `v`.
    pub fn size(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Cow<'p, [f64]>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_vec(&mut self, op: Op, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(op, n, 1, Cow::Owned(value))
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push_vec(Op::Constant, value)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant_matrix shape");
        self.push(Op::Constant, rows, cols, Cow::Owned(value))
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// every use accumulates into a single gradient buffer.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let (rows, cols) = self.store.shape(id);
        let v = self.push(
            Op::Param(id),
            rows,
            cols,
            Cow::Borrowed(self.store.get(id)),
        );
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Row `row` of a matrix as a vector.
    pub fn gather(&mut self, src: Var, row: usize) -> Var {
        let (rows, cols) = self.shape(src);
        assert!(row < rows, "gather row {row} out of {rows}");
        let value = self.value(src)[row * cols..(row + 1) * cols].to_vec();
        self.push_vec(Op::Gather { src, row }, value)
    }

    /// `mat[rows] . x` for a contiguous block of rows.
    pub fn matvec_range(&mut self, mat: Var, x: Var, rows: Range<usize>) -> Var {
        let (r, c) = self.shape(mat);
        assert!(rows.end <= r, "matvec rows {rows:?} out of {r}");
        assert_eq!(self.size(x), c, "matvec width");
        let m = self.value(mat);
        let xv = self.value(x);
        let value: Vec<f64> = rows
            .clone()
            .map(|i| dot(&m[i * c..(i + 1) * c], xv))
            .collect();
        self.push_vec(Op::MatVec { mat, x, rows }, value)
    }

    pub fn matvec(&mut self, mat: Var, x: Var) -> Var {
        let (r, _) = self.shape(mat);
        self.matvec_range(mat, x, 0..r)
    }

    /// `mat[rows] . x` for an arbitrary row selection.
    pub fn matvec_rows(&mut self, mat: Var, x: Var, rows: Vec<usize>) -> Var {
        let (r, c) = self.shape(mat);
        assert!(rows.iter().all(|&i| i < r), "matvec row out of range");
        assert_eq!(self.size(x), c, "matvec width");
        let m = self.value(mat);
        let xv = self.value(x);
        let value: Vec<f64> = rows
            .iter()
            .map(|&i| dot(&m[i * c..(i + 1) * c], xv))
            .collect();
        self.push_vec(Op::MatVecRows { mat, x, rows }, value)
    }

    /// `x^T . mat`: a weighted sum of the matrix rows.
    pub fn vecmat(&mut self, x: Var, mat: Var) -> Var {
        let (r, c) = self.shape(mat);
        assert_eq!(self.size(x), r, "vecmat height");
        let m = self.value(mat);
        let xv = self.value(x);
        let mut value = vec![0.0; c];
        for (i, &w) in xv.iter().enumerate() {
            for (o, &mv) in value.iter_mut().zip(&m[i * c..(i + 1) * c]) {
                *o += w * mv;
            }
        }
        self.push_vec(Op::VecMat { x, mat }, value)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.size(a), self.size(b), "elementwise length mismatch");
        let (rows, cols) = self.shape(a);
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, rows, cols, Cow::Owned(value))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (rows, cols) = self.shape(a);
        let value: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, rows, cols, Cow::Owned(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::with_capacity(parts.iter().map(|&p| self.size(p)).sum());
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        self.push_vec(Op::Concat(parts.to_vec()), value)
    }

    pub fn slice(&mut self, src: Var, range: Range<usize>) -> Var {
        assert!(range.end <= self.size(src), "slice out of range");
        let value = self.value(src)[range.clone()].to_vec();
        self.push_vec(
            Op::Slice {
                src,
                start: range.start,
            },
            value,
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        assert!(self.size(a) > 0, "log_softmax of an empty vector");
        let value = super::tensor::log_softmax(self.value(a));
        self.push_vec(Op::LogSoftmax(a), value)
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        assert!(self.size(a) > 0, "log_sum_exp of an empty vector");
        let value = super::tensor::log_sum_exp(self.value(a));
        self.push_vec(Op::LogSumExp(a), vec![value])
    }

    pub fn pick(&mut self, src: Var, index: usize) -> Var {
        let value = self.value(src)[index];
        self.push_vec(Op::Pick { src, index }, vec![value])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().sum();
        self.push_vec(Op::Sum(a), vec![value])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.size(a), self.size(b), "dot length mismatch");
        let value = dot(self.value(a), self.value(b));
        self.push_vec(Op::Dot(a, b), vec![value])
    }

    /// Sum of a list of scalars (or equal-length vectors).
    pub fn add_all(&mut self, terms: &[Var]) -> Option<Var> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    /// Reverse pass from the scalar `loss`. Nodes are visited in exactly the
    /// reverse of their creation order; parameters that `loss` does not depend
    /// on keep a zero gradient.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_traced(loss, |_| {})
    }

    /// [`Tape::backward`] with a callback receiving each node index as its
    /// gradient is propagated.
    pub fn backward_traced(&self, loss: Var, mut visit: impl FnMut(usize)) -> Gradients {
        assert_eq!(self.size(loss), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visit(i);
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate_owned(*id, g),
                Op::Gather { src, row } => {
                    let cols = node.value.len();
                    let buf = acc(&mut grads, *src, self.size(*src));
                    for (b, gv) in buf[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                        *b += gv;
                    }
                }
                Op::MatVec { mat, x, rows } => {
                    self.matvec_backward(&mut grads, *mat, *x, rows.clone(), &g);
                }
                Op::MatVecRows { mat, x, rows } => {
                    self.matvec_backward(&mut grads, *mat, *x, rows.iter().copied(), &g);
                }
                Op::VecMat { x, mat } => {
                    let (r, c) = self.shape(*mat);
                    let m = self.value(*mat);
                    let xv = self.value(*x);
                    {
                        let gx = acc(&mut grads, *x, r);
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            *gxi += dot(&m[i * c..(i + 1) * c], &g);
                        }
                    }
                    let gm = acc(&mut grads, *mat, r * c);
                    for (i, &w) in xv.iter().enumerate() {
                        for (b, gv) in gm[i * c..(i + 1) * c].iter_mut().zip(&g) {
                            *b += w * gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    if !matches!(self.nodes[a.0].op, Op::Constant) {
                        add_into(acc(&mut grads, *a, g.len()), &ga, 1.0);
                    }
                    if !matches!(self.nodes[b.0].op, Op::Constant) {
                        add_into(acc(&mut grads, *b, g.len()), &gb, 1.0);
                    }
                }
                Op::Scale(a, f) => add_into(acc(&mut grads, *a, g.len()), &g, *f),
                Op::Sigmoid(a) => {
                    let buf = acc(&mut grads, *a, g.len());
                    for ((b, gv), y) in buf.iter_mut().zip(&g).zip(node.value.iter()) {
                        *b += gv * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let buf = acc(&mut grads, *a, g.len());
                    for ((b, gv), y) in buf.iter_mut().zip(&g).zip(node.value.iter()) {
                        *b += gv * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    let buf = acc(&mut grads, *a, g.len());
                    for ((b, gv), y) in buf.iter_mut().zip(&g).zip(node.value.iter()) {
                        *b += gv * y;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.size(p);
                        add_into(acc(&mut grads, p, n), &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::Slice { src, start } => {
                    let buf = acc(&mut grads, *src, self.size(*src));
                    add_into(&mut buf[*start..*start + g.len()], &g, 1.0);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let buf = acc(&mut grads, *a, g.len());
                    for ((b, gv), y) in buf.iter_mut().zip(&g).zip(node.value.iter()) {
                        *b += gv - y.exp() * total;
                    }
                }
                Op::LogSumExp(a) => {
                    let y = node.value[0];
                    let av = self.value(*a);
                    let buf = acc(&mut grads, *a, av.len());
                    for (b, x) in buf.iter_mut().zip(av) {
                        *b += g[0] * (x - y).exp();
                    }
                }
                Op::Pick { src, index } => {
                    acc(&mut grads, *src, self.size(*src))[*index] += g[0];
                }
                Op::Sum(a) => {
                    for b in acc(&mut grads, *a, self.size(*a)) {
                        *b += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let av: Vec<f64> = self.value(*a).iter().map(|v| v * g[0]).collect();
                    let bv: Vec<f64> = self.value(*b).iter().map(|v| v * g[0]).collect();
                    add_into(acc(&mut grads, *a, bv.len()), &bv, 1.0);
                    add_into(acc(&mut grads, *b, av.len()), &av, 1.0);
                }
            }
        }
        out
    }

    fn matvec_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        mat: Var,
        x: Var,
        rows: impl Iterator<Item = usize> + Clone,
        g: &[f64],
    ) {
        let (r, c) = self.shape(mat);
        let m = self.value(mat);
        let xv = self.value(x);
        if !matches!(self.nodes[x.0].op, Op::Constant) {
            let gx = acc(grads, x, c);
            for (i, &gi) in rows.clone().zip(g) {
                if gi != 0.0 {
                    add_into(gx, &m[i * c..(i + 1) * c], gi);
                }
            }
        }
        if !matches!(self.nodes[mat.0].op, Op::Constant) {
            let gm = acc(grads, mat, r * c);
            for (i, &gi) in rows.zip(g) {
                if gi != 0.0 {
                    add_into(&mut gm[i * c..(i + 1) * c], xv, gi);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
