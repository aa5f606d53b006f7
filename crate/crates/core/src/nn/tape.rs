//! Recording tape over matrix-valued nodes.
//!
//! Every node holds a `rows × cols` value where columns index the batch
//! (agents) and rows index features. Parameters are not copied onto the
//! tape: an affine node references a tensor of a bound [`ParamSet`] and the
//! backward sweep accumulates into a gradient buffer of the same shape, so
//! weights reused across time steps receive the sum of their adjoints.

use nalgebra::DMatrix;

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node(usize);

/// Handle to a parameter set bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine { param: usize, w: usize, b: usize, x: Node },
    Sigmoid(Node),
    Concat(Vec<Node>),
    Broadcast(Node),
    Column { x: Node, col: usize },
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Scale(Node, f64),
    Offset(Node),
    Powi(Node, i32),
    Sum(Node),
}

struct Binding<'p> {
    params: &'p ParamSet,
    track: bool,
}

/// Per-binding gradients, same layout as [`ParamSet::tensors`].
pub type Gradients = Vec<Vec<DMatrix<f64>>>;

pub struct Tape<'p> {
    bindings: Vec<Binding<'p>>,
    ops: Vec<Op>,
    values: Vec<DMatrix<f64>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            bindings: Vec::new(),
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Binds a parameter set; `track` selects whether [`Tape::backward`]
    /// accumulates its gradient.
    pub fn bind(&mut self, params: &'p ParamSet, track: bool) -> ParamRef {
        self.bindings.push(Binding { params, track });
        ParamRef(self.bindings.len() - 1)
    }

    pub fn params(&self, p: ParamRef) -> &'p ParamSet {
        self.bindings[p.0].params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, n: Node) -> &DMatrix<f64> {
        &self.values[n.0]
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, n: Node) -> f64 {
        self.values[n.0][(0, 0)]
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> Node {
        self.ops.push(op);
        self.values.push(value);
        Node(self.ops.len() - 1)
    }

    pub fn input(&mut self, value: DMatrix<f64>) -> Node {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: f64) -> Node {
        self.input(DMatrix::from_element(1, 1, value))
    }

    pub fn row(&mut self, values: &[f64]) -> Node {
        self.input(DMatrix::from_row_slice(1, values.len(), values))
    }

    /// `W x + b 1ᵀ` with `W = tensors[w]`, `b = tensors[b]` of the bound set.
    pub fn affine(&mut self, p: ParamRef, w: usize, b: usize, x: Node) -> Result<Node> {
        let params = self.bindings[p.0].params;
        let (wm, bm) = (&params.tensors[w], &params.tensors[b]);
        let xv = &self.values[x.0];
        if wm.ncols() != xv.nrows() || bm.nrows() != wm.nrows() {
            return Err(Error::ShapeMismatch {
                context: "affine input",
                expected: format!("{} rows", wm.ncols()),
                got: format!("{} rows", xv.nrows()),
            });
        }
        let mut out = wm * xv;
        for mut col in out.column_iter_mut() {
            col += bm.column(0);
        }
        Ok(self.push(
            Op::Affine {
                param: p.0,
                w,
                b,
                x,
            },
            out,
        ))
    }

    pub fn sigmoid(&mut self, x: Node) -> Node {
        let v = self.values[x.0].map(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// Stacks rows of nodes sharing the same column count.
    pub fn concat(&mut self, parts: &[Node]) -> Result<Node> {
        let cols = self.values[parts[0].0].ncols();
        if parts.iter().any(|n| self.values[n.0].ncols() != cols) {
            return Err(Error::ShapeMismatch {
                context: "concat",
                expected: format!("{cols} columns in every part"),
                got: format!(
                    "{:?}",
                    parts.iter().map(|n| self.values[n.0].ncols()).collect::<Vec<_>>()
                ),
            });
        }
        let rows: usize = parts.iter().map(|n| self.values[n.0].nrows()).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut r0 = 0;
        for n in parts {
            let v = &self.values[n.0];
            out.rows_mut(r0, v.nrows()).copy_from(v);
            r0 += v.nrows();
        }
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Repeats a single-column node across `cols` columns.
    pub fn broadcast(&mut self, x: Node, cols: usize) -> Result<Node> {
        let v = &self.values[x.0];
        if v.ncols() != 1 {
            return Err(Error::ShapeMismatch {
                context: "broadcast",
                expected: "1 column".into(),
                got: format!("{} columns", v.ncols()),
            });
        }
        let out = DMatrix::from_fn(v.nrows(), cols, |r, _| v[(r, 0)]);
        Ok(self.push(Op::Broadcast(x), out))
    }

    pub fn column(&mut self, x: Node, col: usize) -> Node {
        let out = self.values[x.0].column(col).into_owned();
        self.push(Op::Column { x, col }, DMatrix::from_column_slice(out.len(), 1, out.as_slice()))
    }

    fn same_shape(&self, a: Node, b: Node, ctx: &'static str) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: ctx,
                expected: format!("{sa:?}"),
                got: format!("{sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape(a, b, "add")?;
        let v = &self.values[a.0] + &self.values[b.0];
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape(a, b, "sub")?;
        let v = &self.values[a.0] - &self.values[b.0];
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape(a, b, "mul")?;
        let v = self.values[a.0].component_mul(&self.values[b.0]);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Node, s: f64) -> Node {
        let v = self.values[a.0].map(|x| s * x);
        self.push(Op::Scale(a, s), v)
    }

    pub fn offset(&mut self, a: Node, s: f64) -> Node {
        let v = self.values[a.0].map(|x| x + s);
        self.push(Op::Offset(a), v)
    }

    pub fn powi(&mut self, a: Node, n: i32) -> Node {
        let v = self.values[a.0].map(|x| x.powi(n));
        self.push(Op::Powi(a, n), v)
    }

    /// Sum of every entry, as a `1 × 1` node.
    pub fn sum(&mut self, a: Node) -> Node {
        let s = self.values[a.0].sum();
        self.push(Op::Sum(a), DMatrix::from_element(1, 1, s))
    }

    /// Reverse sweep from a scalar node. Returns one gradient list per
    /// binding; untracked bindings get zero tensors.
    pub fn backward(&self, loss: Node) -> Result<Gradients> {
        if self.ops.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                context: "backward seed",
                expected: "(1, 1)".into(),
                got: format!("{:?}", self.values[loss.0].shape()),
            });
        }
        let mut grads: Gradients = self
            .bindings
            .iter()
            .map(|b| {
                b.params
                    .tensors
                    .iter()
                    .map(|t| DMatrix::zeros(t.nrows(), t.ncols()))
                    .collect()
            })
            .collect();
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.ops[i] {
                Op::Input => {}
                Op::Affine { param, w, b, x } => {
                    let binding = &self.bindings[*param];
                    let xv = &self.values[x.0];
                    if binding.track {
                        let gw = &mut grads[*param][*w];
                        gw.gemm(1.0, &g, &xv.transpose(), 1.0);
                        let gb = &mut grads[*param][*b];
                        for col in g.column_iter() {
                            gb.column_mut(0).axpy(1.0, &col, 1.0);
                        }
                    }
                    let wm = &binding.params.tensors[*w];
                    accumulate(&mut adj, *x, wm.tr_mul(&g));
                }
                Op::Sigmoid(x) => {
                    let y = &self.values[i];
                    let d = g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut adj, *x, d);
                }
                Op::Concat(parts) => {
                    let mut r0 = 0;
                    for n in parts {
                        let rows = self.values[n.0].nrows();
                        accumulate(&mut adj, *n, g.rows(r0, rows).into_owned());
                        r0 += rows;
                    }
                }
                Op::Broadcast(x) => {
                    let rows = g.nrows();
                    let d = DMatrix::from_fn(rows, 1, |r, _| g.row(r).sum());
                    accumulate(&mut adj, *x, d);
                }
                Op::Column { x, col } => {
                    let src = &self.values[x.0];
                    let mut d = DMatrix::zeros(src.nrows(), src.ncols());
                    d.column_mut(*col).copy_from(&g.column(0));
                    accumulate(&mut adj, *x, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, -&g);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.component_mul(&self.values[b.0]);
                    let db = g.component_mul(&self.values[a.0]);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g * *s),
                Op::Offset(a) => accumulate(&mut adj, *a, g),
                Op::Powi(a, n) => {
                    let n = *n;
                    let d = g.zip_map(&self.values[a.0], |gi, xi| gi * n as f64 * xi.powi(n - 1));
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.values[a.0].shape();
                    accumulate(&mut adj, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<DMatrix<f64>>], n: Node, g: DMatrix<f64>) {
    match &mut adj[n.0] {
        Some(acc) => *acc += g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
