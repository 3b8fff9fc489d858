//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so node ids are already a topological order and the
//! backward sweep is a single reverse scan.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    L2Norm,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LogSoftmax(Var),
    Reduce {
        input: Var,
        kind: Reduction,
        axis: usize,
    },
    SumAll(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        input: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).values[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.values.clone()).expect("graph nodes are well formed")
    }

    /// Adds a leaf, honouring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Adds a leaf that always receives a gradient.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_values(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.constant(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Output shape of a binary op: equal shapes, or one side holds a single
    /// element and is broadcast.
    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || numel(sb) == 1 {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let n = numel(&shape);
        let (av, bv) = (self.value(a), self.value(b));
        let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        let values = (0..n).map(|i| f(at(i), bt(i))).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, values, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let values = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, values, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `a^c`. Non-integer exponents require strictly positive input.
    pub fn pow_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        if c.fract() != 0.0 {
            if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0) {
                return Err(Error::domain(
                    "pow_scalar",
                    format!("non-positive base {x} with fractional exponent {c}"),
                ));
            }
        }
        Ok(self.unary(a, |x| x.powf(c), Op::PowScalar(a, c)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Row-wise log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&cols) = shape.last() else {
            return Err(Error::domain("log_softmax", "scalar input"));
        };
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::LogSoftmax(a), rg))
    }

    /// Reduces `axis` away.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "reduction axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..n).map(|k| av[(o * n + k) * inner + i]);
                out[o * inner + i] = match kind {
                    Reduction::Sum => lane.sum(),
                    Reduction::Mean => lane.sum::<f64>() / n as f64,
                    Reduction::L2Norm => lane.map(|x| x * x).sum::<f64>().sqrt(),
                };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                input: a,
                kind,
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Mean, a, axis)
    }

    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::L2Norm, a, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::SumAll(a), rg)
    }

    /// Selects rows of a `[V, d]` table. The result is an ordinary node, so
    /// gradients with respect to the gathered rows can be read back directly.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding_gather",
                lhs: shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::domain("embedding_gather", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks elements by flat index into a `[k]` vector.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "select",
                index: bad,
                bound: n,
            });
        }
        let av = self.value(a);
        let values = indices.iter().map(|&i| av[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            vec![indices.len()],
            values,
            Op::Select {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Picks a single element by flat index, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.select(a, &[index])?;
        self.nodes[v.0].shape = Vec::new();
        Ok(v)
    }

    /// Reverse sweep from a single-element node.
    ///
    /// Every node that requires a gradient and lies on a path to `root`
    /// receives one; all others read back as zero.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root);
        if root_node.values.len() != 1 {
            return Err(Error::domain(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(&self.nodes[id], &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes[..=root.0]
                .iter()
                .map(|n| n.shape.clone())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Adds `contrib` into the gradient slot of `v` if it wants one.
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].values.len()]);
            contrib(slot);
        };

        // Gradient flowing into a broadcast operand of a binary op.
        let broadcast_into = |slot: &mut [f64], per_elem: &dyn Fn(usize) -> f64| {
            if slot.len() == 1 && g.len() != 1 {
                slot[0] += (0..g.len()).map(per_elem).sum::<f64>();
            } else {
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += per_elem(i);
                }
            }
        };
        let elem = |v: Var, i: usize| {
            let vals = &self.nodes[v.0].values;
            if vals.len() == 1 {
                vals[0]
            } else {
                vals[i]
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · Bᵀ
                acc(*a, &|slot| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            slot[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &|slot| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                slot[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|slot| broadcast_into(slot, &|i| g[i]));
                acc(*b, &|slot| broadcast_into(slot, &|i| g[i]));
            }
            Op::Sub(a, b) => {
                acc(*a, &|slot| broadcast_into(slot, &|i| g[i]));
                acc(*b, &|slot| broadcast_into(slot, &|i| -g[i]));
            }
            Op::Mul(a, b) => {
                acc(*a, &|slot| broadcast_into(slot, &|i| g[i] * elem(*b, i)));
                acc(*b, &|slot| broadcast_into(slot, &|i| g[i] * elem(*a, i)));
            }
            Op::AddScalar(a) => acc(*a, &|slot| {
                slot.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
            }),
            Op::MulScalar(a, c) => acc(*a, &|slot| {
                slot.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * c);
            }),
            Op::PowScalar(a, c) => {
                let av = self.value(*a);
                acc(*a, &|slot| {
                    for ((s, gi), x) in slot.iter_mut().zip(g).zip(av) {
                        *s += gi * c * x.powf(c - 1.0);
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &|slot| {
                for ((s, gi), y) in slot.iter_mut().zip(g).zip(&node.values) {
                    *s += gi * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &|slot| {
                    for ((s, gi), x) in slot.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|slot| {
                for ((s, gi), y) in slot.iter_mut().zip(g).zip(&node.values) {
                    *s += gi * y;
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &|slot| {
                    for ((s, gi), x) in slot.iter_mut().zip(g).zip(av) {
                        *s += gi / x;
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = *node.shape.last().expect("log_softmax input has rank >= 1");
                acc(*a, &|slot| {
                    for ((srow, grow), yrow) in slot
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(node.values.chunks(cols))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((s, gi), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += gi - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::Reduce { input, kind, axis } => {
                let shape = &self.nodes[input.0].shape;
                let (outer, n, inner) = axis_split(shape, *axis);
                let av = self.value(*input);
                acc(*input, &|slot| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let go = g[o * inner + i];
                            let y = node.values[o * inner + i];
                            for k in 0..n {
                                let idx = (o * n + k) * inner + i;
                                slot[idx] += match kind {
                                    Reduction::Sum => go,
                                    Reduction::Mean => go / n as f64,
                                    // subgradient 0 at the origin
                                    Reduction::L2Norm if y == 0.0 => 0.0,
                                    Reduction::L2Norm => go * av[idx] / y,
                                };
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &|slot| slot.iter_mut().for_each(|s| *s += g[0])),
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                acc(*table, &|slot| {
                    for (pos, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            slot[id * d + c] += g[pos * d + c];
                        }
                    }
                });
            }
            Op::Select { input, indices } => acc(*input, &|slot| {
                for (&i, gi) in indices.iter().zip(g) {
                    slot[i] += gi;
                }
            }),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient values for `v`, if any flowed into it.
    pub fn values(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor; zero when nothing flowed into it.
    ///
    /// Panics if `v` was created after the backward root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        let values = match self.values(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel(&shape)],
        };
        Tensor::new(shape, values).expect("gradient shape matches node")
    }

    /// Stores the gradient of `v` on `t` (which must have the same shape).
    pub fn assign(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.get(v);
        if g.shape() != t.shape() {
            return Err(Error::Shape {
                op: "assign_grad",
                lhs: t.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        t.set_grad(g.into_values())
    }
}
