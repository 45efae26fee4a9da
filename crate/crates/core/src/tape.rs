//! Recorded reverse-mode automatic differentiation.
//!
//! Forward operations on [`Tensor`] compute eagerly; when a tape is active on
//! the current thread each operation also appends a node holding its inputs
//! and forward value. [`backward`] replays the tape in reverse, visiting each
//! node exactly once and accumulating vector-Jacobian products.
//!
//! Tapes are strictly thread-local: one tape per thread, never shared.
//! Independent tapes on different threads do not interact, which is what the
//! batch-parallel training path relies on.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle tying a tensor to a node of a specific tape generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeRef {
    pub(crate) gen: u64,
    pub(crate) id: usize,
}

type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Concat { a: NodeId, b: NodeId, axis: usize },
    Slice { a: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    L1 { a: NodeId, b: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// An ordered record of primitive operations; parents always precede children.
#[derive(Debug)]
pub struct Tape {
    gen: u64,
    nodes: Vec<Node>,
}

static NEXT_GEN: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static ACTIVE: RefCell<Option<Tape>> = const { RefCell::new(None) };
}

impl Tape {
    fn new() -> Self {
        Tape { gen: NEXT_GEN.fetch_add(1, Ordering::Relaxed), nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Run `f` with a fresh active tape on this thread; return its result and the
/// recorded tape. Panics if a tape is already active (tapes do not nest).
pub fn with_tape<R>(f: impl FnOnce() -> R) -> (R, Tape) {
    ACTIVE.with(|slot| {
        let mut s = slot.borrow_mut();
        assert!(s.is_none(), "with_tape: a tape is already active on this thread");
        *s = Some(Tape::new());
    });
    let out = f();
    let tape = ACTIVE.with(|slot| slot.borrow_mut().take().expect("active tape vanished"));
    (out, tape)
}

pub fn tape_active() -> bool {
    ACTIVE.with(|slot| slot.borrow().is_some())
}

/// Register a tensor as a leaf on the active tape and return the attached
/// handle. Without an active tape this is a plain clone, so model code runs
/// unchanged in inference mode.
pub fn watch(t: &Tensor) -> Tensor {
    ACTIVE.with(|slot| {
        let mut s = slot.borrow_mut();
        match s.as_mut() {
            Some(tape) => {
                let id = push_node(tape, Op::Leaf, t.detached());
                t.with_node(TapeRef { gen: tape.gen, id })
            }
            None => t.clone(),
        }
    })
}

fn push_node(tape: &mut Tape, op: Op, value: Tensor) -> NodeId {
    tape.nodes.push(Node { op, value });
    tape.nodes.len() - 1
}

/// Node id of `t` on the active tape, registering an implicit leaf if the
/// tensor is untracked or belongs to a different tape generation.
fn input_id(tape: &mut Tape, t: &Tensor) -> NodeId {
    match t.node {
        Some(r) if r.gen == tape.gen => r.id,
        _ => push_node(tape, Op::Leaf, t.detached()),
    }
}

/// Record a computed value. `op_of` receives the resolved input ids.
fn record(inputs: &[&Tensor], value: Tensor, op_of: impl FnOnce(&[NodeId]) -> Op) -> Tensor {
    ACTIVE.with(|slot| {
        let mut s = slot.borrow_mut();
        match s.as_mut() {
            Some(tape) => {
                let ids: Vec<NodeId> = inputs.iter().map(|t| input_id(tape, t)).collect();
                let op = op_of(&ids);
                let id = push_node(tape, op, value.detached());
                value.with_node(TapeRef { gen: tape.gen, id })
            }
            None => value,
        }
    })
}

// ── Forward operations ──────────────────────────────────────────────────

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> =
            self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        Ok(record(&[self, other], value, |ids| Op::Add(ids[0], ids[1])))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> =
            self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        Ok(record(&[self, other], value, |ids| Op::Sub(ids[0], ids[1])))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data: Vec<f64> =
            self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        Ok(record(&[self, other], value, |ids| Op::Mul(ids[0], ids[1])))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a + c).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::AddScalar(ids[0]))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::MulScalar(ids[0], c))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = matmul_nn(self.data(), other.data(), m, k, n);
        let value = Tensor::matrix(m, n, data);
        Ok(record(&[self, other], value, |ids| Op::Matmul { a: ids[0], b: ids[1], m, k, n }))
    }

    /// Concatenate along `axis` (0 for 1-D; 0 = rows or 1 = columns for 2-D).
    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        let value = match (self.shape(), other.shape()) {
            ([a], [b]) if axis == 0 => {
                let mut data = Vec::with_capacity(a + b);
                data.extend_from_slice(self.data());
                data.extend_from_slice(other.data());
                Tensor::vector(data)
            }
            ([r1, c1], [r2, c2]) if axis == 0 && c1 == c2 => {
                let mut data = Vec::with_capacity((r1 + r2) * c1);
                data.extend_from_slice(self.data());
                data.extend_from_slice(other.data());
                Tensor::matrix(r1 + r2, *c1, data)
            }
            ([r1, c1], [r2, c2]) if axis == 1 && r1 == r2 => {
                let mut data = Vec::with_capacity(r1 * (c1 + c2));
                for i in 0..*r1 {
                    data.extend_from_slice(&self.data()[i * c1..(i + 1) * c1]);
                    data.extend_from_slice(&other.data()[i * c2..(i + 1) * c2]);
                }
                Tensor::matrix(*r1, c1 + c2, data)
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                })
            }
        };
        Ok(record(&[self, other], value, |ids| Op::Concat { a: ids[0], b: ids[1], axis }))
    }

    /// Contiguous sub-vector of a 1-D tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape().len() != 1 || start + len > self.numel() {
            return Err(Error::BadShape {
                op: "slice",
                expected: "1-D tensor covering the requested range",
                got: self.shape().to_vec(),
            });
        }
        let value = Tensor::vector(self.data()[start..start + len].to_vec());
        Ok(record(&[self], value, |ids| Op::Slice { a: ids[0], start, len }))
    }

    /// Matrix transpose (2-D only).
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "2-D tensor",
                got: self.shape().to_vec(),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let value = Tensor::matrix(c, r, transpose_raw(self.data(), r, c));
        Ok(record(&[self], value, |ids| Op::Transpose(ids[0])))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "shape with matching element count",
                got: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape.to_vec(), self.to_vec());
        Ok(record(&[self], value, |ids| Op::Reshape(ids[0])))
    }

    pub fn sum(&self) -> Tensor {
        let value = Tensor::scalar(self.data().iter().sum());
        record(&[self], value, |ids| Op::Sum(ids[0]))
    }

    pub fn mean(&self) -> Tensor {
        let value = Tensor::scalar(self.data().iter().sum::<f64>() / self.numel() as f64);
        record(&[self], value, |ids| Op::Mean(ids[0]))
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.exp()).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::Exp(ids[0]))
    }

    pub fn log(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.ln()).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::Log(ids[0]))
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.tanh()).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::Tanh(ids[0]))
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.max(0.0)).collect();
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::Relu(ids[0]))
    }

    /// Softmax along the last axis (whole vector for 1-D, per row for 2-D).
    pub fn softmax(&self) -> Tensor {
        let width = *self.shape().last().expect("softmax on empty shape");
        let mut data = self.to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let value = Tensor::from_vec(self.shape().to_vec(), data);
        record(&[self], value, |ids| Op::Softmax(ids[0]))
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "l1")?;
        let total: f64 =
            self.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total / self.numel() as f64);
        Ok(record(&[self, other], value, |ids| Op::L1 { a: ids[0], b: ids[1] }))
    }
}

fn transpose_raw(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

// ── Raw matmul kernels ──────────────────────────────────────────────────

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += a_ip * brow[j];
            }
        }
    }
    out
}

/// out[m,k] = g[m,n] @ b[k,n]^T
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// out[k,n] = a[m,k]^T @ g[m,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += a_ip * grow[j];
            }
        }
    }
    out
}

// ── Backward pass ───────────────────────────────────────────────────────

/// Gradients of one scalar loss with respect to tape nodes.
pub struct GradMap {
    gen: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// Gradient with respect to a tensor watched on the originating tape.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let r = t.node?;
        if r.gen != self.gen {
            return None;
        }
        self.grads.get(r.id).and_then(|g| {
            g.as_ref().map(|d| Tensor::from_vec(self.shapes[r.id].clone(), d.clone()))
        })
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.node
            .map(|r| {
                r.gen == self.gen && self.grads.get(r.id).is_some_and(|g| g.is_some())
            })
            .unwrap_or(false)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: impl Iterator<Item = f64>, len: usize) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => {
            let mut fresh = Vec::with_capacity(len);
            fresh.extend(contrib);
            *slot = Some(fresh);
        }
    }
}

fn accumulate_vec(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Reverse pass over the tape from a scalar loss.
///
/// Returns the gradient of the loss with respect to every node, leaves
/// included; d(loss)/d(loss) = 1.
pub fn backward(tape: &Tape, loss: &Tensor) -> Result<GradMap> {
    if !loss.is_scalar() {
        return Err(Error::LossNotScalar { numel: loss.numel() });
    }
    let loss_id = match loss.node {
        Some(r) if r.gen == tape.gen => r.id,
        _ => return Err(Error::LossDetached),
    };

    let n_nodes = tape.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
    grads[loss_id] = Some(vec![1.0]);

    // Topological order is the insertion order, so a single reverse sweep
    // visits each node exactly once with its downstream gradient complete.
    // Leaf gradients stay in the map; interior gradients are dropped once
    // propagated (the loss seed is restored below so d(loss)/d(loss) = 1).
    for id in (0..=loss_id).rev() {
        let node = &tape.nodes[id];
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        match node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                accumulate(&mut grads[a], g.iter().cloned(), g.len());
                accumulate(&mut grads[b], g.iter().cloned(), g.len());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a], g.iter().cloned(), g.len());
                accumulate(&mut grads[b], g.iter().map(|v| -v), g.len());
            }
            Op::Mul(a, b) => {
                let av = tape.nodes[a].value.data().to_vec();
                let bv = tape.nodes[b].value.data();
                accumulate(&mut grads[a], g.iter().zip(bv).map(|(g, b)| g * b), g.len());
                accumulate(&mut grads[b], g.iter().zip(av.iter()).map(|(g, a)| g * a), g.len());
            }
            Op::AddScalar(a) => {
                accumulate(&mut grads[a], g.iter().cloned(), g.len());
            }
            Op::MulScalar(a, c) => {
                accumulate(&mut grads[a], g.iter().map(|v| v * c), g.len());
            }
            Op::Matmul { a, b, m, k, n } => {
                let ga = matmul_nt(&g, tape.nodes[b].value.data(), m, n, k);
                let gb = matmul_tn(tape.nodes[a].value.data(), &g, m, k, n);
                accumulate_vec(&mut grads[a], ga);
                accumulate_vec(&mut grads[b], gb);
            }
            Op::Concat { a, b, axis } => {
                let ashape = tape.nodes[a].value.shape().to_vec();
                let a_len = tape.nodes[a].value.numel();
                let b_len = tape.nodes[b].value.numel();
                if axis == 0 || ashape.len() == 1 {
                    accumulate(&mut grads[a], g[..a_len].iter().cloned(), a_len);
                    accumulate(&mut grads[b], g[a_len..].iter().cloned(), b_len);
                } else {
                    let (rows, c1) = (ashape[0], ashape[1]);
                    let c2 = tape.nodes[b].value.shape()[1];
                    let width = c1 + c2;
                    let mut ga = vec![0.0; a_len];
                    let mut gb = vec![0.0; b_len];
                    for i in 0..rows {
                        ga[i * c1..(i + 1) * c1]
                            .copy_from_slice(&g[i * width..i * width + c1]);
                        gb[i * c2..(i + 1) * c2]
                            .copy_from_slice(&g[i * width + c1..(i + 1) * width]);
                    }
                    accumulate_vec(&mut grads[a], ga);
                    accumulate_vec(&mut grads[b], gb);
                }
            }
            Op::Slice { a, start, len } => {
                let total = tape.nodes[a].value.numel();
                let mut ga = vec![0.0; total];
                ga[start..start + len].copy_from_slice(&g);
                accumulate_vec(&mut grads[a], ga);
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a], g.iter().cloned(), g.len());
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                accumulate_vec(&mut grads[a], transpose_raw(&g, r, c));
            }
            Op::Sum(a) => {
                let len = tape.nodes[a].value.numel();
                accumulate(&mut grads[a], std::iter::repeat_n(g[0], len), len);
            }
            Op::Mean(a) => {
                let len = tape.nodes[a].value.numel();
                let gv = g[0] / len as f64;
                accumulate(&mut grads[a], std::iter::repeat_n(gv, len), len);
            }
            Op::Exp(a) => {
                let y = node.value.data().to_vec();
                accumulate(&mut grads[a], g.iter().zip(y.iter()).map(|(g, y)| g * y), g.len());
            }
            Op::Log(a) => {
                let x = tape.nodes[a].value.data();
                accumulate(&mut grads[a], g.iter().zip(x).map(|(g, x)| g / x), g.len());
            }
            Op::Tanh(a) => {
                let y = node.value.data().to_vec();
                accumulate(
                    &mut grads[a],
                    g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)),
                    g.len(),
                );
            }
            Op::Relu(a) => {
                let x = tape.nodes[a].value.data();
                accumulate(
                    &mut grads[a],
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                    g.len(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data().to_vec();
                let width = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for r in 0..g.len() / width {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &g[r * width..(r + 1) * width];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        ga[r * width + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accumulate_vec(&mut grads[a], ga);
            }
            Op::L1 { a, b } => {
                let av = tape.nodes[a].value.data();
                let bv = tape.nodes[b].value.data();
                let scale = g[0] / av.len() as f64;
                let signs: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[a], signs.iter().cloned(), signs.len());
                accumulate(&mut grads[b], signs.iter().map(|v| -v), signs.len());
            }
        }
    }
    grads[loss_id] = Some(vec![1.0]);

    let shapes = tape.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
    Ok(GradMap { gen: tape.gen, grads, shapes })
}
