use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Operation kinds recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Relu,
    LogSoftmaxRows,
    Scale,
    Add,
    Mul,
    Sum,
    NllMean,
    KlToTarget,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 10] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Relu,
        OpKind::LogSoftmaxRows,
        OpKind::Scale,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::NllMean,
        OpKind::KlToTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Relu => "relu",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Scale => "scale",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::NllMean => "nll_mean",
            OpKind::KlToTarget => "kl_to_target",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    LogSoftmaxRows(usize),
    Scale(usize, f64),
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    NllMean { logp: usize, labels: Rc<[usize]> },
    KlToTarget { logq: usize, target_prob: Rc<Tensor> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Relu(_) => OpKind::Relu,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::Scale(..) => OpKind::Scale,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(_) => OpKind::Sum,
            Op::NllMean { .. } => OpKind::NllMean,
            Op::KlToTarget { .. } => OpKind::KlToTarget,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted.
///
/// A tape is single-threaded; build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("fault", &self.fault.get())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of `kind` by scaling its propagated
    /// gradient by 1.5. Only meant for exercising gradient checkers.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor (parameter, data batch or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Copy of the current value, detached from the tape.
    pub fn detach(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let v = kernels::add_bias(&self.value(), &bias.value())?;
        Ok(self.tape.push(v, Op::AddBias(self.id, bias.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = kernels::relu(&self.value());
        self.tape.push(v, Op::Relu(self.id))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let v = kernels::log_softmax_rows(&self.value())?;
        Ok(self.tape.push(v, Op::LogSoftmaxRows(self.id)))
    }

    /// Multiplies every entry by the finite constant `s`.
    pub fn scale(&self, s: f64) -> Var<'t> {
        assert!(s.is_finite(), "scale factor must be finite, got {s}");
        let v = kernels::scale(&self.value(), s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean negative log-likelihood of `labels` under the row log-probabilities
    /// held by `self`.
    pub fn nll_mean(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logp = self.value();
        if !logp.is_matrix() || logp.rows() != labels.len() {
            return Err(Error::dim(format!(
                "nll_mean: {} labels for log-probabilities of shape {:?}",
                labels.len(),
                logp.shape()
            )));
        }
        let c = logp.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -logp.get(i, y))
            .sum();
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.tape.push(
            v,
            Op::NllMean {
                logp: self.id,
                labels: labels.into(),
            },
        ))
    }

    /// Mean over rows of `KL(target ‖ q)` where `self` holds the row
    /// log-probabilities of `q` and `target_logp` the (constant) row
    /// log-probabilities of the target distribution.
    pub fn kl_to_target(&self, target_logp: &Tensor) -> Result<Var<'t>> {
        let logq = self.value();
        check_same_shape("kl_to_target", &logq, target_logp)?;
        if !logq.is_matrix() {
            return Err(Error::dim("kl_to_target expects matrices"));
        }
        let target_prob = target_logp.map(f64::exp);
        let total: f64 = target_prob
            .data()
            .iter()
            .zip(target_logp.data())
            .zip(logq.data())
            .map(|((&p, &lp), &lq)| if p > 0.0 { p * (lp - lq) } else { 0.0 })
            .sum();
        let v = Tensor::scalar(total / logq.rows() as f64);
        Ok(self.tape.push(
            v,
            Op::KlToTarget {
                logq: self.id,
                target_prob: Rc::new(target_prob),
            },
        ))
    }

    /// Reverse sweep from this scalar. Every node on the tape gets a
    /// gradient; nodes the loss does not depend on get zeros.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id].value;
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let fault = self.tape.fault.get();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(own) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let faulty;
            let g: &[f64] = if fault == Some(node.op.kind()) {
                faulty = own.iter().map(|v| v * 1.5).collect::<Vec<_>>();
                &faulty
            } else {
                &own
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = dC·Bᵀ
                    let da = kernels::gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize));
                    // dB = Aᵀ·dC
                    let db = kernels::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g.to_vec());
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    // dx = g - softmax * rowsum(g)
                    let out = &node.value;
                    let n = out.cols();
                    let mut dx = g.to_vec();
                    for (drow, orow) in dx.chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                        let gsum: f64 = drow.iter().sum();
                        for (d, &o) in drow.iter_mut().zip(orow) {
                            *d -= o.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, s) => {
                    let dx = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.to_vec());
                    accumulate(&mut grads, *a, g.to_vec());
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; val(*x).len()];
                    accumulate(&mut grads, *x, dx);
                }
                Op::NllMean { logp, labels } => {
                    let lv = val(*logp);
                    let c = lv.cols();
                    let w = -g[0] / labels.len() as f64;
                    let mut dx = vec![0.0; lv.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * c + y] = w;
                    }
                    accumulate(&mut grads, *logp, dx);
                }
                Op::KlToTarget { logq, target_prob } => {
                    let w = -g[0] / val(*logq).rows() as f64;
                    let dx = target_prob.data().iter().map(|p| p * w).collect();
                    accumulate(&mut grads, *logq, dx);
                }
            }
            grads[id] = Some(own);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match g {
                Some(g) => Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"),
                None => Tensor::zeros(node.value.shape()),
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

/// Gradients for every node of a tape, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> &Tensor {
        &self.grads[var.id]
    }

    pub fn take(&mut self, var: &Var<'_>) -> Tensor {
        let shape = self.grads[var.id].shape().to_vec();
        std::mem::replace(&mut self.grads[var.id], Tensor::zeros(&shape))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
