use std::collections::BTreeMap;

use super::{DiffError, Result, Tensor};

pub type NodeId = usize;

/// Named parameter collection. BTreeMap keeps iteration order deterministic.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Gradients keyed like the parameters they belong to.
pub type GradientMap = BTreeMap<String, Tensor>;

/// Kernel set of the differentiation engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    ConcatLastAxis,
    SoftmaxLastAxis,
    Log,
    PowScalar,
    MeanAll,
    SqL2Dist,
    Scale,
    RowScale,
    GatherIndex,
}

impl OpKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
            OpKind::ConcatLastAxis => "concat_last_axis",
            OpKind::SoftmaxLastAxis => "softmax_last_axis",
            OpKind::Log => "log",
            OpKind::PowScalar => "pow_scalar",
            OpKind::MeanAll => "mean_all",
            OpKind::SqL2Dist => "sq_l2_dist",
            OpKind::Scale => "scale",
            OpKind::RowScale => "row_scale",
            OpKind::GatherIndex => "gather_index",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Kernel(OpKind, Option<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run differentiation graph. Rebuilt per training step and
/// consumed by `backward`.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Record a constant; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: false,
        })
    }

    /// Record a differentiable leaf without a parameter name.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: true,
        })
    }

    /// Record a named trainable parameter; `backward` returns its gradient
    /// under this name.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Register every entry of a parameter map, returning name -> node id.
    pub fn bind_params(&mut self, params: &ParamMap) -> BTreeMap<String, NodeId> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), self.param(k, v.clone())))
            .collect()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Apply one kernel. A gradient path is recorded whenever any operand
    /// requires a gradient.
    pub fn apply(&mut self, kind: OpKind, operands: &[NodeId], scalar_arg: Option<f64>) -> Result<NodeId> {
        let value = self.eval(kind, operands, scalar_arg)?;
        let requires_grad = operands.iter().any(|&id| self.nodes[id].requires_grad);
        Ok(self.push(Node {
            op: Op::Kernel(kind, scalar_arg),
            inputs: operands.to_vec(),
            value,
            requires_grad,
        }))
    }

    fn arity(&self, kind: OpKind, operands: &[NodeId], expected: usize) -> Result<()> {
        if operands.len() != expected {
            return Err(DiffError::ArityMismatch {
                op: kind.name(),
                expected,
                got: operands.len(),
            });
        }
        Ok(())
    }

    fn eval(&self, kind: OpKind, operands: &[NodeId], scalar_arg: Option<f64>) -> Result<Tensor> {
        match kind {
            OpKind::MatMul => {
                self.arity(kind, operands, 2)?;
                let (a, b) = (self.value(operands[0]), self.value(operands[1]));
                matmul(a, b)
            }
            OpKind::Add => {
                self.arity(kind, operands, 2)?;
                let (a, b) = (self.value(operands[0]), self.value(operands[1]));
                add(a, b)
            }
            OpKind::Relu => {
                self.arity(kind, operands, 1)?;
                let a = self.value(operands[0]);
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().map(|&v| v.max(0.0)).collect(),
                )
            }
            OpKind::ConcatLastAxis => {
                if operands.is_empty() {
                    return Err(DiffError::ArityMismatch {
                        op: kind.name(),
                        expected: 1,
                        got: 0,
                    });
                }
                concat_last_axis(&operands.iter().map(|&id| self.value(id)).collect::<Vec<_>>())
            }
            OpKind::SoftmaxLastAxis => {
                self.arity(kind, operands, 1)?;
                softmax_last_axis(self.value(operands[0]))
            }
            OpKind::Log => {
                self.arity(kind, operands, 1)?;
                let a = self.value(operands[0]);
                let mut out = Vec::with_capacity(a.len());
                for &v in a.data() {
                    if v <= 0.0 {
                        return Err(DiffError::LogDomain(v));
                    }
                    out.push(v.ln());
                }
                Tensor::new(a.shape().to_vec(), out)
            }
            OpKind::PowScalar => {
                self.arity(kind, operands, 1)?;
                let c = scalar_arg.unwrap_or(1.0);
                let a = self.value(operands[0]);
                if !a.all_finite() {
                    return Err(DiffError::NonFinite(kind.name()));
                }
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().map(|&v| v.powf(c)).collect(),
                )
            }
            OpKind::MeanAll => {
                self.arity(kind, operands, 1)?;
                let a = self.value(operands[0]);
                let n = a.len().max(1) as f64;
                Ok(Tensor::scalar(a.data().iter().sum::<f64>() / n))
            }
            OpKind::SqL2Dist => {
                self.arity(kind, operands, 2)?;
                let (a, b) = (self.value(operands[0]), self.value(operands[1]));
                if a.shape() != b.shape() {
                    return Err(DiffError::ShapeMismatch {
                        op: kind.name(),
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                let d = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                Ok(Tensor::scalar(d))
            }
            OpKind::Scale => {
                self.arity(kind, operands, 1)?;
                let c = scalar_arg.unwrap_or(1.0);
                let a = self.value(operands[0]);
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().map(|&v| c * v).collect(),
                )
            }
            OpKind::RowScale => {
                self.arity(kind, operands, 2)?;
                let (a, b) = (self.value(operands[0]), self.value(operands[1]));
                if b.shape() != [a.rows(), 1] {
                    return Err(DiffError::ShapeMismatch {
                        op: kind.name(),
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                let mut out = Vec::with_capacity(a.len());
                for r in 0..a.rows() {
                    let s = b.data()[r];
                    out.extend(a.row(r).iter().map(|&v| v * s));
                }
                Tensor::new(a.shape().to_vec(), out)
            }
            OpKind::GatherIndex => {
                self.arity(kind, operands, 2)?;
                let (p, idx) = (self.value(operands[0]), self.value(operands[1]));
                gather_index(p, idx)
            }
        }
    }

    /// Reverse sweep from a scalar loss. Returns a gradient for every named
    /// parameter (zeros when the parameter is unreachable from the loss).
    /// Consumes the graph: a second backward is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        if self.consumed {
            return Err(DiffError::GraphConsumed);
        }
        let loss_shape = self.nodes[loss].value.shape().to_vec();
        if loss_shape != [1] {
            return Err(DiffError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        // negative-control hook for the diagnostics suite: deliberately
        // mis-scale the gradient flowing out of one named kernel
        let corrupt = std::env::var("SSMDG_DIAG_CORRUPT").ok();

        for id in (0..=loss).rev() {
            let mut g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let (Some(kernel), Op::Kernel(kind, _)) = (corrupt.as_deref(), &self.nodes[id].op) {
                if kernel == kind.name() {
                    for v in g.data_mut().iter_mut() {
                        *v *= 1.01;
                    }
                }
            }
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Kernel(kind, scalar_arg) = self.nodes[id].op.clone() {
                let inputs = self.nodes[id].inputs.clone();
                self.propagate(kind, scalar_arg, id, &inputs, &g, &mut grads)?;
            } else {
                grads[id] = Some(g); // keep leaf gradients for collection
            }
        }

        let mut out = GradientMap::new();
        for (name, &id) in &self.params {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        kind: OpKind,
        scalar_arg: Option<f64>,
        id: NodeId,
        inputs: &[NodeId],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let needs = |i: usize| self.nodes[inputs[i]].requires_grad;
        match kind {
            OpKind::MatMul => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if needs(0) {
                    Self::accumulate(grads, inputs[0], matmul_nt(g, b)?);
                }
                if needs(1) {
                    Self::accumulate(grads, inputs[1], matmul_tn(a, g)?);
                }
            }
            OpKind::Add => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if needs(0) {
                    Self::accumulate(grads, inputs[0], g.clone());
                }
                if needs(1) {
                    if b.shape() == a.shape() {
                        Self::accumulate(grads, inputs[1], g.clone());
                    } else {
                        // row-broadcast bias: sum gradient over rows
                        let c = b.len();
                        let mut acc = vec![0.0; c];
                        for r in 0..g.rows() {
                            for (j, v) in g.row(r).iter().enumerate() {
                                acc[j] += v;
                            }
                        }
                        Self::accumulate(grads, inputs[1], Tensor::new(b.shape().to_vec(), acc)?);
                    }
                }
            }
            OpKind::Relu => {
                if needs(0) {
                    let a = self.value(inputs[0]);
                    let d = a
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, inputs[0], Tensor::new(a.shape().to_vec(), d)?);
                }
            }
            OpKind::ConcatLastAxis => {
                let rows = self.value(id).rows();
                let mut offset = 0usize;
                let total = self.value(id).last_extent();
                for (i, &inp) in inputs.iter().enumerate() {
                    let c = self.value(inp).last_extent();
                    if needs(i) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let row = &g.data()[r * total..(r + 1) * total];
                            d.extend_from_slice(&row[offset..offset + c]);
                        }
                        Self::accumulate(
                            grads,
                            inp,
                            Tensor::new(self.value(inp).shape().to_vec(), d)?,
                        );
                    }
                    offset += c;
                }
            }
            OpKind::SoftmaxLastAxis => {
                if needs(0) {
                    let y = self.value(id);
                    let c = y.last_extent();
                    let mut d = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    Self::accumulate(grads, inputs[0], Tensor::new(y.shape().to_vec(), d)?);
                }
            }
            OpKind::Log => {
                if needs(0) {
                    let a = self.value(inputs[0]);
                    let d = a
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| gv / x)
                        .collect();
                    Self::accumulate(grads, inputs[0], Tensor::new(a.shape().to_vec(), d)?);
                }
            }
            OpKind::PowScalar => {
                if needs(0) {
                    let c = scalar_arg.unwrap_or(1.0);
                    let a = self.value(inputs[0]);
                    let d = a
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| gv * c * x.powf(c - 1.0))
                        .collect();
                    Self::accumulate(grads, inputs[0], Tensor::new(a.shape().to_vec(), d)?);
                }
            }
            OpKind::MeanAll => {
                if needs(0) {
                    let a = self.value(inputs[0]);
                    let gv = g.scalar_value() / a.len().max(1) as f64;
                    Self::accumulate(
                        grads,
                        inputs[0],
                        Tensor::new(a.shape().to_vec(), vec![gv; a.len()])?,
                    );
                }
            }
            OpKind::SqL2Dist => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let gv = g.scalar_value();
                if needs(0) {
                    let d = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| 2.0 * gv * (x - y))
                        .collect();
                    Self::accumulate(grads, inputs[0], Tensor::new(a.shape().to_vec(), d)?);
                }
                if needs(1) {
                    let d = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| -2.0 * gv * (x - y))
                        .collect();
                    Self::accumulate(grads, inputs[1], Tensor::new(b.shape().to_vec(), d)?);
                }
            }
            OpKind::Scale => {
                if needs(0) {
                    let c = scalar_arg.unwrap_or(1.0);
                    let a = self.value(inputs[0]);
                    let d = g.data().iter().map(|&gv| c * gv).collect();
                    Self::accumulate(grads, inputs[0], Tensor::new(a.shape().to_vec(), d)?);
                }
            }
            OpKind::RowScale => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let c = a.last_extent();
                if needs(0) {
                    let mut d = Vec::with_capacity(a.len());
                    for r in 0..a.rows() {
                        let s = b.data()[r];
                        d.extend(g.data()[r * c..(r + 1) * c].iter().map(|&gv| gv * s));
                    }
                    Self::accumulate(grads, inputs[0], Tensor::new(a.shape().to_vec(), d)?);
                }
                if needs(1) {
                    let mut d = Vec::with_capacity(a.rows());
                    for r in 0..a.rows() {
                        let dot: f64 = a
                            .row(r)
                            .iter()
                            .zip(&g.data()[r * c..(r + 1) * c])
                            .map(|(&av, &gv)| av * gv)
                            .sum();
                        d.push(dot);
                    }
                    Self::accumulate(grads, inputs[1], Tensor::new(vec![a.rows(), 1], d)?);
                }
            }
            OpKind::GatherIndex => {
                // no gradient flows to the index operand
                if needs(0) {
                    let p = self.value(inputs[0]);
                    let idx = self.value(inputs[1]);
                    let c = p.last_extent();
                    let mut d = vec![0.0; p.len()];
                    for (r, (&i, &gv)) in idx.data().iter().zip(g.data()).enumerate() {
                        d[r * c + i as usize] = gv;
                    }
                    Self::accumulate(grads, inputs[0], Tensor::new(p.shape().to_vec(), d)?);
                }
            }
        }
        Ok(())
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(DiffError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// g [n,m] * b^T [m,k] -> [n,k]
fn matmul_nt(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..k {
            let brow = &b.data()[p * m..(p + 1) * m];
            let grow = &g.data()[i * m..(i + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, k], out)
}

/// a^T [k,n] * g [n,m] -> [k,m]
fn matmul_tn(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = g.shape()[1];
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g.data()[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(vec![k, m], out)
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        return Tensor::new(a.shape().to_vec(), d);
    }
    // row-broadcast: b is 1-D matching a's last extent
    if b.shape().len() == 1 && b.len() == a.last_extent() {
        let c = b.len();
        let d = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i % c])
            .collect();
        return Tensor::new(a.shape().to_vec(), d);
    }
    Err(DiffError::ShapeMismatch {
        op: "add",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })
}

fn concat_last_axis(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts[0].rows();
    for p in parts {
        if p.rows() != rows || p.shape().len() != parts[0].shape().len() {
            return Err(DiffError::ShapeMismatch {
                op: "concat_last_axis",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.last_extent()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let mut shape = parts[0].shape().to_vec();
    *shape.last_mut().unwrap() = total;
    Tensor::new(shape, data)
}

/// Max-shifted softmax over the last axis.
pub(crate) fn softmax_last_axis(a: &Tensor) -> Result<Tensor> {
    if !a.all_finite() {
        return Err(DiffError::NonFinite("softmax_last_axis"));
    }
    let _c = a.last_extent();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / sum));
    }
    Tensor::new(a.shape().to_vec(), out)
}

fn gather_index(p: &Tensor, idx: &Tensor) -> Result<Tensor> {
    let c = p.last_extent();
    let n = p.rows();
    if idx.len() != n {
        return Err(DiffError::ShapeMismatch {
            op: "gather_index",
            left: p.shape().to_vec(),
            right: idx.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for (r, &iv) in idx.data().iter().enumerate() {
        let i = iv as usize;
        if i >= c {
            return Err(DiffError::IndexOutOfRange { index: i, extent: c });
        }
        out.push(p.row(r)[i]);
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = t.apply(OpKind::SoftmaxLastAxis, &[x], None).unwrap();
        for &v in t.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(&[vec![1e4, -1e4, 0.0], vec![9999.0, 1e4, -5.0]]).unwrap());
        let y = t.apply(OpKind::SoftmaxLastAxis, &[x], None).unwrap();
        let yv = t.value(y);
        for r in 0..2 {
            let s: f64 = yv.row(r).iter().sum();
            assert!(close(s, 1.0, 1e-12));
            // entries far below the row max underflow to exactly 0
            assert!(yv.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(yv.row(r).iter().cloned().fold(0.0, f64::max) > 0.0);
        }
    }

    #[test]
    fn sq_l2_dist_unit_displacement() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let d = t.apply(OpKind::SqL2Dist, &[a, b], None).unwrap();
        assert_eq!(t.value(d).scalar_value(), 1.0);
    }

    #[test]
    fn pow_scalar_gce_exponent() {
        // independent evaluation: exp(0.7 * ln 0.9)
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.9));
        let y = t.apply(OpKind::PowScalar, &[x], Some(0.7)).unwrap();
        assert!(close(t.value(y).scalar_value(), (0.7f64 * 0.9f64.ln()).exp(), 1e-15));
        assert!(close(t.value(y).scalar_value(), 0.928_901_697_685_371, 1e-12));
    }

    #[test]
    fn backward_square_mean() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::vector(vec![3.0]));
        let sq = t.apply(OpKind::PowScalar, &[x], Some(2.0)).unwrap();
        let loss = t.apply(OpKind::MeanAll, &[sq], None).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(close(g["x"].data()[0], 6.0, 1e-12));
    }

    #[test]
    fn backward_sq_l2_dist() {
        let mut t = Tape::new();
        let z = t.param("z", Tensor::vector(vec![1.0, 0.0]));
        let mu = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let loss = t.apply(OpKind::SqL2Dist, &[z, mu], None).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g["z"].data(), &[2.0, 0.0]);
    }

    #[test]
    fn row_scale_eval_and_backward() {
        let mut t = Tape::new();
        let a = t.param("a", Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = t.param("s", Tensor::matrix(&[vec![0.5], vec![2.0]]).unwrap());
        let y = t.apply(OpKind::RowScale, &[a, s], None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 1.0, 6.0, 8.0]);
        let loss = t.apply(OpKind::MeanAll, &[y], None).unwrap();
        let g = t.backward(loss).unwrap();
        // d(mean)/da[i,j] = s[i] / 4; d(mean)/ds[i] = (a[i,0] + a[i,1]) / 4
        assert_eq!(g["a"].data(), &[0.125, 0.125, 0.5, 0.5]);
        assert_eq!(g["s"].data(), &[0.75, 1.75]);
        assert_eq!(g["s"].shape(), &[2, 1]);
    }

    #[test]
    fn row_scale_shape_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = t.constant(Tensor::vector(vec![0.5, 2.0]));
        assert!(matches!(
            t.apply(OpKind::RowScale, &[a, s], None),
            Err(DiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(2.0));
        let loss = t.apply(OpKind::MeanAll, &[x], None).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(DiffError::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(2.0));
        let _unused = t.param("y", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = t.apply(OpKind::MeanAll, &[x], None).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g["y"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g["y"].shape(), &[3]);
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.5, -0.1]));
        assert!(matches!(
            t.apply(OpKind::Log, &[x], None),
            Err(DiffError::LogDomain(_))
        ));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::matrix(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let err = t.apply(OpKind::MatMul, &[a, b], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn gather_index_blocks_index_gradient() {
        let mut t = Tape::new();
        let p = t.param("p", Tensor::matrix(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap());
        let idx = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let sel = t.apply(OpKind::GatherIndex, &[p, idx], None).unwrap();
        assert_eq!(t.value(sel).data(), &[0.8, 0.6]);
        let loss = t.apply(OpKind::MeanAll, &[sel], None).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g["p"].data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let build = |with_a: bool, with_b: bool| {
            let mut t = Tape::new();
            let x = t.param("x", Tensor::vector(vec![0.3, -0.7, 1.2]));
            let mut total = t.constant(Tensor::scalar(0.0));
            if with_a {
                let sq = t.apply(OpKind::PowScalar, &[x], Some(2.0)).unwrap();
                let a = t.apply(OpKind::MeanAll, &[sq], None).unwrap();
                total = t.apply(OpKind::Add, &[total, a], None).unwrap();
            }
            if with_b {
                let target = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
                let b = t.apply(OpKind::SqL2Dist, &[x, target], None).unwrap();
                let b = t.apply(OpKind::Scale, &[b], Some(0.25)).unwrap();
                total = t.apply(OpKind::Add, &[total, b], None).unwrap();
            }
            t.backward(total).unwrap()
        };
        let ga = build(true, false);
        let gb = build(false, true);
        let gab = build(true, true);
        for i in 0..3 {
            assert!(close(gab["x"].data()[i], ga["x"].data()[i] + gb["x"].data()[i], 1e-12));
        }
    }
}
