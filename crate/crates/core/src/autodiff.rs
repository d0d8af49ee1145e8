//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node and return a [`Var`] handle; nodes are only ever appended, so
//! the tape is topologically ordered by construction. [`Tape::backward`] walks
//! it once in reverse, accumulating gradients additively across fan-out.

use crate::error::{Error, Result};
use crate::tensor::{BinaryKind, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { a: Var, b: Var, kind: BinaryKind },
    MatMul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize, keepdim: bool },
    SumAll { x: Var },
    Reshape { x: Var },
    Transpose { x: Var, perm: Vec<usize> },
    Scale { x: Var, factor: f64 },
    Tanh { x: Var },
    NormalizeLast { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let out = self.value(a).binary(self.value(b), kind)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let out = self.value(x).sum_axis(axis, keepdim)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SumAxis { x, axis, keepdim }, rg))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum_all())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SumAll { x }, rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).transpose(perm)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::AxisOutOfRange { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.transpose(x, &perm)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).scale(factor)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Scale { x, factor }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh, "tanh")?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Tanh { x }, rg))
    }

    /// Divides every lane along the last axis by its Euclidean norm.
    pub fn normalize_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv.rank().checked_sub(1).ok_or(Error::AxisOutOfRange { axis: 0, rank: 0 })?;
        let norms = xv.lane_dot(xv, axis)?.map(f64::sqrt, "norm")?;
        if norms.data().iter().any(|&n| n == 0.0) {
            return Err(Error::NonFinite("normalization of a zero row".into()));
        }
        let inv = norms.map(|n| 1.0 / n, "norm")?;
        let out = xv.mul(&inv)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::NormalizeLast { x }, rg))
    }

    /// Back-propagates from a single-element `root` into every node that
    /// requires a gradient. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_val.shape().to_vec())?);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            let mut contrib: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {}
                Op::Binary { a, b, kind } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (g.clone(), g),
                        BinaryKind::Sub => (g.clone(), g.scale(-1.0)?),
                        BinaryKind::Mul => (g.mul(bv)?, g.mul(av)?),
                    };
                    contrib.push((*a, ga.sum_to_shape(av.shape())?));
                    contrib.push((*b, gb.sum_to_shape(bv.shape())?));
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        contrib.push((*a, g.matmul(&bv.t()?)?.sum_to_shape(av.shape())?));
                    }
                    if self.requires_grad(*b) {
                        contrib.push((*b, av.t()?.matmul(&g)?.sum_to_shape(bv.shape())?));
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let inner = g.lane_dot(y, *axis)?;
                    contrib.push((*x, y.mul(&g.sub(&inner)?)?));
                }
                Op::SumAxis { x, axis, keepdim } => {
                    let xs = self.value(*x).shape();
                    let g = if *keepdim {
                        g
                    } else {
                        let mut kshape = xs.to_vec();
                        kshape[*axis] = 1;
                        g.reshape(kshape)?
                    };
                    contrib.push((*x, Tensor::zeros(xs.to_vec())?.add(&g)?));
                }
                Op::SumAll { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    contrib.push((*x, Tensor::full(xs, g.item()?)?));
                }
                Op::Reshape { x } => {
                    contrib.push((*x, g.reshape(self.value(*x).shape().to_vec())?));
                }
                Op::Transpose { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    contrib.push((*x, g.transpose(&inv)?));
                }
                Op::Scale { x, factor } => contrib.push((*x, g.scale(*factor)?)),
                Op::Tanh { x } => {
                    let dy = node.value.map(|y| 1.0 - y * y, "tanh'")?;
                    contrib.push((*x, g.mul(&dy)?));
                }
                Op::NormalizeLast { x } => {
                    let xv = self.value(*x);
                    let axis = xv.rank() - 1;
                    let y = &node.value;
                    let inv = xv.lane_dot(xv, axis)?.map(|n| 1.0 / n.sqrt(), "norm")?;
                    let proj = g.lane_dot(y, axis)?;
                    contrib.push((*x, g.sub(&y.mul(&proj)?)?.mul(&inv)?));
                }
            }
            for (v, gv) in contrib {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => acc.add(&gv)?,
                    None => gv,
                });
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let xv = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &xv.scale(2.0).unwrap());
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(3x) + sum(x * c)  =>  grad = 3 + c
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, c).unwrap();
        let sa = tape.sum_all(a).unwrap();
        let sb = tape.sum_all(b).unwrap();
        let r = tape.add(sa, sb).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[13.0, 23.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn broadcast_gradient_is_summed() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(vec![3, 2]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![2.0, 5.0]).unwrap());
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 5.0, 2.0, 5.0, 2.0, 5.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
        let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        // d/dA sum(A B) = 1 B^T ; d/dB = A^T 1
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let av = Tensor::randn(vec![2, 3], 1.0, &mut rng).unwrap();
        let bv = Tensor::randn(vec![3, 4], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(av.clone());
        let b = tape.leaf(bv.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        let ones = Tensor::ones(vec![2, 4]).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &ones.matmul(&bv.t().unwrap()).unwrap());
        assert_eq!(tape.grad(b).unwrap(), &av.t().unwrap().matmul(&ones).unwrap());
    }
}
