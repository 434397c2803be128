//! A small reverse-mode tape. Every forward pass records its nodes on a
//! [`Tape`]; [`Tape::backward`] walks them in reverse from a scalar root.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Reshape { x: Var },
    SelectRows { x: Var, rows: Vec<usize> },
    /// Elementwise product with a constant of the same shape.
    MulConst { x: Var, factor: Arc<Vec<T>> },
    Softplus { x: Var },
    Scale { x: Var, c: T },
    Add { a: Var, b: Var },
    Mean { x: Var },
    /// Scalar output whose gradient with respect to `x` was computed eagerly.
    Scalar { x: Var, local_grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Hash of the side of zero on which every leaky-ReLU input lies. Two
    /// evaluations with equal signatures sit on the same smooth piece, which
    /// finite-difference checks need.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                for v in self.value(x).data() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// A leaf; `trainable` leaves collect gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::conv2d(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(y, Op::Conv2d { x, w, b }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self.value(x).map(|v| tensor::leaky_relu(v, slope));
        let ng = self.ng(x);
        self.push(y, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(y, Op::Tanh { x }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = tensor::avg_pool2(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::AvgPool2 { x }, ng))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = tensor::upsample2(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Upsample2 { x }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Reshape { x }, ng))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let b = self.value(x).batch();
        if let Some(&r) = rows.iter().find(|&&r| r >= b) {
            return Err(shape_err!("row {} out of range for batch {}", r, b));
        }
        let y = self.value(x).select_rows(rows);
        let ng = self.ng(x);
        Ok(self.push(y, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    pub fn mul_const(&mut self, x: Var, factor: Arc<Vec<T>>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(shape_err!("elementwise factor has {} values, tensor has {}", factor.len(), self.value(x).len()));
        }
        let src = self.value(x);
        let data = src.data().iter().zip(factor.iter()).map(|(&a, &f)| a * f).collect();
        let y = Tensor::new(src.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::MulConst { x, factor }, ng))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(tensor::softplus);
        let ng = self.ng(x);
        self.push(y, Op::Softplus { x }, ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(y, Op::Scale { x, c }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }, ng))
    }

    /// Record a scalar function of `x` whose value and gradient the caller computed.
    pub fn scalar_fn(&mut self, x: Var, value: T, local_grad: Tensor<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(shape_err!("local gradient has {} values, input has {}", local_grad.len(), self.value(x).len()));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::Scalar { x, local_grad }, ng))
    }

    /// Sum of scalars; `None` when `terms` is empty.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else { return Ok(None) };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(shape_err!("backward needs a scalar root, got {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(root) {
            return Ok(Grads { grads });
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.ng(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = tensor::conv2d_backward(self.value(*x), self.value(*w), &g, self.ng(*x));
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, dw, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = tensor::linear_backward(self.value(*x), self.value(*w), &g, self.ng(*x));
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, dw, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(g.data()).map(|(&a, &d)| if a > T::zero() { d } else { d * *slope }).collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), data)?, &mut grads);
                }
                Op::Tanh { x } => {
                    let data = node.value.data().iter().zip(g.data()).map(|(&y, &d)| d * (T::one() - y * y)).collect();
                    send(*x, Tensor::new(node.value.shape().to_vec(), data)?, &mut grads);
                }
                Op::AvgPool2 { x } => {
                    send(*x, tensor::avg_pool2_backward(self.value(*x).shape(), &g), &mut grads);
                }
                Op::Upsample2 { x } => {
                    send(*x, tensor::upsample2_backward(self.value(*x).shape(), &g), &mut grads);
                }
                Op::Reshape { x } => {
                    send(*x, g.reshape(self.value(*x).shape())?, &mut grads);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let n = xv.row_len();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for (d, &s) in dst.iter_mut().zip(g.row(k)) {
                            *d = *d + s;
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::MulConst { x, factor } => {
                    let data = g.data().iter().zip(factor.iter()).map(|(&d, &f)| d * f).collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?, &mut grads);
                }
                Op::Softplus { x } => {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(g.data()).map(|(&a, &d)| d * tensor::sigmoid(a)).collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), data)?, &mut grads);
                }
                Op::Scale { x, c } => {
                    send(*x, g.map(|d| d * *c), &mut grads);
                }
                Op::Add { a, b } => {
                    let ga = g.clone().reshape(self.value(*a).shape())?;
                    let gb = g.reshape(self.value(*b).shape())?;
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Mean { x } => {
                    let xv = self.value(*x);
                    let share = g.item() / T::from_usize(xv.len()).unwrap();
                    send(*x, Tensor::full(xv.shape(), share), &mut grads);
                }
                Op::Scalar { x, local_grad } => {
                    let s = g.item();
                    send(*x, local_grad.map(|d| d * s), &mut grads);
                }
            }
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_elementwise_ops() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap(), true);
        let a = tape.leaky_relu(x, 0.2);
        let b = tape.softplus(a);
        let c = tape.scale(b, 3.0);
        let m = tape.mean(c).unwrap();
        let g = tape.backward(m).unwrap();
        let gx = g.get(x).unwrap();
        for (i, &xv) in [-1.0f64, 0.5, 2.0].iter().enumerate() {
            let slope = if xv > 0.0 { 1.0 } else { 0.2 };
            let expect = slope * tensor::sigmoid(tensor::leaky_relu(xv, 0.2)) * 3.0 / 3.0;
            assert!((gx.data()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let w = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let s = tape.add(x, w).unwrap();
        let m = tape.mean(s).unwrap();
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn select_rows_scatters_back() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap(), true);
        let s = tape.select_rows(x, &[2, 2, 0]).unwrap();
        let m = tape.mean(s).unwrap();
        let g = tape.backward(m).unwrap();
        let d = g.get(x).unwrap().data().to_vec();
        assert_eq!(d, vec![1.0 / 6.0, 1.0 / 6.0, 0.0, 0.0, 2.0 / 6.0, 2.0 / 6.0]);
    }
}
