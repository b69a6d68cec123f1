use std::cell::RefCell;

use super::data::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

/// Append-only computation graph. Nodes are created in topological order, so
/// a single reverse sweep propagates gradients. Leaves come in two flavours:
/// `param` (gradient tracked) and `constant` (gradient pruned, which keeps
/// frozen weights cheap on the backward pass).
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub(crate) fn push(&self, value: Tensor<T>, needs_grad: bool, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, needs_grad, back });
        Var(nodes.len() - 1)
    }

    /// Leaf whose gradient will be computed.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Read the value of `v` without cloning.
    pub(crate) fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Reverse sweep from `root` (seeded with ones). Consumes the recorded
    /// backward closures; a tape can only be swept once.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), T::one()));

        let needs: Vec<bool> = nodes.iter().map(|nd| nd.needs_grad).collect();
        for i in (0..=root.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(back) = nodes[i].back.take() else { continue };
            let Some(g) = grads[i].take() else { continue };
            {
                let mut sink = GradSink { grads: &mut grads, needs: &needs };
                back(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

/// Accumulates gradient contributions into parent nodes during backward.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Tensor<T>>],
    needs: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_in_place(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Compute the contribution lazily; skipped entirely for pruned parents.
    pub fn add_with(&mut self, v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.needs[v.0] {
            self.add(v, f());
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a tracked leaf; zeros when no path reached it.
    pub fn of(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_chain_grads() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(&[2], vec![2.0, 3.0]));
        let b = tape.param(Tensor::new(&[2], vec![5.0, 7.0]));
        let prod = tape.mul(a, b);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(10.0));
        let out = tape.mul(a, c);
        let grads = tape.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data(), &[10.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(3.0));
        let doubled = tape.add(a, a);
        let grads = tape.backward(doubled);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0]);
    }
}
