//! Reverse-mode differentiation via a linear operation tape.
//!
//! Forward calls record each operation (with whatever intermediates its
//! adjoint needs, e.g. max-pool argmax indices) and return handles into the
//! tape; `backward` replays the records in reverse, accumulating gradients
//! into every node reachable from a gradient-requiring leaf.

use crate::error::{Error, Result};
use crate::loss::{branch_loss_backward, branch_loss_forward, BranchLossValue, BranchSamples};
use crate::tensor::{self, Element, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SoftmaxPair {
        input: Var,
    },
    BranchLoss {
        probs: Var,
        reg: Var,
        samples: BranchSamples<E>,
        lambda: E,
    },
    /// Scalar: sum of all elements of the input.
    Sum {
        input: Var,
    },
    /// Scalar: inner product of the input with fixed coefficients.
    Project {
        input: Var,
        coeffs: Vec<E>,
    },
    /// Scalar: weighted sum of scalar inputs.
    WeightedSum {
        terms: Vec<(Var, E)>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Vec<E>,
    op: Op<E>,
    needs_grad: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an input tensor. Only leaves with `needs_grad` (and the ops
    /// built from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<E>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of `v` populated by [`Tape::backward`]; zeros if never reached.
    pub fn grad(&self, v: Var) -> &[E] {
        &self.nodes[v.0].grad
    }

    fn accumulate(work: &mut [Vec<E>], lens: &[usize], v: Var, delta: &[E]) {
        let slot = &mut work[v.0];
        if slot.is_empty() {
            *slot = vec![E::ZERO; lens[v.0]];
        }
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let out = tensor::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias).data(),
            stride,
            pad,
            dilation,
        )?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                dilation,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = tensor::relu(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = tensor::max_pool2d(self.value(input), k, stride)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, needs))
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = tensor::bilinear_upsample(self.value(input), factor)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Upsample { input, factor }, needs))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_channels(&tensors)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn softmax_pair(&mut self, input: Var) -> Result<Var> {
        let out = tensor::softmax_pair(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::SoftmaxPair { input }, needs))
    }

    /// Records one branch's mini-batch loss term. Returns the scalar handle
    /// plus its classification/regression components for reporting.
    pub fn branch_loss(
        &mut self,
        probs: Var,
        reg: Var,
        samples: BranchSamples<E>,
        lambda: E,
    ) -> (Var, BranchLossValue<E>) {
        let (total, value) =
            branch_loss_forward(self.value(probs), self.value(reg), &samples, lambda);
        let needs = self.needs(probs) || self.needs(reg);
        let v = self.push(
            Tensor::scalar(total),
            Op::BranchLoss {
                probs,
                reg,
                samples,
                lambda,
            },
            needs,
        );
        (v, value)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        let needs = self.needs(input);
        self.push(Tensor::scalar(acc), Op::Sum { input }, needs)
    }

    /// Inner product with fixed coefficients; the gradient-check harness uses
    /// this to reduce arbitrary outputs to a scalar.
    pub fn project(&mut self, input: Var, coeffs: Vec<E>) -> Result<Var> {
        if coeffs.len() != self.value(input).len() {
            return Err(Error::Config(format!(
                "project coefficient count {} does not match tensor length {}",
                coeffs.len(),
                self.value(input).len()
            )));
        }
        let mut acc = E::ZERO;
        for (v, c) in self.value(input).data().iter().zip(&coeffs) {
            acc += *v * *c;
        }
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(acc), Op::Project { input, coeffs }, needs))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, E)]) -> Result<Var> {
        let mut acc = E::ZERO;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Config(format!(
                    "weighted_sum expects scalars, got shape {:?}",
                    t.shape()
                )));
            }
            acc += t.data()[0] * w;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        ))
    }

    /// Replays adjoints in reverse order from `out`, which must be a scalar.
    /// Each call adds its contribution into the node gradients, so calling
    /// twice without resetting the tape doubles them.
    pub fn backward(&mut self, out: Var, seed: E) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State(
                "backward called before any forward operation was recorded".into(),
            ));
        }
        if self.value(out).len() != 1 {
            return Err(Error::State(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        // This call's gradients; folded into the persistent buffers at the end.
        let mut work: Vec<Vec<E>> = vec![Vec::new(); out.0 + 1];
        Self::accumulate(&mut work, &lens, out, &[seed]);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad || work[i].is_empty() {
                continue;
            }
            let grad_out = std::mem::take(&mut work[i]);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                    dilation,
                } => {
                    let (g_in, g_w, g_b) = tensor::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *pad,
                        *dilation,
                        &grad_out,
                    );
                    if self.needs(*input) {
                        Self::accumulate(&mut work, &lens, *input, g_in.data());
                    }
                    if self.needs(*weight) {
                        Self::accumulate(&mut work, &lens, *weight, g_w.data());
                    }
                    if self.needs(*bias) {
                        Self::accumulate(&mut work, &lens, *bias, &g_b);
                    }
                }
                Op::Relu { input } => {
                    let g = tensor::relu_backward(self.value(*input), &grad_out);
                    Self::accumulate(&mut work, &lens, *input, g.data());
                }
                Op::MaxPool { input, argmax } => {
                    let g =
                        tensor::max_pool2d_backward(self.value(*input).shape(), argmax, &grad_out);
                    Self::accumulate(&mut work, &lens, *input, g.data());
                }
                Op::Upsample { input, factor } => {
                    let g = tensor::bilinear_upsample_backward(
                        self.value(*input).shape(),
                        *factor,
                        &grad_out,
                    );
                    Self::accumulate(&mut work, &lens, *input, g.data());
                }
                Op::Concat { inputs } => {
                    let shapes: Vec<[usize; 4]> =
                        inputs.iter().map(|&v| self.value(v).shape()).collect();
                    let grads = tensor::concat_channels_backward(&shapes, &grad_out);
                    for (&v, g) in inputs.iter().zip(&grads) {
                        if self.needs(v) {
                            Self::accumulate(&mut work, &lens, v, g.data());
                        }
                    }
                }
                Op::SoftmaxPair { input } => {
                    // The jacobian needs the forward output (this node's
                    // value), not the input logits.
                    let g = tensor::softmax_pair_backward(&self.nodes[i].value, &grad_out);
                    Self::accumulate(&mut work, &lens, *input, g.data());
                }
                Op::BranchLoss {
                    probs,
                    reg,
                    samples,
                    lambda,
                } => {
                    let (g_probs, g_reg) = branch_loss_backward(
                        self.value(*probs),
                        self.value(*reg),
                        samples,
                        *lambda,
                        grad_out[0],
                    );
                    if self.needs(*probs) {
                        Self::accumulate(&mut work, &lens, *probs, g_probs.data());
                    }
                    if self.needs(*reg) {
                        Self::accumulate(&mut work, &lens, *reg, g_reg.data());
                    }
                }
                Op::Sum { input } => {
                    let g = vec![grad_out[0]; self.value(*input).len()];
                    Self::accumulate(&mut work, &lens, *input, &g);
                }
                Op::Project { input, coeffs } => {
                    let g: Vec<E> = coeffs.iter().map(|&c| c * grad_out[0]).collect();
                    Self::accumulate(&mut work, &lens, *input, &g);
                }
                Op::WeightedSum { terms } => {
                    for &(v, w) in terms {
                        if self.needs(v) {
                            Self::accumulate(&mut work, &lens, v, &[w * grad_out[0]]);
                        }
                    }
                }
            }
            work[i] = grad_out;
        }

        for (i, w) in work.into_iter().enumerate() {
            if w.is_empty() {
                continue;
            }
            let node = &mut self.nodes[i];
            if node.grad.is_empty() {
                node.grad = w;
            } else {
                for (g, d) in node.grad.iter_mut().zip(&w) {
                    *g += *d;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut tape: Tape<f64> = Tape::new();
        let err = tape.backward(Var(0), 1.0);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s, 1.0).unwrap();
        assert_eq!(tape.grad(x), &[1., 1., 1., 1.]);
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 2], vec![-1., 2.]).unwrap(), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s, 0.0).unwrap();
        assert_eq!(tape.grad(x), &[0., 0.]);
    }

    #[test]
    fn relu_sum_grad_masks_negatives() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 2], vec![-1., 2.]).unwrap(), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s, 1.0).unwrap();
        assert_eq!(tape.grad(x), &[0., 1.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 2], vec![1., 2.]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s, 1.0).unwrap();
        tape.backward(s, 1.0).unwrap();
        assert_eq!(tape.grad(x), &[2., 2.]);
    }

    #[test]
    fn conv_relu_sum_chain_grad() {
        // f = sum(relu(conv(x, w))), all positive pre-activations, so the
        // weight gradient is the sum of input windows.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap(),
            false,
        );
        let w = tape.leaf(Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new([1, 1, 1, 1], vec![0.0]).unwrap(), true);
        let y = tape.conv2d(x, w, b, 1, 0, 1).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        tape.backward(s, 1.0).unwrap();
        assert_eq!(tape.grad(w), &[10.0]);
        assert_eq!(tape.grad(b), &[4.0]);
        assert!(tape.grad(x).is_empty());
    }
}
