//! Reverse-mode tape.
//!
//! A [`Tape`] records one forward pass as a flat arena of nodes; calling
//! [`Tape::backward`] walks the arena in reverse insertion order (which is a
//! valid reverse topological order by construction) and accumulates
//! gradients into every node, leaves included. Parameters enter the tape as
//! leaves each step, so the tape owns all per-step state and can simply be
//! dropped afterwards.

use super::ops::{self, BnCache, BnRunning, LnCache};
use super::Tensor;
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

/// Forward-pass mode; controls batch-norm statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Conv1d { x: VarId, w: VarId, b: VarId },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, cache: BnCache<T> },
    Relu(VarId),
    MaxPool2(VarId),
    GlobalAvgPool(VarId),
    Linear { x: VarId, w: VarId, b: VarId },
    Softmax(VarId),
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, cache: LnCache<T> },
    Dropout { x: VarId, mask: Vec<u8>, p: f64 },
    SplitHeads { x: VarId },
    MergeHeads(VarId),
    BatchedMatmul { a: VarId, b: VarId, transpose_b: bool, scale: T },
    MeanAxis1(VarId),
    AddBroadcastRows { x: VarId, rows: VarId },
    Reshape(VarId),
    CrossEntropy { logits: VarId, targets: Vec<usize>, weights: Vec<T>, probs: Tensor<T> },
    L1Penalty { inputs: Vec<VarId>, lambda: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
}

/// Gradient buffers produced by a backward pass, indexed by [`VarId`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    /// Channels-last conv1d (kernel 3 / pad 1 / stride 1) on `[R, L, C]`.
    pub fn conv1d_rlc(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let y = ops::conv1d_rlc_forward(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Conv1d { x, w, b })
    }

    /// Batch norm on `[R, L, C]`; train/eval comes from the tape mode and
    /// running statistics are updated in place on train-mode forwards.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: &mut BnRunning<T>,
        momentum: f64,
        eps: f64,
    ) -> VarId {
        let train = self.mode == Mode::Train;
        let (y, cache) = ops::batchnorm_rlc_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            train,
            momentum,
            eps,
        );
        self.push(y, Op::BatchNorm { x, gamma, beta, cache })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn max_pool2(&mut self, x: VarId) -> VarId {
        let y = ops::maxpool2_rlc_forward(self.value(x));
        self.push(y, Op::MaxPool2(x))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let y = ops::global_avg_pool_rlc_forward(self.value(x));
        self.push(y, Op::GlobalAvgPool(x))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn softmax(&mut self, x: VarId) -> VarId {
        let y = ops::softmax_forward(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (y, cache) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(y, Op::LayerNorm { x, gamma, beta, cache })
    }

    /// Dropout; identity (records nothing) in eval mode or when p = 0.
    pub fn dropout(&mut self, x: VarId, p: f64, rng: &mut RngStream) -> VarId {
        if self.mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let (y, mask) = ops::dropout_forward(self.value(x), p, rng);
        self.push(y, Op::Dropout { x, mask, p })
    }

    pub fn split_heads(&mut self, x: VarId, heads: usize) -> VarId {
        let y = ops::split_heads(self.value(x), heads);
        self.push(y, Op::SplitHeads { x })
    }

    pub fn merge_heads(&mut self, x: VarId) -> VarId {
        let y = ops::merge_heads(self.value(x));
        self.push(y, Op::MergeHeads(x))
    }

    pub fn batched_matmul(&mut self, a: VarId, b: VarId, transpose_b: bool, scale: T) -> VarId {
        let y = ops::batched_matmul(self.value(a), self.value(b), transpose_b, scale);
        self.push(y, Op::BatchedMatmul { a, b, transpose_b, scale })
    }

    pub fn mean_axis1(&mut self, x: VarId) -> VarId {
        let y = ops::mean_axis1_forward(self.value(x));
        self.push(y, Op::MeanAxis1(x))
    }

    /// `x: [B, S, D]` plus `rows: [S, D]` broadcast over the batch.
    pub fn add_broadcast_rows(&mut self, x: VarId, rows: VarId) -> VarId {
        let xv = self.value(x);
        let rv = self.value(rows);
        let (b, s, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(rv.shape(), &[s, d], "broadcast rows shape mismatch");
        let mut data = xv.data().to_vec();
        for bi in 0..b {
            for (v, r) in data[bi * s * d..(bi + 1) * s * d].iter_mut().zip(rv.data()) {
                *v = *v + *r;
            }
        }
        let out = Tensor::new(xv.shape(), data);
        self.push(out, Op::AddBroadcastRows { x, rows })
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let y = self.value(x).reshape(shape);
        self.push(y, Op::Reshape(x))
    }

    /// Weighted cross entropy; produces a scalar node.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize], class_weights: &[T]) -> VarId {
        for &w in class_weights {
            assert!(w > T::zero(), "class weights must be positive");
        }
        let (loss, probs) = ops::cross_entropy_forward(self.value(logits), targets, class_weights);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: class_weights.to_vec(),
                probs,
            },
        )
    }

    /// λ·Σ|w| over the given nodes; produces a scalar node.
    pub fn l1_penalty(&mut self, inputs: &[VarId], lambda: T) -> VarId {
        assert!(lambda >= T::zero(), "lambda must be non-negative");
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&id| self.value(id)).collect();
        let v = ops::l1_penalty_value(&tensors, lambda);
        self.push(Tensor::scalar(v), Op::L1Penalty { inputs: inputs.to_vec(), lambda })
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::Conv1d { x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv1d_rlc_backward(self.value(*x), self.value(*w), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) =
                        ops::batchnorm_rlc_backward(self.value(*x), self.value(*gamma), cache, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu(x) => {
                    accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &dy));
                }
                Op::MaxPool2(x) => {
                    accumulate(&mut grads, *x, ops::maxpool2_rlc_backward(self.value(*x), &dy));
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, ops::global_avg_pool_rlc_backward(&shape, &dy));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut grads, *x, ops::softmax_backward(y, &dy));
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) =
                        ops::layer_norm_backward(self.value(*x), self.value(*gamma), cache, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Dropout { x, mask, p } => {
                    accumulate(&mut grads, *x, ops::dropout_backward(mask, *p, &dy));
                }
                Op::SplitHeads { x } => {
                    accumulate(&mut grads, *x, ops::merge_heads(&dy));
                }
                Op::MergeHeads(x) => {
                    let heads = self.value(*x).shape()[1];
                    accumulate(&mut grads, *x, ops::split_heads(&dy, heads));
                }
                Op::BatchedMatmul { a, b, transpose_b, scale } => {
                    let (da, db) = ops::batched_matmul_backward(
                        self.value(*a),
                        self.value(*b),
                        *transpose_b,
                        *scale,
                        &dy,
                    );
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MeanAxis1(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, ops::mean_axis1_backward(&shape, &dy));
                }
                Op::AddBroadcastRows { x, rows } => {
                    accumulate(&mut grads, *x, dy.clone());
                    let rv = self.value(*rows);
                    let (s, d) = (rv.shape()[0], rv.shape()[1]);
                    let bsz = dy.numel() / (s * d);
                    let mut drows = vec![T::zero(); s * d];
                    for bi in 0..bsz {
                        for (acc, v) in drows.iter_mut().zip(&dy.data()[bi * s * d..(bi + 1) * s * d]) {
                            *acc = *acc + *v;
                        }
                    }
                    accumulate(&mut grads, *rows, Tensor::new(&[s, d], drows));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, dy.reshape(&shape));
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let dz = ops::cross_entropy_backward(probs, targets, weights, dy.item());
                    accumulate(&mut grads, *logits, dz);
                }
                Op::L1Penalty { inputs, lambda } => {
                    let upstream = dy.item();
                    for &input in inputs {
                        let g = ops::l1_penalty_grad(self.value(input), *lambda, upstream);
                        accumulate(&mut grads, input, g);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: VarId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_backward_fans_out() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]));
        let sum = tape.add(a, b);
        // reduce to scalar through CE against a fixed target for a scalar loss
        let logits = tape.reshape(sum, &[1, 2]);
        let loss = tape.cross_entropy(logits, &[0], &[1.0, 1.0]);
        let grads = tape.backward(loss);
        let ga = grads.get(a).unwrap();
        let gb = grads.get(b).unwrap();
        assert_eq!(ga.data(), gb.data());
    }

    #[test]
    fn same_leaf_used_twice_accumulates() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let a = tape.leaf(Tensor::new(&[1, 2], vec![0.3, -0.4]));
        let doubled = tape.add(a, a);
        let loss = tape.cross_entropy(doubled, &[1], &[1.0, 1.0]);
        let grads = tape.backward(loss);

        let mut single = Tape::<f64>::new(Mode::Train);
        let b = single.leaf(Tensor::new(&[1, 2], vec![0.6, -0.8]));
        let loss_b = single.cross_entropy(b, &[1], &[1.0, 1.0]);
        let grads_b = single.backward(loss_b);

        // d/da f(2a) = 2 f'(2a)
        for (g2, g1) in grads.get(a).unwrap().data().iter().zip(grads_b.get(b).unwrap().data()) {
            assert!((g2 - 2.0 * g1).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity_node() {
        let mut tape = Tape::<f64>::new(Mode::Eval);
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let mut rng = RngStream::new(1);
        let y = tape.dropout(x, 0.5, &mut rng);
        assert_eq!(y, x);
    }
}
