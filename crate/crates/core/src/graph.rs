//! A small reverse-mode tape. Each forward call records its inputs and
//! whatever it needs for the backward pass; [`Graph::backward`] walks the
//! tape once in reverse.

use crate::losses::{dice_sample, l1_with_grad};
use crate::ops::{self, BatchStats};
use crate::tensor::{Scalar, Tensor};
use crate::vmf::{self, LikelihoodNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        cols: Vec<Vec<T>>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    ToRows(Var),
    FromRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Likelihood {
        z: Var,
        mu: Var,
        sigma: T,
        norm: LikelihoodNorm,
    },
    Recompose {
        l: Var,
        mu: Var,
    },
    VmfLoss {
        z: Var,
        mu: Var,
        winners: Vec<u32>,
    },
    Dice {
        pred: Var,
        grad: Vec<T>,
    },
    L1 {
        pred: Var,
        grad: Vec<T>,
    },
    SumSquares(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by graph variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let (y, cols) = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        self.push(y, Op::Conv2d { x, w, b, pad, cols }, &[x, w, b])
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = ops::conv_transpose2x2_forward(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::ConvTranspose { x, w, b }, &[x, w, b])
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (y, argmax) = ops::max_pool2_forward(self.value(x));
        self.push(y, Op::MaxPool { x, argmax }, &[x])
    }

    /// Batch normalization; `running = None` normalizes with batch statistics
    /// and returns them for the caller to fold into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> (Var, Option<BatchStats<T>>) {
        let out = ops::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), running);
        let batch_stats = out.stats.is_some();
        let v = self.push(
            out.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (v, out.stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let y = Tensor::from_vec(&[n, ca + cb, h, w], data).unwrap();
        self.push(y, Op::Concat(a, b), &[a, b])
    }

    /// NCHW to channel-last rows `[N*H*W, C]`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let y = nchw_to_rows(self.value(x));
        self.push(y, Op::ToRows(x), &[x])
    }

    /// Rows `[N*H*W, C]` back to NCHW.
    pub fn from_rows(&mut self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let y = rows_to_nchw(self.value(x), n, h, w);
        self.push(y, Op::FromRows(x), &[x])
    }

    /// Unit-normalizes each row of a `[P, D]` matrix.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (y, norms) = vmf::normalize_rows(self.value(x).data(), shape[1]);
        let y = Tensor::from_vec(&shape, y).unwrap();
        self.push(y, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Normalized vMF likelihoods `[P, J]` of rows `z: [P, D]` under kernels `mu: [J, D]`.
    pub fn likelihood(&mut self, z: Var, mu: Var, sigma: T, norm: LikelihoodNorm) -> Var {
        let (p, d) = (self.value(z).shape()[0], self.value(z).shape()[1]);
        let j = self.value(mu).shape()[0];
        let l = vmf::likelihood_rows(self.value(z).data(), self.value(mu).data(), d, j, sigma, norm);
        let y = Tensor::from_vec(&[p, j], l).unwrap();
        self.push(y, Op::Likelihood { z, mu, sigma, norm }, &[z, mu])
    }

    pub fn recompose(&mut self, l: Var, mu: Var) -> Var {
        let (p, j) = (self.value(l).shape()[0], self.value(l).shape()[1]);
        let d = self.value(mu).shape()[1];
        let y = vmf::recompose_rows(self.value(l).data(), self.value(mu).data(), d, j);
        let y = Tensor::from_vec(&[p, d], y).unwrap();
        self.push(y, Op::Recompose { l, mu }, &[l, mu])
    }

    pub fn vmf_loss(&mut self, z: Var, mu: Var) -> Var {
        let d = self.value(z).shape()[1];
        let j = self.value(mu).shape()[0];
        let (loss, winners) = vmf::vmf_loss_rows(self.value(z).data(), self.value(mu).data(), d, j);
        self.push(Tensor::scalar(loss), Op::VmfLoss { z, mu, winners }, &[z, mu])
    }

    /// Soft Dice loss averaged over the batch images listed in `samples`.
    /// `truth` is the one-hot target for the whole batch.
    pub fn dice(&mut self, pred: Var, truth: &Tensor<T>, samples: &[usize]) -> Var {
        let (_, c, h, w) = self.value(pred).dims4();
        let stride = c * h * w;
        let mut grad = vec![T::zero(); self.value(pred).len()];
        let mut total = T::zero();
        let inv = T::one() / T::from_f64(samples.len().max(1) as f64);
        for &i in samples {
            let range = i * stride..(i + 1) * stride;
            let (loss, g) = dice_sample(&self.value(pred).data()[range.clone()], &truth.data()[range.clone()], c);
            total += loss;
            for (dst, gv) in grad[range].iter_mut().zip(g) {
                *dst = gv * inv;
            }
        }
        self.push(Tensor::scalar(total * inv), Op::Dice { pred, grad }, &[pred])
    }

    pub fn l1(&mut self, pred: Var, target: &Tensor<T>) -> Var {
        let (loss, grad) = l1_with_grad(self.value(pred).data(), target.data(), true);
        self.push(Tensor::scalar(loss), Op::L1 { pred, grad }, &[pred])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// `sum_k weight_k * term_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad, cols } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    g,
                    cols,
                    self.value(*x).shape(),
                    self.value(*w),
                    *pad,
                    self.tracked(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::ConvTranspose { x, w, b } => {
                let (dx, dw, db) = ops::conv_transpose2x2_backward(
                    g,
                    self.value(*x),
                    self.value(*w),
                    self.tracked(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, ops::max_pool2_backward(g, argmax, self.value(*x).shape()));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) =
                    ops::batch_norm_backward(g, xhat, inv_std, self.value(*gamma), *batch_stats);
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * y * (T::one() - y);
                }
                acc(*x, dx);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for chunk in g.data().chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                acc(*a, Tensor::from_vec(&[n, ca, h, w], ga).unwrap());
                acc(*b, Tensor::from_vec(&[n, cb, h, w], gb).unwrap());
            }
            Op::ToRows(x) => {
                let (n, _, h, w) = self.value(*x).dims4();
                acc(*x, rows_to_nchw(g, n, h, w));
            }
            Op::FromRows(x) => acc(*x, nchw_to_rows(g)),
            Op::NormalizeRows { x, norms } => {
                let shape = g.shape().to_vec();
                let dx = vmf::normalize_rows_backward(g.data(), node.value.data(), norms, shape[1]);
                acc(*x, Tensor::from_vec(&shape, dx).unwrap());
            }
            Op::Likelihood { z, mu, sigma, norm } => {
                let zv = self.value(*z);
                let muv = self.value(*mu);
                let (d, j) = (zv.shape()[1], muv.shape()[0]);
                let (dz, dmu) = vmf::likelihood_rows_backward(
                    g.data(),
                    node.value.data(),
                    zv.data(),
                    muv.data(),
                    d,
                    j,
                    *sigma,
                    *norm,
                );
                acc(*z, Tensor::from_vec(zv.shape(), dz).unwrap());
                acc(*mu, Tensor::from_vec(muv.shape(), dmu).unwrap());
            }
            Op::Recompose { l, mu } => {
                let lv = self.value(*l);
                let muv = self.value(*mu);
                let (j, d) = (muv.shape()[0], muv.shape()[1]);
                let (dl, dmu) = vmf::recompose_rows_backward(g.data(), lv.data(), muv.data(), d, j);
                acc(*l, Tensor::from_vec(lv.shape(), dl).unwrap());
                acc(*mu, Tensor::from_vec(muv.shape(), dmu).unwrap());
            }
            Op::VmfLoss { z, mu, winners } => {
                let zv = self.value(*z);
                let muv = self.value(*mu);
                let (d, j) = (zv.shape()[1], muv.shape()[0]);
                let (dz, dmu) =
                    vmf::vmf_loss_rows_backward(g.data()[0], winners, zv.data(), muv.data(), d, j);
                acc(*z, Tensor::from_vec(zv.shape(), dz).unwrap());
                acc(*mu, Tensor::from_vec(muv.shape(), dmu).unwrap());
            }
            Op::Dice { pred, grad } | Op::L1 { pred, grad } => {
                let s = g.data()[0];
                let d: Vec<T> = grad.iter().map(|&v| v * s).collect();
                acc(*pred, Tensor::from_vec(self.value(*pred).shape(), d).unwrap());
            }
            Op::SumSquares(x) => {
                let s = g.data()[0] + g.data()[0];
                acc(*x, self.value(*x).map(|v| v * s));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, Tensor::scalar(w * g.data()[0]));
                }
            }
        }
    }
}

pub fn nchw_to_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for (p, &v) in src.iter().enumerate() {
                out[(i * plane + p) * c + ch] = v;
            }
        }
    }
    Tensor::from_vec(&[n * plane, c], out).unwrap()
}

pub fn rows_to_nchw<T: Scalar>(x: &Tensor<T>, n: usize, h: usize, w: usize) -> Tensor<T> {
    let c = x.shape()[1];
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for p in 0..plane {
            let row = &x.data()[(i * plane + p) * c..(i * plane + p + 1) * c];
            for (ch, &v) in row.iter().enumerate() {
                out[(i * c + ch) * plane + p] = v;
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).unwrap()
}
