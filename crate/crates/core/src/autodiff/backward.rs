use super::ops::{for_each_strided, gelu_grad, matmul_dims, reduce_broadcast};
use super::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides};

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Graph<T> {
    /// Pushes the upstream gradient `g` of node `i` into its inputs.
    pub(crate) fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let live = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if live(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if live(*b) {
                    let gb = if self.value(*b).rank() == 0 && node.value.rank() != 0 {
                        vec![sign * g.iter().copied().sum::<T>()]
                    } else {
                        g.iter().map(|&x| sign * x).collect()
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let b_scalar = bv.rank() == 0 && av.rank() != 0;
                if live(*a) {
                    let ga = if b_scalar {
                        let y = bv.item();
                        g.iter().map(|&x| x * y).collect()
                    } else {
                        g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect()
                    };
                    accumulate(grads, *a, ga);
                }
                if live(*b) {
                    let gb = if b_scalar {
                        vec![g.iter().zip(av.data()).map(|(&x, &y)| x * y).sum::<T>()]
                    } else {
                        g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect()
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &v)| x * gelu_grad(v))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(node.value.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, ga);
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, grads),
            Op::Softmax(x) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(w).zip(node.value.data().chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(w).zip(node.value.data().chunks(w)).zip(gx.chunks_mut(w)) {
                    let total = gr.iter().copied().sum::<T>();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if live(*gain) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if live(*bias) {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if live(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            gx.push(r * (gr[j] * gv[j] - m1 - hr[j] * m2));
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::BroadcastTo(x) => {
                let gx = reduce_broadcast(g, node.value.shape(), self.shape(*x));
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute(x, perm) => {
                let in_strides = strides(self.shape(*x));
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut gx = vec![T::zero(); g.len()];
                for_each_strided(node.value.shape(), &src_strides, |d, s| gx[s] = g[d]);
                accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let mut pieces: Vec<Vec<T>> = parts.iter().map(|p| Vec::with_capacity(self.value(*p).numel())).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, piece) in parts.iter().zip(pieces.iter_mut()) {
                        let chunk = self.shape(*p)[*axis] * inner;
                        piece.extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (p, piece) in parts.iter().zip(pieces) {
                    if live(*p) {
                        accumulate(grads, *p, piece);
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let mut gx = vec![T::zero(); numel(shape)];
                let mut src = 0;
                for o in 0..outer {
                    for &idx in indices {
                        let start = (o * shape[*axis] + idx) * inner;
                        for j in 0..inner {
                            gx[start + j] += g[src + j];
                        }
                        src += inner;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(d).zip(node.value.data().chunks(d)).zip(norms) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * dot) / n));
                }
                accumulate(grads, *x, gx);
            }
            Op::Custom { x, backward } => {
                let gx = backward(self.value(*x), &node.value, g);
                accumulate(grads, *x, gx);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape(), trans_b).expect("validated in forward");
        let (m, k, n) = (d.m, d.k, d.n);
        let one = T::one();
        if self.nodes[a.0].requires_grad {
            // da = g · opᵀ(b)
            let mut ga = vec![T::zero(); av.numel()];
            let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
            if d.shared_b {
                T::gemm(d.batch * m, n, k, one, g, n as isize, 1, bv.data(), rsb, csb, T::zero(), &mut ga, k as isize, 1);
            } else {
                for bi in 0..d.batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        one,
                        &g[bi * m * n..],
                        n as isize,
                        1,
                        &bv.data()[bi * k * n..],
                        rsb,
                        csb,
                        T::zero(),
                        &mut ga[bi * m * k..],
                        k as isize,
                        1,
                    );
                }
            }
            accumulate(grads, a, ga);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = vec![T::zero(); bv.numel()];
            let (rows, batches) = if d.shared_b { (d.batch * m, 1) } else { (m, d.batch) };
            for bi in 0..batches {
                let a_blk = &av.data()[bi * m * k..];
                let g_blk = &g[bi * m * n..];
                let out = &mut gb[if d.shared_b { 0 } else { bi * k * n }..];
                if trans_b {
                    // db[n×k] = gᵀ · a
                    T::gemm(n, rows, k, one, g_blk, 1, n as isize, a_blk, k as isize, 1, one, out, k as isize, 1);
                } else {
                    // db[k×n] = aᵀ · g
                    T::gemm(k, rows, n, one, a_blk, 1, k as isize, g_blk, n as isize, 1, one, out, n as isize, 1);
                }
            }
            accumulate(grads, b, gb);
        }
    }
}
