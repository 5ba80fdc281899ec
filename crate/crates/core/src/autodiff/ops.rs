use super::{CustomBackward, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_strides, broadcastable, numel, strides, Tensor};

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Shape bookkeeping for (batched) matrix products.
pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_b: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatDims> {
    let err = || Error::shapes("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(err());
    }
    let lead = &a[..a.len() - 2];
    let shared_b = b.len() == 2;
    if !shared_b && (b.len() != a.len() || &b[..b.len() - 2] != lead) {
        return Err(err());
    }
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, n]);
    Ok(MatDims {
        batch: numel(lead),
        m,
        k,
        n,
        shared_b,
        out_shape,
    })
}

/// Visits `dst` in row-major order of `shape`, yielding source offsets
/// computed from `src_strides`.
pub(crate) fn for_each_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.rank() == 0 {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else {
            return Err(Error::shapes(name, av.shape(), bv.shape()));
        };
        Ok((out, self.rg(&[a, b])))
    }

    /// Elementwise sum; `b` may also be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    /// `a @ b` with `a: [.., m, k]` and `b: [k, n]` (shared) or `[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` with `b: [n, k]` or `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape(), trans_b)?;
        let mut out = vec![T::zero(); numel(&d.out_shape)];
        let (rsb, csb) = if trans_b { (1, d.k as isize) } else { (d.n as isize, 1) };
        if d.shared_b {
            T::gemm(
                d.batch * d.m,
                d.k,
                d.n,
                T::one(),
                av.data(),
                d.k as isize,
                1,
                bv.data(),
                rsb,
                csb,
                T::zero(),
                &mut out,
                d.n as isize,
                1,
            );
        } else {
            for bi in 0..d.batch {
                T::gemm(
                    d.m,
                    d.k,
                    d.n,
                    T::one(),
                    &av.data()[bi * d.m * d.k..],
                    d.k as isize,
                    1,
                    &bv.data()[bi * d.k * d.n..],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * d.m * d.n..],
                    d.n as isize,
                    1,
                );
            }
        }
        let v = Tensor::new(d.out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap_or(&1);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Softmax along the last axis after adding `bias`, which broadcasts
    /// over the leading dimensions of `x`.
    pub fn softmax_rows(&mut self, x: Var, bias: Option<Var>) -> Result<Var> {
        let logits = match bias {
            Some(b) => {
                let shape = self.shape(x).to_vec();
                let bb = self.broadcast_to(b, &shape)?;
                self.add(x, bb)?
            }
            None => x,
        };
        if self.shape(logits).last().copied().unwrap_or(0) == 0 {
            return Err(Error::invalid("softmax_rows", "last dimension must be at least 1"));
        }
        Ok(self.softmax(logits))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap_or(&1);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// Per-vector normalization over the last axis, then `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shapes("layer_norm", xv.shape(), self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.value(x).broadcast_to(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::BroadcastTo(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shapes("permute", xv.shape(), perm));
        }
        let in_strides = strides(xv.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![T::zero(); xv.numel()];
        let src = xv.data();
        for_each_strided(&out_shape, &src_strides, |d, s| data[d] = src[s]);
        let v = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(out_shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Gathers `indices` (repeats allowed) along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("index_select", format!("axis {axis} out of range for {shape:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::invalid(
                "index_select",
                format!("index {bad} out of range for axis {axis} of {shape:?}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &i in indices {
                let start = (o * shape[axis] + i) * inner;
                data.extend_from_slice(&xv.data()[start..start + inner]);
            }
        }
        let v = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// Unit-norm rows along the last axis; zero rows are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(xv.numel() / d.max(1));
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::invalid("l2_normalize", "zero vector has no direction"));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::L2Normalize { x, norms }, rg))
    }

    /// Forward identity whose backward edge is cut.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// A unary op with user supplied forward values and vector-Jacobian product.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        let v = forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Custom { x, backward }, rg)
    }
}

pub(crate) fn reduce_broadcast<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    debug_assert!(broadcastable(in_shape, out_shape));
    let src_strides = broadcast_strides(in_shape, out_shape);
    let mut acc = vec![T::zero(); numel(in_shape)];
    for_each_strided(out_shape, &src_strides, |d, s| acc[s] += g[d]);
    acc
}
