use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// out[m,n] = A[m,k] * B[k,n] with explicit row/col strides for A and B, so
/// transposed operands are views, never copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    out: &mut [f64],
) {
    debug_assert!(m > 0 && k > 0 && n > 0);
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(m * n <= out.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

/// Sums `g` (shape: lead x tail) over its leading axes down to length `tail`.
fn reduce_lead(g: &[f64], tail: usize) -> Vec<f64> {
    let mut out = vec![0.0; tail];
    for chunk in g.chunks_exact(tail) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_raw(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let r = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let stride_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut midx = vec![0usize; r];
    let mut in_off = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_off];
        for j in (0..r).rev() {
            midx[j] += 1;
            in_off += stride_for_out[j];
            if midx[j] < out_shape[j] {
                break;
            }
            in_off -= stride_for_out[j] * out_shape[j];
            midx[j] = 0;
        }
    }
    (out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Splits the axes of `shape` at `axis`: (product before, size at, product after).
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    // ---- arithmetic ----

    /// Elementwise sum; the smaller operand may broadcast over the leading
    /// axes of the larger (its shape must be a suffix of the other's).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (big, small, b_is_small) = if a.shape() == b.shape() || is_suffix(b.shape(), a.shape())
        {
            (a, b, true)
        } else if is_suffix(a.shape(), b.shape()) {
            (b, a, false)
        } else {
            return Err(shape_err("add", a.shape(), b.shape()));
        };
        let tail = small.len().max(1);
        let bd = big.data();
        let sd = small.data();
        let mut out = Vec::with_capacity(bd.len());
        for (i, v) in bd.iter().enumerate() {
            out.push(v + sd[i % tail]);
        }
        let shape = big.shape().to_vec();
        let (ia, ib) = (self.input_of(a)?, self.input_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let full_len = bd.len();
        let (need_big, need_small) = if b_is_small { (ia, ib) } else { (ib, ia) };
        let (need_big, need_small) = (need_big.is_some(), need_small.is_some());
        let vjp = Box::new(move |g: &[f64]| {
            let d_big = need_big.then(|| g.to_vec());
            let d_small = need_small.then(|| {
                if tail == full_len {
                    g.to_vec()
                } else {
                    reduce_lead(g, tail)
                }
            });
            if b_is_small {
                vec![d_big, d_small]
            } else {
                vec![d_small, d_big]
            }
        });
        self.record("add", shape, vec![ia, ib], vjp, Arc::new(out))
    }

    /// Elementwise difference, equal shapes.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("sub", a.shape(), b.shape()));
        }
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ia, ib) = (self.input_of(a)?, self.input_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Tensor::from_arc(a.shape().to_vec(), Arc::new(out), None));
        }
        let (need_a, need_b) = (ia.is_some(), ib.is_some());
        let vjp = Box::new(move |g: &[f64]| {
            vec![
                need_a.then(|| g.to_vec()),
                need_b.then(|| g.iter().map(|v| -v).collect()),
            ]
        });
        self.record("sub", a.shape().to_vec(), vec![ia, ib], vjp, Arc::new(out))
    }

    /// Elementwise product, equal shapes.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul", a.shape(), b.shape()));
        }
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ia, ib) = (self.input_of(a)?, self.input_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Tensor::from_arc(a.shape().to_vec(), Arc::new(out), None));
        }
        let (need_a, need_b) = (ia.is_some(), ib.is_some());
        let av = Arc::clone(a.data_arc());
        let bv = Arc::clone(b.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            vec![
                need_a.then(|| g.iter().zip(bv.iter()).map(|(g, b)| g * b).collect()),
                need_b.then(|| g.iter().zip(av.iter()).map(|(g, a)| g * a).collect()),
            ]
        });
        self.record("mul", a.shape().to_vec(), vec![ia, ib], vjp, Arc::new(out))
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let vjp =
            Box::new(move |g: &[f64]| vec![Some(g.iter().map(|v| v * c).collect::<Vec<f64>>())]);
        self.record("scale", x.shape().to_vec(), vec![ix], vjp, Arc::new(out))
    }

    // ---- matrix products ----

    /// a [.., m, k] x b [k, n] -> [.., m, n]; leading axes of `a` fold into
    /// one GEMM call.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let k = b.shape()[0];
        let n = b.shape()[1];
        if k == 0 || n == 0 || a.is_empty() {
            return Err(Error::argument("matmul: zero-sized operand"));
        }
        let m_fold = a.len() / k;
        let mut out = vec![0.0; m_fold * n];
        gemm(m_fold, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (ia, ib) = (self.input_of(a)?, self.input_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let (need_a, need_b) = (ia.is_some(), ib.is_some());
        let av = Arc::clone(a.data_arc());
        let bv = Arc::clone(b.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            let da = need_a.then(|| {
                let mut d = vec![0.0; m_fold * k];
                gemm(m_fold, n, k, g, n as isize, 1, &bv, 1, n as isize, &mut d);
                d
            });
            let db = need_b.then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m_fold, n, &av, 1, k as isize, g, n as isize, 1, &mut d);
                d
            });
            vec![da, db]
        });
        self.record("matmul", shape, vec![ia, ib], vjp, Arc::new(out))
    }

    /// a [.., m, k] x w^T for w [n, k] -> [.., m, n]. The transpose is a
    /// stride view; this is the fast path for `x W^T` with [out x in] weights.
    pub fn matmul_nt(&self, a: &Tensor, w: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || w.rank() != 2 || a.shape()[a.rank() - 1] != w.shape()[1] {
            return Err(shape_err("matmul_nt", a.shape(), w.shape()));
        }
        let n = w.shape()[0];
        let k = w.shape()[1];
        if k == 0 || n == 0 || a.is_empty() {
            return Err(Error::argument("matmul_nt: zero-sized operand"));
        }
        let m_fold = a.len() / k;
        let mut out = vec![0.0; m_fold * n];
        gemm(m_fold, k, n, a.data(), k as isize, 1, w.data(), 1, k as isize, &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (ia, iw) = (self.input_of(a)?, self.input_of(w)?);
        if ia.is_none() && iw.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let (need_a, need_w) = (ia.is_some(), iw.is_some());
        let av = Arc::clone(a.data_arc());
        let wv = Arc::clone(w.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            let da = need_a.then(|| {
                let mut d = vec![0.0; m_fold * k];
                gemm(m_fold, n, k, g, n as isize, 1, &wv, k as isize, 1, &mut d);
                d
            });
            let dw = need_w.then(|| {
                let mut d = vec![0.0; n * k];
                gemm(n, m_fold, k, g, 1, n as isize, &av, k as isize, 1, &mut d);
                d
            });
            vec![da, dw]
        });
        self.record("matmul_nt", shape, vec![ia, iw], vjp, Arc::new(out))
    }

    /// Batched product: a [.., m, k] x b [.., k, n] with equal leading axes.
    pub fn bmm(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let r = a.rank();
        if r < 2
            || b.rank() != r
            || a.shape()[..r - 2] != b.shape()[..r - 2]
            || a.shape()[r - 1] != b.shape()[r - 2]
        {
            return Err(shape_err("bmm", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::argument("bmm: zero-sized operand"));
        }
        let lead: usize = a.shape()[..r - 2].iter().product();
        let mut out = vec![0.0; lead * m * n];
        for l in 0..lead {
            gemm(
                m,
                k,
                n,
                &a.data()[l * m * k..],
                k as isize,
                1,
                &b.data()[l * k * n..],
                n as isize,
                1,
                &mut out[l * m * n..],
            );
        }
        let mut shape = a.shape().to_vec();
        shape[r - 1] = n;
        let (ia, ib) = (self.input_of(a)?, self.input_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let (need_a, need_b) = (ia.is_some(), ib.is_some());
        let av = Arc::clone(a.data_arc());
        let bv = Arc::clone(b.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            let da = need_a.then(|| {
                let mut d = vec![0.0; lead * m * k];
                for l in 0..lead {
                    gemm(
                        m,
                        n,
                        k,
                        &g[l * m * n..],
                        n as isize,
                        1,
                        &bv[l * k * n..],
                        1,
                        n as isize,
                        &mut d[l * m * k..],
                    );
                }
                d
            });
            let db = need_b.then(|| {
                let mut d = vec![0.0; lead * k * n];
                for l in 0..lead {
                    gemm(
                        k,
                        m,
                        n,
                        &av[l * m * k..],
                        1,
                        k as isize,
                        &g[l * m * n..],
                        n as isize,
                        1,
                        &mut d[l * k * n..],
                    );
                }
                d
            });
            vec![da, db]
        });
        self.record("bmm", shape, vec![ia, ib], vjp, Arc::new(out))
    }

    /// Batched a [.., m, k] x b^T per leading index for b [.., n, k].
    pub fn bmm_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let r = a.rank();
        if r < 2
            || b.rank() != r
            || a.shape()[..r - 2] != b.shape()[..r - 2]
            || a.shape()[r - 1] != b.shape()[r - 1]
        {
            return Err(shape_err("bmm_nt", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 2]);
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::argument("bmm_nt: zero-sized operand"));
        }
        let lead: usize = a.shape()[..r - 2].iter().product();
        let mut out = vec![0.0; lead * m * n];
        for l in 0..lead {
            gemm(
                m,
                k,
                n,
                &a.data()[l * m * k..],
                k as isize,
                1,
                &b.data()[l * n * k..],
                1,
                k as isize,
                &mut out[l * m * n..],
            );
        }
        let mut shape = a.shape().to_vec();
        shape[r - 1] = n;
        let (ia, ib) = (self.input_of(a)?, self.input_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let (need_a, need_b) = (ia.is_some(), ib.is_some());
        let av = Arc::clone(a.data_arc());
        let bv = Arc::clone(b.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            let da = need_a.then(|| {
                let mut d = vec![0.0; lead * m * k];
                for l in 0..lead {
                    gemm(
                        m,
                        n,
                        k,
                        &g[l * m * n..],
                        n as isize,
                        1,
                        &bv[l * n * k..],
                        k as isize,
                        1,
                        &mut d[l * m * k..],
                    );
                }
                d
            });
            let db = need_b.then(|| {
                let mut d = vec![0.0; lead * n * k];
                for l in 0..lead {
                    gemm(
                        n,
                        m,
                        k,
                        &g[l * m * n..],
                        1,
                        n as isize,
                        &av[l * m * k..],
                        k as isize,
                        1,
                        &mut d[l * n * k..],
                    );
                }
                d
            });
            vec![da, db]
        });
        self.record("bmm_nt", shape, vec![ia, ib], vjp, Arc::new(out))
    }

    // ---- shape ops ----

    /// Concatenation along `axis`; operands agree on every other axis.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::argument("concat: no operands"))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::argument(format!(
                "concat: axis {axis} out of range for rank {r}"
            )));
        }
        for p in parts {
            let same = p.rank() == r
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = axis_blocks(first.shape(), axis);
        let axis_dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let out_axis: usize = axis_dims.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = out_axis;
        let out_block = out_axis * inner;
        let mut out = vec![0.0; outer * out_block];
        for o in 0..outer {
            let mut off = 0;
            for (p, &d) in parts.iter().zip(&axis_dims) {
                let block = d * inner;
                out[o * out_block + off..o * out_block + off + block]
                    .copy_from_slice(&p.data()[o * block..(o + 1) * block]);
                off += block;
            }
        }
        let inputs = parts
            .iter()
            .map(|p| self.input_of(p))
            .collect::<Result<Vec<_>>>()?;
        if inputs.iter().all(|i| i.is_none()) {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let needs: Vec<bool> = inputs.iter().map(|i| i.is_some()).collect();
        let vjp = Box::new(move |g: &[f64]| {
            let mut offs = Vec::with_capacity(axis_dims.len());
            let mut acc = 0;
            for &d in &axis_dims {
                offs.push(acc);
                acc += d * inner;
            }
            needs
                .iter()
                .zip(axis_dims.iter().zip(&offs))
                .map(|(&need, (&d, &off))| {
                    need.then(|| {
                        let block = d * inner;
                        let mut dp = vec![0.0; outer * block];
                        for o in 0..outer {
                            dp[o * block..(o + 1) * block].copy_from_slice(
                                &g[o * out_block + off..o * out_block + off + block],
                            );
                        }
                        dp
                    })
                })
                .collect()
        });
        self.record("concat", shape, inputs, vjp, Arc::new(out))
    }

    /// Contiguous sub-range [start, start+len) along `axis`.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let r = x.rank();
        if axis >= r {
            return Err(Error::argument(format!(
                "slice: axis {axis} out of range for rank {r}"
            )));
        }
        let dim = x.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::argument(format!(
                "slice: range {start}..{} outside axis of size {dim}",
                start + len
            )));
        }
        let (outer, _, inner) = axis_blocks(x.shape(), axis);
        let in_block = dim * inner;
        let out_block = len * inner;
        let mut out = vec![0.0; outer * out_block];
        for o in 0..outer {
            out[o * out_block..(o + 1) * out_block].copy_from_slice(
                &x.data()[o * in_block + start * inner..o * in_block + (start + len) * inner],
            );
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let total = x.len();
        let vjp = Box::new(move |g: &[f64]| {
            let mut d = vec![0.0; total];
            for o in 0..outer {
                d[o * in_block + start * inner..o * in_block + (start + len) * inner]
                    .copy_from_slice(&g[o * out_block..(o + 1) * out_block]);
            }
            vec![Some(d)]
        });
        self.record("slice", shape, vec![ix], vjp, Arc::new(out))
    }

    /// Axis permutation: output axis j is input axis perm[j].
    pub fn permute(&self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let r = x.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || !perm.iter().all(|&p| p < r && !std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::argument(format!(
                "permute: {perm:?} is not a permutation of 0..{r}"
            )));
        }
        let (shape, out) = permute_raw(x.shape(), x.data(), perm);
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let inv = invert_perm(perm);
        let out_shape = shape.clone();
        let vjp = Box::new(move |g: &[f64]| vec![Some(permute_raw(&out_shape, g, &inv).1)]);
        self.record("permute", shape, vec![ix], vjp, Arc::new(out))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 {
            return Err(Error::argument("transpose: rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Same elements, new shape; shares storage.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(shape_err("reshape", x.shape(), shape));
        }
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(
                shape.to_vec(),
                Arc::clone(x.data_arc()),
                None,
            ));
        }
        let vjp = Box::new(move |g: &[f64]| vec![Some(g.to_vec())]);
        self.record(
            "reshape",
            shape.to_vec(),
            vec![ix],
            vjp,
            Arc::clone(x.data_arc()),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::scalar(s));
        }
        let n = x.len();
        let vjp = Box::new(move |g: &[f64]| vec![Some(vec![g[0]; n])]);
        self.record("sum_all", vec![], vec![ix], vjp, Arc::new(vec![s]))
    }

    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.len();
        if n == 0 {
            return Err(Error::argument("mean_all: empty tensor"));
        }
        let m: f64 = x.data().iter().sum::<f64>() / n as f64;
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::scalar(m));
        }
        let vjp = Box::new(move |g: &[f64]| vec![Some(vec![g[0] / n as f64; n])]);
        self.record("mean_all", vec![], vec![ix], vjp, Arc::new(vec![m]))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let r = x.rank();
        if axis >= r {
            return Err(Error::argument(format!(
                "sum_axis: axis {axis} out of range for rank {r}"
            )));
        }
        let (outer, dim, inner) = axis_blocks(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(shape, Arc::new(out), None));
        }
        let vjp = Box::new(move |g: &[f64]| {
            let mut d = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for dd in 0..dim {
                    let base = (o * dim + dd) * inner;
                    d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(d)]
        });
        self.record("sum_axis", shape, vec![ix], vjp, Arc::new(out))
    }

    pub fn mean_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let r = x.rank();
        if axis >= r {
            return Err(Error::argument(format!(
                "mean_axis: axis {axis} out of range for rank {r}"
            )));
        }
        let dim = x.shape()[axis];
        if dim == 0 {
            return Err(Error::argument("mean_axis: empty axis"));
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(&s, 1.0 / dim as f64)
    }

    // ---- activations ----

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let vjp = Box::new(move |g: &[f64]| {
            vec![Some(
                g.iter()
                    .zip(y.iter())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect::<Vec<f64>>(),
            )]
        });
        self.record("tanh", x.shape().to_vec(), vec![ix], vjp, out)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let vjp = Box::new(move |g: &[f64]| {
            vec![Some(
                g.iter()
                    .zip(y.iter())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect::<Vec<f64>>(),
            )]
        });
        self.record("sigmoid", x.shape().to_vec(), vec![ix], vjp, out)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let xv = Arc::clone(x.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            vec![Some(
                g.iter()
                    .zip(xv.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect::<Vec<f64>>(),
            )]
        });
        self.record("relu", x.shape().to_vec(), vec![ix], vjp, Arc::new(out))
    }

    /// Row-wise softmax over the last axis, max-shifted for stability.
    pub fn softmax(&self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        if r == 0 || x.shape()[r - 1] == 0 {
            return Err(Error::argument("softmax: empty last axis"));
        }
        let n = x.shape()[r - 1];
        let mut out = vec![0.0; x.len()];
        for (row, orow) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let vjp = Box::new(move |g: &[f64]| {
            let mut d = vec![0.0; g.len()];
            for ((grow, yrow), drow) in g
                .chunks_exact(n)
                .zip(y.chunks_exact(n))
                .zip(d.chunks_exact_mut(n))
            {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(d)]
        });
        self.record("softmax", x.shape().to_vec(), vec![ix], vjp, out)
    }

    /// Normalizes the last axis to zero mean, unit variance (biased, eps in
    /// the denominator), then applies the per-feature affine gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let r = x.rank();
        if r == 0 || x.shape()[r - 1] == 0 {
            return Err(Error::argument("layer_norm: empty feature axis"));
        }
        let n = x.shape()[r - 1];
        if gain.shape() != [n] {
            return Err(shape_err("layer_norm", x.shape(), gain.shape()));
        }
        if bias.shape() != [n] {
            return Err(shape_err("layer_norm", x.shape(), bias.shape()));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::argument("layer_norm: eps must be positive"));
        }
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let gv = gain.data();
        let bv = bias.data();
        let mut out = vec![0.0; x.len()];
        for row in 0..rows {
            let xs = &x.data()[row * n..(row + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[row] = inv;
            for j in 0..n {
                let xh = (xs[j] - mean) * inv;
                xhat[row * n + j] = xh;
                out[row * n + j] = xh * gv[j] + bv[j];
            }
        }
        let (ix, igain, ibias) = (
            self.input_of(x)?,
            self.input_of(gain)?,
            self.input_of(bias)?,
        );
        if ix.is_none() && igain.is_none() && ibias.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let (need_x, need_gain, need_bias) = (ix.is_some(), igain.is_some(), ibias.is_some());
        let xhat = Arc::new(xhat);
        let gain_v = Arc::clone(gain.data_arc());
        let vjp = Box::new(move |g: &[f64]| {
            let dx = need_x.then(|| {
                let mut d = vec![0.0; g.len()];
                for row in 0..rows {
                    let gs = &g[row * n..(row + 1) * n];
                    let xh = &xhat[row * n..(row + 1) * n];
                    let mut sum_gg = 0.0;
                    let mut sum_gg_xh = 0.0;
                    for j in 0..n {
                        let gg = gs[j] * gain_v[j];
                        sum_gg += gg;
                        sum_gg_xh += gg * xh[j];
                    }
                    let inv = inv_std[row];
                    for j in 0..n {
                        let gg = gs[j] * gain_v[j];
                        d[row * n + j] =
                            inv / n as f64 * (n as f64 * gg - sum_gg - xh[j] * sum_gg_xh);
                    }
                }
                d
            });
            let dgain = need_gain.then(|| {
                let mut d = vec![0.0; n];
                for row in 0..rows {
                    for j in 0..n {
                        d[j] += g[row * n + j] * xhat[row * n + j];
                    }
                }
                d
            });
            let dbias = need_bias.then(|| reduce_lead(g, n));
            vec![dx, dgain, dbias]
        });
        self.record(
            "layer_norm",
            x.shape().to_vec(),
            vec![ix, igain, ibias],
            vjp,
            Arc::new(out),
        )
    }

    /// Inverted dropout: in training, zeroes each element with probability p
    /// and scales survivors by 1/(1-p); identity in eval mode or at p=0.
    /// Draws one uniform f64 per element in row-major order.
    pub fn dropout<R: Rng>(
        &self,
        x: &Tensor,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::argument(format!("dropout: p={p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f64> = x.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ix = self.input_of(x)?;
        if ix.is_none() {
            return Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(out), None));
        }
        let mask = Arc::new(mask);
        let vjp = Box::new(move |g: &[f64]| {
            vec![Some(
                g.iter()
                    .zip(mask.iter())
                    .map(|(g, m)| g * m)
                    .collect::<Vec<f64>>(),
            )]
        });
        self.record("dropout", x.shape().to_vec(), vec![ix], vjp, Arc::new(out))
    }
}
