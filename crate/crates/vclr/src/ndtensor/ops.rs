//! Differentiable operations. Each op computes its forward value eagerly and
//! registers a closure that scatters the output gradient to its parents.

use super::tensor::{accumulate_grad, Tensor, TensorError};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes, right-aligned.
fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// For every element of `out_shape`, the linear index into an operand of
/// `in_shape` under broadcasting. Built once per op and reused by backward.
fn broadcast_index_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<u32> {
    let out_n = numel(out_shape);
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = row_strides(in_shape);
    let mut map = vec![0u32; out_n];
    let mut idx = vec![0usize; rank];
    for (lin, slot) in map.iter_mut().enumerate() {
        let mut rem = lin;
        for (i, &dim) in out_shape.iter().enumerate() {
            let stride: usize = out_shape[i + 1..].iter().product();
            idx[i] = rem / stride;
            rem %= stride;
            let _ = dim;
        }
        let mut pos = 0usize;
        for i in offset..rank {
            let d = in_shape[i - offset];
            let coord = if d == 1 { 0 } else { idx[i] };
            pos += coord * in_strides[i - offset];
        }
        *slot = pos as u32;
    }
    map
}

// ---------------------------------------------------------------------------
// binary elementwise

/// dfa/dfb: local derivative of the output wrt a/b given both input values.
fn binary_op(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor, TensorError> {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (pa, pb) = (a.clone(), b.clone());
        let shape = a.shape().to_vec();
        return Ok(Tensor::from_op(
            data,
            shape,
            vec![a.clone(), b.clone()],
            Box::new(move |dy| {
                if pa.requires_grad() {
                    let contrib: Vec<f64> = dy
                        .iter()
                        .zip(pa.data().iter().zip(pb.data()))
                        .map(|(&g, (&x, &y))| g * dfa(x, y))
                        .collect();
                    accumulate_grad(&pa, &contrib);
                }
                if pb.requires_grad() {
                    let contrib: Vec<f64> = dy
                        .iter()
                        .zip(pa.data().iter().zip(pb.data()))
                        .map(|(&g, (&x, &y))| g * dfb(x, y))
                        .collect();
                    accumulate_grad(&pb, &contrib);
                }
            }),
        ));
    }

    // bias-style broadcast (b equals a's trailing dims) skips the index maps
    let suffix = b.shape().len() < a.shape().len()
        && !b.shape().is_empty()
        && a.shape()[a.shape().len() - b.shape().len()..] == *b.shape();
    if suffix {
        let bn = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(bn) {
            for (&x, &y) in chunk.iter().zip(b.data()) {
                data.push(f(x, y));
            }
        }
        let (pa, pb) = (a.clone(), b.clone());
        let shape = a.shape().to_vec();
        return Ok(Tensor::from_op(
            data,
            shape,
            vec![a.clone(), b.clone()],
            Box::new(move |dy| {
                if pa.requires_grad() {
                    let mut contrib = Vec::with_capacity(pa.numel());
                    for (chunk, dchunk) in
                        pa.data().chunks_exact(bn).zip(dy.chunks_exact(bn))
                    {
                        for ((&x, &y), &g) in chunk.iter().zip(pb.data()).zip(dchunk) {
                            contrib.push(g * dfa(x, y));
                        }
                    }
                    accumulate_grad(&pa, &contrib);
                }
                if pb.requires_grad() {
                    let mut contrib = vec![0.0; bn];
                    for (chunk, dchunk) in
                        pa.data().chunks_exact(bn).zip(dy.chunks_exact(bn))
                    {
                        for (j, (&x, &g)) in chunk.iter().zip(dchunk).enumerate() {
                            contrib[j] += g * dfb(x, pb.data()[j]);
                        }
                    }
                    accumulate_grad(&pb, &contrib);
                }
            }),
        ));
    }

    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let map_a = broadcast_index_map(&out_shape, a.shape());
    let map_b = broadcast_index_map(&out_shape, b.shape());
    let data: Vec<f64> = map_a
        .iter()
        .zip(&map_b)
        .map(|(&ia, &ib)| f(a.data()[ia as usize], b.data()[ib as usize]))
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |dy| {
            if pa.requires_grad() {
                let mut contrib = vec![0.0; pa.numel()];
                for (o, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
                    contrib[ia as usize] +=
                        dy[o] * dfa(pa.data()[ia as usize], pb.data()[ib as usize]);
                }
                accumulate_grad(&pa, &contrib);
            }
            if pb.requires_grad() {
                let mut contrib = vec![0.0; pb.numel()];
                for (o, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
                    contrib[ib as usize] +=
                        dy[o] * dfb(pa.data()[ia as usize], pb.data()[ib as usize]);
                }
                accumulate_grad(&pb, &contrib);
            }
        }),
    ))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_op("add", self, other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_op("sub", self, other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_op("mul", self, other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if let Some(&z) = other.data().iter().find(|&&v| v == 0.0) {
            return Err(TensorError::Domain { op: "div", value: z });
        }
        binary_op(
            "div",
            self,
            other,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    /// Elementwise max; on ties the gradient goes to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_op(
            "maximum",
            self,
            other,
            |x, y| x.max(y),
            |x, y| if x >= y { 1.0 } else { 0.0 },
            |x, y| if x >= y { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise min; on ties the gradient goes to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_op(
            "minimum",
            self,
            other,
            |x, y| x.min(y),
            |x, y| if x <= y { 1.0 } else { 0.0 },
            |x, y| if x <= y { 0.0 } else { 1.0 },
        )
    }
}

// ---------------------------------------------------------------------------
// unary elementwise

/// Builds a unary result whose per-element derivative was precomputed.
fn unary_from(x: &Tensor, data: Vec<f64>, deriv: Vec<f64>) -> Tensor {
    let px = x.clone();
    let shape = x.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![x.clone()],
        Box::new(move |dy| {
            let contrib: Vec<f64> = dy.iter().zip(&deriv).map(|(&g, &d)| g * d).collect();
            accumulate_grad(&px, &contrib);
        }),
    )
}

impl Tensor {
    /// `a * x + b`, the one scalar op everything else shells out to.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| a * x + b).collect();
        let px = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dy| {
                let contrib: Vec<f64> = dy.iter().map(|&g| g * a).collect();
                accumulate_grad(&px, &contrib);
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn add_scalar(&self, b: f64) -> Tensor {
        self.affine(1.0, b)
    }

    pub fn mul_scalar(&self, a: f64) -> Tensor {
        self.affine(a, 0.0)
    }

    /// `c - x`.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.affine(-1.0, c)
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.exp()).collect();
        let deriv = data.clone();
        unary_from(self, data, deriv)
    }

    pub fn log(&self) -> Result<Tensor, TensorError> {
        if let Some(&bad) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        let data: Vec<f64> = self.data().iter().map(|x| x.ln()).collect();
        let deriv: Vec<f64> = self.data().iter().map(|x| 1.0 / x).collect();
        Ok(unary_from(self, data, deriv))
    }

    pub fn sqrt(&self) -> Result<Tensor, TensorError> {
        if let Some(&bad) = self.data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt", value: bad });
        }
        let data: Vec<f64> = self.data().iter().map(|x| x.sqrt()).collect();
        let deriv: Vec<f64> = data.iter().map(|&y| 0.5 / y).collect();
        Ok(unary_from(self, data, deriv))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let deriv: Vec<f64> = data.iter().map(|&y| y * (1.0 - y)).collect();
        unary_from(self, data, deriv)
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let deriv: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect();
        unary_from(self, data, deriv)
    }

    /// `ln(1 + e^x)`, computed stably for large |x|.
    pub fn softplus(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let deriv: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        unary_from(self, data, deriv)
    }

    /// |x|, with zero derivative at the kink.
    pub fn abs(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.abs()).collect();
        let deriv: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        unary_from(self, data, deriv)
    }
}

// ---------------------------------------------------------------------------
// matrix multiplication

/// out += a[m,k] · b[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[m,k] · b[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// out += a[m,k]ᵀ · c[m,n]
fn mm_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    b_transposed: bool,
) -> Result<MatDims, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return Err(mismatch());
    }
    let (batch, off) = if sa.len() == 3 {
        if sa[0] != sb[0] {
            return Err(mismatch());
        }
        (sa[0], 1)
    } else {
        (1, 0)
    };
    let (m, k) = (sa[off], sa[off + 1]);
    let (bk, n) = if b_transposed {
        (sb[off + 1], sb[off])
    } else {
        (sb[off], sb[off + 1])
    };
    if k != bk {
        return Err(mismatch());
    }
    let out_shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
    Ok(MatDims { batch, m, k, n, out_shape })
}

impl Tensor {
    /// `self · other` for 2-D, or per-batch for matching 3-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let d = matmul_dims("matmul", self, other, false)?;
        let MatDims { batch, m, k, n, out_shape } = d;
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_nn(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |dy| {
                if pa.requires_grad() {
                    let mut da = vec![0.0; pa.numel()];
                    for bi in 0..batch {
                        mm_nt(
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &pb.data()[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    accumulate_grad(&pa, &da);
                }
                if pb.requires_grad() {
                    let mut db = vec![0.0; pb.numel()];
                    for bi in 0..batch {
                        mm_tn(
                            &pa.data()[bi * m * k..(bi + 1) * m * k],
                            &dy[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    accumulate_grad(&pb, &db);
                }
            }),
        ))
    }

    /// `self · otherᵀ` (transpose on the last two axes), fused so attention
    /// scores never materialize a permuted key tensor.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let d = matmul_dims("matmul_nt", self, other, true)?;
        let MatDims { batch, m, k, n, out_shape } = d;
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_nt(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * n * k..(bi + 1) * n * k],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |dy| {
                if pa.requires_grad() {
                    let mut da = vec![0.0; pa.numel()];
                    for bi in 0..batch {
                        mm_nn(
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &pb.data()[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    accumulate_grad(&pa, &da);
                }
                if pb.requires_grad() {
                    let mut db = vec![0.0; pb.numel()];
                    for bi in 0..batch {
                        mm_tn(
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &pa.data()[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut db[bi * n * k..(bi + 1) * n * k],
                        );
                    }
                    accumulate_grad(&pb, &db);
                }
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// shape manipulation

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.numel() {
            return Err(TensorError::InvalidArgument {
                op: "reshape",
                shape: self.shape().to_vec(),
                msg: format!("cannot reshape to {shape:?}"),
            });
        }
        let px = self.clone();
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |dy| accumulate_grad(&px, dy)),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                shape: self.shape().to_vec(),
                msg: format!("invalid axes {axes:?}"),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = row_strides(&in_shape);
        let out_strides = row_strides(&out_shape);
        let n = self.numel();
        let mut data = vec![0.0; n];
        // walk output linearly, gather from the permuted input position
        let mut src_of_dst = vec![0u32; n];
        for (dst, slot) in src_of_dst.iter_mut().enumerate() {
            let mut rem = dst;
            let mut src = 0usize;
            for (i, &os) in out_strides.iter().enumerate() {
                let coord = rem / os;
                rem %= os;
                src += coord * in_strides[axes[i]];
            }
            *slot = src as u32;
        }
        for (dst, &src) in src_of_dst.iter().enumerate() {
            data[dst] = self.data()[src as usize];
        }
        let px = self.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut contrib = vec![0.0; px.numel()];
                for (dst, &src) in src_of_dst.iter().enumerate() {
                    contrib[src as usize] += dy[dst];
                }
                accumulate_grad(&px, &contrib);
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose2(&self) -> Result<Tensor, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose2",
                shape: self.shape().to_vec(),
                msg: "needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = tensors.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            shape: vec![],
            msg: "empty input list".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                shape: first.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0usize;
        for t in tensors {
            let s = t.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (&d, &e))| i == axis || d == e);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();

        let mut data = vec![0.0; numel(&out_shape)];
        let mut offsets = Vec::with_capacity(tensors.len());
        let mut at = 0usize;
        for t in tensors {
            offsets.push(at);
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + at) * inner;
                data[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            at += len;
        }
        let parents: Vec<Tensor> = tensors.iter().map(|&t| t.clone()).collect();
        let closure_parents = parents.clone();
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            parents,
            Box::new(move |dy| {
                for ((p, &off), &len) in closure_parents.iter().zip(&offsets).zip(&lens) {
                    if !p.requires_grad() {
                        continue;
                    }
                    let mut contrib = vec![0.0; p.numel()];
                    for o in 0..outer {
                        let src_start = (o * axis_total + off) * inner;
                        contrib[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&dy[src_start..src_start + len * inner]);
                    }
                    accumulate_grad(p, &contrib);
                }
            }),
        ))
    }

    /// Contiguous `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                shape,
                msg: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let len = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * full + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&self.data()[src_start..src_start + len * inner]);
        }
        let px = self.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut contrib = vec![0.0; px.numel()];
                for o in 0..outer {
                    let dst_start = (o * full + start) * inner;
                    contrib[dst_start..dst_start + len * inner]
                        .copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate_grad(&px, &contrib);
            }),
        ))
    }

    /// Gather rows along axis 0; duplicate indices are allowed and their
    /// gradients add up.
    pub fn index_select0(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.is_empty() || indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "index_select0",
                shape: shape.to_vec(),
                msg: "needs rank >= 1 and at least one index".into(),
            });
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "index_select0",
                shape: shape.to_vec(),
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let mut data = vec![0.0; indices.len() * inner];
        for (r, &i) in indices.iter().enumerate() {
            data[r * inner..(r + 1) * inner]
                .copy_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let px = self.clone();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut contrib = vec![0.0; px.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (c, &g) in dy[r * inner..(r + 1) * inner].iter().enumerate() {
                        contrib[i * inner + c] += g;
                    }
                }
                accumulate_grad(&px, &contrib);
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// reductions

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let px = self.clone();
        let n = self.numel();
        Tensor::from_op(
            vec![total],
            vec![],
            vec![self.clone()],
            Box::new(move |dy| {
                let contrib = vec![dy[0]; n];
                accumulate_grad(&px, &contrib);
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor, TensorError> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_all",
                shape: self.shape().to_vec(),
                msg: "empty tensor".into(),
            });
        }
        Ok(self.sum_all().affine(1.0 / n as f64, 0.0))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                shape,
                msg: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| if i == axis { None } else { Some(d) })
            .collect();
        if keepdim {
            out_shape = shape.clone();
            out_shape[axis] = 1;
        }
        let px = self.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut contrib = vec![0.0; px.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let dst =
                            &mut contrib[(o * len + l) * inner..(o * len + l + 1) * inner];
                        let src = &dy[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate_grad(&px, &contrib);
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor, TensorError> {
        let len = *self.shape().get(axis).ok_or_else(|| TensorError::InvalidArgument {
            op: "mean_axis",
            shape: self.shape().to_vec(),
            msg: format!("axis {axis} out of range"),
        })?;
        Ok(self.sum_axis(axis, keepdim)?.affine(1.0 / len as f64, 0.0))
    }
}

// ---------------------------------------------------------------------------
// softmax / layer norm / upsampling

impl Tensor {
    /// Softmax over the last axis, computed stably per row.
    pub fn softmax_last(&self) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "softmax_last",
            shape: shape.clone(),
            msg: "needs rank >= 1".into(),
        })?;
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let y = &mut data[r * d..(r + 1) * d];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                s += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= s;
            }
        }
        let px = self.clone();
        let saved = data.clone();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut contrib = vec![0.0; saved.len()];
                for r in 0..rows {
                    let y = &saved[r * d..(r + 1) * d];
                    let g = &dy[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
                    for ((c, &yi), &gi) in contrib[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(y)
                        .zip(g)
                    {
                        *c = yi * (gi - dot);
                    }
                }
                accumulate_grad(&px, &contrib);
            }),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "layer_norm",
            shape: shape.clone(),
            msg: "needs rank >= 1".into(),
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (x[i] - mu) * is;
                xhat[r * d + i] = xh;
                data[r * d + i] = xh * gain.data()[i] + bias.data()[i];
            }
        }
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |dy| {
                if px.requires_grad() {
                    let mut contrib = vec![0.0; px.numel()];
                    for r in 0..rows {
                        let g = &dy[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let is = inv_std[r];
                        // dxhat_i = dy_i * gain_i; dx via the two row means
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for i in 0..d {
                            let dxh = g[i] * pg.data()[i];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[i];
                        }
                        let dn = d as f64;
                        for i in 0..d {
                            let dxh = g[i] * pg.data()[i];
                            contrib[r * d + i] =
                                is * (dxh - sum_dxh / dn - xh[i] * sum_dxh_xh / dn);
                        }
                    }
                    accumulate_grad(&px, &contrib);
                }
                if pg.requires_grad() {
                    let mut contrib = vec![0.0; d];
                    for r in 0..rows {
                        for i in 0..d {
                            contrib[i] += dy[r * d + i] * xhat[r * d + i];
                        }
                    }
                    accumulate_grad(&pg, &contrib);
                }
                if pb.requires_grad() {
                    let mut contrib = vec![0.0; d];
                    for r in 0..rows {
                        for i in 0..d {
                            contrib[i] += dy[r * d + i];
                        }
                    }
                    accumulate_grad(&pb, &contrib);
                }
            }),
        ))
    }

    /// Bilinear upsampling of an `[h, w, c]` tensor to `[out_h, out_w, c]`
    /// with half-pixel centers (the align_corners=false convention).
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                shape: shape.to_vec(),
                msg: format!("expected [h, w, c] input and nonzero target, got {out_h}x{out_w}"),
            });
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let mut data = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let dst = &mut data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                let p00 = &self.data()[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
                let p01 = &self.data()[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
                let p10 = &self.data()[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
                let p11 = &self.data()[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
                let (w00, w01, w10, w11) = (
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                );
                for k in 0..c {
                    dst[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
                }
            }
        }
        let px = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![out_h, out_w, c],
            vec![self.clone()],
            Box::new(move |dy| {
                let mut contrib = vec![0.0; px.numel()];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let g = &dy[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                        let (w00, w01, w10, w11) = (
                            (1.0 - fy) * (1.0 - fx),
                            (1.0 - fy) * fx,
                            fy * (1.0 - fx),
                            fy * fx,
                        );
                        for k in 0..c {
                            contrib[(y0 * w + x0) * c + k] += w00 * g[k];
                            contrib[(y0 * w + x1) * c + k] += w01 * g[k];
                            contrib[(y1 * w + x0) * c + k] += w10 * g[k];
                            contrib[(y1 * w + x1) * c + k] += w11 * g[k];
                        }
                    }
                }
                accumulate_grad(&px, &contrib);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tensor::{Tensor, TensorError};

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn broadcasting_is_right_aligned() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

        let col = t(&[100.0, 200.0], &[2, 1]);
        let d = a.add(&col).unwrap();
        assert_eq!(d.data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);

        let err = a.add(&t(&[1.0, 2.0], &[2])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = t(&[1.0, 0.0], &[2]);
        assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
        let y = t(&[1.0, -2.0], &[2]);
        assert!(matches!(y.log(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);

        // a · bᵀ through the fused kernel agrees with permute-then-matmul
        let nt = a.matmul_nt(&b).unwrap();
        let via = a.matmul(&b.transpose2().unwrap()).unwrap();
        assert_eq!(nt.data(), via.data());
    }

    #[test]
    fn batched_matmul_runs_per_slice() {
        let a = t(&[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0], &[2, 2, 2]);
        let b = t(&[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0], &[2, 2, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_rows_are_normalized_and_stable() {
        let x = t(&[1000.0, 1001.0, -3.0, -3.0], &[2, 2]);
        let y = x.softmax_last().unwrap();
        let e = (1.0f64).exp();
        assert!((y.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((y.data()[1] - e / (1.0 + e)).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.5, 0.5]);
    }

    #[test]
    fn slice_concat_round_trip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = x.slice(1, 0, 1).unwrap();
        let right = x.slice(1, 1, 3).unwrap();
        let back = Tensor::concat(&[&left, &right], 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn index_select_gathers_rows_and_sums_duplicate_grads() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let picked = x.index_select0(&[1, 1, 0]).unwrap();
        assert_eq!(picked.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = picked.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_axis_keepdim_shapes() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let s0 = x.sum_axis(0, false).unwrap();
        assert_eq!(s0.shape(), &[3]);
        assert_eq!(s0.data(), &[5.0, 7.0, 9.0]);
        let s1 = x.sum_axis(1, true).unwrap();
        assert_eq!(s1.shape(), &[2, 1]);
        assert_eq!(s1.data(), &[6.0, 15.0]);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = t(&[2.5; 4 * 4 * 3], &[4, 4, 3]);
        let y = x.upsample_bilinear(8, 8).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_identity_at_same_size() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = t(&vals, &[2, 2, 3]);
        let y = x.upsample_bilinear(2, 2).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = t(&[1.0], &[1]);
        let b = t(&[0.0], &[1]);
        assert!(matches!(a.div(&b), Err(TensorError::Domain { op: "div", .. })));
    }
}
