//! Dense row-major `f64` tensors and the numeric kernels the autodiff tape
//! dispatches to (broadcasting arithmetic, reductions, convolutions, pooling).

use crate::error::{CvdmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CvdmError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        broadcast_binary(self, other, f)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sample `n` of a leading batch axis, as its own tensor with the batch axis kept.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack<T: std::borrow::Borrow<Tensor>>(items: &[T]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| CvdmError::Shape("cannot stack zero tensors".into()))?
            .borrow();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            let t = t.borrow();
            if t.shape != first.shape {
                return Err(CvdmError::Shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(items: &[&Tensor], axis: usize) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| CvdmError::Shape("cannot concat zero tensors".into()))?;
        let rank = first.rank();
        for t in items {
            if t.rank() != rank
                || (0..rank).any(|d| d != axis && t.shape[d] != first.shape[d])
            {
                return Err(CvdmError::Shape(format!(
                    "concat axis {}: {:?} vs {:?}",
                    axis, t.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = items.iter().map(|t| t.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for t in items {
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Splits along `axis` into pieces of the given extents (inverse of `concat`).
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Vec<Tensor> {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let total = self.shape[axis];
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&self.data[base..base + s * inner]);
            }
            out.push(Tensor { shape, data });
            start += s;
        }
        out
    }
}

fn left_pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut v = vec![1; rank - shape.len()];
    v.extend_from_slice(shape);
    v
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (left_pad(a, rank), left_pad(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(CvdmError::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            ))),
        })
        .collect()
}

/// Contiguous strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let padded = left_pad(shape, out.len());
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for d in (0..out.len()).rev() {
        strides[d] = if padded[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` over every element of `out`,
/// walking the last axis as an inner loop.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut pos = 0;
    for _ in 0..outer {
        for k in 0..inner {
            f(pos + k, oa + k * ia, ob + k * ib);
        }
        pos += inner;
        // odometer increment over the outer axes
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    if b.numel() == 1 && out == a.shape {
        let y = b.data[0];
        return Ok(Tensor {
            shape: out,
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor { shape: out, data })
}

/// Sums `t` down to `shape`, the adjoint of broadcasting `shape` up to `t.shape()`.
pub fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let target_numel: usize = shape.iter().product();
    if target_numel == 1 {
        return Tensor {
            shape: shape.to_vec(),
            data: vec![t.sum()],
        };
    }
    let st = broadcast_strides(shape, &t.shape);
    let ident = broadcast_strides(&t.shape, &t.shape);
    let mut data = vec![0.0; target_numel];
    for_each_broadcast(&t.shape, &ident, &st, |_, it, is| {
        data[is] += t.data[it];
    });
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Repeats `t` up to `shape` along its unit axes.
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = broadcast_shape(&t.shape, shape)?;
    if out != shape {
        return Err(CvdmError::Shape(format!(
            "cannot broadcast {:?} to {:?}",
            t.shape, shape
        )));
    }
    let st = broadcast_strides(&t.shape, shape);
    let ident = broadcast_strides(shape, shape);
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, &ident, &st, |o, _, is| data[o] = t.data[is]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary strides, so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: index ranges were sized by the callers from the same m/k/n and
    // strides; matrixmultiply reads a/b and writes c within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(CvdmError::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k, 1, &b.data, n, 1, &mut out, false);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Circular,
}

fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(CvdmError::Shape(format!(
            "{what} expects NCHW, got {:?}",
            t.shape
        ))),
    }
}

/// Geometry of a stride-1 "same" convolution with an odd square kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: Padding,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn source(&self, y: usize, ky: usize, size: usize) -> Option<usize> {
        let half = self.k / 2;
        let pos = y as isize + ky as isize - half as isize;
        if pos >= 0 && (pos as usize) < size {
            Some(pos as usize)
        } else if self.pad == Padding::Circular {
            Some(pos.rem_euclid(size as isize) as usize)
        } else {
            None
        }
    }

    fn im2col(&self, src: &[f64], cols: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        for c in 0..self.c {
            let plane = &src[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    for y in 0..h {
                        let line = &mut dst[y * w..(y + 1) * w];
                        match self.source(y, ky, h) {
                            None => line.iter_mut().for_each(|v| *v = 0.0),
                            Some(sy) => {
                                let srow = &plane[sy * w..(sy + 1) * w];
                                for (x, v) in line.iter_mut().enumerate() {
                                    *v = self.source(x, kx, w).map_or(0.0, |sx| srow[sx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dst: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        for c in 0..self.c {
            let plane = &mut dst[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let src = &cols[row..row + hw];
                    for y in 0..h {
                        let Some(sy) = self.source(y, ky, h) else {
                            continue;
                        };
                        for x in 0..w {
                            if let Some(sx) = self.source(x, kx, w) {
                                plane[sy * w + sx] += src[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: Padding,
) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input, "conv2d input")?;
    let (o, wc, k, k2) = nchw(weight, "conv2d weight")?;
    if wc != c || k != k2 || k % 2 == 0 {
        return Err(CvdmError::Shape(format!(
            "conv2d weight {:?} incompatible with input {:?}",
            weight.shape, input.shape
        )));
    }
    let geom = ConvGeom { c, h, w, k, pad };
    let hw = h * w;
    let rows = geom.rows();
    let mut out = vec![0.0; n * o * hw];
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    for b in 0..n {
        let src = &input.data[b * c * hw..(b + 1) * c * hw];
        let cols_ref: &[f64] = if k == 1 {
            src
        } else {
            geom.im2col(src, &mut cols);
            &cols
        };
        let dst = &mut out[b * o * hw..(b + 1) * o * hw];
        gemm(o, rows, hw, &weight.data, rows, 1, cols_ref, hw, 1, dst, false);
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
                let bv = bias.data[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, o, h, w], out)
}

/// Gradients of `conv2d` w.r.t. (input, weight, bias).
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    pad: Padding,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (o, k) = (weight.shape[0], weight.shape[2]);
    let geom = ConvGeom { c, h, w, k, pad };
    let hw = h * w;
    let rows = geom.rows();
    let mut gw = vec![0.0; o * rows];
    let mut gb = vec![0.0; o];
    let mut gin = if need_input {
        vec![0.0; n * c * hw]
    } else {
        Vec::new()
    };
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    let mut gcols = vec![0.0; rows * hw];
    for b in 0..n {
        let src = &input.data[b * c * hw..(b + 1) * c * hw];
        let g = &grad_out.data[b * o * hw..(b + 1) * o * hw];
        for (oc, chunk) in g.chunks(hw).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
        let cols_ref: &[f64] = if k == 1 {
            src
        } else {
            geom.im2col(src, &mut cols);
            &cols
        };
        // gW[o×rows] += g[o×hw] · colsᵀ
        gemm(o, hw, rows, g, hw, 1, cols_ref, 1, hw, &mut gw, true);
        if need_input {
            // gcols[rows×hw] = Wᵀ · g
            gemm(rows, o, hw, &weight.data, 1, rows, g, hw, 1, &mut gcols, false);
            let dst = &mut gin[b * c * hw..(b + 1) * c * hw];
            if k == 1 {
                dst.iter_mut().zip(&gcols).for_each(|(d, s)| *d += s);
            } else {
                geom.col2im(&gcols, dst);
            }
        }
    }
    (
        need_input.then(|| Tensor {
            shape: input.shape.clone(),
            data: gin,
        }),
        Tensor {
            shape: weight.shape.clone(),
            data: gw,
        },
        Tensor {
            shape: vec![o],
            data: gb,
        },
    )
}

/// 2×2 stride-2 transposed convolution; weight is `[C_in, C_out, 2, 2]`.
pub fn conv_transpose2x2(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, ci, h, w) = nchw(input, "conv_transpose input")?;
    let (wci, co, kh, kw) = nchw(weight, "conv_transpose weight")?;
    if wci != ci || kh != 2 || kw != 2 {
        return Err(CvdmError::Shape(format!(
            "conv_transpose weight {:?} incompatible with input {:?}",
            weight.shape, input.shape
        )));
    }
    let hw = h * w;
    let r = co * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut tmp = vec![0.0; r * hw];
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        let src = &input.data[b * ci * hw..(b + 1) * ci * hw];
        // tmp[r×hw] = Wᵀ[r×ci] · src[ci×hw]
        gemm(r, ci, hw, &weight.data, 1, r, src, hw, 1, &mut tmp, false);
        let dst = &mut out[b * co * oh * ow..(b + 1) * co * oh * ow];
        for oc in 0..co {
            let bv = bias.map_or(0.0, |bt| bt.data[oc]);
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &tmp[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                    for y in 0..h {
                        let orow = &mut dst[(oc * oh + 2 * y + a) * ow..][..ow];
                        for x in 0..w {
                            orow[2 * x + bb] = row[y * w + x] + bv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

pub fn conv_transpose2x2_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, ci, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let co = weight.shape[1];
    let hw = h * w;
    let r = co * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut gtmp = vec![0.0; r * hw];
    let mut gw = vec![0.0; ci * r];
    let mut gb = vec![0.0; co];
    let mut gin = if need_input {
        vec![0.0; n * ci * hw]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let g = &grad_out.data[b * co * oh * ow..(b + 1) * co * oh * ow];
        for oc in 0..co {
            gb[oc] += g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut gtmp[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                    for y in 0..h {
                        let grow = &g[(oc * oh + 2 * y + a) * ow..][..ow];
                        for x in 0..w {
                            row[y * w + x] = grow[2 * x + bb];
                        }
                    }
                }
            }
        }
        let src = &input.data[b * ci * hw..(b + 1) * ci * hw];
        // gW[ci×r] += src[ci×hw] · gtmpᵀ
        gemm(ci, hw, r, src, hw, 1, &gtmp, 1, hw, &mut gw, true);
        if need_input {
            // gin[ci×hw] = W[ci×r] · gtmp[r×hw]
            gemm(
                ci,
                r,
                hw,
                &weight.data,
                r,
                1,
                &gtmp,
                hw,
                1,
                &mut gin[b * ci * hw..(b + 1) * ci * hw],
                false,
            );
        }
    }
    (
        need_input.then(|| Tensor {
            shape: input.shape.clone(),
            data: gin,
        }),
        Tensor {
            shape: weight.shape.clone(),
            data: gw,
        },
        Tensor {
            shape: vec![co],
            data: gb,
        },
    )
}

pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CvdmError::Shape(format!(
            "avg_pool2 needs even spatial extents, got {:?}",
            input.shape
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = input_shape[0] * input_shape[1];
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * g[y * ow + x];
                let i = 2 * y * w + 2 * x;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    Tensor {
        shape: input_shape.to_vec(),
        data: gin,
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) spatial normalisation. Returns the output and the
/// per-plane inverse standard deviations needed by the backward pass.
pub fn instance_norm(input: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, c, h, w) = nchw(input, "instance_norm")?;
    let hw = h * w;
    let mut out = vec![0.0; input.numel()];
    let mut inv_std = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let src = &input.data[p * hw..(p + 1) * hw];
        let mean = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for (d, s) in out[p * hw..(p + 1) * hw].iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((
        Tensor {
            shape: input.shape.clone(),
            data: out,
        },
        inv_std,
    ))
}

pub fn instance_norm_backward(output: &Tensor, inv_std: &[f64], grad_out: &Tensor) -> Tensor {
    let hw = output.shape[2] * output.shape[3];
    let mut gin = vec![0.0; output.numel()];
    for (p, &is) in inv_std.iter().enumerate() {
        let xh = &output.data[p * hw..(p + 1) * hw];
        let g = &grad_out.data[p * hw..(p + 1) * hw];
        let mg = g.iter().sum::<f64>() / hw as f64;
        let mgx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        for ((d, &gv), &xv) in gin[p * hw..(p + 1) * hw].iter_mut().zip(g).zip(xh) {
            *d = is * (gv - mg - xv * mgx);
        }
    }
    Tensor {
        shape: output.shape.clone(),
        data: gin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_matches_explicit_expansion() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::new(&[2, 1, 1, 1], vec![10.0, 20.0]).unwrap();
        let c = broadcast_binary(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data()[0], 10.0);
        assert_eq!(c.data()[12], 32.0);
        let r = reduce_to(&c, &[2, 1, 1, 1]);
        assert_eq!(r.data(), &[66.0 + 120.0, 210.0 + 240.0]);
    }

    #[test]
    fn rank_padding_broadcast() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = broadcast_binary(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.data(), &[0.0, 2.0, 6.0, 3.0, 8.0, 15.0]);
        assert_eq!(reduce_to(&c, &[3]).data(), &[3.0, 10.0, 21.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, Padding::Zero).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn circular_padding_wraps() {
        let x = Tensor::from_fn(&[1, 1, 1, 4], |i| i as f64);
        // kernel picks the left neighbour
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[3] = 1.0;
        let y = conv2d(&x, &w, None, Padding::Circular);
        // height 1: the vertical taps wrap onto the same row
        assert_eq!(y.unwrap().data(), &[3.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 2, 2], |i| 100.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        let parts = c.split(1, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
