//! Dense tensor substrate: 4-D activations, convolution kernels, the
//! convolution forward/backward kernels, global average pooling and the
//! two-way softmax channel fusion.
//!
//! `conv2d_naive` is the reference path: a plain loop nest with a fixed
//! summation order (ascending input channel, then kernel row, then kernel
//! column) so expected values are reproducible across platforms.
//! `conv2d` is the optimized path (im2col + matrix multiply) and must agree
//! with the naive path to 1e-6 relative; in practice it accumulates in the
//! same order and agrees bitwise on finite inputs.

use crate::error::{Error, Result};

/// Dense 4-D tensor in (batch, channel, height, width) row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Tensor4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Geometry(format!(
                "tensor dimensions must be >= 1, got {n}x{c}x{h}x{w}"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Dimension {
                axis: "data length",
                expected: n * c * h * w,
                got: data.len(),
            });
        }
        Ok(Self { data, n, c, h, w })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn from_fn(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let idx = t.index(i, j, y, x);
                        t.data[idx] = f(i, j, y, x);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    /// Flat index of element (i, j, y, x).
    #[inline]
    pub fn index(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        ((i * self.c + j) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(i, j, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, y: usize, x: usize) -> &mut f64 {
        let idx = self.index(i, j, y, x);
        &mut self.data[idx]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                axis: "elementwise add shape",
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        let mut out = self.clone();
        for (o, r) in out.data.iter_mut().zip(other.data.iter()) {
            *o += r;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }
}

/// Convolution kernel bank: (output channels, input channels per group, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights4 {
    data: Vec<f64>,
    m_out: usize,
    c_in_per_group: usize,
    kh: usize,
    kw: usize,
}

impl Weights4 {
    pub fn new(m_out: usize, c_in_per_group: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if kh != kw {
            return Err(Error::Config(format!(
                "kernels must be square, got {kh}x{kw}"
            )));
        }
        if m_out == 0 || c_in_per_group == 0 || kh == 0 {
            return Err(Error::Geometry(format!(
                "weight dimensions must be >= 1, got {m_out}x{c_in_per_group}x{kh}x{kw}"
            )));
        }
        if data.len() != m_out * c_in_per_group * kh * kw {
            return Err(Error::Dimension {
                axis: "weight data length",
                expected: m_out * c_in_per_group * kh * kw,
                got: data.len(),
            });
        }
        Ok(Self {
            data,
            m_out,
            c_in_per_group,
            kh,
            kw,
        })
    }

    pub fn zeros(m_out: usize, c_in_per_group: usize, k: usize) -> Self {
        Self {
            data: vec![0.0; m_out * c_in_per_group * k * k],
            m_out,
            c_in_per_group,
            kh: k,
            kw: k,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.m_out, self.c_in_per_group, self.kh, self.kw)
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.m_out
    }

    #[inline]
    pub fn in_per_group(&self) -> usize {
        self.c_in_per_group
    }

    #[inline]
    pub fn kernel(&self) -> usize {
        self.kh
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in_per_group + i) * self.kh + ky) * self.kw + kx
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.index(o, i, ky, kx)]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, ky: usize, kx: usize) -> &mut f64 {
        let idx = self.index(o, i, ky, kx);
        &mut self.data[idx]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Convolution geometry: stride, zero padding, channel groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub fn unit() -> Self {
        Self::new(1, 0, 1)
    }

    /// Output extent along one spatial axis, or an error when empty.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::Geometry(format!(
                "kernel {kernel} exceeds padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Per-batch, per-channel scalar statistics (the output of global pooling).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    data: Vec<f64>,
    n: usize,
    c: usize,
}

impl ChannelStats {
    pub fn new(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c {
            return Err(Error::Dimension {
                axis: "stats length",
                expected: n * c,
                got: data.len(),
            });
        }
        Ok(Self { data, n, c })
    }

    pub fn zeros(n: usize, c: usize) -> Self {
        Self {
            data: vec![0.0; n * c],
            n,
            c,
        }
    }

    pub fn constant(n: usize, c: usize, v: f64) -> Self {
        Self {
            data: vec![v; n * c],
            n,
            c,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.c)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.c + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.c + j]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn check_conv_shapes(x: &Tensor4, w: &Weights4, geom: &ConvGeom) -> Result<(usize, usize)> {
    let (_, c, h, width) = x.shape();
    let (m_out, c_in_pg, k, _) = w.shape();
    if geom.groups == 0 {
        return Err(Error::Geometry("groups must be >= 1".into()));
    }
    if c % geom.groups != 0 {
        return Err(Error::Dimension {
            axis: "input channels per group",
            expected: geom.groups * (c / geom.groups.max(1)).max(1),
            got: c,
        });
    }
    if m_out % geom.groups != 0 {
        return Err(Error::Dimension {
            axis: "output channels per group",
            expected: geom.groups,
            got: m_out,
        });
    }
    if c / geom.groups != c_in_pg {
        return Err(Error::Dimension {
            axis: "weight input channels",
            expected: c / geom.groups,
            got: c_in_pg,
        });
    }
    let h_out = geom.out_extent(h, k)?;
    let w_out = geom.out_extent(width, k)?;
    Ok((h_out, w_out))
}

/// Reference convolution: direct loop-nest evaluation with a deterministic
/// summation order (ascending input channel, kernel row, kernel column).
/// No bias. Clarity over speed.
pub fn conv2d_naive(x: &Tensor4, w: &Weights4, geom: &ConvGeom) -> Result<Tensor4> {
    let (n, c, h, width) = x.shape();
    let (m_out, c_in_pg, k, _) = w.shape();
    let (h_out, w_out) = check_conv_shapes(x, w, geom)?;
    let m_per_g = m_out / geom.groups;
    let mut out = Tensor4::zeros(n, m_out, h_out, w_out);

    for i in 0..n {
        for oc in 0..m_out {
            let g = oc / m_per_g;
            let ic_base = g * c_in_pg;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ic in 0..c_in_pg {
                        for ky in 0..k {
                            let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if xx < 0 || xx >= width as isize {
                                    continue;
                                }
                                acc += x.at(i, ic_base + ic, y as usize, xx as usize)
                                    * w.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(i, oc, oy, ox) = acc;
                }
            }
        }
    }
    let _ = c;
    Ok(out)
}

/// Scratch buffers for the im2col convolution path, reusable across calls.
#[derive(Debug, Default)]
pub struct ConvScratch {
    col: Vec<f64>,
}

/// Builds the patch matrix for one (batch, group) pair.
/// Rows are (ic, ky, kx) in ascending order, columns are output positions.
fn im2col(
    x: &Tensor4,
    batch: usize,
    ic_base: usize,
    c_in_pg: usize,
    k: usize,
    geom: &ConvGeom,
    h_out: usize,
    w_out: usize,
    col: &mut [f64],
) {
    let (_, _, h, w) = x.shape();
    let cols = h_out * w_out;
    let mut row = 0;
    for ic in 0..c_in_pg {
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * cols..(row + 1) * cols];
                let mut p = 0;
                for oy in 0..h_out {
                    let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if y < 0 || y >= h as isize {
                        dst[p..p + w_out].fill(0.0);
                        p += w_out;
                        continue;
                    }
                    for ox in 0..w_out {
                        let xx = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        dst[p] = if xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            x.at(batch, ic_base + ic, y as usize, xx as usize)
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// C[m x n] += A[m x k] * B[k x n], accumulating over k in ascending order so
/// results stay bit-stable across calls.
fn matmul_dense(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Optimized convolution via im2col + matrix multiply.
/// Numerically equal to `conv2d_naive` within 1e-6 relative.
pub fn conv2d(x: &Tensor4, w: &Weights4, geom: &ConvGeom) -> Result<Tensor4> {
    let mut scratch = ConvScratch::default();
    conv2d_with(x, w, geom, &mut scratch)
}

/// `conv2d` with caller-provided scratch to avoid repeated allocation.
pub fn conv2d_with(
    x: &Tensor4,
    w: &Weights4,
    geom: &ConvGeom,
    scratch: &mut ConvScratch,
) -> Result<Tensor4> {
    let (n, c, _, _) = x.shape();
    let (m_out, c_in_pg, k, _) = w.shape();
    let (h_out, w_out) = check_conv_shapes(x, w, geom)?;
    let m_per_g = m_out / geom.groups;
    let cols = h_out * w_out;
    let rows = c_in_pg * k * k;
    scratch.col.resize(rows * cols, 0.0);

    let mut out = Tensor4::zeros(n, m_out, h_out, w_out);
    let _ = c;
    for i in 0..n {
        for g in 0..geom.groups {
            im2col(
                x,
                i,
                g * c_in_pg,
                c_in_pg,
                k,
                geom,
                h_out,
                w_out,
                &mut scratch.col,
            );
            let w_block = &w.data()[g * m_per_g * rows..(g + 1) * m_per_g * rows];
            let out_base = out.index(i, g * m_per_g, 0, 0);
            let out_block = &mut out.data_mut()[out_base..out_base + m_per_g * cols];
            matmul_dense(w_block, &scratch.col, out_block, m_per_g, rows, cols);
        }
    }
    Ok(out)
}

/// Exact reverse-mode gradients of `conv2d` with respect to input and weights.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Weights4,
    geom: &ConvGeom,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Weights4)> {
    let mut scratch = ConvScratch::default();
    conv2d_backward_with(x, w, geom, grad_out, &mut scratch)
}

pub fn conv2d_backward_with(
    x: &Tensor4,
    w: &Weights4,
    geom: &ConvGeom,
    grad_out: &Tensor4,
    scratch: &mut ConvScratch,
) -> Result<(Tensor4, Weights4)> {
    let (n, c, h, width) = x.shape();
    let (m_out, c_in_pg, k, _) = w.shape();
    let (h_out, w_out) = check_conv_shapes(x, w, geom)?;
    if grad_out.shape() != (n, m_out, h_out, w_out) {
        return Err(Error::Dimension {
            axis: "grad_out shape",
            expected: n * m_out * h_out * w_out,
            got: grad_out.data().len(),
        });
    }
    let m_per_g = m_out / geom.groups;
    let cols = h_out * w_out;
    let rows = c_in_pg * k * k;
    scratch.col.resize(rows * cols, 0.0);
    let mut col_grad = vec![0.0; rows * cols];

    let mut grad_x = Tensor4::zeros(n, c, h, width);
    let mut grad_w = Weights4::zeros(m_out, c_in_pg, k);

    for i in 0..n {
        for g in 0..geom.groups {
            let ic_base = g * c_in_pg;
            im2col(x, i, ic_base, c_in_pg, k, geom, h_out, w_out, &mut scratch.col);
            let go_base = grad_out.index(i, g * m_per_g, 0, 0);
            let go_block = &grad_out.data()[go_base..go_base + m_per_g * cols];

            // grad_w += grad_out * col^T
            {
                let gw_block =
                    &mut grad_w.data_mut()[g * m_per_g * rows..(g + 1) * m_per_g * rows];
                for o in 0..m_per_g {
                    let go_row = &go_block[o * cols..(o + 1) * cols];
                    let gw_row = &mut gw_block[o * rows..(o + 1) * rows];
                    for (r, gw) in gw_row.iter_mut().enumerate() {
                        let col_row = &scratch.col[r * cols..(r + 1) * cols];
                        let mut acc = 0.0;
                        for (gv, cv) in go_row.iter().zip(col_row.iter()) {
                            acc += gv * cv;
                        }
                        *gw += acc;
                    }
                }
            }

            // col_grad = W^T * grad_out, then scatter back into grad_x.
            col_grad.fill(0.0);
            let w_block = &w.data()[g * m_per_g * rows..(g + 1) * m_per_g * rows];
            for o in 0..m_per_g {
                let go_row = &go_block[o * cols..(o + 1) * cols];
                let w_row = &w_block[o * rows..(o + 1) * rows];
                for (r, &wv) in w_row.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let cg_row = &mut col_grad[r * cols..(r + 1) * cols];
                    for (cg, &gv) in cg_row.iter_mut().zip(go_row.iter()) {
                        *cg += wv * gv;
                    }
                }
            }
            let mut row = 0;
            for ic in 0..c_in_pg {
                for ky in 0..k {
                    for kx in 0..k {
                        let cg_row = &col_grad[row * cols..(row + 1) * cols];
                        let mut p = 0;
                        for oy in 0..h_out {
                            let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            if y < 0 || y >= h as isize {
                                p += w_out;
                                continue;
                            }
                            for ox in 0..w_out {
                                let xx =
                                    (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if xx >= 0 && xx < width as isize {
                                    *grad_x.at_mut(i, ic_base + ic, y as usize, xx as usize) +=
                                        cg_row[p];
                                }
                                p += 1;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}

/// Global average pooling: per-batch, per-channel spatial mean.
pub fn gap(u: &Tensor4) -> ChannelStats {
    let (n, c, h, w) = u.shape();
    let inv = 1.0 / (h * w) as f64;
    let mut out = ChannelStats::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let base = u.index(i, j, 0, 0);
            let plane = &u.data()[base..base + h * w];
            let mut acc = 0.0;
            for v in plane {
                acc += v;
            }
            *out.at_mut(i, j) = acc * inv;
        }
    }
    out
}

/// Two-way softmax over paired channel statistics, stabilized by subtracting
/// the pairwise max before exponentiation. Returns (beta, gamma) with
/// beta + gamma == 1 exactly.
pub fn fusion_weights(s3: &ChannelStats, s1: &ChannelStats) -> Result<(ChannelStats, ChannelStats)> {
    if s3.shape() != s1.shape() {
        return Err(Error::Dimension {
            axis: "stats shape",
            expected: s3.data().len(),
            got: s1.data().len(),
        });
    }
    let (n, c) = s3.shape();
    let mut beta = ChannelStats::zeros(n, c);
    let mut gamma = ChannelStats::zeros(n, c);
    for idx in 0..n * c {
        let a = s3.data()[idx];
        let b = s1.data()[idx];
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("fusion_weights input statistics"));
        }
        let m = a.max(b);
        let e3 = (a - m).exp();
        let e1 = (b - m).exp();
        let bv = e3 / (e3 + e1);
        beta.data_mut()[idx] = bv;
        gamma.data_mut()[idx] = 1.0 - bv;
    }
    Ok((beta, gamma))
}

/// Channel-wise convex combination: Y = beta .* U3 + gamma .* U1, the weights
/// broadcast over spatial positions.
pub fn fuse(
    u3: &Tensor4,
    u1: &Tensor4,
    beta: &ChannelStats,
    gamma: &ChannelStats,
) -> Result<Tensor4> {
    if u3.shape() != u1.shape() {
        return Err(Error::Dimension {
            axis: "fuse branch shape",
            expected: u3.data().len(),
            got: u1.data().len(),
        });
    }
    let (n, c, h, w) = u3.shape();
    if beta.shape() != (n, c) || gamma.shape() != (n, c) {
        return Err(Error::Dimension {
            axis: "fusion weight shape",
            expected: n * c,
            got: beta.data().len(),
        });
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for i in 0..n {
        for j in 0..c {
            let b = beta.at(i, j);
            let g = gamma.at(i, j);
            let base = u3.index(i, j, 0, 0);
            for p in 0..h * w {
                out.data_mut()[base + p] = b * u3.data()[base + p] + g * u1.data()[base + p];
            }
        }
    }
    Ok(out)
}

/// Splits channels positionally: front gets [0, n_front), back gets the rest.
pub fn split_channels(x: &Tensor4, n_front: usize) -> Result<(Tensor4, Tensor4)> {
    let (n, c, h, w) = x.shape();
    if n_front == 0 || n_front >= c {
        return Err(Error::Partition(format!(
            "split point {n_front} outside (0, {c})"
        )));
    }
    let mut front = Tensor4::zeros(n, n_front, h, w);
    let mut back = Tensor4::zeros(n, c - n_front, h, w);
    let plane = h * w;
    for i in 0..n {
        for j in 0..c {
            let src = x.index(i, j, 0, 0);
            if j < n_front {
                let dst = front.index(i, j, 0, 0);
                front.data_mut()[dst..dst + plane].copy_from_slice(&x.data()[src..src + plane]);
            } else {
                let dst = back.index(i, j - n_front, 0, 0);
                back.data_mut()[dst..dst + plane].copy_from_slice(&x.data()[src..src + plane]);
            }
        }
    }
    Ok((front, back))
}

/// Inverse of `split_channels`: concatenates along the channel axis.
pub fn concat_channels(front: &Tensor4, back: &Tensor4) -> Result<Tensor4> {
    let (n, cf, h, w) = front.shape();
    let (n2, cb, h2, w2) = back.shape();
    if n != n2 || h != h2 || w != w2 {
        return Err(Error::Dimension {
            axis: "concat spatial shape",
            expected: n * h * w,
            got: n2 * h2 * w2,
        });
    }
    let mut out = Tensor4::zeros(n, cf + cb, h, w);
    let plane = h * w;
    for i in 0..n {
        for j in 0..cf + cb {
            let dst = out.index(i, j, 0, 0);
            let src_slice = if j < cf {
                let s = front.index(i, j, 0, 0);
                &front.data()[s..s + plane]
            } else {
                let s = back.index(i, j - cf, 0, 0);
                &back.data()[s..s + plane]
            };
            out.data_mut()[dst..dst + plane].copy_from_slice(src_slice);
        }
    }
    Ok(out)
}
