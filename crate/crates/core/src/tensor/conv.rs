//! Convolution and pooling kernels over raw NCHW buffers.
//!
//! Grouped convolutions with more than one input channel per group are
//! lowered to im2col + GEMM with every sample of the batch laid side by side
//! in one column matrix. Depthwise convolutions (one input channel per group)
//! use direct loops. Summation order is fixed, so results are deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// C = A·B (+ beta·C), with optional transposition of either operand.
/// `a` is stored `m×k` (or `k×m` when `a_t`), `b` is `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut cv = ndarray::ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Half-open range of output positions.
type Span = (usize, usize);

/// Validated dimensions of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cg: usize,
    pub og: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn resolve(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::Shape(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let [o, cg, kh, kw] = *weight else {
            return Err(Error::Shape(format!("conv2d weight must be OIHW, got {weight:?}")));
        };
        let g = geom.groups;
        if g == 0 || c % g != 0 || o % g != 0 {
            return Err(Error::Shape(format!(
                "groups {g} must divide input channels {c} and output channels {o}"
            )));
        }
        if cg != c / g {
            return Err(Error::Shape(format!(
                "weight expects {cg} channels per group, input provides {}",
                c / g
            )));
        }
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.padding;
        let (Some(ho), Some(wo)) = (
            conv_output_extent(h, kh, sh, ph),
            conv_output_extent(w, kw, sw, pw),
        ) else {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} (stride {sh}x{sw}) does not fit input {h}x{w} padded by {ph}x{pw}"
            )));
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            cg,
            og: o / g,
            geom,
        })
    }

    fn is_depthwise(&self) -> bool {
        self.cg == 1
    }

    /// 1x1, stride 1, unpadded, ungrouped: each sample is already its own
    /// column matrix, so no lowering is needed.
    fn is_pointwise(&self) -> bool {
        self.geom.groups == 1
            && self.kh == 1
            && self.kw == 1
            && self.geom.stride == (1, 1)
            && self.geom.padding == (0, 0)
    }

    /// Valid output ranges for every kernel row and column.
    fn tap_ranges(&self) -> (Vec<Span>, Vec<Span>) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        (
            (0..self.kh).map(|ky| Self::valid_range(self.ho, self.h, ky, sh, ph)).collect(),
            (0..self.kw).map(|kx| Self::valid_range(self.wo, self.w, kx, sw, pw)).collect(),
        )
    }

    fn col_rows(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Output positions `lo..hi` along one axis whose input tap `o*stride + k - pad` is in range.
    fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if input + pad > k {
            ((input - 1 + pad - k) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col(x: &[f64], d: &ConvDims, group: usize, cols: &mut [f64]) {
    let p = d.ho * d.wo;
    let ncols = d.col_cols();
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    if (ph, pw) != (0, 0) {
        cols.fill(0.0);
    }
    for ci in 0..d.cg {
        let c = group * d.cg + ci;
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = ConvDims::valid_range(d.ho, d.h, ky, sh, ph);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = ConvDims::valid_range(d.wo, d.w, kx, sw, pw);
                let row = (ci * d.kh + ky) * d.kw + kx;
                let row_buf = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..d.n {
                    let plane = &x[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let src = &plane[iy * d.w..(iy + 1) * d.w];
                        let dst = &mut row_buf[n * p + oy * d.wo..][..d.wo];
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * sw + kx - pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, group: usize, dx: &mut [f64]) {
    let p = d.ho * d.wo;
    let ncols = d.col_cols();
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    for ci in 0..d.cg {
        let c = group * d.cg + ci;
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = ConvDims::valid_range(d.ho, d.h, ky, sh, ph);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = ConvDims::valid_range(d.wo, d.w, kx, sw, pw);
                let row = (ci * d.kh + ky) * d.kw + kx;
                let row_buf = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..d.n {
                    let plane = &mut dx[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let src = &row_buf[n * p + oy * d.wo..][..d.wo];
                        let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
                        for ox in ox_lo..ox_hi {
                            dst[ox * sw + kx - pw] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let d = ConvDims::resolve(x.shape(), w.shape(), geom)?;
    let p = d.ho * d.wo;
    let mut out = vec![0.0; d.n * d.o * p];
    if d.is_depthwise() {
        depthwise_forward(x.data(), w.data(), &d, &mut out);
    } else if d.is_pointwise() {
        for n in 0..d.n {
            let xs = &x.data()[n * d.c * p..][..d.c * p];
            gemm(d.o, d.c, p, w.data(), false, xs, false, 0.0, &mut out[n * d.o * p..][..d.o * p]);
        }
    } else {
        let k = d.col_rows();
        let ncols = d.col_cols();
        let mut cols = vec![0.0; k * ncols];
        let mut y = vec![0.0; d.og * ncols];
        for g in 0..d.geom.groups {
            im2col(x.data(), &d, g, &mut cols);
            let wg = &w.data()[g * d.og * k..(g + 1) * d.og * k];
            gemm(d.og, k, ncols, wg, false, &cols, false, 0.0, &mut y);
            for o in 0..d.og {
                for n in 0..d.n {
                    let dst = &mut out[(n * d.o + g * d.og + o) * p..][..p];
                    dst.copy_from_slice(&y[o * ncols + n * p..][..p]);
                }
            }
        }
    }
    Tensor::new(&[d.n, d.o, d.ho, d.wo], out)
}

/// Gradients of a convolution with respect to its input and weight.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeometry,
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let d = ConvDims::resolve(x.shape(), w.shape(), geom)?;
    let mut dx = want_dx.then(|| vec![0.0; x.numel()]);
    let mut dw = want_dw.then(|| vec![0.0; w.numel()]);
    if d.is_depthwise() {
        depthwise_backward(x.data(), w.data(), &d, dout, dx.as_deref_mut(), dw.as_deref_mut());
        return Ok((dx, dw));
    }
    let p = d.ho * d.wo;
    if d.is_pointwise() {
        for n in 0..d.n {
            let xs = &x.data()[n * d.c * p..][..d.c * p];
            let gs = &dout[n * d.o * p..][..d.o * p];
            if let Some(dw) = dw.as_deref_mut() {
                gemm(d.o, p, d.c, gs, false, xs, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(d.c, d.o, p, w.data(), true, gs, false, 0.0, &mut dx[n * d.c * p..][..d.c * p]);
            }
        }
        return Ok((dx, dw));
    }
    let k = d.col_rows();
    let ncols = d.col_cols();
    let mut cols = vec![0.0; k * ncols];
    let mut dy = vec![0.0; d.og * ncols];
    for g in 0..d.geom.groups {
        for o in 0..d.og {
            for n in 0..d.n {
                dy[o * ncols + n * p..][..p]
                    .copy_from_slice(&dout[(n * d.o + g * d.og + o) * p..][..p]);
            }
        }
        let wrange = g * d.og * k..(g + 1) * d.og * k;
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x.data(), &d, g, &mut cols);
            gemm(d.og, ncols, k, &dy, false, &cols, true, 0.0, &mut dw[wrange.clone()]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(k, d.og, ncols, &w.data()[wrange], true, &dy, false, 0.0, &mut cols);
            col2im(&cols, &d, g, dx);
        }
    }
    Ok((dx, dw))
}

fn depthwise_forward(x: &[f64], w: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let p = d.ho * d.wo;
    let (ry, rx) = d.tap_ranges();
    for n in 0..d.n {
        for o in 0..d.o {
            let c = o / d.og;
            let plane = &x[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
            let dst = &mut out[(n * d.o + o) * p..][..p];
            let kern = &w[o * d.kh * d.kw..][..d.kh * d.kw];
            for (ky, &(oy_lo, oy_hi)) in ry.iter().enumerate() {
                for (kx, &(ox_lo, ox_hi)) in rx.iter().enumerate() {
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = kern[ky * d.kw + kx];
                    // First input column read by this tap; always in range.
                    let ix0 = ox_lo * sw + kx - pw;
                    for oy in oy_lo..oy_hi {
                        let src = &plane[(oy * sh + ky - ph) * d.w + ix0..];
                        let row = &mut dst[oy * d.wo + ox_lo..oy * d.wo + ox_hi];
                        for (r, s) in row.iter_mut().zip(src.iter().step_by(sw)) {
                            *r += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    d: &ConvDims,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let p = d.ho * d.wo;
    let (ry, rx) = d.tap_ranges();
    for n in 0..d.n {
        for o in 0..d.o {
            let c = o / d.og;
            let plane_off = (n * d.c + c) * d.h * d.w;
            let g = &dout[(n * d.o + o) * p..][..p];
            for (ky, &(oy_lo, oy_hi)) in ry.iter().enumerate() {
                for (kx, &(ox_lo, ox_hi)) in rx.iter().enumerate() {
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let widx = o * d.kh * d.kw + ky * d.kw + kx;
                    let wv = w[widx];
                    let ix0 = ox_lo * sw + kx - pw;
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let off = plane_off + (oy * sh + ky - ph) * d.w + ix0;
                        let grow = &g[oy * d.wo + ox_lo..oy * d.wo + ox_hi];
                        if dw.is_some() {
                            for (gv, s) in grow.iter().zip(x[off..].iter().step_by(sw)) {
                                acc += gv * s;
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for (gv, t) in grow.iter().zip(dx[off..].iter_mut().step_by(sw)) {
                                *t += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: PoolGeometry,
}

impl PoolDims {
    pub fn resolve(input: &[usize], geom: PoolGeometry) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::Shape(format!("pooling input must be NCHW, got {input:?}")));
        };
        let (kh, kw) = geom.kernel;
        let (ph, pw) = geom.padding;
        if ph * 2 > kh || pw * 2 > kw {
            return Err(Error::Shape(format!(
                "pool padding {ph}x{pw} exceeds half of kernel {kh}x{kw}"
            )));
        }
        let (Some(ho), Some(wo)) = (
            conv_output_extent(h, kh, geom.stride.0, ph),
            conv_output_extent(w, kw, geom.stride.1, pw),
        ) else {
            return Err(Error::Shape(format!(
                "pool window {kh}x{kw} does not fit input {h}x{w} padded by {ph}x{pw}"
            )));
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            ho,
            wo,
            geom,
        })
    }

    /// Visit every (output index, input index) pair of valid window taps.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (kh, kw) = self.geom.kernel;
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        for plane in 0..self.n * self.c {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let out = (plane * self.ho + oy) * self.wo + ox;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(out, (plane * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn out_len(&self) -> usize {
        self.n * self.c * self.ho * self.wo
    }
}

/// Max pooling; also returns the flat input index selected for each output.
pub(crate) fn max_pool_forward(x: &Tensor, geom: PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let d = PoolDims::resolve(x.shape(), geom)?;
    let mut out = vec![f64::NEG_INFINITY; d.out_len()];
    let mut arg = vec![usize::MAX; d.out_len()];
    let data = x.data();
    d.for_each_tap(|o, i| {
        if data[i] > out[o] || arg[o] == usize::MAX {
            out[o] = data[i];
            arg[o] = i;
        }
    });
    Ok((Tensor::new(&[d.n, d.c, d.ho, d.wo], out)?, arg))
}

/// Average pooling; padded taps count towards the divisor.
pub(crate) fn avg_pool_forward(x: &Tensor, geom: PoolGeometry) -> Result<Tensor> {
    let d = PoolDims::resolve(x.shape(), geom)?;
    let scale = 1.0 / (geom.kernel.0 * geom.kernel.1) as f64;
    let mut out = vec![0.0; d.out_len()];
    let data = x.data();
    d.for_each_tap(|o, i| out[o] += data[i]);
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(&[d.n, d.c, d.ho, d.wo], out)
}

pub(crate) fn avg_pool_backward(input_shape: &[usize], geom: PoolGeometry, dout: &[f64]) -> Result<Vec<f64>> {
    let d = PoolDims::resolve(input_shape, geom)?;
    let scale = 1.0 / (geom.kernel.0 * geom.kernel.1) as f64;
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    d.for_each_tap(|o, i| dx[i] += dout[o] * scale);
    Ok(dx)
}
