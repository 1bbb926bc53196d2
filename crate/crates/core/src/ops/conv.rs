//! Grouped 2-D cross-correlation (im2col + GEMM), its 1-D special case and
//! the strided transpose used for up-sampling.
//!
//! Weights follow the `[out_channels, in_channels / groups, kh, kw]` layout.
//! A transpose convolution reuses the weight of the convolution it is the
//! adjoint of, so its weight is `[in_channels, out_channels / groups, kh, kw]`.

use crate::error::{DnaError, Result};
use crate::ops::gemm::gemm;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride: (stride, stride),
            pad: (pad, pad),
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, pad: usize, groups: usize) -> Self {
        ConvSpec {
            groups,
            ..ConvSpec::new(stride, pad)
        }
    }

    /// Along one row only; used for the 1-D filters.
    pub fn row(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride: (1, stride),
            pad: (0, pad),
            groups: 1,
        }
    }

    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if kh > ph || kw > pw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}

struct Dims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Dims {
    fn cg_in(&self) -> usize {
        self.c_in / self.groups
    }
    fn cg_out(&self) -> usize {
        self.c_out / self.groups
    }
    fn k_cols(&self) -> usize {
        self.cg_in() * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.ho, self.wo]
    }
}

fn dims(op: &'static str, x_shape: &[usize], w: &Tensor, spec: ConvSpec) -> Result<Dims> {
    if x_shape.len() != 4 || w.rank() != 4 {
        return Err(DnaError::shape(
            op,
            format!(
                "input {:?} and weight {:?} must be rank 4",
                x_shape,
                w.shape()
            ),
        ));
    }
    let (batch, c_in, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, cg_in, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let groups = spec.groups.max(1);
    if c_in % groups != 0 || c_out % groups != 0 || cg_in * groups != c_in {
        return Err(DnaError::shape(
            op,
            format!(
                "{} input channels, weight {:?}, {} groups",
                c_in,
                w.shape(),
                groups
            ),
        ));
    }
    let (ho, wo) = spec.out_size(h, wd, kh, kw).ok_or_else(|| {
        DnaError::shape(
            op,
            format!(
                "kernel {}x{} larger than padded input {}x{} (pad {:?}, stride {:?})",
                kh, kw, h, wd, spec.pad, spec.stride
            ),
        )
    })?;
    Ok(Dims {
        batch,
        c_in,
        h,
        w: wd,
        c_out,
        kh,
        kw,
        ho,
        wo,
        groups,
    })
}

/// Output columns `ox` whose input column `ox * sw + kj - pw` lies inside
/// `[0, w)`, as a half-open range.
fn valid_cols(wo: usize, w: usize, sw: usize, kj: usize, pw: usize) -> (usize, usize) {
    // ox * sw + kj >= pw  and  ox * sw + kj < w + pw
    let lo = if kj >= pw { 0 } else { (pw - kj + sw - 1) / sw };
    let hi = if w + pw > kj {
        ((w + pw - kj + sw - 1) / sw).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[Real], d: &Dims, spec: ConvSpec, c0: usize, cols: &mut [Real]) {
    let plane = d.out_plane();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    for c in 0..d.cg_in() {
        let src = &x[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(d.wo, d.w, sw, kj, pw);
                for oy in 0..d.ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let first = lo * sw + kj - pw;
                    if sw == 1 {
                        out[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (o, s) in out[lo..hi]
                            .iter_mut()
                            .zip(src_row[first..].iter().step_by(sw))
                        {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[Real], d: &Dims, spec: ConvSpec, c0: usize, dx: &mut [Real]) {
    let plane = d.out_plane();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    for c in 0..d.cg_in() {
        let dst = &mut dx[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(d.wo, d.w, sw, kj, pw);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let first = lo * sw + kj - pw;
                    let s = &src[oy * d.wo + lo..oy * d.wo + hi];
                    if sw == 1 {
                        for (o, v) in dst_row[first..first + hi - lo].iter_mut().zip(s) {
                            *o += v;
                        }
                    } else {
                        for (o, v) in dst_row[first..].iter_mut().step_by(sw).zip(s) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, b: Option<&Tensor>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != channels => Err(DnaError::shape(
            op,
            format!("bias has {} entries, expected {}", b.len(), channels),
        )),
        _ => Ok(()),
    }
}

fn add_bias(y: &mut [Real], b: Option<&Tensor>, channels: usize, plane: usize) {
    if let Some(b) = b {
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let d = dims("conv2d", x.shape(), w, spec)?;
    check_bias("conv2d", b, d.c_out)?;
    let plane = d.out_plane();
    let kc = d.k_cols();
    let mut y = vec![0.0; d.batch * d.c_out * plane];
    let mut cols = vec![0.0; kc * plane];
    let in_item = d.c_in * d.h * d.w;
    for bi in 0..d.batch {
        let xb = &x.data()[bi * in_item..(bi + 1) * in_item];
        for g in 0..d.groups {
            im2col(xb, &d, spec, g * d.cg_in(), &mut cols);
            let wg = &w.data()[g * d.cg_out() * kc..(g + 1) * d.cg_out() * kc];
            let off = (bi * d.c_out + g * d.cg_out()) * plane;
            let yg = &mut y[off..off + d.cg_out() * plane];
            gemm(
                d.cg_out(),
                kc,
                plane,
                1.0,
                wg,
                kc as isize,
                1,
                &cols,
                plane as isize,
                1,
                0.0,
                yg,
                plane as isize,
                1,
            );
        }
    }
    add_bias(&mut y, b, d.c_out, plane);
    Tensor::from_vec(&d.out_shape(), y)
}

/// Gradient w.r.t. the input of [`conv2d_forward`]; equivalently the
/// transpose (adjoint) convolution applied to `dy`.
pub fn conv2d_input_grad(
    dy: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    x_shape: &[usize],
) -> Result<Tensor> {
    let d = dims("conv2d_input_grad", x_shape, w, spec)?;
    dy.expect_shape("conv2d_input_grad", &d.out_shape())?;
    if spec.stride == (1, 1) && spec.pad.0 < d.kh && spec.pad.1 < d.kw {
        // a stride-1 adjoint is itself a correlation with the flipped,
        // channel-transposed kernel, which runs on the faster forward path
        let flipped = flip_transpose(w, d.groups)?;
        let adj = ConvSpec {
            stride: (1, 1),
            pad: (d.kh - 1 - spec.pad.0, d.kw - 1 - spec.pad.1),
            groups: d.groups,
        };
        return conv2d_forward(dy, &flipped, None, adj);
    }
    let plane = d.out_plane();
    let kc = d.k_cols();
    let in_item = d.c_in * d.h * d.w;
    let mut dx = vec![0.0; d.batch * in_item];
    let mut cols = vec![0.0; kc * plane];
    for bi in 0..d.batch {
        for g in 0..d.groups {
            let wg = &w.data()[g * d.cg_out() * kc..(g + 1) * d.cg_out() * kc];
            let off = (bi * d.c_out + g * d.cg_out()) * plane;
            let dyg = &dy.data()[off..off + d.cg_out() * plane];
            // cols = wg^T * dyg
            gemm(
                kc,
                d.cg_out(),
                plane,
                1.0,
                wg,
                1,
                kc as isize,
                dyg,
                plane as isize,
                1,
                0.0,
                &mut cols,
                plane as isize,
                1,
            );
            col2im(
                &cols,
                &d,
                spec,
                g * d.cg_in(),
                &mut dx[bi * in_item..(bi + 1) * in_item],
            );
        }
    }
    Tensor::from_vec(x_shape, dx)
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    // eight independent lanes so the loop vectorises
    let mut acc = [0.0 as Real; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: Real = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<Real>() + tail
}

/// Stride-1 weight gradient as row dot products, without im2col.
fn weight_grad_direct(x: &[Real], dy: &[Real], d: &Dims, spec: ConvSpec, dw: &mut [Real]) {
    let (ph, pw) = spec.pad;
    let (cg_in, cg_out) = (d.cg_in(), d.cg_out());
    let k = d.kh * d.kw;
    let plane = d.out_plane();
    let ranges: Vec<(usize, usize)> = (0..d.kw)
        .map(|kj| valid_cols(d.wo, d.w, 1, kj, pw))
        .collect();
    for bi in 0..d.batch {
        for g in 0..d.groups {
            for ci in 0..cg_in {
                let xp = &x[((bi * d.c_in) + g * cg_in + ci) * d.h * d.w..][..d.h * d.w];
                for co in 0..cg_out {
                    let dyp = &dy[((bi * d.c_out) + g * cg_out + co) * plane..][..plane];
                    let wk = &mut dw[((g * cg_out + co) * cg_in + ci) * k..][..k];
                    for ki in 0..d.kh {
                        for oy in 0..d.ho {
                            let iy = (oy + ki) as isize - ph as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = &xp[iy as usize * d.w..][..d.w];
                            let drow = &dyp[oy * d.wo..][..d.wo];
                            for (kj, &(lo, hi)) in ranges.iter().enumerate() {
                                if lo < hi {
                                    let first = lo + kj - pw;
                                    wk[ki * d.kw + kj] +=
                                        dot(&drow[lo..hi], &xrow[first..first + hi - lo]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[c_out, cg_in, kh, kw]` to `[c_in, cg_out, kh, kw]`, rotating each
/// kernel by 180 degrees and swapping channel roles within each group.
fn flip_transpose(w: &Tensor, groups: usize) -> Result<Tensor> {
    let (c_out, cg_in, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let cg_out = c_out / groups;
    let mut out = vec![0.0; w.len()];
    let k = kh * kw;
    for g in 0..groups {
        for co in 0..cg_out {
            for ci in 0..cg_in {
                let src = &w.data()[((g * cg_out + co) * cg_in + ci) * k..][..k];
                let dst = &mut out[((g * cg_in + ci) * cg_out + co) * k..][..k];
                for (t, v) in src.iter().enumerate() {
                    dst[k - 1 - t] = *v;
                }
            }
        }
    }
    Tensor::from_vec(&[groups * cg_in, cg_out, kh, kw], out)
}

/// Accumulates the weight gradient of [`conv2d_forward`] into `dw`.
pub fn conv2d_weight_grad(
    x: &Tensor,
    dy: &Tensor,
    spec: ConvSpec,
    w_shape: &[usize],
    dw: &mut [Real],
) -> Result<()> {
    let probe = Tensor::zeros(w_shape);
    let d = dims("conv2d_weight_grad", x.shape(), &probe, spec)?;
    dy.expect_shape("conv2d_weight_grad", &d.out_shape())?;
    if dw.len() != probe.len() {
        return Err(DnaError::shape(
            "conv2d_weight_grad",
            format!("gradient buffer of {} for weight {:?}", dw.len(), w_shape),
        ));
    }
    let plane = d.out_plane();
    let kc = d.k_cols();
    let in_item = d.c_in * d.h * d.w;
    if spec.stride == (1, 1) {
        weight_grad_direct(x.data(), dy.data(), &d, spec, dw);
        return Ok(());
    }
    let mut cols = vec![0.0; kc * plane];
    for bi in 0..d.batch {
        let xb = &x.data()[bi * in_item..(bi + 1) * in_item];
        for g in 0..d.groups {
            im2col(xb, &d, spec, g * d.cg_in(), &mut cols);
            let off = (bi * d.c_out + g * d.cg_out()) * plane;
            let dyg = &dy.data()[off..off + d.cg_out() * plane];
            let dwg = &mut dw[g * d.cg_out() * kc..(g + 1) * d.cg_out() * kc];
            // dwg^T += cols * dyg^T
            gemm(
                kc,
                plane,
                d.cg_out(),
                1.0,
                &cols,
                plane as isize,
                1,
                dyg,
                1,
                plane as isize,
                1.0,
                dwg,
                1,
                kc as isize,
            );
        }
    }
    Ok(())
}

/// Accumulates per-channel sums of a `[B, C, H, W]` cotangent into `db`.
pub fn bias_grad(dy: &Tensor, db: &mut [Real]) {
    let c = dy.dim(1);
    let plane = dy.len() / (dy.dim(0) * c);
    for (i, chunk) in dy.data().chunks(plane).enumerate() {
        let s: f64 = chunk.iter().map(|&v| v as f64).sum();
        db[i % c] += s as Real;
    }
}

/// Standard 2-D cross-correlation, square stride and padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    zero_pad: usize,
) -> Result<Tensor> {
    conv2d_forward(x, w, Some(b), ConvSpec::new(stride, zero_pad))
}

/// 1-D cross-correlation of `[B, C, L]` with `[C_out, C, K]`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    zero_pad: usize,
) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(DnaError::shape(
            "conv1d",
            format!(
                "input {:?} / weight {:?} must be rank 3",
                x.shape(),
                w.shape()
            ),
        ));
    }
    let (bt, c, l) = (x.dim(0), x.dim(1), x.dim(2));
    let x4 = x.clone().reshape(&[bt, c, 1, l])?;
    let w4 = w.clone().reshape(&[w.dim(0), w.dim(1), 1, w.dim(2)])?;
    let y = conv2d_forward(&x4, &w4, Some(b), ConvSpec::row(stride, zero_pad))?;
    let lo = y.dim(3);
    y.reshape(&[bt, w.dim(0), lo])
}

/// Strided transpose convolution producing an `out_hw` map: the adjoint of
/// `conv2d_forward(., w, spec)` on `out_hw` inputs, plus a bias. The target
/// must be exactly `stride` times the input size.
pub fn conv2d_transpose_to(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: ConvSpec,
    out_hw: (usize, usize),
) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(DnaError::shape(
            "conv2d_transpose",
            "rank-4 tensors required",
        ));
    }
    let (sh, sw) = spec.stride;
    if out_hw.0 != x.dim(2) * sh || out_hw.1 != x.dim(3) * sw {
        return Err(DnaError::shape(
            "conv2d_transpose",
            format!(
                "target {}x{} is not stride {:?} times input {}x{}",
                out_hw.0,
                out_hw.1,
                spec.stride,
                x.dim(2),
                x.dim(3)
            ),
        ));
    }
    let c_out = w.dim(1) * spec.groups.max(1);
    let out_shape = [x.dim(0), c_out, out_hw.0, out_hw.1];
    let d = dims("conv2d_transpose", &out_shape, w, spec)?;
    if (d.ho, d.wo) != (x.dim(2), x.dim(3)) || d.c_out != x.dim(1) {
        return Err(DnaError::shape(
            "conv2d_transpose",
            format!(
                "target {}x{} does not down-sample to input {:?}",
                out_hw.0,
                out_hw.1,
                x.shape()
            ),
        ));
    }
    check_bias("conv2d_transpose", b, c_out)?;
    let mut y = conv2d_input_grad(x, w, spec, &out_shape)?;
    add_bias(y.data_mut(), b, c_out, out_hw.0 * out_hw.1);
    Ok(y)
}

/// Up-sampling transpose convolution: 3x3-style kernels with padding
/// `k / 2` and the given stride; output spatial dims are `stride * input`.
pub fn conv2d_transpose(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(DnaError::shape(
            "conv2d_transpose",
            "rank-4 tensors required",
        ));
    }
    let spec = ConvSpec::new(stride, w.dim(2) / 2);
    conv2d_transpose_to(x, w, Some(b), spec, (x.dim(2) * stride, x.dim(3) * stride))
}
