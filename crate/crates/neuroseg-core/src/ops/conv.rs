//! 3D convolution family.
//!
//! Data layout is `[batch, channel, depth, height, width]` with width
//! fastest. All hot loops are written so the innermost loop walks
//! contiguous rows of both operands whenever the width stride is 1, which
//! lets the compiler vectorize them; strided cases fall back to stepped
//! loops.

use alloc::format;
use alloc::vec;

use crate::error::{CoreError, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

fn rank5<'a, T: Scalar>(op: &'static str, t: &'a Tensor<T>) -> Result<&'a [usize]> {
    if t.shape().len() != 5 {
        return Err(CoreError::shape(
            op,
            format!("expected [B, C, D, H, W], got {}", shape_string(t.shape())),
        ));
    }
    Ok(t.shape())
}

/// Floor-division output extent of a padded, strided window sweep.
fn out_extent(op: &'static str, e: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(CoreError::shape(op, "stride must be positive"));
    }
    if e + 2 * pad < k {
        return Err(CoreError::shape(
            op,
            format!("extent {e} with padding {pad} is smaller than kernel {k}"),
        ));
    }
    Ok((e + 2 * pad - k) / stride + 1)
}

/// Output index range `[lo, hi)` for which `o*stride + k_off - pad` lands
/// inside `[0, e_in)`. Returns an empty range when no index is valid.
fn axis_span(e_in: usize, e_out: usize, k_off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let (e_in, e_out) = (e_in as i64, e_out as i64);
    let (k_off, pad, stride) = (k_off as i64, pad as i64, stride as i64);
    let lo = if pad > k_off { (pad - k_off + stride - 1) / stride } else { 0 };
    let hi = if e_in - 1 + pad - k_off < 0 {
        0
    } else {
        ((e_in - 1 + pad - k_off) / stride + 1).min(e_out)
    };
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    input: [usize; 3],
    output: [usize; 3],
}

impl ConvDims {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }
}

/// One scatter/gather pass shared by the convolution forward and its input
/// gradient: `dst[.., o..] (+)= w * src[.., i..]` over all valid window
/// placements. `src_is_input` selects which side uses input coordinates.
fn conv_accumulate<T: Scalar>(
    dims: &ConvDims,
    weights: &[T],
    src: &[T],
    dst: &mut [T],
    src_is_input: bool,
) {
    let [kd, kh, kw] = dims.kernel;
    let [sz, sy, sx] = dims.stride;
    let [pz, py, px] = dims.padding;
    let [id, ih, iw] = dims.input;
    let [od, oh, ow] = dims.output;
    let in_vol = dims.in_volume();
    let out_vol = dims.out_volume();
    let (src_vol, dst_vol) = if src_is_input { (in_vol, out_vol) } else { (out_vol, in_vol) };

    for b in 0..dims.batch {
        for co in 0..dims.c_out {
            let dst_c = if src_is_input { co } else { 0 };
            for ci in 0..dims.c_in {
                let (src_c, w_base) = if src_is_input {
                    (ci, (co * dims.c_in + ci) * kd * kh * kw)
                } else {
                    (co, (co * dims.c_in + ci) * kd * kh * kw)
                };
                let src_base = if src_is_input {
                    (b * dims.c_in + src_c) * src_vol
                } else {
                    (b * dims.c_out + src_c) * src_vol
                };
                let dst_base = if src_is_input {
                    (b * dims.c_out + dst_c) * dst_vol
                } else {
                    (b * dims.c_in + ci) * dst_vol
                };

                for dz in 0..kd {
                    let (zlo, zhi) = axis_span(id, od, dz, pz, sz);
                    for dy in 0..kh {
                        let (ylo, yhi) = axis_span(ih, oh, dy, py, sy);
                        for dx in 0..kw {
                            let (xlo, xhi) = axis_span(iw, ow, dx, px, sx);
                            if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                                continue;
                            }
                            let wv = weights[w_base + (dz * kh + dy) * kw + dx];
                            if wv == T::zero() {
                                continue;
                            }
                            for zo in zlo..zhi {
                                let zi = zo * sz + dz - pz;
                                for yo in ylo..yhi {
                                    let yi = yo * sy + dy - py;
                                    let in_row = src_base
                                        + (if src_is_input { (zi * ih + yi) * iw } else { (zo * oh + yo) * ow });
                                    let out_row = dst_base
                                        + (if src_is_input { (zo * oh + yo) * ow } else { (zi * ih + yi) * iw });
                                    let n = xhi - xlo;
                                    if sx == 1 {
                                        let xi0 = xlo + dx - px;
                                        let (src_off, dst_off) = if src_is_input {
                                            (in_row + xi0, out_row + xlo)
                                        } else {
                                            (in_row + xlo, out_row + xi0)
                                        };
                                        let s = &src[src_off..src_off + n];
                                        let d = &mut dst[dst_off..dst_off + n];
                                        for (dv, &sv) in d.iter_mut().zip(s) {
                                            *dv += wv * sv;
                                        }
                                    } else {
                                        for xo in xlo..xhi {
                                            let xi = xo * sx + dx - px;
                                            let (si, di) = if src_is_input {
                                                (in_row + xi, out_row + xo)
                                            } else {
                                                (in_row + xo, out_row + xi)
                                            };
                                            dst[di] += wv * src[si];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient: `dw[co, ci, k] = sum over windows of g . x`.
fn conv_weight_grad<T: Scalar>(dims: &ConvDims, x: &[T], g: &[T], dw: &mut [T]) {
    let [kd, kh, kw] = dims.kernel;
    let [sz, sy, sx] = dims.stride;
    let [pz, py, px] = dims.padding;
    let [id, ih, iw] = dims.input;
    let [od, oh, ow] = dims.output;
    let in_vol = dims.in_volume();
    let out_vol = dims.out_volume();

    for b in 0..dims.batch {
        for co in 0..dims.c_out {
            let g_base = (b * dims.c_out + co) * out_vol;
            for ci in 0..dims.c_in {
                let x_base = (b * dims.c_in + ci) * in_vol;
                let w_base = (co * dims.c_in + ci) * kd * kh * kw;
                for dz in 0..kd {
                    let (zlo, zhi) = axis_span(id, od, dz, pz, sz);
                    for dy in 0..kh {
                        let (ylo, yhi) = axis_span(ih, oh, dy, py, sy);
                        for dx in 0..kw {
                            let (xlo, xhi) = axis_span(iw, ow, dx, px, sx);
                            if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for zo in zlo..zhi {
                                let zi = zo * sz + dz - pz;
                                for yo in ylo..yhi {
                                    let yi = yo * sy + dy - py;
                                    let g_row = g_base + (zo * oh + yo) * ow;
                                    let x_row = x_base + (zi * ih + yi) * iw;
                                    if sx == 1 {
                                        let xi0 = xlo + dx - px;
                                        let n = xhi - xlo;
                                        let gs = &g[g_row + xlo..g_row + xlo + n];
                                        let xs = &x[x_row + xi0..x_row + xi0 + n];
                                        for (&gv, &xv) in gs.iter().zip(xs) {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for xo in xlo..xhi {
                                            let xi = xo * sx + dx - px;
                                            acc += g[g_row + xo] * x[x_row + xi];
                                        }
                                    }
                                }
                            }
                            dw[w_base + (dz * kh + dy) * kw + dx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 3D cross-correlation with bias, zero padding, and positive strides.
///
/// `x: [B, Ci, D, H, W]`, `w: [Co, Ci, kd, kh, kw]`, `b: [Co]`.
/// Output extent per axis is `(e + 2*pad - k) / stride + 1`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<T>> {
    let xs = rank5("conv3d", x)?;
    if w.shape().len() != 5 {
        return Err(CoreError::shape(
            "conv3d",
            format!("expected weights [Co, Ci, kd, kh, kw], got {}", shape_string(w.shape())),
        ));
    }
    let (batch, c_in) = (xs[0], xs[1]);
    let (c_out, w_cin) = (w.shape()[0], w.shape()[1]);
    if w_cin != c_in {
        return Err(CoreError::shape(
            "conv3d",
            format!("weight channel axis {w_cin} does not match input channels {c_in}"),
        ));
    }
    if b.shape() != [c_out] {
        return Err(CoreError::shape(
            "conv3d",
            format!("bias must be [{c_out}], got {}", shape_string(b.shape())),
        ));
    }
    let kernel = [w.shape()[2], w.shape()[3], w.shape()[4]];
    let input = [xs[2], xs[3], xs[4]];
    let mut output = [0usize; 3];
    for a in 0..3 {
        output[a] = out_extent("conv3d", input[a], kernel[a], padding[a], stride[a])?;
    }
    let dims = ConvDims { batch, c_in, c_out, kernel, stride, padding, input, output };

    let out_vol = dims.out_volume();
    let mut data = vec![T::zero(); batch * c_out * out_vol];
    for bi in 0..batch {
        for co in 0..c_out {
            let base = (bi * c_out + co) * out_vol;
            let bias = b.data()[co];
            data[base..base + out_vol].fill(bias);
        }
    }
    conv_accumulate(&dims, w.data(), x.data(), &mut data, true);

    let shape = vec![batch, c_out, output[0], output[1], output[2]];
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        "conv3d",
        shape,
        data,
        vec![x.clone(), w.clone(), b.clone()],
        move |g| {
            let dims = ConvDims { batch, c_in, c_out, kernel, stride, padding, input, output };
            let dx = xc.requires_grad().then(|| {
                let mut dx = vec![T::zero(); xc.len()];
                conv_accumulate(&dims, wc.data(), g, &mut dx, false);
                dx
            });
            let dw = wc.requires_grad().then(|| {
                let mut dw = vec![T::zero(); wc.len()];
                conv_weight_grad(&dims, xc.data(), g, &mut dw);
                dw
            });
            let db = bc.requires_grad().then(|| {
                let mut db = vec![T::zero(); c_out];
                let out_vol = dims.out_volume();
                for bi in 0..batch {
                    for co in 0..c_out {
                        let row = &g[(bi * c_out + co) * out_vol..(bi * c_out + co + 1) * out_vol];
                        db[co] += row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    )
}

/// Pointwise (1x1x1) convolution over a flattened grid.
///
/// `x: [S, Ci]` holds one feature row per spatial site; `w: [Co, Ci]`,
/// `b: [Co]`. Equivalent to a kernel-size-1 `conv3d` but avoids the 5D
/// bookkeeping where the grid is already flattened.
pub fn unit_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(CoreError::shape(
            "unit_conv",
            format!(
                "expected x [S, Ci] and w [Co, Ci], got {} and {}",
                shape_string(x.shape()),
                shape_string(w.shape())
            ),
        ));
    }
    let (sites, c_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, w_cin) = (w.shape()[0], w.shape()[1]);
    if w_cin != c_in {
        return Err(CoreError::shape(
            "unit_conv",
            format!("weight channel axis {w_cin} does not match input channels {c_in}"),
        ));
    }
    if b.shape() != [c_out] {
        return Err(CoreError::shape(
            "unit_conv",
            format!("bias must be [{c_out}], got {}", shape_string(b.shape())),
        ));
    }

    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut data = vec![T::zero(); sites * c_out];
    for s in 0..sites {
        let xrow = &xd[s * c_in..(s + 1) * c_in];
        let orow = &mut data[s * c_out..(s + 1) * c_out];
        for (o, out) in orow.iter_mut().enumerate() {
            let wrow = &wd[o * c_in..(o + 1) * c_in];
            let mut acc = bd[o];
            for (&xv, &wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *out = acc;
        }
    }

    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        "unit_conv",
        vec![sites, c_out],
        data,
        vec![x.clone(), w.clone(), b.clone()],
        move |g| {
            let (xd, wd) = (xc.data(), wc.data());
            let dx = xc.requires_grad().then(|| {
                let mut dx = vec![T::zero(); sites * c_in];
                for s in 0..sites {
                    let grow = &g[s * c_out..(s + 1) * c_out];
                    let drow = &mut dx[s * c_in..(s + 1) * c_in];
                    for (o, &gv) in grow.iter().enumerate() {
                        let wrow = &wd[o * c_in..(o + 1) * c_in];
                        for (d, &wv) in drow.iter_mut().zip(wrow) {
                            *d += gv * wv;
                        }
                    }
                }
                dx
            });
            let dw = wc.requires_grad().then(|| {
                let mut dw = vec![T::zero(); c_out * c_in];
                for s in 0..sites {
                    let grow = &g[s * c_out..(s + 1) * c_out];
                    let xrow = &xd[s * c_in..(s + 1) * c_in];
                    for (o, &gv) in grow.iter().enumerate() {
                        let wrow = &mut dw[o * c_in..(o + 1) * c_in];
                        for (d, &xv) in wrow.iter_mut().zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
                dw
            });
            let db = bc.requires_grad().then(|| {
                let mut db = vec![T::zero(); c_out];
                for s in 0..sites {
                    let grow = &g[s * c_out..(s + 1) * c_out];
                    for (d, &gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    )
}

/// Transposed convolution (fractionally strided), no padding.
///
/// `x: [B, Ci, D, H, W]`, `w: [Ci, Co, kd, kh, kw]`, `b: [Co]`.
/// Output extent per axis is `(e - 1) * stride + k`.
pub fn conv_transpose3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let xs = rank5("conv_transpose3d", x)?;
    if w.shape().len() != 5 {
        return Err(CoreError::shape(
            "conv_transpose3d",
            format!("expected weights [Ci, Co, kd, kh, kw], got {}", shape_string(w.shape())),
        ));
    }
    let (batch, c_in) = (xs[0], xs[1]);
    if w.shape()[0] != c_in {
        return Err(CoreError::shape(
            "conv_transpose3d",
            format!("weight input axis {} does not match input channels {c_in}", w.shape()[0]),
        ));
    }
    let c_out = w.shape()[1];
    if b.shape() != [c_out] {
        return Err(CoreError::shape(
            "conv_transpose3d",
            format!("bias must be [{c_out}], got {}", shape_string(b.shape())),
        ));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(CoreError::shape("conv_transpose3d", "stride must be positive"));
    }
    let kernel = [w.shape()[2], w.shape()[3], w.shape()[4]];
    let input = [xs[2], xs[3], xs[4]];
    let mut output = [0usize; 3];
    for a in 0..3 {
        if input[a] == 0 {
            return Err(CoreError::shape("conv_transpose3d", "input extent must be positive"));
        }
        output[a] = (input[a] - 1) * stride[a] + kernel[a];
    }

    let in_vol: usize = input.iter().product();
    let out_vol: usize = output.iter().product();
    let [kd, kh, kw] = kernel;
    let [sz, sy, sx] = stride;
    let [od, oh, ow] = output;
    let [_, ih, iw] = input;

    let mut data = vec![T::zero(); batch * c_out * out_vol];
    for bi in 0..batch {
        for co in 0..c_out {
            let base = (bi * c_out + co) * out_vol;
            data[base..base + out_vol].fill(b.data()[co]);
        }
    }
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..batch {
        for ci in 0..c_in {
            let x_base = (bi * c_in + ci) * in_vol;
            for co in 0..c_out {
                let o_base = (bi * c_out + co) * out_vol;
                let w_block = ((ci * c_out + co) * kd * kh * kw) as usize;
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wv = wd[w_block + (dz * kh + dy) * kw + dx];
                            if wv == T::zero() {
                                continue;
                            }
                            for zi in 0..input[0] {
                                let zo = zi * sz + dz;
                                for yi in 0..ih {
                                    let yo = yi * sy + dy;
                                    let x_row = x_base + (zi * ih + yi) * iw;
                                    let o_row = o_base + (zo * oh + yo) * ow + dx;
                                    for xi in 0..iw {
                                        data[o_row + xi * sx] += wv * xd[x_row + xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let shape = vec![batch, c_out, od, oh, ow];
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        "conv_transpose3d",
        shape,
        data,
        vec![x.clone(), w.clone(), b.clone()],
        move |g| {
            let (xd, wd) = (xc.data(), wc.data());
            let dx = xc.requires_grad().then(|| {
                let mut dx = vec![T::zero(); xc.len()];
                for bi in 0..batch {
                    for ci in 0..c_in {
                        let x_base = (bi * c_in + ci) * in_vol;
                        for co in 0..c_out {
                            let g_base = (bi * c_out + co) * out_vol;
                            let w_block = (ci * c_out + co) * kd * kh * kw;
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dxk in 0..kw {
                                        let wv = wd[w_block + (dz * kh + dy) * kw + dxk];
                                        if wv == T::zero() {
                                            continue;
                                        }
                                        for zi in 0..input[0] {
                                            let zo = zi * sz + dz;
                                            for yi in 0..ih {
                                                let yo = yi * sy + dy;
                                                let x_row = x_base + (zi * ih + yi) * iw;
                                                let g_row = g_base + (zo * oh + yo) * ow + dxk;
                                                for xi in 0..iw {
                                                    dx[x_row + xi] += wv * g[g_row + xi * sx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            });
            let dw = wc.requires_grad().then(|| {
                let mut dw = vec![T::zero(); wc.len()];
                for bi in 0..batch {
                    for ci in 0..c_in {
                        let x_base = (bi * c_in + ci) * in_vol;
                        for co in 0..c_out {
                            let g_base = (bi * c_out + co) * out_vol;
                            let w_block = (ci * c_out + co) * kd * kh * kw;
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dxk in 0..kw {
                                        let mut acc = T::zero();
                                        for zi in 0..input[0] {
                                            let zo = zi * sz + dz;
                                            for yi in 0..ih {
                                                let yo = yi * sy + dy;
                                                let x_row = x_base + (zi * ih + yi) * iw;
                                                let g_row = g_base + (zo * oh + yo) * ow + dxk;
                                                for xi in 0..iw {
                                                    acc += xd[x_row + xi] * g[g_row + xi * sx];
                                                }
                                            }
                                        }
                                        dw[w_block + (dz * kh + dy) * kw + dxk] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                dw
            });
            let db = bc.requires_grad().then(|| {
                let mut db = vec![T::zero(); c_out];
                for bi in 0..batch {
                    for co in 0..c_out {
                        let row = &g[(bi * c_out + co) * out_vol..(bi * c_out + co + 1) * out_vol];
                        db[co] += row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    )
}

/// Nearest-neighbour upsampling by 2 along all three spatial axes.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = rank5("upsample_nearest2x", x)?;
    let (batch, chans) = (xs[0], xs[1]);
    let [d, h, w] = [xs[2], xs[3], xs[4]];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;

    let xd = x.data();
    let mut data = vec![T::zero(); batch * chans * out_vol];
    for bc in 0..batch * chans {
        let src = &xd[bc * in_vol..(bc + 1) * in_vol];
        let dst = &mut data[bc * out_vol..(bc + 1) * out_vol];
        for zo in 0..od {
            let zi = zo / 2;
            for yo in 0..oh {
                let yi = yo / 2;
                let s_row = (zi * h + yi) * w;
                let d_row = (zo * oh + yo) * ow;
                for xo in 0..ow {
                    dst[d_row + xo] = src[s_row + xo / 2];
                }
            }
        }
    }

    let nx = x.requires_grad();
    Tensor::from_op(
        "upsample_nearest2x",
        vec![batch, chans, od, oh, ow],
        data,
        vec![x.clone()],
        move |g| {
            vec![nx.then(|| {
                let mut dx = vec![T::zero(); batch * chans * in_vol];
                for bc in 0..batch * chans {
                    let gsrc = &g[bc * out_vol..(bc + 1) * out_vol];
                    let dst = &mut dx[bc * in_vol..(bc + 1) * in_vol];
                    for zo in 0..od {
                        let zi = zo / 2;
                        for yo in 0..oh {
                            let yi = yo / 2;
                            let g_row = (zo * oh + yo) * ow;
                            let d_row = (zi * h + yi) * w;
                            for xo in 0..ow {
                                dst[d_row + xo / 2] += gsrc[g_row + xo];
                            }
                        }
                    }
                }
                dx
            })]
        },
    )
}
