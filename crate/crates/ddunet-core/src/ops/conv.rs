//! Direct 2-D convolution kernels and their gradient rules.
//!
//! One shared set of slice-level kernels backs both the static `conv2d` and
//! the per-sample `dynamic_conv2d`, so the B=1 dynamic case reproduces the
//! static path bit for bit.

use super::{four_dims, track};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_pg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
}

fn out_extent(i: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = i + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Valid output range [lo, hi) along one axis for kernel tap `k`, i.e. the
/// positions whose source index `o*stride + k*dilation - padding` is in
/// bounds. Lets the inner loops run without bounds branches.
fn tap_window(k: usize, in_len: usize, out_len: usize, d: &ConvDims) -> (usize, usize) {
    let off = k as isize * d.dilation as isize - d.padding as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(d.stride)
    };
    // `o*stride + off < in_len`
    let hi_excl = in_len as isize - off;
    if hi_excl <= 0 {
        return (0, 0);
    }
    let hi = ((hi_excl as usize - 1) / d.stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn forward_sample<T: Scalar>(
    inp: &[T],
    wgt: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    d: &ConvDims,
) {
    let hw = d.h * d.w;
    let ohw = d.oh * d.ow;
    let cout_pg = d.cout / d.groups;
    for co in 0..d.cout {
        let out_plane = &mut out[co * ohw..(co + 1) * ohw];
        if let Some(b) = bias {
            out_plane.fill(b[co]);
        }
        let g = co / cout_pg;
        for ci_local in 0..d.cin_pg {
            let ci = g * d.cin_pg + ci_local;
            let in_plane = &inp[ci * hw..(ci + 1) * hw];
            for ku in 0..d.kh {
                let (ylo, yhi) = tap_window(ku, d.h, d.oh, d);
                for kv in 0..d.kw {
                    let (xlo, xhi) = tap_window(kv, d.w, d.ow, d);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = wgt[((co * d.cin_pg + ci_local) * d.kh + ku) * d.kw + kv];
                    let xoff = (xlo * d.stride) as isize + (kv * d.dilation) as isize
                        - d.padding as isize;
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ku * d.dilation - d.padding;
                        let irow = &in_plane[iy * d.w..(iy + 1) * d.w];
                        let orow = &mut out_plane[oy * d.ow..(oy + 1) * d.ow];
                        let mut ix = xoff as usize;
                        if d.stride == 1 {
                            let src = &irow[ix..ix + (xhi - xlo)];
                            for (o, &i) in orow[xlo..xhi].iter_mut().zip(src) {
                                *o = *o + wv * i;
                            }
                        } else {
                            for o in orow[xlo..xhi].iter_mut() {
                                *o = *o + wv * irow[ix];
                                ix += d.stride;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_input_sample<T: Scalar>(gout: &[T], wgt: &[T], ginp: &mut [T], d: &ConvDims) {
    let hw = d.h * d.w;
    let ohw = d.oh * d.ow;
    let cout_pg = d.cout / d.groups;
    for co in 0..d.cout {
        let g_plane = &gout[co * ohw..(co + 1) * ohw];
        let g = co / cout_pg;
        for ci_local in 0..d.cin_pg {
            let ci = g * d.cin_pg + ci_local;
            let gi_plane = &mut ginp[ci * hw..(ci + 1) * hw];
            for ku in 0..d.kh {
                let (ylo, yhi) = tap_window(ku, d.h, d.oh, d);
                for kv in 0..d.kw {
                    let (xlo, xhi) = tap_window(kv, d.w, d.ow, d);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = wgt[((co * d.cin_pg + ci_local) * d.kh + ku) * d.kw + kv];
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ku * d.dilation - d.padding;
                        let grow = &g_plane[oy * d.ow..(oy + 1) * d.ow];
                        let girow = &mut gi_plane[iy * d.w..(iy + 1) * d.w];
                        let mut ix = xlo * d.stride + kv * d.dilation - d.padding;
                        for &gv in grow[xlo..xhi].iter() {
                            girow[ix] = girow[ix] + wv * gv;
                            ix += d.stride;
                        }
                    }
                }
            }
        }
    }
}

fn backward_weight_sample<T: Scalar>(gout: &[T], inp: &[T], gwgt: &mut [T], d: &ConvDims) {
    let hw = d.h * d.w;
    let ohw = d.oh * d.ow;
    let cout_pg = d.cout / d.groups;
    for co in 0..d.cout {
        let g_plane = &gout[co * ohw..(co + 1) * ohw];
        let g = co / cout_pg;
        for ci_local in 0..d.cin_pg {
            let ci = g * d.cin_pg + ci_local;
            let in_plane = &inp[ci * hw..(ci + 1) * hw];
            for ku in 0..d.kh {
                let (ylo, yhi) = tap_window(ku, d.h, d.oh, d);
                for kv in 0..d.kw {
                    let (xlo, xhi) = tap_window(kv, d.w, d.ow, d);
                    if xlo >= xhi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ku * d.dilation - d.padding;
                        let grow = &g_plane[oy * d.ow..(oy + 1) * d.ow];
                        let irow = &in_plane[iy * d.w..(iy + 1) * d.w];
                        let mut ix = xlo * d.stride + kv * d.dilation - d.padding;
                        for &gv in grow[xlo..xhi].iter() {
                            acc = acc + gv * irow[ix];
                            ix += d.stride;
                        }
                    }
                    let wi = ((co * d.cin_pg + ci_local) * d.kh + ku) * d.kw + kv;
                    gwgt[wi] = gwgt[wi] + acc;
                }
            }
        }
    }
}

/// 2-D convolution over (B, Cin, H, W) with zero padding.
///
/// `weight` is (Cout, Cin/groups, kH, kW); `groups == Cin` gives the
/// depthwise case. Output spatial extents follow
/// `(H + 2*padding - dilation*(kH-1) - 1) / stride + 1`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let [b, cin, h, w] = four_dims(input, "conv2d input")?;
    let [cout, w_cin, kh, kw] = four_dims(weight, "conv2d weight")?;
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(Error::config(
            "conv2d: stride, dilation and groups must be >= 1",
        ));
    }
    if cin % groups != 0 || cout % groups != 0 {
        return Err(Error::config(format!(
            "conv2d: groups {groups} must divide Cin {cin} and Cout {cout}"
        )));
    }
    let cin_pg = cin / groups;
    if w_cin != cin_pg {
        return Err(Error::shape(format!(
            "conv2d: weight expects {w_cin} channels per group, input provides {cin_pg}"
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                bt.shape()
            )));
        }
    }
    let (oh, ow) = match (
        out_extent(h, kh, stride, padding, dilation),
        out_extent(w, kw, stride, padding, dilation),
    ) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} with stride {stride}, padding {padding}, dilation \
                 {dilation} does not fit a {h}x{w} input"
            )))
        }
    };
    let dims = ConvDims {
        cin,
        h,
        w,
        cout,
        cin_pg,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
        dilation,
        groups,
    };

    let xd = input.data();
    let wd = weight.data();
    let bd = bias.map(|t| t.to_vec());
    let mut data = vec![T::zero(); b * cout * oh * ow];
    for bi in 0..b {
        forward_sample(
            &xd[bi * cin * h * w..(bi + 1) * cin * h * w],
            &wd,
            bd.as_deref(),
            &mut data[bi * cout * oh * ow..(bi + 1) * cout * oh * ow],
            &dims,
        );
    }
    drop(xd);
    drop(wd);

    let mut inputs: Vec<&Tensor<T>> = vec![input, weight];
    if let Some(bt) = bias {
        inputs.push(bt);
    }
    let wants = track(tape, &inputs);
    let out = Tensor::from_op(vec![b, cout, oh, ow], data, wants);
    if wants {
        let x = input.clone();
        let wt = weight.clone();
        let bt = bias.cloned();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            let in_sz = dims.cin * dims.h * dims.w;
            let out_sz = dims.cout * dims.oh * dims.ow;
            if x.requires_grad() {
                let wd = wt.data();
                let mut gx = vec![T::zero(); b * in_sz];
                for bi in 0..b {
                    backward_input_sample(
                        &g[bi * out_sz..(bi + 1) * out_sz],
                        &wd,
                        &mut gx[bi * in_sz..(bi + 1) * in_sz],
                        &dims,
                    );
                }
                drop(wd);
                x.accumulate_grad(&gx);
            }
            if wt.requires_grad() {
                let xd = x.data();
                let mut gw = vec![T::zero(); wt.elem_count()];
                for bi in 0..b {
                    backward_weight_sample(
                        &g[bi * out_sz..(bi + 1) * out_sz],
                        &xd[bi * in_sz..(bi + 1) * in_sz],
                        &mut gw,
                        &dims,
                    );
                }
                drop(xd);
                wt.accumulate_grad(&gw);
            }
            if let Some(bt) = &bt {
                if bt.requires_grad() {
                    let ohw = dims.oh * dims.ow;
                    let mut gb = vec![T::zero(); dims.cout];
                    for bi in 0..b {
                        for co in 0..dims.cout {
                            let plane = &g[(bi * dims.cout + co) * ohw..][..ohw];
                            let mut acc = T::zero();
                            for &v in plane {
                                acc = acc + v;
                            }
                            gb[co] = gb[co] + acc;
                        }
                    }
                    bt.accumulate_grad(&gb);
                }
            }
        });
    }
    Ok(out)
}

/// Per-sample 3x3 convolution with kernels generated per batch element:
/// `out[b] = conv2d(input[b], weights[b], bias[b])` at stride 1, padding 1,
/// dilation 1. `weights` is (B, C2, C1, 3, 3), `bias` is (B, C2).
pub fn dynamic_conv2d<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c1, h, w] = four_dims(input, "dynamic_conv2d input")?;
    let ws = weights.shape().to_vec();
    let [wb, c2, wc1, kh, kw] = match ws[..] {
        [a, b2, c, d, e] => [a, b2, c, d, e],
        _ => {
            return Err(Error::shape(format!(
                "dynamic_conv2d: weights must be rank 5 (B, C2, C1, 3, 3), got {ws:?}"
            )))
        }
    };
    if kh != 3 || kw != 3 {
        return Err(Error::shape(format!(
            "dynamic_conv2d: kernel must be 3x3, got {kh}x{kw}"
        )));
    }
    if wb != b {
        return Err(Error::shape(format!(
            "dynamic_conv2d: weights batch {wb} != input batch {b}"
        )));
    }
    if wc1 != c1 {
        return Err(Error::shape(format!(
            "dynamic_conv2d: weights expect {wc1} input channels, input has {c1}"
        )));
    }
    if bias.shape() != [b, c2] {
        return Err(Error::shape(format!(
            "dynamic_conv2d: bias shape {:?}, expected [{b}, {c2}]",
            bias.shape()
        )));
    }
    let dims = ConvDims {
        cin: c1,
        h,
        w,
        cout: c2,
        cin_pg: c1,
        kh: 3,
        kw: 3,
        oh: h,
        ow: w,
        stride: 1,
        padding: 1,
        dilation: 1,
        groups: 1,
    };
    let in_sz = c1 * h * w;
    let out_sz = c2 * h * w;
    let w_sz = c2 * c1 * 9;

    let xd = input.data();
    let wd = weights.data();
    let bd = bias.data();
    let mut data = vec![T::zero(); b * out_sz];
    for bi in 0..b {
        forward_sample(
            &xd[bi * in_sz..(bi + 1) * in_sz],
            &wd[bi * w_sz..(bi + 1) * w_sz],
            Some(&bd[bi * c2..(bi + 1) * c2]),
            &mut data[bi * out_sz..(bi + 1) * out_sz],
            &dims,
        );
    }
    drop(xd);
    drop(wd);
    drop(bd);

    let wants = track(tape, &[input, weights, bias]);
    let out = Tensor::from_op(vec![b, c2, h, w], data, wants);
    if wants {
        let x = input.clone();
        let wt = weights.clone();
        let bt = bias.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let wd = wt.data();
                let mut gx = vec![T::zero(); b * in_sz];
                for bi in 0..b {
                    backward_input_sample(
                        &g[bi * out_sz..(bi + 1) * out_sz],
                        &wd[bi * w_sz..(bi + 1) * w_sz],
                        &mut gx[bi * in_sz..(bi + 1) * in_sz],
                        &dims,
                    );
                }
                drop(wd);
                x.accumulate_grad(&gx);
            }
            if wt.requires_grad() {
                let xd = x.data();
                let mut gw = vec![T::zero(); b * w_sz];
                for bi in 0..b {
                    backward_weight_sample(
                        &g[bi * out_sz..(bi + 1) * out_sz],
                        &xd[bi * in_sz..(bi + 1) * in_sz],
                        &mut gw[bi * w_sz..(bi + 1) * w_sz],
                        &dims,
                    );
                }
                drop(xd);
                wt.accumulate_grad(&gw);
            }
            if bt.requires_grad() {
                let hw = h * w;
                let mut gb = vec![T::zero(); b * c2];
                for bi in 0..b {
                    for co in 0..c2 {
                        let plane = &g[(bi * c2 + co) * hw..][..hw];
                        let mut acc = T::zero();
                        for &v in plane {
                            acc = acc + v;
                        }
                        gb[bi * c2 + co] = acc;
                    }
                }
                bt.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}
