//! Brute-force reference kernels for the verification suites.
//!
//! These are deliberately written as plain nested loops over the operation
//! definition and share no code with the optimized kernels they check.

use crate::scalar::Scalar;

/// Direct six-nested-loop convolution over one (Cin, H, W) sample.
/// Returns `None` when the output would be empty.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Option<Vec<T>> {
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * padding < span_h || w + 2 * padding < span_w {
        return None;
    }
    let oh = (h + 2 * padding - span_h) / stride + 1;
    let ow = (w + 2 * padding - span_w) / stride + 1;
    let cin_pg = cin / groups;
    let cout_pg = cout / groups;
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        let group = co / cout_pg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(T::zero(), |b| b[co]);
                for ci_local in 0..cin_pg {
                    let ci = group * cin_pg + ci_local;
                    for ku in 0..kh {
                        for kv in 0..kw {
                            let iy = (oy * stride + ku * dilation) as isize - padding as isize;
                            let ix = (ox * stride + kv * dilation) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = input[(ci * h + iy as usize) * w + ix as usize];
                            let wv = weight[((co * cin_pg + ci_local) * kh + ku) * kw + kv];
                            acc = acc + xv * wv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Some(out)
}

/// Batched wrapper around [`conv2d_reference`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference_batched<T: Scalar>(
    input: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Option<Vec<T>> {
    let in_sz = cin * h * w;
    let mut out = Vec::new();
    for bi in 0..b {
        let sample = conv2d_reference(
            &input[bi * in_sz..(bi + 1) * in_sz],
            cin,
            h,
            w,
            weight,
            cout,
            kh,
            kw,
            bias,
            stride,
            padding,
            dilation,
            groups,
        )?;
        out.extend_from_slice(&sample);
    }
    Some(out)
}
