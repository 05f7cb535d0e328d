//! Differentiable primitive operations.
//!
//! Every function validates shapes, computes the forward value, and — when a
//! recording tape is supplied and any input tracks gradients — registers a
//! backward rule that reads the output gradient and accumulates into the
//! inputs. Gradients are only computed for inputs with `requires_grad`.

mod conv;
mod norm;

pub use conv::{conv2d, dynamic_conv2d};
pub use norm::{batchnorm2d, BnMode};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn track<T: Scalar>(tape: &Tape<T>, inputs: &[&Tensor<T>]) -> bool {
    tape.recording() && inputs.iter().any(|t| t.requires_grad())
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = input.data().iter().map(|&x| x.max(T::zero())).collect();
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(input.shape().to_vec(), data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                // Gradient at exactly zero is defined as zero.
                let xd = x.data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                drop(xd);
                x.accumulate_grad(&gx);
            }
        });
    }
    out
}

pub fn sigmoid<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = input.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(input.shape().to_vec(), data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let yd = y.data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(yd.iter())
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect();
                drop(yd);
                x.accumulate_grad(&gx);
            }
        });
    }
    out
}

pub fn activation<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => relu(tape, input),
        Activation::Sigmoid => sigmoid(tape, input),
    }
}

/// Row-wise softmax over a (B, K) tensor, shifted by the row maximum.
pub fn softmax<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, k] = two_dims(input, "softmax")?;
    if k == 0 {
        return Err(Error::shape("softmax requires K >= 1"));
    }
    let xd = input.data();
    let mut data = vec![T::zero(); b * k];
    for row in 0..b {
        let src = &xd[row * k..(row + 1) * k];
        let max = src.iter().cloned().fold(T::neg_infinity(), T::max);
        let dst = &mut data[row * k..(row + 1) * k];
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    drop(xd);
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(vec![b, k], data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let yd = y.data();
                let mut gx = vec![T::zero(); g.len()];
                for row in 0..b {
                    let s = &yd[row * k..(row + 1) * k];
                    let go = &g[row * k..(row + 1) * k];
                    let dot: T = go.iter().zip(s).map(|(&a, &b)| a * b).sum();
                    for i in 0..k {
                        gx[row * k + i] = s[i] * (go[i] - dot);
                    }
                }
                drop(yd);
                x.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

/// Fully connected layer: `out = input * weight^T + bias`.
pub fn linear<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, cin] = two_dims(input, "linear input")?;
    let [cout, wcin] = two_dims(weight, "linear weight")?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "linear: input width {cin} != weight width {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "linear: bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut data = vec![T::zero(); b * cout];
    for bi in 0..b {
        let xrow = &xd[bi * cin..(bi + 1) * cin];
        for o in 0..cout {
            let wrow = &wd[o * cin..(o + 1) * cin];
            let mut acc = bd[o];
            for (xi, wi) in xrow.iter().zip(wrow) {
                acc = acc + *xi * *wi;
            }
            data[bi * cout + o] = acc;
        }
    }
    drop(xd);
    drop(wd);
    drop(bd);
    let wants = track(tape, &[input, weight, bias]);
    let out = Tensor::from_op(vec![b, cout], data, wants);
    if wants {
        let x = input.clone();
        let w = weight.clone();
        let bs = bias.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let wd = w.data();
                let mut gx = vec![T::zero(); b * cin];
                for bi in 0..b {
                    for o in 0..cout {
                        let go = g[bi * cout + o];
                        let wrow = &wd[o * cin..(o + 1) * cin];
                        let xrow = &mut gx[bi * cin..(bi + 1) * cin];
                        for (xg, &wi) in xrow.iter_mut().zip(wrow) {
                            *xg = *xg + go * wi;
                        }
                    }
                }
                drop(wd);
                x.accumulate_grad(&gx);
            }
            if w.requires_grad() {
                let xd = x.data();
                let mut gw = vec![T::zero(); cout * cin];
                for bi in 0..b {
                    let xrow = &xd[bi * cin..(bi + 1) * cin];
                    for o in 0..cout {
                        let go = g[bi * cout + o];
                        let wrow = &mut gw[o * cin..(o + 1) * cin];
                        for (wg, &xi) in wrow.iter_mut().zip(xrow) {
                            *wg = *wg + go * xi;
                        }
                    }
                }
                drop(xd);
                w.accumulate_grad(&gw);
            }
            if bs.requires_grad() {
                let mut gb = vec![T::zero(); cout];
                for bi in 0..b {
                    for o in 0..cout {
                        gb[o] = gb[o] + g[bi * cout + o];
                    }
                }
                bs.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}

/// Global average pooling: (B, C, H, W) -> (B, C, 1, 1).
pub fn adaptive_avg_pool_to_1<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = four_dims(input, "adaptive_avg_pool_to_1")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("adaptive_avg_pool_to_1 requires H,W >= 1"));
    }
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw);
    let xd = input.data();
    let mut data = vec![T::zero(); b * c];
    for (i, chunk) in xd.chunks_exact(hw).enumerate() {
        let mut acc = T::zero();
        for &v in chunk {
            acc = acc + v;
        }
        data[i] = acc * inv;
    }
    drop(xd);
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(vec![b, c, 1, 1], data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let mut gx = vec![T::zero(); b * c * hw];
                for (i, chunk) in gx.chunks_exact_mut(hw).enumerate() {
                    let gv = g[i] * inv;
                    chunk.fill(gv);
                }
                x.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

/// Per-axis source taps for half-pixel-centers bilinear scaling by 2.
/// For destination index d: src = (d + 0.5) / 2 - 0.5, indices edge-clamped.
fn bilinear_taps(src_len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * src_len)
        .map(|d| {
            let src = (d as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(src_len - 1);
            let hi = ((i0 + 1.0).max(0.0) as usize).min(src_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear 2x upsampling of a (B, C, H, W) map to (B, C, 2H, 2W).
pub fn bilinear_upsample_2x<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = four_dims(input, "bilinear_upsample_2x")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_upsample_2x requires H,W >= 1"));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let ytaps = bilinear_taps(h);
    let xtaps = bilinear_taps(w);
    let xd = input.data();
    let mut data = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = ytaps[oy];
            let fy = T::from_f64(fy);
            let wy0 = T::one() - fy;
            for ox in 0..ow {
                let (x0, x1, fx) = xtaps[ox];
                let fx = T::from_f64(fx);
                let wx0 = T::one() - fx;
                let v = wy0 * (wx0 * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * (wx0 * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                dst[oy * ow + ox] = v;
            }
        }
    }
    drop(xd);
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(vec![b, c, oh, ow], data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let ytaps = bilinear_taps(h);
                let xtaps = bilinear_taps(w);
                let mut gx = vec![T::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let gsrc = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let gdst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, fy) = ytaps[oy];
                        let fy = T::from_f64(fy);
                        let wy0 = T::one() - fy;
                        for ox in 0..ow {
                            let (x0, x1, fx) = xtaps[ox];
                            let fx = T::from_f64(fx);
                            let wx0 = T::one() - fx;
                            let gv = gsrc[oy * ow + ox];
                            gdst[y0 * w + x0] = gdst[y0 * w + x0] + gv * wy0 * wx0;
                            gdst[y0 * w + x1] = gdst[y0 * w + x1] + gv * wy0 * fx;
                            gdst[y1 * w + x0] = gdst[y1 * w + x0] + gv * fy * wx0;
                            gdst[y1 * w + x1] = gdst[y1 * w + x1] + gv * fy * fx;
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

/// Channel concatenation of two (B, *, H, W) maps.
pub fn concat_channels<T: Scalar>(
    tape: &Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [ba, ca, ha, wa] = four_dims(a, "concat_channels lhs")?;
    let [bb, cb, hb, wb] = four_dims(b, "concat_channels rhs")?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape(format!(
            "concat_channels: batch/spatial mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (hw, cout) = (ha * wa, ca + cb);
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![T::zero(); ba * cout * hw];
    for bi in 0..ba {
        let dst = &mut data[bi * cout * hw..(bi + 1) * cout * hw];
        dst[..ca * hw].copy_from_slice(&ad[bi * ca * hw..(bi + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&bd[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    drop(ad);
    drop(bd);
    let wants = track(tape, &[a, b]);
    let out = Tensor::from_op(vec![ba, cout, ha, wa], data, wants);
    if wants {
        let ta = a.clone();
        let tb = b.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if ta.requires_grad() && ca > 0 {
                let mut ga = vec![T::zero(); ba * ca * hw];
                for bi in 0..ba {
                    ga[bi * ca * hw..(bi + 1) * ca * hw]
                        .copy_from_slice(&g[bi * cout * hw..bi * cout * hw + ca * hw]);
                }
                ta.accumulate_grad(&ga);
            }
            if tb.requires_grad() && cb > 0 {
                let mut gb = vec![T::zero(); ba * cb * hw];
                for bi in 0..ba {
                    gb[bi * cb * hw..(bi + 1) * cb * hw]
                        .copy_from_slice(&g[bi * cout * hw + ca * hw..(bi + 1) * cout * hw]);
                }
                tb.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}

/// Contiguous slice `[start, start+len)` along one dimension.
pub fn narrow<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    dim: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let shape = input.shape().to_vec();
    if dim >= shape.len() {
        return Err(Error::shape(format!(
            "narrow: dim {dim} out of range for rank {}",
            shape.len()
        )));
    }
    if start + len > shape[dim] {
        return Err(Error::shape(format!(
            "narrow: [{start}, {}) exceeds extent {}",
            start + len,
            shape[dim]
        )));
    }
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    let dsize = shape[dim];
    let mut out_shape = shape.clone();
    out_shape[dim] = len;
    let xd = input.data();
    let mut data = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &xd[(o * dsize + start) * inner..(o * dsize + start + len) * inner];
        data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    drop(xd);
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(out_shape, data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        let total = input.elem_count();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let mut gx = vec![T::zero(); total];
                for o in 0..outer {
                    gx[(o * dsize + start) * inner..(o * dsize + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                x.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

/// Reinterpret the row-major buffer under a new shape with equal element count.
pub fn reshape<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    shape: impl Into<Vec<usize>>,
) -> Result<Tensor<T>> {
    let shape = shape.into();
    let count: usize = shape.iter().product();
    if count != input.elem_count() {
        return Err(Error::shape(format!(
            "reshape: {:?} ({} elements) -> {:?} ({count})",
            input.shape(),
            input.elem_count(),
            shape
        )));
    }
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(shape, input.to_vec(), wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                x.accumulate_grad(&g);
            }
        });
    }
    Ok(out)
}

/// Element-wise sum of two same-shape tensors.
pub fn add<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let wants = track(tape, &[a, b]);
    let out = Tensor::from_op(a.shape().to_vec(), data, wants);
    if wants {
        let ta = a.clone();
        let tb = b.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if ta.requires_grad() {
                ta.accumulate_grad(&g);
            }
            if tb.requires_grad() {
                tb.accumulate_grad(&g);
            }
        });
    }
    Ok(out)
}

/// Multiply every element by a constant.
pub fn scale<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>, factor: T) -> Tensor<T> {
    let data: Vec<T> = input.data().iter().map(|&x| x * factor).collect();
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(input.shape().to_vec(), data, wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                let gx: Vec<T> = g.iter().map(|&gi| gi * factor).collect();
                x.accumulate_grad(&gx);
            }
        });
    }
    out
}

/// Sum of the element-wise product of two same-shape tensors (scalar output).
pub fn dot<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "dot: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let value: T = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .sum();
    let wants = track(tape, &[a, b]);
    let out = Tensor::from_op(vec![1], vec![value], wants);
    if wants {
        let ta = a.clone();
        let tb = b.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            let gv = g[0];
            if ta.requires_grad() {
                let gx: Vec<T> = tb.data().iter().map(|&v| v * gv).collect();
                ta.accumulate_grad(&gx);
            }
            if tb.requires_grad() {
                let gx: Vec<T> = ta.data().iter().map(|&v| v * gv).collect();
                tb.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

/// Sum of all elements (scalar output).
pub fn sum_all<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Tensor<T> {
    let value: T = input.data().iter().cloned().sum();
    let wants = track(tape, &[input]);
    let out = Tensor::from_op(vec![1], vec![value], wants);
    if wants {
        let x = input.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if x.requires_grad() {
                x.accumulate_grad(&vec![g[0]; x.elem_count()]);
            }
        });
    }
    out
}

/// Convex-style aggregation of same-shape feature maps with one scalar weight
/// per (sample, branch): `out[b, ..] = sum_r weights[b, r] * branches[r][b, ..]`.
pub fn branch_weighted_sum<T: Scalar>(
    tape: &Tape<T>,
    branches: &[Tensor<T>],
    weights: &Tensor<T>,
) -> Result<Tensor<T>> {
    if branches.is_empty() {
        return Err(Error::shape("branch_weighted_sum: no branches"));
    }
    let [b, c, h, w] = four_dims(&branches[0], "branch_weighted_sum")?;
    for br in branches.iter().skip(1) {
        if br.shape() != branches[0].shape() {
            return Err(Error::shape(format!(
                "branch_weighted_sum: branch shapes differ: {:?} vs {:?}",
                branches[0].shape(),
                br.shape()
            )));
        }
    }
    let r = branches.len();
    if weights.shape() != [b, r] {
        return Err(Error::shape(format!(
            "branch_weighted_sum: weights shape {:?}, expected [{b}, {r}]",
            weights.shape()
        )));
    }
    let chw = c * h * w;
    let wd = weights.data();
    let mut data = vec![T::zero(); b * chw];
    for (ri, br) in branches.iter().enumerate() {
        let bd = br.data();
        for bi in 0..b {
            let wv = wd[bi * r + ri];
            let src = &bd[bi * chw..(bi + 1) * chw];
            let dst = &mut data[bi * chw..(bi + 1) * chw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + wv * s;
            }
        }
    }
    drop(wd);
    let mut tracked: Vec<&Tensor<T>> = branches.iter().collect();
    tracked.push(weights);
    let wants = track(tape, &tracked);
    let out = Tensor::from_op(vec![b, c, h, w], data, wants);
    if wants {
        let brs: Vec<Tensor<T>> = branches.to_vec();
        let wt = weights.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            let wd = wt.data();
            for (ri, br) in brs.iter().enumerate() {
                if br.requires_grad() {
                    let mut gb = vec![T::zero(); b * chw];
                    for bi in 0..b {
                        let wv = wd[bi * r + ri];
                        let src = &g[bi * chw..(bi + 1) * chw];
                        let dst = &mut gb[bi * chw..(bi + 1) * chw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = wv * s;
                        }
                    }
                    br.accumulate_grad(&gb);
                }
            }
            drop(wd);
            if wt.requires_grad() {
                let mut gw = vec![T::zero(); b * r];
                for (ri, br) in brs.iter().enumerate() {
                    let bd = br.data();
                    for bi in 0..b {
                        let src = &bd[bi * chw..(bi + 1) * chw];
                        let go = &g[bi * chw..(bi + 1) * chw];
                        let mut acc = T::zero();
                        for (&s, &gi) in src.iter().zip(go) {
                            acc = acc + s * gi;
                        }
                        gw[bi * r + ri] = acc;
                    }
                }
                wt.accumulate_grad(&gw);
            }
        });
    }
    Ok(out)
}

/// Clamping constant for the cross-entropy probability argument.
pub const BCE_EPSILON: f64 = 1e-7;

/// Mean binary cross-entropy between probabilities and hard {0,1} labels.
/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the
/// logs; the gradient passes only where the clamp is inactive.
pub fn bce_loss<T: Scalar>(
    tape: &Tape<T>,
    probabilities: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<Tensor<T>> {
    if probabilities.shape() != labels.shape() {
        return Err(Error::shape(format!(
            "bce_loss: probabilities {:?} vs labels {:?}",
            probabilities.shape(),
            labels.shape()
        )));
    }
    let n = probabilities.elem_count();
    if n == 0 {
        return Err(Error::shape("bce_loss: empty input"));
    }
    let eps = T::from_f64(BCE_EPSILON);
    let hi = T::one() - eps;
    let pd = probabilities.data();
    let ld = labels.data();
    let mut acc = T::zero();
    for (&p, &y) in pd.iter().zip(ld.iter()) {
        if !(y == T::zero() || y == T::one()) {
            return Err(Error::data(format!(
                "bce_loss: label value {y} outside {{0, 1}}"
            )));
        }
        let pc = p.max(eps).min(hi);
        acc = acc + y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
    }
    drop(pd);
    drop(ld);
    let inv_n = T::one() / T::from_usize(n);
    let value = -acc * inv_n;
    let wants = track(tape, &[probabilities, labels]);
    let out = Tensor::from_op(vec![1], vec![value], wants);
    if wants {
        let p = probabilities.clone();
        let l = labels.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            if p.requires_grad() {
                let gv = g[0] * inv_n;
                let pd = p.data();
                let ld = l.data();
                let gx: Vec<T> = pd
                    .iter()
                    .zip(ld.iter())
                    .map(|(&pi, &yi)| {
                        if pi > eps && pi < hi {
                            -gv * (yi / pi - (T::one() - yi) / (T::one() - pi))
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                drop(pd);
                drop(ld);
                p.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

pub(crate) fn two_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::shape(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

pub(crate) fn four_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::shape(format!("{what}: expected rank 4, got {s:?}"))),
    }
}
