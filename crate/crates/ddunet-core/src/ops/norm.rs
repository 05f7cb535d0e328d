//! 2-D batch normalization over the (B, H, W) axes of a (B, C, H, W) map.

use super::{four_dims, track};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Normalization source: batch statistics (train) or running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization with affine transform.
///
/// Train mode normalizes by the biased batch mean/variance per channel and
/// folds the batch statistics into the running buffers with
/// `new = (1 - momentum) * old + momentum * batch` (an unrecorded, in-place
/// update). Eval mode is a pure affine function of the input built from the
/// running statistics. Gradients flow to the input, `gamma` and `beta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    momentum: T,
    epsilon: T,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = four_dims(input, "batchnorm2d")?;
    for (t, name) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running_mean"),
        (running_var, "running_var"),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm2d: {name} shape {:?}, expected [{c}]",
                t.shape()
            )));
        }
    }
    let n = b * h * w;
    if mode == BnMode::Train && n <= 1 {
        return Err(Error::DegenerateBatch);
    }

    let hw = h * w;
    let (mean, var) = match mode {
        BnMode::Train => {
            let xd = input.data();
            let inv_n = T::one() / T::from_usize(n);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut acc = T::zero();
                for bi in 0..b {
                    let plane = &xd[(bi * c + ci) * hw..][..hw];
                    for &v in plane {
                        acc = acc + v;
                    }
                }
                mean[ci] = acc * inv_n;
            }
            for ci in 0..c {
                let m = mean[ci];
                let mut acc = T::zero();
                for bi in 0..b {
                    let plane = &xd[(bi * c + ci) * hw..][..hw];
                    for &v in plane {
                        let d = v - m;
                        acc = acc + d * d;
                    }
                }
                var[ci] = acc * inv_n;
            }
            drop(xd);
            // Fold into the running buffers outside the recorded graph.
            running_mean.with_data_mut(|rm| {
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = (T::one() - momentum) * *r + momentum * m;
                }
            });
            running_var.with_data_mut(|rv| {
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (T::one() - momentum) * *r + momentum * v;
                }
            });
            (mean, var)
        }
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
    let xd = input.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![T::zero(); b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let (m, istd, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
            let src = &xd[(bi * c + ci) * hw..][..hw];
            let dst = &mut data[(bi * c + ci) * hw..][..hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ga * (s - m) * istd + be;
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let wants = track(tape, &[input, gamma, beta]);
    let out = Tensor::from_op(vec![b, c, h, w], data, wants);
    if wants {
        let x = input.clone();
        let ga = gamma.clone();
        let be = beta.clone();
        let y = out.clone();
        tape.record(&out, move || {
            let Some(g) = y.grad() else { return };
            let xd = x.data();
            // Per-channel sums of g and g * x_hat drive all three gradients.
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let (m, istd) = (mean[ci], inv_std[ci]);
                    let src = &xd[(bi * c + ci) * hw..][..hw];
                    let go = &g[(bi * c + ci) * hw..][..hw];
                    let mut a0 = T::zero();
                    let mut a1 = T::zero();
                    for (&gi, &xi) in go.iter().zip(src) {
                        a0 = a0 + gi;
                        a1 = a1 + gi * (xi - m) * istd;
                    }
                    sum_g[ci] = sum_g[ci] + a0;
                    sum_gx[ci] = sum_gx[ci] + a1;
                }
            }
            if x.requires_grad() {
                let gd = ga.data();
                let inv_n = T::one() / T::from_usize(n);
                let mut gx = vec![T::zero(); b * c * hw];
                match mode {
                    BnMode::Train => {
                        for bi in 0..b {
                            for ci in 0..c {
                                let (m, istd) = (mean[ci], inv_std[ci]);
                                let k = gd[ci] * istd;
                                let mg = sum_g[ci] * inv_n;
                                let mgx = sum_gx[ci] * inv_n;
                                let src = &xd[(bi * c + ci) * hw..][..hw];
                                let go = &g[(bi * c + ci) * hw..][..hw];
                                let dst = &mut gx[(bi * c + ci) * hw..][..hw];
                                for ((d, &gi), &xi) in dst.iter_mut().zip(go).zip(src) {
                                    let xh = (xi - m) * istd;
                                    *d = k * (gi - mg - xh * mgx);
                                }
                            }
                        }
                    }
                    BnMode::Eval => {
                        for bi in 0..b {
                            for ci in 0..c {
                                let k = gd[ci] * inv_std[ci];
                                let go = &g[(bi * c + ci) * hw..][..hw];
                                let dst = &mut gx[(bi * c + ci) * hw..][..hw];
                                for (d, &gi) in dst.iter_mut().zip(go) {
                                    *d = k * gi;
                                }
                            }
                        }
                    }
                }
                drop(gd);
                x.accumulate_grad(&gx);
            }
            drop(xd);
            if ga.requires_grad() {
                ga.accumulate_grad(&sum_gx);
            }
            if be.requires_grad() {
                be.accumulate_grad(&sum_g);
            }
        });
    }
    Ok(out)
}
