//! Reusable network building blocks: batch-norm state, linear layers, the
//! conv / depthwise-conv blocks and the inverted residual used by the
//! decoders.

use crate::error::Result;
use crate::init::Initializer;
use crate::ops::{self, BnMode};
use crate::params::{Collect, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel affine normalization state.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![channels], vec![T::one(); channels]).expect("static shape"),
            beta: Tensor::param(vec![channels], vec![T::zero(); channels]).expect("static shape"),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: T::from_f64(BN_MOMENTUM),
            epsilon: T::from_f64(BN_EPSILON),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        ops::batchnorm2d(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.epsilon,
            mode,
        )
    }
}

impl<T: Scalar> Collect<T> for BatchNorm2d<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        store.add_param(format!("{prefix}.gamma"), &self.gamma);
        store.add_param(format!("{prefix}.beta"), &self.beta);
        store.add_buffer(format!("{prefix}.running_mean"), &self.running_mean);
        store.add_buffer(format!("{prefix}.running_var"), &self.running_var);
    }
}

/// Fully connected layer with bias.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Initializer, cin: usize, cout: usize) -> Self {
        Self::with_gain(init, cin, cout, 1.0)
    }

    /// `gain` scales the weight init; generator output layers use 0.1 so the
    /// produced kernels start near-neutral.
    pub fn with_gain(init: &mut Initializer, cin: usize, cout: usize, gain: f64) -> Self {
        Linear {
            weight: init.linear_weight(cout, cin, gain),
            bias: init.zeros_param(&[cout]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(tape, x, &self.weight, &self.bias)
    }
}

impl<T: Scalar> Collect<T> for Linear<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        store.add_param(format!("{prefix}.weight"), &self.weight);
        store.add_param(format!("{prefix}.bias"), &self.bias);
    }
}

/// Convolution (1x1 or 3x3) followed by batch norm and relu. The convolution
/// carries no bias: it would be folded away by the normalization.
pub struct ConvBlock<T: Scalar> {
    pub weight: Tensor<T>,
    pub bn: BatchNorm2d<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(init: &mut Initializer, cin: usize, cout: usize, ksize: usize, stride: usize) -> Self {
        ConvBlock {
            weight: init.conv_weight(cout, cin, ksize, ksize),
            bn: BatchNorm2d::new(cout),
            stride,
            padding: (ksize - 1) / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = ops::conv2d(tape, x, &self.weight, None, self.stride, self.padding, 1, 1)?;
        let y = self.bn.forward(tape, &y, mode)?;
        Ok(ops::relu(tape, &y))
    }
}

impl<T: Scalar> Collect<T> for ConvBlock<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        store.add_param(format!("{prefix}.conv.weight"), &self.weight);
        self.bn.collect(&format!("{prefix}.bn"), store);
    }
}

/// Depthwise 3x3 convolution (groups == channels) with a dilation rate,
/// followed by batch norm and relu. Padding equals the dilation so spatial
/// extents are preserved.
pub struct DwConvBlock<T: Scalar> {
    pub weight: Tensor<T>,
    pub bn: BatchNorm2d<T>,
    pub dilation: usize,
}

impl<T: Scalar> DwConvBlock<T> {
    pub fn new(init: &mut Initializer, channels: usize, dilation: usize) -> Self {
        DwConvBlock {
            weight: init.conv_weight(channels, 1, 3, 3),
            bn: BatchNorm2d::new(channels),
            dilation,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let channels = self.weight.shape()[0];
        let y = ops::conv2d(
            tape,
            x,
            &self.weight,
            None,
            1,
            self.dilation,
            self.dilation,
            channels,
        )?;
        let y = self.bn.forward(tape, &y, mode)?;
        Ok(ops::relu(tape, &y))
    }
}

impl<T: Scalar> Collect<T> for DwConvBlock<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        store.add_param(format!("{prefix}.conv.weight"), &self.weight);
        self.bn.collect(&format!("{prefix}.bn"), store);
    }
}

/// Pointwise -> depthwise -> pointwise bottleneck with expansion factor one.
/// The skip connection is active only when the channel count is unchanged
/// (stride is always one here).
pub struct InvertedResidual<T: Scalar> {
    pw1: Tensor<T>,
    bn1: BatchNorm2d<T>,
    dw: Tensor<T>,
    bn2: BatchNorm2d<T>,
    pw2: Tensor<T>,
    bn3: BatchNorm2d<T>,
    cin: usize,
    cout: usize,
}

impl<T: Scalar> InvertedResidual<T> {
    pub fn new(init: &mut Initializer, cin: usize, cout: usize) -> Self {
        InvertedResidual {
            pw1: init.conv_weight(cin, cin, 1, 1),
            bn1: BatchNorm2d::new(cin),
            dw: init.conv_weight(cin, 1, 3, 3),
            bn2: BatchNorm2d::new(cin),
            pw2: init.conv_weight(cout, cin, 1, 1),
            bn3: BatchNorm2d::new(cout),
            cin,
            cout,
        }
    }

    pub fn skip_active(&self) -> bool {
        self.cin == self.cout
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let h = ops::conv2d(tape, x, &self.pw1, None, 1, 0, 1, 1)?;
        let h = ops::relu(tape, &self.bn1.forward(tape, &h, mode)?);
        let h = ops::conv2d(tape, &h, &self.dw, None, 1, 1, 1, self.cin)?;
        let h = ops::relu(tape, &self.bn2.forward(tape, &h, mode)?);
        let h = ops::conv2d(tape, &h, &self.pw2, None, 1, 0, 1, 1)?;
        let h = self.bn3.forward(tape, &h, mode)?;
        if self.skip_active() {
            ops::add(tape, &h, x)
        } else {
            Ok(h)
        }
    }
}

impl<T: Scalar> Collect<T> for InvertedResidual<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        store.add_param(format!("{prefix}.pw1.weight"), &self.pw1);
        self.bn1.collect(&format!("{prefix}.bn1"), store);
        store.add_param(format!("{prefix}.dw.weight"), &self.dw);
        self.bn2.collect(&format!("{prefix}.bn2"), store);
        store.add_param(format!("{prefix}.pw2.weight"), &self.pw2);
        self.bn3.collect(&format!("{prefix}.bn3"), store);
    }
}
