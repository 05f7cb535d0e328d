//! Dynamic multi-scale convolution block.
//!
//! Four dilated depthwise branches (rates 1..4) run over a shared 1x1
//! projection of the input. A small gate — global average pool, two linear
//! layers, softmax — produces one scalar weight per branch per sample; the
//! branch outputs are blended with those weights, fused by a 3x3 conv block,
//! and projected back through a 1x1 conv + batch norm onto a relu shortcut
//! with the block input.

use crate::blocks::{BatchNorm2d, ConvBlock, DwConvBlock, Linear};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::ops::{self, BnMode};
use crate::params::{Collect, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DMSC_BRANCHES: usize = 4;

/// Gate hidden width: a quarter of the channel count, floored at 4.
pub fn gate_hidden_width(channels: usize) -> usize {
    (channels / 4).max(4)
}

pub struct DmscBlock<T: Scalar> {
    entry: ConvBlock<T>,
    branches: Vec<DwConvBlock<T>>,
    gate_fc1: Linear<T>,
    gate_fc2: Linear<T>,
    fuse: ConvBlock<T>,
    exit_weight: Tensor<T>,
    exit_bn: BatchNorm2d<T>,
    channels: usize,
    /// Bypass the 3x3 fuse conv and feed the blended map straight into the
    /// exit projection.
    pub skip_fuse: bool,
}

impl<T: Scalar> DmscBlock<T> {
    pub fn new(init: &mut Initializer, channels: usize, skip_fuse: bool) -> Self {
        let hidden = gate_hidden_width(channels);
        DmscBlock {
            entry: ConvBlock::new(init, channels, channels, 1, 1),
            branches: (1..=DMSC_BRANCHES)
                .map(|r| DwConvBlock::new(init, channels, r))
                .collect(),
            gate_fc1: Linear::new(init, channels, hidden),
            gate_fc2: Linear::new(init, hidden, DMSC_BRANCHES),
            fuse: ConvBlock::new(init, channels, channels, 3, 1),
            exit_weight: init.conv_weight(channels, channels, 1, 1),
            exit_bn: BatchNorm2d::new(channels),
            channels,
            skip_fuse,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Test hook: overwrite the gate output layer so the branch logits take a
    /// fixed value regardless of input.
    pub fn force_gate_logits(&self, logits: [f64; DMSC_BRANCHES]) {
        self.gate_fc2.weight.with_data_mut(|w| w.fill(T::zero()));
        self.gate_fc2.bias.with_data_mut(|b| {
            for (bi, &l) in b.iter_mut().zip(&logits) {
                *bi = T::from_f64(l);
            }
        });
    }

    fn check_channels(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, c, _, _] if *c == self.channels => Ok(()),
            s => Err(Error::shape(format!(
                "dmsc: input shape {s:?} does not match block channels {}",
                self.channels
            ))),
        }
    }

    /// Softmax branch weights (B, 4) for the projected input.
    fn gate(&self, tape: &Tape<T>, projected: &Tensor<T>) -> Result<Tensor<T>> {
        let b = projected.shape()[0];
        let pooled = ops::adaptive_avg_pool_to_1(tape, projected)?;
        let flat = ops::reshape(tape, &pooled, vec![b, self.channels])?;
        let hidden = ops::relu(tape, &self.gate_fc1.forward(tape, &flat)?);
        let logits = self.gate_fc2.forward(tape, &hidden)?;
        ops::softmax(tape, &logits)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.check_channels(x)?;
        let projected = self.entry.forward(tape, x, mode)?;
        let weights = self.gate(tape, &projected)?;
        let branch_maps: Vec<Tensor<T>> = self
            .branches
            .iter()
            .map(|b| b.forward(tape, &projected, mode))
            .collect::<Result<_>>()?;
        let blended = ops::branch_weighted_sum(tape, &branch_maps, &weights)?;
        let fused = if self.skip_fuse {
            blended
        } else {
            self.fuse.forward(tape, &blended, mode)?
        };
        let exit = ops::conv2d(tape, &fused, &self.exit_weight, None, 1, 0, 1, 1)?;
        let exit = self.exit_bn.forward(tape, &exit, mode)?;
        Ok(ops::relu(tape, &ops::add(tape, &exit, x)?))
    }

    /// The branch weights the block would use on this input; identical to the
    /// values applied inside `forward`.
    pub fn branch_weights(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Ok(self.gate_and_branches(tape, x, mode)?.0)
    }

    /// Branch weights plus the four dilated branch responses on the shared
    /// projection, exposed for inspection and telemetry.
    pub fn gate_and_branches(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_channels(x)?;
        let projected = self.entry.forward(tape, x, mode)?;
        let weights = self.gate(tape, &projected)?;
        let maps = self
            .branches
            .iter()
            .map(|b| b.forward(tape, &projected, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok((weights, maps))
    }
}

impl<T: Scalar> Collect<T> for DmscBlock<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        self.entry.collect(&format!("{prefix}.entry"), store);
        for (i, b) in self.branches.iter().enumerate() {
            b.collect(&format!("{prefix}.branch{}", i + 1), store);
        }
        self.gate_fc1.collect(&format!("{prefix}.gate.fc1"), store);
        self.gate_fc2.collect(&format!("{prefix}.gate.fc2"), store);
        self.fuse.collect(&format!("{prefix}.fuse"), store);
        store.add_param(format!("{prefix}.exit.conv.weight"), &self.exit_weight);
        self.exit_bn.collect(&format!("{prefix}.exit.bn"), store);
    }
}
