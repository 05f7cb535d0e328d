//! Full segmentation network: stem, four encoder stages (multi-scale block +
//! stride-2 downsampling), four decoder stages (upsample, skip concat, 1x1
//! reduce, two inverted residuals) and three per-sample dynamic heads for
//! deep supervision.

use std::collections::BTreeMap;

use crate::blocks::{ConvBlock, InvertedResidual};
use crate::dmsc::DmscBlock;
use crate::dwbg::DwbgGenerator;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::ops::{self, BnMode};
use crate::params::{Collect, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Width multiplier for the decoder reduce convolutions: each stage reduces
/// the skip concatenation to `DECODER_REDUCE_EXPAND * skip_width` channels,
/// and the second inverted residual narrows back to the skip width. This is
/// the single knob that sets the parameter budget.
pub const DECODER_REDUCE_EXPAND: usize = 3;

pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Dynamic multi-scale encoder blocks and dynamic per-sample heads.
    Full,
    /// Plain 3x3 conv blocks in the encoder and static conv heads; used as
    /// the ablation reference.
    Baseline,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelVariant::Full),
            "baseline" => Ok(ModelVariant::Baseline),
            other => Err(Error::config(format!(
                "unknown model variant {other:?} (expected \"full\" or \"baseline\")"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DdunetConfig {
    /// Width multiplier for every stage; the encoder runs at
    /// {c, 2c, 4c, 8c} channels.
    pub base_channels: usize,
    /// Square input edge; must be a multiple of 16 so four halvings and four
    /// doublings return to the input resolution.
    pub input_size: usize,
    /// Feed the blended multi-scale map straight to the exit projection,
    /// bypassing the 3x3 fuse conv.
    pub dmsc_skip_fuse: bool,
    pub variant: ModelVariant,
}

impl Default for DdunetConfig {
    fn default() -> Self {
        DdunetConfig {
            base_channels: 8,
            input_size: 256,
            dmsc_skip_fuse: false,
            variant: ModelVariant::Full,
        }
    }
}

impl DdunetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 {
            return Err(Error::config(format!(
                "base_channels must be >= 2, got {}",
                self.base_channels
            )));
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Encoder feature widths, finest first: {c, 2c, 4c, 8c}.
    pub fn stage_widths(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Widths after each stride-2 downsampling, capped at 8c.
    pub fn down_widths(&self) -> [usize; 4] {
        let c = self.base_channels;
        [2 * c, 4 * c, 8 * c, 8 * c]
    }
}

/// Forward behaviour: train returns the three supervised logit maps
/// (coarse to fine) with batch statistics; eval returns only the final map
/// using running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum EncoderFeature<T: Scalar> {
    MultiScale(DmscBlock<T>),
    Plain(ConvBlock<T>),
}

impl<T: Scalar> EncoderFeature<T> {
    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        match self {
            EncoderFeature::MultiScale(b) => b.forward(tape, x, mode),
            EncoderFeature::Plain(b) => b.forward(tape, x, mode),
        }
    }
}

impl<T: Scalar> Collect<T> for EncoderFeature<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        match self {
            EncoderFeature::MultiScale(b) => b.collect(prefix, store),
            EncoderFeature::Plain(b) => b.collect(prefix, store),
        }
    }
}

struct EncoderStage<T: Scalar> {
    feat: EncoderFeature<T>,
    down: ConvBlock<T>,
}

struct DecoderStage<T: Scalar> {
    reduce: ConvBlock<T>,
    ir1: InvertedResidual<T>,
    ir2: InvertedResidual<T>,
}

enum Head<T: Scalar> {
    Dynamic(DwbgGenerator<T>),
    Static { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> Head<T> {
    fn forward(
        &self,
        tape: &Tape<T>,
        enc_feat: &Tensor<T>,
        dec_feat: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match self {
            Head::Dynamic(g) => g.forward(tape, enc_feat, dec_feat),
            Head::Static { weight, bias } => {
                ops::conv2d(tape, dec_feat, weight, Some(bias), 1, 1, 1, 1)
            }
        }
    }
}

impl<T: Scalar> Collect<T> for Head<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        match self {
            Head::Dynamic(g) => g.collect(prefix, store),
            Head::Static { weight, bias } => {
                store.add_param(format!("{prefix}.conv.weight"), weight);
                store.add_param(format!("{prefix}.conv.bias"), bias);
            }
        }
    }
}

pub struct DdunetModel<T: Scalar> {
    config: DdunetConfig,
    stem: ConvBlock<T>,
    encoder: Vec<EncoderStage<T>>,
    decoder: Vec<DecoderStage<T>>,
    /// Supervised heads, coarse to fine, attached to decoder stages 2..4.
    heads: Vec<Head<T>>,
}

impl<T: Scalar> DdunetModel<T> {
    pub fn new(config: DdunetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let widths = config.stage_widths();
        let downs = config.down_widths();

        let stem = ConvBlock::new(&mut init, IN_CHANNELS, widths[0], 3, 1);

        let mut encoder = Vec::with_capacity(4);
        for s in 0..4 {
            let feat = match config.variant {
                ModelVariant::Full => EncoderFeature::MultiScale(DmscBlock::new(
                    &mut init,
                    widths[s],
                    config.dmsc_skip_fuse,
                )),
                ModelVariant::Baseline => {
                    EncoderFeature::Plain(ConvBlock::new(&mut init, widths[s], widths[s], 3, 1))
                }
            };
            let down = ConvBlock::new(&mut init, widths[s], downs[s], 3, 2);
            encoder.push(EncoderStage { feat, down });
        }

        // Decoder stage d consumes the previous output upsampled 2x plus the
        // encoder skip at the new resolution; skips pair in reverse order.
        let mut decoder = Vec::with_capacity(4);
        let mut carry = downs[3];
        for d in 0..4 {
            let skip_w = widths[3 - d];
            let cat_w = carry + skip_w;
            let mid_w = DECODER_REDUCE_EXPAND * skip_w;
            decoder.push(DecoderStage {
                reduce: ConvBlock::new(&mut init, cat_w, mid_w, 1, 1),
                ir1: InvertedResidual::new(&mut init, mid_w, mid_w),
                ir2: InvertedResidual::new(&mut init, mid_w, skip_w),
            });
            carry = skip_w;
        }

        let mut heads = Vec::with_capacity(3);
        for d in 1..4 {
            let c = widths[3 - d];
            heads.push(match config.variant {
                ModelVariant::Full => Head::Dynamic(DwbgGenerator::new(&mut init, c)),
                ModelVariant::Baseline => Head::Static {
                    weight: init.conv_weight(1, c, 3, 3),
                    bias: init.zeros_param(&[1]),
                },
            });
        }

        Ok(DdunetModel {
            config,
            stem,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &DdunetConfig {
        &self.config
    }

    /// Test hook: zero every dynamic head's output layer so generated kernels
    /// start neutral.
    pub fn zero_head_output_layers(&self) {
        for h in &self.heads {
            if let Head::Dynamic(g) = h {
                g.zero_output_layer();
            }
        }
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        match images.shape() {
            [_, c, h, w] if *c == IN_CHANNELS && *h == s && *w == s => Ok(()),
            other => Err(Error::config(format!(
                "model expects (B, {IN_CHANNELS}, {s}, {s}) input, got {other:?}"
            ))),
        }
    }

    /// Core forward pass with independent control of normalization statistics
    /// and deep-supervision outputs. Returns logits coarse to fine;
    /// `supervised` yields all three supervised maps, otherwise only the
    /// final full-resolution map.
    pub fn forward_with(
        &self,
        tape: &Tape<T>,
        images: &Tensor<T>,
        bn_mode: BnMode,
        supervised: bool,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_input(images)?;
        let mut x = self.stem.forward(tape, images, bn_mode)?;
        let mut skips = Vec::with_capacity(4);
        for stage in &self.encoder {
            let f = stage.feat.forward(tape, &x, bn_mode)?;
            x = stage.down.forward(tape, &f, bn_mode)?;
            skips.push(f);
        }
        let mut dec_outs = Vec::with_capacity(4);
        for (d, stage) in self.decoder.iter().enumerate() {
            let up = ops::bilinear_upsample_2x(tape, &x)?;
            let cat = ops::concat_channels(tape, &up, &skips[3 - d])?;
            let r = stage.reduce.forward(tape, &cat, bn_mode)?;
            let r = stage.ir1.forward(tape, &r, bn_mode)?;
            x = stage.ir2.forward(tape, &r, bn_mode)?;
            dec_outs.push(x.clone());
        }
        let head_logits = |i: usize| -> Result<Tensor<T>> {
            self.heads[i].forward(tape, &skips[2 - i], &dec_outs[i + 1])
        };
        if supervised {
            (0..3).map(head_logits).collect()
        } else {
            Ok(vec![head_logits(2)?])
        }
    }

    /// Train mode: three supervised logit maps at S/4, S/2 and S (finest
    /// last), batch statistics. Eval mode: the final map only, running
    /// statistics.
    pub fn forward(&self, tape: &Tape<T>, images: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        match mode {
            Mode::Train => self.forward_with(tape, images, BnMode::Train, true),
            Mode::Eval => self.forward_with(tape, images, BnMode::Eval, false),
        }
    }

    /// Binary masks from an eval-mode forward pass.
    pub fn predict_mask(&self, images: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let logits = self.forward(&tape, images, Mode::Eval)?;
        binarize_logits(&logits[0], threshold)
    }

    /// Every tensor of the model in stable construction order.
    pub fn param_store(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.stem.collect("stem", &mut store);
        for (s, stage) in self.encoder.iter().enumerate() {
            stage.feat.collect(&format!("encoder.s{}.feat", s + 1), &mut store);
            stage.down.collect(&format!("encoder.s{}.down", s + 1), &mut store);
        }
        for (d, stage) in self.decoder.iter().enumerate() {
            stage
                .reduce
                .collect(&format!("decoder.d{}.reduce", d + 1), &mut store);
            stage.ir1.collect(&format!("decoder.d{}.ir1", d + 1), &mut store);
            stage.ir2.collect(&format!("decoder.d{}.ir2", d + 1), &mut store);
        }
        for (i, head) in self.heads.iter().enumerate() {
            head.collect(&format!("head.d{}", i + 2), &mut store);
        }
        store
    }

    /// Total trainable parameter count plus a per-component breakdown.
    /// Running statistics are buffers and not counted.
    pub fn count_parameters(&self) -> (usize, BTreeMap<String, usize>) {
        let store = self.param_store();
        let mut map = BTreeMap::new();
        for e in store.params() {
            let segs: Vec<&str> = e.name.split('.').collect();
            let key = if segs[0] == "stem" {
                "stem".to_string()
            } else {
                segs[..2].join(".")
            };
            *map.entry(key).or_insert(0) += e.tensor.elem_count();
        }
        (store.param_count(), map)
    }
}

/// `sigmoid(logit) >= threshold` per element, producing a {0, 1} mask.
pub fn binarize_logits<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let th = T::from_f64(threshold);
    let data: Vec<T> = logits
        .data()
        .iter()
        .map(|&v| {
            if ops::sigmoid_scalar(v) >= th {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}
