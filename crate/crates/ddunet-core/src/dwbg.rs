//! Per-sample classification head: a generator that maps pooled encoder and
//! decoder features to the 3x3 kernel and bias of the final convolution, and
//! the per-sample convolution that applies them.

use crate::blocks::Linear;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::ops;
use crate::params::{Collect, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Output channels of the dynamic head: one logit map for the binary mask.
pub const HEAD_OUT_CHANNELS: usize = 1;

/// Generator hidden width: the channel count, floored at 8.
pub fn generator_hidden_width(channels: usize) -> usize {
    channels.max(8)
}

/// Two linear layers that turn pooled encoder+decoder features into a
/// per-sample conv kernel (B, 1, C, 3, 3) and bias (B, 1).
pub struct DwbgGenerator<T: Scalar> {
    fc1: Linear<T>,
    fc2: Linear<T>,
    channels: usize,
}

impl<T: Scalar> DwbgGenerator<T> {
    pub fn new(init: &mut Initializer, channels: usize) -> Self {
        let hidden = generator_hidden_width(channels);
        let out_width = HEAD_OUT_CHANNELS * channels * 9 + HEAD_OUT_CHANNELS;
        DwbgGenerator {
            fc1: Linear::new(init, 2 * channels, hidden),
            // Damped init keeps the generated kernels near-neutral early on.
            fc2: Linear::with_gain(init, hidden, out_width, 0.1),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Test hook: zero the output layer so generated kernels and biases are 0.
    pub fn zero_output_layer(&self) {
        self.fc2.weight.with_data_mut(|w| w.fill(T::zero()));
        self.fc2.bias.with_data_mut(|b| b.fill(T::zero()));
    }

    fn check(&self, t: &Tensor<T>, what: &str) -> Result<usize> {
        match t.shape() {
            [b, c, _, _] if *c == self.channels => Ok(*b),
            s => Err(Error::shape(format!(
                "dwbg {what}: shape {s:?} does not match generator channels {}",
                self.channels
            ))),
        }
    }

    /// Pool both maps to (B, C), concatenate to (B, 2C), run the two linear
    /// layers, and split the result into kernel and bias.
    pub fn generate(
        &self,
        tape: &Tape<T>,
        enc_feat: &Tensor<T>,
        dec_feat: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = self.check(enc_feat, "encoder feature")?;
        let bd = self.check(dec_feat, "decoder feature")?;
        if b != bd {
            return Err(Error::shape(format!(
                "dwbg: encoder batch {b} != decoder batch {bd}"
            )));
        }
        let c = self.channels;
        let pe = ops::adaptive_avg_pool_to_1(tape, enc_feat)?;
        let pd = ops::adaptive_avg_pool_to_1(tape, dec_feat)?;
        let joined = ops::concat_channels(tape, &pe, &pd)?;
        let flat = ops::reshape(tape, &joined, vec![b, 2 * c])?;
        let hidden = ops::relu(tape, &self.fc1.forward(tape, &flat)?);
        let packed = self.fc2.forward(tape, &hidden)?;
        let kernel_width = HEAD_OUT_CHANNELS * c * 9;
        let kernels = ops::narrow(tape, &packed, 1, 0, kernel_width)?;
        let kernels = ops::reshape(tape, &kernels, vec![b, HEAD_OUT_CHANNELS, c, 3, 3])?;
        let bias = ops::narrow(tape, &packed, 1, kernel_width, HEAD_OUT_CHANNELS)?;
        Ok((kernels, bias))
    }

    /// Generate kernels from the two feature maps and convolve the decoder
    /// features with them. Produces raw logits (B, 1, Hd, Wd).
    pub fn forward(
        &self,
        tape: &Tape<T>,
        enc_feat: &Tensor<T>,
        dec_feat: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (kernels, bias) = self.generate(tape, enc_feat, dec_feat)?;
        ops::dynamic_conv2d(tape, dec_feat, &kernels, &bias)
    }
}

impl<T: Scalar> Collect<T> for DwbgGenerator<T> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>) {
        self.fc1.collect(&format!("{prefix}.fc1"), store);
        self.fc2.collect(&format!("{prefix}.fc2"), store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, seeded_rng, uniform_tensor};
    use rand::RngExt;

    fn rand_input(rng: &mut rand_pcg::Pcg64, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_output_layer_generates_zero_kernels_and_half_probability() {
        let mut init = Initializer::new(201);
        let g = DwbgGenerator::<f32>::new(&mut init, 4);
        g.zero_output_layer();
        let mut rng = seeded_rng(201);
        let enc = rand_input(&mut rng, &[2, 4, 8, 8]);
        let dec = rand_input(&mut rng, &[2, 4, 8, 8]);
        let tape = Tape::inference();
        let (k, b) = g.generate(&tape, &enc, &dec).unwrap();
        assert_eq!(k.shape(), [2, 1, 4, 3, 3]);
        assert_eq!(b.shape(), [2, 1]);
        assert!(k.to_vec().iter().all(|&v| v == 0.0));
        assert!(b.to_vec().iter().all(|&v| v == 0.0));
        let logits = g.forward(&tape, &enc, &dec).unwrap();
        assert!(logits.to_vec().iter().all(|&v| v == 0.0));
        let probs = ops::sigmoid(&tape, &logits);
        assert!(probs.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn duplicated_samples_generate_identical_kernels() {
        let mut init = Initializer::new(203);
        let g = DwbgGenerator::<f32>::new(&mut init, 4);
        let mut rng = seeded_rng(203);
        let enc1 = rand_input(&mut rng, &[1, 4, 6, 6]);
        let dec1 = rand_input(&mut rng, &[1, 4, 5, 5]);
        let mut enc_d = enc1.to_vec();
        enc_d.extend(enc1.to_vec());
        let mut dec_d = dec1.to_vec();
        dec_d.extend(dec1.to_vec());
        let enc = Tensor::new(vec![2, 4, 6, 6], enc_d).unwrap();
        let dec = Tensor::new(vec![2, 4, 5, 5], dec_d).unwrap();
        let tape = Tape::inference();
        let (k, b) = g.generate(&tape, &enc, &dec).unwrap();
        let kd = k.to_vec();
        let half = kd.len() / 2;
        assert_eq!(&kd[..half], &kd[half..]);
        let bd = b.to_vec();
        assert_eq!(bd[0], bd[1]);
    }

    #[test]
    fn generate_matches_manual_composition() {
        let mut init = Initializer::new(207);
        let g = DwbgGenerator::<f32>::new(&mut init, 3);
        let mut rng = seeded_rng(207);
        let enc = rand_input(&mut rng, &[2, 3, 7, 7]);
        let dec = rand_input(&mut rng, &[2, 3, 4, 4]);
        let tape = Tape::inference();
        let (k, b) = g.generate(&tape, &enc, &dec).unwrap();

        // Manual pool / concat / linear chain.
        let (ed, dd) = (enc.to_vec(), dec.to_vec());
        let mut flat = vec![0.0f32; 2 * 6];
        for bi in 0..2 {
            for c in 0..3 {
                let m: f32 = ed[(bi * 3 + c) * 49..(bi * 3 + c + 1) * 49].iter().sum::<f32>() / 49.0;
                flat[bi * 6 + c] = m;
                let m: f32 = dd[(bi * 3 + c) * 16..(bi * 3 + c + 1) * 16].iter().sum::<f32>() / 16.0;
                flat[bi * 6 + 3 + c] = m;
            }
        }
        let x = Tensor::new(vec![2, 6], flat).unwrap();
        let h = ops::relu(&tape, &g.fc1.forward(&tape, &x).unwrap());
        let packed = g.fc2.forward(&tape, &h).unwrap().to_vec();
        let kd = k.to_vec();
        let bd = b.to_vec();
        let width = 3 * 9 + 1;
        for bi in 0..2 {
            for i in 0..27 {
                assert!((kd[bi * 27 + i] - packed[bi * width + i]).abs() < 1e-6);
            }
            assert!((bd[bi] - packed[bi * width + 27]).abs() < 1e-6);
        }
    }

    #[test]
    fn dynamic_conv_constant_bias_and_static_equivalence() {
        let tape = Tape::inference();
        let mut rng = seeded_rng(209);
        let x = rand_input(&mut rng, &[2, 3, 5, 5]);
        let zero_k = Tensor::<f32>::zeros(vec![2, 1, 3, 3, 3]);
        let beta = Tensor::new(vec![2, 1], vec![0.75, -2.0]).unwrap();
        let y = ops::dynamic_conv2d(&tape, &x, &zero_k, &beta).unwrap();
        let yd = y.to_vec();
        assert!(yd[..25].iter().all(|&v| v == 0.75));
        assert!(yd[25..].iter().all(|&v| v == -2.0));

        // B=1 must reproduce the static convolution exactly.
        let x1 = rand_input(&mut rng, &[1, 3, 6, 6]);
        let k = rand_input(&mut rng, &[1, 1, 3, 3, 3]);
        let b = rand_input(&mut rng, &[1, 1]);
        let dyn_out = ops::dynamic_conv2d(&tape, &x1, &k, &b).unwrap();
        let kw = Tensor::new(vec![1, 3, 3, 3], k.to_vec()).unwrap();
        let bw = Tensor::new(vec![1], b.to_vec()).unwrap();
        let static_out = ops::conv2d(&tape, &x1, &kw, Some(&bw), 1, 1, 1, 1).unwrap();
        assert_eq!(dyn_out.to_vec(), static_out.to_vec());
    }

    #[test]
    fn dynamic_conv_equals_per_sample_static_loop() {
        let tape = Tape::inference();
        let mut rng = seeded_rng(211);
        let x = rand_input(&mut rng, &[3, 2, 5, 5]);
        let k = rand_input(&mut rng, &[3, 1, 2, 3, 3]);
        let b = rand_input(&mut rng, &[3, 1]);
        let y = ops::dynamic_conv2d(&tape, &x, &k, &b).unwrap();
        let yd = y.to_vec();
        for bi in 0..3 {
            let xs = Tensor::new(vec![1, 2, 5, 5], x.to_vec()[bi * 50..(bi + 1) * 50].to_vec())
                .unwrap();
            let ks = Tensor::new(vec![1, 2, 3, 3], k.to_vec()[bi * 18..(bi + 1) * 18].to_vec())
                .unwrap();
            let bs = Tensor::new(vec![1], vec![b.to_vec()[bi]]).unwrap();
            let ys = ops::conv2d(&tape, &xs, &ks, Some(&bs), 1, 1, 1, 1)
                .unwrap()
                .to_vec();
            for (a, e) in yd[bi * 25..(bi + 1) * 25].iter().zip(&ys) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn per_sample_independence_is_bit_exact() {
        let mut init = Initializer::new(213);
        let g = DwbgGenerator::<f32>::new(&mut init, 4);
        let mut rng = seeded_rng(213);
        let enc = rand_input(&mut rng, &[2, 4, 6, 6]);
        let dec = rand_input(&mut rng, &[2, 4, 6, 6]);
        let tape = Tape::inference();
        let base = g.forward(&tape, &enc, &dec).unwrap().to_vec();

        // Perturb sample 0 only; sample 1 logits must not change at all.
        let mut enc_d = enc.to_vec();
        let mut dec_d = dec.to_vec();
        for v in &mut enc_d[..4 * 36] {
            *v += 0.37;
        }
        for v in &mut dec_d[..4 * 36] {
            *v -= 0.11;
        }
        let enc2 = Tensor::new(vec![2, 4, 6, 6], enc_d).unwrap();
        let dec2 = Tensor::new(vec![2, 4, 6, 6], dec_d).unwrap();
        let changed = g.forward(&tape, &enc2, &dec2).unwrap().to_vec();
        let half = base.len() / 2;
        assert_eq!(&base[half..], &changed[half..], "sample 1 must be untouched");
        assert_ne!(&base[..half], &changed[..half], "sample 0 must respond");
    }

    #[test]
    fn head_logit_shape_follows_decoder_resolution() {
        let mut init = Initializer::new(215);
        let g = DwbgGenerator::<f32>::new(&mut init, 8);
        let mut rng = seeded_rng(215);
        let enc = rand_input(&mut rng, &[2, 8, 64, 64]);
        let dec = rand_input(&mut rng, &[2, 8, 64, 64]);
        let tape = Tape::inference();
        let logits = g.forward(&tape, &enc, &dec).unwrap();
        assert_eq!(logits.shape(), [2, 1, 64, 64]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut init = Initializer::new(217);
        let g = DwbgGenerator::<f32>::new(&mut init, 8);
        let enc = Tensor::<f32>::zeros(vec![1, 4, 8, 8]);
        let dec = Tensor::<f32>::zeros(vec![1, 8, 8, 8]);
        let tape = Tape::inference();
        assert!(matches!(
            g.forward(&tape, &enc, &dec),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gradcheck_generator_and_dynamic_conv_jointly() {
        let mut init = Initializer::new(219);
        let g: DwbgGenerator<f64> = DwbgGenerator::new(&mut init, 3);
        let mut rng = seeded_rng(219);
        let enc = uniform_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0).into_param();
        let dec = uniform_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0).into_param();
        let proj = uniform_tensor(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
        let mut store = ParamStore::new();
        g.collect("dwbg", &mut store);
        let mut targets: Vec<Tensor<f64>> = store.params().map(|e| e.tensor.clone()).collect();
        targets.push(enc.clone());
        targets.push(dec.clone());
        let case = check_gradients("dwbg_head", &targets, 1e-4, |tape| {
            let y = g.forward(tape, &enc, &dec)?;
            ops::dot(tape, &y, &proj)
        })
        .unwrap();
        assert!(
            case.pass(),
            "dwbg gradcheck max_rel_err={:.3e}",
            case.max_rel_err
        );
    }
}
