//! Weight initialization.
//!
//! All randomness in the engine flows through PCG-64 generators seeded from a
//! user-supplied integer, so runs are reproducible across platforms given the
//! same seed and crate versions.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Initializer {
    rng: Pcg64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: Pcg64::seed_from_u64(seed),
        }
    }

    /// Zero-mean normal draw with the given standard deviation.
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(dist.sample(&mut self.rng)))
            .collect();
        Tensor::param(shape.to_vec(), data).expect("shape/data agree by construction")
    }

    /// Convolution weight with std = sqrt(2 / fan_in), fan_in counting the
    /// per-group input channels times the kernel area.
    pub fn conv_weight<T: Scalar>(
        &mut self,
        cout: usize,
        cin_per_group: usize,
        kh: usize,
        kw: usize,
    ) -> Tensor<T> {
        let fan_in = (cin_per_group * kh * kw) as f64;
        self.normal(&[cout, cin_per_group, kh, kw], (2.0 / fan_in).sqrt())
    }

    /// Linear weight with std = sqrt(2 / fan_in), optionally damped; the
    /// damping is used for second layers of generators that should start
    /// near-neutral.
    pub fn linear_weight<T: Scalar>(&mut self, cout: usize, cin: usize, gain: f64) -> Tensor<T> {
        let std = gain * (2.0 / cin as f64).sqrt();
        self.normal(&[cout, cin], std)
    }

    pub fn zeros_param<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor::param(shape.to_vec(), vec![T::zero(); n]).expect("zeros always match")
    }
}
