//! Desk-scale synthetic dataset: sky-like gradient backgrounds with soft
//! elliptical bright blobs, masks cut at the blobs' 50% intensity falloff.
//! Every byte is a pure function of the seed.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use super::{load_dataset, DatasetIndex, IMAGES_DIR, MASKS_DIR};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Inclusive range for the number of blobs per image; (0, 0) renders
    /// pure background with all-zero masks.
    pub blobs: (usize, usize),
    /// Test share used for the returned index.
    pub test_ratio: f64,
}

impl SyntheticSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            size,
            seed,
            blobs: (1, 4),
            test_ratio: 0.1,
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    brightness: f64,
}

impl Blob {
    /// Squared elliptical distance in the blob frame; 1.0 on the support edge.
    fn dist2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amplitude: f64,
}

/// Generate `count` image/mask pairs of edge `size` under `out_dir` in the
/// standard dataset layout, then index them with the spec's test ratio.
pub fn generate_synthetic(
    count: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetIndex> {
    generate_synthetic_with(&SyntheticSpec::new(count, size, seed), out_dir)
}

pub fn generate_synthetic_with(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetIndex> {
    if spec.count < 2 {
        return Err(Error::config("synthetic dataset needs count >= 2"));
    }
    if spec.size < 16 {
        return Err(Error::config("synthetic dataset needs size >= 16"));
    }
    if spec.blobs.0 > spec.blobs.1 {
        return Err(Error::config("blob range lower bound exceeds upper bound"));
    }
    let images_dir = out_dir.join(IMAGES_DIR);
    let masks_dir = out_dir.join(MASKS_DIR);
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let s = spec.size;
    for i in 0..spec.count {
        let (image, mask) = render_sample(&mut rng, s, spec.blobs);
        let stem = format!("synth_{i:05}");
        let img_path = images_dir.join(format!("{stem}.png"));
        let rgb: image::RgbImage =
            image::ImageBuffer::from_raw(s as u32, s as u32, image).expect("buffer sized to fit");
        rgb.save(&img_path).map_err(|e| Error::ImageDecode {
            path: img_path.clone(),
            message: e.to_string(),
        })?;
        let mask_path = masks_dir.join(format!("{stem}.png"));
        let gray: image::GrayImage =
            image::ImageBuffer::from_raw(s as u32, s as u32, mask).expect("buffer sized to fit");
        gray.save(&mask_path).map_err(|e| Error::ImageDecode {
            path: mask_path.clone(),
            message: e.to_string(),
        })?;
    }

    load_dataset(out_dir, spec.test_ratio, spec.seed)
}

fn render_sample(rng: &mut Pcg64, size: usize, blob_range: (usize, usize)) -> (Vec<u8>, Vec<u8>) {
    let s = size as f64;
    // Sky gradient: darker warm-gray at the top edge toward blue at the
    // bottom, plus three low-frequency waves.
    let top = [
        rng.random_range(35.0..70.0),
        rng.random_range(50.0..90.0),
        rng.random_range(90.0..140.0),
    ];
    let bottom = [
        rng.random_range(70.0..105.0),
        rng.random_range(100.0..140.0),
        rng.random_range(150.0..195.0),
    ];
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fx: rng.random_range(0.5..2.0) / s,
            fy: rng.random_range(0.5..2.0) / s,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amplitude: rng.random_range(2.0..6.0),
        })
        .collect();

    let n_blobs = if blob_range.1 == 0 {
        0
    } else {
        rng.random_range(blob_range.0..=blob_range.1)
    };
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.15 * s..0.85 * s),
            cy: rng.random_range(0.15 * s..0.85 * s),
            rx: rng.random_range(0.12 * s..0.26 * s),
            ry: rng.random_range(0.12 * s..0.26 * s),
            rot: rng.random_range(0.0..std::f64::consts::PI),
            brightness: rng.random_range(150.0..210.0),
        })
        .collect();

    let mut image = vec![0u8; size * size * 3];
    let mut mask = vec![0u8; size * size];
    let ln2 = std::f64::consts::LN_2;
    for y in 0..size {
        let t = y as f64 / (s - 1.0).max(1.0);
        for x in 0..size {
            let mut noise = 0.0;
            for w in &waves {
                noise += w.amplitude
                    * (std::f64::consts::TAU * (w.fx * x as f64 + w.fy * y as f64) + w.phase).sin();
            }
            let mut bump = 0.0;
            let mut covered = false;
            for b in &blobs {
                let d2 = b.dist2(x as f64, y as f64);
                // exp(-d^4 * ln 2) crosses 0.5 exactly on the support edge,
                // with a falloff steep enough that the mask boundary stays
                // visually identifiable.
                bump += b.brightness * (-d2 * d2 * ln2).exp();
                covered |= d2 <= 1.0;
            }
            let base_idx = (y * size + x) * 3;
            for c in 0..3 {
                let v = top[c] + (bottom[c] - top[c]) * t + noise + bump;
                image[base_idx + c] = v.clamp(0.0, 255.0) as u8;
            }
            mask[y * size + x] = if covered { 255 } else { 0 };
        }
    }
    (image, mask)
}
