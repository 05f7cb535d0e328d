//! Dataset plumbing: directory indexing with a deterministic train/test
//! split, image/mask decoding, and the binary checkpoint format.
//!
//! Expected layout: `<root>/images/*` paired with `<root>/GTmaps/*` by file
//! stem. Images may be 8-bit RGB or grayscale; masks are 8-bit grayscale,
//! binarized at 128.

pub mod checkpoint;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "GTmaps";
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SampleTag {
    Day,
    Night,
    Synthetic,
}

impl SampleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleTag::Day => "day",
            SampleTag::Night => "night",
            SampleTag::Synthetic => "synthetic",
        }
    }
}

/// Filename-prefix heuristic: `night*`/`n<digits>` are night shots,
/// `synth*` synthetic, everything else daytime.
fn infer_tag(stem: &str) -> SampleTag {
    let lower = stem.to_ascii_lowercase();
    if lower.starts_with("synth") {
        SampleTag::Synthetic
    } else if lower.starts_with("night")
        || lower.starts_with("n_")
        || (lower.starts_with('n') && lower[1..].starts_with(|c: char| c.is_ascii_digit()))
    {
        SampleTag::Night
    } else {
        SampleTag::Day
    }
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub tag: SampleTag,
}

/// Indexed dataset with a split that is a pure function of the sorted stems
/// and the seed.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Index `<root>` and split off `test_ratio` of the records for testing,
/// unstratified.
pub fn load_dataset(root: &Path, test_ratio: f64, seed: u64) -> Result<DatasetIndex> {
    load_dataset_with(root, test_ratio, seed, false)
}

/// As [`load_dataset`], optionally splitting each day/night/synthetic group
/// separately so the test share matches per group.
pub fn load_dataset_with(
    root: &Path,
    test_ratio: f64,
    seed: u64,
    stratify: bool,
) -> Result<DatasetIndex> {
    if !(0.0..1.0).contains(&test_ratio) {
        return Err(Error::config(format!(
            "test ratio must lie in [0, 1), got {test_ratio}"
        )));
    }
    let records = index_records(root)?;
    if records.is_empty() {
        return Err(Error::index(format!(
            "no image/mask pairs found under {}",
            root.display()
        )));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    if stratify {
        let mut groups: BTreeMap<SampleTag, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(r.tag).or_default().push(i);
        }
        for indices in groups.values() {
            let (tr, te) = split_indices(indices, test_ratio, seed);
            train.extend(tr);
            test.extend(te);
        }
        train.sort_unstable();
        test.sort_unstable();
    } else {
        let all: Vec<usize> = (0..records.len()).collect();
        let (tr, te) = split_indices(&all, test_ratio, seed);
        train = tr;
        test = te;
    }

    Ok(DatasetIndex {
        records,
        train,
        test,
        seed,
    })
}

/// Shuffle deterministically, then take the rounded test share from the tail.
fn split_indices(indices: &[usize], test_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = indices.to_vec();
    let mut rng = Pcg64::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = ((order.len() as f64) * test_ratio).round() as usize;
    let n_test = n_test.min(order.len());
    let n_train = order.len() - n_test;
    let test = order.split_off(n_train);
    (order, test)
}

fn index_records(root: &Path) -> Result<Vec<DatasetRecord>> {
    let images_dir = root.join(IMAGES_DIR);
    let masks_dir = root.join(MASKS_DIR);
    if !images_dir.is_dir() {
        return Err(Error::index(format!(
            "missing images directory {}",
            images_dir.display()
        )));
    }
    if !masks_dir.is_dir() {
        return Err(Error::index(format!(
            "missing ground-truth directory {}",
            masks_dir.display()
        )));
    }

    let mut mask_by_stem: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(&masks_dir).map_err(|e| Error::io(&masks_dir, e))? {
        let path = entry.map_err(|e| Error::io(&masks_dir, e))?.path();
        if let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) {
            if IMAGE_EXTENSIONS.contains(&ext.to_string_lossy().to_ascii_lowercase().as_str()) {
                mask_by_stem.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }

    let mut records = Vec::new();
    let mut missing = Vec::new();
    let mut image_paths: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        if let Some(ext) = path.extension() {
            if IMAGE_EXTENSIONS.contains(&ext.to_string_lossy().to_ascii_lowercase().as_str()) {
                image_paths.push(path);
            }
        }
    }
    // Lexicographic stem order makes the index platform-independent.
    image_paths.sort_by_key(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()));
    for path in image_paths {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match mask_by_stem.get(&stem) {
            Some(mask_path) => records.push(DatasetRecord {
                tag: infer_tag(&stem),
                image_path: path,
                mask_path: mask_path.clone(),
                stem,
            }),
            None => missing.push(stem),
        }
    }
    if !missing.is_empty() {
        return Err(Error::index(format!(
            "{} image(s) without a ground-truth mask: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(records)
}

/// One decoded training example: RGB image in [0,1], binary mask.
pub struct SegmentationSample {
    /// (3, S, S)
    pub image: Tensor<f32>,
    /// (1, S, S) with values in {0, 1}
    pub mask: Tensor<f32>,
    pub tag: SampleTag,
}

/// Decode the record's image (bilinear-resized) and mask (nearest-resized,
/// binarized at 128) to `target_size` squared.
pub fn load_sample(record: &DatasetRecord, target_size: usize) -> Result<SegmentationSample> {
    let s = target_size as u32;
    let img = image::open(&record.image_path).map_err(|e| Error::ImageDecode {
        path: record.image_path.clone(),
        message: e.to_string(),
    })?;
    let rgb = image::imageops::resize(&img.to_rgb8(), s, s, FilterType::Triangle);
    let mut image_data = vec![0.0f32; 3 * target_size * target_size];
    for (x, y, p) in rgb.enumerate_pixels() {
        let base = y as usize * target_size + x as usize;
        for c in 0..3 {
            image_data[c * target_size * target_size + base] = p.0[c] as f32 / 255.0;
        }
    }

    let mask_img = image::open(&record.mask_path).map_err(|e| Error::ImageDecode {
        path: record.mask_path.clone(),
        message: e.to_string(),
    })?;
    let gray = mask_img.to_luma8();
    let resized = nearest_resize(
        gray.as_raw(),
        gray.width() as usize,
        gray.height() as usize,
        target_size,
        target_size,
    );
    let mask_data: Vec<f32> = resized
        .iter()
        .map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();

    Ok(SegmentationSample {
        image: Tensor::new(vec![3, target_size, target_size], image_data)?,
        mask: Tensor::new(vec![1, target_size, target_size], mask_data)?,
        tag: record.tag,
    })
}

/// Nearest-neighbor resampling with `src = floor(dst * src_len / dst_len)`,
/// which preserves blocks exactly under integer upscaling.
pub fn nearest_resize(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    let mut out = vec![0u8; dw * dh];
    for y in 0..dh {
        let sy = (y * sh / dh).min(sh - 1);
        for x in 0..dw {
            let sx = (x * sw / dw).min(sw - 1);
            out[y * dw + x] = src[sy * sw + sx];
        }
    }
    out
}

/// Stack decoded samples into (B, 3, S, S) images and (B, 1, S, S) masks.
pub fn stack_samples(samples: &[SegmentationSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if samples.is_empty() {
        return Err(Error::data("cannot stack an empty batch"));
    }
    let s = samples[0].image.shape()[1];
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * s * s);
    let mut masks = Vec::with_capacity(b * s * s);
    for sample in samples {
        images.extend_from_slice(&sample.image.data());
        masks.extend_from_slice(&sample.mask.data());
    }
    Ok((
        Tensor::new(vec![b, 3, s, s], images)?,
        Tensor::new(vec![b, 1, s, s], masks)?,
    ))
}
