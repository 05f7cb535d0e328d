//! Training, evaluation and bulk-prediction drivers.
//!
//! Execution is deliberately single-threaded: with a fixed seed a run is
//! bit-reproducible on a given platform, loss log included.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use crate::data::checkpoint::{load_into_model, read_checkpoint, save_model};
use crate::data::{
    load_dataset_with, load_sample, stack_samples, DatasetIndex, DatasetRecord, SampleTag,
    SegmentationSample,
};
use crate::error::{Error, Result};
use crate::loss::{bce_loss, total_loss, LossWeights};
use crate::metrics::{compute_metrics, Aggregation, MetricsReport};
use crate::model::{DdunetConfig, DdunetModel, Mode, ModelVariant};
use crate::ops;
use crate::optim::{lr_schedule, Adam};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Everything a training run needs. Defaults follow the reference protocol:
/// 100 epochs, batch 16, Adam at 1e-3 with gamma 0.95 per-epoch decay.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub base_channels: usize,
    pub input_size: usize,
    pub seed: u64,
    /// Share of the dataset held out for testing (0.1 = a 9:1 split).
    pub val_ratio: f64,
    pub threshold: f64,
    pub loss_weights: LossWeights,
    pub variant: ModelVariant,
    pub dmsc_skip_fuse: bool,
    pub stratify: bool,
    pub aggregation: Aggregation,
    /// Random horizontal flips; off by default.
    pub augment_hflip: bool,
    /// Force bit-reproducible execution. The engine is single-threaded
    /// either way, so this is accepted and implied.
    pub deterministic: bool,
    /// Echo each epoch line to stdout as it is written to the log file.
    pub progress: bool,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            lr_gamma: 0.95,
            base_channels: 8,
            input_size: 256,
            seed: 42,
            val_ratio: 0.1,
            threshold: 0.5,
            loss_weights: LossWeights::default(),
            variant: ModelVariant::Full,
            dmsc_skip_fuse: false,
            stratify: false,
            aggregation: Aggregation::PerImageMean,
            augment_hflip: false,
            deterministic: false,
            progress: false,
        }
    }

    pub fn model_config(&self) -> DdunetConfig {
        DdunetConfig {
            base_channels: self.base_channels,
            input_size: self.input_size,
            dmsc_skip_fuse: self.dmsc_skip_fuse,
            variant: self.variant,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        self.model_config().validate()
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_miou: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={}, lr={:.8}, train_loss={:.6}, test_miou={:.6}",
            self.epoch, self.lr, self.train_loss, self.test_miou
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<EpochLog>,
    pub best_miou: f64,
}

/// Cache decoded samples in memory when small enough, else re-decode on
/// demand.
enum SampleSource {
    Cached(Vec<SegmentationSample>),
    Lazy(Vec<DatasetRecord>, usize),
}

const CACHE_PIXEL_LIMIT: usize = 32_000_000;

impl SampleSource {
    fn build(records: &[DatasetRecord], indices: &[usize], size: usize) -> Result<Self> {
        if indices.len() * size * size <= CACHE_PIXEL_LIMIT {
            let samples = indices
                .iter()
                .map(|&i| load_sample(&records[i], size))
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleSource::Cached(samples))
        } else {
            Ok(SampleSource::Lazy(
                indices.iter().map(|&i| records[i].clone()).collect(),
                size,
            ))
        }
    }

    fn len(&self) -> usize {
        match self {
            SampleSource::Cached(v) => v.len(),
            SampleSource::Lazy(v, _) => v.len(),
        }
    }

    fn get(&self, i: usize) -> Result<SegmentationSample> {
        match self {
            SampleSource::Cached(v) => {
                let s = &v[i];
                Ok(SegmentationSample {
                    image: s.image.clone(),
                    mask: s.mask.clone(),
                    tag: s.tag,
                })
            }
            SampleSource::Lazy(v, size) => load_sample(&v[i], *size),
        }
    }
}

fn hflip(sample: &SegmentationSample) -> Result<SegmentationSample> {
    let flip = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let (c, s) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for ci in 0..c {
            for y in 0..s {
                for x in 0..s {
                    out[(ci * s + y) * s + x] = src[(ci * s + y) * s + (s - 1 - x)];
                }
            }
        }
        drop(src);
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok(SegmentationSample {
        image: flip(&sample.image)?,
        mask: flip(&sample.mask)?,
        tag: sample.tag,
    })
}

/// Upsample a logit map to the full label resolution by repeated doubling.
fn upsample_to<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    target: usize,
) -> Result<Tensor<T>> {
    let mut out = logits.clone();
    while out.shape()[2] < target {
        out = ops::bilinear_upsample_2x(tape, &out)?;
    }
    if out.shape()[2] != target {
        return Err(Error::shape(format!(
            "logit map {}px cannot be doubled to {target}px",
            logits.shape()[2]
        )));
    }
    Ok(out)
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let index = load_dataset_with(
        &config.data_dir,
        config.val_ratio,
        config.seed,
        config.stratify,
    )?;
    if index.train.is_empty() {
        return Err(Error::index("training split is empty"));
    }
    let train_src = SampleSource::build(&index.records, &index.train, config.input_size)?;
    let test_src = SampleSource::build(&index.records, &index.test, config.input_size)?;

    let model = DdunetModel::<f32>::new(config.model_config(), config.seed)?;
    let store = model.param_store();
    let mut adam = Adam::new(config.lr);

    let log_path = config.out_dir.join("train_log.txt");
    let mut log_file =
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let final_path = config.out_dir.join("final.ddun");
    let best_path = config.out_dir.join("best.ddun");

    let mut log = Vec::with_capacity(config.epochs);
    let mut best_miou = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_src.len()).collect();

    for epoch in 0..config.epochs {
        adam.set_lr(lr_schedule(epoch, config.lr, config.lr_gamma));
        let mut rng = Pcg64::seed_from_u64(
            config
                .seed
                .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train_src.get(i)?;
                let s = if config.augment_hflip && rng.random_bool(0.5) {
                    hflip(&s)?
                } else {
                    s
                };
                samples.push(s);
            }
            let (images, masks) = stack_samples(&samples)?;

            let tape = Tape::new();
            let outs = model.forward(&tape, &images, Mode::Train)?;
            // Coarse -> fine from the model; the loss weights index finest
            // first.
            let mut stage_losses: Vec<Tensor<f32>> = Vec::with_capacity(3);
            for logits in outs.iter().rev() {
                let up = upsample_to(&tape, logits, config.input_size)?;
                let probs = ops::sigmoid(&tape, &up);
                stage_losses.push(bce_loss(&tape, &probs, &masks)?);
            }
            let total = total_loss(&tape, &stage_losses, &config.loss_weights)?;
            let total_value = total.item()?.as_f64();
            if !total_value.is_finite() {
                let detail: Vec<String> = stage_losses
                    .iter()
                    .map(|l| format!("{:.6e}", l.item().map(|v| v.as_f64()).unwrap_or(f64::NAN)))
                    .collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    detail: format!("stage losses (finest first): [{}]", detail.join(", ")),
                });
            }
            tape.backward(&total)?;
            adam.step(&store)?;
            store.zero_grad();

            loss_sum += total_value * chunk.len() as f64;
            sample_count += chunk.len();
        }
        let train_loss = loss_sum / sample_count as f64;

        for e in store.params() {
            if e.tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!(
                    "parameter {} became non-finite at epoch {epoch}",
                    e.name
                )));
            }
        }

        let test_miou = if test_src.len() == 0 {
            f64::NAN
        } else {
            eval_miou(&model, &test_src, config)?
        };

        let entry = EpochLog {
            epoch,
            lr: adam.lr(),
            train_loss,
            test_miou,
        };
        writeln!(log_file, "{entry}").map_err(|e| Error::io(&log_path, e))?;
        if config.progress {
            println!("{entry}");
        }
        log.push(entry);

        save_model(&model, &final_path, epoch as u32, config.seed)?;
        if test_miou.is_finite() && test_miou > best_miou {
            best_miou = test_miou;
            save_model(&model, &best_path, epoch as u32, config.seed)?;
        }
    }
    if !best_path.exists() {
        // No usable test metric; keep the contract that both files exist.
        std::fs::copy(&final_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
        log,
        best_miou,
    })
}

fn eval_miou(model: &DdunetModel<f32>, src: &SampleSource, config: &TrainConfig) -> Result<f64> {
    let (pred, labels, _) = predict_split(model, src, config.batch_size, config.threshold)?;
    Ok(compute_metrics(&pred, &labels, config.aggregation)?.miou)
}

/// Batched eval-mode prediction over a sample source; returns stacked binary
/// masks, labels, and per-sample tags.
fn predict_split(
    model: &DdunetModel<f32>,
    src: &SampleSource,
    batch_size: usize,
    threshold: f64,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<SampleTag>)> {
    let n = src.len();
    let s = model.config().input_size;
    let mut pred = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n * s * s);
    let mut tags = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|&i| src.get(i))
            .collect::<Result<Vec<_>>>()?;
        tags.extend(samples.iter().map(|s| s.tag));
        let (images, masks) = stack_samples(&samples)?;
        let mask = model.predict_mask(&images, threshold)?;
        pred.extend_from_slice(&mask.data());
        labels.extend_from_slice(&masks.data());
    }
    Ok((
        Tensor::new(vec![n, 1, s, s], pred)?,
        Tensor::new(vec![n, 1, s, s], labels)?,
        tags,
    ))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// When set, must agree with the checkpoint metadata.
    pub base_channels: Option<usize>,
    pub input_size: Option<usize>,
    pub seed: u64,
    pub val_ratio: f64,
    pub threshold: f64,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    pub stratify: bool,
}

impl EvalConfig {
    pub fn new(data_dir: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Self {
        EvalConfig {
            data_dir: data_dir.into(),
            checkpoint: checkpoint.into(),
            base_channels: None,
            input_size: None,
            seed: 42,
            val_ratio: 0.1,
            threshold: 0.5,
            batch_size: 16,
            aggregation: Aggregation::PerImageMean,
            stratify: false,
        }
    }
}

pub struct EvalOutcome {
    pub overall: MetricsReport,
    /// Per-tag sub-reports, present when the test split mixes tags.
    pub per_tag: Vec<(SampleTag, MetricsReport)>,
}

/// Evaluate a checkpoint on the dataset's test split at threshold 0.5.
pub fn evaluate(config: &EvalConfig) -> Result<EvalOutcome> {
    let (meta, _) = read_checkpoint(&config.checkpoint)?;
    if let Some(bc) = config.base_channels {
        if bc as u32 != meta.base_channels {
            return Err(Error::config(format!(
                "requested base_channels {bc} but checkpoint was trained with {}",
                meta.base_channels
            )));
        }
    }
    if let Some(s) = config.input_size {
        if s as u32 != meta.input_size {
            return Err(Error::config(format!(
                "requested input_size {s} but checkpoint was trained with {}",
                meta.input_size
            )));
        }
    }
    let model = DdunetModel::<f32>::new(meta.model_config(), meta.seed)?;
    load_into_model(&config.checkpoint, &model)?;

    let index = load_dataset_with(
        &config.data_dir,
        config.val_ratio,
        config.seed,
        config.stratify,
    )?;
    if index.test.is_empty() {
        return Err(Error::index(
            "test split is empty; nothing to evaluate (raise --val-ratio)",
        ));
    }
    let src = SampleSource::build(&index.records, &index.test, meta.input_size as usize)?;
    let (pred, labels, tags) = predict_split(&model, &src, config.batch_size, config.threshold)?;
    let overall = compute_metrics(&pred, &labels, config.aggregation)?;

    let mut per_tag = Vec::new();
    let mut distinct: Vec<SampleTag> = tags.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() > 1 {
        let s = meta.input_size as usize;
        let hw = s * s;
        let (pd, ld) = (pred.data(), labels.data());
        for tag in distinct {
            let mut p = Vec::new();
            let mut l = Vec::new();
            let mut count = 0;
            for (i, t) in tags.iter().enumerate() {
                if *t == tag {
                    p.extend_from_slice(&pd[i * hw..(i + 1) * hw]);
                    l.extend_from_slice(&ld[i * hw..(i + 1) * hw]);
                    count += 1;
                }
            }
            let report = compute_metrics(
                &Tensor::new(vec![count, 1, s, s], p)?,
                &Tensor::new(vec![count, 1, s, s], l)?,
                config.aggregation,
            )?;
            per_tag.push((tag, report));
        }
    }
    Ok(EvalOutcome { overall, per_tag })
}

/// Predict masks for every image under `<data>/images` and write them as
/// 8-bit {0, 255} grayscale PNGs named after the image stems.
pub fn predict_to_dir(
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    threshold: f64,
    batch_size: usize,
) -> Result<usize> {
    let (meta, _) = read_checkpoint(checkpoint)?;
    let model = DdunetModel::<f32>::new(meta.model_config(), meta.seed)?;
    load_into_model(checkpoint, &model)?;
    let size = meta.input_size as usize;

    let index: DatasetIndex = load_dataset_with(data_dir, 0.0, meta.seed, false)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut written = 0;
    for chunk in index.records.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|r| load_sample(r, size))
            .collect::<Result<Vec<_>>>()?;
        let (images, _) = stack_samples(&samples)?;
        let masks = model.predict_mask(&images, threshold)?;
        let md = masks.data();
        for (i, record) in chunk.iter().enumerate() {
            let plane = &md[i * size * size..(i + 1) * size * size];
            let bytes: Vec<u8> = plane
                .iter()
                .map(|&v| if v == 1.0 { 255u8 } else { 0u8 })
                .collect();
            let img: image::GrayImage =
                image::ImageBuffer::from_raw(size as u32, size as u32, bytes)
                    .expect("buffer sized to fit");
            let path = out_dir.join(format!("{}.png", record.stem));
            img.save(&path).map_err(|e| Error::ImageDecode {
                path: path.clone(),
                message: e.to_string(),
            })?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic;
    use tempfile::TempDir;

    fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
        let mut c = TrainConfig::new(data, out);
        c.epochs = 1;
        c.batch_size = 4;
        c.base_channels = 2;
        c.input_size = 32;
        c.seed = 5;
        c.val_ratio = 0.25;
        c
    }

    #[test]
    fn defaults_follow_the_reference_protocol() {
        let c = TrainConfig::new("d", "o");
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.lr_gamma, 0.95);
        assert_eq!(c.base_channels, 8);
        assert_eq!(c.loss_weights.alpha, [1.0, 0.5, 0.2]);
    }

    #[test]
    fn one_epoch_run_produces_log_and_checkpoints() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        generate_synthetic(12, 32, 11, data.path()).unwrap();
        let config = tiny_config(data.path(), out.path());
        let outcome = train(&config).unwrap();
        assert_eq!(outcome.log.len(), 1);
        assert!(outcome.log[0].train_loss.is_finite());
        assert!(outcome.final_checkpoint.exists());
        assert!(outcome.best_checkpoint.exists());
        let text = std::fs::read_to_string(&outcome.log_path).unwrap();
        assert!(text.starts_with("epoch=0, lr=0.00100000, train_loss="));
        assert!(text.contains("test_miou="));
    }

    #[test]
    fn fixed_seed_runs_are_bit_reproducible() {
        let data = TempDir::new().unwrap();
        generate_synthetic(12, 32, 13, data.path()).unwrap();
        let out1 = TempDir::new().unwrap();
        let out2 = TempDir::new().unwrap();
        let mut c1 = tiny_config(data.path(), out1.path());
        c1.deterministic = true;
        let mut c2 = tiny_config(data.path(), out2.path());
        c2.deterministic = true;
        let o1 = train(&c1).unwrap();
        let o2 = train(&c2).unwrap();
        let l1 = std::fs::read(&o1.log_path).unwrap();
        let l2 = std::fs::read(&o2.log_path).unwrap();
        assert_eq!(l1, l2, "loss logs must match byte for byte");
    }

    #[test]
    fn evaluate_rejects_mismatched_width_request() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        generate_synthetic(12, 32, 17, data.path()).unwrap();
        let config = tiny_config(data.path(), out.path());
        let outcome = train(&config).unwrap();

        let mut eval_cfg = EvalConfig::new(data.path(), &outcome.final_checkpoint);
        eval_cfg.seed = config.seed;
        eval_cfg.val_ratio = config.val_ratio;
        eval_cfg.base_channels = Some(8);
        assert!(matches!(evaluate(&eval_cfg), Err(Error::Config(_))));

        eval_cfg.base_channels = Some(2);
        let ok = evaluate(&eval_cfg).unwrap();
        assert!(ok.overall.miou.is_finite());
        assert_eq!(ok.overall.n_images, 3);
    }

    #[test]
    fn zero_headed_model_predicts_all_cloud_at_half_threshold() {
        let model = DdunetModel::<f32>::new(
            DdunetConfig {
                base_channels: 2,
                input_size: 16,
                ..DdunetConfig::default()
            },
            23,
        )
        .unwrap();
        model.zero_head_output_layers();
        let x = Tensor::new(vec![2, 3, 16, 16], vec![0.3; 2 * 3 * 256]).unwrap();
        let mask = model.predict_mask(&x, 0.5).unwrap();
        assert!(mask.to_vec().iter().all(|&v| v == 1.0));

        // Against the counting reference: all-ones predictions.
        let labels = Tensor::new(
            vec![2, 1, 16, 16],
            (0..512).map(|i| (i % 3 == 0) as u8 as f32).collect(),
        )
        .unwrap();
        let r = compute_metrics(&mask, &labels, Aggregation::Global).unwrap();
        let ones = labels.to_vec().iter().filter(|&&v| v == 1.0).count() as u64;
        assert_eq!(r.tp, ones);
        assert_eq!(r.tn, 0);
        assert_eq!(r.fp, 512 - ones);
    }

    #[test]
    fn empty_test_split_is_an_explicit_error() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        generate_synthetic(8, 32, 29, data.path()).unwrap();
        let mut config = tiny_config(data.path(), out.path());
        config.val_ratio = 0.0;
        let outcome = train(&config).unwrap();
        assert!(outcome.log[0].test_miou.is_nan());

        let mut eval_cfg = EvalConfig::new(data.path(), &outcome.final_checkpoint);
        eval_cfg.val_ratio = 0.0;
        assert!(matches!(evaluate(&eval_cfg), Err(Error::Index(_))));
    }

    #[test]
    fn prediction_directory_holds_one_mask_per_image() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let masks_out = TempDir::new().unwrap();
        generate_synthetic(6, 32, 31, data.path()).unwrap();
        let config = tiny_config(data.path(), out.path());
        let outcome = train(&config).unwrap();
        let n = predict_to_dir(
            &outcome.final_checkpoint,
            data.path(),
            masks_out.path(),
            0.5,
            4,
        )
        .unwrap();
        assert_eq!(n, 6);
        let mut produced: Vec<_> = std::fs::read_dir(masks_out.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        produced.sort();
        assert_eq!(produced[0], "synth_00000.png");
        // Masks decode as pure 0/255 grayscale.
        let img = image::open(masks_out.path().join(&produced[0])).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }
}
