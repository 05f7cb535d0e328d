//! Segmentation quality metrics over binary masks: accuracy, precision,
//! F-measure and mean IoU across the two classes, either averaged per image
//! or computed from pooled pixel counts.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Compute each metric per image, then average over images.
    PerImageMean,
    /// Compute every metric once from the pooled confusion counts.
    Global,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::PerImageMean => "per_image_mean",
            Aggregation::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_image_mean" => Ok(Aggregation::PerImageMean),
            "global" => Ok(Aggregation::Global),
            other => Err(Error::config(format!(
                "unknown aggregation {other:?} (expected \"per_image_mean\" or \"global\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
}

impl Counts {
    fn pixels(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.pixels() as f64
    }

    /// Resolve an empty ratio denominator: 1.0 when the class is absent from
    /// both prediction and label, 0.0 otherwise.
    fn ratio(num: u64, denom: u64, absent_in_both: bool) -> f64 {
        if denom == 0 {
            if absent_in_both {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / denom as f64
        }
    }

    fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    fn f_measure(&self, beta: f64) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        let b2 = beta * beta;
        let denom = b2 * p + r;
        if denom == 0.0 {
            if self.tp + self.fp + self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            (1.0 + b2) * p * r / denom
        }
    }

    fn iou_cloud(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp + self.fn_, true)
    }

    fn iou_sky(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp + self.fn_, true)
    }

    fn miou(&self) -> f64 {
        0.5 * (self.iou_cloud() + self.iou_sky())
    }
}

/// Metric values plus the pooled confusion counts they were derived from.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub f_measure: f64,
    pub miou: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub n_images: usize,
    pub aggregation: Aggregation,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "acc={:.6}", self.accuracy)?;
        writeln!(f, "prec={:.6}", self.precision)?;
        writeln!(f, "fbeta={:.6}", self.f_measure)?;
        writeln!(f, "miou={:.6}", self.miou)?;
        writeln!(f, "n_images={}", self.n_images)?;
        write!(f, "aggregation={}", self.aggregation.as_str())
    }
}

pub const DEFAULT_F_BETA: f64 = 1.0;

/// Compare binary (N, 1, H, W) masks with β = 1.
pub fn compute_metrics<T: Scalar>(
    pred_masks: &Tensor<T>,
    labels: &Tensor<T>,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    compute_metrics_with_beta(pred_masks, labels, aggregation, DEFAULT_F_BETA)
}

pub fn compute_metrics_with_beta<T: Scalar>(
    pred_masks: &Tensor<T>,
    labels: &Tensor<T>,
    aggregation: Aggregation,
    beta: f64,
) -> Result<MetricsReport> {
    if pred_masks.shape() != labels.shape() {
        return Err(Error::shape(format!(
            "compute_metrics: predictions {:?} vs labels {:?}",
            pred_masks.shape(),
            labels.shape()
        )));
    }
    let (n, hw) = match pred_masks.shape() {
        [n, 1, h, w] => (*n, h * w),
        s => {
            return Err(Error::shape(format!(
                "compute_metrics: expected (N, 1, H, W), got {s:?}"
            )))
        }
    };
    if n == 0 || hw == 0 {
        return Err(Error::data("compute_metrics: empty mask set"));
    }

    let pd = pred_masks.data();
    let ld = labels.data();
    let mut per_image = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = Counts::default();
        for j in i * hw..(i + 1) * hw {
            let p = bit(pd[j], "prediction")?;
            let y = bit(ld[j], "label")?;
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        per_image.push(c);
    }

    let pooled = per_image.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        tn: a.tn + c.tn,
        fn_: a.fn_ + c.fn_,
    });

    let (accuracy, precision, f_measure, miou) = match aggregation {
        Aggregation::Global => (
            pooled.accuracy(),
            pooled.precision(),
            pooled.f_measure(beta),
            pooled.miou(),
        ),
        Aggregation::PerImageMean => {
            let inv = 1.0 / n as f64;
            per_image.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, c| {
                (
                    acc.0 + c.accuracy() * inv,
                    acc.1 + c.precision() * inv,
                    acc.2 + c.f_measure(beta) * inv,
                    acc.3 + c.miou() * inv,
                )
            })
        }
    };

    Ok(MetricsReport {
        accuracy,
        precision,
        f_measure,
        miou,
        tp: pooled.tp,
        fp: pooled.fp,
        tn: pooled.tn,
        fn_: pooled.fn_,
        n_images: n,
        aggregation,
    })
}

fn bit<T: Scalar>(v: T, what: &str) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(Error::data(format!(
            "compute_metrics: {what} value {v} is not in {{0, 1}}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::seeded_rng;
    use rand::RngExt;

    fn mask(n: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![n, 1, h, w], data).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let mut rng = seeded_rng(61);
        let data: Vec<f32> = (0..3 * 64)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let pred = mask(3, 8, 8, data.clone());
        let label = mask(3, 8, 8, data);
        for agg in [Aggregation::PerImageMean, Aggregation::Global] {
            let r = compute_metrics(&pred, &label, agg).unwrap();
            assert_eq!(r.accuracy, 1.0);
            assert_eq!(r.precision, 1.0);
            assert_eq!(r.f_measure, 1.0);
            assert_eq!(r.miou, 1.0);
        }
    }

    #[test]
    fn hand_counted_two_by_two_case() {
        let label = mask(1, 2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let pred = mask(1, 2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let r = compute_metrics(&pred, &label, Aggregation::Global).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.precision, 0.5);
        assert!((r.f_measure - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.miou, 0.25);
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 2, 0, 0));
    }

    #[test]
    fn global_accuracy_is_exact_ratio_of_pooled_counts() {
        let mut rng = seeded_rng(67);
        let pd: Vec<f32> = (0..5 * 36)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let ld: Vec<f32> = (0..5 * 36)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let r = compute_metrics(&mask(5, 6, 6, pd), &mask(5, 6, 6, ld), Aggregation::Global)
            .unwrap();
        let total = r.tp + r.fp + r.tn + r.fn_;
        assert_eq!(total, 180);
        assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / total as f64);
    }

    /// Independent per-pixel counting over a hundred random mask pairs.
    #[test]
    fn matches_naive_counting_reference() {
        let mut rng = seeded_rng(71);
        for case in 0..100 {
            let n = 1 + (case % 4);
            let pd: Vec<f32> = (0..n * 64)
                .map(|_| if rng.random_bool(0.35) { 1.0 } else { 0.0 })
                .collect();
            let ld: Vec<f32> = (0..n * 64)
                .map(|_| if rng.random_bool(0.45) { 1.0 } else { 0.0 })
                .collect();
            let report = compute_metrics(
                &mask(n, 8, 8, pd.clone()),
                &mask(n, 8, 8, ld.clone()),
                Aggregation::PerImageMean,
            )
            .unwrap();

            let (mut acc, mut prec, mut fb, mut miou) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let (mut tp, mut fp, mut tn, mut fnn) = (0.0f64, 0.0, 0.0, 0.0);
                for j in i * 64..(i + 1) * 64 {
                    match (pd[j] == 1.0, ld[j] == 1.0) {
                        (true, true) => tp += 1.0,
                        (true, false) => fp += 1.0,
                        (false, false) => tn += 1.0,
                        (false, true) => fnn += 1.0,
                    }
                }
                acc += (tp + tn) / 64.0;
                let p = if tp + fp > 0.0 {
                    tp / (tp + fp)
                } else if fnn == 0.0 {
                    1.0
                } else {
                    0.0
                };
                let r = if tp + fnn > 0.0 {
                    tp / (tp + fnn)
                } else if fp == 0.0 {
                    1.0
                } else {
                    0.0
                };
                prec += p;
                fb += if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else if tp + fp + fnn == 0.0 {
                    1.0
                } else {
                    0.0
                };
                let ic = if tp + fp + fnn > 0.0 {
                    tp / (tp + fp + fnn)
                } else {
                    1.0
                };
                let is = if tn + fp + fnn > 0.0 {
                    tn / (tn + fp + fnn)
                } else {
                    1.0
                };
                miou += 0.5 * (ic + is);
            }
            let inv = 1.0 / n as f64;
            assert!((report.accuracy - acc * inv).abs() < 1e-9);
            assert!((report.precision - prec * inv).abs() < 1e-9);
            assert!((report.f_measure - fb * inv).abs() < 1e-9);
            assert!((report.miou - miou * inv).abs() < 1e-9);
        }
    }

    #[test]
    fn complementing_both_masks_swaps_the_class_ious() {
        let mut rng = seeded_rng(73);
        let pd: Vec<f32> = (0..2 * 49)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let ld: Vec<f32> = (0..2 * 49)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let inv = |d: &[f32]| -> Vec<f32> { d.iter().map(|&v| 1.0 - v).collect() };
        let a = compute_metrics(
            &mask(2, 7, 7, pd.clone()),
            &mask(2, 7, 7, ld.clone()),
            Aggregation::Global,
        )
        .unwrap();
        let b = compute_metrics(
            &mask(2, 7, 7, inv(&pd)),
            &mask(2, 7, 7, inv(&ld)),
            Aggregation::Global,
        )
        .unwrap();
        assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        assert!((a.miou - b.miou).abs() < 1e-12);
        // Complementing maps cloud counts onto sky counts.
        assert_eq!((a.tp, a.tn), (b.tn, b.tp));
        assert_eq!((a.fp, a.fn_), (b.fn_, b.fp));
    }

    #[test]
    fn image_order_does_not_change_the_report() {
        let mut rng = seeded_rng(79);
        let imgs: Vec<Vec<f32>> = (0..4)
            .map(|_| {
                (0..16)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let lbls: Vec<Vec<f32>> = (0..4)
            .map(|_| {
                (0..16)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let build = |order: &[usize]| {
            let p: Vec<f32> = order.iter().flat_map(|&i| imgs[i].clone()).collect();
            let l: Vec<f32> = order.iter().flat_map(|&i| lbls[i].clone()).collect();
            compute_metrics(
                &mask(4, 4, 4, p),
                &mask(4, 4, 4, l),
                Aggregation::PerImageMean,
            )
            .unwrap()
        };
        let a = build(&[0, 1, 2, 3]);
        let b = build(&[3, 0, 2, 1]);
        assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        assert!((a.precision - b.precision).abs() < 1e-12);
        assert!((a.f_measure - b.f_measure).abs() < 1e-12);
        assert!((a.miou - b.miou).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_binary_values_and_serializes_stably() {
        let p = mask(1, 2, 2, vec![0.0, 0.5, 1.0, 1.0]);
        let l = mask(1, 2, 2, vec![0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            compute_metrics(&p, &l, Aggregation::Global),
            Err(Error::Data(_))
        ));

        let ok = mask(1, 2, 2, vec![0.0, 1.0, 1.0, 1.0]);
        let r = compute_metrics(&ok, &l, Aggregation::Global).unwrap();
        let text = r.to_string();
        assert!(text.starts_with("acc="));
        for key in ["prec=", "fbeta=", "miou=", "n_images=1", "aggregation=global"] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }
}
