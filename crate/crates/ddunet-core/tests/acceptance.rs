//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. Criteria execute sequentially inside a single test so
//! the per-criterion wall-clock bounds are measured without interference.
//!
//! Run with `cargo test -p ddunet-core --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use ddunet_core::data::synthetic::generate_synthetic;
use ddunet_core::gradcheck;
use ddunet_core::loss::{total_loss, LossWeights};
use ddunet_core::metrics::{compute_metrics, Aggregation};
use ddunet_core::model::{DdunetConfig, DdunetModel, ModelVariant};
use ddunet_core::ops;
use ddunet_core::oracle::conv2d_reference_batched;
use ddunet_core::trainer::{train, TrainConfig};
use ddunet_core::{Error, Tape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

struct Criterion {
    number: usize,
    name: &'static str,
    run: fn() -> Result<String, String>,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        number: 1,
        name: "gradient correctness (finite differences, f64)",
        run: criterion_gradients,
    },
    Criterion {
        number: 2,
        name: "convolution oracle equivalence over the parameter grid",
        run: criterion_conv_oracle,
    },
    Criterion {
        number: 3,
        name: "parameter budget and width scaling ratios",
        run: criterion_parameter_budget,
    },
    Criterion {
        number: 4,
        name: "multi-scale gating properties",
        run: criterion_gating,
    },
    Criterion {
        number: 5,
        name: "dynamic head contract",
        run: criterion_dynamic_head,
    },
    Criterion {
        number: 6,
        name: "loss values and stage weighting",
        run: criterion_loss_values,
    },
    Criterion {
        number: 7,
        name: "metrics against the counting oracle",
        run: criterion_metrics,
    },
    Criterion {
        number: 8,
        name: "synthetic convergence and ablation direction",
        run: criterion_convergence,
    },
    Criterion {
        number: 9,
        name: "bit reproducibility and checkpoint round trip",
        run: criterion_reproducibility,
    },
];

#[test]
fn acceptance_criteria() {
    let mut failures = Vec::new();
    for c in CRITERIA {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => {
                println!(
                    "acceptance: criterion {} ({}) PASS in {:.1?} [{}]",
                    c.number, c.name, elapsed, detail
                );
            }
            Err(why) => {
                println!(
                    "acceptance: criterion {} ({}) FAIL in {:.1?}: {}",
                    c.number, c.name, elapsed, why
                );
                failures.push(c.number);
            }
        }
    }
    assert!(failures.is_empty(), "criteria failed: {failures:?}");
}

fn bounded(start: Instant, bound: Duration, what: &str) -> Result<(), String> {
    let elapsed = start.elapsed();
    if elapsed > bound {
        return Err(format!("{what} took {elapsed:.1?}, bound is {bound:.1?}"));
    }
    Ok(())
}

fn criterion_gradients() -> Result<String, String> {
    let start = Instant::now();
    let report = gradcheck::run_default_suite().map_err(|e| e.to_string())?;
    if !report.all_pass() {
        return Err(format!("failing cases:\n{report}"));
    }
    let worst = report
        .cases
        .iter()
        .map(|c| c.max_rel_err / c.tolerance)
        .fold(0.0f64, f64::max);
    bounded(start, Duration::from_secs(120), "gradient suite")?;
    Ok(format!(
        "{} cases, worst error at {:.1}% of tolerance",
        report.cases.len(),
        100.0 * worst
    ))
}

fn criterion_conv_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Pcg64::seed_from_u64(20_08_10);
    let tape = Tape::inference();
    let (b, cin, h, w) = (2usize, 4usize, 5usize, 5usize);
    let mut checked = 0;
    for stride in [1usize, 2] {
        for padding in [0usize, 1, 2] {
            for dilation in [1usize, 2, 3, 4] {
                for groups in [1usize, cin] {
                    let cout = 4;
                    let n_in = b * cin * h * w;
                    let x_data: Vec<f32> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let w_elems = cout * (cin / groups) * 9;
                    let w_data: Vec<f32> =
                        (0..w_elems).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let b_data: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();

                    let x = Tensor::new(vec![b, cin, h, w], x_data.clone()).unwrap();
                    let wt =
                        Tensor::new(vec![cout, cin / groups, 3, 3], w_data.clone()).unwrap();
                    let bt = Tensor::new(vec![cout], b_data.clone()).unwrap();

                    let reference = conv2d_reference_batched(
                        &x_data,
                        b,
                        cin,
                        h,
                        w,
                        &w_data,
                        cout,
                        3,
                        3,
                        Some(&b_data),
                        stride,
                        padding,
                        dilation,
                        groups,
                    );
                    let result =
                        ops::conv2d(&tape, &x, &wt, Some(&bt), stride, padding, dilation, groups);
                    match (reference, result) {
                        (Some(expect), Ok(y)) => {
                            let got = y.to_vec();
                            for (i, (a, e)) in got.iter().zip(&expect).enumerate() {
                                let d = (a - e).abs();
                                if d >= 1e-5 {
                                    return Err(format!(
                                        "s={stride} p={padding} d={dilation} g={groups} \
                                         element {i}: |{a} - {e}| = {d:.2e}"
                                    ));
                                }
                            }
                            checked += 1;
                        }
                        (None, Err(Error::Shape(_))) => checked += 1,
                        (None, Ok(_)) => {
                            return Err(format!(
                                "s={stride} p={padding} d={dilation} g={groups}: kernel does \
                                 not fit but conv2d accepted it"
                            ))
                        }
                        (_, Err(e)) => {
                            return Err(format!(
                                "s={stride} p={padding} d={dilation} g={groups}: {e}"
                            ))
                        }
                    }
                }
            }
        }
    }
    bounded(start, Duration::from_secs(10), "convolution grid")?;
    Ok(format!("{checked} grid points"))
}

fn criterion_parameter_budget() -> Result<String, String> {
    let count = |c: usize| -> Result<usize, String> {
        let config = DdunetConfig {
            base_channels: c,
            input_size: 256,
            ..DdunetConfig::default()
        };
        Ok(DdunetModel::<f32>::new(config, 1)
            .map_err(|e| e.to_string())?
            .count_parameters()
            .0)
    };
    let c8 = count(8)?;
    if !(260_000..=400_000).contains(&c8) {
        return Err(format!("base width 8 has {c8} parameters, window is [260k, 400k]"));
    }
    let c16 = count(16)?;
    let c4 = count(4)?;
    let up = c16 as f64 / c8 as f64;
    let down = c4 as f64 / c8 as f64;
    if !(3.4..=4.0).contains(&up) {
        return Err(format!("upscale ratio {up:.3} outside [3.4, 4.0]"));
    }
    if !(0.24..=0.31).contains(&down) {
        return Err(format!("downscale ratio {down:.3} outside [0.24, 0.31]"));
    }
    Ok(format!(
        "counts {c4}/{c8}/{c16}, ratios {down:.3} and {up:.3}"
    ))
}

fn criterion_gating() -> Result<String, String> {
    let start = Instant::now();
    let mut init = ddunet_core::Initializer::new(808);
    let block = ddunet_core::dmsc::DmscBlock::<f32>::new(&mut init, 8, false);
    let mut rng = Pcg64::seed_from_u64(808);
    let n = 3 * 8 * 12 * 12;
    let x = Tensor::new(
        vec![3, 8, 12, 12],
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>(),
    )
    .unwrap();
    let tape = Tape::inference();

    // Rows on the simplex.
    let (w, maps) = block
        .gate_and_branches(&tape, &x, ddunet_core::BnMode::Eval)
        .map_err(|e| e.to_string())?;
    let weights = w.to_vec();
    for row in 0..3 {
        let sum: f32 = weights[row * 4..(row + 1) * 4].iter().sum();
        if (sum - 1.0).abs() >= 1e-6 {
            return Err(format!("row {row} sums to {sum}"));
        }
    }

    // Blended map inside the per-element convex hull of the branches.
    let blended = ops::branch_weighted_sum(&tape, &maps, &w)
        .unwrap()
        .to_vec();
    let datas: Vec<Vec<f32>> = maps.iter().map(|m| m.to_vec()).collect();
    for i in 0..blended.len() {
        let lo = datas.iter().map(|d| d[i]).fold(f32::INFINITY, f32::min);
        let hi = datas.iter().map(|d| d[i]).fold(f32::NEG_INFINITY, f32::max);
        if blended[i] < lo - 1e-6 || blended[i] > hi + 1e-6 {
            return Err(format!("element {i}: {} outside [{lo}, {hi}]", blended[i]));
        }
    }

    // Dominant logit selects its branch.
    block.force_gate_logits([20.0, 0.0, 0.0, 0.0]);
    let w = block
        .branch_weights(&tape, &x, ddunet_core::BnMode::Eval)
        .unwrap();
    let blended = ops::branch_weighted_sum(&tape, &maps, &w)
        .unwrap()
        .to_vec();
    let branch0 = datas[0].clone();
    for (i, (a, e)) in blended.iter().zip(&branch0).enumerate() {
        if (a - e).abs() >= 1e-4 {
            return Err(format!("dominance: element {i} differs by {:.2e}", (a - e).abs()));
        }
    }

    bounded(start, Duration::from_secs(5), "gating checks")?;
    Ok("simplex, convex hull and dominance hold".to_string())
}

fn criterion_dynamic_head() -> Result<String, String> {
    let start = Instant::now();
    let mut init = ddunet_core::Initializer::new(909);
    let generator = ddunet_core::dwbg::DwbgGenerator::<f32>::new(&mut init, 6);
    let mut rng = Pcg64::seed_from_u64(909);
    let rand4 = |rng: &mut Pcg64, shape: &[usize]| -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let enc = rand4(&mut rng, &[3, 6, 10, 10]);
    let dec = rand4(&mut rng, &[3, 6, 8, 8]);
    let tape = Tape::inference();

    let (kernels, bias) = generator.generate(&tape, &enc, &dec).map_err(|e| e.to_string())?;
    if kernels.shape() != [3, 1, 6, 3, 3] || bias.shape() != [3, 1] {
        return Err(format!(
            "generated shapes {:?} / {:?}",
            kernels.shape(),
            bias.shape()
        ));
    }

    // Per-sample independence, bit-exact.
    let base = generator.forward(&tape, &enc, &dec).unwrap().to_vec();
    let mut enc_d = enc.to_vec();
    for v in &mut enc_d[..6 * 100] {
        *v += 0.21;
    }
    let enc2 = Tensor::new(vec![3, 6, 10, 10], enc_d).unwrap();
    let changed = generator.forward(&tape, &enc2, &dec).unwrap().to_vec();
    let per = base.len() / 3;
    let (b_bits, c_bits): (Vec<u32>, Vec<u32>) = (
        base[per..].iter().map(|v| v.to_bits()).collect(),
        changed[per..].iter().map(|v| v.to_bits()).collect(),
    );
    if b_bits != c_bits {
        return Err("perturbing sample 0 changed other samples".to_string());
    }

    // B=1 dynamic conv against the static path.
    let x = rand4(&mut rng, &[1, 6, 8, 8]);
    let k = rand4(&mut rng, &[1, 1, 6, 3, 3]);
    let bv = rand4(&mut rng, &[1, 1]);
    let dynamic = ops::dynamic_conv2d(&tape, &x, &k, &bv).unwrap().to_vec();
    let kw = Tensor::new(vec![1, 6, 3, 3], k.to_vec()).unwrap();
    let bw = Tensor::new(vec![1], bv.to_vec()).unwrap();
    let fixed = ops::conv2d(&tape, &x, &kw, Some(&bw), 1, 1, 1, 1)
        .unwrap()
        .to_vec();
    for (i, (a, e)) in dynamic.iter().zip(&fixed).enumerate() {
        if (a - e).abs() >= 1e-7 {
            return Err(format!("B=1 mismatch at {i}: {:.2e}", (a - e).abs()));
        }
    }

    bounded(start, Duration::from_secs(5), "dynamic head checks")?;
    Ok("shapes, independence and B=1 equivalence hold".to_string())
}

fn criterion_loss_values() -> Result<String, String> {
    let tape = Tape::inference();
    let labels = Tensor::<f64>::new(vec![1, 1, 4, 4], {
        let mut v = vec![0.0; 16];
        for (i, x) in v.iter_mut().enumerate() {
            *x = (i % 2) as f64;
        }
        v
    })
    .unwrap();
    let half = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.5);
    let loss = ops::bce_loss(&tape, &half, &labels)
        .unwrap()
        .item()
        .unwrap();
    if (loss - std::f64::consts::LN_2).abs() >= 1e-6 {
        return Err(format!("uniform-probability loss {loss} vs ln 2"));
    }

    let stage = vec![
        Tensor::<f64>::scalar(0.3),
        Tensor::<f64>::scalar(0.4),
        Tensor::<f64>::scalar(0.5),
    ];
    let total = total_loss(&tape, &stage, &LossWeights::default())
        .unwrap()
        .item()
        .unwrap();
    let expect = 0.3 * 1.0 + 0.4 * 0.5 + 0.5 * 0.2;
    if total != expect {
        return Err(format!("stage weighting {total} vs {expect}"));
    }
    Ok(format!("ln2 within 1e-6, weighting exact ({total})"))
}

fn criterion_metrics() -> Result<String, String> {
    let start = Instant::now();
    // Hand case.
    let label = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let pred = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
    let r = compute_metrics(&pred, &label, Aggregation::Global).map_err(|e| e.to_string())?;
    if r.accuracy != 0.5 || r.precision != 0.5 || r.miou != 0.25 {
        return Err(format!(
            "hand case: acc={} prec={} miou={}",
            r.accuracy, r.precision, r.miou
        ));
    }
    if (r.f_measure - 2.0 / 3.0).abs() > 1e-12 {
        return Err(format!("hand case f-measure {}", r.f_measure));
    }

    // One hundred random pairs against a naive counting pass.
    let mut rng = Pcg64::seed_from_u64(1001);
    for case in 0..100 {
        let pd: Vec<f32> = (0..64)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let ld: Vec<f32> = (0..64)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let report = compute_metrics(
            &Tensor::new(vec![1, 1, 8, 8], pd.clone()).unwrap(),
            &Tensor::new(vec![1, 1, 8, 8], ld.clone()).unwrap(),
            Aggregation::PerImageMean,
        )
        .map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut tn, mut fnn) = (0.0f64, 0.0, 0.0, 0.0);
        for i in 0..64 {
            match (pd[i] == 1.0, ld[i] == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fnn += 1.0,
            }
        }
        let acc = (tp + tn) / 64.0;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else if fnn == 0.0 { 1.0 } else { 0.0 };
        let rec = if tp + fnn > 0.0 { tp / (tp + fnn) } else if fp == 0.0 { 1.0 } else { 0.0 };
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else if tp + fp + fnn == 0.0 {
            1.0
        } else {
            0.0
        };
        let ic = if tp + fp + fnn > 0.0 { tp / (tp + fp + fnn) } else { 1.0 };
        let is = if tn + fp + fnn > 0.0 { tn / (tn + fp + fnn) } else { 1.0 };
        let miou = 0.5 * (ic + is);
        for (got, want, what) in [
            (report.accuracy, acc, "acc"),
            (report.precision, prec, "prec"),
            (report.f_measure, f1, "f1"),
            (report.miou, miou, "miou"),
        ] {
            if (got - want).abs() >= 1e-9 {
                return Err(format!("case {case} {what}: {got} vs {want}"));
            }
        }
    }
    bounded(start, Duration::from_secs(5), "metric checks")?;
    Ok("hand case exact, 100 random pairs within 1e-9".to_string())
}

fn convergence_config(data: &std::path::Path, out: &std::path::Path) -> TrainConfig {
    let mut config = TrainConfig::new(data, out);
    config.epochs = 15;
    config.batch_size = 16;
    config.base_channels = 4;
    config.input_size = 48;
    config.seed = 7;
    config.val_ratio = 0.1;
    config
}

fn criterion_convergence() -> Result<String, String> {
    let start = Instant::now();
    let data = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    generate_synthetic(200, 48, 20_250_810, data.path()).map_err(|e| e.to_string())?;

    let out_full = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let full_cfg = convergence_config(data.path(), out_full.path());
    let full = train(&full_cfg).map_err(|e| e.to_string())?;
    let full_time = start.elapsed();
    if full_time > Duration::from_secs(900) {
        return Err(format!("full run took {full_time:.1?}, bound is 15 minutes"));
    }
    let last = full.log.last().unwrap();
    if !(last.test_miou > 0.85) {
        return Err(format!("held-out MIoU {:.4} <= 0.85", last.test_miou));
    }
    if !(last.train_loss < 0.25) {
        return Err(format!("final train loss {:.4} >= 0.25", last.train_loss));
    }

    // Ablation direction: the full model must not trail the plain baseline
    // by more than 0.01 MIoU under the identical seed and budget.
    let out_base = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut base_cfg = convergence_config(data.path(), out_base.path());
    base_cfg.variant = ModelVariant::Baseline;
    let baseline = train(&base_cfg).map_err(|e| e.to_string())?;
    let base_last = baseline.log.last().unwrap();
    if last.test_miou < base_last.test_miou - 0.01 {
        return Err(format!(
            "full {:.4} trails baseline {:.4} by more than 0.01",
            last.test_miou, base_last.test_miou
        ));
    }

    Ok(format!(
        "full miou {:.4} loss {:.4} in {:.0?}; baseline miou {:.4}",
        last.test_miou, last.train_loss, full_time, base_last.test_miou
    ))
}

fn criterion_reproducibility() -> Result<String, String> {
    let start = Instant::now();
    let data = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    generate_synthetic(24, 32, 4242, data.path()).map_err(|e| e.to_string())?;

    let run = |seed_dir: &std::path::Path| -> Result<(Vec<u8>, std::path::PathBuf), String> {
        let mut config = TrainConfig::new(data.path(), seed_dir);
        config.epochs = 1;
        config.batch_size = 8;
        config.base_channels = 2;
        config.input_size = 32;
        config.seed = 99;
        config.val_ratio = 0.25;
        config.deterministic = true;
        let outcome = train(&config).map_err(|e| e.to_string())?;
        let log = std::fs::read(&outcome.log_path).map_err(|e| e.to_string())?;
        Ok((log, outcome.final_checkpoint))
    };

    let out1 = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let out2 = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let (log1, ckpt1) = run(out1.path())?;
    let (log2, _) = run(out2.path())?;
    if log1 != log2 {
        return Err("loss logs differ between identical runs".to_string());
    }

    // Checkpoint round trip: bit-identical eval forward.
    let (model, _) = ddunet_core::data::checkpoint::load_model(&ckpt1).map_err(|e| e.to_string())?;
    let reload_path = out1.path().join("again.ddun");
    ddunet_core::data::checkpoint::save_model(&model, &reload_path, 0, 99)
        .map_err(|e| e.to_string())?;
    let (model2, _) =
        ddunet_core::data::checkpoint::load_model(&reload_path).map_err(|e| e.to_string())?;

    let x = Tensor::new(
        vec![2, 3, 32, 32],
        (0..2 * 3 * 1024).map(|i| (i % 251) as f32 / 251.0).collect::<Vec<_>>(),
    )
    .unwrap();
    let tape = Tape::inference();
    let a = model.forward(&tape, &x, ddunet_core::Mode::Eval).unwrap()[0].to_vec();
    let b = model2.forward(&tape, &x, ddunet_core::Mode::Eval).unwrap()[0].to_vec();
    let (ab, bb): (Vec<u32>, Vec<u32>) = (
        a.iter().map(|v| v.to_bits()).collect(),
        b.iter().map(|v| v.to_bits()).collect(),
    );
    if ab != bb {
        return Err("round-tripped model's eval forward is not bit-identical".to_string());
    }

    bounded(start, Duration::from_secs(120), "reproducibility checks")?;
    Ok("identical logs; bit-identical forward after round trip".to_string())
}
