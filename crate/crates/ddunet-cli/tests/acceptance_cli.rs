//! End-to-end smoke of every subcommand through the built binary:
//! synth -> train -> eval -> predict -> params -> gradcheck, plus the exit
//! code contract. Run with `-- --nocapture` to see the PASS line.

use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddunet"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "`ddunet {}` failed with {:?}\nstdout: {}\nstderr: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn acceptance_criterion_10_cli_contract() {
    let start = Instant::now();
    let tmp = tempfile::TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let masks = tmp.path().join("masks");

    // synth
    let out = run_ok(&[
        "synth",
        "--count",
        "8",
        "--size",
        "48",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(stdout_of(&out).contains("generated=8"));
    assert!(data.join("images").join("synth_00000.png").exists());
    assert!(data.join("GTmaps").join("synth_00000.png").exists());

    // train (1 epoch, small model)
    let out = run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--base-channels",
        "2",
        "--image-size",
        "48",
        "--seed",
        "3",
        "--val-ratio",
        "0.25",
        "--deterministic",
    ]);
    let text = stdout_of(&out);
    assert!(text.contains("epoch=0, lr=0.00100000, train_loss="));
    let ckpt = run.join("final.ddun");
    assert!(ckpt.exists());
    assert!(run.join("best.ddun").exists());
    assert!(run.join("train_log.txt").exists());

    // eval
    let out = run_ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--seed",
        "3",
        "--val-ratio",
        "0.25",
    ]);
    let text = stdout_of(&out);
    for key in ["acc=", "prec=", "fbeta=", "miou=", "n_images=2", "aggregation="] {
        assert!(text.contains(key), "eval output missing {key}: {text}");
    }

    // eval with a contradicting width must fail with exit 1
    let out = bin()
        .args([
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--base-channels",
            "8",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("base_channels"));

    // predict
    let out = run_ok(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        masks.to_str().unwrap(),
        "--threshold",
        "0.5",
    ]);
    assert!(stdout_of(&out).contains("masks_written=8"));
    let mask_files = std::fs::read_dir(&masks).unwrap().count();
    assert_eq!(mask_files, 8);

    // params
    let out = run_ok(&["params", "--base-channels", "8"]);
    let text = stdout_of(&out);
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total="))
        .expect("total line")
        .parse()
        .expect("total parses");
    assert!(
        (260_000..=400_000).contains(&total),
        "params total {total} outside window"
    );

    // config file with flag override
    let conf = tmp.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "# smoke config\ndata={}\nbase-channels=2\nimage-size=48\nepochs=5\nseed=3\nval-ratio=0.25\nbatch-size=4\n",
            data.display()
        ),
    )
    .unwrap();
    let run2 = tmp.path().join("run2");
    let out = run_ok(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    let text = stdout_of(&out);
    // --epochs 1 overrides epochs=5 from the file.
    assert!(text.contains("epoch=0,"));
    assert!(!text.contains("epoch=1,"));

    // gradcheck
    let out = run_ok(&["gradcheck"]);
    assert!(stdout_of(&out).contains("gradcheck=pass"));

    // exit code contract
    let out = bin().args(["unknown-subcommand"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["params", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(300),
        "smoke took {elapsed:.1?}, bound is 5 minutes"
    );
    println!("acceptance: criterion 10 (cli contract end to end) PASS in {elapsed:.1?}");
}

#[test]
fn prediction_masks_are_strictly_binary_bytes() {
    let tmp = tempfile::TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let masks = tmp.path().join("masks");
    run_ok(&[
        "synth",
        "--count",
        "4",
        "--size",
        "32",
        "--seed",
        "11",
        "--out",
        data.to_str().unwrap(),
    ]);
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--base-channels",
        "2",
        "--image-size",
        "32",
        "--val-ratio",
        "0.25",
    ]);
    run_ok(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        run.join("final.ddun").to_str().unwrap(),
        "--out",
        masks.to_str().unwrap(),
    ]);
    for entry in std::fs::read_dir(&masks).unwrap() {
        let path = entry.unwrap().path();
        let img = image::open(&path).unwrap().to_luma8();
        assert!(
            img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255),
            "{} contains non-binary bytes",
            path.display()
        );
    }
}
