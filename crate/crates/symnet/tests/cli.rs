//! End-to-end tests of the command-line interface: exit codes, the
//! synth -> train -> eval pipeline, and the emitted file formats.

use std::path::Path;
use std::process::Command;

fn symnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symnet"))
}

fn write_synth_spec(path: &Path) {
    let spec = serde_json::json!({
        "n_attrs": 3,
        "n_objs": 3,
        "feat_dim": 12,
        "latent_dim": 6,
        "samples_per_pair": 6,
        "unseen_fraction": 0.2,
        "noise_sigma": 0.05,
        "seed": 77,
    });
    std::fs::write(path, spec.to_string()).unwrap();
}

fn write_train_config(path: &Path) {
    let cfg = serde_json::json!({
        "feat_dim": 12,
        "embed_dim": 6,
        "latent_dim": 6,
        "attn_hidden": 8,
        "clf_hidden": 8,
        "epochs": 4,
        "batch_size": 16,
        "lr": 0.01,
        "log_every": 1,
    });
    std::fs::write(path, cfg.to_string()).unwrap();
}

#[test]
fn gradcheck_exits_zero() {
    let out = symnet()
        .args(["gradcheck", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let payload: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(payload["max_rel_err"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = symnet()
        .args(["eval", "--data", "/nonexistent", "--protocol", "closed"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.contains("--ckpt"),
        "usage message names the flag: {stderr}"
    );
}

#[test]
fn unknown_flag_rejected() {
    let out = symnet()
        .args(["gradcheck", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = symnet()
        .args([
            "train",
            "--data",
            dir.path().to_str().unwrap(),
            "--out",
            dir.path().join("x.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let payload: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(payload["error"], "missing_file");
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("spec.json");
    let cfg_path = dir.path().join("train.json");
    let ckpt_path = dir.path().join("model.ckpt");
    write_synth_spec(&spec_path);
    write_train_config(&cfg_path);

    // synth
    let out = symnet()
        .args([
            "synth",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            data_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "synth stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["meta.json", "features.bin", "embeds.bin", "truth.json"] {
        assert!(data_dir.join(file).exists(), "missing {file}");
    }

    // train
    let out = symnet()
        .args([
            "train",
            "--data",
            data_dir.to_str().unwrap(),
            "--profile",
            "custom",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            ckpt_path.to_str().unwrap(),
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "train stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let first_line = stdout.lines().next().expect("training log emitted");
    let record: serde_json::Value = serde_json::from_str(first_line).unwrap();
    for key in [
        "epoch", "step", "sym", "clo", "inv", "com", "cls_a", "cls_o", "tri", "total",
    ] {
        assert!(record.get(key).is_some(), "log line missing {key}");
    }
    assert!(ckpt_path.exists());

    // eval (closed world) with report and score dump
    let report_path = dir.path().join("report.json");
    let scores_path = dir.path().join("scores.bin");
    let out = symnet()
        .args([
            "eval",
            "--data",
            data_dir.to_str().unwrap(),
            "--ckpt",
            ckpt_path.to_str().unwrap(),
            "--protocol",
            "closed",
            "--topk",
            "1,2,3",
            "--report",
            report_path.to_str().unwrap(),
            "--dump-scores",
            scores_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "eval stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    for key in ["topk", "attr_acc", "obj_acc", "n_samples"] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
    let top1 = report["topk"]["1"].as_f64().unwrap();
    let top3 = report["topk"]["3"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(top1 <= top3);
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&report_path).unwrap())
            .unwrap(),
        report
    );

    // score dump format: magic, count, n, m, then count*n*m f32 with NaN
    // exactly on masked cells
    let meta = symnet::data::load_metadata(data_dir.join("meta.json")).unwrap();
    let mask = symnet::data::build_pair_mask(&meta, symnet::data::Protocol::ClosedWorld, false);
    let bytes = std::fs::read(&scores_path).unwrap();
    assert_eq!(&bytes[0..4], b"SYMS");
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n_test = meta.split_indices(symnet::data::Split::Test).len();
    assert_eq!(count, n_test);
    assert_eq!(n, meta.n_attrs());
    assert_eq!(m, meta.n_objs());
    assert_eq!(bytes.len(), 16 + count * n * m * 4);
    let mut offset = 16;
    for _ in 0..count {
        for a in 0..n {
            for o in 0..m {
                let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
                offset += 4;
                if mask.admits(a, o) {
                    assert!(v.is_finite() && (0.0..=1.0).contains(&v));
                } else {
                    assert!(v.is_nan(), "masked cell ({a}, {o}) must dump as NaN");
                }
            }
        }
    }

    // generalized protocol also completes (degenerate seen group allowed)
    let out = symnet()
        .args([
            "eval",
            "--data",
            data_dir.to_str().unwrap(),
            "--ckpt",
            ckpt_path.to_str().unwrap(),
            "--protocol",
            "generalized",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    for key in [
        "bias_grid",
        "seen_curve",
        "unseen_curve",
        "auc_topk",
        "best_hm",
    ] {
        assert!(
            report.get(key).is_some(),
            "generalized report missing {key}"
        );
    }

    // components
    let out = symnet()
        .args([
            "components",
            "--data",
            data_dir.to_str().unwrap(),
            "--ckpt",
            ckpt_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let payload: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(payload["attr_acc"].is_number());
    assert!(payload["obj_acc"].is_number());

    // retrieve: TSV of rank, sample id, distance
    let test_sample = meta
        .samples
        .iter()
        .find(|s| s.split == symnet::data::Split::Test)
        .unwrap();
    let remove = test_sample.attr.to_string();
    let add = ((test_sample.attr + 1) % meta.n_attrs()).to_string();
    let out = symnet()
        .args([
            "retrieve",
            "--data",
            data_dir.to_str().unwrap(),
            "--ckpt",
            ckpt_path.to_str().unwrap(),
            "--sample",
            &test_sample.id,
            "--remove",
            &remove,
            "--add",
            &add,
            "--k",
            "5",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "retrieve stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5);
    for (i, line) in lines.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3, "TSV row: {line}");
        assert_eq!(cols[0].parse::<usize>().unwrap(), i + 1);
        assert_ne!(
            cols[1], test_sample.id,
            "query sample excluded from results"
        );
        cols[2].parse::<f64>().unwrap();
    }

    // determinism across processes: retrain with the same seed and compare
    let ckpt2 = dir.path().join("model2.ckpt");
    let out = symnet()
        .args([
            "train",
            "--data",
            data_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            ckpt2.to_str().unwrap(),
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(&ckpt_path).unwrap(),
        std::fs::read(&ckpt2).unwrap(),
        "same seed must reproduce the checkpoint byte for byte"
    );
}

#[test]
fn eval_is_deterministic_across_thread_caps_and_val_split_warns() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("spec.json");
    let cfg_path = dir.path().join("train.json");
    let ckpt_path = dir.path().join("model.ckpt");
    write_synth_spec(&spec_path);
    write_train_config(&cfg_path);
    let out = symnet()
        .args([
            "synth",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            data_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = symnet()
        .args([
            "train",
            "--data",
            data_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            ckpt_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    let eval_with_threads = |threads: &str| {
        let out = symnet()
            .env("SYMNET_THREADS", threads)
            .args([
                "eval",
                "--data",
                data_dir.to_str().unwrap(),
                "--ckpt",
                ckpt_path.to_str().unwrap(),
                "--protocol",
                "closed",
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        String::from_utf8(out.stdout).unwrap()
    };
    let single = eval_with_threads("1");
    let auto = eval_with_threads("0");
    let four = eval_with_threads("4");
    assert_eq!(single, auto, "report must not depend on the thread cap");
    assert_eq!(single, four);

    // evaluating the (empty) val split warns but completes
    let out = symnet()
        .args([
            "eval",
            "--data",
            data_dir.to_str().unwrap(),
            "--ckpt",
            ckpt_path.to_str().unwrap(),
            "--protocol",
            "generalized",
            "--split",
            "val",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.contains("warning"),
        "expected a degenerate-split warning: {stderr}"
    );
}

#[test]
fn ablation_flags_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("spec.json");
    let cfg_path = dir.path().join("train.json");
    write_synth_spec(&spec_path);
    write_train_config(&cfg_path);
    let out = symnet()
        .args([
            "synth",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            data_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    let out = symnet()
        .args([
            "train",
            "--data",
            data_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().join("ablated.ckpt").to_str().unwrap(),
            "--no-loss",
            "sym,tri,inv",
            "--no-attention",
            "--dist",
            "l1",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // unknown loss tag is a domain error
    let out = symnet()
        .args([
            "train",
            "--data",
            data_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().join("bad.ckpt").to_str().unwrap(),
            "--no-loss",
            "bogus",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
