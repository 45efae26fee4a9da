//! End-to-end checks of the command-line surface: the full
//! datagen -> train -> enhance -> eval pipeline on a micro configuration,
//! seed reproducibility, sweep output, and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

use diffse_core::experiment::ExperimentConfig;

fn diffse() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffse"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn diffse");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn diffse").status.code().unwrap_or(-1)
}

/// Small enough to train in about a second. The short schedule needs a
/// steeper beta ramp to keep the capped weight curve feasible.
fn micro_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.n_train = 4;
    cfg.corpus.n_test = 1;
    cfg.corpus.n_unseen = 1;
    cfg.schedule.steps = 8;
    cfg.schedule.beta = diffse_core::schedule::BetaSpec::Linear { start: 0.05, end: 0.35 };
    cfg.model.max_step = 8;
    cfg.train.epochs = 1;
    cfg.train.pretrain_nc = false;
    cfg.train.batch_size = 8;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &micro_config());
    let corpus = tmp.path().join("corpus");
    let train_out = tmp.path().join("trained");
    let enh_out = tmp.path().join("enhanced");
    let eval_out = tmp.path().join("evaluated");

    run_ok(diffse().args([
        "datagen",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]));
    assert!(corpus.join("manifest.json").exists());
    assert!(corpus.join("config.resolved.json").exists(), "config must be echoed");
    assert!(corpus.join("train").exists());

    run_ok(diffse().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]));
    assert!(train_out.join("checkpoint.bin").exists());
    assert!(train_out.join("train_report.csv").exists());
    assert!(train_out.join("config.resolved.json").exists());

    run_ok(diffse().args([
        "enhance",
        "--checkpoint",
        train_out.join("checkpoint.bin").to_str().unwrap(),
        "--manifest",
        corpus.join("manifest.json").to_str().unwrap(),
        "--out",
        enh_out.to_str().unwrap(),
        "--split",
        "test",
    ]));
    assert!(enh_out.join("per_utterance.csv").exists());
    assert!(enh_out.join("embeddings.csv").exists());
    let enhanced_count = std::fs::read_dir(&enh_out)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_enhanced.f64")
        })
        .count();
    assert_eq!(enhanced_count, 10, "one enhanced signal per test record");

    run_ok(diffse().args([
        "eval",
        "--manifest",
        corpus.join("manifest.json").to_str().unwrap(),
        "--enhanced",
        enh_out.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    assert!(eval_out.join("per_utterance.csv").exists());
    assert!(eval_out.join("eval_table.csv").exists());
    assert!(eval_out.join("summary.json").exists());

    // the eval table has an unprocessed and an enhanced row per family
    let table = std::fs::read_to_string(eval_out.join("eval_table.csv")).unwrap();
    assert!(table.lines().count() > 2 * 10);
}

#[test]
fn datagen_is_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = micro_config();
    cfg.corpus.n_train = 2;
    let cfg_path = write_config(tmp.path(), &cfg);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "9")] {
        run_ok(diffse().args([
            "datagen",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            seed,
        ]));
    }
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    let mb = std::fs::read(b.join("manifest.json")).unwrap();
    let mc = std::fs::read(c.join("manifest.json")).unwrap();
    assert_eq!(ma, mb, "same seed must give byte-identical manifests");
    assert_ne!(ma, mc, "different seeds must differ");
    // raw signal files byte-identical too
    let rec = |dir: &Path| {
        let mut names: Vec<_> = std::fs::read_dir(dir.join("train"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        names
    };
    for name in rec(&a) {
        let fa = std::fs::read(a.join("train").join(&name)).unwrap();
        let fb = std::fs::read(b.join("train").join(&name)).unwrap();
        assert_eq!(fa, fb, "{name:?}");
    }
}

#[test]
fn sweep_writes_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &micro_config());
    let out = tmp.path().join("sweep");
    run_ok(diffse().args([
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--axis",
        "inject",
        "--out",
        out.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "header plus one row per injection mode:\n{table}");
    assert!(lines[1].starts_with("addition,"));
    assert!(lines[2].starts_with("concat,"));
    assert!(lines[3].starts_with("cross-attn,"));
    for mode in ["addition", "concat", "cross-attn"] {
        assert!(out.join(mode).join("checkpoint.bin").exists());
        assert!(out.join(mode).join("unseen_table.csv").exists());
    }
}

#[test]
fn lambda_sweep_has_five_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &micro_config());
    let out = tmp.path().join("sweep");
    run_ok(diffse().args([
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--axis",
        "lambda_nc",
        "--out",
        out.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6, "header plus five weight settings:\n{table}");
    assert!(lines[0].contains("nc_accuracy"));
    assert!(lines[0].contains("si_sdr"));
    for (i, val) in ["0", "0.1", "0.3", "0.5", "1"].iter().enumerate() {
        assert!(
            lines[i + 1].starts_with(&format!("lambda_{val},")),
            "row {i}: {}",
            lines[i + 1]
        );
    }
}

#[test]
fn missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let code = exit_code(diffse().args([
        "datagen",
        "--config",
        tmp.path().join("nope.json").to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn unknown_config_key_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, "{\"definitely_not_a_key\": 1}").unwrap();
    let code = exit_code(diffse().args([
        "datagen",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code, 3);
}

#[test]
fn corrupted_checkpoint_version_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &micro_config());
    let corpus = tmp.path().join("corpus");
    let train_out = tmp.path().join("trained");
    run_ok(diffse().args([
        "datagen",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]));
    run_ok(diffse().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]));
    let ckpt_path = train_out.join("checkpoint.bin");
    let mut bytes = std::fs::read(&ckpt_path).unwrap();
    bytes[8] = 0xEE; // version field
    std::fs::write(&ckpt_path, bytes).unwrap();
    let code = exit_code(diffse().args([
        "enhance",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--manifest",
        corpus.join("manifest.json").to_str().unwrap(),
        "--out",
        tmp.path().join("enh").to_str().unwrap(),
    ]));
    assert_eq!(code, 4);
}

#[test]
fn empty_manifest_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &micro_config());
    let corpus = tmp.path().join("corpus");
    let train_out = tmp.path().join("trained");
    run_ok(diffse().args([
        "datagen",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]));
    run_ok(diffse().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]));
    // strip all records from the manifest
    let text = std::fs::read_to_string(corpus.join("manifest.json")).unwrap();
    let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    manifest["records"] = serde_json::Value::Array(vec![]);
    let empty_path = tmp.path().join("empty_manifest.json");
    std::fs::write(&empty_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let code = exit_code(diffse().args([
        "enhance",
        "--checkpoint",
        train_out.join("checkpoint.bin").to_str().unwrap(),
        "--manifest",
        empty_path.to_str().unwrap(),
        "--out",
        tmp.path().join("enh").to_str().unwrap(),
    ]));
    assert_eq!(code, 5);
}
