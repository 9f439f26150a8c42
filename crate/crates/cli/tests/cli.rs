use std::path::Path;
use std::process::{Command, Output};

use adast::checkpoint::Checkpoint;
use adast::config::ExperimentConfig;
use adast::data::DomainDataset;

fn adast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = adast(args);
    assert!(
        out.status.success(),
        "adast {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "data.subjects=5",
    "--set",
    "data.epochs_per_subject=12",
    "--set",
    "train.pretrain_epochs=1",
    "--set",
    "train.epochs_per_round=1",
    "--set",
    "train.self_train_rounds=1",
    "--set",
    "train.batch_size=16",
];

fn gen_data(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "gen-data",
        "--out",
        out,
        "--seed",
        "3",
        "--subjects",
        "5",
        "--epochs-per-subject",
        "12",
    ];
    args.extend_from_slice(extra);
    let stdout = ok(&args);
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.contains("n=60 T=300 K=5 subjects=5"), "{stdout}");
}

#[test]
fn gen_data_writes_a_loadable_pair() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), &[]);
    let src = DomainDataset::load(dir.path().join("source.adst")).unwrap();
    let trg = DomainDataset::load(dir.path().join("target.adst")).unwrap();
    assert_eq!((src.len(), trg.len()), (60, 60));
    assert!(src
        .records
        .iter()
        .chain(&trg.records)
        .all(|r| r.stage.is_some()));

    // same seed, same files
    let again = tempfile::tempdir().unwrap();
    gen_data(again.path(), &[]);
    for f in ["source.adst", "target.adst"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn train_eval_and_dump_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, &[]);
    let src = data.join("source.adst");
    let trg = data.join("target.adst");
    let runs = dir.path().join("runs");

    let mut args = vec![
        "train",
        "--source",
        src.to_str().unwrap(),
        "--target",
        trg.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seeds",
        "1,2",
    ];
    args.extend_from_slice(&TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("adast: ACC"), "{stdout}");

    // the resolved configuration is written and reloads unchanged
    let kv = std::fs::read_to_string(runs.join("config.kv")).unwrap();
    let cfg = ExperimentConfig::parse(&kv).unwrap();
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(cfg.train.schedule.batch_size, 16);
    assert_eq!(cfg.data.source.as_deref(), Some(src.as_path()));

    let summary = std::fs::read_to_string(runs.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("label,n,acc_mean,acc_std,mf1_mean,mf1_std")
    );
    assert!(lines.next().unwrap().starts_with("adast,2,"));

    for seed in ["seed-1", "seed-2"] {
        let d = runs.join(seed);
        for f in [
            "history.csv",
            "losses.csv",
            "checkpoint.bin",
            "target_test.csv",
            "target_confusion.csv",
            "source_test.csv",
            "report.txt",
        ] {
            assert!(d.join(f).is_file(), "{seed}/{f} missing");
        }
        let history = std::fs::read_to_string(d.join("history.csv")).unwrap();
        assert_eq!(history.lines().next(), Some("epoch,split,acc,mf1"));
        assert_eq!(history.lines().count(), 1 + 2);
    }

    let ck = runs.join("seed-1").join("checkpoint.bin");
    let report = ok(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        trg.to_str().unwrap(),
    ]);
    assert!(
        report.contains("REM") && report.contains("accuracy"),
        "{report}"
    );

    let emb = dir.path().join("emb.csv");
    ok(&[
        "dump-embeddings",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--source",
        src.to_str().unwrap(),
        "--target",
        trg.to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(&emb).unwrap();
    let model = Checkpoint::load(&ck).unwrap().model;
    let (d, l) = model.feature_shape();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..4], ["domain", "subject", "label", "pred"]);
    assert_eq!(header.len(), 4 + d * l);
    assert_eq!(csv.lines().count(), 1 + 120);
    assert!(csv
        .lines()
        .skip(1)
        .all(|r| r.split(',').count() == 4 + d * l));
    assert_eq!(csv.lines().filter(|r| r.starts_with("target,")).count(), 60);
}

#[test]
fn source_only_on_zero_shift_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(
        &data,
        &[
            "--shift-scale",
            "1",
            "--shift-freq",
            "0",
            "--shift-noise",
            "0",
            "--resample",
            "1",
        ],
    );
    let runs = dir.path().join("so");
    let (src, trg) = (data.join("source.adst"), data.join("target.adst"));
    let mut args = vec![
        "train",
        "--mode",
        "source-only",
        "--source",
        src.to_str().unwrap(),
        "--target",
        trg.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seeds",
        "4,5",
    ];
    args.extend_from_slice(&TINY);
    let stdout = ok(&args);
    let line = stdout.lines().last().unwrap();
    assert!(
        line.starts_with("source-only: ACC") && line.contains('±') && line.ends_with("(n=2)"),
        "{line}"
    );
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let bad_key = adast(&["train", "--out", out, "--set", "train.no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("train.no_such_key"));

    let cfg = dir.path().join("bad.kv");
    std::fs::write(&cfg, "loss.lambda1 = abc\ntrain.batch_size = zero\n").unwrap();
    let bad_cfg = adast(&["train", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(bad_cfg.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad_cfg.stderr);
    assert!(err.contains("line 1") && err.contains("line 2"), "{err}");

    let negative = adast(&["train", "--out", out, "--set", "loss.lambda1=-1"]);
    assert_eq!(negative.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&negative.stderr).contains("lambda1"));

    let missing = dir.path().join("missing.adst");
    let no_file = adast(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(no_file.status.code(), Some(3));

    let junk = dir.path().join("junk.adst");
    std::fs::write(&junk, b"not an epoch file").unwrap();
    let corrupt = adast(&[
        "train",
        "--source",
        junk.to_str().unwrap(),
        "--target",
        junk.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(corrupt.status.code(), Some(3));

    let usage = adast(&["train", "--seed", "1", "--seeds", "1,2"]);
    assert!(!usage.status.success());
}
