mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{separable_corpus, write_splits, write_tsv};
use studentkd::data::{synthetic_teacher, LogitCache, LogitRecord, MarginRange};
use studentkd::harness::cli::{self, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use studentkd::harness::train::{argmax2, predict};
use studentkd::harness::{
    evaluate, train_baseline, train_distill, Checkpoint, Dataset, RunMode, RunReport, TrainConfig,
};
use studentkd::layers::Arch;
use studentkd::{Error, Rng};

fn toy_dataset(n_train: usize) -> Dataset {
    let train = separable_corpus(n_train, 1);
    let dev = separable_corpus(100, 2);
    let test = separable_corpus(100, 3);
    Dataset::from_raw(&train, &dev, &test, 128, 1).unwrap()
}

fn fast_config(arch: Arch, mode: RunMode, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(arch, mode);
    cfg.epochs = epochs;
    cfg.lr = 1e-2;
    cfg.batch_size = 16;
    cfg.embed_dim = 16;
    cfg.hidden_dim = 16;
    cfg
}

fn teacher_cache(data: &Dataset, quality: f64, seed: u64) -> LogitCache {
    let labels: Vec<usize> = data.train.iter().map(|e| e.label).collect();
    let recs = synthetic_teacher("train", &labels, quality, MarginRange::default(), &mut Rng::new(seed)).unwrap();
    LogitCache::from_records(recs).unwrap()
}

#[test]
fn separable_toy_is_learned_by_every_architecture() {
    let data = toy_dataset(200);
    for arch in Arch::ALL {
        let mut cfg = TrainConfig::new(arch, RunMode::Baseline);
        cfg.lr = 3e-3;
        let (ckpt, report) = train_baseline(&cfg, &data).unwrap();
        let losses = &report.train_loss_per_epoch[..5];
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "{arch}: losses {losses:?}"
        );
        let train_acc = evaluate(&ckpt, &data.train).unwrap();
        assert!(train_acc >= 0.99, "{arch}: train accuracy {train_acc}");
    }
}

#[test]
fn untrained_model_is_at_chance() {
    let data = toy_dataset(50);
    for arch in Arch::ALL {
        let (ckpt, report) = train_baseline(&fast_config(arch, RunMode::Baseline, 0), &data).unwrap();
        assert_eq!(report.selected_epoch, 0);
        assert!(report.train_loss_per_epoch.is_empty());
        assert!((report.selected_dev_acc - 0.5).abs() <= 0.1, "{arch}: {}", report.selected_dev_acc);
        assert_eq!(ckpt.epoch, 0);
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = toy_dataset(80);
    for arch in Arch::ALL {
        let cfg = fast_config(arch, RunMode::Baseline, 2);
        let (c1, r1) = train_baseline(&cfg, &data).unwrap();
        let (c2, r2) = train_baseline(&cfg, &data).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.same_outcome(&r2));
        assert_eq!(c1.to_bytes().unwrap(), c2.to_bytes().unwrap());
        let mut other = cfg.clone();
        other.seed = 1;
        let (_, r3) = train_baseline(&other, &data).unwrap();
        assert!(!r1.same_outcome(&r3), "{arch}: different seeds should differ");
    }
}

#[test]
fn alpha_one_distillation_equals_baseline() {
    let data = toy_dataset(80);
    let cache = teacher_cache(&data, 0.7, 4);
    for arch in Arch::ALL {
        let base = fast_config(arch, RunMode::Baseline, 2);
        let mut dist = fast_config(arch, RunMode::Distill, 2);
        dist.alpha = 1.0;
        let (cb, rb) = train_baseline(&base, &data).unwrap();
        let (cd, rd) = train_distill(&dist, &data, &cache).unwrap();
        assert!(rb.same_outcome(&rd), "{arch}");
        assert!(cb.model.params().iter().zip(cd.model.params()).all(|(a, b)| a.bit_eq(b)));
        dist.alpha = 0.5;
        let (_, rh) = train_distill(&dist, &data, &cache).unwrap();
        assert!(!rb.same_outcome(&rh), "{arch}: alpha 0.5 should change the run");
    }
}

#[test]
fn missing_teacher_logit_fails_before_training() {
    let data = toy_dataset(20);
    let recs: Vec<LogitRecord> = (0..20)
        .filter(|&i| i != 7)
        .map(|id| LogitRecord { split: "train".into(), id, logits: [1.0, -1.0] })
        .collect();
    let cache = LogitCache::from_records(recs).unwrap();
    let cfg = fast_config(Arch::Cnn, RunMode::Distill, 3);
    let err = train_distill(&cfg, &data, &cache).unwrap_err();
    assert!(matches!(err, Error::MissingLogits { id: 7, .. }), "{err}");
    assert!(err.to_string().contains('7'));
}

#[test]
fn oversized_cache_is_rejected() {
    let data = toy_dataset(20);
    let recs: Vec<LogitRecord> = (0..25)
        .map(|id| LogitRecord { split: "train".into(), id, logits: [1.0, -1.0] })
        .collect();
    let cache = LogitCache::from_records(recs).unwrap();
    let cfg = fast_config(Arch::Cnn, RunMode::Distill, 1);
    assert!(matches!(train_distill(&cfg, &data, &cache), Err(Error::Cache(_))));
}

#[test]
fn selection_is_first_best_epoch_and_test_uses_it() {
    let data = toy_dataset(60);
    for arch in Arch::ALL {
        let (ckpt, r) = train_baseline(&fast_config(arch, RunMode::Baseline, 4), &data).unwrap();
        let best = r.dev_acc_per_epoch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = r.dev_acc_per_epoch.iter().position(|&a| a == best).unwrap() + 1;
        assert_eq!(r.selected_epoch, first);
        assert_eq!(r.selected_dev_acc, best);
        assert_eq!(ckpt.epoch, first);
        assert_eq!(evaluate(&ckpt, &data.test).unwrap().to_bits(), r.test_acc.to_bits());
    }
}

#[test]
fn checkpoint_reload_is_bitwise_stable() {
    let data = toy_dataset(60);
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let (ckpt, _) = train_baseline(&fast_config(arch, RunMode::Baseline, 2), &data).unwrap();
        let path = dir.path().join(format!("{arch}.bin"));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        for split in [&data.dev, &data.test] {
            assert_eq!(
                evaluate(&back, split).unwrap().to_bits(),
                evaluate(&ckpt, split).unwrap().to_bits()
            );
        }
        let b = studentkd::data::make_batches(&data.dev, 64, false, &mut Rng::new(0), 5).unwrap();
        for batch in &b {
            let a = ckpt.model.logits(&batch.ids, &batch.mask).unwrap();
            let c = back.model.logits(&batch.ids, &batch.mask).unwrap();
            assert!(a.bit_eq(&c));
            assert_eq!(argmax2(&a), argmax2(&c));
        }
    }
}

#[test]
fn evaluation_ignores_example_order() {
    let data = toy_dataset(60);
    let (ckpt, _) = train_baseline(&fast_config(Arch::Bilstm, RunMode::Baseline, 1), &data).unwrap();
    let mut shuffled = data.dev.clone();
    Rng::new(3).shuffle(&mut shuffled);
    assert_eq!(
        evaluate(&ckpt, &data.dev).unwrap().to_bits(),
        evaluate(&ckpt, &shuffled).unwrap().to_bits()
    );
    let p = predict(&ckpt.model, &data.dev).unwrap();
    let q = predict(&ckpt.model, &shuffled).unwrap();
    for (i, ex) in shuffled.iter().enumerate() {
        assert_eq!(q[i], p[ex.id]);
    }
}

#[test]
fn divergence_is_reported_with_location() {
    let data = toy_dataset(40);
    let mut cfg = fast_config(Arch::Bilstm, RunMode::Baseline, 3);
    cfg.lr = 1e300;
    let err = train_baseline(&cfg, &data).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert!(err.is_numerical());
}

#[test]
fn report_json_has_the_documented_fields() {
    let data = toy_dataset(40);
    let (_, r) = train_baseline(&fast_config(Arch::Cnn, RunMode::Baseline, 1), &data).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    for key in [
        "arch", "mode", "alpha", "seed", "epochs", "train_loss_per_epoch", "dev_acc_per_epoch",
        "selected_epoch", "selected_dev_acc", "test_acc", "param_count", "param_ratio",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["arch"], "cnn");
    assert_eq!(v["mode"], "baseline");
    let back: RunReport = serde_json::from_value(v).unwrap();
    assert!(back.same_outcome(&r));
}

// ---- command line ----

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_studentkd"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_dir(root: &Path) -> std::path::PathBuf {
    let dir = root.join("data");
    std::fs::create_dir_all(&dir).unwrap();
    write_splits(&dir, &separable_corpus(60, 1), &separable_corpus(20, 2), &separable_corpus(20, 3));
    dir
}

#[test]
fn cli_full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dir(tmp.path());
    let cache = tmp.path().join("teacher.jsonl");
    let out_b = tmp.path().join("base");
    let out_d = tmp.path().join("dist");

    let o = bin(&["make-synthetic-teacher", "--data", s(&data), "--out", s(&cache), "--quality", "0.9", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["inspect-cache", "--logits", s(&cache), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("100 records"), "{text}");

    let common = ["--arch", "cnn", "--data", s(&data), "--epochs", "2", "--embed-dim", "8", "--seed", "5"];
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--out", s(&out_b)]);
    let o = bin(&args);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected epoch"));
    for f in ["report.json", "report.txt", "checkpoint.bin"] {
        assert!(out_b.join(f).is_file(), "{f}");
    }

    let mut args = vec!["distill"];
    args.extend(common);
    args.extend(["--logits", s(&cache), "--alpha", "1.0", "--out", s(&out_d)]);
    let o = bin(&args);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let load = |dir: &Path| -> RunReport {
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
    };
    let (rb, rd) = (load(&out_b), load(&out_d));
    assert!(rb.same_outcome(&rd));
    assert_eq!(rd.mode, RunMode::Distill);

    let ckpt = out_b.join("checkpoint.bin");
    let o = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test"]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let expected = format!("test accuracy {:.6}", rb.test_acc);
    assert!(String::from_utf8_lossy(&o.stdout).contains(&expected));
}

#[test]
fn cli_accepts_externally_written_cache() {
    // Ten-line toy split as an external exporter would write it, with
    // spaces after separators.
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let rows = separable_corpus(10, 8);
    for split in ["train", "dev", "test"] {
        write_tsv(&dir.join(format!("{split}.tsv")), &rows);
    }
    let mut text = String::new();
    for split in ["train", "dev", "test"] {
        for id in 0..10 {
            text.push_str(&format!(
                "{{\"split\": \"{split}\", \"id\": {id}, \"logits\": [{}, -0.25]}}\n",
                0.125 * id as f64
            ));
        }
    }
    let cache = dir.join("cache.jsonl");
    std::fs::write(&cache, text).unwrap();
    let o = bin(&["inspect-cache", "--logits", s(&cache), "--data", s(dir)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ids 0..=9"));

    let loaded = studentkd::data::logits_load(&cache).unwrap();
    assert_eq!(loaded.get("dev", 4), Some([0.5, -0.25]));

    let short = dir.join("short.jsonl");
    let first: String = std::fs::read_to_string(&cache).unwrap().lines().take(25).map(|l| format!("{l}\n")).collect();
    std::fs::write(&short, first).unwrap();
    let o = bin(&["inspect-cache", "--logits", s(&short), "--data", s(dir)]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli::run(["studentkd", "no-such-command"]), EXIT_USAGE);
    assert_eq!(cli::run(["studentkd", "--help"]), EXIT_OK);
    assert_eq!(
        cli::run(["studentkd", "distill", "--arch", "cnn", "--data", "x"]),
        EXIT_USAGE
    );
    let o = bin(&["distill", "--arch", "cnn", "--data", "x"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--logits"));

    let missing = tmp.path().join("nothing");
    let o = bin(&["train", "--arch", "bilstm", "--data", s(&missing)]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));

    let data = toy_dir(tmp.path());
    let o = bin(&[
        "train", "--arch", "bilstm", "--data", s(&data), "--epochs", "2", "--lr", "1e300",
        "--out", s(&tmp.path().join("boom")),
    ]);
    assert_eq!(o.status.code(), Some(EXIT_NUMERIC), "{}", String::from_utf8_lossy(&o.stderr));

    let o = bin(&["params", "--arch", "bilstm_attn", "--vocab-size", "10000"]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("params 722882"), "{text}");
}

#[test]
fn cli_config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dir(tmp.path());
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "arch = \"cnn\"\ndata = {:?}\nepochs = 5\nembed_dim = 8\nseed = 2\nout = {:?}\n",
            s(&data),
            s(&out)
        ),
    )
    .unwrap();
    let o = bin(&["train", "--config", s(&cfg), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let r: RunReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.epochs, 1);
    assert_eq!(r.seed, 2);

    std::fs::write(&cfg, "arch = \"cnn\"\nbogus = 1\n").unwrap();
    let o = bin(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}
