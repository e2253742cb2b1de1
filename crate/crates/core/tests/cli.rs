use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::SystemTime;

use artprompt::attribution::AttributionReport;
use artprompt::corpus::DatasetManifest;
use artprompt::toy::{generate_toy_corpus, ToyConfig};

const BIN: &str = env!("CARGO_BIN_EXE_artprompt");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("ARTPROMPT_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

/// Every file under `dir` with its size and modification time.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, (u64, SystemTime)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let e = e.unwrap();
            let meta = e.metadata().unwrap();
            if meta.is_dir() {
                stack.push(e.path());
            }
            out.insert(e.path(), (meta.len(), meta.modified().unwrap()));
        }
    }
    out
}

/// Runs `args` with `--dry-run` and checks that nothing under `dir` changed.
#[track_caller]
fn dry(dir: &Path, args: &[&str]) -> String {
    let before = snapshot(dir);
    let mut a = args.to_vec();
    a.push("--dry-run");
    let text = ok(run(dir, &a));
    assert_eq!(before, snapshot(dir), "dry run of {args:?} touched the filesystem");
    text
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn fixture(config_extra: &str) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let cfg = ToyConfig {
        styles: 3,
        originals_per_style: 10,
        synthetics_per_style: 10,
        ..Default::default()
    };
    let m = generate_toy_corpus(&dir.join("corpus"), &cfg).unwrap();
    m.save(dir.join("corpus/manifest.jsonl")).unwrap();
    let config = format!(
        r#"seed = 3

[corpus]
root = "corpus"
manifest = "corpus/manifest.jsonl"

[backbone]
architecture = "resnet-mini"
embedding_dim = 64
input_edge = 32

[train.baseline]
epochs = 2
batch_size = 8
learning_rate = 1e-3

[train.siamese]
epochs = 2
batch_size = 16
pairs_per_epoch = 32
val_pairs = 16

[evaluation]
thresholds = [0.5, 1.0]
n_max = 5
repeats = 2
{config_extra}"#
    );
    std::fs::write(dir.join("run.toml"), config).unwrap();
    Fixture { _tmp: tmp, dir }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frobnicate"));
    let o = run(tmp.path(), &["attribute", "--refs", "original"]);
    assert_eq!(o.status.code(), Some(2), "missing query must be a usage error");
    let o = run(tmp.path(), &["attribute", "--image", "q.png", "--refs", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_typo_is_named_and_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[train.siamese]\nepohcs = 3\n").unwrap();
    let o = run(tmp.path(), &["--config", "bad.toml", "corpus", "validate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epohcs"), "{}", stderr(&o));
}

#[test]
fn siamese_dry_run_echoes_default_hyperparameters() {
    let f = fixture("");
    // No --config: every value comes from the defaults.
    let text = dry(&f.dir, &["train", "siamese", "--manifest", "corpus/manifest.jsonl"]);
    assert!(text.contains("epochs=250"), "{text}");
    assert!(text.contains("batch=64"), "{text}");
    assert!(text.contains("seed=0"), "{text}");
    assert!(text.contains("fingerprint config:"), "{text}");
    assert!(text.contains("fingerprint manifest:"), "{text}");
    assert!(text.contains("c_n = 10.0"), "{text}");
    assert!(!f.dir.join("runs").exists());

    let json = dry(&f.dir, &["train", "siamese", "--manifest", "corpus/manifest.jsonl", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["settings"]["epochs"], 250);
    assert_eq!(v["settings"]["batch"], 64);
    assert_eq!(v["config"]["train"]["baseline"]["epochs"], 50);
    assert_eq!(v["config"]["train"]["baseline"]["batch_size"], 32);
    // Rerunning gives the identical plan.
    assert_eq!(json, dry(&f.dir, &["train", "siamese", "--manifest", "corpus/manifest.jsonl", "--json"]));
}

#[test]
fn output_root_comes_from_environment_unless_overridden() {
    let f = fixture("");
    let o = Command::new(BIN)
        .args(["corpus", "split", "--dry-run", "--json"])
        .current_dir(&f.dir)
        .env("ARTPROMPT_OUT", "from-env")
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(o)).unwrap();
    assert_eq!(v["outputs"][0], "from-env/corpus/split.jsonl");
    let o = Command::new(BIN)
        .args(["corpus", "split", "--dry-run", "--json", "--out", "flag"])
        .current_dir(&f.dir)
        .env("ARTPROMPT_OUT", "from-env")
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(o)).unwrap();
    assert_eq!(v["outputs"][0], "flag/corpus/split.jsonl");
}

#[test]
fn quota_beyond_supply_is_domain_error() {
    let f = fixture("");
    let o = run(&f.dir, &["corpus", "mix", "--quota", "11", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Toy Style A"), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let f = fixture("");
    let d = f.dir.as_path();
    let c = ["--config", "run.toml"];
    let with = |args: &[&str]| -> Vec<String> { c.iter().chain(args).map(|s| s.to_string()).collect() };
    let go = |args: &[&str]| -> String {
        let a = with(args);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        dry(d, &a);
        ok(run(d, &a))
    };

    let v: serde_json::Value = serde_json::from_str(&go(&["corpus", "validate", "--check-files", "--json"])).unwrap();
    assert_eq!(v["counts"][0]["original"], 10);
    assert_eq!(v["violations"].as_array().unwrap().len(), 0);

    let contexts = d.join("contexts.txt");
    std::fs::write(&contexts, "A quiet harbour at dawn\n\nTwo cats on a wall\n").unwrap();
    go(&["corpus", "prompts", "--artist", "Toy Style B", "--contexts", "contexts.txt"]);
    let prompts = std::fs::read_to_string(d.join("runs/prompts/toy-style-b.txt")).unwrap();
    assert_eq!(prompts, "A quiet harbour at dawn, by Toy Style B\nTwo cats on a wall, by Toy Style B\n");

    go(&["corpus", "split"]);
    let split = DatasetManifest::load(d.join("runs/corpus/split.jsonl")).unwrap();
    assert_eq!(split.records.iter().filter(|r| r.split == artprompt::corpus::Split::Train).count(), 48);

    go(&["corpus", "mix", "--manifest", "runs/corpus/split.jsonl", "--quota", "8", "--seed", "7"]);
    let mixed = DatasetManifest::load(d.join("runs/corpus/mixed.jsonl")).unwrap();
    assert_eq!(mixed.records.len(), 48);
    go(&[
        "corpus",
        "split",
        "--manifest",
        "runs/corpus/mixed.jsonl",
        "--output",
        "runs/corpus/mixed_split.jsonl",
    ]);

    let gallery = d.join("gallery");
    std::fs::create_dir_all(&gallery).unwrap();
    std::fs::copy(d.join("corpus/original/toy-style-a/000.png"), gallery.join("extra.png")).unwrap();
    go(&["corpus", "fetch", "--manifest", "corpus/manifest.jsonl", "--artist", "Toy Style A", "--from-dir", "gallery"]);
    let fetched = DatasetManifest::load(d.join("runs/corpus/manifest.jsonl")).unwrap();
    assert_eq!(fetched.records.len(), 61);

    let v: serde_json::Value = serde_json::from_str(&go(&[
        "train",
        "baseline",
        "--manifest",
        "runs/corpus/split.jsonl",
        "--provenance",
        "original",
        "--json",
    ]))
    .unwrap();
    assert_eq!(v["checkpoint"], "runs/train/baseline/best.safetensors");
    assert!(d.join("runs/train/baseline/checkpoints/epoch_0001.safetensors").exists());
    assert!(d.join("runs/train/baseline/metrics.csv").exists());

    go(&["train", "siamese", "--manifest", "runs/corpus/mixed_split.jsonl"]);
    assert!(d.join("runs/train/siamese/selected.safetensors").exists());
    let curve = std::fs::read_to_string(d.join("runs/train/siamese/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let table = go(&[
        "eval",
        "confusion",
        "--manifest",
        "runs/corpus/split.jsonl",
        "--split",
        "all",
        "--provenance",
        "synthetic",
        "--name",
        "synthetic_all",
    ]);
    assert!(table.contains("accuracy"), "{table}");
    let v: serde_json::Value =
        serde_json::from_str(&go(&["eval", "transfer", "--manifest", "runs/corpus/split.jsonl", "--json"])).unwrap();
    assert!(v["gap"].is_number());

    let v: serde_json::Value = serde_json::from_str(&go(&[
        "eval",
        "retrieval",
        "--manifest",
        "runs/corpus/mixed_split.jsonl",
        "--json",
    ]))
    .unwrap();
    assert_eq!(v["summaries"].as_array().unwrap().len(), 2);
    assert_eq!(v["stats"].as_array().unwrap().len(), 10);

    std::fs::copy(d.join("corpus/synthetic/toy-style-c/003.png"), d.join("q.png")).unwrap();
    let text = go(&[
        "attribute",
        "--manifest",
        "runs/corpus/split.jsonl",
        "--image",
        "q.png",
        "--refs",
        "original",
        "--cache",
        "runs/cache/refs.safetensors",
        "--save",
    ]);
    let report = AttributionReport::from_json(&text).unwrap();
    assert_eq!(report.query, "q.png");
    assert_eq!(report.per_artist.len(), 3);
    assert!(d.join("runs/cache/refs.safetensors").exists());
    // A second call reuses the cache and reports the same thing.
    let again = ok(run(
        d,
        &with(&[
            "attribute",
            "--manifest",
            "runs/corpus/split.jsonl",
            "--image",
            "q.png",
            "--refs",
            "original",
            "--cache",
            "runs/cache/refs.safetensors",
        ])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>(),
    ));
    assert_eq!(AttributionReport::from_json(&again).unwrap(), report);

    let files = go(&["report"]);
    for name in [
        "confusion_synthetic_all.csv",
        "confusion_original.svg",
        "loss_curve_baseline.csv",
        "loss_curve_siamese.svg",
        "retrieval.csv",
        "retrieval_T0.5.csv",
        "evidence_000.json",
    ] {
        assert!(d.join("runs/report").join(name).exists(), "{name} missing from:\n{files}");
    }
}
