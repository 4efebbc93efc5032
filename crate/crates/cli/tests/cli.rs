//! End-to-end runs of the `genvr` binary on a tiny corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use genvr::checkpoint;
use genvr::feature_store::{QueryStore, VideoStore};

const TINY: &str = r#"{
  "train": {
    "num_views": 2, "num_layers": 2, "codebook_size": 8, "latent_dim": 8, "hidden_dim": 16,
    "learning_rate": 0.003, "batch_size": 32,
    "first_align_epochs": 1, "align_epochs": 1, "train_epochs": 1, "seed": 3
  },
  "synth": { "n_videos": 60, "facets_per_video": 2, "feature_dim": 16, "queries_per_facet": 2, "seed": 3 },
  "search": { "beam_size": 10, "top_k": 5 },
  "eval": { "warmup": 0 },
  "bench": { "corpus_sizes": [200, 400, 600], "queries": 5, "beam_size": 10, "top_k": 5 }
}"#;

fn genvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genvr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = genvr(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = genvr(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> String {
        let cfg = self.arg("config.json");
        let mut all = vec!["--config", cfg.as_str()];
        all.extend_from_slice(args);
        ok(&all)
    }

    fn gen_data(&self) {
        self.run(&["gen-data", "--out-dir", &self.arg("data")]);
    }

    fn train(&self) {
        self.run(&["train", "--data", &self.arg("data"), "--out", &self.arg("ck.bin")]);
    }
}

#[test]
fn generated_data_loads_and_is_reproducible() {
    let a = Workspace::new(TINY);
    let b = Workspace::new(TINY);
    a.gen_data();
    b.gen_data();
    for name in [
        "train_videos.bin",
        "train_queries.bin",
        "test_videos.bin",
        "test_queries.bin",
        "facets.jsonl",
    ] {
        assert_eq!(
            fs::read(a.path("data").join(name)).unwrap(),
            fs::read(b.path("data").join(name)).unwrap(),
            "{name}"
        );
    }
    let videos = VideoStore::load(a.path("data/train_videos.bin")).unwrap();
    let test = VideoStore::load(a.path("data/test_videos.bin")).unwrap();
    let queries = QueryStore::load(a.path("data/test_queries.bin")).unwrap();
    assert_eq!(videos.len() + test.len(), 60);
    assert_eq!(videos.dimension(), 16);
    queries.check_targets(&test).unwrap();
    assert!(a.path("data/data.provenance.json").exists());
}

#[test]
fn malformed_config_reports_its_position() {
    let ws = Workspace::new("{\n  \"train\": { \"num_views\": 2,, }\n}");
    let cfg = ws.arg("config.json");
    let err = fails(&["--config", &cfg, "gen-data", "--out-dir", &ws.arg("data")], 2);
    assert!(err.contains("line 2 column"), "{err}");

    let ws = Workspace::new(r#"{ "train": { "num_veiws": 2 } }"#);
    let cfg = ws.arg("config.json");
    let err = fails(&["--config", &cfg, "gen-data", "--out-dir", &ws.arg("data")], 2);
    assert!(err.contains("num_veiws"), "{err}");
}

#[test]
fn missing_data_names_the_path() {
    let ws = Workspace::new(TINY);
    let cfg = ws.arg("config.json");
    let data = ws.arg("nowhere");
    let err = fails(
        &["--config", &cfg, "train", "--data", &data, "--out", &ws.arg("ck.bin")],
        3,
    );
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn single_layer_run_is_quick() {
    let ws = Workspace::new(&TINY.replace("\"num_layers\": 2", "\"num_layers\": 1"));
    let start = Instant::now();
    ws.gen_data();
    ws.train();
    assert!(start.elapsed().as_secs() < 60);
    let state = checkpoint::load(ws.path("ck.bin")).unwrap();
    assert!(state.is_done());
    assert_eq!(state.config.num_layers, 1);
    assert!(ws.path("ck.bin.provenance.json").exists());
}

#[test]
fn interrupted_training_resumes_to_the_same_checkpoint() {
    let ws = Workspace::new(TINY);
    ws.gen_data();
    ws.train();
    let data = ws.arg("data");
    ws.run(&[
        "train",
        "--data",
        &data,
        "--out",
        &ws.arg("half.bin"),
        "--until-layer",
        "1",
    ]);
    assert_eq!(checkpoint::load(ws.path("half.bin")).unwrap().trained_layers(), 1);
    ws.run(&[
        "train",
        "--data",
        &data,
        "--resume",
        &ws.arg("half.bin"),
        "--out",
        &ws.arg("resumed.bin"),
    ]);
    assert_eq!(
        fs::read(ws.path("resumed.bin")).unwrap(),
        fs::read(ws.path("ck.bin")).unwrap()
    );

    let cfg = ws.arg("config.json");
    let same = ws.arg("half.bin");
    fails(
        &[
            "--config", &cfg, "train", "--data", &data, "--resume", &same, "--out", &same,
        ],
        2,
    );
    let other = Workspace::new(&TINY.replace("\"seed\": 3\n", "\"seed\": 4\n"));
    let other_cfg = other.arg("config.json");
    fails(
        &[
            "--config",
            &other_cfg,
            "train",
            "--data",
            &data,
            "--resume",
            &same,
            "--out",
            &ws.arg("x.bin"),
        ],
        2,
    );
}

fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn index_search_tokenize_and_eval_fit_together() {
    let ws = Workspace::new(TINY);
    ws.gen_data();
    ws.train();
    let (ck, videos) = (ws.arg("ck.bin"), ws.arg("data/test_videos.bin"));
    let report = ws.run(&[
        "index",
        "--checkpoint",
        &ck,
        "--videos",
        &videos,
        "--out",
        &ws.arg("index.bin"),
    ]);
    assert!(report.contains("video_to_payload_ratio"), "{report}");

    ws.run(&[
        "tokenize",
        "--checkpoint",
        &ck,
        "--videos",
        &videos,
        "--out",
        &ws.arg("ids.tsv"),
    ]);
    let ids = fs::read_to_string(ws.path("ids.tsv")).unwrap();
    let test_count = VideoStore::load(ws.path("data/test_videos.bin")).unwrap().len();
    assert_eq!(ids.lines().count(), test_count * 2);

    ws.run(&[
        "search",
        "--checkpoint",
        &ck,
        "--index",
        &ws.arg("index.bin"),
        "--videos",
        &videos,
        "--queries",
        &ws.arg("data/test_queries.bin"),
        "--out",
        &ws.arg("results.jsonl"),
    ]);
    let records = read_jsonl(&ws.path("results.jsonl"));
    let queries = QueryStore::load(ws.path("data/test_queries.bin")).unwrap();
    assert_eq!(records.len(), queries.len());
    assert!(records.iter().all(|r| !r["video_ids"].as_array().unwrap().is_empty()));
    assert!(records.iter().all(|r| r["video_ids"].as_array().unwrap().len() <= 5));

    let data = ws.arg("data");
    ws.run(&[
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--out",
        &ws.arg("eval.json"),
    ]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("eval.json")).unwrap()).unwrap();
    let r = &eval["metrics"]["recall"];
    let (r1, r5, r10) = (
        r["R@1"].as_f64().unwrap(),
        r["R@5"].as_f64().unwrap(),
        r["R@10"].as_f64().unwrap(),
    );
    assert!(r1 <= r5 && r5 <= r10, "{r}");
    assert_eq!(eval["config_hash"].as_str().unwrap().len(), 64);

    ws.run(&[
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--mode",
        "full-corpus",
        "--out",
        &ws.arg("full.json"),
    ]);
    let full: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("full.json")).unwrap()).unwrap();
    assert!(full["metrics"]["recall"]["R@10"].as_f64().unwrap() <= r10);
}

#[test]
fn bench_writes_one_row_per_size() {
    let ws = Workspace::new(TINY);
    ws.run(&[
        "bench",
        "--emit-csv",
        &ws.arg("scaling.csv"),
        "--out",
        &ws.arg("bench.json"),
    ]);
    let csv = fs::read_to_string(ws.path("scaling.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let sizes: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(sizes, vec!["200", "400", "600"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("bench.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn divergent_training_exits_with_the_numerical_code() {
    let ws = Workspace::new(&TINY.replace("\"learning_rate\": 0.003", "\"learning_rate\": 1e300"));
    ws.gen_data();
    let cfg = ws.arg("config.json");
    let err = fails(
        &[
            "--config",
            &cfg,
            "train",
            "--data",
            &ws.arg("data"),
            "--out",
            &ws.arg("ck.bin"),
        ],
        4,
    );
    assert!(err.contains("non-finite"), "{err}");
}
