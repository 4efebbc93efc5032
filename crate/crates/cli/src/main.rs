//! `genvr` command-line entry point.
//!
//! Every subcommand reads an optional JSON [`EngineConfig`] (`--config`);
//! missing keys take their defaults and unknown keys are rejected. Binary
//! artifacts get a `<file>.provenance.json` sidecar carrying the config and
//! its hash; JSON and JSONL outputs embed the hash directly.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 I/O or input-data error,
//! 4 numerical abort.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use genvr::checkpoint;
use genvr::config::canonical_json;
use genvr::cotrainer::{TrainData, TrainState};
use genvr::evalbench::{self, EvalMode};
use genvr::feature_store::{QueryStore, VideoStore};
use genvr::index::TrieIndex;
use genvr::model;
use genvr::search::{DenseVideoIndex, Engine, SearchConfig, SearchRecord};
use genvr::synthgen;
use genvr::{EngineConfig, Error, Exec, Result};

/// File names inside a data directory written by `gen-data`.
const TRAIN_VIDEOS: &str = "train_videos.bin";
const TRAIN_QUERIES: &str = "train_queries.bin";
const TEST_VIDEOS: &str = "test_videos.bin";
const TEST_QUERIES: &str = "test_queries.bin";
const SIDECAR: &str = "facets.jsonl";

#[derive(Parser)]
#[command(
    name = "genvr",
    version,
    about = "Generative text-to-video retrieval with multi-view semantic IDs"
)]
struct Cli {
    /// JSON engine configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Inductive,
    FullCorpus,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic polysemous corpus and split it into train/test.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run progressive co-training on the training split of a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written after every finished layer.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many layers are trained (default: all).
        #[arg(long)]
        until_layer: Option<usize>,
    },
    /// Write every video's semantic IDs as `video<TAB>view<TAB>codes` lines.
    Tokenize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        videos: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the prefix-trie index over one or more video files.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        videos: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve videos for every query in a query file (JSONL output).
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Dense video features used for re-ranking; must cover the index.
        #[arg(long, required = true, num_args = 1..)]
        videos: Vec<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Beam width [default: search.beam_size from the config, 100].
        #[arg(long)]
        beam_size: Option<usize>,
        /// Results per query [default: search.top_k from the config, 10].
        #[arg(long)]
        top_k: Option<usize>,
        /// Candidate budget before re-ranking, 0 = unlimited [default: config].
        #[arg(long)]
        max_candidates: Option<usize>,
        /// Process queries one at a time on one thread so latencies are faithful.
        #[arg(long)]
        measure_latency: bool,
    },
    /// Recall@K, latency and storage report on the test queries.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prebuilt index over the evaluation pool; built in memory when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Evaluation pool [default: eval.mode from the config, inductive].
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam_size: Option<usize>,
    },
    /// Generative-recall vs dense-scan latency over growing synthetic corpora.
    Bench {
        /// Use a trained tokenizer instead of a k-means-only one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the scaling table as CSV.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::InfeasibleAngle(_) => 2,
        Error::NumericalAbort(_) => 4,
        _ => 3,
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_hash: String,
    config: &'a EngineConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn write_provenance(path: &Path, command: &str, config: &EngineConfig) -> Result<()> {
    let p = Provenance {
        command,
        config_hash: config.hash(),
        config,
    };
    write_file(&sidecar_path(path), (canonical_json(&p) + "\n").as_bytes())
}

/// Writes to a temporary sibling, then renames, so a crash never leaves a
/// half-written checkpoint behind.
fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    checkpoint::save(state, &tmp)?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn load_videos(paths: &[PathBuf]) -> Result<VideoStore> {
    let mut stores = paths.iter().map(VideoStore::load);
    let first = stores.next().expect("at least one video file")?;
    let dim = first.dimension();
    let mut records = first.into_records();
    for s in stores {
        let s = s?;
        if s.dimension() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.dimension(),
            });
        }
        records.extend(s.into_records());
    }
    VideoStore::new(dim, records)
}

fn trained(path: &Path) -> Result<TrainState> {
    let state = checkpoint::load(path)?;
    if !state.is_done() {
        log::warn!(
            "{}: training stopped after {} of {} layers; later codes come from untrained codebooks",
            path.display(),
            state.trained_layers(),
            state.config.num_layers
        );
    }
    Ok(state)
}

fn gen_data(cfg: &EngineConfig, out_dir: &Path) -> Result<()> {
    let corpus = synthgen::generate(&cfg.synth)?;
    let (train, test) = synthgen::split(
        &corpus.videos,
        &corpus.queries,
        cfg.synth.train_fraction,
        cfg.synth.seed,
    )?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    train.videos.save(out_dir.join(TRAIN_VIDEOS))?;
    train.queries.save(out_dir.join(TRAIN_QUERIES))?;
    test.videos.save(out_dir.join(TEST_VIDEOS))?;
    test.queries.save(out_dir.join(TEST_QUERIES))?;
    synthgen::write_sidecar(&corpus, &out_dir.join(SIDECAR))?;
    write_provenance(&out_dir.join("data"), "gen-data", cfg)?;
    println!(
        "{} train / {} test videos, {} train / {} test queries in {}",
        train.videos.len(),
        test.videos.len(),
        train.queries.len(),
        test.queries.len(),
        out_dir.display()
    );
    Ok(())
}

fn train(
    cfg: &EngineConfig,
    explicit: bool,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    until: Option<usize>,
    exec: Exec,
) -> Result<()> {
    let videos = VideoStore::load(data.join(TRAIN_VIDEOS))?;
    let queries = QueryStore::load(data.join(TRAIN_QUERIES))?;
    let data = TrainData::new(&videos, &queries)?;
    let mut state = match resume {
        Some(path) => {
            if path == out {
                return Err(Error::Config(
                    "--resume and --out must differ; inputs are never overwritten".into(),
                ));
            }
            let state = checkpoint::load(path)?;
            if explicit && state.config != cfg.train {
                return Err(Error::Config(format!(
                    "{} was trained with a different train config than --config",
                    path.display()
                )));
            }
            log::info!(
                "resuming at layer {} {} epoch {}",
                state.progress.layer + 1,
                state.progress.phase,
                state.progress.epoch
            );
            state
        }
        None => TrainState::new(cfg.train.clone(), data.dim())?,
    };
    let stop = until.unwrap_or(state.config.num_layers);
    let mut echo = cfg.clone();
    echo.train = state.config.clone();
    while !state.is_done() && state.trained_layers() < stop {
        let before = state.progress.layer;
        state.step(&data, exec)?;
        if state.progress.layer != before {
            save_checkpoint(&state, out)?;
            log::info!("layer {} done, checkpoint written to {}", before + 1, out.display());
        }
    }
    save_checkpoint(&state, out)?;
    write_provenance(out, "train", &echo)?;
    println!(
        "{} of {} layers trained; checkpoint {}",
        state.trained_layers(),
        state.config.num_layers,
        out.display()
    );
    Ok(())
}

fn tokenize(cfg: &EngineConfig, ckpt: &Path, videos: &[PathBuf], out: &Path, exec: Exec) -> Result<()> {
    let state = trained(ckpt)?;
    let store = load_videos(videos)?;
    let ids = model::tokenize_corpus(&store, &state.params, exec)?;
    let mut buf = Vec::new();
    model::write_id_dump(&ids, &mut buf).map_err(io_err(out))?;
    write_file(out, &buf)?;
    write_provenance(out, "tokenize", cfg)
}

fn index(cfg: &EngineConfig, ckpt: &Path, videos: &[PathBuf], out: &Path, exec: Exec) -> Result<()> {
    let state = trained(ckpt)?;
    let store = load_videos(videos)?;
    let ids = model::tokenize_corpus(&store, &state.params, exec)?;
    let trie = TrieIndex::build(&ids, state.config.num_layers, state.config.codebook_size)?;
    trie.save(out)?;
    write_provenance(out, "index", cfg)?;
    let report = trie.storage_report(store.dimension(), cfg.eval.frames_per_video);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable report")
    );
    Ok(())
}

fn engine(ckpt: &Path, index: &Path, pool: &VideoStore) -> Result<Engine> {
    let state = trained(ckpt)?;
    let trie = TrieIndex::load(index)?;
    if trie.video_count() != pool.len() {
        return Err(Error::InvalidInput(format!(
            "{} indexes {} videos but the dense pool holds {}",
            index.display(),
            trie.video_count(),
            pool.len()
        )));
    }
    Ok(Engine::from_parts(state.params, trie, DenseVideoIndex::new(pool)?))
}

#[allow(clippy::too_many_arguments)]
fn search(
    cfg: &EngineConfig,
    ckpt: &Path,
    index: &Path,
    videos: &[PathBuf],
    queries: &Path,
    out: &Path,
    search: SearchConfig,
    measure_latency: bool,
    exec: Exec,
) -> Result<()> {
    let pool = load_videos(videos)?;
    let engine = engine(ckpt, index, &pool)?;
    let qs = evalbench::query_vectors(&QueryStore::load(queries)?, 0)?;
    let vectors: Vec<Vec<f64>> = qs.iter().map(|(_, _, q)| q.clone()).collect();
    let results = if measure_latency {
        vectors
            .iter()
            .map(|q| engine.retrieve(q, &search))
            .collect::<Result<Vec<_>>>()?
    } else {
        engine.retrieve_all(&vectors, &search, exec)?
    };
    let hash = cfg.hash();
    let mut buf = Vec::new();
    for ((qid, _, _), r) in qs.iter().zip(&results) {
        let line = serde_json::to_string(&SearchRecord::new(*qid, r, &hash)).expect("serializable record");
        writeln!(buf, "{line}").map_err(io_err(out))?;
    }
    write_file(out, &buf)?;
    if measure_latency {
        let stats = evalbench::LatencyStats::from_results(&results[cfg.eval.warmup.min(results.len())..]);
        println!("{}", serde_json::to_string_pretty(&stats).expect("serializable stats"));
    }
    println!("{} queries answered; results in {}", results.len(), out.display());
    Ok(())
}

fn eval(cfg: &EngineConfig, ckpt: &Path, data: &Path, index: Option<&Path>, out: &Path, exec: Exec) -> Result<()> {
    let train_videos = VideoStore::load(data.join(TRAIN_VIDEOS))?;
    let test_videos = VideoStore::load(data.join(TEST_VIDEOS))?;
    let queries = QueryStore::load(data.join(TEST_QUERIES))?;
    let pool = cfg.eval.mode.pool(&train_videos, &test_videos)?;
    let engine = match index {
        Some(path) => engine(ckpt, path, &pool)?,
        None => Engine::build(trained(ckpt)?.params, &pool, exec)?,
    };
    let report = evalbench::run_eval(&engine, &queries, &cfg.search, &cfg.eval, &cfg.hash())?;
    write_file(out, (canonical_json(&report) + "\n").as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    config_hash: String,
    rows: Vec<evalbench::ScalingRow>,
    dense_slope_ms_per_video: f64,
    dense_r2: f64,
    recall_growth: f64,
}

fn bench(cfg: &EngineConfig, ckpt: Option<&Path>, csv: Option<&Path>, out: Option<&Path>, exec: Exec) -> Result<()> {
    let params = match ckpt {
        Some(p) => Some(trained(p)?.params),
        None => None,
    };
    let rows = evalbench::synthetic_scaling(&cfg.synth, &cfg.train, &cfg.bench, params, exec)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.t_dense_scan_ms).collect();
    let (slope, _, r2) = evalbench::linear_fit(&xs, &ys);
    let growth = rows.last().unwrap().t_recall_ms / rows[0].t_recall_ms;
    println!(
        "{:>8}  {:>12}  {:>14}  {:>10}",
        "N", "recall_ms", "dense_scan_ms", "candidates"
    );
    for r in &rows {
        println!(
            "{:>8}  {:>12.4}  {:>14.4}  {:>10.1}",
            r.n, r.t_recall_ms, r.t_dense_scan_ms, r.mean_candidates
        );
    }
    println!("dense scan: {slope:.3e} ms/video, R² {r2:.4}; recall latency at largest/smallest N: {growth:.3}");
    if let Some(path) = csv {
        write_file(path, evalbench::scaling_csv(&rows).as_bytes())?;
        write_provenance(path, "bench", cfg)?;
    }
    if let Some(path) = out {
        let report = BenchReport {
            config_hash: cfg.hash(),
            rows,
            dense_slope_ms_per_video: slope,
            dense_r2: r2,
            recall_growth: growth,
        };
        write_file(path, (canonical_json(&report) + "\n").as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::GenData { out_dir } => gen_data(&cfg, &out_dir),
        Command::Train {
            data,
            out,
            resume,
            until_layer,
        } => train(
            &cfg,
            cli.config.is_some(),
            &data,
            &out,
            resume.as_deref(),
            until_layer,
            exec,
        ),
        Command::Tokenize {
            checkpoint,
            videos,
            out,
        } => tokenize(&cfg, &checkpoint, &videos, &out, exec),
        Command::Index {
            checkpoint,
            videos,
            out,
        } => index(&cfg, &checkpoint, &videos, &out, exec),
        Command::Search {
            checkpoint,
            index,
            videos,
            queries,
            out,
            beam_size,
            top_k,
            max_candidates,
            measure_latency,
        } => {
            let s = SearchConfig {
                beam_size: beam_size.unwrap_or(cfg.search.beam_size),
                top_k: top_k.unwrap_or(cfg.search.top_k),
                max_candidates: max_candidates.unwrap_or(cfg.search.max_candidates),
            };
            if s.beam_size == 0 || s.top_k == 0 {
                return Err(Error::Config("--beam-size and --top-k must be at least 1".into()));
            }
            let mut cfg = cfg;
            cfg.search = s.clone();
            search(
                &cfg,
                &checkpoint,
                &index,
                &videos,
                &queries,
                &out,
                s,
                measure_latency,
                exec,
            )
        }
        Command::Eval {
            checkpoint,
            data,
            index,
            mode,
            out,
            beam_size,
        } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    Mode::Inductive => EvalMode::Inductive,
                    Mode::FullCorpus => EvalMode::FullCorpus,
                };
            }
            if let Some(b) = beam_size {
                cfg.search.beam_size = b;
            }
            cfg.validate()?;
            eval(&cfg, &checkpoint, &data, index.as_deref(), &out, exec)
        }
        Command::Bench {
            checkpoint,
            emit_csv,
            out,
        } => bench(&cfg, checkpoint.as_deref(), emit_csv.as_deref(), out.as_deref(), exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_table() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::EmptyIndex), 3);
        let io = Error::Io {
            path: "p".into(),
            source: std::io::Error::other("x"),
        };
        assert_eq!(exit_code(&io), 3);
    }

    #[test]
    fn sidecar_keeps_the_full_file_name() {
        assert_eq!(
            sidecar_path(Path::new("a/b.idx")),
            PathBuf::from("a/b.idx.provenance.json")
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
