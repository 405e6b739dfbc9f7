use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vidseq::config::RunConfig;
use vidseq::dtw::rank_candidates;
use vidseq::eval::evaluate;
use vidseq::model::Autoencoder;
use vidseq::pipeline::{
    ablate, ablation_markdown, build_index, embed_sequence, fit_standardizer, load_dataset, load_video, make_queries,
    training_clips, AblationPlan, DatasetVideo,
};
use vidseq::store::{index_read, index_write, write_atomic, Standardizer};
use vidseq::synth::{generate, write_dataset};
use vidseq::train::{train_schedule, TrainConfig};
use vidseq::Error;

#[derive(Parser)]
#[command(name = "vidseq", version, about = "Video retrieval with clip embeddings and bi-directional DTW")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.0003`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for data generation, training and query sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "m1|m2|m3|m1-3d|m2-3d|m3-3d")]
    model_variant: Option<String>,
    #[arg(long, global = true, value_name = "forward|both-reversed|one-reversed")]
    dtw_mode: Option<String>,
    #[arg(long, global = true, value_name = "full|subsequence")]
    dtw_scope: Option<String>,
    #[arg(long, global = true, value_name = "by-class|by-clip")]
    protocol: Option<String>,
    #[arg(long, global = true)]
    clip_len: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Autoencoder pretraining only.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full training schedule (stages per config).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write the clip embedding sequence of every video as JSON lines.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a binary index of a dataset.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed videos against one video of PNG frames.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Directory of PNG frames.
        #[arg(long)]
        video: PathBuf,
        /// Also write results here; they always go to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean average precision over generated test queries.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Dataset the queries are cut from.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T> = Result<T, Error>;

const CONFIG_ECHO: &str = "config.txt";
const CHECKPOINT: &str = "model.ckpt";
const INDEX: &str = "index.vseq";

/// Files a command writes. Unless committed, everything recorded is removed
/// again, and the output directory too if the command created it.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), created_dir, paths: Vec::new(), committed: false })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.paths.push(p.clone());
        p
    }

    fn echo_config(&mut self, cfg: &RunConfig) -> CliResult<()> {
        let p = self.path(CONFIG_ECHO);
        write_atomic(&p, cfg.to_text().as_bytes())
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
            return;
        }
        for p in &self.paths {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

fn build_config(c: &Common, seed_keys: &[&str]) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = [
        ("model.variant", c.model_variant.clone()),
        ("dtw.mode", c.dtw_mode.clone()),
        ("dtw.scope", c.dtw_scope.clone()),
        ("eval.protocol", c.protocol.clone()),
        ("model.clip_len", c.clip_len.map(|v| v.to_string())),
        ("data.stride", c.stride.map(|v| v.to_string())),
        ("dtw.top_k", c.top_k.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.apply_overrides(c.set.iter().map(String::as_str))?;
    if let Some(seed) = c.seed {
        for key in seed_keys {
            cfg.set(key, &seed.to_string())?;
        }
    }
    for key in seed_keys {
        cfg.seed(key)?;
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} `{}` does not exist", path.display())))
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(INDEX)
    } else {
        p.to_path_buf()
    }
}

fn load_model(path: &Path) -> CliResult<(Autoencoder, Standardizer)> {
    let path = checkpoint_path(path);
    require(&path, "model checkpoint")?;
    let (model, meta) = Autoencoder::load(&path, false)?;
    let standardizer = Standardizer::from_meta(&meta)?;
    Ok((model, standardizer))
}

fn dataset(cfg: &RunConfig, dir: &Path) -> CliResult<Vec<DatasetVideo>> {
    require(&dir.join("manifest.jsonl"), "dataset manifest")?;
    let m = cfg.model()?;
    load_dataset(dir, m.input_channels, m.frame_size)
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn train_command(cfg: &RunConfig, data: &Path, out: &Path, init: Option<&Path>, tc: TrainConfig) -> CliResult<()> {
    let model_cfg = cfg.model()?;
    let stride = cfg.stride()?;
    if let Some(p) = init {
        require(&checkpoint_path(p), "initial checkpoint")?;
    }
    let videos = dataset(cfg, data)?;
    let mut outputs = Outputs::new(out)?;
    outputs.echo_config(cfg)?;
    let standardizer = fit_standardizer(&videos)?;
    let (unlabeled, labeled) = training_clips(&videos, &standardizer, model_cfg.clip_len, stride)?;
    let mut model = match init {
        Some(p) => {
            let (m, _) = Autoencoder::load(&checkpoint_path(p), true)?;
            if m.config() != &model_cfg {
                return Err(Error::Config("initial checkpoint does not match the configured model".into()));
            }
            m
        }
        None => Autoencoder::new(model_cfg, cfg.init_seed()?)?,
    };
    let report = train_schedule(&mut model, &unlabeled, &labeled, &tc, &mut |stage, _| {
        log::info!("finished {stage}");
        Ok(())
    })?;
    write_json_lines(&outputs.path("train_log.jsonl"), &report.log)?;
    let mut meta = standardizer.to_meta();
    meta.push(("stride".into(), stride.to_string()));
    model.save(&outputs.path(CHECKPOINT), &meta)?;
    outputs.commit();
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    video_id: &'a str,
    class: Option<&'a str>,
    embeddings: Vec<&'a [f64]>,
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth { out } => {
            let cfg = build_config(c, &["data.seed"])?;
            let spec = cfg.synth()?;
            let mut outputs = Outputs::new(out)?;
            outputs.echo_config(&cfg)?;
            outputs.path("videos");
            outputs.path("manifest.jsonl");
            let data = generate(&spec)?;
            let entries = write_dataset(out, &data)?;
            eprintln!("wrote {} videos to {}", entries.len(), out.display());
            outputs.commit();
        }
        Command::Pretrain { data, out } => {
            let cfg = build_config(c, &["train.seed"])?;
            let tc = TrainConfig { pretrain: true, triplet: false, challenging: false, ..cfg.train()? };
            train_command(&cfg, data, out, None, tc)?;
        }
        Command::Train { data, out, init } => {
            let cfg = build_config(c, &["train.seed"])?;
            let tc = cfg.train()?;
            train_command(&cfg, data, out, init.as_deref(), tc)?;
        }
        Command::Embed { model, data, out } => {
            let cfg = build_config(c, &[])?;
            let (model, st) = load_model(model)?;
            let videos = dataset_for(&model, data)?;
            let stride = cfg.stride()?;
            let mut outputs = Outputs::new(out)?;
            outputs.echo_config(&cfg)?;
            let seqs = videos
                .iter()
                .map(|v| embed_sequence(&model, &st, &v.video_id, &v.frames, model.config().clip_len, stride))
                .collect::<CliResult<Vec<_>>>()?;
            let lines: Vec<EmbeddingLine> = videos
                .iter()
                .zip(&seqs)
                .map(|(v, s)| EmbeddingLine {
                    video_id: &v.video_id,
                    class: v.class.as_deref(),
                    embeddings: (0..s.len()).map(|i| s.get(i)).collect(),
                })
                .collect();
            write_json_lines(&outputs.path("embeddings.jsonl"), &lines)?;
            outputs.commit();
        }
        Command::Index { model, data, out } => {
            let cfg = build_config(c, &[])?;
            let (model, st) = load_model(model)?;
            let videos = dataset_for(&model, data)?;
            let stride = cfg.stride()?;
            let mut outputs = Outputs::new(out)?;
            outputs.echo_config(&cfg)?;
            let index = build_index(&model, &st, &videos, model.config().clip_len, stride)?;
            index_write(&outputs.path(INDEX), &index)?;
            eprintln!("indexed {} videos", index.len());
            outputs.commit();
        }
        Command::Query { model, index, video, out } => {
            let cfg = build_config(c, &[])?;
            let (dtw, top_k, stride) = (cfg.dtw()?, cfg.top_k()?, cfg.stride()?);
            let (model, st) = load_model(model)?;
            let index = open_index(index, &model)?;
            require(video, "query video")?;
            let m = model.config();
            let frames = load_video(video, m.input_channels, m.frame_size)?;
            let query = embed_sequence(&model, &st, "query", &frames, m.clip_len, stride)?;
            let ranked = rank_candidates(&query, index.records(), top_k, dtw)?;
            let mut stdout = std::io::stdout().lock();
            for r in &ranked {
                serde_json::to_writer(&mut stdout, r)?;
                stdout.write_all(b"\n")?;
            }
            if let Some(out) = out {
                let mut outputs = Outputs::new(out)?;
                outputs.echo_config(&cfg)?;
                write_json_lines(&outputs.path("results.jsonl"), &ranked)?;
                outputs.commit();
            }
        }
        Command::Eval { model, index, data, out } => {
            let cfg = build_config(c, &["eval.seed"])?;
            let (dtw, protocol, crop, stride) = (cfg.dtw()?, cfg.protocol()?, cfg.crop()?, cfg.stride()?);
            let n_queries: usize = cfg.get("eval.queries").parse().map_err(|_| Error::Config("`eval.queries`: not an integer".into()))?;
            let (model, st) = load_model(model)?;
            let index = open_index(index, &model)?;
            let videos = dataset_for(&model, data)?;
            let mut outputs = Outputs::new(out)?;
            outputs.echo_config(&cfg)?;
            let queries = make_queries(&model, &st, &videos, &crop, n_queries, stride, cfg.seed("eval.seed")?)?;
            let report = evaluate(&queries, &index, protocol, dtw)?;
            report.write(&outputs.path("report.jsonl"))?;
            println!("{}", serde_json::to_string(&report.summary)?);
            outputs.commit();
        }
        Command::Ablate { data, out } => {
            let cfg = build_config(c, &["train.seed", "eval.seed"])?;
            let plan = AblationPlan {
                model: cfg.model()?,
                init_seed: cfg.init_seed()?,
                train: cfg.train()?,
                bidtw: cfg.dtw()?,
                crop: cfg.crop()?,
                queries: cfg.get("eval.queries").parse().map_err(|_| Error::Config("`eval.queries`: not an integer".into()))?,
                query_seed: cfg.seed("eval.seed")?,
                stride: cfg.stride()?,
            };
            let videos = dataset(&cfg, data)?;
            let mut outputs = Outputs::new(out)?;
            outputs.echo_config(&cfg)?;
            let rows = ablate(&videos, &plan)?;
            let table = ablation_markdown(&rows);
            write_atomic(&outputs.path("ablation.md"), table.as_bytes())?;
            write_atomic(&outputs.path("ablation.json"), &serde_json::to_vec_pretty(&rows)?)?;
            print!("{table}");
            outputs.commit();
        }
    }
    Ok(())
}

/// Dataset read at the loaded model's frame size and channel count.
fn dataset_for(model: &Autoencoder, dir: &Path) -> CliResult<Vec<DatasetVideo>> {
    require(&dir.join("manifest.jsonl"), "dataset manifest")?;
    load_dataset(dir, model.config().input_channels, model.config().frame_size)
}

fn open_index(path: &Path, model: &Autoencoder) -> CliResult<vidseq::store::Index> {
    let path = index_path(path);
    require(&path, "index")?;
    let index = index_read(&path)?;
    if index.dim() != model.config().embedding_dim {
        return Err(Error::DimensionMismatch { expected: model.config().embedding_dim, found: index.dim() });
    }
    Ok(index)
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "config" | "invalid-argument" => 2,
        "io" => 3,
        "format" | "image" | "json" => 4,
        "dimension-mismatch" => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
