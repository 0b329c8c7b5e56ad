mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vclip::corpus::{self, generate, generate_split, tasks, CorpusConfig, Split};
use vclip::encoder::{Checkpoint, Pooling};
use vclip::retrieval::{FeatureMode, RetrievalMode};
use vclip::sampler::OverlapMode;
use vclip::trainer::{self, TrainConfig, Trainer, CONFIG_FILE, EPOCHS_FILE, LATEST_CHECKPOINT, RUNLOG_FILE};
use vclip::zeroshot::{self, MetricRecord, TaskKind};

use manifest::{file_hash, RunManifest, MANIFEST_FILE};

/// Worker threads for the data-parallel parts; unset means one per core.
const THREADS_ENV: &str = "VCLIP_THREADS";

/// Subdirectory of a generated corpus holding the evaluation split and its
/// task files.
const EVAL_DIR: &str = "eval";

#[derive(Parser)]
#[command(name = "vclip", version, about = "Contrastive video-text pre-training on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training corpus, an evaluation split and its task files.
    GenCorpus {
        /// Corpus config (JSON); missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an encoder pair on a corpus directory.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run in `--out` from its latest checkpoint and saved config.
        #[arg(long, conflicts_with_all = [
            "config", "preset", "retrieval_mode", "overlap_mode", "shared_encoder", "pooling",
            "feature_mode", "epochs", "seed", "keep_epoch_checkpoints", "dump_clusters",
        ])]
        resume: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on one zero-shot task file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long)]
        data: PathBuf,
        /// Corpus holding the task's videos; defaults to the data file's directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Train and evaluate a suite of configuration contrasts over several seeds.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluation split; defaults to `<corpus>/eval`.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Suite::Table6)]
        suite: Suite,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Table6,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Preset {
    /// Small model that learns the reference corpus in seconds on one core.
    #[default]
    Reference,
    /// Full-size encoder with the default schedule.
    Full,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Training config (JSON); missing fields take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    /// Batch construction: sample_2k, direct_k or random.
    #[arg(long)]
    retrieval_mode: Option<RetrievalMode>,
    /// Clip placement around each text span: overlapped or exact_aligned.
    #[arg(long)]
    overlap_mode: Option<OverlapMode>,
    /// One transformer for both modalities.
    #[arg(long)]
    shared_encoder: bool,
    /// avg or cls.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Video features for retrieval: all_clips or first_window.
    #[arg(long)]
    feature_mode: Option<FeatureMode>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep a checkpoint per epoch instead of only the latest.
    #[arg(long)]
    keep_epoch_checkpoints: bool,
    /// Append each epoch's clusters to clusters.jsonl.
    #[arg(long)]
    dump_clusters: bool,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: vclip::Error| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

impl TrainArgs {
    /// Config file (or preset) with the flag overrides applied, fitted and
    /// validated against the corpus.
    fn resolve(&self, corpus: &corpus::Corpus) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let base = match self.preset {
                    Preset::Reference => TrainConfig::reference(),
                    Preset::Full => TrainConfig::default(),
                };
                merge(base, p)?
            }
            None => match self.preset {
                Preset::Reference => TrainConfig::reference(),
                Preset::Full => TrainConfig::default(),
            },
        };
        if let Some(m) = self.retrieval_mode {
            cfg.retrieval.mode = m;
        }
        if let Some(m) = self.overlap_mode {
            cfg.sampler.overlap_mode = m;
        }
        if self.shared_encoder {
            cfg.encoder.shared_encoder = true;
        }
        if let Some(p) = self.pooling {
            cfg.encoder.pooling = p;
        }
        if let Some(f) = self.feature_mode {
            cfg.retrieval.feature_mode = f;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.keep_epoch_checkpoints |= self.keep_epoch_checkpoints;
        cfg.dump_clusters |= self.dump_clusters;
        let cfg = cfg.fit_to(corpus);
        check_combination(&cfg, corpus.len())?;
        cfg.validate_for(corpus)?;
        Ok(cfg)
    }
}

/// Overlays the keys present in a JSON file on `base`, recursively.
fn merge(base: TrainConfig, path: &Path) -> Result<TrainConfig> {
    fn overlay(dst: &mut serde_json::Value, src: serde_json::Value) {
        match (dst, src) {
            (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
                for (k, v) in s {
                    overlay(d.entry(k).or_insert(serde_json::Value::Null), v);
                }
            }
            (d, s) => *d = s,
        }
    }
    let mut v = serde_json::to_value(base)?;
    overlay(&mut v, read_json(path)?);
    serde_json::from_value(v).with_context(|| format!("invalid training config {}", path.display()))
}

fn check_combination(cfg: &TrainConfig, n: usize) -> Result<()> {
    let k = cfg.retrieval.k;
    if cfg.retrieval.mode == RetrievalMode::Sample2k && 2 * k > n {
        bail!("--retrieval-mode sample_2k needs 2k = {} videos but the corpus has {n}; use direct_k or a smaller k", 2 * k);
    }
    if k > n {
        bail!("k = {k} exceeds the {n} corpus videos");
    }
    Ok(())
}

fn gen_corpus(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cc: CorpusConfig = match config {
        Some(p) => read_json(p)?,
        None => CorpusConfig::default(),
    };
    if let Some(s) = seed {
        cc.seed = s;
    }
    cc.validate()?;
    let train = generate(&cc)?;
    let eval = generate_split(&cc, Split::Eval)?;
    let eval_dir = out.join(EVAL_DIR);
    fs::create_dir_all(&eval_dir).with_context(|| format!("creating {}", eval_dir.display()))?;
    corpus::save(&train.corpus, out)?;
    corpus::save_ground_truth(&train.truth, out)?;
    corpus::save(&eval.corpus, &eval_dir)?;
    corpus::save_ground_truth(&eval.truth, &eval_dir)?;
    tasks::write_tasks(&eval.corpus, &eval.truth, &tasks::TaskConfig::default(), &eval_dir)?;

    let mut m = RunManifest::new("gen-corpus");
    m.seed = Some(cc.seed);
    m.config_hash = Some(vclip::sha256_hex(&serde_json::to_vec(&cc)?));
    let data = [corpus::MANIFEST_FILE, corpus::FEATURES_FILE, corpus::TRANSCRIPT_FILE, corpus::TOPICS_FILE];
    let mut files: Vec<PathBuf> = data.iter().map(PathBuf::from).collect();
    files.extend(data.iter().map(|f| Path::new(EVAL_DIR).join(f)));
    for k in [TaskKind::Retrieval, TaskKind::Qa, TaskKind::Segmentation, TaskKind::Localization] {
        files.push(Path::new(EVAL_DIR).join(k.file_name()));
    }
    m.outputs(out, &files)?;
    m.write(&out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} training videos to {} and {} evaluation videos with task files to {}",
        train.corpus.len(),
        out.display(),
        eval.corpus.len(),
        eval_dir.display()
    );
    Ok(())
}

fn pretrain(corpus_dir: &Path, out: &Path, resume: bool, args: &TrainArgs) -> Result<()> {
    let c = corpus::load(corpus_dir)?;
    let start = Instant::now();
    let (cfg, log) = if resume {
        let cfg = trainer::load_config(&out.join(CONFIG_FILE))?;
        let ckpt = Checkpoint::load(&out.join(LATEST_CHECKPOINT))?;
        let mut t = Trainer::resume(&c, cfg.clone(), &ckpt, Some(out))?;
        t.run()?;
        (cfg, t.log)
    } else {
        let cfg = args.resolve(&c)?;
        let (_, log) = trainer::train(&c, cfg.clone(), Some(out))?;
        (cfg, log)
    };

    let mut m = RunManifest::new("pretrain");
    m.seed = Some(cfg.seed);
    m.config_hash = Some(file_hash(&out.join(CONFIG_FILE))?);
    m.input("corpus", corpus::corpus_hash(&c));
    let mut files: Vec<PathBuf> = [CONFIG_FILE, RUNLOG_FILE, EPOCHS_FILE, LATEST_CHECKPOINT]
        .iter()
        .map(PathBuf::from)
        .collect();
    if cfg.keep_epoch_checkpoints {
        files.extend((0..cfg.epochs).map(|e| PathBuf::from(format!("ckpt-{e:03}.vclp"))));
    }
    if cfg.dump_clusters {
        files.push(PathBuf::from(trainer::CLUSTERS_FILE));
    }
    m.outputs(out, &files)?;
    m.write(&out.join(MANIFEST_FILE))?;

    let first = log.epochs.first().map_or(f64::NAN, |e| e.mean_loss);
    let last = log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "trained {} epochs ({} steps) in {:.1}s: mean loss {first:.4} -> {last:.4}; checkpoint {}",
        log.epochs.len(),
        log.steps.len(),
        start.elapsed().as_secs_f64(),
        out.join(LATEST_CHECKPOINT).display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, task: TaskKind, data: &Path, corpus_dir: Option<&Path>, out: &Path) -> Result<()> {
    let corpus_dir = match corpus_dir {
        Some(d) => d.to_path_buf(),
        None => data.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let c = corpus::load(&corpus_dir).with_context(|| format!("loading the task corpus from {}", corpus_dir.display()))?;
    let (model, _) = trainer::load_model(checkpoint)?;
    let ckpt_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config_hash = file_hash(&ckpt_dir.join(CONFIG_FILE))?;
    let checkpoint_hash = file_hash(checkpoint)?;
    let records: Vec<MetricRecord> = zeroshot::run_task(&model, &c, task, data)?
        .into_iter()
        .map(|(metric, value, version)| MetricRecord {
            task: task.as_str().into(),
            metric,
            value,
            config_hash: config_hash.clone(),
            checkpoint_hash: checkpoint_hash.clone(),
            version,
        })
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_json(out, &records)?;

    let mut m = RunManifest::new("eval");
    m.config_hash = Some(config_hash);
    m.input("checkpoint", checkpoint_hash);
    m.input("data", file_hash(data)?);
    m.input("corpus", corpus::corpus_hash(&c));
    let name = out.file_name().context("--out must name a file")?;
    let base = out.parent().unwrap_or(Path::new(""));
    m.outputs(base, &[PathBuf::from(name)])?;
    m.write(&base.join(format!("{}.manifest.json", out.file_stem().unwrap_or(name).to_string_lossy())))?;
    for r in &records {
        println!("{} {}: {:.4}", r.task, r.metric, r.value);
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    name: &'static str,
    retrieval_mode: RetrievalMode,
    overlap_mode: OverlapMode,
    shared_encoder: bool,
    pooling: Pooling,
    feature_mode: FeatureMode,
    r1: Vec<f64>,
    r5: Vec<f64>,
    r10: Vec<f64>,
    mean_r1: f64,
    mean_r5: f64,
    mean_r10: f64,
}

/// The full setup and one row per component switched off.
fn component_rows(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        c.retrieval.mode = RetrievalMode::Sample2k;
        c.sampler.overlap_mode = OverlapMode::Overlapped;
        f(&mut c);
        c
    };
    vec![
        ("full", with(&|_| {})),
        ("w/o retrieval", with(&|c| c.retrieval.mode = RetrievalMode::Random)),
        (
            "w/o retrieval and w/o overlap",
            with(&|c| {
                c.retrieval.mode = RetrievalMode::Random;
                c.sampler.overlap_mode = OverlapMode::ExactAligned;
            }),
        ),
        ("shared video/text transformer", with(&|c| c.encoder.shared_encoder = true)),
        ("[CLS] pooling", with(&|c| c.encoder.pooling = Pooling::Cls)),
        ("first 32 s for retrieval", with(&|c| c.retrieval.feature_mode = FeatureMode::FirstWindow)),
    ]
}

fn ablate(corpus_dir: &Path, eval_dir: Option<&Path>, seeds: u64, out: &Path, args: &TrainArgs) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let c = corpus::load(corpus_dir)?;
    let eval_dir = eval_dir.map_or_else(|| corpus_dir.join(EVAL_DIR), Path::to_path_buf);
    let ec = corpus::load(&eval_dir).with_context(|| format!("loading the evaluation split from {}", eval_dir.display()))?;
    let retrieval_file = eval_dir.join(TaskKind::Retrieval.file_name());
    let items: Vec<tasks::RetrievalItem> = tasks::read_jsonl(&retrieval_file)?;
    let task = tasks::RetrievalTask::from_items(items);
    let base = args.resolve(&c)?;
    let base_seed = base.seed;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows = Vec::new();
    for (name, cfg) in component_rows(&base) {
        check_combination(&cfg, c.len())?;
        let (mut r1, mut r5, mut r10) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..seeds {
            let run = TrainConfig {
                seed: base_seed + s,
                ..cfg.clone()
            };
            let (model, _) = trainer::train(&c, run, None)?;
            let r = zeroshot::eval_retrieval(&model, &ec, &task)?;
            log::info!("{name} seed {}: R@1 {:.3}", base_seed + s, r.r1);
            r1.push(r.r1);
            r5.push(r.r5);
            r10.push(r.r10);
        }
        rows.push(AblationRow {
            name,
            retrieval_mode: cfg.retrieval.mode,
            overlap_mode: cfg.sampler.overlap_mode,
            shared_encoder: cfg.encoder.shared_encoder,
            pooling: cfg.encoder.pooling,
            feature_mode: cfg.retrieval.feature_mode,
            mean_r1: mean(&r1),
            mean_r5: mean(&r5),
            mean_r10: mean(&r10),
            r1,
            r5,
            r10,
        });
    }
    write_json(&out.join("ablation.json"), &rows)?;
    trainer::save_config(&base, out)?;

    let mut m = RunManifest::new("ablate");
    m.seed = Some(base_seed);
    m.config_hash = Some(file_hash(&out.join(CONFIG_FILE))?);
    m.input("corpus", corpus::corpus_hash(&c));
    m.input("eval_corpus", corpus::corpus_hash(&ec));
    m.input("retrieval_task", file_hash(&retrieval_file)?);
    m.outputs(out, &[PathBuf::from("ablation.json"), PathBuf::from(CONFIG_FILE)])?;
    m.write(&out.join(MANIFEST_FILE))?;

    println!("{:<32} {:>7} {:>7} {:>7}   ({seeds} seeds)", "configuration", "R@1", "R@5", "R@10");
    for r in &rows {
        println!("{:<32} {:>7.3} {:>7.3} {:>7.3}", r.name, r.mean_r1, r.mean_r5, r.mean_r10);
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a thread count, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenCorpus { config, out, seed } => gen_corpus(config.as_deref(), &out, seed),
        Command::Pretrain {
            corpus,
            out,
            resume,
            train,
        } => pretrain(&corpus, &out, resume, &train),
        Command::Eval {
            checkpoint,
            task,
            data,
            corpus,
            out,
        } => eval(&checkpoint, task, &data, corpus.as_deref(), &out),
        Command::Ablate {
            corpus,
            eval,
            suite: Suite::Table6,
            seeds,
            out,
            train,
        } => ablate(&corpus, eval.as_deref(), seeds, &out, &train),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        // core errors already embed their cause in the message, so skip repeats
        let mut msg = e.to_string();
        for cause in e.chain().skip(1) {
            let c = cause.to_string();
            if !msg.contains(&c) {
                msg = format!("{msg}: {c}");
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
