//! The alternating retrieve-then-train loop.
//!
//! Each epoch: global features for every video under the current model, an
//! exact index over them, one cluster per batch, then one optimizer step per
//! cluster on the clip pairs sampled from its videos.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch,
//! ...)`, so a run is a pure function of its config and a checkpoint taken at
//! an epoch boundary resumes it exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{decode_u64, encode_u64, span_features, Checkpoint, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::objective::{info_nce_graph, report, similarity, LossReport, ObjectiveConfig};
use crate::retrieval::{
    build_clusters, dump_clusters, global_features, DenseIndex, RetrievalConfig, RetrievalMode, VideoCluster,
};
use crate::rng::{self, tag};
use crate::sampler::{assemble_batch, ClipPair, SamplerConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.vclp";

/// Pairs whose gradients are summed together before joining the batch total.
/// Fixed, so the reduction order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub retrieval: RetrievalConfig,
    pub objective: ObjectiveConfig,
    /// `total_steps == 0` decays over the whole run.
    pub optimizer: AdamConfig,
    /// Keep `ckpt-NNN.vclp` for every epoch, not only `latest.vclp`.
    pub keep_epoch_checkpoints: bool,
    pub dump_clusters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            seed: 0,
            encoder: EncoderConfig::default(),
            sampler: SamplerConfig::default(),
            retrieval: RetrievalConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: AdamConfig {
                lr: 1e-3,
                warmup_steps: 50,
                ..AdamConfig::default()
            },
            keep_epoch_checkpoints: false,
            dump_clusters: false,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings of the original large-scale recipe: lr 5e-5 with
    /// 1000 warmup steps.
    pub fn large_scale_optimizer() -> AdamConfig {
        AdamConfig {
            lr: 5e-5,
            warmup_steps: 1000,
            ..AdamConfig::default()
        }
    }

    /// Small, fast settings that still learn the reference corpus on one
    /// CPU core.
    pub fn reference() -> Self {
        Self {
            epochs: 10,
            encoder: EncoderConfig {
                d_model: 32,
                n_layers_video: 1,
                n_layers_text: 1,
                n_heads: 2,
                d_ff: 64,
                ..EncoderConfig::default()
            },
            sampler: SamplerConfig {
                pairs_per_video: 4,
                ..SamplerConfig::default()
            },
            retrieval: RetrievalConfig {
                clips_per_video: 2,
                ..RetrievalConfig::default()
            },
            optimizer: AdamConfig {
                lr: 2e-3,
                warmup_steps: 25,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.retrieval.validate()?;
        self.objective.validate()?;
        self.optimizer.validate()?;
        if self.sampler.max_text_tokens > self.encoder.max_text_tokens {
            return Err(Error::config("sampler max_text_tokens exceeds the encoder's text limit"));
        }
        Ok(())
    }

    /// Also checks agreement with the corpus the run will use.
    pub fn validate_for(&self, corpus: &Corpus) -> Result<()> {
        self.validate()?;
        if corpus.d_feat != self.encoder.d_feat || corpus.vocab_size != self.encoder.vocab_size {
            return Err(Error::config(format!(
                "encoder expects d_feat {} / vocab {}, corpus has {} / {}",
                self.encoder.d_feat, self.encoder.vocab_size, corpus.d_feat, corpus.vocab_size
            )));
        }
        self.retrieval.validate_for(corpus.len())
    }

    /// The encoder config with corpus dimensions filled in.
    pub fn fit_to(mut self, corpus: &Corpus) -> Self {
        self.encoder.d_feat = corpus.d_feat;
        self.encoder.vocab_size = corpus.vocab_size;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub v2t: f64,
    pub t2v: f64,
    pub mean_neg_sim: f64,
    pub max_neg_sim: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Mean off-diagonal similarity of this epoch's batches.
    pub mean_neg_sim: f64,
    /// Not written to disk, so identical runs leave identical files.
    #[serde(skip)]
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Owns the model and optimizer for one run.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: TrainConfig,
    model: Model,
    opt: AdamState,
    /// Completed epochs.
    epoch: usize,
    out: Option<PathBuf>,
    pub log: RunLog,
}

struct PairForward {
    graph: Graph<f32>,
    vars: Vec<Var>,
    video: Var,
    text: Var,
}

fn pair_forward(model: &Model, corpus: &Corpus, pair: &ClipPair) -> Result<PairForward> {
    let video = corpus.video(pair.video_index);
    let feats = span_features(&pair.video, video, model.config.max_video_tokens)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let f = g.constant(feats);
    let ev = model.video_forward(&mut g, &vars, f)?;
    let et = model.text_forward(&mut g, &vars, &pair.text.tokens)?;
    Ok(PairForward {
        graph: g,
        vars,
        video: ev.pooled,
        text: et.pooled,
    })
}

fn stack(rows: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let d = rows.first().map_or(0, |r| r.numel());
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(
    model: &Model,
    corpus: &Corpus,
    batch: &[ClipPair],
    objective: &ObjectiveConfig,
) -> Result<(LossReport, Vec<Tensor<f32>>)> {
    let fwd: Vec<PairForward> = batch
        .par_iter()
        .map(|p| pair_forward(model, corpus, p))
        .collect::<Result<_>>()?;
    let zv = stack(&fwd.iter().map(|f| f.graph.value(f.video)).collect::<Vec<_>>())?;
    let zt = stack(&fwd.iter().map(|f| f.graph.value(f.text)).collect::<Vec<_>>())?;
    let mut lg = Graph::new();
    let (vz, tz) = (lg.param(zv), lg.param(zt));
    let nodes = info_nce_graph(&mut lg, vz, tz, objective)?;
    let rep = report(&lg, &nodes);
    if !rep.total.is_finite() {
        return Err(Error::Training {
            tensor: "loss".into(),
            message: format!("non-finite loss {}", rep.total),
        });
    }
    let lgrads = lg.backward(nodes.total)?;
    let d = model.config.d_model;
    let gzv = lgrads.get(vz).cloned().unwrap_or_else(|| Tensor::zeros(&[batch.len(), d]));
    let gzt = lgrads.get(tz).cloned().unwrap_or_else(|| Tensor::zeros(&[batch.len(), d]));
    drop(lg);

    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.dims().to_vec()).collect();
    let zero = || shapes.iter().map(|s| vec![0.0f32; s.iter().product()]).collect::<Vec<_>>();
    let partials: Vec<Vec<Vec<f32>>> = fwd
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = zero();
            for (j, f) in chunk.iter().enumerate() {
                let i = c * GRAD_CHUNK + j;
                let row = |m: &Tensor<f32>| Tensor::new(vec![1, d], m.row(i).to_vec());
                let grads = f.graph.backward_seeded(&[(f.video, row(&gzv)?), (f.text, row(&gzt)?)])?;
                for (p, a) in acc.iter_mut().enumerate() {
                    if let Some(gp) = grads.get(f.vars[p]) {
                        for (x, &y) in a.iter_mut().zip(gp.data()) {
                            *x += y;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = zero();
    for part in partials {
        for (a, p) in total.iter_mut().zip(part) {
            for (x, y) in a.iter_mut().zip(p) {
                *x += y;
            }
        }
    }
    let grads = total
        .into_iter()
        .zip(shapes)
        .map(|(g, s)| Tensor::new(s, g))
        .collect::<Result<_>>()?;
    Ok((rep, grads))
}

/// Off-diagonal similarity statistics of a batch under `model`, without
/// building gradients.
pub fn batch_similarity(model: &Model, corpus: &Corpus, batch: &[ClipPair], objective: &ObjectiveConfig) -> Result<LossReport> {
    let emb: Vec<(Tensor<f32>, Tensor<f32>)> = batch
        .par_iter()
        .map(|p| {
            let v = model.encode_video(&p.video, corpus.video(p.video_index))?.pooled;
            let t = model.encode_text(&p.text.tokens)?.pooled;
            Ok((v, t))
        })
        .collect::<Result<_>>()?;
    let zv = stack(&emb.iter().map(|e| &e.0).collect::<Vec<_>>())?;
    let zt = stack(&emb.iter().map(|e| &e.1).collect::<Vec<_>>())?;
    crate::objective::info_nce(&similarity(&zv, &zt)?, objective.temperature)
}

/// One epoch's clusters under `model`, as the trainer would build them.
pub fn epoch_clusters(model: &Model, corpus: &Corpus, config: &TrainConfig, epoch: u64) -> Result<Vec<VideoCluster>> {
    let index = if config.retrieval.mode == RetrievalMode::Random {
        None
    } else {
        let feats = global_features(model, corpus, &config.sampler, &config.retrieval, config.seed, epoch)?;
        Some(DenseIndex::new(&feats)?)
    };
    let mut r = rng::stream(config.seed, &[tag::CLUSTERS, epoch]);
    build_clusters(corpus.len(), index.as_ref(), &config.retrieval, &mut r)
}

fn append_json<T: Serialize>(path: &Path, rec: &T) -> Result<()> {
    let mut line = serde_json::to_vec(rec).map_err(|e| Error::json(path, e))?;
    line.push(b'\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

pub fn save_config(config: &TrainConfig, dir: &Path) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    let s = serde_json::to_string_pretty(config).map_err(|e| Error::json(&p, e))?;
    fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Model and run config from a checkpoint; the config is read from
/// `config.json` beside it.
pub fn load_model(checkpoint: &Path) -> Result<(Model, TrainConfig)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config = load_config(&dir.join(CONFIG_FILE))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = Model::from_named(config.encoder.clone(), ckpt.params)?;
    Ok((model, config))
}

impl<'a> Trainer<'a> {
    /// Fresh run. `out`, when given, receives logs and checkpoints.
    pub fn new(corpus: &'a Corpus, config: TrainConfig, out: Option<&Path>) -> Result<Self> {
        config.validate_for(corpus)?;
        let model = Model::init(config.encoder.clone(), config.seed)?;
        let mut oc = config.optimizer.clone();
        if oc.total_steps == 0 {
            oc.total_steps = (config.epochs * config.retrieval.n_clusters(corpus.len())) as u64;
        }
        let opt = AdamState::new(oc, model.params())?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_config(&config, dir)?;
            for f in [RUNLOG_FILE, EPOCHS_FILE, CLUSTERS_FILE] {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(Self {
            corpus,
            config,
            model,
            opt,
            epoch: 0,
            out: out.map(Path::to_path_buf),
            log: RunLog::default(),
        })
    }

    /// Continues a run from a checkpoint taken at an epoch boundary.
    pub fn resume(corpus: &'a Corpus, config: TrainConfig, ckpt: &Checkpoint, out: Option<&Path>) -> Result<Self> {
        config.validate_for(corpus)?;
        let get = |name: &str| {
            Checkpoint::find(&ckpt.rng, name)
                .or_else(|| Checkpoint::find(&ckpt.optimizer, name))
                .ok_or_else(|| Error::input(format!("checkpoint lacks {name}")))
        };
        let seed = decode_u64(get("rng.seed")?)?;
        if seed != config.seed {
            return Err(Error::config(format!("checkpoint seed {seed} differs from config seed {}", config.seed)));
        }
        let epoch = decode_u64(get("train.epoch")?)? as usize;
        let model = Model::from_named(config.encoder.clone(), ckpt.params.clone())?;
        let mut t = Self::new(corpus, config, None)?;
        t.model = model;
        t.epoch = epoch;
        t.opt.step = decode_u64(get("opt.step")?)?;
        for (i, name) in t.model.names().to_vec().iter().enumerate() {
            let m = get(&format!("opt.m.{name}"))?;
            let v = get(&format!("opt.v.{name}"))?;
            if m.dims() != t.model.params()[i].dims() || v.dims() != m.dims() {
                return Err(Error::input(format!("optimizer moments for {name} have wrong dims")));
            }
            t.opt.m[i] = m.clone();
            t.opt.v[i] = v.clone();
        }
        t.out = out.map(Path::to_path_buf);
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names = self.model.names();
        let mut optimizer = vec![("opt.step".to_string(), encode_u64(self.opt.step))];
        optimizer.extend(names.iter().zip(&self.opt.m).map(|(n, t)| (format!("opt.m.{n}"), t.clone())));
        optimizer.extend(names.iter().zip(&self.opt.v).map(|(n, t)| (format!("opt.v.{n}"), t.clone())));
        Checkpoint {
            params: self.model.named(),
            optimizer,
            rng: vec![
                ("rng.seed".into(), encode_u64(self.config.seed)),
                ("train.epoch".into(), encode_u64(self.epoch as u64)),
                ("train.global_step".into(), encode_u64(self.opt.step)),
            ],
        }
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[ClipPair]) -> Result<StepRecord> {
        let (rep, grads) = batch_gradients(&self.model, self.corpus, batch, &self.config.objective)?;
        let names = self.model.names().to_vec();
        let stats = adam_step(self.model.params_mut(), &grads, &names, &mut self.opt)?;
        Ok(StepRecord {
            epoch: self.epoch,
            step: self.opt.step,
            loss: rep.total,
            v2t: rep.v2t,
            t2v: rep.t2v,
            mean_neg_sim: rep.mean_neg_sim,
            max_neg_sim: rep.max_neg_sim,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            batch: rep.batch,
        })
    }

    /// Runs the next epoch. On a training error the model keeps its state from
    /// the failing step's start and no checkpoint is written for the epoch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let e = self.epoch as u64;
        let clusters = epoch_clusters(&self.model, self.corpus, &self.config, e)?;
        if let (Some(dir), true) = (&self.out, self.config.dump_clusters) {
            dump_clusters(&dir.join(CLUSTERS_FILE), self.epoch, &clusters, self.corpus)?;
        }
        let mut losses = Vec::with_capacity(clusters.len());
        let mut negs = Vec::with_capacity(clusters.len());
        for (b, cluster) in clusters.iter().enumerate() {
            let mut r = rng::stream(self.config.seed, &[tag::BATCH, e, b as u64]);
            let batch = assemble_batch(cluster, self.corpus, &self.config.sampler, &mut r)?;
            let rec = self.step(&batch)?;
            log::debug!("epoch {} step {} loss {:.4}", rec.epoch, rec.step, rec.loss);
            if let Some(dir) = &self.out {
                append_json(&dir.join(RUNLOG_FILE), &rec)?;
            }
            losses.push(rec.loss);
            negs.push(rec.mean_neg_sim);
            self.log.steps.push(rec);
        }
        self.epoch += 1;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rec = EpochRecord {
            epoch: self.epoch - 1,
            steps: losses.len(),
            mean_loss: mean(&losses),
            mean_neg_sim: mean(&negs),
            wall_s: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} mean loss {:.4} ({:.1}s)", rec.epoch, rec.mean_loss, rec.wall_s);
        if let Some(dir) = &self.out {
            append_json(&dir.join(EPOCHS_FILE), &rec)?;
            let ckpt = self.checkpoint();
            if self.config.keep_epoch_checkpoints {
                ckpt.save(&dir.join(format!("ckpt-{:03}.vclp", rec.epoch)))?;
            }
            ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
        }
        self.log.epochs.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Trains from scratch and returns the final model and its log.
pub fn train(corpus: &Corpus, config: TrainConfig, out: Option<&Path>) -> Result<(Model, RunLog)> {
    let mut t = Trainer::new(corpus, config, out)?;
    t.run()?;
    let log = std::mem::take(&mut t.log);
    Ok((t.into_model(), log))
}
