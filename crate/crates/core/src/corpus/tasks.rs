//! Zero-shot evaluation tasks derived from planted topics, and their files.
//!
//! | file              | contents                                            |
//! |-------------------|-----------------------------------------------------|
//! | `retrieval.jsonl` | `{query: TextSpan, candidate: VideoSpan}` per line; |
//! |                   | query `i`'s gold candidate is line `i`               |
//! | `qa.jsonl`        | `{video, answers, gold}` per line                   |
//! | `labels.json`     | `{labels: [{name, tokens}], videos: [{video_id, gold}]}` |
//! | `steps.jsonl`     | `{video_id, steps: [{name, tokens}], gold}` per line |
//!
//! Per-second `gold` arrays hold a label/step index, or `null` for Outside.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::sampler::{TextSpan, VideoSpan};

use super::{topic_label_tokens, Corpus, CorpusConfig, GroundTruth, VideoRecord, VideoTruth};

pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const LABELS_FILE: &str = "labels.json";
pub const STEPS_FILE: &str = "steps.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub retrieval_items: usize,
    pub qa_items: usize,
    pub qa_candidates: usize,
    /// Words per topic label.
    pub label_len: usize,
    /// Leave the last topic out of the segmentation label set, so its seconds
    /// are gold Outside.
    pub hold_out_last_topic: bool,
    pub max_video_s: f64,
    pub max_text_tokens: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            retrieval_items: 100,
            qa_items: 100,
            qa_candidates: 5,
            label_len: 6,
            hold_out_last_topic: true,
            max_video_s: 32.0,
            max_text_tokens: 61,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub query: TextSpan,
    pub candidate: VideoSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub queries: Vec<TextSpan>,
    pub candidates: Vec<VideoSpan>,
    /// Gold candidate index per query.
    pub gold: Vec<usize>,
}

impl RetrievalTask {
    pub fn from_items(items: Vec<RetrievalItem>) -> Self {
        let gold = (0..items.len()).collect();
        let (queries, candidates) = items.into_iter().map(|i| (i.query, i.candidate)).unzip();
        Self {
            queries,
            candidates,
            gold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub video: VideoSpan,
    pub answers: Vec<Vec<u32>>,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub name: String,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationVideo {
    pub video_id: String,
    pub gold: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationTask {
    pub labels: Vec<Label>,
    pub videos: Vec<SegmentationVideo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepVideo {
    pub video_id: String,
    pub steps: Vec<Label>,
    pub gold: Vec<Option<usize>>,
}

/// Maximal runs `(start, end, topic)` of a per-second topic track.
pub fn topic_segments(track: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (s, &k) in track.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.2 == k => last.1 = s + 1,
            _ => out.push((s, s + 1, k)),
        }
    }
    out
}

fn label(config: &CorpusConfig, k: usize, len: usize) -> Label {
    Label {
        name: format!("topic-{k}"),
        tokens: topic_label_tokens(config, k, len),
    }
}

fn corpus_config(corpus: &Corpus) -> Result<&CorpusConfig> {
    corpus
        .config
        .as_ref()
        .ok_or_else(|| Error::config("task generation needs the generator config"))
}

/// Text of all utterances whose lag-shifted midpoint falls in `[a, b)`,
/// truncated to whole utterances within `max_tokens`.
fn narration_for(
    video: &VideoRecord,
    lag: f64,
    a: f64,
    b: f64,
    max_tokens: usize,
) -> Option<TextSpan> {
    let mut picked = Vec::new();
    let mut count = 0;
    for u in &video.utterances {
        let mid = 0.5 * (u.start_s + u.end_s) + lag;
        if mid >= a && mid < b {
            if count + u.tokens.len() > max_tokens {
                break;
            }
            count += u.tokens.len();
            picked.push(u);
        }
    }
    let (first, last) = (picked.first()?, picked.last()?);
    Some(TextSpan {
        video_id: video.video_id.clone(),
        start_s: first.start_s,
        end_s: last.end_s,
        tokens: picked.iter().flat_map(|u| u.tokens.iter().copied()).collect(),
    })
}

/// Text-to-video retrieval items. Each covers two consecutive topic
/// segments (one when the video has a single segment), so candidates
/// differ in topic composition, not just in a single topic.
pub fn retrieval_items(
    corpus: &Corpus,
    truth: &GroundTruth,
    config: &TaskConfig,
) -> Result<Vec<RetrievalItem>> {
    let cc = corpus_config(corpus)?;
    let mut r = rng::stream(cc.seed, &[tag::TASKS, 0]);
    // every usable span per video, so repeats only happen once a video runs out
    let mut pools: Vec<Vec<RetrievalItem>> = Vec::with_capacity(corpus.len());
    for (video, vt) in corpus.videos.iter().zip(&truth.videos) {
        let segs = topic_segments(&vt.topic_track);
        let mut pool = Vec::new();
        for i in 0..segs.len() {
            let a = segs[i].0 as f64;
            let b = segs.get(i + 1).map_or(segs[i].1, |s| s.1) as f64;
            let b = b.min(a + config.max_video_s);
            if b - a < 3.0 {
                continue;
            }
            if let Some(query) = narration_for(video, cc.speech_lag_s, a, b, config.max_text_tokens) {
                pool.push(RetrievalItem {
                    query,
                    candidate: VideoSpan {
                        video_id: video.video_id.clone(),
                        start_s: a,
                        end_s: b,
                    },
                });
            }
        }
        pools.push(pool);
    }
    if config.retrieval_items > 0 && pools.iter().all(Vec::is_empty) {
        return Err(Error::input("corpus has no usable retrieval spans"));
    }
    let mut left: Vec<Vec<usize>> = pools.iter().map(|p| (0..p.len()).collect()).collect();
    let mut items = Vec::with_capacity(config.retrieval_items);
    let mut vi = 0;
    while items.len() < config.retrieval_items {
        let v = vi % pools.len();
        vi += 1;
        if pools[v].is_empty() {
            continue;
        }
        // a repeated span ties with its twin and caps R@1 for both queries
        if left[v].is_empty() {
            left[v] = (0..pools[v].len()).collect();
        }
        let pick = r.random_range(0..left[v].len());
        let j = left[v].swap_remove(pick);
        items.push(pools[v][j].clone());
    }
    Ok(items)
}

pub fn qa_items(corpus: &Corpus, truth: &GroundTruth, config: &TaskConfig) -> Result<Vec<QaItem>> {
    let cc = corpus_config(corpus)?;
    if config.qa_candidates < 1 || config.qa_candidates > cc.n_topics {
        return Err(Error::config("qa_candidates must be in 1..=n_topics"));
    }
    let mut r = rng::stream(cc.seed, &[tag::TASKS, 1]);
    let labels: Vec<Vec<u32>> = (0..cc.n_topics)
        .map(|k| topic_label_tokens(cc, k, config.label_len))
        .collect();
    let mut items = Vec::with_capacity(config.qa_items);
    for q in 0..config.qa_items {
        let vi = q % corpus.len();
        let segs = topic_segments(&truth.videos[vi].topic_track);
        let (a, b, k) = segs[r.random_range(0..segs.len())];
        let b = (b as f64).min(a as f64 + config.max_video_s);
        let mut others: Vec<usize> = (0..cc.n_topics).filter(|&t| t != k).collect();
        others.shuffle(&mut r);
        let mut topics = vec![k];
        topics.extend(others.into_iter().take(config.qa_candidates - 1));
        topics.shuffle(&mut r);
        items.push(QaItem {
            video: VideoSpan {
                video_id: corpus.videos[vi].video_id.clone(),
                start_s: a as f64,
                end_s: b,
            },
            answers: topics.iter().map(|&t| labels[t].clone()).collect(),
            gold: topics.iter().position(|&t| t == k).expect("gold present"),
        });
    }
    Ok(items)
}

pub fn segmentation_task(
    corpus: &Corpus,
    truth: &GroundTruth,
    config: &TaskConfig,
) -> Result<SegmentationTask> {
    let cc = corpus_config(corpus)?;
    let held_out = config.hold_out_last_topic.then(|| cc.n_topics - 1);
    let kept: Vec<usize> = (0..cc.n_topics).filter(|&k| Some(k) != held_out).collect();
    if kept.len() < 2 {
        return Err(Error::config("segmentation needs at least two labels"));
    }
    let labels = kept.iter().map(|&k| label(cc, k, config.label_len)).collect();
    let videos = truth
        .videos
        .iter()
        .map(|vt| SegmentationVideo {
            video_id: vt.video_id.clone(),
            gold: vt
                .topic_track
                .iter()
                .map(|k| kept.iter().position(|x| x == k))
                .collect(),
        })
        .collect();
    Ok(SegmentationTask { labels, videos })
}

pub fn step_videos(corpus: &Corpus, truth: &GroundTruth, config: &TaskConfig) -> Result<Vec<StepVideo>> {
    let cc = corpus_config(corpus)?;
    Ok(truth
        .videos
        .iter()
        .map(|vt: &VideoTruth| {
            let mut order: Vec<usize> = Vec::new();
            for &k in &vt.topic_track {
                if !order.contains(&k) {
                    order.push(k);
                }
            }
            StepVideo {
                video_id: vt.video_id.clone(),
                steps: order.iter().map(|&k| label(cc, k, config.label_len)).collect(),
                gold: vt
                    .topic_track
                    .iter()
                    .map(|k| order.iter().position(|x| x == k))
                    .collect(),
            }
        })
        .collect())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut pos = 0usize;
    for line in bytes.split(|&b| b == b'\n') {
        let off = pos as u64;
        pos += line.len() + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        rows.push(serde_json::from_slice(line).map_err(|e| Error::format(path, off, e.to_string()))?);
    }
    Ok(rows)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Writes all four task files into `dir`.
pub fn write_tasks(corpus: &Corpus, truth: &GroundTruth, config: &TaskConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(RETRIEVAL_FILE), &retrieval_items(corpus, truth, config)?)?;
    write_jsonl(&dir.join(QA_FILE), &qa_items(corpus, truth, config)?)?;
    let seg = segmentation_task(corpus, truth, config)?;
    let p = dir.join(LABELS_FILE);
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::to_writer(&mut f, &seg).map_err(|e| Error::json(&p, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    write_jsonl(&dir.join(STEPS_FILE), &step_videos(corpus, truth, config)?)
}
