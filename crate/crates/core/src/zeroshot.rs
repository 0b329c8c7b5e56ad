//! Zero-shot heads: text-to-video retrieval, multiple-choice QA, action
//! segmentation with an Outside label, and step localization. All of them
//! score with raw dot products between encoder outputs; nothing is trained.
//!
//! Ties always go to the lowest index.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::tasks::{self, Label, QaItem, RetrievalItem, RetrievalTask, SegmentationTask, StepVideo};
use crate::corpus::{Corpus, VideoRecord};
use crate::encoder::{feature_rows, Model};
use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};

/// Version tag of the step-recall definition written next to its values.
pub const STEP_RECALL_VERSION: &str = "argmax-second-in-gold-segment/v1";

pub const SEGMENT_WINDOW_S: usize = 32;
pub const SEGMENT_STRIDE_S: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Retrieval,
    Qa,
    Segmentation,
    Localization,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Self::Retrieval),
            "qa" => Ok(Self::Qa),
            "segmentation" => Ok(Self::Segmentation),
            "localization" => Ok(Self::Localization),
            _ => Err(Error::config(format!("unknown task {s:?}"))),
        }
    }
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Retrieval => "retrieval",
            Self::Qa => "qa",
            Self::Segmentation => "segmentation",
            Self::Localization => "localization",
        }
    }

    /// Default task file name inside an evaluation corpus directory.
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Retrieval => tasks::RETRIEVAL_FILE,
            Self::Qa => tasks::QA_FILE,
            Self::Segmentation => tasks::LABELS_FILE,
            Self::Localization => tasks::STEPS_FILE,
        }
    }
}

/// Position of `gold` when `scores` are sorted descending, ties by index.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gold))
        .count()
}

/// Index of the largest score, lowest index on ties. `None` if empty.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
}

/// R@1/5/10 from a `[queries][candidates]` score table.
pub fn recall_at_k(scores: &[Vec<f64>], gold: &[usize]) -> Result<RecallAtK> {
    if scores.len() != gold.len() || scores.is_empty() {
        return Err(Error::input("need one gold index per query and at least one query"));
    }
    let mut hits = [0usize; 3];
    for (row, &g) in scores.iter().zip(gold) {
        if row.is_empty() {
            return Err(Error::input("empty candidate list"));
        }
        if g >= row.len() {
            return Err(Error::input(format!("gold {g} outside {} candidates", row.len())));
        }
        let r = rank_of(row, g);
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            *h += usize::from(r < k);
        }
    }
    let n = scores.len() as f64;
    Ok(RecallAtK {
        r1: hits[0] as f64 / n,
        r5: hits[1] as f64 / n,
        r10: hits[2] as f64 / n,
        queries: scores.len(),
    })
}

fn dot(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    ops::dot(a.data(), b.data()) as f64
}

fn video_of<'c>(corpus: &'c Corpus, id: &str) -> Result<&'c VideoRecord> {
    corpus
        .index_of(id)
        .map(|i| corpus.video(i))
        .ok_or_else(|| Error::input(format!("video {id} not in corpus")))
}

pub fn eval_retrieval(model: &Model, corpus: &Corpus, task: &RetrievalTask) -> Result<RecallAtK> {
    if task.candidates.is_empty() {
        return Err(Error::input("retrieval task has no candidates"));
    }
    let zv: Vec<Tensor<f32>> = task
        .candidates
        .par_iter()
        .map(|c| Ok(model.encode_video(c, video_of(corpus, &c.video_id)?)?.pooled))
        .collect::<Result<_>>()?;
    let zt: Vec<Tensor<f32>> = task
        .queries
        .par_iter()
        .map(|q| Ok(model.encode_text(&q.tokens)?.pooled))
        .collect::<Result<_>>()?;
    let scores: Vec<Vec<f64>> = zt.iter().map(|t| zv.iter().map(|v| dot(t, v)).collect()).collect();
    recall_at_k(&scores, &task.gold)
}

/// Fraction of items whose highest-scoring answer is the gold one.
pub fn eval_qa(model: &Model, corpus: &Corpus, items: &[QaItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::input("qa task has no items"));
    }
    let correct: Vec<bool> = items
        .par_iter()
        .map(|it| {
            if it.answers.is_empty() || it.gold >= it.answers.len() {
                return Err(Error::input("qa item needs answers and a valid gold index"));
            }
            let zv = model.encode_video(&it.video, video_of(corpus, &it.video.video_id)?)?.pooled;
            let scores = it
                .answers
                .iter()
                .map(|a| Ok(dot(&zv, &model.encode_label(a)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(argmax(&scores) == Some(it.gold))
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / items.len() as f64)
}

/// Largest dot product between two distinct labels.
pub fn gamma(embeddings: &[Tensor<f32>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::input("the rejection threshold needs at least two labels"));
    }
    let mut g = f64::NEG_INFINITY;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            g = g.max(dot(&embeddings[i], &embeddings[j]));
        }
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct LabelSet {
    pub labels: Vec<Label>,
    pub embeddings: Vec<Tensor<f32>>,
    pub gamma: f64,
}

impl LabelSet {
    pub fn new(model: &Model, labels: Vec<Label>) -> Result<Self> {
        let embeddings = labels
            .iter()
            .map(|l| model.encode_label(&l.tokens))
            .collect::<Result<Vec<_>>>()?;
        let gamma = gamma(&embeddings)?;
        Ok(Self {
            labels,
            embeddings,
            gamma,
        })
    }
}

/// `[start, end)` windows covering `0..n` with the given length and stride.
pub fn windows(n: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + window).min(n);
        out.push((s, e));
        if e == n {
            break;
        }
        s += stride.max(1);
    }
    out
}

/// Per-second logits `h_u . z_l` against each embedding, averaged over the
/// sliding windows that cover the second.
pub fn token_logits(
    model: &Model,
    video: &VideoRecord,
    embeddings: &[Tensor<f32>],
    window: usize,
    stride: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = video.n_seconds();
    let window = window.min(model.config.max_video_tokens);
    let mut sum = vec![vec![0.0f64; embeddings.len()]; n];
    let mut count = vec![0usize; n];
    for (a, b) in windows(n, window, stride) {
        let e = model.encode_features(&feature_rows::<f32>(video, a, b)?)?;
        for u in a..b {
            let h = e.token_states.row(1 + u - a);
            for (s, z) in sum[u].iter_mut().zip(embeddings) {
                *s += ops::dot(h, z.data()) as f64;
            }
            count[u] += 1;
        }
    }
    for (row, c) in sum.iter_mut().zip(count) {
        row.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sum)
}

/// The best label per second, or `None` (Outside) unless its logit exceeds
/// `gamma`.
pub fn apply_threshold(logits: &[Vec<f64>], gamma: f64) -> Vec<Option<usize>> {
    logits
        .iter()
        .map(|row| argmax(row).filter(|&i| row[i] > gamma))
        .collect()
}

pub fn segment_video(model: &Model, video: &VideoRecord, set: &LabelSet, window: usize, stride: usize) -> Result<Vec<Option<usize>>> {
    let logits = token_logits(model, video, &set.embeddings, window, stride)?;
    Ok(apply_threshold(&logits, set.gamma))
}

/// Row-wise softmax of per-second step logits.
pub fn step_distribution(logits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    logits
        .iter()
        .map(|row| {
            let t = Tensor::new(vec![1, row.len()], row.clone())?;
            Ok(ops::softmax_rows(&t, 1.0)?.into_vec())
        })
        .collect()
}

/// `[seconds][steps]` probabilities.
pub fn localize_steps(model: &Model, video: &VideoRecord, steps: &[Label]) -> Result<Vec<Vec<f64>>> {
    if steps.is_empty() {
        return Err(Error::input("a video needs at least one step"));
    }
    let z = steps
        .iter()
        .map(|s| model.encode_label(&s.tokens))
        .collect::<Result<Vec<_>>>()?;
    step_distribution(&token_logits(model, video, &z, SEGMENT_WINDOW_S, SEGMENT_STRIDE_S)?)
}

/// Fraction of seconds labeled correctly. Without `include_outside`, seconds
/// whose gold label is Outside are skipped.
pub fn frame_accuracy(gold: &[Option<usize>], pred: &[Option<usize>], include_outside: bool) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        if g.is_none() && !include_outside {
            continue;
        }
        n += 1;
        hit += usize::from(g == p);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Fraction of gold-Outside seconds predicted Outside.
pub fn outside_recall(gold: &[Option<usize>], pred: &[Option<usize>]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        if g.is_none() {
            n += 1;
            hit += usize::from(p.is_none());
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Per video: the fraction of annotated steps whose most probable second lies
/// in a gold segment of that step; then the mean over videos.
pub fn average_step_recall(gold: &[Vec<Option<usize>>], probs: &[Vec<Vec<f64>>]) -> Result<f64> {
    if gold.len() != probs.len() || gold.is_empty() {
        return Err(Error::input("need predictions for every video"));
    }
    let mut total = 0.0;
    for (g, p) in gold.iter().zip(probs) {
        if g.len() != p.len() {
            return Err(Error::input("prediction length differs from gold"));
        }
        let mut steps: Vec<usize> = g.iter().flatten().copied().collect();
        steps.sort_unstable();
        steps.dedup();
        if steps.is_empty() {
            continue;
        }
        let found = steps
            .iter()
            .filter(|&&s| {
                let col: Vec<f64> = p.iter().map(|row| row.get(s).copied().unwrap_or(0.0)).collect();
                argmax(&col).is_some_and(|u| g[u] == Some(s))
            })
            .count();
        total += found as f64 / steps.len() as f64;
    }
    Ok(total / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationReport {
    pub frame_accuracy: f64,
    pub frame_accuracy_with_outside: f64,
    pub outside_recall: f64,
    pub gamma: f64,
    pub predictions: Vec<Vec<Option<usize>>>,
}

pub fn eval_segmentation(model: &Model, corpus: &Corpus, task: &SegmentationTask) -> Result<SegmentationReport> {
    let set = LabelSet::new(model, task.labels.clone())?;
    let preds: Vec<Vec<Option<usize>>> = task
        .videos
        .par_iter()
        .map(|v| segment_video(model, video_of(corpus, &v.video_id)?, &set, SEGMENT_WINDOW_S, SEGMENT_STRIDE_S))
        .collect::<Result<_>>()?;
    let gold: Vec<Option<usize>> = task.videos.iter().flat_map(|v| v.gold.iter().copied()).collect();
    let pred: Vec<Option<usize>> = preds.iter().flatten().copied().collect();
    Ok(SegmentationReport {
        frame_accuracy: frame_accuracy(&gold, &pred, false),
        frame_accuracy_with_outside: frame_accuracy(&gold, &pred, true),
        outside_recall: outside_recall(&gold, &pred),
        gamma: set.gamma,
        predictions: preds,
    })
}

pub fn eval_localization(model: &Model, corpus: &Corpus, videos: &[StepVideo]) -> Result<f64> {
    let probs: Vec<Vec<Vec<f64>>> = videos
        .par_iter()
        .map(|v| localize_steps(model, video_of(corpus, &v.video_id)?, &v.steps))
        .collect::<Result<_>>()?;
    let gold: Vec<Vec<Option<usize>>> = videos.iter().map(|v| v.gold.clone()).collect();
    average_step_recall(&gold, &probs)
}

/// Runs one task file and returns `(metric, value, version)` triples.
pub fn run_task(model: &Model, corpus: &Corpus, kind: TaskKind, data: &Path) -> Result<Vec<(String, f64, Option<String>)>> {
    let m = |k: &str, v: f64| (k.to_string(), v, None);
    Ok(match kind {
        TaskKind::Retrieval => {
            let items: Vec<RetrievalItem> = tasks::read_jsonl(data)?;
            let r = eval_retrieval(model, corpus, &RetrievalTask::from_items(items))?;
            vec![m("R@1", r.r1), m("R@5", r.r5), m("R@10", r.r10)]
        }
        TaskKind::Qa => {
            let items: Vec<QaItem> = tasks::read_jsonl(data)?;
            vec![m("accuracy", eval_qa(model, corpus, &items)?)]
        }
        TaskKind::Segmentation => {
            let task: SegmentationTask = tasks::read_json(data)?;
            let r = eval_segmentation(model, corpus, &task)?;
            vec![
                m("frame_accuracy", r.frame_accuracy),
                m("frame_accuracy_with_outside", r.frame_accuracy_with_outside),
                m("outside_recall", r.outside_recall),
                m("gamma", r.gamma),
            ]
        }
        TaskKind::Localization => {
            let videos: Vec<StepVideo> = tasks::read_jsonl(data)?;
            vec![(
                "average_step_recall".into(),
                eval_localization(model, corpus, &videos)?,
                Some(STEP_RECALL_VERSION.into()),
            )]
        }
    })
}
