//! Positive video/text clip pairs and batch assembly.
//!
//! A pair is built text-first: grow a text span from a random utterance,
//! pick a center inside it, then grow a video span of random duration
//! around that center. The two spans always overlap in time but need not
//! share boundaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, VideoRecord};
use crate::error::{Error, Result};
use crate::retrieval::VideoCluster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSpan {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSpan {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl VideoSpan {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    /// Position of the source video in the corpus.
    pub video_index: usize,
    pub video: VideoSpan,
    pub text: TextSpan,
}

impl ClipPair {
    pub fn overlaps(&self) -> bool {
        self.video.start_s.max(self.text.start_s) < self.video.end_s.min(self.text.end_s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Video span grown around a random point of the text span.
    #[default]
    Overlapped,
    /// Video span copies the text span's timestamps.
    ExactAligned,
}

impl std::str::FromStr for OverlapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlapped" => Ok(Self::Overlapped),
            "exact_aligned" => Ok(Self::ExactAligned),
            _ => Err(Error::config(format!("unknown overlap mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub pairs_per_video: usize,
    pub min_video_s: f64,
    pub max_video_s: f64,
    pub min_text_tokens: usize,
    pub max_text_tokens: usize,
    pub overlap_mode: OverlapMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pairs_per_video: 16,
            min_video_s: 3.0,
            max_video_s: 32.0,
            min_text_tokens: 8,
            max_text_tokens: 61,
            overlap_mode: OverlapMode::Overlapped,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_video == 0 {
            return Err(Error::config("pairs_per_video must be positive"));
        }
        if !(self.min_video_s > 0.0 && self.min_video_s <= self.max_video_s) {
            return Err(Error::config("need 0 < min_video_s <= max_video_s"));
        }
        if self.min_text_tokens == 0 || self.min_text_tokens > self.max_text_tokens {
            return Err(Error::config("need 0 < min_text_tokens <= max_text_tokens"));
        }
        Ok(())
    }
}

/// Grows a text span in whole utterances from a random seed utterance,
/// alternating later/earlier neighbors, until a uniformly drawn target token
/// count is reached, the next utterance would exceed `max_text_tokens`, or
/// the transcript runs out. `None` means the video has no transcript and
/// should be skipped.
pub fn sample_text_span(
    video: &VideoRecord,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Option<TextSpan> {
    let utts = &video.utterances;
    if utts.is_empty() {
        return None;
    }
    let seed = rng.random_range(0..utts.len());
    let target = rng.random_range(config.min_text_tokens..=config.max_text_tokens);
    let (mut lo, mut hi) = (seed, seed);
    let mut count = utts[seed].tokens.len();
    let mut prefer_later = true;
    while count < target {
        let fits = |idx: usize| count + utts[idx].tokens.len() <= config.max_text_tokens;
        let later = (hi + 1 < utts.len() && fits(hi + 1)).then_some(hi + 1);
        let earlier = (lo > 0 && fits(lo - 1)).then(|| lo - 1);
        let pick = if prefer_later {
            later.map(|i| (i, true)).or(earlier.map(|i| (i, false)))
        } else {
            earlier.map(|i| (i, false)).or(later.map(|i| (i, true)))
        };
        let Some((idx, went_later)) = pick else { break };
        if went_later {
            hi = idx;
        } else {
            lo = idx;
        }
        count += utts[idx].tokens.len();
        prefer_later = !went_later;
    }
    Some(TextSpan {
        video_id: video.video_id.clone(),
        start_s: utts[lo].start_s,
        end_s: utts[hi].end_s,
        tokens: utts[lo..=hi]
            .iter()
            .flat_map(|u| u.tokens.iter().copied())
            .collect(),
    })
}

/// Places a span of length `dur` centered at `center`, shifted (not shrunk)
/// to fit inside `[0, video_duration]`; truncated only when the video is
/// shorter than `dur`.
pub fn place_span(center: f64, dur: f64, video_duration: f64) -> (f64, f64) {
    if dur >= video_duration {
        return (0.0, video_duration);
    }
    let mut start = center - dur / 2.0;
    if start < 0.0 {
        start = 0.0;
    }
    let mut end = start + dur;
    if end > video_duration {
        end = video_duration;
        start = end - dur;
    }
    (start, end)
}

pub fn sample_video_span(
    text: &TextSpan,
    video: &VideoRecord,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> VideoSpan {
    let (start_s, end_s) = match config.overlap_mode {
        OverlapMode::ExactAligned => (text.start_s, text.end_s),
        OverlapMode::Overlapped => {
            let center = if text.end_s > text.start_s {
                rng.random_range(text.start_s..=text.end_s)
            } else {
                text.start_s
            };
            let dur = rng.random_range(config.min_video_s..=config.max_video_s);
            place_span(center, dur, video.duration_s)
        }
    };
    VideoSpan {
        video_id: video.video_id.clone(),
        start_s,
        end_s,
    }
}

pub fn sample_pair(
    corpus: &Corpus,
    video_index: usize,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Option<ClipPair> {
    let video = corpus.video(video_index);
    let text = sample_text_span(video, config, rng)?;
    let v = sample_video_span(&text, video, config, rng);
    Some(ClipPair {
        video_index,
        video: v,
        text,
    })
}

/// `pairs_per_video` pairs from each cluster member, in member order.
/// Members without a transcript are skipped.
pub fn assemble_batch(
    cluster: &VideoCluster,
    corpus: &Corpus,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<ClipPair>> {
    if cluster.members.is_empty() {
        return Err(Error::input("cannot assemble a batch from an empty cluster"));
    }
    let mut batch = Vec::with_capacity(cluster.members.len() * config.pairs_per_video);
    for &vi in &cluster.members {
        if vi >= corpus.len() {
            return Err(Error::input(format!("cluster member {vi} not in corpus")));
        }
        for _ in 0..config.pairs_per_video {
            match sample_pair(corpus, vi, config, rng) {
                Some(p) => batch.push(p),
                None => {
                    log::debug!("skipping {}: no transcript", corpus.video(vi).video_id);
                    break;
                }
            }
        }
    }
    if batch.is_empty() {
        return Err(Error::input("no cluster member has a transcript"));
    }
    Ok(batch)
}
