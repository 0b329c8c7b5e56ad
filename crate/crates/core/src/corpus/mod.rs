//! Synthetic video-text corpora with planted latent topics.
//!
//! Each video is a sequence of topic segments on an integer-second grid. The
//! feature token for second `s` is the prototype of the topic shown at `s`
//! plus Gaussian noise. Narration about a segment is shifted earlier by
//! `speech_lag_s`, so speech precedes the matching visuals.
//!
//! Training code only ever sees [`Corpus`]. The planted topics live in a
//! separate [`GroundTruth`] used to emit evaluation tasks.

mod generate;
mod io;
pub mod tasks;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use generate::{generate, generate_split, topic_label_tokens, Split};
pub use io::{
    corpus_hash, load, load_ground_truth, save, save_ground_truth, FEATURES_FILE, MANIFEST_FILE,
    TOPICS_FILE, TRANSCRIPT_FILE,
};

pub const CORPUS_MAGIC: &str = "VCLP-CORPUS";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_videos: usize,
    /// Videos in the held-out evaluation split.
    pub n_eval_videos: usize,
    pub n_topics: usize,
    pub d_feat: usize,
    pub vocab_size: usize,
    /// Size of each topic's private vocabulary partition.
    pub tokens_per_topic: usize,
    /// Distinct topics a single video draws its segments from.
    pub topics_per_video: usize,
    pub mean_duration_s: f64,
    pub segment_min_s: usize,
    pub segment_max_s: usize,
    /// Average transcript density in tokens per second.
    pub utterance_rate: f64,
    pub utterance_min_s: f64,
    pub utterance_max_s: f64,
    pub gap_min_s: f64,
    pub gap_max_s: f64,
    pub speech_lag_s: f64,
    /// Standard deviation of the per-coordinate feature noise.
    pub feature_noise: f64,
    /// Distinct ways each topic can be carried out. A video picks one variant
    /// per topic; the variant shows up both in the feature noise and in the
    /// narration's word choice. One variant disables the mechanism.
    pub variants_per_topic: usize,
    /// Fraction of the feature-noise variance that is the variant's fixed
    /// offset rather than fresh per-second noise.
    pub variant_share: f64,
    /// Probability that a narration token is one of the variant's own words
    /// rather than a word common to the whole topic.
    pub variant_word_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_eval_videos: 50,
            n_topics: 8,
            d_feat: 64,
            vocab_size: 256,
            tokens_per_topic: 32,
            topics_per_video: 3,
            mean_duration_s: 60.0,
            segment_min_s: 6,
            segment_max_s: 16,
            utterance_rate: 2.4,
            utterance_min_s: 1.5,
            utterance_max_s: 4.0,
            gap_min_s: 0.2,
            gap_max_s: 0.8,
            speech_lag_s: 4.0,
            feature_noise: 0.3,
            variants_per_topic: 4,
            variant_share: 0.5,
            variant_word_prob: 0.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("corpus config: {m}")));
        if self.n_videos == 0 {
            return fail("n_videos must be positive");
        }
        if self.n_topics == 0 || self.d_feat == 0 || self.tokens_per_topic == 0 {
            return fail("n_topics, d_feat and tokens_per_topic must be positive");
        }
        if self.n_topics * self.tokens_per_topic > self.vocab_size {
            return fail(&format!(
                "{} topics x {} tokens exceed the vocabulary of {}",
                self.n_topics, self.tokens_per_topic, self.vocab_size
            ));
        }
        if self.topics_per_video == 0 {
            return fail("topics_per_video must be positive");
        }
        if !(self.mean_duration_s >= 2.0) {
            return fail("mean_duration_s must be at least 2");
        }
        if self.segment_min_s == 0 || self.segment_min_s > self.segment_max_s {
            return fail("need 0 < segment_min_s <= segment_max_s");
        }
        if !(self.utterance_rate > 0.0) {
            return fail("utterance_rate must be positive");
        }
        if !(self.utterance_min_s > 0.0 && self.utterance_min_s <= self.utterance_max_s) {
            return fail("need 0 < utterance_min_s <= utterance_max_s");
        }
        if !(self.gap_min_s >= 0.0 && self.gap_min_s <= self.gap_max_s) {
            return fail("need 0 <= gap_min_s <= gap_max_s");
        }
        if !(self.speech_lag_s >= 0.0) {
            return fail("speech_lag_s must be non-negative");
        }
        if !(self.feature_noise >= 0.0) {
            return fail("feature_noise must be non-negative");
        }
        if self.variants_per_topic == 0 {
            return fail("variants_per_topic must be positive");
        }
        if self.variants_per_topic > 1 && self.variant_words() == 0 {
            return fail("too few words per topic for its variants");
        }
        if !(0.0..=1.0).contains(&self.variant_share) || !(0.0..=1.0).contains(&self.variant_word_prob) {
            return fail("variant_share and variant_word_prob must lie in [0, 1]");
        }
        Ok(())
    }

    /// Words private to each variant; zero with a single variant.
    pub fn variant_words(&self) -> usize {
        if self.variants_per_topic <= 1 {
            0
        } else {
            (self.tokens_per_topic / 2) / self.variants_per_topic
        }
    }

    /// Words of topic `k` shared by all its variants. Topic labels use these.
    pub fn common_vocab(&self, k: usize) -> std::ops::Range<u32> {
        let all = self.topic_vocab(k);
        all.start..all.end - (self.variant_words() * self.variants_per_topic) as u32
    }

    /// Private words of variant `j` of topic `k`.
    pub fn variant_vocab(&self, k: usize, j: usize) -> std::ops::Range<u32> {
        let lo = self.common_vocab(k).end + (j * self.variant_words()) as u32;
        lo..lo + self.variant_words() as u32
    }

    /// Word ids of topic `k`'s vocabulary partition.
    pub fn topic_vocab(&self, k: usize) -> std::ops::Range<u32> {
        let lo = (k * self.tokens_per_topic) as u32;
        lo..lo + self.tokens_per_topic as u32
    }
}

/// One transcript utterance. Times are seconds from the start of the video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub start_s: f64,
    pub end_s: f64,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration_s: f64,
    /// `[T, d_feat]` with `T = floor(duration_s)`, one token per second.
    /// Pre-extracted and frozen: encoders treat these as constants.
    pub features: Tensor<f32>,
    /// Sorted by start time and non-overlapping.
    pub utterances: Vec<Utterance>,
}

impl VideoRecord {
    pub fn n_seconds(&self) -> usize {
        self.features.rows()
    }

    pub fn n_text_tokens(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_feat: usize,
    pub vocab_size: usize,
    pub videos: Vec<VideoRecord>,
    /// Generator settings echoed into the manifest, when known.
    pub config: Option<CorpusConfig>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, idx: usize) -> &VideoRecord {
        &self.videos[idx]
    }

    pub fn index_of(&self, video_id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.video_id == video_id)
    }

    pub fn total_text_tokens(&self) -> usize {
        self.videos.iter().map(VideoRecord::n_text_tokens).sum()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.videos.iter().map(|v| v.duration_s).sum()
    }
}

/// Planted topics for one video. Evaluation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: String,
    /// Topic shown at each second.
    pub topic_track: Vec<usize>,
    /// Variant of that topic at each second.
    pub variant_track: Vec<usize>,
    /// Topic each utterance talks about, parallel to the transcript.
    pub utterance_topics: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub n_topics: usize,
    pub videos: Vec<VideoTruth>,
}

#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub truth: GroundTruth,
}
