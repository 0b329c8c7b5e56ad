//! Global video features, an exact inner-product index, and the video
//! clusters that source each training batch.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{span_features, Model};
use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};
use crate::rng::{self, tag};
use crate::sampler::{sample_pair, SamplerConfig, VideoSpan};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMode {
    /// Sample k of the seed video's 2k nearest neighbors.
    #[default]
    #[serde(rename = "sample_2k")]
    Sample2k,
    /// Take the seed video's k nearest neighbors.
    #[serde(rename = "direct_k")]
    DirectK,
    /// k videos uniformly at random; ignores embeddings.
    #[serde(rename = "random")]
    Random,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample_2k" => Ok(Self::Sample2k),
            "direct_k" => Ok(Self::DirectK),
            "random" => Ok(Self::Random),
            _ => Err(Error::config(format!("unknown retrieval mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Average over sampled clip pairs from the whole video.
    #[default]
    AllClips,
    /// Only the first 32 seconds and the narration overlapping them.
    FirstWindow,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_clips" => Ok(Self::AllClips),
            "first_window" => Ok(Self::FirstWindow),
            _ => Err(Error::config(format!("unknown feature mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Videos per cluster.
    pub k: usize,
    pub mode: RetrievalMode,
    pub feature_mode: FeatureMode,
    /// Clip pairs averaged into each global feature.
    pub clips_per_video: usize,
    /// Clusters per epoch; `None` means `ceil(n_videos / k)`.
    pub clusters_per_epoch: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            mode: RetrievalMode::Sample2k,
            feature_mode: FeatureMode::AllClips,
            clips_per_video: 4,
            clusters_per_epoch: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.clips_per_video == 0 {
            return Err(Error::config("k and clips_per_video must be positive"));
        }
        if self.clusters_per_epoch == Some(0) {
            return Err(Error::config("clusters_per_epoch must be positive"));
        }
        Ok(())
    }

    /// Checks the config against a corpus of `n` videos.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.k > n {
            return Err(Error::config(format!("k = {} exceeds the {n} training videos", self.k)));
        }
        Ok(())
    }

    pub fn n_clusters(&self, n_videos: usize) -> usize {
        self.clusters_per_epoch.unwrap_or_else(|| n_videos.div_ceil(self.k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub video_id: String,
    pub z: Tensor<f32>,
}

/// Exact inner-product index over one row per video.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

#[derive(PartialEq)]
struct Hit {
    score: f32,
    id: usize,
}

impl Eq for Hit {}

impl Ord for Hit {
    /// Better hits compare smaller: higher score, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl DenseIndex {
    pub fn new(features: &[GlobalFeature]) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.z.numel());
        let mut data = Vec::with_capacity(features.len() * dim);
        let mut ids = Vec::with_capacity(features.len());
        for f in features {
            if f.z.numel() != dim {
                return Err(Error::shape("global features of unequal width"));
            }
            if !f.z.is_finite() {
                return Err(Error::input(format!("non-finite global feature for {}", f.video_id)));
            }
            data.extend_from_slice(f.z.data());
            ids.push(f.video_id.clone());
        }
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("duplicate video id in index"));
        }
        Ok(Self { ids, dim, data })
    }

    /// Index over the rows of an `[n, d]` matrix, ids `"0".."n-1"`.
    pub fn from_matrix(m: &Tensor<f32>) -> Result<Self> {
        if m.dims().len() != 2 {
            return Err(Error::shape("index matrix must be 2-d"));
        }
        let features: Vec<GlobalFeature> = (0..m.rows())
            .map(|i| GlobalFeature {
                video_id: i.to_string(),
                z: Tensor::new(vec![m.cols()], m.row(i).to_vec()).expect("row"),
            })
            .collect();
        Self::new(&features)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row indices of the `m` largest inner products with `query`, best
    /// first; equal scores are ordered by ascending index.
    pub fn knn(&self, query: &[f32], m: usize) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(Error::shape(format!("query of width {} for index of width {}", query.len(), self.dim)));
        }
        if m > self.len() {
            return Err(Error::input(format!("asked for {m} neighbors in an index of {}", self.len())));
        }
        if m == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(m + 1);
        for id in 0..self.len() {
            let hit = Hit {
                score: ops::dot(self.row(id), query),
                id,
            };
            if heap.len() < m {
                heap.push(hit);
            } else if hit < *heap.peek().expect("non-empty") {
                heap.pop();
                heap.push(hit);
            }
        }
        Ok(heap.into_sorted_vec().into_iter().map(|h| h.id).collect())
    }
}

/// Source videos of one batch, as corpus indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoCluster {
    pub seed_video: usize,
    pub members: Vec<usize>,
}

/// One epoch's clusters. Seeds are a random permutation prefix, so no video
/// seeds two clusters while `|C| <= n`.
/// `index` may be `None` only in random mode, which never consults it.
pub fn build_clusters(
    n: usize,
    index: Option<&DenseIndex>,
    config: &RetrievalConfig,
    rng: &mut impl Rng,
) -> Result<Vec<VideoCluster>> {
    config.validate_for(n)?;
    if let Some(ix) = index {
        if ix.len() != n {
            return Err(Error::input(format!("index of {} rows for {n} videos", ix.len())));
        }
    }
    let k = config.k;
    let mut mode = config.mode;
    if mode == RetrievalMode::Sample2k && 2 * k > n {
        log::warn!("2k = {} exceeds the {n} videos; retrieving k directly", 2 * k);
        mode = RetrievalMode::DirectK;
    }
    let index = match (mode, index) {
        (RetrievalMode::Random, ix) => ix,
        (_, Some(ix)) => Some(ix),
        (_, None) => return Err(Error::config("retrieval clustering needs an index")),
    };
    let n_clusters = config.n_clusters(n);
    let mut seeds: Vec<usize> = Vec::with_capacity(n_clusters);
    while seeds.len() < n_clusters {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        seeds.extend(perm.into_iter().take(n_clusters - seeds.len()));
    }
    seeds
        .into_iter()
        .map(|seed| {
            let members = match mode {
                RetrievalMode::Random => index::sample(rng, n, k).into_vec(),
                RetrievalMode::DirectK => {
                    let ix = index.expect("checked above");
                    ix.knn(ix.row(seed), k)?
                }
                RetrievalMode::Sample2k => {
                    let ix = index.expect("checked above");
                    let hood = ix.knn(ix.row(seed), 2 * k)?;
                    index::sample(rng, hood.len(), k)
                        .into_iter()
                        .map(|j| hood[j])
                        .collect()
                }
            };
            Ok(VideoCluster {
                seed_video: seed,
                members,
            })
        })
        .collect()
}

/// Appends one JSON line per cluster: `{epoch, seed_video, members}` with ids.
pub fn dump_clusters(path: &Path, epoch: usize, clusters: &[VideoCluster], corpus: &Corpus) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let id = |i: usize| corpus.video(i).video_id.clone();
    let mut out = Vec::new();
    for c in clusters {
        let line = serde_json::json!({
            "epoch": epoch,
            "seed_video": id(c.seed_video),
            "members": c.members.iter().map(|&m| id(m)).collect::<Vec<_>>(),
        });
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn accumulate(acc: &mut [f32], z: &Tensor<f32>) {
    for (a, &v) in acc.iter_mut().zip(z.data()) {
        *a += v;
    }
}

fn global_feature(
    model: &Model,
    corpus: &Corpus,
    vi: usize,
    sampler: &SamplerConfig,
    config: &RetrievalConfig,
    rng: &mut impl Rng,
) -> Result<GlobalFeature> {
    let video = corpus.video(vi);
    let d = model.config.d_model;
    let window = VideoSpan {
        video_id: video.video_id.clone(),
        start_s: 0.0,
        end_s: video.duration_s.min(sampler.max_video_s),
    };
    let mut parts: Vec<Tensor<f32>> = Vec::new();
    match config.feature_mode {
        FeatureMode::AllClips => {
            for _ in 0..config.clips_per_video {
                let Some(pair) = sample_pair(corpus, vi, sampler, rng) else { break };
                parts.push(model.encode_video(&pair.video, video)?.pooled);
                parts.push(model.encode_text(&pair.text.tokens)?.pooled);
            }
        }
        FeatureMode::FirstWindow => {
            parts.push(model.encode_video(&window, video)?.pooled);
            let mut tokens = Vec::new();
            for u in video.utterances.iter().filter(|u| u.start_s < window.end_s) {
                if tokens.len() + u.tokens.len() > sampler.max_text_tokens {
                    break;
                }
                tokens.extend_from_slice(&u.tokens);
            }
            if !tokens.is_empty() {
                parts.push(model.encode_text(&tokens)?.pooled);
            }
        }
    }
    if parts.is_empty() {
        // No transcript: the video embedding of the opening window stands alone.
        let f = span_features(&window, video, model.config.max_video_tokens)?;
        parts.push(model.encode_features(&f)?.pooled);
    }
    let mut acc = vec![0.0f32; d];
    for z in &parts {
        accumulate(&mut acc, z);
    }
    let inv = 1.0 / parts.len() as f32;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(GlobalFeature {
        video_id: video.video_id.clone(),
        z: Tensor::new(vec![d], acc)?,
    })
}

/// One global feature per video: the mean of the video and text embeddings
/// of its sampled clip pairs. Each video draws from its own stream keyed by
/// `(seed, epoch, video)`, so results do not depend on thread count.
pub fn global_features(
    model: &Model,
    corpus: &Corpus,
    sampler: &SamplerConfig,
    config: &RetrievalConfig,
    seed: u64,
    epoch: u64,
) -> Result<Vec<GlobalFeature>> {
    (0..corpus.len())
        .into_par_iter()
        .map(|vi| {
            let mut r = rng::stream(seed, &[tag::FEATURES, epoch, vi as u64]);
            global_feature(model, corpus, vi, sampler, config, &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(rows: &[Vec<f32>]) -> DenseIndex {
        DenseIndex::from_matrix(&Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn stored_row_ranks_first() {
        let ix = idx(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(ix.knn(&[1.0, 0.0, 0.0], 1).unwrap(), vec![1]);
    }

    #[test]
    fn ties_by_ascending_id() {
        let ix = idx(&[vec![1.0], vec![2.0], vec![1.0], vec![2.0]]);
        assert_eq!(ix.knn(&[1.0], 4).unwrap(), vec![1, 3, 0, 2]);
        assert!(ix.knn(&[1.0], 5).is_err());
    }

    #[test]
    fn random_clusters_ignore_embeddings() {
        let a = idx(&(0..20).map(|i| vec![i as f32, 1.0]).collect::<Vec<_>>());
        let b = idx(&(0..20).map(|i| vec![1.0, -(i as f32)]).collect::<Vec<_>>());
        let cfg = RetrievalConfig {
            k: 4,
            mode: RetrievalMode::Random,
            ..RetrievalConfig::default()
        };
        let ca = build_clusters(20, Some(&a), &cfg, &mut rng::stream(5, &[])).unwrap();
        let cb = build_clusters(20, Some(&b), &cfg, &mut rng::stream(5, &[])).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca.len(), 5);
    }

    #[test]
    fn k_equal_to_corpus_gives_one_full_cluster() {
        let ix = idx(&(0..6).map(|i| vec![i as f32]).collect::<Vec<_>>());
        let cfg = RetrievalConfig {
            k: 6,
            ..RetrievalConfig::default()
        };
        let c = build_clusters(6, Some(&ix), &cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(c.len(), 1);
        let mut m = c[0].members.clone();
        m.sort();
        assert_eq!(m, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn sampled_members_lie_in_neighborhood() {
        let rows: Vec<Vec<f32>> = (0..40).map(|i| vec![(i as f32 * 0.37).sin(), (i as f32 * 1.3).cos()]).collect();
        let ix = idx(&rows);
        let cfg = RetrievalConfig {
            k: 5,
            ..RetrievalConfig::default()
        };
        for c in build_clusters(40, Some(&ix), &cfg, &mut rng::stream(2, &[])).unwrap() {
            let hood = ix.knn(ix.row(c.seed_video), 10).unwrap();
            assert_eq!(c.members.len(), 5);
            assert!(c.members.iter().all(|m| hood.contains(m)));
            let mut d = c.members.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 5);
        }
    }

    #[test]
    fn modes_parse() {
        assert_eq!("direct_k".parse::<RetrievalMode>().unwrap(), RetrievalMode::DirectK);
        assert_eq!(serde_json::to_string(&RetrievalMode::Sample2k).unwrap(), "\"sample_2k\"");
        assert!("knn".parse::<RetrievalMode>().is_err());
    }
}
