//! On-disk corpus layout:
//!
//! - `manifest.json`: magic, version, feature width, vocabulary size, video
//!   ids with durations and token counts, generator config echo.
//! - `features.bin`: for each video in manifest order, `T x d_feat`
//!   little-endian f32, row-major. No header.
//! - `transcript.jsonl`: one utterance per line, grouped by video in manifest
//!   order and sorted by start time within a video.
//! - `topics.jsonl`: planted ground truth, evaluation only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{
    Corpus, CorpusConfig, GroundTruth, Utterance, VideoRecord, VideoTruth, CORPUS_MAGIC,
    CORPUS_VERSION,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const TOPICS_FILE: &str = "topics.jsonl";

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    d_feat: usize,
    vocab_size: usize,
    videos: Vec<ManifestVideo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<CorpusConfig>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVideo {
    video_id: String,
    duration_s: f64,
    n_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct TranscriptLine {
    video_id: String,
    start_s: f64,
    end_s: f64,
    tokens: Vec<u32>,
}

fn manifest_bytes(corpus: &Corpus) -> Vec<u8> {
    let m = Manifest {
        magic: CORPUS_MAGIC.into(),
        version: CORPUS_VERSION,
        d_feat: corpus.d_feat,
        vocab_size: corpus.vocab_size,
        videos: corpus
            .videos
            .iter()
            .map(|v| ManifestVideo {
                video_id: v.video_id.clone(),
                duration_s: v.duration_s,
                n_tokens: v.n_seconds(),
            })
            .collect(),
        config: corpus.config.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&m).expect("manifest serializes");
    out.push(b'\n');
    out
}

fn features_bytes(corpus: &Corpus) -> Vec<u8> {
    let total: usize = corpus.videos.iter().map(|v| v.features.numel()).sum();
    let mut out = Vec::with_capacity(total * 4);
    for v in &corpus.videos {
        for x in v.features.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn transcript_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for v in &corpus.videos {
        for u in &v.utterances {
            let line = TranscriptLine {
                video_id: v.video_id.clone(),
                start_s: u.start_s,
                end_s: u.end_s,
                tokens: u.tokens.clone(),
            };
            serde_json::to_writer(&mut out, &line).expect("transcript serializes");
            out.push(b'\n');
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(MANIFEST_FILE), &manifest_bytes(corpus))?;
    write(&dir.join(FEATURES_FILE), &features_bytes(corpus))?;
    write(&dir.join(TRANSCRIPT_FILE), &transcript_bytes(corpus))
}

pub fn save_ground_truth(truth: &GroundTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for t in &truth.videos {
        serde_json::to_writer(&mut out, t).expect("truth serializes");
        out.push(b'\n');
    }
    write(&dir.join(TOPICS_FILE), &out)
}

/// SHA-256 over the corpus files as [`save`] would write them.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update(manifest_bytes(corpus));
    h.update(features_bytes(corpus));
    h.update(transcript_bytes(corpus));
    crate::hex(&h.finalize())
}

fn line_col_offset(bytes: &[u8], line: usize, col: usize) -> u64 {
    let mut cur = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if cur == line {
            return (i + col.saturating_sub(1)) as u64;
        }
        if b == b'\n' {
            cur += 1;
        }
    }
    bytes.len() as u64
}

fn find(bytes: &[u8], needle: &str) -> u64 {
    bytes
        .windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .unwrap_or(0) as u64
}

pub fn load(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join(MANIFEST_FILE);
    let mbytes = read(&mpath)?;
    let manifest: Manifest = serde_json::from_slice(&mbytes).map_err(|e| {
        Error::format(&mpath, line_col_offset(&mbytes, e.line(), e.column()), e.to_string())
    })?;
    if manifest.magic != CORPUS_MAGIC {
        return Err(Error::format(
            &mpath,
            find(&mbytes, "\"magic\""),
            format!("bad magic {:?}, expected {CORPUS_MAGIC:?}", manifest.magic),
        ));
    }
    if manifest.version != CORPUS_VERSION {
        return Err(Error::format(
            &mpath,
            find(&mbytes, "\"version\""),
            format!(
                "unsupported version {}, expected {CORPUS_VERSION}",
                manifest.version
            ),
        ));
    }
    let d = manifest.d_feat;
    if d == 0 {
        return Err(Error::format(&mpath, find(&mbytes, "\"d_feat\""), "d_feat is zero"));
    }
    for v in &manifest.videos {
        if !(v.duration_s >= 1.0) || v.n_tokens != v.duration_s.floor() as usize {
            return Err(Error::format(
                &mpath,
                find(&mbytes, &format!("\"{}\"", v.video_id)),
                format!(
                    "video {} has {} tokens for duration {}s",
                    v.video_id, v.n_tokens, v.duration_s
                ),
            ));
        }
    }

    let fpath = dir.join(FEATURES_FILE);
    let fbytes = read(&fpath)?;
    let mut offset = 0usize;
    let mut features = Vec::with_capacity(manifest.videos.len());
    for v in &manifest.videos {
        let n = v.n_tokens * d;
        let end = offset + n * 4;
        if end > fbytes.len() {
            return Err(Error::format(
                &fpath,
                fbytes.len() as u64,
                format!(
                    "truncated: video {} needs bytes {offset}..{end}, file has {}",
                    v.video_id,
                    fbytes.len()
                ),
            ));
        }
        let data = fbytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        features.push(Tensor::new(vec![v.n_tokens, d], data)?);
        offset = end;
    }
    if offset != fbytes.len() {
        return Err(Error::format(
            &fpath,
            offset as u64,
            format!(
                "{} trailing bytes after the last video",
                fbytes.len() - offset
            ),
        ));
    }

    let tpath = dir.join(TRANSCRIPT_FILE);
    let tbytes = read(&tpath)?;
    let mut utterances: Vec<Vec<Utterance>> = vec![Vec::new(); manifest.videos.len()];
    let mut cur_video = 0usize;
    let mut line_start = 0usize;
    for line in tbytes.split(|&b| b == b'\n') {
        let this_offset = line_start as u64;
        line_start += line.len() + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let rec: TranscriptLine = serde_json::from_slice(line)
            .map_err(|e| Error::format(&tpath, this_offset, e.to_string()))?;
        let bad = |m: String| Error::format(&tpath, this_offset, m);
        while cur_video < manifest.videos.len() && manifest.videos[cur_video].video_id != rec.video_id {
            cur_video += 1;
        }
        let Some(mv) = manifest.videos.get(cur_video) else {
            return Err(bad(format!(
                "utterance for {} is unknown or out of manifest order",
                rec.video_id
            )));
        };
        if !(rec.start_s >= 0.0 && rec.start_s < rec.end_s && rec.end_s <= mv.duration_s) {
            return Err(bad(format!(
                "utterance [{}, {}] outside video of {}s",
                rec.start_s, rec.end_s, mv.duration_s
            )));
        }
        if let Some(prev) = utterances[cur_video].last() {
            if rec.start_s < prev.end_s {
                return Err(bad("utterances overlap or are out of order".into()));
            }
        }
        if let Some(t) = rec.tokens.iter().find(|&&t| t as usize >= manifest.vocab_size) {
            return Err(bad(format!("token {t} outside vocabulary")));
        }
        utterances[cur_video].push(Utterance {
            start_s: rec.start_s,
            end_s: rec.end_s,
            tokens: rec.tokens,
        });
    }

    let videos = manifest
        .videos
        .into_iter()
        .zip(features)
        .zip(utterances)
        .map(|((mv, features), utterances)| VideoRecord {
            video_id: mv.video_id,
            duration_s: mv.duration_s,
            features,
            utterances,
        })
        .collect();
    Ok(Corpus {
        d_feat: d,
        vocab_size: manifest.vocab_size,
        videos,
        config: manifest.config,
    })
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(TOPICS_FILE);
    let bytes = read(&path)?;
    let mut videos = Vec::new();
    let mut pos = 0usize;
    for line in bytes.split(|&b| b == b'\n') {
        let off = pos as u64;
        pos += line.len() + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let t: VideoTruth =
            serde_json::from_slice(line).map_err(|e| Error::format(&path, off, e.to_string()))?;
        videos.push(t);
    }
    let n_topics = videos
        .iter()
        .flat_map(|v| v.topic_track.iter().chain(&v.utterance_topics))
        .max()
        .map_or(0, |m| m + 1);
    Ok(GroundTruth { n_topics, videos })
}
