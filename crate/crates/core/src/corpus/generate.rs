use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::numerics::Tensor;
use crate::rng::{self, tag};

use super::{Corpus, CorpusConfig, GeneratedCorpus, GroundTruth, Utterance, VideoRecord, VideoTruth};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "vid",
            Split::Eval => "eval",
        }
    }
}

/// Generates the training split.
pub fn generate(config: &CorpusConfig) -> Result<GeneratedCorpus> {
    generate_split(config, Split::Train)
}

/// Generates one split. Both splits share topic prototypes and vocabulary.
pub fn generate_split(config: &CorpusConfig, split: Split) -> Result<GeneratedCorpus> {
    config.validate()?;
    let protos = prototypes(config);
    let n = match split {
        Split::Train => config.n_videos,
        Split::Eval => config.n_eval_videos,
    };
    let mut videos = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(config.seed, &[tag::VIDEO, split.id(), i as u64]);
        let id = format!("{}-{i:04}", split.prefix());
        let (video, truth) = generate_video(config, &protos, id, &mut r);
        videos.push(video);
        truths.push(truth);
    }
    Ok(GeneratedCorpus {
        corpus: Corpus {
            d_feat: config.d_feat,
            vocab_size: config.vocab_size,
            videos,
            config: Some(config.clone()),
        },
        truth: GroundTruth {
            n_topics: config.n_topics,
            videos: truths,
        },
    })
}

struct Prototypes {
    topics: Vec<Vec<f64>>,
    /// `[topic][variant]` unit-variance offsets.
    variants: Vec<Vec<Vec<f64>>>,
}

fn gaussian(d: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(&mut *r)).collect()
}

fn prototypes(config: &CorpusConfig) -> Prototypes {
    let mut r = rng::stream(config.seed, &[tag::PROTOTYPES]);
    let topics = (0..config.n_topics).map(|_| gaussian(config.d_feat, &mut r)).collect();
    let variants = (0..config.n_topics)
        .map(|_| {
            (0..config.variants_per_topic)
                .map(|_| gaussian(config.d_feat, &mut r))
                .collect()
        })
        .collect();
    Prototypes { topics, variants }
}

/// Fixed short list of topic `k`'s common words, used as its text label.
pub fn topic_label_tokens(config: &CorpusConfig, k: usize, len: usize) -> Vec<u32> {
    let mut r = rng::stream(config.seed, &[tag::LABELS, k as u64]);
    let vocab = config.common_vocab(k);
    let n = vocab.len();
    let len = len.min(n);
    rand::seq::index::sample(&mut r, n, len)
        .into_iter()
        .map(|j| vocab.start + j as u32)
        .collect()
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

fn generate_video(
    config: &CorpusConfig,
    protos: &Prototypes,
    video_id: String,
    r: &mut impl Rng,
) -> (VideoRecord, VideoTruth) {
    let duration = round_ms(config.mean_duration_s * r.random_range(0.5..=1.5)).max(1.0);
    let n_sec = duration.floor() as usize;

    let theme_size = config.topics_per_video.min(config.n_topics);
    let theme: Vec<usize> = rand::seq::index::sample(r, config.n_topics, theme_size).into_vec();
    let mut variant_of = vec![0usize; config.n_topics];
    for &k in &theme {
        variant_of[k] = r.random_range(0..config.variants_per_topic);
    }

    // Topic segments on the integer-second grid.
    let mut segments: Vec<(usize, usize, usize)> = Vec::new();
    let mut t = 0;
    while t < n_sec {
        let len = r.random_range(config.segment_min_s..=config.segment_max_s);
        let end = (t + len).min(n_sec);
        let prev = segments.last().map(|s| s.2);
        let topic = loop {
            let k = theme[r.random_range(0..theme.len())];
            if theme.len() == 1 || Some(k) != prev {
                break k;
            }
        };
        segments.push((t, end, topic));
        t = end;
    }

    let mut topic_track = vec![0; n_sec];
    for &(a, b, k) in &segments {
        topic_track[a..b].fill(k);
    }

    let variant_track: Vec<usize> = topic_track.iter().map(|&k| variant_of[k]).collect();

    // Feature noise splits into a fixed variant offset and fresh noise, with
    // total per-coordinate variance `feature_noise^2`.
    let fixed = config.feature_noise * config.variant_share.sqrt();
    let fresh = config.feature_noise * (1.0 - config.variant_share).sqrt();
    let mut data = Vec::with_capacity(n_sec * config.d_feat);
    for &k in &topic_track {
        let offset = &protos.variants[k][variant_of[k]];
        for (&p, &o) in protos.topics[k].iter().zip(offset) {
            let e: f64 = StandardNormal.sample(r);
            data.push((p + fixed * o + fresh * e) as f32);
        }
    }
    let features = Tensor::new(vec![n_sec, config.d_feat], data).expect("consistent dims");

    let mut utterances = Vec::new();
    let mut utterance_topics = Vec::new();
    let lag = config.speech_lag_s;
    for &(a, b, k) in &segments {
        let ws = (a as f64 - lag).max(0.0);
        let we = b as f64 - lag;
        let common = config.common_vocab(k);
        let own = config.variant_vocab(k, variant_of[k]);
        let mut cursor = ws + r.random_range(0.0..=config.gap_max_s);
        loop {
            let mut dur = r.random_range(config.utterance_min_s..=config.utterance_max_s);
            if cursor + dur > we {
                dur = we - cursor;
            }
            if dur < 0.5 * config.utterance_min_s {
                break;
            }
            let gap = r.random_range(config.gap_min_s..=config.gap_max_s);
            let start = round_ms(cursor);
            let end = round_ms(cursor + dur).min(we);
            if end <= start {
                break;
            }
            let n_tok = (config.utterance_rate * (dur + gap)).round().max(1.0) as usize;
            let tokens = (0..n_tok)
                .map(|_| {
                    if !own.is_empty() && r.random_bool(config.variant_word_prob) {
                        r.random_range(own.clone())
                    } else {
                        r.random_range(common.clone())
                    }
                })
                .collect();
            utterances.push(Utterance {
                start_s: start,
                end_s: end,
                tokens,
            });
            utterance_topics.push(k);
            cursor = end + gap;
        }
    }

    (
        VideoRecord {
            video_id: video_id.clone(),
            duration_s: duration,
            features,
            utterances,
        },
        VideoTruth {
            video_id,
            topic_track,
            variant_track,
            utterance_topics,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_videos: 12,
            n_eval_videos: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn degenerate_single_topic_noiseless() {
        let cfg = CorpusConfig {
            n_topics: 1,
            feature_noise: 0.0,
            speech_lag_s: 0.0,
            ..small()
        };
        let g = generate(&cfg).unwrap();
        let first = g.corpus.videos[0].features.row(0).to_vec();
        for v in &g.corpus.videos {
            for s in 0..v.n_seconds() {
                assert_eq!(v.features.row(s), first.as_slice());
            }
            for u in &v.utterances {
                assert!(u.tokens.iter().all(|&t| cfg.topic_vocab(0).contains(&t)));
            }
        }
    }

    #[test]
    fn speech_precedes_its_segment_by_the_lag() {
        let cfg = small();
        let g = generate(&cfg).unwrap();
        let lag = cfg.speech_lag_s;
        for (v, truth) in g.corpus.videos.iter().zip(&g.truth.videos) {
            for (u, &k) in v.utterances.iter().zip(&truth.utterance_topics) {
                let a = (u.start_s + lag).floor() as usize;
                let b = ((u.end_s + lag).ceil() as usize).min(v.n_seconds());
                assert!(truth.topic_track[a..b].iter().all(|&t| t == k));
                assert!(u.tokens.iter().all(|t| cfg.topic_vocab(k).contains(t)));
            }
        }
    }

    #[test]
    fn utterances_sorted_disjoint_within_video() {
        let g = generate(&small()).unwrap();
        for v in &g.corpus.videos {
            assert_eq!(v.n_seconds(), v.duration_s.floor() as usize);
            for w in v.utterances.windows(2) {
                assert!(w[0].end_s <= w[1].start_s);
            }
            for u in &v.utterances {
                assert!(u.start_s >= 0.0 && u.start_s < u.end_s && u.end_s <= v.duration_s);
            }
        }
    }

    #[test]
    fn noiseless_features_equal_per_topic() {
        let cfg = CorpusConfig {
            feature_noise: 0.0,
            ..small()
        };
        let g = generate(&cfg).unwrap();
        let mut seen: Vec<Option<Vec<f32>>> = vec![None; cfg.n_topics];
        for (v, t) in g.corpus.videos.iter().zip(&g.truth.videos) {
            for (s, &k) in t.topic_track.iter().enumerate() {
                let row = v.features.row(s).to_vec();
                match &seen[k] {
                    Some(p) => assert_eq!(p, &row),
                    None => seen[k] = Some(row),
                }
            }
        }
    }

    #[test]
    fn rejects_too_many_topics_for_vocab() {
        let cfg = CorpusConfig {
            n_topics: 9,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn eval_split_shares_prototypes() {
        let cfg = CorpusConfig {
            feature_noise: 0.0,
            ..small()
        };
        let tr = generate(&cfg).unwrap();
        let ev = generate_split(&cfg, Split::Eval).unwrap();
        assert!(ev.corpus.videos[0].video_id.starts_with("eval-"));
        let k = ev.truth.videos[0].topic_track[0];
        let proto_ev = ev.corpus.videos[0].features.row(0);
        for (v, t) in tr.corpus.videos.iter().zip(&tr.truth.videos) {
            if let Some(s) = t.topic_track.iter().position(|&x| x == k) {
                assert_eq!(v.features.row(s), proto_ev);
                return;
            }
        }
    }

    #[test]
    fn label_tokens_distinct_and_in_partition() {
        let cfg = small();
        let l = topic_label_tokens(&cfg, 3, 6);
        assert_eq!(l.len(), 6);
        let mut d = l.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 6);
        assert!(l.iter().all(|t| cfg.topic_vocab(3).contains(t)));
        assert_eq!(l, topic_label_tokens(&cfg, 3, 6));
    }
}
