//! Pair sampling over a generated corpus.

mod common;

use vclip::retrieval::VideoCluster;
use vclip::rng;
use vclip::sampler::{assemble_batch, sample_pair, OverlapMode, SamplerConfig};

#[test]
fn every_pair_overlaps_over_many_samples() {
    let g = common::small_corpus(11, 40);
    let cfg = SamplerConfig::default();
    let mut r = rng::stream(11, &[1]);
    let mut n = 0;
    while n < 100_000 {
        let vi = n % g.corpus.len();
        let p = sample_pair(&g.corpus, vi, &cfg, &mut r).unwrap();
        assert!(p.overlaps(), "pair {n}: video {:?} text {:?}", p.video, (p.text.start_s, p.text.end_s));
        let (v, dur) = (g.corpus.video(vi), p.video.duration());
        assert!(p.video.start_s >= 0.0 && p.video.end_s <= v.duration_s);
        if v.duration_s >= cfg.max_video_s {
            assert!(dur >= cfg.min_video_s - 1e-9 && dur <= cfg.max_video_s + 1e-9, "duration {dur}");
        } else {
            assert!(dur <= v.duration_s + 1e-9);
        }
        assert!(!p.text.tokens.is_empty());
        n += 1;
    }
}

#[test]
fn video_durations_are_uniform() {
    // chi-square goodness of fit, 20 equal bins, alpha 0.01
    const BINS: usize = 20;
    const CRITICAL_19_DF: f64 = 36.191;
    let g = common::small_corpus(5, 40);
    let cfg = SamplerConfig::default();
    let long: Vec<usize> = (0..g.corpus.len())
        .filter(|&i| g.corpus.video(i).duration_s >= cfg.max_video_s)
        .collect();
    assert!(long.len() > 10);
    let mut r = rng::stream(5, &[2]);
    let mut counts = [0usize; BINS];
    let n = 20_000;
    for s in 0..n {
        let p = sample_pair(&g.corpus, long[s % long.len()], &cfg, &mut r).unwrap();
        let u = (p.video.duration() - cfg.min_video_s) / (cfg.max_video_s - cfg.min_video_s);
        counts[((u * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let expected = n as f64 / BINS as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CRITICAL_19_DF, "chi-square {chi2:.2} over {counts:?}");
}

#[test]
fn exact_aligned_copies_text_timestamps() {
    let g = common::small_corpus(2, 10);
    let cfg = SamplerConfig {
        overlap_mode: OverlapMode::ExactAligned,
        ..SamplerConfig::default()
    };
    let mut r = rng::stream(2, &[3]);
    for i in 0..1000 {
        let p = sample_pair(&g.corpus, i % 10, &cfg, &mut r).unwrap();
        assert_eq!((p.video.start_s, p.video.end_s), (p.text.start_s, p.text.end_s));
    }
}

#[test]
fn batch_size_is_members_times_pairs() {
    let g = common::small_corpus(4, 12);
    let cfg = SamplerConfig {
        pairs_per_video: 4,
        ..SamplerConfig::default()
    };
    let cluster = VideoCluster {
        seed_video: 3,
        members: (0..8).collect(),
    };
    let b = assemble_batch(&cluster, &g.corpus, &cfg, &mut rng::stream(0, &[])).unwrap();
    assert_eq!(b.len(), 32);
    for (j, p) in b.iter().enumerate() {
        assert_eq!(p.video_index, cluster.members[j / 4]);
    }
    let again = assemble_batch(&cluster, &g.corpus, &cfg, &mut rng::stream(0, &[])).unwrap();
    assert_eq!(b, again);
    let empty = VideoCluster {
        seed_video: 0,
        members: vec![],
    };
    assert!(assemble_batch(&empty, &g.corpus, &cfg, &mut rng::stream(0, &[])).is_err());
}
