//! Encoder structure: frozen features, weight sharing, pooling, limits.

mod common;

use vclip::encoder::{EncoderConfig, Model, Pooling};
use vclip::numerics::{Graph, Tensor};
use vclip::sampler::VideoSpan;

fn cfg() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers_video: 1,
        n_layers_text: 1,
        n_heads: 2,
        d_ff: 16,
        d_feat: 4,
        vocab_size: 20,
        init_std: 0.2,
        ..EncoderConfig::default()
    }
}

fn feats(n: usize) -> Tensor<f64> {
    Tensor::new(vec![n, 4], (0..n * 4).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
}

fn nudge(m: &Model<f64>, name: &str) -> Model<f64> {
    let mut named = m.named();
    let t = &mut named.iter_mut().find(|(n, _)| n == name).unwrap().1;
    for x in t.data_mut() {
        *x += 0.5;
    }
    Model::from_named(m.config.clone(), named).unwrap()
}

#[test]
fn no_gradient_reaches_video_features() {
    let m = Model::<f64>::init(cfg(), 0).unwrap();
    let mut g = Graph::new();
    let v = m.bind(&mut g);
    let f = g.param(feats(5));
    let e = m.video_forward(&mut g, &v, f).unwrap();
    let s = g.sum(e.pooled);
    let grads = g.backward(s).unwrap();
    let gf = grads.get(f).map_or(0.0, |t| t.sum_sq());
    assert_eq!(gf, 0.0);
    assert!(grads.get(v[0]).is_some_and(|t| t.sum_sq() > 0.0));
}

#[test]
fn separate_towers_do_not_interact() {
    let m = Model::<f64>::init(cfg(), 1).unwrap();
    let text = m.encode_text(&[1, 2, 3]).unwrap().pooled;
    let video = m.encode_features(&feats(4)).unwrap().pooled;
    let mv = nudge(&m, "video.layer0.attn.wq");
    assert_eq!(mv.encode_text(&[1, 2, 3]).unwrap().pooled, text);
    assert_ne!(mv.encode_features(&feats(4)).unwrap().pooled, video);
    let mt = nudge(&m, "text.layer0.ff.w1");
    assert_eq!(mt.encode_features(&feats(4)).unwrap().pooled, video);
}

#[test]
fn shared_layers_feed_both_modalities() {
    let c = EncoderConfig {
        shared_encoder: true,
        ..cfg()
    };
    let m = Model::<f64>::init(c, 1).unwrap();
    assert!(m.names().iter().all(|n| !n.starts_with("video.layer") && !n.starts_with("text.layer")));
    assert!(m.n_weights() < Model::<f64>::init(cfg(), 1).unwrap().n_weights());
    let text = m.encode_text(&[1, 2, 3]).unwrap().pooled;
    let video = m.encode_features(&feats(4)).unwrap().pooled;
    let n = nudge(&m, "shared.layer0.attn.wq");
    assert_ne!(n.encode_text(&[1, 2, 3]).unwrap().pooled, text);
    assert_ne!(n.encode_features(&feats(4)).unwrap().pooled, video);
}

#[test]
fn pooling_modes_read_different_rows() {
    let avg = Model::<f64>::init(cfg(), 2).unwrap();
    let cls = Model::<f64>::from_named(
        EncoderConfig {
            pooling: Pooling::Cls,
            ..cfg()
        },
        avg.named(),
    )
    .unwrap();
    let ea = avg.encode_text(&[4, 5, 6, 7]).unwrap();
    let ec = cls.encode_text(&[4, 5, 6, 7]).unwrap();
    assert_eq!(ea.token_states, ec.token_states);
    assert_eq!(ec.pooled.data(), ec.token_states.row(0));
    let n = ea.token_states.rows();
    for j in 0..8 {
        let mean: f64 = (1..n - 1).map(|i| ea.token_states.get(i, j)).sum::<f64>() / (n - 2) as f64;
        assert!((ea.pooled.data()[j] - mean).abs() < 1e-12);
    }
}

#[test]
fn long_text_is_truncated_to_the_limit() {
    let m = Model::<f64>::init(cfg(), 3).unwrap();
    let long: Vec<u32> = (0..80).map(|i| i % 20).collect();
    let limit = m.config.max_text_tokens;
    assert_eq!(m.encode_text(&long).unwrap(), m.encode_text(&long[..limit]).unwrap());
    assert_eq!(m.encode_text(&long).unwrap().token_states.rows(), limit + 2);
    assert!(m.encode_text(&[]).is_err());
    assert!(m.encode_text(&[20]).is_err());
}

#[test]
fn video_input_limits() {
    let m = Model::<f64>::init(cfg(), 3).unwrap();
    assert!(m.encode_features(&feats(32)).is_ok());
    assert!(m.encode_features(&feats(33)).is_err());
    let wrong = Tensor::new(vec![3, 5], vec![0.0; 15]).unwrap();
    assert!(m.encode_features(&wrong).is_err());
}

#[test]
fn init_is_seeded_and_from_named_checks_layout() {
    let a = Model::<f32>::init(cfg(), 9).unwrap();
    assert_eq!(a, Model::<f32>::init(cfg(), 9).unwrap());
    assert_ne!(a.params(), Model::<f32>::init(cfg(), 10).unwrap().params());
    let mut named = a.named();
    named.swap(0, 1);
    assert!(Model::from_named(cfg(), named).is_err());
    let mut short = a.named();
    short.pop();
    assert!(Model::from_named(cfg(), short).is_err());
}

#[test]
fn video_spans_are_tied_to_their_video() {
    let g = common::small_corpus(0, 3);
    let c = common::tiny_config(&g).encoder;
    let m = Model::<f32>::init(c, 0).unwrap();
    let v0 = g.corpus.video(0);
    let span = VideoSpan {
        video_id: v0.video_id.clone(),
        start_s: 2.0,
        end_s: 9.5,
    };
    let e = m.encode_video(&span, v0).unwrap();
    assert_eq!(e.token_states.rows(), 8 + 2);
    assert!(m.encode_video(&span, g.corpus.video(1)).is_err());
}
