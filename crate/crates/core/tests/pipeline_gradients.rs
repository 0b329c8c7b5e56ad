//! Encoder plus contrastive loss, differentiated end to end.

mod common;

use rand::Rng;
use vclip::encoder::{span_features, EncoderConfig, Model};
use vclip::numerics::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use vclip::objective::{info_nce_graph, ObjectiveConfig};
use vclip::retrieval::VideoCluster;
use vclip::rng;
use vclip::sampler::{assemble_batch, ClipPair, SamplerConfig};
use vclip::trainer::batch_gradients;
use vclip::Result;

fn tiny(shared: bool) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers_video: 1,
        n_layers_text: 1,
        n_heads: 2,
        d_ff: 16,
        d_feat: 4,
        vocab_size: 20,
        shared_encoder: shared,
        // large enough that no gradient hides under the finite-difference noise
        init_std: 0.3,
        ..EncoderConfig::default()
    }
}

struct Pair {
    features: Tensor<f64>,
    tokens: Vec<u32>,
}

fn pairs(seed: u64, n: usize) -> Vec<Pair> {
    let mut r = rng::stream(seed, &[]);
    (0..n)
        .map(|_| {
            let len = r.random_range(2..6);
            let data = (0..len * 4).map(|_| r.random_range(-1.0..1.0)).collect();
            Pair {
                features: Tensor::new(vec![len, 4], data).unwrap(),
                tokens: (0..r.random_range(2..7)).map(|_| r.random_range(0..20)).collect(),
            }
        })
        .collect()
}

/// Loss of a whole batch in one graph, with the model's tensors at `v`.
fn batch_loss(model: &Model<f64>, g: &mut Graph<f64>, v: &[Var], batch: &[Pair], obj: &ObjectiveConfig) -> Result<Var> {
    let mut zv = Vec::new();
    let mut zt = Vec::new();
    for p in batch {
        let f = g.constant(p.features.clone());
        zv.push(model.video_forward(g, v, f)?.pooled);
        zt.push(model.text_forward(g, v, &p.tokens)?.pooled);
    }
    let zv = g.concat_rows(&zv)?;
    let zt = g.concat_rows(&zt)?;
    Ok(info_nce_graph(g, zv, zt, obj)?.total)
}

fn check(shared: bool, obj: ObjectiveConfig, seed: u64) {
    let model = Model::<f64>::init(tiny(shared), seed).unwrap();
    let batch = pairs(seed, 4);
    let opts = GradCheckOptions {
        coords_per_tensor: usize::MAX,
        ..GradCheckOptions::default()
    };
    let start = std::time::Instant::now();
    let rep = grad_check(|g, v| batch_loss(&model, g, v, &batch, &obj), model.params(), &opts).unwrap();
    assert_eq!(rep.coords_checked, model.n_weights());
    assert!(
        rep.max_rel_error < 1e-4,
        "rel err {} at {:?} ({})",
        rep.max_rel_error,
        rep.worst.map(|(t, _)| &model.names()[t]),
        if shared { "shared" } else { "separate" }
    );
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn separate_encoders_pass_finite_differences() {
    for seed in 0..3 {
        check(false, ObjectiveConfig::default(), seed);
    }
}

#[test]
fn shared_encoder_passes_finite_differences() {
    check(true, ObjectiveConfig::default(), 7);
}

#[test]
fn temperature_and_normalization_pass_finite_differences() {
    check(
        false,
        ObjectiveConfig {
            temperature: 0.7,
            normalize: true,
        },
        3,
    );
}

/// The trainer splits the batch into per-pair graphs and seeds each with its
/// rows of the loss gradient. That must agree with one big graph.
#[test]
fn per_pair_decomposition_matches_one_graph() {
    let g = common::small_corpus(6, 12);
    let cfg = common::tiny_config(&g);
    let model = Model::<f32>::init(cfg.encoder.clone(), 1).unwrap();
    let sampler = SamplerConfig {
        pairs_per_video: 3,
        ..SamplerConfig::default()
    };
    let cluster = VideoCluster {
        seed_video: 0,
        members: (0..6).collect(),
    };
    let batch: Vec<ClipPair> = assemble_batch(&cluster, &g.corpus, &sampler, &mut rng::stream(1, &[])).unwrap();
    let obj = ObjectiveConfig::default();
    let (rep, grads) = batch_gradients(&model, &g.corpus, &batch, &obj).unwrap();

    let m64: Model<f64> = model.cast();
    let full: Vec<Pair> = batch
        .iter()
        .map(|p| Pair {
            features: span_features(&p.video, g.corpus.video(p.video_index), cfg.encoder.max_video_tokens).unwrap(),
            tokens: p.text.tokens.clone(),
        })
        .collect();
    let mut graph = Graph::new();
    let vars = m64.bind(&mut graph);
    let loss = batch_loss(&m64, &mut graph, &vars, &full, &obj).unwrap();
    assert!((graph.value(loss).data()[0] - rep.total).abs() < 1e-4);
    let want = graph.backward(loss).unwrap();
    for (i, name) in model.names().iter().enumerate() {
        let w = want.get(vars[i]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; grads[i].numel()]);
        let scale = w.iter().fold(1e-6f64, |m, x| m.max(x.abs()));
        for (a, b) in grads[i].data().iter().zip(&w) {
            assert!(((*a as f64) - b).abs() / scale < 1e-3, "{name}: {a} vs {b}");
        }
    }
}
