//! Video and text transformer encoders.
//!
//! Video: per-second feature tokens (stop-gradient) -> GELU MLP -> [CLS] x
//! [SEP] + positions -> pre-LN transformer -> pooling.
//! Text: embedding lookup -> [CLS] x [SEP] + positions -> pre-LN transformer
//! -> pooling. Pooling averages content tokens (specials excluded) or takes
//! the [CLS] state.

mod checkpoint;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::VideoRecord;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::rng::{self, tag};
use crate::sampler::VideoSpan;

pub use checkpoint::{decode_u64, encode_u64, Checkpoint, NamedTensor, CKPT_MAGIC, CKPT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Avg,
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Self::Avg),
            "cls" => Ok(Self::Cls),
            _ => Err(Error::config(format!("unknown pooling {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers_video: usize,
    pub n_layers_text: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward sublayers.
    pub d_ff: usize,
    pub d_feat: usize,
    pub vocab_size: usize,
    /// Content tokens per video clip, one per second.
    pub max_video_tokens: usize,
    /// Content tokens per text clip, before [CLS] and [SEP].
    pub max_text_tokens: usize,
    pub max_positions: usize,
    /// Video and text use the same transformer layers.
    pub shared_encoder: bool,
    pub pooling: Pooling,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_layers_video: 2,
            n_layers_text: 2,
            n_heads: 4,
            d_ff: 384,
            d_feat: 64,
            vocab_size: 256,
            max_video_tokens: 32,
            max_text_tokens: 61,
            max_positions: 64,
            shared_encoder: false,
            pooling: Pooling::Avg,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("encoder config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.d_feat == 0 || self.vocab_size == 0 {
            return fail("d_ff, d_feat and vocab_size must be positive".into());
        }
        if self.max_video_tokens == 0 || self.max_text_tokens == 0 {
            return fail("token limits must be positive".into());
        }
        let longest = self.max_video_tokens.max(self.max_text_tokens) + 2;
        if self.max_positions < longest {
            return fail(format!(
                "max_positions {} below the longest sequence {longest}",
                self.max_positions
            ));
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    video_w: usize,
    video_b: usize,
    video_special: usize,
    video_pos: usize,
    text_embed: usize,
    text_special: usize,
    text_pos: usize,
    video_layers: Vec<LayerIdx>,
    text_layers: Vec<LayerIdx>,
}

struct ParamPlan {
    names: Vec<String>,
    dims: Vec<Vec<usize>>,
    init: Vec<Init>,
}

impl ParamPlan {
    fn add(&mut self, name: String, dims: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.dims.push(dims);
        self.init.push(init);
        self.names.len() - 1
    }

    fn layer(&mut self, prefix: &str, d: usize, ff: usize) -> LayerIdx {
        use Init::*;
        let mut t = |n: &str, dims: Vec<usize>, init| self.add(format!("{prefix}.{n}"), dims, init);
        LayerIdx {
            ln1_g: t("ln1.g", vec![d], Ones),
            ln1_b: t("ln1.b", vec![d], Zeros),
            wq: t("attn.wq", vec![d, d], Normal),
            bq: t("attn.bq", vec![d], Zeros),
            wk: t("attn.wk", vec![d, d], Normal),
            bk: t("attn.bk", vec![d], Zeros),
            wv: t("attn.wv", vec![d, d], Normal),
            bv: t("attn.bv", vec![d], Zeros),
            wo: t("attn.wo", vec![d, d], Normal),
            bo: t("attn.bo", vec![d], Zeros),
            ln2_g: t("ln2.g", vec![d], Ones),
            ln2_b: t("ln2.b", vec![d], Zeros),
            w1: t("ff.w1", vec![d, ff], Normal),
            b1: t("ff.b1", vec![ff], Zeros),
            w2: t("ff.w2", vec![ff, d], Normal),
            b2: t("ff.b2", vec![d], Zeros),
        }
    }
}

fn layout(c: &EncoderConfig) -> (Layout, ParamPlan) {
    use Init::*;
    let d = c.d_model;
    let mut s = ParamPlan {
        names: Vec::new(),
        dims: Vec::new(),
        init: Vec::new(),
    };
    let video_w = s.add("video.mlp.w".into(), vec![c.d_feat, d], Normal);
    let video_b = s.add("video.mlp.b".into(), vec![d], Zeros);
    let video_special = s.add("video.special".into(), vec![2, d], Normal);
    let video_pos = s.add("video.pos".into(), vec![c.max_positions, d], Normal);
    let text_embed = s.add("text.embed".into(), vec![c.vocab_size, d], Normal);
    let text_special = s.add("text.special".into(), vec![2, d], Normal);
    let text_pos = s.add("text.pos".into(), vec![c.max_positions, d], Normal);
    let (video_layers, text_layers) = if c.shared_encoder {
        let n = c.n_layers_video.max(c.n_layers_text);
        let shared: Vec<LayerIdx> = (0..n)
            .map(|i| s.layer(&format!("shared.layer{i}"), d, c.d_ff))
            .collect();
        (
            shared[..c.n_layers_video].to_vec(),
            shared[..c.n_layers_text].to_vec(),
        )
    } else {
        let v = (0..c.n_layers_video)
            .map(|i| s.layer(&format!("video.layer{i}"), d, c.d_ff))
            .collect();
        let t = (0..c.n_layers_text)
            .map(|i| s.layer(&format!("text.layer{i}"), d, c.d_ff))
            .collect();
        (v, t)
    };
    (
        Layout {
            video_w,
            video_b,
            video_special,
            video_pos,
            text_embed,
            text_special,
            text_pos,
            video_layers,
            text_layers,
        },
        s,
    )
}

/// Token states `[seq, d_model]` (specials included) and the pooled `[d_model]`
/// clip embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbedding<T: Scalar = f32> {
    pub token_states: Tensor<T>,
    pub pooled: Tensor<T>,
}

/// Output nodes of one encoder pass inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n + 2, d_model]`, row 0 is [CLS] and the last row is [SEP].
    pub states: Var,
    /// `[1, d_model]`.
    pub pooled: Var,
    pub n_content: usize,
}

/// Encoder configuration plus all trainable tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Seconds `[a, b)` of the feature tokens a span covers: `floor(start)` to
/// `ceil(end)`, at least one token, at most `max_tokens`.
pub fn video_token_range(start_s: f64, end_s: f64, n_seconds: usize, max_tokens: usize) -> (usize, usize) {
    let last = n_seconds.saturating_sub(1);
    let a = (start_s.max(0.0).floor() as usize).min(last);
    let b = (end_s.ceil().max(0.0) as usize).min(n_seconds).min(a + max_tokens);
    (a, b.max(a + 1))
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: normal(0, init_std) weights and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, plan) = layout(&config);
        let mut r = rng::stream(seed, &[tag::INIT]);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let params = plan
            .dims
            .iter()
            .zip(&plan.init)
            .map(|(dims, init)| {
                let n: usize = dims.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal => (0..n).map(|_| T::from_f64(normal.sample(&mut r))).collect(),
                };
                Tensor::new(dims.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            names: plan.names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, which must match the layout
    /// implied by `config` exactly (names, order and dims).
    pub fn from_named(config: EncoderConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, plan) = layout(&config);
        if tensors.len() != plan.names.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                plan.names.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, t), (want, dims)) in tensors.into_iter().zip(plan.names.iter().zip(&plan.dims)) {
            if &name != want || t.dims() != dims.as_slice() {
                return Err(Error::config(format!(
                    "parameter {name} {:?} does not match expected {want} {dims:?}",
                    t.dims()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            names: plan.names,
            params,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn n_weights(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf of `g`, in order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    fn block(&self, g: &mut Graph<T>, v: &[Var], x: Var, l: &LayerIdx) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let h = g.layer_norm(x, v[l.ln1_g], v[l.ln1_b])?;
        let proj = |g: &mut Graph<T>, w: usize, b: usize| -> Result<Var> {
            let y = g.matmul(h, v[w])?;
            g.add_row(y, v[b])
        };
        let q = proj(g, l.wq, l.bq)?;
        let k = proj(g, l.wk, l.bk)?;
        let val = proj(g, l.wv, l.bv)?;
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = g.slice_cols(q, i * dh, dh)?;
            let kh = g.slice_cols(k, i * dh, dh)?;
            let vh = g.slice_cols(val, i * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let att = g.softmax_rows(scores, (dh as f64).sqrt())?;
            outs.push(g.matmul(att, vh)?);
        }
        let a = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let a = g.matmul(a, v[l.wo])?;
        let a = g.add_row(a, v[l.bo])?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x, v[l.ln2_g], v[l.ln2_b])?;
        let f = g.matmul(h, v[l.w1])?;
        let f = g.add_row(f, v[l.b1])?;
        let f = g.gelu(f);
        let f = g.matmul(f, v[l.w2])?;
        let f = g.add_row(f, v[l.b2])?;
        g.add(x, f)
    }

    /// Wraps `content` in specials, adds positions, runs `layers`, pools.
    fn sequence(
        &self,
        g: &mut Graph<T>,
        v: &[Var],
        content: Var,
        special: usize,
        pos: usize,
        layers: &[LayerIdx],
    ) -> Result<Encoded> {
        let n = g.value(content).rows();
        let cls = g.slice_rows(v[special], 0, 1)?;
        let sep = g.slice_rows(v[special], 1, 1)?;
        let x = g.concat_rows(&[cls, content, sep])?;
        let p = g.slice_rows(v[pos], 0, n + 2)?;
        let mut x = g.add(x, p)?;
        for l in layers {
            x = self.block(g, v, x, l)?;
        }
        let pooled = match self.config.pooling {
            Pooling::Avg => {
                let c = g.slice_rows(x, 1, n)?;
                g.mean_rows(c)?
            }
            Pooling::Cls => g.slice_rows(x, 0, 1)?,
        };
        Ok(Encoded {
            states: x,
            pooled,
            n_content: n,
        })
    }

    /// Encodes per-second feature tokens `[n, d_feat]` held in node `features`.
    /// Gradients never reach `features`.
    pub fn video_forward(&self, g: &mut Graph<T>, v: &[Var], features: Var) -> Result<Encoded> {
        let f = g.value(features);
        if f.dims().len() != 2 || f.cols() != self.config.d_feat || f.rows() == 0 {
            return Err(Error::shape(format!(
                "video features must be [n >= 1, {}], got {:?}",
                self.config.d_feat,
                f.dims()
            )));
        }
        if f.rows() > self.config.max_video_tokens {
            return Err(Error::shape(format!(
                "{} video tokens exceed the limit of {}",
                f.rows(),
                self.config.max_video_tokens
            )));
        }
        let lo = &self.layout;
        let f = g.stop_gradient(features);
        let x = g.matmul(f, v[lo.video_w])?;
        let x = g.add_row(x, v[lo.video_b])?;
        let x = g.gelu(x);
        self.sequence(g, v, x, lo.video_special, lo.video_pos, &lo.video_layers)
    }

    /// Encodes word ids; sequences longer than `max_text_tokens` are truncated.
    pub fn text_forward(&self, g: &mut Graph<T>, v: &[Var], tokens: &[u32]) -> Result<Encoded> {
        if tokens.is_empty() {
            return Err(Error::input("cannot encode an empty token sequence"));
        }
        let ids: Vec<usize> = tokens
            .iter()
            .take(self.config.max_text_tokens)
            .map(|&t| t as usize)
            .collect();
        let lo = &self.layout;
        let x = g.embedding(v[lo.text_embed], &ids)?;
        self.sequence(g, v, x, lo.text_special, lo.text_pos, &lo.text_layers)
    }

    fn run<F>(&self, f: F) -> Result<ClipEmbedding<T>>
    where
        F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Encoded>,
    {
        let mut g = Graph::new();
        let v: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let e = f(&mut g, &v)?;
        let d = self.config.d_model;
        Ok(ClipEmbedding {
            token_states: g.value(e.states).clone(),
            pooled: g.value(e.pooled).reshape(vec![d])?,
        })
    }

    /// Encodes a contiguous run of feature rows `[n, d_feat]`.
    pub fn encode_features(&self, features: &Tensor<T>) -> Result<ClipEmbedding<T>> {
        self.run(|g, v| {
            let f = g.constant(features.clone());
            self.video_forward(g, v, f)
        })
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<ClipEmbedding<T>> {
        self.run(|g, v| self.text_forward(g, v, tokens))
    }

    /// Label texts go through the text encoder unchanged.
    pub fn encode_label(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        Ok(self.encode_text(tokens)?.pooled)
    }
}

/// Feature rows covered by `span`, cast to `T`.
pub fn span_features<T: Scalar>(span: &VideoSpan, video: &VideoRecord, max_tokens: usize) -> Result<Tensor<T>> {
    if span.video_id != video.video_id {
        return Err(Error::input(format!(
            "span of {} applied to video {}",
            span.video_id, video.video_id
        )));
    }
    let (a, b) = video_token_range(span.start_s, span.end_s, video.n_seconds(), max_tokens);
    feature_rows(video, a, b)
}

/// Rows `[a, b)` of a video's feature tokens, cast to `T`.
pub fn feature_rows<T: Scalar>(video: &VideoRecord, a: usize, b: usize) -> Result<Tensor<T>> {
    let d = video.features.cols();
    if a >= b || b > video.n_seconds() {
        return Err(Error::input(format!(
            "seconds [{a}, {b}) outside video {} of {} s",
            video.video_id,
            video.n_seconds()
        )));
    }
    let data = video.features.data()[a * d..b * d]
        .iter()
        .map(|&x| T::from_f64(x as f64))
        .collect();
    Tensor::new(vec![b - a, d], data)
}

impl Model<f32> {
    pub fn encode_video(&self, span: &VideoSpan, video: &VideoRecord) -> Result<ClipEmbedding> {
        let f = span_features(span, video, self.config.max_video_tokens)?;
        self.encode_features(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers_video: 1,
            n_layers_text: 1,
            n_heads: 2,
            d_ff: 16,
            d_feat: 4,
            vocab_size: 20,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn token_range_examples() {
        assert_eq!(video_token_range(9.0, 15.0, 60, 32), (9, 15));
        assert_eq!(video_token_range(9.3, 15.2, 60, 32), (9, 16));
        assert_eq!(video_token_range(3.2, 3.7, 60, 32), (3, 4));
        assert_eq!(video_token_range(0.0, 40.0, 60, 32), (0, 32));
        assert_eq!(video_token_range(59.5, 60.0, 59, 32), (58, 59));
    }

    #[test]
    fn sequence_lengths_include_specials() {
        let m = Model::<f32>::init(tiny(), 0).unwrap();
        let f = Tensor::full(&[6, 4], 0.5f32);
        assert_eq!(m.encode_features(&f).unwrap().token_states.dims(), &[8, 8]);
        assert_eq!(m.encode_text(&[1; 8]).unwrap().token_states.dims(), &[10, 8]);
        assert_eq!(m.encode_text(&[1; 100]).unwrap().token_states.dims(), &[63, 8]);
    }

    #[test]
    fn avg_pool_is_mean_of_content_states() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        let e = m.encode_text(&[3, 4, 5, 6]).unwrap();
        for j in 0..8 {
            let mean = (1..5).map(|i| e.token_states.get(i, j)).sum::<f64>() / 4.0;
            assert!((mean - e.pooled.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_pool_is_first_state() {
        let cfg = EncoderConfig {
            pooling: Pooling::Cls,
            ..tiny()
        };
        let m = Model::<f32>::init(cfg, 1).unwrap();
        let e = m.encode_text(&[3, 4, 5]).unwrap();
        assert_eq!(e.pooled.data(), e.token_states.row(0));
    }

    #[test]
    fn out_of_vocab_is_input_error() {
        let m = Model::<f32>::init(tiny(), 0).unwrap();
        assert!(matches!(m.encode_text(&[20]), Err(Error::Input(_))));
    }

    #[test]
    fn shared_layers_have_one_name() {
        let cfg = EncoderConfig {
            shared_encoder: true,
            ..tiny()
        };
        let m = Model::<f32>::init(cfg, 0).unwrap();
        assert!(m.param("shared.layer0.attn.wq").is_some());
        assert!(m.param("video.layer0.attn.wq").is_none());
        let sep = Model::<f32>::init(tiny(), 0).unwrap();
        assert!(sep.names().len() > m.names().len());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(Model::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn from_named_round_trip_and_mismatch() {
        let m = Model::<f32>::init(tiny(), 4).unwrap();
        let back = Model::from_named(tiny(), m.named()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.named();
        bad.swap(0, 1);
        assert!(Model::from_named(tiny(), bad).is_err());
    }
}
