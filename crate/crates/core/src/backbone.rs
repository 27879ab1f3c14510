//! A small frozen Transformer encoder with per-layer plugin slots and a
//! trainable classification head.
//!
//! Each encoder layer is post-norm: self-attention with residual and layer
//! normalization, then a GELU feed-forward block with residual and layer
//! normalization. The plugin (memory layer, adapter, or two adapters) is
//! applied to every position after that final normalization, and its output
//! feeds the next layer.
//!
//! The backward pass propagates gradients through the frozen blocks to the
//! inputs only; frozen weights never receive gradients. Gradients below the
//! first layer's plugin are not computed.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterParams, AdapterTrace};
use crate::error::{Error, Result};
use crate::layers::{gelu, gelu_grad, LayerNorm, Linear, NormCache};
use crate::memory::{ForwardTrace, SpartanConfig, SpartanLayerParams};
use crate::numerics::{axpy, dot, softmax_backward, softmax_in_place, Matrix, Rng, Vector};
use crate::tensors::{join, ParamSet};

/// Id reserved for the sequence-start token every encoding begins with.
pub const BOS_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    FirstToken,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_hash_buckets: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d: 128,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            vocab_hash_buckets: 2048,
            max_seq_len: 64,
            pooling: Pooling::FirstToken,
        }
    }
}

impl BackboneConfig {
    /// Base-size shapes (d = 768, 12 layers, 12 heads) for throughput
    /// measurements.
    pub fn base_shapes() -> Self {
        BackboneConfig {
            d: 768,
            layers: 12,
            heads: 12,
            ffn_dim: 3072,
            vocab_hash_buckets: 1024,
            max_seq_len: 128,
            pooling: Pooling::FirstToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d ({}) must be a positive multiple of heads ({})",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("ffn_dim and max_seq_len must be >= 1".into()));
        }
        if self.vocab_hash_buckets < 2 {
            return Err(Error::Config("vocab_hash_buckets must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Hash-bucketed tokenizer: lower-cased alphanumeric runs and individual
/// punctuation characters, each mapped by FNV-1a into
/// `1..vocab_hash_buckets`. The output always starts with [`BOS_ID`] and is
/// truncated to `max_seq_len` ids.
pub fn tokenize(text: &str, cfg: &BackboneConfig) -> Vec<usize> {
    let mut ids = vec![BOS_ID];
    let push = |token: &str, ids: &mut Vec<usize>| {
        if ids.len() < cfg.max_seq_len {
            ids.push(1 + (fnv1a(token.as_bytes()) % (cfg.vocab_hash_buckets as u64 - 1)) as usize);
        }
    };
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                push(&word, &mut ids);
                word.clear();
            }
            if !ch.is_whitespace() {
                push(ch.encode_utf8(&mut [0; 4]), &mut ids);
            }
        }
    }
    if !word.is_empty() {
        push(&word, &mut ids);
    }
    ids.truncate(cfg.max_seq_len);
    ids
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// What sits after each encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PluginConfig {
    None,
    Spartan(SpartanConfig),
    Adapter(AdapterConfig),
    /// Two stacked adapters per layer.
    #[serde(rename = "adapter-x2")]
    AdapterX2(AdapterConfig),
}

impl PluginConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PluginConfig::None => "none",
            PluginConfig::Spartan(_) => "spartan",
            PluginConfig::Adapter(_) => "adapter",
            PluginConfig::AdapterX2(_) => "adapter-x2",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let plugin_d = match self {
            PluginConfig::None => return Ok(()),
            PluginConfig::Spartan(c) => {
                c.validate()?;
                c.d
            }
            PluginConfig::Adapter(c) | PluginConfig::AdapterX2(c) => {
                c.validate()?;
                c.d
            }
        };
        if plugin_d != d {
            return Err(Error::Config(format!(
                "plugin dimensionality d = {plugin_d} does not match backbone d = {d}"
            )));
        }
        Ok(())
    }

    /// Trainable scalars this plugin adds to one encoder layer.
    pub fn params_per_layer(&self) -> usize {
        match self {
            PluginConfig::None => 0,
            PluginConfig::Spartan(c) => c.num_params(),
            PluginConfig::Adapter(c) => c.num_params(),
            PluginConfig::AdapterX2(c) => 2 * c.num_params(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub plugin: PluginConfig,
    pub num_labels: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.plugin.validate(self.backbone.d)?;
        if self.num_labels == 0 {
            return Err(Error::Config("num_labels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        let sd = 1.0 / (d as f64).sqrt();
        EncoderLayer {
            query: Linear::gaussian(d, d, sd, rng),
            key: Linear::gaussian(d, d, sd, rng),
            value: Linear::gaussian(d, d, sd, rng),
            output: Linear::gaussian(d, d, sd, rng),
            attn_norm: LayerNorm::identity(d),
            ffn_in: Linear::gaussian(d, cfg.ffn_dim, sd, rng),
            ffn_out: Linear::gaussian(cfg.ffn_dim, d, 1.0 / (cfg.ffn_dim as f64).sqrt(), rng),
            ffn_norm: LayerNorm::identity(d),
        }
    }

    fn zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.d;
        let norm = || LayerNorm {
            gain: Vector::zeros(d),
            bias: Vector::zeros(d),
        };
        EncoderLayer {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            attn_norm: norm(),
            ffn_in: Linear::zeros(d, cfg.ffn_dim),
            ffn_out: Linear::zeros(cfg.ffn_dim, d),
            ffn_norm: norm(),
        }
    }
}

impl ParamSet for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
    }
}

/// Frozen encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub embed_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

impl BackboneParams {
    pub fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        BackboneParams {
            token_embedding: Matrix::gaussian(cfg.vocab_hash_buckets, cfg.d, 1.0, rng),
            position_embedding: Matrix::gaussian(cfg.max_seq_len, cfg.d, 0.5, rng),
            embed_norm: LayerNorm::identity(cfg.d),
            layers: (0..cfg.layers).map(|_| EncoderLayer::random(cfg, rng)).collect(),
        }
    }

    pub fn zeros(cfg: &BackboneConfig) -> Self {
        BackboneParams {
            token_embedding: Matrix::zeros(cfg.vocab_hash_buckets, cfg.d),
            position_embedding: Matrix::zeros(cfg.max_seq_len, cfg.d),
            embed_norm: LayerNorm {
                gain: Vector::zeros(cfg.d),
                bias: Vector::zeros(cfg.d),
            },
            layers: (0..cfg.layers).map(|_| EncoderLayer::zeros(cfg)).collect(),
        }
    }
}

impl ParamSet for BackboneParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.token_embedding.visit(&join(prefix, "token_embedding"), f);
        self.position_embedding.visit(&join(prefix, "position_embedding"), f);
        self.embed_norm.visit(&join(prefix, "embed_norm"), f);
        self.layers.visit(&join(prefix, "layers"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.token_embedding.visit_mut(&join(prefix, "token_embedding"), f);
        self.position_embedding.visit_mut(&join(prefix, "position_embedding"), f);
        self.embed_norm.visit_mut(&join(prefix, "embed_norm"), f);
        self.layers.visit_mut(&join(prefix, "layers"), f);
    }
}

/// Per-layer plugin parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Plugin {
    None,
    Spartan(Vec<SpartanLayerParams>),
    /// Outer index: encoder layer. Inner: adapters applied in order.
    Adapters(Vec<Vec<AdapterParams>>),
}

impl Plugin {
    pub fn init(cfg: &PluginConfig, layers: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match cfg {
            PluginConfig::None => Plugin::None,
            PluginConfig::Spartan(c) => {
                Plugin::Spartan((0..layers).map(|_| SpartanLayerParams::init(*c, rng)).collect::<Result<_>>()?)
            }
            PluginConfig::Adapter(c) | PluginConfig::AdapterX2(c) => {
                let stack = if matches!(cfg, PluginConfig::AdapterX2(_)) { 2 } else { 1 };
                Plugin::Adapters(
                    (0..layers)
                        .map(|_| (0..stack).map(|_| AdapterParams::init(*c, rng)).collect::<Result<_>>())
                        .collect::<Result<_>>()?,
                )
            }
        })
    }

    /// Same structure, all zeros. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn spartan_layers(&self) -> Option<&[SpartanLayerParams]> {
        match self {
            Plugin::Spartan(l) => Some(l),
            _ => None,
        }
    }

    /// Inference-only application at `layer`, in place.
    pub fn apply_in_place(&self, layer: usize, x: &mut [f64]) {
        match self {
            Plugin::None => {}
            Plugin::Spartan(layers) => {
                let input = x.to_vec();
                layers[layer].infer_into(&input, x);
            }
            Plugin::Adapters(layers) => {
                for a in &layers[layer] {
                    let input = x.to_vec();
                    a.infer_into(&input, x);
                }
            }
        }
    }
}

impl ParamSet for Plugin {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Plugin::None => {}
            Plugin::Spartan(l) => l.visit(prefix, f),
            Plugin::Adapters(l) => l.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        match self {
            Plugin::None => {}
            Plugin::Spartan(l) => l.visit_mut(prefix, f),
            Plugin::Adapters(l) => l.visit_mut(prefix, f),
        }
    }
}

/// Everything that fine-tuning updates: the classification head and the
/// plugin. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    /// `num_labels × d` affine map.
    pub head: Linear,
    pub plugin: Plugin,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl ParamSet for Trainable {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.head.visit(&join(prefix, "head"), f);
        self.plugin.visit(&join(prefix, "plugin"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.head.visit_mut(&join(prefix, "head"), f);
        self.plugin.visit_mut(&join(prefix, "plugin"), f);
    }
}

#[derive(Debug, Clone)]
pub enum PluginTrace {
    None,
    Spartan(Vec<ForwardTrace>),
    /// Per position, one trace per stacked adapter.
    Adapters(Vec<Vec<AdapterTrace>>),
}

/// Activations of one encoder layer for a whole sequence.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<Vector>,
    pub q: Vec<Vector>,
    pub k: Vec<Vector>,
    pub v: Vec<Vector>,
    /// `[head][query position]` → attention over key positions.
    pub attn: Vec<Vec<Vector>>,
    pub context: Vec<Vector>,
    pub attn_norm: Vec<NormCache>,
    pub hidden: Vec<Vector>,
    pub ffn_pre: Vec<Vector>,
    pub ffn_act: Vec<Vector>,
    pub ffn_norm: Vec<NormCache>,
    /// Input to the plugin.
    pub block_output: Vec<Vector>,
    pub plugin: PluginTrace,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub layers: Vec<LayerCache>,
    pub output: Vec<Vector>,
}

/// Frozen encoder plus trainable head and plugin.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub backbone: BackboneParams,
    pub trainable: Trainable,
}

impl Model {
    /// Random frozen backbone, freshly initialized plugin, zero head.
    /// Backbone and plugin draw from separate streams of `seed`, so the
    /// backbone is the same whatever plugin is chosen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut root = Rng::seed_from_u64(seed);
        let mut backbone_rng = root.fork(0);
        let mut plugin_rng = root.fork(1);
        let backbone = BackboneParams::random(&config.backbone, &mut backbone_rng);
        let plugin = Plugin::init(&config.plugin, config.backbone.layers, &mut plugin_rng)?;
        Ok(Model {
            config,
            backbone,
            trainable: Trainable {
                head: Linear::zeros(config.backbone.d, config.num_labels),
                plugin,
            },
        })
    }

    /// Every tensor allocated and zero. Used when loading checkpoints.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        m.fill(0.0);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the plugin with a freshly initialized one of another kind,
    /// keeping the backbone. The head is reset to zero.
    pub fn with_plugin(&self, plugin: PluginConfig, seed: u64) -> Result<Self> {
        let config = ModelConfig { plugin, ..self.config };
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed).fork(1);
        Ok(Model {
            config,
            backbone: self.backbone.clone(),
            trainable: Trainable {
                head: Linear::zeros(config.backbone.d, config.num_labels),
                plugin: Plugin::init(&plugin, config.backbone.layers, &mut rng)?,
            },
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize(text, &self.config.backbone)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let cfg = &self.config.backbone;
        if ids.is_empty() || ids.len() > cfg.max_seq_len {
            return Err(Error::shape("encode", format!("1..={} ids", cfg.max_seq_len), ids.len()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_hash_buckets) {
            return Err(Error::Parameter(format!(
                "token id {bad} outside vocabulary of {} buckets",
                cfg.vocab_hash_buckets
            )));
        }
        Ok(())
    }

    fn embed(&self, ids: &[usize]) -> Vec<Vector> {
        ids.iter()
            .enumerate()
            .map(|(t, &id)| {
                let mut e = Vector::from(self.backbone.token_embedding.row(id));
                axpy(1.0, self.backbone.position_embedding.row(t), &mut e);
                self.backbone.embed_norm.forward(&e).0
            })
            .collect()
    }

    /// Final hidden states, one per position.
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<Vector>> {
        self.check_ids(ids)?;
        let mut xs = self.embed(ids);
        for l in 0..self.config.backbone.layers {
            xs = self.block_forward(l, &xs, None);
            for x in &mut xs {
                self.trainable.plugin.apply_in_place(l, x);
            }
        }
        Ok(xs)
    }

    /// Forward pass keeping every activation needed for backward.
    pub fn encode_traced(&self, ids: &[usize]) -> Result<EncodeCache> {
        self.check_ids(ids)?;
        let mut xs = self.embed(ids);
        let mut layers = Vec::with_capacity(self.config.backbone.layers);
        for l in 0..self.config.backbone.layers {
            let mut cache = LayerCache {
                input: xs.clone(),
                q: vec![],
                k: vec![],
                v: vec![],
                attn: vec![],
                context: vec![],
                attn_norm: vec![],
                hidden: vec![],
                ffn_pre: vec![],
                ffn_act: vec![],
                ffn_norm: vec![],
                block_output: vec![],
                plugin: PluginTrace::None,
            };
            let block = self.block_forward(l, &xs, Some(&mut cache));
            let (out, plugin) = match &self.trainable.plugin {
                Plugin::None => (block.clone(), PluginTrace::None),
                Plugin::Spartan(ps) => {
                    let (out, traces) = ps[l].forward_sequence(&block)?;
                    (out, PluginTrace::Spartan(traces))
                }
                Plugin::Adapters(stacks) => {
                    let mut outs = Vec::with_capacity(block.len());
                    let mut traces = Vec::with_capacity(block.len());
                    for x in &block {
                        let mut cur = x.clone();
                        let mut per = Vec::with_capacity(stacks[l].len());
                        for a in &stacks[l] {
                            let (y, t) = a.forward(&cur)?;
                            per.push(t);
                            cur = y;
                        }
                        outs.push(cur);
                        traces.push(per);
                    }
                    (outs, PluginTrace::Adapters(traces))
                }
            };
            cache.block_output = block;
            cache.plugin = plugin;
            layers.push(cache);
            xs = out;
        }
        Ok(EncodeCache { layers, output: xs })
    }

    /// Attention and feed-forward sub-blocks of layer `l` (no plugin).
    fn block_forward(&self, l: usize, xs: &[Vector], mut cache: Option<&mut LayerCache>) -> Vec<Vector> {
        let cfg = &self.config.backbone;
        let layer = &self.backbone.layers[l];
        let (t_len, heads, dh) = (xs.len(), cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let q: Vec<Vector> = xs.iter().map(|x| layer.query.forward(x)).collect();
        let k: Vec<Vector> = xs.iter().map(|x| layer.key.forward(x)).collect();
        let v: Vec<Vector> = xs.iter().map(|x| layer.value.forward(x)).collect();

        let mut context = vec![Vector::zeros(cfg.d); t_len];
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let mut per_query = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let mut scores: Vector = (0..t_len)
                    .map(|s| scale * dot(&q[t][span.clone()], &k[s][span.clone()]))
                    .collect::<Vec<_>>()
                    .into();
                softmax_in_place(&mut scores);
                let ctx = &mut context[t][span.clone()];
                for (s, &a) in scores.iter().enumerate() {
                    axpy(a, &v[s][span.clone()], ctx);
                }
                per_query.push(scores);
            }
            attn.push(per_query);
        }

        let mut attn_norm = Vec::with_capacity(t_len);
        let mut hidden = Vec::with_capacity(t_len);
        let mut ffn_pre = Vec::with_capacity(t_len);
        let mut ffn_act = Vec::with_capacity(t_len);
        let mut ffn_norm = Vec::with_capacity(t_len);
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut u = layer.output.forward(&context[t]);
            axpy(1.0, &xs[t], &mut u);
            let (h1, nc1) = layer.attn_norm.forward(&u);
            let pre = layer.ffn_in.forward(&h1);
            let act: Vector = pre.iter().map(|&z| gelu(z)).collect::<Vec<_>>().into();
            let mut s = layer.ffn_out.forward(&act);
            axpy(1.0, &h1, &mut s);
            let (h2, nc2) = layer.ffn_norm.forward(&s);
            out.push(h2);
            if cache.is_some() {
                attn_norm.push(nc1);
                hidden.push(h1);
                ffn_pre.push(pre);
                ffn_act.push(act);
                ffn_norm.push(nc2);
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.q = q;
            c.k = k;
            c.v = v;
            c.attn = attn;
            c.context = context;
            c.attn_norm = attn_norm;
            c.hidden = hidden;
            c.ffn_pre = ffn_pre;
            c.ffn_act = ffn_act;
            c.ffn_norm = ffn_norm;
        }
        out
    }

    /// Input gradients of layer `l`'s attention and feed-forward sub-blocks.
    fn block_backward(&self, l: usize, cache: &LayerCache, d_out: &[Vector]) -> Vec<Vector> {
        let cfg = &self.config.backbone;
        let layer = &self.backbone.layers[l];
        let (t_len, heads, dh, d) = (d_out.len(), cfg.heads, cfg.head_dim(), cfg.d);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut d_x = vec![Vector::zeros(d); t_len];
        let mut d_ctx = vec![Vector::zeros(d); t_len];
        for t in 0..t_len {
            // h2 = LN(h1 + ffn(h1))
            let d_s = layer.ffn_norm.backward(&cache.ffn_norm[t], &d_out[t], None);
            let mut d_act = vec![0.0; cfg.ffn_dim];
            layer.ffn_out.backward_input(&d_s, &mut d_act);
            for (g, &z) in d_act.iter_mut().zip(cache.ffn_pre[t].iter()) {
                *g *= gelu_grad(z);
            }
            let mut d_h1 = d_s;
            layer.ffn_in.backward_input(&d_act, &mut d_h1);
            // h1 = LN(x + W_o ctx)
            let d_u = layer.attn_norm.backward(&cache.attn_norm[t], &d_h1, None);
            layer.output.backward_input(&d_u, &mut d_ctx[t]);
            axpy(1.0, &d_u, &mut d_x[t]);
        }

        let mut d_q = vec![Vector::zeros(d); t_len];
        let mut d_k = vec![Vector::zeros(d); t_len];
        let mut d_v = vec![Vector::zeros(d); t_len];
        let mut d_a = vec![0.0; t_len];
        let mut d_scores = vec![0.0; t_len];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            for t in 0..t_len {
                let a = &cache.attn[h][t];
                let g = &d_ctx[t][span.clone()];
                for s in 0..t_len {
                    d_a[s] = dot(g, &cache.v[s][span.clone()]);
                    axpy(a[s], g, &mut d_v[s][span.clone()]);
                }
                softmax_backward(a, &d_a, &mut d_scores);
                for s in 0..t_len {
                    let ds = scale * d_scores[s];
                    axpy(ds, &cache.k[s][span.clone()], &mut d_q[t][span.clone()]);
                    axpy(ds, &cache.q[t][span.clone()], &mut d_k[s][span.clone()]);
                }
            }
        }
        for t in 0..t_len {
            layer.query.backward_input(&d_q[t], &mut d_x[t]);
            layer.key.backward_input(&d_k[t], &mut d_x[t]);
            layer.value.backward_input(&d_v[t], &mut d_x[t]);
        }
        d_x
    }

    pub fn pool(&self, hidden: &[Vector]) -> Vector {
        match self.config.backbone.pooling {
            Pooling::FirstToken => hidden[0].clone(),
            Pooling::Mean => {
                let mut p = Vector::zeros(self.config.backbone.d);
                for h in hidden {
                    axpy(1.0 / hidden.len() as f64, h, &mut p);
                }
                p
            }
        }
    }

    /// Index of the position the classifier reads, if it reads a single one.
    pub fn pooled_position(&self) -> Option<usize> {
        match self.config.backbone.pooling {
            Pooling::FirstToken => Some(0),
            Pooling::Mean => None,
        }
    }

    /// Head logits for a pooled vector.
    pub fn classify(&self, pooled: &[f64]) -> Result<Vector> {
        if pooled.len() != self.config.backbone.d {
            return Err(Error::shape("classify", self.config.backbone.d, pooled.len()));
        }
        Ok(self.trainable.head.forward(pooled))
    }

    pub fn logits(&self, ids: &[usize]) -> Result<Vector> {
        let hidden = self.encode(ids)?;
        self.classify(&self.pool(&hidden))
    }

    pub fn predict(&self, ids: &[usize]) -> Result<usize> {
        Ok(crate::numerics::argmax(&self.logits(ids)?))
    }

    /// Gradients of the trainable parameters for a loss whose gradient with
    /// respect to the logits is `d_logits`. Adds into `grads`.
    pub fn backward(&self, cache: &EncodeCache, d_logits: &[f64], grads: &mut Trainable) -> Result<()> {
        let cfg = &self.config.backbone;
        if d_logits.len() != self.config.num_labels {
            return Err(Error::shape("backward", self.config.num_labels, d_logits.len()));
        }
        let pooled = self.pool(&cache.output);
        self.trainable.head.backward_params(&pooled, d_logits, &mut grads.head);
        let mut d_pooled = Vector::zeros(cfg.d);
        self.trainable.head.backward_input(d_logits, &mut d_pooled);

        let t_len = cache.output.len();
        let mut d_hidden: Vec<Option<Vector>> = match cfg.pooling {
            Pooling::FirstToken => {
                let mut v = vec![None; t_len];
                v[0] = Some(d_pooled);
                v
            }
            Pooling::Mean => {
                let scaled: Vector = d_pooled.iter().map(|g| g / t_len as f64).collect::<Vec<_>>().into();
                vec![Some(scaled); t_len]
            }
        };

        for l in (0..cfg.layers).rev() {
            let lc = &cache.layers[l];
            let mut d_block: Vec<Vector> = Vec::with_capacity(t_len);
            for (t, g) in d_hidden.iter().enumerate() {
                let Some(g) = g else {
                    d_block.push(Vector::zeros(cfg.d));
                    continue;
                };
                let d = match (&self.trainable.plugin, &mut grads.plugin, &lc.plugin) {
                    (Plugin::None, _, _) => g.clone(),
                    (Plugin::Spartan(ps), Plugin::Spartan(gs), PluginTrace::Spartan(tr)) => {
                        let mut d_in = Vector::zeros(cfg.d);
                        ps[l].backward_accumulate(&tr[t], g, &mut gs[l], &mut d_in)?;
                        d_in
                    }
                    (Plugin::Adapters(ps), Plugin::Adapters(gs), PluginTrace::Adapters(tr)) => {
                        let mut upstream = g.clone();
                        for (j, a) in ps[l].iter().enumerate().rev() {
                            let mut d_in = Vector::zeros(cfg.d);
                            a.backward_accumulate(&tr[t][j], &upstream, &mut gs[l][j], &mut d_in)?;
                            upstream = d_in;
                        }
                        upstream
                    }
                    _ => return Err(Error::Consistency("plugin, gradients and trace disagree".into())),
                };
                d_block.push(d);
            }
            if l == 0 || matches!(self.trainable.plugin, Plugin::None) {
                break;
            }
            d_hidden = self.block_backward(l, lc, &d_block).into_iter().map(Some).collect();
        }
        Ok(())
    }
}

impl ParamSet for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.trainable.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.trainable.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};

    fn tiny(plugin: PluginConfig, pooling: Pooling) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                d: 8,
                layers: 2,
                heads: 2,
                ffn_dim: 12,
                vocab_hash_buckets: 50,
                max_seq_len: 6,
                pooling,
            },
            plugin,
            num_labels: 3,
        }
    }

    fn spartan8() -> PluginConfig {
        PluginConfig::Spartan(SpartanConfig {
            d: 8,
            num_parents: 4,
            children_per_parent: 2,
            top_k: 2,
        })
    }

    /// Randomizes every trainable tensor so gradients are non-trivial.
    fn perturb(model: &mut Model, seed: u64) {
        let mut rng = Rng::seed_from_u64(seed);
        model.trainable.visit_mut("", &mut |_, _, data| {
            for v in data.iter_mut() {
                *v += 0.5 * rng.normal();
            }
        });
    }

    #[test]
    fn tokenize_examples() {
        let cfg = BackboneConfig::default();
        assert_eq!(tokenize("", &cfg), vec![BOS_ID]);
        assert_eq!(tokenize("Hello, world!", &cfg), tokenize("hello , WORLD !", &cfg));
        assert_eq!(tokenize("a b c", &cfg).len(), 4);
        let short = BackboneConfig { max_seq_len: 3, ..cfg };
        assert_eq!(tokenize("a b c d e", &short).len(), 3);
        assert!(tokenize("x y z", &cfg).iter().all(|&i| i < cfg.vocab_hash_buckets));
    }

    #[test]
    fn tokenize_single_word_changes_rarely_collide() {
        let cfg = BackboneConfig {
            vocab_hash_buckets: 64,
            ..BackboneConfig::default()
        };
        let trials = 4000;
        let collisions = (0..trials)
            .filter(|i| tokenize(&format!("w{i}"), &cfg) == tokenize(&format!("v{i}"), &cfg))
            .count();
        // Expected rate 1/63; allow generous sampling slack.
        let rate = collisions as f64 / trials as f64;
        assert!(rate < 3.0 / 63.0, "collision rate {rate}");
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(PluginConfig::None, Pooling::FirstToken);
        c.backbone.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(spartan8(), Pooling::FirstToken);
        c.plugin = PluginConfig::Spartan(SpartanConfig::with_dim(16));
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("16") && msg.contains("8"), "{msg}");
    }

    #[test]
    fn identity_at_init_and_determinism() {
        let none = Model::new(tiny(PluginConfig::None, Pooling::FirstToken), 3).unwrap();
        let sp = none.with_plugin(spartan8(), 3).unwrap();
        let ids = [0, 5, 9, 2];
        assert_eq!(none.encode(&ids).unwrap(), sp.encode(&ids).unwrap());
        let again = Model::new(tiny(PluginConfig::None, Pooling::FirstToken), 3).unwrap();
        assert_eq!(none.encode(&ids).unwrap(), again.encode(&ids).unwrap());
        assert_eq!(sp.encode(&ids).unwrap(), sp.encode_traced(&ids).unwrap().output);
    }

    #[test]
    fn positions_matter() {
        let m = Model::new(tiny(PluginConfig::None, Pooling::FirstToken), 1).unwrap();
        assert_ne!(m.encode(&[0, 4, 7]).unwrap(), m.encode(&[0, 7, 4]).unwrap());
    }

    #[test]
    fn head_examples() {
        let mut m = Model::new(tiny(PluginConfig::None, Pooling::FirstToken), 1).unwrap();
        assert_eq!(m.classify(&[1.0; 8]).unwrap().as_slice(), &[0.0; 3]);
        m.trainable.head.weight = Matrix::gaussian(3, 8, 1.0, &mut Rng::seed_from_u64(2));
        m.trainable.head.bias = Vector::from([0.1, 0.2, 0.3]);
        let x = [0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 0.25];
        let got = m.classify(&x).unwrap();
        for j in 0..3 {
            let mut want = m.trainable.head.bias[j];
            for i in 0..8 {
                want += m.trainable.head.weight.get(j, i) * x[i];
            }
            assert!((got[j] - want).abs() < 1e-12);
        }
        assert!(m.classify(&[0.0; 4]).is_err());
    }

    #[test]
    fn rejects_bad_ids() {
        let m = Model::new(tiny(PluginConfig::None, Pooling::FirstToken), 1).unwrap();
        assert!(m.encode(&[]).is_err());
        assert!(m.encode(&[0, 50]).is_err());
        assert!(m.encode(&[0; 7]).is_err());
    }

    fn check_end_to_end_gradients(plugin: PluginConfig, pooling: Pooling) {
        let mut m = Model::new(tiny(plugin, pooling), 11).unwrap();
        perturb(&mut m, 12);
        let ids = [0, 3, 17, 41, 8];
        let r = [0.7, -1.3, 0.4];
        let cache = m.encode_traced(&ids).unwrap();
        let mut grads = m.trainable.zeros_like();
        m.backward(&cache, &r, &mut grads).unwrap();

        let theta = m.trainable.flatten();
        let fd = central_difference(&theta, 1e-5, |th| {
            let mut q = m.clone();
            let mut off = 0;
            q.trainable.visit_mut("", &mut |_, _, data| {
                data.copy_from_slice(&th[off..off + data.len()]);
                off += data.len();
            });
            dot(&q.logits(&ids).unwrap(), &r)
        });
        let err = max_relative_error(&grads.flatten(), &fd);
        assert!(err <= 1e-6, "{} max relative error {err}", plugin.name());
    }

    #[test]
    fn end_to_end_gradients_spartan() {
        check_end_to_end_gradients(spartan8(), Pooling::FirstToken);
        check_end_to_end_gradients(spartan8(), Pooling::Mean);
    }

    #[test]
    fn end_to_end_gradients_adapters() {
        let a = AdapterConfig { d: 8, bottleneck: 3 };
        check_end_to_end_gradients(PluginConfig::Adapter(a), Pooling::FirstToken);
        check_end_to_end_gradients(PluginConfig::AdapterX2(a), Pooling::Mean);
    }

    #[test]
    fn end_to_end_gradients_head_only() {
        check_end_to_end_gradients(PluginConfig::None, Pooling::FirstToken);
    }

    #[test]
    fn trainable_names() {
        let m = Model::new(tiny(PluginConfig::AdapterX2(AdapterConfig { d: 8, bottleneck: 3 }), Pooling::Mean), 0).unwrap();
        let names: Vec<String> = m.trainable.shapes("").into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"head.weight".to_string()));
        assert!(names.contains(&"plugin.1.1.down.weight".to_string()));
    }
}
