//! Feature extractors, classifier head, domain discriminator and the global branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BnRecord, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{HaroodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Transformer,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Cnn => "cnn",
            Family::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capacity {
    #[default]
    Small,
    Mid,
    Large,
}

impl Capacity {
    pub fn multiplier(self) -> usize {
        match self {
            Capacity::Small => 1,
            Capacity::Mid => 2,
            Capacity::Large => 4,
        }
    }
}

pub const BASE_CNN_WIDTHS: [usize; 2] = [16, 32];
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    pub capacity: Capacity,
    /// `(channels, 1, length)` of one window.
    pub input_shape: [usize; 3],
    /// Base model width before capacity scaling.
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub use_positional_encoding: bool,
    /// Explicit conv widths; overrides the capacity-scaled defaults.
    pub cnn_widths: Option<[usize; 2]>,
    /// Explicit time-kernel length; overrides the length-based rule.
    pub kernel_size: Option<usize>,
    /// Token length for the transformer; 1 means one token per time step.
    pub patch_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            family: Family::Cnn,
            capacity: Capacity::Small,
            input_shape: [1, 1, 1],
            d_model: 16,
            heads: 2,
            encoder_blocks: 1,
            use_positional_encoding: true,
            cnn_widths: None,
            kernel_size: None,
            patch_len: 1,
        }
    }
}

impl BackboneConfig {
    pub fn cnn(input_shape: [usize; 3]) -> Self {
        BackboneConfig {
            input_shape,
            ..Default::default()
        }
    }

    pub fn transformer(input_shape: [usize; 3]) -> Self {
        BackboneConfig {
            family: Family::Transformer,
            input_shape,
            ..Default::default()
        }
    }

    pub fn with_capacity(mut self, capacity: Capacity) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn channels(&self) -> usize {
        self.input_shape[0]
    }

    pub fn length(&self) -> usize {
        self.input_shape[2]
    }

    pub fn widths(&self) -> [usize; 2] {
        self.cnn_widths.unwrap_or_else(|| {
            let m = self.capacity.multiplier();
            [BASE_CNN_WIDTHS[0] * m, BASE_CNN_WIDTHS[1] * m]
        })
    }

    pub fn model_width(&self) -> usize {
        self.d_model * self.capacity.multiplier()
    }

    /// Time-kernel length: 9 for windows up to 128 steps, 6 for longer ones,
    /// shrunk when needed so both conv+pool stages keep at least one step.
    pub fn kernel(&self) -> Result<usize> {
        let t = self.length();
        if t < 4 {
            return Err(HaroodError::Shape(format!(
                "window length {t} is too short for two pooling stages"
            )));
        }
        let mut k = self.kernel_size.unwrap_or(if t <= 128 { 9 } else { 6 });
        if k == 0 {
            return Err(HaroodError::Config("kernel_size must be positive".into()));
        }
        while k > 1 && cnn_out_len(t, k) == 0 {
            k -= 1;
        }
        Ok(k)
    }

    pub fn tokens(&self) -> usize {
        self.length() / self.patch_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, t] = self.input_shape;
        if c == 0 || h != 1 || t == 0 {
            return Err(HaroodError::Shape(format!(
                "input shape must be (C, 1, T) with C, T > 0, got {:?}",
                self.input_shape
            )));
        }
        match self.family {
            Family::Cnn => {
                self.kernel()?;
                if self.widths().contains(&0) {
                    return Err(HaroodError::Config("cnn widths must be positive".into()));
                }
            }
            Family::Transformer => {
                let d = self.model_width();
                if self.heads == 0 || d == 0 || !d.is_multiple_of(self.heads) {
                    return Err(HaroodError::Config(format!(
                        "d_model {d} is not divisible by {} heads",
                        self.heads
                    )));
                }
                if self.encoder_blocks == 0 {
                    return Err(HaroodError::Config("need at least one encoder block".into()));
                }
                let p = self.patch_len;
                if p == 0 || t % p != 0 {
                    return Err(HaroodError::Config(format!(
                        "patch length {p} must divide window length {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattened extractor width, from shape arithmetic alone.
    pub fn feature_dim(&self) -> Result<usize> {
        self.validate()?;
        Ok(match self.family {
            Family::Cnn => self.widths()[1] * cnn_out_len(self.length(), self.kernel()?),
            Family::Transformer => self.tokens() * self.model_width(),
        })
    }
}

/// Time steps left after two valid conv(k) + pool(2) stages.
fn cnn_out_len(t: usize, k: usize) -> usize {
    if t < k {
        return 0;
    }
    let p1 = (t - k).div_ceil(2);
    if p1 < k {
        return 0;
    }
    (p1 - k).div_ceil(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnBuffer {
    fn new(channels: usize) -> Self {
        BnBuffer {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let w = store.push_uniform(format!("{name}.weight"), &[inp, out], inp, rng);
        let b = store.push_uniform(format!("{name}.bias"), &[out], inp, rng);
        Linear { w, b }
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let m = g.matmul(x, p[self.w]);
        g.add_row(m, p[self.b])
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    slot: usize,
}

#[derive(Clone, Debug)]
struct CnnExtractor {
    blocks: Vec<ConvBlock>,
    channels: usize,
    out_len: usize,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: (usize, usize),
    ff1: Linear,
    ff2: Linear,
    ln2: (usize, usize),
}

#[derive(Clone, Debug)]
struct TransformerExtractor {
    embed: Linear,
    blocks: Vec<EncoderBlock>,
    tokens: usize,
    patch: usize,
    d_model: usize,
    heads: usize,
    positional: Option<Tensor>,
}

#[derive(Clone, Debug)]
enum Extractor {
    Cnn(CnnExtractor),
    Transformer(TransformerExtractor),
}

/// Sinusoidal position table of shape `(tokens, d_model)`.
pub fn sinusoidal_encoding(tokens: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; tokens * d_model];
    for pos in 0..tokens {
        for i in 0..d_model {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(tokens, d_model, data)
}

impl Extractor {
    fn build<R: Rng>(
        config: &BackboneConfig,
        prefix: &str,
        store: &mut ParamStore,
        buffers: &mut Vec<BnBuffer>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        match config.family {
            Family::Cnn => {
                let k = config.kernel()?;
                let widths = config.widths();
                let mut blocks = Vec::new();
                let mut cin = config.channels();
                for (i, &cout) in widths.iter().enumerate() {
                    let name = format!("{prefix}.block{i}");
                    let fan_in = cin * k;
                    let w = store.push_uniform(format!("{name}.conv.weight"), &[cout, cin, k], fan_in, rng);
                    let b = store.push_uniform(format!("{name}.conv.bias"), &[cout], fan_in, rng);
                    let gamma = store.push(format!("{name}.bn.weight"), Tensor::full(&[cout], 1.0));
                    let beta = store.push(format!("{name}.bn.bias"), Tensor::zeros(&[cout]));
                    buffers.push(BnBuffer::new(cout));
                    blocks.push(ConvBlock {
                        w,
                        b,
                        gamma,
                        beta,
                        slot: buffers.len() - 1,
                    });
                    cin = cout;
                }
                Ok(Extractor::Cnn(CnnExtractor {
                    blocks,
                    channels: widths[1],
                    out_len: cnn_out_len(config.length(), k),
                }))
            }
            Family::Transformer => {
                let d = config.model_width();
                let patch = config.patch_len;
                let d_input = config.channels() * patch;
                let embed = Linear::new(store, &format!("{prefix}.embed"), d_input, d, rng);
                let mut blocks = Vec::new();
                for i in 0..config.encoder_blocks {
                    let name = format!("{prefix}.encoder{i}");
                    let q = Linear::new(store, &format!("{name}.attn.q"), d, d, rng);
                    let k = Linear::new(store, &format!("{name}.attn.k"), d, d, rng);
                    let v = Linear::new(store, &format!("{name}.attn.v"), d, d, rng);
                    let o = Linear::new(store, &format!("{name}.attn.out"), d, d, rng);
                    let ln1 = (
                        store.push(format!("{name}.ln1.weight"), Tensor::full(&[d], 1.0)),
                        store.push(format!("{name}.ln1.bias"), Tensor::zeros(&[d])),
                    );
                    let ff1 = Linear::new(store, &format!("{name}.ff1"), d, 2 * d, rng);
                    let ff2 = Linear::new(store, &format!("{name}.ff2"), 2 * d, d, rng);
                    let ln2 = (
                        store.push(format!("{name}.ln2.weight"), Tensor::full(&[d], 1.0)),
                        store.push(format!("{name}.ln2.bias"), Tensor::zeros(&[d])),
                    );
                    blocks.push(EncoderBlock {
                        q,
                        k,
                        v,
                        o,
                        ln1,
                        ff1,
                        ff2,
                        ln2,
                    });
                }
                let tokens = config.tokens();
                Ok(Extractor::Transformer(TransformerExtractor {
                    embed,
                    blocks,
                    tokens,
                    patch,
                    d_model: d,
                    heads: config.heads,
                    positional: config
                        .use_positional_encoding
                        .then(|| sinusoidal_encoding(tokens, d)),
                }))
            }
        }
    }

    fn feature_dim(&self) -> usize {
        match self {
            Extractor::Cnn(c) => c.channels * c.out_len,
            Extractor::Transformer(t) => t.tokens * t.d_model,
        }
    }

    fn descriptor_dim(&self) -> usize {
        match self {
            Extractor::Cnn(c) => c.channels,
            Extractor::Transformer(t) => t.d_model,
        }
    }

    /// Returns the flattened features plus the attention maps of every encoder block.
    fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        mode: Mode,
        buffers: &[BnBuffer],
    ) -> (Var, Vec<Var>) {
        let n = g.shape(x)[0];
        match self {
            Extractor::Cnn(cnn) => {
                let mut h = x;
                for blk in &cnn.blocks {
                    h = g.conv1d(h, p[blk.w], p[blk.b]);
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => {
                            let buf = &buffers[blk.slot];
                            Some((buf.mean.as_slice(), buf.var.as_slice()))
                        }
                    };
                    h = g.batch_norm(h, p[blk.gamma], p[blk.beta], blk.slot, running);
                    h = g.relu(h);
                    h = g.max_pool2(h);
                }
                (g.reshape(h, &[n, cnn.channels * cnn.out_len]), Vec::new())
            }
            Extractor::Transformer(tf) => {
                let shape = g.shape(x).to_vec();
                let (c, t) = (shape[1], shape[3]);
                let k = tf.tokens;
                let d = tf.d_model;
                let h = g.reshape(x, &[n, c, k, tf.patch]);
                let h = g.permute(h, &[0, 2, 1, 3]);
                let h = g.reshape(h, &[n * k, c * tf.patch]);
                debug_assert_eq!(k * tf.patch, t);
                let mut h = tf.embed.forward(g, p, h);
                if let Some(pe) = &tf.positional {
                    let mut tiled = Vec::with_capacity(n * k * d);
                    for _ in 0..n {
                        tiled.extend_from_slice(pe.data());
                    }
                    let pe = g.constant(Tensor::matrix(n * k, d, tiled));
                    h = g.add(h, pe);
                }
                let mut maps = Vec::new();
                for blk in &tf.blocks {
                    let (out, probs) = encoder_block(g, p, blk, h, n, k, d, tf.heads);
                    h = out;
                    maps.push(probs);
                }
                (g.reshape(h, &[n, k * d]), maps)
            }
        }
    }

    /// Per-channel average over time of the flattened features.
    fn descriptor(&self, g: &mut Graph, flat: Var) -> Var {
        let n = g.shape(flat)[0];
        match self {
            Extractor::Cnn(c) => {
                let h = g.reshape(flat, &[n * c.channels, c.out_len]);
                let s = g.sum_cols(h);
                let s = g.scale(s, 1.0 / c.out_len as f64);
                g.reshape(s, &[n, c.channels])
            }
            Extractor::Transformer(t) => {
                let h = g.reshape(flat, &[n, t.tokens, t.d_model]);
                let h = g.permute(h, &[0, 2, 1]);
                let h = g.reshape(h, &[n * t.d_model, t.tokens]);
                let s = g.sum_cols(h);
                let s = g.scale(s, 1.0 / t.tokens as f64);
                g.reshape(s, &[n, t.d_model])
            }
        }
    }
}

/// Post-norm encoder block over `h: (n·K, d)`; returns the output and the
/// attention probabilities `(n·heads, K, K)`.
#[allow(clippy::too_many_arguments)]
fn encoder_block(
    g: &mut Graph,
    p: &[Var],
    blk: &EncoderBlock,
    h: Var,
    n: usize,
    k: usize,
    d: usize,
    heads: usize,
) -> (Var, Var) {
    let dh = d / heads;
    let split = |g: &mut Graph, v: Var| {
        let v = g.reshape(v, &[n, k, heads, dh]);
        let v = g.permute(v, &[0, 2, 1, 3]);
        g.reshape(v, &[n * heads, k, dh])
    };
    let q = blk.q.forward(g, p, h);
    let q = split(g, q);
    let key = blk.k.forward(g, p, h);
    let key = split(g, key);
    let key_t = g.permute(key, &[0, 2, 1]);
    let v = blk.v.forward(g, p, h);
    let v = split(g, v);
    let scores = g.bmm(q, key_t);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = g.softmax(scores);
    let ctx = g.bmm(probs, v);
    let ctx = g.reshape(ctx, &[n, heads, k, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[n * k, d]);
    let attn = blk.o.forward(g, p, ctx);
    let h1 = g.add(h, attn);
    let h1 = g.layer_norm(h1, p[blk.ln1.0], p[blk.ln1.1]);
    let f = blk.ff1.forward(g, p, h1);
    let f = g.relu(f);
    let f = blk.ff2.forward(g, p, f);
    let h2 = g.add(h1, f);
    let h2 = g.layer_norm(h2, p[blk.ln2.0], p[blk.ln2.1]);
    (h2, probs)
}

/// Configuration of the parallel global-feature branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagBranchConfig {
    /// Branch width relative to the main extractor, in `(0, 1]`.
    pub width_fraction: f64,
}

impl Default for LagBranchConfig {
    fn default() -> Self {
        LagBranchConfig { width_fraction: 0.5 }
    }
}

#[derive(Clone, Debug)]
struct GlobalBranch {
    extractor: Extractor,
    proj: Linear,
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub class_count: usize,
    pub discriminator_domains: Option<usize>,
    pub lag: Option<LagBranchConfig>,
}

pub const DISCRIMINATOR_HIDDEN: usize = 64;

/// Graph handles produced by one feature pass.
#[derive(Clone, Debug)]
pub struct Features {
    /// Main extractor output, flattened.
    pub local: Var,
    /// Projected global-branch embedding, when the branch is attached.
    pub global: Option<Var>,
    /// What the classifier consumes: `local`, or `[local ∥ global]`.
    pub combined: Var,
    /// Attention maps of the main extractor (transformer only).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    spec: ModelSpec,
    pub params: ParamStore,
    pub buffers: Vec<BnBuffer>,
    extractor: Extractor,
    classifier: Linear,
    discriminator: Option<(Linear, Linear)>,
    global: Option<GlobalBranch>,
}

impl ModelBundle {
    /// Extractor plus classifier head.
    pub fn new<R: Rng>(backbone: BackboneConfig, class_count: usize, rng: &mut R) -> Result<Self> {
        if class_count == 0 {
            return Err(HaroodError::Config("class_count must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut buffers = Vec::new();
        let extractor = Extractor::build(&backbone, "extractor", &mut params, &mut buffers, rng)?;
        let classifier = Linear::new(&mut params, "classifier", extractor.feature_dim(), class_count, rng);
        Ok(ModelBundle {
            spec: ModelSpec {
                backbone,
                class_count,
                discriminator_domains: None,
                lag: None,
            },
            params,
            buffers,
            extractor,
            classifier,
            discriminator: None,
            global: None,
        })
    }

    /// Rebuilds the structure described by `spec` with fresh parameters.
    pub fn from_spec<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let mut model = Self::new(spec.backbone.clone(), spec.class_count, rng)?;
        if let Some(lag) = &spec.lag {
            model = model.attach_lag_branch(lag, rng)?;
        }
        if let Some(domains) = spec.discriminator_domains {
            model = model.with_discriminator(domains, rng)?;
        }
        Ok(model)
    }

    /// Adds an MLP that predicts which of `domains` source domains a feature came from.
    pub fn with_discriminator<R: Rng>(mut self, domains: usize, rng: &mut R) -> Result<Self> {
        if domains == 0 {
            return Err(HaroodError::Config("discriminator needs at least one domain".into()));
        }
        let inp = self.combined_dim();
        let l1 = Linear::new(&mut self.params, "discriminator.hidden", inp, DISCRIMINATOR_HIDDEN, rng);
        let l2 = Linear::new(&mut self.params, "discriminator.out", DISCRIMINATOR_HIDDEN, domains, rng);
        self.discriminator = Some((l1, l2));
        self.spec.discriminator_domains = Some(domains);
        Ok(self)
    }

    /// Adds a parallel, narrower extractor whose time-averaged output is projected
    /// to the main descriptor width and concatenated to the main features.
    /// The existing classifier rows for the main features are kept.
    pub fn attach_lag_branch<R: Rng>(mut self, config: &LagBranchConfig, rng: &mut R) -> Result<Self> {
        if !(config.width_fraction > 0.0 && config.width_fraction <= 1.0) {
            return Err(HaroodError::Config(format!(
                "global branch width fraction must be in (0, 1], got {}",
                config.width_fraction
            )));
        }
        if self.global.is_some() || self.discriminator.is_some() {
            return Err(HaroodError::Shape(
                "classifier input is already extended; attach the global branch first and once".into(),
            ));
        }
        let main = &self.spec.backbone;
        let mut branch_cfg = main.clone();
        let f = config.width_fraction;
        let scaled = |w: usize| ((w as f64 * f).ceil() as usize).max(1);
        match main.family {
            Family::Cnn => {
                let [w1, w2] = main.widths();
                branch_cfg.cnn_widths = Some([scaled(w1), scaled(w2)]);
                branch_cfg.kernel_size = Some(2 * main.kernel()? - 1);
            }
            Family::Transformer => {
                let h = main.heads;
                let d = main.model_width();
                let target = (scaled(d).div_ceil(h) * h).max(h);
                branch_cfg.capacity = Capacity::Small;
                branch_cfg.d_model = target;
            }
        }
        let extractor = Extractor::build(&branch_cfg, "global", &mut self.params, &mut self.buffers, rng)?;
        let desc = self.extractor.descriptor_dim();
        let proj = Linear::new(&mut self.params, "global.proj", extractor.descriptor_dim(), desc, rng);

        let main_dim = self.extractor.feature_dim();
        let classes = self.spec.class_count;
        let old = self.params.get(self.classifier.w).clone();
        let bound = 1.0 / ((main_dim + desc) as f64).sqrt();
        let mut data = old.into_data();
        data.extend((0..desc * classes).map(|_| rng.random_range(-bound..bound)));
        self.params
            .set(self.classifier.w, Tensor::matrix(main_dim + desc, classes, data));

        self.global = Some(GlobalBranch { extractor, proj });
        self.spec.lag = Some(config.clone());
        Ok(self)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.spec.backbone
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    /// Width of the classifier input.
    pub fn combined_dim(&self) -> usize {
        self.feature_dim() + self.global.as_ref().map_or(0, |_| self.extractor.descriptor_dim())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.extractor.descriptor_dim()
    }

    pub fn has_global_branch(&self) -> bool {
        self.global.is_some()
    }

    pub fn has_discriminator(&self) -> bool {
        self.discriminator.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Slots of the classifier weight `(combined_dim × C)` and bias `(C)`.
    pub fn classifier_slots(&self) -> (usize, usize) {
        (self.classifier.w, self.classifier.b)
    }

    /// Checks a `(n, C, 1, T)` batch against the configured input shape.
    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let [c, h, t] = self.spec.backbone.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != t || s[0] == 0 {
            return Err(HaroodError::Shape(format!(
                "batch shape {s:?} does not match (n, {c}, {h}, {t})"
            )));
        }
        if !batch.is_finite() {
            return Err(HaroodError::Batch("batch contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, params: &ParamStore) -> Vec<Var> {
        assert_eq!(params.len(), self.params.len(), "parameter layout mismatch");
        params.bind(g)
    }

    pub fn features(&self, g: &mut Graph, p: &[Var], x: Var, mode: Mode) -> Features {
        let (local, attention) = self.extractor.forward(g, p, x, mode, &self.buffers);
        let (global, combined) = match &self.global {
            Some(branch) => {
                let (flat, _) = branch.extractor.forward(g, p, x, mode, &self.buffers);
                let desc = branch.extractor.descriptor(g, flat);
                let emb = branch.proj.forward(g, p, desc);
                let combined = g.concat_cols(&[local, emb]);
                (Some(emb), combined)
            }
            None => (None, local),
        };
        Features {
            local,
            global,
            combined,
            attention,
        }
    }

    pub fn classify(&self, g: &mut Graph, p: &[Var], features: Var) -> Var {
        self.classifier.forward(g, p, features)
    }

    pub fn domain_logits(&self, g: &mut Graph, p: &[Var], features: Var) -> Result<Var> {
        let (l1, l2) = self
            .discriminator
            .as_ref()
            .ok_or_else(|| HaroodError::Config("model has no domain discriminator".into()))?;
        let h = l1.forward(g, p, features);
        let h = g.relu(h);
        Ok(l2.forward(g, p, h))
    }

    /// Time-averaged main features `(n × descriptor_dim)`.
    pub fn local_descriptor(&self, g: &mut Graph, local: Var) -> Var {
        self.extractor.descriptor(g, local)
    }

    /// Folds training-mode batch statistics into the running buffers; the first
    /// record per buffer wins when a graph ran several forward passes.
    pub fn commit_bn(&mut self, records: &[BnRecord]) {
        let mut seen = vec![false; self.buffers.len()];
        for rec in records {
            if seen[rec.slot] {
                continue;
            }
            seen[rec.slot] = true;
            let buf = &mut self.buffers[rec.slot];
            for (m, &bm) in buf.mean.iter_mut().zip(&rec.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * bm;
            }
            for (v, &bv) in buf.var.iter_mut().zip(&rec.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * bv;
            }
        }
    }

    /// Evaluation-mode features for a batch.
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_features_with(&self.params, batch)
    }

    pub fn forward_features_with(&self, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, params);
        let x = g.constant(batch.clone());
        let f = self.features(&mut g, &p, x, Mode::Eval);
        Ok(g.value(f.combined).clone())
    }

    /// Evaluation-mode logits `(n × C)`.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.predict_logits_with(&self.params, batch)
    }

    pub fn predict_logits_with(&self, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, params);
        let x = g.constant(batch.clone());
        let f = self.features(&mut g, &p, x, Mode::Eval);
        let logits = self.classify(&mut g, &p, f.combined);
        Ok(g.value(logits).clone())
    }

    /// Evaluation-mode attention maps, one `(n·heads, K, K)` tensor per encoder block.
    pub fn attention_maps(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, &self.params);
        let x = g.constant(batch.clone());
        let f = self.features(&mut g, &p, x, Mode::Eval);
        Ok(f.attention.iter().map(|&a| g.value(a).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::new(
            vec![n, shape[0], shape[1], shape[2]],
            (0..len).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn kernel_rule_and_shape_arithmetic() {
        // hand-evaluated: (T - k + 1) / 2, twice
        let dsads = BackboneConfig::cnn([45, 1, 125]);
        assert_eq!(dsads.kernel().unwrap(), 9);
        assert_eq!(dsads.feature_dim().unwrap(), 32 * 25);
        let uci = BackboneConfig::cnn([6, 1, 128]);
        // 128 -> conv 120 -> pool 60 -> conv 52 -> pool 26
        assert_eq!(uci.feature_dim().unwrap(), 32 * 26);
        let emg = BackboneConfig::cnn([8, 1, 200]);
        // 200 -> 195 -> 97 -> 92 -> 46
        assert_eq!(emg.feature_dim().unwrap(), 32 * 46);
    }

    #[test]
    fn too_short_window_is_a_shape_error() {
        let cfg = BackboneConfig::cnn([3, 1, 2]);
        assert!(matches!(cfg.feature_dim(), Err(HaroodError::Shape(_))));
        let cfg = BackboneConfig::cnn([3, 1, 4]);
        assert_eq!(cfg.kernel().unwrap(), 1);
    }

    #[test]
    fn transformer_rejects_indivisible_heads() {
        let mut cfg = BackboneConfig::transformer([6, 1, 20]);
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(HaroodError::Config(_))));
    }

    #[test]
    fn transformer_feature_dim_is_tokens_times_width() {
        let cfg = BackboneConfig::transformer([8, 1, 200]);
        assert_eq!(cfg.feature_dim().unwrap(), 3200);
    }

    #[test]
    fn runtime_width_matches_builder() {
        for shape in [[45, 1, 125], [6, 1, 128], [9, 1, 125], [6, 1, 50]] {
            let model = ModelBundle::new(BackboneConfig::cnn(shape), 4, &mut rng()).unwrap();
            let f = model.forward_features(&batch(2, shape, 1)).unwrap();
            assert_eq!(f.shape(), &[2, model.feature_dim()]);
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let shape = [3, 1, 32];
        let mut model = ModelBundle::new(BackboneConfig::cnn(shape), 3, &mut rng()).unwrap();
        model.buffers[0].mean = vec![0.1; 16];
        model.buffers[0].var = vec![2.0; 16];
        let b = batch(8, shape, 2);
        let full = model.predict_logits(&b).unwrap();
        let one = model.predict_logits(&b.gather_rows(&[5])).unwrap();
        for (a, c) in full.row(5).iter().zip(one.row(0)) {
            assert!((a - c).abs() < 1e-5);
        }
        assert_eq!(full, model.predict_logits(&b).unwrap());
    }

    #[test]
    fn nan_input_is_rejected() {
        let shape = [2, 1, 16];
        let model = ModelBundle::new(BackboneConfig::cnn(shape), 2, &mut rng()).unwrap();
        let mut b = batch(1, shape, 3);
        b.data_mut()[4] = f64::NAN;
        assert!(model.predict_logits(&b).is_err());
        assert!(matches!(
            model.predict_logits(&batch(1, [3, 1, 16], 3)),
            Err(HaroodError::Shape(_))
        ));
    }

    #[test]
    fn uniform_keys_give_uniform_attention() {
        let mut cfg = BackboneConfig::transformer([2, 1, 5]);
        cfg.d_model = 4;
        cfg.use_positional_encoding = false;
        let mut model = ModelBundle::new(cfg, 2, &mut rng()).unwrap();
        // zero key projection: every score in a row is equal
        let kw = model.params.position("extractor.encoder0.attn.k.weight").unwrap();
        let kb = model.params.position("extractor.encoder0.attn.k.bias").unwrap();
        let shape = model.params.get(kw).shape().to_vec();
        model.params.set(kw, Tensor::zeros(&shape));
        model.params.set(kb, Tensor::zeros(&[4]));
        let maps = model.attention_maps(&batch(3, [2, 1, 5], 4)).unwrap();
        for v in maps[0].data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = BackboneConfig::transformer([3, 1, 6]);
        let model = ModelBundle::new(cfg, 2, &mut rng()).unwrap();
        let maps = model.attention_maps(&batch(2, [3, 1, 6], 5)).unwrap();
        for row in maps[0].data().chunks(6) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn capacity_grows_parameter_count() {
        for family in [Family::Cnn, Family::Transformer] {
            let counts: Vec<usize> = [Capacity::Small, Capacity::Mid, Capacity::Large]
                .into_iter()
                .map(|c| {
                    let mut cfg = BackboneConfig::cnn([6, 1, 50]).with_capacity(c);
                    cfg.family = family;
                    ModelBundle::new(cfg, 6, &mut rng()).unwrap().parameter_count()
                })
                .collect();
            assert!(counts[0] < counts[1] && counts[1] < counts[2], "{family}: {counts:?}");
        }
    }

    #[test]
    fn lag_branch_extends_classifier_input() {
        let shape = [3, 1, 40];
        let model = ModelBundle::new(BackboneConfig::cnn(shape), 4, &mut rng()).unwrap();
        let main_dim = model.feature_dim();
        let model = model.attach_lag_branch(&LagBranchConfig::default(), &mut rng()).unwrap();
        assert_eq!(model.combined_dim(), main_dim + model.descriptor_dim());
        let f = model.forward_features(&batch(2, shape, 6)).unwrap();
        assert_eq!(f.shape(), &[2, model.combined_dim()]);
        assert!(matches!(
            model.attach_lag_branch(&LagBranchConfig::default(), &mut rng()),
            Err(HaroodError::Shape(_))
        ));
    }

    #[test]
    fn zero_width_branch_is_rejected() {
        let model = ModelBundle::new(BackboneConfig::cnn([3, 1, 40]), 4, &mut rng()).unwrap();
        let err = model
            .attach_lag_branch(&LagBranchConfig { width_fraction: 0.0 }, &mut rng())
            .unwrap_err();
        assert!(matches!(err, HaroodError::Config(_)));
    }

    #[test]
    fn zeroed_branch_rows_reproduce_main_model() {
        let shape = [3, 1, 40];
        let main = ModelBundle::new(BackboneConfig::cnn(shape), 4, &mut rng()).unwrap();
        let main_dim = main.feature_dim();
        let mut lag = main.clone().attach_lag_branch(&LagBranchConfig::default(), &mut rng()).unwrap();
        let (w, _) = lag.classifier_slots();
        let mut wt = lag.params.get(w).clone();
        for v in &mut wt.data_mut()[main_dim * 4..] {
            *v = 0.0;
        }
        lag.params.set(w, wt);
        let b = batch(3, shape, 8);
        let a = main.predict_logits(&b).unwrap();
        let c = lag.predict_logits(&b).unwrap();
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
