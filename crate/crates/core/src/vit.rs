//! Small pre-norm Vision Transformer with optional per-layer prefix prompts.
//!
//! The same frozen weights serve as the prompted backbone, the prompt-free
//! query network and the reference network.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// 1-based indices of blocks that receive prefix prompts.
    pub prompted_layers: Vec<usize>,
    /// Prompt length `L_p`; half goes to keys, half to values.
    pub prompt_length: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 6,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            prompted_layers: vec![1, 2, 3, 4, 5],
            prompt_length: 8,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            problems.push(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.prompt_length % 2 != 0 {
            problems.push(format!("prompt_length {} must be even", self.prompt_length));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            problems.push("channels, mlp_ratio and num_classes must be positive".into());
        }
        if let Some(&bad) = self.prompted_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            problems.push(format!("prompted layer {bad} outside [1, {}]", self.depth));
        }
        let mut sorted = self.prompted_layers.clone();
        sorted.dedup();
        if sorted.len() != self.prompted_layers.len() || !self.prompted_layers.windows(2).all(|w| w[0] < w[1]) {
            problems.push("prompted_layers must be strictly increasing".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the [CLS] token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn max_prompted_layer(&self) -> usize {
        self.prompted_layers.iter().copied().max().unwrap_or(0)
    }

    pub fn is_prompted(&self, layer: usize) -> bool {
        self.prompted_layers.contains(&layer)
    }
}

/// Which block output to read: a 1-based block index or the final block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelect {
    Last,
    Layer(usize),
}

impl LayerSelect {
    pub fn resolve(self, depth: usize) -> usize {
        match self {
            LayerSelect::Last => depth,
            LayerSelect::Layer(l) => l,
        }
    }
}

impl Serialize for LayerSelect {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSelect::Last => s.serialize_str("last"),
            LayerSelect::Layer(l) => s.serialize_u64(*l as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelect {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(l) => Ok(LayerSelect::Layer(l)),
            Repr::Name(s) if s == "last" => Ok(LayerSelect::Last),
            Repr::Name(s) => Err(serde::de::Error::custom(format!(
                "expected \"last\" or a layer index, got {s:?}"
            ))),
        }
    }
}

impl std::str::FromStr for LayerSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(LayerSelect::Last);
        }
        s.parse()
            .map(LayerSelect::Layer)
            .map_err(|_| Error::Config(format!("bad layer selector {s:?}")))
    }
}

impl std::fmt::Display for LayerSelect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSelect::Last => f.write_str("last"),
            LayerSelect::Layer(l) => write!(f, "{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Attention weights of one block as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Key/value halves of a prompt, each `(rows × D)`.
#[derive(Debug, Clone, Copy)]
pub struct Prefix {
    pub key: Var,
    pub value: Var,
}

/// Supplies the prefix for a layer given that layer's input embedding.
pub trait PromptProvider {
    /// `layer` is 1-based; `input` is `x_layer` (tokens × D).
    fn prefix(&mut self, tape: &mut Tape, layer: usize, input: Var) -> Result<Option<Prefix>>;
}

/// Runs the backbone without any prompts.
pub struct NoPrompts;

impl PromptProvider for NoPrompts {
    fn prefix(&mut self, _: &mut Tape, _: usize, _: Var) -> Result<Option<Prefix>> {
        Ok(None)
    }
}

/// Fixed per-layer prompts (index 0 = layer 1), split into halves on use.
pub struct StaticPrompts {
    prompts: Vec<Option<Var>>,
}

impl StaticPrompts {
    pub fn new(prompts: Vec<Option<Var>>) -> Self {
        Self { prompts }
    }
}

impl PromptProvider for StaticPrompts {
    fn prefix(&mut self, tape: &mut Tape, layer: usize, _: Var) -> Result<Option<Prefix>> {
        match self.prompts.get(layer - 1).copied().flatten() {
            Some(phi) => split_prompt(tape, phi, 1).map(Some),
            None => Ok(None),
        }
    }
}

/// Splits a prompt of `segments` stacked components into key and value halves.
///
/// Each component contributes its first half of rows to the keys and the
/// second half to the values.
pub fn split_prompt(tape: &mut Tape, phi: Var, segments: usize) -> Result<Prefix> {
    let rows = tape.shape(phi)[0];
    if segments == 0 || rows % segments != 0 || (rows / segments) % 2 != 0 {
        return Err(Error::contract(format!(
            "prompt with {rows} rows cannot be split into {segments} even segments"
        )));
    }
    let len = rows / segments;
    let half = len / 2;
    let key_rows: Vec<usize> = (0..segments).flat_map(|s| s * len..s * len + half).collect();
    let value_rows: Vec<usize> = (0..segments).flat_map(|s| s * len + half..(s + 1) * len).collect();
    Ok(Prefix {
        key: tape.gather_rows(phi, &key_rows)?,
        value: tape.gather_rows(phi, &value_rows)?,
    })
}

/// Multi-head self-attention with optional prefix keys and values.
///
/// Queries come from `x` only; `phi_k` is prepended to the keys and `phi_v`
/// to the values before projection, so the output keeps exactly the rows of
/// `x`. With no prefix this is plain MHSA through the same code path.
pub fn prefix_mhsa(
    tape: &mut Tape,
    x: Var,
    phi_k: Option<Var>,
    phi_v: Option<Var>,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let dim = tape.shape(x)[1];
    let (kin, vin) = match (phi_k, phi_v) {
        (None, None) => (x, x),
        (Some(pk), Some(pv)) => {
            if tape.shape(pk) != tape.shape(pv) {
                return Err(Error::contract(format!(
                    "prefix halves differ: {:?} vs {:?}",
                    tape.shape(pk),
                    tape.shape(pv)
                )));
            }
            if tape.shape(pk)[1] != dim {
                return Err(Error::contract(format!(
                    "prefix width {} does not match model width {dim}",
                    tape.shape(pk)[1]
                )));
            }
            (tape.concat_rows(&[pk, x])?, tape.concat_rows(&[pv, x])?)
        }
        _ => return Err(Error::contract("prefix key and value must both be present or both absent")),
    };
    if heads == 0 || dim % heads != 0 {
        return Err(Error::dim("prefix_mhsa", format!("dim {dim} not divisible by {heads} heads")));
    }
    let q = tape.matmul(x, w.wq)?;
    let q = tape.add_row(q, w.bq)?;
    let k = tape.matmul(kin, w.wk)?;
    let k = tape.add_row(k, w.bk)?;
    let v = tape.matmul(vin, w.wv)?;
    let v = tape.add_row(v, w.bv)?;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, hd)?,
                tape.slice_cols(k, h * hd, hd)?,
                tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_last(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let o = tape.matmul(cat, w.wo)?;
    tape.add_row(o, w.bo)
}

/// Model parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub vars: Vec<Var>,
}

/// Result of a full backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Classifier logits, shape `[num_classes]`.
    pub logits: Var,
    /// `x_1 ..= x_{depth+1}`: the input embedding of every block, then the
    /// final block output.
    pub layer_inputs: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    store: ParamStore,
    ids: ModelIds,
    frozen: bool,
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let v = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], v).expect("xavier shape")
}

fn normal(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("normal shape")
}

impl ViTModel {
    pub fn new(config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let mut s = ParamStore::new();
        let patch_w = s.add("patch.w", xavier(rng, config.patch_len(), d));
        let patch_b = s.add("patch.b", Tensor::zeros(vec![d]));
        let cls = s.add("cls", normal(rng, vec![1, d], 0.02));
        let pos = s.add("pos", normal(rng, vec![config.num_tokens(), d], 0.02));
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = |n: &str| format!("blocks.{i}.{n}");
            blocks.push(BlockIds {
                ln1_g: s.add(p("ln1.g"), Tensor::filled(vec![d], 1.0)),
                ln1_b: s.add(p("ln1.b"), Tensor::zeros(vec![d])),
                wq: s.add(p("attn.wq"), xavier(rng, d, d)),
                bq: s.add(p("attn.bq"), Tensor::zeros(vec![d])),
                wk: s.add(p("attn.wk"), xavier(rng, d, d)),
                bk: s.add(p("attn.bk"), Tensor::zeros(vec![d])),
                wv: s.add(p("attn.wv"), xavier(rng, d, d)),
                bv: s.add(p("attn.bv"), Tensor::zeros(vec![d])),
                wo: s.add(p("attn.wo"), xavier(rng, d, d)),
                bo: s.add(p("attn.bo"), Tensor::zeros(vec![d])),
                ln2_g: s.add(p("ln2.g"), Tensor::filled(vec![d], 1.0)),
                ln2_b: s.add(p("ln2.b"), Tensor::zeros(vec![d])),
                w1: s.add(p("mlp.w1"), xavier(rng, d, hidden)),
                b1: s.add(p("mlp.b1"), Tensor::zeros(vec![hidden])),
                w2: s.add(p("mlp.w2"), xavier(rng, hidden, d)),
                b2: s.add(p("mlp.b2"), Tensor::zeros(vec![d])),
            });
        }
        let norm_g = s.add("norm.g", Tensor::filled(vec![d], 1.0));
        let norm_b = s.add("norm.b", Tensor::zeros(vec![d]));
        let head_w = s.add("head.w", xavier(rng, d, config.num_classes));
        let head_b = s.add("head.b", Tensor::zeros(vec![config.num_classes]));
        let ids = ModelIds {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
        };
        let mut model = Self {
            config,
            store: s,
            ids,
            frozen: false,
        };
        model.unfreeze();
        Ok(model)
    }

    /// Rebuilds a model from a parameter store laid out by [`ViTModel::new`].
    pub fn from_store(config: ViTConfig, store: ParamStore, frozen: bool) -> Result<Self> {
        let mut rng = crate::rng::from_seed(0);
        let mut model = Self::new(config, &mut rng)?;
        model.store.load_values_from(&store)?;
        if frozen {
            model.freeze();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.ids.head_w, self.ids.head_b]
    }

    pub fn is_head(&self, id: ParamId) -> bool {
        id == self.ids.head_w || id == self.ids.head_b
    }

    /// Stops gradient tracking on every backbone parameter. The classifier
    /// head stays trainable.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for id in self.store.ids().collect::<Vec<_>>() {
            let head = self.is_head(id);
            self.store.set_requires_grad(id, head);
        }
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_requires_grad(id, true);
        }
    }

    /// Replaces the classifier with a fresh `dim × num_classes` head.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut Rng) {
        self.config.num_classes = num_classes;
        let d = self.config.dim;
        *self.store.get_mut(self.ids.head_w) = xavier(rng, d, num_classes).with_requires_grad(true);
        *self.store.get_mut(self.ids.head_b) = Tensor::zeros(vec![num_classes]).with_requires_grad(true);
    }

    /// SHA-256 over the bit patterns of every non-head parameter.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for id in self.store.ids().filter(|&id| !self.is_head(id)) {
            h.update(self.store.name(id).as_bytes());
            for v in self.store.get(id).values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binds parameters honoring their `requires_grad` flags.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vars: self.store.bind(tape),
        }
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vars: self.store.iter().map(|(_, t)| tape.constant(t)).collect(),
        }
    }

    fn v(&self, vars: &ModelVars, id: ParamId) -> Var {
        vars.vars[id.0]
    }

    pub fn attention_vars(&self, vars: &ModelVars, block: usize) -> AttentionVars {
        let b = &self.ids.blocks[block];
        AttentionVars {
            wq: self.v(vars, b.wq),
            bq: self.v(vars, b.bq),
            wk: self.v(vars, b.wk),
            bk: self.v(vars, b.bk),
            wv: self.v(vars, b.wv),
            bv: self.v(vars, b.bv),
            wo: self.v(vars, b.wo),
            bo: self.v(vars, b.bo),
        }
    }

    /// Rearranges a `C×H×W` image into one flattened patch per row.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::dim(
                "patch_embed",
                format!("image shape {:?}, expected {expected:?}", image.shape()),
            ));
        }
        let (g, p, s) = (c.grid(), c.patch_size, c.image_size);
        let px = image.values();
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_len());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.channels {
                    for dy in 0..p {
                        let row = ch * s * s + (gy * p + dy) * s + gx * p;
                        out.extend_from_slice(&px[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![c.num_patches(), c.patch_len()], out)
    }

    /// Linear patch projection, [CLS] prepended at row 0, positions added.
    pub fn patch_embed(&self, tape: &mut Tape, vars: &ModelVars, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(&self.patchify(image)?);
        let proj = tape.matmul(patches, self.v(vars, self.ids.patch_w))?;
        let proj = tape.add_row(proj, self.v(vars, self.ids.patch_b))?;
        let tokens = tape.concat_rows(&[self.v(vars, self.ids.cls), proj])?;
        tape.add(tokens, self.v(vars, self.ids.pos))
    }

    fn block(&self, tape: &mut Tape, vars: &ModelVars, i: usize, x: Var, prefix: Option<Prefix>) -> Result<Var> {
        let b = &self.ids.blocks[i];
        let h = tape.layernorm(x, self.v(vars, b.ln1_g), self.v(vars, b.ln1_b))?;
        let attn = self.attention_vars(vars, i);
        let a = prefix_mhsa(
            tape,
            h,
            prefix.map(|p| p.key),
            prefix.map(|p| p.value),
            &attn,
            self.config.heads,
        )?;
        let x = tape.add(x, a)?;
        let h = tape.layernorm(x, self.v(vars, b.ln2_g), self.v(vars, b.ln2_b))?;
        let h = tape.matmul(h, self.v(vars, b.w1))?;
        let h = tape.add_row(h, self.v(vars, b.b1))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.v(vars, b.w2))?;
        let h = tape.add_row(h, self.v(vars, b.b2))?;
        tape.add(x, h)
    }

    /// Full pass: every block, prompts requested per layer, logits from the
    /// normalized final [CLS] token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        image: &Tensor,
        prompts: &mut dyn PromptProvider,
    ) -> Result<BackboneOutput> {
        let mut x = self.patch_embed(tape, vars, image)?;
        let mut layer_inputs = Vec::with_capacity(self.config.depth + 1);
        for i in 0..self.config.depth {
            layer_inputs.push(x);
            let layer = i + 1;
            let prefix = prompts.prefix(tape, layer, x)?;
            if prefix.is_some() && !self.config.is_prompted(layer) {
                return Err(Error::contract(format!("prompt supplied for non-prompted layer {layer}")));
            }
            x = self.block(tape, vars, i, x, prefix)?;
        }
        layer_inputs.push(x);
        let cls = tape.slice_rows(x, 0, 1)?;
        let cls = tape.layernorm(cls, self.v(vars, self.ids.norm_g), self.v(vars, self.ids.norm_b))?;
        let logits = tape.matmul(cls, self.v(vars, self.ids.head_w))?;
        let logits = tape.add_row(logits, self.v(vars, self.ids.head_b))?;
        let logits = tape.reshape(logits, vec![self.config.num_classes])?;
        Ok(BackboneOutput { logits, layer_inputs })
    }

    /// Inference-only pass with fixed per-layer prompts (`L_p × D` each,
    /// index 0 = layer 1). Returns logits and every `x_l`.
    pub fn forward_backbone(&self, image: &Tensor, prompts: &[Option<Tensor>]) -> Result<(Tensor, Vec<Tensor>)> {
        if prompts.len() > self.config.depth {
            return Err(Error::contract(format!(
                "{} prompts for a {}-layer model",
                prompts.len(),
                self.config.depth
            )));
        }
        for (i, p) in prompts.iter().enumerate() {
            if p.is_some() && !self.config.is_prompted(i + 1) {
                return Err(Error::contract(format!("prompt supplied for non-prompted layer {}", i + 1)));
            }
        }
        let mut tape = Tape::new();
        let vars = self.bind_constant(&mut tape);
        let phis = prompts.iter().map(|p| p.as_ref().map(|t| tape.constant(t))).collect();
        let out = self.forward(&mut tape, &vars, image, &mut StaticPrompts::new(phis))?;
        Ok((
            tape.tensor(out.logits),
            out.layer_inputs.iter().map(|&v| tape.tensor(v)).collect(),
        ))
    }

    /// Prompt-free [CLS] embedding after block `upto` of the frozen model.
    ///
    /// `upto` must lie deeper than every prompted layer.
    pub fn forward_plain_cls(&self, image: &Tensor, upto: LayerSelect) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let cls = self.plain_cls_on_tape(&mut tape, image, upto)?;
        Ok(tape.value(cls).to_vec())
    }

    /// Same as [`ViTModel::forward_plain_cls`], leaving the work on `tape`.
    pub fn plain_cls_on_tape(&self, tape: &mut Tape, image: &Tensor, upto: LayerSelect) -> Result<Var> {
        if !self.frozen {
            return Err(Error::contract("query/reference network must be frozen"));
        }
        let layer = upto.resolve(self.config.depth);
        let floor = self.config.max_prompted_layer();
        if layer <= floor || layer > self.config.depth {
            return Err(Error::contract(format!(
                "reference layer {layer} must be in ({floor}, {}]",
                self.config.depth
            )));
        }
        let vars = self.bind_constant(tape);
        let mut x = self.patch_embed(tape, &vars, image)?;
        for i in 0..layer {
            x = self.block(tape, &vars, i, x, None)?;
        }
        tape.slice_rows(x, 0, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 3,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 5,
            prompted_layers: vec![1, 2],
            prompt_length: 4,
        }
    }

    fn image(seed: u64, cfg: &ViTConfig) -> Tensor {
        let mut r = from_seed(seed);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| r.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig {
            prompt_length: 3,
            prompted_layers: vec![7],
            ..ViTConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("even") && msg.contains("prompted layer 7"), "{msg}");
    }

    #[test]
    fn token_count_for_default_config() {
        let cfg = ViTConfig::default();
        let model = ViTModel::new(cfg.clone(), &mut from_seed(0)).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind_constant(&mut tape);
        let x = model.patch_embed(&mut tape, &vars, &image(1, &cfg)).unwrap();
        assert_eq!(tape.shape(x), &[65, 64]);
    }

    #[test]
    fn zero_image_yields_bias_tokens() {
        let cfg = tiny();
        let mut model = ViTModel::new(cfg.clone(), &mut from_seed(0)).unwrap();
        let bias_id = model.store().find("patch.b").unwrap();
        model.store_mut().get_mut(bias_id).values_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let pos_id = model.store().find("pos").unwrap();
        model.store_mut().get_mut(pos_id).values_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = model.bind_constant(&mut tape);
        let zero = Tensor::zeros(vec![3, 8, 8]);
        let x = model.patch_embed(&mut tape, &vars, &zero).unwrap();
        let bias = model.store().get(bias_id).values().to_vec();
        let d = cfg.dim;
        for p in 1..cfg.num_tokens() {
            assert_eq!(&tape.value(x)[p * d..(p + 1) * d], bias.as_slice());
        }
    }

    #[test]
    fn distinct_images_embed_differently() {
        let cfg = tiny();
        let model = ViTModel::new(cfg.clone(), &mut from_seed(3)).unwrap();
        let (_, a) = model.forward_backbone(&image(1, &cfg), &[]).unwrap();
        let (_, b) = model.forward_backbone(&image(2, &cfg), &[]).unwrap();
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let cfg = tiny();
        let model = ViTModel::new(cfg, &mut from_seed(0)).unwrap();
        let err = model.forward_backbone(&Tensor::zeros(vec![3, 4, 4]), &[]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn scalar_prefix_attention_by_hand() {
        let mut tape = Tape::new();
        let one = |t: &mut Tape| t.constant(&Tensor::filled(vec![1, 1], 1.0));
        let zero = |t: &mut Tape| t.constant(&Tensor::zeros(vec![1]));
        let w = AttentionVars {
            wq: one(&mut tape),
            bq: zero(&mut tape),
            wk: one(&mut tape),
            bk: zero(&mut tape),
            wv: one(&mut tape),
            bv: zero(&mut tape),
            wo: one(&mut tape),
            bo: zero(&mut tape),
        };
        let x = one(&mut tape);
        let pk = tape.constant(&Tensor::zeros(vec![1, 1]));
        let pv = tape.constant(&Tensor::filled(vec![1, 1], 2.0));
        let out = prefix_mhsa(&mut tape, x, Some(pk), Some(pv), &w, 1).unwrap();
        assert!((tape.value(out)[0] - 1.26894).abs() < 1e-5);
    }

    #[test]
    fn prefix_halves_must_match() {
        let cfg = tiny();
        let model = ViTModel::new(cfg, &mut from_seed(0)).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind_constant(&mut tape);
        let w = model.attention_vars(&vars, 0);
        let x = tape.constant(&Tensor::filled(vec![5, 8], 0.1));
        let pk = tape.constant(&Tensor::zeros(vec![2, 8]));
        let pv = tape.constant(&Tensor::zeros(vec![1, 8]));
        assert!(matches!(
            prefix_mhsa(&mut tape, x, Some(pk), Some(pv), &w, 2),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            prefix_mhsa(&mut tape, x, Some(pk), None, &w, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prompt_on_unprompted_layer_is_rejected() {
        let cfg = tiny();
        let model = ViTModel::new(cfg, &mut from_seed(0)).unwrap();
        let img = image(0, model.config());
        let prompts = vec![None, None, Some(Tensor::zeros(vec![4, 8]))];
        assert!(matches!(model.forward_backbone(&img, &prompts), Err(Error::Contract(_))));
    }

    #[test]
    fn plain_cls_contracts_and_aliases() {
        let cfg = tiny();
        let mut model = ViTModel::new(cfg.clone(), &mut from_seed(0)).unwrap();
        let img = image(4, &cfg);
        assert!(model.forward_plain_cls(&img, LayerSelect::Last).is_err());
        model.freeze();
        let last = model.forward_plain_cls(&img, LayerSelect::Last).unwrap();
        let three = model.forward_plain_cls(&img, LayerSelect::Layer(3)).unwrap();
        assert_eq!(last, three);
        assert_eq!(last, model.forward_plain_cls(&img, LayerSelect::Last).unwrap());
        assert!(model.forward_plain_cls(&img, LayerSelect::Layer(2)).is_err());
        let (_, xs) = model.forward_backbone(&img, &[]).unwrap();
        assert_eq!(&xs[3].values()[..cfg.dim], last.as_slice());
    }

    #[test]
    fn layer_select_serde() {
        let l: LayerSelect = serde_json::from_str("\"last\"").unwrap();
        assert_eq!(l, LayerSelect::Last);
        let l: LayerSelect = serde_json::from_str("8").unwrap();
        assert_eq!(l, LayerSelect::Layer(8));
        assert!(serde_json::from_str::<LayerSelect>("\"first\"").is_err());
        assert_eq!(serde_json::to_string(&LayerSelect::Layer(3)).unwrap(), "3");
    }
}
