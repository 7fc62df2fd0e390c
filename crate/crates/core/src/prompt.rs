//! Task-partitioned prompt pool, prompt formation and the two query paths.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::vit::{split_prompt, LayerSelect, Prefix, PromptProvider, ViTConfig, ViTModel};

/// How a layer prompt is assembled from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Formation {
    /// Cosine-weighted sum of every available component.
    Coda,
    /// Concatenation of the `n` most similar components.
    Topk { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// `q_l` is the [CLS] row of the layer's own input embedding.
    OneStage,
    /// `q` is the final [CLS] of a separate prompt-free pass.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    OneStage { layer: usize },
    TwoStage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub vector: Vec<f64>,
    pub source: QuerySource,
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    let dot = a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y);
    let na = a.iter().fold(0.0, |s, x| s + x * x).sqrt();
    let nb = b.iter().fold(0.0, |s, x| s + x * x).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One-stage query: the [CLS] row of `x_layer`, where `layer_inputs[0]` is `x_1`.
pub fn query_one_stage(layer_inputs: &[Tensor], layer: usize, config: &ViTConfig) -> Result<Query> {
    if !config.is_prompted(layer) {
        return Err(Error::contract(format!("layer {layer} is not a prompted layer")));
    }
    let x = layer_inputs
        .get(layer - 1)
        .ok_or_else(|| Error::contract(format!("no embedding recorded for layer {layer}")))?;
    Ok(Query {
        vector: x.row(0).to_vec(),
        source: QuerySource::OneStage { layer },
    })
}

/// Two-stage query: final [CLS] of a prompt-free pass through the frozen model.
pub fn query_two_stage(image: &Tensor, frozen_model: &ViTModel) -> Result<Query> {
    Ok(Query {
        vector: frozen_model.forward_plain_cls(image, LayerSelect::Last)?,
        source: QuerySource::TwoStage,
    })
}

/// Row-wise cosine between `q` (`1×D`) and each key (`M×D`), as a `1×M` row.
pub fn cosine_weights(tape: &mut Tape, q: Var, keys: Var) -> Result<Var> {
    let qn = tape.normalize_rows(q)?;
    let kn = tape.normalize_rows(keys)?;
    tape.matmul_nt(qn, kn)
}

/// `φ = Σ_m cos(q, k_m) p_m` with raw (unnormalized) cosine weights.
///
/// `components` is `M × (L_p·D)`; the result is `L_p × D`.
pub fn coda_on_tape(tape: &mut Tape, q: Var, keys: Var, components: Var, dim: usize) -> Result<Var> {
    let w = cosine_weights(tape, q, keys)?;
    let flat = tape.matmul(w, components)?;
    let lp = tape.shape(components)[1] / dim;
    tape.reshape(flat, vec![lp, dim])
}

/// Component indices ordered by descending similarity, ties to the lower index.
pub fn rank_by_similarity(sims: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

/// Concatenates the `n` most similar components into an `(n·L_p) × D` prompt.
pub fn topk_on_tape(tape: &mut Tape, q: Var, keys: Var, components: Var, dim: usize, n: usize) -> Result<Var> {
    let m = tape.shape(keys)[0];
    if n == 0 || n > m {
        return Err(Error::contract(format!("top-{n} requested from {m} components")));
    }
    let w = cosine_weights(tape, q, keys)?;
    let order = rank_by_similarity(tape.value(w));
    let picked = tape.gather_rows(components, &order[..n])?;
    let lp = tape.shape(components)[1] / dim;
    tape.reshape(picked, vec![n * lp, dim])
}

/// Per-layer keys and prompt components, partitioned by task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    dim: usize,
    prompt_length: usize,
    components: usize,
    layers: Vec<usize>,
    store: ParamStore,
    keys: Vec<ParamId>,
    values: Vec<ParamId>,
    partition: Vec<Range<usize>>,
    initialized: usize,
}

/// Serializable description of a pool's layout and freeze state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolLayout {
    pub dim: usize,
    pub prompt_length: usize,
    pub components: usize,
    pub layers: Vec<usize>,
    pub partition: Vec<[usize; 2]>,
    /// Tasks whose components have been activated; all but the last are frozen.
    pub initialized_tasks: usize,
}

/// Pool parameters bound to a tape, one entry per prompted layer.
#[derive(Debug, Clone)]
pub struct PoolVars {
    pub keys: Vec<Var>,
    pub components: Vec<Var>,
}

fn partition(total: usize, tasks: usize) -> Vec<Range<usize>> {
    let base = total / tasks;
    let extra = total % tasks;
    let mut start = 0;
    (0..tasks)
        .map(|t| {
            let len = base + usize::from(t < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Fills `rows` of `t` with uniform random vectors, Gram-Schmidt orthonormalized
/// against each other and, when the width allows, against the rows before them.
fn orthogonal_init(t: &mut Tensor, rows: Range<usize>, rng: &mut Rng) {
    let width = t.cols();
    let against_prior = rows.end <= width;
    let mut first = if against_prior { 0 } else { rows.start };
    for r in rows.clone() {
        // More rows than width: start a fresh orthonormal block.
        if r - first >= width {
            first = r;
        }
        loop {
            let mut v: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for p in first..r {
                let prev = t.row(p);
                let dot = v.iter().zip(prev).fold(0.0, |s, (a, b)| s + a * b);
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().fold(0.0, |s, a| s + a * a).sqrt();
            if norm > 1e-6 {
                t.row_mut(r).iter_mut().zip(&v).for_each(|(dst, a)| *dst = a / norm);
                break;
            }
        }
    }
}

impl PromptPool {
    pub fn new(dim: usize, prompt_length: usize, components: usize, layers: Vec<usize>, tasks: usize) -> Result<Self> {
        if tasks == 0 || components < tasks {
            return Err(Error::Config(format!(
                "{components} prompt components cannot be split across {tasks} tasks"
            )));
        }
        if prompt_length == 0 || prompt_length % 2 != 0 {
            return Err(Error::Config(format!("prompt length {prompt_length} must be even and positive")));
        }
        let mut store = ParamStore::new();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for &l in &layers {
            keys.push(store.add(
                format!("pool.{l}.keys"),
                Tensor::zeros(vec![components, dim]).with_requires_grad(true),
            ));
            values.push(store.add(
                format!("pool.{l}.components"),
                Tensor::zeros(vec![components, prompt_length * dim]).with_requires_grad(true),
            ));
        }
        Ok(Self {
            dim,
            prompt_length,
            components,
            layers,
            store,
            keys,
            values,
            partition: partition(components, tasks),
            initialized: 0,
        })
    }

    pub fn for_model(config: &ViTConfig, components: usize, tasks: usize) -> Result<Self> {
        Self::new(
            config.dim,
            config.prompt_length,
            components,
            config.prompted_layers.clone(),
            tasks,
        )
    }

    pub fn layout(&self) -> PoolLayout {
        PoolLayout {
            dim: self.dim,
            prompt_length: self.prompt_length,
            components: self.components,
            layers: self.layers.clone(),
            partition: self.partition.iter().map(|r| [r.start, r.end]).collect(),
            initialized_tasks: self.initialized,
        }
    }

    pub fn from_layout(layout: &PoolLayout, store: &ParamStore) -> Result<Self> {
        let mut pool = Self::new(
            layout.dim,
            layout.prompt_length,
            layout.components,
            layout.layers.clone(),
            layout.partition.len(),
        )?;
        let ranges: Vec<Range<usize>> = layout.partition.iter().map(|[a, b]| *a..*b).collect();
        if ranges != pool.partition {
            return Err(Error::Checkpoint("prompt partition does not match component count".into()));
        }
        pool.store.load_values_from(store)?;
        pool.initialized = layout.initialized_tasks;
        Ok(pool)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_length
    }

    pub fn num_components(&self) -> usize {
        self.components
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn task_ranges(&self) -> &[Range<usize>] {
        &self.partition
    }

    pub fn initialized_tasks(&self) -> usize {
        self.initialized
    }

    /// Index (0-based) of the task currently being trained.
    pub fn active_task(&self) -> Option<usize> {
        self.initialized.checked_sub(1)
    }

    /// Components usable by prompt formation: everything activated so far.
    pub fn available(&self) -> Result<Range<usize>> {
        let t = self
            .active_task()
            .ok_or_else(|| Error::contract("prompt pool has no activated task"))?;
        Ok(0..self.partition[t].end)
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::contract(format!("layer {layer} has no prompt pool")))
    }

    pub fn keys(&self, layer: usize) -> Result<&Tensor> {
        Ok(self.store.get(self.keys[self.slot(layer)?]))
    }

    pub fn components(&self, layer: usize) -> Result<&Tensor> {
        Ok(self.store.get(self.values[self.slot(layer)?]))
    }

    /// Mutable access to `(keys, components)` of one layer.
    pub fn layer_mut(&mut self, layer: usize) -> Result<(&mut Tensor, &mut Tensor)> {
        let s = self.slot(layer)?;
        Ok(self.store.pair_mut(self.keys[s], self.values[s]))
    }

    /// Activates `task`'s components and freezes every earlier range.
    ///
    /// Tasks must be activated in order starting from 0. New keys and
    /// components get orthonormalized uniform random initial values.
    pub fn expand_for_task(&mut self, task: usize, rng: &mut Rng) -> Result<()> {
        if task != self.initialized {
            return Err(Error::contract(format!(
                "task {task} activated out of order; expected task {}",
                self.initialized
            )));
        }
        if task >= self.partition.len() {
            return Err(Error::contract(format!(
                "pool is partitioned for {} tasks",
                self.partition.len()
            )));
        }
        let range = self.partition[task].clone();
        for s in 0..self.layers.len() {
            orthogonal_init(self.store.get_mut(self.keys[s]), range.clone(), rng);
            orthogonal_init(self.store.get_mut(self.values[s]), range.clone(), rng);
        }
        self.initialized += 1;
        Ok(())
    }

    /// Per-element update mask for a pool parameter: rows of the active task only.
    pub fn trainable_mask(&self, id: ParamId) -> Vec<bool> {
        let t = self.store.get(id);
        let cols = t.cols();
        let mut mask = vec![false; t.len()];
        if let Some(task) = self.active_task() {
            for r in self.partition[task].clone() {
                mask[r * cols..(r + 1) * cols].fill(true);
            }
        }
        mask
    }

    pub fn bind(&self, tape: &mut Tape) -> PoolVars {
        PoolVars {
            keys: self.keys.iter().map(|&id| tape.leaf(self.store.get(id))).collect(),
            components: self.values.iter().map(|&id| tape.leaf(self.store.get(id))).collect(),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> PoolVars {
        PoolVars {
            keys: self.keys.iter().map(|&id| tape.constant(self.store.get(id))).collect(),
            components: self.values.iter().map(|&id| tape.constant(self.store.get(id))).collect(),
        }
    }

    /// Maps bound variables back to store order for gradient accumulation.
    pub fn vars_in_store_order(&self, vars: &PoolVars) -> Vec<Var> {
        let mut out = vec![None; self.store.len()];
        for (s, (&k, &v)) in self.keys.iter().zip(&self.values).enumerate() {
            out[k.0] = Some(vars.keys[s]);
            out[v.0] = Some(vars.components[s]);
        }
        out.into_iter().map(|v| v.expect("every pool parameter bound")).collect()
    }

    /// Available `(keys, components)` rows of one layer on the tape.
    pub fn available_on_tape(&self, tape: &mut Tape, vars: &PoolVars, layer: usize) -> Result<(Var, Var)> {
        let s = self.slot(layer)?;
        let avail = self.available()?;
        if avail.end == self.components {
            return Ok((vars.keys[s], vars.components[s]));
        }
        let k = tape.slice_rows(vars.keys[s], 0, avail.end)?;
        let v = tape.slice_rows(vars.components[s], 0, avail.end)?;
        Ok((k, v))
    }

    fn query_var(tape: &mut Tape, q: &Query, dim: usize) -> Result<Var> {
        if q.vector.len() != dim {
            return Err(Error::dim("query", format!("length {} vs model width {dim}", q.vector.len())));
        }
        tape.constant_from(vec![1, dim], q.vector.clone())
    }

    /// Cosine-weighted prompt for `layer` (`L_p × D`).
    pub fn form_coda(&self, layer: usize, q: &Query) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constant(&mut tape);
        let (k, v) = self.available_on_tape(&mut tape, &vars, layer)?;
        let qv = Self::query_var(&mut tape, q, self.dim)?;
        let phi = coda_on_tape(&mut tape, qv, k, v, self.dim)?;
        Ok(tape.tensor(phi))
    }

    /// Top-`n` prompt for `layer` (`(n·L_p) × D`).
    pub fn form_topk(&self, layer: usize, q: &Query, n: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constant(&mut tape);
        let (k, v) = self.available_on_tape(&mut tape, &vars, layer)?;
        let qv = Self::query_var(&mut tape, q, self.dim)?;
        let phi = topk_on_tape(&mut tape, qv, k, v, self.dim, n)?;
        Ok(tape.tensor(phi))
    }
}

/// Where a [`PoolPrompter`] takes its queries from.
#[derive(Debug, Clone, Copy)]
pub enum QueryInput {
    /// Read `q_l` from each layer's input; `detach` stops gradients through
    /// the similarity weights into earlier prompts.
    OneStage { detach: bool },
    /// Precomputed prompt-free query shared by every layer.
    TwoStage(Var),
}

/// Forms each prompted layer's prefix from the pool during a forward pass.
pub struct PoolPrompter<'a> {
    pool: &'a PromptPool,
    vars: &'a PoolVars,
    formation: Formation,
    input: QueryInput,
    /// `(layer, q_l)` for every prompted layer, without stop-gradient.
    pub queries: Vec<(usize, Var)>,
}

impl<'a> PoolPrompter<'a> {
    pub fn new(pool: &'a PromptPool, vars: &'a PoolVars, formation: Formation, input: QueryInput) -> Self {
        Self {
            pool,
            vars,
            formation,
            input,
            queries: Vec::new(),
        }
    }
}

impl PromptProvider for PoolPrompter<'_> {
    fn prefix(&mut self, tape: &mut Tape, layer: usize, input: Var) -> Result<Option<Prefix>> {
        if !self.pool.layers.contains(&layer) {
            return Ok(None);
        }
        let (q_raw, q) = match self.input {
            QueryInput::OneStage { detach } => {
                let q = tape.slice_rows(input, 0, 1)?;
                (q, if detach { tape.detach(q) } else { q })
            }
            QueryInput::TwoStage(q) => (q, q),
        };
        self.queries.push((layer, q_raw));
        let (keys, comps) = self.pool.available_on_tape(tape, self.vars, layer)?;
        let dim = self.pool.dim;
        let prefix = match self.formation {
            Formation::Coda => {
                let phi = coda_on_tape(tape, q, keys, comps, dim)?;
                split_prompt(tape, phi, 1)?
            }
            Formation::Topk { n } => {
                let phi = topk_on_tape(tape, q, keys, comps, dim, n)?;
                split_prompt(tape, phi, n)?
            }
        };
        Ok(Some(prefix))
    }
}
