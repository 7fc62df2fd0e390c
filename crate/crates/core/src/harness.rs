//! Class-incremental driver: task splits, pretraining, per-task training,
//! evaluation, metrics and drift.

use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, ExperimentConfig, Method, OptimizerBlock, PromptBlock};
use crate::data::{cifar100_load, subset_classes, synth_split, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamId, Tape, Tensor, Var};
use crate::prompt::{PoolPrompter, PromptPool, QueryInput, QueryMode};
use crate::qr::{profile_on_tape, qr_loss_on_tape, total_loss_on_tape, QrConfig};
use crate::rng::{derive_seed, substream, Rng};
use crate::vit::{LayerSelect, NoPrompts, ViTModel};

/// Permutes `class_ids` with the seed's `order` stream and cuts it into
/// `tasks` equal chunks.
pub fn split_classes(class_ids: &[usize], tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || class_ids.is_empty() || class_ids.len() % tasks != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {tasks} equal tasks",
            class_ids.len()
        )));
    }
    let mut order = class_ids.to_vec();
    order.shuffle(&mut substream(seed, "order"));
    Ok(order.chunks(class_ids.len() / tasks).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub task: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    Closed,
    Task(usize),
    Joint,
}

/// Task-partitioned data with enforced sequential access to training samples.
///
/// Labels are output indices: the `k`-th class of task `t` maps to
/// `t·classes_per_task + k`.
#[derive(Debug, Clone)]
pub struct TaskStream {
    classes: Vec<Vec<usize>>,
    train: LabeledImageSet,
    test: LabeledImageSet,
    train_ids: Vec<Vec<usize>>,
    test_ids: Vec<Vec<usize>>,
    access: Access,
    log: Vec<AccessRecord>,
}

impl TaskStream {
    pub fn new(
        train: &LabeledImageSet,
        test: &LabeledImageSet,
        class_ids: &[usize],
        tasks: usize,
        seed: u64,
    ) -> Result<Self> {
        let classes = split_classes(class_ids, tasks, seed)?;
        let flat: Vec<usize> = classes.concat();
        let train = subset_classes(train, &flat, true)?;
        let test = subset_classes(test, &flat, true)?;
        let per = flat.len() / tasks;
        let by_task = |set: &LabeledImageSet| {
            let mut ids = vec![Vec::new(); tasks];
            for (i, &l) in set.labels().iter().enumerate() {
                ids[l / per].push(i);
            }
            ids
        };
        Ok(Self {
            train_ids: by_task(&train),
            test_ids: by_task(&test),
            classes,
            train,
            test,
            access: Access::Closed,
            log: Vec::new(),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.classes.len()
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes[0].len()
    }

    pub fn num_outputs(&self) -> usize {
        self.num_tasks() * self.classes_per_task()
    }

    /// Original class ids of every task, in task order.
    pub fn task_classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn output_range(&self, task: usize) -> Range<usize> {
        let c = self.classes_per_task();
        task * c..(task + 1) * c
    }

    pub fn train_ids(&self, task: usize) -> &[usize] {
        &self.train_ids[task]
    }

    pub fn train_len(&self, task: usize) -> usize {
        self.train_ids[task].len()
    }

    /// Opens task `task`; tasks open strictly in order and close the previous one.
    pub fn begin_task(&mut self, task: usize) -> Result<()> {
        let expected = match self.access {
            Access::Closed => 0,
            Access::Task(t) => t + 1,
            Access::Joint => return Err(Error::contract("joint stream cannot switch to per-task access")),
        };
        if task != expected || task >= self.num_tasks() {
            return Err(Error::contract(format!("task {task} opened out of order; expected {expected}")));
        }
        self.access = Access::Task(task);
        Ok(())
    }

    /// Opens every task's training data at once (joint upper bound).
    pub fn begin_joint(&mut self) -> Result<()> {
        if self.access != Access::Closed {
            return Err(Error::contract("joint access must precede any task"));
        }
        self.access = Access::Joint;
        Ok(())
    }

    /// `k`-th training sample of `task`, logged. Only the open task is readable.
    pub fn train_sample(&mut self, task: usize, k: usize) -> Result<(&Tensor, usize)> {
        match self.access {
            Access::Task(t) if t == task => {}
            Access::Joint if task < self.num_tasks() => {}
            _ => {
                return Err(Error::contract(format!(
                    "training data of task {task} is not accessible now"
                )))
            }
        }
        let id = *self.train_ids[task]
            .get(k)
            .ok_or_else(|| Error::contract(format!("task {task} has no sample {k}")))?;
        self.log.push(AccessRecord { task, sample: id });
        Ok((self.train.image(id), self.train.labels()[id]))
    }

    pub fn access_log(&self) -> &[AccessRecord] {
        &self.log
    }

    pub fn test_samples(&self, task: usize) -> impl Iterator<Item = (&Tensor, usize)> + '_ {
        self.test_ids[task].iter().map(|&i| (self.test.image(i), self.test.labels()[i]))
    }

    pub fn test_images(&self) -> &[Tensor] {
        self.test.images()
    }
}

/// `a[t][j]`: accuracy on task `j` right after training task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::contract(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract("accuracies must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.rows.len() {
            return Err(Error::contract(format!(
                "metrics after task {n} need {n} rows, matrix has {}",
                self.rows.len()
            )));
        }
        Ok(())
    }

    /// Mean accuracy over all tasks after task `n` (1-based).
    pub fn metric_an(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        let last = &self.rows[n - 1];
        Ok(last.iter().sum::<f64>() / n as f64)
    }

    /// Mean drop from each earlier task's best accuracy to its accuracy
    /// after task `n`, each drop clamped at zero.
    pub fn metric_fn(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        if n == 1 {
            return Ok(0.0);
        }
        let last = &self.rows[n - 1];
        let total: f64 = (0..n - 1)
            .map(|j| {
                let best = (j..n - 1).map(|t| self.rows[t][j]).fold(f64::NEG_INFINITY, f64::max);
                (best - last[j]).max(0.0)
            })
            .sum();
        Ok(total / (n - 1) as f64)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Continual train/test sets plus the disjoint pretraining split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub base_train: LabeledImageSet,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub continual_classes: Vec<usize>,
}

/// Loads or generates the dataset, normalizes it with training statistics
/// and separates base classes `[0, base)` from continual classes.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let total = config.base_classes + config.continual_classes;
    let (mut train, mut test) = match &config.dataset {
        DatasetConfig::Synthetic {
            train_per_class,
            test_per_class,
            ..
        } => synth_split(
            total,
            *train_per_class,
            *test_per_class,
            config.vit.image_size,
            &config.synth_options().expect("synthetic options"),
            derive_seed(config.seed, "synth"),
        )?,
        DatasetConfig::Cifar100 { path } => (cifar100_load(path, Split::Train)?, cifar100_load(path, Split::Test)?),
    };
    let base: Vec<usize> = (0..config.base_classes).collect();
    let continual: Vec<usize> = (config.base_classes..total).collect();
    check_disjoint(&base, &continual)?;
    let all: Vec<usize> = (0..total).collect();
    if train.num_classes() != total {
        train = subset_classes(&train, &all, false)?;
        test = subset_classes(&test, &all, false)?;
    }
    let stats = train.channel_stats()?;
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    let base_train = if base.is_empty() {
        train.clone()
    } else {
        subset_classes(&train, &base, true)?
    };
    Ok(PreparedData {
        base_train,
        train,
        test,
        continual_classes: continual,
    })
}

pub fn check_disjoint(base: &[usize], continual: &[usize]) -> Result<()> {
    if let Some(c) = base.iter().find(|c| continual.contains(c)) {
        return Err(Error::Config(format!("class {c} is both a base and a continual class")));
    }
    Ok(())
}

fn head_mask(model: &ViTModel, id: ParamId, outputs: &Range<usize>) -> Option<Vec<bool>> {
    let [w, b] = model.head_ids();
    let c = model.config().num_classes;
    if id == w {
        let d = model.config().dim;
        Some((0..d * c).map(|i| outputs.contains(&(i % c))).collect())
    } else if id == b {
        Some((0..c).map(|i| outputs.contains(&i)).collect())
    } else {
        None
    }
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn steps(n: usize, batch: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(batch)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Frozen pretrained backbone and its accuracy on the base training split.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: ViTModel,
    pub base_accuracy: f64,
}

/// Supervised training of every weight on the base split, then freezing.
pub fn pretrain_backbone(config: &ExperimentConfig, base: &LabeledImageSet) -> Result<Pretrained> {
    let vit = config.vit_config(base.num_classes().max(1));
    let mut model = ViTModel::new(vit, &mut substream(config.seed, "init"))?;
    let o = &config.optimizer;
    if o.pretrain_epochs > 0 && !base.is_empty() {
        model.unfreeze();
        let mut adam = Adam::new(model.store(), o.pretrain_lr, steps(base.len(), o.batch, o.pretrain_epochs));
        let mut rng = substream(config.seed, "pretrain.order");
        for _ in 0..o.pretrain_epochs {
            for chunk in shuffled(base.len(), &mut rng).chunks(o.batch) {
                model.store_mut().zero_grads();
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let mut tape = Tape::new();
                    let vars = model.bind(&mut tape);
                    let out = model.forward(&mut tape, &vars, base.image(i), &mut NoPrompts)?;
                    let ce = tape.cross_entropy(out.logits, base.labels()[i], &[])?;
                    let loss = tape.scale(ce, scale);
                    let grads = tape.backward(loss)?;
                    model.store_mut().accumulate(&vars.vars, &grads);
                }
                adam.step(model.store_mut(), |_| None);
            }
        }
    }
    model.freeze();
    Pretrained::evaluate(model, base)
}

impl Pretrained {
    /// Wraps a trained backbone, measuring its accuracy on `base`.
    pub fn evaluate(mut model: ViTModel, base: &LabeledImageSet) -> Result<Self> {
        model.freeze();
        let correct: usize = (0..base.len())
            .into_par_iter()
            .map(|i| -> Result<usize> {
                let (logits, _) = model.forward_backbone(base.image(i), &[])?;
                Ok(usize::from(argmax(logits.values()) == base.labels()[i]))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        let base_accuracy = if base.is_empty() { 0.0 } else { correct as f64 / base.len() as f64 };
        Ok(Pretrained { model, base_accuracy })
    }
}

/// Model, optional prompt pool and the knobs that govern their training.
#[derive(Debug, Clone)]
pub struct Learner {
    pub method: Method,
    pub model: ViTModel,
    pub pool: Option<PromptPool>,
    pub prompt: PromptBlock,
    pub qr: QrConfig,
    pub optimizer: OptimizerBlock,
    seed: u64,
}

impl Learner {
    /// Fresh classifier over `outputs` classes on top of the pretrained backbone.
    pub fn new(config: &ExperimentConfig, pretrained: &ViTModel, outputs: usize) -> Result<Self> {
        let mut model = pretrained.clone();
        model.reset_head(outputs, &mut substream(config.seed, "head"));
        let pool = match config.method {
            Method::Prompt => {
                model.freeze();
                Some(PromptPool::for_model(model.config(), config.prompt.components, config.tasks)?)
            }
            Method::Ft | Method::Ub => {
                model.unfreeze();
                None
            }
        };
        Ok(Self {
            method: config.method,
            model,
            pool,
            prompt: config.prompt.clone(),
            qr: config.qr,
            optimizer: config.optimizer.clone(),
            seed: config.seed,
        })
    }

    /// Reassembles a learner from checkpointed parts.
    pub fn from_parts(config: &ExperimentConfig, model: ViTModel, pool: Option<PromptPool>) -> Result<Self> {
        if pool.is_some() != (config.method == Method::Prompt) {
            return Err(Error::Checkpoint(format!(
                "method {:?} does not match the stored prompt pool",
                config.method
            )));
        }
        Ok(Self {
            method: config.method,
            model,
            pool,
            prompt: config.prompt.clone(),
            qr: config.qr,
            optimizer: config.optimizer.clone(),
            seed: config.seed,
        })
    }

    /// Builds the forward graph for one image. Returns logits, and the QR
    /// term when it is enabled.
    fn graph(&self, tape: &mut Tape, image: &Tensor, train: bool) -> Result<(Var, Option<Var>, Vec<Var>, Vec<Var>)> {
        let mvars = if train {
            self.model.bind(tape)
        } else {
            self.model.bind_constant(tape)
        };
        let Some(pool) = &self.pool else {
            let out = self.model.forward(tape, &mvars, image, &mut NoPrompts)?;
            return Ok((out.logits, None, mvars.vars, Vec::new()));
        };
        let pvars = if train { pool.bind(tape) } else { pool.bind_constant(tape) };
        let input = match self.prompt.query {
            QueryMode::OneStage => QueryInput::OneStage {
                detach: !self.prompt.query_grad,
            },
            QueryMode::TwoStage => QueryInput::TwoStage(self.model.plain_cls_on_tape(tape, image, LayerSelect::Last)?),
        };
        let mut prompter = PoolPrompter::new(pool, &pvars, self.prompt.formation, input);
        let out = self.model.forward(tape, &mvars, image, &mut prompter)?;
        let queries = std::mem::take(&mut prompter.queries);
        let qr = if train && self.qr.enabled {
            let r = self.model.plain_cls_on_tape(tape, image, self.qr.ref_layer)?;
            let mut profiles = Vec::with_capacity(queries.len());
            for (layer, q) in queries {
                let (keys, _) = pool.available_on_tape(tape, &pvars, layer)?;
                let a_q = profile_on_tape(tape, q, keys, &self.qr)?;
                let a_r = profile_on_tape(tape, r, keys, &self.qr)?;
                profiles.push((a_q, a_r));
            }
            Some(qr_loss_on_tape(tape, &profiles)?)
        } else {
            None
        };
        Ok((out.logits, qr, mvars.vars, pool.vars_in_store_order(&pvars)))
    }

    fn loss_graph(&self, tape: &mut Tape, image: &Tensor, label: usize, mask: &[bool]) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let (logits, qr, mvars, pvars) = self.graph(tape, image, true)?;
        let ce = tape.cross_entropy(logits, label, mask)?;
        let loss = match qr {
            Some(q) => total_loss_on_tape(tape, ce, q, self.qr.lambda)?,
            None => ce,
        };
        Ok((loss, mvars, pvars))
    }

    /// Training loss of one example: masked CE plus the weighted QR term
    /// when it is enabled.
    pub fn example_loss(&self, image: &Tensor, label: usize, mask: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _, _) = self.loss_graph(&mut tape, image, label, mask)?;
        Ok(tape.value(loss)[0])
    }

    /// Adds `scale ·∇loss` for one example into the parameter gradients and
    /// returns the unscaled loss.
    pub fn accumulate_example(&mut self, image: &Tensor, label: usize, mask: &[bool], scale: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, mvars, pvars) = self.loss_graph(&mut tape, image, label, mask)?;
        let value = tape.value(loss)[0];
        let scaled = tape.scale(loss, scale);
        let grads = tape.backward(scaled)?;
        self.model.store_mut().accumulate(&mvars, &grads);
        if let Some(pool) = &mut self.pool {
            pool.store_mut().accumulate(&pvars, &grads);
        }
        Ok(value)
    }

    pub fn zero_grads(&mut self) {
        self.model.store_mut().zero_grads();
        if let Some(pool) = &mut self.pool {
            pool.store_mut().zero_grads();
        }
    }

    /// Trains on task `task` only; returns the mean loss of every epoch.
    pub fn train_task(&mut self, stream: &mut TaskStream, task: usize) -> Result<Vec<f64>> {
        if self.method == Method::Ub {
            return Err(Error::contract("the joint baseline trains through train_joint"));
        }
        if let Some(pool) = &mut self.pool {
            pool.expand_for_task(task, &mut substream(self.seed, &format!("prompt.task{task}")))?;
        }
        let outputs = stream.output_range(task);
        let mask: Vec<bool> = (0..stream.num_outputs()).map(|c| outputs.contains(&c)).collect();
        let n = stream.train_len(task);
        let o = self.optimizer.clone();
        let total = steps(n, o.batch, o.epochs);
        let mut adam_model = Adam::new(self.model.store(), o.lr, total);
        let mut adam_pool = self.pool.as_ref().map(|p| Adam::new(p.store(), o.lr, total));
        let mut rng = substream(self.seed, &format!("data.task{task}"));
        let mut losses = Vec::with_capacity(o.epochs);
        for _ in 0..o.epochs {
            let mut sum = 0.0;
            for chunk in shuffled(n, &mut rng).chunks(o.batch) {
                self.zero_grads();
                let scale = 1.0 / chunk.len() as f64;
                for &k in chunk {
                    let (image, label) = stream.train_sample(task, k)?;
                    sum += self.accumulate_example(image, label, &mask, scale)?;
                }
                let model = &self.model;
                match self.method {
                    Method::Prompt => {
                        let masks: Vec<Option<Vec<bool>>> =
                            model.store().ids().map(|id| head_mask(model, id, &outputs)).collect();
                        adam_model.step(self.model.store_mut(), |id| masks[id.0].clone());
                    }
                    _ => adam_model.step(self.model.store_mut(), |_| None),
                }
                if let (Some(pool), Some(adam)) = (&mut self.pool, &mut adam_pool) {
                    let masks: Vec<Vec<bool>> = pool.store().ids().map(|id| pool.trainable_mask(id)).collect();
                    adam.step(pool.store_mut(), |id| Some(masks[id.0].clone()));
                }
            }
            losses.push(sum / n as f64);
        }
        Ok(losses)
    }

    /// Joint training on every task's data at once, no logit masking.
    pub fn train_joint(&mut self, stream: &mut TaskStream) -> Result<Vec<f64>> {
        if self.pool.is_some() {
            return Err(Error::contract("joint training uses the plain backbone"));
        }
        stream.begin_joint()?;
        let all: Vec<(usize, usize)> = (0..stream.num_tasks())
            .flat_map(|t| (0..stream.train_len(t)).map(move |k| (t, k)))
            .collect();
        let o = self.optimizer.clone();
        let mut adam = Adam::new(self.model.store(), o.lr, steps(all.len(), o.batch, o.epochs));
        let mut rng = substream(self.seed, "data.joint");
        let mut losses = Vec::with_capacity(o.epochs);
        for _ in 0..o.epochs {
            let mut sum = 0.0;
            for chunk in shuffled(all.len(), &mut rng).chunks(o.batch) {
                self.zero_grads();
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let (t, k) = all[i];
                    let (image, label) = stream.train_sample(t, k)?;
                    sum += self.accumulate_example(image, label, &[], scale)?;
                }
                adam.step(self.model.store_mut(), |_| None);
            }
            losses.push(sum / all.len() as f64);
        }
        Ok(losses)
    }

    /// Logits over every output, with prompts formed as at test time.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (logits, _, _, _) = self.graph(&mut tape, image, false)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Block outputs `x_1 .. x_depth` ([CLS] rows) under this learner's prompts.
    pub fn cls_by_layer(&self, image: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mvars = self.model.bind_constant(&mut tape);
        let layer_inputs = match &self.pool {
            None => self.model.forward(&mut tape, &mvars, image, &mut NoPrompts)?.layer_inputs,
            Some(pool) => {
                let pvars = pool.bind_constant(&mut tape);
                let input = match self.prompt.query {
                    QueryMode::OneStage => QueryInput::OneStage { detach: true },
                    QueryMode::TwoStage => {
                        QueryInput::TwoStage(self.model.plain_cls_on_tape(&mut tape, image, LayerSelect::Last)?)
                    }
                };
                let mut prompter = PoolPrompter::new(pool, &pvars, self.prompt.formation, input);
                self.model.forward(&mut tape, &mvars, image, &mut prompter)?.layer_inputs
            }
        };
        Ok(layer_inputs[1..].iter().map(|&x| tape.value(x)[..self.model.config().dim].to_vec()).collect())
    }

    /// Accuracy on every task `0..=upto`, predicting over all classes seen
    /// so far with no task identity.
    pub fn evaluate_all(&self, stream: &TaskStream, upto: usize) -> Result<Vec<f64>> {
        let seen = stream.output_range(upto).end;
        (0..=upto)
            .map(|task| {
                let samples: Vec<(&Tensor, usize)> = stream.test_samples(task).collect();
                let correct: usize = samples
                    .par_iter()
                    .map(|(image, label)| -> Result<usize> {
                        let logits = self.logits(image)?;
                        Ok(usize::from(argmax(&logits[..seen]) == *label))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .sum();
                Ok(if samples.is_empty() {
                    0.0
                } else {
                    correct as f64 / samples.len() as f64
                })
            })
            .collect()
    }

    pub fn backbone_checksum(&self) -> String {
        self.model.backbone_checksum()
    }

    /// SHA-256 of one task's pool rows across every prompted layer.
    pub fn partition_checksum(&self, task: usize) -> Option<String> {
        let pool = self.pool.as_ref()?;
        let range = pool.task_ranges().get(task)?.clone();
        let mut h = Sha256::new();
        for &layer in pool.layers() {
            for t in [pool.keys(layer).ok()?, pool.components(layer).ok()?] {
                for r in range.clone() {
                    for v in t.row(r) {
                        h.update(v.to_bits().to_le_bytes());
                    }
                }
            }
        }
        Some(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub layer: usize,
    pub task_pair: String,
    pub distance: f64,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine distance of a zero embedding"));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Mean `1 − cos` between the two learners' per-layer [CLS] embeddings.
pub fn drift_analysis(a: &Learner, b: &Learner, images: &[Tensor], task_pair: &str) -> Result<Vec<DriftRow>> {
    let (ca, cb) = (a.model.config(), b.model.config());
    if ca.depth != cb.depth || ca.dim != cb.dim || ca.image_size != cb.image_size || ca.patch_size != cb.patch_size {
        return Err(Error::contract("drift snapshots differ in architecture"));
    }
    if images.is_empty() {
        return Err(Error::contract("drift analysis needs at least one image"));
    }
    let per_image: Vec<Vec<f64>> = images
        .par_iter()
        .map(|im| -> Result<Vec<f64>> {
            let (xa, xb) = (a.cls_by_layer(im)?, b.cls_by_layer(im)?);
            xa.iter().zip(&xb).map(|(u, v)| cosine_distance(u, v)).collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..ca.depth)
        .map(|l| DriftRow {
            layer: l + 1,
            task_pair: task_pair.to_string(),
            distance: per_image.iter().map(|d| d[l]).sum::<f64>() / images.len() as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub method: Method,
    pub config: ExperimentConfig,
    pub task_classes: Vec<Vec<usize>>,
    pub pretrain_base_accuracy: f64,
    /// Absent for the joint baseline, which has no per-task history.
    pub accuracy_matrix: Option<AccuracyMatrix>,
    pub final_accuracies: Vec<f64>,
    pub a_n: f64,
    /// Fraction in `[0, 1]`; absent for the joint baseline.
    pub f_n: Option<f64>,
    pub train_loss: Vec<Vec<f64>>,
    pub backbone_checksums: Vec<String>,
    /// `[t][j]`: checksum of task `j`'s prompt rows after training task `t`.
    pub partition_checksums: Vec<Vec<String>>,
    pub drift: Vec<DriftRow>,
}

/// A finished run plus the state needed by checkpointing and audits.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub learner: Learner,
    pub access_log: Vec<AccessRecord>,
    pub train_ids: Vec<Vec<usize>>,
}

/// Trains every task in order (or jointly for the upper bound), evaluating
/// after each. `after_task` sees the learner after every task.
pub fn run_continual(
    config: &ExperimentConfig,
    pretrained: &Pretrained,
    data: &PreparedData,
    after_task: &mut dyn FnMut(usize, &Learner) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    let mut stream = TaskStream::new(&data.train, &data.test, &data.continual_classes, config.tasks, config.seed)?;
    let mut learner = Learner::new(config, &pretrained.model, stream.num_outputs())?;
    let n = stream.num_tasks();
    let mut matrix = AccuracyMatrix::new();
    let mut train_loss = Vec::new();
    let mut backbone_checksums = Vec::new();
    let mut partition_checksums = Vec::new();
    let mut drift = Vec::new();
    let final_row;
    if config.method == Method::Ub {
        train_loss.push(learner.train_joint(&mut stream)?);
        final_row = learner.evaluate_all(&stream, n - 1)?;
        backbone_checksums.push(learner.backbone_checksum());
        after_task(n - 1, &learner)?;
    } else {
        let mut first: Option<Learner> = None;
        for t in 0..n {
            stream.begin_task(t)?;
            train_loss.push(learner.train_task(&mut stream, t)?);
            matrix.push_row(learner.evaluate_all(&stream, t)?)?;
            backbone_checksums.push(learner.backbone_checksum());
            partition_checksums.push((0..=t).filter_map(|j| learner.partition_checksum(j)).collect());
            after_task(t, &learner)?;
            if t == 0 {
                first = Some(learner.clone());
            }
        }
        if let Some(first) = first.filter(|_| n > 1) {
            drift = drift_analysis(&first, &learner, stream.test_images(), &format!("1-{n}"))?;
        }
        final_row = matrix.rows()[n - 1].clone();
    }
    let a_n = final_row.iter().sum::<f64>() / n as f64;
    let (accuracy_matrix, f_n) = if config.method == Method::Ub {
        (None, None)
    } else {
        let f = matrix.metric_fn(n)?;
        (Some(matrix), Some(f))
    };
    let train_ids = (0..n).map(|t| stream.train_ids(t).to_vec()).collect();
    Ok(RunOutput {
        result: RunResult {
            seed: config.seed,
            method: config.method,
            config: config.clone(),
            task_classes: stream.task_classes().to_vec(),
            pretrain_base_accuracy: pretrained.base_accuracy,
            accuracy_matrix,
            final_accuracies: final_row,
            a_n,
            f_n,
            train_loss,
            backbone_checksums,
            partition_checksums,
            drift,
        },
        learner,
        access_log: stream.access_log().to_vec(),
        train_ids,
    })
}

/// Data preparation, pretraining and the continual run in one call.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = prepare_data(config)?;
    let pretrained = pretrain_backbone(config, &data.base_train)?;
    run_continual(config, &pretrained, &data, &mut |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_and_determinism() {
        let ids: Vec<usize> = (0..20).collect();
        let a = split_classes(&ids, 5, 0).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|t| t.len() == 4));
        assert_eq!(a, split_classes(&ids, 5, 0).unwrap());
        let mut seen = a.concat();
        seen.sort_unstable();
        assert_eq!(seen, ids);
        let perms: Vec<Vec<usize>> = (0..5).map(|s| split_classes(&ids, 5, s).unwrap().concat()).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(perms[i], perms[j]);
            }
        }
        assert!(matches!(split_classes(&ids, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_by_hand() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
        assert!((m.metric_an(2).unwrap() - 0.75).abs() < 1e-15);
        assert!((m.metric_fn(2).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(m.metric_fn(1).unwrap(), 0.0);
        assert_eq!(m.metric_an(1).unwrap(), 0.9);
        assert!(m.metric_an(3).is_err());
        let rising = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.5], vec![0.7, 0.6, 0.9]]).unwrap();
        assert_eq!(rising.metric_fn(3).unwrap(), 0.0);
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn overlap_is_a_config_error() {
        assert!(matches!(check_disjoint(&[1, 2], &[2, 3]), Err(Error::Config(_))));
        assert!(check_disjoint(&[0, 1], &[2, 3]).is_ok());
    }

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[0.3, -1.2], &[0.3, -1.2]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[-2.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
    }
}
