//! Analytic compute model for prompt-based continual learners.
//!
//! Counts matmul multiply-accumulates of a ViT forward pass and composes
//! them into the pipeline totals of the two-stage, one-stage and
//! one-stage-with-reference variants. Elementwise work (softmax, norms,
//! activations) is not counted.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::prompt::{Formation, PoolPrompter, PromptPool, QueryInput};
use crate::vit::{LayerSelect, ViTModel};

/// `forward : backward` cost ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FwBw {
    pub fw: u32,
    pub bw: u32,
}

impl FwBw {
    pub fn backward_factor(self) -> f64 {
        self.bw as f64 / self.fw as f64
    }

    fn rational(self) -> Ratio<i64> {
        Ratio::new(self.bw as i64, self.fw as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub prompt_length: usize,
    /// Layers `1..=prompted_layers` receive prefixes.
    pub prompted_layers: usize,
    /// Depth of the reference pass in the one-stage++ pipeline.
    pub ref_layer: LayerSelect,
    /// FLOPs per multiply-accumulate. 1 matches the convention behind the
    /// published ViT-B/16 figure of 17.6 GFLOPs per pass.
    pub flops_per_mac: u32,
    pub include_patch_embed: bool,
    pub include_classifier: bool,
    pub fw_bw_ratio_full: FwBw,
    pub fw_bw_ratio_prompt: FwBw,
    /// Also count the prefix key/value projections and prompt formation,
    /// which the tape instrumentation sees.
    pub include_prompt_ops: bool,
    /// Components visible to formation; only read with `include_prompt_ops`.
    pub prompt_components: usize,
    pub formation: Formation,
}

impl CostConfig {
    /// ViT-B/16 at 224² with 8-token prompts in layers 1 to 5.
    pub fn vitb16() -> Self {
        Self {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            num_classes: 100,
            prompt_length: 8,
            prompted_layers: 5,
            ref_layer: LayerSelect::Last,
            flops_per_mac: 1,
            include_patch_embed: true,
            include_classifier: true,
            fw_bw_ratio_full: FwBw { fw: 1, bw: 2 },
            fw_bw_ratio_prompt: FwBw { fw: 1, bw: 1 },
            include_prompt_ops: false,
            prompt_components: 100,
            formation: Formation::Coda,
        }
    }

    /// The small model used for CPU experiments.
    pub fn desk() -> Self {
        Self {
            depth: 6,
            dim: 32,
            heads: 4,
            image_size: 16,
            patch_size: 4,
            num_classes: 20,
            prompt_components: 20,
            ..Self::vitb16()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("flops_per_mac", self.flops_per_mac as usize),
            ("fw_bw_ratio_full.fw", self.fw_bw_ratio_full.fw as usize),
            ("fw_bw_ratio_prompt.fw", self.fw_bw_ratio_prompt.fw as usize),
        ];
        let mut problems: Vec<String> = positive
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| format!("{k} must be positive"))
            .collect();
        if self.patch_size > 0 && self.image_size % self.patch_size != 0 {
            problems.push(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.prompted_layers > self.depth {
            problems.push(format!("{} prompted layers exceed depth {}", self.prompted_layers, self.depth));
        }
        if self.prompt_length % 2 != 0 {
            problems.push(format!("prompt_length {} must be even", self.prompt_length));
        }
        let r = self.ref_layer.resolve(self.depth);
        if r == 0 || r > self.depth {
            problems.push(format!("ref_layer {} outside 1..={}", self.ref_layer, self.depth));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Rows of the formed prompt: top-k stacks `n` components.
    pub fn prompt_rows(&self) -> usize {
        match self.formation {
            Formation::Coda => self.prompt_length,
            Formation::Topk { n } => n * self.prompt_length,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2) + 1
    }
}

/// MACs of `blocks` transformer blocks plus the embedding and, optionally,
/// the classifier.
fn forward_macs(c: &CostConfig, with_prompts: bool, blocks: usize, classifier: bool) -> u64 {
    let d = c.dim as u64;
    let n = c.tokens() as u64;
    let patches = n - 1;
    let mut macs = 0u64;
    if c.include_patch_embed {
        macs += patches * (c.channels * c.patch_size * c.patch_size) as u64 * d;
    }
    for layer in 1..=blocks {
        let prompted = with_prompts && layer <= c.prompted_layers && c.prompt_length > 0;
        let extra = if prompted { (c.prompt_rows() / 2) as u64 } else { 0 };
        let n_kv = n + extra;
        macs += 4 * n * d * d;
        macs += 2 * n * n_kv * d;
        macs += 2 * c.mlp_ratio as u64 * n * d * d;
        if prompted && c.include_prompt_ops {
            let m = c.prompt_components as u64;
            let lp = c.prompt_length as u64;
            macs += 2 * extra * d * d;
            macs += m * d;
            if c.formation == Formation::Coda {
                macs += m * lp * d;
            }
        }
    }
    if classifier && c.include_classifier {
        macs += d * c.num_classes as u64;
    }
    macs
}

/// FLOPs of one full forward pass.
pub fn flops_vit_forward(config: &CostConfig, with_prompts: bool) -> f64 {
    forward_macs(config, with_prompts, config.depth, true) as f64 * config.flops_per_mac as f64
}

/// FLOPs of the prompt-free pass that only produces a [CLS] embedding
/// after `layers` blocks.
pub fn flops_query_pass(config: &CostConfig, layers: usize) -> f64 {
    forward_macs(config, false, layers, false) as f64 * config.flops_per_mac as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    TwoStage,
    OneStage,
    OneStagePp,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::TwoStage, Pipeline::OneStage, Pipeline::OneStagePp];
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::TwoStage => "two_stage",
            Pipeline::OneStage => "one_stage",
            Pipeline::OneStagePp => "one_stage_pp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Infer => "infer",
        })
    }
}

/// Stage breakdown of one pipeline, in FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineCost {
    pub mode: Pipeline,
    pub phase: Phase,
    pub query_fw: f64,
    pub backbone_fw: f64,
    pub backbone_bw: f64,
    pub total: f64,
}

pub fn pipeline_cost(config: &CostConfig, mode: Pipeline, phase: Phase) -> PipelineCost {
    let prompted = flops_vit_forward(config, true);
    let query_fw = match (mode, phase) {
        (Pipeline::TwoStage, _) => flops_query_pass(config, config.depth),
        (Pipeline::OneStagePp, Phase::Train) => flops_query_pass(config, config.ref_layer.resolve(config.depth)),
        _ => 0.0,
    };
    let backbone_bw = match phase {
        Phase::Train => prompted * config.fw_bw_ratio_prompt.backward_factor(),
        Phase::Infer => 0.0,
    };
    PipelineCost {
        mode,
        phase,
        query_fw,
        backbone_fw: prompted,
        backbone_bw,
        total: query_fw + prompted + backbone_bw,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub mode: Pipeline,
    pub phase: Phase,
    pub query_fw_gflops: f64,
    pub backbone_fw_gflops: f64,
    pub backbone_bw_gflops: f64,
    pub gflops: f64,
    pub percent_of_two_stage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub plain_forward_gflops: f64,
    pub prompted_forward_gflops: f64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn row(&self, mode: Pipeline, phase: Phase) -> &CostRow {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.phase == phase)
            .expect("report covers every mode and phase")
    }
}

pub fn cost_report(config: &CostConfig) -> Result<CostReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for phase in [Phase::Train, Phase::Infer] {
        let base = pipeline_cost(config, Pipeline::TwoStage, phase).total;
        for mode in Pipeline::ALL {
            let c = pipeline_cost(config, mode, phase);
            rows.push(CostRow {
                mode,
                phase,
                query_fw_gflops: c.query_fw / 1e9,
                backbone_fw_gflops: c.backbone_fw / 1e9,
                backbone_bw_gflops: c.backbone_bw / 1e9,
                gflops: c.total / 1e9,
                percent_of_two_stage: 100.0 * c.total / base,
            });
        }
    }
    Ok(CostReport {
        config: config.clone(),
        plain_forward_gflops: flops_vit_forward(config, false) / 1e9,
        prompted_forward_gflops: flops_vit_forward(config, true) / 1e9,
        rows,
    })
}

/// One line of a design-space sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Pipeline,
    pub phase: Phase,
    pub l_p: usize,
    pub layers: usize,
    pub gflops: f64,
    pub percent_of_two_stage: f64,
}

/// Every (prompt length, prompted-layer count) pair over all pipelines.
pub fn cost_sweep(base: &CostConfig, prompt_lengths: &[usize], layer_counts: &[usize]) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for &lp in prompt_lengths {
        for &layers in layer_counts {
            let cfg = CostConfig {
                prompt_length: lp,
                prompted_layers: layers,
                ..base.clone()
            };
            let report = cost_report(&cfg)?;
            out.extend(report.rows.into_iter().map(|r| SweepRow {
                mode: r.mode,
                phase: r.phase,
                l_p: lp,
                layers,
                gflops: r.gflops,
                percent_of_two_stage: r.percent_of_two_stage,
            }));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMethod {
    Er,
    Lwf,
    PclTwoStage,
    Os,
    OsPp,
}

impl fmt::Display for TrainingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Er => "ER",
            Self::Lwf => "LwF",
            Self::PclTwoStage => "PCL two-stage",
            Self::Os => "OS-Prompt",
            Self::OsPp => "OS-Prompt++",
        })
    }
}

impl FromStr for TrainingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+', ' '], "_").as_str() {
            "er" => Ok(Self::Er),
            "lwf" => Ok(Self::Lwf),
            "pcl" | "pcl_two_stage" | "two_stage" => Ok(Self::PclTwoStage),
            "os" | "os_prompt" => Ok(Self::Os),
            "os_pp" | "os__" | "os_prompt__" => Ok(Self::OsPp),
            _ => Err(Error::Config(format!("unknown training method '{s}'"))),
        }
    }
}

/// Training cost relative to experience replay, in forward-pass units.
///
/// ER pays a forward and a full backward. LwF adds a teacher forward.
/// Prompt learners pay a prompt-only backward; the two-stage learner and
/// the reference-query variant add a frozen forward.
pub fn relative_training_complexity(method: TrainingMethod) -> Ratio<i64> {
    let full = FwBw { fw: 1, bw: 2 }.rational();
    let prompt = FwBw { fw: 1, bw: 1 }.rational();
    let one = Ratio::from_integer(1);
    let er = one + full;
    let cost = match method {
        TrainingMethod::Er => er,
        TrainingMethod::Lwf => one + one + full,
        TrainingMethod::PclTwoStage | TrainingMethod::OsPp => one + one + prompt,
        TrainingMethod::Os => one + prompt,
    };
    cost / er
}

/// Counted matmul MACs of one inference pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTally {
    pub query: u64,
    pub backbone: u64,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.query + self.backbone
    }
}

/// Runs one instrumented inference pass and returns its MAC tally.
///
/// `two_stage` adds the prompt-free query pass in front of the backbone.
pub fn measured_op_count(
    model: &ViTModel,
    pool: &PromptPool,
    formation: Formation,
    two_stage: bool,
    image: &Tensor,
) -> Result<MacTally> {
    let mut tape = Tape::new();
    let (query, input) = if two_stage {
        let q = model.plain_cls_on_tape(&mut tape, image, LayerSelect::Last)?;
        (tape.mac_count(), QueryInput::TwoStage(q))
    } else {
        (0, QueryInput::OneStage { detach: true })
    };
    let vars = model.bind_constant(&mut tape);
    let pool_vars = pool.bind_constant(&mut tape);
    let mut prompter = PoolPrompter::new(pool, &pool_vars, formation, input);
    model.forward(&mut tape, &vars, image, &mut prompter)?;
    Ok(MacTally {
        query,
        backbone: tape.mac_count() - query,
    })
}
