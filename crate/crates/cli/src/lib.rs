//! Subcommand implementations behind the `osprompt` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use osprompt_core::checkpoint::{write_atomic, Checkpoint};
use osprompt_core::config::ExperimentConfig;
use osprompt_core::cost::{
    cost_report, cost_sweep, relative_training_complexity, CostConfig, CostReport, SweepRow, TrainingMethod,
};
use osprompt_core::harness::{
    drift_analysis, prepare_data, pretrain_backbone, run_continual, AccuracyMatrix, DriftRow, PreparedData,
    Pretrained, RunResult, TaskStream,
};
use osprompt_core::{Error, Result};
use serde_json::{json, Value};

/// Where a config comes from on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Vitb16,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vitb16" => Ok(Preset::Vitb16),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset {other:?}; expected vitb16 or desk")),
        }
    }
}

/// Loads `--config`, or the desk preset, and applies `--seed`.
pub fn resolve_config(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match (path, preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(Preset::Desk) | None) => ExperimentConfig::desk(),
        (None, Some(Preset::Vitb16)) => {
            return Err(Error::Config(
                "the vitb16 preset only describes the cost model; pass --config or --preset desk".into(),
            ))
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--out`, else the config's `output_dir`, else `out`.
pub fn resolve_out(out: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut text = cfg.to_json();
    text.push('\n');
    write_atomic(&dir.join("config.json"), text.as_bytes())
}

pub fn accuracy_matrix_rows(m: &AccuracyMatrix) -> Vec<Vec<String>> {
    m.rows()
        .iter()
        .enumerate()
        .flat_map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(move |(j, a)| vec![(t + 1).to_string(), (j + 1).to_string(), a.to_string()])
        })
        .collect()
}

fn drift_rows(rows: &[DriftRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| vec![r.layer.to_string(), r.task_pair.clone(), r.distance.to_string()])
        .collect()
}

/// Output of `pretrain`: `backbone.{json,bin}`, `pretrain.json`, `config.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Pretrained> {
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    let pre = pretrain_backbone(cfg, &data.base_train)?;
    Checkpoint {
        config: cfg.clone(),
        model: pre.model.clone(),
        pool: None,
    }
    .save(&out.join("backbone"))?;
    write_config(out, cfg)?;
    write_json(
        &out.join("pretrain.json"),
        &json!({ "seed": cfg.seed, "base_accuracy": pre.base_accuracy }),
    )?;
    write_json(
        &out.join("timing.json"),
        &json!({ "pretrain_seconds": start.elapsed().as_secs_f64() }),
    )?;
    Ok(pre)
}

/// Loads a `pretrain` backbone and checks it fits `cfg`.
pub fn load_backbone(path: &Path, cfg: &ExperimentConfig, data: &PreparedData) -> Result<Pretrained> {
    let ck = Checkpoint::load(path)?;
    let expected = cfg.vit_config(ck.model.config().num_classes);
    if ck.model.config() != &expected {
        return Err(Error::Checkpoint(format!(
            "backbone {} was built for a different architecture",
            path.display()
        )));
    }
    Pretrained::evaluate(ck.model, &data.base_train)
}

/// Output of `train`: `result.json`, `accuracy_matrix.csv`, `drift.csv`,
/// `timing.json`, `config.json` and `checkpoints/task_<t>.{json,bin}`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, backbone: Option<&Path>) -> Result<RunResult> {
    let start = Instant::now();
    write_config(out, cfg)?;
    let data = prepare_data(cfg)?;
    let pre = match backbone {
        Some(p) => load_backbone(p, cfg, &data)?,
        None => pretrain_backbone(cfg, &data.base_train)?,
    };
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let ckpt_dir = out.join("checkpoints");
    let mut save = |t: usize, learner: &osprompt_core::harness::Learner| {
        Checkpoint::from_learner(cfg, learner).save(&ckpt_dir.join(format!("task_{}", t + 1)))
    };
    let run = run_continual(cfg, &pre, &data, &mut save)?;
    let result = run.result;
    write_json(&out.join("result.json"), &result)?;
    let matrix = result.accuracy_matrix.as_ref().map(accuracy_matrix_rows).unwrap_or_else(|| {
        let t = result.final_accuracies.len();
        result
            .final_accuracies
            .iter()
            .enumerate()
            .map(|(j, a)| vec![t.to_string(), (j + 1).to_string(), a.to_string()])
            .collect()
    });
    write_csv(&out.join("accuracy_matrix.csv"), &["after_task", "task", "accuracy"], matrix)?;
    write_csv(&out.join("drift.csv"), &["layer", "task_pair", "distance"], drift_rows(&result.drift))?;
    write_json(
        &out.join("timing.json"),
        &json!({
            "pretrain_seconds": pretrain_seconds,
            "continual_seconds": start.elapsed().as_secs_f64() - pretrain_seconds,
            "total_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(result)
}

fn stream_for(cfg: &ExperimentConfig) -> Result<TaskStream> {
    let data = prepare_data(cfg)?;
    TaskStream::new(&data.train, &data.test, &data.continual_classes, cfg.tasks, cfg.seed)
}

/// Accuracy of a checkpoint on tasks `1..=task`; writes `eval.json`.
pub fn cmd_eval(checkpoint: &Path, task: Option<usize>, out: &Path) -> Result<Value> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.clone();
    let trained = ck.pool.as_ref().map_or(cfg.tasks, |p| p.initialized_tasks());
    let task = task.unwrap_or(trained);
    if task == 0 || task > trained {
        return Err(Error::Config(format!(
            "task {task} is outside the {trained} tasks this checkpoint has seen"
        )));
    }
    let stream = stream_for(&cfg)?;
    let learner = ck.into_learner()?;
    let accuracies = learner.evaluate_all(&stream, task - 1)?;
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let report = json!({
        "checkpoint": checkpoint.display().to_string(),
        "after_task": task,
        "accuracies": accuracies,
        "mean_accuracy": mean,
    });
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

/// Per-layer representation drift between two checkpoints of one run.
pub fn cmd_drift(from: &Path, to: &Path, pair: &str, out: &Path) -> Result<Vec<DriftRow>> {
    let a = Checkpoint::load(from)?;
    let b = Checkpoint::load(to)?;
    if a.config != b.config {
        return Err(Error::Checkpoint("drift checkpoints come from different configs".into()));
    }
    let stream = stream_for(&a.config)?;
    let rows = drift_analysis(&a.into_learner()?, &b.into_learner()?, stream.test_images(), pair)?;
    write_csv(&out.join("drift.csv"), &["layer", "task_pair", "distance"], drift_rows(&rows))?;
    Ok(rows)
}

pub fn cost_config_for(path: Option<&Path>, preset: Option<Preset>) -> Result<CostConfig> {
    let c = match (path, preset) {
        (Some(p), _) => ExperimentConfig::load(p)?.cost_config(),
        (None, Some(Preset::Desk)) => CostConfig::desk(),
        (None, Some(Preset::Vitb16) | None) => CostConfig::vitb16(),
    };
    c.validate()?;
    Ok(c)
}

/// Writes `cost_report.json` and, when both lists are non-empty, `cost_sweep.csv`.
pub fn cmd_flops(cost: &CostConfig, lengths: &[usize], layers: &[usize], out: &Path) -> Result<(CostReport, Vec<SweepRow>)> {
    let report = cost_report(cost)?;
    let training: BTreeMap<String, String> = [
        TrainingMethod::Er,
        TrainingMethod::Lwf,
        TrainingMethod::PclTwoStage,
        TrainingMethod::Os,
        TrainingMethod::OsPp,
    ]
    .into_iter()
    .map(|m| (m.to_string(), relative_training_complexity(m).to_string()))
    .collect();
    write_json(
        &out.join("cost_report.json"),
        &json!({ "report": report, "relative_training_complexity": training }),
    )?;
    let sweep = if lengths.is_empty() || layers.is_empty() {
        Vec::new()
    } else {
        cost_sweep(cost, lengths, layers)?
    };
    if !sweep.is_empty() {
        let rows = sweep.iter().map(|r| {
            vec![
                r.mode.to_string(),
                r.phase.to_string(),
                r.l_p.to_string(),
                r.layers.to_string(),
                r.gflops.to_string(),
                r.percent_of_two_stage.to_string(),
            ]
        });
        write_csv(
            &out.join("cost_sweep.csv"),
            &["mode", "phase", "L_p", "layers", "gflops", "percent_of_two_stage"],
            rows,
        )?;
    }
    Ok((report, sweep))
}

/// One `--grid key=v1,v2` axis. Keys are dotted paths into the config;
/// `lambda` and `ref_layer` are short for `qr.lambda` and `qr.ref_layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<Value>,
}

impl std::str::FromStr for GridAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (key, list) = s.split_once('=').ok_or_else(|| format!("grid axis {s:?} is not key=v1,v2"))?;
        let key = match key.trim() {
            "lambda" => "qr.lambda",
            "ref_layer" => "qr.ref_layer",
            "use_cosine" => "qr.use_cosine",
            "use_softmax" => "qr.use_softmax",
            other => other,
        }
        .to_string();
        let values: Vec<Value> = list
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(format!("grid axis {s:?} needs a key and at least one value"));
        }
        Ok(GridAxis { key, values })
    }
}

/// Every combination of the axes, as `(key, value)` lists.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, Value)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// Sets each dotted key of `cell` in `cfg` and revalidates.
pub fn apply_cell(cfg: &ExperimentConfig, cell: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut doc = serde_json::to_value(cfg)?;
    for (key, value) in cell {
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("grid key {key:?} does not name a config field")))?;
        }
        let last = parts[parts.len() - 1];
        match node.as_object_mut() {
            Some(obj) if obj.contains_key(last) || last == "enabled" => {
                obj.insert(last.to_string(), value.clone());
            }
            _ => return Err(Error::Config(format!("grid key {key:?} does not name a config field"))),
        }
    }
    ExperimentConfig::from_json(&doc.to_string())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub cell: Vec<(String, Value)>,
    pub a_n: Vec<f64>,
    pub f_n: Vec<f64>,
}

/// Runs every grid cell for every seed; writes `sweep.csv` (mean and
/// sample standard deviation per cell) and `sweep_runs.csv`.
pub fn cmd_sweep(base: &ExperimentConfig, axes: &[GridAxis], seeds: &[u64], out: &Path) -> Result<Vec<SweepCell>> {
    let cells = grid_cells(axes);
    let configs: Vec<Vec<ExperimentConfig>> = cells
        .iter()
        .map(|cell| {
            seeds
                .iter()
                .map(|&s| {
                    let mut c = base.clone();
                    c.seed = s;
                    apply_cell(&c, cell)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    write_config(out, base)?;
    // Data and backbones depend on the seed and architecture, not on the swept knobs.
    let mut cache: BTreeMap<String, (PreparedData, Pretrained)> = BTreeMap::new();
    let mut results = Vec::new();
    let mut runs = Vec::new();
    for (cell, cfgs) in cells.iter().zip(&configs) {
        let mut a_n = Vec::new();
        let mut f_n = Vec::new();
        for cfg in cfgs {
            let key = serde_json::to_string(&json!([
                cfg.seed,
                cfg.dataset,
                cfg.base_classes,
                cfg.continual_classes,
                cfg.vit,
                cfg.prompt.length,
                cfg.optimizer.pretrain_epochs,
                cfg.optimizer.pretrain_lr,
                cfg.optimizer.batch,
            ]))?;
            if !cache.contains_key(&key) {
                let data = prepare_data(cfg)?;
                let pre = pretrain_backbone(cfg, &data.base_train)?;
                cache.insert(key.clone(), (data, pre));
            }
            let (data, pre) = &cache[&key];
            let r = run_continual(cfg, pre, data, &mut |_, _| Ok(()))?.result;
            runs.push(
                cell.iter()
                    .map(|(_, v)| value_text(v))
                    .chain([cfg.seed.to_string(), r.a_n.to_string(), r.f_n.map_or(String::new(), |f| f.to_string())])
                    .collect::<Vec<_>>(),
            );
            a_n.push(r.a_n);
            f_n.extend(r.f_n);
        }
        results.push(SweepCell {
            cell: cell.clone(),
            a_n,
            f_n,
        });
    }
    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let header: Vec<&str> = keys
        .iter()
        .copied()
        .chain(["seeds", "a_n_mean", "a_n_std", "f_n_mean", "f_n_std"])
        .collect();
    let rows = results.iter().map(|c| {
        let (am, asd) = mean_std(&c.a_n);
        let (fm, fsd) = mean_std(&c.f_n);
        c.cell
            .iter()
            .map(|(_, v)| value_text(v))
            .chain([c.a_n.len().to_string(), am.to_string(), asd.to_string(), fm.to_string(), fsd.to_string()])
            .collect()
    });
    write_csv(&out.join("sweep.csv"), &header, rows)?;
    let run_header: Vec<&str> = keys.iter().copied().chain(["seed", "a_n", "f_n"]).collect();
    write_csv(&out.join("sweep_runs.csv"), &run_header, runs)?;
    Ok(results)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Process exit code for an error: 2 config, 3 data, 4 checkpoint, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}
