//! Independent oracles for the data generator, evaluation and MAC counting.

use osprompt_core::config::{ExperimentConfig, Method};
use osprompt_core::cost::{measured_op_count, pipeline_cost, CostConfig, Phase, Pipeline};
use osprompt_core::data::{synth_samples, synth_templates, SynthOptions};
use osprompt_core::harness::{prepare_data, Learner, TaskStream};
use osprompt_core::prompt::{Formation, PromptPool};
use osprompt_core::rng::{from_seed, substream};
use osprompt_core::vit::ViTModel;

#[test]
fn nearest_template_recovers_synthetic_labels() {
    let opts = SynthOptions::default();
    let templates = synth_templates(30, 16, &opts, 9).unwrap();
    let set = synth_samples(&templates, 20, &opts, &mut substream(9, "oracle")).unwrap();
    let correct = set
        .images()
        .iter()
        .zip(set.labels())
        .filter(|(im, &y)| {
            let dist = |t: &osprompt_core::numerics::Tensor| -> f64 {
                t.values().iter().zip(im.values()).map(|(a, b)| (a - b).powi(2)).sum()
            };
            let best = (0..templates.len())
                .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
                .unwrap();
            best == y
        })
        .count();
    let acc = correct as f64 / set.len() as f64;
    assert!(acc > 0.95, "nearest-template accuracy {acc}");
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.dataset = osprompt_core::config::DatasetConfig::Synthetic {
        train_per_class: 4,
        test_per_class: 5,
        noise: 0.15,
        max_shift: 2,
    };
    c.base_classes = 2;
    c.continual_classes = 6;
    c.tasks = 3;
    c.vit.image_size = 8;
    c.vit.depth = 2;
    c.vit.dim = 8;
    c.vit.heads = 2;
    c.vit.mlp_ratio = 2;
    c.vit.prompted_layers = vec![1];
    c.prompt.components = 6;
    c.prompt.length = 2;
    c
}

#[test]
fn constant_logits_score_exactly_the_first_class_share() {
    let cfg = ExperimentConfig {
        method: Method::Ft,
        ..tiny_config()
    };
    let data = prepare_data(&cfg).unwrap();
    let stream = TaskStream::new(&data.train, &data.test, &data.continual_classes, cfg.tasks, cfg.seed).unwrap();
    let backbone = ViTModel::new(cfg.vit_config(2), &mut from_seed(1)).unwrap();
    let mut learner = Learner::new(&cfg, &backbone, stream.num_outputs()).unwrap();
    for id in learner.model.head_ids() {
        learner.model.store_mut().get_mut(id).values_mut().fill(0.0);
    }
    // Every logit ties, so output 0 (the first class of task 1) always wins.
    let acc = learner.evaluate_all(&stream, 2).unwrap();
    assert_eq!(acc, vec![1.0 / 2.0, 0.0, 0.0]);
}

fn desk_pool(cfg: &ExperimentConfig, model: &ViTModel) -> PromptPool {
    let mut pool = PromptPool::for_model(model.config(), cfg.prompt.components, cfg.tasks).unwrap();
    for t in 0..cfg.tasks {
        pool.expand_for_task(t, &mut from_seed(20 + t as u64)).unwrap();
    }
    pool
}

#[test]
fn counted_macs_match_the_analytic_model() {
    let cfg = ExperimentConfig::desk();
    let mut model = ViTModel::new(cfg.vit_config(cfg.continual_classes), &mut from_seed(3)).unwrap();
    model.freeze();
    let pool = desk_pool(&cfg, &model);
    let data = prepare_data(&ExperimentConfig {
        dataset: osprompt_core::config::DatasetConfig::Synthetic {
            train_per_class: 1,
            test_per_class: 1,
            noise: 0.15,
            max_shift: 2,
        },
        ..cfg.clone()
    })
    .unwrap();
    let image = data.test.image(0);
    let cost = CostConfig {
        include_prompt_ops: true,
        ..cfg.cost_config()
    };
    for formation in [Formation::Coda, Formation::Topk { n: 2 }] {
        let cost = CostConfig { formation, ..cost.clone() };
        let one = measured_op_count(&model, &pool, formation, false, image).unwrap();
        let two = measured_op_count(&model, &pool, formation, true, image).unwrap();
        let a_one = pipeline_cost(&cost, Pipeline::OneStage, Phase::Infer).total;
        let a_two = pipeline_cost(&cost, Pipeline::TwoStage, Phase::Infer).total;
        for (measured, analytic) in [(one.total(), a_one), (two.total(), a_two)] {
            let rel = (measured as f64 - analytic).abs() / analytic;
            assert!(rel <= 0.02, "{formation:?}: measured {measured} vs analytic {analytic}");
        }
        let measured_ratio = 100.0 * one.total() as f64 / two.total() as f64;
        let analytic_ratio = 100.0 * a_one / a_two;
        assert!(
            (measured_ratio - analytic_ratio).abs() <= 1.0,
            "{formation:?}: {measured_ratio:.3}% vs {analytic_ratio:.3}%"
        );
        assert_eq!(one.query, 0);
        assert!(two.query > 0);
    }
}
