//! Finite-difference checks shared by the gradient and acceptance targets.

use osprompt_core::config::{ExperimentConfig, Method};
use osprompt_core::harness::Learner;
use osprompt_core::numerics::{grad_check, relative_error, Tape, Tensor, Var};
use osprompt_core::prompt::{coda_on_tape, cosine_weights, topk_on_tape, Formation};
use osprompt_core::qr::{profile_on_tape, qr_loss_on_tape, QrConfig};
use osprompt_core::rng::{from_seed, Rng};
use osprompt_core::vit::{prefix_mhsa, split_prompt, LayerSelect, StaticPrompts, ViTConfig, ViTModel};
use osprompt_core::Result;
use rand::Rng as _;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let shaped = Tensor::new(tape.shape(y).to_vec(), w.values()[..tape.value(y).len()].to_vec())?;
    let c = tape.constant(&shaped);
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

fn check(name: &str, seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) {
    let err = grad_check(f, x, H).unwrap();
    assert!(err <= TOL, "{name} seed {seed}: rel err {err:e}");
}

fn for_seeds(mut body: impl FnMut(u64, &mut Rng)) {
    for seed in 0..SEEDS {
        body(seed, &mut from_seed(seed));
    }
}

pub fn elementwise_and_shape_ops() {
    for_seeds(|seed, rng| {
        let x = rand_t(rng, &[3, 4]);
        let other = rand_t(rng, &[3, 4]);
        let row = rand_t(rng, &[4]);
        let w = rand_t(rng, &[64]);
        let unary: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("add", Box::new(|t: &mut Tape, v| {
                let o = t.constant(&other);
                t.add(v, o)
            })),
            ("sub", Box::new(|t: &mut Tape, v| {
                let o = t.constant(&other);
                t.sub(o, v)
            })),
            ("mul", Box::new(|t: &mut Tape, v| {
                let o = t.constant(&other);
                t.mul(v, o)
            })),
            ("mul_self", Box::new(|t: &mut Tape, v| t.mul(v, v))),
            ("add_row", Box::new(|t: &mut Tape, v| {
                let r = t.constant(&row);
                t.add_row(v, r)
            })),
            ("scale", Box::new(|t: &mut Tape, v| Ok(t.scale(v, -2.5)))),
            ("reshape", Box::new(|t: &mut Tape, v| t.reshape(v, vec![2, 6]))),
            ("gather_rows", Box::new(|t: &mut Tape, v| t.gather_rows(v, &[2, 0, 2]))),
            ("slice_rows", Box::new(|t: &mut Tape, v| t.slice_rows(v, 1, 2))),
            ("slice_cols", Box::new(|t: &mut Tape, v| t.slice_cols(v, 1, 2))),
            ("concat_rows", Box::new(|t: &mut Tape, v| {
                let o = t.constant(&other);
                t.concat_rows(&[o, v, v])
            })),
            ("concat_cols", Box::new(|t: &mut Tape, v| {
                let o = t.constant(&other);
                t.concat_cols(&[v, o])
            })),
            ("softmax_0", Box::new(|t: &mut Tape, v| t.softmax(v, 0))),
            ("softmax_1", Box::new(|t: &mut Tape, v| t.softmax(v, 1))),
            ("softmax_last", Box::new(|t: &mut Tape, v| t.softmax_last(v))),
            ("gelu", Box::new(|t: &mut Tape, v| Ok(t.gelu(v)))),
            ("normalize_rows", Box::new(|t: &mut Tape, v| t.normalize_rows(v))),
        ];
        for (name, op) in &unary {
            check(
                name,
                seed,
                |t, v| {
                    let y = op(t, v)?;
                    project(t, y, &w)
                },
                &x,
            );
        }
        check("sum", seed, |t, v| Ok(t.sum(v)), &x);
        check(
            "add_row/bias",
            seed,
            |t, b| {
                let base = t.constant(&x);
                let y = t.add_row(base, b)?;
                project(t, y, &w)
            },
            &row,
        );
    });
}

pub fn matmul_both_operands() {
    for_seeds(|seed, rng| {
        let a = rand_t(rng, &[3, 5]);
        let b = rand_t(rng, &[5, 4]);
        let bt = rand_t(rng, &[4, 5]);
        let w = rand_t(rng, &[64]);
        check("matmul/a", seed, |t, v| {
            let c = t.constant(&b);
            let y = t.matmul(v, c)?;
            project(t, y, &w)
        }, &a);
        check("matmul/b", seed, |t, v| {
            let c = t.constant(&a);
            let y = t.matmul(c, v)?;
            project(t, y, &w)
        }, &b);
        check("matmul_nt/a", seed, |t, v| {
            let c = t.constant(&bt);
            let y = t.matmul_nt(v, c)?;
            project(t, y, &w)
        }, &a);
        check("matmul_nt/b", seed, |t, v| {
            let c = t.constant(&a);
            let y = t.matmul_nt(c, v)?;
            project(t, y, &w)
        }, &bt);
    });
}

pub fn layernorm_every_input() {
    for_seeds(|seed, rng| {
        let x = rand_t(rng, &[3, 6]);
        let g = rand_t(rng, &[6]);
        let b = rand_t(rng, &[6]);
        let w = rand_t(rng, &[64]);
        check("layernorm/x", seed, |t, v| {
            let (gv, bv) = (t.constant(&g), t.constant(&b));
            let y = t.layernorm(v, gv, bv)?;
            project(t, y, &w)
        }, &x);
        check("layernorm/gain", seed, |t, v| {
            let (xv, bv) = (t.constant(&x), t.constant(&b));
            let y = t.layernorm(xv, v, bv)?;
            project(t, y, &w)
        }, &g);
        check("layernorm/bias", seed, |t, v| {
            let (xv, gv) = (t.constant(&x), t.constant(&g));
            let y = t.layernorm(xv, gv, v)?;
            project(t, y, &w)
        }, &b);
    });
}

pub fn cross_entropy_plain_and_masked() {
    for_seeds(|seed, rng| {
        let logits = rand_t(rng, &[6]);
        let label = seed as usize % 3 + 2;
        check("ce", seed, |t, v| t.cross_entropy(v, label, &[]), &logits);
        let mask = [false, false, true, true, true, false];
        check("ce/masked", seed, |t, v| t.cross_entropy(v, label, &mask), &logits);
    });
}

pub fn detached_paths_carry_no_gradient() {
    let x = Tensor::vector(vec![0.5, -1.0]);
    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_requires_grad(true));
    let d = tape.detach(v);
    let y = tape.mul(d, d).unwrap();
    let s = tape.sum(y);
    let other = tape.leaf(&x.with_requires_grad(true));
    let z = tape.add(s, s).unwrap();
    let grads = tape.backward(z).unwrap();
    assert!(grads.get(v).is_none_or(|g| g.iter().all(|&e| e == 0.0)));
    assert!(grads.get(other).is_none_or(|g| g.iter().all(|&e| e == 0.0)));
}

fn tiny_vit(prompted: Vec<usize>) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        prompted_layers: prompted,
        prompt_length: 4,
    }
}

pub fn prefix_attention_inputs() {
    for_seeds(|seed, rng| {
        let model = ViTModel::new(tiny_vit(vec![1]), &mut from_seed(seed + 100)).unwrap();
        let x = rand_t(rng, &[5, 8]);
        let phi = rand_t(rng, &[4, 8]);
        let w = rand_t(rng, &[64]);
        check("prefix_mhsa/x", seed, |t, v| {
            let vars = model.bind_constant(t);
            let att = model.attention_vars(&vars, 0);
            let p = t.constant(&phi);
            let pre = split_prompt(t, p, 1)?;
            let y = prefix_mhsa(t, v, Some(pre.key), Some(pre.value), &att, 2)?;
            project(t, y, &w)
        }, &x);
        check("prefix_mhsa/phi", seed, |t, v| {
            let vars = model.bind_constant(t);
            let att = model.attention_vars(&vars, 0);
            let xv = t.constant(&x);
            let pre = split_prompt(t, v, 2)?;
            let y = prefix_mhsa(t, xv, Some(pre.key), Some(pre.value), &att, 2)?;
            project(t, y, &w)
        }, &phi);
        check("mhsa/x", seed, |t, v| {
            let vars = model.bind_constant(t);
            let att = model.attention_vars(&vars, 0);
            let y = prefix_mhsa(t, v, None, None, &att, 2)?;
            project(t, y, &w)
        }, &x);
    });
}

pub fn full_prompted_forward_wrt_prompt() {
    for_seeds(|seed, rng| {
        let model = ViTModel::new(tiny_vit(vec![1, 2]), &mut from_seed(seed + 200)).unwrap();
        let image = rand_t(rng, &[3, 8, 8]);
        let phi = rand_t(rng, &[4, 8]);
        let other = rand_t(rng, &[4, 8]);
        check("prompted forward", seed, |t, v| {
            let vars = model.bind_constant(t);
            let o = t.constant(&other);
            let mut prompts = StaticPrompts::new(vec![Some(v), Some(o)]);
            let out = model.forward(t, &vars, &image, &mut prompts)?;
            t.cross_entropy(out.logits, 1, &[])
        }, &phi);
    });
}

pub fn prompt_formation_inputs() {
    for_seeds(|seed, rng| {
        let q = rand_t(rng, &[1, 4]);
        let keys = rand_t(rng, &[5, 4]);
        let comps = rand_t(rng, &[5, 8]);
        let w = rand_t(rng, &[64]);
        check("cosine_weights/q", seed, |t, v| {
            let k = t.constant(&keys);
            let y = cosine_weights(t, v, k)?;
            project(t, y, &w)
        }, &q);
        check("coda/q", seed, |t, v| {
            let (k, c) = (t.constant(&keys), t.constant(&comps));
            let y = coda_on_tape(t, v, k, c, 4)?;
            project(t, y, &w)
        }, &q);
        check("coda/keys", seed, |t, v| {
            let (qv, c) = (t.constant(&q), t.constant(&comps));
            let y = coda_on_tape(t, qv, v, c, 4)?;
            project(t, y, &w)
        }, &keys);
        check("coda/components", seed, |t, v| {
            let (qv, k) = (t.constant(&q), t.constant(&keys));
            let y = coda_on_tape(t, qv, k, v, 4)?;
            project(t, y, &w)
        }, &comps);
        check("topk/components", seed, |t, v| {
            let (qv, k) = (t.constant(&q), t.constant(&keys));
            let y = topk_on_tape(t, qv, k, v, 4, 2)?;
            project(t, y, &w)
        }, &comps);
    });
}

pub fn qr_profiles_and_loss() {
    let toggles = [(true, true), (true, false), (false, true), (false, false)];
    for_seeds(|seed, rng| {
        let q = rand_t(rng, &[1, 4]);
        let r = rand_t(rng, &[1, 4]);
        let keys = rand_t(rng, &[5, 4]);
        for (use_cosine, use_softmax) in toggles {
            let cfg = QrConfig {
                use_cosine,
                use_softmax,
                ..QrConfig::default()
            };
            let loss = |t: &mut Tape, qv: Var, kv: Var| -> Result<Var> {
                let rv = t.constant(&r);
                let a = profile_on_tape(t, qv, kv, &cfg)?;
                let b = profile_on_tape(t, rv, kv, &cfg)?;
                qr_loss_on_tape(t, &[(a, b)])
            };
            check("qr/q", seed, |t, v| {
                let k = t.constant(&keys);
                loss(t, v, k)
            }, &q);
            check("qr/keys", seed, |t, v| {
                let qv = t.constant(&q);
                loss(t, qv, v)
            }, &keys);
        }
    });
}

fn os_pp_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.base_classes = 2;
    c.continual_classes = 4;
    c.tasks = 2;
    c.vit.image_size = 8;
    c.vit.depth = 3;
    c.vit.dim = 8;
    c.vit.heads = 2;
    c.vit.mlp_ratio = 2;
    c.vit.prompted_layers = vec![1, 2];
    c.prompt.components = 4;
    c.prompt.length = 2;
    c.prompt.query_grad = true;
    c.qr.enabled = true;
    c.qr.lambda = 1.0;
    c.qr.ref_layer = LayerSelect::Last;
    c.method = Method::Prompt;
    c.validate().unwrap();
    c
}

/// Central differences over every trainable tensor of the learner.
fn learner_grad_error(learner: &mut Learner, image: &Tensor, label: usize, mask: &[bool]) -> f64 {
    learner.zero_grads();
    learner.accumulate_example(image, label, mask, 1.0).unwrap();
    let mut worst = 0.0f64;
    let head = learner.model.head_ids();
    for id in head {
        let analytic = learner.model.store().get(id).grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = learner.model.store().get(id).values()[i];
            learner.model.store_mut().get_mut(id).values_mut()[i] = orig + H;
            let up = learner.example_loss(image, label, mask).unwrap();
            learner.model.store_mut().get_mut(id).values_mut()[i] = orig - H;
            let down = learner.example_loss(image, label, mask).unwrap();
            learner.model.store_mut().get_mut(id).values_mut()[i] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * H)));
        }
    }
    let ids: Vec<_> = learner.pool.as_ref().unwrap().store().ids().collect();
    for id in ids {
        let analytic = learner.pool.as_ref().unwrap().store().get(id).grad().unwrap().to_vec();
        assert!(analytic.iter().any(|&g| g != 0.0), "pool tensor without gradient");
        for (i, &a) in analytic.iter().enumerate() {
            let pool = learner.pool.as_mut().unwrap();
            let orig = pool.store().get(id).values()[i];
            pool.store_mut().get_mut(id).values_mut()[i] = orig + H;
            let up = learner.example_loss(image, label, mask).unwrap();
            let pool = learner.pool.as_mut().unwrap();
            pool.store_mut().get_mut(id).values_mut()[i] = orig - H;
            let down = learner.example_loss(image, label, mask).unwrap();
            learner.pool.as_mut().unwrap().store_mut().get_mut(id).values_mut()[i] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn os_pp_learner(seed: u64, formation: Formation) -> Learner {
    let mut cfg = os_pp_config();
    cfg.seed = seed;
    cfg.prompt.formation = formation;
    let backbone = ViTModel::new(cfg.vit_config(2), &mut from_seed(seed + 300)).unwrap();
    let mut learner = Learner::new(&cfg, &backbone, 4).unwrap();
    let pool = learner.pool.as_mut().unwrap();
    pool.expand_for_task(0, &mut from_seed(seed + 400)).unwrap();
    pool.expand_for_task(1, &mut from_seed(seed + 500)).unwrap();
    learner
}

pub fn full_os_pp_loss_graph() {
    for_seeds(|seed, rng| {
        let mut learner = os_pp_learner(seed, Formation::Coda);
        let image = rand_t(rng, &[3, 8, 8]);
        let err = learner_grad_error(&mut learner, &image, 2, &[false, false, true, true]);
        assert!(err <= TOL, "OS++ graph seed {seed}: rel err {err:e}");
    });
}

pub fn full_os_pp_loss_graph_topk() {
    for_seeds(|seed, rng| {
        let mut learner = os_pp_learner(seed, Formation::Topk { n: 1 });
        let image = rand_t(rng, &[3, 8, 8]);
        let err = learner_grad_error(&mut learner, &image, 3, &[]);
        assert!(err <= TOL, "OS++ top-k graph seed {seed}: rel err {err:e}");
    });
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_and_shape_ops", elementwise_and_shape_ops),
    ("matmul_both_operands", matmul_both_operands),
    ("layernorm_every_input", layernorm_every_input),
    ("cross_entropy_plain_and_masked", cross_entropy_plain_and_masked),
    ("detached_paths_carry_no_gradient", detached_paths_carry_no_gradient),
    ("prefix_attention_inputs", prefix_attention_inputs),
    ("full_prompted_forward_wrt_prompt", full_prompted_forward_wrt_prompt),
    ("prompt_formation_inputs", prompt_formation_inputs),
    ("qr_profiles_and_loss", qr_profiles_and_loss),
    ("full_os_pp_loss_graph", full_os_pp_loss_graph),
    ("full_os_pp_loss_graph_topk", full_os_pp_loss_graph_topk),
];
