//! Registry of finite-difference checks over every differentiable primitive
//! and the composite losses, shared by the `gradcheck` command and the tests.

use rand::Rng;
use serde::Serialize;

use crate::attack::{objective_on_tape, PatchSet};
use crate::autodiff::{finite_difference_check, GradCheckReport, Tape, Var, RELATIVE_FLOOR};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::protopnet::{BackboneConfig, Model, ModelConfig};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::training::{total_loss_on_tape, LossWeights};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// Names of all registered checks, in report order.
pub const CHECKS: &[&str] = &[
    "conv2d.input",
    "conv2d.kernel",
    "add_channel_bias.input",
    "add_channel_bias.bias",
    "maxpool2d",
    "relu",
    "sigmoid",
    "dense.input",
    "dense.weights",
    "dense.bias",
    "softmax_cross_entropy",
    "prototype_sq_distances.latent",
    "prototype_sq_distances.prototypes",
    "sqrt",
    "log_similarity",
    "spatial_max",
    "min_over",
    "mean_over",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "masked_abs_sum",
    "composite_loss",
    "location_shift_objective",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    /// Worst entry per check name, in registry order.
    pub fn worst(&self) -> Vec<&SuiteEntry> {
        CHECKS
            .iter()
            .filter_map(|name| {
                self.entries
                    .iter()
                    .filter(|e| e.name == *name)
                    .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
            })
            .collect()
    }
}

fn random_tensor(shape: &[usize], seed: u64, salt: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream(seed, 0xC0 + salt, 0);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.1, 1]`, away from the kinks of relu and abs.
fn off_zero(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = stream(seed, 0xC0 + salt, 1);
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `Σ w ⊙ out` with fixed random weights so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(tape.value(out).shape(), seed, 0x3F, -1.0, 1.0);
    let w = tape.leaf(w, false);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        backbone: BackboneConfig {
            conv_channels: vec![4, 4, 4],
            latent_channels: 4,
            ..BackboneConfig::reference()
        },
        prototypes_per_class: 2,
        ..ModelConfig::reference(2)
    }
}

type Check<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

/// `(point, function, finite-difference step)` for a primitive check.
fn primitive(name: &str, seed: u64) -> (Tensor, Check<'static>, f64) {
    match name {
        "conv2d.input" => {
            let k = random_tensor(&[3, 2, 3, 3], seed, 1, -1.0, 1.0);
            (
                random_tensor(&[2, 5, 5], seed, 2, -1.0, 1.0),
                Box::new(move |t, x| {
                    let k = t.leaf(k.clone(), false);
                    let y = t.conv2d(x, k, 1, 1)?;
                    project(t, y, seed)
                }),
                1e-4,
            )
        }
        "conv2d.kernel" => {
            let x = random_tensor(&[2, 5, 5], seed, 3, -1.0, 1.0);
            (
                random_tensor(&[3, 2, 3, 3], seed, 4, -1.0, 1.0),
                Box::new(move |t, k| {
                    let x = t.leaf(x.clone(), false);
                    let y = t.conv2d(x, k, 2, 0)?;
                    project(t, y, seed)
                }),
                1e-4,
            )
        }
        "add_channel_bias.input" | "add_channel_bias.bias" => {
            let x = random_tensor(&[3, 2, 2], seed, 5, -1.0, 1.0);
            let b = random_tensor(&[3], seed, 6, -1.0, 1.0);
            if name.ends_with("input") {
                (
                    x,
                    Box::new(move |t, x| {
                        let b = t.leaf(b.clone(), false);
                        let y = t.add_channel_bias(x, b)?;
                        project(t, y, seed)
                    }),
                    1e-5,
                )
            } else {
                (
                    b,
                    Box::new(move |t, b| {
                        let x = t.leaf(x.clone(), false);
                        let y = t.add_channel_bias(x, b)?;
                        project(t, y, seed)
                    }),
                    1e-5,
                )
            }
        }
        "maxpool2d" => (
            random_tensor(&[2, 4, 6], seed, 7, -1.0, 1.0),
            Box::new(move |t, x| {
                let y = t.maxpool2d(x, 2, 2)?;
                project(t, y, seed)
            }),
            1e-6,
        ),
        "relu" => (
            off_zero(&[3, 3, 3], seed, 8),
            Box::new(move |t, x| {
                let y = t.relu(x);
                project(t, y, seed)
            }),
            1e-5,
        ),
        "sigmoid" => (
            random_tensor(&[3, 3, 3], seed, 9, -4.0, 4.0),
            Box::new(move |t, x| {
                let y = t.sigmoid(x);
                project(t, y, seed)
            }),
            1e-5,
        ),
        "dense.input" | "dense.weights" | "dense.bias" => {
            let x = random_tensor(&[5], seed, 10, -1.0, 1.0);
            let w = random_tensor(&[3, 5], seed, 11, -1.0, 1.0);
            let b = random_tensor(&[3], seed, 12, -1.0, 1.0);
            let which = name.trim_start_matches("dense.").to_string();
            let point = match which.as_str() {
                "input" => x.clone(),
                "weights" => w.clone(),
                _ => b.clone(),
            };
            (
                point,
                Box::new(move |t, v| {
                    let xv = if which == "input" { v } else { t.leaf(x.clone(), false) };
                    let wv = if which == "weights" {
                        v
                    } else {
                        t.leaf(w.clone(), false)
                    };
                    let bv = if which == "bias" { v } else { t.leaf(b.clone(), false) };
                    let y = t.dense(xv, wv, Some(bv))?;
                    project(t, y, seed)
                }),
                1e-5,
            )
        }
        "softmax_cross_entropy" => (
            random_tensor(&[6], seed, 13, -3.0, 3.0),
            Box::new(move |t, x| t.softmax_cross_entropy(x, (seed % 6) as usize)),
            1e-5,
        ),
        "prototype_sq_distances.latent" | "prototype_sq_distances.prototypes" => {
            let z = random_tensor(&[3, 2, 3], seed, 14, 0.0, 1.0);
            let p = random_tensor(&[4, 3], seed, 15, 0.0, 1.0);
            let latent_side = name.ends_with("latent");
            (
                if latent_side { z.clone() } else { p.clone() },
                Box::new(move |t, v| {
                    let (zv, pv) = if latent_side {
                        (v, t.leaf(p.clone(), false))
                    } else {
                        (t.leaf(z.clone(), false), v)
                    };
                    let d = t.prototype_sq_distances(zv, pv)?;
                    project(t, d, seed)
                }),
                1e-5,
            )
        }
        "sqrt" => (
            random_tensor(&[2, 3, 3], seed, 16, 0.2, 2.0),
            Box::new(move |t, x| {
                let y = t.sqrt(x);
                project(t, y, seed)
            }),
            1e-6,
        ),
        "log_similarity" => (
            random_tensor(&[2, 3, 3], seed, 17, 1e-3, 2.0),
            Box::new(move |t, x| {
                let y = t.log_similarity(x, 1e-4);
                project(t, y, seed)
            }),
            1e-7,
        ),
        "spatial_max" => (
            random_tensor(&[3, 3, 4], seed, 18, -1.0, 1.0),
            Box::new(move |t, x| {
                let y = t.spatial_max(x)?;
                project(t, y, seed)
            }),
            1e-6,
        ),
        "min_over" => (
            random_tensor(&[3, 3, 4], seed, 19, -1.0, 1.0),
            Box::new(move |t, x| t.min_over(x, &[0, 5, 11, 17, 30])),
            1e-6,
        ),
        "mean_over" => (
            random_tensor(&[3, 3, 4], seed, 20, -1.0, 1.0),
            Box::new(move |t, x| {
                let m = t.mean_over(x, &[1, 2, 8, 35])?;
                t.mul(m, m)
            }),
            1e-5,
        ),
        "add" | "sub" | "mul" => {
            let other = random_tensor(&[2, 3], seed, 21, -1.0, 1.0);
            let op = name.to_string();
            (
                random_tensor(&[2, 3], seed, 22, -1.0, 1.0),
                Box::new(move |t, x| {
                    let o = t.leaf(other.clone(), false);
                    // The leaf is used on both sides so both operand paths are exercised.
                    let y = match op.as_str() {
                        "add" => t.add(x, o)?,
                        "sub" => t.sub(o, x)?,
                        _ => t.mul(x, o)?,
                    };
                    let z = t.mul(y, x)?;
                    project(t, z, seed)
                }),
                1e-5,
            )
        }
        "scale" => (
            random_tensor(&[4], seed, 23, -1.0, 1.0),
            Box::new(move |t, x| {
                let y = t.scale(x, -2.5);
                project(t, y, seed)
            }),
            1e-5,
        ),
        "sum" => (
            random_tensor(&[2, 2, 2], seed, 24, -1.0, 1.0),
            Box::new(move |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            }),
            1e-5,
        ),
        "masked_abs_sum" => (
            off_zero(&[3, 4], seed, 25),
            Box::new(move |t, x| t.masked_abs_sum(x, (0..12).map(|i| (i + seed as usize) % 3 != 0).collect())),
            1e-5,
        ),
        other => unreachable!("unknown primitive check {other}"),
    }
}

/// Applies the test hook that corrupts the analytic gradient of one check.
fn corrupt(report: &GradCheckReport) -> f64 {
    report
        .entries
        .iter()
        .map(|e| {
            let a = e.analytic * 1.01 + 1e-3;
            (a - e.numeric).abs() / a.abs().max(e.numeric.abs()).max(RELATIVE_FLOOR)
        })
        .fold(0.0, f64::max)
}

fn entry(name: &str, seed: u64, report: &GradCheckReport, fault: bool) -> SuiteEntry {
    let max = if fault {
        corrupt(report)
    } else {
        report.max_relative_error
    };
    let max = if report.non_finite { f64::INFINITY } else { max };
    SuiteEntry {
        name: name.to_string(),
        seed,
        max_relative_error: max,
        tolerance: report.tolerance,
        passed: max <= report.tolerance,
    }
}

/// A freshly initialized model has zero biases, so a unit whose inputs are
/// all dead sits exactly on the relu kink. Nonzero biases move the check
/// point off it.
fn checkable_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let biases: Vec<ParamId> = model
        .groups
        .base_conv
        .iter()
        .chain(&model.groups.addon)
        .map(|&(_, b)| b)
        .collect();
    for (k, b) in biases.into_iter().enumerate() {
        let shape = model.params.value(b).shape().to_vec();
        *model.params.value_mut(b) = off_zero(&shape, seed, 0x20 + k as u64);
    }
    Ok(model)
}

fn composite(seed: u64, fault: bool) -> Result<SuiteEntry> {
    let cfg = tiny_model_config();
    let model = checkable_model(&cfg, 40 + seed)?;
    let mut rng = stream(seed, 0xC7, 0);
    let batch: Vec<(Tensor, usize)> = (0..2)
        .map(|i| {
            (
                Tensor::from_fn(&cfg.image_shape(), |_| rng.gen_range(0.0..1.0)),
                i % cfg.classes,
            )
        })
        .collect();
    let weights = LossWeights {
        cluster: 0.8,
        separation: -0.08,
        l1: 1e-4,
    };
    let mut worst: Option<SuiteEntry> = None;
    for id in model.params.ids() {
        let point = model.params.value(id).clone();
        let f = |tape: &mut Tape, p: Var| {
            let mut bind = |tape: &mut Tape, pid: ParamId| {
                if pid == id {
                    p
                } else {
                    tape.param(&model.params, pid, false)
                }
            };
            Ok(total_loss_on_tape(tape, &model, &batch, &weights, &mut bind)?.0)
        };
        let e = entry(
            "composite_loss",
            seed,
            &finite_difference_check(f, &point, 1e-6, COMPOSITE_TOLERANCE)?,
            fault,
        );
        if worst
            .as_ref()
            .map_or(true, |w| e.max_relative_error > w.max_relative_error)
        {
            worst = Some(e);
        }
    }
    Ok(worst.expect("model has parameters"))
}

fn location_shift(seed: u64, fault: bool) -> Result<SuiteEntry> {
    let cfg = ModelConfig {
        image_height: 24,
        image_width: 24,
        ..tiny_model_config()
    };
    let model = checkable_model(&cfg, 60 + seed)?;
    let x = random_tensor(&cfg.image_shape(), seed, 26, 0.05, 0.95);
    let (h, w, _) = cfg.latent_dims();
    let s = PatchSet::new(vec![((seed as usize) % h, (seed as usize / h) % w)], h, w)?;
    let target = s.complement(h, w).expect("latent has more than one cell");
    let proto = seed as usize % cfg.prototypes();
    let report = finite_difference_check(
        |t, v| objective_on_tape(t, &model, v, &s, &target, proto),
        &x,
        1e-6,
        COMPOSITE_TOLERANCE,
    )?;
    Ok(entry("location_shift_objective", seed, &report, fault))
}

/// Runs every registered check for seeds `0..seeds`. `fault` names a check
/// whose analytic gradient is deliberately perturbed, to exercise failure
/// reporting.
pub fn run_suite(seeds: u64, fault: Option<&str>) -> Result<SuiteReport> {
    if let Some(f) = fault {
        if !CHECKS.contains(&f) {
            return Err(Error::InvalidArgument(format!("unknown check {f:?}")));
        }
    }
    let mut entries = Vec::new();
    for name in CHECKS {
        let faulty = fault == Some(*name);
        for seed in 0..seeds {
            let e = match *name {
                "composite_loss" => composite(seed, faulty)?,
                "location_shift_objective" => location_shift(seed, faulty)?,
                _ => {
                    let (point, f, step) = primitive(name, seed);
                    entry(
                        name,
                        seed,
                        &finite_difference_check(f, &point, step, PRIMITIVE_TOLERANCE)?,
                        faulty,
                    )
                }
            };
            entries.push(e);
        }
    }
    Ok(SuiteReport { entries })
}
