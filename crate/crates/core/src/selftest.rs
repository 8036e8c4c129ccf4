//! Built-in invariant suite behind `molakd selftest`.
//!
//! Every property prints as `PASS name` or `FAIL name: detail`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::config::{Stage, TrainConfig};
use crate::error::Result;
use crate::gradcheck::{finite_difference_grad, gradcheck_model, max_relative_error, GRADCHECK_EPS};
use crate::losses::{balance_loss, token_importance};
use crate::mola::{ForwardMode, Routing};
use crate::optim::{adam_update, AdamConfig, MomentState};
use crate::params::ParamGroup;
use crate::teacher::{pixel_shuffle, pixel_unshuffle};
use crate::tensor::Tensor;
use crate::trainer::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub outcome: std::result::Result<(), String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(()) => format!("PASS {}", self.name),
            Err(detail) => format!("FAIL {}: {detail}", self.name),
        }
    }
}

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, detail: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(detail())
    }
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite")
}

/// Explicit loop form of the token-importance score.
pub fn token_importance_reference(teacher: &[Vec<f64>], instr: &[Vec<f64>]) -> Vec<f64> {
    let m = teacher.len();
    let d = teacher[0].len() as f64;
    let mut out = vec![0.0; m];
    let queries: Vec<&Vec<f64>> = teacher.iter().chain(instr).collect();
    for q in &queries {
        let mut sims = vec![0.0; m];
        for (j, k) in teacher.iter().enumerate() {
            let mut dot = 0.0;
            for c in 0..k.len() {
                dot += q[c] * k[c];
            }
            sims[j] = dot / d.sqrt();
        }
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in sims.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for j in 0..m {
            out[j] += sims[j] / z;
        }
    }
    for v in out.iter_mut() {
        *v /= queries.len() as f64;
    }
    out
}

fn zero_init_identity() -> Check {
    let cfg = TrainConfig::minimal();
    let model = lib(crate::model::Model::new(&cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let image = randn(&mut rng, &[cfg.image_size, cfg.image_size, cfg.image_channels]);
        let mut tape = Tape::with_params(&model.store);
        let full = lib(model.encoder.encode(&mut tape, &image, ForwardMode::Full))?;
        let base = lib(model.encoder.encode(&mut tape, &image, ForwardMode::Base))?;
        let same = tape
            .value(full.tokens)
            .iter()
            .zip(tape.value(base.tokens))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("image {trial}: full and base outputs differ"))?;
    }
    Ok(())
}

fn score_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for m in [1, 2, 4, 16] {
        for _ in 0..25 {
            let d = rng.random_range(1..=6);
            let l = rng.random_range(1..=5);
            let mut tape = Tape::new();
            let t = tape.constant(randn(&mut rng, &[m, d]));
            let q = tape.constant(randn(&mut rng, &[l, d]));
            let s = lib(token_importance(&mut tape, t, q))?;
            let s = tape.value(s);
            ensure(s.iter().all(|&v| v >= 0.0), || format!("m={m}: negative score {s:?}"))?;
            let sum: f64 = s.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-9, || format!("m={m}: scores sum to {sum}"))?;
            if m == 1 {
                ensure(s == [1.0], || format!("m=1 gave {s:?}"))?;
            }
        }
    }
    Ok(())
}

fn token_importance_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..200 {
        let m = rng.random_range(1..=4);
        let l = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let t = randn(&mut rng, &[m, d]);
        let q = randn(&mut rng, &[l, d]);
        let rows = |x: &Tensor| x.data().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let expected = token_importance_reference(&rows(&t), &rows(&q));
        let mut tape = Tape::new();
        let (tv, qv) = (tape.constant(t), tape.constant(q));
        let s = lib(token_importance(&mut tape, tv, qv))?;
        let worst = tape
            .value(s)
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(worst <= 1e-12, || format!("trial {trial}: deviation {worst:e}"))?;
    }
    Ok(())
}

fn unshuffle_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for g in 1..=12 {
        for r in (1..=g).filter(|r| g % r == 0) {
            for c in 1..=8 {
                let x = randn(&mut rng, &[g, g, c]);
                let y = lib(pixel_unshuffle(&x, r))?;
                ensure(y.numel() == x.numel(), || format!("g={g} r={r} C={c}: element count changed"))?;
                let back = lib(pixel_shuffle(&y, r))?;
                let exact = back.shape() == x.shape()
                    && back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(exact, || format!("g={g} r={r} C={c}: inverse is not bit-exact"))?;
            }
        }
    }
    Ok(())
}

/// Balance loss of one router whose `n` tokens have the given selections and
/// probability rows.
pub fn balance_loss_of(indices: Vec<usize>, probs: Vec<f64>, experts: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![indices.len(), experts], probs)?);
    let routing = Routing {
        indices,
        probs: p,
        num_experts: experts,
    };
    let loss = balance_loss(&mut tape, &[&routing])?;
    Ok(tape.scalar(loss))
}

fn balance_loss_endpoints() -> Check {
    for e in [2, 3, 4, 8] {
        let n = 4 * e;
        let uniform = lib(balance_loss_of((0..n).map(|i| i % e).collect(), vec![1.0 / e as f64; n * e], e))?;
        ensure((uniform - 1.0).abs() <= 1e-12, || format!("E={e}: uniform routing gave {uniform}"))?;
        let mut onehot = vec![0.0; n * e];
        for row in onehot.chunks_mut(e) {
            row[0] = 1.0;
        }
        let collapsed = lib(balance_loss_of(vec![0; n], onehot, e))?;
        ensure((collapsed - e as f64).abs() <= 1e-12, || format!("E={e}: collapsed routing gave {collapsed}"))?;
    }
    Ok(())
}

fn adam_scalar_oracle() -> Check {
    let cfg = AdamConfig::with_lr(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut state = MomentState::zeros(3);
    let mut params: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
    let mut reference = params.clone();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for t in 1..=10 {
        let grads: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        lib(adam_update(&cfg, &mut state, &mut params, &grads))?;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * grads[i];
            v[i] = 0.999 * v[i] + 0.001 * grads[i] * grads[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            reference[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
    }
    let worst = max_abs_diff(&params, &reference);
    ensure(worst <= 1e-12, || format!("deviation {worst:e} after 10 steps"))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type UnaryOp = fn(&mut Tape<'_>, Var, &Tensor) -> Result<Var>;

/// `d/dx Σ op(x) ⊙ w` against central differences for one primitive.
fn check_primitive(op: UnaryOp, x: &Tensor, aux: &Tensor, rng: &mut ChaCha8Rng) -> std::result::Result<f64, String> {
    let shape = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lib(op(&mut tape, xv, aux))?;
        tape.shape(y).to_vec()
    };
    let w = randn(rng, &shape);
    let objective = |tape: &mut Tape<'_>, xv: Var| -> Result<Var> {
        let y = op(tape, xv, aux)?;
        let wv = tape.constant(w.clone());
        let prod = tape.mul(y, wv)?;
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let loss = lib(objective(&mut tape, xv))?;
    let grads = lib(tape.backward(loss))?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = lib(finite_difference_grad(
        |probe| {
            let mut tape = Tape::new();
            let xv = tape.constant(probe.clone());
            let loss = objective(&mut tape, xv)?;
            Ok(tape.scalar(loss))
        },
        x,
        GRADCHECK_EPS,
    ))?;
    Ok(max_relative_error(&analytic, numeric.data()))
}

fn primitive_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let ln = randn(&mut rng, &[2, 4]);
    let ops: [(&str, UnaryOp, Tensor); 6] = [
        ("matmul", |t, x, b| {
            let b = t.constant(b.clone());
            t.matmul(x, b)
        }, b),
        ("gelu", |t, x, _| t.gelu(x), Tensor::zeros(&[1])),
        ("softmax_rows", |t, x, _| t.softmax_rows(x), Tensor::zeros(&[1])),
        ("layer_norm", |t, x, gb| {
            let gamma = t.constant(Tensor::new(vec![4], gb.data()[..4].to_vec())?);
            let beta = t.constant(Tensor::new(vec![4], gb.data()[4..].to_vec())?);
            t.layer_norm(x, gamma, beta)
        }, ln),
        ("cross_entropy", |t, x, _| t.cross_entropy(x, &[1, 3, 0]), Tensor::zeros(&[1])),
        ("mean_rows", |t, x, _| t.mean_rows(x), Tensor::zeros(&[1])),
    ];
    for (name, op, aux) in ops {
        let err = check_primitive(op, &x, &aux, &mut rng)?;
        ensure(err < 1e-6, || format!("{name}: relative error {err:e}"))?;
    }
    Ok(())
}

fn end_to_end_gradients() -> Check {
    let mut cfg = TrainConfig::minimal();
    cfg.stage = Stage::Finetune;
    let report = lib(gradcheck_model(&cfg, GRADCHECK_EPS))?;
    match report.groups.iter().find(|g| g.max_rel_error >= report.tolerance) {
        None => Ok(()),
        Some(g) => Err(format!("{}: relative error {:e} in {}", g.group, g.max_rel_error, g.worst)),
    }
}

fn pretrain_freeze() -> Check {
    let mut trainer = lib(Trainer::new(TrainConfig::minimal()))?;
    let frozen = [ParamGroup::PatchEmbed, ParamGroup::BaseEncoder];
    let before = trainer.model.store.hash_groups(&frozen);
    for _ in 0..3 {
        lib(trainer.train_step())?;
    }
    ensure(trainer.model.store.hash_groups(&frozen) == before, || {
        "base encoder changed during pretraining".into()
    })?;
    trainer.set_stage(Stage::Finetune);
    lib(trainer.train_step())?;
    ensure(trainer.model.store.hash_groups(&frozen) != before, || {
        "base encoder did not move in finetuning".into()
    })
}

fn checkpoint_round_trip() -> Check {
    let mut trainer = lib(Trainer::new(TrainConfig::minimal()))?;
    lib(trainer.train_step())?;
    let entries: BTreeMap<String, Tensor> = trainer.checkpoint_entries();
    let bytes = checkpoint::encode(&entries);
    let decoded = lib(checkpoint::decode(&bytes))?;
    let mut fresh = lib(Trainer::new(TrainConfig::minimal()))?;
    lib(fresh.restore(&decoded))?;
    ensure(checkpoint::encode(&fresh.checkpoint_entries()) == bytes, || {
        "save, load, save is not byte-identical".into()
    })
}

pub const PROPERTIES: [(&str, fn() -> Check); 10] = [
    ("zero_init_identity", zero_init_identity),
    ("score_normalization", score_normalization),
    ("token_importance_oracle", token_importance_oracle),
    ("unshuffle_round_trip", unshuffle_round_trip),
    ("balance_loss_endpoints", balance_loss_endpoints),
    ("adam_scalar_oracle", adam_scalar_oracle),
    ("primitive_gradients", primitive_gradients),
    ("end_to_end_gradients", end_to_end_gradients),
    ("pretrain_freeze", pretrain_freeze),
    ("checkpoint_round_trip", checkpoint_round_trip),
];

pub fn run_selftest() -> Vec<PropertyResult> {
    PROPERTIES
        .iter()
        .map(|&(name, check)| PropertyResult { name, outcome: check() })
        .collect()
}
