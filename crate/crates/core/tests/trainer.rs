use std::collections::BTreeMap;

use molakd::checkpoint;
use molakd::config::TeacherConfig;
use molakd::optim::{adam_update, AdamConfig, MomentState};
use molakd::trainer::StageSchedule;
use molakd::{Error, ParamGroup, Stage, Tensor, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finetune() -> TrainConfig {
    TrainConfig {
        stage: Stage::Finetune,
        ..TrainConfig::minimal()
    }
}

fn snapshot(t: &Trainer) -> Vec<(String, Vec<u64>)> {
    t.model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn loss_bits(t: &mut Trainer, steps: usize) -> Vec<[u64; 5]> {
    (0..steps)
        .map(|_| {
            let l = t.train_step().unwrap().losses;
            [l.total, l.gen, l.cg, l.fg, l.mb].map(f64::to_bits)
        })
        .collect()
}

#[test]
fn stage_schedules() {
    let pre = StageSchedule::new(Stage::Pretrain);
    assert_eq!(pre.frozen_groups(), vec![ParamGroup::PatchEmbed, ParamGroup::BaseEncoder]);
    let fine = StageSchedule::new(Stage::Finetune);
    assert!(fine.frozen_groups().is_empty());
    assert_eq!(fine.trainable_groups.len(), ParamGroup::ALL.len());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut t = Trainer::new(finetune()).unwrap();
    t.set_lr(0.0);
    let before = snapshot(&t);
    t.train_step().unwrap();
    t.train_step().unwrap();
    assert_eq!(snapshot(&t), before);
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let mut t = Trainer::new(TrainConfig::minimal()).unwrap();
    let frozen = t.schedule.frozen_groups();
    let values = |t: &Trainer| -> Vec<(String, Vec<u64>)> {
        snapshot(t)
            .into_iter()
            .filter(|(name, _)| frozen.contains(&t.model.store.param(t.model.store.id(name).unwrap()).group))
            .collect()
    };
    let before = values(&t);
    let hash = t.model.store.hash_groups(&frozen);
    assert!(!before.is_empty());
    for _ in 0..10 {
        t.train_step().unwrap();
    }
    assert_eq!(values(&t), before);
    assert_eq!(t.model.store.hash_groups(&frozen), hash);
    for id in t.optimizer.state.keys() {
        assert!(!frozen.contains(&t.model.store.param(*id).group));
    }
}

/// Bias-corrected Adam on one scalar, written independently of the library.
fn scalar_adam(lr: f64, grads: &[f64], mut x: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}

#[test]
fn adam_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let lr = rng.random_range(1e-4..0.5);
        let start: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grads: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let cfg = AdamConfig::with_lr(lr);
        let mut state = MomentState::zeros(3);
        let mut params = start.clone();
        let mut trace = Vec::new();
        for g in &grads {
            adam_update(&cfg, &mut state, &mut params, g).unwrap();
            trace.push(params.clone());
        }
        for i in 0..3 {
            let column: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            let expected = scalar_adam(lr, &column, start[i]);
            for (step, e) in expected.iter().enumerate() {
                assert!((trace[step][i] - e).abs() <= 1e-12);
            }
        }
    }
    let mut state = MomentState::zeros(1);
    let mut p = [0.0];
    adam_update(&AdamConfig::with_lr(0.1), &mut state, &mut p, &[1.0]).unwrap();
    assert!((p[0] + 0.1).abs() < 1e-6);
}

#[test]
fn identical_configs_give_identical_trajectories() {
    let a = loss_bits(&mut Trainer::new(finetune()).unwrap(), 8);
    let b = loss_bits(&mut Trainer::new(finetune()).unwrap(), 8);
    assert_eq!(a, b);
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(finetune()).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let first = dir.path().join("a.hkpt");
    t.save_checkpoint(&first).unwrap();
    let mut fresh = Trainer::new(finetune()).unwrap();
    fresh.load_checkpoint(&first).unwrap();
    assert_eq!(fresh.step, 3);
    assert_eq!(snapshot(&fresh), snapshot(&t));
    assert_eq!(fresh.optimizer.state, t.optimizer.state);
    let second = dir.path().join("b.hkpt");
    fresh.save_checkpoint(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.hkpt");
    let mut straight = Trainer::new(finetune()).unwrap();
    loss_bits(&mut straight, 10);
    let expected = loss_bits(&mut straight, 10);

    let mut first = Trainer::new(finetune()).unwrap();
    loss_bits(&mut first, 10);
    first.save_checkpoint(&path).unwrap();
    let mut resumed = Trainer::new(finetune()).unwrap();
    resumed.load_checkpoint(&path).unwrap();
    assert_eq!(loss_bits(&mut resumed, 10), expected);
}

#[test]
fn mismatched_config_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hkpt");
    Trainer::new(TrainConfig::minimal()).unwrap().save_checkpoint(&path).unwrap();

    let wider = TrainConfig {
        general_adapters: 3,
        ..TrainConfig::minimal()
    };
    let err = Trainer::new(wider).unwrap().load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("`blocks.0.mola.general_router.fc2.bias`"), "{err}");

    let deeper = TrainConfig {
        depth: 1,
        ..TrainConfig::minimal()
    };
    let err = Trainer::new(deeper).unwrap().load_checkpoint(&path).unwrap_err();
    assert!(matches!(&err, Error::UnknownParameter(name) if name.starts_with("blocks.1.")), "{err}");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Trainer::new(TrainConfig::minimal()).unwrap();
    let bytes = checkpoint::encode(&t.checkpoint_entries());
    assert!(bytes.starts_with(b"HKPT1\n"));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(checkpoint::decode(&bad_magic).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());

    let mut entries = t.checkpoint_entries();
    entries.insert("not.a.param".into(), Tensor::zeros(&[1]));
    let mut fresh = Trainer::new(TrainConfig::minimal()).unwrap();
    assert!(matches!(fresh.restore(&entries), Err(Error::UnknownParameter(n)) if n == "not.a.param"));
}

#[test]
fn checkpoint_header_describes_every_entry() {
    let t = Trainer::new(TrainConfig::minimal()).unwrap();
    let entries = t.checkpoint_entries();
    let bytes = checkpoint::encode(&entries);
    let body = &bytes[6..];
    let newline = body.iter().position(|&b| b == b'\n').unwrap();
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&body[..newline]).unwrap();
    let payload = &body[newline + 1..];
    assert_eq!(header.len(), entries.len());
    for (name, t) in &entries {
        let h = &header[name];
        assert_eq!(h["dtype"], "f64");
        let shape: Vec<usize> = serde_json::from_value(h["shape"].clone()).unwrap();
        assert_eq!(shape, t.shape());
        let offset = h["offset"].as_u64().unwrap() as usize;
        let first = f64::from_le_bytes(payload[offset..offset + 8].try_into().unwrap());
        assert_eq!(first.to_bits(), t.data()[0].to_bits());
    }
}

#[test]
fn step_histograms_add_up() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..finetune()
    };
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let mut summed = vec![[0u64; 2]; cfg.depth];
    for _ in 0..5 {
        let report = t.train_step().unwrap();
        for (l, [teacher, general]) in report.routing.layers.iter().enumerate() {
            for (k, r) in [teacher, general].into_iter().enumerate() {
                assert_eq!(r.counts.iter().sum::<u64>(), (cfg.tokens * cfg.batch_size) as u64);
                summed[l][k] += r.counts.iter().sum::<u64>();
            }
        }
    }
    for (l, [teacher, general]) in t.routing.layers.iter().enumerate() {
        assert_eq!(teacher.tokens, summed[l][0]);
        assert_eq!(general.tokens, summed[l][1]);
    }
}

#[test]
fn one_teacher_routes_everything_to_expert_zero() {
    let cfg = TrainConfig {
        teachers: vec![TeacherConfig::new(4, 3, 2)],
        ..TrainConfig::minimal()
    };
    let mut t = Trainer::new(cfg).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    for [teacher, _] in &t.routing.layers {
        assert_eq!(teacher.fractions(), vec![1.0]);
    }
}

#[test]
fn every_trainable_parameter_learns_within_twenty_steps() {
    let mut t = Trainer::new(TrainConfig {
        stage: Stage::Finetune,
        ..TrainConfig::default()
    })
    .unwrap();
    let before = snapshot(&t);
    for _ in 0..20 {
        t.train_step().unwrap();
    }
    let after = snapshot(&t);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if a != b {
            continue;
        }
        // An adapter that routing never picked cannot receive a gradient.
        let unused_general = name.split('.').collect::<Vec<_>>();
        let exempt = match unused_general.as_slice() {
            ["blocks", layer, "mola", "general_adapters", e, _] => {
                let (l, e): (usize, usize) = (layer.parse().unwrap(), e.parse().unwrap());
                t.routing.layers[l][1].counts[e] == 0
            }
            _ => false,
        };
        assert!(exempt, "{name} never changed");
    }
}

#[test]
fn non_finite_loss_names_the_component() {
    let mut t = Trainer::new(TrainConfig::minimal()).unwrap();
    let id = t.model.alignment.summarizer.fc2.weight;
    let n = t.model.store.get(id).numel();
    t.model.store.get_mut(id).set_data(&vec![1e300; n]).unwrap();
    let err = t.train_step().unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { component: "cg" }), "{err:?}");
    assert_eq!(t.step, 0);
}

#[test]
fn metrics_line_has_the_documented_keys() {
    let mut t = Trainer::new(TrainConfig::minimal()).unwrap();
    let report = t.train_step().unwrap();
    let v: serde_json::Value = serde_json::from_str(&t.metrics_line(&report)).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["loss_cg", "loss_fg", "loss_gen", "loss_mb", "loss_total", "router_entropy", "step", "wall_ms"]
    );
    assert_eq!(v["router_entropy"].as_array().unwrap().len(), 2);
    assert!(v["wall_ms"].is_null());
    t.cfg.record_wall_time = true;
    let v: serde_json::Value = serde_json::from_str(&t.metrics_line(&report)).unwrap();
    assert!(v["wall_ms"].as_f64().unwrap() >= 0.0);
}
