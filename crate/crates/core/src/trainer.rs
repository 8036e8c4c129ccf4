//! Training orchestration: stage schedule, optimizer steps, metrics,
//! routing statistics and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::{Stage, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossBundle, RoutingStats};
use crate::mola::{ForwardMode, RoutingRecord};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig, MomentState};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::Tensor;

const STEP_KEY: &str = "trainer.step";

/// Which groups a stage trains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub stage: Stage,
    pub trainable_groups: Vec<ParamGroup>,
}

impl StageSchedule {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            trainable_groups: stage.trainable_groups(),
        }
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .iter()
            .copied()
            .filter(|g| !self.trainable_groups.contains(g))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub losses: LossBundle,
    /// Routing histogram of this step only.
    pub routing: RoutingStats,
    /// Usage entropy per layer, `[teacher, general]`.
    pub router_entropy: Vec<[f64; 2]>,
    pub wall_ms: f64,
    /// Cosine similarity between `I^S_i` and `Î^T_i`, per teacher.
    pub teacher_cosine: Vec<f64>,
}

#[derive(Serialize)]
struct EntropyEntry {
    layer: usize,
    teacher: f64,
    general: f64,
}

#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    loss_total: f64,
    loss_gen: f64,
    loss_cg: f64,
    loss_fg: f64,
    loss_mb: f64,
    router_entropy: Vec<EntropyEntry>,
    wall_ms: Option<f64>,
}

/// Routing histograms of one full-mode pass.
pub fn accumulate_routing(tape: &Tape<'_>, records: &[RoutingRecord], teacher_experts: usize, general_experts: usize) -> RoutingStats {
    let mut stats = RoutingStats::new(records.len(), teacher_experts, general_experts);
    stats.observe(tape, records);
    stats
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub dataset: Dataset,
    pub schedule: StageSchedule,
    /// Number of completed steps.
    pub step: u64,
    /// Routing statistics accumulated over every step taken by this trainer.
    pub routing: RoutingStats,
    teacher_cache: Vec<Option<Vec<Tensor>>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let model = Model::new(&cfg)?;
        let dataset = Dataset::from_config(&cfg);
        let routing = RoutingStats::new(cfg.depth, cfg.num_teachers(), cfg.general_adapters);
        Ok(Self {
            optimizer: Adam::new(AdamConfig::with_lr(cfg.lr)),
            schedule: StageSchedule::new(cfg.stage),
            teacher_cache: vec![None; cfg.dataset_size],
            cfg,
            model,
            dataset,
            step: 0,
            routing,
        })
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.cfg.stage = stage;
        self.schedule = StageSchedule::new(stage);
        self.model.store.set_trainable(&self.schedule.trainable_groups);
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
        self.optimizer.cfg.lr = lr;
    }

    /// Unshuffled teacher features of dataset sample `index` (cached).
    pub fn teacher_features(&mut self, index: usize) -> Result<Vec<Tensor>> {
        let index = index % self.dataset.size;
        if let Some(f) = &self.teacher_cache[index] {
            return Ok(f.clone());
        }
        let sample = self.dataset.sample(index);
        let f = self.model.teachers.unshuffled(&sample.image)?;
        self.teacher_cache[index] = Some(f.clone());
        Ok(f)
    }

    /// Forward on every sample of the batch, backward on the summed objective,
    /// one optimizer update on trainable groups, then gradients are cleared.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let start = Instant::now();
        let batch = self.cfg.batch_size;
        let mut step_routing = RoutingStats::new(self.cfg.depth, self.cfg.num_teachers(), self.cfg.general_adapters);
        let mut losses: Option<LossBundle> = None;
        let mut cos = vec![0.0; self.model.num_teachers()];
        for b in 0..batch {
            let index = (self.step as usize * batch + b) % self.dataset.size;
            let sample = self.dataset.sample(index);
            let raw = self.teacher_features(index)?;
            let grads = {
                let mut tape = Tape::with_params(&self.model.store);
                let out = self.model.forward(&mut tape, &sample, &raw)?;
                step_routing.observe(&tape, &out.routing);
                for (c, (&s, &t)) in cos.iter_mut().zip(out.student_per_teacher.iter().zip(&out.projected_teachers)) {
                    *c += cosine(tape.value(s), tape.value(t)) / batch as f64;
                }
                losses = Some(match losses {
                    None => out.losses,
                    Some(acc) => LossBundle {
                        gen: acc.gen + out.losses.gen,
                        cg: acc.cg + out.losses.cg,
                        fg: acc.fg + out.losses.fg,
                        mb: acc.mb + out.losses.mb,
                        total: acc.total + out.losses.total,
                        ..acc
                    },
                });
                tape.backward(out.total)?
            };
            self.model.store.accumulate(&grads)?;
        }
        self.optimizer.step(&mut self.model.store)?;
        self.model.store.zero_grad();
        self.routing.merge(&step_routing);
        let report = StepReport {
            step: self.step,
            losses: losses.expect("batch_size is positive"),
            router_entropy: step_routing
                .layers
                .iter()
                .map(|[t, g]| [t.usage_entropy(), g.usage_entropy()])
                .collect(),
            routing: step_routing,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            teacher_cosine: cos,
        };
        self.step += 1;
        Ok(report)
    }

    /// One JSONL metrics record. `wall_ms` is `null` unless wall-time recording is on.
    pub fn metrics_line(&self, r: &StepReport) -> String {
        let line = MetricsLine {
            step: r.step,
            loss_total: r.losses.total,
            loss_gen: r.losses.gen,
            loss_cg: r.losses.cg,
            loss_fg: r.losses.fg,
            loss_mb: r.losses.mb,
            router_entropy: r
                .router_entropy
                .iter()
                .enumerate()
                .map(|(layer, [teacher, general])| EntropyEntry {
                    layer,
                    teacher: *teacher,
                    general: *general,
                })
                .collect(),
            wall_ms: self.cfg.record_wall_time.then_some(r.wall_ms),
        };
        serde_json::to_string(&line).expect("metrics serialize")
    }

    /// Importance scores `s_i` on dataset sample `index`.
    pub fn score_maps(&mut self, index: usize) -> Result<Vec<Vec<f64>>> {
        let sample = self.dataset.sample(index % self.dataset.size);
        let raw = self.teacher_features(index)?;
        let mut tape = Tape::with_params(&self.model.store);
        let out = self.model.forward(&mut tape, &sample, &raw)?;
        Ok(out.scores.iter().map(|&s| tape.value(s).to_vec()).collect())
    }

    /// Full-mode routing histogram over the first `samples` dataset samples.
    pub fn route_stats(&self, samples: usize) -> Result<RoutingStats> {
        let mut stats = RoutingStats::new(self.cfg.depth, self.cfg.num_teachers(), self.cfg.general_adapters);
        for i in 0..samples {
            let sample = self.dataset.sample(i % self.dataset.size);
            let mut tape = Tape::with_params(&self.model.store);
            let out = self.model.encoder.encode(&mut tape, &sample.image, ForwardMode::Full)?;
            stats.merge(&accumulate_routing(
                &tape,
                &out.routing,
                self.cfg.num_teachers(),
                self.cfg.general_adapters,
            ));
        }
        Ok(stats)
    }

    pub fn checkpoint_entries(&self) -> BTreeMap<String, Tensor> {
        let store = &self.model.store;
        let mut out = BTreeMap::new();
        for (name, id) in store.ids_by_name() {
            out.insert(name.to_string(), store.get(id).clone().with_requires_grad(false));
        }
        for (id, st) in &self.optimizer.state {
            let name = &store.param(*id).name;
            let shape = store.get(*id).shape().to_vec();
            let m = Tensor::new(shape.clone(), st.m.clone()).expect("finite moments");
            let v = Tensor::new(shape, st.v.clone()).expect("finite moments");
            out.insert(format!("optimizer.{name}.m"), m);
            out.insert(format!("optimizer.{name}.v"), v);
            out.insert(format!("optimizer.{name}.t"), Tensor::scalar(st.t as f64).expect("finite"));
        }
        out.insert(STEP_KEY.into(), Tensor::scalar(self.step as f64).expect("finite"));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        self.restore(&entries)
    }

    /// Replaces parameters, optimizer state and step counter. Every model
    /// parameter must be present; unknown names are rejected.
    pub fn restore(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let store = &self.model.store;
        let mut params: Vec<(ParamId, &Tensor)> = Vec::new();
        let mut moments: BTreeMap<ParamId, (Option<&Tensor>, Option<&Tensor>, Option<u64>)> = BTreeMap::new();
        let mut step = None;
        for (name, t) in entries {
            if name == STEP_KEY {
                step = Some(t.data()[0] as u64);
                continue;
            }
            if let Some(rest) = name.strip_prefix("optimizer.") {
                let (pname, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                let id = store.id(pname).map_err(|_| Error::UnknownParameter(name.clone()))?;
                let slot = moments.entry(id).or_default();
                match field {
                    "m" => slot.0 = Some(t),
                    "v" => slot.1 = Some(t),
                    "t" => slot.2 = Some(t.data()[0] as u64),
                    _ => return Err(Error::UnknownParameter(name.clone())),
                }
                continue;
            }
            let id = store.id(name)?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            params.push((id, t));
        }
        if let Some((name, _)) = store.ids_by_name().find(|(_, id)| !params.iter().any(|(p, _)| p == id)) {
            return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
        }
        let mut state = BTreeMap::new();
        for (id, slot) in moments {
            let name = &store.param(id).name;
            let (Some(m), Some(v), Some(t)) = slot else {
                return Err(Error::Checkpoint(format!("incomplete optimizer state for `{name}`")));
            };
            if m.numel() != store.get(id).numel() || v.numel() != store.get(id).numel() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
            }
            state.insert(
                id,
                MomentState {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    t,
                },
            );
        }
        for (id, t) in params {
            self.model.store.get_mut(id).set_data(t.data())?;
        }
        self.optimizer.state = state;
        self.step = step.unwrap_or(0);
        self.model.store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrain_freezes_base() {
        let s = StageSchedule::new(Stage::Pretrain);
        assert_eq!(s.frozen_groups(), vec![ParamGroup::PatchEmbed, ParamGroup::BaseEncoder]);
        assert!(StageSchedule::new(Stage::Finetune).frozen_groups().is_empty());
    }

    #[test]
    fn step_runs_and_reports() {
        let mut t = Trainer::new(TrainConfig::minimal()).unwrap();
        let r = t.train_step().unwrap();
        assert_eq!(r.step, 0);
        assert_eq!(t.step, 1);
        let l = r.losses;
        assert!((l.total - (l.gen + 0.5 * (l.fg + l.cg) + 0.05 * l.mb)).abs() < 1e-12);
        for [teacher, general] in &r.routing.layers {
            assert_eq!(teacher.tokens, 4);
            assert_eq!(teacher.counts.iter().sum::<u64>(), 4);
            assert_eq!(general.counts.iter().sum::<u64>(), 4);
        }
        let line = t.metrics_line(&r);
        assert!(line.starts_with("{\"step\":0,\"loss_total\":"));
        assert!(line.ends_with("\"wall_ms\":null}"));
        assert!(t.model.store.iter().all(|(_, p)| p.tensor.grad().is_none()));
    }
}
