//! Mixture of LoRA adapters on a feedforward sublayer.
//!
//! Each layer carries one feedforward block `F`, a bank of teacher-specific
//! adapters, a bank of general adapters and one top-1 router per bank. In
//! full mode a token passes through `F` plus exactly one adapter of each bank,
//! scaled by the router probability of the chosen adapter; adapters that
//! receive no tokens are never touched, so their parameters stay off the tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Initial standard deviation of the down-projection.
pub const LORA_DOWN_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Both routers active, one teacher and one general adapter per token.
    Full,
    /// Only teacher adapter `i`; no routers, no general adapters.
    TeacherOnly(usize),
    /// The bare feedforward layer.
    Base,
}

/// Rank-`r` update `h·down·up`; `up` starts at zero so the update starts at zero.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub width: usize,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        width: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank >= width {
            return Err(Error::invalid(format!(
                "LoRA rank must satisfy 0 < rank < width ({width}), got {rank}"
            )));
        }
        let down = store.add_normal(format!("{name}.down"), group, &[width, rank], LORA_DOWN_STD, rng);
        let up = store.add_filled(format!("{name}.up"), group, &[rank, width], 0.0);
        Ok(Self {
            down,
            up,
            rank,
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        lora_forward(self, tape, h)
    }
}

pub fn lora_forward(adapter: &LoraAdapter, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    let width = tape.shape(h).last().copied().unwrap_or(0);
    if tape.shape(h).len() != 2 || width != adapter.width {
        return Err(Error::ShapeMismatch {
            op: "lora_forward",
            left: tape.shape(h).to_vec(),
            right: vec![adapter.width, adapter.rank],
        });
    }
    let down = tape.param(adapter.down);
    let up = tape.param(adapter.up);
    let z = tape.matmul(h, down)?;
    tape.matmul(z, up)
}

/// Two-layer GELU perceptron producing one logit per expert.
#[derive(Clone, Debug)]
pub struct Router {
    pub fc1: Linear,
    pub fc2: Linear,
    pub num_experts: usize,
}

/// Per-token top-1 selection plus the full probability matrix (on the tape).
#[derive(Clone, Debug)]
pub struct Routing {
    pub indices: Vec<usize>,
    pub probs: Var,
    pub num_experts: usize,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        num_experts: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), ParamGroup::Routers, width, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), ParamGroup::Routers, hidden, num_experts, rng),
            num_experts,
        }
    }

    pub fn logits(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let z = self.fc1.forward(tape, h)?;
        let z = tape.gelu(z)?;
        self.fc2.forward(tape, z)
    }

    pub fn route(&self, tape: &mut Tape<'_>, h: Var) -> Result<Routing> {
        route(self, tape, h)
    }
}

pub fn route(router: &Router, tape: &mut Tape<'_>, h: Var) -> Result<Routing> {
    let logits = router.logits(tape, h)?;
    let probs = tape.softmax_rows(logits)?;
    let indices = argmax_rows(tape.value(probs), router.num_experts);
    Ok(Routing {
        indices,
        probs,
        num_experts: router.num_experts,
    })
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Router decisions of one layer in full mode.
#[derive(Clone, Debug)]
pub struct RoutingRecord {
    pub teacher: Routing,
    pub general: Routing,
}

#[derive(Clone, Copy, Debug)]
pub struct MolaConfig {
    pub width: usize,
    pub ffn_hidden: usize,
    pub teacher_adapters: usize,
    pub general_adapters: usize,
    pub rank: usize,
    pub router_hidden: usize,
    /// Multiplier on the `1/√fan_in` init std of the FFN down-projection.
    pub residual_scale: f64,
}

#[derive(Clone, Debug)]
pub struct MolaLayer {
    pub fc1: Linear,
    pub fc2: Linear,
    pub teacher_adapters: Vec<LoraAdapter>,
    pub general_adapters: Vec<LoraAdapter>,
    pub teacher_router: Router,
    pub general_router: Router,
}

impl MolaLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &MolaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.teacher_adapters == 0 || cfg.general_adapters == 0 {
            return Err(Error::invalid("a MoLA layer needs at least one adapter per bank"));
        }
        let fc1 = Linear::new(store, &format!("{name}.fc1"), ParamGroup::BaseEncoder, cfg.width, cfg.ffn_hidden, rng);
        let fc2_std = cfg.residual_scale / (cfg.ffn_hidden as f64).sqrt();
        let fc2 = Linear::with_std(store, &format!("{name}.fc2"), ParamGroup::BaseEncoder, cfg.ffn_hidden, cfg.width, fc2_std, rng);
        let teacher_adapters = (0..cfg.teacher_adapters)
            .map(|i| {
                LoraAdapter::new(
                    store,
                    &format!("{name}.teacher_adapters.{i}"),
                    ParamGroup::TeacherAdapters,
                    cfg.width,
                    cfg.rank,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let general_adapters = (0..cfg.general_adapters)
            .map(|i| {
                LoraAdapter::new(
                    store,
                    &format!("{name}.general_adapters.{i}"),
                    ParamGroup::GeneralAdapters,
                    cfg.width,
                    cfg.rank,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let teacher_router = Router::new(
            store,
            &format!("{name}.teacher_router"),
            cfg.width,
            cfg.router_hidden,
            cfg.teacher_adapters,
            rng,
        );
        let general_router = Router::new(
            store,
            &format!("{name}.general_router"),
            cfg.width,
            cfg.router_hidden,
            cfg.general_adapters,
            rng,
        );
        Ok(Self {
            fc1,
            fc2,
            teacher_adapters,
            general_adapters,
            teacher_router,
            general_router,
        })
    }

    /// The frozen feedforward path `F(h)`.
    pub fn base(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let z = self.fc1.forward(tape, h)?;
        let z = tape.gelu(z)?;
        self.fc2.forward(tape, z)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        mode: ForwardMode,
    ) -> Result<(Var, Option<RoutingRecord>)> {
        mola_forward(self, tape, h, mode)
    }
}

pub fn mola_forward(
    layer: &MolaLayer,
    tape: &mut Tape<'_>,
    h: Var,
    mode: ForwardMode,
) -> Result<(Var, Option<RoutingRecord>)> {
    if let ForwardMode::TeacherOnly(i) = mode {
        if i >= layer.teacher_adapters.len() {
            return Err(Error::IndexOutOfRange {
                op: "teacher_only",
                index: i,
                extent: layer.teacher_adapters.len(),
            });
        }
    }
    let base = layer.base(tape, h)?;
    match mode {
        ForwardMode::Base => Ok((base, None)),
        ForwardMode::TeacherOnly(i) => {
            let a = layer.teacher_adapters[i].forward(tape, h)?;
            Ok((tape.add(base, a)?, None))
        }
        ForwardMode::Full => {
            let teacher = layer.teacher_router.route(tape, h)?;
            let out = mix_selected(tape, base, h, &layer.teacher_adapters, &teacher)?;
            let general = layer.general_router.route(tape, h)?;
            let out = mix_selected(tape, out, h, &layer.general_adapters, &general)?;
            Ok((out, Some(RoutingRecord { teacher, general })))
        }
    }
}

/// Adds `p_sel · adapter_sel(h)` per token, visiting only adapters that were
/// selected. Every token belongs to exactly one group, so the per-group
/// updates are stacked and scattered back in a single step.
fn mix_selected(
    tape: &mut Tape<'_>,
    acc: Var,
    h: Var,
    adapters: &[LoraAdapter],
    routing: &Routing,
) -> Result<Var> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); adapters.len()];
    for (t, &e) in routing.indices.iter().enumerate() {
        groups[e].push(t);
    }
    let mut updates = Vec::new();
    let mut rows = Vec::with_capacity(routing.indices.len());
    let mut cols = Vec::with_capacity(routing.indices.len());
    for (e, (adapter, tokens)) in adapters.iter().zip(&groups).enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let hs = tape.gather_rows(h, tokens)?;
        updates.push(adapter.forward(tape, hs)?);
        rows.extend_from_slice(tokens);
        cols.extend(std::iter::repeat_n(e, tokens.len()));
    }
    if updates.is_empty() {
        return Ok(acc);
    }
    let update = if updates.len() == 1 { updates[0] } else { tape.concat(&updates, 0)? };
    let p = tape.gather_elements(routing.probs, &rows, &cols)?;
    let update = tape.scale_rows(update, p)?;
    tape.index_add_rows(acc, update, &rows)
}
