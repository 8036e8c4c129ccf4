//! Distillation objectives, the balance loss, the toy generation loss and
//! routing statistics.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mola::{Routing, RoutingRecord};
use crate::nn::{Linear, ProjectionMlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA1: f64 = 0.5;
pub const DEFAULT_LAMBDA2: f64 = 0.05;

/// Token importance `s = mean_rows(softmax_rows([T̂_i ; T̂] · T̂_iᵀ / √D))`, shape `1×m`.
///
/// Softmax runs over the `m` teacher tokens acting as keys; the mean runs over
/// all `m + l` query rows, so the scores sum to one.
pub fn token_importance(tape: &mut Tape<'_>, proj_teacher: Var, proj_instr: Var) -> Result<Var> {
    let (ts, is) = (tape.shape(proj_teacher).to_vec(), tape.shape(proj_instr).to_vec());
    if ts.len() != 2 || is.len() != 2 || ts[1] != is[1] {
        return Err(Error::ShapeMismatch {
            op: "token_importance",
            left: ts,
            right: is,
        });
    }
    let d = ts[1] as f64;
    let queries = tape.concat(&[proj_teacher, proj_instr], 0)?;
    let keys = tape.transpose(proj_teacher)?;
    let sim = tape.matmul(queries, keys)?;
    let sim = tape.scale(sim, 1.0 / d.sqrt())?;
    let attn = tape.softmax_rows(sim)?;
    tape.mean_rows(attn)
}

/// `(1/N_t) Σ_i s_i · per_token_mse(student_i, teacher_i)`.
pub fn fine_loss(tape: &mut Tape<'_>, students: &[Var], teachers: &[Var], scores: &[Var]) -> Result<Var> {
    let n = students.len();
    if n == 0 || teachers.len() != n || scores.len() != n {
        return Err(Error::invalid(format!(
            "fine_loss: {} students, {} teachers, {} score vectors",
            n,
            teachers.len(),
            scores.len()
        )));
    }
    let mut terms = Vec::with_capacity(n);
    for ((&s, &t), &w) in students.iter().zip(teachers).zip(scores) {
        let per_token = tape.per_token_mse(s, t)?;
        if tape.value(w).len() != tape.value(per_token).len() {
            return Err(Error::ShapeMismatch {
                op: "fine_loss",
                left: tape.shape(w).to_vec(),
                right: tape.shape(per_token).to_vec(),
            });
        }
        let m = tape.value(per_token).len();
        let w = tape.reshape(w, &[m])?;
        let weighted = tape.mul(w, per_token)?;
        terms.push(tape.sum(weighted)?);
    }
    let stacked = tape.concat(&terms, 0)?;
    tape.mean(stacked)
}

/// Plain MSE between the student output and the summarized teacher feature.
pub fn coarse_loss(tape: &mut Tape<'_>, student: Var, summarized: Var) -> Result<Var> {
    tape.mse(student, summarized)
}

/// Load-balancing loss `E · Σ_e f_e · P_e`, averaged over the given routers.
///
/// `f_e` is the fraction of tokens sent to expert `e` (no gradient); `P_e` is
/// the mean router probability of `e` over the same tokens.
pub fn balance_loss(tape: &mut Tape<'_>, routers: &[&Routing]) -> Result<Var> {
    if routers.is_empty() {
        return Err(Error::invalid("balance_loss: empty routing record"));
    }
    let mut terms = Vec::with_capacity(routers.len());
    for r in routers {
        let n = r.indices.len();
        if n == 0 {
            return Err(Error::invalid("balance_loss: router saw no tokens"));
        }
        let e = r.num_experts;
        let mut frac = vec![0.0; e];
        for &i in &r.indices {
            frac[i] += 1.0 / n as f64;
        }
        let frac = tape.constant(Tensor::new(vec![1, e], frac)?);
        let mean_p = tape.mean_rows(r.probs)?;
        let prod = tape.mul(mean_p, frac)?;
        let s = tape.sum(prod)?;
        terms.push(tape.scale(s, e as f64)?);
    }
    let stacked = tape.concat(&terms, 0)?;
    tape.mean(stacked)
}

/// Balance loss over both routers of every layer.
pub fn balance_loss_from_records(tape: &mut Tape<'_>, records: &[RoutingRecord]) -> Result<Var> {
    let routers: Vec<&Routing> = records.iter().flat_map(|r| [&r.teacher, &r.general]).collect();
    balance_loss(tape, &routers)
}

/// Projector plus a one-layer next-token decoder over a synthetic vocabulary.
///
/// The embedding table has `vocab + 1` rows; the last row is the start token.
#[derive(Clone, Debug)]
pub struct GenHead {
    pub projector: ProjectionMlp,
    pub embed: ParamId,
    pub decoder: Linear,
    pub vocab: usize,
    pub lm_width: usize,
}

impl GenHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, lm_width: usize, vocab: usize, rng: &mut R) -> Self {
        let projector = ProjectionMlp::new(store, "gen_head.projector", ParamGroup::Projector, width, lm_width, lm_width, rng);
        let embed = store.add_normal("gen_head.embed", ParamGroup::GenHead, &[vocab + 1, lm_width], 1.0, rng);
        let decoder = Linear::new(store, "gen_head.decoder", ParamGroup::GenHead, lm_width, vocab, rng);
        Self {
            projector,
            embed,
            decoder,
            vocab,
            lm_width,
        }
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    /// Embeds token ids, `len × lm_width`.
    pub fn embed_tokens(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::IndexOutOfRange {
                op: "embed_tokens",
                index: bad,
                extent: self.vocab,
            });
        }
        let table = tape.param(self.embed);
        tape.gather_rows(table, ids)
    }

    /// Next-token logits `L×V` under teacher forcing.
    pub fn logits(&self, tape: &mut Tape<'_>, student: Var, instr: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::invalid("gen_loss: empty target sequence"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::IndexOutOfRange {
                op: "gen_loss",
                index: bad,
                extent: self.vocab,
            });
        }
        let visual = self.projector.forward(tape, student)?;
        let ctx = tape.concat(&[visual, instr], 0)?;
        let ctx = tape.mean_rows(ctx)?;
        let prev: Vec<usize> = std::iter::once(self.bos())
            .chain(targets[..targets.len() - 1].iter().copied())
            .collect();
        let table = tape.param(self.embed);
        let states = tape.gather_rows(table, &prev)?;
        let states = tape.add_bias(states, ctx)?;
        self.decoder.forward(tape, states)
    }
}

pub fn gen_loss(head: &GenHead, tape: &mut Tape<'_>, student: Var, instr: Var, targets: &[usize]) -> Result<Var> {
    let logits = head.logits(tape, student, instr, targets)?;
    tape.cross_entropy(logits, targets)
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub gen: f64,
    pub cg: f64,
    pub fg: f64,
    pub mb: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Tape handles of the four loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub gen: Var,
    pub cg: Var,
    pub fg: Var,
    pub mb: Var,
}

/// `gen + λ1·(fg + cg) + λ2·mb`.
pub fn total_loss(tape: &mut Tape<'_>, terms: LossTerms, lambda1: f64, lambda2: f64) -> Result<(Var, LossBundle)> {
    for (name, v) in [("gen", terms.gen), ("cg", terms.cg), ("fg", terms.fg), ("mb", terms.mb)] {
        if !tape.scalar(v).is_finite() {
            return Err(Error::NonFiniteLoss { component: name });
        }
    }
    let distill = tape.add(terms.fg, terms.cg)?;
    let distill = tape.scale(distill, lambda1)?;
    let balance = tape.scale(terms.mb, lambda2)?;
    let total = tape.add(terms.gen, distill)?;
    let total = tape.add(total, balance)?;
    let bundle = LossBundle {
        gen: tape.scalar(terms.gen),
        cg: tape.scalar(terms.cg),
        fg: tape.scalar(terms.fg),
        mb: tape.scalar(terms.mb),
        total: tape.scalar(total),
        lambda1,
        lambda2,
    };
    Ok((total, bundle))
}

/// Selection counts and probability sums of one router.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    pub tokens: u64,
}

impl RouterStats {
    pub fn new(experts: usize) -> Self {
        Self {
            counts: vec![0; experts],
            prob_sums: vec![0.0; experts],
            tokens: 0,
        }
    }

    pub fn observe(&mut self, indices: &[usize], probs: &[f64]) {
        let e = self.counts.len();
        for &i in indices {
            self.counts[i] += 1;
        }
        for row in probs.chunks(e) {
            self.prob_sums.iter_mut().zip(row).for_each(|(s, p)| *s += p);
        }
        self.tokens += indices.len() as u64;
    }

    pub fn merge(&mut self, other: &RouterStats) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.prob_sums.iter_mut().zip(&other.prob_sums).for_each(|(a, b)| *a += b);
        self.tokens += other.tokens;
    }

    pub fn fractions(&self) -> Vec<f64> {
        let n = self.tokens.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn mean_probs(&self) -> Vec<f64> {
        let n = self.tokens.max(1) as f64;
        self.prob_sums.iter().map(|&s| s / n).collect()
    }

    /// Shannon entropy (nats) of the selection histogram.
    pub fn usage_entropy(&self) -> f64 {
        self.fractions()
            .iter()
            .filter(|&&f| f > 0.0)
            .map(|&f| -f * f.ln())
            .sum()
    }
}

/// Per layer: teacher router stats and general router stats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub layers: Vec<[RouterStats; 2]>,
}

impl RoutingStats {
    pub fn new(depth: usize, teacher_experts: usize, general_experts: usize) -> Self {
        Self {
            layers: (0..depth)
                .map(|_| [RouterStats::new(teacher_experts), RouterStats::new(general_experts)])
                .collect(),
        }
    }

    pub fn observe(&mut self, tape: &Tape<'_>, records: &[RoutingRecord]) {
        for (layer, rec) in self.layers.iter_mut().zip(records) {
            layer[0].observe(&rec.teacher.indices, tape.value(rec.teacher.probs));
            layer[1].observe(&rec.general.indices, tape.value(rec.general.probs));
        }
    }

    /// Element-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &RoutingStats) {
        if self.layers.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a[0].merge(&b[0]);
            a[1].merge(&b[1]);
        }
    }

    pub fn mean_usage_entropy(&self) -> f64 {
        let all: Vec<f64> = self.layers.iter().flatten().map(RouterStats::usage_entropy).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }

    /// CSV with columns `layer,router,expert,count,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,router,expert,count,fraction\n");
        for (l, pair) in self.layers.iter().enumerate() {
            for (name, stats) in ["teacher", "general"].iter().zip(pair) {
                for (e, (c, f)) in stats.counts.iter().zip(stats.fractions()).enumerate() {
                    let _ = writeln!(out, "{l},{name},{e},{c},{f}");
                }
            }
        }
        out
    }
}

/// Writes `teacher_index,token_index,score` rows, one per token per teacher.
pub fn export_score_map(scores: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut out = String::from("teacher_index,token_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        for (j, v) in s.iter().enumerate() {
            let _ = writeln!(out, "{i},{j},{v}");
        }
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mola::argmax_rows;

    fn routing(tape: &mut Tape<'_>, probs: Vec<Vec<f64>>) -> Routing {
        let e = probs[0].len();
        let flat: Vec<f64> = probs.concat();
        let indices = argmax_rows(&flat, e);
        let probs = tape.constant(Tensor::from_rows(&probs).unwrap());
        Routing {
            indices,
            probs,
            num_experts: e,
        }
    }

    #[test]
    fn single_key_scores_are_one() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap());
        let i = tape.constant(Tensor::from_rows(&[vec![0.2, 9.0], vec![1.0, 1.0]]).unwrap());
        let s = token_importance(&mut tape, t, i).unwrap();
        assert_eq!(tape.value(s), &[1.0]);
    }

    #[test]
    fn identical_tokens_give_uniform_scores() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_rows(&vec![vec![0.5, 1.0]; 4]).unwrap());
        let i = tape.constant(Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap());
        let s = token_importance(&mut tape, t, i).unwrap();
        for v in tape.value(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(token_importance(&mut tape, t, bad).is_err());
    }

    #[test]
    fn fine_loss_hand_value() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let t = tape.constant(Tensor::from_rows(&[vec![0.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let l = fine_loss(&mut tape, &[s], &[t], &[w]).unwrap();
        assert_eq!(tape.scalar(l), 4.0);
        let z = fine_loss(&mut tape, &[s], &[s], &[w]).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        assert!(fine_loss(&mut tape, &[s], &[], &[w]).is_err());
    }

    #[test]
    fn balance_loss_endpoints() {
        let mut tape = Tape::new();
        let uniform = routing(&mut tape, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        // argmax ties go to expert 0, so fix the assignment by hand
        let uniform = Routing {
            indices: vec![0, 1],
            ..uniform
        };
        let l = balance_loss(&mut tape, &[&uniform]).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-12);
        let collapsed = routing(&mut tape, vec![vec![1.0, 0.0, 0.0]; 5]);
        let l = balance_loss(&mut tape, &[&collapsed]).unwrap();
        assert!((tape.scalar(l) - 3.0).abs() < 1e-12);
        assert!(balance_loss(&mut tape, &[]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let mut c = |v: f64| tape.constant(Tensor::scalar(v).unwrap());
        let terms = LossTerms {
            gen: c(1.0),
            fg: c(2.0),
            cg: c(2.0),
            mb: c(4.0),
        };
        let (_, b) = total_loss(&mut tape, terms, 0.5, 0.05).unwrap();
        assert!((b.total - 3.2).abs() < 1e-12);
        let (_, b) = total_loss(&mut tape, terms, 0.0, 0.0).unwrap();
        assert_eq!(b.total, b.gen);
    }

    #[test]
    fn routing_stats_csv_and_merge() {
        let mut a = RouterStats::new(2);
        a.observe(&[0, 0, 1], &[0.6, 0.4, 0.7, 0.3, 0.2, 0.8]);
        let mut b = RouterStats::new(2);
        b.observe(&[1], &[0.1, 0.9]);
        let mut ab = a.clone();
        ab.merge(&b);
        assert_eq!(ab.counts, vec![2, 2]);
        assert_eq!(ab.tokens, 4);
        assert!((ab.mean_probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((ab.usage_entropy() - 2f64.ln()).abs() < 1e-12);

        let stats = RoutingStats {
            layers: vec![[a, b]],
        };
        let csv = stats.to_csv();
        assert!(csv.starts_with("layer,router,expert,count,fraction\n0,teacher,0,2,"));
        assert_eq!(csv.lines().count(), 5);
    }
}
