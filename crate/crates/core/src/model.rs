//! The full distillation model: student encoder, teacher alignment heads,
//! instruction projection and generation head, plus the frozen teachers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::SyntheticSample;
use crate::encoder::StudentEncoder;
use crate::error::{Error, Result};
use crate::losses::{
    balance_loss_from_records, coarse_loss, fine_loss, gen_loss, token_importance, total_loss, GenHead, LossBundle,
    LossTerms,
};
use crate::mola::{ForwardMode, RoutingRecord};
use crate::nn::ProjectionMlp;
use crate::params::{ParamGroup, ParamStore};
use crate::teacher::{TeacherAlignment, TeacherBank};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: StudentEncoder,
    pub alignment: TeacherAlignment,
    /// Maps instruction embeddings to the student width (`T̂`).
    pub instr_proj: ProjectionMlp,
    pub head: GenHead,
    pub teachers: TeacherBank,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Everything one training sample produces on the tape.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub total: Var,
    pub losses: LossBundle,
    pub student: Var,
    pub routing: Vec<RoutingRecord>,
    /// `I^S_i` from the teacher-only passes.
    pub student_per_teacher: Vec<Var>,
    /// `Î^T_i`.
    pub projected_teachers: Vec<Var>,
    /// `s_i`, each `1×m`.
    pub scores: Vec<Var>,
}

/// Re-labels an op-level non-finite failure with the loss component it hit.
fn tag<T>(component: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { component },
        other => other,
    })
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.width;
        let lm = cfg.resolved_lm_width();
        let specs = cfg.teacher_specs();
        let encoder = StudentEncoder::new(&mut store, cfg.encoder_config(), &mut rng)?;
        let projections = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ProjectionMlp::new(
                    &mut store,
                    &format!("teacher_proj.{i}"),
                    ParamGroup::TeacherProjections,
                    s.unshuffled_width(),
                    d,
                    d,
                    &mut rng,
                )
            })
            .collect();
        let concat_width = specs.iter().map(|s| s.unshuffled_width()).sum();
        let summarizer = ProjectionMlp::new(&mut store, "summarizer", ParamGroup::Summarizer, concat_width, d, d, &mut rng);
        let instr_proj = ProjectionMlp::new(&mut store, "instr_proj", ParamGroup::TeacherProjections, lm, d, d, &mut rng);
        let head = GenHead::new(&mut store, d, lm, cfg.vocab, &mut rng);
        let teachers = TeacherBank::new(&specs, cfg.tokens, cfg.image_size, cfg.image_channels)?;
        store.set_trainable(&cfg.stage.trainable_groups());
        Ok(Self {
            store,
            encoder,
            alignment: TeacherAlignment {
                projections,
                summarizer,
            },
            instr_proj,
            head,
            teachers,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        })
    }

    pub fn num_teachers(&self) -> usize {
        self.teachers.len()
    }

    /// One full-mode pass plus one teacher-only pass per teacher, assembled
    /// into the weighted objective. `teacher_raw` are the unshuffled teacher
    /// features of `sample.image`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        sample: &SyntheticSample,
        teacher_raw: &[Tensor],
    ) -> Result<ForwardOutputs> {
        let patches = tape.constant(self.encoder.patches(&sample.image)?);
        let aligned = tag("cg", self.alignment.align(tape, teacher_raw))?;
        let instr = self.head.embed_tokens(tape, &sample.instruction)?;
        let proj_instr = tag("fg", self.instr_proj.forward(tape, instr))?;

        let full = tag("gen", self.encoder.encode_patches(tape, patches, ForwardMode::Full))?;
        let gen = tag("gen", gen_loss(&self.head, tape, full.tokens, instr, &sample.response))?;
        let cg = tag("cg", coarse_loss(tape, full.tokens, aligned.summarized))?;
        let mb = tag("mb", balance_loss_from_records(tape, &full.routing))?;

        let mut student_per_teacher = Vec::with_capacity(self.num_teachers());
        let mut scores = Vec::with_capacity(self.num_teachers());
        for (i, &proj) in aligned.per_teacher_projected.iter().enumerate() {
            let out = tag("fg", self.encoder.encode_patches(tape, patches, ForwardMode::TeacherOnly(i)))?;
            student_per_teacher.push(out.tokens);
            scores.push(tag("fg", token_importance(tape, proj, proj_instr))?);
        }
        let fg = tag(
            "fg",
            fine_loss(tape, &student_per_teacher, &aligned.per_teacher_projected, &scores),
        )?;

        let (total, losses) = total_loss(tape, LossTerms { gen, cg, fg, mb }, self.lambda1, self.lambda2)?;
        Ok(ForwardOutputs {
            total,
            losses,
            student: full.tokens,
            routing: full.routing,
            student_per_teacher,
            projected_teachers: aligned.per_teacher_projected,
            scores,
        })
    }

    /// Total objective on `sample` without keeping the tape.
    pub fn loss_value(&self, sample: &SyntheticSample, teacher_raw: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.forward(&mut tape, sample, teacher_raw)?;
        Ok(out.losses.total)
    }
}
