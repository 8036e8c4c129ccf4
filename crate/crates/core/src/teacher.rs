//! Frozen synthetic teachers and the learnable machinery that aligns their
//! features with the student's token grid.
//!
//! Images are `P×P×C` (height, width, channel). A teacher with grid `g` cuts
//! the image into `g×g` patches, runs a fixed per-token MLP, then mixes tokens
//! with a fixed `g²×g²` matrix. Its `g×g×C_i` feature map is pixel-unshuffled
//! by `r_i` so that every teacher contributes exactly `m` tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ProjectionMlp;
use crate::tensor::Tensor;

/// Space-to-depth: `g×g×C → (g/r)×(g/r)×(C·r²)`.
///
/// Input position `(oy·r+dy, ox·r+dx, c)` lands at output `(oy, ox, c·r² + dy·r + dx)`.
pub fn pixel_unshuffle(feat: &Tensor, r: usize) -> Result<Tensor> {
    let (g, w, c) = grid_dims(feat, "pixel_unshuffle")?;
    if r == 0 || g % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!(
            "pixel_unshuffle: factor {r} does not divide grid {g}×{w}"
        )));
    }
    let (og, ow, oc) = (g / r, w / r, c * r * r);
    let src = feat.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..g {
        for x in 0..w {
            let (oy, dy, ox, dx) = (y / r, y % r, x / r, x % r);
            for ch in 0..c {
                let o = (oy * ow + ox) * oc + ch * r * r + dy * r + dx;
                out[o] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![og, ow, oc], out)
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(feat: &Tensor, r: usize) -> Result<Tensor> {
    let (og, ow, oc) = grid_dims(feat, "pixel_shuffle")?;
    if r == 0 || oc % (r * r) != 0 {
        return Err(Error::invalid(format!(
            "pixel_shuffle: channels {oc} not divisible by {r}²"
        )));
    }
    let (g, w, c) = (og * r, ow * r, oc / (r * r));
    let src = feat.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..g {
        for x in 0..w {
            let (oy, dy, ox, dx) = (y / r, y % r, x / r, x % r);
            for ch in 0..c {
                out[(y * w + x) * c + ch] = src[(oy * ow + ox) * oc + ch * r * r + dy * r + dx];
            }
        }
    }
    Tensor::new(vec![g, w, c], out)
}

fn grid_dims(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::invalid(format!("{op}: expected an H×W×C tensor, got {s:?}"))),
    }
}

/// Cuts an `P×P×C` image into `(P/patch)²` flattened patches, one per row.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let t = pixel_unshuffle(image, patch)?;
    let (g, w, c) = grid_dims(&t, "patchify")?;
    t.reshape(vec![g * w, c])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub grid: usize,
    pub channels: usize,
    pub unshuffle: usize,
    pub seed: u64,
}

impl TeacherSpec {
    /// Width of one token after unshuffling.
    pub fn unshuffled_width(&self) -> usize {
        self.channels * self.unshuffle * self.unshuffle
    }

    pub fn validate(&self, tokens: usize, image_size: usize) -> std::result::Result<(), String> {
        if self.grid == 0 || self.channels == 0 || self.unshuffle == 0 {
            return Err("grid, channels and unshuffle must be positive".into());
        }
        if !self.grid.is_multiple_of(self.unshuffle) {
            return Err(format!(
                "unshuffle factor {} does not divide grid {}",
                self.unshuffle, self.grid
            ));
        }
        let side = self.grid / self.unshuffle;
        if side * side != tokens {
            return Err(format!(
                "(grid/unshuffle)² = {} but the student has {tokens} tokens",
                side * side
            ));
        }
        if !image_size.is_multiple_of(self.grid) {
            return Err(format!(
                "grid {} does not divide image size {image_size}",
                self.grid
            ));
        }
        Ok(())
    }
}

const TEACHER_HIDDEN: usize = 32;

/// A seeded random network that is never trained.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    pub spec: TeacherSpec,
    image_size: usize,
    image_channels: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    mix: Tensor,
}

impl FrozenTeacher {
    pub fn new(spec: TeacherSpec, image_size: usize, image_channels: usize) -> Result<Self> {
        if spec.grid == 0 || !image_size.is_multiple_of(spec.grid) {
            return Err(Error::invalid(format!(
                "teacher grid {} does not divide image size {image_size}",
                spec.grid
            )));
        }
        let patch = image_size / spec.grid;
        let in_width = patch * patch * image_channels;
        let tokens = spec.grid * spec.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut draw = |shape: &[usize], std: f64| -> Tensor {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("valid shape")
        };
        let w1 = draw(&[in_width, TEACHER_HIDDEN], 1.0 / (in_width as f64).sqrt());
        let b1 = draw(&[TEACHER_HIDDEN], 0.5);
        let w2 = draw(&[TEACHER_HIDDEN, spec.channels], 1.0 / (TEACHER_HIDDEN as f64).sqrt());
        let b2 = draw(&[spec.channels], 0.5);
        let mix = draw(&[tokens, tokens], 1.0 / tokens as f64);
        Ok(Self {
            spec,
            image_size,
            image_channels,
            w1,
            b1,
            w2,
            b2,
            mix,
        })
    }

    /// `g×g×C` feature map; carries no gradient.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        teacher_forward(self, image)
    }
}

pub fn teacher_forward(teacher: &FrozenTeacher, image: &Tensor) -> Result<Tensor> {
    let expected = [teacher.image_size, teacher.image_size, teacher.image_channels];
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "teacher_forward",
            left: image.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let g = teacher.spec.grid;
    let patches = patchify(image, teacher.image_size / g)?;
    let mut tape = Tape::new();
    let x = tape.constant(patches);
    let w1 = tape.constant(teacher.w1.clone());
    let b1 = tape.constant(teacher.b1.clone());
    let w2 = tape.constant(teacher.w2.clone());
    let b2 = tape.constant(teacher.b2.clone());
    let mix = tape.constant(teacher.mix.clone());
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.gelu(h)?;
    let y = tape.linear(h, w2, Some(b2))?;
    let mixed = tape.matmul(mix, y)?;
    let z = tape.add(y, mixed)?;
    tape.tensor(z).reshape(vec![g, g, teacher.spec.channels])
}

/// All teachers of an experiment.
#[derive(Clone, Debug)]
pub struct TeacherBank {
    pub teachers: Vec<FrozenTeacher>,
    pub tokens: usize,
}

impl TeacherBank {
    pub fn new(specs: &[TeacherSpec], tokens: usize, image_size: usize, image_channels: usize) -> Result<Self> {
        let teachers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.validate(tokens, image_size)
                    .map_err(|m| Error::config(format!("teachers[{i}]"), m))?;
                FrozenTeacher::new(s.clone(), image_size, image_channels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { teachers, tokens })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// Unshuffled features `I^T_i`, each `m × C_i·r_i²`.
    pub fn unshuffled(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.teachers
            .iter()
            .map(|t| {
                let f = t.forward(image)?;
                let u = pixel_unshuffle(&f, t.spec.unshuffle)?;
                let w = t.spec.unshuffled_width();
                u.reshape(vec![self.tokens, w])
            })
            .collect()
    }
}

/// Learnable projection of one teacher's tokens to the student width.
pub fn project_teacher(p: &ProjectionMlp, tape: &mut Tape<'_>, raw: Var) -> Result<Var> {
    p.forward(tape, raw)
}

/// Channel-concatenates all unshuffled teacher features and maps them through `f_cg`.
pub fn summarize(f_cg: &ProjectionMlp, tape: &mut Tape<'_>, unshuffled: &[Var]) -> Result<Var> {
    let first = *unshuffled
        .first()
        .ok_or_else(|| Error::invalid("summarize: no teacher features"))?;
    let rows = tape.shape(first)[0];
    for &u in unshuffled {
        if tape.shape(u).len() != 2 || tape.shape(u)[0] != rows {
            return Err(Error::ShapeMismatch {
                op: "summarize",
                left: tape.shape(first).to_vec(),
                right: tape.shape(u).to_vec(),
            });
        }
    }
    let cat = tape.concat(unshuffled, 1)?;
    f_cg.forward(tape, cat)
}

/// Per-teacher raw and projected features plus the summarized consensus.
#[derive(Clone, Debug)]
pub struct AlignedTeacherFeatures {
    pub per_teacher_raw: Vec<Var>,
    pub per_teacher_projected: Vec<Var>,
    pub summarized: Var,
}

/// Trainable heads sitting on top of the frozen teachers.
#[derive(Clone, Debug)]
pub struct TeacherAlignment {
    pub projections: Vec<ProjectionMlp>,
    pub summarizer: ProjectionMlp,
}

impl TeacherAlignment {
    pub fn align(&self, tape: &mut Tape<'_>, raw: &[Tensor]) -> Result<AlignedTeacherFeatures> {
        if raw.len() != self.projections.len() {
            return Err(Error::invalid(format!(
                "expected {} teacher features, got {}",
                self.projections.len(),
                raw.len()
            )));
        }
        let per_teacher_raw: Vec<Var> = raw.iter().map(|t| tape.constant(t.clone())).collect();
        let per_teacher_projected = self
            .projections
            .iter()
            .zip(&per_teacher_raw)
            .map(|(p, &r)| project_teacher(p, tape, r))
            .collect::<Result<Vec<_>>>()?;
        let summarized = summarize(&self.summarizer, tape, &per_teacher_raw)?;
        Ok(AlignedTeacherFeatures {
            per_teacher_raw,
            per_teacher_projected,
            summarized,
        })
    }
}
