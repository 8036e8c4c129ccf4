use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// `y = x·W + b`, weight stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    /// Weights from N(0, 1/in), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_width: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_width as f64).sqrt();
        Self::with_std(store, name, group, in_width, out_width, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_width: usize,
        out_width: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), group, &[in_width, out_width], std, rng);
        let bias = Some(store.add_filled(format!("{name}.bias"), group, &[out_width], 0.0));
        Self {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    /// Same init as [`Linear::new`] but no bias term.
    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_width: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_width as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), group, &[in_width, out_width], std, rng);
        Self {
            weight,
            bias: None,
            in_width,
            out_width,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), group, &[width], 1.0),
            beta: store.add_filled(format!("{name}.beta"), group, &[width], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two linear maps with GELU in between.
#[derive(Clone, Debug)]
pub struct ProjectionMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, in_width, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, out_width, rng),
        }
    }

    pub fn in_width(&self) -> usize {
        self.fc1.in_width
    }

    pub fn out_width(&self) -> usize {
        self.fc2.out_width
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let width = tape.shape(x).last().copied().unwrap_or(0);
        if width != self.in_width() {
            return Err(Error::ShapeMismatch {
                op: "projection_mlp",
                left: tape.shape(x).to_vec(),
                right: vec![self.in_width(), self.out_width()],
            });
        }
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}
