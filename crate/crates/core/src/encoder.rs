//! Pre-norm transformer encoder whose feedforward sublayers are MoLA layers.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mola::{ForwardMode, MolaConfig, MolaLayer, RoutingRecord};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::teacher::patchify;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Token count `m`; must be a perfect square.
    pub tokens: usize,
    pub width: usize,
    pub depth: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub teacher_adapters: usize,
    pub general_adapters: usize,
    pub rank: usize,
}

impl EncoderConfig {
    pub fn grid_side(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.grid_side()
    }

    /// Init multiplier `1/√(2·depth)` for the projections that write into
    /// the residual stream (attention output and FFN down-projection).
    pub fn residual_scale(&self) -> f64 {
        1.0 / ((2 * self.depth) as f64).sqrt()
    }

    pub fn patch_width(&self) -> usize {
        self.patch_size() * self.patch_size() * self.image_channels
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.grid_side();
        if side * side != self.tokens || self.tokens == 0 {
            return Err(Error::config("tokens", format!("{} is not a positive perfect square", self.tokens)));
        }
        if !self.image_size.is_multiple_of(side) {
            return Err(Error::config(
                "image_size",
                format!("{} is not divisible by the token grid side {side}", self.image_size),
            ));
        }
        if self.rank == 0 || self.rank >= self.width {
            return Err(Error::config("rank", format!("must satisfy 0 < rank < width ({})", self.width)));
        }
        if self.depth == 0 || self.width == 0 || self.image_channels == 0 {
            return Err(Error::config("depth", "depth, width and image_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mola: MolaLayer,
}

impl Block {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.width;
        let base = ParamGroup::BaseEncoder;
        let mola_cfg = MolaConfig {
            width: d,
            ffn_hidden: 4 * d,
            teacher_adapters: cfg.teacher_adapters,
            general_adapters: cfg.general_adapters,
            rank: cfg.rank,
            router_hidden: d,
            residual_scale: cfg.residual_scale(),
        };
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), base, d),
            q: Linear::new(store, &format!("{name}.attn.q"), base, d, d, rng),
            // A key bias only shifts every score in a row by the same amount,
            // which softmax ignores, so it would never receive a gradient.
            k: Linear::without_bias(store, &format!("{name}.attn.k"), base, d, d, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), base, d, d, rng),
            o: Linear::with_std(store, &format!("{name}.attn.o"), base, d, d, cfg.residual_scale() / (d as f64).sqrt(), rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), base, d),
            mola: MolaLayer::new(store, &format!("{name}.mola"), &mola_cfg, rng)?,
        })
    }

    fn attention(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        self.o.forward(tape, ctx)
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: ForwardMode) -> Result<(Var, Option<RoutingRecord>)> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attention(tape, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let (f, record) = self.mola.forward(tape, h, mode)?;
        Ok((tape.add(x, f)?, record))
    }
}

#[derive(Clone, Debug)]
pub struct StudentEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
}

/// `I^S` plus one routing record per block (full mode only).
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub tokens: Var,
    pub routing: Vec<RoutingRecord>,
}

impl StudentEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Linear::new(store, "patch_embed", ParamGroup::PatchEmbed, cfg.patch_width(), cfg.width, rng);
        let blocks = (0..cfg.depth)
            .map(|b| Block::new(store, &format!("blocks.{b}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            patch_embed,
            blocks,
        })
    }

    /// Flattened `m × patch_width` patches of an `P×P×C` image.
    pub fn patches(&self, image: &Tensor) -> Result<Tensor> {
        let expected = [self.cfg.image_size, self.cfg.image_size, self.cfg.image_channels];
        if image.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: image.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        patchify(image, self.cfg.patch_size())
    }

    pub fn encode(&self, tape: &mut Tape<'_>, image: &Tensor, mode: ForwardMode) -> Result<EncoderOutput> {
        let patches = tape.constant(self.patches(image)?);
        self.encode_patches(tape, patches, mode)
    }

    /// Runs every block in `mode`; the same mode applies to all layers.
    pub fn encode_patches(&self, tape: &mut Tape<'_>, patches: Var, mode: ForwardMode) -> Result<EncoderOutput> {
        let mut x = self.patch_embed.forward(tape, patches)?;
        let mut routing = Vec::new();
        for block in &self.blocks {
            let (y, record) = block.forward(tape, x, mode)?;
            x = y;
            routing.extend(record);
        }
        Ok(EncoderOutput { tokens: x, routing })
    }
}
