//! Named, grouped parameter storage.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Freeze/unfreeze granularity used by the stage schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PatchEmbed,
    BaseEncoder,
    TeacherAdapters,
    GeneralAdapters,
    Routers,
    TeacherProjections,
    Summarizer,
    Projector,
    GenHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::PatchEmbed,
        ParamGroup::BaseEncoder,
        ParamGroup::TeacherAdapters,
        ParamGroup::GeneralAdapters,
        ParamGroup::Routers,
        ParamGroup::TeacherProjections,
        ParamGroup::Summarizer,
        ParamGroup::Projector,
        ParamGroup::GenHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch_embed",
            ParamGroup::BaseEncoder => "base_encoder",
            ParamGroup::TeacherAdapters => "teacher_adapters",
            ParamGroup::GeneralAdapters => "general_adapters",
            ParamGroup::Routers => "routers",
            ParamGroup::TeacherProjections => "teacher_projections",
            ParamGroup::Summarizer => "summarizer",
            ParamGroup::Projector => "projector",
            ParamGroup::GenHead => "gen_head",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(true),
        });
        id
    }

    /// Adds a `shape` parameter drawn from N(0, std²).
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, std).expect("std must be positive");
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let tensor = Tensor::new(shape.to_vec(), data).expect("valid init");
        self.add(name, group, tensor)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameter ids in name order.
    pub fn ids_by_name(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Marks exactly the parameters in `groups` as trainable.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(groups.contains(&p.group));
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds tape gradients into the `grad` buffers of trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let t = &mut self.params[id.0].tensor;
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over names and little-endian values of every parameter in `groups`.
    pub fn hash_groups(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        for (name, id) in &self.by_name {
            let p = &self.params[id.0];
            if groups.contains(&p.group) {
                h.update(name.as_bytes());
                for v in p.tensor.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
