//! Central finite differences, the oracle every backward rule is checked against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tape;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::tensor::Tensor;

/// Largest trainable-parameter count the model-level check accepts.
pub const MAX_GRADCHECK_PARAMS: usize = 10_000;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Central-difference gradient `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for each element.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
            });
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `‖a−b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)` over a whole gradient buffer.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-8)
}

/// Largest element-wise [`relative_error`] between two gradient buffers.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Worst parameter of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: ParamGroup,
    pub elements: usize,
    /// Largest [`tensor_relative_error`] over the group's parameters.
    pub max_rel_error: f64,
    /// Parameter attaining `max_rel_error`.
    pub worst: String,
    /// Largest element-wise [`relative_error`], for diagnostics only: elements
    /// whose gradient is below roughly `1e-6` are dominated by rounding in
    /// the central difference at `ε = 1e-5`.
    pub max_element_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Trainable groups only, in [`ParamGroup::ALL`] order.
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

/// Model for the end-to-end check. Adapter up-projections start at zero,
/// which would leave every down-projection gradient exactly zero, so they are
/// redrawn with a small seeded normal first.
pub fn gradcheck_model_for(cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::new(cfg)?;
    let trainable = model.store.trainable_numel();
    if trainable > MAX_GRADCHECK_PARAMS {
        return Err(Error::config(
            "model",
            format!("{trainable} trainable parameters exceed the gradient-check limit of {MAX_GRADCHECK_PARAMS}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6C0A);
    let normal = Normal::new(0.0, 1.0 / (cfg.resolved_rank() as f64).sqrt()).expect("valid std");
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| {
            matches!(p.group, ParamGroup::TeacherAdapters | ParamGroup::GeneralAdapters) && p.name.ends_with(".up")
        })
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(model)
}

/// Analytic gradient of the total objective on dataset sample 0 against
/// central differences, for every element of every trainable parameter.
/// Each parameter is scored by [`tensor_relative_error`].
pub fn gradcheck_model(cfg: &TrainConfig, eps: f64) -> Result<GradcheckReport> {
    let model = gradcheck_model_for(cfg)?;
    let dataset = crate::data::Dataset::from_config(cfg);
    let sample = dataset.sample(0);
    let raw = model.teachers.unshuffled(&sample.image)?;

    let analytic = {
        let mut tape = Tape::with_params(&model.store);
        let out = model.forward(&mut tape, &sample, &raw)?;
        let grads = tape.backward(out.total)?;
        let mut by_id: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        for (id, g) in grads.params() {
            for (acc, v) in by_id[id.index()].iter_mut().zip(g) {
                *acc += v;
            }
        }
        by_id
    };

    let mut probe = model.clone();
    let mut groups: Vec<GroupError> = Vec::new();
    for group in ParamGroup::ALL {
        let ids: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == group && p.tensor.requires_grad())
            .map(|(id, _)| id)
            .collect();
        if ids.is_empty() {
            continue;
        }
        let mut report = GroupError {
            group,
            elements: 0,
            max_rel_error: 0.0,
            worst: String::new(),
            max_element_error: 0.0,
        };
        for id in ids {
            let n = model.store.get(id).numel();
            let a = &analytic[id.index()];
            let mut numeric = Vec::with_capacity(n);
            for i in 0..n {
                let orig = model.store.get(id).data()[i];
                probe.store.get_mut(id).data_mut()[i] = orig + eps;
                let plus = probe.loss_value(&sample, &raw)?;
                probe.store.get_mut(id).data_mut()[i] = orig - eps;
                let minus = probe.loss_value(&sample, &raw)?;
                probe.store.get_mut(id).data_mut()[i] = orig;
                numeric.push((plus - minus) / (2.0 * eps));
            }
            let err = tensor_relative_error(a, &numeric);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = model.store.param(id).name.clone();
            }
            report.max_element_error = report.max_element_error.max(max_relative_error(a, &numeric));
            report.elements += n;
        }
        groups.push(report);
    }
    Ok(GradcheckReport {
        groups,
        tolerance: GRADCHECK_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::filled(&[3], 0.3);
        let g = finite_difference_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::filled(&[1], 0.0);
        assert!(finite_difference_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }
}
