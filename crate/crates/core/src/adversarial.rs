//! Adversarial example generation (plain, uncertainty-scaled, and inverse)
//! and the adversarial cross-entropy.
//!
//! All generators perturb along the sign of the input gradient, so
//! `‖x' − x‖_∞ ≤ ε` always holds; the uncertainty-scaled variant additionally
//! rescales each component by the min-max-normalized std of the input
//! gradient across ensemble members, computed per example over all of its
//! components jointly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::autodiff::forward_loss;
use crate::error::CoreError;
use crate::model::{ModelSpec, ParamSet};
use crate::tensor::{sign, Tensor};
use crate::uncertainty::Ensemble;

/// Which generator produced an augmentation example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Provenance {
    EnAug,
    Ufgsm,
    IUfgsm,
    Fgsm,
}

/// One adversarial example with its audit trail.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AugExample {
    pub x: Tensor,
    pub label: usize,
    pub provenance: Provenance,
    pub round: usize,
    pub member: Option<usize>,
}

/// Accumulated augmentation set in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AugSet {
    pub examples: Vec<AugExample>,
}

impl AugSet {
    pub fn new() -> AugSet {
        AugSet { examples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.examples.iter().filter(|e| e.provenance == provenance).count()
    }

    /// Split a `[batch, ...]` tensor into per-example entries.
    pub fn push_batch(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        provenance: Provenance,
        round: usize,
        member: Option<usize>,
    ) {
        let n = batch.shape()[0];
        debug_assert_eq!(n, labels.len());
        let example_shape: Vec<usize> = batch.shape()[1..].to_vec();
        let stride: usize = example_shape.iter().product();
        for (i, &label) in labels.iter().enumerate() {
            let data = batch.data()[i * stride..(i + 1) * stride].to_vec();
            self.examples.push(AugExample {
                x: Tensor::from_vec(example_shape.clone(), data).expect("example shape"),
                label,
                provenance,
                round,
                member,
            });
        }
    }

    /// Concatenate back into one `[len, ...]` batch with labels,
    /// in insertion order. `None` when empty.
    pub fn to_batch(&self) -> Option<(Tensor, Vec<usize>)> {
        let first = self.examples.first()?;
        let example_shape = first.x.shape().to_vec();
        let stride = first.x.len();
        let mut data = Vec::with_capacity(self.examples.len() * stride);
        let mut labels = Vec::with_capacity(self.examples.len());
        for e in &self.examples {
            debug_assert_eq!(e.x.shape(), &example_shape[..]);
            data.extend_from_slice(e.x.data());
            labels.push(e.label);
        }
        let mut shape = vec![self.examples.len()];
        shape.extend_from_slice(&example_shape);
        Some((Tensor::from_vec(shape, data).expect("batch shape"), labels))
    }
}

/// `x + ε · u ⊙ sign(grad)` with optional clipping to `[0, 1]`.
///
/// `u = None` means the all-ones scaling: the plain sign attack is exactly
/// this function with `u` forced to one, so the two generators agree bitwise
/// on identical sign gradients.
pub fn perturb(
    x: &Tensor,
    grad: &Tensor,
    epsilon: f64,
    u: Option<&[f64]>,
    clip: bool,
) -> Result<Tensor, CoreError> {
    if epsilon < 0.0 {
        return Err(CoreError::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if x.shape() != grad.shape() {
        return Err(CoreError::shape(format!(
            "input {:?} and gradient {:?} shapes differ",
            x.shape(),
            grad.shape()
        )));
    }
    if let Some(u) = u {
        if u.len() != x.len() {
            return Err(CoreError::shape("uncertainty mask length differs from input"));
        }
    }
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(grad.data())
        .enumerate()
        .map(|(i, (&xv, &gv))| {
            let scale = match u {
                Some(u) => epsilon * u[i],
                None => epsilon * 1.0,
            };
            let v = xv + scale * sign(gv);
            if clip {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Map values linearly onto `[0, 1]` (min to 0, max to 1), flipped to
/// `1 - u` in inverse mode. A constant input is degenerate: the values all
/// become 1 regardless of mode (plain-attack fallback) and `false` returns.
pub fn min_max_normalize(values: &mut [f64], inverse: bool) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for v in values.iter_mut() {
            *v = (*v - lo) * inv;
            if inverse {
                *v = 1.0 - *v;
            }
        }
        true
    } else {
        values.fill(1.0);
        false
    }
}

/// Gradient of the mean cross-entropy with respect to the input batch.
pub fn input_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor, CoreError> {
    let (_, tape) = forward_loss(spec, params, x, labels)?;
    Ok(tape.input_gradients())
}

/// Fast gradient sign attack on a batch: `x + ε · sign(∇ₓ loss)`.
pub fn fgsm(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    clip: bool,
) -> Result<Tensor, CoreError> {
    let grad = input_gradient(spec, params, x, labels)?;
    perturb(x, &grad, epsilon, None, clip)
}

/// Uncertainty-scaled sign attack.
///
/// The scaling `u` is the component-wise population std of the input
/// gradients across ensemble members, min-max-normalized per example
/// (inverse mode flips it to `1 - u`); the sign gradient is taken at the
/// original checkpoint `theta0`. Returns the adversarial batch and the
/// number of examples whose normalization was degenerate (constant std),
/// where `u` falls back to all-ones and the output equals the plain attack.
#[allow(clippy::too_many_arguments)]
pub fn ufgsm(
    spec: &ModelSpec,
    theta0: &ParamSet,
    ensemble: &Ensemble,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    inverse: bool,
    clip: bool,
) -> Result<(Tensor, usize), CoreError> {
    let members = ensemble.members();
    let mut grads = Vec::with_capacity(members.len());
    for member in members {
        grads.push(input_gradient(spec, member, x, labels)?);
    }
    let m = members.len() as f64;
    let n = x.len();
    let mut u = vec![0.0; n];
    {
        // Mean relative to the first member's gradient: identical members
        // then produce an exactly zero std, which is the degenerate case.
        let reference = grads[0].data();
        let mut mean = vec![0.0; n];
        for g in &grads {
            for ((acc, &v), &r) in mean.iter_mut().zip(g.data()).zip(reference) {
                *acc += v - r;
            }
        }
        for (v, &r) in mean.iter_mut().zip(reference) {
            *v = r + *v / m;
        }
        for g in &grads {
            for ((acc, &v), &mu) in u.iter_mut().zip(g.data()).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in u.iter_mut() {
            *v = (*v / m).sqrt();
        }
    }

    // Min-max normalization per example over all of its components.
    let batch = x.shape()[0];
    let stride = n / batch;
    let mut fallbacks = 0usize;
    for b in 0..batch {
        let row = &mut u[b * stride..(b + 1) * stride];
        if !min_max_normalize(row, inverse) {
            // Constant uncertainty carries no information; fall back to the
            // plain sign attack for this example (both modes).
            log::debug!("degenerate gradient-std normalization on example {b}; using plain attack");
            fallbacks += 1;
        }
    }

    let sign_grad = input_gradient(spec, theta0, x, labels)?;
    let adv = perturb(x, &sign_grad, epsilon, Some(&u), clip)?;
    Ok((adv, fallbacks))
}

/// Adversarial cross-entropy: mean loss on sign-attack examples regenerated
/// at the current parameters. The inner sign gradient is a constant (no
/// differentiation through the attack).
pub fn at_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    clip: bool,
) -> Result<f64, CoreError> {
    at_loss_with_grads(spec, params, x, labels, epsilon, clip).map(|(loss, _)| loss)
}

/// Adversarial cross-entropy plus its parameter gradients.
pub fn at_loss_with_grads(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    clip: bool,
) -> Result<(f64, ParamSet), CoreError> {
    let adv = fgsm(spec, params, x, labels, epsilon, clip)?;
    let (loss, tape) = forward_loss(spec, params, &adv, labels)?;
    Ok((loss, tape.param_gradients()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelSpec};
    use crate::taskgen::{sample_episode, DomainParams};
    use crate::uncertainty::perturb_init;
    use approx::assert_relative_eq;

    #[test]
    fn perturb_hand_example() {
        // x = [0.2, 0.8], grad = [-3, 0], eps = 0.05: the zero-gradient
        // component is untouched because sign(0) = 0.
        let x = Tensor::from_vec(vec![1, 2], vec![0.2, 0.8]).unwrap();
        let g = Tensor::from_vec(vec![1, 2], vec![-3.0, 0.0]).unwrap();
        let adv = perturb(&x, &g, 0.05, None, false).unwrap();
        assert_relative_eq!(adv.data()[0], 0.15, max_relative = 1e-15);
        assert_eq!(adv.data()[1], 0.8);
    }

    #[test]
    fn ufgsm_scaling_worked_example() {
        // u_raw = [0, 0.2, 0.4] min-max-normalizes to [0, 0.5, 1]; with
        // sign = [+1, +1, -1] and eps = 0.05 the example moves to
        // [0.500, 0.525, 0.450]; inverse scaling gives [0.550, 0.525, 0.500].
        let x = Tensor::from_vec(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let g = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, -3.0]).unwrap();
        let u_raw = [0.0, 0.2, 0.4];
        let norm: Vec<f64> = u_raw.iter().map(|&v| (v - 0.0) / 0.4).collect();
        let fwd = perturb(&x, &g, 0.05, Some(&norm), false).unwrap();
        assert_relative_eq!(fwd.data()[0], 0.500, max_relative = 1e-15);
        assert_relative_eq!(fwd.data()[1], 0.525, max_relative = 1e-15);
        assert_relative_eq!(fwd.data()[2], 0.450, max_relative = 1e-15);
        let inv_u: Vec<f64> = norm.iter().map(|&v| 1.0 - v).collect();
        let inv = perturb(&x, &g, 0.05, Some(&inv_u), false).unwrap();
        assert_relative_eq!(inv.data()[0], 0.550, max_relative = 1e-15);
        assert_relative_eq!(inv.data()[1], 0.525, max_relative = 1e-15);
        assert_relative_eq!(inv.data()[2], 0.500, max_relative = 1e-15);
    }

    #[test]
    fn epsilon_zero_returns_input() {
        let spec = ModelSpec::mlp_default(3);
        let params = spec.init_params(1).unwrap();
        let ep = sample_episode(&DomainParams::base(), 3, 1, 2, 5);
        let adv = fgsm(&spec, &params, &ep.support_x, &ep.support_y, 0.0, false).unwrap();
        assert_eq!(adv, ep.support_x);
    }

    #[test]
    fn fgsm_components_move_by_plus_minus_epsilon_or_zero() {
        let spec = ModelSpec::conv_default(4);
        let params = spec.init_params(2).unwrap();
        let ep = sample_episode(&DomainParams::base(), 4, 1, 2, 6);
        let eps = 0.05;
        let adv = fgsm(&spec, &params, &ep.support_x, &ep.support_y, eps, false).unwrap();
        for (&a, &x) in adv.data().iter().zip(ep.support_x.data()) {
            let d = a - x;
            assert!(
                (d - eps).abs() < 1e-15 || (d + eps).abs() < 1e-15 || d == 0.0,
                "component moved by {d}"
            );
        }
    }

    #[test]
    fn fgsm_does_not_decrease_loss_to_first_order() {
        // Tiny-step Taylor check: the attack moves along the gradient sign,
        // so the loss cannot go down for small epsilon on a smooth model.
        let spec = ModelSpec::mlp_default(3);
        for seed in 0..20 {
            let params = spec.init_params(seed).unwrap();
            let ep = sample_episode(&DomainParams::base(), 3, 1, 2, seed);
            let (base, _) = forward_loss(&spec, &params, &ep.support_x, &ep.support_y).unwrap();
            let adv = fgsm(&spec, &params, &ep.support_x, &ep.support_y, 1e-4, false).unwrap();
            let (attacked, _) = forward_loss(&spec, &params, &adv, &ep.support_y).unwrap();
            assert!(attacked >= base - 1e-12, "seed {seed}: {attacked} < {base}");
        }
    }

    #[test]
    fn ufgsm_identical_members_fall_back_to_fgsm_bitwise() {
        let spec = ModelSpec::mlp_default(3);
        let theta0 = spec.init_params(3).unwrap();
        let ens = perturb_init(&theta0, 3, 0.0, 1).unwrap();
        let ep = sample_episode(&DomainParams::base(), 3, 1, 2, 7);
        for inverse in [false, true] {
            let (adv, fallbacks) = ufgsm(
                &spec,
                &theta0,
                &ens,
                &ep.support_x,
                &ep.support_y,
                0.05,
                inverse,
                false,
            )
            .unwrap();
            assert_eq!(fallbacks, ep.support_size());
            let plain = fgsm(&spec, &theta0, &ep.support_x, &ep.support_y, 0.05, false).unwrap();
            assert_eq!(adv, plain);
        }
    }

    #[test]
    fn ufgsm_respects_infinity_bound_and_normalization_range() {
        let spec = ModelSpec::conv_default(4);
        let theta0 = spec.init_params(4).unwrap();
        let ens = perturb_init(&theta0, 4, 0.05, 9).unwrap();
        let ep = sample_episode(&DomainParams::base(), 4, 1, 3, 11);
        let eps = 0.07;
        for inverse in [false, true] {
            let (adv, _) = ufgsm(
                &spec,
                &theta0,
                &ens,
                &ep.support_x,
                &ep.support_y,
                eps,
                inverse,
                false,
            )
            .unwrap();
            let max_move = adv.max_abs_diff(&ep.support_x).unwrap();
            assert!(max_move <= eps + 1e-15, "moved {max_move} > {eps}");
        }
    }

    #[test]
    fn at_loss_epsilon_zero_equals_forward_loss_bitwise() {
        let spec = ModelSpec::conv_default(3);
        let params = spec.init_params(5).unwrap();
        let ep = sample_episode(&DomainParams::base(), 3, 2, 2, 13);
        let (clean, _) = forward_loss(&spec, &params, &ep.support_x, &ep.support_y).unwrap();
        let at = at_loss(&spec, &params, &ep.support_x, &ep.support_y, 0.0, false).unwrap();
        assert_eq!(clean.to_bits(), at.to_bits());
    }

    #[test]
    fn at_loss_on_uniform_zero_model_is_ln_n() {
        let spec = ModelSpec {
            input_shape: (1, 1, 4),
            layers: vec![LayerSpec::flatten(), LayerSpec::dense(3, false)],
            n_outputs: 3,
        };
        let mut params = spec.init_params(0).unwrap();
        for e in params.entries_mut() {
            e.tensor = Tensor::zeros(e.tensor.shape());
        }
        let x = Tensor::from_vec(vec![2, 1, 1, 4], vec![0.3; 8]).unwrap();
        let at = at_loss(&spec, &params, &x, &[0, 2], 0.05, false).unwrap();
        assert_relative_eq!(at, (3.0f64).ln(), max_relative = 1e-15);
    }

    #[test]
    fn augset_counts_and_batch_roundtrip() {
        let mut set = AugSet::new();
        let batch = Tensor::from_vec(vec![2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        set.push_batch(&batch, &[0, 1], Provenance::EnAug, 1, Some(0));
        set.push_batch(&batch, &[1, 0], Provenance::Ufgsm, 1, None);
        assert_eq!(set.len(), 4);
        assert_eq!(set.count(Provenance::EnAug), 2);
        assert_eq!(set.count(Provenance::Ufgsm), 2);
        let (xs, ys) = set.to_batch().unwrap();
        assert_eq!(xs.shape(), [4, 1, 2, 2]);
        assert_eq!(ys, vec![0, 1, 1, 0]);
        assert_eq!(&xs.data()[..8], batch.data());
    }
}
