//! Deep-ensemble construction on the support set and conversion of parameter
//! uncertainty into layer-wise stepsizes.
//!
//! An [`Ensemble`] is built by multiplicative Gaussian perturbation of a
//! checkpoint and trained with combined clean + adversarial cross-entropy.
//! [`usa`] turns the component-wise parameter std across members into one
//! stepsize per layer, anti-monotone in the layer's mean uncertainty and
//! rescaled so the unweighted mean over layers equals the base stepsize; the
//! inverse mode keeps the monotone relationship instead and is used as a
//! control.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adversarial::perturb;
use crate::autodiff::forward_loss;
use crate::error::CoreError;
use crate::model::{ModelSpec, ParamEntry, ParamSet};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Perturbed copies of one checkpoint; all members share its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<ParamSet>,
}

impl Ensemble {
    /// At least two members are required (a std over one member is undefined).
    pub fn new(members: Vec<ParamSet>) -> Result<Self, CoreError> {
        if members.len() < 2 {
            return Err(CoreError::config(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        for m in &members[1..] {
            members[0].same_layout(m)?;
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[ParamSet] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// One scalar stepsize per parameter tensor, aligned to ParamSet order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepsizeMap {
    values: Vec<f64>,
}

impl StepsizeMap {
    pub fn new(values: Vec<f64>) -> Result<Self, CoreError> {
        if let Some(&bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(CoreError::config(format!("stepsize must be finite and >= 0, got {bad}")));
        }
        Ok(StepsizeMap { values })
    }

    /// The same stepsize for every parameter tensor.
    pub fn uniform(n_entries: usize, alpha: f64) -> StepsizeMap {
        StepsizeMap { values: vec![alpha; n_entries] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with BN entries forced to stepsize zero (BN freezing).
    pub fn frozen_bn(&self, params: &ParamSet) -> StepsizeMap {
        let values = self
            .values
            .iter()
            .zip(params.entries())
            .map(|(&v, e)| if e.is_bn { 0.0 } else { v })
            .collect();
        StepsizeMap { values }
    }

    /// One value per layer (all tensors of a layer share it by construction).
    pub fn per_layer(&self, params: &ParamSet) -> Vec<f64> {
        let mut out = vec![0.0; params.num_layers()];
        let mut seen = vec![false; params.num_layers()];
        for (e, &v) in params.entries().iter().zip(&self.values) {
            if !seen[e.layer_index] {
                out[e.layer_index] = v;
                seen[e.layer_index] = true;
            }
        }
        out
    }
}

/// Build an ensemble as `theta0 * (1 + noise)` with component-wise Gaussian
/// noise of std `sigma`, independent per member and component. Zero-valued
/// components stay exactly zero.
pub fn perturb_init(
    theta0: &ParamSet,
    members: usize,
    sigma: f64,
    seed: u64,
) -> Result<Ensemble, CoreError> {
    if sigma < 0.0 {
        return Err(CoreError::config(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = Vec::with_capacity(members);
    for m in 0..members {
        let mut rng = stream(seed, Purpose::EnsembleInit, &[m as u64]);
        let mut member = theta0.clone();
        for entry in member.entries_mut() {
            for v in entry.tensor.data_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v *= 1.0 + sigma * eps;
            }
        }
        out.push(member);
    }
    Ensemble::new(out)
}

/// Component-wise population standard deviation across members (divide by M),
/// returned in the parameter layout.
pub fn param_std(ensemble: &Ensemble) -> ParamSet {
    let m = ensemble.size() as f64;
    let first = &ensemble.members()[0];
    let entries: Vec<ParamEntry> = first
        .entries()
        .iter()
        .enumerate()
        .map(|(e, entry)| {
            let n = entry.tensor.len();
            // Mean is computed relative to the first member so identical
            // members yield an exactly zero deviation (and std exactly 0).
            let reference = entry.tensor.data();
            let mut mean = vec![0.0; n];
            for member in ensemble.members() {
                for ((acc, &v), &r) in
                    mean.iter_mut().zip(member.entries()[e].tensor.data()).zip(reference)
                {
                    *acc += v - r;
                }
            }
            for (v, &r) in mean.iter_mut().zip(reference) {
                *v = r + *v / m;
            }
            let mut var = vec![0.0; n];
            for member in ensemble.members() {
                for (acc, (&v, &mu)) in
                    var.iter_mut().zip(member.entries()[e].tensor.data().iter().zip(&mean))
                {
                    let d = v - mu;
                    *acc += d * d;
                }
            }
            let std: Vec<f64> = var.iter().map(|&v| (v / m).sqrt()).collect();
            ParamEntry {
                name: entry.name.clone(),
                layer_index: entry.layer_index,
                tensor: Tensor::from_vec(entry.tensor.shape().to_vec(), std)
                    .expect("std mirrors parameter shape"),
                is_bn: entry.is_bn,
            }
        })
        .collect();
    ParamSet::new(entries).expect("layout preserved")
}

/// Uncertainty-based stepsize adaptation.
///
/// Forward mode flips the uncertainty scale (`c = max(u) - u + min(u)`, with
/// the max/min taken globally over all components, BN included) so layers
/// with higher mean parameter std get lower stepsizes; inverse mode keeps
/// `c = u` and is the control that rewards uncertainty. Either way the
/// per-layer means are rescaled so their unweighted mean equals `alpha`.
///
/// When every component has the same std (for example a sigma-zero ensemble,
/// where u is identically zero) there is no information to spread and every
/// layer gets exactly `alpha`.
pub fn usa(alpha: f64, ensemble: &Ensemble, inverse: bool) -> Result<StepsizeMap, CoreError> {
    if !(alpha > 0.0) {
        return Err(CoreError::config(format!("base stepsize must be > 0, got {alpha}")));
    }
    let stds = param_std(ensemble);
    let layers = stds.num_layers();
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    for e in stds.entries() {
        for &v in e.tensor.data() {
            min_u = min_u.min(v);
            max_u = max_u.max(v);
        }
    }
    if max_u == min_u {
        return Ok(StepsizeMap::uniform(stds.len(), alpha));
    }

    let mut layer_sum = vec![0.0; layers];
    let mut layer_count = vec![0usize; layers];
    for e in stds.entries() {
        let sum: f64 = if inverse {
            e.tensor.data().iter().sum()
        } else {
            e.tensor.data().iter().map(|&u| max_u - u + min_u).sum()
        };
        layer_sum[e.layer_index] += sum;
        layer_count[e.layer_index] += e.tensor.len();
    }
    let layer_mean: Vec<f64> = layer_sum
        .iter()
        .zip(&layer_count)
        .map(|(&s, &c)| s / c as f64)
        .collect();
    let denom = layer_mean.iter().sum::<f64>() / layers as f64;
    let per_layer: Vec<f64> = layer_mean.iter().map(|&mu| alpha * mu / denom).collect();

    let values = stds.entries().iter().map(|e| per_layer[e.layer_index]).collect();
    StepsizeMap::new(values)
}

/// One combined clean + adversarial cross-entropy SGD step on every member.
///
/// Returns the updated ensemble together with each member's adversarial
/// batch (generated at the member's parameters *before* the step), which is
/// what ensemble augmentation collects.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_step(
    ensemble: &Ensemble,
    spec: &ModelSpec,
    support_x: &Tensor,
    support_y: &[usize],
    stepsizes: &StepsizeMap,
    epsilon: f64,
    freeze_bn: bool,
    clip_inputs: bool,
) -> Result<(Ensemble, Vec<Tensor>), CoreError> {
    if stepsizes.len() != ensemble.members()[0].len() {
        return Err(CoreError::config(format!(
            "stepsize map has {} entries for {} parameter tensors",
            stepsizes.len(),
            ensemble.members()[0].len()
        )));
    }
    let effective = if freeze_bn {
        stepsizes.frozen_bn(&ensemble.members()[0])
    } else {
        stepsizes.clone()
    };
    let mut new_members = Vec::with_capacity(ensemble.size());
    let mut adversarial = Vec::with_capacity(ensemble.size());
    for (m, member) in ensemble.members().iter().enumerate() {
        let member_err = |e: CoreError| {
            CoreError::numeric(format!("ensemble member {} of {}: {e}", m + 1, ensemble.size()))
        };
        let (_, clean_tape) =
            forward_loss(spec, member, support_x, support_y).map_err(member_err)?;
        let (clean_grads, input_grad) = clean_tape.gradients();
        let adv = perturb(support_x, &input_grad, epsilon, None, clip_inputs)?;
        let (_, adv_tape) = forward_loss(spec, member, &adv, support_y).map_err(member_err)?;
        let adv_grads = adv_tape.param_gradients();

        let mut updated = member.clone();
        for ((entry, clean), (advg, &step)) in updated
            .entries_mut()
            .iter_mut()
            .zip(clean_grads.entries())
            .zip(adv_grads.entries().iter().zip(effective.values()))
        {
            for (v, (&g1, &g2)) in entry
                .tensor
                .data_mut()
                .iter_mut()
                .zip(clean.tensor.data().iter().zip(advg.tensor.data()))
            {
                *v -= step * (g1 + g2);
            }
        }
        new_members.push(updated);
        adversarial.push(adv);
    }
    Ok((Ensemble::new(new_members)?, adversarial))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;

    /// Ensemble with two members engineered so the component-wise population
    /// std equals `stds` exactly: members are `center ± std`.
    fn ensemble_with_stds(layer_sizes: &[usize], stds: &[Vec<f64>]) -> Ensemble {
        let build = |sign: f64| {
            let entries = layer_sizes
                .iter()
                .enumerate()
                .map(|(l, &n)| ParamEntry {
                    name: format!("fc{l}.weight"),
                    layer_index: l,
                    tensor: Tensor::from_vec(
                        vec![n],
                        stds[l].iter().map(|&s| 1.0 + sign * s).collect(),
                    )
                    .unwrap(),
                    is_bn: false,
                })
                .collect();
            ParamSet::new(entries).unwrap()
        };
        Ensemble::new(vec![build(1.0), build(-1.0)]).unwrap()
    }

    #[test]
    fn perturb_preserves_zeros_and_sigma_zero_is_identity() {
        let spec = ModelSpec::conv_default(5);
        let theta0 = spec.init_params(1).unwrap();
        let ens = perturb_init(&theta0, 3, 0.05, 7).unwrap();
        // Biases and betas start at zero and must stay zero in every member.
        for member in ens.members() {
            for (e0, em) in theta0.entries().iter().zip(member.entries()) {
                for (&v0, &vm) in e0.tensor.data().iter().zip(em.tensor.data()) {
                    if v0 == 0.0 {
                        assert_eq!(vm, 0.0);
                    }
                }
            }
        }
        let frozen = perturb_init(&theta0, 2, 0.0, 7).unwrap();
        for member in frozen.members() {
            assert_eq!(member, &theta0);
        }
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        // Law-of-large-numbers check on the multiplicative noise.
        let entries = vec![ParamEntry {
            name: "fc0.weight".into(),
            layer_index: 0,
            tensor: Tensor::full(&[40_000], 2.5),
            is_bn: false,
        }];
        let theta0 = ParamSet::new(entries).unwrap();
        let ens = perturb_init(&theta0, 3, 0.05, 11).unwrap();
        let mut ratios = Vec::new();
        for member in ens.members() {
            for (&v, &v0) in member.entries()[0]
                .tensor
                .data()
                .iter()
                .zip(theta0.entries()[0].tensor.data())
            {
                ratios.push(v / v0 - 1.0);
            }
        }
        let n = ratios.len() as f64;
        let mean: f64 = ratios.iter().sum::<f64>() / n;
        let std = (ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        assert!((0.045..=0.055).contains(&std), "std {std}");
    }

    #[test]
    fn population_std_of_two_values() {
        let ens = ensemble_with_stds(&[1], &[vec![1.0]]);
        // Members are 1 ± 1 = {2, 0}: population std is 1.
        let stds = param_std(&ens);
        assert_eq!(stds.entries()[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn std_matches_bruteforce_oracle() {
        use rand::Rng;
        let spec = ModelSpec::mlp_default(3);
        let theta0 = spec.init_params(2).unwrap();
        let ens = perturb_init(&theta0, 5, 0.3, 5).unwrap();
        let stds = param_std(&ens);
        let mut rng = crate::rng::stream(0, Purpose::Render, &[9]);
        for _ in 0..50 {
            let e = rng.random_range(0..stds.len());
            let i = rng.random_range(0..stds.entries()[e].tensor.len());
            let vals: Vec<f64> =
                ens.members().iter().map(|m| m.entries()[e].tensor.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(
                stds.entries()[e].tensor.data()[i],
                var.sqrt(),
                max_relative = 1e-12,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn usa_worked_example_forward_and_inverse() {
        // Layer stds [0.10, 0.30] and [0.20, 0.40] at alpha = 0.01.
        let ens = ensemble_with_stds(&[2, 2], &[vec![0.10, 0.30], vec![0.20, 0.40]]);
        let fwd = usa(0.01, &ens, false).unwrap();
        assert_relative_eq!(fwd.values()[0], 0.012, max_relative = 1e-15);
        assert_relative_eq!(fwd.values()[1], 0.008, max_relative = 1e-15);
        let inv = usa(0.01, &ens, true).unwrap();
        assert_relative_eq!(inv.values()[0], 0.008, max_relative = 1e-15);
        assert_relative_eq!(inv.values()[1], 0.012, max_relative = 1e-15);
    }

    #[test]
    fn usa_uniform_stds_give_alpha_everywhere() {
        let ens = ensemble_with_stds(&[3, 2], &[vec![0.2; 3], vec![0.2; 2]]);
        for inverse in [false, true] {
            let map = usa(0.05, &ens, inverse).unwrap();
            assert!(map.values().iter().all(|&v| v == 0.05));
        }
    }

    #[test]
    fn usa_degenerate_zero_std_falls_back_to_alpha() {
        let spec = ModelSpec::mlp_default(4);
        let theta0 = spec.init_params(3).unwrap();
        let ens = perturb_init(&theta0, 4, 0.0, 1).unwrap();
        for inverse in [false, true] {
            let map = usa(0.3, &ens, inverse).unwrap();
            assert!(map.values().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn usa_mean_preservation_and_scale_equivariance() {
        let spec = ModelSpec::conv_default(5);
        let theta0 = spec.init_params(4).unwrap();
        let ens = perturb_init(&theta0, 5, 0.05, 3).unwrap();
        let params = &ens.members()[0];
        for inverse in [false, true] {
            let alpha = 0.01;
            let map = usa(alpha, &ens, inverse).unwrap();
            let per_layer = map.per_layer(params);
            let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
            assert_relative_eq!(mean, alpha, max_relative = 1e-9);
            let scaled = usa(3.0 * alpha, &ens, inverse).unwrap();
            for (&a, &b) in map.values().iter().zip(scaled.values()) {
                assert_relative_eq!(3.0 * a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn usa_ordering_is_anti_monotone_in_layer_mean_std() {
        let ens = ensemble_with_stds(
            &[2, 2, 2],
            &[vec![0.1, 0.2], vec![0.5, 0.6], vec![0.3, 0.35]],
        );
        let stds = param_std(&ens);
        let layer_mean_u: Vec<f64> = (0..3)
            .map(|l| {
                let e = &stds.entries()[l];
                e.tensor.data().iter().sum::<f64>() / e.tensor.len() as f64
            })
            .collect();
        let fwd = usa(0.01, &ens, false).unwrap().per_layer(&ens.members()[0]);
        let inv = usa(0.01, &ens, true).unwrap().per_layer(&ens.members()[0]);
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            idx
        };
        let by_u = rank(&layer_mean_u);
        let by_fwd = rank(&fwd);
        let by_inv = rank(&inv);
        let reversed: Vec<usize> = by_u.iter().rev().copied().collect();
        assert_eq!(by_fwd, reversed);
        assert_eq!(by_inv, by_u);
    }

    #[test]
    fn ensemble_step_zero_stepsize_keeps_members_but_yields_examples() {
        let spec = ModelSpec::mlp_default(3);
        let theta0 = spec.init_params(5).unwrap();
        let ens = perturb_init(&theta0, 2, 0.05, 2).unwrap();
        let ep = crate::taskgen::sample_episode(&crate::taskgen::DomainParams::base(), 3, 1, 2, 0);
        let zeros = StepsizeMap::uniform(theta0.len(), 0.0);
        let (stepped, advs) = ensemble_step(
            &ens,
            &spec,
            &ep.support_x,
            &ep.support_y,
            &zeros,
            0.05,
            false,
            false,
        )
        .unwrap();
        assert_eq!(stepped.members(), ens.members());
        assert_eq!(advs.len(), 2);
        for adv in &advs {
            let diff = adv.max_abs_diff(&ep.support_x).unwrap();
            assert!(diff > 0.0 && diff <= 0.05 + 1e-15);
        }
    }

    #[test]
    fn ensemble_step_epsilon_zero_is_a_double_gradient_step() {
        let spec = ModelSpec::mlp_default(3);
        let theta0 = spec.init_params(6).unwrap();
        let ens = perturb_init(&theta0, 2, 0.02, 3).unwrap();
        let ep = crate::taskgen::sample_episode(&crate::taskgen::DomainParams::base(), 3, 1, 2, 1);
        let map = StepsizeMap::uniform(theta0.len(), 0.05);
        let (stepped, advs) = ensemble_step(
            &ens,
            &spec,
            &ep.support_x,
            &ep.support_y,
            &map,
            0.0,
            false,
            false,
        )
        .unwrap();
        for (idx, (adv, member)) in advs.iter().zip(ens.members()).enumerate() {
            assert_eq!(adv, &ep.support_x);
            let (_, tape) = forward_loss(&spec, member, &ep.support_x, &ep.support_y).unwrap();
            let grads = tape.gradients().0;
            // Update must equal theta - alpha * 2 * grad(CE).
            for ((p, g), s) in member
                .entries()
                .iter()
                .zip(grads.entries())
                .zip(stepped.members()[idx].entries())
            {
                for ((&v, &gv), &sv) in
                    p.tensor.data().iter().zip(g.tensor.data()).zip(s.tensor.data())
                {
                    assert_relative_eq!(sv, v - 0.05 * 2.0 * gv, max_relative = 1e-12, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn single_parameter_hand_computed_step() {
        // Dense 1->2 model with weight column [w, 0]: loss = ln(1 + e^-w) for
        // label 0 on x = 1. Hand gradient: dCE/dw = -1/(1+e^w).
        use crate::model::{LayerSpec, ModelSpec};
        let spec = ModelSpec {
            input_shape: (1, 1, 1),
            layers: vec![LayerSpec::flatten(), LayerSpec::dense(2, false)],
            n_outputs: 2,
        };
        let build = |w: f64| {
            let mut p = spec.init_params(0).unwrap();
            p.entries_mut()[0].tensor = Tensor::from_vec(vec![2, 1], vec![w, 0.0]).unwrap();
            p.entries_mut()[1].tensor = Tensor::zeros(&[2]);
            p
        };
        let ens = Ensemble::new(vec![build(1.0), build(1.2)]).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let map = StepsizeMap::uniform(2, 0.1);
        let (stepped, _) = ensemble_step(&ens, &spec, &x, &[0], &map, 0.0, false, false).unwrap();
        for (idx, w0) in [1.0f64, 1.2].iter().enumerate() {
            let g_ce = -1.0 / (1.0 + w0.exp());
            // epsilon = 0 makes the adversarial gradient equal to the clean one.
            let expect = w0 - 0.1 * (g_ce + g_ce);
            let got = stepped.members()[idx].entries()[0].tensor.data()[0];
            assert_relative_eq!(got, expect, max_relative = 1e-12);
        }
    }
}
