//! Desk-scale first-order meta-trainer.
//!
//! Produces the pretrained checkpoints the rest of the crate repurposes.
//! The inner loop takes plain gradient steps on each task's support set; the
//! outer update treats the adapted parameters' query gradient as the
//! gradient at the initialization (first-order, no second derivatives) and
//! feeds it to Adam. The outer optimizer and meta-batch size are this
//! crate's choices; nothing upstream prescribes them.

use std::fmt;

use rayon::prelude::*;

use restep_core::rng::{derive_seed, Purpose};
use restep_core::{
    classification_accuracy, forward_loss, sample_episode, CoreError, DomainParams, Episode,
    ModelSpec, ParamSet,
};

#[derive(Debug, Clone, PartialEq)]
#[derive(serde::Serialize, serde::Deserialize)]
pub struct MetaTrainConfig {
    pub inner_stepsize: f64,
    pub inner_steps: usize,
    pub outer_stepsize: f64,
    pub meta_batch: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            inner_stepsize: 0.1,
            inner_steps: 5,
            outer_stepsize: 2e-3,
            meta_batch: 4,
            iterations: 2000,
            eval_every: 250,
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            val_episodes: 40,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<(), MetaTrainError> {
        let positive = [
            ("inner_stepsize", self.inner_stepsize),
            ("outer_stepsize", self.outer_stepsize),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(MetaTrainError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        let counts = [
            ("inner_steps", self.inner_steps),
            ("meta_batch", self.meta_batch),
            ("eval_every", self.eval_every),
            ("val_episodes", self.val_episodes),
            ("k_shot", self.k_shot),
            ("q_per_class", self.q_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MetaTrainError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_way < 2 {
            return Err(MetaTrainError::InvalidConfig("n_way must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum MetaTrainError {
    InvalidConfig(String),
    /// Non-finite meta-loss; reports the iteration that diverged.
    Diverged { iteration: usize },
    Core(CoreError),
}

impl fmt::Display for MetaTrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaTrainError::InvalidConfig(msg) => write!(f, "invalid meta-train config: {msg}"),
            MetaTrainError::Diverged { iteration } => {
                write!(f, "meta-training diverged at iteration {iteration}")
            }
            MetaTrainError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetaTrainError {}

impl From<CoreError> for MetaTrainError {
    fn from(e: CoreError) -> Self {
        MetaTrainError::Core(e)
    }
}

/// One saved point of the training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub params: ParamSet,
    pub val_accuracy: f64,
}

/// Full training trace: checkpoints plus per-iteration curves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    /// Meta-objective (query loss after inner adaptation) per iteration.
    pub train_loss: Vec<f64>,
    /// Query accuracy after inner adaptation per iteration.
    pub train_accuracy: Vec<f64>,
}

fn inner_adapt(
    spec: &ModelSpec,
    theta: &ParamSet,
    episode: &Episode,
    stepsize: f64,
    steps: usize,
) -> Result<ParamSet, CoreError> {
    let mut params = theta.clone();
    for _ in 0..steps {
        let (_, tape) = forward_loss(spec, &params, &episode.support_x, &episode.support_y)?;
        let grads = tape.param_gradients();
        params.scaled_add(&grads, -stepsize)?;
    }
    Ok(params)
}

/// First-order meta-gradient of one task: query-loss gradient at the
/// inner-adapted parameters, plus the query loss and accuracy.
fn task_gradient(
    spec: &ModelSpec,
    theta: &ParamSet,
    episode: &Episode,
    cfg: &MetaTrainConfig,
) -> Result<(ParamSet, f64, f64), CoreError> {
    let adapted = inner_adapt(spec, theta, episode, cfg.inner_stepsize, cfg.inner_steps)?;
    let (loss, tape) = forward_loss(spec, &adapted, &episode.query_x, &episode.query_y)?;
    let grads = tape.param_gradients();
    let acc = classification_accuracy(spec, &adapted, &episode.query_x, &episode.query_y)?;
    Ok((grads, loss, acc))
}

fn validation_accuracy(
    spec: &ModelSpec,
    theta: &ParamSet,
    domain: &DomainParams,
    cfg: &MetaTrainConfig,
) -> Result<f64, CoreError> {
    let accs: Vec<Result<f64, CoreError>> = (0..cfg.val_episodes)
        .into_par_iter()
        .map(|v| {
            let episode_seed = derive_seed(cfg.seed, Purpose::ValTask, &[v as u64]);
            let episode =
                sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.q_per_class, episode_seed);
            let adapted = inner_adapt(spec, theta, &episode, cfg.inner_stepsize, cfg.inner_steps)?;
            classification_accuracy(spec, &adapted, &episode.query_x, &episode.query_y)
        })
        .collect();
    let mut sum = 0.0;
    for a in accs {
        sum += a?;
    }
    Ok(sum / cfg.val_episodes as f64)
}

/// Meta-train from a fresh initialization, saving a checkpoint at iteration
/// zero, every `eval_every` iterations, and at the end, each with its
/// validation accuracy on a fixed held-out episode set.
pub fn maml_train(
    spec: &ModelSpec,
    domain: &DomainParams,
    cfg: &MetaTrainConfig,
) -> Result<TrainHistory, MetaTrainError> {
    cfg.validate()?;
    let mut theta = spec.init_params(cfg.seed)?;
    let mut records = Vec::new();
    let mut train_loss = Vec::with_capacity(cfg.iterations);
    let mut train_accuracy = Vec::with_capacity(cfg.iterations);

    records.push(TrainRecord {
        iteration: 0,
        params: theta.clone(),
        val_accuracy: validation_accuracy(spec, &theta, domain, cfg)?,
    });

    // Adam state for the outer loop.
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m = theta.zeros_like();
    let mut v = theta.zeros_like();

    for iteration in 1..=cfg.iterations {
        let episodes: Vec<Episode> = (0..cfg.meta_batch)
            .map(|b| {
                let task_index = ((iteration - 1) * cfg.meta_batch + b) as u64;
                let episode_seed = derive_seed(cfg.seed, Purpose::MetaTask, &[task_index]);
                sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.q_per_class, episode_seed)
            })
            .collect();
        // Tasks evaluate in parallel; accumulation stays in task order.
        let results: Vec<Result<(ParamSet, f64, f64), CoreError>> = episodes
            .par_iter()
            .map(|ep| task_gradient(spec, &theta, ep, cfg))
            .collect();

        let mut grad = theta.zeros_like();
        let mut loss = 0.0;
        let mut acc = 0.0;
        for r in results {
            let (g, l, a) = r?;
            grad.scaled_add(&g, 1.0 / cfg.meta_batch as f64)?;
            loss += l / cfg.meta_batch as f64;
            acc += a / cfg.meta_batch as f64;
        }
        if !loss.is_finite() {
            return Err(MetaTrainError::Diverged { iteration });
        }
        train_loss.push(loss);
        train_accuracy.push(acc);

        let bc1 = 1.0 - beta1.powi(iteration as i32);
        let bc2 = 1.0 - beta2.powi(iteration as i32);
        for ((p, g), (mi, vi)) in theta
            .entries_mut()
            .iter_mut()
            .zip(grad.entries())
            .zip(m.entries_mut().iter_mut().zip(v.entries_mut()))
        {
            let mdata = mi.tensor.data_mut();
            let vdata = vi.tensor.data_mut();
            for (j, (val, &gv)) in
                p.tensor.data_mut().iter_mut().zip(g.tensor.data()).enumerate()
            {
                mdata[j] = beta1 * mdata[j] + (1.0 - beta1) * gv;
                vdata[j] = beta2 * vdata[j] + (1.0 - beta2) * gv * gv;
                let mh = mdata[j] / bc1;
                let vh = vdata[j] / bc2;
                *val -= cfg.outer_stepsize * mh / (vh.sqrt() + eps);
            }
        }

        if iteration % cfg.eval_every == 0 || iteration == cfg.iterations {
            records.push(TrainRecord {
                iteration,
                params: theta.clone(),
                val_accuracy: validation_accuracy(spec, &theta, domain, cfg)?,
            });
        }
    }
    Ok(TrainHistory { records, train_loss, train_accuracy })
}

/// Checkpoint selection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectPolicy {
    /// Highest validation accuracy; ties go to the earliest iteration.
    BestValidation,
    /// Final iteration (the potentially overfitted checkpoint).
    Last,
}

impl SelectPolicy {
    pub fn parse(s: &str) -> Option<SelectPolicy> {
        match s {
            "best_validation" => Some(SelectPolicy::BestValidation),
            "last" => Some(SelectPolicy::Last),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectPolicy::BestValidation => "best_validation",
            SelectPolicy::Last => "last",
        }
    }
}

/// Pick a checkpoint from a non-empty history.
pub fn select_checkpoint(records: &[TrainRecord], policy: SelectPolicy) -> Option<&TrainRecord> {
    match policy {
        SelectPolicy::Last => records.last(),
        SelectPolicy::BestValidation => records.iter().fold(None, |best, r| match best {
            None => Some(r),
            Some(b) if r.val_accuracy > b.val_accuracy => Some(r),
            Some(b) => Some(b),
        }),
    }
}

/// Centered moving average used by the training-curve checks.
pub fn smoothed(series: &[f64], window: usize) -> Vec<f64> {
    if series.len() < window || window == 0 {
        return series.to_vec();
    }
    series.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
