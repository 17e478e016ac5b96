//! DP-SGD: per-example clipping, lot accumulation, one noise draw per lot,
//! and plain SGD updates. Non-private mode skips clipping and noise.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::Accountant;
use crate::corpus::Encoded;
use crate::exec;
use crate::model::{loss_graph, Batch, GradMap, ModelError, ModelParams, StackedGrads};
use crate::sampling::{micro_batches, Sampler};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at index {index}")]
    NonFinite { param: String, index: usize },
    #[error("gradient for parameter {param} has shape {found:?}, accumulator expects {expected:?}")]
    Shape {
        param: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("gradient map has {found} tensors, accumulator expects {expected}")]
    Arity { expected: usize, found: usize },
    #[error("noise multiplier {0} > 0 needs a noise generator")]
    MissingRng(f64),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("lot index {index} outside dataset of {n} examples")]
    LotIndex { index: usize, n: usize },
    #[error("privacy budget exceeded before training: epsilon {epsilon} after {steps} steps > target {target}")]
    BudgetExceeded { epsilon: f64, steps: u64, target: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivisorMode {
    /// Divide by the configured lot size `L`.
    #[default]
    Expected,
    /// Divide by the number of examples actually drawn. Breaks the standard
    /// sensitivity analysis; for ablations only.
    Actual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// `false` disables clipping and noise (the ε = ∞ baseline).
    pub private: bool,
    pub clip: f64,
    pub sigma: f64,
    pub lot_size: usize,
    pub learning_rate: f64,
    pub divisor: DivisorMode,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(OptimError::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be finite and non-negative");
        }
        if self.lot_size == 0 {
            return fail("lot size must be positive");
        }
        if self.private {
            if self.clip.is_nan() || self.clip <= 0.0 {
                return fail("clipping norm must be positive");
            }
            if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
                return fail("noise multiplier must be finite and non-negative");
            }
        }
        Ok(())
    }
}

fn check_finite(g: &GradMap) -> Result<()> {
    for (name, t) in g.names().iter().zip(g.tensors()) {
        if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFinite {
                param: name.clone(),
                index,
            });
        }
    }
    Ok(())
}

/// Norm of `parts` after multiplying every entry by `f`, summed in the same
/// order as [`GradMap::norm`].
fn scaled_norm<'a>(parts: impl Iterator<Item = &'a [f64]>, f: f64) -> f64 {
    parts
        .map(|s| s.iter().map(|v| (v * f) * (v * f)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Factor `min(1, C / norm)`, nudged down by ulps when rounding would leave
/// the scaled norm above `C`. This keeps the post-clip norm exactly within
/// `C` and makes clipping idempotent.
fn clip_factor(norm: f64, clip: f64, rescaled: impl Fn(f64) -> f64) -> f64 {
    if norm <= clip {
        return 1.0;
    }
    let mut f = clip / norm;
    while rescaled(f) > clip {
        f *= 1.0 - f64::EPSILON;
    }
    f
}

/// `g / max(1, ‖g‖₂ / C)` with the norm taken over all parameters jointly.
pub fn clip_gradient(g: &GradMap, clip: f64) -> Result<GradMap> {
    check_finite(g)?;
    let f = clip_factor(g.norm(), clip, |f| scaled_norm(g.tensors().iter().map(|t| t.data()), f));
    let mut out = g.clone();
    if f != 1.0 {
        out.scale(f);
    }
    Ok(out)
}

/// Running sum of clipped per-example gradients for one lot.
#[derive(Clone, Debug, PartialEq)]
pub struct LotAccumulator {
    sum: GradMap,
    examples_seen: usize,
}

impl LotAccumulator {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            sum: GradMap::zeros_like(params),
            examples_seen: 0,
        }
    }

    pub fn sum(&self) -> &GradMap {
        &self.sum
    }

    pub fn examples_seen(&self) -> usize {
        self.examples_seen
    }

    fn add_map(&mut self, g: &GradMap) -> Result<()> {
        let acc = self.sum.tensors_mut();
        if acc.len() != g.tensors().len() {
            return Err(OptimError::Arity {
                expected: acc.len(),
                found: g.tensors().len(),
            });
        }
        for ((a, t), name) in acc.iter_mut().zip(g.tensors()).zip(g.names().iter()) {
            if a.shape() != t.shape() {
                return Err(OptimError::Shape {
                    param: name.clone(),
                    expected: a.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Adds already-clipped per-example gradients.
    pub fn accumulate(&mut self, clipped: &[GradMap]) -> Result<()> {
        for g in clipped {
            self.add_map(g)?;
        }
        self.examples_seen += clipped.len();
        Ok(())
    }

    /// Clips each example of `stacked` and adds it; the same arithmetic as
    /// [`clip_gradient`] followed by [`LotAccumulator::accumulate`], without
    /// materializing one map per example.
    pub fn accumulate_clipped(&mut self, stacked: &StackedGrads, clip: f64) -> Result<()> {
        for (name, t) in stacked.names().iter().zip(stacked.tensors()) {
            if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite {
                    param: name.clone(),
                    index: pos % (t.len() / stacked.batch()),
                });
            }
        }
        let factors: Vec<f64> = stacked
            .norms()
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                clip_factor(n, clip, |f| {
                    scaled_norm((0..stacked.tensors().len()).map(|p| stacked.slice(p, i)), f)
                })
            })
            .collect();
        let acc = self.sum.tensors_mut();
        if acc.len() != stacked.tensors().len() {
            return Err(OptimError::Arity {
                expected: acc.len(),
                found: stacked.tensors().len(),
            });
        }
        for (p, a) in acc.iter_mut().enumerate() {
            let expected_len = a.len() * stacked.batch();
            if stacked.tensors()[p].len() != expected_len {
                return Err(OptimError::Shape {
                    param: stacked.names()[p].clone(),
                    expected: a.shape().to_vec(),
                    found: stacked.tensors()[p].shape().to_vec(),
                });
            }
            for (i, &f) in factors.iter().enumerate() {
                let g = stacked.slice(p, i);
                if f == 1.0 {
                    a.data_mut().iter_mut().zip(g).for_each(|(x, y)| *x += y);
                } else {
                    a.data_mut().iter_mut().zip(g).for_each(|(x, y)| *x += y * f);
                }
            }
        }
        self.examples_seen += stacked.batch();
        Ok(())
    }

    /// Adds a precomputed sum over `count` examples.
    pub fn accumulate_sum(&mut self, sum: &GradMap, count: usize) -> Result<()> {
        self.add_map(sum)?;
        self.examples_seen += count;
        Ok(())
    }

    /// Folds another accumulator in.
    pub fn merge(&mut self, other: &LotAccumulator) -> Result<()> {
        self.accumulate_sum(&other.sum, other.examples_seen)
    }
}

/// Adds one Gaussian draw with per-coordinate std `σC` to the sum, then
/// divides by `L` or by the examples seen.
pub fn finalize_lot(
    acc: LotAccumulator,
    clip: f64,
    sigma: f64,
    lot_size: usize,
    divisor: DivisorMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<GradMap> {
    let seen = acc.examples_seen;
    let mut g = acc.sum;
    if sigma > 0.0 {
        let rng = rng.ok_or(OptimError::MissingRng(sigma))?;
        let std = sigma * clip;
        for t in g.tensors_mut() {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += std * z;
            }
        }
    }
    let denom = match divisor {
        DivisorMode::Expected => lot_size,
        DivisorMode::Actual => seen.max(1),
    };
    g.scale(1.0 / denom as f64);
    Ok(g)
}

/// Gradient sum and losses of one micro-batch.
fn micro_batch(params: &ModelParams, data: &[Encoded], chunk: &[usize], cfg: &DpConfig) -> Result<(LotAccumulator, Vec<f64>)> {
    let examples: Vec<(&[usize], &[usize])> = chunk
        .iter()
        .map(|&i| (data[i].source.as_slice(), data[i].target.as_slice()))
        .collect();
    let batch = Batch::new(params.config(), &examples)?;
    let mut graph = loss_graph(params, &batch)?;
    let losses = graph.losses().to_vec();
    let mut acc = LotAccumulator::new(params);
    if cfg.private {
        acc.accumulate_clipped(&graph.per_example_stacked()?, cfg.clip)?;
    } else {
        let g = graph.sum_gradient()?;
        check_finite(&g)?;
        acc.accumulate_sum(&g, chunk.len())?;
    }
    Ok((acc, losses))
}

/// Outcome of one lot.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub lot_size: usize,
    /// Mean per-example loss before the update; `None` for an empty lot.
    pub mean_loss: Option<f64>,
}

/// One update `θ ← θ − η ĝ` over a lot split into micro-batches. Micro-batches
/// may run concurrently; their sums are folded in order.
pub fn train_step(
    params: &mut ModelParams,
    lot: &[usize],
    data: &[Encoded],
    cfg: &DpConfig,
    physical_batch: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepReport> {
    cfg.validate()?;
    if let Some(&index) = lot.iter().find(|&&i| i >= data.len()) {
        return Err(OptimError::LotIndex { index, n: data.len() });
    }
    if physical_batch == 0 {
        return Err(OptimError::Config("physical batch must be at least 1".into()));
    }
    let chunks = micro_batches(lot, physical_batch);
    let frozen: &ModelParams = params;
    let parts = exec::map(&chunks, |chunk| micro_batch(frozen, data, chunk, cfg));
    let mut acc = LotAccumulator::new(params);
    let mut loss_sum = 0.0;
    for part in parts {
        let (local, losses) = part?;
        acc.merge(&local)?;
        loss_sum += losses.iter().sum::<f64>();
    }
    let (clip, sigma) = if cfg.private { (cfg.clip, cfg.sigma) } else { (1.0, 0.0) };
    let g = finalize_lot(acc, clip, sigma, cfg.lot_size, cfg.divisor, rng)?;
    for (p, d) in params.tensors_mut().iter_mut().zip(g.tensors()) {
        p.data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(x, y)| *x -= cfg.learning_rate * y);
    }
    Ok(StepReport {
        lot_size: lot.len(),
        mean_loss: (!lot.is_empty()).then(|| loss_sum / lot.len() as f64),
    })
}

/// Mutable state of a training run; everything a checkpoint must capture.
pub struct TrainState {
    pub params: ModelParams,
    pub sampler: Sampler,
    pub noise_rng: ChaCha8Rng,
    /// `None` in non-private mode.
    pub accountant: Option<Accountant>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub dp: DpConfig,
    pub physical_batch: usize,
    /// Planned total number of lots, fixed before the first step.
    pub total_steps: u64,
    pub target_epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotRecord {
    pub step: u64,
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub lot_size: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    /// The next step would have pushed ε past the target.
    Budget,
}

/// Checks that the whole planned run fits the privacy budget.
pub fn check_budget(state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    if let (Some(acc), Some(target)) = (&state.accountant, cfg.target_epsilon) {
        let (epsilon, _) = acc.epsilon_after(cfg.total_steps);
        if epsilon > target {
            return Err(OptimError::BudgetExceeded {
                epsilon,
                steps: cfg.total_steps,
                target,
            });
        }
    }
    Ok(())
}

/// Runs lots until `state.step` reaches `until` (capped at the planned total),
/// reporting each lot to `on_lot`.
pub fn train(
    state: &mut TrainState,
    data: &[Encoded],
    cfg: &TrainConfig,
    until: u64,
    mut on_lot: impl FnMut(&LotRecord),
) -> Result<StopReason> {
    check_budget(state, cfg)?;
    let until = until.min(cfg.total_steps);
    while state.step < until {
        if let (Some(acc), Some(target)) = (&state.accountant, cfg.target_epsilon) {
            if acc.epsilon_after(acc.steps() + 1).0 > target {
                return Ok(StopReason::Budget);
            }
        }
        let started = Instant::now();
        let lot = state.sampler.next_lot();
        let rng = cfg.dp.private.then_some(&mut state.noise_rng);
        let report = train_step(&mut state.params, &lot.indices, data, &cfg.dp, cfg.physical_batch, rng)?;
        state.step += 1;
        let epsilon = state.accountant.as_mut().map(|a| {
            a.record_step();
            a.epsilon().0
        });
        on_lot(&LotRecord {
            step: state.step,
            loss: report.mean_loss,
            epsilon,
            lot_size: report.lot_size,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(StopReason::Completed)
}
