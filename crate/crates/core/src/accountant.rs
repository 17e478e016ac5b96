//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For integer orders the single-step bound is
//! `A_α = Σ_k C(α,k) q^k (1-q)^(α-k) exp((k²-k)/(2σ²))`, `RDP(α) = ln A_α / (α-1)`.
//! The `k = 0, 1` terms are folded analytically so the sum is evaluated as
//! `ln A_α = ln1p(Σ_{k≥2} ... expm1(...))`, keeping precision when `q` is tiny.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{Method, SamplingError};

pub const SIGMA_BRACKET: (f64, f64) = (0.3, 1e6);
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_DELTA: f64 = 1e-8;

pub const POISSON_LABEL: &str = "(ε, δ) as accounted";
pub const SHUFFLE_LABEL: &str =
    "reported ε assumes Poisson amplification; actual shuffle guarantee is weaker/unquantified";

#[derive(Debug, Error, PartialEq)]
pub enum AccountantError {
    #[error("sampling rate q = {0} must be in (0, 1]")]
    SamplingRate(f64),
    #[error("noise multiplier must be finite and non-negative, got {0}")]
    Sigma(f64),
    #[error("delta = {0} must be in (0, 1)")]
    Delta(f64),
    #[error("Rényi orders must be integers >= 2, got {0}")]
    Order(u32),
    #[error("curve has no orders")]
    EmptyCurve,
    #[error("target epsilon must be finite and positive, got {0}")]
    Target(f64),
    #[error("target epsilon {target} unreachable for sigma in [{lo}, {hi}] (epsilon at sigma={hi} is {at_hi})")]
    Unreachable { target: f64, lo: f64, hi: f64, at_hi: f64 },
    #[error(transparent)]
    Method(#[from] SamplingError),
}

pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

/// Rényi divergence bounds on a grid of orders. Values may be `+inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub values: Vec<f64>,
}

/// ln(e^x - 1) for x > 0.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// ln(1 + e^x).
fn ln1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn rdp_order(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    if q == 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut ln_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize);
    for k in 1..=alpha {
        let kf = k as f64;
        ln_binom += (a - kf + 1.0).ln() - kf.ln();
        if k >= 2 {
            let exponent = (kf * kf - kf) / (2.0 * sigma * sigma);
            terms.push(ln_binom + kf * ln_q + (a - kf) * ln_1mq + ln_expm1(exponent));
        }
    }
    ln1p_exp(log_sum_exp(&terms)) / (a - 1.0)
}

pub fn rdp_single_step(q: f64, sigma: f64, orders: &[u32]) -> Result<RdpCurve, AccountantError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountantError::SamplingRate(q));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(AccountantError::Sigma(sigma));
    }
    if let Some(&bad) = orders.iter().find(|&&a| a < 2) {
        return Err(AccountantError::Order(bad));
    }
    let values = orders
        .iter()
        .map(|&a| if sigma == 0.0 { f64::INFINITY } else { rdp_order(q, sigma, a) })
        .collect();
    Ok(RdpCurve {
        orders: orders.to_vec(),
        values,
    })
}

pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    let t = steps as f64;
    RdpCurve {
        orders: curve.orders.clone(),
        values: curve.values.iter().map(|&v| if steps == 0 { 0.0 } else { v * t }).collect(),
    }
}

/// Returns `(ε, α)` minimizing `RDP(α) + ln(1/δ)/(α-1)` over the grid.
pub fn to_epsilon(curve: &RdpCurve, delta: f64) -> Result<(f64, u32), AccountantError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Delta(delta));
    }
    let ln_inv_delta = -delta.ln();
    curve
        .orders
        .iter()
        .zip(&curve.values)
        .map(|(&a, &v)| (v + ln_inv_delta / (a as f64 - 1.0), a))
        .fold(None, |best: Option<(f64, u32)>, cand| match best {
            Some(b) if b.0 <= cand.0 => Some(b),
            _ => Some(cand),
        })
        .ok_or(AccountantError::EmptyCurve)
}

pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<f64, AccountantError> {
    Ok(to_epsilon(&compose(&rdp_single_step(q, sigma, orders)?, steps), delta)?.0)
}

/// Smallest σ in the bracket (to relative tolerance 1e-3) meeting the budget.
/// Returns the lower bracket end when even that satisfies the target.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64, orders: &[u32]) -> Result<f64, AccountantError> {
    if !(target_epsilon > 0.0 && target_epsilon.is_finite()) {
        return Err(AccountantError::Target(target_epsilon));
    }
    let eps = |sigma: f64| epsilon_for(q, sigma, steps, delta, orders);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let at_hi = eps(hi)?;
    if at_hi > target_epsilon {
        return Err(AccountantError::Unreachable {
            target: target_epsilon,
            lo,
            hi,
            at_hi,
        });
    }
    if eps(lo)? <= target_epsilon {
        return Ok(lo);
    }
    while (hi - lo) / hi > CALIBRATION_TOLERANCE {
        let mid = (lo * hi).sqrt();
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub fn check_delta(delta: f64) -> Result<(), AccountantError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(AccountantError::Delta(delta))
    }
}

/// Warning text when δ is not comfortably below 1/N.
pub fn delta_warning(delta: f64, n: usize) -> Option<String> {
    let bound = 1.0 / (10.0 * n as f64);
    (delta > bound).then(|| format!("delta = {delta:e} exceeds 1/(10N) = {bound:e} for N = {n}; the guarantee is weak"))
}

impl Method {
    pub fn guarantee_label(self) -> &'static str {
        match self {
            Method::Poisson => POISSON_LABEL,
            Method::Shuffle => SHUFFLE_LABEL,
        }
    }
}

pub fn guarantee_label(method: &str) -> Result<&'static str, AccountantError> {
    Ok(method.parse::<Method>()?.guarantee_label())
}

/// Running privacy ledger of a training run with fixed (q, σ, δ).
#[derive(Clone, Debug, PartialEq)]
pub struct Accountant {
    q: f64,
    sigma: f64,
    delta: f64,
    single: RdpCurve,
    steps: u64,
}

impl Accountant {
    pub fn new(q: f64, sigma: f64, delta: f64, orders: &[u32]) -> Result<Self, AccountantError> {
        check_delta(delta)?;
        Ok(Self {
            single: rdp_single_step(q, sigma, orders)?,
            q,
            sigma,
            delta,
            steps: 0,
        })
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn orders(&self) -> &[u32] {
        &self.single.orders
    }

    pub fn record_step(&mut self) {
        self.steps += 1;
    }

    pub fn epsilon(&self) -> (f64, u32) {
        self.epsilon_after(self.steps)
    }

    pub fn epsilon_after(&self, steps: u64) -> (f64, u32) {
        to_epsilon(&compose(&self.single, steps), self.delta).expect("validated at construction")
    }
}
