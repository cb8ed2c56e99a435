//! Differential-privacy calibration and accounting.
//!
//! * [`analytic_gaussian_sigma`] calibrates a single Gaussian release exactly
//!   (Balle & Wang's analytic Gaussian mechanism).
//! * [`compose_epsilon`] accounts a sequence of subsampled Gaussian releases
//!   through Rényi moments of the sampled Gaussian mechanism at integer
//!   orders 2..=256.
//! * [`sigma_for_budget`] inverts the composition by bisection.
//! * [`epsilon_curve`] tabulates ε against σ with and without secure
//!   aggregation, where the latter accounts each party's release separately.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Rényi orders searched when converting to (ε, δ).
pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;

const BISECTION_STEPS: usize = 200;

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// δ achieved by Gaussian noise of scale `sigma` at privacy level `epsilon`
/// for a query of L2 sensitivity `sensitivity`:
/// `Φ(Δ/2σ − εσ/Δ) − e^ε Φ(−Δ/2σ − εσ/Δ)`.
pub fn analytic_gaussian_delta(epsilon: f64, sigma: f64, sensitivity: f64) -> f64 {
    let a = sensitivity / (2.0 * sigma);
    let b = epsilon * sigma / sensitivity;
    std_normal_cdf(a - b) - epsilon.exp() * std_normal_cdf(-a - b)
}

fn check_eps_delta(epsilon: f64, delta: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::contract(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Smallest σ whose analytic Gaussian mechanism is (ε, δ)-DP.
///
/// The achieved δ decreases in σ, so bisection over `[1e-3·Δ, 1e3·Δ]`
/// (widened if needed) converges to the boundary; the upper end of the final
/// bracket is returned, so the condition always holds at the result.
pub fn analytic_gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    check_eps_delta(epsilon, delta)?;
    if !(sensitivity > 0.0) {
        return Err(Error::contract(format!("sensitivity must be positive, got {sensitivity}")));
    }
    let holds = |s: f64| analytic_gaussian_delta(epsilon, s, sensitivity) <= delta;
    let mut lo = 1e-3 * sensitivity;
    let mut hi = 1e3 * sensitivity;
    let mut widen = 0;
    while holds(lo) && widen < 60 {
        hi = lo;
        lo /= 2.0;
        widen += 1;
    }
    while !holds(hi) && widen < 120 {
        lo = hi;
        hi *= 2.0;
        widen += 1;
    }
    if holds(lo) || !holds(hi) {
        return Err(Error::numeric(format!(
            "no bracket for analytic Gaussian sigma at ε={epsilon}, δ={delta}"
        )));
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(hi);
        }
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::numeric("analytic Gaussian bisection did not converge"))
}

/// Smallest ε for which noise scale `sigma` satisfies the analytic Gaussian
/// condition at `delta`.
pub fn analytic_gaussian_epsilon(sigma: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    let holds = |e: f64| analytic_gaussian_delta(e, sigma, sensitivity) <= delta;
    if holds(0.0) {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while !holds(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Rényi divergence of order `alpha` for one release of the sampled
/// Gaussian mechanism with sampling rate `q` and noise multiplier `sigma`:
///
/// `log( Σ_i C(α,i) q^i (1−q)^(α−i) exp((i²−i)/(2σ²)) ) / (α − 1)`.
pub fn subsampled_gaussian_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha as f64 / (2.0 * sigma * sigma);
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let term = ln_binomial(alpha, i)
            + fi * lq
            + (alpha - i) as f64 * l1q
            + (fi * fi - fi) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a / (alpha as f64 - 1.0)
}

/// How Rényi moments are turned into (ε, δ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMethod {
    /// Moments-accountant tail bound: `ε = RDP_α + log(1/δ)/(α − 1)`.
    Moments,
    /// Tighter conversion: `ε = RDP_α + log((α−1)/α) − (log δ + log α)/(α − 1)`.
    Rdp,
}

/// Converts accumulated Rényi divergences to ε at `delta`, minimizing over
/// orders. Returns `(ε, best order)`; ε is `∞` when no order gives a finite
/// bound.
pub fn rdp_to_epsilon(orders: &[u32], rdp: &[f64], delta: f64, method: AccountingMethod) -> (f64, u32) {
    let mut best = (f64::INFINITY, orders.first().copied().unwrap_or(MIN_ORDER));
    for (&a, &r) in orders.iter().zip(rdp) {
        if !r.is_finite() {
            continue;
        }
        let af = a as f64;
        let eps = match method {
            AccountingMethod::Moments => r + (1.0 / delta).ln() / (af - 1.0),
            AccountingMethod::Rdp => {
                r + ((af - 1.0) / af).ln() - (delta.ln() + af.ln()) / (af - 1.0)
            }
        };
        let eps = eps.max(0.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    best
}

pub fn default_orders() -> Vec<u32> {
    (MIN_ORDER..=MAX_ORDER).collect()
}

/// Composition state of the training loop: one subsampled Gaussian release
/// per batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccountantState {
    pub sigma: f64,
    pub subsample_rate: f64,
    pub steps_taken: u64,
    pub delta: f64,
    pub method: AccountingMethod,
    #[serde(skip)]
    per_step: Option<Vec<f64>>,
}

impl AccountantState {
    pub fn new(sigma: f64, subsample_rate: f64, delta: f64, method: AccountingMethod) -> Self {
        Self {
            sigma,
            subsample_rate,
            steps_taken: 0,
            delta,
            method,
            per_step: None,
        }
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps_taken = steps;
        self
    }

    pub fn step(&mut self, n: u64) {
        self.steps_taken += n;
    }

    fn per_step_rdp(&mut self) -> &[f64] {
        let (q, s) = (self.subsample_rate, self.sigma);
        self.per_step
            .get_or_insert_with(|| default_orders().into_iter().map(|a| subsampled_gaussian_rdp(q, s, a)).collect())
    }

    /// ε spent so far, caching the per-step moments between calls.
    pub fn epsilon(&mut self) -> f64 {
        let steps = self.steps_taken as f64;
        let (delta, method) = (self.delta, self.method);
        let total: Vec<f64> = self.per_step_rdp().iter().map(|r| r * steps).collect();
        rdp_to_epsilon(&default_orders(), &total, delta, method).0
    }
}

/// ε after `state.steps_taken` subsampled Gaussian releases.
pub fn compose_epsilon(state: &AccountantState) -> f64 {
    if state.steps_taken == 0 {
        return 0.0;
    }
    if !(state.sigma > 0.0) {
        return f64::INFINITY;
    }
    let orders = default_orders();
    let rdp: Vec<f64> = orders
        .iter()
        .map(|&a| state.steps_taken as f64 * subsampled_gaussian_rdp(state.subsample_rate, state.sigma, a))
        .collect();
    rdp_to_epsilon(&orders, &rdp, state.delta, state.method).0
}

/// Smallest noise multiplier whose composed ε over `total_steps` releases at
/// rate `q` stays within `epsilon` (to relative precision 1e-5).
pub fn sigma_for_budget(
    epsilon: f64,
    delta: f64,
    q: f64,
    total_steps: u64,
    method: AccountingMethod,
) -> Result<f64> {
    check_eps_delta(epsilon, delta)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("subsample rate {q} outside (0, 1]")));
    }
    let eps_at = |s: f64| compose_epsilon(&AccountantState::new(s, q, delta, method).with_steps(total_steps));
    let (mut lo, mut hi) = (1e-3, 1e3);
    while eps_at(hi) > epsilon {
        lo = hi;
        hi *= 2.0;
        if hi > 1e9 {
            return Err(Error::numeric(format!("no sigma reaches ε={epsilon}")));
        }
    }
    if eps_at(lo) <= epsilon {
        return Ok(lo);
    }
    for _ in 0..BISECTION_STEPS {
        if hi - lo <= 1e-6 * hi {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps_at(mid) <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::numeric("sigma_for_budget bisection did not converge"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub sigma: f64,
    pub epsilon_with_mpc: f64,
    pub epsilon_no_mpc: f64,
}

/// ε against σ for a run of `steps` releases at rate `q` over `parties`
/// secondary parties. Without secure aggregation every party's noisy
/// release is accounted separately, i.e. `parties × steps` releases.
pub fn epsilon_curve(
    sigmas: &[f64],
    q: f64,
    steps: u64,
    delta: f64,
    parties: usize,
    method: AccountingMethod,
) -> Vec<CurveRow> {
    sigmas
        .iter()
        .map(|&sigma| {
            let with = AccountantState::new(sigma, q, delta, method).with_steps(steps);
            let without = AccountantState::new(sigma, q, delta, method).with_steps(steps * parties.max(1) as u64);
            CurveRow {
                sigma,
                epsilon_with_mpc: compose_epsilon(&with),
                epsilon_no_mpc: compose_epsilon(&without),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_points() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((std_normal_cdf(1.959963984540054) - 0.975).abs() < 1e-11);
        assert!(std_normal_cdf(-40.0) >= 0.0);
    }

    #[test]
    fn sigma_scales_with_sensitivity() {
        for &(e, d) in &[(0.3, 1e-5), (1.0, 1e-6), (4.0, 1e-3)] {
            let s1 = analytic_gaussian_sigma(e, d, 1.0).unwrap();
            let s2 = analytic_gaussian_sigma(e, d, 2.0).unwrap();
            assert!((s2 / s1 - 2.0).abs() < 1e-9, "{e} {d}: {s1} {s2}");
        }
    }

    #[test]
    fn sigma_decreases_with_epsilon() {
        let a = analytic_gaussian_sigma(0.5, 1e-5, 1.0).unwrap();
        let b = analytic_gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
        assert!(a > b);
    }

    #[test]
    fn bad_arguments() {
        assert!(analytic_gaussian_sigma(0.0, 1e-5, 1.0).is_err());
        assert!(analytic_gaussian_sigma(1.0, 1.0, 1.0).is_err());
        assert!(analytic_gaussian_sigma(1.0, 1e-5, 0.0).is_err());
    }

    #[test]
    fn full_batch_rdp_is_gaussian() {
        assert!((subsampled_gaussian_rdp(1.0, 2.0, 10) - 10.0 / 8.0).abs() < 1e-15);
        // At q < 1 the binomial form must approach the Gaussian as q → 1.
        let near = subsampled_gaussian_rdp(1.0 - 1e-12, 2.0, 10);
        assert!((near - 1.25).abs() < 1e-9);
    }

    #[test]
    fn zero_steps_spend_nothing() {
        assert_eq!(compose_epsilon(&AccountantState::new(1.0, 0.1, 1e-5, AccountingMethod::Rdp)), 0.0);
    }

    #[test]
    fn tiny_sigma_is_infinite() {
        let s = AccountantState::new(0.0, 0.1, 1e-5, AccountingMethod::Rdp).with_steps(10);
        assert_eq!(compose_epsilon(&s), f64::INFINITY);
    }

    #[test]
    fn cached_epsilon_matches_direct() {
        let mut s = AccountantState::new(1.3, 0.02, 1e-5, AccountingMethod::Rdp);
        s.step(500);
        let a = s.epsilon();
        assert_eq!(a, compose_epsilon(&s));
        s.step(500);
        assert!(s.epsilon() > a);
    }
}
