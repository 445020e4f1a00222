//! Nudge response model.
//!
//! A user's activity response to `n` recently received nudges is a weighted sum
//! of three decay shapes:
//!
//! * `f(n) = a0·exp(−k_a·n)`: activity highest without nudges,
//! * `g(n) = b0·k_a·(exp(−k_a·n) − exp(−k_b·n))/(k_b − k_a)`: an early boost that fades with fatigue,
//! * `h(n) = c0·(k_a·(exp(−k_b·n) − 1) − k_b·(exp(−k_a·n) − 1))/(k_b − k_a)`: a boost that saturates at `c0`.
//!
//! The `*_at` variants accept a real `n` for plotting and root finding.
//!
//! The response is turned into an engagement multiplier σ that scales the
//! engagement transitions of the user's baseline matrix.

use crate::env_model::{DecayParams, NudgeRecord, TransitionMatrix, UserModel};

/// Below this rate gap the analytic limit forms replace the divided differences.
pub const RATE_GAP_EPS: f64 = 1e-9;
pub const SIGMA_MIN: f64 = 0.05;
pub const SIGMA_MAX: f64 = 20.0;
pub const P_OUT_FLOOR: f64 = 0.01;

/// `a(n) = α·f(n) + β·g(n) + γ·h(n)` for one user.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivityResponse {
    pub value: f64,
    pub n: u32,
}

/// Scale applied to engagement transitions; 1 means baseline behavior.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct EngagementMultiplier {
    pub sigma: f64,
}

pub fn decay_f(n: u32, p: &DecayParams) -> f64 {
    decay_f_at(f64::from(n), p)
}

pub fn decay_f_at(n: f64, p: &DecayParams) -> f64 {
    p.a0 * (-p.k_a * n).exp()
}

/// `(exp(−k_a·n) − exp(−k_b·n))/(k_b − k_a)`, symmetric in the two rates.
///
/// Evaluated as `exp(−lo·n)·(1 − exp(−(hi − lo)·n))/(hi − lo)` with `expm1`,
/// which neither cancels nor overflows; the limit `n·exp(−k·n)` applies when
/// the rates coincide.
fn rate_difference(n: f64, p: &DecayParams) -> f64 {
    let (lo, hi) = if p.k_a <= p.k_b {
        (p.k_a, p.k_b)
    } else {
        (p.k_b, p.k_a)
    };
    let gap = hi - lo;
    if gap < RATE_GAP_EPS {
        n * (-p.k_a * n).exp()
    } else {
        (-lo * n).exp() * -(-gap * n).exp_m1() / gap
    }
}

pub fn decay_g(n: u32, p: &DecayParams) -> f64 {
    decay_g_at(f64::from(n), p)
}

pub fn decay_g_at(n: f64, p: &DecayParams) -> f64 {
    p.b0 * p.k_a * rate_difference(n, p)
}

pub fn decay_h(n: u32, p: &DecayParams) -> f64 {
    decay_h_at(f64::from(n), p)
}

pub fn decay_h_at(n: f64, p: &DecayParams) -> f64 {
    // The numerator over (k_b − k_a) rearranges to
    // 1 − exp(−k_a·n) − k_a·(exp(−k_a·n) − exp(−k_b·n))/(k_b − k_a).
    let value = p.c0 * (-(-p.k_a * n).exp_m1() - p.k_a * rate_difference(n, p));
    value.max(0.0)
}

pub fn activity_response(n: u32, user: &UserModel, p: &DecayParams) -> ActivityResponse {
    let value = user.alpha * decay_f(n, p) + user.beta * decay_g(n, p) + user.gamma * decay_h(n, p);
    ActivityResponse { value, n }
}

/// Nudges with `delivered` set whose day lies in `(current_day − d, current_day]`.
pub fn nudge_count(history: &[NudgeRecord], current_day: u32, d: u32) -> u32 {
    let current = i64::from(current_day);
    let lower = current - i64::from(d);
    history
        .iter()
        .filter(|r| r.delivered && i64::from(r.day) > lower && i64::from(r.day) <= current)
        .count() as u32
}

/// `σ = (1 + a(n))/(1 + a(0))`, clamped to `[SIGMA_MIN, SIGMA_MAX]`.
pub fn engagement_multiplier(user: &UserModel, n: u32, p: &DecayParams) -> EngagementMultiplier {
    if n == 0 {
        return EngagementMultiplier { sigma: 1.0 };
    }
    let at_n = activity_response(n, user, p).value;
    let at_zero = activity_response(0, user, p).value;
    let sigma = ((1.0 + at_n) / (1.0 + at_zero)).clamp(SIGMA_MIN, SIGMA_MAX);
    EngagementMultiplier { sigma }
}

/// Scales every transition into an engagement state by `sigma` and routes the
/// remaining mass of each row to `out_of_app`.
///
/// Scaled engagement mass is capped at `1 − P_OUT_FLOOR` by proportional
/// rescaling. The absorbing row and the initial distribution are untouched,
/// and `sigma == 1` returns an exact copy of `base`.
pub fn modulate_matrix(base: &TransitionMatrix, sigma: f64) -> TransitionMatrix {
    if sigma == 1.0 {
        return base.clone();
    }
    let out = base.out_index();
    let cap = 1.0 - P_OUT_FLOOR;
    let rows = base
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if i == out {
                return row.clone();
            }
            let engagement: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != out)
                .map(|(_, &p)| p)
                .sum();
            // Effective factor: sigma, or the largest factor that respects the floor.
            let factor = if engagement > 0.0 {
                sigma.min(cap / engagement)
            } else {
                sigma
            };
            let mut scaled: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &p)| if j == out { 0.0 } else { p * factor })
                .collect();
            let mass: f64 = scaled.iter().sum();
            scaled[out] = (1.0 - mass).max(0.0);
            scaled
        })
        .collect();
    TransitionMatrix {
        states: base.states.clone(),
        rows,
        initial_distribution: base.initial_distribution.clone(),
    }
}
