//! Daily in-app activity as Markov walks.
//!
//! A day is a Poisson number of sessions with uniform start times inside the
//! context's active hours. Each session is a walk on the user's (possibly
//! modulated) matrix until absorption in `out_of_app`, with lognormal gaps
//! between consecutive actions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, LogNormal, Poisson};

use crate::env_model::{ContextSpec, Environment, TransitionMatrix, UserModel};
use crate::time::{Timestamp, MS_PER_HOUR};

/// Median gap between consecutive actions, in milliseconds.
pub const MEDIAN_GAP_MS: f64 = 20_000.0;
pub const GAP_LOG_SIGMA: f64 = 0.8;
pub const DEFAULT_CATEGORY: &str = "general";

#[derive(Clone, Debug, PartialEq)]
pub struct ActionEvent {
    pub user_id: String,
    pub day: u32,
    pub timestamp: Timestamp,
    pub session_id: String,
    pub state_name: String,
    pub online: bool,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionPlan {
    pub session_count: u32,
    pub start_times: Vec<Timestamp>,
    pub online_flags: Vec<bool>,
}

impl SessionPlan {
    pub fn first_online_start(&self) -> Option<Timestamp> {
        self.start_times
            .iter()
            .zip(&self.online_flags)
            .find(|(_, &online)| online)
            .map(|(&t, _)| t)
    }
}

/// `[start, end)` of the active-hours window of `day`, in UTC milliseconds.
pub fn active_window(ctx: &ContextSpec, day: u32) -> (Timestamp, Timestamp) {
    let start = Timestamp::at_hour(day, ctx.active_hours.start);
    let end = Timestamp::at_hour(day, ctx.active_hours.end);
    (start, end.max(start.plus_ms(1)))
}

/// Category of a state: the prefix before the first `/`, if any.
pub fn category_of(state: &str) -> &str {
    match state.split_once('/') {
        Some((prefix, _)) if !prefix.is_empty() => prefix,
        _ => DEFAULT_CATEGORY,
    }
}

/// Draws the session structure of one day. The session rate is `λ·sigma`.
pub fn plan_day<R: Rng + ?Sized>(ctx: &ContextSpec, day: u32, sigma: f64, rng: &mut R) -> SessionPlan {
    let rate = ctx.session_rate_per_day * sigma;
    let session_count = if rate > 0.0 {
        Poisson::new(rate).expect("positive rate").sample(rng) as u32
    } else {
        0
    };
    let (start, end) = active_window(ctx, day);
    let mut start_times: Vec<Timestamp> = (0..session_count)
        .map(|_| Timestamp(rng.random_range(start.0..end.0)))
        .collect();
    start_times.sort_unstable();
    let online = Bernoulli::new(ctx.p_online).expect("validated probability");
    let online_flags = (0..session_count).map(|_| online.sample(rng)).collect();
    SessionPlan {
        session_count,
        start_times,
        online_flags,
    }
}

/// Index drawn from a probability vector; falls back to the last positive
/// entry when rounding leaves the cumulative sum just below the draw.
fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// One session as state indices. Absorption in `out_of_app` ends the walk and
/// is not part of the output; `max_len` caps the number of emitted states.
pub fn walk_session<R: Rng + ?Sized>(matrix: &TransitionMatrix, max_len: usize, rng: &mut R) -> Vec<usize> {
    let out = matrix.out_index();
    let mut walk = Vec::new();
    let mut state = sample_index(&matrix.initial_distribution, rng);
    if state == out {
        return walk;
    }
    loop {
        walk.push(state);
        if walk.len() >= max_len {
            break;
        }
        let next = sample_index(&matrix.rows[state], rng);
        if next == out {
            break;
        }
        state = next;
    }
    walk
}

/// Timestamps for `len` consecutive actions starting at `session_start`.
pub fn assign_timestamps<R: Rng + ?Sized>(len: usize, session_start: Timestamp, rng: &mut R) -> Vec<Timestamp> {
    let gaps = LogNormal::new(MEDIAN_GAP_MS.ln(), GAP_LOG_SIGMA).expect("valid lognormal");
    let mut out = Vec::with_capacity(len);
    let mut t = session_start;
    for i in 0..len {
        if i > 0 {
            let gap = (gaps.sample(rng).round() as i64).max(1);
            t = t.plus_ms(gap);
        }
        out.push(t);
    }
    out
}

pub fn session_id(user_id: &str, day: u32, ordinal: usize) -> String {
    format!("{user_id}-{day}-{ordinal}")
}

/// Events of a day whose sessions were already planned.
///
/// A session ends early if its next action would reach the start of the
/// following session or the end of the active window; its first action is
/// always kept, so every planned session appears in the output.
pub fn simulate_planned_day<R: Rng + ?Sized>(
    user: &UserModel,
    ctx: &ContextSpec,
    matrix: &TransitionMatrix,
    day: u32,
    plan: &SessionPlan,
    max_len: usize,
    rng: &mut R,
) -> Vec<ActionEvent> {
    let (_, window_end) = active_window(ctx, day);
    let mut events = Vec::new();
    for (k, (&start, &online)) in plan.start_times.iter().zip(&plan.online_flags).enumerate() {
        let limit = plan.start_times.get(k + 1).copied().unwrap_or(window_end).min(window_end);
        let walk = walk_session(matrix, max_len, rng);
        let times = assign_timestamps(walk.len(), start, rng);
        let sid = session_id(&user.user_id, day, k);
        for (i, (&state, &ts)) in walk.iter().zip(&times).enumerate() {
            if i > 0 && ts >= limit {
                break;
            }
            let name = &matrix.states[state];
            let mut metadata = BTreeMap::new();
            metadata.insert("category".to_string(), category_of(name).to_string());
            events.push(ActionEvent {
                user_id: user.user_id.clone(),
                day,
                timestamp: ts,
                session_id: sid.clone(),
                state_name: name.clone(),
                online,
                metadata,
            });
        }
    }
    events
}

/// Plans and simulates one day for `user` on `matrix`.
pub fn simulate_day<R: Rng + ?Sized>(
    user: &UserModel,
    env: &Environment,
    matrix: &TransitionMatrix,
    day: u32,
    sigma: f64,
    rng: &mut R,
) -> Vec<ActionEvent> {
    let ctx = &env.contexts[user.context_index];
    let plan = plan_day(ctx, day, sigma, rng);
    simulate_planned_day(user, ctx, matrix, day, &plan, env.schedule.max_session_len as usize, rng)
}

/// Hours-of-day helper for tests and diagnostics.
pub fn hour_of_day(ts: Timestamp) -> f64 {
    (ts.0 - Timestamp::day_start(ts.sim_day() as u32).0) as f64 / MS_PER_HOUR as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{OUT_OF_APP, SESSION_START};
    use crate::rng::seeded;

    fn chain(rows: Vec<Vec<f64>>, initial: Vec<f64>, states: &[&str]) -> TransitionMatrix {
        TransitionMatrix {
            states: states.iter().map(|s| s.to_string()).collect(),
            rows,
            initial_distribution: initial,
        }
    }

    #[test]
    fn immediate_absorption() {
        let m = chain(
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![1.0, 0.0],
            &[SESSION_START, OUT_OF_APP],
        );
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert_eq!(walk_session(&m, 1000, &mut rng), vec![0]);
        }
    }

    #[test]
    fn cap_rule() {
        let m = chain(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 0.0],
            &[SESSION_START, OUT_OF_APP],
        );
        assert_eq!(walk_session(&m, 1000, &mut seeded(3)).len(), 1000);
        assert_eq!(walk_session(&m, 1, &mut seeded(3)).len(), 1);
    }

    #[test]
    fn timestamps_start_at_session_start_and_increase() {
        let start = Timestamp::at_hour(0, 9.0);
        assert_eq!(assign_timestamps(1, start, &mut seeded(0)), vec![start]);
        let mut rng = seeded(5);
        for _ in 0..10_000 {
            let len = rng.random_range(1..40);
            let ts = assign_timestamps(len, start, &mut rng);
            assert_eq!(ts[0], start);
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn categories() {
        assert_eq!(category_of("patient_mgmt/register"), "patient_mgmt");
        assert_eq!(category_of("capacity/quiz/hard"), "capacity");
        assert_eq!(category_of("session_start"), DEFAULT_CATEGORY);
        assert_eq!(category_of("/odd"), DEFAULT_CATEGORY);
    }
}
