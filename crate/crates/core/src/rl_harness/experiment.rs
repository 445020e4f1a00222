//! The daily simulation loop.
//!
//! For each day `t`:
//! 1. build contexts from metrics before `t` and let the policy decide each
//!    user's nudge for `t`;
//! 2. per user, compute n and σ and deliver pending nudges at the first
//!    online session, then simulate the day on the modulated matrix;
//! 3. turn events and nudge outcomes into logs, and logs into metrics;
//! 4. read the rewards of the decisions for `t` from the day-`t` metrics and
//!    update the policy in user order.
//!
//! Users are simulated in parallel on private streams, so output does not
//! depend on the worker count.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_context_for, ContextVector, Decision, PolicySpec, PolicyState};
use crate::behavior::{engagement_multiplier, modulate_matrix, nudge_count};
use crate::env_model::{Environment, NudgeRecord, TransitionMatrix, UserModel, NO_NUDGE};
use crate::error::Result;
use crate::logkit::{self, Delivery, LogRecord, NudgeOutcome, NudgeParams, Outcome};
use crate::markov_engine::{active_window, plan_day, session_id, simulate_planned_day};
use crate::metrics::{compute_daily_metrics, MetricRow, MetricStore};
use crate::rng::{self, Purpose};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayAggregate {
    pub day: u32,
    pub mean_reward: f64,
    pub action_counts: BTreeMap<String, u64>,
    pub cumulative_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy_name: String,
    pub days: Vec<DayAggregate>,
}

/// Per-day, per-policy aggregates of one or more runs over the same environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub user_count: usize,
    pub horizon_days: u32,
    pub reward_metric: String,
    pub policies: Vec<PolicyAggregate>,
    #[serde(skip)]
    pub decisions: Vec<Decision>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Fraction of decisions equal to `action` over days `[from_day, horizon)`.
    pub fn action_share(&self, action: &str, from_day: u32) -> f64 {
        let relevant: Vec<_> = self.decisions.iter().filter(|d| d.day >= from_day).collect();
        if relevant.is_empty() {
            return 0.0;
        }
        relevant.iter().filter(|d| d.action == action).count() as f64 / relevant.len() as f64
    }
}

/// What one user looked like on one day, handed to an observer.
#[derive(Debug)]
pub struct DayView<'a> {
    pub day: u32,
    pub user: &'a UserModel,
    pub n: u32,
    pub sigma: f64,
    pub baseline: &'a TransitionMatrix,
    pub matrix: &'a TransitionMatrix,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub result: ExperimentResult,
    /// Canonically ordered logs; empty unless logs were kept.
    pub logs: Vec<LogRecord>,
    pub store: MetricStore,
    pub users: Vec<UserModel>,
    pub outcomes: Vec<NudgeOutcome>,
}

impl RunOutput {
    /// Mean of `daily_action_count` per user over the horizon, in population order.
    pub fn mean_daily_actions(&self) -> Vec<f64> {
        let horizon = f64::from(self.result.horizon_days);
        self.users
            .iter()
            .map(|u| {
                (0..self.result.horizon_days)
                    .filter_map(|d| self.store.get(&u.user_id, d))
                    .map(|r| r.daily_action_count as f64)
                    .sum::<f64>()
                    / horizon
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct PendingNudge {
    nudge_type: String,
    decision_day: u32,
}

struct UserState {
    user: UserModel,
    pending: Vec<PendingNudge>,
    next_seq: u64,
    logs: Vec<LogRecord>,
}

struct UserDay {
    rows: Vec<MetricRow>,
    outcomes: Vec<NudgeOutcome>,
    n: u32,
    sigma: f64,
    matrix: Option<TransitionMatrix>,
}

type Observer<'a> = Box<dyn FnMut(&DayView<'_>) + 'a>;

/// Configures and runs one policy over an environment.
pub struct Experiment<'a> {
    env: &'a Environment,
    spec: PolicySpec,
    keep_logs: bool,
    metrics_path: Option<PathBuf>,
    observer: Option<Observer<'a>>,
}

impl<'a> Experiment<'a> {
    pub fn new(env: &'a Environment, spec: PolicySpec) -> Self {
        Experiment {
            env,
            spec,
            keep_logs: true,
            metrics_path: None,
            observer: None,
        }
    }

    /// Retain the full log stream in the output (default true).
    pub fn keep_logs(mut self, keep: bool) -> Self {
        self.keep_logs = keep;
        self
    }

    /// Persist metrics to a journal at `path` instead of memory only.
    pub fn metrics_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.metrics_path = Some(path.into());
        self
    }

    /// Called for every (day, user) with the matrix used that day.
    pub fn observe(mut self, f: impl FnMut(&DayView<'_>) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let env = self.env;
        let horizon = env.schedule.horizon_days;
        let d = env.schedule.nudge_window_days;
        let features = env.rl.features();
        let reward_metric = env.rl.reward();
        let nudge_params = NudgeParams {
            p_open_base: env.rl.p_open_base,
            p_block: env.rl.p_block,
            count_blocked_nudges: env.rl.count_blocked_nudges,
        };
        let observing = self.observer.is_some();

        let mut store = match &self.metrics_path {
            Some(path) => MetricStore::open(path)?,
            None => MetricStore::in_memory(),
        };
        let mut policy = PolicyState::new(self.spec.clone(), env.rl.action_set.clone(), features.len());
        let policy_name = policy.name();
        let mut states: Vec<UserState> = env
            .population()
            .into_iter()
            .map(|user| UserState {
                user,
                pending: Vec::new(),
                next_seq: 0,
                logs: Vec::new(),
            })
            .collect();

        let mut decisions = Vec::with_capacity(states.len() * horizon as usize);
        let mut outcomes = Vec::new();
        let mut days = Vec::with_capacity(horizon as usize);
        let mut cumulative = 0.0;

        for day in 0..horizon {
            let contexts: Vec<ContextVector> = states
                .par_iter()
                .map(|s| build_context_for(&store, &s.user, day, &features, d))
                .collect();
            let mut policy_rng = rng::stream(env.seed, Purpose::Policy, "", u64::from(day));
            let today = policy.decide(&contexts, &mut policy_rng);
            for (state, decision) in states.iter_mut().zip(&today) {
                if decision.action != NO_NUDGE {
                    state.pending.push(PendingNudge {
                        nudge_type: decision.action.clone(),
                        decision_day: day,
                    });
                }
            }

            let keep_logs = self.keep_logs;
            let results: Vec<UserDay> = states
                .par_iter_mut()
                .map(|state| simulate_user_day(env, state, day, &nudge_params, keep_logs, observing))
                .collect();

            let mut rows = Vec::new();
            for (state, result) in states.iter().zip(results) {
                if let (Some(observer), Some(matrix)) = (self.observer.as_mut(), result.matrix.as_ref()) {
                    observer(&DayView {
                        day,
                        user: &state.user,
                        n: result.n,
                        sigma: result.sigma,
                        baseline: &env.contexts[state.user.context_index].baseline_matrix,
                        matrix,
                    });
                }
                rows.extend(result.rows);
                outcomes.extend(result.outcomes);
            }
            store.upsert(&rows)?;
            store.flush()?;

            let mut action_counts: BTreeMap<String, u64> =
                env.rl.action_set.iter().map(|a| (a.clone(), 0)).collect();
            let mut total_reward = 0.0;
            for ((state, decision), context) in states.iter().zip(&today).zip(&contexts) {
                let reward = store.metric_value(reward_metric, &state.user.user_id, day, d, state.user.signup_day);
                policy.update(decision, context, reward);
                total_reward += reward;
                *action_counts.entry(decision.action.clone()).or_default() += 1;
            }
            let mean_reward = if states.is_empty() {
                0.0
            } else {
                total_reward / states.len() as f64
            };
            cumulative += mean_reward;
            days.push(DayAggregate {
                day,
                mean_reward,
                action_counts,
                cumulative_reward: cumulative,
            });
            decisions.extend(today);
        }

        let mut logs = Vec::new();
        if self.keep_logs {
            for state in &mut states {
                logs.append(&mut state.logs);
            }
            logkit::apply_sync_rules(&mut logs, Timestamp::day_start(horizon));
            logkit::canonical_order(&mut logs);
        }

        Ok(RunOutput {
            result: ExperimentResult {
                seed: env.seed,
                user_count: states.len(),
                horizon_days: horizon,
                reward_metric: env.rl.reward_metric.clone(),
                policies: vec![PolicyAggregate {
                    policy_name,
                    days,
                }],
                decisions,
            },
            logs,
            store,
            users: states.into_iter().map(|s| s.user).collect(),
            outcomes,
        })
    }
}

/// Runs `spec` over `env` keeping logs in memory.
pub fn run_experiment(env: &Environment, spec: PolicySpec) -> Result<RunOutput> {
    Experiment::new(env, spec).run()
}

fn simulate_user_day(
    env: &Environment,
    state: &mut UserState,
    day: u32,
    params: &NudgeParams,
    keep_logs: bool,
    observing: bool,
) -> UserDay {
    let ctx = &env.contexts[state.user.context_index];
    let d = env.schedule.nudge_window_days;
    let uid = state.user.user_id.clone();
    let mut nudge_rng = rng::stream(env.seed, Purpose::Nudge, &uid, u64::from(day));
    let mut activity_rng = rng::stream(env.seed, Purpose::Activity, &uid, u64::from(day));
    let (window_start, window_end) = active_window(ctx, day);
    let mut nudge_records = Vec::new();
    let mut outcomes = Vec::new();

    let mut settle = |state: &mut UserState, pending: PendingNudge, delivery: &Delivery, sigma: f64, rng: &mut rng::SimRng| {
        let (outcome, records) = logkit::resolve_nudge(
            &state.user,
            &pending.nudge_type,
            pending.decision_day,
            delivery,
            sigma,
            params,
            rng,
        );
        let counts = match outcome.outcome {
            Outcome::Undelivered => false,
            Outcome::Blocked if state.user.blocked => params.count_blocked_nudges,
            _ => true,
        };
        if outcome.outcome == Outcome::Blocked {
            state.user.blocked = true;
        }
        state.user.nudge_history.push(NudgeRecord {
            day,
            nudge_type: pending.nudge_type,
            delivered: counts,
        });
        nudge_records.extend(records);
        outcomes.push(outcome);
    };

    // Blocked users learn of the nudge at once; it still counts toward n.
    let n_before = nudge_count(&state.user.nudge_history, day, d);
    let sigma_before = engagement_multiplier(&state.user, n_before, &ctx.decay_params).sigma;
    if state.user.blocked {
        for pending in std::mem::take(&mut state.pending) {
            settle(state, pending, &Delivery::Direct { ts: window_start }, sigma_before, &mut nudge_rng);
        }
    }

    let n_now = nudge_count(&state.user.nudge_history, day, d);
    let pending_count = state.pending.len() as u32;
    let sigma_if_delivered = engagement_multiplier(&state.user, n_now + pending_count, &ctx.decay_params).sigma;
    let plan = plan_day(ctx, day, sigma_if_delivered, &mut activity_rng);

    let mut sigma = engagement_multiplier(&state.user, n_now, &ctx.decay_params).sigma;
    if !state.pending.is_empty() {
        let first_online = plan
            .start_times
            .iter()
            .zip(&plan.online_flags)
            .position(|(_, &online)| online);
        match first_online {
            Some(k) => {
                let delivery = Delivery::Session {
                    ts: plan.start_times[k],
                    session_id: session_id(&uid, day, k),
                };
                sigma = sigma_if_delivered;
                for pending in std::mem::take(&mut state.pending) {
                    settle(state, pending, &delivery, sigma, &mut nudge_rng);
                }
            }
            None => {
                let (expired, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut state.pending)
                    .into_iter()
                    .partition(|p| day + 1 >= p.decision_day + d);
                state.pending = waiting;
                let delivery = Delivery::Unreachable {
                    ts: window_end.plus_ms(-1),
                };
                for pending in expired {
                    settle(state, pending, &delivery, sigma, &mut nudge_rng);
                }
            }
        }
    }
    let n = nudge_count(&state.user.nudge_history, day, d);

    let baseline = &ctx.baseline_matrix;
    let matrix = modulate_matrix(baseline, sigma);
    let events = simulate_planned_day(
        &state.user,
        ctx,
        &matrix,
        day,
        &plan,
        env.schedule.max_session_len as usize,
        &mut activity_rng,
    );

    let mut records = logkit::merge_nudges(logkit::action_records(&events), nudge_records);
    logkit::number_records(&mut records, &mut state.next_seq);
    let rows = compute_daily_metrics(&records);
    if keep_logs {
        state.logs.extend(records);
    }

    UserDay {
        rows,
        outcomes,
        n,
        sigma,
        matrix: observing.then_some(matrix),
    }
}
