//! Closes the loop: metrics become contexts and rewards, policies pick each
//! user's nudge for the next day, and delivered nudges reshape behavior.

mod experiment;
mod policy;

use serde::{Deserialize, Serialize};

use crate::env_model::{Environment, UserModel};
use crate::metrics::{MetricName, MetricStore};

pub use experiment::{
    run_experiment, DayAggregate, DayView, Experiment, ExperimentResult, PolicyAggregate, RunOutput,
};
pub use policy::{ArmStats, PolicySpec, PolicyState};

/// Features for one user's decision, in configured order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub user_id: String,
    pub day: u32,
    pub values: Vec<f64>,
}

/// One line of `decisions.jsonl`. `day` is the day the decision targets; it
/// is taken before that day is simulated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    pub user_id: String,
    pub day: u32,
    pub action: String,
    pub policy_name: String,
}

/// Reward threshold used by Bernoulli policies.
pub fn binarize(reward: f64) -> f64 {
    if reward >= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Context for the decision targeting `day`, built only from days before it.
///
/// Daily metrics read the previous day; windowed metrics cover the `d` days
/// ending at the previous day; `days_since_signup` is relative to `day`.
pub fn build_context(store: &MetricStore, user: &UserModel, day: u32, env: &Environment) -> ContextVector {
    build_context_for(store, user, day, &env.rl.features(), env.schedule.nudge_window_days)
}

pub(crate) fn build_context_for(
    store: &MetricStore,
    user: &UserModel,
    day: u32,
    features: &[MetricName],
    d: u32,
) -> ContextVector {
    let values = features
        .iter()
        .map(|&name| {
            if name == MetricName::DaysSinceSignup {
                f64::from(day.saturating_sub(user.signup_day))
            } else if day == 0 || day <= user.signup_day {
                0.0
            } else {
                store.metric_value(name, &user.user_id, day - 1, d, user.signup_day)
            }
        })
        .collect();
    ContextVector {
        user_id: user.user_id.clone(),
        day,
        values,
    }
}

/// Configured reward metric for (user, day): the outcome of the decision targeting `day`.
pub fn compute_reward(store: &MetricStore, user: &UserModel, day: u32, env: &Environment) -> f64 {
    store.metric_value(
        env.rl.reward(),
        &user.user_id,
        day,
        env.schedule.nudge_window_days,
        user.signup_day,
    )
}
