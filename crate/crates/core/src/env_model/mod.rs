//! Environment definition: contexts, baseline behavior, decay parameters,
//! schedule and RL wiring, plus sampling of the synthetic user population.

mod matrix;

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricName;
use crate::rl_harness::PolicySpec;
use crate::rng::{self, Purpose};

pub use matrix::{
    validate_matrix, MatrixIssue, TransitionMatrix, ValidationReport, OUT_OF_APP, ROW_SUM_TOL,
    SESSION_START,
};

pub const NO_NUDGE: &str = "no_nudge";
pub const DEFAULT_NUDGE_WINDOW_DAYS: u32 = 5;
pub const DEFAULT_MAX_SESSION_LEN: u32 = 1000;

/// Parameters shared by the three decay functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayParams {
    pub k_a: f64,
    pub k_b: f64,
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        DecayParams {
            k_a: 0.2,
            k_b: 1.0,
            a0: 1.0,
            b0: 1.0,
            c0: 1.0,
        }
    }
}

impl DecayParams {
    fn check(&self, path: &str) -> Result<()> {
        for (name, k) in [("k_a", self.k_a), ("k_b", self.k_b)] {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::validation(
                    format!("{path}.{name}"),
                    format!("rate must be positive and finite, got {k}"),
                ));
            }
        }
        for (name, a) in [("a0", self.a0), ("b0", self.b0), ("c0", self.c0)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::validation(
                    format!("{path}.{name}"),
                    format!("amplitude must be nonnegative and finite, got {a}"),
                ));
            }
        }
        Ok(())
    }
}

/// Distribution of one individual weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightDistribution {
    PointMass { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl WeightDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            WeightDistribution::PointMass { value } => value,
            WeightDistribution::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
            WeightDistribution::Lognormal { mu, sigma } => LogNormal::new(mu, sigma)
                .expect("validated lognormal parameters")
                .sample(rng),
        }
    }

    fn check(&self, path: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(path, msg));
        match *self {
            WeightDistribution::PointMass { value } => {
                if !(value.is_finite() && value >= 0.0) {
                    return bad(format!("point_mass value must be nonnegative, got {value}"));
                }
            }
            WeightDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                    return bad(format!("uniform needs 0 <= lo <= hi, got [{lo}, {hi}]"));
                }
            }
            WeightDistribution::Lognormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return bad(format!(
                        "lognormal needs finite mu and sigma >= 0, got ({mu}, {sigma})"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-context distributions of each user's weight on the decay shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightDistributions {
    pub alpha: WeightDistribution,
    pub beta: WeightDistribution,
    pub gamma: WeightDistribution,
}

/// Half-open window `[start, end)` of hours after midnight UTC, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ActiveHours {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for ActiveHours {
    fn from([start, end]: [f64; 2]) -> Self {
        ActiveHours { start, end }
    }
}

impl From<ActiveHours> for [f64; 2] {
    fn from(h: ActiveHours) -> Self {
        [h.start, h.end]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub context_id: String,
    pub baseline_matrix: TransitionMatrix,
    pub session_rate_per_day: f64,
    pub active_hours: ActiveHours,
    pub p_online: f64,
    #[serde(default)]
    pub decay_params: DecayParams,
    pub weights: WeightDistributions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationEntry {
    pub context_id: String,
    pub user_count: u32,
}

fn default_nudge_window() -> u32 {
    DEFAULT_NUDGE_WINDOW_DAYS
}

fn one() -> u32 {
    1
}

fn default_max_session_len() -> u32 {
    DEFAULT_MAX_SESSION_LEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub horizon_days: u32,
    #[serde(default = "one")]
    pub decisions_per_day: u32,
    #[serde(default = "default_nudge_window")]
    pub nudge_window_days: u32,
    #[serde(default = "default_max_session_len")]
    pub max_session_len: u32,
}

fn default_p_open() -> f64 {
    0.3
}

fn default_p_block() -> f64 {
    0.01
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlSpec {
    pub reward_metric: String,
    pub context_features: Vec<String>,
    pub action_set: Vec<String>,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Extra policies simulated on the same population for comparison curves.
    #[serde(default)]
    pub compare_policies: Vec<PolicySpec>,
    #[serde(default = "default_p_open")]
    pub p_open_base: f64,
    #[serde(default = "default_p_block")]
    pub p_block: f64,
    /// Whether nudges sent to a user who already blocked them still count toward n.
    #[serde(default = "yes")]
    pub count_blocked_nudges: bool,
}

impl RlSpec {
    pub fn reward(&self) -> MetricName {
        MetricName::parse(&self.reward_metric).expect("validated reward metric")
    }

    pub fn features(&self) -> Vec<MetricName> {
        self.context_features
            .iter()
            .map(|f| MetricName::parse(f).expect("validated feature"))
            .collect()
    }

    pub fn action_index(&self, action: &str) -> Option<usize> {
        self.action_set.iter().position(|a| a == action)
    }
}

/// A fully validated simulation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub contexts: Vec<ContextSpec>,
    pub population: Vec<PopulationEntry>,
    pub schedule: Schedule,
    pub rl: RlSpec,
    pub seed: u64,
}

/// One nudge in a user's history. `delivered` marks entries that count toward n.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NudgeRecord {
    pub day: u32,
    pub nudge_type: String,
    pub delivered: bool,
}

/// One synthetic user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub user_id: String,
    pub context_id: String,
    pub context_index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nudge_history: Vec<NudgeRecord>,
    pub blocked: bool,
    pub signup_day: u32,
}

impl UserModel {
    /// A user with fixed weights, mostly for tests and fixtures.
    pub fn with_weights(user_id: &str, alpha: f64, beta: f64, gamma: f64) -> Self {
        UserModel {
            user_id: user_id.to_string(),
            context_id: String::new(),
            context_index: 0,
            alpha,
            beta,
            gamma,
            nudge_history: Vec::new(),
            blocked: false,
            signup_day: 0,
        }
    }
}

pub fn user_id_for(index: usize) -> String {
    format!("u{:06}", index + 1)
}

/// Parse and validate a JSON configuration document.
pub fn load_environment(config_text: &str) -> Result<Environment> {
    let de = &mut serde_json::Deserializer::from_str(config_text);
    let env: Environment = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() {
            Error::validation(path, inner.to_string())
        } else {
            Error::Parse(inner.to_string())
        }
    })?;
    env.validate()?;
    Ok(env)
}

impl Environment {
    /// Canonical JSON form; `load_environment` of this text yields an equal value.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment serializes")
    }

    pub fn context(&self, id: &str) -> Option<&ContextSpec> {
        self.contexts.iter().find(|c| c.context_id == id)
    }

    pub fn user_count(&self) -> usize {
        self.population.iter().map(|p| p.user_count as usize).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() {
            return Err(Error::validation("contexts", "at least one context is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, ctx) in self.contexts.iter().enumerate() {
            let path = format!("contexts[{i}]");
            if !seen.insert(ctx.context_id.as_str()) {
                return Err(Error::validation(
                    format!("{path}.context_id"),
                    format!("duplicate context_id {:?}", ctx.context_id),
                ));
            }
            let report = validate_matrix(&ctx.baseline_matrix);
            if !report.is_valid() {
                return Err(Error::validation(
                    format!("{path}.baseline_matrix"),
                    report.messages().join("; "),
                ));
            }
            let rate = ctx.session_rate_per_day;
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::validation(
                    format!("{path}.session_rate_per_day"),
                    format!("must be positive, got {rate}"),
                ));
            }
            let h = ctx.active_hours;
            if !(h.start >= 0.0 && h.start < h.end && h.end <= 24.0) {
                return Err(Error::validation(
                    format!("{path}.active_hours"),
                    format!("need 0 <= start < end <= 24, got [{}, {}]", h.start, h.end),
                ));
            }
            if !(0.0..=1.0).contains(&ctx.p_online) {
                return Err(Error::validation(
                    format!("{path}.p_online"),
                    format!("probability out of [0,1]: {}", ctx.p_online),
                ));
            }
            ctx.decay_params.check(&format!("{path}.decay_params"))?;
            ctx.weights.alpha.check(&format!("{path}.weights.alpha"))?;
            ctx.weights.beta.check(&format!("{path}.weights.beta"))?;
            ctx.weights.gamma.check(&format!("{path}.weights.gamma"))?;
        }

        for (i, p) in self.population.iter().enumerate() {
            if self.context(&p.context_id).is_none() {
                return Err(Error::validation(
                    format!("population[{i}].context_id"),
                    format!("unknown context_id {:?}", p.context_id),
                ));
            }
        }

        let s = &self.schedule;
        if s.horizon_days < 1 {
            return Err(Error::validation("schedule.horizon_days", "must be at least 1"));
        }
        if s.decisions_per_day != 1 {
            return Err(Error::validation(
                "schedule.decisions_per_day",
                format!("only 1 decision per day is supported, got {}", s.decisions_per_day),
            ));
        }
        if s.nudge_window_days < 1 {
            return Err(Error::validation(
                "schedule.nudge_window_days",
                "must be at least 1",
            ));
        }
        if s.max_session_len < 1 {
            return Err(Error::validation("schedule.max_session_len", "must be at least 1"));
        }

        let rl = &self.rl;
        if MetricName::parse(&rl.reward_metric).is_none() {
            return Err(Error::validation(
                "rl.reward_metric",
                format!("unknown metric name {:?}", rl.reward_metric),
            ));
        }
        for (i, f) in rl.context_features.iter().enumerate() {
            if MetricName::parse(f).is_none() {
                return Err(Error::validation(
                    format!("rl.context_features[{i}]"),
                    format!("unknown metric name {f:?}"),
                ));
            }
        }
        if rl.action_set.first().map(String::as_str) != Some(NO_NUDGE) {
            return Err(Error::validation(
                "rl.action_set",
                format!("must start with {NO_NUDGE:?}"),
            ));
        }
        if rl.action_set.len() < 2 {
            return Err(Error::validation(
                "rl.action_set",
                "needs at least one nudge type besides no_nudge",
            ));
        }
        let unique: BTreeSet<_> = rl.action_set.iter().collect();
        if unique.len() != rl.action_set.len() {
            return Err(Error::validation("rl.action_set", "duplicate action"));
        }
        for (name, p) in [("p_open_base", rl.p_open_base), ("p_block", rl.p_block)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(
                    format!("rl.{name}"),
                    format!("probability out of [0,1]: {p}"),
                ));
            }
        }
        rl.policy.check("rl.policy")?;
        for (i, p) in rl.compare_policies.iter().enumerate() {
            p.check(&format!("rl.compare_policies[{i}]"))?;
        }
        Ok(())
    }

    /// Samples the population from the master-seed population stream.
    pub fn population(&self) -> Vec<UserModel> {
        let mut rng = rng::stream(self.seed, Purpose::Population, "", 0);
        sample_population(self, &mut rng)
    }
}

/// Draw every user of the configured population, in population order.
pub fn sample_population<R: Rng + ?Sized>(env: &Environment, rng: &mut R) -> Vec<UserModel> {
    let mut users = Vec::with_capacity(env.user_count());
    for entry in &env.population {
        let context_index = env
            .contexts
            .iter()
            .position(|c| c.context_id == entry.context_id)
            .expect("validated population");
        let w = env.contexts[context_index].weights;
        for _ in 0..entry.user_count {
            let alpha = w.alpha.sample(rng);
            let beta = w.beta.sample(rng);
            let gamma = w.gamma.sample(rng);
            users.push(UserModel {
                user_id: user_id_for(users.len()),
                context_id: entry.context_id.clone(),
                context_index,
                alpha,
                beta,
                gamma,
                nudge_history: Vec::new(),
                blocked: false,
                signup_day: 0,
            });
        }
    }
    users
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    pub(crate) fn minimal_config() -> String {
        r#"{
          "contexts": [{
            "context_id": "ctx_a",
            "baseline_matrix": {
              "states": ["session_start", "out_of_app"],
              "rows": [[0.5, 0.5], [0.0, 1.0]],
              "initial": [1.0, 0.0]
            },
            "session_rate_per_day": 3.0,
            "active_hours": [8, 20],
            "p_online": 0.8,
            "weights": {
              "alpha": {"kind": "point_mass", "value": 1.0},
              "beta": {"kind": "point_mass", "value": 0.0},
              "gamma": {"kind": "point_mass", "value": 0.0}
            }
          }],
          "population": [{"context_id": "ctx_a", "user_count": 3}],
          "schedule": {"horizon_days": 2},
          "rl": {
            "reward_metric": "daily_action_count",
            "context_features": ["actions_last_d", "nudges_last_d"],
            "action_set": ["no_nudge", "nudge"]
          },
          "seed": 42
        }"#
        .to_string()
    }

    fn with(text: &str, from: &str, to: &str) -> String {
        assert!(text.contains(from), "fixture missing {from}");
        text.replacen(from, to, 1)
    }

    #[test]
    fn minimal_config_loads_with_defaults() {
        let env = load_environment(&minimal_config()).unwrap();
        assert_eq!(env.contexts.len(), 1);
        assert_eq!(env.schedule.nudge_window_days, 5);
        assert_eq!(env.schedule.decisions_per_day, 1);
        assert_eq!(env.contexts[0].decay_params, DecayParams::default());
        assert_eq!(env.rl.p_open_base, 0.3);
        assert!(env.rl.count_blocked_nudges);
        assert_eq!(
            env.rl.features(),
            vec![MetricName::ActionsLastD, MetricName::NudgesLastD]
        );
    }

    #[test]
    fn bad_row_sum_is_rejected() {
        let text = with(&minimal_config(), "[[0.5, 0.5]", "[[0.6, 0.6]");
        let err = load_environment(&text).unwrap_err().to_string();
        assert!(err.contains("row sum 1.2 ≠ 1"), "{err}");
        assert!(err.contains("contexts[0].baseline_matrix"), "{err}");
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let err = load_environment("{\"contexts\": [").unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn type_errors_name_the_path() {
        let text = with(&minimal_config(), "\"horizon_days\": 2", "\"horizon_days\": \"two\"");
        match load_environment(&text).unwrap_err() {
            Error::Validation { path, .. } => assert_eq!(path, "schedule.horizon_days"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        let text = with(&minimal_config(), "\"user_count\": 3}", "\"user_count\": 3}, {\"context_id\": \"nope\", \"user_count\": 1}");
        let err = load_environment(&text).unwrap_err().to_string();
        assert!(err.contains("population[1].context_id"), "{err}");

        let text = with(&minimal_config(), "\"nudges_last_d\"", "\"nudges_yesterday\"");
        let err = load_environment(&text).unwrap_err().to_string();
        assert!(err.contains("rl.context_features[1]"), "{err}");

        let text = with(&minimal_config(), "\"reward_metric\": \"daily_action_count\"", "\"reward_metric\": \"joy\"");
        let err = load_environment(&text).unwrap_err().to_string();
        assert!(err.contains("rl.reward_metric"), "{err}");
    }

    #[test]
    fn scalar_invariants_are_enforced() {
        for (from, to, path) in [
            ("\"session_rate_per_day\": 3.0", "\"session_rate_per_day\": 0.0", "session_rate_per_day"),
            ("[8, 20]", "[20, 8]", "active_hours"),
            ("\"p_online\": 0.8", "\"p_online\": 1.5", "p_online"),
            ("\"horizon_days\": 2", "\"horizon_days\": 0", "horizon_days"),
            ("\"horizon_days\": 2", "\"horizon_days\": 2, \"nudge_window_days\": 0", "nudge_window_days"),
            ("\"action_set\": [\"no_nudge\", \"nudge\"]", "\"action_set\": [\"nudge\"]", "action_set"),
        ] {
            let err = load_environment(&with(&minimal_config(), from, to)).unwrap_err();
            assert!(err.to_string().contains(path), "{path}: {err}");
        }
    }

    #[test]
    fn serialization_is_idempotent() {
        let env = load_environment(&minimal_config()).unwrap();
        let again = load_environment(&env.to_json()).unwrap();
        assert_eq!(env, again);
        assert_eq!(env.to_json(), again.to_json());
    }

    #[test]
    fn population_counts_and_ids() {
        let env = load_environment(&minimal_config()).unwrap();
        let users = env.population();
        assert_eq!(users.len(), 3);
        assert!(users.iter().all(|u| u.context_id == "ctx_a"));
        assert!(users.iter().all(|u| (u.alpha, u.beta, u.gamma) == (1.0, 0.0, 0.0)));
        let ids: Vec<_> = users.iter().map(|u| u.user_id.as_str()).collect();
        assert_eq!(ids, ["u000001", "u000002", "u000003"]);
    }

    #[test]
    fn population_is_a_function_of_seed() {
        let text = with(
            &minimal_config(),
            "\"alpha\": {\"kind\": \"point_mass\", \"value\": 1.0}",
            "\"alpha\": {\"kind\": \"lognormal\", \"mu\": 0.0, \"sigma\": 0.5}",
        );
        let text = with(&text, "\"beta\": {\"kind\": \"point_mass\", \"value\": 0.0}", "\"beta\": {\"kind\": \"uniform\", \"lo\": 0.0, \"hi\": 2.0}");
        let env = load_environment(&text).unwrap();
        let a = sample_population(&env, &mut seeded(1));
        let b = sample_population(&env, &mut seeded(1));
        let c = sample_population(&env, &mut seeded(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|u| u.alpha > 0.0 && (0.0..2.0).contains(&u.beta)));
    }
}
