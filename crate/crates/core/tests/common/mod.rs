//! Shared environment fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nudgesim::env_model::{load_environment, Environment, TransitionMatrix};
use nudgesim::rng;
use rand::Rng;
use nudgesim::logkit::{EventType, LogRecord};
use nudgesim::time::Timestamp;
use proptest::prelude::*;
use serde_json::{json, Value};

/// A four-state chain with one engagement loop.
pub fn engagement_matrix() -> Value {
    json!({
        "states": ["session_start", "patient_mgmt/followup_visit", "reports/view_dashboard", "out_of_app"],
        "rows": [
            [0.0, 0.6, 0.2, 0.2],
            [0.0, 0.4, 0.2, 0.4],
            [0.0, 0.3, 0.2, 0.5],
            [0.0, 0.0, 0.0, 1.0]
        ],
        "initial": [1.0, 0.0, 0.0, 0.0]
    })
}

/// Knobs for a single-context environment.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub users: u32,
    pub horizon: u32,
    pub weights: (f64, f64, f64),
    pub rate: f64,
    pub p_online: f64,
    pub seed: u64,
    pub policy: Value,
    pub reward: &'static str,
    pub features: Vec<&'static str>,
    pub window: u32,
}

impl Default for Fixture {
    fn default() -> Self {
        Fixture {
            users: 20,
            horizon: 10,
            weights: (0.5, 0.5, 0.5),
            rate: 3.0,
            p_online: 0.7,
            seed: 7,
            policy: json!({"name": "thompson_bernoulli"}),
            reward: "daily_action_count",
            features: vec!["actions_last_d", "nudges_last_d"],
            window: 5,
        }
    }
}

impl Fixture {
    pub fn json(&self) -> Value {
        let point = |v: f64| json!({"kind": "point_mass", "value": v});
        json!({
            "contexts": [{
                "context_id": "field",
                "baseline_matrix": engagement_matrix(),
                "session_rate_per_day": self.rate,
                "active_hours": [8, 20],
                "p_online": self.p_online,
                "weights": {
                    "alpha": point(self.weights.0),
                    "beta": point(self.weights.1),
                    "gamma": point(self.weights.2)
                }
            }],
            "population": [{"context_id": "field", "user_count": self.users}],
            "schedule": {"horizon_days": self.horizon, "nudge_window_days": self.window},
            "rl": {
                "reward_metric": self.reward,
                "context_features": self.features,
                "action_set": ["no_nudge", "nudge"],
                "policy": self.policy
            },
            "seed": self.seed
        })
    }

    pub fn env(&self) -> Environment {
        load_environment(&self.json().to_string()).expect("fixture config is valid")
    }
}

fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9_/]{0,12}",
        any::<String>(),
        Just("quote\" back\\slash \u{1F600} \n\t".to_string()),
    ]
}

fn event_type() -> impl Strategy<Value = EventType> {
    prop_oneof![
        Just(EventType::SessionStart),
        Just(EventType::AppAction),
        Just(EventType::SessionEnd),
        Just(EventType::NudgeDelivered),
        Just(EventType::NudgeOpened),
        Just(EventType::NudgeDiscarded),
        Just(EventType::NudgeBlocked),
        Just(EventType::NudgeUndelivered),
    ]
}

pub fn log_record() -> impl Strategy<Value = LogRecord> {
    (
        any::<u64>(),
        text(),
        0i64..4_000_000_000_000,
        0i64..100_000_000,
        event_type(),
        text(),
        proptest::option::of(text()),
        any::<bool>(),
        proptest::collection::btree_map(text(), text(), 0..4),
    )
        .prop_map(|(event_seq, user_id, ts, lag, event_type, category, session_id, online, metadata)| LogRecord {
            event_seq,
            user_id,
            ts: Timestamp(ts),
            sync_ts: Timestamp(ts + lag),
            event_type,
            category,
            session_id,
            online,
            metadata: metadata.into_iter().collect::<BTreeMap<_, _>>(),
        })
}

/// Random absorbing matrix with 2 to 6 states; some rows never leave the app directly.
pub fn random_matrix(seed: u64) -> TransitionMatrix {
    let mut rng = rng::seeded(seed);
    let k = rng.random_range(2..7usize);
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        if i == k - 1 {
            let mut row = vec![0.0; k];
            row[k - 1] = 1.0;
            rows.push(row);
            continue;
        }
        let mut row: Vec<f64> = (0..k).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() }).collect();
        if rng.random_bool(0.1) {
            row[k - 1] = 0.0;
        }
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            row[k - 1] = 1.0;
        } else {
            row.iter_mut().for_each(|p| *p /= s);
        }
        let partial: f64 = row[..k - 1].iter().sum();
        row[k - 1] = (1.0 - partial).max(0.0);
        rows.push(row);
    }
    let mut states: Vec<String> = (0..k).map(|i| format!("s{i}")).collect();
    states[0] = "session_start".into();
    states[k - 1] = "out_of_app".into();
    let mut initial = vec![0.0; k];
    initial[0] = 1.0;
    TransitionMatrix {
        states,
        rows,
        initial_distribution: initial,
    }
}
