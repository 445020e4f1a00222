//! Event logs in the ML-oriented tracking schema.
//!
//! Simulated actions and nudge outcomes become [`LogRecord`]s. Records made
//! while the device is offline reach the server at the start of the user's
//! next online session, or at the end-of-horizon flush.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env_model::UserModel;
use crate::error::{Error, Result};
use crate::markov_engine::ActionEvent;
use crate::time::Timestamp;

pub const SESSION_CATEGORY: &str = "session";
pub const NUDGE_CATEGORY: &str = "nudge";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    AppAction,
    NudgeDelivered,
    NudgeOpened,
    NudgeDiscarded,
    NudgeBlocked,
    NudgeUndelivered,
    SessionStart,
    SessionEnd,
}

/// One line of `logs.jsonl`. Field order here is the wire order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub event_seq: u64,
    pub user_id: String,
    pub ts: Timestamp,
    pub sync_ts: Timestamp,
    pub event_type: EventType,
    pub category: String,
    pub session_id: Option<String>,
    pub online: bool,
    pub metadata: BTreeMap<String, String>,
}

impl LogRecord {
    pub fn day(&self) -> i64 {
        self.ts.sim_day()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Opened,
    Discarded,
    Blocked,
    Undelivered,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Opened => "opened",
            Outcome::Discarded => "discarded",
            Outcome::Blocked => "blocked",
            Outcome::Undelivered => "undelivered",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NudgeOutcome {
    pub decision_day: u32,
    pub nudge_type: String,
    pub outcome: Outcome,
    pub delivered: bool,
}

/// Reaction model knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NudgeParams {
    pub p_open_base: f64,
    pub p_block: f64,
    pub count_blocked_nudges: bool,
}

impl Default for NudgeParams {
    fn default() -> Self {
        NudgeParams {
            p_open_base: 0.3,
            p_block: 0.01,
            count_blocked_nudges: true,
        }
    }
}

impl NudgeParams {
    pub fn p_open(&self, sigma: f64) -> f64 {
        (self.p_open_base * sigma).min(1.0)
    }

    /// Probabilities of (opened, discarded, blocked) for a reachable, unblocked user.
    pub fn outcome_probabilities(&self, sigma: f64) -> [f64; 3] {
        let open = self.p_open(sigma);
        let rest = 1.0 - open;
        let blocked = rest * self.p_block;
        [open, rest - blocked, blocked]
    }
}

/// Where a pending nudge lands.
#[derive(Clone, Debug, PartialEq)]
pub enum Delivery {
    /// Delivered at the start of an online session.
    Session { ts: Timestamp, session_id: String },
    /// Sent to a user whose device accepts no nudges; the server learns it immediately.
    Direct { ts: Timestamp },
    /// No online session within the delivery window; `ts` is the expiry instant.
    Unreachable { ts: Timestamp },
}

impl Delivery {
    fn ts(&self) -> Timestamp {
        match self {
            Delivery::Session { ts, .. } | Delivery::Direct { ts } | Delivery::Unreachable { ts } => *ts,
        }
    }
}

fn nudge_record(
    user_id: &str,
    event_type: EventType,
    ts: Timestamp,
    session_id: Option<String>,
    nudge_type: &str,
    decision_day: u32,
) -> LogRecord {
    let mut metadata = BTreeMap::new();
    metadata.insert("decision_day".to_string(), decision_day.to_string());
    metadata.insert("nudge_type".to_string(), nudge_type.to_string());
    LogRecord {
        event_seq: 0,
        user_id: user_id.to_string(),
        ts,
        sync_ts: ts,
        event_type,
        category: NUDGE_CATEGORY.to_string(),
        session_id,
        online: true,
        metadata,
    }
}

/// Resolves one nudge decision into its outcome and log records.
///
/// A user who has blocked nudges gets `blocked` (still delivered). An
/// unreachable user gets `undelivered`. Otherwise the nudge is opened with
/// probability `min(1, p_open_base·σ)`, else blocked with probability `p_block`,
/// else discarded. Records carry `event_seq = 0` until numbered.
pub fn resolve_nudge<R: Rng + ?Sized>(
    user: &UserModel,
    nudge_type: &str,
    decision_day: u32,
    delivery: &Delivery,
    sigma: f64,
    params: &NudgeParams,
    rng: &mut R,
) -> (NudgeOutcome, Vec<LogRecord>) {
    let ts = delivery.ts();
    let session_id = match delivery {
        Delivery::Session { session_id, .. } => Some(session_id.clone()),
        _ => None,
    };
    let rec = |event_type| nudge_record(&user.user_id, event_type, ts, session_id.clone(), nudge_type, decision_day);
    let outcome = |outcome, delivered| NudgeOutcome {
        decision_day,
        nudge_type: nudge_type.to_string(),
        outcome,
        delivered,
    };

    if user.blocked {
        let records = if params.count_blocked_nudges {
            vec![rec(EventType::NudgeDelivered), rec(EventType::NudgeBlocked)]
        } else {
            vec![rec(EventType::NudgeBlocked)]
        };
        return (outcome(Outcome::Blocked, true), records);
    }
    if let Delivery::Unreachable { .. } = delivery {
        return (outcome(Outcome::Undelivered, false), vec![rec(EventType::NudgeUndelivered)]);
    }

    let reaction = if rng.random::<f64>() < params.p_open(sigma) {
        Outcome::Opened
    } else if rng.random::<f64>() < params.p_block {
        Outcome::Blocked
    } else {
        Outcome::Discarded
    };
    let reaction_type = match reaction {
        Outcome::Opened => EventType::NudgeOpened,
        Outcome::Blocked => EventType::NudgeBlocked,
        _ => EventType::NudgeDiscarded,
    };
    (
        outcome(reaction, true),
        vec![rec(EventType::NudgeDelivered), rec(reaction_type)],
    )
}

/// Session brackets plus one `app_action` per event, in event order.
/// Numbering and sync times are applied later.
pub fn action_records(events: &[ActionEvent]) -> Vec<LogRecord> {
    let mut out = Vec::with_capacity(events.len() + events.len() / 2);
    let mut i = 0;
    while i < events.len() {
        let first = &events[i];
        let mut j = i;
        while j < events.len() && events[j].session_id == first.session_id && events[j].user_id == first.user_id {
            j += 1;
        }
        let session = &events[i..j];
        let last = &session[session.len() - 1];
        let bracket = |event_type, ts, metadata| LogRecord {
            event_seq: 0,
            user_id: first.user_id.clone(),
            ts,
            sync_ts: ts,
            event_type,
            category: SESSION_CATEGORY.to_string(),
            session_id: Some(first.session_id.clone()),
            online: first.online,
            metadata,
        };
        out.push(bracket(EventType::SessionStart, first.timestamp, BTreeMap::new()));
        for ev in session {
            let mut metadata: BTreeMap<String, String> = ev
                .metadata
                .iter()
                .filter(|(k, _)| k.as_str() != "category")
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            metadata.insert("action".to_string(), ev.state_name.clone());
            out.push(LogRecord {
                event_seq: 0,
                user_id: ev.user_id.clone(),
                ts: ev.timestamp,
                sync_ts: ev.timestamp,
                event_type: EventType::AppAction,
                category: ev
                    .metadata
                    .get("category")
                    .cloned()
                    .unwrap_or_else(|| crate::markov_engine::DEFAULT_CATEGORY.to_string()),
                session_id: Some(ev.session_id.clone()),
                online: ev.online,
                metadata,
            });
        }
        let mut end_meta = BTreeMap::new();
        end_meta.insert("action_count".to_string(), session.len().to_string());
        out.push(bracket(EventType::SessionEnd, last.timestamp, end_meta));
        i = j;
    }
    out
}

/// Interleaves nudge records of one user into that user's ordered action records.
///
/// A nudge goes after every action record with an earlier timestamp; at equal
/// timestamps it follows a `session_start` and precedes other action records,
/// except `nudge_undelivered`, which follows everything at its instant.
pub fn merge_nudges(actions: Vec<LogRecord>, mut nudges: Vec<LogRecord>) -> Vec<LogRecord> {
    nudges.sort_by_key(|r| (r.ts, r.event_type == EventType::NudgeUndelivered));
    let mut out = Vec::with_capacity(actions.len() + nudges.len());
    let mut nudges = nudges.into_iter().peekable();
    for action in actions {
        while let Some(n) = nudges.peek() {
            let before = n.ts < action.ts
                || (n.ts == action.ts
                    && action.event_type != EventType::SessionStart
                    && n.event_type != EventType::NudgeUndelivered);
            if !before {
                break;
            }
            out.push(nudges.next().expect("peeked"));
        }
        out.push(action);
    }
    out.extend(nudges);
    out
}

/// Numbers records of a single user in their current order.
pub fn number_records(records: &mut [LogRecord], next_seq: &mut u64) {
    for r in records {
        r.event_seq = *next_seq;
        *next_seq += 1;
    }
}

/// Applies the online/offline sync rule to records of any number of users.
///
/// Online records sync at their own `ts`. Offline records sync at the start
/// of the same user's next online session (later `event_seq`), or at `flush`.
pub fn apply_sync_rules(records: &mut [LogRecord], flush: Timestamp) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        (&records[a].user_id, records[a].event_seq).cmp(&(&records[b].user_id, records[b].event_seq))
    });
    let mut next_online: Option<Timestamp> = None;
    let mut current_user: Option<String> = None;
    for &i in order.iter().rev() {
        if current_user.as_deref() != Some(records[i].user_id.as_str()) {
            current_user = Some(records[i].user_id.clone());
            next_online = None;
        }
        let r = &mut records[i];
        r.sync_ts = if r.online {
            r.ts
        } else {
            next_online.unwrap_or(flush).max(r.ts)
        };
        if r.online && r.event_type == EventType::SessionStart {
            next_online = Some(r.ts);
        }
    }
}

/// Action records for time-ordered events, numbered per user from 0, with sync rules applied.
pub fn emit_action_logs(events: &[ActionEvent], flush: Timestamp) -> Vec<LogRecord> {
    let mut records = action_records(events);
    let mut seqs: BTreeMap<String, u64> = BTreeMap::new();
    for r in &mut records {
        let seq = seqs.entry(r.user_id.clone()).or_insert(0);
        r.event_seq = *seq;
        *seq += 1;
    }
    apply_sync_rules(&mut records, flush);
    records
}

/// Sorts a log stream into the canonical `(day, user_id, event_seq)` order.
pub fn canonical_order(records: &mut [LogRecord]) {
    records.sort_by(|a, b| (a.day(), &a.user_id, a.event_seq).cmp(&(b.day(), &b.user_id, b.event_seq)));
}

/// Canonical JSON Lines bytes: one record per line, fixed key order.
pub fn serialize(records: &[LogRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * 256);
    for r in records {
        serde_json::to_writer(&mut out, r).expect("log record serializes");
        out.push(b'\n');
    }
    out
}

/// Parses JSON Lines bytes; errors carry the 1-based line number and field path.
pub fn parse(bytes: &[u8]) -> Result<Vec<LogRecord>> {
    parse_jsonl(bytes)
}

pub(crate) fn parse_jsonl<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut out = Vec::new();
    if bytes.is_empty() {
        return Ok(out);
    }
    let body = bytes.strip_suffix(b"\n").ok_or_else(|| Error::LogParse {
        line: bytes.split(|&b| b == b'\n').count(),
        field: "<line>".into(),
        message: "missing trailing newline".into(),
    })?;
    for (idx, line) in body.split(|&b| b == b'\n').enumerate() {
        let line_no = idx + 1;
        let de = &mut serde_json::Deserializer::from_slice(line);
        let value = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::LogParse {
                line: line_no,
                field: if path == "." { "<record>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn event(user: &str, session: &str, ts: i64, online: bool) -> ActionEvent {
        let mut metadata = BTreeMap::new();
        metadata.insert("category".into(), "capacity".into());
        ActionEvent {
            user_id: user.into(),
            day: Timestamp(ts).sim_day() as u32,
            timestamp: Timestamp(ts),
            session_id: session.into(),
            state_name: "capacity/quiz".into(),
            online,
            metadata,
        }
    }

    #[test]
    fn empty_in_empty_out() {
        assert!(emit_action_logs(&[], Timestamp(0)).is_empty());
        assert!(serialize(&[]).is_empty());
        assert!(parse(b"").unwrap().is_empty());
    }

    #[test]
    fn one_online_session_two_actions() {
        let t0 = Timestamp::at_hour(0, 9.0).0;
        let events = [event("u1", "u1-0-0", t0, true), event("u1", "u1-0-0", t0 + 5000, true)];
        let recs = emit_action_logs(&events, Timestamp::day_start(1));
        let kinds: Vec<_> = recs.iter().map(|r| r.event_type).collect();
        assert_eq!(
            kinds,
            [EventType::SessionStart, EventType::AppAction, EventType::AppAction, EventType::SessionEnd]
        );
        assert!(recs.iter().all(|r| r.sync_ts == r.ts));
        assert_eq!(recs.iter().map(|r| r.event_seq).collect::<Vec<_>>(), [0, 1, 2, 3]);
        assert_eq!(recs[1].metadata.get("action").map(String::as_str), Some("capacity/quiz"));
        assert_eq!(recs[1].category, "capacity");
        assert_eq!(recs[3].ts, Timestamp(t0 + 5000));
    }

    #[test]
    fn offline_records_sync_at_next_online_session() {
        let d0 = Timestamp::at_hour(0, 10.0).0;
        let d1 = Timestamp::at_hour(1, 8.0).0;
        let events = [
            event("u1", "u1-0-0", d0, false),
            event("u1", "u1-0-0", d0 + 1000, false),
            event("u1", "u1-1-0", d1, true),
        ];
        let recs = emit_action_logs(&events, Timestamp::day_start(2));
        for r in &recs {
            if r.online {
                assert_eq!(r.sync_ts, r.ts);
            } else {
                assert_eq!(r.sync_ts, Timestamp(d1));
            }
        }
        assert_eq!(recs.iter().filter(|r| !r.online).count(), 4);
    }

    #[test]
    fn trailing_offline_records_flush() {
        let d0 = Timestamp::at_hour(0, 10.0).0;
        let flush = Timestamp::day_start(1);
        let recs = emit_action_logs(&[event("u1", "s", d0, false)], flush);
        assert!(recs.iter().all(|r| r.sync_ts == flush));
    }

    #[test]
    fn blocked_user_gets_blocked_outcome() {
        let mut user = UserModel::with_weights("u1", 1.0, 0.0, 0.0);
        user.blocked = true;
        let delivery = Delivery::Direct { ts: Timestamp::at_hour(3, 8.0) };
        let (outcome, recs) = resolve_nudge(&user, "nudge", 2, &delivery, 1.0, &NudgeParams::default(), &mut seeded(0));
        assert_eq!(outcome.outcome, Outcome::Blocked);
        assert!(outcome.delivered);
        let kinds: Vec<_> = recs.iter().map(|r| r.event_type).collect();
        assert_eq!(kinds, [EventType::NudgeDelivered, EventType::NudgeBlocked]);

        let params = NudgeParams { count_blocked_nudges: false, ..NudgeParams::default() };
        let (_, recs) = resolve_nudge(&user, "nudge", 2, &delivery, 1.0, &params, &mut seeded(0));
        assert_eq!(recs.iter().map(|r| r.event_type).collect::<Vec<_>>(), [EventType::NudgeBlocked]);
    }

    #[test]
    fn unreachable_user_is_undelivered() {
        let user = UserModel::with_weights("u1", 1.0, 0.0, 0.0);
        let delivery = Delivery::Unreachable { ts: Timestamp::at_hour(5, 19.0) };
        let (outcome, recs) = resolve_nudge(&user, "nudge", 0, &delivery, 1.0, &NudgeParams::default(), &mut seeded(0));
        assert_eq!(outcome.outcome, Outcome::Undelivered);
        assert!(!outcome.delivered);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].event_type, EventType::NudgeUndelivered);
    }

    #[test]
    fn delivered_always_precedes_reaction() {
        let user = UserModel::with_weights("u1", 1.0, 0.0, 0.0);
        let delivery = Delivery::Session { ts: Timestamp::at_hour(1, 9.0), session_id: "u1-1-0".into() };
        let mut rng = seeded(9);
        for _ in 0..200 {
            let (outcome, recs) = resolve_nudge(&user, "nudge", 0, &delivery, 1.0, &NudgeParams::default(), &mut rng);
            assert!(outcome.delivered);
            assert_eq!(recs[0].event_type, EventType::NudgeDelivered);
            assert_eq!(recs.len(), 2);
            assert_eq!(recs[1].session_id.as_deref(), Some("u1-1-0"));
        }
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        let p = NudgeParams::default();
        for sigma in [0.05, 0.5, 1.0, 2.0, 3.3, 20.0] {
            let total: f64 = p.outcome_probabilities(sigma).iter().sum();
            assert!((total - 1.0).abs() < 1e-15, "sigma {sigma}: {total}");
        }
    }

    #[test]
    fn nudges_merge_after_session_start() {
        let t = Timestamp::at_hour(0, 9.0).0;
        let actions = action_records(&[event("u1", "s0", t, true), event("u1", "s0", t + 10, true)]);
        let nudges = vec![
            nudge_record("u1", EventType::NudgeUndelivered, Timestamp(t + 10), None, "nudge", 0),
            nudge_record("u1", EventType::NudgeDelivered, Timestamp(t), Some("s0".into()), "nudge", 0),
        ];
        let merged = merge_nudges(actions, nudges);
        let kinds: Vec<_> = merged.iter().map(|r| r.event_type).collect();
        assert_eq!(
            kinds,
            [
                EventType::SessionStart,
                EventType::NudgeDelivered,
                EventType::AppAction,
                EventType::AppAction,
                EventType::SessionEnd,
                EventType::NudgeUndelivered,
            ]
        );
    }

    #[test]
    fn empty_metadata_is_written_literally() {
        let rec = nudge_record("u1", EventType::SessionStart, Timestamp::day_start(0), None, "x", 0);
        let rec = LogRecord { metadata: BTreeMap::new(), ..rec };
        let line = String::from_utf8(serialize(&[rec])).unwrap();
        assert!(line.contains("\"metadata\":{}"), "{line}");
        assert!(line.contains("\"session_id\":null"), "{line}");
        assert!(line.starts_with("{\"event_seq\":0,\"user_id\":\"u1\",\"ts\":\"2024-01-01T00:00:00.000Z\""), "{line}");
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let t = Timestamp::at_hour(0, 9.0).0;
        let mut bytes = serialize(&emit_action_logs(&[event("u1", "s", t, true)], Timestamp(0)));
        bytes.extend_from_slice(b"{\"event_seq\":\"x\"}\n");
        match parse(&bytes).unwrap_err() {
            Error::LogParse { line, field, .. } => {
                assert_eq!(line, 4);
                assert_eq!(field, "event_seq");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse(b"{}").unwrap_err(), Error::LogParse { .. }));
    }
}
