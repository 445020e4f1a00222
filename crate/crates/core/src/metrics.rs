//! Per-(user, day) metrics computed from logs, kept in an append-only journal.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logkit::{self, EventType, LogRecord};

/// Names that configs may use as reward or context features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricName {
    DailyActionCount,
    SessionCount,
    Active,
    NudgesDelivered,
    NudgesOpened,
    OpenRate,
    OnlineFraction,
    ActionsLastD,
    SessionsLastD,
    NudgesLastD,
    OpenRateLastD,
    DaysSinceSignup,
}

impl MetricName {
    pub const ALL: [MetricName; 12] = [
        MetricName::DailyActionCount,
        MetricName::SessionCount,
        MetricName::Active,
        MetricName::NudgesDelivered,
        MetricName::NudgesOpened,
        MetricName::OpenRate,
        MetricName::OnlineFraction,
        MetricName::ActionsLastD,
        MetricName::SessionsLastD,
        MetricName::NudgesLastD,
        MetricName::OpenRateLastD,
        MetricName::DaysSinceSignup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::DailyActionCount => "daily_action_count",
            MetricName::SessionCount => "session_count",
            MetricName::Active => "active",
            MetricName::NudgesDelivered => "nudges_delivered",
            MetricName::NudgesOpened => "nudges_opened",
            MetricName::OpenRate => "open_rate",
            MetricName::OnlineFraction => "online_fraction",
            MetricName::ActionsLastD => "actions_last_d",
            MetricName::SessionsLastD => "sessions_last_d",
            MetricName::NudgesLastD => "nudges_last_d",
            MetricName::OpenRateLastD => "open_rate_last_d",
            MetricName::DaysSinceSignup => "days_since_signup",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == name)
    }

    pub fn is_windowed(self) -> bool {
        matches!(
            self,
            MetricName::ActionsLastD
                | MetricName::SessionsLastD
                | MetricName::NudgesLastD
                | MetricName::OpenRateLastD
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub user_id: String,
    pub day: u32,
    pub daily_action_count: u64,
    pub session_count: u64,
    pub active: bool,
    pub nudges_delivered: u64,
    pub nudges_opened: u64,
    pub open_rate: f64,
    pub online_fraction: f64,
}

impl MetricRow {
    fn empty(user_id: &str, day: u32) -> Self {
        MetricRow {
            user_id: user_id.to_string(),
            day,
            daily_action_count: 0,
            session_count: 0,
            active: false,
            nudges_delivered: 0,
            nudges_opened: 0,
            open_rate: 0.0,
            online_fraction: 0.0,
        }
    }

    pub fn daily_value(&self, name: MetricName) -> Option<f64> {
        Some(match name {
            MetricName::DailyActionCount => self.daily_action_count as f64,
            MetricName::SessionCount => self.session_count as f64,
            MetricName::Active => f64::from(u8::from(self.active)),
            MetricName::NudgesDelivered => self.nudges_delivered as f64,
            MetricName::NudgesOpened => self.nudges_opened as f64,
            MetricName::OpenRate => self.open_rate,
            MetricName::OnlineFraction => self.online_fraction,
            _ => return None,
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One row per (user, day) present in `records`, ordered by (day, user_id).
///
/// Usually called with the logs of a single day.
pub fn compute_daily_metrics(records: &[LogRecord]) -> Vec<MetricRow> {
    let mut rows: BTreeMap<(u32, &str), (MetricRow, u64)> = BTreeMap::new();
    for r in records {
        let day = r.day().max(0) as u32;
        let (row, online_sessions) = rows
            .entry((day, r.user_id.as_str()))
            .or_insert_with(|| (MetricRow::empty(&r.user_id, day), 0));
        match r.event_type {
            EventType::AppAction => row.daily_action_count += 1,
            EventType::SessionStart => {
                row.session_count += 1;
                if r.online {
                    *online_sessions += 1;
                }
            }
            EventType::NudgeDelivered => row.nudges_delivered += 1,
            EventType::NudgeOpened => row.nudges_opened += 1,
            _ => {}
        }
    }
    rows.into_values()
        .map(|(mut row, online_sessions)| {
            row.active = row.daily_action_count >= 1;
            row.open_rate = ratio(row.nudges_opened, row.nudges_delivered);
            row.online_fraction = ratio(online_sessions, row.session_count);
            row
        })
        .collect()
}

/// Windowed variants over `(day − d, day]`; missing days count as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowValues {
    pub actions_last_d: u64,
    pub sessions_last_d: u64,
    pub nudges_last_d: u64,
    pub opened_last_d: u64,
    pub open_rate_last_d: f64,
}

impl WindowValues {
    pub fn value(&self, name: MetricName) -> Option<f64> {
        Some(match name {
            MetricName::ActionsLastD => self.actions_last_d as f64,
            MetricName::SessionsLastD => self.sessions_last_d as f64,
            MetricName::NudgesLastD => self.nudges_last_d as f64,
            MetricName::OpenRateLastD => self.open_rate_last_d,
            _ => return None,
        })
    }
}

/// Metric store: an in-memory index, optionally backed by a JSON Lines journal.
///
/// Writes are last-write-wins per (user_id, day). Upserting a row equal to
/// the stored one is a no-op, so replays leave the journal unchanged.
#[derive(Debug, Default)]
pub struct MetricStore {
    journal: Option<(PathBuf, BufWriter<File>)>,
    rows: BTreeMap<String, BTreeMap<u32, MetricRow>>,
}

impl MetricStore {
    pub fn in_memory() -> Self {
        MetricStore::default()
    }

    /// Opens (creating if needed) a journal and rebuilds the index from it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = MetricStore::default();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(&path, e))?;
            for row in logkit::parse_jsonl::<MetricRow>(&bytes)? {
                store.insert(row);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        store.journal = Some((path, BufWriter::new(file)));
        Ok(store)
    }

    fn insert(&mut self, row: MetricRow) {
        self.rows
            .entry(row.user_id.clone())
            .or_default()
            .insert(row.day, row);
    }

    pub fn upsert(&mut self, rows: &[MetricRow]) -> Result<()> {
        for row in rows {
            if self.get(&row.user_id, row.day) == Some(row) {
                continue;
            }
            if let Some((path, writer)) = &mut self.journal {
                serde_json::to_writer(&mut *writer, row)
                    .map_err(|e| Error::io(path.clone(), e.into()))?;
                writer.write_all(b"\n").map_err(|e| Error::io(path.clone(), e))?;
            }
            self.insert(row.clone());
        }
        Ok(())
    }

    /// Write barrier: flushes buffered journal lines to disk.
    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, writer)) = &mut self.journal {
            writer.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }

    pub fn get(&self, user_id: &str, day: u32) -> Option<&MetricRow> {
        self.rows.get(user_id)?.get(&day)
    }

    /// All rows ordered by (user_id, day).
    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.values().flat_map(|days| days.values())
    }

    pub fn len(&self) -> usize {
        self.rows.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn query_window(&self, user_id: &str, day: u32, d: u32) -> WindowValues {
        let mut w = WindowValues::default();
        let Some(days) = self.rows.get(user_id) else {
            return w;
        };
        let lo = (day + 1).saturating_sub(d);
        for row in days.range(lo..=day).map(|(_, r)| r) {
            w.actions_last_d += row.daily_action_count;
            w.sessions_last_d += row.session_count;
            w.nudges_last_d += row.nudges_delivered;
            w.opened_last_d += row.nudges_opened;
        }
        w.open_rate_last_d = ratio(w.opened_last_d, w.nudges_last_d);
        w
    }

    /// Value of any catalog metric for (user, day). `days_since_signup` needs `signup_day`.
    pub fn metric_value(&self, name: MetricName, user_id: &str, day: u32, d: u32, signup_day: u32) -> f64 {
        if name == MetricName::DaysSinceSignup {
            return f64::from(day.saturating_sub(signup_day));
        }
        if name.is_windowed() {
            return self
                .query_window(user_id, day, d)
                .value(name)
                .expect("windowed metric");
        }
        self.get(user_id, day)
            .and_then(|r| r.daily_value(name))
            .unwrap_or(0.0)
    }
}

pub const CSV_HEADER: &str = "user_id,day,daily_action_count,session_count,active,nudges_delivered,nudges_opened,open_rate,online_fraction";

/// Rows as CSV with the fixed column order of [`CSV_HEADER`].
pub fn to_csv<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.user_id,
            r.day,
            r.daily_action_count,
            r.session_count,
            r.active,
            r.nudges_delivered,
            r.nudges_opened,
            r.open_rate,
            r.online_fraction
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Timestamp;

    fn rec(user: &str, event_type: EventType, hour: f64, online: bool) -> LogRecord {
        let ts = Timestamp::at_hour(0, hour);
        LogRecord {
            event_seq: 0,
            user_id: user.into(),
            ts,
            sync_ts: ts,
            event_type,
            category: "x".into(),
            session_id: None,
            online,
            metadata: BTreeMap::new(),
        }
    }

    fn row(user: &str, day: u32, actions: u64, delivered: u64) -> MetricRow {
        MetricRow {
            daily_action_count: actions,
            active: actions > 0,
            session_count: u64::from(actions > 0),
            nudges_delivered: delivered,
            ..MetricRow::empty(user, day)
        }
    }

    #[test]
    fn catalog_round_trips_names() {
        for m in MetricName::ALL {
            assert_eq!(MetricName::parse(m.as_str()), Some(m));
        }
        assert_eq!(MetricName::parse("nope"), None);
    }

    #[test]
    fn no_logs_no_rows() {
        assert!(compute_daily_metrics(&[]).is_empty());
    }

    #[test]
    fn fixture_day() {
        use EventType::*;
        let logs = vec![
            rec("u1", SessionStart, 9.0, true),
            rec("u1", NudgeDelivered, 9.0, true),
            rec("u1", NudgeOpened, 9.0, true),
            rec("u1", AppAction, 9.0, true),
            rec("u1", AppAction, 9.1, true),
            rec("u1", AppAction, 9.2, true),
            rec("u1", SessionEnd, 9.2, true),
        ];
        let rows = compute_daily_metrics(&logs);
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!(
            (r.daily_action_count, r.session_count, r.active, r.nudges_delivered, r.nudges_opened),
            (3, 1, true, 1, 1)
        );
        assert_eq!(r.open_rate, 1.0);
        assert_eq!(r.online_fraction, 1.0);
    }

    #[test]
    fn zero_deliveries_give_zero_open_rate() {
        let rows = compute_daily_metrics(&[rec("u1", EventType::SessionStart, 9.0, false)]);
        assert_eq!(rows[0].open_rate, 0.0);
        assert_eq!(rows[0].online_fraction, 0.0);
        assert!(!rows[0].active);
    }

    #[test]
    fn empty_store_window_is_zero() {
        assert_eq!(MetricStore::in_memory().query_window("u1", 8, 5), WindowValues::default());
    }

    #[test]
    fn window_is_half_open() {
        let mut store = MetricStore::in_memory();
        store
            .upsert(&[row("u1", 3, 100, 1), row("u1", 4, 4, 1), row("u1", 7, 3, 1), row("u1", 9, 50, 1)])
            .unwrap();
        let w = store.query_window("u1", 8, 5);
        assert_eq!(w.actions_last_d, 7);
        assert_eq!(w.nudges_last_d, 2);
        assert_eq!(store.query_window("u1", 0, 1), WindowValues::default());
        assert_eq!(store.query_window("u1", 3, 1).actions_last_d, 100);
        assert_eq!(store.query_window("u1", 100, 200).actions_last_d, 157);
    }

    #[test]
    fn upsert_is_last_write_wins_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut store = MetricStore::open(&path).unwrap();
        store.upsert(&[row("u1", 0, 3, 0)]).unwrap();
        store.flush().unwrap();
        let once = std::fs::read(&path).unwrap();
        store.upsert(&[row("u1", 0, 3, 0)]).unwrap();
        store.flush().unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), once);

        store.upsert(&[row("u1", 0, 5, 0)]).unwrap();
        store.flush().unwrap();
        assert_eq!(store.get("u1", 0).unwrap().daily_action_count, 5);
        drop(store);

        let reopened = MetricStore::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.get("u1", 0).unwrap().daily_action_count, 5);
    }

    #[test]
    fn open_reports_path_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("metrics.jsonl");
        let err = MetricStore::open(&path).unwrap_err().to_string();
        assert!(err.contains("metrics.jsonl"), "{err}");
    }

    #[test]
    fn metric_values() {
        let mut store = MetricStore::in_memory();
        store.upsert(&[row("u1", 2, 5, 1)]).unwrap();
        assert_eq!(store.metric_value(MetricName::DailyActionCount, "u1", 2, 5, 0), 5.0);
        assert_eq!(store.metric_value(MetricName::Active, "u1", 2, 5, 0), 1.0);
        assert_eq!(store.metric_value(MetricName::DailyActionCount, "u1", 3, 5, 0), 0.0);
        assert_eq!(store.metric_value(MetricName::NudgesLastD, "u1", 3, 5, 0), 1.0);
        assert_eq!(store.metric_value(MetricName::DaysSinceSignup, "u1", 3, 5, 1), 2.0);
    }
}
