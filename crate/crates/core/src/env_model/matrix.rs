//! Row-stochastic transition matrices over the app-state alphabet.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const SESSION_START: &str = "session_start";
pub const OUT_OF_APP: &str = "out_of_app";

/// Tolerance for row sums and the initial distribution.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Markov transition matrix with a distinguished absorbing `out_of_app` state.
///
/// `rows[from][to]` is the probability of moving from state `from` to state `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionMatrix {
    pub states: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    #[serde(rename = "initial")]
    pub initial_distribution: Vec<f64>,
}

impl TransitionMatrix {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    /// Index of the absorbing state. Only meaningful on a validated matrix.
    pub fn out_index(&self) -> usize {
        self.index_of(OUT_OF_APP)
            .expect("validated matrix contains out_of_app")
    }

    /// Checks every invariant and reports each violation.
    pub fn validate(&self) -> ValidationReport {
        validate_matrix(self)
    }
}

/// One violated matrix invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixIssue {
    MissingState(&'static str),
    DuplicateState(String),
    RowCount { expected: usize, found: usize },
    RowLength { row: usize, expected: usize, found: usize },
    NonFinite { row: usize, col: usize },
    NegativeEntry { row: usize, col: usize, value: f64 },
    EntryAboveOne { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
    NotAbsorbing { row: usize },
    InitialLength { expected: usize, found: usize },
    InitialEntry { index: usize, value: f64 },
    InitialSum { sum: f64 },
    InitialMassOnOut { mass: f64 },
}

impl fmt::Display for MatrixIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixIssue::MissingState(s) => write!(f, "missing required state {s:?}"),
            MatrixIssue::DuplicateState(s) => write!(f, "duplicate state {s:?}"),
            MatrixIssue::RowCount { expected, found } => {
                write!(f, "expected {expected} rows, found {found}")
            }
            MatrixIssue::RowLength {
                row,
                expected,
                found,
            } => write!(f, "row {row} has {found} entries, expected {expected}"),
            MatrixIssue::NonFinite { row, col } => write!(f, "non-finite entry at ({row},{col})"),
            MatrixIssue::NegativeEntry { row, col, value } => {
                write!(f, "negative entry at ({row},{col}): {value}")
            }
            MatrixIssue::EntryAboveOne { row, col, value } => {
                write!(f, "entry above 1 at ({row},{col}): {value}")
            }
            MatrixIssue::RowSum { row, sum } => write!(f, "row {row}: row sum {sum} ≠ 1"),
            MatrixIssue::NotAbsorbing { row } => write!(
                f,
                "out_of_app row {row} is not absorbing (must be the unit vector on itself)"
            ),
            MatrixIssue::InitialLength { expected, found } => write!(
                f,
                "initial distribution has {found} entries, expected {expected}"
            ),
            MatrixIssue::InitialEntry { index, value } => {
                write!(f, "initial distribution entry {index} out of [0,1]: {value}")
            }
            MatrixIssue::InitialSum { sum } => {
                write!(f, "initial distribution sum {sum} ≠ 1")
            }
            MatrixIssue::InitialMassOnOut { mass } => {
                write!(f, "initial distribution places mass {mass} on out_of_app")
            }
        }
    }
}

/// Result of [`validate_matrix`]; empty iff the matrix is valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<MatrixIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.issues.iter().map(ToString::to_string).collect()
    }
}

fn check_probability(row: usize, col: usize, value: f64, issues: &mut Vec<MatrixIssue>) {
    if !value.is_finite() {
        issues.push(MatrixIssue::NonFinite { row, col });
    } else if value < 0.0 {
        issues.push(MatrixIssue::NegativeEntry { row, col, value });
    } else if value > 1.0 {
        issues.push(MatrixIssue::EntryAboveOne { row, col, value });
    }
}

pub fn validate_matrix(m: &TransitionMatrix) -> ValidationReport {
    let mut issues = Vec::new();
    let n = m.states.len();

    for required in [SESSION_START, OUT_OF_APP] {
        if m.index_of(required).is_none() {
            issues.push(MatrixIssue::MissingState(required));
        }
    }
    for (i, s) in m.states.iter().enumerate() {
        if m.states[..i].contains(s) {
            issues.push(MatrixIssue::DuplicateState(s.clone()));
        }
    }

    if m.rows.len() != n {
        issues.push(MatrixIssue::RowCount {
            expected: n,
            found: m.rows.len(),
        });
    }
    let out = m.index_of(OUT_OF_APP);
    for (i, row) in m.rows.iter().enumerate() {
        if row.len() != n {
            issues.push(MatrixIssue::RowLength {
                row: i,
                expected: n,
                found: row.len(),
            });
            continue;
        }
        for (j, &p) in row.iter().enumerate() {
            check_probability(i, j, p, &mut issues);
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || sum.is_nan() {
            issues.push(MatrixIssue::RowSum { row: i, sum });
        }
        if Some(i) == out {
            let absorbing = row
                .iter()
                .enumerate()
                .all(|(j, &p)| if j == i { p == 1.0 } else { p == 0.0 });
            if !absorbing {
                issues.push(MatrixIssue::NotAbsorbing { row: i });
            }
        }
    }

    let init = &m.initial_distribution;
    if init.len() != n {
        issues.push(MatrixIssue::InitialLength {
            expected: n,
            found: init.len(),
        });
    } else {
        for (i, &p) in init.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                issues.push(MatrixIssue::InitialEntry { index: i, value: p });
            }
        }
        let sum: f64 = init.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || sum.is_nan() {
            issues.push(MatrixIssue::InitialSum { sum });
        }
        if let Some(o) = out {
            if init[o] != 0.0 {
                issues.push(MatrixIssue::InitialMassOnOut { mass: init[o] });
            }
        }
    }

    ValidationReport { issues }
}
