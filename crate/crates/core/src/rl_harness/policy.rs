//! Bandit policies: fixed schedules, ε-greedy, Beta-Bernoulli Thompson sampling and LinUCB.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{binarize, ContextVector, Decision};
use crate::error::{Error, Result};

fn default_epsilon() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

/// Policy choice plus hyperparameters, as written in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum PolicySpec {
    NeverNudge,
    AlwaysNudge,
    EveryKDays {
        k: u32,
    },
    EpsilonGreedy {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    ThompsonBernoulli {
        #[serde(default = "one")]
        prior_alpha: f64,
        #[serde(default = "one")]
        prior_beta: f64,
    },
    LinUcb {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "one")]
        ridge: f64,
    },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::ThompsonBernoulli {
            prior_alpha: 1.0,
            prior_beta: 1.0,
        }
    }
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::NeverNudge => "never_nudge".into(),
            PolicySpec::AlwaysNudge => "always_nudge".into(),
            PolicySpec::EveryKDays { k } => format!("every_{k}_days"),
            PolicySpec::EpsilonGreedy { .. } => "epsilon_greedy".into(),
            PolicySpec::ThompsonBernoulli { .. } => "thompson_bernoulli".into(),
            PolicySpec::LinUcb { .. } => "lin_ucb".into(),
        }
    }

    pub(crate) fn check(&self, path: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(path, msg));
        match *self {
            PolicySpec::EveryKDays { k: 0 } => bad("k must be at least 1".into()),
            PolicySpec::EpsilonGreedy { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                bad(format!("epsilon out of [0,1]: {epsilon}"))
            }
            PolicySpec::ThompsonBernoulli {
                prior_alpha,
                prior_beta,
            } if !(prior_alpha > 0.0 && prior_beta > 0.0 && prior_alpha.is_finite() && prior_beta.is_finite()) => {
                bad(format!("Beta prior must be positive, got ({prior_alpha}, {prior_beta})"))
            }
            PolicySpec::LinUcb { alpha, ridge }
                if !(alpha >= 0.0 && alpha.is_finite() && ridge > 0.0 && ridge.is_finite()) =>
            {
                bad(format!("need alpha >= 0 and ridge > 0, got ({alpha}, {ridge})"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-arm learning state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmStats {
    Fixed,
    Means { counts: Vec<u64>, estimates: Vec<f64> },
    Beta { alpha: Vec<f64>, beta: Vec<f64> },
    /// Ridge statistics per arm: `design` is the row-major `dim×dim` matrix
    /// `ridge·I + Σ x xᵀ`, `response` is `Σ r·x`. Vectors include a trailing
    /// intercept term.
    Linear {
        dim: usize,
        design: Vec<Vec<f64>>,
        response: Vec<Vec<f64>>,
    },
}

/// A policy's full state; serializes to JSON losslessly for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub spec: PolicySpec,
    pub actions: Vec<String>,
    pub stats: ArmStats,
}

fn with_intercept(values: &[f64]) -> DVector<f64> {
    DVector::from_iterator(values.len() + 1, values.iter().copied().chain(std::iter::once(1.0)))
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

impl PolicyState {
    /// Fresh state for `actions` (index 0 is `no_nudge`) and contexts of `feature_dim` values.
    pub fn new(spec: PolicySpec, actions: Vec<String>, feature_dim: usize) -> Self {
        let k = actions.len();
        let stats = match spec {
            PolicySpec::NeverNudge | PolicySpec::AlwaysNudge | PolicySpec::EveryKDays { .. } => ArmStats::Fixed,
            PolicySpec::EpsilonGreedy { .. } => ArmStats::Means {
                counts: vec![0; k],
                estimates: vec![0.0; k],
            },
            PolicySpec::ThompsonBernoulli {
                prior_alpha,
                prior_beta,
            } => ArmStats::Beta {
                alpha: vec![prior_alpha; k],
                beta: vec![prior_beta; k],
            },
            PolicySpec::LinUcb { ridge, .. } => {
                let dim = feature_dim + 1;
                let identity = DMatrix::<f64>::identity(dim, dim) * ridge;
                ArmStats::Linear {
                    dim,
                    design: vec![identity.transpose().as_slice().to_vec(); k],
                    response: vec![vec![0.0; dim]; k],
                }
            }
        };
        PolicyState { spec, actions, stats }
    }

    pub fn name(&self) -> String {
        self.spec.name()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Ridge estimate and inverse design matrix of one LinUCB arm.
    fn linear_arm(dim: usize, design: &[f64], response: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(dim, dim, design);
        let inv = a
            .cholesky()
            .expect("ridge-initialized design matrix is positive definite")
            .inverse();
        let theta = &inv * DVector::from_column_slice(response);
        (theta, inv)
    }

    /// Current LinUCB weight estimate for `arm` (features then intercept).
    pub fn linear_estimate(&self, arm: usize) -> Option<Vec<f64>> {
        match &self.stats {
            ArmStats::Linear { dim, design, response } => {
                Some(Self::linear_arm(*dim, &design[arm], &response[arm]).0.iter().copied().collect())
            }
            _ => None,
        }
    }

    fn choose_index<R: Rng + ?Sized>(&self, ctx: &ContextVector, linear: &[(DVector<f64>, DMatrix<f64>)], rng: &mut R) -> usize {
        let k = self.actions.len();
        match (&self.spec, &self.stats) {
            (PolicySpec::NeverNudge, _) => 0,
            (PolicySpec::AlwaysNudge, _) => 1,
            (PolicySpec::EveryKDays { k: every }, _) => usize::from(ctx.day.is_multiple_of(*every)),
            (PolicySpec::EpsilonGreedy { epsilon }, ArmStats::Means { estimates, .. }) => {
                if rng.random::<f64>() < *epsilon {
                    rng.random_range(0..k)
                } else {
                    argmax(estimates.iter().copied())
                }
            }
            (PolicySpec::ThompsonBernoulli { .. }, ArmStats::Beta { alpha, beta }) => argmax(
                alpha.iter().zip(beta).map(|(&a, &b)| {
                    Beta::new(a, b).expect("positive posterior").sample(rng)
                }),
            ),
            (PolicySpec::LinUcb { alpha, .. }, ArmStats::Linear { .. }) => {
                let x = with_intercept(&ctx.values);
                argmax(linear.iter().map(|(theta, inv)| {
                    let bonus = (x.dot(&(inv * &x))).max(0.0).sqrt();
                    theta.dot(&x) + alpha * bonus
                }))
            }
            (spec, stats) => unreachable!("policy {spec:?} with mismatched state {stats:?}"),
        }
    }

    /// One decision per context, in order.
    pub fn decide<R: Rng + ?Sized>(&self, contexts: &[ContextVector], rng: &mut R) -> Vec<Decision> {
        let linear: Vec<_> = match &self.stats {
            ArmStats::Linear { dim, design, response } => design
                .iter()
                .zip(response)
                .map(|(a, b)| Self::linear_arm(*dim, a, b))
                .collect(),
            _ => Vec::new(),
        };
        let policy_name = self.name();
        contexts
            .iter()
            .map(|ctx| {
                let idx = self.choose_index(ctx, &linear, rng);
                Decision {
                    user_id: ctx.user_id.clone(),
                    day: ctx.day,
                    action: self.actions[idx].clone(),
                    policy_name: policy_name.clone(),
                }
            })
            .collect()
    }

    /// Incorporates the observed reward of one decision.
    pub fn update(&mut self, decision: &Decision, context: &ContextVector, reward: f64) {
        let arm = self
            .actions
            .iter()
            .position(|a| *a == decision.action)
            .expect("decision action belongs to the action set");
        match &mut self.stats {
            ArmStats::Fixed => {}
            ArmStats::Means { counts, estimates } => {
                counts[arm] += 1;
                estimates[arm] += (reward - estimates[arm]) / counts[arm] as f64;
            }
            ArmStats::Beta { alpha, beta } => {
                let r = binarize(reward);
                alpha[arm] += r;
                beta[arm] += 1.0 - r;
            }
            ArmStats::Linear { dim, design, response } => {
                let x = with_intercept(&context.values);
                let a = &mut design[arm];
                for i in 0..*dim {
                    for j in 0..*dim {
                        a[i * *dim + j] += x[i] * x[j];
                    }
                    response[arm][i] += reward * x[i];
                }
            }
        }
    }
}
