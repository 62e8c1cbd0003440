//! Randomized invariant suites behind `attnflow verify`.
//!
//! Trial `k` of a suite run with seed `s` draws from `ChaCha8Rng` seeded with
//! `s` on stream `k`, or runs its scenario with seed `s + k`, so reports are
//! reproducible and trials run in parallel.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{dini_upper_estimate, pairwise_spread};
use crate::dynamics::{metric_inner, potential_v, riemannian_gradient_v, vector_field, FlowSpec};
use crate::error::{Error, Result};
use crate::manifold::{
    project_columns, sample_box_projected, tangent_project_columns, MetricMatrix,
};
use crate::scenarios::{builtin, run_scenario, ReferenceSpec, ObserverSpec, RandomMatrixSpec};

/// Central-difference step for directional derivatives of `V_P`.
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
pub const DINI_TOL: f64 = 1e-6;
pub const SPREAD_TOL: f64 = 1e-2;
pub const FIXED_TOKEN_TOL: f64 = 1e-10;
pub const ALIGNMENT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradient,
    Hemisphere,
    Causal,
    SymmetricU,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradient => "gradient",
            Suite::Hemisphere => "hemisphere",
            Suite::Causal => "causal",
            Suite::SymmetricU => "symmetric-u",
            Suite::All => "all",
        }
    }

    fn members(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![
                Suite::Gradient,
                Suite::Hemisphere,
                Suite::Causal,
                Suite::SymmetricU,
            ],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Suite::Gradient,
            Suite::Hemisphere,
            Suite::Causal,
            Suite::SymmetricU,
            Suite::All,
        ]
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// One checked quantity. `passed` compares `value` against `bound` with the
/// strictness of the underlying invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub trial: usize,
    pub value: f64,
    /// `"<="` or `">"`: how `value` must compare with `bound`.
    pub relation: &'static str,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn at_most(suite: &'static str, name: &'static str, trial: usize, value: f64, bound: f64) -> Check {
    Check {
        suite,
        name,
        trial,
        value,
        relation: "<=",
        bound,
        passed: value <= bound,
    }
}

fn above(suite: &'static str, name: &'static str, trial: usize, value: f64, bound: f64) -> Check {
    Check {
        suite,
        name,
        trial,
        value,
        relation: ">",
        bound,
        passed: value > bound,
    }
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut checks = Vec::new();
    for s in suite.members() {
        let per_trial: Vec<Vec<Check>> = (0..trials)
            .into_par_iter()
            .map(|k| match s {
                Suite::Gradient => gradient_trial(seed, k),
                Suite::Hemisphere => hemisphere_trial(seed, k),
                Suite::Causal => causal_trial(seed, k),
                Suite::SymmetricU => symmetric_u_trial(seed, k),
                Suite::All => unreachable!("expanded above"),
            })
            .collect::<Result<_>>()?;
        checks.extend(per_trial.into_iter().flatten());
    }
    Ok(VerifyReport {
        seed,
        trials,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add(trial as u64)
}

/// Compares the central difference of `V_P` along `s ↦ π_P(y + sZ)` with
/// `⟨grad V_P, Z⟩` in the configuration-space metric.
fn gradient_trial(seed: u64, trial: usize) -> Result<Vec<Check>> {
    const SUITE: &str = "gradient";
    let mut rng = trial_rng(seed, trial);
    let dim = rng.random_range(3..=5);
    let ell = if rng.random::<bool>() { 3 } else { 5 };
    let p = MetricMatrix::new(
        RandomMatrixSpec::SymmetricPositiveDefinite {
            half_width: 0.5,
            margin: 0.1,
        }
        .sample(&mut rng, dim)?,
    )?;
    let y = sample_box_projected(&mut rng, ell, &p, 0.5)?;
    let raw = DMatrix::from_fn(dim, ell, |_, _| rng.random_range(-1.0..1.0));
    let z = tangent_project_columns(y.points(), &raw, &p);

    let grad = riemannian_gradient_v(&y, &p)?;
    let exact = metric_inner(y.points(), &grad, &z, &p);
    let along = |s: f64| -> Result<f64> {
        let mut pts = y.points() + &z * s;
        project_columns(&mut pts, &p)?;
        Ok(potential_v(&pts, &p))
    };
    let fd = (along(FD_STEP)? - along(-FD_STEP)?) / (2.0 * FD_STEP);
    let rel = (fd - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);

    let field = vector_field(0.0, &y, &FlowSpec::gradient(&p))?;
    let identity = (grad + field).amax();
    Ok(vec![
        at_most(SUITE, "fd-directional-derivative", trial, rel, FD_REL_TOL),
        at_most(SUITE, "gradient-is-negated-field", trial, identity, 1e-14),
    ])
}

fn hemisphere_trial(seed: u64, trial: usize) -> Result<Vec<Check>> {
    const SUITE: &str = "hemisphere";
    let mut cfg = builtin("theorem-hemisphere").expect("builtin exists");
    cfg.seed = trial_seed(seed, trial);
    let run = run_scenario(&cfg)?;
    let traj = &run.trajectory;
    let ell = cfg.ell;
    let min_alignment = (0..ell)
        .filter_map(|i| traj.series(&format!("align_{i}")))
        .flat_map(|s| s.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let lyapunov = traj.series("V_hemisphere").expect("observer configured");
    let worst_quotient = dini_upper_estimate(lyapunov, cfg.dt)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        above(SUITE, "forward-invariance", trial, min_alignment, 0.0),
        at_most(SUITE, "lyapunov-dini-quotient", trial, worst_quotient, DINI_TOL),
        at_most(SUITE, "final-spread", trial, run.summary.final_spread, SPREAD_TOL),
    ])
}

fn causal_trial(seed: u64, trial: usize) -> Result<Vec<Check>> {
    const SUITE: &str = "causal";
    let mut cfg = builtin("causal-identity").expect("builtin exists");
    cfg.seed = trial_seed(seed, trial);
    cfg.store_every = 1;
    let run = run_scenario(&cfg)?;
    let traj = &run.trajectory;
    let first = traj.initial_state().token(0);
    let drift = traj
        .states
        .iter()
        .map(|s| (s.token(0) - &first).norm())
        .fold(0.0, f64::max);
    let last = traj.final_state();
    let worst = last
        .points()
        .column_iter()
        .map(|c| 1.0 - first.dot(&c))
        .fold(0.0, f64::max);
    Ok(vec![
        at_most(SUITE, "first-token-fixed", trial, drift, FIXED_TOKEN_TOL),
        at_most(SUITE, "alignment-with-first-token", trial, worst, ALIGNMENT_TOL),
    ])
}

fn symmetric_u_trial(seed: u64, trial: usize) -> Result<Vec<Check>> {
    const SUITE: &str = "symmetric-u";
    let mut out = Vec::new();
    for (negate, name) in [(false, "alignment-with-top-eigenvector"), (true, "alignment-with-negated-eigenvector")] {
        let mut cfg = builtin("theorem-symmetric-U").expect("builtin exists");
        cfg.seed = trial_seed(seed, trial);
        let reference = ReferenceSpec::UTop { negate };
        if let crate::scenarios::InitSpec::BoxProjected { hemisphere, .. } = &mut cfg.init {
            *hemisphere = Some(reference.clone());
        }
        cfg.observers = vec![ObserverSpec::Alignments { reference }];
        let run = run_scenario(&cfg)?;
        let v = DVector::from_vec(
            run.built
                .constructed
                .hemisphere_reference
                .clone()
                .expect("hemisphere sampling configured"),
        );
        let worst = run
            .trajectory
            .final_state()
            .points()
            .column_iter()
            .map(|c| 1.0 - v.dot(&c))
            .fold(0.0, f64::max);
        out.push(at_most(SUITE, name, trial, worst, ALIGNMENT_TOL));
        out.push(at_most(
            SUITE,
            "final-spread",
            trial,
            pairwise_spread(run.trajectory.final_state()),
            SPREAD_TOL,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_is_a_config_error() {
        assert!(matches!(run_suite(Suite::Gradient, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Gradient, Suite::Hemisphere, Suite::Causal, Suite::SymmetricU, Suite::All] {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn gradient_suite_passes_and_is_deterministic() {
        let a = run_suite(Suite::Gradient, 100, 9).unwrap();
        assert_eq!(a.checks.len(), 200);
        let bad: Vec<_> = a.failures().collect();
        assert!(bad.is_empty(), "{bad:?}");
        assert_eq!(a, run_suite(Suite::Gradient, 100, 9).unwrap());
    }
}
