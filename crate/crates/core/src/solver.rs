//! Settings, traces and the pieces of the outer loop shared by all three solvers.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::barrier::SeparatingPlane;
use crate::geometry::CollisionPairSet;
use crate::problem::Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Stopping tolerance on the gradient infinity norm.
    pub eps: f64,
    /// Eigenvalue floor for plane blocks (ECB) and the reduced Hessian (ICB, AO).
    pub eps1: f64,
    /// Eigenvalue floor for the θ Schur complement (ECB).
    pub eps2: f64,
    pub max_iters: usize,
    pub shrink: f64,
    pub min_step: f64,
    /// Residual tolerance of the plane subproblem.
    pub inner_tol: f64,
    /// Fixed-order reductions so reruns are bitwise reproducible.
    pub deterministic: bool,
    /// Keep every accepted configuration in the trace.
    pub record_iterates: bool,
    /// ICB: add `P(1 - |n|)` of the implicit planes to the outer objective.
    pub icb_include_norm_barrier: bool,
    /// ECB: add the unit-norm constraint curvature `λ I` to the normal block.
    pub ecb_constraint_curvature: bool,
}

impl SolverSettings {
    /// Plane subproblem tolerance: `inner_tol`, tightened for very small `eps`
    /// so that plane errors stay below the outer stopping test.
    pub fn plane_tol(&self) -> f64 {
        self.inner_tol.min(1e-3 * self.eps)
    }
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            eps1: 1e-3,
            eps2: 1e-3,
            max_iters: 50_000,
            shrink: 0.5,
            min_step: 1e-12,
            inner_tol: 1e-10,
            deterministic: true,
            record_iterates: false,
            icb_include_norm_barrier: false,
            ecb_constraint_curvature: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    Stalled,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Objective at the start of the iteration.
    pub objective: f64,
    pub grad_inf_norm: f64,
    /// Step accepted from this iterate (0 on the terminal record).
    pub step_alpha: f64,
    pub pairs_active: usize,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
    pub termination: TerminationReason,
    /// Accepted configurations, starting with the initial one (when recorded).
    pub iterates: Vec<DVector<f64>>,
    /// Newton steps each plane subproblem took (ICB and AO only).
    pub inner_iterations: Vec<usize>,
}

impl SolveTrace {
    /// Index of the first record whose gradient norm is at or below `eps`.
    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        self.records.iter().position(|r| r.grad_inf_norm <= eps)
    }

    pub fn final_grad(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.grad_inf_norm)
    }

    /// Wall time to first reach `eps`.
    pub fn seconds_to(&self, eps: f64) -> Option<f64> {
        self.iterations_to(eps).map(|i| self.records[i].elapsed_s)
    }
}

/// Result of a solve: configuration, final planes and the trace.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub theta: DVector<f64>,
    pub pairs: CollisionPairSet,
    pub trace: SolveTrace,
}

impl SolveResult {
    pub fn planes(&self) -> Vec<(usize, usize, Option<SeparatingPlane>)> {
        self.pairs.iter().map(|p| (p.a, p.b, p.plane)).collect()
    }
}

pub(crate) struct TraceBuilder {
    start: Instant,
    records: Vec<IterationRecord>,
    iterates: Vec<DVector<f64>>,
    record_iterates: bool,
    pub(crate) inner_iterations: Vec<usize>,
}

impl TraceBuilder {
    pub(crate) fn new(settings: &SolverSettings, theta0: &DVector<f64>) -> Self {
        Self {
            start: Instant::now(),
            records: Vec::new(),
            iterates: if settings.record_iterates { vec![theta0.clone()] } else { Vec::new() },
            record_iterates: settings.record_iterates,
            inner_iterations: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, objective: f64, grad_inf_norm: f64, step_alpha: f64, pairs_active: usize) {
        let iter = self.records.len();
        self.records.push(IterationRecord {
            iter,
            objective,
            grad_inf_norm,
            step_alpha,
            pairs_active,
            elapsed_s: self.start.elapsed().as_secs_f64(),
        });
    }

    pub(crate) fn len(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn accept(&mut self, theta: &DVector<f64>) {
        if self.record_iterates {
            self.iterates.push(theta.clone());
        }
    }

    pub(crate) fn finish(self, termination: TerminationReason) -> SolveTrace {
        SolveTrace { records: self.records, termination, iterates: self.iterates, inner_iterations: self.inner_iterations }
    }
}

/// Keeps pairs outside the active set collision-free across a step: every
/// trial is rejected unless, for each inactive pair, the two bodies move
/// less (vertex-wise) than the AABB gap that currently separates them.
pub(crate) struct MotionGuard {
    current: Vec<Vec<Vector3<f64>>>,
    inactive: Vec<(usize, usize, f64)>,
}

impl MotionGuard {
    pub(crate) fn new(problem: &Problem, world: Vec<Vec<Vector3<f64>>>, active: &CollisionPairSet) -> Self {
        let inactive = problem.inactive_gaps(&world, active);
        Self { current: world, inactive }
    }

    pub(crate) fn admits(&self, trial_world: &[Vec<Vector3<f64>>]) -> bool {
        if self.inactive.is_empty() {
            return true;
        }
        let disp: Vec<f64> =
            self.current.iter().zip(trial_world).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)).collect();
        self.inactive.iter().all(|&(a, b, gap)| disp[a] + disp[b] < gap)
    }
}

/// Acceptance test for a trial objective value. Strict decrease, except in
/// the rounding regime where neither the predicted nor the observed change
/// is resolvable at the objective's magnitude; there a full step is taken.
pub(crate) fn accepts(f_current: f64, f_trial: f64, alpha: f64, directional: f64) -> bool {
    if !f_trial.is_finite() {
        return false;
    }
    if f_trial < f_current {
        return true;
    }
    let resolution = 64.0 * f64::EPSILON * f_current.abs().max(f64::MIN_POSITIVE);
    alpha == 1.0 && directional.abs() <= resolution && (f_trial - f_current) <= resolution
}
