//! Alternating baseline: solve every plane exactly at the current θ, then
//! take one Newton step in θ with the planes held fixed.
//!
//! The recorded objective is `O + Σ (P_ij + P(1 - |n_ij|))`, the function the
//! plane solves minimize. With it every iteration is a descent step: the θ
//! step lowers it at fixed planes and the plane re-solve lowers it at fixed θ.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::barrier::{pair_penalty_blocks, pair_penalty_value};
use crate::ecb::eigen_adjust;
use crate::error::{Error, Result};
use crate::geometry::CollisionPairSet;
use crate::icb::solve_all_planes;
use crate::problem::Problem;
use crate::solver::{accepts, MotionGuard, SolveResult, SolverSettings, TerminationReason, TraceBuilder};

pub fn ao_solve(problem: &Problem, theta0: &DVector<f64>, settings: &SolverSettings) -> Result<SolveResult> {
    if theta0.len() != problem.dof() {
        return Err(Error::InvalidInput("initial configuration has the wrong dimension".into()));
    }
    let mut theta = theta0.clone();
    let mut pairs = CollisionPairSet::new();
    let mut trace = TraceBuilder::new(settings, &theta);
    let termination;

    loop {
        let world = problem.all_world_vertices(theta.as_slice())?;
        pairs = problem.broadphase(&world, &pairs);
        let states = solve_all_planes(problem, &world, &pairs, settings.plane_tol())?;
        trace.inner_iterations.extend(states.iter().map(|s| s.iterations));
        for (ps, st) in pairs.pairs_mut().iter_mut().zip(&states) {
            ps.plane = Some(st.plane);
        }

        let (mut f, mut grad, mut hess) = problem.objective_derivatives(theta.as_slice())?;
        let locals: Vec<(Vec<usize>, crate::barrier::PairPenaltyBlocks)> = pairs
            .pairs()
            .par_iter()
            .map(|ps| {
                let geom = problem.pair_geometry(theta.as_slice(), ps.a, ps.b)?;
                let b = pair_penalty_blocks(&problem.barrier, &geom.side_i, &geom.side_j, &ps.plane.expect("plane"), true)?;
                Ok((geom.dofs, b))
            })
            .collect::<Result<_>>()?;
        for (dofs, b) in &locals {
            f += b.value;
            scatter(&mut grad, &mut hess, dofs, &b.grad_theta, &b.h_thetatheta);
        }

        let grad_inf = grad.amax();
        if grad_inf <= settings.eps {
            trace.push(f, grad_inf, 0.0, pairs.len());
            termination = TerminationReason::Converged;
            break;
        }
        if trace.len() >= settings.max_iters {
            termination = TerminationReason::MaxIters;
            break;
        }

        let h = eigen_adjust(&hess, settings.eps1)?;
        let dtheta = -h.cholesky().ok_or_else(|| Error::InvalidState("adjusted Hessian is not positive definite".into()))?.solve(&grad);
        let directional = grad.dot(&dtheta);
        let guard = MotionGuard::new(problem, world, &pairs);

        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= settings.min_step {
            let trial = &theta + &dtheta * alpha;
            let tw = problem.all_world_vertices(trial.as_slice())?;
            let v = if guard.admits(&tw) {
                let mut v = problem.objective_value(trial.as_slice())?;
                for ps in pairs.iter() {
                    v += pair_penalty_value(&problem.barrier, &tw[ps.a], &tw[ps.b], &ps.plane.expect("plane"), true);
                }
                v
            } else {
                f64::INFINITY
            };
            if accepts(f, v, alpha, directional) {
                accepted = true;
                theta = trial;
                break;
            }
            alpha *= settings.shrink;
        }
        if !accepted {
            trace.push(f, grad_inf, 0.0, pairs.len());
            termination = TerminationReason::Stalled;
            break;
        }
        trace.push(f, grad_inf, alpha, pairs.len());
        trace.accept(&theta);
    }
    Ok(SolveResult { theta, pairs, trace: trace.finish(termination) })
}

fn scatter(grad: &mut DVector<f64>, hess: &mut DMatrix<f64>, dofs: &[usize], g: &DVector<f64>, h: &DMatrix<f64>) {
    for (a, &ga) in dofs.iter().enumerate() {
        grad[ga] += g[a];
        for (b, &gb) in dofs.iter().enumerate() {
            hess[(ga, gb)] += h[(a, b)];
        }
    }
}
