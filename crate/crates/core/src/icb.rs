//! Implicit collision barrier solver: each plane is the minimizer of the
//! smoothed subproblem `Σ P(margin) + P(1 - |n|)` at the current θ, and the
//! outer Newton iteration runs on `Õ(θ) = O(θ) + Σ P_ij(θ, p_ij(θ))` with
//! plane sensitivities from the implicit function theorem.

use nalgebra::{DMatrix, DVector, Matrix3xX, Matrix4, Matrix4xX, Vector3, Vector4};
use rayon::prelude::*;

use crate::barrier::{norm_barrier, norm_barrier_third, pair_penalty_blocks, BarrierFunction, SeparatingPlane};
use crate::ecb::eigen_adjust;
use crate::error::{Error, Result};
use crate::geometry::{closest_points, midplane_from_closest, CollisionPairSet};
use crate::problem::{PairGeometry, Problem};
use crate::solver::{accepts, MotionGuard, SolveResult, SolverSettings, TerminationReason, TraceBuilder};

const MAX_INNER_ITERS: usize = 200;

/// Converged plane subproblem at fixed θ.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolveState {
    pub plane: SeparatingPlane,
    /// Gradient of the subproblem in `p` at the returned plane.
    pub g_tilde: Vector4<f64>,
    /// Hessian of the subproblem in `p` at the returned plane.
    pub h_tilde: Matrix4<f64>,
    pub converged: bool,
    /// The warm start was feasible and used.
    pub warm: bool,
    pub iterations: usize,
}

struct Local {
    value: f64,
    grad: Vector4<f64>,
    hess: Matrix4<f64>,
    scale: f64,
}

impl Local {
    fn noise(&self) -> f64 {
        64.0 * f64::EPSILON * (self.value.abs() + self.scale)
    }
}

fn subproblem(barrier: &BarrierFunction, side_i: &[Vector3<f64>], side_j: &[Vector3<f64>], p: &Vector4<f64>) -> Option<Local> {
    let plane = SeparatingPlane::from_vec4(p);
    let (qv, qg, qh) = norm_barrier(barrier, &plane.n).ok()?;
    let mut out = Local { value: qv, grad: Vector4::zeros(), hess: Matrix4::zeros(), scale: 0.0 };
    for (sigma, side) in [(-1.0, side_i), (1.0, side_j)] {
        for x in side {
            let m = sigma * (plane.n.dot(x) + plane.d);
            if !(m > 0.0) {
                return None;
            }
            let [p0, p1, p2, _] = barrier.derivatives(m);
            let l = Vector4::new(x.x, x.y, x.z, 1.0);
            out.value += p0;
            out.grad += l * (sigma * p1);
            out.hess += l * l.transpose() * p2;
            out.scale += p1.abs() * (1.0 + x.norm());
        }
    }
    for a in 0..3 {
        out.grad[a] += qg[a];
        for b in 0..3 {
            out.hess[(a, b)] += qh[(a, b)];
        }
    }
    out.scale = out.scale.max(1.0);
    Some(out)
}

fn newton_direction(h: &Matrix4<f64>, g: &Vector4<f64>) -> Vector4<f64> {
    if let Some(ch) = h.cholesky() {
        return -ch.solve(g);
    }
    let eig = h.symmetric_eigen();
    let floor = 1e-12 * eig.eigenvalues.amax().max(1e-300);
    let v = eig.eigenvectors;
    let inv = v * Matrix4::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(floor))) * v.transpose();
    -(inv * g)
}

/// Minimizes the plane subproblem for one pair of vertex sets. A feasible
/// warm start is used as is; otherwise the scaled midplane of the closest
/// points starts the iteration.
pub fn inner_solve(
    barrier: &BarrierFunction,
    side_i: &[Vector3<f64>],
    side_j: &[Vector3<f64>],
    warm_start: Option<&SeparatingPlane>,
    tol: f64,
) -> Result<InnerSolveState> {
    let warm = warm_start.filter(|p| subproblem(barrier, side_i, side_j, &p.to_vec4()).is_some());
    let (mut p, used_warm) = match warm {
        Some(w) => (w.to_vec4(), true),
        None => {
            let cp = closest_points(side_i, side_j)?;
            if cp.distance <= 0.0 {
                return Err(Error::NoSolution("bodies intersect or touch".into()));
            }
            (midplane_from_closest(&cp)?.scaled(0.99).to_vec4(), false)
        }
    };
    let mut local = subproblem(barrier, side_i, side_j, &p).ok_or_else(|| Error::NoSolution("no strictly separating start".into()))?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_INNER_ITERS {
        if local.grad.amax() <= tol * local.scale {
            converged = true;
            break;
        }
        let dir = newton_direction(&local.hess, &local.grad);
        let slope = local.grad.dot(&dir);
        iterations += 1;
        if -slope <= local.noise() {
            // Value changes are below rounding: continue on the gradient
            // while full Newton steps still halve it.
            match subproblem(barrier, side_i, side_j, &(p + dir)) {
                Some(t) if t.grad.amax() < 0.5 * local.grad.amax() => {
                    p += dir;
                    local = t;
                    continue;
                }
                _ => {
                    converged = true;
                    break;
                }
            }
        }
        let mut alpha = 1.0;
        let mut next = None;
        while alpha > 1e-16 {
            let trial = p + dir * alpha;
            if let Some(t) = subproblem(barrier, side_i, side_j, &trial) {
                if (t.value < local.value && t.value <= local.value + 1e-4 * alpha * slope) || accepts(local.value, t.value, alpha, slope) {
                    next = Some((trial, t));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match next {
            Some((trial, t)) => {
                p = trial;
                local = t;
            }
            None => break,
        }
    }
    if !converged {
        converged = local.grad.amax() <= tol * local.scale;
    }
    Ok(InnerSolveState {
        plane: SeparatingPlane::from_vec4(&p),
        g_tilde: local.grad,
        h_tilde: local.hess,
        converged,
        warm: used_warm,
        iterations,
    })
}

/// First and second derivatives of the implicit plane `p(θ)` in the pair's
/// local dof space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPlaneDerivatives {
    /// 4 x L.
    pub dp_dtheta: Matrix4xX<f64>,
    /// `d2p_dtheta2[γ][(α, β)] = ∂²p_γ/∂θ_α∂θ_β`.
    pub d2p_dtheta2: [DMatrix<f64>; 4],
}

/// Implicit derivatives from the converged subproblem. Fails with
/// `InvalidState` when the inner solve did not converge.
pub fn implicit_derivatives(
    barrier: &BarrierFunction,
    state: &InnerSolveState,
    geometry: &PairGeometry,
) -> Result<ImplicitPlaneDerivatives> {
    if !state.converged {
        return Err(Error::InvalidState("plane subproblem not converged".into()));
    }
    let blocks = pair_penalty_blocks(barrier, &geometry.side_i, &geometry.side_j, &state.plane, false)?;
    derivatives_from_blocks(barrier, state, geometry, &blocks.h_ptheta)
}

fn derivatives_from_blocks(
    barrier: &BarrierFunction,
    state: &InnerSolveState,
    geometry: &PairGeometry,
    h_ptheta: &Matrix4xX<f64>,
) -> Result<ImplicitPlaneDerivatives> {
    let hinv = state.h_tilde.try_inverse().ok_or_else(|| Error::InvalidState("singular plane subproblem Hessian".into()))?;
    let dp = -(hinv * h_ptheta);
    let l = dp.ncols();
    let n = state.plane.n;
    let d = state.plane.d;
    let dpn: Matrix3xX<f64> = dp.fixed_rows::<3>(0).into_owned();

    let mut bracket: [DMatrix<f64>; 4] = std::array::from_fn(|_| DMatrix::zeros(l, l));
    for (sigma, side) in [(-1.0, &geometry.side_i), (1.0, &geometry.side_j)] {
        for k in side.iter() {
            let x = k.position;
            let m = sigma * (n.dot(&x) + d);
            let [_, p1, p2, p3] = barrier.derivatives(m);
            let lifted = Vector4::new(x.x, x.y, x.z, 1.0);
            let nj = k.jacobian.tr_mul(&n);
            let s = dp.tr_mul(&lifted);
            let w = &nj + &s;
            let hc = k.contract_hessian(&n);
            let mm = k.jacobian.tr_mul(&dpn);
            let common = &w * w.transpose() * (sigma * p3) + (&hc + &mm + mm.transpose()) * p2;
            for (g, b) in bracket.iter_mut().enumerate() {
                *b += &common * lifted[g];
            }
            for (c, b) in bracket.iter_mut().take(3).enumerate() {
                let jc = k.jacobian.row(c).transpose();
                *b += (&w * jc.transpose() + &jc * w.transpose()) * p2 + &k.hessian[c] * (sigma * p1);
            }
        }
    }
    let t = norm_barrier_third(barrier, &n)?;
    for (a, b) in bracket.iter_mut().take(3).enumerate() {
        for (gamma, slab) in t.iter().enumerate() {
            let row: Vector3<f64> = slab.row(a).transpose();
            let left = dpn.tr_mul(&row);
            let right = dpn.row(gamma).transpose();
            *b += left * right.transpose();
        }
    }
    let d2: [DMatrix<f64>; 4] = std::array::from_fn(|g| {
        let mut acc = DMatrix::zeros(l, l);
        for (dl, b) in bracket.iter().enumerate() {
            acc -= b * hinv[(g, dl)];
        }
        (&acc + acc.transpose()) * 0.5
    });
    Ok(ImplicitPlaneDerivatives { dp_dtheta: dp, d2p_dtheta2: d2 })
}

/// One pair's contribution to `Õ` in its local dof space.
#[derive(Debug, Clone)]
pub struct ImplicitPairTerm {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub derivatives: ImplicitPlaneDerivatives,
}

/// Value, gradient and Hessian of `P_ij(θ, p(θ))` (plus the norm term when requested).
pub fn implicit_pair_term(
    barrier: &BarrierFunction,
    state: &InnerSolveState,
    geometry: &PairGeometry,
    include_norm_barrier: bool,
) -> Result<ImplicitPairTerm> {
    if !state.converged {
        return Err(Error::InvalidState("plane subproblem not converged".into()));
    }
    let blocks = pair_penalty_blocks(barrier, &geometry.side_i, &geometry.side_j, &state.plane, include_norm_barrier)?;
    let derivatives = derivatives_from_blocks(barrier, state, geometry, &blocks.h_ptheta)?;
    let dp = &derivatives.dp_dtheta;
    let grad = &blocks.grad_theta + dp.tr_mul(&blocks.grad_p);
    let cross = blocks.h_ptheta.tr_mul(dp);
    let mut hess = &blocks.h_thetatheta + &cross + cross.transpose() + dp.tr_mul(&(blocks.h_pp * dp));
    for (g, d2) in derivatives.d2p_dtheta2.iter().enumerate() {
        hess += d2 * blocks.grad_p[g];
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    Ok(ImplicitPairTerm { value: blocks.value, grad, hess, derivatives })
}

/// Solves every plane subproblem at the given world positions, warm started
/// from the stored planes. New pairs without a plane must be strictly
/// separated.
pub(crate) fn solve_all_planes(
    problem: &Problem,
    world: &[Vec<Vector3<f64>>],
    pairs: &CollisionPairSet,
    tol: f64,
) -> Result<Vec<InnerSolveState>> {
    pairs
        .pairs()
        .par_iter()
        .map(|ps| {
            inner_solve(&problem.barrier, &world[ps.a], &world[ps.b], ps.plane.as_ref(), tol).map_err(|e| match e {
                Error::NoSolution(_) => Error::InfeasibleStart(problem.objects[ps.a].name.clone(), problem.objects[ps.b].name.clone()),
                other => other,
            })
        })
        .collect()
}

/// Value of `Õ` at a trial configuration; `+∞` if any plane subproblem fails
/// or does not converge.
fn implicit_value_at(
    problem: &Problem,
    theta: &DVector<f64>,
    world: &[Vec<Vector3<f64>>],
    pairs: &CollisionPairSet,
    settings: &SolverSettings,
) -> Result<(f64, Option<Vec<InnerSolveState>>)> {
    let states = match solve_all_planes(problem, world, pairs, settings.plane_tol()) {
        Ok(s) if s.iter().all(|s| s.converged) => s,
        _ => return Ok((f64::INFINITY, None)),
    };
    let mut v = problem.objective_value(theta.as_slice())?;
    for (ps, st) in pairs.iter().zip(&states) {
        v += crate::barrier::pair_penalty_value(&problem.barrier, &world[ps.a], &world[ps.b], &st.plane, settings.icb_include_norm_barrier);
    }
    Ok((v, Some(states)))
}

/// Value, gradient and Hessian of `Õ` given converged planes.
pub fn implicit_objective(
    problem: &Problem,
    theta: &DVector<f64>,
    pairs: &CollisionPairSet,
    states: &[InnerSolveState],
    include_norm_barrier: bool,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let (mut value, mut grad, mut hess) = problem.objective_derivatives(theta.as_slice())?;
    let terms: Vec<(Vec<usize>, ImplicitPairTerm)> = pairs
        .pairs()
        .par_iter()
        .zip(states)
        .map(|(ps, st)| {
            let geom = problem.pair_geometry(theta.as_slice(), ps.a, ps.b)?;
            let term = implicit_pair_term(&problem.barrier, st, &geom, include_norm_barrier)?;
            Ok((geom.dofs, term))
        })
        .collect::<Result<_>>()?;
    for (dofs, t) in &terms {
        value += t.value;
        for (a, &ga) in dofs.iter().enumerate() {
            grad[ga] += t.grad[a];
            for (b, &gb) in dofs.iter().enumerate() {
                hess[(ga, gb)] += t.hess[(a, b)];
            }
        }
    }
    Ok((value, grad, hess))
}

/// Runs the implicit solver from `theta0`.
pub fn icb_solve(problem: &Problem, theta0: &DVector<f64>, settings: &SolverSettings) -> Result<SolveResult> {
    if theta0.len() != problem.dof() {
        return Err(Error::InvalidInput("initial configuration has the wrong dimension".into()));
    }
    let mut theta = theta0.clone();
    let mut pairs = CollisionPairSet::new();
    let mut trace = TraceBuilder::new(settings, &theta);
    let mut cached: Option<Vec<InnerSolveState>> = None;
    let termination;

    loop {
        let world = problem.all_world_vertices(theta.as_slice())?;
        let before = pairs.len();
        pairs = problem.broadphase(&world, &pairs);
        let states = match cached.take() {
            Some(s) if pairs.len() == before => s,
            _ => solve_all_planes(problem, &world, &pairs, settings.plane_tol())?,
        };
        trace.inner_iterations.extend(states.iter().map(|s| s.iterations));
        for (ps, st) in pairs.pairs_mut().iter_mut().zip(&states) {
            ps.plane = Some(st.plane);
        }
        if let Some(bad) = states.iter().position(|s| !s.converged) {
            let ps = &pairs.pairs()[bad];
            return Err(Error::InvalidState(format!(
                "plane subproblem for {} / {} did not converge",
                problem.objects[ps.a].name, problem.objects[ps.b].name
            )));
        }

        let (f, grad, hess) = implicit_objective(problem, &theta, &pairs, &states, settings.icb_include_norm_barrier)?;
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
        let mut accepted = None;
        while alpha >= settings.min_step {
            let trial = &theta + &dtheta * alpha;
            let tw = problem.all_world_vertices(trial.as_slice())?;
            if guard.admits(&tw) {
                let (v, st) = implicit_value_at(problem, &trial, &tw, &pairs, settings)?;
                if accepts(f, v, alpha, directional) {
                    accepted = Some((trial, st));
                    break;
                }
            }
            alpha *= settings.shrink;
        }
        match accepted {
            Some((trial, st)) => {
                trace.push(f, grad_inf, alpha, pairs.len());
                theta = trial;
                cached = st;
                trace.accept(&theta);
            }
            None => {
                trace.push(f, grad_inf, 0.0, pairs.len());
                termination = TerminationReason::Stalled;
                break;
            }
        }
    }
    Ok(SolveResult { theta, pairs, trace: trace.finish(termination) })
}
