//! Explicit collision barrier solver: Newton on `(θ, p_ij)` jointly, with the
//! unit-normal constraint of every plane enforced through its KKT system.
//!
//! The joint system is never formed. Each plane block is eliminated on its
//! own (a 4x4 projected inverse `H_ij`), the θ Schur complement is assembled
//! pair by pair, solved, and the plane steps are recovered by back
//! substitution. Work per iteration is linear in the number of pairs.
//!
//! Sign convention: every step returned here is a descent direction, i.e.
//! the solution of `K [δ; λ] = -[∇Ō; 0]`.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen, Vector3, Vector4};
use rayon::prelude::*;

use crate::barrier::{pair_penalty_blocks, pair_penalty_value, PairPenaltyBlocks, SeparatingPlane};
use crate::error::{Error, Result};
use crate::geometry::{closest_points, midplane_from_closest, CollisionPairSet};
use crate::problem::Problem;
use crate::solver::{accepts, MotionGuard, SolveResult, SolverSettings, TerminationReason, TraceBuilder};

/// Clamps the spectrum of a symmetric matrix from below at `eps`. Matrices
/// already satisfying the bound are returned unchanged.
pub fn eigen_adjust(h: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    if !h.is_square() {
        return Err(Error::InvalidInput("eigen_adjust needs a square matrix".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("eigen_adjust got non-finite entries".into()));
    }
    if h.nrows() == 0 {
        return Ok(h.clone());
    }
    let eig = SymmetricEigen::new(h.clone());
    if eig.eigenvalues.min() >= eps {
        return Ok(h.clone());
    }
    let clamped = eig.eigenvalues.map(|l| l.max(eps));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Adjusted matrix and its inverse, for the 4x4 plane blocks.
fn adjust4(h: &Matrix4<f64>, eps: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let eig = SymmetricEigen::new(*h);
    let clamped = eig.eigenvalues.map(|l| l.max(eps));
    let v = eig.eigenvectors;
    let adjusted = if eig.eigenvalues.min() >= eps {
        *h
    } else {
        let a = v * Matrix4::from_diagonal(&clamped) * v.transpose();
        (a + a.transpose()) * 0.5
    };
    let inv = v * Matrix4::from_diagonal(&clamped.map(|l| 1.0 / l)) * v.transpose();
    (adjusted, (inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneElimination {
    /// `A⁻¹ - A⁻¹ n nᵀ A⁻¹ / (nᵀ A⁻¹ n)` with `A` the adjusted plane Hessian.
    pub h_ij: Matrix4<f64>,
    pub adjusted_h_pp: Matrix4<f64>,
}

/// Eliminates one plane and its multiplier from the KKT system.
pub fn eliminate_plane(h_pp: &Matrix4<f64>, n: &Vector3<f64>, eps1: f64) -> PlaneElimination {
    let (adjusted_h_pp, inv) = adjust4(h_pp, eps1);
    let n4 = Vector4::new(n.x, n.y, n.z, 0.0);
    let u = inv * n4;
    let s = n4.dot(&u);
    let h = inv - u * u.transpose() / s;
    PlaneElimination { h_ij: (h + h.transpose()) * 0.5, adjusted_h_pp }
}

/// One pair's contribution to the θ Schur complement.
pub struct SchurTerm<'a> {
    /// Global dof indices of the blocks' local θ slots.
    pub dofs: &'a [usize],
    pub blocks: &'a PairPenaltyBlocks,
    pub h_ij: &'a Matrix4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchurSystem {
    /// `∇_θ Ō` (objective plus all pair terms).
    pub gradient: DVector<f64>,
    pub h_theta_unadjusted: DMatrix<f64>,
    pub h_theta: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

fn schur_local(term: &SchurTerm) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let b = term.blocks;
    let hp = term.h_ij * &b.h_ptheta; // 4 x L
    let h = &b.h_thetatheta - b.h_ptheta.transpose() * hp;
    let r = &b.grad_theta - b.h_ptheta.transpose() * (term.h_ij * b.grad_p);
    (h, r, b.grad_theta.clone())
}

/// Assembles `H_θ = ∇_θθŌ - Σ ∇_θp P_ij H_ij ∇_pθ P_ij` and the matching
/// right-hand side, then floors the spectrum of `H_θ` at `eps2`.
pub fn assemble_schur_theta(
    obj_grad: &DVector<f64>,
    obj_hess: &DMatrix<f64>,
    terms: &[SchurTerm],
    eps2: f64,
    deterministic: bool,
) -> Result<SchurSystem> {
    let n = obj_grad.len();
    let scatter = |acc: &mut (DMatrix<f64>, DVector<f64>, DVector<f64>), term: &SchurTerm| {
        let (h, r, g) = schur_local(term);
        for (a, &ga) in term.dofs.iter().enumerate() {
            acc.1[ga] += r[a];
            acc.2[ga] += g[a];
            for (b, &gb) in term.dofs.iter().enumerate() {
                acc.0[(ga, gb)] += h[(a, b)];
            }
        }
    };
    let zero = || (DMatrix::zeros(n, n), DVector::zeros(n), DVector::zeros(n));
    let (h_sum, r_sum, g_sum) = if deterministic {
        let mut acc = zero();
        for t in terms {
            scatter(&mut acc, t);
        }
        acc
    } else {
        terms
            .par_iter()
            .fold(zero, |mut acc, t| {
                scatter(&mut acc, t);
                acc
            })
            .reduce(zero, |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2))
    };
    let h_theta_unadjusted = obj_hess + h_sum;
    let h_theta_unadjusted = (&h_theta_unadjusted + h_theta_unadjusted.transpose()) * 0.5;
    let h_theta = eigen_adjust(&h_theta_unadjusted, eps2)?;
    Ok(SchurSystem { gradient: obj_grad + g_sum, h_theta_unadjusted, h_theta, rhs: obj_grad + r_sum })
}

/// Plane step from the θ step: `δp_ij = -H_ij (∇_p P_ij + ∇_pθ P_ij δθ)`.
pub fn back_substitute_planes(h_ij: &Matrix4<f64>, blocks: &PairPenaltyBlocks, local_delta_theta: &DVector<f64>) -> Vector4<f64> {
    -(h_ij * (blocks.grad_p + &blocks.h_ptheta * local_delta_theta))
}

/// Solves `H_θ δθ = -rhs` with the (positive definite) adjusted complement.
pub fn solve_theta_step(system: &SchurSystem) -> Result<DVector<f64>> {
    if system.rhs.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let ch = system
        .h_theta
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidState("adjusted Schur complement is not positive definite".into()))?;
    Ok(-ch.solve(&system.rhs))
}

/// Plane Hessian used in the KKT system. With constraint curvature the
/// Lagrangian term of `(|n|² - 1) / 2` is added on the normal diagonal, with
/// the least-squares multiplier estimate `λ = -nᵀ∇_n P` clipped at zero.
/// At a KKT point `λ = -pᵀ∇_p P = Σ -P'(m) m > 0`, so the clip only acts
/// away from the solution, where a negative estimate would make the plane
/// block indefinite.
pub fn kkt_plane_hessian(blocks: &PairPenaltyBlocks, plane: &SeparatingPlane, constraint_curvature: bool) -> Matrix4<f64> {
    let mut h = blocks.h_pp;
    if constraint_curvature {
        let n = plane.n;
        let lambda = (-(n.x * blocks.grad_p[0] + n.y * blocks.grad_p[1] + n.z * blocks.grad_p[2])).max(0.0);
        for k in 0..3 {
            h[(k, k)] += lambda;
        }
    }
    h
}

/// Gradient of a plane with the normal part projected onto the tangent of the unit sphere.
pub fn projected_plane_gradient(grad_p: &Vector4<f64>, n: &Vector3<f64>) -> Vector4<f64> {
    let gn = Vector3::new(grad_p[0], grad_p[1], grad_p[2]);
    let t = gn - n * n.dot(&gn);
    Vector4::new(t.x, t.y, t.z, grad_p[3])
}

struct PairEval {
    dofs: Vec<usize>,
    blocks: PairPenaltyBlocks,
    elim: PlaneElimination,
}

fn init_new_planes(problem: &Problem, world: &[Vec<nalgebra::Vector3<f64>>], pairs: &mut CollisionPairSet) -> Result<()> {
    for ps in pairs.pairs_mut().iter_mut().filter(|p| p.plane.is_none()) {
        let cp = closest_points(&world[ps.a], &world[ps.b])?;
        if cp.distance <= 0.0 {
            return Err(Error::InfeasibleStart(problem.objects[ps.a].name.clone(), problem.objects[ps.b].name.clone()));
        }
        ps.plane = Some(midplane_from_closest(&cp)?);
    }
    Ok(())
}

/// Runs the explicit solver from `theta0`.
pub fn ecb_solve(problem: &Problem, theta0: &DVector<f64>, settings: &SolverSettings) -> Result<SolveResult> {
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
        init_new_planes(problem, &world, &mut pairs)?;

        let evals: Vec<PairEval> = pairs
            .pairs()
            .par_iter()
            .map(|ps| {
                let plane = ps.plane.expect("initialized plane");
                let geom = problem.pair_geometry(theta.as_slice(), ps.a, ps.b)?;
                let blocks = pair_penalty_blocks(&problem.barrier, &geom.side_i, &geom.side_j, &plane, false)?;
                let h = kkt_plane_hessian(&blocks, &plane, settings.ecb_constraint_curvature);
                let elim = eliminate_plane(&h, &plane.n, settings.eps1);
                Ok(PairEval { dofs: geom.dofs, blocks, elim })
            })
            .collect::<Result<_>>()?;

        let (obj_value, obj_grad, obj_hess) = problem.objective_derivatives(theta.as_slice())?;
        let f = obj_value + evals.iter().map(|e| e.blocks.value).sum::<f64>();
        let terms: Vec<SchurTerm> = evals.iter().map(|e| SchurTerm { dofs: &e.dofs, blocks: &e.blocks, h_ij: &e.elim.h_ij }).collect();
        let system = assemble_schur_theta(&obj_grad, &obj_hess, &terms, settings.eps2, settings.deterministic)?;

        let mut grad_inf = system.gradient.amax();
        for (e, ps) in evals.iter().zip(pairs.pairs()) {
            let g = projected_plane_gradient(&e.blocks.grad_p, &ps.plane.expect("plane").n);
            grad_inf = grad_inf.max(g.amax());
        }
        if grad_inf <= settings.eps {
            trace.push(f, grad_inf, 0.0, pairs.len());
            termination = TerminationReason::Converged;
            break;
        }
        if trace.len() >= settings.max_iters {
            termination = TerminationReason::MaxIters;
            break;
        }

        let dtheta = solve_theta_step(&system)?;
        let dps: Vec<Vector4<f64>> = evals
            .iter()
            .map(|e| {
                let local = DVector::from_iterator(e.dofs.len(), e.dofs.iter().map(|&g| dtheta[g]));
                back_substitute_planes(&e.elim.h_ij, &e.blocks, &local)
            })
            .collect();
        let directional = system.gradient.dot(&dtheta) + evals.iter().zip(&dps).map(|(e, dp)| e.blocks.grad_p.dot(dp)).sum::<f64>();

        let guard = MotionGuard::new(problem, world, &pairs);
        let planes: Vec<SeparatingPlane> = pairs.iter().map(|p| p.plane.expect("plane")).collect();
        let trial_planes = |alpha: f64| -> Vec<SeparatingPlane> {
            planes.iter().zip(&dps).map(|(p, dp)| SeparatingPlane::from_vec4(&(p.to_vec4() + dp * alpha)).normalized()).collect()
        };
        let evaluate = |alpha: f64| -> Result<f64> {
            let trial = &theta + &dtheta * alpha;
            let tw = problem.all_world_vertices(trial.as_slice())?;
            if !guard.admits(&tw) {
                return Ok(f64::INFINITY);
            }
            let mut v = problem.objective_value(trial.as_slice())?;
            for (ps, plane) in pairs.iter().zip(trial_planes(alpha)) {
                v += pair_penalty_value(&problem.barrier, &tw[ps.a], &tw[ps.b], &plane, false);
                if !v.is_finite() {
                    return Ok(f64::INFINITY);
                }
            }
            Ok(v)
        };

        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= settings.min_step {
            if accepts(f, evaluate(alpha)?, alpha, directional) {
                accepted = true;
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
        theta += &dtheta * alpha;
        for (ps, plane) in pairs.pairs_mut().iter_mut().zip(trial_planes(alpha)) {
            ps.plane = Some(plane);
        }
        trace.accept(&theta);
    }
    Ok(SolveResult { theta, pairs, trace: trace.finish(termination) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjust_diagonal_clamp() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.5, 2.0]));
        let a = eigen_adjust(&h, 0.001).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.001, 0.5, 2.0]));
        assert!((a - expected).norm() < 1e-14);
    }

    #[test]
    fn adjust_fixed_point() {
        let h = DMatrix::<f64>::identity(4, 4);
        assert_eq!(eigen_adjust(&h, 0.001).unwrap(), h);
    }

    #[test]
    fn adjust_rejects_non_finite() {
        let mut h = DMatrix::<f64>::identity(2, 2);
        h[(0, 1)] = f64::NAN;
        assert!(matches!(eigen_adjust(&h, 0.1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn elimination_of_identity() {
        let e = eliminate_plane(&Matrix4::identity(), &Vector3::x(), 0.001);
        let expected = Matrix4::from_diagonal(&Vector4::new(0.0, 1.0, 1.0, 1.0));
        assert!((e.h_ij - expected).norm() < 1e-14);
    }

    #[test]
    fn zero_gradient_gives_zero_plane_step() {
        let mut blocks = PairPenaltyBlocks::zeros(2);
        blocks.h_pp = Matrix4::identity();
        let e = eliminate_plane(&blocks.h_pp, &Vector3::z(), 0.001);
        let dp = back_substitute_planes(&e.h_ij, &blocks, &DVector::zeros(2));
        assert_eq!(dp, Vector4::zeros());
    }

    #[test]
    fn empty_pair_set_schur() {
        let g = DVector::from_vec(vec![1.0, -2.0]);
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let s = assemble_schur_theta(&g, &h, &[], 0.001, true).unwrap();
        assert_eq!(s.rhs, g);
        assert_eq!(s.h_theta, eigen_adjust(&h, 0.001).unwrap());
    }
}
