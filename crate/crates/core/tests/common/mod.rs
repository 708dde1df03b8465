#![allow(dead_code)]

use collision_barrier::barrier::BarrierFunction;
use collision_barrier::geometry::{ConvexBody, FrameRef};
use collision_barrier::kinematics::{ClampedBSpline, KinematicModel, ModelKind, RevoluteJoint, SerialChain, SplineTrajectory};
use collision_barrier::problem::{Objective, ObjectiveTerm, Problem};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `count` points uniformly in a ball.
pub fn random_hull(rng: &mut impl Rng, count: usize, center: Vector3<f64>, radius: f64) -> Vec<Vector3<f64>> {
    (0..count).map(|_| center + random_unit(rng) * radius * rng.gen_range(0.2..1.0_f64)).collect()
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Central-difference Jacobian of a vector map; column `k` is `∂f/∂x_k`.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut out = DMatrix::zeros(m, x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        out.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    out
}

pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let j = fd_jacobian(|y| DVector::from_element(1, f(y)), x, h);
    j.row(0).transpose()
}

pub fn cube(id: &str, center: Vector3<f64>, half: f64, model: usize, link: usize) -> ConvexBody {
    ConvexBody::cuboid(id, center, Vector3::repeat(half), FrameRef { model, link }).unwrap()
}

pub fn hull_body(id: &str, verts: Vec<Vector3<f64>>, model: usize, link: usize) -> ConvexBody {
    ConvexBody::new(id, verts, FrameRef { model, link }).unwrap()
}

pub fn chain(rng: &mut impl Rng, joints: usize) -> SerialChain {
    SerialChain {
        base_rotation: collision_barrier::kinematics::rotation_from_vector(&(random_unit(rng) * 0.7)),
        base_position: Vector3::new(0.1, -0.2, 0.3),
        joints: (0..joints)
            .map(|k| RevoluteJoint {
                axis: random_unit(rng),
                offset: if k == 0 { Vector3::zeros() } else { Vector3::new(0.6, 0.1 * k as f64, -0.05) },
            })
            .collect(),
    }
}

pub fn spline(inner: KinematicModel, ctrl: usize, samples: &[f64]) -> KinematicModel {
    KinematicModel::new(ModelKind::SplineTrajectory(SplineTrajectory {
        inner: Box::new(inner),
        spline: ClampedBSpline::new(3, ctrl).unwrap(),
        sample_times: samples.to_vec(),
    }))
    .unwrap()
}

/// Every kinematic model variant with a link index to attach a test body to.
pub fn model_variants() -> Vec<(&'static str, KinematicModel, usize)> {
    let mut r = rng(7);
    let translation = KinematicModel::new(ModelKind::Translation).unwrap();
    let free = KinematicModel::new(ModelKind::FreeRigidBody).unwrap();
    let arm = KinematicModel::new(ModelKind::SerialChain(chain(&mut r, 3))).unwrap();
    let samples = [0.0, 0.13, 0.5, 0.77, 1.0];
    vec![
        ("static", KinematicModel::new(ModelKind::Static).unwrap(), 0),
        ("translation", translation.clone(), 0),
        ("free_rigid_body", free.clone(), 0),
        ("serial_chain", arm.clone(), 3),
        ("serial_chain_mid_link", arm.clone(), 2),
        ("spline_translation", spline(translation, 6, &samples), 0),
        ("spline_free_rigid_body", spline(free, 5, &samples), 0),
        ("spline_serial_chain", spline(arm, 4, &samples), 3),
    ]
}

pub fn regularizer(weight: f64, target: DVector<f64>) -> ObjectiveTerm {
    ObjectiveTerm::Regularizer { weight, target, indices: None }
}

/// A static unit cube at the origin and a free unit cube pulled into it by a
/// target on its center. The minimizer is pressed against the static cube.
pub fn two_cube_problem() -> (Problem, DVector<f64>) {
    let models = vec![
        ("world".to_string(), KinematicModel::new(ModelKind::Static).unwrap()),
        ("box".to_string(), KinematicModel::new(ModelKind::FreeRigidBody).unwrap()),
    ];
    let bodies = vec![cube("anchor", Vector3::zeros(), 0.5, 0, 0), cube("mover", Vector3::zeros(), 0.5, 1, 0)];
    let objective = Objective {
        terms: vec![
            ObjectiveTerm::Target { object: 1, local_point: Vector3::zeros(), target: Vector3::new(0.6, 0.1, 0.0), weight: 1.0 },
            regularizer(0.01, DVector::zeros(6)),
        ],
    };
    let problem = Problem::new("two-cube", models, bodies, objective, BarrierFunction::inverse(1e-3), 0.1, &[]).unwrap();
    let theta0 = DVector::from_vec(vec![1.45, 0.1, -0.05, 0.1, -0.05, 0.2]);
    (problem, theta0)
}

pub fn rot(w: Vector3<f64>) -> Matrix3<f64> {
    collision_barrier::kinematics::rotation_from_vector(&w)
}

/// Worst relative errors (Jacobian, Hessian) of a model's vertex derivatives
/// against central differences, over every vertex and sample instant.
pub fn model_fd_errors(model: &KinematicModel, body: &ConvexBody, theta: &DVector<f64>) -> (f64, f64) {
    let mut worst = (0.0_f64, 0.0_f64);
    let n = model.dof();
    if n == 0 {
        return worst;
    }
    for s in 0..model.num_samples() {
        for v in 0..body.local_vertices.len() {
            let k = model.trajectory_sample_kinematics(theta.as_slice(), s, body, v).unwrap();
            let pos = |t: &DVector<f64>| {
                let p = model.trajectory_sample_kinematics(t.as_slice(), s, body, v).unwrap().position;
                DVector::from_column_slice(p.as_slice())
            };
            let jac_fd = fd_jacobian(pos, theta, 1e-6);
            let jac = DMatrix::from_fn(3, n, |r, c| k.jacobian[(r, c)]);
            worst.0 = worst.0.max(rel_err_mat(&jac, &jac_fd, 1e-3));
            for c in 0..3 {
                let row = |t: &DVector<f64>| {
                    let kt = model.trajectory_sample_kinematics(t.as_slice(), s, body, v).unwrap();
                    DVector::from_fn(n, |a, _| kt.jacobian[(c, a)])
                };
                let h_fd = fd_jacobian(row, theta, 1e-5);
                worst.1 = worst.1.max(rel_err_mat(&k.hessian[c], &h_fd, 1e-3));
            }
        }
    }
    worst
}

/// A random configuration for `model`, with rotations spread over small,
/// series-range and large angles.
pub fn random_theta(rng: &mut impl Rng, model: &KinematicModel) -> DVector<f64> {
    let scale = match rng.gen_range(0..3) {
        0 => 1e-3,
        1 => 0.4,
        _ => 1.5,
    };
    random_vec(rng, model.dof(), scale)
}

/// Random hull centered at a random direction times `dist`.
pub fn offset_hull(rng: &mut impl Rng, count: usize, dist: f64, radius: f64) -> Vec<Vector3<f64>> {
    let c = random_unit(rng) * dist;
    random_hull(rng, count, c, radius)
}

pub struct PairInstance {
    pub problem: Problem,
    pub theta: DVector<f64>,
    pub a: usize,
    pub b: usize,
    pub plane: collision_barrier::barrier::SeparatingPlane,
}

/// A random hull on `model` (at `link`) paired with a free random hull one
/// unit away, and a feasible plane near their midplane.
pub fn random_pair_instance(rng: &mut impl Rng, model: &KinematicModel, link: usize, eta: f64) -> PairInstance {
    use collision_barrier::geometry::{closest_points, midplane_from_closest};
    let models = vec![("m".to_string(), model.clone()), ("free".to_string(), KinematicModel::new(ModelKind::FreeRigidBody).unwrap())];
    let bodies = vec![
        hull_body("a", random_hull(rng, 6, Vector3::zeros(), 0.3), 0, link),
        hull_body("b", random_hull(rng, 5, Vector3::zeros(), 0.3), 1, 0),
    ];
    let problem = Problem::new("pair", models, bodies, Objective::default(), BarrierFunction::inverse(eta), 0.1, &[]).unwrap();
    let samples = model.num_samples();
    let a = rng.gen_range(0..samples);
    let b = samples;
    let mut theta = DVector::zeros(problem.dof());
    let qa = random_theta(rng, model);
    theta.rows_mut(0, model.dof()).copy_from(&qa);
    let wa = problem.world_vertices(theta.as_slice(), a).unwrap();
    let ca = wa.iter().fold(Vector3::zeros(), |s, v| s + v) / wa.len() as f64;
    let t = ca + random_unit(rng);
    let w = random_unit(rng) * rng.gen_range(0.0..2.0);
    let off = model.dof();
    for k in 0..3 {
        theta[off + k] = t[k];
        theta[off + 3 + k] = w[k];
    }
    let wb = problem.world_vertices(theta.as_slice(), b).unwrap();
    let mid = midplane_from_closest(&closest_points(&wa, &wb).unwrap()).unwrap();
    let tilted = collision_barrier::barrier::SeparatingPlane::new(rot(random_unit(rng) * 0.1) * mid.n, mid.d + rng.gen_range(-0.03..0.03));
    let plane = if tilted.min_margin(&wa, &wb) > 0.02 { tilted } else { mid };
    PairInstance { problem, theta, a, b, plane }
}

/// Worst relative errors (gradients, Hessian blocks) of the pair penalty
/// blocks against central differences of the penalty value.
pub fn pair_fd_errors(inst: &PairInstance, include_norm: bool) -> (f64, f64) {
    use collision_barrier::barrier::{pair_penalty_blocks, pair_penalty_value, SeparatingPlane};
    use nalgebra::Vector4;
    let p = &inst.problem;
    let plane = if include_norm { inst.plane.scaled(0.9) } else { inst.plane };
    let geom = p.pair_geometry(inst.theta.as_slice(), inst.a, inst.b).unwrap();
    let blocks = |theta: &DVector<f64>, pl: &SeparatingPlane| {
        let g = p.pair_geometry(theta.as_slice(), inst.a, inst.b).unwrap();
        pair_penalty_blocks(&p.barrier, &g.side_i, &g.side_j, pl, include_norm).unwrap()
    };
    let value = |theta: &DVector<f64>, pl: &SeparatingPlane| {
        let wa = p.world_vertices(theta.as_slice(), inst.a).unwrap();
        let wb = p.world_vertices(theta.as_slice(), inst.b).unwrap();
        pair_penalty_value(&p.barrier, &wa, &wb, pl, include_norm)
    };
    let lift = |local: &DVector<f64>| {
        let mut t = inst.theta.clone();
        for (k, &g) in geom.dofs.iter().enumerate() {
            t[g] += local[k];
        }
        t
    };
    let pvec = |v: &DVector<f64>| SeparatingPlane::from_vec4(&Vector4::new(v[0], v[1], v[2], v[3]));
    let p0 = DVector::from_column_slice(plane.to_vec4().as_slice());
    let l0 = DVector::zeros(geom.dofs.len());
    let b0 = blocks(&inst.theta, &plane);

    let g_theta_fd = fd_gradient(|l| value(&lift(l), &plane), &l0, 1e-6);
    let g_p_fd = fd_gradient(|q| value(&inst.theta, &pvec(q)), &p0, 1e-7);
    let grad_p = DVector::from_column_slice(b0.grad_p.as_slice());
    let ge = rel_err(&b0.grad_theta, &g_theta_fd, 1e-8).max(rel_err(&grad_p, &g_p_fd, 1e-8));

    let gp_of = |t: &DVector<f64>, pl: &SeparatingPlane| DVector::from_column_slice(blocks(t, pl).grad_p.as_slice());
    let h_pp_fd = fd_jacobian(|q| gp_of(&inst.theta, &pvec(q)), &p0, 1e-6);
    let h_pt_fd = fd_jacobian(|l| gp_of(&lift(l), &plane), &l0, 1e-6);
    let h_tt_fd = fd_jacobian(|l| blocks(&lift(l), &plane).grad_theta, &l0, 1e-6);
    let h_pp = DMatrix::from_column_slice(4, 4, b0.h_pp.as_slice());
    let h_pt = DMatrix::from_fn(4, geom.dofs.len(), |r, c| b0.h_ptheta[(r, c)]);
    let he = rel_err_mat(&h_pp, &h_pp_fd, 1e-8).max(rel_err_mat(&h_pt, &h_pt_fd, 1e-8)).max(rel_err_mat(&b0.h_thetatheta, &h_tt_fd, 1e-8));
    (ge, he)
}

/// Several hulls on free, translating and static models, with up to ten
/// active pairs and a feasible plane for each.
pub struct MultiInstance {
    pub problem: Problem,
    pub theta: DVector<f64>,
    pub pairs: Vec<(usize, usize, collision_barrier::barrier::SeparatingPlane)>,
}

pub fn random_multi_instance(rng: &mut impl Rng, eta: f64) -> MultiInstance {
    use collision_barrier::geometry::{closest_points, midplane_from_closest};
    let free = KinematicModel::new(ModelKind::FreeRigidBody).unwrap();
    let tr = KinematicModel::new(ModelKind::Translation).unwrap();
    let kinds = [free.clone(), free, tr.clone(), tr];
    let moving = rng.gen_range(2..=4);
    let mut models = vec![("world".to_string(), KinematicModel::new(ModelKind::Static).unwrap())];
    for (k, m) in kinds.iter().take(moving).enumerate() {
        models.push((format!("m{k}"), m.clone()));
    }
    // Bodies on a jittered grid so every pair is disjoint.
    let mut bodies = Vec::new();
    let total = moving + 2;
    for k in 0..total {
        let (model, center) =
            if k < 2 { (0, Vector3::new(1.2 * k as f64, -1.2, 0.0) + random_unit(rng) * 0.1) } else { (k - 1, Vector3::zeros()) };
        bodies.push(hull_body(&format!("b{k}"), random_hull(rng, 7, center, 0.35), model, 0));
    }
    let problem = Problem::new("multi", models, bodies, Objective::default(), BarrierFunction::inverse(eta), 0.1, &[]).unwrap();
    let mut theta = DVector::zeros(problem.dof());
    for k in 0..moving {
        let off = problem.model_offset(k + 1);
        let slot = Vector3::new(1.2 * (k % 3) as f64, 1.2 * (k / 3) as f64, 0.0) + random_unit(rng) * 0.1;
        for c in 0..3 {
            theta[off + c] = slot[c];
        }
        if problem.models[k + 1].dof() == 6 {
            let w = random_unit(rng) * rng.gen_range(0.0..1.5);
            for c in 0..3 {
                theta[off + 3 + c] = w[c];
            }
        }
    }
    let world = problem.all_world_vertices(theta.as_slice()).unwrap();
    let mut candidates = Vec::new();
    for a in 0..total {
        for b in a + 1..total {
            if !problem.is_exempt(a, b) {
                candidates.push((a, b));
            }
        }
    }
    let keep = rng.gen_range(1..=candidates.len().min(10));
    let mut pairs = Vec::new();
    while pairs.len() < keep {
        let (a, b) = candidates.swap_remove(rng.gen_range(0..candidates.len()));
        let mid = midplane_from_closest(&closest_points(&world[a], &world[b]).unwrap()).unwrap();
        let tilted = collision_barrier::barrier::SeparatingPlane::new(rot(random_unit(rng) * 0.05) * mid.n, mid.d);
        let plane = if tilted.min_margin(&world[a], &world[b]) > 0.01 { tilted } else { mid };
        pairs.push((a, b, plane));
    }
    MultiInstance { problem, theta, pairs }
}

pub struct PairBlocks {
    pub dofs: Vec<usize>,
    pub blocks: collision_barrier::barrier::PairPenaltyBlocks,
    pub elim: collision_barrier::ecb::PlaneElimination,
    pub n: Vector3<f64>,
}

pub fn instance_blocks(inst: &MultiInstance, eps1: f64) -> Vec<PairBlocks> {
    use collision_barrier::barrier::pair_penalty_blocks;
    use collision_barrier::ecb::{eliminate_plane, kkt_plane_hessian};
    inst.pairs
        .iter()
        .map(|(a, b, plane)| {
            let g = inst.problem.pair_geometry(inst.theta.as_slice(), *a, *b).unwrap();
            let blocks = pair_penalty_blocks(&inst.problem.barrier, &g.side_i, &g.side_j, plane, false).unwrap();
            let h = kkt_plane_hessian(&blocks, plane, true);
            let elim = eliminate_plane(&h, &plane.n, eps1);
            PairBlocks { dofs: g.dofs, blocks, elim, n: plane.n }
        })
        .collect()
}

pub fn schur_system(obj_grad: &DVector<f64>, obj_hess: &DMatrix<f64>, pb: &[PairBlocks], eps2: f64) -> collision_barrier::ecb::SchurSystem {
    use collision_barrier::ecb::{assemble_schur_theta, SchurTerm};
    let terms: Vec<SchurTerm> = pb.iter().map(|p| SchurTerm { dofs: &p.dofs, blocks: &p.blocks, h_ij: &p.elim.h_ij }).collect();
    assemble_schur_theta(obj_grad, obj_hess, &terms, eps2, true).unwrap()
}

/// Joint Hessian over `[θ; p_1; ...; p_k]` with the given per-pair plane blocks.
pub fn joint_hessian(
    obj_hess: &DMatrix<f64>,
    pb: &[PairBlocks],
    plane_block: impl Fn(&PairBlocks) -> nalgebra::Matrix4<f64>,
) -> DMatrix<f64> {
    let n = obj_hess.nrows();
    let size = n + 4 * pb.len();
    let mut m = DMatrix::zeros(size, size);
    m.view_mut((0, 0), (n, n)).copy_from(obj_hess);
    for (i, p) in pb.iter().enumerate() {
        let o = n + 4 * i;
        for (a, &ga) in p.dofs.iter().enumerate() {
            for (b, &gb) in p.dofs.iter().enumerate() {
                m[(ga, gb)] += p.blocks.h_thetatheta[(a, b)];
            }
            for r in 0..4 {
                m[(o + r, ga)] += p.blocks.h_ptheta[(r, a)];
                m[(ga, o + r)] += p.blocks.h_ptheta[(r, a)];
            }
        }
        let h = plane_block(p);
        for r in 0..4 {
            for c in 0..4 {
                m[(o + r, o + c)] = h[(r, c)];
            }
        }
    }
    m
}

/// Relative difference between the elimination path and a dense solve of the
/// full KKT system, or `None` when the complement needed adjusting.
pub fn schur_vs_dense_kkt(inst: &MultiInstance, rng: &mut impl Rng) -> Option<f64> {
    use collision_barrier::ecb::{back_substitute_planes, solve_theta_step};
    let eps = 1e-3;
    let pb = instance_blocks(inst, eps);
    let n = inst.problem.dof();
    let q = random_vec(rng, n * n, 1.0);
    let q = DMatrix::from_column_slice(n, n, q.as_slice());
    let obj_hess = &q * q.transpose() + DMatrix::identity(n, n) * 5.0;
    let obj_grad = random_vec(rng, n, 1.0);
    let system = schur_system(&obj_grad, &obj_hess, &pb, eps);
    if system.h_theta != system.h_theta_unadjusted {
        return None;
    }
    let dtheta = solve_theta_step(&system).unwrap();
    let mut fast = dtheta.clone().data.as_vec().clone();
    for p in &pb {
        let local = DVector::from_iterator(p.dofs.len(), p.dofs.iter().map(|&g| dtheta[g]));
        fast.extend(back_substitute_planes(&p.elim.h_ij, &p.blocks, &local).iter());
    }
    let fast = DVector::from_vec(fast);

    let k = pb.len();
    let m = joint_hessian(&obj_hess, &pb, |p| p.elim.adjusted_h_pp);
    let size = n + 4 * k;
    let mut kkt = DMatrix::zeros(size + k, size + k);
    kkt.view_mut((0, 0), (size, size)).copy_from(&m);
    let mut rhs = DVector::zeros(size + k);
    let mut g = obj_grad.clone();
    for (i, p) in pb.iter().enumerate() {
        for (a, &ga) in p.dofs.iter().enumerate() {
            g[ga] += p.blocks.grad_theta[a];
        }
        for r in 0..4 {
            rhs[n + 4 * i + r] = -p.blocks.grad_p[r];
        }
        for c in 0..3 {
            kkt[(size + i, n + 4 * i + c)] = p.n[c];
            kkt[(n + 4 * i + c, size + i)] = p.n[c];
        }
    }
    rhs.rows_mut(0, n).copy_from(&(-g));
    let dense = kkt.lu().solve(&rhs).unwrap();
    Some(rel_err(&fast, &dense.rows(0, size).into_owned(), 1e-12))
}

/// Builds an objective Hessian `c I` that makes the joint Hessian (with the
/// raw plane blocks) exactly `⪰ eps I`, and returns (min eig of the joint
/// Hessian, min eig of the unadjusted complement). `None` when a plane block
/// alone is below `eps`.
pub fn complement_bound(inst: &MultiInstance, eps: f64) -> Option<(f64, f64)> {
    let pb = instance_blocks(inst, 1e-3);
    if pb.iter().any(|p| p.blocks.h_pp.symmetric_eigen().eigenvalues.min() <= 1.5 * eps) {
        return None;
    }
    let n = inst.problem.dof();
    let zero = DMatrix::zeros(n, n);
    let m0 = joint_hessian(&zero, &pb, |p| p.blocks.h_pp);
    let a = m0.view((0, 0), (n, n)).into_owned();
    let b = m0.view((0, n), (n, m0.ncols() - n)).into_owned();
    let d = m0.view((n, n), (m0.ncols() - n, m0.ncols() - n)).into_owned() - DMatrix::identity(m0.ncols() - n, m0.ncols() - n) * eps;
    let reduced = &a - &b * d.clone().try_inverse().unwrap() * b.transpose();
    let c = eps - reduced.symmetric_eigen().eigenvalues.min() + 1e-7;
    let obj_hess = DMatrix::identity(n, n) * c;
    let joint = joint_hessian(&obj_hess, &pb, |p| p.blocks.h_pp);
    let system = schur_system(&DVector::zeros(n), &obj_hess, &pb, 1e-3);
    Some((joint.symmetric_eigen().eigenvalues.min(), system.h_theta_unadjusted.symmetric_eigen().eigenvalues.min()))
}

pub fn pair_sides(inst: &PairInstance, theta: &DVector<f64>) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let w = inst.problem.all_world_vertices(theta.as_slice()).unwrap();
    (w[inst.a].clone(), w[inst.b].clone())
}

pub fn solve_pair(inst: &PairInstance, theta: &DVector<f64>, tol: f64) -> collision_barrier::icb::InnerSolveState {
    let (si, sj) = pair_sides(inst, theta);
    collision_barrier::icb::inner_solve(&inst.problem.barrier, &si, &sj, None, tol).unwrap()
}

/// Worst relative errors of the implicit plane derivatives (first, second)
/// against central differences of re-solved planes.
pub fn implicit_fd_errors(inst: &PairInstance) -> (f64, f64) {
    use collision_barrier::icb::implicit_derivatives;
    let tol = 1e-12;
    let geom = inst.problem.pair_geometry(inst.theta.as_slice(), inst.a, inst.b).unwrap();
    let state = solve_pair(inst, &inst.theta, tol);
    assert!(state.converged);
    let d = implicit_derivatives(&inst.problem.barrier, &state, &geom).unwrap();
    let k = geom.dofs.len();
    let h = 1e-5;
    let mut d1 = DMatrix::zeros(4, k);
    let mut d2: Vec<DMatrix<f64>> = (0..4).map(|_| DMatrix::zeros(k, k)).collect();
    for (col, &g) in geom.dofs.iter().enumerate() {
        let at = |s: f64| {
            let mut t = inst.theta.clone();
            t[g] += s;
            let st = solve_pair(inst, &t, tol);
            let gm = inst.problem.pair_geometry(t.as_slice(), inst.a, inst.b).unwrap();
            assert_eq!(gm.dofs, geom.dofs);
            (st.plane.to_vec4(), implicit_derivatives(&inst.problem.barrier, &st, &gm).unwrap().dp_dtheta)
        };
        let (pp, jp) = at(h);
        let (pm, jm) = at(-h);
        d1.set_column(col, &((pp - pm) / (2.0 * h)));
        let dj = (jp - jm) / (2.0 * h);
        for gamma in 0..4 {
            for row in 0..k {
                d2[gamma][(row, col)] = dj[(gamma, row)];
            }
        }
    }
    let analytic1 = DMatrix::from_column_slice(4, k, d.dp_dtheta.as_slice());
    let e1 = rel_err_mat(&analytic1, &d1, 1e-8);
    let e2 = (0..4).map(|g| rel_err_mat(&d.d2p_dtheta2[g], &d2[g], 1e-6)).fold(0.0, f64::max);
    (e1, e2)
}

/// Worst relative errors of the implicit objective's gradient and Hessian
/// against central differences of its value (planes re-solved each time).
pub fn implicit_objective_fd_errors(inst: &PairInstance, include_norm: bool) -> (f64, f64) {
    use collision_barrier::geometry::CollisionPairSet;
    use collision_barrier::icb::implicit_objective;
    let tol = 1e-12;
    let mut pairs = CollisionPairSet::new();
    pairs.insert(inst.a, inst.b);
    let eval = |t: &DVector<f64>| {
        let st = solve_pair(inst, t, tol);
        implicit_objective(&inst.problem, t, &pairs, &[st], include_norm).unwrap()
    };
    let (_, g, hmat) = eval(&inst.theta);
    let fd_g = fd_gradient(|t| eval(t).0, &inst.theta, 1e-6);
    let fd_h = fd_jacobian(|t| eval(t).1, &inst.theta, 1e-5);
    (rel_err(&g, &fd_g, 1e-6), rel_err_mat(&hmat, &fd_h, 1e-4))
}

type HullPair = (Vec<Vector3<f64>>, Vec<Vector3<f64>>);

/// Existence of the plane solution over disjoint, touching and overlapping
/// pairs: the solve must succeed exactly when the distance is positive.
pub fn check_existence(rng: &mut impl Rng, trials: usize) -> Result<(usize, usize), String> {
    use collision_barrier::geometry::closest_points;
    use collision_barrier::icb::inner_solve;
    let barrier = BarrierFunction::inverse(1e-3);
    let cube = |c: Vector3<f64>| -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for k in 0..8 {
            v.push(
                c + Vector3::new(
                    if k & 1 == 0 { -0.5 } else { 0.5 },
                    if k & 2 == 0 { -0.5 } else { 0.5 },
                    if k & 4 == 0 { -0.5 } else { 0.5 },
                ),
            );
        }
        v
    };
    let mut cases: Vec<HullPair> = vec![
        (cube(Vector3::zeros()), cube(Vector3::new(1.0, 0.0, 0.0))),
        (cube(Vector3::zeros()), cube(Vector3::new(1.0, 1.0, 0.0))),
        (cube(Vector3::zeros()), cube(Vector3::new(0.7, 0.2, 0.1))),
        (cube(Vector3::zeros()), cube(Vector3::new(1.0 + 1e-6, 0.3, 0.0))),
    ];
    // Disjoint, touching and overlapping in equal parts.
    for k in 0..trials {
        let a = random_hull(rng, 8, Vector3::zeros(), 0.5);
        let b = match k % 3 {
            0 => {
                let d = rng.gen_range(1.05..1.5);
                offset_hull(rng, 8, d, 0.5)
            }
            1 => {
                let b = offset_hull(rng, 8, 1.2, 0.5);
                let cp = closest_points(&a, &b).map_err(|e| e.to_string())?;
                let shift = cp.point_on_a - cp.point_on_b;
                b.iter().map(|v| v + shift).collect()
            }
            _ => {
                let d = rng.gen_range(0.0..0.3);
                offset_hull(rng, 8, d, 0.5)
            }
        };
        cases.push((a, b));
    }
    let (mut solved, mut rejected) = (0, 0);
    for (k, (a, b)) in cases.iter().enumerate() {
        let distance = closest_points(a, b).map_err(|e| e.to_string())?.distance;
        if k >= 4 && (k - 4) % 3 == 1 && distance != 0.0 {
            return Err(format!("case {k}: touching construction left distance {distance:e}"));
        }
        match inner_solve(&barrier, a, b, None, 1e-10) {
            Ok(st) => {
                if distance <= 0.0 {
                    return Err(format!("case {k}: solved a pair at distance {distance:e}"));
                }
                let separates = st.plane.min_margin(a, b) > 0.0 && st.plane.n.norm() < 1.0;
                if !st.converged || !separates {
                    return Err(format!("case {k}: plane not strictly separating or not converged"));
                }
            }
            Err(_) if distance <= 0.0 => {
                rejected += 1;
                continue;
            }
            Err(e) => return Err(format!("case {k}: failed at distance {distance:e}: {e}")),
        }
        solved += 1;
    }
    Ok((solved, rejected))
}

/// Largest plane difference between a cold solve and a solve warm started
/// from a different strictly separating plane.
pub fn uniqueness_gap(inst: &PairInstance) -> f64 {
    use collision_barrier::icb::inner_solve;
    let (si, sj) = pair_sides(inst, &inst.theta);
    let cold = inner_solve(&inst.problem.barrier, &si, &sj, None, 1e-12).unwrap();
    let other = inst.plane.scaled(0.5);
    let warm = inner_solve(&inst.problem.barrier, &si, &sj, Some(&other), 1e-12).unwrap();
    assert!(warm.warm && cold.converged && warm.converged);
    (cold.plane.to_vec4() - warm.plane.to_vec4()).amax()
}

/// Optimal plane-problem value for two unit cubes at each gap.
pub fn penalty_at_gaps(eta: f64, gaps: &[f64]) -> Vec<f64> {
    use collision_barrier::barrier::pair_penalty_value;
    use collision_barrier::icb::inner_solve;
    let barrier = BarrierFunction::inverse(eta);
    let a = ConvexBody::cuboid("a", Vector3::zeros(), Vector3::repeat(0.5), FrameRef { model: 0, link: 0 }).unwrap();
    gaps.iter()
        .map(|&g| {
            let shift = Vector3::new(1.0 + g, 0.2, 0.1);
            let b: Vec<Vector3<f64>> = a.local_vertices.iter().map(|v| v + shift).collect();
            let st = inner_solve(&barrier, &a.local_vertices, &b, None, 1e-12).unwrap();
            pair_penalty_value(&barrier, &a.local_vertices, &b, &st.plane, true)
        })
        .collect()
}
