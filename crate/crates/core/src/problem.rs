//! A collision-constrained optimization problem: kinematic models stacked into
//! one configuration vector, convex bodies attached to their frames, the
//! objective, and the pair exemption policy.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::barrier::BarrierFunction;
use crate::error::{Error, Result};
use crate::geometry::{broadphase_pairs, closest_points, Aabb, CollisionPairSet, ConvexBody};
use crate::kinematics::{FrameEval, KinematicModel, ModelKind, VertexKinematics};

/// A body at one sample instant. Pose models have a single instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionObject {
    pub body: usize,
    pub sample: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveTerm {
    /// `mass * g * z` of the vertex centroid of a body (summed over its instants).
    Gravity { body: usize, mass: f64, g: f64 },
    /// `weight * Σ_i (θ_i - target_i)²` over `indices` (all when `None`).
    Regularizer { weight: f64, target: DVector<f64>, indices: Option<Vec<usize>> },
    /// `weight * |x(θ) - target|²` for a body-frame point at one instant.
    Target { object: usize, local_point: Vector3<f64>, target: Vector3<f64>, weight: f64 },
    /// `weight * Σ_s |q_{s+1} - 2 q_s + q_{s-1}|²` over the sampled inner configurations of a trajectory.
    Smoothness { model: usize, weight: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub terms: Vec<ObjectiveTerm>,
}

/// Vertex kinematics of both bodies of a pair over the union of their dofs.
#[derive(Debug, Clone)]
pub struct PairGeometry {
    /// Global dof indices of the local derivative slots (sorted).
    pub dofs: Vec<usize>,
    pub side_i: Vec<VertexKinematics>,
    pub side_j: Vec<VertexKinematics>,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub models: Vec<KinematicModel>,
    pub model_names: Vec<String>,
    model_offsets: Vec<usize>,
    dof: usize,
    pub bodies: Vec<ConvexBody>,
    pub objects: Vec<CollisionObject>,
    pub objective: Objective,
    pub barrier: BarrierFunction,
    pub broadphase_margin: f64,
    exempt_bodies: BTreeSet<(usize, usize)>,
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        models: Vec<(String, KinematicModel)>,
        bodies: Vec<ConvexBody>,
        objective: Objective,
        barrier: BarrierFunction,
        broadphase_margin: f64,
        exemptions: &[(usize, usize)],
    ) -> Result<Self> {
        if !(broadphase_margin > 0.0) {
            return Err(Error::InvalidInput("broadphase margin must be positive".into()));
        }
        if !(barrier.eta > 0.0) {
            return Err(Error::InvalidInput("barrier stiffness must be positive".into()));
        }
        let (model_names, models): (Vec<_>, Vec<_>) = models.into_iter().unzip();
        let mut model_offsets = Vec::with_capacity(models.len());
        let mut dof = 0;
        for m in &models {
            model_offsets.push(dof);
            dof += m.dof();
        }
        let mut objects = Vec::new();
        for (bi, b) in bodies.iter().enumerate() {
            let model =
                models.get(b.frame_ref.model).ok_or_else(|| Error::InvalidInput(format!("body {} refers to unknown model", b.id)))?;
            if b.frame_ref.link >= model.num_links() {
                return Err(Error::InvalidInput(format!("body {} refers to link {} out of range", b.id, b.frame_ref.link)));
            }
            let samples = model.num_samples();
            for s in 0..samples {
                let name = if model.is_trajectory() { format!("{}@{}", b.id, s) } else { b.id.clone() };
                objects.push(CollisionObject { body: bi, sample: s, name });
            }
        }
        let exempt_bodies = exemptions.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let problem = Self {
            name: name.into(),
            models,
            model_names,
            model_offsets,
            dof,
            bodies,
            objects,
            objective,
            barrier,
            broadphase_margin,
            exempt_bodies,
        };
        problem.validate_objective()?;
        Ok(problem)
    }

    /// Replaces the objective after validating its references.
    pub fn set_objective(&mut self, objective: Objective) -> Result<()> {
        let old = std::mem::replace(&mut self.objective, objective);
        if let Err(e) = self.validate_objective() {
            self.objective = old;
            return Err(e);
        }
        Ok(())
    }

    fn validate_objective(&self) -> Result<()> {
        for t in &self.objective.terms {
            let ok = match t {
                ObjectiveTerm::Gravity { body, mass, .. } => *body < self.bodies.len() && *mass >= 0.0,
                ObjectiveTerm::Regularizer { weight, target, indices } => {
                    *weight >= 0.0 && target.len() == self.dof && indices.as_ref().is_none_or(|ix| ix.iter().all(|&i| i < self.dof))
                }
                ObjectiveTerm::Target { object, weight, .. } => *object < self.objects.len() && *weight >= 0.0,
                ObjectiveTerm::Smoothness { model, weight } => *weight >= 0.0 && self.models.get(*model).is_some_and(|m| m.is_trajectory()),
            };
            if !ok {
                return Err(Error::Schema(format!("invalid objective term {t:?}")));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn model_offset(&self, model: usize) -> usize {
        self.model_offsets[model]
    }

    fn model_slice<'a>(&self, theta: &'a [f64], model: usize) -> &'a [f64] {
        let off = self.model_offsets[model];
        &theta[off..off + self.models[model].dof()]
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dof {
            return Err(Error::InvalidInput(format!("configuration has {} entries, problem expects {}", theta.len(), self.dof)));
        }
        Ok(())
    }

    /// Resolved frame of an object plus the global indices of its dofs.
    pub fn object_frame(&self, theta: &[f64], object: usize) -> Result<(FrameEval, Vec<usize>)> {
        self.check_theta(theta)?;
        let obj = &self.objects[object];
        let fr = self.bodies[obj.body].frame_ref;
        let frame = self.models[fr.model].frame(self.model_slice(theta, fr.model), fr.link, obj.sample)?;
        let off = self.model_offsets[fr.model];
        let dofs = frame.dofs().iter().map(|d| d + off).collect();
        Ok((frame, dofs))
    }

    pub fn object_has_dofs(&self, object: usize) -> bool {
        let obj = &self.objects[object];
        let fr = self.bodies[obj.body].frame_ref;
        match &self.models[fr.model].kind {
            ModelKind::Static => false,
            ModelKind::SerialChain(_) => fr.link > 0,
            _ => true,
        }
    }

    pub fn world_vertices(&self, theta: &[f64], object: usize) -> Result<Vec<Vector3<f64>>> {
        let (frame, _) = self.object_frame(theta, object)?;
        Ok(self.bodies[self.objects[object].body].local_vertices.iter().map(|v| frame.position(v)).collect())
    }

    pub fn all_world_vertices(&self, theta: &[f64]) -> Result<Vec<Vec<Vector3<f64>>>> {
        (0..self.objects.len()).map(|o| self.world_vertices(theta, o)).collect()
    }

    /// Pairs never considered for collision: an object with itself, two
    /// instants of different times, bodies on the same frame, two objects
    /// without dofs, and declared exemptions.
    pub fn is_exempt(&self, a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        let (oa, ob) = (&self.objects[a], &self.objects[b]);
        let (ba, bb) = (&self.bodies[oa.body], &self.bodies[ob.body]);
        let traj_a = self.models[ba.frame_ref.model].is_trajectory();
        let traj_b = self.models[bb.frame_ref.model].is_trajectory();
        if traj_a && traj_b && oa.sample != ob.sample {
            return true;
        }
        if ba.frame_ref == bb.frame_ref {
            return true;
        }
        if !self.object_has_dofs(a) && !self.object_has_dofs(b) {
            return true;
        }
        self.exempt_bodies.contains(&(oa.body.min(ob.body), oa.body.max(ob.body)))
    }

    pub fn broadphase(&self, world: &[Vec<Vector3<f64>>], existing: &CollisionPairSet) -> CollisionPairSet {
        broadphase_pairs(world, self.broadphase_margin, existing, |a, b| self.is_exempt(a, b))
    }

    /// Non-exempt pairs not in `active`, with the AABB separation of their
    /// bodies (a lower bound on their distance).
    pub fn inactive_gaps(&self, world: &[Vec<Vector3<f64>>], active: &CollisionPairSet) -> Vec<(usize, usize, f64)> {
        let boxes: Vec<Aabb> = world.iter().map(|v| Aabb::from_points(v)).collect();
        let mut out = Vec::new();
        for a in 0..world.len() {
            for b in a + 1..world.len() {
                if !self.is_exempt(a, b) && !active.contains(a, b) {
                    out.push((a, b, boxes[a].separation(&boxes[b])));
                }
            }
        }
        out
    }

    pub fn pair_geometry(&self, theta: &[f64], a: usize, b: usize) -> Result<PairGeometry> {
        let (fa, da) = self.object_frame(theta, a)?;
        let (fb, db) = self.object_frame(theta, b)?;
        let mut dofs: Vec<usize> = da.iter().chain(&db).copied().collect();
        dofs.sort_unstable();
        dofs.dedup();
        let slot = |g: &usize| dofs.binary_search(g).expect("dof in union");
        let sa: Vec<usize> = da.iter().map(slot).collect();
        let sb: Vec<usize> = db.iter().map(slot).collect();
        let l = dofs.len();
        let side_i = self.bodies[self.objects[a].body].local_vertices.iter().map(|v| fa.point(v).scatter(&sa, l)).collect();
        let side_j = self.bodies[self.objects[b].body].local_vertices.iter().map(|v| fb.point(v).scatter(&sb, l)).collect();
        Ok(PairGeometry { dofs, side_i, side_j })
    }

    /// Full pairwise audit (no broadphase): distance of every non-exempt pair.
    pub fn audit(&self, theta: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        let world = self.all_world_vertices(theta)?;
        let mut out = Vec::new();
        for a in 0..world.len() {
            for b in a + 1..world.len() {
                if !self.is_exempt(a, b) {
                    out.push((a, b, closest_points(&world[a], &world[b])?.distance));
                }
            }
        }
        Ok(out)
    }

    pub fn objective_value(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let mut v = 0.0;
        for t in &self.objective.terms {
            v += match t {
                ObjectiveTerm::Gravity { body, mass, g } => {
                    let mut z = 0.0;
                    for o in self.objects_of_body(*body) {
                        let w = self.world_vertices(theta, o)?;
                        z += w.iter().map(|p| p.z).sum::<f64>() / w.len() as f64;
                    }
                    mass * g * z
                }
                ObjectiveTerm::Regularizer { weight, target, indices } => {
                    weight * self.reg_indices(indices).map(|i| (theta[i] - target[i]).powi(2)).sum::<f64>()
                }
                ObjectiveTerm::Target { object, local_point, target, weight } => {
                    let (frame, _) = self.object_frame(theta, *object)?;
                    weight * (frame.position(local_point) - target).norm_squared()
                }
                ObjectiveTerm::Smoothness { model, weight } => {
                    let a = self.smoothness_operator(*model);
                    let x = DVector::from_column_slice(self.model_slice(theta, *model));
                    weight * (a * x).norm_squared()
                }
            };
        }
        Ok(v)
    }

    /// Value, gradient and Hessian of the objective.
    pub fn objective_derivatives(&self, theta: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = self.dof;
        let value = self.objective_value(theta)?;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for t in &self.objective.terms {
            match t {
                ObjectiveTerm::Gravity { body, mass, g } => {
                    for o in self.objects_of_body(*body) {
                        let (frame, dofs) = self.object_frame(theta, o)?;
                        let verts = &self.bodies[*body].local_vertices;
                        let s = mass * g / verts.len() as f64;
                        for v in verts {
                            let k = frame.point(v);
                            for (a, &ga) in dofs.iter().enumerate() {
                                grad[ga] += s * k.jacobian[(2, a)];
                                for (b, &gb) in dofs.iter().enumerate() {
                                    hess[(ga, gb)] += s * k.hessian[2][(a, b)];
                                }
                            }
                        }
                    }
                }
                ObjectiveTerm::Regularizer { weight, target, indices } => {
                    for i in self.reg_indices(indices) {
                        grad[i] += 2.0 * weight * (theta[i] - target[i]);
                        hess[(i, i)] += 2.0 * weight;
                    }
                }
                ObjectiveTerm::Target { object, local_point, target, weight } => {
                    let (frame, dofs) = self.object_frame(theta, *object)?;
                    let k = frame.point(local_point);
                    let r = k.position - target;
                    let jr = k.jacobian.tr_mul(&r);
                    let jj = k.jacobian.tr_mul(&k.jacobian);
                    let hr = k.contract_hessian(&r);
                    for (a, &ga) in dofs.iter().enumerate() {
                        grad[ga] += 2.0 * weight * jr[a];
                        for (b, &gb) in dofs.iter().enumerate() {
                            hess[(ga, gb)] += 2.0 * weight * (jj[(a, b)] + hr[(a, b)]);
                        }
                    }
                }
                ObjectiveTerm::Smoothness { model, weight } => {
                    let a = self.smoothness_operator(*model);
                    let x = DVector::from_column_slice(self.model_slice(theta, *model));
                    let ata = a.tr_mul(&a);
                    let g = &ata * x * (2.0 * weight);
                    let off = self.model_offsets[*model];
                    let m = g.len();
                    for i in 0..m {
                        grad[off + i] += g[i];
                        for j in 0..m {
                            hess[(off + i, off + j)] += 2.0 * weight * ata[(i, j)];
                        }
                    }
                }
            }
        }
        Ok((value, grad, hess))
    }

    fn objects_of_body(&self, body: usize) -> impl Iterator<Item = usize> + '_ {
        self.objects.iter().enumerate().filter(move |(_, o)| o.body == body).map(|(i, _)| i)
    }

    fn reg_indices<'a>(&'a self, indices: &'a Option<Vec<usize>>) -> Box<dyn Iterator<Item = usize> + 'a> {
        match indices {
            Some(ix) => Box::new(ix.iter().copied()),
            None => Box::new(0..self.dof),
        }
    }

    /// Linear map from control points to stacked second differences of sampled configurations.
    fn smoothness_operator(&self, model: usize) -> DMatrix<f64> {
        let ModelKind::SplineTrajectory(s) = &self.models[model].kind else {
            return DMatrix::zeros(0, self.models[model].dof());
        };
        let m = s.inner.dof();
        let ns = s.sample_times.len();
        let cols = self.models[model].dof();
        let mut sample_rows = Vec::with_capacity(ns);
        for t in &s.sample_times {
            let (k0, w) = s.spline.basis(*t);
            let mut row = DMatrix::zeros(m, cols);
            for (c, wc) in w.iter().enumerate() {
                for a in 0..m {
                    row[(a, (k0 + c) * m + a)] += wc;
                }
            }
            sample_rows.push(row);
        }
        let rows = ns.saturating_sub(2) * m;
        let mut op = DMatrix::zeros(rows, cols);
        for k in 1..ns.saturating_sub(1) {
            let d = &sample_rows[k + 1] - &sample_rows[k] * 2.0 + &sample_rows[k - 1];
            op.rows_mut((k - 1) * m, m).copy_from(&d);
        }
        op
    }
}
