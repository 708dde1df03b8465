//! Configuration models mapping θ to world-space points with exact first and
//! second derivatives.
//!
//! Every model is evaluated in two stages: [`KinematicModel::frame`] resolves
//! a link (and, for trajectories, a sample time) into a [`FrameEval`], which
//! then maps any body-frame point to a [`VertexKinematics`]. Derivatives are
//! expressed over the frame's *active* degrees of freedom only, listed by
//! [`FrameEval::dofs`]; the dense helpers expand them to the full model.

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::ConvexBody;

/// World position of a point with its derivatives over `L` degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexKinematics {
    pub position: Vector3<f64>,
    /// 3 x L.
    pub jacobian: Matrix3xX<f64>,
    /// One L x L matrix per world coordinate.
    pub hessian: [DMatrix<f64>; 3],
}

impl VertexKinematics {
    fn constant(position: Vector3<f64>, ndof: usize) -> Self {
        Self {
            position,
            jacobian: Matrix3xX::zeros(ndof),
            hessian: [DMatrix::zeros(ndof, ndof), DMatrix::zeros(ndof, ndof), DMatrix::zeros(ndof, ndof)],
        }
    }

    pub fn ndof(&self) -> usize {
        self.jacobian.ncols()
    }

    /// `sum_c n_c * d²x_c/dθdθ`.
    pub fn contract_hessian(&self, n: &Vector3<f64>) -> DMatrix<f64> {
        &self.hessian[0] * n.x + &self.hessian[1] * n.y + &self.hessian[2] * n.z
    }

    /// Re-indexes derivatives from a frame's active dofs into `ndof` slots.
    pub fn scatter(&self, slots: &[usize], ndof: usize) -> VertexKinematics {
        let mut out = VertexKinematics::constant(self.position, ndof);
        for (a, &sa) in slots.iter().enumerate() {
            for c in 0..3 {
                out.jacobian[(c, sa)] += self.jacobian[(c, a)];
            }
            for (b, &sb) in slots.iter().enumerate() {
                for c in 0..3 {
                    out.hessian[c][(sa, sb)] += self.hessian[c][(a, b)];
                }
            }
        }
        out
    }
}

/// Coefficients of `exp([ω]x) v = v + a(s) ω×v + b(s) ω×(ω×v)` with `s = |ω|²`,
/// and their first two derivatives in `s`.
#[derive(Debug, Clone, Copy)]
struct So3Coeffs {
    a: f64,
    b: f64,
    a_s: f64,
    b_s: f64,
    a_ss: f64,
    b_ss: f64,
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

impl So3Coeffs {
    fn new(s: f64) -> Self {
        if s < 1.0 {
            // a(s) = sum (-s)^k / (2k+1)!, b(s) = sum (-s)^k / (2k+2)!
            let mut c = So3Coeffs { a: 0.0, b: 0.0, a_s: 0.0, b_s: 0.0, a_ss: 0.0, b_ss: 0.0 };
            for k in 0..16_i32 {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let fa = sign / factorial(2 * k as u32 + 1);
                let fb = sign / factorial(2 * k as u32 + 2);
                let kf = f64::from(k);
                c.a += fa * s.powi(k);
                c.b += fb * s.powi(k);
                if k >= 1 {
                    c.a_s += fa * kf * s.powi(k - 1);
                    c.b_s += fb * kf * s.powi(k - 1);
                }
                if k >= 2 {
                    c.a_ss += fa * kf * (kf - 1.0) * s.powi(k - 2);
                    c.b_ss += fb * kf * (kf - 1.0) * s.powi(k - 2);
                }
            }
            c
        } else {
            let t = s.sqrt();
            let (sn, cs) = t.sin_cos();
            So3Coeffs {
                a: sn / t,
                b: (1.0 - cs) / s,
                a_s: (t * cs - sn) / (2.0 * t * s),
                b_s: (t * sn - 2.0 + 2.0 * cs) / (2.0 * s * s),
                a_ss: (-s * sn - 3.0 * t * cs + 3.0 * sn) / (4.0 * s * s * t),
                b_ss: (s * cs - 5.0 * t * sn + 8.0 - 8.0 * cs) / (4.0 * s * s * s),
            }
        }
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a rotation vector.
pub fn rotation_from_vector(w: &Vector3<f64>) -> Matrix3<f64> {
    let c = So3Coeffs::new(w.norm_squared());
    let k = skew(w);
    Matrix3::identity() + k * c.a + k * k * c.b
}

/// Revolute joint: translate by `offset` in the parent frame, then rotate about `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct RevoluteJoint {
    pub axis: Vector3<f64>,
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialChain {
    pub base_rotation: Matrix3<f64>,
    pub base_position: Vector3<f64>,
    pub joints: Vec<RevoluteJoint>,
}

/// Clamped uniform B-spline basis on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampedBSpline {
    pub degree: usize,
    pub num_ctrl: usize,
    knots: Vec<f64>,
}

impl ClampedBSpline {
    pub fn new(degree: usize, num_ctrl: usize) -> Result<Self> {
        if num_ctrl < degree + 1 {
            return Err(Error::InvalidInput(format!(
                "spline of degree {degree} needs at least {} control points, got {num_ctrl}",
                degree + 1
            )));
        }
        let spans = num_ctrl - degree;
        let mut knots = vec![0.0; degree + 1];
        for k in 1..spans {
            knots.push(k as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, num_ctrl, knots })
    }

    pub fn num_spans(&self) -> usize {
        self.num_ctrl - self.degree
    }

    /// Uniform sample times with `per_span` samples per knot span, endpoints included.
    pub fn uniform_samples(&self, per_span: usize) -> Vec<f64> {
        let n = per_span.max(1) * self.num_spans();
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    /// First nonzero basis index and the `degree + 1` basis values at `t`.
    pub fn basis(&self, t: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let t = t.clamp(0.0, 1.0);
        let span = if t >= 1.0 {
            self.num_ctrl - 1
        } else {
            let mut s = p;
            while s + 1 < self.num_ctrl && self.knots[s + 1] <= t {
                s += 1;
            }
            s
        };
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span - p, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineTrajectory {
    pub inner: Box<KinematicModel>,
    pub spline: ClampedBSpline,
    pub sample_times: Vec<f64>,
}

impl SplineTrajectory {
    /// Inner configuration at a sample time, `q(t) = sum_c B_c(t) θ_c`.
    pub fn sample_configuration(&self, theta: &[f64], time_index: usize) -> Vec<f64> {
        let m = self.inner.dof();
        let (k0, w) = self.spline.basis(self.sample_times[time_index]);
        let mut q = vec![0.0; m];
        for (c, wc) in w.iter().enumerate() {
            for a in 0..m {
                q[a] += wc * theta[(k0 + c) * m + a];
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Static,
    /// Three translational dofs.
    Translation,
    /// Translation followed by a rotation vector: `[t; ω]`.
    FreeRigidBody,
    SerialChain(SerialChain),
    SplineTrajectory(SplineTrajectory),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    pub kind: ModelKind,
}

impl KinematicModel {
    pub fn new(kind: ModelKind) -> Result<Self> {
        if let ModelKind::SplineTrajectory(s) = &kind {
            if matches!(s.inner.kind, ModelKind::SplineTrajectory(_) | ModelKind::Static) {
                return Err(Error::InvalidInput("spline trajectory needs a non-static, non-trajectory inner model".into()));
            }
            if s.sample_times.is_empty() || s.sample_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::InvalidInput("sample times must be non-empty and lie in [0, 1]".into()));
            }
        }
        if let ModelKind::SerialChain(c) = &kind {
            if c.joints.iter().any(|j| (j.axis.norm() - 1.0).abs() > 1e-9) {
                return Err(Error::InvalidInput("joint axes must be unit vectors".into()));
            }
        }
        Ok(Self { kind })
    }

    pub fn dof(&self) -> usize {
        match &self.kind {
            ModelKind::Static => 0,
            ModelKind::Translation => 3,
            ModelKind::FreeRigidBody => 6,
            ModelKind::SerialChain(c) => c.joints.len(),
            ModelKind::SplineTrajectory(s) => s.spline.num_ctrl * s.inner.dof(),
        }
    }

    pub fn num_links(&self) -> usize {
        match &self.kind {
            ModelKind::SerialChain(c) => c.joints.len() + 1,
            ModelKind::SplineTrajectory(s) => s.inner.num_links(),
            _ => 1,
        }
    }

    /// Number of sample instants (1 for pose models).
    pub fn num_samples(&self) -> usize {
        match &self.kind {
            ModelKind::SplineTrajectory(s) => s.sample_times.len(),
            _ => 1,
        }
    }

    pub fn is_trajectory(&self) -> bool {
        matches!(self.kind, ModelKind::SplineTrajectory(_))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dof() {
            return Err(Error::InvalidInput(format!("configuration has {} entries, model expects {}", theta.len(), self.dof())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("configuration has non-finite entries".into()));
        }
        Ok(())
    }

    /// Resolves a link at a sample instant into a point evaluator.
    pub fn frame(&self, theta: &[f64], link: usize, sample: usize) -> Result<FrameEval> {
        self.check_theta(theta)?;
        if link >= self.num_links() {
            return Err(Error::InvalidInput(format!("link {link} out of range")));
        }
        if sample >= self.num_samples() {
            return Err(Error::InvalidInput(format!("sample index {sample} out of range")));
        }
        Ok(self.frame_unchecked(theta, link, sample))
    }

    fn frame_unchecked(&self, theta: &[f64], link: usize, sample: usize) -> FrameEval {
        match &self.kind {
            ModelKind::Static => {
                FrameEval { dofs: vec![], kind: FrameKind::Fixed { rotation: Matrix3::identity(), position: Vector3::zeros() } }
            }
            ModelKind::Translation => {
                FrameEval { dofs: vec![0, 1, 2], kind: FrameKind::Translation { t: Vector3::new(theta[0], theta[1], theta[2]) } }
            }
            ModelKind::FreeRigidBody => {
                let w = Vector3::new(theta[3], theta[4], theta[5]);
                FrameEval {
                    dofs: (0..6).collect(),
                    kind: FrameKind::Rigid { t: Vector3::new(theta[0], theta[1], theta[2]), w, coeffs: So3Coeffs::new(w.norm_squared()) },
                }
            }
            ModelKind::SerialChain(chain) => {
                let mut rot = chain.base_rotation;
                let mut pos = chain.base_position;
                let mut origins = Vec::with_capacity(link);
                let mut axes = Vec::with_capacity(link);
                for (j, joint) in chain.joints.iter().enumerate().take(link) {
                    pos += rot * joint.offset;
                    let z = rot * joint.axis;
                    origins.push(pos);
                    axes.push(z);
                    rot *= Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(joint.axis), theta[j]).into_inner();
                }
                FrameEval { dofs: (0..link).collect(), kind: FrameKind::Chain { rotation: rot, position: pos, origins, axes } }
            }
            ModelKind::SplineTrajectory(s) => {
                let m = s.inner.dof();
                let q = s.sample_configuration(theta, sample);
                let inner = s.inner.frame_unchecked(&q, link, 0);
                let (k0, w) = s.spline.basis(s.sample_times[sample]);
                let weights: Vec<(usize, f64)> = w.into_iter().enumerate().map(|(c, wc)| (k0 + c, wc)).collect();
                let mut dofs = Vec::with_capacity(weights.len() * inner.dofs.len());
                for (ctrl, _) in &weights {
                    for a in &inner.dofs {
                        dofs.push(ctrl * m + a);
                    }
                }
                FrameEval { dofs, kind: FrameKind::Spline { inner: Box::new(inner), weights } }
            }
        }
    }

    /// World position only.
    pub fn point_position(&self, theta: &[f64], link: usize, sample: usize, local: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.frame(theta, link, sample)?.position(local))
    }

    /// Kinematics of one body vertex with derivatives over the full model configuration.
    pub fn vertex_kinematics(&self, theta: &[f64], body: &ConvexBody, vertex_index: usize) -> Result<VertexKinematics> {
        self.trajectory_sample_kinematics(theta, 0, body, vertex_index)
    }

    /// Kinematics of one body vertex at a trajectory sample instant, with
    /// derivatives over all control points.
    pub fn trajectory_sample_kinematics(
        &self,
        theta: &[f64],
        time_index: usize,
        body: &ConvexBody,
        vertex_index: usize,
    ) -> Result<VertexKinematics> {
        let v = body
            .local_vertices
            .get(vertex_index)
            .ok_or_else(|| Error::InvalidInput(format!("vertex index {vertex_index} out of range")))?;
        let frame = self.frame(theta, body.frame_ref.link, time_index)?;
        Ok(frame.point(v).scatter(frame.dofs(), self.dof()))
    }
}

#[derive(Debug, Clone)]
enum FrameKind {
    Fixed { rotation: Matrix3<f64>, position: Vector3<f64> },
    Translation { t: Vector3<f64> },
    Rigid { t: Vector3<f64>, w: Vector3<f64>, coeffs: So3Coeffs },
    Chain { rotation: Matrix3<f64>, position: Vector3<f64>, origins: Vec<Vector3<f64>>, axes: Vec<Vector3<f64>> },
    Spline { inner: Box<FrameEval>, weights: Vec<(usize, f64)> },
}

/// A resolved frame: maps body-frame points to world points with derivatives.
#[derive(Debug, Clone)]
pub struct FrameEval {
    dofs: Vec<usize>,
    kind: FrameKind,
}

impl FrameEval {
    /// Model dof indices the frame depends on, in derivative order.
    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    pub fn position(&self, v: &Vector3<f64>) -> Vector3<f64> {
        match &self.kind {
            FrameKind::Fixed { rotation, position } => rotation * v + position,
            FrameKind::Translation { t } => v + t,
            FrameKind::Rigid { t, w, coeffs } => {
                let u = w.cross(v);
                v + u * coeffs.a + w.cross(&u) * coeffs.b + t
            }
            FrameKind::Chain { rotation, position, .. } => rotation * v + position,
            FrameKind::Spline { inner, .. } => inner.position(v),
        }
    }

    pub fn point(&self, v: &Vector3<f64>) -> VertexKinematics {
        let n = self.dofs.len();
        match &self.kind {
            FrameKind::Fixed { .. } => VertexKinematics::constant(self.position(v), 0),
            FrameKind::Translation { t } => {
                let mut k = VertexKinematics::constant(v + t, 3);
                for c in 0..3 {
                    k.jacobian[(c, c)] = 1.0;
                }
                k
            }
            FrameKind::Rigid { t, w, coeffs } => rigid_point(v, t, w, coeffs),
            FrameKind::Chain { rotation, position, origins, axes } => {
                let x = rotation * v + position;
                let mut k = VertexKinematics::constant(x, n);
                for j in 0..n {
                    let col = axes[j].cross(&(x - origins[j]));
                    k.jacobian.set_column(j, &col);
                }
                for i in 0..n {
                    for j in i..n {
                        // d/dq_i of z_j x (x - o_j), valid for i <= j.
                        let r = x - origins[j];
                        let h = axes[i].cross(&axes[j]).cross(&r) + axes[j].cross(&axes[i].cross(&r));
                        for c in 0..3 {
                            k.hessian[c][(i, j)] = h[c];
                            k.hessian[c][(j, i)] = h[c];
                        }
                    }
                }
                k
            }
            FrameKind::Spline { inner, weights } => {
                let ik = inner.point(v);
                let m = inner.dofs.len();
                let mut k = VertexKinematics::constant(ik.position, n);
                for (ci, (_, wc)) in weights.iter().enumerate() {
                    for a in 0..m {
                        let col = ci * m + a;
                        for c in 0..3 {
                            k.jacobian[(c, col)] = wc * ik.jacobian[(c, a)];
                        }
                        for (di, (_, wd)) in weights.iter().enumerate() {
                            for b in 0..m {
                                let row = di * m + b;
                                for c in 0..3 {
                                    k.hessian[c][(col, row)] = wc * wd * ik.hessian[c][(a, b)];
                                }
                            }
                        }
                    }
                }
                k
            }
        }
    }
}

fn rigid_point(v: &Vector3<f64>, t: &Vector3<f64>, w: &Vector3<f64>, c: &So3Coeffs) -> VertexKinematics {
    let u = w.cross(v);
    let wv = w.dot(v);
    let s = w.norm_squared();
    // w×(w×v) = w (w·v) - s v
    let ww = w * wv - v * s;
    let x = v + u * c.a + ww * c.b + t;

    let du = -skew(v); // du_i/dw_j
    let mut dww = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            dww[(i, j)] = if i == j { wv } else { 0.0 } + w[i] * v[j] - 2.0 * w[j] * v[i];
        }
    }
    let da = w * (2.0 * c.a_s);
    let db = w * (2.0 * c.b_s);

    let mut k = VertexKinematics::constant(x, 6);
    for i in 0..3 {
        k.jacobian[(i, i)] = 1.0;
        for j in 0..3 {
            k.jacobian[(i, 3 + j)] = da[j] * u[i] + c.a * du[(i, j)] + db[j] * ww[i] + c.b * dww[(i, j)];
        }
    }
    for j in 0..3 {
        for l in j..3 {
            let djl = if j == l { 1.0 } else { 0.0 };
            let a_jl = 2.0 * c.a_s * djl + 4.0 * c.a_ss * w[j] * w[l];
            let b_jl = 2.0 * c.b_s * djl + 4.0 * c.b_ss * w[j] * w[l];
            for i in 0..3 {
                let dij = if i == j { 1.0 } else { 0.0 };
                let dil = if i == l { 1.0 } else { 0.0 };
                let d2ww = dij * v[l] + dil * v[j] - 2.0 * djl * v[i];
                let h = a_jl * u[i]
                    + da[j] * du[(i, l)]
                    + da[l] * du[(i, j)]
                    + b_jl * ww[i]
                    + db[j] * dww[(i, l)]
                    + db[l] * dww[(i, j)]
                    + c.b * d2ww;
                k.hessian[i][(3 + j, 3 + l)] = h;
                k.hessian[i][(3 + l, 3 + j)] = h;
            }
        }
    }
    k
}
