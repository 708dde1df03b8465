//! Scalar barrier and per-pair penalty assembly.
//!
//! A pair `(C_i, C_j)` separated by the plane `p = [n; d]` contributes
//!
//! ```text
//! P_ij(θ, p) = Σ_{x∈C_i} P(-(n·x(θ) + d)) + Σ_{x∈C_j} P(n·x(θ) + d)
//! ```
//!
//! and, inside the smoothed plane subproblem, the norm slack term `P(1 - |n|)`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix4xX, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::VertexKinematics;

/// Inverse barrier `P(x) = η / x` on `(0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierFunction {
    pub eta: f64,
}

impl Default for BarrierFunction {
    fn default() -> Self {
        Self { eta: 1e-4 }
    }
}

impl BarrierFunction {
    pub fn inverse(eta: f64) -> Self {
        Self { eta }
    }

    /// `P`, `P'`, `P''` or `P'''` at `x`.
    pub fn eval(&self, x: f64, order: usize) -> Result<f64> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::BoundaryViolation(x));
        }
        let d = self.derivatives(x);
        d.get(order).copied().ok_or_else(|| Error::InvalidInput(format!("barrier derivative order {order} not available")))
    }

    /// `[P, P', P'', P''']`; caller guarantees `x > 0`.
    #[inline]
    pub fn derivatives(&self, x: f64) -> [f64; 4] {
        let inv = 1.0 / x;
        let v = self.eta * inv;
        [v, -v * inv, 2.0 * v * inv * inv, -6.0 * v * inv * inv * inv]
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        if x > 0.0 {
            self.eta / x
        } else {
            f64::INFINITY
        }
    }
}

/// Plane `{y : n·y + d = 0}`; `C_i` lies on the negative side, `C_j` on the positive one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparatingPlane {
    pub n: Vector3<f64>,
    pub d: f64,
}

impl SeparatingPlane {
    pub fn new(n: Vector3<f64>, d: f64) -> Self {
        Self { n, d }
    }

    pub fn to_vec4(&self) -> Vector4<f64> {
        Vector4::new(self.n.x, self.n.y, self.n.z, self.d)
    }

    pub fn from_vec4(p: &Vector4<f64>) -> Self {
        Self { n: Vector3::new(p[0], p[1], p[2]), d: p[3] }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { n: self.n * s, d: self.d * s }
    }

    pub fn normalized(&self) -> Self {
        let r = self.n.norm();
        Self { n: self.n / r, d: self.d }
    }

    /// Margin of a point on the `C_i` side.
    #[inline]
    pub fn margin_i(&self, x: &Vector3<f64>) -> f64 {
        -(self.n.dot(x) + self.d)
    }

    /// Margin of a point on the `C_j` side.
    #[inline]
    pub fn margin_j(&self, x: &Vector3<f64>) -> f64 {
        self.n.dot(x) + self.d
    }

    /// Smallest margin over both vertex sets.
    pub fn min_margin(&self, side_i: &[Vector3<f64>], side_j: &[Vector3<f64>]) -> f64 {
        side_i.iter().map(|x| self.margin_i(x)).chain(side_j.iter().map(|x| self.margin_j(x))).fold(f64::INFINITY, f64::min)
    }
}

/// Value and derivative blocks of one pair's penalty. θ-indexed blocks live
/// in the pair's local dof space (the caller keeps the index map).
#[derive(Debug, Clone, PartialEq)]
pub struct PairPenaltyBlocks {
    pub value: f64,
    pub grad_p: Vector4<f64>,
    pub grad_theta: DVector<f64>,
    pub h_pp: Matrix4<f64>,
    /// 4 x L.
    pub h_ptheta: Matrix4xX<f64>,
    pub h_thetatheta: DMatrix<f64>,
}

impl PairPenaltyBlocks {
    pub fn zeros(ndof: usize) -> Self {
        Self {
            value: 0.0,
            grad_p: Vector4::zeros(),
            grad_theta: DVector::zeros(ndof),
            h_pp: Matrix4::zeros(),
            h_ptheta: Matrix4xX::zeros(ndof),
            h_thetatheta: DMatrix::zeros(ndof, ndof),
        }
    }
}

/// `P(1 - |n|)` with gradient and Hessian in `n`.
pub fn norm_barrier(barrier: &BarrierFunction, n: &Vector3<f64>) -> Result<(f64, Vector3<f64>, Matrix3<f64>)> {
    let r = n.norm();
    let slack = 1.0 - r;
    if !(slack > 0.0) || r == 0.0 {
        return Err(Error::BoundaryViolation(slack));
    }
    let [p0, p1, p2, _] = barrier.derivatives(slack);
    let u = n / r;
    // φ(r) = P(1 - r): φ' = -P', φ'' = P''
    let phi1 = -p1;
    let grad = u * phi1;
    let uu = u * u.transpose();
    let hess = uu * p2 + (Matrix3::identity() - uu) * (phi1 / r);
    Ok((p0, grad, hess))
}

/// Third derivative tensor of `P(1 - |n|)`; entry `[c][(a, b)]` is `∂³/∂n_a∂n_b∂n_c`.
pub fn norm_barrier_third(barrier: &BarrierFunction, n: &Vector3<f64>) -> Result<[Matrix3<f64>; 3]> {
    let r = n.norm();
    let slack = 1.0 - r;
    if !(slack > 0.0) || r == 0.0 {
        return Err(Error::BoundaryViolation(slack));
    }
    let [_, p1, p2, p3] = barrier.derivatives(slack);
    let u = n / r;
    let phi1 = -p1;
    let phi2 = p2;
    let phi3 = -p3;
    let proj = Matrix3::identity() - u * u.transpose();
    let k = phi2 / r - phi1 / (r * r);
    let mut out = [Matrix3::zeros(); 3];
    for (c, slab) in out.iter_mut().enumerate() {
        for a in 0..3 {
            for b in 0..3 {
                slab[(a, b)] = phi3 * u[a] * u[b] * u[c] + k * (proj[(a, c)] * u[b] + proj[(b, c)] * u[a] + proj[(a, b)] * u[c]);
            }
        }
    }
    Ok(out)
}

/// Penalty value from world positions only; `+∞` when a margin or the norm slack is not positive.
pub fn pair_penalty_value(
    barrier: &BarrierFunction,
    side_i: &[Vector3<f64>],
    side_j: &[Vector3<f64>],
    plane: &SeparatingPlane,
    include_norm_barrier: bool,
) -> f64 {
    let mut v = 0.0;
    for x in side_i {
        v += barrier.value(plane.margin_i(x));
    }
    for x in side_j {
        v += barrier.value(plane.margin_j(x));
    }
    if include_norm_barrier {
        v += barrier.value(1.0 - plane.n.norm());
    }
    v
}

/// Assembles value, gradient and Hessian blocks of `P_ij` (plus `P(1 - |n|)`
/// on the normal block when requested). All vertex kinematics must share
/// the same local dof space.
pub fn pair_penalty_blocks(
    barrier: &BarrierFunction,
    side_i: &[VertexKinematics],
    side_j: &[VertexKinematics],
    plane: &SeparatingPlane,
    include_norm_barrier: bool,
) -> Result<PairPenaltyBlocks> {
    let ndof = side_i.first().or(side_j.first()).map_or(0, |k| k.ndof());
    let mut blocks = PairPenaltyBlocks::zeros(ndof);
    let n = plane.n;
    for (sigma, side) in [(-1.0, side_i), (1.0, side_j)] {
        for k in side {
            let x = k.position;
            let m = sigma * (n.dot(&x) + plane.d);
            if !(m > 0.0) {
                return Err(Error::BoundaryViolation(m));
            }
            let [p0, p1, p2, _] = barrier.derivatives(m);
            let lifted = Vector4::new(x.x, x.y, x.z, 1.0);
            // nᵀ ∂x/∂θ
            let nj = k.jacobian.tr_mul(&n);
            blocks.value += p0;
            blocks.grad_p += lifted * (sigma * p1);
            blocks.grad_theta += &nj * (sigma * p1);
            blocks.h_pp += lifted * lifted.transpose() * p2;
            for col in 0..ndof {
                let s = p2 * nj[col];
                for row in 0..4 {
                    blocks.h_ptheta[(row, col)] += lifted[row] * s;
                }
                for row in 0..3 {
                    blocks.h_ptheta[(row, col)] += sigma * p1 * k.jacobian[(row, col)];
                }
            }
            blocks.h_thetatheta += &nj * nj.transpose() * p2;
            if p1 != 0.0 {
                blocks.h_thetatheta += k.contract_hessian(&n) * (sigma * p1);
            }
        }
    }
    if include_norm_barrier {
        let (v, g, h) = norm_barrier(barrier, &n)?;
        blocks.value += v;
        for a in 0..3 {
            blocks.grad_p[a] += g[a];
            for b in 0..3 {
                blocks.h_pp[(a, b)] += h[(a, b)];
            }
        }
    }
    Ok(blocks)
}
