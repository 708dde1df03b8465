//! Convex hulls in V-representation, closest-point queries and AABB broadphase.
//!
//! Closest points between two hulls are found with Wolfe's minimum-norm-point
//! algorithm run on the Minkowski difference `A - B`, accessed only through
//! its support mapping, so no difference vertices are ever enumerated. When
//! the closest pair is not unique (face/face or edge/face contact) the
//! returned pair is made canonical by projecting the midpoint of the two
//! contact-face centroids onto the contact region.

use nalgebra::{DMatrix, DVector, Vector3};
use std::collections::BTreeSet;

use crate::barrier::SeparatingPlane;
use crate::error::{Error, Result};

/// Distances at or below this (relative to the hull extent) are reported as contact.
pub const CONTACT_TOL: f64 = 1e-12;

/// Where a body hangs in the kinematic tree: model index and link index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub model: usize,
    pub link: usize,
}

#[derive(Debug, Clone)]
pub struct ConvexBody {
    pub id: String,
    pub local_vertices: Vec<Vector3<f64>>,
    pub frame_ref: FrameRef,
    /// True when the vertices affinely span 3D.
    pub volume_nonzero: bool,
}

impl ConvexBody {
    pub fn new(id: impl Into<String>, local_vertices: Vec<Vector3<f64>>, frame_ref: FrameRef) -> Result<Self> {
        let id = id.into();
        if local_vertices.is_empty() {
            return Err(Error::InvalidInput(format!("body {id} has no vertices")));
        }
        if local_vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("body {id} has non-finite vertices")));
        }
        let volume_nonzero = affine_rank(&local_vertices) == 3;
        Ok(Self { id, local_vertices, frame_ref, volume_nonzero })
    }

    /// Axis-aligned box with the given center and half extents.
    pub fn cuboid(id: impl Into<String>, center: Vector3<f64>, half: Vector3<f64>, frame_ref: FrameRef) -> Result<Self> {
        let mut verts = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    verts.push(center + Vector3::new(sx * half.x, sy * half.y, sz * half.z));
                }
            }
        }
        Self::new(id, verts, frame_ref)
    }
}

/// Rank of the centered point set (0..=3).
pub fn affine_rank(points: &[Vector3<f64>]) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut m = DMatrix::zeros(points.len(), 3);
    for (r, p) in points.iter().enumerate() {
        let c = p - centroid;
        m[(r, 0)] = c.x;
        m[(r, 1)] = c.y;
        m[(r, 2)] = c.z;
    }
    let svals = m.singular_values();
    let smax = svals.max();
    if smax <= 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s > 1e-9 * smax.max(1.0)).count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points(points: &[Vector3<f64>]) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn inflated(&self, margin: f64) -> Self {
        Self { min: self.min.add_scalar(-margin), max: self.max.add_scalar(margin) }
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    /// Largest per-axis separation between the boxes. A positive value is a
    /// lower bound on the distance between anything contained in them.
    pub fn separation(&self, other: &Aabb) -> f64 {
        (0..3).map(|k| (other.min[k] - self.max[k]).max(self.min[k] - other.max[k])).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPointResult {
    pub point_on_a: Vector3<f64>,
    pub point_on_b: Vector3<f64>,
    pub distance: f64,
}

/// A point of the Minkowski difference tagged with the vertices it came from.
#[derive(Clone, Copy)]
struct DiffPoint {
    p: Vector3<f64>,
    ia: usize,
    ib: usize,
}

fn support_min(points: &[Vector3<f64>], dir: &Vector3<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let v = p.dot(dir);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Weights `w` (summing to one) minimizing `|sum w_i s_i|` over the affine hull.
fn affine_minimizer(set: &[DiffPoint]) -> Vec<f64> {
    let k = set.len();
    if k == 1 {
        return vec![1.0];
    }
    let s0 = set[0].p;
    let mut d = DMatrix::zeros(3, k - 1);
    for (c, sp) in set.iter().enumerate().skip(1) {
        let col = sp.p - s0;
        d[(0, c - 1)] = col.x;
        d[(1, c - 1)] = col.y;
        d[(2, c - 1)] = col.z;
    }
    let rhs = -(d.transpose() * DVector::from_column_slice(s0.as_slice()));
    let gram = d.transpose() * &d;
    let mu = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.svd(true, true).solve(&rhs, 1e-14).unwrap_or_else(|_| DVector::zeros(k - 1)),
    };
    let mut w = Vec::with_capacity(k);
    w.push(1.0 - mu.sum());
    w.extend(mu.iter().copied());
    w
}

fn combine(set: &[DiffPoint], w: &[f64]) -> Vector3<f64> {
    set.iter().zip(w).fold(Vector3::zeros(), |acc, (s, &wi)| acc + s.p * wi)
}

struct MinNorm {
    set: Vec<DiffPoint>,
    weights: Vec<f64>,
    x: Vector3<f64>,
}

/// Wolfe's minimum-norm point of `conv(A) - conv(B)`.
fn min_norm_difference(a: &[Vector3<f64>], b: &[Vector3<f64>], scale_sq: f64) -> MinNorm {
    let first = DiffPoint { p: a[0] - b[0], ia: 0, ib: 0 };
    let mut set = vec![first];
    let mut weights = vec![1.0];
    let mut x = first.p;
    let zero_tol = (CONTACT_TOL * CONTACT_TOL) * scale_sq;

    for _major in 0..500 {
        if x.norm_squared() <= zero_tol {
            break;
        }
        let ia = support_min(a, &x);
        let ib = support_min(b, &(-x));
        let s = DiffPoint { p: a[ia] - b[ib], ia, ib };
        let max_sq = set.iter().map(|d| d.p.norm_squared()).fold(s.p.norm_squared(), f64::max);
        if x.norm_squared() - x.dot(&s.p) <= 1e-15 * max_sq {
            break;
        }
        if set.iter().any(|d| d.ia == ia && d.ib == ib) {
            break;
        }
        set.push(s);
        weights.push(0.0);

        for _minor in 0..100 {
            let v = affine_minimizer(&set);
            if v.iter().all(|&vi| vi > 1e-14) {
                weights = v;
                x = combine(&set, &weights);
                break;
            }
            let mut theta = 1.0_f64;
            for (wi, vi) in weights.iter().zip(&v) {
                if *vi <= 1e-14 && wi - vi > 0.0 {
                    theta = theta.min(wi / (wi - vi));
                }
            }
            for (wi, vi) in weights.iter_mut().zip(&v) {
                *wi = theta * vi + (1.0 - theta) * *wi;
            }
            let mut k = 0;
            while k < set.len() {
                if weights[k] <= 1e-14 {
                    set.remove(k);
                    weights.remove(k);
                } else {
                    k += 1;
                }
            }
            if set.is_empty() {
                set.push(s);
                weights.push(1.0);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            x = combine(&set, &weights);
            if set.len() == 1 {
                break;
            }
        }
        if set.len() == 4 {
            // Four affinely independent points with positive weights: the origin is inside.
            break;
        }
    }
    MinNorm { set, weights, x }
}

fn extent_scale_sq(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().chain(b).map(|p| p.norm_squared()).fold(1.0, f64::max)
}

fn validate(points: &[Vector3<f64>], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty vertex list")));
    }
    if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidInput(format!("{what}: non-finite vertex")));
    }
    Ok(())
}

/// Point of `conv(points)` nearest to `z`.
fn project_onto_hull(points: &[Vector3<f64>], z: &Vector3<f64>) -> Vector3<f64> {
    if points.len() == 1 {
        return points[0];
    }
    let target = [*z];
    let scale = extent_scale_sq(points, &target);
    let mn = min_norm_difference(points, &target, scale);
    mn.set.iter().zip(&mn.weights).fold(Vector3::zeros(), |acc, (d, w)| acc + points[d.ia] * *w)
}

/// Closest pair of points between the convex hulls of two vertex lists.
pub fn closest_points(world_verts_a: &[Vector3<f64>], world_verts_b: &[Vector3<f64>]) -> Result<ClosestPointResult> {
    validate(world_verts_a, "closest_points (a)")?;
    validate(world_verts_b, "closest_points (b)")?;
    let scale_sq = extent_scale_sq(world_verts_a, world_verts_b);
    let mn = min_norm_difference(world_verts_a, world_verts_b, scale_sq);

    let pa = mn.set.iter().zip(&mn.weights).fold(Vector3::zeros(), |acc, (d, w)| acc + world_verts_a[d.ia] * *w);

    let dist = mn.x.norm();
    if dist <= CONTACT_TOL * scale_sq.sqrt() {
        return Ok(ClosestPointResult { point_on_a: pa, point_on_b: pa, distance: 0.0 });
    }

    // v points from A to B.
    let v = -mn.x;
    let vhat = v / dist;
    let face_tol = 1e-10 * scale_sq.sqrt();
    let amax = world_verts_a.iter().map(|p| p.dot(&vhat)).fold(f64::NEG_INFINITY, f64::max);
    let bmin = world_verts_b.iter().map(|p| p.dot(&vhat)).fold(f64::INFINITY, f64::min);
    let face_a: Vec<Vector3<f64>> = world_verts_a.iter().filter(|p| p.dot(&vhat) >= amax - face_tol).copied().collect();
    let face_b: Vec<Vector3<f64>> = world_verts_b.iter().filter(|p| p.dot(&vhat) <= bmin + face_tol).copied().collect();

    let (point_on_a, point_on_b) = if face_a.len() == 1 {
        (face_a[0], face_a[0] + v)
    } else if face_b.len() == 1 {
        (face_b[0] - v, face_b[0])
    } else {
        let shifted_b: Vec<Vector3<f64>> = face_b.iter().map(|p| p - v).collect();
        let ca = face_a.iter().fold(Vector3::zeros(), |acc, p| acc + p) / face_a.len() as f64;
        let cb = shifted_b.iter().fold(Vector3::zeros(), |acc, p| acc + p) / shifted_b.len() as f64;
        let pa = dykstra_projection(&face_a, &shifted_b, &(0.5 * (ca + cb)));
        (pa, pa + v)
    };
    Ok(ClosestPointResult { point_on_a, point_on_b, distance: (point_on_b - point_on_a).norm() })
}

/// Projection of `z` onto `conv(a) ∩ conv(b)`; the result lies in `conv(a)`.
fn dykstra_projection(a: &[Vector3<f64>], b: &[Vector3<f64>], z: &Vector3<f64>) -> Vector3<f64> {
    let scale = extent_scale_sq(a, b).sqrt();
    let mut x = *z;
    let mut p = Vector3::zeros();
    let mut q = Vector3::zeros();
    let mut y = x;
    for _ in 0..2000 {
        y = project_onto_hull(a, &(x + p));
        p = x + p - y;
        let x_new = project_onto_hull(b, &(y + q));
        q = y + q - x_new;
        let change = (x_new - x).norm() + (x_new - y).norm();
        x = x_new;
        if change <= 1e-14 * scale {
            break;
        }
    }
    y
}

/// Middle sectioning plane between a closest pair: unit normal from A towards B.
pub fn midplane_from_closest(cp: &ClosestPointResult) -> Result<SeparatingPlane> {
    if cp.distance <= 0.0 {
        return Err(Error::DegeneratePair("a".into(), "b".into()));
    }
    let n = (cp.point_on_b - cp.point_on_a) / cp.distance;
    let mid = 0.5 * (cp.point_on_a + cp.point_on_b);
    Ok(SeparatingPlane { n, d: -n.dot(&mid) })
}

/// One active collision pair, ordered `a < b`, with the solver's plane for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub a: usize,
    pub b: usize,
    pub plane: Option<SeparatingPlane>,
}

/// The active set of collision pairs. Pairs are only ever added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollisionPairSet {
    pairs: Vec<PairState>,
    index: BTreeSet<(usize, usize)>,
}

impl CollisionPairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.index.contains(&(a.min(b), a.max(b)))
    }

    /// Inserts the pair if absent; returns true when it was new.
    pub fn insert(&mut self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        if self.index.insert(key) {
            self.pairs.push(PairState { a: key.0, b: key.1, plane: None });
            true
        } else {
            false
        }
    }

    pub fn pairs(&self) -> &[PairState] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [PairState] {
        &mut self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = &PairState> {
        self.pairs.iter()
    }
}

/// Adds every non-exempt pair whose margin-inflated AABBs overlap. Existing
/// pairs are kept even when their bodies have moved apart.
pub fn broadphase_pairs(
    world_verts: &[Vec<Vector3<f64>>],
    margin: f64,
    existing: &CollisionPairSet,
    is_exempt: impl Fn(usize, usize) -> bool,
) -> CollisionPairSet {
    let mut out = existing.clone();
    let boxes: Vec<Aabb> = world_verts.iter().map(|v| Aabb::from_points(v).inflated(margin)).collect();
    // Sweep along x.
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[i].min.x.total_cmp(&boxes[j].min.x).then(i.cmp(&j)));
    let mut found = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if boxes[j].min.x > boxes[i].max.x {
                break;
            }
            if boxes[i].overlaps(&boxes[j]) && !is_exempt(i.min(j), i.max(j)) {
                found.push((i.min(j), i.max(j)));
            }
        }
    }
    found.sort_unstable();
    for (a, b) in found {
        out.insert(a, b);
    }
    out
}
