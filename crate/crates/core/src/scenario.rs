//! JSON scenario files.
//!
//! A scenario names its kinematic models, attaches convex bodies to model
//! links, lists objective terms by body/model name, and gives the initial
//! configuration per model. See `scenarios/README.md` for the schema.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::Deserialize;

use crate::barrier::BarrierFunction;
use crate::error::{Error, Result};
use crate::geometry::{ConvexBody, FrameRef};
use crate::kinematics::{rotation_from_vector, ClampedBSpline, KinematicModel, ModelKind, RevoluteJoint, SerialChain, SplineTrajectory};
use crate::problem::{Objective, ObjectiveTerm, Problem};
use crate::solver::SolverSettings;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub models: Vec<ModelSpec>,
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub pairs: PairSpec,
    #[serde(default)]
    pub objective: Vec<TermSpec>,
    #[serde(default)]
    pub initial: HashMap<String, Vec<f64>>,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Default sample times for trajectory models that do not set their own.
    #[serde(default)]
    pub samples: Option<SampleSpec>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: KindSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KindSpec {
    Static,
    Translation,
    FreeRigidBody,
    SerialChain {
        #[serde(default)]
        base_position: [f64; 3],
        /// Rotation vector.
        #[serde(default)]
        base_rotation: [f64; 3],
        joints: Vec<JointSpec>,
    },
    SplineTrajectory {
        inner: Box<KindSpec>,
        #[serde(default = "default_degree")]
        degree: usize,
        control_points: usize,
        #[serde(default)]
        samples: Option<SampleSpec>,
    },
}

fn default_degree() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub axis: [f64; 3],
    #[serde(default)]
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SampleSpec {
    PerSpan { per_span: usize },
    Times { times: Vec<f64> },
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec::PerSpan { per_span: 2 }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct BodySpec {
    pub id: String,
    pub model: String,
    #[serde(default)]
    pub link: usize,
    #[serde(flatten)]
    pub shape: ShapeSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ShapeSpec {
    Cuboid { center: [f64; 3], half_extents: [f64; 3] },
    Vertices { vertices: Vec<[f64; 3]> },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    /// Body id pairs never tested for collision.
    #[serde(default)]
    pub exempt: Vec<[String; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermSpec {
    Gravity {
        body: String,
        mass: f64,
        #[serde(default = "default_g")]
        g: f64,
    },
    Regularizer {
        weight: f64,
        /// Restricts the term to one model; indices are then model-local.
        #[serde(default)]
        model: Option<String>,
        /// Defaults to the initial configuration.
        #[serde(default)]
        target: Option<Vec<f64>>,
        #[serde(default)]
        indices: Option<Vec<usize>>,
    },
    Target {
        body: String,
        #[serde(default)]
        sample: usize,
        #[serde(default)]
        point: [f64; 3],
        target: [f64; 3],
        weight: f64,
    },
    Smoothness {
        model: String,
        weight: f64,
    },
}

fn default_g() -> f64 {
    9.81
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SolverSpec {
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub broadphase_margin: Option<f64>,
    #[serde(flatten)]
    pub settings: SolverSettings,
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: Problem,
    pub initial: DVector<f64>,
    pub settings: SolverSettings,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn build_kind(spec: &KindSpec, default_samples: &SampleSpec) -> Result<ModelKind> {
    Ok(match spec {
        KindSpec::Static => ModelKind::Static,
        KindSpec::Translation => ModelKind::Translation,
        KindSpec::FreeRigidBody => ModelKind::FreeRigidBody,
        KindSpec::SerialChain { base_position, base_rotation, joints } => ModelKind::SerialChain(SerialChain {
            base_rotation: rotation_from_vector(&v3(*base_rotation)),
            base_position: v3(*base_position),
            joints: joints
                .iter()
                .map(|j| {
                    let axis = v3(j.axis);
                    if axis.norm() == 0.0 {
                        return Err(Error::Schema("joint axis must be nonzero".into()));
                    }
                    Ok(RevoluteJoint { axis: axis.normalize(), offset: v3(j.offset) })
                })
                .collect::<Result<_>>()?,
        }),
        KindSpec::SplineTrajectory { inner, degree, control_points, samples } => {
            let spline = ClampedBSpline::new(*degree, *control_points)?;
            let sample_times = match samples.as_ref().unwrap_or(default_samples) {
                SampleSpec::PerSpan { per_span } => spline.uniform_samples(*per_span),
                SampleSpec::Times { times } => times.clone(),
            };
            let inner = KinematicModel::new(build_kind(inner, default_samples)?)?;
            ModelKind::SplineTrajectory(SplineTrajectory { inner: Box::new(inner), spline, sample_times })
        }
    })
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => Error::Schema(e.to_string()),
            serde_json::error::Category::Io => Error::Io(e.to_string()),
            _ => Error::Parse(e.to_string()),
        })
    }

    /// Builds the problem, the initial configuration and settings, and checks
    /// that no non-exempt pair starts in contact.
    pub fn build(&self) -> Result<Scenario> {
        let default_samples = self.samples.clone().unwrap_or_default();
        let mut models = Vec::with_capacity(self.models.len());
        let mut model_index = HashMap::new();
        for (i, m) in self.models.iter().enumerate() {
            if model_index.insert(m.name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate model name {}", m.name)));
            }
            models.push((m.name.clone(), KinematicModel::new(build_kind(&m.kind, &default_samples)?)?));
        }
        let find_model = |name: &str| model_index.get(name).copied().ok_or_else(|| Error::Schema(format!("unknown model {name}")));

        let mut bodies = Vec::with_capacity(self.bodies.len());
        let mut body_index = HashMap::new();
        for (i, b) in self.bodies.iter().enumerate() {
            if body_index.insert(b.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate body id {}", b.id)));
            }
            let frame_ref = FrameRef { model: find_model(&b.model)?, link: b.link };
            let body = match &b.shape {
                ShapeSpec::Cuboid { center, half_extents } => ConvexBody::cuboid(b.id.clone(), v3(*center), v3(*half_extents), frame_ref)?,
                ShapeSpec::Vertices { vertices } => ConvexBody::new(b.id.clone(), vertices.iter().map(|v| v3(*v)).collect(), frame_ref)?,
            };
            bodies.push(body);
        }
        let find_body = |name: &str| body_index.get(name).copied().ok_or_else(|| Error::Schema(format!("unknown body {name}")));

        let mut offsets = Vec::with_capacity(models.len());
        let mut dof = 0;
        for (_, m) in &models {
            offsets.push(dof);
            dof += m.dof();
        }
        let mut initial = DVector::zeros(dof);
        for (name, values) in &self.initial {
            let mi = find_model(name)?;
            let ndof = models[mi].1.dof();
            if values.len() != ndof {
                return Err(Error::Schema(format!("initial values for {name}: expected {ndof}, got {}", values.len())));
            }
            initial.rows_mut(offsets[mi], ndof).copy_from_slice(values);
        }

        let exemptions = self.pairs.exempt.iter().map(|[a, b]| Ok((find_body(a)?, find_body(b)?))).collect::<Result<Vec<_>>>()?;
        let barrier = BarrierFunction::inverse(self.solver.eta.unwrap_or(BarrierFunction::default().eta));
        let margin = self.solver.broadphase_margin.unwrap_or(0.1);
        let mut problem = Problem::new(self.name.clone(), models, bodies, Objective::default(), barrier, margin, &exemptions)?;

        let mut terms = Vec::with_capacity(self.objective.len());
        for t in &self.objective {
            terms.push(match t {
                TermSpec::Gravity { body, mass, g } => ObjectiveTerm::Gravity { body: find_body(body)?, mass: *mass, g: *g },
                TermSpec::Regularizer { weight, model, target, indices } => {
                    let (off, n) = match model {
                        Some(m) => {
                            let mi = find_model(m)?;
                            (offsets[mi], problem.models[mi].dof())
                        }
                        None => (0, dof),
                    };
                    let mut full_target = initial.clone();
                    if let Some(tv) = target {
                        if tv.len() != n {
                            return Err(Error::Schema(format!("regularizer target has {} entries, expected {n}", tv.len())));
                        }
                        full_target.rows_mut(off, n).copy_from_slice(tv);
                    }
                    let ix: Vec<usize> = match indices {
                        Some(ix) => {
                            if ix.iter().any(|&i| i >= n) {
                                return Err(Error::Schema("regularizer index out of range".into()));
                            }
                            ix.iter().map(|i| i + off).collect()
                        }
                        None => (off..off + n).collect(),
                    };
                    ObjectiveTerm::Regularizer { weight: *weight, target: full_target, indices: Some(ix) }
                }
                TermSpec::Target { body, sample, point, target, weight } => {
                    let bi = find_body(body)?;
                    let object = problem
                        .objects
                        .iter()
                        .position(|o| o.body == bi && o.sample == *sample)
                        .ok_or_else(|| Error::Schema(format!("target sample {sample} out of range for {body}")))?;
                    ObjectiveTerm::Target { object, local_point: v3(*point), target: v3(*target), weight: *weight }
                }
                TermSpec::Smoothness { model, weight } => ObjectiveTerm::Smoothness { model: find_model(model)?, weight: *weight },
            });
        }
        problem.set_objective(Objective { terms })?;

        check_feasible(&problem, &initial)?;
        Ok(Scenario { problem, initial, settings: self.solver.settings.clone() })
    }
}

/// Rejects configurations where any broadphase-active, non-exempt pair has zero distance.
pub fn check_feasible(problem: &Problem, theta: &DVector<f64>) -> Result<()> {
    let world = problem.all_world_vertices(theta.as_slice())?;
    let pairs = problem.broadphase(&world, &Default::default());
    for ps in pairs.iter() {
        let cp = crate::geometry::closest_points(&world[ps.a], &world[ps.b])?;
        if cp.distance <= 0.0 {
            return Err(Error::InfeasibleStart(problem.objects[ps.a].name.clone(), problem.objects[ps.b].name.clone()));
        }
    }
    Ok(())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path.as_ref())?;
    ScenarioFile::from_json(&text)?.build()
}
