//! Planar rigid-body vehicle model.
//!
//! Body-frame dynamics with mass/inertia, Coriolis coupling and linear plus
//! quadratic friction:
//!
//! ```text
//! M ν̇ + C(ν) ν + D(ν) ν + g(η) = T u
//! η̇ = J(ψ) ν
//! ```
//!
//! The rotation axis coincides with the centre of mass, so `M` and `D` are
//! diagonal and yaw decouples from translation except through `C(ν)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted integration step.
pub const MAX_DT: f64 = 0.1;

/// Default integration step (100 Hz).
pub const DEFAULT_DT: f64 = 0.01;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Shortest signed angular distance `to - from`, in `(-π, π]`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_angle(to - from)
}

/// World-frame position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading, always in `(-π, π]`.
    pub psi: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.psi)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite()
    }
}

/// Body-frame twist: surge, sway and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BodyVelocity {
    pub vx: f64,
    pub vy: f64,
    pub vpsi: f64,
}

impl BodyVelocity {
    pub fn new(vx: f64, vy: f64, vpsi: f64) -> Self {
        Self { vx, vy, vpsi }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vpsi)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.vpsi.is_finite()
    }
}

/// Body-frame acceleration (time derivative of [`BodyVelocity`]).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BodyAccel {
    pub ax: f64,
    pub ay: f64,
    pub apsi: f64,
}

impl BodyAccel {
    pub fn new(ax: f64, ay: f64, apsi: f64) -> Self {
        Self { ax, ay, apsi }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.ax, self.ay, self.apsi)
    }
}

/// Actuator command, each component saturated to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlAction {
    ux: f64,
    uy: f64,
    upsi: f64,
}

fn saturate(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

impl ControlAction {
    pub const ZERO: ControlAction = ControlAction {
        ux: 0.0,
        uy: 0.0,
        upsi: 0.0,
    };

    /// Builds a command, clamping each component into `[-1, 1]`. NaN maps to 0.
    pub fn new(ux: f64, uy: f64, upsi: f64) -> Self {
        Self {
            ux: saturate(ux),
            uy: saturate(uy),
            upsi: saturate(upsi),
        }
    }

    /// Like [`ControlAction::new`] but also reports whether any component was clamped.
    pub fn saturating(ux: f64, uy: f64, upsi: f64) -> (Self, bool) {
        let u = Self::new(ux, uy, upsi);
        let clamped = u.ux != ux || u.uy != uy || u.upsi != upsi;
        (u, clamped)
    }

    pub fn ux(&self) -> f64 {
        self.ux
    }

    pub fn uy(&self) -> f64 {
        self.uy
    }

    pub fn upsi(&self) -> f64 {
        self.upsi
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.ux, self.uy, self.upsi)
    }
}

/// Physical parameters of the vehicle model.
///
/// `dl` and `dc` are the linear and quadratic friction coefficients per axis
/// (x, y, ψ). With the sign convention of `D(ν) = diag(-dl - dc|ν|)` they are
/// negative for a dissipative vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct DynamicParams {
    pub m: f64,
    pub inertia: f64,
    pub dl: [f64; 3],
    pub dc: [f64; 3],
    pub torque_map: Matrix3<f64>,
}

/// Flat on-disk layout: `m`, `inertia`, `dl[3]`, `dc[3]`, `T[9]` row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ParamsDoc {
    m: f64,
    inertia: f64,
    dl: [f64; 3],
    dc: [f64; 3],
    #[serde(rename = "T")]
    t: [f64; 9],
}

impl TryFrom<ParamsDoc> for DynamicParams {
    type Error = Error;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        let p = DynamicParams {
            m: doc.m,
            inertia: doc.inertia,
            dl: doc.dl,
            dc: doc.dc,
            torque_map: Matrix3::from_row_slice(&doc.t),
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<DynamicParams> for ParamsDoc {
    fn from(p: DynamicParams) -> Self {
        let mut t = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                t[3 * r + c] = p.torque_map[(r, c)];
            }
        }
        ParamsDoc {
            m: p.m,
            inertia: p.inertia,
            dl: p.dl,
            dc: p.dc,
            t,
        }
    }
}

impl DynamicParams {
    /// Ground-truth parameter set of the simulated reference vehicle.
    pub fn reference_vehicle() -> Self {
        Self {
            m: 1.47,
            inertia: 810.44,
            dl: [-7.0, -7.0, -500.553],
            dc: [-3.5, -3.5, -250.0],
            torque_map: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 29.99)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(Error::InvalidParams(format!("mass must be > 0, got {}", self.m)));
        }
        if !(self.inertia.is_finite() && self.inertia > 0.0) {
            return Err(Error::InvalidParams(format!(
                "inertia must be > 0, got {}",
                self.inertia
            )));
        }
        let finite = self.dl.iter().chain(self.dc.iter()).all(|v| v.is_finite())
            && self.torque_map.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Diagonal of the mass matrix `M = diag(m, m, I)`.
    pub fn mass_diagonal(&self) -> Vector3<f64> {
        Vector3::new(self.m, self.m, self.inertia)
    }

    pub fn mass_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.mass_diagonal())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("params always serialize")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse {
            line: e.span().map(|sp| line_of(s, sp.start)).unwrap_or(0),
            msg: e.message().to_string(),
        })
    }
}

pub(crate) fn line_of(s: &str, offset: usize) -> usize {
    s[..offset.min(s.len())].matches('\n').count() + 1
}

/// Full planar state: world pose plus body-frame twist.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub pose: Pose,
    pub vel: BodyVelocity,
}

impl VehicleState {
    pub fn is_finite(&self) -> bool {
        self.pose.is_finite() && self.vel.is_finite()
    }
}

/// `J(ψ)`: rotates body-frame vectors into the world frame.
pub fn rotation(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Coriolis-centripetal matrix `C(ν)`.
pub fn coriolis(params: &DynamicParams, nu: &BodyVelocity) -> Matrix3<f64> {
    let m = params.m;
    Matrix3::new(
        0.0,
        0.0,
        -m * nu.vy,
        0.0,
        0.0,
        m * nu.vx,
        m * nu.vy,
        -m * nu.vx,
        0.0,
    )
}

/// Damping matrix `D(ν) = diag(-dl_i - dc_i |ν_i|)`.
pub fn damping(params: &DynamicParams, nu: &BodyVelocity) -> Matrix3<f64> {
    let v = nu.as_vector();
    Matrix3::from_diagonal(&Vector3::from_fn(|i, _| {
        -params.dl[i] - params.dc[i] * v[i].abs()
    }))
}

/// Restoring forces `g(η)`. A planar ground vehicle has none.
pub fn restoring(_pose: &Pose) -> Vector3<f64> {
    Vector3::zeros()
}

/// State matrix `Φ(ν)` of the body-velocity dynamics, so that `ν̇ = Φ(ν) ν + M⁻¹ T u`.
pub fn state_matrix(params: &DynamicParams, nu: &BodyVelocity) -> Matrix3<f64> {
    let (m, i) = (params.m, params.inertia);
    let fr = |k: usize, v: f64, mass: f64| (params.dl[k] + params.dc[k] * v.abs()) / mass;
    Matrix3::new(
        fr(0, nu.vx, m),
        0.0,
        nu.vy,
        0.0,
        fr(1, nu.vy, m),
        -nu.vx,
        -m * nu.vy / i,
        m * nu.vx / i,
        fr(2, nu.vpsi, i),
    )
}

/// Body-frame acceleration for a given twist and command.
#[inline]
pub fn body_accel(params: &DynamicParams, nu: &BodyVelocity, u: &ControlAction) -> Vector3<f64> {
    let tau = params.torque_map * u.as_vector();
    let minv = params.mass_diagonal().map(|v| 1.0 / v);
    state_matrix(params, nu) * nu.as_vector() + minv.component_mul(&tau)
}

/// Continuous-time state derivative: world-frame pose rate and body acceleration.
pub fn derivative(
    params: &DynamicParams,
    state: &VehicleState,
    u: &ControlAction,
) -> Result<(Vector3<f64>, BodyAccel)> {
    if !state.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let pose_rate = rotation(state.pose.psi) * state.vel.as_vector();
    let accel = body_accel(params, &state.vel, u);
    Ok((pose_rate, BodyAccel::from_vector(&accel)))
}

/// One RK4 step with the command held over `dt`.
pub fn step(
    params: &DynamicParams,
    state: &VehicleState,
    u: &ControlAction,
    dt: f64,
) -> Result<VehicleState> {
    step_perturbed(params, state, u, &Vector3::zeros(), dt)
}

/// RK4 step with an additive body-acceleration perturbation held over `dt`.
pub fn step_perturbed(
    params: &DynamicParams,
    state: &VehicleState,
    u: &ControlAction,
    accel_perturbation: &Vector3<f64>,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::InvalidTimeStep(dt));
    }
    if !state.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let f = |eta: &Vector3<f64>, nu: &Vector3<f64>| {
        let pose_rate = rotation(eta[2]) * nu;
        let acc = body_accel(params, &BodyVelocity::from_vector(nu), u) + accel_perturbation;
        (pose_rate, acc)
    };
    let eta0 = state.pose.as_vector();
    let nu0 = state.vel.as_vector();
    let (e1, n1) = f(&eta0, &nu0);
    let (e2, n2) = f(&(eta0 + e1 * (dt / 2.0)), &(nu0 + n1 * (dt / 2.0)));
    let (e3, n3) = f(&(eta0 + e2 * (dt / 2.0)), &(nu0 + n2 * (dt / 2.0)));
    let (e4, n4) = f(&(eta0 + e3 * dt), &(nu0 + n3 * dt));
    let eta = eta0 + (e1 + e2 * 2.0 + e3 * 2.0 + e4) * (dt / 6.0);
    let nu = nu0 + (n1 + n2 * 2.0 + n3 * 2.0 + n4) * (dt / 6.0);
    let next = VehicleState {
        pose: Pose::new(eta[0], eta[1], eta[2]),
        vel: BodyVelocity::from_vector(&nu),
    };
    if !next.is_finite() {
        return Err(Error::NonFiniteState);
    }
    Ok(next)
}

/// RK4 step of the body-velocity dynamics alone.
///
/// Bit-identical to the velocity part of [`step`], since `ν̇` does not depend
/// on the pose.
#[inline]
pub fn step_velocity(
    params: &DynamicParams,
    nu: &Vector3<f64>,
    u: &ControlAction,
    dt: f64,
) -> Vector3<f64> {
    let f = |v: &Vector3<f64>| body_accel(params, &BodyVelocity::from_vector(v), u) + Vector3::zeros();
    let n1 = f(nu);
    let n2 = f(&(nu + n1 * (dt / 2.0)));
    let n3 = f(&(nu + n2 * (dt / 2.0)));
    let n4 = f(&(nu + n3 * dt));
    nu + (n1 + n2 * 2.0 + n3 * 2.0 + n4) * (dt / 6.0)
}
