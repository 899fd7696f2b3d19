//! Extended Kalman filter over body velocity and acceleration.
//!
//! The state is `μ = (vx, vy, vpsi, ax, ay, apsi)`. The IMU observes
//! `(ax, ay, vpsi)` directly, so the measurement model is linear; the
//! process model propagates velocity with the current acceleration estimate
//! and re-evaluates the vehicle model at the predicted velocity.
//! The pose is not part of the filter state: it is dead-reckoned from the
//! velocity estimate and drifts without external fixes.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::dynamics::{
    body_accel, rotation, step_velocity, BodyVelocity, ControlAction, DynamicParams, Pose,
};
use crate::error::{Error, Result};
use crate::noise::{symmetrize, NoiseModel};
use crate::sim::{record_row, MissionLog, SensorSample, LOG_COLUMNS, TRUTH_COLUMNS};
use crate::table::Table;

/// Innovation covariance condition number above which an update is refused.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Default initial covariance: a near-certain rest start.
pub const DEFAULT_INITIAL_VARIANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub mu: Vector6<f64>,
    pub sigma: Matrix6<f64>,
    /// Command in force when the acceleration estimate was formed.
    pub u: ControlAction,
}

impl Default for EkfState {
    fn default() -> Self {
        Self::at_rest()
    }
}

impl EkfState {
    pub fn at_rest() -> Self {
        Self {
            mu: Vector6::zeros(),
            sigma: Matrix6::identity() * DEFAULT_INITIAL_VARIANCE,
            u: ControlAction::ZERO,
        }
    }

    pub fn velocity(&self) -> BodyVelocity {
        BodyVelocity::new(self.mu[0], self.mu[1], self.mu[2])
    }

    fn check(self) -> Result<Self> {
        if self.mu.iter().chain(self.sigma.iter()).all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFiniteState)
        }
    }
}

fn split(mu: &Vector6<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(mu[0], mu[1], mu[2]),
        Vector3::new(mu[3], mu[4], mu[5]),
    )
}

fn model_accel(params: &DynamicParams, nu: &Vector3<f64>, u: &ControlAction) -> Vector3<f64> {
    body_accel(params, &BodyVelocity::from_vector(nu), u)
}

/// Process model `g(u, μ)`.
///
/// The velocity advances by the estimated acceleration, `ν̄ = ν + ν̇·dt`,
/// plus the higher-order part of the model's own RK4 increment under
/// `u_prev` (the command the acceleration estimate refers to):
///
/// ```text
/// ν̄ = RK4(ν; u_prev, dt) + (ν̇ − f(ν, u_prev))·dt
/// ν̇̄ = f(ν̄, u) = Φ(ν̄)ν̄ + M⁻¹Tu
/// ```
///
/// When the acceleration estimate agrees with the model this reproduces the
/// simulator's integrator exactly; any unmodelled acceleration is carried
/// into the velocity to first order.
pub fn transition(
    params: &DynamicParams,
    mu: &Vector6<f64>,
    u_prev: &ControlAction,
    u: &ControlAction,
    dt: f64,
) -> Vector6<f64> {
    let (nu, a) = split(mu);
    let nu_bar = if dt > 0.0 {
        let disturbance = a - model_accel(params, &nu, u_prev);
        step_velocity(params, &nu, u_prev, dt) + disturbance * dt
    } else {
        nu
    };
    let a_bar = model_accel(params, &nu_bar, u);
    Vector6::new(nu_bar[0], nu_bar[1], nu_bar[2], a_bar[0], a_bar[1], a_bar[2])
}

/// `∂ν̇/∂ν` of the vehicle model. The derivative of `|v|` at zero is taken as 0.
pub fn accel_jacobian(params: &DynamicParams, nu: &Vector3<f64>) -> Matrix3<f64> {
    let (vx, vy, r) = (nu[0], nu[1], nu[2]);
    let fr = |k: usize, v: f64, mass: f64| (params.dl[k] + 2.0 * params.dc[k] * v.abs()) / mass;
    Matrix3::new(
        fr(0, vx, params.m),
        r,
        vy,
        -r,
        fr(1, vy, params.m),
        -vx,
        0.0,
        0.0,
        fr(2, r, params.inertia),
    )
}

/// Sensitivity of one RK4 velocity step to its starting velocity.
fn rk4_sensitivity(
    params: &DynamicParams,
    nu: &Vector3<f64>,
    u: &ControlAction,
    dt: f64,
) -> Matrix3<f64> {
    let i3 = Matrix3::identity();
    let k1 = model_accel(params, nu, u);
    let j1 = accel_jacobian(params, nu);
    let n2 = nu + k1 * (dt / 2.0);
    let k2 = model_accel(params, &n2, u);
    let j2 = accel_jacobian(params, &n2) * (i3 + j1 * (dt / 2.0));
    let n3 = nu + k2 * (dt / 2.0);
    let k3 = model_accel(params, &n3, u);
    let j3 = accel_jacobian(params, &n3) * (i3 + j2 * (dt / 2.0));
    let n4 = nu + k3 * dt;
    let j4 = accel_jacobian(params, &n4) * (i3 + j3 * dt);
    i3 + (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (dt / 6.0)
}

/// Jacobian `G = ∂g/∂μ` of [`transition`].
///
/// Block form `[[Ψ − F(ν)dt, I·dt], [F(ν̄)(Ψ − F(ν)dt), F(ν̄)dt]]` with `Ψ`
/// the RK4 step sensitivity; to first order in `dt` this is
/// `[[I, I·dt], [F, F·dt]]`.
pub fn transition_jacobian(
    params: &DynamicParams,
    mu: &Vector6<f64>,
    u_prev: &ControlAction,
    u: &ControlAction,
    dt: f64,
) -> Matrix6<f64> {
    let (nu, _) = split(mu);
    let dnu_dnu = if dt > 0.0 {
        rk4_sensitivity(params, &nu, u_prev, dt) - accel_jacobian(params, &nu) * dt
    } else {
        Matrix3::identity()
    };
    let dnu_da = Matrix3::identity() * dt;
    let nu_bar = split(&transition(params, mu, u_prev, u, dt)).0;
    let f = accel_jacobian(params, &nu_bar);
    let mut g = Matrix6::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&dnu_dnu);
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&dnu_da);
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(f * dnu_dnu));
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(f * dnu_da));
    g
}

/// Measurement selector `H`: picks `(ax, ay, vpsi)`.
pub fn measurement_matrix() -> Matrix3x6<f64> {
    let mut h = Matrix3x6::zeros();
    h[(0, 3)] = 1.0;
    h[(1, 4)] = 1.0;
    h[(2, 2)] = 1.0;
    h
}

pub fn expected_measurement(mu: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(mu[3], mu[4], mu[2])
}

pub fn predict(
    state: &EkfState,
    u: &ControlAction,
    params: &DynamicParams,
    noise: &NoiseModel,
    dt: f64,
) -> Result<EkfState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidTimeStep(dt));
    }
    propagate(state, u, params, Some(&noise.r_model), dt)
}

fn propagate(
    state: &EkfState,
    u: &ControlAction,
    params: &DynamicParams,
    r_model: Option<&Matrix6<f64>>,
    dt: f64,
) -> Result<EkfState> {
    let g = transition_jacobian(params, &state.mu, &state.u, u, dt);
    let mut sigma = g * state.sigma * g.transpose();
    if let Some(r) = r_model {
        sigma += r;
    }
    EkfState {
        mu: transition(params, &state.mu, &state.u, u, dt),
        sigma: symmetrize(&sigma),
        u: *u,
    }
    .check()
}

/// Kalman gain for a predicted state, refusing ill-conditioned innovations.
fn gain(state: &EkfState, q: &Matrix3<f64>) -> Result<nalgebra::Matrix6x3<f64>> {
    let h = measurement_matrix();
    let s = symmetrize(&(h * state.sigma * h.transpose() + q));
    let eig = SymmetricEigen::new(s).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_INNOVATION_CONDITION) {
        return Err(Error::SingularInnovation { condition });
    }
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation { condition })?;
    Ok(state.sigma * h.transpose() * s_inv)
}

pub fn update(state: &EkfState, z: &SensorSample, noise: &NoiseModel) -> Result<EkfState> {
    let h = measurement_matrix();
    let k = gain(state, &noise.q_meas)?;
    let innovation = z.as_vector() - expected_measurement(&state.mu);
    let sigma = (Matrix6::identity() - k * h) * state.sigma;
    EkfState {
        mu: state.mu + k * innovation,
        sigma: symmetrize(&sigma),
        u: state.u,
    }
    .check()
}

/// Joseph-form covariance update, `(I−KH)Σ(I−KH)ᵀ + KQKᵀ`.
pub fn joseph_covariance(state: &EkfState, q: &Matrix3<f64>) -> Result<Matrix6<f64>> {
    let h = measurement_matrix();
    let k = gain(state, q)?;
    let a = Matrix6::identity() - k * h;
    Ok(a * state.sigma * a.transpose() + k * q * k.transpose())
}

/// Advances a pose by the body velocity in `mu` over `dt`, rotating with the
/// midpoint heading.
pub fn dead_reckon(pose: &Pose, mu: &Vector6<f64>, dt: f64) -> Pose {
    let nu = Vector3::new(mu[0], mu[1], mu[2]);
    let mid = pose.psi + 0.5 * nu[2] * dt;
    let d = rotation(mid) * nu * dt;
    Pose::new(pose.x + d[0], pose.y + d[1], pose.psi + d[2])
}

/// One output sample of the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterStep {
    pub t: f64,
    pub state: EkfState,
    pub pose: Pose,
    /// Measurement residual before the update.
    pub innovation: Vector3<f64>,
    /// Innovation covariance diagonal.
    pub innovation_var: Vector3<f64>,
}

/// Sequential filter driver with dead-reckoned pose.
#[derive(Debug, Clone)]
pub struct Ekf {
    params: DynamicParams,
    noise: NoiseModel,
    dt: f64,
    state: EkfState,
    pose: Pose,
    started: bool,
}

impl Ekf {
    pub fn new(params: DynamicParams, noise: NoiseModel, dt: f64, init: EkfState, pose: Pose) -> Self {
        Self {
            params,
            noise,
            dt,
            state: init,
            pose,
            started: false,
        }
    }

    pub fn state(&self) -> &EkfState {
        &self.state
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    /// Pose and velocity the filter will predict for the next sample, before
    /// that sample's command is known (the velocity does not depend on it).
    /// Before the first sample this is the initial estimate.
    pub fn lookahead(&self) -> (Pose, BodyVelocity) {
        if !self.started {
            return (self.pose, self.state.velocity());
        }
        let pose = dead_reckon(&self.pose, &self.state.mu, self.dt);
        let mu = transition(&self.params, &self.state.mu, &self.state.u, &self.state.u, self.dt);
        (pose, BodyVelocity::new(mu[0], mu[1], mu[2]))
    }

    /// Folds in the sample taken at the current tick with command `u` in
    /// force. The first call does not advance time: it only re-evaluates the
    /// acceleration estimate under `u` (adding the acceleration process noise)
    /// before the measurement update.
    pub fn step(&mut self, u: &ControlAction, z: &SensorSample) -> Result<FilterStep> {
        let prior = if self.started {
            let pose = dead_reckon(&self.pose, &self.state.mu, self.dt);
            let pred = predict(&self.state, u, &self.params, &self.noise, self.dt)?;
            self.pose = pose;
            pred
        } else {
            // no time elapses, but the acceleration under `u` still carries
            // the process noise of that instant
            let mut accel_only = Matrix6::zeros();
            accel_only
                .fixed_view_mut::<3, 3>(3, 3)
                .copy_from(&self.noise.accel_block());
            propagate(&self.state, u, &self.params, Some(&accel_only), 0.0)?
        };
        let h = measurement_matrix();
        let innovation = z.as_vector() - expected_measurement(&prior.mu);
        let innovation_var = (h * prior.sigma * h.transpose() + self.noise.q_meas).diagonal();
        self.state = update(&prior, z, &self.noise)?;
        self.started = true;
        Ok(FilterStep {
            t: z.t,
            state: self.state,
            pose: self.pose,
            innovation,
            innovation_var,
        })
    }
}

/// Runs the filter over a log. The pose starts at the logged truth when
/// available, otherwise at the origin.
pub fn run_filter(
    log: &MissionLog,
    params: &DynamicParams,
    noise: &NoiseModel,
    init: &EkfState,
) -> Result<Vec<FilterStep>> {
    let pose0 = log
        .records
        .first()
        .and_then(|r| r.truth)
        .map(|t| t.state.pose)
        .unwrap_or_default();
    let mut ekf = Ekf::new(params.clone(), noise.clone(), log.dt, *init, pose0);
    log.records
        .iter()
        .enumerate()
        .map(|(i, r)| ekf.step(&r.u, &r.sensor).map_err(|e| e.at(i)))
        .collect()
}

/// Velocity from integrating the accelerometer directly, with the yaw rate
/// read off the gyro: the baseline the filter has to beat.
pub fn integrate_accelerometer(log: &MissionLog, initial: BodyVelocity) -> Vec<BodyVelocity> {
    let mut v = initial;
    log.records
        .iter()
        .map(|r| {
            let out = BodyVelocity::new(v.vx, v.vy, r.sensor.gyro_z);
            v.vx += r.sensor.ax_meas * log.dt;
            v.vy += r.sensor.ay_meas * log.dt;
            out
        })
        .collect()
}

/// RMS body-velocity error against the log's ground truth, if it has one.
pub fn velocity_rmse(log: &MissionLog, est: &[BodyVelocity]) -> Option<f64> {
    if !log.has_truth() || est.len() != log.len() || est.is_empty() {
        return None;
    }
    let sq: f64 = log
        .records
        .iter()
        .zip(est)
        .map(|(r, v)| (r.truth.expect("checked").state.vel.as_vector() - v.as_vector()).norm_squared())
        .sum();
    Some((sq / est.len() as f64).sqrt())
}

pub const TRACE_COLUMNS: [&str; 15] = [
    "mu_vx", "mu_vy", "mu_vpsi", "mu_ax", "mu_ay", "mu_apsi", "sig_vx", "sig_vy", "sig_vpsi",
    "sig_ax", "sig_ay", "sig_apsi", "est_x", "est_y", "est_psi",
];

/// Mission log columns extended with the estimate, `diag(Σ)` and the
/// dead-reckoned pose.
pub fn trace_table(log: &MissionLog, steps: &[FilterStep]) -> Table {
    let mut cols: Vec<&str> = LOG_COLUMNS.to_vec();
    if log.has_truth() {
        cols.extend_from_slice(&TRUTH_COLUMNS);
    }
    cols.extend_from_slice(&TRACE_COLUMNS);
    let mut table = Table::new(&cols);
    for (r, s) in log.records.iter().zip(steps) {
        let mut row = record_row(r);
        row.extend(s.state.mu.iter());
        row.extend(s.state.sigma.diagonal().iter());
        row.extend_from_slice(&[s.pose.x, s.pose.y, s.pose.psi]);
        table.push(row);
    }
    table
}
