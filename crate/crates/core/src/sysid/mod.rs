//! Parameter identification from mission logs.
//!
//! The unknowns are the friction coefficients and the torque map; mass and
//! inertia are measured beforehand and supplied as [`KnownParams`]. Fitting
//! minimises the Huber cost of normalised measurement residuals with a
//! damped Gauss-Newton iteration (see [`fit`]).

mod covariance;
mod fit;
mod huber;

pub use covariance::{estimate_covariances, CovarianceReport, MIN_COVARIANCE_SAMPLES};
pub use fit::{fit_dynamic, FitOptions, FitReport, Loss, ResidualDiagnostics};
pub use huber::{huber, huber_weight};

use nalgebra::{Matrix3, Vector3};

use crate::dynamics::{body_accel, step_velocity, BodyVelocity, DynamicParams};
use crate::error::{Error, Result};
use crate::sim::MissionLog;

pub const PARAM_COUNT: usize = 15;

/// Names of the packed parameters, in packing order.
pub const PARAM_NAMES: [&str; PARAM_COUNT] = [
    "dl_x", "dl_y", "dl_psi", "dc_x", "dc_y", "dc_psi", "T00", "T01", "T02", "T10", "T11", "T12",
    "T20", "T21", "T22",
];

/// Mass and yaw inertia, measured a priori.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnownParams {
    pub m: f64,
    pub inertia: f64,
}

impl From<&DynamicParams> for KnownParams {
    fn from(p: &DynamicParams) -> Self {
        Self {
            m: p.m,
            inertia: p.inertia,
        }
    }
}

/// Packed unknowns `(dl[3], dc[3], T[9] row-major)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector(pub [f64; PARAM_COUNT]);

impl ParamVector {
    pub fn pack(p: &DynamicParams) -> Self {
        let mut v = [0.0; PARAM_COUNT];
        v[0..3].copy_from_slice(&p.dl);
        v[3..6].copy_from_slice(&p.dc);
        for r in 0..3 {
            for c in 0..3 {
                v[6 + 3 * r + c] = p.torque_map[(r, c)];
            }
        }
        Self(v)
    }

    pub fn unpack(&self, known: KnownParams) -> DynamicParams {
        let v = &self.0;
        DynamicParams {
            m: known.m,
            inertia: known.inertia,
            dl: [v[0], v[1], v[2]],
            dc: [v[3], v[4], v[5]],
            torque_map: Matrix3::from_row_slice(&v[6..15]),
        }
    }

    /// Default starting point: friction at −1 and `T = diag(1, 1, I/m)`.
    pub fn default_init(known: KnownParams) -> Self {
        let mut v = [0.0; PARAM_COUNT];
        v[0..6].fill(-1.0);
        v[6] = 1.0;
        v[10] = 1.0;
        v[14] = known.inertia / known.m;
        Self(v)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Magnitude bound beyond which a candidate model counts as diverged.
const DIVERGENCE_BOUND: f64 = 1e6;

/// Model-implied `(ν̇x, ν̇y, νψ)` at every record, by forward simulation from
/// rest under the logged commands.
pub fn predict_measurements(
    p: &ParamVector,
    known: KnownParams,
    log: &MissionLog,
) -> Result<Vec<Vector3<f64>>> {
    let params = p.unpack(known);
    let mut out = Vec::with_capacity(log.len());
    let mut nu = Vector3::zeros();
    for (index, rec) in log.records.iter().enumerate() {
        let a = body_accel(&params, &BodyVelocity::from_vector(&nu), &rec.u);
        let z = Vector3::new(a[0], a[1], nu[2]);
        if !z.iter().all(|v| v.is_finite() && v.abs() < DIVERGENCE_BOUND) {
            return Err(Error::NonFiniteSimulation { index });
        }
        out.push(z);
        nu = step_velocity(&params, &nu, &rec.u, log.dt);
    }
    Ok(out)
}

/// Model-simulated body velocities from rest, aligned with the records.
pub(crate) fn simulate_velocities(
    params: &DynamicParams,
    log: &MissionLog,
) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::with_capacity(log.len());
    let mut nu = Vector3::<f64>::zeros();
    for (index, rec) in log.records.iter().enumerate() {
        if !nu.iter().all(|v| v.is_finite() && v.abs() < DIVERGENCE_BOUND) {
            return Err(Error::NonFiniteSimulation { index });
        }
        out.push(nu);
        nu = step_velocity(params, &nu, &rec.u, log.dt);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ControlAction;
    use crate::noise::NoiseModel;
    use crate::sim::{excitation_signal, run_mission, ChannelMask, MissionOptions};

    #[test]
    fn pack_unpack_is_bijective() {
        let p = DynamicParams::reference_vehicle();
        let v = ParamVector::pack(&p);
        assert_eq!(v.unpack(KnownParams::from(&p)), p);
        assert_eq!(ParamVector::pack(&v.unpack(KnownParams::from(&p))), v);
        assert_eq!(PARAM_NAMES.len(), 15);
    }

    #[test]
    fn true_params_reproduce_noiseless_log() {
        let p = DynamicParams::reference_vehicle();
        let u = excitation_signal(20.0, 0.01, ChannelMask::X_PSI, 3).unwrap();
        let opts = MissionOptions {
            process_noise: false,
            ..Default::default()
        };
        let log = run_mission(&p, &NoiseModel::zero(), &u, &opts).unwrap();
        let pred = predict_measurements(&ParamVector::pack(&p), KnownParams::from(&p), &log).unwrap();
        for (z, r) in pred.iter().zip(&log.records) {
            assert!((z - r.sensor.as_vector()).abs().max() < 1e-6);
        }
    }

    #[test]
    fn zero_controls_predict_zero() {
        let p = DynamicParams::reference_vehicle();
        let log = run_mission(
            &p,
            &NoiseModel::zero(),
            &vec![ControlAction::ZERO; 200],
            &MissionOptions::default(),
        )
        .unwrap();
        let pred = predict_measurements(&ParamVector::pack(&p), KnownParams::from(&p), &log).unwrap();
        assert!(pred.iter().all(|z| *z == Vector3::zeros()));
    }

    #[test]
    fn unstable_candidate_is_reported() {
        let p = DynamicParams::reference_vehicle();
        let u = vec![ControlAction::new(1.0, 0.0, 0.0); 3000];
        let log = run_mission(&p, &NoiseModel::zero(), &u, &MissionOptions::default()).unwrap();
        let mut bad = ParamVector::pack(&p);
        bad.0[0] = 50.0;
        bad.0[3] = 0.0;
        assert!(matches!(
            predict_measurements(&bad, KnownParams::from(&p), &log),
            Err(Error::NonFiniteSimulation { .. })
        ));
    }
}
