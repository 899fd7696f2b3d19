//! Noise covariance estimation from residual statistics.
//!
//! `Q` (IMU) is the sample covariance of the sensor minus the measurement the
//! reference state implies. `R` (process) is the sample covariance of the
//! one-step prediction error of the filter's process model over the reference
//! `(ν, ν̇)` trajectory. Logs with ground truth use it as the reference; for
//! field logs the reference is a surrogate built from the identified model and
//! zero-phase smoothed sensor channels, and the report says so.

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, Vector3, Vector6};

use super::{predict_measurements, simulate_velocities, KnownParams, ParamVector};
use crate::ekf::transition;
use crate::error::{Error, Result};
use crate::noise::{symmetrize, NoiseModel};
use crate::sim::{measurement_of, MissionLog};

/// Fewest records from which covariances are estimated.
pub const MIN_COVARIANCE_SAMPLES: usize = 100;

/// Half-width of the surrogate smoothing window, seconds.
const SMOOTHING_HALF_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub noise: NoiseModel,
    /// `R` came from the smoothed surrogate rather than ground truth.
    pub r_surrogate: bool,
    pub samples: usize,
}

fn sample_covariance<const N: usize>(xs: &[SVector<f64, N>]) -> SMatrix<f64, N, N> {
    let n = xs.len() as f64;
    let mean = xs.iter().fold(SVector::<f64, N>::zeros(), |acc, x| acc + x) / n;
    let mut c = SMatrix::<f64, N, N>::zeros();
    for x in xs {
        let d = x - mean;
        c += d * d.transpose();
    }
    symmetrize(&(c / (n - 1.0)))
}

/// Centred moving average applied forward then backward.
fn smooth(xs: &[f64], half: usize) -> Vec<f64> {
    let pass = |v: &[f64]| -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(v.len());
                v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    };
    let mut once = pass(xs);
    once.reverse();
    let mut twice = pass(&once);
    twice.reverse();
    twice
}

fn reference_states(log: &MissionLog, p: &ParamVector, known: KnownParams) -> Result<Vec<Vector6<f64>>> {
    if log.has_truth() {
        return Ok(log
            .records
            .iter()
            .map(|r| {
                let t = r.truth.expect("checked by has_truth");
                let (v, a) = (t.state.vel, t.accel);
                Vector6::new(v.vx, v.vy, v.vpsi, a.ax, a.ay, a.apsi)
            })
            .collect());
    }
    let vel = simulate_velocities(&p.unpack(known), log)?;
    let half = (SMOOTHING_HALF_WIDTH / log.dt).round().max(1.0) as usize;
    let channel = |f: fn(&crate::sim::SensorSample) -> f64| {
        smooth(&log.records.iter().map(|r| f(&r.sensor)).collect::<Vec<_>>(), half)
    };
    let ax = channel(|s| s.ax_meas);
    let ay = channel(|s| s.ay_meas);
    let gyro = channel(|s| s.gyro_z);
    let n = gyro.len();
    Ok((0..n)
        .map(|k| {
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
            let apsi = (gyro[hi] - gyro[lo]) / ((hi - lo).max(1) as f64 * log.dt);
            Vector6::new(vel[k][0], vel[k][1], gyro[k], ax[k], ay[k], apsi)
        })
        .collect())
}

/// Estimates `Q` and `R` for the identified model `p`.
pub fn estimate_covariances(
    log: &MissionLog,
    p: &ParamVector,
    known: KnownParams,
) -> Result<CovarianceReport> {
    if log.len() < MIN_COVARIANCE_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: log.len(),
            need: MIN_COVARIANCE_SAMPLES,
        });
    }
    log.validate()?;
    let params = p.unpack(known);
    let reference = reference_states(log, p, known)?;

    let meas_err: Vec<Vector3<f64>> = if log.has_truth() {
        log.records
            .iter()
            .map(|r| {
                let t = r.truth.expect("checked by has_truth");
                r.sensor.as_vector() - measurement_of(&t.state.vel, &t.accel)
            })
            .collect()
    } else {
        predict_measurements(p, known, log)?
            .iter()
            .zip(&log.records)
            .map(|(z, r)| r.sensor.as_vector() - z)
            .collect()
    };
    // the gyro sees vpsi directly and the accelerometers see ν̇; there is no
    // sway-yaw coupling in the sensor, so zero variance rows stay exactly zero
    let q: Matrix3<f64> = sample_covariance(&meas_err);

    let model_err: Vec<Vector6<f64>> = reference
        .windows(2)
        .zip(log.records.windows(2))
        .map(|(mu, rec)| mu[1] - transition(&params, &mu[0], &rec[0].u, &rec[1].u, log.dt))
        .collect();
    let r: Matrix6<f64> = sample_covariance(&model_err);

    let noise = NoiseModel::new(q, r)?;
    Ok(CovarianceReport {
        noise,
        r_surrogate: !log.has_truth(),
        samples: log.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlAction, DynamicParams};
    use crate::sim::{excitation_signal, run_mission, ChannelMask, MissionOptions};

    fn mission(noise: &NoiseModel, seconds: f64, process_noise: bool) -> MissionLog {
        let p = DynamicParams::reference_vehicle();
        let u = excitation_signal(seconds, 0.01, ChannelMask::X_PSI, 11).unwrap();
        let opts = MissionOptions {
            process_noise,
            seed: 5,
            ..Default::default()
        };
        run_mission(&p, noise, &u, &opts).unwrap()
    }

    fn truth() -> (ParamVector, KnownParams) {
        let p = DynamicParams::reference_vehicle();
        (ParamVector::pack(&p), KnownParams::from(&p))
    }

    #[test]
    fn noiseless_log_gives_vanishing_covariances() {
        let (p, k) = truth();
        let rep = estimate_covariances(&mission(&NoiseModel::zero(), 30.0, false), &p, k).unwrap();
        assert!(rep.noise.q_meas.abs().max() < 1e-8);
        assert!(rep.noise.r_model.abs().max() < 1e-8);
        assert!(!rep.r_surrogate);
    }

    #[test]
    fn injected_sensor_noise_is_recovered() {
        let (p, k) = truth();
        let q = Matrix3::from_diagonal(&Vector3::new(2.852, 0.0, 0.008));
        let n = NoiseModel::new(q, Matrix6::zeros()).unwrap();
        let rep = estimate_covariances(&mission(&n, 100.0, false), &p, k).unwrap();
        let est = rep.noise.q_meas;
        assert!((est[(0, 0)] / 2.852 - 1.0).abs() < 0.1, "{est}");
        assert!((est[(2, 2)] / 0.008 - 1.0).abs() < 0.1, "{est}");
        for i in 0..3 {
            assert_eq!(est[(1, i)], 0.0);
            assert_eq!(est[(i, 1)], 0.0);
        }
    }

    #[test]
    fn injected_process_noise_is_recovered() {
        let (p, k) = truth();
        let mut r = Matrix6::zeros();
        r[(3, 3)] = 0.01;
        r[(5, 5)] = 1e-4;
        let n = NoiseModel::new(Matrix3::zeros(), r).unwrap();
        let rep = estimate_covariances(&mission(&n, 100.0, true), &p, k).unwrap();
        let est = rep.noise.r_model;
        assert!((est[(3, 3)] / 0.01 - 1.0).abs() < 0.1, "{est}");
        assert!((est[(5, 5)] / 1e-4 - 1.0).abs() < 0.1, "{est}");
        assert!(est[(4, 4)].abs() < 1e-8);
    }

    #[test]
    fn surrogate_without_truth() {
        let (p, k) = truth();
        let q = Matrix3::from_diagonal(&Vector3::new(0.04, 0.0, 1e-4));
        let n = NoiseModel::new(q, Matrix6::zeros()).unwrap();
        let mut log = mission(&n, 60.0, false);
        log.records.iter_mut().for_each(|r| r.truth = None);
        let rep = estimate_covariances(&log, &p, k).unwrap();
        assert!(rep.r_surrogate);
        assert!((rep.noise.q_meas[(0, 0)] / 0.04 - 1.0).abs() < 0.1);
        assert!((rep.noise.q_meas[(2, 2)] / 1e-4 - 1.0).abs() < 0.1);
    }

    #[test]
    fn too_few_samples() {
        let (p, k) = truth();
        let log = run_mission(
            &DynamicParams::reference_vehicle(),
            &NoiseModel::zero(),
            &vec![ControlAction::ZERO; 50],
            &MissionOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            estimate_covariances(&log, &p, k),
            Err(Error::InsufficientSamples { got: 50, .. })
        ));
    }
}
