//! Guidance and control: the PD tracking controller, its simulation-based
//! gain tuner, and teach-and-repeat.
//!
//! References are time-indexed: the controller chases where the taught
//! trajectory was at the same elapsed time, not the nearest path point.

mod repeat;
mod trajectory;
mod tune;

pub use repeat::{
    repeat, teach, Estimator, Feedback, Guidance, RepeatOptions, RepeatOutcome, RepeatStep,
    Repeater, TeachOutcome, DEFAULT_ABORT_BOUND, DEFAULT_BLEND,
};
pub use trajectory::{
    control_stream_from_table, control_stream_table, ControlStream, ReferenceTrajectory,
    TrajectorySample, CONTROL_COLUMNS, MAX_HEADING_GAP, MAX_POSITION_GAP, TRAJECTORY_COLUMNS,
};
pub use tune::{
    check_feasible, simulate_tracking, speed_limits, step_response_bounded, tracking_cost,
    tune_gains, SearchSpace, SpeedLimits, TuneOptions, TuneReport,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{angle_diff, rotation, ControlAction, Pose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    /// Surge proportional gain.
    pub alpha: f64,
    /// Heading proportional gain.
    pub beta: f64,
    /// Heading derivative gain.
    pub gamma: f64,
}

impl PdGains {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let g = Self { alpha, beta, gamma };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("non-finite gains {self:?}")))
        }
    }
}

/// Tracking error in the body frame of the estimate: `(e_x, e_y, e_ψ)`, with
/// the heading error as the shortest angular distance.
pub fn body_error(reference: &Pose, est: &Pose) -> Vector3<f64> {
    let world = Vector3::new(reference.x - est.x, reference.y - est.y, 0.0);
    let mut e = rotation(est.psi).transpose() * world;
    e[2] = angle_diff(reference.psi, est.psi);
    e
}

/// PD tracking law: `u_x = α·e_x`, `u_y = 0`, `u_ψ = β·e_ψ + γ·ė_ψ`, with
/// `ė_ψ` taken from the reference and estimated yaw rates. Saturated to ±1.
pub fn pd_control(
    gains: &PdGains,
    reference: &Pose,
    est: &Pose,
    est_rate_psi: f64,
    ref_rate_psi: f64,
) -> ControlAction {
    let e = body_error(reference, est);
    let e_rate = ref_rate_psi - est_rate_psi;
    ControlAction::new(gains.alpha * e[0], 0.0, gains.beta * e[2] + gains.gamma * e_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const G: PdGains = PdGains {
        alpha: 0.5,
        beta: 2.0,
        gamma: 0.7,
    };

    #[test]
    fn zero_error_gives_zero_action() {
        let p = Pose::new(1.0, -2.0, 0.4);
        assert_eq!(pd_control(&G, &p, &p, 0.1, 0.1), ControlAction::ZERO);
    }

    #[test]
    fn one_metre_ahead() {
        let u = pd_control(&G, &Pose::new(1.0, 0.0, 0.0), &Pose::default(), 0.0, 0.0);
        assert_eq!((u.ux(), u.uy(), u.upsi()), (0.5, 0.0, 0.0));
    }

    #[test]
    fn error_is_expressed_in_the_body_frame() {
        // facing +y, a reference 1 m along +y is straight ahead
        let e = body_error(&Pose::new(0.0, 1.0, PI / 2.0), &Pose::new(0.0, 0.0, PI / 2.0));
        assert!((e - Vector3::new(1.0, 0.0, 0.0)).abs().max() < 1e-15);
    }

    #[test]
    fn heading_error_takes_the_short_way_round() {
        let e = body_error(&Pose::new(0.0, 0.0, -3.0), &Pose::new(0.0, 0.0, 3.0));
        assert!((e[2] - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn gains_round_trip_through_toml() {
        let s = toml::to_string(&G).unwrap();
        assert_eq!(toml::from_str::<PdGains>(&s).unwrap(), G);
        assert!(toml::from_str::<PdGains>("alpha = 1.0\nbeta = 1.0\ngamma = 1.0\nzeta = 2.0").is_err());
        assert!(PdGains::new(f64::NAN, 1.0, 1.0).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-50.0..50.0f64, -50.0..50.0f64, -10.0..10.0f64).prop_map(|(x, y, p)| Pose::new(x, y, p))
    }

    fn rotate(p: &Pose, phi: f64) -> Pose {
        let (s, c) = phi.sin_cos();
        Pose::new(c * p.x - s * p.y, s * p.x + c * p.y, p.psi + phi)
    }

    proptest! {
        #[test]
        fn lateral_command_is_always_zero(
            r in arb_pose(), e in arb_pose(), a in -5.0..5.0f64, b in -5.0..5.0f64,
            k in prop::array::uniform3(-100.0..100.0f64),
        ) {
            let g = PdGains { alpha: k[0], beta: k[1], gamma: k[2] };
            prop_assert_eq!(pd_control(&g, &r, &e, a, b).uy(), 0.0);
        }

        #[test]
        fn equivariant_under_frame_rotation(
            r in arb_pose(), e in arb_pose(), phi in -10.0..10.0f64,
            rates in (-1.0..1.0f64, -1.0..1.0f64),
        ) {
            // keep the heading error away from the ±π cut, where wrapping may
            // legitimately flip its sign under rounding
            prop_assume!((angle_diff(r.psi, e.psi).abs() - PI).abs() > 1e-6);
            let g = PdGains { alpha: 0.3, beta: 0.2, gamma: 0.1 };
            let u0 = pd_control(&g, &r, &e, rates.0, rates.1);
            let u1 = pd_control(&g, &rotate(&r, phi), &rotate(&e, phi), rates.0, rates.1);
            prop_assert!((u0.as_vector() - u1.as_vector()).abs().max() < 1e-9);
        }

        #[test]
        fn heading_error_in_range(r in arb_pose(), e in arb_pose()) {
            let h = body_error(&r, &e)[2];
            prop_assert!(h > -PI && h <= PI);
        }
    }
}
