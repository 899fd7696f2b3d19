//! Gain tuning by closed-loop simulation.
//!
//! The cost is `Σ_t ρ(‖η_ref(t) − η(t)‖)` with `ρ` the Huber penalty and the
//! heading component wrapped. It is non-smooth through saturation, so the
//! search is a deterministic coordinate-descent grid refinement in log-gain
//! space: each round sweeps one gain at a time over a grid around the current
//! best, then halves the grid span.

use rayon::prelude::*;

use super::{pd_control, PdGains, ReferenceTrajectory};
use crate::dynamics::{angle_diff, step, DynamicParams, Pose, VehicleState};
use crate::error::{Error, Result};
use crate::sysid::huber;

/// Search box (inclusive, positive) and grid shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSpace {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub gamma: (f64, f64),
    /// Grid points per sweep.
    pub points: usize,
    pub rounds: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            alpha: (0.1, 1000.0),
            beta: (0.1, 1000.0),
            gamma: (0.01, 1000.0),
            points: 9,
            rounds: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    /// Huber threshold on the pose error norm.
    pub delta: f64,
    /// Fraction of the plant's top speed and yaw rate a reference may demand.
    pub speed_margin: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            delta: 0.05,
            speed_margin: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub gains: PdGains,
    pub cost: f64,
    pub rms_position_error: f64,
    /// Largest lateral speed the reference asks for. The plant has no sway
    /// actuation, so this part of the reference is tracked only indirectly.
    pub lateral_demand: f64,
    /// Every candidate evaluated, in evaluation order.
    pub evaluated: Vec<(PdGains, f64)>,
}

/// Steady-state speeds of the saturated plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedLimits {
    pub surge: f64,
    pub yaw_rate: f64,
}

/// Positive root of `(d_l + d_c·v)·v + τ = 0`, or infinity when friction
/// cannot balance the thrust.
fn terminal_speed(dl: f64, dc: f64, thrust: f64) -> f64 {
    let g = |v: f64| (dl + dc * v) * v + thrust;
    let mut hi = 1.0;
    while g(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn speed_limits(params: &DynamicParams) -> SpeedLimits {
    let t = &params.torque_map;
    SpeedLimits {
        surge: terminal_speed(params.dl[0], params.dc[0], t[(0, 0)].abs() + t[(0, 2)].abs()),
        yaw_rate: terminal_speed(params.dl[2], params.dc[2], t[(2, 0)].abs() + t[(2, 2)].abs()),
    }
}

/// Rejects references faster than the saturated plant can follow.
pub fn check_feasible(params: &DynamicParams, traj: &ReferenceTrajectory, margin: f64) -> Result<()> {
    let lim = speed_limits(params);
    let surge = traj.samples().iter().map(|s| s.vel.vx.abs()).fold(0.0, f64::max);
    let yaw = traj.samples().iter().map(|s| s.vel.vpsi.abs()).fold(0.0, f64::max);
    if surge > margin * lim.surge {
        return Err(Error::InfeasibleTrajectory(format!(
            "reference surge speed {surge:.4} m/s exceeds {:.0}% of the plant's top speed {:.4} m/s",
            margin * 100.0,
            lim.surge
        )));
    }
    if yaw > margin * lim.yaw_rate {
        return Err(Error::InfeasibleTrajectory(format!(
            "reference yaw rate {yaw:.4} rad/s exceeds {:.0}% of the plant's top rate {:.4} rad/s",
            margin * 100.0,
            lim.yaw_rate
        )));
    }
    Ok(())
}

/// Noiseless closed loop with perfect state feedback, starting on the
/// reference. Returns the state at every trajectory sample.
pub fn simulate_tracking(
    params: &DynamicParams,
    traj: &ReferenceTrajectory,
    gains: &PdGains,
) -> Result<Vec<VehicleState>> {
    let samples = traj.samples();
    let mut state = VehicleState {
        pose: samples[0].pose,
        vel: samples[0].vel,
    };
    let mut out = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        out.push(state);
        if let Some(next) = samples.get(k + 1) {
            let u = pd_control(gains, &s.pose, &state.pose, state.vel.vpsi, s.vel.vpsi);
            state = step(params, &state, &u, next.t - s.t)?;
        }
    }
    Ok(out)
}

fn pose_error_norm(reference: &Pose, actual: &Pose) -> f64 {
    let (dx, dy) = (reference.x - actual.x, reference.y - actual.y);
    let dpsi = angle_diff(reference.psi, actual.psi);
    (dx * dx + dy * dy + dpsi * dpsi).sqrt()
}

/// Closed-loop Huber tracking cost and RMS position error; infinite when the
/// simulation fails.
pub fn tracking_cost(
    params: &DynamicParams,
    traj: &ReferenceTrajectory,
    gains: &PdGains,
    delta: f64,
) -> (f64, f64) {
    match simulate_tracking(params, traj, gains) {
        Ok(states) => {
            let mut cost = 0.0;
            let mut sq = 0.0;
            for (s, x) in traj.samples().iter().zip(&states) {
                cost += huber(pose_error_norm(&s.pose, &x.pose), delta);
                sq += (s.pose.x - x.pose.x).powi(2) + (s.pose.y - x.pose.y).powi(2);
            }
            (cost, (sq / states.len() as f64).sqrt())
        }
        Err(_) => (f64::INFINITY, f64::INFINITY),
    }
}

/// Perturbs the vehicle off a stationary reference and checks the closed
/// loop pulls it back.
pub fn step_response_bounded(params: &DynamicParams, gains: &PdGains) -> bool {
    let dt = crate::dynamics::DEFAULT_DT;
    let Ok(hold) = ReferenceTrajectory::hold(Pose::default(), 60.0, dt) else {
        return false;
    };
    let mut state = VehicleState {
        pose: Pose::new(-0.2, 0.0, 0.3),
        ..Default::default()
    };
    let initial = pose_error_norm(&Pose::default(), &state.pose);
    let mut worst: f64 = 0.0;
    for _ in 1..hold.len() {
        let u = pd_control(gains, &Pose::default(), &state.pose, state.vel.vpsi, 0.0);
        state = match step(params, &state, &u, dt) {
            Ok(s) => s,
            Err(_) => return false,
        };
        worst = worst.max(pose_error_norm(&Pose::default(), &state.pose));
    }
    let last = pose_error_norm(&Pose::default(), &state.pose);
    worst.is_finite() && worst < 10.0 * initial + 1.0 && last < initial
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    if n <= 1 || a == b {
        return vec![(0.5 * (a + b)).exp()];
    }
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Tunes `(α, β, γ)` for `traj` on the model `params`.
pub fn tune_gains(
    params: &DynamicParams,
    traj: &ReferenceTrajectory,
    space: &SearchSpace,
    opts: &TuneOptions,
) -> Result<TuneReport> {
    params.validate()?;
    let bounds = [space.alpha, space.beta, space.gamma];
    if bounds.iter().any(|&(lo, hi)| !(lo > 0.0 && hi >= lo && hi.is_finite())) {
        return Err(Error::InvalidParams(format!("invalid search space {space:?}")));
    }
    check_feasible(params, traj, opts.speed_margin)?;

    let as_gains = |x: [f64; 3]| PdGains {
        alpha: x[0],
        beta: x[1],
        gamma: x[2],
    };
    let mut center: [f64; 3] = bounds.map(|(lo, hi)| (lo * hi).sqrt());
    let mut half_span: [f64; 3] = bounds.map(|(lo, hi)| 0.5 * (hi / lo).ln());
    let (mut best_cost, _) = tracking_cost(params, traj, &as_gains(center), opts.delta);
    let mut evaluated = vec![(as_gains(center), best_cost)];

    for _ in 0..space.rounds.max(1) {
        for axis in 0..3 {
            let (lo, hi) = bounds[axis];
            let c = center[axis].ln();
            let grid = log_grid(
                (c - half_span[axis]).exp().max(lo),
                (c + half_span[axis]).exp().min(hi),
                space.points.max(2),
            );
            let costs: Vec<([f64; 3], f64)> = grid
                .par_iter()
                .map(|&v| {
                    let mut x = center;
                    x[axis] = v;
                    (x, tracking_cost(params, traj, &as_gains(x), opts.delta).0)
                })
                .collect();
            for (x, cost) in costs {
                evaluated.push((as_gains(x), cost));
                if cost < best_cost {
                    best_cost = cost;
                    center = x;
                }
            }
        }
        half_span = half_span.map(|h| 0.5 * h);
    }

    if !best_cost.is_finite() {
        return Err(Error::InfeasibleTrajectory(
            "no gains in the search space keep the closed loop bounded".into(),
        ));
    }
    let gains = as_gains(center);
    if !step_response_bounded(params, &gains) {
        return Err(Error::InfeasibleTrajectory(format!(
            "best gains {gains:?} fail the closed-loop stability check"
        )));
    }
    let (cost, rms_position_error) = tracking_cost(params, traj, &gains, opts.delta);
    let lateral_demand = traj.samples().iter().map(|s| s.vel.vy.abs()).fold(0.0, f64::max);
    Ok(TuneReport {
        gains,
        cost,
        rms_position_error,
        lateral_demand,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::BodyVelocity;

    fn params() -> DynamicParams {
        DynamicParams::reference_vehicle()
    }

    #[test]
    fn terminal_speeds_balance_friction() {
        let lim = speed_limits(&params());
        let p = params();
        let res = (p.dl[0] + p.dc[0] * lim.surge) * lim.surge + 1.0;
        assert!(res.abs() < 1e-9);
        assert!((lim.surge - 0.13393).abs() < 1e-4, "{}", lim.surge);
        assert!(lim.yaw_rate > 0.0 && lim.yaw_rate < 0.1);
        assert_eq!(terminal_speed(1.0, 0.0, 1.0), f64::INFINITY);
    }

    #[test]
    fn hold_position_costs_nothing() {
        let hold = ReferenceTrajectory::hold(Pose::new(1.0, 2.0, 0.5), 5.0, 0.01).unwrap();
        let space = SearchSpace {
            rounds: 2,
            points: 5,
            ..Default::default()
        };
        let rep = tune_gains(&params(), &hold, &space, &TuneOptions::default()).unwrap();
        assert!(rep.cost < 1e-6);
    }

    #[test]
    fn one_metre_per_second_is_infeasible() {
        let line = ReferenceTrajectory::straight_line(Pose::default(), 1.0, 10.0, 0.01).unwrap();
        assert!(matches!(
            tune_gains(&params(), &line, &SearchSpace::default(), &TuneOptions::default()),
            Err(Error::InfeasibleTrajectory(_))
        ));
    }

    #[test]
    fn tuned_cost_is_the_minimum_evaluated() {
        let line = ReferenceTrajectory::straight_line(Pose::default(), 0.1, 20.0, 0.01).unwrap();
        let space = SearchSpace {
            rounds: 3,
            points: 5,
            ..Default::default()
        };
        let rep = tune_gains(&params(), &line, &space, &TuneOptions::default()).unwrap();
        for (_, c) in &rep.evaluated {
            assert!(rep.cost <= *c);
        }
        let again = tune_gains(&params(), &line, &space, &TuneOptions::default()).unwrap();
        assert_eq!(again, rep);
    }

    #[test]
    fn unstable_gains_fail_the_step_check() {
        let p = params();
        assert!(step_response_bounded(&p, &PdGains { alpha: 5.0, beta: 5.0, gamma: 1.0 }));
        assert!(!step_response_bounded(&p, &PdGains { alpha: -5.0, beta: -5.0, gamma: 0.0 }));
    }

    #[test]
    fn tracking_starts_on_the_reference() {
        let line = ReferenceTrajectory::straight_line(Pose::new(1.0, 1.0, 0.3), 0.1, 1.0, 0.01).unwrap();
        let states = simulate_tracking(&params(), &line, &PdGains { alpha: 10.0, beta: 1.0, gamma: 1.0 }).unwrap();
        assert_eq!(states.len(), line.len());
        assert_eq!(states[0].pose, line.start().pose);
        assert_eq!(states[0].vel, BodyVelocity::new(0.1, 0.0, 0.0));
    }
}
