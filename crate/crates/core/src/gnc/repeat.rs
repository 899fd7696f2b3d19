//! Teach and repeat.
//!
//! Teaching drives the plant with a recorded or live command stream and keeps
//! the estimated pose and velocity at each tick. Repeating closes the loop
//! guidance → PD → plant → estimator on that recording, indefinitely if asked.

use super::trajectory::stream_period;
use super::{pd_control, PdGains, ReferenceTrajectory, TrajectorySample};
use crate::dynamics::{angle_diff, BodyVelocity, ControlAction, DynamicParams, Pose, VehicleState};
use crate::ekf::{Ekf, EkfState, FilterStep};
use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::sim::{LogRecord, MissionLog, MissionOptions, Plant};

/// Continuity blend at a loop wrap, seconds.
pub const DEFAULT_BLEND: f64 = 1.0;
/// Cross-track error that aborts a repeat, metres.
pub const DEFAULT_ABORT_BOUND: f64 = 2.0;

/// Where the loop's state estimate comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    /// Simulator ground truth (perfect state feedback).
    Truth,
    /// EKF on the IMU stream with the given model; pose by dead reckoning.
    Ekf { params: DynamicParams, noise: NoiseModel },
}

/// Runtime estimator behind a [`Feedback`].
#[derive(Debug, Clone)]
pub enum Estimator {
    Truth,
    Ekf(Box<Ekf>),
}

impl Estimator {
    pub fn new(feedback: &Feedback, dt: f64, initial: &VehicleState) -> Self {
        match feedback {
            Feedback::Truth => Self::Truth,
            Feedback::Ekf { params, noise } => {
                let v = initial.vel;
                let mut init = EkfState::at_rest();
                init.mu[0] = v.vx;
                init.mu[1] = v.vy;
                init.mu[2] = v.vpsi;
                Self::Ekf(Box::new(Ekf::new(params.clone(), noise.clone(), dt, init, initial.pose)))
            }
        }
    }

    /// Estimate for the plant's current instant, before its sample arrives.
    pub fn current(&self, plant: &Plant) -> (Pose, BodyVelocity) {
        match self {
            Self::Truth => (plant.state().pose, plant.state().vel),
            Self::Ekf(ekf) => ekf.lookahead(),
        }
    }

    /// Folds in the sample just taken; returns the estimate at its instant.
    pub fn observe(&mut self, record: &LogRecord) -> Result<(Pose, BodyVelocity, Option<FilterStep>)> {
        match self {
            Self::Truth => {
                let s = record
                    .truth
                    .ok_or_else(|| Error::InvalidParams("truth feedback needs simulator truth".into()))?
                    .state;
                Ok((s.pose, s.vel, None))
            }
            Self::Ekf(ekf) => {
                let step = ekf.step(&record.u, &record.sensor)?;
                Ok((step.pose, step.state.velocity(), Some(step)))
            }
        }
    }
}

/// Time-indexed reference lookup, optionally looping.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    traj: ReferenceTrajectory,
    looped: bool,
    blend: f64,
}

impl Guidance {
    pub fn new(traj: ReferenceTrajectory, looped: bool) -> Self {
        Self {
            traj,
            looped,
            blend: DEFAULT_BLEND,
        }
    }

    pub fn with_blend(mut self, blend: f64) -> Self {
        self.blend = blend.max(0.0);
        self
    }

    pub fn trajectory(&self) -> &ReferenceTrajectory {
        &self.traj
    }

    pub fn looped(&self) -> bool {
        self.looped && self.traj.duration() > 0.0
    }

    /// Lap number and time into the lap.
    pub fn phase(&self, elapsed: f64) -> (usize, f64) {
        let period = self.traj.duration();
        if !self.looped() {
            return (0, elapsed);
        }
        let lap = (elapsed / period).floor().max(0.0);
        (lap as usize, elapsed - lap * period)
    }

    pub fn finished(&self, elapsed: f64) -> bool {
        !self.looped() && elapsed > self.traj.duration() + 1e-9
    }

    /// Reference pose and velocity `elapsed` seconds into the repeat. After a
    /// wrap, the offset between the end and start poses fades out over the
    /// blend interval so the reference stays continuous.
    pub fn reference(&self, elapsed: f64) -> (Pose, BodyVelocity) {
        let t0 = self.traj.start().t;
        let (lap, tau) = self.phase(elapsed);
        let (pose, vel) = self.traj.sample_at(t0 + tau);
        if lap == 0 || tau >= self.blend || self.blend == 0.0 {
            return (pose, vel);
        }
        let (a, b) = (self.traj.start(), self.traj.end());
        let w = 1.0 - tau / self.blend;
        (
            Pose::new(
                pose.x + w * (b.pose.x - a.pose.x),
                pose.y + w * (b.pose.y - a.pose.y),
                pose.psi + w * angle_diff(b.pose.psi, a.pose.psi),
            ),
            BodyVelocity::from_vector(&(vel.as_vector() * (1.0 - w) + b.vel.as_vector() * w)),
        )
    }

    /// Cross-track distance of `(x, y)` to the reference path near the
    /// current phase (±2 s of samples).
    pub fn cross_track(&self, elapsed: f64, x: f64, y: f64) -> f64 {
        let (_, tau) = self.phase(elapsed);
        let i = self.traj.index_at(self.traj.start().t + tau);
        let dt = self.traj.duration() / (self.traj.len().max(2) - 1) as f64;
        let w = if dt > 0.0 { (2.0 / dt).ceil() as usize } else { 1 };
        let mut d = self.traj.cross_track(x, y, Some(i.saturating_sub(w)..i + w));
        if self.looped() && (i < w || i + w >= self.traj.len()) {
            // near the seam the path continues on the other side
            let n = self.traj.len();
            d = d.min(self.traj.cross_track(x, y, Some(n.saturating_sub(w)..n)));
            d = d.min(self.traj.cross_track(x, y, Some(0..w)));
        }
        d
    }
}

/// One tick of a repeat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatStep {
    pub t: f64,
    pub reference: Pose,
    pub ref_vel: BodyVelocity,
    /// Estimate used to compute the command.
    pub estimate: Pose,
    pub est_vel: BodyVelocity,
    pub truth: Option<VehicleState>,
    pub u: ControlAction,
    /// Cross-track error of the estimate.
    pub cross_track: f64,
}

/// Closed-loop repeat driver, one call per tick.
#[derive(Debug, Clone)]
pub struct Repeater {
    guidance: Guidance,
    gains: PdGains,
    estimator: Estimator,
    abort_bound: f64,
    start: f64,
}

impl Repeater {
    pub fn new(
        guidance: Guidance,
        gains: PdGains,
        estimator: Estimator,
        abort_bound: f64,
        start_time: f64,
    ) -> Self {
        Self {
            guidance,
            gains,
            estimator,
            abort_bound,
            start: start_time,
        }
    }

    pub fn guidance(&self) -> &Guidance {
        &self.guidance
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    /// Hands the estimator back, e.g. when a live session leaves repeat mode.
    pub fn into_estimator(self) -> Estimator {
        self.estimator
    }

    /// Whether a non-looping repeat has played out at the plant's clock.
    pub fn finished(&self, plant: &Plant) -> bool {
        self.guidance.finished(plant.time() - self.start)
    }

    /// Commands the plant for one tick and folds in the resulting sample.
    pub fn tick(&mut self, plant: &mut Plant) -> Result<(RepeatStep, LogRecord, Option<FilterStep>)> {
        let elapsed = plant.time() - self.start;
        let (reference, ref_vel) = self.guidance.reference(elapsed);
        let (estimate, est_vel) = self.estimator.current(plant);
        let cross_track = self.guidance.cross_track(elapsed, estimate.x, estimate.y);
        if !(cross_track <= self.abort_bound) {
            return Err(Error::TrackingDiverged {
                t: plant.time(),
                error: cross_track,
                bound: self.abort_bound,
            });
        }
        let u = pd_control(&self.gains, &reference, &estimate, est_vel.vpsi, ref_vel.vpsi);
        let record = plant.tick(u)?;
        let (_, _, filter) = self.estimator.observe(&record)?;
        let step = RepeatStep {
            t: record.t,
            reference,
            ref_vel,
            estimate,
            est_vel,
            truth: record.truth.map(|t| t.state),
            u,
            cross_track,
        };
        Ok((step, record, filter))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOptions {
    pub seed: u64,
    pub looped: bool,
    /// Laps to run when looping.
    pub laps: usize,
    pub blend: f64,
    pub abort_bound: f64,
    pub process_noise: bool,
    pub feedback: Feedback,
}

impl Default for RepeatOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            looped: false,
            laps: 1,
            blend: DEFAULT_BLEND,
            abort_bound: DEFAULT_ABORT_BOUND,
            process_noise: true,
            feedback: Feedback::Truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOutcome {
    pub steps: Vec<RepeatStep>,
    pub log: MissionLog,
    /// Filter output per tick; empty under truth feedback.
    pub filter: Vec<FilterStep>,
}

impl RepeatOutcome {
    /// RMS distance of the true positions from the reference path.
    pub fn cross_track_rms(&self, traj: &ReferenceTrajectory) -> f64 {
        let sq: f64 = self
            .steps
            .iter()
            .filter_map(|s| s.truth)
            .map(|s| traj.cross_track(s.pose.x, s.pose.y, None).powi(2))
            .sum();
        (sq / self.steps.len().max(1) as f64).sqrt()
    }

    /// RMS of the true body velocity against the reference velocity.
    pub fn velocity_rmse(&self) -> f64 {
        let sq: f64 = self
            .steps
            .iter()
            .filter_map(|s| s.truth.map(|t| (t.vel.as_vector() - s.ref_vel.as_vector()).norm_squared()))
            .sum();
        (sq / self.steps.len().max(1) as f64).sqrt()
    }

    /// Final distance between the estimated and true positions.
    pub fn final_drift(&self) -> f64 {
        self.steps
            .last()
            .and_then(|s| s.truth.map(|t| (t.pose.x - s.estimate.x).hypot(t.pose.y - s.estimate.y)))
            .unwrap_or(0.0)
    }
}

fn plant_options(dt: f64, seed: u64, process_noise: bool, initial: VehicleState) -> MissionOptions {
    MissionOptions {
        dt,
        seed,
        process_noise,
        initial,
    }
}

/// Repeats `traj` on the simulated plant, starting on its first sample.
pub fn repeat(
    params: &DynamicParams,
    noise: &NoiseModel,
    traj: &ReferenceTrajectory,
    gains: &PdGains,
    opts: &RepeatOptions,
) -> Result<RepeatOutcome> {
    gains.validate()?;
    let s = traj.samples();
    let dt = if s.len() >= 2 {
        s[1].t - s[0].t
    } else {
        crate::dynamics::DEFAULT_DT
    };
    let initial = VehicleState {
        pose: s[0].pose,
        vel: s[0].vel,
    };
    let mut plant = Plant::new(
        params.clone(),
        noise,
        &plant_options(dt, opts.seed, opts.process_noise, initial),
    )?;
    let guidance = Guidance::new(traj.clone(), opts.looped).with_blend(opts.blend);
    let estimator = Estimator::new(&opts.feedback, dt, &initial);
    let mut repeater = Repeater::new(guidance, *gains, estimator, opts.abort_bound, 0.0);
    let ticks = if opts.looped {
        (traj.duration() * opts.laps.max(1) as f64 / dt).round() as usize
    } else {
        traj.len()
    };
    let mut steps = Vec::with_capacity(ticks);
    let mut records = Vec::with_capacity(ticks);
    let mut filter = Vec::new();
    for _ in 0..ticks {
        let (step, record, f) = repeater.tick(&mut plant)?;
        steps.push(step);
        records.push(record);
        filter.extend(f);
    }
    Ok(RepeatOutcome {
        steps,
        log: MissionLog { dt, records },
        filter,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeachOutcome {
    pub trajectory: ReferenceTrajectory,
    pub log: MissionLog,
}

/// Drives the plant with a timestamped command stream from rest at
/// `initial`, recording the estimated pose and velocity at each command's
/// timestamp.
pub fn teach(
    params: &DynamicParams,
    noise: &NoiseModel,
    stream: &[(f64, ControlAction)],
    feedback: &Feedback,
    seed: u64,
    initial: Pose,
) -> Result<TeachOutcome> {
    let dt = stream_period(stream)?;
    let initial = VehicleState {
        pose: initial,
        vel: BodyVelocity::default(),
    };
    let mut plant = Plant::new(params.clone(), noise, &plant_options(dt, seed, true, initial))?;
    let mut estimator = Estimator::new(feedback, dt, &initial);
    let mut samples = Vec::with_capacity(stream.len());
    let mut records = Vec::with_capacity(stream.len());
    for (i, (t, u)) in stream.iter().enumerate() {
        let record = plant.tick(*u).map_err(|e| e.at(i))?;
        let (pose, vel, _) = estimator.observe(&record).map_err(|e| e.at(i))?;
        samples.push(TrajectorySample { t: *t, pose, vel });
        records.push(record);
    }
    Ok(TeachOutcome {
        trajectory: ReferenceTrajectory::new(samples)?,
        log: MissionLog { dt, records },
    })
}
