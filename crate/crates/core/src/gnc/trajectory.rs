use std::io::BufRead;

use crate::dynamics::{angle_diff, BodyVelocity, ControlAction, Pose};
use crate::error::{Error, Result};
use crate::table::Table;

pub const TRAJECTORY_COLUMNS: [&str; 7] = ["t", "x", "y", "psi", "vx", "vy", "vpsi"];
pub const CONTROL_COLUMNS: [&str; 4] = ["t", "ux", "uy", "upsi"];

/// Largest position jump between consecutive samples, metres.
pub const MAX_POSITION_GAP: f64 = 1.0;
/// Largest heading jump between consecutive samples, radians.
pub const MAX_HEADING_GAP: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose,
    pub vel: BodyVelocity,
}

/// Timestamped reference poses and body velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    samples: Vec<TrajectorySample>,
}

impl ReferenceTrajectory {
    pub fn new(samples: Vec<TrajectorySample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParams("empty trajectory".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            let finite = [s.t, s.pose.x, s.pose.y, s.pose.psi]
                .iter()
                .all(|v| v.is_finite())
                && s.vel.is_finite();
            if !finite {
                return Err(Error::InvalidParams(format!("non-finite trajectory sample {i}")));
            }
        }
        for (i, w) in samples.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            if !(b.t > a.t) {
                return Err(Error::InvalidParams(format!(
                    "timestamps not strictly increasing at sample {}",
                    i + 1
                )));
            }
            let gap = (b.pose.x - a.pose.x).hypot(b.pose.y - a.pose.y);
            if gap > MAX_POSITION_GAP || angle_diff(b.pose.psi, a.pose.psi).abs() > MAX_HEADING_GAP {
                return Err(Error::InvalidParams(format!(
                    "pose discontinuity at sample {}",
                    i + 1
                )));
            }
        }
        Ok(Self { samples })
    }

    /// Stationary reference at `pose` for `duration` seconds.
    pub fn hold(pose: Pose, duration: f64, dt: f64) -> Result<Self> {
        Self::from_fn(duration, dt, |_| (pose, BodyVelocity::default()))
    }

    /// Constant-speed straight line from `start` along its heading.
    pub fn straight_line(start: Pose, speed: f64, duration: f64, dt: f64) -> Result<Self> {
        Self::from_fn(duration, dt, |t| {
            let d = speed * t;
            (
                Pose::new(start.x + d * start.psi.cos(), start.y + d * start.psi.sin(), start.psi),
                BodyVelocity::new(speed, 0.0, 0.0),
            )
        })
    }

    /// Samples `f` at `0, dt, …` up to and including `duration`.
    pub fn from_fn(duration: f64, dt: f64, f: impl Fn(f64) -> (Pose, BodyVelocity)) -> Result<Self> {
        if !(dt > 0.0) || !(duration >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "invalid duration {duration} / dt {dt}"
            )));
        }
        let n = (duration / dt).round() as usize + 1;
        Self::new(
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    let (pose, vel) = f(t);
                    TrajectorySample { t, pose, vel }
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start(&self) -> &TrajectorySample {
        &self.samples[0]
    }

    pub fn end(&self) -> &TrajectorySample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn duration(&self) -> f64 {
        self.end().t - self.start().t
    }

    /// Path length of the position polyline.
    pub fn length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].pose.x - w[0].pose.x).hypot(w[1].pose.y - w[0].pose.y))
            .sum()
    }

    /// Reference at time `t` (trajectory clock), linearly interpolated.
    /// Before the start it holds the first sample; after the end it holds the
    /// final pose at rest.
    pub fn sample_at(&self, t: f64) -> (Pose, BodyVelocity) {
        let first = self.start();
        if t <= first.t {
            return (first.pose, first.vel);
        }
        let last = self.end();
        if t >= last.t {
            return (last.pose, BodyVelocity::default());
        }
        let i = self.samples.partition_point(|s| s.t <= t) - 1;
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        let s = (t - a.t) / (b.t - a.t);
        let lerp = |p: f64, q: f64| p + s * (q - p);
        (
            Pose::new(
                lerp(a.pose.x, b.pose.x),
                lerp(a.pose.y, b.pose.y),
                a.pose.psi + s * angle_diff(b.pose.psi, a.pose.psi),
            ),
            BodyVelocity::new(
                lerp(a.vel.vx, b.vel.vx),
                lerp(a.vel.vy, b.vel.vy),
                lerp(a.vel.vpsi, b.vel.vpsi),
            ),
        )
    }

    /// Distance from `(x, y)` to the nearest point of the position polyline,
    /// searching segments whose start lies in `window` (all when `None`).
    pub fn cross_track(&self, x: f64, y: f64, window: Option<std::ops::Range<usize>>) -> f64 {
        let n = self.samples.len();
        if n == 1 {
            let p = self.samples[0].pose;
            return (x - p.x).hypot(y - p.y);
        }
        let range = window.unwrap_or(0..n - 1);
        let lo = range.start.min(n - 2);
        let hi = range.end.min(n - 1).max(lo + 1);
        let mut best = f64::INFINITY;
        for i in lo..hi {
            let (a, b) = (self.samples[i].pose, self.samples[i + 1].pose);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let s = if len2 > 0.0 {
                (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            best = best.min((x - a.x - s * dx).hypot(y - a.y - s * dy));
        }
        best
    }

    /// Index of the last sample at or before `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.samples.partition_point(|s| s.t <= t).saturating_sub(1)
    }

    pub fn to_table(&self) -> Table {
        let mut table = Table::new(&TRAJECTORY_COLUMNS);
        for s in &self.samples {
            table.push(vec![s.t, s.pose.x, s.pose.y, s.pose.psi, s.vel.vx, s.vel.vy, s.vel.vpsi]);
        }
        table
    }

    pub fn to_text(&self) -> String {
        self.to_table().to_text()
    }

    pub fn from_table(table: &Table) -> Result<Self> {
        let idx = table.require(&TRAJECTORY_COLUMNS)?;
        Self::new(
            table
                .rows
                .iter()
                .map(|row| {
                    let g = |k: usize| row[idx[k]];
                    TrajectorySample {
                        t: g(0),
                        pose: Pose::new(g(1), g(2), g(3)),
                        vel: BodyVelocity::new(g(4), g(5), g(6)),
                    }
                })
                .collect(),
        )
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        Self::from_table(&Table::read_from(r)?)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_from(s.as_bytes())
    }
}

/// Timestamped command sequence, e.g. a scripted teach session.
pub type ControlStream = Vec<(f64, ControlAction)>;

pub fn control_stream_table(stream: &[(f64, ControlAction)]) -> Table {
    let mut table = Table::new(&CONTROL_COLUMNS);
    for (t, u) in stream {
        table.push(vec![*t, u.ux(), u.uy(), u.upsi()]);
    }
    table
}

pub fn control_stream_from_table(table: &Table) -> Result<ControlStream> {
    let idx = table.require(&CONTROL_COLUMNS)?;
    Ok(table
        .rows
        .iter()
        .map(|row| (row[idx[0]], ControlAction::new(row[idx[1]], row[idx[2]], row[idx[3]])))
        .collect())
}

/// Uniform sample period of a control stream.
pub(crate) fn stream_period(stream: &[(f64, ControlAction)]) -> Result<f64> {
    if stream.is_empty() {
        return Err(Error::InvalidParams("empty control stream".into()));
    }
    if stream.len() == 1 {
        return Ok(crate::dynamics::DEFAULT_DT);
    }
    let dt = stream[1].0 - stream[0].0;
    if !(dt > 0.0 && dt <= crate::dynamics::MAX_DT) {
        return Err(Error::InvalidTimeStep(dt));
    }
    for (i, w) in stream.windows(2).enumerate() {
        if ((w[1].0 - w[0].0) - dt).abs() > 0.01 * dt {
            return Err(Error::Parse {
                line: i + 3,
                msg: format!("non-uniform control period at t = {}", w[1].0),
            });
        }
    }
    Ok(dt)
}
