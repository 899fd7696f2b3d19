//! Simulation harness: IMU sensor model, excitation signals and mission logs.

use std::f64::consts::PI;
use std::io::BufRead;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{
    body_accel, step_perturbed, BodyAccel, BodyVelocity, ControlAction, DynamicParams, Pose,
    VehicleState,
};
use crate::error::{Error, Result};
use crate::noise::{gaussian, psd_factor, NoiseModel};
use crate::table::Table;

/// One IMU reading: body-frame accelerations and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorSample {
    pub t: f64,
    pub ax_meas: f64,
    pub ay_meas: f64,
    pub gyro_z: f64,
}

impl SensorSample {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.ax_meas, self.ay_meas, self.gyro_z)
    }
}

/// Noise-free measurement `(ν̇x, ν̇y, νψ)` implied by a twist and its derivative.
pub fn measurement_of(vel: &BodyVelocity, accel: &BodyAccel) -> Vector3<f64> {
    Vector3::new(accel.ax, accel.ay, vel.vpsi)
}

/// Samples the IMU at `state` under command `u`.
pub fn sense<R: Rng + ?Sized>(
    params: &DynamicParams,
    state: &VehicleState,
    u: &ControlAction,
    noise: &NoiseModel,
    t: f64,
    rng: &mut R,
) -> Result<SensorSample> {
    if !state.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let accel = BodyAccel::from_vector(&body_accel(params, &state.vel, u));
    let z = measurement_of(&state.vel, &accel) + gaussian(&psd_factor(&noise.q_meas), rng);
    Ok(SensorSample {
        t,
        ax_meas: z[0],
        ay_meas: z[1],
        gyro_z: z[2],
    })
}

/// Which actuator channels an excitation drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelMask {
    pub x: bool,
    pub y: bool,
    pub psi: bool,
}

impl ChannelMask {
    pub const X_PSI: ChannelMask = ChannelMask {
        x: true,
        y: false,
        psi: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.x || self.y || self.psi)
    }

    fn enabled(&self) -> [bool; 3] {
        [self.x, self.y, self.psi]
    }
}

impl FromStr for ChannelMask {
    type Err = Error;

    /// Parses a comma-separated list such as `x,psi`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = ChannelMask::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "x" => mask.x = true,
                "y" => mask.y = true,
                "psi" => mask.psi = true,
                other => {
                    return Err(Error::InvalidParams(format!("unknown channel `{other}`")))
                }
            }
        }
        if mask.is_empty() {
            return Err(Error::EmptyChannelMask);
        }
        Ok(mask)
    }
}

const SINE_COUNT: usize = 6;
const SINE_AMPLITUDE: f64 = 0.25;
const STEP_AMPLITUDE: f64 = 0.5;
const STEP_HOLD: (f64, f64) = (0.3, 2.0);

/// Persistently exciting command sequence of `round(duration / dt)` samples.
///
/// Each enabled channel carries a multisine of six incommensurate
/// frequencies (0.03 Hz to about 1.7 Hz, distinct per channel, random phases) plus steps of
/// alternating sign with random hold times in 0.3–2 s, clipped to `[-1, 1]`.
/// Disabled channels stay at zero.
pub fn excitation_signal(
    duration: f64,
    dt: f64,
    channels: ChannelMask,
    seed: u64,
) -> Result<Vec<ControlAction>> {
    if channels.is_empty() {
        return Err(Error::EmptyChannelMask);
    }
    if !(dt > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidParams(format!(
            "duration {duration} and dt {dt} must be positive"
        )));
    }
    let n = (duration / dt).round() as usize;
    let mut out = vec![[0.0f64; 3]; n];
    for (ch, enabled) in channels.enabled().into_iter().enumerate() {
        if !enabled {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(ch as u64 + 1)));
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        let sines: Vec<(f64, f64)> = (0..SINE_COUNT)
            .map(|k| {
                // per-channel offsets keep the channels spectrally disjoint,
                // so the cross terms of the torque map are separable
                let offset = 1.0 + 0.35 * ((ch as f64 + 1.0) * golden).fract();
                let jitter = 1.0 + 0.1 * ((k as f64 + 1.0) * golden).fract();
                let freq = 0.03 * 2.1f64.powi(k as i32) * jitter * offset;
                let phase = rng.random_range(0.0..2.0 * PI);
                (freq, phase)
            })
            .collect();
        let mut level = if rng.random_bool(0.5) { STEP_AMPLITUDE } else { -STEP_AMPLITUDE };
        let mut next_switch = rng.random_range(STEP_HOLD.0..STEP_HOLD.1);
        for (i, slot) in out.iter_mut().enumerate() {
            let t = i as f64 * dt;
            while t >= next_switch {
                level = -level;
                next_switch += rng.random_range(STEP_HOLD.0..STEP_HOLD.1);
            }
            let ms: f64 = sines
                .iter()
                .map(|(f, ph)| SINE_AMPLITUDE * (2.0 * PI * f * t + ph).sin())
                .sum();
            slot[ch] = (ms + level).clamp(-1.0, 1.0);
        }
    }
    Ok(out
        .into_iter()
        .map(|[a, b, c]| ControlAction::new(a, b, c))
        .collect())
}

/// Simulator ground truth attached to a log record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Truth {
    pub state: VehicleState,
    pub accel: BodyAccel,
}

/// One log record.
///
/// `truth` and `sensor` describe the vehicle at time `t`; `u` is the command
/// applied from `t` until the next record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub u: ControlAction,
    pub sensor: SensorSample,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionLog {
    pub dt: f64,
    pub records: Vec<LogRecord>,
}

pub const LOG_COLUMNS: [&str; 7] = ["t", "ux", "uy", "upsi", "ax", "ay", "gyro"];
pub const TRUTH_COLUMNS: [&str; 9] = ["x", "y", "psi", "vx", "vy", "vpsi", "axt", "ayt", "apsit"];

impl MissionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_truth(&self) -> bool {
        self.records.first().is_some_and(|r| r.truth.is_some())
    }

    pub fn duration(&self) -> f64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.t - a.t + self.dt,
            _ => 0.0,
        }
    }

    pub fn controls(&self) -> impl Iterator<Item = &ControlAction> {
        self.records.iter().map(|r| &r.u)
    }

    /// Checks timestamps are strictly increasing with a uniform period (1%)
    /// and that truth is present on all records or none.
    pub fn validate(&self) -> Result<()> {
        let truth = self.has_truth();
        for (i, r) in self.records.iter().enumerate() {
            if r.truth.is_some() != truth {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: "truth columns present on some records only".into(),
                });
            }
            if i > 0 {
                let gap = r.t - self.records[i - 1].t;
                if !(gap > 0.0) || (gap - self.dt).abs() > 0.01 * self.dt {
                    return Err(Error::Parse {
                        line: i + 2,
                        msg: format!("non-uniform sample period {gap} (expected {})", self.dt),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_table(&self) -> Table {
        let truth = self.has_truth();
        let mut cols: Vec<&str> = LOG_COLUMNS.to_vec();
        if truth {
            cols.extend_from_slice(&TRUTH_COLUMNS);
        }
        let mut table = Table::new(&cols);
        for r in &self.records {
            table.push(record_row(r));
        }
        table
    }

    pub fn to_text(&self) -> String {
        self.to_table().to_text()
    }

    /// Builds a log from a table, ignoring unrelated columns. The sample
    /// period is taken from the first two records.
    pub fn from_table(table: &Table) -> Result<Self> {
        let base = table.require(&LOG_COLUMNS)?;
        let truth_present = TRUTH_COLUMNS.iter().filter(|c| table.column_index(c).is_some()).count();
        let truth_idx = match truth_present {
            0 => None,
            n if n == TRUTH_COLUMNS.len() => Some(table.require(&TRUTH_COLUMNS)?),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "incomplete set of truth columns".into(),
                })
            }
        };
        let records: Vec<LogRecord> = table
            .rows
            .iter()
            .map(|row| {
                let g = |k: usize| row[base[k]];
                let t = g(0);
                LogRecord {
                    t,
                    u: ControlAction::new(g(1), g(2), g(3)),
                    sensor: SensorSample {
                        t,
                        ax_meas: g(4),
                        ay_meas: g(5),
                        gyro_z: g(6),
                    },
                    truth: truth_idx.as_ref().map(|ti| {
                        let h = |k: usize| row[ti[k]];
                        Truth {
                            state: VehicleState {
                                pose: Pose::new(h(0), h(1), h(2)),
                                vel: BodyVelocity::new(h(3), h(4), h(5)),
                            },
                            accel: BodyAccel::new(h(6), h(7), h(8)),
                        }
                    }),
                }
            })
            .collect();
        let dt = if records.len() >= 2 {
            records[1].t - records[0].t
        } else {
            crate::dynamics::DEFAULT_DT
        };
        let log = MissionLog { dt, records };
        log.validate()?;
        Ok(log)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        Self::from_table(&Table::read_from(r)?)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_from(s.as_bytes())
    }
}

pub(crate) fn record_row(r: &LogRecord) -> Vec<f64> {
    let mut row = vec![
        r.t,
        r.u.ux(),
        r.u.uy(),
        r.u.upsi(),
        r.sensor.ax_meas,
        r.sensor.ay_meas,
        r.sensor.gyro_z,
    ];
    if let Some(tr) = &r.truth {
        let s = &tr.state;
        row.extend_from_slice(&[
            s.pose.x,
            s.pose.y,
            s.pose.psi,
            s.vel.vx,
            s.vel.vy,
            s.vel.vpsi,
            tr.accel.ax,
            tr.accel.ay,
            tr.accel.apsi,
        ]);
    }
    row
}

/// Options for [`run_mission`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissionOptions {
    pub dt: f64,
    pub seed: u64,
    /// Inject process noise drawn from the acceleration block of `R`.
    pub process_noise: bool,
    pub initial: VehicleState,
}

impl Default for MissionOptions {
    fn default() -> Self {
        Self {
            dt: crate::dynamics::DEFAULT_DT,
            seed: 0,
            process_noise: true,
            initial: VehicleState::default(),
        }
    }
}

/// Stateful plant: the simulated vehicle plus its sensor and noise sources.
///
/// Measurement and process noise draw from independent streams so that
/// changing one covariance leaves the other sequence untouched.
#[derive(Debug, Clone)]
pub struct Plant {
    params: DynamicParams,
    state: VehicleState,
    q_factor: Matrix3<f64>,
    w_factor: Option<Matrix3<f64>>,
    meas_rng: ChaCha8Rng,
    proc_rng: ChaCha8Rng,
    dt: f64,
    tick: u64,
}

impl Plant {
    pub fn new(params: DynamicParams, noise: &NoiseModel, opts: &MissionOptions) -> Result<Self> {
        params.validate()?;
        noise.validate()?;
        if !(opts.dt > 0.0 && opts.dt <= crate::dynamics::MAX_DT) {
            return Err(Error::InvalidTimeStep(opts.dt));
        }
        let w = noise.accel_block();
        Ok(Self {
            params,
            state: opts.initial,
            q_factor: psd_factor(&noise.q_meas),
            w_factor: (opts.process_noise && w.abs().max() > 0.0).then(|| psd_factor(&w)),
            meas_rng: ChaCha8Rng::seed_from_u64(opts.seed),
            proc_rng: ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5EED_0F_F00D)),
            dt: opts.dt,
            tick: 0,
        })
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn params(&self) -> &DynamicParams {
        &self.params
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Records the current instant under command `u`, then advances one step.
    pub fn tick(&mut self, u: ControlAction) -> Result<LogRecord> {
        let t = self.time();
        let index = self.tick as usize;
        let w = match &self.w_factor {
            Some(f) => gaussian(f, &mut self.proc_rng),
            None => Vector3::zeros(),
        };
        let accel = body_accel(&self.params, &self.state.vel, &u) + w;
        if !accel.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteSimulation { index });
        }
        let accel = BodyAccel::from_vector(&accel);
        let z = measurement_of(&self.state.vel, &accel) + gaussian(&self.q_factor, &mut self.meas_rng);
        let record = LogRecord {
            t,
            u,
            sensor: SensorSample {
                t,
                ax_meas: z[0],
                ay_meas: z[1],
                gyro_z: z[2],
            },
            truth: Some(Truth {
                state: self.state,
                accel,
            }),
        };
        self.state = step_perturbed(&self.params, &self.state, &u, &w, self.dt)
            .map_err(|_| Error::NonFiniteSimulation { index })?;
        self.tick += 1;
        Ok(record)
    }
}

/// Drives the simulated vehicle with `controls`, logging truth and IMU samples.
pub fn run_mission(
    params: &DynamicParams,
    noise: &NoiseModel,
    controls: &[ControlAction],
    opts: &MissionOptions,
) -> Result<MissionLog> {
    if controls.is_empty() {
        return Err(Error::InvalidParams("empty control sequence".into()));
    }
    let mut plant = Plant::new(params.clone(), noise, opts)?;
    let records = controls
        .iter()
        .map(|u| plant.tick(*u))
        .collect::<Result<Vec<_>>>()?;
    Ok(MissionLog {
        dt: opts.dt,
        records,
    })
}
