//! The closed-loop session: one plant, one estimator, and whichever of
//! teach, repeat or idle is active, advanced one tick at a time.
//!
//! Everything here is deterministic. Time is the tick counter times `dt`;
//! wire messages are folded in between ticks by [`Session::handle`], and a
//! command received before tick k drives tick k (zero-order hold until the
//! next one, or until the dead-man timeout drops it).

use rover_core::dynamics::{BodyVelocity, ControlAction, DynamicParams, Pose, VehicleState};
use rover_core::ekf::{trace_table, FilterStep};
use rover_core::gnc::{
    ControlStream, Estimator, Feedback, Guidance, PdGains, ReferenceTrajectory, RepeatStep, Repeater,
    TrajectorySample,
};
use rover_core::noise::NoiseModel;
use rover_core::sim::{LogRecord, MissionLog, MissionOptions, Plant};
use rover_core::table::Table;
use rover_core::Error as CoreError;

use crate::config::WorkbenchConfig;
use crate::protocol::{codes, Mode, TeachAction, WireMessage};
use crate::store::{valid_name, TrajectoryStore};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSettings {
    pub dt: f64,
    pub seed: u64,
    pub dead_man: f64,
    pub state_every: u64,
    pub abort_bound: f64,
    pub blend: f64,
    pub looped: bool,
    pub process_noise: bool,
}

impl SessionSettings {
    pub fn from_config(cfg: &WorkbenchConfig) -> Self {
        Self {
            dt: cfg.dt,
            seed: cfg.seed,
            dead_man: cfg.runtime.dead_man,
            state_every: cfg.state_every(),
            abort_bound: cfg.runtime.abort_bound,
            blend: cfg.runtime.blend,
            looped: cfg.runtime.looped,
            process_noise: cfg.runtime.process_noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Held {
    u: ControlAction,
    received: f64,
}

#[derive(Debug, Clone)]
struct Script {
    stream: ControlStream,
    next: usize,
    name: String,
}

/// What a tick produced besides advancing the plant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickOutput {
    /// Messages for the client: a decimated StateUpdate and any notices.
    pub outbound: Vec<WireMessage>,
    /// Set when a repeat aborted on this tick.
    pub aborted: Option<String>,
}

#[derive(Debug)]
pub struct Session {
    settings: SessionSettings,
    plant: Plant,
    feedback: Feedback,
    gains: PdGains,
    estimator: Option<Estimator>,
    repeater: Option<Repeater>,
    mode: Mode,
    held: Option<Held>,
    recording: Option<(f64, Vec<TrajectorySample>)>,
    pending: Option<ReferenceTrajectory>,
    last_saved: Option<String>,
    script: Option<Script>,
    store: TrajectoryStore,
    last: Option<(f64, Pose, [f64; 6], [f64; 6])>,
    records: Vec<LogRecord>,
    filter: Vec<FilterStep>,
    repeat_steps: Vec<RepeatStep>,
}

impl Session {
    pub fn new(
        params: DynamicParams,
        noise: &NoiseModel,
        feedback: Feedback,
        gains: PdGains,
        settings: SessionSettings,
        store: TrajectoryStore,
        initial: VehicleState,
    ) -> rover_core::Result<Self> {
        let plant = Plant::new(
            params,
            noise,
            &MissionOptions {
                dt: settings.dt,
                seed: settings.seed,
                process_noise: settings.process_noise,
                initial,
            },
        )?;
        let estimator = Estimator::new(&feedback, settings.dt, &initial);
        Ok(Self {
            settings,
            plant,
            feedback,
            gains,
            estimator: Some(estimator),
            repeater: None,
            mode: Mode::Idle,
            held: None,
            recording: None,
            pending: None,
            last_saved: None,
            script: None,
            store,
            last: None,
            records: Vec::new(),
            filter: Vec::new(),
            repeat_steps: Vec::new(),
        })
    }

    pub fn from_config(cfg: &WorkbenchConfig, initial: VehicleState) -> anyhow::Result<Self> {
        Ok(Self::new(
            cfg.params.clone(),
            &cfg.noise,
            cfg.feedback()?,
            cfg.gains,
            SessionSettings::from_config(cfg),
            TrajectoryStore::new(cfg.trajectory_dir()),
            initial,
        )?)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn time(&self) -> f64 {
        self.plant.time()
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn store(&self) -> &TrajectoryStore {
        &self.store
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn last_saved(&self) -> Option<&str> {
        self.last_saved.as_deref()
    }

    /// Scripted teach still has commands to play.
    pub fn script_active(&self) -> bool {
        self.script.is_some()
    }

    /// Starts a headless teach: the script's commands drive the plant from
    /// the next tick on, and the recording is saved as `name` when it ends.
    pub fn start_script(&mut self, stream: ControlStream, name: &str) -> Result<(), String> {
        if !valid_name(name) {
            return Err(format!("invalid trajectory name `{name}`"));
        }
        if stream.is_empty() {
            return Err("empty command script".into());
        }
        if let Some(w) = stream.windows(2).find(|w| ((w[1].0 - w[0].0) - self.settings.dt).abs() > 0.01 * self.settings.dt) {
            return Err(format!(
                "script period {} at t = {} does not match dt = {}",
                w[1].0 - w[0].0,
                w[0].0,
                self.settings.dt
            ));
        }
        self.leave_mode();
        self.mode = Mode::Teach;
        self.recording = Some((self.time(), Vec::with_capacity(stream.len())));
        self.script = Some(Script {
            stream,
            next: 0,
            name: name.into(),
        });
        Ok(())
    }

    /// Folds one inbound message in; returns the replies.
    pub fn handle(&mut self, msg: WireMessage) -> Vec<WireMessage> {
        match msg {
            WireMessage::Command { u } => vec![self.on_command(u)],
            WireMessage::TeachControl(action) => vec![self.on_teach(action)],
            WireMessage::ModeSwitch { mode, trajectory } => self.on_mode_switch(mode, trajectory),
            other => vec![WireMessage::error(
                codes::UNEXPECTED,
                format!("{} is sent by the runtime, not to it", type_name(&other)),
            )],
        }
    }

    fn on_command(&mut self, u: [f64; 3]) -> WireMessage {
        if self.mode != Mode::Teach || self.recording.is_none() || self.script.is_some() {
            return WireMessage::error(
                codes::NOT_RECORDING,
                "commands are accepted only while a teach recording is running; dropped",
            );
        }
        let (action, clamped) = ControlAction::saturating(u[0], u[1], u[2]);
        self.held = Some(Held {
            u: action,
            received: self.time(),
        });
        let text = if clamped {
            format!(
                "clamped to [{}, {}, {}]",
                action.ux(),
                action.uy(),
                action.upsi()
            )
        } else {
            "applied".to_string()
        };
        WireMessage::ack("command", text)
    }

    fn on_teach(&mut self, action: TeachAction) -> WireMessage {
        if self.script.is_some() {
            return WireMessage::error(codes::WRONG_MODE, "a scripted teach is running");
        }
        match action {
            TeachAction::Start => {
                if self.mode != Mode::Teach {
                    return WireMessage::error(codes::WRONG_MODE, format!("recording needs teach mode, not {}", self.mode));
                }
                if self.recording.is_some() {
                    return WireMessage::error(codes::ALREADY_RECORDING, "already recording");
                }
                self.recording = Some((self.time(), Vec::new()));
                self.held = None;
                WireMessage::ack("teach_control", format!("recording from t = {}", self.time()))
            }
            TeachAction::Stop => match self.stop_recording() {
                Ok(n) => WireMessage::ack("teach_control", format!("stopped after {n} samples")),
                Err(e) => e,
            },
            TeachAction::Save { name } => {
                if !valid_name(&name) {
                    return WireMessage::error(codes::INVALID_NAME, format!("invalid trajectory name `{name}`"));
                }
                if self.recording.is_some() {
                    return WireMessage::error(codes::ALREADY_RECORDING, "stop the recording before saving");
                }
                let Some(traj) = self.pending.take() else {
                    return WireMessage::error(codes::NOTHING_TO_SAVE, "no stopped recording to save");
                };
                match self.store.save(&name, &traj) {
                    Ok(_) => {
                        self.last_saved = Some(name.clone());
                        WireMessage::ack("teach_control", format!("saved `{name}`"))
                    }
                    Err(e) => {
                        self.pending = Some(traj);
                        WireMessage::error(codes::IO, format!("{e:#}"))
                    }
                }
            }
        }
    }

    fn stop_recording(&mut self) -> Result<usize, WireMessage> {
        let Some((_, samples)) = self.recording.take() else {
            return Err(WireMessage::error(codes::NOT_RECORDING, "no recording running"));
        };
        self.held = None;
        let n = samples.len();
        match ReferenceTrajectory::new(samples) {
            Ok(tr) => {
                self.pending = Some(tr);
                Ok(n)
            }
            Err(e) => Err(WireMessage::error(codes::NOTHING_TO_SAVE, format!("recording discarded: {e}"))),
        }
    }

    fn leave_mode(&mut self) {
        if self.recording.is_some() {
            let _ = self.stop_recording();
        }
        self.held = None;
        self.script = None;
        if let Some(r) = self.repeater.take() {
            self.estimator = Some(r.into_estimator());
        }
        self.mode = Mode::Idle;
    }

    fn on_mode_switch(&mut self, mode: Mode, trajectory: Option<String>) -> Vec<WireMessage> {
        match mode {
            Mode::Idle | Mode::Teach => {
                self.leave_mode();
                self.mode = mode;
                vec![WireMessage::ack("mode_switch", mode.to_string())]
            }
            Mode::Repeat => {
                let Some(name) = trajectory.or_else(|| self.last_saved.clone()) else {
                    return vec![WireMessage::error(codes::UNKNOWN_TRAJECTORY, "no trajectory named and none saved yet")];
                };
                match self.start_repeat(&name) {
                    Ok(()) => vec![WireMessage::ack("mode_switch", format!("repeat `{name}`"))],
                    Err(e) => vec![WireMessage::error(codes::UNKNOWN_TRAJECTORY, e)],
                }
            }
        }
    }

    /// Starts repeating the stored trajectory `name` from the current tick.
    pub fn start_repeat(&mut self, name: &str) -> Result<(), String> {
        let traj = self.store.load(name).map_err(|e| format!("{e:#}"))?;
        self.start_repeat_of(traj);
        Ok(())
    }

    pub fn start_repeat_of(&mut self, traj: ReferenceTrajectory) {
        self.leave_mode();
        let guidance = Guidance::new(traj, self.settings.looped).with_blend(self.settings.blend);
        let estimator = self
            .estimator
            .take()
            .unwrap_or_else(|| Estimator::new(&self.feedback, self.settings.dt, self.plant.state()));
        self.repeater = Some(Repeater::new(
            guidance,
            self.gains,
            estimator,
            self.settings.abort_bound,
            self.time(),
        ));
        self.mode = Mode::Repeat;
    }

    fn teleop_command(&mut self) -> ControlAction {
        if let Some(script) = &mut self.script {
            let u = script.stream[script.next].1;
            script.next += 1;
            return u;
        }
        match self.held {
            Some(h) if self.mode == Mode::Teach && self.time() - h.received < self.settings.dead_man - 1e-9 => h.u,
            Some(_) => {
                self.held = None;
                ControlAction::ZERO
            }
            None => ControlAction::ZERO,
        }
    }

    /// Advances the plant one tick under the active mode.
    pub fn tick(&mut self) -> rover_core::Result<TickOutput> {
        let mut out = TickOutput::default();
        let Some(rep) = self.repeater.as_mut() else {
            return self.tick_open_loop(out);
        };
        let result = rep
            .tick(&mut self.plant)
            .map(|r| (r, rep.finished(&self.plant)));
        let ((step, record, filter), done_repeat) = match result {
            Ok(r) => r,
            Err(CoreError::TrackingDiverged { t, error, bound }) => {
                let text = format!("cross-track error {error:.3} m exceeds {bound:.3} m at t = {t:.2} s");
                out.outbound.push(WireMessage::error(codes::TRACKING_DIVERGED, text.clone()));
                out.outbound.push(WireMessage::ModeSwitch {
                    mode: Mode::Idle,
                    trajectory: None,
                });
                out.aborted = Some(text);
                self.leave_mode();
                return self.tick_open_loop(out);
            }
            Err(e) => return Err(e),
        };
        self.repeat_steps.push(step);
        let pose_vel = filter
            .as_ref()
            .map(|f| (f.pose, f.state.velocity()))
            .or_else(|| record.truth.map(|t| (t.state.pose, t.state.vel)));
        self.finish_tick(record, filter, pose_vel, &mut out);
        if done_repeat {
            self.leave_mode();
            out.outbound.push(WireMessage::ModeSwitch {
                mode: Mode::Idle,
                trajectory: None,
            });
        }
        Ok(out)
    }

    fn tick_open_loop(&mut self, mut out: TickOutput) -> rover_core::Result<TickOutput> {
        let u = self.teleop_command();
        let record = self.plant.tick(u)?;
        let estimator = self.estimator.as_mut().expect("estimator is home outside repeat");
        let (pose, vel, filter) = estimator.observe(&record)?;
        if let Some((start, samples)) = &mut self.recording {
            samples.push(TrajectorySample {
                t: record.t - *start,
                pose,
                vel,
            });
        }
        self.finish_tick(record, filter, Some((pose, vel)), &mut out);
        if let Some(script) = &self.script {
            if script.next >= script.stream.len() {
                let name = script.name.clone();
                self.script = None;
                match self.stop_recording() {
                    Ok(_) => {
                        let traj = self.pending.take().expect("just stopped");
                        match self.store.save(&name, &traj) {
                            Ok(_) => self.last_saved = Some(name),
                            Err(e) => return Err(CoreError::Io(std::io::Error::other(format!("{e:#}")))),
                        }
                    }
                    Err(WireMessage::Error { text, .. }) => return Err(CoreError::InvalidParams(text)),
                    Err(_) => unreachable!(),
                }
                self.mode = Mode::Idle;
                out.outbound.push(WireMessage::ModeSwitch {
                    mode: Mode::Idle,
                    trajectory: None,
                });
            }
        }
        Ok(out)
    }

    fn finish_tick(
        &mut self,
        record: LogRecord,
        filter: Option<FilterStep>,
        pose_vel: Option<(Pose, BodyVelocity)>,
        out: &mut TickOutput,
    ) {
        let (mu, diag) = match &filter {
            Some(f) => {
                let mut mu = [0.0; 6];
                let mut d = [0.0; 6];
                mu.copy_from_slice(f.state.mu.as_slice());
                d.copy_from_slice(f.state.sigma.diagonal().as_slice());
                (mu, d)
            }
            None => {
                let tr = record.truth.unwrap_or_default();
                let v = tr.state.vel;
                let a = tr.accel;
                ([v.vx, v.vy, v.vpsi, a.ax, a.ay, a.apsi], [0.0; 6])
            }
        };
        let pose = pose_vel.map(|p| p.0).unwrap_or_default();
        self.last = Some((record.t, pose, mu, diag));
        let index = self.records.len() as u64;
        self.records.push(record);
        if let Some(f) = filter {
            self.filter.push(f);
        }
        if index % self.settings.state_every == 0 {
            out.outbound.push(self.state_update().expect("just set"));
        }
    }

    /// StateUpdate for the latest tick.
    pub fn state_update(&self) -> Option<WireMessage> {
        self.last.map(|(t, pose, mu, diag)| WireMessage::StateUpdate {
            t,
            mode: self.mode,
            pose: [pose.x, pose.y, pose.psi],
            mu,
            diag_sigma: diag,
        })
    }

    pub fn log(&self) -> MissionLog {
        MissionLog {
            dt: self.settings.dt,
            records: self.records.clone(),
        }
    }

    /// Log extended with the filter trace, when the EKF ran on every tick.
    pub fn trace(&self) -> Option<Table> {
        (!self.filter.is_empty() && self.filter.len() == self.records.len())
            .then(|| trace_table(&self.log(), &self.filter))
    }

    pub fn repeat_steps(&self) -> &[RepeatStep] {
        &self.repeat_steps
    }

    /// Reference, estimated and true pose per repeat tick, for overlay plots.
    pub fn overlay(&self) -> Table {
        overlay_table(&self.repeat_steps)
    }
}

pub const OVERLAY_COLUMNS: [&str; 16] = [
    "t", "ref_x", "ref_y", "ref_psi", "est_x", "est_y", "est_psi", "x", "y", "psi", "ref_vx",
    "est_vx", "vx", "ux", "upsi", "cross_track",
];

pub fn overlay_table(steps: &[RepeatStep]) -> Table {
    let mut table = Table::new(&OVERLAY_COLUMNS);
    for s in steps {
        let truth = s.truth.unwrap_or_default();
        table.push(vec![
            s.t,
            s.reference.x,
            s.reference.y,
            s.reference.psi,
            s.estimate.x,
            s.estimate.y,
            s.estimate.psi,
            truth.pose.x,
            truth.pose.y,
            truth.pose.psi,
            s.ref_vel.vx,
            s.est_vel.vx,
            truth.vel.vx,
            s.u.ux(),
            s.u.upsi(),
            s.cross_track,
        ]);
    }
    table
}

fn type_name(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::Command { .. } => "Command",
        WireMessage::StateUpdate { .. } => "StateUpdate",
        WireMessage::TeachControl(_) => "TeachControl",
        WireMessage::ModeSwitch { .. } => "ModeSwitch",
        WireMessage::Ack { .. } => "Ack",
        WireMessage::Error { .. } => "Error",
    }
}
