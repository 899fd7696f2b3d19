//! `rover` subcommands.

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rover_core::dynamics::{BodyVelocity, DynamicParams, VehicleState};
use rover_core::ekf::{integrate_accelerometer, run_filter, trace_table, velocity_rmse, EkfState};
use rover_core::gnc::{
    control_stream_from_table, tune_gains, RepeatOutcome, SearchSpace, TuneOptions,
};
use rover_core::noise::NoiseModel;
use rover_core::sim::{excitation_signal, run_mission, ChannelMask, MissionLog, MissionOptions};
use rover_core::sysid::{
    estimate_covariances, fit_dynamic, FitOptions, KnownParams, Loss, ParamVector, PARAM_NAMES,
};
use rover_core::table::{fmt_f64, Table};

use crate::config::{GainsDoc, WorkbenchConfig};
use crate::protocol::{Mode, WireMessage};
use crate::server::{Endpoint, NetEvent};
use crate::session::Session;

#[derive(Debug, Parser)]
#[command(name = "rover", version, about = "Planar vehicle workbench: simulate, identify, tune, teach and repeat")]
pub struct Cli {
    /// Workbench config document (TOML). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an excitation mission and write its log.
    Simulate(SimulateArgs),
    /// Identify friction and torque parameters (and noise covariances) from a log.
    Identify(IdentifyArgs),
    /// Estimate Q and R for a log given identified parameters.
    EstimateCov(EstimateCovArgs),
    /// Tune PD gains for a reference trajectory.
    Tune(TuneArgs),
    /// Run the closed loop: teach, repeat, or idle while serving teleop clients.
    Run(RunArgs),
    /// Run the EKF over a recorded log and write the estimate trace.
    Replay(ReplayArgs),
    /// Export any record file (log, trace, trajectory, overlay) as CSV.
    PlotExport(PlotExportArgs),
}

fn parse_channels(s: &str) -> Result<ChannelMask, String> {
    s.parse().map_err(|e: rover_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Mission length, seconds.
    #[arg(long, default_value_t = 120.0)]
    pub duration: f64,
    /// Excited actuator channels, comma-separated subset of x,y,psi.
    #[arg(long, default_value = "x,psi", value_parser = parse_channels)]
    pub channels: ChannelMask,
    /// Seed for excitation and noise (config `seed` when omitted).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ignore the configured noise model.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Huber,
    Ls,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// Initial parameters document; supplies m and inertia too. Defaults to
    /// the config's m and inertia with a generic starting point.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LossArg::Huber)]
    pub loss: LossArg,
    /// Huber threshold in normalised residual units.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// Where to write the identified parameters document.
    #[arg(long, value_name = "FILE")]
    pub params_out: Option<PathBuf>,
    /// Where to write the estimated noise document.
    #[arg(long, value_name = "FILE")]
    pub noise_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateCovArgs {
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// Identified parameters document.
    #[arg(long, value_name = "FILE")]
    pub params: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Parameters document (config params when omitted).
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub trajectory: PathBuf,
    #[arg(long, default_value_t = TuneOptions::default().delta)]
    pub delta: f64,
    #[arg(long, default_value_t = SearchSpace::default().points)]
    pub points: usize,
    #[arg(long, default_value_t = SearchSpace::default().rounds)]
    pub rounds: usize,
    /// Where to write the `[gains]` document.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunMode {
    Teach,
    Repeat,
    Idle,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value_t = RunMode::Idle)]
    pub mode: RunMode,
    /// Trajectory to teach into or repeat; also names the run's output files.
    #[arg(long, default_value = "session")]
    pub name: String,
    /// Command script (columns t,ux,uy,upsi) for a headless teach.
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// `[gains]` document overriding the config gains.
    #[arg(long, value_name = "FILE")]
    pub gains: Option<PathBuf>,
    /// Do not serve the wire protocol.
    #[arg(long)]
    pub headless: bool,
    /// Listening port (overrides config and ROVER_PORT; 0 picks a free one).
    #[arg(long)]
    pub port: Option<u16>,
    /// Stop after this many simulated seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Seconds to wait for a teleop client before refusing a live teach.
    #[arg(long, default_value_t = 30.0)]
    pub wait: f64,
    /// Loop the repeated trajectory.
    #[arg(long)]
    pub looped: bool,
    /// Output directory (default: `runs` under the data directory).
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// Parameters document (config params when omitted).
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    /// Noise document (config noise when omitted).
    #[arg(long, value_name = "FILE")]
    pub noise: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotExportArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Columns to keep, comma-separated (all when omitted).
    #[arg(long)]
    pub columns: Option<String>,
    /// Keep every n-th record.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = WorkbenchConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, &a),
        Command::Identify(a) => identify(&cfg, &a),
        Command::EstimateCov(a) => estimate_cov(&a),
        Command::Tune(a) => tune(&cfg, &a),
        Command::Run(a) => run_loop(cfg, &a),
        Command::Replay(a) => replay(&cfg, &a),
        Command::PlotExport(a) => plot_export(&a),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_log(path: &Path) -> Result<MissionLog> {
    MissionLog::from_text(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn read_params(path: &Path) -> Result<DynamicParams> {
    DynamicParams::from_toml(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn read_noise(path: &Path) -> Result<NoiseModel> {
    NoiseModel::from_text(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn simulate(cfg: &WorkbenchConfig, a: &SimulateArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let u = excitation_signal(a.duration, cfg.dt, a.channels, seed)?;
    let noise = if a.noiseless { NoiseModel::zero() } else { cfg.noise.clone() };
    let opts = MissionOptions {
        dt: cfg.dt,
        seed,
        process_noise: cfg.runtime.process_noise,
        ..Default::default()
    };
    let log = run_mission(&cfg.params, &noise, &u, &opts)?;
    write(&a.out, &log.to_text())?;

    let mut s = String::new();
    writeln!(s, "wrote {} records ({:.3} s at dt = {} s, seed {seed}) to {}", log.len(), log.duration(), cfg.dt, a.out.display())?;
    writeln!(s, "{:<6} {:>12} {:>12}", "signal", "mean", "std")?;
    let recs = &log.records;
    let channels: [(&str, Box<dyn Fn(usize) -> f64>); 6] = [
        ("ux", Box::new(|k| recs[k].u.ux())),
        ("uy", Box::new(|k| recs[k].u.uy())),
        ("upsi", Box::new(|k| recs[k].u.upsi())),
        ("ax", Box::new(|k| recs[k].sensor.ax_meas)),
        ("ay", Box::new(|k| recs[k].sensor.ay_meas)),
        ("gyro", Box::new(|k| recs[k].sensor.gyro_z)),
    ];
    for (name, f) in &channels {
        let (m, sd) = mean_std((0..recs.len()).map(f));
        writeln!(s, "{name:<6} {m:>12.6} {sd:>12.6}")?;
    }
    print!("{s}");
    Ok(())
}

fn matrix_text<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> String {
    let mut s = String::new();
    for r in 0..R {
        let row: Vec<String> = (0..C).map(|c| format!("{:>12.6e}", m[(r, c)])).collect();
        let _ = writeln!(s, "  {}", row.join(" "));
    }
    s
}

fn identify(cfg: &WorkbenchConfig, a: &IdentifyArgs) -> Result<()> {
    let log = read_log(&a.log)?;
    let (known, init) = match &a.init {
        Some(p) => {
            let p = read_params(p)?;
            (KnownParams::from(&p), ParamVector::pack(&p))
        }
        None => {
            let known = KnownParams::from(&cfg.params);
            (known, ParamVector::default_init(known))
        }
    };
    let opts = FitOptions {
        delta: a.delta,
        loss: match a.loss {
            LossArg::Huber => Loss::Huber,
            LossArg::Ls => Loss::LeastSquares,
        },
        max_iter: a.max_iter,
        ..Default::default()
    };
    let report = fit_dynamic(&log, known, &init, &opts)?;

    let mut s = String::new();
    writeln!(
        s,
        "converged: {} ({:?}) after {} iterations",
        report.converged, report.stop, report.iterations
    )?;
    writeln!(s, "cost: initial {:.6e}, final {:.6e}", report.initial_cost, report.final_cost)?;
    writeln!(s, "{:<8} {:>14} {:>12}", "param", "value", "rel.err")?;
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let rse = match report.relative_std_error[i] {
            Some(r) => format!("{r:.3e}"),
            None => "fixed".into(),
        };
        writeln!(s, "{name:<8} {:>14.6} {rse:>12}", report.params.0[i])?;
    }
    let d = &report.diagnostics;
    writeln!(
        s,
        "residual rms (ax, ay, gyro): {:.4e} {:.4e} {:.4e}; down-weighted {:.1}%",
        d.rms[0],
        d.rms[1],
        d.rms[2],
        100.0 * d.downweighted_fraction
    )?;
    if !report.unidentifiable.is_empty() {
        writeln!(s, "unidentifiable: {}", report.unidentifiable.join(", "))?;
        eprintln!(
            "note: {} not observable from this log: the excitation never moves them, so they are held at their initial values",
            report.unidentifiable.join(", ")
        );
    }
    if !report.poorly_determined.is_empty() {
        writeln!(s, "poorly determined: {}", report.poorly_determined.join(", "))?;
    }
    let params = report.params.unpack(known);
    if let Some(p) = &a.params_out {
        write(p, &params.to_toml())?;
        writeln!(s, "parameters written to {}", p.display())?;
    }

    let cov = estimate_covariances(&log, &report.params, known)?;
    writeln!(s, "Q ({} samples{}):", cov.samples, if cov.r_surrogate { ", surrogate reference" } else { "" })?;
    s.push_str(&matrix_text(&cov.noise.q_meas));
    writeln!(s, "R:")?;
    s.push_str(&matrix_text(&cov.noise.r_model));
    if let Some(p) = &a.noise_out {
        write(p, &cov.noise.to_text())?;
        writeln!(s, "noise model written to {}", p.display())?;
    }
    print!("{s}");
    Ok(())
}

fn estimate_cov(a: &EstimateCovArgs) -> Result<()> {
    let log = read_log(&a.log)?;
    let params = read_params(&a.params)?;
    let cov = estimate_covariances(&log, &ParamVector::pack(&params), KnownParams::from(&params))?;
    write(&a.out, &cov.noise.to_text())?;
    let mut s = String::new();
    if cov.r_surrogate {
        writeln!(s, "no ground truth in the log: R uses the smoothed-sensor surrogate reference")?;
    }
    writeln!(s, "Q ({} samples):", cov.samples)?;
    s.push_str(&matrix_text(&cov.noise.q_meas));
    writeln!(s, "R:")?;
    s.push_str(&matrix_text(&cov.noise.r_model));
    writeln!(s, "written to {}", a.out.display())?;
    print!("{s}");
    Ok(())
}

fn tune(cfg: &WorkbenchConfig, a: &TuneArgs) -> Result<()> {
    let params = match &a.params {
        Some(p) => read_params(p)?,
        None => cfg.params.clone(),
    };
    let traj = rover_core::gnc::ReferenceTrajectory::from_text(&read(&a.trajectory)?)
        .with_context(|| format!("in {}", a.trajectory.display()))?;
    let space = SearchSpace {
        points: a.points,
        rounds: a.rounds,
        ..Default::default()
    };
    let opts = TuneOptions {
        delta: a.delta,
        ..Default::default()
    };
    let report = tune_gains(&params, &traj, &space, &opts)?;
    let g = report.gains;
    let mut s = String::new();
    writeln!(s, "gains: alpha {} beta {} gamma {}", fmt_f64(g.alpha), fmt_f64(g.beta), fmt_f64(g.gamma))?;
    writeln!(s, "cost {:.6e}, rms position error {:.6} m over {} candidates", report.cost, report.rms_position_error, report.evaluated.len())?;
    if report.lateral_demand > 0.0 {
        writeln!(
            s,
            "lateral demand {:.4} m/s: sway is not actuated, so this part is tracked through heading only",
            report.lateral_demand
        )?;
    }
    if let Some(out) = &a.out {
        write(out, &toml::to_string(&GainsDoc { gains: g })?)?;
        writeln!(s, "written to {}", out.display())?;
    }
    print!("{s}");
    Ok(())
}

fn replay(cfg: &WorkbenchConfig, a: &ReplayArgs) -> Result<()> {
    let log = read_log(&a.log)?;
    let params = match &a.params {
        Some(p) => read_params(p)?,
        None => cfg.params.clone(),
    };
    let noise = match &a.noise {
        Some(p) => read_noise(p)?,
        None => cfg.noise.clone(),
    };
    let steps = run_filter(&log, &params, &noise, &EkfState::at_rest())?;
    write(&a.out, &trace_table(&log, &steps).to_text())?;
    let mut s = String::new();
    writeln!(s, "filtered {} records, trace written to {}", steps.len(), a.out.display())?;
    let ekf: Vec<BodyVelocity> = steps.iter().map(|st| st.state.velocity()).collect();
    let naive = integrate_accelerometer(&log, BodyVelocity::default());
    if let (Some(e), Some(n)) = (velocity_rmse(&log, &ekf), velocity_rmse(&log, &naive)) {
        writeln!(s, "velocity rmse: ekf {e:.6} m/s, accelerometer integration {n:.6} m/s")?;
    }
    if let (Some(last), Some(rec)) = (steps.last(), log.records.last()) {
        if let Some(tr) = rec.truth {
            let drift = (last.pose.x - tr.state.pose.x).hypot(last.pose.y - tr.state.pose.y);
            writeln!(s, "final dead-reckoning drift {drift:.4} m")?;
        }
    }
    print!("{s}");
    Ok(())
}

fn plot_export(a: &PlotExportArgs) -> Result<()> {
    let table = Table::from_text(&read(&a.input)?).with_context(|| format!("in {}", a.input.display()))?;
    let names: Vec<&str> = match &a.columns {
        Some(c) => c.split(',').map(str::trim).filter(|c| !c.is_empty()).collect(),
        None => table.columns.iter().map(String::as_str).collect(),
    };
    if names.is_empty() {
        bail!("no columns selected");
    }
    let idx = table.require(&names)?;
    let mut out = Table::new(&names);
    for row in table.rows.iter().step_by(a.every.max(1)) {
        out.push(idx.iter().map(|&i| row[i]).collect());
    }
    write(&a.out, &out.to_text())?;
    println!("exported {} rows x {} columns to {}", out.rows.len(), names.len(), a.out.display());
    Ok(())
}

fn read_gains(path: &Path) -> Result<rover_core::gnc::PdGains> {
    let doc: GainsDoc = toml::from_str(&read(path)?).with_context(|| format!("in {}", path.display()))?;
    doc.gains.validate()?;
    Ok(doc.gains)
}

/// How a `run` ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Finish {
    /// Scripted teach or a non-looping repeat: stop when it completes.
    Work,
    /// Live session: stop when the client leaves (or at `--duration`).
    Client,
    /// Nothing to finish on its own: only `--duration` ends it.
    Never,
}

fn run_loop(mut cfg: WorkbenchConfig, a: &RunArgs) -> Result<()> {
    if let Some(g) = &a.gains {
        cfg.gains = read_gains(g)?;
    }
    if let Some(p) = a.port {
        cfg.runtime.port = p;
    }
    if a.looped {
        cfg.runtime.looped = true;
    }
    if let Some(d) = a.duration {
        if !(d > 0.0) {
            bail!("--duration must be positive");
        }
    }
    let store = crate::store::TrajectoryStore::new(cfg.trajectory_dir());
    let repeat_traj = match a.mode {
        RunMode::Repeat => Some(store.load(&a.name).with_context(|| format!("cannot repeat `{}`", a.name))?),
        _ => None,
    };
    let script = match &a.script {
        Some(p) if a.mode == RunMode::Teach => Some(
            control_stream_from_table(&Table::from_text(&read(p)?)?).with_context(|| format!("in {}", p.display()))?,
        ),
        Some(_) => bail!("--script only applies to --mode teach"),
        None => None,
    };
    let initial = match &repeat_traj {
        Some(tr) => VehicleState {
            pose: tr.start().pose,
            vel: tr.start().vel,
        },
        None => VehicleState::default(),
    };
    let mut session = Session::from_config(&cfg, initial)?;
    let endpoint = if a.headless {
        None
    } else {
        let ep = Endpoint::bind(
            SocketAddr::from((Ipv4Addr::LOCALHOST, cfg.runtime.port)),
            cfg.runtime.queue_capacity,
        )?;
        eprintln!("listening on ws://{}", ep.local_addr());
        Some(ep)
    };
    let mut client = false;

    let finish = match (a.mode, script) {
        (RunMode::Teach, Some(stream)) => {
            session.start_script(stream, &a.name).map_err(anyhow::Error::msg)?;
            Finish::Work
        }
        (RunMode::Teach, None) => {
            let Some(ep) = &endpoint else {
                bail!("teach mode needs a command source: pass --script, or serve (drop --headless) and attach a teleop client");
            };
            let deadline = Instant::now() + Duration::from_secs_f64(a.wait.max(0.0));
            while !client {
                match ep.poll() {
                    Some(NetEvent::Connected(peer)) => {
                        eprintln!("client {peer} attached");
                        client = true;
                    }
                    Some(_) => {}
                    None if Instant::now() >= deadline => {
                        bail!("teach mode needs a command source: no teleop client attached within {} s and no --script", a.wait)
                    }
                    None => std::thread::sleep(Duration::from_millis(5)),
                }
            }
            for r in session.handle(WireMessage::ModeSwitch {
                mode: Mode::Teach,
                trajectory: None,
            }) {
                ep.send(r);
            }
            Finish::Client
        }
        (RunMode::Repeat, _) => {
            session.start_repeat_of(repeat_traj.clone().expect("loaded above"));
            if cfg.runtime.looped {
                Finish::Never
            } else {
                Finish::Work
            }
        }
        // a served idle run belongs to its client
        (RunMode::Idle, _) if endpoint.is_some() => Finish::Client,
        (RunMode::Idle, _) => Finish::Never,
    };
    if finish == Finish::Never && a.duration.is_none() && endpoint.is_none() {
        bail!("nothing would end this run: give --duration, or serve and let a client drive it");
    }

    let limit = a.duration.map(|d| (d / cfg.dt).round() as u64);
    let mut ticks: u64 = 0;
    let mut aborted = None;
    let mut paced_from: Option<(Instant, u64)> = None;
    let mut had_client = client;
    loop {
        if let Some(ep) = &endpoint {
            while let Some(ev) = ep.poll() {
                match ev {
                    NetEvent::Connected(peer) => {
                        eprintln!("client {peer} attached");
                        client = true;
                        had_client = true;
                    }
                    NetEvent::Disconnected => {
                        eprintln!("client detached");
                        client = false;
                    }
                    NetEvent::Message(m) => {
                        for r in session.handle(m) {
                            ep.send(r);
                        }
                    }
                }
            }
        }
        let done = match finish {
            Finish::Work => match a.mode {
                RunMode::Teach => !session.script_active(),
                _ => session.mode() != Mode::Repeat,
            },
            Finish::Client => had_client && !client,
            Finish::Never => false,
        };
        if done || limit.is_some_and(|l| ticks >= l) {
            break;
        }
        let out = session.tick()?;
        ticks += 1;
        if let Some(ep) = &endpoint {
            for m in out.outbound {
                ep.send(m);
            }
        }
        if let Some(text) = out.aborted {
            aborted = Some(text);
            if finish == Finish::Work {
                break;
            }
        }
        // real-time pacing only while someone is watching
        if client {
            let (t0, k0) = *paced_from.get_or_insert((Instant::now(), ticks));
            let due = t0 + Duration::from_secs_f64((ticks - k0) as f64 * cfg.dt);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        } else {
            paced_from = None;
        }
    }

    let out_dir = a.out_dir.clone().unwrap_or_else(|| cfg.runs_dir());
    let mode = match a.mode {
        RunMode::Teach => "teach",
        RunMode::Repeat => "repeat",
        RunMode::Idle => "idle",
    };
    let stem = out_dir.join(format!("{}-{mode}", a.name));
    let log = session.log();
    let mut s = String::new();
    writeln!(s, "{} ticks, t = {:.2} s", ticks, session.time())?;
    if !log.is_empty() {
        write(&stem.with_extension("log"), &log.to_text())?;
        if let Some(trace) = session.trace() {
            write(&stem.with_extension("trace"), &trace.to_text())?;
        }
        writeln!(s, "log written to {}", stem.with_extension("log").display())?;
    }
    if a.mode == RunMode::Teach && session.store().contains(&a.name) {
        writeln!(s, "trajectory `{}` saved in {}", a.name, session.store().dir().display())?;
    }
    if !session.repeat_steps().is_empty() {
        write(&stem.with_extension("overlay"), &session.overlay().to_text())?;
        let outcome = RepeatOutcome {
            steps: session.repeat_steps().to_vec(),
            log: log.clone(),
            filter: Vec::new(),
        };
        if let Some(tr) = &repeat_traj {
            writeln!(s, "cross-track rms {:.6} m", outcome.cross_track_rms(tr))?;
        }
        writeln!(s, "velocity rmse {:.6} m/s", outcome.velocity_rmse())?;
        writeln!(s, "final position drift {:.6} m", outcome.final_drift())?;
        writeln!(s, "overlay written to {}", stem.with_extension("overlay").display())?;
    }
    print!("{s}");
    std::io::stdout().flush()?;
    if let Some(text) = aborted {
        bail!("repeat aborted: {text}");
    }
    Ok(())
}
