use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rover");

const NOISY_CONFIG: &str = r#"
seed = 7

[noise]
q = [2.852, 0, 0, 0, 0, 0, 0, 0, 0.008]
r = [0, 0, 0, 0, 0, 0,
     0, 0, 0, 0, 0, 0,
     0, 0, 0, 0, 0, 0,
     0, 0, 0, 0.01, 0, 0,
     0, 0, 0, 0, 1e-6, 0,
     0, 0, 0, 0, 0, 1e-4]

[runtime]
data_dir = "data"
"#;

struct Bench {
    dir: tempfile::TempDir,
}

impl Bench {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rover.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn rover(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .current_dir(self.dir.path())
            .env_remove("ROVER_PORT")
            .env_remove("ROVER_DATA_DIR")
            .arg("--config")
            .arg("rover.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.rover(args);
        assert!(
            out.status.success(),
            "rover {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }
}

fn write_script(path: &Path, seconds: f64, f: impl Fn(f64) -> (f64, f64)) {
    let mut s = String::from("t,ux,uy,upsi\n");
    for k in 0..(seconds / 0.01).round() as usize {
        let t = k as f64 * 0.01;
        let (ux, upsi) = f(t);
        s.push_str(&format!("{t:?},{ux:?},0.0,{upsi:?}\n"));
    }
    std::fs::write(path, s).unwrap();
}

fn sinuous(t: f64) -> (f64, f64) {
    (0.6, 0.6 + 0.25 * (2.0 * std::f64::consts::PI * t / 15.0).sin())
}

fn stat(stdout: &str, key: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no `{key}` in\n{stdout}"));
    line[key.len()..]
        .split_whitespace()
        .next()
        .unwrap()
        .trim_end_matches(',')
        .parse()
        .unwrap()
}

#[test]
fn simulate_is_byte_reproducible() {
    let b = Bench::new(NOISY_CONFIG);
    let o1 = b.ok(&["simulate", "--duration", "120", "--channels", "x,psi", "--seed", "7", "--out", "a.log"]);
    let o2 = b.ok(&["simulate", "--duration", "120", "--channels", "x,psi", "--seed", "7", "--out", "b.log"]);
    assert_eq!(b.read("a.log"), b.read("b.log"));
    assert_eq!(o1.replace("a.log", ""), o2.replace("b.log", ""));
    b.ok(&["simulate", "--duration", "120", "--channels", "x,psi", "--seed", "8", "--out", "c.log"]);
    assert_ne!(b.read("a.log"), b.read("c.log"));
}

#[test]
fn empty_channel_list_is_a_usage_error() {
    let b = Bench::new("");
    let out = b.rover(&["simulate", "--channels", "", "--out", "x.log"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel"));
    assert!(!b.path("x.log").exists());
}

#[test]
fn bad_config_fails_with_a_message() {
    let b = Bench::new("dt = 0.01\nsede = 3\n");
    let out = b.rover(&["simulate", "--out", "x.log"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn noiseless_identification_converges_and_notes_the_unexcited_column() {
    let b = Bench::new("");
    b.ok(&["simulate", "--duration", "120", "--seed", "3", "--out", "clean.log"]);
    let out = b.rover(&["identify", "--log", "clean.log", "--params-out", "id.toml", "--noise-out", "id.noise"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stdout.contains("converged: true"), "{stdout}");
    let final_cost: f64 = stdout
        .lines()
        .find_map(|l| l.split("final ").nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(final_cost < 1e-10, "{final_cost}");
    assert!(stderr.contains("T01, T11, T21 not observable"), "{stderr}");

    let p = rover_core::dynamics::DynamicParams::from_toml(&String::from_utf8(b.read("id.toml")).unwrap()).unwrap();
    assert!((p.dl[2] / -500.553 - 1.0).abs() < 1e-6);
    let n = rover_core::noise::NoiseModel::from_text(&String::from_utf8(b.read("id.noise")).unwrap()).unwrap();
    assert!(n.q_meas.abs().max() < 1e-8);

    // the standalone covariance command agrees with identify's
    b.ok(&["estimate-cov", "--log", "clean.log", "--params", "id.toml", "--out", "cov.noise"]);
    assert_eq!(b.read("cov.noise"), b.read("id.noise"));
}

#[test]
fn truncated_log_reports_insufficient_samples() {
    let b = Bench::new("");
    b.ok(&["simulate", "--duration", "0.5", "--out", "short.log"]);
    let out = b.rover(&["identify", "--log", "short.log"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient samples"));
}

#[test]
fn identify_and_replay_are_byte_reproducible() {
    let b = Bench::new(NOISY_CONFIG);
    b.ok(&["simulate", "--duration", "60", "--out", "n.log"]);
    let a = b.ok(&["identify", "--log", "n.log", "--params-out", "p1.toml", "--noise-out", "n1.noise"]);
    let c = b.ok(&["identify", "--log", "n.log", "--params-out", "p2.toml", "--noise-out", "n2.noise"]);
    assert_eq!(b.read("p1.toml"), b.read("p2.toml"));
    assert_eq!(b.read("n1.noise"), b.read("n2.noise"));
    assert_eq!(a.replace("p1.toml", "").replace("n1.noise", ""), c.replace("p2.toml", "").replace("n2.noise", ""));

    let r = b.ok(&["replay", "--log", "n.log", "--out", "t1.trace"]);
    b.ok(&["replay", "--log", "n.log", "--out", "t2.trace"]);
    assert_eq!(b.read("t1.trace"), b.read("t2.trace"));
    // the filter beats plain accelerometer integration on this log
    let line = r.lines().find(|l| l.starts_with("velocity rmse")).unwrap();
    let nums: Vec<f64> = line
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    assert!(nums[0] < nums[1], "{line}");
}

#[test]
fn tune_hold_and_line() {
    let b = Bench::new("");
    let hold = rover_core::gnc::ReferenceTrajectory::hold(rover_core::dynamics::Pose::new(1.0, 2.0, 0.3), 10.0, 0.01)
        .unwrap();
    std::fs::write(b.path("hold.traj"), hold.to_text()).unwrap();
    let out = b.ok(&["tune", "--trajectory", "hold.traj", "--out", "g.toml"]);
    assert!(stat(&out, "cost") < 1e-6, "{out}");

    let line = rover_core::gnc::ReferenceTrajectory::straight_line(rover_core::dynamics::Pose::default(), 0.1, 30.0, 0.01)
        .unwrap();
    std::fs::write(b.path("line.traj"), line.to_text()).unwrap();
    let o1 = b.ok(&["tune", "--trajectory", "line.traj", "--out", "g1.toml"]);
    let o2 = b.ok(&["tune", "--trajectory", "line.traj", "--out", "g2.toml"]);
    assert_eq!(b.read("g1.toml"), b.read("g2.toml"));
    assert_eq!(o1.replace("g1", ""), o2.replace("g2", ""));
    let rms: f64 = o1.split("rms position error ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(rms < 0.05, "{o1}");

    let fast = rover_core::gnc::ReferenceTrajectory::straight_line(rover_core::dynamics::Pose::default(), 1.0, 10.0, 0.01)
        .unwrap();
    std::fs::write(b.path("fast.traj"), fast.to_text()).unwrap();
    let out = b.rover(&["tune", "--trajectory", "fast.traj"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn scripted_teach_then_repeat_is_reproducible() {
    let b = Bench::new(NOISY_CONFIG);
    write_script(&b.path("circle.cmds"), 60.0, sinuous);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let teach = b.ok(&["run", "--mode", "teach", "--name", "circle", "--script", "circle.cmds", "--headless"]);
        assert!(teach.contains("trajectory `circle` saved"), "{teach}");
        let traj = b.read("data/trajectories/circle.traj");
        let teach_log = b.read("data/runs/circle-teach.log");
        let teach_trace = b.read("data/runs/circle-teach.trace");
        b.ok(&["tune", "--trajectory", "data/trajectories/circle.traj", "--out", "gains.toml"]);
        let gains = b.read("gains.toml");
        let repeat = b.ok(&["run", "--mode", "repeat", "--name", "circle", "--gains", "gains.toml", "--headless"]);
        assert!(stat(&repeat, "velocity rmse") < 0.01, "{repeat}");
        outputs.push((
            traj,
            teach_log,
            teach_trace,
            gains,
            b.read("data/runs/circle-repeat.log"),
            b.read("data/runs/circle-repeat.trace"),
            b.read("data/runs/circle-repeat.overlay"),
            repeat,
        ));
    }
    assert!(outputs[0] == outputs[1], "pipeline outputs differ between runs");

    let csv = b.ok(&[
        "plot-export",
        "--input",
        "data/runs/circle-repeat.overlay",
        "--columns",
        "t,ref_x,ref_y,est_x,est_y",
        "--every",
        "10",
        "--out",
        "overlay.csv",
    ]);
    assert!(csv.contains("x 5 columns"), "{csv}");
    let text = String::from_utf8(b.read("overlay.csv")).unwrap();
    assert!(text.starts_with("t,ref_x,ref_y,est_x,est_y\n"));
    let rows = text.lines().count() - 1;
    assert!((599..=601).contains(&rows), "{rows}");
}

#[test]
fn scripted_straight_line_repeats_within_two_centimetres() {
    let b = Bench::new(&format!("{NOISY_CONFIG}feedback = \"truth\"\n"));
    write_script(&b.path("line.cmds"), 30.0, |_| (0.5, 0.0));
    b.ok(&["run", "--mode", "teach", "--name", "line", "--script", "line.cmds", "--headless"]);
    b.ok(&["tune", "--trajectory", "data/trajectories/line.traj", "--out", "gains.toml"]);
    let out = b.ok(&["run", "--mode", "repeat", "--name", "line", "--gains", "gains.toml", "--headless"]);
    assert!(stat(&out, "cross-track rms") < 0.02, "{out}");
}

#[test]
fn teach_without_a_source_is_refused() {
    let b = Bench::new(NOISY_CONFIG);
    let out = b.rover(&["run", "--mode", "teach", "--name", "x", "--headless"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs a command source"));
    let out = b.rover(&["run", "--mode", "teach", "--name", "x", "--port", "0", "--wait", "0.2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no teleop client attached"));
}

#[test]
fn repeat_of_a_missing_trajectory_fails() {
    let b = Bench::new("");
    let out = b.rover(&["run", "--mode", "repeat", "--name", "ghost", "--headless"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot repeat `ghost`"));
}

#[test]
fn zero_noise_cannot_drive_the_filter() {
    let b = Bench::new("");
    let out = b.rover(&["run", "--headless", "--duration", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive definite"));
}

#[test]
fn idle_run_needs_an_end() {
    let b = Bench::new("[runtime]\nfeedback = \"truth\"\n");
    assert_eq!(b.rover(&["run", "--headless"]).status.code(), Some(1));
    let out = b.ok(&["run", "--headless", "--duration", "2"]);
    assert!(out.starts_with("200 ticks"), "{out}");
}

#[test]
fn env_overrides_data_dir() {
    let b = Bench::new(NOISY_CONFIG);
    write_script(&b.path("s.cmds"), 1.0, |_| (0.2, 0.0));
    let out = Command::new(BIN)
        .current_dir(b.dir.path())
        .env("ROVER_DATA_DIR", b.path("elsewhere"))
        .args(["--config", "rover.toml", "run", "--mode", "teach", "--name", "s", "--script", "s.cmds", "--headless"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(b.path("elsewhere/trajectories/s.traj").is_file());
}

#[test]
fn shipped_config_loads() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/workbench.toml");
    let c = rover_runtime::config::WorkbenchConfig::load(Some(&cfg)).unwrap();
    assert_eq!(c.params, rover_core::dynamics::DynamicParams::reference_vehicle());
    assert!(c.feedback().is_ok());
    let b = Bench::new("");
    let out = Command::new(BIN)
        .current_dir(b.dir.path())
        .arg("--config")
        .arg(&cfg)
        .args(["simulate", "--duration", "1", "--out", "one.log"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
