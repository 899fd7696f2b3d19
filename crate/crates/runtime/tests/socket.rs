use std::io::{BufRead, BufReader};
use std::net::{SocketAddr, TcpStream};
use std::process::{Child, ChildStderr, Command, Stdio};
use std::time::{Duration, Instant};

use rover_runtime::protocol::{codes, Mode, TeachAction, WireMessage};
use rover_runtime::server::{Endpoint, NetEvent};
use tungstenite::{Message, WebSocket};

type Client = WebSocket<TcpStream>;

fn connect(addr: SocketAddr) -> Client {
    let stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).unwrap();
    ws
}

fn send(ws: &mut Client, msg: &WireMessage) {
    ws.send(Message::text(msg.encode())).unwrap();
}

fn recv(ws: &mut Client) -> WireMessage {
    loop {
        match ws.read().expect("reply before timeout") {
            Message::Text(t) => return WireMessage::decode(t.as_str()).unwrap(),
            Message::Close(_) => panic!("closed by server"),
            _ => {}
        }
    }
}

/// Next non-StateUpdate message, with the number of StateUpdates skipped.
fn reply(ws: &mut Client) -> (WireMessage, usize) {
    let mut skipped = 0;
    loop {
        match recv(ws) {
            WireMessage::StateUpdate { .. } => skipped += 1,
            m => return (m, skipped),
        }
    }
}

fn wait_event(ep: &Endpoint) -> NetEvent {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        if let Some(ev) = ep.poll() {
            return ev;
        }
        assert!(Instant::now() < deadline, "no endpoint event");
        std::thread::sleep(Duration::from_millis(1));
    }
}

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn update(t: f64) -> WireMessage {
    WireMessage::StateUpdate {
        t,
        mode: Mode::Teach,
        pose: [t, 0.0, 0.0],
        mu: [0.1; 6],
        diag_sigma: [1e-3; 6],
    }
}

fn code_of(m: &WireMessage) -> (&'static str, String) {
    match m {
        WireMessage::Ack { code, .. } => ("ack", code.clone()),
        WireMessage::Error { code, .. } => ("error", code.clone()),
        other => panic!("expected Ack or Error, got {other:?}"),
    }
}

#[test]
fn malformed_input_is_answered_and_the_connection_survives() {
    let ep = Endpoint::bind(local(), 16).unwrap();
    let mut ws = connect(ep.local_addr());
    assert!(matches!(wait_event(&ep), NetEvent::Connected(_)));

    for bad in [
        "not json",
        r#"{"type":"Command","u":[1,2]}"#,
        r#"{"type":"Warp","factor":9}"#,
        r#"{"type":"TeachControl","action":"save"}"#,
        r#"{"type":"Command","u":[1e999,0,0]}"#,
    ] {
        ws.send(Message::text(bad)).unwrap();
        assert_eq!(code_of(&recv(&mut ws)), ("error", codes::MALFORMED.into()), "{bad}");
    }
    ws.send(Message::binary(vec![1u8, 2, 3])).unwrap();
    assert_eq!(code_of(&recv(&mut ws)), ("error", codes::MALFORMED.into()));
    assert!(ep.poll().is_none(), "malformed input must not reach the loop");

    let cmd = WireMessage::Command { u: [0.5, 0.0, -0.25] };
    send(&mut ws, &cmd);
    assert_eq!(wait_event(&ep), NetEvent::Message(cmd));
    ep.send(WireMessage::ack("command", "applied"));
    assert_eq!(code_of(&recv(&mut ws)), ("ack", "command".into()));

    ws.close(None).unwrap();
    let _ = ws.flush();
    assert_eq!(wait_event(&ep), NetEvent::Disconnected);
}

#[test]
fn second_client_is_turned_away() {
    let ep = Endpoint::bind(local(), 16).unwrap();
    let mut a = connect(ep.local_addr());
    assert!(matches!(wait_event(&ep), NetEvent::Connected(_)));

    let mut b = connect(ep.local_addr());
    assert_eq!(code_of(&recv(&mut b)), ("error", codes::BUSY.into()));
    let closed = loop {
        match b.read() {
            Ok(Message::Close(_)) | Err(_) => break true,
            Ok(_) => {}
        }
    };
    assert!(closed);

    ep.send(update(1.0));
    assert_eq!(recv(&mut a), update(1.0));
    assert!(ep.poll().is_none(), "the refused client leaves no trace");
}

#[test]
fn sending_without_a_client_never_blocks() {
    let ep = Endpoint::bind(local(), 8).unwrap();
    let start = Instant::now();
    let displaced = (0..100_000).filter(|&k| ep.send(update(k as f64))).count();
    assert!(start.elapsed() < Duration::from_secs(2), "{:?}", start.elapsed());
    // everything beyond the queue's capacity displaced something, unless the
    // endpoint thread discarded entries in the meantime
    assert!(displaced <= 100_000 - 8);
}

#[test]
fn slow_client_loses_stale_updates_not_the_loop() {
    let ep = Endpoint::bind(local(), 32).unwrap();
    let mut ws = connect(ep.local_addr());
    assert!(matches!(wait_event(&ep), NetEvent::Connected(_)));

    // the client reads nothing while a flood goes out
    let n = 200_000;
    let start = Instant::now();
    let mut displaced = 0;
    for k in 0..n {
        displaced += ep.send(update(k as f64)) as usize;
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "sending stalled: {elapsed:?}");
    assert!(displaced > 0, "a client that never reads must cost queued updates");

    // once it catches up it sees the newest state, having missed stale ones
    let mut received = 0;
    let last = loop {
        let WireMessage::StateUpdate { t, .. } = recv(&mut ws) else {
            panic!("only updates were sent")
        };
        received += 1;
        if t == (n - 1) as f64 {
            break t;
        }
    };
    assert_eq!(last, (n - 1) as f64);
    assert!(received < n, "{received} of {n} delivered");
}

#[test]
fn port_in_use_is_reported() {
    let ep = Endpoint::bind(local(), 4).unwrap();
    let err = Endpoint::bind(ep.local_addr(), 4).err().unwrap();
    assert!(format!("{err:#}").contains("in use"), "{err:#}");
}

const CONFIG: &str = r#"
seed = 11

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

/// `rover run` serving on a free port.
struct Served {
    child: Child,
    _stderr: BufReader<ChildStderr>,
    addr: SocketAddr,
    dir: Option<tempfile::TempDir>,
}

impl Served {
    fn start(args: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rover.toml"), CONFIG).unwrap();
        let mut child = Command::new(env!("CARGO_BIN_EXE_rover"))
            .current_dir(dir.path())
            .env_remove("ROVER_PORT")
            .env_remove("ROVER_DATA_DIR")
            .args(["--config", "rover.toml", "run", "--port", "0"])
            .args(args)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut stderr = BufReader::new(child.stderr.take().unwrap());
        let mut line = String::new();
        let addr = loop {
            line.clear();
            assert!(stderr.read_line(&mut line).unwrap() > 0, "rover exited before listening");
            if let Some(a) = line.trim().strip_prefix("listening on ws://") {
                break a.parse().unwrap();
            }
        };
        Self {
            child,
            _stderr: stderr,
            addr,
            dir: Some(dir),
        }
    }

    fn wait(mut self) -> (std::process::ExitStatus, tempfile::TempDir) {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return (status, self.dir.take().unwrap());
            }
            if Instant::now() > deadline {
                let _ = self.child.kill();
                panic!("rover did not exit after the client left");
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Discards whatever the runtime sent while we were not reading.
fn catch_up(ws: &mut Client) {
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(30))).unwrap();
    while let Ok(m) = ws.read() {
        if let Message::Text(t) = m {
            let m = WireMessage::decode(t.as_str()).unwrap();
            assert!(matches!(m, WireMessage::StateUpdate { .. }), "unanswered {m:?}");
        }
    }
    ws.get_ref().set_read_timeout(Some(Duration::from_secs(10))).unwrap();
}

/// Sends a request and checks that its reply arrives before the loop has
/// moved on by more than two ticks (at most one 5-tick StateUpdate slips in).
fn request(ws: &mut Client, msg: WireMessage) -> (&'static str, String) {
    catch_up(ws);
    send(ws, &msg);
    let (r, skipped) = reply(ws);
    assert!(skipped <= 1, "{skipped} state updates before the reply to {msg:?}");
    code_of(&r)
}

fn teleop(i: usize) -> [f64; 3] {
    [0.3 + 0.001 * i as f64, 0.0, 0.2]
}

#[test]
fn served_teach_save_repeat_cycle() {
    let served = Served::start(&[]);
    let mut ws = connect(served.addr);

    // a Command outside a recording is dropped
    assert_eq!(
        request(&mut ws, WireMessage::Command { u: [0.5, 0.0, 0.0] }),
        ("error", codes::NOT_RECORDING.into())
    );
    assert_eq!(
        request(&mut ws, WireMessage::TeachControl(TeachAction::Start)),
        ("error", codes::WRONG_MODE.into())
    );
    assert_eq!(
        request(&mut ws, WireMessage::ModeSwitch { mode: Mode::Teach, trajectory: None }),
        ("ack", "mode_switch".into())
    );
    assert_eq!(
        request(&mut ws, WireMessage::TeachControl(TeachAction::Start)),
        ("ack", "teach_control".into())
    );
    let n = 120;
    for i in 0..n {
        assert_eq!(request(&mut ws, WireMessage::Command { u: teleop(i) }), ("ack", "command".into()));
        std::thread::sleep(Duration::from_millis(10));
    }
    // clamping is acknowledged as such
    send(&mut ws, &WireMessage::Command { u: [2.0, 0.0, 0.2] });
    match reply(&mut ws).0 {
        WireMessage::Ack { text, .. } => assert!(text.starts_with("clamped to [1"), "{text}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(request(&mut ws, WireMessage::Command { u: teleop(n) }), ("ack", "command".into()));
    // go silent past the dead-man timeout
    std::thread::sleep(Duration::from_millis(800));

    assert_eq!(
        request(&mut ws, WireMessage::TeachControl(TeachAction::Stop)),
        ("ack", "teach_control".into())
    );
    // still in flight after stop
    assert_eq!(
        request(&mut ws, WireMessage::Command { u: [0.5, 0.0, 0.0] }),
        ("error", codes::NOT_RECORDING.into())
    );
    assert_eq!(
        request(&mut ws, WireMessage::TeachControl(TeachAction::Save { name: "bad name".into() })),
        ("error", codes::INVALID_NAME.into())
    );
    assert_eq!(
        request(&mut ws, WireMessage::TeachControl(TeachAction::Save { name: "loop1".into() })),
        ("ack", "teach_control".into())
    );
    assert_eq!(
        request(
            &mut ws,
            WireMessage::ModeSwitch {
                mode: Mode::Repeat,
                trajectory: Some("nope".into())
            }
        ),
        ("error", codes::UNKNOWN_TRAJECTORY.into())
    );
    assert_eq!(
        request(&mut ws, WireMessage::ModeSwitch { mode: Mode::Repeat, trajectory: None }),
        ("ack", "mode_switch".into())
    );

    // the repeat runs to its end and the runtime says so
    let mut modes = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        assert!(Instant::now() < deadline, "repeat never finished");
        match recv(&mut ws) {
            WireMessage::StateUpdate { mode, .. } => modes.push(mode),
            WireMessage::ModeSwitch { mode: Mode::Idle, trajectory: None } => break,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(modes.contains(&Mode::Repeat));
    assert_eq!(
        request(&mut ws, WireMessage::ModeSwitch { mode: Mode::Idle, trajectory: None }),
        ("ack", "mode_switch".into())
    );
    ws.close(None).unwrap();
    let _ = ws.flush();

    let (status, dir) = served.wait();
    assert!(status.success());
    assert!(dir.path().join("data/trajectories/loop1.traj").is_file());

    // dead-man: the last teleop value is held for exactly half a second of
    // tick time, then the actuators see zero
    let text = std::fs::read_to_string(dir.path().join("data/runs/session-idle.log")).unwrap();
    let log = rover_core::sim::MissionLog::from_text(&text).unwrap();
    let last = teleop(n)[0];
    let first = log.records.iter().position(|r| r.u.ux() == last).unwrap();
    let held = log.records[first..].iter().take_while(|r| r.u.ux() == last).count();
    assert_eq!(held, 50);
    assert_eq!(log.records[first + held].u.ux(), 0.0);
    assert_eq!(log.records[first + held].u.upsi(), 0.0);
}

#[test]
fn served_idle_run_ends_with_its_client() {
    let served = Served::start(&["--name", "quiet"]);
    let mut ws = connect(served.addr);
    // updates flow while idle
    assert!(matches!(recv(&mut ws), WireMessage::StateUpdate { mode: Mode::Idle, .. }));
    ws.close(None).unwrap();
    let _ = ws.flush();
    let (status, dir) = served.wait();
    assert!(status.success());
    assert!(dir.path().join("data/runs/quiet-idle.log").is_file());
}

#[test]
fn served_teach_waits_for_a_client_then_enters_teach() {
    let served = Served::start(&["--mode", "teach", "--name", "t1"]);
    let mut ws = connect(served.addr);
    // the runtime switched itself into teach on our behalf
    let mode = loop {
        if let WireMessage::StateUpdate { mode, .. } = recv(&mut ws) {
            break mode;
        }
    };
    assert_eq!(mode, Mode::Teach);
    assert_eq!(
        request(&mut ws, WireMessage::TeachControl(TeachAction::Start)),
        ("ack", "teach_control".into())
    );
    ws.close(None).unwrap();
    let _ = ws.flush();
    let (status, _dir) = served.wait();
    assert!(status.success());
}
