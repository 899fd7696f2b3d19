//! Network endpoint: a WebSocket server on its own thread.
//!
//! The tick loop and the endpoint share nothing but two bounded queues.
//! Inbound events wait for the loop to poll them; the outbound queue drops
//! its oldest entry when full, so a slow or absent client can never stall
//! ticking. One client at a time; a second one is told `busy` and closed.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use anyhow::{Context, Result};
use crossbeam::queue::ArrayQueue;
use tungstenite::protocol::WebSocketConfig;
use tungstenite::{Message, WebSocket};

use crate::protocol::{codes, WireMessage};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(2);
const IDLE_SLEEP: Duration = Duration::from_millis(1);
/// Bytes tungstenite may hold for a client that is not reading. Beyond this
/// a write is dropped; the outbound queue is the real backlog.
const MAX_SOCKET_BACKLOG: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Connected(SocketAddr),
    Disconnected,
    Message(WireMessage),
}

pub struct Endpoint {
    inbound: Arc<ArrayQueue<NetEvent>>,
    outbound: Arc<ArrayQueue<WireMessage>>,
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl Endpoint {
    /// Binds `addr` and starts serving. Port 0 picks a free port.
    pub fn bind(addr: SocketAddr, capacity: usize) -> Result<Self> {
        let listener = TcpListener::bind(addr).with_context(|| match addr.port() {
            0 => format!("cannot listen on {addr}"),
            p => format!("cannot listen on {addr}: port {p} in use?"),
        })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let inbound = Arc::new(ArrayQueue::new(capacity));
        let outbound = Arc::new(ArrayQueue::new(capacity));
        let stop = Arc::new(AtomicBool::new(false));
        let worker = {
            let (inbound, outbound, stop) = (inbound.clone(), outbound.clone(), stop.clone());
            std::thread::Builder::new()
                .name("rover-net".into())
                .spawn(move || serve(listener, &inbound, &outbound, &stop))?
        };
        Ok(Self {
            inbound,
            outbound,
            stop,
            addr,
            worker: Some(worker),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn poll(&self) -> Option<NetEvent> {
        self.inbound.pop()
    }

    /// Queues `msg` for the client, displacing the oldest queued message
    /// when the queue is full. Returns whether something was displaced.
    pub fn send(&self, msg: WireMessage) -> bool {
        self.outbound.force_push(msg).is_some()
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock)
}

fn handshake(stream: TcpStream) -> Option<WebSocket<TcpStream>> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).ok()?;
    let config = WebSocketConfig::default()
        .write_buffer_size(0)
        .max_write_buffer_size(MAX_SOCKET_BACKLOG);
    let ws = tungstenite::accept_with_config(stream, Some(config)).ok()?;
    ws.get_ref().set_read_timeout(None).ok()?;
    ws.get_ref().set_nonblocking(true).ok()?;
    let _ = ws.get_ref().set_nodelay(true);
    Some(ws)
}

fn send_now(ws: &mut WebSocket<TcpStream>, msg: &WireMessage) -> bool {
    match ws.write(Message::text(msg.encode())) {
        Ok(()) => true,
        Err(e) if would_block(&e) => true,
        Err(tungstenite::Error::WriteBufferFull(_)) => true,
        Err(_) => false,
    }
}

/// Pushes buffered bytes to the socket; `Some(true)` once nothing is left.
fn drain(ws: &mut WebSocket<TcpStream>) -> Option<bool> {
    match ws.flush() {
        Ok(()) => Some(true),
        Err(e) if would_block(&e) => Some(false),
        Err(_) => None,
    }
}

fn serve(
    listener: TcpListener,
    inbound: &ArrayQueue<NetEvent>,
    outbound: &ArrayQueue<WireMessage>,
    stop: &AtomicBool,
) {
    let mut client: Option<WebSocket<TcpStream>> = None;
    while !stop.load(Ordering::Relaxed) {
        let mut busy = false;
        match listener.accept() {
            Ok((stream, peer)) => {
                busy = true;
                if let Some(mut ws) = handshake(stream) {
                    if client.is_some() {
                        send_now(&mut ws, &WireMessage::error(codes::BUSY, "another client is attached"));
                        let _ = ws.flush();
                        let _ = ws.close(None);
                        let _ = ws.flush();
                    } else {
                        // stale state from before this client is of no use to it
                        while outbound.pop().is_some() {}
                        let _ = inbound.force_push(NetEvent::Connected(peer));
                        client = Some(ws);
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {}
            Err(_) => {}
        }

        let Some(ws) = client.as_mut() else {
            // nobody to deliver to
            while outbound.pop().is_some() {}
            std::thread::sleep(IDLE_SLEEP);
            continue;
        };
        let mut alive = true;
        loop {
            match ws.read() {
                Ok(Message::Text(text)) => {
                    busy = true;
                    match WireMessage::decode(text.as_str()) {
                        Ok(msg) => {
                            if inbound.push(NetEvent::Message(msg)).is_err() {
                                alive &= send_now(ws, &WireMessage::error(codes::OVERLOADED, "inbound queue full; message dropped"));
                            }
                        }
                        Err(e) => {
                            alive &= send_now(ws, &WireMessage::error(codes::MALFORMED, e));
                        }
                    }
                }
                Ok(Message::Binary(_)) => {
                    alive &= send_now(ws, &WireMessage::error(codes::MALFORMED, "binary frames are not part of the protocol"));
                }
                Ok(Message::Close(_)) => {
                    alive = false;
                    break;
                }
                Ok(_) => {}
                Err(e) if would_block(&e) => break,
                Err(_) => {
                    alive = false;
                    break;
                }
            }
        }
        // Only take from the queue once the socket has swallowed what it was
        // given, so a slow reader ages out stale messages instead of piling
        // them up here.
        if alive {
            match drain(ws) {
                Some(true) => {
                    while alive {
                        let Some(msg) = outbound.pop() else { break };
                        busy = true;
                        alive = send_now(ws, &msg);
                    }
                    alive = alive && drain(ws).is_some();
                }
                Some(false) => {}
                None => alive = false,
            }
        }
        if !alive {
            client = None;
            let _ = inbound.force_push(NetEvent::Disconnected);
        }
        if !busy {
            std::thread::sleep(IDLE_SLEEP);
        }
    }
    if let Some(mut ws) = client {
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}
