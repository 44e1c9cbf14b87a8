//! Live bridge between one operator console and a session. `BridgeCore` is the control side
//! and knows nothing about sockets; `serve` runs it on its own thread at the tick rate and
//! moves text frames to and from the socket thread over channels.

use cathtwin_core::copilot::{OperatorCommand, Session};
use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};
use tungstenite::{Message, WebSocket};

use crate::protocol::{parse_client, ClientMessage, ErrorCode, ServerMessage, StateMessage};

#[derive(Debug, Clone, Copy)]
enum Pending {
    Apply(OperatorCommand, Option<u64>),
    Release,
}

#[derive(Debug, Clone, Copy)]
struct Held {
    cmd: OperatorCommand,
    seq: Option<u64>,
    ticks_left: u32,
}

pub struct BridgeCore {
    session: Session,
    hold_ticks: u32,
    pending: Option<Pending>,
    held: Option<Held>,
    events_sent: usize,
}

impl BridgeCore {
    pub fn new(session: Session, hold_ticks: u32) -> Self {
        let events_sent = session.events().len();
        Self {
            session,
            hold_ticks: hold_ticks.max(1),
            pending: None,
            held: None,
            events_sent,
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn into_session(self) -> Session {
        self.session
    }

    /// Current state without advancing time.
    pub fn snapshot(&self) -> ServerMessage {
        ServerMessage::State(StateMessage::from_state(&self.session.state(), None))
    }

    fn new_events(&mut self) -> Vec<ServerMessage> {
        let out = self.session.events()[self.events_sent..].iter().map(ServerMessage::event).collect();
        self.events_sent = self.session.events().len();
        out
    }

    /// Handle one client frame. Commands are queued for the next tick; mode and phase
    /// changes apply at once. Anything malformed or disallowed gets an error reply and
    /// leaves the session as it was.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        let msg = match parse_client(text) {
            Ok(m) => m,
            Err(e) => return vec![e],
        };
        let mut out = Vec::new();
        match msg {
            ClientMessage::Cmd {
                axis,
                velocity_fraction,
                seq,
                ..
            } => {
                if !(velocity_fraction.is_finite() && velocity_fraction.abs() <= 1.0) {
                    return vec![ServerMessage::error(ErrorCode::Rejected, "velocity_fraction must lie in [-1, 1]", seq)];
                }
                let phase = self.session.phase();
                if !phase.allows(axis) {
                    return vec![ServerMessage::error(
                        ErrorCode::Rejected,
                        format!("axis {axis:?} is disabled in phase {phase:?}"),
                        seq,
                    )];
                }
                if self.pending.is_some() {
                    log::debug!("dropping stale command superseded by seq {seq:?}");
                }
                self.pending = Some(if velocity_fraction == 0.0 {
                    Pending::Release
                } else {
                    let cmd = OperatorCommand {
                        axis,
                        velocity_fraction,
                        timestamp: self.session.total_time(),
                    };
                    Pending::Apply(cmd, seq)
                });
            }
            ClientMessage::Mode { mode, .. } => {
                if let Err(e) = self.session.set_mode(mode) {
                    out.push(ServerMessage::error(ErrorCode::Rejected, e.to_string(), None));
                }
            }
            ClientMessage::Phase { phase, .. } => match self.session.set_phase(phase) {
                Ok(()) => {
                    if self.held.is_some_and(|h| !phase.allows(h.cmd.axis)) {
                        self.held = None;
                    }
                    if let Some(Pending::Apply(c, _)) = self.pending {
                        if !phase.allows(c.axis) {
                            self.pending = None;
                        }
                    }
                }
                Err(e) => out.push(ServerMessage::error(ErrorCode::Rejected, e.to_string(), None)),
            },
        }
        out.extend(self.new_events());
        out
    }

    /// Advance one tick with the held command, if any. Returns new events then the state.
    pub fn tick(&mut self) -> Vec<ServerMessage> {
        match self.pending.take() {
            Some(Pending::Apply(cmd, seq)) => {
                self.held = Some(Held {
                    cmd,
                    seq,
                    ticks_left: self.hold_ticks,
                })
            }
            Some(Pending::Release) => self.held = None,
            None => {}
        }
        let mut out = Vec::new();
        let dt = self.session.config().dt();
        let cmd = self.held.map(|h| OperatorCommand {
            timestamp: self.session.total_time(),
            ..h.cmd
        });
        let ack = self.held.and_then(|h| h.seq);
        let state = match self.session.tick(dt, cmd) {
            Ok(s) => s,
            Err(e) => {
                out.push(ServerMessage::error(ErrorCode::Rejected, e.to_string(), ack));
                self.held = None;
                self.session.tick(dt, None).expect("a tick without a command always succeeds")
            }
        };
        if let Some(h) = &mut self.held {
            h.ticks_left -= 1;
            if h.ticks_left == 0 {
                log::debug!("command seq {:?} expired without a refresh", h.seq);
                self.held = None;
            }
        }
        out.extend(self.new_events());
        out.push(ServerMessage::State(StateMessage::from_state(&state, ack)));
        out
    }

    /// The console went away: stop moving until a new console commands otherwise.
    pub fn disconnect(&mut self) {
        if self.held.is_some() || self.pending.is_some() {
            log::warn!("operator disconnected with a command held; holding position");
        } else {
            log::info!("operator disconnected");
        }
        self.held = None;
        self.pending = None;
    }
}

enum Inbound {
    Connected,
    Text(String, Instant),
    Disconnected,
}

/// Serve `core` on `listener` until `stop` is set, then return it. One console at a time;
/// later connections wait until the current one closes.
pub fn serve(listener: TcpListener, core: BridgeCore, stop: Arc<AtomicBool>) -> std::io::Result<BridgeCore> {
    listener.set_nonblocking(true)?;
    let (in_tx, in_rx) = mpsc::channel();
    let (out_tx, out_rx) = mpsc::channel();
    let control_stop = stop.clone();
    let control = std::thread::spawn(move || control_loop(core, in_rx, out_tx, control_stop));
    let io = socket_loop(&listener, &in_tx, &out_rx, &stop);
    stop.store(true, Ordering::SeqCst);
    let core = control.join().expect("control thread panicked");
    io.map(|_| core)
}

fn control_loop(mut core: BridgeCore, inbound: Receiver<Inbound>, outbound: Sender<String>, stop: Arc<AtomicBool>) -> BridgeCore {
    let period = Duration::from_secs_f64(core.session().config().dt());
    let mut next = Instant::now();
    let mut waiting: HashMap<u64, Instant> = HashMap::new();
    let send = |m: &ServerMessage| {
        // nobody listening just means no console is connected
        let _ = outbound.send(m.to_text());
    };
    while !stop.load(Ordering::SeqCst) {
        loop {
            match inbound.try_recv() {
                Ok(Inbound::Connected) => send(&core.snapshot()),
                Ok(Inbound::Text(text, received)) => {
                    let replies = core.handle_text(&text);
                    let rejected = replies.iter().any(|r| matches!(r, ServerMessage::Error { .. }));
                    if !rejected {
                        if let Ok(ClientMessage::Cmd { seq: Some(seq), .. }) = parse_client(&text) {
                            waiting.insert(seq, received);
                        }
                    }
                    replies.iter().for_each(send);
                }
                Ok(Inbound::Disconnected) => {
                    core.disconnect();
                    waiting.clear();
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return core,
            }
        }
        for m in core.tick() {
            if let ServerMessage::State(s) = &m {
                if let Some(received) = s.ack.and_then(|seq| waiting.remove(&seq)) {
                    log::info!("command seq {} applied {:.3} ms after receipt", s.ack.unwrap_or_default(), received.elapsed().as_secs_f64() * 1e3);
                }
            }
            send(&m);
        }
        next += period;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else {
            log::debug!("tick overran by {:?}", now - next);
            next = now;
        }
    }
    core
}

fn socket_loop(listener: &TcpListener, inbound: &Sender<Inbound>, outbound: &Receiver<String>, stop: &AtomicBool) -> std::io::Result<()> {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, addr)) => {
                log::info!("operator connected from {addr}");
                match handshake(stream) {
                    Ok(ws) => {
                        // state produced while nobody was connected is stale
                        while outbound.try_recv().is_ok() {}
                        let _ = inbound.send(Inbound::Connected);
                        pump(ws, inbound, outbound, stop);
                        let _ = inbound.send(Inbound::Disconnected);
                    }
                    Err(e) => log::warn!("websocket handshake with {addr} failed: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                while outbound.try_recv().is_ok() {}
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>, String> {
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).map_err(|e| e.to_string())?;
    let ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(1))).map_err(|e| e.to_string())?;
    ws.get_ref().set_nodelay(true).map_err(|e| e.to_string())?;
    Ok(ws)
}

fn pump(mut ws: WebSocket<TcpStream>, inbound: &Sender<Inbound>, outbound: &Receiver<String>, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(t)) => {
                let _ = inbound.send(Inbound::Text(t.to_string(), Instant::now()));
            }
            Ok(Message::Binary(_)) => {
                let e = ServerMessage::error(ErrorCode::Malformed, "binary frames are not part of the protocol", None);
                if ws.send(Message::text(e.to_text())).is_err() {
                    return;
                }
            }
            Ok(Message::Close(_)) => {
                log::info!("operator closed the connection");
                let _ = ws.flush();
                return;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::warn!("connection dropped: {e}");
                return;
            }
        }
        loop {
            match outbound.try_recv() {
                Ok(text) => {
                    if let Err(e) = ws.send(Message::text(text)) {
                        log::warn!("connection dropped while sending: {e}");
                        return;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}
