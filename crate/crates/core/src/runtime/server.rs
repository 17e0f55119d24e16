//! Decision-layer TCP server. One thread per connection; every alert goes
//! through a single writer thread that owns the sinks.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use indexmap::IndexMap;

use super::protocol::{parse_client_frame, ServerFrame, MAX_LINE_BYTES};
use super::{decide, is_alert, Classification, DecisionEvent, Label, Policy, Result, RuntimeError};
use crate::data::Task;

/// Pending scream detections kept for chain reconstruction.
const MAX_PENDING: usize = 100_000;
const POLL: Duration = Duration::from_millis(200);

#[derive(Clone, Debug, Default)]
pub struct AlertSinks {
    /// Append one JSON event per line.
    pub file: Option<PathBuf>,
    pub stdout: bool,
    /// HTTP POST target; failures are reported on stderr and otherwise ignored.
    pub webhook: Option<String>,
}

type Job = (DecisionEvent, SyncSender<()>);

struct Shared {
    policy: Policy,
    stop: AtomicBool,
    pending: Mutex<IndexMap<(String, u64), Classification>>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    writer: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting, wait for open connections to wind down, flush sinks.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Block until the server stops (it only stops via `shutdown` from
    /// another handle owner, so in practice: forever).
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_and_join();
        }
    }
}

/// Bind and serve in background threads.
pub fn spawn_server(bind_address: &str, sinks: AlertSinks, policy: Policy) -> Result<ServerHandle> {
    let bind_err = |source| RuntimeError::Bind { addr: bind_address.to_string(), source };
    let listener = TcpListener::bind(bind_address).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    let file = match &sinks.file {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };

    let (tx, rx) = mpsc::channel::<Job>();
    let writer = std::thread::Builder::new()
        .name("alert-writer".into())
        .spawn(move || write_alerts(rx, file, sinks))?;

    let shared = Arc::new(Shared { policy, stop: AtomicBool::new(false), pending: Mutex::new(IndexMap::new()) });
    let acceptor = {
        let shared = shared.clone();
        std::thread::Builder::new().name("accept".into()).spawn(move || accept_loop(listener, shared, tx))?
    };
    Ok(ServerHandle { addr, shared, acceptor: Some(acceptor), writer: Some(writer) })
}

/// Bind and serve on the calling thread until the process ends.
pub fn serve_decision(bind_address: &str, sinks: AlertSinks, policy: Policy) -> Result<()> {
    spawn_server(bind_address, sinks, policy)?.wait();
    Ok(())
}

fn write_alerts(rx: Receiver<Job>, mut file: Option<File>, sinks: AlertSinks) {
    let agent = sinks.webhook.as_ref().map(|_| ureq::Agent::new_with_defaults());
    for (event, done) in rx {
        let line = serde_json::to_string(&event).expect("event serializes");
        if let Some(f) = file.as_mut() {
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                eprintln!("alert sink write failed: {e}");
            }
        }
        if sinks.stdout {
            println!("{line}");
        }
        if let (Some(agent), Some(url)) = (&agent, &sinks.webhook) {
            if let Err(e) = agent.post(url).header("content-type", "application/json").send(line.as_str()) {
                eprintln!("webhook {url} failed: {e}");
            }
        }
        let _ = done.send(());
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, tx: Sender<Job>) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let (shared, tx) = (shared.clone(), tx.clone());
        match std::thread::Builder::new().name("conn".into()).spawn(move || {
            if let Err(e) = handle_connection(stream, &shared, &tx) {
                if !matches!(e.kind(), ErrorKind::BrokenPipe | ErrorKind::ConnectionReset) {
                    eprintln!("connection error: {e}");
                }
            }
        }) {
            Ok(h) => conns.push(h),
            Err(e) => eprintln!("cannot spawn connection thread: {e}"),
        }
        conns.retain(|h| !h.is_finished());
    }
    for h in conns {
        let _ = h.join();
    }
}

enum Line {
    Complete(Vec<u8>),
    TooLong,
    Eof,
    Stopped,
}

fn read_line(reader: &mut BufReader<TcpStream>, stop: &AtomicBool) -> std::io::Result<Line> {
    let mut buf = Vec::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(Line::Stopped);
        }
        let budget = (MAX_LINE_BYTES + 1).saturating_sub(buf.len()) as u64;
        match reader.by_ref().take(budget).read_until(b'\n', &mut buf) {
            Ok(0) if buf.len() > MAX_LINE_BYTES => return Ok(Line::TooLong),
            Ok(0) => return Ok(Line::Eof),
            Ok(_) if buf.last() == Some(&b'\n') => {
                buf.pop();
                if buf.last() == Some(&b'\r') {
                    buf.pop();
                }
                return Ok(if buf.len() > MAX_LINE_BYTES { Line::TooLong } else { Line::Complete(buf) });
            }
            Ok(_) if buf.len() > MAX_LINE_BYTES => return Ok(Line::TooLong),
            Ok(_) => continue,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => continue,
            Err(e) => return Err(e),
        }
    }
}

fn handle_connection(stream: TcpStream, shared: &Shared, tx: &Sender<Job>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut out = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    loop {
        let bytes = match read_line(&mut reader, &shared.stop)? {
            Line::Complete(b) => b,
            Line::TooLong => {
                out.write_all(ServerFrame::error(format!("line exceeds {MAX_LINE_BYTES} bytes")).to_line().as_bytes())?;
                return Ok(());
            }
            Line::Eof | Line::Stopped => return Ok(()),
        };
        let parsed = std::str::from_utf8(&bytes)
            .map_err(|_| RuntimeError::Protocol("frame is not UTF-8".into()))
            .and_then(parse_client_frame);
        let (seq, c) = match parsed {
            Ok(ok) => ok,
            Err(e) => {
                out.write_all(ServerFrame::error(e.to_string()).to_line().as_bytes())?;
                return Ok(());
            }
        };
        let reply = match apply_policy(shared, c) {
            Some(event) => {
                let (done_tx, done_rx) = mpsc::sync_channel(1);
                if tx.send((event, done_tx)).is_ok() {
                    let _ = done_rx.recv();
                }
                ServerFrame::alert(seq)
            }
            None => ServerFrame::ack(seq),
        };
        out.write_all(reply.to_line().as_bytes())?;
    }
}

/// Authoritative check: a valence frame only alerts when the same window
/// was previously reported as a scream.
fn apply_policy(shared: &Shared, c: Classification) -> Option<DecisionEvent> {
    let key = (c.stream_id.clone(), c.window_index);
    let mut pending = shared.pending.lock().unwrap_or_else(|p| p.into_inner());
    match c.task {
        Task::Detect => {
            if c.label == Label::Scream {
                pending.insert(key, c);
                if pending.len() > MAX_PENDING {
                    pending.shift_remove_index(0);
                }
            } else {
                pending.shift_remove(&key);
            }
            None
        }
        Task::Type => {
            let detect = pending.shift_remove(&key)?;
            let chain = [detect, c];
            is_alert(&chain, &shared.policy).then(|| decide(&chain, &shared.policy))
        }
    }
}
