//! Edge-side connection to the decision layer. Frames are queued and sent in
//! order; while the server is unreachable the queue holds at most `cap`
//! frames and the oldest are dropped first.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::Serialize;

use super::protocol::{ClientFrame, ServerFrame};
use super::Classification;

pub const DEFAULT_BUFFER_CAP: usize = 1000;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub sent: u64,
    pub acks: u64,
    pub alerts: u64,
    /// Frames the server rejected with an error frame.
    pub rejected: u64,
    /// Frames discarded because the buffer was full.
    pub dropped: u64,
    pub buffered: usize,
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

pub struct DecisionClient {
    addr: String,
    cap: usize,
    conn: Option<Conn>,
    queue: VecDeque<ClientFrame>,
    next_seq: u64,
    stats: ClientStats,
}

impl DecisionClient {
    /// Does not connect yet; connection happens lazily on the first send.
    pub fn new(addr: impl Into<String>, cap: usize) -> Self {
        DecisionClient { addr: addr.into(), cap: cap.max(1), conn: None, queue: VecDeque::new(), next_seq: 0, stats: ClientStats::default() }
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats { buffered: self.queue.len(), ..self.stats }
    }

    pub fn is_connected(&self) -> bool {
        self.conn.is_some()
    }

    /// Queue one classification and try to deliver everything queued.
    /// Returns the server replies received during this call.
    pub fn send(&mut self, c: &Classification) -> Vec<ServerFrame> {
        let frame = ClientFrame::from_classification(self.next_seq, c);
        self.next_seq += 1;
        self.queue.push_back(frame);
        while self.queue.len() > self.cap {
            self.queue.pop_front();
            self.stats.dropped += 1;
        }
        self.flush()
    }

    /// Try to deliver the queue in order.
    pub fn flush(&mut self) -> Vec<ServerFrame> {
        let mut replies = Vec::new();
        if self.conn.is_none() {
            self.conn = self.connect();
        }
        while let (Some(conn), Some(frame)) = (self.conn.as_mut(), self.queue.front()) {
            match exchange(conn, frame) {
                Ok(reply) => {
                    self.queue.pop_front();
                    self.stats.sent += 1;
                    match &reply {
                        ServerFrame::Ack { .. } => self.stats.acks += 1,
                        ServerFrame::Alert { .. } => self.stats.alerts += 1,
                        ServerFrame::Error { .. } => {
                            // the server closes after an error frame
                            self.stats.rejected += 1;
                            self.conn = None;
                        }
                    }
                    replies.push(reply);
                }
                Err(_) => self.conn = None,
            }
        }
        replies
    }

    fn connect(&self) -> Option<Conn> {
        let addrs = self.addr.to_socket_addrs().ok()?;
        for a in addrs {
            if let Ok(s) = TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                let _ = s.set_nodelay(true);
                let _ = s.set_read_timeout(Some(REPLY_TIMEOUT));
                let writer = s.try_clone().ok()?;
                return Some(Conn { reader: BufReader::new(s), writer });
            }
        }
        None
    }
}

fn exchange(conn: &mut Conn, frame: &ClientFrame) -> std::io::Result<ServerFrame> {
    conn.writer.write_all(frame.to_line().as_bytes())?;
    let mut line = String::new();
    if conn.reader.read_line(&mut line)? == 0 {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    serde_json::from_str(line.trim_end()).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
