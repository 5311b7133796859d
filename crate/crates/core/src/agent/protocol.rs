//! Newline-delimited JSON agent protocol.
//!
//! One session per TCP connection (`tcp://host:port`); over `stdio://`
//! sessions follow each other until end of input. The client drives:
//!
//! ```text
//! > {"type":"session_start","utterance_id":"u1","languages":["es"],"k":{"es":1},"mode":"sync"}
//! > {"type":"source_segment","index":1,"frames":[[0.1,0.2]],"final":false}
//! > {"type":"write_request","lang":"es","slot":1}
//! < {"type":"token","lang":"es","slot":1,"token":"hola"}
//! > {"type":"session_end"}
//! ```
//!
//! The server answers every `write_request` with `token` or `eos`, and sends
//! `error` before aborting a session.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Agent, AgentError, AgentFactory, Emission, SessionInfo};
use crate::policy::{Mode, Schedule};
use crate::stream::{FrameVector, Packet, TargetLanguage};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    SessionStart {
        utterance_id: String,
        languages: Vec<TargetLanguage>,
        k: BTreeMap<TargetLanguage, usize>,
        mode: Mode,
    },
    SourceSegment {
        index: usize,
        frames: Vec<Vec<f32>>,
        #[serde(rename = "final")]
        is_final: bool,
    },
    WriteRequest {
        lang: TargetLanguage,
        slot: usize,
    },
    Token {
        lang: TargetLanguage,
        slot: usize,
        token: String,
    },
    Eos {
        lang: TargetLanguage,
        slot: usize,
    },
    SessionEnd,
    Error {
        message: String,
    },
}

impl Message {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn parse(line: &str) -> Result<Self, AgentError> {
        serde_json::from_str(line).map_err(|e| AgentError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio,
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "stdio://" {
            Ok(Endpoint::Stdio)
        } else if let Some(addr) = s.strip_prefix("tcp://").filter(|a| a.contains(':')) {
            Ok(Endpoint::Tcp(addr.to_owned()))
        } else {
            Err(format!("bad endpoint {s:?}; expected tcp://host:port or stdio://"))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
            Endpoint::Stdio => f.write_str("stdio://"),
        }
    }
}

/// Shared log of every line on a connection, prefixed with `> ` for
/// client-to-server and `< ` for server-to-client.
pub type Transcript = Arc<Mutex<Vec<String>>>;

struct Lines<R, W> {
    reader: R,
    writer: W,
    transcript: Option<Transcript>,
    /// Prefix for lines we send; the other one marks lines we receive.
    outgoing: &'static str,
}

fn timeout_aware(e: io::Error) -> AgentError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => AgentError::Timeout,
        _ => AgentError::Io(e),
    }
}

impl<R: BufRead, W: Write> Lines<R, W> {
    fn record(&self, prefix: &str, line: &str) {
        if let Some(t) = &self.transcript {
            t.lock().expect("transcript lock").push(format!("{prefix}{line}"));
        }
    }

    fn send(&mut self, msg: &Message) -> Result<(), AgentError> {
        let line = msg.to_line();
        self.record(self.outgoing, &line);
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    /// `Ok(None)` at end of input.
    fn recv(&mut self) -> Result<Option<Message>, AgentError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line).map_err(timeout_aware)? == 0 {
            return Ok(None);
        }
        let line = line.trim_end_matches(['\n', '\r']);
        let incoming = if self.outgoing == "> " { "< " } else { "> " };
        self.record(incoming, line);
        Message::parse(line).map(Some)
    }
}

fn to_packet(index: usize, frames: Vec<Vec<f32>>) -> Result<Packet, AgentError> {
    let frames = frames
        .into_iter()
        .map(|v| FrameVector::new(v).map_err(|e| AgentError::Malformed(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Packet { index, frames })
}

/// Serve one session. Returns `Ok(false)` if the input ended before a
/// session started.
pub fn serve_session<R: BufRead, W: Write>(
    factory: &dyn AgentFactory,
    reader: R,
    writer: W,
) -> Result<bool, AgentError> {
    let mut lines = Lines {
        reader,
        writer,
        transcript: None,
        outgoing: "< ",
    };
    match run_server_session(factory, &mut lines) {
        Ok(started) => Ok(started),
        Err(e) => {
            // Best effort: the peer may already be gone.
            let _ = lines.send(&Message::Error { message: e.to_string() });
            Err(e)
        }
    }
}

fn run_server_session<R: BufRead, W: Write>(
    factory: &dyn AgentFactory,
    lines: &mut Lines<R, W>,
) -> Result<bool, AgentError> {
    let (info, languages) = match lines.recv()? {
        None => return Ok(false),
        Some(Message::SessionStart {
            utterance_id,
            languages,
            k,
            mode,
        }) => {
            let schedule = Schedule::new(mode, k).map_err(|e| AgentError::Protocol(e.to_string()))?;
            (SessionInfo { utterance_id, schedule }, languages)
        }
        Some(other) => {
            return Err(AgentError::Protocol(format!(
                "expected session_start, got {}",
                other.to_line()
            )))
        }
    };
    if !languages.iter().eq(info.schedule.languages()) {
        return Err(AgentError::Protocol(
            "languages must list the k keys in ascending order".into(),
        ));
    }
    let mut agent = factory.start(&info)?;
    let mut received = 0;
    let mut finished = false;
    let mut last_slot: BTreeMap<TargetLanguage, usize> = languages.into_iter().map(|l| (l, 0)).collect();
    loop {
        let msg = lines
            .recv()?
            .ok_or_else(|| AgentError::Protocol("connection closed before session_end".into()))?;
        match msg {
            Message::SourceSegment {
                index,
                frames,
                is_final,
            } => {
                if finished || index != received + 1 {
                    return Err(AgentError::Protocol(format!(
                        "unexpected source_segment {index} after {received}"
                    )));
                }
                received = index;
                finished = is_final;
                agent.accept_packet(&to_packet(index, frames)?, is_final)?;
            }
            Message::WriteRequest { lang, slot } => {
                let last = last_slot
                    .get_mut(&lang)
                    .ok_or_else(|| AgentError::Protocol(format!("language {lang} not in session")))?;
                if slot <= *last {
                    return Err(AgentError::Protocol(format!(
                        "slot {slot} for {lang} is not increasing"
                    )));
                }
                *last = slot;
                let reply = match agent.write(&lang, slot)? {
                    Emission::Token(token) => Message::Token { lang, slot, token },
                    Emission::Eos => Message::Eos { lang, slot },
                };
                lines.send(&reply)?;
            }
            Message::SessionEnd => {
                agent.end()?;
                return Ok(true);
            }
            other => return Err(AgentError::Protocol(format!("unexpected message {}", other.to_line()))),
        }
    }
}

/// Serve sessions from stdin to stdout until end of input.
pub fn serve_stdio(factory: &dyn AgentFactory) -> Result<(), AgentError> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut reader = stdin.lock();
    let mut writer = stdout.lock();
    while serve_session(factory, &mut reader, &mut writer)? {}
    Ok(())
}

pub struct TcpServer {
    listener: TcpListener,
    factory: Arc<dyn AgentFactory>,
    timeout: Duration,
}

impl TcpServer {
    pub fn bind(addr: &str, factory: Arc<dyn AgentFactory>) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            factory,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept connections forever, one thread and one session each.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let factory = self.factory.clone();
            let timeout = self.timeout;
            thread::spawn(move || {
                let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                if let Err(e) = handle_connection(&*factory, stream, timeout) {
                    log::warn!("session from {peer} aborted: {e}");
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> JoinHandle<io::Result<()>> {
        thread::spawn(move || self.run())
    }
}

fn handle_connection(factory: &dyn AgentFactory, stream: TcpStream, timeout: Duration) -> Result<(), AgentError> {
    stream.set_read_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    serve_session(factory, reader, &stream)?;
    Ok(())
}

/// Connects to an agent server once per session.
#[derive(Clone)]
pub struct RemoteFactory {
    addr: String,
    timeout: Duration,
    transcript: Option<Transcript>,
}

impl RemoteFactory {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: DEFAULT_TIMEOUT,
            transcript: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> Result<TcpStream, AgentError> {
        let mut last = None;
        for addr in self.addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| io::Error::new(ErrorKind::NotFound, "address did not resolve"))
            .into())
    }

    /// Check that the server accepts connections.
    pub fn probe(&self) -> Result<(), AgentError> {
        self.connect().map(drop)
    }
}

impl AgentFactory for RemoteFactory {
    fn start(&self, info: &SessionInfo) -> Result<Box<dyn Agent>, AgentError> {
        let stream = self.connect()?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        let mut lines = Lines {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            transcript: self.transcript.clone(),
            outgoing: "> ",
        };
        lines.send(&Message::SessionStart {
            utterance_id: info.utterance_id.clone(),
            languages: info.schedule.languages().cloned().collect(),
            k: info.schedule.k_map().clone(),
            mode: info.schedule.mode(),
        })?;
        Ok(Box::new(RemoteAgent { lines }))
    }
}

pub struct RemoteAgent {
    lines: Lines<BufReader<TcpStream>, TcpStream>,
}

impl RemoteAgent {
    /// Send, and if the server already hung up, surface its error message.
    fn send(&mut self, msg: &Message) -> Result<(), AgentError> {
        match self.lines.send(msg) {
            Ok(()) => Ok(()),
            Err(e) => match self.lines.recv() {
                Ok(Some(Message::Error { message })) => Err(AgentError::Remote(message)),
                _ => Err(e),
            },
        }
    }
}

impl Agent for RemoteAgent {
    fn accept_packet(&mut self, packet: &Packet, is_final: bool) -> Result<(), AgentError> {
        self.send(&Message::SourceSegment {
            index: packet.index,
            frames: packet.frames.iter().map(|f| f.values().to_vec()).collect(),
            is_final,
        })
    }

    fn write(&mut self, lang: &TargetLanguage, slot: usize) -> Result<Emission, AgentError> {
        self.send(&Message::WriteRequest {
            lang: lang.clone(),
            slot,
        })?;
        let reply = self
            .lines
            .recv()?
            .ok_or_else(|| AgentError::Protocol("server closed the connection".into()))?;
        match reply {
            Message::Token {
                lang: l,
                slot: s,
                token,
            } if l == *lang && s == slot => Ok(Emission::Token(token)),
            Message::Eos { lang: l, slot: s } if l == *lang && s == slot => Ok(Emission::Eos),
            Message::Error { message } => Err(AgentError::Remote(message)),
            other => Err(AgentError::Protocol(format!(
                "unexpected reply to write_request({lang}, {slot}): {}",
                other.to_line()
            ))),
        }
    }

    fn end(&mut self) -> Result<(), AgentError> {
        self.send(&Message::SessionEnd)?;
        self.lines.writer.shutdown(std::net::Shutdown::Write)?;
        match self.lines.recv()? {
            None => Ok(()),
            Some(Message::Error { message }) => Err(AgentError::Remote(message)),
            Some(other) => Err(AgentError::Protocol(format!(
                "unexpected message after session_end: {}",
                other.to_line()
            ))),
        }
    }
}
