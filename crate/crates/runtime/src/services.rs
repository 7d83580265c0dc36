//! The simulator and controller as separate networked processes.
//!
//! The simulator streams C37.118-style frames on one port once a client
//! sends Start, and serves the Modbus register bank on another. The
//! controller connects to both, reconnecting with backoff whenever a link
//! drops; while disconnected it keeps ticking on stale data so the hold and
//! failsafe logic applies.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use mgrid_proto::c37::{encode_command_frame, Command, CommandFrame, Frame, FrameReader, Timestamp};
use mgrid_proto::modbus::{decode_request, decode_response, encode_request, encode_response, frame_length, RegisterBank, Request, Response, MBAP_LEN};

use crate::bridge::{handle_line, BridgeMessage, BridgeServer, Telemetry};
use crate::clock::{ClockMode, LoopClock, TickStats};
use crate::error::{Result, RuntimeError};
use crate::node::{CtlConfig, CtlNode, SimConfig, SimNode};
use crate::record::{RecordRow, RecordWriter};

/// Per-client frame backlog; the oldest frames go first when it fills.
pub const STREAM_QUEUE: usize = 64;
const IO_TIMEOUT: Duration = Duration::from_millis(500);
const POLL: Duration = Duration::from_millis(20);

type Shared<T> = Arc<Mutex<T>>;

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    // A panicked peer thread leaves plain data behind; keep serving it.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Default)]
struct Outbox {
    queue: Mutex<(VecDeque<Arc<[u8]>>, bool)>,
    ready: Condvar,
}

impl Outbox {
    fn push(&self, frames: Arc<[u8]>) -> u64 {
        let mut g = lock(&self.queue);
        let mut dropped = 0;
        while g.0.len() >= STREAM_QUEUE {
            g.0.pop_front();
            dropped += 1;
        }
        g.0.push_back(frames);
        self.ready.notify_one();
        dropped
    }

    fn close(&self) {
        lock(&self.queue).1 = true;
        self.ready.notify_all();
    }

    fn pop(&self) -> Option<Arc<[u8]>> {
        let mut g = lock(&self.queue);
        loop {
            if g.1 {
                return None;
            }
            if let Some(f) = g.0.pop_front() {
                return Some(f);
            }
            g = self.ready.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }
}

struct StreamClient {
    outbox: Arc<Outbox>,
    streaming: Arc<AtomicBool>,
    alive: Arc<AtomicBool>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimSummary {
    pub ticks: u64,
    pub clock: TickStats,
    pub frames_dropped: u64,
    pub modbus_requests: u64,
}

/// Simulator process: owns the plant and both listeners.
pub struct SimService {
    node: SimNode,
    bank: Shared<RegisterBank>,
    clients: Shared<Vec<StreamClient>>,
    requests: Arc<std::sync::atomic::AtomicU64>,
    c37_addr: SocketAddr,
    modbus_addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl SimService {
    pub fn bind(cfg: SimConfig, c37: SocketAddr, modbus: SocketAddr) -> Result<Self> {
        let node = SimNode::new(cfg)?;
        let bank = Arc::new(Mutex::new(node.new_bank()));
        let stop = Arc::new(AtomicBool::new(false));
        let clients: Shared<Vec<StreamClient>> = Arc::default();
        let requests = Arc::new(std::sync::atomic::AtomicU64::new(0));

        let c37_listener = TcpListener::bind(c37)?;
        let c37_addr = c37_listener.local_addr()?;
        let modbus_listener = TcpListener::bind(modbus)?;
        let modbus_addr = modbus_listener.local_addr()?;

        accept_loop(c37_listener, stop.clone(), "c37-accept", {
            let clients = clients.clone();
            let stop = stop.clone();
            move |stream| serve_stream_client(stream, &clients, stop.clone())
        })?;
        accept_loop(modbus_listener, stop.clone(), "modbus-accept", {
            let bank = bank.clone();
            let stop = stop.clone();
            let requests = requests.clone();
            move |stream| {
                let bank = bank.clone();
                let stop = stop.clone();
                let requests = requests.clone();
                thread::Builder::new().name("modbus-client".into()).spawn(move || {
                    if let Err(e) = serve_modbus(stream, &bank, &stop, &requests) {
                        log::info!("Modbus client closed: {e}");
                    }
                })?;
                Ok(())
            }
        })?;
        log::info!("simulator: C37 on {c37_addr}, Modbus on {modbus_addr}");
        Ok(Self { node, bank, clients, requests, c37_addr, modbus_addr, stop })
    }

    pub fn c37_addr(&self) -> SocketAddr {
        self.c37_addr
    }

    pub fn modbus_addr(&self) -> SocketAddr {
        self.modbus_addr
    }

    /// Flag that ends [`SimService::run`] early and shuts the listeners.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Runs the plant for the configured duration.
    pub fn run(&mut self, mode: ClockMode, mut record: Option<&mut RecordWriter>, mut on_row: impl FnMut(&RecordRow)) -> Result<SimSummary> {
        let mut clock = LoopClock::new(self.node.config().ts, mode);
        let mut summary = SimSummary::default();
        while !self.node.finished() && !self.stop.load(Ordering::Relaxed) {
            clock.wait_next();
            let frames: Arc<[u8]> = {
                let mut bank = lock(&self.bank);
                self.node.publish(&mut bank)?.into()
            };
            {
                let mut clients = lock(&self.clients);
                clients.retain(|c| c.alive.load(Ordering::Relaxed));
                for c in clients.iter().filter(|c| c.streaming.load(Ordering::Relaxed)) {
                    summary.frames_dropped += c.outbox.push(frames.clone());
                }
            }
            let row = {
                let bank = lock(&self.bank);
                self.node.step(&bank)?
            };
            if let Some(w) = record.as_deref_mut() {
                w.write(&row)?;
            }
            on_row(&row);
            summary.ticks += 1;
        }
        summary.clock = clock.stats();
        summary.modbus_requests = self.requests.load(Ordering::Relaxed);
        Ok(summary)
    }
}

impl Drop for SimService {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for c in lock(&self.clients).drain(..) {
            c.outbox.close();
        }
    }
}

fn accept_loop<F>(listener: TcpListener, stop: Arc<AtomicBool>, name: &str, mut on_client: F) -> std::io::Result<()>
where
    F: FnMut(TcpStream) -> std::io::Result<()> + Send + 'static,
{
    listener.set_nonblocking(true)?;
    let name = name.to_string();
    thread::Builder::new().name(name.clone()).spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("{name}: client {peer}");
                    let setup = stream.set_nonblocking(false).and_then(|_| stream.set_nodelay(true));
                    if let Err(e) = setup.and_then(|_| on_client(stream)) {
                        log::warn!("{name}: {peer}: {e}");
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("{name}: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    })?;
    Ok(())
}

fn serve_stream_client(stream: TcpStream, clients: &Shared<Vec<StreamClient>>, stop: Arc<AtomicBool>) -> std::io::Result<()> {
    let outbox = Arc::new(Outbox::default());
    let streaming = Arc::new(AtomicBool::new(false));
    let alive = Arc::new(AtomicBool::new(true));
    let mut writer = stream.try_clone()?;
    {
        let outbox = outbox.clone();
        let alive = alive.clone();
        thread::Builder::new().name("c37-write".into()).spawn(move || {
            while let Some(frames) = outbox.pop() {
                if writer.write_all(&frames).is_err() {
                    break;
                }
            }
            alive.store(false, Ordering::Relaxed);
        })?;
    }
    {
        let mut stream = stream;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        let outbox = outbox.clone();
        let streaming = streaming.clone();
        let alive = alive.clone();
        thread::Builder::new().name("c37-read".into()).spawn(move || {
            let mut reader = FrameReader::new();
            let mut buf = [0u8; 256];
            while !stop.load(Ordering::Relaxed) && alive.load(Ordering::Relaxed) {
                match stream.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => reader.push(&buf[..n]),
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                    Err(_) => break,
                }
                while let Some(frame) = reader.next_frame() {
                    if let Frame::Command(c) = frame {
                        match c.command {
                            Command::Start => streaming.store(true, Ordering::Relaxed),
                            Command::Stop => streaming.store(false, Ordering::Relaxed),
                            Command::Other(code) => log::warn!("ignoring C37 command {code:#06x}"),
                        }
                    }
                }
            }
            alive.store(false, Ordering::Relaxed);
            outbox.close();
        })?;
    }
    lock(clients).push(StreamClient { outbox, streaming, alive });
    Ok(())
}

/// Reads one complete Modbus ADU. `Ok(None)` on a clean close between
/// messages; a read timeout before any byte arrives is also `Ok(None)`
/// when `idle_ok`.
fn read_adu(stream: &mut TcpStream, idle_ok: bool) -> Result<Option<Vec<u8>>> {
    let mut buf = vec![0u8; MBAP_LEN];
    let mut got = 0;
    while got < MBAP_LEN {
        match stream.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(RuntimeError::Protocol("connection closed mid-message".into())),
            Ok(n) => got += n,
            Err(e) if got == 0 && idle_ok && matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                return Ok(None)
            }
            Err(e) => return Err(e.into()),
        }
    }
    let total = frame_length(&buf).expect("full header")?;
    buf.resize(total, 0);
    stream.read_exact(&mut buf[MBAP_LEN..])?;
    Ok(Some(buf))
}

fn serve_modbus(
    mut stream: TcpStream,
    bank: &Shared<RegisterBank>,
    stop: &AtomicBool,
    requests: &std::sync::atomic::AtomicU64,
) -> Result<()> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    while !stop.load(Ordering::Relaxed) {
        let Some(adu) = read_adu(&mut stream, true)? else {
            if stream.peek(&mut [0u8]).map(|n| n == 0).unwrap_or(false) {
                return Ok(());
            }
            continue;
        };
        // Anything that does not decode is a framing problem; drop the link.
        let req = decode_request(&adu)?;
        requests.fetch_add(1, Ordering::Relaxed);
        let resp = lock(bank).handle(&req);
        stream.write_all(&encode_response(&resp)?)?;
    }
    Ok(())
}

/// Controller-side options for [`CtlService`].
#[derive(Debug, Clone)]
pub struct CtlEndpoints {
    pub c37: SocketAddr,
    pub modbus: SocketAddr,
    /// Operator bridge listen address; `None` disables the bridge.
    pub bridge: Option<SocketAddr>,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl CtlEndpoints {
    pub fn new(c37: SocketAddr, modbus: SocketAddr) -> Self {
        Self { c37, modbus, bridge: None, backoff_initial: Duration::from_millis(100), backoff_max: Duration::from_secs(2) }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CtlSummary {
    pub ticks: u64,
    pub clock: TickStats,
    pub reconnects: u64,
    pub checksum_errors: u64,
    pub modbus_errors: u64,
    pub stale_ticks: u64,
}

struct Backoff {
    next_try: Instant,
    delay: Duration,
    initial: Duration,
    max: Duration,
}

impl Backoff {
    fn new(initial: Duration, max: Duration) -> Self {
        Self { next_try: Instant::now(), delay: initial, initial, max }
    }

    fn due(&self) -> bool {
        Instant::now() >= self.next_try
    }

    fn failed(&mut self) {
        self.next_try = Instant::now() + self.delay;
        self.delay = (self.delay * 2).min(self.max);
    }

    fn reset(&mut self) {
        self.delay = self.initial;
    }
}

struct StreamLink {
    rx: Receiver<Vec<u8>>,
    stream: TcpStream,
}

impl Drop for StreamLink {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

fn open_stream(addr: SocketAddr) -> std::io::Result<StreamLink> {
    let mut stream = TcpStream::connect_timeout(&addr, IO_TIMEOUT)?;
    stream.set_nodelay(true)?;
    let start = CommandFrame { idcode: 1, timestamp: Timestamp::default(), command: Command::Start };
    let bytes = encode_command_frame(&start).map_err(|e| std::io::Error::new(ErrorKind::InvalidData, e))?;
    stream.write_all(&bytes)?;
    let (tx, rx) = mpsc::channel();
    let mut reader = stream.try_clone()?;
    thread::Builder::new().name("c37-client".into()).spawn(move || {
        let mut buf = vec![0u8; 4096];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if tx.send(buf[..n].to_vec()).is_err() {
                        break;
                    }
                }
            }
        }
    })?;
    Ok(StreamLink { rx, stream })
}

fn open_modbus(addr: SocketAddr) -> std::io::Result<TcpStream> {
    let s = TcpStream::connect_timeout(&addr, IO_TIMEOUT)?;
    s.set_nodelay(true)?;
    s.set_read_timeout(Some(IO_TIMEOUT))?;
    s.set_write_timeout(Some(IO_TIMEOUT))?;
    Ok(s)
}

fn transact(stream: &mut TcpStream, req: &Request) -> Result<Response> {
    stream.write_all(&encode_request(req)?)?;
    let adu = read_adu(stream, false)?.ok_or_else(|| RuntimeError::Protocol("Modbus server closed".into()))?;
    let resp = decode_response(&adu)?;
    if resp.txn != req.txn {
        return Err(RuntimeError::Protocol(format!("transaction {} answered as {}", req.txn, resp.txn)));
    }
    Ok(resp)
}

/// Controller process.
pub struct CtlService {
    node: CtlNode,
    ts: f64,
    endpoints: CtlEndpoints,
    bridge: Option<BridgeServer>,
    stream: Option<StreamLink>,
    modbus: Option<TcpStream>,
    stream_backoff: Backoff,
    modbus_backoff: Backoff,
    stop: Arc<AtomicBool>,
}

impl CtlService {
    pub fn new(cfg: CtlConfig, endpoints: CtlEndpoints) -> Result<Self> {
        let ts = cfg.controller.ts;
        let node = CtlNode::new(cfg)?;
        let bridge = endpoints.bridge.map(BridgeServer::bind).transpose()?;
        if let Some(b) = &bridge {
            log::info!("operator bridge on {}", b.local_addr());
        }
        Ok(Self {
            node,
            ts,
            stream_backoff: Backoff::new(endpoints.backoff_initial, endpoints.backoff_max),
            modbus_backoff: Backoff::new(endpoints.backoff_initial, endpoints.backoff_max),
            endpoints,
            bridge,
            stream: None,
            modbus: None,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn bridge_addr(&self) -> Option<SocketAddr> {
        self.bridge.as_ref().map(|b| b.local_addr())
    }

    pub fn node(&self) -> &CtlNode {
        &self.node
    }

    pub fn node_mut(&mut self) -> &mut CtlNode {
        &mut self.node
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    fn ensure_links(&mut self, summary: &mut CtlSummary) {
        if self.stream.is_none() && self.stream_backoff.due() {
            match open_stream(self.endpoints.c37) {
                Ok(link) => {
                    log::info!("synchrophasor stream connected to {}", self.endpoints.c37);
                    self.stream = Some(link);
                    self.node.reset_stream();
                    self.stream_backoff.reset();
                    summary.reconnects += 1;
                }
                Err(e) => {
                    log::debug!("C37 connect: {e}");
                    self.stream_backoff.failed();
                }
            }
        }
        if self.modbus.is_none() && self.modbus_backoff.due() {
            match open_modbus(self.endpoints.modbus) {
                Ok(s) => {
                    log::info!("Modbus connected to {}", self.endpoints.modbus);
                    self.modbus = Some(s);
                    self.modbus_backoff.reset();
                    summary.reconnects += 1;
                }
                Err(e) => {
                    log::debug!("Modbus connect: {e}");
                    self.modbus_backoff.failed();
                }
            }
        }
    }

    fn drain_stream(&mut self) {
        let Some(link) = &self.stream else { return };
        loop {
            match link.rx.try_recv() {
                Ok(bytes) => self.node.ingest_stream(&bytes),
                Err(mpsc::TryRecvError::Empty) => return,
                Err(mpsc::TryRecvError::Disconnected) => {
                    log::warn!("synchrophasor stream lost");
                    self.stream = None;
                    self.stream_backoff.failed();
                    return;
                }
            }
        }
    }

    fn modbus_exchange(&mut self, req: &Request, summary: &mut CtlSummary) {
        let Some(s) = self.modbus.as_mut() else { return };
        let result = transact(s, req).and_then(|resp| self.node.ingest_response(&resp));
        if let Err(e) = result {
            summary.modbus_errors += 1;
            if !matches!(e, RuntimeError::Protocol(ref m) if m.starts_with("Modbus exception")) {
                log::warn!("Modbus link dropped: {e}");
                self.modbus = None;
                self.modbus_backoff.failed();
            }
        }
    }

    /// Runs `n_ticks` controller ticks, or until the stop flag is set when
    /// `n_ticks` is `None`.
    pub fn run(&mut self, mode: ClockMode, n_ticks: Option<u64>, mut on_tick: impl FnMut(&Telemetry)) -> Result<CtlSummary> {
        let mut clock = LoopClock::new(self.ts, mode);
        let mut summary = CtlSummary::default();
        while n_ticks.is_none_or(|n| summary.ticks < n) && !self.stop.load(Ordering::Relaxed) {
            let k = clock.wait_next();
            self.ensure_links(&mut summary);
            let poll = self.node.poll_request();
            self.modbus_exchange(&poll, &mut summary);
            self.drain_stream();

            if let Some(b) = &self.bridge {
                for cmd in b.poll_commands() {
                    let reply = handle_line(&cmd.line, self.node.controller_mut(), k);
                    cmd.reply(&reply);
                }
            }

            let (report, write) = self.node.tick();
            if report.staleness > 0 {
                summary.stale_ticks += 1;
            }
            if let Some(req) = write {
                self.modbus_exchange(&req, &mut summary);
            }
            let telemetry = Telemetry::from_report(&report, k as f64 * self.ts, self.node.last_seen());
            if let Some(b) = &self.bridge {
                b.broadcast(&BridgeMessage::Telemetry(telemetry.clone()));
            }
            on_tick(&telemetry);
            summary.ticks += 1;
        }
        summary.clock = clock.stats();
        summary.checksum_errors = self.node.checksum_errors();
        Ok(summary)
    }
}
