//! TCP transport. Each node owns a listener, one reader thread per inbound
//! connection and one writer thread per peer; all of them funnel into a
//! single delivery thread that owns the [`NodeHost`].

use std::collections::HashMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};
use mmpaxos_core::dedup::SeqGen;
use mmpaxos_core::{wire, Envelope, Event, Message, NodeId, NodeSpec, Time};

use super::host::NodeHost;
use super::journal::{next_incarnation, Journal, SyncPolicy};
use super::view::ClusterView;

const CONNECT_TIMEOUT: Duration = Duration::from_millis(200);
const RECONNECT_BACKOFF: Duration = Duration::from_millis(100);
/// Minimum spacing of view reloads triggered by sends to unknown peers.
const REFRESH_INTERVAL: Duration = Duration::from_millis(100);

/// An event stamped with microseconds since the shared epoch.
pub type TimedEvent = (Time, NodeId, Event);

#[derive(Clone)]
pub struct ServeOptions {
    /// Journal and incarnation files go here; `None` keeps no durable state.
    pub data_dir: Option<PathBuf>,
    pub sync: SyncPolicy,
    pub tick: Duration,
    pub epoch: Instant,
    /// Reloaded when a `Nack` or `Redirect` arrives, and when sending to a
    /// node the in-memory view does not list.
    pub view_path: Option<PathBuf>,
    pub events: Option<Sender<TimedEvent>>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            data_dir: None,
            sync: SyncPolicy::EveryWrite,
            tick: Duration::from_millis(1),
            epoch: Instant::now(),
            view_path: None,
            events: None,
        }
    }
}

enum Inbound {
    Frame(Vec<u8>),
    Local(Envelope),
    Stop,
}

type Addresses = Arc<RwLock<HashMap<NodeId, SocketAddr>>>;

pub struct NodeHandle {
    id: NodeId,
    addr: SocketAddr,
    inbox: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
    operator: Mutex<SeqGen>,
}

impl NodeHandle {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Delivers `msg` as if sent by `from`, bypassing the network.
    pub fn inject(&self, from: NodeId, msg: Message) {
        let seq = self.operator.lock().expect("operator lock").next();
        let _ = self.inbox.send(Inbound::Local(Envelope { from, seq, msg }));
    }

    /// Stops the node abruptly: connections are cut and pending messages
    /// are lost. Journaled state stays on disk.
    pub fn kill(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.inbox.send(Inbound::Stop);
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        for s in self.streams.lock().expect("streams lock").drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Starts a node on an already bound listener.
pub fn serve(spec: NodeSpec, listener: TcpListener, view: ClusterView, opts: ServeOptions) -> Result<NodeHandle> {
    let id = spec.id();
    let addr = listener.local_addr()?;
    let (journal, recovered, incarnation) = match &opts.data_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let incarnation = next_incarnation(&dir.join(format!("node-{}.incarnation", id.0)))?;
            let (j, recs) = Journal::open(&dir.join(format!("node-{}.journal", id.0)), opts.sync)?;
            (Some(j), recs, incarnation)
        }
        None => (None, Vec::new(), 0),
    };
    let host = NodeHost::new(&spec, incarnation, journal, &recovered);
    let (tx, rx) = unbounded();
    let stop = Arc::new(AtomicBool::new(false));
    let streams = Arc::new(Mutex::new(Vec::new()));
    let addresses: Addresses = Arc::new(RwLock::new(view.addresses().into_iter().collect()));

    let mut threads = Vec::new();
    {
        let (tx, stop, streams) = (tx.clone(), stop.clone(), streams.clone());
        threads.push(
            thread::Builder::new()
                .name(format!("accept-{}", id.0))
                .spawn(move || accept_loop(listener, tx, stop, streams))?,
        );
    }
    {
        let tx = tx.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("node-{}", id.0))
                .spawn(move || delivery_loop(host, rx, tx, view, addresses, opts))?,
        );
    }
    Ok(NodeHandle {
        id,
        addr,
        inbox: tx,
        stop,
        streams,
        threads,
        operator: Mutex::new(SeqGen::new(0)),
    })
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, stop: Arc<AtomicBool>, streams: Arc<Mutex<Vec<TcpStream>>>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            streams.lock().expect("streams lock").push(clone);
        }
        let tx = tx.clone();
        thread::spawn(move || {
            if let Err(e) = read_frames(stream, &tx) {
                debug!("connection closed: {e}");
            }
        });
    }
}

fn read_frames(stream: TcpStream, tx: &Sender<Inbound>) -> io::Result<()> {
    let mut r = BufReader::new(stream);
    let mut header = [0u8; wire::HEADER_LEN];
    loop {
        r.read_exact(&mut header)?;
        let total = wire::frame_len(&header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let mut frame = Vec::with_capacity(total);
        frame.extend_from_slice(&header);
        frame.resize(total, 0);
        r.read_exact(&mut frame[wire::HEADER_LEN..])?;
        if tx.send(Inbound::Frame(frame)).is_err() {
            return Ok(());
        }
    }
}

struct Peers {
    writers: HashMap<NodeId, Sender<Vec<u8>>>,
    addresses: Addresses,
    threads: Vec<JoinHandle<()>>,
}

impl Peers {
    fn send(&mut self, to: NodeId, frame: Vec<u8>) {
        let addresses = self.addresses.clone();
        let threads = &mut self.threads;
        let w = self.writers.entry(to).or_insert_with(|| {
            let (tx, rx) = unbounded();
            threads.push(thread::spawn(move || write_loop(to, rx, addresses)));
            tx
        });
        let _ = w.send(frame);
    }

    fn close(mut self) {
        self.writers.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Sends frames to one peer, reconnecting lazily. Frames that cannot be
/// written are dropped; the protocol retransmits what matters.
fn write_loop(to: NodeId, rx: Receiver<Vec<u8>>, addresses: Addresses) {
    let mut conn: Option<(SocketAddr, TcpStream)> = None;
    let mut retry_at = Instant::now();
    for frame in rx {
        let Some(addr) = addresses.read().expect("addresses lock").get(&to).copied() else { continue };
        if conn.as_ref().is_some_and(|(a, _)| *a != addr) {
            conn = None;
        }
        if conn.is_none() {
            if Instant::now() < retry_at {
                continue;
            }
            match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    conn = Some((addr, s));
                }
                Err(e) => {
                    debug!("connect to {to} at {addr}: {e}");
                    retry_at = Instant::now() + RECONNECT_BACKOFF;
                    continue;
                }
            }
        }
        let (_, s) = conn.as_mut().expect("connected");
        if let Err(e) = s.write_all(&frame) {
            debug!("write to {to}: {e}");
            conn = None;
            retry_at = Instant::now() + RECONNECT_BACKOFF;
        }
    }
}

fn delivery_loop(
    mut host: NodeHost,
    rx: Receiver<Inbound>,
    self_tx: Sender<Inbound>,
    mut view: ClusterView,
    addresses: Addresses,
    opts: ServeOptions,
) {
    let now = || opts.epoch.elapsed().as_micros() as Time;
    let mut peers = Peers {
        writers: HashMap::new(),
        addresses,
        threads: Vec::new(),
    };
    let mut next_tick = Instant::now();
    let mut last_refresh = Instant::now();
    loop {
        let result = if Instant::now() >= next_tick {
            // ticks are never starved by a busy inbox
            next_tick = (next_tick + opts.tick).max(Instant::now());
            host.tick(now())
        } else {
            match rx.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
                Ok(Inbound::Frame(f)) => host.deliver_frame(now(), &f),
                Ok(Inbound::Local(env)) => host.deliver(now(), env),
                Ok(Inbound::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => continue,
            }
        };
        let out = match result {
            Ok(out) => out,
            Err(e) => {
                warn!("node {}: {e:#}", host.id());
                if e.chain().any(|c| c.is::<io::Error>()) {
                    // a node that cannot journal must not keep talking
                    break;
                }
                continue;
            }
        };
        let unknown_peer = {
            let known = peers.addresses.read().expect("addresses lock");
            out.frames.iter().any(|(to, _)| *to != host.id() && !known.contains_key(to))
        };
        if out.refresh_view || (unknown_peer && last_refresh.elapsed() >= REFRESH_INTERVAL) {
            last_refresh = Instant::now();
            refresh(&mut view, &opts, &peers.addresses);
        }
        if let Some(events) = &opts.events {
            let t = now();
            for e in out.events {
                let _ = events.send((t, host.id(), e));
            }
        }
        for (to, frame) in out.frames {
            if to == host.id() {
                let _ = self_tx.send(Inbound::Frame(frame));
            } else {
                peers.send(to, frame);
            }
        }
    }
    let _ = host.sync();
    peers.close();
}

fn refresh(view: &mut ClusterView, opts: &ServeOptions, addresses: &Addresses) {
    let Some(path) = &opts.view_path else { return };
    match ClusterView::load(path) {
        Ok(newer) if newer.version > view.version => {
            debug!("cluster view {} -> {}", view.version, newer.version);
            *addresses.write().expect("addresses lock") = newer.addresses().into_iter().collect();
            *view = newer;
        }
        Ok(_) => {}
        Err(e) => warn!("reloading cluster view: {e}"),
    }
}

/// Sends one envelope to `addr` over a fresh connection.
pub fn send_once(addr: SocketAddr, env: &Envelope) -> Result<()> {
    let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(2)).with_context(|| format!("connecting to {addr}"))?;
    s.write_all(&wire::encode(env))?;
    s.flush()?;
    Ok(())
}
