//! Order-preserving delivery of term groups (push) and id groups (pull)
//! between places.
//!
//! Two backends share one frame format: an in-process backend (places are
//! worker threads in one process, no serialization) and a TCP backend
//! (length-prefixed frames, one long-lived connection per ordered place
//! pair). Every loop iteration exchanges exactly P x P term messages and
//! P x P id messages, empty groups included, so a receiver always knows
//! when a phase's traffic is complete.
//!
//! Frame format (normative, little-endian):
//! `[u8 kind (1=terms,2=ids)] [u32 origin] [u32 dest] [u64 loopOrdinal]
//! [u64 count]` then for terms `count x ([u32 byteLen][UTF-8 bytes])`,
//! for ids `count x u64`. On TCP each frame is preceded by a u32 length
//! of the frame body.

use crate::error::{Error, Result};
use crate::term::{Term, TermId};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

pub const KIND_TERMS: u8 = 1;
pub const KIND_IDS: u8 = 2;
const HEADER_LEN: usize = 1 + 4 + 4 + 8 + 8;
const MAX_FRAME: u32 = 1 << 30;

/// Push payload: one origin place's unique terms destined to one dictionary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TermGroupMsg {
    pub origin: usize,
    pub dest: usize,
    pub loop_ordinal: u64,
    pub terms: Vec<Term>,
}

impl TermGroupMsg {
    /// Payload bytes as they appear in the wire frame; also the
    /// received-bytes metric contribution of this message.
    pub fn payload_bytes(&self) -> u64 {
        self.terms.iter().map(|t| 4 + t.len() as u64).sum()
    }
}

/// Pull payload: ids positionally aligned with the matching term group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdGroupMsg {
    pub origin: usize,
    pub dest: usize,
    pub loop_ordinal: u64,
    pub ids: Vec<TermId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Terms(TermGroupMsg),
    Ids(IdGroupMsg),
}

pub fn encode_terms_frame(msg: &TermGroupMsg) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + msg.payload_bytes() as usize);
    buf.push(KIND_TERMS);
    buf.extend_from_slice(&(msg.origin as u32).to_le_bytes());
    buf.extend_from_slice(&(msg.dest as u32).to_le_bytes());
    buf.extend_from_slice(&msg.loop_ordinal.to_le_bytes());
    buf.extend_from_slice(&(msg.terms.len() as u64).to_le_bytes());
    for t in &msg.terms {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.as_bytes());
    }
    buf
}

pub fn encode_ids_frame(msg: &IdGroupMsg) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * msg.ids.len());
    buf.push(KIND_IDS);
    buf.extend_from_slice(&(msg.origin as u32).to_le_bytes());
    buf.extend_from_slice(&(msg.dest as u32).to_le_bytes());
    buf.extend_from_slice(&msg.loop_ordinal.to_le_bytes());
    buf.extend_from_slice(&(msg.ids.len() as u64).to_le_bytes());
    for id in &msg.ids {
        buf.extend_from_slice(&id.value().to_le_bytes());
    }
    buf
}

pub fn decode_frame(buf: &[u8]) -> Result<Frame> {
    let corrupt = |msg: &str| Error::Transport(format!("bad frame: {msg}"));
    if buf.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    let kind = buf[0];
    let origin = u32::from_le_bytes(buf[1..5].try_into().unwrap()) as usize;
    let dest = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let loop_ordinal = u64::from_le_bytes(buf[9..17].try_into().unwrap());
    let count = u64::from_le_bytes(buf[17..25].try_into().unwrap()) as usize;
    let mut pos = HEADER_LEN;
    match kind {
        KIND_TERMS => {
            let mut terms = Vec::with_capacity(count);
            for _ in 0..count {
                if pos + 4 > buf.len() {
                    return Err(corrupt("truncated term length"));
                }
                let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
                if pos + len > buf.len() {
                    return Err(corrupt("truncated term bytes"));
                }
                let s = std::str::from_utf8(&buf[pos..pos + len])
                    .map_err(|_| corrupt("term is not UTF-8"))?;
                terms.push(Term::new(s).map_err(|e| corrupt(&e.to_string()))?);
                pos += len;
            }
            if pos != buf.len() {
                return Err(corrupt("trailing bytes"));
            }
            Ok(Frame::Terms(TermGroupMsg { origin, dest, loop_ordinal, terms }))
        }
        KIND_IDS => {
            if pos + 8 * count != buf.len() {
                return Err(corrupt("id payload length mismatch"));
            }
            let mut ids = Vec::with_capacity(count);
            for _ in 0..count {
                ids.push(TermId(u64::from_le_bytes(
                    buf[pos..pos + 8].try_into().unwrap(),
                )));
                pos += 8;
            }
            Ok(Frame::Ids(IdGroupMsg { origin, dest, loop_ordinal, ids }))
        }
        k => Err(corrupt(&format!("unknown kind {k}"))),
    }
}

/// Delivery contract shared by the in-process and TCP backends.
///
/// `recv_*` blocks until all P messages of the given loop iteration have
/// arrived for `dest`, then returns them sorted by origin. This implicit
/// completeness check is what the phase barriers rely on.
pub trait Transport: Send + Sync {
    fn place_count(&self) -> usize;
    fn send_terms(&self, msg: TermGroupMsg) -> Result<()>;
    fn send_ids(&self, msg: IdGroupMsg) -> Result<()>;
    fn recv_terms(&self, dest: usize, loop_ordinal: u64) -> Result<Vec<TermGroupMsg>>;
    fn recv_ids(&self, dest: usize, loop_ordinal: u64) -> Result<Vec<IdGroupMsg>>;
    /// Poison all pending and future receives; used to unwind cleanly when
    /// any place fails mid-phase.
    fn abort(&self, reason: &str);
}

#[derive(Default)]
struct InboxState {
    terms: Vec<TermGroupMsg>,
    ids: Vec<IdGroupMsg>,
    aborted: Option<String>,
}

#[derive(Default)]
struct Inbox {
    state: Mutex<InboxState>,
    cond: Condvar,
}

impl Inbox {
    fn push_terms(&self, msg: TermGroupMsg) {
        let mut st = self.state.lock().unwrap();
        st.terms.push(msg);
        self.cond.notify_all();
    }

    fn push_ids(&self, msg: IdGroupMsg) {
        let mut st = self.state.lock().unwrap();
        st.ids.push(msg);
        self.cond.notify_all();
    }

    fn abort(&self, reason: &str) {
        let mut st = self.state.lock().unwrap();
        st.aborted = Some(reason.to_string());
        self.cond.notify_all();
    }

    fn recv_terms(&self, loop_ordinal: u64, places: usize) -> Result<Vec<TermGroupMsg>> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(reason) = &st.aborted {
                return Err(Error::Aborted(reason.clone()));
            }
            let ready = st.terms.iter().filter(|m| m.loop_ordinal == loop_ordinal).count();
            if ready == places {
                let mut msgs: Vec<TermGroupMsg> = Vec::with_capacity(places);
                let mut rest = Vec::new();
                for m in st.terms.drain(..) {
                    if m.loop_ordinal == loop_ordinal {
                        msgs.push(m);
                    } else {
                        rest.push(m);
                    }
                }
                st.terms = rest;
                msgs.sort_by_key(|m| m.origin);
                check_one_per_origin(msgs.iter().map(|m| m.origin), places)?;
                return Ok(msgs);
            }
            st = self.cond.wait(st).unwrap();
        }
    }

    fn recv_ids(&self, loop_ordinal: u64, places: usize) -> Result<Vec<IdGroupMsg>> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(reason) = &st.aborted {
                return Err(Error::Aborted(reason.clone()));
            }
            let ready = st.ids.iter().filter(|m| m.loop_ordinal == loop_ordinal).count();
            if ready == places {
                let mut msgs: Vec<IdGroupMsg> = Vec::with_capacity(places);
                let mut rest = Vec::new();
                for m in st.ids.drain(..) {
                    if m.loop_ordinal == loop_ordinal {
                        msgs.push(m);
                    } else {
                        rest.push(m);
                    }
                }
                st.ids = rest;
                msgs.sort_by_key(|m| m.origin);
                check_one_per_origin(msgs.iter().map(|m| m.origin), places)?;
                return Ok(msgs);
            }
            st = self.cond.wait(st).unwrap();
        }
    }
}

fn check_one_per_origin(origins: impl Iterator<Item = usize>, places: usize) -> Result<()> {
    let mut seen = vec![false; places];
    for o in origins {
        if o >= places || seen[o] {
            return Err(Error::Protocol(format!(
                "duplicate or out-of-range origin {o} in phase traffic"
            )));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Default backend: all places live in one process; messages move by value,
/// self-delivery included, with no serialization.
pub struct InProcessTransport {
    places: usize,
    inboxes: Vec<Inbox>,
}

impl InProcessTransport {
    pub fn new(places: usize) -> Result<Arc<InProcessTransport>> {
        if places == 0 {
            return Err(Error::Config("place count must be >= 1".into()));
        }
        Ok(Arc::new(InProcessTransport {
            places,
            inboxes: (0..places).map(|_| Inbox::default()).collect(),
        }))
    }

    fn check_dest(&self, dest: usize) -> Result<()> {
        if dest >= self.places {
            return Err(Error::Transport(format!(
                "destination {dest} out of range for {} places",
                self.places
            )));
        }
        Ok(())
    }
}

impl Transport for InProcessTransport {
    fn place_count(&self) -> usize {
        self.places
    }

    fn send_terms(&self, msg: TermGroupMsg) -> Result<()> {
        self.check_dest(msg.dest)?;
        self.inboxes[msg.dest].push_terms(msg);
        Ok(())
    }

    fn send_ids(&self, msg: IdGroupMsg) -> Result<()> {
        self.check_dest(msg.dest)?;
        self.inboxes[msg.dest].push_ids(msg);
        Ok(())
    }

    fn recv_terms(&self, dest: usize, loop_ordinal: u64) -> Result<Vec<TermGroupMsg>> {
        self.check_dest(dest)?;
        self.inboxes[dest].recv_terms(loop_ordinal, self.places)
    }

    fn recv_ids(&self, dest: usize, loop_ordinal: u64) -> Result<Vec<IdGroupMsg>> {
        self.check_dest(dest)?;
        self.inboxes[dest].recv_ids(loop_ordinal, self.places)
    }

    fn abort(&self, reason: &str) {
        for inbox in &self.inboxes {
            inbox.abort(reason);
        }
    }
}

/// TCP backend. Each place served by this transport instance has its own
/// listener; outgoing traffic uses one long-lived connection per ordered
/// place pair, established lazily.
pub struct TcpTransport {
    places: usize,
    addrs: Vec<SocketAddr>,
    /// place index -> inbox slot, for places hosted here.
    local_slot: Vec<Option<usize>>,
    inboxes: Vec<Inbox>,
    conns: Mutex<HashMap<(usize, usize), TcpStream>>,
    shutdown: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl TcpTransport {
    /// Bind one loopback listener per place and serve all places locally.
    /// This is the single-process configuration used for wire-differential
    /// runs and tests.
    pub fn bind_loopback(places: usize) -> Result<Arc<TcpTransport>> {
        let mut listeners = Vec::with_capacity(places);
        let mut addrs = Vec::with_capacity(places);
        for _ in 0..places {
            let l = TcpListener::bind("127.0.0.1:0")
                .map_err(|e| Error::Transport(format!("bind failed: {e}")))?;
            addrs.push(l.local_addr().unwrap());
            listeners.push(l);
        }
        let local: Vec<usize> = (0..places).collect();
        Self::new(addrs, &local, listeners)
    }

    /// General form: `addrs` maps every place to its listener address;
    /// `local_places` are the places hosted by this process, with their
    /// already-bound listeners in matching order.
    pub fn new(
        addrs: Vec<SocketAddr>,
        local_places: &[usize],
        listeners: Vec<TcpListener>,
    ) -> Result<Arc<TcpTransport>> {
        let places = addrs.len();
        if places == 0 {
            return Err(Error::Config("place count must be >= 1".into()));
        }
        if local_places.len() != listeners.len() {
            return Err(Error::Config("one listener per local place required".into()));
        }
        let mut local_slot = vec![None; places];
        for (slot, &p) in local_places.iter().enumerate() {
            local_slot[p] = Some(slot);
        }
        let transport = Arc::new(TcpTransport {
            places,
            addrs,
            local_slot,
            inboxes: local_places.iter().map(|_| Inbox::default()).collect(),
            conns: Mutex::new(HashMap::new()),
            shutdown: Arc::new(AtomicBool::new(false)),
            threads: Mutex::new(Vec::new()),
        });
        for listener in listeners {
            let t = Arc::downgrade(&transport);
            let shutdown = Arc::clone(&transport.shutdown);
            let handle = std::thread::spawn(move || accept_loop(t, listener, shutdown));
            transport.threads.lock().unwrap().push(handle);
        }
        Ok(transport)
    }

    fn inbox_for(&self, dest: usize) -> Result<&Inbox> {
        let slot = self
            .local_slot
            .get(dest)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Transport(format!("place {dest} is not hosted here")))?;
        Ok(&self.inboxes[slot])
    }

    fn send_frame(&self, origin: usize, dest: usize, frame: Vec<u8>) -> Result<()> {
        if dest >= self.places {
            return Err(Error::Transport(format!("destination {dest} out of range")));
        }
        let mut conns = self.conns.lock().unwrap();
        let stream = match conns.get_mut(&(origin, dest)) {
            Some(s) => s,
            None => {
                let s = TcpStream::connect(self.addrs[dest]).map_err(|e| {
                    Error::Transport(format!(
                        "place {dest} at {} unreachable: {e}",
                        self.addrs[dest]
                    ))
                })?;
                s.set_nodelay(true).ok();
                conns.entry((origin, dest)).or_insert(s)
            }
        };
        let len = frame.len() as u32;
        if len > MAX_FRAME {
            return Err(Error::Transport("frame exceeds size limit".into()));
        }
        stream
            .write_all(&len.to_le_bytes())
            .and_then(|_| stream.write_all(&frame))
            .map_err(|e| Error::Transport(format!("send to place {dest} failed: {e}")))
    }

    fn deliver(&self, frame: Frame) {
        match frame {
            Frame::Terms(msg) => {
                if let Ok(inbox) = self.inbox_for(msg.dest) {
                    inbox.push_terms(msg);
                }
            }
            Frame::Ids(msg) => {
                if let Ok(inbox) = self.inbox_for(msg.dest) {
                    inbox.push_ids(msg);
                }
            }
        }
    }
}

fn accept_loop(
    transport: std::sync::Weak<TcpTransport>,
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
) {
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                if shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let Some(t) = transport.upgrade() else { return };
                let weak = transport.clone();
                let sd = Arc::clone(&shutdown);
                let handle = std::thread::spawn(move || reader_loop(weak, stream, sd));
                t.threads.lock().unwrap().push(handle);
            }
            Err(_) => {
                if shutdown.load(Ordering::SeqCst) {
                    return;
                }
            }
        }
    }
}

fn reader_loop(
    transport: std::sync::Weak<TcpTransport>,
    mut stream: TcpStream,
    shutdown: Arc<AtomicBool>,
) {
    let mut len_buf = [0u8; 4];
    loop {
        match stream.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(_) => return, // EOF or peer closed
        }
        let Some(t) = transport.upgrade() else { return };
        let len = u32::from_le_bytes(len_buf);
        if len > MAX_FRAME {
            t.abort("oversized frame received");
            return;
        }
        let mut buf = vec![0u8; len as usize];
        if stream.read_exact(&mut buf).is_err() {
            if !shutdown.load(Ordering::SeqCst) {
                t.abort("connection dropped mid-frame");
            }
            return;
        }
        match decode_frame(&buf) {
            Ok(frame) => t.deliver(frame),
            Err(e) => {
                t.abort(&e.to_string());
                return;
            }
        }
    }
}

impl Transport for TcpTransport {
    fn place_count(&self) -> usize {
        self.places
    }

    fn send_terms(&self, msg: TermGroupMsg) -> Result<()> {
        let frame = encode_terms_frame(&msg);
        self.send_frame(msg.origin, msg.dest, frame)
    }

    fn send_ids(&self, msg: IdGroupMsg) -> Result<()> {
        let frame = encode_ids_frame(&msg);
        self.send_frame(msg.origin, msg.dest, frame)
    }

    fn recv_terms(&self, dest: usize, loop_ordinal: u64) -> Result<Vec<TermGroupMsg>> {
        self.inbox_for(dest)?.recv_terms(loop_ordinal, self.places)
    }

    fn recv_ids(&self, dest: usize, loop_ordinal: u64) -> Result<Vec<IdGroupMsg>> {
        self.inbox_for(dest)?.recv_ids(loop_ordinal, self.places)
    }

    fn abort(&self, reason: &str) {
        for inbox in &self.inboxes {
            inbox.abort(reason);
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.conns.lock().unwrap().clear();
        // Wake blocked acceptors with a dummy connection each.
        for (p, slot) in self.local_slot.iter().enumerate() {
            if slot.is_some() {
                let _ = TcpStream::connect(self.addrs[p]);
            }
        }
        let threads = std::mem::take(&mut *self.threads.lock().unwrap());
        for handle in threads {
            let _ = handle.join();
        }
    }
}
