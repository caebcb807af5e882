//! Full-mesh TCP transport.
//!
//! Every pair of ranks shares one connection: the higher rank dials the
//! lower one and opens with its rank as a 4-byte little-endian integer.
//! Frames are `u32 LE payload length | u32 LE tag | payload`. A reader
//! thread per peer drains the socket into an unbounded queue, which keeps
//! writes from stalling on a peer that is itself blocked writing.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::mpsc::{channel, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::mailbox::{Frame, Mailbox};
use super::{check_peer, Counters, Result, Tag, Transport, TransportError, TAG_STRIDE};
use crate::sched::Rank;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

/// Rank to socket-address mapping, read from `rank host:port` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    addrs: Vec<SocketAddr>,
}

impl RankTable {
    pub fn new(addrs: Vec<SocketAddr>) -> Self {
        Self { addrs }
    }

    /// Blank lines and `#` comments are ignored; ranks must cover `0..n`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| TransportError::RankTable(msg);
        let mut entries: Vec<Option<SocketAddr>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(rank), Some(addr), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad(format!("line {}: expected `rank host:port`", lineno + 1)));
            };
            let rank: usize = rank
                .parse()
                .map_err(|_| bad(format!("line {}: bad rank `{rank}`", lineno + 1)))?;
            let addr = addr
                .to_socket_addrs()
                .map_err(|e| bad(format!("line {}: `{addr}`: {e}", lineno + 1)))?
                .next()
                .ok_or_else(|| bad(format!("line {}: `{addr}` resolves to nothing", lineno + 1)))?;
            if entries.len() <= rank {
                entries.resize(rank + 1, None);
            }
            if entries[rank].replace(addr).is_some() {
                return Err(bad(format!("rank {rank} listed twice")));
            }
        }
        let addrs = entries
            .into_iter()
            .enumerate()
            .map(|(rank, a)| a.ok_or_else(|| bad(format!("rank {rank} missing"))))
            .collect::<Result<Vec<_>>>()?;
        if addrs.is_empty() {
            return Err(bad("no ranks".into()));
        }
        Ok(Self { addrs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    pub fn addr(&self, rank: Rank) -> SocketAddr {
        self.addrs[rank]
    }

    /// Table restricted to its first `size` ranks.
    pub fn truncated(&self, size: usize) -> Result<Self> {
        if size > self.addrs.len() {
            return Err(TransportError::RankTable(format!(
                "{size} ranks requested but the table lists {}",
                self.addrs.len()
            )));
        }
        Ok(Self { addrs: self.addrs[..size].to_vec() })
    }
}

pub struct TcpTransport {
    rank: Rank,
    size: usize,
    writers: Vec<Option<BufWriter<TcpStream>>>,
    mailbox: Mailbox,
    counters: Counters,
    epoch: Tag,
}

impl TcpTransport {
    /// Binds this rank's table address and connects to every peer.
    pub fn establish(rank: Rank, table: &RankTable) -> Result<Self> {
        let listener = TcpListener::bind(table.addr(rank))?;
        Self::with_listener(rank, listener, table)
    }

    /// Like [`establish`](Self::establish) with an already bound listener.
    pub fn with_listener(rank: Rank, listener: TcpListener, table: &RankTable) -> Result<Self> {
        let size = table.len();
        if rank >= size {
            return Err(TransportError::UnknownPeer { peer: rank, size });
        }
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

        for (peer, slot) in streams.iter_mut().enumerate().take(rank) {
            let mut stream = connect_with_retry(table.addr(peer))?;
            stream.write_all(&(rank as u32).to_le_bytes())?;
            *slot = Some(stream);
        }
        for _ in rank + 1..size {
            let (mut stream, _) = listener.accept()?;
            let mut hello = [0u8; 4];
            stream.read_exact(&mut hello)?;
            let peer = u32::from_le_bytes(hello) as usize;
            if peer <= rank || peer >= size || streams[peer].is_some() {
                return Err(TransportError::Handshake(format!(
                    "rank {rank} got unexpected hello from {peer}"
                )));
            }
            streams[peer] = Some(stream);
        }

        let mut writers = Vec::with_capacity(size);
        let mut inboxes = Vec::with_capacity(size);
        for (peer, stream) in streams.into_iter().enumerate() {
            match stream {
                None => {
                    writers.push(None);
                    inboxes.push(None);
                }
                Some(stream) => {
                    stream.set_nodelay(true)?;
                    let (tx, rx) = channel();
                    let reader = stream.try_clone()?;
                    thread::Builder::new()
                        .name(format!("tcp-rx-{rank}<-{peer}"))
                        .spawn(move || pump_frames(reader, tx))?;
                    writers.push(Some(BufWriter::new(stream)));
                    inboxes.push(Some(rx));
                }
            }
        }

        Ok(Self {
            rank,
            size,
            writers,
            mailbox: Mailbox::new(inboxes),
            counters: Counters::new(size),
            epoch: 0,
        })
    }

    /// Builds a whole group on loopback with OS-assigned ports, one
    /// transport per rank, connecting concurrently.
    pub fn loopback_group(size: usize) -> Result<Vec<Self>> {
        let listeners = (0..size)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<io::Result<Vec<_>>>()?;
        let table = RankTable::new(
            listeners.iter().map(|l| l.local_addr()).collect::<io::Result<_>>()?,
        );
        Self::group_from_listeners(listeners, &table)
    }

    /// Binds every address of `table` locally and connects the full group.
    pub fn local_group(table: &RankTable) -> Result<Vec<Self>> {
        let listeners = (0..table.len())
            .map(|r| TcpListener::bind(table.addr(r)))
            .collect::<io::Result<Vec<_>>>()?;
        Self::group_from_listeners(listeners, table)
    }

    fn group_from_listeners(listeners: Vec<TcpListener>, table: &RankTable) -> Result<Vec<Self>> {
        thread::scope(|s| {
            let handles: Vec<_> = listeners
                .into_iter()
                .enumerate()
                .map(|(rank, l)| s.spawn(move || Self::with_listener(rank, l, table)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("connect thread panicked"))
                .collect()
        })
    }
}

fn connect_with_retry(addr: SocketAddr) -> Result<TcpStream> {
    let deadline = Instant::now() + CONNECT_TIMEOUT;
    let mut backoff = Duration::from_millis(5);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(200));
            }
        }
    }
}

fn pump_frames(stream: TcpStream, tx: Sender<Frame>) {
    let mut reader = BufReader::new(stream);
    loop {
        let mut header = [0u8; 8];
        if reader.read_exact(&mut header).is_err() {
            return;
        }
        let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        let tag = u32::from_le_bytes(header[4..].try_into().unwrap());
        let mut payload = vec![0u8; len];
        if reader.read_exact(&mut payload).is_err() {
            return;
        }
        if tx.send(Frame { tag, payload }).is_err() {
            return;
        }
    }
}

fn frame_header(tag: Tag, len: usize) -> Result<[u8; 8]> {
    let len = u32::try_from(len).map_err(|_| TransportError::FrameTooLarge(len))?;
    let mut header = [0u8; 8];
    header[..4].copy_from_slice(&len.to_le_bytes());
    header[4..].copy_from_slice(&tag.to_le_bytes());
    Ok(header)
}

impl Transport for TcpTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        check_peer(self.rank, self.size, dst)?;
        let header = frame_header(tag, payload.len())?;
        let w = self.writers[dst].as_mut().ok_or(TransportError::PeerFailure(dst))?;
        let io = (|| {
            w.write_all(&header)?;
            w.write_all(payload)?;
            w.flush()
        })();
        io.map_err(|_| TransportError::PeerFailure(dst))?;
        self.counters.record(dst, payload.len());
        Ok(())
    }

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        check_peer(self.rank, self.size, src)?;
        self.mailbox.take(src, tag)
    }

    fn next_tag(&mut self) -> Tag {
        let tag = self.epoch.wrapping_mul(TAG_STRIDE);
        self.epoch = self.epoch.wrapping_add(1);
        tag
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for w in self.writers.iter_mut().flatten() {
            let _ = w.flush();
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rank_table() {
        let t = RankTable::parse("# cluster\n1 127.0.0.1:9001\n0 127.0.0.1:9000  # head\n\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.addr(0).port(), 9000);
        assert_eq!(t.addr(1).port(), 9001);
    }

    #[test]
    fn rank_table_errors() {
        assert!(RankTable::parse("").is_err());
        assert!(RankTable::parse("0 127.0.0.1:1\n2 127.0.0.1:2\n").is_err());
        assert!(RankTable::parse("0 127.0.0.1:1\n0 127.0.0.1:2\n").is_err());
        assert!(RankTable::parse("zero 127.0.0.1:1\n").is_err());
        assert!(RankTable::parse("0\n").is_err());
        let t = RankTable::parse("0 127.0.0.1:1\n1 127.0.0.1:2\n").unwrap();
        assert_eq!(t.truncated(1).unwrap().len(), 1);
        assert!(t.truncated(3).is_err());
    }

    #[test]
    fn frame_layout() {
        assert_eq!(frame_header(0x0102_0304, 2).unwrap(), [2, 0, 0, 0, 4, 3, 2, 1]);
        assert_eq!(frame_header(0, 0).unwrap(), [0; 8]);
    }
}
