//! Blocking point-to-point messaging the collectives run over.
//!
//! Sends are buffered: `send` returns as soon as the payload has been handed
//! off, so a rank that only sends never waits on a rank that only receives.
//! Delivery is FIFO per `(src, dst, tag)` and receives match on `(src, tag)`.

mod fault;
mod inproc;
mod mailbox;
mod tcp;

use thiserror::Error;

use crate::sched::Rank;

pub use fault::CorruptingTransport;
pub use inproc::{Envelope, InProcEndpoint, InProcess, Tap};
pub use tcp::{RankTable, TcpTransport};

/// Message tag. Collectives draw a fresh block of [`TAG_STRIDE`] tags per
/// invocation so that back-to-back collectives never cross-match.
pub type Tag = u32;

pub const TAG_STRIDE: Tag = 4;

/// Reserved for [`crate::collectives::barrier`].
pub const BARRIER_TAG: Tag = Tag::MAX;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("rank {peer} is not a member of a group of {size}")]
    UnknownPeer { peer: Rank, size: usize },
    #[error("rank {0} attempted to message itself")]
    SelfMessage(Rank),
    #[error("peer {0} closed the connection")]
    PeerFailure(Rank),
    #[error("payload of {0} bytes does not fit a frame")]
    FrameTooLarge(usize),
    #[error("rank table: {0}")]
    RankTable(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

/// Per-destination tallies of what an endpoint has sent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Counters {
    messages: Vec<u64>,
    bytes: Vec<u64>,
    zero_length: Vec<u64>,
}

impl Counters {
    pub fn new(size: usize) -> Self {
        Self {
            messages: vec![0; size],
            bytes: vec![0; size],
            zero_length: vec![0; size],
        }
    }

    pub(crate) fn record(&mut self, dst: Rank, len: usize) {
        self.messages[dst] += 1;
        self.bytes[dst] += len as u64;
        if len == 0 {
            self.zero_length[dst] += 1;
        }
    }

    pub fn messages_to(&self, dst: Rank) -> u64 {
        self.messages[dst]
    }

    pub fn bytes_to(&self, dst: Rank) -> u64 {
        self.bytes[dst]
    }

    pub fn zero_length_to(&self, dst: Rank) -> u64 {
        self.zero_length[dst]
    }

    pub fn peers(&self) -> usize {
        self.messages.len()
    }

    pub fn total_messages(&self) -> u64 {
        self.messages.iter().sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().sum()
    }

    pub fn total_zero_length(&self) -> u64 {
        self.zero_length.iter().sum()
    }

    /// Traffic sent since `earlier` was snapshotted from the same endpoint.
    pub fn since(&self, earlier: &Counters) -> Counters {
        let diff = |a: &[u64], b: &[u64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Counters {
            messages: diff(&self.messages, &earlier.messages),
            bytes: diff(&self.bytes, &earlier.bytes),
            zero_length: diff(&self.zero_length, &earlier.zero_length),
        }
    }
}

pub trait Transport {
    fn rank(&self) -> Rank;

    fn size(&self) -> usize;

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()>;

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>>;

    /// Send to `dst` and receive from `src` with no ordering between the two.
    /// Because sends are buffered, sending first cannot deadlock a ring.
    fn sendrecv(
        &mut self,
        dst: Rank,
        payload: &[u8],
        src: Rank,
        tag: Tag,
    ) -> Result<Vec<u8>> {
        self.send(dst, tag, payload)?;
        self.recv(src, tag)
    }

    /// First tag of a fresh block of [`TAG_STRIDE`] tags. All ranks of a
    /// group must call this the same number of times.
    fn next_tag(&mut self) -> Tag;

    fn counters(&self) -> &Counters;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn rank(&self) -> Rank {
        (**self).rank()
    }
    fn size(&self) -> usize {
        (**self).size()
    }
    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        (**self).send(dst, tag, payload)
    }
    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        (**self).recv(src, tag)
    }
    fn sendrecv(&mut self, dst: Rank, payload: &[u8], src: Rank, tag: Tag) -> Result<Vec<u8>> {
        (**self).sendrecv(dst, payload, src, tag)
    }
    fn next_tag(&mut self) -> Tag {
        (**self).next_tag()
    }
    fn counters(&self) -> &Counters {
        (**self).counters()
    }
}

pub(crate) fn check_peer(rank: Rank, size: usize, peer: Rank) -> Result<()> {
    if peer >= size {
        Err(TransportError::UnknownPeer { peer, size })
    } else if peer == rank {
        Err(TransportError::SelfMessage(rank))
    } else {
        Ok(())
    }
}

/// View of a subset of ranks as a dense group `0..members.len()`.
///
/// Local rank `i` is `members[i]` in the parent transport. Every member must
/// build the view with the same member list and tag base.
pub struct Subgroup<'a, T: Transport + ?Sized> {
    inner: &'a mut T,
    members: &'a [Rank],
    local: Rank,
    tag: Tag,
}

impl<'a, T: Transport + ?Sized> Subgroup<'a, T> {
    /// `None` if the caller is not in `members`.
    pub fn new(inner: &'a mut T, members: &'a [Rank], tag: Tag) -> Option<Self> {
        let local = members.iter().position(|&r| r == inner.rank())?;
        Some(Self { inner, members, local, tag })
    }

    fn global(&self, local: Rank) -> Result<Rank> {
        self.members
            .get(local)
            .copied()
            .ok_or(TransportError::UnknownPeer { peer: local, size: self.members.len() })
    }
}

impl<T: Transport + ?Sized> Transport for Subgroup<'_, T> {
    fn rank(&self) -> Rank {
        self.local
    }

    fn size(&self) -> usize {
        self.members.len()
    }

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        let dst = self.global(dst)?;
        self.inner.send(dst, tag, payload)
    }

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        let src = self.global(src)?;
        self.inner.recv(src, tag)
    }

    fn sendrecv(&mut self, dst: Rank, payload: &[u8], src: Rank, tag: Tag) -> Result<Vec<u8>> {
        let (dst, src) = (self.global(dst)?, self.global(src)?);
        self.inner.sendrecv(dst, payload, src, tag)
    }

    fn next_tag(&mut self) -> Tag {
        let tag = self.tag;
        self.tag = self.tag.wrapping_add(TAG_STRIDE);
        tag
    }

    /// Counters of the parent endpoint, indexed by parent rank.
    fn counters(&self) -> &Counters {
        self.inner.counters()
    }
}
