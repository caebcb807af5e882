//! Rank arithmetic, chunk geometry and communication plans.
//!
//! Everything here is pure: no buffers move and no transport is touched.
//! Chunk indices always live in relative-rank space (the root is relative
//! rank 0); ranks carried by [`TransferEvent`] and [`RingPlan`] are absolute.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use thiserror::Error;

/// Absolute rank inside a process group.
pub type Rank = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("process group must contain at least one rank")]
    EmptyGroup,
    #[error("rank {rank} is out of range for a group of {size}")]
    RankOutOfRange { rank: usize, size: usize },
    #[error("chunk {index} is out of range for {count} chunks")]
    ChunkOutOfRange { index: usize, count: usize },
    #[error("a ring needs at least two ranks, got {0}")]
    RingTooSmall(usize),
    #[error("invalid node map: {0}")]
    NodeMap(String),
}

/// `ceil(log2(n))`, with `ceil_log2(1) == 0`.
pub fn ceil_log2(n: usize) -> u32 {
    assert!(n >= 1, "ceil_log2 of zero");
    usize::BITS - (n - 1).leading_zeros()
}

/// Lowest set bit of `r`; zero for `r == 0`.
pub fn lowbit(r: usize) -> usize {
    r & r.wrapping_neg()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProcGroup {
    size: usize,
    root: Rank,
}

impl ProcGroup {
    pub fn new(size: usize, root: Rank) -> Result<Self, DomainError> {
        if size == 0 {
            return Err(DomainError::EmptyGroup);
        }
        if root >= size {
            return Err(DomainError::RankOutOfRange { rank: root, size });
        }
        Ok(Self { size, root })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn root(&self) -> Rank {
        self.root
    }

    pub fn is_pof2(&self) -> bool {
        self.size.is_power_of_two()
    }

    /// Number of rounds a binomial tree over this group needs.
    pub fn rounds(&self) -> usize {
        ceil_log2(self.size) as usize
    }

    fn check(&self, rank: Rank) -> Result<(), DomainError> {
        if rank >= self.size {
            Err(DomainError::RankOutOfRange { rank, size: self.size })
        } else {
            Ok(())
        }
    }

    /// Rank rotated so that the root maps to zero.
    pub fn relative_rank(&self, rank: Rank) -> Result<usize, DomainError> {
        self.check(rank)?;
        Ok(if rank >= self.root {
            rank - self.root
        } else {
            rank + self.size - self.root
        })
    }

    /// Inverse of [`relative_rank`](Self::relative_rank).
    pub fn absolute_rank(&self, relative: usize) -> Result<Rank, DomainError> {
        self.check(relative)?;
        Ok((relative + self.root) % self.size)
    }

    pub fn left_of(&self, rank: Rank) -> Rank {
        (self.size + rank - 1) % self.size
    }

    pub fn right_of(&self, rank: Rank) -> Rank {
        (rank + 1) % self.size
    }
}

/// Free-function form of [`ProcGroup::relative_rank`].
pub fn relative_rank(rank: Rank, group: &ProcGroup) -> Result<usize, DomainError> {
    group.relative_rank(rank)
}

/// Byte extent of one chunk. `offset` follows the chunk arithmetic even when
/// it lies past the end of the message; `len` is clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub offset: usize,
    pub len: usize,
}

/// Split of an `nbytes` message into `chunks` pieces of `ceil(nbytes / chunks)`
/// bytes, the trailing pieces truncated (possibly to nothing).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    nbytes: usize,
    chunks: usize,
    scatter_size: usize,
}

impl ChunkLayout {
    pub fn new(nbytes: usize, chunks: usize) -> Result<Self, DomainError> {
        if chunks == 0 {
            return Err(DomainError::EmptyGroup);
        }
        Ok(Self { nbytes, chunks, scatter_size: nbytes.div_ceil(chunks) })
    }

    pub fn for_group(nbytes: usize, group: &ProcGroup) -> Self {
        Self::new(nbytes, group.size()).expect("groups are never empty")
    }

    pub fn nbytes(&self) -> usize {
        self.nbytes
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks
    }

    pub fn scatter_size(&self) -> usize {
        self.scatter_size
    }

    pub fn extent(&self, index: usize) -> Result<Extent, DomainError> {
        if index >= self.chunks {
            return Err(DomainError::ChunkOutOfRange { index, count: self.chunks });
        }
        let offset = index * self.scatter_size;
        let len = self.nbytes.saturating_sub(offset).min(self.scatter_size);
        Ok(Extent { offset, len })
    }

    /// Buffer range covering a contiguous run of chunks, safe to slice with.
    pub fn byte_range(&self, chunks: ChunkRange) -> Range<usize> {
        debug_assert!(chunks.end <= self.chunks);
        let start = (chunks.start * self.scatter_size).min(self.nbytes);
        let end = (chunks.end * self.scatter_size).min(self.nbytes);
        start..end.max(start)
    }

    pub fn range_len(&self, chunks: ChunkRange) -> usize {
        self.byte_range(chunks).len()
    }
}

/// Free-function form of [`ChunkLayout::extent`].
pub fn chunk_extent(chunk_index: usize, layout: &ChunkLayout) -> Result<Extent, DomainError> {
    layout.extent(chunk_index)
}

/// Half-open run of chunk indices `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkRange {
    pub start: usize,
    pub end: usize,
}

impl ChunkRange {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn single(index: usize) -> Self {
        Self { start: index, end: index + 1 }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn iter(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for ChunkRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() == 1 {
            write!(f, "{}", self.start)
        } else {
            write!(f, "{}..{}", self.start, self.end)
        }
    }
}

/// Ordered set of chunk indices drawn from `[0, universe)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChunkSet {
    universe: usize,
    members: BTreeSet<usize>,
}

impl ChunkSet {
    pub fn empty(universe: usize) -> Self {
        Self { universe, members: BTreeSet::new() }
    }

    pub fn full(universe: usize) -> Self {
        Self::from_range(universe, ChunkRange::new(0, universe))
    }

    pub fn from_range(universe: usize, range: ChunkRange) -> Self {
        assert!(range.end <= universe, "range {range} exceeds universe {universe}");
        Self { universe, members: range.iter().collect() }
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    /// Returns `false` if `index` was already present.
    pub fn insert(&mut self, index: usize) -> bool {
        assert!(index < self.universe, "chunk {index} outside universe {}", self.universe);
        self.members.insert(index)
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.contains(&index)
    }

    pub fn contains_all(&self, range: ChunkRange) -> bool {
        range.iter().all(|c| self.contains(c))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() == self.universe
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }
}

/// One point-to-point message of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransferEvent {
    /// 1-based round / iteration index.
    pub step: usize,
    pub src: Rank,
    pub dst: Rank,
    /// Chunks carried, in relative-rank space.
    pub chunks: ChunkRange,
    pub bytes: usize,
}

impl TransferEvent {
    /// First chunk carried; the single chunk for ring transfers.
    pub fn chunk(&self) -> usize {
        self.chunks.start
    }
}

/// Chunks held by relative rank `r` once the binomial scatter finished.
pub fn owned_range_after_scatter(relative: usize, size: usize) -> ChunkRange {
    if relative == 0 {
        ChunkRange::new(0, size)
    } else {
        ChunkRange::new(relative, (relative + lowbit(relative)).min(size))
    }
}

pub fn owned_chunks_after_scatter(
    relative: usize,
    group: &ProcGroup,
) -> Result<ChunkSet, DomainError> {
    group.check(relative)?;
    Ok(ChunkSet::from_range(
        group.size(),
        owned_range_after_scatter(relative, group.size()),
    ))
}

/// Round in which relative rank `r > 0` receives from its binomial parent.
/// Larger subtrees are served first, so the biggest branch goes out in round 1.
pub fn binomial_round(relative: usize, size: usize) -> usize {
    debug_assert!(relative > 0 && relative < size);
    ceil_log2(size) as usize - lowbit(relative).trailing_zeros() as usize
}

/// Binomial parent of relative rank `r > 0`: clear the lowest set bit.
pub fn binomial_parent(relative: usize) -> usize {
    relative - lowbit(relative)
}

/// Binomial children of relative rank `r`, largest subtree first.
pub fn binomial_children(relative: usize, size: usize) -> impl Iterator<Item = usize> {
    let top = if relative == 0 {
        if size <= 1 {
            0
        } else {
            1 << (ceil_log2(size) - 1)
        }
    } else {
        lowbit(relative) >> 1
    };
    std::iter::successors((top > 0).then_some(top), |m| (*m > 1).then_some(m >> 1))
        .map(move |mask| relative + mask)
        .filter(move |&child| child < size)
}

/// Full schedule of the binomial scatter in round order.
pub fn build_scatter_schedule(group: &ProcGroup, layout: &ChunkLayout) -> Vec<TransferEvent> {
    let size = group.size();
    let mut events: Vec<TransferEvent> = (1..size)
        .map(|rel| {
            let chunks = owned_range_after_scatter(rel, size);
            TransferEvent {
                step: binomial_round(rel, size),
                src: (binomial_parent(rel) + group.root()) % size,
                dst: (rel + group.root()) % size,
                chunks,
                bytes: layout.range_len(chunks),
            }
        })
        .collect();
    events.sort();
    events
}

/// What a rank does once its paired-exchange phase of the tuned ring is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tail {
    SendOnly,
    ReceiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RingPlan {
    /// Paired exchange happens in iteration `i` iff `step <= P - i`.
    pub step: usize,
    pub tail: Tail,
    pub left: Rank,
    pub right: Rank,
    size: usize,
}

impl RingPlan {
    pub fn pairs_at(&self, iteration: usize) -> bool {
        self.step + iteration <= self.size
    }

    pub fn sends_at(&self, iteration: usize) -> bool {
        self.pairs_at(iteration) || self.tail == Tail::SendOnly
    }

    pub fn receives_at(&self, iteration: usize) -> bool {
        self.pairs_at(iteration) || self.tail == Tail::ReceiveOnly
    }

    /// Iterations of the `P - 1` in which this rank receives.
    pub fn receive_count(&self) -> usize {
        (1..self.size).filter(|&i| self.receives_at(i)).count()
    }

    pub fn send_count(&self) -> usize {
        (1..self.size).filter(|&i| self.sends_at(i)).count()
    }
}

/// Per-rank threshold and tail role for the non-enclosed ring.
///
/// The mask walks down from `2^ceil(log2 P)`; at each mask the right
/// neighbour is tested before the rank itself. A divisible right neighbour
/// means this rank only receives once the threshold is passed, a divisible
/// self means it only sends.
pub fn compute_ring_plan(relative: usize, group: &ProcGroup) -> Result<RingPlan, DomainError> {
    let size = group.size();
    if size < 2 {
        return Err(DomainError::RingTooSmall(size));
    }
    group.check(relative)?;
    let rank = group.absolute_rank(relative)?;
    let right_relative = (relative + 1) % size;

    let mut mask = 1usize << ceil_log2(size);
    while mask > 1 {
        if right_relative.is_multiple_of(mask) {
            let step = if right_relative + mask > size { size - right_relative } else { mask };
            return Ok(plan(step, Tail::ReceiveOnly, rank, group));
        }
        if relative.is_multiple_of(mask) {
            let step = if relative + mask > size { size - relative } else { mask };
            return Ok(plan(step, Tail::SendOnly, rank, group));
        }
        mask >>= 1;
    }
    // Of two ring neighbours at least one relative rank is even, and the
    // wrapped neighbour of P - 1 is 0, so mask == 2 always decides.
    unreachable!("mask loop fell through for relative rank {relative} of {size}")
}

fn plan(step: usize, tail: Tail, rank: Rank, group: &ProcGroup) -> RingPlan {
    RingPlan {
        step,
        tail,
        left: group.left_of(rank),
        right: group.right_of(rank),
        size: group.size(),
    }
}
