//! Schedule replay without payloads.
//!
//! Each algorithm is expanded rank by rank into the sends and receives that
//! rank would post, exactly as the executable collectives walk their loops.
//! The posts are then paired up per `(step, src, dst)` and replayed against
//! the chunk holdings of every rank. Any unmatched post, disagreement on the
//! carried chunks, or send of a chunk the sender does not hold is a schedule
//! integrity error.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::collectives::{NodeMap, SmpPlan};
use crate::sched::{
    binomial_children, binomial_parent, binomial_round, ceil_log2, compute_ring_plan,
    owned_range_after_scatter, ChunkLayout, ChunkRange, ChunkSet, DomainError, ProcGroup, Rank,
    TransferEvent,
};
use crate::transport::Counters;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Algorithm {
    /// Whole-message binomial broadcast.
    Binomial,
    /// Binomial scatter alone.
    Scatter,
    /// Enclosed ring allgather, starting from post-scatter holdings.
    NativeAllgather,
    /// Non-enclosed ring allgather, starting from post-scatter holdings.
    TunedAllgather,
    /// Scatter then enclosed ring.
    BcastNative,
    /// Scatter then non-enclosed ring.
    BcastOpt,
    SmpAware(NodeMap),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Binomial => "binomial",
            Algorithm::Scatter => "scatter",
            Algorithm::NativeAllgather => "native-allgather",
            Algorithm::TunedAllgather => "tuned-allgather",
            Algorithm::BcastNative => "native",
            Algorithm::BcastOpt => "opt",
            Algorithm::SmpAware(_) => "smp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Send,
    Recv,
}

/// One send or receive as posted by a single rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Post {
    pub step: usize,
    pub rank: Rank,
    pub side: Side,
    pub peer: Rank,
    pub chunks: ChunkRange,
    pub bytes: usize,
}

impl Post {
    fn link(&self) -> (usize, Rank, Rank) {
        match self.side {
            Side::Send => (self.step, self.rank, self.peer),
            Side::Recv => (self.step, self.peer, self.rank),
        }
    }
}

/// Posts of one phase together with the holdings the phase starts from.
/// Chunk indices are relative to the phase's own chunk space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseLog {
    pub label: &'static str,
    pub chunk_count: usize,
    pub initial: BTreeMap<Rank, ChunkSet>,
    pub posts: Vec<Post>,
    /// Nominal number of steps of the phase.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    InvalidPeer(Post),
    UnmatchedSend(Post),
    UnmatchedRecv(Post),
    Mismatch { send: Post, recv: Post },
    MissingData(TransferEvent),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidPeer(p) => write!(f, "rank {} posts to invalid peer {} at step {}", p.rank, p.peer, p.step),
            Violation::UnmatchedSend(p) => write!(f, "send {}->{} at step {} has no receive", p.rank, p.peer, p.step),
            Violation::UnmatchedRecv(p) => write!(f, "receive {}<-{} at step {} has no send", p.rank, p.peer, p.step),
            Violation::Mismatch { send, recv } => write!(
                f,
                "step {}: {}->{} sends chunks {} ({} B) but the receive expects {} ({} B)",
                send.step, send.rank, send.peer, send.chunks, send.bytes, recv.chunks, recv.bytes
            ),
            Violation::MissingData(e) => write!(
                f,
                "step {}: rank {} forwards chunks {} it does not hold",
                e.step, e.src, e.chunks
            ),
        }
    }
}

/// Outcome of matching and replaying posts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Verdict {
    pub transfers: usize,
    /// Transfers whose chunks the receiver already held. Informational.
    pub duplicate_receives: usize,
    pub violation: Option<Violation>,
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        self.violation.is_none()
    }
}

/// Result of replaying one phase.
#[derive(Debug, Clone)]
pub struct PhaseReplay {
    pub events: Vec<TransferEvent>,
    pub duplicate_receives: usize,
    pub violation: Option<Violation>,
    pub holdings: BTreeMap<Rank, ChunkSet>,
}

/// Pairs posts and replays holdings step by step. Within a step all sends
/// read the holdings as they were when the step began.
pub fn replay_phase(phase: &PhaseLog, group: &ProcGroup) -> PhaseReplay {
    let mut out = PhaseReplay {
        events: Vec::new(),
        duplicate_receives: 0,
        violation: None,
        holdings: phase.initial.clone(),
    };

    if let Some(bad) = phase
        .posts
        .iter()
        .find(|p| p.rank >= group.size() || p.peer >= group.size() || p.rank == p.peer)
    {
        out.violation = Some(Violation::InvalidPeer(*bad));
        return out;
    }

    let mut sends: BTreeMap<_, Vec<&Post>> = BTreeMap::new();
    let mut recvs: BTreeMap<_, Vec<&Post>> = BTreeMap::new();
    for p in &phase.posts {
        let side = if p.side == Side::Send { &mut sends } else { &mut recvs };
        side.entry(p.link()).or_default().push(p);
    }

    let mut keys: Vec<_> = sends.keys().chain(recvs.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    for key in keys {
        let s = sends.get(&key).map_or(&[][..], Vec::as_slice);
        let r = recvs.get(&key).map_or(&[][..], Vec::as_slice);
        for (send, recv) in s.iter().zip(r) {
            if send.chunks != recv.chunks || send.bytes != recv.bytes {
                out.violation = Some(Violation::Mismatch { send: **send, recv: **recv });
                return out;
            }
            out.events.push(TransferEvent {
                step: key.0,
                src: key.1,
                dst: key.2,
                chunks: send.chunks,
                bytes: send.bytes,
            });
        }
        if s.len() > r.len() {
            out.violation = Some(Violation::UnmatchedSend(*s[r.len()]));
            return out;
        }
        if r.len() > s.len() {
            out.violation = Some(Violation::UnmatchedRecv(*r[s.len()]));
            return out;
        }
    }

    let mut start = 0;
    while start < out.events.len() {
        let step = out.events[start].step;
        let end = start + out.events[start..].iter().take_while(|e| e.step == step).count();
        for e in &out.events[start..end] {
            let held = out.holdings.get(&e.src).is_some_and(|h| h.contains_all(e.chunks));
            if !held {
                out.violation = Some(Violation::MissingData(*e));
                return out;
            }
            if let Some(h) = out.holdings.get(&e.dst) {
                if e.chunks.iter().any(|c| h.contains(c)) {
                    out.duplicate_receives += 1;
                }
            }
        }
        for e in &out.events[start..end] {
            let universe = phase.chunk_count;
            let h = out.holdings.entry(e.dst).or_insert_with(|| ChunkSet::empty(universe));
            e.chunks.iter().for_each(|c| {
                h.insert(c);
            });
        }
        start = end;
    }
    out
}

/// Matches every send against exactly one receive and replays holdings.
/// Returns the first violation found, in phase then step order.
pub fn check_matching(phases: &[PhaseLog], group: &ProcGroup) -> Verdict {
    let mut verdict = Verdict::default();
    for phase in phases {
        let replay = replay_phase(phase, group);
        verdict.transfers += replay.events.len();
        verdict.duplicate_receives += replay.duplicate_receives;
        if replay.violation.is_some() {
            verdict.violation = replay.violation;
            break;
        }
    }
    verdict
}

/// Per-link totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkLoad {
    pub messages: usize,
    pub bytes: usize,
    pub zero_length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrafficReport {
    pub total_messages: usize,
    pub total_bytes: usize,
    pub zero_length_messages: usize,
    pub per_link: BTreeMap<(Rank, Rank), LinkLoad>,
    pub per_step: BTreeMap<usize, usize>,
    pub steps: usize,
}

impl TrafficReport {
    pub fn from_events(events: &[TransferEvent], steps: usize) -> Self {
        let mut report = TrafficReport { steps, ..Default::default() };
        for e in events {
            report.total_messages += 1;
            report.total_bytes += e.bytes;
            let link = report.per_link.entry((e.src, e.dst)).or_default();
            link.messages += 1;
            link.bytes += e.bytes;
            if e.bytes == 0 {
                report.zero_length_messages += 1;
                link.zero_length += 1;
            }
            *report.per_step.entry(e.step).or_default() += 1;
        }
        report
    }

    /// Compares against the send counters of every rank (indexed by rank).
    /// Returns a description of the first disagreement.
    pub fn agrees_with(&self, counters: &[Counters]) -> Result<(), String> {
        for (src, c) in counters.iter().enumerate() {
            for dst in 0..c.peers() {
                let expect = self.per_link.get(&(src, dst)).copied().unwrap_or_default();
                let got = (c.messages_to(dst), c.bytes_to(dst), c.zero_length_to(dst));
                let want = (expect.messages as u64, expect.bytes as u64, expect.zero_length as u64);
                if got != want {
                    return Err(format!(
                        "link {src}->{dst}: counted (messages, bytes, zero-length) = {got:?}, simulated {want:?}"
                    ));
                }
            }
        }
        let links_seen = self.per_link.keys().all(|&(s, d)| s < counters.len() && d < counters[s].peers());
        if !links_seen {
            return Err("simulated traffic on a link with no counters".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub phases: Vec<PhaseLog>,
    pub events: Vec<TransferEvent>,
    pub report: TrafficReport,
    pub verdict: Verdict,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("schedule integrity: {0}")]
    ScheduleIntegrity(Violation),
}

/// Expands `algorithm` over `group` for an `nbytes` message and replays it.
pub fn simulate(algorithm: &Algorithm, group: &ProcGroup, nbytes: usize) -> Result<Simulation, SimError> {
    let (phases, steps) = expand(algorithm, group, nbytes)?;
    let mut events = Vec::new();
    let mut verdict = Verdict::default();
    for phase in &phases {
        let replay = replay_phase(phase, group);
        if let Some(v) = replay.violation {
            return Err(SimError::ScheduleIntegrity(v));
        }
        verdict.transfers += replay.events.len();
        verdict.duplicate_receives += replay.duplicate_receives;
        events.extend(replay.events);
    }
    events.sort();
    let report = TrafficReport::from_events(&events, steps);
    Ok(Simulation { phases, events, report, verdict })
}

/// One line per event, `step src dst chunk bytes`, ordered by step then src.
pub fn emit_trace<W: Write>(events: &[TransferEvent], sink: &mut W) -> io::Result<()> {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| (e.step, e.src, e.dst));
    for e in &sorted {
        writeln!(sink, "{} {} {} {} {}", e.step, e.src, e.dst, e.chunk(), e.bytes)?;
    }
    sink.flush()
}

/// Phases of `algorithm` and its total nominal step count.
fn expand(
    algorithm: &Algorithm,
    group: &ProcGroup,
    nbytes: usize,
) -> Result<(Vec<PhaseLog>, usize), DomainError> {
    let all: Vec<Rank> = (0..group.size()).collect();
    let root = group.root();
    let mut phases = Vec::new();
    let mut offset = 0;
    let mut push = |phase: PhaseLog, offset: &mut usize| {
        *offset += phase.steps;
        phases.push(phase);
    };
    match algorithm {
        Algorithm::Binomial => push(binomial_phase("binomial", &all, root, nbytes, 0)?, &mut offset),
        Algorithm::Scatter => push(scatter_phase(&all, root, nbytes, 0)?, &mut offset),
        Algorithm::NativeAllgather => push(ring_phase(&all, root, nbytes, 0, false)?, &mut offset),
        Algorithm::TunedAllgather => push(ring_phase(&all, root, nbytes, 0, true)?, &mut offset),
        Algorithm::BcastNative | Algorithm::BcastOpt => {
            let tuned = *algorithm == Algorithm::BcastOpt;
            push(scatter_phase(&all, root, nbytes, 0)?, &mut offset);
            let o = offset;
            push(ring_phase(&all, root, nbytes, o, tuned)?, &mut offset);
        }
        Algorithm::SmpAware(map) => {
            let plan = SmpPlan::new(group, map)?;
            push(binomial_phase("intra-root", &plan.root_node, root, nbytes, 0)?, &mut offset);
            let o = offset;
            push(scatter_phase(&plan.leaders, root, nbytes, o)?, &mut offset);
            let o = offset;
            push(ring_phase(&plan.leaders, root, nbytes, o, true)?, &mut offset);
            let o = offset;
            let mut longest = 0;
            for (members, leader) in &plan.other_nodes {
                let phase = binomial_phase("intra-other", members, *leader, nbytes, o)?;
                longest = longest.max(phase.steps);
                phases.push(phase);
            }
            offset += longest;
        }
    }
    Ok((phases, offset))
}

/// Local group over `members` plus a translator from local to parent rank.
fn local_group(members: &[Rank], root: Rank) -> (ProcGroup, impl Fn(usize) -> Rank + '_) {
    (SmpPlan::subgroup(members, root), move |local: usize| members[local])
}

fn binomial_phase(
    label: &'static str,
    members: &[Rank],
    root: Rank,
    nbytes: usize,
    offset: usize,
) -> Result<PhaseLog, DomainError> {
    let (g, abs) = local_group(members, root);
    let size = g.size();
    let whole = ChunkRange::single(0);
    let mut initial = BTreeMap::new();
    let mut posts = Vec::new();
    for local in 0..size {
        let rank = abs(local);
        let rel = g.relative_rank(local)?;
        let of_rel = |r: usize| g.absolute_rank(r).map(&abs);
        if rel == 0 {
            initial.insert(rank, ChunkSet::full(1));
        } else {
            initial.insert(rank, ChunkSet::empty(1));
            posts.push(Post {
                step: offset + binomial_round(rel, size),
                rank,
                side: Side::Recv,
                peer: of_rel(binomial_parent(rel))?,
                chunks: whole,
                bytes: nbytes,
            });
        }
        for child in binomial_children(rel, size) {
            posts.push(Post {
                step: offset + binomial_round(child, size),
                rank,
                side: Side::Send,
                peer: of_rel(child)?,
                chunks: whole,
                bytes: nbytes,
            });
        }
    }
    Ok(PhaseLog { label, chunk_count: 1, initial, posts, steps: ceil_log2(size) as usize })
}

fn scatter_phase(
    members: &[Rank],
    root: Rank,
    nbytes: usize,
    offset: usize,
) -> Result<PhaseLog, DomainError> {
    let (g, abs) = local_group(members, root);
    let size = g.size();
    let layout = ChunkLayout::for_group(nbytes, &g);
    let mut initial = BTreeMap::new();
    let mut posts = Vec::new();
    for local in 0..size {
        let rank = abs(local);
        let rel = g.relative_rank(local)?;
        let of_rel = |r: usize| g.absolute_rank(r).map(&abs);
        if rel == 0 {
            initial.insert(rank, ChunkSet::full(size));
        } else {
            initial.insert(rank, ChunkSet::empty(size));
            let chunks = owned_range_after_scatter(rel, size);
            posts.push(Post {
                step: offset + binomial_round(rel, size),
                rank,
                side: Side::Recv,
                peer: of_rel(binomial_parent(rel))?,
                chunks,
                bytes: layout.range_len(chunks),
            });
        }
        for child in binomial_children(rel, size) {
            let chunks = owned_range_after_scatter(child, size);
            posts.push(Post {
                step: offset + binomial_round(child, size),
                rank,
                side: Side::Send,
                peer: of_rel(child)?,
                chunks,
                bytes: layout.range_len(chunks),
            });
        }
    }
    Ok(PhaseLog { label: "scatter", chunk_count: size, initial, posts, steps: ceil_log2(size) as usize })
}

fn ring_phase(
    members: &[Rank],
    root: Rank,
    nbytes: usize,
    offset: usize,
    tuned: bool,
) -> Result<PhaseLog, DomainError> {
    let (g, abs) = local_group(members, root);
    let size = g.size();
    let layout = ChunkLayout::for_group(nbytes, &g);
    let label = if tuned { "tuned-ring" } else { "native-ring" };
    let mut initial = BTreeMap::new();
    let mut posts = Vec::new();
    if size < 2 {
        for local in 0..size {
            initial.insert(abs(local), ChunkSet::full(size));
        }
        return Ok(PhaseLog { label, chunk_count: size, initial, posts, steps: 0 });
    }
    for local in 0..size {
        let rel = g.relative_rank(local)?;
        let rank = abs(local);
        initial.insert(rank, ChunkSet::from_range(size, owned_range_after_scatter(rel, size)));
        let plan = compute_ring_plan(rel, &g)?;
        let (mut j, mut jnext) = (local, plan.left);
        for i in 1..size {
            let (sends, recvs) = if tuned { (plan.sends_at(i), plan.receives_at(i)) } else { (true, true) };
            if sends {
                let chunks = ChunkRange::single(g.relative_rank(j)?);
                posts.push(Post {
                    step: offset + i,
                    rank,
                    side: Side::Send,
                    peer: abs(plan.right),
                    chunks,
                    bytes: layout.range_len(chunks),
                });
            }
            if recvs {
                let chunks = ChunkRange::single(g.relative_rank(jnext)?);
                posts.push(Post {
                    step: offset + i,
                    rank,
                    side: Side::Recv,
                    peer: abs(plan.left),
                    chunks,
                    bytes: layout.range_len(chunks),
                });
            }
            j = jnext;
            jnext = (size + jnext - 1) % size;
        }
    }
    Ok(PhaseLog { label, chunk_count: size, initial, posts, steps: size - 1 })
}
