//! Executable broadcast algorithms over any [`Transport`].
//!
//! Every rank calls the same function with a buffer of the same length; the
//! root's buffer holds the source. On return every buffer equals the source.

use thiserror::Error;

use crate::sched::{
    binomial_children, binomial_parent, compute_ring_plan, owned_range_after_scatter,
    ChunkLayout, ChunkRange, DomainError, ProcGroup, Rank,
};
use crate::transport::{Subgroup, Tag, Transport, TransportError, BARRIER_TAG};

/// Messages shorter than this go through the binomial tree.
pub const SHORT_MSG_THRESHOLD: usize = 12288;
/// Messages at least this long are long messages.
pub const LONG_MSG_THRESHOLD: usize = 524288;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("group of {group} ranks used over a transport of {transport}")]
    SizeMismatch { group: usize, transport: usize },
    #[error("expected {expected} bytes from rank {src}, got {got}")]
    Truncated { src: Rank, expected: usize, got: usize },
}

pub type Result<T, E = CollectiveError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlgorithmChoice {
    Binomial,
    ScatterRingNative,
    ScatterRingTuned,
    SmpAware,
}

/// Algorithm used for a broadcast of `nbytes` over `group`.
///
/// Medium messages over a power-of-two group stay on the binomial tree; the
/// recursive-doubling path that would normally serve them is not provided.
pub fn select_algorithm(nbytes: usize, group: &ProcGroup) -> AlgorithmChoice {
    if nbytes < SHORT_MSG_THRESHOLD {
        AlgorithmChoice::Binomial
    } else if nbytes >= LONG_MSG_THRESHOLD || !group.is_pof2() {
        AlgorithmChoice::ScatterRingTuned
    } else {
        AlgorithmChoice::Binomial
    }
}

fn check_size<T: Transport + ?Sized>(group: &ProcGroup, t: &T) -> Result<()> {
    if group.size() != t.size() {
        return Err(CollectiveError::SizeMismatch { group: group.size(), transport: t.size() });
    }
    Ok(())
}

fn recv_into<T: Transport + ?Sized>(
    t: &mut T,
    src: Rank,
    tag: Tag,
    dst: &mut [u8],
) -> Result<()> {
    let payload = t.recv(src, tag)?;
    copy_checked(src, &payload, dst)
}

fn copy_checked(src: Rank, payload: &[u8], dst: &mut [u8]) -> Result<()> {
    if payload.len() != dst.len() {
        return Err(CollectiveError::Truncated { src, expected: dst.len(), got: payload.len() });
    }
    dst.copy_from_slice(payload);
    Ok(())
}

/// Whole-message broadcast along a binomial tree rooted at `group.root()`.
pub fn bcast_binomial<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let tag = t.next_tag();
    binomial_tagged(buffer, group, t, tag)
}

fn binomial_tagged<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    t: &mut T,
    tag: Tag,
) -> Result<()> {
    let size = group.size();
    let rel = group.relative_rank(t.rank())?;
    if rel != 0 {
        let parent = group.absolute_rank(binomial_parent(rel))?;
        recv_into(t, parent, tag, buffer)?;
    }
    for child in binomial_children(rel, size) {
        t.send(group.absolute_rank(child)?, tag, buffer)?;
    }
    Ok(())
}

/// Binomial scatter: relative rank `r` ends up holding the chunks of its
/// subtree, `[r, r + lowbit(r))` clipped to the group.
pub fn scatter_binomial<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    layout: &ChunkLayout,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let tag = t.next_tag();
    scatter_tagged(buffer, group, layout, t, tag)
}

fn scatter_tagged<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    layout: &ChunkLayout,
    t: &mut T,
    tag: Tag,
) -> Result<()> {
    debug_assert_eq!(layout.chunk_count(), group.size());
    let size = group.size();
    let rel = group.relative_rank(t.rank())?;
    if rel != 0 {
        let parent = group.absolute_rank(binomial_parent(rel))?;
        let range = layout.byte_range(owned_range_after_scatter(rel, size));
        recv_into(t, parent, tag, &mut buffer[range])?;
    }
    for child in binomial_children(rel, size) {
        let range = layout.byte_range(owned_range_after_scatter(child, size));
        t.send(group.absolute_rank(child)?, tag, &buffer[range])?;
    }
    Ok(())
}

/// Enclosed ring: every rank forwards in each of the `P - 1` iterations,
/// whether or not its right neighbour already holds the chunk.
pub fn allgather_ring_native<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    layout: &ChunkLayout,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let tag = t.next_tag();
    ring_tagged(buffer, group, layout, t, tag, RingKind::Native)
}

/// Non-enclosed ring: links go quiet once the downstream rank holds
/// everything its upstream neighbour could still forward.
pub fn allgather_ring_tuned<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    layout: &ChunkLayout,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let tag = t.next_tag();
    ring_tagged(buffer, group, layout, t, tag, RingKind::Tuned)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RingKind {
    Native,
    Tuned,
}

fn ring_tagged<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    layout: &ChunkLayout,
    t: &mut T,
    tag: Tag,
    kind: RingKind,
) -> Result<()> {
    let size = group.size();
    if size < 2 {
        return Ok(());
    }
    let rank = t.rank();
    let plan = compute_ring_plan(group.relative_rank(rank)?, group)?;
    let (left, right) = (plan.left, plan.right);

    let mut j = rank;
    let mut jnext = left;
    for i in 1..size {
        let send = layout.byte_range(ChunkRange::single(group.relative_rank(j)?));
        let recv = layout.byte_range(ChunkRange::single(group.relative_rank(jnext)?));
        let (sends, recvs) = match kind {
            RingKind::Native => (true, true),
            RingKind::Tuned => (plan.sends_at(i), plan.receives_at(i)),
        };
        match (sends, recvs) {
            (true, true) => {
                let payload = t.sendrecv(right, &buffer[send], left, tag)?;
                copy_checked(left, &payload, &mut buffer[recv])?;
            }
            (true, false) => t.send(right, tag, &buffer[send])?,
            (false, true) => recv_into(t, left, tag, &mut buffer[recv])?,
            (false, false) => unreachable!("every rank acts in every ring iteration"),
        }
        j = jnext;
        jnext = (size + jnext - 1) % size;
    }
    Ok(())
}

/// Binomial scatter followed by the tuned ring allgather.
pub fn bcast_opt<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let tag = t.next_tag();
    scatter_ring_tagged(buffer, group, t, tag, RingKind::Tuned)
}

/// Binomial scatter followed by the enclosed ring allgather.
pub fn bcast_native<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let tag = t.next_tag();
    scatter_ring_tagged(buffer, group, t, tag, RingKind::Native)
}

fn scatter_ring_tagged<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    t: &mut T,
    tag: Tag,
    kind: RingKind,
) -> Result<()> {
    if group.size() == 1 {
        return Ok(());
    }
    let layout = ChunkLayout::for_group(buffer.len(), group);
    scatter_tagged(buffer, group, &layout, t, tag)?;
    ring_tagged(buffer, group, &layout, t, tag + 1, kind)
}

/// Assignment of ranks to shared-memory nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMap {
    nodes: Vec<Vec<Rank>>,
}

impl NodeMap {
    /// `nodes[n]` lists the ranks placed on node `n`.
    pub fn from_nodes(mut nodes: Vec<Vec<Rank>>) -> Self {
        nodes.iter_mut().for_each(|n| n.sort_unstable());
        Self { nodes }
    }

    /// `assignment[rank]` is the node of `rank`; node ids must be dense.
    pub fn from_assignment(assignment: &[usize]) -> Self {
        let count = assignment.iter().max().map_or(0, |m| m + 1);
        let mut nodes = vec![Vec::new(); count];
        for (rank, &node) in assignment.iter().enumerate() {
            nodes[node].push(rank);
        }
        Self { nodes }
    }

    /// Consecutive ranks filled `per_node` at a time.
    pub fn blocked(size: usize, per_node: usize) -> Self {
        assert!(per_node > 0, "nodes must hold at least one rank");
        Self {
            nodes: (0..size)
                .collect::<Vec<_>>()
                .chunks(per_node)
                .map(<[Rank]>::to_vec)
                .collect(),
        }
    }

    pub fn nodes(&self) -> &[Vec<Rank>] {
        &self.nodes
    }

    pub fn node_of(&self, rank: Rank) -> Option<usize> {
        self.nodes.iter().position(|n| n.binary_search(&rank).is_ok())
    }

    pub fn validate(&self, group: &ProcGroup) -> Result<(), DomainError> {
        let mut seen = vec![false; group.size()];
        for (n, ranks) in self.nodes.iter().enumerate() {
            if ranks.is_empty() {
                return Err(DomainError::NodeMap(format!("node {n} has no ranks")));
            }
            for &r in ranks {
                if r >= group.size() {
                    return Err(DomainError::NodeMap(format!(
                        "rank {r} on node {n} is outside a group of {}",
                        group.size()
                    )));
                }
                if std::mem::replace(&mut seen[r], true) {
                    return Err(DomainError::NodeMap(format!("rank {r} mapped twice")));
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(r) => Err(DomainError::NodeMap(format!("rank {r} is not mapped to a node"))),
            None => Ok(()),
        }
    }

    /// Leader of each node: the root on its own node, the lowest rank elsewhere.
    pub fn leaders(&self, root: Rank) -> Vec<Rank> {
        self.nodes
            .iter()
            .map(|n| if n.contains(&root) { root } else { n[0] })
            .collect()
    }
}

/// Layout of the three SMP phases for one `(group, node map)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmpPlan {
    /// Ranks on the root's node, in ascending order.
    pub root_node: Vec<Rank>,
    /// Node leaders in ascending rank order.
    pub leaders: Vec<Rank>,
    /// `(members, leader)` of every node other than the root's.
    pub other_nodes: Vec<(Vec<Rank>, Rank)>,
}

impl SmpPlan {
    pub fn new(group: &ProcGroup, node_map: &NodeMap) -> Result<Self, DomainError> {
        node_map.validate(group)?;
        let root = group.root();
        let root_node_id = node_map.node_of(root).expect("validated map covers the root");
        let leaders_by_node = node_map.leaders(root);
        let mut leaders = leaders_by_node.clone();
        leaders.sort_unstable();
        let other_nodes = node_map
            .nodes()
            .iter()
            .zip(&leaders_by_node)
            .enumerate()
            .filter(|(n, _)| *n != root_node_id)
            .map(|(_, (members, &leader))| (members.clone(), leader))
            .collect();
        Ok(Self {
            root_node: node_map.nodes()[root_node_id].clone(),
            leaders,
            other_nodes,
        })
    }

    /// Subgroup over `members` rooted at `root`, both in parent ranks.
    pub fn subgroup(members: &[Rank], root: Rank) -> ProcGroup {
        let local_root = members.iter().position(|&r| r == root).expect("root is a member");
        ProcGroup::new(members.len(), local_root).expect("non-empty member list")
    }
}

/// Three-phase broadcast: binomial on the root's node, tuned scatter-ring
/// among node leaders, then binomial on every other node from its leader.
pub fn bcast_smp_aware<T: Transport + ?Sized>(
    buffer: &mut [u8],
    group: &ProcGroup,
    node_map: &NodeMap,
    t: &mut T,
) -> Result<()> {
    check_size(group, t)?;
    let plan = SmpPlan::new(group, node_map)?;
    let base = t.next_tag();
    let root = group.root();

    if let Some(mut sub) = Subgroup::new(t, &plan.root_node, base + 1) {
        let g = SmpPlan::subgroup(&plan.root_node, root);
        let tag = sub.next_tag();
        binomial_tagged(buffer, &g, &mut sub, tag)?;
    }
    if let Some(mut sub) = Subgroup::new(t, &plan.leaders, base + 2) {
        let g = SmpPlan::subgroup(&plan.leaders, root);
        let tag = sub.next_tag();
        scatter_ring_tagged(buffer, &g, &mut sub, tag, RingKind::Tuned)?;
    }
    for (members, leader) in &plan.other_nodes {
        if let Some(mut sub) = Subgroup::new(t, members, base + 1) {
            let g = SmpPlan::subgroup(members, *leader);
            let tag = sub.next_tag();
            binomial_tagged(buffer, &g, &mut sub, tag)?;
        }
    }
    Ok(())
}

/// Runs `choice`; `SmpAware` needs a node map.
pub fn broadcast<T: Transport + ?Sized>(
    choice: AlgorithmChoice,
    buffer: &mut [u8],
    group: &ProcGroup,
    node_map: Option<&NodeMap>,
    t: &mut T,
) -> Result<()> {
    match choice {
        AlgorithmChoice::Binomial => bcast_binomial(buffer, group, t),
        AlgorithmChoice::ScatterRingNative => bcast_native(buffer, group, t),
        AlgorithmChoice::ScatterRingTuned => bcast_opt(buffer, group, t),
        AlgorithmChoice::SmpAware => {
            let map = node_map.ok_or_else(|| DomainError::NodeMap("no node map supplied".into()))?;
            bcast_smp_aware(buffer, group, map, t)
        }
    }
}

/// Fan-in to rank 0 followed by fan-out, on a reserved tag.
pub fn barrier<T: Transport + ?Sized>(t: &mut T) -> Result<()> {
    let (rank, size) = (t.rank(), t.size());
    if rank == 0 {
        for peer in 1..size {
            t.recv(peer, BARRIER_TAG)?;
        }
        for peer in 1..size {
            t.send(peer, BARRIER_TAG, &[])?;
        }
    } else {
        t.send(0, BARRIER_TAG, &[])?;
        t.recv(0, BARRIER_TAG)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::InProcess;

    fn source(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i * 31 + 7) as u8).collect()
    }

    fn run_bcast(
        size: usize,
        root: usize,
        nbytes: usize,
        f: impl Fn(&mut [u8], &ProcGroup, &mut crate::transport::InProcEndpoint) -> Result<()> + Sync,
    ) -> Vec<Vec<u8>> {
        let group = ProcGroup::new(size, root).unwrap();
        let src = source(nbytes);
        InProcess::run(size, |ep| {
            let mut buf = if ep.rank() == root { src.clone() } else { vec![0xEE; nbytes] };
            f(&mut buf, &group, ep).unwrap();
            buf
        })
    }

    #[test]
    fn selection_thresholds() {
        let g = |p| ProcGroup::new(p, 0).unwrap();
        assert_eq!(select_algorithm(12288, &g(9)), AlgorithmChoice::ScatterRingTuned);
        assert_eq!(select_algorithm(524288, &g(16)), AlgorithmChoice::ScatterRingTuned);
        assert_eq!(select_algorithm(100, &g(64)), AlgorithmChoice::Binomial);
        assert_eq!(select_algorithm(12287, &g(9)), AlgorithmChoice::Binomial);
        assert_eq!(select_algorithm(12288, &g(16)), AlgorithmChoice::Binomial);
        assert_eq!(select_algorithm(524287, &g(16)), AlgorithmChoice::Binomial);
    }

    #[test]
    fn every_algorithm_broadcasts() {
        for (size, root, nbytes) in [(1, 0, 5), (2, 1, 3), (8, 0, 64), (10, 3, 10), (10, 9, 7), (7, 2, 0)] {
            let expect = source(nbytes);
            for out in [
                run_bcast(size, root, nbytes, bcast_binomial),
                run_bcast(size, root, nbytes, bcast_native),
                run_bcast(size, root, nbytes, bcast_opt),
                run_bcast(size, root, nbytes, |b, g, t| {
                    bcast_smp_aware(b, g, &NodeMap::blocked(size, 3), t)
                }),
            ] {
                assert!(out.iter().all(|b| *b == expect), "P={size} root={root} n={nbytes}");
            }
        }
    }

    #[test]
    fn scatter_leaves_subtree_chunks() {
        let group = ProcGroup::new(10, 0).unwrap();
        let layout = ChunkLayout::for_group(20, &group);
        let out = run_bcast(10, 0, 20, |b, g, t| scatter_binomial(b, g, &layout, t));
        let src = source(20);
        // rank 8 owns chunks 8..10, i.e. bytes 16..20
        assert_eq!(&out[8][16..20], &src[16..20]);
        assert!(out[8][..16].iter().all(|&b| b == 0xEE));
        assert_eq!(&out[4][8..16], &src[8..16]);
        assert!(out[4][16..].iter().all(|&b| b == 0xEE));
    }

    #[test]
    fn scatter_two_ranks_sends_one_message() {
        let group = ProcGroup::new(2, 0).unwrap();
        let layout = ChunkLayout::for_group(5, &group);
        let (eps, tap) = InProcess::with_tap(2);
        InProcess::run_endpoints(eps, |ep| {
            let mut buf = if ep.rank() == 0 { source(5) } else { vec![0; 5] };
            scatter_binomial(&mut buf, &group, &layout, ep).unwrap();
        });
        let envs = tap.envelopes();
        assert_eq!(envs.len(), 1);
        assert_eq!(envs[0].payload.len(), 2);
    }

    #[test]
    fn binomial_message_counts() {
        for (p, expect) in [(1, 0), (8, 7), (10, 9)] {
            let (eps, tap) = InProcess::with_tap(p);
            let group = ProcGroup::new(p, 0).unwrap();
            InProcess::run_endpoints(eps, |ep| {
                let mut buf = vec![1u8; 33];
                bcast_binomial(&mut buf, &group, ep).unwrap();
            });
            assert_eq!(tap.len(), expect);
        }
    }

    #[test]
    fn group_size_must_match_transport() {
        let mut eps = InProcess::create(2);
        let group = ProcGroup::new(3, 0).unwrap();
        let err = bcast_opt(&mut [0u8; 4], &group, &mut eps[0]).unwrap_err();
        assert!(matches!(err, CollectiveError::SizeMismatch { group: 3, transport: 2 }));
    }

    #[test]
    fn node_map_validation() {
        let g = ProcGroup::new(4, 0).unwrap();
        assert!(NodeMap::blocked(4, 2).validate(&g).is_ok());
        assert!(NodeMap::from_nodes(vec![vec![0, 1], vec![], vec![2, 3]]).validate(&g).is_err());
        assert!(NodeMap::from_nodes(vec![vec![0, 1], vec![2]]).validate(&g).is_err());
        assert!(NodeMap::from_nodes(vec![vec![0, 1], vec![1, 2, 3]]).validate(&g).is_err());
        assert!(NodeMap::from_nodes(vec![vec![0, 1, 7], vec![2, 3]]).validate(&g).is_err());
        assert!(NodeMap::from_assignment(&[0, 2, 2, 0]).validate(&g).is_err());
        assert_eq!(NodeMap::from_assignment(&[1, 0, 0, 1]).node_of(3), Some(1));
    }

    #[test]
    fn smp_rejects_bad_map() {
        let mut eps = InProcess::create(1);
        let group = ProcGroup::new(1, 0).unwrap();
        let map = NodeMap::from_nodes(vec![vec![0], vec![]]);
        let err = bcast_smp_aware(&mut [0u8; 2], &group, &map, &mut eps[0]).unwrap_err();
        assert!(matches!(err, CollectiveError::Domain(DomainError::NodeMap(_))));
    }

    #[test]
    fn smp_leaders_include_root() {
        let group = ProcGroup::new(8, 5).unwrap();
        let plan = SmpPlan::new(&group, &NodeMap::blocked(8, 4)).unwrap();
        assert_eq!(plan.root_node, vec![4, 5, 6, 7]);
        assert_eq!(plan.leaders, vec![0, 5]);
        assert_eq!(plan.other_nodes, vec![(vec![0, 1, 2, 3], 0)]);
    }

    #[test]
    fn barrier_completes() {
        let out = InProcess::run(6, |ep| {
            barrier(ep).unwrap();
            barrier(ep).unwrap();
            ep.counters().total_messages()
        });
        assert_eq!(out[0], 10);
        assert!(out[1..].iter().all(|&m| m == 2));
    }

    #[test]
    fn back_to_back_collectives_do_not_cross() {
        let group = ProcGroup::new(5, 2).unwrap();
        let out = InProcess::run(5, |ep| {
            let mut a = if ep.rank() == 2 { vec![1u8; 40] } else { vec![0; 40] };
            let mut b = if ep.rank() == 2 { vec![2u8; 40] } else { vec![0; 40] };
            bcast_opt(&mut a, &group, ep).unwrap();
            bcast_native(&mut b, &group, ep).unwrap();
            (a, b)
        });
        assert!(out.iter().all(|(a, b)| a == &vec![1u8; 40] && b == &vec![2u8; 40]));
    }
}
