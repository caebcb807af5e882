#![allow(dead_code)]

use collcast::harness::source_bytes;
use collcast::sched::owned_range_after_scatter;
use collcast::transport::{Counters, InProcess, Transport};
use collcast::{
    allgather_ring_native, allgather_ring_tuned, bcast_binomial, bcast_native, bcast_opt,
    bcast_smp_aware, scatter_binomial, Algorithm, ChunkLayout, ProcGroup,
};

pub const SEED: u64 = 0xC0FFEE;

pub fn group(size: usize, root: usize) -> ProcGroup {
    ProcGroup::new(size, root % size).unwrap()
}

/// Buffer a rank starts with: the root (or, for a standalone allgather, the
/// rank's post-scatter chunks) holds source bytes, everything else is the
/// bitwise complement so untouched bytes always show up as mismatches.
pub fn initial_buffer(alg: &Algorithm, group: &ProcGroup, rank: usize, source: &[u8]) -> Vec<u8> {
    let mut buf: Vec<u8> = source.iter().map(|b| !b).collect();
    if rank == group.root() {
        buf.copy_from_slice(source);
    } else if matches!(alg, Algorithm::NativeAllgather | Algorithm::TunedAllgather) {
        let layout = ChunkLayout::for_group(source.len(), group);
        let rel = group.relative_rank(rank).unwrap();
        let range = layout.byte_range(owned_range_after_scatter(rel, group.size()));
        buf[range.clone()].copy_from_slice(&source[range]);
    }
    buf
}

/// Bytes rank `rank` must hold afterwards; `None` where the content is
/// unconstrained (outside a rank's subtree after a bare scatter).
pub fn expected(alg: &Algorithm, group: &ProcGroup, rank: usize, source: &[u8]) -> Vec<Option<u8>> {
    if let Algorithm::Scatter = alg {
        let layout = ChunkLayout::for_group(source.len(), group);
        let rel = group.relative_rank(rank).unwrap();
        let range = layout.byte_range(owned_range_after_scatter(rel, group.size()));
        return source
            .iter()
            .enumerate()
            .map(|(i, &b)| (rel == 0 || range.contains(&i)).then_some(b))
            .collect();
    }
    source.iter().map(|&b| Some(b)).collect()
}

pub fn execute<T: Transport + ?Sized>(alg: &Algorithm, group: &ProcGroup, buf: &mut [u8], t: &mut T) {
    let layout = ChunkLayout::for_group(buf.len(), group);
    match alg {
        Algorithm::Binomial => bcast_binomial(buf, group, t),
        Algorithm::Scatter => scatter_binomial(buf, group, &layout, t),
        Algorithm::NativeAllgather => allgather_ring_native(buf, group, &layout, t),
        Algorithm::TunedAllgather => allgather_ring_tuned(buf, group, &layout, t),
        Algorithm::BcastNative => bcast_native(buf, group, t),
        Algorithm::BcastOpt => bcast_opt(buf, group, t),
        Algorithm::SmpAware(map) => bcast_smp_aware(buf, group, map, t),
    }
    .unwrap_or_else(|e| panic!("{} P={} rank {}: {e}", alg.name(), group.size(), t.rank()))
}

/// Runs `alg` on the in-process transport; returns final buffers and counters.
pub fn run_inproc(alg: &Algorithm, group: &ProcGroup, source: &[u8]) -> (Vec<Vec<u8>>, Vec<Counters>) {
    InProcess::run(group.size(), |ep| {
        let mut buf = initial_buffer(alg, group, ep.rank(), source);
        execute(alg, group, &mut buf, ep);
        (buf, ep.counters().clone())
    })
    .into_iter()
    .unzip()
}

/// First `(rank, offset)` whose byte differs from what it should be.
pub fn first_divergence(
    alg: &Algorithm,
    group: &ProcGroup,
    source: &[u8],
    buffers: &[Vec<u8>],
) -> Option<(usize, usize)> {
    buffers.iter().enumerate().find_map(|(rank, buf)| {
        expected(alg, group, rank, source)
            .iter()
            .zip(buf)
            .position(|(e, b)| e.is_some_and(|e| e != *b))
            .map(|off| (rank, off))
    })
}

pub fn payload(size: usize, nbytes: usize) -> Vec<u8> {
    source_bytes(SEED, size, nbytes)
}
