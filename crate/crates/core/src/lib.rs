//! Scatter/ring-allgather broadcast with a non-enclosed tuned ring.
//!
//! - [`sched`]: rank arithmetic, chunk geometry, scatter schedule, ring plans.
//! - [`transport`]: blocking point-to-point messaging (in-process and TCP).
//! - [`collectives`]: executable broadcasts over any transport.
//! - [`traffic`]: payload-free schedule replay and traffic accounting.
//! - [`harness`]: the verify / traffic / bench sweeps behind the CLI.

pub mod collectives;
pub mod harness;
pub mod sched;
pub mod traffic;
pub mod transport;

pub use collectives::{
    allgather_ring_native, allgather_ring_tuned, bcast_binomial, bcast_native, bcast_opt,
    bcast_smp_aware, broadcast, scatter_binomial, select_algorithm, AlgorithmChoice,
    CollectiveError, NodeMap,
};
pub use sched::{
    build_scatter_schedule, chunk_extent, compute_ring_plan, owned_chunks_after_scatter,
    relative_rank, ChunkLayout, ChunkRange, ChunkSet, DomainError, ProcGroup, Rank, RingPlan, Tail,
    TransferEvent,
};
pub use traffic::{check_matching, emit_trace, simulate, Algorithm, TrafficReport};
pub use transport::{InProcess, TcpTransport, Transport, TransportError};
