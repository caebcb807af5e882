//! Sweeps behind the `collcast` binary: correctness runs, traffic tables and
//! throughput measurement over a grid of algorithms, group sizes and message
//! sizes.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collectives::{barrier, broadcast, select_algorithm, AlgorithmChoice, NodeMap};
use crate::sched::{ProcGroup, Rank};
use crate::traffic::{emit_trace, simulate, Algorithm};
use crate::transport::{CorruptingTransport, Counters, InProcess, RankTable, TcpTransport, Transport};

pub const DEFAULT_SEED: u64 = 0x5EED_CA57;
pub const DEFAULT_REPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlgoName {
    Binomial,
    Scatter,
    NativeAllgather,
    TunedAllgather,
    Native,
    Opt,
    Smp,
    Auto,
}

impl AlgoName {
    pub const ALL: [AlgoName; 8] = [
        AlgoName::Binomial,
        AlgoName::Scatter,
        AlgoName::NativeAllgather,
        AlgoName::TunedAllgather,
        AlgoName::Native,
        AlgoName::Opt,
        AlgoName::Smp,
        AlgoName::Auto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgoName::Binomial => "binomial",
            AlgoName::Scatter => "scatter",
            AlgoName::NativeAllgather => "native-allgather",
            AlgoName::TunedAllgather => "tuned-allgather",
            AlgoName::Native => "native",
            AlgoName::Opt => "opt",
            AlgoName::Smp => "smp",
            AlgoName::Auto => "auto",
        }
    }

    /// Broadcast this name stands for, if it is one.
    pub fn broadcast_choice(self, nbytes: usize, group: &ProcGroup) -> Option<AlgorithmChoice> {
        match self {
            AlgoName::Binomial => Some(AlgorithmChoice::Binomial),
            AlgoName::Native => Some(AlgorithmChoice::ScatterRingNative),
            AlgoName::Opt => Some(AlgorithmChoice::ScatterRingTuned),
            AlgoName::Smp => Some(AlgorithmChoice::SmpAware),
            AlgoName::Auto => Some(select_algorithm(nbytes, group)),
            AlgoName::Scatter | AlgoName::NativeAllgather | AlgoName::TunedAllgather => None,
        }
    }

    pub fn schedule(self, nbytes: usize, group: &ProcGroup, ranks_per_node: usize) -> Algorithm {
        match self {
            AlgoName::Scatter => Algorithm::Scatter,
            AlgoName::NativeAllgather => Algorithm::NativeAllgather,
            AlgoName::TunedAllgather => Algorithm::TunedAllgather,
            _ => match self.broadcast_choice(nbytes, group).expect("broadcast name") {
                AlgorithmChoice::Binomial => Algorithm::Binomial,
                AlgorithmChoice::ScatterRingNative => Algorithm::BcastNative,
                AlgorithmChoice::ScatterRingTuned => Algorithm::BcastOpt,
                AlgorithmChoice::SmpAware => {
                    Algorithm::SmpAware(NodeMap::blocked(group.size(), ranks_per_node))
                }
            },
        }
    }

    /// Schedule `savings_vs_native` is measured against.
    fn native_counterpart(self) -> AlgoName {
        match self {
            AlgoName::Scatter => AlgoName::Scatter,
            AlgoName::NativeAllgather | AlgoName::TunedAllgather => AlgoName::NativeAllgather,
            _ => AlgoName::Native,
        }
    }
}

impl fmt::Display for AlgoName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgoName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        AlgoName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inprocess" | "in-process" | "inproc" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub algorithms: Vec<AlgoName>,
    pub procs: Vec<usize>,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub transport: TransportKind,
    pub rank_table: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub root: Rank,
    pub ranks_per_node: usize,
    /// Flip a bit in the root's first non-empty send of every cell.
    pub inject_fault: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            algorithms: vec![AlgoName::Binomial, AlgoName::Native, AlgoName::Opt, AlgoName::Smp],
            procs: vec![2, 8, 9, 10, 16, 17],
            sizes: vec![0, 1, 12288, 524288],
            reps: DEFAULT_REPS,
            seed: DEFAULT_SEED,
            transport: TransportKind::InProcess,
            rank_table: None,
            csv: None,
            trace: None,
            root: 0,
            ranks_per_node: 4,
            inject_fault: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.reps >= 1, "repetitions must be at least 1");
        ensure!(self.ranks_per_node >= 1, "ranks per node must be at least 1");
        ensure!(!self.algorithms.is_empty(), "no algorithms selected");
        ensure!(self.procs.iter().all(|&p| p >= 1), "process counts must be at least 1");
        Ok(())
    }

    /// Root used for a group of `size`: the configured root folded into range.
    pub fn group(&self, size: usize) -> ProcGroup {
        ProcGroup::new(size, self.root % size).expect("size >= 1")
    }

    fn cells(&self) -> impl Iterator<Item = (AlgoName, usize, usize)> + '_ {
        self.algorithms.iter().flat_map(move |&a| {
            self.procs
                .iter()
                .flat_map(move |&p| self.sizes.iter().map(move |&n| (a, p, n)))
        })
    }

    fn broadcast_choice(&self, algo: AlgoName, nbytes: usize, group: &ProcGroup) -> Result<AlgorithmChoice> {
        algo.broadcast_choice(nbytes, group)
            .with_context(|| format!("`{algo}` is not a broadcast"))
    }
}

/// Deterministic source buffer for one cell.
pub fn source_bytes(seed: u64, size: usize, nbytes: usize) -> Vec<u8> {
    let mix = seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (nbytes as u64).rotate_left(32);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut buf = vec![0u8; nbytes];
    rng.fill_bytes(&mut buf);
    buf
}

/// Runs `body` once per rank over the chosen transport and collects the
/// results in rank order.
pub fn run_ranks<R, F>(spec: &SweepSpec, size: usize, body: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut dyn Transport) -> R + Sync,
{
    match spec.transport {
        TransportKind::InProcess => Ok(InProcess::run(size, |ep| body(ep))),
        TransportKind::Tcp => {
            let group = match &spec.rank_table {
                Some(path) => {
                    let table = RankTable::load(path)
                        .with_context(|| format!("loading rank table {}", path.display()))?;
                    TcpTransport::local_group(&table.truncated(size)?)?
                }
                None => TcpTransport::loopback_group(size)?,
            };
            let body = &body;
            Ok(thread::scope(|s| {
                let handles: Vec<_> = group
                    .into_iter()
                    .map(|mut t| s.spawn(move || body(&mut t)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                    .collect()
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub algo: AlgoName,
    pub size: usize,
    pub nbytes: usize,
    pub rank: Rank,
    /// First differing byte, or `None` when the rank failed outright.
    pub offset: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} P={} nbytes={}: rank {} ", self.algo, self.size, self.nbytes, self.rank)?;
        match self.offset {
            Some(o) => write!(f, "diverges at offset {o}: {}", self.detail),
            None => write!(f, "failed: {}", self.detail),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOutcome {
    pub cells: usize,
    pub failure: Option<Divergence>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Broadcasts a seeded random buffer in every cell and checks every rank's
/// result byte for byte, and the transport counters against the simulated
/// schedule. Stops at the first failing cell.
pub fn run_verify<W: Write>(spec: &SweepSpec, out: &mut W) -> Result<VerifyOutcome> {
    spec.validate()?;
    let mut outcome = VerifyOutcome::default();
    for (algo, size, nbytes) in spec.cells() {
        let group = spec.group(size);
        let choice = spec.broadcast_choice(algo, nbytes, &group)?;
        let node_map = NodeMap::blocked(size, spec.ranks_per_node);
        let source = source_bytes(spec.seed, size, nbytes);

        let results = run_ranks(spec, size, |t| {
            let mut buf = if t.rank() == group.root() {
                source.clone()
            } else {
                source.iter().map(|b| !b).collect()
            };
            let res = if spec.inject_fault && t.rank() == group.root() {
                let mut tap = CorruptingTransport::new(&mut *t, 0);
                broadcast(choice, &mut buf, &group, Some(&node_map), &mut tap)
            } else {
                broadcast(choice, &mut buf, &group, Some(&node_map), t)
            };
            (res.map(|_| buf), t.counters().clone())
        })?;
        outcome.cells += 1;

        let fail = |rank, offset, detail: String| Divergence { algo, size, nbytes, rank, offset, detail };
        let mut failure = None;
        for (rank, (res, _)) in results.iter().enumerate() {
            match res {
                Err(e) => failure = Some(fail(rank, None, e.to_string())),
                Ok(buf) => {
                    if let Some(off) = buf.iter().zip(&source).position(|(a, b)| a != b) {
                        failure = Some(fail(
                            rank,
                            Some(off),
                            format!("expected {:#04x}, found {:#04x}", source[off], buf[off]),
                        ));
                    }
                }
            }
            if failure.is_some() {
                break;
            }
        }
        if failure.is_none() {
            let sim = simulate(&algo.schedule(nbytes, &group, spec.ranks_per_node), &group, nbytes)?;
            let counters: Vec<Counters> = results.into_iter().map(|(_, c)| c).collect();
            if let Err(detail) = sim.report.agrees_with(&counters) {
                failure = Some(fail(0, None, format!("counter/schedule disagreement: {detail}")));
            }
        }

        match failure {
            None => writeln!(out, "ok   {algo:<8} P={size:<4} nbytes={nbytes}")?,
            Some(d) => {
                writeln!(out, "FAIL {d}")?;
                outcome.failure = Some(d);
                return Ok(outcome);
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficRow {
    pub algo: AlgoName,
    pub procs: usize,
    pub nbytes: usize,
    pub messages: usize,
    pub bytes: usize,
    pub zero_len: usize,
    pub steps: usize,
    pub savings_vs_native: i64,
}

pub const TRAFFIC_HEADER: &str = "algo,P,nbytes,messages,bytes,zero_len,steps,savings_vs_native";

/// Simulated traffic for every cell. When `spec.trace` is set, the events
/// of every cell are appended to it in cell order.
pub fn run_traffic(spec: &SweepSpec) -> Result<Vec<TrafficRow>> {
    spec.validate()?;
    let mut trace = match &spec.trace {
        Some(path) => Some(std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => None,
    };
    let mut rows = Vec::new();
    for (algo, size, nbytes) in spec.cells() {
        let group = spec.group(size);
        let sim = simulate(&algo.schedule(nbytes, &group, spec.ranks_per_node), &group, nbytes)?;
        let baseline = algo.native_counterpart();
        let native_messages = if baseline == algo {
            sim.report.total_messages
        } else {
            simulate(&baseline.schedule(nbytes, &group, spec.ranks_per_node), &group, nbytes)?
                .report
                .total_messages
        };
        if let Some(w) = trace.as_mut() {
            emit_trace(&sim.events, w)?;
        }
        let r = &sim.report;
        rows.push(TrafficRow {
            algo,
            procs: size,
            nbytes,
            messages: r.total_messages,
            bytes: r.total_bytes,
            zero_len: r.zero_length_messages,
            steps: r.steps,
            savings_vs_native: native_messages as i64 - r.total_messages as i64,
        });
    }
    Ok(rows)
}

pub fn write_traffic_csv<W: Write>(rows: &[TrafficRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{TRAFFIC_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.algo, r.procs, r.nbytes, r.messages, r.bytes, r.zero_len, r.steps, r.savings_vs_native
        )?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub algo: AlgoName,
    pub procs: usize,
    pub nbytes: usize,
    pub reps: usize,
    pub median_mbps: f64,
    pub best_mbps: f64,
    /// Point-to-point messages one broadcast sends, from the schedule.
    pub messages: usize,
}

pub const BENCH_HEADER: &str = "algo,P,nbytes,reps,median_MBps,best_MBps";

const MIB: f64 = (1u64 << 20) as f64;

/// Barrier, then `reps` timed broadcasts per cell; each repetition ends in a
/// barrier so the time covers the slowest rank. Throughput is in MiB/s.
pub fn run_bench(spec: &SweepSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for (algo, size, nbytes) in spec.cells() {
        let group = spec.group(size);
        let choice = spec.broadcast_choice(algo, nbytes, &group)?;
        let node_map = NodeMap::blocked(size, spec.ranks_per_node);
        let source = source_bytes(spec.seed, size, nbytes);
        let timings = run_ranks(spec, size, |t| -> Result<Vec<f64>> {
            let mut buf = if t.rank() == group.root() { source.clone() } else { vec![0; nbytes] };
            barrier(t)?;
            let mut secs = Vec::with_capacity(spec.reps);
            for _ in 0..spec.reps {
                let start = Instant::now();
                broadcast(choice, &mut buf, &group, Some(&node_map), t)?;
                barrier(t)?;
                secs.push(start.elapsed().as_secs_f64());
            }
            Ok(secs)
        })?;
        let mut secs = timings.into_iter().next().expect("at least one rank")?;
        secs.sort_by(f64::total_cmp);
        let rate = |s: f64| if s > 0.0 { nbytes as f64 / MIB / s } else { f64::INFINITY };
        let median = if secs.len() % 2 == 1 {
            secs[secs.len() / 2]
        } else {
            (secs[secs.len() / 2 - 1] + secs[secs.len() / 2]) / 2.0
        };
        let sim = simulate(&algo.schedule(nbytes, &group, spec.ranks_per_node), &group, nbytes)?;
        rows.push(BenchRow {
            algo,
            procs: size,
            nbytes,
            reps: spec.reps,
            median_mbps: rate(median),
            best_mbps: rate(secs[0]),
            messages: sim.report.total_messages,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.3},{:.3}",
            r.algo, r.procs, r.nbytes, r.reps, r.median_mbps, r.best_mbps
        )?;
    }
    out.flush()
}

/// Pairs up `native` and `opt` rows of the same cell and checks that the
/// tuned broadcast sends fewer messages wherever `P >= 3`.
pub fn bench_message_comparison(rows: &[BenchRow]) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut pairs = Vec::new();
    for opt in rows.iter().filter(|r| r.algo == AlgoName::Opt) {
        let Some(native) = rows
            .iter()
            .find(|r| r.algo == AlgoName::Native && r.procs == opt.procs && r.nbytes == opt.nbytes)
        else {
            continue;
        };
        if opt.procs >= 3 && opt.messages >= native.messages {
            bail!(
                "P={} nbytes={}: tuned sends {} messages, native {}",
                opt.procs, opt.nbytes, opt.messages, native.messages
            );
        }
        pairs.push((opt.procs, opt.nbytes, native.messages, opt.messages));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algo_names_round_trip() {
        for a in AlgoName::ALL {
            assert_eq!(a.as_str().parse::<AlgoName>(), Ok(a));
        }
        assert_eq!("Tuned_Allgather".parse::<AlgoName>(), Ok(AlgoName::TunedAllgather));
        assert!("ring".parse::<AlgoName>().is_err());
    }

    #[test]
    fn transport_kind_parses() {
        assert_eq!("tcp".parse::<TransportKind>(), Ok(TransportKind::Tcp));
        assert_eq!("inprocess".parse::<TransportKind>(), Ok(TransportKind::InProcess));
        assert!("udp".parse::<TransportKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = SweepSpec::default();
        assert!(spec.validate().is_ok());
        spec.reps = 0;
        assert!(spec.validate().is_err());
        let spec = SweepSpec { procs: vec![0], ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn source_bytes_are_seeded() {
        assert_eq!(source_bytes(1, 8, 100), source_bytes(1, 8, 100));
        assert_ne!(source_bytes(1, 8, 100), source_bytes(2, 8, 100));
        assert!(source_bytes(1, 8, 0).is_empty());
    }

    #[test]
    fn traffic_rows_match_counts() {
        let spec = SweepSpec {
            algorithms: vec![AlgoName::NativeAllgather, AlgoName::TunedAllgather],
            procs: vec![2, 8, 10],
            sizes: vec![0],
            ..Default::default()
        };
        let rows = run_traffic(&spec).unwrap();
        let find = |a, p| rows.iter().find(|r| r.algo == a && r.procs == p).unwrap();
        assert_eq!(find(AlgoName::TunedAllgather, 8).savings_vs_native, 12);
        assert_eq!(find(AlgoName::TunedAllgather, 10).savings_vs_native, 15);
        assert_eq!(find(AlgoName::NativeAllgather, 2).savings_vs_native, 0);
        assert_eq!(find(AlgoName::TunedAllgather, 8).messages, 44);
    }

    #[test]
    fn verify_rejects_non_broadcast() {
        let spec = SweepSpec { algorithms: vec![AlgoName::Scatter], procs: vec![2], sizes: vec![4], ..Default::default() };
        assert!(run_verify(&spec, &mut Vec::new()).is_err());
    }

    #[test]
    fn bench_single_rep_median_is_best() {
        let spec = SweepSpec {
            algorithms: vec![AlgoName::Opt],
            procs: vec![4],
            sizes: vec![4096],
            reps: 1,
            ..Default::default()
        };
        let rows = run_bench(&spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].median_mbps, rows[0].best_mbps);
    }
}
