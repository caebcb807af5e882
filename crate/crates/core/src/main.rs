use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use collcast::harness::{
    bench_message_comparison, run_bench, run_traffic, run_verify, write_bench_csv,
    write_traffic_csv, AlgoName, SweepSpec, TransportKind, DEFAULT_REPS, DEFAULT_SEED,
};

#[derive(Parser)]
#[command(name = "collcast", version, about = "Broadcast verification, traffic sweeps and throughput runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell on a real transport and compare all buffers with the root's.
    Verify,
    /// Replay schedules and tabulate message counts.
    Traffic,
    /// Time repeated broadcasts and report MiB/s.
    Bench,
}

#[derive(Args)]
struct Opts {
    /// Algorithms: binomial, scatter, native-allgather, tuned-allgather, native, opt, smp, auto.
    #[arg(long, global = true, value_delimiter = ',')]
    algo: Option<Vec<AlgoName>>,
    /// Process counts.
    #[arg(long, global = true, value_delimiter = ',')]
    np: Option<Vec<usize>>,
    /// Message sizes in bytes.
    #[arg(long, global = true, value_delimiter = ',')]
    bytes: Option<Vec<usize>>,
    #[arg(long, global = true, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, global = true, env = "COLLCAST_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// inprocess or tcp.
    #[arg(long, global = true, default_value = "inprocess")]
    transport: TransportKind,
    /// `rank host:port` lines, used in tcp mode.
    #[arg(long, global = true)]
    rank_table: Option<PathBuf>,
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Write one `step src dst chunk bytes` line per simulated transfer.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    root: usize,
    /// Node size for the smp algorithm (ranks are placed in blocks).
    #[arg(long, global = true, default_value_t = 4)]
    ranks_per_node: usize,
    /// Corrupt the root's first outgoing payload in every verify cell.
    #[arg(long, global = true, hide = true)]
    inject_fault: bool,
}

impl Opts {
    fn spec(self, command: &Command) -> SweepSpec {
        let (algos, procs, sizes) = match command {
            Command::Verify => {
                let d = SweepSpec::default();
                (d.algorithms, d.procs, d.sizes)
            }
            Command::Traffic => (
                vec![AlgoName::NativeAllgather, AlgoName::TunedAllgather, AlgoName::Native, AlgoName::Opt],
                vec![2, 4, 8, 9, 10, 16, 17, 32, 33, 64, 65],
                vec![524288],
            ),
            Command::Bench => (vec![AlgoName::Native, AlgoName::Opt], vec![8], vec![1 << 20]),
        };
        SweepSpec {
            algorithms: self.algo.unwrap_or(algos),
            procs: self.np.unwrap_or(procs),
            sizes: self.bytes.unwrap_or(sizes),
            reps: self.reps,
            seed: self.seed,
            transport: self.transport,
            rank_table: self.rank_table,
            csv: self.csv,
            trace: self.trace,
            root: self.root,
            ranks_per_node: self.ranks_per_node,
            inject_fault: self.inject_fault,
        }
    }
}

fn csv_sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let spec = cli.opts.spec(&cli.command);
    match cli.command {
        Command::Verify => {
            let outcome = run_verify(&spec, &mut io::stdout().lock())?;
            if let Some(d) = &outcome.failure {
                eprintln!("verification failed: {d}");
                return Ok(ExitCode::FAILURE);
            }
            eprintln!("{} cells verified", outcome.cells);
        }
        Command::Traffic => {
            let rows = run_traffic(&spec)?;
            write_traffic_csv(&rows, &mut csv_sink(&spec.csv)?)?;
        }
        Command::Bench => {
            let rows = run_bench(&spec)?;
            write_bench_csv(&rows, &mut csv_sink(&spec.csv)?)?;
            for (p, n, native, opt) in bench_message_comparison(&rows)? {
                let ratio = rows
                    .iter()
                    .filter(|r| r.procs == p && r.nbytes == n)
                    .map(|r| (r.algo, r.median_mbps))
                    .collect::<Vec<_>>();
                let native_bw = ratio.iter().find(|(a, _)| *a == AlgoName::Native).map(|x| x.1);
                let opt_bw = ratio.iter().find(|(a, _)| *a == AlgoName::Opt).map(|x| x.1);
                let speedup = match (native_bw, opt_bw) {
                    (Some(nb), Some(ob)) if nb > 0.0 => format!("{:.3}", ob / nb),
                    _ => "n/a".into(),
                };
                eprintln!("P={p} nbytes={n}: messages native={native} opt={opt}, median speedup {speedup}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
