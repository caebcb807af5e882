//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p collcast --test acceptance -- --nocapture` to see them.

mod common;

use std::time::{Duration, Instant};

use collcast::harness::{bench_message_comparison, run_bench, AlgoName, SweepSpec};
use collcast::sched::ceil_log2;
use collcast::{check_matching, compute_ring_plan, simulate, Algorithm, NodeMap, ProcGroup};

use common::{first_divergence, group, payload, run_inproc};

const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const COUNT_BUDGET: Duration = Duration::from_secs(1);

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn messages(alg: &Algorithm, g: &ProcGroup) -> usize {
    simulate(alg, g, g.size()).unwrap().report.total_messages
}

fn exact_counts() -> Outcome {
    let start = Instant::now();
    let cases = [
        (Algorithm::NativeAllgather, 8, 56),
        (Algorithm::NativeAllgather, 10, 90),
        (Algorithm::TunedAllgather, 8, 44),
        (Algorithm::TunedAllgather, 10, 75),
    ];
    for (alg, p, want) in cases {
        let got = messages(&alg, &group(p, 0));
        if got != want {
            return Err(format!("{} P={p}: {got} messages, expected {want}", alg.name()));
        }
    }
    let elapsed = start.elapsed();
    if elapsed > COUNT_BUDGET {
        return Err(format!("counts correct but took {elapsed:?} (budget {COUNT_BUDGET:?})"));
    }
    Ok(format!("56/90 native, 44/75 tuned, tolerance 0, {elapsed:?}"))
}

fn savings_law() -> Outcome {
    let mut seen = Vec::new();
    for p in [2usize, 4, 8, 16, 32, 64] {
        let g = group(p, 0);
        let saved = messages(&Algorithm::NativeAllgather, &g) - messages(&Algorithm::TunedAllgather, &g);
        let law = p / 2 * ceil_log2(p) as usize;
        if saved != law {
            return Err(format!("P={p}: native - tuned = {saved}, (P/2)log2 P = {law}"));
        }
        seen.push(format!("{p}:{saved}"));
    }
    Ok(format!("savings {} match (P/2)log2 P, tolerance 0", seen.join(" ")))
}

fn oracle_sizes(p: usize) -> [usize; 9] {
    [0, 1, p - 1, p, p + 1, 12288, 524287, 524288, 1000003]
}

fn broadcast_oracle() -> Outcome {
    let start = Instant::now();
    let mut cells = 0;
    for p in (1..=64).chain([65]) {
        let algs = [
            Algorithm::Binomial,
            Algorithm::BcastNative,
            Algorithm::BcastOpt,
            Algorithm::SmpAware(NodeMap::blocked(p, 4)),
        ];
        for (i, nbytes) in oracle_sizes(p).into_iter().enumerate() {
            let g = group(p, i * 5);
            let source = payload(p, nbytes);
            for alg in &algs {
                let (buffers, _) = run_inproc(alg, &g, &source);
                if let Some((rank, off)) = first_divergence(alg, &g, &source, &buffers) {
                    return Err(format!(
                        "{} P={p} root={} nbytes={nbytes}: rank {rank} diverges at offset {off}",
                        alg.name(),
                        g.root()
                    ));
                }
                cells += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > ORACLE_BUDGET {
        return Err(format!("{cells} cells byte-exact but took {elapsed:?} (budget {ORACLE_BUDGET:?})"));
    }
    Ok(format!("{cells} cells over P=1..=65 byte-exact, {elapsed:.1?}"))
}

fn structural() -> Outcome {
    for p in 1..=65usize {
        for root in [0, p / 2, p - 1] {
            let g = group(p, root);
            let steps = |alg: &Algorithm| simulate(alg, &g, 3 * p + 1).unwrap().report.steps;
            for alg in [Algorithm::NativeAllgather, Algorithm::TunedAllgather] {
                if steps(&alg) != p - 1 {
                    return Err(format!("{} P={p}: {} iterations, expected {}", alg.name(), steps(&alg), p - 1));
                }
            }
            let rounds = ceil_log2(p) as usize;
            for alg in [Algorithm::Scatter, Algorithm::Binomial] {
                if steps(&alg) != rounds {
                    return Err(format!("{} P={p}: {} rounds, expected {rounds}", alg.name(), steps(&alg)));
                }
            }
            if p >= 2 {
                let last = compute_ring_plan(p - 1, &g).unwrap();
                if last.send_count() != 0 {
                    return Err(format!("P={p}: relative rank P-1 sends {} times", last.send_count()));
                }
            }
            let last_abs = g.absolute_rank(p.saturating_sub(1)).unwrap();
            for alg in [Algorithm::TunedAllgather, Algorithm::BcastOpt, Algorithm::Binomial, Algorithm::Scatter] {
                let events = simulate(&alg, &g, 3 * p + 1).unwrap().events;
                if let Some(e) = events.iter().find(|e| e.dst == g.root()) {
                    return Err(format!("{} P={p}: root {} receives at step {}", alg.name(), g.root(), e.step));
                }
                if alg == Algorithm::TunedAllgather && p >= 2 {
                    if let Some(e) = events.iter().find(|e| e.src == last_abs) {
                        return Err(format!("P={p}: relative rank P-1 sends at step {}", e.step));
                    }
                }
            }
        }
    }
    Ok("P=1..=65, three roots each: P-1 ring iterations, ceil(log2 P) rounds, silent tail, silent root; tolerance 0".into())
}

fn no_duplicates() -> Outcome {
    for p in (2..=65usize).chain([96, 128, 255, 256]) {
        let g = group(p, p / 3);
        let tuned = simulate(&Algorithm::TunedAllgather, &g, p).unwrap();
        let native = simulate(&Algorithm::NativeAllgather, &g, p).unwrap();
        let tv = check_matching(&tuned.phases, &g);
        let nv = check_matching(&native.phases, &g);
        if !tv.is_valid() || !nv.is_valid() {
            return Err(format!("P={p}: matching violation {:?} / {:?}", tv.violation, nv.violation));
        }
        if tv.duplicate_receives != 0 {
            return Err(format!("P={p}: tuned ring has {} duplicate receives", tv.duplicate_receives));
        }
        let gap = nv.transfers - tv.transfers;
        if nv.duplicate_receives != gap {
            return Err(format!("P={p}: native duplicates {} != native - tuned {gap}", nv.duplicate_receives));
        }
    }
    Ok("P=2..=65,96,128,255,256: tuned duplicates 0, native duplicates = native - tuned; tolerance 0".into())
}

fn exec_sim_agreement() -> Outcome {
    let mut cells = 0;
    for p in 1..=32usize {
        let algs = [
            Algorithm::Binomial,
            Algorithm::Scatter,
            Algorithm::NativeAllgather,
            Algorithm::TunedAllgather,
            Algorithm::BcastNative,
            Algorithm::BcastOpt,
            Algorithm::SmpAware(NodeMap::blocked(p, 4)),
        ];
        for (i, nbytes) in [64usize, 12288, 600000].into_iter().enumerate() {
            let g = group(p, i * 7);
            let source = payload(p, nbytes);
            for alg in &algs {
                let (buffers, counters) = run_inproc(alg, &g, &source);
                if let Some((rank, off)) = first_divergence(alg, &g, &source, &buffers) {
                    return Err(format!("{} P={p} nbytes={nbytes}: rank {rank} wrong at {off}", alg.name()));
                }
                let sim = simulate(alg, &g, nbytes).unwrap();
                if let Err(d) = sim.report.agrees_with(&counters) {
                    return Err(format!("{} P={p} nbytes={nbytes}: {d}", alg.name()));
                }
                cells += 1;
            }
        }
    }
    Ok(format!("{cells} cells: per-link messages, bytes, zero-length counts equal; tolerance 0"))
}

fn bench_messages() -> Outcome {
    let spec = SweepSpec {
        algorithms: vec![AlgoName::Native, AlgoName::Opt],
        procs: vec![2, 3, 8, 9, 16],
        sizes: vec![524288],
        reps: 5,
        ..Default::default()
    };
    let rows = run_bench(&spec).map_err(|e| e.to_string())?;
    let pairs = bench_message_comparison(&rows).map_err(|e| e.to_string())?;
    if pairs.iter().filter(|(p, ..)| *p >= 3).count() != 4 {
        return Err(format!("expected 4 benchmarked cells with P >= 3, got {pairs:?}"));
    }
    let summary = pairs
        .iter()
        .map(|(p, _, n, o)| {
            let bw = |a| rows.iter().find(|r| r.algo == a && r.procs == *p).unwrap().median_mbps;
            format!("P={p} {n}->{o} msgs ({:.2}x)", bw(AlgoName::Opt) / bw(AlgoName::Native))
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("tuned < native messages where P >= 3; bandwidth informational: {summary}"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, Check); 7] = [
        ("exact transfer counts", exact_counts),
        ("power-of-two savings law", savings_law),
        ("broadcast oracle", broadcast_oracle),
        ("structural invariants", structural),
        ("no duplicate receives", no_duplicates),
        ("executable/simulated agreement", exec_sim_agreement),
        ("bench message reduction", bench_messages),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1);
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
