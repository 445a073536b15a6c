//! Sequential vs rayon execution of the batch workloads.
//!
//! Without the `parallel` feature both modes run on one thread, which makes
//! the pair a check on dispatch overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geoind_core::attack::{build_attack_dataset, estimate_bayes_risk};
use geoind_core::ingest::{default_region, synth_path, Grid, WalkKind};
use geoind_core::metrics::{mean_displacement, sweep, SweepSpec};
use geoind_core::{Epsilon, Execution, MechanismConfig, MechanismKind, PlanarPoint, RngSeed};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn commute_traces(n: usize, len: usize) -> Vec<Vec<PlanarPoint>> {
    let region = default_region();
    let kind = WalkKind::Commute { route_seed: 7, route_fixes: 100 };
    (0..n)
        .map(|i| synth_path(kind, 8.0, len, &region, &mut RngSeed(100 + i as u64).stream()).unwrap())
        .collect()
}

fn monte_carlo(c: &mut Criterion) {
    let mech = MechanismConfig::psm(Epsilon::new(0.1).unwrap());
    let mut g = c.benchmark_group("mean_displacement_1e5");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| mean_displacement(&mech, 100_000, RngSeed(1), exec)));
    }
    g.finish();
}

fn attack(c: &mut Criterion) {
    let traces = commute_traces(10, 400);
    let grid = Grid::with_defaults(default_region());
    let mech = MechanismConfig::plm(Epsilon::new(0.1).unwrap());
    let mut rng = RngSeed(2).stream();
    let pairs: Vec<_> = traces
        .iter()
        .map(|t| (t.clone(), t.iter().map(|&x| mech.perturb_one(x, &mut rng)).collect()))
        .collect();
    let data = build_attack_dataset(&pairs, &grid, 5).unwrap();
    let mut g = c.benchmark_group("bayes_risk");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, data.samples.len()), &data, |b, d| {
            b.iter(|| estimate_bayes_risk(&d.samples, 0.25, RngSeed(3), exec).unwrap())
        });
    }
    g.finish();
}

fn sweep_cells(c: &mut Criterion) {
    let traces = commute_traces(6, 300);
    let spec = SweepSpec {
        mechanisms: MechanismKind::ALL.to_vec(),
        epsilons: vec![0.1, 0.5, 1.0],
        deltas: vec![5.0, 20.0],
        window_lens: vec![1, 5],
        grid: Grid::with_defaults(default_region()),
        eval_split: 0.25,
        seed: RngSeed(4),
    };
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| sweep(&spec, &traces, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, monte_carlo, attack, sweep_cells);
criterion_main!(benches);
