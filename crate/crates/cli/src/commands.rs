//! Subcommand implementations.
//!
//! Each command validates its flags before reading input or doing work.
//! Usage problems are reported as [`UsageError`] (exit 1); everything else
//! is a runtime failure (exit 2).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use geoind_core::attack::{build_attack_dataset, estimate_bayes_risk};
use geoind_core::ingest::{load_traces, synth_walk, write_traces, Grid, Region, SynthConfig, Trace, WalkKind};
use geoind_core::metrics::{bench_perturb, catchability, mne, sweep, SweepSpec};
use geoind_core::objects::{Density, ObjectFieldConfig};
use geoind_core::perturb::perturb_stream;
use geoind_core::session::DEFAULT_DELTA_M;
use geoind_core::{Epsilon, Execution, MechanismConfig, MechanismKind, PlanarPoint, RngSeed, TrPsmConfig};
use serde::Serialize;

use crate::args::{
    BenchArgs, Command, EvalArgs, GridArgs, MechanismArgs, Metric, PerturbArgs, ServeArgs, SweepArgs, SynthArgs,
    WalkArg,
};

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.to_string()))
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// At least one TR-PSM trace ran out of budget and was cut short.
    Truncated,
}

pub fn dispatch(cmd: Command) -> anyhow::Result<Outcome> {
    match cmd {
        Command::Perturb(a) => perturb(a),
        Command::Eval(a) => eval(a).map(|_| Outcome::Done),
        Command::Sweep(a) => run_sweep(a).map(|_| Outcome::Done),
        Command::Bench(a) => bench(a).map(|_| Outcome::Done),
        Command::Synth(a) => synth(a).map(|_| Outcome::Done),
        Command::Serve(a) => serve(a).map(|_| Outcome::Done),
    }
}

fn sink(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_rows<T: Serialize>(path: &Option<PathBuf>, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<Vec<Trace>> {
    let (traces, report) = load_traces(path).with_context(|| format!("reading {}", path.display()))?;
    if report.malformed > 0 || report.duplicate_timestamps > 0 {
        eprintln!(
            "warning: {}: skipped {} malformed rows and {} duplicate timestamps",
            path.display(),
            report.malformed,
            report.duplicate_timestamps
        );
    }
    Ok(traces)
}

/// Maps `--jobs` to an execution mode, sizing the rayon pool when asked.
fn execution(jobs: usize) -> anyhow::Result<Execution> {
    if jobs == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        // Fails only if the pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    Ok(Execution::Parallel)
}

pub fn mechanism_config(m: &MechanismArgs) -> anyhow::Result<MechanismConfig> {
    let eps = Epsilon::new(m.epsilon).map_err(usage)?;
    match m.mechanism {
        MechanismKind::Trpsm => {
            let total = m.epsilon_total.ok_or_else(|| usage("--epsilon-total is required for trpsm"))?;
            let cfg = TrPsmConfig::new(eps, total, m.delta.unwrap_or(DEFAULT_DELTA_M));
            cfg.validate().map_err(usage)?;
            Ok(MechanismConfig::trpsm(cfg))
        }
        kind => {
            if m.epsilon_total.is_some() || m.delta.is_some() {
                return Err(usage(format!("--epsilon-total and --delta apply to trpsm only, not {kind}")));
            }
            Ok(match kind {
                MechanismKind::Plm => MechanismConfig::plm(eps),
                _ => MechanismConfig::psm(eps),
            })
        }
    }
}

fn grid_for(g: &GridArgs, center: geoind_core::GeoPoint) -> anyhow::Result<Grid> {
    let region = Region::new(center, g.region_side).map_err(usage)?;
    Grid::new(region, g.grid_cells).map_err(usage)
}

fn check_grid_args(g: &GridArgs) -> anyhow::Result<()> {
    if g.grid_cells == 0 {
        return Err(usage("--grid-cells must be positive"));
    }
    if !(g.region_side > 0.0 && g.region_side.is_finite()) {
        return Err(usage(format!("--region-side must be positive, got {}", g.region_side)));
    }
    Ok(())
}

fn check_split(split: f64) -> anyhow::Result<()> {
    if !(split > 0.0 && split < 1.0) {
        return Err(usage(format!("--eval-split must lie in (0, 1), got {split}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn perturb(a: PerturbArgs) -> anyhow::Result<Outcome> {
    let mech = mechanism_config(&a.mech)?;
    let mut traces = load(&a.input)?;
    let seed = RngSeed(a.seed);
    let mut outcome = Outcome::Done;
    for (i, tr) in traces.iter_mut().enumerate() {
        let pts = tr.planar()?;
        let mut rng = seed.substream(i as u64);
        let out = perturb_stream(&pts, &mech, &mut rng)?;
        if let Some(at) = out.exhausted_at {
            eprintln!(
                "warning: user {}: budget exhausted at fix {} of {}; the rest of the trace is dropped",
                tr.user,
                at + 1,
                pts.len()
            );
            outcome = Outcome::Truncated;
        }
        tr.fixes.truncate(out.released.len());
        for (fix, z) in tr.fixes.iter_mut().zip(&out.released) {
            let g = tr
                .projection
                .unproject(*z)
                .with_context(|| format!("user {}: released point {z:?} cannot be mapped back", tr.user))?;
            fix.released = Some(g);
        }
    }
    let mut w = sink(&a.output)?;
    write_traces(&mut w, &traces)?;
    w.flush()?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub metric: &'static str,
    pub window_len: Option<usize>,
    pub density: Option<&'static str>,
    pub value: f64,
    /// Traces (mne), evaluation windows (bayes) or defined steps (catchable).
    pub count: usize,
}

/// Attaches released points from `released` to `truth`, matching traces by
/// user and fixes by position; timestamps must agree.
fn align(truth: &mut [Trace], released: &[Trace]) -> anyhow::Result<()> {
    for tr in truth.iter_mut() {
        let other = released
            .iter()
            .find(|r| r.user == tr.user)
            .ok_or_else(|| anyhow!("user {} has no released trace", tr.user))?;
        if other.fixes.len() != tr.fixes.len() {
            return Err(anyhow!(
                "user {}: {} true fixes but {} released",
                tr.user,
                tr.fixes.len(),
                other.fixes.len()
            ));
        }
        for (j, (f, r)) in tr.fixes.iter_mut().zip(&other.fixes).enumerate() {
            if f.t != r.t {
                return Err(anyhow!("user {}: fix {j} timestamps differ ({} vs {})", tr.user, f.t, r.t));
            }
            f.released = Some(r.point);
        }
    }
    Ok(())
}

fn eval_pairs(truth: &[Trace]) -> anyhow::Result<Vec<(Vec<PlanarPoint>, Vec<PlanarPoint>)>> {
    truth
        .iter()
        .map(|tr| {
            let released = tr
                .released_planar()
                .ok_or_else(|| anyhow!("user {}: some fixes have no released location", tr.user))?;
            let released = released?;
            if released.len() != tr.fixes.len() {
                return Err(anyhow!(
                    "user {}: {} of {} fixes have a released location",
                    tr.user,
                    released.len(),
                    tr.fixes.len()
                ));
            }
            Ok((tr.planar()?, released))
        })
        .collect()
}

fn eval(a: EvalArgs) -> anyhow::Result<Vec<EvalRow>> {
    if a.metrics.is_empty() {
        return Err(usage("--metrics is empty"));
    }
    if a.window_len.iter().any(|&l| l == 0) {
        return Err(usage("--window-len values must be at least 1"));
    }
    if a.density.is_empty() {
        return Err(usage("--density is empty"));
    }
    check_grid_args(&a.grid)?;
    check_split(a.eval_split)?;
    let exec = execution(a.jobs)?;

    let mut truth = load(&a.input)?;
    if let Some(path) = &a.released {
        let released = load(path)?;
        align(&mut truth, &released)?;
    }
    let pairs = eval_pairs(&truth)?;
    let seed = RngSeed(a.seed);
    let mut rows = Vec::new();

    for metric in dedup(&a.metrics) {
        match metric {
            Metric::Mne => {
                let m = mne(&pairs)?;
                rows.push(EvalRow { metric: "mne", window_len: None, density: None, value: m.mne, count: m.n_traces });
            }
            Metric::Bayes => {
                let grid = grid_for(&a.grid, truth[0].projection.origin())?;
                for &l in &a.window_len {
                    let data = build_attack_dataset(&pairs, &grid, l)?;
                    let risk = estimate_bayes_risk(&data.samples, a.eval_split, seed.derive(l as u64), exec)
                        .with_context(|| format!("window length {l}"))?;
                    rows.push(EvalRow {
                        metric: "bayes_risk",
                        window_len: Some(l),
                        density: None,
                        value: risk.bayes_risk,
                        count: risk.n_eval,
                    });
                }
            }
            Metric::Catchable => {
                for &d in &dedup(&a.density) {
                    let cfg = ObjectFieldConfig::new(d);
                    let (mut sum, mut defined, mut loss, mut steps) = (0.0, 0usize, 0usize, 0usize);
                    for (i, (x, z)) in pairs.iter().enumerate() {
                        let s = catchability(x, z, &cfg, seed.derive(density_salt(d)).derive(i as u64))?;
                        if s.defined_steps > 0 {
                            sum += s.mean_pct * s.defined_steps as f64;
                        }
                        defined += s.defined_steps;
                        loss += s.accumulated_loss;
                        steps += s.steps;
                    }
                    let name = density_name(d);
                    rows.push(EvalRow {
                        metric: "catchable_pct",
                        window_len: None,
                        density: Some(name),
                        value: if defined == 0 { f64::NAN } else { sum / defined as f64 },
                        count: defined,
                    });
                    rows.push(EvalRow {
                        metric: "accumulated_loss",
                        window_len: None,
                        density: Some(name),
                        value: loss as f64,
                        count: steps,
                    });
                }
            }
        }
    }
    write_rows(&a.output, &rows)?;
    Ok(rows)
}

fn dedup<T: PartialEq + Copy>(v: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(v.len());
    for &x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn density_name(d: Density) -> &'static str {
    match d {
        Density::Sparse => "sparse",
        Density::Dense => "dense",
    }
}

fn density_salt(d: Density) -> u64 {
    match d {
        Density::Sparse => 1,
        Density::Dense => 2,
    }
}

// ---------------------------------------------------------------------------

fn run_sweep(a: SweepArgs) -> anyhow::Result<()> {
    if a.mechanism.is_empty() || a.epsilon.is_empty() {
        return Err(usage("--mechanism and --epsilon need at least one value"));
    }
    for &e in &a.epsilon {
        Epsilon::new(e).map_err(usage)?;
    }
    if a.delta.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(usage("--delta values must be non-negative"));
    }
    check_grid_args(&a.grid)?;
    check_split(a.eval_split)?;
    let exec = execution(a.jobs)?;

    let traces = load(&a.input)?;
    let planar = traces.iter().map(Trace::planar).collect::<Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        mechanisms: dedup(&a.mechanism),
        epsilons: a.epsilon.clone(),
        deltas: a.delta.clone(),
        window_lens: a.window_len.iter().copied().filter(|&l| l > 0).collect(),
        grid: grid_for(&a.grid, traces[0].projection.origin())?,
        eval_split: a.eval_split,
        seed: RngSeed(a.seed),
    };
    let rows = sweep(&spec, &planar, exec)?;
    write_rows(&a.output, &rows)
}

// ---------------------------------------------------------------------------

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.n < geoind_core::metrics::MIN_BENCH_ITERATIONS {
        return Err(usage(format!(
            "--n must be at least {}, got {}",
            geoind_core::metrics::MIN_BENCH_ITERATIONS,
            a.n
        )));
    }
    if a.mechanism.is_empty() {
        return Err(usage("--mechanism is empty"));
    }
    let eps = Epsilon::new(a.epsilon).map_err(usage)?;
    if !(a.delta >= 0.0 && a.delta.is_finite()) {
        return Err(usage(format!("--delta must be non-negative, got {}", a.delta)));
    }
    let mut rows = Vec::new();
    for kind in dedup(&a.mechanism) {
        let mech = match kind {
            MechanismKind::Plm => MechanismConfig::plm(eps),
            MechanismKind::Psm => MechanismConfig::psm(eps),
            MechanismKind::Trpsm => MechanismConfig::trpsm(TrPsmConfig::unlimited_for(eps, a.delta, a.n + a.warmup)),
        };
        rows.push(bench_perturb(&mech, a.n, a.warmup, RngSeed(a.seed))?);
    }
    write_rows(&a.output, &rows)
}

// ---------------------------------------------------------------------------

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.traces == 0 || a.fixes == 0 {
        return Err(usage("--traces and --fixes must be positive"));
    }
    if !(a.step >= 0.0 && a.step.is_finite()) {
        return Err(usage(format!("--step must be non-negative, got {}", a.step)));
    }
    if !(a.interval > 0.0 && a.interval.is_finite()) {
        return Err(usage(format!("--interval must be positive, got {}", a.interval)));
    }
    let region = Region::new(a.center, a.region_side).map_err(usage)?;
    let kind = match a.kind {
        WalkArg::Stationary => WalkKind::Stationary,
        WalkArg::Line => WalkKind::Line,
        WalkArg::RandomWalk => WalkKind::RandomWalk,
        WalkArg::Commute => WalkKind::Commute { route_seed: a.route_seed, route_fixes: a.route_fixes },
    };
    let seed = RngSeed(a.seed);
    let traces = (0..a.traces)
        .map(|i| {
            let mut cfg = SynthConfig::new(region).user(format!("u{i}"));
            cfg.interval_s = a.interval;
            synth_walk(kind, a.step, a.fixes, &cfg, &mut seed.substream(i as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = sink(&a.output)?;
    write_traces(&mut w, &traces)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    use geoind_service::{Service, ServiceConfig};

    let cfg = ServiceConfig {
        default_density: a.density,
        field_radius: a.field_radius,
        visibility_radius: a.visibility_radius,
        session_ttl: Duration::from_secs(a.session_ttl),
        seed: RngSeed(a.seed),
        snapshot_path: a.snapshot.clone(),
    };
    if a.session_ttl == 0 {
        return Err(usage("--session-ttl must be positive"));
    }
    let svc = Arc::new(Service::new(cfg).map_err(|e| usage(e.to_string()))?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.listen)
            .await
            .with_context(|| format!("binding {}", a.listen))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        io::stdout().flush()?;
        geoind_service::serve(listener, svc, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => return interrupt.await,
        };
        tokio::select! {
            _ = interrupt => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    interrupt.await;
}
