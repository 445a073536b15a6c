//! Quality-of-service, privacy and latency measurement.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{build_attack_dataset, estimate_bayes_risk, AttackError};
use crate::exec::Execution;
use crate::geo::{distance, PlanarPoint};
use crate::ingest::{synth_path, Grid, WalkKind};
use crate::mechanisms::{plm_radial_sample, psm_radial_sample, Epsilon, MechanismError, StaircaseParams};
use crate::objects::{accumulated_loss, generate_field, visibility, ObjectFieldConfig, ObjectsError};
use crate::perturb::{perturb_stream, MechanismConfig, MechanismKind};
use crate::rng::RngSeed;
use crate::session::{SessionError, TrPsmConfig, TrPsmSession};

/// Smallest iteration count accepted by [`bench_perturb`].
pub const MIN_BENCH_ITERATIONS: usize = 1000;

const CHUNK: usize = 1 << 15;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no traces to evaluate")]
    Empty,
    #[error("trace {0} is empty")]
    EmptyTrace(usize),
    #[error("trace {index}: {true_len} true fixes but {released_len} released points")]
    Misaligned {
        index: usize,
        true_len: usize,
        released_len: usize,
    },
    #[error("benchmark needs at least {MIN_BENCH_ITERATIONS} iterations, got {0}")]
    TooFewIterations(usize),
    #[error("sweep axis '{0}' is empty")]
    EmptyAxis(&'static str),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Objects(#[from] ObjectsError),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
}

// ---------------------------------------------------------------------------
// Mean normalized error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MneResult {
    pub mne: f64,
    pub n_traces: usize,
    pub per_trace: Vec<f64>,
}

/// Mean displacement per trace, then the unweighted mean over traces.
pub fn mne(traces: &[(Vec<PlanarPoint>, Vec<PlanarPoint>)]) -> Result<MneResult, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_trace = traces
        .iter()
        .enumerate()
        .map(|(index, (truth, released))| {
            if truth.len() != released.len() {
                return Err(MetricsError::Misaligned {
                    index,
                    true_len: truth.len(),
                    released_len: released.len(),
                });
            }
            if truth.is_empty() {
                return Err(MetricsError::EmptyTrace(index));
            }
            let total: f64 = truth.iter().zip(released).map(|(x, z)| distance(*x, *z)).sum();
            Ok(total / truth.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MneResult {
        mne: per_trace.iter().sum::<f64>() / per_trace.len() as f64,
        n_traces: per_trace.len(),
        per_trace,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo over the radial samplers
// ---------------------------------------------------------------------------

fn chunked<U: Send>(n: usize, seed: RngSeed, exec: Execution, f: impl Fn(&mut crate::rng::RngStream, usize) -> U + Sync + Send) -> Vec<U> {
    let chunks = n.div_ceil(CHUNK);
    exec.map_range(chunks, |c| {
        let mut rng = seed.substream(c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        f(&mut rng, len)
    })
}

/// `n` radii from the mechanism's radial law (the staircase for TR-PSM).
/// Identical for both execution modes.
pub fn sample_radii(mech: &MechanismConfig, n: usize, seed: RngSeed, exec: Execution) -> Vec<f64> {
    chunked(n, seed, exec, |rng, len| {
        (0..len)
            .map(|_| match mech {
                MechanismConfig::Plm { epsilon } => plm_radial_sample(*epsilon, rng).r,
                MechanismConfig::Psm { params } => psm_radial_sample(params, rng).r,
                MechanismConfig::Trpsm { config } => psm_radial_sample(&config.staircase, rng).r,
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Empirical mean of ‖z − x‖ over `n` independent perturbations.
pub fn mean_displacement(mech: &MechanismConfig, n: usize, seed: RngSeed, exec: Execution) -> f64 {
    let x = PlanarPoint { x: 250.0, y: -125.0 };
    let sums = chunked(n, seed, exec, |rng, len| {
        (0..len).map(|_| distance(x, mech.perturb_one(x, rng))).sum::<f64>()
    });
    sums.iter().sum::<f64>() / n as f64
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`. Sorts in place.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_unstable_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let c = cdf(r);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mechanism: MechanismKind,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub n: usize,
}

/// Times `n` single-fix perturbations after `warmup` discarded ones.
///
/// Inputs are an 8 m random walk fixed by `seed`. TR-PSM runs one session
/// over the walk with enough budget that it never exhausts; each timed call
/// is one `step`. Only mechanism time is measured.
pub fn bench_perturb(
    mech: &MechanismConfig,
    n: usize,
    warmup: usize,
    seed: RngSeed,
) -> Result<LatencyReport, MetricsError> {
    if n < MIN_BENCH_ITERATIONS {
        return Err(MetricsError::TooFewIterations(n));
    }
    let total = n + warmup;
    let region = crate::ingest::default_region();
    let inputs = synth_path(WalkKind::RandomWalk, 8.0, total + 1, &region, &mut seed.derive(1).stream())?;
    let mut rng = seed.derive(2).stream();
    let mut timings = Vec::with_capacity(n);

    match mech {
        MechanismConfig::Trpsm { config } => {
            let cfg = TrPsmConfig {
                epsilon_total: (total as f64 + 3.0) * config.epsilon.value(),
                ..*config
            };
            let (mut session, _) = TrPsmSession::start(inputs[0], cfg, &mut rng)?;
            for (i, &x) in inputs[1..].iter().enumerate() {
                let start = Instant::now();
                let out = session.step(black_box(x), &mut rng);
                let elapsed = start.elapsed();
                black_box(out.ok());
                if i >= warmup {
                    timings.push(elapsed.as_nanos() as f64);
                }
            }
        }
        _ => {
            for (i, &x) in inputs[1..].iter().enumerate() {
                let start = Instant::now();
                let out = mech.perturb_one(black_box(x), &mut rng);
                let elapsed = start.elapsed();
                black_box(out);
                if i >= warmup {
                    timings.push(elapsed.as_nanos() as f64);
                }
            }
        }
    }

    let mean = timings.iter().sum::<f64>() / timings.len() as f64;
    timings.sort_unstable_by(f64::total_cmp);
    let pct = |p: f64| {
        let rank = ((p / 100.0) * timings.len() as f64).ceil() as usize;
        timings[rank.clamp(1, timings.len()) - 1]
    };
    Ok(LatencyReport {
        mechanism: mech.kind(),
        mean_ms: mean / 1e6,
        p50_ms: pct(50.0) / 1e6,
        p95_ms: pct(95.0) / 1e6,
        p99_ms: pct(99.0) / 1e6,
        n: timings.len(),
    })
}

// ---------------------------------------------------------------------------
// Catchability over a walk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatchableSummary {
    /// Mean catchable percentage over steps with at least one visible object.
    pub mean_pct: f64,
    pub defined_steps: usize,
    pub steps: usize,
    pub accumulated_loss: usize,
}

/// Regenerates an object field around each released point and scores it
/// against the true point.
pub fn catchability(
    truth: &[PlanarPoint],
    released: &[PlanarPoint],
    cfg: &ObjectFieldConfig,
    seed: RngSeed,
) -> Result<CatchableSummary, MetricsError> {
    if truth.len() != released.len() {
        return Err(MetricsError::Misaligned {
            index: 0,
            true_len: truth.len(),
            released_len: released.len(),
        });
    }
    let mut rng = seed.stream();
    let mut per_step = Vec::with_capacity(truth.len());
    let (mut sum, mut defined) = (0.0, 0);
    for (x, z) in truth.iter().zip(released) {
        let objs = generate_field(*z, cfg, &mut rng)?;
        let v = visibility(*x, *z, &objs, cfg);
        if v.visible > 0 {
            sum += 100.0 * v.catchable as f64 / v.visible as f64;
            defined += 1;
        }
        per_step.push(v);
    }
    Ok(CatchableSummary {
        mean_pct: if defined == 0 { f64::NAN } else { sum / defined as f64 },
        defined_steps: defined,
        steps: truth.len(),
        accumulated_loss: accumulated_loss(&per_step)?,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Axes of a sweep. `deltas` only applies to TR-PSM; an empty
/// `window_lens` skips the attack.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub mechanisms: Vec<MechanismKind>,
    pub epsilons: Vec<f64>,
    pub deltas: Vec<f64>,
    pub window_lens: Vec<usize>,
    pub grid: Grid,
    pub eval_split: f64,
    pub seed: RngSeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mechanism: MechanismKind,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub window_len: Option<usize>,
    pub mne: f64,
    pub bayes_risk: Option<f64>,
    pub n_eval: Option<usize>,
    pub seed: u64,
}

/// One (mechanism, ε, δ) point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub mechanism: MechanismKind,
    pub epsilon: f64,
    pub delta: Option<f64>,
}

impl SweepCell {
    /// Seed for this cell, independent of its position in the sweep.
    pub fn seed(&self, base: RngSeed) -> RngSeed {
        let mech = self.mechanism as u64 + 1;
        base.derive(mech)
            .derive(self.epsilon.to_bits())
            .derive(self.delta.map_or(0, f64::to_bits))
    }

    pub fn config(&self, fixes: usize) -> Result<MechanismConfig, MetricsError> {
        let eps = Epsilon::new(self.epsilon)?;
        Ok(match self.mechanism {
            MechanismKind::Plm => MechanismConfig::plm(eps),
            MechanismKind::Psm => MechanismConfig::Psm {
                params: StaircaseParams::new(eps),
            },
            MechanismKind::Trpsm => MechanismConfig::trpsm(TrPsmConfig::unlimited_for(
                eps,
                self.delta.unwrap_or(crate::session::DEFAULT_DELTA_M),
                fixes,
            )),
        })
    }
}

/// Perturbs every trace with the cell's mechanism; trace `i` uses
/// substream `i` of the cell seed.
pub fn release_traces(
    cell: &SweepCell,
    traces: &[Vec<PlanarPoint>],
    base: RngSeed,
    exec: Execution,
) -> Result<Vec<Vec<PlanarPoint>>, MetricsError> {
    let seed = cell.seed(base);
    let longest = traces.iter().map(Vec::len).max().unwrap_or(0);
    let mech = cell.config(longest)?;
    exec.map_range(traces.len(), |i| {
        let mut rng = seed.substream(i as u64);
        perturb_stream(&traces[i], &mech, &mut rng).map(|s| s.released)
    })
    .into_iter()
    .map(|r| r.map_err(MetricsError::from))
    .collect()
}

/// Evaluates one cell: MNE plus a Bayes-risk row per window length.
pub fn evaluate_cell(
    cell: &SweepCell,
    traces: &[Vec<PlanarPoint>],
    window_lens: &[usize],
    grid: &Grid,
    eval_split: f64,
    base: RngSeed,
    exec: Execution,
) -> Result<Vec<SweepRow>, MetricsError> {
    let released = release_traces(cell, traces, base, exec)?;
    let pairs: Vec<_> = traces.iter().cloned().zip(released).collect();
    let quality = mne(&pairs)?;
    let row = |window_len, bayes_risk, n_eval| SweepRow {
        mechanism: cell.mechanism,
        epsilon: cell.epsilon,
        delta: cell.delta,
        window_len,
        mne: quality.mne,
        bayes_risk,
        n_eval,
        seed: base.0,
    };
    if window_lens.is_empty() {
        return Ok(vec![row(None, None, None)]);
    }
    window_lens
        .iter()
        .map(|&l| {
            let data = build_attack_dataset(&pairs, grid, l)?;
            let risk = estimate_bayes_risk(&data.samples, eval_split, cell.seed(base).derive(l as u64), exec)?;
            Ok(row(Some(l), Some(risk.bayes_risk), Some(risk.n_eval)))
        })
        .collect()
}

/// Cross product of the sweep axes over region-relative planar traces.
/// Rows come out in axis order regardless of execution mode.
pub fn sweep(spec: &SweepSpec, traces: &[Vec<PlanarPoint>], exec: Execution) -> Result<Vec<SweepRow>, MetricsError> {
    if spec.mechanisms.is_empty() {
        return Err(MetricsError::EmptyAxis("mechanisms"));
    }
    if spec.epsilons.is_empty() {
        return Err(MetricsError::EmptyAxis("epsilons"));
    }
    if traces.is_empty() {
        return Err(MetricsError::Empty);
    }
    let deltas: Vec<Option<f64>> = if spec.deltas.is_empty() {
        vec![Some(crate::session::DEFAULT_DELTA_M)]
    } else {
        spec.deltas.iter().copied().map(Some).collect()
    };
    let mut cells = Vec::new();
    for &mechanism in &spec.mechanisms {
        for &epsilon in &spec.epsilons {
            if mechanism == MechanismKind::Trpsm {
                cells.extend(deltas.iter().map(|&delta| SweepCell { mechanism, epsilon, delta }));
            } else {
                cells.push(SweepCell { mechanism, epsilon, delta: None });
            }
        }
    }
    let results = exec.map(&cells, |cell| {
        evaluate_cell(cell, traces, &spec.window_lens, &spec.grid, spec.eval_split, spec.seed, exec)
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}
