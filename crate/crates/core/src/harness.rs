//! Discrete-event parameter-server simulation.
//!
//! Each worker owns its local blocks and computes on the master state it
//! last received. The master waits for the `S` earliest arrivals (plus any
//! worker about to exceed the staleness bound), updates the consensus blocks
//! and duals, periodically refines the two polytopes, and ships the new state
//! back to the workers it heard from.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cuts::{drop_inactive, generate_cut_i, generate_cut_ii, Cut, CutPoint, Layer, Polytope, DUAL_ZERO_TOL};
use crate::error::{AftoError, Result};
use crate::inner::{solve_level2, solve_level3, GradMode, InnerConfig, InnerInit, Snapshot, UnrollTrace};
use crate::outer::{cut_point, master_step, stationarity_gap, worker_step, OuterConfig};
use crate::problem::{reformulate_consensus, Dims, DualState, PrimalState, TrilevelProblem};

/// Per-worker round-trip model: `compute + 2 link`, scaled for stragglers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    Constant {
        compute: f64,
        link: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
        link: f64,
    },
    Straggler {
        ids: Vec<usize>,
        factor: f64,
        compute: f64,
        link: f64,
    },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Constant {
            compute: 1.0,
            link: 0.0,
        }
    }
}

impl DelayModel {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(AftoError::Config(m.to_string()));
        match self {
            DelayModel::Constant { compute, link } => {
                if !(*compute >= 0.0 && *link >= 0.0) {
                    return bad("delays must be nonnegative");
                }
            }
            DelayModel::Uniform { lo, hi, link } => {
                if !(*lo >= 0.0 && hi >= lo && *link >= 0.0) {
                    return bad("uniform delays need 0 <= lo <= hi and a nonnegative link");
                }
            }
            DelayModel::Straggler {
                ids,
                factor,
                compute,
                link,
            } => {
                if !(*compute >= 0.0 && *link >= 0.0 && *factor >= 1.0) {
                    return bad("straggler delays need nonnegative times and factor >= 1");
                }
                if let Some(id) = ids.iter().find(|&&id| id >= n) {
                    return Err(AftoError::Config(format!(
                        "straggler id {id} out of range for {n} workers (ids are 0-based)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Simulated round trip of worker `j`'s next activation.
    pub fn round_trip(&self, j: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            DelayModel::Constant { compute, link } => compute + 2.0 * link,
            DelayModel::Uniform { lo, hi, link } => {
                let c = if hi > lo { rng.random_range(*lo..*hi) } else { *lo };
                c + 2.0 * link
            }
            DelayModel::Straggler {
                ids,
                factor,
                compute,
                link,
            } => {
                let base = compute + 2.0 * link;
                if ids.contains(&j) {
                    base * factor
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Active workers the master waits for.
    pub s: usize,
    /// Staleness bound: every worker reports at least once every `tau`
    /// master iterations.
    pub tau: usize,
    pub delay: DelayModel,
    pub seed: u64,
    /// Forces `s = n`.
    pub sync_mode: bool,
    /// Simulated time per communicated scalar during cut refinement.
    pub refine_latency: f64,
    /// Run the worker steps of an epoch on scoped threads.
    pub parallel: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            s: 1,
            tau: 10,
            delay: DelayModel::default(),
            seed: 0,
            sync_mode: false,
            refine_latency: 0.0,
            parallel: false,
        }
    }
}

impl ScheduleConfig {
    pub fn effective_s(&self, n: usize) -> usize {
        if self.sync_mode {
            n
        } else {
            self.s
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let s = self.effective_s(n);
        if s == 0 || s > n {
            return Err(AftoError::Config(format!("need 1 <= S <= N, got S = {s}, N = {n}")));
        }
        if self.tau == 0 {
            return Err(AftoError::Config("tau must be at least 1".into()));
        }
        if !(self.refine_latency >= 0.0) {
            return Err(AftoError::Config("refine_latency must be nonnegative".into()));
        }
        self.delay.validate(n)
    }
}

/// Cut-generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutConfig {
    /// Weak-convexity modulus for layer-I cuts; the problem's value when unset.
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub grad_mode: GradMode,
    /// Duals at or below this count as zero when pruning.
    pub dual_zero_tol: f64,
    /// Rescale each new cut to unit-norm coefficients before it enters a
    /// polytope. The half-space is unchanged; only the scale its multiplier
    /// lives on is.
    pub normalize: bool,
}

impl Default for CutConfig {
    fn default() -> Self {
        CutConfig {
            mu1: None,
            mu2: None,
            grad_mode: GradMode::FiniteDiff,
            dual_zero_tol: DUAL_ZERO_TOL,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub active: Vec<usize>,
    pub clock: f64,
}

/// Picks the active set: the `s` earliest arrivals (ties to the lower id),
/// plus every worker that would otherwise go `tau` iterations without
/// reporting. The clock moves to the latest included arrival.
pub fn schedule_epoch(arrivals: &[f64], staleness: &[usize], s: usize, tau: usize) -> Epoch {
    let mut order: Vec<usize> = (0..arrivals.len()).collect();
    order.sort_by(|&a, &b| arrivals[a].total_cmp(&arrivals[b]).then(a.cmp(&b)));
    let mut take = vec![false; arrivals.len()];
    for &j in order.iter().take(s) {
        take[j] = true;
    }
    for (j, &st) in staleness.iter().enumerate() {
        if st + 1 >= tau {
            take[j] = true;
        }
    }
    let active: Vec<usize> = (0..arrivals.len()).filter(|&j| take[j]).collect();
    let clock = active.iter().map(|&j| arrivals[j]).fold(f64::NEG_INFINITY, f64::max);
    Epoch { active, clock }
}

/// Per-iteration communication cost `32 |Q| (2 (d1 + d2 + d3) + d1 + |P_II|)`.
pub fn comm_cost_iter(active: usize, dims: &Dims, poly_ii_size: usize) -> u64 {
    32 * active as u64 * (2 * dims.total() + dims.d1 + poly_ii_size) as u64
}

/// Cost of one refinement event with `p` layer-II cuts.
pub fn comm_cost_refinement(n: usize, rounds: usize, dims: &Dims, p: usize) -> u64 {
    let (n, k, p) = (n as u64, rounds as u64, p as u64);
    let d23 = (dims.d2 + dims.d3) as u64;
    32 * (n * k * (3 * d23 + 2 * p) + n * p * (2 * d23 + dims.d1 as u64 + 1))
}

/// Total refinement cost over events with the given layer-II sizes.
pub fn comm_cost_cuts(n: usize, rounds: usize, dims: &Dims, poly_ii_sizes: &[usize]) -> u64 {
    poly_ii_sizes
        .iter()
        .map(|&p| comm_cost_refinement(n, rounds, dims, p))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineEvent {
    /// `|P_II|` before the new cut was added.
    pub p2_before: usize,
    pub p1_after: usize,
    pub p2_after: usize,
    pub dropped_i: usize,
    pub dropped_ii: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub active: Vec<usize>,
    /// `t - t̂_j` for every worker at the start of the epoch.
    pub staleness: Vec<usize>,
    pub sim_time: f64,
    pub gap_sq: f64,
    pub f: [f64; 3],
    pub p1_size: usize,
    pub p2_size: usize,
    pub c1: u64,
    pub c2_cum: u64,
    pub refinements: Vec<RefineEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFooter {
    pub status: RunStatus,
    /// First iteration count at which the gap reached `eps`.
    pub t_eps: Option<usize>,
    pub iterations: usize,
    pub eps: f64,
    pub dims: Dims,
    pub s: usize,
    pub tau: usize,
    pub rounds: usize,
    pub total_c1: u64,
    pub c2: u64,
    pub sim_time: f64,
    pub final_gap_sq: f64,
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Iter(IterRecord),
    Footer(RunFooter),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterRecord>,
    pub footer: RunFooter,
}

impl RunLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, &LogLine::Iter(r.clone()))?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &LogLine::Footer(self.footer.clone()))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<RunLog> {
        let mut records = Vec::new();
        let mut footer = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogLine>(&line)? {
                LogLine::Iter(rec) => records.push(rec),
                LogLine::Footer(f) => {
                    if footer.is_some() {
                        return Err(AftoError::Data(format!("second footer on line {}", i + 1)));
                    }
                    footer = Some(f);
                }
            }
        }
        let footer = footer.ok_or_else(|| AftoError::Data("run log has no footer".into()))?;
        Ok(RunLog { records, footer })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let map = |e: csv::Error| AftoError::Data(e.to_string());
        out.write_record(["t", "gap_sq", "f1", "f2", "f3", "sim_time", "p1_size", "p2_size", "c1"])
            .map_err(map)?;
        for r in &self.records {
            out.write_record([
                r.t.to_string(),
                r.gap_sq.to_string(),
                r.f[0].to_string(),
                r.f[1].to_string(),
                r.f[2].to_string(),
                r.sim_time.to_string(),
                r.p1_size.to_string(),
                r.p2_size.to_string(),
                r.c1.to_string(),
            ])
            .map_err(map)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Simulated time of the first record whose gap is at most `threshold`.
    pub fn time_to_gap(&self, threshold: f64) -> Option<f64> {
        self.records.iter().find(|r| r.gap_sq <= threshold).map(|r| r.sim_time)
    }

    /// Iteration count at the first record whose gap is at most `threshold`.
    pub fn iters_to_gap(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.gap_sq <= threshold).map(|r| r.t + 1)
    }
}

/// Summary of [`validate_log`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCheck {
    pub max_staleness: usize,
    pub min_active: usize,
    pub refinements: usize,
}

/// Replays a run log: staleness bound, active-set size, and both
/// communication counters recomputed from the logged sizes.
pub fn validate_log(log: &RunLog) -> Result<LogCheck> {
    let f = &log.footer;
    let n = f.dims.n;
    let mut total_c1 = 0u64;
    let mut sizes = Vec::new();
    let mut check = LogCheck {
        max_staleness: 0,
        min_active: usize::MAX,
        refinements: 0,
    };
    let fail = |m: String| Err(AftoError::Data(m));
    for r in &log.records {
        if r.staleness.len() != n {
            return fail(format!(
                "t = {}: staleness vector has {} entries",
                r.t,
                r.staleness.len()
            ));
        }
        let worst = r.staleness.iter().copied().max().unwrap_or(0);
        check.max_staleness = check.max_staleness.max(worst);
        if worst > f.tau {
            return fail(format!("t = {}: staleness {worst} exceeds tau = {}", r.t, f.tau));
        }
        if r.active.len() < f.s {
            return fail(format!("t = {}: {} active workers, S = {}", r.t, r.active.len(), f.s));
        }
        check.min_active = check.min_active.min(r.active.len());
        let c1 = comm_cost_iter(r.active.len(), &f.dims, r.p2_size);
        if c1 != r.c1 {
            return fail(format!("t = {}: logged C1 {} != recomputed {c1}", r.t, r.c1));
        }
        total_c1 += c1;
        sizes.extend(r.refinements.iter().map(|e| e.p2_before));
        let c2 = comm_cost_cuts(n, f.rounds, &f.dims, &sizes);
        if c2 != r.c2_cum {
            return fail(format!("t = {}: logged C2 {} != recomputed {c2}", r.t, r.c2_cum));
        }
    }
    check.refinements = sizes.len();
    if total_c1 != f.total_c1 {
        return fail(format!("footer C1 {} != recomputed {total_c1}", f.total_c1));
    }
    let c2 = comm_cost_cuts(n, f.rounds, &f.dims, &sizes);
    if c2 != f.c2 {
        return fail(format!("footer C2 {} != recomputed {c2}", f.c2));
    }
    if check.min_active == usize::MAX {
        check.min_active = 0;
    }
    Ok(check)
}

/// Everything a refinement produced, kept when [`RunOptions::record_cuts`]
/// is set.
#[derive(Debug, Clone)]
pub struct RefineRecord {
    pub t: usize,
    pub cut_i: Cut,
    pub trace_i: UnrollTrace,
    pub cut_ii: Cut,
    pub trace_ii: UnrollTrace,
    pub anchor_i: CutPoint,
    pub anchor_ii: CutPoint,
    pub poly_i_before: Polytope,
    pub poly_ii_before: Polytope,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Starting point; zeros when unset.
    pub init: Option<PrimalState>,
    pub record_cuts: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub state: PrimalState,
    pub duals: DualState,
    pub poly_i: Polytope,
    pub poly_ii: Polytope,
    pub refinements: Vec<RefineRecord>,
}

impl RunOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iterations: self.log.footer.iterations,
            state: self.state.clone(),
            duals: self.duals.clone(),
            poly_i: self.poly_i.clone(),
            poly_ii: self.poly_ii.clone(),
        }
    }
}

/// Final iterate of a run, as written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iterations: usize,
    pub state: PrimalState,
    pub duals: DualState,
    pub poly_i: Polytope,
    pub poly_ii: Polytope,
}

/// Master-side cut state.
#[derive(Debug, Clone)]
pub struct CutState {
    pub poly_i: Polytope,
    pub poly_ii: Polytope,
    warm3: Option<Snapshot>,
    warm2: Option<Snapshot>,
}

impl CutState {
    pub fn new() -> Self {
        CutState {
            poly_i: Polytope::new(Layer::I),
            poly_ii: Polytope::new(Layer::II),
            warm3: None,
            warm2: None,
        }
    }
}

impl Default for CutState {
    fn default() -> Self {
        Self::new()
    }
}

/// One refinement: unroll both lower levels at the current outer point, add
/// one cut per layer, and prune cuts whose duals are zero. The new layer-II
/// cut is added after pruning since it has no multiplier yet.
#[allow(clippy::too_many_arguments)]
pub fn refine<P: TrilevelProblem + ?Sized>(
    problem: &P,
    state: &PrimalState,
    duals: &mut DualState,
    cuts: &mut CutState,
    inner: &InnerConfig,
    cut_cfg: &CutConfig,
    t: usize,
) -> Result<(RefineEvent, RefineRecord)> {
    let alphas = problem.bounds();
    let mu1 = cut_cfg.mu1.unwrap_or_else(|| problem.weak_convexity_mu());
    let mu2 = cut_cfg.mu2.unwrap_or(mu1);
    let init = |w: &Option<Snapshot>, block: usize| match (inner.warm_start, w) {
        (true, Some(s)) => InnerInit::Warm(s.clone()),
        _ if inner.start_from_outer => InnerInit::Warm(Snapshot::at(&state.x[block], &state.z[block])),
        _ => InnerInit::Zeros,
    };

    let trace_i = solve_level3(problem, &state.z[0], &state.z[1], &init(&cuts.warm3, 2), inner)?;
    let anchor_i = CutPoint {
        z: state.z.clone(),
        x2: Vec::new(),
        x3: state.x[2].clone(),
    };
    let scale = |c: Cut| if cut_cfg.normalize { c.normalized() } else { c };
    let cut_i = scale(generate_cut_i(
        problem,
        &trace_i,
        &anchor_i,
        mu1,
        inner.eps1,
        &alphas,
        cut_cfg.grad_mode,
        t,
    )?);
    let poly_i_before = cuts.poly_i.clone();
    cuts.poly_i.add(cut_i.clone())?;

    let trace_ii = solve_level2(
        problem,
        &state.z[0],
        &state.z[2],
        &state.x[2],
        &cuts.poly_i,
        &init(&cuts.warm2, 1),
        inner,
    )?;
    let anchor_ii = cut_point(state);
    let cut_ii = scale(generate_cut_ii(
        problem,
        &trace_ii,
        &anchor_ii,
        mu2,
        inner.eps2,
        &alphas,
        cut_cfg.grad_mode,
        t,
    )?);
    let poly_ii_before = cuts.poly_ii.clone();
    let p2_before = cuts.poly_ii.len();

    let pruned = drop_inactive(
        &cuts.poly_i,
        trace_ii.gamma_final(),
        &cuts.poly_ii,
        &duals.lambda,
        cut_cfg.dual_zero_tol,
    )?;
    let dropped_i = cuts.poly_i.len() - pruned.poly_i.len();
    let dropped_ii = cuts.poly_ii.len() - pruned.poly_ii.len();
    cuts.poly_i = pruned.poly_i;
    cuts.poly_ii = pruned.poly_ii;
    duals.lambda = pruned.lambda;
    cuts.poly_ii.add(cut_ii.clone())?;
    duals.lambda.push(0.0);

    cuts.warm3 = Some(trace_i.last().clone());
    let mut w2 = trace_ii.last().clone();
    w2.gamma = pruned.gamma;
    w2.slack = w2
        .slack
        .iter()
        .zip(trace_ii.gamma_final())
        .filter(|(_, g)| g.abs() > cut_cfg.dual_zero_tol)
        .map(|(s, _)| *s)
        .collect();
    cuts.warm2 = Some(w2);

    let event = RefineEvent {
        p2_before,
        p1_after: cuts.poly_i.len(),
        p2_after: cuts.poly_ii.len(),
        dropped_i,
        dropped_ii,
    };
    let record = RefineRecord {
        t,
        cut_i,
        trace_i,
        cut_ii,
        trace_ii,
        anchor_i,
        anchor_ii,
        poly_i_before,
        poly_ii_before,
    };
    Ok((event, record))
}

/// What a worker computes on: its view of the duals and the layer-II
/// polytope as of its last activation.
#[derive(Debug, Clone)]
struct WorkerView {
    duals: DualState,
    poly_ii: Polytope,
}

/// Runs the asynchronous algorithm until the squared gap reaches `outer.eps`
/// or `outer.max_iters` iterations. A non-finite state aborts the run; the
/// log up to the last good iteration is returned with status `Aborted`.
pub fn run<P: TrilevelProblem + ?Sized>(
    problem: &P,
    inner: &InnerConfig,
    outer: &OuterConfig,
    sched: &ScheduleConfig,
    cut_cfg: &CutConfig,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let dims = problem.dims();
    dims.validate()?;
    inner.validate()?;
    outer.validate()?;
    sched.validate(dims.n)?;
    let n = dims.n;
    let s = sched.effective_s(n);

    let mut state = opts.init.clone().unwrap_or_else(|| PrimalState::zeros(dims));
    state.check_dims(dims)?;
    if outer.project_bounds {
        state.project(&problem.bounds());
    }
    let mut duals = DualState::zeros(dims, 0);
    let mut cuts = CutState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let view = reformulate_consensus(problem);

    let mut records: Vec<IterRecord> = Vec::new();
    let mut refinements = Vec::new();
    let mut snapshot_iter = vec![0usize; n];
    let mut views = vec![
        WorkerView {
            duals: duals.clone(),
            poly_ii: cuts.poly_ii.clone(),
        };
        n
    ];
    let mut arrivals: Vec<f64> = (0..n).map(|j| sched.delay.round_trip(j, &mut rng)).collect();
    let mut clock = 0.0;
    let mut total_c1 = 0u64;
    let mut c2 = 0u64;
    let mut t_eps = None;
    let mut status = RunStatus::MaxIters;
    let mut abort_reason = None;
    let mut last_gap = f64::NAN;

    for t in 0..outer.max_iters {
        let step = (|| -> Result<IterRecord> {
            let mut events = Vec::new();
            let mut local_state = state.clone();
            let mut local_duals = duals.clone();
            let mut local_cuts = cuts.clone();
            let mut local_clock = clock;
            let mut local_c2 = c2;
            let mut do_refine = |st: &PrimalState,
                                 du: &mut DualState,
                                 cs: &mut CutState,
                                 events: &mut Vec<RefineEvent>,
                                 clock: &mut f64,
                                 c2: &mut u64|
             -> Result<()> {
                let (ev, rec) = refine(problem, st, du, cs, inner, cut_cfg, t)?;
                let cost = comm_cost_refinement(n, inner.rounds, &dims, ev.p2_before);
                *c2 += cost;
                *clock += sched.refine_latency * (cost / 32) as f64;
                events.push(ev);
                if opts.record_cuts {
                    refinements.push(rec);
                }
                Ok(())
            };
            if t == 0 && outer.t1 > 0 {
                do_refine(
                    &local_state,
                    &mut local_duals,
                    &mut local_cuts,
                    &mut events,
                    &mut local_clock,
                    &mut local_c2,
                )?;
                for v in views.iter_mut() {
                    v.duals = local_duals.clone();
                    v.poly_ii = local_cuts.poly_ii.clone();
                }
            }

            let staleness: Vec<usize> = snapshot_iter.iter().map(|&sj| t - sj).collect();
            let epoch = schedule_epoch(&arrivals, &staleness, s, sched.tau);
            local_clock = local_clock.max(epoch.clock);

            let updates = worker_updates(problem, &local_state, &views, &epoch.active, outer, sched.parallel)?;
            for (j, blocks) in epoch.active.iter().zip(updates) {
                for (i, b) in blocks.into_iter().enumerate() {
                    local_state.x[i][*j] = b;
                }
            }
            master_step(
                problem,
                &mut local_state,
                &mut local_duals,
                &local_cuts.poly_ii,
                outer,
                t,
            )?;
            debug_assert!(local_duals.lambda.iter().all(|l| *l >= 0.0 && *l <= outer.lambda_cap()));
            debug_assert!(local_duals
                .theta
                .iter()
                .flatten()
                .all(|v| v.abs() <= outer.theta_cap(dims.d1)));

            if (t + 1) % outer.t_pre == 0 && t < outer.t1 {
                do_refine(
                    &local_state,
                    &mut local_duals,
                    &mut local_cuts,
                    &mut events,
                    &mut local_clock,
                    &mut local_c2,
                )?;
            }
            if !local_state.is_finite() {
                return Err(AftoError::NonFinite {
                    what: "primal state".into(),
                    index: None,
                });
            }
            let gap = stationarity_gap(&local_state, &local_duals, &local_cuts.poly_ii, problem, outer)?.norm_sq();
            if !gap.is_finite() {
                return Err(AftoError::NonFinite {
                    what: "stationarity gap".into(),
                    index: None,
                });
            }
            let c1 = comm_cost_iter(epoch.active.len(), &dims, local_cuts.poly_ii.len());
            let record = IterRecord {
                t,
                active: epoch.active.clone(),
                staleness,
                sim_time: local_clock,
                gap_sq: gap,
                f: view.level_values(&local_state),
                p1_size: local_cuts.poly_i.len(),
                p2_size: local_cuts.poly_ii.len(),
                c1,
                c2_cum: local_c2,
                refinements: events,
            };

            // commit
            state = local_state;
            duals = local_duals;
            cuts = local_cuts;
            clock = local_clock;
            c2 = local_c2;
            for &j in &epoch.active {
                snapshot_iter[j] = t + 1;
                views[j] = WorkerView {
                    duals: duals.clone(),
                    poly_ii: cuts.poly_ii.clone(),
                };
                arrivals[j] = clock + sched.delay.round_trip(j, &mut rng);
            }
            Ok(record)
        })();

        match step {
            Ok(rec) => {
                total_c1 += rec.c1;
                last_gap = rec.gap_sq;
                let reached = rec.gap_sq <= outer.eps;
                records.push(rec);
                if reached && t_eps.is_none() {
                    t_eps = Some(t + 1);
                    status = RunStatus::Converged;
                    if outer.stop_on_eps {
                        break;
                    }
                }
            }
            Err(e @ (AftoError::NonFinite { .. } | AftoError::UnrollDiverged { .. })) => {
                status = RunStatus::Aborted;
                abort_reason = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let footer = RunFooter {
        status,
        t_eps,
        iterations: records.len(),
        eps: outer.eps,
        dims,
        s,
        tau: sched.tau,
        rounds: inner.rounds,
        total_c1,
        c2,
        sim_time: clock,
        final_gap_sq: last_gap,
        abort_reason,
    };
    Ok(RunOutcome {
        log: RunLog { records, footer },
        state,
        duals,
        poly_i: cuts.poly_i,
        poly_ii: cuts.poly_ii,
        refinements,
    })
}

fn worker_updates<P: TrilevelProblem + ?Sized>(
    problem: &P,
    state: &PrimalState,
    views: &[WorkerView],
    active: &[usize],
    outer: &OuterConfig,
    parallel: bool,
) -> Result<Vec<[Vec<f64>; 3]>> {
    let one = |j: usize| {
        worker_step(
            problem,
            j,
            [&state.x[0][j], &state.x[1][j], &state.x[2][j]],
            &views[j].duals,
            &views[j].poly_ii,
            outer,
        )
    };
    if !parallel || active.len() < 2 {
        return active.iter().map(|&j| one(j)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = active.iter().map(|&j| scope.spawn(move || one(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Paired async-versus-sync comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub threshold: f64,
    pub sync_time: Option<f64>,
    pub async_time: Option<f64>,
    /// `async_time / sync_time`.
    pub ratio: Option<f64>,
    pub sync_iters: Option<usize>,
    pub async_iters: Option<usize>,
    pub sync_status: RunStatus,
    pub async_status: RunStatus,
}

/// Runs the same problem in sync mode and with `sched` as given and reports
/// the simulated time each needs to bring the squared gap to `threshold`.
pub fn paired_bench<P: TrilevelProblem + ?Sized>(
    problem: &P,
    inner: &InnerConfig,
    outer: &OuterConfig,
    sched: &ScheduleConfig,
    cut_cfg: &CutConfig,
    threshold: f64,
) -> Result<(BenchSummary, RunLog, RunLog)> {
    let outer = OuterConfig {
        eps: outer.eps.min(threshold),
        ..*outer
    };
    let sync = ScheduleConfig {
        sync_mode: true,
        ..sched.clone()
    };
    let asy = ScheduleConfig {
        sync_mode: false,
        ..sched.clone()
    };
    let a = run(problem, inner, &outer, &sync, cut_cfg, &RunOptions::default())?.log;
    let b = run(problem, inner, &outer, &asy, cut_cfg, &RunOptions::default())?.log;
    let (st, at) = (a.time_to_gap(threshold), b.time_to_gap(threshold));
    let summary = BenchSummary {
        threshold,
        sync_time: st,
        async_time: at,
        ratio: match (st, at) {
            (Some(s), Some(x)) if s > 0.0 => Some(x / s),
            _ => None,
        },
        sync_iters: a.iters_to_gap(threshold),
        async_iters: b.iters_to_gap(threshold),
        sync_status: a.footer.status,
        async_status: b.footer.status,
    };
    Ok((summary, a, b))
}
