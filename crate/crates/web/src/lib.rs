//! Browser bindings. Every export takes a JSON parameter object (missing keys
//! fall back to the defaults below) and returns a JSON string.

use afto::cuts::Layer;
use afto::diagnostics::{check_cut, estimate_h_mu, SamplingConfig};
use afto::harness::{paired_bench, refine, run, CutConfig, CutState, DelayModel, RunLog, RunOptions};
use afto::inner::{h_at, InnerConfig};
use afto::outer::OuterConfig;
use afto::problem::{DualState, PrimalState, TrilevelProblem};
use afto::problems::{build_quadratic_problem, QuadraticProblem, QuadraticSpec};
use afto::{AftoError, Result, ScheduleConfig};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn parse<T: DeserializeOwned>(json: &str) -> Result<T> {
    let text = if json.trim().is_empty() { "{}" } else { json };
    serde_json::from_str(text).map_err(|e| AftoError::Config(e.to_string()))
}

fn export<T: Serialize>(res: Result<T>) -> std::result::Result<String, JsError> {
    let v = res.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

fn quadratic(d: usize, workers: usize, seed: u64, heterogeneity: f64) -> Result<QuadraticProblem> {
    Ok(build_quadratic_problem(&QuadraticSpec {
        d1: d,
        d2: d,
        d3: d,
        workers,
        seed,
        heterogeneity,
        ..QuadraticSpec::default()
    })?
    .0)
}

fn inner(rounds: usize, eta: f64, eps: f64) -> InnerConfig {
    InnerConfig {
        rounds,
        eta_x: eta,
        eta_z: eta,
        eta_phi: eta,
        eps1: eps,
        eps2: eps,
        ..InnerConfig::default()
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CurveParams {
    pub workers: usize,
    pub s: usize,
    pub tau: usize,
    /// Slowdown of the last worker.
    pub straggler: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub threshold: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams {
            workers: 4,
            s: 3,
            tau: 10,
            straggler: 5.0,
            seed: 0,
            max_iters: 1500,
            threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub time: Vec<f64>,
    pub gap: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    pub sync: Curve,
    #[serde(rename = "async")]
    pub asynchronous: Curve,
    pub sync_time: Option<f64>,
    pub async_time: Option<f64>,
    pub ratio: Option<f64>,
}

fn curve(log: &RunLog, keep: usize) -> Curve {
    let stride = log.records.len().div_ceil(keep).max(1);
    let pts: Vec<_> = log.records.iter().step_by(stride).collect();
    Curve {
        time: pts.iter().map(|r| r.sim_time).collect(),
        gap: pts.iter().map(|r| r.gap_sq).collect(),
    }
}

/// Sync and async runs of a 1-d quadratic with one straggler, as
/// (simulated time, squared gap) curves.
pub fn async_vs_sync(p: &CurveParams) -> Result<Curves> {
    let problem = quadratic(1, p.workers, p.seed, 0.0)?;
    let outer = OuterConfig {
        eta_x: [0.1; 3],
        eta_z: [0.1; 3],
        eta_lambda: 0.3,
        eta_theta: 0.5,
        t1: 200,
        t_pre: 10,
        max_iters: p.max_iters,
        ..OuterConfig::default()
    };
    let sched = ScheduleConfig {
        s: p.s,
        tau: p.tau,
        delay: DelayModel::Straggler {
            ids: vec![p.workers.saturating_sub(1)],
            factor: p.straggler,
            compute: 1.0,
            link: 0.0,
        },
        seed: p.seed,
        ..ScheduleConfig::default()
    };
    sched.validate(p.workers)?;
    let (summary, sync, asy) = paired_bench(
        &problem,
        &inner(30, 0.2, 1e-5),
        &outer,
        &sched,
        &CutConfig::default(),
        p.threshold,
    )?;
    Ok(Curves {
        sync: curve(&sync, 400),
        asynchronous: curve(&asy, 400),
        sync_time: summary.sync_time,
        async_time: summary.async_time,
        ratio: summary.ratio,
    })
}

#[wasm_bindgen(js_name = asyncVsSync)]
pub fn async_vs_sync_js(params: &str) -> std::result::Result<String, JsError> {
    export(parse(params).and_then(|p| async_vs_sync(&p)))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SliceParams {
    pub seed: u64,
    pub rounds: usize,
    pub eps: f64,
    pub mu: f64,
    pub iters: usize,
    pub t_pre: usize,
    /// Half-width of the plotted window.
    pub span: f64,
    pub grid: usize,
}

impl Default for SliceParams {
    fn default() -> Self {
        SliceParams {
            seed: 0,
            rounds: 5,
            eps: 0.05,
            mu: 0.0,
            iters: 40,
            t_pre: 5,
            span: 1.0,
            grid: 60,
        }
    }
}

/// `a x + b y <= c` in slice coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct Line {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub born_at: usize,
    /// Still in the layer-I polytope at the end of the run.
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Slice {
    pub center: [f64; 2],
    pub span: f64,
    /// Constraint values, `values[row][col]` with rows along the second axis.
    pub values: Vec<Vec<f64>>,
    pub eps: f64,
    pub lines: Vec<Line>,
}

/// Layer-I cuts of a one-worker 1-d quadratic, cut down to the plane of
/// (`x3`, `z3`) through the last anchor, over the constraint function of the
/// last level-3 unroll.
pub fn polytope_slice(p: &SliceParams) -> Result<Slice> {
    let problem = quadratic(1, 1, p.seed, 0.0)?;
    let cfg = inner(p.rounds, 0.1, p.eps);
    let outer = OuterConfig {
        max_iters: p.iters,
        t_pre: p.t_pre.max(1),
        t1: p.iters,
        ..OuterConfig::default()
    };
    let cuts = CutConfig {
        mu1: Some(p.mu),
        mu2: Some(p.mu),
        ..CutConfig::default()
    };
    let out = run(
        &problem,
        &cfg,
        &outer,
        &ScheduleConfig::default(),
        &cuts,
        &RunOptions {
            init: None,
            record_cuts: true,
        },
    )?;
    let last = out
        .refinements
        .last()
        .ok_or_else(|| AftoError::Config("no refinement happened".into()))?;
    let anchor = &last.anchor_i;
    let center = [anchor.x3[0][0], anchor.z[2][0]];
    let n = p.grid.clamp(2, 400);
    let step = 2.0 * p.span / (n - 1) as f64;
    let mut pt = anchor.clone();
    let values = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| {
                    pt.x3[0][0] = center[0] - p.span + c as f64 * step;
                    pt.z[2][0] = center[1] - p.span + r as f64 * step;
                    h_at(&problem, &last.trace_i, &pt).unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect();
    let lines = out
        .refinements
        .iter()
        .map(|rec| {
            let cut = &rec.cut_i;
            let (a, b) = (cut.coef.x3[0][0], cut.coef.z[2][0]);
            let fixed = cut.coef.z[0][0] * anchor.z[0][0] + cut.coef.z[1][0] * anchor.z[1][0];
            Line {
                a,
                b,
                c: cut.c - fixed,
                born_at: cut.born_at,
                kept: out.poly_i.cuts.iter().any(|k| k.born_at == cut.born_at && k.c == cut.c),
            }
        })
        .collect();
    Ok(Slice {
        center,
        span: p.span,
        values,
        eps: p.eps,
        lines,
    })
}

#[wasm_bindgen(js_name = polytopeSlice)]
pub fn polytope_slice_js(params: &str) -> std::result::Result<String, JsError> {
    export(parse(params).and_then(|p| polytope_slice(&p)))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct MuParams {
    pub d: usize,
    pub workers: usize,
    pub seed: u64,
    pub heterogeneity: f64,
    pub rounds: usize,
    pub eta: f64,
    pub points: usize,
    pub radius: f64,
    /// Feasible points checked per cut.
    pub samples: usize,
}

impl Default for MuParams {
    fn default() -> Self {
        MuParams {
            d: 2,
            workers: 2,
            seed: 0,
            heterogeneity: 0.5,
            rounds: 3,
            eta: 0.1,
            points: 20,
            radius: 1.0,
            samples: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MuLayer {
    pub mu: f64,
    /// Violations of the cut built with the estimated modulus.
    pub violations: usize,
    /// Violations of the plain linearization (modulus zero).
    pub violations_linear: usize,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MuReport {
    pub layer_i: MuLayer,
    pub layer_ii: MuLayer,
}

/// Estimates both moduli at the starting point and checks the cuts built
/// with them against the plain linearizations.
pub fn mu_report(p: &MuParams) -> Result<MuReport> {
    let problem = quadratic(p.d, p.workers, p.seed, p.heterogeneity)?;
    let cfg = inner(p.rounds, p.eta, 1e-2);
    let state = PrimalState::zeros(problem.dims());
    let layer = |mu: Option<[f64; 2]>| -> Result<_> {
        let mut duals = DualState::zeros(problem.dims(), 0);
        let cuts = CutConfig {
            mu1: mu.map(|m| m[0]),
            mu2: mu.map(|m| m[1]),
            ..CutConfig::default()
        };
        let (_, rec) = refine(&problem, &state, &mut duals, &mut CutState::new(), &cfg, &cuts, 0)?;
        Ok(rec)
    };
    let rec = layer(Some([0.0, 0.0]))?;
    let mu_i = estimate_h_mu(&problem, &rec.trace_i, &rec.anchor_i, p.points, p.radius, p.seed)?;
    let mu_ii = estimate_h_mu(&problem, &rec.trace_ii, &rec.anchor_ii, p.points, p.radius, p.seed)?;
    let with_mu = layer(Some([mu_i, mu_ii]))?;
    let sampling = SamplingConfig {
        samples: p.samples,
        radius: p.radius,
        seed: p.seed,
        ..SamplingConfig::default()
    };
    let report = |which: Layer, mu: f64| {
        let (plain, inflated, eps) = match which {
            Layer::I => (&rec.cut_i, &with_mu.cut_i, cfg.eps1),
            Layer::II => (&rec.cut_ii, &with_mu.cut_ii, cfg.eps2),
        };
        let (trace, anchor) = match which {
            Layer::I => (&rec.trace_i, &rec.anchor_i),
            Layer::II => (&rec.trace_ii, &rec.anchor_ii),
        };
        let a = check_cut(&problem, inflated, trace, anchor, eps, &sampling);
        let b = check_cut(&problem, plain, trace, anchor, eps, &sampling);
        MuLayer {
            mu,
            violations: a.violations,
            violations_linear: b.violations,
            checked: a.checked,
        }
    };
    Ok(MuReport {
        layer_i: report(Layer::I, mu_i),
        layer_ii: report(Layer::II, mu_ii),
    })
}

#[wasm_bindgen(js_name = estimateMu)]
pub fn estimate_mu_js(params: &str) -> std::result::Result<String, JsError> {
    export(parse(params).and_then(|p| mu_report(&p)))
}
