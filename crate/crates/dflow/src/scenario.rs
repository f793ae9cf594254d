//! Scenario-driven batch runner behind the `dflow` CLI: parse a JSON
//! description of one flow, one grid, and a list of checks; execute the
//! checks (optionally in parallel); emit a deterministic report array plus
//! a human-readable summary table.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{DflowError, Result};
use crate::expr::Expr;
use crate::functionals::{monotonicity_trace, FunctionalKind, FunctionalTrace};
use crate::geometry::{minimize_d, snapshot, Family, FlowSpec, Jet1, Jet2, StaticBase, TimeOrientation};
use crate::harness::{
    check_blowup_bound, check_entropy_convexity, check_evi, check_gradient_estimate,
    check_hj_preservation, check_wasserstein_contraction, CheckReport, EcVariant, EviVariant,
    GeVariant, HjVariant, Verdict, WcVariant,
};
use crate::lagrangian::{cost_table, hopf_lax, suggested_layers, CostFamily, CostKind, CostTable};
use crate::pde::{FieldTag, ScalarField, SpaceTimeGrid};
use crate::spacetime::{spacetime_positivity_scan, warped_product_check};
use crate::transport::DiscreteMeasure;

// Documented caps; chosen so every check stays at desk scale.
const MAX_NX: usize = 128;
const MAX_LAYERS: usize = 64;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowBlock {
    pub family: String,
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub r_sq: Option<String>,
    #[serde(default)]
    pub a: Option<Vec<String>>,
    #[serde(default)]
    pub u: Option<String>,
    #[serde(default)]
    pub weight: Option<String>,
    pub interval: (f64, f64),
    #[serde(default)]
    pub orientation: Option<String>,
    #[serde(default)]
    pub reference_time: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(default = "default_nx")]
    pub n_x: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_layers")]
    pub k_layers: usize,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_nx() -> usize {
    32
}
fn default_dt() -> f64 {
    2e-3
}
fn default_layers() -> usize {
    8
}
fn default_window() -> usize {
    5
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock {
            n_x: default_nx(),
            dt: default_dt(),
            k_layers: default_layers(),
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub directory: Option<String>,
    #[serde(default)]
    pub formats: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TraceBlock {
    pub tau_lo: f64,
    pub tau_hi: f64,
    #[serde(default)]
    pub tau_ref: Option<f64>,
    #[serde(default = "default_trace_steps")]
    pub steps: usize,
    #[serde(default)]
    pub density: Option<String>,
}

fn default_trace_steps() -> usize {
    64
}

/// One check request; the `id` tag selects the harness operation and the
/// remaining fields are its parameters (defaults documented per field).
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckBlock {
    /// Pointwise minimization of `D` over a sample sweep.
    DMinimum {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    GradientEstimate {
        variant: String,
        lo: f64,
        hi: f64,
        #[serde(default = "one")]
        lambda: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        n_param: Option<f64>,
        #[serde(default)]
        v: Option<String>,
    },
    WassersteinContraction {
        variant: String,
        lo: f64,
        hi: f64,
        #[serde(default)]
        lag: Option<f64>,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        cap_s: Option<f64>,
        #[serde(default)]
        cap_t: Option<f64>,
        #[serde(default)]
        n_param: Option<f64>,
        #[serde(default)]
        sigma2: Option<f64>,
        #[serde(default)]
        tau2: Option<f64>,
        #[serde(default)]
        mu: Option<String>,
        #[serde(default)]
        nu: Option<String>,
    },
    EntropyConvexity {
        variant: String,
        lo: f64,
        hi: f64,
        #[serde(default)]
        mid_layer: Option<usize>,
        #[serde(default)]
        eps: f64,
        #[serde(default)]
        mu: Option<String>,
        #[serde(default)]
        nu: Option<String>,
    },
    Evi {
        variant: String,
        lo: f64,
        hi: f64,
        probe: f64,
        #[serde(default = "default_dini")]
        dini_h: f64,
        #[serde(default)]
        mu: Option<String>,
        #[serde(default)]
        nu: Option<String>,
    },
    /// Steady Hamilton-Jacobi preservation for a Hopf-Lax trajectory grown
    /// from the potential `phi`.
    HjPreservation {
        phi: String,
        lo: f64,
        hi: f64,
        lag: f64,
        #[serde(default = "default_hj_samples")]
        samples: usize,
    },
    BlowupBound { tau: f64, sigmas: Vec<f64> },
    SpacetimePositivity {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    WarpedProduct {
        t: f64,
        x: f64,
        k: usize,
        fiber_ric_lower: f64,
    },
}

fn default_samples() -> usize {
    24
}
fn one() -> f64 {
    1.0
}
fn default_dini() -> f64 {
    0.02
}
fn default_hj_samples() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub flow: FlowBlock,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub checks: Vec<CheckBlock>,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub trace: Option<TraceBlock>,
}

fn parse_expr(src: &str, what: &str) -> Result<Expr> {
    Expr::parse(src)
        .map_err(|e| DflowError::Parse(format!("{what}: {e}")))
}

pub fn build_flow(block: &FlowBlock) -> Result<FlowSpec> {
    let orientation = match block.orientation.as_deref() {
        None | Some("forward") => TimeOrientation::Forward,
        Some("backward") => TimeOrientation::Backward,
        Some(other) => {
            return Err(DflowError::Parse(format!(
                "flow.orientation: unknown orientation {other:?}"
            )))
        }
    };
    let family = match block.family.as_str() {
        "sphere" => {
            let n = block.dimension.unwrap_or(2);
            let src = block.r_sq.as_deref().ok_or_else(|| {
                DflowError::Parse("flow.r_sq: required for the sphere family".into())
            })?;
            Family::RoundSphere {
                n,
                r_sq: Jet1::new(parse_expr(src, "flow.r_sq")?)?,
            }
        }
        "torus" => {
            let a = block.a.as_ref().ok_or_else(|| {
                DflowError::Parse("flow.a: required for the torus family".into())
            })?;
            let mut jets = Vec::new();
            for (i, src) in a.iter().enumerate() {
                jets.push(Jet1::new(parse_expr(src, &format!("flow.a[{i}]"))?)?);
            }
            Family::FlatTorus { a: jets }
        }
        "conformal_circle" => {
            let src = block.u.as_deref().ok_or_else(|| {
                DflowError::Parse("flow.u: required for the conformal circle".into())
            })?;
            Family::CircleConformal {
                u: Jet2::new(parse_expr(src, "flow.u")?),
            }
        }
        "weighted_circle" => {
            let u = block.u.as_deref().unwrap_or("0");
            let w = block.weight.as_deref().ok_or_else(|| {
                DflowError::Parse("flow.weight: required for the weighted circle".into())
            })?;
            Family::WeightedCircle {
                u: Jet2::new(parse_expr(u, "flow.u")?),
                weight: Jet2::new(parse_expr(w, "flow.weight")?),
            }
        }
        "static_circle" => {
            let u = block.u.as_deref().unwrap_or("0");
            Family::StaticManifold {
                base: StaticBase::Circle {
                    u: Jet2::new(parse_expr(u, "flow.u")?),
                },
            }
        }
        other => {
            return Err(DflowError::Parse(format!(
                "flow.family: unknown family {other:?}"
            )))
        }
    };
    let reference = block
        .reference_time
        .unwrap_or(block.interval.0 + block.interval.1);
    FlowSpec::new(family, block.interval, orientation, reference)
}

/// Parse and validate a scenario document.
pub fn parse_scenario(document: &str) -> Result<ScenarioConfig> {
    let config: ScenarioConfig = serde_json::from_str(document)
        .map_err(|e| DflowError::Parse(format!("scenario: {e}")))?;
    build_flow(&config.flow)?;
    if config.grid.n_x == 0 || config.grid.n_x > MAX_NX {
        return Err(DflowError::Parse(format!(
            "grid.n_x: must lie in 1..={MAX_NX}"
        )));
    }
    if !(config.grid.dt > 0.0) {
        return Err(DflowError::Parse("grid.dt: must be positive".into()));
    }
    if config.grid.k_layers == 0 || config.grid.k_layers > MAX_LAYERS {
        return Err(DflowError::Parse(format!(
            "grid.k_layers: must lie in 1..={MAX_LAYERS}"
        )));
    }
    if config.grid.window == 0 {
        return Err(DflowError::Parse("grid.window: must be positive".into()));
    }
    Ok(config)
}

fn density_measure(
    flow: &FlowSpec,
    grid: &SpaceTimeGrid,
    t_fwd: f64,
    density: Option<&str>,
) -> Result<DiscreteMeasure> {
    let dv = grid.dv(flow, t_fwd);
    match density {
        None => Ok(DiscreteMeasure::uniform(&dv, t_fwd)),
        Some(src) => {
            let e = parse_expr(src, "measure density")?;
            let mut w = DVector::zeros(grid.n_x);
            for i in 0..grid.n_x {
                let v = e.eval(t_fwd, grid.theta[i]);
                if !(v > 0.0) {
                    return Err(DflowError::Domain(format!(
                        "measure density must be positive; {src:?} gives {v} at theta = {}",
                        grid.theta[i]
                    )));
                }
                w[i] = v * dv[i];
            }
            let total = w.sum();
            w /= total;
            Ok(DiscreteMeasure::new(w, dv, t_fwd))
        }
    }
}

fn ge_variant(name: &str, n_param: Option<f64>) -> Result<GeVariant> {
    Ok(match name {
        "l0" => GeVariant::L0,
        "lminus" => GeVariant::Lminus,
        "lplus" => GeVariant::Lplus,
        "weighted_l0" => GeVariant::WeightedL0,
        "dim_l0" => GeVariant::DimL0 {
            n_param: n_param.ok_or_else(|| {
                DflowError::Parse("gradient_estimate.n_param: required for dim_l0".into())
            })?,
        },
        other => {
            return Err(DflowError::Parse(format!(
                "gradient_estimate.variant: unknown variant {other:?}"
            )))
        }
    })
}

fn require(opt: Option<f64>, path: &str) -> Result<f64> {
    opt.ok_or_else(|| DflowError::Parse(format!("{path}: required for this variant")))
}

#[allow(clippy::too_many_arguments)]
fn run_check(
    flow: &FlowSpec,
    grid_block: &GridBlock,
    check: &CheckBlock,
) -> Result<CheckReport> {
    let span = flow.interval;
    let grid = SpaceTimeGrid::new(flow, span.0, span.1, grid_block.n_x, grid_block.dt)?;
    let k = grid_block.k_layers;
    let window = grid_block.window;
    match check {
        CheckBlock::DMinimum { samples } => {
            let mut worst = f64::INFINITY;
            let mut witness = None;
            let mut unbounded = false;
            for i in 0..*samples {
                let t_fwd = span.0 + (span.1 - span.0) * (i as f64 + 0.5) / *samples as f64;
                for x in [0.0, 1.3, 2.9, 4.4] {
                    let snap = snapshot(flow, flow.from_forward_time(t_fwd), x)?;
                    let min = minimize_d(&snap);
                    match min.min_value {
                        None => {
                            unbounded = true;
                            worst = f64::NEG_INFINITY;
                            witness = Some(crate::harness::Witness {
                                time: t_fwd,
                                location: x,
                                detail: "D unbounded below".into(),
                            });
                        }
                        Some(v) if v < worst => {
                            worst = v;
                            witness = Some(crate::harness::Witness {
                                time: t_fwd,
                                location: x,
                                detail: format!("argmin {:?}", min.argmin.map(|a| a.as_slice().to_vec())),
                            });
                        }
                        _ => {}
                    }
                }
            }
            let params = serde_json::json!({ "samples": samples, "unbounded": unbounded });
            let margin = if unbounded { -f64::INFINITY } else { worst };
            Ok(CheckReport::conclude(
                "d_minimum",
                None,
                params,
                margin,
                1e-9,
                witness,
                Vec::new(),
                false,
            ))
        }
        CheckBlock::GradientEstimate {
            variant,
            lo,
            hi,
            lambda,
            shift,
            n_param,
            v,
        } => {
            let var = ge_variant(variant, *n_param)?;
            let backward = matches!(var, GeVariant::Lminus | GeVariant::DimL0 { .. });
            let src_t = flow.to_forward_time(if backward { *hi } else { *lo });
            let field = match v {
                None => ScalarField::constant(&grid, 0.0, src_t),
                Some(src) => {
                    let e = parse_expr(src, "gradient_estimate.v")?;
                    ScalarField::from_fn(&grid, src_t, FieldTag::HeatSlice, |th| e.eval(src_t, th))
                }
            };
            check_gradient_estimate(flow, &grid, var, &field, *lo, *hi, *lambda, *shift)
        }
        CheckBlock::WassersteinContraction {
            variant,
            lo,
            hi,
            lag,
            alpha,
            cap_s,
            cap_t,
            n_param,
            sigma2,
            tau2,
            mu,
            nu,
        } => {
            let var = match variant.as_str() {
                "l0" => WcVariant::L0 {
                    lag: require(*lag, "wasserstein_contraction.lag")?,
                },
                "lminus" => WcVariant::Lminus {
                    alpha: require(*alpha, "wasserstein_contraction.alpha")?,
                },
                "lplus" => WcVariant::Lplus {
                    alpha: require(*alpha, "wasserstein_contraction.alpha")?,
                },
                "dim_l0" => WcVariant::DimL0 {
                    cap_s: require(*cap_s, "wasserstein_contraction.cap_s")?,
                    cap_t: require(*cap_t, "wasserstein_contraction.cap_t")?,
                    n_param: require(*n_param, "wasserstein_contraction.n_param")?,
                },
                "time_translation" => WcVariant::TimeTranslation {
                    sigma2: require(*sigma2, "wasserstein_contraction.sigma2")?,
                    tau2: require(*tau2, "wasserstein_contraction.tau2")?,
                },
                "kuwada_static" => WcVariant::KuwadaStatic,
                other => {
                    return Err(DflowError::Parse(format!(
                        "wasserstein_contraction.variant: unknown variant {other:?}"
                    )))
                }
            };
            // Slice times the harness expects the input measures at.
            let (mu_t, nu_t) = match var {
                WcVariant::L0 { lag } => (*lo + lag, *hi + lag),
                WcVariant::Lplus { alpha } => (alpha * *lo, alpha * *hi),
                WcVariant::KuwadaStatic => (*lo, *hi),
                _ => (flow.to_forward_time(*lo), flow.to_forward_time(*hi)),
            };
            let m = density_measure(flow, &grid, mu_t, mu.as_deref())?;
            let n = density_measure(flow, &grid, nu_t, nu.as_deref())?;
            check_wasserstein_contraction(flow, &grid, var, &m, &n, *lo, *hi, k, window)
        }
        CheckBlock::EntropyConvexity {
            variant,
            lo,
            hi,
            mid_layer,
            eps,
            mu,
            nu,
        } => {
            let var = match variant.as_str() {
                "l0" => EcVariant::L0,
                "lminus" => EcVariant::Lminus,
                "dim_l0" => EcVariant::DimL0,
                other => {
                    return Err(DflowError::Parse(format!(
                        "entropy_convexity.variant: unknown variant {other:?}"
                    )))
                }
            };
            let m = density_measure(flow, &grid, flow.to_forward_time(*lo), mu.as_deref())?;
            let n = density_measure(flow, &grid, flow.to_forward_time(*hi), nu.as_deref())?;
            let mid = mid_layer.unwrap_or(k / 2);
            check_entropy_convexity(flow, &grid, var, &m, &n, *lo, *hi, mid, k, window, *eps)
        }
        CheckBlock::Evi {
            variant,
            lo,
            hi,
            probe,
            dini_h,
            mu,
            nu,
        } => {
            let var = match variant.as_str() {
                "l0_first" => EviVariant::L0First,
                "l0_second" => EviVariant::L0Second,
                "lminus_first" => EviVariant::LminusFirst,
                "lminus_second" => EviVariant::LminusSecond,
                other => {
                    return Err(DflowError::Parse(format!(
                        "evi.variant: unknown variant {other:?}"
                    )))
                }
            };
            let (mu_t, nu_t) = match var {
                EviVariant::L0First | EviVariant::L0Second => (*lo, *hi),
                EviVariant::LminusFirst | EviVariant::LminusSecond => {
                    (flow.to_forward_time(*hi), flow.to_forward_time(*lo))
                }
            };
            let m = density_measure(flow, &grid, mu_t, mu.as_deref())?;
            let n = density_measure(flow, &grid, nu_t, nu.as_deref())?;
            check_evi(flow, &grid, var, &m, &n, *lo, *hi, *probe, *dini_h, k, window)
        }
        CheckBlock::HjPreservation {
            phi,
            lo,
            hi,
            lag,
            samples,
        } => {
            if *samples < 3 {
                return Err(DflowError::Parse(
                    "hj_preservation.samples: need at least 3".into(),
                ));
            }
            let e = parse_expr(phi, "hj_preservation.phi")?;
            let fam = CostFamily::new(CostKind::L0);
            let phi0 = ScalarField::from_fn(&grid, *lo, FieldTag::Potential, |th| e.eval(*lo, th));
            let mut trajectory = Vec::with_capacity(*samples);
            for j in 0..*samples {
                let r = *lo + (*hi - *lo) * j as f64 / (*samples - 1) as f64;
                let layers = suggested_layers(&grid, *lo, r, window).max(1);
                trajectory.push((r, hopf_lax(&phi0, flow, &fam, *lo, r, &grid, layers, window)?));
            }
            let mu = density_measure(flow, &grid, flow.to_forward_time(*lo), None)?;
            check_hj_preservation(
                flow,
                &grid,
                &trajectory,
                HjVariant::L0 { lag: *lag },
                &mu,
                k,
                window,
                // Hopf-Lax solves with equality up to path quantization.
                1e-2,
            )
        }
        CheckBlock::BlowupBound { tau, sigmas } => check_blowup_bound(flow, &grid, *tau, sigmas),
        CheckBlock::SpacetimePositivity { samples } => {
            let pts: Vec<(f64, f64)> = (0..*samples)
                .flat_map(|i| {
                    let t = span.0 + (span.1 - span.0) * (i as f64 + 0.5) / *samples as f64;
                    [(t, 0.4), (t, 2.5)]
                })
                .collect();
            spacetime_positivity_scan(flow, &pts)
        }
        CheckBlock::WarpedProduct {
            t,
            x,
            k,
            fiber_ric_lower,
        } => warped_product_check(flow, *t, *x, *k, *fiber_ric_lower),
    }
}

pub struct ScenarioOutcome {
    pub reports: Vec<CheckReport>,
    pub exit_code: i32,
}

/// Execute every check of a parsed scenario. Runtime errors become failing
/// report rows instead of aborting the batch; report order matches the
/// config order regardless of parallelism.
pub fn run_scenario(config: &ScenarioConfig, parallel: Option<usize>) -> Result<ScenarioOutcome> {
    let flow = build_flow(&config.flow)?;
    let one_check = |(idx, check): (usize, &CheckBlock)| -> CheckReport {
        match run_check(&flow, &config.grid, check) {
            Ok(rep) => rep,
            Err(e) => CheckReport::conclude(
                &format!("check[{idx}]"),
                None,
                serde_json::json!({ "index": idx }),
                f64::NEG_INFINITY,
                0.0,
                None,
                vec![format!("error: {e}")],
                true,
            ),
        }
    };
    let indexed: Vec<(usize, &CheckBlock)> = config.checks.iter().enumerate().collect();
    let reports: Vec<CheckReport> = match parallel {
        Some(threads) if threads > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| DflowError::Numerical(format!("thread pool: {e}")))?;
            pool.install(|| indexed.par_iter().map(|p| one_check(*p)).collect())
        }
        _ => indexed.iter().map(|p| one_check(*p)).collect(),
    };
    let any_fail = reports.iter().any(|r| r.verdict == Verdict::Fail);
    let any_indeterminate = reports.iter().any(|r| r.indeterminate);
    let exit_code = if any_fail {
        1
    } else if any_indeterminate {
        2
    } else {
        0
    };
    Ok(ScenarioOutcome { reports, exit_code })
}

pub fn summary_table(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>9} {:>13} {:>13}  {}\n",
        "check", "verdict", "margin", "tolerance", "flags"
    ));
    for r in reports {
        let verdict = match r.verdict {
            Verdict::Pass => "pass",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "n/a",
        };
        let flags = if r.indeterminate { "indeterminate" } else { "" };
        out.push_str(&format!(
            "{:<28} {:>9} {:>13.4e} {:>13.4e}  {}\n",
            r.check_id, verdict, r.worst_margin, r.tolerance, flags
        ));
    }
    out
}

/// Functional trace for the `trace` subcommand, run on the configured flow.
pub fn run_trace(config: &ScenarioConfig, functional: FunctionalKind) -> Result<FunctionalTrace> {
    let flow = build_flow(&config.flow)?;
    let block = config
        .trace
        .as_ref()
        .ok_or_else(|| DflowError::Parse("trace: block required for the trace command".into()))?;
    let grid = SpaceTimeGrid::new(
        &flow,
        flow.interval.0,
        flow.interval.1,
        config.grid.n_x,
        config.grid.dt,
    )?;
    // Backward time tau corresponds to forward time tau_ref - tau; the
    // initial measure lives at the start of the trace.
    let tau_ref = block.tau_ref.unwrap_or(flow.reference_time);
    let mu = density_measure(&flow, &grid, tau_ref - block.tau_lo, block.density.as_deref())?;
    monotonicity_trace(
        &mu,
        &flow,
        &grid,
        tau_ref,
        block.tau_lo,
        block.tau_hi,
        functional,
        block.steps,
    )
}

/// Cost-table dump for the `cost-table` subcommand.
pub fn run_cost_table(
    config: &ScenarioConfig,
    kind: CostKind,
    s: f64,
    t: f64,
) -> Result<CostTable> {
    let flow = build_flow(&config.flow)?;
    let grid = SpaceTimeGrid::new(
        &flow,
        flow.interval.0,
        flow.interval.1,
        config.grid.n_x,
        config.grid.dt,
    )?;
    let family = CostFamily::new(kind);
    cost_table(
        &flow,
        &family,
        s,
        t,
        &grid,
        config.grid.k_layers,
        config.grid.window,
    )
}

pub fn cost_table_csv(table: &CostTable) -> String {
    let n = table.values.nrows();
    let mut out = String::from("i\\j");
    for j in 0..table.values.ncols() {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&i.to_string());
        for j in 0..table.values.ncols() {
            out.push_str(&format!(",{:.12e}", table.value(i, j)));
        }
        out.push('\n');
    }
    out
}
