//! Action costs on model flows: the three Lagrangian families (steady,
//! shrinking, expanding), their Hamiltonians, discrete cost tables by dynamic
//! programming over time layers, the Hopf-Lax semigroup, and Hamilton-Jacobi
//! residuals.
//!
//! Time conventions: every time argument in this module is in the *family's
//! own* variable — forward time for the steady/expanding kinds, backward time
//! for the shrinking kind. The flow's orientation must match the kind; the
//! conversion to internal forward time happens at the geometry boundary.

use crate::error::{DflowError, Result};
use crate::geometry::{FlowSpec, TimeOrientation};
use crate::pde::{FieldTag, ScalarField, SpaceTimeGrid};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CostKind {
    /// Steady: weight 1, runs in forward time.
    L0,
    /// Shrinking: weight `sqrt(tau + shift)`, runs in backward time.
    Lminus,
    /// Expanding: weight `sqrt(t + shift)`, runs in forward time.
    Lplus,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostFamily {
    pub kind: CostKind,
    /// Time-origin shift applied inside the weight.
    pub shift: f64,
    /// Use the interval-normalized cost (`(t-s) L_0`, `(sqrt(tau)-sqrt(sigma)) L_-+`).
    pub normalized: bool,
    /// Use the weighted trace `S_U` in place of `S`.
    pub weighted: bool,
}

impl CostFamily {
    pub fn new(kind: CostKind) -> Self {
        CostFamily {
            kind,
            shift: 0.0,
            normalized: false,
            weighted: false,
        }
    }

    pub fn shifted(mut self, t0: f64) -> Self {
        self.shift = t0;
        self
    }

    pub fn normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    pub fn weighted(mut self) -> Self {
        self.weighted = true;
        self
    }

    /// Per-time weight in front of `|v|^2 + S` (no interval normalization).
    pub fn weight(&self, r: f64) -> Result<f64> {
        match self.kind {
            CostKind::L0 => Ok(1.0),
            CostKind::Lminus | CostKind::Lplus => {
                let a = r + self.shift;
                if a <= 0.0 {
                    return Err(DflowError::Domain(format!(
                        "shifted time {a} must be positive for this cost family"
                    )));
                }
                Ok(a.sqrt())
            }
        }
    }

    /// Interval factor of the normalized (`~L`) variants.
    pub fn norm_factor(&self, s: f64, t: f64) -> Result<f64> {
        if t <= s {
            return Err(DflowError::Domain(format!("degenerate interval [{s}, {t}]")));
        }
        match self.kind {
            CostKind::L0 => Ok(t - s),
            CostKind::Lminus | CostKind::Lplus => {
                if s + self.shift <= 0.0 {
                    return Err(DflowError::Domain(
                        "shifted start time must be positive".into(),
                    ));
                }
                Ok((t + self.shift).sqrt() - (s + self.shift).sqrt())
            }
        }
    }

    /// Weight including the normalization factor of the interval, if the
    /// family is normalized.
    pub fn effective_weight(&self, r: f64, interval: (f64, f64)) -> Result<f64> {
        let w = self.weight(r)?;
        if self.normalized {
            Ok(w * self.norm_factor(interval.0, interval.1)?)
        } else {
            Ok(w)
        }
    }

    pub fn check_flow(&self, flow: &FlowSpec) -> Result<()> {
        let want = match self.kind {
            CostKind::L0 | CostKind::Lplus => TimeOrientation::Forward,
            CostKind::Lminus => TimeOrientation::Backward,
        };
        if flow.orientation != want {
            return Err(DflowError::Parameter(format!(
                "cost kind {:?} needs a {:?}-oriented flow",
                self.kind, want
            )));
        }
        if self.weighted && !flow.is_weighted() {
            return Err(DflowError::Parameter(
                "weighted cost family on an unweighted flow".into(),
            ));
        }
        Ok(())
    }

    fn trace(&self, flow: &FlowSpec, t_fwd: f64, theta: f64) -> f64 {
        if self.weighted {
            flow.s_u_scalar(t_fwd, theta)
        } else {
            flow.s_scalar(t_fwd, theta)
        }
    }
}

/// Pointwise Lagrangian `(1/2) weight(r) (|v|^2_g + S_r)` at `(x, r)`.
/// `v` holds coordinate components of the tangent vector; `r` is in the
/// family's time variable. The interval normalization does not enter here.
pub fn lagrangian_eval(
    family: &CostFamily,
    v: &DVector<f64>,
    x: f64,
    r: f64,
    flow: &FlowSpec,
) -> Result<f64> {
    family.check_flow(flow)?;
    let w = family.weight(r)?;
    let snap = crate::geometry::snapshot(flow, r, x)?;
    if v.len() != snap.n {
        return Err(DflowError::Shape("tangent vector dimension mismatch".into()));
    }
    let v_sq = (&snap.g * v).dot(v);
    let t_fwd = flow.to_forward_time(r);
    Ok(0.5 * w * (v_sq + family.trace(flow, t_fwd, x)))
}

/// Hamiltonian (Legendre transform in the fiber):
/// `H(w) = |w|^2_{g^{-1}} / (2 a) - a S / 2` with `a` the effective weight.
/// `interval` supplies the normalization span for normalized families.
pub fn hamiltonian_eval(
    family: &CostFamily,
    w: &DVector<f64>,
    x: f64,
    r: f64,
    flow: &FlowSpec,
    interval: (f64, f64),
) -> Result<f64> {
    family.check_flow(flow)?;
    let a = family.effective_weight(r, interval)?;
    if a <= 0.0 {
        return Err(DflowError::Domain("degenerate cost weight".into()));
    }
    let snap = crate::geometry::snapshot(flow, r, x)?;
    if w.len() != snap.n {
        return Err(DflowError::Shape(
            "cotangent vector dimension mismatch".into(),
        ));
    }
    let w_sq = (&snap.g_inv * w).dot(w);
    let t_fwd = flow.to_forward_time(r);
    Ok(w_sq / (2.0 * a) - a * family.trace(flow, t_fwd, x) / 2.0)
}

/// Discrete action costs `L^{s,t}(x_i, y_j)` over grid nodes, with the
/// Bellman-optimal node path stored for every pair (displacement
/// interpolation reads it back).
#[derive(Debug, Clone)]
pub struct CostTable {
    pub family: CostFamily,
    pub s: f64,
    pub t: f64,
    pub k_layers: usize,
    pub window: usize,
    pub n_x: usize,
    pub values: DMatrix<f64>,
    /// Layer times in the family's time variable, `k_layers + 1` of them.
    pub layer_times: Vec<f64>,
    /// Flattened paths: node index at each layer for every (i, j) pair.
    paths: Vec<u16>,
}

impl CostTable {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Optimal node path from `x_i` at `s` to `y_j` at `t`, one node per layer.
    pub fn path(&self, i: usize, j: usize) -> &[u16] {
        let stride = self.k_layers + 1;
        let base = (i * self.n_x + j) * stride;
        &self.paths[base..base + stride]
    }
}

pub const DEFAULT_WINDOW: usize = 5;

/// Layer count that keeps the time step near `h` while guaranteeing every
/// node pair is reachable within the transition window.
pub fn suggested_layers(grid: &SpaceTimeGrid, s: f64, t: f64, window: usize) -> usize {
    let by_h = if grid.h > 0.0 {
        ((t - s) / grid.h).ceil() as usize
    } else {
        1
    };
    let by_reach = grid.n_x.div_ceil(2 * window.max(1)) + 1;
    by_h.max(by_reach).max(1)
}

pub fn cost_table(
    flow: &FlowSpec,
    family: &CostFamily,
    s: f64,
    t: f64,
    grid: &SpaceTimeGrid,
    k_layers: usize,
    window: usize,
) -> Result<CostTable> {
    family.check_flow(flow)?;
    if !(s < t) {
        return Err(DflowError::Domain(format!("need s < t, got [{s}, {t}]")));
    }
    if k_layers < 1 {
        return Err(DflowError::Parameter("at least one DP layer".into()));
    }
    family.weight(s)?; // validates the shifted start time
    let n = grid.n_x;
    let k = k_layers;
    let dt = (t - s) / k as f64;
    let layer_times: Vec<f64> = (0..=k).map(|j| s + j as f64 * dt).collect();
    for &r in &layer_times {
        flow.check_time(flow.to_forward_time(r))?;
    }
    let norm = if family.normalized {
        family.norm_factor(s, t)?
    } else {
        1.0
    };

    if n == 1 {
        // Homogeneous: no motion; the S-part integrates exactly in time
        // (composite Simpson at machine precision for smooth data).
        let c = 0.5 * simpson(|r| family.weight(r).unwrap() * hom_trace(family, flow, r), s, t);
        let values = DMatrix::from_element(1, 1, norm * c);
        return Ok(CostTable {
            family: *family,
            s,
            t,
            k_layers: k,
            window,
            n_x: 1,
            values,
            layer_times,
            paths: vec![0u16; k + 1],
        });
    }

    if window == 0 || window * k < n / 2 {
        return Err(DflowError::Infeasible(format!(
            "window {window} x {k} layers cannot connect all {n} nodes; \
             increase the window or layer count"
        )));
    }
    if n > u16::MAX as usize {
        return Err(DflowError::Parameter("grid too large for path storage".into()));
    }

    // Per-step data. Edge lengths use the metric at the layer start; S and
    // the weight use the midpoint time (trapezoid in space, midpoint in time).
    let h = grid.h;
    let mut edge_len = vec![vec![0.0f64; n]; k]; // edge i -> i+1 at step k
    let mut s_mid = vec![vec![0.0f64; n]; k];
    let mut w_mid = vec![0.0f64; k];
    for step in 0..k {
        let r0 = layer_times[step];
        let rm = 0.5 * (layer_times[step] + layer_times[step + 1]);
        let t0_fwd = flow.to_forward_time(r0);
        let tm_fwd = flow.to_forward_time(rm);
        w_mid[step] = family.weight(rm)?;
        let e: Vec<f64> = (0..n)
            .map(|i| flow.metric_coeff(t0_fwd, grid.theta[i]).sqrt())
            .collect();
        for i in 0..n {
            edge_len[step][i] = 0.5 * (e[i] + e[(i + 1) % n]) * h;
            s_mid[step][i] = family.trace(flow, tm_fwd, grid.theta[i]);
        }
    }

    // Bellman over layers, one source row at a time (rows are independent).
    let stride = k + 1;
    let rows: Vec<(usize, Vec<f64>, Vec<u16>)> = (0..n)
        .into_par_iter()
        .map(|src| {
            let mut cost = vec![f64::INFINITY; n];
            cost[src] = 0.0;
            let mut parent = vec![vec![0u16; n]; k];
            let mut next = vec![0.0f64; n];
            for step in 0..k {
                for q in 0..n {
                    let mut best = f64::INFINITY;
                    let mut best_p = usize::MAX;
                    for off in -(window as isize)..=(window as isize) {
                        let p = ((q as isize - off).rem_euclid(n as isize)) as usize;
                        if !cost[p].is_finite() {
                            continue;
                        }
                        // Arc length from p to q moving `off` nodes.
                        let mut arc = 0.0;
                        if off > 0 {
                            for m in 0..off as usize {
                                arc += edge_len[step][(p + m) % n];
                            }
                        } else {
                            for m in 0..(-off) as usize {
                                arc += edge_len[step][(p + n - 1 - m) % n];
                            }
                        }
                        let kinetic = arc * arc / dt;
                        let potential = 0.5 * (s_mid[step][p] + s_mid[step][q]) * dt;
                        let c = cost[p] + 0.5 * w_mid[step] * (kinetic + potential);
                        // Strict improvement keeps the lowest-index
                        // predecessor on ties.
                        if c < best || (c == best && p < best_p) {
                            best = c;
                            best_p = p;
                        }
                    }
                    next[q] = best;
                    parent[step][q] = best_p as u16;
                }
                cost.copy_from_slice(&next);
            }
            if cost.iter().any(|c| !c.is_finite()) {
                return (src, cost, Vec::new());
            }
            // Backtrack a path for every destination.
            let mut paths = vec![0u16; n * stride];
            for dst in 0..n {
                let mut node = dst as u16;
                paths[dst * stride + k] = node;
                for step in (0..k).rev() {
                    node = parent[step][node as usize];
                    paths[dst * stride + step] = node;
                }
                debug_assert_eq!(paths[dst * stride], src as u16);
            }
            (src, cost, paths)
        })
        .collect();

    let mut values = DMatrix::zeros(n, n);
    let mut paths = vec![0u16; n * n * stride];
    for (src, cost, row_paths) in rows {
        if row_paths.is_empty() {
            return Err(DflowError::Infeasible(format!(
                "node pair unreachable from source {src}; widen the transition window"
            )));
        }
        for dst in 0..n {
            values[(src, dst)] = norm * cost[dst];
        }
        paths[src * n * stride..(src + 1) * n * stride].copy_from_slice(&row_paths);
    }
    Ok(CostTable {
        family: *family,
        s,
        t,
        k_layers: k,
        window,
        n_x: n,
        values,
        layer_times,
        paths,
    })
}

fn hom_trace(family: &CostFamily, flow: &FlowSpec, r: f64) -> f64 {
    family.trace(flow, flow.to_forward_time(r), 0.0)
}

/// Composite Simpson on 1024 panels; effectively exact for smooth integrands.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 1024;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Forward Hopf-Lax: `(Q phi)(y_j) = min_i phi(x_i) + L^{s,t}(x_i, y_j)`.
pub fn hopf_lax_with_table(phi: &ScalarField, flow: &FlowSpec, table: &CostTable) -> Result<ScalarField> {
    if phi.values.len() != table.n_x {
        return Err(DflowError::Shape("field length != cost table size".into()));
    }
    let n = table.n_x;
    let mut out = DVector::zeros(n);
    for j in 0..n {
        let mut best = f64::INFINITY;
        for i in 0..n {
            let c = phi.values[i] + table.values[(i, j)];
            if c < best {
                best = c;
            }
        }
        out[j] = best;
    }
    Ok(ScalarField {
        values: out,
        time: flow.to_forward_time(table.t),
        tag: FieldTag::Potential,
    })
}

/// Hopf-Lax over `[s, t]`, building the table internally. `t == s` is the
/// identity.
#[allow(clippy::too_many_arguments)]
pub fn hopf_lax(
    phi: &ScalarField,
    flow: &FlowSpec,
    family: &CostFamily,
    s: f64,
    t: f64,
    grid: &SpaceTimeGrid,
    k_layers: usize,
    window: usize,
) -> Result<ScalarField> {
    if t == s {
        let mut out = phi.clone();
        out.tag = FieldTag::Potential;
        return Ok(out);
    }
    let table = cost_table(flow, family, s, t, grid, k_layers, window)?;
    hopf_lax_with_table(phi, flow, &table)
}

/// Measure-integrated Hamilton-Jacobi residual of a Hopf-Lax trajectory:
/// `max_r | d/dr int Q^{s,r} phi dmu + int H(dQ^{s,r} phi) dmu |` over the
/// interior samples, with centered time differences and Godunov upwind
/// gradients (robust to the Lipschitz kinks of inf-convolutions).
/// `samples` pairs the family time with the propagated potential; `interval`
/// is the `(s, t)` span fixing the normalization of normalized families.
pub fn hj_residual(
    samples: &[(f64, ScalarField)],
    flow: &FlowSpec,
    family: &CostFamily,
    interval: (f64, f64),
    mu: &crate::transport::DiscreteMeasure,
    grid: &SpaceTimeGrid,
) -> Result<f64> {
    if samples.len() < 3 {
        return Err(DflowError::InsufficientResolution(
            "need at least 3 trajectory samples".into(),
        ));
    }
    let n = grid.n_x;
    if mu.len() != n {
        return Err(DflowError::Shape("measure size != grid size".into()));
    }
    let integral = |f: &ScalarField| -> f64 { mu.weights.dot(&f.values) };
    let mut worst: f64 = 0.0;
    for w_idx in 1..samples.len() - 1 {
        let (r_prev, ref f_prev) = samples[w_idx - 1];
        let (r, ref f) = samples[w_idx];
        let (r_next, ref f_next) = samples[w_idx + 1];
        let d_dr = (integral(f_next) - integral(f_prev)) / (r_next - r_prev);
        let a = family.effective_weight(r, interval)?;
        let t_fwd = flow.to_forward_time(r);
        let mut h_int = 0.0;
        for i in 0..n {
            let grad_sq = if n == 1 {
                0.0
            } else {
                let dm = (f.values[i] - f.values[(i + n - 1) % n]) / grid.h;
                let dp = (f.values[(i + 1) % n] - f.values[i]) / grid.h;
                // Godunov flux for a Hamiltonian increasing in |w|.
                let g = dm.max(0.0).powi(2).max(dp.min(0.0).powi(2));
                g / flow.metric_coeff(t_fwd, grid.theta[i])
            };
            let s_val = family.trace(flow, t_fwd, grid.theta[i]);
            h_int += mu.weights[i] * (grad_sq / (2.0 * a) - a * s_val / 2.0);
        }
        worst = worst.max((d_dr + h_int).abs());
    }
    Ok(worst)
}
