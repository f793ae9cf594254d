//! Energy and entropy functionals on flows: the Fisher-type energy
//! `F = int (|grad ln rho|^2 + S) dmu`, its scale-invariant sibling
//! `W = int [tau(|grad f|^2 + S) + f - n] dmu` with the reverse-Gaussian
//! potential `rho = (4 pi tau)^{-n/2} e^{-f}`, and traces of both along the
//! conjugate heat flow.
//!
//! All public entry points speak backward time `tau` measured from a caller
//! supplied origin (`tau_ref - t_forward`); traces therefore run downhill in
//! forward time, which is the direction the conjugate propagator moves.

use crate::error::{DflowError, Result};
use crate::geometry::FlowSpec;
use crate::pde::{adjoint_heat_propagate, grad_norm_sq, SpaceTimeGrid};
use crate::transport::{entropy, DiscreteMeasure};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    F,
    W,
    Entropy,
    /// Wasserstein distance to a reference measure for an action cost;
    /// traces of this kind are produced by the harness, not here.
    WDistance,
}

/// Sampled values of a functional along a measure curve, backward time
/// increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalTrace {
    pub functional: FunctionalKind,
    /// Backward times, strictly increasing.
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// Human-readable provenance (flow family and parameters).
    pub flow_label: String,
    /// Largest increase between consecutive samples (0 if monotone).
    pub max_upward_violation: f64,
}

impl FunctionalTrace {
    pub fn new(
        functional: FunctionalKind,
        taus: Vec<f64>,
        values: Vec<f64>,
        flow_label: String,
    ) -> Result<Self> {
        if taus.len() != values.len() || taus.len() < 2 {
            return Err(DflowError::Shape("trace needs matching times/values".into()));
        }
        if taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DflowError::Contract("trace times must increase".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DflowError::Numerical("non-finite trace value".into()));
        }
        let max_upward_violation = values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f64, f64::max)
            .max(0.0);
        Ok(FunctionalTrace {
            functional,
            taus,
            values,
            flow_label,
            max_upward_violation,
        })
    }

    /// Centered finite-difference derivative in `tau` (one-sided at the ends).
    pub fn derivative(&self) -> Vec<f64> {
        let k = self.taus.len();
        (0..k)
            .map(|i| {
                let (a, b) = if i == 0 {
                    (0, 1)
                } else if i == k - 1 {
                    (k - 2, k - 1)
                } else {
                    (i - 1, i + 1)
                };
                (self.values[b] - self.values[a]) / (self.taus[b] - self.taus[a])
            })
            .collect()
    }

    /// CSV rows `tau,value,derivative` with a header line.
    pub fn to_csv(&self) -> String {
        let d = self.derivative();
        let mut out = String::from("tau,value,derivative\n");
        for i in 0..self.taus.len() {
            out.push_str(&format!("{:.12e},{:.12e},{:.12e}\n", self.taus[i], self.values[i], d[i]));
        }
        out
    }
}

fn log_density(mu: &DiscreteMeasure) -> Result<DVector<f64>> {
    let mut ln_rho = DVector::zeros(mu.len());
    for i in 0..mu.len() {
        let rho = mu.weights[i] / mu.dv[i];
        if rho <= 0.0 {
            return Err(DflowError::Contract(
                "functional needs a strictly positive density".into(),
            ));
        }
        ln_rho[i] = rho.ln();
    }
    Ok(ln_rho)
}

fn check_slice_time(mu: &DiscreteMeasure, flow: &FlowSpec, tau: f64) -> Result<f64> {
    let t = mu.time;
    flow.check_time(t)?;
    // `tau` only has to be consistent with the measure's forward slice for
    // backward-oriented flows, where it is the flow's own coordinate.
    if matches!(
        flow.orientation,
        crate::geometry::TimeOrientation::Backward
    ) && (flow.to_forward_time(tau) - t).abs() > 1e-9
    {
        return Err(DflowError::Contract(format!(
            "tau {tau} does not match the measure's time slice {t}"
        )));
    }
    Ok(t)
}

/// Fisher-type energy `int (|grad ln rho|^2 + S) dmu` at the measure's time
/// slice. `tau` is only used for consistency checking.
pub fn fisher_f(
    mu: &DiscreteMeasure,
    flow: &FlowSpec,
    grid: &SpaceTimeGrid,
    tau: f64,
) -> Result<f64> {
    let t = check_slice_time(mu, flow, tau)?;
    if mu.len() != grid.n_x {
        return Err(DflowError::Shape("measure does not live on the grid".into()));
    }
    let ln_rho = log_density(mu)?;
    let grad_sq = grad_norm_sq(flow, grid, t, &ln_rho);
    let mut out = 0.0;
    for i in 0..mu.len() {
        out += mu.weights[i] * (grad_sq[i] + flow.s_scalar(t, grid.theta[i]));
    }
    Ok(out)
}

/// Scale-invariant entropy `int [tau(|grad f|^2 + S) + f - n] dmu` with
/// `f = -ln rho - (n/2) ln(4 pi tau)`.
pub fn perelman_w(
    mu: &DiscreteMeasure,
    flow: &FlowSpec,
    grid: &SpaceTimeGrid,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(DflowError::Domain(format!("tau = {tau} must be positive")));
    }
    let t = check_slice_time(mu, flow, tau)?;
    if mu.len() != grid.n_x {
        return Err(DflowError::Shape("measure does not live on the grid".into()));
    }
    let n = flow.dimension() as f64;
    let ln_rho = log_density(mu)?;
    let grad_sq = grad_norm_sq(flow, grid, t, &ln_rho);
    let log_norm = (n / 2.0) * (4.0 * std::f64::consts::PI * tau).ln();
    let mut out = 0.0;
    for i in 0..mu.len() {
        let f = -ln_rho[i] - log_norm;
        out += mu.weights[i] * (tau * (grad_sq[i] + flow.s_scalar(t, grid.theta[i])) + f - n);
    }
    Ok(out)
}

/// Independent route to `W` through the algebraic identity
/// `W = tau F - E - (n/2) ln(4 pi tau) - n` with `E = int rho ln rho dV`.
pub fn w_from_f(
    mu: &DiscreteMeasure,
    flow: &FlowSpec,
    grid: &SpaceTimeGrid,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(DflowError::Domain(format!("tau = {tau} must be positive")));
    }
    let n = flow.dimension() as f64;
    Ok(tau * fisher_f(mu, flow, grid, tau)? - entropy(mu)?
        - (n / 2.0) * (4.0 * std::f64::consts::PI * tau).ln()
        - n)
}

/// Propagate `mu_init` by the conjugate heat flow from backward time `tau1`
/// to `tau2` (forward time `tau_ref - tau`) and record `functional` at
/// `steps + 1` evenly spaced backward times.
#[allow(clippy::too_many_arguments)]
pub fn monotonicity_trace(
    mu_init: &DiscreteMeasure,
    flow: &FlowSpec,
    grid: &SpaceTimeGrid,
    tau_ref: f64,
    tau1: f64,
    tau2: f64,
    functional: FunctionalKind,
    steps: usize,
) -> Result<FunctionalTrace> {
    if !(tau1 < tau2) || steps == 0 {
        return Err(DflowError::Parameter(
            "need tau1 < tau2 and at least one step".into(),
        ));
    }
    if (mu_init.time - (tau_ref - tau1)).abs() > 1e-9 {
        return Err(DflowError::Contract(format!(
            "initial measure sits at forward time {}, expected {}",
            mu_init.time,
            tau_ref - tau1
        )));
    }
    let eval = |mu: &DiscreteMeasure, tau: f64| -> Result<f64> {
        match functional {
            FunctionalKind::F => fisher_f(mu, flow, grid, tau),
            FunctionalKind::W => perelman_w(mu, flow, grid, tau),
            FunctionalKind::Entropy => entropy(mu),
            FunctionalKind::WDistance => Err(DflowError::Parameter(
                "distance traces are produced by the harness".into(),
            )),
        }
    };
    let mut taus = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    let mut mu = mu_init.clone();
    for k in 0..=steps {
        let tau = tau1 + (tau2 - tau1) * k as f64 / steps as f64;
        if k > 0 {
            let t_from = mu.time;
            let t_to = tau_ref - tau;
            mu = adjoint_heat_propagate(&mu, flow, grid, t_from, t_to)?.normalized();
        }
        taus.push(tau);
        values.push(eval(&mu, tau)?);
    }
    FunctionalTrace::new(functional, taus, values, format!("{:?}", flow.family))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::geometry::{Family, FlowSpec, Jet1, Jet2, StaticBase};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::PI;

    fn static_circle(u: &str) -> FlowSpec {
        FlowSpec::forward(
            Family::StaticManifold {
                base: StaticBase::Circle {
                    u: Jet2::new(Expr::parse(u).unwrap()),
                },
            },
            (0.0, 2.0),
        )
        .unwrap()
    }

    fn sphere(n: usize, r_sq: &str, iv: (f64, f64)) -> FlowSpec {
        FlowSpec::forward(
            Family::RoundSphere {
                n,
                r_sq: Jet1::new(Expr::parse(r_sq).unwrap()).unwrap(),
            },
            iv,
        )
        .unwrap()
    }

    #[test]
    fn fisher_of_uniform_measures() {
        // Flat static circle: no gradient, no S.
        let flow = static_circle("0");
        let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 32, 0.01).unwrap();
        let mu = DiscreteMeasure::uniform(&grid.dv(&flow, 0.3), 0.3);
        assert_abs_diff_eq!(fisher_f(&mu, &flow, &grid, 0.3).unwrap(), 0.0, epsilon = 1e-14);

        // Homogeneous sphere flow: F reduces to the scalar S(t).
        let flow = sphere(2, "1 + t^2", (0.0, 1.0));
        let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 1, 0.01).unwrap();
        let t = 0.3;
        let mu = DiscreteMeasure::uniform(&grid.dv(&flow, t), t);
        let expect = -(2.0 / 2.0) * (2.0 * t) / (1.0 + t * t);
        assert_relative_eq!(fisher_f(&mu, &flow, &grid, t).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn fisher_matches_spectral_oracle_for_wrapped_gaussian() {
        let flow = static_circle("0");
        let s = 0.6f64;
        let rho = |th: f64| -> f64 {
            (-5..=5)
                .map(|k| {
                    let x = th - PI + 2.0 * PI * k as f64;
                    (-x * x / (2.0 * s * s)).exp()
                })
                .sum::<f64>()
        };
        let drho = |th: f64| -> f64 {
            (-5..=5)
                .map(|k| {
                    let x = th - PI + 2.0 * PI * k as f64;
                    -(x / (s * s)) * (-x * x / (2.0 * s * s)).exp()
                })
                .sum::<f64>()
        };
        // High-resolution trapezoid oracle for int (rho'/rho)^2 rho dth / mass.
        let m = 8192;
        let hq = 2.0 * PI / m as f64;
        let mass: f64 = (0..m).map(|i| rho(i as f64 * hq) * hq).sum();
        let oracle: f64 = (0..m)
            .map(|i| {
                let th = i as f64 * hq;
                let lr = drho(th) / rho(th);
                lr * lr * rho(th) * hq
            })
            .sum::<f64>()
            / mass;

        let mut errs = Vec::new();
        for n_x in [64usize, 128] {
            let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, n_x, 0.01).unwrap();
            let dv = grid.dv(&flow, 0.0);
            let raw = DVector::from_iterator(n_x, grid.theta.iter().map(|&th| rho(th)));
            let total: f64 = raw.iter().zip(dv.iter()).map(|(r, v)| r * v).sum();
            let mu = DiscreteMeasure::new(
                DVector::from_iterator(
                    n_x,
                    raw.iter().zip(dv.iter()).map(|(r, v)| r * v / total),
                ),
                dv,
                0.0,
            );
            errs.push((fisher_f(&mu, &flow, &grid, 0.0).unwrap() - oracle).abs());
        }
        assert!(errs[0] < 1e-3, "coarse error {}", errs[0]);
        assert!(errs[1] < 0.3 * errs[0], "no O(h^2) decay: {errs:?}");
    }

    #[test]
    fn w_closed_form_on_uniform_flat_circle() {
        let flow = static_circle("0");
        let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 16, 0.01).unwrap();
        let mu = DiscreteMeasure::uniform(&grid.dv(&flow, 0.5), 0.5);
        // n = 1, Vol = 2 pi, tau = 1: f = ln(2 pi) - (1/2) ln(4 pi), W = f - 1.
        let f = (2.0 * PI).ln() - 0.5 * (4.0 * PI).ln();
        let w = perelman_w(&mu, &flow, &grid, 1.0).unwrap();
        assert_relative_eq!(w, f - 1.0, epsilon = 1e-12);
        assert!(perelman_w(&mu, &flow, &grid, -0.1).is_err());
    }

    #[test]
    fn w_agrees_with_f_entropy_identity() {
        let flow = FlowSpec::forward(
            Family::CircleConformal {
                u: Jet2::new(Expr::parse("0.5*ln(1+t) + 0.1*cos(theta)").unwrap()),
            },
            (0.0, 1.0),
        )
        .unwrap();
        let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 48, 0.01).unwrap();
        let t = 0.4;
        let dv = grid.dv(&flow, t);
        let raw = DVector::from_iterator(
            grid.n_x,
            grid.theta.iter().map(|&th| (th.sin() * 0.7).exp()),
        );
        let total: f64 = raw.iter().zip(dv.iter()).map(|(r, v)| r * v).sum();
        let mu = DiscreteMeasure::new(
            DVector::from_iterator(
                grid.n_x,
                raw.iter().zip(dv.iter()).map(|(r, v)| r * v / total),
            ),
            dv,
            t,
        );
        for tau in [0.2, 0.6, 1.3] {
            assert_relative_eq!(
                perelman_w(&mu, &flow, &grid, tau).unwrap(),
                w_from_f(&mu, &flow, &grid, tau).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn w_is_invariant_under_parabolic_scaling_of_static_spheres() {
        // Static sphere, uniform measure: scaling g -> a g, tau -> a tau
        // leaves W unchanged.
        let base = |r_sq: f64| {
            FlowSpec::forward(
                Family::StaticManifold {
                    base: StaticBase::Sphere { n: 3, r_sq },
                },
                (0.0, 1.0),
            )
            .unwrap()
        };
        let tau = 0.7;
        let flow1 = base(1.4);
        let grid1 = SpaceTimeGrid::new(&flow1, 0.0, 1.0, 1, 0.01).unwrap();
        let mu1 = DiscreteMeasure::uniform(&grid1.dv(&flow1, 0.2), 0.2);
        let w1 = perelman_w(&mu1, &flow1, &grid1, tau).unwrap();
        for a in [2.0, 5.5] {
            let flow2 = base(1.4 * a);
            let grid2 = SpaceTimeGrid::new(&flow2, 0.0, 1.0, 1, 0.01).unwrap();
            let mu2 = DiscreteMeasure::uniform(&grid2.dv(&flow2, 0.2), 0.2);
            let w2 = perelman_w(&mu2, &flow2, &grid2, a * tau).unwrap();
            assert_relative_eq!(w1, w2, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_f_trace_matches_closed_form_derivative() {
        // Uniform measure is an exact conjugate heat solution on sphere
        // flows; the F-trace then solves a pure ODE in time.
        let n = 2usize;
        let flow = sphere(n, "1 + t^2", (0.0, 1.0));
        let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 1, 0.001).unwrap();
        let tau_ref = 1.0;
        let (tau1, tau2) = (0.1, 0.5);
        let mu = DiscreteMeasure::uniform(&grid.dv(&flow, tau_ref - tau1), tau_ref - tau1);
        let trace =
            monotonicity_trace(&mu, &flow, &grid, tau_ref, tau1, tau2, FunctionalKind::F, 800)
                .unwrap();
        let deriv = trace.derivative();
        for k in 1..trace.taus.len() - 1 {
            let t = tau_ref - trace.taus[k];
            let r2 = 1.0 + t * t;
            let closed_dt = (n as f64 / (2.0 * r2)) * (-2.0 + (2.0 * t).powi(2) / r2);
            // d/dtau = -d/dt.
            assert_abs_diff_eq!(deriv[k], -closed_dt, epsilon = 1e-6);
        }
        // Value sanity: F = S(t) for the uniform measure.
        let k = 400;
        let t = tau_ref - trace.taus[k];
        assert_relative_eq!(
            trace.values[k],
            -(n as f64 / 2.0) * 2.0 * t / (1.0 + t * t),
            epsilon = 1e-9
        );
    }

    #[test]
    fn super_ricci_sphere_with_d_violation_has_increasing_f() {
        // r^2 = 1 + t^2 is a super Ricci flow but fails concavity of r^2, so
        // F increases along the conjugate flow.
        let flow = sphere(2, "1 + t^2", (0.0, 0.5));
        let grid = SpaceTimeGrid::new(&flow, 0.0, 0.5, 1, 0.001).unwrap();
        let mu = DiscreteMeasure::uniform(&grid.dv(&flow, 0.4), 0.4);
        let trace =
            monotonicity_trace(&mu, &flow, &grid, 0.5, 0.1, 0.4, FunctionalKind::F, 50).unwrap();
        assert!(trace.max_upward_violation > 1e-3, "{}", trace.max_upward_violation);
    }

    fn conformal_flow() -> FlowSpec {
        FlowSpec::forward(
            Family::CircleConformal {
                u: Jet2::new(Expr::parse("0.5*ln(1+t)").unwrap()),
            },
            (0.0, 1.0),
        )
        .unwrap()
    }

    fn bump_measure(grid: &SpaceTimeGrid, flow: &FlowSpec, t: f64) -> DiscreteMeasure {
        let dv = grid.dv(flow, t);
        let raw = DVector::from_iterator(
            grid.n_x,
            grid.theta.iter().map(|&th| (0.9 * (th - 1.0).cos()).exp()),
        );
        let total: f64 = raw.iter().zip(dv.iter()).map(|(r, v)| r * v).sum();
        DiscreteMeasure::new(
            DVector::from_iterator(
                grid.n_x,
                raw.iter().zip(dv.iter()).map(|(r, v)| r * v / total),
            ),
            dv,
            t,
        )
    }

    #[test]
    fn f_and_w_traces_decrease_on_a_d_nonnegative_flow() {
        // u = (1/2) ln(1+t) satisfies D >= 0; monotonicity is exact in the
        // continuum, so the discrete tolerance is measured by refinement.
        let flow = conformal_flow();
        let tau_ref = 1.0;
        let (tau1, tau2) = (0.2, 0.7);
        for kind in [FunctionalKind::F, FunctionalKind::W] {
            let mut worst = Vec::new();
            for dt in [0.002, 0.001] {
                let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 48, dt).unwrap();
                let mu = bump_measure(&grid, &flow, tau_ref - tau1);
                let tr =
                    monotonicity_trace(&mu, &flow, &grid, tau_ref, tau1, tau2, kind, 50).unwrap();
                worst.push(tr);
            }
            let tol = 2.0
                * worst[0]
                    .values
                    .iter()
                    .zip(worst[1].values.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
            assert!(
                worst[1].max_upward_violation <= tol.max(1e-12),
                "{kind:?}: violation {} > tol {tol}",
                worst[1].max_upward_violation
            );
        }
    }

    #[test]
    fn static_circle_f_trace_is_nonincreasing() {
        let flow = static_circle("0");
        let grid = SpaceTimeGrid::new(&flow, 0.0, 2.0, 48, 0.002).unwrap();
        let mu = bump_measure(&grid, &flow, 1.5);
        let trace =
            monotonicity_trace(&mu, &flow, &grid, 2.0, 0.5, 1.5, FunctionalKind::F, 60).unwrap();
        assert!(trace.max_upward_violation <= 1e-10, "{}", trace.max_upward_violation);
    }

    #[test]
    fn w_and_f_traces_satisfy_toppings_identity() {
        // tau dW/dtau = d/dtau (tau^2 F - (n/2) tau), equivalently
        // dE/dtau = -F along the conjugate flow.
        let flow = conformal_flow();
        let grid = SpaceTimeGrid::new(&flow, 0.0, 1.0, 64, 0.0005).unwrap();
        let tau_ref = 1.0;
        let (tau1, tau2) = (0.3, 0.7);
        let mu = bump_measure(&grid, &flow, tau_ref - tau1);
        let steps = 80;
        let f_tr =
            monotonicity_trace(&mu, &flow, &grid, tau_ref, tau1, tau2, FunctionalKind::F, steps)
                .unwrap();
        let w_tr =
            monotonicity_trace(&mu, &flow, &grid, tau_ref, tau1, tau2, FunctionalKind::W, steps)
                .unwrap();
        let n = flow.dimension() as f64;
        let dw = w_tr.derivative();
        let d = (tau2 - tau1) / steps as f64;
        let mut worst = 0.0f64;
        for k in 1..steps {
            let tau = f_tr.taus[k];
            let lhs = tau * dw[k];
            let g = |i: usize| f_tr.taus[i].powi(2) * f_tr.values[i] - (n / 2.0) * f_tr.taus[i];
            let rhs = (g(k + 1) - g(k - 1)) / (2.0 * d);
            worst = worst.max((lhs - rhs).abs());
        }
        assert!(worst < 5e-3, "identity residual {worst}");
    }

    #[test]
    fn trace_csv_has_one_row_per_sample() {
        let flow = static_circle("0");
        let grid = SpaceTimeGrid::new(&flow, 0.0, 2.0, 16, 0.01).unwrap();
        let mu = bump_measure(&grid, &flow, 1.0);
        let tr =
            monotonicity_trace(&mu, &flow, &grid, 2.0, 1.0, 1.5, FunctionalKind::Entropy, 10)
                .unwrap();
        let csv = tr.to_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.starts_with("tau,value,derivative"));
    }
}

