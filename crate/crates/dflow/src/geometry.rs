//! Model flow families with closed-form geometry, and pointwise evaluation of
//! the D-tensor `D(X) = c + l(X) + q(X,X)` together with its weighted and
//! dimensional variants.
//!
//! All families are chosen so every geometric quantity (metric, its time
//! derivative, Ricci, and the derivatives of `S`) has an exact expression:
//! discretization error is confined to the PDE and transport layers.
//!
//! Conventions. Internally everything is forward time `t` with
//! `S_tensor = -1/2 d/dt g` and `S = tr_g S_tensor`. A flow built with
//! backward orientation converts at the boundary via `tau = T - t`; the only
//! quantity whose sign depends on the orientation is the time derivative of
//! `S` (and of `U`, `S_U` in the weighted case), stored in the snapshot in
//! the flow's own convention.

use crate::error::{DflowError, Result};
use crate::expr::{Expr, Var};
use nalgebra::{DMatrix, DVector};

/// Time-only smooth function with exact first/second derivatives.
#[derive(Debug, Clone)]
pub struct Jet1 {
    pub f: Expr,
    pub d1: Expr,
    pub d2: Expr,
}

impl Jet1 {
    pub fn new(f: Expr) -> Result<Self> {
        if f.depends_on(Var::Theta) {
            return Err(DflowError::InvalidFlow(
                "time-only parameter depends on theta".into(),
            ));
        }
        let d1 = f.diff(Var::T);
        let d2 = d1.diff(Var::T);
        Ok(Jet1 { f, d1, d2 })
    }

    pub fn val(&self, t: f64) -> f64 {
        self.f.eval(t, 0.0)
    }
    pub fn dt(&self, t: f64) -> f64 {
        self.d1.eval(t, 0.0)
    }
    pub fn dtt(&self, t: f64) -> f64 {
        self.d2.eval(t, 0.0)
    }
}

/// Space-time smooth function `f(t, theta)` with the mixed derivatives needed
/// by the D-tensor (up to `d^3 f / dt dtheta^2`).
#[derive(Debug, Clone)]
pub struct Jet2 {
    pub f: Expr,
    pub ft: Expr,
    pub fth: Expr,
    pub ftt: Expr,
    pub ftth: Expr,
    pub fthth: Expr,
    pub ftthth: Expr,
}

impl Jet2 {
    pub fn new(f: Expr) -> Self {
        let ft = f.diff(Var::T);
        let fth = f.diff(Var::Theta);
        let ftt = ft.diff(Var::T);
        let ftth = ft.diff(Var::Theta);
        let fthth = fth.diff(Var::Theta);
        let ftthth = ftth.diff(Var::Theta);
        Jet2 {
            f,
            ft,
            fth,
            ftt,
            ftth,
            fthth,
            ftthth,
        }
    }
}

#[derive(Debug, Clone)]
pub enum StaticBase {
    /// Round sphere of fixed squared radius.
    Sphere { n: usize, r_sq: f64 },
    /// Circle with fixed conformal factor `exp(2 u(theta))`.
    Circle { u: Jet2 },
}

#[derive(Debug, Clone)]
pub enum Family {
    /// `g = r^2(t) g_{S^n}`.
    RoundSphere { n: usize, r_sq: Jet1 },
    /// `g = diag(a_i(t)^2)` on the torus `(R/2piZ)^n`.
    FlatTorus { a: Vec<Jet1> },
    /// `g = exp(2 u(t,theta)) dtheta^2` on the circle.
    CircleConformal { u: Jet2 },
    /// Conformal circle with weight `exp(-U(t,theta)) dV`.
    WeightedCircle { u: Jet2, weight: Jet2 },
    StaticManifold { base: StaticBase },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOrientation {
    Forward,
    Backward,
}

/// How the family is discretized in space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialKind {
    /// Spatially homogeneous (single-cell grid, exact ODE path).
    Homogeneous,
    /// Periodic theta-grid on the circle.
    Circle,
}

#[derive(Debug, Clone)]
pub struct FlowSpec {
    pub family: Family,
    /// Forward-time interval on which the flow is defined.
    pub interval: (f64, f64),
    pub orientation: TimeOrientation,
    /// Reference time `T` for the conversion `tau = T - t`.
    pub reference_time: f64,
}

impl FlowSpec {
    pub fn new(
        family: Family,
        interval: (f64, f64),
        orientation: TimeOrientation,
        reference_time: f64,
    ) -> Result<Self> {
        if !(interval.0 < interval.1) || !interval.0.is_finite() || !interval.1.is_finite() {
            return Err(DflowError::InvalidFlow(format!(
                "bad time interval {interval:?}"
            )));
        }
        let flow = FlowSpec {
            family,
            interval,
            orientation,
            reference_time,
        };
        flow.validate_positivity()?;
        Ok(flow)
    }

    pub fn forward(family: Family, interval: (f64, f64)) -> Result<Self> {
        Self::new(family, interval, TimeOrientation::Forward, 0.0)
    }

    fn validate_positivity(&self) -> Result<()> {
        let (a, b) = self.interval;
        for k in 0..=64 {
            let t = a + (b - a) * k as f64 / 64.0;
            let ok = match &self.family {
                Family::RoundSphere { r_sq, .. } => r_sq.val(t) > 0.0,
                Family::FlatTorus { a } => !a.is_empty() && a.iter().all(|ai| ai.val(t) > 0.0),
                Family::CircleConformal { u } | Family::WeightedCircle { u, .. } => {
                    (0..8).all(|j| {
                        u.f.eval(t, j as f64 * std::f64::consts::FRAC_PI_4)
                            .is_finite()
                    })
                }
                Family::StaticManifold { base } => match base {
                    StaticBase::Sphere { r_sq, .. } => *r_sq > 0.0,
                    StaticBase::Circle { .. } => true,
                },
            };
            if !ok {
                return Err(DflowError::InvalidFlow(format!(
                    "metric parameter non-positive or non-finite at t = {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        match &self.family {
            Family::RoundSphere { n, .. } => *n,
            Family::FlatTorus { a } => a.len(),
            Family::CircleConformal { .. } | Family::WeightedCircle { .. } => 1,
            Family::StaticManifold { base } => match base {
                StaticBase::Sphere { n, .. } => *n,
                StaticBase::Circle { .. } => 1,
            },
        }
    }

    pub fn spatial_kind(&self) -> SpatialKind {
        match &self.family {
            Family::RoundSphere { .. } | Family::FlatTorus { .. } => SpatialKind::Homogeneous,
            Family::CircleConformal { .. } | Family::WeightedCircle { .. } => SpatialKind::Circle,
            Family::StaticManifold { base } => match base {
                StaticBase::Sphere { .. } => SpatialKind::Homogeneous,
                StaticBase::Circle { .. } => SpatialKind::Circle,
            },
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.family, Family::WeightedCircle { .. })
    }

    /// Convert a time in the flow's own convention to internal forward time.
    pub fn to_forward_time(&self, r: f64) -> f64 {
        match self.orientation {
            TimeOrientation::Forward => r,
            TimeOrientation::Backward => self.reference_time - r,
        }
    }

    pub fn from_forward_time(&self, t: f64) -> f64 {
        // The conversion is an involution.
        self.to_forward_time(t)
    }

    pub fn check_time(&self, t_fwd: f64) -> Result<()> {
        let eps = 1e-12 * (1.0 + self.interval.1.abs().max(self.interval.0.abs()));
        if t_fwd < self.interval.0 - eps || t_fwd > self.interval.1 + eps {
            return Err(DflowError::Domain(format!(
                "time {t_fwd} outside flow interval {:?}",
                self.interval
            )));
        }
        Ok(())
    }

    /// Conformal exponent jet for circle-type families.
    pub fn circle_u(&self) -> Option<&Jet2> {
        match &self.family {
            Family::CircleConformal { u } | Family::WeightedCircle { u, .. } => Some(u),
            Family::StaticManifold {
                base: StaticBase::Circle { u },
            } => Some(u),
            _ => None,
        }
    }

    pub fn weight_u(&self) -> Option<&Jet2> {
        match &self.family {
            Family::WeightedCircle { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Metric coefficient `g_{theta theta} = exp(2u)` for circle families
    /// (forward time).
    pub fn metric_coeff(&self, t_fwd: f64, theta: f64) -> f64 {
        match self.circle_u() {
            Some(u) => {
                let uv = match &self.family {
                    Family::StaticManifold { .. } => u.f.eval(0.0, theta),
                    _ => u.f.eval(t_fwd, theta),
                };
                (2.0 * uv).exp()
            }
            None => 1.0,
        }
    }

    /// Scalar `S = - d/dt ln dV` at forward time `t` (spatially constant for
    /// homogeneous families).
    pub fn s_scalar(&self, t_fwd: f64, theta: f64) -> f64 {
        match &self.family {
            Family::RoundSphere { n, r_sq } => {
                -(*n as f64 / 2.0) * r_sq.dt(t_fwd) / r_sq.val(t_fwd)
            }
            Family::FlatTorus { a } => -a.iter().map(|ai| ai.dt(t_fwd) / ai.val(t_fwd)).sum::<f64>(),
            Family::CircleConformal { u } | Family::WeightedCircle { u, .. } => {
                -u.ft.eval(t_fwd, theta)
            }
            Family::StaticManifold { .. } => 0.0,
        }
    }

    /// `S_U = S + dU/dt` (forward time); equals `S` for unweighted flows.
    pub fn s_u_scalar(&self, t_fwd: f64, theta: f64) -> f64 {
        let base = self.s_scalar(t_fwd, theta);
        match self.weight_u() {
            Some(w) => base + w.ft.eval(t_fwd, theta),
            None => base,
        }
    }

    /// Total volume at forward time `t`. For circle families this is the
    /// exact integral approximated by a 4096-point periodic trapezoid rule
    /// (spectrally accurate for the smooth conformal factors in scope).
    pub fn volume(&self, t_fwd: f64) -> f64 {
        match &self.family {
            Family::RoundSphere { n, r_sq } => {
                unit_sphere_area(*n) * r_sq.val(t_fwd).powf(*n as f64 / 2.0)
            }
            Family::FlatTorus { a } => {
                a.iter().map(|ai| ai.val(t_fwd)).product::<f64>()
                    * (2.0 * std::f64::consts::PI).powi(a.len() as i32)
            }
            Family::StaticManifold {
                base: StaticBase::Sphere { n, r_sq },
            } => unit_sphere_area(*n) * r_sq.powf(*n as f64 / 2.0),
            _ => {
                let m = 4096;
                let h = 2.0 * std::f64::consts::PI / m as f64;
                (0..m)
                    .map(|i| self.metric_coeff(t_fwd, i as f64 * h).sqrt() * h)
                    .sum()
            }
        }
    }

    /// Time-shifted copy: the new flow at time `t` equals `self` at `t - t0`.
    pub fn time_shifted(&self, t0: f64) -> Result<FlowSpec> {
        let shift = |e: &Expr| -> Expr {
            // t -> t - t0 by wrapping the variable.
            substitute_t_minus(e, t0)
        };
        let family = match &self.family {
            Family::RoundSphere { n, r_sq } => Family::RoundSphere {
                n: *n,
                r_sq: Jet1::new(shift(&r_sq.f))?,
            },
            Family::FlatTorus { a } => Family::FlatTorus {
                a: a.iter()
                    .map(|ai| Jet1::new(shift(&ai.f)))
                    .collect::<Result<Vec<_>>>()?,
            },
            Family::CircleConformal { u } => Family::CircleConformal {
                u: Jet2::new(shift(&u.f)),
            },
            Family::WeightedCircle { u, weight } => Family::WeightedCircle {
                u: Jet2::new(shift(&u.f)),
                weight: Jet2::new(shift(&weight.f)),
            },
            Family::StaticManifold { base } => Family::StaticManifold { base: base.clone() },
        };
        FlowSpec::new(
            family,
            (self.interval.0 + t0, self.interval.1 + t0),
            self.orientation,
            self.reference_time + t0,
        )
    }
}

fn substitute_t_minus(e: &Expr, t0: f64) -> Expr {
    use std::sync::Arc;
    match e {
        Expr::Const(c) => Expr::Const(*c),
        Expr::Var(Var::T) => Expr::Sub(
            Arc::new(Expr::Var(Var::T)),
            Arc::new(Expr::Const(t0)),
        ),
        Expr::Var(Var::Theta) => Expr::Var(Var::Theta),
        Expr::Add(a, b) => Expr::Add(
            Arc::new(substitute_t_minus(a, t0)),
            Arc::new(substitute_t_minus(b, t0)),
        ),
        Expr::Sub(a, b) => Expr::Sub(
            Arc::new(substitute_t_minus(a, t0)),
            Arc::new(substitute_t_minus(b, t0)),
        ),
        Expr::Mul(a, b) => Expr::Mul(
            Arc::new(substitute_t_minus(a, t0)),
            Arc::new(substitute_t_minus(b, t0)),
        ),
        Expr::Div(a, b) => Expr::Div(
            Arc::new(substitute_t_minus(a, t0)),
            Arc::new(substitute_t_minus(b, t0)),
        ),
        Expr::Pow(a, k) => Expr::Pow(Arc::new(substitute_t_minus(a, t0)), *k),
        Expr::Exp(a) => Expr::Exp(Arc::new(substitute_t_minus(a, t0))),
        Expr::Ln(a) => Expr::Ln(Arc::new(substitute_t_minus(a, t0))),
        Expr::Sin(a) => Expr::Sin(Arc::new(substitute_t_minus(a, t0))),
        Expr::Cos(a) => Expr::Cos(Arc::new(substitute_t_minus(a, t0))),
        Expr::Sqrt(a) => Expr::Sqrt(Arc::new(substitute_t_minus(a, t0))),
    }
}

/// Surface area of the unit n-sphere.
pub fn unit_sphere_area(n: usize) -> f64 {
    // 2 pi^{(n+1)/2} / Gamma((n+1)/2), with Gamma at integer/half-integer
    // arguments computed directly.
    let half = (n + 1) as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(half) / gamma_half(n + 1)
}

/// Gamma(k/2) for integer k >= 1.
fn gamma_half(k: usize) -> f64 {
    if k % 2 == 0 {
        // Gamma(m) = (m-1)!
        let m = k / 2;
        (1..m).map(|j| j as f64).product()
    } else {
        // Gamma(1/2 + m) = (2m)! / (4^m m!) sqrt(pi)
        let m = k / 2;
        let mut v = std::f64::consts::PI.sqrt();
        for j in 0..m {
            v *= 0.5 + j as f64;
        }
        v
    }
}

/// Weighted-geometry fields at a point (all index-lowered).
#[derive(Debug, Clone)]
pub struct WeightedFields {
    /// `dU` covector.
    pub d_u: DVector<f64>,
    pub hess_u: DMatrix<f64>,
    /// Unweighted Laplacian of `U`.
    pub lap_u: f64,
    /// `dU/dt` in the snapshot's time convention.
    pub dt_u: f64,
    pub s_u: f64,
    /// `dS_U` covector.
    pub d_s_u: DVector<f64>,
    /// `div_U S_tensor = div S_tensor - S_tensor(grad U)` covector.
    pub div_u_s: DVector<f64>,
    /// `dS_U/dt` in the snapshot's time convention.
    pub dt_s_u: f64,
    /// Weighted Laplacian of `S_U`.
    pub lap_u_s_u: f64,
}

/// Every local quantity entering `D(X)` at one space-time point. Tensors are
/// stored with lowered indices in the family's coordinate basis; `d_s` and
/// `div_s` are covectors, so contraction with a tangent vector `X` is a
/// plain dot product with its components.
#[derive(Debug, Clone)]
pub struct GeometrySnapshot {
    pub n: usize,
    /// Time in the flow's own convention.
    pub t: f64,
    pub x: f64,
    pub orientation: TimeOrientation,
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub s_tensor: DMatrix<f64>,
    pub s_scalar: f64,
    pub ric: DMatrix<f64>,
    /// `dS` covector.
    pub d_s: DVector<f64>,
    /// `div S_tensor` covector.
    pub div_s: DVector<f64>,
    /// `dS/dt` in the snapshot's time convention.
    pub dt_s: f64,
    pub lap_s: f64,
    pub norm_s_sq: f64,
    pub weighted: Option<WeightedFields>,
}

impl GeometrySnapshot {
    /// `dS/dt` in forward time, independent of the stored convention.
    pub fn dt_s_forward(&self) -> f64 {
        match self.orientation {
            TimeOrientation::Forward => self.dt_s,
            TimeOrientation::Backward => -self.dt_s,
        }
    }

    fn dt_s_u_forward(&self) -> Option<f64> {
        self.weighted.as_ref().map(|w| match self.orientation {
            TimeOrientation::Forward => w.dt_s_u,
            TimeOrientation::Backward => -w.dt_s_u,
        })
    }

    fn dt_u_forward(&self) -> Option<f64> {
        self.weighted.as_ref().map(|w| match self.orientation {
            TimeOrientation::Forward => w.dt_u,
            TimeOrientation::Backward => -w.dt_u,
        })
    }

    /// Homogeneity-0 part of `D` (forward form).
    pub fn d_constant_part(&self) -> f64 {
        self.dt_s_forward() - self.lap_s - 2.0 * self.norm_s_sq
    }

    /// Homogeneity-1 covector of `D`: `4 div S_tensor - 2 dS`.
    pub fn d_linear_part(&self) -> DVector<f64> {
        4.0 * &self.div_s - 2.0 * &self.d_s
    }

    /// Homogeneity-2 matrix of `D`: `2 (Ric - S_tensor)`.
    pub fn d_quadratic_part(&self) -> DMatrix<f64> {
        2.0 * (&self.ric - &self.s_tensor)
    }
}

/// Evaluate all geometric quantities at a point of the flow. `t` is in the
/// flow's own time convention; `x` is the angular coordinate for circle
/// families and ignored for homogeneous ones.
pub fn snapshot(flow: &FlowSpec, t: f64, x: f64) -> Result<GeometrySnapshot> {
    let tf = flow.to_forward_time(t);
    flow.check_time(tf)?;
    let n = flow.dimension();
    let bwd = flow.orientation == TimeOrientation::Backward;
    let or_sign = if bwd { -1.0 } else { 1.0 };

    let snap = match &flow.family {
        Family::RoundSphere { n, r_sq } => {
            let rho = r_sq.val(tf);
            if rho <= 0.0 {
                return Err(DflowError::InvalidFlow(format!(
                    "r^2(t) = {rho} non-positive at t = {tf}"
                )));
            }
            let nf = *n as f64;
            let rho1 = r_sq.dt(tf);
            let rho2 = r_sq.dtt(tf);
            let g = DMatrix::from_diagonal_element(*n, *n, rho);
            let g_inv = DMatrix::from_diagonal_element(*n, *n, 1.0 / rho);
            let s_tensor = DMatrix::from_diagonal_element(*n, *n, -0.5 * rho1);
            let s_scalar = -(nf / 2.0) * rho1 / rho;
            let ric = DMatrix::from_diagonal_element(*n, *n, nf - 1.0);
            let dt_s_fwd = -(nf / 2.0) * (rho2 * rho - rho1 * rho1) / (rho * rho);
            GeometrySnapshot {
                n: *n,
                t,
                x,
                orientation: flow.orientation,
                g,
                g_inv,
                s_tensor,
                s_scalar,
                ric,
                d_s: DVector::zeros(*n),
                div_s: DVector::zeros(*n),
                dt_s: or_sign * dt_s_fwd,
                lap_s: 0.0,
                norm_s_sq: s_scalar * s_scalar / nf,
                weighted: None,
            }
        }
        Family::FlatTorus { a } => {
            let n = a.len();
            let av: Vec<f64> = a.iter().map(|ai| ai.val(tf)).collect();
            if av.iter().any(|&v| v <= 0.0) {
                return Err(DflowError::InvalidFlow(format!(
                    "torus factor non-positive at t = {tf}"
                )));
            }
            let a1: Vec<f64> = a.iter().map(|ai| ai.dt(tf)).collect();
            let a2: Vec<f64> = a.iter().map(|ai| ai.dtt(tf)).collect();
            let g = DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                av.iter().map(|v| v * v),
            ));
            let g_inv = DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                av.iter().map(|v| 1.0 / (v * v)),
            ));
            let s_tensor = DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                av.iter().zip(&a1).map(|(v, d)| -v * d),
            ));
            let s_scalar = -av.iter().zip(&a1).map(|(v, d)| d / v).sum::<f64>();
            let dt_s_fwd = -av
                .iter()
                .zip(&a1)
                .zip(&a2)
                .map(|((v, d1), d2)| d2 / v - (d1 / v) * (d1 / v))
                .sum::<f64>();
            let norm_s_sq = av.iter().zip(&a1).map(|(v, d)| (d / v) * (d / v)).sum();
            GeometrySnapshot {
                n,
                t,
                x,
                orientation: flow.orientation,
                g,
                g_inv,
                s_tensor,
                s_scalar,
                ric: DMatrix::zeros(n, n),
                d_s: DVector::zeros(n),
                div_s: DVector::zeros(n),
                dt_s: or_sign * dt_s_fwd,
                lap_s: 0.0,
                norm_s_sq,
                weighted: None,
            }
        }
        Family::CircleConformal { u } => circle_snapshot(flow, u, None, t, tf, x, or_sign),
        Family::WeightedCircle { u, weight } => {
            circle_snapshot(flow, u, Some(weight), t, tf, x, or_sign)
        }
        Family::StaticManifold { base } => match base {
            StaticBase::Sphere { n, r_sq } => {
                let nf = *n as f64;
                GeometrySnapshot {
                    n: *n,
                    t,
                    x,
                    orientation: flow.orientation,
                    g: DMatrix::from_diagonal_element(*n, *n, *r_sq),
                    g_inv: DMatrix::from_diagonal_element(*n, *n, 1.0 / *r_sq),
                    s_tensor: DMatrix::zeros(*n, *n),
                    s_scalar: 0.0,
                    ric: DMatrix::from_diagonal_element(*n, *n, nf - 1.0),
                    d_s: DVector::zeros(*n),
                    div_s: DVector::zeros(*n),
                    dt_s: 0.0,
                    lap_s: 0.0,
                    norm_s_sq: 0.0,
                    weighted: None,
                }
            }
            StaticBase::Circle { u } => {
                // Static circle: freeze the conformal jet at t = 0.
                let e2u = (2.0 * u.f.eval(0.0, x)).exp();
                GeometrySnapshot {
                    n: 1,
                    t,
                    x,
                    orientation: flow.orientation,
                    g: DMatrix::from_element(1, 1, e2u),
                    g_inv: DMatrix::from_element(1, 1, 1.0 / e2u),
                    s_tensor: DMatrix::zeros(1, 1),
                    s_scalar: 0.0,
                    ric: DMatrix::zeros(1, 1),
                    d_s: DVector::zeros(1),
                    div_s: DVector::zeros(1),
                    dt_s: 0.0,
                    lap_s: 0.0,
                    norm_s_sq: 0.0,
                    weighted: None,
                }
            }
        },
    };
    debug_assert_eq!(snap.n, n);
    Ok(snap)
}

#[allow(clippy::too_many_arguments)]
fn circle_snapshot(
    _flow: &FlowSpec,
    u: &Jet2,
    weight: Option<&Jet2>,
    t: f64,
    tf: f64,
    x: f64,
    or_sign: f64,
) -> GeometrySnapshot {
    let uv = u.f.eval(tf, x);
    let ut = u.ft.eval(tf, x);
    let uth = u.fth.eval(tf, x);
    let utt = u.ftt.eval(tf, x);
    let utth = u.ftth.eval(tf, x);
    let utthth = u.ftthth.eval(tf, x);
    let e2u = (2.0 * uv).exp();

    // S = -u_t;  S_tensor = -u_t e^{2u};  (div S)_theta = -u_{t theta};
    // dS = -u_{t theta};  Lap S = e^{-2u}(S_thth - u_th S_th).
    let s_scalar = -ut;
    let s_th = -utth;
    let s_thth = -utthth;
    let lap_s = (s_thth - uth * s_th) / e2u;

    let weighted = weight.map(|w| {
        let wt = w.ft.eval(tf, x);
        let wth = w.fth.eval(tf, x);
        let wtt = w.ftt.eval(tf, x);
        let wtth = w.ftth.eval(tf, x);
        let wthth = w.fthth.eval(tf, x);
        let wtthth = w.ftthth.eval(tf, x);
        let s_u = s_scalar + wt;
        let s_u_th = s_th + wtth;
        let s_u_thth = s_thth + wtthth;
        // Lap_U f = e^{-2u}(f_thth - u_th f_th) - <grad U, grad f>.
        let lap_s_u = (s_u_thth - uth * s_u_th) / e2u;
        let lap_u_s_u = lap_s_u - wth * s_u_th / e2u;
        WeightedFields {
            d_u: DVector::from_element(1, wth),
            hess_u: DMatrix::from_element(1, 1, wthth - uth * wth),
            lap_u: (wthth - uth * wth) / e2u,
            dt_u: or_sign * wt,
            s_u,
            d_s_u: DVector::from_element(1, s_u_th),
            div_u_s: DVector::from_element(1, -utth - (-ut) * wth),
            dt_s_u: or_sign * (utt * (-1.0) + wtt),
            lap_u_s_u,
        }
    });

    GeometrySnapshot {
        n: 1,
        t,
        x,
        orientation: if or_sign < 0.0 {
            TimeOrientation::Backward
        } else {
            TimeOrientation::Forward
        },
        g: DMatrix::from_element(1, 1, e2u),
        g_inv: DMatrix::from_element(1, 1, 1.0 / e2u),
        s_tensor: DMatrix::from_element(1, 1, -ut * e2u),
        s_scalar,
        ric: DMatrix::zeros(1, 1),
        d_s: DVector::from_element(1, s_th),
        div_s: DVector::from_element(1, -utth),
        dt_s: or_sign * -utt,
        lap_s,
        norm_s_sq: ut * ut,
        weighted,
    }
}

/// `D(X)` for a tangent vector `X` (components in the snapshot's basis).
pub fn evaluate_d(snap: &GeometrySnapshot, x_vec: &DVector<f64>) -> Result<f64> {
    if x_vec.len() != snap.n {
        return Err(DflowError::Shape(format!(
            "tangent vector has dimension {}, snapshot has {}",
            x_vec.len(),
            snap.n
        )));
    }
    let c = snap.d_constant_part();
    let l = snap.d_linear_part().dot(x_vec);
    let q = (snap.d_quadratic_part() * x_vec).dot(x_vec);
    Ok(c + l + q)
}

/// Result of minimizing the quadratic `X -> D(X)`.
#[derive(Debug, Clone)]
pub struct DMinimum {
    /// `None` means the infimum is minus infinity.
    pub min_value: Option<f64>,
    pub argmin: Option<DVector<f64>>,
}

impl DMinimum {
    pub fn is_nonnegative(&self, tol: f64) -> bool {
        matches!(self.min_value, Some(v) if v >= -tol)
    }
}

/// Closed-form minimization of `X -> c + l(X) + q(X,X)` via the spectral
/// decomposition of the quadratic part. Eigenvalues below `1e-10` (relative
/// to the spectral radius) count as singular directions; the linear part must
/// lie in the range of `q` up to `1e-8 * |l|` or the infimum is `-inf`.
pub fn minimize_d(snap: &GeometrySnapshot) -> DMinimum {
    let q = snap.d_quadratic_part();
    let l = snap.d_linear_part();
    let c = snap.d_constant_part();
    minimize_quadratic(&q, &l, c)
}

pub(crate) fn minimize_quadratic(q: &DMatrix<f64>, l: &DVector<f64>, c: f64) -> DMinimum {
    let n = l.len();
    let eig = q.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |m, &e| m.max(e.abs()));
    let sing_tol = 1e-10 * scale;
    // Components of l in the eigenbasis.
    let lb = eig.eigenvectors.transpose() * l;
    let l_norm = l.norm();
    let mut value = c;
    let mut arg = DVector::zeros(n);
    for i in 0..n {
        let lam = eig.eigenvalues[i];
        if lam < -sing_tol {
            return DMinimum {
                min_value: None,
                argmin: None,
            };
        }
        if lam.abs() <= sing_tol {
            if lb[i].abs() > 1e-8 * l_norm.max(1e-300) {
                // Unbounded along a null direction of q.
                return DMinimum {
                    min_value: None,
                    argmin: None,
                };
            }
            continue;
        }
        // min over s of lb_i s + lam s^2 is at s = -lb_i / (2 lam).
        value -= lb[i] * lb[i] / (4.0 * lam);
        arg[i] = -lb[i] / (2.0 * lam);
    }
    let argmin = &eig.eigenvectors * arg;
    DMinimum {
        min_value: Some(value),
        argmin: Some(argmin),
    }
}

/// `D_{U,infinity}(X)` or `D_{U,N}(X)`; `n_param = None` means `N = infinity`.
pub fn evaluate_d_weighted(
    snap: &GeometrySnapshot,
    x_vec: &DVector<f64>,
    n_param: Option<f64>,
) -> Result<f64> {
    if x_vec.len() != snap.n {
        return Err(DflowError::Shape(format!(
            "tangent vector has dimension {}, snapshot has {}",
            x_vec.len(),
            snap.n
        )));
    }
    let w = snap
        .weighted
        .as_ref()
        .ok_or_else(|| DflowError::Contract("snapshot has no weighted fields".into()))?;
    let m = snap.n as f64;

    // Homogeneity-2: 2 (Ric + Hess U - S_tensor).
    let q = 2.0 * (&snap.ric + &w.hess_u - &snap.s_tensor);
    // Homogeneity-1: 2 (2 div_U S_tensor - dS_U).
    let l = 2.0 * (2.0 * &w.div_u_s - &w.d_s_u);
    // Homogeneity-0: dS_U/dt - Lap_U S_U - 2 |S_tensor|^2.
    let c = snap.dt_s_u_forward().unwrap() - w.lap_u_s_u - 2.0 * snap.norm_s_sq;

    let d_inf = c + l.dot(x_vec) + (q * x_vec).dot(x_vec);
    match n_param {
        None => Ok(d_inf),
        Some(n_big) => {
            if n_big < m {
                return Err(DflowError::Parameter(format!(
                    "effective dimension N = {n_big} below manifold dimension {m}"
                )));
            }
            let numer = w.d_u.dot(x_vec) - self_dt_u(snap);
            if n_big == m {
                if numer.abs() < 1e-14 {
                    return Ok(d_inf);
                }
                return Err(DflowError::Parameter(
                    "N equals the manifold dimension but the correction numerator is nonzero"
                        .into(),
                ));
            }
            Ok(d_inf - 2.0 / (n_big - m) * numer * numer)
        }
    }
}

fn self_dt_u(snap: &GeometrySnapshot) -> f64 {
    snap.dt_u_forward().unwrap_or(0.0)
}

/// Classification of a round-sphere flow against the three criteria.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SphereClassification {
    pub is_ricci_flow: bool,
    pub is_srf: bool,
    pub satisfies_d: bool,
    /// `max_t |d/dt r^2 + 2(n-1)|`.
    pub ricci_deviation: f64,
    /// `inf_t (d/dt r^2 + 2(n-1))`.
    pub srf_margin: f64,
    /// `inf_t (-d^2/dt^2 r^2)`.
    pub concavity_margin: f64,
}

pub fn classify_sphere_flow(flow: &FlowSpec) -> Result<SphereClassification> {
    let (n, r_sq) = match &flow.family {
        Family::RoundSphere { n, r_sq } => (*n, r_sq),
        _ => {
            return Err(DflowError::Parameter(
                "classification requires the round-sphere family".into(),
            ))
        }
    };
    let (a, b) = flow.interval;
    let samples = 201;
    let mut ricci_dev: f64 = 0.0;
    let mut srf_margin = f64::INFINITY;
    let mut conc_margin = f64::INFINITY;
    for k in 0..samples {
        let t = a + (b - a) * k as f64 / (samples - 1) as f64;
        let d1 = r_sq.dt(t);
        let d2 = r_sq.dtt(t);
        ricci_dev = ricci_dev.max((d1 + 2.0 * (n as f64 - 1.0)).abs());
        srf_margin = srf_margin.min(d1 + 2.0 * (n as f64 - 1.0));
        conc_margin = conc_margin.min(-d2);
    }
    let tol = 1e-10;
    Ok(SphereClassification {
        is_ricci_flow: ricci_dev <= tol,
        is_srf: srf_margin >= -tol,
        satisfies_d: srf_margin >= -tol && conc_margin >= -tol,
        ricci_deviation: ricci_dev,
        srf_margin,
        concavity_margin: conc_margin,
    })
}
