//! Discrete measures on flow grids and exact Kantorovich solvers.
//!
//! Two independent LP routes are kept on purpose: the production solver is a
//! hand-rolled transportation simplex (network structure, exact pivots), and
//! `reference` holds a dense two-phase tableau simplex used to cross-check it
//! in tests. They share no code beyond the problem statement.

use crate::error::{DflowError, Result};
use nalgebra::{DMatrix, DVector};

/// Weighted point masses on the nodes of a spatial grid. `weights[i]` is the
/// measure of node `i`; `dv[i]` the volume of its cell, so the density
/// against the volume measure is `weights / dv`.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub weights: DVector<f64>,
    pub dv: DVector<f64>,
    /// Forward time of the slice the measure lives on.
    pub time: f64,
}

impl DiscreteMeasure {
    /// A probability measure: nonnegative weights summing to one.
    pub fn new(weights: DVector<f64>, dv: DVector<f64>, time: f64) -> Self {
        let m = Self::new_unnormalized(weights, dv, time);
        debug_assert!(
            (m.total_mass() - 1.0).abs() <= 1e-9,
            "probability measure has mass {}",
            m.total_mass()
        );
        m
    }

    pub fn new_unnormalized(weights: DVector<f64>, dv: DVector<f64>, time: f64) -> Self {
        assert_eq!(weights.len(), dv.len(), "weights and dv length mismatch");
        DiscreteMeasure { weights, dv, time }
    }

    /// Normalized volume measure.
    pub fn uniform(dv: &DVector<f64>, time: f64) -> Self {
        let total = dv.sum();
        DiscreteMeasure {
            weights: dv / total,
            dv: dv.clone(),
            time,
        }
    }

    /// Unit mass at node `i`.
    pub fn dirac(i: usize, dv: &DVector<f64>, time: f64) -> Self {
        let mut w = DVector::zeros(dv.len());
        w[i] = 1.0;
        DiscreteMeasure {
            weights: w,
            dv: dv.clone(),
            time,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.len() == 0
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.sum()
    }

    pub fn density(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.weights.iter().zip(self.dv.iter()).map(|(p, v)| p / v),
        )
    }

    pub fn normalized(&self) -> Self {
        let m = self.total_mass();
        DiscreteMeasure {
            weights: &self.weights / m,
            dv: self.dv.clone(),
            time: self.time,
        }
    }

    /// Integral of a node function against the measure.
    pub fn integrate(&self, f: &DVector<f64>) -> f64 {
        self.weights.dot(f)
    }
}

/// Boltzmann entropy `int rho ln rho dV` with the convention `0 ln 0 = 0`.
pub fn entropy(mu: &DiscreteMeasure) -> Result<f64> {
    entropy_relative(mu, &mu.dv)
}

/// Entropy relative to the reference volumes `m_i` (e.g. `exp(-U) dV` for
/// weighted flows): `sum p_i ln(p_i / m_i)`.
pub fn entropy_relative(mu: &DiscreteMeasure, reference: &DVector<f64>) -> Result<f64> {
    if reference.len() != mu.len() {
        return Err(DflowError::Shape("reference measure length mismatch".into()));
    }
    let mut e = 0.0;
    for (p, m) in mu.weights.iter().zip(reference.iter()) {
        if *p < 0.0 {
            return Err(DflowError::Contract("negative mass in entropy".into()));
        }
        if *p > 0.0 {
            if *m <= 0.0 {
                return Err(DflowError::Contract(
                    "entropy is +inf: mass outside the reference support".into(),
                ));
            }
            e += p * (p / m).ln();
        }
    }
    Ok(e)
}

/// Optimal coupling for a finite cost matrix.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Sparse plan entries `(i, j, mass)`, at most `n + m - 1` of them.
    pub entries: Vec<(usize, usize, f64)>,
    pub cost: f64,
    /// Kantorovich potential on the source nodes.
    pub phi: DVector<f64>,
    /// Kantorovich potential on the target nodes.
    pub psi: DVector<f64>,
}

impl TransportPlan {
    pub fn marginals(&self, n: usize, m: usize) -> (DVector<f64>, DVector<f64>) {
        let mut a = DVector::zeros(n);
        let mut b = DVector::zeros(m);
        for &(i, j, w) in &self.entries {
            a[i] += w;
            b[j] += w;
        }
        (a, b)
    }

    pub fn dual_value(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.phi.dot(a) + self.psi.dot(b)
    }
}

pub const MAX_LP_SIZE: usize = 128;

/// Exact Kantorovich problem `min sum c_ij pi_ij` between two measures of
/// equal mass, by the transportation simplex (northwest-corner start, tree
/// potentials, most-negative entering rule with a Bland fallback).
pub fn kantorovich(
    cost: &DMatrix<f64>,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<TransportPlan> {
    optimal_coupling(cost, &mu.weights, &nu.weights)
}

pub fn optimal_coupling(
    cost: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<TransportPlan> {
    let n = a.len();
    let m = b.len();
    if cost.nrows() != n || cost.ncols() != m {
        return Err(DflowError::Shape(format!(
            "cost is {}x{}, marginals are {} and {}",
            cost.nrows(),
            cost.ncols(),
            n,
            m
        )));
    }
    if n == 0 || m == 0 {
        return Err(DflowError::Parameter("empty marginal".into()));
    }
    if n > MAX_LP_SIZE || m > MAX_LP_SIZE {
        return Err(DflowError::Parameter(format!(
            "LP size {n}x{m} exceeds the {MAX_LP_SIZE} cap; coarsen the grid"
        )));
    }
    if a.iter().any(|x| *x < 0.0) || b.iter().any(|x| *x < 0.0) {
        return Err(DflowError::Contract("negative marginal mass".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(DflowError::Contract("non-finite transport cost".into()));
    }
    let mass_a = a.sum();
    let mass_b = b.sum();
    if (mass_a - mass_b).abs() > 1e-9 * mass_a.max(mass_b).max(1.0) {
        return Err(DflowError::Infeasible(format!(
            "unbalanced marginals: {mass_a} vs {mass_b}"
        )));
    }
    if mass_a <= 0.0 {
        return Err(DflowError::Infeasible("zero-mass marginals".into()));
    }

    // Basic cells as a flat set over (i, j); basis size is always n + m - 1.
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut mass = vec![0.0f64; n + m - 1];

    // Northwest-corner start.
    {
        let mut ra: Vec<f64> = a.iter().copied().collect();
        let mut rb: Vec<f64> = b.iter().copied().collect();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let w = ra[i].min(rb[j]);
            basis.push((i, j));
            mass[basis.len() - 1] = w;
            ra[i] -= w;
            rb[j] -= w;
            if i == n - 1 && j == m - 1 {
                break;
            }
            // On ties advance the row, inserting a degenerate basic cell;
            // never step past the last row or column (roundoff can leave a
            // residual on either side).
            if i == n - 1 {
                j += 1;
            } else if j == m - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    debug_assert_eq!(basis.len(), n + m - 1);

    let cost_scale = cost.amax().max(1.0);
    let tol = 1e-12 * cost_scale;
    let max_iters = 200 * (n + m) * (n + m);
    let bland_after = max_iters / 2;

    let mut phi = DVector::zeros(n);
    let mut psi = DVector::zeros(m);

    for iter in 0..=max_iters {
        // Potentials from the spanning tree: u_i + v_j = c_ij on the basis.
        compute_potentials(&basis, cost, n, m, &mut phi, &mut psi)?;

        // Entering variable.
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                let red = cost[(i, j)] - phi[i] - psi[j];
                if iter >= bland_after {
                    // Bland: first negative in index order.
                    if red < -tol {
                        enter = Some((i, j));
                        break 'scan;
                    }
                } else if red < best {
                    best = red;
                    enter = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = enter else {
            // Optimal.
            let mut entries = Vec::new();
            let mut total = 0.0;
            for (k, &(i, j)) in basis.iter().enumerate() {
                if mass[k] > 0.0 {
                    entries.push((i, j, mass[k]));
                    total += mass[k] * cost[(i, j)];
                }
            }
            entries.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
            return Ok(TransportPlan {
                entries,
                cost: total,
                phi,
                psi,
            });
        };
        if iter == max_iters {
            return Err(DflowError::Numerical(
                "transportation simplex iteration cap reached".into(),
            ));
        }

        // Unique cycle: path from row node ei to column node ej in the tree.
        let path = tree_path(&basis, n, m, ei, ej)?;
        // Cycle cells alternate -,+,-,... along the path (entering cell is +).
        let mut theta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (pos, &cell_idx) in path.iter().enumerate() {
            if pos % 2 == 0 {
                // Minus position.
                let w = mass[cell_idx];
                if w < theta
                    || (w == theta
                        && leave.map_or(true, |l| basis[cell_idx] < basis[l]))
                {
                    theta = w;
                    leave = Some(cell_idx);
                }
            }
        }
        let leave = leave.ok_or_else(|| {
            DflowError::Numerical("degenerate transport cycle without a leaving cell".into())
        })?;
        for (pos, &cell_idx) in path.iter().enumerate() {
            if pos % 2 == 0 {
                mass[cell_idx] -= theta;
            } else {
                mass[cell_idx] += theta;
            }
        }
        basis[leave] = (ei, ej);
        mass[leave] = theta;
    }
    unreachable!()
}

/// Solve `u_i + v_j = c_ij` over the basis tree (u_0 = 0).
fn compute_potentials(
    basis: &[(usize, usize)],
    cost: &DMatrix<f64>,
    n: usize,
    m: usize,
    phi: &mut DVector<f64>,
    psi: &mut DVector<f64>,
) -> Result<()> {
    // Adjacency of the bipartite tree: node ids 0..n rows, n..n+m columns.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m]; // (neighbor, cell)
    for (k, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((n + j, k));
        adj[n + j].push((i, k));
    }
    let mut seen = vec![false; n + m];
    let mut val = vec![0.0f64; n + m];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &(w, k) in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                let (i, j) = basis[k];
                val[w] = cost[(i, j)] - val[u];
                stack.push(w);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(DflowError::Numerical(
            "transport basis is not a spanning tree".into(),
        ));
    }
    for i in 0..n {
        phi[i] = val[i];
    }
    for j in 0..m {
        psi[j] = val[n + j];
    }
    Ok(())
}

/// Basic cells on the tree path from row `ei` to column `ej`, in order.
fn tree_path(
    basis: &[(usize, usize)],
    n: usize,
    m: usize,
    ei: usize,
    ej: usize,
) -> Result<Vec<usize>> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];
    for (k, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((n + j, k));
        adj[n + j].push((i, k));
    }
    let target = n + ej;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m]; // (node, cell)
    let mut seen = vec![false; n + m];
    let mut queue = std::collections::VecDeque::new();
    seen[ei] = true;
    queue.push_back(ei);
    while let Some(u) = queue.pop_front() {
        if u == target {
            break;
        }
        for &(w, k) in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some((u, k));
                queue.push_back(w);
            }
        }
    }
    if !seen[target] {
        return Err(DflowError::Numerical(
            "transport tree is disconnected".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut node = target;
    while let Some((p, k)) = parent[node] {
        cells.push(k);
        node = p;
    }
    cells.reverse();
    // Path starts at row ei; its first cell occupies the minus position of
    // the pivot cycle (entering cell (ei, ej) closes the loop with +).
    Ok(cells)
}

/// Kantorovich problem with costs from an action table. The marginals must
/// live on the table's grid axes.
pub fn kantorovich_with_table(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    table: &crate::lagrangian::CostTable,
) -> Result<TransportPlan> {
    if mu.len() != table.n_x || nu.len() != table.n_x {
        return Err(DflowError::Shape(
            "measure size does not match the cost table".into(),
        ));
    }
    optimal_coupling(&table.values, &mu.weights, &nu.weights)
}

/// Displacement interpolation: push each plan entry's mass along its
/// Bellman-optimal node path and read it off at the requested layers.
/// Returns one measure per entry of `layers` (layer 0 is `mu_s`, layer
/// `k_layers` is `mu_t` up to plan marginals).
pub fn wasserstein_geodesic(
    mu_s: &DiscreteMeasure,
    mu_t: &DiscreteMeasure,
    flow: &crate::geometry::FlowSpec,
    grid: &crate::pde::SpaceTimeGrid,
    table: &crate::lagrangian::CostTable,
    layers: &[usize],
) -> Result<Vec<DiscreteMeasure>> {
    let plan = kantorovich_with_table(mu_s, mu_t, table)?;
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        if layer > table.k_layers {
            return Err(DflowError::Parameter(format!(
                "layer {layer} out of range 0..={}",
                table.k_layers
            )));
        }
        let t_fwd = flow.to_forward_time(table.layer_times[layer]);
        let mut w = DVector::zeros(table.n_x);
        for &(i, j, mass) in &plan.entries {
            let node = table.path(i, j)[layer] as usize;
            w[node] += mass;
        }
        out.push(DiscreteMeasure::new_unnormalized(
            w,
            grid.dv(flow, t_fwd),
            t_fwd,
        ));
    }
    Ok(out)
}

/// Metric derivative of a measure curve at sample `center`:
/// `lim_h W_{L^{r, r+h}}(mu_r, mu_{r+h}) / h`, estimated from the two
/// smallest available steps and linearly extrapolated to `h = 0`. Curve
/// samples pair the family time with the measure.
pub fn metric_derivative(
    flow: &crate::geometry::FlowSpec,
    family: &crate::lagrangian::CostFamily,
    grid: &crate::pde::SpaceTimeGrid,
    curve: &[(f64, DiscreteMeasure)],
    center: usize,
    k_layers: usize,
    window: usize,
) -> Result<f64> {
    // Prefer the two samples after `center`; fall back to the two before.
    let (i1, i2, sign) = if center + 2 < curve.len() {
        (center + 1, center + 2, 1.0)
    } else if center >= 2 {
        (center - 1, center - 2, -1.0)
    } else {
        return Err(DflowError::InsufficientResolution(
            "metric derivative needs two neighbors on one side".into(),
        ));
    };
    let (r0, m0) = (curve[center].0, &curve[center].1);
    let mut rate = [0.0f64; 2];
    let mut step = [0.0f64; 2];
    for (slot, &idx) in [i1, i2].iter().enumerate() {
        let (r, m) = (curve[idx].0, &curve[idx].1);
        let h = sign * (r - r0);
        if h <= 0.0 {
            return Err(DflowError::Parameter("curve times must be monotone".into()));
        }
        let (lo, hi, a, b) = if sign > 0.0 {
            (r0, r, m0, m)
        } else {
            (r, r0, m, m0)
        };
        let table = crate::lagrangian::cost_table(flow, family, lo, hi, grid, k_layers, window)?;
        let plan = kantorovich_with_table(a, b, &table)?;
        rate[slot] = plan.cost / h;
        step[slot] = h;
    }
    let (h1, h2) = (step[0], step[1]);
    if (h2 - h1).abs() < 1e-14 {
        return Err(DflowError::Parameter("degenerate sample spacing".into()));
    }
    Ok((h2 * rate[0] - h1 * rate[1]) / (h2 - h1))
}

/// Solve for the velocity potential of the continuity equation on a circle
/// slice: `d/dt (rho sqrt(g)) + div(rho sqrt(g) grad phi) = 0`, with `phi`
/// normalized to mean zero. Inputs are the density against `dV_t` and its
/// time derivative, both at forward time `t`.
pub fn continuity_potential(
    rho: &crate::pde::ScalarField,
    drho_dt: &crate::pde::ScalarField,
    flow: &crate::geometry::FlowSpec,
    grid: &crate::pde::SpaceTimeGrid,
    t: f64,
) -> Result<crate::pde::ScalarField> {
    let n = grid.n_x;
    if rho.values.len() != n || drho_dt.values.len() != n {
        return Err(DflowError::Shape("field length != grid size".into()));
    }
    if rho.values.min() <= 0.0 {
        return Err(DflowError::Contract("density must be positive".into()));
    }
    if n == 1 {
        // No spatial freedom; the data must already conserve mass.
        let dv = grid.dv(flow, t)[0];
        let h = 1e-5;
        let dv_dot = (grid.dv(flow, (t + h).min(flow.interval.1))[0]
            - grid.dv(flow, (t - h).max(flow.interval.0))[0])
            / ((t + h).min(flow.interval.1) - (t - h).max(flow.interval.0));
        let mass_drift = drho_dt.values[0] * dv + rho.values[0] * dv_dot;
        if mass_drift.abs() > 1e-8 {
            return Err(DflowError::Contract(format!(
                "data violates mass conservation by {mass_drift:.3e}"
            )));
        }
        return Ok(crate::pde::ScalarField::constant(grid, 0.0, t));
    }
    let u = flow
        .circle_u()
        .ok_or_else(|| DflowError::Parameter("continuity potential needs a circle".into()))?;
    let is_static = matches!(
        flow.family,
        crate::geometry::Family::StaticManifold { .. }
    );
    let te = if is_static { 0.0 } else { t };
    // Mass density per unit angle q = rho e^u and its time derivative.
    let mut b = DVector::zeros(n);
    let mut coeff = vec![0.0f64; n]; // rho e^{-u} at nodes (flux coefficient)
    let mut total = 0.0;
    for i in 0..n {
        let th = grid.theta[i];
        let uv = u.f.eval(te, th);
        let ut = if is_static { 0.0 } else { u.ft.eval(te, th) };
        let q_dot = (drho_dt.values[i] + rho.values[i] * ut) * uv.exp();
        b[i] = -q_dot;
        total += q_dot * grid.h;
        coeff[i] = rho.values[i] * (-uv).exp();
    }
    if total.abs() > 1e-8 {
        return Err(DflowError::Contract(format!(
            "data violates mass conservation by {total:.3e}"
        )));
    }
    // Cyclic system d/dth (w dphi/dth) = b with face weights w averaged from
    // the nodes; bordered with the mean-zero constraint to fix the kernel.
    let mut sys = DMatrix::zeros(n + 1, n + 1);
    let mut rhs = DVector::zeros(n + 1);
    for i in 0..n {
        let ip = (i + 1) % n;
        let im = (i + n - 1) % n;
        let w_p = 0.5 * (coeff[i] + coeff[ip]);
        let w_m = 0.5 * (coeff[i] + coeff[im]);
        sys[(i, ip)] += w_p / (grid.h * grid.h);
        sys[(i, im)] += w_m / (grid.h * grid.h);
        sys[(i, i)] -= (w_p + w_m) / (grid.h * grid.h);
        sys[(i, n)] = 1.0;
        sys[(n, i)] = 1.0;
        rhs[i] = b[i];
    }
    let lu = sys.clone().lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| DflowError::Numerical("singular continuity system".into()))?;
    let phi = DVector::from_iterator(n, sol.iter().take(n).copied());
    // Residual certificate.
    let resid = (&sys.view((0, 0), (n, n)) * &phi - &b).amax();
    let scale = b.amax().max(1.0);
    if resid > 1e-7 * scale {
        return Err(DflowError::Numerical(format!(
            "continuity residual {resid:.3e} too large"
        )));
    }
    Ok(crate::pde::ScalarField {
        values: phi,
        time: t,
        tag: crate::pde::FieldTag::Potential,
    })
}

/// Sliding-window smoothing of a measure curve: each sample is pulled back a
/// little by the conjugate heat flow, with the kind-specific time map
/// (`t - eps` steady, `tau -> e^eps tau` shrinking backward time,
/// `t -> e^{-eps} t` expanding). Output densities are strictly positive.
pub fn smooth_curve(
    curve: &[DiscreteMeasure],
    flow: &crate::geometry::FlowSpec,
    grid: &crate::pde::SpaceTimeGrid,
    eps: f64,
    kind: crate::lagrangian::CostKind,
) -> Result<Vec<DiscreteMeasure>> {
    use crate::lagrangian::CostKind;
    if eps < 0.0 {
        return Err(DflowError::Domain("smoothing eps must be nonnegative".into()));
    }
    let mut out = Vec::with_capacity(curve.len());
    for mu in curve {
        let t = mu.time;
        let t_eps = match kind {
            CostKind::L0 => t - eps,
            CostKind::Lminus => {
                let tau = flow.reference_time - t;
                if tau <= 0.0 {
                    return Err(DflowError::Domain(
                        "shrinking smoothing needs positive backward time".into(),
                    ));
                }
                flow.reference_time - eps.exp() * tau
            }
            CostKind::Lplus => {
                if t <= 0.0 {
                    return Err(DflowError::Domain(
                        "expanding smoothing needs positive forward time".into(),
                    ));
                }
                (-eps).exp() * t
            }
        };
        if t_eps < flow.interval.0 - 1e-12 {
            return Err(DflowError::Domain(format!(
                "smoothed time {t_eps} leaves the flow interval"
            )));
        }
        if eps == 0.0 {
            out.push(mu.clone());
            continue;
        }
        // Backward Euler keeps the propagator an M-matrix, so positivity of
        // the smoothed density is exact, not just asymptotic.
        let sm = crate::pde::adjoint_heat_propagate_scheme(
            mu,
            flow,
            grid,
            t,
            t_eps.max(flow.interval.0),
            crate::pde::Scheme::BackwardEuler,
        )?;
        if grid.n_x > 1 && sm.weights.min() <= 0.0 {
            return Err(DflowError::Numerical(
                "smoothed density not strictly positive".into(),
            ));
        }
        out.push(sm);
    }
    Ok(out)
}

/// Independent dense LP oracle used only for cross-checks in tests.
pub mod reference {
    use super::*;

    /// Two-phase tableau simplex on the standard-form transportation LP.
    /// O((nm)^3)-ish; keep instances small.
    pub fn optimal_cost(cost: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        let n = a.len();
        let m = b.len();
        if n * m > 1024 {
            return Err(DflowError::Parameter(
                "reference simplex is for small instances only".into(),
            ));
        }
        // Constraints: n row sums + (m - 1) column sums (last is redundant).
        let rows = n + m - 1;
        let cols = n * m;
        let mut amat = DMatrix::<f64>::zeros(rows, cols);
        let mut rhs = DVector::<f64>::zeros(rows);
        for i in 0..n {
            for j in 0..m {
                amat[(i, i * m + j)] = 1.0;
            }
            rhs[i] = a[i];
        }
        for j in 0..m - 1 {
            for i in 0..n {
                amat[(n + j, i * m + j)] = 1.0;
            }
            rhs[n + j] = b[j];
        }
        let obj: Vec<f64> = (0..cols).map(|k| cost[(k / m, k % m)]).collect();
        let x = two_phase_simplex(&amat, &rhs, &obj)?;
        Ok((0..cols).map(|k| obj[k] * x[k]).sum())
    }

    fn two_phase_simplex(
        amat: &DMatrix<f64>,
        rhs: &DVector<f64>,
        obj: &[f64],
    ) -> Result<Vec<f64>> {
        let rows = amat.nrows();
        let cols = amat.ncols();
        // Tableau with artificial variables appended.
        let total = cols + rows;
        let mut t = DMatrix::<f64>::zeros(rows + 1, total + 1);
        for r in 0..rows {
            for c in 0..cols {
                t[(r, c)] = amat[(r, c)];
            }
            t[(r, cols + r)] = 1.0;
            t[(r, total)] = rhs[r];
        }
        let mut basis: Vec<usize> = (cols..total).collect();
        // Phase 1 objective: minimize sum of artificials.
        for c in 0..=total {
            let mut s = 0.0;
            for r in 0..rows {
                s += t[(r, c)];
            }
            t[(rows, c)] = -s;
        }
        for r in 0..rows {
            t[(rows, cols + r)] = 0.0;
        }
        simplex_iterate(&mut t, &mut basis, cols, true)?;
        if t[(rows, total)].abs() > 1e-9 {
            return Err(DflowError::Infeasible(
                "reference LP phase 1 did not reach zero".into(),
            ));
        }
        // Drive any artificial still basic out (or confirm its row is null).
        for r in 0..rows {
            if basis[r] >= cols {
                let mut pivoted = false;
                for c in 0..cols {
                    if t[(r, c)].abs() > 1e-9 {
                        pivot(&mut t, &mut basis, r, c);
                        pivoted = true;
                        break;
                    }
                }
                if !pivoted {
                    // Redundant row; harmless.
                }
            }
        }
        // Phase 2 objective row.
        for c in 0..=total {
            t[(rows, c)] = 0.0;
        }
        for c in 0..cols {
            t[(rows, c)] = obj[c];
        }
        // Make the objective row consistent with the basis.
        for r in 0..rows {
            let bc = basis[r];
            if bc < cols && t[(rows, bc)].abs() > 0.0 {
                let f = t[(rows, bc)];
                for c in 0..=total {
                    t[(rows, c)] -= f * t[(r, c)];
                }
            }
        }
        simplex_iterate(&mut t, &mut basis, cols, false)?;
        let mut x = vec![0.0f64; cols];
        for r in 0..rows {
            if basis[r] < cols {
                x[basis[r]] = t[(r, t.ncols() - 1)];
            }
        }
        Ok(x)
    }

    fn simplex_iterate(
        t: &mut DMatrix<f64>,
        basis: &mut [usize],
        usable_cols: usize,
        phase1: bool,
    ) -> Result<()> {
        let rows = t.nrows() - 1;
        let total = t.ncols() - 1;
        let limit = if phase1 { total } else { usable_cols };
        for _iter in 0..20_000 {
            // Bland's rule: first improving column.
            let mut enter = None;
            for c in 0..limit {
                if t[(rows, c)] < -1e-10 {
                    enter = Some(c);
                    break;
                }
            }
            let Some(c) = enter else { return Ok(()) };
            // Ratio test, Bland tie-break by basis index.
            let mut leave: Option<usize> = None;
            let mut best = f64::INFINITY;
            for r in 0..rows {
                if t[(r, c)] > 1e-12 {
                    let ratio = t[(r, total)] / t[(r, c)];
                    if ratio < best - 1e-15
                        || (ratio < best + 1e-15
                            && leave.map_or(true, |l| basis[r] < basis[l]))
                    {
                        best = ratio;
                        leave = Some(r);
                    }
                }
            }
            let Some(r) = leave else {
                return Err(DflowError::Infeasible("reference LP is unbounded".into()));
            };
            pivot(t, basis, r, c);
        }
        Err(DflowError::Numerical(
            "reference simplex iteration cap reached".into(),
        ))
    }

    fn pivot(t: &mut DMatrix<f64>, basis: &mut [usize], r: usize, c: usize) {
        let rows = t.nrows();
        let cols = t.ncols();
        let p = t[(r, c)];
        for cc in 0..cols {
            t[(r, cc)] /= p;
        }
        for rr in 0..rows {
            if rr != r {
                let f = t[(rr, c)];
                if f != 0.0 {
                    for cc in 0..cols {
                        t[(rr, cc)] -= f * t[(r, cc)];
                    }
                }
            }
        }
        basis[r] = c;
    }
}
