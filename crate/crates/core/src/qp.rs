//! Dense strictly convex QP for the control stack:
//!
//! ```text
//!     minimize    ‖q̇‖² + l_δ‖δ‖² + l_η‖η‖²
//!     subject to  a_k·q̇ + s_k ≥ b_k      (s_k is the row's slack, if any)
//!                 lo ≤ q̇ ≤ hi,  slack bounds
//! ```
//!
//! Solved with the Goldfarb–Idnani dual active-set method. The Hessian is
//! diagonal, so the initial factor is trivial and every problem with a
//! non-empty feasible set has a unique minimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cbf::SlackKind;

pub const DEFAULT_MAX_ITERATIONS: usize = 200;
const FEAS_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackWeights {
    pub skill: f64,
    pub limit: f64,
}

impl Default for SlackWeights {
    fn default() -> Self {
        Self { skill: 100.0, limit: 100.0 }
    }
}

impl SlackWeights {
    pub fn of(&self, kind: SlackKind) -> f64 {
        match kind {
            SlackKind::Skill => self.skill,
            SlackKind::Limit => self.limit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub const FREE: Bound = Bound { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn symmetric(v: f64) -> Self {
        Self { lo: -v, hi: v }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackVar {
    pub kind: SlackKind,
    pub bound: Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpRow {
    pub a: Vec<f64>,
    pub b: f64,
    pub slack: Option<usize>,
}

/// Decision layout is `[q̇ | slacks]`, slacks in the order of `slacks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub n_vel: usize,
    pub weights: SlackWeights,
    pub slacks: Vec<SlackVar>,
    pub rows: Vec<QpRow>,
    /// Per-velocity bounds; empty means unbounded.
    pub vel_bounds: Vec<Bound>,
}

impl QpProblem {
    pub fn new(n_vel: usize) -> Self {
        Self { n_vel, weights: SlackWeights::default(), slacks: Vec::new(), rows: Vec::new(), vel_bounds: Vec::new() }
    }

    pub fn add_slack(&mut self, kind: SlackKind, bound: Bound) -> usize {
        self.slacks.push(SlackVar { kind, bound });
        self.slacks.len() - 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.weights.skill >= 0.0 && self.weights.limit >= 0.0) {
            return Err("slack weights must be non-negative".into());
        }
        if !self.vel_bounds.is_empty() && self.vel_bounds.len() != self.n_vel {
            return Err("velocity bounds must cover every velocity".into());
        }
        for b in self.vel_bounds.iter().chain(self.slacks.iter().map(|s| &s.bound)) {
            if b.lo > b.hi || b.lo.is_nan() || b.hi.is_nan() {
                return Err(format!("inverted bound [{}, {}]", b.lo, b.hi));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.a.len() != self.n_vel {
                return Err(format!("row {i} has {} coefficients, expected {}", r.a.len(), self.n_vel));
            }
            if !r.b.is_finite() || !r.a.iter().all(|v| v.is_finite()) {
                return Err(format!("row {i} has non-finite entries"));
            }
            if let Some(s) = r.slack {
                if s >= self.slacks.len() {
                    return Err(format!("row {i} references slack {s} of {}", self.slacks.len()));
                }
            }
        }
        Ok(())
    }

    fn weight(&self, slack: usize) -> f64 {
        self.weights.of(self.slacks[slack].kind)
    }

    /// `‖q̇‖² + Σ w_k s_k²`
    pub fn objective(&self, qdot: &[f64], slack: &[f64]) -> f64 {
        qdot.iter().map(|v| v * v).sum::<f64>()
            + slack.iter().enumerate().map(|(k, s)| self.weight(k) * s * s).sum::<f64>()
    }

    fn constraints(&self) -> Vec<Constraint> {
        let n = self.n_vel + self.slacks.len();
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            let mut normal = vec![0.0; n];
            normal[..self.n_vel].copy_from_slice(&r.a);
            if let Some(s) = r.slack {
                normal[self.n_vel + s] = 1.0;
            }
            out.push(Constraint { normal, rhs: r.b, origin: Origin::Row(i) });
        }
        let bounds = self
            .vel_bounds
            .iter()
            .enumerate()
            .map(|(j, b)| (j, *b))
            .chain(self.slacks.iter().enumerate().map(|(k, s)| (self.n_vel + k, s.bound)));
        for (j, b) in bounds {
            if b.lo.is_finite() {
                let mut normal = vec![0.0; n];
                normal[j] = 1.0;
                out.push(Constraint { normal, rhs: b.lo, origin: Origin::Lower(j) });
            }
            if b.hi.is_finite() {
                let mut normal = vec![0.0; n];
                normal[j] = -1.0;
                out.push(Constraint { normal, rhs: -b.hi, origin: Origin::Upper(j) });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub stationarity: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.stationarity).max(self.dual).max(self.complementarity)
    }
}

/// Lagrange multipliers, one per row and per finite bound.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Multipliers {
    pub rows: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub status: QpStatus,
    pub qdot: Vec<f64>,
    /// Skill slacks in layout order.
    pub delta: Vec<f64>,
    /// Limit slacks in layout order.
    pub eta: Vec<f64>,
    /// All slacks in layout order.
    pub slack: Vec<f64>,
    pub multipliers: Multipliers,
    pub objective: f64,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

#[derive(Debug, Clone)]
struct Constraint {
    normal: Vec<f64>,
    rhs: f64,
    origin: Origin,
}

#[derive(Debug, Clone, Copy)]
enum Origin {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * x + s * y;
        m[(r, j)] = -s * x + c * y;
    }
}

enum DualOutcome {
    Optimal { x: Vec<f64>, lambda: Vec<f64>, iterations: usize },
    Infeasible { iterations: usize },
    MaxIterations { x: Vec<f64>, iterations: usize },
}

/// Goldfarb–Idnani for `min ½ xᵀ diag(g) x  s.t.  n_iᵀ x ≥ b_i`.
fn dual_active_set(g: &[f64], cons: &[Constraint], max_iter: usize) -> DualOutcome {
    let n = g.len();
    let mut x = vec![0.0; n];
    // J = L⁻ᵀ, with G = L Lᵀ
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jm[(i, i)] = 1.0 / g[i].sqrt();
    }
    let mut rm = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let norms: Vec<f64> = cons.iter().map(|c| dot(&c.normal, &c.normal).sqrt()).collect();
    let mut iterations = 0;

    loop {
        // most violated constraint, measured as distance to its hyperplane
        let mut worst = None;
        let mut worst_s = -FEAS_TOL;
        for (i, c) in cons.iter().enumerate() {
            if norms[i] == 0.0 || active.contains(&i) {
                continue;
            }
            let s = (dot(&c.normal, &x) - c.rhs) / norms[i];
            if s < worst_s {
                worst_s = s;
                worst = Some(i);
            }
        }
        let Some(p) = worst else {
            let mut lambda = vec![0.0; cons.len()];
            for (k, &i) in active.iter().enumerate() {
                lambda[i] = u[k];
            }
            return DualOutcome::Optimal { x, lambda, iterations };
        };
        let np = &cons[p].normal;
        let mut up = 0.0;
        let mut sp = dot(np, &x) - cons[p].rhs;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return DualOutcome::MaxIterations { x, iterations };
            }
            let q = active.len();
            let d: Vec<f64> = (0..n).map(|j| (0..n).map(|i| jm[(i, j)] * np[i]).sum()).collect();
            let mut z = vec![0.0; n];
            for j in q..n {
                for i in 0..n {
                    z[i] += jm[(i, j)] * d[j];
                }
            }
            // r = R⁻¹ d₁
            let mut r = d[..q].to_vec();
            for k in (0..q).rev() {
                for c in k + 1..q {
                    r[k] -= rm[(k, c)] * r[c];
                }
                r[k] /= rm[(k, k)];
            }
            let d_norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d2_norm = d[q..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let primal_step = d2_norm > 1e-10 * d_norm;

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-14 {
                    let ratio = u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let t2 = if primal_step { -sp / dot(&z, np) } else { f64::INFINITY };

            if !t1.is_finite() && !t2.is_finite() {
                return DualOutcome::Infeasible { iterations };
            }
            if !t2.is_finite() {
                // dual step only: constraint p is dependent on the active set
                for (uk, rk) in u.iter_mut().zip(&r) {
                    *uk -= t1 * rk;
                }
                up += t1;
                let k = drop.expect("finite t1 has a blocking index");
                remove_active(&mut jm, &mut rm, &mut active, &mut u, k);
                continue;
            }
            let t = t1.min(t2);
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += t * zi;
            }
            for (uk, rk) in u.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            up += t;
            if t2 <= t1 {
                // full step: p becomes active
                let mut d = d;
                for j in (q + 1..n).rev() {
                    let (c, s, h) = givens(d[j - 1], d[j]);
                    if d[j] != 0.0 {
                        d[j - 1] = h;
                        d[j] = 0.0;
                        rotate_columns(&mut jm, j - 1, j, c, s);
                    }
                }
                for k in 0..=q {
                    rm[(k, q)] = d[k];
                }
                active.push(p);
                u.push(up);
                break;
            }
            let k = drop.expect("partial step has a blocking index");
            remove_active(&mut jm, &mut rm, &mut active, &mut u, k);
            sp = dot(np, &x) - cons[p].rhs;
        }
    }
}

fn remove_active(jm: &mut DMatrix<f64>, rm: &mut DMatrix<f64>, active: &mut Vec<usize>, u: &mut Vec<f64>, k: usize) {
    let q = active.len();
    active.remove(k);
    u.remove(k);
    for c in k..q - 1 {
        for r in 0..q {
            rm[(r, c)] = rm[(r, c + 1)];
        }
    }
    for r in 0..q {
        rm[(r, q - 1)] = 0.0;
    }
    // restore upper-triangular form
    for j in k..q - 1 {
        let (c, s, h) = givens(rm[(j, j)], rm[(j + 1, j)]);
        if rm[(j + 1, j)] == 0.0 {
            continue;
        }
        rm[(j, j)] = h;
        rm[(j + 1, j)] = 0.0;
        for col in j + 1..q - 1 {
            let (a, b) = (rm[(j, col)], rm[(j + 1, col)]);
            rm[(j, col)] = c * a + s * b;
            rm[(j + 1, col)] = -s * a + c * b;
        }
        rotate_columns(jm, j, j + 1, c, s);
    }
}

pub fn solve(problem: &QpProblem) -> QpSolution {
    solve_with(problem, DEFAULT_MAX_ITERATIONS)
}

/// Solves the problem. Slacks whose weight is zero are free, so their rows
/// are dropped from the active-set phase and the slack is reported as the
/// smallest value that satisfies the row.
pub fn solve_with(problem: &QpProblem, max_iter: usize) -> QpSolution {
    debug_assert!(problem.validate().is_ok(), "{:?}", problem.validate());
    let n_slack = problem.slacks.len();
    let n = problem.n_vel + n_slack;
    let free_slack: Vec<bool> = (0..n_slack).map(|k| problem.weight(k) == 0.0).collect();

    // reduced variables: velocities and weighted slacks
    let mut var_map: Vec<Option<usize>> = vec![None; n];
    let mut g = Vec::new();
    for (j, slot) in var_map.iter_mut().enumerate() {
        let weight = if j < problem.n_vel { 1.0 } else { problem.weight(j - problem.n_vel) };
        if j < problem.n_vel || !free_slack[j - problem.n_vel] {
            *slot = Some(g.len());
            g.push(2.0 * weight);
        }
    }
    let full = problem.constraints();
    let involves_free = |c: &Constraint| (0..n_slack).any(|k| free_slack[k] && c.normal[problem.n_vel + k] != 0.0);
    let mut reduced = Vec::new();
    let mut reduced_origin = Vec::new();
    for (i, c) in full.iter().enumerate() {
        if involves_free(c) {
            continue;
        }
        let mut normal = vec![0.0; g.len()];
        for (j, v) in c.normal.iter().enumerate() {
            if let Some(m) = var_map[j] {
                normal[m] = *v;
            }
        }
        reduced.push(Constraint { normal, rhs: c.rhs, origin: c.origin });
        reduced_origin.push(i);
    }

    let outcome = dual_active_set(&g, &reduced, max_iter);
    let (status, xr, lambda_r, iterations) = match outcome {
        DualOutcome::Optimal { x, lambda, iterations } => (QpStatus::Optimal, x, lambda, iterations),
        DualOutcome::Infeasible { iterations } => (QpStatus::Infeasible, vec![0.0; g.len()], vec![0.0; reduced.len()], iterations),
        DualOutcome::MaxIterations { x, iterations } => (QpStatus::MaxIterations, x, vec![0.0; reduced.len()], iterations),
    };

    let mut z = vec![0.0; n];
    for (j, m) in var_map.iter().enumerate() {
        if let Some(m) = m {
            z[j] = xr[*m];
        }
    }
    if status == QpStatus::Optimal {
        // free slacks take the least value their row needs
        for (k, free) in free_slack.iter().enumerate() {
            if !free {
                continue;
            }
            let bound = problem.slacks[k].bound;
            let need = problem
                .rows
                .iter()
                .filter(|r| r.slack == Some(k))
                .map(|r| r.b - dot(&r.a, &z[..problem.n_vel]))
                .fold(bound.lo.max(0.0), f64::max);
            z[problem.n_vel + k] = need.min(bound.hi);
        }
    }

    let mut multipliers = Multipliers { rows: vec![0.0; problem.rows.len()], lower: vec![0.0; n], upper: vec![0.0; n] };
    for (k, &i) in reduced_origin.iter().enumerate() {
        let lam = lambda_r[k];
        match full[i].origin {
            Origin::Row(r) => multipliers.rows[r] = lam,
            Origin::Lower(j) => multipliers.lower[j] = lam,
            Origin::Upper(j) => multipliers.upper[j] = lam,
        }
    }

    let qdot = z[..problem.n_vel].to_vec();
    let slack = z[problem.n_vel..].to_vec();
    let pick = |kind: SlackKind| -> Vec<f64> {
        problem.slacks.iter().zip(&slack).filter(|(s, _)| s.kind == kind).map(|(_, v)| *v).collect()
    };
    let mut solution = QpSolution {
        status,
        objective: problem.objective(&qdot, &slack),
        delta: pick(SlackKind::Skill),
        eta: pick(SlackKind::Limit),
        qdot,
        slack,
        multipliers,
        iterations,
        kkt: KktResiduals::default(),
    };
    if status == QpStatus::Optimal {
        solution.kkt = verify_kkt(problem, &solution);
    }
    solution
}

/// Recomputes the KKT conditions of `problem` at `solution` from the problem
/// data: primal feasibility, stationarity of the Lagrangian, dual
/// non-negativity and complementary slackness (maxima, absolute).
pub fn verify_kkt(problem: &QpProblem, solution: &QpSolution) -> KktResiduals {
    let n = problem.n_vel + problem.slacks.len();
    let mut z = solution.qdot.clone();
    z.extend_from_slice(&solution.slack);
    let mut grad: Vec<f64> = (0..n)
        .map(|j| {
            let w = if j < problem.n_vel { 1.0 } else { problem.weight(j - problem.n_vel) };
            2.0 * w * z[j]
        })
        .collect();
    let mut res = KktResiduals::default();
    for c in problem.constraints() {
        let lam = match c.origin {
            Origin::Row(r) => solution.multipliers.rows[r],
            Origin::Lower(j) => solution.multipliers.lower[j],
            Origin::Upper(j) => solution.multipliers.upper[j],
        };
        let s = dot(&c.normal, &z) - c.rhs;
        res.primal = res.primal.max(-s);
        res.dual = res.dual.max(-lam);
        res.complementarity = res.complementarity.max((lam * s).abs());
        for (gj, nj) in grad.iter_mut().zip(&c.normal) {
            *gj -= lam * nj;
        }
    }
    // zero-weight slacks carry no curvature; their stationarity is the sum
    // of multipliers on their rows, which is zero when they are not bound
    res.stationarity = grad.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    res
}

impl QpSolution {
    /// Checks every row at `tol`.
    pub fn satisfies(&self, problem: &QpProblem, tol: f64) -> bool {
        problem.rows.iter().all(|r| {
            let s = r.slack.map_or(0.0, |k| self.slack[k]);
            dot(&r.a, &self.qdot) + s >= r.b - tol
        })
    }
}

/// Dense helper used by the controller when assembling rows.
pub fn row_from(a: &DVector<f64>, b: f64, slack: Option<usize>) -> QpRow {
    QpRow { a: a.iter().copied().collect(), b, slack }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard(a: &[f64], b: f64) -> QpRow {
        QpRow { a: a.to_vec(), b, slack: None }
    }

    #[test]
    fn unconstrained_minimum_is_zero() {
        let p = QpProblem::new(3);
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.qdot, vec![0.0; 3]);
        assert_eq!(s.objective, 0.0);
        assert_eq!(s.kkt.max(), 0.0);
    }

    #[test]
    fn half_space_projection() {
        let mut p = QpProblem::new(2);
        p.rows.push(hard(&[1.0, 0.0], 1.0));
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.qdot[0] - 1.0).abs() < 1e-12 && s.qdot[1].abs() < 1e-12);
        assert!((s.objective - 1.0).abs() < 1e-12);
        assert!((s.multipliers.rows[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_polyhedron_is_infeasible() {
        let mut p = QpProblem::new(2);
        p.rows.push(hard(&[1.0, 0.0], 1.0));
        p.rows.push(hard(&[-1.0, 0.0], 0.0));
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn slack_row_closed_form() {
        // min q² + 100 δ²  s.t. q + δ ≥ 1  →  q = 100/101, δ = 1/101
        let mut p = QpProblem::new(1);
        let k = p.add_slack(SlackKind::Skill, Bound::FREE);
        p.rows.push(QpRow { a: vec![1.0], b: 1.0, slack: Some(k) });
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.qdot[0] - 100.0 / 101.0).abs() < 1e-12);
        assert!((s.delta[0] - 1.0 / 101.0).abs() < 1e-12);
        assert!(s.eta.is_empty());
    }

    #[test]
    fn slack_closed_form_matches_grid_search() {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=20000 {
            let q = i as f64 * 1e-4 - 0.5;
            let d = (1.0 - q).max(0.0);
            let f = q * q + 100.0 * d * d;
            if f < best.0 {
                best = (f, q);
            }
        }
        assert!((best.1 - 100.0 / 101.0).abs() < 1e-4);
    }

    #[test]
    fn box_bounds_clip_solution() {
        let mut p = QpProblem::new(2);
        p.rows.push(hard(&[1.0, 1.0], 3.0));
        p.vel_bounds = vec![Bound::symmetric(1.0), Bound::symmetric(5.0)];
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.qdot[0] - 1.0).abs() < 1e-12);
        assert!((s.qdot[1] - 2.0).abs() < 1e-12);
        assert!(s.kkt.max() < 1e-10);
    }

    #[test]
    fn box_conflict_is_infeasible() {
        let mut p = QpProblem::new(1);
        p.rows.push(hard(&[1.0], 2.0));
        p.vel_bounds = vec![Bound::symmetric(1.0)];
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn capped_slack() {
        // q + η ≥ 2, η ≤ 0.5, weight tiny → η at cap, q = 1.5
        let mut p = QpProblem::new(1);
        p.weights.limit = 1e-6;
        let k = p.add_slack(SlackKind::Limit, Bound { lo: 0.0, hi: 0.5 });
        p.rows.push(QpRow { a: vec![1.0], b: 2.0, slack: Some(k) });
        let s = solve(&p);
        assert!((s.eta[0] - 0.5).abs() < 1e-9);
        assert!((s.qdot[0] - 1.5).abs() < 1e-9);
        assert!(s.kkt.max() < 1e-9);
    }

    #[test]
    fn zero_weight_slack_is_free() {
        let mut p = QpProblem::new(1);
        p.weights.skill = 0.0;
        let k = p.add_slack(SlackKind::Skill, Bound::FREE);
        p.rows.push(QpRow { a: vec![1.0], b: 1.0, slack: Some(k) });
        let s = solve(&p);
        assert_eq!(s.qdot[0], 0.0);
        assert_eq!(s.delta[0], 1.0);
        assert!(s.satisfies(&p, 1e-12));
        assert!(s.kkt.max() < 1e-12);
    }

    #[test]
    fn degenerate_duplicate_rows() {
        let mut p = QpProblem::new(2);
        p.rows.push(hard(&[1.0, 1.0], 1.0));
        p.rows.push(hard(&[2.0, 2.0], 2.0));
        p.rows.push(hard(&[1.0, 0.0], 0.2));
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.qdot[0] - 0.5).abs() < 1e-12 && (s.qdot[1] - 0.5).abs() < 1e-12);
        assert!(s.kkt.max() < 1e-10);
    }

    #[test]
    fn kkt_detects_perturbation() {
        let mut p = QpProblem::new(2);
        p.rows.push(hard(&[1.0, 0.0], 1.0));
        let mut s = solve(&p);
        assert!(verify_kkt(&p, &s).max() < 1e-12);
        s.qdot[0] += 1e-2;
        let r = verify_kkt(&p, &s);
        assert!(r.stationarity > 1e-3 || r.primal > 1e-3);
        s.qdot[0] -= 2e-2;
        assert!(verify_kkt(&p, &s).primal > 1e-3);
    }

    #[test]
    fn max_iterations_reported() {
        let mut p = QpProblem::new(3);
        p.rows.push(hard(&[1.0, 0.0, 0.0], 1.0));
        p.rows.push(hard(&[0.0, 1.0, 0.0], 1.0));
        p.rows.push(hard(&[0.0, 0.0, 1.0], 1.0));
        assert_eq!(solve_with(&p, 1).status, QpStatus::MaxIterations);
        assert_eq!(solve_with(&p, 10).status, QpStatus::Optimal);
    }
}
