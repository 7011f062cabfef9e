//! One-step greedy expert and the behavior-cloning loss.
//!
//! The expert maximizes `u . w - c * sum_{i>=1} |w_i - w_prev_i|` over the
//! simplex. Splitting each risky move into buy and sell parts turns it into a
//! small equality-form LP that is solved exactly by a dense two-phase simplex
//! with Bland's rule.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const PIVOT_TOL: f64 = 1e-12;
const FEAS_TOL: f64 = 1e-9;
/// Reduced costs above this mark a column as off the optimal face.
const FACE_TOL: f64 = 1e-10;
const MAX_PIVOTS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal {
        x: Vec<f64>,
        objective: f64,
        /// Reduced costs at the optimal basis; every optimal point has
        /// `x_j = 0` wherever this is positive.
        reduced: Vec<f64>,
    },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// `rows[i]` holds constraint coefficients followed by the right-hand side.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.ncols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[r] = c;
    }

    fn reduced_cost(&self, cost: &[f64], j: usize) -> f64 {
        cost[j]
            - self
                .basis
                .iter()
                .enumerate()
                .map(|(i, &b)| cost[b] * self.rows[i][j])
                .sum::<f64>()
    }

    /// Minimizes `cost . x` over columns with `allowed[j]` using Bland's rule.
    /// Returns false when unbounded.
    fn minimize(&mut self, cost: &[f64], allowed: &[bool]) -> Result<bool> {
        for _ in 0..MAX_PIVOTS {
            let entering = (0..self.ncols).find(|&j| {
                allowed[j] && !self.basis.contains(&j) && self.reduced_cost(cost, j) < -PIVOT_TOL
            });
            let Some(col) = entering else {
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][col];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((k, best)) => {
                            if ratio < best - PIVOT_TOL
                                || (ratio <= best + PIVOT_TOL && self.basis[i] < self.basis[k])
                            {
                                Some((i, ratio))
                            } else {
                                Some((k, best))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, col),
                None => return Ok(false),
            }
        }
        Err(CoreError::Infeasible("simplex pivot limit reached".into()))
    }
}

/// Minimizes `c . x` subject to `A x = b`, `x >= 0`.
pub fn solve_lp(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpOutcome> {
    solve_lp_restricted(c, a, b, &vec![false; c.len()])
}

/// As [`solve_lp`] with the columns flagged in `fixed_zero` held at zero.
pub fn solve_lp_restricted(
    c: &[f64],
    a: &[Vec<f64>],
    b: &[f64],
    fixed_zero: &[bool],
) -> Result<LpOutcome> {
    let n = c.len();
    let m = a.len();
    if b.len() != m || fixed_zero.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(CoreError::Invalid("LP dimensions disagree".into()));
    }
    // Phase 1 with one artificial per row.
    let ncols = n + m;
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; ncols + 1];
        for j in 0..n {
            row[j] = sign * a[i][j];
        }
        row[n + i] = 1.0;
        row[ncols] = sign * b[i];
        rows.push(row);
    }
    let mut t = Tableau {
        rows,
        basis: (n..n + m).collect(),
        ncols,
    };
    let mut allowed: Vec<bool> = fixed_zero.iter().map(|f| !f).collect();
    allowed.resize(ncols, true);
    let mut phase1 = vec![0.0; ncols];
    for v in &mut phase1[n..] {
        *v = 1.0;
    }
    t.minimize(&phase1, &allowed)?;
    let infeas: f64 = (0..t.rows.len())
        .filter(|&i| t.basis[i] >= n)
        .map(|i| t.rhs(i))
        .sum();
    if infeas > FEAS_TOL {
        return Ok(LpOutcome::Infeasible);
    }
    // Drive remaining artificials out of the basis; drop redundant rows.
    let mut i = 0;
    while i < t.rows.len() {
        if t.basis[i] >= n {
            match (0..n).find(|&j| allowed[j] && t.rows[i][j].abs() > 1e-9) {
                Some(j) => t.pivot(i, j),
                None => {
                    t.rows.remove(i);
                    t.basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }
    for v in &mut allowed[n..] {
        *v = false;
    }
    let mut cost = c.to_vec();
    cost.resize(ncols, 0.0);
    if !t.minimize(&cost, &allowed)? {
        return Ok(LpOutcome::Unbounded);
    }
    let mut x = vec![0.0; n];
    for (i, &bv) in t.basis.iter().enumerate() {
        if bv < n {
            x[bv] = t.rhs(i).max(0.0);
        }
    }
    let objective = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    let reduced = (0..n)
        .map(|j| if t.basis.contains(&j) { 0.0 } else { t.reduced_cost(&cost, j) })
        .collect();
    Ok(LpOutcome::Optimal {
        x,
        objective,
        reduced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyProblem {
    /// Price relatives, `u[0] = 1` for cash.
    pub u: Vec<f64>,
    pub w_prev: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAction {
    pub w_star: Vec<f64>,
    pub objective_value: f64,
}

impl GreedyProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.u.len();
        if n < 2 || self.w_prev.len() != n {
            return Err(CoreError::Invalid(format!(
                "u has {n} entries, w_prev has {}",
                self.w_prev.len()
            )));
        }
        if self.u.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(CoreError::Invalid("price relatives must be positive".into()));
        }
        if self.w_prev.iter().any(|v| *v < -FEAS_TOL || !v.is_finite())
            || (self.w_prev.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CoreError::Invalid("w_prev is not on the simplex".into()));
        }
        if !(self.cost >= 0.0) {
            return Err(CoreError::Invalid("cost rate must be non-negative".into()));
        }
        Ok(())
    }

    /// `u . w - c * sum_{i>=1} |w_i - w_prev_i|`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let gain: f64 = self.u.iter().zip(w).map(|(a, b)| a * b).sum();
        let turnover: f64 = w.iter().zip(&self.w_prev).skip(1).map(|(a, b)| (a - b).abs()).sum();
        gain - self.cost * turnover
    }
}

/// Global maximizer of the greedy objective. Among optimal points the one
/// with least turnover is chosen, then the lexicographically smallest `w`.
pub fn solve_greedy(p: &GreedyProblem) -> Result<ExpertAction> {
    p.validate()?;
    let n1 = p.u.len();
    let m = n1 - 1;
    // Variables: w_0..w_m, b_1..b_m, s_1..s_m.
    let nv = n1 + 2 * m;
    let mut a = Vec::with_capacity(m + 1);
    let mut b = Vec::with_capacity(m + 1);
    let mut row = vec![0.0; nv];
    row[..n1].fill(1.0);
    a.push(row);
    b.push(1.0);
    for i in 1..=m {
        let mut row = vec![0.0; nv];
        row[i] = 1.0;
        row[n1 + i - 1] = -1.0;
        row[n1 + m + i - 1] = 1.0;
        a.push(row);
        b.push(p.w_prev[i].max(0.0));
    }
    let mut gain = vec![0.0; nv];
    gain[..n1].copy_from_slice(&p.u);
    for g in &mut gain[n1..nv] {
        *g = -p.cost;
    }
    let turnover: Vec<f64> = (0..nv).map(|j| if j >= n1 { 1.0 } else { 0.0 }).collect();

    // Stage objectives: max gain, min turnover, then min w_0, w_1, ...
    let mut stages: Vec<Vec<f64>> = vec![gain.iter().map(|v| -v).collect(), turnover];
    for k in 0..n1 {
        let mut e = vec![0.0; nv];
        e[k] = 1.0;
        stages.push(e);
    }

    // Each stage optimizes over the previous stage's optimal face, which is
    // exactly the set of feasible points vanishing on columns with positive
    // reduced cost.
    let mut fixed = vec![false; nv];
    let mut x = Vec::new();
    for (s, cost) in stages.iter().enumerate() {
        match solve_lp_restricted(cost, &a, &b, &fixed)? {
            LpOutcome::Optimal { x: sol, reduced, .. } => {
                for (f, d) in fixed.iter_mut().zip(&reduced) {
                    *f |= *d > FACE_TOL;
                }
                x = sol;
            }
            LpOutcome::Infeasible => {
                return Err(CoreError::Infeasible(format!("greedy stage {s} infeasible")))
            }
            LpOutcome::Unbounded => {
                return Err(CoreError::Infeasible(format!("greedy stage {s} unbounded")))
            }
        }
    }
    let mut w: Vec<f64> = x[..n1].iter().map(|v| v.max(0.0)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(ExpertAction {
        objective_value: p.objective(&w),
        w_star: w,
    })
}

/// `-1/(N(m+1)) sum_ij [e_ij ln a_ij + (1 - e_ij) ln(1 - a_ij)]` with the
/// actor actions clamped, plus its gradient with respect to the actions.
pub fn clone_loss(actor: &[Vec<f64>], expert: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if actor.len() != expert.len() || actor.is_empty() {
        return Err(CoreError::Invalid("clone_loss batch sizes differ".into()));
    }
    let width = actor[0].len();
    if actor.iter().chain(expert).any(|r| r.len() != width) {
        return Err(CoreError::Invalid("clone_loss row widths differ".into()));
    }
    let a: Vec<f64> = actor.concat();
    let e: Vec<f64> = expert.concat();
    let (loss, grad) = folio_nn::losses::binary_log_loss(&a, &e)?;
    Ok((loss, grad.chunks(width).map(<[f64]>::to_vec).collect()))
}
