//! Dense bounded-variable simplex solver.
//!
//! Solves `min c·x` subject to linear constraints and per-variable bounds via
//! a two-phase full-tableau simplex. Entering and leaving variables are
//! chosen by Bland's rule (smallest index), which prevents cycling and makes
//! every solve deterministic. Problem sizes here are tiny (tens of variables,
//! at most a few hundred rows), so the dense tableau is the right trade.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    /// Coefficients of the minimized objective, one per structural variable.
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// `(lower, upper)` per structural variable; infinities allowed on one
    /// side. Fully free variables are not supported.
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum VarStatus {
    Basic(usize),
    AtLower,
    AtUpper,
}

const EPS: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

struct Tableau {
    /// rows × n_vars, equals B^-1 A
    t: Vec<Vec<f64>>,
    /// current basic values, one per row
    xb: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<VarStatus>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    n_vars: usize,
}

impl Tableau {
    fn value(&self, j: usize) -> f64 {
        match self.status[j] {
            VarStatus::Basic(r) => self.xb[r],
            VarStatus::AtLower => self.lower[j],
            VarStatus::AtUpper => self.upper[j],
        }
    }

    /// Runs the simplex for the given cost vector. Returns `false` when the
    /// problem is unbounded in that cost.
    fn optimize(&mut self, cost: &[f64]) -> Result<bool> {
        let m = self.t.len();
        let max_iter = 10_000 + 200 * (m + self.n_vars);
        for _ in 0..max_iter {
            // reduced costs d_j = c_j - c_B . T[:, j]
            let mut cb = vec![0.0; m];
            for (r, &b) in self.basis.iter().enumerate() {
                cb[r] = cost[b];
            }
            // Bland: smallest-index eligible entering variable
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.n_vars {
                if matches!(self.status[j], VarStatus::Basic(_)) {
                    continue;
                }
                if self.upper[j] - self.lower[j] <= EPS {
                    continue; // fixed variables never enter
                }
                let mut d = cost[j];
                for r in 0..m {
                    if cb[r] != 0.0 {
                        d -= cb[r] * self.t[r][j];
                    }
                }
                let dir = match self.status[j] {
                    VarStatus::AtLower if d < -EPS => 1.0,
                    VarStatus::AtUpper if d > EPS => -1.0,
                    _ => continue,
                };
                entering = Some((j, dir));
                break;
            }
            let Some((j, dir)) = entering else {
                return Ok(true); // optimal
            };

            // ratio test; Bland tie-break on the basic variable index
            let mut t_best = self.upper[j] - self.lower[j]; // bound flip step
            let mut leave: Option<(usize, bool)> = None; // (row, hit_lower)
            for r in 0..m {
                let coef = dir * self.t[r][j];
                let b = self.basis[r];
                let (limit, hit_lower) = if coef > EPS {
                    ((self.xb[r] - self.lower[b]) / coef, true)
                } else if coef < -EPS {
                    ((self.xb[r] - self.upper[b]) / coef, false)
                } else {
                    continue;
                };
                if !limit.is_finite() {
                    continue; // the blocking bound is infinite
                }
                let limit = limit.max(0.0);
                let wins = match leave {
                    None => limit <= t_best,
                    Some((prev_r, _)) => {
                        limit < t_best - EPS
                            || (limit <= t_best + EPS && b < self.basis[prev_r])
                    }
                };
                if wins {
                    t_best = t_best.min(limit);
                    leave = Some((r, hit_lower));
                }
            }

            if !t_best.is_finite() {
                return Ok(false); // unbounded direction
            }

            let step = dir * t_best;
            match leave {
                None => {
                    // bound flip: no basis change
                    for r in 0..m {
                        self.xb[r] -= step * self.t[r][j];
                    }
                    self.status[j] = match self.status[j] {
                        VarStatus::AtLower => VarStatus::AtUpper,
                        VarStatus::AtUpper => VarStatus::AtLower,
                        VarStatus::Basic(_) => unreachable!(),
                    };
                }
                Some((r, hit_lower)) => {
                    let enter_val = self.value(j) + step;
                    for i in 0..m {
                        if i != r {
                            self.xb[i] -= step * self.t[i][j];
                        }
                    }
                    let leaving = self.basis[r];
                    self.status[leaving] = if hit_lower {
                        VarStatus::AtLower
                    } else {
                        VarStatus::AtUpper
                    };
                    // Gauss-Jordan pivot on (r, j)
                    let pivot = self.t[r][j];
                    if pivot.abs() <= EPS {
                        return Err(Error::config("simplex pivot collapsed"));
                    }
                    let inv = 1.0 / pivot;
                    for v in self.t[r].iter_mut() {
                        *v *= inv;
                    }
                    let pivot_row = self.t[r].clone();
                    for (i, row) in self.t.iter_mut().enumerate() {
                        if i == r {
                            continue;
                        }
                        let factor = row[j];
                        if factor != 0.0 {
                            for (v, &p) in row.iter_mut().zip(&pivot_row) {
                                *v -= factor * p;
                            }
                        }
                    }
                    self.basis[r] = j;
                    self.status[j] = VarStatus::Basic(r);
                    self.xb[r] = enter_val;
                }
            }
        }
        Err(Error::config("simplex iteration limit exceeded"))
    }
}

/// Solves the program. Structural variables must each have at least one
/// finite bound.
pub fn solve(lp: &LinearProgram) -> Result<LpOutcome> {
    let n = lp.objective.len();
    if lp.bounds.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: lp.bounds.len(),
        });
    }
    for (j, &(l, u)) in lp.bounds.iter().enumerate() {
        if l > u {
            return Err(Error::config(format!("variable {j} has lower > upper")));
        }
        if !l.is_finite() && !u.is_finite() {
            return Err(Error::config(format!("variable {j} is fully free")));
        }
    }
    for (i, c) in lp.constraints.iter().enumerate() {
        if c.coeffs.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: c.coeffs.len(),
            });
        }
        if !c.rhs.is_finite() {
            return Err(Error::config(format!("constraint {i} has non-finite rhs")));
        }
    }

    let m = lp.constraints.len();
    let n_total = n + m + m; // structural + slack + artificial
    let mut lower = Vec::with_capacity(n_total);
    let mut upper = Vec::with_capacity(n_total);
    for &(l, u) in &lp.bounds {
        lower.push(l);
        upper.push(u);
    }
    for c in &lp.constraints {
        // a.x + s = rhs
        let (l, u) = match c.relation {
            Relation::Le => (0.0, f64::INFINITY),
            Relation::Eq => (0.0, 0.0),
            Relation::Ge => (f64::NEG_INFINITY, 0.0),
        };
        lower.push(l);
        upper.push(u);
    }
    for _ in 0..m {
        lower.push(0.0);
        upper.push(f64::INFINITY);
    }

    // nonbasic start: structural at the finite bound closest to zero,
    // slacks at zero
    let mut status = Vec::with_capacity(n_total);
    for j in 0..n + m {
        let at_lower = if lower[j].is_finite() && upper[j].is_finite() {
            lower[j].abs() <= upper[j].abs()
        } else {
            lower[j].is_finite()
        };
        status.push(if at_lower {
            VarStatus::AtLower
        } else {
            VarStatus::AtUpper
        });
    }

    let start_values: Vec<f64> = (0..n + m)
        .map(|j| match status[j] {
            VarStatus::AtLower => lower[j],
            VarStatus::AtUpper => upper[j],
            VarStatus::Basic(_) => unreachable!(),
        })
        .collect();

    // residuals determine artificial signs; basis starts as the artificials
    let mut t = vec![vec![0.0; n_total]; m];
    let mut xb = vec![0.0; m];
    let mut basis = vec![0usize; m];
    for (i, c) in lp.constraints.iter().enumerate() {
        let mut r = c.rhs;
        for (j, &a) in c.coeffs.iter().enumerate() {
            r -= a * start_values[j];
        }
        r -= start_values[n + i]; // slack starts at 0 but keep the form exact
        let sigma = if r >= 0.0 { 1.0 } else { -1.0 };
        for (j, &a) in c.coeffs.iter().enumerate() {
            t[i][j] = sigma * a;
        }
        t[i][n + i] = sigma;
        t[i][n + m + i] = 1.0;
        xb[i] = r.abs();
        basis[i] = n + m + i;
        status.push(VarStatus::Basic(i));
    }

    let mut tab = Tableau {
        t,
        xb,
        basis,
        status,
        lower,
        upper,
        n_vars: n_total,
    };

    // phase 1: drive artificials to zero
    let mut phase1_cost = vec![0.0; n_total];
    for j in n + m..n_total {
        phase1_cost[j] = 1.0;
    }
    let bounded = tab.optimize(&phase1_cost)?;
    debug_assert!(bounded, "phase-1 objective is bounded below by zero");
    let infeas: f64 = (n + m..n_total).map(|j| tab.value(j)).sum();
    let scale = lp
        .constraints
        .iter()
        .map(|c| c.rhs.abs())
        .fold(1.0_f64, f64::max);
    if infeas > FEAS_TOL * scale {
        return Ok(LpOutcome::Infeasible);
    }
    // pin artificials so they can never re-enter or move
    for j in n + m..n_total {
        tab.lower[j] = 0.0;
        tab.upper[j] = 0.0;
        if let VarStatus::Basic(r) = tab.status[j] {
            tab.xb[r] = 0.0; // clear phase-1 round-off
        }
    }

    // phase 2: original objective
    let mut cost = vec![0.0; n_total];
    cost[..n].copy_from_slice(&lp.objective);
    if !tab.optimize(&cost)? {
        return Ok(LpOutcome::Unbounded);
    }

    let x: Vec<f64> = (0..n)
        .map(|j| {
            let v = tab.value(j);
            v.clamp(lp.bounds[j].0, lp.bounds[j].1)
        })
        .collect();
    let objective = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
    Ok(LpOutcome::Optimal { x, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn optimal(lp: &LinearProgram) -> (Vec<f64>, f64) {
        match solve(lp).unwrap() {
            LpOutcome::Optimal { x, objective } => (x, objective),
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn single_variable_balance() {
        // one generator serving a 60 MW load
        let lp = LinearProgram {
            objective: vec![1.0],
            constraints: vec![Constraint {
                coeffs: vec![1.0],
                relation: Relation::Eq,
                rhs: 60.0,
            }],
            bounds: vec![(0.0, 100.0)],
        };
        let (x, obj) = optimal(&lp);
        assert_relative_eq!(x[0], 60.0, epsilon = 1e-9);
        assert_relative_eq!(obj, 60.0, epsilon = 1e-9);
    }

    #[test]
    fn merit_order_dispatch() {
        // cheap unit takes its full 100, expensive unit covers the rest
        let lp = LinearProgram {
            objective: vec![1.0, 2.0],
            constraints: vec![Constraint {
                coeffs: vec![1.0, 1.0],
                relation: Relation::Eq,
                rhs: 120.0,
            }],
            bounds: vec![(0.0, 100.0), (0.0, 100.0)],
        };
        let (x, obj) = optimal(&lp);
        assert_relative_eq!(x[0], 100.0, epsilon = 1e-9);
        assert_relative_eq!(x[1], 20.0, epsilon = 1e-9);
        assert_relative_eq!(obj, 140.0, epsilon = 1e-9);
    }

    #[test]
    fn detects_infeasible_balance() {
        let lp = LinearProgram {
            objective: vec![1.0, 1.0],
            constraints: vec![Constraint {
                coeffs: vec![1.0, 1.0],
                relation: Relation::Eq,
                rhs: 120.0,
            }],
            bounds: vec![(0.0, 50.0), (0.0, 50.0)],
        };
        assert_eq!(solve(&lp).unwrap(), LpOutcome::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let lp = LinearProgram {
            objective: vec![-1.0],
            constraints: vec![],
            bounds: vec![(0.0, f64::INFINITY)],
        };
        assert_eq!(solve(&lp).unwrap(), LpOutcome::Unbounded);
    }

    #[test]
    fn pure_bound_flip_without_constraints() {
        let lp = LinearProgram {
            objective: vec![-1.0],
            constraints: vec![],
            bounds: vec![(0.0, 10.0)],
        };
        let (x, obj) = optimal(&lp);
        assert_relative_eq!(x[0], 10.0);
        assert_relative_eq!(obj, -10.0);
    }

    #[test]
    fn mixed_relations() {
        // min x + y  s.t.  x + y >= 4,  x - y <= 1,  0 <= x,y <= 5
        let lp = LinearProgram {
            objective: vec![1.0, 1.0],
            constraints: vec![
                Constraint {
                    coeffs: vec![1.0, 1.0],
                    relation: Relation::Ge,
                    rhs: 4.0,
                },
                Constraint {
                    coeffs: vec![1.0, -1.0],
                    relation: Relation::Le,
                    rhs: 1.0,
                },
            ],
            bounds: vec![(0.0, 5.0), (0.0, 5.0)],
        };
        let (x, obj) = optimal(&lp);
        assert_relative_eq!(obj, 4.0, epsilon = 1e-9);
        assert!(x[0] + x[1] >= 4.0 - 1e-9);
        assert!(x[0] - x[1] <= 1.0 + 1e-9);
    }

    #[test]
    fn redundant_rows_are_harmless() {
        let lp = LinearProgram {
            objective: vec![2.0, 3.0],
            constraints: vec![
                Constraint {
                    coeffs: vec![1.0, 1.0],
                    relation: Relation::Eq,
                    rhs: 10.0,
                },
                Constraint {
                    coeffs: vec![1.0, 1.0],
                    relation: Relation::Le,
                    rhs: 10.0,
                },
            ],
            bounds: vec![(0.0, 10.0), (0.0, 10.0)],
        };
        let (x, obj) = optimal(&lp);
        assert_relative_eq!(x[0], 10.0, epsilon = 1e-9);
        assert_relative_eq!(obj, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn negative_lower_bounds() {
        // min x subject to x >= -3 via bounds, x + y = 0, y in [0, 2]
        let lp = LinearProgram {
            objective: vec![1.0, 0.0],
            constraints: vec![Constraint {
                coeffs: vec![1.0, 1.0],
                relation: Relation::Eq,
                rhs: 0.0,
            }],
            bounds: vec![(-3.0, 3.0), (0.0, 2.0)],
        };
        let (x, _) = optimal(&lp);
        assert_relative_eq!(x[0], -2.0, epsilon = 1e-9);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn random_dispatch_lps_beat_sampled_feasible_points() {
        use crate::rng::Key;
        for trial in 0..50u64 {
            let key = Key::new(99, "lp-trial").with(trial);
            let n = 2 + key.with(0).pick(3); // 2..=4 vars
            let bounds: Vec<(f64, f64)> = (0..n)
                .map(|j| {
                    let lo = key.with(1).with(j as u64).unit() * 10.0;
                    (lo, lo + 5.0 + key.with(2).with(j as u64).unit() * 20.0)
                })
                .collect();
            let cost: Vec<f64> = (0..n)
                .map(|j| 0.5 + key.with(3).with(j as u64).unit() * 4.0)
                .collect();
            let cap: f64 = bounds.iter().map(|b| b.1).sum();
            let floor: f64 = bounds.iter().map(|b| b.0).sum();
            let demand = floor + (cap - floor) * (0.2 + 0.6 * key.with(4).unit());
            let lp = LinearProgram {
                objective: cost.clone(),
                constraints: vec![Constraint {
                    coeffs: vec![1.0; n],
                    relation: Relation::Eq,
                    rhs: demand,
                }],
                bounds: bounds.clone(),
            };
            let (x, obj) = optimal(&lp);
            assert_relative_eq!(x.iter().sum::<f64>(), demand, epsilon = 1e-6);
            // random feasible points must not beat the optimum
            for s in 0..200u64 {
                let k = key.with(5).with(s);
                let mut point: Vec<f64> = (0..n)
                    .map(|j| {
                        let (l, u) = bounds[j];
                        l + (u - l) * k.with(j as u64).unit()
                    })
                    .collect();
                // project onto the balance constraint by uniform shift, then
                // clamp; skip if clamping breaks the balance
                let shift = (demand - point.iter().sum::<f64>()) / n as f64;
                for (p, &(l, u)) in point.iter_mut().zip(&bounds) {
                    *p = (*p + shift).clamp(l, u);
                }
                if (point.iter().sum::<f64>() - demand).abs() > 1e-9 {
                    continue;
                }
                let val: f64 = point.iter().zip(&cost).map(|(a, b)| a * b).sum();
                assert!(val >= obj - 1e-6, "sampled point beats optimum");
            }
        }
    }
}
