//! Dense linear-programming core behind a small backend interface.
//!
//! The built-in solver is a two-phase primal simplex on the full tableau
//! with bounded variables: nonbasic variables rest at either bound and may
//! flip bounds without a basis change. Entering variables are picked by the
//! most-violating reduced cost with lowest-index tie-breaks; after a run of
//! degenerate pivots the rule switches to Bland's (lowest index) which
//! guarantees termination. All choices are deterministic.

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LpError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("simplex did not terminate within the pivot budget")]
    Stalled,
    #[error("malformed problem: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

/// minimize c.x subject to rows (a.x cmp b) and bounds lo <= x <= hi.
#[derive(Clone, Debug, Default)]
pub struct LpProblem {
    pub costs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<LpRow>,
}

#[derive(Clone, Debug)]
pub struct LpRow {
    /// Sparse (variable, coefficient) terms.
    pub terms: Vec<(usize, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

impl LpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.costs.len()
    }

    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.costs.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.costs.len() - 1
    }

    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        self.rows.push(LpRow { terms, cmp, rhs });
    }
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

pub trait LpBackend {
    fn solve(&self, problem: &LpProblem) -> Result<LpSolution, LpError>;
}

/// Full-tableau bounded-variable simplex.
#[derive(Clone, Copy, Debug)]
pub struct DenseSimplex {
    pub rc_tol: f64,
    pub feas_tol: f64,
    pub max_pivots: usize,
    /// Degenerate pivots tolerated before switching to Bland's rule.
    pub stall_threshold: usize,
}

impl Default for DenseSimplex {
    fn default() -> Self {
        DenseSimplex {
            rc_tol: 1e-9,
            feas_tol: 1e-7,
            max_pivots: 20_000,
            stall_threshold: 40,
        }
    }
}

impl LpBackend for DenseSimplex {
    fn solve(&self, problem: &LpProblem) -> Result<LpSolution, LpError> {
        Tableau::build(problem, self)?.solve()
    }
}

struct Tableau<'a> {
    cfg: &'a DenseSimplex,
    problem: &'a LpProblem,
    m: usize,
    n: usize,
    n_structural: usize,
    first_artificial: usize,
    /// Row-major m x n coefficient matrix, basis columns kept identity.
    a: Vec<f64>,
    /// Current values of the basic variables.
    b: Vec<f64>,
    /// Variable basic in each row.
    basis: Vec<usize>,
    /// Nonbasic-at-upper flags.
    at_upper: Vec<bool>,
    /// Upper bounds of the shifted variables (lower bounds are zero).
    ub: Vec<f64>,
    /// Reduced-cost row.
    obj: Vec<f64>,
    bland: bool,
    stall: usize,
}

impl<'a> Tableau<'a> {
    fn build(problem: &'a LpProblem, cfg: &'a DenseSimplex) -> Result<Self, LpError> {
        let nv = problem.n_vars();
        for j in 0..nv {
            if !problem.lower[j].is_finite() {
                return Err(LpError::Malformed("lower bounds must be finite"));
            }
            if problem.upper[j] < problem.lower[j] {
                return Err(LpError::Infeasible);
            }
        }
        let m = problem.rows.len();

        // Shifted RHS: b' = b - A.lo, one pass over the sparse rows.
        let mut rhs: Vec<f64> = Vec::with_capacity(m);
        for row in &problem.rows {
            let shift: f64 = row
                .terms
                .iter()
                .map(|&(j, a)| a * problem.lower[j])
                .sum();
            rhs.push(row.rhs - shift);
        }

        // Count slacks and artificials to size the tableau.
        let mut n_slack = 0;
        let mut n_artificial = 0;
        for (i, row) in problem.rows.iter().enumerate() {
            match row.cmp {
                Cmp::Le => {
                    n_slack += 1;
                    if rhs[i] < 0.0 {
                        n_artificial += 1;
                    }
                }
                Cmp::Ge => {
                    n_slack += 1;
                    if rhs[i] >= 0.0 {
                        n_artificial += 1;
                    }
                }
                Cmp::Eq => n_artificial += 1,
            }
        }
        let n_structural = nv + n_slack;
        let n = n_structural + n_artificial;
        let mut tab = Tableau {
            cfg,
            problem,
            m,
            n,
            n_structural,
            first_artificial: n_structural,
            a: vec![0.0; m * n],
            b: vec![0.0; m],
            basis: vec![usize::MAX; m],
            at_upper: vec![false; n],
            ub: vec![f64::INFINITY; n],
            obj: vec![0.0; n],
            bland: false,
            stall: 0,
        };
        for j in 0..nv {
            tab.ub[j] = problem.upper[j] - problem.lower[j];
        }

        let mut slack = nv;
        let mut artificial = n_structural;
        for (i, row) in problem.rows.iter().enumerate() {
            let flip = rhs[i] < 0.0;
            let sign = if flip { -1.0 } else { 1.0 };
            for &(j, coef) in &row.terms {
                tab.a[i * n + j] += sign * coef;
            }
            tab.b[i] = rhs[i].abs();
            let needs_artificial = match row.cmp {
                Cmp::Le => {
                    // slack coefficient +1 normally, -1 after a flip
                    tab.a[i * n + slack] = sign;
                    slack += 1;
                    flip
                }
                Cmp::Ge => {
                    tab.a[i * n + slack] = -sign;
                    slack += 1;
                    !flip
                }
                Cmp::Eq => true,
            };
            if needs_artificial {
                tab.a[i * n + artificial] = 1.0;
                tab.basis[i] = artificial;
                artificial += 1;
            } else {
                // The slack we just added carries +1 and can start basic.
                tab.basis[i] = slack - 1;
            }
        }
        Ok(tab)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    fn solve(mut self) -> Result<LpSolution, LpError> {
        // Phase 1: drive the artificial variables to zero.
        if self.first_artificial < self.n {
            for j in self.first_artificial..self.n {
                self.obj[j] = 1.0;
            }
            for i in 0..self.m {
                if self.basis[i] >= self.first_artificial {
                    for j in 0..self.n {
                        self.obj[j] -= self.at(i, j);
                    }
                }
            }
            self.iterate(self.first_artificial)?;
            let remaining: f64 = (0..self.m)
                .filter(|&i| self.basis[i] >= self.first_artificial)
                .map(|i| self.b[i])
                .sum();
            if remaining > self.cfg.feas_tol {
                return Err(LpError::Infeasible);
            }
            // Pivot zero-valued artificials out where a at-lower structural
            // column is available (degenerate pivot); lock the rest at zero.
            for i in 0..self.m {
                if self.basis[i] >= self.first_artificial {
                    if let Some(j) = (0..self.n_structural).find(|&j| {
                        self.at(i, j).abs() > 1e-6
                            && !self.at_upper[j]
                            && self.basis.iter().all(|&b| b != j)
                    }) {
                        let value = self.b[i] / self.at(i, j);
                        self.pivot(i, j, value);
                    }
                }
            }
            for j in self.first_artificial..self.n {
                self.ub[j] = 0.0;
            }
        }

        // Phase 2: original costs over the shifted variables.
        self.obj.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.problem.n_vars() {
            self.obj[j] = self.problem.costs[j];
        }
        for i in 0..self.m {
            let cb = self.obj[self.basis[i]];
            if cb != 0.0 {
                for j in 0..self.n {
                    self.obj[j] -= cb * self.at(i, j);
                }
            }
        }
        self.bland = false;
        self.stall = 0;
        self.iterate(self.n_structural)?;

        // Recover original-space values.
        let nv = self.problem.n_vars();
        let mut x = vec![0.0; nv];
        for j in 0..nv {
            x[j] = self.problem.lower[j] + if self.at_upper[j] { self.ub[j] } else { 0.0 };
        }
        for i in 0..self.m {
            let j = self.basis[i];
            if j < nv {
                x[j] = self.problem.lower[j] + self.b[i];
            }
        }
        let objective = x
            .iter()
            .zip(&self.problem.costs)
            .map(|(xi, ci)| xi * ci)
            .sum();
        Ok(LpSolution { x, objective })
    }

    /// Runs primal pivots until no reduced cost is improving.
    /// Columns >= `limit` are never allowed to enter.
    fn iterate(&mut self, limit: usize) -> Result<(), LpError> {
        for _ in 0..self.cfg.max_pivots {
            let entering = self.choose_entering(limit);
            let Some((j, dir)) = entering else {
                return Ok(());
            };
            let step = self.ratio_test(j, dir)?;
            match step {
                Step::BoundFlip => {
                    let delta = dir * self.ub[j];
                    for i in 0..self.m {
                        self.b[i] -= self.at(i, j) * delta;
                    }
                    self.at_upper[j] = !self.at_upper[j];
                    self.stall = 0;
                }
                Step::Pivot { row, t, leave_upper } => {
                    if t < 1e-12 {
                        self.stall += 1;
                        if self.stall > self.cfg.stall_threshold {
                            self.bland = true;
                        }
                    } else {
                        self.stall = 0;
                        self.bland = false;
                    }
                    let entering_value = if self.at_upper[j] {
                        self.ub[j] - t
                    } else {
                        t
                    };
                    let delta = dir * t;
                    for i in 0..self.m {
                        if i != row {
                            self.b[i] -= self.at(i, j) * delta;
                        }
                    }
                    let leaving = self.basis[row];
                    self.at_upper[leaving] = leave_upper;
                    self.at_upper[j] = false;
                    self.pivot(row, j, entering_value);
                }
            }
        }
        Err(LpError::Stalled)
    }

    fn choose_entering(&self, limit: usize) -> Option<(usize, f64)> {
        let tol = self.cfg.rc_tol;
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..limit {
            if self.basis.contains(&j) || self.ub[j] == 0.0 {
                continue;
            }
            let rc = self.obj[j];
            let (improving, dir) = if self.at_upper[j] {
                (rc > tol, -1.0)
            } else {
                (rc < -tol, 1.0)
            };
            if !improving {
                continue;
            }
            if self.bland {
                return Some((j, dir));
            }
            let score = rc.abs();
            match best {
                Some((_, _, s)) if s >= score => {}
                _ => best = Some((j, dir, score)),
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn ratio_test(&self, j: usize, dir: f64) -> Result<Step, LpError> {
        // Entering may travel to its own opposite bound.
        let mut t_best = self.ub[j];
        let mut choice: Option<(usize, bool)> = None;
        for i in 0..self.m {
            let rate = dir * self.at(i, j);
            if rate.abs() < 1e-11 {
                continue;
            }
            let basic = self.basis[i];
            let (t, leave_upper) = if rate > 0.0 {
                (self.b[i] / rate, false)
            } else {
                let headroom = self.ub[basic] - self.b[i];
                if !headroom.is_finite() {
                    continue;
                }
                (headroom / -rate, true)
            };
            let t = t.max(0.0);
            let better = match choice {
                None => t < t_best - 1e-12,
                Some((row, _)) => {
                    t < t_best - 1e-12
                        || (t < t_best + 1e-12 && self.basis[i] < self.basis[row])
                }
            };
            if better {
                t_best = t;
                choice = Some((i, leave_upper));
            }
        }
        match choice {
            Some((row, leave_upper)) => Ok(Step::Pivot {
                row,
                t: t_best,
                leave_upper,
            }),
            None => {
                if t_best.is_finite() {
                    Ok(Step::BoundFlip)
                } else {
                    Err(LpError::Unbounded)
                }
            }
        }
    }

    /// Gauss-Jordan pivot on (row, col); sets the new basic value directly.
    fn pivot(&mut self, row: usize, col: usize, value: f64) {
        let n = self.n;
        let pivot = self.a[row * n + col];
        debug_assert!(pivot.abs() > 1e-12);
        let inv = 1.0 / pivot;
        for jj in 0..n {
            self.a[row * n + jj] *= inv;
        }
        for i in 0..self.m {
            if i == row {
                continue;
            }
            let factor = self.a[i * n + col];
            if factor != 0.0 {
                for jj in 0..n {
                    self.a[i * n + jj] -= factor * self.a[row * n + jj];
                }
            }
        }
        let factor = self.obj[col];
        if factor != 0.0 {
            for jj in 0..n {
                self.obj[jj] -= factor * self.a[row * n + jj];
            }
        }
        self.basis[row] = col;
        self.b[row] = value;
    }
}

enum Step {
    BoundFlip,
    Pivot { row: usize, t: f64, leave_upper: bool },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(p: &LpProblem) -> Result<LpSolution, LpError> {
        DenseSimplex::default().solve(p)
    }

    #[test]
    fn simple_vertex_optimum() {
        let mut p = LpProblem::new();
        let x = p.add_var(-1.0, 0.0, 1.0);
        let y = p.add_var(-1.0, 0.0, 1.0);
        p.add_row(vec![(x, 1.0), (y, 1.0)], Cmp::Le, 1.0);
        let s = solve(&p).unwrap();
        assert!((s.objective + 1.0).abs() < 1e-9);
        assert!((s.x[x] + s.x[y] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bound_flip_without_constraint() {
        let mut p = LpProblem::new();
        let x = p.add_var(-2.0, 0.0, 3.0);
        p.add_row(vec![(x, 1.0)], Cmp::Le, 5.0);
        let s = solve(&p).unwrap();
        assert!((s.x[x] - 3.0).abs() < 1e-9);
        assert!((s.objective + 6.0).abs() < 1e-9);
    }

    #[test]
    fn ge_rows_need_phase_one() {
        let mut p = LpProblem::new();
        let x = p.add_var(1.0, 0.0, 1.5);
        let y = p.add_var(1.0, 0.0, 1.5);
        p.add_row(vec![(x, 1.0), (y, 1.0)], Cmp::Ge, 2.0);
        let s = solve(&p).unwrap();
        assert!((s.objective - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equality_row() {
        let mut p = LpProblem::new();
        let x = p.add_var(1.0, 0.0, 10.0);
        let y = p.add_var(0.0, 0.0, 0.3);
        p.add_row(vec![(x, 1.0), (y, 1.0)], Cmp::Eq, 1.0);
        let s = solve(&p).unwrap();
        assert!((s.x[x] - 0.7).abs() < 1e-9, "x = {}", s.x[x]);
        assert!((s.x[y] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn infeasible_detected() {
        let mut p = LpProblem::new();
        let x = p.add_var(1.0, 0.0, 1.0);
        p.add_row(vec![(x, 1.0)], Cmp::Ge, 2.0);
        assert_eq!(solve(&p).unwrap_err(), LpError::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let mut p = LpProblem::new();
        let x = p.add_var(-1.0, 0.0, f64::INFINITY);
        p.add_row(vec![(x, -1.0)], Cmp::Le, 0.0);
        assert_eq!(solve(&p).unwrap_err(), LpError::Unbounded);
    }

    #[test]
    fn shifted_lower_bounds() {
        let mut p = LpProblem::new();
        let x = p.add_var(1.0, -2.0, 2.0);
        p.add_row(vec![(x, 1.0)], Cmp::Ge, -1.0);
        let s = solve(&p).unwrap();
        assert!((s.x[x] + 1.0).abs() < 1e-9, "x = {}", s.x[x]);
    }

    #[test]
    fn negative_rhs_le_row() {
        // x <= -1 with x in [-3, 0]: feasible, optimum at the cheapest end.
        let mut p = LpProblem::new();
        let x = p.add_var(1.0, -3.0, 0.0);
        p.add_row(vec![(x, 1.0)], Cmp::Le, -1.0);
        let s = solve(&p).unwrap();
        assert!((s.x[x] + 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_cycling_guard() {
        // Beale's classic cycling example; must terminate at -1/20.
        let mut p = LpProblem::new();
        let x1 = p.add_var(-0.75, 0.0, f64::INFINITY);
        let x2 = p.add_var(150.0, 0.0, f64::INFINITY);
        let x3 = p.add_var(-0.02, 0.0, f64::INFINITY);
        let x4 = p.add_var(6.0, 0.0, f64::INFINITY);
        p.add_row(
            vec![(x1, 0.25), (x2, -60.0), (x3, -0.04), (x4, 9.0)],
            Cmp::Le,
            0.0,
        );
        p.add_row(
            vec![(x1, 0.5), (x2, -90.0), (x3, -0.02), (x4, 3.0)],
            Cmp::Le,
            0.0,
        );
        p.add_row(vec![(x3, 1.0)], Cmp::Le, 1.0);
        let s = solve(&p).unwrap();
        assert!((s.objective + 0.05).abs() < 1e-9, "obj = {}", s.objective);
    }

    #[test]
    fn mixed_bounds_and_rows() {
        // Transportation-flavored check with a known optimum.
        let mut p = LpProblem::new();
        let a = p.add_var(2.0, 0.0, 4.0);
        let b = p.add_var(3.0, 0.0, 4.0);
        let c = p.add_var(1.0, 0.0, 2.0);
        p.add_row(vec![(a, 1.0), (b, 1.0), (c, 1.0)], Cmp::Ge, 5.0);
        p.add_row(vec![(a, 1.0), (c, -1.0)], Cmp::Le, 2.0);
        // Optimum: c = 2 (cheapest), then a = 3, b = 0: cost 2+6 = 8.
        let s = solve(&p).unwrap();
        assert!((s.objective - 8.0).abs() < 1e-9, "obj = {}", s.objective);
        assert!((s.x[c] - 2.0).abs() < 1e-9);
        assert!((s.x[a] - 3.0).abs() < 1e-9);
    }
}
