//! Two-phase primal revised simplex over the surplus-augmented system
//! `σ(Ax − s) = σb`, with the basis inverse kept in product form.
//!
//! Pricing is Dantzig's rule with lowest-index tie-breaking; after a long
//! run of pivots without objective progress the solver switches to Bland's
//! rule for the rest of the phase.

use std::fmt::Debug;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::eta::EtaFile;
use super::{LpError, StandardFormLp};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub pivot_tol: f64,
    pub refactor_every: usize,
    pub max_iterations: usize,
    /// Record the phase-2 objective after every pivot.
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feasibility_tol: 1e-7,
            optimality_tol: 1e-8,
            pivot_tol: 1e-9,
            refactor_every: 100,
            max_iterations: 1_000_000,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Primal solution; empty unless `status == Optimal`.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Phase-2 objective after each pivot, when requested.
    pub phase2_trace: Vec<f64>,
    duals: Vec<f64>,
}

/// Per-row shadow prices `∂z*/∂bᵢ` of an optimal outcome.
pub fn dual_values<C, R>(outcome: &SolveOutcome, lp: &StandardFormLp<C, R>) -> Result<Vec<f64>, LpError> {
    if outcome.status != SolveStatus::Optimal {
        return Err(LpError::NotOptimal(outcome.status));
    }
    if outcome.duals.len() != lp.b.len() {
        return Err(LpError::Dimension(format!(
            "outcome carries {} duals but the LP has {} rows",
            outcome.duals.len(),
            lp.b.len()
        )));
    }
    Ok(outcome.duals.clone())
}

pub fn solve<C, R>(lp: &StandardFormLp<C, R>) -> Result<SolveOutcome, LpError>
where
    C: Clone + Eq + Hash + Debug,
    R: Clone + Eq + Hash + Debug,
{
    solve_with(lp, &SolverOptions::default())
}

pub fn solve_with<C, R>(lp: &StandardFormLp<C, R>, opts: &SolverOptions) -> Result<SolveOutcome, LpError>
where
    C: Clone + Eq + Hash + Debug,
    R: Clone + Eq + Hash + Debug,
{
    lp.check()?;
    let n_all = lp.n_vars();
    let m_all = lp.n_rows();

    // Presolve: drop empty rows and columns.
    let mut row_map = Vec::new();
    for i in 0..m_all {
        if lp.a.row(i).next().is_some() {
            row_map.push(i);
        } else if lp.b[i] > opts.feasibility_tol * (1.0 + lp.b[i].abs()) {
            return Ok(infeasible_or_unbounded(SolveStatus::Infeasible, 0));
        }
    }
    let all_cols = lp.a.columns();
    let mut col_map = Vec::new();
    for (j, col) in all_cols.iter().enumerate() {
        if !col.is_empty() {
            col_map.push(j);
        } else if lp.c[j] < 0.0 {
            return Ok(infeasible_or_unbounded(SolveStatus::Unbounded, 0));
        }
    }
    let mut row_inv = vec![NONE; m_all];
    for (k, &i) in row_map.iter().enumerate() {
        row_inv[i] = k;
    }

    let sigma: Vec<f64> = row_map.iter().map(|&i| if lp.b[i] < 0.0 { -1.0 } else { 1.0 }).collect();
    let rhs: Vec<f64> = row_map.iter().zip(&sigma).map(|(&i, s)| s * lp.b[i]).collect();
    let cols: Vec<Vec<(usize, f64)>> = col_map
        .iter()
        .map(|&j| all_cols[j].iter().map(|&(i, v)| (row_inv[i], sigma[row_inv[i]] * v)).collect())
        .collect();
    let cost: Vec<f64> = col_map.iter().map(|&j| lp.c[j]).collect();

    let mut work = Work::new(cols, cost, sigma, rhs, opts.clone());
    let status = work.run()?;

    let mut outcome = SolveOutcome {
        status,
        x: Vec::new(),
        objective: f64::NAN,
        iterations: work.iterations,
        phase2_trace: std::mem::take(&mut work.trace),
        duals: Vec::new(),
    };
    if status == SolveStatus::Optimal {
        let mut x = vec![0.0; n_all];
        for (k, &j) in col_map.iter().enumerate() {
            let p = work.pos[k];
            if p != NONE {
                x[j] = work.xb[p];
            }
        }
        let y = work.duals();
        let mut duals = vec![0.0; m_all];
        for (k, &i) in row_map.iter().enumerate() {
            duals[i] = work.sigma[k] * y[k];
        }
        outcome.objective = lp.objective_at(&x);
        outcome.x = x;
        outcome.duals = duals;
    }
    Ok(outcome)
}

fn infeasible_or_unbounded(status: SolveStatus, iterations: usize) -> SolveOutcome {
    SolveOutcome { status, x: Vec::new(), objective: f64::NAN, iterations, phase2_trace: Vec::new(), duals: Vec::new() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pricing {
    Dantzig,
    Bland,
}

/// Variables are numbered: structurals `0..n`, surplus `n..n+m`, artificials after.
struct Work {
    m: usize,
    n: usize,
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    sigma: Vec<f64>,
    rhs: Vec<f64>,
    art_row: Vec<usize>,
    head: Vec<usize>,
    pos: Vec<usize>,
    xb: Vec<f64>,
    etas: EtaFile,
    since_refactor: usize,
    iterations: usize,
    opts: SolverOptions,
    trace: Vec<f64>,
    // scratch
    marker: Vec<bool>,
    touched: Vec<usize>,
}

impl Work {
    fn new(cols: Vec<Vec<(usize, f64)>>, cost: Vec<f64>, sigma: Vec<f64>, rhs: Vec<f64>, opts: SolverOptions) -> Self {
        let m = rhs.len();
        let n = cols.len();
        let mut art_row = Vec::new();
        let mut head = vec![NONE; m];
        for i in 0..m {
            // Surplus coefficient is -σᵢ; it is a feasible starting basic unless
            // σᵢ = +1 with a strictly positive right-hand side.
            if sigma[i] < 0.0 || rhs[i] == 0.0 {
                head[i] = n + i;
            } else {
                head[i] = n + m + art_row.len();
                art_row.push(i);
            }
        }
        let total = n + m + art_row.len();
        let mut pos = vec![NONE; total];
        for (p, &v) in head.iter().enumerate() {
            pos[v] = p;
        }
        Work {
            m,
            n,
            cols,
            cost,
            sigma,
            rhs,
            art_row,
            head,
            pos,
            xb: vec![0.0; m],
            etas: EtaFile::default(),
            since_refactor: 0,
            iterations: 0,
            opts,
            trace: Vec::new(),
            marker: vec![false; m],
            touched: Vec::new(),
        }
    }

    fn is_artificial(&self, var: usize) -> bool {
        var >= self.n + self.m
    }

    /// Unit column of a surplus or artificial variable as (row, coefficient).
    fn unit(&self, var: usize) -> (usize, f64) {
        if var < self.n + self.m {
            let i = var - self.n;
            (i, -self.sigma[i])
        } else {
            (self.art_row[var - self.n - self.m], 1.0)
        }
    }

    fn phase_cost(&self, phase: Phase, var: usize) -> f64 {
        match phase {
            Phase::One => {
                if self.is_artificial(var) {
                    1.0
                } else {
                    0.0
                }
            }
            Phase::Two => {
                if var < self.n {
                    self.cost[var]
                } else {
                    0.0
                }
            }
        }
    }

    fn objective(&self, phase: Phase) -> f64 {
        self.head.iter().zip(&self.xb).map(|(&v, &x)| self.phase_cost(phase, v) * x).sum()
    }

    fn run(&mut self) -> Result<SolveStatus, LpError> {
        self.refactor()?;
        if !self.art_row.is_empty() {
            if let Some(status) = self.iterate(Phase::One)? {
                return Ok(status);
            }
            for p in 0..self.m {
                let v = self.head[p];
                if self.is_artificial(v) {
                    let i = self.art_row[v - self.n - self.m];
                    if self.xb[p] > self.opts.feasibility_tol * (1.0 + self.rhs[i]) {
                        return Ok(SolveStatus::Infeasible);
                    }
                }
            }
            self.drive_out_artificials()?;
        }
        if let Some(status) = self.iterate(Phase::Two)? {
            return Ok(status);
        }
        // Clean primal values from a fresh factorization.
        self.refactor()?;
        Ok(SolveStatus::Optimal)
    }

    /// Runs one phase to optimality. Returns `Some(Unbounded)` if the
    /// objective is unbounded, `None` on reaching the phase optimum.
    fn iterate(&mut self, phase: Phase) -> Result<Option<SolveStatus>, LpError> {
        let mut pricing = Pricing::Dantzig;
        let mut best_obj = self.objective(phase);
        let mut stall = 0usize;
        let stall_limit = 2 * (self.n + self.m);
        let mut y = vec![0.0; self.m];
        let mut alpha = vec![0.0; self.m];
        loop {
            if self.iterations >= self.opts.max_iterations {
                return Err(LpError::IterationLimit(self.opts.max_iterations));
            }
            // yᵀ = c_Bᵀ B⁻¹
            for p in 0..self.m {
                y[p] = self.phase_cost(phase, self.head[p]);
            }
            self.etas.btran(&mut y);

            let Some(entering) = self.price(phase, pricing, &y) else {
                return Ok(None);
            };

            self.load_column(entering, &mut alpha);
            self.etas.ftran(&mut alpha);

            let Some(leave) = self.ratio_test(&alpha, pricing) else {
                return match phase {
                    Phase::Two => Ok(Some(SolveStatus::Unbounded)),
                    // phase-1 objective is bounded below by zero
                    Phase::One => Err(LpError::SingularBasis),
                };
            };
            self.pivot(entering, leave, &mut alpha)?;

            let obj = self.objective(phase);
            if phase == Phase::Two && self.opts.record_trace {
                self.trace.push(obj);
            }
            if obj < best_obj - 1e-12 * (1.0 + best_obj.abs()) {
                best_obj = obj;
                stall = 0;
            } else {
                stall += 1;
                if stall > stall_limit && pricing == Pricing::Dantzig {
                    log::debug!("switching to Bland's rule after {stall} stalled pivots");
                    pricing = Pricing::Bland;
                }
            }
        }
    }

    fn price(&self, phase: Phase, pricing: Pricing, y: &[f64]) -> Option<usize> {
        let tol = self.opts.optimality_tol;
        let mut best: Option<(usize, f64)> = None;
        let n_price = self.n + self.m; // artificials never re-enter
        for j in 0..n_price {
            if self.pos[j] != NONE {
                continue;
            }
            let d = if j < self.n {
                let mut d = self.phase_cost(phase, j);
                for &(i, v) in &self.cols[j] {
                    d -= y[i] * v;
                }
                d
            } else {
                let (i, v) = self.unit(j);
                -y[i] * v
            };
            let threshold = -tol * (1.0 + self.phase_cost(phase, j).abs());
            if d < threshold {
                match pricing {
                    Pricing::Bland => return Some(j),
                    Pricing::Dantzig => {
                        if best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((j, d));
                        }
                    }
                }
            }
        }
        best.map(|(j, _)| j)
    }

    fn load_column(&self, var: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if var < self.n {
            for &(i, v) in &self.cols[var] {
                out[i] = v;
            }
        } else {
            let (i, v) = self.unit(var);
            out[i] = v;
        }
    }

    fn ratio_test(&self, alpha: &[f64], pricing: Pricing) -> Option<usize> {
        let ptol = self.opts.pivot_tol;
        let mut best: Option<(usize, f64, f64)> = None;
        for p in 0..self.m {
            let a = alpha[p];
            if a <= ptol {
                continue;
            }
            let r = self.xb[p].max(0.0) / a;
            let replace = match best {
                None => true,
                Some((bp, br, ba)) => {
                    let eps = 1e-12 * (1.0 + br.abs());
                    if r < br - eps {
                        true
                    } else if r <= br + eps {
                        match pricing {
                            Pricing::Bland => self.head[p] < self.head[bp],
                            Pricing::Dantzig => a > ba || (a == ba && self.head[p] < self.head[bp]),
                        }
                    } else {
                        false
                    }
                }
            };
            if replace {
                best = Some((p, r, a));
            }
        }
        best.map(|(p, _, _)| p)
    }

    fn pivot(&mut self, entering: usize, leave: usize, alpha: &mut [f64]) -> Result<(), LpError> {
        let theta = self.xb[leave].max(0.0) / alpha[leave];
        if theta != 0.0 {
            for p in 0..self.m {
                if alpha[p] != 0.0 {
                    self.xb[p] -= theta * alpha[p];
                }
            }
        }
        self.xb[leave] = theta;
        self.etas.push_from_column(alpha, leave);
        let out = self.head[leave];
        self.pos[out] = NONE;
        self.head[leave] = entering;
        self.pos[entering] = leave;
        self.iterations += 1;
        self.since_refactor += 1;
        if self.since_refactor >= self.opts.refactor_every {
            self.refactor()?;
        }
        Ok(())
    }

    /// Degenerate pivots that replace zero-valued basic artificials by
    /// structural or surplus columns. Artificials in redundant rows stay.
    fn drive_out_artificials(&mut self) -> Result<(), LpError> {
        let mut rho = vec![0.0; self.m];
        let mut alpha = vec![0.0; self.m];
        for p in 0..self.m {
            if !self.is_artificial(self.head[p]) {
                continue;
            }
            rho.iter_mut().for_each(|v| *v = 0.0);
            rho[p] = 1.0;
            self.etas.btran(&mut rho);
            let mut chosen = None;
            for j in 0..self.n + self.m {
                if self.pos[j] != NONE {
                    continue;
                }
                let a = if j < self.n {
                    self.cols[j].iter().map(|&(i, v)| rho[i] * v).sum::<f64>()
                } else {
                    let (i, v) = self.unit(j);
                    rho[i] * v
                };
                if a.abs() > 1e-7 {
                    chosen = Some(j);
                    break;
                }
            }
            if let Some(j) = chosen {
                self.load_column(j, &mut alpha);
                self.etas.ftran(&mut alpha);
                self.xb[p] = 0.0;
                self.pivot(j, p, &mut alpha)?;
            }
        }
        Ok(())
    }

    /// Rebuilds the eta file for the current basis and recomputes `x_B`.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        self.etas.clear();
        self.since_refactor = 0;
        let basics = self.head.clone();
        let mut new_head = vec![NONE; m];
        let mut assigned = vec![false; m];
        let mut structurals = Vec::new();
        for &var in &basics {
            if var < self.n {
                structurals.push(var);
            } else {
                let (i, v) = self.unit(var);
                if assigned[i] {
                    return Err(LpError::SingularBasis);
                }
                assigned[i] = true;
                new_head[i] = var;
                if v != 1.0 {
                    self.etas.push_from_sparse(&[(i, v)], i, v);
                }
            }
        }

        // Order structural columns by their count of entries in unassigned
        // rows, always taking column singletons first.
        let k = structurals.len();
        let mut count = vec![0usize; k];
        let mut row_members: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (s, &var) in structurals.iter().enumerate() {
            for &(i, _) in &self.cols[var] {
                if !assigned[i] {
                    count[s] += 1;
                    row_members[i].push(s);
                }
            }
        }
        let mut done = vec![false; k];
        let mut singles: Vec<usize> = (0..k).rev().filter(|&s| count[s] == 1).collect();
        let mut work = vec![0.0; m];
        for _ in 0..k {
            let s = loop {
                match singles.pop() {
                    Some(s) if !done[s] && count[s] == 1 => break Some(s),
                    Some(_) => continue,
                    None => break None,
                }
            };
            let s = match s {
                Some(s) => s,
                None => (0..k).filter(|&s| !done[s]).min_by_key(|&s| (count[s], s)).expect("column left"),
            };
            done[s] = true;
            let var = structurals[s];

            // Sparse FTRAN of the column.
            self.touched.clear();
            for &(i, v) in &self.cols[var] {
                work[i] = v;
                if !self.marker[i] {
                    self.marker[i] = true;
                    self.touched.push(i);
                }
            }
            self.etas.ftran_tracked(&mut work, &mut self.marker, &mut self.touched);

            let mut piv = NONE;
            let mut best = 0.0;
            let mut col_max = 0.0f64;
            for &i in &self.touched {
                col_max = col_max.max(work[i].abs());
            }
            for &i in &self.touched {
                let a = work[i].abs();
                if !assigned[i] && a > best {
                    best = a;
                    piv = i;
                }
            }
            if piv == NONE || best <= 1e-11 * col_max.max(1.0) {
                for &i in &self.touched {
                    work[i] = 0.0;
                    self.marker[i] = false;
                }
                return Err(LpError::SingularBasis);
            }
            let entries: Vec<(usize, f64)> = self.touched.iter().map(|&i| (i, work[i])).collect();
            let ap = work[piv];
            self.etas.push_from_sparse(&entries, piv, ap);
            for &i in &self.touched {
                work[i] = 0.0;
                self.marker[i] = false;
            }
            assigned[piv] = true;
            new_head[piv] = var;
            for &s2 in &row_members[piv] {
                if !done[s2] {
                    count[s2] -= 1;
                    if count[s2] == 1 {
                        singles.push(s2);
                    }
                }
            }
        }

        self.head = new_head;
        for p in 0..m {
            self.pos[self.head[p]] = p;
        }
        log::trace!("refactored {} basics into {} eta nonzeros", m, self.etas.nnz());
        let mut xb = self.rhs.clone();
        self.etas.ftran(&mut xb);
        self.xb = xb;
        Ok(())
    }

    fn duals(&self) -> Vec<f64> {
        let mut y: Vec<f64> = (0..self.m).map(|p| self.phase_cost(Phase::Two, self.head[p])).collect();
        self.etas.btran(&mut y);
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(c: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<f64>) -> StandardFormLp<usize, usize> {
        StandardFormLp::from_dense(c, &a, b).unwrap()
    }

    #[test]
    fn single_lower_bound() {
        let p = lp(vec![1.0], vec![vec![1.0]], vec![3.0]);
        let out = solve(&p).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!((out.x[0] - 3.0).abs() < 1e-12);
        assert!((out.objective - 3.0).abs() < 1e-12);
        let d = dual_values(&out, &p).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_descent() {
        let p = lp(vec![-1.0], vec![vec![1.0]], vec![0.0]);
        assert_eq!(solve(&p).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn unbounded_with_no_rows() {
        let p = StandardFormLp::from_dense(vec![-1.0], &[], vec![]).unwrap();
        assert_eq!(solve(&p).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn infeasible_system() {
        // x ≥ 2 and -x ≥ -1
        let p = lp(vec![1.0], vec![vec![1.0], vec![-1.0]], vec![2.0, -1.0]);
        assert_eq!(solve(&p).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn empty_row_with_positive_rhs_is_infeasible() {
        let p = lp(vec![1.0], vec![vec![0.0]], vec![1.0]);
        assert_eq!(solve(&p).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn nonbinding_row_has_zero_dual() {
        // min x + y, x ≥ 1, y ≥ 2, x + y ≥ 1 (slack)
        let p = lp(
            vec![1.0, 1.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 2.0, 1.0],
        );
        let out = solve(&p).unwrap();
        let d = dual_values(&out, &p).unwrap();
        assert!((out.objective - 3.0).abs() < 1e-12);
        assert!(d[2].abs() < 1e-12);
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_values_rejected_when_not_optimal() {
        let p = lp(vec![-1.0], vec![vec![1.0]], vec![0.0]);
        let out = solve(&p).unwrap();
        assert!(matches!(dual_values(&out, &p), Err(LpError::NotOptimal(SolveStatus::Unbounded))));
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let p = lp(vec![1.0, 1.0], vec![vec![1.0, 1.0]], vec![1.0]);
        let opts = SolverOptions { max_iterations: 0, ..SolverOptions::default() };
        assert_eq!(solve_with(&p, &opts).unwrap_err(), LpError::IterationLimit(0));
    }

    #[test]
    fn redundant_equality_rows() {
        // x + y = 2 written twice as paired inequalities.
        let p = lp(
            vec![1.0, 2.0],
            vec![vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, 1.0], vec![-1.0, -1.0]],
            vec![2.0, -2.0, 2.0, -2.0],
        );
        let out = solve(&p).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!((out.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn refactorization_is_transparent() {
        // A small transportation-like LP solved with very frequent refactorization.
        let c = vec![4.0, 6.0, 9.0, 5.0, 3.0, 8.0];
        let a = vec![
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![-1.0, 0.0, 0.0, -1.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0, 0.0, -1.0, 0.0],
            vec![0.0, 0.0, -1.0, 0.0, 0.0, -1.0],
        ];
        let b = vec![3.0, 4.0, -5.0, -5.0, -5.0];
        let p = lp(c, a, b);
        let base = solve(&p).unwrap();
        let frequent = solve_with(&p, &SolverOptions { refactor_every: 1, ..SolverOptions::default() }).unwrap();
        assert!((base.objective - frequent.objective).abs() < 1e-12);
        assert!((base.objective - 24.0).abs() < 1e-9);
    }
}
