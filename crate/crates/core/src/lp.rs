//! The example-weighting linear program
//!
//! ```text
//! max  sum_i w_i
//! s.t. sum_{i in group(j)} w_i <= c * mu_j   for every secret j
//!      0 <= w_i <= 1
//! ```
//!
//! solved with a revised primal simplex over upper-bounded variables. The
//! constraint matrix is a sparse 0/1 incidence matrix and `w = 0` is always
//! feasible, so the slack basis is a valid start and no phase one is needed.
//! Bland's rule picks both the entering and the leaving variable, which makes
//! the result deterministic and rules out cycling on the heavily degenerate
//! instances produced by small `c`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::divergence::KLBudget;
use crate::domain::SecretMap;
use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;

/// LP instance: per-secret example groups and their capacities `c * mu_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLP {
    n: usize,
    incidence: Vec<Vec<usize>>,
    caps: Vec<f64>,
}

impl WeightLP {
    pub fn new(n: usize, incidence: Vec<Vec<usize>>, caps: Vec<f64>) -> Result<Self> {
        if incidence.len() != caps.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} constraint rows but {} capacities",
                incidence.len(),
                caps.len()
            )));
        }
        if let Some(c) = caps.iter().find(|c| !(**c >= 0.0)) {
            return Err(Error::InvalidArgument(format!("capacity {c} is negative")));
        }
        let mut incidence = incidence;
        for row in &mut incidence {
            if let Some(&i) = row.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "example index {i} out of range for {n} examples"
                )));
            }
            row.sort_unstable();
            row.dedup();
        }
        Ok(Self { n, incidence, caps })
    }

    pub fn num_examples(&self) -> usize {
        self.n
    }

    pub fn num_secrets(&self) -> usize {
        self.caps.len()
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    pub fn incidence(&self) -> &[Vec<usize>] {
        &self.incidence
    }

    /// Largest violation of the box and capacity constraints by `w`.
    pub fn max_violation(&self, w: &[f64]) -> f64 {
        let boxv = w
            .iter()
            .map(|&x| (-x).max(x - 1.0).max(0.0))
            .fold(0.0, f64::max);
        let capv = self
            .incidence
            .iter()
            .zip(&self.caps)
            .map(|(row, cap)| (row.iter().map(|&i| w[i]).sum::<f64>() - cap).max(0.0))
            .fold(0.0, f64::max);
        boxv.max(capv)
    }
}

/// Optimal example weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    #[serde(rename = "weights")]
    pub w: Vec<f64>,
    pub objective: f64,
}

impl WeightVector {
    pub fn all_ones(n: usize) -> Self {
        Self {
            w: vec![1.0; n],
            objective: n as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.w.iter().filter(|&&x| x > 0.0).count()
    }
}

/// Capacities `c * mu_j`, with budgets matched to secrets by id.
pub fn build_lp(map: &SecretMap, budgets: &[KLBudget], c: f64) -> Result<WeightLP> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "LP constant must be positive, got {c}"
        )));
    }
    let by_id: HashMap<&str, f64> = budgets
        .iter()
        .map(|b| (b.secret_id.as_str(), b.mu))
        .collect();
    let caps = map
        .secrets()
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .map(|mu| c * mu)
                .ok_or_else(|| Error::MissingBudget(s.id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    WeightLP::new(map.num_examples(), map.incidence_lists().to_vec(), caps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Basic(usize),
    Lower,
    Upper,
}

/// Reduced problem after presolve. Columns `0..nv` are weights, `nv..nv+m`
/// are slacks.
struct Simplex {
    nv: usize,
    m: usize,
    /// rows touched by each weight column
    cols: Vec<Vec<usize>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    binv: Vec<Vec<f64>>,
    xb: Vec<f64>,
}

impl Simplex {
    fn new(cols: Vec<Vec<usize>>, rhs: Vec<f64>) -> Self {
        let nv = cols.len();
        let m = rhs.len();
        let mut status = vec![Status::Lower; nv + m];
        for r in 0..m {
            status[nv + r] = Status::Basic(r);
        }
        let binv = (0..m)
            .map(|r| {
                let mut row = vec![0.0; m];
                row[r] = 1.0;
                row
            })
            .collect();
        Self {
            nv,
            m,
            cols,
            basis: (nv..nv + m).collect(),
            xb: rhs.clone(),
            rhs,
            status,
            binv,
        }
    }

    fn upper(&self, j: usize) -> f64 {
        if j < self.nv {
            1.0
        } else {
            f64::INFINITY
        }
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.nv {
            1.0
        } else {
            0.0
        }
    }

    /// Dense column `j` of the constraint matrix.
    fn column(&self, j: usize) -> Vec<f64> {
        let mut a = vec![0.0; self.m];
        if j < self.nv {
            for &r in &self.cols[j] {
                a[r] = 1.0;
            }
        } else {
            a[j - self.nv] = 1.0;
        }
        a
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        if j < self.nv {
            for (r, row) in self.binv.iter().enumerate() {
                out[r] = self.cols[j].iter().map(|&k| row[k]).sum();
            }
        } else {
            let k = j - self.nv;
            for (r, row) in self.binv.iter().enumerate() {
                out[r] = row[k];
            }
        }
        out
    }

    /// Rebuilds `B^-1` by Gauss-Jordan elimination and recomputes `x_B`.
    fn refactor(&mut self) {
        let m = self.m;
        let mut a: Vec<Vec<f64>> = vec![vec![0.0; 2 * m]; m];
        for (c, &j) in self.basis.iter().enumerate() {
            for (r, v) in self.column(j).into_iter().enumerate() {
                a[r][c] = v;
            }
        }
        for (r, row) in a.iter_mut().enumerate() {
            row[m + r] = 1.0;
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .expect("nonempty");
            a.swap(col, piv);
            let d = a[col][col];
            debug_assert!(d.abs() > 1e-12, "singular basis");
            for v in a[col].iter_mut() {
                *v /= d;
            }
            let pivot_row = a[col].clone();
            for (r, row) in a.iter_mut().enumerate() {
                if r != col && row[col] != 0.0 {
                    let f = row[col];
                    for (v, p) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
        // B^-1 maps row space to basis positions: column c of B is basis[c]
        for (c, row) in a.into_iter().enumerate() {
            self.binv[c] = row[m..].to_vec();
        }
        self.recompute_xb();
    }

    fn recompute_xb(&mut self) {
        let mut b = self.rhs.clone();
        for j in 0..self.nv {
            if self.status[j] == Status::Upper {
                for &r in &self.cols[j] {
                    b[r] -= 1.0;
                }
            }
        }
        for (r, row) in self.binv.iter().enumerate() {
            self.xb[r] = row.iter().zip(&b).map(|(x, y)| x * y).sum();
        }
    }

    fn duals(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for (r, &j) in self.basis.iter().enumerate() {
            let c = self.cost(j);
            if c != 0.0 {
                for (yi, bi) in y.iter_mut().zip(&self.binv[r]) {
                    *yi += c * bi;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        if j < self.nv {
            1.0 - self.cols[j].iter().map(|&r| y[r]).sum::<f64>()
        } else {
            -y[j - self.nv]
        }
    }

    /// Lowest-index nonbasic variable whose move improves the objective.
    fn entering(&self, y: &[f64]) -> Option<(usize, f64)> {
        (0..self.nv + self.m).find_map(|j| match self.status[j] {
            Status::Lower if self.reduced_cost(j, y) > COST_TOL => Some((j, 1.0)),
            Status::Upper if self.reduced_cost(j, y) < -COST_TOL => Some((j, -1.0)),
            _ => None,
        })
    }

    fn run(&mut self, max_iters: usize) -> bool {
        let mut since_refactor = 0;
        for _ in 0..max_iters {
            let y = self.duals();
            let Some((e, dir)) = self.entering(&y) else {
                return true;
            };
            let alpha = self.ftran(e);

            // ratio test; ties go to the lowest-index basic variable
            let mut step = self.upper(e);
            let mut leave: Option<(usize, bool)> = None;
            for r in 0..self.m {
                let rate = dir * alpha[r];
                let (limit, to_upper) = if rate > PIVOT_TOL {
                    (self.xb[r].max(0.0) / rate, false)
                } else if rate < -PIVOT_TOL {
                    let u = self.upper(self.basis[r]);
                    if u.is_infinite() {
                        continue;
                    }
                    ((u - self.xb[r]).max(0.0) / -rate, true)
                } else {
                    continue;
                };
                // a tie with the entering variable's own bound keeps the bound flip
                let better = limit < step - 1e-12
                    || matches!(leave, Some((lr, _))
                        if limit <= step + 1e-12 && self.basis[r] < self.basis[lr]);
                if better {
                    step = limit;
                    leave = Some((r, to_upper));
                }
            }
            if step.is_infinite() {
                // every weight is boxed, so an unbounded ray cannot exist
                debug_assert!(false, "unbounded direction in a bounded LP");
                return false;
            }

            for r in 0..self.m {
                self.xb[r] -= step * dir * alpha[r];
            }
            match leave {
                None => {
                    // entering variable hits its own opposite bound
                    self.status[e] = if dir > 0.0 {
                        Status::Upper
                    } else {
                        Status::Lower
                    };
                }
                Some((r, to_upper)) => {
                    let old = self.basis[r];
                    self.status[old] = if to_upper {
                        Status::Upper
                    } else {
                        Status::Lower
                    };
                    let start = if self.status[e] == Status::Upper {
                        1.0
                    } else {
                        0.0
                    };
                    self.xb[r] = start + dir * step;
                    self.basis[r] = e;
                    self.status[e] = Status::Basic(r);

                    let p = alpha[r];
                    let pivot_row: Vec<f64> = self.binv[r].iter().map(|v| v / p).collect();
                    for (i, row) in self.binv.iter_mut().enumerate() {
                        if i == r || alpha[i] == 0.0 {
                            continue;
                        }
                        let f = alpha[i];
                        for (v, pv) in row.iter_mut().zip(&pivot_row) {
                            *v -= f * pv;
                        }
                    }
                    self.binv[r] = pivot_row;
                    since_refactor += 1;
                    if since_refactor >= REFACTOR_EVERY {
                        self.refactor();
                        since_refactor = 0;
                    }
                }
            }
        }
        false
    }

    fn weights(&self) -> Vec<f64> {
        (0..self.nv)
            .map(|j| match self.status[j] {
                Status::Basic(r) => self.xb[r],
                Status::Lower => 0.0,
                Status::Upper => 1.0,
            })
            .collect()
    }
}

/// Optimal basic solution of the weighting LP.
///
/// Presolve fixes examples that belong to no secret at 1, forces every
/// example in a zero-capacity group to 0, and drops rows that constrain
/// nothing. The remaining problem goes to the simplex.
pub fn solve(lp: &WeightLP) -> WeightVector {
    let n = lp.n;
    let mut fixed: Vec<Option<f64>> = vec![Some(1.0); n];
    for row in &lp.incidence {
        for &i in row {
            fixed[i] = None;
        }
    }
    for (row, &cap) in lp.incidence.iter().zip(&lp.caps) {
        if cap <= 0.0 {
            for &i in row {
                fixed[i] = Some(0.0);
            }
        }
    }

    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let mut var_of = vec![usize::MAX; n];
    for (v, &i) in free.iter().enumerate() {
        var_of[i] = v;
    }
    let mut cols = vec![Vec::new(); free.len()];
    let mut rhs = Vec::new();
    for (row, &cap) in lp.incidence.iter().zip(&lp.caps) {
        let vars: Vec<usize> = row
            .iter()
            .map(|&i| var_of[i])
            .filter(|&v| v != usize::MAX)
            .collect();
        if vars.is_empty() {
            continue;
        }
        let r = rhs.len();
        rhs.push(cap);
        for v in vars {
            cols[v].push(r);
        }
    }

    let mut w: Vec<f64> = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    if !free.is_empty() {
        let mut sx = Simplex::new(cols, rhs);
        let max_iters = 50 * (sx.nv + sx.m) + 1000;
        if !sx.run(max_iters) {
            log::warn!("simplex stopped after {max_iters} iterations before proving optimality");
        }
        sx.refactor();
        for (v, x) in sx.weights().into_iter().enumerate() {
            w[free[v]] = x;
        }
    }

    for x in &mut w {
        *x = x.clamp(0.0, 1.0);
        if *x < FEAS_TOL * 1e-3 {
            *x = 0.0;
        }
    }
    let objective = w.iter().sum();
    WeightVector { w, objective }
}
