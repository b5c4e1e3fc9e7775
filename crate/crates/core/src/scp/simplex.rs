//! Dense two-phase primal simplex for small linear programs.
//!
//! Problem form: minimize `c·x` subject to `aᵢ·x ≥ bᵢ`, with every variable
//! free unless marked nonnegative. Free variables enter as differences of two
//! nonnegative columns, which forces their reduced costs to vanish at the
//! optimum — so the returned row multipliers reproduce the objective exactly
//! (`c = Aᵀλ`), a property the planner uses to certify stationarity.
//!
//! Pivoting follows Bland's rule (smallest eligible column; ties in the
//! ratio test broken by smallest basic variable), which both prevents
//! cycling and makes every solve bit-for-bit deterministic.

use thiserror::Error;

/// Solver failures.
#[derive(Debug, Error)]
pub enum LpError {
    #[error("constraints are infeasible (phase-1 residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("objective is unbounded below")]
    Unbounded,
    #[error("pivot limit reached after {0} iterations")]
    IterationLimit(usize),
    #[error("malformed problem: {0}")]
    BadProblem(String),
}

/// Optimal point with row multipliers.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// One multiplier per input row, `λ ≥ 0`, satisfying `c = Aᵀλ` up to
    /// round-off (rows dropped as redundant get 0).
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

const ENTER_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const FEAS_RESIDUAL_TOL: f64 = 1e-7;
const MAX_PIVOTS: usize = 20_000;

/// Column bookkeeping: which structural variable a column represents.
#[derive(Clone, Copy)]
struct StructCol {
    var: usize,
    sign: f64,
}

/// Solve `min c·x` s.t. `a[i]·x ≥ b[i]`; `nonneg[j]` restricts `x_j ≥ 0`.
pub fn solve_lp(
    c: &[f64],
    a: &[Vec<f64>],
    b: &[f64],
    nonneg: &[bool],
) -> Result<LpSolution, LpError> {
    let n = c.len();
    let m = a.len();
    if b.len() != m || nonneg.len() != n {
        return Err(LpError::BadProblem("length mismatch".into()));
    }
    if a.iter().any(|row| row.len() != n) {
        return Err(LpError::BadProblem("row width mismatch".into()));
    }
    if c.iter().any(|v| !v.is_finite())
        || b.iter().any(|v| !v.is_finite())
        || a.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(LpError::BadProblem("non-finite coefficient".into()));
    }

    // Column layout: structural (split for free vars), surpluses, artificials.
    let mut struct_cols = Vec::new();
    for (j, &nn) in nonneg.iter().enumerate() {
        struct_cols.push(StructCol { var: j, sign: 1.0 });
        if !nn {
            struct_cols.push(StructCol { var: j, sign: -1.0 });
        }
    }
    let n_struct = struct_cols.len();
    let surplus_start = n_struct;
    let art_start = n_struct + m;
    let width = n_struct + 2 * m;

    let mut tab: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rhs = vec![0.0; m];
    let mut sign = vec![1.0; m];
    for i in 0..m {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        sign[i] = s;
        rhs[i] = s * b[i];
        let mut row = vec![0.0; width];
        for (col, sc) in struct_cols.iter().enumerate() {
            row[col] = s * a[i][sc.var] * sc.sign;
        }
        row[surplus_start + i] = -s;
        row[art_start + i] = 1.0;
        tab.push(row);
    }
    // Which input row each tableau row came from (rows may be dropped).
    let mut origin: Vec<usize> = (0..m).collect();
    let mut basis: Vec<usize> = (0..m).map(|i| art_start + i).collect();

    // Reduced-cost rows for both phases, updated by every pivot.
    let mut z2 = vec![0.0; width];
    for (col, sc) in struct_cols.iter().enumerate() {
        z2[col] = c[sc.var] * sc.sign;
    }
    let mut z1 = vec![0.0; width];
    for j in 0..width {
        if j >= art_start {
            continue; // artificial reduced costs start at 1 − 1 = 0
        }
        z1[j] = -tab.iter().map(|row| row[j]).sum::<f64>();
    }
    let mut obj1: f64 = rhs.iter().sum();

    let mut iterations = 0usize;

    let pivot = |tab: &mut Vec<Vec<f64>>,
                 rhs: &mut Vec<f64>,
                 z1: &mut Vec<f64>,
                 z2: &mut Vec<f64>,
                 obj1: &mut f64,
                 basis: &mut Vec<usize>,
                 r: usize,
                 jcol: usize| {
        let piv = tab[r][jcol];
        let inv = 1.0 / piv;
        for v in tab[r].iter_mut() {
            *v *= inv;
        }
        rhs[r] *= inv;
        for i in 0..tab.len() {
            if i == r {
                continue;
            }
            let f = tab[i][jcol];
            if f != 0.0 {
                let (pre, post) = tab.split_at_mut(r.max(i));
                let (row_i, row_r) = if i < r {
                    (&mut pre[i], &post[0])
                } else {
                    (&mut post[0], &pre[r])
                };
                for (vi, vr) in row_i.iter_mut().zip(row_r.iter()) {
                    *vi -= f * vr;
                }
                rhs[i] -= f * rhs[r];
                if rhs[i] < 0.0 && rhs[i] > -1e-11 {
                    rhs[i] = 0.0;
                }
            }
        }
        let f1 = z1[jcol];
        if f1 != 0.0 {
            for (zj, vr) in z1.iter_mut().zip(tab[r].iter()) {
                *zj -= f1 * vr;
            }
            // Entering at level rhs[r] changes the objective by c̄·rhs[r].
            *obj1 += f1 * rhs[r];
        }
        let f2 = z2[jcol];
        if f2 != 0.0 {
            for (zj, vr) in z2.iter_mut().zip(tab[r].iter()) {
                *zj -= f2 * vr;
            }
        }
        basis[r] = jcol;
    };

    // Bland ratio test: smallest ratio, ties by smallest basic variable.
    let leaving = |tab: &[Vec<f64>], rhs: &[f64], basis: &[usize], jcol: usize| -> Option<usize> {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..tab.len() {
            let aij = tab[i][jcol];
            if aij > PIVOT_TOL {
                let ratio = rhs[i] / aij;
                let candidate = (ratio, basis[i], i);
                best = match best {
                    None => Some(candidate),
                    Some(cur) => {
                        if ratio < cur.0 - 1e-12
                            || (ratio < cur.0 + 1e-12 && basis[i] < cur.1)
                        {
                            Some(candidate)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
        }
        best.map(|(_, _, i)| i)
    };

    // Phase 1: drive the artificial sum to zero. Artificials never enter.
    loop {
        let entering = (0..art_start).find(|&j| z1[j] < -ENTER_TOL);
        let Some(jcol) = entering else { break };
        let Some(r) = leaving(&tab, &rhs, &basis, jcol) else {
            // Phase-1 objective is bounded below by 0; no leaving row means
            // numerical trouble.
            return Err(LpError::BadProblem("phase-1 ratio test failed".into()));
        };
        pivot(&mut tab, &mut rhs, &mut z1, &mut z2, &mut obj1, &mut basis, r, jcol);
        iterations += 1;
        if iterations > MAX_PIVOTS {
            return Err(LpError::IterationLimit(iterations));
        }
    }
    if obj1 > FEAS_RESIDUAL_TOL {
        return Err(LpError::Infeasible { residual: obj1 });
    }

    // Drive residual zero-level artificials out of the basis; rows that
    // cannot pivot are redundant and dropped (their multiplier is 0).
    let mut i = 0;
    while i < tab.len() {
        if basis[i] >= art_start {
            let col = (0..art_start).find(|&j| tab[i][j].abs() > PIVOT_TOL);
            match col {
                Some(jcol) => {
                    pivot(
                        &mut tab, &mut rhs, &mut z1, &mut z2, &mut obj1, &mut basis, i, jcol,
                    );
                    iterations += 1;
                }
                None => {
                    tab.remove(i);
                    rhs.remove(i);
                    basis.remove(i);
                    origin.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }

    // Phase 2 on the real objective; artificial columns stay shut out.
    loop {
        let entering = (0..art_start).find(|&j| z2[j] < -ENTER_TOL);
        let Some(jcol) = entering else { break };
        let Some(r) = leaving(&tab, &rhs, &basis, jcol) else {
            return Err(LpError::Unbounded);
        };
        pivot(&mut tab, &mut rhs, &mut z1, &mut z2, &mut obj1, &mut basis, r, jcol);
        iterations += 1;
        if iterations > MAX_PIVOTS {
            return Err(LpError::IterationLimit(iterations));
        }
    }

    // Recover the point and the input-row multipliers.
    let mut x = vec![0.0; n];
    for (i, &bj) in basis.iter().enumerate() {
        if bj < n_struct {
            let sc = struct_cols[bj];
            x[sc.var] += sc.sign * rhs[i];
        }
    }
    // Multiplier of each standardized equality = −(reduced cost of that
    // row's artificial column); undo the rhs sign normalization. Dropped
    // redundant rows keep multiplier 0.
    let mut duals = vec![0.0; m];
    for &orig in &origin {
        duals[orig] = sign[orig] * -z2[art_start + orig];
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution {
        x,
        duals,
        objective,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn free(n: usize) -> Vec<bool> {
        vec![false; n]
    }

    /// max x over 0 ≤ x ≤ 1.5, written as min −x.
    #[test]
    fn one_dimensional_box() {
        let sol = solve_lp(
            &[-1.0],
            &[vec![1.0], vec![-1.0]],
            &[0.0, -1.5],
            &free(1),
        )
        .unwrap();
        assert_relative_eq!(sol.x[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(sol.objective, -1.5, epsilon = 1e-12);
        // c = Aᵀλ: −1 = λ_lo·1 + λ_hi·(−1) with λ_lo = 0, λ_hi = 1.
        assert_relative_eq!(sol.duals[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.duals[1], 1.0, epsilon = 1e-12);
    }

    /// Classic 2-variable vertex: min −x−2y s.t. x+y ≤ 4, y ≤ 3, x,y ≥ 0.
    #[test]
    fn two_dimensional_vertex() {
        let a = vec![
            vec![-1.0, -1.0],
            vec![0.0, -1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let b = vec![-4.0, -3.0, 0.0, 0.0];
        let sol = solve_lp(&[-1.0, -2.0], &a, &b, &free(2)).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 3.0, epsilon = 1e-12);
        assert_relative_eq!(sol.objective, -7.0, epsilon = 1e-12);
        // Stationarity c = Aᵀλ and complementary slackness.
        for j in 0..2 {
            let at_lambda: f64 = (0..4).map(|i| a[i][j] * sol.duals[i]).sum();
            assert_relative_eq!([-1.0, -2.0][j], at_lambda, epsilon = 1e-12);
        }
        for i in 0..4 {
            let slack: f64 = (0..2).map(|j| a[i][j] * sol.x[j]).sum::<f64>() - b[i];
            assert!(sol.duals[i] >= -1e-12);
            assert!((sol.duals[i] * slack).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_rows_are_handled_and_deterministic() {
        // min −x−y with the x ≤ 1 constraint stated twice.
        let a = vec![
            vec![-1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let b = vec![-1.0, -1.0, -2.0, 0.0, 0.0];
        let s1 = solve_lp(&[-1.0, -1.0], &a, &b, &free(2)).unwrap();
        let s2 = solve_lp(&[-1.0, -1.0], &a, &b, &free(2)).unwrap();
        assert_eq!(s1.x, s2.x);
        assert_eq!(s1.duals, s2.duals);
        assert_relative_eq!(s1.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s1.x[1], 2.0, epsilon = 1e-12);
        // The duplicate pair still reproduces the objective jointly.
        let lam: f64 = s1.duals[0] + s1.duals[1];
        assert_relative_eq!(lam, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn infeasible_system_is_reported_with_residual() {
        // x ≥ 1 and −x ≥ 0 cannot hold together.
        match solve_lp(&[1.0], &[vec![1.0], vec![-1.0]], &[1.0, 0.0], &free(1)) {
            Err(LpError::Infeasible { residual }) => assert!(residual > 0.5),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn unbounded_objective_is_detected() {
        // min −x with only x ≥ 0.
        match solve_lp(&[-1.0], &[vec![1.0]], &[0.0], &free(1)) {
            Err(LpError::Unbounded) => {}
            other => panic!("expected unboundedness, got {other:?}"),
        }
    }

    #[test]
    fn nonneg_mask_restricts_the_domain() {
        // min x s.t. x ≥ −5: free variable reaches −5, masked stops at 0.
        let sol_free = solve_lp(&[1.0], &[vec![1.0]], &[-5.0], &[false]).unwrap();
        assert_relative_eq!(sol_free.x[0], -5.0, epsilon = 1e-12);
        let sol_nn = solve_lp(&[1.0], &[vec![1.0]], &[-5.0], &[true]).unwrap();
        assert_relative_eq!(sol_nn.x[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_rhs_rows_keep_correct_duals() {
        // min x + y s.t. x + y ≥ −1, x ≥ 2, x − y ≥ 3.
        let a = vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, -1.0]];
        let b = vec![-1.0, 2.0, 3.0];
        let c = [1.0, 1.0];
        let sol = solve_lp(&c, &a, &b, &free(2)).unwrap();
        // The negative-rhs row binds at the optimum: x = 2, y = −3 where
        // x + y = −1; the third row is slack (x − y = 5).
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-11);
        assert_relative_eq!(sol.x[1], -3.0, epsilon = 1e-11);
        for j in 0..2 {
            let at_lambda: f64 = (0..3).map(|i| a[i][j] * sol.duals[i]).sum();
            assert_relative_eq!(c[j], at_lambda, epsilon = 1e-10);
        }
        for i in 0..3 {
            assert!(sol.duals[i] >= -1e-12);
            let slack: f64 = (0..2).map(|j| a[i][j] * sol.x[j]).sum::<f64>() - b[i];
            assert!((sol.duals[i] * slack).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_vertex_terminates_under_blands_rule() {
        // Three rows meeting at the same point (0,0) plus a box; Bland's
        // rule must not cycle.
        let a = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ];
        let b = vec![0.0, 0.0, 0.0, 0.0, -1.0, -1.0];
        let sol = solve_lp(&[1.0, 1.0], &a, &b, &free(2)).unwrap();
        assert_relative_eq!(sol.x[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.0, epsilon = 1e-12);
    }
}
