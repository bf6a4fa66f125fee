//! Newton system of the interior-point method.
//!
//! Solves
//!
//! ```text
//! [ 0   Aᵀ   Gᵀ  ] [x]   [r1]
//! [ A   0    0   ] [y] = [r2]
//! [ G   0  −WᵀW  ] [z]   [r3]
//! ```
//!
//! by eliminating `z`, forming `H = Gᵀ(WᵀW)⁻¹G` cone by cone from the sparse
//! rows of `G`, factoring `H + δI` densely and handling `A` through a Schur
//! complement. A few steps of iterative refinement on the full system remove
//! the effect of the regularization.

use nalgebra::{DMatrix, DVector};

use super::cones::{norm, Cone, Scaling};
use super::program::ConeKind;

pub(crate) type SparseRows = Vec<Vec<(usize, f64)>>;

/// Entry `c·(E_ij + E_ji)` of a PSD column.
#[derive(Clone, Copy, Debug)]
struct PsdEntry {
    i: usize,
    j: usize,
    c: f64,
}

#[derive(Debug)]
struct PsdColumns {
    cols: Vec<usize>,
    entries: Vec<Vec<PsdEntry>>,
    dense: Vec<bool>,
}

#[derive(Debug)]
enum BlockPattern {
    Rows,
    Soc { cols: Vec<usize> },
    Psd(PsdColumns),
}

#[derive(Debug)]
pub(crate) struct Kkt {
    n: usize,
    p: usize,
    patterns: Vec<BlockPattern>,
    h: DMatrix<f64>,
    l: DMatrix<f64>,
    /// `L⁻¹Aᵀ` (n×p) and the Cholesky factor of the Schur complement.
    la: DMatrix<f64>,
    ls: DMatrix<f64>,
    pub reg: f64,
    pub refine_steps: usize,
}

fn block_cols(g: &SparseRows, cone: &Cone) -> Vec<usize> {
    let mut cols: Vec<usize> = cone.range().flat_map(|r| g[r].iter().map(|e| e.0)).collect();
    cols.sort_unstable();
    cols.dedup();
    cols
}

fn psd_pattern(g: &SparseRows, cone: &Cone) -> PsdColumns {
    let n = cone.order;
    let cols = block_cols(g, cone);
    let mut pos = std::collections::HashMap::with_capacity(cols.len());
    for (k, &c) in cols.iter().enumerate() {
        pos.insert(c, k);
    }
    let mut entries = vec![Vec::new(); cols.len()];
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            let r = cone.start + k;
            for &(col, v) in &g[r] {
                let c = if i == j { v * 0.5 } else { v / std::f64::consts::SQRT_2 };
                entries[pos[&col]].push(PsdEntry { i, j, c });
            }
            k += 1;
        }
    }
    let total: usize = entries.iter().map(|e| e.len()).sum();
    let dense_cost = 2 * n * n * n + total;
    let dense = entries.iter().map(|e| e.len() * total > dense_cost).collect();
    PsdColumns { cols, entries, dense }
}

impl Kkt {
    pub fn new(n: usize, p: usize, g: &SparseRows, cones: &[Cone]) -> Self {
        let patterns = cones
            .iter()
            .map(|c| match c.kind {
                ConeKind::Soc => BlockPattern::Soc { cols: block_cols(g, c) },
                ConeKind::Psd => BlockPattern::Psd(psd_pattern(g, c)),
                _ => BlockPattern::Rows,
            })
            .collect();
        Self {
            n,
            p,
            patterns,
            h: DMatrix::zeros(n, n),
            l: DMatrix::zeros(n, n),
            la: DMatrix::zeros(n, p),
            ls: DMatrix::zeros(p, p),
            reg: 0.0,
            refine_steps: 3,
        }
    }

    fn add_outer(h: &mut DMatrix<f64>, row: &[(usize, f64)], w: f64) {
        let n = h.nrows();
        let hs = h.as_mut_slice();
        for &(i, a) in row {
            let wa = w * a;
            for &(j, b) in row {
                hs[j * n + i] += wa * b;
            }
        }
    }

    fn assemble(&mut self, g: &SparseRows, cones: &[Cone], scal: &[Scaling]) {
        self.h.fill(0.0);
        let n = self.n;
        for ((cone, sc), pat) in cones.iter().zip(scal).zip(&self.patterns) {
            match (sc, pat) {
                (Scaling::Nonneg { w }, _) => {
                    for (k, r) in cone.range().enumerate() {
                        Self::add_outer(&mut self.h, &g[r], 1.0 / (w[k] * w[k]));
                    }
                }
                (Scaling::Soc { eta, wbar, .. }, BlockPattern::Soc { cols }) => {
                    // (WᵀW)⁻¹ = η⁻² (2 J w̄ w̄ᵀ J − J)
                    let e2 = 1.0 / (eta * eta);
                    let mut u = vec![0.0; cols.len()];
                    for (k, r) in cone.range().enumerate() {
                        let jw = if k == 0 { wbar[0] } else { -wbar[k] };
                        for &(c, v) in &g[r] {
                            let pos = cols.binary_search(&c).unwrap();
                            u[pos] += jw * v;
                        }
                        let sign = if k == 0 { -1.0 } else { 1.0 };
                        Self::add_outer(&mut self.h, &g[r], sign * e2);
                    }
                    let hs = self.h.as_mut_slice();
                    for (a, &ca) in cols.iter().enumerate() {
                        let ua = 2.0 * e2 * u[a];
                        if ua == 0.0 {
                            continue;
                        }
                        for (b, &cb) in cols.iter().enumerate() {
                            hs[cb * n + ca] += ua * u[b];
                        }
                    }
                }
                (Scaling::Psd { p, .. }, BlockPattern::Psd(pc)) => {
                    Self::assemble_psd(&mut self.h, p, pc);
                }
                _ => unreachable!("pattern and scaling disagree"),
            }
        }
    }

    fn assemble_psd(h: &mut DMatrix<f64>, p: &DMatrix<f64>, pc: &PsdColumns) {
        let n = h.nrows();
        let s = p.nrows();
        let m = pc.cols.len();
        // T_b = P G_b P for dense columns
        let mut t: Vec<Option<DMatrix<f64>>> = vec![None; m];
        for b in 0..m {
            if !pc.dense[b] {
                continue;
            }
            let mut gm = DMatrix::zeros(s, s);
            for e in &pc.entries[b] {
                gm[(e.i, e.j)] += e.c;
                gm[(e.j, e.i)] += e.c;
            }
            let pg = p * gm;
            t[b] = Some(pg * p);
        }
        let ps = p.as_slice();
        let pv = |i: usize, j: usize| ps[j * s + i];
        let hs = h.as_mut_slice();
        for b in 0..m {
            for a in 0..=b {
                let val = if let Some(tb) = &t[b] {
                    pc.entries[a].iter().map(|e| 2.0 * e.c * tb[(e.i, e.j)]).sum::<f64>()
                } else if let Some(ta) = &t[a] {
                    pc.entries[b].iter().map(|e| 2.0 * e.c * ta[(e.i, e.j)]).sum::<f64>()
                } else {
                    let mut acc = 0.0;
                    for e in &pc.entries[a] {
                        for f in &pc.entries[b] {
                            acc += e.c
                                * f.c
                                * (pv(e.j, f.i) * pv(e.i, f.j) + pv(e.j, f.j) * pv(e.i, f.i));
                        }
                    }
                    2.0 * acc
                };
                let (ca, cb) = (pc.cols[a], pc.cols[b]);
                hs[cb * n + ca] += val;
                if ca != cb {
                    hs[ca * n + cb] += val;
                }
            }
        }
    }

    /// Factors the system for the current scaling. Returns false when no
    /// regularization level yields a positive definite factor.
    pub fn factor(&mut self, a: &SparseRows, g: &SparseRows, cones: &[Cone], scal: &[Scaling]) -> bool {
        self.assemble(g, cones, scal);
        let n = self.n;
        let maxdiag = (0..n).map(|i| self.h[(i, i)]).fold(1.0, f64::max);
        let mut reg = 1e-13 * maxdiag;
        for _ in 0..8 {
            self.l.copy_from(&self.h);
            for i in 0..n {
                self.l[(i, i)] += reg;
            }
            if cholesky_in_place(&mut self.l) {
                self.reg = reg;
                if self.p == 0 || self.factor_schur(a, reg) {
                    return true;
                }
            }
            reg *= 100.0;
        }
        false
    }

    fn factor_schur(&mut self, a: &SparseRows, reg: f64) -> bool {
        let p = self.p;
        self.la.fill(0.0);
        for (r, row) in a.iter().enumerate() {
            for &(c, v) in row {
                self.la[(c, r)] = v;
            }
        }
        solve_lower_cols(&self.l, &mut self.la);
        self.ls = self.la.transpose() * &self.la;
        let maxdiag = (0..p).map(|i| self.ls[(i, i)]).fold(1e-300, f64::max);
        let sreg = (1e-13 * maxdiag).max(reg * 1e-3);
        for i in 0..p {
            self.ls[(i, i)] += sreg;
        }
        cholesky_in_place(&mut self.ls)
    }

    fn solve_reduced(
        &self,
        a: &SparseRows,
        g: &SparseRows,
        cones: &[Cone],
        scal: &[Scaling],
        r1: &[f64],
        r2: &[f64],
        r3: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tmp = vec![0.0; r3.len()];
        for (c, sc) in cones.iter().zip(scal) {
            sc.apply_wtw_inv(&r3[c.range()], &mut tmp[c.range()]);
        }
        let mut f = DVector::from_column_slice(r1);
        for (r, row) in g.iter().enumerate() {
            let t = tmp[r];
            if t != 0.0 {
                for &(c, v) in row {
                    f[c] += v * t;
                }
            }
        }
        let mut y = vec![0.0; self.p];
        if self.p > 0 {
            // y = S⁻¹ (A H⁻¹ f − r2),  A H⁻¹ f = (L⁻¹Aᵀ)ᵀ (L⁻¹ f)
            let mut lf = f.clone();
            solve_lower(&self.l, lf.as_mut_slice());
            let mut rhs = self.la.transpose() * &lf;
            for i in 0..self.p {
                rhs[i] -= r2[i];
            }
            solve_lower(&self.ls, rhs.as_mut_slice());
            solve_upper(&self.ls, rhs.as_mut_slice());
            y.copy_from_slice(rhs.as_slice());
            for (r, row) in a.iter().enumerate() {
                for &(c, v) in row {
                    f[c] -= v * y[r];
                }
            }
        }
        let mut x = f;
        solve_lower(&self.l, x.as_mut_slice());
        solve_upper(&self.l, x.as_mut_slice());
        let x: Vec<f64> = x.as_slice().to_vec();
        // z = (WᵀW)⁻¹ (G x − r3)
        let mut gx = vec![0.0; r3.len()];
        for (r, row) in g.iter().enumerate() {
            gx[r] = row.iter().map(|&(c, v)| v * x[c]).sum::<f64>() - r3[r];
        }
        let mut z = vec![0.0; r3.len()];
        for (c, sc) in cones.iter().zip(scal) {
            sc.apply_wtw_inv(&gx[c.range()], &mut z[c.range()]);
        }
        (x, y, z)
    }

    /// Solves the full system with iterative refinement.
    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        &self,
        a: &SparseRows,
        g: &SparseRows,
        cones: &[Cone],
        scal: &[Scaling],
        r1: &[f64],
        r2: &[f64],
        r3: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut x, mut y, mut z) = self.solve_reduced(a, g, cones, scal, r1, r2, r3);
        let bnorm = norm(r1).max(norm(r2)).max(norm(r3)).max(1e-300);
        let mut last = f64::INFINITY;
        for _ in 0..self.refine_steps {
            let (e1, e2, e3) = self.residual(a, g, cones, scal, &x, &y, &z, r1, r2, r3);
            let en = norm(&e1).max(norm(&e2)).max(norm(&e3));
            if en <= 1e-14 * bnorm || en >= 0.5 * last {
                break;
            }
            last = en;
            let (dx, dy, dz) = self.solve_reduced(a, g, cones, scal, &e1, &e2, &e3);
            for i in 0..x.len() {
                x[i] += dx[i];
            }
            for i in 0..y.len() {
                y[i] += dy[i];
            }
            for i in 0..z.len() {
                z[i] += dz[i];
            }
        }
        (x, y, z)
    }

    #[allow(clippy::too_many_arguments)]
    fn residual(
        &self,
        a: &SparseRows,
        g: &SparseRows,
        cones: &[Cone],
        scal: &[Scaling],
        x: &[f64],
        y: &[f64],
        z: &[f64],
        r1: &[f64],
        r2: &[f64],
        r3: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut e1 = r1.to_vec();
        for (r, row) in a.iter().enumerate() {
            for &(c, v) in row {
                e1[c] -= v * y[r];
            }
        }
        for (r, row) in g.iter().enumerate() {
            for &(c, v) in row {
                e1[c] -= v * z[r];
            }
        }
        let e2: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(r, row)| r2[r] - row.iter().map(|&(c, v)| v * x[c]).sum::<f64>())
            .collect();
        let mut wz = vec![0.0; z.len()];
        for (c, sc) in cones.iter().zip(scal) {
            sc.apply_wtw(&z[c.range()], &mut wz[c.range()]);
        }
        let e3: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(r, row)| r3[r] - row.iter().map(|&(c, v)| v * x[c]).sum::<f64>() + wz[r])
            .collect();
        (e1, e2, e3)
    }
}

/// In-place lower Cholesky of a column-major symmetric matrix (lower triangle
/// read, upper triangle left untouched). Returns false if not positive
/// definite.
pub(crate) fn cholesky_in_place(m: &mut DMatrix<f64>) -> bool {
    let n = m.nrows();
    let a = m.as_mut_slice();
    // right-looking, column-major: after finishing column k, update trailing
    // columns j > k with column k.
    for k in 0..n {
        let d = a[k * n + k];
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[k * n + k] = d;
        let inv = 1.0 / d;
        for i in k + 1..n {
            a[k * n + i] *= inv;
        }
        let (head, tail) = a.split_at_mut((k + 1) * n);
        let colk = &head[k * n..k * n + n];
        for j in k + 1..n {
            let ljk = colk[j];
            if ljk == 0.0 {
                continue;
            }
            let colj = &mut tail[(j - k - 1) * n..(j - k) * n];
            for i in j..n {
                colj[i] -= colk[i] * ljk;
            }
        }
    }
    true
}

/// Solves `L x = b` in place for lower-triangular `L` (column-major).
pub(crate) fn solve_lower(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let ls = l.as_slice();
    for k in 0..n {
        let xk = b[k] / ls[k * n + k];
        b[k] = xk;
        if xk != 0.0 {
            let col = &ls[k * n..k * n + n];
            for i in k + 1..n {
                b[i] -= col[i] * xk;
            }
        }
    }
}

/// Solves `Lᵀ x = b` in place.
pub(crate) fn solve_upper(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let ls = l.as_slice();
    for k in (0..n).rev() {
        let col = &ls[k * n..k * n + n];
        let mut s = b[k];
        for i in k + 1..n {
            s -= col[i] * b[i];
        }
        b[k] = s / col[k];
    }
}

fn solve_lower_cols(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for j in 0..b.ncols() {
        let col = &mut b.as_mut_slice()[j * n..(j + 1) * n];
        solve_lower(l, col);
    }
}
