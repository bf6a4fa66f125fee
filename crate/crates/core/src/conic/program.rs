//! Conic program representation.
//!
//! Every constraint is written as `expr ∈ K` where `expr` is an affine
//! function of the decision vector and `K` is one of the zero, nonnegative,
//! second-order or positive semidefinite cones. PSD blocks are stored as the
//! scaled lower triangle (svec, column-major, off-diagonals times √2).

use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

pub(crate) const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Affine scalar expression `Σ a_i x_i + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn term(i: usize, a: f64) -> Self {
        Self { terms: vec![(i, a)], constant: 0.0 }
    }

    pub fn add_term(&mut self, i: usize, a: f64) {
        if a != 0.0 {
            self.terms.push((i, a));
        }
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, other: &Affine, a: f64) {
        if a == 0.0 {
            return;
        }
        self.terms.extend(other.terms.iter().map(|&(i, v)| (i, a * v)));
        self.constant += a * other.constant;
    }

    pub fn scaled(&self, a: f64) -> Affine {
        let mut out = Affine::zero();
        out.add_scaled(self, a);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + self.constant
    }

    /// Merge duplicate variable terms and drop exact zeros.
    pub fn compact(&mut self) {
        if self.terms.len() < 2 {
            self.terms.retain(|t| t.1 != 0.0);
            return;
        }
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, a) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += a,
                _ => out.push((i, a)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }
}

impl From<f64> for Affine {
    fn from(c: f64) -> Self {
        Affine::constant(c)
    }
}

impl Add for Affine {
    type Output = Affine;
    fn add(mut self, rhs: Affine) -> Affine {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl Sub for Affine {
    type Output = Affine;
    fn sub(mut self, rhs: Affine) -> Affine {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl AddAssign<&Affine> for Affine {
    fn add_assign(&mut self, rhs: &Affine) {
        self.add_scaled(rhs, 1.0);
    }
}

impl SubAssign<&Affine> for Affine {
    fn sub_assign(&mut self, rhs: &Affine) {
        self.add_scaled(rhs, -1.0);
    }
}

impl Mul<f64> for Affine {
    type Output = Affine;
    fn mul(self, a: f64) -> Affine {
        self.scaled(a)
    }
}

impl Neg for Affine {
    type Output = Affine;
    fn neg(self) -> Affine {
        self.scaled(-1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConeKind {
    Zero,
    Nonneg,
    Soc,
    Psd,
}

impl fmt::Display for ConeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConeKind::Zero => "zero",
            ConeKind::Nonneg => "nonneg",
            ConeKind::Soc => "soc",
            ConeKind::Psd => "psd",
        };
        f.write_str(s)
    }
}

/// A contiguous run of constraint rows belonging to one cone.
#[derive(Clone, Debug)]
pub struct Block {
    pub tag: String,
    pub kind: ConeKind,
    /// Number of rows.
    pub dim: usize,
    /// Matrix order for PSD blocks, `dim` otherwise.
    pub order: usize,
    pub row_start: usize,
}

impl Block {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.row_start..self.row_start + self.dim
    }
}

/// Symmetric matrix of affine expressions, lower triangle stored column-major.
#[derive(Clone, Debug)]
pub struct SymExpr {
    order: usize,
    entries: Vec<Affine>,
}

impl SymExpr {
    pub fn zeros(order: usize) -> Self {
        Self { order, entries: vec![Affine::zero(); order * (order + 1) / 2] }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        // column j starts after columns 0..j, each of length order - c
        j * self.order - j * (j + 1) / 2 + i
    }

    pub fn get(&self, i: usize, j: usize) -> &Affine {
        &self.entries[self.idx(i, j)]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Affine {
        let k = self.idx(i, j);
        &mut self.entries[k]
    }

    pub fn set(&mut self, i: usize, j: usize, e: Affine) {
        let k = self.idx(i, j);
        self.entries[k] = e;
    }

    /// Entries in svec order (column-major lower triangle) without scaling.
    pub fn entries(&self) -> &[Affine] {
        &self.entries
    }

    pub fn eval(&self, x: &[f64]) -> nalgebra::DMatrix<f64> {
        let n = self.order;
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.get(i, j).eval(x);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Real conic program `min cᵀx + c0` subject to `expr_r ∈ K` for all blocks.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    n_vars: usize,
    var_names: Vec<String>,
    objective: Affine,
    rows: Vec<Vec<(usize, f64)>>,
    consts: Vec<f64>,
    blocks: Vec<Block>,
    infeasible: Option<String>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>) -> usize {
        self.var_names.push(name.into());
        self.n_vars += 1;
        self.n_vars - 1
    }

    /// Adds `count` variables named `prefix[i]` and returns the first index.
    pub fn add_vars(&mut self, prefix: &str, count: usize) -> usize {
        let first = self.n_vars;
        for i in 0..count {
            self.var_names.push(format!("{prefix}[{i}]"));
        }
        self.n_vars += count;
        first
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn var_name(&self, i: usize) -> &str {
        &self.var_names[i]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, tag: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.tag == tag)
    }

    pub fn objective(&self) -> &Affine {
        &self.objective
    }

    pub fn set_objective(&mut self, mut obj: Affine) {
        obj.compact();
        self.objective = obj;
    }

    pub fn add_objective(&mut self, obj: &Affine) {
        self.objective.add_scaled(obj, 1.0);
        self.objective.compact();
    }

    /// Set when a constraint with no variables cannot hold.
    pub fn trivially_infeasible(&self) -> Option<&str> {
        self.infeasible.as_deref()
    }

    pub(crate) fn row(&self, r: usize) -> (&[(usize, f64)], f64) {
        (&self.rows[r], self.consts[r])
    }

    fn push_row(&mut self, mut e: Affine, scale: f64) {
        e.compact();
        debug_assert!(e.terms.iter().all(|t| t.0 < self.n_vars), "unknown variable");
        self.rows.push(e.terms.into_iter().map(|(i, a)| (i, a * scale)).collect());
        self.consts.push(e.constant * scale);
    }

    fn push_block(&mut self, tag: &str, kind: ConeKind, dim: usize, order: usize, start: usize) {
        if dim > 0 {
            self.blocks.push(Block { tag: tag.to_string(), kind, dim, order, row_start: start });
        }
    }

    /// Componentwise filter used by zero and nonneg blocks: constant rows are
    /// checked immediately instead of being passed to the solver.
    fn add_componentwise(&mut self, tag: &str, kind: ConeKind, exprs: Vec<Affine>) {
        let start = self.rows.len();
        let mut dim = 0;
        for mut e in exprs {
            e.compact();
            if e.terms.is_empty() {
                let ok = match kind {
                    ConeKind::Zero => e.constant.abs() <= 1e-12,
                    _ => e.constant >= -1e-12,
                };
                if !ok && self.infeasible.is_none() {
                    self.infeasible = Some(format!("{tag}: constant row {} violates {kind}", e.constant));
                }
                continue;
            }
            self.push_row(e, 1.0);
            dim += 1;
        }
        self.push_block(tag, kind, dim, dim, start);
    }

    /// `expr = 0` for each entry.
    pub fn add_zero(&mut self, tag: &str, exprs: Vec<Affine>) {
        self.add_componentwise(tag, ConeKind::Zero, exprs);
    }

    /// `expr ≥ 0` for each entry.
    pub fn add_nonneg(&mut self, tag: &str, exprs: Vec<Affine>) {
        self.add_componentwise(tag, ConeKind::Nonneg, exprs);
    }

    /// `‖u‖₂ ≤ t`.
    pub fn add_soc(&mut self, tag: &str, t: Affine, u: Vec<Affine>) {
        let start = self.rows.len();
        let dim = u.len() + 1;
        self.push_row(t, 1.0);
        for e in u {
            self.push_row(e, 1.0);
        }
        self.push_block(tag, ConeKind::Soc, dim, dim, start);
    }

    /// Rotated cone `‖u‖² ≤ 2·a·b`, `a, b ≥ 0`, written as
    /// `‖(u, (a−b)/√2)‖ ≤ (a+b)/√2`.
    pub fn add_rotated_soc(&mut self, tag: &str, a: Affine, b: Affine, mut u: Vec<Affine>) {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let t = (a.clone() + b.clone()) * h;
        u.push((a - b) * h);
        self.add_soc(tag, t, u);
    }

    /// `S ⪰ 0` for a symmetric affine matrix.
    pub fn add_psd(&mut self, tag: &str, s: SymExpr) {
        let start = self.rows.len();
        let n = s.order;
        let dim = n * (n + 1) / 2;
        let mut k = 0;
        for j in 0..n {
            for i in j..n {
                let e = s.entries[k].clone();
                self.push_row(e, if i == j { 1.0 } else { SQRT2 });
                k += 1;
            }
        }
        self.push_block(tag, ConeKind::Psd, dim, n, start);
    }

    /// `lo ≤ x_i ≤ hi` as nonnegative rows (infinite sides skipped).
    pub fn add_bounds(&mut self, tag: &str, bounds: &[(usize, f64, f64)]) {
        let mut rows = Vec::new();
        for &(i, lo, hi) in bounds {
            if lo.is_finite() {
                rows.push(Affine::var(i) - Affine::constant(lo));
            }
            if hi.is_finite() {
                rows.push(Affine::constant(hi) - Affine::var(i));
            }
        }
        self.add_nonneg(tag, rows);
    }

    pub fn eval_objective(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
    }

    /// Row values `expr(x)` (PSD off-diagonals carry the √2 factor).
    pub fn eval_rows(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.consts)
            .map(|(r, c)| r.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + c)
            .collect()
    }

    /// Largest cone violation of `x` over all blocks (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let v = self.eval_rows(x);
        self.blocks
            .iter()
            .map(|b| super::cones::violation(b.kind, b.order, &v[b.rows()]))
            .fold(0.0, f64::max)
    }

    /// Sparse text dump: header lines, objective terms, per-block cone
    /// headers, then one `row col value` triplet per coefficient and one
    /// `const row value` line per nonzero offset.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "conic-program v1")?;
        writeln!(w, "vars {}", self.n_vars)?;
        writeln!(w, "rows {}", self.rows.len())?;
        writeln!(w, "objective-constant {:.17e}", self.objective.constant)?;
        for &(i, a) in &self.objective.terms {
            writeln!(w, "c {i} {a:.17e}")?;
        }
        for b in &self.blocks {
            writeln!(w, "cone {} {} {} {} {}", b.kind, b.row_start, b.dim, b.order, b.tag)?;
        }
        for (r, row) in self.rows.iter().enumerate() {
            for &(i, a) in row {
                writeln!(w, "{r} {i} {a:.17e}")?;
            }
        }
        for (r, &c) in self.consts.iter().enumerate() {
            if c != 0.0 {
                writeln!(w, "const {r} {c:.17e}")?;
            }
        }
        Ok(())
    }
}
