//! Complex-to-real embeddings. All complex constraints reach the solver
//! through these helpers.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::program::{Affine, ConicProgram, SymExpr};
use crate::error::{Error, Result};

/// Complex affine scalar `re + j·im`.
#[derive(Clone, Debug, Default)]
pub struct CAffine {
    pub re: Affine,
    pub im: Affine,
}

impl CAffine {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(re: Affine, im: Affine) -> Self {
        Self { re, im }
    }

    pub fn real(re: Affine) -> Self {
        Self { re, im: Affine::zero() }
    }

    pub fn constant(c: Complex64) -> Self {
        Self { re: Affine::constant(c.re), im: Affine::constant(c.im) }
    }

    /// `self += a · other` with complex `a`.
    pub fn add_scaled(&mut self, other: &CAffine, a: Complex64) {
        self.re.add_scaled(&other.re, a.re);
        self.re.add_scaled(&other.im, -a.im);
        self.im.add_scaled(&other.re, a.im);
        self.im.add_scaled(&other.im, a.re);
    }

    pub fn scaled(&self, a: Complex64) -> CAffine {
        let mut out = CAffine::zero();
        out.add_scaled(self, a);
        out
    }

    pub fn conj(&self) -> CAffine {
        CAffine { re: self.re.clone(), im: self.im.scaled(-1.0) }
    }

    pub fn eval(&self, x: &[f64]) -> Complex64 {
        Complex64::new(self.re.eval(x), self.im.eval(x))
    }

    pub fn compact(&mut self) {
        self.re.compact();
        self.im.compact();
    }
}

/// Hermitian matrix of complex affine entries; only the upper triangle
/// (`i ≤ j`) is stored, the rest is implied by conjugate symmetry.
#[derive(Clone, Debug)]
pub struct HermExpr {
    order: usize,
    upper: Vec<CAffine>,
}

impl HermExpr {
    pub fn zeros(order: usize) -> Self {
        Self { order, upper: vec![CAffine::zero(); order * (order + 1) / 2] }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j);
        // row-major upper triangle
        i * self.order - i * (i + 1) / 2 + j
    }

    /// Entry `(i, j)`; entries below the diagonal are conjugated copies.
    pub fn get(&self, i: usize, j: usize) -> CAffine {
        if i <= j {
            self.upper[self.idx(i, j)].clone()
        } else {
            self.upper[self.idx(j, i)].conj()
        }
    }

    /// Sets `(i, j)` and implicitly `(j, i) = conj`.
    pub fn set(&mut self, i: usize, j: usize, v: CAffine) {
        if i <= j {
            let k = self.idx(i, j);
            self.upper[k] = v;
        } else {
            let k = self.idx(j, i);
            self.upper[k] = v.conj();
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<Complex64> {
        let n = self.order;
        DMatrix::from_fn(n, n, |i, j| self.get(i, j).eval(x))
    }
}

/// Real symmetric embedding `[[Re H, −Im H], [Im H, Re H]]` of a Hermitian
/// affine matrix. Rejects diagonals with a nonzero imaginary part.
pub fn embed_hermitian_psd(h: &HermExpr) -> Result<SymExpr> {
    let n = h.order();
    for i in 0..n {
        let mut d = h.get(i, i).im;
        d.compact();
        if !d.terms.is_empty() || d.constant.abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("diagonal entry {i} is not real")));
        }
    }
    let mut s = SymExpr::zeros(2 * n);
    for j in 0..n {
        for i in j..n {
            let e = h.get(i, j);
            s.set(i, j, e.re.clone());
            s.set(n + i, n + j, e.re);
        }
    }
    for i in 0..n {
        for j in 0..n {
            // bottom-left block holds Im H
            s.set(n + i, j, h.get(i, j).im);
        }
    }
    Ok(s)
}

/// Adds `H ⪰ 0` through the real embedding.
pub fn add_hermitian_psd(p: &mut ConicProgram, tag: &str, h: &HermExpr) -> Result<()> {
    let s = embed_hermitian_psd(h)?;
    p.add_psd(tag, s);
    Ok(())
}

/// Numeric version of the embedding; rejects non-Hermitian input.
pub fn embed_hermitian_matrix(h: &DMatrix<Complex64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::Dimension("Hermitian embedding needs a square matrix".into()));
    }
    let scale = h.iter().fold(1.0f64, |a, z| a.max(z.norm()));
    for i in 0..n {
        for j in 0..n {
            if (h[(i, j)] - h[(j, i)].conj()).norm() > 1e-12 * scale {
                return Err(Error::InvalidInput(format!("matrix is not Hermitian at ({i}, {j})")));
            }
        }
    }
    Ok(DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let z = h[(r % n, c % n)];
        match (r < n, c < n) {
            (true, true) | (false, false) => z.re,
            (false, true) => z.im,
            (true, false) => -z.im,
        }
    }))
}

/// Real rows of `‖u‖ ≤ t` for complex `u`: `t` followed by `(Re u, Im u)`.
pub fn embed_complex_soc(u: &[CAffine], t: Affine) -> (Affine, Vec<Affine>) {
    let mut rows = Vec::with_capacity(2 * u.len());
    rows.extend(u.iter().map(|e| e.re.clone()));
    rows.extend(u.iter().map(|e| e.im.clone()));
    (t, rows)
}

pub fn add_complex_soc(p: &mut ConicProgram, tag: &str, t: Affine, u: &[CAffine]) {
    let (t, rows) = embed_complex_soc(u, t);
    p.add_soc(tag, t, rows);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve, SolverSettings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_embeds_to_identity() {
        let id = DMatrix::<Complex64>::identity(2, 2);
        assert_eq!(embed_hermitian_matrix(&id).unwrap(), DMatrix::<f64>::identity(4, 4));
    }

    #[test]
    fn off_diagonal_imaginary_example() {
        let h = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(0.0, 0.0)]);
        let e = embed_hermitian_matrix(&h).unwrap();
        let mut ev: Vec<f64> = e.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [-1.0, -1.0, 1.0, 1.0];
        for (a, b) in ev.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(1.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]);
        assert!(embed_hermitian_matrix(&h).is_err());
        let mut e = HermExpr::zeros(1);
        e.set(0, 0, CAffine::constant(c(1.0, 0.5)));
        assert!(embed_hermitian_psd(&e).is_err());
    }

    #[test]
    fn random_min_eigenvalues_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 4;
            let a = DMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let h = (&a + a.adjoint()) * c(0.5, 0.0);
            let lam_c = nalgebra::SymmetricEigen::new(h.clone()).eigenvalues.min();
            let lam_r = embed_hermitian_matrix(&h).unwrap().symmetric_eigenvalues().min();
            assert!((lam_c - lam_r).abs() < 1e-10);
        }
    }

    #[test]
    fn expression_embedding_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let a = DMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = &a + a.adjoint();
        let mut e = HermExpr::zeros(n);
        for i in 0..n {
            for j in i..n {
                e.set(i, j, CAffine::constant(h[(i, j)]));
            }
        }
        let s = embed_hermitian_psd(&e).unwrap().eval(&[]);
        assert!((s - embed_hermitian_matrix(&h).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn complex_soc_scalar_example() {
        let mut p = ConicProgram::new();
        let t = p.add_var("t");
        p.set_objective(Affine::var(t));
        add_complex_soc(&mut p, "soc", Affine::var(t), &[CAffine::constant(c(3.0, 4.0))]);
        let r = solve(&p, &SolverSettings::default());
        assert!(r.is_optimal());
        assert!((r.objective - 5.0).abs() < 1e-7);
        let mut p = ConicProgram::new();
        let t = p.add_var("t");
        p.set_objective(Affine::var(t));
        add_complex_soc(&mut p, "soc", Affine::var(t), &[CAffine::zero()]);
        let r = solve(&p, &SolverSettings::default());
        assert!(r.objective.abs() < 1e-7);
    }

    #[test]
    fn complex_soc_norm_matches_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<CAffine> =
            (0..5).map(|_| CAffine::constant(c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))).collect();
        let (_, rows) = embed_complex_soc(&u, Affine::zero());
        let nr: f64 = rows.iter().map(|r| r.constant.powi(2)).sum::<f64>().sqrt();
        let nc: f64 = u.iter().map(|z| z.eval(&[]).norm_sqr()).sum::<f64>().sqrt();
        assert!((nr - nc).abs() < 1e-12);
    }
}
