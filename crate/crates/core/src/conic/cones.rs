//! Cone primitives and Nesterov–Todd scalings.
//!
//! Vectors for PSD blocks are svec encoded (column-major lower triangle,
//! off-diagonals times √2), so the Euclidean inner product of two svec vectors
//! equals the trace inner product of the matrices.

use nalgebra::DMatrix;

use super::program::{ConeKind, SQRT2};

pub fn svec_len(order: usize) -> usize {
    order * (order + 1) / 2
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / SQRT2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

/// Writes svec of the symmetric part of `m`.
pub(crate) fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            out[k] = if i == j { m[(i, i)] } else { (m[(i, j)] + m[(j, i)]) * 0.5 * SQRT2 };
            k += 1;
        }
    }
}

pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; svec_len(n)];
    svec_into(m, &mut out);
    out
}

/// svec index of diagonal entry `i`.
pub(crate) fn diag_index(n: usize, i: usize) -> usize {
    i * n + i - i * (i + 1) / 2
}

pub(crate) fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Amount by which `v` lies outside the cone (0 when inside).
pub(crate) fn violation(kind: ConeKind, order: usize, v: &[f64]) -> f64 {
    match kind {
        ConeKind::Zero => v.iter().fold(0.0, |a, x| a.max(x.abs())),
        ConeKind::Nonneg => v.iter().fold(0.0, |a, &x| a.max(-x)),
        ConeKind::Soc => (norm(&v[1..]) - v[0]).max(0.0),
        ConeKind::Psd => (-min_eig(&smat(v, order))).max(0.0),
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One self-dual cone inside the stacked inequality rows.
#[derive(Clone, Debug)]
pub(crate) struct Cone {
    pub kind: ConeKind,
    pub start: usize,
    pub dim: usize,
    pub order: usize,
}

impl Cone {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.dim
    }

    pub fn degree(&self) -> usize {
        match self.kind {
            ConeKind::Nonneg => self.dim,
            ConeKind::Soc => 1,
            ConeKind::Psd => self.order,
            ConeKind::Zero => 0,
        }
    }

    pub fn unit(&self, out: &mut [f64]) {
        out.fill(0.0);
        match self.kind {
            ConeKind::Nonneg => out.fill(1.0),
            ConeKind::Soc => out[0] = 1.0,
            ConeKind::Psd => {
                for i in 0..self.order {
                    out[diag_index(self.order, i)] = 1.0;
                }
            }
            ConeKind::Zero => {}
        }
    }

    /// Largest `t` with `v − t·e ∈ cone` (negative when `v` is outside).
    pub fn interior_margin(&self, v: &[f64]) -> f64 {
        match self.kind {
            ConeKind::Nonneg => v.iter().copied().fold(f64::INFINITY, f64::min),
            ConeKind::Soc => v[0] - norm(&v[1..]),
            ConeKind::Psd => min_eig(&smat(v, self.order)),
            ConeKind::Zero => 0.0,
        }
    }

    /// Jordan product `u ∘ v`.
    pub fn jordan(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        match self.kind {
            ConeKind::Nonneg => {
                for i in 0..u.len() {
                    out[i] = u[i] * v[i];
                }
            }
            ConeKind::Soc => {
                out[0] = dot(u, v);
                for i in 1..u.len() {
                    out[i] = u[0] * v[i] + v[0] * u[i];
                }
            }
            ConeKind::Psd => {
                let um = smat(u, self.order);
                let vm = smat(v, self.order);
                let p = &um * &vm;
                let sym = (&p + p.transpose()) * 0.5;
                svec_into(&sym, out);
            }
            ConeKind::Zero => {}
        }
    }

    /// Inverse Jordan product `λ \ v` for a scaled point λ. For PSD blocks λ
    /// must be diagonal.
    pub fn jordan_div(&self, lam: &[f64], v: &[f64], out: &mut [f64]) {
        match self.kind {
            ConeKind::Nonneg => {
                for i in 0..v.len() {
                    out[i] = v[i] / lam[i];
                }
            }
            ConeKind::Soc => {
                let l1 = &lam[1..];
                let det = (lam[0] - norm(l1)) * (lam[0] + norm(l1));
                let x0 = (lam[0] * v[0] - dot(l1, &v[1..])) / det;
                out[0] = x0;
                for i in 1..v.len() {
                    out[i] = (v[i] - x0 * lam[i]) / lam[0];
                }
            }
            ConeKind::Psd => {
                let n = self.order;
                let d: Vec<f64> = (0..n).map(|i| lam[diag_index(n, i)]).collect();
                let mut k = 0;
                for j in 0..n {
                    for i in j..n {
                        out[k] = 2.0 * v[k] / (d[i] + d[j]);
                        k += 1;
                    }
                }
            }
            ConeKind::Zero => {}
        }
    }

    /// Largest step `α` with `lam + α·d` in the cone, for `lam` interior.
    /// Returns `f64::INFINITY` when unbounded.
    pub fn max_step(&self, lam: &[f64], d: &[f64]) -> f64 {
        match self.kind {
            ConeKind::Nonneg => {
                let mut a = f64::INFINITY;
                for i in 0..d.len() {
                    if d[i] < 0.0 {
                        a = a.min(-lam[i] / d[i]);
                    }
                }
                a
            }
            ConeKind::Soc => soc_max_step(lam, d),
            ConeKind::Psd => {
                let n = self.order;
                let mut m = smat(d, n);
                let isq: Vec<f64> = (0..n).map(|i| 1.0 / lam[diag_index(n, i)].sqrt()).collect();
                for j in 0..n {
                    for i in 0..n {
                        m[(i, j)] *= isq[i] * isq[j];
                    }
                }
                let e = min_eig(&m);
                if e < 0.0 {
                    -1.0 / e
                } else {
                    f64::INFINITY
                }
            }
            ConeKind::Zero => f64::INFINITY,
        }
    }
}

fn soc_max_step(x: &[f64], d: &[f64]) -> f64 {
    // f(α) = (x0+αd0)² − ‖x1+αd1‖² = a α² + b α + c, c > 0.
    let a = d[0] * d[0] - dot(&d[1..], &d[1..]);
    let b = 2.0 * (x[0] * d[0] - dot(&x[1..], &d[1..]));
    let c = (x[0] - norm(&x[1..])) * (x[0] + norm(&x[1..]));
    let scale = a.abs().max(b.abs()).max(c.abs());
    if a.abs() <= 1e-14 * scale {
        return if b < 0.0 { -c / b } else { f64::INFINITY };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { f64::INFINITY };
    let mut best = f64::INFINITY;
    for r in [r1, r2] {
        if r > 0.0 && r < best {
            best = r;
        }
    }
    best
}

/// Nesterov–Todd scaling of one cone: `W z = W⁻ᵀ s = λ`.
#[derive(Clone, Debug)]
pub(crate) enum Scaling {
    Nonneg { w: Vec<f64> },
    Soc { eta: f64, v: Vec<f64>, wbar: Vec<f64> },
    Psd {
        r: DMatrix<f64>,
        #[cfg_attr(not(test), allow(dead_code))]
        rinv: DMatrix<f64>,
        p: DMatrix<f64>,
    },
}

impl Scaling {
    /// Computes the scaling and writes λ. Returns `None` when `s` or `z` is
    /// not strictly interior.
    pub fn new(cone: &Cone, s: &[f64], z: &[f64], lam: &mut [f64]) -> Option<Scaling> {
        match cone.kind {
            ConeKind::Nonneg => {
                let mut w = vec![0.0; s.len()];
                for i in 0..s.len() {
                    if !(s[i] > 0.0 && z[i] > 0.0) {
                        return None;
                    }
                    w[i] = (s[i] / z[i]).sqrt();
                    lam[i] = (s[i] * z[i]).sqrt();
                }
                Some(Scaling::Nonneg { w })
            }
            ConeKind::Soc => {
                let ns1 = norm(&s[1..]);
                let nz1 = norm(&z[1..]);
                let sjs = (s[0] - ns1) * (s[0] + ns1);
                let zjz = (z[0] - nz1) * (z[0] + nz1);
                if !(s[0] > ns1 && z[0] > nz1 && sjs > 0.0 && zjz > 0.0) {
                    return None;
                }
                let (ns, nz) = (sjs.sqrt(), zjz.sqrt());
                let sb: Vec<f64> = s.iter().map(|x| x / ns).collect();
                let zb: Vec<f64> = z.iter().map(|x| x / nz).collect();
                let eta = (ns / nz).sqrt();
                let gamma = ((1.0 + dot(&sb, &zb)) / 2.0).sqrt();
                let mut wbar = vec![0.0; s.len()];
                wbar[0] = (sb[0] + zb[0]) / (2.0 * gamma);
                for i in 1..s.len() {
                    wbar[i] = (sb[i] - zb[i]) / (2.0 * gamma);
                }
                let den = (2.0 * (wbar[0] + 1.0)).sqrt();
                let mut v: Vec<f64> = wbar.iter().map(|x| x / den).collect();
                v[0] += 1.0 / den;
                let sc = Scaling::Soc { eta, v, wbar };
                sc.apply_w(z, lam);
                Some(sc)
            }
            ConeKind::Psd => {
                let n = cone.order;
                let sm = smat(s, n);
                let zm = smat(z, n);
                let ls = nalgebra::Cholesky::new(sm)?.unpack();
                let lz = nalgebra::Cholesky::new(zm)?.unpack();
                let prod = lz.transpose() * &ls;
                let svd = nalgebra::SVD::new(prod, true, true);
                let u = svd.u?;
                let vt = svd.v_t?;
                let sv = svd.singular_values;
                if sv.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return None;
                }
                let mut r = &ls * vt.transpose();
                let mut rinv = u.transpose() * lz.transpose();
                for i in 0..n {
                    let f = 1.0 / sv[i].sqrt();
                    r.column_mut(i).scale_mut(f);
                    rinv.row_mut(i).scale_mut(f);
                }
                let p = rinv.transpose() * &rinv;
                lam.fill(0.0);
                for i in 0..n {
                    lam[diag_index(n, i)] = sv[i];
                }
                Some(Scaling::Psd { r, rinv, p })
            }
            ConeKind::Zero => None,
        }
    }

    /// `W x`.
    pub fn apply_w(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Scaling::Nonneg { w } => {
                for i in 0..x.len() {
                    out[i] = w[i] * x[i];
                }
            }
            Scaling::Soc { eta, v, .. } => {
                // η (2 v vᵀ − J) x
                let t = 2.0 * dot(v, x);
                out[0] = eta * (t * v[0] - x[0]);
                for i in 1..x.len() {
                    out[i] = eta * (t * v[i] + x[i]);
                }
            }
            Scaling::Psd { r, .. } => {
                let n = r.nrows();
                let m = r.transpose() * smat(x, n) * r;
                svec_into(&m, out);
            }
        }
    }

    /// `Wᵀ x`.
    pub fn apply_wt(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Scaling::Psd { r, .. } => {
                let n = r.nrows();
                let m = r * smat(x, n) * r.transpose();
                svec_into(&m, out);
            }
            _ => self.apply_w(x, out),
        }
    }

    /// `W⁻ᵀ x`.
    #[cfg(test)]
    pub fn apply_winv_t(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Scaling::Nonneg { w } => {
                for i in 0..x.len() {
                    out[i] = x[i] / w[i];
                }
            }
            Scaling::Soc { eta, v, .. } => {
                // W⁻¹ = η⁻¹ (2 J v vᵀ J − J)
                let t = 2.0 * (v[0] * x[0] - dot(&v[1..], &x[1..]));
                out[0] = (t * v[0] - x[0]) / eta;
                for i in 1..x.len() {
                    out[i] = (-t * v[i] + x[i]) / eta;
                }
            }
            Scaling::Psd { rinv, .. } => {
                let n = rinv.nrows();
                let m = rinv * smat(x, n) * rinv.transpose();
                svec_into(&m, out);
            }
        }
    }

    /// `(WᵀW)⁻¹ x`.
    pub fn apply_wtw_inv(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Scaling::Nonneg { w } => {
                for i in 0..x.len() {
                    out[i] = x[i] / (w[i] * w[i]);
                }
            }
            Scaling::Soc { eta, wbar, .. } => {
                // η⁻² (2 J w̄ w̄ᵀ J − J)
                let t = 2.0 * (wbar[0] * x[0] - dot(&wbar[1..], &x[1..]));
                let e2 = eta * eta;
                out[0] = (t * wbar[0] - x[0]) / e2;
                for i in 1..x.len() {
                    out[i] = (-t * wbar[i] + x[i]) / e2;
                }
            }
            Scaling::Psd { p, .. } => {
                let n = p.nrows();
                let m = p * smat(x, n) * p;
                svec_into(&m, out);
            }
        }
    }

    /// `WᵀW x`.
    pub fn apply_wtw(&self, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; x.len()];
        self.apply_w(x, &mut tmp);
        self.apply_wt(&tmp, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn random_soc(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        v[0] = norm(&v[1..]) + rng.random_range(0.05..1.0);
        v
    }

    #[test]
    fn diag_index_matches_svec_layout() {
        for n in 1..6 {
            let m = DMatrix::<f64>::from_fn(n, n, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
            let v = svec(&m);
            for i in 0..n {
                assert_eq!(v[diag_index(n, i)], (i + 1) as f64);
            }
        }
    }

    #[test]
    fn svec_preserves_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_psd(4, &mut rng);
        let b = random_psd(4, &mut rng);
        let tr = (&a * &b).trace();
        assert!((dot(&svec(&a), &svec(&b)) - tr).abs() < 1e-12);
        assert!((smat(&svec(&a), 4) - &a).norm() < 1e-12);
    }

    fn check_scaling(cone: &Cone, s: &[f64], z: &[f64]) {
        let mut lam = vec![0.0; s.len()];
        let sc = Scaling::new(cone, s, z, &mut lam).expect("interior");
        let mut wz = vec![0.0; s.len()];
        let mut wis = vec![0.0; s.len()];
        sc.apply_w(z, &mut wz);
        sc.apply_winv_t(s, &mut wis);
        for i in 0..s.len() {
            assert!((wz[i] - lam[i]).abs() < 1e-9, "Wz != λ");
            assert!((wis[i] - lam[i]).abs() < 1e-9, "W⁻ᵀs != λ");
        }
        let x: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = vec![0.0; s.len()];
        let mut b = vec![0.0; s.len()];
        sc.apply_wtw(&x, &mut a);
        sc.apply_wtw_inv(&a, &mut b);
        for i in 0..s.len() {
            assert!((b[i] - x[i]).abs() < 1e-8 * (1.0 + x[i].abs()));
        }
        // Wᵀ is the adjoint of W
        let y: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.91).cos()).collect();
        sc.apply_w(&x, &mut a);
        sc.apply_wt(&y, &mut b);
        assert!((dot(&a, &y) - dot(&x, &b)).abs() < 1e-9);
    }

    #[test]
    fn nt_scaling_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lp = Cone { kind: ConeKind::Nonneg, start: 0, dim: 3, order: 3 };
        check_scaling(&lp, &[1.0, 2.0, 0.5], &[0.3, 4.0, 1.0]);
        let soc = Cone { kind: ConeKind::Soc, start: 0, dim: 5, order: 5 };
        for _ in 0..10 {
            let s = random_soc(5, &mut rng);
            let z = random_soc(5, &mut rng);
            check_scaling(&soc, &s, &z);
        }
        let psd = Cone { kind: ConeKind::Psd, start: 0, dim: 10, order: 4 };
        for _ in 0..5 {
            let s = svec(&random_psd(4, &mut rng));
            let z = svec(&random_psd(4, &mut rng));
            check_scaling(&psd, &s, &z);
        }
    }

    #[test]
    fn jordan_div_inverts_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let soc = Cone { kind: ConeKind::Soc, start: 0, dim: 4, order: 4 };
        let lam = random_soc(4, &mut rng);
        let v = [0.3, -1.0, 2.0, 0.5];
        let mut x = [0.0; 4];
        let mut back = [0.0; 4];
        soc.jordan_div(&lam, &v, &mut x);
        soc.jordan(&lam, &x, &mut back);
        for i in 0..4 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
        let psd = Cone { kind: ConeKind::Psd, start: 0, dim: 6, order: 3 };
        let lam = svec(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 0.5])));
        let v = svec(&random_psd(3, &mut rng));
        let mut x = vec![0.0; 6];
        let mut back = vec![0.0; 6];
        psd.jordan_div(&lam, &v, &mut x);
        psd.jordan(&lam, &x, &mut back);
        for i in 0..6 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_lengths_hit_boundary() {
        let soc = Cone { kind: ConeKind::Soc, start: 0, dim: 3, order: 3 };
        let x = [2.0, 0.0, 0.0];
        let d = [-1.0, 1.0, 0.0];
        // (2−α)² = α² → α = 1
        assert!((soc.max_step(&x, &d) - 1.0).abs() < 1e-12);
        assert!(soc.max_step(&x, &[1.0, 0.0, 0.0]).is_infinite());
        let psd = Cone { kind: ConeKind::Psd, start: 0, dim: 3, order: 2 };
        let lam = svec(&DMatrix::identity(2, 2));
        let d = svec(&DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, 1.0]));
        assert!((psd.max_step(&lam, &d) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn margins_and_violation() {
        let psd = Cone { kind: ConeKind::Psd, start: 0, dim: 3, order: 2 };
        let v = svec(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!((psd.interior_margin(&v) + 1.0).abs() < 1e-12);
        assert!((violation(ConeKind::Psd, 2, &v) - 1.0).abs() < 1e-12);
        assert_eq!(violation(ConeKind::Soc, 3, &[5.0, 3.0, 4.0]), 0.0);
    }
}
