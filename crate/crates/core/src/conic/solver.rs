//! Homogeneous self-dual primal-dual interior-point method with
//! Nesterov–Todd scaling and Mehrotra predictor-corrector steps.
//!
//! Standard form inside the solver:
//!
//! ```text
//! minimize cᵀx  subject to  Ax = b,  Gx + s = h,  s ∈ K
//! ```
//!
//! with `K` a product of nonnegative, second-order and PSD cones.

use serde::{Deserialize, Serialize};

use super::cones::{dot, norm, Cone, Scaling};
use super::kkt::{Kkt, SparseRows};
use super::program::{ConeKind, ConicProgram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
    /// Stopped early on a numerical breakdown; the best iterate is returned.
    Numerical,
}

#[derive(Clone, Debug)]
pub struct SolverSettings {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub equilibrate: bool,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol_abs: 1e-8, tol_rel: 1e-8, tol_feas: 1e-8, max_iter: 200, equilibrate: true, verbose: false }
    }
}

impl SolverSettings {
    pub fn with_tol(tol_abs: f64, tol_rel: f64, max_iter: usize) -> Self {
        Self { tol_abs, tol_rel, tol_feas: tol_abs.max(1e-10), max_iter, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Primal solution (or certificate direction when dual infeasible).
    pub x: Vec<f64>,
    /// Primal objective including the constant term.
    pub objective: f64,
    pub dual_objective: f64,
    /// Dual value per program row: multipliers of zero rows and cone duals
    /// (svec for PSD) of the others.
    pub duals: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Optimal, or stopped with residuals and relative gap below `tol`.
    pub fn is_usable(&self, tol: f64) -> bool {
        match self.status {
            SolveStatus::Optimal => true,
            SolveStatus::MaxIter | SolveStatus::Numerical => {
                let scale = 1.0 + self.objective.abs();
                self.primal_residual <= tol && self.dual_residual <= tol && self.gap.abs() <= tol * scale
            }
            _ => false,
        }
    }

    pub fn block_duals<'a>(&'a self, program: &ConicProgram, tag: &str) -> Option<&'a [f64]> {
        program.block(tag).map(|b| &self.duals[b.rows()])
    }
}

struct StandardForm {
    n: usize,
    c: Vec<f64>,
    a: SparseRows,
    b: Vec<f64>,
    g: SparseRows,
    h: Vec<f64>,
    cones: Vec<Cone>,
    /// For each program row: (is_equality, index into A or G rows).
    row_map: Vec<(bool, usize)>,
}

fn standard_form(p: &ConicProgram) -> StandardForm {
    let mut sf = StandardForm {
        n: p.n_vars(),
        c: vec![0.0; p.n_vars()],
        a: Vec::new(),
        b: Vec::new(),
        g: Vec::new(),
        h: Vec::new(),
        cones: Vec::new(),
        row_map: vec![(false, 0); p.n_rows()],
    };
    for &(i, v) in &p.objective().terms {
        sf.c[i] += v;
    }
    for blk in p.blocks() {
        if blk.kind == ConeKind::Zero {
            for r in blk.rows() {
                let (row, k) = p.row(r);
                sf.row_map[r] = (true, sf.a.len());
                sf.a.push(row.to_vec());
                sf.b.push(-k);
            }
        } else {
            let start = sf.g.len();
            for r in blk.rows() {
                let (row, k) = p.row(r);
                sf.row_map[r] = (false, sf.g.len());
                sf.g.push(row.iter().map(|&(i, v)| (i, -v)).collect());
                sf.h.push(k);
            }
            sf.cones.push(Cone { kind: blk.kind, start, dim: blk.dim, order: blk.order });
        }
    }
    sf
}

struct Equilibration {
    d: Vec<f64>,
    ea: Vec<f64>,
    eg: Vec<f64>,
    cscale: f64,
}

fn equilibrate(sf: &mut StandardForm, passes: usize) -> Equilibration {
    let n = sf.n;
    let mut d = vec![1.0; n];
    let mut ea = vec![1.0; sf.a.len()];
    let mut eg = vec![1.0; sf.g.len()];
    for _ in 0..passes {
        let mut colmax = vec![0.0f64; n];
        for row in sf.a.iter().chain(sf.g.iter()) {
            for &(c, v) in row {
                colmax[c] = colmax[c].max(v.abs());
            }
        }
        let dc: Vec<f64> = colmax.iter().map(|&m| if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 }).collect();
        let rowmax = |row: &Vec<(usize, f64)>| row.iter().fold(0.0f64, |a, &(c, v)| a.max((v * dc[c]).abs()));
        let ra: Vec<f64> = sf.a.iter().map(rowmax).map(|m| if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 }).collect();
        let mut rg = vec![1.0; sf.g.len()];
        for cone in &sf.cones {
            match cone.kind {
                ConeKind::Nonneg => {
                    for r in cone.range() {
                        let m = rowmax(&sf.g[r]);
                        rg[r] = if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 };
                    }
                }
                _ => {
                    let m = cone.range().map(|r| rowmax(&sf.g[r])).fold(0.0, f64::max);
                    let s = if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 };
                    for r in cone.range() {
                        rg[r] = s;
                    }
                }
            }
        }
        for (r, row) in sf.a.iter_mut().enumerate() {
            for e in row.iter_mut() {
                e.1 *= ra[r] * dc[e.0];
            }
            ea[r] *= ra[r];
        }
        for (r, row) in sf.g.iter_mut().enumerate() {
            for e in row.iter_mut() {
                e.1 *= rg[r] * dc[e.0];
            }
            eg[r] *= rg[r];
        }
        for j in 0..n {
            d[j] *= dc[j];
        }
    }
    for j in 0..n {
        sf.c[j] *= d[j];
    }
    for r in 0..sf.a.len() {
        sf.b[r] *= ea[r];
    }
    for r in 0..sf.g.len() {
        sf.h[r] *= eg[r];
    }
    let cmax = sf.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cscale = if cmax > 0.0 { (1.0 / cmax).clamp(1e-4, 1e4) } else { 1.0 };
    for v in sf.c.iter_mut() {
        *v *= cscale;
    }
    Equilibration { d, ea, eg, cscale }
}

fn matvec(rows: &SparseRows, x: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        out[r] = row.iter().map(|&(c, v)| v * x[c]).sum();
    }
}

fn matvec_t_add(rows: &SparseRows, y: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        let t = y[r];
        if t != 0.0 {
            for &(c, v) in row {
                out[c] += v * t;
            }
        }
    }
}

fn identity_scaling(cone: &Cone) -> Scaling {
    match cone.kind {
        ConeKind::Nonneg => Scaling::Nonneg { w: vec![1.0; cone.dim] },
        ConeKind::Soc => {
            let mut e = vec![0.0; cone.dim];
            e[0] = 1.0;
            Scaling::Soc { eta: 1.0, v: e.clone(), wbar: e }
        }
        ConeKind::Psd => {
            let id = nalgebra::DMatrix::identity(cone.order, cone.order);
            Scaling::Psd { r: id.clone(), rinv: id.clone(), p: id }
        }
        ConeKind::Zero => unreachable!(),
    }
}

/// Unscaled quantities of an iterate, used for termination tests.
struct Check {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    pcost: f64,
    dcost: f64,
    pres: f64,
    dres: f64,
    gap: f64,
}

struct Problem<'a> {
    sf: &'a StandardForm,
    orig: &'a StandardForm,
    eq: &'a Equilibration,
}

impl Problem<'_> {
    fn unscale(&self, x: &[f64], y: &[f64], z: &[f64], s: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let cs = self.eq.cscale;
        let xu: Vec<f64> = x.iter().zip(&self.eq.d).map(|(v, d)| v * d / tau).collect();
        let yu: Vec<f64> = y.iter().zip(&self.eq.ea).map(|(v, e)| v * e / (cs * tau)).collect();
        let zu: Vec<f64> = z.iter().zip(&self.eq.eg).map(|(v, e)| v * e / (cs * tau)).collect();
        let su: Vec<f64> = s.iter().zip(&self.eq.eg).map(|(v, e)| v / (e * tau)).collect();
        (xu, yu, zu, su)
    }

    fn check(&self, x: &[f64], y: &[f64], z: &[f64], s: &[f64], tau: f64) -> Check {
        let o = self.orig;
        let (xu, yu, zu, su) = self.unscale(x, y, z, s, tau);
        let mut ax = vec![0.0; o.a.len()];
        matvec(&o.a, &xu, &mut ax);
        let mut gx = vec![0.0; o.g.len()];
        matvec(&o.g, &xu, &mut gx);
        let pa = ax.iter().zip(&o.b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let pg = (0..o.g.len()).map(|r| (gx[r] + su[r] - o.h[r]).powi(2)).sum::<f64>().sqrt();
        let pres = (pa / (1.0 + norm(&o.b))).max(pg / (1.0 + norm(&o.h)));
        let mut rx = o.c.clone();
        matvec_t_add(&o.a, &yu, &mut rx);
        matvec_t_add(&o.g, &zu, &mut rx);
        let dres = norm(&rx) / (1.0 + norm(&o.c));
        Check {
            pcost: dot(&o.c, &xu),
            dcost: -dot(&o.b, &yu) - dot(&o.h, &zu),
            gap: dot(&su, &zu),
            x: xu,
            y: yu,
            z: zu,
            pres,
            dres,
        }
    }
}

pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> SolveResult {
    let n_rows = program.n_rows();
    let c0 = program.objective().constant;
    if program.trivially_infeasible().is_some() {
        return SolveResult {
            status: SolveStatus::PrimalInfeasible,
            x: vec![0.0; program.n_vars()],
            objective: f64::INFINITY,
            dual_objective: f64::INFINITY,
            duals: vec![0.0; n_rows],
            primal_residual: f64::INFINITY,
            dual_residual: 0.0,
            gap: 0.0,
            iterations: 0,
        };
    }
    let orig = standard_form(program);
    let mut sf = standard_form(program);
    let eq = if settings.equilibrate {
        equilibrate(&mut sf, 12)
    } else {
        Equilibration { d: vec![1.0; sf.n], ea: vec![1.0; sf.a.len()], eg: vec![1.0; sf.g.len()], cscale: 1.0 }
    };
    let prob = Problem { sf: &sf, orig: &orig, eq: &eq };
    let mut out = ipm(&prob, settings);
    out.x.resize(orig.n, 0.0);
    out.y.resize(orig.a.len(), 0.0);
    out.z.resize(orig.g.len(), 0.0);
    out.objective += c0;
    out.dual_objective += c0;
    let mut duals = vec![0.0; n_rows];
    for (r, &(is_eq, k)) in orig.row_map.iter().enumerate() {
        duals[r] = if is_eq { out.y[k] } else { out.z[k] };
    }
    SolveResult {
        status: out.status,
        x: out.x,
        objective: out.objective,
        dual_objective: out.dual_objective,
        duals,
        primal_residual: out.pres,
        dual_residual: out.dres,
        gap: out.gap,
        iterations: out.iterations,
    }
}

struct IpmOutput {
    status: SolveStatus,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    objective: f64,
    dual_objective: f64,
    pres: f64,
    dres: f64,
    gap: f64,
    iterations: usize,
}

fn ipm(prob: &Problem, st: &SolverSettings) -> IpmOutput {
    let sf = prob.sf;
    let (n, p, m) = (sf.n, sf.a.len(), sf.g.len());
    let cones = &sf.cones;
    let nu: usize = cones.iter().map(|c| c.degree()).sum();
    let mut kkt = Kkt::new(n, p, &sf.g, cones);

    // starting point
    let mut scal: Vec<Scaling> = cones.iter().map(identity_scaling).collect();
    if !kkt.factor(&sf.a, &sf.g, cones, &scal) {
        return failure(SolveStatus::Numerical, 0);
    }
    let zero_n = vec![0.0; n];
    let zero_p = vec![0.0; p];
    let zero_m = vec![0.0; m];
    let (mut x, _, zp) = kkt.solve(&sf.a, &sf.g, cones, &scal, &zero_n, &sf.b, &sf.h);
    let mut s: Vec<f64> = zp.iter().map(|v| -v).collect();
    let negc: Vec<f64> = sf.c.iter().map(|v| -v).collect();
    let (_, mut y, mut z) = kkt.solve(&sf.a, &sf.g, cones, &scal, &negc, &zero_p, &zero_m);
    shift_into_cone(cones, &mut s);
    shift_into_cone(cones, &mut z);
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut lam = vec![0.0; m];
    let mut best: Option<(f64, Check)> = None;
    let cnorm = norm(&prob.orig.c).max(1.0);
    let bnorm = norm(&prob.orig.b).max(1.0);
    let hnorm = norm(&prob.orig.h).max(1.0);

    for iter in 0..=st.max_iter {
        let chk = prob.check(&x, &y, &z, &s, tau);
        let relgap = if chk.pcost < 0.0 {
            Some(chk.gap / -chk.pcost)
        } else if chk.dcost > 0.0 {
            Some(chk.gap / chk.dcost)
        } else {
            None
        };
        if st.verbose {
            eprintln!(
                "{iter:3} pcost {:+.8e} dcost {:+.8e} gap {:.2e} pres {:.2e} dres {:.2e} tau {:.2e} kappa {:.2e}",
                chk.pcost, chk.dcost, chk.gap, chk.pres, chk.dres, tau, kappa
            );
        }
        let gap_ok = chk.gap <= st.tol_abs || relgap.is_some_and(|r| r <= st.tol_rel);
        if chk.pres <= st.tol_feas && chk.dres <= st.tol_feas && gap_ok {
            return finish(SolveStatus::Optimal, chk, iter);
        }
        let merit = chk.pres.max(chk.dres).max(chk.gap.abs() / (1.0 + chk.pcost.abs()));
        // infeasibility certificates on the unnormalized iterate
        {
            let (xu, yu, zu, su) = prob.unscale(&x, &y, &z, &s, 1.0);
            let o = prob.orig;
            let hz_by = dot(&o.h, &zu) + dot(&o.b, &yu);
            if hz_by < 0.0 {
                let mut r = vec![0.0; n];
                matvec_t_add(&o.a, &yu, &mut r);
                matvec_t_add(&o.g, &zu, &mut r);
                if norm(&r) / cnorm / -hz_by <= st.tol_feas {
                    let mut c = chk;
                    c.y = yu.iter().map(|v| v / -hz_by).collect();
                    c.z = zu.iter().map(|v| v / -hz_by).collect();
                    return finish(SolveStatus::PrimalInfeasible, c, iter);
                }
            }
            let cx = dot(&o.c, &xu);
            if cx < 0.0 {
                let mut ax = vec![0.0; o.a.len()];
                matvec(&o.a, &xu, &mut ax);
                let mut gx = vec![0.0; o.g.len()];
                matvec(&o.g, &xu, &mut gx);
                for r in 0..gx.len() {
                    gx[r] += su[r];
                }
                let res = (norm(&ax) / bnorm).max(norm(&gx) / hnorm);
                if res / -cx <= st.tol_feas {
                    let mut c = chk;
                    c.x = xu.iter().map(|v| v / -cx).collect();
                    return finish(SolveStatus::DualInfeasible, c, iter);
                }
            }
        }
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, chk));
        }
        if iter == st.max_iter {
            break;
        }

        // scaling
        let mut ok = true;
        for (k, cone) in cones.iter().enumerate() {
            let r = cone.range();
            match Scaling::new(cone, &s[r.clone()], &z[r.clone()], &mut lam[r]) {
                Some(sc) => scal[k] = sc,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || !kkt.factor(&sf.a, &sf.g, cones, &scal) {
            return finish_best(best, SolveStatus::Numerical, iter);
        }
        let mu = (dot(&s, &z) + tau * kappa) / (nu as f64 + 1.0);

        // residuals
        let mut rx: Vec<f64> = sf.c.iter().map(|v| v * tau).collect();
        matvec_t_add(&sf.a, &y, &mut rx);
        matvec_t_add(&sf.g, &z, &mut rx);
        let mut ry = vec![0.0; p];
        matvec(&sf.a, &x, &mut ry);
        for i in 0..p {
            ry[i] = sf.b[i] * tau - ry[i];
        }
        let mut rz = vec![0.0; m];
        matvec(&sf.g, &x, &mut rz);
        for i in 0..m {
            rz[i] = sf.h[i] * tau - rz[i] - s[i];
        }
        let rt = -dot(&sf.c, &x) - dot(&sf.b, &y) - dot(&sf.h, &z) - kappa;

        let (x1, y1, z1) = kkt.solve(&sf.a, &sf.g, cones, &scal, &negc, &sf.b, &sf.h);
        let den = kappa / tau - (dot(&sf.c, &x1) + dot(&sf.b, &y1) + dot(&sf.h, &z1));

        let mut lamsq = vec![0.0; m];
        for cone in cones {
            let r = cone.range();
            cone.jordan(&lam[r.clone()], &lam[r.clone()], &mut lamsq[r]);
        }
        let mut e = vec![0.0; m];
        for cone in cones {
            let r = cone.range();
            cone.unit(&mut e[r]);
        }

        let mut sigma = 0.0;
        let mut corr: Option<(Vec<f64>, f64)> = None;
        let mut step = None;
        for pass in 0..2 {
            let f = 1.0 - sigma;
            let dx: Vec<f64> = rx.iter().map(|v| -f * v).collect();
            let dy: Vec<f64> = ry.iter().map(|v| -f * v).collect();
            let dz: Vec<f64> = rz.iter().map(|v| -f * v).collect();
            let dt = -f * rt;
            let mut ds: Vec<f64> = (0..m).map(|i| -lamsq[i] + sigma * mu * e[i]).collect();
            let mut dk = -tau * kappa + sigma * mu;
            if let Some((c, tk)) = &corr {
                for i in 0..m {
                    ds[i] -= c[i];
                }
                dk -= tk;
            }
            let mut shat = vec![0.0; m];
            for cone in cones {
                let r = cone.range();
                cone.jordan_div(&lam[r.clone()], &ds[r.clone()], &mut shat[r]);
            }
            let mut rhs3 = vec![0.0; m];
            for (k, cone) in cones.iter().enumerate() {
                let r = cone.range();
                scal[k].apply_wt(&shat[r.clone()], &mut rhs3[r]);
            }
            for i in 0..m {
                rhs3[i] = -dz[i] - rhs3[i];
            }
            let mdy: Vec<f64> = dy.iter().map(|v| -v).collect();
            let (x2, y2, z2) = kkt.solve(&sf.a, &sf.g, cones, &scal, &dx, &mdy, &rhs3);
            let dtau = (dt + dk / tau + dot(&sf.c, &x2) + dot(&sf.b, &y2) + dot(&sf.h, &z2)) / den;
            let ddx: Vec<f64> = (0..n).map(|i| x2[i] + dtau * x1[i]).collect();
            let ddy: Vec<f64> = (0..p).map(|i| y2[i] + dtau * y1[i]).collect();
            let ddz: Vec<f64> = (0..m).map(|i| z2[i] + dtau * z1[i]).collect();
            let mut dzt = vec![0.0; m];
            for (k, cone) in cones.iter().enumerate() {
                let r = cone.range();
                scal[k].apply_w(&ddz[r.clone()], &mut dzt[r]);
            }
            let dst: Vec<f64> = (0..m).map(|i| shat[i] - dzt[i]).collect();
            let mut dds = vec![0.0; m];
            for (k, cone) in cones.iter().enumerate() {
                let r = cone.range();
                scal[k].apply_wt(&dst[r.clone()], &mut dds[r]);
            }
            let dkap = (dk - kappa * dtau) / tau;

            let mut amax = f64::INFINITY;
            for cone in cones {
                let r = cone.range();
                amax = amax.min(cone.max_step(&lam[r.clone()], &dst[r.clone()]));
                amax = amax.min(cone.max_step(&lam[r.clone()], &dzt[r]));
            }
            if dtau < 0.0 {
                amax = amax.min(-tau / dtau);
            }
            if dkap < 0.0 {
                amax = amax.min(-kappa / dkap);
            }
            if pass == 0 {
                let aff = amax.min(1.0);
                sigma = (1.0 - aff).powi(3).clamp(0.0, 1.0);
                let mut c = vec![0.0; m];
                for cone in cones {
                    let r = cone.range();
                    cone.jordan(&dst[r.clone()], &dzt[r.clone()], &mut c[r]);
                }
                corr = Some((c, dtau * dkap));
            } else {
                let alpha = (0.99 * amax).min(1.0);
                step = Some((alpha, ddx, ddy, ddz, dds, dtau, dkap));
            }
        }
        let (alpha, ddx, ddy, ddz, dds, dtau, dkap) = step.unwrap();
        if !(alpha > 0.0) || !alpha.is_finite() {
            return finish_best(best, SolveStatus::Numerical, iter);
        }
        for i in 0..n {
            x[i] += alpha * ddx[i];
        }
        for i in 0..p {
            y[i] += alpha * ddy[i];
        }
        for i in 0..m {
            z[i] += alpha * ddz[i];
            s[i] += alpha * dds[i];
        }
        tau += alpha * dtau;
        kappa += alpha * dkap;
        if !(tau > 0.0 && kappa > 0.0) {
            return finish_best(best, SolveStatus::Numerical, iter);
        }
    }
    finish_best(best, SolveStatus::MaxIter, st.max_iter)
}

fn shift_into_cone(cones: &[Cone], v: &mut [f64]) {
    let margin = cones.iter().map(|c| c.interior_margin(&v[c.range()])).fold(f64::INFINITY, f64::min);
    if !margin.is_finite() {
        return;
    }
    let scale = norm(v).max(1.0);
    if margin <= 1e-8 * scale {
        let shift = 1.0 - margin;
        let mut e = vec![0.0; v.len()];
        for c in cones {
            c.unit(&mut e[c.range()]);
        }
        for i in 0..v.len() {
            v[i] += shift * e[i];
        }
    }
}

fn finish(status: SolveStatus, c: Check, iter: usize) -> IpmOutput {
    IpmOutput {
        status,
        objective: c.pcost,
        dual_objective: c.dcost,
        x: c.x,
        y: c.y,
        z: c.z,
        pres: c.pres,
        dres: c.dres,
        gap: c.gap,
        iterations: iter,
    }
}

fn finish_best(best: Option<(f64, Check)>, status: SolveStatus, iter: usize) -> IpmOutput {
    match best {
        Some((_, c)) => finish(status, c, iter),
        None => IpmOutput {
            status,
            x: Vec::new(),
            y: Vec::new(),
            z: Vec::new(),
            objective: f64::NAN,
            dual_objective: f64::NAN,
            pres: f64::INFINITY,
            dres: f64::INFINITY,
            gap: f64::INFINITY,
            iterations: iter,
        },
    }
}

fn failure(status: SolveStatus, iter: usize) -> IpmOutput {
    finish_best(None, status, iter)
}
