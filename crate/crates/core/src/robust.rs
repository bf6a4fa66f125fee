//! Imperfect-CSI formulations. Path-coefficient errors are norm bounded,
//! `‖Δψ_k‖ ≤ ε_k`, and the worst-case SINR constraint becomes an S-lemma LMI
//! in the lifted matrices `X̂_k = B W_k Bᴴ`, which the C7 blocks tie to B.
//!
//! The error is rescaled as `Δψ = ε u` before applying the S-lemma, so the
//! LMI reads `blkdiag(q I, −q − γσ²) − F̆ᴴ X̃ F̆ ⪰ 0` with `F̆ = [ε Gᴴ, Gᴴψ̄]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;

use crate::bnb::{BnbParams, BnbResult, BoundOracle, LowerBound};
use crate::conic::{add_hermitian_psd, solve, Affine, CAffine, ConicProgram, HermExpr, SolverSettings};
use crate::error::{Error, Result};
use crate::model::{
    check_placement, random_feasible_placement, selection_matrix, trust_region_min, Beamformers, DesignSolution,
    DesignStatus, InstanceData, Placement,
};
use crate::perfect::{
    add_placement_constraints, binariness_gap, complex_var, eval_selection, hermitian_var, is_near_binary,
    power_scale, relative_change, round_binary, selection_exprs, solve_checked, threshold_placement, NodeFixings,
    Penalty, PenaltyParams, Solved,
};

/// Per-user data of the robust SINR constraint.
#[derive(Clone, Debug)]
pub struct RobustBlocks {
    /// `G̃_k = [Gᴴ, Gᴴψ̄]`, N×(L+1).
    pub g_tilde: Vec<DMatrix<Complex64>>,
    pub eps: Vec<f64>,
    pub gamma: Vec<f64>,
    pub noise: Vec<f64>,
}

impl RobustBlocks {
    pub fn new(inst: &InstanceData) -> Self {
        let g_tilde = inst
            .channels
            .iter()
            .map(|ch| {
                let gh = ch.frm.adjoint();
                let (n, l) = gh.shape();
                let mut out = DMatrix::zeros(n, l + 1);
                out.view_mut((0, 0), (n, l)).copy_from(&gh);
                out.column_mut(l).copy_from(&(&gh * &ch.pcv));
                out
            })
            .collect();
        Self {
            g_tilde,
            eps: inst.channels.iter().map(|c| c.error_radius).collect(),
            gamma: inst.config.sinr_target.clone(),
            noise: inst.config.noise_power.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.g_tilde.len()
    }

    /// `√(scale/σ_k²) · [ε_k Gᴴ, Gᴴψ̄]`, restricted to `rows` when given.
    pub fn lmi_factor(&self, k: usize, scale: f64, rows: Option<&[usize]>) -> DMatrix<Complex64> {
        let gt = &self.g_tilde[k];
        let l = gt.ncols() - 1;
        let s = (scale / self.noise[k]).sqrt();
        let pick: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..gt.nrows()).collect(),
        };
        DMatrix::from_fn(pick.len(), l + 1, |i, j| {
            let c = if j < l { self.eps[k] * s } else { s };
            gt[(pick[i], j)] * c
        })
    }
}

/// `Fᴴ (Σ_j c_j X_j) F` for Hermitian affine `X_j` of order R and `F` (R×C).
pub fn congruence(f: &DMatrix<Complex64>, terms: &[(&HermExpr, f64)]) -> HermExpr {
    let (r, c) = f.shape();
    let mut out = HermExpr::zeros(c);
    for i in 0..c {
        for j in i..c {
            let mut e = CAffine::zero();
            for (x, cj) in terms {
                for a in 0..r {
                    let fa = f[(a, i)].conj() * *cj;
                    if fa == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    for b in 0..r {
                        let coef = fa * f[(b, j)];
                        if coef.norm_sqr() > 0.0 {
                            e.add_scaled(&x.get(a, b), coef);
                        }
                    }
                }
            }
            e.compact();
            if i == j {
                e = CAffine::real(e.re);
            }
            out.set(i, j, e);
        }
    }
    out
}

/// S-lemma matrix `blkdiag(q I_L, −q − γ) − Fᴴ X̃ F` with
/// `X̃ = γ Σ_{j≠k} X_j − X_k`, everything divided by `σ_k²` (folded into F).
pub fn build_slemma_constraint(f: &DMatrix<Complex64>, x: &[HermExpr], k: usize, gamma: f64, q: &Affine) -> HermExpr {
    let terms: Vec<(&HermExpr, f64)> =
        x.iter().enumerate().map(|(j, xj)| (xj, if j == k { -1.0 } else { gamma })).collect();
    let l = f.ncols() - 1;
    let mut h = congruence(f, &terms);
    for i in 0..=l {
        for j in i..=l {
            let mut e = h.get(i, j).scaled(Complex64::new(-1.0, 0.0));
            if i == j {
                let d = if i < l { q.clone() } else { q.scaled(-1.0) - Affine::constant(gamma) };
                e = CAffine::new(e.re + d, e.im);
            }
            h.set(i, j, e);
        }
    }
    h
}

fn constant_herm(m: &DMatrix<Complex64>) -> HermExpr {
    let n = m.nrows();
    let mut h = HermExpr::zeros(n);
    for i in 0..n {
        h.set(i, i, CAffine::constant(Complex64::new(m[(i, i)].re, 0.0)));
        for j in i + 1..n {
            h.set(i, j, CAffine::constant(m[(i, j)]));
        }
    }
    h
}

/// Largest uniform shift `t` such that the S-lemma LMI of user `k` minus
/// `tI` is feasible for some `q ≥ 0`, at fixed placement and beamformers.
/// Nonnegative exactly when the robust SINR constraint holds.
pub fn slemma_slack(inst: &InstanceData, placement: &[usize], w: &Beamformers, k: usize) -> Result<f64> {
    let blocks = RobustBlocks::new(inst);
    let scale = w.norm_squared();
    if scale == 0.0 {
        return Err(Error::InvalidInput("zero beamformers".into()));
    }
    let wn = w / Complex64::new(scale.sqrt(), 0.0);
    let f = blocks.lmi_factor(k, scale, Some(placement));
    let x: Vec<HermExpr> = (0..wn.ncols())
        .map(|j| {
            let c = wn.column(j);
            constant_herm(&(c * c.adjoint()))
        })
        .collect();
    let mut p = ConicProgram::new();
    let q = p.add_var("q");
    let t = p.add_var("t");
    p.add_nonneg("q", vec![Affine::var(q)]);
    let mut h = build_slemma_constraint(&f, &x, k, blocks.gamma[k], &Affine::var(q));
    for i in 0..h.order() {
        let e = h.get(i, i);
        h.set(i, i, CAffine::new(e.re - Affine::var(t), e.im));
    }
    add_hermitian_psd(&mut p, "slemma", &h)?;
    // keep t bounded so the program always has an optimum
    p.add_nonneg("cap", vec![Affine::constant(10.0 * (1.0 + blocks.gamma[k])) - Affine::var(t)]);
    p.set_objective(Affine::term(t, -1.0));
    let r = solve(&p, &SolverSettings::default());
    if !r.is_usable(1e-6) {
        return Err(Error::Solver(format!("S-lemma check stopped with {:?}", r.status)));
    }
    Ok(r.x[t])
}

/// Worst-case margin (divided by σ²) for lifted beamformers `W_j`.
pub fn worst_case_margin_lifted(inst: &InstanceData, placement: &[usize], w: &[DMatrix<Complex64>], k: usize) -> f64 {
    let ch = &inst.channels[k];
    let gamma = inst.config.sinr_target[k];
    let noise = inst.config.noise_power[k];
    let f = DMatrix::from_fn(ch.frm.nrows(), placement.len(), |l, m| ch.frm[(l, placement[m])]);
    let mut q = DMatrix::<Complex64>::zeros(ch.frm.nrows(), ch.frm.nrows());
    for (j, wj) in w.iter().enumerate() {
        let coef = if j == k { 1.0 } else { -gamma };
        q += &f * wj * f.adjoint() * Complex64::new(coef / noise, 0.0);
    }
    let g = &q * &ch.pcv;
    let nominal = (ch.pcv.adjoint() * &q * &ch.pcv)[(0, 0)].re;
    let (tr, _) = trust_region_min(&q, &g, ch.error_radius);
    nominal + tr - gamma
}

/// Smallest worst-case margin over users of a finished design, using the
/// lifted matrices when the design carries them.
pub fn design_worst_margin(inst: &InstanceData, d: &DesignSolution) -> f64 {
    (0..inst.k())
        .map(|k| match &d.lifted {
            Some(ws) => worst_case_margin_lifted(inst, &d.placement, ws, k),
            None => crate::model::worst_case_margin(inst, &d.placement, &d.w, k),
        })
        .fold(f64::INFINITY, f64::min)
}

/// Principal eigenpair `w = √λ₁ u₁` of a PSD matrix and the ratio `λ₂/λ₁`.
pub fn extract_rank_one(w: &DMatrix<Complex64>) -> (DVector<Complex64>, f64) {
    let n = w.nrows();
    if n == 0 {
        return (DVector::zeros(0), 0.0);
    }
    let herm = (w + w.adjoint()) * Complex64::new(0.5, 0.0);
    let e = SymmetricEigen::new(herm);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let l1 = e.eigenvalues[idx[0]].max(0.0);
    let l2 = if n > 1 { e.eigenvalues[idx[1]].max(0.0) } else { 0.0 };
    let u = e.eigenvectors.column(idx[0]).into_owned();
    // fix the global phase so the largest entry is real and positive
    let big = u.iter().enumerate().fold(0, |bi, (i, z)| if z.norm() > u[bi].norm() { i } else { bi });
    let ph = if u[big].norm() > 0.0 { u[big].conj() / u[big].norm() } else { Complex64::new(1.0, 0.0) };
    let ratio = if l1 > 0.0 { l2 / l1 } else { 0.0 };
    (u * ph * Complex64::new(l1.sqrt(), 0.0), ratio)
}

/// Threshold on `λ₂/λ₁` below which a lifted beamformer counts as rank one.
pub const RANK_ONE_TOL: f64 = 1e-6;

/// Relative headroom added when scaling a design onto the robust boundary,
/// so the trust-region check passes despite its own rounding.
const POLISH_SLACK: f64 = 1e-7;

/// Common power factor that lifts every margin in `margins` to zero, given
/// that margins move as `c·(m + γ) − γ` under a power scale `c`. `None` when
/// some user cannot be fixed by scaling.
fn polish_factor(margins: &[f64], gamma: &[f64]) -> Option<f64> {
    let mut c: f64 = 1.0;
    for (&m, &g) in margins.iter().zip(gamma) {
        if m < 0.0 {
            if m + g <= 0.0 {
                return None;
            }
            c = c.max(g / (m + g) * (1.0 + POLISH_SLACK));
        }
    }
    Some(c)
}

/// Scales beamformers up just enough that every worst-case margin is
/// nonnegative; margins are homogeneous in the common scale factor.
pub fn polish_robust(inst: &InstanceData, placement: &[usize], mut w: Beamformers) -> Beamformers {
    let gamma = &inst.config.sinr_target;
    for _ in 0..4 {
        let m: Vec<f64> = (0..inst.k()).map(|k| crate::model::worst_case_margin(inst, placement, &w, k)).collect();
        match polish_factor(&m, gamma) {
            Some(c) if c > 1.0 => w *= Complex64::new(c.sqrt(), 0.0),
            _ => break,
        }
    }
    w
}

/// [`polish_robust`] for lifted beamformers (scaled by `c` rather than `√c`).
pub fn polish_robust_lifted(inst: &InstanceData, placement: &[usize], mut w: Vec<DMatrix<Complex64>>) -> Vec<DMatrix<Complex64>> {
    let gamma = &inst.config.sinr_target;
    for _ in 0..4 {
        let m: Vec<f64> = (0..inst.k()).map(|k| worst_case_margin_lifted(inst, placement, &w, k)).collect();
        match polish_factor(&m, gamma) {
            Some(c) if c > 1.0 => w.iter_mut().for_each(|x| *x *= Complex64::new(c, 0.0)),
            _ => break,
        }
    }
    w
}

/// Lifted solution of the fixed-placement robust problem (true units).
#[derive(Clone, Debug)]
pub struct RobustFixedSolution {
    pub w: Vec<DMatrix<Complex64>>,
    pub q: Vec<f64>,
    pub radiated: f64,
}

/// Robust SDR at a fixed placement. With B binary, `X̂_k = B W_k Bᴴ` is
/// substituted directly, so the LMI only involves the selected rows of G̃.
pub fn solve_robust_fixed_b_lifted(
    inst: &InstanceData,
    placement: &[usize],
    settings: &SolverSettings,
) -> Result<Option<RobustFixedSolution>> {
    let f = check_placement(inst, placement);
    if !f.is_feasible() {
        return Err(Error::InvalidInput(format!("placement violates {:?}", f.codes())));
    }
    let (m_cnt, k_cnt) = (inst.m(), inst.k());
    let blocks = RobustBlocks::new(inst);
    let sel = crate::model::effective_channels(inst, placement, false);
    if sel.iter().any(|h| h.norm_squared() == 0.0) {
        return Ok(None);
    }
    let scale = power_scale(&sel, &blocks.noise, &blocks.gamma);
    let mut p = ConicProgram::new();
    let w: Vec<HermExpr> = (0..k_cnt).map(|k| hermitian_var(&mut p, &format!("W{k}"), m_cnt)).collect();
    let q0 = p.add_vars("q", k_cnt);
    p.add_nonneg("q", (0..k_cnt).map(|k| Affine::var(q0 + k)).collect());
    for (k, wk) in w.iter().enumerate() {
        add_hermitian_psd(&mut p, &format!("C9[{k}]"), wk)?;
    }
    for k in 0..k_cnt {
        let fk = blocks.lmi_factor(k, scale, Some(placement));
        let h = build_slemma_constraint(&fk, &w, k, blocks.gamma[k], &Affine::var(q0 + k));
        add_hermitian_psd(&mut p, &format!("C1[{k}]"), &h)?;
    }
    let obj = w.iter().fold(Affine::zero(), |acc, wk| (0..m_cnt).fold(acc, |a, m| a + wk.get(m, m).re));
    p.set_objective(obj);
    match solve_checked(&p, settings) {
        Solved::Infeasible => Ok(None),
        Solved::Failed(msg) => Err(Error::Solver(msg)),
        Solved::Ok(r) => {
            let ws: Vec<DMatrix<Complex64>> = w.iter().map(|wk| wk.eval(&r.x) * Complex64::new(scale, 0.0)).collect();
            let radiated = ws.iter().map(|x| x.trace().re).sum();
            let q = (0..k_cnt).map(|k| r.x[q0 + k] * blocks.noise[k] / scale).collect();
            Ok(Some(RobustFixedSolution { w: ws, q, radiated }))
        }
    }
}

/// Turns lifted beamformers into a design: principal eigenvectors when every
/// `W_k` is rank one, or when the extracted vectors still pass the exact
/// worst-case check; otherwise the lifted matrices are kept and the design
/// reports `Σ Tr(W_k)`.
pub fn robust_design(inst: &InstanceData, placement: &[usize], sol: &RobustFixedSolution) -> DesignSolution {
    let (m_cnt, k_cnt) = (inst.m(), inst.k());
    let mut w = DMatrix::zeros(m_cnt, k_cnt);
    let mut residuals = Vec::with_capacity(k_cnt);
    for (k, wk) in sol.w.iter().enumerate() {
        let (v, r) = extract_rank_one(wk);
        w.set_column(k, &v);
        residuals.push(r);
    }
    let w = polish_robust(inst, placement, w);
    let ok = (0..k_cnt).all(|k| crate::model::worst_case_margin(inst, placement, &w, k) >= 0.0);
    if ok {
        let mut d = DesignSolution::new(inst, placement.to_vec(), w, DesignStatus::Feasible);
        d.rank_residuals = residuals;
        d
    } else {
        let lifted = polish_robust_lifted(inst, placement, sol.w.clone());
        DesignSolution::from_lifted(inst, placement.to_vec(), w, lifted, residuals, DesignStatus::Feasible)
    }
}

/// Minimum average power under imperfect CSI at a fixed placement.
pub fn solve_robust_fixed_b(inst: &InstanceData, placement: &[usize]) -> Result<Option<DesignSolution>> {
    solve_robust_fixed_b_with(inst, placement, &SolverSettings::default())
}

pub fn solve_robust_fixed_b_with(
    inst: &InstanceData,
    placement: &[usize],
    settings: &SolverSettings,
) -> Result<Option<DesignSolution>> {
    if inst.channels.iter().all(|ch| ch.error_radius == 0.0) {
        // no uncertainty: the nominal problem is the same problem
        return crate::perfect::solve_fixed_b_with(inst, placement, false, settings);
    }
    Ok(solve_robust_fixed_b_lifted(inst, placement, settings)?.map(|s| robust_design(inst, placement, &s)))
}

#[derive(Clone, Debug)]
pub struct RobustRelaxationOptions {
    pub penalty: Option<Penalty>,
    /// Strengthen with constraints that hold at every binary, rank-one point.
    /// `W_k` and `X̂_k` are then read off a per-element lift `Ω_k ⪰ 0` of
    /// order MN with `Ω_k[(m,n),(m',n')] = b_m[n] b_m'[n'] W_k[m,m']`, whose
    /// zero pattern encodes one position per element, one element per
    /// position and the spacing rule. Also `Ŝ_k[n,n], U_k[n,n] ≤ Σ_m b_m[n]`.
    pub cuts: bool,
    /// Objective value to improve on. With cuts on, adds
    /// `Ω_k[(m,n),(m,n)] ≤ τ b_m[n]` where `τ` bounds `Tr W_k` at any point
    /// cheaper than the incumbent.
    pub incumbent: Option<f64>,
    /// Include the `Y_k` links and the C7 lift blocks. Needs `cuts` when off,
    /// since `W_k` and `X̂_k` are then tied to `B` only through `Ω_k`.
    pub lifts: bool,
}

impl Default for RobustRelaxationOptions {
    fn default() -> Self {
        Self { penalty: None, cuts: true, incumbent: None, lifts: false }
    }
}

/// Per-element lift of one user's beamformer over the node's open entries.
struct ElementLift {
    omega: HermExpr,
    w: HermExpr,
    x_hat: HermExpr,
}

fn element_lift(p: &mut ConicProgram, inst: &InstanceData, fix: &NodeFixings, k: usize) -> ElementLift {
    let (m_cnt, n) = (inst.m(), inst.n());
    let open = |m: usize, i: usize| fix.get(m, i) != Some(false);
    let idx = |m: usize, i: usize| m * n + i;
    let mut omega = HermExpr::zeros(m_cnt * n);
    for m in 0..m_cnt {
        for i in 0..n {
            if open(m, i) {
                let d = p.add_var(format!("Om{k}[{m},{i}]"));
                omega.set(idx(m, i), idx(m, i), CAffine::real(Affine::var(d)));
            }
        }
    }
    for m in 0..m_cnt {
        for m2 in m + 1..m_cnt {
            for i in 0..n {
                for j in 0..n {
                    if i != j && open(m, i) && open(m2, j) && inst.distance[(i, j)] >= inst.config.d_min {
                        let z = complex_var(p, &format!("Om{k}[{m},{i};{m2},{j}]"));
                        omega.set(idx(m, i), idx(m2, j), z);
                    }
                }
            }
        }
    }
    let mut w = HermExpr::zeros(m_cnt);
    for m in 0..m_cnt {
        for m2 in m..m_cnt {
            let mut e = CAffine::zero();
            for i in 0..n {
                for j in 0..n {
                    if m == m2 && i != j {
                        continue;
                    }
                    e.add_scaled(&omega.get(idx(m, i), idx(m2, j)), Complex64::new(1.0, 0.0));
                }
            }
            e.compact();
            w.set(m, m2, e);
        }
    }
    let mut x_hat = HermExpr::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut e = CAffine::zero();
            for m in 0..m_cnt {
                for m2 in 0..m_cnt {
                    if (m == m2) != (i == j) {
                        continue;
                    }
                    e.add_scaled(&omega.get(idx(m, i), idx(m2, j)), Complex64::new(1.0, 0.0));
                }
            }
            e.compact();
            x_hat.set(i, j, e);
        }
    }
    ElementLift { omega, w, x_hat }
}

/// Lowest motion energy any placement inside the node can incur (J).
pub fn min_motion_energy(inst: &InstanceData, fix: &NodeFixings) -> f64 {
    (0..inst.m())
        .map(|m| {
            (0..inst.n())
                .filter(|&i| fix.get(m, i) != Some(false))
                .map(|i| inst.energy[m][i])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

pub struct RobustRelaxation {
    pub program: ConicProgram,
    b: Vec<Vec<Affine>>,
    w: Vec<HermExpr>,
    x_hat: Vec<HermExpr>,
    y: Vec<Vec<Vec<CAffine>>>,
    q0: usize,
    scale: f64,
    noise: Vec<f64>,
    penalty: Option<Affine>,
}

#[derive(Clone, Debug)]
pub struct RobustRelaxedSolution {
    /// N×M relaxed selection.
    pub b: DMatrix<f64>,
    /// Lifted beamformers `W_k` (M×M, W).
    pub w: Vec<DMatrix<Complex64>>,
    /// `X̂_k` (N×N, W).
    pub x_hat: Vec<DMatrix<Complex64>>,
    /// `Y_k` (N×M, W).
    pub y: Vec<DMatrix<Complex64>>,
    pub q: Vec<f64>,
    pub bound: f64,
    pub objective: f64,
    pub iterations: usize,
}

impl RobustRelaxedSolution {
    /// `max_k max(‖X̂_k − B W_k Bᴴ‖_F, ‖Y_k − B W_kᴴ‖_F) / (1 + ‖W_k‖_F)`.
    pub fn lift_residual(&self) -> f64 {
        let bc = self.b.map(|v| Complex64::new(v, 0.0));
        let mut worst: f64 = 0.0;
        for k in 0..self.w.len() {
            let wk = &self.w[k];
            let den = 1.0 + wk.norm();
            let rx = (&self.x_hat[k] - &bc * wk * bc.transpose()).norm() / den;
            worst = worst.max(rx);
            if let Some(yk) = self.y.get(k) {
                worst = worst.max((yk - &bc * wk.adjoint()).norm() / den);
            }
        }
        worst
    }
}

#[derive(Clone, Debug)]
pub enum RobustRelaxOutcome {
    Solved(Box<RobustRelaxedSolution>),
    Infeasible,
    Failed(String),
}

impl RobustRelaxation {
    pub fn solve(&self, settings: &SolverSettings) -> RobustRelaxOutcome {
        match solve_checked(&self.program, settings) {
            Solved::Ok(r) => {
                let s = Complex64::new(self.scale, 0.0);
                let pen = self.penalty.as_ref().map(|e| e.eval(&r.x)).unwrap_or(0.0);
                let y = self
                    .y
                    .iter()
                    .map(|yk| {
                        let (n, m) = (yk.len(), yk.first().map_or(0, |r| r.len()));
                        DMatrix::from_fn(n, m, |i, j| yk[i][j].eval(&r.x) * s)
                    })
                    .collect();
                RobustRelaxOutcome::Solved(Box::new(RobustRelaxedSolution {
                    b: eval_selection(&self.b, &r.x),
                    w: self.w.iter().map(|e| e.eval(&r.x) * s).collect(),
                    x_hat: self.x_hat.iter().map(|e| e.eval(&r.x) * s).collect(),
                    y,
                    q: self.noise.iter().enumerate().map(|(k, nz)| r.x[self.q0 + k] * nz / self.scale).collect(),
                    bound: r.objective - pen,
                    objective: r.objective,
                    iterations: r.iterations,
                }))
            }
            Solved::Infeasible => RobustRelaxOutcome::Infeasible,
            Solved::Failed(m) => RobustRelaxOutcome::Failed(m),
        }
    }
}

pub fn build_robust_relaxation(inst: &InstanceData, fix: &NodeFixings) -> Result<RobustRelaxation> {
    build_robust_relaxation_with(inst, fix, &RobustRelaxationOptions::default())
}

/// SDR of the lifted robust problem over the node's subdomain.
pub fn build_robust_relaxation_with(
    inst: &InstanceData,
    fix: &NodeFixings,
    opts: &RobustRelaxationOptions,
) -> Result<RobustRelaxation> {
    if fix.m() != inst.m() || fix.n() != inst.n() {
        return Err(Error::Dimension("fixings do not match the instance".into()));
    }
    if !opts.lifts && !opts.cuts {
        return Err(Error::InvalidInput("robust relaxation needs lifts or cuts".into()));
    }
    let (m_cnt, n, k_cnt) = (inst.m(), inst.n(), inst.k());
    let c = &inst.config;
    let blocks = RobustBlocks::new(inst);
    let channels: Vec<DVector<Complex64>> = inst.channels.iter().map(|ch| ch.channel.clone()).collect();
    let scale = power_scale(&channels, &c.noise_power, &c.sinr_target);

    let mut p = ConicProgram::new();
    let b = selection_exprs(&mut p, fix);
    let occ: Vec<Affine> = (0..n).map(|i| b.iter().fold(Affine::zero(), |acc, col| acc + col[i].clone())).collect();
    let (w, x_hat, omega): (Vec<HermExpr>, Vec<HermExpr>, Vec<HermExpr>) = if opts.cuts {
        let lifts: Vec<ElementLift> = (0..k_cnt).map(|k| element_lift(&mut p, inst, fix, k)).collect();
        let w = lifts.iter().map(|l| l.w.clone()).collect();
        let x = lifts.iter().map(|l| l.x_hat.clone()).collect();
        (w, x, lifts.into_iter().map(|l| l.omega).collect())
    } else {
        let w = (0..k_cnt).map(|k| hermitian_var(&mut p, &format!("W{k}"), m_cnt)).collect();
        let x = (0..k_cnt).map(|k| hermitian_var(&mut p, &format!("X{k}"), n)).collect();
        (w, x, Vec::new())
    };
    let y_cnt = if opts.lifts { k_cnt } else { 0 };
    let y: Vec<Vec<Vec<CAffine>>> = (0..y_cnt)
        .map(|k| (0..n).map(|i| (0..m_cnt).map(|m| complex_var(&mut p, &format!("Y{k}[{i},{m}]"))).collect()).collect())
        .collect();
    let q0 = p.add_vars("q", k_cnt);
    p.add_nonneg("q", (0..k_cnt).map(|k| Affine::var(q0 + k)).collect());

    let tr_w: Vec<Affine> =
        w.iter().map(|wk| (0..m_cnt).fold(Affine::zero(), |acc, m| acc + wk.get(m, m).re)).collect();
    let mut obj = Affine::zero();
    for t in &tr_w {
        obj.add_scaled(t, c.t_data * scale / c.frame());
    }
    for (m, col) in b.iter().enumerate() {
        for (i, e) in col.iter().enumerate() {
            obj.add_scaled(e, inst.energy[m][i] / c.frame());
        }
    }
    let penalty = opts.penalty.as_ref().map(|pen| pen.affine(&b));
    if let Some(pe) = &penalty {
        obj.add_scaled(pe, 1.0);
    }
    p.set_objective(obj);

    add_placement_constraints(&mut p, inst, &b);

    let one = CAffine::constant(Complex64::new(1.0, 0.0));
    let mut traces = Vec::new();
    let mut cuts = Vec::new();
    for k in 0..k_cnt {
        if opts.lifts {
            let s_hat = hermitian_var(&mut p, &format!("S{k}"), n);
            let t_hat = hermitian_var(&mut p, &format!("T{k}"), n);
            let u = hermitian_var(&mut p, &format!("U{k}"), n);
            let v = hermitian_var(&mut p, &format!("V{k}"), m_cnt);

            // C7a: [[Ŝ, X̂, B], [X̂ᴴ, T̂, Y], [Bᴴ, Yᴴ, I]] ⪰ 0
            let mut h = HermExpr::zeros(2 * n + m_cnt);
            for i in 0..n {
                for j in 0..n {
                    if j >= i {
                        h.set(i, j, s_hat.get(i, j));
                        h.set(n + i, n + j, t_hat.get(i, j));
                    }
                    h.set(i, n + j, x_hat[k].get(i, j));
                }
                for m in 0..m_cnt {
                    h.set(i, 2 * n + m, CAffine::real(b[m][i].clone()));
                    h.set(n + i, 2 * n + m, y[k][i][m].clone());
                }
            }
            for m in 0..m_cnt {
                h.set(2 * n + m, 2 * n + m, one.clone());
            }
            add_hermitian_psd(&mut p, &format!("C7a[{k}]"), &h)?;

            // C7c: [[U, Y, B], [Yᴴ, V, W], [Bᴴ, Wᴴ, I]] ⪰ 0
            let mut h = HermExpr::zeros(n + 2 * m_cnt);
            for i in 0..n {
                for j in i..n {
                    h.set(i, j, u.get(i, j));
                }
                for m in 0..m_cnt {
                    h.set(i, n + m, y[k][i][m].clone());
                    h.set(i, n + m_cnt + m, CAffine::real(b[m][i].clone()));
                }
            }
            for a in 0..m_cnt {
                for bb in 0..m_cnt {
                    if bb >= a {
                        h.set(n + a, n + bb, v.get(a, bb));
                    }
                    h.set(n + a, n + m_cnt + bb, w[k].get(a, bb));
                }
                h.set(n + m_cnt + a, n + m_cnt + a, one.clone());
            }
            add_hermitian_psd(&mut p, &format!("C7c[{k}]"), &h)?;

            // C7b / C7d
            traces.push((0..n).fold(Affine::constant(m_cnt as f64), |acc, i| acc - s_hat.get(i, i).re));
            traces.push((0..n).fold(Affine::constant(m_cnt as f64), |acc, i| acc - u.get(i, i).re));
            if opts.cuts {
                for i in 0..n {
                    cuts.push(occ[i].clone() - s_hat.get(i, i).re);
                    cuts.push(occ[i].clone() - u.get(i, i).re);
                }
            }
        }

        add_hermitian_psd(&mut p, &format!("C9[{k}]"), &w[k])?;

        if opts.cuts {
            add_hermitian_psd(&mut p, &format!("Omega[{k}]"), &omega[k])?;
            if let Some(ub) = opts.incumbent.filter(|v| v.is_finite()) {
                let tau = (ub * c.frame() - min_motion_energy(inst, fix)) / (c.t_data * scale);
                if tau < 0.0 {
                    cuts.push(Affine::constant(tau));
                }
                for (m, col) in b.iter().enumerate() {
                    for (i, e) in col.iter().enumerate() {
                        if fix.get(m, i) != Some(false) {
                            cuts.push(e.scaled(tau.max(0.0)) - omega[k].get(m * n + i, m * n + i).re);
                        }
                    }
                }
            }
        }
    }
    if !traces.is_empty() {
        p.add_nonneg("C7bd", traces);
    }
    if !cuts.is_empty() {
        p.add_nonneg("cuts", cuts);
    }

    for k in 0..k_cnt {
        let f = blocks.lmi_factor(k, scale, None);
        let h = build_slemma_constraint(&f, &x_hat, k, blocks.gamma[k], &Affine::var(q0 + k));
        add_hermitian_psd(&mut p, &format!("C1[{k}]"), &h)?;
    }

    Ok(RobustRelaxation { program: p, b, w, x_hat, y, q0, scale, noise: blocks.noise, penalty })
}

pub fn solve_robust_relaxation(
    inst: &InstanceData,
    fix: &NodeFixings,
    opts: &RobustRelaxationOptions,
    settings: &SolverSettings,
) -> Result<RobustRelaxOutcome> {
    Ok(build_robust_relaxation_with(inst, fix, opts)?.solve(settings))
}

/// Placements drawn when the given start cannot meet the worst-case targets.
pub const START_DRAWS: usize = 16;

/// Penalty SCA on the robust relaxation, started from a feasible placement.
/// A start where the worst-case targets are unattainable is replaced by up to
/// [`START_DRAWS`] placements sampled from `rng`.
pub fn sca_optimize_robust<R: Rng + ?Sized>(
    inst: &InstanceData,
    init: Option<Placement>,
    params: &PenaltyParams,
    settings: &SolverSettings,
    rng: &mut R,
) -> Result<(DesignSolution, crate::perfect::ScaTrace)> {
    let start = std::time::Instant::now();
    let init = match init {
        Some(p) => p,
        None => random_feasible_placement(inst, rng)?,
    };
    if !check_placement(inst, &init).is_feasible() {
        return Err(Error::InvalidInput("initial placement is infeasible".into()));
    }
    let fix = NodeFixings::for_instance(inst)?;
    let mut init = init;
    let mut init_design = solve_robust_fixed_b_with(inst, &init, settings)?;
    // without an attainable start the penalty has no power scale and the
    // relaxation no link between B and W, so move the start
    for _ in 0..START_DRAWS {
        if init_design.is_some() {
            break;
        }
        let p = random_feasible_placement(inst, rng)?;
        init_design = solve_robust_fixed_b_with(inst, &p, settings)?;
        init = p;
    }
    let p_ref = init_design.as_ref().map(|d| d.avg_power).filter(|v| *v > 0.0 && v.is_finite()).unwrap_or(1.0);
    let mut cur = selection_matrix(&init, inst.n());
    let mut mu = params.mu0;
    let mut trace =
        crate::perfect::ScaTrace { objectives: Vec::new(), stage_starts: Vec::new(), final_gap: 0.0, converged: false };
    let mut iterations = 0;
    'stages: for _ in 0..=params.max_decays {
        trace.stage_starts.push(trace.objectives.len());
        for _ in 0..params.max_iter {
            // the penalty only drives B to binary values; the C7 lifts make
            // the relaxation exact there
            let incumbent = init_design.as_ref().map(|d| d.avg_power);
            let opts = RobustRelaxationOptions {
                penalty: Some(Penalty { anchor: cur.clone(), weight: p_ref / mu }),
                lifts: true,
                cuts: incumbent.is_some(),
                incumbent,
            };
            iterations += 1;
            match build_robust_relaxation_with(inst, &fix, &opts)?.solve(settings) {
                RobustRelaxOutcome::Solved(s) => {
                    let change = relative_change(&cur, &s.b);
                    trace.objectives.push(s.objective);
                    cur = s.b.clone();
                    if change <= params.tol {
                        break;
                    }
                }
                RobustRelaxOutcome::Infeasible => {
                    if iterations == 1 && init_design.is_none() {
                        let mut d = DesignSolution::infeasible(inst);
                        d.iterations = iterations;
                        return Ok((d, trace));
                    }
                    break 'stages;
                }
                RobustRelaxOutcome::Failed(_) => break 'stages,
            }
        }
        if is_near_binary(&cur) {
            trace.converged = true;
            break;
        }
        mu /= params.decay;
    }
    trace.final_gap = binariness_gap(&cur);
    let placement = threshold_placement(inst, &cur)
        .or_else(|| round_binary(inst, &cur, &fix, &PenaltyParams::rounding(), settings).ok().and_then(|r| r.placement))
        .unwrap_or_else(|| init.clone());
    let candidate = solve_robust_fixed_b_with(inst, &placement, settings)?;
    let mut design = match (candidate, init_design) {
        (Some(a), Some(b)) => {
            if a.avg_power <= b.avg_power {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => DesignSolution::infeasible(inst),
    };
    design.iterations = iterations;
    design.wall_s = start.elapsed().as_secs_f64();
    Ok((design, trace))
}

/// Bounding oracles for the imperfect-CSI search.
pub struct RobustOracle<'a> {
    pub inst: &'a InstanceData,
    pub settings: SolverSettings,
    pub rounding: PenaltyParams,
}

impl<'a> RobustOracle<'a> {
    pub fn new(inst: &'a InstanceData) -> Self {
        Self { inst, settings: SolverSettings::default(), rounding: PenaltyParams::rounding() }
    }
}

impl BoundOracle for RobustOracle<'_> {
    fn lower(&self, fix: &NodeFixings, incumbent: f64, tight: bool) -> Result<LowerBound> {
        let settings = if tight {
            SolverSettings {
                max_iter: self.settings.max_iter * 2,
                tol_feas: self.settings.tol_feas * 0.1,
                ..self.settings.clone()
            }
        } else {
            self.settings.clone()
        };
        let opts = RobustRelaxationOptions { incumbent: Some(incumbent), ..Default::default() };
        Ok(match solve_robust_relaxation(self.inst, fix, &opts, &settings)? {
            RobustRelaxOutcome::Solved(s) => {
                LowerBound::Bound { value: s.bound.max(0.0), lift_residual: s.lift_residual(), b: s.b }
            }
            RobustRelaxOutcome::Infeasible => LowerBound::Infeasible,
            RobustRelaxOutcome::Failed(m) => LowerBound::Failed(m),
        })
    }

    fn round(&self, b: &DMatrix<f64>, fix: &NodeFixings) -> Result<Option<Placement>> {
        Ok(round_binary(self.inst, b, fix, &self.rounding, &self.settings)?.placement)
    }

    fn upper(&self, placement: &[usize]) -> Result<Option<DesignSolution>> {
        solve_robust_fixed_b_with(self.inst, placement, &self.settings)
    }
}

/// Globally optimal design under imperfect CSI.
pub fn bnb_optimize_robust(inst: &InstanceData, params: &BnbParams) -> Result<BnbResult> {
    crate::bnb::solve(inst, &RobustOracle::new(inst), params)
}
