//! Perfect-CSI formulations: the lifted convex relaxation used for lower
//! bounds, fixed-placement beamforming, penalty rounding of relaxed
//! selections and the standalone penalty SCA solver.
//!
//! Beamforming variables are carried in units of `√p_s` where `p_s` is a
//! per-instance reference power, and SINR rows are divided by `σ_k`; both keep
//! the conic data near unit scale.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;

use crate::bnb::{BnbParams, BnbResult, BoundOracle, LowerBound};
use crate::conic::{
    add_complex_soc, add_hermitian_psd, solve, Affine, CAffine, ConicProgram, HermExpr, SolveResult, SolveStatus,
    SolverSettings,
};
use crate::error::{Error, Result};
use crate::model::{
    check_placement, effective_channels, placement_from_matrix, random_feasible_placement, sinr_from_channels,
    Beamformers, DesignSolution, DesignStatus, InstanceData, Placement,
};

/// Entries of B that a search node has decided, the rest being free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeFixings {
    m: usize,
    n: usize,
    state: Vec<Option<bool>>,
}

impl NodeFixings {
    pub fn root(m: usize, n: usize) -> Self {
        Self { m, n, state: vec![None; m * n] }
    }

    /// Root fixings for an instance with implied zeros already applied.
    pub fn for_instance(inst: &InstanceData) -> Result<Self> {
        let mut f = Self::root(inst.m(), inst.n());
        f.propagate(inst)?;
        Ok(f)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, m: usize, n: usize) -> Option<bool> {
        self.state[m * self.n + n]
    }

    pub fn is_free(&self, m: usize, n: usize) -> bool {
        self.get(m, n).is_none()
    }

    /// Free `(m, n)` pairs in lexicographic order.
    pub fn free(&self) -> Vec<(usize, usize)> {
        (0..self.m).flat_map(|m| (0..self.n).map(move |n| (m, n))).filter(|&(m, n)| self.is_free(m, n)).collect()
    }

    pub fn determined(&self) -> Vec<((usize, usize), bool)> {
        (0..self.m)
            .flat_map(|m| (0..self.n).map(move |n| (m, n)))
            .filter_map(|(m, n)| self.get(m, n).map(|v| ((m, n), v)))
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.state.iter().filter(|s| s.is_none()).count()
    }

    /// Position of element `m` if its column already holds a 1.
    pub fn assigned(&self, m: usize) -> Option<usize> {
        (0..self.n).find(|&n| self.get(m, n) == Some(true))
    }

    /// Decoded placement once every column holds a 1.
    pub fn placement(&self) -> Option<Placement> {
        (0..self.m).map(|m| self.assigned(m)).collect()
    }

    /// Sets one entry; rejects contradictions and second 1s in a column.
    pub fn fix(&mut self, m: usize, n: usize, value: bool) -> Result<()> {
        if m >= self.m || n >= self.n {
            return Err(Error::Dimension(format!("fixing ({m}, {n}) outside {}×{}", self.m, self.n)));
        }
        match self.get(m, n) {
            Some(v) if v == value => return Ok(()),
            Some(_) => return Err(Error::Infeasible(format!("conflicting fixings at ({m}, {n})"))),
            None => {}
        }
        if value {
            if let Some(other) = self.assigned(m) {
                return Err(Error::Infeasible(format!("element {m} already placed at {other}")));
            }
        }
        self.state[m * self.n + n] = Some(value);
        Ok(())
    }

    /// Closes the fixings under one-hot columns, reachability and minimum
    /// spacing. Fails when some column can no longer hold a 1.
    pub fn propagate(&mut self, inst: &InstanceData) -> Result<()> {
        if self.m != inst.m() || self.n != inst.n() {
            return Err(Error::Dimension("fixings do not match the instance".into()));
        }
        loop {
            let before = self.state.clone();
            for m in 0..self.m {
                for n in 0..self.n {
                    if self.is_free(m, n) && !inst.reachable(m, n) {
                        self.fix(m, n, false)?;
                    }
                }
            }
            for m in 0..self.m {
                if let Some(p) = self.assigned(m) {
                    for n in 0..self.n {
                        if n != p {
                            self.fix(m, n, false)?;
                        }
                    }
                    for m2 in 0..self.m {
                        if m2 == m {
                            continue;
                        }
                        for n in 0..self.n {
                            if inst.distance[(p, n)] < inst.config.d_min - 1e-9 {
                                self.fix(m2, n, false)?;
                            }
                        }
                    }
                }
            }
            for m in 0..self.m {
                let open: Vec<usize> = (0..self.n).filter(|&n| self.get(m, n) != Some(false)).collect();
                match open.len() {
                    0 => return Err(Error::Infeasible(format!("element {m} has no admissible position"))),
                    1 => self.fix(m, open[0], true)?,
                    _ => {}
                }
            }
            if self.state == before {
                return Ok(());
            }
        }
    }

    /// Copy with one more entry fixed and propagation applied.
    pub fn child(&self, inst: &InstanceData, m: usize, n: usize, value: bool) -> Result<Self> {
        let mut c = self.clone();
        c.fix(m, n, value)?;
        c.propagate(inst)?;
        Ok(c)
    }

    /// Whether a binary placement lies in this node's subdomain.
    pub fn contains(&self, placement: &[usize]) -> bool {
        (0..self.m).all(|m| {
            (0..self.n).all(|n| match self.get(m, n) {
                Some(v) => v == (placement[m] == n),
                None => true,
            })
        })
    }
}

/// `B` entries as affine expressions: constants for fixed entries, fresh
/// variables in `[0, 1]` for free ones. Indexed `[m][n]`.
pub(crate) fn selection_exprs(p: &mut ConicProgram, fix: &NodeFixings) -> Vec<Vec<Affine>> {
    let mut bounds = Vec::new();
    let b: Vec<Vec<Affine>> = (0..fix.m())
        .map(|m| {
            (0..fix.n())
                .map(|n| match fix.get(m, n) {
                    Some(v) => Affine::constant(if v { 1.0 } else { 0.0 }),
                    None => {
                        let i = p.add_var(format!("b[{m},{n}]"));
                        bounds.push((i, 0.0, 1.0));
                        Affine::var(i)
                    }
                })
                .collect()
        })
        .collect();
    p.add_bounds("b_box", &bounds);
    b
}

pub(crate) fn eval_selection(b: &[Vec<Affine>], x: &[f64]) -> DMatrix<f64> {
    let m = b.len();
    let n = if m > 0 { b[0].len() } else { 0 };
    DMatrix::from_fn(n, m, |i, j| b[j][i].eval(x))
}

/// Symmetric square root of `[[ηI, −D/2], [−D/2, ηI]]`.
pub(crate) fn c2bar_factor(inst: &InstanceData) -> DMatrix<f64> {
    let n = inst.n();
    let d = (&inst.distance + inst.distance.transpose()) * 0.5;
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, i)] = inst.eta;
        a[(n + i, n + i)] = inst.eta;
        for j in 0..n {
            a[(i, n + j)] = -0.5 * d[(i, j)];
            a[(n + i, j)] = -0.5 * d[(i, j)];
        }
    }
    let e = SymmetricEigen::new(a);
    let sq = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * sq * e.eigenvectors.transpose()
}

/// Spacing (convexified), travel and one-hot constraints on B.
pub(crate) fn add_placement_constraints(p: &mut ConicProgram, inst: &InstanceData, b: &[Vec<Affine>]) {
    let (m_cnt, n) = (inst.m(), inst.n());
    let c = &inst.config;
    let one_hot: Vec<Affine> =
        b.iter().map(|col| col.iter().fold(Affine::constant(-1.0), |acc, e| acc + e.clone())).collect();
    p.add_zero("C5", one_hot);
    let mut travel = Vec::new();
    for (m, col) in b.iter().enumerate() {
        let mut h = Affine::constant(c.d_max_h());
        let mut v = Affine::constant(c.d_max_v());
        for (k, e) in col.iter().enumerate() {
            h.add_scaled(e, -inst.move_h[m][k]);
            v.add_scaled(e, -inst.move_v[m][k]);
        }
        travel.push(h);
        travel.push(v);
    }
    p.add_nonneg("C3", travel);
    if m_cnt < 2 {
        return;
    }
    let rhs = inst.eta * m_cnt as f64 - c.d_min;
    if rhs < 0.0 {
        // no nonnegative quadratic fits below a negative bound
        p.add_nonneg("C2bar", vec![Affine::constant(rhs)]);
        return;
    }
    let s = c2bar_factor(inst);
    let root_eta = inst.eta.sqrt();
    for a in 0..m_cnt {
        for bb in a + 1..m_cnt {
            let mut rows = Vec::with_capacity(m_cnt * n);
            for r in 0..2 * n {
                let mut e = Affine::zero();
                for q in 0..2 * n {
                    let coef = s[(r, q)];
                    if coef != 0.0 {
                        let src = if q < n { &b[a][q] } else { &b[bb][q - n] };
                        e.add_scaled(src, coef);
                    }
                }
                rows.push(e);
            }
            for (j, col) in b.iter().enumerate() {
                if j != a && j != bb {
                    rows.extend(col.iter().map(|e| e.scaled(root_eta)));
                }
            }
            p.add_soc(&format!("C2bar[{a},{bb}]"), Affine::constant(rhs.sqrt()), rows);
        }
    }
}

pub(crate) fn complex_var(p: &mut ConicProgram, name: &str) -> CAffine {
    let re = p.add_var(format!("{name}.re"));
    let im = p.add_var(format!("{name}.im"));
    CAffine::new(Affine::var(re), Affine::var(im))
}

/// Hermitian matrix of fresh variables (real diagonal, complex upper part).
pub(crate) fn hermitian_var(p: &mut ConicProgram, name: &str, order: usize) -> HermExpr {
    let mut h = HermExpr::zeros(order);
    for i in 0..order {
        let d = p.add_var(format!("{name}[{i},{i}]"));
        h.set(i, i, CAffine::real(Affine::var(d)));
        for j in i + 1..order {
            h.set(i, j, complex_var(p, &format!("{name}[{i},{j}]")));
        }
    }
    h
}

pub(crate) fn eval_complex(e: &[Vec<CAffine>], x: &[f64], scale: f64) -> DMatrix<Complex64> {
    let rows = e.len();
    let cols = if rows > 0 { e[0].len() } else { 0 };
    DMatrix::from_fn(rows, cols, |i, j| e[i][j].eval(x) * scale)
}

/// `Σ_n conj(h_n) · x_n`.
pub(crate) fn inner(h: &DVector<Complex64>, x: &[&CAffine]) -> CAffine {
    let mut out = CAffine::zero();
    for (hn, xn) in h.iter().zip(x) {
        if hn.norm_sqr() > 0.0 {
            out.add_scaled(xn, hn.conj());
        }
    }
    out.compact();
    out
}

/// SINR rows for normalized channels: `‖(h̃_kᴴx_j)_{j≠k}, 1‖ ≤ Re(h̃_kᴴx_k)/√γ_k`
/// and `Im(h̃_kᴴx_k) = 0`; `cols[j]` is the j-th beamforming column.
pub(crate) fn add_sinr_constraints(
    p: &mut ConicProgram,
    channels: &[DVector<Complex64>],
    gamma: &[f64],
    cols: &[Vec<&CAffine>],
) {
    for (k, h) in channels.iter().enumerate() {
        let z: Vec<CAffine> = cols.iter().map(|c| inner(h, c)).collect();
        let t = z[k].re.scaled(1.0 / gamma[k].sqrt());
        let mut u: Vec<CAffine> = z.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, e)| e.clone()).collect();
        u.push(CAffine::constant(Complex64::new(1.0, 0.0)));
        add_complex_soc(p, &format!("C1a[{k}]"), t, &u);
        p.add_zero(&format!("C1b[{k}]"), vec![z[k].im.clone()]);
    }
}

/// Reference power `mean_k γ_k σ_k² / max_n |h_k,n|²` (W).
pub fn power_scale(channels: &[DVector<Complex64>], noise: &[f64], gamma: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut cnt = 0;
    for (k, h) in channels.iter().enumerate() {
        let g = h.iter().fold(0.0f64, |a, z| a.max(z.norm_sqr()));
        if g > 0.0 {
            acc += gamma[k] * noise[k] / g;
            cnt += 1;
        }
    }
    if cnt == 0 || !(acc > 0.0) {
        1.0
    } else {
        acc / cnt as f64
    }
}

pub(crate) enum Solved {
    Ok(SolveResult),
    Infeasible,
    Failed(String),
}

/// Solves with one retry at a larger iteration budget.
pub(crate) fn solve_checked(p: &ConicProgram, settings: &SolverSettings) -> Solved {
    let mut s = settings.clone();
    for attempt in 0..2 {
        let r = solve(p, &s);
        match r.status {
            SolveStatus::PrimalInfeasible => return Solved::Infeasible,
            _ if r.is_usable(1e-6) => return Solved::Ok(r),
            _ => {}
        }
        if attempt == 0 {
            s.max_iter = s.max_iter.max(100) * 2;
        } else {
            return Solved::Failed(format!("solver stopped with {:?} after {} iterations", r.status, r.iterations));
        }
    }
    unreachable!()
}

/// Minimum-power beamformers for effective channels `g_k` (received signal
/// `g_kᴴw`), or `None` when the targets cannot be met.
pub fn solve_beamforming(
    g: &[DVector<Complex64>],
    noise: &[f64],
    gamma: &[f64],
    settings: &SolverSettings,
) -> Result<Option<Beamformers>> {
    let k_cnt = g.len();
    if k_cnt == 0 {
        return Err(Error::InvalidInput("no users".into()));
    }
    let m_cnt = g[0].len();
    if g.iter().any(|h| h.norm_squared() == 0.0) {
        return Ok(None);
    }
    let scale = power_scale(g, noise, gamma);
    let mut p = ConicProgram::new();
    let t = p.add_var("power");
    let w: Vec<Vec<CAffine>> =
        (0..m_cnt).map(|m| (0..k_cnt).map(|k| complex_var(&mut p, &format!("w[{m},{k}]"))).collect()).collect();
    let mut rows = Vec::new();
    for row in &w {
        for e in row {
            rows.push(e.re.clone());
            rows.push(e.im.clone());
        }
    }
    p.add_rotated_soc("power", Affine::var(t), Affine::constant(0.5), rows);
    let gn: Vec<DVector<Complex64>> =
        g.iter().enumerate().map(|(k, h)| h * Complex64::new((scale / noise[k]).sqrt(), 0.0)).collect();
    let cols: Vec<Vec<&CAffine>> = (0..k_cnt).map(|k| (0..m_cnt).map(|m| &w[m][k]).collect()).collect();
    add_sinr_constraints(&mut p, &gn, gamma, &cols);
    p.set_objective(Affine::var(t));
    match solve_checked(&p, settings) {
        Solved::Infeasible => Ok(None),
        Solved::Failed(msg) => Err(Error::Solver(msg)),
        Solved::Ok(r) => {
            let w = eval_complex(&w, &r.x, scale.sqrt());
            Ok(Some(align_phases(g, polish_sinr(g, w, noise, gamma))))
        }
    }
}

/// Rotates each column so that `g_kᴴw_k` is real and nonnegative. Powers and
/// SINRs are unchanged.
pub fn align_phases(g: &[DVector<Complex64>], mut w: Beamformers) -> Beamformers {
    for (k, gk) in g.iter().enumerate().take(w.ncols()) {
        let z = gk.dotc(&w.column(k));
        if z.norm() > 0.0 {
            let rot = z.conj() / z.norm();
            w.column_mut(k).iter_mut().for_each(|v| *v *= rot);
        }
    }
    w
}

/// Scales all beamformers up just enough that every SINR target holds when
/// the solver returned a point a hair outside the feasible set.
pub fn polish_sinr(g: &[DVector<Complex64>], w: Beamformers, noise: &[f64], gamma: &[f64]) -> Beamformers {
    let mut c2: f64 = 1.0;
    for k in 0..g.len() {
        let gains: Vec<f64> = (0..w.ncols()).map(|j| g[k].dotc(&w.column(j)).norm_sqr()).collect();
        let interf: f64 = gains.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
        let excess = gains[k] - gamma[k] * interf;
        if gains[k] / (interf + noise[k]) < gamma[k] && excess > 0.0 {
            c2 = c2.max(gamma[k] * noise[k] / excess);
        }
    }
    if c2 > 1.0 {
        &w * Complex64::new((c2 * (1.0 + 1e-12)).sqrt(), 0.0)
    } else {
        w
    }
}

/// Minimum average power for a fixed feasible placement.
pub fn solve_fixed_b(inst: &InstanceData, placement: &[usize]) -> Result<Option<DesignSolution>> {
    solve_fixed_b_with(inst, placement, false, &SolverSettings::default())
}

/// [`solve_fixed_b`] with optional mutual coupling in the SINR model.
pub fn solve_fixed_b_with(
    inst: &InstanceData,
    placement: &[usize],
    coupling: bool,
    settings: &SolverSettings,
) -> Result<Option<DesignSolution>> {
    let f = check_placement(inst, placement);
    if !f.is_feasible() {
        return Err(Error::InvalidInput(format!("placement violates {:?}", f.codes())));
    }
    let g = effective_channels(inst, placement, coupling);
    let w = solve_beamforming(&g, &inst.config.noise_power, &inst.config.sinr_target, settings)?;
    Ok(w.map(|w| DesignSolution::new(inst, placement.to_vec(), w, DesignStatus::Feasible)))
}

/// Linearized binariness penalty `weight · Σ (b − 2 b̄ b + b̄²)` around `anchor`.
#[derive(Clone, Debug)]
pub struct Penalty {
    /// N×M anchor `B^(j)`.
    pub anchor: DMatrix<f64>,
    pub weight: f64,
}

impl Penalty {
    pub(crate) fn affine(&self, b: &[Vec<Affine>]) -> Affine {
        let mut e = Affine::zero();
        for (m, col) in b.iter().enumerate() {
            for (n, bn) in col.iter().enumerate() {
                let a = self.anchor[(n, m)];
                e.add_scaled(bn, self.weight * (1.0 - 2.0 * a));
                e.constant += self.weight * a * a;
            }
        }
        e.compact();
        e
    }
}

/// `Σ (b − b²)`, zero exactly for binary matrices.
pub fn binariness_gap(b: &DMatrix<f64>) -> f64 {
    b.iter().map(|&v| v - v * v).sum()
}

pub fn is_near_binary(b: &DMatrix<f64>) -> bool {
    b.iter().all(|&v| !(v > 0.01 && v < 0.99))
}

#[derive(Clone, Debug)]
pub struct RelaxationOptions {
    /// Route SINR through the coupled lift `X_MC = diag(Σb)·C·X`.
    pub coupling: bool,
    pub penalty: Option<Penalty>,
    /// Add the valid inequalities `Tr V ≤ ‖W‖²` and the occupancy
    /// perspective rows `‖x_n‖² ≤ q_n Σ_m b_m[n]`, `Σ q_n ≤ ‖W‖²`. Both hold at
    /// every binary point, so bounds stay valid while fractional selections
    /// can no longer spread X freely.
    pub cuts: bool,
}

impl Default for RelaxationOptions {
    fn default() -> Self {
        Self { coupling: false, penalty: None, cuts: true }
    }
}

/// Lifted relaxation with handles to read the solution back.
pub struct Relaxation {
    pub program: ConicProgram,
    b: Vec<Vec<Affine>>,
    x: Vec<Vec<CAffine>>,
    x_mc: Option<Vec<Vec<CAffine>>>,
    w: Vec<Vec<CAffine>>,
    u: HermExpr,
    scale: f64,
    penalty: Option<Affine>,
}

#[derive(Clone, Debug)]
pub struct RelaxedSolution {
    /// N×M relaxed selection.
    pub b: DMatrix<f64>,
    pub w: Beamformers,
    pub x: DMatrix<Complex64>,
    pub x_mc: Option<DMatrix<Complex64>>,
    pub u: DMatrix<Complex64>,
    /// Program objective without any penalty term (a lower bound when no
    /// penalty was applied).
    pub bound: f64,
    /// Program objective including the penalty term.
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub enum RelaxOutcome {
    Solved(Box<RelaxedSolution>),
    Infeasible,
    Failed(String),
}

impl Relaxation {
    pub fn extract(&self, r: &SolveResult) -> RelaxedSolution {
        let s = self.scale.sqrt();
        let pen = self.penalty.as_ref().map(|e| e.eval(&r.x)).unwrap_or(0.0);
        RelaxedSolution {
            b: eval_selection(&self.b, &r.x),
            w: eval_complex(&self.w, &r.x, s),
            x: eval_complex(&self.x, &r.x, s),
            x_mc: self.x_mc.as_ref().map(|e| eval_complex(e, &r.x, s)),
            u: self.u.eval(&r.x),
            bound: r.objective - pen,
            objective: r.objective,
            iterations: r.iterations,
        }
    }

    pub fn solve(&self, settings: &SolverSettings) -> RelaxOutcome {
        match solve_checked(&self.program, settings) {
            Solved::Ok(r) => RelaxOutcome::Solved(Box::new(self.extract(&r))),
            Solved::Infeasible => RelaxOutcome::Infeasible,
            Solved::Failed(m) => RelaxOutcome::Failed(m),
        }
    }
}

/// Relaxation over the node's subdomain: free entries of B range over
/// `[0, 1]`, fixed entries are constants.
pub fn build_relaxation(inst: &InstanceData, fixings: &NodeFixings) -> Result<Relaxation> {
    build_relaxation_with(inst, fixings, &RelaxationOptions::default())
}

pub fn build_relaxation_with(inst: &InstanceData, fix: &NodeFixings, opts: &RelaxationOptions) -> Result<Relaxation> {
    if fix.m() != inst.m() || fix.n() != inst.n() {
        return Err(Error::Dimension("fixings do not match the instance".into()));
    }
    for m in 0..fix.m() {
        let ones = (0..fix.n()).filter(|&n| fix.get(m, n) == Some(true)).count();
        if ones > 1 {
            return Err(Error::InvalidInput(format!("column {m} fixed to more than one position")));
        }
    }
    if opts.coupling && inst.coupling.is_none() {
        return Err(Error::InvalidInput("coupling requested but not configured".into()));
    }
    let (m_cnt, n, k_cnt) = (inst.m(), inst.n(), inst.k());
    let c = &inst.config;
    let channels: Vec<DVector<Complex64>> = inst.channels.iter().map(|ch| ch.channel.clone()).collect();
    let scale = power_scale(&channels, &c.noise_power, &c.sinr_target);

    let mut p = ConicProgram::new();
    let b = selection_exprs(&mut p, fix);
    let x: Vec<Vec<CAffine>> =
        (0..n).map(|i| (0..k_cnt).map(|k| complex_var(&mut p, &format!("x[{i},{k}]"))).collect()).collect();
    let w: Vec<Vec<CAffine>> =
        (0..m_cnt).map(|m| (0..k_cnt).map(|k| complex_var(&mut p, &format!("w[{m},{k}]"))).collect()).collect();
    let u = hermitian_var(&mut p, "U", n);
    let v = hermitian_var(&mut p, "V", k_cnt);
    let t = p.add_var("power");

    // objective: (Σ e_mᵀ b_m + T_Data · p_s · t) / (T_MA + T_Data)
    let mut obj = Affine::term(t, c.t_data * scale / c.frame());
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

    let mut rows = Vec::new();
    for row in &w {
        for e in row {
            rows.push(e.re.clone());
            rows.push(e.im.clone());
        }
    }
    p.add_rotated_soc("power", Affine::var(t), Affine::constant(0.5), rows);

    add_placement_constraints(&mut p, inst, &b);

    // C6a: [[U, X, B], [Xᴴ, V, Wᴴ], [Bᴴ, W, I]] ⪰ 0 and Tr U ≤ M
    let order = n + k_cnt + m_cnt;
    let mut h = HermExpr::zeros(order);
    for i in 0..n {
        for j in i..n {
            h.set(i, j, u.get(i, j));
        }
        for k in 0..k_cnt {
            h.set(i, n + k, x[i][k].clone());
        }
        for m in 0..m_cnt {
            h.set(i, n + k_cnt + m, CAffine::real(b[m][i].clone()));
        }
    }
    for k in 0..k_cnt {
        for k2 in k..k_cnt {
            h.set(n + k, n + k2, v.get(k, k2));
        }
        for m in 0..m_cnt {
            h.set(n + k, n + k_cnt + m, w[m][k].conj());
        }
    }
    for m in 0..m_cnt {
        h.set(n + k_cnt + m, n + k_cnt + m, CAffine::constant(Complex64::new(1.0, 0.0)));
    }
    add_hermitian_psd(&mut p, "C6a", &h)?;
    let tr = (0..n).fold(Affine::constant(m_cnt as f64), |acc, i| acc - u.get(i, i).re);
    p.add_nonneg("C6b", vec![tr]);

    if opts.cuts {
        let tr_v = (0..k_cnt).fold(Affine::var(t), |acc, k| acc - v.get(k, k).re);
        let q0 = p.add_vars("q", n);
        let mut budget = Affine::var(t);
        for (i, xi) in x.iter().enumerate() {
            let occ = b.iter().fold(Affine::zero(), |acc, col| acc + col[i].clone());
            let rows: Vec<Affine> = xi.iter().flat_map(|e| [e.re.clone(), e.im.clone()]).collect();
            p.add_rotated_soc(&format!("occupancy[{i}]"), Affine::var(q0 + i), occ * 0.5, rows);
            budget -= &Affine::var(q0 + i);
        }
        p.add_nonneg("cuts", vec![tr_v, budget]);
    }

    let gn: Vec<DVector<Complex64>> = channels
        .iter()
        .enumerate()
        .map(|(k, hk)| hk * Complex64::new((scale / c.noise_power[k]).sqrt(), 0.0))
        .collect();

    let x_mc = if opts.coupling {
        let cm = inst.coupling.as_ref().unwrap();
        let x_mc: Vec<Vec<CAffine>> =
            (0..n).map(|i| (0..k_cnt).map(|k| complex_var(&mut p, &format!("xmc[{i},{k}]"))).collect()).collect();
        let u_mc = hermitian_var(&mut p, "Umc", n);
        let v_mc = hermitian_var(&mut p, "Vmc", k_cnt);
        // C·X, N×K
        let cx: Vec<Vec<CAffine>> = (0..n)
            .map(|i| {
                (0..k_cnt)
                    .map(|k| {
                        let mut e = CAffine::zero();
                        for (j, xj) in x.iter().enumerate() {
                            e.add_scaled(&xj[k], cm[(i, j)]);
                        }
                        e.compact();
                        e
                    })
                    .collect()
            })
            .collect();
        // [[U_MC, X_MC, diag(Σb)], [X_MCᴴ, V_MC, (CX)ᴴ], [diag(Σb), CX, I_N]] ⪰ 0
        let order = 2 * n + k_cnt;
        let mut h = HermExpr::zeros(order);
        for i in 0..n {
            for j in i..n {
                h.set(i, j, u_mc.get(i, j));
            }
            for k in 0..k_cnt {
                h.set(i, n + k, x_mc[i][k].clone());
            }
            let occ = b.iter().fold(Affine::zero(), |acc, col| acc + col[i].clone());
            h.set(i, n + k_cnt + i, CAffine::real(occ));
        }
        for k in 0..k_cnt {
            for k2 in k..k_cnt {
                h.set(n + k, n + k2, v_mc.get(k, k2));
            }
            for i in 0..n {
                h.set(n + k, n + k_cnt + i, cx[i][k].conj());
            }
        }
        for i in 0..n {
            h.set(n + k_cnt + i, n + k_cnt + i, CAffine::constant(Complex64::new(1.0, 0.0)));
        }
        add_hermitian_psd(&mut p, "C6c", &h)?;
        let tr = (0..n).fold(Affine::constant(m_cnt as f64), |acc, i| acc - u_mc.get(i, i).re);
        p.add_nonneg("C6d", vec![tr]);
        Some(x_mc)
    } else {
        None
    };

    {
        let src = x_mc.as_ref().unwrap_or(&x);
        let cols: Vec<Vec<&CAffine>> = (0..k_cnt).map(|k| (0..n).map(|i| &src[i][k]).collect()).collect();
        add_sinr_constraints(&mut p, &gn, &c.sinr_target, &cols);
    }

    Ok(Relaxation { program: p, b, x, x_mc, w, u, scale, penalty })
}

/// Builds and solves the node relaxation.
pub fn solve_relaxation(
    inst: &InstanceData,
    fix: &NodeFixings,
    opts: &RelaxationOptions,
    settings: &SolverSettings,
) -> Result<RelaxOutcome> {
    Ok(build_relaxation_with(inst, fix, opts)?.solve(settings))
}

#[derive(Clone, Debug)]
pub struct PenaltyParams {
    /// Initial penalty factor; the penalty weight is `scale / μ`.
    pub mu0: f64,
    /// Divisor applied to μ whenever a stage converges to a non-binary point.
    pub decay: f64,
    pub max_decays: usize,
    /// Relative Frobenius change that ends a stage.
    pub tol: f64,
    /// Iteration cap per stage.
    pub max_iter: usize,
}

impl PenaltyParams {
    pub fn rounding() -> Self {
        Self { mu0: 1e-2, decay: 5.0, max_decays: 5, tol: 1e-4, max_iter: 50 }
    }

    pub fn sca() -> Self {
        Self { mu0: 10.0, decay: 5.0, max_decays: 5, tol: 1e-4, max_iter: 50 }
    }
}

/// Relative change `‖B_prev − B‖_F / ‖B_prev‖_F`.
pub fn relative_change(prev: &DMatrix<f64>, next: &DMatrix<f64>) -> f64 {
    let d = (prev - next).norm();
    let s = prev.norm();
    if s > 0.0 {
        d / s
    } else {
        d
    }
}

/// Thresholds at 0.5 and keeps the result only if it is a valid placement.
pub fn threshold_placement(inst: &InstanceData, b: &DMatrix<f64>) -> Option<Placement> {
    let hard = b.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let p = placement_from_matrix(&hard, 0.0)?;
    check_placement(inst, &p).is_feasible().then_some(p)
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub placement: Option<Placement>,
    pub iterations: usize,
}

/// Penalty rounding of a relaxed selection to a nearby feasible binary one,
/// restricted to the node's subdomain.
pub fn round_binary(
    inst: &InstanceData,
    b_relaxed: &DMatrix<f64>,
    fix: &NodeFixings,
    params: &PenaltyParams,
    settings: &SolverSettings,
) -> Result<RoundOutcome> {
    let (m_cnt, n) = (inst.m(), inst.n());
    if b_relaxed.nrows() != n || b_relaxed.ncols() != m_cnt {
        return Err(Error::Dimension("relaxed selection must be N×M".into()));
    }
    let mut cur = b_relaxed.clone();
    for ((m, i), v) in fix.determined() {
        cur[(i, m)] = if v { 1.0 } else { 0.0 };
    }
    let mut mu = params.mu0;
    let mut iterations = 0;
    for _stage in 0..=params.max_decays {
        for _ in 0..params.max_iter {
            let mut p = ConicProgram::new();
            let b = selection_exprs(&mut p, fix);
            add_placement_constraints(&mut p, inst, &b);
            let tau = p.add_var("dist");
            let mut rows = Vec::with_capacity(n * m_cnt);
            for (m, col) in b.iter().enumerate() {
                for (i, e) in col.iter().enumerate() {
                    rows.push(e.clone() - Affine::constant(b_relaxed[(i, m)]));
                }
            }
            p.add_soc("dist", Affine::var(tau), rows);
            let pen = Penalty { anchor: cur.clone(), weight: 1.0 / mu };
            p.set_objective(Affine::var(tau) + pen.affine(&b));
            iterations += 1;
            let r = match solve_checked(&p, settings) {
                Solved::Ok(r) => r,
                Solved::Infeasible => return Ok(RoundOutcome { placement: None, iterations }),
                Solved::Failed(_) => return Ok(RoundOutcome { placement: None, iterations }),
            };
            let next = eval_selection(&b, &r.x);
            let change = relative_change(&cur, &next);
            cur = next;
            if change <= params.tol {
                break;
            }
        }
        if is_near_binary(&cur) {
            let placement = threshold_placement(inst, &cur);
            return Ok(RoundOutcome { placement, iterations });
        }
        mu /= params.decay;
    }
    Ok(RoundOutcome { placement: None, iterations })
}

#[derive(Clone, Debug)]
pub struct ScaTrace {
    /// Penalized objective after every iteration.
    pub objectives: Vec<f64>,
    /// Iteration index at which each penalty stage started.
    pub stage_starts: Vec<usize>,
    /// `Σ (b − b²)` at the last iterate.
    pub final_gap: f64,
    pub converged: bool,
}

/// Penalty SCA over the full lifted formulation, started from a feasible
/// binary placement (sampled from `rng` when absent).
pub fn sca_optimize<R: Rng + ?Sized>(
    inst: &InstanceData,
    init: Option<Placement>,
    params: &PenaltyParams,
    settings: &SolverSettings,
    rng: &mut R,
) -> Result<(DesignSolution, ScaTrace)> {
    let start = std::time::Instant::now();
    let init = match init {
        Some(p) => p,
        None => random_feasible_placement(inst, rng)?,
    };
    if !check_placement(inst, &init).is_feasible() {
        return Err(Error::InvalidInput("initial placement is infeasible".into()));
    }
    let fix = NodeFixings::for_instance(inst)?;
    let init_design = solve_fixed_b(inst, &init)?;
    let p_ref = init_design.as_ref().map(|d| d.avg_power).filter(|v| *v > 0.0 && v.is_finite()).unwrap_or(1.0);
    let mut cur = crate::model::selection_matrix(&init, inst.n());
    let mut mu = params.mu0;
    let mut trace = ScaTrace { objectives: Vec::new(), stage_starts: Vec::new(), final_gap: 0.0, converged: false };
    let mut iterations = 0;
    'stages: for _stage in 0..=params.max_decays {
        trace.stage_starts.push(trace.objectives.len());
        for _ in 0..params.max_iter {
            let opts =
                RelaxationOptions { penalty: Some(Penalty { anchor: cur.clone(), weight: p_ref / mu }), ..Default::default() };
            iterations += 1;
            match build_relaxation_with(inst, &fix, &opts)?.solve(settings) {
                RelaxOutcome::Solved(s) => {
                    let change = relative_change(&cur, &s.b);
                    trace.objectives.push(s.objective);
                    cur = s.b.clone();
                    if change <= params.tol {
                        break;
                    }
                }
                RelaxOutcome::Infeasible => {
                    if iterations == 1 {
                        let mut d = DesignSolution::infeasible(inst);
                        d.iterations = iterations;
                        return Ok((d, trace));
                    }
                    break 'stages;
                }
                RelaxOutcome::Failed(_) => break 'stages,
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
        .unwrap_or(init);
    let mut design = match solve_fixed_b(inst, &placement)? {
        Some(d) => d,
        None => match init_design {
            Some(d) => d,
            None => DesignSolution::infeasible(inst),
        },
    };
    design.iterations = iterations;
    design.wall_s = start.elapsed().as_secs_f64();
    Ok((design, trace))
}

/// Nominal SINR check of a finished design against its own channels.
pub fn design_margin(inst: &InstanceData, d: &DesignSolution, coupling: bool) -> f64 {
    let g = effective_channels(inst, &d.placement, coupling);
    sinr_from_channels(&g, &d.w, &inst.config.noise_power)
        .iter()
        .zip(&inst.config.sinr_target)
        .map(|(s, gm)| s / gm - 1.0)
        .fold(f64::INFINITY, f64::min)
}

/// `‖X − BW‖_F / (1 + ‖W‖_F)`, zero exactly when the lift is consistent.
pub fn lift_residual(s: &RelaxedSolution) -> f64 {
    let bc = s.b.map(|v| Complex64::new(v, 0.0));
    let bw = &bc * &s.w;
    (&s.x - &bw).norm() / (1.0 + s.w.norm())
}

/// Bounding oracles for the perfect-CSI search.
pub struct PerfectOracle<'a> {
    pub inst: &'a InstanceData,
    pub coupling: bool,
    pub settings: SolverSettings,
    pub rounding: PenaltyParams,
}

impl<'a> PerfectOracle<'a> {
    pub fn new(inst: &'a InstanceData, coupling: bool) -> Self {
        Self { inst, coupling, settings: SolverSettings::default(), rounding: PenaltyParams::rounding() }
    }
}

impl BoundOracle for PerfectOracle<'_> {
    fn lower(&self, fix: &NodeFixings, _incumbent: f64, tight: bool) -> Result<LowerBound> {
        let settings = if tight {
            SolverSettings { max_iter: self.settings.max_iter * 2, tol_feas: self.settings.tol_feas * 0.1, ..self.settings.clone() }
        } else {
            self.settings.clone()
        };
        let opts = RelaxationOptions { coupling: self.coupling, ..Default::default() };
        Ok(match solve_relaxation(self.inst, fix, &opts, &settings)? {
            RelaxOutcome::Solved(s) => {
                LowerBound::Bound { value: s.bound.max(0.0), lift_residual: lift_residual(&s), b: s.b }
            }
            RelaxOutcome::Infeasible => LowerBound::Infeasible,
            RelaxOutcome::Failed(m) => LowerBound::Failed(m),
        })
    }

    fn round(&self, b: &DMatrix<f64>, fix: &NodeFixings) -> Result<Option<Placement>> {
        Ok(round_binary(self.inst, b, fix, &self.rounding, &self.settings)?.placement)
    }

    fn upper(&self, placement: &[usize]) -> Result<Option<DesignSolution>> {
        solve_fixed_b_with(self.inst, placement, self.coupling, &self.settings)
    }
}

/// Globally optimal design under perfect CSI.
pub fn bnb_optimize(inst: &InstanceData, coupling: bool, params: &BnbParams) -> Result<BnbResult> {
    crate::bnb::solve(inst, &PerfectOracle::new(inst, coupling), params)
}
