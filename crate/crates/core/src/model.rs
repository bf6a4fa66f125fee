//! Problem instances and the independent oracles used to verify designs:
//! average power, SINR, placement feasibility and worst-case robust margin.
//!
//! Units: lengths in mm, speeds in mm/ms, durations in s, powers in W,
//! energies in J.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{CandidateGrid, ChannelRealization};
use crate::error::{Error, Result};

/// Element `m` sits at grid index `placement[m]`.
pub type Placement = Vec<usize>;

/// Beamformers as columns: `w_k = W[:, k]` (M×K).
pub type Beamformers = DMatrix<Complex64>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemConfig {
    pub m: usize,
    pub k: usize,
    /// Per-user noise power σ²_k (W).
    pub noise_power: Vec<f64>,
    /// Per-user linear SINR target γ_k.
    pub sinr_target: Vec<f64>,
    pub d_min: f64,
    pub v_h: f64,
    pub v_v: f64,
    pub p_h: f64,
    pub p_v: f64,
    pub t_ma: f64,
    pub t_data: f64,
    pub kappa: f64,
    /// Coupling decay; `None` disables mutual coupling.
    pub alpha_mc: Option<f64>,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_db(w: f64) -> f64 {
    10.0 * w.log10()
}

impl SystemConfig {
    /// Default physical constants with `m` elements, `k` users and a common
    /// SINR target in dB.
    pub fn defaults(m: usize, k: usize, gamma_db: f64) -> Self {
        Self {
            m,
            k,
            noise_power: vec![dbm_to_watts(-80.0); k],
            sinr_target: vec![db_to_linear(gamma_db); k],
            d_min: 15.0,
            v_h: 0.94,
            v_v: 0.94,
            p_h: 8.0,
            p_v: 8.0,
            t_ma: 0.030,
            t_data: 0.270,
            kappa: 0.0,
            alpha_mc: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidInput(s.to_string()));
        if self.m == 0 || self.k == 0 {
            return bad("M and K must be at least 1");
        }
        if self.noise_power.len() != self.k || self.sinr_target.len() != self.k {
            return bad("noise and SINR vectors need one entry per user");
        }
        if self.noise_power.iter().any(|&s| !(s > 0.0)) || self.sinr_target.iter().any(|&g| !(g > 0.0)) {
            return bad("noise powers and SINR targets must be positive");
        }
        let pos = [self.v_h, self.v_v, self.p_h, self.p_v, self.t_ma, self.t_data];
        if pos.iter().any(|&x| !(x > 0.0)) {
            return bad("speeds, driver powers and durations must be positive");
        }
        if !(self.kappa >= 0.0) || !(self.d_min >= 0.0) {
            return bad("kappa and D_min must be nonnegative");
        }
        if let Some(a) = self.alpha_mc {
            if !(a > 0.0) {
                return bad("coupling decay must be positive");
            }
        }
        Ok(())
    }

    /// Horizontal travel limit `v_h·T_MA` in mm.
    pub fn d_max_h(&self) -> f64 {
        self.v_h * self.t_ma * 1e3
    }

    pub fn d_max_v(&self) -> f64 {
        self.v_v * self.t_ma * 1e3
    }

    pub fn frame(&self) -> f64 {
        self.t_ma + self.t_data
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceData {
    pub grid: CandidateGrid,
    pub channels: Vec<ChannelRealization>,
    pub config: SystemConfig,
    pub initial_positions: Placement,
    pub distance: DMatrix<f64>,
    /// `|x_n − x_m⁰|` per element (mm).
    pub move_h: Vec<Vec<f64>>,
    pub move_v: Vec<Vec<f64>>,
    /// Motion energy per element and target position (J).
    pub energy: Vec<Vec<f64>>,
    pub eta: f64,
    pub coupling: Option<DMatrix<Complex64>>,
}

impl InstanceData {
    pub fn new(
        grid: CandidateGrid,
        channels: Vec<ChannelRealization>,
        config: SystemConfig,
        initial_positions: Placement,
    ) -> Result<Self> {
        config.validate()?;
        let n = grid.n_positions();
        if channels.len() != config.k {
            return Err(Error::Dimension(format!("{} channels for {} users", channels.len(), config.k)));
        }
        if channels.iter().any(|c| c.channel.len() != n) {
            return Err(Error::Dimension("channel length differs from grid size".into()));
        }
        if initial_positions.len() != config.m || initial_positions.iter().any(|&p| p >= n) {
            return Err(Error::InvalidInput("initial positions must be M grid indices".into()));
        }
        let distance = grid.distance_matrix();
        for a in 0..config.m {
            for b in a + 1..config.m {
                if distance[(initial_positions[a], initial_positions[b])] < config.d_min {
                    return Err(Error::InvalidInput("initial positions violate D_min".into()));
                }
            }
        }
        let mut move_h = Vec::with_capacity(config.m);
        let mut move_v = Vec::with_capacity(config.m);
        let mut energy = Vec::with_capacity(config.m);
        for &p0 in &initial_positions {
            let o = grid.positions[p0];
            let mh: Vec<f64> = grid.positions.iter().map(|p| (p[0] - o[0]).abs()).collect();
            let mv: Vec<f64> = grid.positions.iter().map(|p| (p[1] - o[1]).abs()).collect();
            // mm / (mm/ms) = ms → s
            let e: Vec<f64> = (0..n)
                .map(|i| config.p_h * mh[i] / config.v_h * 1e-3 + config.p_v * mv[i] / config.v_v * 1e-3)
                .collect();
            move_h.push(mh);
            move_v.push(mv);
            energy.push(e);
        }
        let eta = c2bar_coefficient(&distance);
        let coupling = config.alpha_mc.map(|a| crate::channel::coupling_matrix(&grid, a));
        Ok(Self { grid, channels, config, initial_positions, distance, move_h, move_v, energy, eta, coupling })
    }

    pub fn n(&self) -> usize {
        self.grid.n_positions()
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// C3 for a single element/position pair.
    pub fn reachable(&self, m: usize, n: usize) -> bool {
        let tol = 1e-9;
        self.move_h[m][n] <= self.config.d_max_h() + tol && self.move_v[m][n] <= self.config.d_max_v() + tol
    }

    /// Copy with per-element motion energy removed (fixed-antenna schemes and
    /// motion-blind objectives).
    pub fn without_motion_cost(&self) -> Self {
        let mut out = self.clone();
        for e in out.energy.iter_mut() {
            e.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Copy with a different CSI error level.
    pub fn with_kappa(&self, kappa: f64) -> Self {
        let mut out = self.clone();
        out.config.kappa = kappa;
        for ch in out.channels.iter_mut() {
            ch.error_radius = kappa * ch.pcv.norm();
        }
        out
    }
}

pub fn selection_matrix(placement: &[usize], n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, placement.len());
    for (m, &p) in placement.iter().enumerate() {
        b[(p, m)] = 1.0;
    }
    b
}

/// Decodes a one-hot selection matrix (entries within `tol` of 0 or 1).
pub fn placement_from_matrix(b: &DMatrix<f64>, tol: f64) -> Option<Placement> {
    let mut out = Vec::with_capacity(b.ncols());
    for m in 0..b.ncols() {
        let mut pos = None;
        for n in 0..b.nrows() {
            let v = b[(n, m)];
            if (v - 1.0).abs() <= tol {
                if pos.is_some() {
                    return None;
                }
                pos = Some(n);
            } else if v.abs() > tol {
                return None;
            }
        }
        out.push(pos?);
    }
    Some(out)
}

pub fn motion_energy(inst: &InstanceData, placement: &[usize]) -> f64 {
    placement.iter().enumerate().map(|(m, &n)| inst.energy[m][n]).sum()
}

pub fn radiated_power(w: &Beamformers) -> f64 {
    w.iter().map(|z| z.norm_sqr()).sum()
}

/// `(Σ_m b_mᵀe_m + T_Data·Σ‖w_k‖²) / (T_MA + T_Data)`.
pub fn average_power(inst: &InstanceData, placement: &[usize], w: &Beamformers) -> f64 {
    let c = &inst.config;
    (motion_energy(inst, placement) + c.t_data * radiated_power(w)) / c.frame()
}

/// Channels seen by the M selected elements: `g_k` with received signal
/// `g_kᴴ w`. With coupling, `g_k = Ĉᴴ Bᵀ ĥ_k` where `Ĉ = BᵀCB`.
pub fn effective_channels(inst: &InstanceData, placement: &[usize], with_coupling: bool) -> Vec<DVector<Complex64>> {
    let sel: Vec<DVector<Complex64>> = inst
        .channels
        .iter()
        .map(|ch| DVector::from_iterator(placement.len(), placement.iter().map(|&n| ch.channel[n])))
        .collect();
    if !with_coupling {
        return sel;
    }
    let c = inst.coupling.as_ref().expect("coupling matrix not configured");
    let chat = DMatrix::from_fn(placement.len(), placement.len(), |a, b| c[(placement[a], placement[b])]);
    sel.iter().map(|h| chat.ad_mul(h)).collect()
}

pub fn sinr_from_channels(g: &[DVector<Complex64>], w: &Beamformers, noise: &[f64]) -> Vec<f64> {
    (0..g.len())
        .map(|k| {
            let gains: Vec<f64> = (0..w.ncols()).map(|j| g[k].dotc(&w.column(j)).norm_sqr()).collect();
            let interf: f64 = gains.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
            gains[k] / (interf + noise[k])
        })
        .collect()
}

pub fn sinr(inst: &InstanceData, placement: &[usize], w: &Beamformers, with_coupling: bool) -> Vec<f64> {
    let g = effective_channels(inst, placement, with_coupling);
    sinr_from_channels(&g, w, &inst.config.noise_power)
}

/// Smallest `SINR_k/γ_k − 1` over users; nonnegative means every target holds.
pub fn min_sinr_margin(inst: &InstanceData, placement: &[usize], w: &Beamformers, with_coupling: bool) -> f64 {
    sinr(inst, placement, w, with_coupling)
        .iter()
        .zip(&inst.config.sinr_target)
        .map(|(s, g)| s / g - 1.0)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignStatus {
    Optimal,
    Feasible,
    Infeasible,
    TolReached,
}

impl std::fmt::Display for DesignStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DesignStatus::Optimal => "optimal",
            DesignStatus::Feasible => "feasible",
            DesignStatus::Infeasible => "infeasible",
            DesignStatus::TolReached => "tol-reached",
        };
        f.write_str(s)
    }
}

/// A placement with its beamformers and power breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSolution {
    pub placement: Placement,
    /// Beamformers as columns (M×K).
    pub w: Beamformers,
    /// Lifted covariance matrices when a rank-one extraction was not tight.
    pub lifted: Option<Vec<DMatrix<Complex64>>>,
    /// `λ₂/λ₁` per user for lifted designs; empty otherwise.
    pub rank_residuals: Vec<f64>,
    pub avg_power: f64,
    pub radiated_power: f64,
    pub motion_energy: f64,
    pub status: DesignStatus,
    pub iterations: usize,
    pub nodes: usize,
    pub gap: f64,
    pub wall_s: f64,
}

impl DesignSolution {
    pub fn new(inst: &InstanceData, placement: Placement, w: Beamformers, status: DesignStatus) -> Self {
        let radiated = radiated_power(&w);
        let motion = motion_energy(inst, &placement);
        Self {
            avg_power: (motion + inst.config.t_data * radiated) / inst.config.frame(),
            placement,
            w,
            lifted: None,
            rank_residuals: Vec::new(),
            radiated_power: radiated,
            motion_energy: motion,
            status,
            iterations: 0,
            nodes: 0,
            gap: 0.0,
            wall_s: 0.0,
        }
    }

    /// Design backed by lifted matrices; radiated power is `Σ Tr(W_k)`.
    pub fn from_lifted(
        inst: &InstanceData,
        placement: Placement,
        w: Beamformers,
        lifted: Vec<DMatrix<Complex64>>,
        residuals: Vec<f64>,
        status: DesignStatus,
    ) -> Self {
        let mut out = Self::new(inst, placement, w, status);
        out.radiated_power = lifted.iter().map(|x| x.trace().re).sum();
        out.avg_power = (out.motion_energy + inst.config.t_data * out.radiated_power) / inst.config.frame();
        out.lifted = Some(lifted);
        out.rank_residuals = residuals;
        out
    }

    pub fn infeasible(inst: &InstanceData) -> Self {
        Self {
            placement: Vec::new(),
            w: DMatrix::zeros(inst.m(), inst.k()),
            lifted: None,
            rank_residuals: Vec::new(),
            avg_power: f64::INFINITY,
            radiated_power: f64::INFINITY,
            motion_energy: 0.0,
            status: DesignStatus::Infeasible,
            iterations: 0,
            nodes: 0,
            gap: f64::INFINITY,
            wall_s: 0.0,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.status != DesignStatus::Infeasible
    }

    /// Whether the design rests on lifted matrices rather than vectors.
    pub fn is_lifted(&self) -> bool {
        self.lifted.is_some()
    }

    pub fn selection(&self, n: usize) -> DMatrix<f64> {
        selection_matrix(&self.placement, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    NotBinary { m: usize, n: usize },
    ColumnSum { m: usize, sum: f64 },
    MinDistance { a: usize, b: usize, distance: f64 },
    MaxMovement { m: usize, horizontal: f64, vertical: f64 },
    Shape,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NotBinary { .. } => "C4",
            Violation::ColumnSum { .. } => "C5",
            Violation::MinDistance { .. } => "C2",
            Violation::MaxMovement { .. } => "C3",
            Violation::Shape => "shape",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub violations: Vec<Violation>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<&'static str> {
        self.violations.iter().map(|v| v.code()).collect()
    }
}

/// Checks binariness, one-hot columns, minimum spacing and travel limits of a
/// selection matrix (N×M).
pub fn check_feasible(inst: &InstanceData, b: &DMatrix<f64>) -> Feasibility {
    let mut out = Feasibility::default();
    if b.nrows() != inst.n() || b.ncols() != inst.m() {
        out.violations.push(Violation::Shape);
        return out;
    }
    let tol = 1e-9;
    for m in 0..b.ncols() {
        for n in 0..b.nrows() {
            let v = b[(n, m)];
            if v.abs() > tol && (v - 1.0).abs() > tol {
                out.violations.push(Violation::NotBinary { m, n });
            }
        }
        let sum: f64 = b.column(m).sum();
        if (sum - 1.0).abs() > tol {
            out.violations.push(Violation::ColumnSum { m, sum });
        }
    }
    let c = &inst.config;
    for a in 0..b.ncols() {
        let ba = b.column(a);
        for bb in a + 1..b.ncols() {
            let d = (ba.transpose() * &inst.distance * b.column(bb))[(0, 0)];
            if d < c.d_min - tol {
                out.violations.push(Violation::MinDistance { a, b: bb, distance: d });
            }
        }
        let h: f64 = (0..b.nrows()).map(|n| ba[n] * inst.move_h[a][n]).sum();
        let v: f64 = (0..b.nrows()).map(|n| ba[n] * inst.move_v[a][n]).sum();
        if h > c.d_max_h() + tol || v > c.d_max_v() + tol {
            out.violations.push(Violation::MaxMovement { m: a, horizontal: h, vertical: v });
        }
    }
    out
}

pub fn check_placement(inst: &InstanceData, placement: &[usize]) -> Feasibility {
    if placement.len() != inst.m() || placement.iter().any(|&p| p >= inst.n()) {
        return Feasibility { violations: vec![Violation::Shape] };
    }
    check_feasible(inst, &selection_matrix(placement, inst.n()))
}

/// Fast C2/C3 test without building matrices.
pub fn placement_ok(inst: &InstanceData, placement: &[usize]) -> bool {
    for (m, &n) in placement.iter().enumerate() {
        if !inst.reachable(m, n) {
            return false;
        }
        for &n2 in &placement[..m] {
            if inst.distance[(n, n2)] < inst.config.d_min - 1e-9 {
                return false;
            }
        }
    }
    true
}

/// All ordered placements satisfying C2–C5, in lexicographic order.
/// Returns an error if more than `budget` placements would be enumerated.
pub fn feasible_placements(inst: &InstanceData, budget: usize) -> Result<Vec<Placement>> {
    let (n, m) = (inst.n(), inst.m());
    let mut total: f64 = 1.0;
    for i in 0..m {
        total *= (n - i.min(n)) as f64;
    }
    if total > budget as f64 {
        return Err(Error::Budget(format!("{total} ordered placements exceed budget {budget}")));
    }
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(m);
    fn rec(inst: &InstanceData, cur: &mut Vec<usize>, out: &mut Vec<Placement>) {
        if cur.len() == inst.m() {
            out.push(cur.clone());
            return;
        }
        let m = cur.len();
        for n in 0..inst.n() {
            if !inst.reachable(m, n) {
                continue;
            }
            if cur.iter().any(|&p| inst.distance[(p, n)] < inst.config.d_min - 1e-9) {
                continue;
            }
            cur.push(n);
            rec(inst, cur, out);
            cur.pop();
        }
    }
    rec(inst, &mut cur, &mut out);
    Ok(out)
}

/// True when at least one placement satisfies C2–C5.
pub fn any_feasible_placement(inst: &InstanceData) -> bool {
    fn rec(inst: &InstanceData, cur: &mut Vec<usize>) -> bool {
        if cur.len() == inst.m() {
            return true;
        }
        let m = cur.len();
        for n in 0..inst.n() {
            if inst.reachable(m, n) && cur.iter().all(|&p| inst.distance[(p, n)] >= inst.config.d_min - 1e-9) {
                cur.push(n);
                if rec(inst, cur) {
                    return true;
                }
                cur.pop();
            }
        }
        false
    }
    rec(inst, &mut Vec::new())
}

/// Uniform rejection sampling over ordered placements satisfying C2/C3.
pub fn random_feasible_placement<R: Rng + ?Sized>(inst: &InstanceData, rng: &mut R) -> Result<Placement> {
    if !any_feasible_placement(inst) {
        return Err(Error::Infeasible("no placement satisfies the spacing and travel limits".into()));
    }
    let (n, m) = (inst.n(), inst.m());
    for _ in 0..1_000_000 {
        let p: Placement = (0..m).map(|_| rng.random_range(0..n)).collect();
        if placement_ok(inst, &p) {
            return Ok(p);
        }
    }
    // extremely sparse feasible set: sample from the enumeration instead
    let all = feasible_placements(inst, usize::MAX)?;
    Ok(all[rng.random_range(0..all.len())].clone())
}

/// Initial element positions drawn uniformly from the grid by rejection until
/// pairwise spacing holds.
pub fn random_initial_positions<R: Rng + ?Sized>(
    grid: &CandidateGrid,
    m: usize,
    d_min: f64,
    rng: &mut R,
) -> Result<Placement> {
    let n = grid.n_positions();
    for _ in 0..1_000_000 {
        let p: Placement = (0..m).map(|_| rng.random_range(0..n)).collect();
        let ok = (0..m).all(|a| (a + 1..m).all(|b| grid.distance(p[a], p[b]) >= d_min));
        if ok {
            return Ok(p);
        }
    }
    Err(Error::Infeasible("could not place elements with the required spacing".into()))
}

/// Left-hand side of the convexified spacing constraint for the pair
/// `(a, b)`: `b̄ᵀ(ηI − ½(D_ab + D_abᵀ))b̄ − ηM + D_min`, nonpositive when the
/// pair is far enough apart (exactly equivalent to C2 for binary B).
pub fn c2bar_value(inst: &InstanceData, b: &DMatrix<f64>, a: usize, bb: usize) -> f64 {
    let m = b.ncols() as f64;
    let cross = (b.column(a).transpose() * &inst.distance * b.column(bb))[(0, 0)];
    inst.eta * b.norm_squared() - cross - inst.eta * m + inst.config.d_min
}

/// Curvature shift for the concave spacing constraint: the spectral norm of
/// the distance matrix.
pub fn c2bar_coefficient(d: &DMatrix<f64>) -> f64 {
    if d.nrows() == 0 {
        return 0.0;
    }
    let sym = (d + d.transpose()) * 0.5;
    let e = sym.symmetric_eigenvalues();
    let spec = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // D is symmetric in practice; fall back to singular values otherwise.
    if (d - d.transpose()).norm() > 1e-12 * d.norm() {
        return d.clone().singular_values().max().max(spec);
    }
    spec
}

/// Exact minimizer of `ΔᴴQΔ + 2Re(gᴴΔ)` over `‖Δ‖ ≤ ε` for Hermitian `Q`.
pub fn trust_region_min(q: &DMatrix<Complex64>, g: &DVector<Complex64>, eps: f64) -> (f64, DVector<Complex64>) {
    let l = g.len();
    if eps <= 0.0 || l == 0 {
        return (0.0, DVector::zeros(l));
    }
    let eig = SymmetricEigen::new(q.clone());
    let d: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let v = eig.eigenvectors;
    let gh = v.ad_mul(g);
    let c: Vec<f64> = gh.iter().map(|z| z.norm_sqr()).collect();
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let dscale = d.iter().fold(1e-300f64, |a, x| a.max(x.abs()));
    let lo = (-dmin).max(0.0);
    let gnorm = c.iter().sum::<f64>().sqrt();
    let eps2 = eps * eps;
    let phi = |nu: f64| -> f64 { (0..l).map(|i| c[i] / (d[i] + nu).powi(2)).sum() };
    let tol_eig = 1e-10 * dscale;
    let is_min = |i: usize| d[i] - dmin <= tol_eig;

    let build = |nu: f64| -> DVector<Complex64> {
        DVector::from_fn(l, |i, _| if d[i] + nu > 0.0 { -gh[i] / (d[i] + nu) } else { Complex64::new(0.0, 0.0) })
    };

    let u = if dmin > tol_eig && phi(0.0) <= eps2 {
        build(0.0)
    } else {
        let cmin: f64 = (0..l).filter(|&i| is_min(i)).map(|i| c[i]).sum();
        let others = |nu: f64| -> f64 { (0..l).filter(|&i| !is_min(i)).map(|i| c[i] / (d[i] + nu).powi(2)).sum() };
        let hard = cmin <= 1e-24 * (gnorm * gnorm + 1e-300) && others(lo) <= eps2;
        if hard {
            let mut u = DVector::from_fn(l, |i, _| {
                if is_min(i) {
                    Complex64::new(0.0, 0.0)
                } else {
                    -gh[i] / (d[i] + lo)
                }
            });
            let rest = (eps2 - u.norm_squared()).max(0.0).sqrt();
            let j = (0..l).find(|&i| is_min(i)).unwrap();
            u[j] += Complex64::new(rest, 0.0);
            u
        } else {
            // safeguarded Newton on 1/√φ(ν) − 1/ε, increasing and concave in ν
            let mut a = lo;
            let mut b = lo + gnorm / eps;
            let mut nu = b;
            for _ in 0..200 {
                let f = phi(nu);
                if (f - eps2).abs() <= 1e-15 * eps2 {
                    break;
                }
                if f > eps2 {
                    a = nu;
                } else {
                    b = nu;
                }
                let df: f64 = (0..l).map(|i| -2.0 * c[i] / (d[i] + nu).powi(3)).sum();
                let s = 1.0 / f.sqrt();
                let ds = -0.5 * df * s / f;
                let mut next = nu + (1.0 / eps - s) / ds;
                if !(next > a && next < b) || !next.is_finite() {
                    next = 0.5 * (a + b);
                }
                if (b - a) <= 1e-16 * b.abs().max(1e-300) {
                    nu = next;
                    break;
                }
                nu = next;
            }
            build(nu)
        }
    };
    let delta = &v * &u;
    let val = (delta.adjoint() * q * &delta)[(0, 0)].re + 2.0 * g.dotc(&delta).re;
    (val, delta)
}

/// Worst-case SINR margin of user `k` over `‖Δψ_k‖ ≤ ε_k`, divided by σ²_k:
///
/// `min_Δ −(ψ̄+Δ)ᴴ G B W̃ Bᴴ Gᴴ (ψ̄+Δ)/σ² − γ`, with
/// `W̃ = γ Σ_{k'≠k} w_{k'} w_{k'}ᴴ − w_k w_kᴴ`.
///
/// A nonnegative value certifies the SINR target for every admissible error.
pub fn worst_case_margin(inst: &InstanceData, placement: &[usize], w: &Beamformers, k: usize) -> f64 {
    let ch = &inst.channels[k];
    worst_case_margin_with(
        &ch.frm,
        &ch.pcv,
        ch.error_radius,
        placement,
        w,
        k,
        inst.config.sinr_target[k],
        inst.config.noise_power[k],
    )
    .0
}

/// Explicit-data form of [`worst_case_margin`]; also returns the worst error.
#[allow(clippy::too_many_arguments)]
pub fn worst_case_margin_with(
    frm: &DMatrix<Complex64>,
    pcv: &DVector<Complex64>,
    eps: f64,
    placement: &[usize],
    w: &Beamformers,
    k: usize,
    gamma: f64,
    noise: f64,
) -> (f64, DVector<Complex64>) {
    // F = G B (L×M); a_j = Fw_j, A0 = γ Σ_{j≠k} a_j a_jᴴ − a_k a_kᴴ
    let f = DMatrix::from_fn(frm.nrows(), placement.len(), |l, m| frm[(l, placement[m])]);
    let a: Vec<DVector<Complex64>> = (0..w.ncols()).map(|j| &f * w.column(j)).collect();
    let l = frm.nrows();
    let mut q = DMatrix::<Complex64>::zeros(l, l);
    for (j, aj) in a.iter().enumerate() {
        let coef = if j == k { 1.0 } else { -gamma };
        q += aj * aj.adjoint() * Complex64::new(coef / noise, 0.0);
    }
    // Q = −A0/σ²
    let g = &q * pcv;
    let nominal = (pcv.adjoint() * &q * pcv)[(0, 0)].re;
    let (tr, delta) = trust_region_min(&q, &g, eps);
    (nominal + tr - gamma, delta)
}

/// Robust margin evaluated by brute force at a given error vector.
pub fn margin_at_error(
    frm: &DMatrix<Complex64>,
    psi: &DVector<Complex64>,
    placement: &[usize],
    w: &Beamformers,
    k: usize,
    gamma: f64,
    noise: f64,
) -> f64 {
    let h = frm.ad_mul(psi);
    let g = DVector::from_iterator(placement.len(), placement.iter().map(|&n| h[n]));
    let gains: Vec<f64> = (0..w.ncols()).map(|j| g.dotc(&w.column(j)).norm_sqr()).collect();
    let interf: f64 = gains.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
    (gains[k] - gamma * interf) / noise - gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_grid, perturb_pcv, sample_paths, PerturbMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_instance(seed: u64, m: usize, k: usize, kappa: f64) -> InstanceData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = build_grid(1.0, 20.0, 60.0).unwrap();
        let paths = sample_paths(3, &vec![30.0; k], 1.0, 2.2, false, &mut rng).unwrap();
        let chans = paths.into_iter().map(|p| ChannelRealization::new(p, &grid.positions, 60.0, kappa)).collect();
        let mut cfg = SystemConfig::defaults(m, k, 0.0);
        cfg.kappa = kappa;
        let init = random_initial_positions(&grid, m, cfg.d_min, &mut rng).unwrap();
        InstanceData::new(grid, chans, cfg, init).unwrap()
    }

    #[test]
    fn average_power_examples() {
        let mut inst = toy_instance(1, 1, 1, 0.0);
        let stay = inst.initial_positions.clone();
        let w = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        assert!((average_power(&inst, &stay, &w) - 0.9).abs() < 1e-12);
        // move 20 mm horizontally and 10 mm vertically with zero beamformers
        inst.energy[0] = inst.grid.positions.iter().map(|_| 0.0).collect();
        let cfg = &inst.config;
        let e = cfg.p_h * 20.0 / cfg.v_h * 1e-3 + cfg.p_v * 10.0 / cfg.v_v * 1e-3;
        assert!((e - 0.2553).abs() < 1e-4);
        assert!((e / cfg.frame() - 0.851).abs() < 1e-3);
        let w2 = &w * Complex64::new(2f64.sqrt(), 0.0);
        assert!((radiated_power(&w2) - 2.0 * radiated_power(&w)).abs() < 1e-12);
    }

    #[test]
    fn energy_vector_zero_at_start() {
        let inst = toy_instance(2, 2, 1, 0.0);
        for (m, &p0) in inst.initial_positions.iter().enumerate() {
            assert_eq!(inst.energy[m][p0], 0.0);
            assert!(inst.energy[m].iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn sinr_examples() {
        let inst = toy_instance(3, 1, 1, 0.0);
        let p = vec![inst.initial_positions[0]];
        let h = inst.channels[0].channel[p[0]];
        let w = DMatrix::from_element(1, 1, h / h.norm() * 3.0);
        let s = sinr(&inst, &p, &w, false)[0];
        let want = h.norm_sqr() * 9.0 / inst.config.noise_power[0];
        assert!((s - want).abs() < 1e-9 * want);
        let z = DMatrix::zeros(1, 1);
        assert_eq!(sinr(&inst, &p, &z, false)[0], 0.0);
    }

    #[test]
    fn coupling_identity_matches_uncoupled() {
        let mut inst = toy_instance(4, 2, 2, 0.0);
        let n = inst.n();
        inst.coupling = Some(DMatrix::identity(n, n));
        let p = inst.initial_positions.clone();
        let w = DMatrix::from_fn(2, 2, |i, j| Complex64::new(i as f64 + 1.0, j as f64 - 0.5));
        let a = sinr(&inst, &p, &w, false);
        let b = sinr(&inst, &p, &w, true);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn feasibility_reports() {
        let inst = toy_instance(5, 2, 1, 0.0);
        let same = vec![0, 0];
        assert!(check_placement(&inst, &same).codes().contains(&"C2"));
        // start far from the target: move more than D_max
        let mut far = inst.clone();
        far.move_h[0] = inst.grid.positions.iter().map(|p| (p[0] - 0.0).abs()).collect();
        far.move_h[0][3] = 30.0;
        let mut b = selection_matrix(&[3, 15], inst.n());
        assert!(check_feasible(&far, &b).codes().contains(&"C3"));
        b[(0, 0)] = 0.5;
        assert!(check_feasible(&inst, &b).codes().contains(&"C4"));
    }

    #[test]
    fn tight_grid_has_no_placement() {
        let grid = build_grid(1.0, 60.0, 60.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let paths = sample_paths(1, &[30.0], 1.0, 2.2, false, &mut rng).unwrap();
        let chans = paths.into_iter().map(|p| ChannelRealization::new(p, &grid.positions, 60.0, 0.0)).collect();
        let mut cfg = SystemConfig::defaults(2, 1, 0.0);
        cfg.d_min = 100.0;
        // diagonal positions are 84.9 mm apart: no pair reaches 100 mm
        assert!(InstanceData::new(grid, chans, cfg, vec![0, 3]).is_err());
    }

    #[test]
    fn eta_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 10.0, 10.0, 0.0]);
        assert!((c2bar_coefficient(&d) - 10.0).abs() < 1e-12);
        assert_eq!(c2bar_coefficient(&DMatrix::zeros(3, 3)), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(0.0..10.0));
        let d = &a + a.transpose();
        let eta = c2bar_coefficient(&d);
        for _ in 0..1000 {
            let q = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let v = eta * q.norm_squared() - (q.transpose() * &d * &q)[(0, 0)];
            assert!(v >= -1e-9);
        }
    }

    #[test]
    fn margin_reduces_to_nominal() {
        let inst = toy_instance(6, 2, 2, 0.0);
        let p = inst.initial_positions.clone();
        let w = DMatrix::from_fn(2, 2, |i, j| Complex64::new((i + 2 * j) as f64 * 1e-3, 1e-3));
        let g = inst.config.sinr_target[0];
        for k in 0..2 {
            let m = worst_case_margin(&inst, &p, &w, k);
            let s = sinr(&inst, &p, &w, false)[k];
            assert_eq!(m >= 0.0, s >= g);
        }
        let z = DMatrix::zeros(2, 2);
        assert!((worst_case_margin(&inst, &p, &z, 0) + g).abs() < 1e-12);
    }

    #[test]
    fn trust_region_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..5 {
            let inst = toy_instance(20 + trial, 2, 2, 0.3);
            let p = inst.initial_positions.clone();
            let w = DMatrix::from_fn(2, 2, |_, _| crate::channel::complex_gaussian(&mut rng, 1.0) * 3e-4);
            let ch = &inst.channels[0];
            let (tr, _) = worst_case_margin_with(&ch.frm, &ch.pcv, ch.error_radius, &p, &w, 0, 1.0, 1e-8);
            let mut best = f64::INFINITY;
            for i in 0..200_000 {
                let mode = if i % 2 == 0 { PerturbMode::Sphere } else { PerturbMode::Ball };
                let d = perturb_pcv(ch.pcv.len(), ch.error_radius, mode, &mut rng);
                best = best.min(margin_at_error(&ch.frm, &(&ch.pcv + d), &p, &w, 0, 1.0, 1e-8));
            }
            assert!(tr <= best + 1e-9 * best.abs().max(1.0), "trust region {tr} above sampled {best}");
            assert!(best - tr <= 0.05 * best.abs().max(1.0), "trust region {tr} far below sampled {best}");
        }
    }

    #[test]
    fn trust_region_hard_case() {
        // Q = diag(−1, 1), g = (0, 0.1): minimizer moves along the negative
        // eigenvector to the boundary.
        let q = DMatrix::from_row_slice(2, 2, &[
            Complex64::new(-1.0, 0.0), Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0),
        ]);
        let g = DVector::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(0.1, 0.0)]);
        let (v, d) = trust_region_min(&q, &g, 1.0);
        assert!((d.norm() - 1.0).abs() < 1e-12);
        // ν = 1: u2 = −0.1/2 = −0.05, u1 = √(1 − 0.0025)
        let want = -(1.0 - 0.0025) + 0.0025 - 2.0 * 0.1 * 0.05;
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn trust_region_interior() {
        let q = DMatrix::from_row_slice(1, 1, &[Complex64::new(2.0, 0.0)]);
        let g = DVector::from_vec(vec![Complex64::new(1.0, 0.0)]);
        let (v, d) = trust_region_min(&q, &g, 10.0);
        assert!((d[0].re + 0.5).abs() < 1e-12);
        assert!((v + 0.5).abs() < 1e-12);
    }
}
