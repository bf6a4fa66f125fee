//! Reference schemes: random placement, antenna selection on a fixed
//! half-wavelength array, alternating optimization, the motion-blind search,
//! exhaustive enumeration and the coupling-aware optimum.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::bnb::{BnbParams, BnbResult};
use crate::channel::CandidateGrid;
use crate::conic::{add_complex_soc, Affine, CAffine, ConicProgram, SolverSettings};
use crate::error::{Error, Result};
use crate::model::{
    feasible_placements, motion_energy, random_feasible_placement, Beamformers, DesignSolution, DesignStatus,
    InstanceData, Placement,
};
use crate::perfect::{
    add_placement_constraints, bnb_optimize, eval_selection, round_binary, selection_exprs,
    solve_beamforming, solve_checked, solve_fixed_b, solve_fixed_b_with, NodeFixings, PenaltyParams, Solved,
};
use crate::robust::{bnb_optimize_robust, solve_robust_fixed_b};

/// Default cap on ordered placements for exhaustive enumeration.
pub const ENUMERATION_BUDGET: usize = 200_000;

/// Fixed-placement design under the chosen CSI model.
pub fn fixed_design(inst: &InstanceData, placement: &[usize], robust: bool) -> Result<Option<DesignSolution>> {
    if robust {
        solve_robust_fixed_b(inst, placement)
    } else {
        solve_fixed_b(inst, placement)
    }
}

fn infeasible_at(inst: &InstanceData, placement: Placement) -> DesignSolution {
    let mut d = DesignSolution::infeasible(inst);
    d.placement = placement;
    d
}

/// Recomputes motion energy and average power of `d` on `inst`.
pub fn reprice(inst: &InstanceData, d: &DesignSolution) -> DesignSolution {
    let mut out = d.clone();
    if !d.is_feasible() || d.placement.is_empty() {
        return out;
    }
    out.motion_energy = motion_energy(inst, &d.placement);
    out.avg_power = (out.motion_energy + inst.config.t_data * out.radiated_power) / inst.config.frame();
    out
}

/// Baseline 1: a uniformly drawn feasible placement with optimal beamformers.
pub fn random_positions<R: Rng + ?Sized>(inst: &InstanceData, robust: bool, rng: &mut R) -> Result<DesignSolution> {
    let start = Instant::now();
    let p = random_feasible_placement(inst, rng)?;
    let mut d = fixed_design(inst, &p, robust)?.unwrap_or_else(|| infeasible_at(inst, p));
    d.wall_s = start.elapsed().as_secs_f64();
    Ok(d)
}

/// Fixed `2×M` array at half-wavelength spacing anchored at the grid origin,
/// as an instance with the same users and no motion cost. Its positions are
/// indexed row-major.
pub fn upa_instance(inst: &InstanceData) -> Result<InstanceData> {
    let c = &inst.config;
    let lam = inst.grid.wavelength;
    let half = lam / 2.0;
    let origin = inst.grid.positions.first().copied().unwrap_or([0.0, 0.0]);
    let cols = c.m;
    let positions: Vec<[f64; 2]> =
        (0..2).flat_map(|r| (0..cols).map(move |q| [origin[0] + q as f64 * half, origin[1] + r as f64 * half])).collect();
    let grid = CandidateGrid { wavelength: lam, side_length: half * cols.max(2) as f64, step: half, per_side: cols, positions };
    let channels = inst.channels.iter().map(|ch| ch.at_positions(&grid.positions, lam)).collect();
    let mut cfg = c.clone();
    // elements never move, so travel limits must not exclude any slot
    cfg.v_h = 1e9;
    cfg.v_v = 1e9;
    cfg.alpha_mc = None;
    let init: Placement = (0..c.m).collect();
    Ok(InstanceData::new(grid, channels, cfg, init)?.without_motion_cost())
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, m, &mut Vec::with_capacity(m), &mut out);
    out
}

/// Baseline 2: best `M` of the `2M` antennas of a fixed array. The reported
/// average power is `Σ‖w_k‖²` since a fixed array transmits over the whole
/// frame; the placement indexes [`upa_instance`] positions.
pub fn antenna_selection(inst: &InstanceData, robust: bool) -> Result<DesignSolution> {
    let start = Instant::now();
    let upa = upa_instance(inst)?;
    let mut best: Option<DesignSolution> = None;
    let mut count = 0;
    for s in subsets(upa.n(), upa.m()) {
        count += 1;
        if let Some(d) = fixed_design(&upa, &s, robust)? {
            if best.as_ref().is_none_or(|b| d.radiated_power < b.radiated_power) {
                best = Some(d);
            }
        }
    }
    let mut d = best.unwrap_or_else(|| DesignSolution::infeasible(inst));
    if d.is_feasible() {
        d.avg_power = d.radiated_power;
    }
    d.nodes = count;
    d.wall_s = start.elapsed().as_secs_f64();
    Ok(d)
}

#[derive(Clone, Debug)]
pub struct AoParams {
    /// Relative beamformer change that ends the alternation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AoParams {
    fn default() -> Self {
        Self { tol: 1e-2, max_iter: 30 }
    }
}

/// `g_k = Bᵀĥ_k` for a possibly fractional N×M selection.
fn relaxed_channels(inst: &InstanceData, b: &DMatrix<f64>) -> Vec<DVector<Complex64>> {
    let bc = b.map(|v| Complex64::new(v, 0.0));
    inst.channels.iter().map(|ch| bc.transpose() * &ch.channel).collect()
}

/// Selection step at fixed beam directions: relaxed B and a common power
/// scale `c = 1/u²` on W, minimizing `(Σ_m b_mᵀe_m + T_Data·c‖W‖²)/frame`
/// subject to the placement rules and
/// `‖(ĥ_kᴴBw_j/σ_k)_{j≠k}, u‖ ≤ Re(ĥ_kᴴBw_k/σ_k)/√γ_k`.
fn ao_selection_step(
    inst: &InstanceData,
    w: &Beamformers,
    fix: &NodeFixings,
    settings: &SolverSettings,
) -> Option<DMatrix<f64>> {
    let c = &inst.config;
    let mut p = ConicProgram::new();
    let b = selection_exprs(&mut p, fix);
    add_placement_constraints(&mut p, inst, &b);
    let u = Affine::var(p.add_var("u"));
    let v = Affine::var(p.add_var("v"));
    let t = Affine::var(p.add_var("t"));
    // u·v ≥ 1 and v² ≤ t, so t ≥ 1/u² = c
    p.add_rotated_soc("uv", u.clone(), v.clone(), vec![Affine::constant(std::f64::consts::SQRT_2)]);
    p.add_rotated_soc("vt", t.clone(), Affine::constant(0.5), vec![v]);
    for (k, ch) in inst.channels.iter().enumerate() {
        let sigma = c.noise_power[k].sqrt();
        let z: Vec<CAffine> = (0..c.k)
            .map(|j| {
                let mut e = CAffine::zero();
                for (m, col) in b.iter().enumerate() {
                    for (n, bn) in col.iter().enumerate() {
                        let a = ch.channel[n].conj() * w[(m, j)] / sigma;
                        if a.norm_sqr() > 0.0 {
                            e.add_scaled(&CAffine::real(bn.clone()), a);
                        }
                    }
                }
                e.compact();
                e
            })
            .collect();
        let mut rows: Vec<CAffine> = z.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, e)| e.clone()).collect();
        rows.push(CAffine::real(u.clone()));
        add_complex_soc(&mut p, &format!("sinr[{k}]"), z[k].re.scaled(1.0 / c.sinr_target[k].sqrt()), &rows);
    }
    let mut obj = t.scaled(c.t_data * w.norm_squared() / c.frame());
    for (m, col) in b.iter().enumerate() {
        for (n, e) in col.iter().enumerate() {
            obj.add_scaled(e, inst.energy[m][n] / c.frame());
        }
    }
    p.set_objective(obj);
    match solve_checked(&p, settings) {
        Solved::Ok(r) => Some(eval_selection(&b, &r.x)),
        _ => None,
    }
}

/// Starting placement for local schemes: the initial positions when the
/// targets are attainable there, else the first attainable placement.
fn feasible_start(inst: &InstanceData, robust: bool) -> Result<Option<DesignSolution>> {
    if let Some(d) = fixed_design(inst, &inst.initial_positions, robust)? {
        return Ok(Some(d));
    }
    for p in feasible_placements(inst, ENUMERATION_BUDGET)? {
        if let Some(d) = fixed_design(inst, &p, robust)? {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

/// Baseline 3: alternate beamforming and relaxed-selection updates, then
/// quantize the selection. Under imperfect CSI the alternation uses the
/// nominal channels and only the final beamformers are robust.
pub fn alternating_optimization(inst: &InstanceData, robust: bool, params: &AoParams) -> Result<DesignSolution> {
    let start = Instant::now();
    let settings = SolverSettings::default();
    let Some(init) = feasible_start(inst, robust)? else {
        let mut d = DesignSolution::infeasible(inst);
        d.wall_s = start.elapsed().as_secs_f64();
        return Ok(d);
    };
    // nominal beamformers at the start, which a robust design also satisfies
    let mut w = if robust {
        match solve_fixed_b(inst, &init.placement)? {
            Some(d) => d.w,
            None => init.w.clone(),
        }
    } else {
        init.w.clone()
    };
    let fix = NodeFixings::for_instance(inst)?;
    let mut b = crate::model::selection_matrix(&init.placement, inst.n());
    let mut iterations = 0;
    for _ in 0..params.max_iter {
        iterations += 1;
        let Some(nb) = ao_selection_step(inst, &w, &fix, &settings) else { break };
        let g = relaxed_channels(inst, &nb);
        let Some(nw) = solve_beamforming(&g, &inst.config.noise_power, &inst.config.sinr_target, &settings)? else {
            break;
        };
        let denom = w.norm();
        let change = if denom > 0.0 { (&nw - &w).norm() / denom } else { (&nw - &w).norm() };
        b = nb;
        w = nw;
        if change <= params.tol {
            break;
        }
    }
    let rounded = round_binary(inst, &b, &fix, &PenaltyParams::rounding(), &settings)?;
    let mut best = init;
    if let Some(p) = rounded.placement {
        if let Some(d) = fixed_design(inst, &p, robust)? {
            if d.avg_power < best.avg_power {
                best = d;
            }
        }
    }
    best.iterations = iterations;
    best.status = DesignStatus::Feasible;
    best.wall_s = start.elapsed().as_secs_f64();
    Ok(best)
}

/// Baseline 4: global search on radiated power alone, reported at its true
/// average power.
pub fn ignore_motion_power(inst: &InstanceData, robust: bool, params: &BnbParams) -> Result<BnbResult> {
    let blind = inst.without_motion_cost();
    let mut r = if robust { bnb_optimize_robust(&blind, params)? } else { bnb_optimize(&blind, false, params)? };
    r.design = reprice(inst, &r.design);
    Ok(r)
}

/// Global optimum by enumerating every ordered feasible placement.
/// `nodes` on the result counts the placements solved.
pub fn exhaustive_search(inst: &InstanceData, robust: bool, budget: usize) -> Result<DesignSolution> {
    let start = Instant::now();
    let all = feasible_placements(inst, budget)?;
    let mut best: Option<DesignSolution> = None;
    for p in &all {
        if let Some(d) = fixed_design(inst, p, robust)? {
            if best.as_ref().is_none_or(|b| d.avg_power < b.avg_power) {
                best = Some(d);
            }
        }
    }
    let mut d = best.map_or_else(
        || DesignSolution::infeasible(inst),
        |mut d| {
            d.status = DesignStatus::Optimal;
            d.gap = 0.0;
            d
        },
    );
    d.nodes = all.len();
    d.wall_s = start.elapsed().as_secs_f64();
    Ok(d)
}

/// Global optimum under the coupled SINR model.
pub fn mc_optimal(inst: &InstanceData, params: &BnbParams) -> Result<BnbResult> {
    if inst.coupling.is_none() {
        return Err(Error::InvalidInput("instance has no coupling matrix".into()));
    }
    bnb_optimize(inst, true, params)
}

/// Placement from the coupling-blind optimum, beamformers re-solved against
/// the coupled SINR.
pub fn coupling_blind_design(inst: &InstanceData, params: &BnbParams) -> Result<DesignSolution> {
    if inst.coupling.is_none() {
        return Err(Error::InvalidInput("instance has no coupling matrix".into()));
    }
    let start = Instant::now();
    let r = bnb_optimize(inst, false, params)?;
    if !r.design.is_feasible() {
        return Ok(r.design);
    }
    let p = r.design.placement.clone();
    let mut d = solve_fixed_b_with(inst, &p, true, &SolverSettings::default())?.unwrap_or_else(|| infeasible_at(inst, p));
    d.nodes = r.design.nodes;
    d.iterations = r.design.iterations;
    d.wall_s = start.elapsed().as_secs_f64();
    Ok(d)
}
