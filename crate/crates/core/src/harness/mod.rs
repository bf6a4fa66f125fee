//! Monte Carlo driver: scenario files, seeded instances, scheme dispatch,
//! independent re-verification and CSV/JSON result files.

mod config;

pub use config::{
    compensated_gamma, ChannelSection, GridSection, RunSection, ScenarioConfig, Scheme, Seeds, Sweep, SweepAxis,
    SystemSection,
};

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::bnb::{BnbParams, BnbResult};
use crate::channel::{build_grid, sample_paths, ChannelRealization};
use crate::conic::SolverSettings;
use crate::error::{Error, Result};
use crate::model::{
    check_placement, effective_channels, min_sinr_margin, random_initial_positions, watts_to_db, DesignSolution,
    InstanceData,
};
use crate::perfect::{bnb_optimize, sca_optimize, PenaltyParams};
use crate::robust::{bnb_optimize_robust, design_worst_margin, sca_optimize_robust};

/// Margin below which a design counts as violating its targets.
pub const VERIFY_TOL: f64 = 1e-6;

const TAG_USER: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_SCHEME: u64 = 3;

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one substream, keyed by the scenario and a path of indices.
pub fn substream(scenario: &str, parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(splitmix(fnv1a(scenario)), |h, &p| splitmix(h ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Instance for `cfg` (already at its sweep point) and `seed`. Channels and
/// initial positions depend only on the scenario, the seed and the user or
/// element index, so every sweep point sees the same propagation.
pub fn build_instance(cfg: &ScenarioConfig, seed: u64, scheme: Option<Scheme>) -> Result<InstanceData> {
    let sys = cfg.system_config(scheme)?;
    let lam = cfg.system.wavelength;
    let grid = build_grid(cfg.grid.l, cfg.grid.d, lam)?;
    let l0 = cfg.channel.l0.unwrap_or_else(|| (lam * 1e-3 / (4.0 * std::f64::consts::PI)).powi(2));
    let [lo, hi] = cfg.channel.distance;
    let mut channels = Vec::with_capacity(sys.k);
    for k in 0..sys.k {
        let mut rng = substream(&cfg.id, &[seed, TAG_USER, k as u64]);
        let dist = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let paths = sample_paths(cfg.channel.paths, &[dist], l0, cfg.channel.alpha, cfg.channel.per_path_normalize, &mut rng)?;
        let p = paths.into_iter().next().ok_or_else(|| Error::InvalidInput("no paths sampled".into()))?;
        channels.push(ChannelRealization::new(p, &grid.positions, lam, sys.kappa));
    }
    let mut rng = substream(&cfg.id, &[seed, TAG_INIT, sys.m as u64]);
    let init = random_initial_positions(&grid, sys.m, sys.d_min, &mut rng)?;
    InstanceData::new(grid, channels, sys, init)
}

/// One row of a result file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub scenario: String,
    pub seed: u64,
    pub scheme: Scheme,
    pub sweep: String,
    pub sweep_value: Option<f64>,
    pub status: String,
    pub avg_power_w: Option<f64>,
    pub avg_power_db: Option<f64>,
    pub radiated_power_w: Option<f64>,
    pub radiated_power_db: Option<f64>,
    pub motion_energy_j: Option<f64>,
    /// `min_k 10·log₁₀(SINR_k/γ_k)` on the nominal channel.
    pub min_sinr_margin_db: Option<f64>,
    /// Smallest worst-case margin over users (robust runs only).
    pub worst_case_margin: Option<f64>,
    /// bits/J/Hz.
    pub energy_efficiency: Option<f64>,
    pub iterations: usize,
    pub nodes: usize,
    pub wall_s: f64,
    pub gap: Option<f64>,
    /// Re-checked against the independent SINR and placement oracles.
    pub verified: bool,
    /// Grid indices of the elements, space separated.
    pub placement: String,
    pub error: Option<String>,
}

impl ExperimentRecord {
    /// Copy with the wall time cleared, for reproducible files.
    pub fn without_timing(&self) -> Self {
        Self { wall_s: 0.0, ..self.clone() }
    }
}

/// Result file: the scenario echo, records and the designs behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub config: ScenarioConfig,
    pub records: Vec<ExperimentRecord>,
    pub designs: Vec<Option<DesignSolution>>,
}

/// `Σ log₂(1+γ_k)` per unit power: over `Σ‖w_k‖²` for a fixed array and
/// over `P̄·(T_MA+T_Data)/T_Data` for a movable one.
pub fn energy_efficiency(d: &DesignSolution, gamma: &[f64], t_ma: f64, t_data: f64, fixed_array: bool) -> Option<f64> {
    if !d.is_feasible() {
        return None;
    }
    let bits: f64 = gamma.iter().map(|g| (1.0 + g).log2()).sum();
    let denom = if fixed_array { d.radiated_power } else { d.avg_power * (t_ma + t_data) / t_data };
    (denom > 0.0 && denom.is_finite()).then(|| bits / denom)
}

/// Nominal `min_k SINR_k/γ_k − 1`, from the lifted matrices when present.
pub fn nominal_margin(inst: &InstanceData, d: &DesignSolution, coupling: bool) -> f64 {
    match &d.lifted {
        None => min_sinr_margin(inst, &d.placement, &d.w, coupling),
        Some(ws) => {
            let g = effective_channels(inst, &d.placement, coupling);
            let c = &inst.config;
            (0..inst.k())
                .map(|k| {
                    let gain = |w: &DMatrix<Complex64>| (g[k].adjoint() * w * &g[k])[(0, 0)].re;
                    let interf: f64 = ws.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, w)| gain(w)).sum();
                    gain(&ws[k]) / (interf + c.noise_power[k]) / c.sinr_target[k] - 1.0
                })
                .fold(f64::INFINITY, f64::min)
        }
    }
}

/// Independent checks of a finished design on the instance it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub placement_ok: bool,
    pub nominal_margin: f64,
    pub worst_case_margin: Option<f64>,
    /// `|P̄ − (E + T_Data·P_rad)/frame|`, zero for fixed arrays.
    pub power_mismatch: f64,
    pub ok: bool,
}

pub fn verify_design(inst: &InstanceData, d: &DesignSolution, scheme: Scheme, robust: bool) -> Verification {
    let placement_ok = check_placement(inst, &d.placement).is_feasible();
    let coupling = scheme.uses_coupling();
    let nominal = nominal_margin(inst, d, coupling);
    let worst = robust.then(|| design_worst_margin(inst, d));
    let power_mismatch = if scheme.is_fixed_array() {
        (d.avg_power - d.radiated_power).abs()
    } else {
        let c = &inst.config;
        (d.avg_power - (d.motion_energy + c.t_data * d.radiated_power) / c.frame()).abs()
    };
    let ok = placement_ok
        && nominal >= -VERIFY_TOL
        && worst.is_none_or(|w| w >= -VERIFY_TOL)
        && power_mismatch <= 1e-9 * d.avg_power.abs().max(1.0);
    Verification { placement_ok, nominal_margin: nominal, worst_case_margin: worst, power_mismatch, ok }
}

fn bnb_params(cfg: &ScenarioConfig) -> BnbParams {
    BnbParams { tol_abs: cfg.run.tolerance, node_budget: cfg.run.node_budget, ..BnbParams::default() }
}

/// Runs `scheme` on `inst`. Returns the design and the instance its
/// placement indexes (the fixed array for antenna selection).
pub fn run_scheme(
    cfg: &ScenarioConfig,
    inst: &InstanceData,
    scheme: Scheme,
    rng: &mut ChaCha8Rng,
) -> Result<(DesignSolution, InstanceData)> {
    let robust = cfg.run.robust;
    let params = bnb_params(cfg);
    let settings = SolverSettings::default();
    let d = match scheme {
        Scheme::Bnb => {
            if robust {
                bnb_optimize_robust(inst, &params)?.design
            } else {
                bnb_optimize(inst, false, &params)?.design
            }
        }
        Scheme::Sca => {
            let init = Some(inst.initial_positions.clone());
            if robust {
                sca_optimize_robust(inst, init, &PenaltyParams::sca(), &settings, rng)?.0
            } else {
                sca_optimize(inst, init, &PenaltyParams::sca(), &settings, rng)?.0
            }
        }
        Scheme::Random => baselines::random_positions(inst, robust, rng)?,
        Scheme::AntennaSelection => {
            let d = baselines::antenna_selection(inst, robust)?;
            return Ok((d, baselines::upa_instance(inst)?));
        }
        Scheme::Ao => baselines::alternating_optimization(inst, robust, &baselines::AoParams::default())?,
        Scheme::IgnoreMotion => baselines::ignore_motion_power(inst, robust, &params)?.design,
        Scheme::Exhaustive => baselines::exhaustive_search(inst, robust, cfg.run.enumeration_budget)?,
        Scheme::McOptimal | Scheme::CouplingBlind if robust => {
            return Err(Error::InvalidInput("coupling schemes are defined for perfect CSI only".into()));
        }
        Scheme::McOptimal => baselines::mc_optimal(inst, &params)?.design,
        Scheme::CouplingBlind => baselines::coupling_blind_design(inst, &params)?,
    };
    Ok((d, inst.clone()))
}

/// Global search on one instance, for convergence traces.
pub fn bnb_trace(cfg: &ScenarioConfig, seed: u64, value: Option<f64>) -> Result<BnbResult> {
    let at = cfg.at_point(value);
    let inst = build_instance(&at, seed, Some(Scheme::Bnb))?;
    if cfg.run.robust {
        bnb_optimize_robust(&inst, &bnb_params(cfg))
    } else {
        bnb_optimize(&inst, false, &bnb_params(cfg))
    }
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn record_for(
    cfg: &ScenarioConfig,
    seed: u64,
    point: usize,
    value: Option<f64>,
    scheme: Scheme,
) -> (ExperimentRecord, Option<DesignSolution>) {
    let start = Instant::now();
    let mut rec = ExperimentRecord {
        scenario: cfg.id.clone(),
        seed,
        scheme,
        sweep: cfg.sweep_name().to_string(),
        sweep_value: value,
        status: "error".into(),
        avg_power_w: None,
        avg_power_db: None,
        radiated_power_w: None,
        radiated_power_db: None,
        motion_energy_j: None,
        min_sinr_margin_db: None,
        worst_case_margin: None,
        energy_efficiency: None,
        iterations: 0,
        nodes: 0,
        wall_s: 0.0,
        gap: None,
        verified: false,
        placement: String::new(),
        error: None,
    };
    let at = cfg.at_point(value);
    let mut rng = substream(&cfg.id, &[seed, TAG_SCHEME, point as u64, scheme as u64]);
    let outcome = build_instance(&at, seed, Some(scheme)).and_then(|inst| run_scheme(&at, &inst, scheme, &mut rng));
    rec.wall_s = start.elapsed().as_secs_f64();
    let (d, inst) = match outcome {
        Ok(x) => x,
        Err(e) => {
            rec.error = Some(e.to_string());
            return (rec, None);
        }
    };
    rec.status = d.status.to_string();
    rec.iterations = d.iterations;
    rec.nodes = d.nodes;
    if !d.is_feasible() {
        return (rec, None);
    }
    let v = verify_design(&inst, &d, scheme, at.run.robust);
    rec.avg_power_w = opt(d.avg_power);
    rec.avg_power_db = opt(watts_to_db(d.avg_power));
    rec.radiated_power_w = opt(d.radiated_power);
    rec.radiated_power_db = opt(watts_to_db(d.radiated_power));
    rec.motion_energy_j = opt(d.motion_energy);
    rec.min_sinr_margin_db = opt(10.0 * (1.0 + v.nominal_margin).max(0.0).log10());
    rec.worst_case_margin = v.worst_case_margin.and_then(opt);
    let c = &inst.config;
    rec.energy_efficiency = energy_efficiency(&d, &c.sinr_target, c.t_ma, c.t_data, scheme.is_fixed_array());
    rec.gap = opt(d.gap);
    rec.verified = v.ok;
    rec.placement = d.placement.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
    (rec, Some(d))
}

/// Every (sweep point, seed, scheme) combination of `cfg`, rows in that
/// order. Failures are recorded in the row and the run continues.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<ResultFile> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for (i, v) in cfg.sweep_points().into_iter().enumerate() {
        for s in 0..cfg.run.seeds.count {
            for &scheme in &cfg.run.schemes {
                tasks.push((i, v, cfg.run.seeds.base + s, scheme));
            }
        }
    }
    let workers = match cfg.run.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(tasks.len().max(1));
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<(ExperimentRecord, Option<DesignSolution>)>>> = Mutex::new(vec![None; tasks.len()]);
    std::thread::scope(|sc| {
        for _ in 0..workers {
            sc.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, v, seed, scheme)) = tasks.get(t) else { break };
                let r = record_for(cfg, seed, i, v, scheme);
                out.lock().expect("result lock")[t] = Some(r);
            });
        }
    });
    let rows = out.into_inner().map_err(|_| Error::InvalidInput("worker panicked".into()))?;
    let mut records = Vec::with_capacity(rows.len());
    let mut designs = Vec::with_capacity(rows.len());
    for r in rows {
        let (rec, d) = r.ok_or_else(|| Error::InvalidInput("worker panicked".into()))?;
        records.push(rec);
        designs.push(d);
    }
    Ok(ResultFile { config: cfg.clone(), records, designs })
}

pub fn write_csv(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    r.deserialize().map(|x| x.map_err(|e| Error::Serde(e.to_string()))).collect()
}

pub fn write_json(file: &ResultFile, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(file).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<ResultFile> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Serde(e.to_string()))
}

/// Outcome of re-checking a result file.
#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checked: usize,
    pub skipped: usize,
    /// `(row, reason)` for every failed check.
    pub failures: Vec<(usize, String)>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Rebuilds every instance of a result file and re-verifies its designs
/// with the independent oracles.
pub fn verify_results(file: &ResultFile) -> Result<VerifyReport> {
    if file.records.len() != file.designs.len() {
        return Err(Error::InvalidInput("records and designs differ in length".into()));
    }
    let mut rep = VerifyReport::default();
    for (i, (rec, d)) in file.records.iter().zip(&file.designs).enumerate() {
        let Some(d) = d else {
            rep.skipped += 1;
            continue;
        };
        let at = file.config.at_point(rec.sweep_value);
        let inst = build_instance(&at, rec.seed, Some(rec.scheme))?;
        let inst = if rec.scheme.is_fixed_array() { baselines::upa_instance(&inst)? } else { inst };
        if !rec.scheme.is_fixed_array() {
            let e = crate::model::motion_energy(&inst, &d.placement);
            if (e - d.motion_energy).abs() > 1e-9 * e.abs().max(1.0) {
                rep.failures.push((i, format!("motion energy {e} differs from stored {}", d.motion_energy)));
            }
        }
        let v = verify_design(&inst, d, rec.scheme, at.run.robust);
        rep.checked += 1;
        if !v.ok {
            rep.failures.push((i, format!("{v:?}")));
        }
        if rec.avg_power_w.is_some_and(|p| (p - d.avg_power).abs() > 1e-12 * p.abs().max(1.0)) {
            rep.failures.push((i, "record power differs from design".into()));
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(schemes: &[Scheme]) -> ScenarioConfig {
        let mut c = ScenarioConfig { id: "t".into(), ..Default::default() };
        c.grid = GridSection { l: 20.0 / 60.0, d: 10.0 };
        c.run.schemes = schemes.to_vec();
        c.run.workers = 1;
        c
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let a: u64 = substream("s", &[1, 2]).random();
        let b: u64 = substream("s", &[1, 2]).random();
        let c: u64 = substream("s", &[1, 3]).random();
        let d: u64 = substream("u", &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn one_point_one_record() {
        let f = run_experiment(&small(&[Scheme::Random])).unwrap();
        assert_eq!(f.records.len(), 1);
        assert_eq!(f.designs.len(), 1);
        let r = &f.records[0];
        assert!(r.verified, "{r:?}");
        let (p, e, rad) = (r.avg_power_w.unwrap(), r.motion_energy_j.unwrap(), r.radiated_power_w.unwrap());
        assert!((p - (e + 0.27 * rad) / 0.3).abs() < 1e-12);
    }

    #[test]
    fn energy_efficiency_examples() {
        let inst = build_instance(&small(&[Scheme::Bnb]), 1, None).unwrap();
        let mut d = DesignSolution::new(&inst, inst.initial_positions.clone(), DMatrix::zeros(2, 2), crate::model::DesignStatus::Feasible);
        d.radiated_power = 1.0;
        d.avg_power = 1.0;
        assert!((energy_efficiency(&d, &[1.0], 0.03, 0.27, true).unwrap() - 1.0).abs() < 1e-12);
        let ma = energy_efficiency(&d, &[1.0], 1e-12, 0.27, false).unwrap();
        assert!((ma - 1.0).abs() < 1e-9);
        d.avg_power = 2.0;
        let half = energy_efficiency(&d, &[1.0], 0.03, 0.27, false).unwrap();
        d.avg_power = 1.0;
        let full = energy_efficiency(&d, &[1.0], 0.03, 0.27, false).unwrap();
        assert!((full - 2.0 * half).abs() < 1e-12);
        d.radiated_power = 0.0;
        assert!(energy_efficiency(&d, &[1.0], 0.03, 0.27, true).is_none());
    }
}
