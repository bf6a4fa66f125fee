use mabf_core::channel::{build_grid, sample_paths, ChannelRealization};
use mabf_core::model::{random_initial_positions, InstanceData, SystemConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded desk-scale instance on a `per_side × per_side` grid with the given
/// spacing (mm) and the default physical constants.
pub fn instance(seed: u64, m: usize, k: usize, per_side: usize, step: f64, gamma_db: f64, kappa: f64) -> InstanceData {
    instance_with(seed, SystemConfig::defaults(m, k, gamma_db), per_side, step, kappa, 16)
}

pub fn instance_with(
    seed: u64,
    mut cfg: SystemConfig,
    per_side: usize,
    step: f64,
    kappa: f64,
    paths: usize,
) -> InstanceData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wavelength = 60.0;
    let l = (per_side - 1) as f64 * step / wavelength;
    let grid = build_grid(l, step, wavelength).unwrap();
    let dist: Vec<f64> = (0..cfg.k).map(|_| rng.random_range(20.0..80.0)).collect();
    let l0 = (wavelength * 1e-3 / (4.0 * std::f64::consts::PI)).powi(2);
    let ps = sample_paths(paths, &dist, l0, 2.2, false, &mut rng).unwrap();
    let chans = ps.into_iter().map(|p| ChannelRealization::new(p, &grid.positions, wavelength, kappa)).collect();
    cfg.kappa = kappa;
    let init = random_initial_positions(&grid, cfg.m, cfg.d_min, &mut rng).unwrap();
    InstanceData::new(grid, chans, cfg, init).unwrap()
}
