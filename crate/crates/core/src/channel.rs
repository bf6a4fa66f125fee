//! Candidate grid, far-field multipath channels, CSI perturbations and the
//! mutual-coupling matrix.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular square lattice of candidate antenna positions, row-major from the
/// origin. Lengths are in millimetres.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub wavelength: f64,
    pub side_length: f64,
    pub step: f64,
    /// Points per side.
    pub per_side: usize,
    pub positions: Vec<[f64; 2]>,
}

impl CandidateGrid {
    pub fn n_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.positions[a], self.positions[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let n = self.n_positions();
        DMatrix::from_fn(n, n, |i, j| self.distance(i, j))
    }
}

/// Builds the `(lλ/d + 1)²` lattice covering a square of side `l·λ`.
pub fn build_grid(l: f64, d: f64, wavelength: f64) -> Result<CandidateGrid> {
    if !(l > 0.0 && d > 0.0 && wavelength > 0.0) {
        return Err(Error::InvalidInput("grid scale, step and wavelength must be positive".into()));
    }
    let side = l * wavelength;
    let ratio = side / d;
    let cells = ratio.round();
    if (ratio - cells).abs() > 1e-9 * ratio.max(1.0) || cells < 1.0 {
        return Err(Error::InvalidInput(format!("side length {side} mm is not a multiple of step {d} mm")));
    }
    let per_side = cells as usize + 1;
    let mut positions = Vec::with_capacity(per_side * per_side);
    for r in 0..per_side {
        for c in 0..per_side {
            positions.push([c as f64 * d, r as f64 * d]);
        }
    }
    Ok(CandidateGrid { wavelength, side_length: side, step: d, per_side, positions })
}

/// Angles of departure and complex gains of one user's paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub elevation: Vec<f64>,
    pub azimuth: Vec<f64>,
    pub coefficients: Vec<Complex64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn pcv(&self) -> DVector<Complex64> {
        DVector::from_column_slice(&self.coefficients)
    }
}

pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Draws `L` paths per user. Elevation follows the density `cos θ / 2`
/// through its inverse CDF, azimuth is uniform, and every coefficient is
/// CN(0, L₀·D^−α) (divided by `L` when `per_path_normalize`).
pub fn sample_paths<R: Rng + ?Sized>(
    paths: usize,
    distances_m: &[f64],
    l0: f64,
    alpha: f64,
    per_path_normalize: bool,
    rng: &mut R,
) -> Result<Vec<PathSet>> {
    if paths == 0 {
        return Err(Error::InvalidInput("path count must be at least 1".into()));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    distances_m
        .iter()
        .map(|&dist| {
            if !(dist > 0.0) {
                return Err(Error::InvalidInput("user distance must be positive".into()));
            }
            let mut var = l0 * dist.powf(-alpha);
            if per_path_normalize {
                var /= paths as f64;
            }
            let mut ps = PathSet { elevation: Vec::new(), azimuth: Vec::new(), coefficients: Vec::new() };
            for _ in 0..paths {
                let u: f64 = rng.random();
                ps.elevation.push((2.0 * u - 1.0).asin());
                ps.azimuth.push(rng.random_range(-half_pi..=half_pi));
                ps.coefficients.push(complex_gaussian(rng, var));
            }
            Ok(ps)
        })
        .collect()
}

/// Per-path phase terms `exp(j·2π/λ·(x cosθ sinφ + y sinθ))` at `p`, relative
/// to the origin.
pub fn field_response_vector(paths: &PathSet, p: [f64; 2], wavelength: f64) -> DVector<Complex64> {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    DVector::from_iterator(
        paths.len(),
        paths.elevation.iter().zip(&paths.azimuth).map(|(&t, &f)| {
            let rho = k * (p[0] * t.cos() * f.sin() + p[1] * t.sin());
            Complex64::from_polar(1.0, rho)
        }),
    )
}

/// Stacks field-response vectors of `positions` as columns (L×N).
pub fn field_response_matrix(paths: &PathSet, positions: &[[f64; 2]], wavelength: f64) -> DMatrix<Complex64> {
    let mut g = DMatrix::zeros(paths.len(), positions.len());
    for (n, &p) in positions.iter().enumerate() {
        g.set_column(n, &field_response_vector(paths, p, wavelength));
    }
    g
}

/// `ĥ = Gᴴψ`.
pub fn effective_channel(frm: &DMatrix<Complex64>, pcv: &DVector<Complex64>) -> Result<DVector<Complex64>> {
    if frm.nrows() != pcv.len() {
        return Err(Error::Dimension(format!("FRM has {} rows but PCV has {} entries", frm.nrows(), pcv.len())));
    }
    Ok(frm.ad_mul(pcv))
}

/// One user's channel over the candidate grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub paths: PathSet,
    pub frm: DMatrix<Complex64>,
    pub pcv: DVector<Complex64>,
    pub channel: DVector<Complex64>,
    pub error_radius: f64,
}

impl ChannelRealization {
    pub fn new(paths: PathSet, positions: &[[f64; 2]], wavelength: f64, kappa: f64) -> Self {
        let frm = field_response_matrix(&paths, positions, wavelength);
        let pcv = paths.pcv();
        let channel = frm.ad_mul(&pcv);
        let error_radius = kappa * pcv.norm();
        Self { paths, frm, pcv, channel, error_radius }
    }

    /// Same paths re-evaluated at other coordinates.
    pub fn at_positions(&self, positions: &[[f64; 2]], wavelength: f64) -> Self {
        let mut out = Self::new(self.paths.clone(), positions, wavelength, 0.0);
        out.error_radius = self.error_radius;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Ball,
    Sphere,
}

/// Random CSI error with `‖Δψ‖ = ε` (sphere) or `≤ ε` uniformly in the ball.
pub fn perturb_pcv<R: Rng + ?Sized>(len: usize, eps: f64, mode: PerturbMode, rng: &mut R) -> DVector<Complex64> {
    if eps <= 0.0 || len == 0 {
        return DVector::zeros(len);
    }
    let mut v = DVector::from_fn(len, |_, _| complex_gaussian(rng, 2.0));
    let nrm = v.norm();
    let radius = match mode {
        PerturbMode::Sphere => eps,
        PerturbMode::Ball => {
            let u: f64 = rng.random();
            eps * u.powf(1.0 / (2.0 * len as f64))
        }
    };
    v *= Complex64::new(radius / nrm, 0.0);
    v
}

/// `C[n,n'] = exp(−(2 D/λ)(α + jπ))`.
pub fn coupling_matrix(grid: &CandidateGrid, alpha_mc: f64) -> DMatrix<Complex64> {
    coupling_matrix_at(&grid.positions, grid.wavelength, alpha_mc)
}

pub fn coupling_matrix_at(positions: &[[f64; 2]], wavelength: f64, alpha_mc: f64) -> DMatrix<Complex64> {
    let n = positions.len();
    DMatrix::from_fn(n, n, |i, j| {
        let (p, q) = (positions[i], positions[j]);
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        (-Complex64::new(alpha_mc, std::f64::consts::PI) * (2.0 * d / wavelength)).exp()
    })
}
