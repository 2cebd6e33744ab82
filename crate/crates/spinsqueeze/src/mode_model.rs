//! Stationary two-component modes in state-dependent traps, the interaction
//! strength derived from them, and a simple splitting-sequence model.
//!
//! The longitudinal problem is solved on a 1D grid. The transverse profile is a
//! Gaussian whose width is minimized locally for each component, which reduces
//! to the harmonic ground state at low density.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;
use thiserror::Error;

pub const HBAR: f64 = 1.054_571_817e-34;
pub const BOHR: f64 = 5.291_772_109_03e-11;
pub const AMU: f64 = 1.660_539_066_60e-27;
pub const RB87_MASS: f64 = 86.909_180_527 * AMU;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no convergence after {iterations} iterations (relative energy change {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },
}
pub type ModeResult<T> = Result<T, ModeError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrapSpec {
    /// Longitudinal trap frequency (Hz).
    pub f_long: f64,
    /// Transverse trap frequency (Hz), both transverse axes.
    pub f_ax: f64,
    /// Displacement of the state-1 minimum along the longitudinal axis (m).
    pub separation: f64,
}

impl TrapSpec {
    pub fn new(f_long: f64, f_ax: f64, separation: f64) -> ModeResult<Self> {
        let t = TrapSpec { f_long, f_ax, separation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> ModeResult<()> {
        if !(self.f_long > 0.0 && self.f_ax > 0.0 && self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(ModeError::InvalidArgument(format!("bad trap {self:?}")));
        }
        Ok(())
    }

    pub fn with_separation(&self, separation: f64) -> Self {
        TrapSpec { separation, ..*self }
    }

    fn omega_long(&self) -> f64 {
        2.0 * PI * self.f_long
    }
}

impl Default for TrapSpec {
    fn default() -> Self {
        TrapSpec { f_long: 109.0, f_ax: 500.0, separation: 0.52e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatteringSpec {
    /// Scattering lengths in Bohr radii.
    pub a00: f64,
    pub a01: f64,
    pub a11: f64,
    /// Atomic mass (kg).
    pub mass: f64,
}

impl ScatteringSpec {
    pub fn validate(&self) -> ModeResult<()> {
        if !(self.a00 > 0.0 && self.a01 > 0.0 && self.a11 > 0.0 && self.mass > 0.0) {
            return Err(ModeError::InvalidArgument(format!("bad scattering spec {self:?}")));
        }
        Ok(())
    }

    /// Coupling constant 4 pi hbar^2 a / m (J m^3).
    pub fn coupling(&self, j: usize, k: usize) -> f64 {
        4.0 * PI * HBAR * HBAR * self.length(j, k) / self.mass
    }

    /// Scattering length in metres.
    pub fn length(&self, j: usize, k: usize) -> f64 {
        BOHR * match (j, k) {
            (0, 0) => self.a00,
            (1, 1) => self.a11,
            _ => self.a01,
        }
    }
}

impl Default for ScatteringSpec {
    /// Rubidium-87 clock states.
    fn default() -> Self {
        ScatteringSpec { a00: 100.4, a01: 97.7, a11: 95.0, mass: RB87_MASS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transverse {
    /// Gaussian width minimized at each point.
    Variational,
    /// Harmonic ground-state width everywhere.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub grid_points: usize,
    /// Grid half-width in Thomas-Fermi radii, added to half the separation.
    pub tf_radii: f64,
    /// Imaginary-time step in units of 1/omega_long.
    pub dt: f64,
    /// Relative energy change per step at which the solve stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub transverse: Transverse,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            grid_points: 512,
            tf_radii: 6.0,
            dt: 0.005,
            tolerance: 1e-10,
            max_iterations: 400_000,
            transverse: Transverse::Variational,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeProfile {
    /// Uniform longitudinal grid (m).
    pub grid: Vec<f64>,
    /// Longitudinal densities (1/m), each integrating to one.
    pub density0: Vec<f64>,
    pub density1: Vec<f64>,
    pub n0: f64,
    pub n1: f64,
}

impl ModeProfile {
    pub fn spacing(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn density(&self, which: usize) -> &[f64] {
        if which == 0 {
            &self.density0
        } else {
            &self.density1
        }
    }

    pub fn centroid(&self, which: usize) -> f64 {
        self.grid.iter().zip(self.density(which)).map(|(z, d)| z * d).sum::<f64>() * self.spacing()
    }

    pub fn rms_width(&self, which: usize) -> f64 {
        let c = self.centroid(which);
        (self.grid.iter().zip(self.density(which)).map(|(z, d)| (z - c).powi(2) * d).sum::<f64>() * self.spacing()).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Total energy (J) sampled every `ENERGY_STRIDE` steps.
    pub energies: Vec<f64>,
}

const ENERGY_STRIDE: usize = 10;

/// Dimensionless problem: lengths in units of the longitudinal oscillator length,
/// energies in units of hbar omega_long.
struct Problem {
    x: Vec<f64>,
    dx: f64,
    k2: Vec<f64>,
    pot: [Vec<f64>; 2],
    atoms: [f64; 2],
    /// Scattering lengths over the oscillator length.
    a: [[f64; 2]; 2],
    ratio: f64,
    transverse: Transverse,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    length: f64,
}

fn oscillator_length(trap: &TrapSpec, scat: &ScatteringSpec) -> f64 {
    (HBAR / (scat.mass * trap.omega_long())).sqrt()
}

/// Thomas-Fermi half-length (in oscillator lengths) for all atoms in one cloud
/// with the harmonic transverse width.
fn tf_radius(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64) -> f64 {
    let az = oscillator_length(trap, scat);
    let g = 2.0 * trap.f_ax / trap.f_long * scat.length(0, 1) / az;
    (1.5 * n_total * g).cbrt()
}

impl Problem {
    fn new(trap: &TrapSpec, scat: &ScatteringSpec, n0: f64, n1: f64, opts: &SolverOptions) -> Self {
        let length = oscillator_length(trap, scat);
        let sep = trap.separation / length;
        let half = opts.tf_radii * tf_radius(trap, scat, n0 + n1).max(2.0) + 0.5 * sep;
        let m = opts.grid_points;
        let dx = 2.0 * half / m as f64;
        let x: Vec<f64> = (0..m).map(|i| 0.5 * sep - half + i as f64 * dx).collect();
        Self::on_grid(trap, scat, n0, n1, x, opts.transverse)
    }

    /// `x` is a uniform grid in oscillator lengths.
    fn on_grid(trap: &TrapSpec, scat: &ScatteringSpec, n0: f64, n1: f64, x: Vec<f64>, transverse: Transverse) -> Self {
        let length = oscillator_length(trap, scat);
        let sep = trap.separation / length;
        let m = x.len();
        let dx = x[1] - x[0];
        let k2 = (0..m)
            .map(|i| {
                let f = if i <= m / 2 { i as f64 } else { i as f64 - m as f64 };
                (2.0 * PI * f / (m as f64 * dx)).powi(2)
            })
            .collect();
        let pot = [x.iter().map(|x| 0.5 * x * x).collect(), x.iter().map(|x| 0.5 * (x - sep).powi(2)).collect()];
        let a = [
            [scat.length(0, 0) / length, scat.length(0, 1) / length],
            [scat.length(1, 0) / length, scat.length(1, 1) / length],
        ];
        let mut planner = FftPlanner::new();
        Problem {
            x,
            dx,
            k2,
            pot,
            atoms: [n0, n1],
            a,
            ratio: trap.f_ax / trap.f_long,
            transverse,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
            length,
        }
    }

    /// Squared transverse widths (relative to the harmonic ground state) at linear densities `n`.
    fn widths(&self, n: [f64; 2]) -> [f64; 2] {
        if self.transverse == Transverse::Fixed {
            return [1.0, 1.0];
        }
        let a = &self.a;
        let mut u = [
            (1.0 + 2.0 * (a[0][0] * n[0] + a[0][1] * n[1])).sqrt(),
            (1.0 + 2.0 * (a[1][0] * n[0] + a[1][1] * n[1])).sqrt(),
        ];
        for _ in 0..60 {
            let next = [
                (1.0 + 2.0 * a[0][0] * n[0] + 8.0 * a[0][1] * n[1] * (u[0] / (u[0] + u[1])).powi(2)).sqrt(),
                (1.0 + 2.0 * a[1][1] * n[1] + 8.0 * a[0][1] * n[0] * (u[1] / (u[0] + u[1])).powi(2)).sqrt(),
            ];
            let change = (next[0] - u[0]).abs().max((next[1] - u[1]).abs());
            u = next;
            if change < 1e-15 {
                break;
            }
        }
        u
    }

    fn linear_densities(&self, psi: &[Vec<f64>; 2], i: usize) -> [f64; 2] {
        [self.atoms[0] * psi[0][i] * psi[0][i], self.atoms[1] * psi[1][i] * psi[1][i]]
    }

    /// Density-dependent part of the potential for both components.
    fn mean_field(&self, psi: &[Vec<f64>; 2]) -> [Vec<f64>; 2] {
        let m = self.x.len();
        let mut out = [vec![0.0; m], vec![0.0; m]];
        for i in 0..m {
            let n = self.linear_densities(psi, i);
            let u = self.widths(n);
            for j in 0..2 {
                let mut v = 0.5 * (1.0 / u[j] + u[j]);
                for k in 0..2 {
                    v += 4.0 * self.a[j][k] * n[k] / (u[j] + u[k]);
                }
                out[j][i] = self.ratio * v;
            }
        }
        out
    }

    fn kinetic(&self, psi: &[f64]) -> f64 {
        let mut buf: Vec<Complex<f64>> = psi.iter().map(|p| Complex::new(*p, 0.0)).collect();
        self.fwd.process(&mut buf);
        let m = psi.len() as f64;
        0.5 * buf.iter().zip(&self.k2).map(|(c, k2)| k2 * c.norm_sqr()).sum::<f64>() * self.dx / m
    }

    fn energy(&self, psi: &[Vec<f64>; 2]) -> f64 {
        let mut e = 0.0;
        for j in 0..2 {
            let pot: f64 = psi[j].iter().zip(&self.pot[j]).map(|(p, v)| p * p * v).sum::<f64>() * self.dx;
            e += self.atoms[j] * (self.kinetic(&psi[j]) + pot);
        }
        for i in 0..self.x.len() {
            let n = self.linear_densities(psi, i);
            let u = self.widths(n);
            let mut local = 0.0;
            for j in 0..2 {
                local += n[j] * 0.5 * (1.0 / u[j] + u[j]);
                for k in 0..2 {
                    local += 2.0 * self.a[j][k] * n[j] * n[k] / (u[j] + u[k]);
                }
            }
            e += self.ratio * local * self.dx;
        }
        e
    }

    fn normalize(&self, p: &mut [f64]) {
        let s = 1.0 / (p.iter().map(|x| x * x).sum::<f64>() * self.dx).sqrt();
        p.iter_mut().for_each(|x| *x *= s);
    }

    fn step(&self, psi: &mut [Vec<f64>; 2], dt: f64, buf: &mut [Complex<f64>]) {
        let mf = self.mean_field(psi);
        let m = self.x.len() as f64;
        for j in 0..2 {
            let half: Vec<f64> = self.pot[j].iter().zip(&mf[j]).map(|(v, w)| (-0.5 * dt * (v + w)).exp()).collect();
            for ((b, p), h) in buf.iter_mut().zip(&psi[j]).zip(&half) {
                *b = Complex::new(p * h, 0.0);
            }
            self.fwd.process(buf);
            for (b, k2) in buf.iter_mut().zip(&self.k2) {
                *b *= (-0.5 * dt * k2).exp() / m;
            }
            self.inv.process(buf);
            for ((p, b), h) in psi[j].iter_mut().zip(buf.iter()).zip(&half) {
                *p = b.re * h;
            }
            self.normalize(&mut psi[j]);
        }
    }

    fn chemical_potential(&self, psi: &[Vec<f64>; 2], which: usize) -> f64 {
        let mf = self.mean_field(psi);
        let p = &psi[which];
        let pot: f64 = p.iter().zip(self.pot[which].iter().zip(&mf[which])).map(|(p, (v, w))| p * p * (v + w)).sum::<f64>() * self.dx;
        self.kinetic(p) + pot
    }
}

fn check_atoms(n0: f64, n1: f64) -> ModeResult<()> {
    if !(n0 >= 0.0 && n1 >= 0.0 && n0 + n1 > 0.0) {
        return Err(ModeError::InvalidArgument(format!("atom numbers ({n0}, {n1})")));
    }
    Ok(())
}

fn solve(trap: &TrapSpec, scat: &ScatteringSpec, n0: f64, n1: f64, opts: &SolverOptions) -> ModeResult<(Problem, [Vec<f64>; 2], SolveStats)> {
    trap.validate()?;
    scat.validate()?;
    check_atoms(n0, n1)?;
    if opts.grid_points < 16 || !(opts.dt > 0.0) || !(opts.tolerance > 0.0) {
        return Err(ModeError::InvalidArgument(format!("bad solver options {opts:?}")));
    }
    let prob = Problem::new(trap, scat, n0, n1, opts);
    let sep = trap.separation / prob.length;
    let w = (0.5 * tf_radius(trap, scat, n0 + n1)).max(1.0);
    let mut psi = [
        prob.x.iter().map(|x| (-0.5 * (x / w).powi(2)).exp()).collect::<Vec<f64>>(),
        prob.x.iter().map(|x| (-0.5 * ((x - sep) / w).powi(2)).exp()).collect::<Vec<f64>>(),
    ];
    for p in psi.iter_mut() {
        prob.normalize(p);
    }
    let mut buf = vec![Complex::new(0.0, 0.0); prob.x.len()];
    let scale = HBAR * trap.omega_long();
    let mut e_old = prob.energy(&psi);
    let mut energies = vec![e_old * scale];
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iterations {
        for _ in 0..ENERGY_STRIDE {
            prob.step(&mut psi, opts.dt, &mut buf);
        }
        it += ENERGY_STRIDE;
        let e = prob.energy(&psi);
        energies.push(e * scale);
        residual = (e_old - e).abs() / ENERGY_STRIDE as f64 / e.abs();
        e_old = e;
        if residual < opts.tolerance {
            return Ok((prob, psi, SolveStats { iterations: it, energies }));
        }
    }
    Err(ModeError::ConvergenceFailure { iterations: it, residual })
}

fn to_profile(prob: &Problem, psi: &[Vec<f64>; 2]) -> ModeProfile {
    let l = prob.length;
    let dens = |p: &Vec<f64>| p.iter().map(|x| x * x / l).collect::<Vec<f64>>();
    ModeProfile {
        grid: prob.x.iter().map(|x| x * l).collect(),
        density0: dens(&psi[0]),
        density1: dens(&psi[1]),
        n0: prob.atoms[0],
        n1: prob.atoms[1],
    }
}

/// Coupled ground state by imaginary-time split-step propagation.
pub fn stationary_modes(trap: &TrapSpec, scat: &ScatteringSpec, n0: u64, n1: u64) -> ModeResult<ModeProfile> {
    stationary_modes_with(trap, scat, n0 as f64, n1 as f64, &SolverOptions::default()).map(|r| r.0)
}

pub fn stationary_modes_with(
    trap: &TrapSpec,
    scat: &ScatteringSpec,
    n0: f64,
    n1: f64,
    opts: &SolverOptions,
) -> ModeResult<(ModeProfile, SolveStats)> {
    let (prob, psi, stats) = solve(trap, scat, n0, n1, opts)?;
    Ok((to_profile(&prob, &psi), stats))
}

/// Chemical potential (J) of component `which` for converged modes.
pub fn chemical_potential(trap: &TrapSpec, scat: &ScatteringSpec, modes: &ModeProfile, which: usize) -> ModeResult<f64> {
    chemical_potential_with(trap, scat, modes, which, Transverse::Variational)
}

pub fn chemical_potential_with(
    trap: &TrapSpec,
    scat: &ScatteringSpec,
    modes: &ModeProfile,
    which: usize,
    transverse: Transverse,
) -> ModeResult<f64> {
    if which > 1 {
        return Err(ModeError::InvalidArgument(format!("component {which}")));
    }
    if modes.grid.len() < 2 {
        return Err(ModeError::InvalidArgument("grid needs >= 2 points".into()));
    }
    let l = oscillator_length(trap, scat);
    let prob = Problem::on_grid(trap, scat, modes.n0, modes.n1, modes.grid.iter().map(|z| z / l).collect(), transverse);
    let psi = [
        modes.density0.iter().map(|d| (d * l).sqrt()).collect(),
        modes.density1.iter().map(|d| (d * l).sqrt()).collect(),
    ];
    Ok(prob.chemical_potential(&psi, which) * HBAR * trap.omega_long())
}

/// Normalized density overlap of the two components.
pub fn overlap_lambda(modes: &ModeProfile) -> f64 {
    let cross: f64 = modes.density0.iter().zip(&modes.density1).map(|(a, b)| a * b).sum();
    let s0: f64 = modes.density0.iter().map(|a| a * a).sum();
    let s1: f64 = modes.density1.iter().map(|a| a * a).sum();
    if s0 == 0.0 || s1 == 0.0 {
        return 0.0;
    }
    (cross / (s0 * s1).sqrt()).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiOptions {
    /// Finite-difference step in atom number; `None` means N/100.
    pub step: Option<f64>,
    pub solver: SolverOptions,
}

impl Default for ChiOptions {
    fn default() -> Self {
        ChiOptions { step: None, solver: SolverOptions::default() }
    }
}

/// Partial derivatives d mu_j / d N_k (J per atom) at N0 = N1 = N/2, indexed [j][k].
pub fn chemical_potential_derivatives(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64, opts: &ChiOptions) -> ModeResult<[[f64; 2]; 2]> {
    if !(n_total >= 2.0) {
        return Err(ModeError::InvalidArgument(format!("N = {n_total}, need >= 2")));
    }
    let h = opts.step.unwrap_or(n_total / 100.0);
    if !(h > 0.0 && h < n_total) {
        return Err(ModeError::InvalidArgument(format!("step {h}")));
    }
    let c = n_total / 2.0;
    let scale = HBAR * trap.omega_long();
    let shifts = [(c + h / 2.0, c), (c - h / 2.0, c), (c, c + h / 2.0), (c, c - h / 2.0)];
    let mus: Vec<ModeResult<[f64; 2]>> = shifts
        .par_iter()
        .map(|&(a, b)| {
            let (prob, psi, _) = solve(trap, scat, a, b, &opts.solver)?;
            Ok([prob.chemical_potential(&psi, 0) * scale, prob.chemical_potential(&psi, 1) * scale])
        })
        .collect();
    let mus: Vec<[f64; 2]> = mus.into_iter().collect::<ModeResult<_>>()?;
    let mut d = [[0.0; 2]; 2];
    for j in 0..2 {
        d[j][0] = (mus[0][j] - mus[1][j]) / h;
        d[j][1] = (mus[2][j] - mus[3][j]) / h;
    }
    Ok(d)
}

/// Twisting strength (rad/s) from the chemical-potential derivatives at equal populations.
pub fn chi_from_modes(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64) -> ModeResult<f64> {
    chi_from_modes_with(trap, scat, n_total, &ChiOptions::default())
}

pub fn chi_from_modes_with(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64, opts: &ChiOptions) -> ModeResult<f64> {
    let d = chemical_potential_derivatives(trap, scat, n_total, opts)?;
    Ok((d[0][0] + d[1][1] - d[0][1] - d[1][0]) / (2.0 * HBAR))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiLambdaRow {
    /// Trap separation (m).
    pub separation: f64,
    pub lambda: f64,
    /// rad/s
    pub chi: f64,
    /// Distance between the component centroids (m).
    pub centre_distance: f64,
    /// rms widths of the two components (m).
    pub widths: [f64; 2],
}

pub fn chi_lambda_curve(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64, separations: &[f64]) -> ModeResult<Vec<ChiLambdaRow>> {
    chi_lambda_curve_with(trap, scat, n_total, separations, &ChiOptions::default())
}

pub fn chi_lambda_curve_with(
    trap: &TrapSpec,
    scat: &ScatteringSpec,
    n_total: f64,
    separations: &[f64],
    opts: &ChiOptions,
) -> ModeResult<Vec<ChiLambdaRow>> {
    if separations.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(ModeError::InvalidArgument("separations must be sorted ascending".into()));
    }
    separations
        .par_iter()
        .map(|&s| {
            let t = trap.with_separation(s);
            t.validate()?;
            let (modes, _) = stationary_modes_with(&t, scat, n_total / 2.0, n_total / 2.0, &opts.solver)?;
            let chi = chi_from_modes_with(&t, scat, n_total, opts)?;
            Ok(ChiLambdaRow {
                separation: s,
                lambda: overlap_lambda(&modes),
                chi,
                centre_distance: modes.centroid(1) - modes.centroid(0),
                widths: [modes.rms_width(0), modes.rms_width(1)],
            })
        })
        .collect()
}

/// Separations used to tabulate chi against overlap: zero, a geometric ladder up
/// to several cloud sizes, and the trap's own separation.
pub fn default_separations(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64) -> Vec<f64> {
    if trap.separation == 0.0 {
        return vec![0.0];
    }
    let full = 3.0 * tf_radius(trap, scat, n_total) * oscillator_length(trap, scat);
    let mut s: Vec<f64> = vec![0.0, trap.separation];
    s.extend((0..7).map(|i| full / 2f64.powi(6 - i)));
    s.sort_by(f64::total_cmp);
    s.dedup_by(|a, b| (*a - *b).abs() <= 1e-3 * b.abs().max(1e-12));
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitProfile {
    /// s
    pub times: Vec<f64>,
    pub lambda_t: Vec<f64>,
    /// rad/s
    pub chi_t: Vec<f64>,
    /// Overlap of the mode amplitudes, which bounds the fringe contrast.
    pub contrast_t: Vec<f64>,
    pub contrast_estimate: f64,
    pub table: Vec<ChiLambdaRow>,
}

impl SplitProfile {
    /// Time integral of chi over the sequence (rad).
    pub fn twist_integral(&self) -> f64 {
        self.times
            .windows(2)
            .zip(self.chi_t.windows(2))
            .map(|(t, c)| 0.5 * (t[1] - t[0]) * (c[0] + c[1]))
            .sum()
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Linear interpolation of chi(t), clamped to the sequence.
    pub fn chi_at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.chi_t[0];
        }
        if t >= self.times[n - 1] {
            return self.chi_t[n - 1];
        }
        let i = self.times.partition_point(|x| *x <= t) - 1;
        let f = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.chi_t[i] * (1.0 - f) + self.chi_t[i + 1] * f
    }
}

/// chi at overlap `lambda` by linear interpolation in the table, clamped at both ends.
pub fn chi_for_lambda(table: &[ChiLambdaRow], lambda: f64) -> f64 {
    let mut rows: Vec<(f64, f64)> = table.iter().map(|r| (r.lambda, r.chi)).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = rows.len();
    if lambda <= rows[0].0 {
        return rows[0].1;
    }
    if lambda >= rows[n - 1].0 {
        return rows[n - 1].1;
    }
    let i = rows.partition_point(|r| r.0 <= lambda) - 1;
    let f = (lambda - rows[i].0) / (rows[i + 1].0 - rows[i].0);
    rows[i].1 * (1.0 - f) + rows[i + 1].1 * f
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOptions {
    pub n_times: usize,
    /// Separations for the chi table; `None` uses `default_separations`.
    pub separations: Option<Vec<f64>>,
    pub chi: ChiOptions,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions { n_times: 201, separations: None, chi: ChiOptions::default() }
    }
}

pub fn split_sequence_profile(trap: &TrapSpec, scat: &ScatteringSpec, n_total: f64, duration: f64) -> ModeResult<SplitProfile> {
    split_sequence_profile_with(trap, scat, n_total, duration, &SplitOptions::default())
}

/// The two clouds start in a shared mode and oscillate apart and back once over
/// `duration`. Their relative displacement peaks at twice the static centroid
/// distance in the split trap. Overlaps follow from equal Gaussians whose width
/// is the rms of the two static widths.
pub fn split_sequence_profile_with(
    trap: &TrapSpec,
    scat: &ScatteringSpec,
    n_total: f64,
    duration: f64,
    opts: &SplitOptions,
) -> ModeResult<SplitProfile> {
    if !(duration > 0.0) || opts.n_times < 2 {
        return Err(ModeError::InvalidArgument(format!("duration {duration}, {} samples", opts.n_times)));
    }
    let seps = opts.separations.clone().unwrap_or_else(|| default_separations(trap, scat, n_total));
    let table = chi_lambda_curve_with(trap, scat, n_total, &seps, &opts.chi)?;
    let at_trap = match table.iter().find(|r| r.separation == trap.separation) {
        Some(r) => *r,
        None => chi_lambda_curve_with(trap, scat, n_total, &[trap.separation], &opts.chi)?[0],
    };
    let d_eq = at_trap.centre_distance.max(0.0);
    let [s0, s1] = at_trap.widths;
    let sum2 = s0 * s0 + s1 * s1;
    let times: Vec<f64> = (0..opts.n_times).map(|i| duration * i as f64 / (opts.n_times - 1) as f64).collect();
    let disp: Vec<f64> = times.iter().map(|t| d_eq * (1.0 - (2.0 * PI * t / duration).cos())).collect();
    let lambda_t: Vec<f64> = disp.iter().map(|d| (-d * d / (2.0 * sum2)).exp()).collect();
    let contrast_t: Vec<f64> = disp.iter().map(|d| (-d * d / (4.0 * sum2)).exp()).collect();
    let chi_t = lambda_t.iter().map(|l| chi_for_lambda(&table, *l).max(0.0)).collect();
    Ok(SplitProfile {
        contrast_estimate: contrast_t[contrast_t.len() - 1],
        times,
        lambda_t,
        chi_t,
        contrast_t,
        table,
    })
}
