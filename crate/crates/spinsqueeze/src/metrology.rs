//! Squeezing figures of merit and the entanglement-depth witness.
//!
//! The depth witness compares the measured pair (mean spin length, minimal
//! transverse variance) with the curves `F_j(x)`: the smallest value of
//! `Var(Jz) / j` reachable by a spin-`j` system whose mean spin is `x j` along x.
//! An N-atom state built from independent clusters of at most `k` atoms obeys
//! `Var(S) / (N/2) >= F_{k/2}(2 <Sx> / N)`, because each cluster contributes a
//! variance of at least `j_i F_{k/2}(x_i)`, `F` is convex and decreasing in `j`,
//! and `j F_j` only grows when clusters are merged. A violation of the curve
//! for `j = k/2` therefore proves clusters of at least `k + 1` atoms.

use std::f64::consts::PI;

use thiserror::Error;

use crate::spin_core::{variance_from_cov, SpinExpectations};
use crate::tridiag::lowest_eigenpair;

#[derive(Debug, Error)]
pub enum MetrologyError {
    #[error("mean spin is zero, contrast undefined")]
    UndefinedContrast,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mean spin fraction {0} is not reachable")]
    ConstraintInfeasible(f64),
}
pub type MetrologyResult<T> = Result<T, MetrologyError>;

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Minimal transverse variance and the angle at which it occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinVariance {
    /// Angle of `S_theta = cos(theta) Sz - sin(theta) Sy`, in `[-pi/2, pi/2)`.
    pub theta_min: f64,
    pub variance: f64,
    /// Set when the covariance is isotropic and the angle carries no information.
    pub degenerate: bool,
}

pub fn min_variance_from_cov(cov: &[[f64; 2]; 2]) -> MinVariance {
    let (vy, vz, c) = (cov[0][0], cov[1][1], 0.5 * (cov[0][1] + cov[1][0]));
    let mean = 0.5 * (vy + vz);
    let half = 0.5 * (vz - vy);
    let r = half.hypot(c);
    if r <= 1e-9 * mean.abs().max(f64::MIN_POSITIVE) {
        return MinVariance { theta_min: 0.0, variance: mean - r, degenerate: true };
    }
    // Var(theta) = mean + r cos(2 theta + alpha)
    let alpha = c.atan2(half);
    let mut theta = 0.5 * (PI - alpha);
    while theta >= PI / 2.0 {
        theta -= PI;
    }
    while theta < -PI / 2.0 {
        theta += PI;
    }
    MinVariance { theta_min: theta, variance: mean - r, degenerate: false }
}

pub fn min_variance_angle(exp: &SpinExpectations) -> MinVariance {
    min_variance_from_cov(&exp.cov_yz)
}

/// Maximum variance of the transverse spin (the anti-squeezed quadrature).
pub fn max_variance_from_cov(cov: &[[f64; 2]; 2]) -> f64 {
    let m = min_variance_from_cov(cov);
    variance_from_cov(cov, m.theta_min + PI / 2.0)
}

/// Wineland parameter N Var_min / <Sx>^2.
pub fn squeezing_parameter(n_atoms: f64, min_variance: f64, mean_sx: f64) -> MetrologyResult<f64> {
    if mean_sx == 0.0 || !mean_sx.is_finite() {
        return Err(MetrologyError::UndefinedContrast);
    }
    if !(n_atoms > 0.0) || !(min_variance >= 0.0) {
        return Err(MetrologyError::InvalidArgument(format!(
            "need n_atoms > 0 and min_variance >= 0, got {n_atoms}, {min_variance}"
        )));
    }
    Ok(n_atoms * min_variance / (mean_sx * mean_sx))
}

/// Fringe contrast 2|<Sx>|/N.
pub fn contrast(n_atoms: f64, mean_sx: f64) -> f64 {
    2.0 * mean_sx.abs() / n_atoms
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthCurve {
    pub j: f64,
    /// (x, F_j(x)) pairs in the order of the requested grid.
    pub samples: Vec<(f64, f64)>,
}

fn spin_matrices_real(j2: usize) -> (Vec<f64>, Vec<f64>) {
    // Jz diagonal and Jx off-diagonal for spin j = j2 / 2
    let j = j2 as f64 / 2.0;
    let jz: Vec<f64> = (0..=j2).map(|k| k as f64 - j).collect();
    let off: Vec<f64> = (0..j2).map(|k| 0.5 * (((j2 - k) * (k + 1)) as f64).sqrt()).collect();
    (jz, off)
}

/// Ground state of (Jz - c)^2 - mu Jx; returns (<Jx>, Var Jz).
fn ground_moments(jz: &[f64], off: &[f64], c: f64, mu: f64) -> (f64, f64) {
    let d = jz.len();
    let diag: Vec<f64> = jz.iter().map(|m| (m - c).powi(2)).collect();
    let scaled: Vec<f64> = off.iter().map(|o| -mu * o).collect();
    let (_, v) = lowest_eigenpair(&diag, &scaled);
    let mut jx = 0.0;
    let (mut m1, mut m2) = (0.0, 0.0);
    for k in 0..d {
        let p = v[k] * v[k];
        m1 += p * jz[k];
        m2 += p * jz[k] * jz[k];
        if k + 1 < d {
            jx += 2.0 * v[k] * v[k + 1] * off[k];
        }
    }
    (jx, (m2 - m1 * m1).max(0.0))
}

/// Minimal Var(Jz) with <Jx> = target at fixed shift `c`, by bisection on mu.
fn constrained_variance(jz: &[f64], off: &[f64], c: f64, target: f64, x_tol: f64) -> f64 {
    let (jx0, v0) = ground_moments(jz, off, c, 0.0);
    if jx0 >= target {
        return v0;
    }
    let mut hi = 1.0;
    let mut top = ground_moments(jz, off, c, hi);
    while top.0 < target {
        hi *= 2.0;
        top = ground_moments(jz, off, c, hi);
        if hi > 1e12 {
            return top.1;
        }
    }
    let mut lo = 0.0;
    let mut best = top;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = ground_moments(jz, off, c, mid);
        if r.0 < target {
            lo = mid;
        } else {
            hi = mid;
            best = r;
        }
        if (best.0 - target).abs() < x_tol || hi - lo < 1e-15 * hi {
            break;
        }
    }
    best.1
}

/// F_j(x) for a single point.
pub fn depth_bound(j: f64, x: f64) -> MetrologyResult<f64> {
    let j2 = (2.0 * j).round();
    if !(j2 >= 1.0) || (2.0 * j - j2).abs() > 1e-12 {
        return Err(MetrologyError::InvalidArgument(format!("j must be a positive half-integer, got {j}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(MetrologyError::ConstraintInfeasible(x));
    }
    if x >= 1.0 - 1e-12 {
        // only the stretched state along x reaches full length
        return Ok(0.5);
    }
    let j2 = j2 as usize;
    let (jz, off) = spin_matrices_real(j2);
    let target = x * j;
    let tol = 1e-8 * j;
    let eval = |c: f64| constrained_variance(&jz, &off, c, target, tol);
    // Var(Jz) = min over c of <(Jz - c)^2>. The optimum shift stays within one
    // unit of the origin, where the Jx matrix elements are largest: 0 for
    // integer j, moving towards 1/2 at small x for half-integer j.
    let c_max = j.min(1.0);
    let steps = 12;
    let mut best_c = 0.0;
    let mut best = eval(0.0);
    for i in 1..=steps {
        let c = c_max * i as f64 / steps as f64;
        let v = eval(c);
        if v < best {
            best = v;
            best_c = c;
        }
    }
    let h = c_max / steps as f64;
    let (mut a, mut b) = ((best_c - h).max(0.0), (best_c + h).min(c_max));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c1, mut c2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (eval(c1), eval(c2));
    for _ in 0..40 {
        if f1 < f2 {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - g * (b - a);
            f1 = eval(c1);
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + g * (b - a);
            f2 = eval(c2);
        }
    }
    Ok(best.min(f1).min(f2) / j)
}

pub fn depth_curve(j: f64, x_grid: &[f64]) -> MetrologyResult<DepthCurve> {
    let samples = x_grid
        .iter()
        .map(|&x| depth_bound(j, x).map(|f| (x, f)))
        .collect::<MetrologyResult<Vec<_>>>()?;
    Ok(DepthCurve { j, samples })
}

/// Largest cluster size that the witness proves, between 1 and the atom number.
pub fn entanglement_depth(n_atoms: f64, min_variance: f64, mean_sx: f64) -> MetrologyResult<usize> {
    if !(n_atoms > 0.0) || !(min_variance >= 0.0) {
        return Err(MetrologyError::InvalidArgument(format!(
            "need n_atoms > 0 and min_variance >= 0, got {n_atoms}, {min_variance}"
        )));
    }
    let x = contrast(n_atoms, mean_sx).min(1.0);
    let v = min_variance / (n_atoms / 2.0);
    let k_max = n_atoms.floor().max(1.0) as usize;
    let violated = |k: usize| depth_bound(k as f64 / 2.0, x).map(|f| v < f);
    if !violated(1)? {
        return Ok(1);
    }
    // curves fall with k, so the violated set is an initial segment
    let (mut lo, mut hi) = (1usize, 2usize);
    while hi <= k_max && violated(hi)? {
        lo = hi;
        hi *= 2;
    }
    let mut hi = hi.min(k_max + 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if violated(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // every cluster size up to the whole ensemble is violated
    Ok((lo + 1).min(k_max))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqueezingReport {
    pub theta_min: f64,
    pub min_variance: f64,
    pub contrast: f64,
    pub xi_squared: f64,
    pub xi_squared_db: f64,
    pub depth: usize,
    pub degenerate: bool,
}

/// Report from an atom number, mean spin and (Sy, Sz) covariance.
pub fn squeezing_report(n_atoms: f64, mean_sx: f64, cov: &[[f64; 2]; 2]) -> MetrologyResult<SqueezingReport> {
    let mv = min_variance_from_cov(cov);
    let xi = squeezing_parameter(n_atoms, mv.variance, mean_sx)?;
    Ok(SqueezingReport {
        theta_min: mv.theta_min,
        min_variance: mv.variance,
        contrast: contrast(n_atoms, mean_sx),
        xi_squared: xi,
        xi_squared_db: to_db(xi),
        depth: entanglement_depth(n_atoms, mv.variance, mean_sx)?,
        degenerate: mv.degenerate,
    })
}

pub fn report_from_expectations(exp: &SpinExpectations) -> MetrologyResult<SqueezingReport> {
    squeezing_report(exp.n_atoms as f64, exp.sx, &exp.cov_yz)
}
