//! Planar quasi-probability reconstruction from measured marginals.
//!
//! Coordinates are (Sy, Sz) in spin units. The marginal at angle `theta` is the
//! distribution of `S_theta = cos(theta) Sz - sin(theta) Sy`, i.e. the
//! projection onto `n = (-sin theta, cos theta)`. Angles in `[-90, 90]` degrees
//! cover the full tomographic range because `p_{theta + pi}(s) = p_theta(-s)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::metrology::{min_variance_from_cov, MinVariance};

#[derive(Debug, Error)]
pub enum WignerError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contour at level {level} reaches the grid boundary")]
    BoundaryClipped { level: f64 },
    #[error("no closed contour encloses the maximum")]
    NoContour,
}
pub type WignerResult<T> = Result<T, WignerError>;

#[derive(Clone, Debug, PartialEq)]
pub enum WignerWarning {
    /// Fewer angles than a well-posed reconstruction needs.
    IllPosed { n_angles: usize },
}

impl std::fmt::Display for WignerWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WignerWarning::IllPosed { n_angles } => write!(f, "only {n_angles} angles, reconstruction is ill-posed"),
        }
    }
}

/// Density of one spin component on a uniform axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    pub s_axis: Vec<f64>,
    pub density: Vec<f64>,
}

impl Marginal {
    pub fn spacing(&self) -> f64 {
        self.s_axis[1] - self.s_axis[0]
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.density, self.spacing())
    }

    /// Linear interpolation, zero outside the axis.
    pub fn value_at(&self, s: f64) -> f64 {
        interp_uniform(&self.density, self.s_axis[0], self.spacing(), s)
    }

    pub fn mean_and_variance(&self) -> (f64, f64) {
        let ds = self.spacing();
        let norm = self.integral();
        let m = self.s_axis.iter().zip(&self.density).map(|(s, p)| s * p).sum::<f64>() * ds / norm;
        let v = self.s_axis.iter().zip(&self.density).map(|(s, p)| (s - m).powi(2) * p).sum::<f64>() * ds / norm;
        (m, v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    /// Strictly increasing angles (rad).
    pub angles: Vec<f64>,
    pub marginals: Vec<Marginal>,
}

impl ProjectionSet {
    pub fn new(angles: Vec<f64>, marginals: Vec<Marginal>) -> WignerResult<Self> {
        if angles.len() != marginals.len() || angles.is_empty() {
            return Err(WignerError::InvalidArgument("one marginal per angle required".into()));
        }
        if angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(WignerError::InvalidArgument("angles must be strictly increasing".into()));
        }
        if marginals.iter().any(|m| m.s_axis.len() < 2 || m.s_axis.len() != m.density.len()) {
            return Err(WignerError::InvalidArgument("each marginal needs >= 2 points and matching lengths".into()));
        }
        Ok(ProjectionSet { angles, marginals })
    }
}

/// Values on a regular (Sy, Sz) grid, stored row-major with Sz as the row index.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerGrid {
    pub sy_axis: Vec<f64>,
    pub sz_axis: Vec<f64>,
    pub values: Vec<f64>,
}

impl WignerGrid {
    pub fn from_fn(sy_axis: Vec<f64>, sz_axis: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(sy_axis.len() * sz_axis.len());
        for z in &sz_axis {
            for y in &sy_axis {
                values.push(f(*y, *z));
            }
        }
        WignerGrid { sy_axis, sz_axis, values }
    }

    pub fn ny(&self) -> usize {
        self.sy_axis.len()
    }

    pub fn nz(&self) -> usize {
        self.sz_axis.len()
    }

    pub fn dy(&self) -> f64 {
        self.sy_axis[1] - self.sy_axis[0]
    }

    pub fn dz(&self) -> f64 {
        self.sz_axis[1] - self.sz_axis[0]
    }

    pub fn at(&self, iy: usize, iz: usize) -> f64 {
        self.values[iz * self.ny() + iy]
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dy() * self.dz()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > self.values[b] { i } else { b });
        (i % self.ny(), i / self.ny())
    }

    pub fn max(&self) -> f64 {
        let (y, z) = self.argmax();
        self.at(y, z)
    }

    /// Bilinear interpolation, zero outside the grid.
    pub fn value(&self, y: f64, z: f64) -> f64 {
        let (fy, fz) = ((y - self.sy_axis[0]) / self.dy(), (z - self.sz_axis[0]) / self.dz());
        if fy < 0.0 || fz < 0.0 || fy > (self.ny() - 1) as f64 || fz > (self.nz() - 1) as f64 {
            return 0.0;
        }
        let (iy, iz) = ((fy.floor() as usize).min(self.ny() - 2), (fz.floor() as usize).min(self.nz() - 2));
        let (ty, tz) = (fy - iy as f64, fz - iz as f64);
        (1.0 - ty) * (1.0 - tz) * self.at(iy, iz)
            + ty * (1.0 - tz) * self.at(iy + 1, iz)
            + (1.0 - ty) * tz * self.at(iy, iz + 1)
            + ty * tz * self.at(iy + 1, iz + 1)
    }

    /// Mean and (Sy, Sz) covariance of the grid treated as a weight.
    pub fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut s = [0.0; 6];
        for (iz, z) in self.sz_axis.iter().enumerate() {
            for (iy, y) in self.sy_axis.iter().enumerate() {
                let w = self.at(iy, iz);
                s[0] += w;
                s[1] += w * y;
                s[2] += w * z;
                s[3] += w * y * y;
                s[4] += w * z * z;
                s[5] += w * y * z;
            }
        }
        let (my, mz) = (s[1] / s[0], s[2] / s[0]);
        let c = s[5] / s[0] - my * mz;
        ([my, mz], [[s[3] / s[0] - my * my, c], [c, s[4] / s[0] - mz * mz]])
    }
}

/// Output grid: `n x n` points on a square centred at `center` with half side `half_width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub center: (f64, f64),
    pub half_width: f64,
    pub n: usize,
}

impl GridSpec {
    /// 257 x 257 points over +-4 sqrt(N)/2.
    pub fn for_atoms(n_atoms: f64) -> Self {
        GridSpec { center: (0.0, 0.0), half_width: 4.0 * n_atoms.sqrt() / 2.0, n: 257 }
    }

    pub fn axes(&self) -> (Vec<f64>, Vec<f64>) {
        let ax = |c: f64| linspace(c - self.half_width, c + self.half_width, self.n);
        (ax(self.center.0), ax(self.center.1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    RamLak,
    Hann,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContourResult {
    pub level: f64,
    /// Closed polygon; the first point is not repeated at the end.
    pub polyline: Vec<(f64, f64)>,
    pub enclosed_area: f64,
}

impl ContourResult {
    /// Centroid and covariance of the enclosed region.
    pub fn region_moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let p = &self.polyline;
        let (mut a, mut cx, mut cy, mut ixx, mut iyy, mut ixy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..p.len() {
            let (x0, y0) = p[i];
            let (x1, y1) = p[(i + 1) % p.len()];
            let cr = x0 * y1 - x1 * y0;
            a += cr;
            cx += (x0 + x1) * cr;
            cy += (y0 + y1) * cr;
            ixx += (x0 * x0 + x0 * x1 + x1 * x1) * cr;
            iyy += (y0 * y0 + y0 * y1 + y1 * y1) * cr;
            ixy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * cr;
        }
        a /= 2.0;
        let (mx, my) = (cx / (6.0 * a), cy / (6.0 * a));
        let (vxx, vyy, vxy) = (ixx / (12.0 * a) - mx * mx, iyy / (12.0 * a) - my * my, ixy / (24.0 * a) - mx * my);
        ([mx, my], [[vxx, vxy], [vxy, vyy]])
    }

    /// Direction of the short axis in the `S_theta` convention.
    pub fn orientation(&self) -> MinVariance {
        min_variance_from_cov(&self.region_moments().1)
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn trapezoid(ys: &[f64], dx: f64) -> f64 {
    if ys.len() < 2 {
        return 0.0;
    }
    (ys.iter().sum::<f64>() - 0.5 * (ys[0] + ys[ys.len() - 1])) * dx
}

fn interp_uniform(ys: &[f64], x0: f64, dx: f64, x: f64) -> f64 {
    let f = (x - x0) / dx;
    let last = (ys.len() - 1) as f64;
    if !(f >= 0.0 && f <= last) {
        return 0.0;
    }
    let i = (f.floor() as usize).min(ys.len() - 2);
    let t = f - i as f64;
    (1.0 - t) * ys[i] + t * ys[i + 1]
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let t = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - t) + sorted[i + 1] * t
    } else {
        sorted[i]
    }
}

/// Cholesky solve of a symmetric positive-definite pentadiagonal system.
/// `d0`, `d1`, `d2` hold the main, first and second diagonals.
fn solve_penta(d0: &[f64], d1: &[f64], d2: &[f64], b: &[f64]) -> Vec<f64> {
    let m = d0.len();
    // L has diagonals l0, l1, l2
    let (mut l0, mut l1, mut l2) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for i in 0..m {
        if i >= 2 {
            l2[i] = d2[i - 2] / l0[i - 2];
        }
        if i >= 1 {
            let s = if i >= 2 { l2[i] * l1[i - 1] } else { 0.0 };
            l1[i] = (d1[i - 1] - s) / l0[i - 1];
        }
        let s = l1[i] * l1[i] + l2[i] * l2[i];
        l0[i] = (d0[i] - s).max(f64::MIN_POSITIVE).sqrt();
    }
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut s = b[i];
        if i >= 1 {
            s -= l1[i] * y[i - 1];
        }
        if i >= 2 {
            s -= l2[i] * y[i - 2];
        }
        y[i] = s / l0[i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = y[i];
        if i + 1 < m {
            s -= l1[i + 1] * x[i + 1];
        }
        if i + 2 < m {
            s -= l2[i + 2] * x[i + 2];
        }
        x[i] = s / l0[i];
    }
    x
}

/// Natural cubic smoothing spline on uniform knots: knot values and second derivatives.
struct SmoothingSpline {
    x0: f64,
    h: f64,
    g: Vec<f64>,
    gamma: Vec<f64>,
}

impl SmoothingSpline {
    /// Minimizes sum w (y - g)^2 + alpha int g''^2 for uniform spacing `h`.
    fn fit(x0: f64, h: f64, y: &[f64], w: &[f64], alpha: f64) -> Self {
        let n = y.len();
        let m = n - 2;
        // Q^T y and the band of R + alpha Q^T W^-1 Q
        let q = [1.0 / h, -2.0 / h, 1.0 / h];
        let qty: Vec<f64> = (0..m).map(|j| q[0] * y[j] + q[1] * y[j + 1] + q[2] * y[j + 2]).collect();
        let winv = |i: usize| 1.0 / w[i];
        let d0: Vec<f64> = (0..m)
            .map(|j| 2.0 * h / 3.0 + alpha * (q[0] * q[0] * winv(j) + q[1] * q[1] * winv(j + 1) + q[2] * q[2] * winv(j + 2)))
            .collect();
        let d1: Vec<f64> = (0..m.saturating_sub(1))
            .map(|j| h / 6.0 + alpha * (q[1] * q[0] * winv(j + 1) + q[2] * q[1] * winv(j + 2)))
            .collect();
        let d2: Vec<f64> = (0..m.saturating_sub(2)).map(|j| alpha * q[2] * q[0] * winv(j + 2)).collect();
        let gi = solve_penta(&d0, &d1, &d2, &qty);
        let mut gamma = vec![0.0; n];
        gamma[1..n - 1].copy_from_slice(&gi);
        let g: Vec<f64> = (0..n)
            .map(|i| {
                let mut qg = 0.0;
                for (k, qk) in q.iter().enumerate() {
                    // column j of Q touches rows j, j+1, j+2
                    if i >= k && i - k < m {
                        qg += qk * gi[i - k];
                    }
                }
                y[i] - alpha * winv(i) * qg
            })
            .collect();
        SmoothingSpline { x0, h, g, gamma }
    }

    fn chi2(&self, y: &[f64], w: &[f64]) -> f64 {
        y.iter().zip(&self.g).zip(w).map(|((a, b), w)| w * (a - b).powi(2)).sum()
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.g.len();
        let f = (x - self.x0) / self.h;
        if !(f >= 0.0 && f <= (n - 1) as f64) {
            return 0.0;
        }
        let i = (f.floor() as usize).min(n - 2);
        let (a, b) = (x - (self.x0 + i as f64 * self.h), self.x0 + (i + 1) as f64 * self.h - x);
        let h = self.h;
        (a * self.g[i + 1] + b * self.g[i]) / h
            - a * b / 6.0 * ((1.0 + a / h) * self.gamma[i + 1] + (1.0 + b / h) * self.gamma[i])
    }
}

/// Spacing of the lattice the samples lie on, if they lie on one.
fn lattice_step(sorted: &[f64]) -> Option<f64> {
    let (first, last) = (sorted[0], sorted[sorted.len() - 1]);
    let scale = first.abs().max(last.abs()).max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    let q = sorted.windows(2).map(|p| p[1] - p[0]).filter(|d| *d > tol).fold(f64::INFINITY, f64::min);
    if !q.is_finite() || (last - first) / q > 1e6 {
        return None;
    }
    let on = sorted.iter().all(|x| {
        let f = (x - first) / q;
        (f - f.round()).abs() * q <= 1e3 * tol
    });
    on.then_some(q)
}

/// Histogram with Freedman-Diaconis bins smoothed by a cubic spline whose
/// chi-square against Poisson errors equals the number of bins, evaluated on
/// `grid`, clipped at zero and renormalized. Samples on a lattice, such as
/// integer counts, get bins spanning a whole number of lattice steps.
pub fn smooth_histogram(samples: &[f64], grid: &[f64]) -> WignerResult<Marginal> {
    if samples.len() < 30 {
        return Err(WignerError::InsufficientData(format!("{} samples, need >= 30", samples.len())));
    }
    if grid.len() < 2 {
        return Err(WignerError::InvalidArgument("grid needs >= 2 points".into()));
    }
    let dg = grid[1] - grid[0];
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let mut h = if iqr > 0.0 { 2.0 * iqr / n.cbrt() } else { dg.abs() };
    let (mut lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    // counts on a lattice: whole lattice steps per bin, lattice points at bin centres
    if let Some(q) = lattice_step(&sorted) {
        h = (h / q).round().max(1.0) * q;
        lo -= 0.5 * q;
    }
    // one empty bin on each side pins the spline to zero outside the data
    let nb = ((hi - lo) / h).floor() as usize + 1;
    let x0 = lo - h;
    let mut counts = vec![0.0; nb + 2];
    for s in &sorted {
        let b = (((s - lo) / h).floor() as usize).min(nb - 1);
        counts[b + 1] += 1.0;
    }
    let y: Vec<f64> = counts.iter().map(|c| c / (n * h)).collect();
    let w: Vec<f64> = counts.iter().map(|c| (n * h).powi(2) / c.max(1.0)).collect();
    let centres_x0 = x0 + 0.5 * h;
    let spline = if y.len() < 4 {
        SmoothingSpline { x0: centres_x0, h, g: y.clone(), gamma: vec![0.0; y.len()] }
    } else {
        let target = y.len() as f64;
        let s2 = w.iter().map(|w| 1.0 / w).sum::<f64>() / w.len() as f64;
        let a0 = h.powi(3) / s2;
        let (mut la, mut lb) = (a0.ln() - 40.0, a0.ln() + 40.0);
        if SmoothingSpline::fit(centres_x0, h, &y, &w, lb.exp()).chi2(&y, &w) <= target {
            la = lb;
        } else {
            for _ in 0..80 {
                let mid = 0.5 * (la + lb);
                if SmoothingSpline::fit(centres_x0, h, &y, &w, mid.exp()).chi2(&y, &w) > target {
                    lb = mid;
                } else {
                    la = mid;
                }
            }
        }
        SmoothingSpline::fit(centres_x0, h, &y, &w, la.exp())
    };
    let mut density: Vec<f64> = grid.iter().map(|&s| spline.eval(s).max(0.0)).collect();
    let total = trapezoid(&density, dg);
    if !(total > 0.0) {
        return Err(WignerError::InsufficientData("samples fall outside the evaluation grid".into()));
    }
    density.iter_mut().for_each(|d| *d /= total);
    Ok(Marginal { s_axis: grid.to_vec(), density })
}

/// Line integrals of `grid` along the direction orthogonal to each measurement axis,
/// normalized to unit area.
pub fn forward_radon(grid: &WignerGrid, angles: &[f64]) -> WignerResult<ProjectionSet> {
    let step = grid.dy().min(grid.dz());
    let (cy, cz) = (
        0.5 * (grid.sy_axis[0] + grid.sy_axis[grid.ny() - 1]),
        0.5 * (grid.sz_axis[0] + grid.sz_axis[grid.nz() - 1]),
    );
    let radius = (0.5 * (grid.sy_axis[grid.ny() - 1] - grid.sy_axis[0])).hypot(0.5 * (grid.sz_axis[grid.nz() - 1] - grid.sz_axis[0]));
    let ns = (2.0 * radius / step).ceil() as usize + 1;
    let half = (ns as f64 - 1.0) / 2.0;
    let marginals = angles
        .iter()
        .map(|&th| {
            let (nsin, ncos) = th.sin_cos();
            let (ny, nz) = (-nsin, ncos);
            let (ty, tz) = (ncos, nsin);
            // s measured from the origin, so shift by the centre's projection
            let c_s = cy * ny + cz * nz;
            let c_t = cy * ty + cz * tz;
            let s_axis: Vec<f64> = (0..ns).map(|i| c_s + (i as f64 - half) * step).collect();
            let density: Vec<f64> = s_axis
                .iter()
                .map(|&s| {
                    (0..ns)
                        .map(|k| {
                            let t = c_t + (k as f64 - half) * step;
                            grid.value(s * ny + t * ty, s * nz + t * tz)
                        })
                        .sum::<f64>()
                        * step
                })
                .collect();
            let mut m = Marginal { s_axis, density };
            let total = m.integral();
            if total > 0.0 {
                m.density.iter_mut().for_each(|d| *d /= total);
            }
            m
        })
        .collect();
    ProjectionSet::new(angles.to_vec(), marginals)
}

/// Angular quadrature weights for angles treated as periodic with period pi.
pub fn angle_weights(angles: &[f64]) -> Vec<f64> {
    let k = angles.len();
    if k == 1 {
        return vec![PI];
    }
    let mut order: Vec<(f64, usize)> = angles.iter().enumerate().map(|(i, a)| (a.rem_euclid(PI), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut w = vec![0.0; k];
    for p in 0..k {
        let prev = if p == 0 { order[k - 1].0 - PI } else { order[p - 1].0 };
        let next = if p + 1 == k { order[0].0 + PI } else { order[p + 1].0 };
        w[order[p].1] = 0.5 * (next - prev);
    }
    w
}

/// Filtered back-projection onto the requested grid.
pub fn inverse_radon(proj: &ProjectionSet, out: &GridSpec, filter: Filter) -> WignerResult<(WignerGrid, Vec<WignerWarning>)> {
    if out.n < 2 || !(out.half_width > 0.0) {
        return Err(WignerError::InvalidArgument(format!("bad output grid {out:?}")));
    }
    let mut warnings = Vec::new();
    if proj.angles.len() < 8 {
        warnings.push(WignerWarning::IllPosed { n_angles: proj.angles.len() });
    }
    // common s axis: finest spacing, widest span, symmetric about zero
    let ds = proj.marginals.iter().map(|m| m.spacing().abs()).fold(f64::INFINITY, f64::min);
    let reach = proj
        .marginals
        .iter()
        .map(|m| m.s_axis[0].abs().max(m.s_axis[m.s_axis.len() - 1].abs()))
        .fold(0.0, f64::max);
    let half = (reach / ds).ceil() as usize;
    let ns = 2 * half + 1;
    let s0 = -(half as f64) * ds;
    let padded = (2 * ns).next_power_of_two();
    // spatial ramp kernel, transformed once
    let mut kernel = vec![Complex::new(0.0, 0.0); padded];
    kernel[0] = Complex::new(1.0 / (4.0 * ds * ds), 0.0);
    for k in (1..padded / 2).step_by(2) {
        let v = -1.0 / (PI * PI * (k * k) as f64 * ds * ds);
        kernel[k] = Complex::new(v, 0.0);
        kernel[padded - k] = Complex::new(v, 0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    fwd.process(&mut kernel);
    let response: Vec<f64> = kernel
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let f = if i <= padded / 2 { i as f64 } else { i as f64 - padded as f64 } / padded as f64;
            let win = match filter {
                Filter::RamLak => 1.0,
                Filter::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            c.re * win * ds
        })
        .collect();
    let weights = angle_weights(&proj.angles);
    let filtered: Vec<Vec<f64>> = proj
        .marginals
        .iter()
        .map(|m| {
            let mut buf: Vec<Complex<f64>> = (0..padded)
                .map(|i| if i < ns { Complex::new(m.value_at(s0 + i as f64 * ds), 0.0) } else { Complex::new(0.0, 0.0) })
                .collect();
            fwd.process(&mut buf);
            for (b, r) in buf.iter_mut().zip(&response) {
                *b *= *r;
            }
            inv.process(&mut buf);
            buf[..ns].iter().map(|c| c.re / padded as f64).collect()
        })
        .collect();
    let (sy_axis, sz_axis) = out.axes();
    let mut values = vec![0.0; sy_axis.len() * sz_axis.len()];
    for ((th, q), w) in proj.angles.iter().zip(&filtered).zip(&weights) {
        let (nsin, ncos) = th.sin_cos();
        for (iz, z) in sz_axis.iter().enumerate() {
            let row = &mut values[iz * sy_axis.len()..(iz + 1) * sy_axis.len()];
            for (v, y) in row.iter_mut().zip(&sy_axis) {
                let s = -nsin * y + ncos * z;
                *v += w * interp_uniform(q, s0, ds, s);
            }
        }
    }
    Ok((WignerGrid { sy_axis, sz_axis, values }, warnings))
}

type EdgeKey = (u8, usize, usize);

/// Closed level set at `fraction` of the maximum that encloses the maximum.
pub fn contour_at(grid: &WignerGrid, fraction: f64) -> WignerResult<ContourResult> {
    let peak = grid.max();
    if !(peak > 0.0) {
        return Err(WignerError::InvalidArgument("grid has no positive maximum".into()));
    }
    let level = fraction * peak;
    let (ny, nz) = (grid.ny(), grid.nz());
    let point = |e: EdgeKey| -> (f64, f64) {
        // kind 0: edge (iy, iz)-(iy+1, iz); kind 1: edge (iy, iz)-(iy, iz+1)
        let (kind, iy, iz) = e;
        let (a, b, p0, p1) = if kind == 0 {
            (grid.at(iy, iz), grid.at(iy + 1, iz), (grid.sy_axis[iy], grid.sz_axis[iz]), (grid.sy_axis[iy + 1], grid.sz_axis[iz]))
        } else {
            (grid.at(iy, iz), grid.at(iy, iz + 1), (grid.sy_axis[iy], grid.sz_axis[iz]), (grid.sy_axis[iy], grid.sz_axis[iz + 1]))
        };
        let t = (level - a) / (b - a);
        (p0.0 + t * (p1.0 - p0.0), p0.1 + t * (p1.1 - p0.1))
    };
    let mut adjacency: HashMap<EdgeKey, Vec<EdgeKey>> = HashMap::new();
    for iz in 0..nz - 1 {
        for iy in 0..ny - 1 {
            let v = [grid.at(iy, iz), grid.at(iy + 1, iz), grid.at(iy + 1, iz + 1), grid.at(iy, iz + 1)];
            let inside: Vec<bool> = v.iter().map(|x| *x >= level).collect();
            // edges in cyclic order: bottom, right, top, left
            let edges: [EdgeKey; 4] = [(0, iy, iz), (1, iy + 1, iz), (0, iy, iz + 1), (1, iy, iz)];
            let crossing: Vec<usize> = (0..4).filter(|&k| inside[k] != inside[(k + 1) % 4]).collect();
            let pairs: Vec<(usize, usize)> = match crossing.len() {
                2 => vec![(crossing[0], crossing[1])],
                4 => {
                    let centre = v.iter().sum::<f64>() / 4.0 >= level;
                    // join the edges around the corners that differ from the centre
                    if centre == inside[0] {
                        vec![(0, 1), (2, 3)]
                    } else {
                        vec![(3, 0), (1, 2)]
                    }
                }
                _ => vec![],
            };
            for (a, b) in pairs {
                adjacency.entry(edges[a]).or_default().push(edges[b]);
                adjacency.entry(edges[b]).or_default().push(edges[a]);
            }
        }
    }
    let (my, mz) = grid.argmax();
    let peak_pt = (grid.sy_axis[my], grid.sz_axis[mz]);
    let mut keys: Vec<EdgeKey> = adjacency.keys().copied().collect();
    keys.sort();
    let mut visited: HashMap<EdgeKey, bool> = HashMap::new();
    let mut best: Option<(f64, Vec<(f64, f64)>)> = None;
    let mut clipped = false;
    for start in keys {
        if visited.contains_key(&start) {
            continue;
        }
        // walk the component; open chains end on an edge with one neighbour
        let mut chain = vec![start];
        visited.insert(start, true);
        let mut closed = false;
        for dir in 0..2 {
            let mut cur = start;
            loop {
                let next = adjacency[&cur].iter().copied().find(|e| !visited.contains_key(e));
                match next {
                    Some(n) => {
                        visited.insert(n, true);
                        if dir == 0 {
                            chain.push(n);
                        } else {
                            chain.insert(0, n);
                        }
                        cur = n;
                    }
                    None => {
                        if adjacency[&cur].contains(&start) && chain.len() > 2 && dir == 0 {
                            closed = true;
                        }
                        break;
                    }
                }
            }
            if closed {
                break;
            }
        }
        let pts: Vec<(f64, f64)> = chain.iter().map(|e| point(*e)).collect();
        if !closed {
            clipped = true;
            continue;
        }
        if point_in_polygon(&pts, peak_pt) {
            let area = shoelace(&pts).abs();
            if best.as_ref().is_none_or(|(a, _)| area < *a) {
                best = Some((area, pts));
            }
        }
    }
    let on_border = (0..ny).any(|iy| grid.at(iy, 0) >= level || grid.at(iy, nz - 1) >= level)
        || (0..nz).any(|iz| grid.at(0, iz) >= level || grid.at(ny - 1, iz) >= level);
    match best {
        Some((area, polyline)) => Ok(ContourResult { level, polyline, enclosed_area: area }),
        None if clipped || on_border => Err(WignerError::BoundaryClipped { level }),
        None => Err(WignerError::NoContour),
    }
}

fn shoelace(p: &[(f64, f64)]) -> f64 {
    0.5 * (0..p.len())
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % p.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

fn point_in_polygon(p: &[(f64, f64)], q: (f64, f64)) -> bool {
    let mut inside = false;
    let mut j = p.len() - 1;
    for i in 0..p.len() {
        let (a, b) = (p[i], p[j]);
        if (a.1 > q.1) != (b.1 > q.1) && q.0 < (b.0 - a.0) * (q.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_grid(sy: f64, sz: f64, rho: f64, n: usize, half: f64) -> WignerGrid {
        let ax = linspace(-half, half, n);
        let det = (1.0 - rho * rho) * sy * sy * sz * sz;
        WignerGrid::from_fn(ax.clone(), ax, |y, z| {
            let q = (z * z * sy * sy - 2.0 * rho * sy * sz * y * z + y * y * sz * sz) / det;
            (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
        })
    }

    fn deg_angles(step: f64) -> Vec<f64> {
        let k = (180.0 / step).round() as usize;
        (0..=k).map(|i| (-90.0 + step * i as f64).to_radians()).collect()
    }

    fn rel_l2(a: &WignerGrid, b: &WignerGrid) -> f64 {
        let peak = b.max();
        let mse = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.values.len() as f64;
        mse.sqrt() / peak
    }

    #[test]
    fn integer_counts_do_not_alias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = rand_distr::Binomial::new(1000, 0.5).unwrap();
        let xs: Vec<f64> = (0..30_000).map(|_| b.sample(&mut rng) as f64 - 500.3).collect();
        let grid = linspace(-80.0, 80.0, 1601);
        let m = smooth_histogram(&xs, &grid).unwrap();
        let want = |s: f64| (-(s + 0.3).powi(2) / 500.0).exp() / (500.0 * PI).sqrt();
        let worst = grid.iter().zip(&m.density).map(|(s, d)| (d - want(*s)).abs()).fold(0.0, f64::max);
        assert!(worst < 0.06 * want(-0.3), "worst deviation {worst}");
        assert_eq!(lattice_step(&[0.5, 1.5, 3.5]), Some(1.0));
        assert_eq!(lattice_step(&[0.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(lattice_step(&[0.0, 1.0, 2.0 + 1e-3]), None);
    }

    #[test]
    fn histogram_recovers_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Normal::new(0.0, 10.0).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let grid = linspace(-60.0, 60.0, 481);
        let m = smooth_histogram(&xs, &grid).unwrap();
        assert!((m.integral() - 1.0).abs() < 1e-9);
        let l1: f64 = grid
            .iter()
            .zip(&m.density)
            .map(|(s, p)| (p - (-0.5 * (s / 10.0f64).powi(2)).exp() / (10.0 * (2.0 * PI).sqrt())).abs())
            .sum::<f64>()
            * (grid[1] - grid[0]);
        assert!(l1 < 0.05, "L1 {l1}");
    }

    #[test]
    fn histogram_degenerate_samples() {
        let xs = vec![3.0; 100];
        let grid = linspace(-10.0, 10.0, 201);
        let m = smooth_histogram(&xs, &grid).unwrap();
        let imax = m.density.iter().enumerate().fold(0, |b, (i, v)| if *v > m.density[b] { i } else { b });
        assert!((grid[imax] - 3.0).abs() <= 0.1 + 1e-12);
        let width = m.density.iter().filter(|v| **v > 0.0).count() as f64 * 0.1;
        assert!(width <= 0.4 + 1e-9, "support {width}");
        assert!(smooth_histogram(&xs[..10], &grid).is_err());
    }

    #[test]
    fn histogram_keeps_two_peaks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Normal::new(-20.0, 4.0).unwrap();
        let b = Normal::new(20.0, 4.0).unwrap();
        let mut xs: Vec<f64> = (0..5000).map(|_| a.sample(&mut rng)).collect();
        xs.extend((0..5000).map(|_| b.sample(&mut rng)));
        let grid = linspace(-50.0, 50.0, 1001);
        let m = smooth_histogram(&xs, &grid).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let bin = 2.0 * (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / (xs.len() as f64).cbrt();
        let peak_in = |lo: f64, hi: f64| {
            grid.iter().zip(&m.density).filter(|(s, _)| **s > lo && **s < hi).fold((0.0, 0.0), |b, (s, p)| if *p > b.1 { (*s, *p) } else { b })
        };
        let (p1, h1) = peak_in(-40.0, 0.0);
        let (p2, h2) = peak_in(0.0, 40.0);
        assert!((p1 + 20.0).abs() <= bin && (p2 - 20.0).abs() <= bin, "{p1} {p2} bin {bin}");
        let dip = m.value_at(0.0);
        assert!(dip < 0.2 * h1.min(h2));
    }

    #[test]
    fn forward_examples() {
        let iso = gaussian_grid(6.0, 6.0, 0.0, 161, 40.0);
        let p = forward_radon(&iso, &deg_angles(15.0)).unwrap();
        for m in &p.marginals {
            let (mean, var) = m.mean_and_variance();
            assert!(mean.abs() < 1e-6 && (var - 36.0).abs() < 0.5, "{var}");
            assert!((m.integral() - 1.0).abs() < 1e-9);
        }
        let aniso = gaussian_grid(9.0, 4.0, 0.0, 161, 40.0);
        let p = forward_radon(&aniso, &deg_angles(10.0)).unwrap();
        let vars: Vec<f64> = p.marginals.iter().map(|m| m.mean_and_variance().1).collect();
        let imin = vars.iter().enumerate().fold(0, |b, (i, v)| if *v < vars[b] { i } else { b });
        assert!(p.angles[imin].abs() < 1e-12);
        let spike = WignerGrid::from_fn(linspace(-5.0, 5.0, 41), linspace(-5.0, 5.0, 41), |y, z| if y.abs() < 0.1 && z.abs() < 0.1 { 1.0 } else { 0.0 });
        for m in forward_radon(&spike, &deg_angles(30.0)).unwrap().marginals {
            let imax = m.density.iter().enumerate().fold(0, |b, (i, v)| if *v > m.density[b] { i } else { b });
            assert!(m.s_axis[imax].abs() < 0.3);
        }
    }

    #[test]
    fn round_trip_gaussians() {
        let spec = GridSpec { center: (0.0, 0.0), half_width: 40.0, n: 161 };
        let iso = gaussian_grid(6.0, 6.0, 0.0, 161, 40.0);
        let (rec, w) = inverse_radon(&forward_radon(&iso, &deg_angles(5.0)).unwrap(), &spec, Filter::RamLak).unwrap();
        assert!(w.is_empty());
        assert!(rel_l2(&rec, &iso) < 0.05, "{}", rel_l2(&rec, &iso));
        assert!((rec.integral() - 1.0).abs() < 0.03);
        let aniso = gaussian_grid(9.0, 4.0, 0.0, 161, 40.0);
        let (rec, _) = inverse_radon(&forward_radon(&aniso, &deg_angles(5.0)).unwrap(), &spec, Filter::RamLak).unwrap();
        let (_, cov) = rec.moments();
        assert!((cov[0][0].sqrt() / 9.0 - 1.0).abs() < 0.05 && (cov[1][1].sqrt() / 4.0 - 1.0).abs() < 0.05, "{cov:?}");
        assert!(rel_l2(&rec, &aniso) < 0.05);
    }

    #[test]
    fn round_trip_improves_with_angles() {
        let spec = GridSpec { center: (0.0, 0.0), half_width: 40.0, n: 121 };
        let g = gaussian_grid(8.0, 3.0, 0.5, 121, 40.0);
        let errs: Vec<f64> = [20.0, 10.0, 5.0]
            .iter()
            .map(|s| rel_l2(&inverse_radon(&forward_radon(&g, &deg_angles(*s)).unwrap(), &spec, Filter::RamLak).unwrap().0, &g))
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn inverse_is_linear() {
        let spec = GridSpec { center: (0.0, 0.0), half_width: 30.0, n: 81 };
        let a = forward_radon(&gaussian_grid(5.0, 5.0, 0.0, 81, 30.0), &deg_angles(10.0)).unwrap();
        let b = forward_radon(&gaussian_grid(7.0, 3.0, 0.3, 81, 30.0), &deg_angles(10.0)).unwrap();
        let sum = ProjectionSet::new(
            a.angles.clone(),
            a.marginals
                .iter()
                .zip(&b.marginals)
                .map(|(x, y)| Marginal { s_axis: x.s_axis.clone(), density: x.density.iter().zip(&y.density).map(|(p, q)| p + q).collect() })
                .collect(),
        )
        .unwrap();
        for f in [Filter::RamLak, Filter::Hann] {
            let ra = inverse_radon(&a, &spec, f).unwrap().0;
            let rb = inverse_radon(&b, &spec, f).unwrap().0;
            let rs = inverse_radon(&sum, &spec, f).unwrap().0;
            let err = rs.values.iter().zip(ra.values.iter().zip(&rb.values)).map(|(s, (x, y))| (s - x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8);
        }
    }

    #[test]
    fn second_moments_match_marginals() {
        let spec = GridSpec { center: (0.0, 0.0), half_width: 40.0, n: 161 };
        let g = gaussian_grid(7.0, 4.0, 0.4, 161, 40.0);
        let p = forward_radon(&g, &deg_angles(5.0)).unwrap();
        let (rec, _) = inverse_radon(&p, &spec, Filter::Hann).unwrap();
        let (_, cov) = rec.moments();
        let v0 = p.marginals[18].mean_and_variance().1; // theta = 0 measures Sz
        let v90 = p.marginals[36].mean_and_variance().1; // theta = 90 measures -Sy
        assert!((cov[1][1] / v0 - 1.0).abs() < 0.05 && (cov[0][0] / v90 - 1.0).abs() < 0.05, "{cov:?} {v0} {v90}");
    }

    #[test]
    fn few_angles_warn() {
        let spec = GridSpec { center: (0.0, 0.0), half_width: 30.0, n: 41 };
        let p = forward_radon(&gaussian_grid(5.0, 5.0, 0.0, 41, 30.0), &deg_angles(45.0)).unwrap();
        let (_, w) = inverse_radon(&p, &spec, Filter::Hann).unwrap();
        assert_eq!(w, vec![WignerWarning::IllPosed { n_angles: 5 }]);
    }

    #[test]
    fn weights_cover_half_turn() {
        let w = angle_weights(&deg_angles(5.0));
        assert!((w.iter().sum::<f64>() - PI).abs() < 1e-12);
        assert!((w[0] - 2.5f64.to_radians()).abs() < 1e-12 && (w[36] - 2.5f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn contour_of_gaussian() {
        let g = gaussian_grid(6.0, 6.0, 0.0, 201, 30.0);
        let c = contour_at(&g, (-0.5f64).exp()).unwrap();
        assert!((c.enclosed_area / (PI * 36.0) - 1.0).abs() < 0.03, "{}", c.enclosed_area);
        let scaled = WignerGrid { values: g.values.iter().map(|v| v * 37.5).collect(), ..g.clone() };
        let c2 = contour_at(&scaled, (-0.5f64).exp()).unwrap();
        assert!((c.enclosed_area / c2.enclosed_area - 1.0).abs() < 1e-9);
        for p in &c2.polyline {
            let d = c.polyline.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn contour_orientation_of_tilted_ellipse() {
        // short axis along n = (-sin t, cos t) with t = 10 degrees
        let t = 10f64.to_radians();
        let (a, b) = (3.0f64, 9.0f64);
        let ax = linspace(-40.0, 40.0, 241);
        let g = WignerGrid::from_fn(ax.clone(), ax, |y, z| {
            let u = -t.sin() * y + t.cos() * z;
            let v = t.cos() * y + t.sin() * z;
            (-0.5 * (u * u / (a * a) + v * v / (b * b))).exp()
        });
        let c = contour_at(&g, (-0.5f64).exp()).unwrap();
        let o = c.orientation();
        assert!((o.theta_min - t).abs() < 0.5f64.to_radians(), "{}", o.theta_min.to_degrees());
        assert!((c.enclosed_area / (PI * a * b) - 1.0).abs() < 0.03);
    }

    #[test]
    fn contour_touching_boundary_is_error() {
        let g = gaussian_grid(30.0, 30.0, 0.0, 41, 20.0);
        assert!(matches!(contour_at(&g, (-0.5f64).exp()), Err(WignerError::BoundaryClipped { .. })));
    }
}
