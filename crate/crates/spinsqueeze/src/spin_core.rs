//! Collective-spin states of N two-level atoms on the symmetric Dicke basis.
//!
//! Amplitudes are stored by index `k = N1`, the number of atoms in |1>, so
//! `k = N/2 + m` where `m` is the Sz eigenvalue and the vector runs from
//! `m = -N/2` up to `m = +N/2`. Single-atom matrices use the ordering
//! (|1>, |0>), i.e. |1> is spin up.
//!
//! Rotations are applied through the exact eigenbasis of Sx, which for the
//! Dicke representation is a real symmetric tridiagonal matrix with the
//! integer-spaced spectrum `-N/2 ..= N/2`. A rotation about an arbitrary
//! equatorial axis is a z-gauge of a rotation about x, and a general SU(2)
//! element is handled through its z-x-z Euler angles.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tridiag::eigenvector_near;

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Tolerance on the squared norm accepted by [`CollectiveSpinState::from_amplitudes`].
pub const NORM_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SpinError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("amplitudes are not normalized (norm^2 = {0})")]
    NotNormalized(f64),
}
pub type SpinResult<T> = Result<T, SpinError>;

/// Pure state in the symmetric subspace of `n_atoms` two-level atoms.
///
/// A state with zero atoms (a single amplitude) is allowed so that loss
/// trajectories can run down to the vacuum.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectiveSpinState {
    n_atoms: usize,
    amps: Vec<C64>,
}

impl CollectiveSpinState {
    /// Wraps an amplitude vector of length N+1; the norm must already be 1.
    pub fn from_amplitudes(amps: Vec<C64>) -> SpinResult<Self> {
        if amps.is_empty() {
            return Err(SpinError::InvalidArgument("empty amplitude vector".into()));
        }
        let n2: f64 = amps.iter().map(|c| c.norm_sqr()).sum();
        if !n2.is_finite() || (n2 - 1.0).abs() > NORM_TOL {
            return Err(SpinError::NotNormalized(n2));
        }
        Ok(Self { n_atoms: amps.len() - 1, amps })
    }

    /// Wraps an amplitude vector after rescaling it to unit norm.
    pub fn from_unnormalized(mut amps: Vec<C64>) -> SpinResult<Self> {
        if amps.is_empty() {
            return Err(SpinError::InvalidArgument("empty amplitude vector".into()));
        }
        let n2: f64 = amps.iter().map(|c| c.norm_sqr()).sum();
        if !(n2.is_finite() && n2 > 0.0) {
            return Err(SpinError::NotNormalized(n2));
        }
        let s = 1.0 / n2.sqrt();
        amps.iter_mut().for_each(|c| *c *= s);
        Ok(Self { n_atoms: amps.len() - 1, amps })
    }

    pub(crate) fn from_raw(amps: Vec<C64>) -> Self {
        Self { n_atoms: amps.len() - 1, amps }
    }

    /// All atoms in |1> (`up = true`, m = +N/2) or all in |0>.
    pub fn pole(n_atoms: usize, up: bool) -> SpinResult<Self> {
        if n_atoms < 1 {
            return Err(SpinError::InvalidArgument("n_atoms must be >= 1".into()));
        }
        let mut amps = vec![C64::new(0.0, 0.0); n_atoms + 1];
        amps[if up { n_atoms } else { 0 }] = C64::new(1.0, 0.0);
        Ok(Self { n_atoms, amps })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// Total spin quantum number N/2.
    pub fn spin(&self) -> f64 {
        self.n_atoms as f64 / 2.0
    }

    /// Sz eigenvalue of basis index `k`.
    pub fn m_of(&self, k: usize) -> f64 {
        k as f64 - self.spin()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Born probabilities of the Sz outcomes, indexed like the amplitudes.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|c| c.norm_sqr()).collect()
    }

    /// Overlap <self|other>.
    pub fn inner(&self, other: &Self) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }
}

/// Means of the spin components and the (Sy, Sz) covariance matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpinExpectations {
    pub n_atoms: usize,
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
    /// `[[Var Sy, Cov], [Cov, Var Sz]]`, covariance symmetrized.
    pub cov_yz: [[f64; 2]; 2],
}

/// Rabi pulse: H = delta Sz + rabi (cos phase Sx - sin phase Sy), applied for `duration`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulseSpec {
    pub rabi: f64,
    pub phase: f64,
    pub detuning: f64,
    pub duration: f64,
}

impl PulseSpec {
    pub fn validate(&self) -> SpinResult<()> {
        if !(self.duration >= 0.0) || !(self.rabi >= 0.0) {
            return Err(SpinError::InvalidArgument(format!(
                "pulse needs duration >= 0 and rabi >= 0, got {self:?}"
            )));
        }
        if !self.phase.is_finite() || !self.detuning.is_finite() {
            return Err(SpinError::InvalidArgument(format!("non-finite pulse {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.rabi * self.duration
    }
}

/// 2x2 special-unitary matrix in the (|1>, |0>) ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Su2(pub [[C64; 2]; 2]);

impl Su2 {
    pub fn identity() -> Self {
        let o = C64::new(1.0, 0.0);
        let z = C64::new(0.0, 0.0);
        Su2([[o, z], [z, o]])
    }

    /// exp(-i angle sz).
    pub fn rz(angle: f64) -> Self {
        let z = C64::new(0.0, 0.0);
        Su2([[C64::from_polar(1.0, -angle / 2.0), z], [z, C64::from_polar(1.0, angle / 2.0)]])
    }

    /// exp(-i angle sx).
    pub fn rx(angle: f64) -> Self {
        let c = C64::new((angle / 2.0).cos(), 0.0);
        let s = C64::new(0.0, -(angle / 2.0).sin());
        Su2([[c, s], [s, c]])
    }

    /// exp(-i t (h . s)) for a real field `h` and s = sigma/2.
    pub fn from_field(h: [f64; 3], t: f64) -> Self {
        let w = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
        if w == 0.0 || t == 0.0 {
            return Self::identity();
        }
        let (n, half) = ([h[0] / w, h[1] / w, h[2] / w], w * t / 2.0);
        let (c, s) = (half.cos(), half.sin());
        Su2([
            [C64::new(c, -s * n[2]), C64::new(-s * n[1], -s * n[0])],
            [C64::new(s * n[1], -s * n[0]), C64::new(c, s * n[2])],
        ])
    }

    /// exp(-i theta S_phi) with S_phi = cos(phi) Sx - sin(phi) Sy.
    pub fn rotation(phi: f64, theta: f64) -> Self {
        Self::from_field([phi.cos(), -phi.sin(), 0.0], theta)
    }

    /// Propagator of a pulse without the nonlinearity.
    pub fn pulse(p: &PulseSpec) -> Self {
        Self::from_field(
            [p.rabi * p.phase.cos(), -p.rabi * p.phase.sin(), p.detuning],
            p.duration,
        )
    }

    /// Matrix product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Su2) -> Su2 {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[C64::new(0.0, 0.0); 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        Su2(out)
    }

    /// Euler angles with `self = Rz(a) Rx(b) Rz(c)`, b in [0, pi].
    ///
    /// The input may carry a global U(1) phase; it is divided out first.
    pub fn zxz(&self) -> (f64, f64, f64) {
        let u = &self.0;
        let det = u[0][0] * u[1][1] - u[0][1] * u[1][0];
        let g = det.sqrt();
        let (u00, u10) = (u[0][0] / g, u[1][0] / g);
        let b = 2.0 * u10.norm().atan2(u00.norm());
        let sum = if u00.norm() > 1e-300 { -u00.arg() } else { 0.0 };
        let diff = if u10.norm() > 1e-300 { u10.arg() + PI / 2.0 } else { 0.0 };
        (sum + diff, b, sum - diff)
    }
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for i in 1..=n {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    lf
}

/// Spin-coherent state pointing along (polar, azimuth); polar = 0 is all |1>.
pub fn make_coherent_state(n_atoms: usize, polar: f64, azimuth: f64) -> SpinResult<CollectiveSpinState> {
    if n_atoms < 1 {
        return Err(SpinError::InvalidArgument("n_atoms must be >= 1".into()));
    }
    if !polar.is_finite() || !azimuth.is_finite() {
        return Err(SpinError::InvalidArgument("non-finite angle".into()));
    }
    let up = C64::new((polar / 2.0).cos(), 0.0);
    let down = C64::from_polar((polar / 2.0).sin(), azimuth);
    Ok(product_state(n_atoms, up, down))
}

/// The symmetric product state (up|1> + down|0>)^N for a normalized spinor.
pub fn product_state(n: usize, up: C64, down: C64) -> CollectiveSpinState {
    let lf = ln_factorials(n);
    let (la, lb) = (up.norm().ln(), down.norm().ln());
    let (pa, pb) = (up.arg(), down.arg());
    let amps = (0..=n)
        .map(|k| {
            let nk = n - k;
            // 0 * ln 0 counts as 0 so that pole amplitudes come out exactly 1
            let ta = if k == 0 { 0.0 } else { k as f64 * la };
            let tb = if nk == 0 { 0.0 } else { nk as f64 * lb };
            let lmag = 0.5 * (lf[n] - lf[k] - lf[nk]) + ta + tb;
            if lmag == f64::NEG_INFINITY {
                C64::new(0.0, 0.0)
            } else {
                C64::from_polar(lmag.exp(), k as f64 * pa + nk as f64 * pb)
            }
        })
        .collect();
    CollectiveSpinState::from_unnormalized(amps).expect("product state of a normalized spinor")
}

/// Multiplies each amplitude by exp(-i angle m): the spin-j image of `Su2::rz`.
pub fn rz(state: &CollectiveSpinState, angle: f64) -> CollectiveSpinState {
    if angle == 0.0 {
        return state.clone();
    }
    let j = state.spin();
    let amps = state
        .amps
        .iter()
        .enumerate()
        .map(|(k, c)| c * C64::from_polar(1.0, -angle * (k as f64 - j)))
        .collect();
    CollectiveSpinState::from_raw(amps)
}

/// exp(-i (delta m + chi m^2) t) on every amplitude.
pub fn evolve_oat(state: &CollectiveSpinState, detuning: f64, chi: f64, time: f64) -> CollectiveSpinState {
    let j = state.spin();
    let amps = state
        .amps
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let m = k as f64 - j;
            c * C64::from_polar(1.0, -(detuning * m + chi * m * m) * time)
        })
        .collect();
    CollectiveSpinState::from_raw(amps)
}

/// Off-diagonal element <k+1|S+|k> = sqrt((N-k)(k+1)).
#[inline]
pub fn ladder(n: usize, k: usize) -> f64 {
    (((n - k) * (k + 1)) as f64).sqrt()
}

/// Unit eigenvector of Sx (spin N/2) with eigenvalue `mu`, by inverse iteration.
///
/// The sign is fixed so that the largest component is positive.
pub fn sx_eigenvector(n: usize, mu: f64) -> Vec<f64> {
    let off: Vec<f64> = (0..n).map(|k| 0.5 * ladder(n, k)).collect();
    eigenvector_near(&vec![0.0; n + 1], &off, mu + 1e-10 * (1.0 + n as f64))
}

/// Sx eigenvector with eigenvalue N/2 - i from the three-term recurrence, run
/// from the edge (where it is the growing solution) to the middle and completed
/// by the flip symmetry v[N-k] = (-1)^i v[k]. Largest component positive.
fn sx_column_by_recurrence(off: &[f64], i: usize) -> Vec<f64> {
    let n = off.len();
    let mu = n as f64 / 2.0 - i as f64;
    let mut v = vec![0.0; n + 1];
    v[0] = 1.0;
    let half = n / 2;
    for k in 0..half {
        let prev = if k > 0 { off[k - 1] * v[k - 1] } else { 0.0 };
        v[k + 1] = (mu * v[k] - prev) / off[k];
        if v[k + 1].abs() > 1e150 {
            v[..=k + 1].iter_mut().for_each(|x| *x *= 1e-150);
        }
    }
    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
    if n % 2 == 0 && sign < 0.0 {
        v[half] = 0.0;
    }
    for k in 0..n - half {
        v[n - k] = sign * v[k];
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let imax = v.iter().enumerate().fold(0, |b, (k, x)| if x.abs() > v[b].abs() { k } else { b });
    let s = if v[imax] < 0.0 { -1.0 / norm } else { 1.0 / norm };
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Complete eigenbasis of Sx for spin N/2; column `r` has eigenvalue `r - N/2`.
#[derive(Debug)]
pub struct SxBasis {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl SxBasis {
    pub fn new(n: usize) -> Self {
        let j = n as f64 / 2.0;
        let half = n / 2;
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        // lower half from the upper half: (-1)^k v_mu[k] is an eigenvector for -mu
        let upper: Vec<Vec<f64>> = (half..=n).map(|r| sx_eigenvector(n, r as f64 - j)).collect();
        for r in 0..=n {
            if r >= half {
                cols.push(upper[r - half].clone());
            } else {
                let src = &upper[n - r - half];
                cols.push(src.iter().enumerate().map(|(k, x)| if k % 2 == 0 { *x } else { -*x }).collect());
            }
        }
        SxBasis { n, cols }
    }

    pub fn n_atoms(&self) -> usize {
        self.n
    }

    pub fn eigenvalue(&self, r: usize) -> f64 {
        r as f64 - self.n as f64 / 2.0
    }

    pub fn column(&self, r: usize) -> &[f64] {
        &self.cols[r]
    }

    /// exp(-i angle Sx) applied to an amplitude vector.
    pub fn apply_rx(&self, x: &[C64], angle: f64) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); x.len()];
        for (r, v) in self.cols.iter().enumerate() {
            let y: C64 = v.iter().zip(x).map(|(a, b)| b * *a).sum();
            let y = y * C64::from_polar(1.0, -angle * self.eigenvalue(r));
            for (o, a) in out.iter_mut().zip(v) {
                *o += y * *a;
            }
        }
        out
    }
}

fn basis_cache() -> &'static Mutex<HashMap<usize, Arc<SxBasis>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SxBasis>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

const BASIS_CACHE_CAP: usize = 8;

/// Read-only Sx eigenbasis shared between callers.
pub fn shared_sx_basis(n: usize) -> Arc<SxBasis> {
    if let Some(b) = basis_cache().lock().unwrap().get(&n) {
        return b.clone();
    }
    let b = Arc::new(SxBasis::new(n));
    let mut cache = basis_cache().lock().unwrap();
    if cache.len() >= BASIS_CACHE_CAP {
        cache.clear();
    }
    cache.entry(n).or_insert(b).clone()
}

/// Applies Rz(a) Rx(b) Rz(c).
pub fn apply_euler(state: &CollectiveSpinState, a: f64, b: f64, c: f64) -> CollectiveSpinState {
    let x = rz(state, c);
    let x = if b == 0.0 || state.n_atoms == 0 {
        x
    } else {
        CollectiveSpinState::from_raw(shared_sx_basis(state.n_atoms).apply_rx(&x.amps, b))
    };
    rz(&x, a)
}

/// Spin-N/2 representation of an SU(2) element applied to the state.
pub fn apply_su2(state: &CollectiveSpinState, u: &Su2) -> CollectiveSpinState {
    let (a, b, c) = u.zxz();
    apply_euler(state, a, b, c)
}

/// exp(-i theta S_phi) |state>.
pub fn apply_rotation(state: &CollectiveSpinState, axis_azimuth: f64, angle: f64) -> CollectiveSpinState {
    // e^{i phi Sz} Sx e^{-i phi Sz} = S_phi
    apply_euler(state, -axis_azimuth, angle, axis_azimuth)
}

/// Evolution under the full pulse Hamiltonian including chi Sz^2.
pub fn evolve_pulse(state: &CollectiveSpinState, pulse: &PulseSpec, chi: f64) -> SpinResult<CollectiveSpinState> {
    pulse.validate()?;
    if chi == 0.0 {
        return Ok(apply_su2(state, &Su2::pulse(pulse)));
    }
    let n = state.n_atoms;
    let j = state.spin();
    // gauge out the phase so the generator is real symmetric
    let h = DMatrix::from_fn(n + 1, n + 1, |r, c| {
        if r == c {
            let m = r as f64 - j;
            pulse.detuning * m + chi * m * m
        } else if r == c + 1 {
            0.5 * pulse.rabi * ladder(n, c)
        } else if c == r + 1 {
            0.5 * pulse.rabi * ladder(n, r)
        } else {
            0.0
        }
    });
    let eig = h.symmetric_eigen();
    let x = rz(state, pulse.phase);
    let mut out = vec![C64::new(0.0, 0.0); n + 1];
    for r in 0..=n {
        let v = eig.eigenvectors.column(r);
        let y: C64 = v.iter().zip(&x.amps).map(|(a, b)| b * *a).sum();
        let y = y * C64::from_polar(1.0, -eig.eigenvalues[r] * pulse.duration);
        for (o, a) in out.iter_mut().zip(v.iter()) {
            *o += y * *a;
        }
    }
    Ok(rz(&CollectiveSpinState::from_raw(out), -pulse.phase))
}

/// Exact first and second moments of the collective spin.
pub fn expectations(state: &CollectiveSpinState) -> SpinExpectations {
    let n = state.n_atoms;
    let j = state.spin();
    let c = &state.amps;
    let mut sz = 0.0;
    let mut sz2 = 0.0;
    let mut sp = C64::new(0.0, 0.0);
    let mut sp2 = C64::new(0.0, 0.0);
    let mut pm = 0.0;
    let mut anti = C64::new(0.0, 0.0);
    for k in 0..=n {
        let p = c[k].norm_sqr();
        let m = k as f64 - j;
        sz += p * m;
        sz2 += p * m * m;
        let lo = if k > 0 { ladder(n, k - 1) } else { 0.0 };
        let hi = if k < n { ladder(n, k) } else { 0.0 };
        pm += p * (lo * lo + hi * hi);
        if k < n {
            let t = c[k + 1].conj() * c[k] * hi;
            sp += t;
            anti += t * (2.0 * m + 1.0);
        }
        if k + 1 < n {
            sp2 += c[k + 2].conj() * c[k] * hi * ladder(n, k + 1);
        }
    }
    let (sx, sy) = (sp.re, sp.im);
    let sy2 = (pm - 2.0 * sp2.re) / 4.0;
    let vyy = (sy2 - sy * sy).max(0.0);
    let vzz = (sz2 - sz * sz).max(0.0);
    let cyz = anti.im / 2.0 - sy * sz;
    SpinExpectations { n_atoms: n, sx, sy, sz, cov_yz: [[vyy, cyz], [cyz, vzz]] }
}

/// Variance of cos(theta) Sz - sin(theta) Sy from a covariance matrix.
pub fn variance_from_cov(cov: &[[f64; 2]; 2], theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    c * c * cov[1][1] + s * s * cov[0][0] - 2.0 * s * c * cov[0][1]
}

pub fn variance_along(state: &CollectiveSpinState, theta: f64) -> f64 {
    variance_from_cov(&expectations(state).cov_yz, theta)
}

/// Draws an index from a discrete distribution given by (not necessarily normalized) weights.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Samples the Sz outcome m with an external generator.
pub fn sample_sz_with<R: Rng + ?Sized>(state: &CollectiveSpinState, rng: &mut R) -> f64 {
    state.m_of(sample_index(&state.probabilities(), rng))
}

/// Samples the Sz outcome m; deterministic for a fixed seed.
pub fn sample_sz(state: &CollectiveSpinState, rng_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_sz_with(state, &mut rng)
}

/// Sx eigenvectors for one atom number, computed on demand from the top of the spectrum.
///
/// Column `i` has eigenvalue `N/2 - i`. Used when only the Sz distribution after
/// a rotation is needed and the state sits near the +x pole, so a short run of
/// columns already carries all of the weight.
#[derive(Debug)]
pub struct TopSxColumns {
    n: usize,
    off: Vec<f64>,
    cols: Vec<Vec<f64>>,
}

impl TopSxColumns {
    pub fn new(n: usize) -> Self {
        TopSxColumns { n, off: (0..n).map(|k| 0.5 * ladder(n, k)).collect(), cols: Vec::new() }
    }

    pub fn n_atoms(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    fn column(&mut self, i: usize) -> &[f64] {
        while self.cols.len() <= i {
            let v = sx_column_by_recurrence(&self.off, self.cols.len());
            self.cols.push(v);
        }
        &self.cols[i]
    }
}

/// Sz probabilities of `u |state>`, computed with only as many Sx eigenvectors as
/// the state needs; the weight left out is below 1e-12. `cols` must match the
/// state's atom number.
pub fn sz_distribution_after(state: &CollectiveSpinState, u: &Su2, cols: &mut TopSxColumns) -> Vec<f64> {
    assert_eq!(cols.n, state.n_atoms, "column cache built for another atom number");
    let n = state.n_atoms;
    if n == 0 {
        return vec![1.0];
    }
    let (_, mut b, mut c) = u.zxz();
    // pick the Euler branch that keeps the state on the +x side before Rx
    let e = expectations(state);
    let sp = C64::new(e.sx, e.sy) * C64::from_polar(1.0, -c);
    if sp.re < 0.0 {
        b = -b;
        c -= PI;
    }
    let x = rz(state, c);
    let total = x.norm_sqr();
    let mut acc = 0.0;
    let mut z = vec![C64::new(0.0, 0.0); n + 1];
    let lo = x.amps.iter().position(|c| *c != C64::new(0.0, 0.0)).unwrap_or(0);
    let hi = x.amps.iter().rposition(|c| *c != C64::new(0.0, 0.0)).unwrap_or(n);
    for i in 0..=n {
        let v = cols.column(i);
        let y: C64 = v[lo..=hi].iter().zip(&x.amps[lo..=hi]).map(|(a, b)| b * *a).sum();
        acc += y.norm_sqr();
        let y = y * C64::from_polar(1.0, -b * (n as f64 / 2.0 - i as f64));
        for (o, a) in z.iter_mut().zip(v) {
            *o += y * *a;
        }
        if acc >= total * (1.0 - 1e-12) {
            break;
        }
    }
    z.iter().map(|c| c.norm_sqr()).collect()
}

/// Dense Sx, Sy, Sz for small N, used by tests as brute-force oracles.
pub fn dense_spin_matrices(n: usize) -> [DMatrix<C64>; 3] {
    let j = n as f64 / 2.0;
    let mut sp = DMatrix::<C64>::zeros(n + 1, n + 1);
    for k in 0..n {
        sp[(k + 1, k)] = C64::new(ladder(n, k), 0.0);
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm) * C64::new(0.5, 0.0);
    let sy = (&sp - &sm) * C64::new(0.0, -0.5);
    let sz = DMatrix::from_fn(n + 1, n + 1, |r, c| if r == c { C64::new(r as f64 - j, 0.0) } else { C64::new(0.0, 0.0) });
    [sx, sy, sz]
}

/// Dense exp(-i t H) for a Hermitian H, used by tests.
pub fn dense_propagator(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    (h * (-I * t)).exp()
}
