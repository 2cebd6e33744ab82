//! Monte Carlo runs of the pulse, twist, pulse sequence with technical noise and
//! particle loss.
//!
//! Loss is unravelled into quantum trajectories. During the twist every
//! operator involved is diagonal in the number basis up to the atom removal, so
//! the jump record of a trajectory has the same law as a classical loss process
//! started from a number state drawn from the initial populations. The record is
//! drawn that way, and the conditional state follows in closed form: each
//! amplitude is reweighted by the square root of its record likelihood and picks
//! up a phase quadratic in the initial `m`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::metrology::{min_variance_from_cov, to_db, MetrologyError};
use crate::mode_model::SplitProfile;
use crate::spin_core::{
    apply_su2, expectations, product_state, rz, sample_index, sz_distribution_after, CollectiveSpinState, PulseSpec, SpinError,
    Su2, TopSxColumns,
};
use crate::tomography::{add_imaging_noise_with, ImagingNoiseSpec, ShotRecord};

/// Two-photon Rabi frequency of the state manipulation (rad/s).
pub const DEFAULT_RABI: f64 = 2.0 * PI * 2100.0;
/// Differential light shift while the drive is on (rad/s). The drive is tuned to
/// resonance during pulses, so between pulses the superposition runs at minus
/// this rate relative to the drive.
pub const DRIVE_LIGHT_SHIFT: f64 = 2.0 * PI * 7600.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Metrology(#[from] MetrologyError),
    #[error("variance floor reaches only {best:.2} dB, target {target:.2} dB")]
    TargetUnreachable { best: f64, target: f64 },
}
pub type DynamicsResult<T> = Result<T, DynamicsError>;

/// Twisting strength over the free-evolution window.
#[derive(Clone, Debug, PartialEq)]
pub enum ChiProfile {
    /// rad/s
    Constant(f64),
    /// Piecewise-linear chi(t) (rad/s), zero outside the sampled times.
    Table { times: Vec<f64>, chi: Vec<f64> },
}

impl ChiProfile {
    pub fn from_split(profile: &SplitProfile) -> Self {
        ChiProfile::Table { times: profile.times.clone(), chi: profile.chi_t.clone() }
    }

    pub fn validate(&self) -> DynamicsResult<()> {
        match self {
            ChiProfile::Constant(c) if c.is_finite() => Ok(()),
            ChiProfile::Table { times, chi } if times.len() == chi.len() && times.len() >= 2 && times.windows(2).all(|w| w[1] > w[0]) && chi.iter().all(|c| c.is_finite()) => Ok(()),
            _ => Err(DynamicsError::InvalidArgument("chi profile needs >= 2 increasing times and finite values".into())),
        }
    }

    /// Integral of chi from 0 to `t`.
    fn cumulative(&self, t: f64) -> f64 {
        match self {
            ChiProfile::Constant(c) => c * t,
            ChiProfile::Table { times, chi } => {
                let t = t.clamp(times[0], times[times.len() - 1]);
                let mut acc = 0.0;
                for i in 0..times.len() - 1 {
                    let (a, b) = (times[i], times[i + 1]);
                    if t <= a {
                        break;
                    }
                    let e = t.min(b);
                    let ce = chi[i] + (chi[i + 1] - chi[i]) * (e - a) / (b - a);
                    acc += 0.5 * (chi[i] + ce) * (e - a);
                }
                acc
            }
        }
    }

    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        self.cumulative(t1) - self.cumulative(t0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwistSpec {
    pub profile: ChiProfile,
    /// s
    pub duration: f64,
    /// rad/s, in the frame of the drive
    pub free_detuning: f64,
    /// Multiplies the profile.
    pub chi_scale: f64,
    /// z rotation after the twist that points the mean spin along +x (rad).
    pub phase_correction: f64,
}

impl TwistSpec {
    pub fn constant(chi: f64, duration: f64) -> Self {
        TwistSpec { profile: ChiProfile::Constant(chi), duration, free_detuning: 0.0, chi_scale: 1.0, phase_correction: 0.0 }
    }

    /// Twist integral including the scale (rad).
    pub fn strength(&self) -> f64 {
        self.chi_scale * self.profile.integral(0.0, self.duration)
    }

    fn chi_integral(&self, t0: f64, t1: f64) -> f64 {
        self.chi_scale * self.profile.integral(t0, t1)
    }
}

/// How the tomography pulse realizes a rotation by `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationRule {
    /// Phase pi, area theta.
    Clockwise,
    /// Phase 0, area 2 pi - theta.
    Counterclockwise,
    /// Whichever of the two has the smaller area.
    Shortest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub prepare_pulse: PulseSpec,
    pub twist: TwistSpec,
    /// Tomography angle in [0, 2 pi).
    pub tomography_angle: f64,
    pub tomography_rabi: f64,
    pub rule: RotationRule,
}

impl SequenceSpec {
    /// pi/2 pulse to +x, the given twist, tomography at `theta`.
    pub fn new(twist: TwistSpec, theta: f64) -> Self {
        SequenceSpec {
            prepare_pulse: PulseSpec { rabi: DEFAULT_RABI, phase: PI / 2.0, detuning: 0.0, duration: PI / 2.0 / DEFAULT_RABI },
            twist,
            tomography_angle: theta,
            tomography_rabi: DEFAULT_RABI,
            rule: RotationRule::Shortest,
        }
    }

    pub fn with_angle(&self, theta: f64) -> Self {
        SequenceSpec { tomography_angle: theta, ..self.clone() }
    }

    pub fn validate(&self) -> DynamicsResult<()> {
        self.prepare_pulse.validate()?;
        self.twist.profile.validate()?;
        if !(self.twist.duration >= 0.0) || !self.twist.free_detuning.is_finite() || !self.twist.chi_scale.is_finite() {
            return Err(DynamicsError::InvalidArgument(format!("bad twist {:?}", self.twist)));
        }
        if !(self.tomography_angle >= 0.0 && self.tomography_angle < 2.0 * PI) {
            return Err(DynamicsError::InvalidArgument(format!("tomography angle {} outside [0, 2pi)", self.tomography_angle)));
        }
        if !(self.tomography_rabi > 0.0) {
            return Err(DynamicsError::InvalidArgument("tomography Rabi frequency must be > 0".into()));
        }
        Ok(())
    }

    /// Nominal tomography pulse as (phase, area).
    pub fn tomography_pulse(&self) -> (f64, f64) {
        let th = self.tomography_angle;
        let ccw = match self.rule {
            RotationRule::Clockwise => false,
            RotationRule::Counterclockwise => th > 0.0,
            RotationRule::Shortest => th > PI,
        };
        if ccw {
            (0.0, 2.0 * PI - th)
        } else {
            (PI, th)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// rad
    pub phase_rms: f64,
    /// rad/s, during pulses
    pub detuning_rms: f64,
    /// Relative rms of the Rabi frequency.
    pub pulse_power_rel_rms: f64,
    pub atom_number_mean: f64,
    pub atom_number_rms: f64,
    /// Same detuning draw for both pulses of a shot.
    pub correlated_detuning: bool,
}

impl NoiseSpec {
    pub fn quiet(atom_number: f64) -> Self {
        NoiseSpec {
            phase_rms: 0.0,
            detuning_rms: 0.0,
            pulse_power_rel_rms: 0.0,
            atom_number_mean: atom_number,
            atom_number_rms: 0.0,
            correlated_detuning: false,
        }
    }

    /// Fluctuations of the squeezing run.
    pub fn squeezing_run() -> Self {
        NoiseSpec {
            phase_rms: 8f64.to_radians(),
            detuning_rms: 2.0 * PI * 40.0,
            pulse_power_rel_rms: 0.005,
            atom_number_mean: 1250.0,
            atom_number_rms: 45.0,
            correlated_detuning: false,
        }
    }

    /// Same as the squeezing run but with the smaller phase noise of the unsplit trap.
    pub fn reference_run() -> Self {
        NoiseSpec { phase_rms: 3f64.to_radians(), ..Self::squeezing_run() }
    }

    pub fn validate(&self) -> DynamicsResult<()> {
        let v = [self.phase_rms, self.detuning_rms, self.pulse_power_rel_rms, self.atom_number_mean, self.atom_number_rms];
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(DynamicsError::InvalidArgument(format!("noise magnitudes must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRealization {
    pub n_atoms: usize,
    pub phase_offset: f64,
    pub detuning_prepare: f64,
    pub detuning_tomography: f64,
    /// Multiplies the Rabi frequency of both pulses.
    pub power_scale: f64,
}

pub fn sample_noise_with<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> NoiseRealization {
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    let n = (spec.atom_number_mean + spec.atom_number_rms * g()).round().max(1.0) as usize;
    let phase_offset = spec.phase_rms * g();
    let detuning_prepare = spec.detuning_rms * g();
    let second = spec.detuning_rms * g();
    let detuning_tomography = if spec.correlated_detuning { detuning_prepare } else { second };
    let power_scale = 1.0 + spec.pulse_power_rel_rms * g();
    NoiseRealization { n_atoms: n, phase_offset, detuning_prepare, detuning_tomography, power_scale }
}

pub fn sample_noise(spec: &NoiseSpec, seed: u64) -> NoiseRealization {
    sample_noise_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Removal of `zeros` atoms from |0> and `ones` from |1> in one event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LossChannel {
    pub zeros: u8,
    pub ones: u8,
}

impl std::fmt::Display for LossChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", "0".repeat(self.zeros as usize), "1".repeat(self.ones as usize))
    }
}

/// Loss rates. One-body rates are per atom; many-body rates are per pair or
/// triple of atoms in the given states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    /// [|0>, |1>] (1/s)
    pub rate1: [f64; 2],
    /// [00, 01, 11] (1/s)
    pub rate2: [f64; 3],
    /// [000, 001, 011, 111] (1/s)
    pub rate3: [f64; 4],
}

impl LossSpec {
    pub const NONE: LossSpec = LossSpec { rate1: [0.0; 2], rate2: [0.0; 3], rate3: [0.0; 4] };

    pub fn validate(&self) -> DynamicsResult<()> {
        if self.rate1.iter().chain(&self.rate2).chain(&self.rate3).any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(DynamicsError::InvalidArgument(format!("loss rates must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.rate1.iter().chain(&self.rate2).chain(&self.rate3).all(|r| *r == 0.0)
    }

    /// Active channels with their coefficient, so that the event rate is
    /// `coeff * N0!/(N0-zeros)! * N1!/(N1-ones)!`.
    fn channels(&self) -> Vec<(LossChannel, f64)> {
        let fact = |n: u8| (1..=n as u32).product::<u32>() as f64;
        let mut out = Vec::new();
        let mut push = |zeros: u8, ones: u8, rate: f64| {
            if rate > 0.0 {
                out.push((LossChannel { zeros, ones }, rate / (fact(zeros) * fact(ones))));
            }
        };
        push(1, 0, self.rate1[0]);
        push(0, 1, self.rate1[1]);
        push(2, 0, self.rate2[0]);
        push(1, 1, self.rate2[1]);
        push(0, 2, self.rate2[2]);
        push(3, 0, self.rate3[0]);
        push(2, 1, self.rate3[1]);
        push(1, 2, self.rate3[2]);
        push(0, 3, self.rate3[3]);
        out
    }
}

impl Default for LossSpec {
    /// About ten percent loss over a 12.7 ms twist at 1250 atoms. Pair loss in
    /// |1> dominates, with the 01 and 11 coefficients in the ratio 1.51 : 8.1.
    fn default() -> Self {
        LossSpec { rate1: [0.1, 0.1], rate2: [0.0, 3.4e-3, 1.8e-2], rate3: [1e-7, 0.0, 0.0, 1e-7] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryResult {
    pub final_state: CollectiveSpinState,
    pub realized_noise: NoiseRealization,
    /// (time in s, channel), times non-decreasing.
    pub jump_log: Vec<(f64, LossChannel)>,
}

fn falling(n: f64, p: u8) -> f64 {
    (0..p).map(|i| n - i as f64).product()
}

/// ln(n!)
fn ln_factorial(n: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let t = TABLE.get_or_init(|| {
        let mut acc = 0.0;
        let mut v = vec![0.0];
        for i in 1..1usize << 16 {
            acc += (i as f64).ln();
            v.push(acc);
        }
        v
    });
    if n < t.len() {
        t[n]
    } else {
        let x = n as f64 + 1.0;
        (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x.powi(3))
    }
}

/// Polynomial coefficients in k (ascending powers), degree <= 3.
type Poly = [f64; 4];

fn poly_mul_linear(p: &Poly, c0: f64, c1: f64) -> Poly {
    // p * (c0 + c1 k)
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] += c0 * p[i];
        if i + 1 < 4 {
            out[i + 1] += c1 * p[i];
        }
    }
    out
}

/// Jump record of one trajectory together with what the conditional state needs.
struct LossRecord {
    n: usize,
    removed: (usize, usize),
    jumps: Vec<(f64, LossChannel)>,
    /// Integrated total rate as a polynomial in the initial k.
    decay: Poly,
    /// (segment start, end, (r0 - r1)/2)
    segments: Vec<(f64, f64, f64)>,
}

fn record_loss<R: Rng + ?Sized>(state: &CollectiveSpinState, loss: &LossSpec, time: f64, rng: &mut R) -> LossRecord {
    let n = state.n_atoms();
    let channels = loss.channels();
    let k0 = if channels.is_empty() { 0 } else { sample_index(&state.probabilities(), rng) };
    let (mut r0, mut r1) = (0usize, 0usize);
    let mut t = 0.0;
    let mut jumps = Vec::new();
    let mut decay = [0.0; 4];
    let mut segments = Vec::new();
    loop {
        let (n0, n1) = ((n - k0 - r0) as f64, (k0 - r1) as f64);
        let rates: Vec<f64> = channels.iter().map(|(c, g)| g * falling(n0, c.zeros) * falling(n1, c.ones)).collect();
        let total: f64 = rates.iter().sum();
        let wait = if total > 0.0 { Exp::new(total).expect("positive rate").sample(rng) } else { f64::INFINITY };
        let end = (t + wait).min(time);
        // total rate over this segment as a function of the initial k
        let dt = end - t;
        if dt > 0.0 {
            for (c, g) in &channels {
                let mut p: Poly = [g * dt, 0.0, 0.0, 0.0];
                for i in 0..c.zeros {
                    p = poly_mul_linear(&p, (n - r0) as f64 - i as f64, -1.0);
                }
                for i in 0..c.ones {
                    p = poly_mul_linear(&p, -(r1 as f64) - i as f64, 1.0);
                }
                for (d, q) in decay.iter_mut().zip(&p) {
                    *d += q;
                }
            }
        }
        segments.push((t, end, 0.5 * (r0 as f64 - r1 as f64)));
        if t + wait >= time {
            break;
        }
        t += wait;
        let (c, _) = channels[sample_index(&rates, rng)];
        r0 += c.zeros as usize;
        r1 += c.ones as usize;
        jumps.push((t, c));
    }
    LossRecord { n, removed: (r0, r1), jumps, decay, segments }
}

impl LossRecord {
    /// Conditional state after the twist, before normalization of phases by the caller.
    fn conditional_state(&self, state: &CollectiveSpinState, twist: &TwistSpec) -> CollectiveSpinState {
        let n = self.n;
        let (r0, r1) = self.removed;
        let n_out = n - r0 - r1;
        let q2 = twist.chi_integral(0.0, twist.duration);
        let q1 = twist.free_detuning * twist.duration
            + 2.0 * self.segments.iter().map(|(a, b, s)| s * twist.chi_integral(*a, *b)).sum::<f64>();
        let amps = state.amplitudes();
        let logp: Vec<f64> = amps.iter().map(|c| c.norm_sqr().ln()).collect();
        let best = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut logw = vec![f64::NEG_INFINITY; n + 1];
        for k in r1..=(n - r0) {
            if logp[k] < best - 200.0 {
                continue;
            }
            // the jump rates multiply to (N-k)!/(N-k-r0)! k!/(k-r1)! up to a constant
            let mut lw = logp[k] + ln_factorial(n - k) - ln_factorial(n - k - r0) + ln_factorial(k) - ln_factorial(k - r1);
            let kf = k as f64;
            lw -= self.decay[0] + kf * (self.decay[1] + kf * (self.decay[2] + kf * self.decay[3]));
            logw[k] = lw;
        }
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let j = n as f64 / 2.0;
        let mut out = vec![C64::new(0.0, 0.0); n_out + 1];
        for k in r1..=(n - r0) {
            if logw[k] == f64::NEG_INFINITY {
                continue;
            }
            let m = k as f64 - j;
            let phase = amps[k].arg() - (q1 * m + q2 * m * m);
            out[k - r1] = C64::from_polar((0.5 * (logw[k] - top)).exp(), phase);
        }
        CollectiveSpinState::from_unnormalized(out).expect("conditional state has weight")
    }
}

fn twist_with_losses<R: Rng + ?Sized>(
    state: &CollectiveSpinState,
    twist: &TwistSpec,
    loss: &LossSpec,
    rng: &mut R,
) -> (CollectiveSpinState, Vec<(f64, LossChannel)>) {
    let rec = record_loss(state, loss, twist.duration, rng);
    let out = rec.conditional_state(state, twist);
    (out, rec.jumps)
}

/// One trajectory of the twist under constant chi and detuning with losses.
pub fn evolve_with_losses(
    state: &CollectiveSpinState,
    chi: f64,
    detuning: f64,
    loss: &LossSpec,
    time: f64,
    seed: u64,
) -> DynamicsResult<TrajectoryResult> {
    let twist = TwistSpec { free_detuning: detuning, ..TwistSpec::constant(chi, time) };
    evolve_with_losses_profile(state, &twist, loss, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn evolve_with_losses_profile<R: Rng + ?Sized>(
    state: &CollectiveSpinState,
    twist: &TwistSpec,
    loss: &LossSpec,
    rng: &mut R,
) -> DynamicsResult<TrajectoryResult> {
    if !(twist.duration >= 0.0) {
        return Err(DynamicsError::InvalidArgument(format!("duration {} < 0", twist.duration)));
    }
    twist.profile.validate()?;
    loss.validate()?;
    let (final_state, jump_log) = twist_with_losses(state, twist, loss, rng);
    Ok(TrajectoryResult {
        final_state,
        realized_noise: NoiseRealization {
            n_atoms: state.n_atoms(),
            phase_offset: 0.0,
            detuning_prepare: 0.0,
            detuning_tomography: 0.0,
            power_scale: 1.0,
        },
        jump_log,
    })
}

/// Coherent state produced by a pulse acting on all atoms in |0>.
fn prepare(n: usize, pulse: &PulseSpec) -> CollectiveSpinState {
    let u = Su2::pulse(pulse);
    // (|1>, |0>) ordering: |0> is the second basis vector
    product_state(n, u.0[0][1], u.0[1][1])
}

struct ShotOutcome {
    state: CollectiveSpinState,
    tomography: Su2,
    noise: NoiseRealization,
    jumps: Vec<(f64, LossChannel)>,
}

fn shot_before_tomography<R: Rng + ?Sized>(seq: &SequenceSpec, noise: &NoiseSpec, loss: &LossSpec, rng: &mut R) -> ShotOutcome {
    let nr = sample_noise_with(noise, rng);
    let prep = PulseSpec {
        rabi: seq.prepare_pulse.rabi * nr.power_scale,
        detuning: seq.prepare_pulse.detuning + nr.detuning_prepare,
        ..seq.prepare_pulse
    };
    let state = prepare(nr.n_atoms, &prep);
    let (state, jumps) = twist_with_losses(&state, &seq.twist, loss, rng);
    let state = rz(&state, seq.twist.phase_correction + nr.phase_offset);
    let (phase, area) = seq.tomography_pulse();
    let tomo = PulseSpec {
        rabi: seq.tomography_rabi * nr.power_scale,
        phase,
        detuning: nr.detuning_tomography,
        duration: area / seq.tomography_rabi,
    };
    ShotOutcome { state, tomography: Su2::pulse(&tomo), noise: nr, jumps }
}

fn check_inputs(seq: &SequenceSpec, noise: &NoiseSpec, loss: &LossSpec) -> DynamicsResult<()> {
    seq.validate()?;
    noise.validate()?;
    loss.validate()
}

/// One full realization; the returned state is the one that is detected in Sz.
pub fn run_sequence(seq: &SequenceSpec, noise: &NoiseSpec, loss: &LossSpec, seed: u64) -> DynamicsResult<TrajectoryResult> {
    check_inputs(seq, noise, loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shot = shot_before_tomography(seq, noise, loss, &mut rng);
    Ok(TrajectoryResult {
        final_state: apply_su2(&shot.state, &shot.tomography),
        realized_noise: shot.noise,
        jump_log: shot.jumps,
    })
}

/// A shot waiting for its detection, with the support of the state trimmed.
struct Pending {
    n: usize,
    lo: usize,
    amps: Vec<C64>,
    tomography: Su2,
    rng: ChaCha8Rng,
}

fn pending_shot(seq: &SequenceSpec, noise: &NoiseSpec, loss: &LossSpec, seed: u64) -> Pending {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shot = shot_before_tomography(seq, noise, loss, &mut rng);
    let amps = shot.state.amplitudes();
    let cut = 1e-30 * amps.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    let lo = amps.iter().position(|c| c.norm_sqr() > cut).unwrap_or(0);
    let hi = amps.iter().rposition(|c| c.norm_sqr() > cut).unwrap_or(0);
    Pending { n: shot.state.n_atoms(), lo, amps: amps[lo..=hi].to_vec(), tomography: shot.tomography, rng }
}

fn detect(p: Pending, cols: &mut TopSxColumns, theta: f64, index: usize, imaging: &ImagingNoiseSpec) -> ShotRecord {
    let Pending { n, lo, amps, tomography, mut rng } = p;
    let mut full = vec![C64::new(0.0, 0.0); n + 1];
    full[lo..lo + amps.len()].copy_from_slice(&amps);
    let state = CollectiveSpinState::from_unnormalized(full).expect("trimmed state keeps its peak");
    let probs = sz_distribution_after(&state, &tomography, cols);
    let k = sample_index(&probs, &mut rng);
    let rec = ShotRecord { shot: index, theta, n0: (n - k) as f64, n1: k as f64 };
    if imaging.sigma_n0 > 0.0 || imaging.sigma_n1 > 0.0 {
        add_imaging_noise_with(&rec, imaging, &mut rng)
    } else {
        rec
    }
}

/// `n_shots` independent shots; shot `i` uses seed `base_seed + i`.
pub fn ensemble(
    seq: &SequenceSpec,
    noise: &NoiseSpec,
    loss: &LossSpec,
    n_shots: usize,
    base_seed: u64,
    imaging: &ImagingNoiseSpec,
) -> DynamicsResult<Vec<ShotRecord>> {
    ensemble_indexed(seq, noise, loss, n_shots, base_seed, 0, imaging)
}

fn ensemble_indexed(
    seq: &SequenceSpec,
    noise: &NoiseSpec,
    loss: &LossSpec,
    n_shots: usize,
    base_seed: u64,
    first_index: usize,
    imaging: &ImagingNoiseSpec,
) -> DynamicsResult<Vec<ShotRecord>> {
    check_inputs(seq, noise, loss)?;
    imaging.validate().map_err(|e| DynamicsError::InvalidArgument(e.to_string()))?;
    if n_shots == 0 {
        return Err(DynamicsError::InvalidArgument("n_shots must be >= 1".into()));
    }
    let pending: Vec<Pending> =
        (0..n_shots).into_par_iter().map(|i| pending_shot(seq, noise, loss, base_seed.wrapping_add(i as u64))).collect();
    // detection grouped by atom number so each group shares its Sx eigenvectors
    let mut groups: BTreeMap<usize, Vec<(usize, Pending)>> = BTreeMap::new();
    for (i, p) in pending.into_iter().enumerate() {
        groups.entry(p.n).or_default().push((i, p));
    }
    let mut out: Vec<(usize, ShotRecord)> = groups
        .into_par_iter()
        .flat_map_iter(|(n, shots)| {
            let mut cols = TopSxColumns::new(n);
            shots
                .into_iter()
                .map(|(i, p)| (i, detect(p, &mut cols, seq.tomography_angle, first_index + i, imaging)))
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

/// Ensembles at several angles; angle `j` uses seeds from `base_seed + j n_shots`.
pub fn theta_scan(
    seq: &SequenceSpec,
    noise: &NoiseSpec,
    loss: &LossSpec,
    thetas: &[f64],
    n_shots: usize,
    base_seed: u64,
    imaging: &ImagingNoiseSpec,
) -> DynamicsResult<Vec<ShotRecord>> {
    let mut out = Vec::with_capacity(thetas.len() * n_shots);
    for (j, th) in thetas.iter().enumerate() {
        let offset = j * n_shots;
        out.extend(ensemble_indexed(&seq.with_angle(*th), noise, loss, n_shots, base_seed.wrapping_add(offset as u64), offset, imaging)?);
    }
    Ok(out)
}

/// Ensemble-averaged spin moments of the state just before the tomography pulse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureMoments {
    pub mean_atoms: f64,
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
    pub cov_yz: [[f64; 2]; 2],
}

impl MixtureMoments {
    fn from_states<'a>(states: impl Iterator<Item = &'a CollectiveSpinState>) -> Self {
        let mut acc = [0.0f64; 7];
        let mut count = 0.0;
        for s in states {
            let e = expectations(s);
            acc[0] += s.n_atoms() as f64;
            acc[1] += e.sx;
            acc[2] += e.sy;
            acc[3] += e.sz;
            acc[4] += e.cov_yz[0][0] + e.sy * e.sy;
            acc[5] += e.cov_yz[1][1] + e.sz * e.sz;
            acc[6] += e.cov_yz[0][1] + e.sy * e.sz;
            count += 1.0;
        }
        let m: Vec<f64> = acc.iter().map(|a| a / count).collect();
        let c = m[6] - m[2] * m[3];
        MixtureMoments {
            mean_atoms: m[0],
            sx: m[1],
            sy: m[2],
            sz: m[3],
            cov_yz: [[m[4] - m[2] * m[2], c], [c, m[5] - m[3] * m[3]]],
        }
    }

    /// Minimum of the variance over angles in dB relative to projection noise.
    pub fn floor_db(&self) -> (f64, f64) {
        let mv = min_variance_from_cov(&self.cov_yz);
        (to_db(mv.variance / (self.mean_atoms / 4.0)), mv.theta_min)
    }
}

/// Noise-free shots with loss, kept as records so the twist strength can be varied
/// without redrawing them.
pub struct LossEnsemble {
    initial: CollectiveSpinState,
    records: Vec<LossRecord>,
}

impl LossEnsemble {
    pub fn new(seq: &SequenceSpec, loss: &LossSpec, n_atoms: usize, n_traj: usize, base_seed: u64) -> DynamicsResult<Self> {
        seq.validate()?;
        loss.validate()?;
        if n_atoms == 0 || n_traj == 0 {
            return Err(DynamicsError::InvalidArgument("need atoms and trajectories".into()));
        }
        let initial = prepare(n_atoms, &seq.prepare_pulse);
        let records = (0..n_traj)
            .map(|i| record_loss(&initial, loss, seq.twist.duration, &mut ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(i as u64))))
            .collect();
        Ok(LossEnsemble { initial, records })
    }

    /// Moments after the twist; the z rotation `phase_correction` of `twist` is applied.
    pub fn moments(&self, twist: &TwistSpec) -> MixtureMoments {
        let states: Vec<CollectiveSpinState> = self
            .records
            .par_iter()
            .map(|r| rz(&r.conditional_state(&self.initial, twist), twist.phase_correction))
            .collect();
        MixtureMoments::from_states(states.iter())
    }

    /// Moments with the mean spin turned onto +x, and the rotation used.
    pub fn aligned_moments(&self, twist: &TwistSpec) -> (MixtureMoments, f64) {
        let raw = self.moments(&TwistSpec { phase_correction: 0.0, ..twist.clone() });
        let corr = -raw.sy.atan2(raw.sx);
        (self.moments(&TwistSpec { phase_correction: corr, ..twist.clone() }), corr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistCalibration {
    pub chi_scale: f64,
    pub phase_correction: f64,
    pub floor_db: f64,
    pub theta_min: f64,
}

/// Smallest profile scale at which the noise-free variance floor with loss
/// reaches `target_db`, found by a logarithmic scan and bisection on a fixed set
/// of trajectories.
pub fn calibrate_twist(
    seq: &SequenceSpec,
    loss: &LossSpec,
    n_atoms: usize,
    target_db: f64,
    n_traj: usize,
    base_seed: u64,
) -> DynamicsResult<TwistCalibration> {
    let ens = LossEnsemble::new(seq, loss, n_atoms, n_traj, base_seed)?;
    let unit = seq.twist.profile.integral(0.0, seq.twist.duration);
    if !(unit > 0.0) {
        return Err(DynamicsError::InvalidArgument("twist profile has no positive integral".into()));
    }
    let eval = |scale: f64| {
        let tw = TwistSpec { chi_scale: scale, ..seq.twist.clone() };
        let (m, corr) = ens.aligned_moments(&tw);
        let (db, th) = m.floor_db();
        (db, th, corr)
    };
    // twist integrals from 1e-5 rad upwards in steps of 2^(1/4)
    let mut lo = 1e-5 / unit;
    let mut best = f64::INFINITY;
    let mut hi = None;
    for _ in 0..80 {
        let s = lo * 2f64.powf(0.25);
        let (db, _, _) = eval(s);
        best = best.min(db);
        if db <= target_db {
            hi = Some(s);
            break;
        }
        if db > best + 3.0 {
            break;
        }
        lo = s;
    }
    let mut hi = hi.ok_or(DynamicsError::TargetUnreachable { best, target: target_db })?;
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        if eval(mid).0 <= target_db {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (floor_db, theta_min, phase_correction) = eval(hi);
    Ok(TwistCalibration { chi_scale: hi, phase_correction, floor_db, theta_min })
}
