//! Batch front end: configuration, pipelines and file output.

use std::f64::consts::PI;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::dynamics_noise::{
    calibrate_twist, theta_scan, ChiProfile, DynamicsError, LossSpec, NoiseSpec, RotationRule, SequenceSpec, TwistSpec,
};
use crate::metrology::{entanglement_depth, squeezing_parameter, to_db, MetrologyError};
use crate::mode_model::{
    chi_lambda_curve_with, default_separations, split_sequence_profile, ChiOptions, ModeError, ScatteringSpec, SolverOptions,
    TrapSpec, Transverse, AMU,
};
use crate::spin_core::PulseSpec;
use crate::tomography::{
    calibration_fit, group_by_theta, mean_total, post_select, read_shot_csv, tomogram, variance_by_atom_number, write_shot_csv,
    write_tomogram_csv, DriftOptions, ImagingNoiseSpec, ShotRecord, TomographyError,
};
use crate::wigner::{contour_at, inverse_radon, linspace, smooth_histogram, Filter, GridSpec, ProjectionSet, WignerError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<TomographyError> for CliError {
    fn from(e: TomographyError) -> Self {
        match e {
            TomographyError::FitFailure(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModeError> for CliError {
    fn from(e: ModeError) -> Self {
        match e {
            ModeError::InvalidArgument(_) => CliError::Config(e.to_string()),
            ModeError::ConvergenceFailure { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<WignerError> for CliError {
    fn from(e: WignerError) -> Self {
        match e {
            WignerError::InsufficientData(_) | WignerError::InvalidArgument(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MetrologyError> for CliError {
    fn from(e: MetrologyError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 1, out_dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AtomsSection {
    pub n_mean: f64,
    pub n_rms: f64,
    pub a00_bohr: f64,
    pub a01_bohr: f64,
    pub a11_bohr: f64,
    pub mass_amu: f64,
}

impl Default for AtomsSection {
    fn default() -> Self {
        let s = ScatteringSpec::default();
        AtomsSection { n_mean: 1250.0, n_rms: 45.0, a00_bohr: s.a00, a01_bohr: s.a01, a11_bohr: s.a11, mass_amu: s.mass / AMU }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    pub f_long_hz: f64,
    pub f_ax_hz: f64,
    pub separation_um: f64,
    /// Recorded only.
    pub b0_gauss: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        TrapSection { f_long_hz: 109.0, f_ax_hz: 500.0, separation_um: 0.52, b0_gauss: 3.36 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSection {
    pub rabi_hz: f64,
    pub prepare_phase_deg: f64,
    /// Light shift of the drive. Pulses are tuned to resonance with it, so it
    /// only sets the fringe frequency in the lab frame; recorded.
    pub ac_shift_hz: f64,
    pub rotation: Rotation,
}

impl Default for DriveSection {
    fn default() -> Self {
        DriveSection { rabi_hz: 2100.0, prepare_phase_deg: 90.0, ac_shift_hz: 7600.0, rotation: Rotation::Shortest }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Rotation {
    Clockwise,
    Counterclockwise,
    Shortest,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ChiModel {
    Split,
    Constant,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TwistSection {
    pub duration_ms: f64,
    pub model: ChiModel,
    /// Used by the constant model.
    pub chi_per_s: f64,
    pub chi_scale: f64,
    /// Replace `chi_scale` and `phase_correction_deg` by a calibration that brings
    /// the noise-free variance floor with loss to `calibrate_floor_db`.
    pub calibrate: bool,
    pub calibrate_floor_db: f64,
    pub calibration_trajectories: usize,
    pub phase_correction_deg: f64,
    /// In the frame of the drive.
    pub free_detuning_hz: f64,
}

impl Default for TwistSection {
    fn default() -> Self {
        TwistSection {
            duration_ms: 12.7,
            model: ChiModel::Split,
            chi_per_s: 1.5,
            chi_scale: 1.0,
            calibrate: true,
            calibrate_floor_db: -12.8,
            calibration_trajectories: 300,
            phase_correction_deg: 0.0,
            free_detuning_hz: 0.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub phase_rms_deg: f64,
    pub detuning_rms_hz: f64,
    pub power_rel_rms: f64,
    pub correlated_detuning: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { phase_rms_deg: 8.0, detuning_rms_hz: 40.0, power_rel_rms: 0.005, correlated_detuning: false }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// [|0>, |1>]
    pub one_body_per_s: [f64; 2],
    /// [00, 01, 11]
    pub two_body_per_s: [f64; 3],
    /// [000, 001, 011, 111]
    pub three_body_per_s: [f64; 4],
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossSpec::default();
        LossSection { one_body_per_s: l.rate1, two_body_per_s: l.rate2, three_body_per_s: l.rate3 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ImagingSection {
    /// sqrt(s0^2 + s1^2)/2 in atoms.
    pub combined_atoms: f64,
}

impl Default for ImagingSection {
    fn default() -> Self {
        ImagingSection { combined_atoms: 7.0 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TomographySection {
    pub theta_deg: Vec<f64>,
    pub shots_per_theta: usize,
    /// Keep only shots whose total is within `post_select_atoms` of the mean.
    pub post_select: bool,
    pub post_select_atoms: f64,
    pub drift: bool,
    pub drift_window: usize,
    pub drift_order: usize,
    pub drift_min_deg: f64,
    pub drift_max_deg: f64,
    /// Fringe contrast used for the squeezing parameter and entanglement depth.
    pub contrast: f64,
}

impl Default for TomographySection {
    fn default() -> Self {
        let d = DriftOptions::default();
        TomographySection {
            theta_deg: vec![
                0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 15.0, 20.0, 30.0, 45.0, 60.0, 90.0, 120.0, 150.0, 180.0, 210.0, 240.0, 270.0,
                300.0, 315.0, 330.0, 340.0, 345.0, 350.0, 352.0, 354.0, 356.0, 358.0,
            ],
            shots_per_theta: 300,
            post_select: true,
            post_select_atoms: 150.0,
            drift: d.enabled,
            drift_window: d.window,
            drift_order: d.order,
            drift_min_deg: d.range.0.to_degrees(),
            drift_max_deg: d.range.1.to_degrees(),
            contrast: 0.88,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum FilterName {
    RamLak,
    Hann,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionSection {
    pub grid_points: usize,
    /// Half side of the output square; absent means 3.5 times the largest
    /// standard deviation among the angles.
    pub half_width_atoms: Option<f64>,
    pub filter: FilterName,
    pub contour_fraction: f64,
}

impl Default for ReconstructionSection {
    fn default() -> Self {
        ReconstructionSection { grid_points: 257, half_width_atoms: None, filter: FilterName::Hann, contour_fraction: (-0.5f64).exp() }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum TransverseName {
    Variational,
    Fixed,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ChiCurveSection {
    /// Absent means an automatic ladder from full overlap to full separation.
    pub separations_um: Option<Vec<f64>>,
    pub grid_points: usize,
    pub transverse: TransverseName,
}

impl Default for ChiCurveSection {
    fn default() -> Self {
        ChiCurveSection { separations_um: None, grid_points: 512, transverse: TransverseName::Variational }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub bin_width_atoms: f64,
    pub min_shots: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { bin_width_atoms: 50.0, min_shots: 30 }
    }
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub atoms: AtomsSection,
    pub trap: TrapSection,
    pub drive: DriveSection,
    pub twist: TwistSection,
    pub noise: NoiseSection,
    pub loss: LossSection,
    pub imaging: ImagingSection,
    pub tomography: TomographySection,
    pub reconstruction: ReconstructionSection,
    pub chi_curve: ChiCurveSection,
    pub calibration: CalibrationSection,
}

fn check(ok: bool, key: &str, what: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: {what}")))
    }
}

fn nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        let a = &self.atoms;
        check(a.n_mean >= 1.0 && a.n_mean.is_finite(), "atoms.n_mean", "must be >= 1")?;
        check(nonneg(a.n_rms), "atoms.n_rms", "must be >= 0")?;
        for (k, v) in [("atoms.a00_bohr", a.a00_bohr), ("atoms.a01_bohr", a.a01_bohr), ("atoms.a11_bohr", a.a11_bohr)] {
            check(nonneg(v), k, "must be >= 0")?;
        }
        check(positive(a.mass_amu), "atoms.mass_amu", "must be > 0")?;
        let t = &self.trap;
        check(positive(t.f_long_hz), "trap.f_long_hz", "must be > 0")?;
        check(positive(t.f_ax_hz), "trap.f_ax_hz", "must be > 0")?;
        check(nonneg(t.separation_um), "trap.separation_um", "must be >= 0")?;
        check(t.b0_gauss.is_finite(), "trap.b0_gauss", "must be finite")?;
        let d = &self.drive;
        check(positive(d.rabi_hz), "drive.rabi_hz", "must be > 0")?;
        check(d.prepare_phase_deg.is_finite(), "drive.prepare_phase_deg", "must be finite")?;
        check(d.ac_shift_hz.is_finite(), "drive.ac_shift_hz", "must be finite")?;
        let w = &self.twist;
        check(nonneg(w.duration_ms), "twist.duration_ms", "must be >= 0")?;
        check(w.chi_per_s.is_finite(), "twist.chi_per_s", "must be finite")?;
        check(w.chi_scale.is_finite(), "twist.chi_scale", "must be finite")?;
        check(w.phase_correction_deg.is_finite(), "twist.phase_correction_deg", "must be finite")?;
        check(w.free_detuning_hz.is_finite(), "twist.free_detuning_hz", "must be finite")?;
        if w.calibrate {
            check(w.calibrate_floor_db.is_finite() && w.calibrate_floor_db < 0.0, "twist.calibrate_floor_db", "must be < 0")?;
            check(w.calibration_trajectories >= 10, "twist.calibration_trajectories", "must be >= 10")?;
            check(w.duration_ms > 0.0, "twist.duration_ms", "must be > 0 when calibrating")?;
        }
        if w.model == ChiModel::Split {
            check(w.duration_ms > 0.0, "twist.duration_ms", "must be > 0 for the split model")?;
        }
        let n = &self.noise;
        check(nonneg(n.phase_rms_deg), "noise.phase_rms_deg", "must be >= 0")?;
        check(nonneg(n.detuning_rms_hz), "noise.detuning_rms_hz", "must be >= 0")?;
        check(nonneg(n.power_rel_rms), "noise.power_rel_rms", "must be >= 0")?;
        let l = &self.loss;
        check(l.one_body_per_s.iter().all(|x| nonneg(*x)), "loss.one_body_per_s", "entries must be >= 0")?;
        check(l.two_body_per_s.iter().all(|x| nonneg(*x)), "loss.two_body_per_s", "entries must be >= 0")?;
        check(l.three_body_per_s.iter().all(|x| nonneg(*x)), "loss.three_body_per_s", "entries must be >= 0")?;
        check(nonneg(self.imaging.combined_atoms), "imaging.combined_atoms", "must be >= 0")?;
        let tm = &self.tomography;
        check(!tm.theta_deg.is_empty(), "tomography.theta_deg", "must not be empty")?;
        check(tm.theta_deg.iter().all(|x| x.is_finite() && *x >= 0.0 && *x < 360.0), "tomography.theta_deg", "entries must lie in [0, 360)")?;
        let mut sorted = tm.theta_deg.clone();
        sorted.sort_by(f64::total_cmp);
        check(sorted.windows(2).all(|p| p[1] > p[0]), "tomography.theta_deg", "entries must be distinct")?;
        check(tm.shots_per_theta >= 2, "tomography.shots_per_theta", "must be >= 2")?;
        check(positive(tm.post_select_atoms), "tomography.post_select_atoms", "must be > 0")?;
        check(tm.drift_order < tm.drift_window && tm.drift_window >= 3, "tomography.drift_window", "must be >= 3 and exceed drift_order")?;
        check(tm.drift_min_deg.is_finite() && tm.drift_max_deg.is_finite() && tm.drift_min_deg < tm.drift_max_deg, "tomography.drift_min_deg", "must be below drift_max_deg")?;
        check(tm.contrast > 0.0 && tm.contrast <= 1.0, "tomography.contrast", "must lie in (0, 1]")?;
        let r = &self.reconstruction;
        check(r.grid_points >= 3, "reconstruction.grid_points", "must be >= 3")?;
        if let Some(h) = r.half_width_atoms {
            check(positive(h), "reconstruction.half_width_atoms", "must be > 0")?;
        }
        check(r.contour_fraction > 0.0 && r.contour_fraction < 1.0, "reconstruction.contour_fraction", "must lie in (0, 1)")?;
        let c = &self.chi_curve;
        if let Some(s) = &c.separations_um {
            check(!s.is_empty() && s.iter().all(|x| nonneg(*x)), "chi_curve.separations_um", "entries must be >= 0")?;
            check(s.windows(2).all(|p| p[1] > p[0]), "chi_curve.separations_um", "must be strictly increasing")?;
        }
        check(c.grid_points >= 16, "chi_curve.grid_points", "must be >= 16")?;
        check(positive(self.calibration.bin_width_atoms), "calibration.bin_width_atoms", "must be > 0")?;
        check(self.calibration.min_shots >= 2, "calibration.min_shots", "must be >= 2")?;
        Ok(())
    }

    pub fn trap(&self) -> TrapSpec {
        TrapSpec { f_long: self.trap.f_long_hz, f_ax: self.trap.f_ax_hz, separation: self.trap.separation_um * 1e-6 }
    }

    pub fn scattering(&self) -> ScatteringSpec {
        ScatteringSpec { a00: self.atoms.a00_bohr, a01: self.atoms.a01_bohr, a11: self.atoms.a11_bohr, mass: self.atoms.mass_amu * AMU }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            phase_rms: self.noise.phase_rms_deg.to_radians(),
            detuning_rms: 2.0 * PI * self.noise.detuning_rms_hz,
            pulse_power_rel_rms: self.noise.power_rel_rms,
            atom_number_mean: self.atoms.n_mean,
            atom_number_rms: self.atoms.n_rms,
            correlated_detuning: self.noise.correlated_detuning,
        }
    }

    pub fn loss(&self) -> LossSpec {
        LossSpec { rate1: self.loss.one_body_per_s, rate2: self.loss.two_body_per_s, rate3: self.loss.three_body_per_s }
    }

    pub fn imaging(&self) -> ImagingNoiseSpec {
        ImagingNoiseSpec::from_combined(self.imaging.combined_atoms)
    }

    pub fn drift(&self) -> DriftOptions {
        let t = &self.tomography;
        DriftOptions { enabled: t.drift, window: t.drift_window, order: t.drift_order, range: (t.drift_min_deg.to_radians(), t.drift_max_deg.to_radians()) }
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.tomography.theta_deg.iter().map(|d| d.to_radians()).collect()
    }

    /// Sequence with the configured (uncalibrated) twist and the first angle.
    pub fn sequence(&self) -> CliResult<SequenceSpec> {
        let duration = self.twist.duration_ms * 1e-3;
        let profile = match self.twist.model {
            ChiModel::Constant => ChiProfile::Constant(self.twist.chi_per_s),
            ChiModel::Split => ChiProfile::from_split(&split_sequence_profile(&self.trap(), &self.scattering(), self.atoms.n_mean, duration)?),
        };
        let rabi = 2.0 * PI * self.drive.rabi_hz;
        Ok(SequenceSpec {
            prepare_pulse: PulseSpec { rabi, phase: self.drive.prepare_phase_deg.to_radians(), detuning: 0.0, duration: PI / 2.0 / rabi },
            twist: TwistSpec {
                profile,
                duration,
                free_detuning: 2.0 * PI * self.twist.free_detuning_hz,
                chi_scale: self.twist.chi_scale,
                phase_correction: self.twist.phase_correction_deg.to_radians(),
            },
            tomography_angle: self.thetas()[0],
            tomography_rabi: rabi,
            rule: match self.drive.rotation {
                Rotation::Clockwise => RotationRule::Clockwise,
                Rotation::Counterclockwise => RotationRule::Counterclockwise,
                Rotation::Shortest => RotationRule::Shortest,
            },
        })
    }
}

#[derive(Parser, Debug)]
#[command(name = "spinsqueeze", version, about = "Spin-squeezing simulation, tomography and reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Shots per angle.
    #[arg(long, global = true)]
    pub shots: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Monte Carlo shots over the angle grid, written to shots.csv.
    Simulate,
    /// Variance against angle and the squeezing report from shot records.
    Tomogram { records: PathBuf },
    /// Wigner function and its contour from shot records.
    Reconstruct { records: PathBuf },
    /// Overlap and twisting strength against trap separation.
    ChiCurve,
    /// Projection-noise fit of Var(Sz) against atom number.
    Calibrate {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn read_records(path: &Path) -> CliResult<Vec<ShotRecord>> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_shot_csv(f).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Output of a command: files written and a human-readable summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Outcome> {
    let mut seq = cfg.sequence()?;
    let loss = cfg.loss();
    let mut summary = String::new();
    if cfg.twist.calibrate {
        let n = cfg.atoms.n_mean.round() as usize;
        let cal = calibrate_twist(&seq, &loss, n, cfg.twist.calibrate_floor_db, cfg.twist.calibration_trajectories, cfg.run.seed)?;
        seq.twist.chi_scale = cal.chi_scale;
        seq.twist.phase_correction = cal.phase_correction;
        writeln!(
            summary,
            "twist calibrated: scale {:.6}, twist integral {:.6} rad, phase correction {:.4} deg, noise-free floor {:.3} dB at {:.3} deg",
            cal.chi_scale,
            seq.twist.strength(),
            cal.phase_correction.to_degrees(),
            cal.floor_db,
            cal.theta_min.to_degrees()
        )
        .ok();
    }
    let records = theta_scan(&seq, &cfg.noise(), &loss, &cfg.thetas(), cfg.tomography.shots_per_theta, cfg.run.seed, &cfg.imaging())?;
    let mut buf = Vec::new();
    write_shot_csv(&mut buf, &records)?;
    let path = cfg.run.out_dir.join("shots.csv");
    write_atomic(&path, &buf)?;
    writeln!(
        summary,
        "{} shots over {} angles, mean atom number {:.1}",
        records.len(),
        cfg.tomography.theta_deg.len(),
        mean_total(&records)
    )
    .ok();
    Ok(Outcome { files: vec![path], summary })
}

/// Squeezing figures derived from the lowest tomogram row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TomogramReport {
    pub mean_n: f64,
    pub theta_min: f64,
    pub normalized_db: f64,
    pub standard_error_db: f64,
    pub contrast: f64,
    pub xi_squared_db: f64,
    pub depth: usize,
}

pub fn tomogram_report(records: &[ShotRecord], cfg: &RunConfig) -> CliResult<(crate::tomography::Tomogram, TomogramReport, Vec<String>)> {
    if records.is_empty() {
        return Err(CliError::Data("no shot records".into()));
    }
    let mut warnings = Vec::new();
    let records = if cfg.tomography.post_select {
        let (kept, warn) = post_select(records, mean_total(records), cfg.tomography.post_select_atoms)?;
        warnings.extend(warn.iter().map(|w| w.to_string()));
        kept
    } else {
        records.to_vec()
    };
    let mean_n = mean_total(&records);
    let (tomo, warn) = tomogram(&records, mean_n, &cfg.imaging(), &cfg.drift())?;
    warnings.extend(warn.iter().map(|w| w.to_string()));
    let row = *tomo.min_row().ok_or_else(|| CliError::Data("no angle has a positive corrected variance".into()))?;
    let c = cfg.tomography.contrast;
    let sx = c * mean_n / 2.0;
    let xi = squeezing_parameter(mean_n, row.variance_corrected, sx)?;
    let depth = entanglement_depth(mean_n, row.variance_corrected, sx)?;
    let report = TomogramReport {
        mean_n,
        theta_min: row.theta,
        normalized_db: row.normalized_db,
        standard_error_db: row.standard_error,
        contrast: c,
        xi_squared_db: to_db(xi),
        depth,
    };
    Ok((tomo, report, warnings))
}

pub fn cmd_tomogram(records_path: &Path, cfg: &RunConfig) -> CliResult<Outcome> {
    let records = read_records(records_path)?;
    let (tomo, rep, warnings) = tomogram_report(&records, cfg)?;
    let mut buf = Vec::new();
    write_tomogram_csv(&mut buf, &tomo)?;
    let csv_path = cfg.run.out_dir.join("tomogram.csv");
    write_atomic(&csv_path, &buf)?;
    let mut text = String::new();
    writeln!(text, "mean_atoms = {:.3}", rep.mean_n).ok();
    writeln!(text, "theta_min_deg = {:.4}", rep.theta_min.to_degrees()).ok();
    writeln!(text, "min_variance_db = {:.4}", rep.normalized_db).ok();
    writeln!(text, "min_variance_stderr_db = {:.4}", rep.standard_error_db).ok();
    writeln!(text, "contrast = {:.4}", rep.contrast).ok();
    writeln!(text, "xi_squared_db = {:.4}", rep.xi_squared_db).ok();
    writeln!(text, "entanglement_depth = {}", rep.depth).ok();
    for w in &warnings {
        writeln!(text, "# warning: {w}").ok();
    }
    let rep_path = cfg.run.out_dir.join("report.txt");
    write_atomic(&rep_path, text.as_bytes())?;
    Ok(Outcome { files: vec![csv_path, rep_path], summary: text })
}

/// Angle folded into [-pi/2, pi/2) together with the sign that maps S_theta onto it.
fn fold_angle(theta: f64) -> Option<(f64, f64)> {
    let t = if theta > PI { theta - 2.0 * PI } else { theta };
    let eps = 1e-9;
    if t >= -PI / 2.0 - eps && t < PI / 2.0 - eps {
        Some((t.max(-PI / 2.0), 1.0))
    } else if (t - PI / 2.0).abs() <= eps {
        Some((-PI / 2.0, -1.0))
    } else {
        None
    }
}

/// Result of a reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub grid: crate::wigner::WignerGrid,
    pub contour: crate::wigner::ContourResult,
    pub theta_min: f64,
    pub mean_n: f64,
    pub warnings: Vec<String>,
}

pub fn reconstruct_records(records: &[ShotRecord], cfg: &RunConfig) -> CliResult<Reconstruction> {
    let mut by_angle: Vec<(f64, Vec<f64>)> = Vec::new();
    for (theta, group) in group_by_theta(records) {
        if let Some((t, sign)) = fold_angle(theta) {
            let samples = group.iter().map(|r| sign * r.sz());
            match by_angle.iter_mut().find(|(a, _)| (*a - t).abs() < 1e-9) {
                Some((_, v)) => v.extend(samples),
                None => by_angle.push((t, samples.collect())),
            }
        }
    }
    by_angle.sort_by(|a, b| a.0.total_cmp(&b.0));
    if by_angle.is_empty() {
        return Err(CliError::Data("no records with angles in [-90, 90] deg".into()));
    }
    let centred: Vec<(f64, Vec<f64>)> = by_angle
        .into_iter()
        .map(|(t, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (t, v.into_iter().map(|x| x - m).collect())
        })
        .collect();
    let sd_max = centred
        .iter()
        .map(|(_, v)| (v.iter().map(|x| x * x).sum::<f64>() / (v.len().max(2) - 1) as f64).sqrt())
        .fold(0.0, f64::max);
    let reach = centred.iter().flat_map(|(_, v)| v.iter().map(|x| x.abs())).fold(0.0, f64::max);
    if !(reach > 0.0) {
        return Err(CliError::Data("all samples coincide".into()));
    }
    let n_grid = cfg.reconstruction.grid_points;
    let axis = linspace(-1.25 * reach, 1.25 * reach, 2 * n_grid + 1);
    let mut angles = Vec::new();
    let mut marginals = Vec::new();
    for (t, v) in &centred {
        marginals.push(smooth_histogram(v, &axis).map_err(|e| CliError::Data(format!("angle {:.3} deg: {e}", t.to_degrees())))?);
        angles.push(*t);
    }
    let proj = ProjectionSet::new(angles, marginals)?;
    let half_width = cfg.reconstruction.half_width_atoms.unwrap_or(3.5 * sd_max);
    let spec = GridSpec { center: (0.0, 0.0), half_width, n: n_grid };
    let filter = match cfg.reconstruction.filter {
        FilterName::RamLak => Filter::RamLak,
        FilterName::Hann => Filter::Hann,
    };
    let (grid, warn) = inverse_radon(&proj, &spec, filter)?;
    let contour = contour_at(&grid, cfg.reconstruction.contour_fraction)?;
    let theta_min = contour.orientation().theta_min;
    Ok(Reconstruction { grid, contour, theta_min, mean_n: mean_total(records), warnings: warn.iter().map(|w| w.to_string()).collect() })
}

pub fn cmd_reconstruct(records_path: &Path, cfg: &RunConfig) -> CliResult<Outcome> {
    let records = read_records(records_path)?;
    let rec = reconstruct_records(&records, cfg)?;
    let mut grid_csv = String::from("sy,sz,w\n");
    for (iz, z) in rec.grid.sz_axis.iter().enumerate() {
        for (iy, y) in rec.grid.sy_axis.iter().enumerate() {
            writeln!(grid_csv, "{y:.6},{z:.6},{:.9e}", rec.grid.at(iy, iz)).ok();
        }
    }
    let mut contour_csv = String::from("sy,sz\n");
    for (y, z) in &rec.contour.polyline {
        writeln!(contour_csv, "{y:.6},{z:.6}").ok();
    }
    let coherent_area = PI * rec.mean_n / 4.0;
    let mut text = String::new();
    writeln!(text, "contour_level = {:.9e}", rec.contour.level).ok();
    writeln!(text, "contour_area = {:.4}", rec.contour.enclosed_area).ok();
    writeln!(text, "coherent_area = {:.4}", coherent_area).ok();
    writeln!(text, "theta_min_deg = {:.4}", rec.theta_min.to_degrees()).ok();
    for w in &rec.warnings {
        writeln!(text, "# warning: {w}").ok();
    }
    let out = &cfg.run.out_dir;
    let files = vec![out.join("wigner.csv"), out.join("contour.csv"), out.join("reconstruct.txt")];
    write_atomic(&files[0], grid_csv.as_bytes())?;
    write_atomic(&files[1], contour_csv.as_bytes())?;
    write_atomic(&files[2], text.as_bytes())?;
    Ok(Outcome { files, summary: text })
}

pub fn cmd_chi_curve(cfg: &RunConfig) -> CliResult<Outcome> {
    let trap = cfg.trap();
    let scat = cfg.scattering();
    let n = cfg.atoms.n_mean;
    let seps = match &cfg.chi_curve.separations_um {
        Some(s) => s.iter().map(|x| x * 1e-6).collect(),
        None => default_separations(&trap, &scat, n),
    };
    let opts = ChiOptions {
        step: None,
        solver: SolverOptions {
            grid_points: cfg.chi_curve.grid_points,
            transverse: match cfg.chi_curve.transverse {
                TransverseName::Variational => Transverse::Variational,
                TransverseName::Fixed => Transverse::Fixed,
            },
            ..SolverOptions::default()
        },
    };
    let rows = chi_lambda_curve_with(&trap, &scat, n, &seps, &opts)?;
    let mut text = String::from("separation_um,lambda,chi_per_s,centre_distance_um,width0_um,width1_um\n");
    for r in &rows {
        writeln!(
            text,
            "{:.6},{:.9},{:.9},{:.6},{:.6},{:.6}",
            r.separation * 1e6,
            r.lambda,
            r.chi,
            r.centre_distance * 1e6,
            r.widths[0] * 1e6,
            r.widths[1] * 1e6
        )
        .ok();
    }
    let path = cfg.run.out_dir.join("chi_curve.csv");
    write_atomic(&path, text.as_bytes())?;
    Ok(Outcome { files: vec![path], summary: format!("{} separations\n", rows.len()) })
}

pub fn cmd_calibrate(paths: &[PathBuf], cfg: &RunConfig) -> CliResult<Outcome> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_records(p)?);
    }
    let bins = variance_by_atom_number(&records, cfg.calibration.bin_width_atoms, cfg.calibration.min_shots);
    let fit = calibration_fit(&bins)?;
    let mut text = String::new();
    writeln!(text, "bins = {}", bins.len()).ok();
    writeln!(text, "a = {:.6}", fit.a).ok();
    writeln!(text, "b = {:.6e}", fit.b).ok();
    writeln!(text, "rescale = {:.6}", fit.rescale).ok();
    let path = cfg.run.out_dir.join("calibration.txt");
    write_atomic(&path, text.as_bytes())?;
    Ok(Outcome { files: vec![path], summary: text })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{}", out.summary);
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(n) = cli.shots {
        cfg.tomography.shots_per_theta = n;
    }
    cfg.validate()?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Tomogram { records } => cmd_tomogram(records, &cfg),
        Command::Reconstruct { records } => cmd_reconstruct(records, &cfg),
        Command::ChiCurve => cmd_chi_curve(&cfg),
        Command::Calibrate { records } => cmd_calibrate(records, &cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
        let c = RunConfig::parse("[noise]\nphase_rms_deg = 3.0\n").unwrap();
        assert_eq!(c.noise.phase_rms_deg, 3.0);
        assert!((c.noise().phase_rms - 3f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let e = RunConfig::parse("[noise]\nphase_rms = 3.0\n").unwrap_err();
        let m = e.to_string();
        assert_eq!(e.exit_code(), 2);
        assert!(m.contains("phase_rms") && m.contains("line 2"), "{m}");
        assert!(RunConfig::parse("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn invalid_values_name_the_key() {
        let e = RunConfig::parse("[tomography]\ntheta_deg = [0.0, 400.0]\n").unwrap_err();
        assert!(e.to_string().contains("tomography.theta_deg"));
        let e = RunConfig::parse("[loss]\ntwo_body_per_s = [0.0, -1.0, 0.0]\n").unwrap_err();
        assert!(e.to_string().contains("loss.two_body_per_s"));
    }

    #[test]
    fn folding_angles() {
        assert_eq!(fold_angle(0.1), Some((0.1, 1.0)));
        let (t, s) = fold_angle(2.0 * PI - 0.1).unwrap();
        assert!((t + 0.1).abs() < 1e-12 && s == 1.0);
        assert_eq!(fold_angle(PI / 2.0), Some((-PI / 2.0, -1.0)));
        assert_eq!(fold_angle(PI), None);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
