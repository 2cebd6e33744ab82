//! Shot-record statistics: imaging noise, post-selection, drift removal,
//! variance tables against the tomography angle, and the projection-noise
//! calibration of the atom number.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TomographyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("schema error in column `{column}`: {message}")]
    Schema { column: String, message: String },
    #[error("fit failure: {0}")]
    FitFailure(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
pub type TomographyResult<T> = Result<T, TomographyError>;

/// Non-fatal conditions met while processing records.
#[derive(Clone, Debug, PartialEq)]
pub enum Warning {
    EmptySelection,
    /// Fewer shots than the drift window; the series was left as is.
    DriftFallback { theta: f64, n_shots: usize, window: usize },
    /// Imaging-noise subtraction left a non-positive variance; the row was dropped.
    NonPositiveVariance { theta: f64, variance: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::EmptySelection => write!(f, "post-selection kept no shots"),
            Warning::DriftFallback { theta, n_shots, window } => write!(
                f,
                "theta {:.4} deg: {n_shots} shots < drift window {window}, global mean used",
                theta.to_degrees()
            ),
            Warning::NonPositiveVariance { theta, variance } => write!(
                f,
                "theta {:.4} deg: corrected variance {variance:.3} <= 0, row dropped",
                theta.to_degrees()
            ),
        }
    }
}

/// One realization: atom counts in both states at tomography angle `theta` (rad).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShotRecord {
    pub shot: usize,
    pub theta: f64,
    pub n0: f64,
    pub n1: f64,
}

impl ShotRecord {
    pub fn total(&self) -> f64 {
        self.n0 + self.n1
    }

    /// Half the population difference.
    pub fn sz(&self) -> f64 {
        0.5 * (self.n1 - self.n0)
    }
}

/// Additive Gaussian count noise of the imaging system, per state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagingNoiseSpec {
    pub sigma_n0: f64,
    pub sigma_n1: f64,
}

impl ImagingNoiseSpec {
    pub const NONE: ImagingNoiseSpec = ImagingNoiseSpec { sigma_n0: 0.0, sigma_n1: 0.0 };

    /// Equal noise in both states with sqrt(s0^2 + s1^2)/2 = `combined`.
    pub fn from_combined(combined: f64) -> Self {
        let s = combined * 2f64.sqrt();
        ImagingNoiseSpec { sigma_n0: s, sigma_n1: s }
    }

    /// Variance added to Sz = (n1 - n0)/2.
    pub fn sz_variance(&self) -> f64 {
        (self.sigma_n0.powi(2) + self.sigma_n1.powi(2)) / 4.0
    }

    pub fn validate(&self) -> TomographyResult<()> {
        if !(self.sigma_n0 >= 0.0 && self.sigma_n1 >= 0.0) {
            return Err(TomographyError::InvalidArgument(format!("imaging noise must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for ImagingNoiseSpec {
    /// Combined correction of 7 atoms.
    fn default() -> Self {
        Self::from_combined(7.0)
    }
}

pub fn add_imaging_noise_with<R: Rng + ?Sized>(record: &ShotRecord, spec: &ImagingNoiseSpec, rng: &mut R) -> ShotRecord {
    let mut out = *record;
    let z0: f64 = rng.sample(rand_distr::StandardNormal);
    let z1: f64 = rng.sample(rand_distr::StandardNormal);
    out.n0 += spec.sigma_n0 * z0;
    out.n1 += spec.sigma_n1 * z1;
    out
}

pub fn add_imaging_noise(record: &ShotRecord, spec: &ImagingNoiseSpec, seed: u64) -> ShotRecord {
    add_imaging_noise_with(record, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Keeps shots whose total lies within `half_width` of `center`, in order.
pub fn post_select(records: &[ShotRecord], center: f64, half_width: f64) -> TomographyResult<(Vec<ShotRecord>, Vec<Warning>)> {
    if !(half_width > 0.0) {
        return Err(TomographyError::InvalidArgument(format!("half_width must be > 0, got {half_width}")));
    }
    let kept: Vec<ShotRecord> = records.iter().filter(|r| (r.total() - center).abs() <= half_width).copied().collect();
    let warnings = if kept.is_empty() { vec![Warning::EmptySelection] } else { vec![] };
    Ok((kept, warnings))
}

fn polyfit_eval(ys: &[f64], order: usize, at: &[usize]) -> Vec<f64> {
    // least-squares polynomial on positions 0..len scaled to [-1, 1]
    let n = ys.len();
    let half = (n as f64 - 1.0) / 2.0;
    let scale = |i: usize| (i as f64 - half) / half.max(1.0);
    let v = DMatrix::from_fn(n, order + 1, |i, p| scale(i).powi(p as i32));
    let coef = v
        .clone()
        .svd(true, true)
        .solve(&DVector::from_column_slice(ys), 1e-12)
        .expect("svd solve");
    at.iter().map(|&i| (0..=order).map(|p| coef[p] * scale(i).powi(p as i32)).sum()).collect()
}

/// Savitzky-Golay smoothing with polynomial-fit edges. `window` must be odd and > `order`.
pub fn savitzky_golay(ys: &[f64], window: usize, order: usize) -> TomographyResult<Vec<f64>> {
    if window % 2 == 0 || order >= window {
        return Err(TomographyError::InvalidArgument(format!("need odd window > order, got {window}, {order}")));
    }
    let n = ys.len();
    if n < window {
        return Err(TomographyError::InsufficientData(format!("{n} points < window {window}")));
    }
    let half = window / 2;
    // interior weights: the centre row of the local least-squares projector
    let basis = DMatrix::from_fn(window, order + 1, |i, p| ((i as f64 - half as f64) / half as f64).powi(p as i32));
    let gram = basis.transpose() * &basis;
    let gram_inv = gram.try_inverse().ok_or_else(|| TomographyError::FitFailure("singular SG basis".into()))?;
    let e0 = DVector::from_fn(order + 1, |p, _| if p == 0 { 1.0 } else { 0.0 });
    let weights = &basis * (gram_inv * e0);
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate().take(n - half).skip(half) {
        *o = weights.iter().zip(&ys[i - half..=i + half]).map(|(w, y)| w * y).sum();
    }
    let head: Vec<usize> = (0..half).collect();
    for (i, v) in head.iter().zip(polyfit_eval(&ys[..window], order, &head)) {
        out[*i] = v;
    }
    let tail: Vec<usize> = (window - half..window).collect();
    for (i, v) in tail.iter().zip(polyfit_eval(&ys[n - window..], order, &tail)) {
        out[n - window + *i] = v;
    }
    Ok(out)
}

/// Removes slow drifts of n1 - n0 within one angle group, keeping the total per shot
/// and the mean difference.
pub fn drift_correct(records: &[ShotRecord], window: usize, order: usize) -> TomographyResult<(Vec<ShotRecord>, Vec<Warning>)> {
    let window = if window % 2 == 0 { window.saturating_sub(1) } else { window };
    if order >= window {
        return Err(TomographyError::InvalidArgument(format!("order {order} must be below window {window}")));
    }
    if records.len() < window {
        let theta = records.first().map(|r| r.theta).unwrap_or(0.0);
        return Ok((records.to_vec(), vec![Warning::DriftFallback { theta, n_shots: records.len(), window }]));
    }
    let d: Vec<f64> = records.iter().map(|r| r.n1 - r.n0).collect();
    let smooth = savitzky_golay(&d, window, order)?;
    let mean_smooth = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let out = records
        .iter()
        .zip(&smooth)
        .map(|(r, s)| {
            let shift = mean_smooth - s;
            ShotRecord { n0: r.n0 - shift / 2.0, n1: r.n1 + shift / 2.0, ..*r }
        })
        .collect();
    Ok((out, vec![]))
}

/// Var(Sz) minus the imaging contribution; the flag is set when the result is not positive.
pub fn subtract_imaging_noise(variance_sz: f64, spec: &ImagingNoiseSpec) -> (f64, bool) {
    let v = variance_sz - spec.sz_variance();
    (v, v <= 0.0)
}

pub fn unbiased_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn mean_total(records: &[ShotRecord]) -> f64 {
    records.iter().map(ShotRecord::total).sum::<f64>() / records.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TomogramRow {
    pub theta: f64,
    pub n_shots: usize,
    pub variance_raw: f64,
    pub variance_corrected: f64,
    pub normalized_db: f64,
    /// One standard error of `normalized_db`, assuming Gaussian statistics.
    pub standard_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tomogram {
    pub mean_n: f64,
    pub rows: Vec<TomogramRow>,
}

impl Tomogram {
    pub fn min_row(&self) -> Option<&TomogramRow> {
        self.rows.iter().min_by(|a, b| a.normalized_db.total_cmp(&b.normalized_db))
    }

    pub fn row_at(&self, theta: f64, tol: f64) -> Option<&TomogramRow> {
        self.rows.iter().find(|r| (r.theta - theta).abs() <= tol)
    }
}

/// Drift correction settings; the filter is applied for angles strictly inside `range`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftOptions {
    pub enabled: bool,
    pub window: usize,
    pub order: usize,
    pub range: (f64, f64),
}

impl Default for DriftOptions {
    fn default() -> Self {
        DriftOptions { enabled: true, window: 300, order: 2, range: (PI / 2.0, 2.0 * PI) }
    }
}

/// Groups records by exact angle, in ascending angle order.
pub fn group_by_theta(records: &[ShotRecord]) -> Vec<(f64, Vec<ShotRecord>)> {
    let mut groups: BTreeMap<i64, Vec<ShotRecord>> = BTreeMap::new();
    for r in records {
        // total order on finite floats via their bit pattern mapped to i64
        let bits = r.theta.to_bits() as i64;
        let key = if bits < 0 { i64::MIN - bits } else { bits };
        groups.entry(key).or_default().push(*r);
    }
    groups.into_values().map(|v| (v[0].theta, v)).collect()
}

pub fn tomogram(
    records: &[ShotRecord],
    mean_n: f64,
    imaging: &ImagingNoiseSpec,
    drift: &DriftOptions,
) -> TomographyResult<(Tomogram, Vec<Warning>)> {
    if !(mean_n > 0.0) {
        return Err(TomographyError::InvalidArgument(format!("mean atom number must be > 0, got {mean_n}")));
    }
    imaging.validate()?;
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (theta, group) in group_by_theta(records) {
        if group.len() < 2 {
            return Err(TomographyError::InsufficientData(format!(
                "theta {:.4} deg has {} shot(s), need >= 2",
                theta.to_degrees(),
                group.len()
            )));
        }
        let in_range = theta > drift.range.0 && theta < drift.range.1;
        let group = if drift.enabled && in_range {
            let (g, w) = drift_correct(&group, drift.window, drift.order)?;
            warnings.extend(w);
            g
        } else {
            group
        };
        let sz: Vec<f64> = group.iter().map(ShotRecord::sz).collect();
        let raw = unbiased_variance(&sz);
        let (corr, bad) = subtract_imaging_noise(raw, imaging);
        if bad {
            warnings.push(Warning::NonPositiveVariance { theta, variance: corr });
            continue;
        }
        let n = group.len();
        let se = raw * (2.0 / (n as f64 - 1.0)).sqrt();
        rows.push(TomogramRow {
            theta,
            n_shots: n,
            variance_raw: raw,
            variance_corrected: corr,
            normalized_db: 10.0 * (4.0 * corr / mean_n).log10(),
            standard_error: 10.0 / std::f64::consts::LN_10 * se / corr,
        });
    }
    Ok((Tomogram { mean_n, rows }, warnings))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationFit {
    pub a: f64,
    pub b: f64,
    /// Factor by which recorded atom numbers exceed the projection-noise scale: 4a.
    pub rescale: f64,
}

/// Least-squares fit of Var(Sz) = a N + b N^2.
pub fn calibration_fit(variance_by_n: &[(f64, f64)]) -> TomographyResult<CalibrationFit> {
    let mut distinct: Vec<f64> = variance_by_n.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(TomographyError::FitFailure(format!("need >= 3 distinct atom numbers, got {}", distinct.len())));
    }
    // columns scaled to unit size for conditioning
    let s = distinct.last().copied().unwrap_or(1.0).abs().max(1.0);
    let m = variance_by_n.len();
    let design = DMatrix::from_fn(m, 2, |i, c| (variance_by_n[i].0 / s).powi(c as i32 + 1));
    let y = DVector::from_iterator(m, variance_by_n.iter().map(|p| p.1));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(TomographyError::FitFailure("rank-deficient design".into()));
    }
    let coef = svd.solve(&y, 0.0).map_err(|e| TomographyError::FitFailure(e.to_string()))?;
    let (a, b) = (coef[0] / s, coef[1] / (s * s));
    Ok(CalibrationFit { a, b, rescale: 4.0 * a })
}

/// Bins shots by total atom number and returns (mean N, Var Sz) for bins with
/// at least `min_shots` shots.
pub fn variance_by_atom_number(records: &[ShotRecord], bin_width: f64, min_shots: usize) -> Vec<(f64, f64)> {
    let mut bins: BTreeMap<i64, Vec<&ShotRecord>> = BTreeMap::new();
    for r in records {
        bins.entry((r.total() / bin_width).floor() as i64).or_default().push(r);
    }
    bins.values()
        .filter(|b| b.len() >= min_shots.max(2))
        .map(|b| {
            let sz: Vec<f64> = b.iter().map(|r| r.sz()).collect();
            (b.iter().map(|r| r.total()).sum::<f64>() / b.len() as f64, unbiased_variance(&sz))
        })
        .collect()
}

pub const SHOT_HEADER: [&str; 4] = ["shot", "theta_deg", "n0", "n1"];
pub const TOMOGRAM_HEADER: [&str; 6] = ["theta_deg", "n_shots", "var_raw", "var_corr", "norm_db", "stderr_db"];

pub fn write_shot_csv<W: Write>(out: W, records: &[ShotRecord]) -> TomographyResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(SHOT_HEADER)?;
    for r in records {
        w.write_record([
            r.shot.to_string(),
            format!("{:.6}", r.theta.to_degrees()),
            r.n0.to_string(),
            r.n1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_shot_csv<R: Read>(input: R) -> TomographyResult<Vec<ShotRecord>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rd.headers()?.clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(SHOT_HEADER) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| TomographyError::Schema {
            column: name.into(),
            message: "missing column".into(),
        })?;
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> TomographyResult<f64> {
            let name = SHOT_HEADER[i];
            let raw = rec.get(idx[i]).ok_or_else(|| TomographyError::Schema {
                column: name.into(),
                message: format!("row {} is short", line + 1),
            })?;
            let v: f64 = raw.parse().map_err(|_| TomographyError::Schema {
                column: name.into(),
                message: format!("row {}: cannot parse `{raw}`", line + 1),
            })?;
            if !v.is_finite() {
                return Err(TomographyError::Schema { column: name.into(), message: format!("row {}: non-finite", line + 1) });
            }
            Ok(v)
        };
        let shot = field(0)?;
        if shot < 0.0 || shot.fract() != 0.0 {
            return Err(TomographyError::Schema { column: "shot".into(), message: format!("row {}: not an index", line + 1) });
        }
        out.push(ShotRecord { shot: shot as usize, theta: field(1)?.to_radians(), n0: field(2)?, n1: field(3)? });
    }
    Ok(out)
}

pub fn write_tomogram_csv<W: Write>(out: W, tomo: &Tomogram) -> TomographyResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(TOMOGRAM_HEADER)?;
    for r in &tomo.rows {
        w.write_record([
            format!("{:.6}", r.theta.to_degrees()),
            r.n_shots.to_string(),
            format!("{:.6}", r.variance_raw),
            format!("{:.6}", r.variance_corrected),
            format!("{:.6}", r.normalized_db),
            format!("{:.6}", r.standard_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand_distr::{Binomial, Distribution, Normal};

    fn normal_series(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn records_from_diff(d: &[f64], theta: f64) -> Vec<ShotRecord> {
        d.iter()
            .enumerate()
            .map(|(i, x)| ShotRecord { shot: i, theta, n0: 625.0 - x / 2.0, n1: 625.0 + x / 2.0 })
            .collect()
    }

    fn coherent_records(n_atoms: u64, shots: usize, theta: f64, seed: u64) -> Vec<ShotRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Binomial::new(n_atoms, 0.5).unwrap();
        (0..shots)
            .map(|i| {
                let n1 = b.sample(&mut rng) as f64;
                ShotRecord { shot: i, theta, n0: n_atoms as f64 - n1, n1 }
            })
            .collect()
    }

    #[test]
    fn imaging_noise_examples() {
        let r = ShotRecord { shot: 3, theta: 0.1, n0: 600.0, n1: 650.0 };
        assert_eq!(add_imaging_noise(&r, &ImagingNoiseSpec::NONE, 9), r);
        let spec = ImagingNoiseSpec::default();
        assert!((spec.sigma_n0 - 98f64.sqrt()).abs() < 1e-12);
        assert!(((spec.sigma_n0.powi(2) + spec.sigma_n1.powi(2)).sqrt() / 2.0 - 7.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..100_000).map(|_| add_imaging_noise_with(&r, &spec, &mut rng).n0).collect();
        let sd = unbiased_variance(&xs).sqrt();
        assert!((sd / spec.sigma_n0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn post_select_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Normal::new(1250.0, 45.0).unwrap();
        let recs: Vec<ShotRecord> = (0..100_000)
            .map(|i| {
                let n = d.sample(&mut rng);
                ShotRecord { shot: i, theta: 0.0, n0: n / 2.0, n1: n / 2.0 }
            })
            .collect();
        let (kept, w) = post_select(&recs, 1250.0, 150.0).unwrap();
        let frac = kept.len() as f64 / recs.len() as f64;
        // two-sided tail beyond 3.33 sigma is 8.6e-4
        assert!((frac - (1.0 - 8.6e-4)).abs() < 3e-4 && w.is_empty());
        assert!(kept.windows(2).all(|p| p[0].shot < p[1].shot));
        let (all, _) = post_select(&recs, 1250.0, f64::INFINITY).unwrap();
        assert_eq!(all, recs);
        let (none, w) = post_select(&recs, 0.0, 10.0).unwrap();
        assert!(none.is_empty() && w == vec![Warning::EmptySelection]);
    }

    #[test]
    fn savitzky_golay_reproduces_quadratics() {
        let ys: Vec<f64> = (0..500).map(|i| 3.0 - 0.02 * i as f64 + 1e-4 * (i * i) as f64).collect();
        let s = savitzky_golay(&ys, 101, 2).unwrap();
        for (a, b) in ys.iter().zip(&s) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn drift_constant_offset_unchanged() {
        let recs = records_from_diff(&vec![12.0; 400], 2.0);
        let (out, w) = drift_correct(&recs, 300, 2).unwrap();
        assert!(w.is_empty());
        for (a, b) in out.iter().zip(&recs) {
            assert!((a.n0 - b.n0).abs() < 1e-9 && (a.n1 - b.n1).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_removes_slow_sinusoid() {
        let white = normal_series(9000, 17.7 * 2.0, 2);
        let drifted: Vec<f64> = white
            .iter()
            .enumerate()
            .map(|(i, x)| x + 2.0 * 20.0 * (2.0 * PI * i as f64 / 3000.0).sin())
            .collect();
        let (out, _) = drift_correct(&records_from_diff(&drifted, 2.0), 300, 2).unwrap();
        let corrected: Vec<f64> = out.iter().map(|r| r.n1 - r.n0).collect();
        let ratio = unbiased_variance(&corrected) / unbiased_variance(&white);
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn drift_nearly_transparent_for_white_noise() {
        let white = normal_series(3000, 30.0, 5);
        let (out, _) = drift_correct(&records_from_diff(&white, 2.0), 300, 2).unwrap();
        let d: Vec<f64> = out.iter().map(|r| r.n1 - r.n0).collect();
        let ratio = unbiased_variance(&d) / unbiased_variance(&white);
        assert!(ratio > 0.98 && ratio <= 1.0, "ratio {ratio}");
        for (a, b) in out.iter().zip(records_from_diff(&white, 2.0)) {
            assert!((a.total() - b.total()).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_idempotent() {
        let white = normal_series(3000, 30.0, 6);
        let drifted: Vec<f64> = white.iter().enumerate().map(|(i, x)| x + 40.0 * (i as f64 / 900.0).sin()).collect();
        let (once, _) = drift_correct(&records_from_diff(&drifted, 2.0), 300, 2).unwrap();
        let (twice, _) = drift_correct(&once, 300, 2).unwrap();
        let v1 = unbiased_variance(&once.iter().map(|r| r.sz()).collect::<Vec<_>>());
        let v2 = unbiased_variance(&twice.iter().map(|r| r.sz()).collect::<Vec<_>>());
        assert!((v2 / v1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn drift_fallback_for_short_series() {
        let recs = records_from_diff(&normal_series(100, 10.0, 1), 2.0);
        let (out, w) = drift_correct(&recs, 300, 2).unwrap();
        assert_eq!(out, recs);
        assert!(matches!(w[0], Warning::DriftFallback { n_shots: 100, window: 299, .. }));
    }

    #[test]
    fn imaging_subtraction_examples() {
        assert_eq!(subtract_imaging_noise(300.0, &ImagingNoiseSpec::NONE), (300.0, false));
        let raw = 10f64.powf(-0.23) * 1250.0 / 4.0;
        let (corr, flag) = subtract_imaging_noise(raw, &ImagingNoiseSpec::from_combined(7.0));
        let db = 10.0 * (4.0 * corr / 1250.0).log10();
        assert!(!flag && (db + 3.65).abs() < 0.1, "{db}");
        assert!(subtract_imaging_noise(10.0, &ImagingNoiseSpec::from_combined(7.0)).1);
    }

    #[test]
    fn coherent_tomogram_at_sql() {
        let mut recs = Vec::new();
        for (i, deg) in [0.0, 45.0, 120.0, 200.0].iter().enumerate() {
            recs.extend(coherent_records(1250, 4000, f64::to_radians(*deg), i as u64));
        }
        let (t, w) = tomogram(&recs, 1250.0, &ImagingNoiseSpec::NONE, &DriftOptions::default()).unwrap();
        assert!(w.is_empty());
        assert_eq!(t.rows.len(), 4);
        for r in &t.rows {
            assert!(r.normalized_db.abs() < 3.0 * r.standard_error + 0.01, "{r:?}");
            assert!((r.standard_error - 10.0 / std::f64::consts::LN_10 * (2.0f64 / 3999.0).sqrt()).abs() < 0.01);
        }
    }

    #[test]
    fn noised_round_trip_recovers_variance() {
        let spec = ImagingNoiseSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let clean = coherent_records(1250, 10_000, 0.0, 3);
        let noisy: Vec<ShotRecord> = clean.iter().map(|r| add_imaging_noise_with(r, &spec, &mut rng)).collect();
        let (t, _) = tomogram(&noisy, 1250.0, &spec, &DriftOptions::default()).unwrap();
        let v_true = 312.5;
        let se = (v_true + spec.sz_variance()) * (2.0f64 / 9999.0).sqrt();
        assert!((t.rows[0].variance_corrected - v_true).abs() < 3.0 * se);
    }

    #[test]
    fn tomogram_drops_non_positive_rows() {
        let recs = records_from_diff(&normal_series(50, 2.0, 3), 0.0);
        let (t, w) = tomogram(&recs, 1250.0, &ImagingNoiseSpec::default(), &DriftOptions::default()).unwrap();
        assert!(t.rows.is_empty());
        assert!(matches!(w[0], Warning::NonPositiveVariance { .. }));
        let one = vec![recs[0]];
        assert!(tomogram(&one, 1250.0, &ImagingNoiseSpec::NONE, &DriftOptions::default()).is_err());
    }

    fn projection_points(scale: f64, b: f64, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for n in (200..=1600).step_by(100) {
            let bin = Binomial::new(n as u64, 0.5).unwrap();
            let extra = Normal::new(0.0, (b * (n * n) as f64).sqrt().max(1e-300)).unwrap();
            let sz: Vec<f64> = (0..2500)
                .map(|_| {
                    let n1 = bin.sample(&mut rng) as f64;
                    scale * (n1 - (n as f64 - n1)) / 2.0 + extra.sample(&mut rng)
                })
                .collect();
            pts.push((scale * n as f64, unbiased_variance(&sz)));
        }
        pts
    }

    #[test]
    fn calibration_examples() {
        let fit = calibration_fit(&projection_points(1.0, 0.0, 1)).unwrap();
        assert!((fit.a / 0.25 - 1.0).abs() < 0.03, "{fit:?}");
        assert!(fit.b.abs() < 1e-5);
        let fit = calibration_fit(&projection_points(0.88, 0.0, 2)).unwrap();
        assert!((fit.a / 0.22 - 1.0).abs() < 0.05 && (fit.rescale - 0.88).abs() < 0.05, "{fit:?}");
        assert!(calibration_fit(&[(100.0, 25.0), (100.0, 26.0), (200.0, 50.0)]).is_err());
    }

    #[test]
    fn calibration_recovers_quadratic_term() {
        // the spread of the fitted b is about 30% of b with 10^4 shots per bin,
        // so a 20% check needs 2e5 shots per bin
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pts = Vec::new();
        let b = 1e-5;
        for n in (200..=1600).step_by(100) {
            let bin = Binomial::new(n as u64, 0.5).unwrap();
            let extra = Normal::new(0.0, (b * (n * n) as f64).sqrt()).unwrap();
            let sz: Vec<f64> = (0..200_000)
                .map(|_| {
                    let n1 = bin.sample(&mut rng) as f64;
                    (2.0 * n1 - n as f64) / 2.0 + extra.sample(&mut rng)
                })
                .collect();
            pts.push((n as f64, unbiased_variance(&sz)));
        }
        let fit = calibration_fit(&pts).unwrap();
        assert!((fit.b / b - 1.0).abs() < 0.2, "{fit:?}");
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let recs = vec![
            ShotRecord { shot: 0, theta: 0.1, n0: 600.5, n1: 649.25 },
            ShotRecord { shot: 1, theta: 3.0, n0: 610.0, n1: 640.0 },
        ];
        let mut buf = Vec::new();
        write_shot_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("shot,theta_deg,n0,n1\n") && !text.contains('\r'));
        let back = read_shot_csv(&buf[..]).unwrap();
        for (a, b) in back.iter().zip(&recs) {
            assert!((a.theta - b.theta).abs() < 1e-7 && a.n0 == b.n0 && a.n1 == b.n1 && a.shot == b.shot);
        }
        let err = read_shot_csv("shot,n0,n1\n0,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TomographyError::Schema { ref column, .. } if column == "theta_deg"));
        let err = read_shot_csv("shot,theta_deg,n0,n1\n0,x,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TomographyError::Schema { ref column, .. } if column == "theta_deg"));
    }

    #[test]
    fn group_by_theta_orders_angles() {
        let recs: Vec<ShotRecord> = [0.3, -0.2, 0.3, 1.0, -0.2]
            .iter()
            .enumerate()
            .map(|(i, t)| ShotRecord { shot: i, theta: *t, n0: 1.0, n1: 1.0 })
            .collect();
        let g = group_by_theta(&recs);
        let thetas: Vec<f64> = g.iter().map(|x| x.0).collect();
        assert_eq!(thetas, vec![-0.2, 0.3, 1.0]);
        assert_eq!(g[1].1.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn drift_preserves_totals_and_mean(seed in 0u64..1000, offset in -50.0..50.0f64) {
            let d: Vec<f64> = normal_series(600, 20.0, seed).iter().map(|x| x + offset).collect();
            let recs = records_from_diff(&d, 2.0);
            let (out, _) = drift_correct(&recs, 300, 2).unwrap();
            let m_in = recs.iter().map(|r| r.n1 - r.n0).sum::<f64>();
            let m_out = out.iter().map(|r| r.n1 - r.n0).sum::<f64>();
            prop_assert!((m_in - m_out).abs() < 1e-6);
            for (a, b) in out.iter().zip(&recs) {
                prop_assert!((a.total() - b.total()).abs() < 1e-9);
            }
        }
    }
}
