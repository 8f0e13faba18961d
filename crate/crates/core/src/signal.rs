//! One-dimensional ECG preprocessing: Butterworth bandpass design, zero-phase
//! filtering, band-limited downsampling, SNR-calibrated Gaussian noise and
//! z-score normalization.
//!
//! Every operation takes a record by reference and returns a new record, so
//! the whole module is safe to use from many threads at once.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Processing stage of a record. Stages only move forward; skipping is fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Filtered,
    Resampled,
    Noised,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    samples: Vec<f64>,
    fs: f64,
    subject_id: String,
    lead: String,
    stage: Stage,
}

impl EcgRecord {
    /// Creates a raw record.
    pub fn new(samples: Vec<f64>, fs: f64, subject_id: impl Into<String>, lead: impl Into<String>) -> Result<Self> {
        Self::with_stage(samples, fs, subject_id, lead, Stage::Raw)
    }

    pub fn with_stage(
        samples: Vec<f64>,
        fs: f64,
        subject_id: impl Into<String>,
        lead: impl Into<String>,
        stage: Stage,
    ) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::domain(format!("sampling rate must be positive, got {fs}")));
        }
        if samples.is_empty() {
            return Err(Error::domain("record has no samples"));
        }
        Ok(Self {
            samples,
            fs,
            subject_id: subject_id.into(),
            lead: lead.into(),
            stage,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn lead(&self) -> &str {
        &self.lead
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Derives a record at a later stage, sharing provenance with `self`.
    fn derive(&self, samples: Vec<f64>, fs: f64, stage: Stage) -> Result<Self> {
        if stage < self.stage {
            return Err(Error::domain(format!(
                "stage cannot move backwards from {:?} to {:?}",
                self.stage, stage
            )));
        }
        Self::with_stage(samples, fs, self.subject_id.clone(), self.lead.clone(), stage)
    }
}

/// One second-order section in direct form II transposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Largest pole magnitude of `1 + a1 z^-1 + a2 z^-2`.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let p1 = (Complex64::new(-self.a1, 0.0) + disc) / 2.0;
        let p2 = (Complex64::new(-self.a1, 0.0) - disc) / 2.0;
        p1.norm().max(p2.norm())
    }

    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        let num = self.b0 + z1 * self.b1 + z2 * self.b2;
        let den = 1.0 + z1 * self.a1 + z2 * self.a2;
        num / den
    }

    /// DC gain of the section.
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Runs the section in place starting from state `(z1, z2)`.
    fn run(&self, data: &mut [f64], mut z1: f64, mut z2: f64) {
        for v in data.iter_mut() {
            let x = *v;
            let y = self.b0 * x + z1;
            z1 = self.b1 * x - self.a1 * y + z2;
            z2 = self.b2 * x - self.a2 * y;
            *v = y;
        }
    }

    /// Steady-state DF2T state for a unit step input.
    fn step_state(&self) -> (f64, f64) {
        let g = self.dc_gain();
        let z2 = self.b2 - self.a2 * g;
        let z1 = self.b1 - self.a1 * g + z2;
        (z1, z2)
    }
}

/// A Butterworth bandpass realized as cascaded biquads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub biquad_sections: Vec<Biquad>,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Butterworth prototype order; the bandpass has `2 * order` poles.
    pub order: usize,
    pub design_fs: f64,
}

/// Designs a Butterworth bandpass via the bilinear transform with
/// pre-warped band edges, normalized to unit gain at the geometric center.
pub fn design_bandpass(low_hz: f64, high_hz: f64, order: usize, fs: f64) -> Result<FilterSpec> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::domain(format!("sampling rate must be positive, got {fs}")));
    }
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::domain(format!(
            "band edges must satisfy 0 < low < high < fs/2, got ({low_hz}, {high_hz}) at fs={fs}"
        )));
    }
    if !matches!(order, 2 | 4 | 6 | 8) {
        return Err(Error::domain(format!("order must be one of 2, 4, 6, 8, got {order}")));
    }

    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let w_lo = warp(low_hz);
    let w_hi = warp(high_hz);
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Lowpass prototype poles mapped to the bandpass; keep the upper half-plane
    // member of every conjugate pair.
    let mut analog_poles = Vec::with_capacity(order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * (bw / 2.0);
        let root = (half * half - w0_sq).sqrt();
        for s in [half + root, half - root] {
            if s.im > 0.0 {
                analog_poles.push(s);
            }
        }
    }
    debug_assert_eq!(analog_poles.len(), order);

    let two_fs = 2.0 * fs;
    let mut sections: Vec<Biquad> = analog_poles
        .iter()
        .map(|&s| {
            let z = (two_fs + s) / (two_fs - s);
            Biquad {
                b0: 1.0,
                b1: 0.0,
                b2: -1.0,
                a1: -2.0 * z.re,
                a2: z.norm_sqr(),
            }
        })
        .collect();

    let center = 2.0 * (w0_sq.sqrt() / two_fs).atan();
    let gain: f64 = sections.iter().map(|s| s.response(center).norm()).product();
    let per_section = gain.recip().powf(1.0 / order as f64);
    for s in &mut sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }

    Ok(FilterSpec {
        biquad_sections: sections,
        low_hz,
        high_hz,
        order,
        design_fs: fs,
    })
}

impl FilterSpec {
    /// Magnitude of the single-pass transfer function at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * PI * freq_hz / self.design_fs;
        self.biquad_sections
            .iter()
            .map(|s| s.response(omega))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
            .norm()
    }

    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.gain_at(freq_hz).log10()
    }

    pub fn is_stable(&self) -> bool {
        self.biquad_sections.iter().all(|s| s.pole_radius() < 1.0)
    }

    /// Causal single-pass filtering from zero initial state.
    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let mut out = input.to_vec();
        for s in &self.biquad_sections {
            s.run(&mut out, 0.0, 0.0);
        }
        out
    }

    /// Forward-backward filtering with odd-extension padding and step
    /// steady-state initial conditions, so the output has zero phase.
    pub fn filtfilt(&self, input: &[f64]) -> Vec<f64> {
        let n = input.len();
        if n < 2 {
            return input.to_vec();
        }
        let edge = (3 * (2 * self.biquad_sections.len() + 1)).min(n - 1);
        let first = input[0];
        let last = input[n - 1];
        let mut ext = Vec::with_capacity(n + 2 * edge);
        ext.extend((1..=edge).rev().map(|i| 2.0 * first - input[i]));
        ext.extend_from_slice(input);
        ext.extend((1..=edge).map(|i| 2.0 * last - input[n - 1 - i]));

        let states: Vec<(f64, f64)> = self.biquad_sections.iter().map(Biquad::step_state).collect();
        self.run_with_initial(&mut ext, &states);
        ext.reverse();
        self.run_with_initial(&mut ext, &states);
        ext.reverse();
        ext[edge..edge + n].to_vec()
    }

    fn run_with_initial(&self, data: &mut [f64], states: &[(f64, f64)]) {
        let mut scale = data[0];
        for (s, &(z1, z2)) in self.biquad_sections.iter().zip(states) {
            s.run(data, z1 * scale, z2 * scale);
            scale *= s.dc_gain();
        }
    }
}

/// Zero-phase bandpass filtering of a raw record.
pub fn apply_filter(record: &EcgRecord, spec: &FilterSpec) -> Result<EcgRecord> {
    if record.stage != Stage::Raw {
        return Err(Error::domain(format!(
            "filtering expects a raw record, got stage {:?}",
            record.stage
        )));
    }
    if (record.fs - spec.design_fs).abs() > 1e-9 * spec.design_fs {
        return Err(Error::domain(format!(
            "record fs {} does not match filter design fs {}",
            record.fs, spec.design_fs
        )));
    }
    record.derive(spec.filtfilt(&record.samples), record.fs, Stage::Filtered)
}

// Windowed-sinc interpolation parameters.
const RESAMPLE_ZERO_CROSSINGS: f64 = 16.0;
const RESAMPLE_ROLLOFF: f64 = 0.9;

/// Band-limited downsampling: a Blackman-windowed sinc low-pass evaluated at
/// the output sampling instants.
pub fn resample(record: &EcgRecord, target_fs: f64) -> Result<EcgRecord> {
    if !(target_fs > 0.0 && target_fs.is_finite()) {
        return Err(Error::domain(format!("target fs must be positive, got {target_fs}")));
    }
    if target_fs > record.fs {
        return Err(Error::Unsupported(format!(
            "upsampling from {} Hz to {target_fs} Hz",
            record.fs
        )));
    }
    if target_fs == record.fs {
        return record.derive(record.samples.clone(), record.fs, Stage::Resampled);
    }

    let x = &record.samples;
    let n_in = x.len();
    let n_out = ((n_in as f64) * target_fs / record.fs).round().max(1.0) as usize;
    let step = record.fs / target_fs;
    // Cutoff as a fraction of the input rate (cycles/sample).
    let cutoff = 0.5 * RESAMPLE_ROLLOFF / step;
    let half_width = RESAMPLE_ZERO_CROSSINGS / (2.0 * cutoff);

    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let t = k as f64 * step;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(n_in - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (n, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let tau = n as f64 - t;
            let w = sinc(2.0 * cutoff * tau) * blackman(tau / half_width);
            acc += w * v;
            norm += w;
        }
        out.push(if norm != 0.0 { acc / norm } else { 0.0 });
    }
    record.derive(out, target_fs, Stage::Resampled)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

fn blackman(u: f64) -> f64 {
    if u.abs() > 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
    }
}

/// Additive noise level. `Off` is the explicit no-noise mode; 0 dB is a
/// valid (very noisy) setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    Off,
    SnrDb(f64),
}

pub fn signal_power(samples: &[f64]) -> f64 {
    samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64
}

/// Adds zero-mean Gaussian noise with variance `P / 10^(snr/10)` where `P`
/// is the mean-square power of the record.
pub fn inject_noise(record: &EcgRecord, level: NoiseLevel, seed: u64) -> Result<EcgRecord> {
    let snr_db = match level {
        NoiseLevel::Off => {
            return record.derive(record.samples.clone(), record.fs, Stage::Noised);
        }
        NoiseLevel::SnrDb(db) => db,
    };
    if !snr_db.is_finite() {
        return Err(Error::domain(format!("snr must be finite, got {snr_db}")));
    }
    let power = signal_power(&record.samples);
    if power <= 0.0 {
        return Err(Error::domain("signal has zero power; SNR is undefined"));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = record.samples.iter().map(|&v| v + normal.sample(&mut rng)).collect();
    record.derive(noisy, record.fs, Stage::Noised)
}

/// Z-score normalization with the population standard deviation.
pub fn zscore(record: &EcgRecord) -> Result<EcgRecord> {
    let x = &record.samples;
    if x.len() < 2 {
        return Err(Error::domain("z-score needs at least two samples"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::domain("z-score of a constant signal is undefined"));
    }
    record.derive(
        x.iter().map(|v| (v - mean) / std).collect(),
        record.fs,
        Stage::Normalized,
    )
}

/// Settings for the full preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Skip the bandpass stage when false.
    pub filter: bool,
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    /// `None` keeps the native rate.
    pub target_fs: Option<f64>,
    pub noise: NoiseLevel,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            filter: true,
            low_hz: 0.5,
            high_hz: 40.0,
            order: 4,
            target_fs: Some(250.0),
            noise: NoiseLevel::SnrDb(20.0),
        }
    }
}

/// filter → resample → noise → z-score.
pub fn preprocess(record: &EcgRecord, config: &PreprocessConfig, seed: u64) -> Result<EcgRecord> {
    let filtered = if config.filter {
        let spec = design_bandpass(config.low_hz, config.high_hz, config.order, record.fs)?;
        apply_filter(record, &spec)?
    } else {
        record.clone()
    };
    let resampled = match config.target_fs {
        Some(fs) => resample(&filtered, fs)?,
        None => filtered,
    };
    let noised = inject_noise(&resampled, config.noise, seed)?;
    zscore(&noised)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(samples: Vec<f64>, fs: f64) -> EcgRecord {
        EcgRecord::new(samples, fs, "s0", "I").unwrap()
    }

    fn sine(freq: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn bandpass_passband_and_stopbands() {
        let spec = design_bandpass(0.5, 40.0, 4, 250.0).unwrap();
        assert!(spec.gain_db(10.0).abs() < 0.5, "10 Hz: {}", spec.gain_db(10.0));
        assert!(spec.gain_db(0.05) <= -20.0, "0.05 Hz: {}", spec.gain_db(0.05));
        assert!(spec.gain_db(60.0) <= -10.0, "60 Hz: {}", spec.gain_db(60.0));
        assert!(spec.is_stable());
    }

    #[test]
    fn bandpass_rejects_bad_arguments() {
        assert!(matches!(design_bandpass(40.0, 0.5, 4, 250.0), Err(Error::Domain(_))));
        assert!(matches!(design_bandpass(0.5, 130.0, 4, 250.0), Err(Error::Domain(_))));
        assert!(matches!(design_bandpass(0.5, 40.0, 3, 250.0), Err(Error::Domain(_))));
        assert!(matches!(design_bandpass(0.0, 40.0, 4, 250.0), Err(Error::Domain(_))));
    }

    #[test]
    fn stopbands_are_monotone() {
        let spec = design_bandpass(0.5, 40.0, 4, 250.0).unwrap();
        let low: Vec<f64> = (1..50).map(|i| spec.gain_at(i as f64 * 0.01)).collect();
        assert!(low.windows(2).all(|w| w[1] >= w[0]));
        let high: Vec<f64> = (0..80).map(|i| spec.gain_at(40.0 + i as f64)).collect();
        assert!(high.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_signal_stays_zero() {
        let spec = design_bandpass(0.5, 40.0, 4, 250.0).unwrap();
        let out = apply_filter(&raw(vec![0.0; 1000], 250.0), &spec).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
        assert_eq!(out.len(), 1000);
        assert_eq!(out.stage(), Stage::Filtered);
    }

    #[test]
    fn dc_offset_removed() {
        let fs = 250.0;
        let spec = design_bandpass(0.5, 40.0, 4, fs).unwrap();
        let x: Vec<f64> = sine(10.0, fs, 5000, 1.0).into_iter().map(|v| v + 1.0).collect();
        let out = apply_filter(&raw(x, fs), &spec).unwrap();
        let mid = &out.samples()[1000..4000];
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!(mean.abs() < 0.01, "residual DC {mean}");
    }

    #[test]
    fn apply_filter_checks_fs_and_stage() {
        let spec = design_bandpass(0.5, 40.0, 4, 250.0).unwrap();
        assert!(apply_filter(&raw(vec![1.0; 100], 500.0), &spec).is_err());
        let rec = EcgRecord::with_stage(vec![1.0; 100], 250.0, "s", "I", Stage::Normalized).unwrap();
        assert!(apply_filter(&rec, &spec).is_err());
    }

    #[test]
    fn resample_length_and_identity() {
        let rec = raw(sine(3.0, 500.0, 2500, 1.0), 500.0);
        let out = resample(&rec, 100.0).unwrap();
        assert!((out.len() as i64 - 500).abs() <= 1);
        assert_eq!(out.fs(), 100.0);

        let rec = raw(sine(3.0, 250.0, 777, 1.0), 250.0);
        let same = resample(&rec, 250.0).unwrap();
        assert_eq!(same.samples(), rec.samples());
        assert!(matches!(resample(&rec, 500.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn resample_matches_analytic_sine() {
        let rec = raw(sine(2.0, 1000.0, 5000, 1.0), 1000.0);
        let out = resample(&rec, 250.0).unwrap();
        let truth = sine(2.0, 250.0, out.len(), 1.0);
        let r = correlation(out.samples(), &truth);
        assert!(r > 0.999, "correlation {r}");
    }

    #[test]
    fn resample_rejects_aliasing_tone() {
        // 120 Hz is above the 50 Hz output Nyquist and must be suppressed.
        let rec = raw(sine(120.0, 1000.0, 10_000, 1.0), 1000.0);
        let out = resample(&rec, 100.0).unwrap();
        let inner = &out.samples()[100..900];
        assert!(signal_power(inner) < 1e-4);
    }

    #[test]
    fn noise_off_is_identity_and_seeded_noise_is_deterministic() {
        let rec = raw(sine(5.0, 250.0, 1000, 1.0), 250.0);
        let off = inject_noise(&rec, NoiseLevel::Off, 3).unwrap();
        assert_eq!(off.samples(), rec.samples());
        let a = inject_noise(&rec, NoiseLevel::SnrDb(20.0), 7).unwrap();
        let b = inject_noise(&rec, NoiseLevel::SnrDb(20.0), 7).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = inject_noise(&rec, NoiseLevel::SnrDb(20.0), 8).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn noise_on_zero_power_fails() {
        let rec = raw(vec![0.0; 10], 250.0);
        assert!(matches!(
            inject_noise(&rec, NoiseLevel::SnrDb(20.0), 1),
            Err(Error::Domain(_))
        ));
        assert!(inject_noise(&rec, NoiseLevel::Off, 1).is_ok());
    }

    #[test]
    fn zscore_examples() {
        let out = zscore(&raw(vec![1.0, 2.0, 3.0], 250.0)).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in out.samples().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = zscore(&out).unwrap();
        for (a, b) in again.samples().iter().zip(out.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            zscore(&raw(vec![5.0, 5.0, 5.0], 250.0)),
            Err(Error::Domain(_))
        ));
        assert!(zscore(&raw(vec![5.0], 250.0)).is_err());
    }

    #[test]
    fn stage_cannot_reverse() {
        let rec = EcgRecord::with_stage(vec![1.0, 2.0, 3.0], 250.0, "s", "I", Stage::Normalized).unwrap();
        assert!(resample(&rec, 100.0).is_err());
        assert!(inject_noise(&rec, NoiseLevel::Off, 0).is_err());
    }

    #[test]
    fn record_invariants() {
        assert!(EcgRecord::new(vec![], 250.0, "s", "I").is_err());
        assert!(EcgRecord::new(vec![1.0], 0.0, "s", "I").is_err());
        assert!(EcgRecord::new(vec![1.0], f64::NAN, "s", "I").is_err());
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().min(b.len());
        let ma = a[..n].iter().sum::<f64>() / n as f64;
        let mb = b[..n].iter().sum::<f64>() / n as f64;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for i in 0..n {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma).powi(2);
            sbb += (b[i] - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }
}
