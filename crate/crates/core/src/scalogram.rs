//! Morlet continuous wavelet transform and scalogram images.
//!
//! A beat becomes an `n_scales × len` magnitude matrix, which is min-max
//! scaled, bilinearly resized to a square image, replicated to three
//! channels and normalized with the ImageNet channel statistics.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::beats::BeatSegment;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_SIZE: usize = 224;
pub const DEFAULT_SCALES: usize = 64;
pub const MORLET_OMEGA0: f64 = 6.0;
pub const MIN_PSEUDO_FREQ_HZ: f64 = 0.5;
pub const MAX_PSEUDO_FREQ_HZ: f64 = 40.0;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Morlet center frequency in cycles per unit scale.
pub fn morlet_center_frequency() -> f64 {
    MORLET_OMEGA0 / (2.0 * PI)
}

/// CWT magnitudes, row `k` at scale `scales[k]`. Row 0 is the highest
/// pseudo-frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Scales in samples.
    pub scales: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub subject_id: String,
}

impl CwtMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_energy(&self, k: usize) -> f64 {
        self.row(k).iter().map(|v| v * v).sum()
    }

    /// Builds a matrix from raw values, for callers that bring their own
    /// coefficients.
    pub fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::domain(format!(
                "coefficient matrix {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scales: Vec::new(),
            frequencies_hz: Vec::new(),
            subject_id: String::new(),
        })
    }
}

/// Log-spaced pseudo-frequencies from `MAX_PSEUDO_FREQ_HZ` down to
/// `MIN_PSEUDO_FREQ_HZ`.
pub fn pseudo_frequencies(n_scales: usize) -> Vec<f64> {
    let (lo, hi) = (MIN_PSEUDO_FREQ_HZ.ln(), MAX_PSEUDO_FREQ_HZ.ln());
    (0..n_scales)
        .map(|k| (hi - (hi - lo) * k as f64 / (n_scales - 1) as f64).exp())
        .collect()
}

/// Amplitude-normalized analytic Morlet CWT computed in the frequency
/// domain. A unit sinusoid at the pseudo-frequency of a scale produces
/// magnitude ≈ 1 on that row.
pub fn cwt_morlet(segment: &BeatSegment, n_scales: usize) -> Result<CwtMatrix> {
    if n_scales < 8 {
        return Err(Error::domain(format!("need at least 8 scales, got {n_scales}")));
    }
    let n = segment.samples.len();
    if n < 32 {
        return Err(Error::domain(format!("segment of {n} samples is too short for a CWT")));
    }
    let fs = segment.fs;
    if MAX_PSEUDO_FREQ_HZ >= fs / 2.0 {
        return Err(Error::domain(format!(
            "fs {fs} Hz cannot resolve {MAX_PSEUDO_FREQ_HZ} Hz"
        )));
    }
    let frequencies_hz = pseudo_frequencies(n_scales);
    let fc = morlet_center_frequency();
    let scales: Vec<f64> = frequencies_hz.iter().map(|f| fc * fs / f).collect();

    let n_fft = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n_fft);
    let inverse = planner.plan_fft_inverse(n_fft);

    let mut spectrum: Vec<Complex64> = segment
        .samples
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    forward.process(&mut spectrum);

    let mut data = Vec::with_capacity(n_scales * n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for &a in &scales {
        for (k, slot) in buf.iter_mut().enumerate() {
            // Only positive frequencies pass the analytic wavelet.
            let omega = 2.0 * PI * k as f64 / n_fft as f64;
            let w = if k > 0 && k < n_fft / 2 {
                let d = a * omega - MORLET_OMEGA0;
                2.0 * (-0.5 * d * d).exp()
            } else {
                0.0
            };
            *slot = spectrum[k] * w;
        }
        inverse.process(&mut buf);
        let inv_n = 1.0 / n_fft as f64;
        data.extend(buf[..n].iter().map(|c| c.norm() * inv_n));
    }

    Ok(CwtMatrix {
        rows: n_scales,
        cols: n,
        data,
        scales,
        frequencies_hz,
        subject_id: segment.subject_id.clone(),
    })
}

/// A three-channel square image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    /// Shape `[3, size, size]`.
    pub pixels: Tensor,
    pub normalized: bool,
    pub source_subject: String,
}

impl Scalogram {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_rows * out_cols);
    let sy = rows as f64 / out_rows as f64;
    let sx = cols as f64 / out_cols as f64;
    for r in 0..out_rows {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let wy = fy - y0 as f64;
        for c in 0..out_cols {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * cols + x0] * (1.0 - wx) + src[y0 * cols + x1] * wx;
            let bottom = src[y1 * cols + x0] * (1.0 - wx) + src[y1 * cols + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Min-max scaled, resized grayscale image in `[0, 1]`.
pub fn unit_image(coeffs: &CwtMatrix, size: usize) -> Result<Vec<f64>> {
    if coeffs.data.is_empty() || size == 0 {
        return Err(Error::domain("empty coefficient matrix"));
    }
    let (lo, hi) = coeffs
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let scaled: Vec<f64> = if range > 0.0 {
        coeffs.data.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; coeffs.data.len()]
    };
    Ok(resize_bilinear(&scaled, coeffs.rows, coeffs.cols, size, size))
}

/// Default 224×224 scalogram.
pub fn scalogram_image(coeffs: &CwtMatrix) -> Result<Scalogram> {
    scalogram_image_sized(coeffs, IMAGE_SIZE)
}

pub fn scalogram_image_sized(coeffs: &CwtMatrix, size: usize) -> Result<Scalogram> {
    let gray = unit_image(coeffs, size)?;
    let mut data = Vec::with_capacity(3 * gray.len());
    for c in 0..3 {
        data.extend(gray.iter().map(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
    }
    Ok(Scalogram {
        pixels: Tensor::new(vec![3, size, size], data)?,
        normalized: true,
        source_subject: coeffs.subject_id.clone(),
    })
}

/// Writes an 8-bit grayscale PNG of the pre-normalization image.
pub fn export_png(coeffs: &CwtMatrix, size: usize, path: &Path) -> Result<()> {
    let gray = unit_image(coeffs, size)?;
    let bytes: Vec<u8> = gray
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .ok_or_else(|| Error::domain("image buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_range: [f64; 2],
    pub hflip_prob: f64,
    pub enabled: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            translate_frac: 0.1,
            scale_range: [0.9, 1.1],
            hflip_prob: 0.5,
            enabled: true,
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let ok = self.rotation_deg >= 0.0
            && (0.0..1.0).contains(&self.translate_frac)
            && lo > 0.0
            && lo <= hi
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation spec {self:?}")))
        }
    }
}

/// One random affine draw (rotation, translation, scaling) followed by an
/// optional horizontal flip. Pixels mapped from outside the source take the
/// normalized value of a zero-intensity pixel.
pub fn augment(image: &Scalogram, spec: &AugmentationSpec, seed: u64) -> Result<Scalogram> {
    spec.validate()?;
    if !spec.enabled {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(-spec.rotation_deg..=spec.rotation_deg).to_radians();
    let size = image.size();
    let max_shift = spec.translate_frac * size as f64;
    let tx = rng.random_range(-max_shift..=max_shift);
    let ty = rng.random_range(-max_shift..=max_shift);
    let scale = rng.random_range(spec.scale_range[0]..=spec.scale_range[1]);
    let flip = rng.random::<f64>() < spec.hflip_prob;

    let src = image.pixels.data();
    let plane = size * size;
    let identity = angle == 0.0 && tx == 0.0 && ty == 0.0 && scale == 1.0;
    let mut out = vec![0.0; 3 * plane];
    if identity {
        out.copy_from_slice(src);
    } else {
        let (sin, cos) = angle.sin_cos();
        let center = (size as f64 - 1.0) / 2.0;
        for c in 0..3 {
            let fill = -IMAGENET_MEAN[c] / IMAGENET_STD[c];
            let channel = &src[c * plane..(c + 1) * plane];
            for r in 0..size {
                for col in 0..size {
                    // Inverse map: output pixel → source coordinate.
                    let dx = col as f64 - center - tx;
                    let dy = r as f64 - center - ty;
                    let sx = (cos * dx + sin * dy) / scale + center;
                    let sy = (-sin * dx + cos * dy) / scale + center;
                    out[c * plane + r * size + col] = sample_bilinear(channel, size, sx, sy, fill);
                }
            }
        }
    }
    if flip {
        for row in out.chunks_mut(size) {
            row.reverse();
        }
    }
    Ok(Scalogram {
        pixels: Tensor::new(vec![3, size, size], out)?,
        normalized: image.normalized,
        source_subject: image.source_subject.clone(),
    })
}

fn sample_bilinear(channel: &[f64], size: usize, x: f64, y: f64, fill: f64) -> f64 {
    let max = (size - 1) as f64;
    if !(x >= 0.0 && y >= 0.0 && x <= max && y <= max) {
        return fill;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let wx = x - x0 as f64;
    let wy = y - y0 as f64;
    let at = |r: usize, c: usize| channel[r * size + c];
    let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
    let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
    top * (1.0 - wy) + bottom * wy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segment(samples: Vec<f64>, fs: f64) -> BeatSegment {
        let n = samples.len();
        BeatSegment {
            samples,
            r_index: n / 2,
            subject_id: "s1".into(),
            window_ms: 500.0,
            fs,
        }
    }

    fn tone(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn argmax_energy(m: &CwtMatrix) -> usize {
        (0..m.rows)
            .max_by(|&a, &b| m.row_energy(a).total_cmp(&m.row_energy(b)))
            .unwrap()
    }

    #[test]
    fn sine_energy_lands_on_matching_scale() {
        let fs = 250.0;
        let m = cwt_morlet(&segment(tone(8.0, fs, 251), fs), 64).unwrap();
        let best = argmax_energy(&m);
        // Oracle: scale nearest 8 Hz via f = fc * fs / a.
        let fc = morlet_center_frequency();
        let nearest = (0..m.rows)
            .min_by(|&a, &b| {
                let fa = (fc * fs / m.scales[a] - 8.0).abs();
                let fb = (fc * fs / m.scales[b] - 8.0).abs();
                fa.total_cmp(&fb)
            })
            .unwrap();
        assert!(best.abs_diff(nearest) <= 1, "best {best}, nearest {nearest}");
        assert!(m.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_and_scaled_segments() {
        let zero = cwt_morlet(&segment(vec![0.0; 64], 250.0), 16).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));

        let x = tone(5.0, 250.0, 100);
        let a = cwt_morlet(&segment(x.clone(), 250.0), 16).unwrap();
        let b = cwt_morlet(&segment(x.iter().map(|v| 2.0 * v).collect(), 250.0), 16).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn cwt_preconditions() {
        assert!(cwt_morlet(&segment(vec![0.0; 31], 250.0), 16).is_err());
        assert!(cwt_morlet(&segment(vec![0.0; 64], 250.0), 7).is_err());
    }

    #[test]
    fn constant_matrix_image() {
        let m = CwtMatrix::from_raw(10, 20, vec![5.0; 200]).unwrap();
        let img = scalogram_image(&m).unwrap();
        assert_eq!(img.pixels.shape(), &[3, 224, 224]);
        let plane = 224 * 224;
        for c in 0..3 {
            let expected = -IMAGENET_MEAN[c] / IMAGENET_STD[c];
            assert!(img.pixels.data()[c * plane..(c + 1) * plane]
                .iter()
                .all(|&v| (v - expected).abs() < 1e-12));
        }
    }

    #[test]
    fn image_is_scale_invariant_and_square() {
        let data: Vec<f64> = (0..224 * 251).map(|i| ((i * 7919) % 1000) as f64).collect();
        let a = CwtMatrix::from_raw(224, 251, data.clone()).unwrap();
        let b = CwtMatrix::from_raw(224, 251, data.iter().map(|v| 3.0 * v).collect()).unwrap();
        let ia = scalogram_image(&a).unwrap();
        let ib = scalogram_image(&b).unwrap();
        assert_eq!(ia.pixels.shape(), &[3, 224, 224]);
        for (u, v) in ia.pixels.data().iter().zip(ib.pixels.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn sample_image() -> Scalogram {
        let data: Vec<f64> = (0..16 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        scalogram_image_sized(&CwtMatrix::from_raw(16, 16, data).unwrap(), 16).unwrap()
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = sample_image();
        assert_eq!(augment(&img, &AugmentationSpec::disabled(), 9).unwrap(), img);
    }

    #[test]
    fn augmentation_is_seeded() {
        let img = sample_image();
        let spec = AugmentationSpec {
            rotation_deg: 5.0,
            translate_frac: 0.0,
            scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            enabled: true,
        };
        let a = augment(&img, &spec, 42).unwrap();
        let b = augment(&img, &spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn double_flip_recovers_image() {
        let img = sample_image();
        let spec = AugmentationSpec {
            rotation_deg: 0.0,
            translate_frac: 0.0,
            scale_range: [1.0, 1.0],
            hflip_prob: 1.0,
            enabled: true,
        };
        let once = augment(&img, &spec, 1).unwrap();
        assert_ne!(once, img);
        let twice = augment(&once, &spec, 2).unwrap();
        for (u, v) in twice.pixels.data().iter().zip(img.pixels.data()) {
            assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = AugmentationSpec {
            scale_range: [1.1, 0.9],
            ..AugmentationSpec::default()
        };
        assert!(augment(&sample_image(), &spec, 0).is_err());
    }
}
