//! R-peak detection and R-centered beat segmentation.
//!
//! The production detector is a `find_peaks`-style local-maxima search with a
//! relative height threshold and a minimum peak distance. A Pan–Tompkins
//! chain is kept alongside it as an independent cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{design_bandpass, EcgRecord, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    LocalMaxima,
    PanTompkins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakList {
    pub indices: Vec<usize>,
    pub fs: f64,
    pub detector: Detector,
}

impl PeakList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Minimum peak distance in samples; kept peaks are at least this far apart.
pub fn distance_samples(min_distance_s: f64, fs: f64) -> usize {
    ((min_distance_s * fs) - 1e-9).ceil().max(1.0) as usize
}

/// Keeps the tallest candidates first and suppresses any neighbor closer than
/// `distance`. Ties go to the lower index.
fn suppress_close(candidates: &[usize], values: &[f64], distance: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        values[candidates[b]]
            .total_cmp(&values[candidates[a]])
            .then(candidates[a].cmp(&candidates[b]))
    });
    let mut removed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for &pos in &order {
        if removed[pos] {
            continue;
        }
        kept.push(candidates[pos]);
        let center = candidates[pos];
        // candidates are sorted, so neighbors within the distance are contiguous.
        let mut j = pos;
        while j > 0 && center - candidates[j - 1] < distance {
            j -= 1;
            removed[j] = true;
        }
        let mut j = pos + 1;
        while j < candidates.len() && candidates[j] - center < distance {
            removed[j] = true;
            j += 1;
        }
    }
    kept.sort_unstable();
    kept
}

fn strict_local_maxima(x: &[f64]) -> Vec<usize> {
    (1..x.len().saturating_sub(1))
        .filter(|&i| x[i] > x[i - 1] && x[i] > x[i + 1])
        .collect()
}

/// Local-maxima R-peak detector. `min_height` is a fraction of the record's
/// min-max range.
pub fn detect_r_peaks(record: &EcgRecord, min_height: f64, min_distance_s: f64) -> Result<PeakList> {
    if record.stage() != Stage::Normalized {
        return Err(Error::domain(format!(
            "peak detection expects a normalized record, got {:?}",
            record.stage()
        )));
    }
    if !(min_distance_s > 0.0) {
        return Err(Error::domain("minimum peak distance must be positive"));
    }
    if !(0.0..=1.0).contains(&min_height) {
        return Err(Error::domain(format!(
            "min_height must lie in [0, 1], got {min_height}"
        )));
    }
    let x = record.samples();
    if x.len() < 3 {
        return Err(Error::domain("record too short for peak detection"));
    }
    let empty = PeakList {
        indices: Vec::new(),
        fs: record.fs(),
        detector: Detector::LocalMaxima,
    };
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(empty);
    }
    let scaled: Vec<f64> = x.iter().map(|v| (v - lo) / range).collect();
    let candidates: Vec<usize> = strict_local_maxima(&scaled)
        .into_iter()
        .filter(|&i| scaled[i] >= min_height)
        .collect();
    let distance = distance_samples(min_distance_s, record.fs());
    Ok(PeakList {
        indices: suppress_close(&candidates, &scaled, distance),
        ..empty
    })
}

/// Pan–Tompkins QRS detector: 5–15 Hz bandpass, five-point derivative,
/// squaring, 150 ms moving-window integration and adaptive dual thresholds
/// with search-back. Each QRS is then located at the record maximum near
/// the integrated peak.
pub fn pan_tompkins_peaks(record: &EcgRecord) -> Result<PeakList> {
    let fs = record.fs();
    if fs < 100.0 {
        return Err(Error::domain(format!("Pan-Tompkins needs fs >= 100 Hz, got {fs}")));
    }
    if record.duration_s() < 2.0 {
        return Err(Error::domain("Pan-Tompkins needs at least 2 s of signal"));
    }
    let x = record.samples();
    let n = x.len();
    let result = |indices| PeakList {
        indices,
        fs,
        detector: Detector::PanTompkins,
    };

    let band = design_bandpass(5.0, 15.0, 2, fs)?.filtfilt(x);
    let mut deriv = vec![0.0; n];
    for i in 2..n.saturating_sub(2) {
        deriv[i] = (2.0 * band[i + 2] + band[i + 1] - band[i - 1] - 2.0 * band[i - 2]) / 8.0;
    }
    let squared: Vec<f64> = deriv.iter().map(|v| v * v).collect();
    let mwi = centered_moving_average(&squared, ((0.150 * fs).round() as usize).max(1));

    let refractory = distance_samples(0.2, fs);
    let candidates = suppress_close(&strict_local_maxima(&mwi), &mwi, refractory);
    if candidates.is_empty() {
        return Ok(result(Vec::new()));
    }

    let warmup = ((2.0 * fs) as usize).min(n);
    let warm = &mwi[..warmup];
    let mut spki = 0.25 * warm.iter().cloned().fold(0.0, f64::max);
    let mut npki = 0.5 * warm.iter().sum::<f64>() / warmup as f64;
    let mut qrs: Vec<usize> = Vec::new();
    let mut rr_avg: Option<f64> = None;

    for (ci, &i) in candidates.iter().enumerate() {
        let v = mwi[i];
        let threshold = npki + 0.25 * (spki - npki);
        if v > threshold && v > 0.0 {
            // Search back over skipped candidates when the gap is too long.
            if let (Some(&last), Some(avg)) = (qrs.last(), rr_avg) {
                if (i - last) as f64 > 1.66 * avg {
                    let threshold2 = 0.5 * threshold;
                    let missed = candidates[..ci]
                        .iter()
                        .filter(|&&c| c > last + refractory && c + refractory < i)
                        .filter(|&&c| mwi[c] > threshold2)
                        .max_by(|&&a, &&b| mwi[a].total_cmp(&mwi[b]).then(b.cmp(&a)));
                    if let Some(&m) = missed {
                        spki = 0.25 * mwi[m] + 0.75 * spki;
                        qrs.push(m);
                    }
                }
            }
            spki = 0.125 * v + 0.875 * spki;
            if let Some(&last) = qrs.last() {
                let rr = (i - last) as f64;
                rr_avg = Some(match rr_avg {
                    Some(avg) => 0.875 * avg + 0.125 * rr,
                    None => rr,
                });
            }
            qrs.push(i);
        } else {
            npki = 0.125 * v + 0.875 * npki;
        }
    }

    let reach = (0.1 * fs).round() as usize;
    let mut peaks: Vec<usize> = qrs
        .into_iter()
        .map(|i| {
            let lo = i.saturating_sub(reach);
            let hi = (i + reach).min(n - 1);
            (lo..=hi)
                .max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a)))
                .unwrap_or(i)
        })
        .collect();
    peaks.sort_unstable();
    peaks.dedup();
    Ok(result(peaks))
}

fn centered_moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let half = width / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(n);
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

/// A fixed-length window centered on one R-peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatSegment {
    pub samples: Vec<f64>,
    pub r_index: usize,
    pub subject_id: String,
    pub window_ms: f64,
    pub fs: f64,
}

/// Samples on each side of the R-peak for a half-window of `window_ms`.
pub fn half_window_samples(window_ms: f64, fs: f64) -> usize {
    (window_ms * fs / 1000.0).round() as usize
}

/// Full segment length `2 * round(window_ms * fs / 1000) + 1`.
pub fn segment_length(window_ms: f64, fs: f64) -> usize {
    2 * half_window_samples(window_ms, fs) + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub beats: Vec<BeatSegment>,
    /// Peaks dropped because their window crossed a record boundary.
    pub skipped: usize,
}

pub fn segment_beats(record: &EcgRecord, peaks: &PeakList, window_ms: f64) -> Result<Segmentation> {
    if !(window_ms > 0.0) {
        return Err(Error::domain("window_ms must be positive"));
    }
    let half = half_window_samples(window_ms, record.fs());
    let x = record.samples();
    let mut beats = Vec::with_capacity(peaks.len());
    let mut skipped = 0;
    for &r in &peaks.indices {
        if r < half || r + half >= x.len() {
            skipped += 1;
            continue;
        }
        beats.push(BeatSegment {
            samples: x[r - half..=r + half].to_vec(),
            r_index: half,
            subject_id: record.subject_id().to_string(),
            window_ms,
            fs: record.fs(),
        });
    }
    Ok(Segmentation { beats, skipped })
}

/// Greedy one-to-one matching of detected peaks to reference peaks within
/// `tolerance` samples. Returns the number of matched pairs.
pub fn match_peaks(detected: &[usize], reference: &[usize], tolerance: usize) -> usize {
    let mut used = vec![false; detected.len()];
    let mut matched = 0;
    for &r in reference {
        let best = detected
            .iter()
            .enumerate()
            .filter(|(i, &d)| !used[*i] && d.abs_diff(r) <= tolerance)
            .min_by_key(|(_, &d)| d.abs_diff(r));
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
        }
    }
    matched
}
