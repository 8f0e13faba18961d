//! Filtering, resampling, noise, normalization and segmentation properties.

use ecgauth::beats::{
    detect_r_peaks, match_peaks, pan_tompkins_peaks, segment_beats, segment_length, Detector, PeakList,
};
use ecgauth::data_io::synth_ecg;
use ecgauth::signal::{design_bandpass, inject_noise, resample, signal_power, zscore, NoiseLevel};
use ecgauth::EcgRecord;
use proptest::prelude::*;

fn pulse_train(n: usize, period: usize, phase: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let d = (i + period - phase % period) % period;
            let d = d.min(period - d) as f64;
            (-d * d / 8.0).exp()
        })
        .collect()
}

fn lag_of_max_xcorr(a: &[f64], b: &[f64], max_lag: isize) -> isize {
    let score = |lag: isize| -> f64 {
        (0..a.len() as isize)
            .filter_map(|i| {
                let j = i + lag;
                (j >= 0 && (j as usize) < b.len()).then(|| a[i as usize] * b[j as usize])
            })
            .sum()
    };
    (-max_lag..=max_lag)
        .max_by(|&x, &y| score(x).total_cmp(&score(y)))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segment_length_is_odd_and_centered(window_ms in 20.0f64..600.0, fs in 50.0f64..1000.0) {
        let half = (window_ms * fs / 1000.0).round() as usize;
        let len = segment_length(window_ms, fs);
        prop_assert_eq!(len, 2 * half + 1);
        let n = 4 * len + 10;
        let rec = EcgRecord::new((0..n).map(|i| i as f64).collect(), fs, "s", "I").unwrap();
        let peaks = PeakList { indices: vec![half, n / 2, n - half - 1, n - half], fs, detector: Detector::LocalMaxima };
        let seg = segment_beats(&rec, &peaks, window_ms).unwrap();
        prop_assert_eq!(seg.skipped, 1);
        for b in &seg.beats {
            prop_assert_eq!(b.samples.len(), len);
            prop_assert_eq!(b.r_index, half);
        }
        prop_assert_eq!(seg.beats.len(), 3);
        prop_assert_eq!(seg.beats[0].samples[half], half as f64);
        prop_assert_eq!(seg.beats[2].samples[len - 1], (n - 1) as f64);
    }

    #[test]
    fn filtfilt_is_zero_phase(period in 60usize..200, phase in 0usize..200, fs in prop::sample::select(vec![250.0, 360.0, 500.0])) {
        let x = pulse_train(4000, period, phase);
        let y = design_bandpass(0.5, 40.0, 4, fs).unwrap().filtfilt(&x);
        prop_assert_eq!(lag_of_max_xcorr(&x, &y, 10), 0);
    }

    #[test]
    fn measured_snr_matches_request(snr in -5.0f64..30.0, seed in 0u64..1_000_000) {
        let x: Vec<f64> = (0..100_000).map(|i| (i as f64 * 0.031).sin() + 0.3 * (i as f64 * 0.0071).cos()).collect();
        let rec = EcgRecord::new(x.clone(), 250.0, "s", "I").unwrap();
        let noisy = inject_noise(&rec, NoiseLevel::SnrDb(snr), seed).unwrap();
        let noise: Vec<f64> = noisy.samples().iter().zip(&x).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (signal_power(&x) / signal_power(&noise)).log10();
        prop_assert!((measured - snr).abs() <= 0.3, "measured {measured} for {snr}");
    }

    #[test]
    fn zscore_has_zero_mean_and_unit_variance(x in prop::collection::vec(-100.0f64..100.0, 2..300)) {
        prop_assume!(x.iter().any(|v| *v != x[0]));
        let z = zscore(&EcgRecord::new(x, 250.0, "s", "I").unwrap()).unwrap();
        let n = z.len() as f64;
        let mean = z.samples().iter().sum::<f64>() / n;
        let var = z.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn resampling_scales_the_length(n in 100usize..2000, from in prop::sample::select(vec![250.0, 360.0, 500.0, 1000.0])) {
        let rec = EcgRecord::new((0..n).map(|i| (i as f64 * 0.01).sin()).collect(), from, "s", "I").unwrap();
        let out = resample(&rec, 100.0).unwrap();
        prop_assert_eq!(out.fs(), 100.0);
        prop_assert!((out.len() as f64 - n as f64 * 100.0 / from).abs() <= 1.0);
    }

    #[test]
    fn detector_recovers_synthetic_beats(seed in 0u64..1000, fs in prop::sample::select(vec![250.0, 360.0, 500.0])) {
        let synth = synth_ecg(3, 20, fs, seed).unwrap();
        for (rec, truth) in synth.records.iter().zip(&synth.peaks) {
            let clean = zscore(rec).unwrap();
            let found = detect_r_peaks(&clean, 0.5, 0.6).unwrap();
            prop_assert_eq!(found.len(), truth.len());
            prop_assert_eq!(match_peaks(&found.indices, truth, 1), truth.len());
            let pt = pan_tompkins_peaks(&clean).unwrap();
            let tol = (0.04 * fs).round() as usize;
            prop_assert!(match_peaks(&pt.indices, truth, tol) as f64 >= 0.9 * truth.len() as f64);
        }
    }
}

#[test]
fn passband_and_stopband_gains() {
    for fs in [250.0, 360.0, 500.0, 1000.0] {
        let spec = design_bandpass(0.5, 40.0, 4, fs).unwrap();
        assert!(spec.gain_db(10.0).abs() <= 0.5, "fs={fs}: {}", spec.gain_db(10.0));
        assert!(spec.gain_db(0.05) <= -20.0, "fs={fs}: {}", spec.gain_db(0.05));
        assert!(spec.is_stable());
    }
}

#[test]
fn noise_is_reproducible_per_seed() {
    let rec = EcgRecord::new((0..500).map(|i| (i as f64).sin()).collect(), 250.0, "s", "I").unwrap();
    let a = inject_noise(&rec, NoiseLevel::SnrDb(10.0), 3).unwrap();
    let b = inject_noise(&rec, NoiseLevel::SnrDb(10.0), 3).unwrap();
    let c = inject_noise(&rec, NoiseLevel::SnrDb(10.0), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn impulse_response_energy_matches_frequency_response() {
    for (low, high, order, fs) in [(0.5, 40.0, 4, 250.0), (1.0, 30.0, 2, 360.0), (0.5, 40.0, 8, 500.0)] {
        let spec = design_bandpass(low, high, order, fs).unwrap();
        let n = 1 << 16;
        let mut impulse = vec![0.0; n];
        impulse[0] = 1.0;
        let time: f64 = spec.process(&impulse).iter().map(|h| h * h).sum();
        let freq = (0..n).map(|k| spec.gain_at(k as f64 * fs / n as f64).powi(2)).sum::<f64>() / n as f64;
        assert!((time - freq).abs() <= 1e-6, "order {order} at {fs}: {time} vs {freq}");
    }
}
