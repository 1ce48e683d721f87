//! Log-Mel frontend against a direct O(N²) DFT, and sine placement.

use std::f64::consts::PI;

use social_mae::audio::{hamming, AudioFrontend, AudioFrontendConfig};

fn sine(freq: f64, seconds: f64, rate: u32) -> Vec<f32> {
    let n = (seconds * rate as f64) as usize;
    (0..n)
        .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
        .collect()
}

/// Log-Mel of one frame computed by a naive DFT over the zero-padded frame.
fn naive_frame(wave: &[f32], start: usize, cfg: &AudioFrontendConfig, weights: &[Vec<f64>]) -> Vec<f64> {
    let (win, n_fft) = (cfg.window_samples(), cfg.fft_size());
    let w = hamming(win);
    let x: Vec<f64> = (0..win).map(|i| wave[start + i] as f64 * w[i]).collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    weights
        .iter()
        .map(|row| row.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>().max(cfg.log_floor).ln())
        .collect()
}

#[test]
fn frontend_matches_direct_dft() {
    let cfg = AudioFrontendConfig::desk();
    let frontend = AudioFrontend::new(&cfg).unwrap();
    let wave: Vec<f32> = sine(440.0, 0.1, cfg.sample_rate)
        .iter()
        .zip(sine(2730.0, 0.1, cfg.sample_rate))
        .map(|(a, b)| a + 0.3 * b)
        .collect();
    let spec = frontend.logmel(&wave).unwrap();
    let weights = frontend.filterbank().weights();
    for f in [0, 3, spec.frames() - 1] {
        let oracle = naive_frame(&wave, f * cfg.hop_samples(), &cfg, weights);
        for (m, o) in oracle.iter().enumerate() {
            let got = spec.at(m, f) as f64;
            assert!((got - o).abs() < 1e-4 * o.abs().max(1.0), "frame {f} bin {m}: {got} vs {o}");
        }
    }
}

#[test]
fn sine_at_filter_center_peaks_in_that_filter() {
    let cfg = AudioFrontendConfig::default();
    let frontend = AudioFrontend::new(&cfg).unwrap();
    let fb = frontend.filterbank();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size() as f64;
    // Low filters sit closer together than one FFT bin and share bins, so a
    // tone there cannot be attributed; check every filter spaced at least a
    // full bin from its lower neighbour.
    let first = (1..cfg.n_mels)
        .find(|&k| fb.center_hz(k) - fb.center_hz(k - 1) >= bin_hz)
        .unwrap();
    assert!(first < cfg.n_mels / 2, "only bins from {first} are resolvable");
    for k in first..cfg.n_mels {
        let wave = sine(fb.center_hz(k), 0.2, cfg.sample_rate);
        let spec = frontend.logmel(&wave).unwrap();
        for f in 0..spec.frames() {
            let argmax = (0..cfg.n_mels)
                .max_by(|&a, &b| spec.at(a, f).total_cmp(&spec.at(b, f)))
                .unwrap();
            assert_eq!(argmax, k, "tone at {:.1} Hz, frame {f}", fb.center_hz(k));
        }
    }
}
