//! Waveform to log-Mel filterbank spectrogram.
//!
//! Hamming-windowed frames, power spectrum, triangular Mel filters (built in
//! the Mel domain, each normalized to unit area), natural log with a floor.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioFrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub target_frames: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub log_floor: f64,
}

impl Default for AudioFrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 128,
            target_frames: 1024,
            mel_fmin: 0.0,
            mel_fmax: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl AudioFrontendConfig {
    /// 32 Mel bins by 64 frames.
    pub fn desk() -> Self {
        Self {
            n_mels: 32,
            target_frames: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.hop_ms > 0.0) {
            problems.push(format!("audio.hop_ms must be > 0 (got {})", self.hop_ms));
        }
        if !(self.window_ms > self.hop_ms) {
            problems.push(format!(
                "audio.window_ms ({}) must exceed audio.hop_ms ({})",
                self.window_ms, self.hop_ms
            ));
        }
        if self.n_mels == 0 {
            problems.push("audio.n_mels must be >= 1".into());
        }
        if self.target_frames == 0 {
            problems.push("audio.target_frames must be >= 1".into());
        }
        if self.sample_rate == 0 {
            problems.push("audio.sample_rate must be > 0".into());
        }
        if self.mel_fmax > self.sample_rate as f64 / 2.0 {
            problems.push(format!(
                "audio.sample_rate {} Hz cannot represent audio.mel_fmax {} Hz (Nyquist {} Hz)",
                self.sample_rate,
                self.mel_fmax,
                self.sample_rate as f64 / 2.0
            ));
        }
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < self.mel_fmax) {
            problems.push(format!(
                "audio.mel_fmin ({}) must lie in [0, mel_fmax)",
                self.mel_fmin
            ));
        }
        if !(self.log_floor > 0.0) {
            problems.push("audio.log_floor must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// `⌊(len − window)/hop⌋ + 1`, or 0 when the signal is shorter than a window.
    pub fn frame_count(&self, samples: usize) -> usize {
        let win = self.window_samples();
        if samples < win {
            0
        } else {
            (samples - win) / self.hop_samples() + 1
        }
    }
}

/// `n_mels × frames` grid of log energies.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub grid: Tensor<f32>,
    /// Frames computed from the waveform, before any padding or cropping.
    pub frame_count: usize,
}

impl Spectrogram {
    pub fn n_mels(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.grid.at(mel, frame)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters over the non-negative FFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels` rows of `n_fft/2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &AudioFrontendConfig) -> Self {
        let n_fft = cfg.fft_size();
        let n_bins = n_fft / 2 + 1;
        let lo = hz_to_mel(cfg.mel_fmin);
        let hi = hz_to_mel(cfg.mel_fmax);
        let step = (hi - lo) / (cfg.n_mels + 1) as f64;
        let points: Vec<f64> = (0..cfg.n_mels + 2).map(|i| lo + step * i as f64).collect();
        let bin_mel: Vec<f64> = (0..n_bins)
            .map(|i| hz_to_mel(i as f64 * cfg.sample_rate as f64 / n_fft as f64))
            .collect();

        let mut weights = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let mut row: Vec<f64> = bin_mel
                .iter()
                .map(|&b| {
                    if b > left && b < right {
                        if b <= center {
                            (b - left) / (center - left)
                        } else {
                            (right - b) / (right - center)
                        }
                    } else {
                        0.0
                    }
                })
                .collect();
            let area: f64 = row.iter().sum();
            if area > 0.0 {
                row.iter_mut().for_each(|w| *w /= area);
            }
            weights.push(row);
        }
        let centers_hz = points[1..=cfg.n_mels].iter().map(|&m| mel_to_hz(m)).collect();
        Self { weights, centers_hz }
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn center_hz(&self, bin: usize) -> f64 {
        self.centers_hz[bin]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable frontend: window, FFT plan and filterbank are built once.
pub struct AudioFrontend {
    cfg: AudioFrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl AudioFrontend {
    pub fn new(cfg: &AudioFrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size());
        Ok(Self {
            window: hamming(cfg.window_samples()),
            filterbank: MelFilterbank::new(cfg),
            cfg: cfg.clone(),
            fft,
        })
    }

    pub fn config(&self) -> &AudioFrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn logmel(&self, wave: &[f32]) -> Result<Spectrogram> {
        if wave.is_empty() {
            return Err(Error::usage("waveform is empty"));
        }
        let win = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        let n_fft = self.cfg.fft_size();
        let n_bins = n_fft / 2 + 1;
        let frames = self.cfg.frame_count(wave.len());
        let n_mels = self.cfg.n_mels;
        let floor = self.cfg.log_floor;

        let mut grid = vec![0f32; n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_bins];
        for f in 0..frames {
            let start = f * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < win {
                    Complex::new(wave[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, e) in self.filterbank.apply(&power).into_iter().enumerate() {
                grid[m * frames + f] = e.max(floor).ln() as f32;
            }
        }
        Ok(Spectrogram {
            grid: Tensor::new(&[n_mels, frames], grid)?,
            frame_count: frames,
        })
    }
}

pub fn waveform_to_logmel(wave: &[f32], cfg: &AudioFrontendConfig) -> Result<Spectrogram> {
    AudioFrontend::new(cfg)?.logmel(wave)
}

/// Zero-pad or truncate the frame axis at the tail.
pub fn pad_or_crop(spec: &Spectrogram, target_frames: usize) -> Spectrogram {
    let n_mels = spec.n_mels();
    let frames = spec.frames();
    let mut grid = vec![0f32; n_mels * target_frames];
    let keep = frames.min(target_frames);
    for m in 0..n_mels {
        grid[m * target_frames..m * target_frames + keep]
            .copy_from_slice(&spec.grid.data()[m * frames..m * frames + keep]);
    }
    Spectrogram {
        grid: Tensor::new(&[n_mels, target_frames], grid).expect("sized above"),
        frame_count: spec.frame_count,
    }
}

/// Dataset-level spectrogram statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioStats {
    pub mean: f64,
    pub std: f64,
}

impl AudioStats {
    /// Parse `"mean,std"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::usage(format!("--audio-stats expects `mean,std`, got `{s}`"));
        if parts.len() != 2 {
            return Err(bad());
        }
        let mean = parts[0].parse().map_err(|_| bad())?;
        let std = parts[1].parse().map_err(|_| bad())?;
        Ok(Self { mean, std })
    }

    /// Population mean and standard deviation over every cell.
    pub fn compute<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>) -> Self {
        let mut n = 0usize;
        let mut sum = 0f64;
        let mut sq = 0f64;
        for s in specs {
            for &v in s.grid.data() {
                n += 1;
                sum += v as f64;
                sq += v as f64 * v as f64;
            }
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let var = if n == 0 { 0.0 } else { (sq / n as f64 - mean * mean).max(0.0) };
        Self { mean, std: var.sqrt() }
    }
}

/// `(x − mean) / (2·std)` elementwise.
pub fn normalize(spec: &Spectrogram, stats: AudioStats) -> Result<Spectrogram> {
    if !(stats.std > 0.0) || !stats.std.is_finite() {
        return Err(Error::config(format!(
            "audio normalization std must be > 0 (got {})",
            stats.std
        )));
    }
    let scale = 1.0 / (2.0 * stats.std);
    let grid = spec
        .grid
        .map(|x| ((x as f64 - stats.mean) * scale) as f32);
    Ok(Spectrogram {
        grid,
        frame_count: spec.frame_count,
    })
}

/// Read a WAV file as mono `f32` samples in [-1, 1]. Multi-channel input is
/// averaged across channels. The file's rate must equal `expected_rate`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f32>> {
    let id = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::data(&id, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(Error::data(
            &id,
            format!(
                "sample rate {} Hz does not match configured {} Hz (no resampling)",
                spec.sample_rate, expected_rate
            ),
        ));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(&id, e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::data(&id, e.to_string()))?
        }
    };
    let ch = spec.channels.max(1) as usize;
    Ok(interleaved
        .chunks(ch)
        .map(|c| c.iter().sum::<f32>() / ch as f32)
        .collect())
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let id = path.display().to_string();
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::data(&id, e.to_string()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| Error::data(&id, e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::data(&id, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk() -> AudioFrontendConfig {
        AudioFrontendConfig::desk()
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = AudioFrontendConfig::default();
        let spec = waveform_to_logmel(&vec![0.0; 16_000], &cfg).unwrap();
        let expected = (cfg.log_floor).ln() as f32;
        assert_eq!(spec.frames(), 98);
        assert!(spec.grid.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn full_length_framing() {
        let cfg = AudioFrontendConfig::default();
        assert_eq!(cfg.window_samples(), 400);
        assert_eq!(cfg.hop_samples(), 160);
        assert_eq!(cfg.frame_count(163_840), 1022);
    }

    #[test]
    fn pad_or_crop_cases() {
        let mk = |frames: usize| Spectrogram {
            grid: Tensor::new(&[2, frames], (0..2 * frames).map(|i| i as f32 + 1.0).collect()).unwrap(),
            frame_count: frames,
        };
        let padded = pad_or_crop(&mk(1022), 1024);
        assert_eq!(padded.frames(), 1024);
        for m in 0..2 {
            assert_eq!(padded.at(m, 1022), 0.0);
            assert_eq!(padded.at(m, 1023), 0.0);
            assert_eq!(padded.at(m, 1021), mk(1022).at(m, 1021));
        }
        let long = mk(2000);
        let cropped = pad_or_crop(&long, 1024);
        assert_eq!(cropped.frames(), 1024);
        assert_eq!(cropped.at(1, 1023), long.at(1, 1023));
        let same = mk(1024);
        assert_eq!(pad_or_crop(&same, 1024), same);
    }

    #[test]
    fn normalize_cases() {
        let spec = Spectrogram {
            grid: Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            frame_count: 3,
        };
        let stats = AudioStats::compute([&spec]);
        let out = normalize(&spec, stats).unwrap();
        let mean: f64 = out.grid.data().iter().map(|&v| v as f64).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-5);

        let unit = normalize(&spec, AudioStats { mean: 0.0, std: 0.5 }).unwrap();
        assert_eq!(unit.grid, spec.grid);

        let flat = Spectrogram {
            grid: Tensor::full(&[2, 3], 4.0),
            frame_count: 3,
        };
        let flat_stats = AudioStats::compute([&flat]);
        assert!(matches!(normalize(&flat, flat_stats), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_fmax_above_nyquist() {
        let cfg = AudioFrontendConfig {
            sample_rate: 8_000,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("mel_fmax"));
    }

    #[test]
    fn stats_flag_parsing() {
        assert_eq!(
            AudioStats::parse("-4.5, 2.25").unwrap(),
            AudioStats { mean: -4.5, std: 2.25 }
        );
        assert!(AudioStats::parse("1").is_err());
    }

    #[test]
    fn wav_round_trip_downmixes_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for &(l, r) in &[(0.5f32, 0.1f32), (-0.2, 0.2)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let mono = read_wav(&path, 16_000).unwrap();
        assert_eq!(mono, vec![0.3, 0.0]);
        assert!(read_wav(&path, 22_050).is_err());
    }

    proptest! {
        #[test]
        fn frame_count_matches_closed_form(len in 1usize..40_000) {
            let cfg = desk();
            let spec = waveform_to_logmel(&vec![0.01; len], &cfg).unwrap();
            let expected = if len < 400 { 0 } else { (len - 400) / 160 + 1 };
            prop_assert_eq!(spec.frames(), expected);
            let fixed = pad_or_crop(&spec, cfg.target_frames);
            prop_assert_eq!(fixed.n_mels(), 32);
            prop_assert_eq!(fixed.frames(), 64);
        }

        #[test]
        fn louder_never_decreases_energy(seed in 0u64..1000, gain in 1.1f32..8.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let wave: Vec<f32> = (0..2000).map(|_| rng.random_range(-0.1..0.1)).collect();
            let louder: Vec<f32> = wave.iter().map(|&x| x * gain).collect();
            let cfg = desk();
            let a = waveform_to_logmel(&wave, &cfg).unwrap();
            let b = waveform_to_logmel(&louder, &cfg).unwrap();
            for (x, y) in a.grid.data().iter().zip(b.grid.data()) {
                prop_assert!(y >= x);
            }
        }
    }
}
