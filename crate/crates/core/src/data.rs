//! Manifests, clip loading, frame sampling, on-disk video formats, and a
//! synthetic generator of class-correlated audio/video pairs.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioFrontendConfig};
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SYNTH_FILE: &str = "synth.json";

const VIDEO_MAGIC: &[u8; 8] = b"SMAEVID1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Traits(Vec<f32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "test", alias = "val")]
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// WAV path, relative to the manifest directory unless absolute.
    pub audio: PathBuf,
    /// Raw video tensor file or directory of PNG frames.
    pub video: PathBuf,
    #[serde(default)]
    pub label: Option<Label>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    /// Read `manifest.jsonl` from a dataset directory (or a direct file path).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = BufReader::new(
            fs::File::open(&file).map_err(|e| Error::data(file.display().to_string(), e.to_string()))?,
        );
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}", file.display(), n + 1), e.to_string()))?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::data(&rec.id, "duplicate clip id"));
            }
            records.push(rec);
        }
        Ok(Self { root, records })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Every record of `split` carries a label of the right arity.
    pub fn check_task(&self, task: TaskKind, split: Split) -> Result<()> {
        for r in self.split(split) {
            match (&r.label, task) {
                (Some(Label::Class(c)), TaskKind::Classification { classes }) if *c < classes => {}
                (Some(Label::Class(c)), TaskKind::Classification { classes }) => {
                    return Err(Error::data(&r.id, format!("label {c} out of range for {classes} classes")))
                }
                (Some(Label::Traits(t)), TaskKind::Regression { outputs }) if t.len() == outputs => {
                    if let Some(v) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return Err(Error::data(&r.id, format!("trait value {v} outside [0, 1]")));
                    }
                }
                (label, _) => {
                    return Err(Error::data(&r.id, format!("label {label:?} does not fit task {task:?}")))
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    /// Sorted, uniformly random distinct indices.
    Train,
    /// Uniform stride `⌊F/n⌋` from frame 0.
    Eval,
}

/// Which of `total` frames to use when `n` are needed. Short clips repeat
/// their last frame.
pub fn sample_frame_indices(total: usize, n: usize, mode: FrameMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::data("video", "clip has no frames"));
    }
    if total < n {
        log::warn!("clip has {total} frames, {n} requested; repeating the last frame");
        return Ok((0..n).map(|i| i.min(total - 1)).collect());
    }
    if total == n {
        return Ok((0..n).collect());
    }
    Ok(match mode {
        FrameMode::Eval => {
            let stride = total / n;
            (0..n).map(|i| i * stride).collect()
        }
        FrameMode::Train => {
            let mut idx = rand::seq::index::sample(rng, total, n).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// `[F, H, W, C]` frames selected along the first axis.
pub fn select_frames(video: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(Error::data("video", format!("expected [F,H,W,C] tensor, got {shape:?}")));
    }
    let frame = shape[1] * shape[2] * shape[3];
    let mut out = Vec::with_capacity(idx.len() * frame);
    for &i in idx {
        if i >= shape[0] {
            return Err(Error::Internal(format!("frame {i} out of range for {} frames", shape[0])));
        }
        out.extend_from_slice(&video.data()[i * frame..(i + 1) * frame]);
    }
    Tensor::new(&[idx.len(), shape[1], shape[2], shape[3]], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoDtype {
    F32,
    U8,
}

/// Raw tensor file: magic, u32 rank, u32 dims, u32 dtype code, LE payload.
pub fn write_raw_video(path: &Path, video: &Tensor<f32>, dtype: VideoDtype) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + video.len() * 4);
    buf.extend_from_slice(VIDEO_MAGIC);
    buf.extend_from_slice(&(video.rank() as u32).to_le_bytes());
    for &d in video.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        VideoDtype::F32 => {
            buf.extend_from_slice(&0u32.to_le_bytes());
            video.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        VideoDtype::U8 => {
            buf.extend_from_slice(&1u32.to_le_bytes());
            buf.extend(video.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_raw_video(path: &Path) -> Result<Tensor<f32>> {
    let id = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::data(&id, e.to_string()))?;
    let bad = |why: &str| Error::data(&id, format!("not a raw video tensor: {why}"));
    if bytes.len() < 12 || &bytes[..8] != VIDEO_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| -> Result<u32> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = u32_at(8)? as usize;
    if rank != 4 {
        return Err(bad(&format!("rank {rank}, expected 4")));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(12 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let dtype = u32_at(12 + 4 * rank)?;
    let start = 16 + 4 * rank;
    let n: usize = dims.iter().product();
    let payload = &bytes[start..];
    let data: Vec<f32> = match dtype {
        0 if payload.len() == 4 * n => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        1 if payload.len() == n => payload.iter().map(|&b| b as f32 / 255.0).collect(),
        0 | 1 => return Err(bad("payload length does not match dims")),
        other => return Err(bad(&format!("unknown dtype code {other}"))),
    };
    Tensor::new(&dims, data)
}

/// Sorted `*.png` files of a directory as `[F, size, size, 3]`, resized when
/// their resolution differs from `size`.
pub fn read_png_frames(dir: &Path, size: usize) -> Result<Tensor<f32>> {
    let id = dir.display().to_string();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::data(&id, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(&id, "no PNG frames"));
    }
    let mut data = Vec::with_capacity(files.len() * size * size * 3);
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::data(f.display().to_string(), e.to_string()))?
            .to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        data.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
    }
    Tensor::new(&[files.len(), size, size, 3], data)
}

/// Write `[F, H, W, 3]` frames as `frame_000.png`, ...
pub fn write_png_frames(dir: &Path, video: &Tensor<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = video.shape();
    let frame = s[1] * s[2] * s[3];
    for f in 0..s[0] {
        save_rgb_png(&dir.join(format!("frame_{f:03}.png")), &video.data()[f * frame..(f + 1) * frame], s[2], s[1])?;
    }
    Ok(())
}

pub(crate) fn save_rgb_png(path: &Path, rgb: &[f32], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?
        .save(path)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

/// Decoded inputs of one clip, before frame sampling.
#[derive(Clone, Debug)]
pub struct RawClip {
    pub id: String,
    pub waveform: Vec<f32>,
    /// Every stored frame, `[F, H, W, C]` in [0, 1].
    pub frames: Tensor<f32>,
    pub label: Option<Label>,
}

pub fn read_video(path: &Path, image_size: usize) -> Result<Tensor<f32>> {
    let video = if path.is_dir() {
        read_png_frames(path, image_size)?
    } else {
        read_raw_video(path)?
    };
    let s = video.shape();
    if s[1] != image_size || s[2] != image_size || s[3] != 3 {
        return Err(Error::data(
            path.display().to_string(),
            format!("frames are {}x{}x{}, expected {image_size}x{image_size}x3", s[1], s[2], s[3]),
        ));
    }
    Ok(video)
}

/// Decode one record's audio and all of its frames.
pub fn load_raw(manifest: &Manifest, record: &Record, audio: &AudioFrontendConfig, image_size: usize) -> Result<RawClip> {
    let tag = |e: Error| match e {
        Error::Data { reason, .. } => Error::data(&record.id, reason),
        other => other,
    };
    let waveform = read_wav(&manifest.resolve(&record.audio), audio.sample_rate).map_err(tag)?;
    if waveform.is_empty() {
        return Err(Error::data(&record.id, "empty audio"));
    }
    let frames = read_video(&manifest.resolve(&record.video), image_size).map_err(tag)?;
    Ok(RawClip {
        id: record.id.clone(),
        waveform,
        frames,
        label: record.label.clone(),
    })
}

/// Decode a record and sample `video_frames` frames.
pub fn load_clip(
    manifest: &Manifest,
    record: &Record,
    audio: &AudioFrontendConfig,
    image_size: usize,
    video_frames: usize,
    mode: FrameMode,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Tensor<f32>)> {
    let raw = load_raw(manifest, record, audio, image_size)?;
    let idx = sample_frame_indices(raw.frames.shape()[0], video_frames, mode, rng)?;
    Ok((raw.waveform, select_frames(&raw.frames, &idx)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub clips: usize,
    /// Gaussian noise std, relative to the signal amplitude.
    pub noise: f64,
    pub sample_rate: u32,
    pub duration_ms: f64,
    /// Frames stored per clip (may exceed the model's frame count).
    pub frames: usize,
    pub image_size: usize,
    pub eval_fraction: f64,
    /// Emit 5 trait scores per clip instead of a class id.
    pub traits: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            clips: 32,
            noise: 0.1,
            sample_rate: 16_000,
            duration_ms: 660.0,
            frames: 8,
            image_size: 32,
            eval_fraction: 0.25,
            traits: false,
            seed: 0,
        }
    }
}

const AMPLITUDE: f64 = 0.3;
pub const TRAITS: usize = 5;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::usage("synthetic dataset needs at least one class"));
        }
        if self.clips < self.classes {
            return Err(Error::usage(format!(
                "{} clips cannot cover {} classes",
                self.clips, self.classes
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::usage(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::usage(format!("eval fraction must lie in [0, 1), got {}", self.eval_fraction)));
        }
        if self.frames == 0 || self.image_size == 0 || self.duration_ms <= 0.0 || self.sample_rate == 0 {
            return Err(Error::usage("frames, image size, duration and sample rate must be positive"));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.duration_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Tone frequencies of class `c`: two entries of a log-spaced grid, one
    /// from each half, so classes never share a tone.
    pub fn tones(&self, c: usize) -> [f64; 2] {
        let n = 2 * self.classes;
        let (lo, hi) = (250.0f64, 0.4 * self.sample_rate as f64);
        let at = |i: usize| lo * (hi / lo).powf(i as f64 / (n - 1).max(1) as f64);
        [at(c), at(c + self.classes)]
    }

    /// (orientation, cycles per frame width, drift per frame, rgb weights).
    pub fn grating(&self, c: usize) -> (f64, f64, f64, [f64; 3]) {
        let k = self.classes as f64;
        let theta = PI * c as f64 / k;
        let cycles = 1.0 + (c % 3) as f64;
        let drift = 0.25 * PI * (1 + c % 2) as f64;
        let hue = 2.0 * PI * c as f64 / k;
        let rgb = [
            0.5 + 0.5 * hue.cos(),
            0.5 + 0.5 * (hue - 2.0 * PI / 3.0).cos(),
            0.5 + 0.5 * (hue + 2.0 * PI / 3.0).cos(),
        ];
        (theta, cycles, drift, rgb)
    }

    /// Trait scores in [0.1, 0.9] fixed by the class.
    pub fn trait_scores(&self, c: usize) -> Vec<f32> {
        let denom = (self.classes.max(2) - 1) as f32;
        (0..TRAITS)
            .map(|t| 0.1 + 0.8 * ((c + t) % self.classes) as f32 / denom)
            .collect()
    }

    pub fn audio(&self, c: usize, rng: &mut impl Rng) -> Vec<f32> {
        let noise = Normal::new(0.0, (self.noise * AMPLITUDE).max(1e-12)).expect("finite std");
        let phases: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let tones = self.tones(c);
        let sr = self.sample_rate as f64;
        (0..self.samples())
            .map(|i| {
                let t = i as f64 / sr;
                let s: f64 = tones
                    .iter()
                    .zip(&phases)
                    .map(|(f, p)| AMPLITUDE * (2.0 * PI * f * t + p).sin())
                    .sum();
                let n = if self.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                (s + n) as f32
            })
            .collect()
    }

    /// A drifting grating tinted with the class hue, so both the mean color
    /// and the pattern identify the class.
    pub fn video(&self, c: usize, rng: &mut impl Rng) -> Tensor<f32> {
        let noise = Normal::new(0.0, (self.noise * AMPLITUDE).max(1e-12)).expect("finite std");
        let (theta, cycles, drift, rgb) = self.grating(c);
        // class-determined start phase: same-class clips differ only by noise
        let phase0 = 0.5 * PI * c as f64 / self.classes as f64;
        let s = self.image_size;
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(self.frames * s * s * 3);
        for f in 0..self.frames {
            let phase = phase0 + drift * f as f64;
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * ct + y as f64 * st) / s as f64;
                    let w = (2.0 * PI * cycles * u + phase).sin();
                    for ch in rgb {
                        let n = if self.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                        data.push((0.25 + 0.5 * ch * (0.5 + 0.5 * w) + n).clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
        Tensor::new(&[self.frames, s, s, 3], data).expect("sized above")
    }
}

/// One synthetic clip in memory.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub id: String,
    pub class: usize,
    pub waveform: Vec<f32>,
    pub frames: Tensor<f32>,
    pub label: Label,
    pub split: Split,
}

/// Clips of `spec`, labels round-robin, fully determined by `spec.seed`.
pub fn generate_clips(spec: &SyntheticSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let per_class: Vec<usize> = (0..spec.classes)
        .map(|c| (spec.clips - c).div_ceil(spec.classes))
        .collect();
    (0..spec.clips)
        .map(|i| {
            let c = i % spec.classes;
            let j = i / spec.classes;
            let n_eval = (spec.eval_fraction * per_class[c] as f64).round() as usize;
            let split = if j + n_eval >= per_class[c] && n_eval > 0 { Split::Eval } else { Split::Train };
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let waveform = spec.audio(c, &mut rng);
            let frames = spec.video(c, &mut rng);
            let label = if spec.traits { Label::Traits(spec.trait_scores(c)) } else { Label::Class(c) };
            Ok(SyntheticClip {
                id: format!("clip{i:05}"),
                class: c,
                waveform,
                frames,
                label,
                split,
            })
        })
        .collect()
}

/// Materialize a dataset directory: WAVs, raw video tensors, manifest and
/// the generator spec.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    let clips = generate_clips(spec)?;
    fs::create_dir_all(out.join("audio"))?;
    fs::create_dir_all(out.join("video"))?;
    let mut records = Vec::with_capacity(clips.len());
    for clip in clips {
        let audio = PathBuf::from("audio").join(format!("{}.wav", clip.id));
        let video = PathBuf::from("video").join(format!("{}.smv", clip.id));
        write_wav(&out.join(&audio), &clip.waveform, spec.sample_rate)?;
        write_raw_video(&out.join(&video), &clip.frames, VideoDtype::U8)?;
        records.push(Record {
            id: clip.id,
            audio,
            video,
            label: Some(clip.label),
            split: clip.split,
        });
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        records,
    };
    manifest.save(out)?;
    fs::write(out.join(SYNTH_FILE), serde_json::to_string_pretty(spec)?)?;
    Ok(manifest)
}
