//! Acoustic front end and feature/visual file formats.
//!
//! Log-mel frames are computed at a 10 ms hop, then three neighbouring frames
//! are stacked and decimated by three at phase offsets 0, 1 and 2, giving
//! three 120-d views of every utterance at a 30 ms step.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MEL_DIM: usize = 40;
pub const STACK: usize = 3;
pub const STACKED_DIM: usize = MEL_DIM * STACK;
pub const VISUAL_DIM: usize = 100;
pub const FUSED_DIM: usize = STACKED_DIM + VISUAL_DIM;
pub const BASE_STEP_MS: u32 = 10;

const FEATURE_MAGIC: &[u8; 4] = b"E2EF";
const VISUAL_MAGIC: &[u8; 4] = b"E2EV";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Time-major matrix of feature frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    dim: usize,
    step_ms: u32,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, dim: usize, step_ms: u32) -> Result<Self> {
        if dim == 0 || !frames.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "{} values do not form frames of dimension {dim}",
                frames.len()
            )));
        }
        if let Some(bad) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at index {bad}")));
        }
        Ok(Self {
            frames,
            dim,
            step_ms,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], step_ms: u32) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("ragged feature rows".into()));
        }
        Self::new(rows.concat(), dim, step_ms)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_ms(&self) -> u32 {
        self.step_ms
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(
            self.n_frames(),
            self.dim,
            self.frames.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let mut buf = Vec::with_capacity(20 + 4 * self.frames.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.n_frames() as u32,
            self.dim as u32,
            self.step_ms,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let n_frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let step_ms = r.u32()?;
        let frames = r.f32s(n_frames * dim)?;
        r.finish()?;
        Self::new(frames, dim, step_ms).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Utterance-level semantic visual vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualContext {
    pub vector: Vec<f32>,
    pub utterance_id: String,
}

impl VisualContext {
    pub fn new(vector: Vec<f32>, utterance_id: impl Into<String>) -> Result<Self> {
        if vector.len() != VISUAL_DIM {
            return Err(Error::Dimension {
                what: "visual vector".into(),
                expected: VISUAL_DIM,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("visual vector".into()));
        }
        Ok(Self {
            vector,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(self.vector.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.vector.len());
        buf.extend_from_slice(VISUAL_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vector.len() as u32).to_le_bytes());
        for v in &self.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Reads a 100-d visual vector. The utterance id is taken from the file stem.
pub fn load_visual(path: &Path) -> Result<VisualContext> {
    let bytes = read_all(path)?;
    let mut r = ByteReader::new(path, &bytes);
    r.magic(VISUAL_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let dim = r.u32()? as usize;
    if dim != VISUAL_DIM {
        return Err(Error::Dimension {
            what: format!("visual vector in {}", path.display()),
            expected: VISUAL_DIM,
            got: dim,
        });
    }
    let vector = r.f32s(dim)?;
    r.finish()?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VisualContext::new(vector, id)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Little-endian cursor over a binary file.
pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if !self.at_end() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub preemphasis: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: MEL_DIM,
            preemphasis: 0.97,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl LogMelConfig {
    pub fn window_len(&self) -> usize {
        (f64::from(self.sample_rate) * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (f64::from(self.sample_rate) * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        let w = self.window_len();
        if n_samples < w {
            0
        } else {
            (n_samples - w) / self.hop_len() + 1
        }
    }
}

/// Precomputed window, FFT plan, and triangular mel filters.
pub struct LogMelExtractor {
    config: LogMelConfig,
    window: Vec<f64>,
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(config: LogMelConfig) -> Result<Self> {
        let win = config.window_len();
        if win == 0 || config.hop_len() == 0 || config.n_fft < win || config.n_mels == 0 {
            return Err(Error::Config(format!(
                "window {win} samples does not fit FFT size {}",
                config.n_fft
            )));
        }
        let nyquist = f64::from(config.sample_rate) / 2.0;
        let f_max = config.f_max.min(nyquist);
        // Periodic Hann window.
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
            .collect();
        let n_bins = config.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(config.f_min);
        let mel_hi = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(config.sample_rate) / config.n_fft as f64;
        let filters = (0..config.n_mels)
            .map(|m| {
                let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > lo && f <= centre {
                            (f - lo) / (centre - lo)
                        } else if f > centre && f < hi {
                            (hi - f) / (hi - centre)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let start = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = weights
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .map_or(start, |e| e + 1);
                (start, weights[start..end].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.config
    }

    /// 40-d log-mel frames at a 10 ms hop.
    pub fn compute(&self, wave: &Waveform) -> Result<FeatureSequence> {
        let cfg = &self.config;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::Validation(format!(
                "sample rate {} Hz, extractor expects {} Hz",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        if wave.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform sample".into()));
        }
        let n_frames = cfg.n_frames(wave.samples.len());
        if n_frames == 0 {
            return Err(Error::EmptyInput(format!(
                "{} samples is shorter than one {}-sample window",
                wave.samples.len(),
                cfg.window_len()
            )));
        }
        let s = &wave.samples;
        let emphasized: Vec<f64> = (0..s.len())
            .map(|n| {
                if n == 0 {
                    s[0]
                } else {
                    s[n] - cfg.preemphasis * s[n - 1]
                }
            })
            .collect();
        let (win, hop) = (cfg.window_len(), cfg.hop_len());
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; cfg.n_fft / 2 + 1];
        let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
        for t in 0..n_frames {
            let frame = &emphasized[t * hop..t * hop + win];
            for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(x * w, 0.0);
            }
            buf[win..]
                .iter_mut()
                .for_each(|b| *b = Complex::new(0.0, 0.0));
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (start, weights) in &self.filters {
                let energy: f64 = weights
                    .iter()
                    .zip(&power[*start..])
                    .map(|(w, p)| w * p)
                    .sum();
                out.push(energy.max(cfg.log_floor).ln() as f32);
            }
        }
        FeatureSequence::new(out, cfg.n_mels, cfg.hop_ms.round() as u32)
    }
}

/// Log-mel features with the default 16 kHz / 25 ms / 10 ms configuration.
pub fn compute_logmel(wave: &Waveform) -> Result<FeatureSequence> {
    LogMelExtractor::new(LogMelConfig::default())?.compute(wave)
}

/// Number of frames in stacked copy `offset` of a `n_frames`-frame input.
pub fn stacked_len(n_frames: usize, offset: usize) -> usize {
    if n_frames < offset + STACK {
        0
    } else {
        (n_frames - offset - STACK) / STACK + 1
    }
}

/// Stacks three neighbouring frames and decimates by three at each phase
/// offset. Copy `k`, frame `t` is `concat(f[3t+k], f[3t+k+1], f[3t+k+2])`.
/// Copy 0 is the decoding view; later copies may be empty for very short input.
pub fn stack_and_oversample(fs: &FeatureSequence) -> Result<[FeatureSequence; 3]> {
    let n = fs.n_frames();
    if n < STACK {
        return Err(Error::EmptyInput(format!(
            "stacking needs at least {STACK} frames, got {n}"
        )));
    }
    let make = |offset: usize| {
        let len = stacked_len(n, offset);
        let mut data = Vec::with_capacity(len * fs.dim * STACK);
        for t in 0..len {
            let start = STACK * t + offset;
            data.extend_from_slice(&fs.frames[start * fs.dim..(start + STACK) * fs.dim]);
        }
        FeatureSequence::new(data, fs.dim * STACK, fs.step_ms * STACK as u32)
    };
    Ok([make(0)?, make(1)?, make(2)?])
}

/// Per-dimension mean/variance normalization fitted on a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const MIN_STD: f64 = 1e-5;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut dim = None;
        let mut sum = Vec::new();
        let mut sum_sq = Vec::new();
        let mut count = 0usize;
        for s in seqs {
            let d = *dim.get_or_insert_with(|| {
                sum = vec![0.0; s.dim()];
                sum_sq = vec![0.0; s.dim()];
                s.dim()
            });
            if s.dim() != d {
                return Err(Error::Dimension {
                    what: "normalizer input".into(),
                    expected: d,
                    got: s.dim(),
                });
            }
            for row in s.data().chunks(d) {
                for (k, &v) in row.iter().enumerate() {
                    let v = f64::from(v);
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
            }
            count += s.n_frames();
        }
        if count == 0 {
            return Err(Error::EmptyInput("no frames to fit normalization".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(Self::MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, fs: &FeatureSequence) -> Result<FeatureSequence> {
        if fs.dim() != self.mean.len() {
            return Err(Error::Dimension {
                what: "normalizer".into(),
                expected: self.mean.len(),
                got: fs.dim(),
            });
        }
        let d = fs.dim();
        let frames = fs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((f64::from(v) - self.mean[i % d]) / self.std[i % d]) as f32)
            .collect();
        FeatureSequence::new(frames, d, fs.step_ms())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize, freq: f64) -> Waveform {
        Waveform {
            samples: (0..n)
                .map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() * 0.3)
                .collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let fs = compute_logmel(&Waveform {
            samples: vec![0.0; 16000],
            sample_rate: 16000,
        })
        .unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(fs.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_gives_98_frames_of_40() {
        let fs = compute_logmel(&sine(16000, 440.0)).unwrap();
        assert_eq!(fs.n_frames(), (16000 - 400) / 160 + 1);
        assert_eq!(fs.n_frames(), 98);
        assert_eq!(fs.dim(), MEL_DIM);
        assert_eq!(fs.step_ms(), 10);
    }

    #[test]
    fn too_short_is_an_error() {
        let err = compute_logmel(&sine(399, 440.0)).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn tone_energy_lands_in_the_right_band() {
        let fs = compute_logmel(&sine(4000, 1000.0)).unwrap();
        let frame = fs.frame(5);
        let peak = (0..MEL_DIM)
            .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
            .unwrap();
        let centre = |m: usize| mel_to_hz(hz_to_mel(8000.0) * (m + 1) as f64 / 41.0);
        assert!(
            (centre(peak) - 1000.0).abs() < 150.0,
            "peak filter {peak} at {} Hz",
            centre(peak)
        );
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let base = sine(8000, 523.0);
        let mut shifted = vec![0.25; 160];
        shifted.extend_from_slice(&base.samples);
        let a = compute_logmel(&base).unwrap();
        let b = compute_logmel(&Waveform {
            samples: shifted,
            sample_rate: 16000,
        })
        .unwrap();
        for t in 1..a.n_frames() {
            for (x, y) in a.frame(t).iter().zip(b.frame(t + 1)) {
                assert!(
                    (x - y).abs() <= 1e-6 * x.abs().max(1.0),
                    "frame {t}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn stacking_counts_and_offsets() {
        let rows: Vec<Vec<f32>> = (0..9).map(|t| vec![t as f32; MEL_DIM]).collect();
        let fs = FeatureSequence::from_rows(&rows, 10).unwrap();
        let copies = stack_and_oversample(&fs).unwrap();
        let lens: Vec<usize> = copies.iter().map(FeatureSequence::n_frames).collect();
        assert_eq!(lens, vec![3, 2, 2]);
        for (k, c) in copies.iter().enumerate() {
            assert_eq!(c.dim(), STACKED_DIM);
            assert_eq!(c.step_ms(), 30);
            let f0 = c.frame(0);
            for j in 0..3 {
                assert!(f0[j * MEL_DIM..(j + 1) * MEL_DIM]
                    .iter()
                    .all(|&v| v == (k + j) as f32));
            }
        }
    }

    #[test]
    fn stacking_needs_three_frames() {
        let fs = FeatureSequence::from_rows(&[vec![0.0; 40], vec![0.0; 40]], 10).unwrap();
        assert!(stack_and_oversample(&fs).is_err());
    }

    #[test]
    fn constant_input_stacks_identically() {
        let fs = FeatureSequence::from_rows(&vec![vec![1.5f32; 40]; 12], 10).unwrap();
        for c in stack_and_oversample(&fs).unwrap() {
            for t in 0..c.n_frames() {
                assert_eq!(c.frame(t), c.frame(0));
            }
        }
    }

    #[test]
    fn visual_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u1.vis");
        let v = VisualContext::new(vec![0.0; 100], "u1").unwrap();
        v.write(&p).unwrap();
        assert_eq!(load_visual(&p).unwrap(), v);

        let bad = dir.path().join("bad.vis");
        let mut bytes = b"E2EV".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 99 * 4));
        std::fs::write(&bad, bytes).unwrap();
        let err = load_visual(&bad).unwrap_err();
        assert!(err.to_string().contains("expected dimension 100"), "{err}");
        assert!(matches!(
            load_visual(&dir.path().join("missing.vis")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn normalizer_whitens() {
        let rows: Vec<Vec<f32>> = (0..10).map(|t| vec![t as f32, 5.0]).collect();
        let fs = FeatureSequence::from_rows(&rows, 10).unwrap();
        let norm = Normalizer::fit([&fs]).unwrap();
        let out = norm.apply(&fs).unwrap();
        let mean0: f32 = (0..10).map(|t| out.frame(t)[0]).sum::<f32>() / 10.0;
        assert!(mean0.abs() < 1e-6);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
}
