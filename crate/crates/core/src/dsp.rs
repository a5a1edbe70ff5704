//! Deterministic signal processing for vibration recordings.
//!
//! Everything here is a pure function of its inputs. Spectrogram grids are
//! stored frequency-major: `magnitudes[f * n_time + t]`.

use std::f64::consts::PI;
use std::io::{Cursor, Read, Seek};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid band edges: low={low} high={high} (nyquist {nyquist})")]
    InvalidBand { low: f64, high: f64, nyquist: f64 },
    #[error("filter order must be at least 1")]
    InvalidOrder,
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("waveform contains non-finite samples")]
    NonFinite,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("waveform of {len} samples is shorter than one frame ({frame_length})")]
    TooShort { len: usize, frame_length: usize },
    #[error("invalid stft config: frame_length={frame_length} hop_length={hop_length}")]
    InvalidStftConfig { frame_length: usize, hop_length: usize },
    #[error("inconsistent frame shapes: {0}")]
    FrameShape(String),
    #[error("spectrogram has negative magnitudes")]
    NegativeMagnitude,
    #[error("spectrogram is empty")]
    EmptySpectrogram,
    #[error("spectrogram of {n_freq}x{n_time} is smaller than the {win_f}x{win_t} window")]
    WindowTooLarge { n_freq: usize, n_time: usize, win_f: usize, win_t: usize },
    #[error("degenerate normalization stats: min={min} max={max}")]
    DegenerateStats { min: f64, max: f64 },
    #[error("spectrogram is not normalized")]
    NotNormalized,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("normalization flag mismatch")]
    NormalizationMismatch,
    #[error("iterations must be at least 1")]
    InvalidIterations,
    #[error("unsupported sample rate {0} Hz (only {DEFAULT_SAMPLE_RATE} Hz is accepted)")]
    UnsupportedSampleRate(u32),
    #[error("unsupported wav format: {0}")]
    UnsupportedWav(String),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop_length: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::with_frame_length(2048)
    }
}

impl StftConfig {
    /// Hop is a tenth of the frame, rounded down.
    pub fn with_frame_length(frame_length: usize) -> Self {
        Self { frame_length, hop_length: frame_length / 10 }
    }

    pub fn n_freq(&self) -> usize {
        self.frame_length / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            (len - self.frame_length) / self.hop_length + 1
        }
    }

    /// Signal length spanned by `n_time` frames.
    pub fn signal_len(&self, n_time: usize) -> usize {
        if n_time == 0 {
            0
        } else {
            (n_time - 1) * self.hop_length + self.frame_length
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.hop_length == 0 || self.hop_length > self.frame_length {
            return Err(DspError::InvalidStftConfig {
                frame_length: self.frame_length,
                hop_length: self.hop_length,
            });
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    n_freq: usize,
    n_time: usize,
    magnitudes: Vec<f64>,
    pub freq_resolution: f64,
    pub time_resolution: f64,
    normalized: bool,
}

impl Spectrogram {
    /// Builds a magnitude grid; values must be nonnegative unless `normalized`,
    /// in which case they must lie in [-1, 1].
    pub fn new(
        n_freq: usize,
        n_time: usize,
        magnitudes: Vec<f64>,
        freq_resolution: f64,
        time_resolution: f64,
        normalized: bool,
    ) -> Result<Self> {
        if magnitudes.len() != n_freq * n_time {
            return Err(DspError::FrameShape(format!(
                "{} values for a {n_freq}x{n_time} grid",
                magnitudes.len()
            )));
        }
        if magnitudes.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite);
        }
        if normalized {
            if magnitudes.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(DspError::NotNormalized);
            }
        } else if magnitudes.iter().any(|&v| v < 0.0) {
            return Err(DspError::NegativeMagnitude);
        }
        Ok(Self { n_freq, n_time, magnitudes, freq_resolution, time_resolution, normalized })
    }

    /// Grid with the default 44.1 kHz / 2048 / 204 resolutions.
    pub fn from_grid(n_freq: usize, n_time: usize, magnitudes: Vec<f64>, normalized: bool) -> Result<Self> {
        let cfg = StftConfig::default();
        Self::new(
            n_freq,
            n_time,
            magnitudes,
            DEFAULT_SAMPLE_RATE as f64 / cfg.frame_length as f64,
            cfg.hop_length as f64 / DEFAULT_SAMPLE_RATE as f64,
            normalized,
        )
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_freq, self.n_time)
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn into_magnitudes(self) -> Vec<f64> {
        self.magnitudes
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.magnitudes[f * self.n_time + t]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.magnitudes.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Keeps frequency rows `0..n_bins` and time columns `t0..t0+len`.
    pub fn crop(&self, n_bins: usize, t0: usize, len: usize) -> Spectrogram {
        let mut out = Vec::with_capacity(n_bins * len);
        for f in 0..n_bins {
            let row = f * self.n_time + t0;
            out.extend_from_slice(&self.magnitudes[row..row + len]);
        }
        Spectrogram {
            n_freq: n_bins,
            n_time: len,
            magnitudes: out,
            freq_resolution: self.freq_resolution,
            time_resolution: self.time_resolution,
            normalized: self.normalized,
        }
    }

    /// Zero-fills missing high-frequency rows so the grid spans `n_freq` bins.
    pub fn pad_bins(&self, n_freq: usize) -> Spectrogram {
        let mut out = self.magnitudes.clone();
        if n_freq > self.n_freq {
            out.resize(n_freq * self.n_time, 0.0);
        }
        Spectrogram {
            n_freq: n_freq.max(self.n_freq),
            magnitudes: out,
            ..self.clone()
        }
    }
}

/// Complex STFT frames, `frames[t][k]` for one-sided bins `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrames {
    pub frames: Vec<Vec<Complex64>>,
    pub signal_len: usize,
    pub sample_rate: u32,
}

#[derive(Debug, Clone)]
pub struct StftOutput {
    pub spectrogram: Spectrogram,
    pub frames: ComplexFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min_value: f64,
    pub max_value: f64,
}

impl NormStats {
    pub fn new(min_value: f64, max_value: f64) -> Result<Self> {
        let s = Self { min_value, max_value };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_value < self.max_value) || !self.min_value.is_finite() || !self.max_value.is_finite() {
            return Err(DspError::DegenerateStats { min: self.min_value, max: self.max_value });
        }
        Ok(())
    }

    /// Running min/max over a set of grids.
    pub fn from_values<'a>(grids: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for g in grids {
            for &v in g {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Self::new(lo, hi)
    }
}

// ---------------------------------------------------------------------------
// Butterworth bandpass

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 3],
}

impl Biquad {
    fn response(&self, zinv: Complex64) -> Complex64 {
        let z2 = zinv * zinv;
        (self.b[0] + zinv * self.b[1] + z2 * self.b[2]) / (self.a[0] + zinv * self.a[1] + z2 * self.a[2])
    }
}

/// Digital Butterworth bandpass realized as cascaded second-order sections
/// (analog prototype, lowpass-to-bandpass, bilinear transform).
#[derive(Debug, Clone)]
pub struct Bandpass {
    sections: Vec<Biquad>,
    sample_rate: f64,
}

impl Bandpass {
    pub fn design(low_hz: f64, high_hz: f64, order: usize, sample_rate: u32) -> Result<Self> {
        let fs = sample_rate as f64;
        let nyquist = fs / 2.0;
        if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
            return Err(DspError::InvalidBand { low: low_hz, high: high_hz, nyquist });
        }
        if order == 0 {
            return Err(DspError::InvalidOrder);
        }
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (wl, wh) = (warp(low_hz), warp(high_hz));
        let bw = wh - wl;
        let w0sq = wl * wh;

        let mut complex_poles = Vec::new();
        let mut real_poles = Vec::new();
        for k in 0..order {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let pb = p * bw;
            let root = (pb * pb - 4.0 * w0sq).sqrt();
            for s in [(pb + root) / 2.0, (pb - root) / 2.0] {
                let z = (2.0 * fs + s) / (2.0 * fs - s);
                if z.im > 1e-12 {
                    complex_poles.push(z);
                } else if z.im.abs() <= 1e-12 {
                    real_poles.push(z.re);
                }
            }
        }
        let mut sections: Vec<Biquad> = complex_poles
            .iter()
            .map(|p| Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * p.re, p.norm_sqr()] })
            .collect();
        for pair in real_poles.chunks(2) {
            let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
            sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -(r1 + r2), r1 * r2] });
        }
        debug_assert_eq!(sections.len(), order);

        let mut filt = Self { sections, sample_rate: fs };
        let center = 2.0 * (w0sq.sqrt() / (2.0 * fs)).atan() * fs / (2.0 * PI);
        let gain = 1.0 / filt.response(center).norm();
        for c in &mut filt.sections[0].b {
            *c *= gain;
        }
        Ok(filt)
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / self.sample_rate);
        self.sections.iter().map(|s| s.response(zinv)).product()
    }

    /// Causal filtering, zero initial state.
    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let mut data = input.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for x in data.iter_mut() {
                let y = s.b[0] * *x + z1;
                z1 = s.b[1] * *x - s.a[1] * y + z2;
                z2 = s.b[2] * *x - s.a[2] * y;
                *x = y;
            }
        }
        data
    }
}

pub fn apply_bandpass(w: &Waveform, low_hz: f64, high_hz: f64, order: usize) -> Result<Waveform> {
    if w.is_empty() {
        return Err(DspError::EmptyWaveform);
    }
    let filt = Bandpass::design(low_hz, high_hz, order, w.sample_rate)?;
    Ok(Waveform { samples: filt.process(&w.samples), sample_rate: w.sample_rate })
}

// ---------------------------------------------------------------------------
// STFT / ISTFT / Griffin-Lim

struct FftPair {
    forward: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inverse: std::sync::Arc<dyn rustfft::Fft<f64>>,
    window: Vec<f64>,
}

impl FftPair {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            window: hann_window(n),
        }
    }
}

fn stft_frames(samples: &[f64], cfg: &StftConfig, ffts: &FftPair) -> Vec<Vec<Complex64>> {
    let n = cfg.frame_length;
    let n_time = cfg.n_frames(samples.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    (0..n_time)
        .map(|t| {
            let start = t * cfg.hop_length;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(samples[start + i] * ffts.window[i], 0.0);
            }
            ffts.forward.process(&mut buf);
            buf[..cfg.n_freq()].to_vec()
        })
        .collect()
}

/// Least-squares overlap-add inverse of one-sided frames.
fn overlap_add(frames: &[Vec<Complex64>], signal_len: usize, cfg: &StftConfig, ffts: &FftPair) -> Vec<f64> {
    let n = cfg.frame_length;
    let half = cfg.n_freq();
    let mut out = vec![0.0; signal_len];
    let mut env = vec![0.0; signal_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (t, frame) in frames.iter().enumerate() {
        buf[..half].copy_from_slice(frame);
        for k in half..n {
            buf[k] = frame[n - k].conj();
        }
        ffts.inverse.process(&mut buf);
        let start = t * cfg.hop_length;
        for i in 0..n {
            let w = ffts.window[i];
            out[start + i] += w * buf[i].re / n as f64;
            env[start + i] += w * w;
        }
    }
    for (o, e) in out.iter_mut().zip(&env) {
        *o = if *e > 1e-12 { *o / e } else { 0.0 };
    }
    out
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<StftOutput> {
    cfg.validate()?;
    if w.len() < cfg.frame_length {
        return Err(DspError::TooShort { len: w.len(), frame_length: cfg.frame_length });
    }
    let ffts = FftPair::new(cfg.frame_length);
    let frames = stft_frames(&w.samples, cfg, &ffts);
    let spectrogram = magnitude_grid(&frames, cfg, w.sample_rate);
    Ok(StftOutput {
        spectrogram,
        frames: ComplexFrames { frames, signal_len: w.len(), sample_rate: w.sample_rate },
    })
}

fn magnitude_grid(frames: &[Vec<Complex64>], cfg: &StftConfig, sample_rate: u32) -> Spectrogram {
    let n_freq = cfg.n_freq();
    let n_time = frames.len();
    let mut mags = vec![0.0; n_freq * n_time];
    for (t, frame) in frames.iter().enumerate() {
        for (f, c) in frame.iter().enumerate() {
            mags[f * n_time + t] = c.norm();
        }
    }
    Spectrogram {
        n_freq,
        n_time,
        magnitudes: mags,
        freq_resolution: sample_rate as f64 / cfg.frame_length as f64,
        time_resolution: cfg.hop_length as f64 / sample_rate as f64,
        normalized: false,
    }
}

pub fn istft_true_phase(frames: &ComplexFrames, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    let half = cfg.n_freq();
    if let Some(bad) = frames.frames.iter().find(|f| f.len() != half) {
        return Err(DspError::FrameShape(format!("frame of {} bins, expected {half}", bad.len())));
    }
    let needed = cfg.signal_len(frames.frames.len());
    if frames.signal_len < needed {
        return Err(DspError::FrameShape(format!(
            "{} frames need {needed} samples, signal has {}",
            frames.frames.len(),
            frames.signal_len
        )));
    }
    let ffts = FftPair::new(cfg.frame_length);
    let samples = overlap_add(&frames.frames, frames.signal_len, cfg, &ffts);
    Waveform::new(samples, frames.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum InitialPhase {
    Zero,
    Random { seed: u64 },
    /// Peak-locked phase vocoder estimate from the magnitudes alone.
    #[default]
    PeakLocked,
}

#[derive(Debug, Clone)]
pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// Spectral-convergence distance after each iteration.
    pub convergence: Vec<f64>,
}

pub fn griffin_lim(s: &Spectrogram, iterations: usize, cfg: &StftConfig) -> Result<Waveform> {
    Ok(griffin_lim_traced(s, iterations, cfg, InitialPhase::default(), DEFAULT_SAMPLE_RATE)?.waveform)
}

/// Griffin-Lim phase retrieval that also reports the spectral-convergence
/// distance `|| |STFT(x_i)| - s ||_F / ||s||_F` after every iteration.
pub fn griffin_lim_traced(
    s: &Spectrogram,
    iterations: usize,
    cfg: &StftConfig,
    init: InitialPhase,
    sample_rate: u32,
) -> Result<GriffinLimResult> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(DspError::InvalidIterations);
    }
    if s.n_freq == 0 || s.n_time == 0 {
        return Err(DspError::EmptySpectrogram);
    }
    if s.normalized || s.magnitudes.iter().any(|&v| v < 0.0) {
        return Err(DspError::NegativeMagnitude);
    }
    if s.n_freq != cfg.n_freq() {
        return Err(DspError::FrameShape(format!("{} bins, expected {}", s.n_freq, cfg.n_freq())));
    }
    let n_time = s.n_time;
    let signal_len = cfg.signal_len(n_time);
    let target_norm = s.frobenius_norm();
    if target_norm == 0.0 {
        return Ok(GriffinLimResult {
            waveform: Waveform::new(vec![0.0; signal_len], sample_rate)?,
            convergence: vec![0.0; iterations],
        });
    }

    let ffts = FftPair::new(cfg.frame_length);
    let mut rng = match init {
        InitialPhase::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let peak_locked = (init == InitialPhase::PeakLocked).then(|| peak_locked_phase(s, cfg));
    let mut frames: Vec<Vec<Complex64>> = (0..n_time)
        .map(|t| {
            (0..s.n_freq)
                .map(|f| {
                    let phase = match init {
                        InitialPhase::Zero => 0.0,
                        InitialPhase::Random { .. } => rng.as_mut().map_or(0.0, |r| r.random::<f64>() * 2.0 * PI),
                        InitialPhase::PeakLocked => peak_locked.as_ref().map_or(0.0, |p| p[f * n_time + t]),
                    };
                    Complex64::from_polar(s.get(f, t), phase)
                })
                .collect()
        })
        .collect();

    let mut x = overlap_add(&frames, signal_len, cfg, &ffts);
    let mut convergence = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let est = stft_frames(&x, cfg, &ffts);
        let mut err = 0.0;
        for (t, (frame, est_frame)) in frames.iter_mut().zip(&est).enumerate() {
            for (f, (c, e)) in frame.iter_mut().zip(est_frame).enumerate() {
                let target = s.get(f, t);
                let mag = e.norm();
                err += (mag - target) * (mag - target);
                *c = if mag > 0.0 { e * (target / mag) } else { Complex64::new(target, 0.0) };
            }
        }
        // Distance of x_i; the trailing resynthesis yields x_{i+1}.
        if i > 0 {
            convergence.push(err.sqrt() / target_norm);
        }
        x = overlap_add(&frames, signal_len, cfg, &ffts);
    }
    let last = stft_frames(&x, cfg, &ffts);
    let mut err = 0.0;
    for (t, frame) in last.iter().enumerate() {
        for (f, e) in frame.iter().enumerate() {
            let d = e.norm() - s.get(f, t);
            err += d * d;
        }
    }
    convergence.push(err.sqrt() / target_norm);
    Ok(GriffinLimResult { waveform: Waveform::new(x, sample_rate)?, convergence })
}

/// Phase estimate for a magnitude grid: every local peak is treated as a
/// stationary sinusoid at its parabolically interpolated frequency, its phase
/// advances by `2*pi*q*hop/N` per frame, and bins in its region of influence
/// take the Hann main-lobe phase `pi*(q - k)` relative to it.
fn peak_locked_phase(s: &Spectrogram, cfg: &StftConfig) -> Vec<f64> {
    let (n_freq, n_time) = s.shape();
    let mut phase = vec![0.0; n_freq * n_time];
    let mut sin_phase = vec![0.0; n_freq];
    let mut prev_sin_phase = vec![0.0; n_freq];
    let advance = 2.0 * PI * cfg.hop_length as f64 / cfg.frame_length as f64;
    let log_mag = |f: usize, t: usize| (s.get(f, t) + 1e-30).ln();
    for t in 0..n_time {
        let peaks: Vec<usize> = (0..n_freq)
            .filter(|&f| {
                let m = s.get(f, t);
                m > 0.0 && (f == 0 || m > s.get(f - 1, t)) && (f + 1 == n_freq || m >= s.get(f + 1, t))
            })
            .collect();
        if peaks.is_empty() {
            continue;
        }
        // Region boundaries at the magnitude minimum between neighboring peaks.
        let mut start = 0;
        for (i, &p) in peaks.iter().enumerate() {
            let end = match peaks.get(i + 1) {
                Some(&next) => (p..=next).min_by(|&a, &b| s.get(a, t).total_cmp(&s.get(b, t))).unwrap_or(p) + 1,
                None => n_freq,
            };
            let delta = if p > 0 && p + 1 < n_freq {
                let (a, b, c) = (log_mag(p - 1, t), log_mag(p, t), log_mag(p + 1, t));
                let den = a - 2.0 * b + c;
                if den.abs() > 1e-12 {
                    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let q = p as f64 + delta;
            let base = if t == 0 { 0.0 } else { prev_sin_phase[p] + advance * q };
            for k in start..end.max(start) {
                sin_phase[k] = base;
                phase[k * n_time + t] = base + PI * (q - k as f64);
            }
            start = end;
        }
        std::mem::swap(&mut sin_phase, &mut prev_sin_phase);
    }
    phase
}

/// Spectral-convergence distance between a waveform's STFT magnitude and `s`.
pub fn spectral_convergence(w: &Waveform, s: &Spectrogram, cfg: &StftConfig) -> Result<f64> {
    let est = stft(w, cfg)?.spectrogram;
    if est.shape() != s.shape() {
        return Err(DspError::ShapeMismatch(est.shape(), s.shape()));
    }
    let norm = s.frobenius_norm();
    let err = est
        .magnitudes
        .iter()
        .zip(&s.magnitudes)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(if norm > 0.0 { err / norm } else { err })
}

// ---------------------------------------------------------------------------
// Segmentation, normalization, distance

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub win_f: usize,
    pub win_t: usize,
    pub stride_t: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { win_f: 48, win_t: 320, stride_t: 5 }
    }
}

impl SegmentConfig {
    pub fn count(&self, n_time: usize) -> usize {
        if n_time < self.win_t {
            0
        } else {
            (n_time - self.win_t) / self.stride_t + 1
        }
    }
}

pub fn segment(s: &Spectrogram, cfg: &SegmentConfig) -> Result<Vec<Spectrogram>> {
    if cfg.win_f == 0 || cfg.win_t == 0 || cfg.stride_t == 0 || s.n_freq < cfg.win_f || s.n_time < cfg.win_t {
        return Err(DspError::WindowTooLarge {
            n_freq: s.n_freq,
            n_time: s.n_time,
            win_f: cfg.win_f,
            win_t: cfg.win_t,
        });
    }
    Ok((0..cfg.count(s.n_time)).map(|i| s.crop(cfg.win_f, i * cfg.stride_t, cfg.win_t)).collect())
}

pub fn normalize(s: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    stats.validate()?;
    let span = stats.max_value - stats.min_value;
    let magnitudes = s
        .magnitudes
        .iter()
        .map(|&v| (2.0 * (v - stats.min_value) / span - 1.0).clamp(-1.0, 1.0))
        .collect();
    Ok(Spectrogram { magnitudes, normalized: true, ..s.clone() })
}

pub fn denormalize(s: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    stats.validate()?;
    if !s.normalized {
        return Err(DspError::NotNormalized);
    }
    let span = stats.max_value - stats.min_value;
    let magnitudes = s
        .magnitudes
        .iter()
        .map(|&v| ((v + 1.0) * 0.5 * span + stats.min_value).max(0.0))
        .collect();
    Ok(Spectrogram { magnitudes, normalized: false, ..s.clone() })
}

/// `||a - b||_F / max(||a||_F + ||b||_F, eps)` on raw values.
pub fn distance_values(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / (na.sqrt() + nb.sqrt()).max(f64::EPSILON)
}

pub fn spectral_distance(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DspError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.normalized != b.normalized {
        return Err(DspError::NormalizationMismatch);
    }
    Ok(distance_values(&a.magnitudes, &b.magnitudes))
}

// ---------------------------------------------------------------------------
// WAV

fn wav_from_reader<R: Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedWav(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(DspError::UnsupportedSampleRate(spec.sample_rate));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => return Err(DspError::UnsupportedWav(format!("{fmt:?} {bits}-bit"))),
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    wav_from_reader(hound::WavReader::open(path)?)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    wav_from_reader(hound::WavReader::new(Cursor::new(bytes))?)
}

fn write_samples<W: std::io::Write + Seek>(w: &Waveform, sink: W) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::new(sink, spec)?;
    for &s in &w.samples {
        writer.write_sample(s.clamp(-1.0, 1.0) as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// 32-bit float mono WAV, samples clamped to [-1, 1].
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    write_samples(w, &mut cursor)?;
    Ok(cursor.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_samples(w, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize) -> Waveform {
        let fs = DEFAULT_SAMPLE_RATE as f64;
        Waveform::new((0..len).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect(), DEFAULT_SAMPLE_RATE)
            .unwrap()
    }

    /// Closed-form Butterworth bandpass magnitude through the bilinear map.
    fn butterworth_oracle(f: f64, low: f64, high: f64, order: i32, fs: f64) -> f64 {
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (wl, wh, w) = (warp(low), warp(high), warp(f));
        let x = (w * w - wl * wh) / (w * (wh - wl));
        1.0 / (1.0 + x.powi(2 * order)).sqrt()
    }

    #[test]
    fn bandpass_matches_frequency_response_oracle() {
        let filt = Bandpass::design(20.0, 1000.0, 3, DEFAULT_SAMPLE_RATE).unwrap();
        for f in [5.0, 10.0, 20.0, 100.0, 141.4, 200.0, 500.0, 1000.0, 4000.0, 15000.0] {
            let got = filt.response(f).norm();
            let want = butterworth_oracle(f, 20.0, 1000.0, 3, 44100.0);
            assert!((got - want).abs() < 1e-9, "f={f} got={got} want={want}");
        }
    }

    #[test]
    fn bandpass_edge_attenuation_exceeds_15db() {
        for (low, high) in [(20.0, 1000.0), (50.0, 400.0), (100.0, 5000.0)] {
            for f in [0.25 * low, 4.0 * high] {
                let db = 20.0 * butterworth_oracle(f, low, high, 3, 44100.0).log10();
                assert!(db < -15.0, "{f} Hz: {db} dB");
            }
        }
    }

    #[test]
    fn bandpass_passes_200hz_and_rejects_5hz() {
        let n = 3 * 44100;
        let pass = apply_bandpass(&sine(200.0, n), 20.0, 1000.0, 3).unwrap();
        let ratio = rms(&pass.samples()[44100..]) / rms(&sine(200.0, n).samples()[44100..]);
        assert!((0.9..=1.05).contains(&ratio), "ratio {ratio}");

        let n = 4 * 44100;
        let stop = apply_bandpass(&sine(5.0, n), 20.0, 1000.0, 3).unwrap();
        let ratio = rms(&stop.samples()[2 * 44100..]) / rms(&sine(5.0, n).samples()[2 * 44100..]);
        assert!(ratio < 0.1, "ratio {ratio}");
    }

    #[test]
    fn bandpass_zero_in_zero_out_and_errors() {
        let z = Waveform::new(vec![0.0; 1000], DEFAULT_SAMPLE_RATE).unwrap();
        assert!(apply_bandpass(&z, 20.0, 1000.0, 3).unwrap().samples().iter().all(|&v| v == 0.0));
        assert!(matches!(apply_bandpass(&z, 1000.0, 20.0, 3), Err(DspError::InvalidBand { .. })));
        assert!(matches!(apply_bandpass(&z, 20.0, 30000.0, 3), Err(DspError::InvalidBand { .. })));
        assert!(matches!(apply_bandpass(&z, 20.0, 1000.0, 0), Err(DspError::InvalidOrder)));
        let e = Waveform::new(vec![], DEFAULT_SAMPLE_RATE).unwrap();
        assert!(matches!(apply_bandpass(&e, 20.0, 1000.0, 3), Err(DspError::EmptyWaveform)));
    }

    #[test]
    fn stft_frame_count_and_bin_peak() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.hop_length, 204);
        let w = sine(10.0 * 44100.0 / 2048.0, 2048 + 204 * 4);
        let out = stft(&w, &cfg).unwrap().spectrogram;
        assert_eq!(out.shape(), (1025, 5));
        for t in 0..out.n_time() {
            let argmax = (0..out.n_freq()).max_by(|&a, &b| out.get(a, t).total_cmp(&out.get(b, t))).unwrap();
            assert_eq!(argmax, 10);
        }
        let zero = stft(&Waveform::new(vec![0.0; 3000], DEFAULT_SAMPLE_RATE).unwrap(), &cfg).unwrap();
        assert!(zero.spectrogram.magnitudes().iter().all(|&v| v == 0.0));
        let short = Waveform::new(vec![0.0; 100], DEFAULT_SAMPLE_RATE).unwrap();
        assert!(matches!(stft(&short, &cfg), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn istft_locality_and_zero_frames() {
        let cfg = StftConfig::with_frame_length(64);
        let len = cfg.signal_len(10);
        let zero = vec![vec![Complex64::new(0.0, 0.0); cfg.n_freq()]; 10];
        let w = istft_true_phase(&ComplexFrames { frames: zero.clone(), signal_len: len, sample_rate: 44100 }, &cfg)
            .unwrap();
        assert!(w.samples().iter().all(|&v| v == 0.0));

        let mut frames = zero;
        frames[4] = (0..cfg.n_freq()).map(|k| Complex64::new(if k % 2 == 0 { 1.0 } else { -1.0 }, 0.0)).collect();
        let w = istft_true_phase(&ComplexFrames { frames, signal_len: len, sample_rate: 44100 }, &cfg).unwrap();
        let span = 4 * cfg.hop_length..4 * cfg.hop_length + cfg.frame_length;
        for (i, v) in w.samples().iter().enumerate() {
            if !span.contains(&i) {
                assert_eq!(*v, 0.0, "sample {i}");
            }
        }
        assert!(w.samples()[span].iter().any(|&v| v != 0.0));

        let bad = vec![vec![Complex64::new(0.0, 0.0); 3]; 2];
        assert!(istft_true_phase(&ComplexFrames { frames: bad, signal_len: len, sample_rate: 44100 }, &cfg).is_err());
    }

    #[test]
    fn griffin_lim_zero_and_errors() {
        let cfg = StftConfig::with_frame_length(64);
        let z = Spectrogram::from_grid(cfg.n_freq(), 6, vec![0.0; cfg.n_freq() * 6], false).unwrap();
        let w = griffin_lim(&z, 5, &cfg).unwrap();
        assert_eq!(w.len(), cfg.signal_len(6));
        assert!(w.samples().iter().all(|&v| v == 0.0));
        assert!(matches!(griffin_lim(&z, 0, &cfg), Err(DspError::InvalidIterations)));
        let empty = Spectrogram::from_grid(cfg.n_freq(), 0, vec![], false).unwrap();
        assert!(matches!(griffin_lim(&empty, 3, &cfg), Err(DspError::EmptySpectrogram)));
        let normed = Spectrogram::from_grid(cfg.n_freq(), 2, vec![-0.5; cfg.n_freq() * 2], true).unwrap();
        assert!(matches!(griffin_lim(&normed, 3, &cfg), Err(DspError::NegativeMagnitude)));
        assert!(Spectrogram::from_grid(1, 1, vec![-1.0], false).is_err());
    }

    #[test]
    fn segment_counts_and_offsets() {
        let grid = |f: usize, t: usize| {
            Spectrogram::from_grid(f, t, (0..f * t).map(|i| (i % t) as f64).collect(), false).unwrap()
        };
        assert_eq!(segment(&grid(48, 320), &SegmentConfig::default()).unwrap().len(), 1);
        let segs = segment(&grid(60, 330), &SegmentConfig::default()).unwrap();
        assert_eq!(segs.len(), 3);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.shape(), (48, 320));
            assert_eq!(s.get(0, 0), (5 * i) as f64);
        }
        assert!(matches!(
            segment(&grid(47, 400), &SegmentConfig::default()),
            Err(DspError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn normalization_endpoints_and_clamp() {
        let stats = NormStats::new(2.0, 6.0).unwrap();
        let s = Spectrogram::from_grid(1, 4, vec![2.0, 6.0, 4.0, 9.0], false).unwrap();
        let n = normalize(&s, &stats).unwrap();
        assert_eq!(n.magnitudes(), &[-1.0, 1.0, 0.0, 1.0]);
        assert!(n.is_normalized());
        assert!(matches!(NormStats::new(1.0, 1.0), Err(DspError::DegenerateStats { .. })));
        assert!(matches!(denormalize(&s, &stats), Err(DspError::NotNormalized)));
    }

    #[test]
    fn distance_properties() {
        let a = Spectrogram::from_grid(2, 2, vec![0.5, -0.2, 0.1, 0.9], true).unwrap();
        let neg = Spectrogram::from_grid(2, 2, a.magnitudes().iter().map(|v| -v).collect(), true).unwrap();
        let b = Spectrogram::from_grid(2, 2, vec![0.1, 0.3, -0.7, 0.0], true).unwrap();
        assert_eq!(spectral_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(spectral_distance(&a, &b).unwrap(), spectral_distance(&b, &a).unwrap());
        assert!((spectral_distance(&a, &neg).unwrap() - 1.0).abs() < 1e-15);
        let c = Spectrogram::from_grid(1, 4, vec![0.0; 4], true).unwrap();
        assert!(matches!(spectral_distance(&a, &c), Err(DspError::ShapeMismatch(..))));
    }

    #[test]
    fn wav_round_trip_and_rate_rejection() {
        let w = sine(300.0, 4410);
        let bytes = encode_wav(&w).unwrap();
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.sample_rate(), 44100);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cur = Cursor::new(Vec::new());
        let mut wr = hound::WavWriter::new(&mut cur, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(decode_wav(&cur.into_inner()), Err(DspError::UnsupportedSampleRate(22050))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn normalize_round_trip(vals in proptest::collection::vec(0.0f64..10.0, 12)) {
                let stats = NormStats::new(0.0, 10.0).unwrap();
                let s = Spectrogram::from_grid(3, 4, vals.clone(), false).unwrap();
                let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
                for (a, b) in vals.iter().zip(back.magnitudes()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn segment_count_formula(f in 4usize..20, t in 10usize..200, wt in 1usize..10, stride in 1usize..7) {
                let s = Spectrogram::from_grid(f, t, vec![0.0; f * t], false).unwrap();
                let cfg = SegmentConfig { win_f: 4, win_t: wt, stride_t: stride };
                let segs = segment(&s, &cfg).unwrap();
                prop_assert_eq!(segs.len(), (t - wt) / stride + 1);
            }
        }
    }
}
