//! Training corpora: labeled audio ingestion, procedural texture synthesis,
//! and the spectrogram segment pipeline.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::dsp::{self, DspError, NormStats, SegmentConfig, Spectrogram, StftConfig, Waveform, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no classes found under {0}")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no wav files")]
    EmptyClass(PathBuf),
    #[error("invalid texture spec {name}: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("duration {0} s is below the 2 s minimum")]
    TooShort(f64),
    #[error("dataset needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {0} produced no segments")]
    ClassWithoutSegments(usize),
    #[error("{waveforms} waveforms but {labels} labels")]
    LabelCount { waveforms: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone)]
pub struct LabeledWaveform {
    pub path: PathBuf,
    pub label: usize,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledWaveform>,
    /// Files that could not be used, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| CorpusError::Io { path: dir.to_path_buf(), source };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        out.push(entry.map_err(io)?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads `root/<class_name>/*.wav`; class index is the lexicographic rank of
/// the directory name. Per-file failures are reported, not fatal.
pub fn ingest_audio(root: impl AsRef<Path>) -> Result<IngestReport> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(CorpusError::NoClasses(root.to_path_buf()));
    }
    let mut report = IngestReport::default();
    for (label, dir) in class_dirs.iter().enumerate() {
        report.class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let wavs: Vec<PathBuf> = read_dir_sorted(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        if wavs.is_empty() {
            return Err(CorpusError::EmptyClass(dir.clone()));
        }
        for path in wavs {
            match dsp::read_wav(&path) {
                Ok(waveform) => report.items.push(LabeledWaveform { path, label, waveform }),
                Err(e) => report.rejected.push((path, e.to_string())),
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Procedural textures

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureClassSpec {
    pub name: String,
    pub bands: Vec<Band>,
    /// Pulses per second; 0 disables the pulse train.
    pub pulse_rate: f64,
    pub pulse_strength: f64,
    pub amplitude: f64,
}

impl TextureClassSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| CorpusError::InvalidSpec { name: self.name.clone(), reason: reason.into() };
        if self.bands.is_empty() {
            return Err(bad("no bands"));
        }
        if self.bands.iter().any(|b| !(b.gain >= 0.0) || !(b.bandwidth_hz > 0.0) || !(b.center_hz >= 0.0)) {
            return Err(bad("band with negative gain or non-positive width"));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(bad("amplitude outside (0, 1]"));
        }
        if !(self.pulse_rate >= 0.0) || !(self.pulse_strength >= 0.0) {
            return Err(bad("negative pulse parameters"));
        }
        Ok(())
    }
}

fn band(center_hz: f64, bandwidth_hz: f64, gain: f64) -> Band {
    Band { center_hz, bandwidth_hz, gain }
}

fn texture(name: &str, bands: Vec<Band>, pulse_rate: f64, pulse_strength: f64, amplitude: f64) -> TextureClassSpec {
    TextureClassSpec { name: name.into(), bands, pulse_rate, pulse_strength, amplitude }
}

/// Five training archetypes. All energy sits below ~520 Hz so that the
/// 24-bin toy segments see it.
pub fn toy_profile() -> Vec<TextureClassSpec> {
    vec![
        texture("g2-strong-mid", vec![band(170.0, 90.0, 1.0)], 0.0, 0.0, 0.9),
        texture("g3-subtle-high", vec![band(430.0, 70.0, 1.0)], 0.0, 0.0, 0.3),
        texture("g4-strong-high", vec![band(400.0, 120.0, 1.0), band(220.0, 60.0, 0.3)], 0.0, 0.0, 0.95),
        texture("g6-low-pulse", vec![band(60.0, 50.0, 1.0)], 6.0, 3.0, 0.95),
        texture("g8-multiband", vec![band(90.0, 40.0, 0.8), band(260.0, 60.0, 1.0), band(420.0, 50.0, 0.6)], 3.0, 0.8, 0.8),
    ]
}

/// Archetypes outside the training classes, used as optimization targets.
pub fn toy_targets() -> Vec<TextureClassSpec> {
    vec![
        texture("t-mid-subtle", vec![band(300.0, 90.0, 1.0)], 0.0, 0.0, 0.45),
        texture("t-low-smooth", vec![band(120.0, 70.0, 1.0)], 0.0, 0.0, 0.7),
        texture("t-dual-pulse", vec![band(150.0, 60.0, 1.0), band(380.0, 60.0, 0.7)], 4.0, 1.5, 0.85),
        texture("t-broad", vec![band(250.0, 260.0, 1.0)], 0.0, 0.0, 0.6),
        texture("t-high-pulse", vec![band(450.0, 80.0, 1.0)], 5.0, 1.0, 0.7),
    ]
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Band-shaped Gaussian noise modulated by a jittered decaying pulse
/// envelope, peak-normalized to `spec.amplitude`. Deterministic in
/// `(spec, seed)`.
pub fn synth_texture(spec: &TextureClassSpec, seed: u64, duration_s: f64) -> Result<Waveform> {
    spec.validate()?;
    if !(duration_s >= 2.0) {
        return Err(CorpusError::TooShort(duration_s));
    }
    let fs = DEFAULT_SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));

    let mut noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

    // The envelope modulates the excitation before band shaping so the
    // output stays band-limited.
    if spec.pulse_rate > 0.0 && spec.pulse_strength > 0.0 {
        let period = 1.0 / spec.pulse_rate;
        let tau = (0.25 * period).min(0.02);
        let mut onsets = Vec::new();
        let mut t = rng.random_range(0.0..period);
        while t < duration_s {
            onsets.push(t);
            t += period * (1.0 + rng.random_range(-0.05..0.05));
        }
        let mut next = 0;
        let mut env_tail = 0.0;
        let decay = (-1.0 / (tau * fs)).exp();
        for (i, s) in noise.iter_mut().enumerate() {
            env_tail *= decay;
            while next < onsets.len() && onsets[next] * fs <= i as f64 {
                env_tail += 1.0;
                next += 1;
            }
            *s *= 1.0 + spec.pulse_strength * env_tail;
        }
    }

    let mut buf: Vec<Complex64> = noise.into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        let gain: f64 = spec
            .bands
            .iter()
            .map(|b| {
                let sigma = b.bandwidth_hz / 2.0;
                b.gain * (-0.5 * ((f - b.center_hz) / sigma).powi(2)).exp()
            })
            .sum();
        *c *= gain;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut samples: Vec<f64> = buf.iter().map(|c| c.re / n as f64).collect();

    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = spec.amplitude / peak;
        samples.iter_mut().for_each(|s| *s *= scale);
    }
    Ok(Waveform::new(samples, DEFAULT_SAMPLE_RATE)?)
}

// ---------------------------------------------------------------------------
// Dataset pipeline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub bandpass_low_hz: f64,
    pub bandpass_high_hz: f64,
    pub bandpass_order: usize,
    pub stft: StftConfig,
    /// Frequency rows kept after the STFT (48 bins ~ 0-1000 Hz).
    pub keep_bins: usize,
    pub segment: SegmentConfig,
}

impl DatasetConfig {
    /// 48 x 320 segments, stride 5.
    pub fn full() -> Self {
        Self {
            bandpass_low_hz: 20.0,
            bandpass_high_hz: 1000.0,
            bandpass_order: 3,
            stft: StftConfig::default(),
            keep_bins: 48,
            segment: SegmentConfig::default(),
        }
    }

    /// 24 x 64 segments, stride 5.
    pub fn toy() -> Self {
        Self { segment: SegmentConfig { win_f: 24, win_t: 64, stride_t: 5 }, ..Self::full() }
    }

    pub fn hash(&self) -> String {
        container::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Filtered, bin-truncated magnitude spectrogram of one recording.
    pub fn spectrogram(&self, w: &Waveform) -> Result<Spectrogram> {
        let filtered = dsp::apply_bandpass(w, self.bandpass_low_hz, self.bandpass_high_hz, self.bandpass_order)?;
        let full = dsp::stft(&filtered, &self.stft)?.spectrogram;
        let bins = self.keep_bins.min(full.n_freq());
        Ok(full.crop(bins, 0, full.n_time()))
    }

    /// Raw (unnormalized) segments of one recording.
    pub fn raw_segments(&self, w: &Waveform) -> Result<Vec<Spectrogram>> {
        Ok(dsp::segment(&self.spectrogram(w)?, &self.segment)?)
    }

    /// First normalized segment of a recording, as used for optimization targets.
    pub fn target_segment(&self, w: &Waveform, stats: &NormStats) -> Result<Spectrogram> {
        let first = self.raw_segments(w)?.into_iter().next().expect("segment() yields at least one");
        Ok(dsp::normalize(&first, stats)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub segments: Vec<Spectrogram>,
    pub labels: Vec<usize>,
    /// Index of the source waveform of every segment.
    pub sources: Vec<usize>,
    pub class_names: Vec<String>,
    pub norm_stats: NormStats,
    pub config: DatasetConfig,
}

pub fn build_dataset(
    waveforms: &[Waveform],
    labels: &[usize],
    class_names: &[String],
    config: &DatasetConfig,
) -> Result<LabeledDataset> {
    if waveforms.len() != labels.len() {
        return Err(CorpusError::LabelCount { waveforms: waveforms.len(), labels: labels.len() });
    }
    let k = class_names.len();
    if k < 2 {
        return Err(CorpusError::TooFewClasses(k));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(CorpusError::LabelRange { label, classes: k });
    }
    let mut raw = Vec::new();
    let mut seg_labels = Vec::new();
    let mut sources = Vec::new();
    for (i, (w, &label)) in waveforms.iter().zip(labels).enumerate() {
        for s in config.raw_segments(w)? {
            raw.push(s);
            seg_labels.push(label);
            sources.push(i);
        }
    }
    if let Some(empty) = (0..k).find(|c| !seg_labels.contains(c)) {
        return Err(CorpusError::ClassWithoutSegments(empty));
    }
    let norm_stats = NormStats::from_values(raw.iter().map(|s| s.magnitudes()))?;
    let segments = raw.iter().map(|s| dsp::normalize(s, &norm_stats)).collect::<std::result::Result<_, _>>()?;
    Ok(LabeledDataset {
        segments,
        labels: seg_labels,
        sources,
        class_names: class_names.to_vec(),
        norm_stats,
        config: *config,
    })
}

/// Synthesizes `per_class` recordings of each spec and runs the pipeline.
pub fn synth_dataset(
    specs: &[TextureClassSpec],
    per_class: usize,
    duration_s: f64,
    seed: u64,
    config: &DatasetConfig,
) -> Result<LabeledDataset> {
    let mut waves = Vec::new();
    let mut labels = Vec::new();
    for (label, spec) in specs.iter().enumerate() {
        for j in 0..per_class {
            waves.push(synth_texture(spec, seed.wrapping_add(j as u64), duration_s)?);
            labels.push(label);
        }
    }
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    build_dataset(&waves, &labels, &names, config)
}

const DATASET_MAGIC: &[u8; 8] = b"TACTDSET";
const DATASET_VERSION: u32 = 1;

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn segment_shape(&self) -> (usize, usize) {
        self.segments.first().map_or((0, 0), |s| s.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Seeded stratified split; returns (train, validation) index lists.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..self.n_classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let n_train = ((idx.len() as f64) * train_fraction).round() as usize;
            let n_train = n_train.clamp(1.min(idx.len()), idx.len().saturating_sub(1).max(1));
            train.extend_from_slice(&idx[..n_train.min(idx.len())]);
            val.extend_from_slice(&idx[n_train.min(idx.len())..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (f, t) = self.segment_shape();
        let mut w = container::Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.str(&self.config.hash());
        w.f64(self.norm_stats.min_value).f64(self.norm_stats.max_value);
        w.u64(self.class_names.len() as u64);
        for name in &self.class_names {
            w.str(name);
        }
        w.u64(f as u64).u64(t as u64);
        w.usizes(&self.labels).usizes(&self.sources);
        let (fr, tr) = self.segments.first().map_or((0.0, 0.0), |s| (s.freq_resolution, s.time_resolution));
        w.f64(fr).f64(tr);
        for s in &self.segments {
            w.f64s(s.magnitudes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = container::Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let invalid = |e: String| CorpusError::Container(ContainerError::Invalid(e));
        let config: DatasetConfig = serde_json::from_str(&r.str()?).map_err(|e| invalid(e.to_string()))?;
        let hash = r.str()?;
        if hash != config.hash() {
            return Err(invalid("config hash mismatch".into()));
        }
        let norm_stats = NormStats::new(r.f64()?, r.f64()?)?;
        let k = r.u64()? as usize;
        let class_names = (0..k).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
        let (f, t) = (r.u64()? as usize, r.u64()? as usize);
        let labels = r.usizes()?;
        let sources = r.usizes()?;
        let (fr, tr) = (r.f64()?, r.f64()?);
        let segments = (0..labels.len())
            .map(|_| Ok(Spectrogram::new(f, t, r.f64s()?, fr, tr, true)?))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { segments, labels, sources, class_names, norm_stats, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CorpusError::Io { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the serialized dataset.
    pub fn content_hash(&self) -> String {
        container::sha256_hex(&self.to_bytes())
    }
}

/// Magnitude-weighted mean frequency of a waveform's spectrum.
pub fn spectral_centroid(w: &Waveform, cfg: &StftConfig) -> Result<f64> {
    let s = dsp::stft(w, cfg)?.spectrogram;
    let mut num = 0.0;
    let mut den = 0.0;
    for f in 0..s.n_freq() {
        let freq = f as f64 * s.freq_resolution;
        for t in 0..s.n_time() {
            num += freq * s.get(f, t);
            den += s.get(f, t);
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_validated() {
        let spec = &toy_profile()[0];
        let a = synth_texture(spec, 4, 2.0).unwrap();
        let b = synth_texture(spec, 4, 2.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_texture(spec, 5, 2.0).unwrap());
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - spec.amplitude).abs() < 1e-12);
        assert!(matches!(synth_texture(spec, 0, 1.5), Err(CorpusError::TooShort(_))));
        let mut bad = spec.clone();
        bad.bands.clear();
        assert!(matches!(synth_texture(&bad, 0, 2.0), Err(CorpusError::InvalidSpec { .. })));
        bad = spec.clone();
        bad.amplitude = 1.5;
        assert!(synth_texture(&bad, 0, 2.0).is_err());
    }

    #[test]
    fn high_band_has_higher_centroid() {
        let high = texture("high-subtle", vec![band(700.0, 100.0, 1.0)], 0.0, 0.0, 0.3);
        let low = texture("low-pulse", vec![band(80.0, 50.0, 1.0)], 8.0, 2.0, 0.9);
        let cfg = StftConfig::default();
        let ch = spectral_centroid(&synth_texture(&high, 1, 2.0).unwrap(), &cfg).unwrap();
        let cl = spectral_centroid(&synth_texture(&low, 1, 2.0).unwrap(), &cfg).unwrap();
        assert!(ch > cl, "{ch} vs {cl}");
    }

    #[test]
    fn pulse_envelope_autocorrelation_peaks_at_period() {
        let spec = texture("pulse8", vec![band(200.0, 80.0, 1.0)], 8.0, 4.0, 0.9);
        let w = synth_texture(&spec, 3, 2.0).unwrap();
        // Envelope: rectified signal averaged over 5 ms blocks.
        let block = 220;
        let env: Vec<f64> = w.samples().chunks(block).map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / c.len() as f64).collect();
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        let centered: Vec<f64> = env.iter().map(|v| v - mean).collect();
        let dt = block as f64 / 44100.0;
        let ac = |lag: usize| centered.iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>();
        let lags = (0.08 / dt) as usize..=(0.2 / dt) as usize;
        let best = lags.max_by(|&a, &b| ac(a).total_cmp(&ac(b))).unwrap();
        let lag_s = best as f64 * dt;
        assert!((lag_s - 0.125).abs() < 0.012, "peak at {lag_s} s");
    }

    #[test]
    fn dataset_counts_labels_and_range() {
        let cfg = DatasetConfig::toy();
        let specs = &toy_profile()[..2];
        let ds = synth_dataset(specs, 1, 5.0, 9, &cfg).unwrap();
        let n_time = cfg.stft.n_frames((5.0 * 44100.0) as usize);
        let per = (n_time - 64) / 5 + 1;
        assert_eq!(ds.len(), 2 * per);
        assert_eq!(ds.class_counts(), vec![per, per]);
        for (label, src) in ds.labels.iter().zip(&ds.sources) {
            assert_eq!(label, src);
        }
        assert!(ds.segments.iter().all(|s| s.is_normalized() && s.magnitudes().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(ds.segment_shape(), (24, 64));
    }

    #[test]
    fn dataset_errors() {
        let cfg = DatasetConfig::toy();
        let silent = Waveform::new(vec![0.0; 3 * 44100], 44100).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let err = build_dataset(&[silent.clone(), silent.clone()], &[0, 1], &names, &cfg).unwrap_err();
        assert!(matches!(err, CorpusError::Dsp(DspError::DegenerateStats { .. })), "{err}");
        let one = synth_texture(&toy_profile()[0], 0, 3.0).unwrap();
        assert!(matches!(
            build_dataset(&[one.clone(), one.clone()], &[0, 0], &names, &cfg),
            Err(CorpusError::ClassWithoutSegments(1))
        ));
        assert!(matches!(build_dataset(&[one.clone()], &[0], &names[..1], &cfg), Err(CorpusError::TooFewClasses(1))));
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let ds = synth_dataset(&toy_profile()[..2], 1, 3.0, 1, &DatasetConfig::toy()).unwrap();
        let (tr, va) = ds.split(0.9, 7);
        assert_eq!(tr.len() + va.len(), ds.len());
        assert_eq!(ds.split(0.9, 7), (tr.clone(), va.clone()));
        for c in 0..2 {
            let n = ds.class_counts()[c];
            let nv = va.iter().filter(|&&i| ds.labels[i] == c).count();
            assert_eq!(nv, n - ((n as f64) * 0.9).round() as usize);
        }
    }

    #[test]
    fn dataset_container_round_trip() {
        let ds = synth_dataset(&toy_profile()[..2], 1, 2.5, 2, &DatasetConfig::toy()).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(LabeledDataset::from_bytes(&bytes).unwrap(), ds);
        assert!(LabeledDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
