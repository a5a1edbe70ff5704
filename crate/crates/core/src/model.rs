//! Conditional adversarial autoencoder over spectrogram segments.
//!
//! Nine small networks share one parameter-free orchestration layer:
//! encoder E, generator G (latent head, label plane, conv body), spectrogram
//! discriminator D_s (label plane, conv body) and the latent head (shared
//! trunk with a prior-discriminator output D_z and a classifier output C).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::corpus::{DatasetConfig, LabeledDataset};
use crate::dsp::{self, DspError, NormStats, Spectrogram, Waveform};
use crate::nnet::{
    loss_bce, loss_cross_entropy, loss_mse, loss_total_variation, smoothed_target, Activation,
    AdamState, Cache, LayerSpec, Network, NnetError, Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("latent dimension mismatch: expected {expected}, found {found}")]
    LatentDim { expected: usize, found: usize },
    #[error("segment shape mismatch: expected {expected:?}, got {got:?}")]
    SegmentShape { expected: (usize, usize), got: (usize, usize) },
    #[error("input spectrogram is not normalized")]
    NotNormalized,
    #[error("non-finite {term} loss at batch {batch}")]
    NonFinite { batch: usize, term: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint parameter table mismatch: {0}")]
    ParamTable(String),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ModelError>;

const SLOPE: f64 = 0.2;
const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub n_classes: usize,
    pub seg_freq: usize,
    pub seg_time: usize,
    /// Channels of the first encoder conv; later convs use twice this.
    pub enc_channels: usize,
    pub enc_hidden: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub latent_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 24 x 64 segments, latent 16.
    pub fn toy(n_classes: usize) -> Self {
        Self {
            latent_dim: 16,
            n_classes,
            seg_freq: 24,
            seg_time: 64,
            enc_channels: 8,
            enc_hidden: 64,
            gen_channels: 8,
            disc_channels: 8,
            latent_hidden: 32,
            seed: 0,
        }
    }

    /// 6 x 8 segments, latent 4, two classes; used for gradient checks.
    pub fn micro() -> Self {
        Self {
            latent_dim: 4,
            n_classes: 2,
            seg_freq: 6,
            seg_time: 8,
            enc_channels: 2,
            enc_hidden: 6,
            gen_channels: 2,
            disc_channels: 2,
            latent_hidden: 5,
            seed: 0,
        }
    }

    /// 48 x 320 segments, latent 128.
    pub fn full(n_classes: usize) -> Self {
        Self {
            latent_dim: 128,
            n_classes,
            seg_freq: 48,
            seg_time: 320,
            enc_channels: 16,
            enc_hidden: 256,
            gen_channels: 32,
            disc_channels: 16,
            latent_hidden: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        if self.seg_freq < 2 || self.seg_time < 2 {
            return bad("segment must be at least 2x2");
        }
        if [self.enc_channels, self.enc_hidden, self.gen_channels, self.disc_channels, self.latent_hidden].contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    fn gen_grid(&self) -> (usize, usize) {
        (self.seg_freq.div_ceil(4), self.seg_time.div_ceil(4))
    }
}

/// Identifies one of the component networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetId {
    Encoder,
    GenHead,
    GenLabel,
    GenBody,
    DiscLabel,
    DiscBody,
    LatentTrunk,
    LatentDisc,
    LatentCls,
}

impl NetId {
    pub const ALL: [NetId; 9] = [
        NetId::Encoder,
        NetId::GenHead,
        NetId::GenLabel,
        NetId::GenBody,
        NetId::DiscLabel,
        NetId::DiscBody,
        NetId::LatentTrunk,
        NetId::LatentDisc,
        NetId::LatentCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetId::Encoder => "encoder",
            NetId::GenHead => "gen_head",
            NetId::GenLabel => "gen_label",
            NetId::GenBody => "gen_body",
            NetId::DiscLabel => "disc_label",
            NetId::DiscBody => "disc_body",
            NetId::LatentTrunk => "latent_trunk",
            NetId::LatentDisc => "latent_disc",
            NetId::LatentCls => "latent_cls",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One gradient buffer per network, indexed by [`NetId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn get(&self, id: NetId) -> &[f64] {
        &self.0[id.index()]
    }

    fn get_mut(&mut self, id: NetId) -> &mut [f64] {
        &mut self.0[id.index()]
    }

    fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub total_variation: f64,
    pub spec_adversarial: f64,
    pub latent_adversarial: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reconstruction: 100.0, total_variation: 10.0, spec_adversarial: 1.0, latent_adversarial: 1.0, classification: 1.0 }
    }
}

/// Terms of the joint encoder/generator/classifier objective, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointTerms {
    pub mse: f64,
    pub tv: f64,
    pub spec_adversarial: f64,
    pub latent_adversarial: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOrder {
    /// D_s, then D_z, then E/G/C.
    #[default]
    DiscriminatorsFirst,
    /// E/G/C first, then D_s and D_z on the pre-update reconstructions.
    GeneratorFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_ds: f64,
    pub lr_e: f64,
    pub lr_c: f64,
    pub lr_dz: f64,
    /// Per-epoch multiplier on the C and D_z learning rates.
    pub lr_decay: f64,
    pub epochs: usize,
    pub soft_scale: f64,
    pub update_order: UpdateOrder,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_size: 128,
            lr_g: 2e-4,
            lr_ds: 2e-4,
            lr_e: 1e-3,
            lr_c: 1e-3,
            lr_dz: 1e-3,
            lr_decay: 0.95,
            epochs: 50,
            soft_scale: 0.3,
            update_order: UpdateOrder::DiscriminatorsFirst,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the 24 x 64 synthetic profile. Min-max normalized
    /// synthetic segments have little contrast, and at weight 10 the
    /// sign-valued TV gradient flattens the generator output.
    pub fn toy() -> Self {
        Self {
            weights: LossWeights { total_variation: 1.0, ..LossWeights::default() },
            batch_size: 16,
            epochs: 20,
            lr_g: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let weights = [w.reconstruction, w.total_variation, w.spec_adversarial, w.latent_adversarial, w.classification];
        if weights.iter().any(|v| !(*v >= 0.0)) {
            return Err(ModelError::Config("loss weights must be >= 0".into()));
        }
        if [self.lr_g, self.lr_ds, self.lr_e, self.lr_c, self.lr_dz].iter().any(|v| !(*v > 0.0)) {
            return Err(ModelError::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.soft_scale) {
            return Err(ModelError::Config("soft_scale must lie in [0, 0.5)".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(ModelError::Config("lr_decay must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub batches: usize,
    pub disc_spec: f64,
    pub disc_latent: f64,
    pub mse: f64,
    pub tv: f64,
    pub spec_adversarial: f64,
    pub latent_adversarial: f64,
    pub cross_entropy: f64,
    pub total: f64,
    pub lr_c: f64,
    pub lr_dz: f64,
    pub update_order: UpdateOrder,
}

/// Held-out measurements of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub reconstruction_distance: f64,
    pub classifier_accuracy: f64,
    pub disc_real: f64,
    pub disc_fake: f64,
    pub latent_mean_norm: f64,
    pub latent_var_min: f64,
    pub latent_var_max: f64,
}

struct GenCache {
    head: Cache,
    label: Cache,
    body: Cache,
}

struct DiscCache {
    label: Cache,
    body: Cache,
}

struct EgForward {
    x: Tensor,
    label: usize,
    z: Tensor,
    enc: Cache,
    out: Tensor,
    gen: GenCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureGan {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub norm_stats: NormStats,
    pub dataset: DatasetConfig,
    nets: Vec<Network>,
}

fn conv(in_ch: usize, out_ch: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_ch, out_ch, kernel: 3, stride, pad: 1 }
}

fn leaky() -> LayerSpec {
    LayerSpec::Activation(Activation::LeakyRelu(SLOPE))
}

fn architecture(cfg: &ModelConfig) -> Result<Vec<Network>> {
    cfg.validate()?;
    let (f, t, d, k) = (cfg.seg_freq, cfg.seg_time, cfg.latent_dim, cfg.n_classes);
    let (gh, gw) = cfg.gen_grid();
    let half = |n: usize| n.div_ceil(2);
    let (ec, gc, dc) = (cfg.enc_channels, cfg.gen_channels, cfg.disc_channels);
    let gc2 = gc.div_ceil(2);

    let enc_flat = 2 * ec * half(half(half(f))) * half(half(half(t)));
    let encoder = vec![
        conv(1, ec, 2),
        leaky(),
        conv(ec, 2 * ec, 2),
        leaky(),
        conv(2 * ec, 2 * ec, 2),
        leaky(),
        LayerSpec::Reshape(vec![enc_flat]),
        LayerSpec::Dense { inputs: enc_flat, outputs: cfg.enc_hidden },
        leaky(),
        LayerSpec::Dense { inputs: cfg.enc_hidden, outputs: d },
    ];
    let gen_head = vec![
        LayerSpec::Dense { inputs: d, outputs: gc * gh * gw },
        LayerSpec::Reshape(vec![gc, gh, gw]),
        leaky(),
    ];
    let gen_label = vec![LayerSpec::Dense { inputs: k, outputs: gh * gw }, LayerSpec::Reshape(vec![1, gh, gw])];
    let block = || LayerSpec::Residual(vec![conv(gc, gc, 1), leaky(), conv(gc, gc, 1)]);
    let gen_body = vec![
        conv(gc + 1, gc, 1),
        leaky(),
        block(),
        block(),
        conv(gc, 4 * gc, 1),
        LayerSpec::PixelShuffle(2),
        leaky(),
        conv(gc, 4 * gc2, 1),
        LayerSpec::PixelShuffle(2),
        leaky(),
        conv(gc2, 1, 1),
        LayerSpec::Crop { height: f, width: t },
        LayerSpec::Activation(Activation::Tanh),
    ];
    let disc_label = vec![LayerSpec::Dense { inputs: k, outputs: f * t }, LayerSpec::Reshape(vec![1, f, t])];
    let disc_flat = 2 * dc * half(half(half(f))) * half(half(half(t)));
    let disc_body = vec![
        conv(2, dc, 2),
        leaky(),
        conv(dc, 2 * dc, 2),
        leaky(),
        conv(2 * dc, 2 * dc, 2),
        leaky(),
        conv(2 * dc, 2 * dc, 1),
        leaky(),
        LayerSpec::Reshape(vec![disc_flat]),
        LayerSpec::Dense { inputs: disc_flat, outputs: 1 },
        LayerSpec::Activation(Activation::Sigmoid),
    ];
    let h = cfg.latent_hidden;
    let trunk = vec![
        LayerSpec::Dense { inputs: d, outputs: h },
        leaky(),
        LayerSpec::Dense { inputs: h, outputs: h },
        leaky(),
    ];
    let latent_disc = vec![LayerSpec::Dense { inputs: h, outputs: 1 }, LayerSpec::Activation(Activation::Sigmoid)];
    let latent_cls = vec![LayerSpec::Dense { inputs: h, outputs: k }];

    let shapes_specs = [
        (vec![1, f, t], encoder),
        (vec![d], gen_head),
        (vec![k], gen_label),
        (vec![gc + 1, gh, gw], gen_body),
        (vec![k], disc_label),
        (vec![2, f, t], disc_body),
        (vec![d], trunk),
        (vec![h], latent_disc),
        (vec![h], latent_cls),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shapes_specs
        .into_iter()
        .map(|(shape, specs)| {
            let mut net = Network::new(shape, specs)?;
            net.init_params(&mut rng);
            Ok(net)
        })
        .collect()
}

fn one_hot(label: usize, k: usize) -> Tensor {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Tensor::vector(v)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_finite(value: f64, batch: usize, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::NonFinite { batch, term })
    }
}

impl TextureGan {
    pub fn new(config: ModelConfig, class_names: Vec<String>, norm_stats: NormStats, dataset: DatasetConfig) -> Result<Self> {
        if class_names.len() != config.n_classes {
            return Err(ModelError::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.n_classes
            )));
        }
        norm_stats.validate()?;
        Ok(Self { nets: architecture(&config)?, config, class_names, norm_stats, dataset })
    }

    /// A model shaped for `data`; segment shape and class count come from the dataset.
    pub fn for_dataset(mut config: ModelConfig, data: &LabeledDataset) -> Result<Self> {
        let (f, t) = data.segment_shape();
        config.seg_freq = f;
        config.seg_time = t;
        config.n_classes = data.n_classes();
        let mut model = Self::new(config, data.class_names.clone(), data.norm_stats, data.config)?;
        let n: usize = data.segments.iter().map(|s| s.magnitudes().len()).sum();
        if n > 0 {
            let mean = data.segments.iter().flat_map(|s| s.magnitudes()).sum::<f64>() / n as f64;
            model.set_output_bias(mean.clamp(-0.99, 0.99).atanh());
        }
        Ok(model)
    }

    /// Sets the bias of the generator's output conv, i.e. the pre-tanh level
    /// of an all-zero feature map.
    pub fn set_output_bias(&mut self, value: f64) {
        let body = self.net_mut(NetId::GenBody);
        let block = body.param_blocks().iter().rev().find(|b| b.is_bias).cloned().expect("output conv has a bias");
        body.params_mut()[block.offset..block.offset + block.len()].fill(value);
    }

    pub fn net(&self, id: NetId) -> &Network {
        &self.nets[id.index()]
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Network {
        &mut self.nets[id.index()]
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn segment_shape(&self) -> (usize, usize) {
        (self.config.seg_freq, self.config.seg_time)
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(self.nets.iter().map(Network::zero_grads).collect())
    }

    pub fn expect_latent_dim(&self, expected: usize) -> Result<()> {
        if self.config.latent_dim != expected {
            return Err(ModelError::LatentDim { expected, found: self.config.latent_dim });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(ModelError::Label { label, classes: self.config.n_classes });
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(ModelError::LatentDim { expected: self.config.latent_dim, found: z.len() });
        }
        Ok(Tensor::new(vec![z.len()], z.to_vec())?)
    }

    /// `[1, F, T]` tensor of a normalized segment.
    pub fn segment_tensor(&self, x: &Spectrogram) -> Result<Tensor> {
        if x.shape() != self.segment_shape() {
            return Err(ModelError::SegmentShape { expected: self.segment_shape(), got: x.shape() });
        }
        if !x.is_normalized() {
            return Err(ModelError::NotNormalized);
        }
        Ok(Tensor::new(vec![1, x.n_freq(), x.n_time()], x.magnitudes().to_vec())?)
    }

    fn to_spectrogram(&self, out: Tensor) -> Result<Spectrogram> {
        let stft = self.dataset.stft;
        let fs = dsp::DEFAULT_SAMPLE_RATE as f64;
        Ok(Spectrogram::new(
            self.config.seg_freq,
            self.config.seg_time,
            out.into_values(),
            fs / stft.frame_length as f64,
            stft.hop_length as f64 / fs,
            true,
        )?)
    }

    // --- inference --------------------------------------------------------

    pub fn encode(&self, x: &Spectrogram) -> Result<Vec<f64>> {
        let t = self.segment_tensor(x)?;
        Ok(self.net(NetId::Encoder).infer(&t)?.into_values())
    }

    /// Waveform for a segment: denormalize, zero-fill the dropped bins, then
    /// Griffin-Lim with the dataset's STFT settings.
    pub fn vocode(&self, s: &Spectrogram, iterations: usize) -> Result<Waveform> {
        let raw = if s.is_normalized() { dsp::denormalize(s, &self.norm_stats)? } else { s.clone() };
        let full = raw.pad_bins(self.dataset.stft.frame_length / 2 + 1);
        Ok(dsp::griffin_lim(&full, iterations, &self.dataset.stft)?)
    }

    /// Flattened generator output for `(z, label)`, values in [-1, 1].
    pub fn generate_values(&self, z: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_label(label)?;
        let z = self.check_latent(z)?;
        Ok(self.gen_forward(&z, label)?.0.into_values())
    }

    pub fn generate(&self, z: &[f64], label: usize) -> Result<Spectrogram> {
        self.check_label(label)?;
        let z = self.check_latent(z)?;
        let out = self.gen_forward(&z, label)?.0;
        self.to_spectrogram(out)
    }

    /// Generator Jacobian `d out / d z` as row-major `[out_len x d]`.
    pub fn generator_jacobian(&self, z: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_label(label)?;
        let zt = self.check_latent(z)?;
        let (out, cache) = self.gen_forward(&zt, label)?;
        let (n, d) = (out.len(), z.len());
        let mut jac = vec![0.0; n * d];
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let col = self.gen_jvp(&cache, &Tensor::vector(e))?;
            for (i, v) in col.values().iter().enumerate() {
                jac[i * d + j] = *v;
            }
        }
        Ok(jac)
    }

    pub fn discriminate_spec(&self, x: &Spectrogram, label: usize) -> Result<f64> {
        self.check_label(label)?;
        let t = self.segment_tensor(x)?;
        Ok(self.disc_forward(&t, label)?.0)
    }

    /// Prior-discriminator probability and class logits for a latent vector.
    pub fn latent_discriminate_classify(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let z = self.check_latent(z)?;
        let h = self.net(NetId::LatentTrunk).infer(&z)?;
        let p = self.net(NetId::LatentDisc).infer(&h)?.values()[0];
        let logits = self.net(NetId::LatentCls).infer(&h)?.into_values();
        Ok((p, logits))
    }

    pub fn classify(&self, z: &[f64]) -> Result<usize> {
        let (_, logits) = self.latent_discriminate_classify(z)?;
        Ok(logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i))
    }

    pub fn reconstruct(&self, x: &Spectrogram, label: usize) -> Result<Spectrogram> {
        let z = self.encode(x)?;
        self.generate(&z, label)
    }

    // --- forward / backward plumbing -------------------------------------

    fn gen_forward(&self, z: &Tensor, label: usize) -> Result<(Tensor, GenCache)> {
        let (feat, head) = self.net(NetId::GenHead).forward(z)?;
        let (plane, lab) = self.net(NetId::GenLabel).forward(&one_hot(label, self.config.n_classes))?;
        let (out, body) = self.net(NetId::GenBody).forward(&feat.concat_channels(&plane)?)?;
        Ok((out, GenCache { head, label: lab, body }))
    }

    fn gen_jvp(&self, cache: &GenCache, dz: &Tensor) -> Result<Tensor> {
        let dfeat = self.net(NetId::GenHead).jvp(&cache.head, dz)?;
        let (gh, gw) = self.config.gen_grid();
        let dplane = Tensor::zeros(vec![1, gh, gw]);
        Ok(self.net(NetId::GenBody).jvp(&cache.body, &dfeat.concat_channels(&dplane)?)?)
    }

    /// Returns the latent gradient.
    fn gen_backward(&self, cache: &GenCache, gout: &Tensor, grads: &mut ParamGrads) -> Result<Tensor> {
        let gin = self.net(NetId::GenBody).backward(&cache.body, gout, grads.get_mut(NetId::GenBody))?;
        let (gfeat, gplane) = gin.split_channels(self.config.gen_channels);
        self.net(NetId::GenLabel).backward(&cache.label, &gplane, grads.get_mut(NetId::GenLabel))?;
        Ok(self.net(NetId::GenHead).backward(&cache.head, &gfeat, grads.get_mut(NetId::GenHead))?)
    }

    fn disc_forward(&self, x: &Tensor, label: usize) -> Result<(f64, DiscCache)> {
        let (plane, lab) = self.net(NetId::DiscLabel).forward(&one_hot(label, self.config.n_classes))?;
        let (p, body) = self.net(NetId::DiscBody).forward(&x.concat_channels(&plane)?)?;
        Ok((p.values()[0], DiscCache { label: lab, body }))
    }

    /// Backpropagates `dL/dp`; parameter gradients go to `grads` when given.
    /// Returns the gradient with respect to the spectrogram input.
    fn disc_backward(&self, cache: &DiscCache, dp: f64, grads: Option<&mut ParamGrads>) -> Result<Tensor> {
        let g = Tensor::vector(vec![dp]);
        let body = self.net(NetId::DiscBody);
        let label = self.net(NetId::DiscLabel);
        let gin = match grads {
            Some(grads) => {
                let gin = body.backward(&cache.body, &g, grads.get_mut(NetId::DiscBody))?;
                let (_, gplane) = gin.split_channels(1);
                label.backward(&cache.label, &gplane, grads.get_mut(NetId::DiscLabel))?;
                gin
            }
            None => body.backward(&cache.body, &g, &mut body.zero_grads())?,
        };
        Ok(gin.split_channels(1).0)
    }

    fn eg_forward(&self, x: Tensor, label: usize) -> Result<EgForward> {
        let (z, enc) = self.net(NetId::Encoder).forward(&x)?;
        let (out, gen) = self.gen_forward(&z, label)?;
        Ok(EgForward { x, label, z, enc, out, gen })
    }

    fn disc_spec_step(&self, real: &Tensor, fake: &Tensor, label: usize, t_real: f64, t_fake: f64, grads: &mut ParamGrads) -> Result<f64> {
        let (pr, cr) = self.disc_forward(real, label)?;
        let (lr, gr) = loss_bce(clamp_prob(pr), t_real)?;
        self.disc_backward(&cr, gr, Some(grads))?;
        let (pf, cf) = self.disc_forward(fake, label)?;
        let (lf, gf) = loss_bce(clamp_prob(pf), t_fake)?;
        self.disc_backward(&cf, gf, Some(grads))?;
        Ok(lr + lf)
    }

    fn disc_latent_step(&self, prior: &Tensor, encoded: &Tensor, t_real: f64, t_fake: f64, grads: &mut ParamGrads) -> Result<f64> {
        let mut total = 0.0;
        for (z, target) in [(prior, t_real), (encoded, t_fake)] {
            let (h, ch) = self.net(NetId::LatentTrunk).forward(z)?;
            let (p, cp) = self.net(NetId::LatentDisc).forward(&h)?;
            let (l, g) = loss_bce(clamp_prob(p.values()[0]), target)?;
            let gh = self.net(NetId::LatentDisc).backward(&cp, &Tensor::vector(vec![g]), grads.get_mut(NetId::LatentDisc))?;
            self.net(NetId::LatentTrunk).backward(&ch, &gh, grads.get_mut(NetId::LatentTrunk))?;
            total += l;
        }
        Ok(total)
    }

    /// Joint E/G/C objective for one sample. Trunk gradients carry only the
    /// classification term; the prior-discriminator path is held fixed.
    fn joint_step(&self, fw: &EgForward, w: &LossWeights, grads: &mut ParamGrads) -> Result<JointTerms> {
        let (mse, g_mse) = loss_mse(&fw.out, &fw.x)?;
        let (tv, g_tv) = loss_total_variation(&fw.out)?;
        let (p_s, c_s) = self.disc_forward(&fw.out, fw.label)?;
        let (adv_s, dp_s) = loss_bce(clamp_prob(p_s), 1.0)?;
        let g_adv = self.disc_backward(&c_s, w.spec_adversarial * dp_s, None)?;

        let gout: Vec<f64> = g_mse
            .values()
            .iter()
            .zip(g_tv.values())
            .zip(g_adv.values())
            .map(|((a, b), c)| w.reconstruction * a + w.total_variation * b + c)
            .collect();
        let mut gz = self.gen_backward(&fw.gen, &Tensor::new(fw.out.shape().to_vec(), gout)?, grads)?;

        let trunk = self.net(NetId::LatentTrunk);
        let (h, ch) = trunk.forward(&fw.z)?;
        let (p_z, cp) = self.net(NetId::LatentDisc).forward(&h)?;
        let (adv_z, dp_z) = loss_bce(clamp_prob(p_z.values()[0]), 1.0)?;
        let gh_adv = self.net(NetId::LatentDisc).backward(
            &cp,
            &Tensor::vector(vec![w.latent_adversarial * dp_z]),
            &mut self.net(NetId::LatentDisc).zero_grads(),
        )?;
        let gz_adv = trunk.backward(&ch, &gh_adv, &mut trunk.zero_grads())?;

        let (logits, cc) = self.net(NetId::LatentCls).forward(&h)?;
        let (ce, g_logits) = loss_cross_entropy(logits.values(), fw.label)?;
        let g_logits = Tensor::vector(g_logits.into_iter().map(|g| w.classification * g).collect());
        let gh_cls = self.net(NetId::LatentCls).backward(&cc, &g_logits, grads.get_mut(NetId::LatentCls))?;
        let gz_cls = trunk.backward(&ch, &gh_cls, grads.get_mut(NetId::LatentTrunk))?;

        let gz_sum: Vec<f64> = gz.values().iter().zip(gz_adv.values()).zip(gz_cls.values()).map(|((a, b), c)| a + b + c).collect();
        gz = Tensor::vector(gz_sum);
        self.net(NetId::Encoder).backward(&fw.enc, &gz, grads.get_mut(NetId::Encoder))?;

        let total = w.reconstruction * mse
            + w.total_variation * tv
            + w.spec_adversarial * adv_s
            + w.latent_adversarial * adv_z
            + w.classification * ce;
        Ok(JointTerms { mse, tv, spec_adversarial: adv_s, latent_adversarial: adv_z, cross_entropy: ce, total })
    }

    // --- objectives exposed for gradient checking ------------------------

    /// Joint objective and its gradients for one labeled segment.
    pub fn joint_objective(&self, x: &Spectrogram, label: usize, w: &LossWeights) -> Result<(JointTerms, ParamGrads)> {
        self.check_label(label)?;
        let fw = self.eg_forward(self.segment_tensor(x)?, label)?;
        let mut grads = self.zero_grads();
        let terms = self.joint_step(&fw, w, &mut grads)?;
        Ok((terms, grads))
    }

    /// Spectrogram-discriminator loss on a real segment and the model's own
    /// reconstruction, with explicit targets.
    pub fn spec_disc_objective(&self, x: &Spectrogram, label: usize, t_real: f64, t_fake: f64) -> Result<(f64, ParamGrads)> {
        self.check_label(label)?;
        let fw = self.eg_forward(self.segment_tensor(x)?, label)?;
        let mut grads = self.zero_grads();
        let loss = self.disc_spec_step(&fw.x, &fw.out, label, t_real, t_fake, &mut grads)?;
        Ok((loss, grads))
    }

    /// Latent-discriminator loss on a prior sample and an encoding of `x`.
    pub fn latent_disc_objective(&self, prior: &[f64], x: &Spectrogram, t_real: f64, t_fake: f64) -> Result<(f64, ParamGrads)> {
        let prior = self.check_latent(prior)?;
        let z = self.net(NetId::Encoder).infer(&self.segment_tensor(x)?)?;
        let mut grads = self.zero_grads();
        let loss = self.disc_latent_step(&prior, &z, t_real, t_fake, &mut grads)?;
        Ok((loss, grads))
    }

    // --- training ---------------------------------------------------------

    /// Trains on `data.segments[train_idx]`; `on_epoch` sees the model after each epoch.
    pub fn train(
        &mut self,
        data: &LabeledDataset,
        train_idx: &[usize],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        cfg.validate()?;
        if train_idx.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if data.n_classes() != self.config.n_classes {
            return Err(ModelError::Config(format!(
                "dataset has {} classes, model {}",
                data.n_classes(),
                self.config.n_classes
            )));
        }
        let inputs: Vec<(Tensor, usize)> = train_idx
            .iter()
            .map(|&i| Ok((self.segment_tensor(&data.segments[i])?, data.labels[i])))
            .collect::<Result<_>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lr_of = |id: NetId| match id {
            NetId::Encoder => cfg.lr_e,
            NetId::GenHead | NetId::GenLabel | NetId::GenBody => cfg.lr_g,
            NetId::DiscLabel | NetId::DiscBody => cfg.lr_ds,
            NetId::LatentTrunk | NetId::LatentDisc => cfg.lr_dz,
            NetId::LatentCls => cfg.lr_c,
        };
        let mut adam: Vec<AdamState> = NetId::ALL.iter().map(|&id| AdamState::new(self.net(id).n_params(), lr_of(id))).collect();
        // The shared trunk is stepped by both the D_z and the C updates.
        let mut trunk_cls = AdamState::new(self.net(NetId::LatentTrunk).n_params(), cfg.lr_c);

        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut batch_index = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut m = EpochMetrics {
                epoch,
                batches: 0,
                disc_spec: 0.0,
                disc_latent: 0.0,
                mse: 0.0,
                tv: 0.0,
                spec_adversarial: 0.0,
                latent_adversarial: 0.0,
                cross_entropy: 0.0,
                total: 0.0,
                lr_c: adam[NetId::LatentCls.index()].lr,
                lr_dz: adam[NetId::LatentDisc.index()].lr,
                update_order: cfg.update_order,
            };
            for chunk in order.chunks(cfg.batch_size) {
                let batch = batch_index;
                batch_index += 1;
                let forwards: Vec<EgForward> = chunk
                    .iter()
                    .map(|&i| self.eg_forward(inputs[i].0.clone(), inputs[i].1))
                    .collect::<Result<_>>()?;
                let scale = 1.0 / chunk.len() as f64;

                let run_disc = |model: &mut Self, adam: &mut Vec<AdamState>, rng: &mut ChaCha8Rng| -> Result<(f64, f64)> {
                    let mut grads = model.zero_grads();
                    let mut ls = 0.0;
                    for fw in &forwards {
                        let tr = smoothed_target(true, cfg.soft_scale, rng);
                        let tf = smoothed_target(false, cfg.soft_scale, rng);
                        ls += model.disc_spec_step(&fw.x, &fw.out, fw.label, tr, tf, &mut grads)?;
                    }
                    grads.scale(scale);
                    for id in [NetId::DiscLabel, NetId::DiscBody] {
                        model.nets[id.index()].adam_step(grads.get(id), &mut adam[id.index()])?;
                    }

                    let mut grads = model.zero_grads();
                    let mut lz = 0.0;
                    for fw in &forwards {
                        let prior: Vec<f64> = (0..model.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                        let tr = smoothed_target(true, cfg.soft_scale, rng);
                        let tf = smoothed_target(false, cfg.soft_scale, rng);
                        lz += model.disc_latent_step(&Tensor::vector(prior), &fw.z, tr, tf, &mut grads)?;
                    }
                    grads.scale(scale);
                    for id in [NetId::LatentTrunk, NetId::LatentDisc] {
                        model.nets[id.index()].adam_step(grads.get(id), &mut adam[id.index()])?;
                    }
                    Ok((ls * scale, lz * scale))
                };
                let run_joint = |model: &mut Self, adam: &mut Vec<AdamState>, trunk_cls: &mut AdamState| -> Result<JointTerms> {
                    let mut grads = model.zero_grads();
                    let mut sum = JointTerms::default();
                    for fw in &forwards {
                        let t = model.joint_step(fw, &cfg.weights, &mut grads)?;
                        sum.mse += t.mse * scale;
                        sum.tv += t.tv * scale;
                        sum.spec_adversarial += t.spec_adversarial * scale;
                        sum.latent_adversarial += t.latent_adversarial * scale;
                        sum.cross_entropy += t.cross_entropy * scale;
                        sum.total += t.total * scale;
                    }
                    grads.scale(scale);
                    for id in [NetId::Encoder, NetId::GenHead, NetId::GenLabel, NetId::GenBody, NetId::LatentCls] {
                        model.nets[id.index()].adam_step(grads.get(id), &mut adam[id.index()])?;
                    }
                    model.nets[NetId::LatentTrunk.index()].adam_step(grads.get(NetId::LatentTrunk), trunk_cls)?;
                    Ok(sum)
                };

                let ((disc_spec, disc_latent), terms) = match cfg.update_order {
                    UpdateOrder::DiscriminatorsFirst => {
                        let d = run_disc(self, &mut adam, &mut rng)?;
                        check_finite(d.0, batch, "disc_spec")?;
                        check_finite(d.1, batch, "disc_latent")?;
                        // Discriminator steps leave E/G untouched, so the cached forwards stay valid.
                        (d, run_joint(self, &mut adam, &mut trunk_cls)?)
                    }
                    UpdateOrder::GeneratorFirst => {
                        let t = run_joint(self, &mut adam, &mut trunk_cls)?;
                        (run_disc(self, &mut adam, &mut rng)?, t)
                    }
                };
                check_finite(disc_spec, batch, "disc_spec")?;
                check_finite(disc_latent, batch, "disc_latent")?;
                check_finite(terms.mse, batch, "mse")?;
                check_finite(terms.tv, batch, "tv")?;
                check_finite(terms.spec_adversarial, batch, "spec_adversarial")?;
                check_finite(terms.latent_adversarial, batch, "latent_adversarial")?;
                check_finite(terms.cross_entropy, batch, "cross_entropy")?;
                if self.nets.iter().any(|n| n.params().iter().any(|p| !p.is_finite())) {
                    return Err(ModelError::NonFinite { batch, term: "parameters" });
                }

                m.batches += 1;
                m.disc_spec += disc_spec;
                m.disc_latent += disc_latent;
                m.mse += terms.mse;
                m.tv += terms.tv;
                m.spec_adversarial += terms.spec_adversarial;
                m.latent_adversarial += terms.latent_adversarial;
                m.cross_entropy += terms.cross_entropy;
                m.total += terms.total;
            }
            let nb = m.batches.max(1) as f64;
            for v in [
                &mut m.disc_spec,
                &mut m.disc_latent,
                &mut m.mse,
                &mut m.tv,
                &mut m.spec_adversarial,
                &mut m.latent_adversarial,
                &mut m.cross_entropy,
                &mut m.total,
            ] {
                *v /= nb;
            }
            for id in [NetId::LatentTrunk, NetId::LatentDisc, NetId::LatentCls] {
                adam[id.index()].lr *= cfg.lr_decay;
            }
            trunk_cls.lr *= cfg.lr_decay;
            on_epoch(self, &m);
            history.push(m);
        }
        Ok(history)
    }

    /// Reconstruction, classification and discriminator statistics over `idx`.
    pub fn validate(&self, data: &LabeledDataset, idx: &[usize]) -> Result<ValidationReport> {
        if idx.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let d = self.config.latent_dim;
        let mut dist = 0.0;
        let mut correct = 0usize;
        let mut real = 0.0;
        let mut fake = 0.0;
        let mut sum = vec![0.0; d];
        let mut sumsq = vec![0.0; d];
        for &i in idx {
            let (x, y) = (&data.segments[i], data.labels[i]);
            let z = self.encode(x)?;
            let g = self.generate(&z, y)?;
            dist += dsp::spectral_distance(&g, x)?;
            if self.classify(&z)? == y {
                correct += 1;
            }
            real += self.discriminate_spec(x, y)?;
            fake += self.discriminate_spec(&g, y)?;
            for (j, v) in z.iter().enumerate() {
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
        let n = idx.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = sumsq.iter().zip(&mean).map(|(s, m)| s / n - m * m).collect();
        Ok(ValidationReport {
            reconstruction_distance: dist / n,
            classifier_accuracy: correct as f64 / n,
            disc_real: real / n,
            disc_fake: fake / n,
            latent_mean_norm: mean.iter().map(|m| m * m).sum::<f64>().sqrt(),
            latent_var_min: var.iter().cloned().fold(f64::INFINITY, f64::min),
            latent_var_max: var.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    // --- checkpoints ------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = container::Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.str(&serde_json::to_string(&self.dataset).expect("config serializes"));
        w.u64(self.class_names.len() as u64);
        for name in &self.class_names {
            w.str(name);
        }
        w.f64(self.norm_stats.min_value).f64(self.norm_stats.max_value);
        let blocks: Vec<_> = NetId::ALL
            .iter()
            .flat_map(|&id| self.net(id).param_blocks().iter().map(move |b| (id, b)))
            .collect();
        w.u64(blocks.len() as u64);
        for (id, b) in blocks {
            let params = self.net(id).params();
            w.str(&format!("{}.{}", id.name(), b.name));
            w.usizes(&b.shape);
            w.f64s(&params[b.offset..b.offset + b.len()]);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = container::Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let invalid = |e: serde_json::Error| ModelError::Container(ContainerError::Invalid(e.to_string()));
        let config: ModelConfig = serde_json::from_str(&r.str()?).map_err(invalid)?;
        let dataset: DatasetConfig = serde_json::from_str(&r.str()?).map_err(invalid)?;
        let k = r.u64()? as usize;
        let class_names = (0..k).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
        let norm_stats = NormStats::new(r.f64()?, r.f64()?)?;
        let mut model = Self::new(config, class_names, norm_stats, dataset)?;
        let n_blocks = r.u64()? as usize;
        let mut seen = 0;
        for id in NetId::ALL {
            let blocks = model.net(id).param_blocks().to_vec();
            let mut params = model.net(id).params().to_vec();
            for b in blocks {
                if seen == n_blocks {
                    return Err(ModelError::ParamTable("fewer blocks than the architecture".into()));
                }
                seen += 1;
                let name = r.str()?;
                let expected = format!("{}.{}", id.name(), b.name);
                let shape = r.usizes()?;
                if name != expected || shape != b.shape {
                    return Err(ModelError::ParamTable(format!("found {name} {shape:?}, expected {expected} {:?}", b.shape)));
                }
                let values = r.f64s()?;
                params[b.offset..b.offset + b.len()].copy_from_slice(&values);
            }
            model.net_mut(id).set_params(params)?;
        }
        if seen != n_blocks {
            return Err(ModelError::ParamTable("more blocks than the architecture".into()));
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.into(), source })
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        container::sha256_hex(&self.to_bytes())
    }

    /// All parameters, concatenated in [`NetId::ALL`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.params().iter().copied()).collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TACTCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_model() -> TextureGan {
        let cfg = ModelConfig::micro();
        TextureGan::new(cfg, vec!["a".into(), "b".into()], NormStats::new(0.0, 1.0).unwrap(), DatasetConfig::toy()).unwrap()
    }

    fn micro_segment(seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        Spectrogram::from_grid(6, 8, v, true).unwrap()
    }

    #[test]
    fn shapes_and_ranges() {
        let m = micro_model();
        let x = micro_segment(1);
        let z = m.encode(&x).unwrap();
        assert_eq!(z.len(), 4);
        assert_eq!(m.encode(&x).unwrap(), z);
        let g = m.generate(&z, 1).unwrap();
        assert_eq!(g.shape(), (6, 8));
        assert!(g.magnitudes().iter().all(|v| (-1.0..=1.0).contains(v)));
        let p = m.discriminate_spec(&x, 0).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let (pz, logits) = m.latent_discriminate_classify(&z).unwrap();
        assert!(pz > 0.0 && pz < 1.0);
        assert_eq!(logits.len(), 2);
        assert!(matches!(m.generate(&z, 2), Err(ModelError::Label { label: 2, classes: 2 })));
        assert!(matches!(m.generate(&[0.0; 3], 0), Err(ModelError::LatentDim { expected: 4, found: 3 })));
        for fill in [-1.0, 1.0] {
            let x = Spectrogram::from_grid(6, 8, vec![fill; 48], true).unwrap();
            assert!(m.encode(&x).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = micro_model();
        let bytes = m.to_bytes();
        let back = TextureGan::from_bytes(&bytes).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.config, m.config);
        assert_eq!(back.norm_stats, m.norm_stats);
        assert!(matches!(
            TextureGan::from_bytes(&bytes[..bytes.len() - 10]),
            Err(ModelError::Container(ContainerError::Checksum))
        ));
        assert!(matches!(back.expect_latent_dim(128), Err(ModelError::LatentDim { expected: 128, found: 4 })));
    }

    #[test]
    fn analytic_jacobian_matches_columns() {
        let m = micro_model();
        let z = vec![0.3, -0.2, 0.1, 0.5];
        let jac = m.generator_jacobian(&z, 0).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let gp = m.generate_values(&zp, 0).unwrap();
            let gm = m.generate_values(&zm, 0).unwrap();
            for i in 0..gp.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!((fd - jac[i * 4 + j]).abs() < 1e-7);
            }
        }
    }
}
