//! Differential subspace search: a one-dimensional slider through latent
//! space along the top right-singular vector of the generator Jacobian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TextureGan};

#[derive(Debug, Error)]
pub enum DssError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("slider position {0} outside [-1, 1]")]
    SliderRange(f64),
    #[error("step scale must be positive, got {0}")]
    StepScale(f64),
    #[error("latent dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("jacobian is zero; the generator is flat at this point")]
    DegenerateJacobian,
    #[error("generator has no analytic jacobian")]
    NoAnalyticJacobian,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("direction_count must be at least 1")]
    DirectionCount,
}

pub type Result<T> = std::result::Result<T, DssError>;

/// Anything that maps `(z, label)` to a flat output vector.
pub trait LatentGenerator {
    fn latent_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn generate_flat(&self, z: &[f64], label: usize) -> Result<Vec<f64>>;

    /// Exact Jacobian, row-major `[out x d]`, when the generator can provide one.
    fn analytic_jacobian(&self, _z: &[f64], _label: usize) -> Result<DMatrix<f64>> {
        Err(DssError::NoAnalyticJacobian)
    }
}

impl LatentGenerator for TextureGan {
    fn latent_dim(&self) -> usize {
        TextureGan::latent_dim(self)
    }

    fn n_classes(&self) -> usize {
        TextureGan::n_classes(self)
    }

    fn generate_flat(&self, z: &[f64], label: usize) -> Result<Vec<f64>> {
        Ok(self.generate_values(z, label)?)
    }

    fn analytic_jacobian(&self, z: &[f64], label: usize) -> Result<DMatrix<f64>> {
        let d = z.len();
        let flat = self.generator_jacobian(z, label)?;
        Ok(DMatrix::from_row_slice(flat.len() / d, d, &flat))
    }
}

/// `G(z) = A z`, ignoring the label. Test hook with a known Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub a: DMatrix<f64>,
    pub n_classes: usize,
}

impl LinearSurrogate {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a, n_classes: 1 }
    }

    /// Gaussian entries scaled by `1/sqrt(rows)`.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (rows as f64).sqrt();
        Self::new(DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
    }
}

impl LatentGenerator for LinearSurrogate {
    fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn generate_flat(&self, z: &[f64], label: usize) -> Result<Vec<f64>> {
        check_inputs(self, z, label)?;
        Ok((&self.a * DVector::from_column_slice(z)).iter().copied().collect())
    }

    fn analytic_jacobian(&self, z: &[f64], label: usize) -> Result<DMatrix<f64>> {
        check_inputs(self, z, label)?;
        Ok(self.a.clone())
    }
}

fn check_inputs(g: &(impl LatentGenerator + ?Sized), z: &[f64], label: usize) -> Result<()> {
    if z.len() != g.latent_dim() {
        return Err(DssError::Dimension { expected: g.latent_dim(), found: z.len() });
    }
    if label >= g.n_classes() {
        return Err(DssError::Label { label, classes: g.n_classes() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(DssError::NonFinite("latent vector"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum JacobianMethod {
    Analytic,
    /// Central differences with step `h`.
    #[default]
    FiniteDifference,
}

pub const FD_STEP: f64 = 1e-4;

pub fn jacobian(g: &(impl LatentGenerator + ?Sized), z: &[f64], label: usize, method: JacobianMethod) -> Result<DMatrix<f64>> {
    check_inputs(g, z, label)?;
    let j = match method {
        JacobianMethod::Analytic => g.analytic_jacobian(z, label)?,
        JacobianMethod::FiniteDifference => {
            let d = z.len();
            let mut cols = Vec::with_capacity(d);
            let mut zp = z.to_vec();
            for k in 0..d {
                zp[k] = z[k] + FD_STEP;
                let up = g.generate_flat(&zp, label)?;
                zp[k] = z[k] - FD_STEP;
                let down = g.generate_flat(&zp, label)?;
                zp[k] = z[k];
                cols.push(DVector::from_iterator(up.len(), up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * FD_STEP))));
            }
            DMatrix::from_columns(&cols)
        }
    };
    if j.iter().any(|v| !v.is_finite()) {
        return Err(DssError::NonFinite("jacobian"));
    }
    Ok(j)
}

/// Flips `v` so that its first component with magnitude above `1e-12` is positive.
pub fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

/// Right singular vectors sorted by decreasing singular value.
fn right_singular(j: &DMatrix<f64>) -> Result<Vec<(f64, DVector<f64>)>> {
    if j.iter().all(|v| *v == 0.0) || j.ncols() == 0 {
        return Err(DssError::DegenerateJacobian);
    }
    let svd = j.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut pairs: Vec<(f64, DVector<f64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, v_t.row(i).transpose()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(pairs)
}

/// Top right-singular vector (sign-canonical) and its singular value.
pub fn principal_direction(j: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    let (sigma, v) = right_singular(j)?.swap_remove(0);
    if !(sigma > 0.0) {
        return Err(DssError::DegenerateJacobian);
    }
    Ok((canonical_sign(v), sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DssConfig {
    /// Latent distance covered by the slider's half range.
    pub step_scale: f64,
    pub jacobian: JacobianMethod,
    /// Directions mixed into the slider; 1 uses the top singular vector alone.
    pub direction_count: usize,
    pub mix_seed: u64,
}

impl DssConfig {
    /// `s = 0.25 * sqrt(d)`.
    pub fn for_latent_dim(d: usize) -> Self {
        Self { step_scale: 0.25 * (d as f64).sqrt(), jacobian: JacobianMethod::default(), direction_count: 1, mix_seed: 0 }
    }

    /// `s = 0.25 * sqrt(d) * unit`, with `unit` the latent movement unit.
    pub fn with_unit(d: usize, unit: f64) -> Self {
        let mut cfg = Self::for_latent_dim(d);
        cfg.step_scale *= unit;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(DssError::StepScale(self.step_scale));
        }
        if self.direction_count == 0 {
            return Err(DssError::DirectionCount);
        }
        Ok(())
    }
}

/// Slider direction at `z`: the top right-singular vector, or a seeded random
/// unit mix of the top `direction_count` vectors.
pub fn slider_direction(g: &(impl LatentGenerator + ?Sized), z: &[f64], label: usize, cfg: &DssConfig, iteration: usize) -> Result<(Vec<f64>, f64)> {
    let j = jacobian(g, z, label, cfg.jacobian)?;
    if cfg.direction_count == 1 {
        let (v, s) = principal_direction(&j)?;
        return Ok((v.iter().copied().collect(), s));
    }
    let pairs = right_singular(&j)?;
    let k = cfg.direction_count.min(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mix_seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let weights: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let mut v = DVector::zeros(z.len());
    for (w, (_, vi)) in weights.iter().zip(&pairs) {
        v += vi * *w;
    }
    let norm = v.norm();
    if !(norm > 0.0) {
        return Err(DssError::DegenerateJacobian);
    }
    let v = canonical_sign(v / norm);
    let gain = (&j * &v).norm();
    Ok((v.iter().copied().collect(), gain))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMap {
    pub base_z: Vec<f64>,
    pub direction: Vec<f64>,
    pub scale: f64,
    /// `||J v||` at the base point.
    pub gain: f64,
}

impl SubspaceMap {
    /// `z(w) = base_z + w * scale * direction`.
    pub fn latent_at(&self, w: f64) -> Result<Vec<f64>> {
        if !(-1.0..=1.0).contains(&w) {
            return Err(DssError::SliderRange(w));
        }
        Ok(self.base_z.iter().zip(&self.direction).map(|(b, v)| b + w * self.scale * v).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub w: f64,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DssState {
    pub iteration: usize,
    pub map: SubspaceMap,
    pub label: usize,
    pub history: Vec<HistoryEntry>,
    pub config: DssConfig,
}

impl DssState {
    pub fn new(g: &(impl LatentGenerator + ?Sized), z0: Vec<f64>, label: usize, config: DssConfig) -> Result<Self> {
        config.validate()?;
        let (direction, gain) = slider_direction(g, &z0, label, &config, 0)?;
        Ok(Self {
            iteration: 0,
            map: SubspaceMap { base_z: z0, direction, scale: config.step_scale, gain },
            label,
            history: Vec::new(),
            config,
        })
    }

    pub fn latent_at(&self, w: f64) -> Result<Vec<f64>> {
        self.map.latent_at(w)
    }

    /// Moves the base to `z(w)` and recomputes the direction there.
    pub fn commit(&self, g: &(impl LatentGenerator + ?Sized), w: f64) -> Result<Self> {
        let z = self.map.latent_at(w)?;
        let iteration = self.iteration + 1;
        let (direction, gain) = slider_direction(g, &z, self.label, &self.config, iteration)?;
        let mut history = self.history.clone();
        history.push(HistoryEntry { iteration, w, z: z.clone() });
        Ok(Self {
            iteration,
            map: SubspaceMap { base_z: z, direction, scale: self.config.step_scale, gain },
            label: self.label,
            history,
            config: self.config,
        })
    }
}
