//! A simulated user: rates candidates by spectral distance to a target and
//! picks slider positions by grid search.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::dss::{DssConfig, DssError, DssState, LatentGenerator};
use crate::init::{self, Advance, Candidate, InitConfig, InitError, LatentIndex, Rating, TabuList};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Dss(#[from] DssError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error("target has {target} values, generator produces {output}")]
    TargetShape { target: usize, output: usize },
    #[error("invalid oracle: {0}")]
    Config(String),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, SimError>;

pub const TOY_TAU_GOOD: f64 = 0.12;
pub const TOY_TAU_SOSO: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleUser {
    /// Flattened normalized target spectrogram.
    pub target: Vec<f64>,
    pub tau_good: f64,
    pub tau_soso: f64,
    pub grid_points: usize,
    pub selection_noise: f64,
}

impl OracleUser {
    pub fn new(target: Vec<f64>) -> Self {
        Self { target, tau_good: 0.35, tau_soso: 0.6, grid_points: 21, selection_noise: 0.0 }
    }

    /// Thresholds for the toy corpus, whose distances sit well below the
    /// defaults: between the nearest and the median index candidate.
    pub fn toy(target: Vec<f64>) -> Self {
        Self::new(target).with_thresholds(TOY_TAU_GOOD, TOY_TAU_SOSO)
    }

    pub fn with_thresholds(mut self, tau_good: f64, tau_soso: f64) -> Self {
        self.tau_good = tau_good;
        self.tau_soso = tau_soso;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_good && self.tau_good < self.tau_soso) {
            return Err(SimError::Config(format!("need 0 < tau_good < tau_soso, got {} / {}", self.tau_good, self.tau_soso)));
        }
        if self.grid_points < 3 {
            return Err(SimError::Config("grid_points must be at least 3".into()));
        }
        if !(self.selection_noise >= 0.0) {
            return Err(SimError::Config("selection_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn rating_for(&self, d: f64) -> Rating {
        if d < self.tau_good {
            Rating::Good
        } else if d < self.tau_soso {
            Rating::SoSo
        } else {
            Rating::Bad
        }
    }

    pub fn distance(&self, g: &(impl LatentGenerator + ?Sized), z: &[f64], label: usize) -> Result<f64> {
        let out = g.generate_flat(z, label)?;
        if out.len() != self.target.len() {
            return Err(SimError::TargetShape { target: self.target.len(), output: out.len() });
        }
        Ok(dsp::distance_values(&out, &self.target))
    }

    pub fn rate(&self, g: &(impl LatentGenerator + ?Sized), z: &[f64], label: usize) -> Result<(Rating, f64)> {
        let d = self.distance(g, z, label)?;
        Ok((self.rating_for(d), d))
    }

    /// Uniform grid over [-1, 1].
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
    }

    /// Grid argmin of the distance along the slider, optionally jittered.
    /// Returns the position and the distance there.
    pub fn pick_slider(&self, g: &(impl LatentGenerator + ?Sized), state: &DssState, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let mut best = (0.0, f64::INFINITY);
        for w in self.grid() {
            let d = self.distance(g, &state.latent_at(w)?, state.label)?;
            if d < best.1 {
                best = (w, d);
            }
        }
        if self.selection_noise > 0.0 {
            let jitter: f64 = rng.sample(StandardNormal);
            let w = (best.0 + self.selection_noise * jitter).clamp(-1.0, 1.0);
            return Ok((w, self.distance(g, &state.latent_at(w)?, state.label)?));
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub max_iters: usize,
    pub max_init_attempts: usize,
    pub seed: u64,
    pub init: InitConfig,
    pub dss: DssConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitStep {
    pub attempt: usize,
    pub index: usize,
    pub label: usize,
    pub distance: f64,
    pub rating: Rating,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterStep {
    pub iteration: usize,
    pub w: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub seed: u64,
    pub init_attempts: usize,
    /// True when the attempt cap was hit and the best rated candidate was used.
    pub init_exhausted: bool,
    pub accepted_index: usize,
    pub label: usize,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub iterations: usize,
    pub stopped_early: bool,
    pub final_z: Vec<f64>,
}

impl TraceSummary {
    /// Relative distance reduction from the accepted initialization.
    pub fn reduction(&self) -> f64 {
        if self.initial_distance > 0.0 {
            (self.initial_distance - self.final_distance) / self.initial_distance
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub init: Vec<InitStep>,
    pub iterations: Vec<IterStep>,
    pub summary: TraceSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceRecord {
    Init(InitStep),
    Iter(IterStep),
    Summary(TraceSummary),
}

impl Trace {
    /// Distances `d_0` (accepted initialization) through `d_K`.
    pub fn distances(&self) -> Vec<f64> {
        std::iter::once(self.summary.initial_distance).chain(self.iterations.iter().map(|s| s.distance)).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let records = self
            .init
            .iter()
            .cloned()
            .map(TraceRecord::Init)
            .chain(self.iterations.iter().cloned().map(TraceRecord::Iter))
            .chain(std::iter::once(TraceRecord::Summary(self.summary.clone())));
        for r in records {
            serde_json::to_writer(&mut out, &r).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut init = Vec::new();
        let mut iterations = Vec::new();
        let mut summary = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| SimError::TraceFormat { line: i + 1, message: e.to_string() })?;
            match rec {
                TraceRecord::Init(s) => init.push(s),
                TraceRecord::Iter(s) => iterations.push(s),
                TraceRecord::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or(SimError::TraceFormat { line: 0, message: "missing summary record".into() })?;
        Ok(Self { init, iterations, summary })
    }
}

fn propose(index: &LatentIndex, tabu: &mut TabuList, cfg: &InitConfig, rng: &mut ChaCha8Rng) -> Result<Candidate> {
    match init::propose_initial(index, tabu, cfg, rng) {
        // The tabu list was cleared; one more round always succeeds.
        Err(InitError::Exhausted(_)) => Ok(init::propose_initial(index, tabu, cfg, rng)?),
        other => Ok(other?),
    }
}

/// Initialization by ratings, then slider iterations until `max_iters` or
/// until the distance drops below `tau_good / 2`.
pub fn run_session(user: &OracleUser, g: &(impl LatentGenerator + ?Sized), index: &LatentIndex, cfg: &SessionConfig) -> Result<Trace> {
    user.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tabu = TabuList::new(cfg.init.tabu_capacity);
    let mut current = propose(index, &mut tabu, &cfg.init, &mut rng)?;
    let mut fallback = false;
    let mut steps = Vec::new();
    let mut best: Option<(f64, Candidate)> = None;
    let mut accepted = None;
    let cap = cfg.max_init_attempts.max(1);
    for attempt in 1..=cap {
        let (rating, d) = user.rate(g, &current.z, current.label)?;
        steps.push(InitStep { attempt, index: current.index, label: current.label, distance: d, rating, fallback });
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, current.clone()));
        }
        if rating == Rating::Good {
            accepted = Some((d, current.clone()));
            break;
        }
        if attempt == cap {
            break;
        }
        (current, fallback) = match init::advance(&current, rating, &mut tabu, index, &cfg.init, &mut rng) {
            Ok(Advance::Next { candidate, fallback }) => (candidate, fallback),
            Ok(Advance::Accepted(c)) => (c, false),
            Err(InitError::Exhausted(_)) => (propose(index, &mut tabu, &cfg.init, &mut rng)?, true),
            Err(e) => return Err(e.into()),
        };
    }
    let init_exhausted = accepted.is_none();
    let (initial_distance, start) = accepted.or(best).expect("at least one attempt is rated");

    let mut state = DssState::new(g, start.z.clone(), start.label, cfg.dss)?;
    let mut distance = initial_distance;
    let mut iterations = Vec::new();
    let mut stopped_early = false;
    while state.iteration < cfg.max_iters {
        if distance < user.tau_good / 2.0 {
            stopped_early = true;
            break;
        }
        let (w, d) = user.pick_slider(g, &state, &mut rng)?;
        state = state.commit(g, w)?;
        distance = d;
        iterations.push(IterStep { iteration: state.iteration, w, distance });
    }
    Ok(Trace {
        summary: TraceSummary {
            seed: cfg.seed,
            init_attempts: steps.len(),
            init_exhausted,
            accepted_index: start.index,
            label: start.label,
            initial_distance,
            final_distance: distance,
            iterations: state.iteration,
            stopped_early,
            final_z: state.map.base_z.clone(),
        },
        init: steps,
        iterations,
    })
}
