//! Tabu-style initialization: candidates are encoded training segments,
//! advanced by Good / So-so / Bad ratings under distance bands, with a FIFO
//! of recently rejected points whose neighborhoods are forbidden.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledDataset;
use crate::model::{ModelError, TextureGan};

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("latent index is empty")]
    EmptyIndex,
    #[error("average distance needs at least two index entries")]
    SingletonIndex,
    #[error("index entry {index} has dimension {found}, expected {expected}")]
    Dimension { index: usize, expected: usize, found: usize },
    #[error("n_pairs must be at least 1")]
    NoPairs,
    #[error("no admissible candidate after {0} attempts; tabu list cleared")]
    Exhausted(usize),
    #[error("initialization already accepted a candidate")]
    AlreadyAccepted,
    #[error("unknown rating {0:?} (expected good, soso or bad)")]
    BadRating(String),
    #[error("invalid init config: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
}

impl From<ModelError> for InitError {
    fn from(e: ModelError) -> Self {
        InitError::Model(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, InitError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Bad,
    SoSo,
    Good,
}

impl FromStr for Rating {
    type Err = InitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "good" => Ok(Rating::Good),
            "soso" | "so-so" => Ok(Rating::SoSo),
            "bad" => Ok(Rating::Bad),
            _ => Err(InitError::BadRating(s.to_string())),
        }
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rating::Good => "good",
            Rating::SoSo => "soso",
            Rating::Bad => "bad",
        })
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Encodings of the training segments with their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentIndex {
    entries: Vec<(Vec<f64>, usize)>,
}

impl LatentIndex {
    pub fn new(entries: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        let first = entries.first().ok_or(InitError::EmptyIndex)?;
        let d = first.0.len();
        if let Some((index, (z, _))) = entries.iter().enumerate().find(|(_, (z, _))| z.len() != d) {
            return Err(InitError::Dimension { index, expected: d, found: z.len() });
        }
        Ok(Self { entries })
    }

    /// Encodes `data.segments[idx]` with the model's encoder.
    pub fn from_model(model: &TextureGan, data: &LabeledDataset, idx: &[usize]) -> Result<Self> {
        let entries = idx
            .iter()
            .map(|&i| Ok((model.encode(&data.segments[i])?, data.labels[i])))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].0.len()
    }

    pub fn get(&self, i: usize) -> Candidate {
        Candidate { index: i, z: self.entries[i].0.clone(), label: self.entries[i].1 }
    }

    pub fn entries(&self) -> &[(Vec<f64>, usize)] {
        &self.entries
    }
}

/// Mean Euclidean distance over `n_pairs` sampled pairs of distinct entries.
pub fn estimate_avg_distance(index: &LatentIndex, n_pairs: usize, rng: &mut impl Rng) -> Result<f64> {
    let n = index.len();
    if n < 2 {
        return Err(InitError::SingletonIndex);
    }
    if n_pairs == 0 {
        return Err(InitError::NoPairs);
    }
    let mut sum = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        sum += euclidean(&index.entries[i].0, &index.entries[j].0);
    }
    Ok(sum / n_pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub dis_avg: f64,
    /// Unit of movement, `dis_avg / 8`.
    pub step: f64,
    pub tabu_radius: f64,
    pub tabu_capacity: usize,
    pub soso_band: (f64, f64),
    pub bad_min: f64,
    /// Redraws allowed when proposing a fresh candidate.
    pub max_draws: usize,
}

impl InitConfig {
    pub fn from_avg_distance(dis_avg: f64) -> Result<Self> {
        let step = dis_avg / 8.0;
        let cfg = Self {
            dis_avg,
            step,
            tabu_radius: step,
            tabu_capacity: 5,
            soso_band: (0.5 * step, 2.0 * step),
            bad_min: 2.0 * step,
            max_draws: 1000,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(InitError::Config(format!("step must be positive, got {}", self.step)));
        }
        if self.tabu_capacity == 0 {
            return Err(InitError::Config("tabu_capacity must be at least 1".into()));
        }
        if !(self.soso_band.0 < self.soso_band.1) {
            return Err(InitError::Config("empty so-so band".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabuEntry {
    pub z: Vec<f64>,
    pub radius: f64,
}

/// Bounded FIFO; the oldest entry is evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabuList {
    entries: VecDeque<TabuEntry>,
    capacity: usize,
}

impl TabuList {
    pub fn new(capacity: usize) -> Self {
        Self { entries: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, z: Vec<f64>, radius: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(TabuEntry { z, radius });
    }

    /// True if `z` lies within the radius of any live entry.
    pub fn forbids(&self, z: &[f64]) -> bool {
        self.entries.iter().any(|e| euclidean(&e.z, z) <= e.radius)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &TabuEntry> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub z: Vec<f64>,
    pub label: usize,
}

/// Uniform draw from the index outside all tabu radii. After
/// `cfg.max_draws` failed draws the tabu list is cleared and an error returned.
pub fn propose_initial(index: &LatentIndex, tabu: &mut TabuList, cfg: &InitConfig, rng: &mut impl Rng) -> Result<Candidate> {
    if index.is_empty() {
        return Err(InitError::EmptyIndex);
    }
    for _ in 0..cfg.max_draws.max(1) {
        let i = rng.random_range(0..index.len());
        if !tabu.forbids(&index.entries[i].0) {
            return Ok(index.get(i));
        }
    }
    tabu.clear();
    Err(InitError::Exhausted(cfg.max_draws))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Advance {
    Accepted(Candidate),
    /// `fallback` is set when the rating's distance band was empty and the
    /// nearest admissible entry was used instead.
    Next { candidate: Candidate, fallback: bool },
}

/// Applies one rating to `current`.
pub fn advance(
    current: &Candidate,
    rating: Rating,
    tabu: &mut TabuList,
    index: &LatentIndex,
    cfg: &InitConfig,
    rng: &mut impl Rng,
) -> Result<Advance> {
    if rating == Rating::Good {
        return Ok(Advance::Accepted(current.clone()));
    }
    tabu.push(current.z.clone(), cfg.tabu_radius);
    let in_band = |d: f64| match rating {
        Rating::SoSo => d > cfg.soso_band.0 && d < cfg.soso_band.1,
        _ => d > cfg.bad_min,
    };
    let mut band = Vec::new();
    let mut nearest: Option<(f64, usize)> = None;
    for (i, (z, _)) in index.entries.iter().enumerate() {
        if tabu.forbids(z) {
            continue;
        }
        let d = euclidean(z, &current.z);
        if in_band(d) {
            band.push(i);
        }
        if nearest.is_none_or(|(best, _)| d < best) {
            nearest = Some((d, i));
        }
    }
    if !band.is_empty() {
        let i = band[rng.random_range(0..band.len())];
        return Ok(Advance::Next { candidate: index.get(i), fallback: false });
    }
    match nearest {
        Some((_, i)) => Ok(Advance::Next { candidate: index.get(i), fallback: true }),
        None => {
            tabu.clear();
            Err(InitError::Exhausted(0))
        }
    }
}

/// One initialization run: current candidate, tabu list and a log of ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Initializer {
    pub config: InitConfig,
    pub tabu: TabuList,
    pub current: Candidate,
    pub accepted: bool,
    pub ratings: usize,
    pub log: Vec<String>,
}

impl Initializer {
    pub fn start(index: &LatentIndex, config: InitConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tabu = TabuList::new(config.tabu_capacity);
        let current = propose_initial(index, &mut tabu, &config, rng)?;
        let log = vec![format!("propose index={} label={}", current.index, current.label)];
        Ok(Self { config, tabu, current, accepted: false, ratings: 0, log })
    }

    pub fn rate(&mut self, rating: Rating, index: &LatentIndex, rng: &mut impl Rng) -> Result<Advance> {
        if self.accepted {
            return Err(InitError::AlreadyAccepted);
        }
        self.ratings += 1;
        let step = match advance(&self.current, rating, &mut self.tabu, index, &self.config, rng) {
            Err(InitError::Exhausted(_)) => {
                self.log.push("exhausted; tabu cleared".into());
                let candidate = propose_initial(index, &mut self.tabu, &self.config, rng)?;
                Advance::Next { candidate, fallback: true }
            }
            other => other?,
        };
        match &step {
            Advance::Accepted(c) => {
                self.accepted = true;
                self.log.push(format!("{rating} -> accepted index={} label={}", c.index, c.label));
            }
            Advance::Next { candidate, fallback } => {
                self.current = candidate.clone();
                let note = if *fallback { " (fallback: nearest admissible)" } else { "" };
                self.log.push(format!("{rating} -> index={} label={}{note}", candidate.index, candidate.label));
            }
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_index(n: usize) -> LatentIndex {
        LatentIndex::new((0..n).map(|i| (vec![i as f64, 0.0], i % 3)).collect()).unwrap()
    }

    #[test]
    fn two_point_average_is_exact() {
        let idx = LatentIndex::new(vec![(vec![0.0, 0.0], 0), (vec![1.0, 0.0], 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(estimate_avg_distance(&idx, 100, &mut rng).unwrap(), 1.0);
        let single = LatentIndex::new(vec![(vec![0.0], 0)]).unwrap();
        assert_eq!(estimate_avg_distance(&single, 10, &mut rng), Err(InitError::SingletonIndex));
        assert_eq!(LatentIndex::new(vec![]), Err(InitError::EmptyIndex));
    }

    #[test]
    fn tabu_fifo_evicts_oldest() {
        let mut t = TabuList::new(2);
        t.push(vec![0.0], 0.5);
        t.push(vec![10.0], 0.5);
        t.push(vec![20.0], 0.5);
        assert_eq!(t.len(), 2);
        assert!(!t.forbids(&[0.0]));
        assert!(t.forbids(&[10.2]));
    }

    #[test]
    fn good_accepts_and_bands_hold() {
        let idx = line_index(40);
        let cfg = InitConfig { max_draws: 100, ..InitConfig::from_avg_distance(16.0).unwrap() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tabu = TabuList::new(5);
        let cur = idx.get(20);
        assert_eq!(advance(&cur, Rating::Good, &mut tabu, &idx, &cfg, &mut rng).unwrap(), Advance::Accepted(cur.clone()));
        assert!(tabu.is_empty());
        match advance(&cur, Rating::SoSo, &mut tabu, &idx, &cfg, &mut rng).unwrap() {
            Advance::Next { candidate, fallback: false } => {
                let d = euclidean(&candidate.z, &cur.z);
                assert!(d > cfg.soso_band.0 && d < cfg.soso_band.1, "{d}");
            }
            other => panic!("{other:?}"),
        }
        match advance(&cur, Rating::Bad, &mut tabu, &idx, &cfg, &mut rng).unwrap() {
            Advance::Next { candidate, .. } => assert!(euclidean(&candidate.z, &cur.z) > cfg.bad_min),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_band_falls_back_to_nearest() {
        let idx = LatentIndex::new(vec![(vec![0.0], 0), (vec![100.0], 1), (vec![300.0], 0)]).unwrap();
        let cfg = InitConfig::from_avg_distance(8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tabu = TabuList::new(5);
        match advance(&idx.get(0), Rating::SoSo, &mut tabu, &idx, &cfg, &mut rng).unwrap() {
            Advance::Next { candidate, fallback } => {
                assert!(fallback);
                assert_eq!(candidate.index, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn initializer_rejects_after_acceptance() {
        let idx = line_index(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Initializer::start(&idx, InitConfig::from_avg_distance(8.0).unwrap(), &mut rng).unwrap();
        init.rate(Rating::Good, &idx, &mut rng).unwrap();
        assert_eq!(init.rate(Rating::Bad, &idx, &mut rng), Err(InitError::AlreadyAccepted));
        assert_eq!("So-so".parse::<Rating>().unwrap(), Rating::SoSo);
        assert!("meh".parse::<Rating>().is_err());
        assert!(Rating::Good > Rating::SoSo && Rating::SoSo > Rating::Bad);
    }
}
