//! Session state machine. Every mutation goes through [`Session::apply`],
//! which is deterministic given the session, the operation and its
//! timestamp; replaying logged operations rebuilds the state exactly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tactile::dss::{DssConfig, DssState};
use tactile::init::{self, Advance, Candidate, InitConfig, InitError, LatentIndex, Rating, TabuList};
use tactile::model::TextureGan;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Initializing,
    Optimizing,
    Saved,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    State,
    TargetWav,
    CandidateWav,
    Rate,
    SliderWav,
    Commit,
    Save,
    Restart,
    Abandon,
}

impl Endpoint {
    pub const ALL: [Endpoint; 9] = [
        Endpoint::State,
        Endpoint::TargetWav,
        Endpoint::CandidateWav,
        Endpoint::Rate,
        Endpoint::SliderWav,
        Endpoint::Commit,
        Endpoint::Save,
        Endpoint::Restart,
        Endpoint::Abandon,
    ];

    pub fn allowed_in(self, phase: Phase) -> bool {
        use Phase::*;
        match self {
            Endpoint::State | Endpoint::TargetWav => true,
            Endpoint::CandidateWav => matches!(phase, Initializing | Optimizing | Saved),
            Endpoint::Rate => phase == Initializing,
            Endpoint::SliderWav | Endpoint::Commit | Endpoint::Save | Endpoint::Restart => phase == Optimizing,
            Endpoint::Abandon => matches!(phase, Initializing | Optimizing),
        }
    }
}

/// State-changing requests, as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Rate { rating: Rating },
    Commit { w: f64 },
    /// The artifact is produced by the caller before the op is applied.
    Save { artifact_id: String, finish: bool },
    Restart,
    Abandon,
}

impl Op {
    pub fn endpoint(&self) -> Endpoint {
        match self {
            Op::Rate { .. } => Endpoint::Rate,
            Op::Commit { .. } => Endpoint::Commit,
            Op::Save { .. } => Endpoint::Save,
            Op::Restart => Endpoint::Restart,
            Op::Abandon => Endpoint::Abandon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub at_ms: u64,
    #[serde(flatten)]
    pub op: Op,
    /// Human-readable outcome.
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub target_id: String,
    pub phase: Phase,
    pub seed: u64,
    /// Conditioning label: the current candidate's during initialization,
    /// the accepted candidate's afterwards.
    pub label: usize,
    pub init: InitConfig,
    pub tabu: TabuList,
    pub candidate: Candidate,
    pub ratings: usize,
    pub dss_config: DssConfig,
    pub dss: Option<DssState>,
    /// Number of restarts; distinguishes iteration numbers across restarts.
    pub epoch: u32,
    pub rng: ChaCha8Rng,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub events: Vec<Event>,
    pub artifacts: Vec<String>,
}

/// A fresh candidate; an exhausted draw clears the tabu list and retries.
fn propose(index: &LatentIndex, tabu: &mut TabuList, cfg: &InitConfig, rng: &mut ChaCha8Rng) -> Result<Candidate> {
    match init::propose_initial(index, tabu, cfg, rng) {
        Err(InitError::Exhausted(_)) => Ok(init::propose_initial(index, tabu, cfg, rng)?),
        other => Ok(other?),
    }
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        id: String,
        target_id: String,
        seed: u64,
        init: InitConfig,
        dss_config: DssConfig,
        index: &LatentIndex,
        mut rng: ChaCha8Rng,
        now_ms: u64,
    ) -> Result<Self> {
        let mut tabu = TabuList::new(init.tabu_capacity);
        let candidate = propose(index, &mut tabu, &init, &mut rng)?;
        Ok(Self {
            id,
            target_id,
            phase: Phase::Initializing,
            seed,
            label: candidate.label,
            init,
            tabu,
            candidate,
            ratings: 0,
            dss_config,
            dss: None,
            epoch: 0,
            rng,
            created_ms: now_ms,
            updated_ms: now_ms,
            events: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.dss.as_ref().map_or(0, |d| d.iteration)
    }

    /// Latent point currently presented: the candidate, or the slider base.
    pub fn current_z(&self) -> &[f64] {
        match &self.dss {
            Some(d) => &d.map.base_z,
            None => &self.candidate.z,
        }
    }

    pub fn check(&self, endpoint: Endpoint) -> Result<()> {
        if endpoint.allowed_in(self.phase) {
            Ok(())
        } else {
            Err(ServiceError::Phase { endpoint, phase: self.phase })
        }
    }

    pub fn dss(&self) -> Result<&DssState> {
        self.dss.as_ref().ok_or(ServiceError::Phase { endpoint: Endpoint::SliderWav, phase: self.phase })
    }

    /// Applies `op` and appends its event. The session is unchanged on error.
    pub fn apply(&mut self, op: Op, now_ms: u64, model: &TextureGan, index: &LatentIndex) -> Result<&Event> {
        self.check(op.endpoint())?;
        let mut next = self.clone();
        let note = next.transition(&op, model, index)?;
        next.updated_ms = now_ms;
        next.events.push(Event { seq: self.events.len(), at_ms: now_ms, op, note });
        *self = next;
        Ok(self.events.last().expect("just pushed"))
    }

    fn transition(&mut self, op: &Op, model: &TextureGan, index: &LatentIndex) -> Result<String> {
        match op {
            Op::Rate { rating } => {
                self.ratings += 1;
                let step = match init::advance(&self.candidate, *rating, &mut self.tabu, index, &self.init, &mut self.rng) {
                    Err(InitError::Exhausted(_)) => {
                        Advance::Next { candidate: propose(index, &mut self.tabu, &self.init, &mut self.rng)?, fallback: true }
                    }
                    other => other?,
                };
                match step {
                    Advance::Accepted(c) => {
                        self.label = c.label;
                        self.dss = Some(DssState::new(model, c.z.clone(), c.label, self.dss_config)?);
                        self.phase = Phase::Optimizing;
                        Ok(format!("{rating}: accepted index {} label {}", c.index, c.label))
                    }
                    Advance::Next { candidate, fallback } => {
                        let note = format!(
                            "{rating}: next index {} label {}{}",
                            candidate.index,
                            candidate.label,
                            if fallback { " (fallback)" } else { "" }
                        );
                        self.label = candidate.label;
                        self.candidate = candidate;
                        Ok(note)
                    }
                }
            }
            Op::Commit { w } => {
                let next = self.dss()?.commit(model, *w)?;
                let k = next.iteration;
                self.dss = Some(next);
                Ok(format!("commit w={w} -> iteration {k}"))
            }
            Op::Save { artifact_id, finish } => {
                self.artifacts.push(artifact_id.clone());
                if *finish {
                    self.phase = Phase::Saved;
                }
                Ok(format!("saved artifact {artifact_id}"))
            }
            Op::Restart => {
                self.dss = None;
                self.epoch += 1;
                self.tabu.clear();
                self.candidate = propose(index, &mut self.tabu, &self.init, &mut self.rng)?;
                self.label = self.candidate.label;
                self.phase = Phase::Initializing;
                Ok(format!("restart -> index {} label {}", self.candidate.index, self.candidate.label))
            }
            Op::Abandon => {
                self.phase = Phase::Abandoned;
                Ok("abandoned".into())
            }
        }
    }
}
