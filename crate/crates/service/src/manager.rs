use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use lru::LruCache;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tactile::corpus::LabeledDataset;
use tactile::dsp::{self, Spectrogram};
use tactile::dss::{DssConfig, DssError};
use tactile::init::{self, InitConfig, LatentIndex, Rating};
use tactile::model::TextureGan;

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::session::{Endpoint, Event, Op, Phase, Session};
use crate::store::{SavedArtifact, Store};
use crate::targets::{Manifest, TargetSummary, Targets};

/// Events returned by `/state`.
pub const EVENT_TAIL: usize = 10;

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Slider positions are resolved to 1/1000; previews and commits both use
/// the rounded value, so a commit lands exactly where the preview played.
pub fn quantize_w(w: f64) -> Result<(f64, i32)> {
    if !(-1.0..=1.0).contains(&w) {
        return Err(DssError::SliderRange(w).into());
    }
    let q = (w * 1000.0).round();
    Ok((q / 1000.0, q as i32))
}

/// Block-averages `s` onto at most `rows x cols` cells.
pub fn downsample(s: &Spectrogram, rows: usize, cols: usize) -> (usize, usize, Vec<f64>) {
    let (nf, nt) = s.shape();
    let (rows, cols) = (rows.clamp(1, nf), cols.clamp(1, nt));
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (f0, f1) = (i * nf / rows, (i + 1) * nf / rows);
        for j in 0..cols {
            let (t0, t1) = (j * nt / cols, (j + 1) * nt / cols);
            let mut sum = 0.0;
            for f in f0..f1 {
                for t in t0..t1 {
                    sum += s.get(f, t);
                }
            }
            out.push(sum / ((f1 - f0) * (t1 - t0)) as f64);
        }
    }
    (rows, cols, out)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub target_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Checked against the loaded checkpoint.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub step_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub index: usize,
    pub label: usize,
    pub label_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReply {
    pub session_id: String,
    pub phase: Phase,
    pub iteration: usize,
    /// Present while initializing.
    pub candidate: Option<CandidateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: String,
    pub target_id: String,
    pub phase: Phase,
    pub iteration: usize,
    pub epoch: u32,
    pub label: usize,
    pub label_name: String,
    pub seed: u64,
    pub ratings: usize,
    pub candidate: Option<CandidateSummary>,
    /// Committed slider positions of the current epoch.
    pub history: Vec<f64>,
    pub grid: [usize; 2],
    pub magnitudes: Vec<f64>,
    pub artifacts: Vec<String>,
    pub events: Vec<Event>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

type CacheKey = (String, u32, usize, i32);

pub struct SessionManager {
    model: TextureGan,
    checkpoint_hash: String,
    index: LatentIndex,
    init: InitConfig,
    dss: DssConfig,
    targets: Targets,
    store: Store,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<RwLock<Session>>>>,
    cache: Mutex<LruCache<CacheKey, Arc<Vec<u8>>>>,
}

impl SessionManager {
    /// Opens the store under `config.data_dir` and recovers persisted sessions.
    pub fn new(model: TextureGan, index: LatentIndex, targets: Targets, config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        if index.dim() != model.latent_dim() {
            return Err(ServiceError::Config(format!(
                "index has latent dimension {}, checkpoint {}",
                index.dim(),
                model.latent_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.index_seed);
        let dis_avg = init::estimate_avg_distance(&index, config.index_pairs, &mut rng)?;
        let init = InitConfig::from_avg_distance(dis_avg)?;
        let dss = DssConfig::with_unit(model.latent_dim(), init.step);
        let store = Store::open(&config.data_dir)?;
        let cache = LruCache::new(NonZeroUsize::new(config.slider_cache).expect("validated"));
        let mgr = Self {
            checkpoint_hash: model.content_hash(),
            model,
            index,
            init,
            dss,
            targets,
            store,
            config,
            sessions: RwLock::new(HashMap::new()),
            cache: Mutex::new(cache),
        };
        mgr.recover()?;
        Ok(mgr)
    }

    /// Loads checkpoint, dataset and target manifest named by `config`.
    pub fn from_config(config: ServiceConfig) -> Result<Self> {
        let model = TextureGan::load_checkpoint(&config.checkpoint)?;
        let data = LabeledDataset::load(&config.dataset)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let index = LatentIndex::from_model(&model, &data, &all)?;
        let targets = Targets::from_manifest(&model, &Manifest::load(&config.targets)?)?;
        Self::new(model, index, targets, config)
    }

    fn recover(&self) -> Result<()> {
        let mut map = self.sessions.write().expect("session map poisoned");
        for id in self.store.session_ids()? {
            let (mut s, tail) = self.store.read_session(&id)?;
            for e in tail {
                let replayed = s.apply(e.op.clone(), e.at_ms, &self.model, &self.index)?;
                if *replayed != e {
                    return Err(ServiceError::Corrupt(format!("session {id}: replay of event {} diverged", e.seq)));
                }
            }
            self.store.write_snapshot(&s)?;
            tracing::info!(session = %id, events = s.events.len(), "recovered session");
            map.insert(id, Arc::new(RwLock::new(s)));
        }
        Ok(())
    }

    pub fn model(&self) -> &TextureGan {
        &self.model
    }

    pub fn init_config(&self) -> &InitConfig {
        &self.init
    }

    pub fn dss_config(&self) -> &DssConfig {
        &self.dss
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn targets(&self) -> Vec<TargetSummary> {
        self.targets.summaries()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    fn handle(&self, id: &str) -> Result<Arc<RwLock<Session>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound { kind: "session", id: id.into() })
    }

    /// Consistent copy of one session.
    pub fn session(&self, id: &str) -> Result<Session> {
        Ok(self.handle(id)?.read().expect("session poisoned").clone())
    }

    fn label_name(&self, label: usize) -> String {
        self.model.class_names.get(label).cloned().unwrap_or_default()
    }

    fn candidate_summary(&self, s: &Session) -> Option<CandidateSummary> {
        (s.phase == Phase::Initializing).then(|| CandidateSummary {
            index: s.candidate.index,
            label: s.candidate.label,
            label_name: self.label_name(s.candidate.label),
        })
    }

    fn reply(&self, s: &Session) -> SessionReply {
        SessionReply { session_id: s.id.clone(), phase: s.phase, iteration: s.iteration(), candidate: self.candidate_summary(s) }
    }

    pub fn create(&self, req: CreateRequest) -> Result<SessionReply> {
        let target = self.targets.get(&req.target_id)?;
        if let Some(d) = req.latent_dim {
            if d != self.model.latent_dim() {
                return Err(ServiceError::Conflict(format!(
                    "requested latent dimension {d}, checkpoint has {}",
                    self.model.latent_dim()
                )));
            }
        }
        if target.segment.shape() != self.model.segment_shape() {
            return Err(ServiceError::Conflict(format!(
                "target segment {:?} does not match checkpoint {:?}",
                target.segment.shape(),
                self.model.segment_shape()
            )));
        }
        let mut dss = self.dss;
        if let Some(s) = req.step_scale {
            dss.step_scale = s;
            dss.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        }
        let uuid = uuid::Uuid::new_v4();
        let seed = req.seed.unwrap_or_else(|| uuid.as_u64_pair().0);
        let id = uuid.simple().to_string();
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Session::create(id.clone(), target.id.clone(), seed, self.init, dss, &self.index, rng, now_ms())?;
        self.store.write_snapshot(&s)?;
        let reply = self.reply(&s);
        self.sessions.write().expect("session map poisoned").insert(id, Arc::new(RwLock::new(s)));
        Ok(reply)
    }

    /// Serialized mutation: applied to a copy, persisted, then published.
    fn mutate(&self, id: &str, op: Op) -> Result<Session> {
        let handle = self.handle(id)?;
        let mut guard = handle.write().expect("session poisoned");
        let mut next = guard.clone();
        let event = next.apply(op, now_ms(), &self.model, &self.index)?.clone();
        self.store.append_event(id, &event)?;
        if next.events.len() % self.config.snapshot_every == 0 {
            self.store.write_snapshot(&next)?;
        }
        *guard = next.clone();
        Ok(next)
    }

    pub fn rate(&self, id: &str, rating: Rating) -> Result<SessionReply> {
        Ok(self.reply(&self.mutate(id, Op::Rate { rating })?))
    }

    pub fn commit(&self, id: &str, w: f64) -> Result<SessionReply> {
        let (w, _) = quantize_w(w)?;
        Ok(self.reply(&self.mutate(id, Op::Commit { w })?))
    }

    pub fn restart(&self, id: &str) -> Result<SessionReply> {
        Ok(self.reply(&self.mutate(id, Op::Restart)?))
    }

    pub fn abandon(&self, id: &str) -> Result<SessionReply> {
        Ok(self.reply(&self.mutate(id, Op::Abandon)?))
    }

    /// Vocodes the current base point at full quality and records it.
    /// With `finish` the session moves to Saved.
    pub fn save(&self, id: &str, finish: bool) -> Result<SavedArtifact> {
        let handle = self.handle(id)?;
        let mut guard = handle.write().expect("session poisoned");
        guard.check(Endpoint::Save)?;
        let dss = guard.dss()?;
        let (z, label) = (dss.map.base_z.clone(), dss.label);
        let spec = self.model.generate(&z, label)?;
        let wav = self.render_spec(&spec, self.config.save_iterations)?;
        let artifact = SavedArtifact {
            id: uuid::Uuid::new_v4().simple().to_string(),
            session_id: guard.id.clone(),
            target_id: guard.target_id.clone(),
            iteration: dss.iteration,
            epoch: guard.epoch,
            z,
            label,
            n_freq: spec.n_freq(),
            n_time: spec.n_time(),
            magnitudes: spec.magnitudes().to_vec(),
            vocoder_iterations: self.config.save_iterations,
            checkpoint_hash: self.checkpoint_hash.clone(),
            created_ms: now_ms(),
        };
        self.store.write_artifact(&artifact, &wav)?;
        let mut next = guard.clone();
        let event = next.apply(Op::Save { artifact_id: artifact.id.clone(), finish }, artifact.created_ms, &self.model, &self.index)?.clone();
        self.store.append_event(id, &event)?;
        if next.events.len() % self.config.snapshot_every == 0 {
            self.store.write_snapshot(&next)?;
        }
        *guard = next;
        Ok(artifact)
    }

    pub fn artifact(&self, id: &str) -> Result<SavedArtifact> {
        self.store.read_artifact(id)
    }

    pub fn artifact_wav(&self, id: &str) -> Result<Vec<u8>> {
        self.store.read_artifact_wav(id)
    }

    /// Re-vocodes an artifact from its latent point and label.
    pub fn regenerate_artifact(&self, a: &SavedArtifact) -> Result<Vec<u8>> {
        self.render_spec(&self.model.generate(&a.z, a.label)?, a.vocoder_iterations)
    }

    fn render_spec(&self, spec: &Spectrogram, iterations: usize) -> Result<Vec<u8>> {
        Ok(dsp::encode_wav(&self.model.vocode(spec, iterations)?)?)
    }

    fn render_cached(&self, key: CacheKey, z: &[f64], label: usize) -> Result<Arc<Vec<u8>>> {
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let bytes = Arc::new(self.render_spec(&self.model.generate(z, label)?, self.config.preview_iterations)?);
        self.cache.lock().expect("cache poisoned").put(key, bytes.clone());
        Ok(bytes)
    }

    pub fn target_wav(&self, id: &str) -> Result<Vec<u8>> {
        let s = self.session(id)?;
        Ok(self.targets.get(&s.target_id)?.wav.clone())
    }

    /// The presented candidate; once optimizing this is the slider at `w = 0`.
    pub fn candidate_wav(&self, id: &str) -> Result<Arc<Vec<u8>>> {
        let s = self.session(id)?;
        s.check(Endpoint::CandidateWav)?;
        match &s.dss {
            Some(d) => self.render_cached((s.id.clone(), s.epoch, d.iteration, 0), &d.map.base_z, d.label),
            None => {
                let bytes = self.render_spec(&self.model.generate(&s.candidate.z, s.candidate.label)?, self.config.preview_iterations)?;
                Ok(Arc::new(bytes))
            }
        }
    }

    /// Never changes the session.
    pub fn slider_wav(&self, id: &str, w: f64) -> Result<Arc<Vec<u8>>> {
        let s = self.session(id)?;
        s.check(Endpoint::SliderWav)?;
        let (w, q) = quantize_w(w)?;
        let d = s.dss()?;
        let z = d.latent_at(w)?;
        self.render_cached((s.id.clone(), s.epoch, d.iteration, q), &z, d.label)
    }

    pub fn state(&self, id: &str) -> Result<StateView> {
        let s = self.session(id)?;
        let label = s.dss.as_ref().map_or(s.label, |d| d.label);
        let spec = self.model.generate(s.current_z(), label)?;
        let [rows, cols] = self.config.state_grid;
        let (rows, cols, magnitudes) = downsample(&spec, rows, cols);
        Ok(StateView {
            session_id: s.id.clone(),
            target_id: s.target_id.clone(),
            phase: s.phase,
            iteration: s.iteration(),
            epoch: s.epoch,
            label,
            label_name: self.label_name(label),
            seed: s.seed,
            ratings: s.ratings,
            candidate: self.candidate_summary(&s),
            history: s.dss.as_ref().map_or_else(Vec::new, |d| d.history.iter().map(|h| h.w).collect()),
            grid: [rows, cols],
            magnitudes,
            artifacts: s.artifacts.clone(),
            events: s.events[s.events.len().saturating_sub(EVENT_TAIL)..].to_vec(),
            created_ms: s.created_ms,
            updated_ms: s.updated_ms,
        })
    }
}
