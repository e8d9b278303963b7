//! Shared sidecar state: the live model and knowledge snapshot, open trace
//! sessions, and the review queue.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::sync::Arc;
use std::time::Duration;

use eager_core::detection::{DetectionConfig, DetectionVerdict, TraceSession};
use eager_core::knowledge::{load_kb, save_kb, KnowledgeBase, KnowledgeError};
use eager_core::mitigation::{AgentRuntime, MitigationConfig, TimeoutRuntime};
use eager_core::rca::{NearestNeighborAnalyzer, ReviewQueue};
use eager_core::representation::{load_model, RepresentationError, RepresentationModel};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{KbFlush, ServiceConfig};
use crate::runtime::HttpAgentRuntime;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("cannot load model: {0}")]
    Model(#[from] RepresentationError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("cannot open session log: {0}")]
    SessionLog(std::io::Error),
}

/// Model and knowledge that are read together and replaced together.
#[derive(Debug)]
pub struct Snapshot {
    pub model: Arc<RepresentationModel>,
    pub kb: Arc<KnowledgeBase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbSizes {
    pub fine: usize,
    pub coarse: usize,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub detection: DetectionConfig,
    pub mitigation: MitigationConfig,
    pub queue: ReviewQueue,
    pub analyzer: NearestNeighborAnalyzer,
    pub runtime: Option<Arc<dyn AgentRuntime>>,
    snapshot: RwLock<Arc<Snapshot>>,
    kb_writer: Mutex<()>,
    sessions: Mutex<HashMap<String, Arc<Mutex<TraceSession>>>>,
    session_log: Option<Mutex<BufWriter<File>>>,
}

fn load_snapshot(config: &ServiceConfig) -> Result<Snapshot, StateError> {
    let model = load_model(&config.model_path)?;
    let kb = if config.kb_path.exists() {
        let kb = load_kb(&config.kb_path)?;
        kb.check_version(model.version)?;
        kb
    } else {
        tracing::warn!(path = %config.kb_path.display(), "knowledge base not found; starting empty");
        KnowledgeBase::for_model(&model)
    };
    Ok(Snapshot {
        model: Arc::new(model),
        kb: Arc::new(kb),
    })
}

impl AppState {
    /// Loads the model and knowledge named in `config`. The agent runtime is
    /// the HTTP callback at `mitigation.runtime_url`, if configured.
    pub fn from_config(config: ServiceConfig) -> Result<Self, StateError> {
        let runtime = config
            .mitigation
            .runtime_url
            .clone()
            .map(|url| Arc::new(HttpAgentRuntime::new(url)) as Arc<dyn AgentRuntime>);
        Self::with_runtime(config, runtime)
    }

    /// As [`AppState::from_config`] with an explicit runtime (every call is
    /// still bounded by `mitigation.call_timeout_ms`).
    pub fn with_runtime(
        config: ServiceConfig,
        runtime: Option<Arc<dyn AgentRuntime>>,
    ) -> Result<Self, StateError> {
        let snapshot = load_snapshot(&config)?;
        let session_log = match &config.persistence.session_log {
            Some(path) => Some(Mutex::new(BufWriter::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(StateError::SessionLog)?,
            ))),
            None => None,
        };
        let detection = config.detection_config();
        let mitigation = MitigationConfig {
            budget: config.mitigation.budget,
            call_timeout_ms: config.mitigation.call_timeout_ms,
            ..Default::default()
        };
        let timeout = Duration::from_millis(config.mitigation.call_timeout_ms);
        let runtime =
            runtime.map(|r| Arc::new(TimeoutRuntime::new(r, timeout)) as Arc<dyn AgentRuntime>);
        Ok(Self {
            detection,
            mitigation,
            queue: ReviewQueue::new(),
            analyzer: NearestNeighborAnalyzer::new(detection),
            runtime,
            snapshot: RwLock::new(Arc::new(snapshot)),
            kb_writer: Mutex::new(()),
            sessions: Mutex::new(HashMap::new()),
            session_log,
            config,
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    pub fn kb_sizes(&self) -> KbSizes {
        let snap = self.snapshot();
        KbSizes {
            fine: snap.kb.fine().len(),
            coarse: snap.kb.coarse().len(),
        }
    }

    /// Re-reads model and knowledge from disk and swaps them in atomically.
    /// In-flight requests finish on the snapshot they started with.
    pub fn reload(&self) -> Result<(), StateError> {
        let _w = self.kb_writer.lock();
        let snap = load_snapshot(&self.config)?;
        *self.snapshot.write() = Arc::new(snap);
        Ok(())
    }

    /// Applies one knowledge write under the single-writer lock.
    ///
    /// `f` works on a copy of the current knowledge and returns its result
    /// plus whether it changed anything. Changes are published atomically and,
    /// with `kb_flush = on_write`, saved before returning.
    pub fn update_kb<T, E>(
        &self,
        f: impl FnOnce(&mut KnowledgeBase, &RepresentationModel) -> Result<(T, bool), E>,
    ) -> Result<T, E>
    where
        E: From<KnowledgeError>,
    {
        let _w = self.kb_writer.lock();
        let snap = self.snapshot();
        let mut kb = (*snap.kb).clone();
        let (out, changed) = f(&mut kb, &snap.model)?;
        if changed {
            *self.snapshot.write() = Arc::new(Snapshot {
                model: snap.model.clone(),
                kb: Arc::new(kb),
            });
            if self.config.persistence.kb_flush == KbFlush::OnWrite {
                self.persist_locked()?;
            }
        }
        Ok(out)
    }

    /// Saves the current knowledge to `kb_path`.
    pub fn persist(&self) -> Result<(), KnowledgeError> {
        let _w = self.kb_writer.lock();
        self.persist_locked()
    }

    fn persist_locked(&self) -> Result<(), KnowledgeError> {
        save_kb(&self.snapshot().kb, &self.config.kb_path)
    }

    /// The open session for `trace_id`, created on first use.
    pub fn session_or_create(&self, trace_id: &str) -> Arc<Mutex<TraceSession>> {
        self.sessions
            .lock()
            .entry(trace_id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(TraceSession::new(trace_id))))
            .clone()
    }

    pub fn session(&self, trace_id: &str) -> Option<Arc<Mutex<TraceSession>>> {
        self.sessions.lock().get(trace_id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    /// Appends a verdict to the session log, if one is configured.
    pub fn log_verdict(&self, verdict: &DetectionVerdict) {
        if let Some(log) = &self.session_log {
            let mut log = log.lock();
            let line = serde_json::to_string(verdict).expect("verdicts serialize");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                tracing::error!(error = %e, "session log write failed");
            }
        }
    }
}
