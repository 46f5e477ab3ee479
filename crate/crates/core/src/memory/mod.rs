//! Per-agent memory: a session-scoped working window plus persistent
//! semantic and episodic stores searched by cosine similarity.

pub mod controller;
pub mod embed;
pub mod working;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::MemoryError;
use crate::gateway::Gateway;

pub use controller::{controller_prompt, controller_schema, StoreAction, StoreDecision, CONTROLLER_HEADER};
pub use embed::{cosine, Embedding, StubEmbedder};
pub use working::{WorkingEntry, WorkingMemory, DEFAULT_WINDOW};

pub const DEFAULT_TOP_K: usize = 4;
pub const SIMILARITY_FLOOR: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Semantic,
    Episodic,
}

impl Tier {
    pub const ALL: [Tier; 2] = [Tier::Semantic, Tier::Episodic];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Semantic => "semantic",
            Tier::Episodic => "episodic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub record_id: String,
    pub namespace: String,
    pub tier: Tier,
    pub text: String,
    pub embedding: Embedding,
    /// Logical time; unique and increasing across the whole store.
    pub created_at: u64,
    pub session_id: String,
    pub source_turn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record: MemoryRecord,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub records: Vec<ScoredRecord>,
    pub query_text: String,
}

impl RetrievalResult {
    pub fn empty(query: &str) -> Self {
        Self {
            records: Vec::new(),
            query_text: query.to_string(),
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.record.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Scores every record against `query`, drops those under `floor`, and
/// returns the best `top_k` by descending score, newer first on ties.
pub fn rank(query: &Embedding, records: &[MemoryRecord], top_k: usize, floor: f64) -> Vec<ScoredRecord> {
    let mut scored: Vec<ScoredRecord> = records
        .iter()
        .map(|r| ScoredRecord {
            score: query.cosine(&r.embedding),
            record: r.clone(),
        })
        .filter(|s| s.score >= floor)
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.record.created_at.cmp(&a.record.created_at))
    });
    scored.truncate(top_k);
    scored
}

#[derive(Debug, Default)]
struct Namespace {
    records: Vec<MemoryRecord>,
    texts: HashSet<String>,
    disabled: bool,
}

/// Long-term stores for all namespaces of a session.
///
/// Writes to one namespace are serialized by its lock; reads share it.
pub struct MemoryStore {
    data_dir: Option<PathBuf>,
    embedder: Arc<dyn Gateway>,
    spaces: RwLock<BTreeMap<String, Arc<RwLock<Namespace>>>>,
    clock: AtomicU64,
    floor: f64,
}

impl MemoryStore {
    /// A store that lives only as long as the process.
    pub fn in_memory(embedder: Arc<dyn Gateway>) -> Self {
        Self {
            data_dir: None,
            embedder,
            spaces: RwLock::new(BTreeMap::new()),
            clock: AtomicU64::new(1),
            floor: SIMILARITY_FLOOR,
        }
    }

    /// Opens `data_dir`, loading every namespace log found under it.
    pub fn open(data_dir: impl Into<PathBuf>, embedder: Arc<dyn Gateway>) -> Result<Self, MemoryError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir)?;
        let store = Self {
            data_dir: Some(data_dir.clone()),
            ..Self::in_memory(embedder)
        };
        let mut dirs: Vec<_> = fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .collect();
        dirs.sort();
        let mut latest = 0;
        for ns in dirs {
            let space = load_namespace(&data_dir, &ns, store.embedder.dimension())?;
            latest = space.records.iter().map(|r| r.created_at).max().unwrap_or(0).max(latest);
            store.spaces.write().expect("memory lock poisoned").insert(ns, Arc::new(RwLock::new(space)));
        }
        store.clock.store(latest + 1, Ordering::SeqCst);
        Ok(store)
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn embedder(&self) -> &Arc<dyn Gateway> {
        &self.embedder
    }

    /// Makes `namespace` known to the store; existing records are kept.
    pub fn register(&self, namespace: &str) -> Result<(), MemoryError> {
        if !valid_namespace(namespace) {
            return Err(MemoryError::InvalidArgument(format!("invalid namespace {namespace:?}")));
        }
        if let Some(dir) = &self.data_dir {
            fs::create_dir_all(dir.join(namespace))?;
        }
        self.spaces
            .write()
            .expect("memory lock poisoned")
            .entry(namespace.to_string())
            .or_default();
        Ok(())
    }

    pub fn namespaces(&self) -> Vec<String> {
        self.spaces.read().expect("memory lock poisoned").keys().cloned().collect()
    }

    fn space(&self, namespace: &str) -> Result<Arc<RwLock<Namespace>>, MemoryError> {
        self.spaces
            .read()
            .expect("memory lock poisoned")
            .get(namespace)
            .cloned()
            .ok_or_else(|| MemoryError::NotFound(namespace.to_string()))
    }

    pub fn set_longterm_enabled(&self, namespace: &str, enabled: bool) -> Result<(), MemoryError> {
        self.space(namespace)?.write().expect("memory lock poisoned").disabled = !enabled;
        Ok(())
    }

    pub fn longterm_enabled(&self, namespace: &str) -> Result<bool, MemoryError> {
        Ok(!self.space(namespace)?.read().expect("memory lock poisoned").disabled)
    }

    /// All records of `namespace` in creation order, regardless of the toggle.
    pub fn records(&self, namespace: &str) -> Result<Vec<MemoryRecord>, MemoryError> {
        Ok(self.space(namespace)?.read().expect("memory lock poisoned").records.clone())
    }

    pub fn count(&self, namespace: &str) -> Result<usize, MemoryError> {
        Ok(self.space(namespace)?.read().expect("memory lock poisoned").records.len())
    }

    pub fn contains_text(&self, namespace: &str, text: &str) -> Result<bool, MemoryError> {
        Ok(self.space(namespace)?.read().expect("memory lock poisoned").texts.contains(text))
    }

    /// Embeds and appends `text`. Returns `None` when the namespace already
    /// holds a record with exactly this text.
    pub fn append(
        &self,
        namespace: &str,
        tier: Tier,
        text: &str,
        session_id: &str,
        source_turn: u64,
    ) -> Result<Option<MemoryRecord>, MemoryError> {
        let space = self.space(namespace)?;
        if text.trim().is_empty() {
            return Err(MemoryError::InvalidArgument("empty memory text".into()));
        }
        if space.read().expect("memory lock poisoned").texts.contains(text) {
            return Ok(None);
        }
        let embedding = self.embedder.embed(text)?;
        if !embedding.is_unit() {
            return Err(MemoryError::InvalidEmbedding(format!("norm {}", embedding.norm())));
        }
        let mut guard = space.write().expect("memory lock poisoned");
        if guard.texts.contains(text) {
            return Ok(None);
        }
        let record = MemoryRecord {
            record_id: format!("{namespace}-{:06}", guard.records.len() + 1),
            namespace: namespace.to_string(),
            tier,
            text: text.to_string(),
            embedding,
            created_at: self.clock.fetch_add(1, Ordering::SeqCst),
            session_id: session_id.to_string(),
            source_turn,
        };
        if let Some(dir) = &self.data_dir {
            append_line(&log_path(dir, namespace, tier), &record)?;
        }
        guard.texts.insert(record.text.clone());
        guard.records.push(record.clone());
        Ok(Some(record))
    }

    /// Top `top_k` records of both tiers by similarity to `query`.
    pub fn retrieve(&self, namespace: &str, query: &str, top_k: usize) -> Result<RetrievalResult, MemoryError> {
        if top_k == 0 {
            return Err(MemoryError::InvalidArgument("top_k must be at least 1".into()));
        }
        let space = self.space(namespace)?;
        {
            let guard = space.read().expect("memory lock poisoned");
            if guard.disabled || guard.records.is_empty() {
                return Ok(RetrievalResult::empty(query));
            }
        }
        let q = self.embedder.embed(query)?;
        let guard = space.read().expect("memory lock poisoned");
        Ok(RetrievalResult {
            records: rank(&q, &guard.records, top_k, self.floor),
            query_text: query.to_string(),
        })
    }

    /// Fresh working memory for a new session. Long-term stores are untouched.
    pub fn reset_session(&self, namespace: &str, session_id: &str, capacity: usize) -> Result<WorkingMemory, MemoryError> {
        self.space(namespace)?;
        Ok(WorkingMemory::new(session_id, capacity))
    }

    /// Deletes every record of `namespace`, on disk as well. Returns how many
    /// were removed.
    pub fn purge(&self, namespace: &str) -> Result<usize, MemoryError> {
        let space = self.space(namespace)?;
        let mut guard = space.write().expect("memory lock poisoned");
        if let Some(dir) = &self.data_dir {
            for tier in Tier::ALL {
                let p = log_path(dir, namespace, tier);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        let n = guard.records.len();
        guard.records.clear();
        guard.texts.clear();
        Ok(n)
    }
}

pub fn valid_namespace(ns: &str) -> bool {
    !ns.is_empty() && ns.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn log_path(data_dir: &Path, namespace: &str, tier: Tier) -> PathBuf {
    data_dir.join(namespace).join(format!("{}.log", tier.name()))
}

fn append_line(path: &Path, record: &MemoryRecord) -> Result<(), MemoryError> {
    let mut line = serde_json::to_vec(record).map_err(|e| MemoryError::InvalidArgument(e.to_string()))?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.flush()?;
    Ok(())
}

fn load_namespace(dir: &Path, namespace: &str, dimension: usize) -> Result<Namespace, MemoryError> {
    let mut space = Namespace::default();
    for tier in Tier::ALL {
        let path = log_path(dir, namespace, tier);
        if !path.exists() {
            continue;
        }
        for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| MemoryError::Corrupt {
                path: path.clone(),
                line: i + 1,
                message,
            };
            let r: MemoryRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            if r.namespace != namespace || r.tier != tier {
                return Err(corrupt(format!("record {} belongs to {}/{}", r.record_id, r.namespace, r.tier.name())));
            }
            if r.embedding.dimension() != dimension {
                return Err(corrupt(format!(
                    "embedding dimension {} does not match provider dimension {dimension}",
                    r.embedding.dimension()
                )));
            }
            space.texts.insert(r.text.clone());
            space.records.push(r);
        }
    }
    space.records.sort_by_key(|r| r.created_at);
    Ok(space)
}
