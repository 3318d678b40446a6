//! Knowledge sources and the retrieval contract: encode a query, search the
//! configured indices, and dereference hits into per-modality result lists.
//!
//! A [`Retriever`] holds its model, knowledge source and indices behind a
//! single shared snapshot. Hot swaps replace the snapshot atomically; queries
//! already running keep the snapshot they started with.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::error::{Error, Result};
use crate::features::{load_features, FeatureManifest, FeatureSequence, Modality};
use crate::index::{Entry, Hit, IndexHandle, IndexKind, Scope};
use crate::synthdata::Split;

/// Locates one record inside a feature file.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub file: String,
    pub record: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeSource {
    pub name: String,
    /// Directory that image references are resolved against.
    pub base_dir: PathBuf,
    records: Vec<KnowledgeRecord>,
    by_id: HashMap<u64, usize>,
}

impl KnowledgeSource {
    pub fn new(name: impl Into<String>, records: Vec<KnowledgeRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.caption.is_none() && r.image.is_none() {
                return Err(Error::contract(format!("record {} has no payload", r.id)));
            }
            if by_id.insert(r.id, i).is_some() {
                return Err(Error::contract(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            base_dir: PathBuf::from("."),
            records,
            by_id,
        })
    }

    pub fn records(&self) -> &[KnowledgeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&KnowledgeRecord> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    /// Keeps only records of the given split.
    pub fn filter_split(&self, split: Split) -> Result<Self> {
        let mut ks = Self::new(
            format!("{}:{}", self.name, split.name()),
            self.records.iter().filter(|r| r.split == split).cloned().collect(),
        )?;
        ks.base_dir = self.base_dir.clone();
        Ok(ks)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let r: KnowledgeRecord = serde_json::from_str(trimmed)
                    .map_err(|e| Error::format(offset, format!("bad knowledge record: {e}")))?;
                records.push(r);
            }
            offset += line.len() as u64;
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut ks = Self::new(name, records)?;
        ks.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ks)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads the features of every referenced image, in record order.
    /// The same image referenced twice is returned once, under the first id.
    pub fn image_features(&self) -> Result<Vec<(u64, ImageRef, FeatureSequence)>> {
        let mut files: HashMap<String, Vec<FeatureSequence>> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            let Some(img) = &r.image else { continue };
            if !seen.insert(img.clone()) {
                continue;
            }
            if !files.contains_key(&img.file) {
                let f = load_features(
                    self.base_dir.join(&img.file),
                    FeatureManifest {
                        modality: Some(Modality::Image),
                        raw_dim: None,
                    },
                )?;
                files.insert(img.file.clone(), f.records);
            }
            let seq = files[&img.file].get(img.record as usize).ok_or_else(|| {
                Error::DataIntegrity(format!(
                    "record {} points at {}#{} which does not exist",
                    r.id, img.file, img.record
                ))
            })?;
            out.push((r.id, img.clone(), seq.clone()));
        }
        Ok(out)
    }
}

/// Encodes a knowledge source into an index. `scope` selects captions,
/// images, or both.
pub fn build_ks_index(
    model: &AlignmentModel,
    ks: &KnowledgeSource,
    scope: Scope,
    kind: IndexKind,
) -> Result<IndexHandle> {
    let mut entries = Vec::new();
    if matches!(scope, Scope::Single(Modality::Text) | Scope::Joint) {
        for r in ks.records() {
            if let Some(c) = &r.caption {
                let e = model.encode_caption(c)?;
                entries.push(Entry::from_f64(r.id, Modality::Text, &e.vector));
            }
        }
    }
    if matches!(scope, Scope::Single(Modality::Image) | Scope::Joint) {
        for (id, _, seq) in ks.image_features()? {
            let e = model.encode(&seq)?;
            entries.push(Entry::from_f64(id, Modality::Image, &e.vector));
        }
    }
    IndexHandle::build(entries, scope, kind, model.fingerprint())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Separate,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FingerprintPolicy {
    Strict,
    Warn,
}

/// Which modality lists a separate-mode retrieval fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Text,
    Image,
    All,
}

/// Contents of a retriever configuration file: one `key = value` per line,
/// `#` starts a comment, relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverConfig {
    pub mode: IndexMode,
    pub text_index: Option<PathBuf>,
    pub image_index: Option<PathBuf>,
    pub joint_index: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub knowledge_source: PathBuf,
    pub k: usize,
    pub fingerprint_policy: FingerprintPolicy,
    pub target: Target,
    pub exclude_self: bool,
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            IndexMode::Joint if self.joint_index.is_none() => {
                Err(Error::contract("joint mode needs joint_index"))
            }
            IndexMode::Separate if self.text_index.is_none() && self.image_index.is_none() => {
                Err(Error::contract("separate mode needs text_index or image_index"))
            }
            _ => Ok(()),
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let path = |key: &str| kv.get(key).map(|v| base.join(v));
        let required = |key: &str| {
            path(key).ok_or_else(|| Error::contract(format!("retriever config lacks {key}")))
        };
        let word = |key: &str, default: &str| -> String {
            kv.get(key).cloned().unwrap_or_else(|| default.to_string())
        };
        let parse_enum = |key: &str, default: &str| -> Result<String> {
            Ok(format!("\"{}\"", word(key, default)))
        };
        let bad = |key: &str| Error::contract(format!("invalid value for {key}"));
        let cfg = Self {
            mode: serde_json::from_str(&parse_enum("mode", "separate")?).map_err(|_| bad("mode"))?,
            text_index: path("text_index"),
            image_index: path("image_index"),
            joint_index: path("joint_index"),
            checkpoint: required("checkpoint")?,
            knowledge_source: required("knowledge_source")?,
            k: word("k", "10").parse().map_err(|_| bad("k"))?,
            fingerprint_policy: serde_json::from_str(&parse_enum("fingerprint_policy", "strict")?)
                .map_err(|_| bad("fingerprint_policy"))?,
            target: serde_json::from_str(&parse_enum("target", "text")?).map_err(|_| bad("target"))?,
            exclude_self: word("exclude_self", "false").parse().map_err(|_| bad("exclude_self"))?,
        };
        if let Some(unknown) = kv.keys().find(|k| {
            ![
                "mode",
                "text_index",
                "image_index",
                "joint_index",
                "checkpoint",
                "knowledge_source",
                "k",
                "fingerprint_policy",
                "target",
                "exclude_self",
            ]
            .contains(&k.as_str())
        }) {
            return Err(Error::contract(format!("unknown retriever config key {unknown}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&fs::read_to_string(path)?, base)
    }

    /// Serializes with paths written relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", spelling(&self.mode));
        for (key, p) in [
            ("text_index", &self.text_index),
            ("image_index", &self.image_index),
            ("joint_index", &self.joint_index),
        ] {
            if let Some(p) = p {
                let _ = writeln!(s, "{key} = {}", rel(p));
            }
        }
        let _ = writeln!(s, "checkpoint = {}", rel(&self.checkpoint));
        let _ = writeln!(s, "knowledge_source = {}", rel(&self.knowledge_source));
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "fingerprint_policy = {}", spelling(&self.fingerprint_policy));
        let _ = writeln!(s, "target = {}", spelling(&self.target));
        let _ = writeln!(s, "exclude_self = {}", self.exclude_self);
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text(path.parent().unwrap_or(Path::new(""))))?;
        Ok(())
    }
}

/// Lower-case config spelling of an enum value.
fn spelling<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// The indices a retriever searches.
#[derive(Clone, Debug, PartialEq)]
pub enum IndexSet {
    Joint(IndexHandle),
    Separate {
        text: Option<IndexHandle>,
        image: Option<IndexHandle>,
    },
}

impl IndexSet {
    fn handles(&self) -> Vec<&IndexHandle> {
        match self {
            IndexSet::Joint(h) => vec![h],
            IndexSet::Separate { text, image } => text.iter().chain(image.iter()).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            IndexSet::Joint(h) => h.scope() == Scope::Joint,
            IndexSet::Separate { text, image } => {
                (text.is_some() || image.is_some())
                    && text.iter().all(|h| h.scope() == Scope::Single(Modality::Text))
                    && image.iter().all(|h| h.scope() == Scope::Single(Modality::Image))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract("index scopes do not match the retrieval mode"))
        }
    }
}

/// One dereferenced hit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Retrieved {
    pub id: u64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

/// Image hits and caption hits, each in descending score order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RetrievalSet {
    pub images: Vec<Retrieved>,
    pub captions: Vec<Retrieved>,
}

impl RetrievalSet {
    pub fn total(&self) -> usize {
        self.images.len() + self.captions.len()
    }

    pub fn caption_texts(&self) -> Vec<&str> {
        self.captions
            .iter()
            .filter_map(|r| r.caption.as_deref())
            .collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.images.iter().chain(&self.captions).map(|r| r.id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("retrieval sets always serialize")
    }
}

/// Everything one retrieval reads; replaced as a whole by hot swaps.
#[derive(Debug)]
pub struct RetrieverState {
    pub model: Arc<AlignmentModel>,
    pub knowledge: Arc<KnowledgeSource>,
    pub indices: Arc<IndexSet>,
    pub policy: FingerprintPolicy,
    pub target: Target,
    pub exclude_self: bool,
}

fn check_fingerprints(model: &AlignmentModel, indices: &IndexSet, policy: FingerprintPolicy) -> Result<()> {
    let fp = model.fingerprint();
    for h in indices.handles() {
        if h.fingerprint() != fp {
            match policy {
                FingerprintPolicy::Strict => {
                    return Err(Error::Compatibility {
                        model: fp,
                        index: h.fingerprint(),
                    })
                }
                FingerprintPolicy::Warn => log::warn!(
                    "index fingerprint {:016x} differs from model {fp:016x}",
                    h.fingerprint()
                ),
            }
        }
    }
    Ok(())
}

impl RetrieverState {
    pub fn new(
        model: Arc<AlignmentModel>,
        knowledge: Arc<KnowledgeSource>,
        indices: Arc<IndexSet>,
        policy: FingerprintPolicy,
    ) -> Result<Self> {
        indices.validate()?;
        check_fingerprints(&model, &indices, policy)?;
        Ok(Self {
            model,
            knowledge,
            indices,
            policy,
            target: Target::Text,
            exclude_self: false,
        })
    }

    fn search(&self, index: &IndexHandle, q: &[f64], k: usize, own: Option<&ImageRef>) -> Result<Vec<Hit>> {
        let excluded = |h: &Hit| -> bool {
            match (own, self.knowledge.get(h.id)) {
                (Some(own), Some(r)) => r.image.as_ref() == Some(own),
                _ => false,
            }
        };
        let mut want = k;
        loop {
            let r = index.knn_f64(q, want.min(index.len()).max(1))?;
            let kept: Vec<Hit> = r.hits.iter().filter(|h| !excluded(h)).copied().collect();
            if kept.len() >= k || want >= index.len() {
                return Ok(kept.into_iter().take(k).collect());
            }
            want = (want * 2).max(want + 8);
        }
    }

    fn deref(&self, h: &Hit) -> Result<Retrieved> {
        let r = self.knowledge.get(h.id).ok_or_else(|| {
            Error::DataIntegrity(format!(
                "index returned record {} absent from knowledge source {}",
                h.id, self.knowledge.name
            ))
        })?;
        Ok(match h.modality {
            Modality::Text => Retrieved {
                id: h.id,
                score: h.score,
                caption: Some(r.caption.clone().ok_or_else(|| {
                    Error::DataIntegrity(format!("record {} has no caption", h.id))
                })?),
                image: None,
            },
            Modality::Image => Retrieved {
                id: h.id,
                score: h.score,
                caption: None,
                image: Some(r.image.clone().ok_or_else(|| {
                    Error::DataIntegrity(format!("record {} has no image", h.id))
                })?),
            },
        })
    }

    /// Retrieves `k` records for a query. `own` names the query's own image
    /// so that its captions can be skipped when exclusion is enabled.
    pub fn retrieve(&self, q: &FeatureSequence, k: usize, own: Option<&ImageRef>) -> Result<RetrievalSet> {
        let mut set = RetrievalSet::default();
        if k == 0 {
            return Ok(set);
        }
        let own = if self.exclude_self { own } else { None };
        let e = self.model.encode(q)?;
        let hits: Vec<Hit> = match &*self.indices {
            IndexSet::Joint(h) => self.search(h, &e.vector, k, own)?,
            IndexSet::Separate { text, image } => {
                fn pick<'h>(h: &'h Option<IndexHandle>, what: &str) -> Result<&'h IndexHandle> {
                    h.as_ref()
                        .ok_or_else(|| Error::contract(format!("no {what} index configured")))
                }
                match self.target {
                    Target::Text => self.search(pick(text, "text")?, &e.vector, k, own)?,
                    Target::Image => self.search(pick(image, "image")?, &e.vector, k, own)?,
                    Target::All => {
                        let mut all = Vec::new();
                        for h in [text, image].into_iter().flatten() {
                            all.extend(self.search(h, &e.vector, k, own)?);
                        }
                        all.sort_by(crate::index::hit_order);
                        all.truncate(k);
                        all
                    }
                }
            }
        };
        for h in &hits {
            let r = self.deref(h)?;
            match h.modality {
                Modality::Image => set.images.push(r),
                Modality::Text => set.captions.push(r),
            }
        }
        Ok(set)
    }
}

/// Thread-safe retriever with atomic hot swap.
#[derive(Debug)]
pub struct Retriever {
    state: RwLock<Arc<RetrieverState>>,
}

fn load_index(p: &Option<PathBuf>) -> Result<Option<IndexHandle>> {
    p.as_ref().map(IndexHandle::load).transpose()
}

impl Retriever {
    pub fn new(state: RetrieverState) -> Self {
        Self {
            state: RwLock::new(Arc::new(state)),
        }
    }

    /// Loads model, knowledge source and indices named by `cfg`.
    pub fn open(cfg: &RetrieverConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Arc::new(AlignmentModel::load(&cfg.checkpoint)?);
        let ks = Arc::new(KnowledgeSource::load_jsonl(&cfg.knowledge_source)?);
        let indices = Arc::new(match cfg.mode {
            IndexMode::Joint => IndexSet::Joint(
                load_index(&cfg.joint_index)?.expect("validated joint index path"),
            ),
            IndexMode::Separate => IndexSet::Separate {
                text: load_index(&cfg.text_index)?,
                image: load_index(&cfg.image_index)?,
            },
        });
        let mut state = RetrieverState::new(model, ks, indices, cfg.fingerprint_policy)?;
        state.target = cfg.target;
        state.exclude_self = cfg.exclude_self;
        Ok(Self::new(state))
    }

    pub fn snapshot(&self) -> Arc<RetrieverState> {
        self.state.read().expect("retriever lock poisoned").clone()
    }

    pub fn retrieve(&self, q: &FeatureSequence, k: usize, own: Option<&ImageRef>) -> Result<RetrievalSet> {
        self.snapshot().retrieve(q, k, own)
    }

    fn replace(&self, f: impl FnOnce(&RetrieverState) -> Result<RetrieverState>) -> Result<()> {
        let mut guard = self.state.write().expect("retriever lock poisoned");
        let next = f(&guard)?;
        *guard = Arc::new(next);
        Ok(())
    }

    /// Replaces the knowledge source and its indices, keeping the model.
    /// The new indices must have been encoded with the current model.
    pub fn swap_in_domain(&self, knowledge: KnowledgeSource, indices: IndexSet) -> Result<()> {
        self.replace(|cur| {
            let mut next = RetrieverState::new(
                cur.model.clone(),
                Arc::new(knowledge),
                Arc::new(indices),
                cur.policy,
            )?;
            next.target = cur.target;
            next.exclude_self = cur.exclude_self;
            Ok(next)
        })
    }

    /// Replaces model, knowledge source and indices together.
    pub fn swap_out_of_domain(
        &self,
        model: AlignmentModel,
        knowledge: KnowledgeSource,
        indices: IndexSet,
    ) -> Result<()> {
        self.replace(|cur| {
            let mut next = RetrieverState::new(
                Arc::new(model),
                Arc::new(knowledge),
                Arc::new(indices),
                cur.policy,
            )?;
            next.target = cur.target;
            next.exclude_self = cur.exclude_self;
            Ok(next)
        })
    }

    /// Re-installs a previously captured snapshot.
    pub fn restore(&self, snapshot: Arc<RetrieverState>) {
        *self.state.write().expect("retriever lock poisoned") = snapshot;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentConfig;
    use crate::features::SyntheticScene;

    fn model(seed: u64) -> AlignmentModel {
        AlignmentModel::new(AlignmentConfig {
            d: 8,
            heads: 2,
            ff: 8,
            text_buckets: 64,
            text_dim: 6,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn ks() -> KnowledgeSource {
        let caps = ["a red circle", "a blue star", "the top left has a ring"];
        KnowledgeSource::new(
            "t",
            caps.iter()
                .enumerate()
                .map(|(i, c)| KnowledgeRecord {
                    id: 100 + i as u64,
                    caption: Some(c.to_string()),
                    image: None,
                    split: Split::Train,
                })
                .collect(),
        )
        .unwrap()
    }

    fn state(m: AlignmentModel, policy: FingerprintPolicy) -> Result<RetrieverState> {
        let k = ks();
        let idx = build_ks_index(&m, &k, Scope::Single(Modality::Text), IndexKind::Flat)?;
        RetrieverState::new(
            Arc::new(m),
            Arc::new(k),
            Arc::new(IndexSet::Separate {
                text: Some(idx),
                image: None,
            }),
            policy,
        )
    }

    fn query(m: &AlignmentModel) -> FeatureSequence {
        m.image_features.extract(&SyntheticScene::empty(3, 3)).unwrap()
    }

    #[test]
    fn caption_retrieval_fills_caption_list() {
        let m = model(1);
        let q = query(&m);
        let s = state(m, FingerprintPolicy::Strict).unwrap();
        let r = s.retrieve(&q, 2, None).unwrap();
        assert_eq!((r.images.len(), r.captions.len()), (0, 2));
        assert!(r.captions[0].score >= r.captions[1].score);
        assert_eq!(s.retrieve(&q, 0, None).unwrap().total(), 0);
    }

    #[test]
    fn strict_policy_rejects_foreign_index() {
        let k = ks();
        let idx = build_ks_index(&model(1), &k, Scope::Single(Modality::Text), IndexKind::Flat).unwrap();
        let set = Arc::new(IndexSet::Separate {
            text: Some(idx),
            image: None,
        });
        let err = RetrieverState::new(Arc::new(model(2)), Arc::new(k.clone()), set.clone(), FingerprintPolicy::Strict);
        assert!(matches!(err, Err(Error::Compatibility { .. })));
        assert!(RetrieverState::new(Arc::new(model(2)), Arc::new(k), set, FingerprintPolicy::Warn).is_ok());
    }

    #[test]
    fn dangling_ids_are_integrity_errors() {
        let m = model(1);
        let q = query(&m);
        let full = ks();
        let idx = build_ks_index(&m, &full, Scope::Single(Modality::Text), IndexKind::Flat).unwrap();
        let partial = KnowledgeSource::new("p", full.records()[..1].to_vec()).unwrap();
        let s = RetrieverState::new(
            Arc::new(m),
            Arc::new(partial),
            Arc::new(IndexSet::Separate {
                text: Some(idx),
                image: None,
            }),
            FingerprintPolicy::Strict,
        )
        .unwrap();
        assert!(matches!(s.retrieve(&q, 3, None), Err(Error::DataIntegrity(_))));
    }

    #[test]
    fn knowledge_source_validation_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ks.jsonl");
        ks().save_jsonl(&p).unwrap();
        let back = KnowledgeSource::load_jsonl(&p).unwrap();
        assert_eq!(back.records(), ks().records());
        let dup = vec![ks().records()[0].clone(), ks().records()[0].clone()];
        assert!(KnowledgeSource::new("d", dup).is_err());
        let empty = KnowledgeRecord {
            id: 1,
            caption: None,
            image: None,
            split: Split::Val,
        };
        assert!(KnowledgeSource::new("e", vec![empty]).is_err());
    }

    #[test]
    fn config_round_trip() {
        let base = Path::new("/data");
        let text = "# retriever\nmode = separate\ntext_index = caps.xidx\ncheckpoint = m.xaln\nknowledge_source = ks.jsonl\nk = 5\n";
        let cfg = RetrieverConfig::parse(text, base).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.text_index.as_deref(), Some(Path::new("/data/caps.xidx")));
        assert_eq!(cfg.fingerprint_policy, FingerprintPolicy::Strict);
        let again = RetrieverConfig::parse(&cfg.to_text(base), base).unwrap();
        assert_eq!(again, cfg);
        assert!(RetrieverConfig::parse("mode = joint\ncheckpoint = a\nknowledge_source = b\n", base).is_err());
        assert!(RetrieverConfig::parse(&format!("{text}bogus = 1\n"), base).is_err());
    }
}
