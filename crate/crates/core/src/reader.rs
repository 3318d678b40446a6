//! Retrieval-augmented reader: a toy multi-modal classifier whose text input
//! is extended with retrieved captions.
//!
//! The joint sequence is the projected image grid followed by the text
//! tokens (question, then `<sep>`-delimited captions). Each token embedding
//! also carries its caption slot, its offset in the segment and the tokens
//! just before it. Optional shared encoder layers mix the sequence; a
//! question-conditioned attention readout feeds a linear answer head.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::{
    load_features, token_bucket, tokenize, FeatureManifest, FeatureSequence, ImageExtractor, Modality,
};
use crate::nn::{sinusoidal, xavier, Adam, Binder, EncoderLayer, GradAccum, ParamGroup, ParamId, ParamStore};
use crate::retriever::{ImageRef, RetrievalSet, Retriever};

/// Anything that can supply captions for a reader example.
pub trait CaptionSource {
    fn captions_for(&self, x: &ReaderInput, k: usize) -> Result<RetrievalSet>;
}

impl CaptionSource for Retriever {
    fn captions_for(&self, x: &ReaderInput, k: usize) -> Result<RetrievalSet> {
        self.retrieve(&x.image, k, x.image_ref.as_ref())
    }
}
use crate::synthdata::{Corpus, Split, VqaRecord, IMAGE_FILE};

/// Separator placed before every retrieved caption.
pub const SEP: &str = "<sep>";

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderInput {
    pub qid: u64,
    pub image: FeatureSequence,
    /// Where the image lives in the knowledge source, if it does.
    pub image_ref: Option<ImageRef>,
    pub question: Vec<String>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedInput {
    pub image: FeatureSequence,
    pub tokens: Vec<String>,
    /// Number of leading question tokens in `tokens`.
    pub question_len: usize,
    /// Ids of the captions that survived truncation, in order.
    pub provenance: Vec<u64>,
}

/// Appends retrieved captions to the question. Captions are cut from the
/// tail once `max_len` tokens are reached; the question is never cut.
pub fn augment(x: &ReaderInput, r: &RetrievalSet, max_len: usize) -> AugmentedInput {
    let mut tokens = x.question.clone();
    let mut provenance = Vec::new();
    for c in &r.captions {
        if tokens.len() >= max_len {
            break;
        }
        tokens.push(SEP.to_string());
        tokens.extend(tokenize(c.caption.as_deref().unwrap_or("")));
        provenance.push(c.id);
    }
    tokens.truncate(max_len.max(x.question.len()));
    AugmentedInput {
        image: x.image.clone(),
        tokens,
        question_len: x.question.len(),
        provenance,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderDataset {
    pub answers: Vec<String>,
    pub examples: Vec<ReaderInput>,
}

impl ReaderDataset {
    /// Builds examples of one split straight from a generated corpus; images
    /// are the observed scenes and references point into [`IMAGE_FILE`].
    pub fn from_corpus(corpus: &Corpus, extractor: &ImageExtractor, split: Split) -> Result<Self> {
        let answers = corpus.spec.answers();
        let mut examples = Vec::new();
        for q in corpus.vqa.iter().filter(|q| q.split == split) {
            let scene = corpus
                .scenes
                .get(q.scene as usize)
                .ok_or_else(|| Error::DataIntegrity(format!("question {} has no scene", q.qid)))?;
            let label = answers
                .iter()
                .position(|a| *a == q.answer)
                .ok_or_else(|| Error::contract(format!("answer {:?} not in vocabulary", q.answer)))?;
            examples.push(ReaderInput {
                qid: q.qid,
                image: extractor.extract(&scene.observed)?,
                image_ref: Some(ImageRef {
                    file: IMAGE_FILE.to_string(),
                    record: scene.id as u32,
                }),
                question: tokenize(&q.question),
                label,
            });
        }
        Ok(Self { answers, examples })
    }

    /// Builds examples of one split; image references resolve against `base_dir`.
    pub fn from_vqa(records: &[VqaRecord], base_dir: &Path, answers: &[String], split: Split) -> Result<Self> {
        let mut files: HashMap<String, Vec<FeatureSequence>> = HashMap::new();
        let mut examples = Vec::new();
        for q in records.iter().filter(|q| q.split == split) {
            if !files.contains_key(&q.image.file) {
                let f = load_features(
                    base_dir.join(&q.image.file),
                    FeatureManifest {
                        modality: Some(Modality::Image),
                        raw_dim: None,
                    },
                )?;
                files.insert(q.image.file.clone(), f.records);
            }
            let image = files[&q.image.file]
                .get(q.image.record as usize)
                .ok_or_else(|| Error::DataIntegrity(format!("question {} has no image", q.qid)))?
                .clone();
            let label = answers
                .iter()
                .position(|a| *a == q.answer)
                .ok_or_else(|| Error::contract(format!("answer {:?} not in vocabulary", q.answer)))?;
            examples.push(ReaderInput {
                qid: q.qid,
                image,
                image_ref: Some(q.image.clone()),
                question: tokenize(&q.question),
                label,
            });
        }
        Ok(Self {
            answers: answers.to_vec(),
            examples,
        })
    }
}

/// Number of captions retrieved per training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum KSchedule {
    Fixed { k: usize },
    Uniform { min: usize, max: usize },
}

impl KSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KSchedule::Uniform { min, max } if min > max => {
                Err(Error::contract(format!("k range {min}..={max} is empty")))
            }
            _ => Ok(()),
        }
    }

    pub fn max_k(&self) -> usize {
        match *self {
            KSchedule::Fixed { k } => k,
            KSchedule::Uniform { max, .. } => max,
        }
    }

    /// Draws `k`; fixed schedules consume no randomness.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            KSchedule::Fixed { k } => k,
            KSchedule::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub buckets: usize,
    /// Token budget for the question plus retrieved captions; the default
    /// fits forty three-object captions.
    pub max_len: usize,
    /// Learned slot embeddings: slot 0 is the question, slot `i` the `i`-th
    /// retrieved caption. Captions beyond the table share its last row.
    pub max_slots: usize,
    /// Preceding tokens of the same segment whose embeddings are added to
    /// each token, so that one attention layer can read a word together
    /// with the attributes written before it.
    pub context: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Retrieve once per example at the schedule's largest k and reuse prefixes.
    pub cache_retrieval: bool,
    /// Ablation: present retrieved captions in random order.
    pub shuffle_retrieved: bool,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            ff: 256,
            layers: 0,
            buckets: 1024,
            max_len: 1280,
            max_slots: 64,
            context: 2,
            epochs: 8,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            cache_retrieval: true,
            shuffle_retrieved: false,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::contract("reader width must be a positive multiple of heads"));
        }
        if self.buckets == 0 || self.max_len == 0 || self.max_slots == 0 || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::contract("reader buckets, max_len, max_slots, batch_size and lr must be positive"));
        }
        Ok(())
    }
}

const SEG_QUESTION: usize = 0;
const SEG_CAPTION: usize = 1;
const SEG_IMAGE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderModel {
    pub config: ReaderConfig,
    pub answers: Vec<String>,
    pub params: ParamStore,
    image_dim: usize,
    tokens: ParamId,
    /// `context[j]` embeds the token `j + 1` places back.
    context: Vec<ParamId>,
    slots: ParamId,
    segments: ParamId,
    image_proj: ParamId,
    layers: Vec<EncoderLayer>,
    readout: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

impl ReaderModel {
    pub fn new(config: ReaderConfig, answers: Vec<String>, image_dim: usize) -> Result<Self> {
        config.validate()?;
        if answers.is_empty() || image_dim == 0 {
            return Err(Error::contract("reader needs answers and a positive image width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let g = ParamGroup::Model;
        let mut params = ParamStore::default();
        let tokens = params.add("tokens", g, uniform(&mut rng, config.buckets + 1, d, 0.5));
        // one extra row stands for "before the start of the segment"
        let context = (0..config.context)
            .map(|j| params.add(format!("context.{}", j + 1), g, uniform(&mut rng, config.buckets + 2, d, 0.5)))
            .collect();
        let slots = params.add("slots", g, uniform(&mut rng, config.max_slots, d, 0.5));
        let segments = params.add("segments", g, uniform(&mut rng, 3, d, 0.5));
        let image_proj = params.add("image.proj", g, xavier(&mut rng, image_dim, d));
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("layer.{i}"), d, config.ff, config.heads, &mut rng))
            .collect();
        let readout = params.add("readout", g, xavier(&mut rng, d, d));
        let head_w = params.add("head.weight", g, xavier(&mut rng, 2 * d, answers.len()));
        let head_b = params.add("head.bias", g, Tensor::zeros(vec![1, answers.len()]));
        Ok(Self {
            config,
            answers,
            params,
            image_dim,
            tokens,
            context,
            slots,
            segments,
            image_proj,
            layers,
            readout,
            head_w,
            head_b,
        })
    }

    fn token_id(&self, t: &str) -> usize {
        if t == SEP {
            self.config.buckets
        } else {
            token_bucket(t, self.config.buckets)
        }
    }

    /// Records the forward pass; returns `[1, answers]` logits.
    fn forward(&self, tape: &mut Tape, b: &mut Binder<'_>, x: &AugmentedInput) -> Result<Var> {
        if x.image.raw_dim() != self.image_dim {
            return Err(Error::contract(format!(
                "reader expects {}-wide image features, got {}",
                self.image_dim,
                x.image.raw_dim()
            )));
        }
        if x.question_len == 0 {
            return Err(Error::degenerate("empty question"));
        }
        let d = self.config.d;
        let n_img = x.image.len();
        let n_txt = x.tokens.len().min(self.config.max_len);
        let seg = b.var(tape, self.segments);

        let img = tape.constant(x.image.rows.clone());
        let proj = b.var(tape, self.image_proj);
        let img = tape.matmul(img, proj)?;
        let img_seg = tape.gather_rows(seg, vec![SEG_IMAGE; n_img])?;
        let img = tape.add(img, img_seg)?;

        let tok_table = b.var(tape, self.tokens);
        let ids: Vec<usize> = x.tokens[..n_txt].iter().map(|t| self.token_id(t)).collect();
        let mut tok = tape.gather_rows(tok_table, ids.clone())?;
        // slot and offset of every token within its segment
        let mut slot_ids = Vec::with_capacity(n_txt);
        let mut offsets = Vec::with_capacity(n_txt);
        let (mut slot, mut offset) = (0usize, 0usize);
        for (i, t) in x.tokens[..n_txt].iter().enumerate() {
            if i >= x.question_len && t == SEP {
                slot += 1;
                offset = 0;
            }
            slot_ids.push(slot.min(self.config.max_slots - 1));
            offsets.push(offset);
            offset += 1;
        }
        for (j, &table) in self.context.iter().enumerate() {
            let back = j + 1;
            let rows = (0..n_txt)
                .map(|i| if offsets[i] >= back { ids[i - back] } else { self.config.buckets + 1 })
                .collect();
            let table = b.var(tape, table);
            let ctx = tape.gather_rows(table, rows)?;
            tok = tape.add(tok, ctx)?;
        }
        let slot_table = b.var(tape, self.slots);
        let pos = tape.gather_rows(slot_table, slot_ids)?;
        let seg_ids = (0..n_txt)
            .map(|i| if i < x.question_len { SEG_QUESTION } else { SEG_CAPTION })
            .collect();
        let txt_seg = tape.gather_rows(seg, seg_ids)?;
        let mut fixed = Vec::with_capacity(n_txt * d);
        for &p in &offsets {
            fixed.extend(sinusoidal(p, d));
        }
        let fixed = tape.constant(Tensor::matrix(n_txt, d, fixed));
        let txt = tape.add(tok, pos)?;
        let txt = tape.add(txt, txt_seg)?;
        let txt = tape.add(txt, fixed)?;

        let mut h = tape.concat_rows(&[img, txt])?;
        for layer in &self.layers {
            h = layer.forward(tape, b, h)?;
        }
        let nq = x.question_len.min(n_txt);
        let mean = tape.constant(Tensor::matrix(
            1,
            n_img + n_txt,
            (0..n_img + n_txt)
                .map(|i| if i >= n_img && i < n_img + nq { 1.0 / nq as f64 } else { 0.0 })
                .collect(),
        ));
        let q = tape.matmul(mean, h)?;
        let r = b.var(tape, self.readout);
        let query = tape.matmul(q, r)?;
        let (pooled, _) = crate::nn::attention_pool(tape, h, query)?;
        let feat = tape.concat_cols(&[pooled, q])?;
        let w = b.var(tape, self.head_w);
        let bias = b.var(tape, self.head_b);
        let logits = tape.matmul(feat, w)?;
        tape.add_row(logits, bias)
    }

    pub fn logits(&self, x: &AugmentedInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut b, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Index of the highest logit, lowest index on ties.
    pub fn predict(&self, x: &AugmentedInput) -> Result<usize> {
        let l = self.logits(x)?;
        Ok(l.iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > l[best] { i } else { best }))
    }

    fn loss_and_grads(&self, x: &AugmentedInput, label: usize, acc: &mut GradAccum) -> Result<f64> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let logits = self.forward(&mut tape, &mut b, x)?;
        let loss = tape.softmax_cross_entropy(logits, vec![label])?;
        let g = tape.backward(loss)?;
        b.accumulate(&g, acc);
        Ok(tape.value(loss).data()[0])
    }
}

pub const READER_MAGIC: &[u8; 4] = b"XRDR";
pub const READER_VERSION: u32 = 1;

impl ReaderModel {
    /// Checkpoint: magic, version, JSON config, answers, image width, parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(READER_MAGIC);
        w.u32(READER_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.len_u32(self.answers.len());
        for a in &self.answers {
            w.str(a);
        }
        w.len_u32(self.image_dim);
        self.params.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(READER_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != READER_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let config: ReaderConfig = serde_json::from_str(&r.str("reader config")?)
            .map_err(|e| Error::format(at, format!("bad reader config: {e}")))?;
        let n = r.u32("answer count")? as usize;
        let answers = (0..n).map(|_| r.str("answer")).collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let image_dim = r.u32("image width")? as usize;
        let mut model = Self::new(config, answers, image_dim).map_err(|e| Error::format(at, e.to_string()))?;
        model.params = ParamStore::read_into(&model.params, &mut r)?;
        r.expect_end()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Produces retrieval sets for reader examples, optionally caching the
/// largest request per example and serving smaller `k` as prefixes.
struct RetrievalFeed<'a> {
    retriever: Option<&'a dyn CaptionSource>,
    cache: Option<HashMap<u64, RetrievalSet>>,
    cache_k: usize,
}

impl<'a> RetrievalFeed<'a> {
    fn new(retriever: Option<&'a dyn CaptionSource>, cache: bool, cache_k: usize) -> Self {
        Self {
            retriever,
            cache: cache.then(HashMap::new),
            cache_k,
        }
    }

    fn get(&mut self, x: &ReaderInput, k: usize) -> Result<RetrievalSet> {
        if k == 0 {
            return Ok(RetrievalSet::default());
        }
        let r = self
            .retriever
            .ok_or_else(|| Error::contract(format!("k = {k} needs a retriever")))?;
        match self.cache.as_mut() {
            Some(cache) if k <= self.cache_k => {
                if !cache.contains_key(&x.qid) {
                    let set = r.captions_for(x, self.cache_k)?;
                    cache.insert(x.qid, set);
                }
                let full = &cache[&x.qid];
                Ok(RetrievalSet {
                    images: Vec::new(),
                    captions: full.captions.iter().take(k).cloned().collect(),
                })
            }
            _ => r.captions_for(x, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Cross-entropy training with per-example `k` drawn from `schedule`.
/// With a fixed schedule of 0 the retriever is never consulted.
pub fn train_reader(
    reader: &mut ReaderModel,
    data: &ReaderDataset,
    retriever: Option<&dyn CaptionSource>,
    schedule: KSchedule,
    cfg: &ReaderConfig,
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    if data.examples.is_empty() {
        return Err(Error::contract("empty reader training set"));
    }
    if data.answers != reader.answers {
        return Err(Error::contract("dataset and reader disagree on the answer vocabulary"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // separate stream so that drawing k never perturbs example order
    let mut k_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b5f_7363_6865_6475);
    let mut feed = RetrievalFeed::new(retriever, cfg.cache_retrieval, schedule.max_k());
    let mut adam = Adam::new(&reader.params);
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = GradAccum::new(&reader.params);
            for &i in chunk {
                let x = &data.examples[i];
                let k = schedule.draw(&mut k_rng);
                let mut set = feed.get(x, k)?;
                if cfg.shuffle_retrieved {
                    set.captions.shuffle(&mut k_rng);
                }
                let aug = augment(x, &set, reader.config.max_len);
                total += reader.loss_and_grads(&aug, x.label, &mut acc)?;
            }
            acc.scale(1.0 / chunk.len() as f64);
            adam.step(&mut reader.params, &acc, |_| cfg.lr);
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: total / data.examples.len() as f64,
            lr: cfg.lr,
        };
        log::info!("reader epoch {} loss {:.4}", entry.epoch, entry.loss);
        log.push(entry);
    }
    Ok(log)
}

/// One prediction with the captions it saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qid: u64,
    pub answer: String,
    pub retrieved_ids: Vec<u64>,
    #[serde(skip)]
    pub correct: bool,
}

/// Predictions for every example at inference-time retrieval count `k`.
pub fn predict_reader(
    reader: &ReaderModel,
    data: &ReaderDataset,
    retriever: Option<&dyn CaptionSource>,
    k: usize,
) -> Result<Vec<Prediction>> {
    if data.examples.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut feed = RetrievalFeed::new(retriever, false, 0);
    data.examples
        .iter()
        .map(|x| {
            let set = feed.get(x, k)?;
            let aug = augment(x, &set, reader.config.max_len);
            let p = reader.predict(&aug)?;
            Ok(Prediction {
                qid: x.qid,
                answer: reader.answers[p].clone(),
                retrieved_ids: aug.provenance,
                correct: p == x.label,
            })
        })
        .collect()
}

/// Accuracy in percent at retrieval count `k`; `k = 0` is unplugged evaluation.
pub fn eval_reader(
    reader: &ReaderModel,
    data: &ReaderDataset,
    retriever: Option<&dyn CaptionSource>,
    k: usize,
) -> Result<f64> {
    let preds = predict_reader(reader, data, retriever, k)?;
    Ok(100.0 * preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64)
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::Retrieved;

    fn input(q: &str) -> ReaderInput {
        ReaderInput {
            qid: 0,
            image: FeatureSequence::new(Modality::Image, Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
                .unwrap(),
            image_ref: None,
            question: tokenize(q),
            label: 1,
        }
    }

    fn caps(list: &[&str]) -> RetrievalSet {
        RetrievalSet {
            images: Vec::new(),
            captions: list
                .iter()
                .enumerate()
                .map(|(i, c)| Retrieved {
                    id: i as u64,
                    score: 1.0 - i as f64 * 0.1,
                    caption: Some(c.to_string()),
                    image: None,
                })
                .collect(),
        }
    }

    #[test]
    fn augmentation_examples() {
        let x = input("q1 q2");
        let none = augment(&x, &RetrievalSet::default(), 50);
        assert_eq!(none.tokens, x.question);
        let two = augment(&x, &caps(&["a b", "c"]), 50);
        assert_eq!(two.tokens.join(" "), "q1 q2 <sep> a b <sep> c");
        assert_eq!(two.provenance, vec![0, 1]);
    }

    #[test]
    fn truncation_keeps_question() {
        let x = input("what color is the star");
        let many: Vec<String> = (0..10).map(|i| format!("caption number {i} here")).collect();
        let refs: Vec<&str> = many.iter().map(String::as_str).collect();
        let a = augment(&x, &caps(&refs), 12);
        assert_eq!(a.tokens.len(), 12);
        assert_eq!(&a.tokens[..5], x.question.as_slice());
        let tiny = augment(&x, &caps(&refs), 3);
        assert_eq!(tiny.tokens, x.question);
    }

    fn toy_data() -> ReaderDataset {
        let answers = vec!["red".to_string(), "blue".to_string()];
        let examples = (0..12)
            .map(|i| {
                let mut x = input(if i % 2 == 0 { "is it red" } else { "is it blue" });
                x.qid = i;
                x.label = (i % 2) as usize;
                x
            })
            .collect();
        ReaderDataset { answers, examples }
    }

    fn toy_cfg() -> ReaderConfig {
        ReaderConfig {
            d: 8,
            heads: 2,
            ff: 8,
            buckets: 64,
            max_len: 32,
            epochs: 15,
            batch_size: 4,
            lr: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn learns_a_separable_task_deterministically() {
        let data = toy_data();
        let run = || {
            let mut m = ReaderModel::new(toy_cfg(), data.answers.clone(), 3).unwrap();
            train_reader(&mut m, &data, None, KSchedule::Fixed { k: 0 }, &toy_cfg()).unwrap();
            m
        };
        let m = run();
        assert_eq!(m, run());
        assert_eq!(eval_reader(&m, &data, None, 0).unwrap(), 100.0);
    }

    #[test]
    fn empty_or_unserviceable_requests_fail() {
        let data = toy_data();
        let m = ReaderModel::new(toy_cfg(), data.answers.clone(), 3).unwrap();
        let empty = ReaderDataset {
            answers: data.answers.clone(),
            examples: vec![],
        };
        assert!(eval_reader(&m, &empty, None, 0).is_err());
        assert!(eval_reader(&m, &data, None, 3).is_err());
    }

    #[test]
    fn reader_gradients_match_finite_differences() {
        let data = toy_data();
        let m = ReaderModel::new(toy_cfg(), data.answers.clone(), 3).unwrap();
        let x = augment(&data.examples[1], &caps(&["a red b", "c"]), 32);
        let mut acc = GradAccum::new(&m.params);
        m.loss_and_grads(&x, 1, &mut acc).unwrap();
        for id in [m.readout, m.image_proj, m.slots] {
            let numeric = crate::autodiff::finite_difference(m.params.get(id), 1e-5, |p| {
                let mut mm = m.clone();
                *mm.params.get_mut(id) = p.clone();
                let mut t = Tape::new();
                let mut b = Binder::new(&mm.params);
                let l = mm.forward(&mut t, &mut b, &x).unwrap();
                let loss = t.softmax_cross_entropy(l, vec![1]).unwrap();
                t.value(loss).data()[0]
            });
            for (a, n) in acc.get(id).unwrap().data().iter().zip(&numeric) {
                assert!((a - n).abs() / a.abs().max(1.0) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let data = toy_data();
        let m = ReaderModel::new(toy_cfg(), data.answers.clone(), 3).unwrap();
        let bytes = m.to_bytes();
        let back = ReaderModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(ReaderModel::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(ReaderModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn uniform_schedule_stays_in_range() {
        let s = KSchedule::Uniform { min: 1, max: 20 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            assert!((1..=20).contains(&s.draw(&mut rng)));
        }
        assert!(KSchedule::Uniform { min: 3, max: 2 }.validate().is_err());
    }
}
