//! In-batch hard-negative hinge training of the alignment model.
//!
//! Each step encodes every image and caption of the batch on its own tape,
//! evaluates the hinge loss on the similarity matrix, and pushes the loss
//! gradient back through each tape in batch order. The text embedding table
//! receives its gradient through the input rows of the caption tapes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{tokenize, FeatureSequence, ImageExtractor};
use crate::nn::{Adam, Binder, GradAccum, ParamGroup};
use crate::retriever::{ImageRef, KnowledgeSource};
use crate::synthdata::{Corpus, Split};

/// One image with all of its captions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub id: u64,
    pub image: FeatureSequence,
    pub captions: Vec<String>,
}

/// Image groups of one split, with features drawn from the observed scenes.
pub fn groups_from_corpus(
    corpus: &Corpus,
    extractor: &ImageExtractor,
    split: Split,
) -> Result<Vec<ImageGroup>> {
    corpus
        .scenes
        .iter()
        .filter(|s| s.split == split)
        .map(|s| {
            Ok(ImageGroup {
                id: s.id,
                image: extractor.extract(&s.observed)?,
                captions: s.captions.clone(),
            })
        })
        .collect()
}

/// Image groups of one split from a knowledge source. Records sharing an
/// image reference form one group, identified by its first record id and
/// ordered by first appearance.
pub fn groups_from_knowledge(ks: &KnowledgeSource, split: Split) -> Result<Vec<ImageGroup>> {
    let mut by_ref: HashMap<ImageRef, usize> = HashMap::new();
    let mut groups: Vec<ImageGroup> = Vec::new();
    let features: HashMap<ImageRef, FeatureSequence> = ks
        .image_features()?
        .into_iter()
        .map(|(_, r, f)| (r, f))
        .collect();
    for r in ks.records().iter().filter(|r| r.split == split) {
        let (Some(img), Some(caption)) = (&r.image, &r.caption) else {
            continue;
        };
        let slot = *by_ref.entry(img.clone()).or_insert_with(|| {
            groups.push(ImageGroup {
                id: r.id,
                image: features[img].clone(),
                captions: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].captions.push(caption.clone());
    }
    Ok(groups)
}

/// `b` aligned samples: `images[i]` is described by `texts[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub ids: Vec<u64>,
    pub images: Vec<FeatureSequence>,
    pub texts: Vec<FeatureSequence>,
    /// Text-table row used at every caption position.
    pub text_rows: Vec<Vec<usize>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Square matrix of image/caption inner products; entry `(i, j)` pairs image `i` with caption `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Tensor);

impl SimilarityMatrix {
    pub fn new(m: Tensor) -> Result<Self> {
        let (r, c) = m.dims2()?;
        if r != c {
            return Err(Error::Dimension {
                op: "similarity matrix",
                left: vec![r],
                right: vec![c],
            });
        }
        if !m.is_finite() {
            return Err(Error::degenerate("non-finite similarity"));
        }
        Ok(Self(m))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.0.row(i)[j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// `[margin + S(i, hard caption) - S(i, i)]_+` per image.
    pub image_terms: Vec<f64>,
    /// `[margin + S(hard image, j) - S(j, j)]_+` per caption.
    pub caption_terms: Vec<f64>,
    /// Hardest negative caption of every image.
    pub hard_captions: Vec<usize>,
    /// Hardest negative image of every caption.
    pub hard_images: Vec<usize>,
}

impl LossReport {
    /// Subgradient of the total with respect to the similarity matrix.
    pub fn similarity_gradient(&self) -> Tensor {
        let b = self.image_terms.len();
        let mut g = Tensor::zeros(vec![b, b]);
        let d = g.data_mut();
        for i in 0..b {
            if self.image_terms[i] > 0.0 {
                d[i * b + i] -= 1.0;
                d[i * b + self.hard_captions[i]] += 1.0;
            }
            if self.caption_terms[i] > 0.0 {
                d[i * b + i] -= 1.0;
                d[self.hard_images[i] * b + i] += 1.0;
            }
        }
        g
    }
}

/// First index of the largest value, skipping `skip`.
fn argmax_except(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, v) in values.enumerate() {
        if j != skip && (best.0 == usize::MAX || v > best.1) {
            best = (j, v);
        }
    }
    best.0
}

/// Max-violation hinge loss, summed over both retrieval directions.
pub fn hard_negative_hinge(sim: &SimilarityMatrix, margin: f64) -> Result<LossReport> {
    let b = sim.size();
    if b < 2 {
        return Err(Error::contract(format!(
            "hard negatives need a batch of at least 2, got {b}"
        )));
    }
    let mut report = LossReport {
        total: 0.0,
        image_terms: Vec::with_capacity(b),
        caption_terms: Vec::with_capacity(b),
        hard_captions: Vec::with_capacity(b),
        hard_images: Vec::with_capacity(b),
    };
    for i in 0..b {
        let hc = argmax_except(sim.0.row(i).iter().copied(), i);
        let hi = argmax_except((0..b).map(|r| sim.at(r, i)), i);
        let pos = sim.at(i, i);
        report.image_terms.push((margin + sim.at(i, hc) - pos).max(0.0));
        report.caption_terms.push((margin + sim.at(hi, i) - pos).max(0.0));
        report.hard_captions.push(hc);
        report.hard_images.push(hi);
    }
    report.total = report.image_terms.iter().sum::<f64>() + report.caption_terms.iter().sum::<f64>();
    Ok(report)
}

/// Hinge summed over every negative in both directions. Used as a warm start:
/// from a random initialization the hardest-negative objective can settle on
/// collapsed embeddings where every term equals the margin.
/// Returns the total and its gradient with respect to the similarities.
pub fn all_negatives_hinge(sim: &SimilarityMatrix, margin: f64) -> Result<(f64, Tensor)> {
    let b = sim.size();
    if b < 2 {
        return Err(Error::contract(format!("negatives need a batch of at least 2, got {b}")));
    }
    let mut total = 0.0;
    let mut g = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        let pos = sim.at(i, i);
        for j in (0..b).filter(|&j| j != i) {
            let caption_term = margin + sim.at(i, j) - pos;
            if caption_term > 0.0 {
                total += caption_term;
                g.data_mut()[i * b + j] += 1.0;
                g.data_mut()[i * b + i] -= 1.0;
            }
            let image_term = margin + sim.at(j, i) - pos;
            if image_term > 0.0 {
                total += image_term;
                g.data_mut()[j * b + i] += 1.0;
                g.data_mut()[i * b + i] -= 1.0;
            }
        }
    }
    Ok((total, g))
}

/// Negatives the training hinge compares each positive against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negatives {
    Hardest,
    All,
}

/// The same loss recorded on a tape over a `[b, b]` similarity node, so it
/// can be differentiated together with whatever produced the similarities.
pub fn hard_negative_hinge_on_tape(
    tape: &mut Tape,
    sim: Var,
    margin: f64,
) -> Result<(Var, LossReport)> {
    let report = hard_negative_hinge(&SimilarityMatrix::new(tape.value(sim).clone())?, margin)?;
    let b = report.image_terms.len();
    let diag = tape.gather_elements(sim, (0..b).map(|i| (i, i)).collect())?;
    let cap_neg = tape.gather_elements(sim, (0..b).map(|i| (i, report.hard_captions[i])).collect())?;
    let img_neg = tape.gather_elements(sim, (0..b).map(|i| (report.hard_images[i], i)).collect())?;
    let neg_diag = tape.scale(diag, -1.0);
    let mut total = None;
    for neg in [cap_neg, img_neg] {
        let gap = tape.add(neg, neg_diag)?;
        let shifted = tape.add_scalar(gap, margin);
        let clamped = tape.relu(shifted);
        let s = tape.sum(clamped);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok((total.expect("two directions"), report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor for the feature-encoder group (the text table).
    pub encoder_lr_multiplier: f64,
    pub margin: f64,
    pub seed: u64,
    /// Steps between validation evaluations; 0 evaluates only after the last step.
    pub eval_every: usize,
    /// Leading steps trained on the all-negatives hinge before switching to
    /// hardest negatives.
    pub all_negatives_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            warmup_iters: 2_000,
            batch_size: 256,
            lr: 1e-4,
            encoder_lr_multiplier: 0.1,
            margin: 0.2,
            seed: 0,
            eval_every: 1_000,
            all_negatives_iters: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that train the small synthetic model within a few CPU minutes.
    pub fn desk_scale() -> Self {
        Self {
            iterations: 1_200,
            warmup_iters: 100,
            batch_size: 32,
            lr: 1e-3,
            eval_every: 200,
            all_negatives_iters: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::contract("batch_size must be at least 2"));
        }
        if self.all_negatives_iters > self.iterations {
            return Err(Error::contract(format!(
                "all_negatives_iters {} exceeds iterations {}",
                self.all_negatives_iters, self.iterations
            )));
        }
        if self.warmup_iters > self.iterations {
            return Err(Error::contract(format!(
                "warmup_iters {} exceeds iterations {}",
                self.warmup_iters, self.iterations
            )));
        }
        if !(self.lr > 0.0 && self.encoder_lr_multiplier >= 0.0 && self.margin >= 0.0) {
            return Err(Error::contract("lr must be positive, multiplier and margin non-negative"));
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`: linear ramp to `lr`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_iters {
            self.lr * (step + 1) as f64 / self.warmup_iters as f64
        } else {
            self.lr
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub r1_val: Option<f64>,
}

/// Where the training loop writes its artifacts; every path is optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
    /// Highest validation Text→Image R@1 (percent) and the step it was reached.
    pub best: Option<(usize, f64)>,
}

/// Draws batches with at most one caption per image.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, model: &AlignmentModel, data: &[ImageGroup], b: usize) -> Result<PairBatch> {
        if self.cursor + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let mut batch = PairBatch {
            ids: Vec::with_capacity(b),
            images: Vec::with_capacity(b),
            texts: Vec::with_capacity(b),
            text_rows: Vec::with_capacity(b),
        };
        for &g in &self.order[self.cursor..self.cursor + b] {
            let group = &data[g];
            let caption = &group.captions[self.rng.random_range(0..group.captions.len())];
            let (seq, rows) = model.text_features.extract_tokens(&tokenize(caption))?;
            batch.ids.push(group.id);
            batch.images.push(group.image.clone());
            batch.texts.push(seq);
            batch.text_rows.push(rows);
        }
        self.cursor += b;
        Ok(batch)
    }
}

/// Loss and parameter gradients for one batch; the text-table gradient is
/// returned separately because the table lives outside the parameter store.
pub(crate) fn batch_gradients(
    model: &AlignmentModel,
    batch: &PairBatch,
    margin: f64,
    negatives: Negatives,
) -> Result<(f64, GradAccum, Tensor)> {
    struct Encoded<'a> {
        tape: Tape,
        binder: Binder<'a>,
        output: Var,
        input: Var,
    }
    let encode = |feats: &FeatureSequence| -> Result<Encoded<'_>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let enc = model.encode_trainable(&mut tape, &mut binder, feats)?;
        Ok(Encoded {
            tape,
            binder,
            output: enc.output,
            input: enc.input,
        })
    };
    let images = batch.images.iter().map(encode).collect::<Result<Vec<_>>>()?;
    let texts = batch.texts.iter().map(encode).collect::<Result<Vec<_>>>()?;
    let b = batch.len();
    let d = model.dim();
    let vec_of = |e: &Encoded<'_>| e.tape.value(e.output).data().to_vec();
    let img_vecs: Vec<Vec<f64>> = images.iter().map(vec_of).collect();
    let txt_vecs: Vec<Vec<f64>> = texts.iter().map(vec_of).collect();
    let mut sim = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        for j in 0..b {
            sim.data_mut()[i * b + j] = crate::autodiff::dot_slices(&img_vecs[i], &txt_vecs[j]);
        }
    }
    let sim = SimilarityMatrix::new(sim)?;
    let (loss, ds) = match negatives {
        Negatives::Hardest => {
            let r = hard_negative_hinge(&sim, margin)?;
            (r.total, r.similarity_gradient())
        }
        Negatives::All => all_negatives_hinge(&sim, margin)?,
    };

    let mut acc = GradAccum::new(&model.params);
    let table = &model.text_features.table;
    let mut table_grad = Tensor::zeros(table.shape().to_vec());
    for i in 0..b {
        let mut seed = vec![0.0; d];
        for j in 0..b {
            let w = ds.row(i)[j];
            if w != 0.0 {
                seed.iter_mut().zip(&txt_vecs[j]).for_each(|(s, t)| *s += w * t);
            }
        }
        if seed.iter().any(|&x| x != 0.0) {
            let e = &images[i];
            let g = e.tape.backward_seeded(&[(e.output, Tensor::row_vector(seed))])?;
            e.binder.accumulate(&g, &mut acc);
        }
    }
    for j in 0..b {
        let mut seed = vec![0.0; d];
        for i in 0..b {
            let w = ds.row(i)[j];
            if w != 0.0 {
                seed.iter_mut().zip(&img_vecs[i]).for_each(|(s, v)| *s += w * v);
            }
        }
        if seed.iter().any(|&x| x != 0.0) {
            let e = &texts[j];
            let g = e.tape.backward_seeded(&[(e.output, Tensor::row_vector(seed))])?;
            e.binder.accumulate(&g, &mut acc);
            if let Some(gin) = g.get(e.input) {
                for (pos, &row) in batch.text_rows[j].iter().enumerate() {
                    table_grad
                        .row_mut(row)
                        .iter_mut()
                        .zip(gin.row(pos))
                        .for_each(|(a, x)| *a += x);
                }
            }
        }
    }
    Ok((loss, acc, table_grad))
}

/// Loss of one batch of aligned pairs through the full encoder, with the
/// analytic gradient of every stored parameter and of the text table.
#[derive(Clone, Debug)]
pub struct PairGradients {
    pub loss: f64,
    /// One tensor per parameter, in declaration order.
    pub params: Vec<Tensor>,
    pub text_table: Tensor,
}

fn pair_batch(model: &AlignmentModel, images: &[FeatureSequence], captions: &[String]) -> Result<PairBatch> {
    if images.len() != captions.len() {
        return Err(Error::contract(format!(
            "{} images but {} captions",
            images.len(),
            captions.len()
        )));
    }
    let mut batch = PairBatch {
        ids: (0..images.len() as u64).collect(),
        images: images.to_vec(),
        texts: Vec::with_capacity(captions.len()),
        text_rows: Vec::with_capacity(captions.len()),
    };
    for c in captions {
        let (seq, rows) = model.text_features.extract_tokens(&tokenize(c))?;
        batch.texts.push(seq);
        batch.text_rows.push(rows);
    }
    Ok(batch)
}

/// Batch loss and gradients; `captions[i]` describes `images[i]`.
pub fn pair_gradients(
    model: &AlignmentModel,
    images: &[FeatureSequence],
    captions: &[String],
    margin: f64,
    negatives: Negatives,
) -> Result<PairGradients> {
    let batch = pair_batch(model, images, captions)?;
    let (loss, acc, text_table) = batch_gradients(model, &batch, margin, negatives)?;
    let params = model
        .params
        .ids()
        .map(|id| {
            acc.get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape().to_vec()))
        })
        .collect();
    Ok(PairGradients {
        loss,
        params,
        text_table,
    })
}

/// Trains `model` in place. Validation Text→Image R@1 is computed on `val`
/// (first caption of every group as the query) when it is non-empty.
pub fn train_alignment(
    model: &mut AlignmentModel,
    data: &[ImageGroup],
    val: &[ImageGroup],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::contract(format!(
            "{} training images cannot fill a batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if data.iter().any(|g| g.captions.is_empty()) {
        return Err(Error::contract("every training image needs a caption"));
    }
    let mut metrics = match &outputs.metrics {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut adam = Adam::new(&model.params);
    let table_slot = adam.push_slot(model.text_features.table.numel());
    let mut report = TrainReport {
        history: Vec::with_capacity(cfg.iterations),
        best: None,
    };
    for step in 0..cfg.iterations {
        let batch = sampler.next(model, data, cfg.batch_size)?;
        let negatives = if step < cfg.all_negatives_iters {
            Negatives::All
        } else {
            Negatives::Hardest
        };
        let (loss, grads, table_grad) = batch_gradients(model, &batch, cfg.margin, negatives)?;
        let lr = cfg.lr_at(step);
        let enc_lr = lr * cfg.encoder_lr_multiplier;
        adam.step(&mut model.params, &grads, |g| match g {
            ParamGroup::Model => lr,
            ParamGroup::FeatureEncoder => enc_lr,
        });
        adam.update_slot(
            table_slot,
            model.text_features.table.data_mut(),
            table_grad.data(),
            enc_lr,
        );
        let last = step + 1 == cfg.iterations;
        let due = if cfg.eval_every == 0 {
            last
        } else {
            (step + 1) % cfg.eval_every == 0 || last
        };
        let r1_val = if due && !val.is_empty() {
            Some(crate::evalkit::text_to_image_r1(model, val)?)
        } else {
            None
        };
        if let Some(r1) = r1_val {
            if report.best.is_none_or(|(_, b)| r1 > b) {
                report.best = Some((step + 1, r1));
                if let Some(p) = &outputs.best_checkpoint {
                    model.save(p)?;
                }
            }
        }
        let m = StepMetrics {
            step: step + 1,
            loss,
            lr,
            r1_val,
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
        }
        log::debug!("step {} loss {:.4} lr {:.2e} r1 {:?}", m.step, m.loss, lr, r1_val);
        report.history.push(m);
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(p) = &outputs.final_checkpoint {
        model.save(p)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentConfig;
    use crate::autodiff::finite_difference;
    use crate::synthdata::{generate, GenSpec};

    fn sim(rows: &[&[f64]]) -> SimilarityMatrix {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        SimilarityMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let r = hard_negative_hinge(&sim(&[&[0.9, 0.2], &[0.1, 0.8]]), 0.2).unwrap();
        assert_eq!(r.total, 0.0);
        let r = hard_negative_hinge(&sim(&[&[0.3, 0.5], &[0.0, 0.9]]), 0.2).unwrap();
        // only image 0 against caption 1 violates: 0.2 + 0.5 - 0.3
        assert!((r.total - 0.4).abs() < 1e-15, "{}", r.total);
        assert_eq!(r.image_terms[1], 0.0);
        assert_eq!(r.caption_terms, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_of_one_rejected() {
        assert!(matches!(
            hard_negative_hinge(&sim(&[&[1.0]]), 0.2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let r = hard_negative_hinge(&sim(&[&[1.0, 0.5, 0.5], &[0.3, 1.0, 0.3], &[0.2, 0.2, 1.0]]), 0.2)
            .unwrap();
        assert_eq!(r.hard_captions, vec![1, 0, 0]);
        assert_eq!(r.hard_images, vec![1, 0, 0]);
    }

    #[test]
    fn tape_and_plain_agree_and_gradient_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let b = rng.random_range(2..6);
            let m = Tensor::matrix(b, b, (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect());
            let plain = hard_negative_hinge(&SimilarityMatrix::new(m.clone()).unwrap(), 0.3).unwrap();
            let mut t = Tape::new();
            let v = t.param(&m);
            let (loss, _) = hard_negative_hinge_on_tape(&mut t, v, 0.3).unwrap();
            assert!((t.value(loss).data()[0] - plain.total).abs() < 1e-12);
            let g = t.backward(loss).unwrap();
            assert_eq!(g.get(v).unwrap().data(), plain.similarity_gradient().data());
        }
    }

    #[test]
    fn all_negatives_gradient_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let b = rng.random_range(2..6);
            let m = Tensor::matrix(b, b, (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (total, grad) = all_negatives_hinge(&SimilarityMatrix::new(m.clone()).unwrap(), 0.3).unwrap();
            let mut t = Tape::new();
            let v = t.param(&m);
            let mut acc = None;
            for i in 0..b {
                for j in (0..b).filter(|&j| j != i) {
                    for (neg, pos) in [((i, j), (i, i)), ((j, i), (i, i))] {
                        let n = t.gather_elements(v, vec![neg]).unwrap();
                        let p = t.gather_elements(v, vec![pos]).unwrap();
                        let p = t.scale(p, -1.0);
                        let diff = t.add(n, p).unwrap();
                        let term = t.add_scalar(diff, 0.3);
                        let term = t.relu(term);
                        acc = Some(match acc {
                            None => term,
                            Some(a) => t.add(a, term).unwrap(),
                        });
                    }
                }
            }
            let loss = acc.unwrap();
            assert!((t.value(loss).data()[0] - total).abs() < 1e-12);
            let g = t.backward(loss).unwrap();
            assert_eq!(g.get(v).unwrap().data(), grad.data());
        }
    }

    fn tiny_model(seed: u64) -> AlignmentModel {
        AlignmentModel::new(AlignmentConfig {
            d: 8,
            heads: 2,
            ff: 12,
            text_buckets: 32,
            text_dim: 6,
            image_pos_dim: 4,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_data(n: usize) -> Vec<ImageGroup> {
        let corpus = generate(&GenSpec {
            seed: 1,
            n_pairs: n,
            ..Default::default()
        })
        .unwrap();
        let m = tiny_model(0);
        groups_from_corpus(&corpus, &m.image_features, Split::Train).unwrap()
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let model = tiny_model(5);
        let data = tiny_data(3);
        let mut sampler = BatchSampler::new(data.len(), 9);
        let batch = sampler.next(&model, &data, 3).unwrap();
        // a large margin keeps every hinge active so the loss is smooth here
        let margin = 5.0;
        for negatives in [Negatives::Hardest, Negatives::All] {
        let (_, grads, table_grad) = batch_gradients(&model, &batch, margin, negatives).unwrap();
        let loss_with = |m: &AlignmentModel| {
            let mut b = batch.clone();
            for (seq, rows) in b.texts.iter_mut().zip(&b.text_rows) {
                let mut data = Vec::new();
                for (pos, &r) in rows.iter().enumerate() {
                    let pe = crate::nn::sinusoidal(pos, m.text_features.dim);
                    data.extend(m.text_features.table.row(r).iter().zip(pe).map(|(x, p)| x + p));
                }
                seq.rows = Tensor::matrix(rows.len(), m.text_features.dim, data);
            }
            batch_gradients(m, &b, margin, negatives).unwrap().0
        };
        for id in [model.projection(crate::features::Modality::Image), model.shared_param_ids()[0]] {
            let x = model.params.get(id).clone();
            let numeric = finite_difference(&x, 1e-5, |p| {
                let mut m = model.clone();
                *m.params.get_mut(id) = p.clone();
                loss_with(&m)
            });
            for (a, n) in grads.get(id).unwrap().data().iter().zip(&numeric) {
                assert!((a - n).abs() / a.abs().max(1.0) < 1e-4, "{a} vs {n}");
            }
        }
        let numeric = finite_difference(&model.text_features.table, 1e-5, |p| {
            let mut m = model.clone();
            m.text_features.table = p.clone();
            loss_with(&m)
        });
        for (a, n) in table_grad.data().iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(1.0) < 1e-4, "{a} vs {n}");
        }
    }
    }

    fn quick_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            warmup_iters: 0,
            batch_size: 4,
            lr: 1e-2,
            eval_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let data = tiny_data(6);
        let mut m = tiny_model(2);
        let before = m.to_bytes();
        train_alignment(&mut m, &data, &[], &quick_cfg(0), &TrainOutputs::default()).unwrap();
        assert_eq!(m.to_bytes(), before);
    }

    #[test]
    fn training_is_deterministic_and_moves_parameters() {
        let data = tiny_data(8);
        let run = || {
            let mut m = tiny_model(2);
            train_alignment(&mut m, &data, &data, &quick_cfg(5), &TrainOutputs::default()).unwrap();
            m.to_bytes()
        };
        let a = run();
        assert_eq!(a, run());
        assert_ne!(a, tiny_model(2).to_bytes());
    }

    #[test]
    fn too_small_dataset_rejected() {
        let data = tiny_data(3);
        let mut m = tiny_model(2);
        let err = train_alignment(&mut m, &data, &[], &quick_cfg(1), &TrainOutputs::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig {
            iterations: 10,
            warmup_iters: 4,
            lr: 1.0,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn batches_never_repeat_an_image() {
        let data = tiny_data(10);
        let m = tiny_model(0);
        let mut s = BatchSampler::new(data.len(), 4);
        for _ in 0..20 {
            let mut ids = s.next(&m, &data, 4).unwrap().ids;
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 4);
        }
    }
}
