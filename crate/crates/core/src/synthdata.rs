//! Deterministic synthetic corpora: grid scenes, five templated captions per
//! scene, templated VQA questions, and knowledge-source files.
//!
//! Caption templates are invertible: [`parse_caption`] recovers the attribute
//! claims of any generated caption, so caption/scene consistency can be
//! checked mechanically. `domain_shift` remaps a fraction of the attribute
//! vocabulary to alternative surface forms; `visual_noise` hides object
//! colors in the observed image while captions and answers keep the truth.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    tokenize, FeatureFile, ImageExtractor, Modality, SceneObject, SyntheticScene, HIDDEN_COLOR,
};
use crate::retriever::{ImageRef, KnowledgeRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            shapes: words(&[
                "circle", "square", "triangle", "star", "heart", "cross", "diamond", "ring",
            ]),
            colors: words(&[
                "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
            ]),
            sizes: words(&["small", "medium", "large"]),
            rows: words(&["top", "middle", "bottom"]),
            cols: words(&["left", "center", "right"]),
        }
    }
}

impl Vocabulary {
    fn all_words(&self) -> impl Iterator<Item = &String> {
        self.shapes
            .iter()
            .chain(&self.colors)
            .chain(&self.sizes)
            .chain(&self.rows)
            .chain(&self.cols)
    }

    fn validate(&self, grid_rows: usize, grid_cols: usize) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() || self.sizes.is_empty() {
            return Err(Error::contract("attribute vocabularies must be non-empty"));
        }
        if self.rows.len() < grid_rows || self.cols.len() < grid_cols {
            return Err(Error::contract(format!(
                "{}x{} position words cannot name a {grid_rows}x{grid_cols} grid",
                self.rows.len(),
                self.cols.len()
            )));
        }
        Ok(())
    }
}

/// Alternative surface forms used when a word is remapped by domain shift.
fn alternate(word: &str) -> String {
    let known = [
        ("circle", "disc"),
        ("square", "box"),
        ("triangle", "wedge"),
        ("star", "asterisk"),
        ("heart", "valentine"),
        ("cross", "plus"),
        ("diamond", "rhombus"),
        ("ring", "hoop"),
        ("red", "crimson"),
        ("blue", "navy"),
        ("green", "emerald"),
        ("yellow", "golden"),
        ("purple", "violet"),
        ("orange", "amber"),
        ("white", "ivory"),
        ("black", "ebony"),
        ("small", "tiny"),
        ("medium", "mid"),
        ("large", "huge"),
        ("top", "upper"),
        ("middle", "central"),
        ("bottom", "lower"),
        ("left", "west"),
        ("center", "centre"),
        ("right", "east"),
    ];
    known
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, a)| a.to_string())
        .unwrap_or_else(|| format!("{word}x"))
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub seed: u64,
    /// Number of scenes; each scene yields `captions_per_scene` image/caption pairs.
    pub n_pairs: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub vocab: Vocabulary,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Objects mentioned by a single caption.
    pub objects_per_caption: usize,
    pub captions_per_scene: usize,
    pub template_set: u32,
    /// Fraction of the attribute vocabulary rewritten to alternative forms.
    pub domain_shift: f64,
    /// Probability that an object's color is hidden in the observed image.
    pub visual_noise: f64,
    pub questions_per_scene: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 100,
            grid_rows: 3,
            grid_cols: 3,
            vocab: Vocabulary::default(),
            objects_min: 2,
            objects_max: 4,
            objects_per_caption: 2,
            captions_per_scene: 5,
            template_set: 0,
            domain_shift: 0.0,
            visual_noise: 0.0,
            questions_per_scene: 1,
            val_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate(self.grid_rows, self.grid_cols)?;
        if !(0.0..=1.0).contains(&self.domain_shift) || !(0.0..=1.0).contains(&self.visual_noise) {
            return Err(Error::contract("domain_shift and visual_noise must lie in [0, 1]"));
        }
        let cells = self.grid_rows * self.grid_cols;
        if self.objects_min == 0
            || self.objects_min > self.objects_max
            || self.objects_max > cells
            || self.objects_max > self.vocab.shapes.len()
        {
            return Err(Error::contract(format!(
                "objects per scene {}..={} must fit {cells} cells and {} distinct shapes",
                self.objects_min,
                self.objects_max,
                self.vocab.shapes.len()
            )));
        }
        if self.objects_per_caption == 0 || self.captions_per_scene == 0 {
            return Err(Error::contract("captions must mention at least one object"));
        }
        if self.val_fraction + self.test_fraction > 1.0 {
            return Err(Error::contract("split fractions exceed 1"));
        }
        Ok(())
    }

    pub fn image_extractor(&self) -> ImageExtractor {
        ImageExtractor::new(
            self.vocab.shapes.len(),
            self.vocab.colors.len(),
            self.vocab.sizes.len(),
        )
    }

    /// Canonical answer vocabulary: colors followed by shapes.
    pub fn answers(&self) -> Vec<String> {
        self.vocab
            .colors
            .iter()
            .chain(&self.vocab.shapes)
            .cloned()
            .collect()
    }

    /// Surface form of every vocabulary word after domain shift.
    pub fn surface_map(&self) -> HashMap<String, String> {
        let mut all: Vec<&String> = self.vocab.all_words().collect();
        all.sort();
        all.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_d0a1);
        all.shuffle(&mut rng);
        let n_shift = (self.domain_shift * all.len() as f64).round() as usize;
        all.iter()
            .enumerate()
            .map(|(i, w)| {
                let s = if i < n_shift { alternate(w) } else { (*w).clone() };
                ((*w).clone(), s)
            })
            .collect()
    }
}

/// A scene with its ground truth, what the image shows, and its captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneItem {
    pub id: u64,
    pub truth: SyntheticScene,
    pub observed: SyntheticScene,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QuestionKind {
    ColorOf { shape: u16 },
    ShapeAt { cell: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub qid: u64,
    pub scene: u64,
    pub question: String,
    pub answer: String,
    pub split: Split,
    pub kind: QuestionKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: GenSpec,
    pub scenes: Vec<SceneItem>,
    pub vqa: Vec<VqaItem>,
}

/// One claim made by a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Claim {
    pub cell: usize,
    pub object: SceneObject,
}

fn templates(set: u32) -> &'static [&'static str] {
    match set % 2 {
        0 => &[
            "a {size} {color} {shape} at the {row} {col}",
            "there is a {size} {color} {shape} in the {row} {col}",
            "the {row} {col} has a {size} {color} {shape}",
        ],
        _ => &[
            "{row} {col} shows one {size} {color} {shape}",
            "one {size} {color} {shape} sits {row} {col}",
            "we see a {size} {color} {shape} toward the {row} {col}",
        ],
    }
}

fn render_phrase(
    template: &str,
    spec: &GenSpec,
    surface: &HashMap<String, String>,
    grid_cols: usize,
    claim: &Claim,
) -> String {
    let v = &spec.vocab;
    let sf = |w: &String| surface.get(w).cloned().unwrap_or_else(|| w.clone());
    let (r, c) = (claim.cell / grid_cols, claim.cell % grid_cols);
    template
        .replace("{size}", &sf(&v.sizes[claim.object.size as usize]))
        .replace("{color}", &sf(&v.colors[claim.object.color as usize]))
        .replace("{shape}", &sf(&v.shapes[claim.object.shape as usize]))
        .replace("{row}", &sf(&v.rows[r]))
        .replace("{col}", &sf(&v.cols[c]))
}

/// Recovers the attribute claims of a caption produced under `spec`.
pub fn parse_caption(caption: &str, spec: &GenSpec) -> Result<Vec<Claim>> {
    let surface = spec.surface_map();
    let inverse: HashMap<&str, &str> = surface
        .iter()
        .map(|(k, v)| (v.as_str(), k.as_str()))
        .collect();
    let idx = |list: &[String], w: &str| list.iter().position(|x| x == w);
    let v = &spec.vocab;
    let tokens = tokenize(caption);
    let mut claims = Vec::new();
    for segment in tokens.split(|t| t == "and") {
        let canon: Vec<&str> = segment
            .iter()
            .map(|t| inverse.get(t.as_str()).copied().unwrap_or(t.as_str()))
            .collect();
        let attrs = canon.windows(3).find_map(|w| {
            Some((idx(&v.sizes, w[0])?, idx(&v.colors, w[1])?, idx(&v.shapes, w[2])?))
        });
        let pos = canon
            .windows(2)
            .find_map(|w| Some((idx(&v.rows, w[0])?, idx(&v.cols, w[1])?)));
        match (attrs, pos) {
            (Some((size, color, shape)), Some((r, c))) => claims.push(Claim {
                cell: r * spec.grid_cols + c,
                object: SceneObject {
                    shape: shape as u16,
                    color: color as u16,
                    size: size as u16,
                },
            }),
            _ => {
                return Err(Error::contract(format!(
                    "cannot parse caption segment {:?}",
                    segment.join(" ")
                )))
            }
        }
    }
    Ok(claims)
}

/// True iff every claim in every caption matches the scene's ground truth.
pub fn caption_is_faithful(caption: &str, scene: &SyntheticScene, spec: &GenSpec) -> bool {
    match parse_caption(caption, spec) {
        Ok(claims) => claims
            .iter()
            .all(|c| scene.cells.get(c.cell).copied().flatten() == Some(c.object)),
        Err(_) => false,
    }
}

/// Rule-based answer to a question about `truth`.
pub fn oracle_answer(truth: &SyntheticScene, kind: QuestionKind, spec: &GenSpec) -> Option<String> {
    match kind {
        QuestionKind::ColorOf { shape } => truth
            .objects()
            .find(|(_, o)| o.shape == shape)
            .map(|(_, o)| spec.vocab.colors[o.color as usize].clone()),
        QuestionKind::ShapeAt { cell } => truth
            .cells
            .get(cell)
            .copied()
            .flatten()
            .map(|o| spec.vocab.shapes[o.shape as usize].clone()),
    }
}

fn question_text(kind: QuestionKind, spec: &GenSpec) -> String {
    let v = &spec.vocab;
    match kind {
        QuestionKind::ColorOf { shape } => {
            format!("what color is the {}", v.shapes[shape as usize])
        }
        QuestionKind::ShapeAt { cell } => format!(
            "what shape is at the {} {}",
            v.rows[cell / spec.grid_cols],
            v.cols[cell % spec.grid_cols]
        ),
    }
}

fn random_scene(spec: &GenSpec, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let cells = spec.grid_rows * spec.grid_cols;
    let n = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut positions: Vec<usize> = (0..cells).collect();
    positions.shuffle(rng);
    let mut shapes: Vec<u16> = (0..spec.vocab.shapes.len() as u16).collect();
    shapes.shuffle(rng);
    let mut scene = SyntheticScene::empty(spec.grid_rows, spec.grid_cols);
    for (&cell, &shape) in positions.iter().zip(&shapes).take(n) {
        scene.cells[cell] = Some(SceneObject {
            shape,
            color: rng.random_range(0..spec.vocab.colors.len()) as u16,
            size: rng.random_range(0..spec.vocab.sizes.len()) as u16,
        });
    }
    scene
}

fn captions_for(
    truth: &SyntheticScene,
    spec: &GenSpec,
    surface: &HashMap<String, String>,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let claims: Vec<Claim> = truth
        .objects()
        .map(|(cell, o)| Claim { cell, object: *o })
        .collect();
    let per = spec.objects_per_caption.min(claims.len());
    let temps = templates(spec.template_set);
    let mut out: Vec<String> = Vec::with_capacity(spec.captions_per_scene);
    let mut attempts = 0;
    while out.len() < spec.captions_per_scene {
        attempts += 1;
        let mut chosen = claims.clone();
        chosen.shuffle(rng);
        chosen.truncate(per);
        let caption = chosen
            .iter()
            .map(|c| {
                let t = temps[rng.random_range(0..temps.len())];
                render_phrase(t, spec, surface, truth.grid_cols, c)
            })
            .collect::<Vec<_>>()
            .join(" and ");
        // distinct captions unless the scene cannot produce enough of them
        if !out.contains(&caption) || attempts > 200 {
            out.push(caption);
        }
    }
    out
}

/// Generates a corpus. Pure function of `spec`.
pub fn generate(spec: &GenSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surface = spec.surface_map();
    let n_val = (spec.val_fraction * spec.n_pairs as f64).round() as usize;
    let n_test = (spec.test_fraction * spec.n_pairs as f64).round() as usize;
    let n_train = spec.n_pairs.saturating_sub(n_val + n_test);
    let mut scenes = Vec::with_capacity(spec.n_pairs);
    let mut vqa = Vec::new();
    for i in 0..spec.n_pairs {
        let truth = random_scene(spec, &mut rng);
        let mut observed = truth.clone();
        for cell in observed.cells.iter_mut().flatten() {
            if rng.random_bool(spec.visual_noise) {
                cell.color = HIDDEN_COLOR;
            }
        }
        let captions = captions_for(&truth, spec, &surface, &mut rng);
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let objects: Vec<(usize, SceneObject)> =
            truth.objects().map(|(c, o)| (c, *o)).collect();
        for _ in 0..spec.questions_per_scene {
            let (cell, obj) = objects[rng.random_range(0..objects.len())];
            let kind = if rng.random_bool(0.5) {
                QuestionKind::ColorOf { shape: obj.shape }
            } else {
                QuestionKind::ShapeAt { cell }
            };
            let answer = oracle_answer(&truth, kind, spec).expect("question about a present object");
            vqa.push(VqaItem {
                qid: vqa.len() as u64,
                scene: i as u64,
                question: question_text(kind, spec),
                answer,
                split,
                kind,
            });
        }
        scenes.push(SceneItem {
            id: i as u64,
            truth,
            observed,
            captions,
            split,
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        scenes,
        vqa,
    })
}

/// File names used by [`write_corpus`].
pub const IMAGE_FILE: &str = "images.xfea";
pub const KS_FILE: &str = "ks.jsonl";
pub const VQA_FILE: &str = "vqa.jsonl";
pub const SPEC_FILE: &str = "gen.json";

/// Knowledge-source record id of caption `j` of scene `scene`.
pub fn record_id(scene: u64, j: usize, captions_per_scene: usize) -> u64 {
    scene * captions_per_scene as u64 + j as u64
}

impl Corpus {
    /// Knowledge-source records: one per (scene, caption) pair, all pointing
    /// at the scene's image record in [`IMAGE_FILE`].
    pub fn knowledge_records(&self) -> Vec<KnowledgeRecord> {
        let per = self.spec.captions_per_scene;
        self.scenes
            .iter()
            .flat_map(|s| {
                s.captions.iter().enumerate().map(move |(j, c)| KnowledgeRecord {
                    id: record_id(s.id, j, per),
                    caption: Some(c.clone()),
                    image: Some(ImageRef {
                        file: IMAGE_FILE.to_string(),
                        record: s.id as u32,
                    }),
                    split: s.split,
                })
            })
            .collect()
    }

    /// Token histogram over every caption, for distribution comparisons.
    pub fn caption_token_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for s in &self.scenes {
            for c in &s.captions {
                for t in tokenize(c) {
                    *h.entry(t).or_insert(0) += 1;
                }
            }
        }
        h
    }
}

#[derive(Serialize, Deserialize)]
struct VqaLine {
    qid: u64,
    scene: u64,
    image: ImageRef,
    question: String,
    answer: String,
    split: Split,
}

/// VQA item as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaRecord {
    pub qid: u64,
    pub scene: u64,
    pub image: ImageRef,
    pub question: String,
    pub answer: String,
    pub split: Split,
}

/// Writes image features, the knowledge source, VQA items and the spec.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ex = corpus.spec.image_extractor();
    let records = corpus
        .scenes
        .iter()
        .map(|s| ex.extract(&s.observed))
        .collect::<Result<Vec<_>>>()?;
    FeatureFile::new(Modality::Image, ex.raw_dim(), records)?.save(dir.join(IMAGE_FILE))?;
    crate::retriever::KnowledgeSource::new("synthetic", corpus.knowledge_records())?
        .save_jsonl(dir.join(KS_FILE))?;
    let mut w = BufWriter::new(File::create(dir.join(VQA_FILE))?);
    for q in &corpus.vqa {
        let line = VqaLine {
            qid: q.qid,
            scene: q.scene,
            image: ImageRef {
                file: IMAGE_FILE.to_string(),
                record: q.scene as u32,
            },
            question: q.question.clone(),
            answer: q.answer.clone(),
            split: q.split,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(&corpus.spec)?)?;
    Ok(())
}

pub fn read_vqa(path: impl AsRef<Path>) -> Result<Vec<VqaRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: VqaLine = serde_json::from_str(l)?;
            Ok(VqaRecord {
                qid: v.qid,
                scene: v.scene,
                image: v.image,
                question: v.question,
                answer: v.answer,
                split: v.split,
            })
        })
        .collect()
}

pub fn read_spec(path: impl AsRef<Path>) -> Result<GenSpec> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GenSpec {
        GenSpec {
            seed: 42,
            n_pairs: n,
            questions_per_scene: 2,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&spec(30)).unwrap(), generate(&spec(30)).unwrap());
    }

    #[test]
    fn one_scene_five_captions() {
        let c = generate(&spec(1)).unwrap();
        assert_eq!(c.scenes.len(), 1);
        assert_eq!(c.scenes[0].captions.len(), 5);
        let mut uniq = c.scenes[0].captions.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 5);
    }

    #[test]
    fn captions_are_faithful_and_answers_derivable() {
        for shift in [0.0, 0.5, 1.0] {
            let s = GenSpec {
                domain_shift: shift,
                visual_noise: 0.5,
                ..spec(200)
            };
            let c = generate(&s).unwrap();
            for scene in &c.scenes {
                for cap in &scene.captions {
                    assert!(caption_is_faithful(cap, &scene.truth, &s), "{cap}");
                }
            }
            for q in &c.vqa {
                let truth = &c.scenes[q.scene as usize].truth;
                assert_eq!(oracle_answer(truth, q.kind, &s).as_deref(), Some(q.answer.as_str()));
                assert!(s.answers().contains(&q.answer));
            }
        }
    }

    #[test]
    fn domain_shift_moves_token_distribution() {
        let base = generate(&spec(300)).unwrap().caption_token_histogram();
        let shifted = generate(&GenSpec {
            domain_shift: 0.5,
            ..spec(300)
        })
        .unwrap()
        .caption_token_histogram();
        let same = generate(&GenSpec {
            seed: 43,
            ..spec(300)
        })
        .unwrap()
        .caption_token_histogram();
        // Pearson chi-squared over the union of tokens, both histograms as samples
        let chi2 = |a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>| {
            let (na, nb) = (a.values().sum::<usize>() as f64, b.values().sum::<usize>() as f64);
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            let mut stat = 0.0;
            for k in keys {
                let (x, y) = (
                    *a.get(k).unwrap_or(&0) as f64,
                    *b.get(k).unwrap_or(&0) as f64,
                );
                let tot = x + y;
                let ea = tot * na / (na + nb);
                let eb = tot * nb / (na + nb);
                stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
            }
            stat
        };
        let shifted_stat = chi2(&base, &shifted);
        let same_stat = chi2(&base, &same);
        assert!(shifted_stat > 1000.0, "{shifted_stat}");
        assert!(same_stat < shifted_stat / 10.0, "{same_stat} vs {shifted_stat}");
    }

    #[test]
    fn noise_hides_observed_colors_only() {
        let s = GenSpec {
            visual_noise: 1.0,
            ..spec(50)
        };
        let c = generate(&s).unwrap();
        let mut changed = 0;
        for scene in &c.scenes {
            for (t, o) in scene.truth.cells.iter().zip(&scene.observed.cells) {
                match (t, o) {
                    (Some(t), Some(o)) => {
                        assert_eq!((t.shape, t.size), (o.shape, o.size));
                        assert_eq!(o.color, HIDDEN_COLOR);
                        changed += 1;
                    }
                    (None, None) => {}
                    _ => panic!("noise moved an object"),
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = GenSpec {
            domain_shift: 1.5,
            ..spec(3)
        };
        assert!(generate(&bad).is_err());
        let mut bad = spec(3);
        bad.vocab.colors.clear();
        assert!(generate(&bad).is_err());
    }
}
