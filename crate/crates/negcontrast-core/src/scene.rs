//! Synthetic world sampler: symbolic scenes paired with grammar
//! captions, negated captions, and set-difference distractor scenes,
//! plus JSONL persistence and train/eval splitting.
//!
//! A scene is just the set of concept ids it depicts; the first entry
//! is always the subject. The distractor scene of a triplet is the
//! scene minus the negated object's concept, so it depicts exactly
//! what the negated caption claims.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::{self, Grammar, NegatedCaption, NegationSpec, NegationWord, ParsedCaption};
use crate::error::{Error, Result};
use crate::sha256_hex;
use crate::tensor::Rng;

/// Vocabulary lists plus the caption-complexity distribution.
/// `k_weights[i]` is the unnormalized probability of drawing K = i+1
/// predicate-object pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub subjects: Vec<String>,
    pub predicates: Vec<String>,
    pub objects: Vec<String>,
    #[serde(default = "default_connectives")]
    pub connectives: Vec<String>,
    pub k_weights: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_connectives() -> Vec<String> {
    vec!["and".to_string()]
}

impl WorldConfig {
    pub fn load(path: &Path) -> Result<WorldConfig> {
        let cfg: WorldConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (category, len) in [
            ("subjects", self.subjects.len()),
            ("predicates", self.predicates.len()),
            ("objects", self.objects.len()),
        ] {
            if len < 2 {
                return Err(Error::VocabTooSmall {
                    category,
                    needed: 2,
                    available: len,
                });
            }
        }
        if self.k_weights.is_empty() || self.k_weights.len() > 5 {
            return Err(Error::InvalidConfig(
                "k_weights must have between 1 and 5 entries".into(),
            ));
        }
        if self.k_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("k_weights must be finite and nonnegative".into()));
        }
        if self.k_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("k_weights must have positive mass".into()));
        }
        // Distinct object draws must be possible for every reachable K.
        let max_k = self
            .k_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i + 1)
            .max()
            .unwrap_or(0);
        if self.objects.len() < max_k {
            return Err(Error::VocabTooSmall {
                category: "objects",
                needed: max_k,
                available: self.objects.len(),
            });
        }
        self.grammar().validate()
    }

    pub fn grammar(&self) -> Grammar {
        Grammar {
            subjects: self.subjects.clone(),
            predicates: self.predicates.clone(),
            objects: self.objects.clone(),
            connectives: self.connectives.clone(),
        }
    }

    /// Subjects occupy concept ids [0, S); objects [S, S + O).
    pub fn concept_count(&self) -> usize {
        self.subjects.len() + self.objects.len()
    }

    pub fn subject_concept(&self, index: usize) -> u32 {
        index as u32
    }

    pub fn object_concept(&self, index: usize) -> u32 {
        (self.subjects.len() + index) as u32
    }

    /// Every token the world can emit, sorted, plus the words used by
    /// the negation templates. This fixes the text-encoder vocabulary.
    pub fn token_inventory(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for list in [&self.subjects, &self.predicates, &self.objects, &self.connectives] {
            for phrase in list {
                for t in caption::tokenize(phrase) {
                    set.insert(t);
                }
            }
        }
        for w in ["no", "not", "without", "but", "with"] {
            set.insert(w.to_string());
        }
        set.into_iter().collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("world config serializes")
                .as_bytes(),
        )
    }

    /// Built-in 50-concept world: 10 subjects, 40 objects, with the
    /// complexity mix skewed toward short captions.
    pub fn default_world() -> WorldConfig {
        let subjects = [
            "a woman", "a man", "a child", "a dog", "a cat", "a horse", "a bird", "a boat",
            "a banner", "a table",
        ];
        // Two-token predicates keep the negation rewrites length-
        // neutral on average: "without <obj>" drops one token, "with
        // no <obj>" is even, "but not <pred> <obj>" adds one. A model
        // that only counts tokens gains nothing over chance.
        let predicates = [
            "next to",
            "close to",
            "placed on",
            "tied to",
            "resting on",
            "leaning against",
            "held above",
            "set behind",
        ];
        let objects = [
            "a hat", "a ball", "a book", "a lamp", "a flag", "an inscription", "a kite",
            "a drum", "a basket", "a ribbon", "a candle", "a mirror", "a ladder", "a bucket",
            "a rope", "a bell", "a stone", "a shell", "a feather", "a coin", "a map", "a brush",
            "a jar", "a wheel", "a chain", "a pearl", "a scarf", "a glove", "a torch",
            "a crate", "a plank", "a flower", "a branch", "a leaf", "a cloud", "a star",
            "a fence", "a sign", "a wagon", "a pole",
        ];
        WorldConfig {
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
            predicates: predicates.iter().map(|s| s.to_string()).collect(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            connectives: default_connectives(),
            // Complexity counts of the evaluation split this world
            // mirrors, normalized at draw time.
            k_weights: vec![16926.0, 15707.0, 5450.0, 1430.0, 399.0],
            seed: None,
        }
    }
}

/// A symbolic image: the concepts it depicts. `concepts[0]` is the
/// subject; the rest are the pair objects in caption order. All ids
/// are distinct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub concepts: Vec<u32>,
}

impl Scene {
    pub fn subject_concept(&self) -> u32 {
        self.concepts[0]
    }

    pub fn contains(&self, concept: u32) -> bool {
        self.concepts.contains(&concept)
    }

    pub fn without_concept(&self, concept: u32) -> Scene {
        Scene {
            id: self.id,
            concepts: self
                .concepts
                .iter()
                .copied()
                .filter(|c| *c != concept)
                .collect(),
        }
    }
}

/// One training/evaluation sample: scene, true caption, negated
/// caption, and the distractor scene matching the negated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegTriplet {
    pub scene: Scene,
    pub caption: String,
    pub parsed: ParsedCaption,
    pub negated: NegatedCaption,
    pub distractor_scene: Scene,
}

impl NegTriplet {
    pub fn k(&self) -> usize {
        self.parsed.pairs.len()
    }

    pub fn negation_word(&self) -> NegationWord {
        self.negated.spec.word
    }

    /// Concept id of the negated object.
    pub fn negated_concept(&self) -> u32 {
        self.scene.concepts[1 + self.negated.spec.pair_index]
    }
}

/// Provenance record written alongside a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world_hash: String,
    pub total: usize,
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
    pub subject_count: usize,
    pub concept_count: usize,
    pub tokens: Vec<String>,
}

impl DatasetManifest {
    /// Concept id ranges for basis generation: subjects first, then
    /// objects.
    pub fn concept_groups(&self) -> Vec<usize> {
        if self.subject_count > 0 && self.subject_count < self.concept_count {
            vec![self.subject_count, self.concept_count - self.subject_count]
        } else {
            vec![self.concept_count]
        }
    }
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn sample_k(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.f64() * total;
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target < 0.0 {
            return i + 1;
        }
    }
    weights.len()
}

/// Draw `count` distinct indices from [0, n) via partial Fisher-Yates.
fn sample_distinct(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    debug_assert!(count <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Sample a scene and its parsed caption: K from the configured
/// distribution, one subject, K distinct objects, predicates drawn
/// with replacement.
pub fn sample_scene(rng: &mut Rng, cfg: &WorldConfig, id: u64) -> Result<(Scene, ParsedCaption)> {
    let k = sample_k(rng, &cfg.k_weights);
    if cfg.objects.len() < k {
        return Err(Error::VocabTooSmall {
            category: "objects",
            needed: k,
            available: cfg.objects.len(),
        });
    }
    let subject_idx = rng.below(cfg.subjects.len());
    let object_idxs = sample_distinct(rng, cfg.objects.len(), k);
    let mut concepts = Vec::with_capacity(1 + k);
    concepts.push(cfg.subject_concept(subject_idx));
    let mut pairs = Vec::with_capacity(k);
    for oi in &object_idxs {
        concepts.push(cfg.object_concept(*oi));
        let pi = rng.below(cfg.predicates.len());
        pairs.push((cfg.predicates[pi].clone(), cfg.objects[*oi].clone()));
    }
    Ok((
        Scene { id, concepts },
        ParsedCaption {
            subject: cfg.subjects[subject_idx].clone(),
            pairs,
        },
    ))
}

/// Build the full triplet for a sampled scene: draw a negation spec,
/// realize both captions, and derive the distractor scene by removing
/// the negated object's concept.
pub fn make_triplet(scene: Scene, parsed: ParsedCaption, rng: &mut Rng) -> Result<NegTriplet> {
    debug_assert!(caption::validate(&parsed).is_accept());
    let spec = NegationSpec::sample(rng, parsed.pairs.len());
    let negated = caption::negate(&parsed, &spec)?;
    let negated_concept = scene.concepts[1 + spec.pair_index];
    let distractor_scene = scene.without_concept(negated_concept);
    Ok(NegTriplet {
        caption: caption::realize(&parsed),
        parsed,
        negated,
        distractor_scene,
        scene,
    })
}

/// Generate `n` triplets deterministically. Each item uses its own
/// RNG stream derived from the base seed, so generation order never
/// affects the output.
pub fn generate(cfg: &WorldConfig, n: usize, seed: u64) -> Result<Vec<NegTriplet>> {
    cfg.validate()?;
    let base = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.derive(i as u64);
        let (scene, parsed) = sample_scene(&mut rng, cfg, i as u64)?;
        out.push(make_triplet(scene, parsed, &mut rng)?);
    }
    Ok(out)
}

/// Shuffled disjoint split; the eval side gets round(fraction * N)
/// items. Errors if either side would be empty.
pub fn split_train_eval<T>(
    mut items: Vec<T>,
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::EmptySplit);
    }
    let n = items.len();
    let eval_n = (fraction * n as f64).round() as usize;
    if eval_n == 0 || eval_n >= n {
        return Err(Error::EmptySplit);
    }
    rng.shuffle(&mut items);
    let eval = items.split_off(n - eval_n);
    Ok((items, eval))
}

/// Wire format: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct TripletRecord {
    id: u64,
    concepts: Vec<u32>,
    caption: String,
    subject: String,
    pairs: Vec<(String, String)>,
    neg_index: u32,
    neg_word: String,
    negated_caption: String,
    distractor_concepts: Vec<u32>,
}

impl From<&NegTriplet> for TripletRecord {
    fn from(t: &NegTriplet) -> Self {
        TripletRecord {
            id: t.scene.id,
            concepts: t.scene.concepts.clone(),
            caption: t.caption.clone(),
            subject: t.parsed.subject.clone(),
            pairs: t.parsed.pairs.clone(),
            neg_index: t.negated.spec.pair_index as u32,
            neg_word: t.negated.spec.word.as_str().to_string(),
            negated_caption: t.negated.text.clone(),
            distractor_concepts: t.distractor_scene.concepts.clone(),
        }
    }
}

impl TripletRecord {
    fn into_triplet(self, line: usize) -> Result<NegTriplet> {
        let schema_err = |message: String| Error::SchemaError { line, message };
        let parsed = ParsedCaption {
            subject: self.subject,
            pairs: self.pairs,
        };
        if parsed.pairs.is_empty() {
            return Err(schema_err("record has no predicate-object pairs".into()));
        }
        if self.concepts.len() != 1 + parsed.pairs.len() {
            return Err(schema_err(format!(
                "{} concepts for {} pairs",
                self.concepts.len(),
                parsed.pairs.len()
            )));
        }
        let word = NegationWord::parse(&self.neg_word)
            .ok_or_else(|| schema_err(format!("unknown negation word '{}'", self.neg_word)))?;
        let index = self.neg_index as usize;
        if index >= parsed.pairs.len() {
            return Err(schema_err(format!(
                "neg_index {index} out of range for {} pairs",
                parsed.pairs.len()
            )));
        }
        let spec = NegationSpec {
            pair_index: index,
            word,
        };
        Ok(NegTriplet {
            scene: Scene {
                id: self.id,
                concepts: self.concepts,
            },
            caption: self.caption,
            negated: NegatedCaption {
                text: self.negated_caption,
                source: parsed.clone(),
                spec,
            },
            parsed,
            distractor_scene: Scene {
                id: self.id,
                concepts: self.distractor_concepts,
            },
        })
    }
}

pub fn write_jsonl(triplets: &[NegTriplet], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        serde_json::to_writer(&mut w, &TripletRecord::from(t))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<NegTriplet>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TripletRecord = serde_json::from_str(&line).map_err(|e| Error::SchemaError {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record.into_triplet(i + 1)?);
    }
    Ok(out)
}
