//! Evaluation protocols: triplet matching accuracy with per-complexity
//! and per-negation-word breakdowns, the standard-vs-negated prompt
//! classification delta, synthetic hard-negative folds with R@1, and
//! report emission.
//!
//! Ties count as incorrect everywhere: a prediction is right only if
//! the true candidate's similarity strictly exceeds every distractor.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::{realize, ParsedCaption};
use crate::encoders::{Checkpoint, ImageBasis, TextEncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::scene::{NegTriplet, Scene};
use crate::tensor::{cosine_sim, Rng};

/// Everything needed to score captions against scenes.
pub struct Model {
    pub basis: ImageBasis,
    pub text: TextEncoderParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Model {
        Model {
            vocab: ckpt.vocab(),
            basis: ckpt.basis,
            text: ckpt.text,
        }
    }

    pub fn encode_scene(&self, scene: &Scene) -> Result<Vec<f64>> {
        self.basis.encode_image(scene)
    }

    pub fn encode_caption(&self, text: &str) -> Result<Vec<f64>> {
        self.text.encode_text(&self.vocab.encode(text))
    }
}

/// Strict match rule: the true caption wins only with strictly higher
/// similarity; a tie is an incorrect prediction.
pub fn match_triplet(sim_true: f64, sim_neg: f64) -> bool {
    sim_true > sim_neg
}

/// Correct/total counter for one breakdown bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub correct: usize,
    pub count: usize,
}

impl Bucket {
    pub fn add(&mut self, correct: bool) {
        self.count += 1;
        if correct {
            self.correct += 1;
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Matching accuracy over triplets, overall and split by caption
/// complexity K and by negation word.
#[derive(Debug, Clone)]
pub struct CcnegBreakdown {
    pub overall: Bucket,
    pub per_k: BTreeMap<u32, Bucket>,
    pub per_word: BTreeMap<String, Bucket>,
}

pub fn ccneg_accuracy(model: &Model, triplets: &[NegTriplet]) -> Result<CcnegBreakdown> {
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_word: BTreeMap<String, Bucket> = ["no", "not", "without"]
        .into_iter()
        .map(|w| (w.to_string(), Bucket::default()))
        .collect();
    let mut per_k: BTreeMap<u32, Bucket> = BTreeMap::new();
    let mut overall = Bucket::default();

    for t in triplets {
        let image = model.encode_scene(&t.scene)?;
        let sim_true = cosine_sim(&image, &model.encode_caption(&t.caption)?)?;
        let sim_neg = cosine_sim(&image, &model.encode_caption(&t.negated.text)?)?;
        let correct = match_triplet(sim_true, sim_neg);
        overall.add(correct);
        per_k.entry(t.k() as u32).or_default().add(correct);
        per_word
            .entry(t.negation_word().as_str().to_string())
            .or_default()
            .add(correct);
    }
    Ok(CcnegBreakdown {
        overall,
        per_k,
        per_word,
    })
}

/// A named image class for prompt-based classification.
#[derive(Debug, Clone)]
pub struct DeltaClass {
    pub name: String,
}

/// Standard minus negated top-1 accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub standard_accuracy: f64,
    pub negated_accuracy: f64,
    pub delta: f64,
}

fn strict_argmax_is(sims: &[f64], label: usize) -> bool {
    sims.iter()
        .enumerate()
        .all(|(k, s)| k == label || sims[label] > *s)
}

/// Classify each labeled image twice, once against standard prompts
/// ("this is a photo of a {class}") and once against negated prompts
/// ("this is not a photo of a {class}"); the delta is the difference
/// of the two top-1 accuracies. A model that understands negation
/// scores high on the first and low on the second.
pub fn delta_metric(
    model: &Model,
    classes: &[DeltaClass],
    images: &[(Scene, usize)],
) -> Result<DeltaReport> {
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut standard = Vec::with_capacity(classes.len());
    let mut negated = Vec::with_capacity(classes.len());
    for c in classes {
        standard.push(model.encode_caption(&format!("this is a photo of a {}", c.name))?);
        negated.push(model.encode_caption(&format!("this is not a photo of a {}", c.name))?);
    }

    let mut std_bucket = Bucket::default();
    let mut neg_bucket = Bucket::default();
    for (scene, label) in images {
        if *label >= classes.len() {
            return Err(Error::IndexOutOfRange {
                index: *label,
                len: classes.len(),
            });
        }
        let image = model.encode_scene(scene)?;
        let sims_std: Vec<f64> = standard
            .iter()
            .map(|p| cosine_sim(&image, p))
            .collect::<Result<_>>()?;
        let sims_neg: Vec<f64> = negated
            .iter()
            .map(|p| cosine_sim(&image, p))
            .collect::<Result<_>>()?;
        std_bucket.add(strict_argmax_is(&sims_std, *label));
        neg_bucket.add(strict_argmax_is(&sims_neg, *label));
    }
    Ok(DeltaReport {
        standard_accuracy: std_bucket.accuracy(),
        negated_accuracy: neg_bucket.accuracy(),
        delta: std_bucket.accuracy() - neg_bucket.accuracy(),
    })
}

/// Caption perturbation families for hard-negative evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldKind {
    ReplaceObject,
    AddObject,
    SwapObject,
    ReplaceAttribute,
}

impl FoldKind {
    pub const ALL: [FoldKind; 4] = [
        FoldKind::ReplaceObject,
        FoldKind::AddObject,
        FoldKind::SwapObject,
        FoldKind::ReplaceAttribute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FoldKind::ReplaceObject => "replace-object",
            FoldKind::AddObject => "add-object",
            FoldKind::SwapObject => "swap-object",
            FoldKind::ReplaceAttribute => "replace-attribute",
        }
    }
}

/// A (true caption, perturbed caption) pair with its scene.
#[derive(Debug, Clone)]
pub struct FoldPair {
    pub scene: Scene,
    pub true_caption: String,
    pub perturbed_caption: String,
}

/// Object and predicate inventories harvested from a dataset, used as
/// the draw space for perturbations.
#[derive(Debug, Clone)]
pub struct FoldVocab {
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
}

impl FoldVocab {
    pub fn from_triplets(triplets: &[NegTriplet]) -> FoldVocab {
        let mut objects = BTreeSet::new();
        let mut predicates = BTreeSet::new();
        for t in triplets {
            for (pred, obj) in &t.parsed.pairs {
                predicates.insert(pred.clone());
                objects.insert(obj.clone());
            }
        }
        FoldVocab {
            objects: objects.into_iter().collect(),
            predicates: predicates.into_iter().collect(),
        }
    }
}

fn draw_excluding(rng: &mut Rng, pool: &[String], exclude: &BTreeSet<&str>) -> Option<String> {
    let candidates: Vec<&String> = pool.iter().filter(|o| !exclude.contains(o.as_str())).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.below(candidates.len())].clone())
    }
}

/// Perturb one caption. Replacement and addition draw objects that are
/// absent from the scene, so the perturbed caption is genuinely false
/// of the image; swap needs at least two pairs.
pub fn perturb_caption(
    parsed: &ParsedCaption,
    fold: FoldKind,
    vocab: &FoldVocab,
    rng: &mut Rng,
) -> Result<String> {
    let k = parsed.pairs.len();
    let present: BTreeSet<&str> = parsed.pairs.iter().map(|(_, o)| o.as_str()).collect();
    let mut modified = parsed.clone();
    match fold {
        FoldKind::ReplaceObject => {
            let idx = rng.below(k);
            let replacement = draw_excluding(rng, &vocab.objects, &present)
                .ok_or(Error::InsufficientVocab { category: "objects" })?;
            modified.pairs[idx].1 = replacement;
        }
        FoldKind::AddObject => {
            let extra = draw_excluding(rng, &vocab.objects, &present)
                .ok_or(Error::InsufficientVocab { category: "objects" })?;
            let pred = parsed.pairs[k - 1].0.clone();
            modified.pairs.push((pred, extra));
        }
        FoldKind::SwapObject => {
            if k < 2 {
                return Err(Error::KTooSmall { k, needed: 2 });
            }
            let i = rng.below(k);
            let mut j = rng.below(k - 1);
            if j >= i {
                j += 1;
            }
            let obj_i = modified.pairs[i].1.clone();
            modified.pairs[i].1 = modified.pairs[j].1.clone();
            modified.pairs[j].1 = obj_i;
        }
        FoldKind::ReplaceAttribute => {
            let idx = rng.below(k);
            let current: BTreeSet<&str> = [parsed.pairs[idx].0.as_str()].into_iter().collect();
            let replacement = draw_excluding(rng, &vocab.predicates, &current)
                .ok_or(Error::InsufficientVocab { category: "predicates" })?;
            modified.pairs[idx].0 = replacement;
        }
    }
    Ok(realize(&modified))
}

/// Build one fold over a dataset. The swap fold covers only captions
/// with K >= 2 and errors if no caption qualifies.
pub fn make_hardneg_fold(
    triplets: &[NegTriplet],
    fold: FoldKind,
    rng: &mut Rng,
) -> Result<Vec<FoldPair>> {
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = FoldVocab::from_triplets(triplets);
    let mut pairs = Vec::new();
    for t in triplets {
        if fold == FoldKind::SwapObject && t.k() < 2 {
            continue;
        }
        let perturbed = perturb_caption(&t.parsed, fold, &vocab, rng)?;
        pairs.push(FoldPair {
            scene: t.scene.clone(),
            true_caption: t.caption.clone(),
            perturbed_caption: perturbed,
        });
    }
    if pairs.is_empty() {
        return Err(Error::KTooSmall { k: 1, needed: 2 });
    }
    Ok(pairs)
}

/// R@1 over fold pairs: the fraction whose image is strictly closer to
/// the true caption than to the perturbed one.
pub fn fold_r1(model: &Model, pairs: &[FoldPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bucket = Bucket::default();
    for p in pairs {
        let image = model.encode_scene(&p.scene)?;
        let sim_true = cosine_sim(&image, &model.encode_caption(&p.true_caption)?)?;
        let sim_pert = cosine_sim(&image, &model.encode_caption(&p.perturbed_caption)?)?;
        bucket.add(match_triplet(sim_true, sim_pert));
    }
    Ok(bucket.accuracy())
}

/// Bucket with its derived accuracy, as written to reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

impl From<Bucket> for BucketReport {
    fn from(b: Bucket) -> Self {
        BucketReport {
            correct: b.correct,
            count: b.count,
            accuracy: b.accuracy(),
        }
    }
}

/// Full evaluation output. Optional sections are omitted from the
/// JSON when the corresponding protocol was not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub total: usize,
    pub per_k: BTreeMap<u32, BucketReport>,
    pub per_word: BTreeMap<String, BucketReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<DeltaReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold_r1: Option<BTreeMap<String, f64>>,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

impl EvalReport {
    pub fn build(
        breakdown: &CcnegBreakdown,
        delta: Option<DeltaReport>,
        folds: Option<BTreeMap<String, f64>>,
        config_hash: String,
        checkpoint_hash: String,
    ) -> EvalReport {
        EvalReport {
            overall_accuracy: breakdown.overall.accuracy(),
            total: breakdown.overall.count,
            per_k: breakdown
                .per_k
                .iter()
                .map(|(k, b)| (*k, BucketReport::from(*b)))
                .collect(),
            per_word: breakdown
                .per_word
                .iter()
                .map(|(w, b)| (w.clone(), BucketReport::from(*b)))
                .collect(),
            delta,
            fold_r1: folds,
            config_hash,
            checkpoint_hash,
        }
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
