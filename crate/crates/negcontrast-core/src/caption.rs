//! Caption language: a closed grammar of `subject (predicate object)+`
//! clauses, a deterministic parser and realizer for it, negation
//! rewriting with {no, not, without}, validation filters, and the
//! in-context-learning prompt emitter for users who want to wire an
//! external LLM instead of the grammar.
//!
//! Surface forms, one clause negated per caption:
//!   without: "a woman walks on the beach without her dog"
//!   no:      "dining table with no kitchen"
//!   not:     "festive banner with an inscription, but not with flags"
//! The "not" rewrite moves the negated clause to the end; the other two
//! rewrite the clause in place and drop the connective around it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// The three negation markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegationWord {
    No,
    Not,
    Without,
}

impl NegationWord {
    pub const ALL: [NegationWord; 3] = [NegationWord::No, NegationWord::Not, NegationWord::Without];

    pub fn as_str(self) -> &'static str {
        match self {
            NegationWord::No => "no",
            NegationWord::Not => "not",
            NegationWord::Without => "without",
        }
    }

    pub fn parse(s: &str) -> Option<NegationWord> {
        match s {
            "no" => Some(NegationWord::No),
            "not" => Some(NegationWord::Not),
            "without" => Some(NegationWord::Without),
            _ => None,
        }
    }
}

/// Lowercase whitespace tokens with surrounding punctuation stripped.
/// The comma emitted by the "not" rewrite disappears here, so parsing
/// and similarity scoring see plain word sequences.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Phrase tables for the caption language. Every phrase is a short
/// token sequence; connectives join predicate-object clauses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grammar {
    pub subjects: Vec<String>,
    pub predicates: Vec<String>,
    pub objects: Vec<String>,
    pub connectives: Vec<String>,
}

impl Grammar {
    pub fn from_json_str(s: &str) -> Result<Grammar> {
        let g: Grammar = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &std::path::Path) -> Result<Grammar> {
        Grammar::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Reject tables that would break parsing or the single-negation
    /// invariant: empty phrases, phrases containing a connective or a
    /// negation marker, or an empty category.
    pub fn validate(&self) -> Result<()> {
        for (category, list) in [
            ("subjects", &self.subjects),
            ("predicates", &self.predicates),
            ("objects", &self.objects),
            ("connectives", &self.connectives),
        ] {
            if list.is_empty() {
                return Err(Error::InvalidConfig(format!("grammar '{category}' is empty")));
            }
            for phrase in list {
                let toks = tokenize(phrase);
                if toks.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "grammar '{category}' contains an empty phrase"
                    )));
                }
                for t in &toks {
                    if category != "connectives" && self.connectives.iter().any(|c| c == t) {
                        return Err(Error::InvalidConfig(format!(
                            "phrase '{phrase}' in '{category}' contains connective '{t}'"
                        )));
                    }
                    if matches!(t.as_str(), "no" | "not" | "without" | "but") {
                        return Err(Error::InvalidConfig(format!(
                            "phrase '{phrase}' in '{category}' contains reserved word '{t}'"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn tokenized(list: &[String]) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = list.iter().map(|p| tokenize(p)).collect();
        // Longest-first so greedy phrase matching prefers the most
        // specific entry; parse() still backtracks across choices.
        out.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        out
    }

    fn is_connective(&self, token: &str) -> bool {
        self.connectives.iter().any(|c| c == token)
    }
}

/// A caption decomposed into its subject and ordered
/// (predicate, object) pairs. `pairs.len()` is the complexity K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCaption {
    pub subject: String,
    pub pairs: Vec<(String, String)>,
}

impl ParsedCaption {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }
}

/// Which pair to negate and with which word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegationSpec {
    pub pair_index: usize,
    pub word: NegationWord,
}

impl NegationSpec {
    /// Uniform pair index and uniform word choice.
    pub fn sample(rng: &mut Rng, k: usize) -> NegationSpec {
        debug_assert!(k >= 1);
        NegationSpec {
            pair_index: rng.below(k),
            word: NegationWord::ALL[rng.below(3)],
        }
    }
}

/// A negated caption together with the parse and spec it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegatedCaption {
    pub text: String,
    pub source: ParsedCaption,
    pub spec: NegationSpec,
}

impl NegatedCaption {
    pub fn negated_object(&self) -> &str {
        &self.source.pairs[self.spec.pair_index].1
    }
}

/// Parse a grammar-conforming caption into subject and pairs.
///
/// Matching is longest-phrase-first with backtracking across subject
/// and predicate choices, so tables where one phrase prefixes another
/// still parse. Errors carry the furthest token position reached.
pub fn decompose(caption: &str, grammar: &Grammar) -> Result<ParsedCaption> {
    let tokens = tokenize(caption);
    let subjects = Grammar::tokenized(&grammar.subjects);
    let predicates = Grammar::tokenized(&grammar.predicates);

    let mut furthest = 0usize;
    for subj in &subjects {
        if !starts_with(&tokens, 0, subj) {
            continue;
        }
        furthest = furthest.max(subj.len());
        if let Some(pairs) = parse_pairs(&tokens, subj.len(), grammar, &predicates, &mut furthest) {
            return Ok(ParsedCaption {
                subject: subj.join(" "),
                pairs,
            });
        }
    }
    Err(Error::ParseError {
        position: furthest,
        message: if furthest == 0 {
            "no known subject at start of caption".into()
        } else {
            format!(
                "cannot continue after '{}'",
                tokens.get(furthest.saturating_sub(1)).cloned().unwrap_or_default()
            )
        },
    })
}

fn starts_with(tokens: &[String], at: usize, phrase: &[String]) -> bool {
    tokens.len() >= at + phrase.len() && tokens[at..at + phrase.len()].iter().eq(phrase.iter())
}

fn parse_pairs(
    tokens: &[String],
    start: usize,
    grammar: &Grammar,
    predicates: &[Vec<String>],
    furthest: &mut usize,
) -> Option<Vec<(String, String)>> {
    for pred in predicates {
        if !starts_with(tokens, start, pred) {
            continue;
        }
        let obj_start = start + pred.len();
        *furthest = (*furthest).max(obj_start);
        // Object runs until the next connective or end of caption;
        // grammar validation keeps connectives out of phrases.
        let obj_end = (obj_start..tokens.len())
            .find(|&i| grammar.is_connective(&tokens[i]))
            .unwrap_or(tokens.len());
        if obj_end == obj_start {
            continue;
        }
        *furthest = (*furthest).max(obj_end);
        let pair = (pred.join(" "), tokens[obj_start..obj_end].join(" "));
        if obj_end == tokens.len() {
            return Some(vec![pair]);
        }
        // A connective must be followed by another pair.
        if let Some(mut rest) = parse_pairs(tokens, obj_end + 1, grammar, predicates, furthest) {
            rest.insert(0, pair);
            return Some(rest);
        }
    }
    None
}

/// Deterministic surface form: subject followed by its clauses joined
/// with "and". Inverse of [`decompose`] on grammar output.
pub fn realize(parsed: &ParsedCaption) -> String {
    assert!(
        !parsed.pairs.is_empty(),
        "realize requires at least one predicate-object pair"
    );
    let mut text = parsed.subject.clone();
    for (i, (pred, obj)) in parsed.pairs.iter().enumerate() {
        if i > 0 {
            text.push_str(" and");
        }
        text.push(' ');
        text.push_str(pred);
        text.push(' ');
        text.push_str(obj);
    }
    text
}

/// Rewrite one pair of `parsed` as negated.
///
/// Every non-selected pair stays positively asserted; the negated
/// object appears only inside the negation clause. Objects are assumed
/// distinct across pairs, as the scene sampler guarantees.
pub fn negate(parsed: &ParsedCaption, spec: &NegationSpec) -> Result<NegatedCaption> {
    if spec.pair_index >= parsed.pairs.len() {
        return Err(Error::IndexOutOfRange {
            index: spec.pair_index,
            len: parsed.pairs.len(),
        });
    }
    let (neg_pred, neg_obj) = &parsed.pairs[spec.pair_index];
    let mut text = parsed.subject.clone();

    match spec.word {
        NegationWord::Not => {
            // Positives in order, then ", but not <pred> <obj>".
            let mut first = true;
            for (i, (pred, obj)) in parsed.pairs.iter().enumerate() {
                if i == spec.pair_index {
                    continue;
                }
                if !first {
                    text.push_str(" and");
                }
                text.push(' ');
                text.push_str(pred);
                text.push(' ');
                text.push_str(obj);
                first = false;
            }
            text.push_str(&format!(", but not {neg_pred} {neg_obj}"));
        }
        NegationWord::Without | NegationWord::No => {
            // Clause rewritten in place; the connective is dropped on
            // both sides of the negated clause.
            let mut prev_positive = false;
            for (i, (pred, obj)) in parsed.pairs.iter().enumerate() {
                if i == spec.pair_index {
                    text.push(' ');
                    match spec.word {
                        NegationWord::Without => text.push_str(&format!("without {neg_obj}")),
                        NegationWord::No => text.push_str(&format!("with no {neg_obj}")),
                        NegationWord::Not => unreachable!(),
                    }
                    prev_positive = false;
                } else {
                    if prev_positive {
                        text.push_str(" and");
                    }
                    text.push(' ');
                    text.push_str(pred);
                    text.push(' ');
                    text.push_str(obj);
                    prev_positive = true;
                }
            }
        }
    }

    Ok(NegatedCaption {
        text,
        source: parsed.clone(),
        spec: *spec,
    })
}

/// Why a parse was rejected by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    TooManyPairs { count: usize },
    NoPairs,
    EmptySubject,
    EmptyPredicate { index: usize },
    EmptyObject { index: usize },
}

/// Accept-or-reject outcome; rejection is a value, not an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Accept,
    Reject(RejectReason),
}

impl Validation {
    pub fn is_accept(&self) -> bool {
        matches!(self, Validation::Accept)
    }
}

pub const MAX_PAIRS: usize = 9;

/// Accept iff 1 <= K <= 9, the subject is nonempty, and every pair has
/// a nonempty predicate and object.
pub fn validate(parsed: &ParsedCaption) -> Validation {
    if parsed.subject.trim().is_empty() {
        return Validation::Reject(RejectReason::EmptySubject);
    }
    if parsed.pairs.is_empty() {
        return Validation::Reject(RejectReason::NoPairs);
    }
    if parsed.pairs.len() > MAX_PAIRS {
        return Validation::Reject(RejectReason::TooManyPairs {
            count: parsed.pairs.len(),
        });
    }
    for (i, (pred, obj)) in parsed.pairs.iter().enumerate() {
        if pred.trim().is_empty() {
            return Validation::Reject(RejectReason::EmptyPredicate { index: i });
        }
        if obj.trim().is_empty() {
            return Validation::Reject(RejectReason::EmptyObject { index: i });
        }
    }
    Validation::Accept
}

const DEMO_INPUT: &str = "a festive banner with flags and with an inscription";
const DEMO_DECOMPOSED: &str =
    "subject: a festive banner | pairs: (with, flags); (with, an inscription)";
const DEMO_NEGATED: &str = "a festive banner with an inscription, but not with flags";

/// Prompt pair for running the decomposition and negation steps on an
/// external LLM. Each prompt carries the task instruction, exactly one
/// worked input/output demonstration, and ends with the target
/// caption. Nothing in this crate ever calls an LLM.
pub fn build_icl_prompts(caption: &str) -> (String, String) {
    assert!(!caption.trim().is_empty(), "caption must be nonempty");
    let decompose_prompt = format!(
        "Decompose the caption into one subject and its predicate-object pairs. \
         Answer with the subject followed by the pairs in order.\n\n\
         Example input: {DEMO_INPUT}\n\
         Example output: {DEMO_DECOMPOSED}\n\n\
         Input: {caption}"
    );
    let negate_prompt = format!(
        "Rewrite the caption so that exactly one predicate-object pair is negated \
         using one of the words no, not, without, keeping every other pair \
         positively stated.\n\n\
         Example input: {DEMO_INPUT}\n\
         Example output: {DEMO_NEGATED}\n\n\
         Input: {caption}"
    );
    (decompose_prompt, negate_prompt)
}
