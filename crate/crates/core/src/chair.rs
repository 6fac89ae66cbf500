//! Per-caption hallucination detection, corpus CHAIR ratios and context analysis.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::warn;
use serde::Serialize;

use crate::annotations::{CaptionRecord, GroundTruthIndex, ImageId};
use crate::error::{Error, Result};
use crate::lexicon::{self, Mention, ObjectVocabulary};

const SHIPPED_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// How repeated mentions of one object inside a caption are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Each object counts once per caption (first occurrence kept).
    #[default]
    Dedup,
    /// Every mention counts.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HallucinationResult {
    pub record: CaptionRecord,
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
    pub hallucinated: Vec<Mention>,
    pub sentence_flag: bool,
}

impl HallucinationResult {
    pub fn image_id(&self) -> ImageId {
        self.record.image_id
    }

    /// Caption-local hallucinated fraction; 0 when nothing is mentioned.
    pub fn hallucinated_fraction(&self) -> f64 {
        if self.mentions.is_empty() {
            0.0
        } else {
            self.hallucinated.len() as f64 / self.mentions.len() as f64
        }
    }

    /// First hallucinated mention in token order.
    pub fn first_hallucination(&self) -> Option<&Mention> {
        self.hallucinated.iter().min_by_key(|m| m.token_start)
    }
}

/// Checks one caption against an explicit ground-truth object set.
pub fn evaluate_against(
    record: &CaptionRecord,
    truth: &BTreeSet<String>,
    vocab: &ObjectVocabulary,
    mode: CountMode,
) -> HallucinationResult {
    let tokens = if record.tokens.is_empty() {
        lexicon::tokenize(&record.raw_text)
    } else {
        record.tokens.clone()
    };
    let mut mentions = lexicon::resolve_mentions(&tokens, vocab);
    if mode == CountMode::Dedup {
        let mut seen = HashSet::new();
        mentions.retain(|m| seen.insert(m.object.clone()));
    }
    let hallucinated: Vec<Mention> = mentions
        .iter()
        .filter(|m| !truth.contains(&m.object))
        .cloned()
        .collect();
    let mut record = record.clone();
    record.tokens = tokens.clone();
    HallucinationResult {
        record,
        tokens,
        sentence_flag: !hallucinated.is_empty(),
        mentions,
        hallucinated,
    }
}

pub fn evaluate_caption(
    record: &CaptionRecord,
    gt: &GroundTruthIndex,
    vocab: &ObjectVocabulary,
) -> Result<HallucinationResult> {
    evaluate_caption_with(record, gt, vocab, CountMode::Dedup)
}

pub fn evaluate_caption_with(
    record: &CaptionRecord,
    gt: &GroundTruthIndex,
    vocab: &ObjectVocabulary,
    mode: CountMode,
) -> Result<HallucinationResult> {
    let truth = gt.union(record.image_id)?;
    Ok(evaluate_against(record, truth, vocab, mode))
}

/// Results for a whole corpus, with records excluded from the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusEvaluation {
    pub results: Vec<HallucinationResult>,
    /// Indices of records whose image has no reference captions.
    pub excluded_no_references: Vec<usize>,
}

/// Evaluates every record; images without reference captions are left out.
pub fn evaluate_corpus(
    records: &[CaptionRecord],
    gt: &GroundTruthIndex,
    vocab: &ObjectVocabulary,
    mode: CountMode,
) -> Result<CorpusEvaluation> {
    let mut results = Vec::with_capacity(records.len());
    let mut excluded = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let entry = gt.get(record.image_id)?;
        if entry.n_references == 0 {
            excluded.push(i);
            continue;
        }
        results.push(evaluate_against(record, &entry.union, vocab, mode));
    }
    if !excluded.is_empty() {
        warn!(
            "{} captions excluded: their images have no reference captions",
            excluded.len()
        );
    }
    Ok(CorpusEvaluation {
        results,
        excluded_no_references: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ObjectCounts {
    pub mentioned: usize,
    pub hallucinated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairReport {
    pub chair_i: f64,
    pub chair_s: f64,
    pub n_sentences: usize,
    pub n_mentions: usize,
    pub n_hallucinated_mentions: usize,
    pub n_hallucinated_sentences: usize,
    pub per_object: BTreeMap<String, ObjectCounts>,
    pub synonym_table_hash: String,
}

/// Corpus CHAIRi / CHAIRs over evaluated captions.
pub fn compute_chair(results: &[HallucinationResult], vocab: &ObjectVocabulary) -> Result<ChairReport> {
    if results.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut per_object: BTreeMap<String, ObjectCounts> = BTreeMap::new();
    let mut n_mentions = 0;
    let mut n_hallucinated_mentions = 0;
    let mut n_hallucinated_sentences = 0;
    for r in results {
        n_mentions += r.mentions.len();
        n_hallucinated_mentions += r.hallucinated.len();
        n_hallucinated_sentences += usize::from(r.sentence_flag);
        for m in &r.mentions {
            per_object.entry(m.object.clone()).or_default().mentioned += 1;
        }
        for m in &r.hallucinated {
            per_object.entry(m.object.clone()).or_default().hallucinated += 1;
        }
    }
    let chair_i = if n_mentions == 0 {
        warn!("no object mentions in corpus; CHAIRi reported as 0");
        0.0
    } else {
        n_hallucinated_mentions as f64 / n_mentions as f64
    };
    Ok(ChairReport {
        chair_i,
        chair_s: n_hallucinated_sentences as f64 / results.len() as f64,
        n_sentences: results.len(),
        n_mentions,
        n_hallucinated_mentions,
        n_hallucinated_sentences,
        per_object,
        synonym_table_hash: vocab.table_hash().to_owned(),
    })
}

/// Fixed English function-word list used to skip words before a mention.
pub fn stopwords() -> BTreeSet<&'static str> {
    SHIPPED_STOPWORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ContextReport {
    pub n_hallucinated_mentions: usize,
    pub per_object: BTreeMap<String, usize>,
    pub per_super_category: BTreeMap<String, usize>,
    /// hallucinated object -> nearest preceding non-stopword -> count
    pub preceding_word: BTreeMap<String, BTreeMap<String, usize>>,
    /// hallucinated object -> the two tokens right before it -> count
    pub preceding_bigram: BTreeMap<String, BTreeMap<String, usize>>,
    /// hallucinated object -> object present in the image -> count
    pub cooccurrence: BTreeMap<String, BTreeMap<String, usize>>,
    /// Mean 1-based token index of hallucinated mentions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_position: Option<f64>,
    /// Mean token count of captions containing a hallucination.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_sentence_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_sentence_length_all: Option<f64>,
}

/// Which objects are hallucinated, after which words, next to which real objects,
/// and where in the sentence.
pub fn analyze_context(
    results: &[HallucinationResult],
    gt: &GroundTruthIndex,
    vocab: &ObjectVocabulary,
) -> ContextReport {
    let stop = stopwords();
    let mut report = ContextReport::default();
    let mut position_sum = 0usize;
    let mut flagged_len_sum = 0usize;
    let mut flagged = 0usize;
    let mut all_len_sum = 0usize;

    for r in results {
        all_len_sum += r.tokens.len();
        if r.sentence_flag {
            flagged += 1;
            flagged_len_sum += r.tokens.len();
        }
        let present = gt.union(r.image_id()).ok();
        for m in &r.hallucinated {
            report.n_hallucinated_mentions += 1;
            position_sum += m.token_start + 1;
            *report.per_object.entry(m.object.clone()).or_default() += 1;
            let sup = vocab.super_category(&m.object).unwrap_or("unknown");
            *report.per_super_category.entry(sup.to_owned()).or_default() += 1;

            let before = &r.tokens[..m.token_start];
            if let Some(word) = before.iter().rev().find(|t| !stop.contains(t.as_str())) {
                *report
                    .preceding_word
                    .entry(m.object.clone())
                    .or_default()
                    .entry(word.clone())
                    .or_default() += 1;
            }
            if let [.., a, b] = before {
                *report
                    .preceding_bigram
                    .entry(m.object.clone())
                    .or_default()
                    .entry(format!("{a} {b}"))
                    .or_default() += 1;
            }
            for p in present.into_iter().flatten() {
                *report
                    .cooccurrence
                    .entry(m.object.clone())
                    .or_default()
                    .entry(p.clone())
                    .or_default() += 1;
            }
        }
    }

    if report.n_hallucinated_mentions > 0 {
        report.mean_position = Some(position_sum as f64 / report.n_hallucinated_mentions as f64);
    }
    if flagged > 0 {
        report.mean_sentence_length = Some(flagged_len_sum as f64 / flagged as f64);
    }
    if !results.is_empty() {
        report.mean_sentence_length_all = Some(all_len_sum as f64 / results.len() as f64);
    }
    report
}
