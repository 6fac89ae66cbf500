//! Hallucination-banning greedy decoding over exported per-step log-probabilities.
//!
//! A captioning model exports, for every decoding step, its top-k candidate
//! tokens with log-probabilities. Re-decoding bans any candidate whose
//! addition would make the caption mention an object absent from the image.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{CaptionRecord, GroundTruthIndex, ImageId};
use crate::chair::{evaluate_against, CountMode, HallucinationResult};
use crate::error::{Error, Result};
use crate::lexicon::{self, ObjectVocabulary};

/// Log-probability assigned to banned tokens.
pub const BANNED_LOGPROB: f64 = -1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitStream {
    pub image_id: ImageId,
    pub end_token: String,
    #[serde(deserialize_with = "de_steps")]
    pub steps: Vec<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_tokens: Option<Vec<String>>,
}

/// Accepts JSON numbers plus the strings "nan", "inf" and "-inf" so that
/// non-finite exports are reported as validation errors instead of parse errors.
fn de_steps<'de, D>(de: D) -> std::result::Result<Vec<BTreeMap<String, f64>>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    let raw: Vec<BTreeMap<String, Num>> = Vec::deserialize(de)?;
    raw.into_iter()
        .map(|step| {
            step.into_iter()
                .map(|(tok, v)| {
                    let value = match v {
                        Num::F(f) => f,
                        Num::S(s) => s.trim().parse::<f64>().map_err(|_| {
                            serde::de::Error::custom(format!("log-probability {s:?} is not a number"))
                        })?,
                    };
                    Ok((tok, value))
                })
                .collect()
        })
        .collect()
}

impl LogitStream {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.is_empty() {
                return Err(format!("step {i} has no candidates"));
            }
            if let Some((tok, v)) = step.iter().find(|(_, v)| !v.is_finite()) {
                return Err(format!("step {i}: non-finite log-probability {v} for {tok:?}"));
            }
        }
        if let Some(orig) = &self.original_tokens {
            if orig.len() > self.steps.len() {
                return Err(format!(
                    "original_tokens has {} tokens but only {} steps",
                    orig.len(),
                    self.steps.len()
                ));
            }
        }
        Ok(())
    }
}

/// Reads line-delimited JSON streams, one image per line.
pub fn load_logit_stream(path: &Path) -> Result<Vec<LogitStream>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut streams = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let stream: LogitStream = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        stream
            .validate()
            .map_err(|m| Error::Validation(format!("{}:{}: {m}", path.display(), i + 1)))?;
        streams.push(stream);
    }
    Ok(streams)
}

/// Highest log-probability token, ties broken lexicographically.
fn argmax<'a>(candidates: impl Iterator<Item = (&'a String, f64)>) -> Option<&'a String> {
    candidates
        .fold(None, |best: Option<(&String, f64)>, (tok, lp)| match best {
            Some((_, b)) if lp <= b => best,
            _ => Some((tok, lp)),
        })
        .map(|(t, _)| t)
}

/// Plain greedy decoding of the stream, stopping at the end token.
pub fn greedy_decode(stream: &LogitStream) -> Vec<String> {
    let mut out = Vec::new();
    for step in &stream.steps {
        match argmax(step.iter().map(|(t, v)| (t, *v))) {
            Some(tok) if *tok == stream.end_token => break,
            Some(tok) => out.push(tok.clone()),
            None => break,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BannedToken {
    pub step: usize,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestrictedDecode {
    pub image_id: ImageId,
    pub tokens: Vec<String>,
    pub caption: String,
    /// Every step ended up with all candidates banned.
    pub truncated_by_restriction: bool,
    /// Candidates that would have outranked the emitted token but were banned.
    pub banned: Vec<BannedToken>,
}

impl RestrictedDecode {
    pub fn first_banned_step(&self) -> Option<usize> {
        self.banned.first().map(|b| b.step)
    }
}

fn would_hallucinate(
    prefix: &[String],
    candidate: &str,
    truth: &BTreeSet<String>,
    vocab: &ObjectVocabulary,
) -> bool {
    let mut tokens = Vec::with_capacity(prefix.len() + 1);
    tokens.extend(prefix.iter().flat_map(|t| lexicon::tokenize(t)));
    tokens.extend(lexicon::tokenize(candidate));
    lexicon::resolve_mentions(&tokens, vocab)
        .iter()
        .any(|m| !truth.contains(&m.object))
}

/// Greedy decoding that bans tokens which would introduce a hallucinated object.
///
/// The whole tentative sequence is re-resolved for every candidate, so a token
/// completing a compound is judged by the compound's object.
pub fn restrict_decode(
    stream: &LogitStream,
    gt: &GroundTruthIndex,
    vocab: &ObjectVocabulary,
) -> Result<RestrictedDecode> {
    let truth = gt.union(stream.image_id)?;
    let mut tokens: Vec<String> = Vec::new();
    let mut banned = Vec::new();
    let mut truncated = false;

    for (step_idx, step) in stream.steps.iter().enumerate() {
        let mut step_banned = Vec::new();
        let adjusted = step.iter().map(|(tok, &lp)| {
            let ban = *tok != stream.end_token && would_hallucinate(&tokens, tok, truth, vocab);
            if ban {
                step_banned.push((tok, lp));
            }
            (tok, if ban { BANNED_LOGPROB } else { lp })
        });
        let adjusted: Vec<(&String, f64)> = adjusted.collect();
        let choice = argmax(adjusted.iter().copied());
        let chosen_lp = choice.map(|c| step[c]);

        if step_banned.len() == step.len() {
            truncated = true;
            banned.extend(step_banned.iter().map(|(t, _)| BannedToken {
                step: step_idx,
                token: (*t).clone(),
            }));
            break;
        }
        let chosen = choice.expect("non-empty step");
        let chosen_lp = chosen_lp.unwrap_or(f64::NEG_INFINITY);
        banned.extend(
            step_banned
                .iter()
                .filter(|(t, lp)| *lp > chosen_lp || (*lp == chosen_lp && *t < chosen))
                .map(|(t, _)| BannedToken {
                    step: step_idx,
                    token: (*t).clone(),
                }),
        );
        if *chosen == stream.end_token {
            break;
        }
        tokens.push(chosen.clone());
    }

    Ok(RestrictedDecode {
        image_id: stream.image_id,
        caption: tokens.join(" "),
        tokens,
        truncated_by_restriction: truncated,
        banned,
    })
}

/// CHAIR evaluation of a decoded token sequence against the image's union.
pub fn evaluate_tokens(
    image_id: ImageId,
    tokens: &[String],
    gt: &GroundTruthIndex,
    vocab: &ObjectVocabulary,
) -> Result<HallucinationResult> {
    let record = CaptionRecord::new(image_id, None, tokens.join(" "));
    Ok(evaluate_against(&record, gt.union(image_id)?, vocab, CountMode::Dedup))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// Pairs whose original decode contains a hallucination.
    pub n_with_hallucination: usize,
    /// Of those, pairs whose words after the first hallucinated word differ.
    pub n_suffix_differs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction_differs: Option<f64>,
    /// first hallucinated object -> later hallucinated object -> count
    pub chained: BTreeMap<String, BTreeMap<String, usize>>,
}

/// How often re-decoding changes the continuation after the first hallucinated word.
///
/// `results` are evaluations of the original token sequences, aligned with `pairs`.
pub fn divergence_analysis(
    pairs: &[(Vec<String>, Vec<String>)],
    results: &[HallucinationResult],
) -> Result<DivergenceReport> {
    if pairs.len() != results.len() {
        return Err(Error::Alignment(format!(
            "{} decode pairs but {} results",
            pairs.len(),
            results.len()
        )));
    }
    let mut report = DivergenceReport {
        n_with_hallucination: 0,
        n_suffix_differs: 0,
        fraction_differs: None,
        chained: BTreeMap::new(),
    };
    for ((original, restricted), result) in pairs.iter().zip(results) {
        let Some(first) = result.first_hallucination() else {
            continue;
        };
        report.n_with_hallucination += 1;
        // The word that gets banned is the last token of the mention.
        let pos = first.token_end();
        let orig = normalize(original);
        let rest = normalize(restricted);
        let suffix = |t: &[String]| t.get(pos + 1..).map(<[String]>::to_vec).unwrap_or_default();
        if suffix(&orig) != suffix(&rest) {
            report.n_suffix_differs += 1;
        }
        let mut ordered: Vec<_> = result.hallucinated.iter().collect();
        ordered.sort_by_key(|m| m.token_start);
        for later in &ordered[1..] {
            *report
                .chained
                .entry(first.object.clone())
                .or_default()
                .entry(later.object.clone())
                .or_default() += 1;
        }
    }
    if report.n_with_hallucination > 0 {
        report.fraction_differs =
            Some(report.n_suffix_differs as f64 / report.n_with_hallucination as f64);
    }
    Ok(report)
}

fn normalize(tokens: &[String]) -> Vec<String> {
    lexicon::tokenize(&tokens.join(" "))
}
