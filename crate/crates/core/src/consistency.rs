//! Image- and language-model consistency of object mentions.
//!
//! Language consistency uses an n-gram model with interpolated absolute
//! discounting trained on reference captions; a mention's score is the
//! reciprocal of its word's rank under the model given the preceding words.
//! Image consistency averages externally produced P(object | image) values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;

use crate::annotations::ImageId;
use crate::chair::HallucinationResult;
use crate::error::{Error, Result};
use crate::lexicon::{self, Mention, ObjectVocabulary};
use crate::tsv;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MAX_ORDER: usize = 5;

const LM_MAGIC: &str = "chair-eval-ngram-lm";
const LM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct ContextStats {
    total: u64,
    followers: BTreeMap<String, u64>,
}

impl ContextStats {
    fn add(&mut self, word: &str, count: u64) {
        self.total += count;
        *self.followers.entry(word.to_owned()).or_default() += count;
    }
}

/// Word n-gram model with interpolated absolute discounting.
///
/// P(w | h) = max(c(h,w) - d, 0) / c(h) + d * N1+(h .) / c(h) * P(w | h'),
/// where h' drops the oldest word of h. The recursion bottoms out in a
/// uniform distribution over the vocabulary, so every context distribution
/// sums to one. Unseen contexts fall through to the shorter context.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLanguageModel {
    order: usize,
    discount: f64,
    vocabulary: BTreeSet<String>,
    /// tables[k] maps a k-token context to its continuation counts.
    tables: Vec<HashMap<Vec<String>, ContextStats>>,
}

/// Rank of a word under the model; `oov` is set when the word is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WordRank {
    pub rank: usize,
    pub oov: bool,
}

impl NgramLanguageModel {
    fn empty(order: usize, discount: f64) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidArgument(format!(
                "LM order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "LM discount must be in (0, 1), got {discount}"
            )));
        }
        Ok(NgramLanguageModel {
            order,
            discount,
            vocabulary: BTreeSet::new(),
            tables: vec![HashMap::new(); order],
        })
    }

    /// Adds the highest-order n-gram and all of its suffixes.
    fn add_ngram(&mut self, ngram: &[String], count: u64) {
        let (word, context) = ngram.split_last().expect("non-empty n-gram");
        self.vocabulary.insert(word.clone());
        for k in 0..self.order {
            let ctx = context[context.len() - k..].to_vec();
            self.tables[k].entry(ctx).or_default().add(word, count);
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Predictable tokens: every training word plus the end marker.
    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    /// Raw count of `word` after exactly `context` (no smoothing).
    pub fn count(&self, context: &[&str], word: &str) -> u64 {
        let key: Vec<String> = context.iter().map(|s| s.to_string()).collect();
        self.tables
            .get(key.len())
            .and_then(|t| t.get(&key))
            .and_then(|s| s.followers.get(word))
            .copied()
            .unwrap_or(0)
    }

    /// Total continuation count of `context`.
    pub fn context_count(&self, context: &[&str]) -> u64 {
        let key: Vec<String> = context.iter().map(|s| s.to_string()).collect();
        self.tables
            .get(key.len())
            .and_then(|t| t.get(&key))
            .map_or(0, |s| s.total)
    }

    /// Context statistics from shortest (empty) to longest available history.
    fn chain<S: AsRef<str>>(&self, prefix: &[S]) -> Vec<&ContextStats> {
        let history = self.order - 1;
        let mut padded: Vec<&str> = vec![BOS; history.saturating_sub(prefix.len())];
        let start = prefix.len().saturating_sub(history);
        padded.extend(prefix[start..].iter().map(AsRef::as_ref));
        let mut chain = Vec::with_capacity(self.order);
        for k in 0..self.order {
            let key: Vec<String> = padded[padded.len() - k..].iter().map(|s| s.to_string()).collect();
            match self.tables[k].get(&key) {
                Some(stats) => chain.push(stats),
                None => break,
            }
        }
        chain
    }

    fn prob_in_chain(&self, chain: &[&ContextStats], word: &str) -> f64 {
        let mut p = 1.0 / self.vocabulary.len() as f64;
        for stats in chain {
            let total = stats.total as f64;
            let c = stats.followers.get(word).copied().unwrap_or(0) as f64;
            let backoff = self.discount * stats.followers.len() as f64 / total;
            p = (c - self.discount).max(0.0) / total + backoff * p;
        }
        p
    }

    /// P(word | prefix), where `prefix` is the sentence so far (without markers).
    pub fn prob<S: AsRef<str>>(&self, prefix: &[S], word: &str) -> f64 {
        self.prob_in_chain(&self.chain(prefix), word)
    }

    /// Full next-word distribution over the vocabulary.
    pub fn distribution<S: AsRef<str>>(&self, prefix: &[S]) -> Vec<(&str, f64)> {
        let chain = self.chain(prefix);
        self.vocabulary
            .iter()
            .map(|w| (w.as_str(), self.prob_in_chain(&chain, w)))
            .collect()
    }

    /// 1-based rank of `word` among all vocabulary tokens sorted by
    /// probability (descending), ties broken lexicographically.
    pub fn word_rank<S: AsRef<str>>(&self, prefix: &[S], word: &str) -> WordRank {
        if !self.vocabulary.contains(word) {
            return WordRank {
                rank: self.vocabulary.len() + 1,
                oov: true,
            };
        }
        let chain = self.chain(prefix);
        let target = self.prob_in_chain(&chain, word);
        let ahead = self
            .vocabulary
            .iter()
            .filter(|w| {
                let p = self.prob_in_chain(&chain, w);
                p > target || (p == target && w.as_str() < word)
            })
            .count();
        WordRank {
            rank: ahead + 1,
            oov: false,
        }
    }

    /// Writes the model as a versioned text count file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{LM_MAGIC} {LM_FORMAT_VERSION}")?;
        writeln!(out, "order\t{}", self.order)?;
        writeln!(out, "discount\t{}", self.discount)?;
        let top = self.order - 1;
        let mut rows: Vec<(String, u64)> = self.tables[top]
            .iter()
            .flat_map(|(ctx, stats)| {
                stats.followers.iter().map(move |(w, c)| {
                    let mut gram = ctx.clone();
                    gram.push(w.clone());
                    (gram.join(" "), *c)
                })
            })
            .collect();
        rows.sort();
        for (gram, count) in rows {
            writeln!(out, "{count}\t{gram}")?;
        }
        out.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            column: 0,
            message,
        };
        let mut lines = std::io::BufReader::new(file).lines().enumerate();
        let mut next_line = |expect: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(parse_err(i + 1, e.to_string())),
                None => Err(parse_err(0, format!("missing {expect}"))),
            }
        };
        let (n, header) = next_line("header")?;
        if header != format!("{LM_MAGIC} {LM_FORMAT_VERSION}") {
            return Err(parse_err(n, format!("unsupported header {header:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let (n, line) = next_line(name)?;
            line.strip_prefix(&format!("{name}\t"))
                .map(str::to_owned)
                .ok_or_else(|| parse_err(n, format!("expected {name}")))
        };
        let order: usize = field("order")?
            .parse()
            .map_err(|e| parse_err(2, format!("bad order: {e}")))?;
        let discount: f64 = field("discount")?
            .parse()
            .map_err(|e| parse_err(3, format!("bad discount: {e}")))?;
        let mut model = Self::empty(order, discount)?;
        for (i, line) in lines {
            let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (count, gram) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(i + 1, "expected count<TAB>ngram".into()))?;
            let count: u64 = count
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad count: {e}")))?;
            let gram: Vec<String> = gram.split(' ').map(str::to_owned).collect();
            if gram.len() != order {
                return Err(parse_err(i + 1, format!("expected {order} tokens")));
            }
            model.add_ngram(&gram, count);
        }
        if model.vocabulary.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(model)
    }
}

/// Trains a model on reference captions (tokenized, not singularized).
pub fn train_lm<S: AsRef<str>>(references: &[S], order: usize, discount: f64) -> Result<NgramLanguageModel> {
    let mut model = NgramLanguageModel::empty(order, discount)?;
    let history = order - 1;
    let mut any = false;
    for caption in references {
        let tokens = lexicon::tokenize(caption.as_ref());
        if tokens.is_empty() {
            continue;
        }
        any = true;
        let mut padded = vec![BOS.to_owned(); history];
        padded.extend(tokens);
        padded.push(EOS.to_owned());
        for end in history..padded.len() {
            model.add_ngram(&padded[end - history..=end], 1);
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MentionScore {
    pub object: String,
    pub token_start: usize,
    pub hallucinated: bool,
    pub value: f64,
    /// Language: out-of-vocabulary word. Image: probability missing from the table.
    pub flagged: bool,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-caption score on one axis: the mean over all mentions and over the
/// hallucinated / correctly mentioned subsets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisScore {
    pub mean: f64,
    pub mean_hallucinated: Option<f64>,
    pub mean_correct: Option<f64>,
    pub mentions: Vec<MentionScore>,
    pub n_flagged: usize,
}

impl AxisScore {
    fn from_mentions(mentions: Vec<MentionScore>) -> Option<Self> {
        let overall = mean(mentions.iter().map(|m| m.value))?;
        Some(AxisScore {
            mean: overall,
            mean_hallucinated: mean(mentions.iter().filter(|m| m.hallucinated).map(|m| m.value)),
            mean_correct: mean(mentions.iter().filter(|m| !m.hallucinated).map(|m| m.value)),
            n_flagged: mentions.iter().filter(|m| m.flagged).count(),
            mentions,
        })
    }
}

fn is_hallucinated(result: &HallucinationResult, m: &Mention) -> bool {
    result.hallucinated.iter().any(|h| h.token_start == m.token_start)
}

/// Mean 1/rank of the mentioned object words. A compound is scored at its
/// first token. `None` when the caption mentions no object.
pub fn language_consistency(result: &HallucinationResult, lm: &NgramLanguageModel) -> Option<AxisScore> {
    let mentions = result
        .mentions
        .iter()
        .map(|m| {
            let t = m.token_start;
            let rank = lm.word_rank(&result.tokens[..t], &result.tokens[t]);
            MentionScore {
                object: m.object.clone(),
                token_start: t,
                hallucinated: is_hallucinated(result, m),
                value: 1.0 / rank.rank as f64,
                flagged: rank.oov,
            }
        })
        .collect();
    AxisScore::from_mentions(mentions)
}

/// P(object | image) from an external multi-label image model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageProbTable {
    probs: BTreeMap<ImageId, BTreeMap<String, f64>>,
}

/// Looked-up probability; `missing` marks the 0.0 default for absent pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbLookup {
    pub value: f64,
    pub missing: bool,
}

impl ImageProbTable {
    pub fn insert(&mut self, image: ImageId, object: &str, prob: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Validation(format!(
                "probability {prob} for image {image}, object {object:?} is outside [0, 1]"
            )));
        }
        self.probs.entry(image).or_default().insert(object.to_owned(), prob);
        Ok(())
    }

    pub fn contains_image(&self, image: ImageId) -> bool {
        self.probs.contains_key(&image)
    }

    pub fn get(&self, image: ImageId, object: &str) -> ProbLookup {
        match self.probs.get(&image).and_then(|m| m.get(object)) {
            Some(&value) => ProbLookup { value, missing: false },
            None => ProbLookup { value: 0.0, missing: true },
        }
    }

    pub fn len(&self) -> usize {
        self.probs.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Reads `(image_id, object_name, probability)` rows.
pub fn load_image_probs(path: &Path, vocab: &ObjectVocabulary) -> Result<ImageProbTable> {
    let mut table = ImageProbTable::default();
    for (i, row) in tsv::read_file(path)?.into_iter().enumerate() {
        row.expect_fields(path, 3)?;
        if i == 0 && row.fields[0].eq_ignore_ascii_case("image_id") {
            continue;
        }
        let image: u64 = row.fields[0]
            .parse()
            .map_err(|_| row.error(path, format!("bad image id {:?}", row.fields[0])))?;
        let object = vocab.canonical_name(&row.fields[1]).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{}: unknown object {:?}",
                path.display(),
                row.line,
                row.fields[1]
            ))
        })?;
        let prob: f64 = row.fields[2]
            .parse()
            .map_err(|_| row.error(path, format!("bad probability {:?}", row.fields[2])))?;
        table.insert(ImageId(image), object, prob).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), row.line))
        })?;
    }
    Ok(table)
}

/// Mean P(object | image) over the mentions. Absent pairs count as 0 and are
/// flagged. `None` when the caption mentions no object.
pub fn image_consistency(result: &HallucinationResult, probs: &ImageProbTable) -> Option<AxisScore> {
    let mentions = result
        .mentions
        .iter()
        .map(|m| {
            let p = probs.get(result.image_id(), &m.object);
            MentionScore {
                object: m.object.clone(),
                token_start: m.token_start,
                hallucinated: is_hallucinated(result, m),
                value: p.value,
                flagged: p.missing,
            }
        })
        .collect();
    AxisScore::from_mentions(mentions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyScores {
    pub image_id: ImageId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub n_scored: usize,
    pub image: Option<AxisScore>,
    pub language: Option<AxisScore>,
    /// The image has no row at all in the probability table.
    pub image_missing: bool,
}

pub fn score_caption(
    result: &HallucinationResult,
    lm: &NgramLanguageModel,
    probs: Option<&ImageProbTable>,
) -> ConsistencyScores {
    ConsistencyScores {
        image_id: result.image_id(),
        model_id: result.record.model_id.clone(),
        n_scored: result.mentions.len(),
        image: probs.and_then(|p| image_consistency(result, p)),
        language: language_consistency(result, lm),
        image_missing: probs.is_some_and(|p| !p.contains_image(result.image_id())),
    }
}

/// Pooled per-mention means, split by hallucination status.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AxisSummary {
    pub n_mentions: usize,
    pub n_hallucinated: usize,
    pub mean_all: Option<f64>,
    pub mean_hallucinated: Option<f64>,
    pub mean_correct: Option<f64>,
    /// Mean of per-caption means over captions with at least one mention.
    pub mean_caption: Option<f64>,
}

impl AxisSummary {
    fn from_scores<'a>(scores: impl Iterator<Item = &'a AxisScore> + Clone) -> Self {
        let mentions = || scores.clone().flat_map(|s| s.mentions.iter());
        AxisSummary {
            n_mentions: mentions().count(),
            n_hallucinated: mentions().filter(|m| m.hallucinated).count(),
            mean_all: mean(mentions().map(|m| m.value)),
            mean_hallucinated: mean(mentions().filter(|m| m.hallucinated).map(|m| m.value)),
            mean_correct: mean(mentions().filter(|m| !m.hallucinated).map(|m| m.value)),
            mean_caption: mean(scores.clone().map(|s| s.mean)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConsistencySummary {
    pub n_captions: usize,
    pub language: AxisSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<AxisSummary>,
}

pub fn summarize(scores: &[ConsistencyScores], with_image: bool) -> ConsistencySummary {
    ConsistencySummary {
        n_captions: scores.len(),
        language: AxisSummary::from_scores(scores.iter().filter_map(|s| s.language.as_ref())),
        image: with_image
            .then(|| AxisSummary::from_scores(scores.iter().filter_map(|s| s.image.as_ref()))),
    }
}
