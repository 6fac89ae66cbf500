//! Sentence metrics and their relation to hallucination.
//!
//! CIDEr-D is computed here; other sentence metrics (METEOR, SPICE, human
//! judgments) are ingested as per-sentence score files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::annotations::{ImageId, ReferenceSet};
use crate::chair::HallucinationResult;
use crate::error::{Error, Result};
use crate::lexicon;
use crate::tsv;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentenceScore {
    pub image_id: ImageId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub metric_name: String,
    pub value: f64,
}

impl SentenceScore {
    pub fn key(&self) -> (ImageId, Option<String>) {
        (self.image_id, self.model_id.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CiderConfig {
    pub max_n: usize,
    pub sigma: f64,
    pub scale: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        CiderConfig {
            max_n: 4,
            sigma: 6.0,
            scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiderScores {
    pub per_image: BTreeMap<ImageId, f64>,
    pub mean: f64,
    /// Number of reference documents used for document frequencies.
    pub n_documents: usize,
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], max_n: usize) -> Vec<BTreeMap<Ngram, f64>> {
    (1..=max_n)
        .map(|n| {
            let mut counts: BTreeMap<Ngram, f64> = BTreeMap::new();
            for w in tokens.windows(n) {
                *counts.entry(w.to_vec()).or_default() += 1.0;
            }
            counts
        })
        .collect()
}

/// TF-IDF vectors per n-gram order plus their norms and the token length.
struct Weighted {
    vecs: Vec<BTreeMap<Ngram, f64>>,
    norms: Vec<f64>,
    length: f64,
}

fn weigh(counts: Vec<BTreeMap<Ngram, f64>>, df: &BTreeMap<Ngram, f64>, log_docs: f64, length: usize) -> Weighted {
    let mut norms = Vec::with_capacity(counts.len());
    let vecs: Vec<_> = counts
        .into_iter()
        .map(|order| {
            let weighted: BTreeMap<Ngram, f64> = order
                .into_iter()
                .map(|(g, tf)| {
                    let df = df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
                    (g, tf * (log_docs - df))
                })
                .collect();
            norms.push(weighted.values().map(|v| v * v).sum::<f64>().sqrt());
            weighted
        })
        .collect();
    Weighted {
        vecs,
        norms,
        length: length as f64,
    }
}

/// Clipped cosine per order with the Gaussian length penalty.
fn similarity(cand: &Weighted, reference: &Weighted, sigma: f64) -> Vec<f64> {
    let delta = cand.length - reference.length;
    let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
    cand.vecs
        .iter()
        .zip(&reference.vecs)
        .enumerate()
        .map(|(n, (c, r))| {
            let mut dot = 0.0;
            for (g, cv) in c {
                if let Some(rv) = r.get(g) {
                    dot += cv.min(*rv) * rv;
                }
            }
            if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= cand.norms[n] * reference.norms[n];
            }
            dot * penalty
        })
        .collect()
}

/// CIDEr-D for one candidate per image.
///
/// Document frequencies come from the reference sets of the scored images.
pub fn cider(
    candidates: &BTreeMap<ImageId, String>,
    references: &BTreeMap<ImageId, ReferenceSet>,
    cfg: &CiderConfig,
) -> Result<CiderScores> {
    if cfg.max_n == 0 || cfg.sigma.is_nan() || cfg.sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("invalid CIDEr config {cfg:?}")));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut refs_tok: Vec<(ImageId, Vec<Vec<String>>)> = Vec::with_capacity(candidates.len());
    for id in candidates.keys() {
        let set = references
            .get(id)
            .filter(|r| !r.captions.is_empty())
            .ok_or_else(|| Error::Validation(format!("image {id} has no reference captions")))?;
        refs_tok.push((*id, set.captions.iter().map(|c| lexicon::tokenize(c)).collect()));
    }

    let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
    for (_, refs) in &refs_tok {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in refs {
            for n in 1..=cfg.max_n {
                seen.extend(r.windows(n));
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_default() += 1.0;
        }
    }
    let log_docs = (refs_tok.len() as f64).ln();

    let mut per_image = BTreeMap::new();
    for ((id, cand), (_, refs)) in candidates.iter().zip(&refs_tok) {
        let cand_tok = lexicon::tokenize(cand);
        let cand_w = weigh(ngram_counts(&cand_tok, cfg.max_n), &df, log_docs, cand_tok.len());
        let mut total = 0.0;
        for r in refs {
            let ref_w = weigh(ngram_counts(r, cfg.max_n), &df, log_docs, r.len());
            let sims = similarity(&cand_w, &ref_w, cfg.sigma);
            total += sims.iter().sum::<f64>() / cfg.max_n as f64;
        }
        per_image.insert(*id, total / refs.len() as f64 * cfg.scale);
    }
    let mean = per_image.values().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScores {
        per_image,
        mean,
        n_documents: refs_tok.len(),
    })
}

/// Reads `(image_id, model_id, value)` rows; an empty model id means none.
pub fn load_external_scores(path: &Path, metric_name: &str) -> Result<Vec<SentenceScore>> {
    let mut scores = Vec::new();
    for (i, row) in tsv::read_file(path)?.into_iter().enumerate() {
        row.expect_fields(path, 3)?;
        if i == 0 && row.fields[0].eq_ignore_ascii_case("image_id") {
            continue;
        }
        let image: u64 = row.fields[0]
            .parse()
            .map_err(|_| row.error(path, format!("bad image id {:?}", row.fields[0])))?;
        let value: f64 = row.fields[2]
            .parse()
            .map_err(|_| row.error(path, format!("non-numeric value {:?}", row.fields[2])))?;
        if !value.is_finite() || value < 0.0 {
            return Err(row.error(path, format!("value {value} must be finite and non-negative")));
        }
        let model = row.fields[1].trim();
        scores.push(SentenceScore {
            image_id: ImageId(image),
            model_id: (!model.is_empty()).then(|| model.to_owned()),
            metric_name: metric_name.to_owned(),
            value,
        });
    }
    Ok(scores)
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

type Key = (ImageId, Option<String>);

fn describe(key: &Key) -> String {
    match &key.1 {
        Some(m) => format!("({}, {m})", key.0),
        None => format!("({})", key.0),
    }
}

/// Pairs every score with the result sharing its `(image_id, model_id)` key.
pub fn align<'a>(
    scores: &'a [SentenceScore],
    results: &'a [HallucinationResult],
) -> Result<Vec<(&'a SentenceScore, &'a HallucinationResult)>> {
    let mut by_key: BTreeMap<Key, &HallucinationResult> = BTreeMap::new();
    let mut problems = Vec::new();
    for r in results {
        let key = r.record.key();
        if by_key.insert(key.clone(), r).is_some() {
            problems.push(format!("duplicate result {}", describe(&key)));
        }
    }
    let mut used = BTreeSet::new();
    let mut pairs = Vec::with_capacity(scores.len());
    for s in scores {
        let key = s.key();
        if !used.insert(key.clone()) {
            problems.push(format!("duplicate score {}", describe(&key)));
            continue;
        }
        match by_key.get(&key) {
            Some(r) => pairs.push((s, *r)),
            None => problems.push(format!("score without result {}", describe(&key))),
        }
    }
    for key in by_key.keys().filter(|k| !used.contains(*k)) {
        problems.push(format!("result without score {}", describe(key)));
    }
    if !problems.is_empty() {
        return Err(Error::Alignment(problems.join("; ")));
    }
    Ok(pairs)
}

/// Correlation between sentence scores and the absence of hallucination.
pub fn correlate_hallucination(scores: &[SentenceScore], results: &[HallucinationResult]) -> Result<f64> {
    let pairs = align(scores, results)?;
    let x: Vec<f64> = pairs.iter().map(|(s, _)| s.value).collect();
    let y: Vec<f64> = pairs
        .iter()
        .map(|(_, r)| if r.sentence_flag { 0.0 } else { 1.0 })
        .collect();
    pearson(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Add 1 - sentence flag.
    Sentence,
    /// Add 1 - caption-local hallucinated fraction.
    Instance,
}

/// Sentence metric plus the per-caption complement of CHAIR.
pub fn combine_with_chair(
    scores: &[SentenceScore],
    results: &[HallucinationResult],
    mode: CombineMode,
) -> Result<Vec<SentenceScore>> {
    let suffix = match mode {
        CombineMode::Sentence => "+1-chs",
        CombineMode::Instance => "+1-chi",
    };
    Ok(align(scores, results)?
        .into_iter()
        .map(|(s, r)| {
            let h = match mode {
                CombineMode::Sentence => f64::from(u8::from(r.sentence_flag)),
                CombineMode::Instance => r.hallucinated_fraction(),
            };
            SentenceScore {
                image_id: s.image_id,
                model_id: s.model_id.clone(),
                metric_name: format!("{}{suffix}", s.metric_name),
                value: s.value + (1.0 - h),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HumanCorrelation {
    pub pooled: f64,
    /// Mean of per-image correlations across models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image_mean: Option<f64>,
    pub n_images_used: usize,
    /// Images skipped because one side had zero variance or fewer than two captions.
    pub n_images_skipped: usize,
}

/// Correlation of a metric with human judgments, pooled over all captions and
/// averaged over per-image correlations.
pub fn human_correlation(metric: &[SentenceScore], human: &[SentenceScore]) -> Result<HumanCorrelation> {
    let human_by_key: BTreeMap<Key, f64> = human.iter().map(|s| (s.key(), s.value)).collect();
    let mut missing = Vec::new();
    let mut per_image: BTreeMap<ImageId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in metric {
        match human_by_key.get(&s.key()) {
            Some(&h) => {
                xs.push(s.value);
                ys.push(h);
                let e = per_image.entry(s.image_id).or_default();
                e.0.push(s.value);
                e.1.push(h);
            }
            None => missing.push(describe(&s.key())),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Alignment(format!("no human score for {}", missing.join(", "))));
    }
    let pooled = pearson(&xs, &ys)?;
    let mut per = Vec::new();
    let mut skipped = 0;
    for (x, y) in per_image.values() {
        match pearson(x, y) {
            Ok(r) => per.push(r),
            Err(_) => skipped += 1,
        }
    }
    Ok(HumanCorrelation {
        pooled,
        per_image_mean: (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64),
        n_images_used: per.len(),
        n_images_skipped: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketStats {
    pub lower: f64,
    pub upper: f64,
    pub n_sentences: usize,
    pub n_hallucination_free: usize,
    /// `None` for an empty bucket.
    pub pct_no_hallucination: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketTable {
    pub buckets: Vec<BucketStats>,
    /// Scores outside every bucket.
    pub n_unbucketed: usize,
}

/// Buckets `[e_i, e_{i+1})`; the last bucket is closed on the right.
pub fn bucket_rates(scores: &[SentenceScore], results: &[HallucinationResult], edges: &[f64]) -> Result<BucketTable> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::InvalidArgument(
            "bucket edges must be at least two strictly increasing values".into(),
        ));
    }
    let pairs = align(scores, results)?;
    let mut buckets: Vec<BucketStats> = edges
        .windows(2)
        .map(|w| BucketStats {
            lower: w[0],
            upper: w[1],
            n_sentences: 0,
            n_hallucination_free: 0,
            pct_no_hallucination: None,
        })
        .collect();
    let last = buckets.len() - 1;
    let mut n_unbucketed = 0;
    for (s, r) in pairs {
        let v = s.value;
        let idx = buckets
            .iter()
            .position(|b| v >= b.lower && v < b.upper)
            .or_else(|| (v == buckets[last].upper).then_some(last));
        match idx {
            Some(i) => {
                buckets[i].n_sentences += 1;
                buckets[i].n_hallucination_free += usize::from(!r.sentence_flag);
            }
            None => n_unbucketed += 1,
        }
    }
    for b in &mut buckets {
        if b.n_sentences > 0 {
            b.pct_no_hallucination = Some(100.0 * b.n_hallucination_free as f64 / b.n_sentences as f64);
        }
    }
    Ok(BucketTable {
        buckets,
        n_unbucketed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketComparison {
    pub model_a: BucketTable,
    pub model_b: BucketTable,
    /// A minus B per bucket; `None` when either side is empty.
    pub difference: Vec<Option<f64>>,
}

/// Per-bucket hallucination-free rates of two models and their difference.
pub fn bucket_predictiveness(
    scores_a: &[SentenceScore],
    results_a: &[HallucinationResult],
    scores_b: &[SentenceScore],
    results_b: &[HallucinationResult],
    edges: &[f64],
) -> Result<BucketComparison> {
    let model_a = bucket_rates(scores_a, results_a, edges)?;
    let model_b = bucket_rates(scores_b, results_b, edges)?;
    let difference = model_a
        .buckets
        .iter()
        .zip(&model_b.buckets)
        .map(|(a, b)| Some(a.pct_no_hallucination? - b.pct_no_hallucination?))
        .collect();
    Ok(BucketComparison {
        model_a,
        model_b,
        difference,
    })
}
