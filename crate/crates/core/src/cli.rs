//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 input/validation failure, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::annotations::{
    build_ground_truth, load_captions, load_instances, load_results, validate_corpus, CaptionRecord,
    GroundTruthIndex, GroundTruthSource, ImageId, LoadedCaptions,
};
use crate::chair::{analyze_context, compute_chair, evaluate_corpus, ChairReport, CountMode, HallucinationResult};
use crate::consistency::{load_image_probs, score_caption, summarize, train_lm, NgramLanguageModel};
use crate::error::{Error, Result};
use crate::lexicon::ObjectVocabulary;
use crate::metrics::{
    bucket_predictiveness, bucket_rates, cider, combine_with_chair, correlate_hallucination, human_correlation,
    load_external_scores, BucketTable, CiderConfig, CombineMode, SentenceScore,
};
use crate::report::{cell, emit_report, Provenance, Report, ReportFormat, Table};
use crate::restrict::{
    divergence_analysis, evaluate_tokens, greedy_decode, load_logit_stream, restrict_decode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "chair-eval", version, about = "Object hallucination analysis for image captions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Directory for report files (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Comma-separated report formats.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "json,csv")]
    format: Vec<ReportFormat>,
    /// Synonym table (surface_form, object_name); defaults to the shipped table.
    #[arg(long, env = "CHAIR_SYNONYMS")]
    synonyms: Option<PathBuf>,
    /// Object table (object_name, super_category); defaults to the 80 MSCOCO objects.
    #[arg(long)]
    objects: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TruthArgs {
    /// MSCOCO instances file.
    #[arg(long)]
    instances: PathBuf,
    /// MSCOCO captions file with the reference captions.
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, value_enum, default_value_t = CountMode::Dedup)]
    count_mode: CountMode,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// CHAIRi/CHAIRs, per-object counts and hallucination context tables.
    Chair {
        #[command(flatten)]
        truth: TruthArgs,
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Image and language consistency of mentioned objects.
    Consistency {
        #[command(flatten)]
        truth: TruthArgs,
        #[arg(long)]
        results: PathBuf,
        /// Rows of (image_id, object_name, probability).
        #[arg(long)]
        image_probs: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        lm_order: usize,
        #[arg(long, default_value_t = 0.75)]
        lm_discount: f64,
        /// Load a saved language model instead of training on the references.
        #[arg(long, conflicts_with_all = ["lm_order", "lm_discount"])]
        lm: Option<PathBuf>,
        /// Save the trained language model.
        #[arg(long)]
        save_lm: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// CIDEr-D per caption against the reference captions.
    Cider {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        #[arg(long, default_value_t = 6.0)]
        sigma: f64,
        #[arg(long, default_value_t = 10.0)]
        scale: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Correlation of sentence scores with hallucination and human judgments.
    Correlate {
        #[command(flatten)]
        truth: TruthArgs,
        #[arg(long)]
        results: PathBuf,
        /// Rows of (image_id, model_id, value).
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "metric")]
        metric: String,
        /// Human scores in the same format as --scores.
        #[arg(long)]
        human: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Hallucination-free rate per score bucket, optionally comparing two models.
    Buckets {
        #[command(flatten)]
        truth: TruthArgs,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, requires = "scores_b")]
        results_b: Option<PathBuf>,
        #[arg(long, requires = "results_b")]
        scores_b: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        edges: Vec<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Re-decode exported logit streams while banning hallucinated objects.
    Restrict {
        #[command(flatten)]
        truth: TruthArgs,
        /// Line-delimited JSON streams.
        #[arg(long)]
        streams: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Check that every result image has ground truth.
    Validate {
        #[command(flatten)]
        truth: TruthArgs,
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

enum Outcome {
    Ok,
    ValidationFailed,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::ValidationFailed) => EXIT_FAILURE,
        Err(Error::InvalidArgument(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

struct Context {
    vocab: ObjectVocabulary,
    provenance: Provenance,
    out: PathBuf,
    formats: BTreeSet<ReportFormat>,
}

impl Context {
    fn new(output: &OutputArgs) -> Result<Self> {
        let vocab = ObjectVocabulary::load(output.objects.as_deref(), output.synonyms.as_deref())?;
        let mut provenance = Provenance::new(vocab.table_hash());
        if let Some(p) = &output.synonyms {
            provenance.add_input("synonyms", p)?;
        }
        if let Some(p) = &output.objects {
            provenance.add_input("objects", p)?;
        }
        std::fs::create_dir_all(&output.out).map_err(|e| Error::io(&output.out, e))?;
        Ok(Context {
            vocab,
            provenance,
            out: output.out.clone(),
            formats: output.format.iter().copied().collect(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.provenance.add_input(role, path)
    }

    fn ground_truth(&mut self, truth: &TruthArgs) -> Result<(GroundTruthIndex, LoadedCaptions)> {
        self.input("instances", &truth.instances)?;
        self.input("captions", &truth.captions)?;
        let segs = load_instances(&truth.instances, &self.vocab)?;
        let caps = load_captions(&truth.captions)?;
        let gt = build_ground_truth(&segs, &caps.references, &self.vocab);
        Ok((gt, caps))
    }

    fn results(&mut self, role: &str, path: &Path) -> Result<Vec<CaptionRecord>> {
        self.input(role, path)?;
        load_results(path)
    }

    fn emit(mut self, json_name: &str, config: serde_json::Value, body: serde_json::Value, tables: Vec<Table>) -> Result<()> {
        self.provenance.config = config;
        let report = Report {
            json_name: json_name.into(),
            provenance: self.provenance,
            body,
            tables,
        };
        emit_report(&report, &self.out, &self.formats)?;
        Ok(())
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("report types serialize")
}

fn model_label(model: &Option<String>) -> String {
    model.clone().unwrap_or_default()
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Chair { truth, results, output } => run_chair(&truth, &results, &output),
        Command::Consistency {
            truth,
            results,
            image_probs,
            lm_order,
            lm_discount,
            lm,
            save_lm,
            output,
        } => run_consistency(
            &truth,
            &results,
            image_probs.as_deref(),
            (lm_order, lm_discount),
            lm.as_deref(),
            save_lm.as_deref(),
            &output,
        ),
        Command::Cider {
            captions,
            results,
            max_n,
            sigma,
            scale,
            output,
        } => run_cider(&captions, &results, CiderConfig { max_n, sigma, scale }, &output),
        Command::Correlate {
            truth,
            results,
            scores,
            metric,
            human,
            output,
        } => run_correlate(&truth, &results, &scores, &metric, human.as_deref(), &output),
        Command::Buckets {
            truth,
            results,
            scores,
            results_b,
            scores_b,
            edges,
            output,
        } => run_buckets(&truth, &results, &scores, results_b.as_deref().zip(scores_b.as_deref()), &edges, &output),
        Command::Restrict { truth, streams, output } => run_restrict(&truth, &streams, &output),
        Command::Validate { truth, results, output } => run_validate(&truth, &results, &output),
    }
}

fn chair_summary(report: &ChairReport) -> serde_json::Value {
    json!({ "chair_i": report.chair_i, "chair_s": report.chair_s })
}

fn run_chair(truth: &TruthArgs, results_path: &Path, output: &OutputArgs) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    let (gt, caps) = ctx.ground_truth(truth)?;
    let records = ctx.results("results", results_path)?;
    let eval = evaluate_corpus(&records, &gt, &ctx.vocab, truth.count_mode)?;
    let report = compute_chair(&eval.results, &ctx.vocab)?;
    let context = analyze_context(&eval.results, &gt, &ctx.vocab);

    let mut by_source = serde_json::Map::new();
    for (name, source) in [
        ("union", GroundTruthSource::Union),
        ("segmentation_only", GroundTruthSource::SegmentationOnly),
        ("captions_only", GroundTruthSource::CaptionsOnly),
    ] {
        let restricted = gt.restricted_to(source);
        let e = evaluate_corpus(&records, &restricted, &ctx.vocab, truth.count_mode)?;
        by_source.insert(name.into(), chair_summary(&compute_chair(&e.results, &ctx.vocab)?));
    }

    let mut per_object = Table::new("per_object.csv", &["object", "super_category", "mentioned", "hallucinated"], 1);
    for (object, counts) in &report.per_object {
        per_object.push(vec![
            object.clone(),
            ctx.vocab.super_category(object).unwrap_or_default().to_owned(),
            counts.mentioned.to_string(),
            counts.hallucinated.to_string(),
        ]);
    }
    let mut context_table = Table::new("context.csv", &["table", "object", "key", "count"], 3);
    for (object, n) in &context.per_object {
        context_table.push(vec!["object".into(), object.clone(), String::new(), n.to_string()]);
    }
    for (sup, n) in &context.per_super_category {
        context_table.push(vec!["super_category".into(), sup.clone(), String::new(), n.to_string()]);
    }
    for (name, nested) in [
        ("preceding_word", &context.preceding_word),
        ("preceding_bigram", &context.preceding_bigram),
        ("cooccurrence", &context.cooccurrence),
    ] {
        for (object, counts) in nested {
            for (key, n) in counts {
                context_table.push(vec![name.into(), object.clone(), key.clone(), n.to_string()]);
            }
        }
    }

    println!(
        "CHAIRs {:.4}  CHAIRi {:.4}  ({} sentences, {} mentions)",
        report.chair_s, report.chair_i, report.n_sentences, report.n_mentions
    );
    let excluded: Vec<_> = eval
        .excluded_no_references
        .iter()
        .map(|&i| json!({ "index": i, "image_id": records[i].image_id }))
        .collect();
    let body = json!({
        "chair": to_json(&report),
        "context": to_json(&context),
        "by_ground_truth_source": by_source,
        "excluded_no_references": excluded,
        "skipped_empty_reference_captions": caps.skipped_empty,
        "validation": to_json(&validate_corpus(&gt, &records)),
    });
    let config = json!({ "subcommand": "chair", "count_mode": truth.count_mode });
    ctx.emit("chair_report.json", config, body, vec![per_object, context_table])?;
    Ok(Outcome::Ok)
}

fn run_consistency(
    truth: &TruthArgs,
    results_path: &Path,
    image_probs: Option<&Path>,
    (order, discount): (usize, f64),
    lm_path: Option<&Path>,
    save_lm: Option<&Path>,
    output: &OutputArgs,
) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    let (gt, caps) = ctx.ground_truth(truth)?;
    let records = ctx.results("results", results_path)?;
    let eval = evaluate_corpus(&records, &gt, &ctx.vocab, truth.count_mode)?;

    let lm = match lm_path {
        Some(p) => {
            ctx.input("lm", p)?;
            NgramLanguageModel::load(p)?
        }
        None => {
            let refs: Vec<&str> = caps
                .references
                .values()
                .flat_map(|r| r.captions.iter().map(String::as_str))
                .collect();
            train_lm(&refs, order, discount)?
        }
    };
    if let Some(p) = save_lm {
        lm.save(p)?;
    }
    let probs = match image_probs {
        Some(p) => {
            ctx.input("image_probs", p)?;
            Some(load_image_probs(p, &ctx.vocab)?)
        }
        None => None,
    };

    let scores: Vec<_> = eval
        .results
        .iter()
        .map(|r| score_caption(r, &lm, probs.as_ref()))
        .collect();
    let summary = summarize(&scores, probs.is_some());

    let mut table = Table::new(
        "consistency.csv",
        &[
            "image_id",
            "model_id",
            "n_mentions",
            "n_hallucinated",
            "language",
            "language_hallucinated",
            "image",
            "image_hallucinated",
        ],
        2,
    );
    for (s, r) in scores.iter().zip(&eval.results) {
        table.push(vec![
            s.image_id.to_string(),
            model_label(&s.model_id),
            s.n_scored.to_string(),
            r.hallucinated.len().to_string(),
            cell(s.language.as_ref().map(|a| a.mean)),
            cell(s.language.as_ref().and_then(|a| a.mean_hallucinated)),
            cell(s.image.as_ref().map(|a| a.mean)),
            cell(s.image.as_ref().and_then(|a| a.mean_hallucinated)),
        ]);
    }
    let body = json!({
        "summary": to_json(&summary),
        "language_model": {
            "kind": "ngram-interpolated-absolute-discounting",
            "order": lm.order(),
            "discount": lm.discount(),
            "vocabulary_size": lm.vocabulary().len(),
        },
        "images_missing_probabilities": scores.iter().filter(|s| s.image_missing).count(),
    });
    let config = json!({
        "subcommand": "consistency",
        "count_mode": truth.count_mode,
        "lm_order": lm.order(),
        "lm_discount": lm.discount(),
    });
    ctx.emit("consistency_report.json", config, body, vec![table])?;
    Ok(Outcome::Ok)
}

/// Groups result captions by model; each model may caption an image once.
fn by_model(records: &[CaptionRecord]) -> Result<BTreeMap<Option<String>, BTreeMap<ImageId, String>>> {
    let mut grouped: BTreeMap<Option<String>, BTreeMap<ImageId, String>> = BTreeMap::new();
    for r in records {
        let slot = grouped.entry(r.model_id.clone()).or_default();
        if slot.insert(r.image_id, r.raw_text.clone()).is_some() {
            return Err(Error::Validation(format!(
                "image {} captioned twice by model {:?}",
                r.image_id,
                model_label(&r.model_id)
            )));
        }
    }
    Ok(grouped)
}

fn run_cider(captions: &Path, results_path: &Path, cfg: CiderConfig, output: &OutputArgs) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    ctx.input("captions", captions)?;
    let caps = load_captions(captions)?;
    let records = ctx.results("results", results_path)?;
    let mut table = Table::new("cider.csv", &["image_id", "model_id", "value"], 2);
    let mut means = BTreeMap::new();
    for (model, candidates) in by_model(&records)? {
        let scores = cider(&candidates, &caps.references, &cfg)?;
        for (id, v) in &scores.per_image {
            table.push(vec![id.to_string(), model_label(&model), v.to_string()]);
        }
        println!("CIDEr {:.4} ({})", scores.mean, model_label(&model));
        means.insert(model_label(&model), json!({ "mean": scores.mean, "n_documents": scores.n_documents }));
    }
    let config = json!({ "subcommand": "cider", "cider": to_json(&cfg) });
    ctx.emit("cider_report.json", config, json!({ "models": means }), vec![table])?;
    Ok(Outcome::Ok)
}

fn correlation_cell(r: Result<f64>) -> (String, serde_json::Value) {
    match r {
        Ok(v) => (v.to_string(), json!(v)),
        Err(e) => (String::new(), json!({ "error": e.to_string() })),
    }
}

fn run_correlate(
    truth: &TruthArgs,
    results_path: &Path,
    scores_path: &Path,
    metric: &str,
    human_path: Option<&Path>,
    output: &OutputArgs,
) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    let (gt, _) = ctx.ground_truth(truth)?;
    let records = ctx.results("results", results_path)?;
    ctx.input("scores", scores_path)?;
    let scores = load_external_scores(scores_path, metric)?;
    let results = evaluate_corpus(&records, &gt, &ctx.vocab, truth.count_mode)?.results;

    let mut table = Table::new("correlations.csv", &["scope", "analysis", "metric", "value"], 3);
    let mut body = serde_json::Map::new();

    // Alignment problems over the whole corpus are fatal.
    let overall = correlate_hallucination(&scores, &results);
    if let Err(e @ Error::Alignment(_)) = overall {
        return Err(e);
    }
    let mut scopes: Vec<(String, Vec<SentenceScore>, Vec<HallucinationResult>)> =
        vec![("all".into(), scores.clone(), results.clone())];
    let models: BTreeSet<Option<String>> = results.iter().map(|r| r.record.model_id.clone()).collect();
    if models.len() > 1 {
        for m in &models {
            scopes.push((
                format!("model:{}", model_label(m)),
                scores.iter().filter(|s| &s.model_id == m).cloned().collect(),
                results.iter().filter(|r| &r.record.model_id == m).cloned().collect(),
            ));
        }
    }
    for (scope, s, r) in &scopes {
        let (c, j) = correlation_cell(correlate_hallucination(s, r));
        table.push(vec![scope.clone(), "hallucination_free".into(), metric.into(), c]);
        body.insert(format!("{scope}/hallucination_free/{metric}"), j);
    }

    if let Some(hp) = human_path {
        ctx.input("human", hp)?;
        let human = load_external_scores(hp, "human")?;
        let variants = [
            (metric.to_owned(), scores.clone()),
            (format!("{metric}+1-chs"), combine_with_chair(&scores, &results, CombineMode::Sentence)?),
            (format!("{metric}+1-chi"), combine_with_chair(&scores, &results, CombineMode::Instance)?),
        ];
        for (name, variant) in &variants {
            match human_correlation(variant, &human) {
                Ok(hc) => {
                    table.push(vec!["all".into(), "human_pooled".into(), name.clone(), hc.pooled.to_string()]);
                    table.push(vec!["all".into(), "human_per_image".into(), name.clone(), cell(hc.per_image_mean)]);
                    body.insert(format!("all/human/{name}"), to_json(&hc));
                }
                Err(e @ Error::Alignment(_)) => return Err(e),
                Err(e) => {
                    table.push(vec!["all".into(), "human_pooled".into(), name.clone(), String::new()]);
                    body.insert(format!("all/human/{name}"), json!({ "error": e.to_string() }));
                }
            }
        }
    }
    let config = json!({ "subcommand": "correlate", "metric": metric, "count_mode": truth.count_mode });
    ctx.emit("correlations_report.json", config, serde_json::Value::Object(body), vec![table])?;
    Ok(Outcome::Ok)
}

fn push_buckets(table: &mut Table, model: &str, t: &BucketTable) {
    for (i, b) in t.buckets.iter().enumerate() {
        table.push(vec![
            i.to_string(),
            model.into(),
            b.lower.to_string(),
            b.upper.to_string(),
            b.n_sentences.to_string(),
            b.n_hallucination_free.to_string(),
            cell(b.pct_no_hallucination),
        ]);
    }
}

fn run_buckets(
    truth: &TruthArgs,
    results_a: &Path,
    scores_a: &Path,
    model_b: Option<(&Path, &Path)>,
    edges: &[f64],
    output: &OutputArgs,
) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    let (gt, _) = ctx.ground_truth(truth)?;
    let load = |ctx: &mut Context, tag: &str, rp: &Path, sp: &Path| -> Result<(Vec<SentenceScore>, Vec<HallucinationResult>)> {
        let records = ctx.results(&format!("results{tag}"), rp)?;
        ctx.input(&format!("scores{tag}"), sp)?;
        let scores = load_external_scores(sp, "metric")?;
        let results = evaluate_corpus(&records, &gt, &ctx.vocab, truth.count_mode)?.results;
        Ok((scores, results))
    };
    let (sa, ra) = load(&mut ctx, "", results_a, scores_a)?;
    let mut table = Table::new(
        "buckets.csv",
        &["bucket", "model", "lower", "upper", "n_sentences", "n_hallucination_free", "pct_no_hallucination"],
        2,
    );
    let body = match model_b {
        Some((rb, sb)) => {
            let (sb, rb) = load(&mut ctx, "_b", rb, sb)?;
            let cmp = bucket_predictiveness(&sa, &ra, &sb, &rb, edges)?;
            push_buckets(&mut table, "a", &cmp.model_a);
            push_buckets(&mut table, "b", &cmp.model_b);
            for (i, (d, b)) in cmp.difference.iter().zip(&cmp.model_a.buckets).enumerate() {
                table.push(vec![
                    i.to_string(),
                    "a-b".into(),
                    b.lower.to_string(),
                    b.upper.to_string(),
                    String::new(),
                    String::new(),
                    cell(*d),
                ]);
            }
            to_json(&cmp)
        }
        None => {
            let t = bucket_rates(&sa, &ra, edges)?;
            push_buckets(&mut table, "a", &t);
            to_json(&t)
        }
    };
    let config = json!({ "subcommand": "buckets", "edges": edges, "count_mode": truth.count_mode });
    ctx.emit("buckets_report.json", config, body, vec![table])?;
    Ok(Outcome::Ok)
}

fn run_restrict(truth: &TruthArgs, streams_path: &Path, output: &OutputArgs) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    let (gt, _) = ctx.ground_truth(truth)?;
    ctx.input("streams", streams_path)?;
    let streams = load_logit_stream(streams_path)?;
    if streams.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut decodes = Vec::with_capacity(streams.len());
    let mut pairs = Vec::with_capacity(streams.len());
    let mut original_results = Vec::with_capacity(streams.len());
    let mut restricted_results = Vec::with_capacity(streams.len());
    for stream in &streams {
        let original = stream.original_tokens.clone().unwrap_or_else(|| greedy_decode(stream));
        let restricted = restrict_decode(stream, &gt, &ctx.vocab)?;
        let orig_eval = evaluate_tokens(stream.image_id, &original, &gt, &ctx.vocab)?;
        let rest_eval = evaluate_tokens(stream.image_id, &restricted.tokens, &gt, &ctx.vocab)?;
        decodes.push(json!({
            "image_id": stream.image_id,
            "original": original.join(" "),
            "original_hallucinated": orig_eval.hallucinated.iter().map(|m| m.object.clone()).collect::<Vec<_>>(),
            "restricted": restricted.caption,
            "truncated_by_restriction": restricted.truncated_by_restriction,
            "banned": to_json(&restricted.banned),
        }));
        pairs.push((original, restricted.tokens));
        original_results.push(orig_eval);
        restricted_results.push(rest_eval);
    }
    let divergence = divergence_analysis(&pairs, &original_results)?;
    let original_chair = compute_chair(&original_results, &ctx.vocab)?;
    let restricted_chair = compute_chair(&restricted_results, &ctx.vocab)?;
    println!(
        "original CHAIRs {:.4} -> restricted CHAIRs {:.4}",
        original_chair.chair_s, restricted_chair.chair_s
    );
    let body = json!({
        "captions": decodes,
        "divergence": to_json(&divergence),
        "original_chair": chair_summary(&original_chair),
        "restricted_chair": chair_summary(&restricted_chair),
    });
    let config = json!({ "subcommand": "restrict", "ban_logprob": crate::restrict::BANNED_LOGPROB });
    ctx.emit("restricted_captions.json", config, body, Vec::new())?;
    Ok(Outcome::Ok)
}

fn run_validate(truth: &TruthArgs, results_path: &Path, output: &OutputArgs) -> Result<Outcome> {
    let mut ctx = Context::new(output)?;
    let (gt, caps) = ctx.ground_truth(truth)?;
    let records = ctx.results("results", results_path)?;
    let report = validate_corpus(&gt, &records);
    for m in &report.missing {
        eprintln!("record {}: image {} has no ground truth", m.index, m.image_id);
    }
    let clean = report.is_clean();
    println!(
        "{} records, {} missing ground truth, {} images without ground-truth objects",
        report.n_records,
        report.missing.len(),
        report.no_ground_truth_objects
    );
    let body = json!({
        "validation": to_json(&report),
        "skipped_empty_reference_captions": caps.skipped_empty,
    });
    ctx.emit("validation_report.json", json!({ "subcommand": "validate" }), body, Vec::new())?;
    Ok(if clean { Outcome::Ok } else { Outcome::ValidationFailed })
}
