//! Subcommand bodies: wiring between parsed flags, the pipeline library,
//! and artifact files.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clozeqa::corpus::{self, write_jsonl, SplitName};
use clozeqa::eval;
use clozeqa::mcscorer::{self, read_predictions, write_predictions};
use clozeqa::probe;
use clozeqa::tapt;
use clozeqa::textprep::{load_tokenizer, save_tokenizer, Tokenizer, WhitespaceTokenizer};
use serde::Serialize;

use crate::artifacts::{
    fresh_model, load_scoring_model, load_split, obtain_tokenizer, tokenizer_sidecar,
    TokenizerSource,
};
use crate::config::PipelineConfig;
use crate::manifest::ManifestBuilder;
use crate::{
    AnalyzeLengthArgs, AugmentArgs, EnsembleArgs, EvaluateArgs, IngestArgs, PredictArgs,
    ProbeArgs, ReportErrorsArgs, TaptGenArgs, TaptMode, TrainArgs,
};

/// Serialize rows as JSON lines.
fn write_jsonl_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut writer = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut writer, row)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// A plain-text corpus: one document per line, empty lines skipped.
fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|line| !line.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn ingest(args: &IngestArgs, config: &PipelineConfig) -> Result<()> {
    let split = load_split(&args.data, args.task, args.split)?;
    let report = corpus::validate_split(&split);
    println!("instances: {}", report.total);
    println!("valid: {}  flagged: {}", report.accepted, report.rejected);
    for (id, issues) in &report.flagged {
        let text: Vec<String> = issues.iter().map(ToString::to_string).collect();
        println!("  {id}: {}", text.join("; "));
    }
    if !split.is_empty() {
        let (tokenizer, _) = obtain_tokenizer(args.tokenizer.as_deref(), None, &[&split])?;
        let stats = corpus::split_stats(&split, tokenizer.as_ref())?;
        println!("avg passage tokens: {:.1}", stats.avg_passage_tokens);
        println!("avg passage words: {:.1}", stats.avg_passage_words);
    }
    if let Some(out) = &args.out {
        write_jsonl(&split, out)?;
        let mut builder = ManifestBuilder::new("ingest", config, config.seed()?);
        builder.input(&args.data)?;
        if let Some(tok) = &args.tokenizer {
            builder.input(tok)?;
        }
        builder.finish(&[out])?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub(crate) fn probe(args: &ProbeArgs, config: &PipelineConfig) -> Result<()> {
    let split = load_split(&args.data, args.task, args.split)?;
    let sidecar = args.model.as_deref().map(tokenizer_sidecar);
    let (tokenizer, source) =
        obtain_tokenizer(args.tokenizer.as_deref(), sidecar.as_deref(), &[&split])?;
    let similarity = match args.similarity {
        Some(s) => s,
        None => config.similarity()?,
    };
    let (encoder, _head) = match &args.model {
        Some(path) => load_scoring_model(path, tokenizer.as_ref(), &source)?,
        None => fresh_model(config, tokenizer.as_ref())?,
    };

    let ranked = split
        .instances
        .iter()
        .map(|inst| probe::zero_shot_rank(&encoder, tokenizer.as_ref(), inst, similarity))
        .collect::<clozeqa::Result<Vec<_>>>()?;

    let labeled = !split.is_empty() && split.instances.iter().all(|i| i.gold_index.is_some());
    if labeled {
        let correct = split
            .instances
            .iter()
            .zip(&ranked)
            .filter(|(inst, r)| inst.gold_index == Some(r.choice()))
            .count();
        println!(
            "zero-shot accuracy: {}",
            correct as f64 / split.len() as f64
        );
    }

    if let Some(out) = &args.out {
        write_jsonl_rows(out, &ranked)?;
        let mut builder = ManifestBuilder::new("probe", config, config.seed()?);
        builder.input(&args.data)?;
        if let Some(model) = &args.model {
            builder.input(model)?;
        }
        if let TokenizerSource::File(path) = &source {
            builder.input(path)?;
        }
        builder.finish(&[out])?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub(crate) fn augment(args: &AugmentArgs, config: &PipelineConfig) -> Result<()> {
    let split = load_split(&args.data, args.task, args.split)?;
    let sidecar = args.model.as_deref().map(tokenizer_sidecar);
    let (tokenizer, source) =
        obtain_tokenizer(args.tokenizer.as_deref(), sidecar.as_deref(), &[&split])?;
    let (encoder, _head) = match &args.model {
        Some(path) => load_scoring_model(path, tokenizer.as_ref(), &source)?,
        None => fresh_model(config, tokenizer.as_ref())?,
    };

    let (augmented, stats) = probe::augment_split(&encoder, tokenizer.as_ref(), &split)?;
    write_jsonl(&augmented, &args.out)?;
    println!(
        "augmented: {}  gold skips: {}  duplicate negatives: {}",
        stats.total, stats.gold_skipped, stats.duplicates
    );

    let mut builder = ManifestBuilder::new("augment", config, config.seed()?);
    builder.input(&args.data)?;
    if let Some(model) = &args.model {
        builder.input(model)?;
    }
    if let TokenizerSource::File(path) = &source {
        builder.input(path)?;
    }
    builder.finish(&[&args.out])?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub(crate) fn tapt_gen(args: &TaptGenArgs, config: &PipelineConfig) -> Result<()> {
    let max_len = config.max_len()?;
    let mut builder = ManifestBuilder::new("tapt-gen", config, config.seed()?);
    match args.mode {
        TaptMode::WithinTask => {
            let data = args
                .data
                .as_ref()
                .context("--data is required in within-task mode")?;
            let split = load_split(data, args.task, args.split)?;
            let (tokenizer, source) =
                obtain_tokenizer(args.tokenizer.as_deref(), None, &[&split])?;
            let sequences =
                tapt::gen_within_task(&split, tokenizer.as_ref(), max_len, config.stride()?)?;
            let lines: Vec<String> = sequences.iter().map(|ids| join_ids(ids)).collect();
            std::fs::write(&args.out, lines.join("\n") + "\n")?;
            println!("sequences: {}", sequences.len());

            builder.input(data)?;
            if let TokenizerSource::File(path) = &source {
                builder.input(path)?;
            }
            builder.finish(&[&args.out])?;
        }
        TaptMode::Mlm => {
            let docs_path = args.docs.as_ref().context("--docs is required in mlm mode")?;
            let documents = read_documents(docs_path)?;
            let tokenizer: Box<dyn Tokenizer> = match &args.tokenizer {
                Some(path) => load_tokenizer(path)
                    .with_context(|| format!("loading tokenizer {}", path.display()))?,
                None => Box::new(WhitespaceTokenizer::from_texts(
                    documents.iter().map(String::as_str),
                )),
            };
            let examples = tapt::gen_in_domain_mlm(
                &documents,
                tokenizer.as_ref(),
                max_len,
                config.mask_rate()?,
                config.seed()?,
            )?;

            let inputs: Vec<String> = examples.iter().map(|e| join_ids(&e.input_ids)).collect();
            std::fs::write(&args.out, inputs.join("\n") + "\n")?;
            let labels: Vec<String> = examples
                .iter()
                .map(|e| {
                    e.targets
                        .iter()
                        .map(|(pos, id)| format!("{pos}:{id}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let labels_path = {
                let mut name = args.out.file_name().unwrap_or_default().to_os_string();
                name.push(".labels");
                args.out.with_file_name(name)
            };
            std::fs::write(&labels_path, labels.join("\n") + "\n")?;
            let masked: usize = examples.iter().map(|e| e.targets.len()).sum();
            println!("examples: {}  masked tokens: {}", examples.len(), masked);

            builder.input(docs_path)?;
            if let Some(tok) = &args.tokenizer {
                builder.input(tok)?;
            }
            builder.finish(&[&args.out, &labels_path])?;
        }
        TaptMode::Nsp => {
            let docs_path = args.docs.as_ref().context("--docs is required in nsp mode")?;
            let documents = read_documents(docs_path)?;
            let nsp = tapt::gen_nsp_pairs(&documents, config.seed()?)?;
            let lines: Vec<String> = nsp
                .pairs
                .iter()
                .map(|p| format!("{}\t{}\t{}", p.first, p.second, u8::from(p.is_next)))
                .collect();
            std::fs::write(&args.out, lines.join("\n") + "\n")?;
            println!("pairs: {}  all true: {}", nsp.pairs.len(), nsp.all_true);

            builder.input(docs_path)?;
            builder.finish(&[&args.out])?;
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub(crate) fn train(args: &TrainArgs, config: &PipelineConfig) -> Result<()> {
    let train_split = load_split(&args.train, args.task, SplitName::Train)?;
    let dev_split = load_split(&args.dev, args.task, SplitName::Dev)?;
    let (tokenizer, source) = obtain_tokenizer(
        args.tokenizer.as_deref(),
        None,
        &[&train_split, &dev_split],
    )?;
    let (mut encoder, mut head) = fresh_model(config, tokenizer.as_ref())?;
    let train_config = config.train_config()?;

    let report = mcscorer::train(
        &mut encoder,
        &mut head,
        tokenizer.as_ref(),
        &train_split,
        &dev_split,
        &train_config,
    )?;
    for epoch in &report.history {
        println!(
            "epoch {}: train loss {:.6}  dev accuracy {:.4}",
            epoch.epoch, epoch.mean_train_loss, epoch.dev_accuracy
        );
    }
    println!(
        "best epoch: {}  dev accuracy: {}",
        report.best_epoch, report.best_dev_accuracy
    );

    mcscorer::save_model(&args.out, &encoder, &head, tokenizer.fingerprint())?;
    let mut outputs: Vec<PathBuf> = vec![args.out.clone()];
    if matches!(source, TokenizerSource::Derived) {
        // Persist the derived tokenizer so predict and probe can reload
        // the exact vocabulary this checkpoint was trained with.
        let tok_path = tokenizer_sidecar(&args.out);
        save_tokenizer(tokenizer.as_ref(), &tok_path)?;
        outputs.push(tok_path);
    }
    let history_path = args.history.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.json");
        args.out.with_file_name(name)
    });
    std::fs::write(&history_path, serde_json::to_string_pretty(&report)? + "\n")?;
    outputs.push(history_path);

    let mut builder = ManifestBuilder::new("train", config, train_config.seed);
    builder.input(&args.train)?;
    builder.input(&args.dev)?;
    if let TokenizerSource::File(path) = &source {
        builder.input(path)?;
    }
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    builder.finish(&output_refs)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub(crate) fn predict(args: &PredictArgs, config: &PipelineConfig) -> Result<()> {
    let split = load_split(&args.data, args.task, args.split)?;
    let sidecar = tokenizer_sidecar(&args.model);
    let (tokenizer, source) =
        obtain_tokenizer(args.tokenizer.as_deref(), Some(&sidecar), &[&split])?;
    let (encoder, head) = load_scoring_model(&args.model, tokenizer.as_ref(), &source)?;

    let predictions = mcscorer::predict_split(
        &encoder,
        &head,
        tokenizer.as_ref(),
        &split,
        config.max_len()?,
        config.stride()?,
    )?;
    write_predictions(&args.out, &predictions)?;
    println!("predictions: {}", predictions.len());

    let mut builder = ManifestBuilder::new("predict", config, config.seed()?);
    builder.input(&args.data)?;
    builder.input(&args.model)?;
    if let TokenizerSource::File(path) = &source {
        builder.input(path)?;
    }
    builder.finish(&[&args.out])?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub(crate) fn ensemble(args: &EnsembleArgs, config: &PipelineConfig) -> Result<()> {
    let members = args
        .members
        .iter()
        .map(|path| {
            read_predictions(path).with_context(|| format!("reading {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = eval::ensemble(&members)?;
    write_predictions(&args.out, &combined)?;
    println!("members: {}  instances: {}", members.len(), combined.len());

    let mut builder = ManifestBuilder::new("ensemble", config, config.seed()?);
    for member in &args.members {
        builder.input(member)?;
    }
    builder.finish(&[&args.out])?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub(crate) fn evaluate(args: &EvaluateArgs, _config: &PipelineConfig) -> Result<()> {
    let task = args.target_task.unwrap_or(args.task);
    let split = load_split(&args.data, task, args.split)?;
    let predictions = read_predictions(&args.pred)?;
    let accuracy = eval::accuracy(&predictions, &split)?;
    println!("accuracy: {accuracy}");
    if let Some(source_task) = args.source_task {
        let report = eval::transfer_eval(source_task, &predictions, &split)?;
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(())
}

pub(crate) fn analyze_length(args: &AnalyzeLengthArgs, config: &PipelineConfig) -> Result<()> {
    let split = load_split(&args.data, args.task, args.split)?;
    let predictions = read_predictions(&args.pred)?;
    let (tokenizer, source) = obtain_tokenizer(args.tokenizer.as_deref(), None, &[&split])?;
    let edges = match &args.edges {
        Some(raw) => raw
            .split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|e| anyhow::anyhow!("--edges entry `{part}`: {e}"))
            })
            .collect::<Result<Vec<usize>>>()?,
        None => config.bucket_edges()?,
    };

    let report = eval::length_buckets(&predictions, &split, tokenizer.as_ref(), &edges)?;
    println!(
        "{:>12}  {:>6}  {:>7}  {:>8}",
        "bucket", "total", "correct", "accuracy"
    );
    for bucket in &report.buckets {
        let range = match bucket.hi {
            Some(hi) => format!("[{},{})", bucket.lo, hi),
            None => format!("[{},inf)", bucket.lo),
        };
        let accuracy = bucket
            .accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:>12}  {:>6}  {:>7}  {:>8}",
            range, bucket.total, bucket.correct, accuracy
        );
    }

    if let Some(out) = &args.out {
        std::fs::write(out, report.to_csv())?;
        let mut builder = ManifestBuilder::new("analyze-length", config, config.seed()?);
        builder.input(&args.pred)?;
        builder.input(&args.data)?;
        if let TokenizerSource::File(path) = &source {
            builder.input(path)?;
        }
        builder.finish(&[out])?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub(crate) fn report_errors(args: &ReportErrorsArgs, config: &PipelineConfig) -> Result<()> {
    let split = load_split(&args.data, args.task, args.split)?;
    let predictions = read_predictions(&args.pred)?;
    let limit = match args.limit {
        Some(limit) => limit,
        None => config.error_limit()?,
    };
    let cases = eval::error_report(&predictions, &split, limit)?;
    println!("error cases: {}", cases.len());
    for case in &cases {
        println!("\n{} (confidence {:.4})", case.id, case.confidence);
        println!(
            "  chose {} `{}`, gold {} `{}`",
            case.chosen_index, case.chosen_text, case.gold_index, case.gold_text
        );
        if let Some(token) = &case.nal_token {
            println!("  mined negative: `{token}`");
        }
        println!("  {}", case.passage_excerpt);
    }

    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&cases)? + "\n")?;
        let mut builder = ManifestBuilder::new("report-errors", config, config.seed()?);
        builder.input(&args.pred)?;
        builder.input(&args.data)?;
        builder.finish(&[out])?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
