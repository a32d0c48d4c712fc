//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dualenc_core::config::Ablation;
use dualenc_core::eval::{evaluate, load_eval_instances, CopyEncoder, RetrievalEncoder};
use dualenc_core::heads::Side;
use dualenc_core::intent::{
    label_set, load_intent_examples, split_80_10_10, train_intent_classifier, FeatureSet, IntentClassifier, IntentExample,
    IntentGrid,
};
use dualenc_core::model::InferenceModel;
use dualenc_core::objective::rank_by_scores;
use dualenc_core::serialize::{load_model, ModelFile};
use dualenc_core::train::{
    ingest, read_records, IngestMode, RunOutputs, TrainConfig, Trainer, STATE_FILE_NAME,
};
use dualenc_core::{Error, ModelConfig, SubwordVocab, VocabLimits};
use serde::Serialize;

use crate::settings::{resolve_model, resolve_train, CliError, CliResult, ConfigFile};
use crate::{
    BuildVocabArgs, Command, EncodeArgs, EvalArgs, FinetuneArgs, InputFormat, InspectArgs, IntentEvalArgs, IntentTrainArgs,
    ModelArgs, Preset, RankArgs, Representation, SideArg, TrainArgs, TrainFlags,
};

pub const VOCAB_FILE_NAME: &str = "vocab.txt";
pub const METRICS_FILE_NAME: &str = "metrics.jsonl";

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Encode(a) => encode(a),
        Command::Rank(a) => rank(a),
        Command::Eval(a) => eval(a),
        Command::IntentTrain(a) => intent_train(a),
        Command::IntentEval(a) => intent_eval(a),
        Command::InspectModel(a) => inspect(a),
    }
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let f = BufReader::new(File::open(path)?);
    Ok(f.lines().collect::<io::Result<Vec<_>>>()?)
}

fn build_vocab(a: BuildVocabArgs) -> CliResult<()> {
    let texts = match a.format {
        InputFormat::Text => read_lines(&a.input)?,
        InputFormat::Jsonl => {
            let (records, bad) = read_records(BufReader::new(File::open(&a.input)?))?;
            if bad > 0 {
                log::warn!("skipped {bad} malformed corpus lines");
            }
            let mut out = Vec::with_capacity(records.len() * 2);
            for r in records {
                out.push(r.context);
                out.push(r.response);
                out.extend(r.extra_contexts.into_iter().flatten());
            }
            out
        }
    };
    let limits = VocabLimits {
        min_frequency: a.min_frequency,
        max_subword_chars: a.max_subword_chars,
        max_consecutive_digits: a.max_consecutive_digits,
        iterations: a.iterations,
        oov_buckets: a.oov_buckets,
    };
    let vocab = SubwordVocab::build(texts, limits)?;
    vocab.save(&a.output)?;
    println!("{} subwords + {} OOV buckets written to {}", vocab.size(), vocab.oov_buckets(), a.output.display());
    Ok(())
}

fn ablation(flag: Option<char>) -> CliResult<Option<Ablation>> {
    flag.map(|c| Ablation::from_letter(c).ok_or_else(|| CliError::Usage(format!("unknown ablation {c:?}; expected A-F"))))
        .transpose()
}

/// Shared body of `train` and `finetune` once the model and trainer exist.
fn run_training(flags: &TrainFlags, mut trainer: Trainer, vocab: &SubwordVocab) -> CliResult<()> {
    fs::create_dir_all(&flags.out_dir)?;
    vocab.save(flags.out_dir.join(VOCAB_FILE_NAME))?;
    let mode = if trainer.model_config().multi_context { IngestMode::Multi } else { IngestMode::Single };
    let corpus = ingest(&flags.corpus, vocab, mode, trainer.model_config().max_seq_len, trainer.config.context_join)?;
    log::info!("{} training pairs ({} skipped)", corpus.len(), corpus.skipped);
    let validation = flags.validation.as_deref().map(load_eval_instances).transpose()?;
    let metrics_path = flags.out_dir.join(METRICS_FILE_NAME);
    let metrics_file = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let mut metrics = BufWriter::new(metrics_file);
    let outputs = RunOutputs {
        validation: validation.as_deref().map(|v| (vocab, v)),
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(flags.out_dir.clone()),
        vocab_digest: vocab.digest(),
    };
    let summary = trainer.run(&corpus, outputs)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn effective_vocab(vocab: SubwordVocab, cfg: &ModelConfig) -> CliResult<SubwordVocab> {
    if vocab.oov_buckets() as usize == cfg.oov_buckets {
        Ok(vocab)
    } else {
        Ok(vocab.with_oov_buckets(cfg.oov_buckets as u32)?)
    }
}

fn resume_or(flags: &TrainFlags, cfg: TrainConfig, fresh: impl FnOnce(TrainConfig) -> CliResult<Trainer>) -> CliResult<Trainer> {
    let state = flags.out_dir.join(STATE_FILE_NAME);
    if flags.resume && state.exists() {
        let t = Trainer::load_state(&state, cfg)?;
        log::info!("resumed at step {}", t.step);
        Ok(t)
    } else {
        fresh(cfg)
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    let flags = &a.flags;
    let file = ConfigFile::load(flags.config.as_deref())?;
    let vocab = SubwordVocab::load(&flags.vocab)?;
    let base = match a.preset {
        Preset::Full => ModelConfig::full_size(vocab.size()),
        Preset::Small => ModelConfig::small(vocab.size()),
    };
    let mut mc = resolve_model(ModelConfig { oov_buckets: vocab.oov_buckets() as usize, ..base }, &file)?;
    if mc.vocab_size != vocab.size() {
        return Err(CliError::Usage(format!("[model] vocab_size {} differs from the vocabulary's {}", mc.vocab_size, vocab.size())));
    }
    mc.multi_context |= flags.multi_context;
    if let Some(ab) = ablation(flags.ablation)? {
        ab.apply(&mut mc);
    }
    mc.validate()?;
    let vocab = effective_vocab(vocab, &mc)?;
    let tc = resolve_train(TrainConfig::pretrain(), &file, flags)?;
    let trainer = resume_or(flags, tc, |tc| Ok(Trainer::new(&mc, tc)?))?;
    run_training(flags, trainer, &vocab)
}

fn finetune(a: FinetuneArgs) -> CliResult<()> {
    let flags = &a.flags;
    let file = ConfigFile::load(flags.config.as_deref())?;
    if file.model.is_some() {
        return Err(CliError::Usage("finetune takes its architecture from --init; remove [model] from the config".into()));
    }
    let vocab = SubwordVocab::load(&flags.vocab)?;
    let init = ModelFile::load(&a.init)?;
    init.check_vocab(&vocab)?;
    let mc = init.config.clone();
    if flags.multi_context && !mc.multi_context {
        return Err(CliError::Usage("--multi-context needs a multi-context model in --init".into()));
    }
    if flags.ablation.is_some() {
        return Err(CliError::Usage("ablations apply at pretraining time".into()));
    }
    let tc = resolve_train(TrainConfig::finetune(), &file, flags)?;
    let trainer = resume_or(flags, tc, |tc| Ok(Trainer::from_store(&mc, init.to_store(), tc)?))?;
    run_training(flags, trainer, &vocab)
}

fn load_inference(m: &ModelArgs) -> CliResult<InferenceModel> {
    let vocab = SubwordVocab::load(&m.vocab)?;
    Ok(load_model(&m.model, vocab, None)?)
}

#[derive(Serialize)]
struct EncodedLine<'a> {
    text: &'a str,
    encoding: Vec<f32>,
}

fn encode(a: EncodeArgs) -> CliResult<()> {
    let model = load_inference(&a.model)?;
    let texts = read_lines(&a.input)?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for chunk in texts.chunks(256) {
        let enc = match (a.representation, a.side) {
            (Representation::R, _) => model.encode_r(chunk)?,
            (Representation::H, SideArg::Context) => model.encode_contexts(chunk, &[])?,
            (Representation::H, SideArg::Response) => model.encode_side(chunk, Side::Response)?,
        };
        for (text, row) in chunk.iter().zip(enc.rows()) {
            serde_json::to_writer(&mut out, &EncodedLine { text, encoding: row.to_vec() })?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn rank(a: RankArgs) -> CliResult<()> {
    let model = load_inference(&a.model)?;
    let candidates: Vec<String> = read_lines(&a.candidates)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::Data("no candidate responses".into()).into());
    }
    let q = model.encode_contexts(&[a.context.as_str()], &[a.extra_contexts.clone()])?;
    let r = model.encode_responses(&candidates)?;
    let scores: Vec<f32> = r.rows().into_iter().map(|row| row.dot(&q.row(0))).collect();
    let order = rank_by_scores(&scores);
    let top = a.top.unwrap_or(order.len()).min(order.len());
    for (pos, &i) in order[..top].iter().enumerate() {
        println!("{}\t{:.6}\t{}", pos + 1, scores[i], candidates[i]);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let instances = load_eval_instances(&a.instances)?;
    let encoder: Box<dyn RetrievalEncoder> = if a.copy_encoder {
        Box::new(CopyEncoder { dim: 64 })
    } else {
        match (&a.model, &a.vocab) {
            (Some(model), Some(vocab)) => Box::new(load_inference(&ModelArgs { model: model.clone(), vocab: vocab.clone() })?),
            _ => return Err(CliError::Usage("eval needs --model and --vocab, or --copy-encoder".into())),
        }
    };
    let report = evaluate(&instances, encoder.as_ref(), a.pool_size, &a.k)?;
    for (k, r) in &report.recall {
        println!("R_{}@{k}\t{r:.4}", report.pool_size);
    }
    println!("MRR\t{:.4}", report.mrr);
    println!("instances\t{}", report.instances);
    Ok(())
}

fn features(model: &InferenceModel, examples: &[IntentExample], labels: &[String]) -> CliResult<FeatureSet> {
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let tags: Vec<String> = examples.iter().map(|e| e.label.clone()).collect();
    Ok(FeatureSet::new(model.encode_r(&texts)?, &tags, labels)?)
}

fn intent_train(a: IntentTrainArgs) -> CliResult<()> {
    let model = load_inference(&a.model)?;
    let examples = load_intent_examples(&a.data)?;
    let labels = label_set(&examples);
    let split = split_80_10_10(&examples, a.seed);
    let grid = IntentGrid { hidden: a.hidden, dropout: a.dropout, lr: a.lr, max_epochs: a.max_epochs, ..IntentGrid::default() };
    let train = features(&model, &split.train, &labels)?;
    let dev = features(&model, &split.dev, &labels)?;
    let test = features(&model, &split.test, &labels)?;
    let (clf, report) = train_intent_classifier(&train, &dev, &labels, &grid, a.seed)?;
    clf.save(&a.output)?;
    let best = report.runs.iter().map(|r| r.best_dev_accuracy).fold(0.0, f64::max);
    println!("chosen hidden={} dropout={} lr={}", report.chosen.hidden, report.chosen.dropout, report.chosen.lr);
    println!("dev accuracy\t{best:.4}");
    println!("test accuracy\t{:.4}", clf.accuracy(test.features.view(), &test.labels));
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    text: &'a str,
    label: String,
    probabilities: Vec<f32>,
}

fn intent_eval(a: IntentEvalArgs) -> CliResult<()> {
    let model = load_inference(&a.model)?;
    let clf = IntentClassifier::load(&a.classifier)?;
    let examples = load_intent_examples(&a.data)?;
    let fs = features(&model, &examples, &clf.labels)?;
    if a.predictions {
        for (e, row) in examples.iter().zip(fs.features.rows()) {
            let (label, probabilities) = clf.classify(row);
            println!("{}", serde_json::to_string(&Prediction { text: &e.text, label, probabilities })?);
        }
    }
    println!("accuracy\t{:.4}", clf.accuracy(fs.features.view(), &fs.labels));
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult<()> {
    let file = ModelFile::load(&a.model)?;
    let b = file.size_breakdown()?;
    let digest: String = file.vocab_digest.iter().map(|x| format!("{x:02x}")).collect();
    println!("format version\t{}", file.version);
    println!("vocabulary digest\t{digest}");
    println!("config\t{}", serde_json::to_string(&file.config)?);
    println!("tensors\t{}", file.tensors.len());
    println!("embedding params\t{}", b.embedding_params);
    println!("network params\t{}", b.network_params);
    println!("embedding bytes\t{}", b.embedding_bytes);
    println!("network bytes\t{}", b.network_bytes);
    println!("header bytes\t{}", b.header_bytes);
    println!("total bytes\t{}", b.total_bytes);
    Ok(())
}
