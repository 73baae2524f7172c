use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gencopy_core::data::{load_pretrained_embeddings, load_wikibio, parse_squad, wikibio, Example, TextOptions, Vocabs};
use gencopy_core::decoding::generate;
use gencopy_core::metrics::{aggregate_seeds, score_corpus, MetricError};
use gencopy_core::network::{Seq2Seq, Task};
use gencopy_core::tensor::{BackwardFault, ParamStore};
use gencopy_core::training::{initial_bundle, load_checkpoint, resume, save_checkpoint, CheckpointBundle, Corpus};
use gencopy_core::verify::{gradcheck_toy_models, GRADCHECK_TOLERANCE};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::CliError;

fn text_options(cfg: &RunConfig) -> TextOptions {
    TextOptions {
        lowercase: cfg.data.lowercase,
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("`data.{key}` is not set")))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Examples of one split in the task's input format.
fn load_examples(task: Task, path: &Path, vocabs: &Vocabs, opts: &TextOptions) -> Result<Vec<Example>, CliError> {
    match task {
        Task::Table2Text => Ok(load_wikibio(path, opts)?.iter().map(|r| Example::from_table(r, vocabs)).collect()),
        Task::Qg => parse_squad(&read(path)?, opts)?
            .examples
            .iter()
            .map(|e| Example::from_question(e, vocabs).map_err(CliError::from))
            .collect(),
    }
}

fn build_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let opts = text_options(cfg);
    let (train_path, valid_path) = (required(&cfg.data.train, "train")?, required(&cfg.data.valid, "valid")?);
    let vocabs = match cfg.task {
        Task::Table2Text => Vocabs::for_tables(&load_wikibio(train_path, &opts)?, cfg.data.max_words, cfg.data.max_fields),
        Task::Qg => Vocabs::for_questions(&parse_squad(&read(train_path)?, &opts)?.examples, cfg.data.max_words),
    };
    Ok(Corpus {
        train: load_examples(cfg.task, train_path, &vocabs, &opts)?,
        valid: load_examples(cfg.task, valid_path, &vocabs, &opts)?,
        vocabs,
    })
}

pub fn checkpoint_path(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}.ckpt"))
}

pub fn last_checkpoint_path(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}.last.ckpt"))
}

fn train_seed(cfg: &RunConfig, corpus: &Corpus, seed: u64) -> Result<(), CliError> {
    let fields = corpus.vocabs.fields.as_ref().map_or(0, |f| f.len());
    let model = cfg.model.model_config(cfg.task, corpus.vocabs.words.len(), fields);
    model.validate().map_err(CliError::Config)?;
    let train = gencopy_core::training::TrainConfig { seed, ..cfg.train.clone() };
    let embeddings = match &cfg.data.embeddings {
        Some(path) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(load_pretrained_embeddings(path, &corpus.vocabs.words, model.word_dim, &mut rng)?)
        }
        None => {
            if model.freeze_word_embeddings {
                warn!("seed {seed}: word embeddings are frozen but no pretrained table is configured");
            }
            None
        }
    };
    let start = initial_bundle(model, train, corpus.vocabs.clone(), embeddings)?;
    let out = resume(start, None, corpus)?;
    let best = checkpoint_path(&cfg.output_dir, seed);
    save_checkpoint(&out.best, &best)?;
    save_checkpoint(&out.last, &last_checkpoint_path(&cfg.output_dir, seed))?;
    info!("seed {seed}: selected epoch {} written to {}", out.best.epoch, best.display());
    Ok(())
}

/// One training run per seed, concurrently; each writes its own files.
pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    info!("resolved configuration:\n{}", cfg.to_toml());
    let corpus = build_corpus(cfg)?;
    info!(
        "{} training / {} validation examples, {} words",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.vocabs.words.len()
    );
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Config(format!("{}: {e}", cfg.output_dir.display())))?;
    let corpus = &corpus;
    let results: Vec<Result<(), CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg.seeds.iter().map(|&seed| s.spawn(move || train_seed(cfg, corpus, seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Internal("training thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Weights {
    /// The moving average θ̄.
    Ema,
    /// The raw trained parameters θ.
    Raw,
}

pub fn decoding_params(bundle: &CheckpointBundle, weights: Weights) -> Result<ParamStore, CliError> {
    match weights {
        Weights::Raw => Ok(bundle.params.clone()),
        Weights::Ema => Ok(bundle.ema.evaluation_params(&bundle.params)?),
    }
}

/// Input examples for generation; references in the input are ignored.
fn load_inputs(cfg: &RunConfig, input: &Path, vocabs: &Vocabs) -> Result<Vec<Example>, CliError> {
    let text = read(input)?;
    let opts = text_options(cfg);
    match cfg.task {
        Task::Table2Text => Ok(wikibio::parse_box_file(&text)?
            .into_iter()
            .map(|r| Example::from_table(&r.normalized(&opts), vocabs))
            .collect()),
        Task::Qg => parse_squad(&text, &opts)?
            .examples
            .iter()
            .map(|e| Example::from_question(e, vocabs).map_err(CliError::from))
            .collect(),
    }
}

pub fn generate_file(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path, weights: Weights) -> Result<usize, CliError> {
    info!("resolved configuration:\n{}", cfg.to_toml());
    let bundle = load_checkpoint(checkpoint)?;
    if bundle.model.task != cfg.task {
        return Err(CliError::Compatibility(format!(
            "checkpoint {} was trained for {}, the config is for {}",
            checkpoint.display(),
            bundle.model.task,
            cfg.task
        )));
    }
    let params = decoding_params(&bundle, weights)?;
    let net = Seq2Seq::new(bundle.model.clone())?;
    let examples = load_inputs(cfg, input, &bundle.vocabs)?;
    let mut lines = String::new();
    for ex in &examples {
        let g = generate(&net, &params, ex, &bundle.vocabs.words, &cfg.decode)?;
        lines.push_str(&g.tokens.join(" "));
        lines.push('\n');
    }
    write(output, &lines)?;
    info!("{} sequences written to {}", examples.len(), output.display());
    Ok(examples.len())
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    Ok(read(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

/// Hypothesis files to score, labelled by file stem.
pub fn hypothesis_files(hyps: &[PathBuf], seed_glob: Option<&str>) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut files: Vec<PathBuf> = hyps.to_vec();
    if let Some(pattern) = seed_glob {
        let matches = glob::glob(pattern).map_err(|e| CliError::Config(format!("--seed-glob `{pattern}`: {e}")))?;
        let mut found: Vec<PathBuf> = matches.filter_map(Result::ok).collect();
        if found.is_empty() {
            return Err(CliError::Config(format!("--seed-glob `{pattern}` matched no files")));
        }
        found.sort();
        files.extend(found);
    }
    if files.is_empty() {
        return Err(CliError::Config("no hypothesis files (use --hyps or --seed-glob)".into()));
    }
    Ok(files
        .into_iter()
        .map(|p| (p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()), p))
        .collect())
}

/// Scores every hypothesis file against `refs` and writes `eval.txt`
/// (flat) and `eval.json` under `out_dir`.
pub fn evaluate(refs: &Path, files: &[(String, PathBuf)], out_dir: &Path) -> Result<String, CliError> {
    let references = read_lines(refs)?;
    let mut per_seed: Vec<BTreeMap<String, f64>> = Vec::new();
    for (label, path) in files {
        let hyps = read_lines(path)?;
        let scores = score_corpus(&hyps, &references).map_err(|e| match e {
            MetricError::LengthMismatch { hypotheses, references } => CliError::Alignment(format!(
                "{} has {hypotheses} lines but {} has {references}",
                path.display(),
                refs.display()
            )),
            other => CliError::Config(format!("{label}: {other}")),
        })?;
        per_seed.push(scores);
    }
    let labels: Vec<String> = files.iter().map(|(l, _)| l.clone()).collect();
    let report = aggregate_seeds(&labels, &per_seed).map_err(|e| CliError::Config(e.to_string()))?;
    let flat = report.to_flat();
    write(&out_dir.join("eval.txt"), &flat)?;
    write(&out_dir.join("eval.json"), &report.to_json())?;
    Ok(flat)
}

/// `op` or `op:factor`, e.g. `tanh:1.5`.
pub fn parse_fault(s: &str) -> Result<BackwardFault, String> {
    let (op, factor) = match s.split_once(':') {
        Some((op, f)) => (op, f.parse::<f64>().map_err(|e| format!("fault factor `{f}`: {e}"))?),
        None => (s, 1.5),
    };
    Ok(BackwardFault {
        op: op.parse()?,
        factor,
    })
}

pub fn gradcheck(seed: u64, per_param: usize, fault: Option<BackwardFault>) -> Result<String, CliError> {
    let runs = gradcheck_toy_models(seed, per_param, fault)?;
    let mut out = String::new();
    let mut failing = Vec::new();
    for r in &runs {
        out.push_str(&format!(
            "{}: max relative error {:.3e} over {} probes\n",
            r.task, r.report.max_rel_error, r.report.probes
        ));
        failing.extend(r.report.failing(GRADCHECK_TOLERANCE).into_iter().map(|p| format!("{}/{p}", r.task)));
    }
    if failing.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Verification(format!(
            "{out}parameters above {GRADCHECK_TOLERANCE:e}: {}",
            failing.join(", ")
        )))
    }
}
