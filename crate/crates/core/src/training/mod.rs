//! Teacher-forced cross-entropy training with Adam or AdaGrad, global-norm
//! gradient clipping, dropout, and a moving-average copy θ̄ of the weights
//! that is used for validation and model selection.
//!
//! Every source of randomness is derived from `TrainConfig::seed`: the
//! shuffle of epoch `e` and the dropout masks of example `i` in epoch `e`
//! get their own generators. A run therefore needs no saved RNG state to
//! resume, and the result does not depend on `workers`' scheduling.

mod checkpoint;
mod ema;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, CheckpointError, FORMAT_VERSION, MAGIC};
pub use ema::{ema_update, EmaShadow};
pub use optim::{
    adagrad_step, adam_step, clip_gradients, global_norm, OptimizerKind, OptimizerState, ADAGRAD_EPS, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::vocab::SOS;
use crate::data::{Example, OovMap, Vocabs, Vocabulary};
use crate::decoding::{generate, DecodeConfig, DecodeError};
use crate::network::{DropoutRng, ModelConfig, NetworkError, Seq2Seq, Task};
use crate::tensor::{GradMap, Graph, ParamStore, Tensor, TensorError, Var};

/// Added inside the log so a zero probability gives a large finite loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error(
        "non-finite loss {loss} in epoch {epoch}, batch of examples {batch:?}; largest gradient norms: {}",
        .grad_norms.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect::<Vec<_>>().join(", ")
    )]
    NonFinite {
        epoch: usize,
        batch: Vec<usize>,
        loss: f64,
        grad_norms: Vec<(String, f64)>,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// What "best on validation" means when choosing the checkpoint to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Lowest θ̄ validation loss.
    Loss,
    /// Highest θ̄ validation BLEU-4 under the task's default decoding.
    Bleu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub dropout_p: f64,
    pub selection: Selection,
    /// Threads per batch. Part of the determinism contract: gradients are
    /// summed per contiguous shard, so changing it may change the last bits.
    pub workers: usize,
}

impl TrainConfig {
    /// Adam 5e-4, batch 32, 10 epochs, no dropout.
    pub fn table2text() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 5e-4,
            clip_norm: 5.0,
            batch_size: 32,
            max_epochs: 10,
            ema_decay: 0.9999,
            seed: 1,
            dropout_p: 0.0,
            selection: Selection::Loss,
            workers: 1,
        }
    }

    /// AdaGrad 0.3, batch 50, 20 epochs, dropout 0.1.
    pub fn qg() -> Self {
        Self {
            optimizer: OptimizerKind::Adagrad,
            lr: 0.3,
            batch_size: 50,
            max_epochs: 20,
            dropout_p: 0.1,
            ..Self::table2text()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Table2Text => Self::table2text(),
            Task::Qg => Self::qg(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            bad.push(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.batch_size == 0 || self.workers == 0 {
            bad.push("batch_size and workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            bad.push(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            bad.push(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }
}

/// An example with its extended vocabulary and target ids resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub example: Example,
    pub oov: OovMap,
    /// Extended-vocabulary target ids ending with EOS.
    pub target: Vec<usize>,
    /// Target words found in neither the vocabulary nor the source.
    pub unknown_targets: usize,
}

impl Prepared {
    pub fn new(example: Example, vocab: &Vocabulary) -> Self {
        let oov = OovMap::new(&example.source_tokens, vocab);
        let (target, unknown_targets) = oov.target_ids(&example.target, vocab);
        Self {
            example,
            oov,
            target,
            unknown_targets,
        }
    }
}

pub fn prepare_all(examples: &[Example], vocab: &Vocabulary) -> Vec<Prepared> {
    let out: Vec<Prepared> = examples.iter().map(|e| Prepared::new(e.clone(), vocab)).collect();
    let unk: usize = out.iter().map(|p| p.unknown_targets).sum();
    if unk > 0 {
        log::warn!("{unk} target tokens are neither in the vocabulary nor copyable; scored as <unk>");
    }
    out
}

/// Summed `−log P(y_t)` over the target, teacher-forced on the gold prefix.
pub fn sequence_nll(net: &Seq2Seq, g: &mut Graph<'_>, ex: &Prepared, mut rng: Option<&mut DropoutRng>) -> Result<Var> {
    let enc = net.encode(
        g,
        &ex.example.source,
        &ex.oov.ext_ids,
        ex.oov.extended_size(),
        rng.as_deref_mut(),
    )?;
    let mut state = enc.init;
    let mut prev = SOS;
    let mut total: Option<Var> = None;
    for &y in &ex.target {
        let step = net.decoder_step(g, state, prev, &enc, rng.as_deref_mut())?;
        let dist = net.output_distribution(g, step.logits, step.alpha, step.p_gen, &enc)?;
        let p = g.pick(dist, y)?;
        let p = g.affine(p, 1.0, PROB_FLOOR);
        let lp = g.log(p);
        total = Some(match total {
            None => lp,
            Some(t) => g.add(t, lp)?,
        });
        state = step.state;
        prev = y;
    }
    let total = total.ok_or(NetworkError::EmptyInput)?;
    Ok(g.neg(total))
}

/// Mean per-token cross-entropy of one example.
pub fn sequence_loss(net: &Seq2Seq, g: &mut Graph<'_>, ex: &Prepared, rng: Option<&mut DropoutRng>) -> Result<Var> {
    let nll = sequence_nll(net, g, ex, rng)?;
    Ok(g.affine(nll, 1.0 / ex.target.len() as f64, 0.0))
}

/// Training and validation examples with the vocabularies they were built on.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocabs: Vocabs,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidScores {
    /// Per-token loss under the raw weights θ.
    pub loss_raw: f64,
    /// Per-token loss under the moving average θ̄.
    pub loss_ema: f64,
    /// θ̄ BLEU-4, computed only when selecting by BLEU.
    pub bleu_ema: Option<f64>,
}

impl ValidScores {
    /// Larger is better.
    fn selection_key(&self, sel: Selection) -> f64 {
        match sel {
            Selection::Loss => -self.loss_ema,
            Selection::Bleu => self.bleu_ema.unwrap_or(f64::NEG_INFINITY),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid: ValidScores,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The checkpoint retained by the selection rule.
    pub best: CheckpointBundle,
    /// State after the final epoch (for resuming).
    pub last: CheckpointBundle,
    pub history: Vec<EpochStats>,
}

/// Fresh weights drawn from `train.seed`, optionally with a pretrained word
/// embedding table, plus zeroed optimizer state and θ̄ = θ.
pub fn initial_bundle(
    model: ModelConfig,
    train: TrainConfig,
    vocabs: Vocabs,
    word_embeddings: Option<Tensor>,
) -> Result<CheckpointBundle> {
    train.validate()?;
    let net = Seq2Seq::new(model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = net.init_params(&mut rng);
    if let Some(table) = word_embeddings {
        net.set_word_embeddings(&mut params, table)?;
    }
    let ema = EmaShadow::new(&params, train.ema_decay);
    let optimizer = OptimizerState::new(train.optimizer, &params);
    Ok(CheckpointBundle {
        model,
        train,
        vocabs,
        params,
        ema,
        optimizer,
        epoch: 0,
        train_loss: None,
        valid: None,
    })
}

/// Trains from scratch for `train.max_epochs` epochs.
pub fn train(model: ModelConfig, train: TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let start = initial_bundle(model, train, corpus.vocabs.clone(), None)?;
    resume(start, None, corpus)
}

/// Continues `state` up to `state.train.max_epochs`. `best` is the retained
/// checkpoint of the earlier part of the run, if any.
pub fn resume(mut state: CheckpointBundle, best: Option<CheckpointBundle>, corpus: &Corpus) -> Result<TrainOutcome> {
    let cfg = state.train.clone();
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if corpus.valid.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let net = Seq2Seq::new(ModelConfig {
        dropout_p: cfg.dropout_p,
        ..state.model.clone()
    })?;
    let train_set = prepare_all(&corpus.train, &corpus.vocabs.words);
    let valid_set = prepare_all(&corpus.valid, &corpus.vocabs.words);

    let mut best = best;
    let mut history = Vec::new();
    if state.valid.is_none() {
        state.valid = Some(validate(&net, &state, &valid_set, &corpus.valid)?);
        log_epoch(&state);
        history.push(stats(&state));
        best = Some(state.clone());
    }
    while state.epoch < cfg.max_epochs {
        let loss = run_epoch(&net, &mut state, &train_set)?;
        state.epoch += 1;
        state.train_loss = Some(loss);
        state.valid = Some(validate(&net, &state, &valid_set, &corpus.valid)?);
        log_epoch(&state);
        history.push(stats(&state));
        let key = |b: &CheckpointBundle| b.valid.as_ref().map_or(f64::NEG_INFINITY, |v| v.selection_key(cfg.selection));
        if best.as_ref().is_none_or(|b| key(&state) > key(b)) {
            best = Some(state.clone());
        }
    }
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| state.clone()),
        last: state,
        history,
    })
}

fn stats(b: &CheckpointBundle) -> EpochStats {
    EpochStats {
        epoch: b.epoch,
        train_loss: b.train_loss,
        valid: b.valid.clone().expect("validated"),
    }
}

fn log_epoch(b: &CheckpointBundle) {
    let v = b.valid.as_ref().expect("validated");
    log::info!(
        "epoch {} train_loss {} valid_loss_raw {:.6} valid_loss_ema {:.6}{}",
        b.epoch,
        b.train_loss.map_or("-".to_string(), |l| format!("{l:.6}")),
        v.loss_raw,
        v.loss_ema,
        v.bleu_ema.map_or(String::new(), |x| format!(" valid_bleu_ema {x:.4}"))
    );
}

/// splitmix64 finalizer, used to derive independent generator seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ epoch as u64))
}

fn dropout_rng(seed: u64, epoch: usize, example: usize) -> DropoutRng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ epoch as u64) ^ example as u64 ^ 0x5eed))
}

fn add_into(acc: &mut GradMap, g: GradMap) {
    if acc.is_empty() {
        *acc = g;
        return;
    }
    for (k, t) in g {
        let a = acc.get_mut(&k).expect("same parameter set");
        for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
            *x += y;
        }
    }
}

/// Splits `items` into at most `workers` contiguous shards, maps each on its
/// own thread, and returns the results in shard order.
fn sharded<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&[T]) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return vec![f(items)];
    }
    let size = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(size).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// One pass over the shuffled training set. Returns the per-token loss.
fn run_epoch(net: &Seq2Seq, state: &mut CheckpointBundle, data: &[Prepared]) -> Result<f64> {
    let cfg = state.train.clone();
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut shuffle_rng(cfg.seed, epoch));

    let (mut nll_total, mut tokens_total) = (0.0, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let tokens: usize = batch.iter().map(|&i| data[i].target.len()).sum();
        let scale = 1.0 / tokens as f64;
        let params = &state.params;
        let shards = sharded(batch, cfg.workers, |ids| -> Result<(GradMap, f64)> {
            let mut acc = GradMap::new();
            let mut nll = 0.0;
            for &i in ids {
                let mut g = Graph::with_params(params);
                let mut rng = (cfg.dropout_p > 0.0).then(|| dropout_rng(cfg.seed, epoch, i));
                let root = sequence_nll(net, &mut g, &data[i], rng.as_mut())?;
                nll += g.value(root).data()[0];
                add_into(&mut acc, g.backward_scaled(root, scale)?);
            }
            Ok((acc, nll))
        });
        let mut grads = GradMap::new();
        let mut nll = 0.0;
        for shard in shards {
            let (g, l) = shard?;
            add_into(&mut grads, g);
            nll += l;
        }
        let norm = clip_gradients(&mut grads, cfg.clip_norm);
        if !nll.is_finite() || !norm.is_finite() {
            let mut norms: Vec<(String, f64)> = grads.iter().map(|(k, t)| (k.clone(), t.sq_norm().sqrt())).collect();
            norms.sort_by(|a, b| b.1.total_cmp(&a.1));
            norms.truncate(5);
            return Err(TrainError::NonFinite {
                epoch,
                batch: batch.to_vec(),
                loss: nll * scale,
                grad_norms: norms,
            });
        }
        state.optimizer.apply(&mut state.params, &grads, cfg.lr)?;
        ema_update(&mut state.ema, &state.params)?;
        nll_total += nll;
        tokens_total += tokens;
    }
    Ok(nll_total / tokens_total as f64)
}

/// Per-token loss over `data` without dropout.
pub fn evaluate_loss(net: &Seq2Seq, params: &ParamStore, data: &[Prepared], workers: usize) -> Result<f64> {
    let shards = sharded(data, workers, |exs| -> Result<(f64, usize)> {
        let mut nll = 0.0;
        let mut n = 0;
        for ex in exs {
            let mut g = Graph::inference(params);
            let v = sequence_nll(net, &mut g, ex, None)?;
            nll += g.value(v).data()[0];
            n += ex.target.len();
        }
        Ok((nll, n))
    });
    let (mut nll, mut n) = (0.0, 0);
    for s in shards {
        let (a, b) = s?;
        nll += a;
        n += b;
    }
    Ok(nll / n.max(1) as f64)
}

fn validate(net: &Seq2Seq, state: &CheckpointBundle, data: &[Prepared], examples: &[Example]) -> Result<ValidScores> {
    let workers = state.train.workers;
    let ema_params = state.ema.evaluation_params(&state.params)?;
    let loss_raw = evaluate_loss(net, &state.params, data, workers)?;
    let loss_ema = evaluate_loss(net, &ema_params, data, workers)?;
    let bleu_ema = match state.train.selection {
        Selection::Loss => None,
        Selection::Bleu => {
            let cfg = DecodeConfig::for_task(state.model.task);
            let mut hyps = Vec::with_capacity(examples.len());
            for ex in examples {
                hyps.push(generate(net, &ema_params, ex, &state.vocabs.words, &cfg)?.tokens);
            }
            let refs: Vec<Vec<String>> = examples.iter().map(|e| e.target.clone()).collect();
            Some(crate::metrics::bleu4(&hyps, &refs).unwrap_or(0.0))
        }
    };
    Ok(ValidScores {
        loss_raw,
        loss_ema,
        bleu_ema,
    })
}
