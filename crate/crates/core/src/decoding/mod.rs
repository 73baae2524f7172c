//! Greedy and beam-search generation over any [`StepModel`], plus
//! attention-based UNK replacement.
//!
//! Search runs on extended-vocabulary ids; mapping back to words (including
//! copied source OOVs) and UNK replacement happen after the best hypothesis
//! has been chosen, so ranking only ever sees model tokens.

mod beam;
mod model;
pub mod toy;

pub use beam::beam_search;
pub use model::{generate, Generated, NetworkModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::vocab::UNK_TOKEN;
use crate::network::{NetworkError, Task};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("{tokens} output tokens but {rows} attention rows")]
    Alignment { tokens: usize, rows: usize },
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

/// A left-to-right model that yields a distribution over output ids given
/// the previously emitted id.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;
    /// Advances from `state` after emitting `prev`; returns the new state,
    /// the output distribution and the attention over source positions.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Self::State, Vec<f64>, Vec<f64>)>;
    /// The id fed at the first step.
    fn start_token(&self) -> usize;
    fn eos(&self) -> usize;
    /// Ids that may never be emitted (padding, start-of-sequence).
    fn banned(&self) -> &[usize] {
        &[]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthPenalty {
    /// `log_prob / len^α`.
    Plain,
    /// `log_prob / ((5 + len) / 6)^α`.
    Gnmt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    pub length_penalty: LengthPenalty,
    /// Maximum number of emitted ids, EOS included.
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            length_penalty_alpha: 0.0,
            length_penalty: LengthPenalty::Plain,
            max_len,
        }
    }

    pub fn beam(beam_size: usize, alpha: f64, max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size,
            length_penalty_alpha: alpha,
            length_penalty: LengthPenalty::Plain,
            max_len,
        }
    }

    /// Greedy with 60 tokens for descriptions; beam 20, α 1.75, 30 tokens
    /// for questions.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Table2Text => Self::greedy(60),
            Task::Qg => Self::beam(20, 1.75, 30),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(DecodeError::Config("beam_size and max_len must be at least 1".into()));
        }
        if !(self.length_penalty_alpha >= 0.0 && self.length_penalty_alpha.is_finite()) {
            return Err(DecodeError::Config(format!(
                "length_penalty_alpha {} must be a non-negative number",
                self.length_penalty_alpha
            )));
        }
        Ok(())
    }

    /// Length-normalized score of a hypothesis with `len` ids.
    pub fn score(&self, log_prob: f64, len: usize) -> f64 {
        let len = len.max(1) as f64;
        let a = self.length_penalty_alpha;
        match self.length_penalty {
            LengthPenalty::Plain => log_prob / len.powf(a),
            LengthPenalty::Gnmt => log_prob / ((5.0 + len) / 6.0).powf(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Emitted ids without the final EOS.
    pub tokens: Vec<usize>,
    /// One attention row per emitted id (the EOS step excluded).
    pub attention: Vec<Vec<f64>>,
    pub log_prob: f64,
    /// Whether generation ended with EOS rather than at `max_len`.
    pub ended: bool,
}

pub fn decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<GenerationOutput> {
    cfg.validate()?;
    match cfg.mode {
        DecodeMode::Greedy => greedy_decode(model, cfg.max_len),
        DecodeMode::Beam => beam_search(model, cfg),
    }
}

/// Index of the largest allowed probability; the lowest id wins ties.
fn argmax(probs: &[f64], banned: &[usize]) -> usize {
    let mut best = None;
    for (i, &p) in probs.iter().enumerate() {
        if banned.contains(&i) {
            continue;
        }
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((i, p)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Emits the most probable id at every step until EOS or `max_len` ids.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<GenerationOutput> {
    let mut state = model.start();
    let mut prev = model.start_token();
    let mut out = GenerationOutput {
        tokens: Vec::new(),
        attention: Vec::new(),
        log_prob: 0.0,
        ended: false,
    };
    for _ in 0..max_len {
        let (next, probs, alpha) = model.step(&state, prev)?;
        let tok = argmax(&probs, model.banned());
        out.log_prob += probs[tok].ln();
        if tok == model.eos() {
            out.ended = true;
            break;
        }
        out.tokens.push(tok);
        out.attention.push(alpha);
        state = next;
        prev = tok;
    }
    Ok(out)
}

/// Replaces every `<unk>` with the source word under the step's highest
/// attention weight (lowest position on ties). Source positions that are
/// themselves `<unk>` are never chosen.
pub fn replace_unk(tokens: &[String], attention: &[Vec<f64>], source: &[String]) -> Result<Vec<String>> {
    if attention.len() < tokens.len() {
        return Err(DecodeError::Alignment {
            tokens: tokens.len(),
            rows: attention.len(),
        });
    }
    Ok(tokens
        .iter()
        .zip(attention)
        .map(|(tok, alpha)| {
            if tok != UNK_TOKEN {
                return tok.clone();
            }
            let mut best: Option<(usize, f64)> = None;
            for (i, &a) in alpha.iter().enumerate().take(source.len()) {
                if source[i] == UNK_TOKEN {
                    continue;
                }
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((i, a));
                }
            }
            best.map_or_else(|| tok.clone(), |(i, _)| source[i].clone())
        })
        .collect())
}
