//! The unified encoder-decoder: task-specific input features, a BiLSTM
//! encoder, and an attention LSTM decoder whose output distribution mixes
//! generation from the vocabulary with copying from the source.
//!
//! Both tasks share every code path except [`Seq2Seq::embed`].
//!
//! Functions here read parameters through [`Graph::param`], so the same
//! network runs on the raw weights or on their moving average depending on
//! which [`ParamStore`] the graph is bound to.

mod config;
mod decoder;
mod encoder;

pub use config::{ModelConfig, Task};
pub use decoder::{output_distribution, DecoderState, DecoderVars, EncodedSource, EncodedVars, StepValues, StepVars};
pub use encoder::lstm_cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::SourceSequence;
use crate::tensor::init::{uniform, xavier_uniform};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Randomness used for dropout masks during training.
pub type DropoutRng = ChaCha8Rng;

/// Bound of the uniform initializer for embedding tables.
pub const EMBEDDING_INIT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("empty source sequence")]
    EmptyInput,
    #[error("source features do not match a {0} model")]
    TaskMismatch(Task),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("embedding table `{table}` has {rows} rows, given id {id}")]
    IdOutOfRange { table: &'static str, id: usize, rows: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate().map_err(NetworkError::Config)?;
        Ok(Self { config })
    }

    /// Fresh parameters: Xavier-uniform matrices, zero biases (forget gates
    /// +1), U(-0.1, 0.1) embeddings.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let c = &self.config;
        let h = c.hidden_dim;
        let mut p = ParamStore::new();
        let emb = |p: &mut ParamStore, name: &str, rows: usize, dim: usize, trainable: bool, rng: &mut R| {
            p.insert(name, uniform(&[rows, dim], EMBEDDING_INIT, rng).with_requires_grad(trainable));
        };
        emb(&mut p, "emb.word", c.word_vocab, c.word_dim, !c.freeze_word_embeddings, rng);
        if c.task == Task::Table2Text {
            emb(&mut p, "emb.field", c.field_vocab, c.field_dim, true, rng);
            emb(&mut p, "emb.pos_plus", c.max_position, c.pos_dim, true, rng);
            emb(&mut p, "emb.pos_minus", c.max_position, c.pos_dim, true, rng);
        }

        let mut d_in = c.input_dim();
        for layer in 0..c.encoder_layers {
            for dir in ["fwd", "bwd"] {
                add_lstm(&mut p, &format!("enc.{layer}.{dir}"), d_in, h, rng);
            }
            d_in = 2 * h;
        }
        add_linear(&mut p, "dec.init_h", 2 * h, h, rng);
        add_linear(&mut p, "dec.init_c", 2 * h, h, rng);
        add_lstm(&mut p, "dec.lstm", c.word_dim + 2 * h, h, rng);
        p.insert("att.w_h", xavier_uniform(2 * h, h, rng).with_requires_grad(true));
        p.insert("att.w_s", xavier_uniform(h, h, rng).with_requires_grad(true));
        p.insert("att.v", xavier_uniform(h, 1, rng).with_requires_grad(true));
        add_linear(&mut p, "out", 3 * h, c.word_vocab, rng);
        add_linear(&mut p, "gate", 2 * h + h + c.word_dim, 1, rng);
        p
    }

    /// Replaces the word embedding table (e.g. with pretrained vectors).
    pub fn set_word_embeddings(&self, params: &mut ParamStore, table: Tensor) -> Result<()> {
        let c = &self.config;
        if table.shape() != [c.word_vocab, c.word_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "set_word_embeddings",
                lhs: vec![c.word_vocab, c.word_dim],
                rhs: table.shape().to_vec(),
            }
            .into());
        }
        params.insert("emb.word", table.with_requires_grad(!c.freeze_word_embeddings));
        Ok(())
    }

    /// Encoder input rows: `[word; field; p+; p-]` for tables, `[word; answer bit]` for questions.
    pub fn embed(&self, g: &mut Graph<'_>, src: &SourceSequence) -> Result<Var> {
        if src.is_empty() {
            return Err(NetworkError::EmptyInput);
        }
        match (self.config.task, src) {
            (Task::Table2Text, SourceSequence::Table(s)) => {
                let c = &self.config;
                let mut words = Vec::with_capacity(s.tokens.len());
                let mut fields = Vec::with_capacity(s.tokens.len());
                let mut plus = Vec::with_capacity(s.tokens.len());
                let mut minus = Vec::with_capacity(s.tokens.len());
                for t in &s.tokens {
                    words.push(check_id("emb.word", t.word_id, c.word_vocab)?);
                    fields.push(check_id("emb.field", t.field_id, c.field_vocab)?);
                    plus.push(position_row(t.p_plus, c.max_position)?);
                    minus.push(position_row(t.p_minus, c.max_position)?);
                }
                let parts = [
                    self.lookup(g, "emb.word", &words)?,
                    self.lookup(g, "emb.field", &fields)?,
                    self.lookup(g, "emb.pos_plus", &plus)?,
                    self.lookup(g, "emb.pos_minus", &minus)?,
                ];
                Ok(g.concat(&parts)?)
            }
            (Task::Qg, SourceSequence::Qg(s)) => {
                let words = s
                    .tokens
                    .iter()
                    .map(|t| check_id("emb.word", t.word_id, self.config.word_vocab))
                    .collect::<Result<Vec<_>>>()?;
                let bits: Vec<f64> = s.tokens.iter().map(|t| f64::from(t.answer_bit)).collect();
                let e = self.lookup(g, "emb.word", &words)?;
                let b = g.constant(Tensor::matrix(bits.len(), 1, bits)?);
                Ok(g.concat(&[e, b])?)
            }
            (task, _) => Err(NetworkError::TaskMismatch(task)),
        }
    }

    fn lookup(&self, g: &mut Graph<'_>, table: &str, ids: &[usize]) -> Result<Var> {
        let t = g.param(table)?;
        Ok(g.gather(t, ids)?)
    }

    /// Embeds and encodes `src`. `ext_ids` are the extended-vocabulary ids of
    /// the source positions (see [`crate::data::OovMap`]).
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        src: &SourceSequence,
        ext_ids: &[usize],
        ext_size: usize,
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<EncodedVars> {
        let mut x = self.embed(g, src)?;
        if let Some(r) = rng.as_deref_mut() {
            x = g.dropout(x, self.config.dropout_p, r)?;
        }
        let mask: Vec<bool> = src.word_ids().iter().map(|&id| id != crate::data::vocab::PAD).collect();
        self.bilstm_encode(g, x, mask, ext_ids.to_vec(), ext_size, rng)
    }
}

fn check_id(table: &'static str, id: usize, rows: usize) -> Result<usize> {
    if id < rows {
        Ok(id)
    } else {
        Err(NetworkError::IdOutOfRange { table, id, rows })
    }
}

fn position_row(p: usize, max: usize) -> Result<usize> {
    if p == 0 || p > max {
        return Err(NetworkError::IdOutOfRange {
            table: "emb.pos",
            id: p,
            rows: max,
        });
    }
    Ok(p - 1)
}

fn add_lstm<R: Rng + ?Sized>(p: &mut ParamStore, prefix: &str, d_in: usize, h: usize, rng: &mut R) {
    p.insert(format!("{prefix}.w_x"), xavier_uniform(d_in, 4 * h, rng).with_requires_grad(true));
    p.insert(format!("{prefix}.w_h"), xavier_uniform(h, 4 * h, rng).with_requires_grad(true));
    let mut b = vec![0.0; 4 * h];
    b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
    p.insert(format!("{prefix}.b"), Tensor::vector(b).with_requires_grad(true));
}

fn add_linear<R: Rng + ?Sized>(p: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    p.insert(format!("{prefix}.w"), xavier_uniform(d_in, d_out, rng).with_requires_grad(true));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]).with_requires_grad(true));
}
