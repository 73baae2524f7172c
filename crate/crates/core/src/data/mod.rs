//! Vocabularies, dataset readers, and source-feature construction.

pub mod embeddings;
pub mod source;
pub mod squad;
pub mod vocab;
pub mod wikibio;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embeddings::load_pretrained_embeddings;
pub use source::{
    encode_qg_source, encode_table_source, OovMap, QgSourceSequence, QgToken, SourceSequence, TableSourceSequence,
    TableToken, MAX_POSITION,
};
pub use squad::{parse_squad, QgExample, SquadParse};
pub use vocab::Vocabulary;
pub use wikibio::{load_wikibio, parse_box_line, Field, InfoboxRecord};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("answer span ({start}, {end}) invalid for passage of {len} tokens")]
    Span { start: usize, end: usize, len: usize },
    #[error("{what}: expected {expected}, found {found}")]
    Alignment {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed SQuAD JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Tokenization of pre-tokenized text: whitespace split plus optional lowercasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextOptions {
    pub lowercase: bool,
}

impl Default for TextOptions {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

impl TextOptions {
    pub fn normalize(&self, token: &str) -> String {
        if self.lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(|t| self.normalize(t)).collect()
    }
}

/// Word vocabulary shared by encoder and decoder, plus the field vocabulary
/// for tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub words: Vocabulary,
    pub fields: Option<Vocabulary>,
}

impl Vocabs {
    pub fn for_tables(records: &[InfoboxRecord], max_words: usize, max_fields: usize) -> Self {
        let words = Vocabulary::build(
            records
                .iter()
                .flat_map(|r| r.fields.iter().flat_map(|f| f.tokens.iter()).chain(r.reference.iter())),
            max_words,
        );
        let fields = Vocabulary::build(records.iter().flat_map(|r| r.fields.iter().map(|f| &f.name)), max_fields);
        Self {
            words,
            fields: Some(fields),
        }
    }

    pub fn for_questions(examples: &[QgExample], max_words: usize) -> Self {
        let words = Vocabulary::build(
            examples
                .iter()
                .flat_map(|e| e.passage_tokens.iter().chain(e.question_tokens.iter())),
            max_words,
        );
        Self { words, fields: None }
    }
}

/// A model-ready pair: encoded source features, raw source tokens (for
/// copying and UNK replacement) and the target tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: SourceSequence,
    pub source_tokens: Vec<String>,
    pub target: Vec<String>,
}

impl Example {
    pub fn from_table(rec: &InfoboxRecord, vocabs: &Vocabs) -> Self {
        let fields = vocabs.fields.as_ref().expect("table task needs a field vocabulary");
        Self {
            source: SourceSequence::Table(encode_table_source(rec, &vocabs.words, fields)),
            source_tokens: rec.source_tokens(),
            target: rec.reference.clone(),
        }
    }

    pub fn from_question(ex: &QgExample, vocabs: &Vocabs) -> Result<Self, DataError> {
        Ok(Self {
            source: SourceSequence::Qg(encode_qg_source(ex, &vocabs.words)?),
            source_tokens: ex.passage_tokens.clone(),
            target: ex.question_tokens.clone(),
        })
    }
}
