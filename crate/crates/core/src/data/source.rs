//! Feature-annotated source sequences and the extended (copy) vocabulary.

use serde::{Deserialize, Serialize};

use super::squad::QgExample;
use super::vocab::{Vocabulary, EOS, UNK};
use super::wikibio::InfoboxRecord;
use super::DataError;

/// Positions inside a field are clipped to this value.
pub const MAX_POSITION: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableToken {
    pub word_id: usize,
    pub field_id: usize,
    /// 1-based position from the start of the field, clipped to 30.
    pub p_plus: usize,
    /// 1-based position from the end of the field, clipped to 30.
    pub p_minus: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TableSourceSequence {
    pub tokens: Vec<TableToken>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QgToken {
    pub word_id: usize,
    pub answer_bit: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QgSourceSequence {
    pub tokens: Vec<QgToken>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceSequence {
    Table(TableSourceSequence),
    Qg(QgSourceSequence),
}

impl SourceSequence {
    pub fn len(&self) -> usize {
        match self {
            Self::Table(s) => s.tokens.len(),
            Self::Qg(s) => s.tokens.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn word_ids(&self) -> Vec<usize> {
        match self {
            Self::Table(s) => s.tokens.iter().map(|t| t.word_id).collect(),
            Self::Qg(s) => s.tokens.iter().map(|t| t.word_id).collect(),
        }
    }
}

pub fn encode_table_source(rec: &InfoboxRecord, words: &Vocabulary, fields: &Vocabulary) -> TableSourceSequence {
    let mut tokens = Vec::new();
    for f in &rec.fields {
        let field_id = fields.id(&f.name);
        let n = f.tokens.len();
        for (i, tok) in f.tokens.iter().enumerate() {
            tokens.push(TableToken {
                word_id: words.id(tok),
                field_id,
                p_plus: (i + 1).min(MAX_POSITION),
                p_minus: (n - i).min(MAX_POSITION),
            });
        }
    }
    TableSourceSequence { tokens }
}

pub fn encode_qg_source(ex: &QgExample, words: &Vocabulary) -> Result<QgSourceSequence, DataError> {
    ex.validate()?;
    let (s, e) = ex.answer_span;
    let tokens = ex
        .passage_tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| QgToken {
            word_id: words.id(tok),
            answer_bit: u8::from((s..=e).contains(&i)),
        })
        .collect();
    Ok(QgSourceSequence { tokens })
}

/// Source-specific extension of the word vocabulary: source tokens missing
/// from the vocabulary get ids `|V|, |V|+1, …` in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OovMap {
    vocab_size: usize,
    /// Extended id of every source position.
    pub ext_ids: Vec<usize>,
    /// Out-of-vocabulary source words, indexed by `ext_id - |V|`.
    pub oov_words: Vec<String>,
}

impl OovMap {
    pub fn new(source_tokens: &[String], vocab: &Vocabulary) -> Self {
        let mut oov_words: Vec<String> = Vec::new();
        let ext_ids = source_tokens
            .iter()
            .map(|tok| match vocab.get(tok) {
                Some(id) => id,
                None => {
                    let k = oov_words.iter().position(|w| w == tok).unwrap_or_else(|| {
                        oov_words.push(tok.clone());
                        oov_words.len() - 1
                    });
                    vocab.len() + k
                }
            })
            .collect();
        Self {
            vocab_size: vocab.len(),
            ext_ids,
            oov_words,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn extended_size(&self) -> usize {
        self.vocab_size + self.oov_words.len()
    }

    pub fn ext_id(&self, token: &str, vocab: &Vocabulary) -> Option<usize> {
        vocab
            .get(token)
            .or_else(|| self.oov_words.iter().position(|w| w == token).map(|k| self.vocab_size + k))
    }

    pub fn token<'a>(&'a self, id: usize, vocab: &'a Vocabulary) -> Option<&'a str> {
        if id < self.vocab_size {
            vocab.token(id)
        } else {
            self.oov_words.get(id - self.vocab_size).map(String::as_str)
        }
    }

    /// Target ids followed by EOS. Words in neither the vocabulary nor the
    /// source become UNK; the second value counts them.
    pub fn target_ids(&self, target: &[String], vocab: &Vocabulary) -> (Vec<usize>, usize) {
        let mut unk = 0;
        let mut ids: Vec<usize> = target
            .iter()
            .map(|t| {
                self.ext_id(t, vocab).unwrap_or_else(|| {
                    unk += 1;
                    UNK
                })
            })
            .collect();
        ids.push(EOS);
        (ids, unk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::wikibio::Field;

    fn rec(fields: &[(&str, usize)]) -> InfoboxRecord {
        InfoboxRecord {
            fields: fields
                .iter()
                .map(|(n, len)| Field {
                    name: n.to_string(),
                    tokens: (0..*len).map(|i| format!("w{i}")).collect(),
                })
                .collect(),
            reference: vec![],
        }
    }

    #[test]
    fn institutions_positions() {
        let r = InfoboxRecord {
            fields: vec![Field {
                name: "institutions".into(),
                tokens: vec!["university".into(), "college".into(), "london".into()],
            }],
            reference: vec![],
        };
        let wv = Vocabulary::build(["university", "college", "london"], 10);
        let fv = Vocabulary::build(["institutions"], 10);
        let s = encode_table_source(&r, &wv, &fv);
        assert_eq!(s.tokens[0].word_id, wv.id("university"));
        assert_eq!(s.tokens[0].field_id, fv.id("institutions"));
        assert_eq!((s.tokens[0].p_plus, s.tokens[0].p_minus), (1, 3));
        assert_eq!((s.tokens[2].p_plus, s.tokens[2].p_minus), (3, 1));
    }

    #[test]
    fn single_token_field_and_clipping() {
        let wv = Vocabulary::build(Vec::<String>::new(), 1);
        let fv = Vocabulary::build(["a"], 1);
        let s = encode_table_source(&rec(&[("a", 1), ("b", 35)]), &wv, &fv);
        assert_eq!((s.tokens[0].p_plus, s.tokens[0].p_minus), (1, 1));
        assert_eq!((s.tokens[1].p_plus, s.tokens[1].p_minus), (1, 30));
        assert_eq!(s.tokens[1].field_id, UNK);
        assert!(s.tokens.iter().all(|t| t.word_id == UNK));
        let last = s.tokens.last().unwrap();
        assert_eq!((last.p_plus, last.p_minus), (30, 1));
    }

    #[test]
    fn qg_bits_mark_span() {
        let ex = QgExample {
            passage_tokens: "a b c d e".split(' ').map(String::from).collect(),
            answer_span: (0, 0),
            question_tokens: vec![],
        };
        let wv = Vocabulary::build(["a"], 5);
        let s = encode_qg_source(&ex, &wv).unwrap();
        let bits: Vec<u8> = s.tokens.iter().map(|t| t.answer_bit).collect();
        assert_eq!(bits, vec![1, 0, 0, 0, 0]);
        let whole = QgExample {
            answer_span: (0, 4),
            ..ex.clone()
        };
        assert!(encode_qg_source(&whole, &wv).unwrap().tokens.iter().all(|t| t.answer_bit == 1));
        let bad = QgExample { answer_span: (3, 9), ..ex };
        assert!(matches!(encode_qg_source(&bad, &wv), Err(DataError::Span { start: 3, end: 9, .. })));
    }

    #[test]
    fn oov_map_extends_vocab() {
        let wv = Vocabulary::build(["the"], 5);
        let src: Vec<String> = "the foo bar foo".split(' ').map(String::from).collect();
        let m = OovMap::new(&src, &wv);
        assert_eq!(m.ext_ids, vec![4, 5, 6, 5]);
        assert_eq!(m.extended_size(), 7);
        let (ids, unk) = m.target_ids(&["bar".into(), "baz".into(), "the".into()], &wv);
        assert_eq!(ids, vec![6, UNK, 4, EOS]);
        assert_eq!(unk, 1);
        assert_eq!(m.token(6, &wv), Some("bar"));
    }
}
