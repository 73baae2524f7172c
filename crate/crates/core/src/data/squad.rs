//! SQuAD v1.1 ingestion (`data → paragraphs → qas → answers`).
//!
//! Contexts are split on whitespace. Character-offset answers become the
//! minimal span of tokens that covers them.

use serde::Deserialize;

use super::{DataError, TextOptions};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QgExample {
    pub passage_tokens: Vec<String>,
    /// Inclusive `(start, end)` token indices of the answer.
    pub answer_span: (usize, usize),
    pub question_tokens: Vec<String>,
}

impl QgExample {
    pub fn validate(&self) -> Result<(), DataError> {
        let (s, e) = self.answer_span;
        if s > e || e >= self.passage_tokens.len() {
            return Err(DataError::Span {
                start: s,
                end: e,
                len: self.passage_tokens.len(),
            });
        }
        Ok(())
    }

    pub fn answer_tokens(&self) -> &[String] {
        &self.passage_tokens[self.answer_span.0..=self.answer_span.1]
    }
}

#[derive(Debug, Deserialize)]
pub struct SquadFile {
    pub data: Vec<SquadArticle>,
}

#[derive(Debug, Deserialize)]
pub struct SquadArticle {
    #[serde(default)]
    pub title: String,
    pub paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Deserialize)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadQa>,
}

#[derive(Debug, Deserialize)]
pub struct SquadQa {
    pub question: String,
    #[serde(default)]
    pub id: String,
    pub answers: Vec<SquadAnswer>,
}

#[derive(Debug, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    pub answer_start: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SquadParse {
    pub examples: Vec<QgExample>,
    /// Answers dropped because their offset lies outside the passage.
    pub skipped: usize,
    /// Answers whose offsets did not fall on token boundaries.
    pub realigned: usize,
}

impl SquadParse {
    fn absorb(&mut self, other: SquadParse) {
        self.examples.extend(other.examples);
        self.skipped += other.skipped;
        self.realigned += other.realigned;
    }
}

/// Parses a whole SQuAD document. Blank input yields no examples.
pub fn parse_squad(json: &str, opts: &TextOptions) -> Result<SquadParse, DataError> {
    if json.trim().is_empty() {
        return Ok(SquadParse::default());
    }
    let file: SquadFile = serde_json::from_str(json)?;
    let mut out = SquadParse::default();
    for article in &file.data {
        for para in &article.paragraphs {
            out.absorb(parse_paragraph(para, opts));
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} answers with offsets beyond their passage", out.skipped);
    }
    Ok(out)
}

/// One example per distinct (question, answer span) of the paragraph.
pub fn parse_paragraph(para: &SquadParagraph, opts: &TextOptions) -> SquadParse {
    let spans = char_spans(&para.context);
    let n_chars = para.context.chars().count();
    let passage: Vec<String> = spans
        .iter()
        .map(|&(s, e)| opts.normalize(&para.context.chars().skip(s).take(e - s).collect::<String>()))
        .collect();
    let mut out = SquadParse::default();
    for qa in &para.qas {
        let question = opts.tokenize(&qa.question);
        let mut seen = Vec::new();
        for ans in &qa.answers {
            let start = ans.answer_start;
            let end = start + ans.text.chars().count();
            if start >= n_chars {
                out.skipped += 1;
                continue;
            }
            let Some((first, last)) = covering_tokens(&spans, start, end.max(start + 1)) else {
                out.skipped += 1;
                continue;
            };
            if spans[first].0 != start || spans[last].1 != end {
                out.realigned += 1;
                log::warn!(
                    "answer `{}` at char {} realigned to tokens {}..={} of question `{}`",
                    ans.text,
                    start,
                    first,
                    last,
                    qa.id
                );
            }
            if seen.contains(&(first, last)) {
                continue;
            }
            seen.push((first, last));
            out.examples.push(QgExample {
                passage_tokens: passage.clone(),
                answer_span: (first, last),
                question_tokens: question.clone(),
            });
        }
    }
    out
}

/// `[start, end)` character ranges of the whitespace-separated tokens.
fn char_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut cur: Option<usize> = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), cur) {
            (true, Some(s)) => {
                spans.push((s, i));
                cur = None;
            }
            (false, None) => cur = Some(i),
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = cur {
        spans.push((s, n));
    }
    spans
}

fn covering_tokens(spans: &[(usize, usize)], start: usize, end: usize) -> Option<(usize, usize)> {
    let first = spans.iter().position(|&(_, e)| e > start)?;
    let last = spans.iter().rposition(|&(s, _)| s < end)?;
    (first <= last).then_some((first, last))
}
