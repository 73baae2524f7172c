//! WikiBio infobox records.
//!
//! A `.box` file holds one infobox per line as whitespace-separated
//! `field_k:token` items, `k` being the 1-based position of `token` inside
//! its field. The matching `.sent` file holds tokenized sentences, one per
//! line, and the optional `.nb` file the number of sentences of each article;
//! the reference description is the first sentence of each article. Without
//! `.nb`, `.sent` lines align one-to-one with `.box` lines.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_to_string, DataError, TextOptions};

/// Value marking an empty infobox slot in the released dataset.
pub const NONE_VALUE: &str = "<none>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InfoboxRecord {
    pub fields: Vec<Field>,
    pub reference: Vec<String>,
}

impl InfoboxRecord {
    /// Value tokens in field order.
    pub fn source_tokens(&self) -> Vec<String> {
        self.fields.iter().flat_map(|f| f.tokens.iter().cloned()).collect()
    }

    /// Drops fields whose only value is `<none>`.
    pub fn without_empty_fields(mut self) -> Self {
        self.fields.retain(|f| !(f.tokens.len() == 1 && f.tokens[0] == NONE_VALUE));
        self
    }

    /// Field values normalized the way training data is.
    pub fn normalized(mut self, opts: &TextOptions) -> Self {
        for f in &mut self.fields {
            f.tokens = f.tokens.iter().map(|t| opts.normalize(t)).collect();
        }
        self
    }

    /// `field_k:token` serialization of the table part (the `.box` line).
    pub fn to_box_line(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            for (k, tok) in f.tokens.iter().enumerate() {
                if !out.is_empty() {
                    out.push(' ');
                }
                let _ = write!(out, "{}_{}:{}", f.name, k + 1, tok);
            }
        }
        out
    }
}

/// Parses one `.box` line; `line_no` (1-based) only feeds error messages.
pub fn parse_box_line(raw: &str, line_no: usize) -> Result<InfoboxRecord, DataError> {
    let mut fields: Vec<Field> = Vec::new();
    let mut last_k = 0usize;
    let mut column = 1usize;
    let mut rest = raw;
    loop {
        let skipped = rest.len() - rest.trim_start().len();
        column += rest[..skipped].chars().count();
        rest = &rest[skipped..];
        if rest.is_empty() {
            break;
        }
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let item = &rest[..end];
        let err = |msg: String| DataError::Parse {
            line: line_no,
            column,
            msg,
        };

        let (key, token) = item
            .split_once(':')
            .ok_or_else(|| err(format!("item `{item}` has no `:` separator")))?;
        if token.is_empty() {
            return Err(err(format!("item `{item}` has an empty value")));
        }
        let (name, k) = key
            .rsplit_once('_')
            .and_then(|(n, k)| Some((n, k.parse::<usize>().ok()?)))
            .filter(|(n, k)| !n.is_empty() && *k >= 1)
            .ok_or_else(|| err(format!("item `{item}` lacks a `field_k` key")))?;

        match fields.last_mut() {
            Some(f) if f.name == name && k > last_k => f.tokens.push(token.to_string()),
            _ => fields.push(Field {
                name: name.to_string(),
                tokens: vec![token.to_string()],
            }),
        }
        last_k = k;
        column += item.chars().count();
        rest = &rest[end..];
    }
    if fields.is_empty() {
        return Err(DataError::Parse {
            line: line_no,
            column: 1,
            msg: "record has no fields".into(),
        });
    }
    Ok(InfoboxRecord {
        fields,
        reference: Vec::new(),
    })
}

/// Parses a full `.box` text, one record per non-blank line.
pub fn parse_box_file(text: &str) -> Result<Vec<InfoboxRecord>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_box_line(l, i + 1))
        .collect()
}

/// Loads `prefix.box` + `prefix.sent` (+ `prefix.nb` when it exists).
pub fn load_wikibio(prefix: &Path, opts: &TextOptions) -> Result<Vec<InfoboxRecord>, DataError> {
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    let box_text = read_to_string(&with_ext(".box"))?;
    let sent_text = read_to_string(&with_ext(".sent"))?;
    let nb_path = with_ext(".nb");
    let nb_text = if nb_path.exists() { Some(read_to_string(&nb_path)?) } else { None };
    assemble_wikibio(&box_text, &sent_text, nb_text.as_deref(), opts)
}

/// Joins box lines with their reference sentences.
pub fn assemble_wikibio(
    box_text: &str,
    sent_text: &str,
    nb_text: Option<&str>,
    opts: &TextOptions,
) -> Result<Vec<InfoboxRecord>, DataError> {
    let records = parse_box_file(box_text)?;
    let sents: Vec<&str> = sent_text.lines().collect();
    let firsts: Vec<&str> = match nb_text {
        None => sents.clone(),
        Some(nb) => {
            let mut out = Vec::new();
            let mut at = 0usize;
            for (i, l) in nb.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let n: usize = l.trim().parse().map_err(|_| DataError::Format {
                    line: i + 1,
                    msg: format!("sentence count `{}` is not an integer", l.trim()),
                })?;
                if n == 0 || at >= sents.len() {
                    return Err(DataError::Format {
                        line: i + 1,
                        msg: "sentence counts do not match the .sent file".into(),
                    });
                }
                out.push(sents[at]);
                at += n;
            }
            out
        }
    };
    if firsts.len() < records.len() {
        return Err(DataError::Alignment {
            what: "references",
            expected: records.len(),
            found: firsts.len(),
        });
    }
    Ok(records
        .into_iter()
        .zip(firsts)
        .map(|(r, s)| {
            let mut r = r.normalized(opts);
            r.reference = opts.tokenize(s);
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_tokens_by_field() {
        let r = parse_box_line("name_1:bernard name_2:keen", 1).unwrap();
        assert_eq!(
            r.fields,
            vec![Field {
                name: "name".into(),
                tokens: vec!["bernard".into(), "keen".into()]
            }]
        );
    }

    #[test]
    fn field_names_may_contain_underscores_and_repeat() {
        let r = parse_box_line("birth_date_1:5 birth_date_2:september name_1:a name_1:b", 1).unwrap();
        assert_eq!(r.fields.len(), 3);
        assert_eq!(r.fields[0].name, "birth_date");
        assert_eq!(r.fields[0].tokens, vec!["5", "september"]);
        assert_eq!(r.fields[2].tokens, vec!["b"]);
    }

    #[test]
    fn single_field_single_token() {
        let r = parse_box_line("occupation_1:scientist", 3).unwrap();
        assert_eq!(r.fields.len(), 1);
        assert_eq!(r.fields[0].tokens, vec!["scientist"]);
    }

    #[test]
    fn errors_carry_position() {
        match parse_box_line("name_1:a nosep", 4).unwrap_err() {
            DataError::Parse { line, column, .. } => assert_eq!((line, column), (4, 10)),
            e => panic!("{e:?}"),
        }
        assert!(matches!(parse_box_line("name_1:", 1), Err(DataError::Parse { .. })));
        assert!(matches!(parse_box_line("   ", 1), Err(DataError::Parse { .. })));
        assert!(matches!(parse_box_line("name:x", 1), Err(DataError::Parse { .. })));
    }

    #[test]
    fn value_tokens_may_contain_colons() {
        let r = parse_box_line("website_1:http://x.org", 1).unwrap();
        assert_eq!(r.fields[0].tokens, vec!["http://x.org"]);
        assert_eq!(r.to_box_line(), "website_1:http://x.org");
    }

    #[test]
    fn nb_file_selects_first_sentence() {
        let recs = assemble_wikibio(
            "name_1:a\nname_1:b\n",
            "a was here .\na again .\nb was there .\n",
            Some("2\n1\n"),
            &TextOptions::default(),
        )
        .unwrap();
        assert_eq!(recs[0].reference, vec!["a", "was", "here", "."]);
        assert_eq!(recs[1].reference, vec!["b", "was", "there", "."]);
    }

    #[test]
    fn missing_references_is_alignment_error() {
        let err = assemble_wikibio("name_1:a\nname_1:b\n", "only one\n", None, &TextOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::Alignment { expected: 2, found: 1, .. }));
    }

    #[test]
    fn none_fields_can_be_dropped() {
        let r = parse_box_line("image_1:<none> name_1:x", 1).unwrap().without_empty_fields();
        assert_eq!(r.fields.len(), 1);
    }
}
