//! Seeded synthetic corpora and small model configurations, for tests,
//! gradient checks and quick experiments.
//!
//! Toy descriptions and questions are templates over the record's own
//! values, so they exercise both generation (template words) and copying.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, Field, InfoboxRecord, QgExample, Vocabs};
use crate::network::{ModelConfig, Task};
use crate::training::Corpus;

const FIRST: &[&str] = &[
    "alan", "grace", "ada", "john", "marie", "niels", "rosa", "emil", "lise", "otto", "clara", "hans", "irene",
    "paul", "vera", "karl",
];
const LAST: &[&str] = &[
    "turing", "hopper", "lovelace", "nash", "curie", "bohr", "parks", "fischer", "meitner", "hahn", "schumann",
    "berger", "joliot", "dirac", "rubin", "weber",
];
const MONTHS: &[&str] = &["january", "march", "may", "july", "september", "november"];
const OCCUPATIONS: &[&str] = &["physicist", "chemist", "painter", "composer", "poet", "engineer", "novelist", "actor"];
const NATIONS: &[&str] = &["british", "german", "french", "danish", "polish", "american", "austrian", "swiss"];
const CLUBS: &[&str] = &["arsenal", "ajax", "porto", "celtic", "benfica", "lazio"];
const CITIES: &[&str] = &["london", "paris", "berlin", "vienna", "warsaw", "zurich", "boston", "oslo"];

fn year(rng: &mut impl Rng) -> String {
    (1900 + rng.gen_range(0..24) * 3).to_string()
}

fn pick<'a>(rng: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn field(name: &str, tokens: &[&str]) -> Field {
    Field {
        name: name.to_string(),
        tokens: words(tokens),
    }
}

/// Biographical infoboxes whose description is one of two templates,
/// chosen by whether the record has a `club` field.
pub fn table_records(n: usize, seed: u64) -> Vec<InfoboxRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (first, last) = (pick(&mut rng, FIRST), pick(&mut rng, LAST));
            let (month, yr) = (pick(&mut rng, MONTHS), year(&mut rng));
            let nat = pick(&mut rng, NATIONS);
            let mut fields = vec![
                field("name", &[first, last]),
                field("birth_date", &[month, &yr]),
                field("nationality", &[nat]),
            ];
            let reference = if i % 4 == 3 {
                let club = pick(&mut rng, CLUBS);
                fields.push(field("club", &[club]));
                words(&[first, last, "(", "born", &yr, ")", "is", "a", nat, "footballer", "who", "plays", "for", club, "."])
            } else {
                let occ = pick(&mut rng, OCCUPATIONS);
                fields.push(field("occupation", &[occ]));
                words(&[first, last, "(", "born", month, &yr, ")", "was", "a", nat, occ, "."])
            };
            InfoboxRecord { fields, reference }
        })
        .collect()
}

/// As [`table_records`], but each reference token is replaced by a random
/// description word with probability `noise`.
pub fn noisy_table_records(n: usize, noise: f64, seed: u64) -> Vec<InfoboxRecord> {
    let mut recs = table_records(n, seed);
    let pool: Vec<String> = recs.iter().flat_map(|r| r.reference.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd5_eed5);
    for r in &mut recs {
        for tok in &mut r.reference {
            if rng.gen::<f64>() < noise {
                *tok = pool.choose(&mut rng).expect("non-empty").clone();
            }
        }
    }
    recs
}

/// A passage with three possible answers, the question depending on which
/// one is marked.
pub fn qg_passage(first: &str, last: &str, city: &str, yr: &str, occ: &str) -> Vec<String> {
    words(&[first, last, "was", "born", "in", city, "in", yr, "and", "worked", "as", "a", occ, "."])
}

/// Answer spans into [`qg_passage`]: city, year, occupation.
pub const QG_SPANS: [(usize, usize); 3] = [(5, 5), (7, 7), (12, 12)];

pub fn qg_question(passage: &[String], span: (usize, usize)) -> Vec<String> {
    let (first, last) = (passage[0].as_str(), passage[1].as_str());
    match span {
        (5, 5) => words(&["where", "was", first, last, "born", "?"]),
        (7, 7) => words(&["when", "was", first, last, "born", "?"]),
        _ => words(&["what", "did", first, last, "work", "as", "?"]),
    }
}

/// Passages in groups of three, each asked about all three answers in turn,
/// so the question can only be predicted from the marked span.
pub fn qg_examples(n: usize, seed: u64) -> Vec<QgExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passage = Vec::new();
    (0..n)
        .map(|i| {
            if i % 3 == 0 {
                passage = qg_passage(
                    pick(&mut rng, FIRST),
                    pick(&mut rng, LAST),
                    pick(&mut rng, CITIES),
                    &year(&mut rng),
                    pick(&mut rng, OCCUPATIONS),
                );
            }
            let span = QG_SPANS[i % 3];
            QgExample {
                question_tokens: qg_question(&passage, span),
                passage_tokens: passage.clone(),
                answer_span: span,
            }
        })
        .collect()
}

/// Vocabularies over `train` and model-ready examples for both splits.
pub fn table_corpus(train: &[InfoboxRecord], valid: &[InfoboxRecord], max_words: usize) -> Corpus {
    let vocabs = Vocabs::for_tables(train, max_words, 64);
    Corpus {
        train: train.iter().map(|r| Example::from_table(r, &vocabs)).collect(),
        valid: valid.iter().map(|r| Example::from_table(r, &vocabs)).collect(),
        vocabs,
    }
}

pub fn qg_corpus(train: &[QgExample], valid: &[QgExample], max_words: usize) -> Corpus {
    let vocabs = Vocabs::for_questions(train, max_words);
    let conv = |xs: &[QgExample]| -> Vec<Example> {
        xs.iter()
            .map(|e| Example::from_question(e, &vocabs).expect("toy spans are valid"))
            .collect()
    };
    Corpus {
        train: conv(train),
        valid: conv(valid),
        vocabs,
    }
}

/// A small network for `vocabs`: word embeddings of `2·hidden`, field
/// embeddings of `hidden/4` and position embeddings of 2 (tables), one
/// encoder layer, no dropout, trainable word embeddings.
pub fn model_config(task: Task, vocabs: &Vocabs, hidden: usize) -> ModelConfig {
    let field_vocab = vocabs.fields.as_ref().map_or(0, |f| f.len());
    let mut c = ModelConfig::for_task(task, vocabs.words.len(), field_vocab);
    c.hidden_dim = hidden;
    c.word_dim = 2 * hidden;
    c.field_dim = (hidden / 4).max(2);
    c.pos_dim = 2;
    c.encoder_layers = 1;
    c.dropout_p = 0.0;
    c.freeze_word_embeddings = false;
    if task == Task::Qg {
        c.field_dim = 0;
        c.pos_dim = 0;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_seeded_and_small() {
        assert_eq!(table_records(64, 3), table_records(64, 3));
        assert_ne!(table_records(64, 3), table_records(64, 4));
        let c = table_corpus(&table_records(64, 3), &table_records(8, 9), 200);
        assert!(c.vocabs.words.len() <= 200);
        let q = qg_examples(64, 1);
        assert!(q.iter().all(|e| e.validate().is_ok()));
        assert_eq!(q[0].answer_tokens().len(), 1);
        // one passage, three answers, three different questions
        assert!(q[..3].iter().all(|e| e.passage_tokens == q[0].passage_tokens));
        assert!(q[0].question_tokens != q[1].question_tokens && q[1].question_tokens != q[2].question_tokens);
        assert_ne!(q[3].passage_tokens, q[0].passage_tokens);
    }

    #[test]
    fn noise_changes_some_references() {
        let clean = table_records(100, 5);
        let noisy = noisy_table_records(100, 0.2, 5);
        let changed = clean.iter().zip(&noisy).filter(|(a, b)| a.reference != b.reference).count();
        assert!(changed > 50);
        assert!(clean.iter().zip(&noisy).all(|(a, b)| a.fields == b.fields));
    }
}
