use std::path::Path;

use rand::Rng;

use super::{read_to_string, DataError, Vocabulary};
use crate::tensor::Tensor;

/// Bound of the uniform fallback for tokens absent from the file.
pub const FALLBACK_BOUND: f64 = 0.1;

/// Reads `token v1 … v_dim` lines into a frozen `[|V|×dim]` table in vocab
/// order. Rows for tokens missing from the file are drawn from U(-0.1, 0.1).
pub fn load_pretrained_embeddings<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor, DataError> {
    parse_embeddings(&read_to_string(path)?, vocab, dim, rng)
}

pub fn parse_embeddings<R: Rng + ?Sized>(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor, DataError> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        // word2vec-style "count dim" header
        if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(DataError::Format {
                line: i + 1,
                msg: format!("expected {dim} values for `{token}`, found {}", values.len()),
            });
        }
        let Some(id) = vocab.get(token) else { continue };
        let vec = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| DataError::Format {
                line: i + 1,
                msg: format!("bad number for `{token}`: {e}"),
            })?;
        rows[id].get_or_insert(vec);
    }
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for row in rows {
        match row {
            Some(v) => data.extend(v),
            None => data.extend((0..dim).map(|_| rng.gen_range(-FALLBACK_BOUND..=FALLBACK_BOUND))),
        }
    }
    Ok(Tensor::new(vec![vocab.len(), dim], data)?.with_requires_grad(false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn rows_follow_vocab_order() {
        let text = "the 0.1 0.2 0.3\nof -1 -2 -3\nand 4 5 6\nto 7 8 9\na 0.5 0.25 0.125\n";
        let vocab = Vocabulary::from_tokens(["a", "and", "of", "the", "to"].map(String::from), 5);
        let t = parse_embeddings(text, &vocab, 3, &mut rng()).unwrap();
        assert_eq!(t.shape(), &[9, 3]);
        assert!(!t.requires_grad);
        assert_eq!(t.row(4), &[0.5, 0.25, 0.125]);
        assert_eq!(t.row(5), &[4.0, 5.0, 6.0]);
        assert_eq!(t.row(6), &[-1.0, -2.0, -3.0]);
        assert_eq!(t.row(7), &[0.1, 0.2, 0.3]);
        assert_eq!(t.row(8), &[7.0, 8.0, 9.0]);
        for r in 0..4 {
            assert!(t.row(r).iter().all(|v| v.abs() <= FALLBACK_BOUND));
        }
    }

    #[test]
    fn absent_token_gets_fallback() {
        let vocab = Vocabulary::from_tokens(["zebra".to_string()], 1);
        let t = parse_embeddings("the 1 2\n", &vocab, 2, &mut rng()).unwrap();
        assert!(t.row(4).iter().all(|v| v.abs() <= FALLBACK_BOUND));
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let vocab = Vocabulary::from_tokens(Vec::new(), 1);
        let err = parse_embeddings("a 1 2\nb 1 2 3\n", &vocab, 2, &mut rng()).unwrap_err();
        assert!(matches!(err, DataError::Format { line: 2, .. }), "{err:?}");
    }
}
