use std::cmp::Ordering;

use super::{DecodeConfig, GenerationOutput, Result, StepModel};

#[derive(Debug, Clone)]
struct Hypothesis<S> {
    tokens: Vec<usize>,
    attention: Vec<Vec<f64>>,
    log_prob: f64,
    state: S,
}

#[derive(Debug, Clone)]
struct Finished {
    /// Includes the final EOS when `ended`.
    tokens: Vec<usize>,
    attention: Vec<Vec<f64>>,
    log_prob: f64,
    score: f64,
    ended: bool,
}

/// Higher `key` first, then the lexicographically smaller id sequence.
fn rank(a_key: f64, a_toks: &[usize], b_key: f64, b_toks: &[usize]) -> Ordering {
    b_key.total_cmp(&a_key).then_with(|| a_toks.cmp(b_toks))
}

/// Beam search keeping the `beam_size` best unfinished hypotheses per step.
///
/// Candidates ending in EOS move to a finished pool; hypotheses that reach
/// `max_len` ids are finished too. Search stops once the best finished score
/// beats every unfinished hypothesis's optimistic bound (its log-probability
/// at the longest allowed length). The result is the finished hypothesis
/// with the best length-penalized score.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<GenerationOutput> {
    cfg.validate()?;
    let eos = model.eos();
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        attention: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
    }];
    let mut finished: Vec<Finished> = Vec::new();

    for depth in 0..cfg.max_len {
        // (parent, token, log_prob) for every allowed extension.
        let mut expanded = Vec::with_capacity(beam.len());
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (b, hyp) in beam.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or_else(|| model.start_token());
            let (state, probs, alpha) = model.step(&hyp.state, prev)?;
            for (tok, &p) in probs.iter().enumerate() {
                if p > 0.0 && !model.banned().contains(&tok) {
                    candidates.push((b, tok, hyp.log_prob + p.ln()));
                }
            }
            expanded.push((state, alpha));
        }
        // Same-length sequences compare as (parent prefix, new token).
        let order = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
            b.2.total_cmp(&a.2)
                .then_with(|| beam[a.0].tokens.cmp(&beam[b.0].tokens))
                .then_with(|| a.1.cmp(&b.1))
        };
        // Only the best 2k candidates can matter: at most k EOS entries are
        // pooled and at most k others are kept.
        let keep = (2 * cfg.beam_size).min(candidates.len());
        if keep > 0 && keep < candidates.len() {
            candidates.select_nth_unstable_by(keep - 1, order);
            candidates.truncate(keep);
        }
        candidates.sort_by(order);

        let mut next = Vec::with_capacity(cfg.beam_size);
        for (rank_pos, &(b, tok, lp)) in candidates.iter().enumerate() {
            let (state, alpha) = &expanded[b];
            let mut tokens = beam[b].tokens.clone();
            tokens.push(tok);
            if tok == eos {
                if rank_pos < cfg.beam_size {
                    finished.push(Finished {
                        score: cfg.score(lp, tokens.len()),
                        attention: beam[b].attention.clone(),
                        tokens,
                        log_prob: lp,
                        ended: true,
                    });
                }
                continue;
            }
            if next.len() == cfg.beam_size {
                if rank_pos >= cfg.beam_size {
                    break;
                }
                continue;
            }
            let mut attention = beam[b].attention.clone();
            attention.push(alpha.clone());
            next.push(Hypothesis {
                tokens,
                attention,
                log_prob: lp,
                state: state.clone(),
            });
        }
        beam = next;

        if depth + 1 == cfg.max_len {
            for h in beam.drain(..) {
                finished.push(Finished {
                    score: cfg.score(h.log_prob, h.tokens.len()),
                    tokens: h.tokens,
                    attention: h.attention,
                    log_prob: h.log_prob,
                    ended: false,
                });
            }
        }
        if beam.is_empty() {
            break;
        }
        if let Some(best) = best_finished(&finished) {
            let bound = beam
                .iter()
                .map(|h| cfg.score(h.log_prob, cfg.max_len))
                .fold(f64::NEG_INFINITY, f64::max);
            if best.score > bound {
                break;
            }
        }
    }

    let best = best_finished(&finished).cloned().unwrap_or(Finished {
        tokens: Vec::new(),
        attention: Vec::new(),
        log_prob: f64::NEG_INFINITY,
        score: f64::NEG_INFINITY,
        ended: false,
    });
    let mut tokens = best.tokens;
    if best.ended {
        tokens.pop();
    }
    Ok(GenerationOutput {
        tokens,
        attention: best.attention,
        log_prob: best.log_prob,
        ended: best.ended,
    })
}

fn best_finished(pool: &[Finished]) -> Option<&Finished> {
    pool.iter().min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
}
