//! Small deterministic [`StepModel`]s for exercising search without a
//! trained network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, StepModel};

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Every prefix gets its own pseudo-random distribution, derived from the
/// model seed and the prefix, so outputs depend on the full history.
#[derive(Debug, Clone)]
pub struct PrefixModel {
    pub vocab: usize,
    pub eos: usize,
    pub source_len: usize,
    pub seed: u64,
    /// Logit spread; larger values give peakier distributions.
    pub sharpness: f64,
}

impl PrefixModel {
    pub fn new(vocab: usize, eos: usize, seed: u64) -> Self {
        Self {
            vocab,
            eos,
            source_len: 3,
            seed,
            sharpness: 2.0,
        }
    }

    fn rng_for(&self, prefix: &[usize]) -> ChaCha8Rng {
        // FNV-1a over the prefix, folded into the model seed.
        let mut h: u64 = 0xcbf29ce484222325 ^ self.seed;
        for &t in prefix {
            for b in (t as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

impl StepModel for PrefixModel {
    type State = Vec<usize>;

    fn start(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let mut prefix = state.clone();
        prefix.push(prev);
        let mut rng = self.rng_for(&prefix);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-1.0..1.0) * self.sharpness).collect();
        let att: Vec<f64> = (0..self.source_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Ok((prefix, softmax(&logits), softmax(&att)))
    }

    fn start_token(&self) -> usize {
        usize::MAX
    }

    fn eos(&self) -> usize {
        self.eos
    }
}

/// Fixed per-step outputs regardless of what was emitted. Steps past the end
/// of the script emit EOS with certainty.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    pub steps: Vec<(Vec<f64>, Vec<f64>)>,
    pub eos: usize,
    pub banned: Vec<usize>,
}

impl StepModel for ScriptedModel {
    type State = usize;

    fn start(&self) -> usize {
        0
    }

    fn step(&self, depth: &usize, _prev: usize) -> Result<(usize, Vec<f64>, Vec<f64>)> {
        let (probs, alpha) = self.steps.get(*depth).cloned().unwrap_or_else(|| {
            let width = self.steps.first().map_or(self.eos + 1, |s| s.0.len());
            let mut p = vec![0.0; width];
            p[self.eos] = 1.0;
            (p, vec![1.0])
        });
        Ok((depth + 1, probs, alpha))
    }

    fn start_token(&self) -> usize {
        usize::MAX
    }

    fn eos(&self) -> usize {
        self.eos
    }

    fn banned(&self) -> &[usize] {
        &self.banned
    }
}
