use super::{decode, replace_unk, DecodeConfig, Result, StepModel};
use crate::data::vocab::{EOS, PAD, SOS};
use crate::data::{Example, OovMap, Vocabulary};
use crate::network::{DecoderState, EncodedSource, Seq2Seq};
use crate::tensor::ParamStore;

/// A trained network bound to one encoded source.
pub struct NetworkModel<'a> {
    pub net: &'a Seq2Seq,
    pub params: &'a ParamStore,
    pub enc: EncodedSource,
}

impl StepModel for NetworkModel<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        self.enc.init.clone()
    }

    fn step(&self, state: &DecoderState, prev: usize) -> Result<(DecoderState, Vec<f64>, Vec<f64>)> {
        let mut s = state.clone();
        s.prev = prev;
        let out = self.net.step(self.params, &self.enc, &s)?;
        Ok((out.state, out.probs, out.alpha))
    }

    fn start_token(&self) -> usize {
        SOS
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn banned(&self) -> &[usize] {
        &[PAD, SOS]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Extended-vocabulary ids chosen by search.
    pub ids: Vec<usize>,
    /// Words for `ids`, before UNK replacement.
    pub raw_tokens: Vec<String>,
    /// Final output with UNKs replaced from the source.
    pub tokens: Vec<String>,
    pub attention: Vec<Vec<f64>>,
    pub log_prob: f64,
}

/// Encodes `example`, searches, maps ids back to words and replaces UNKs.
pub fn generate(
    net: &Seq2Seq,
    params: &ParamStore,
    example: &Example,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Generated> {
    let (enc, oov): (EncodedSource, OovMap) = net.encode_example(params, example, vocab)?;
    let model = NetworkModel { net, params, enc };
    let out = decode(&model, cfg)?;
    let raw_tokens: Vec<String> = out
        .tokens
        .iter()
        .map(|&id| oov.token(id, vocab).unwrap_or(crate::data::vocab::UNK_TOKEN).to_string())
        .collect();
    let tokens = replace_unk(&raw_tokens, &out.attention, &example.source_tokens)?;
    Ok(Generated {
        ids: out.tokens,
        raw_tokens,
        tokens,
        attention: out.attention,
        log_prob: out.log_prob,
    })
}
