use super::{lstm_cell, DropoutRng, Result, Seq2Seq};
use crate::data::vocab::UNK;
use crate::data::{Example, OovMap, Vocabulary};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Decoder recurrent state on a graph: LSTM hidden and cell vectors plus the
/// previous attention context (fed back as input).
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub h: Var,
    pub c: Var,
    pub ctx: Var,
}

/// Encoder output on a graph.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    /// `[T × 2·hidden]` encoder states.
    pub h: Var,
    /// `H · W_h`, the source half of the attention score, computed once.
    pub keys: Var,
    pub init: DecoderVars,
    /// False at padding positions.
    pub mask: Vec<bool>,
    /// Extended-vocabulary id of each source position.
    pub ext_ids: Vec<usize>,
    pub ext_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub state: DecoderVars,
    pub logits: Var,
    pub alpha: Var,
    pub p_gen: Var,
}

/// Graph-free decoder state, carried between inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
    pub ctx: Tensor,
    pub prev: usize,
}

impl DecoderState {
    pub fn bind(&self, g: &mut Graph<'_>) -> DecoderVars {
        DecoderVars {
            h: g.constant(self.h.clone()),
            c: g.constant(self.c.clone()),
            ctx: g.constant(self.ctx.clone()),
        }
    }
}

/// Graph-free encoder output, reused by every inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    pub h: Tensor,
    pub keys: Tensor,
    pub init: DecoderState,
    pub mask: Vec<bool>,
    pub ext_ids: Vec<usize>,
    pub ext_size: usize,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> EncodedVars {
        let h = g.leaf_ref(&self.h);
        let keys = g.leaf_ref(&self.keys);
        EncodedVars {
            h,
            keys,
            init: self.init.bind(g),
            mask: self.mask.clone(),
            ext_ids: self.ext_ids.clone(),
            ext_size: self.ext_size,
        }
    }
}

impl EncodedVars {
    pub fn snapshot(&self, g: &Graph<'_>, start_token: usize) -> EncodedSource {
        EncodedSource {
            h: g.value(self.h).clone().with_requires_grad(false),
            keys: g.value(self.keys).clone().with_requires_grad(false),
            init: DecoderState {
                h: g.value(self.init.h).clone().with_requires_grad(false),
                c: g.value(self.init.c).clone().with_requires_grad(false),
                ctx: g.value(self.init.ctx).clone().with_requires_grad(false),
                prev: start_token,
            },
            mask: self.mask.clone(),
            ext_ids: self.ext_ids.clone(),
            ext_size: self.ext_size,
        }
    }
}

/// Values produced by one inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepValues {
    pub state: DecoderState,
    /// Distribution over the extended vocabulary.
    pub probs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub p_gen: f64,
}

impl Seq2Seq {
    /// Additive attention `e_i = vᵀ tanh(W_h H_i + W_s s)`, softmax over
    /// unmasked positions, and the context `Σ alpha_i H_i`.
    pub fn attention(&self, g: &mut Graph<'_>, s: Var, enc: &EncodedVars) -> Result<(Var, Var)> {
        let w_s = g.param("att.w_s")?;
        let v = g.param("att.v")?;
        let query = g.matmul(s, w_s)?;
        let pre = g.add_bias(enc.keys, query)?;
        let act = g.tanh(pre);
        let scores = g.matmul(act, v)?;
        let n = g.value(scores).rows();
        let scores = g.reshape(scores, vec![n])?;
        let alpha = g.softmax(scores, Some(&enc.mask))?;
        let ctx = g.matmul(alpha, enc.h)?;
        Ok((alpha, ctx))
    }

    /// Advances the decoder on `[embed(y_prev); ctx_prev]`, attends with the
    /// new state, and produces vocabulary logits from `[s'; ctx]` and the
    /// generation gate `p_gen = σ(w·[ctx; s'; embed(y_prev)] + b)`.
    ///
    /// Extended ids (copied source words) are embedded as UNK.
    pub fn decoder_step(
        &self,
        g: &mut Graph<'_>,
        state: DecoderVars,
        y_prev: usize,
        enc: &EncodedVars,
        rng: Option<&mut DropoutRng>,
    ) -> Result<StepVars> {
        let c = &self.config;
        let hidden = c.hidden_dim;
        let y_in = if y_prev >= c.word_vocab && y_prev < enc.ext_size { UNK } else { y_prev };
        let table = g.param("emb.word")?;
        let e = g.gather(table, &[y_in])?;
        let e = g.reshape(e, vec![c.word_dim])?;

        let x = g.concat(&[e, state.ctx])?;
        let w_x = g.param("dec.lstm.w_x")?;
        let w_h = g.param("dec.lstm.w_h")?;
        let b = g.param("dec.lstm.b")?;
        let xz = g.linear(x, w_x, b)?;
        let (h, cell) = lstm_cell(g, xz, state.h, state.c, w_h, hidden)?;

        let (alpha, ctx) = self.attention(g, h, enc)?;

        let mut readout = g.concat(&[h, ctx])?;
        if let Some(r) = rng {
            readout = g.dropout(readout, c.dropout_p, r)?;
        }
        let logits = self.dense(g, readout, "out")?;

        let gate_in = g.concat(&[ctx, h, e])?;
        let gate = self.dense(g, gate_in, "gate")?;
        let p_gen = g.sigmoid(gate);

        Ok(StepVars {
            state: DecoderVars { h, c: cell, ctx },
            logits,
            alpha,
            p_gen,
        })
    }

    /// `P = p_gen·softmax(logits) ⊕ (1 - p_gen)·alpha` scattered onto the
    /// source tokens' extended ids.
    pub fn output_distribution(
        &self,
        g: &mut Graph<'_>,
        logits: Var,
        alpha: Var,
        p_gen: Var,
        enc: &EncodedVars,
    ) -> Result<Var> {
        output_distribution(g, logits, alpha, p_gen, &enc.ext_ids, enc.ext_size)
    }

    /// Encodes one example in inference mode.
    pub fn encode_example(
        &self,
        params: &ParamStore,
        example: &Example,
        vocab: &Vocabulary,
    ) -> Result<(EncodedSource, OovMap)> {
        let oov = OovMap::new(&example.source_tokens, vocab);
        let mut g = Graph::inference(params);
        let enc = self.encode(&mut g, &example.source, &oov.ext_ids, oov.extended_size(), None)?;
        Ok((enc.snapshot(&g, crate::data::vocab::SOS), oov))
    }

    /// One inference step from `state` feeding back `state.prev`.
    pub fn step(&self, params: &ParamStore, enc: &EncodedSource, state: &DecoderState) -> Result<StepValues> {
        let mut g = Graph::inference(params);
        let ev = enc.bind(&mut g);
        let sv = state.bind(&mut g);
        let out = self.decoder_step(&mut g, sv, state.prev, &ev, None)?;
        let p = self.output_distribution(&mut g, out.logits, out.alpha, out.p_gen, &ev)?;
        Ok(StepValues {
            state: DecoderState {
                h: g.value(out.state.h).clone(),
                c: g.value(out.state.c).clone(),
                ctx: g.value(out.state.ctx).clone(),
                prev: state.prev,
            },
            probs: g.value(p).data().to_vec(),
            alpha: g.value(out.alpha).data().to_vec(),
            p_gen: g.value(out.p_gen).data()[0],
        })
    }
}

/// Pointer-generator mixture over the extended vocabulary of size `ext_size`.
pub fn output_distribution(
    g: &mut Graph<'_>,
    logits: Var,
    alpha: Var,
    p_gen: Var,
    ext_ids: &[usize],
    ext_size: usize,
) -> Result<Var> {
    let vocab = g.softmax(logits, None)?;
    let generate = g.scale_by(vocab, p_gen)?;
    let copy_gate = g.one_minus(p_gen);
    let copy = g.scale_by(alpha, copy_gate)?;
    Ok(g.scatter_add(generate, copy, ext_ids, ext_size)?)
}
