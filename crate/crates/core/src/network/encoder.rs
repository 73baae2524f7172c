use super::{DecoderVars, DropoutRng, EncodedVars, NetworkError, Result, Seq2Seq};
use crate::tensor::{Graph, Tensor, Var};

/// One LSTM step. `xz` is the input projection `x·W_x + b` (`[4h]`, gate
/// order i, f, g, o); the recurrent term `h·W_h` is added here.
pub fn lstm_cell(g: &mut Graph<'_>, xz: Var, h: Var, c: Var, w_h: Var, hidden: usize) -> Result<(Var, Var)> {
    let hz = g.matmul(h, w_h)?;
    let z = g.add(xz, hz)?;
    let zi = g.slice(z, 0, hidden)?;
    let zf = g.slice(z, hidden, hidden)?;
    let zg = g.slice(z, 2 * hidden, hidden)?;
    let zo = g.slice(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

impl Seq2Seq {
    /// Runs the (stacked) BiLSTM over `x: [T×d_in]`. Row `t` of the output
    /// is `[h→_t; h←_t]` of the top layer; the decoder starts from a tanh
    /// projection of the last forward and first backward states.
    pub fn bilstm_encode(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mask: Vec<bool>,
        ext_ids: Vec<usize>,
        ext_size: usize,
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<EncodedVars> {
        let hidden = self.config.hidden_dim;
        let steps = g.value(x).rows();
        if g.value(x).rank() != 2 || steps == 0 {
            return Err(NetworkError::EmptyInput);
        }
        let mut input = x;
        let mut ends = None;
        for layer in 0..self.config.encoder_layers {
            if layer > 0 {
                if let Some(r) = rng.as_deref_mut() {
                    input = g.dropout(input, self.config.dropout_p, r)?;
                }
            }
            let fwd = self.run_direction(g, input, &format!("enc.{layer}.fwd"), false)?;
            let bwd = self.run_direction(g, input, &format!("enc.{layer}.bwd"), true)?;
            let hf = g.stack(&fwd)?;
            let hb = g.stack(&bwd)?;
            input = g.concat(&[hf, hb])?;
            ends = Some((fwd[steps - 1], bwd[0]));
        }
        let (last_fwd, first_bwd) = ends.expect("at least one encoder layer");

        let w_h = g.param("att.w_h")?;
        let keys = g.matmul(input, w_h)?;

        let both = g.concat(&[last_fwd, first_bwd])?;
        let h0 = self.dense(g, both, "dec.init_h")?;
        let h0 = g.tanh(h0);
        let c0 = self.dense(g, both, "dec.init_c")?;
        let c0 = g.tanh(c0);
        let ctx0 = g.constant(Tensor::zeros(&[2 * hidden]));
        Ok(EncodedVars {
            h: input,
            keys,
            init: DecoderVars { h: h0, c: c0, ctx: ctx0 },
            mask,
            ext_ids,
            ext_size,
        })
    }

    fn run_direction(&self, g: &mut Graph<'_>, input: Var, prefix: &str, reverse: bool) -> Result<Vec<Var>> {
        let hidden = self.config.hidden_dim;
        let steps = g.value(input).rows();
        let w_x = g.param(&format!("{prefix}.w_x"))?;
        let w_h = g.param(&format!("{prefix}.w_h"))?;
        let b = g.param(&format!("{prefix}.b"))?;
        let xz = g.linear(input, w_x, b)?;
        let mut h = g.constant(Tensor::zeros(&[hidden]));
        let mut c = g.constant(Tensor::zeros(&[hidden]));
        let mut out = vec![h; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let xt = g.row(xz, t)?;
            (h, c) = lstm_cell(g, xt, h, c, w_h, hidden)?;
            out[t] = h;
        }
        Ok(out)
    }

    pub(crate) fn dense(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}.w"))?;
        let b = g.param(&format!("{prefix}.b"))?;
        Ok(g.linear(x, w, b)?)
    }
}
