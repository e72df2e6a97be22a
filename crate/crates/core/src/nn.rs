//! Layer vocabulary: linear projection, LSTM cell, bidirectional LSTM,
//! sinusoidal positional encoding, multi-head self-attention, and the
//! post-norm Transformer encoder layer.
//!
//! Convention: weights are stored [out x in] and applied as `x W^T`; batched
//! inputs are [B, ..., features]. Initialization draws U(-1/sqrt(fan_in),
//! 1/sqrt(fan_in)) per weight in field order, biases zero (LSTM forget-gate
//! bias +1, layer-norm gain 1).

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Layer-norm denominator epsilon (original Transformer convention).
pub const LN_EPS: f64 = 1e-5;

/// Sinusoid wavelength base for positional encodings.
pub const PE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

// ---- linear ----

#[derive(Clone, Debug)]
pub struct LinearParams {
    /// [out x in]
    pub w: Tensor,
    /// [out]
    pub b: Tensor,
}

impl LinearParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.rank() != 2 || b.shape() != [w.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear_params",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self { w, b })
    }

    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w: uniform_fan_in(&[out_dim, in_dim], in_dim, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// x W^T + b over the last axis; accepts a bare vector or any batched shape.
pub fn linear(tape: &Tape, x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    if x.rank() == 1 {
        let lifted = tape.reshape(x, &[1, x.len()])?;
        let out = linear(tape, &lifted, p)?;
        return tape.reshape(&out, &[p.out_dim()]);
    }
    tape.add(&tape.matmul_nt(x, &p.w)?, &p.b)
}

// ---- LSTM ----

/// Fused gate parameters over [x_t ; h_prev], gate row order i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    /// [4*hidden x (d_x + hidden)]
    pub w: Tensor,
    /// [4*hidden]
    pub b: Tensor,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn init<R: Rng>(d_x: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = d_x + hidden;
        let w = uniform_fan_in(&[4 * hidden, fan_in], fan_in, rng);
        // Forget-gate bias +1 keeps early memory open (standard trainability aid).
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        Self {
            w,
            b: Tensor::new(&[4 * hidden], b).unwrap(),
            hidden,
        }
    }

    pub fn d_x(&self) -> usize {
        self.w.shape()[1] - self.hidden
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// One LSTM step. Takes and returns [B, dim] matrices (or bare vectors):
/// i,f,o = sigmoid, g = tanh; c = f*c_prev + i*g; h = o*tanh(c).
pub fn lstm_cell(
    tape: &Tape,
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &LstmCellParams,
) -> Result<(Tensor, Tensor)> {
    if x_t.rank() == 1 {
        let x = tape.reshape(x_t, &[1, x_t.len()])?;
        let h = tape.reshape(h_prev, &[1, h_prev.len()])?;
        let c = tape.reshape(c_prev, &[1, c_prev.len()])?;
        let (h2, c2) = lstm_cell(tape, &x, &h, &c, p)?;
        return Ok((
            tape.reshape(&h2, &[p.hidden])?,
            tape.reshape(&c2, &[p.hidden])?,
        ));
    }
    if h_prev.shape() != c_prev.shape() {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell",
            lhs: h_prev.shape().to_vec(),
            rhs: c_prev.shape().to_vec(),
        });
    }
    let h = p.hidden;
    let xc = tape.concat(&[x_t, h_prev], 1)?;
    let gates = tape.add(&tape.matmul_nt(&xc, &p.w)?, &p.b)?;
    let i = tape.sigmoid(&tape.slice(&gates, 1, 0, h)?)?;
    let f = tape.sigmoid(&tape.slice(&gates, 1, h, h)?)?;
    let g = tape.tanh(&tape.slice(&gates, 1, 2 * h, h)?)?;
    let o = tape.sigmoid(&tape.slice(&gates, 1, 3 * h, h)?)?;
    let c = tape.add(&tape.mul(&f, c_prev)?, &tape.mul(&i, &g)?)?;
    let h_new = tape.mul(&o, &tape.tanh(&c)?)?;
    Ok((h_new, c))
}

/// Full bidirectional pass over one sequence [T x d_x]: row t is
/// [fwd h_t ; bwd h_t], both chains starting from zero state.
pub fn bilstm_forward(
    tape: &Tape,
    seq: &Tensor,
    p_fwd: &LstmCellParams,
    p_bwd: &LstmCellParams,
) -> Result<Tensor> {
    if seq.rank() != 2 || seq.shape()[0] == 0 {
        return Err(Error::argument(format!(
            "bilstm_forward: want a nonempty [T x d_x] sequence, got {:?}",
            seq.shape()
        )));
    }
    let t_len = seq.shape()[0];
    let step = |p: &LstmCellParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Tensor>> {
        let mut h = Tensor::zeros(&[1, p.hidden]);
        let mut c = Tensor::zeros(&[1, p.hidden]);
        let mut rows = vec![Tensor::zeros(&[0]); t_len];
        for t in order {
            let x_t = tape.slice(seq, 0, t, 1)?;
            let (h2, c2) = lstm_cell(tape, &x_t, &h, &c, p)?;
            rows[t] = h2.clone();
            h = h2;
            c = c2;
        }
        Ok(rows)
    };
    let fwd = step(p_fwd, &mut (0..t_len))?;
    let bwd = step(p_bwd, &mut (0..t_len).rev())?;
    let combined = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat(&[f, b], 1))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = combined.iter().collect();
    tape.concat(&refs, 0)
}

/// Final-row BiLSTM state for a batch [B x T x d_x]: [fwd h_T ; bwd h_T].
/// Computes only what that row needs (the full forward chain, but a single
/// backward step on x_T) and matches `bilstm_forward`'s last row bitwise.
pub fn bilstm_last(
    tape: &Tape,
    seq: &Tensor,
    p_fwd: &LstmCellParams,
    p_bwd: &LstmCellParams,
) -> Result<Tensor> {
    if seq.rank() != 3 || seq.shape()[1] == 0 {
        return Err(Error::argument(format!(
            "bilstm_last: want a nonempty [B x T x d_x] batch, got {:?}",
            seq.shape()
        )));
    }
    let (b, t_len, d_x) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    let take = |t: usize| -> Result<Tensor> {
        tape.reshape(&tape.slice(seq, 1, t, 1)?, &[b, d_x])
    };
    let mut h = Tensor::zeros(&[b, p_fwd.hidden]);
    let mut c = Tensor::zeros(&[b, p_fwd.hidden]);
    for t in 0..t_len {
        let (h2, c2) = lstm_cell(tape, &take(t)?, &h, &c, p_fwd)?;
        h = h2;
        c = c2;
    }
    let zero = Tensor::zeros(&[b, p_bwd.hidden]);
    let (h_bwd, _) = lstm_cell(tape, &take(t_len - 1)?, &zero, &zero, p_bwd)?;
    tape.concat(&[&h, &h_bwd], 1)
}

/// Linear head on the final time-step row of a [T x 2*hidden] state matrix.
pub fn bilstm_head(tape: &Tape, h: &Tensor, p: &LinearParams) -> Result<Tensor> {
    if h.rank() != 2 || h.shape()[0] == 0 {
        return Err(Error::argument(format!(
            "bilstm_head: want a nonempty [T x d] matrix, got {:?}",
            h.shape()
        )));
    }
    let last = tape.slice(h, 0, h.shape()[0] - 1, 1)?;
    let out = linear(tape, &last, p)?;
    tape.reshape(&out, &[p.out_dim()])
}

// ---- positional encoding ----

/// [T x d_m] sinusoid table: row t, column 2k is sin(t / base^(2k/d_m)),
/// column 2k+1 the cosine. Time index is 0-based over the window.
pub fn positional_encoding(t_len: usize, d_m: usize) -> Result<Tensor> {
    if !d_m.is_multiple_of(2) {
        return Err(Error::argument(format!(
            "positional_encoding: d_m must be even, got {d_m}"
        )));
    }
    let mut table = vec![0.0; t_len * d_m];
    for t in 0..t_len {
        for k in 0..d_m / 2 {
            let freq = PE_BASE.powf(2.0 * k as f64 / d_m as f64);
            let angle = t as f64 / freq;
            table[t * d_m + 2 * k] = angle.sin();
            table[t * d_m + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::new(&[t_len, d_m], table)
}

/// Precomputed positional-encoding table.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub table: Tensor,
}

impl PositionalEncoding {
    pub fn new(t_len: usize, d_m: usize) -> Result<Self> {
        Ok(Self {
            table: positional_encoding(t_len, d_m)?,
        })
    }
}

// ---- transformer encoder ----

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    /// Attention projections, each [d_m x d_m] (all heads fused; head h owns
    /// columns h*head_dim..(h+1)*head_dim of the projected output).
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub n_heads: usize,
}

impl EncoderLayerParams {
    pub fn init<R: Rng>(d_m: usize, n_heads: usize, ffn_dim: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || !d_m.is_multiple_of(n_heads) {
            return Err(Error::argument(format!(
                "encoder layer: d_m {d_m} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            w_q: uniform_fan_in(&[d_m, d_m], d_m, rng),
            w_k: uniform_fan_in(&[d_m, d_m], d_m, rng),
            w_v: uniform_fan_in(&[d_m, d_m], d_m, rng),
            w_o: uniform_fan_in(&[d_m, d_m], d_m, rng),
            ffn1: LinearParams::init(d_m, ffn_dim, rng),
            ffn2: LinearParams::init(ffn_dim, d_m, rng),
            ln1_gain: Tensor::full(&[d_m], 1.0),
            ln1_bias: Tensor::zeros(&[d_m]),
            ln2_gain: Tensor::full(&[d_m], 1.0),
            ln2_bias: Tensor::zeros(&[d_m]),
            n_heads,
        })
    }

    pub fn d_m(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        p.extend(self.ffn1.params());
        p.extend(self.ffn2.params());
        p.extend([&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o];
        p.extend(self.ffn1.params_mut());
        p.extend(self.ffn2.params_mut());
        p.extend([
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        p
    }
}

/// Scaled dot-product self-attention over all positions (bidirectional, no
/// mask): per head softmax(Q K^T / sqrt(head_dim)) V, heads concatenated and
/// projected by w_o. Accepts [T x d_m] or [B x T x d_m].
pub fn multi_head_attention(tape: &Tape, z: &Tensor, p: &EncoderLayerParams) -> Result<Tensor> {
    if z.rank() == 2 {
        let lifted = tape.reshape(z, &[1, z.shape()[0], z.shape()[1]])?;
        let out = multi_head_attention(tape, &lifted, p)?;
        return tape.reshape(&out, z.shape());
    }
    if z.rank() != 3 || z.shape()[2] != p.d_m() {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: z.shape().to_vec(),
            rhs: p.w_q.shape().to_vec(),
        });
    }
    let (b, t_len, d_m) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let heads = p.n_heads;
    let dh = d_m / heads;
    let split = |x: &Tensor| -> Result<Tensor> {
        // [B,T,d_m] -> [B,heads,T,dh]
        tape.permute(&tape.reshape(x, &[b, t_len, heads, dh])?, &[0, 2, 1, 3])
    };
    let q = split(&tape.matmul_nt(z, &p.w_q)?)?;
    let k = split(&tape.matmul_nt(z, &p.w_k)?)?;
    let v = split(&tape.matmul_nt(z, &p.w_v)?)?;
    let scores = tape.scale(&tape.bmm_nt(&q, &k)?, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(&scores)?;
    let ctx = tape.bmm(&attn, &v)?;
    let merged = tape.reshape(&tape.permute(&ctx, &[0, 2, 1, 3])?, &[b, t_len, d_m])?;
    tape.matmul_nt(&merged, &p.w_o)
}

/// Post-norm encoder layer:
/// z1 = LN(z + Dropout(MHA(z))); out = LN(z1 + Dropout(FFN(z1))),
/// FFN = linear -> ReLU -> linear.
pub fn encoder_layer<R: Rng>(
    tape: &Tape,
    z: &Tensor,
    p: &EncoderLayerParams,
    dropout_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let attn = multi_head_attention(tape, z, p)?;
    let attn = tape.dropout(&attn, dropout_p, mode.is_train(), rng)?;
    let z1 = tape.layer_norm(&tape.add(z, &attn)?, &p.ln1_gain, &p.ln1_bias, LN_EPS)?;
    let ffn = linear(tape, &tape.relu(&linear(tape, &z1, &p.ffn1)?)?, &p.ffn2)?;
    let ffn = tape.dropout(&ffn, dropout_p, mode.is_train(), rng)?;
    tape.layer_norm(&tape.add(&z1, &ffn)?, &p.ln2_gain, &p.ln2_bias, LN_EPS)
}
