use crate::autodiff::{DropoutKey, Graph, ParamSet, Tensor, Var};
use crate::tokenizer::TokenSequence;

use super::{Architecture, EncoderConfig, LstmConfig, ModelError};

/// Additive pre-softmax score given to padded key positions.
pub const ATTENTION_MASK_VALUE: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dropout layer id of the classifier head.
const HEAD_DROPOUT_LAYER: u64 = 0;

/// Whether dropout is active. Training mode carries the dropout seed and
/// the global optimiser step so every mask is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

/// Looks parameters up by name among the graph leaves bound from a
/// [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct Weights<'a> {
    params: &'a ParamSet,
    vars: &'a [Var],
}

impl<'a> Weights<'a> {
    pub fn new(params: &'a ParamSet, vars: &'a [Var]) -> Self {
        Self { params, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .position(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

/// A rectangular batch of token ids with its padding mask, row-major
/// `[batch, len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Stacks equal-length sequences. With `trim`, trailing columns that
    /// are padding in every row are dropped; masked positions never affect
    /// the output, so this changes nothing but cost.
    pub fn from_sequences(
        seqs: &[TokenSequence],
        vocab_size: usize,
        trim: bool,
    ) -> Result<Self, ModelError> {
        let first = seqs
            .first()
            .ok_or_else(|| ModelError::Batch("empty batch".into()))?;
        let max_len = first.max_len();
        for (i, s) in seqs.iter().enumerate() {
            if s.max_len() != max_len || s.mask.len() != max_len {
                return Err(ModelError::Batch(format!(
                    "sequence {i} has length {}, expected {max_len}",
                    s.max_len()
                )));
            }
            if s.true_length == 0 || s.true_length > max_len {
                return Err(ModelError::Batch(format!(
                    "sequence {i} has true_length {}",
                    s.true_length
                )));
            }
            if let Some(&id) = s.ids.iter().find(|&&id| id >= vocab_size) {
                return Err(ModelError::TokenOutOfRange { id, vocab_size });
            }
        }
        let len = if trim {
            seqs.iter().map(|s| s.true_length).max().unwrap_or(1)
        } else {
            max_len
        };
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(&s.ids[..len]);
            mask.extend((0..len).map(|t| u8::from(t < s.true_length)));
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        })
    }

    fn valid(&self, b: usize, t: usize) -> bool {
        self.mask[b * self.len + t] != 0
    }
}

/// Encoder output plus the per-layer attention weights `[batch*heads, T, T]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    pub attention: Vec<Var>,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// `[B, T, d] -> [B*H, T, d/H]`.
fn split_heads(g: &mut Graph, x: Var, b: usize, t: usize, h: usize, dh: usize) -> Result<Var, ModelError> {
    let x = g.reshape(x, &[b, t, h, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[b * h, t, dh])?)
}

/// Token plus position embeddings followed by pre-norm encoder blocks.
pub fn encoder_forward(
    g: &mut Graph,
    w: &Weights,
    cfg: &EncoderConfig,
    batch: &Batch,
) -> Result<EncoderOutput, ModelError> {
    let (b, t, d) = (batch.batch, batch.len, cfg.d_model);
    if t > cfg.max_len {
        return Err(ModelError::Batch(format!(
            "sequence length {t} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(&id) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let tokens = g.embedding(w.get("embed.token")?, &batch.ids)?;
    let tokens = g.reshape(tokens, &[b, t, d])?;
    let positions = g.slice_rows(w.get("embed.position")?, 0, t)?;
    let mut x = g.add(tokens, positions)?;

    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let mut mask = Vec::with_capacity(b * heads * t * t);
    for bi in 0..b {
        let row: Vec<f64> = (0..t)
            .map(|k| if batch.valid(bi, k) { 0.0 } else { ATTENTION_MASK_VALUE })
            .collect();
        for _ in 0..heads * t {
            mask.extend_from_slice(&row);
        }
    }
    let mask = g.constant(Tensor::new(vec![b * heads, t, t], mask)?);

    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| w.get(&format!("enc.{l}.{s}"));
        let h = g.layer_norm(x, p("ln1.gain")?, p("ln1.bias")?, LAYER_NORM_EPS)?;
        let q = linear(g, h, p("attn.wq")?, p("attn.bq")?)?;
        let k = linear(g, h, p("attn.wk")?, p("attn.bk")?)?;
        let v = linear(g, h, p("attn.wv")?, p("attn.bv")?)?;
        let q = split_heads(g, q, b, t, heads, dh)?;
        let k = split_heads(g, k, b, t, heads, dh)?;
        let v = split_heads(g, v, b, t, heads, dh)?;
        let kt = g.transpose_last(k)?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add(scores, mask)?;
        let weights = g.softmax(scores, 2)?;
        attention.push(weights);
        let ctx = g.batch_matmul(weights, v)?;
        let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let out = linear(g, ctx, p("attn.wo")?, p("attn.bo")?)?;
        x = g.add(x, out)?;

        let h = g.layer_norm(x, p("ln2.gain")?, p("ln2.bias")?, LAYER_NORM_EPS)?;
        let f = linear(g, h, p("ff.w1")?, p("ff.b1")?)?;
        let f = g.gelu(f)?;
        let f = linear(g, f, p("ff.w2")?, p("ff.b2")?)?;
        x = g.add(x, f)?;
    }
    Ok(EncoderOutput {
        states: x,
        attention,
    })
}

/// Runs stacked LSTM layers over `states` `[B, T, input]` and returns the
/// hidden state at each sequence's last valid position, `[B, hidden]`.
/// Masked steps carry `h` and `c` forward unchanged.
pub fn lstm_forward(
    g: &mut Graph,
    w: &Weights,
    cfg: &LstmConfig,
    states: Var,
    batch: &Batch,
) -> Result<Var, ModelError> {
    let shape = g.shape(states).to_vec();
    let (b, t) = (batch.batch, batch.len);
    if shape != [b, t, cfg.input_size] {
        return Err(ModelError::Batch(format!(
            "LSTM input has shape {shape:?}, expected {:?}",
            [b, t, cfg.input_size]
        )));
    }
    let hs = cfg.hidden_size;
    let keep: Vec<(Var, Var)> = (0..t)
        .map(|step| {
            let (mut m, mut inv) = (Vec::with_capacity(b * hs), Vec::with_capacity(b * hs));
            for bi in 0..b {
                let on = if batch.valid(bi, step) { 1.0 } else { 0.0 };
                m.extend(std::iter::repeat_n(on, hs));
                inv.extend(std::iter::repeat_n(1.0 - on, hs));
            }
            let m = g.constant(Tensor::new(vec![b, hs], m)?);
            let inv = g.constant(Tensor::new(vec![b, hs], inv)?);
            Ok((m, inv))
        })
        .collect::<Result<_, ModelError>>()?;

    // Time-major input so each step is a contiguous row block.
    let mut seq = g.permute(states, &[1, 0, 2])?;
    let mut h = g.constant(Tensor::zeros(&[b, hs]));
    for l in 0..cfg.n_layers {
        let p = |s: &str| w.get(&format!("lstm.{l}.{s}"));
        let mut proj = Vec::with_capacity(4);
        let mut recur = Vec::with_capacity(4);
        for gate in ["i", "f", "g", "o"] {
            proj.push(linear(g, seq, p(&format!("w_{gate}"))?, p(&format!("b_{gate}"))?)?);
            recur.push(p(&format!("u_{gate}"))?);
        }
        h = g.constant(Tensor::zeros(&[b, hs]));
        let mut c = g.constant(Tensor::zeros(&[b, hs]));
        let mut outputs = Vec::with_capacity(t);
        for (step, &(m, inv)) in keep.iter().enumerate() {
            let mut pre = [h; 4];
            for (k, slot) in pre.iter_mut().enumerate() {
                let x = g.slice_rows(proj[k], step, step + 1)?;
                let x = g.reshape(x, &[b, hs])?;
                let r = g.matmul(h, recur[k])?;
                *slot = g.add(x, r)?;
            }
            let i = g.sigmoid(pre[0])?;
            let f = g.sigmoid(pre[1])?;
            let cand = g.tanh(pre[2])?;
            let o = g.sigmoid(pre[3])?;
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, cand)?;
            let c_new = g.add(fc, ig)?;
            let tc = g.tanh(c_new)?;
            let h_new = g.mul(o, tc)?;
            c = carry(g, c_new, c, m, inv)?;
            h = carry(g, h_new, h, m, inv)?;
            if l + 1 < cfg.n_layers {
                outputs.push(g.reshape(h, &[1, b, hs])?);
            }
        }
        if l + 1 < cfg.n_layers {
            seq = g.concat(&outputs, 0)?;
        }
    }
    Ok(h)
}

/// `m * new + (1 - m) * prev`.
fn carry(g: &mut Graph, new: Var, prev: Var, m: Var, inv: Var) -> Result<Var, ModelError> {
    let a = g.mul(new, m)?;
    let b = g.mul(prev, inv)?;
    Ok(g.add(a, b)?)
}

/// Full classifier: encoder, LSTM, dropout, linear head, softmax.
pub fn classify_graph(
    g: &mut Graph,
    w: &Weights,
    arch: &Architecture,
    batch: &Batch,
    mode: Mode,
) -> Result<Var, ModelError> {
    let enc = encoder_forward(g, w, &arch.encoder, batch)?;
    let h = lstm_forward(g, w, &arch.lstm, enc.states, batch)?;
    let (key, train) = match mode {
        Mode::Eval => (DropoutKey { seed: 0, layer: HEAD_DROPOUT_LAYER, step: 0 }, false),
        Mode::Train { seed, step } => (DropoutKey { seed, layer: HEAD_DROPOUT_LAYER, step }, true),
    };
    let h = g.dropout(h, arch.encoder.dropout_rate, key, train)?;
    let logits = linear(g, h, w.get("head.weight")?, w.get("head.bias")?)?;
    Ok(g.softmax(logits, 1)?)
}
