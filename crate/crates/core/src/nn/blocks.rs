use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

use super::{ModelConfig, Params, LAYER_NORM_EPS, LSTM_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    /// Value half then gate half.
    Glu,
    /// Input, scale, shift.
    LayerNorm,
}

pub fn activation(g: &mut Graph, kind: Activation, inputs: &[Var]) -> Result<Var> {
    let arity = match kind {
        Activation::Elu => 1,
        Activation::Glu => 2,
        Activation::LayerNorm => 3,
    };
    if inputs.len() != arity {
        return Err(Error::ShapeMismatch(format!(
            "{kind:?} takes {arity} inputs, got {}",
            inputs.len()
        )));
    }
    match kind {
        Activation::Elu => g.elu(inputs[0]),
        Activation::Glu => {
            if g.shape(inputs[0]) != g.shape(inputs[1]) {
                return Err(Error::ShapeMismatch(format!(
                    "glu halves {:?} and {:?}",
                    g.shape(inputs[0]),
                    g.shape(inputs[1])
                )));
            }
            let s = g.sigmoid(inputs[1])?;
            g.mul(inputs[0], s)
        }
        Activation::LayerNorm => g.layer_norm(inputs[0], inputs[1], inputs[2], LAYER_NORM_EPS),
    }
}

/// `x · w + b` over the last axis.
pub(super) fn dense(g: &mut Graph, p: &Params, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Three affine layers with ELU between, squeezing the trailing unit axis.
fn bottleneck(g: &mut Graph, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let y = dense(g, p, &format!("{prefix}.fc1"), x)?;
    let y = g.elu(y)?;
    let y = dense(g, p, &format!("{prefix}.fc2"), y)?;
    let y = g.elu(y)?;
    let y = dense(g, p, &format!("{prefix}.fc3"), y)?;
    let mut shape = g.shape(y).to_vec();
    shape.pop();
    g.reshape(y, &shape)
}

/// One LSTM cell update on `x[B, in]`, `h[B, H]`, `c[B, H]`, built from
/// primitive ops. Gate order is (input, forget, candidate, output).
pub fn lstm_step(
    g: &mut Graph,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let hid = g.shape(h)[g.shape(h).len() - 1];
    if g.shape(w_hh) != [hid, 4 * hid] || g.shape(c) != g.shape(h) {
        return Err(Error::ShapeMismatch(format!(
            "lstm_step: h {:?}, c {:?}, w_hh {:?}",
            g.shape(h),
            g.shape(c),
            g.shape(w_hh)
        )));
    }
    let zx = g.matmul(x, w_ih)?;
    let zh = g.matmul(h, w_hh)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, bias)?;
    let axis = g.shape(z).len() - 1;
    let gate = |g: &mut Graph, k: usize| g.slice(z, axis, k * hid, (k + 1) * hid);
    let i = gate(g, 0)?;
    let i = g.sigmoid(i)?;
    let f = gate(g, 1)?;
    let f = g.sigmoid(f)?;
    let cand = gate(g, 2)?;
    let cand = g.tanh(cand)?;
    let o = gate(g, 3)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_next = g.add(fc, ig)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

pub struct Encoded {
    /// `[B, T, 3H]`, propofol, remifentanil and pseudo-BIS states in that order.
    pub states: Var,
    /// `[B, T]` corrected pseudo-BIS history.
    pub corrected: Var,
    /// `[B, 3H]` last hidden state of each LSTM.
    pub last: Var,
}

/// Runs the three LSTMs over `[B, T, 1]` inputs and the history bottleneck.
pub fn encoder_forward(g: &mut Graph, p: &Params, ppf: Var, rftn: Var, pseudo: Var) -> Result<Encoded> {
    let mut seqs = Vec::with_capacity(3);
    let mut lasts = Vec::with_capacity(3);
    for (name, x) in LSTM_NAMES.iter().zip([ppf, rftn, pseudo]) {
        let w_ih = p.get(&format!("{name}.w_ih"))?;
        let w_hh = p.get(&format!("{name}.w_hh"))?;
        let bias = p.get(&format!("{name}.bias"))?;
        let hs = g.lstm(x, w_ih, w_hh, bias)?;
        let s = g.shape(hs).to_vec();
        let last = g.slice(hs, 1, s[1] - 1, s[1])?;
        lasts.push(g.reshape(last, &[s[0], s[2]])?);
        seqs.push(hs);
    }
    let states = g.concat(&seqs, 2)?;
    let last = g.concat(&lasts, 1)?;
    let corrected = bottleneck(g, p, "enc", states)?;
    Ok(Encoded { states, corrected, last })
}

/// Gated residual network on `a[B, T, G]` with static context `c[B, S]`.
pub fn grn_forward(g: &mut Graph, p: &Params, a: Var, c: Var) -> Result<Var> {
    let sa = g.shape(a).to_vec();
    let sc = g.shape(c).to_vec();
    if sa.len() != 3 || sc.len() != 2 || sc[0] != sa[0] {
        return Err(Error::ShapeMismatch(format!("grn: a {sa:?}, c {sc:?}")));
    }
    let ctx = g.matmul(c, p.get("grn.fc_c.w")?)?;
    let ctx = g.broadcast(ctx, 1, sa[1])?;
    let eta1 = dense(g, p, "grn.fc_a", a)?;
    let eta1 = g.add(eta1, ctx)?;
    let eta2 = g.elu(eta1)?;
    let eta3 = dense(g, p, "grn.fc2", eta2)?;
    let value = dense(g, p, "grn.value", eta3)?;
    let gate = dense(g, p, "grn.gate", eta3)?;
    let gated = activation(g, Activation::Glu, &[value, gate])?;
    let sum = g.add(a, gated)?;
    let gamma = p.get("grn.ln.gamma")?;
    let beta = p.get("grn.ln.beta")?;
    activation(g, Activation::LayerNorm, &[sum, gamma, beta])
}

pub struct Attention {
    /// `[B, T, G]`.
    pub output: Var,
    /// Head-averaged weights `[B, T, T]`.
    pub weights: Var,
}

fn head_scores(g: &mut Graph, p: &Params, q_in: Var, z: Var, head: usize, d: usize) -> Result<Var> {
    let q = g.matmul(q_in, p.get(&format!("attn.q{head}"))?)?;
    let k = g.matmul(z, p.get(&format!("attn.k{head}"))?)?;
    let kt = g.transpose(k)?;
    let s = g.bmm(q, kt)?;
    g.scale(s, 1.0 / (d as f64).sqrt())
}

fn averaged_weights(
    g: &mut Graph,
    p: &Params,
    q_in: Var,
    z: Var,
    heads: usize,
    d: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for head in 0..heads {
        let mut s = head_scores(g, p, q_in, z, head, d)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let w = g.softmax(s, 2)?;
        acc = Some(match acc {
            None => w,
            Some(a) => g.add(a, w)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
    g.scale(sum, 1.0 / heads as f64)
}

fn check_attention_input(g: &Graph, cfg: &ModelConfig, z: Var) -> Result<Vec<usize>> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 || s[2] != cfg.grn_hidden || s[1] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "attention input {s:?} for width {}",
            cfg.grn_hidden
        )));
    }
    Ok(s)
}

/// Causal interpretable multi-head attention over every step of `z[B, T, G]`.
pub fn interpretable_attention(g: &mut Graph, p: &Params, cfg: &ModelConfig, z: Var) -> Result<Attention> {
    let s = check_attention_input(g, cfg, z)?;
    let t = s[1];
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            mask[i * t + j] = -1e30;
        }
    }
    let mask = g.constant(Array::new(vec![t, t], mask)?);
    let weights = averaged_weights(g, p, z, z, cfg.num_heads, cfg.d_attn(), Some(mask))?;
    let v = g.matmul(z, p.get("attn.v")?)?;
    let h = g.bmm(weights, v)?;
    let output = g.matmul(h, p.get("attn.out")?)?;
    Ok(Attention { output, weights })
}

/// Last row of [`interpretable_attention`], `[B, G]`. The last step sees the
/// whole window, so no mask is needed.
pub fn attention_last(g: &mut Graph, p: &Params, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let s = check_attention_input(g, cfg, z)?;
    let q_in = g.slice(z, 1, s[1] - 1, s[1])?;
    let weights = averaged_weights(g, p, q_in, z, cfg.num_heads, cfg.d_attn(), None)?;
    let v = g.matmul(z, p.get("attn.v")?)?;
    let h = g.bmm(weights, v)?;
    let out = g.matmul(h, p.get("attn.out")?)?;
    g.reshape(out, &[s[0], s[2]])
}

pub struct ForwardOutput {
    /// `[B]` normalized predictions.
    pub pred: Var,
    /// `[B, T]` normalized corrected history.
    pub corrected: Var,
}

/// Full network on attached inputs `(ppf, rftn, pseudo, statics)`.
pub fn model_forward(g: &mut Graph, p: &Params, cfg: &ModelConfig, inputs: [Var; 4]) -> Result<ForwardOutput> {
    let [ppf, rftn, pseudo, statics] = inputs;
    let enc = encoder_forward(g, p, ppf, rftn, pseudo)?;
    let a = dense(g, p, "proj", enc.states)?;
    let fused = grn_forward(g, p, a, statics)?;
    let beta = attention_last(g, p, cfg, fused)?;
    let joined = g.concat(&[beta, enc.last], 1)?;
    let pred = bottleneck(g, p, "dec", joined)?;
    Ok(ForwardOutput {
        pred,
        corrected: enc.corrected,
    })
}
