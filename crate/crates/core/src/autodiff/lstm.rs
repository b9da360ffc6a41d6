//! Fused LSTM sequence kernel with hand-written backpropagation through time.
//!
//! Recording every gate of every step as separate tape nodes costs roughly an
//! order of magnitude more memory than keeping the post-activation gates and
//! cell states of each step, which is all the backward pass needs.

use super::array::gemm;
use super::graph::sigmoid;

pub(crate) struct LstmSaved {
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
    /// Post-activation gates (i, f, g, o), time-major `[T, B, 4h]`.
    gates: Vec<f64>,
    /// Cell states, time-major `[T, B, h]`.
    cells: Vec<f64>,
    /// Hidden states, time-major `[T, B, h]`.
    hiddens: Vec<f64>,
}

pub(crate) struct LstmGrads {
    pub x: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Time-major copy of a batch-major `[B, T, d]` buffer.
fn to_time_major(src: &[f64], b: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ti in 0..t {
            out[(ti * b + bi) * d..(ti * b + bi + 1) * d]
                .copy_from_slice(&src[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
        }
    }
    out
}

fn to_batch_major(src: &[f64], b: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ti in 0..t {
        for bi in 0..b {
            out[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                .copy_from_slice(&src[(ti * b + bi) * d..(ti * b + bi + 1) * d]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward(
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
) -> (Vec<f64>, LstmSaved) {
    let g4 = 4 * hidden;
    let xt = to_time_major(x, batch, steps, input);
    // Input contribution for every step at once, bias folded in.
    let mut pre = vec![0.0; steps * batch * g4];
    for row in pre.chunks_mut(g4) {
        row.copy_from_slice(bias);
    }
    gemm(steps * batch, input, g4, &xt, false, w_ih, false, 1.0, &mut pre);

    let mut gates = pre;
    let mut cells = vec![0.0; steps * batch * hidden];
    let mut hiddens = vec![0.0; steps * batch * hidden];
    for t in 0..steps {
        let (done_h, rest_h) = hiddens.split_at_mut(t * batch * hidden);
        let z = &mut gates[t * batch * g4..(t + 1) * batch * g4];
        if t > 0 {
            let h_prev = &done_h[(t - 1) * batch * hidden..];
            gemm(batch, hidden, g4, h_prev, false, w_hh, false, 1.0, z);
        }
        let (done_c, rest_c) = cells.split_at_mut(t * batch * hidden);
        let c_now = &mut rest_c[..batch * hidden];
        let h_now = &mut rest_h[..batch * hidden];
        for b in 0..batch {
            let zr = &mut z[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[hidden + j]);
                let g = zr[2 * hidden + j].tanh();
                let o = sigmoid(zr[3 * hidden + j]);
                zr[j] = i;
                zr[hidden + j] = f;
                zr[2 * hidden + j] = g;
                zr[3 * hidden + j] = o;
                let c_prev = if t > 0 { done_c[((t - 1) * batch + b) * hidden + j] } else { 0.0 };
                let c = f * c_prev + i * g;
                c_now[b * hidden + j] = c;
                h_now[b * hidden + j] = o * c.tanh();
            }
        }
    }
    let out = to_batch_major(&hiddens, batch, steps, hidden);
    (
        out,
        LstmSaved {
            batch,
            steps,
            input,
            hidden,
            gates,
            cells,
            hiddens,
        },
    )
}

pub(crate) fn lstm_backward(
    s: &LstmSaved,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    g_out: &[f64],
) -> LstmGrads {
    let (batch, steps, input, hidden) = (s.batch, s.steps, s.input, s.hidden);
    let g4 = 4 * hidden;
    let gh = to_time_major(g_out, batch, steps, hidden);
    let mut dz = vec![0.0; steps * batch * g4];
    let mut dh_next = vec![0.0; batch * hidden];
    let mut dc_next = vec![0.0; batch * hidden];
    for t in (0..steps).rev() {
        let zt = &s.gates[t * batch * g4..(t + 1) * batch * g4];
        let dzt = &mut dz[t * batch * g4..(t + 1) * batch * g4];
        for b in 0..batch {
            for j in 0..hidden {
                let k = b * hidden + j;
                let idx = t * batch * hidden + k;
                let (i, f, g, o) = (
                    zt[b * g4 + j],
                    zt[b * g4 + hidden + j],
                    zt[b * g4 + 2 * hidden + j],
                    zt[b * g4 + 3 * hidden + j],
                );
                let c = s.cells[idx];
                let c_prev = if t > 0 { s.cells[idx - batch * hidden] } else { 0.0 };
                let tc = c.tanh();
                let dh = gh[idx] + dh_next[k];
                let d_o = dh * tc;
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dc_next[k] = dc * f;
                dzt[b * g4 + j] = dc * g * i * (1.0 - i);
                dzt[b * g4 + hidden + j] = dc * c_prev * f * (1.0 - f);
                dzt[b * g4 + 2 * hidden + j] = dc * i * (1.0 - g * g);
                dzt[b * g4 + 3 * hidden + j] = d_o * o * (1.0 - o);
            }
        }
        gemm(batch, g4, hidden, dzt, false, w_hh, true, 0.0, &mut dh_next);
    }

    // h_{t-1} stacked time-major with a zero block for t = 0.
    let mut h_prev = vec![0.0; steps * batch * hidden];
    if steps > 1 {
        h_prev[batch * hidden..].copy_from_slice(&s.hiddens[..(steps - 1) * batch * hidden]);
    }
    let rows = steps * batch;
    let mut w_hh_grad = vec![0.0; hidden * g4];
    gemm(hidden, rows, g4, &h_prev, true, &dz, false, 0.0, &mut w_hh_grad);
    let xt = to_time_major(x, batch, steps, input);
    let mut w_ih_grad = vec![0.0; input * g4];
    gemm(input, rows, g4, &xt, true, &dz, false, 0.0, &mut w_ih_grad);
    let mut bias_grad = vec![0.0; g4];
    for row in dz.chunks(g4) {
        bias_grad.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let mut gx_t = vec![0.0; rows * input];
    gemm(rows, g4, input, &dz, false, w_ih, true, 0.0, &mut gx_t);
    LstmGrads {
        x: to_batch_major(&gx_t, batch, steps, input),
        w_ih: w_ih_grad,
        w_hh: w_hh_grad,
        bias: bias_grad,
    }
}
