//! Binary cross-entropy loss of a gate against soft targets and its analytic
//! reverse-mode gradient through every parameter tensor.

use super::forward::{attn_token, check_width, linear_token, mlp_token, sigmoid};
use super::{GateGrads, GateParams, GateVariant};
use crate::error::{Error, Result};
use crate::metrics::{bce_term, bce_term_grad};

/// Backward pass of `y = gamma * x / rms(x)` for one slot of width `dl`.
/// Accumulates into `dgamma` and returns `dx`.
fn rms_backward(dy: &[f64], u: &[f64], rms: f64, gamma: &[f64], dgamma: &mut [f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let du: Vec<f64> = dy.iter().zip(gamma).map(|(d, g)| d * g).collect();
    for ((dg, d), ui) in dgamma.iter_mut().zip(dy).zip(u) {
        *dg += d * ui;
    }
    let mean_du_u = du.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / n;
    du.iter()
        .zip(u)
        .map(|(d, ui)| (d - ui * mean_du_u) / rms)
        .collect()
}

/// `dW += dy (x) x` for a row-major `dy.len() x x.len()` matrix.
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    for (row, d) in dw.chunks_exact_mut(x.len()).zip(dy) {
        if *d == 0.0 {
            continue;
        }
        for (w, xi) in row.iter_mut().zip(x) {
            *w += d * xi;
        }
    }
}

fn attn_backward(params: &GateParams, x: &[f64], ds: &[f64], grads: &mut GateGrads) {
    let cfg = &params.config;
    let (h_n, g_n, dl, s_n) = (cfg.n_kv_heads, cfg.group_size, cfg.d_low, cfg.n_sinks);
    let t = &params.tensors;
    let tr = attn_token(params, x);
    let with_sinks = cfg.variant == GateVariant::SinkAttention;

    let mut dk = vec![0.0; h_n * dl];
    let mut dq = vec![0.0; g_n * h_n * dl];
    for j in 0..g_n {
        for h in 0..h_n {
            let slot = j * h_n + h;
            let f = tr.frac[slot];
            let df = ds[h] / g_n as f64;
            let de = df * f * (1.0 - f);
            let qv = &tr.q[slot * dl..(slot + 1) * dl];
            let kv = &tr.k[h * dl..(h + 1) * dl];
            for d in 0..dl {
                dq[slot * dl + d] += de * kv[d];
                dk[h * dl + d] += de * qv[d];
            }
            if with_sinks {
                for r in 0..s_n {
                    let dc = -df * f * tr.sink_probs[slot][r];
                    let base = (r * h_n + h) * dl;
                    for d in 0..dl {
                        dq[slot * dl + d] += dc * t[4].data[base + d];
                        grads[4][base + d] += dc * qv[d];
                    }
                }
                // f = N / (N + C + b), b = softplus(beta)
                let db = -df * f * tr.inv_z[slot];
                grads[5][slot] += db * sigmoid(t[5].data[slot]);
            }
        }
    }

    let backprop_slots = |dy: &[f64], u: &[f64], rms: &[f64], gamma_idx: usize, grads: &mut GateGrads| {
        let mut dx = Vec::with_capacity(dy.len());
        for (s, r) in rms.iter().enumerate() {
            let range = s * dl..(s + 1) * dl;
            let grange = if cfg.shared_norm { 0..dl } else { range.clone() };
            let gamma = &t[gamma_idx].data[grange.clone()];
            let dxs = rms_backward(&dy[range.clone()], &u[range], *r, gamma, &mut grads[gamma_idx][grange]);
            dx.extend(dxs);
        }
        dx
    };
    let dk_raw = backprop_slots(&dk, &tr.k_u, &tr.k_rms, 2, grads);
    let dq_raw = backprop_slots(&dq, &tr.q_u, &tr.q_rms, 3, grads);
    outer_acc(&mut grads[0], &dk_raw, x);
    outer_acc(&mut grads[1], &dq_raw, x);
}

fn mlp_backward(params: &GateParams, x: &[f64], ds: &[f64], grads: &mut GateGrads) {
    let t = &params.tensors;
    let tr = mlp_token(params, x);
    let f = tr.z.len();
    let d_out: Vec<f64> = ds
        .iter()
        .zip(&tr.scores)
        .map(|(d, s)| d * s * (1.0 - s))
        .collect();
    outer_acc(&mut grads[2], &d_out, &tr.z);
    for (g, d) in grads[3].iter_mut().zip(&d_out) {
        *g += d;
    }
    let mut dz = vec![0.0; f];
    for (h, d) in d_out.iter().enumerate() {
        for (i, dzi) in dz.iter_mut().enumerate() {
            *dzi += d * t[2].data[h * f + i];
        }
    }
    let mut dgate = vec![0.0; f];
    let mut dup = vec![0.0; f];
    for i in 0..f {
        let g = tr.gate[i];
        let sg = sigmoid(g);
        dup[i] = dz[i] * g * sg;
        dgate[i] = dz[i] * tr.up[i] * sg * (1.0 + g * (1.0 - sg));
    }
    outer_acc(&mut grads[0], &dgate, x);
    outer_acc(&mut grads[1], &dup, x);
}

fn linear_backward(params: &GateParams, x: &[f64], ds: &[f64], grads: &mut GateGrads) {
    let s = linear_token(params, x);
    let d_out: Vec<f64> = ds.iter().zip(&s).map(|(d, s)| d * s * (1.0 - s)).collect();
    outer_acc(&mut grads[0], &d_out, x);
    for (g, d) in grads[1].iter_mut().zip(&d_out) {
        *g += d;
    }
}

/// Mean soft-label BCE over all `(token, head)` pairs of the batch, with
/// scores clamped to `[1e-7, 1 - 1e-7]`, plus gradients for every tensor.
///
/// `hiddens` is `T x D`, `targets` is `T x H` with values in `[0, 1]`.
pub fn gate_loss_and_grad(
    params: &GateParams,
    hiddens: &[f32],
    targets: &[f32],
) -> Result<(f64, GateGrads)> {
    let cfg = &params.config;
    let t_n = check_width(cfg, hiddens.len())?;
    let h_n = cfg.n_kv_heads;
    if targets.len() != t_n * h_n {
        return Err(Error::Shape(format!(
            "{} targets for {t_n} tokens x {h_n} heads",
            targets.len()
        )));
    }
    if t_n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if hiddens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite hidden state in batch".into()));
    }
    if targets.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("targets must lie in [0, 1]".into()));
    }
    if !params.is_finite() {
        return Err(Error::Numeric("non-finite gate parameter".into()));
    }

    let norm = 1.0 / (t_n * h_n) as f64;
    let mut loss = 0.0;
    let mut grads = params.zero_grads();
    for (row, tgt) in hiddens.chunks_exact(cfg.d_model).zip(targets.chunks_exact(h_n)) {
        let x: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        let scores = super::forward::token_scores(params, &x);
        let mut ds = vec![0.0; h_n];
        for h in 0..h_n {
            let t = f64::from(tgt[h]);
            loss += bce_term(scores[h], t) * norm;
            ds[h] = bce_term_grad(scores[h], t) * norm;
        }
        match cfg.variant {
            GateVariant::SinkAttention | GateVariant::NoDenominator => {
                attn_backward(params, &x, &ds, &mut grads)
            }
            GateVariant::Mlp => mlp_backward(params, &x, &ds, &mut grads),
            GateVariant::Linear => linear_backward(params, &x, &ds, &mut grads),
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {loss}")));
    }
    Ok((loss, grads))
}
