use super::{GateConfig, GateParams, GateVariant};
use crate::error::{Error, Result};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shifted-frame evaluation of `e^x / (e^x + sum_r e^{c_r} + b)`.
pub(crate) struct Fraction {
    pub value: f64,
    /// `e^{c_r} / Z` per sink.
    pub sink_probs: Vec<f64>,
    /// `1 / Z` (the sensitivity of the fraction to `b`, up to a factor `-f`).
    pub inv_z: f64,
}

pub(crate) fn fraction(logit: f64, sink_logits: &[f64], bias: f64) -> Fraction {
    let m = sink_logits.iter().copied().fold(logit.max(0.0), f64::max);
    let num = (logit - m).exp();
    let sinks: Vec<f64> = sink_logits.iter().map(|c| (c - m).exp()).collect();
    let em = (-m).exp();
    let z = num + sinks.iter().sum::<f64>() + bias * em;
    Fraction {
        value: num / z,
        sink_probs: sinks.iter().map(|s| s / z).collect(),
        inv_z: em / z,
    }
}

/// The sink-attention fraction for one query/head pair given its key logit,
/// sink logits and non-negative bias.
pub fn sink_attention_score(logit: f64, sink_logits: &[f64], bias: f64) -> f64 {
    fraction(logit, sink_logits, bias).value
}

/// `y = gamma * x / sqrt(mean(x^2) + eps)` over consecutive `width` slices.
/// Returns `(y, u, rms)` where `u = x / rms` per slot.
pub(crate) fn rms_slots(
    x: &[f64],
    gamma: &[f64],
    width: usize,
    shared: bool,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let slots = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut u = vec![0.0; x.len()];
    let mut rms = vec![0.0; slots];
    for s in 0..slots {
        let xs = &x[s * width..(s + 1) * width];
        let r = (xs.iter().map(|v| v * v).sum::<f64>() / width as f64 + eps).sqrt();
        rms[s] = r;
        for d in 0..width {
            let g = if shared { gamma[d] } else { gamma[s * width + d] };
            u[s * width + d] = xs[d] / r;
            y[s * width + d] = g * xs[d] / r;
        }
    }
    (y, u, rms)
}

pub(crate) fn project(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Intermediate values of the attention-style variants for one token.
pub(crate) struct AttnTrace {
    pub k_u: Vec<f64>,
    pub k_rms: Vec<f64>,
    pub k: Vec<f64>,
    pub q_u: Vec<f64>,
    pub q_rms: Vec<f64>,
    pub q: Vec<f64>,
    /// Per `(j, h)` slot, index `j*H + h`.
    pub frac: Vec<f64>,
    pub sink_probs: Vec<Vec<f64>>,
    pub inv_z: Vec<f64>,
    pub scores: Vec<f64>,
}

pub(crate) fn attn_token(params: &GateParams, x: &[f64]) -> AttnTrace {
    let cfg = &params.config;
    let (h_n, g_n, dl) = (cfg.n_kv_heads, cfg.group_size, cfg.d_low);
    let t = &params.tensors;
    let (k, k_u, k_rms) = rms_slots(&project(&t[0].data, x), &t[2].data, dl, cfg.shared_norm, cfg.norm_eps);
    let (q, q_u, q_rms) = rms_slots(&project(&t[1].data, x), &t[3].data, dl, cfg.shared_norm, cfg.norm_eps);
    let with_sinks = cfg.variant == GateVariant::SinkAttention;

    let mut frac = vec![0.0; g_n * h_n];
    let mut sink_probs = vec![Vec::new(); g_n * h_n];
    let mut inv_z = vec![0.0; g_n * h_n];
    let mut scores = vec![0.0; h_n];
    for j in 0..g_n {
        for h in 0..h_n {
            let slot = j * h_n + h;
            let qv = &q[slot * dl..(slot + 1) * dl];
            let kv = &k[h * dl..(h + 1) * dl];
            let e: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
            let f = if with_sinks {
                let ks = &t[4].data;
                let c: Vec<f64> = (0..cfg.n_sinks)
                    .map(|r| {
                        let sk = &ks[(r * h_n + h) * dl..(r * h_n + h + 1) * dl];
                        qv.iter().zip(sk).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let fr = fraction(e, &c, softplus(t[5].data[slot]));
                sink_probs[slot] = fr.sink_probs;
                inv_z[slot] = fr.inv_z;
                fr.value
            } else {
                sigmoid(e)
            };
            frac[slot] = f;
            scores[h] += f / g_n as f64;
        }
    }
    AttnTrace {
        k_u,
        k_rms,
        k,
        q_u,
        q_rms,
        q,
        frac,
        sink_probs,
        inv_z,
        scores,
    }
}

pub(crate) struct MlpTrace {
    pub gate: Vec<f64>,
    pub up: Vec<f64>,
    pub z: Vec<f64>,
    pub scores: Vec<f64>,
}

pub(crate) fn mlp_token(params: &GateParams, x: &[f64]) -> MlpTrace {
    let t = &params.tensors;
    let gate = project(&t[0].data, x);
    let up = project(&t[1].data, x);
    let z: Vec<f64> = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g * sigmoid(*g) * u)
        .collect();
    let scores = project(&t[2].data, &z)
        .iter()
        .zip(&t[3].data)
        .map(|(o, b)| sigmoid(o + b))
        .collect();
    MlpTrace {
        gate,
        up,
        z,
        scores,
    }
}

pub(crate) fn linear_token(params: &GateParams, x: &[f64]) -> Vec<f64> {
    let t = &params.tensors;
    project(&t[0].data, x)
        .iter()
        .zip(&t[1].data)
        .map(|(o, b)| sigmoid(o + b))
        .collect()
}

pub(crate) fn token_scores(params: &GateParams, x: &[f64]) -> Vec<f64> {
    match params.config.variant {
        GateVariant::SinkAttention | GateVariant::NoDenominator => attn_token(params, x).scores,
        GateVariant::Mlp => mlp_token(params, x).scores,
        GateVariant::Linear => linear_token(params, x),
    }
}

pub(crate) fn check_width(cfg: &GateConfig, len: usize) -> Result<usize> {
    if !len.is_multiple_of(cfg.d_model) {
        return Err(Error::Shape(format!(
            "hidden buffer of {len} floats is not a multiple of d_model = {}",
            cfg.d_model
        )));
    }
    Ok(len / cfg.d_model)
}

/// Scores a `T x D` block of hidden states, returning `T x H` values in `(0, 1)`.
/// Rows are scored independently.
pub fn gate_forward(hiddens: &[f32], params: &GateParams) -> Result<Vec<f64>> {
    let d = params.config.d_model;
    check_width(&params.config, hiddens.len())?;
    let mut out = Vec::with_capacity(hiddens.len() / d * params.config.n_kv_heads);
    for row in hiddens.chunks_exact(d) {
        let x: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        out.extend(token_scores(params, &x));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{init_gate, GateConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hiddens(t: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t * d).map(|_| rng.random_range(-2.0f32..2.0)).collect()
    }

    #[test]
    fn zero_logits_sixteen_sinks_no_bias() {
        let s = sink_attention_score(0.0, &[0.0; 16], 0.0);
        assert!((s - 1.0 / 17.0).abs() < 1e-12);
        assert!((s - 0.05882).abs() < 1e-5);
    }

    #[test]
    fn no_sinks_no_bias_gives_one() {
        assert_eq!(sink_attention_score(0.0, &[], 0.0), 1.0);
    }

    #[test]
    fn fraction_increases_with_logit() {
        let c = [0.3, -1.0, 2.0];
        let mut prev = 0.0;
        for i in -20..20 {
            let s = sink_attention_score(i as f64 * 0.5, &c, 0.7);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn fraction_is_stable_for_large_logits() {
        let s = sink_attention_score(800.0, &[790.0, -5.0], 1.0);
        assert!(s.is_finite() && s > 0.99 && s < 1.0);
        let s = sink_attention_score(-800.0, &[0.0], 0.0);
        assert!((0.0..1e-300).contains(&s));
    }

    #[test]
    fn forced_zero_logits_through_full_gate() {
        let cfg = GateConfig::default();
        let mut p = init_gate(&cfg, 5).unwrap();
        // Zero query projection -> q = 0 -> every logit is exactly zero.
        p.tensor_mut("w_q").unwrap().data.fill(0.0);
        p.tensor_mut("beta").unwrap().data.fill(-1e4);
        let s = gate_forward(&random_hiddens(3, cfg.d_model, 1), &p).unwrap();
        for v in s {
            assert!((v - 1.0 / 17.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn no_denominator_is_sigmoid_of_logit() {
        let cfg = GateConfig {
            d_model: 12,
            group_size: 1,
            d_low: 4,
            variant: GateVariant::NoDenominator,
            ..GateConfig::default()
        };
        let mut p = init_gate(&cfg, 2).unwrap();
        for t in &mut p.tensors {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += 0.3 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
            }
        }
        let hid = random_hiddens(6, cfg.d_model, 4);
        let s = gate_forward(&hid, &p).unwrap();
        for (row, scores) in hid.chunks(12).zip(s.chunks(cfg.n_kv_heads)) {
            let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let tr = attn_token(&p, &x);
            for h in 0..cfg.n_kv_heads {
                let e: f64 = (0..4).map(|d| tr.q[h * 4 + d] * tr.k[h * 4 + d]).sum();
                let direct = 1.0 / (1.0 + (-e).exp());
                assert!((scores[h] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        for variant in [
            GateVariant::SinkAttention,
            GateVariant::NoDenominator,
            GateVariant::Mlp,
            GateVariant::Linear,
        ] {
            let cfg = GateConfig {
                variant,
                ..GateConfig::default()
            };
            let p = init_gate(&cfg, 8).unwrap();
            let s = gate_forward(&random_hiddens(20, cfg.d_model, 3), &p).unwrap();
            assert_eq!(s.len(), 20 * cfg.n_kv_heads);
            assert!(s.iter().all(|&v| v > 0.0 && v < 1.0), "{variant:?}");
        }
    }

    #[test]
    fn permuting_rows_permutes_scores() {
        let cfg = GateConfig::default();
        let p = init_gate(&cfg, 6).unwrap();
        let d = cfg.d_model;
        let hid = random_hiddens(5, d, 9);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| hid[i * d..(i + 1) * d].to_vec()).collect();
        let a = gate_forward(&hid, &p).unwrap();
        let b = gate_forward(&permuted, &p).unwrap();
        let h = cfg.n_kv_heads;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&b[dst * h..(dst + 1) * h], &a[src * h..(src + 1) * h]);
        }
    }

    #[test]
    fn concatenated_batches_match_bitwise() {
        let cfg = GateConfig::default();
        let p = init_gate(&cfg, 6).unwrap();
        let a = random_hiddens(7, cfg.d_model, 1);
        let b = random_hiddens(4, cfg.d_model, 2);
        let mut joint = a.clone();
        joint.extend(&b);
        let mut sep = gate_forward(&a, &p).unwrap();
        sep.extend(gate_forward(&b, &p).unwrap());
        let both = gate_forward(&joint, &p).unwrap();
        assert_eq!(
            sep.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            both.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn width_mismatch_rejected() {
        let p = init_gate(&GateConfig::default(), 0).unwrap();
        assert!(matches!(gate_forward(&[0.0; 63], &p), Err(Error::Shape(_))));
    }

    #[test]
    fn softplus_matches_definition() {
        for x in [-50.0, -3.0, 0.0, 0.5, 12.0, 45.0] {
            let direct = f64::exp(x).ln_1p();
            assert!((softplus(x) - direct).abs() <= 1e-12 * direct.max(1e-300), "{x}");
        }
    }
}
