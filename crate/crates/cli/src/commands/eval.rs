//! Logit fidelity of compressed inference against the full cache.

use fastkv_core::engine::{
    decode_teacher_forced, prefill_chunked, BudgetMode, EvictionPolicy, KvScorer, OracleScorer, RandomScorer,
    RecencyScorer,
};
use fastkv_core::gate::GateSet;
use fastkv_core::metrics::{argmax, l2_distance};
use fastkv_core::model::{Capture, Transformer};
use fastkv_core::targets::compute_reconstruction_targets;
use fastkv_core::trainer::derive_seed;
use rayon::prelude::*;
use serde::Serialize;

use crate::common::{check_gates, load_model, sample_fixed_contexts, write_json, write_text};
use crate::config::{PolicyKind, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub policy: PolicyKind,
    pub ratio: f64,
    /// Mean over contexts of the per-position mean L2 logit distance.
    pub logit_deviation: f64,
    pub top1_agreement: f64,
    /// Per-context mean deviations, in context order.
    pub per_context: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_contexts: usize,
    pub prefix_tokens: usize,
    pub suffix_tokens: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, policy: PolicyKind, ratio: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.policy == policy && r.ratio == ratio)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,ratio,logit_deviation,top1_agreement\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.9},{:.6}\n",
                r.policy.name(),
                r.ratio,
                r.logit_deviation,
                r.top1_agreement
            ));
        }
        s
    }
}

/// Deviation and agreement of one compressed run, averaged over the suffix.
fn compare(reference: &[Vec<f32>], run: &[Vec<f32>]) -> (f64, f64) {
    let n = reference.len() as f64;
    let mut dev = 0.0;
    let mut agree = 0.0;
    for (a, b) in reference.iter().zip(run) {
        dev += l2_distance(a, b);
        if argmax(a) == argmax(b) {
            agree += 1.0;
        }
    }
    (dev / n, agree / n)
}

/// Logits predicting each suffix token: prefill the prefix under `policy`,
/// then feed all but the last suffix token through gated decoding.
pub fn compressed_logits(
    model: &Transformer,
    scorer: &dyn KvScorer,
    ctx: &[u32],
    prefix: usize,
    policy: &EvictionPolicy,
) -> Result<Vec<Vec<f32>>, CliError> {
    let mut pre = prefill_chunked(model, scorer, &ctx[..prefix], policy)?;
    let dec = decode_teacher_forced(model, scorer, &mut pre.cache, &ctx[prefix..ctx.len() - 1], policy)?;
    let mut out = Vec::with_capacity(ctx.len() - prefix);
    out.push(pre.last_logits);
    out.extend(dec.step_logits);
    Ok(out)
}

fn reference_logits(model: &Transformer, ctx: &[u32], prefix: usize) -> Result<Vec<Vec<f32>>, CliError> {
    let (out, _) = model.forward_full(&ctx[..ctx.len() - 1], Capture::NONE)?;
    let v = model.config.vocab_size;
    Ok((prefix - 1..ctx.len() - 1)
        .map(|i| out.logits_row(i, v).to_vec())
        .collect())
}

/// Runs every (policy, ratio) pair on every context.
pub fn evaluate(
    cfg: &RunConfig,
    model: &Transformer,
    gates: Option<&GateSet>,
    contexts: &[Vec<u32>],
) -> Result<EvalReport, CliError> {
    let e = &cfg.eval;
    let prefix = e.prefix_tokens;
    let h = model.config.n_kv_heads;
    let eval_seed = cfg.seeds().eval;
    let pairs: Vec<(PolicyKind, f64)> = e
        .policies
        .iter()
        .flat_map(|&p| e.ratios.iter().map(move |&r| (p, r)))
        .collect();

    let per_ctx: Vec<Vec<(f64, f64)>> = contexts
        .par_iter()
        .enumerate()
        .map(|(ci, ctx)| -> Result<Vec<(f64, f64)>, CliError> {
            let reference = reference_logits(model, ctx, prefix)?;
            let oracle = if e.policies.contains(&PolicyKind::Oracle) {
                Some(OracleScorer {
                    scores: compute_reconstruction_targets(model, &ctx[..ctx.len() - 1], &cfg.targets)?,
                })
            } else {
                None
            };
            let random = RandomScorer {
                seed: derive_seed(eval_seed, ci, 17),
                n_heads: h,
            };
            let recency = RecencyScorer {
                n_heads: h,
                max_position: model.config.max_position,
            };
            pairs
                .iter()
                .map(|&(kind, ratio)| {
                    let scorer: &dyn KvScorer = match kind {
                        PolicyKind::Gate => gates.ok_or_else(|| CliError::Data("gate policy needs a gate file".into()))?,
                        PolicyKind::Oracle => oracle.as_ref().expect("oracle scores computed"),
                        PolicyKind::Random => &random,
                        PolicyKind::Recency => &recency,
                    };
                    let policy = EvictionPolicy {
                        budget: BudgetMode::Ratio(ratio),
                        ..cfg.policy.clone()
                    };
                    let run = compressed_logits(model, scorer, ctx, prefix, &policy)?;
                    Ok(compare(&reference, &run))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let n = contexts.len().max(1) as f64;
    let rows = pairs
        .iter()
        .enumerate()
        .map(|(k, &(policy, ratio))| {
            let per_context: Vec<f64> = per_ctx.iter().map(|c| c[k].0).collect();
            EvalRow {
                policy,
                ratio,
                logit_deviation: per_context.iter().sum::<f64>() / n,
                top1_agreement: per_ctx.iter().map(|c| c[k].1).sum::<f64>() / n,
                per_context,
            }
        })
        .collect();
    Ok(EvalReport {
        n_contexts: contexts.len(),
        prefix_tokens: prefix,
        suffix_tokens: e.suffix_tokens,
        rows,
    })
}

pub fn run(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let model = load_model(cfg)?;
    let gates = if cfg.eval.policies.contains(&PolicyKind::Gate) {
        let path = cfg.gate_path();
        if !path.exists() {
            return Err(CliError::Data(format!("missing gate file {}", path.display())));
        }
        let g = GateSet::load(&path)?;
        check_gates(&model, &g)?;
        Some(g)
    } else {
        None
    };
    let e = &cfg.eval;
    let contexts = sample_fixed_contexts(
        cfg.eval_sources(),
        e.n_contexts,
        e.prefix_tokens + e.suffix_tokens,
        derive_seed(cfg.seeds().eval, 0, 5),
    )?;
    let report = evaluate(cfg, &model, gates.as_ref(), &contexts)?;
    let dir = &cfg.output.dir;
    write_text(&dir.join("eval.csv"), &report.to_csv())?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}
