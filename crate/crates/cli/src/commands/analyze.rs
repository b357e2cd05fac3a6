//! Per-head retention under a fixed budget, head taxonomy, retained/evicted
//! token tables and per-layer gate-vs-target means.

use std::collections::BTreeMap;

use fastkv_core::engine::{prefill_chunked, BudgetMode, EvictionPolicy};
use fastkv_core::gate::GateSet;
use fastkv_core::metrics::spearman;
use fastkv_core::model::{Capture, Transformer};
use fastkv_core::targets::compute_reconstruction_targets;
use fastkv_core::tokenizer::token_label;
use fastkv_core::trainer::derive_seed;
use rayon::prelude::*;
use serde::Serialize;

use crate::common::{check_gates, load_model, sample_fixed_contexts, write_json, write_text};
use crate::config::{AnalyzeSettings, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadClass {
    Sparse,
    Medium,
    Dense,
}

impl HeadClass {
    pub const ALL: [HeadClass; 3] = [HeadClass::Sparse, HeadClass::Medium, HeadClass::Dense];

    pub fn classify(retention: f64, s: &AnalyzeSettings) -> Self {
        if retention < s.sparse_below {
            HeadClass::Sparse
        } else if retention >= s.dense_from {
            HeadClass::Dense
        } else {
            HeadClass::Medium
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadEntry {
    pub layer: usize,
    pub head: usize,
    pub retention: f64,
    pub class: HeadClass,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenCount {
    pub token: String,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassTokens {
    pub class: HeadClass,
    pub retained: Vec<TokenCount>,
    pub evicted: Vec<TokenCount>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCurve {
    pub layer: usize,
    pub mean_gate: f64,
    pub mean_target: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub ratio: f64,
    pub sparse_below: f64,
    pub dense_from: f64,
    pub n_contexts: usize,
    pub context_tokens: usize,
    pub heads: Vec<HeadEntry>,
    pub class_counts: BTreeMap<HeadClass, usize>,
    pub mean_retention: f64,
    pub tokens: Vec<ClassTokens>,
    pub curves: Vec<LayerCurve>,
}

impl Analysis {
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("layer,head,retention\n");
        for h in &self.heads {
            s.push_str(&format!("{},{},{:.6}\n", h.layer, h.head, h.retention));
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        let mut s = String::from("layer,mean_gate,mean_target,spearman\n");
        for c in &self.curves {
            s.push_str(&format!(
                "{},{:.6},{},{}\n",
                c.layer,
                c.mean_gate,
                opt(c.mean_target),
                opt(c.spearman)
            ));
        }
        s
    }
}

/// What one context contributes.
struct ContextStats {
    /// `[layer][head]` retained fraction.
    retention: Vec<Vec<f64>>,
    /// `[layer][head][position]`.
    kept: Vec<Vec<Vec<bool>>>,
    gate_mean: Vec<f64>,
    target_mean: Option<Vec<f64>>,
    rho: Option<Vec<f64>>,
}

fn analyze_context(
    model: &Transformer,
    gates: &GateSet,
    ctx: &[u32],
    policy: &EvictionPolicy,
    cfg: &RunConfig,
) -> Result<ContextStats, CliError> {
    let mc = &model.config;
    let t = ctx.len();
    let pre = prefill_chunked(model, gates, ctx, policy)?;
    let mut retention = Vec::with_capacity(mc.n_layers);
    let mut kept = Vec::with_capacity(mc.n_layers);
    for layer in &pre.cache.layers {
        retention.push(layer.heads.iter().map(|h| h.len() as f64 / t as f64).collect());
        kept.push(
            layer
                .heads
                .iter()
                .map(|h| {
                    let mut k = vec![false; t];
                    h.positions().iter().for_each(|&p| k[p] = true);
                    k
                })
                .collect(),
        );
    }

    let (out, _) = model.forward_full(ctx, Capture::HIDDEN)?;
    let gate_scores: Vec<Vec<f64>> = (0..mc.n_layers)
        .map(|l| Ok(gates.score(l, &out.hidden[l])?.iter().map(|&v| f64::from(v)).collect()))
        .collect::<Result<_, CliError>>()?;
    let gate_mean = gate_scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let (target_mean, rho) = if cfg.analyze.with_targets {
        let targets = compute_reconstruction_targets(model, ctx, &cfg.targets)?;
        let means = (0..mc.n_layers).map(|l| targets.layer_mean(l)).collect();
        let rho = (0..mc.n_layers)
            .map(|l| {
                let tg: Vec<f64> = targets.layer_token_major(l).iter().map(|&v| f64::from(v)).collect();
                spearman(&gate_scores[l], &tg)
            })
            .collect();
        (Some(means), Some(rho))
    } else {
        (None, None)
    };
    Ok(ContextStats {
        retention,
        kept,
        gate_mean,
        target_mean,
        rho,
    })
}

fn top_k(counts: &BTreeMap<u32, u64>, k: usize) -> Vec<TokenCount> {
    let mut v: Vec<(u32, u64)> = counts.iter().map(|(&t, &c)| (t, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter()
        .take(k)
        .map(|(t, c)| TokenCount {
            token: token_label(t),
            count: c,
        })
        .collect()
}

pub fn analyze(
    cfg: &RunConfig,
    model: &Transformer,
    gates: &GateSet,
    contexts: &[Vec<u32>],
) -> Result<Analysis, CliError> {
    let a = &cfg.analyze;
    let mc = &model.config;
    let policy = EvictionPolicy {
        budget: BudgetMode::Ratio(a.ratio),
        ..cfg.policy.clone()
    };
    let stats: Vec<ContextStats> = contexts
        .par_iter()
        .map(|ctx| analyze_context(model, gates, ctx, &policy, cfg))
        .collect::<Result<_, _>>()?;
    let n = stats.len().max(1) as f64;

    let mut heads = Vec::new();
    for l in 0..mc.n_layers {
        for h in 0..mc.n_kv_heads {
            let r = stats.iter().map(|s| s.retention[l][h]).sum::<f64>() / n;
            heads.push(HeadEntry {
                layer: l,
                head: h,
                retention: r,
                class: HeadClass::classify(r, a),
            });
        }
    }
    let mut class_counts: BTreeMap<HeadClass, usize> = HeadClass::ALL.iter().map(|&c| (c, 0)).collect();
    for h in &heads {
        *class_counts.entry(h.class).or_default() += 1;
    }

    let mut tokens = Vec::new();
    for class in HeadClass::ALL {
        let mut kept: BTreeMap<u32, u64> = BTreeMap::new();
        let mut evicted: BTreeMap<u32, u64> = BTreeMap::new();
        for head in heads.iter().filter(|h| h.class == class) {
            for (s, ctx) in stats.iter().zip(contexts) {
                for (pos, &tok) in ctx.iter().enumerate() {
                    let m = if s.kept[head.layer][head.head][pos] {
                        &mut kept
                    } else {
                        &mut evicted
                    };
                    *m.entry(tok).or_default() += 1;
                }
            }
        }
        tokens.push(ClassTokens {
            class,
            retained: top_k(&kept, a.top_k),
            evicted: top_k(&evicted, a.top_k),
        });
    }

    let curves = (0..mc.n_layers)
        .map(|l| LayerCurve {
            layer: l,
            mean_gate: stats.iter().map(|s| s.gate_mean[l]).sum::<f64>() / n,
            mean_target: a
                .with_targets
                .then(|| stats.iter().map(|s| s.target_mean.as_ref().map_or(0.0, |m| m[l])).sum::<f64>() / n),
            spearman: a
                .with_targets
                .then(|| stats.iter().map(|s| s.rho.as_ref().map_or(0.0, |m| m[l])).sum::<f64>() / n),
        })
        .collect();

    let mean_retention = heads.iter().map(|h| h.retention).sum::<f64>() / heads.len().max(1) as f64;
    Ok(Analysis {
        ratio: a.ratio,
        sparse_below: a.sparse_below,
        dense_from: a.dense_from,
        n_contexts: contexts.len(),
        context_tokens: a.context_tokens,
        heads,
        class_counts,
        mean_retention,
        tokens,
        curves,
    })
}

pub fn run(cfg: &RunConfig) -> Result<Analysis, CliError> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let path = cfg.gate_path();
    if !path.exists() {
        return Err(CliError::Data(format!("missing gate file {}", path.display())));
    }
    let gates = GateSet::load(&path)?;
    check_gates(&model, &gates)?;
    let contexts = sample_fixed_contexts(
        cfg.eval_sources(),
        cfg.analyze.n_contexts,
        cfg.analyze.context_tokens,
        derive_seed(cfg.seeds().eval, 1, 5),
    )?;
    let analysis = analyze(cfg, &model, &gates, &contexts)?;
    let dir = &cfg.output.dir;
    write_text(&dir.join("retention_heatmap.csv"), &analysis.heatmap_csv())?;
    write_text(&dir.join("gate_vs_target.csv"), &analysis.curves_csv())?;
    write_json(&dir.join("head_taxonomy.json"), &analysis)?;
    Ok(analysis)
}
