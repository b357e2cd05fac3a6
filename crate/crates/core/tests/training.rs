//! Gate training: loss decrease, determinism, seeding and failure modes.

use fastkv_core::gate::{init_gate, GateConfig, GateVariant};
use fastkv_core::model::{init_model, ModelConfig};
use fastkv_core::targets::TargetConfig;
use fastkv_core::trainer::{
    build_shards, derive_seed, prepare_shards, train_gates, train_layer, write_synthetic_corpus, CorpusSpec, Shard,
    ShardProvenance, TrainerConfig,
};
use fastkv_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One-layer toy shard (D=8, H=2) whose targets are a smooth function of the
/// hidden state.
fn toy_shard(n: usize, seed: u64) -> Shard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let w: Vec<f32> = (0..16).map(|_| normal.sample(&mut rng)).collect();
    let mut hidden = Vec::with_capacity(n * 8);
    let mut targets = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let h: Vec<f32> = (0..8).map(|_| normal.sample(&mut rng)).collect();
        for head in 0..2 {
            let z: f32 = h.iter().zip(&w[head * 8..]).map(|(a, b)| a * b).sum();
            targets.push(1.0 / (1.0 + (-z).exp()) * 0.5);
        }
        hidden.extend(h);
    }
    Shard {
        layer: 0,
        d_model: 8,
        n_heads: 2,
        counts: vec![n],
        hidden,
        targets,
        provenance: ShardProvenance::default(),
    }
}

fn toy_gate(variant: GateVariant) -> GateConfig {
    GateConfig {
        d_model: 8,
        n_kv_heads: 2,
        group_size: 2,
        d_low: 4,
        n_sinks: 4,
        variant,
        ..GateConfig::default()
    }
}

fn trainer(steps: usize) -> TrainerConfig {
    TrainerConfig {
        steps,
        log_every: 20,
        ..TrainerConfig::default()
    }
}

#[test]
fn training_reduces_loss_on_toy_shard() {
    let shard = toy_shard(500, 1);
    for variant in [GateVariant::SinkAttention, GateVariant::NoDenominator, GateVariant::Mlp, GateVariant::Linear] {
        let (_, r) = train_layer(&shard, &toy_gate(variant), &trainer(200)).unwrap();
        assert!(
            r.final_train_loss < r.initial_train_loss,
            "{variant:?}: {} -> {}",
            r.initial_train_loss,
            r.final_train_loss
        );
        assert_eq!(r.train_loss.len(), 200 / 20);
        assert_eq!(r.val_loss.len(), 200 / 20);
        assert_eq!(r.logged_steps.last(), Some(&200));
        assert_eq!((r.n_train, r.n_val), (450, 50));
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let shard = toy_shard(100, 2);
    let gate = toy_gate(GateVariant::SinkAttention);
    let cfg = TrainerConfig {
        learning_rate: 0.0,
        ..trainer(50)
    };
    let (params, _) = train_layer(&shard, &gate, &cfg).unwrap();
    let init = init_gate(&gate, derive_seed(cfg.seed, 0, 1)).unwrap();
    assert_eq!(params.to_f32_bytes(), init.to_f32_bytes());
    let (untouched, _) = train_layer(&shard, &gate, &trainer(0)).unwrap();
    assert_eq!(untouched, init);
}

#[test]
fn batch_order_changes_path_but_not_outcome() {
    let shard = toy_shard(500, 3);
    let gate = toy_gate(GateVariant::SinkAttention);
    let runs: Vec<_> = (0..3)
        .map(|b| {
            let cfg = TrainerConfig {
                batch_seed: Some(100 + b),
                ..trainer(200)
            };
            train_layer(&shard, &gate, &cfg).unwrap().1
        })
        .collect();
    assert_ne!(runs[0].train_loss, runs[1].train_loss);
    let base = runs[0].final_val_loss.unwrap();
    for r in &runs[1..] {
        let v = r.final_val_loss.unwrap();
        assert!((v - base).abs() / base < 0.2, "{v} vs {base}");
    }
}

#[test]
fn parallel_and_sequential_training_agree() {
    let shards: Vec<Shard> = (0..3)
        .map(|l| Shard {
            layer: l,
            ..toy_shard(200, 10 + l as u64)
        })
        .collect();
    let gate = toy_gate(GateVariant::SinkAttention);
    let cfg = trainer(60);
    let (parallel, report) = train_gates(&shards, &gate, &cfg, Default::default()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (sequential, report_seq) = pool.install(|| train_gates(&shards, &gate, &cfg, Default::default()).unwrap());
    assert_eq!(parallel, sequential);
    assert_eq!(report.params_sha256, report_seq.params_sha256);
    for (l, s) in shards.iter().enumerate() {
        let (alone, _) = train_layer(s, &gate, &cfg).unwrap();
        assert_eq!(alone, parallel.layers[l]);
    }
}

#[test]
fn divergence_aborts_with_numeric_error() {
    let mut shard = toy_shard(50, 4);
    shard.hidden[3] = f32::NAN;
    let err = train_layer(&shard, &toy_gate(GateVariant::Linear), &trainer(40)).unwrap_err();
    assert!(matches!(err, Error::Numeric(_) | Error::InvalidInput(_)), "{err}");

    let shard = toy_shard(50, 4);
    let cfg = TrainerConfig {
        learning_rate: 1e300,
        ..trainer(40)
    };
    let err = train_layer(&shard, &toy_gate(GateVariant::Linear), &cfg).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn mismatched_shard_is_rejected() {
    let shard = toy_shard(20, 5);
    let gate = GateConfig {
        d_model: 16,
        ..toy_gate(GateVariant::SinkAttention)
    };
    assert!(matches!(train_layer(&shard, &gate, &trainer(5)), Err(Error::Shape(_))));
}

fn small_model() -> fastkv_core::model::Transformer {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_head: 4,
        d_ff: 24,
        max_position: 1024,
        ..ModelConfig::default()
    };
    init_model(&cfg, 8).unwrap()
}

#[test]
fn shards_are_deterministic_and_sized_by_context() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_corpus(dir.path(), 2, 3000, 1).unwrap();
    let model = small_model();
    let weights_before = model.to_checkpoint_bytes().unwrap();
    let spec = CorpusSpec {
        sources: vec![dir.path().to_path_buf()],
        min_seq_tokens: 20,
        max_seq_tokens: 60,
        total_tokens: 400,
        ..CorpusSpec::default()
    };
    let a = prepare_shards(&model, &spec, &TargetConfig::default(), 3).unwrap();
    let b = prepare_shards(&model, &spec, &TargetConfig::default(), 3).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
        let total: usize = x.counts.iter().sum();
        assert_eq!(x.len(), total);
        assert!((400..460).contains(&total));
    }
    // Training leaves the frozen model untouched.
    let gate = GateConfig {
        d_low: 4,
        n_sinks: 4,
        ..GateConfig::default()
    }
    .for_model(&model.config);
    train_gates(&a, &gate, &trainer(20), Default::default()).unwrap();
    assert_eq!(model.to_checkpoint_bytes().unwrap(), weights_before);
}

#[test]
fn shard_preparation_errors() {
    let model = small_model();
    let dir = tempfile::tempdir().unwrap();
    let missing = CorpusSpec {
        sources: vec![dir.path().join("absent")],
        min_seq_tokens: 10,
        max_seq_tokens: 20,
        total_tokens: 100,
        ..CorpusSpec::default()
    };
    let err = prepare_shards(&model, &missing, &TargetConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("absent"));

    let too_long = CorpusSpec {
        sources: vec![dir.path().to_path_buf()],
        min_seq_tokens: 10,
        max_seq_tokens: 600,
        total_tokens: 1000,
        ..CorpusSpec::default()
    };
    assert!(matches!(
        prepare_shards(&model, &too_long, &TargetConfig::default(), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn trained_gate_ranks_targets_better_than_untrained() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let contexts: Vec<Vec<u32>> = (0..12)
        .map(|i| {
            let text = fastkv_core::trainer::synthetic_text(i, 200);
            let toks = fastkv_core::tokenizer::encode(&text);
            let len = rng.random_range(60..150);
            toks[..len].to_vec()
        })
        .collect();
    let shards = build_shards(&model, &contexts, &TargetConfig::default(), ShardProvenance::default()).unwrap();
    let gate = GateConfig {
        d_low: 8,
        n_sinks: 8,
        ..GateConfig::default()
    }
    .for_model(&model.config);
    let (trained, _) = train_gates(&shards, &gate, &trainer(300), Default::default()).unwrap();
    let (untrained, _) = train_gates(&shards, &gate, &trainer(0), Default::default()).unwrap();
    for (l, shard) in shards.iter().enumerate() {
        let (_, val) = fastkv_core::trainer::layer_split(shard.len(), l, &trainer(300));
        let (h, t) = shard.gather(&val);
        let t: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
        let rho = |g: &fastkv_core::gate::GateParams| {
            let s = fastkv_core::gate::gate_forward(&h, g).unwrap();
            fastkv_core::metrics::spearman(&s, &t)
        };
        let (a, b) = (rho(&trained.layers[l]), rho(&untrained.layers[l]));
        assert!(a > b, "layer {l}: trained {a} vs untrained {b}");
    }
}
