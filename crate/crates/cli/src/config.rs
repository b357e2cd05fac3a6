//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use fastkv_core::engine::EvictionPolicy;
use fastkv_core::gate::{GateConfig, GateVariant};
use fastkv_core::model::ModelConfig;
use fastkv_core::targets::TargetConfig;
use fastkv_core::trainer::{CorpusSpec, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Gate settings; the attention geometry comes from `[model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSettings {
    pub variant: GateVariant,
    pub d_low: usize,
    pub n_sinks: usize,
    pub norm_eps: f64,
    pub shared_norm: bool,
}

impl Default for GateSettings {
    fn default() -> Self {
        let g = GateConfig::default();
        Self {
            variant: g.variant,
            d_low: g.d_low,
            n_sinks: g.n_sinks,
            norm_eps: g.norm_eps,
            shared_norm: g.shared_norm,
        }
    }
}

impl GateSettings {
    pub fn resolve(&self, model: &ModelConfig) -> GateConfig {
        GateConfig {
            variant: self.variant,
            d_low: self.d_low,
            n_sinks: self.n_sinks,
            norm_eps: self.norm_eps,
            shared_norm: self.shared_norm,
            ..GateConfig::default()
        }
        .for_model(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Gate,
    Oracle,
    Random,
    Recency,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Gate => "gate",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Random => "random",
            PolicyKind::Recency => "recency",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub ratios: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub n_contexts: usize,
    /// Tokens prefilled (and compressed) before the suffix.
    pub prefix_tokens: usize,
    /// Teacher-forced continuation on which logits are compared.
    pub suffix_tokens: usize,
    /// Corpus for held-out contexts; defaults to `[corpus] sources`.
    pub sources: Vec<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.3, 0.5, 0.7, 1.0],
            policies: vec![
                PolicyKind::Gate,
                PolicyKind::Oracle,
                PolicyKind::Random,
                PolicyKind::Recency,
            ],
            n_contexts: 20,
            prefix_tokens: 256,
            suffix_tokens: 32,
            sources: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSettings {
    pub ratio: f64,
    pub n_contexts: usize,
    pub context_tokens: usize,
    pub sparse_below: f64,
    pub dense_from: f64,
    pub top_k: usize,
    /// Also compute reconstruction targets for gate-vs-target curves.
    pub with_targets: bool,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        Self {
            ratio: 0.36,
            n_contexts: 8,
            context_tokens: 512,
            sparse_below: 0.05,
            dense_from: 0.9,
            top_k: 10,
            with_targets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub decode_steps: usize,
    /// Compressed ratio compared against 1.0 for peak cache size.
    pub low_ratio: f64,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024],
            decode_steps: 64,
            low_ratio: 0.3,
            repeats: 3,
        }
    }
}

/// Per-purpose seeds. Unset entries derive from the top-level `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedOverrides {
    pub model: Option<u64>,
    pub corpus: Option<u64>,
    pub trainer: Option<u64>,
    pub eval: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub model: u64,
    pub corpus: u64,
    pub trainer: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Gate file read by eval/analyze/bench; defaults to `<dir>/gates.fkvz`.
    pub gate_file: Option<PathBuf>,
    /// Keep the per-layer training shards in `<dir>/shards`.
    pub write_shards: bool,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            gate_file: None,
            write_shards: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: SeedOverrides,
    /// Load the frozen model from an `FKVM` checkpoint instead of
    /// initializing it from `[model]` and the model seed.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub gate: GateSettings,
    pub targets: TargetConfig,
    pub corpus: CorpusSpec,
    pub trainer: TrainerConfig,
    pub policy: EvictionPolicy,
    pub eval: EvalSettings,
    pub analyze: AnalyzeSettings,
    pub bench: BenchSettings,
    pub output: OutputSettings,
}


impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if raw
            .get("trainer")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"))
        {
            return Err(CliError::Config(
                "[trainer] seed is not accepted here; use the top-level seed or [seeds] trainer".into(),
            ));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.sources.iter_mut().for_each(fix);
        self.eval.sources.iter_mut().for_each(fix);
        fix(&mut self.output.dir);
        if let Some(p) = self.output.gate_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.checkpoint.as_mut() {
            fix(p);
        }
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            model: self.seeds.model.unwrap_or(s),
            corpus: self.seeds.corpus.unwrap_or(s.wrapping_add(1)),
            trainer: self.seeds.trainer.unwrap_or(s.wrapping_add(2)),
            eval: self.seeds.eval.unwrap_or(s.wrapping_add(3)),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seeds().trainer,
            ..self.trainer.clone()
        }
    }

    pub fn gate_config(&self) -> GateConfig {
        self.gate.resolve(&self.model)
    }

    pub fn gate_path(&self) -> PathBuf {
        self.output
            .gate_file
            .clone()
            .unwrap_or_else(|| self.output.dir.join("gates.fkvz"))
    }

    pub fn eval_sources(&self) -> &[PathBuf] {
        if self.eval.sources.is_empty() {
            &self.corpus.sources
        } else {
            &self.eval.sources
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.gate_config().validate()?;
        self.trainer.validate()?;
        self.policy.validate()?;
        let bad_ratio = |r: f64| !(r > 0.0 && r <= 1.0);
        if self.eval.ratios.iter().copied().any(bad_ratio) || bad_ratio(self.analyze.ratio) || bad_ratio(self.bench.low_ratio) {
            return Err(CliError::Config("ratios must lie in (0, 1]".into()));
        }
        if self.eval.prefix_tokens == 0 || self.eval.suffix_tokens == 0 {
            return Err(CliError::Config("eval prefix_tokens and suffix_tokens must be >= 1".into()));
        }
        if !(self.analyze.sparse_below <= self.analyze.dense_from) {
            return Err(CliError::Config("analyze.sparse_below must not exceed dense_from".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in ["bogus = 1", "[model]\nwidth = 3", "[policy]\nbudget = { percent = 3 }", "[nope]"] {
            assert!(matches!(RunConfig::from_toml_str(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn trainer_seed_must_go_through_seeds() {
        assert!(RunConfig::from_toml_str("[trainer]\nseed = 3").is_err());
        let cfg = RunConfig::from_toml_str("seed = 10\n[seeds]\ntrainer = 3").unwrap();
        assert_eq!(cfg.trainer_config().seed, 3);
        assert_eq!(cfg.seeds().model, 10);
    }

    #[test]
    fn parses_sections() {
        let doc = r#"
            seed = 4
            [model]
            n_layers = 2
            [gate]
            variant = "mlp"
            [policy]
            budget = { fixed_total = 100 }
            allocation = "uniform"
            [eval]
            policies = ["oracle", "random"]
        "#;
        let cfg = RunConfig::from_toml_str(doc).unwrap();
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.gate.variant, GateVariant::Mlp);
        assert_eq!(cfg.eval.policies, vec![PolicyKind::Oracle, PolicyKind::Random]);
        cfg.validate().unwrap();
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[corpus]\nsources = [\"data\"]\n[output]\ndir = \"o\"").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.corpus.sources, vec![dir.path().join("data")]);
        assert_eq!(cfg.gate_path(), dir.path().join("o").join("gates.fkvz"));
    }
}
