//! Run configuration: a single declarative TOML file drives every pipeline
//! stage. Precedence when the same knob is set more than once:
//! command-line flags beat `RCQA_*` environment variables, which beat file
//! values, which beat built-in defaults.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::decision::Scope;
use crate::error::{Error, Result};
use crate::probes::ProbeHyper;
use crate::qualify::{LayerMask, ProbeCnnConfig};

/// Prefix for environment-variable overrides (e.g. `RCQA_SEED`).
pub const ENV_PREFIX: &str = "RCQA_";

/// A confidence scorer selectable in the pipeline.
///
/// `ProbeCnnLast` is the ablation that feeds the convolutional scorer only
/// the deepest layer's signals; it trains its own model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    ProbeCnn,
    ProbeCnnLast,
    Proba,
    Aes,
    Ens,
    Oracle,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 6] = [
        ScorerKind::ProbeCnn,
        ScorerKind::ProbeCnnLast,
        ScorerKind::Proba,
        ScorerKind::Aes,
        ScorerKind::Ens,
        ScorerKind::Oracle,
    ];

    /// Human-facing name, also the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::ProbeCnn => "probe-cnn",
            ScorerKind::ProbeCnnLast => "probe-cnn-last",
            ScorerKind::Proba => "proba",
            ScorerKind::Aes => "aes",
            ScorerKind::Ens => "ens",
            ScorerKind::Oracle => "oracle",
        }
    }

    /// File-name-safe key used in artifact names.
    pub fn key(self) -> &'static str {
        match self {
            ScorerKind::ProbeCnn => "probe_cnn",
            ScorerKind::ProbeCnnLast => "probe_cnn_last",
            ScorerKind::Proba => "proba",
            ScorerKind::Aes => "aes",
            ScorerKind::Ens => "ens",
            ScorerKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scorer {s:?}; expected one of {}",
                    ScorerKind::ALL.map(ScorerKind::name).join(", ")
                ))
            })
    }
}

/// Parse a comma-separated scorer list such as `probe-cnn,proba`.
pub fn parse_scorer_list(text: &str) -> Result<Vec<ScorerKind>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(ScorerKind::from_str)
        .collect()
}

/// Where instances come from: a pre-built JSONL file or the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Existing dataset in JSON-lines form; when set, generation is skipped.
    pub path: Option<PathBuf>,
    /// Token list for rendering; one token per line.
    pub vocab: Option<PathBuf>,
    /// Generator parameters, used when `path` is absent.
    pub synthetic: SynthConfig,
}

/// Everything one end-to-end run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; stage seeds are derived from it.
    pub seed: u64,
    /// Directory receiving every artifact of the run.
    pub out_dir: PathBuf,
    /// Risk bound the decision threshold is calibrated to.
    pub target_risk: f64,
    /// Which outcomes count during scoring and metrics.
    pub scope: Scope,
    /// Confidence scorers to train and evaluate (the oracle is always
    /// appended at evaluation time).
    pub scorers: Vec<ScorerKind>,
    /// Snapshot-free ensemble size for the `ens` scorer.
    pub ens_members: usize,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub probes: ProbeHyper,
    pub qualify: ProbeCnnConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            target_risk: 0.1,
            scope: Scope::Direct,
            scorers: vec![
                ScorerKind::ProbeCnn,
                ScorerKind::ProbeCnnLast,
                ScorerKind::Proba,
                ScorerKind::Aes,
                ScorerKind::Ens,
            ],
            ens_members: 3,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            probes: ProbeHyper::default(),
            qualify: ProbeCnnConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a TOML config file.
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Check every section plus cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_risk) {
            return Err(Error::Config(format!(
                "target_risk {} outside [0, 1]",
                self.target_risk
            )));
        }
        if self.scorers.is_empty() {
            return Err(Error::Config("scorers list is empty".to_owned()));
        }
        for (i, kind) in self.scorers.iter().enumerate() {
            if self.scorers[..i].contains(kind) {
                return Err(Error::Config(format!("duplicate scorer {kind}")));
            }
        }
        if self.ens_members == 0 {
            return Err(Error::Config("ens_members must be at least 1".to_owned()));
        }
        self.backbone.validate()?;
        self.probes.validate()?;
        self.qualify.validate()?;
        self.dataset.synthetic.validate()?;
        if self.dataset.path.is_none()
            && self.dataset.synthetic.vocab_size != self.backbone.vocab_size
        {
            return Err(Error::Config(format!(
                "dataset.synthetic.vocab_size {} does not match backbone.vocab_size {}",
                self.dataset.synthetic.vocab_size, self.backbone.vocab_size
            )));
        }
        Ok(())
    }

    /// Apply `RCQA_*` environment overrides through an injectable lookup
    /// (pass `std::env::var(...).ok()` outside tests). Unset variables
    /// leave the config untouched; malformed values are errors.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        fn parse<T: FromStr>(var: &str, raw: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            raw.parse().map_err(|e| {
                Error::Config(format!("{ENV_PREFIX}{var}: cannot parse {raw:?}: {e}"))
            })
        }
        if let Some(raw) = lookup("SEED") {
            self.seed = parse("SEED", &raw)?;
        }
        if let Some(raw) = lookup("OUT_DIR") {
            self.out_dir = PathBuf::from(raw);
        }
        if let Some(raw) = lookup("TARGET_RISK") {
            self.target_risk = parse("TARGET_RISK", &raw)?;
        }
        if let Some(raw) = lookup("SCOPE") {
            self.scope = parse("SCOPE", &raw)?;
        }
        if let Some(raw) = lookup("LAYERS") {
            self.qualify.layer_mask = parse("LAYERS", &raw)?;
        }
        if let Some(raw) = lookup("SCORERS") {
            self.scorers = parse_scorer_list(&raw)?;
        }
        Ok(())
    }

    /// Apply overrides from the real process environment.
    pub fn apply_process_env(&mut self) -> Result<()> {
        self.apply_env(|name| std::env::var(format!("{ENV_PREFIX}{name}")).ok())
    }
}

/// Values from command-line flags; applied last so they win over both the
/// environment and the file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scorer: Option<ScorerKind>,
    pub layers: Option<LayerMask>,
    pub target_risk: Option<f64>,
}

impl CliOverrides {
    pub fn apply(&self, config: &mut PipelineConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(scorer) = self.scorer {
            config.scorers = vec![scorer];
        }
        if let Some(layers) = self.layers {
            config.qualify.layer_mask = layers;
        }
        if let Some(target_risk) = self.target_risk {
            config.target_risk = target_risk;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let config: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(config, PipelineConfig::default());
    }

    #[test]
    fn partial_sections_merge_onto_defaults() {
        let config: PipelineConfig = toml::from_str(
            r#"
            seed = 7
            target_risk = 0.05
            scorers = ["probe-cnn", "proba"]

            [backbone]
            epochs = 3

            [dataset.synthetic]
            train = 100

            [qualify]
            layer_mask = "last"
            epochs = 5
            "#,
        )
        .unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.target_risk, 0.05);
        assert_eq!(config.scorers, vec![ScorerKind::ProbeCnn, ScorerKind::Proba]);
        assert_eq!(config.backbone.epochs, 3);
        assert_eq!(config.backbone.layers, BackboneConfig::default().layers);
        assert_eq!(config.dataset.synthetic.train, 100);
        assert_eq!(config.qualify.layer_mask, LayerMask::Last);
        assert_eq!(config.qualify.epochs, 5);
        assert_eq!(config.probes, ProbeHyper::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("typo_field = 1").unwrap_err();
        assert!(err.to_string().contains("typo_field"), "{err}");
        let err =
            toml::from_str::<PipelineConfig>("[backbone]\nwidth = 4").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn load_reports_the_file_path_on_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let missing = PipelineConfig::load(&path).unwrap_err();
        assert!(missing.to_string().contains("run.toml"), "{missing}");
        fs::write(&path, "seed = \"not a number\"").unwrap();
        let bad = PipelineConfig::load(&path).unwrap_err();
        assert!(bad.to_string().contains("run.toml"), "{bad}");
        fs::write(&path, "seed = 11").unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap().seed, 11);
    }

    #[test]
    fn validate_rejects_inconsistent_values() {
        let mut c = PipelineConfig::default();
        c.target_risk = 1.5;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::default();
        c.scorers.clear();
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::default();
        c.scorers = vec![ScorerKind::Proba, ScorerKind::Proba];
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::default();
        c.ens_members = 0;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::default();
        c.dataset.synthetic.vocab_size = 60;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("vocab_size"), "{err}");
        // With an explicit dataset file the generator's vocab size is moot.
        c.dataset.path = Some(PathBuf::from("data.jsonl"));
        c.validate().unwrap();
    }

    #[test]
    fn scorer_names_and_keys_round_trip() {
        for kind in ScorerKind::ALL {
            assert_eq!(kind.name().parse::<ScorerKind>().unwrap(), kind);
            assert!(!kind.key().contains('-'));
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
        assert!("probe_cnn".parse::<ScorerKind>().is_err());
        assert!("".parse::<ScorerKind>().is_err());
    }

    #[test]
    fn scorer_lists_parse_with_whitespace() {
        assert_eq!(
            parse_scorer_list("probe-cnn, proba ,ens").unwrap(),
            vec![ScorerKind::ProbeCnn, ScorerKind::Proba, ScorerKind::Ens]
        );
        assert!(parse_scorer_list("probe-cnn,bogus").is_err());
        assert_eq!(parse_scorer_list("").unwrap(), vec![]);
    }

    #[test]
    fn env_overrides_apply_and_report_bad_values() {
        let mut config = PipelineConfig::default();
        let env = |name: &str| -> Option<String> {
            match name {
                "SEED" => Some("42".to_owned()),
                "OUT_DIR" => Some("/tmp/run".to_owned()),
                "TARGET_RISK" => Some("0.2".to_owned()),
                "SCOPE" => Some("all".to_owned()),
                "LAYERS" => Some("last".to_owned()),
                "SCORERS" => Some("proba,oracle".to_owned()),
                _ => None,
            }
        };
        config.apply_env(env).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.out_dir, PathBuf::from("/tmp/run"));
        assert_eq!(config.target_risk, 0.2);
        assert_eq!(config.scope, Scope::All);
        assert_eq!(config.qualify.layer_mask, LayerMask::Last);
        assert_eq!(config.scorers, vec![ScorerKind::Proba, ScorerKind::Oracle]);

        let mut config = PipelineConfig::default();
        config.apply_env(|_| None).unwrap();
        assert_eq!(config, PipelineConfig::default());

        let mut config = PipelineConfig::default();
        let err = config
            .apply_env(|n| (n == "SEED").then(|| "abc".to_owned()))
            .unwrap_err();
        assert!(err.to_string().contains("RCQA_SEED"), "{err}");
    }

    #[test]
    fn cli_overrides_beat_everything() {
        let mut config = PipelineConfig::default();
        config
            .apply_env(|n| (n == "SEED").then(|| "42".to_owned()))
            .unwrap();
        let overrides = CliOverrides {
            seed: Some(7),
            out: Some(PathBuf::from("elsewhere")),
            scorer: Some(ScorerKind::Ens),
            layers: Some(LayerMask::Last),
            target_risk: Some(0.25),
        };
        overrides.apply(&mut config);
        assert_eq!(config.seed, 7);
        assert_eq!(config.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(config.scorers, vec![ScorerKind::Ens]);
        assert_eq!(config.qualify.layer_mask, LayerMask::Last);
        assert_eq!(config.target_risk, 0.25);
        CliOverrides::default().apply(&mut config);
        assert_eq!(config.seed, 7);
    }

    #[test]
    fn config_survives_a_toml_round_trip() {
        let mut config = PipelineConfig::default();
        config.seed = 9;
        config.scope = Scope::All;
        config.qualify.layer_mask = LayerMask::Last;
        config.dataset.vocab = Some(PathBuf::from("vocab.txt"));
        let text = toml::to_string_pretty(&config).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
