//! Experiment configuration: one TOML file plus `--set key=value` overrides.
//!
//! Relative paths are resolved against the directory holding the config
//! file, so a generated bundle can be moved around as a unit.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use modalign::adapter::ProbeConfig;
use modalign::cf::CfConfig;
use modalign::evaluation::{DEFAULT_KS, SELECTION_K};
use modalign::{AdaptationConfig, Variant};
use serde::{Deserialize, Serialize};

/// Input files of one domain. Feature paths a variant does not need may be
/// left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPaths {
    pub interactions: Option<PathBuf>,
    pub user_textual: Option<PathBuf>,
    pub item_textual: Option<PathBuf>,
    pub item_visual: Option<PathBuf>,
}

/// Single-domain CF training; the latent width comes from `k2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfSection {
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub init_scale: f64,
}

impl Default for CfSection {
    fn default() -> Self {
        let d = CfConfig::default();
        CfSection {
            learning_rate: d.learning_rate,
            lambda: d.lambda,
            epochs: d.epochs,
            negatives_per_positive: d.negatives_per_positive,
            batch_size: d.batch_size,
            init_scale: d.init_scale,
        }
    }
}

/// Adaptation rates; the run seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub eta_source: f64,
    pub eta_target: f64,
    pub eta_classifier: f64,
    pub eta_adversarial: f64,
    pub lambda_source: f64,
    pub lambda_target: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub classifier_hidden: usize,
    pub classifier_batch_limit: usize,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        let d = AdaptationConfig::default();
        AdaptationSection {
            eta_source: d.eta_source,
            eta_target: d.eta_target,
            eta_classifier: d.eta_classifier,
            eta_adversarial: d.eta_adversarial,
            lambda_source: d.lambda_source,
            lambda_target: d.lambda_target,
            epochs: d.epochs,
            negatives_per_positive: d.negatives_per_positive,
            classifier_hidden: d.classifier_hidden,
            classifier_batch_limit: d.classifier_batch_limit,
        }
    }
}

/// Grid for `sweep`: every `(eta, lambda)` pair trains a target-domain CF
/// model of the configured variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            etas: vec![0.05, 0.1, 0.2, 0.4],
            lambdas: vec![0.001, 0.005, 0.01],
        }
    }
}

/// Domain probe run by `adapt` before and after alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub enabled: bool,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        ProbeSection {
            enabled: false,
            hidden: d.hidden,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Side-feature width.
    pub k1: usize,
    /// Latent width.
    pub k2: usize,
    pub ks: Vec<usize>,
    /// Adaptation runs with seeds `seed, seed + 1, ...`.
    pub runs: usize,
    /// Runs averaged into the final report, best F1@10 first.
    pub top_m: usize,
    pub output_dir: PathBuf,
    pub source: DomainPaths,
    pub target: DomainPaths,
    pub cf: CfSection,
    pub adaptation: AdaptationSection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            variant: Variant::Fcf,
            k1: 300,
            k2: 128,
            ks: DEFAULT_KS.to_vec(),
            runs: 1,
            top_m: 1,
            output_dir: PathBuf::from("out"),
            source: DomainPaths::default(),
            target: DomainPaths::default(),
            cf: CfSection::default(),
            adaptation: AdaptationSection::default(),
            probe: ProbeSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            bail!("k1 and k2 must be positive");
        }
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            bail!("ks must be a nonempty, strictly ascending list of positive cutoffs");
        }
        if !self.ks.contains(&SELECTION_K) {
            bail!(
                "ks must contain {SELECTION_K}: runs and epochs are selected by F1@{SELECTION_K}"
            );
        }
        if self.top_m == 0 || self.top_m > self.runs {
            bail!(
                "top_m must be between 1 and runs ({}), got {}",
                self.runs,
                self.top_m
            );
        }
        self.cf_config(self.seed).validate()?;
        self.adaptation_config(self.seed).validate()?;
        Ok(())
    }

    pub fn cf_config(&self, seed: u64) -> CfConfig {
        CfConfig {
            latent_dim: self.k2,
            learning_rate: self.cf.learning_rate,
            lambda: self.cf.lambda,
            epochs: self.cf.epochs,
            negatives_per_positive: self.cf.negatives_per_positive,
            batch_size: self.cf.batch_size,
            init_scale: self.cf.init_scale,
            seed,
        }
    }

    pub fn adaptation_config(&self, seed: u64) -> AdaptationConfig {
        let a = &self.adaptation;
        AdaptationConfig {
            eta_source: a.eta_source,
            eta_target: a.eta_target,
            eta_classifier: a.eta_classifier,
            eta_adversarial: a.eta_adversarial,
            lambda_source: a.lambda_source,
            lambda_target: a.lambda_target,
            epochs: a.epochs,
            negatives_per_positive: a.negatives_per_positive,
            classifier_hidden: a.classifier_hidden,
            classifier_batch_limit: a.classifier_batch_limit,
            seed,
        }
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe.hidden,
            epochs: self.probe.epochs,
            learning_rate: self.probe.learning_rate,
            seed,
            ..ProbeConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML text, applies overrides and resolves relative paths
    /// against `base_dir`.
    pub fn parse(text: &str, overrides: &[String], base_dir: &Path) -> anyhow::Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, overrides, base).with_context(|| format!("in config {}", path.display()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for d in [&mut self.source, &mut self.target] {
            for p in [
                &mut d.interactions,
                &mut d.user_textual,
                &mut d.item_textual,
                &mut d.item_visual,
            ]
            .into_iter()
            .flatten()
            {
                fix(p);
            }
        }
    }
}

/// `a.b.c=value`: the value is parsed as a TOML literal when possible and
/// taken as a plain string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{part}` is not a table"))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!((c.k1, c.k2), (300, 128));
        assert_eq!(c.ks, vec![2, 5, 10, 15, 20]);
        assert_eq!(c.adaptation.eta_source, 0.2);
        assert_eq!(c.adaptation.lambda_target, 0.005);
        assert_eq!(c.sweep.etas, vec![0.05, 0.1, 0.2, 0.4]);
        assert_eq!(c.sweep.lambdas, vec![0.001, 0.005, 0.01]);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = ExperimentConfig {
            seed: 9,
            variant: Variant::Vcf,
            runs: 3,
            top_m: 2,
            ..Default::default()
        };
        c.source.interactions = Some(PathBuf::from("/data/s.tsv"));
        c.output_dir = PathBuf::from("/tmp/out");
        let back = ExperimentConfig::parse(&c.to_toml(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            ExperimentConfig::parse(&back.to_toml(), &[], Path::new("/")).unwrap(),
            back
        );
    }

    #[test]
    fn overrides_win_and_paths_resolve() {
        let text = "seed = 1\noutput_dir = \"out\"\n[cf]\nepochs = 3\n";
        let c = ExperimentConfig::parse(
            text,
            &[
                "seed=7".into(),
                "cf.learning_rate=0.5".into(),
                "variant=tcf".into(),
                "target.item_visual=feat/v.txt".into(),
            ],
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.cf.learning_rate, 0.5);
        assert_eq!(c.cf.epochs, 3);
        assert_eq!(c.variant, Variant::Tcf);
        assert_eq!(c.output_dir, PathBuf::from("/base/out"));
        assert_eq!(
            c.target.item_visual,
            Some(PathBuf::from("/base/feat/v.txt"))
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = Path::new("/");
        assert!(ExperimentConfig::parse("ks = [5, 2]", &[], base).is_err());
        assert!(ExperimentConfig::parse("ks = [2, 5]", &[], base).is_err());
        assert!(ExperimentConfig::parse("k1 = 0", &[], base).is_err());
        assert!(ExperimentConfig::parse("runs = 2\ntop_m = 3", &[], base).is_err());
        assert!(ExperimentConfig::parse("bogus = 1", &[], base).is_err());
        assert!(ExperimentConfig::parse("", &["seed".into()], base).is_err());
        assert!(ExperimentConfig::parse("variant = \"bpr\"", &[], base).is_err());
    }
}
