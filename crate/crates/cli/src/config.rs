//! Run configuration: a preset, overlaid by an optional TOML file, overlaid by
//! environment variables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use pmr_core::dataset::{CorpusIndex, PreprocessConfig, SkeletonTopology, Split};
use pmr_core::evaluation::ExperimentConfig;

use crate::UsageError;

pub const OUTPUT_ROOT_VAR: &str = "PMR_OUTPUT_ROOT";
pub const DEVICE_VAR: &str = "PMR_DEVICE";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

/// Base configuration a run starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-width network and the complete epoch schedule.
    #[default]
    Full,
    /// Reduced network and schedule for a single CPU core.
    Desk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Constant,
    Random,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Constant => "constant",
            PolicyKind::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    #[default]
    Eval,
    All,
}

impl SplitChoice {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitChoice::Train => Some(Split::Train),
            SplitChoice::Eval => Some(Split::Eval),
            SplitChoice::All => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub actors: u32,
    pub actions: u32,
    pub cameras: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            actors: 4,
            actions: 6,
            cameras: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Directory scanned by `preprocess` for `.skeleton` files.
    pub raw_dir: Option<PathBuf>,
    /// Corpus manifest read by `train`, `anonymize` and `evaluate`.
    pub manifest: Option<PathBuf>,
    /// JSON topology file; the Kinect v2 layout when unset.
    pub topology: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnonymizeConfig {
    pub policy: PolicyKind,
    /// Which split of the corpus is anonymized.
    pub split: SplitChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Parent of default output directories.
    pub output_root: PathBuf,
    /// Compute device; only `cpu` exists.
    pub device: String,
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    /// Network, loss weights, stage plan, seeds, probes and dummy choice.
    pub experiment: ExperimentConfig,
    pub anonymize: AnonymizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            output_root: PathBuf::from("runs"),
            device: "cpu".into(),
            corpus: CorpusConfig::default(),
            preprocess: PreprocessConfig::default(),
            experiment: match preset {
                Preset::Full => ExperimentConfig::default(),
                Preset::Desk => ExperimentConfig::desk(),
            },
            anonymize: AnonymizeConfig::default(),
        }
    }

    /// Resolves the preset (flag, then file, then default), overlays the file
    /// and then the environment.
    pub fn load(file: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let mut overlay = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match (preset, overlay.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e| UsageError(format!("preset: {e}")))?,
            (None, None) => Preset::default(),
        };
        overlay.remove("preset");
        let mut base = toml::Table::try_from(Self::preset(preset)).context("serializing preset")?;
        merge(&mut base, overlay);
        let mut cfg: Self = base
            .try_into()
            .map_err(|e| UsageError(format!("config: {e}")))?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_VAR) {
            cfg.output_root = PathBuf::from(root);
        }
        if let Ok(device) = std::env::var(DEVICE_VAR) {
            cfg.device = device;
        }
        if cfg.device != "cpu" {
            bail!(UsageError(format!("device `{}` is not available; only `cpu` is supported", cfg.device)));
        }
        Ok(cfg)
    }

    pub fn topology(&self) -> Result<SkeletonTopology> {
        let Some(path) = &self.corpus.topology else {
            return Ok(SkeletonTopology::kinect_v2());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading topology {}", path.display()))?;
        let topo: SkeletonTopology =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("topology {}: {e}", path.display())))?;
        topo.validate()?;
        Ok(topo)
    }

    /// Reads the corpus manifest, `flag` taking precedence over `corpus.manifest`.
    pub fn corpus_index(&mut self, flag: Option<PathBuf>) -> Result<CorpusIndex> {
        if let Some(p) = flag {
            self.corpus.manifest = Some(p);
        }
        let path = self
            .corpus
            .manifest
            .as_ref()
            .ok_or_else(|| UsageError("no corpus manifest: pass --manifest or set corpus.manifest".into()))?;
        Ok(CorpusIndex::read_manifest(path)?)
    }

    /// `out` when given, else `<output_root>/<name>`.
    pub fn output_dir(&self, out: Option<PathBuf>, name: &str) -> PathBuf {
        out.unwrap_or_else(|| self.output_root.join(name))
    }

    /// Creates `dir` and writes the resolved configuration into it.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string(self).context("serializing config")?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Reads a resolved configuration written by [`RunConfig::write_into`].
    pub fn read_from(dir: &Path) -> Result<Self> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?)
    }
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        for p in [Preset::Full, Preset::Desk] {
            let cfg = RunConfig::preset(p);
            let text = toml::to_string(&cfg).unwrap();
            assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn file_overlays_preset_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "preset = \"desk\"\n[experiment.train.weights]\nalpha_emb = 40.0\n[corpus.synthetic]\nactors = 2\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), None).unwrap();
        let desk = RunConfig::preset(Preset::Desk);
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.experiment.train.weights.alpha_emb, 40.0);
        assert_eq!(cfg.experiment.train.weights.gamma, desk.experiment.train.weights.gamma);
        assert_eq!(cfg.experiment.network, desk.experiment.network);
        assert_eq!(cfg.corpus.synthetic.actors, 2);
        assert_eq!(cfg.corpus.synthetic.actions, 6);
        let full = RunConfig::load(Some(&path), Some(Preset::Full)).unwrap();
        assert_eq!(full.experiment.network, RunConfig::preset(Preset::Full).experiment.network);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), None).is_err());
    }
}
