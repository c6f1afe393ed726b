//! Experiment configuration: one TOML file with a top-level seed and output
//! directory plus one optional section per subcommand. See `docs/config.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use truthlab::dense::{DenseConfig, OnsetCriteria};
use truthlab::probes::ProbeSettings;
use truthlab::theory::SuiteParams;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub dense: DenseSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub cooccur: CooccurSection,
    #[serde(default)]
    pub export: ExportSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output_dir(),
            generate: GenerateSection::default(),
            toy: ToySection::default(),
            dense: DenseSection::default(),
            probe: ProbeSection::default(),
            verify: VerifySection::default(),
            cooccur: CooccurSection::default(),
            export: ExportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n_subjects: usize,
    pub n_attributes: usize,
    pub rho: f64,
    pub size: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            n_subjects: 20,
            n_attributes: 20,
            rho: 0.8,
            size: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyAlgorithm {
    /// Minibatch SGD on the value matrix.
    Sgd,
    /// Two population steps on the first-token loss, then one on the last.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub algorithm: ToyAlgorithm,
    pub n: usize,
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub snapshot_every: usize,
    pub positional: bool,
    /// Step size of the sequential algorithm; `N/ρ` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection {
            algorithm: ToyAlgorithm::Sgd,
            n: 20,
            rho: 0.8,
            lr: 1.0,
            batch_size: 16,
            steps: 3000,
            snapshot_every: 100,
            positional: true,
            eta: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensePreset {
    Ci,
    Full,
}

/// A preset plus field overrides; see [`DenseSection::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseSection {
    pub preset: DensePreset,
    /// Save parameters every this many batches (a multiple of
    /// `metric_every`); 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub onset: OnsetCriteria,
    #[serde(flatten)]
    pub overrides: BTreeMap<String, toml::Value>,
}

impl Default for DenseSection {
    fn default() -> Self {
        DenseSection {
            preset: DensePreset::Ci,
            checkpoint_every: 0,
            onset: OnsetCriteria::default(),
            overrides: BTreeMap::new(),
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl DenseSection {
    /// Applies the overrides to the preset; the global seed always wins.
    pub fn resolve(&self, seed: u64) -> Result<DenseConfig, CliError> {
        if self.overrides.contains_key("seed") {
            return Err(CliError::config("dense.seed", "set the top-level `seed` instead"));
        }
        let base = match self.preset {
            DensePreset::Ci => DenseConfig::ci(),
            DensePreset::Full => DenseConfig::full(),
        };
        let mut value = serde_json::to_value(&base)?;
        merge(&mut value, serde_json::to_value(&self.overrides)?);
        let mut config: DenseConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(unknown_field_path("dense", &path, e.inner()), e.inner().to_string())
        })?;
        config.seed = seed;
        config
            .validate()
            .map_err(|e| CliError::core("dense", e))?;
        if self.checkpoint_every > 0 && !self.checkpoint_every.is_multiple_of(config.metric_every) {
            return Err(CliError::config(
                "dense.checkpoint_every",
                format!("must be a multiple of metric_every = {}", config.metric_every),
            ));
        }
        Ok(config)
    }
}

/// Field path of a deserialization error, naming the unknown key itself
/// when that is what was rejected.
fn unknown_field_path(section: &str, path: &str, err: &dyn std::fmt::Display) -> String {
    let message = err.to_string();
    let mut full = section.to_string();
    if !path.is_empty() && path != "." {
        full.push('.');
        full.push_str(path);
    }
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(name) = rest.split('`').next() {
            if !full.ends_with(name) {
                full.push('.');
                full.push_str(name);
            }
        }
    }
    full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Dense checkpoint to probe; the architecture comes from `[dense]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Size of the balanced probe set.
    pub size: usize,
    pub pca_k: usize,
    pub settings: ProbeSettings,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            checkpoint: None,
            size: 2048,
            pca_k: 2,
            settings: ProbeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub n: usize,
    pub draws: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let p = SuiteParams::default();
        VerifySection {
            n: p.n,
            draws: p.draws,
            alpha: p.alpha,
            beta: p.beta,
        }
    }
}

impl VerifySection {
    pub fn suite_params(&self, seed: u64) -> SuiteParams {
        SuiteParams {
            n: self.n,
            seed,
            draws: self.draws,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CooccurSection {
    /// JSON-lines corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Toy checkpoint written by `train-toy`; its size comes from `[toy]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_checkpoint: Option<PathBuf>,
    /// Dense checkpoint written by `train-dense`; architecture from `[dense]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_checkpoint: Option<PathBuf>,
    /// Number of subjects in the sorted kernel view.
    pub kernel_k: usize,
    /// Sequences per truth class for the mean attention maps.
    pub attention_samples: usize,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            toy_checkpoint: None,
            dense_checkpoint: None,
            kernel_k: 20,
            attention_samples: 1024,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." || path.is_empty() {
                unknown_field_path("", "", e.inner()).trim_start_matches('.').to_string()
            } else {
                let (section, rest) = path.split_once('.').unwrap_or((path.as_str(), ""));
                unknown_field_path(section, rest, e.inner())
            };
            CliError::config(field, e.inner().message().to_string())
        })
    }

    /// Loads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let absolutize = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        absolutize(&mut config.output_dir);
        for p in [
            config.probe.checkpoint.as_mut(),
            config.cooccur.corpus.as_mut(),
            config.export.toy_checkpoint.as_mut(),
            config.export.dense_checkpoint.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            absolutize(p);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config("", e.to_string()))
    }

    /// SHA-256 over the canonical JSON form, excluding the output directory
    /// and file paths so that relocating a run does not change its identity.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let strip = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                *path = path.file_name().map(PathBuf::from).unwrap_or_default();
            }
        };
        strip(&mut canonical.probe.checkpoint);
        strip(&mut canonical.cooccur.corpus);
        strip(&mut canonical.export.toy_checkpoint);
        strip(&mut canonical.export.dense_checkpoint);
        let bytes = serde_json::to_vec(&canonical)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
