//! Run configuration: TOML file, command-line overrides, validation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use expforce_core::evaluation::EvalConfig;
use expforce_core::gateway::{EndpointsConfig, ImageData, ModelEndpointConfig};
use expforce_core::oracle::OracleConfig;
use expforce_core::predictors::BackendKind;
use expforce_core::prompting::{SharedContext, Templates, DEFAULT_EMBODIMENT, DEFAULT_TASK_OBJECTIVE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_ENV: &str = "EXPFORCE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub task_objective: String,
    pub embodiment_text: String,
    pub embodiment_image: Option<PathBuf>,
    pub scale_reference_image: Option<PathBuf>,
    pub include_embodiment: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            task_objective: DEFAULT_TASK_OBJECTIVE.into(),
            embodiment_text: DEFAULT_EMBODIMENT.into(),
            embodiment_image: None,
            scale_reference_image: None,
            include_embodiment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub backend: BackendKind,
    pub k: usize,
    pub n_folds: usize,
    pub k_values: Vec<usize>,
    pub describe_queries: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            backend: BackendKind::ExpForce,
            k: 7,
            n_folds: 5,
            k_values: vec![1, 3, 5, 7, 10],
            describe_queries: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub concurrency_limit: usize,
    /// Embedding cache directory; no caching when unset.
    pub cache_dir: Option<PathBuf>,
    /// Directory holding replacement prompt templates.
    pub templates_dir: Option<PathBuf>,
    pub context: ContextConfig,
    pub endpoints: EndpointsConfig,
    pub oracle: OracleConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concurrency_limit: 4,
            cache_dir: None,
            templates_dir: None,
            context: ContextConfig::default(),
            endpoints: EndpointsConfig::default(),
            oracle: OracleConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub concurrency_limit: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub templates_dir: Option<PathBuf>,
    pub no_embodiment: bool,
    pub backend: Option<BackendKind>,
    pub k: Option<usize>,
    pub n_folds: Option<usize>,
    pub describe_queries: bool,
}

impl RunConfig {
    /// Parses a TOML document. Relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("invalid config file")?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).with_context(|| format!("in {}", path.display()))
    }

    /// Defaults, then the config file (explicit path or `EXPFORCE_CONFIG`),
    /// then command-line overrides.
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match config_path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let endpoints = &mut self.endpoints;
        let optional = [
            &mut self.cache_dir,
            &mut self.templates_dir,
            &mut self.context.embodiment_image,
            &mut self.context.scale_reference_image,
            &mut endpoints.descriptor.stub_canned_file,
            &mut endpoints.predictor.stub_canned_file,
            &mut endpoints.embedding.stub_canned_file,
        ];
        for p in optional.into_iter().flatten() {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.concurrency_limit {
            self.concurrency_limit = v;
        }
        if let Some(v) = &o.cache_dir {
            self.cache_dir = Some(v.clone());
        }
        if o.no_cache {
            self.cache_dir = None;
        }
        if let Some(v) = &o.templates_dir {
            self.templates_dir = Some(v.clone());
        }
        if o.no_embodiment {
            self.context.include_embodiment = false;
        }
        if let Some(v) = o.backend {
            self.eval.backend = v;
        }
        if let Some(v) = o.k {
            self.eval.k = v;
        }
        if let Some(v) = o.n_folds {
            self.eval.n_folds = v;
        }
        if o.describe_queries {
            self.eval.describe_queries = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency_limit == 0 {
            bail!("concurrency_limit must be at least 1");
        }
        self.oracle.validate().context("[oracle]")?;
        for (name, ep) in self.endpoint_list() {
            ep.validate().with_context(|| format!("[endpoints.{name}]"))?;
            if let Some(p) = &ep.stub_canned_file {
                require_exists(p, "stub_canned_file")?;
            }
        }
        if let Some(p) = &self.templates_dir {
            require_exists(p, "templates_dir")?;
        }
        for p in [&self.context.embodiment_image, &self.context.scale_reference_image]
            .into_iter()
            .flatten()
        {
            require_exists(p, "context image")?;
        }
        Ok(())
    }

    fn endpoint_list(&self) -> [(&'static str, &ModelEndpointConfig); 3] {
        [
            ("descriptor", &self.endpoints.descriptor),
            ("predictor", &self.endpoints.predictor),
            ("embedding", &self.endpoints.embedding),
        ]
    }

    /// Short hash of the effective configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }

    pub fn shared_context(&self) -> Result<SharedContext> {
        let read = |p: &Option<PathBuf>| -> Result<Option<ImageData>> {
            p.as_ref()
                .map(|p| {
                    fs::read(p)
                        .map(ImageData::new)
                        .with_context(|| format!("cannot read image {}", p.display()))
                })
                .transpose()
        };
        Ok(SharedContext {
            task_objective: self.context.task_objective.clone(),
            embodiment_text: self.context.embodiment_text.clone(),
            embodiment_image: read(&self.context.embodiment_image)?,
            scale_reference_image: read(&self.context.scale_reference_image)?,
            include_embodiment: self.context.include_embodiment,
        })
    }

    pub fn templates(&self) -> Result<Templates> {
        match &self.templates_dir {
            Some(dir) => Templates::load(dir).with_context(|| format!("templates in {}", dir.display())),
            None => Ok(Templates::builtin()),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            backend: self.eval.backend,
            k: self.eval.k,
            n_folds: self.eval.n_folds,
            seed: self.seed,
            concurrency_limit: self.concurrency_limit,
            describe_queries: self.eval.describe_queries,
        }
    }
}

fn require_exists(p: &Path, what: &str) -> Result<()> {
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.toml");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn defaults_when_nothing_given() {
        let cfg = RunConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.eval.k, 7);
        assert_eq!(cfg.concurrency_limit, 4);
    }

    #[test]
    fn file_beats_defaults_and_flags_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "seed = 5\nconcurrency_limit = 2\n[eval]\nk = 3\nbackend = \"knn-average\"\n",
        );
        let from_file = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((from_file.seed, from_file.concurrency_limit, from_file.eval.k), (5, 2, 3));
        assert_eq!(from_file.eval.backend, BackendKind::KnnAverage);
        assert_eq!(from_file.eval.n_folds, 5);

        let o = Overrides {
            seed: Some(9),
            k: Some(10),
            ..Overrides::default()
        };
        let both = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!((both.seed, both.concurrency_limit, both.eval.k), (9, 2, 10));
        assert_eq!(both.eval.backend, BackendKind::KnnAverage);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "cache_dir = \"cache\"\n");
        let cfg = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.cache_dir, Some(dir.path().join("cache")));
        let cfg = RunConfig::load(
            Some(&path),
            &Overrides {
                no_cache: true,
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.cache_dir, None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let unknown = write_config(dir.path(), "sede = 1\n");
        assert!(RunConfig::load(Some(&unknown), &Overrides::default()).is_err());
        let zero = write_config(dir.path(), "concurrency_limit = 0\n");
        assert!(RunConfig::load(Some(&zero), &Overrides::default()).is_err());
        let missing = write_config(dir.path(), "templates_dir = \"nope\"\n");
        assert!(RunConfig::load(Some(&missing), &Overrides::default()).is_err());
    }

    #[test]
    fn endpoint_sections_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[endpoints.predictor]\nbackend = \"remote\"\nbase_url = \"https://api.example.test/v1\"\n\
             model_name = \"m\"\napi_key_env = \"EXAMPLE_KEY\"\n",
        );
        let cfg = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.endpoints.predictor.base_url, "https://api.example.test/v1");
        assert_eq!(cfg.endpoints.descriptor, EndpointsConfig::default().descriptor);
    }

    #[test]
    fn fingerprint_follows_effective_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.apply(&Overrides {
            seed: Some(1),
            ..Overrides::default()
        });
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
