//! Run configuration, flavor ablation, gradient suite and latency benchmark.
//!
//! A run is configured by a key-value file (`key = value` per line, `#`
//! starts a comment) and flag overrides applied on top of it. Keys and their
//! meaning are listed in [`CONFIG_KEYS`].

mod ablation;
mod bench;
mod gradsuite;

pub use ablation::{run_ablation, AblationReport, AblationRow};
pub use bench::{bench_latency, BenchConfig, FlavorTiming, LatencyReport, PhaseTiming};
pub use gradsuite::{gradient_suite, GradSuiteConfig, GradSuiteReport, SuiteEntry};

use std::path::{Path, PathBuf};

use crate::datasets::{DatasetPaths, Split};
use crate::error::{Error, Result};
use crate::evaluation::{Convention, EvalOptions};
use crate::training::TrainConfig;

/// Every accepted configuration key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("data", "dataset directory (images.afb, modifiers.afb, triplets.jsonl, optional subsets.jsonl, gallery.txt)"),
    ("images", "image feature bank (overrides the one in `data`)"),
    ("modifiers", "modifier feature bank"),
    ("triplets", "triplet JSONL file"),
    ("subsets", "candidate subset JSONL file"),
    ("gallery", "gallery id list, one id per line"),
    ("checkpoint", "head checkpoint to write (train) or read (eval, bench)"),
    ("out", "output directory for reports and logs"),
    ("flavor", "image_only | text_only | late_fusion | is_only | em_only | artemis"),
    ("batch_size", "triplets per batch, at least 2 (32)"),
    ("epochs", "training epochs (50)"),
    ("lr0", "initial learning rate (5e-4)"),
    ("lr_decay", "learning-rate factor per decay step (0.5)"),
    ("decay_every", "epochs between decay steps (10)"),
    ("weight_decay", "decoupled weight decay (0.01)"),
    ("beta1", "first-moment decay (0.9)"),
    ("beta2", "second-moment decay (0.999)"),
    ("eps", "optimizer epsilon (1e-8)"),
    ("seed", "seed for initialization and shuffling (0)"),
    ("hidden", "attention MLP hidden width (image width)"),
    ("keep_last_batch", "train on the final short batch (false)"),
    ("convention", "fashioniq | shoes | cirr (shoes)"),
    ("exclude_ref", "drop the reference image from its own candidates (false)"),
    ("threads", "evaluation worker threads, 0 = all cores (1)"),
    ("split", "split to evaluate: val | test (val)"),
    ("repeats", "benchmark repetitions (5)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub modifiers: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub subsets: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub convention: Convention,
    pub exclude_ref: bool,
    pub threads: usize,
    pub split: Split,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            images: None,
            modifiers: None,
            triplets: None,
            subsets: None,
            gallery: None,
            checkpoint: None,
            out: None,
            train: TrainConfig::default(),
            convention: Convention::Shoes,
            exclude_ref: false,
            threads: 1,
            split: Split::Val,
            repeats: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for `{key}` (true or false)"
        ))),
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                n + 1
            ))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        let t = &mut self.train;
        match key {
            "data" => self.data = path(),
            "images" => self.images = path(),
            "modifiers" => self.modifiers = path(),
            "triplets" => self.triplets = path(),
            "subsets" => self.subsets = path(),
            "gallery" => self.gallery = path(),
            "checkpoint" => self.checkpoint = path(),
            "out" => self.out = path(),
            "flavor" => t.flavor = value.parse()?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "decay_every" => t.decay_every = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.betas.0 = parse(key, value)?,
            "beta2" => t.betas.1 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "hidden" => t.hidden = Some(parse(key, value)?),
            "keep_last_batch" => t.keep_last_batch = parse_bool(key, value)?,
            "convention" => self.convention = value.parse()?,
            "exclude_ref" => self.exclude_ref = parse_bool(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "split" => self.split = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file at `file` if any, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            config.apply(&parse_config_text(&text)?)?;
        }
        config.apply(overrides)?;
        config.train.validate()?;
        if config.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(config)
    }

    /// Resolved input files; every referenced file must exist.
    pub fn dataset_paths(&self) -> Result<DatasetPaths> {
        let mut paths = match &self.data {
            Some(dir) => DatasetPaths::in_dir(dir),
            None => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| {
                        Error::Config(format!("`{key}` is required when `data` is not set"))
                    })
                };
                DatasetPaths {
                    images: need(&self.images, "images")?,
                    modifiers: need(&self.modifiers, "modifiers")?,
                    triplets: need(&self.triplets, "triplets")?,
                    subsets: None,
                    gallery: None,
                }
            }
        };
        if let Some(p) = &self.images {
            paths.images = p.clone();
        }
        if let Some(p) = &self.modifiers {
            paths.modifiers = p.clone();
        }
        if let Some(p) = &self.triplets {
            paths.triplets = p.clone();
        }
        if self.subsets.is_some() {
            paths.subsets = self.subsets.clone();
        }
        if self.gallery.is_some() {
            paths.gallery = self.gallery.clone();
        }
        let required = [&paths.images, &paths.modifiers, &paths.triplets];
        for p in required
            .into_iter()
            .chain(paths.subsets.iter())
            .chain(paths.gallery.iter())
        {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(paths)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            convention: self.convention,
            exclude_ref: self.exclude_ref,
            threads: self.threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Flavor;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(
            &file,
            "# comment\nepochs = 7\nflavor = is_only  # trailing\n\nlr0=1e-3\nexclude_ref = true\n",
        )
        .unwrap();
        let overrides = vec![("epochs".to_string(), "3".to_string())];
        let c = RunConfig::load(Some(&file), &overrides).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.flavor, Flavor::IsOnly);
        assert_eq!(c.train.lr0, 1e-3);
        assert!(c.exclude_ref);
    }

    #[test]
    fn bad_configs() {
        let set = |k: &str, v: &str| RunConfig::default().set(k, v);
        assert!(matches!(set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(set("epochs", "-1"), Err(Error::Config(_))));
        assert!(matches!(set("flavor", "full"), Err(Error::Config(_))));
        assert!(matches!(
            set("keep_last_batch", "maybe"),
            Err(Error::Config(_))
        ));
        assert!(parse_config_text("just words").is_err());
        let pairs = vec![("batch_size".to_string(), "1".to_string())];
        assert!(RunConfig::load(None, &pairs).is_err());
    }

    #[test]
    fn every_key_is_documented_and_accepted() {
        for (key, _) in CONFIG_KEYS {
            let value = match *key {
                "flavor" => "artemis",
                "convention" => "cirr",
                "split" => "test",
                "keep_last_batch" | "exclude_ref" => "true",
                "lr0" | "lr_decay" | "weight_decay" | "beta1" | "beta2" | "eps" => "0.5",
                _ => "4",
            };
            RunConfig::default()
                .set(key, value)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let c = RunConfig::default();
        assert!(matches!(c.dataset_paths(), Err(Error::Config(_))));
        let c = RunConfig {
            data: Some(PathBuf::from("/nonexistent/dir")),
            ..RunConfig::default()
        };
        assert!(matches!(c.dataset_paths(), Err(Error::Config(_))));
    }
}
