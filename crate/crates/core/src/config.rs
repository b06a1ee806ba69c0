//! Run configuration: a flat set of `key = value` entries covering data
//! generation, the encoder, the loss, optimization and evaluation.
//!
//! Files hold one entry per line; `#` starts a comment. Later entries
//! override earlier ones, so command-line overrides are applied with the same
//! [`RunConfig::set`] call that file entries use.

use std::path::{Path, PathBuf};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::Vote;
use crate::pipeline::CvConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Required by training and cross-validation; there is no implicit seed.
    pub seed: Option<u64>,
    /// Dataset file; when absent the synthetic generator is used.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub cv: CvConfig,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Temperature for similarity-weighted KNN votes.
    pub vote_temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            dataset: None,
            synthetic: SyntheticConfig::default(),
            cv: CvConfig::default(),
            probe_epochs: 500,
            probe_lr: 0.5,
            vote_temperature: 0.07,
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {expected}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([parse(key, a, "a number")?, parse(key, b, "a number")?]),
        _ => Err(bad(key, value, "`lo,hi`")),
    }
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim(), "a comma-separated list of sizes")).collect()
}

fn show_pair([a, b]: [f64; 2]) -> String {
    format!("{a},{b}")
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synthetic;
        let t = &self.cv.train;
        let l = &t.loss;
        let a = &t.adam;
        let g = &t.augment;
        vec![
            ("seed", show_opt(&self.seed, "none")),
            ("dataset", self.dataset.as_ref().map_or_else(|| "synthetic".into(), |p| p.display().to_string())),
            ("n_classes", s.n_classes.to_string()),
            ("patients_per_class", s.patients_per_class.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("class_pattern_seed", s.class_pattern_seed.to_string()),
            ("background_level", s.background_level.to_string()),
            ("pattern_amplitude", s.pattern_amplitude.to_string()),
            ("within_class_noise_sigma", s.within_class_noise_sigma.to_string()),
            ("modality_noise_sigma", s.modality_noise_sigma.to_string()),
            ("acquisition_jitter", s.acquisition_jitter.map_or_else(|| "none".into(), show_pair)),
            ("illumination_gradient", s.illumination_gradient.to_string()),
            (
                "hidden_dims",
                if t.hidden_dims.is_empty() {
                    "none".into()
                } else {
                    t.hidden_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                },
            ),
            ("embedding_dim", t.embedding_dim.to_string()),
            ("mode", t.mode.to_string()),
            ("tau", l.tau.to_string()),
            ("margin", l.margin.to_string()),
            ("use_transform_term", l.use_transform_term.to_string()),
            ("use_modality_term", l.use_modality_term.to_string()),
            ("use_negative_terms", l.use_negative_terms.to_string()),
            ("batch_patients", t.batch_patients.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", a.base_lr.to_string()),
            ("decay_factor", a.decay_factor.to_string()),
            ("decay_every", a.decay_every.to_string()),
            ("beta1", a.beta1.to_string()),
            ("beta2", a.beta2.to_string()),
            ("eps", a.eps.to_string()),
            ("crop_scale_range", show_pair(g.crop_scale_range)),
            ("flip_prob", g.flip_prob.to_string()),
            ("grayscale_prob", g.grayscale_prob.to_string()),
            ("jitter_range", show_pair(g.jitter_range)),
            ("k", self.cv.knn.k.to_string()),
            ("vote", self.cv.knn.vote.as_str().to_string()),
            ("vote_temperature", self.vote_temperature.to_string()),
            ("folds", self.cv.folds.to_string()),
            ("max_folds", show_opt(&self.cv.max_folds, "all")),
            ("stratify", self.cv.stratify.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Assigns one entry; unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let s = &mut self.synthetic;
        let t = &mut self.cv.train;
        match key {
            "seed" => self.seed = if value == "none" { None } else { Some(parse(key, value, "an unsigned integer")?) },
            "dataset" => {
                self.dataset = if value == "synthetic" || value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "n_classes" => s.n_classes = parse(key, value, "a count")?,
            "patients_per_class" => s.patients_per_class = parse(key, value, "a count")?,
            "height" => s.height = parse(key, value, "a size")?,
            "width" => s.width = parse(key, value, "a size")?,
            "class_pattern_seed" => s.class_pattern_seed = parse(key, value, "an unsigned integer")?,
            "background_level" => s.background_level = parse(key, value, "a number")?,
            "pattern_amplitude" => s.pattern_amplitude = parse(key, value, "a number")?,
            "within_class_noise_sigma" => s.within_class_noise_sigma = parse(key, value, "a number")?,
            "modality_noise_sigma" => s.modality_noise_sigma = parse(key, value, "a number")?,
            "acquisition_jitter" => {
                s.acquisition_jitter = if value == "none" { None } else { Some(parse_pair(key, value)?) }
            }
            "illumination_gradient" => s.illumination_gradient = parse(key, value, "a number")?,
            "hidden_dims" => t.hidden_dims = parse_dims(key, value)?,
            "embedding_dim" => t.embedding_dim = parse(key, value, "a size")?,
            "mode" => t.mode = value.parse()?,
            "tau" => t.loss.tau = parse(key, value, "a number")?,
            "margin" => t.loss.margin = parse(key, value, "a number")?,
            "use_transform_term" => t.loss.use_transform_term = parse_bool(key, value)?,
            "use_modality_term" => t.loss.use_modality_term = parse_bool(key, value)?,
            "use_negative_terms" => t.loss.use_negative_terms = parse_bool(key, value)?,
            "batch_patients" => t.batch_patients = parse(key, value, "a count")?,
            "epochs" => t.epochs = parse(key, value, "an epoch count")?,
            "lr" => t.adam.base_lr = parse(key, value, "a number")?,
            "decay_factor" => t.adam.decay_factor = parse(key, value, "a number")?,
            "decay_every" => t.adam.decay_every = parse(key, value, "an epoch count")?,
            "beta1" => t.adam.beta1 = parse(key, value, "a number")?,
            "beta2" => t.adam.beta2 = parse(key, value, "a number")?,
            "eps" => t.adam.eps = parse(key, value, "a number")?,
            "crop_scale_range" => t.augment.crop_scale_range = parse_pair(key, value)?,
            "flip_prob" => t.augment.flip_prob = parse(key, value, "a probability")?,
            "grayscale_prob" => t.augment.grayscale_prob = parse(key, value, "a probability")?,
            "jitter_range" => t.augment.jitter_range = parse_pair(key, value)?,
            "k" => self.cv.knn.k = parse(key, value, "a neighbour count")?,
            "vote" => {
                self.cv.knn.vote = match value {
                    "majority" => Vote::Majority,
                    "weighted" => Vote::SimilarityWeighted { temperature: self.vote_temperature },
                    _ => return Err(bad(key, value, "`majority` or `weighted`")),
                }
            }
            "vote_temperature" => {
                self.vote_temperature = parse(key, value, "a number")?;
                if let Vote::SimilarityWeighted { temperature } = &mut self.cv.knn.vote {
                    *temperature = self.vote_temperature;
                }
            }
            "folds" => self.cv.folds = parse(key, value, "a fold count")?,
            "max_folds" => {
                self.cv.max_folds = if value == "all" { None } else { Some(parse(key, value, "a fold count")?) }
            }
            "stratify" => self.cv.stratify = parse_bool(key, value)?,
            "probe_epochs" => self.probe_epochs = parse(key, value, "an epoch count")?,
            "probe_lr" => self.probe_lr = parse(key, value, "a number")?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every entry of a `key = value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// The resolved configuration as a config file; reading it back yields `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks every section and returns the first problem found.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            self.synthetic.validate()?;
        }
        let t = &self.cv.train;
        t.loss.validate()?;
        t.augment.validate()?;
        let a = &t.adam;
        if !(a.base_lr > 0.0 && a.base_lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", a.base_lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if !(a.eps > 0.0) || !(a.decay_factor > 0.0) || a.decay_every == 0 {
            return Err(Error::Config("eps, decay_factor and decay_every must be positive".into()));
        }
        if t.embedding_dim < 2 || t.hidden_dims.contains(&0) {
            return Err(Error::Config("embedding_dim must be at least 2 and hidden sizes positive".into()));
        }
        if t.batch_patients == 0 {
            return Err(Error::Config("batch_patients must be positive".into()));
        }
        if self.cv.knn.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.cv.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.cv.folds)));
        }
        if !(self.vote_temperature > 0.0) || !(self.probe_lr > 0.0) {
            return Err(Error::Config("vote_temperature and probe_lr must be positive".into()));
        }
        Ok(())
    }

    /// The seed, or a config error naming the command that needs it.
    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config(format!("`{command}` requires --seed")))
    }
}
