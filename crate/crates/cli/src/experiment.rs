//! Experiment configuration: flat `key = value` text.
//!
//! Paths are resolved against the directory of the configuration file.
//! Every training hyperparameter is accepted under its own name (see
//! [`kalm::training::TRAIN_KEYS`]); unknown keys are errors.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use kalm::inference::DecodeConfig;
use kalm::model::ModelConfig;
use kalm::training::{TrainConfig, TRAIN_KEYS};
use kalm::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Uni,
    Bi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

const PATH_KEYS: &[&str] = &[
    "train", "valid", "test", "kb", "prior", "gold", "vocab", "type_map", "output",
];

const MODEL_KEYS: &[&str] = &["embed_dim", "hidden_dim", "layers", "type_dim", "init_range"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    /// Gold tags for the test split, CoNLL style.
    pub gold: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub type_map: Option<PathBuf>,
    /// Checkpoint path written by `train`.
    pub output: Option<PathBuf>,
    pub profile: Profile,
    pub mode: Mode,
    pub feedback: bool,
    /// Train with the KL term against the type prior.
    pub kl: bool,
    pub model_overrides: Vec<(String, String)>,
    pub train_config: TrainConfig,
    pub decode: DecodeConfig,
    pub lowercase: bool,
    pub min_count: u64,
    pub prior_smoothing: f64,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: None,
            valid: None,
            test: None,
            kb: None,
            prior: None,
            gold: None,
            vocab: None,
            type_map: None,
            output: None,
            profile: Profile::Desk,
            mode: Mode::Uni,
            feedback: true,
            kl: false,
            model_overrides: Vec::new(),
            train_config: TrainConfig::default(),
            decode: DecodeConfig::default(),
            lowercase: false,
            min_count: 1,
            prior_smoothing: 1.0,
            threads: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on or off, got {value:?}"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", path.display(), lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim(), base).map_err(|e| match e {
                Error::Config(msg) => at(msg),
                other => at(other.to_string()),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        if PATH_KEYS.contains(&key) {
            let p = Some(base.join(value));
            match key {
                "train" => self.train = p,
                "valid" => self.valid = p,
                "test" => self.test = p,
                "kb" => self.kb = p,
                "prior" => self.prior = p,
                "gold" => self.gold = p,
                "vocab" => self.vocab = p,
                "type_map" => self.type_map = p,
                _ => self.output = p,
            }
            return Ok(());
        }
        if MODEL_KEYS.contains(&key) {
            let mut probe = ModelConfig::desk();
            apply_model_key(&mut probe, key, value)?;
            self.model_overrides.retain(|(k, _)| k != key);
            self.model_overrides.push((key.to_string(), value.to_string()));
            return Ok(());
        }
        if TRAIN_KEYS.contains(&key) {
            return self.train_config.set(key, value);
        }
        match key {
            "profile" => {
                self.profile = Profile::from_str(value, true)
                    .map_err(|_| Error::Config(format!("profile: expected desk or paper, got {value:?}")))?
            }
            "mode" => {
                self.mode = Mode::from_str(value, true)
                    .map_err(|_| Error::Config(format!("mode: expected uni or bi, got {value:?}")))?
            }
            "feedback" => self.feedback = parse_bool(key, value)?,
            "kl" => self.kl = parse_bool(key, value)?,
            "alpha" => self.decode.alpha = parse_value(key, value)?,
            "beta" => self.decode.beta = parse_value(key, value)?,
            "use_prior" => self.decode.use_prior = parse_bool(key, value)?,
            "lowercase" => self.lowercase = parse_bool(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "prior_smoothing" => self.prior_smoothing = parse_value(key, value)?,
            "threads" => self.threads = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = match self.profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Paper => ModelConfig::paper(),
        };
        for (k, v) in &self.model_overrides {
            apply_model_key(&mut c, k, v)?;
        }
        c.bidirectional = self.mode == Mode::Bi;
        c.feedback = self.feedback;
        c.validate()?;
        Ok(c)
    }

    /// Checks value ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        self.train_config.validate()?;
        self.decode.validate()?;
        self.model_config()?;
        if !(self.prior_smoothing > 0.0) {
            return Err(Error::Config("prior_smoothing must be positive".into()));
        }
        let inputs = [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("kb", &self.kb),
            ("prior", &self.prior),
            ("gold", &self.gold),
            ("type_map", &self.type_map),
        ];
        for (name, p) in inputs {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{name}: no such file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required setting {name:?}")))
    }

    /// Serialized form; parsing it back from the same directory gives an
    /// equal configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let paths = [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("kb", &self.kb),
            ("prior", &self.prior),
            ("gold", &self.gold),
            ("vocab", &self.vocab),
            ("type_map", &self.type_map),
            ("output", &self.output),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                out.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        let on = |b: bool| if b { "on" } else { "off" };
        out.push_str(&format!(
            "profile = {}\nmode = {}\nfeedback = {}\nkl = {}\n",
            match self.profile {
                Profile::Desk => "desk",
                Profile::Paper => "paper",
            },
            match self.mode {
                Mode::Uni => "uni",
                Mode::Bi => "bi",
            },
            on(self.feedback),
            on(self.kl)
        ));
        for (k, v) in &self.model_overrides {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in self.train_config.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!(
            "alpha = {}\nbeta = {}\nuse_prior = {}\nlowercase = {}\nmin_count = {}\nprior_smoothing = {}\nthreads = {}\n",
            self.decode.alpha,
            self.decode.beta,
            on(self.decode.use_prior),
            on(self.lowercase),
            self.min_count,
            self.prior_smoothing,
            self.threads
        ));
        out
    }
}

fn apply_model_key(c: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "embed_dim" => c.embed_dim = parse_value(key, value)?,
        "hidden_dim" => c.hidden_dim = parse_value(key, value)?,
        "layers" => c.layers = parse_value(key, value)?,
        "type_dim" => c.type_dim = parse_value(key, value)?,
        "init_range" => c.init_range = parse_value(key, value)?,
        _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
    }
    Ok(())
}
