use crate::error::{Error, Result};

/// Dropout rates, AWD-LSTM style.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutRates {
    /// DropConnect on the recurrent matrices.
    pub weight: f64,
    /// Locked dropout between stacked layers.
    pub layers: f64,
    /// Locked dropout on the final layer's output.
    pub output: f64,
    /// Bernoulli dropout of whole embedding rows.
    pub embedding_rows: f64,
    /// Locked dropout on the embedding vector.
    pub embedding: f64,
}

impl DropoutRates {
    pub fn none() -> Self {
        DropoutRates {
            weight: 0.0,
            layers: 0.0,
            output: 0.0,
            embedding_rows: 0.0,
            embedding: 0.0,
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::none()
    }
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates {
            weight: 0.0,
            layers: 0.3,
            output: 0.4,
            embedding_rows: 0.1,
            embedding: 0.65,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before averaging starts.
    pub nonmono_trigger: usize,
    pub grad_clip: f64,
    pub dropout: DropoutRates,
    /// Penalty on the squared final-layer activations before dropout.
    pub ar_coeff: f64,
    /// Penalty on squared step-to-step differences of the dropped
    /// final-layer activations.
    pub tar_coeff: f64,
    /// Weight of the squared KL(posterior || prior) term; only used when a
    /// prior is supplied.
    pub kl_lambda: f64,
    /// Sentences per update.
    pub batch_size: usize,
    /// Longest token window backpropagated through in one sequence.
    pub bptt: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 10.0,
            weight_decay: 1.2e-6,
            nonmono_trigger: 5,
            grad_clip: 0.25,
            dropout: DropoutRates::default(),
            ar_coeff: 1.0,
            tar_coeff: 2.0,
            kl_lambda: 0.1,
            batch_size: 20,
            bptt: 70,
            epochs: 20,
            seed: 1,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "weight_decay",
    "nonmono_trigger",
    "grad_clip",
    "dropout_weight",
    "dropout_layers",
    "dropout_output",
    "dropout_embedding_rows",
    "dropout_embedding",
    "ar_coeff",
    "tar_coeff",
    "kl_lambda",
    "batch_size",
    "bptt",
    "epochs",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl TrainConfig {
    /// Sets a field by its configuration-file name. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "nonmono_trigger" => self.nonmono_trigger = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "dropout_weight" => self.dropout.weight = parse(key, value)?,
            "dropout_layers" => self.dropout.layers = parse(key, value)?,
            "dropout_output" => self.dropout.output = parse(key, value)?,
            "dropout_embedding_rows" => self.dropout.embedding_rows = parse(key, value)?,
            "dropout_embedding" => self.dropout.embedding = parse(key, value)?,
            "ar_coeff" => self.ar_coeff = parse(key, value)?,
            "tar_coeff" => self.tar_coeff = parse(key, value)?,
            "kl_lambda" => self.kl_lambda = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "bptt" => self.bptt = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`TRAIN_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dropout;
        let values = [
            self.learning_rate.to_string(),
            self.weight_decay.to_string(),
            self.nonmono_trigger.to_string(),
            self.grad_clip.to_string(),
            d.weight.to_string(),
            d.layers.to_string(),
            d.output.to_string(),
            d.embedding_rows.to_string(),
            d.embedding.to_string(),
            self.ar_coeff.to_string(),
            self.tar_coeff.to_string(),
            self.kl_lambda.to_string(),
            self.batch_size.to_string(),
            self.bptt.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
        ];
        TRAIN_KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("ar_coeff", self.ar_coeff),
            ("tar_coeff", self.tar_coeff),
            ("kl_lambda", self.kl_lambda),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        let d = &self.dropout;
        let rates = [
            ("dropout_weight", d.weight),
            ("dropout_layers", d.layers),
            ("dropout_output", d.output),
            ("dropout_embedding_rows", d.embedding_rows),
            ("dropout_embedding", d.embedding),
        ];
        for (name, v) in rates {
            // a rate of exactly 1 would need an infinite rescale
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.bptt < 2 {
            return Err(Error::Config("bptt must be at least 2".into()));
        }
        if self.nonmono_trigger == 0 {
            return Err(Error::Config("nonmono_trigger must be positive".into()));
        }
        Ok(())
    }
}
