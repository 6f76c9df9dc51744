//! The knowledge-augmented LSTM language model.
//!
//! The next-word distribution is a mixture over a general vocabulary (type 0)
//! and one vocabulary per KB entity type, gated by a type posterior computed
//! from the context vector. Optionally the posterior-weighted type embedding
//! is fed back as extra input to the first LSTM layer, and a bidirectional
//! variant scores interior positions from fused left/right contexts.

mod api;
mod forward;

use rand::Rng;

pub use api::{BidiEncoding, Direction, MixtureDistribution, SentenceScores, StepState};
pub use forward::{DirectionActivations, DirectionMasks, ForwardOutput, SentenceMasks};

use crate::corpus::VocabularySet;
use crate::error::{Error, Result};
use crate::numerics::{LstmWeights, ParamId, ParamStore};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Width of every LSTM layer except the last, whose width is
    /// `embed_dim` so its output can be scored against the tied embeddings.
    pub hidden_dim: usize,
    pub layers: usize,
    pub type_dim: usize,
    pub bidirectional: bool,
    pub feedback: bool,
    pub init_range: f64,
}

impl ModelConfig {
    /// Small model for laptop-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 128,
            layers: 1,
            type_dim: 16,
            bidirectional: false,
            feedback: true,
            init_range: 0.1,
        }
    }

    /// Dimensions of the full-scale model (400-d embeddings, three 1150-d
    /// layers, 100-d type embeddings).
    pub fn paper() -> Self {
        ModelConfig {
            embed_dim: 400,
            hidden_dim: 1150,
            layers: 3,
            type_dim: 100,
            bidirectional: false,
            feedback: true,
            init_range: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("type_dim", self.type_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::Config("init_range must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        if layer + 1 == self.layers {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn first_input_width(&self) -> usize {
        self.embed_dim + if self.feedback { self.type_dim } else { 0 }
    }

    /// Width of the vector the type posterior is computed from.
    pub fn context_width(&self) -> usize {
        if self.bidirectional {
            2 * self.embed_dim
        } else {
            self.embed_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DirectionLayout {
    pub layers: Vec<LstmWeights>,
    /// Projection used for the feedback posterior of this direction in
    /// bidirectional models.
    pub feedback_proj: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embedding: ParamId,
    pub general_bias: ParamId,
    /// `(weights, bias)` for types `1..=K`; `None` for empty vocabularies.
    pub type_out: Vec<Option<(ParamId, ParamId)>>,
    pub type_embedding: ParamId,
    pub context_proj: ParamId,
    pub forward: DirectionLayout,
    pub backward: Option<DirectionLayout>,
    pub fuse: Option<(ParamId, ParamId)>,
}

/// Model parameters plus the vocabulary geometry they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    sizes: Vec<usize>,
    num_rows: usize,
    active: Vec<usize>,
    store: ParamStore,
    layout: Layout,
}

impl ModelParams {
    /// Fresh parameters drawn uniformly from `[-init_range, init_range]`;
    /// output biases start at zero.
    pub fn new(config: ModelConfig, vocab: &VocabularySet, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config, vocab.sizes(), vocab.num_rows())?;
        let mut rng = rng::stream(seed, &[rng::label::INIT]);
        let zero_init = model.decoder_biases();
        for id in model.store.ids().collect::<Vec<_>>() {
            if !zero_init.contains(&id) {
                model.store.init_uniform(id, model.config.init_range, &mut rng);
            }
        }
        Ok(model)
    }

    /// All-zero parameters for the given geometry (used when loading).
    pub fn zeroed(config: ModelConfig, sizes: Vec<usize>, num_rows: usize) -> Result<Self> {
        config.validate()?;
        if sizes.is_empty() || sizes[0] == 0 {
            return Err(Error::Config("general vocabulary must be non-empty".into()));
        }
        if num_rows < sizes[0] {
            return Err(Error::Config(
                "embedding rows must cover the general vocabulary".into(),
            ));
        }
        let k = sizes.len() - 1;
        let e = config.embed_dim;
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", num_rows, e);
        let general_bias = store.add("general.bias", sizes[0], 1);
        let type_out = (1..=k)
            .map(|j| {
                (sizes[j] > 0).then(|| {
                    (
                        store.add(format!("type{j}.out"), sizes[j], e),
                        store.add(format!("type{j}.bias"), sizes[j], 1),
                    )
                })
            })
            .collect();
        let type_embedding = store.add("type_embedding", k + 1, config.type_dim);
        let context_proj = store.add("context_proj", config.type_dim, config.context_width());
        let direction = |store: &mut ParamStore, prefix: &str| {
            let layers = (0..config.layers)
                .map(|l| {
                    let input = if l == 0 {
                        config.first_input_width()
                    } else {
                        config.layer_width(l - 1)
                    };
                    LstmWeights::register(store, &format!("{prefix}.l{l}"), input, config.layer_width(l))
                })
                .collect();
            let feedback_proj = (config.bidirectional && config.feedback)
                .then(|| store.add(format!("{prefix}.feedback_proj"), config.type_dim, e));
            DirectionLayout {
                layers,
                feedback_proj,
            }
        };
        let forward = direction(&mut store, "fwd");
        let backward = config
            .bidirectional
            .then(|| direction(&mut store, "bwd"));
        let fuse = config
            .bidirectional
            .then(|| (store.add("fuse.w", e, 2 * e), store.add("fuse.bias", e, 1)));

        let active = std::iter::once(0)
            .chain((1..=k).filter(|&j| sizes[j] > 0))
            .collect();
        Ok(ModelParams {
            config,
            sizes,
            num_rows,
            active,
            store,
            layout: Layout {
                embedding,
                general_bias,
                type_out,
                type_embedding,
                context_proj,
                forward,
                backward,
                fuse,
            },
        })
    }

    fn decoder_biases(&self) -> Vec<ParamId> {
        std::iter::once(self.layout.general_bias)
            .chain(self.layout.type_out.iter().flatten().map(|&(_, b)| b))
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `|V_0|, |V_1|, ..., |V_K|`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_types(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    /// Types that take part in the mixture: 0 and every non-empty `V_j`.
    pub fn active_types(&self) -> &[usize] {
        &self.active
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces every parameter value, keeping the layout.
    pub fn replace_store(&mut self, store: ParamStore) -> Result<()> {
        if !store.same_layout(&self.store) {
            return Err(Error::Config("parameter layout mismatch".into()));
        }
        self.store = store;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Whether `vocab` has the geometry these parameters were built for.
    pub fn fits(&self, vocab: &VocabularySet) -> bool {
        vocab.sizes() == self.sizes && vocab.num_rows() == self.num_rows
    }

    /// Expands an active-type vector of log-probabilities to `K + 1`
    /// probabilities with zeros for inactive types.
    pub fn expand_posterior(&self, active_log_probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_types() + 1];
        for (&j, &lp) in self.active.iter().zip(active_log_probs) {
            out[j] = lp.exp();
        }
        out
    }

    /// Samples a uniform perturbation of every parameter; used by tests and
    /// gradient checks that want non-symmetric weights.
    pub fn randomize<R: Rng>(&mut self, range: f64, rng: &mut R) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.init_uniform(id, range, rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, tokenize, VocabOptions};
    use crate::kb::KnowledgeBase;

    fn vocab(k_empty: bool) -> VocabularySet {
        let mut kb = KnowledgeBase::new();
        kb.add_entity("PER", "alice bob", 1).unwrap();
        if k_empty {
            kb.add_type("EMPTY");
        }
        let sents = vec![tokenize("alice met bob", false)];
        build_vocabulary(&sents, &kb, &VocabOptions::default()).unwrap()
    }

    #[test]
    fn general_projection_is_tied_to_embedding_prefix() {
        let v = vocab(false);
        let m = ModelParams::new(ModelConfig::desk(), &v, 1).unwrap();
        let (rows, cols) = m.store().shape(m.layout().embedding);
        assert_eq!(rows, v.num_rows());
        assert_eq!(cols, 64);
        assert!(m.param("general.out").is_none());
        assert_eq!(m.store().shape(m.layout().general_bias), (v.general().len(), 1));
    }

    #[test]
    fn decoder_biases_start_at_zero() {
        let m = ModelParams::new(ModelConfig::desk(), &vocab(false), 5).unwrap();
        for b in m.decoder_biases() {
            assert!(m.store().get(b).iter().all(|&v| v == 0.0));
        }
        let emb = m.store().get(m.layout().embedding);
        assert!(emb.iter().all(|v| v.abs() <= 0.1));
        assert!(emb.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn empty_type_is_inactive() {
        let m = ModelParams::new(ModelConfig::desk(), &vocab(true), 5).unwrap();
        assert_eq!(m.active_types(), &[0, 1]);
        assert!(m.layout().type_out[1].is_none());
        assert_eq!(m.expand_posterior(&[0.25f64.ln(), 0.75f64.ln()]).len(), 3);
    }

    #[test]
    fn first_layer_input_grows_with_feedback() {
        let v = vocab(false);
        let mut cfg = ModelConfig::desk();
        cfg.layers = 2;
        let m = ModelParams::new(cfg.clone(), &v, 1).unwrap();
        let l0 = &m.layout().forward.layers[0];
        assert_eq!(l0.input_width, 64 + 16);
        assert_eq!(l0.hidden_width, 128);
        assert_eq!(m.layout().forward.layers[1].hidden_width, 64);
        cfg.feedback = false;
        let m = ModelParams::new(cfg, &v, 1).unwrap();
        assert_eq!(m.layout().forward.layers[0].input_width, 64);
    }

    #[test]
    fn full_size_profile_dimensions() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.first_input_width(), 500);
        assert_eq!(cfg.layer_width(0), 1150);
        assert_eq!(cfg.layer_width(2), 400);
    }
}
