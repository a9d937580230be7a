//! Trainable parameters, optimizer state and checkpoints.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::{attention_layer, final_embeddings, AttentionError, AttentionGraph, AttentionParams, AttentionVars};
use crate::encoder::{encode, propagate, NormalizedAdjacency};
use crate::graph::InteractionGraph;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};
use crate::train::{TrainConfig, Variant};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Standard deviation of the initial ego embeddings.
pub const EGO_INIT_STD: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("checkpoint not found: {0}")]
    NotFound(String),
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("checkpoint holds {got} nodes, graph has {want}")]
    Nodes { got: usize, want: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parameter names, in optimizer order.
pub const PARAM_NAMES: [&str; 4] = ["ego", "w_query", "w_key", "w_value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub version: u32,
    pub config: TrainConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub ego: Tensor,
    pub attention: AttentionParams,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
}

/// Parameter variables of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub ego: Var,
    pub attention: AttentionVars,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 4] {
        [self.ego, self.attention.query, self.attention.key, self.attention.value]
    }
}

impl ModelState {
    pub fn init(config: &TrainConfig, num_users: usize, num_items: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let n = num_users + num_items;
        let normal = Normal::new(0.0, EGO_INIT_STD).expect("valid normal");
        let ego = Tensor::new(n, config.dim, (0..n * config.dim).map(|_| normal.sample(rng)).collect())?;
        let attention = AttentionParams::init(config.dim, config.heads, rng)?;
        let adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &[&ego, &attention.query, &attention.key, &attention.value],
        );
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            num_users,
            num_items,
            ego,
            attention,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            ego: tape.param(self.ego.clone()),
            attention: AttentionVars {
                heads: self.attention.heads,
                query: tape.param(self.attention.query.clone()),
                key: tape.param(self.attention.key.clone()),
                value: tape.param(self.attention.value.clone()),
            },
        }
    }

    /// Applies one Adam update with gradients in [`PARAM_NAMES`] order.
    pub fn apply_gradients(&mut self, grads: &[Tensor; 4]) -> Result<(), ModelError> {
        let refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = [
            &mut self.ego,
            &mut self.attention.query,
            &mut self.attention.key,
            &mut self.attention.value,
        ];
        self.adam.step(&mut params, &refs, &PARAM_NAMES)?;
        self.step += 1;
        Ok(())
    }

    /// Inference embeddings `ĥ` over the full graph `train`: encoder on the
    /// unmasked adjacency and the decoder over the graph's own edges.
    pub fn embeddings(&self, train: &InteractionGraph) -> Result<Tensor, ModelError> {
        if train.num_nodes() != self.num_nodes() {
            return Err(ModelError::Nodes {
                got: self.num_nodes(),
                want: train.num_nodes(),
            });
        }
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let vars = self.bind(&mut tape);
        let adjacency = NormalizedAdjacency::new(train);
        let attention = AttentionGraph::over_graph(train);
        let h = forward_embeddings(&mut tape, vars, &adjacency, Some(&attention), &self.config)?;
        Ok(tape.value(h).clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut out, self)?;
        std::io::Write::flush(&mut out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        if !path.is_file() {
            return Err(ModelError::NotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let state: ModelState = serde_json::from_str(&text)?;
        if state.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(state.version));
        }
        Ok(state)
    }
}

/// Encoder, decoder (or the extra propagation of the no-attention variant)
/// and layer aggregation.
pub fn forward_embeddings(
    tape: &mut Tape,
    vars: ParamVars,
    adjacency: &NormalizedAdjacency,
    attention: Option<&AttentionGraph>,
    config: &TrainConfig,
) -> Result<Var, ModelError> {
    let layers = encode(tape, vars.ego, adjacency, config.layers)?;
    let last = *layers.last().expect("encoder returns at least one layer");
    let decoded = match (config.variant, attention) {
        (Variant::NoAttention, _) => Some(propagate(tape, last, adjacency)?),
        (_, Some(graph)) => Some(attention_layer(tape, last, graph, vars.attention)?),
        (_, None) => None,
    };
    Ok(final_embeddings(tape, &layers, decoded)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let config = TrainConfig {
            dim: 8,
            heads: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = ModelState::init(&config, 3, 4, &mut rng).unwrap();
        state.ego.data_mut()[0] = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        state.save(&path).unwrap();
        let back = ModelState::load(&path).unwrap();
        assert_eq!(back, state);
        assert!(matches!(
            ModelState::load(&dir.path().join("missing.json")),
            Err(ModelError::NotFound(_))
        ));
    }

    #[test]
    fn embeddings_check_node_count() {
        let config = TrainConfig {
            dim: 4,
            heads: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = ModelState::init(&config, 2, 2, &mut rng).unwrap();
        let g = InteractionGraph::from_edges(2, 2, [(0, 0), (1, 1)]).unwrap();
        assert_eq!(state.embeddings(&g).unwrap().shape(), [4, 4]);
        let wrong = InteractionGraph::empty(3, 2);
        assert!(state.embeddings(&wrong).is_err());
    }
}
