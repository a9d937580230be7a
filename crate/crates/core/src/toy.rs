//! Five-user, six-item fixture and the joint-loss gradient check.

use crate::data::DatasetSplit;
use crate::graph::InteractionGraph;
use crate::mask::Neighborhoods;
use crate::model::ModelState;
use crate::tensor::{finite_diff_check, GradCheckError, GradCheckReport, Tape, Tensor};
use crate::train::{draw_mask, joint_loss, stream_rng, BatchInputs, StepInputs, Stream, TrainConfig, TrainError};

pub const TOY_USERS: usize = 5;
pub const TOY_ITEMS: usize = 6;

pub fn toy_graph() -> InteractionGraph {
    InteractionGraph::from_edges(
        TOY_USERS,
        TOY_ITEMS,
        [
            (0, 0),
            (0, 1),
            (0, 2),
            (1, 1),
            (1, 3),
            (2, 2),
            (2, 3),
            (2, 4),
            (3, 4),
            (3, 5),
            (4, 0),
            (4, 5),
        ],
    )
    .expect("toy edges are in range")
}

/// Toy split: everything in train, one held-out validation and test item
/// per user.
pub fn toy_split() -> DatasetSplit {
    DatasetSplit {
        train: toy_graph(),
        validation: vec![(0, 3), (1, 5), (2, 0), (3, 1), (4, 2)],
        test: vec![(0, 4), (1, 0), (2, 5), (3, 2), (4, 3)],
        seed: 0,
        ratios: [0.7, 0.1, 0.2],
    }
}

pub fn toy_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        centric: 2,
        hops: 1,
        rho: 0.5,
        remask_period: 1000,
        lambda1: 0.1,
        lambda2: 1e-4,
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 30,
        patience: 30,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
}

/// Finite-difference check of the whole joint loss over every parameter
/// with the mask plan and attention graph drawn once and held fixed.
pub fn joint_grad_check(
    config: &TrainConfig,
    graph: &InteractionGraph,
    samples: usize,
    eps: f64,
) -> Result<GradCheckReport, ToyError> {
    let state = ModelState::init(config, graph.num_users(), graph.num_items(), &mut stream_rng(config.seed, Stream::Init))
        .map_err(TrainError::from)?;
    let hoods = Neighborhoods::new(graph, config.hops).map_err(TrainError::from)?;
    let (plan, _) = draw_mask(graph, &hoods, &state.ego, config.centric, config, &mut stream_rng(config.seed, Stream::Mask))?;
    let inputs = StepInputs::build(plan, config, &mut stream_rng(config.seed, Stream::Attention))?;
    let batch = BatchInputs::new(graph.edges(), &inputs.plan.centric, graph.num_users(), graph.num_items());
    let params = vec![
        state.ego.clone(),
        state.attention.query.clone(),
        state.attention.key.clone(),
        state.attention.value.clone(),
    ];
    let mut probe = state;
    let report = finite_diff_check(
        &params,
        |p: &[Tensor]| -> Result<(f64, Vec<Tensor>), TrainError> {
            probe.ego = p[0].clone();
            probe.attention.query = p[1].clone();
            probe.attention.key = p[2].clone();
            probe.attention.value = p[3].clone();
            let mut tape = Tape::new();
            let vars = probe.bind(&mut tape);
            let loss = joint_loss(&mut tape, vars, &hoods, &inputs, &batch, config)?;
            let grads = tape.backward(loss.total)?;
            Ok((
                tape.value(loss.total).item(),
                vars.all().iter().map(|&v| grads.get_or_zeros(&tape, v)).collect(),
            ))
        },
        eps,
        samples,
        config.seed,
    )?;
    Ok(report)
}
