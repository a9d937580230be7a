//! Joint loss and the training loop with periodic re-masking.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSplit;
use crate::decoder::{sample_attention_graph, AttentionError, AttentionGraph};
use crate::encoder::NormalizedAdjacency;
use crate::eval::{evaluate_ranker, EvalError, Ranker};
use crate::graph::InteractionGraph;
use crate::loss::{rec_loss, recon_loss, uniformity_loss, EdgeEndpoints, UniformitySets};
use crate::mask::{
    gumbel_perturb, mask_edges, random_mask, relatedness_from, relatedness_on_tape, Neighborhoods, select_centric, MaskError,
    MaskPlan, Readout,
};
use crate::model::{forward_embeddings, ModelError, ModelState, ParamVars};
use crate::tensor::{Precision, Tape, Tensor, TensorError, Var};

/// Model variants for the module ablation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Decoder replaced by one extra propagation step.
    #[serde(rename = "-GSA")]
    NoAttention,
    /// No infomax and no reconstruction loss.
    #[serde(rename = "-M")]
    NoMaskLosses,
    /// No infomax loss.
    #[serde(rename = "-IM")]
    NoInfomax,
    /// Random edge masking with the learned policy's edge count.
    #[serde(rename = "-L2M")]
    RandomMask,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAttention,
        Variant::NoMaskLosses,
        Variant::NoInfomax,
        Variant::RandomMask,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "-GSA",
            Variant::NoMaskLosses => "-M",
            Variant::NoInfomax => "-IM",
            Variant::RandomMask => "-L2M",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != Variant::NoAttention
    }

    pub fn uses_recon(self) -> bool {
        self != Variant::NoMaskLosses
    }

    pub fn uses_infomax(self) -> bool {
        !matches!(self, Variant::NoMaskLosses | Variant::NoInfomax)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bare = s.trim().trim_start_matches('-').to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().trim_start_matches('-').eq_ignore_ascii_case(&bare))
            .ok_or_else(|| format!("unknown variant `{s}` (expected full|-GSA|-M|-IM|-L2M)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Centric nodes per re-mask; 0 disables masking.
    pub centric: usize,
    pub hops: usize,
    pub rho: f64,
    pub remask_period: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub temperature: f64,
    pub readout: Readout,
    pub variant: Variant,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            centric: 200,
            hops: 2,
            rho: 0.2,
            remask_period: 10,
            lambda1: 1.0,
            lambda2: 1e-5,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 50,
            patience: 10,
            seed: 2023,
            temperature: 1.0,
            readout: Readout::Mean,
            variant: Variant::Full,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid config `{key}`: {reason}")]
pub struct ConfigError {
    pub key: &'static str,
    pub reason: String,
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        key,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(invalid("heads", format!("{} does not divide dim {}", self.heads, self.dim)));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(invalid("layers", "must be 1, 2 or 3"));
        }
        if !(1..=3).contains(&self.hops) {
            return Err(invalid("hops", "must be 1, 2 or 3"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid("rho", "must lie in (0, 1]"));
        }
        if self.remask_period == 0 {
            return Err(invalid("remask_period", "must be positive"));
        }
        if !(self.lambda1 == 0.0 || (1e-4..=10.0).contains(&self.lambda1)) {
            return Err(invalid("lambda1", "must be 0 or lie in [1e-4, 10]"));
        }
        if !(self.lambda2 == 0.0 || (1e-8..=1e-3).contains(&self.lambda2)) {
            return Err(invalid("lambda2", "must be 0 or lie in [1e-8, 1e-3]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        Ok(())
    }

    /// Short hash of the serialized config.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training graph has no edges")]
    EmptyGraph,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: u64,
        last_good: Box<ModelState>,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Sampling state held fixed between re-masks.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub plan: MaskPlan,
    pub adjacency: NormalizedAdjacency,
    pub attention: Option<AttentionGraph>,
    pub masked: EdgeEndpoints,
}

impl StepInputs {
    pub fn build(plan: MaskPlan, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let attention = if config.variant.uses_attention() {
            Some(sample_attention_graph(&plan, config.rho, rng)?)
        } else {
            None
        };
        Ok(Self {
            adjacency: NormalizedAdjacency::new(&plan.surviving),
            masked: EdgeEndpoints::from_user_items(&plan.masked_edges, plan.surviving.num_users()),
            attention,
            plan,
        })
    }
}

/// Index sets of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub edges: EdgeEndpoints,
    pub uniformity: UniformitySets,
    /// Batch nodes plus current centric nodes, sorted.
    pub infomax_nodes: Vec<usize>,
}

impl BatchInputs {
    pub fn new(batch: &[(usize, usize)], centric: &[usize], num_users: usize, num_items: usize) -> Self {
        let mut users: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<usize> = batch.iter().map(|&(_, i)| num_users + i).collect();
        items.sort_unstable();
        items.dedup();
        let mut infomax_nodes: Vec<usize> = users.iter().chain(&items).chain(centric).copied().collect();
        infomax_nodes.sort_unstable();
        infomax_nodes.dedup();
        Self {
            edges: EdgeEndpoints::from_user_items(batch, num_users),
            uniformity: UniformitySets::new(users, items, num_users, num_items),
            infomax_nodes,
        }
    }
}

/// Loss terms as tape variables. `weight_decay` is the raw `‖Θ‖²`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec: Var,
    pub recon: Var,
    pub uniformity: Var,
    pub infomax: Var,
    pub weight_decay: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub recon: f64,
    pub uniformity: f64,
    pub infomax: f64,
    pub weight_decay: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, vars: &LossVars) -> Self {
        Self {
            rec: tape.value(vars.rec).item(),
            recon: tape.value(vars.recon).item(),
            uniformity: tape.value(vars.uniformity).item(),
            infomax: tape.value(vars.infomax).item(),
            weight_decay: tape.value(vars.weight_decay).item(),
            total: tape.value(vars.total).item(),
        }
    }

    /// `rec + λ1 (uniformity + infomax + recon) + λ2 ‖Θ‖²`.
    pub fn recompose(&self, config: &TrainConfig) -> f64 {
        self.rec + config.lambda1 * (self.uniformity + self.infomax + self.recon) + config.lambda2 * self.weight_decay
    }

    fn is_finite(&self) -> bool {
        [self.rec, self.recon, self.uniformity, self.infomax, self.weight_decay, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Full joint loss for one batch under fixed sampling.
pub fn joint_loss(
    tape: &mut Tape,
    vars: ParamVars,
    hoods: &Neighborhoods,
    inputs: &StepInputs,
    batch: &BatchInputs,
    config: &TrainConfig,
) -> Result<LossVars, TrainError> {
    let h = forward_embeddings(tape, vars, &inputs.adjacency, inputs.attention.as_ref(), config)?;
    let rec = rec_loss(tape, h, &batch.edges)?;
    let recon = if config.variant.uses_recon() {
        recon_loss(tape, h, &inputs.masked)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let uniformity = uniformity_loss(tape, h, &batch.uniformity, config.temperature)?;
    let infomax = if config.variant.uses_infomax() && !inputs.plan.centric.is_empty() {
        let s = relatedness_on_tape(tape, hoods, vars.ego, &batch.infomax_nodes, config.readout)?;
        let m = tape.mean(s)?;
        tape.scale(m, -1.0)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let mut weight_decay = tape.sum_squares(vars.ego)?;
    if config.variant.uses_attention() {
        for w in [vars.attention.query, vars.attention.key, vars.attention.value] {
            let sq = tape.sum_squares(w)?;
            weight_decay = tape.add(weight_decay, sq)?;
        }
    }
    let ssl = tape.add(uniformity, infomax)?;
    let ssl = tape.add(ssl, recon)?;
    let ssl = tape.scale(ssl, config.lambda1)?;
    let decay = tape.scale(weight_decay, config.lambda2)?;
    let total = tape.add(rec, ssl)?;
    let total = tape.add(total, decay)?;
    Ok(LossVars {
        rec,
        recon,
        uniformity,
        infomax,
        weight_decay,
        total,
    })
}

/// Named random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Mask = 1,
    Attention = 2,
    Shuffle = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Learned (or, for the random-mask variant, count-matched random) mask
/// plan from the current ego embeddings.
pub fn draw_mask(
    train: &InteractionGraph,
    hoods: &Neighborhoods,
    ego: &Tensor,
    centric: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MaskPlan, usize), TrainError> {
    if centric == 0 {
        return Ok((MaskPlan::unmasked(train), 0));
    }
    let scores = relatedness_from(hoods, ego, config.readout)?;
    let perturbed = gumbel_perturb(&scores, rng);
    let eligible: Vec<bool> = (0..train.num_nodes()).map(|v| train.degree(v) > 0).collect();
    let chosen = select_centric(&perturbed, centric.min(train.num_nodes()), Some(&eligible))?;
    let plan = mask_edges(train, &chosen, config.hops)?;
    let learned = plan.masked_edges.len();
    if config.variant == Variant::RandomMask {
        let mut random = random_mask(train, learned, rng)?;
        random.centric = chosen;
        return Ok((random, learned));
    }
    Ok((plan, learned))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub rec: f64,
    pub recon: f64,
    pub uniformity: f64,
    pub infomax: f64,
    pub weight_decay: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemaskRecord {
    pub step: u64,
    pub centric: usize,
    /// Edges the learned policy selected.
    pub learned_masked: usize,
    /// Edges actually removed.
    pub masked: usize,
    pub surviving: usize,
    pub active_nodes: usize,
    pub sampled_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub rec: f64,
    pub recon: f64,
    pub uniformity: f64,
    pub infomax: f64,
    pub weight_decay: f64,
    pub total: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub remasks: Vec<RemaskRecord>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    /// `loss_log.jsonl`, `epoch_log.jsonl` and `remask_log.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        write_jsonl(&dir.join("loss_log.jsonl"), &self.steps)?;
        write_jsonl(&dir.join("epoch_log.jsonl"), &self.epochs)?;
        write_jsonl(&dir.join("remask_log.jsonl"), &self.remasks)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        writeln!(out)?;
    }
    out.flush()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation state (the last state when there is no validation
    /// data).
    pub state: ModelState,
    pub log: TrainLog,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Re-masks in a row that isolate every batch node before S is halved.
pub const DISCONNECT_LIMIT: usize = 5;

pub fn validation_recall(state: &ModelState, split: &DatasetSplit) -> Result<Option<(f64, f64)>, TrainError> {
    if split.validation.is_empty() {
        return Ok(None);
    }
    let h = state.embeddings(&split.train)?;
    let report = evaluate_ranker(Ranker::Embeddings(&h), &split.train, &split.validation, &[20], &[], "val", "")?;
    Ok(Some((report.metrics[0].recall, report.metrics[0].ndcg)))
}

pub fn train(config: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train = &split.train;
    if train.num_edges() == 0 {
        return Err(TrainError::EmptyGraph);
    }
    let (nu, ni) = (train.num_users(), train.num_items());
    let mut state = ModelState::init(config, nu, ni, &mut stream_rng(config.seed, Stream::Init))?;
    let mut mask_rng = stream_rng(config.seed, Stream::Mask);
    let mut attention_rng = stream_rng(config.seed, Stream::Attention);
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let hoods = Neighborhoods::new(train, config.hops)?;

    let edges = train.edges().to_vec();
    let mut order: Vec<usize> = (0..edges.len()).collect();
    let mut log = TrainLog::default();
    let mut centric = config.centric;
    let mut inputs: Option<StepInputs> = None;
    let mut disconnected = 0usize;
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 6];
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch_edges: Vec<(usize, usize)> = chunk.iter().map(|&k| edges[k]).collect();
            if inputs.is_none() || state.step % config.remask_period == 0 {
                let (plan, learned) = draw_mask(train, &hoods, &state.ego, centric, config, &mut mask_rng)?;
                let built = StepInputs::build(plan, config, &mut attention_rng)?;
                log.remasks.push(RemaskRecord {
                    step: state.step,
                    centric: built.plan.centric.len(),
                    learned_masked: learned,
                    masked: built.plan.masked_edges.len(),
                    surviving: built.plan.surviving.num_edges(),
                    active_nodes: built.attention.as_ref().map_or(0, |a| a.active.len()),
                    sampled_pairs: built.attention.as_ref().map_or(0, |a| a.sampled_pairs.len()),
                });
                let surviving = &built.plan.surviving;
                let isolated = batch_edges
                    .iter()
                    .all(|&(u, i)| surviving.user_degree(u) == 0 && surviving.item_degree(i) == 0);
                disconnected = if centric > 0 && isolated { disconnected + 1 } else { 0 };
                if disconnected > DISCONNECT_LIMIT {
                    let reduced = (centric / 2).max(1);
                    let message = format!(
                        "step {}: masking isolated every batch node {} re-masks in a row; centric count {} -> {}",
                        state.step, disconnected, centric, reduced
                    );
                    log::warn!("{message}");
                    log.warnings.push(message);
                    centric = reduced;
                    disconnected = 0;
                }
                inputs = Some(built);
            }
            let step_inputs = inputs.as_ref().expect("inputs drawn above");
            let batch = BatchInputs::new(&batch_edges, &step_inputs.plan.centric, nu, ni);

            let mut tape = Tape::with_precision(config.precision);
            tape.set_check_finite(false);
            let vars = state.bind(&mut tape);
            let losses = joint_loss(&mut tape, vars, &hoods, step_inputs, &batch, config)?;
            let parts = LossBreakdown::read(&tape, &losses);
            let grads = if parts.is_finite() {
                let g = tape.backward(losses.total)?;
                Some(vars.all().map(|v| g.get_or_zeros(&tape, v)))
            } else {
                None
            };
            let Some(grads) = grads.filter(|g| g.iter().all(Tensor::is_finite)) else {
                log::error!("non-finite loss at epoch {epoch}, step {}", state.step);
                return Err(TrainError::Diverged {
                    epoch,
                    step: state.step,
                    last_good: Box::new(state),
                });
            };
            log.steps.push(StepRecord {
                epoch,
                step: state.step,
                rec: parts.rec,
                recon: parts.recon,
                uniformity: parts.uniformity,
                infomax: parts.infomax,
                weight_decay: parts.weight_decay,
                total: parts.total,
            });
            for (acc, x) in sums.iter_mut().zip([
                parts.rec,
                parts.recon,
                parts.uniformity,
                parts.infomax,
                parts.weight_decay,
                parts.total,
            ]) {
                *acc += x;
            }
            steps += 1;
            state.apply_gradients(&grads)?;
        }
        state.epoch = epoch + 1;
        let validation = validation_recall(&state, split)?;
        let mean = |k: usize| sums[k] / steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            steps,
            rec: mean(0),
            recon: mean(1),
            uniformity: mean(2),
            infomax: mean(3),
            weight_decay: mean(4),
            total: mean(5),
            val_recall: validation.map(|v| v.0),
            val_ndcg: validation.map(|v| v.1),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} rec {:.5} val recall@20 {:?} ({:.1}s)",
            record.total,
            record.rec,
            record.val_recall,
            record.wall_seconds
        );
        log.epochs.push(record);

        if let Some((recall, _)) = validation {
            if best.as_ref().is_none_or(|(b, _, _)| recall > *b) {
                best = Some((recall, epoch, state.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (state, best_epoch) = match best {
        Some((_, epoch, best_state)) => (best_state, Some(epoch)),
        None => (state, None),
    };
    Ok(TrainOutcome {
        state,
        log,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert_eq!("gsa".parse::<Variant>().unwrap(), Variant::NoAttention);
        assert!("-X".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            heads: 3,
            ..TrainConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().key, "heads");
        let bad = TrainConfig {
            lambda1: 50.0,
            ..TrainConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().key, "lambda1");
        let off = TrainConfig {
            lambda1: 0.0,
            centric: 0,
            ..TrainConfig::default()
        };
        assert!(off.validate().is_ok());
        assert_ne!(TrainConfig::default().fingerprint(), off.fingerprint());
    }

    #[test]
    fn batch_sets_are_sorted_unique() {
        let b = BatchInputs::new(&[(1, 0), (0, 2), (1, 2)], &[4, 0], 2, 3);
        assert_eq!(&*b.uniformity.batch_users, &[0, 1]);
        assert_eq!(&*b.uniformity.batch_items, &[2, 4]);
        assert_eq!(b.infomax_nodes, vec![0, 1, 2, 4]);
        assert_eq!(b.edges.len(), 3);
    }

    #[test]
    fn streams_are_independent() {
        use rand::Rng;
        let a: u64 = stream_rng(1, Stream::Mask).random();
        let b: u64 = stream_rng(1, Stream::Shuffle).random();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(1, Stream::Mask).random::<u64>());
    }
    fn toy_run(config: &TrainConfig) -> TrainOutcome {
        train(config, &crate::toy::toy_split()).unwrap()
    }

    #[test]
    fn toy_training_invariants() {
        let config = crate::toy::toy_config();
        let outcome = toy_run(&config);
        assert_eq!(outcome.log.epochs.len(), config.epochs);
        for s in &outcome.log.steps {
            let parts = LossBreakdown {
                rec: s.rec,
                recon: s.recon,
                uniformity: s.uniformity,
                infomax: s.infomax,
                weight_decay: s.weight_decay,
                total: s.total,
            };
            assert!((parts.recompose(&config) - s.total).abs() < 1e-10);
        }
        let totals: Vec<f64> = outcome.log.epochs.iter().map(|e| e.total).collect();
        let down = totals.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.8 * (totals.len() - 1) as f64, "{totals:?}");
        assert!(outcome.log.steps.iter().any(|s| s.infomax != 0.0 && s.recon != 0.0));
        let again = toy_run(&config).log;
        assert_eq!(again.steps, outcome.log.steps);
        assert_eq!(again.remasks, outcome.log.remasks);
    }

    #[test]
    fn alignment_only_when_ssl_is_off() {
        let config = TrainConfig {
            lambda1: 0.0,
            centric: 0,
            epochs: 5,
            ..crate::toy::toy_config()
        };
        let log = toy_run(&config).log;
        assert!(log.steps.iter().all(|s| s.recon == 0.0 && s.infomax == 0.0));
        assert!(log.remasks.iter().all(|r| r.masked == 0));
    }

    #[test]
    fn masked_edges_leave_the_adjacency() {
        let config = crate::toy::toy_config();
        let g = crate::toy::toy_graph();
        let state = ModelState::init(&config, 5, 6, &mut stream_rng(3, Stream::Init)).unwrap();
        let hoods = Neighborhoods::new(&g, config.hops).unwrap();
        let (plan, learned) = draw_mask(&g, &hoods, &state.ego, 2, &config, &mut stream_rng(3, Stream::Mask)).unwrap();
        assert_eq!(learned, plan.masked_edges.len());
        assert!(!plan.masked_edges.is_empty());
        let inputs = StepInputs::build(plan, &config, &mut stream_rng(3, Stream::Attention)).unwrap();
        for &(u, i) in g.edges() {
            let coefficient = inputs.adjacency.edge_coefficient(u, 5 + i);
            if inputs.plan.masked_edges.contains(&(u, i)) {
                assert_eq!(coefficient, 0.0);
            } else {
                assert!(coefficient > 0.0);
            }
        }
    }

    #[test]
    fn infomax_moves_ego_embeddings() {
        let config = crate::toy::toy_config();
        let g = crate::toy::toy_graph();
        let state = ModelState::init(&config, 5, 6, &mut stream_rng(5, Stream::Init)).unwrap();
        let mut tape = Tape::new();
        let ego = tape.param(state.ego.clone());
        let nodes: Vec<usize> = (0..g.num_nodes()).collect();
        let hoods = Neighborhoods::new(&g, 1).unwrap();
        let s = crate::mask::relatedness_on_tape(&mut tape, &hoods, ego, &nodes, config.readout).unwrap();
        let m = tape.mean(s).unwrap();
        let loss = tape.scale(m, -1.0).unwrap();
        let grad = tape.backward(loss).unwrap().get_or_zeros(&tape, ego);
        assert!(grad.sum_squares() > 0.0);
    }
}
