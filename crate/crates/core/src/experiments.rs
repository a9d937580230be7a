//! Test-set evaluation, module ablation, noise robustness and sparsity
//! breakdowns.

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::eval::{evaluate_ranker, popularity_baseline, MetricsReport, NoiseInfo, Ranker};
use crate::graph::{noise_edge_count, sparsity_groups, GraphError, SparsityGroup};
use crate::model::ModelState;
use crate::train::{train, TrainConfig, TrainError, TrainOutcome, Variant};

/// Default user-degree group bounds for the sparsity breakdown.
pub const SPARSITY_BOUNDS: [usize; 5] = [0, 5, 10, 15, 20];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("noise ratio {0} must lie in [0, 1]")]
    NoiseRatio(f64),
}

/// Test-set report for a trained model.
pub fn evaluate_model(
    state: &ModelState,
    split: &DatasetSplit,
    cutoffs: &[usize],
    groups: &[SparsityGroup],
    label: &str,
) -> Result<MetricsReport, ExperimentError> {
    let h = state.embeddings(&split.train)?;
    Ok(evaluate_ranker(
        Ranker::Embeddings(&h),
        &split.train,
        &split.test,
        cutoffs,
        groups,
        label,
        &state.config.fingerprint(),
    )?)
}

pub fn evaluate_popularity(
    split: &DatasetSplit,
    cutoffs: &[usize],
    groups: &[SparsityGroup],
) -> Result<MetricsReport, ExperimentError> {
    let pop = popularity_baseline(&split.train);
    Ok(evaluate_ranker(pop.ranker(), &split.train, &split.test, cutoffs, groups, "popularity", "")?)
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Trains and evaluates one variant; everything else in `config` is kept.
pub fn run_ablation(
    variant: Variant,
    config: &TrainConfig,
    split: &DatasetSplit,
    cutoffs: &[usize],
) -> Result<VariantRun, ExperimentError> {
    let config = TrainConfig {
        variant,
        ..config.clone()
    };
    let outcome = train(&config, split)?;
    let report = evaluate_model(&outcome.state, split, cutoffs, &[], variant.tag())?;
    Ok(VariantRun {
        variant,
        outcome,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub report: MetricsReport,
    /// `(clean − noisy) / clean` Recall@20 relative to the ratio-0 point.
    pub degradation: Option<f64>,
}

/// `(clean − noisy) / clean`, or `None` for a zero clean score.
pub fn degradation(clean: f64, noisy: f64) -> Option<f64> {
    (clean != 0.0).then(|| (clean - noisy) / clean)
}

/// Retrains on the train graph with `ratio·|E|` added random non-edges for
/// each ratio; validation and test edges are untouched. Degradations are
/// measured against the first zero ratio in the list, if any.
pub fn noise_sweep(
    ratios: &[f64],
    config: &TrainConfig,
    split: &DatasetSplit,
    cutoffs: &[usize],
) -> Result<Vec<NoisePoint>, ExperimentError> {
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(ExperimentError::NoiseRatio(bad));
    }
    let mut reports = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let (noisy, added) = split.train.inject_noise(ratio, config.seed)?;
        debug_assert_eq!(added.len(), noise_edge_count(ratio, split.train.num_edges()));
        let noisy_split = split.with_train(noisy);
        let outcome = train(config, &noisy_split)?;
        // rankings exclude only the clean training items
        let h = outcome.state.embeddings(&noisy_split.train)?;
        let mut report = evaluate_ranker(
            Ranker::Embeddings(&h),
            &split.train,
            &split.test,
            cutoffs,
            &[],
            &format!("{}@noise={ratio}", config.variant.tag()),
            &config.fingerprint(),
        )?;
        report.noise = Some(NoiseInfo {
            ratio,
            added_edges: added.len(),
            train_edges: noisy_split.train.num_edges(),
        });
        reports.push(report);
    }
    let clean = ratios
        .iter()
        .position(|&r| r == 0.0)
        .and_then(|k| reports[k].recall(20));
    Ok(reports
        .into_iter()
        .map(|report| NoisePoint {
            degradation: clean.and_then(|c| report.recall(20).and_then(|n| degradation(c, n))),
            report,
        })
        .collect())
}

/// Per-group test metrics for a trained model.
pub fn sparsity_report(
    state: &ModelState,
    split: &DatasetSplit,
    bounds: &[usize],
    cutoffs: &[usize],
) -> Result<MetricsReport, ExperimentError> {
    let groups = sparsity_groups(&split.train, bounds)?;
    evaluate_model(state, split, cutoffs, &groups, "sparsity")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degradation_arithmetic() {
        assert!((degradation(0.2, 0.15).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(degradation(0.0, 0.1), None);
        assert_eq!(degradation(0.5, 0.5), Some(0.0));
    }
}
