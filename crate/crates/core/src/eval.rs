//! All-rank top-N evaluation.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{InteractionGraph, SparsityGroup};
use crate::tensor::{gemm, Tensor};

/// Version of the JSONL/CSV report layout.
pub const REPORT_SCHEMA: u32 = 1;

pub const DEFAULT_CUTOFFS: [usize; 2] = [20, 40];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cutoff must be at least 1")]
    Cutoff,
    #[error("no user has a held-out item")]
    NoUsers,
    #[error("embedding table has {got} rows, graph has {want} nodes")]
    Shape { got: usize, want: usize },
    #[error("held-out edge ({0}, {1}) out of range")]
    Edge(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Items not in `train_items` (sorted), ordered by descending score with
/// ties to the smaller id. `limit` truncates to the top entries.
pub fn all_rank(scores: &[f64], train_items: &[usize], limit: Option<usize>) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| train_items.binary_search(i).is_err())
        .collect();
    let order = rank_order(scores);
    match limit {
        Some(n) if n < candidates.len() => {
            if n == 0 {
                return Vec::new();
            }
            candidates.select_nth_unstable_by(n - 1, &order);
            candidates.truncate(n);
            candidates.sort_unstable_by(&order);
        }
        _ => candidates.sort_unstable_by(&order),
    }
    candidates
}

/// Recall@N and NDCG@N of one ranking; `None` when `test_items` is empty.
/// Gains are `1 / log2(pos + 1)` for 1-indexed positions, and the ideal
/// DCG places `min(|test|, N)` hits first.
pub fn recall_ndcg(ranking: &[usize], test_items: &[usize], cutoff: usize) -> Result<Option<(f64, f64)>, EvalError> {
    if cutoff == 0 {
        return Err(EvalError::Cutoff);
    }
    if test_items.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranking.iter().take(cutoff).enumerate() {
        if test_items.contains(item) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..test_items.len().min(cutoff))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    Ok(Some((hits as f64 / test_items.len() as f64, dcg / ideal)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub n: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub label: String,
    pub users: usize,
    pub metrics: Vec<CutoffMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseInfo {
    pub ratio: f64,
    pub added_edges: usize,
    pub train_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub label: String,
    pub fingerprint: String,
    pub users_evaluated: usize,
    pub metrics: Vec<CutoffMetrics>,
    #[serde(default)]
    pub groups: Vec<GroupMetrics>,
    #[serde(default)]
    pub noise: Option<NoiseInfo>,
}

impl MetricsReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.n == n).map(|m| m.recall)
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.n == n).map(|m| m.ndcg)
    }
}

/// Per-user metrics at each cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub values: Vec<(f64, f64)>,
}

/// How items are scored for a user.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    /// Final embeddings for all `num_users + num_items` nodes.
    Embeddings(&'a Tensor),
    /// Global item scores shared by every user.
    Global(&'a [f64]),
}

/// Held-out items grouped per user, each list sorted.
pub fn group_by_user(edges: &[(usize, usize)], num_users: usize) -> Vec<Vec<usize>> {
    let mut per_user = vec![Vec::new(); num_users];
    for &(u, i) in edges {
        per_user[u].push(i);
    }
    per_user.iter_mut().for_each(|items| {
        items.sort_unstable();
        items.dedup();
    });
    per_user
}

const USER_BLOCK: usize = 256;

/// Metrics for every user with at least one held-out item, in user order.
pub fn per_user_metrics(
    ranker: Ranker<'_>,
    train: &InteractionGraph,
    held_out: &[(usize, usize)],
    cutoffs: &[usize],
) -> Result<Vec<UserMetrics>, EvalError> {
    if cutoffs.contains(&0) {
        return Err(EvalError::Cutoff);
    }
    let (nu, ni) = (train.num_users(), train.num_items());
    if let Some(&(u, i)) = held_out.iter().find(|&&(u, i)| u >= nu || i >= ni) {
        return Err(EvalError::Edge(u, i));
    }
    match ranker {
        Ranker::Embeddings(h) if h.rows() != nu + ni => {
            return Err(EvalError::Shape {
                got: h.rows(),
                want: nu + ni,
            })
        }
        Ranker::Global(s) if s.len() != ni => return Err(EvalError::Shape { got: s.len(), want: ni }),
        _ => {}
    }
    let tests = group_by_user(held_out, nu);
    let users: Vec<usize> = (0..nu).filter(|&u| !tests[u].is_empty()).collect();
    let deepest = cutoffs.iter().copied().max().unwrap_or(0);

    let blocks: Vec<Vec<UserMetrics>> = users
        .par_chunks(USER_BLOCK)
        .map(|block| {
            let scores = block_scores(ranker, block, nu, ni);
            block
                .iter()
                .enumerate()
                .map(|(r, &u)| {
                    let row = &scores[r * ni..(r + 1) * ni];
                    let ranking = all_rank(row, train.user_items(u), Some(deepest));
                    let values = cutoffs
                        .iter()
                        .map(|&n| {
                            recall_ndcg(&ranking, &tests[u], n)
                                .ok()
                                .flatten()
                                .unwrap_or((0.0, 0.0))
                        })
                        .collect();
                    UserMetrics { user: u, values }
                })
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

fn block_scores(ranker: Ranker<'_>, users: &[usize], nu: usize, ni: usize) -> Vec<f64> {
    match ranker {
        Ranker::Embeddings(h) => {
            let d = h.cols();
            let a: Vec<f64> = users.iter().flat_map(|&u| h.row(u).iter().copied()).collect();
            let items = &h.data()[nu * d..(nu + ni) * d];
            let mut out = vec![0.0; users.len() * ni];
            gemm(&a, items, &mut out, users.len(), d, ni, true);
            out
        }
        Ranker::Global(s) => users.iter().flat_map(|_| s.iter().copied()).collect(),
    }
}

/// Mean per cutoff over the given users' metrics.
pub fn aggregate(users: &[&UserMetrics], cutoffs: &[usize]) -> Vec<CutoffMetrics> {
    cutoffs
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let (mut r, mut g) = (0.0, 0.0);
            for m in users {
                r += m.values[k].0;
                g += m.values[k].1;
            }
            let count = users.len().max(1) as f64;
            CutoffMetrics {
                n,
                recall: r / count,
                ndcg: g / count,
            }
        })
        .collect()
}

/// Full report: overall means plus per-sparsity-group breakdowns.
pub fn evaluate_ranker(
    ranker: Ranker<'_>,
    train: &InteractionGraph,
    held_out: &[(usize, usize)],
    cutoffs: &[usize],
    groups: &[SparsityGroup],
    label: &str,
    fingerprint: &str,
) -> Result<MetricsReport, EvalError> {
    let per_user = per_user_metrics(ranker, train, held_out, cutoffs)?;
    if per_user.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let all: Vec<&UserMetrics> = per_user.iter().collect();
    let group_metrics = groups
        .iter()
        .map(|g| {
            let members: Vec<&UserMetrics> = per_user
                .iter()
                .filter(|m| g.users.binary_search(&m.user).is_ok())
                .collect();
            GroupMetrics {
                label: g.label(),
                users: members.len(),
                metrics: aggregate(&members, cutoffs),
            }
        })
        .collect();
    Ok(MetricsReport {
        schema: REPORT_SCHEMA,
        label: label.to_string(),
        fingerprint: fingerprint.to_string(),
        users_evaluated: per_user.len(),
        metrics: aggregate(&all, cutoffs),
        groups: group_metrics,
        noise: None,
    })
}

/// Item interaction counts in the training graph; ranks items globally by
/// count with ties to the smaller id.
#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    pub counts: Vec<f64>,
}

impl Popularity {
    pub fn order(&self) -> Vec<usize> {
        all_rank(&self.counts, &[], None)
    }

    /// Global order minus the user's training items.
    pub fn ranking_for(&self, train: &InteractionGraph, user: usize) -> Vec<usize> {
        all_rank(&self.counts, train.user_items(user), None)
    }

    pub fn ranker(&self) -> Ranker<'_> {
        Ranker::Global(&self.counts)
    }
}

pub fn popularity_baseline(train: &InteractionGraph) -> Popularity {
    Popularity {
        counts: (0..train.num_items()).map(|i| train.item_degree(i) as f64).collect(),
    }
}

/// Appends reports as JSON lines.
pub fn write_reports_jsonl(path: &Path, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub const CSV_HEADER: &str = "schema,label,fingerprint,group,users,noise_ratio,noise_edges,n,recall,ndcg";

/// Flat CSV: one row per (report, group, cutoff); the overall rows use
/// group `all`.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        let (ratio, added) = r
            .noise
            .as_ref()
            .map_or((String::new(), String::new()), |n| (n.ratio.to_string(), n.added_edges.to_string()));
        let rows = std::iter::once(("all".to_string(), r.users_evaluated, &r.metrics))
            .chain(r.groups.iter().map(|g| (g.label.clone(), g.users, &g.metrics)));
        for (group, users, metrics) in rows {
            for m in metrics {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.schema, r.label, r.fingerprint, group, users, ratio, added, m.n, m.recall, m.ndcg
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
