//! Interaction file loading, train/validation/test splitting, split
//! manifests, and a synthetic latent-factor dataset generator.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::graph::{GraphError, InteractionGraph};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dataset {0} contains no interactions")]
    Empty(String),
    #[error("split ratios {0:?} must be non-negative, have a positive train share, and sum to 1")]
    Ratios([f64; 3]),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dense-id lookup table for one side of the bipartite graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    names: Vec<String>,
}

impl IdMap {
    /// Numeric-aware ordering: if every raw id parses as an integer they are
    /// ordered numerically, so already-dense files keep their ids.
    fn from_raw(raw: impl IntoIterator<Item = String>) -> (Self, HashMap<String, usize>) {
        let mut names: Vec<String> = raw.into_iter().collect();
        names.sort_unstable();
        names.dedup();
        if names.iter().all(|n| n.parse::<u64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<u64>().unwrap());
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(k, n)| (n.clone(), k))
            .collect();
        (Self { names }, index)
    }

    pub fn identity(len: usize) -> Self {
        Self {
            names: (0..len).map(|k| k.to_string()).collect(),
        }
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// A loaded interaction file with its id remap tables.
#[derive(Debug, Clone)]
pub struct Interactions {
    pub graph: InteractionGraph,
    pub users: IdMap,
    pub items: IdMap,
}

/// Reads `user<TAB>item[<TAB>ignored...]` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn load_interactions(path: &Path) -> Result<Interactions, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut raw = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let user = fields.next().unwrap_or("").trim();
        let item = fields.next().unwrap_or("").trim();
        if user.is_empty() || item.is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: k + 1,
                message: format!("expected `user<TAB>item`, got {trimmed:?}"),
            });
        }
        raw.push((user.to_string(), item.to_string()));
    }
    if raw.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    let (users, user_index) = IdMap::from_raw(raw.iter().map(|(u, _)| u.clone()));
    let (items, item_index) = IdMap::from_raw(raw.iter().map(|(_, i)| i.clone()));
    let graph = InteractionGraph::from_edges(
        users.len(),
        items.len(),
        raw.iter().map(|(u, i)| (user_index[u], item_index[i])),
    )?;
    Ok(Interactions {
        graph,
        users,
        items,
    })
}

/// Train graph plus held-out validation and test edges.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: InteractionGraph,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Same split with a different train graph (e.g. after noise injection).
    pub fn with_train(&self, train: InteractionGraph) -> DatasetSplit {
        DatasetSplit {
            train,
            validation: self.validation.clone(),
            test: self.test.clone(),
            seed: self.seed,
            ratios: self.ratios,
        }
    }
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<(), DataError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios[0] <= 0.0 || (sum - 1.0).abs() > 1e-9
    {
        return Err(DataError::Ratios(ratios));
    }
    Ok(())
}

/// Per-user stratified random split. Each user keeps
/// `round(n * train)` (at least one) training edges; of the rest,
/// `round(n * val)` go to validation and the remainder to test.
pub fn split_dataset(
    graph: &InteractionGraph,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    validate_ratios(ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for user in 0..graph.num_users() {
        let mut items = graph.user_items(user).to_vec();
        let n = items.len();
        if n == 0 {
            continue;
        }
        items.shuffle(&mut rng);
        let n_train = ((n as f64 * ratios[0]).round() as usize).clamp(1, n);
        let rest = n - n_train;
        let n_val = ((n as f64 * ratios[1]).round() as usize).min(rest);
        let (tr, held) = items.split_at(n_train);
        let (va, te) = held.split_at(n_val);
        train.extend(tr.iter().map(|&i| (user, i)));
        validation.extend(va.iter().map(|&i| (user, i)));
        test.extend(te.iter().map(|&i| (user, i)));
    }
    validation.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train: InteractionGraph::from_edges(graph.num_users(), graph.num_items(), train)?,
        validation,
        test,
        seed,
        ratios,
    })
}

const SPLIT_META: &str = "split.meta";

fn write_edges(path: &Path, edges: &[(usize, usize)]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for &(u, i) in edges {
        writeln!(out, "{u}\t{i}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn write_map(path: &Path, map: &IdMap) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for k in 0..map.len() {
        writeln!(out, "{k}\t{}", map.name(k)).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv` (dense `u<TAB>i` lines),
/// `users.tsv` / `items.tsv` id maps and a `split.meta` header file.
pub fn write_split_manifests(
    dir: &Path,
    split: &DatasetSplit,
    users: &IdMap,
    items: &IdMap,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_edges(&dir.join("train.tsv"), split.train.edges())?;
    write_edges(&dir.join("val.tsv"), &split.validation)?;
    write_edges(&dir.join("test.tsv"), &split.test)?;
    write_map(&dir.join("users.tsv"), users)?;
    write_map(&dir.join("items.tsv"), items)?;
    let meta = dir.join(SPLIT_META);
    let body = format!(
        "format = autocf-split-v1\nseed = {}\ntrain_ratio = {}\nval_ratio = {}\ntest_ratio = {}\nnum_users = {}\nnum_items = {}\ntrain_edges = {}\nval_edges = {}\ntest_edges = {}\n",
        split.seed,
        split.ratios[0],
        split.ratios[1],
        split.ratios[2],
        split.num_users(),
        split.num_items(),
        split.train.num_edges(),
        split.validation.len(),
        split.test.len(),
    );
    fs::write(&meta, body).map_err(io_err(&meta))
}

fn read_dense_edges(path: &Path) -> Result<Vec<(usize, usize)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut edges = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: Option<&str>| s.and_then(|s| s.trim().parse::<usize>().ok());
        let mut fields = line.split('\t');
        match (parse(fields.next()), parse(fields.next())) {
            (Some(u), Some(i)) => edges.push((u, i)),
            _ => {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: k + 1,
                    message: format!("expected dense `u<TAB>i`, got {line:?}"),
                })
            }
        }
    }
    Ok(edges)
}

fn read_map(path: &Path) -> Result<IdMap, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let names = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split_once('\t').map_or(l, |(_, name)| name).to_string())
        .collect();
    Ok(IdMap { names })
}

/// Reads back a directory written by [`write_split_manifests`].
pub fn read_split_manifests(dir: &Path) -> Result<(DatasetSplit, IdMap, IdMap), DataError> {
    let meta_path = dir.join(SPLIT_META);
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let fields: BTreeMap<&str, &str> = meta
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |key: &str| -> Result<&str, DataError> {
        fields.get(key).copied().ok_or_else(|| DataError::Parse {
            path: meta_path.display().to_string(),
            line: 0,
            message: format!("missing key {key}"),
        })
    };
    let num = |key: &str| -> Result<f64, DataError> {
        get(key)?.parse::<f64>().map_err(|_| DataError::Parse {
            path: meta_path.display().to_string(),
            line: 0,
            message: format!("bad value for {key}"),
        })
    };
    let users = read_map(&dir.join("users.tsv"))?;
    let items = read_map(&dir.join("items.tsv"))?;
    let train = InteractionGraph::from_edges(
        num("num_users")? as usize,
        num("num_items")? as usize,
        read_dense_edges(&dir.join("train.tsv"))?,
    )?;
    let split = DatasetSplit {
        train,
        validation: read_dense_edges(&dir.join("val.tsv"))?,
        test: read_dense_edges(&dir.join("test.tsv"))?,
        seed: get("seed")?.parse().unwrap_or(0),
        ratios: [num("train_ratio")?, num("val_ratio")?, num("test_ratio")?],
    };
    Ok((split, users, items))
}

/// Parameters of the synthetic clustered-preference generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub clusters: usize,
    /// Target number of distinct interactions (approximate).
    pub interactions: usize,
    /// Share of a user's picks drawn from their home cluster.
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 4000,
            num_items: 3000,
            clusters: 20,
            interactions: 100_000,
            affinity: 0.8,
            seed: 2023,
        }
    }
}

/// Generates an implicit-feedback dataset with long-tailed user activity,
/// Zipf-like item popularity and clustered tastes. Ids are opaque strings
/// (`u17`, `i4`) so the loader's remapping is exercised.
pub fn synthesize(spec: &SyntheticSpec) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters = spec.clusters.max(1);
    let item_cluster: Vec<usize> = (0..spec.num_items).map(|i| i % clusters).collect();
    // Zipf-like popularity over a random permutation of items
    let mut order: Vec<usize> = (0..spec.num_items).collect();
    order.shuffle(&mut rng);
    let mut popularity = vec![0.0; spec.num_items];
    for (rank, &item) in order.iter().enumerate() {
        popularity[item] = 1.0 / (rank as f64 + 10.0).powf(0.8);
    }
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (item, &c) in item_cluster.iter().enumerate() {
        cluster_items[c].push(item);
    }
    let cumulative = |items: &[usize]| -> Vec<f64> {
        let mut acc = 0.0;
        items
            .iter()
            .map(|&i| {
                acc += popularity[i];
                acc
            })
            .collect()
    };
    let all_items: Vec<usize> = (0..spec.num_items).collect();
    let global_cdf = cumulative(&all_items);
    let cluster_cdf: Vec<Vec<f64>> = cluster_items.iter().map(|c| cumulative(c)).collect();
    let pick = |rng: &mut ChaCha8Rng, items: &[usize], cdf: &[f64]| -> usize {
        let x = rng.random::<f64>() * cdf[cdf.len() - 1];
        items[cdf.partition_point(|&c| c < x).min(items.len() - 1)]
    };

    let activity = LogNormal::new(0.0, 0.9).expect("valid lognormal");
    let weights: Vec<f64> = (0..spec.num_users).map(|_| activity.sample(&mut rng)).collect();
    let total: f64 = weights.iter().sum();
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut out = Vec::with_capacity(spec.interactions);
    for (user, w) in weights.iter().enumerate() {
        let target = ((w / total) * spec.interactions as f64 * (1.0 + noise.sample(&mut rng)))
            .round()
            .clamp(3.0, spec.num_items as f64 / 2.0) as usize;
        let home = rng.random_range(0..clusters);
        let second = rng.random_range(0..clusters);
        let mut chosen = std::collections::BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < target && attempts < target * 50 {
            attempts += 1;
            let roll = rng.random::<f64>();
            let item = if roll < spec.affinity * 0.75 {
                pick(&mut rng, &cluster_items[home], &cluster_cdf[home])
            } else if roll < spec.affinity {
                pick(&mut rng, &cluster_items[second], &cluster_cdf[second])
            } else {
                pick(&mut rng, &all_items, &global_cdf)
            };
            chosen.insert(item);
        }
        out.extend(chosen.into_iter().map(|i| (format!("u{user}"), format!("i{i}"))));
    }
    out
}

pub fn write_interactions(path: &Path, rows: &[(String, String)]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (u, i) in rows {
        writeln!(out, "{u}\t{i}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_and_duplicate_files() {
        let dir = tempfile::tempdir().unwrap();
        let one = load_interactions(&write(dir.path(), "a.tsv", "a\tx\n")).unwrap();
        assert_eq!((one.graph.num_users(), one.graph.num_items(), one.graph.num_edges()), (1, 1, 1));
        let dup = load_interactions(&write(dir.path(), "b.tsv", "a\tx\na\tx\nb\tx\n")).unwrap();
        assert_eq!((dup.graph.num_users(), dup.graph.num_items(), dup.graph.num_edges()), (2, 1, 2));
        assert_eq!(dup.users.name(1), "b");
    }

    #[test]
    fn numeric_ids_keep_order_and_extra_columns_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let g = load_interactions(&write(dir.path(), "n.tsv", "10\t2\t5.0\t123\n9\t0\n")).unwrap();
        assert_eq!(g.users.name(0), "9");
        assert_eq!(g.users.name(1), "10");
        assert_eq!(g.items.name(1), "2");
        assert!(g.graph.has_edge(1, 1));
    }

    #[test]
    fn malformed_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_interactions(&write(dir.path(), "m.tsv", "a\tx\nbroken\n")).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        let err = load_interactions(&write(dir.path(), "e.tsv", "")).unwrap_err();
        assert!(matches!(err, DataError::Empty(_)));
        assert!(load_interactions(&dir.path().join("missing.tsv")).is_err());
    }

    #[test]
    fn split_counts_for_single_user() {
        let g = InteractionGraph::from_edges(1, 10, (0..10).map(|i| (0, i))).unwrap();
        for seed in 0..20 {
            let s = split_dataset(&g, [0.7, 0.05, 0.25], seed).unwrap();
            assert_eq!(s.train.num_edges(), 7);
            assert!(s.validation.len() <= 1);
            assert!((2..=3).contains(&s.test.len()));
            assert_eq!(s.train.num_edges() + s.validation.len() + s.test.len(), 10);
        }
    }

    #[test]
    fn split_all_train_and_bad_ratios() {
        let g = InteractionGraph::from_edges(2, 4, [(0, 0), (0, 1), (1, 2), (1, 3)]).unwrap();
        let s = split_dataset(&g, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train, g);
        assert!(s.validation.is_empty() && s.test.is_empty());
        assert!(matches!(
            split_dataset(&g, [0.7, 0.1, 0.1], 1),
            Err(DataError::Ratios(_))
        ));
        assert!(split_dataset(&g, [0.0, 0.5, 0.5], 1).is_err());
    }

    #[test]
    fn split_partition_and_determinism() {
        let rows = synthesize(&SyntheticSpec {
            num_users: 60,
            num_items: 80,
            interactions: 1200,
            ..SyntheticSpec::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        write_interactions(&path, &rows).unwrap();
        let data = load_interactions(&path).unwrap();
        let g = &data.graph;
        for seed in 0..5 {
            let s = split_dataset(g, [0.7, 0.05, 0.25], seed).unwrap();
            let mut merged: Vec<_> = s
                .train
                .edges()
                .iter()
                .chain(&s.validation)
                .chain(&s.test)
                .copied()
                .collect();
            let distinct: HashSet<_> = merged.iter().copied().collect();
            assert_eq!(distinct.len(), merged.len(), "parts overlap");
            merged.sort_unstable();
            assert_eq!(merged, g.edges());
            for u in 0..g.num_users() {
                if g.user_degree(u) > 0 {
                    assert!(s.train.user_degree(u) >= 1);
                }
            }
            assert_eq!(s, split_dataset(g, [0.7, 0.05, 0.25], seed).unwrap());
        }
    }

    #[test]
    fn manifests_round_trip() {
        let g = InteractionGraph::from_edges(3, 3, [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)]).unwrap();
        let split = split_dataset(&g, [0.6, 0.2, 0.2], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let users = IdMap::identity(3);
        let items = IdMap::identity(3);
        write_split_manifests(dir.path(), &split, &users, &items).unwrap();
        let (back, u, i) = read_split_manifests(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!((u, i), (users, items));
        let meta = fs::read_to_string(dir.path().join("split.meta")).unwrap();
        assert!(meta.contains("seed = 4"));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            num_users: 50,
            num_items: 40,
            interactions: 800,
            ..SyntheticSpec::default()
        };
        assert_eq!(synthesize(&spec), synthesize(&spec));
    }
}
