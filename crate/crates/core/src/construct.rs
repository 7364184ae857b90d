//! Per-subject hypergraph construction and the consensus hypergraph search.
//!
//! Each subject gets a k-nearest-neighbour hypergraph over its node time
//! series (one hyperedge per node: the node plus its `k` closest nodes under
//! correlation distance). The consensus hypergraph maximizes the summed
//! similarity to the cohort. The search starts from the cohort medoid and
//! applies first-improvement single-node toggles until no toggle helps.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgcore::{
    assignment_value, check_same_shape, hypergraph_similarity, jaccard_sorted, similarity_table,
    Hypergraph,
};
use crate::stats::row_correlation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhcConfig {
    /// Neighbours added to each node's hyperedge.
    pub k: usize,
}

impl Default for DhcConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OhghConfig {
    /// Sweep budget for the local search.
    pub max_iterations: usize,
    /// Seeds the per-sweep shuffle of candidate moves.
    pub seed: u64,
    /// Removal moves that would shrink an edge below this size are skipped.
    pub min_edge_size: usize,
}

impl Default for OhghConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            seed: 0,
            min_edge_size: 2,
        }
    }
}

/// Result of the consensus search.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub hypergraph: Hypergraph,
    /// Σ_k Sim(H, H_k').
    pub score: f64,
    /// Sweeps performed.
    pub iterations: usize,
    /// Objective after initialization and after every accepted move.
    pub trace: Vec<f64>,
}

/// Sidecar written next to a consensus hypergraph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSidecar {
    pub score: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// k-NN hyperedges under correlation distance `1 - r`. Ties go to the lower
/// node index.
pub fn dhc_construct(features: &DMatrix<f64>, cfg: &DhcConfig) -> Result<Hypergraph> {
    let n = features.nrows();
    if n < 2 || features.ncols() < 2 {
        return Err(Error::dim(format!(
            "feature matrix must be at least 2x2, got {}x{}",
            n,
            features.ncols()
        )));
    }
    if cfg.k == 0 || cfg.k >= n {
        return Err(Error::Config(format!("k = {} outside 1..={}", cfg.k, n - 1)));
    }
    let corr = row_correlation(features)?;
    let edges = (0..n)
        .map(|j| {
            let mut others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            others.sort_by(|&a, &b| {
                let da = 1.0 - corr[(j, a)];
                let db = 1.0 - corr[(j, b)];
                da.total_cmp(&db).then(a.cmp(&b))
            });
            let mut e = vec![j];
            e.extend_from_slice(&others[..cfg.k]);
            e
        })
        .collect();
    Hypergraph::new(n, edges)
}

fn check_cohort(cohort: &[Hypergraph]) -> Result<()> {
    let first = cohort
        .first()
        .ok_or_else(|| Error::Input("empty cohort".into()))?;
    for h in &cohort[1..] {
        check_same_shape(first, h)?;
    }
    Ok(())
}

/// Σ_k Sim(h, cohort_k).
pub fn cohort_objective(h: &Hypergraph, cohort: &[Hypergraph]) -> Result<f64> {
    cohort.iter().map(|g| hypergraph_similarity(h, g)).sum()
}

fn medoid_index(cohort: &[Hypergraph]) -> Result<(usize, f64)> {
    check_cohort(cohort)?;
    let k = cohort.len();
    let mut sims = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        sims[(a, a)] = 1.0;
        for b in (a + 1)..k {
            let s = hypergraph_similarity(&cohort[a], &cohort[b])?;
            sims[(a, b)] = s;
            sims[(b, a)] = s;
        }
    }
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..k {
        let total: f64 = sims.row(a).iter().sum();
        if total > best.1 {
            best = (a, total);
        }
    }
    Ok(best)
}

/// Cohort member with the largest summed similarity to all members.
pub fn medoid_init(cohort: &[Hypergraph]) -> Result<Hypergraph> {
    let (idx, _) = medoid_index(cohort)?;
    Ok(cohort[idx].clone())
}

fn toggled(edge: &[usize], v: usize) -> Vec<usize> {
    match edge.binary_search(&v) {
        Ok(pos) => {
            let mut e = edge.to_vec();
            e.remove(pos);
            e
        }
        Err(pos) => {
            let mut e = edge.to_vec();
            e.insert(pos, v);
            e
        }
    }
}

/// First-improvement local search over single-node membership toggles,
/// started from the medoid.
pub fn ohgh_consensus(cohort: &[Hypergraph], cfg: &OhghConfig) -> Result<Consensus> {
    if cfg.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be at least 1".into()));
    }
    let (start, _) = medoid_index(cohort)?;
    let mut current = cohort[start].clone();
    let n = current.n();
    let m = current.m();

    let mut tables = cohort
        .iter()
        .map(|g| similarity_table(&current, g))
        .collect::<Result<Vec<_>>>()?;
    let mut values = tables
        .iter()
        .map(assignment_value)
        .collect::<Result<Vec<_>>>()?;
    let mut objective: f64 = values.iter().sum();
    let mut trace = vec![objective];

    let mut moves: Vec<(usize, usize)> = (0..m).flat_map(|e| (0..n).map(move |v| (e, v))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut iterations = 0;
    let mut candidate_values = vec![0.0; cohort.len()];

    while iterations < cfg.max_iterations {
        iterations += 1;
        moves.shuffle(&mut rng);
        let mut improved = false;
        for &(e, v) in &moves {
            let edge = toggled(current.edge(e), v);
            if edge.is_empty() || (edge.len() < current.edge(e).len() && edge.len() < cfg.min_edge_size) {
                continue;
            }
            // only row `e` of each subject's table changes
            let mut total = 0.0;
            for (k, g) in cohort.iter().enumerate() {
                let mut t = tables[k].clone();
                for j in 0..m {
                    t[(e, j)] = jaccard_sorted(&edge, g.edge(j));
                }
                candidate_values[k] = assignment_value(&t)?;
                total += candidate_values[k];
            }
            if total > objective + 1e-12 {
                debug_assert!(total >= objective);
                current = current.with_edge(e, edge)?;
                for (k, g) in cohort.iter().enumerate() {
                    for j in 0..m {
                        tables[k][(e, j)] = jaccard_sorted(current.edge(e), g.edge(j));
                    }
                }
                values.copy_from_slice(&candidate_values);
                objective = total;
                trace.push(objective);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    Ok(Consensus {
        // recompute in full so the reported score does not carry incremental drift
        score: cohort_objective(&current, cohort)?,
        hypergraph: current,
        iterations,
        trace,
    })
}

/// Global optimum by enumerating every m-tuple of non-empty node subsets.
/// Limited to n <= 4 and m <= 2. Among optima the first tuple in
/// lexicographic order of edge bitmasks (node i = bit i) wins.
pub fn ohgh_exhaustive(cohort: &[Hypergraph]) -> Result<(Hypergraph, f64)> {
    check_cohort(cohort)?;
    let n = cohort[0].n();
    let m = cohort[0].m();
    if n > 4 || m > 2 {
        return Err(Error::Capacity(format!(
            "exhaustive consensus supports n <= 4 and m <= 2, got n={n}, m={m}"
        )));
    }
    let subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    let mut idx = vec![0usize; m];
    let mut best: Option<(Hypergraph, f64)> = None;
    loop {
        let h = Hypergraph::new(n, idx.iter().map(|&i| subsets[i].clone()).collect())?;
        let score = cohort_objective(&h, cohort)?;
        if best.as_ref().map_or(true, |(_, b)| score > b + 1e-12) {
            best = Some((h, score));
        }
        // odometer, last position fastest
        let mut pos = m;
        loop {
            if pos == 0 {
                return Ok(best.expect("at least one candidate"));
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < subsets.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// `consensus || H_k'` for every subject.
pub fn subject_hypergraphs(consensus: &Hypergraph, cohort: &[Hypergraph]) -> Result<Vec<Hypergraph>> {
    cohort
        .iter()
        .map(|h| {
            check_same_shape(consensus, h)?;
            consensus.concat(h)
        })
        .collect()
}
