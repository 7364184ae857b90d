//! Backtrack-terminated random walks on a weighted graph.
//!
//! A walk starts at `r0`, steps along row-normalized `|C|` ratios and stops
//! the first time a step lands on the node visited two steps earlier. The
//! node before that backtrack is the endpoint. The first step can never
//! terminate since there is no earlier node.
//!
//! Exact endpoint distributions come from the absorbing chain on ordered
//! pairs `(previous, current)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEP_CAP: usize = 256;
pub const DEFAULT_RETRIES: usize = 10;
const EXACT_MAX_NODES: usize = 64;

/// Row-stochastic transitions with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    probs: DMatrix<f64>,
    // |C| with zeroed diagonal, kept for derivatives of log-probabilities
    weights: DMatrix<f64>,
    signs: DMatrix<f64>,
    row_sums: Vec<f64>,
}

impl TransitionMatrix {
    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.probs[(from, to)]
    }

    /// Rows with no weight fall back to uniform and carry no gradient.
    pub fn is_fallback_row(&self, row: usize) -> bool {
        self.row_sums[row] == 0.0
    }

    /// Adds `weight · ∂ log p(path) / ∂ C` to `out`, where `C` is the
    /// connectivity this matrix was built from.
    pub fn accumulate_log_prob_gradient(&self, path: &WalkPath, weight: f64, out: &mut DMatrix<f64>) {
        let n = self.n();
        for step in path.nodes.windows(2) {
            let (a, b) = (step[0], step[1]);
            let total = self.row_sums[a];
            if total == 0.0 {
                continue;
            }
            let w_ab = self.weights[(a, b)];
            if w_ab > 0.0 {
                out[(a, b)] += weight * self.signs[(a, b)] / w_ab;
            }
            for c in 0..n {
                if c != a {
                    out[(a, c)] -= weight * self.signs[(a, c)] / total;
                }
            }
        }
    }
}

/// `|C|` with the diagonal zeroed, row-normalized; all-zero rows become
/// uniform over the other nodes.
pub fn transition_matrix(c: &DMatrix<f64>) -> Result<TransitionMatrix> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::dim(format!("connectivity must be square, got {}x{}", n, c.ncols())));
    }
    if n < 3 {
        return Err(Error::Capacity(format!("walks need at least 3 nodes, got {n}")));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("connectivity has non-finite entries".into()));
    }
    let mut weights = c.abs();
    weights.fill_diagonal(0.0);
    let signs = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { c[(i, j)].signum() });
    let row_sums: Vec<f64> = weights.row_iter().map(|r| r.sum()).collect();
    let probs = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if row_sums[i] == 0.0 {
            1.0 / (n - 1) as f64
        } else {
            weights[(i, j)] / row_sums[i]
        }
    });
    Ok(TransitionMatrix {
        probs,
        weights,
        signs,
        row_sums,
    })
}

/// Visited nodes `[r0, r1, ..., r_T, r_{T+1}]` with `r_{T+1} = r_{T-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkPath {
    pub nodes: Vec<usize>,
    pub endpoint: usize,
    /// Step cap reached before the walk backtracked.
    pub truncated: bool,
}

impl WalkPath {
    pub fn start(&self) -> usize {
        self.nodes[0]
    }

    /// Number of transitions taken (`T + 1` for a terminated walk).
    pub fn transitions(&self) -> usize {
        self.nodes.len() - 1
    }

    /// A terminated path from its node sequence; checks the stopping rule.
    pub fn from_nodes(nodes: Vec<usize>) -> Result<WalkPath> {
        let len = nodes.len();
        if len < 3 {
            return Err(Error::Path("a terminated walk has at least three nodes".into()));
        }
        if nodes[len - 1] != nodes[len - 3] {
            return Err(Error::Path("last step does not return to the node two steps back".into()));
        }
        if let Some(t) = (2..len - 1).find(|&t| nodes[t] == nodes[t - 2]) {
            return Err(Error::Path(format!("walk would already have stopped at position {t}")));
        }
        Ok(WalkPath {
            endpoint: nodes[len - 2],
            nodes,
            truncated: false,
        })
    }
}

/// Product of the transition ratios along the path, including the final
/// backtracking step.
pub fn path_probability(p: &TransitionMatrix, path: &WalkPath) -> Result<f64> {
    if path.truncated {
        return Err(Error::Path("truncated walks have no termination probability".into()));
    }
    let checked = WalkPath::from_nodes(path.nodes.clone())?;
    if checked.endpoint != path.endpoint {
        return Err(Error::Path("endpoint inconsistent with node sequence".into()));
    }
    if path.nodes.iter().any(|&v| v >= p.n()) {
        return Err(Error::Path("node index out of range".into()));
    }
    Ok(path.nodes.windows(2).map(|s| p.get(s[0], s[1])).product())
}

fn sample_row(p: &TransitionMatrix, row: usize, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = row;
    for (j, &pr) in p.probs.row(row).iter().enumerate() {
        if pr > 0.0 {
            acc += pr;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// One walk of at most `cap` transitions (`cap` below 2 is raised to 2).
pub fn sample_walk(p: &TransitionMatrix, start: usize, rng: &mut impl Rng, cap: usize) -> WalkPath {
    let cap = cap.max(2);
    let mut nodes = vec![start];
    let mut prev: Option<usize> = None;
    let mut cur = start;
    while nodes.len() <= cap {
        let next = sample_row(p, cur, rng);
        nodes.push(next);
        if prev == Some(next) {
            return WalkPath {
                nodes,
                endpoint: cur,
                truncated: false,
            };
        }
        prev = Some(cur);
        cur = next;
    }
    WalkPath {
        nodes,
        endpoint: cur,
        truncated: true,
    }
}

/// Independent generator for a (seed, stream) pair. ChaCha is counter based,
/// so shards drawn from distinct streams are reproducible in any order.
pub fn walk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample a walk, redrawing truncated ones up to `retries` times. The last
/// draw is returned even if it is still truncated.
pub fn sample_walk_resampled(
    p: &TransitionMatrix,
    start: usize,
    rng: &mut impl Rng,
    cap: usize,
    retries: usize,
) -> WalkPath {
    let mut walk = sample_walk(p, start, rng, cap);
    for _ in 0..retries {
        if !walk.truncated {
            break;
        }
        walk = sample_walk(p, start, rng, cap);
    }
    walk
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointDistribution {
    pub start: usize,
    pub probs: Vec<f64>,
}

impl EndpointDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Monte Carlo endpoint frequencies. Truncated walks are redrawn up to
/// [`DEFAULT_RETRIES`] times and dropped if still truncated; the second value
/// counts the dropped walks.
pub fn sample_endpoint_distribution(
    p: &TransitionMatrix,
    start: usize,
    samples: usize,
    seed: u64,
    cap: usize,
) -> (EndpointDistribution, usize) {
    const SHARD: usize = 8192;
    let shards = samples.div_ceil(SHARD);
    let n = p.n();
    let results: Vec<(Vec<usize>, usize)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..shards)
            .map(|s| {
                let count = SHARD.min(samples - s * SHARD);
                scope.spawn(move || {
                    let mut rng = walk_rng(seed, ((start as u64) << 32) | s as u64);
                    let mut counts = vec![0usize; n];
                    let mut dropped = 0;
                    for _ in 0..count {
                        let w = sample_walk_resampled(p, start, &mut rng, cap, DEFAULT_RETRIES);
                        if w.truncated {
                            dropped += 1;
                        } else {
                            counts[w.endpoint] += 1;
                        }
                    }
                    (counts, dropped)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampling shard")).collect()
    });
    let mut counts = vec![0usize; n];
    let mut dropped = 0;
    for (c, d) in results {
        for (acc, x) in counts.iter_mut().zip(c) {
            *acc += x;
        }
        dropped += d;
    }
    let kept = (samples - dropped).max(1) as f64;
    (
        EndpointDistribution {
            start,
            probs: counts.iter().map(|&c| c as f64 / kept).collect(),
        },
        dropped,
    )
}

struct PairChain {
    n: usize,
    index: Vec<Option<usize>>,
    states: Vec<(usize, usize)>,
}

impl PairChain {
    /// Transient states reachable from the given starts.
    fn reachable(p: &TransitionMatrix, starts: &[usize]) -> Self {
        let n = p.n();
        let mut index = vec![None; n * n];
        let mut states = Vec::new();
        let mut stack = Vec::new();
        let mut visit = |u: usize, v: usize, index: &mut Vec<Option<usize>>, stack: &mut Vec<(usize, usize)>| {
            if index[u * n + v].is_none() {
                index[u * n + v] = Some(states.len());
                states.push((u, v));
                stack.push((u, v));
            }
        };
        for &s in starts {
            for w in 0..n {
                if p.get(s, w) > 0.0 {
                    visit(s, w, &mut index, &mut stack);
                }
            }
        }
        while let Some((u, v)) = stack.pop() {
            for w in 0..n {
                if w != u && p.get(v, w) > 0.0 {
                    visit(v, w, &mut index, &mut stack);
                }
            }
        }
        PairChain { n, index, states }
    }

    fn id(&self, u: usize, v: usize) -> Option<usize> {
        self.index[u * self.n + v]
    }

    /// States from which absorption is impossible.
    fn trapped(&self, p: &TransitionMatrix) -> Vec<(usize, usize)> {
        let k = self.states.len();
        let mut escapes = vec![false; k];
        // predecessors within the reachable set
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut queue = Vec::new();
        for (s, &(u, v)) in self.states.iter().enumerate() {
            if p.get(v, u) > 0.0 {
                escapes[s] = true;
                queue.push(s);
            }
            for w in 0..self.n {
                if w != u && p.get(v, w) > 0.0 {
                    if let Some(t) = self.id(v, w) {
                        preds[t].push(s);
                    }
                }
            }
        }
        while let Some(t) = queue.pop() {
            for &s in &preds[t] {
                if !escapes[s] {
                    escapes[s] = true;
                    queue.push(s);
                }
            }
        }
        self.states
            .iter()
            .zip(&escapes)
            .filter(|(_, &e)| !e)
            .map(|(&s, _)| s)
            .collect()
    }

    /// Absorption probabilities `H[(state), endpoint]`.
    fn solve(&self, p: &TransitionMatrix) -> Result<DMatrix<f64>> {
        let k = self.states.len();
        let n = self.n;
        let mut system = DMatrix::<f64>::identity(k, k);
        let mut rhs = DMatrix::<f64>::zeros(k, n);
        for (s, &(u, v)) in self.states.iter().enumerate() {
            rhs[(s, v)] = p.get(v, u);
            for w in 0..n {
                let pr = p.get(v, w);
                if w != u && pr > 0.0 {
                    let t = self.id(v, w).expect("closed under transitions");
                    system[(s, t)] -= pr;
                }
            }
        }
        system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoTermination { states: self.trapped(p) })
    }
}

fn check_exact_capacity(p: &TransitionMatrix) -> Result<()> {
    if p.n() > EXACT_MAX_NODES {
        return Err(Error::Capacity(format!(
            "exact endpoint solver supports n <= {EXACT_MAX_NODES}, got {}",
            p.n()
        )));
    }
    Ok(())
}

fn distributions_for(p: &TransitionMatrix, starts: &[usize]) -> Result<Vec<EndpointDistribution>> {
    check_exact_capacity(p)?;
    let n = p.n();
    if let Some(&bad) = starts.iter().find(|&&s| s >= n) {
        return Err(Error::Input(format!("start node {bad} out of range")));
    }
    let chain = PairChain::reachable(p, starts);
    let trapped = chain.trapped(p);
    if !trapped.is_empty() {
        return Err(Error::NoTermination { states: trapped });
    }
    let h = chain.solve(p)?;
    Ok(starts
        .iter()
        .map(|&s| {
            let mut probs = vec![0.0; n];
            for w in 0..n {
                let pr = p.get(s, w);
                if pr > 0.0 {
                    let row = chain.id(s, w).expect("first step state");
                    for (x, acc) in probs.iter_mut().enumerate() {
                        *acc += pr * h[(row, x)];
                    }
                }
            }
            EndpointDistribution { start: s, probs }
        })
        .collect())
}

/// Exact endpoint distribution for walks started at `start` (n <= 64).
pub fn endpoint_distribution_exact(p: &TransitionMatrix, start: usize) -> Result<EndpointDistribution> {
    Ok(distributions_for(p, &[start])?.remove(0))
}

/// Exact endpoint distributions for every start node from a single solve.
pub fn endpoint_distributions_exact(p: &TransitionMatrix) -> Result<Vec<EndpointDistribution>> {
    let starts: Vec<usize> = (0..p.n()).collect();
    distributions_for(p, &starts)
}

/// Probability that a walk from `start` has not stopped after `transitions`
/// steps.
pub fn survival_mass(p: &TransitionMatrix, start: usize, transitions: usize) -> f64 {
    let n = p.n();
    if transitions == 0 {
        return 1.0;
    }
    // mass on (prev, cur) after the first step
    let mut mass = DMatrix::<f64>::zeros(n, n);
    for w in 0..n {
        mass[(start, w)] = p.get(start, w);
    }
    for _ in 1..transitions {
        let mut next = DMatrix::<f64>::zeros(n, n);
        for u in 0..n {
            for v in 0..n {
                let m = mass[(u, v)];
                if m == 0.0 {
                    continue;
                }
                for w in 0..n {
                    if w != u {
                        next[(v, w)] += m * p.get(v, w);
                    }
                }
            }
        }
        mass = next;
    }
    mass.sum()
}

/// Every terminated path from `start` with at most `max_transitions` steps
/// and positive probability, with its probability.
pub fn enumerate_paths(p: &TransitionMatrix, start: usize, max_transitions: usize) -> Vec<(WalkPath, f64)> {
    fn rec(
        p: &TransitionMatrix,
        nodes: &mut Vec<usize>,
        prob: f64,
        max_transitions: usize,
        out: &mut Vec<(WalkPath, f64)>,
    ) {
        if nodes.len() > max_transitions {
            return;
        }
        let cur = *nodes.last().expect("non-empty");
        let prev = if nodes.len() >= 2 { Some(nodes[nodes.len() - 2]) } else { None };
        for w in 0..p.n() {
            let pr = p.get(cur, w);
            if pr == 0.0 {
                continue;
            }
            nodes.push(w);
            if Some(w) == prev {
                out.push((
                    WalkPath {
                        nodes: nodes.clone(),
                        endpoint: cur,
                        truncated: false,
                    },
                    prob * pr,
                ));
            } else {
                rec(p, nodes, prob * pr, max_transitions, out);
            }
            nodes.pop();
        }
    }
    let mut out = Vec::new();
    rec(p, &mut vec![start], 1.0, max_transitions, &mut out);
    out
}

/// `Σ_v dist(v) · log score(v, start)`; every score must lie in (0, 1).
pub fn expected_log_score(dist: &EndpointDistribution, scorer: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let mut total = 0.0;
    for (v, &pr) in dist.probs.iter().enumerate() {
        let s = scorer(v, dist.start);
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Domain(format!("score {s} for ({v}, {}) outside (0, 1)", dist.start)));
        }
        if pr != 0.0 {
            total += pr * s.ln();
        }
    }
    Ok(total)
}
