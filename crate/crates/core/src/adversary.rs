//! Random-walk discriminator, the adversarial objectives and the training
//! loop.
//!
//! The discriminator scores a pair `(endpoint, start)` encoded as two
//! concatenated one-hot vectors. Real endpoint laws come from walks on the
//! functional connectivity, fake ones from walks on the generated `M`. The
//! generator is updated with the score-function estimator
//! `(log D − b) ∇ log p_G(path)`, where `b` is a per-start moving average.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::construct::{dhc_construct, DhcConfig};
use crate::error::{Error, Result};
use crate::hgcore::{Hypergraph, IncidenceMatrix};
use crate::ihen::{
    generator_backward, generator_forward, init_features, ConnectivityMatrix, FeaturePair, GeneratorConfig,
    GeneratorParams, Layer, Upstream,
};
use crate::nn::{flatten_grads, Adam, Dense, Hidden, Mlp, MlpTrace};
use crate::stats::{total_variation, zscore_rows};
use crate::walk::{
    endpoint_distributions_exact, sample_endpoint_distribution, sample_walk_resampled, transition_matrix,
    walk_rng, EndpointDistribution, TransitionMatrix, DEFAULT_RETRIES, DEFAULT_STEP_CAP,
};

/// Scores are clamped to `[EPS, 1 − EPS]`.
pub const EPS: f64 = 1e-7;
const EXACT_MAX_NODES: usize = 64;
const REAL_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            seed: 1,
        }
    }
}

/// Fully connected scorer over `[onehot(v), onehot(start)]` with tanh hidden
/// layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    n: usize,
    pub mlp: Mlp,
}

impl DiscriminatorParams {
    pub fn init(n: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        Ok(Self {
            n,
            mlp: Mlp::new(&Self::widths(n, cfg), Hidden::Tanh, cfg.seed)?,
        })
    }

    /// All-zero parameters; every score is exactly 0.5.
    pub fn zeros(n: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        Ok(Self {
            n,
            mlp: Mlp::zeros(&Self::widths(n, cfg), Hidden::Tanh)?,
        })
    }

    /// Wraps an existing network; its input must be `2n` wide with one output.
    pub fn from_mlp(n: usize, mlp: Mlp) -> Result<Self> {
        if mlp.input_width() != 2 * n || mlp.output_width() != 1 {
            return Err(Error::dim(format!(
                "discriminator for n = {n} needs {} inputs and 1 output, got {} and {}",
                2 * n,
                mlp.input_width(),
                mlp.output_width()
            )));
        }
        Ok(Self { n, mlp })
    }

    fn widths(n: usize, cfg: &DiscriminatorConfig) -> Vec<usize> {
        let mut widths = vec![2 * n];
        widths.extend(&cfg.hidden);
        widths.push(1);
        widths
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_score(z: f64) -> (f64, bool) {
    let s = sigmoid(z);
    if s < EPS {
        (EPS, true)
    } else if s > 1.0 - EPS {
        (1.0 - EPS, true)
    } else {
        (s, false)
    }
}

fn encode(n: usize, pairs: &[(usize, usize)]) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(pairs.len(), 2 * n);
    for (r, &(v, v0)) in pairs.iter().enumerate() {
        x[(r, v)] = 1.0;
        x[(r, n + v0)] = 1.0;
    }
    x
}

fn check_node(dp: &DiscriminatorParams, v: usize) -> Result<()> {
    if v >= dp.n {
        return Err(Error::Input(format!("node {v} out of range for n = {}", dp.n)));
    }
    Ok(())
}

/// `D(v, v0)` in `[EPS, 1 − EPS]`.
pub fn discriminator_score(dp: &DiscriminatorParams, v: usize, v0: usize) -> Result<f64> {
    check_node(dp, v)?;
    check_node(dp, v0)?;
    let out = dp.mlp.forward(&encode(dp.n, &[(v, v0)])).output;
    Ok(clamp_score(out[(0, 0)]).0)
}

/// Scores for every pair, evaluated in one batch: entry `(v, v0)`.
pub struct ScoreTable {
    trace: MlpTrace,
    pub scores: DMatrix<f64>,
    clamped: DMatrix<bool>,
}

impl ScoreTable {
    pub fn new(dp: &DiscriminatorParams) -> Self {
        let n = dp.n;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|v0| (0..n).map(move |v| (v, v0))).collect();
        let trace = dp.mlp.forward(&encode(n, &pairs));
        let mut scores = DMatrix::zeros(n, n);
        let mut clamped = DMatrix::from_element(n, n, false);
        for (r, &(v, v0)) in pairs.iter().enumerate() {
            let (s, c) = clamp_score(trace.output[(r, 0)]);
            scores[(v, v0)] = s;
            clamped[(v, v0)] = c;
        }
        Self { trace, scores, clamped }
    }

    pub fn log_score(&self, v: usize, v0: usize) -> f64 {
        self.scores[(v, v0)].ln()
    }

    /// Backpropagates `Σ a(v,v0) log D + b(v,v0) log(1 − D)` to the network.
    fn backward(&self, dp: &DiscriminatorParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Dense> {
        let n = dp.n;
        let mut d_out = DMatrix::zeros(n * n, 1);
        for v0 in 0..n {
            for v in 0..n {
                if self.clamped[(v, v0)] {
                    continue;
                }
                let s = self.scores[(v, v0)];
                d_out[(v0 * n + v, 0)] = a[(v, v0)] * (1.0 - s) - b[(v, v0)] * s;
            }
        }
        dp.mlp.backward(&self.trace, &d_out)
    }
}

/// Gradient of `log D(v, v0)` with respect to every network tensor.
pub fn log_score_gradient(dp: &DiscriminatorParams, v: usize, v0: usize) -> Result<Vec<Dense>> {
    check_node(dp, v)?;
    check_node(dp, v0)?;
    let table = ScoreTable::new(dp);
    let mut a = DMatrix::zeros(dp.n, dp.n);
    a[(v, v0)] = 1.0;
    Ok(table.backward(dp, &a, &DMatrix::zeros(dp.n, dp.n)))
}

/// Fake endpoints drawn from one start node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FakeEndpoints {
    pub start: usize,
    pub endpoints: Vec<usize>,
}

/// One subject's contribution to the discriminator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBatch {
    pub real: Vec<EndpointDistribution>,
    pub fake: Vec<FakeEndpoints>,
}

/// Pairwise weights of `log D` and `log(1 − D)`, summed over the batch.
fn batch_weights(n: usize, batch: &[SubjectBatch]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut terms = 0usize;
    for subject in batch {
        for dist in &subject.real {
            if dist.start >= n || dist.probs.len() != n {
                return Err(Error::Input(format!("real distribution does not fit n = {n}")));
            }
            for (v, &p) in dist.probs.iter().enumerate() {
                a[(v, dist.start)] += p;
            }
            terms += 1;
        }
        for fake in &subject.fake {
            if fake.start >= n || fake.endpoints.iter().any(|&v| v >= n) {
                return Err(Error::Input(format!("fake endpoint out of range for n = {n}")));
            }
            if fake.endpoints.is_empty() {
                continue;
            }
            let w = 1.0 / fake.endpoints.len() as f64;
            for &v in &fake.endpoints {
                b[(v, fake.start)] += w;
            }
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(Error::Input("empty discriminator batch".into()));
    }
    Ok((a, b))
}

fn weighted_objective(table: &ScoreTable, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (idx, &s) in table.scores.iter().enumerate() {
        if a[idx] != 0.0 {
            total += a[idx] * s.ln();
        }
        if b[idx] != 0.0 {
            total += b[idx] * (1.0 - s).ln();
        }
    }
    total
}

/// `Σ_k Σ_i E_real[log D(v, v_i)] + E_fake[log(1 − D(v, v_i))]`, to be
/// maximized by the discriminator.
pub fn discriminator_loss(dp: &DiscriminatorParams, batch: &[SubjectBatch]) -> Result<f64> {
    let (a, b) = batch_weights(dp.n, batch)?;
    Ok(weighted_objective(&ScoreTable::new(dp), &a, &b))
}

/// Objective value together with its gradient.
pub fn discriminator_loss_gradient(dp: &DiscriminatorParams, batch: &[SubjectBatch]) -> Result<(f64, Vec<Dense>)> {
    let (a, b) = batch_weights(dp.n, batch)?;
    let table = ScoreTable::new(dp);
    let value = weighted_objective(&table, &a, &b);
    Ok((value, table.backward(dp, &a, &b)))
}

/// Inputs the generator needs for one subject.
#[derive(Debug, Clone)]
pub struct SubjectInputs {
    pub id: String,
    pub incidence: IncidenceMatrix,
    pub features: FeaturePair,
    /// Endpoint law of walks on the functional connectivity, per start node.
    pub real: Vec<EndpointDistribution>,
}

impl SubjectInputs {
    /// Real endpoint laws are exact up to 64 nodes and sampled above.
    pub fn new(
        id: impl Into<String>,
        incidence: IncidenceMatrix,
        features: FeaturePair,
        fc: &ConnectivityMatrix,
        seed: u64,
    ) -> Result<Self> {
        let n = incidence.n();
        if fc.n() != n || features.x_v.nrows() != n {
            return Err(Error::dim("subject inputs disagree on the node count"));
        }
        let p = transition_matrix(fc.entries())?;
        let real = if n <= EXACT_MAX_NODES {
            endpoint_distributions_exact(&p)?
        } else {
            (0..n)
                .map(|i| sample_endpoint_distribution(&p, i, REAL_SAMPLES, seed, DEFAULT_STEP_CAP).0)
                .collect()
        };
        Ok(Self {
            id: id.into(),
            incidence,
            features,
            real,
        })
    }

    /// Builds `H_k = H ∪ H_k'` from the BOLD series and the initial features.
    pub fn from_parts(
        id: impl Into<String>,
        bold: &DMatrix<f64>,
        sc: &ConnectivityMatrix,
        fc: &ConnectivityMatrix,
        consensus: &Hypergraph,
        dhc: &DhcConfig,
        gcfg: &GeneratorConfig,
        seed: u64,
    ) -> Result<Self> {
        let own = dhc_construct(bold, dhc)?;
        let a = consensus.concat(&own)?.incidence_matrix();
        let b = if gcfg.zscore_bold { zscore_rows(bold)? } else { bold.clone() };
        let f0 = init_features(&b, sc, &a)?;
        Self::new(id, a, f0, fc, seed)
    }

    pub fn n(&self) -> usize {
        self.incidence.n()
    }
}

/// Per-start exponential moving average of `log D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub values: Vec<f64>,
    pub decay: f64,
    initialized: bool,
}

impl Baseline {
    pub fn new(n: usize, decay: f64) -> Self {
        Self {
            values: vec![0.0; n],
            decay,
            initialized: false,
        }
    }

    /// A fixed baseline that `update` leaves untouched.
    pub fn fixed(values: Vec<f64>) -> Self {
        Self {
            values,
            decay: 1.0,
            initialized: true,
        }
    }

    pub fn update(&mut self, means: &[Option<f64>]) {
        for (b, m) in self.values.iter_mut().zip(means) {
            if let Some(m) = *m {
                *b = if self.initialized {
                    self.decay * *b + (1.0 - self.decay) * m
                } else {
                    m
                };
            }
        }
        self.initialized = true;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientConfig {
    pub walks_per_start: usize,
    /// Maximum transitions per walk.
    pub cap: usize,
    /// Redraws of a truncated walk; still-truncated walks contribute zero.
    pub retries: usize,
    /// Restrict the sum to these start nodes; all nodes when absent.
    pub starts: Option<Vec<usize>>,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            walks_per_start: 64,
            cap: DEFAULT_STEP_CAP,
            retries: DEFAULT_RETRIES,
            starts: None,
        }
    }
}

/// Score-function estimate for one subject.
#[derive(Debug, Clone)]
pub struct GeneratorGradient {
    /// Ascent direction for `Σ_i E[log D(v, v_i)]`, per generator layer.
    pub grads: Vec<Layer>,
    /// The same gradient taken with respect to `M`.
    pub d_m: DMatrix<f64>,
    /// Monte Carlo estimate of `Σ_i E[log D(v, v_i)]`.
    pub objective: f64,
    /// Mean `log D` per start over the kept walks; `None` when every walk
    /// from that start was truncated.
    pub start_means: Vec<Option<f64>>,
    pub fake: Vec<FakeEndpoints>,
    pub truncated: usize,
}

/// Score-function estimate with respect to a connectivity matrix, from walks
/// on its transition matrix. Also returns the sampled fake endpoints.
#[allow(clippy::type_complexity)]
pub fn reinforce_connectivity_gradient(
    p: &TransitionMatrix,
    table: &ScoreTable,
    baseline: &Baseline,
    cfg: &GradientConfig,
    seed: u64,
    stream: u64,
) -> Result<(DMatrix<f64>, f64, Vec<Option<f64>>, Vec<FakeEndpoints>, usize)> {
    let n = p.n();
    if cfg.walks_per_start == 0 {
        return Err(Error::Config("walks_per_start must be positive".into()));
    }
    if baseline.values.len() != n || table.scores.nrows() != n {
        return Err(Error::dim("baseline or discriminator does not match the node count"));
    }
    let starts: Vec<usize> = match &cfg.starts {
        Some(s) => s.clone(),
        None => (0..n).collect(),
    };
    if starts.iter().any(|&s| s >= n) {
        return Err(Error::Input("start node out of range".into()));
    }
    let mut d_c = DMatrix::zeros(n, n);
    let mut objective = 0.0;
    let mut means = vec![None; n];
    let mut fake = Vec::with_capacity(starts.len());
    let mut truncated = 0usize;
    let inv = 1.0 / cfg.walks_per_start as f64;
    for &start in &starts {
        let mut rng = walk_rng(seed, (stream << 16) | start as u64);
        let mut endpoints = Vec::with_capacity(cfg.walks_per_start);
        let mut sum = 0.0;
        for _ in 0..cfg.walks_per_start {
            let walk = sample_walk_resampled(p, start, &mut rng, cfg.cap, cfg.retries);
            if walk.truncated {
                truncated += 1;
                continue;
            }
            let f = table.log_score(walk.endpoint, start);
            sum += f;
            p.accumulate_log_prob_gradient(&walk, inv * (f - baseline.values[start]), &mut d_c);
            endpoints.push(walk.endpoint);
        }
        if !endpoints.is_empty() {
            means[start] = Some(sum / endpoints.len() as f64);
        }
        objective += sum * inv;
        fake.push(FakeEndpoints { start, endpoints });
    }
    if truncated == starts.len() * cfg.walks_per_start {
        return Err(Error::SamplingFailure(truncated));
    }
    Ok((d_c, objective, means, fake, truncated))
}

/// Estimates `∇_G Σ_i E_{p_G}[log D(v, v_i)]` for one subject.
pub fn generator_gradient(
    gp: &GeneratorParams,
    dp: &DiscriminatorParams,
    subject: &SubjectInputs,
    baseline: &Baseline,
    cfg: &GradientConfig,
    seed: u64,
    stream: u64,
) -> Result<GeneratorGradient> {
    if dp.n() != subject.n() {
        return Err(Error::dim("discriminator and subject disagree on the node count"));
    }
    let cache = generator_forward(gp, &subject.incidence, &subject.features)?;
    let p = transition_matrix(cache.m.entries())?;
    let table = ScoreTable::new(dp);
    let (d_m, objective, start_means, fake, truncated) =
        reinforce_connectivity_gradient(&p, &table, baseline, cfg, seed, stream)?;
    let grads = generator_backward(
        gp,
        &subject.incidence,
        &cache,
        &Upstream {
            d_m: Some(d_m.clone()),
            ..Default::default()
        },
    )?;
    Ok(GeneratorGradient {
        grads,
        d_m,
        objective,
        start_means,
        fake,
        truncated,
    })
}

/// Mean over start nodes of `TV(p_G, p_real)`, with `p_G` solved exactly.
pub fn mean_endpoint_tv(gp: &GeneratorParams, subject: &SubjectInputs) -> Result<f64> {
    let cache = generator_forward(gp, &subject.incidence, &subject.features)?;
    let p = transition_matrix(cache.m.entries())?;
    let fake = endpoint_distributions_exact(&p)?;
    let n = subject.n();
    Ok(fake
        .iter()
        .zip(&subject.real)
        .map(|(f, r)| total_variation(&f.probs, &r.probs))
        .sum::<f64>()
        / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub walks_per_start: usize,
    pub d_learning_rate: f64,
    pub g_learning_rate: f64,
    pub baseline_decay: f64,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    pub walk_cap: usize,
    pub retries: usize,
    /// Random subset of start nodes per subject and step; all when absent.
    pub start_subsample: Option<usize>,
    /// Subject whose endpoint TV is tracked in the history.
    pub probe_subject: usize,
    pub dhc: DhcConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            walks_per_start: 64,
            d_learning_rate: 1e-3,
            g_learning_rate: 1e-4,
            baseline_decay: 0.9,
            seed: 0,
            d_steps_per_g_step: 1,
            walk_cap: DEFAULT_STEP_CAP,
            retries: DEFAULT_RETRIES,
            start_subsample: None,
            probe_subject: 0,
            dhc: DhcConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self, subjects: usize) -> Result<()> {
        let positive_rates = self.d_learning_rate > 0.0 && self.g_learning_rate > 0.0;
        if self.walks_per_start == 0 || self.d_steps_per_g_step == 0 || self.walk_cap == 0 || !positive_rates {
            return Err(Error::Config("training sizes and step sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must lie in [0, 1)".into()));
        }
        if self.probe_subject >= subjects {
            return Err(Error::Config(format!("probe subject {} of {subjects}", self.probe_subject)));
        }
        if self.start_subsample == Some(0) {
            return Err(Error::Config("start_subsample must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_objective: f64,
    pub g_objective: f64,
    /// Probe-subject TV after this epoch's updates.
    pub probe_tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Probe-subject TV before any update.
    pub initial_tv: f64,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,d_objective,g_objective,probe_tv\n");
        for r in &self.records {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.d_objective, r.g_objective, r.probe_tv));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub history: TrainHistory,
}

fn start_subset(n: usize, k: Option<usize>, seed: u64, stream: u64) -> Option<Vec<usize>> {
    use rand::seq::index::sample;
    let k = k?;
    if k >= n {
        return None;
    }
    let mut rng = walk_rng(seed, stream);
    let mut starts = sample(&mut rng, n, k).into_vec();
    starts.sort_unstable();
    Some(starts)
}

fn finite_or(epoch: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            epoch,
            what: what.to_string(),
        })
    }
}

fn add_layers(acc: &mut [Layer], g: &[Layer]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.w_v += &b.w_v;
        a.w_e += &b.w_e;
    }
}

/// Adversarial training on prepared subjects. The generator and
/// discriminator start from `generator` and `discriminator`.
pub fn train_prepared(
    subjects: &[SubjectInputs],
    mut generator: GeneratorParams,
    mut discriminator: DiscriminatorParams,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if subjects.is_empty() {
        return Err(Error::Input("no subjects to train on".into()));
    }
    tcfg.validate(subjects.len())?;
    let n = subjects[0].n();
    if subjects.iter().any(|s| s.n() != n) || discriminator.n() != n {
        return Err(Error::dim("subjects and discriminator must share the node count"));
    }
    let probe = &subjects[tcfg.probe_subject];
    let initial_tv = mean_endpoint_tv(&generator, probe)?;
    let mut history = TrainHistory {
        initial_tv,
        records: Vec::with_capacity(tcfg.epochs),
    };
    let mut d_opt = Adam::new(tcfg.d_learning_rate);
    let mut g_opt = Adam::new(tcfg.g_learning_rate);
    let mut baseline = Baseline::new(n, tcfg.baseline_decay);
    let k = subjects.len() as u64;

    for epoch in 0..tcfg.epochs {
        let e = epoch as u64;
        let mut d_objective = 0.0;
        for step in 0..tcfg.d_steps_per_g_step {
            // fake endpoints only; the frozen baseline keeps this pass side-effect free
            let mut batch = Vec::with_capacity(subjects.len());
            for (s, subject) in subjects.iter().enumerate() {
                let cfg = GradientConfig {
                    walks_per_start: tcfg.walks_per_start,
                    cap: tcfg.walk_cap,
                    retries: tcfg.retries,
                    starts: None,
                };
                let cache = generator_forward(&generator, &subject.incidence, &subject.features)?;
                let p = transition_matrix(cache.m.entries())?;
                let stream = ((e * (tcfg.d_steps_per_g_step as u64 + 1) + step as u64) * k + s as u64) << 1;
                let fake = sample_fake(&p, &cfg, tcfg.seed, stream)?;
                batch.push(SubjectBatch {
                    real: subject.real.clone(),
                    fake,
                });
            }
            let (value, grads) = discriminator_loss_gradient(&discriminator, &batch)?;
            d_objective = finite_or(epoch, "discriminator objective", value)?;
            d_opt.step(discriminator.mlp.tensors_mut(), &flatten_grads(&grads), true);
        }

        let mut total = generator.zeros_like();
        let mut g_objective = 0.0;
        let mut means_sum = vec![0.0; n];
        let mut means_count = vec![0usize; n];
        for (s, subject) in subjects.iter().enumerate() {
            let base = ((e * (tcfg.d_steps_per_g_step as u64 + 1) + tcfg.d_steps_per_g_step as u64) * k + s as u64) << 1;
            let cfg = GradientConfig {
                walks_per_start: tcfg.walks_per_start,
                cap: tcfg.walk_cap,
                retries: tcfg.retries,
                starts: start_subset(n, tcfg.start_subsample, tcfg.seed, base | 1),
            };
            let g = generator_gradient(&generator, &discriminator, subject, &baseline, &cfg, tcfg.seed, base)?;
            g_objective += g.objective;
            add_layers(&mut total, &g.grads);
            for (i, m) in g.start_means.iter().enumerate() {
                if let Some(m) = m {
                    means_sum[i] += m;
                    means_count[i] += 1;
                }
            }
        }
        finite_or(epoch, "generator objective", g_objective)?;
        let grads: Vec<&DMatrix<f64>> = total.iter().flat_map(|l| [&l.w_v, &l.w_e]).collect();
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                what: "generator gradient".into(),
            });
        }
        g_opt.step(generator.tensors_mut(), &grads, true);
        let means: Vec<Option<f64>> = means_sum
            .iter()
            .zip(&means_count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        baseline.update(&means);

        let probe_tv = finite_or(epoch, "probe TV", mean_endpoint_tv(&generator, probe)?)?;
        history.records.push(EpochRecord {
            epoch,
            d_objective,
            g_objective,
            probe_tv,
        });
    }
    Ok(TrainOutcome {
        generator,
        discriminator,
        history,
    })
}

fn sample_fake(p: &TransitionMatrix, cfg: &GradientConfig, seed: u64, stream: u64) -> Result<Vec<FakeEndpoints>> {
    let mut out = Vec::with_capacity(p.n());
    for start in 0..p.n() {
        let mut rng = walk_rng(seed, (stream << 16) | start as u64);
        let endpoints = (0..cfg.walks_per_start)
            .map(|_| sample_walk_resampled(p, start, &mut rng, cfg.cap, cfg.retries))
            .filter(|w| !w.truncated)
            .map(|w| w.endpoint)
            .collect();
        out.push(FakeEndpoints { start, endpoints });
    }
    Ok(out)
}

/// One subject's raw modalities.
pub struct SubjectData<'a> {
    pub id: &'a str,
    pub bold: &'a DMatrix<f64>,
    pub sc: &'a ConnectivityMatrix,
    pub fc: &'a ConnectivityMatrix,
}

/// Builds every subject's inputs, initializes both networks and trains.
pub fn train(
    data: &[SubjectData<'_>],
    consensus: &Hypergraph,
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let subjects = prepare_subjects(data, consensus, gcfg, tcfg)?;
    let d = data[0].bold.ncols();
    if data.iter().any(|s| s.bold.ncols() != d) {
        return Err(Error::dim("all BOLD series must share the same length"));
    }
    let n = subjects[0].n();
    let generator = GeneratorParams::init(d, n, gcfg)?;
    let discriminator = DiscriminatorParams::init(n, dcfg)?;
    train_prepared(&subjects, generator, discriminator, tcfg)
}

pub fn prepare_subjects(
    data: &[SubjectData<'_>],
    consensus: &Hypergraph,
    gcfg: &GeneratorConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<SubjectInputs>> {
    if data.is_empty() {
        return Err(Error::Input("no subjects to train on".into()));
    }
    data.iter()
        .map(|s| SubjectInputs::from_parts(s.id, s.bold, s.sc, s.fc, consensus, &tcfg.dhc, gcfg, tcfg.seed))
        .collect()
}

/// Per-node correlation vector under a trained generator.
pub fn generate(gp: &GeneratorParams, subject: &SubjectInputs) -> Result<(ConnectivityMatrix, DVector<f64>)> {
    let cache = generator_forward(gp, &subject.incidence, &subject.features)?;
    Ok((cache.m, cache.co))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ihen::Activation;
    use crate::walk::{endpoint_distribution_exact, enumerate_paths};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k3() -> ConnectivityMatrix {
        let c = DMatrix::from_row_slice(3, 3, &[1., 1., 1., 1., 1., 1., 1., 1., 1.]);
        ConnectivityMatrix::new(c, crate::ihen::ConnectivityKind::Fc).unwrap()
    }

    #[test]
    fn zero_discriminator_scores_one_half() {
        let dp = DiscriminatorParams::zeros(5, &DiscriminatorConfig::default()).unwrap();
        for v in 0..5 {
            for v0 in 0..5 {
                assert_eq!(discriminator_score(&dp, v, v0).unwrap(), 0.5);
            }
        }
        assert!(matches!(discriminator_score(&dp, 5, 0), Err(Error::Input(_))));
    }

    #[test]
    fn log_score_gradient_matches_finite_differences() {
        let dp = DiscriminatorParams::init(4, &DiscriminatorConfig::default()).unwrap();
        let (v, v0) = (2, 1);
        let grads = log_score_gradient(&dp, v, v0).unwrap();
        let flat = flatten_grads(&grads);
        let h = 1e-6;
        for t in 0..flat.len() {
            for idx in 0..flat[t].len() {
                let eval = |d: f64| {
                    let mut q = dp.clone();
                    q.mlp.tensors_mut()[t][idx] += d;
                    discriminator_score(&q, v, v0).unwrap().ln()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = flat[t][idx];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn constant_half_objective() {
        let dp = DiscriminatorParams::zeros(3, &DiscriminatorConfig::default()).unwrap();
        let p = transition_matrix(k3().entries()).unwrap();
        let real = endpoint_distributions_exact(&p).unwrap();
        let fake: Vec<_> = (0..3)
            .map(|s| FakeEndpoints {
                start: s,
                endpoints: vec![0, 1, 2, 1],
            })
            .collect();
        let value = discriminator_loss(&dp, &[SubjectBatch { real, fake }]).unwrap();
        assert!((value - 3.0 * 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_set_scores_on_k3() {
        // output bias only: D(v, v0) depends on v through the first layer
        let mut dp = DiscriminatorParams::zeros(3, &DiscriminatorConfig { hidden: vec![], seed: 0 }).unwrap();
        let logits = [0.3, -1.2, 0.8];
        for (v, &z) in logits.iter().enumerate() {
            dp.mlp.layers[0].w[(0, v)] = z;
        }
        let p = transition_matrix(k3().entries()).unwrap();
        let real = vec![endpoint_distribution_exact(&p, 0).unwrap()];
        let fake = vec![FakeEndpoints {
            start: 0,
            endpoints: vec![2, 2, 1],
        }];
        let value = discriminator_loss(&dp, &[SubjectBatch { real, fake }]).unwrap();
        let d = |z: f64| 1.0 / (1.0 + (-z as f64).exp());
        let expected = (1.0 / 7.0) * d(logits[0]).ln()
            + (3.0 / 7.0) * d(logits[1]).ln()
            + (3.0 / 7.0) * d(logits[2]).ln()
            + (2.0 / 3.0) * (1.0 - d(logits[2])).ln()
            + (1.0 / 3.0) * (1.0 - d(logits[1])).ln();
        assert!((value - expected).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_discriminator_objective_approaches_zero() {
        let mut dp = DiscriminatorParams::zeros(3, &DiscriminatorConfig { hidden: vec![], seed: 0 }).unwrap();
        dp.mlp.layers[0].w[(0, 0)] = 40.0;
        dp.mlp.layers[0].w[(0, 1)] = -40.0;
        let real = vec![EndpointDistribution {
            start: 2,
            probs: vec![1.0, 0.0, 0.0],
        }];
        let fake = vec![FakeEndpoints {
            start: 2,
            endpoints: vec![1, 1],
        }];
        let value = discriminator_loss(&dp, &[SubjectBatch { real, fake }]).unwrap();
        assert!(value < 0.0 && value > -1e-6);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let dp = DiscriminatorParams::zeros(3, &DiscriminatorConfig::default()).unwrap();
        assert!(matches!(discriminator_loss(&dp, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let dp = DiscriminatorParams::init(3, &DiscriminatorConfig::default()).unwrap();
        let p = transition_matrix(k3().entries()).unwrap();
        let batch = vec![SubjectBatch {
            real: endpoint_distributions_exact(&p).unwrap(),
            fake: vec![FakeEndpoints {
                start: 1,
                endpoints: vec![0, 2, 2],
            }],
        }];
        let (_, grads) = discriminator_loss_gradient(&dp, &batch).unwrap();
        let flat = flatten_grads(&grads);
        let h = 1e-6;
        for t in 0..flat.len() {
            for idx in 0..flat[t].len() {
                let eval = |d: f64| {
                    let mut q = dp.clone();
                    q.mlp.tensors_mut()[t][idx] += d;
                    discriminator_loss(&q, &batch).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = flat[t][idx];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4));
            }
        }
    }

    #[test]
    fn all_zero_connectivity_has_no_walk_gradient() {
        let p = transition_matrix(&DMatrix::zeros(4, 4)).unwrap();
        let dp = DiscriminatorParams::init(4, &DiscriminatorConfig::default()).unwrap();
        let table = ScoreTable::new(&dp);
        let (d_c, ..) =
            reinforce_connectivity_gradient(&p, &table, &Baseline::new(4, 0.9), &GradientConfig::default(), 3, 0)
                .unwrap();
        assert!(d_c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unbiased_against_truncated_enumeration_on_m() {
        // gradient w.r.t. the connectivity itself, against finite differences
        // of the enumerated truncated objective
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let mut c = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.2..1.5));
        c = &c + c.transpose();
        let dp = DiscriminatorParams::init(n, &DiscriminatorConfig::default()).unwrap();
        let table = ScoreTable::new(&dp);
        let baseline = Baseline::fixed(vec![-0.7; n]);
        let depth = 6;
        let objective = |c: &DMatrix<f64>| {
            let p = transition_matrix(c).unwrap();
            (0..n)
                .map(|s| {
                    enumerate_paths(&p, s, depth)
                        .iter()
                        .map(|(w, pr)| pr * (table.log_score(w.endpoint, s) - baseline.values[s]))
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let p = transition_matrix(&c).unwrap();
        let cfg = GradientConfig {
            walks_per_start: 200,
            cap: depth,
            retries: 0,
            starts: None,
        };
        let trials = 250;
        let mut sum = DMatrix::zeros(n, n);
        let mut sq = DMatrix::zeros(n, n);
        for t in 0..trials {
            let (g, ..) = reinforce_connectivity_gradient(&p, &table, &baseline, &cfg, 17, t).unwrap();
            sq += g.map(|v| v * v);
            sum += g;
        }
        let h = 1e-6;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[(a, b)] += h;
                cm[(a, b)] -= h;
                let exact = (objective(&cp) - objective(&cm)) / (2.0 * h);
                let mean = sum[(a, b)] / trials as f64;
                let var = (sq[(a, b)] / trials as f64 - mean * mean) * trials as f64 / (trials - 1) as f64;
                let se = (var / trials as f64).sqrt();
                assert!((mean - exact).abs() < 3.0 * se, "({a},{b}): {mean} vs {exact}, se {se}");
            }
        }
    }

    fn tiny_subject(seed: u64) -> SubjectInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let h = Hypergraph::new(n, vec![vec![0, 1], vec![1, 2, 3], vec![0, 3]]).unwrap();
        let a = h.incidence_matrix();
        let mut s = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
        s = &s + s.transpose();
        let sc = ConnectivityMatrix::new(s, crate::ihen::ConnectivityKind::Sc).unwrap();
        let b = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let mut f = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        f = &f + f.transpose();
        f.fill_diagonal(1.0);
        let fc = ConnectivityMatrix::new(f, crate::ihen::ConnectivityKind::Fc).unwrap();
        let f0 = init_features(&b, &sc, &a).unwrap();
        SubjectInputs::new("s", a, f0, &fc, 0).unwrap()
    }

    #[test]
    fn constant_discriminator_gives_zero_mean_gradient() {
        let subject = tiny_subject(1);
        let gcfg = GeneratorConfig {
            layers: 1,
            hidden: 3,
            activation: Activation::Tanh,
            ..Default::default()
        };
        let gp = GeneratorParams::init(3, 4, &gcfg).unwrap();
        let dp = DiscriminatorParams::zeros(4, &DiscriminatorConfig::default()).unwrap();
        let baseline = Baseline::fixed(vec![0.0; 4]);
        let cfg = GradientConfig {
            walks_per_start: 16,
            ..Default::default()
        };
        let trials = 200;
        let mut vecs = Vec::new();
        for t in 0..trials {
            let g = generator_gradient(&gp, &dp, &subject, &baseline, &cfg, 99, t).unwrap();
            let flat: Vec<f64> = g.grads.iter().flat_map(|l| l.w_v.iter().chain(l.w_e.iter()).copied()).collect();
            vecs.push(flat);
        }
        let dim = vecs[0].len();
        let mut norm2 = 0.0;
        let mut se2 = 0.0;
        for j in 0..dim {
            let mean = vecs.iter().map(|v| v[j]).sum::<f64>() / trials as f64;
            let var = vecs.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            norm2 += mean * mean;
            se2 += var / trials as f64;
        }
        assert!(se2 > 0.0);
        assert!(norm2.sqrt() < 3.0 * se2.sqrt());
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let subject = tiny_subject(2);
        let gp = GeneratorParams::init(3, 4, &GeneratorConfig::default()).unwrap();
        let dp = DiscriminatorParams::init(4, &DiscriminatorConfig::default()).unwrap();
        let out = train_prepared(
            &[subject],
            gp.clone(),
            dp.clone(),
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.generator, gp);
        assert_eq!(out.discriminator, dp);
        assert!(out.history.records.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_records_every_epoch() {
        let subject = tiny_subject(3);
        let gp = GeneratorParams::init(3, 4, &GeneratorConfig::default()).unwrap();
        let dp = DiscriminatorParams::init(4, &DiscriminatorConfig::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            walks_per_start: 16,
            ..Default::default()
        };
        let a = train_prepared(&[subject.clone()], gp.clone(), dp.clone(), &cfg).unwrap();
        let b = train_prepared(&[subject], gp, dp, &cfg).unwrap();
        assert_eq!(a.history.records.len(), 5);
        assert_eq!(a.history, b.history);
        assert_eq!(a.generator, b.generator);
    }
}
