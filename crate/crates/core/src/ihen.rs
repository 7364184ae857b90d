//! The generator: stacked interactive hyperedge layers, the node/hyperedge
//! fusion weights, the multimodal connectivity matrix and per-node
//! correlation coefficients, plus an exact reverse pass.
//!
//! One layer maps node features `X_V` (n×f_V) and hyperedge features `X_E`
//! (m×f_E) through the incidence matrix `A`:
//!
//! ```text
//! X_V' = σ(A · X_E·W_E + λ · X_V·W_V)
//! X_E' = σ(Aᵀ· X_V·W_V + λ · X_E·W_E)
//! ```
//!
//! Both rules share `W_V` and `W_E`, so their gradients accumulate from two
//! uses each.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgcore::IncidenceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConnectivityKind {
    #[serde(rename = "SC")]
    Sc,
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "MC")]
    Mc,
}

impl ConnectivityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectivityKind::Sc => "SC",
            ConnectivityKind::Fc => "FC",
            ConnectivityKind::Mc => "MC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SC" => Some(ConnectivityKind::Sc),
            "FC" => Some(ConnectivityKind::Fc),
            "MC" => Some(ConnectivityKind::Mc),
            _ => None,
        }
    }
}

impl std::fmt::Display for ConnectivityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Symmetric n×n connectivity (structural, functional or generated).
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    entries: DMatrix<f64>,
    kind: ConnectivityKind,
}

impl ConnectivityMatrix {
    /// Square, finite and symmetric to 1e-9 (relative to the largest entry).
    pub fn new(entries: DMatrix<f64>, kind: ConnectivityKind) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::dim(format!(
                "{kind} matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!("{kind} matrix has non-finite entries")));
        }
        let tol = 1e-9 * entries.amax().max(1.0);
        let asym = (&entries - entries.transpose()).amax();
        if asym > tol {
            return Err(Error::Input(format!("{kind} matrix is not symmetric (max gap {asym:e})")));
        }
        Ok(Self { entries, kind })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn kind(&self) -> ConnectivityKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.entries.clone()).eigenvalues.min()
    }

    /// Strict upper triangle in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n();
        let mut v = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                v.push(self.entries[(i, j)]);
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Weights of one layer. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w_v: DMatrix<f64>,
    pub w_e: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub activation: Activation,
    /// z-score each BOLD row before it becomes the initial node features.
    pub zscore_bold: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            lambda: 1.0,
            activation: Activation::default(),
            zscore_bold: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub layers: Vec<Layer>,
    pub lambda: f64,
    pub activation: Activation,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

impl GeneratorParams {
    /// Seeded uniform Glorot initialization. The first layer maps node
    /// features of width `d` and hyperedge features of width `n` (one column
    /// per node, from `Aᵀ S`) to `cfg.hidden`.
    pub fn init(d: usize, n: usize, cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config("generator needs at least one layer of positive width".into()));
        }
        if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", cfg.lambda)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.layers);
        let (mut fv, mut fe) = (d, n);
        for _ in 0..cfg.layers {
            layers.push(Layer {
                w_v: glorot(&mut rng, fv, cfg.hidden),
                w_e: glorot(&mut rng, fe, cfg.hidden),
            });
            fv = cfg.hidden;
            fe = cfg.hidden;
        }
        Ok(Self {
            layers,
            lambda: cfg.lambda,
            activation: cfg.activation,
        })
    }

    pub fn zeros_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer {
                w_v: DMatrix::zeros(l.w_v.nrows(), l.w_v.ncols()),
                w_e: DMatrix::zeros(l.w_e.nrows(), l.w_e.ncols()),
            })
            .collect()
    }

    /// Weight tensors in a fixed order: per layer `w_v` then `w_e`.
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        self.layers.iter().flat_map(|l| [&l.w_v, &l.w_e]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w_v, &mut l.w_e])
            .collect()
    }
}

/// Node and hyperedge features of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub x_v: DMatrix<f64>,
    pub x_e: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// Node-within-hyperedge weights (n×m), zero outside the incidence support.
    pub gamma: DMatrix<f64>,
    /// Hyperedge weights (length m), non-negative.
    pub w: DVector<f64>,
}

/// `X_V = B`, `X_E = Aᵀ S`.
pub fn init_features(
    b: &DMatrix<f64>,
    s: &ConnectivityMatrix,
    a: &IncidenceMatrix,
) -> Result<FeaturePair> {
    let n = a.n();
    if b.nrows() != n || s.n() != n {
        return Err(Error::dim(format!(
            "initial features: incidence has {n} rows, BOLD {} rows, SC {}x{}",
            b.nrows(),
            s.n(),
            s.n()
        )));
    }
    Ok(FeaturePair {
        x_v: b.clone(),
        x_e: a.matrix().transpose() * s.entries(),
    })
}

fn check_finite(x: &DMatrix<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow(format!("non-finite values in {what}")))
    }
}

/// One layer's pre-activations.
fn layer_preactivations(
    layer: &Layer,
    lambda: f64,
    a: &DMatrix<f64>,
    x: &FeaturePair,
    index: usize,
) -> Result<FeaturePair> {
    if x.x_v.ncols() != layer.w_v.nrows() || x.x_e.ncols() != layer.w_e.nrows() {
        return Err(Error::dim(format!(
            "layer {index}: features have widths ({}, {}) but weights expect ({}, {})",
            x.x_v.ncols(),
            x.x_e.ncols(),
            layer.w_v.nrows(),
            layer.w_e.nrows()
        )));
    }
    if layer.w_v.ncols() != layer.w_e.ncols() {
        return Err(Error::dim(format!("layer {index}: W_V and W_E output widths differ")));
    }
    let p_v = &x.x_v * &layer.w_v;
    let p_e = &x.x_e * &layer.w_e;
    let z_v = a * &p_e + &p_v * lambda;
    let z_e = a.transpose() * &p_v + &p_e * lambda;
    Ok(FeaturePair { x_v: z_v, x_e: z_e })
}

fn check_feature_shapes(a: &IncidenceMatrix, f0: &FeaturePair) -> Result<()> {
    if f0.x_v.nrows() != a.n() || f0.x_e.nrows() != a.m() {
        return Err(Error::dim(format!(
            "features have ({}, {}) rows but incidence is {}x{}",
            f0.x_v.nrows(),
            f0.x_e.nrows(),
            a.n(),
            a.m()
        )));
    }
    Ok(())
}

/// Features of every layer, `X^(0)` through `X^(L)`.
pub fn ihen_forward(
    p: &GeneratorParams,
    a: &IncidenceMatrix,
    f0: &FeaturePair,
) -> Result<Vec<FeaturePair>> {
    Ok(forward_layers(p, a, f0)?.0)
}

fn forward_layers(
    p: &GeneratorParams,
    a: &IncidenceMatrix,
    f0: &FeaturePair,
) -> Result<(Vec<FeaturePair>, Vec<FeaturePair>)> {
    check_feature_shapes(a, f0)?;
    let mut features = vec![f0.clone()];
    let mut pre = Vec::with_capacity(p.layers.len());
    for (l, layer) in p.layers.iter().enumerate() {
        let z = layer_preactivations(layer, p.lambda, a.matrix(), &features[l], l)?;
        check_finite(&z.x_v, "node pre-activations")?;
        check_finite(&z.x_e, "hyperedge pre-activations")?;
        let act = p.activation;
        features.push(FeaturePair {
            x_v: z.x_v.map(|v| act.apply(v)),
            x_e: z.x_e.map(|v| act.apply(v)),
        });
        pre.push(z);
    }
    Ok((features, pre))
}

/// `γ(i,j) = A(i,j)·⟨X_V(i,·), X_E(j,·)⟩`, `w(j) = ‖X_E(j,·)‖₂`.
pub fn fusion_weights(fl: &FeaturePair, a: &IncidenceMatrix) -> Result<FusionWeights> {
    check_feature_shapes(a, fl)?;
    if fl.x_v.ncols() != fl.x_e.ncols() {
        return Err(Error::dim("final node and hyperedge widths differ"));
    }
    let inner = &fl.x_v * fl.x_e.transpose();
    let gamma = inner.component_mul(a.matrix());
    let w = DVector::from_iterator(fl.x_e.nrows(), fl.x_e.row_iter().map(|r| r.norm()));
    Ok(FusionWeights { gamma, w })
}

/// `M = Γ · diag(w) · Γᵀ`, mirrored so it is exactly symmetric.
pub fn multimodal_connectivity(fw: &FusionWeights) -> Result<ConnectivityMatrix> {
    if fw.gamma.ncols() != fw.w.len() {
        return Err(Error::dim("gamma columns and hyperedge weights differ"));
    }
    let scaled = DMatrix::from_fn(fw.gamma.nrows(), fw.gamma.ncols(), |i, j| {
        fw.gamma[(i, j)] * fw.w[j]
    });
    let mut m = scaled * fw.gamma.transpose();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(j, i)] = m[(i, j)];
        }
    }
    check_finite(&m, "multimodal connectivity")?;
    Ok(ConnectivityMatrix {
        entries: m,
        kind: ConnectivityKind::Mc,
    })
}

/// `Co(i) = (1/n) Σ_j M(i,j)·⟨X_V(i,·), X_V(j,·)⟩`.
pub fn node_correlation(m: &ConnectivityMatrix, x_v: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = m.n();
    if x_v.nrows() != n {
        return Err(Error::dim(format!("node features have {} rows, M is {n}x{n}", x_v.nrows())));
    }
    let gram = x_v * x_v.transpose();
    let weighted = m.entries().component_mul(&gram);
    Ok(DVector::from_iterator(
        n,
        weighted.row_iter().map(|r| r.sum() / n as f64),
    ))
}

/// Everything the reverse pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub features: Vec<FeaturePair>,
    pre: Vec<FeaturePair>,
    pub fusion: FusionWeights,
    pub m: ConnectivityMatrix,
    pub co: DVector<f64>,
}

impl ForwardCache {
    pub fn last(&self) -> &FeaturePair {
        self.features.last().expect("at least X^(0)")
    }
}

/// Full forward pass: layers, fusion weights, `M` and `Co`.
pub fn generator_forward(
    p: &GeneratorParams,
    a: &IncidenceMatrix,
    f0: &FeaturePair,
) -> Result<ForwardCache> {
    let (features, pre) = forward_layers(p, a, f0)?;
    let fl = features.last().expect("X^(0) present");
    let fusion = fusion_weights(fl, a)?;
    let m = multimodal_connectivity(&fusion)?;
    let co = node_correlation(&m, &fl.x_v)?;
    Ok(ForwardCache {
        features,
        pre,
        fusion,
        m,
        co,
    })
}

/// Gradient of a scalar loss with respect to the generator outputs. Absent
/// terms are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub d_m: Option<DMatrix<f64>>,
    pub d_co: Option<DVector<f64>>,
    pub d_xv: Option<DMatrix<f64>>,
    pub d_xe: Option<DMatrix<f64>>,
}

/// Forward cache holder; `backward` fails until `forward` has run.
#[derive(Debug, Clone, Default)]
pub struct GeneratorTape {
    cache: Option<ForwardCache>,
}

impl GeneratorTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        p: &GeneratorParams,
        a: &IncidenceMatrix,
        f0: &FeaturePair,
    ) -> Result<&ForwardCache> {
        self.cache = Some(generator_forward(p, a, f0)?);
        Ok(self.cache.as_ref().expect("just set"))
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    pub fn backward(
        &self,
        p: &GeneratorParams,
        a: &IncidenceMatrix,
        upstream: &Upstream,
    ) -> Result<Vec<Layer>> {
        let cache = self.cache.as_ref().ok_or(Error::State)?;
        generator_backward(p, a, cache, upstream)
    }
}

/// Exact gradients of a scalar loss with respect to every `W_V^(l)`, `W_E^(l)`.
pub fn generator_backward(
    p: &GeneratorParams,
    a: &IncidenceMatrix,
    cache: &ForwardCache,
    upstream: &Upstream,
) -> Result<Vec<Layer>> {
    if cache.pre.len() != p.layers.len() {
        return Err(Error::State);
    }
    let am = a.matrix();
    let n = a.n();
    let fl = cache.last();
    let mut g_xv = upstream
        .d_xv
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(fl.x_v.nrows(), fl.x_v.ncols()));
    let mut g_xe = upstream
        .d_xe
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(fl.x_e.nrows(), fl.x_e.ncols()));
    if g_xv.shape() != fl.x_v.shape() || g_xe.shape() != fl.x_e.shape() {
        return Err(Error::dim("upstream feature gradient shape"));
    }
    let mut g_m = upstream.d_m.clone().unwrap_or_else(|| DMatrix::zeros(n, n));
    if g_m.shape() != (n, n) {
        return Err(Error::dim("upstream M gradient shape"));
    }

    // Co(i) = (1/n) Σ_j M(i,j) K(i,j), K = X_V X_Vᵀ
    if let Some(g_co) = &upstream.d_co {
        if g_co.len() != n {
            return Err(Error::dim("upstream Co gradient length"));
        }
        let gram = &fl.x_v * fl.x_v.transpose();
        let mut d_gram = DMatrix::zeros(n, n);
        for i in 0..n {
            let gi = g_co[i] / n as f64;
            for j in 0..n {
                g_m[(i, j)] += gi * gram[(i, j)];
                d_gram[(i, j)] = gi * cache.m.entries()[(i, j)];
            }
        }
        g_xv += (&d_gram + d_gram.transpose()) * &fl.x_v;
    }

    // M = Γ diag(w) Γᵀ
    let gamma = &cache.fusion.gamma;
    let w = &cache.fusion.w;
    let g_sym = &g_m + g_m.transpose();
    let mut d_gamma = &g_sym * gamma;
    for (j, mut col) in d_gamma.column_iter_mut().enumerate() {
        col *= w[j];
    }
    let g_gamma = &g_m * gamma;
    for j in 0..w.len() {
        let dw = gamma.column(j).dot(&g_gamma.column(j));
        if w[j] > 0.0 {
            let scale = dw / w[j];
            let row = fl.x_e.row(j) * scale;
            let mut target = g_xe.row_mut(j);
            target += row;
        }
    }
    // Γ = A ⊙ (X_V X_Eᵀ)
    let d_inner = d_gamma.component_mul(am);
    g_xv += &d_inner * &fl.x_e;
    g_xe += d_inner.transpose() * &fl.x_v;

    let mut grads = p.zeros_like();
    let act = p.activation;
    for l in (0..p.layers.len()).rev() {
        let z = &cache.pre[l];
        let x = &cache.features[l];
        let layer = &p.layers[l];
        let d_zv = g_xv.zip_map(&z.x_v, |g, zz| g * act.derivative(zz));
        let d_ze = g_xe.zip_map(&z.x_e, |g, zz| g * act.derivative(zz));
        let d_pv = &d_zv * p.lambda + am * &d_ze;
        let d_pe = am.transpose() * &d_zv + &d_ze * p.lambda;
        grads[l].w_v = x.x_v.transpose() * &d_pv;
        grads[l].w_e = x.x_e.transpose() * &d_pe;
        g_xv = &d_pv * layer.w_v.transpose();
        g_xe = &d_pe * layer.w_e.transpose();
    }
    Ok(grads)
}
