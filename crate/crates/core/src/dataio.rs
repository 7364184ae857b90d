//! Subject records, matrix and manifest files, Pearson FC and a synthetic
//! cohort with a planted group difference.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgcore::Hypergraph;
use crate::ihen::{ConnectivityKind, ConnectivityMatrix};
use crate::stats::row_correlation;

pub const MIN_SERIES_LEN: usize = 8;
const MAGIC: &[u8; 8] = b"HGGANMAT";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "EMCI")]
    Emci,
    #[serde(rename = "LMCI")]
    Lmci,
    #[serde(rename = "AD")]
    Ad,
    A,
    B,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Nc => "NC",
            Group::Emci => "EMCI",
            Group::Lmci => "LMCI",
            Group::Ad => "AD",
            Group::A => "A",
            Group::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "NC" => Group::Nc,
            "EMCI" => Group::Emci,
            "LMCI" => Group::Lmci,
            "AD" => Group::Ad,
            "A" => Group::A,
            "B" => Group::B,
            _ => return None,
        })
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One subject: BOLD series (n×d), structural and functional connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub group: Group,
    pub bold: DMatrix<f64>,
    pub sc: ConnectivityMatrix,
    pub fc: ConnectivityMatrix,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        group: Group,
        bold: DMatrix<f64>,
        sc: ConnectivityMatrix,
        fc: ConnectivityMatrix,
    ) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            group,
            bold,
            sc,
            fc,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n(&self) -> usize {
        self.bold.nrows()
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Manifest {
            subject: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bold.nrows();
        if self.sc.n() != n || self.fc.n() != n {
            return Err(self.fail(format!(
                "BOLD has {n} rows but SC is {0}x{0} and FC is {1}x{1}",
                self.sc.n(),
                self.fc.n()
            )));
        }
        if self.bold.ncols() < MIN_SERIES_LEN {
            return Err(self.fail(format!("BOLD series length {} is below {MIN_SERIES_LEN}", self.bold.ncols())));
        }
        if self.bold.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("BOLD contains non-finite values"));
        }
        if self.sc.kind() != ConnectivityKind::Sc || self.fc.kind() != ConnectivityKind::Fc {
            return Err(self.fail("connectivity kinds must be SC and FC"));
        }
        if self.sc.entries().iter().any(|&v| v < 0.0) {
            return Err(self.fail("SC has negative entries"));
        }
        let fc = self.fc.entries();
        if fc.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(self.fail("FC entries outside [-1, 1]"));
        }
        if (0..n).any(|i| fc[(i, i)] != 1.0) {
            return Err(self.fail("FC diagonal is not 1"));
        }
        Ok(())
    }
}

/// Pearson correlation between BOLD rows.
pub fn pearson_fc(b: &DMatrix<f64>) -> Result<ConnectivityMatrix> {
    ConnectivityMatrix::new(row_correlation(b)?, ConnectivityKind::Fc)
}

/// Block factor model. Nodes are split into `block_count` contiguous blocks;
/// each block follows one latent factor. In group B the factors of the two
/// `perturbed_blocks` are correlated by `group_effect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub subjects_per_group: usize,
    pub block_count: usize,
    pub group_effect: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub perturbed_blocks: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 12,
            d: 130,
            subjects_per_group: 20,
            block_count: 4,
            group_effect: 0.5,
            noise_sd: 1.0,
            seed: 0,
            perturbed_blocks: (0, 1),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 3 || self.d < MIN_SERIES_LEN || self.subjects_per_group == 0 {
            return bad(format!(
                "need n >= 3, d >= {MIN_SERIES_LEN} and at least one subject per group, got n = {}, d = {}",
                self.n, self.d
            ));
        }
        if self.block_count < 2 || self.block_count > self.n {
            return bad(format!("block_count {} must lie in [2, n]", self.block_count));
        }
        if !(0.0..=1.0).contains(&self.group_effect) {
            return bad(format!("group_effect {} outside [0, 1]", self.group_effect));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be positive".into());
        }
        let (p, q) = self.perturbed_blocks;
        if p == q || p >= self.block_count || q >= self.block_count {
            return bad(format!("perturbed blocks {p}, {q} invalid for {} blocks", self.block_count));
        }
        Ok(())
    }

    pub fn block_of(&self, node: usize) -> usize {
        node * self.block_count / self.n
    }

    /// Nodes belonging to either perturbed block.
    pub fn perturbed_nodes(&self) -> Vec<usize> {
        let (p, q) = self.perturbed_blocks;
        (0..self.n)
            .filter(|&i| {
                let b = self.block_of(i);
                b == p || b == q
            })
            .collect()
    }

    fn factor_covariance(&self, group: Group) -> DMatrix<f64> {
        let mut phi = DMatrix::identity(self.block_count, self.block_count);
        if group == Group::B {
            let (p, q) = self.perturbed_blocks;
            phi[(p, q)] += self.group_effect;
            phi[(q, p)] += self.group_effect;
        }
        phi
    }
}

/// Symmetric square root of a PSD matrix; errors when it is not PSD.
fn psd_sqrt(phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(phi.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
        return Err(Error::Config("planted factor covariance is not positive semi-definite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// One synthetic subject. The random stream depends only on the seed and
/// `index`, so with `group_effect = 0` both groups share the same law.
pub fn synth_subject(cfg: &SynthConfig, group: Group, index: usize) -> Result<SubjectRecord> {
    cfg.validate()?;
    if !matches!(group, Group::A | Group::B) {
        return Err(Error::Config("synthetic subjects belong to group A or B".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let root = psd_sqrt(&cfg.factor_covariance(group))?;
    let (n, d, kb) = (cfg.n, cfg.d, cfg.block_count);

    let loading = Uniform::new(0.6, 1.0);
    let loadings: Vec<f64> = (0..n).map(|_| loading.sample(&mut rng)).collect();
    let z = DMatrix::from_fn(kb, d, |_, _| StandardNormal.sample(&mut rng));
    let factors = &root * z;
    let bold = DMatrix::from_fn(n, d, |i, t| {
        let e: f64 = StandardNormal.sample(&mut rng);
        loadings[i] * factors[(cfg.block_of(i), t)] + cfg.noise_sd * e
    });

    // fiber-count-like: exp of the planted coupling plus log-normal noise
    let phi = cfg.factor_covariance(group);
    let mut sc = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let coupling = phi[(cfg.block_of(i), cfg.block_of(j))];
            let v = (2.0 * coupling + 0.5 * cfg.noise_sd * e).exp();
            sc[(i, j)] = v;
            sc[(j, i)] = v;
        }
    }
    let fc = pearson_fc(&bold)?;
    let id = format!("{}{:03}", group.as_str().to_lowercase(), index);
    SubjectRecord::new(id, group, bold, ConnectivityMatrix::new(sc, ConnectivityKind::Sc)?, fc)
}

/// `subjects_per_group` subjects of group A followed by as many of group B.
pub fn synth_cohort(cfg: &SynthConfig) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    let k = cfg.subjects_per_group;
    let mut out = Vec::with_capacity(2 * k);
    for (g, group) in [Group::A, Group::B].into_iter().enumerate() {
        for j in 0..k {
            let mut rec = synth_subject(cfg, group, j)?;
            rec.id = format!("{}{:03}", group.as_str().to_lowercase(), g * k + j);
            out.push(rec);
        }
    }
    Ok(out)
}

/// Matrix file encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Binary,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Binary => "bin",
        }
    }

    /// `.csv` files are text, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        context: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Header line `rows cols kind`, then one comma-separated line per row.
pub fn matrix_to_csv(m: &DMatrix<f64>, kind: &str) -> String {
    let mut out = format!("{} {} {}\n", m.nrows(), m.ncols(), kind);
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, path: &Path) -> Result<(DMatrix<f64>, String)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(path, "header must be `rows cols kind`"));
    }
    let rows: usize = parts[0].parse().map_err(|_| parse_err(path, "bad row count"))?;
    let cols: usize = parts[1].parse().map_err(|_| parse_err(path, "bad column count"))?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (r, line) in lines.enumerate() {
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, format!("bad number `{}` on data row {}", cell.trim(), r + 1)))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(path, format!("data row {} has {} values, expected {cols}", r + 1, data.len() - before)));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(parse_err(path, format!("expected {rows} data rows, found {seen}")));
    }
    Ok((DMatrix::from_row_slice(rows, cols, &data), parts[2].to_string()))
}

/// `HGGANMAT`, rows and cols as little-endian u32, then row-major f64 LE.
pub fn matrix_to_bytes(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::Capacity("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::Capacity("too many columns".into()))?;
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn matrix_from_bytes(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(parse_err(path, "missing binary matrix header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * rows * cols {
        return Err(parse_err(path, format!("expected {} payload bytes, found {}", 8 * rows * cols, body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, kind: &str) -> Result<()> {
    let bytes = match MatrixFormat::from_path(path) {
        MatrixFormat::Csv => matrix_to_csv(m, kind).into_bytes(),
        MatrixFormat::Binary => matrix_to_bytes(m)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either encoding, chosen by extension. The CSV kind tag is returned
/// when present.
pub fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Option<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match MatrixFormat::from_path(path) {
        MatrixFormat::Csv => {
            let text = String::from_utf8(bytes).map_err(|_| parse_err(path, "not UTF-8"))?;
            let (m, kind) = matrix_from_csv(&text, path)?;
            Ok((m, Some(kind)))
        }
        MatrixFormat::Binary => Ok((matrix_from_bytes(&bytes, path)?, None)),
    }
}

pub fn write_hypergraph(path: &Path, h: &Hypergraph) -> Result<()> {
    fs::write(path, h.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_hypergraph(path: &Path) -> Result<Hypergraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Hypergraph::from_text(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: Group,
    pub bold_path: PathBuf,
    pub sc_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fc_path: Option<PathBuf>,
}

/// Dataset index; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    pub subjects: Vec<ManifestEntry>,
}

/// Writes every matrix and `manifest.json` into `dir`; returns the manifest
/// path.
pub fn save_manifest(records: &[SubjectRecord], dir: &Path, format: MatrixFormat) -> Result<PathBuf> {
    let n = check_common_n(records)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = format.extension();
    let mut subjects = Vec::with_capacity(records.len());
    for rec in records {
        let names = ["bold", "sc", "fc"].map(|m| PathBuf::from(format!("{}_{m}.{ext}", rec.id)));
        write_matrix(&dir.join(&names[0]), &rec.bold, "BOLD")?;
        write_matrix(&dir.join(&names[1]), rec.sc.entries(), "SC")?;
        write_matrix(&dir.join(&names[2]), rec.fc.entries(), "FC")?;
        let [bold_path, sc_path, fc_path] = names;
        subjects.push(ManifestEntry {
            id: rec.id.clone(),
            group: rec.group,
            bold_path,
            sc_path,
            fc_path: Some(fc_path),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        n,
        subjects,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn check_common_n(records: &[SubjectRecord]) -> Result<usize> {
    let first = records.first().ok_or_else(|| Error::Input("no records".into()))?;
    let n = first.n();
    for rec in records {
        if rec.n() != n {
            return Err(Error::Manifest {
                subject: rec.id.clone(),
                reason: format!("has {} nodes, cohort has {n}", rec.n()),
            });
        }
    }
    Ok(n)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(parse_err(path, format!("unsupported manifest version {}", manifest.version)));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let fail = |reason: String| Error::Manifest {
            subject: entry.id.clone(),
            reason,
        };
        let (bold, _) = read_matrix(&base.join(&entry.bold_path))?;
        let (sc, _) = read_matrix(&base.join(&entry.sc_path))?;
        if bold.nrows() != manifest.n {
            return Err(fail(format!("BOLD has {} rows, manifest says n = {}", bold.nrows(), manifest.n)));
        }
        if sc.shape() != (manifest.n, manifest.n) {
            return Err(fail(format!("SC is {}x{}, expected {}x{}", sc.nrows(), sc.ncols(), manifest.n, manifest.n)));
        }
        let fc = match &entry.fc_path {
            Some(p) => {
                let (fc, _) = read_matrix(&base.join(p))?;
                if fc.shape() != (manifest.n, manifest.n) {
                    return Err(fail(format!("FC is {}x{}, expected {}x{}", fc.nrows(), fc.ncols(), manifest.n, manifest.n)));
                }
                ConnectivityMatrix::new(fc, ConnectivityKind::Fc).map_err(|e| fail(e.to_string()))?
            }
            None => pearson_fc(&bold).map_err(|e| fail(e.to_string()))?,
        };
        let sc = ConnectivityMatrix::new(sc, ConnectivityKind::Sc).map_err(|e| fail(e.to_string()))?;
        records.push(SubjectRecord::new(entry.id.clone(), entry.group, bold, sc, fc)?);
    }
    check_common_n(&records)?;
    Ok(records)
}
