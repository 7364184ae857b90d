//! Trained parameters on disk: one binary matrix per tensor plus a JSON
//! index that records everything `generate` needs to rebuild the inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{DiscriminatorParams, TrainHistory};
use crate::construct::DhcConfig;
use crate::dataio::{read_hypergraph, read_matrix, write_hypergraph, write_matrix};
use crate::error::{Error, Result};
use crate::hgcore::Hypergraph;
use crate::ihen::{Activation, GeneratorParams, Layer};
use crate::nn::{Dense, Hidden, Mlp};

pub const INDEX_FILE: &str = "checkpoint.json";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub w_v: PathBuf,
    pub w_e: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseFiles {
    pub w: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub n: usize,
    pub lambda: f64,
    pub activation: Activation,
    pub zscore_bold: bool,
    pub dhc: DhcConfig,
    pub consensus: PathBuf,
    pub generator: Vec<LayerFiles>,
    pub discriminator_hidden: Hidden,
    pub discriminator: Vec<DenseFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<PathBuf>,
}

/// A trained model and the preprocessing it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub consensus: Hypergraph,
    pub zscore_bold: bool,
    pub dhc: DhcConfig,
}

/// Writes every tensor and the index into `dir`; returns the index path.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint, history: Option<&TrainHistory>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut generator = Vec::new();
    for (l, layer) in ckpt.generator.layers.iter().enumerate() {
        let files = LayerFiles {
            w_v: PathBuf::from(format!("generator_{l}_w_v.bin")),
            w_e: PathBuf::from(format!("generator_{l}_w_e.bin")),
        };
        write_matrix(&dir.join(&files.w_v), &layer.w_v, "W_V")?;
        write_matrix(&dir.join(&files.w_e), &layer.w_e, "W_E")?;
        generator.push(files);
    }
    let mut discriminator = Vec::new();
    for (l, layer) in ckpt.discriminator.mlp.layers.iter().enumerate() {
        let files = DenseFiles {
            w: PathBuf::from(format!("discriminator_{l}_w.bin")),
            b: PathBuf::from(format!("discriminator_{l}_b.bin")),
        };
        write_matrix(&dir.join(&files.w), &layer.w, "W")?;
        write_matrix(&dir.join(&files.b), &layer.b, "B")?;
        discriminator.push(files);
    }
    let consensus = PathBuf::from("consensus.hg");
    write_hypergraph(&dir.join(&consensus), &ckpt.consensus)?;
    let history_path = match history {
        Some(h) => {
            let p = PathBuf::from("history.csv");
            let full = dir.join(&p);
            fs::write(&full, h.to_csv()).map_err(|e| Error::io(&full, e))?;
            Some(p)
        }
        None => None,
    };
    let index = CheckpointIndex {
        version: VERSION,
        n: ckpt.discriminator.n(),
        lambda: ckpt.generator.lambda,
        activation: ckpt.generator.activation,
        zscore_bold: ckpt.zscore_bold,
        dhc: ckpt.dhc.clone(),
        consensus,
        generator,
        discriminator_hidden: ckpt.discriminator.mlp.hidden,
        discriminator,
        history: history_path,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts the checkpoint directory or its index file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let index_path = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
    let dir = index_path.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: index_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if index.version != VERSION {
        return Err(Error::Parse {
            context: index_path.display().to_string(),
            reason: format!("unsupported checkpoint version {}", index.version),
        });
    }
    let layers = index
        .generator
        .iter()
        .map(|f| {
            Ok(Layer {
                w_v: read_matrix(&dir.join(&f.w_v))?.0,
                w_e: read_matrix(&dir.join(&f.w_e))?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dense = index
        .discriminator
        .iter()
        .map(|f| {
            Ok(Dense {
                w: read_matrix(&dir.join(&f.w))?.0,
                b: read_matrix(&dir.join(&f.b))?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() || dense.is_empty() {
        return Err(Error::Input("checkpoint lists no tensors".into()));
    }
    let mlp = Mlp {
        layers: dense,
        hidden: index.discriminator_hidden,
    };
    Ok(Checkpoint {
        generator: GeneratorParams {
            layers,
            lambda: index.lambda,
            activation: index.activation,
        },
        discriminator: DiscriminatorParams::from_mlp(index.n, mlp)?,
        consensus: read_hypergraph(&dir.join(&index.consensus))?,
        zscore_bold: index.zscore_bold,
        dhc: index.dhc,
    })
}
