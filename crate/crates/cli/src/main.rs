mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hggan::adversary::{generate, train_prepared, DiscriminatorParams, SubjectInputs};
use hggan::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hggan::construct::{dhc_construct, ohgh_consensus, ConsensusSidecar};
use hggan::dataio::{
    load_manifest, read_hypergraph, read_matrix, save_manifest, synth_cohort, write_hypergraph, write_matrix, Group,
    MatrixFormat, SubjectRecord,
};
use hggan::eval::{classify_eval, emit_ranking, emit_reports, mean_metrics, region_ranking, ReportFormat};
use hggan::hgcore::Hypergraph;
use hggan::ihen::{ConnectivityKind, GeneratorParams};
use hggan::stats::total_variation;
use hggan::walk::{endpoint_distribution_exact, sample_endpoint_distribution, transition_matrix};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "hggan", version, about = "Hypergraph GAN for multimodal brain connectivity")]
struct Cli {
    /// Seed applied to every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// JSON file with module settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sc,
    Fc,
    Mc,
}

impl From<Kind> for ConnectivityKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Sc => ConnectivityKind::Sc,
            Kind::Fc => ConnectivityKind::Fc,
            Kind::Mc => ConnectivityKind::Mc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
            Format::Svg => ReportFormat::Svg,
        }
    }
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Svg => "svg",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-group cohort and its manifest.
    Synth {
        /// Store matrices as CSV instead of binary.
        #[arg(long)]
        csv: bool,
    },
    /// Build each subject's initial hypergraph from its BOLD series.
    Construct,
    /// Consensus hypergraph of a cohort.
    Consensus {
        /// Directory of `.hg` files; built from the manifest when absent.
        #[arg(long)]
        hypergraphs: Option<PathBuf>,
    },
    /// Adversarial training; writes a checkpoint directory.
    Train {
        /// Consensus hypergraph; computed from the manifest when absent.
        #[arg(long)]
        consensus: Option<PathBuf>,
    },
    /// Multimodal connectivity and node correlations for every subject.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exact versus sampled endpoint distribution of a connectivity matrix.
    WalkCheck {
        #[arg(long)]
        matrix: PathBuf,
        /// Start node, 0-based.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        samples: Option<usize>,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classification accuracy, sensitivity and specificity.
    Evaluate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Nodes whose mean correlation differs most between groups.
    Rank {
        #[arg(long, default_value_t = 7)]
        k: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Circular connectivity plot with the top-ranked nodes highlighted.
    Plot {
        #[arg(long, default_value_t = 7)]
        k: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| c.downcast_ref::<hggan::Error>().is_some_and(hggan::Error::is_numeric));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let out = cli.out_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = || -> Result<Vec<SubjectRecord>> {
        let path = cli.manifest.as_deref().ok_or_else(|| anyhow!("--manifest is required"))?;
        Ok(load_manifest(path)?)
    };
    match cli.command {
        Command::Synth { csv } => {
            let records = synth_cohort(&cfg.synth)?;
            let format = if csv { MatrixFormat::Csv } else { MatrixFormat::Binary };
            let path = save_manifest(&records, &out.join("data"), format)?;
            println!("{}", path.display());
        }
        Command::Construct => {
            let records = manifest()?;
            let dir = out.join("hypergraphs");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for rec in &records {
                let h = dhc_construct(&rec.bold, &cfg.dhc)?;
                write_hypergraph(&dir.join(format!("{}.hg", rec.id)), &h)?;
            }
            println!("{}", dir.display());
        }
        Command::Consensus { hypergraphs } => {
            let cohort = match hypergraphs {
                Some(dir) => read_hypergraph_dir(&dir)?,
                None => construct_all(&manifest()?, &cfg)?,
            };
            let result = ohgh_consensus(&cohort, &cfg.ohgh)?;
            write_hypergraph(&out.join("consensus.hg"), &result.hypergraph)?;
            let sidecar = ConsensusSidecar {
                score: result.score,
                iterations: result.iterations,
                seed: cfg.ohgh.seed,
            };
            write_json(&out.join("consensus.json"), &sidecar)?;
            println!("score {:.6} after {} sweeps", result.score, result.iterations);
        }
        Command::Train { consensus } => {
            let records = manifest()?;
            let consensus = match consensus {
                Some(p) => read_hypergraph(&p)?,
                None => ohgh_consensus(&construct_all(&records, &cfg)?, &cfg.ohgh)?.hypergraph,
            };
            let inputs = subject_inputs(&records, &consensus, cfg.generator.zscore_bold, &cfg)?;
            let (n, d) = (records[0].n(), common_length(&records)?);
            let generator = GeneratorParams::init(d, n, &cfg.generator)?;
            let discriminator = DiscriminatorParams::init(n, &cfg.discriminator)?;
            let outcome = train_prepared(&inputs, generator, discriminator, &cfg.train)?;
            let ckpt = Checkpoint {
                generator: outcome.generator,
                discriminator: outcome.discriminator,
                consensus,
                zscore_bold: cfg.generator.zscore_bold,
                dhc: cfg.dhc.clone(),
            };
            let index = save_checkpoint(&out.join("checkpoint"), &ckpt, Some(&outcome.history))?;
            let last = outcome.history.records.last().map_or(outcome.history.initial_tv, |r| r.probe_tv);
            println!("probe TV {:.4} -> {:.4}; {}", outcome.history.initial_tv, last, index.display());
        }
        Command::Generate { checkpoint } => {
            let records = manifest()?;
            let ckpt = load_checkpoint(&checkpoint_path(checkpoint, out))?;
            let dir = out.join("generated");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (rec, (m, co)) in records.iter().zip(generated(&records, &ckpt, &cfg)?) {
                let co = DMatrix::from_column_slice(co.len(), 1, co.as_slice());
                for ext in ["csv", "bin"] {
                    write_matrix(&dir.join(format!("{}_mc.{ext}", rec.id)), &m, "MC")?;
                    write_matrix(&dir.join(format!("{}_co.{ext}", rec.id)), &co, "CO")?;
                }
            }
            println!("{}", dir.display());
        }
        Command::WalkCheck {
            matrix,
            start,
            samples,
            out: target,
        } => {
            let (c, _) = read_matrix(&matrix)?;
            let p = transition_matrix(&c)?;
            if start >= p.n() {
                bail!(hggan::Error::Input(format!("start {start} out of range for n = {}", p.n())));
            }
            let samples = samples.unwrap_or(cfg.walk_check.samples);
            let seed = cli.seed.unwrap_or(0);
            let exact = endpoint_distribution_exact(&p, start)?;
            let (sampled, _) = sample_endpoint_distribution(&p, start, samples, seed, cfg.walk_check.cap);
            let report = WalkCheck {
                start,
                tv_distance: total_variation(&exact.probs, &sampled.probs),
                exact_distribution: exact.probs,
                sampled_distribution: sampled.probs,
                samples,
            };
            let text = serde_json::to_string_pretty(&report)?;
            match target {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
        }
        Command::Evaluate {
            kind,
            checkpoint,
            format,
        } => {
            let records = manifest()?;
            let labels: Vec<Group> = records.iter().map(|r| r.group).collect();
            let matrices: Vec<DMatrix<f64>> = match kind {
                Kind::Sc => records.iter().map(|r| r.sc.entries().clone()).collect(),
                Kind::Fc => records.iter().map(|r| r.fc.entries().clone()).collect(),
                Kind::Mc => {
                    let ckpt = load_checkpoint(&checkpoint_path(checkpoint, out))?;
                    generated(&records, &ckpt, &cfg)?.into_iter().map(|(m, _)| m).collect()
                }
            };
            let reports = (0..cfg.evaluate.seeds)
                .map(|s| classify_eval(&matrices, &labels, kind.into(), &cfg.evaluate.classifier, cli.seed.unwrap_or(0) + s))
                .collect::<hggan::Result<Vec<_>>>()?;
            let (acc, sen, spe) = mean_metrics(&reports);
            let kind: ConnectivityKind = kind.into();
            let path = out.join(format!("evaluation_{}.{}", kind.as_str().to_lowercase(), format.ext()));
            emit_reports(&reports, format.into(), &path)?;
            println!("{kind}: ACC {acc:.4} SEN {sen:.4} SPE {spe:.4} over {} seeds; {}", reports.len(), path.display());
        }
        Command::Rank { k, checkpoint, format } => {
            let records = manifest()?;
            let ckpt = load_checkpoint(&checkpoint_path(checkpoint, out))?;
            let gen = generated(&records, &ckpt, &cfg)?;
            let labels: Vec<Group> = records.iter().map(|r| r.group).collect();
            let co: Vec<_> = gen.iter().map(|(_, c)| c.clone()).collect();
            let ranking = region_ranking(&co, &labels, k)?;
            let mean_m = mean_matrix(gen.iter().map(|(m, _)| m));
            let path = out.join(format!("ranking.{}", format.ext()));
            emit_ranking(&ranking, Some(&mean_m), format.into(), &path)?;
            let shown: Vec<String> = ranking.top_k.iter().map(|i| (i + 1).to_string()).collect();
            println!("top {k} nodes (1-based): {}; {}", shown.join(" "), path.display());
        }
        Command::Plot { k, checkpoint } => {
            let records = manifest()?;
            let ckpt = load_checkpoint(&checkpoint_path(checkpoint, out))?;
            let gen = generated(&records, &ckpt, &cfg)?;
            let labels: Vec<Group> = records.iter().map(|r| r.group).collect();
            let co: Vec<_> = gen.iter().map(|(_, c)| c.clone()).collect();
            let ranking = region_ranking(&co, &labels, k)?;
            let mean_m = mean_matrix(gen.iter().map(|(m, _)| m));
            let path = out.join("connectivity.svg");
            emit_ranking(&ranking, Some(&mean_m), ReportFormat::Svg, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct WalkCheck {
    start: usize,
    exact_distribution: Vec<f64>,
    sampled_distribution: Vec<f64>,
    tv_distance: f64,
    samples: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(given: Option<PathBuf>, out: &Path) -> PathBuf {
    given.unwrap_or_else(|| out.join("checkpoint"))
}

fn construct_all(records: &[SubjectRecord], cfg: &PipelineConfig) -> Result<Vec<Hypergraph>> {
    Ok(records
        .iter()
        .map(|r| dhc_construct(&r.bold, &cfg.dhc))
        .collect::<hggan::Result<Vec<_>>>()?)
}

fn read_hypergraph_dir(dir: &Path) -> Result<Vec<Hypergraph>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hg"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(hggan::Error::Input(format!("no .hg files in {}", dir.display())));
    }
    Ok(paths.iter().map(|p| read_hypergraph(p)).collect::<hggan::Result<Vec<_>>>()?)
}

fn common_length(records: &[SubjectRecord]) -> Result<usize> {
    let d = records.first().ok_or_else(|| anyhow!("manifest lists no subjects"))?.bold.ncols();
    if records.iter().any(|r| r.bold.ncols() != d) {
        bail!(hggan::Error::Input("all BOLD series must have the same length".into()));
    }
    Ok(d)
}

fn subject_inputs(
    records: &[SubjectRecord],
    consensus: &Hypergraph,
    zscore_bold: bool,
    cfg: &PipelineConfig,
) -> Result<Vec<SubjectInputs>> {
    let mut gcfg = cfg.generator.clone();
    gcfg.zscore_bold = zscore_bold;
    Ok(records
        .iter()
        .map(|r| SubjectInputs::from_parts(&r.id, &r.bold, &r.sc, &r.fc, consensus, &cfg.dhc, &gcfg, cfg.train.seed))
        .collect::<hggan::Result<Vec<_>>>()?)
}

fn generated(
    records: &[SubjectRecord],
    ckpt: &Checkpoint,
    cfg: &PipelineConfig,
) -> Result<Vec<(DMatrix<f64>, nalgebra::DVector<f64>)>> {
    let mut cfg = cfg.clone();
    cfg.dhc = ckpt.dhc.clone();
    let inputs = subject_inputs(records, &ckpt.consensus, ckpt.zscore_bold, &cfg)?;
    inputs
        .iter()
        .map(|s| {
            let (m, co) = generate(&ckpt.generator, s)?;
            Ok((m.into_entries(), co))
        })
        .collect()
}

fn mean_matrix<'a>(ms: impl Iterator<Item = &'a DMatrix<f64>>) -> DMatrix<f64> {
    let mut count = 0.0;
    let mut sum: Option<DMatrix<f64>> = None;
    for m in ms {
        count += 1.0;
        sum = Some(match sum {
            Some(s) => s + m,
            None => m.clone(),
        });
    }
    sum.map(|s| s / count).unwrap_or_else(|| DMatrix::zeros(0, 0))
}
