//! Downstream classification, region ranking and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Group;
use crate::error::{Error, Result};
use crate::ihen::ConnectivityKind;
use crate::nn::{flatten_grads, Adam, Hidden, Mlp};

const SPLIT_TRIES: u64 = 10;

/// Binary confusion counts with the positive class first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(truth: &[bool], predicted: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub connectivity_kind: ConnectivityKind,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    /// Seed of the split actually used (after any redraws).
    pub split_seed: u64,
    pub train_fraction: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub train_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            learning_rate: 1e-3,
            epochs: 300,
            train_fraction: 0.65,
        }
    }
}

/// Strict upper triangle, row by row.
pub fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n).flat_map(|i| ((i + 1)..n).map(move |j| m[(i, j)])).collect()
}

/// The two groups in order of first appearance; the second is positive.
fn two_groups(labels: &[Group]) -> Result<(Group, Group)> {
    let mut seen: Vec<Group> = Vec::new();
    for &g in labels {
        if !seen.contains(&g) {
            seen.push(g);
        }
    }
    match seen.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Input(format!("expected exactly two groups, found {}", seen.len()))),
    }
}

/// Random split with `round(fraction · N)` training subjects, redrawn with
/// the next seed while a class is missing from either side.
pub fn split_indices(positive: &[bool], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>, u64)> {
    let total = positive.len();
    let n_train = (fraction * total as f64).round() as usize;
    if !(fraction > 0.0 && fraction < 1.0) || n_train == 0 || n_train >= total {
        return Err(Error::Split(format!("train fraction {fraction} leaves an empty side for {total} subjects")));
    }
    for s in seed..seed + SPLIT_TRIES {
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        let (train, test) = order.split_at(n_train);
        let has_both = |idx: &[usize]| idx.iter().any(|&i| positive[i]) && idx.iter().any(|&i| !positive[i]);
        if has_both(train) && has_both(test) {
            return Ok((train.to_vec(), test.to_vec(), s));
        }
    }
    Err(Error::Split(format!("no split with both classes on each side in {SPLIT_TRIES} tries")))
}

fn standardize(rows: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.nrows(), rows.ncols(), |i, j| (rows[(i, j)] - mean[j]) / sd[j])
}

fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let rows = x.nrows() as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / rows).collect();
    let sd = x
        .column_iter()
        .zip(&mean)
        .map(|(c, &m)| {
            let v = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / rows).sqrt();
            if v > 1e-12 {
                v
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

fn softmax_ce_grad(logits: &DMatrix<f64>, targets: &[usize]) -> (f64, DMatrix<f64>) {
    let rows = logits.nrows();
    let mut grad = DMatrix::zeros(rows, logits.ncols());
    let mut loss = 0.0;
    for r in 0..rows {
        let row = logits.row(r);
        let mx = row.max();
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for c in 0..logits.ncols() {
            let p = (logits[(r, c)] - mx).exp() / z;
            grad[(r, c)] = (p - if c == targets[r] { 1.0 } else { 0.0 }) / rows as f64;
        }
        loss -= (logits[(r, targets[r])] - mx) - z.ln();
    }
    (loss / rows as f64, grad)
}

/// Trains the two-output classifier on `x_train` (rows are subjects) and
/// predicts the positive class on `x_test`.
pub fn fit_predict(
    x_train: &DMatrix<f64>,
    y_train: &[bool],
    x_test: &DMatrix<f64>,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    let (mean, sd) = column_stats(x_train);
    let xt = standardize(x_train, &mean, &sd);
    let xs = standardize(x_test, &mean, &sd);
    let mut widths = vec![xt.ncols()];
    widths.extend(&cfg.hidden);
    widths.push(2);
    let mut mlp = Mlp::new(&widths, Hidden::Relu, seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let targets: Vec<usize> = y_train.iter().map(|&y| y as usize).collect();
    for _ in 0..cfg.epochs {
        let trace = mlp.forward(&xt);
        let (loss, d_out) = softmax_ce_grad(&trace.output, &targets);
        if !loss.is_finite() {
            return Err(Error::NumericOverflow("classifier loss is not finite".into()));
        }
        let grads = mlp.backward(&trace, &d_out);
        opt.step(mlp.tensors_mut(), &flatten_grads(&grads), false);
    }
    let out = mlp.forward(&xs).output;
    Ok(out.row_iter().map(|r| r[1] > r[0]).collect())
}

/// Classification from the strict upper triangle of each subject's matrix.
pub fn classify_eval(
    matrices: &[DMatrix<f64>],
    labels: &[Group],
    kind: ConnectivityKind,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<EvalReport> {
    if matrices.len() != labels.len() {
        return Err(Error::Input("one label per subject is required".into()));
    }
    let (_, positive_group) = two_groups(labels)?;
    let positive: Vec<bool> = labels.iter().map(|&g| g == positive_group).collect();
    for class in [true, false] {
        if positive.iter().filter(|&&p| p == class).count() < 4 {
            return Err(Error::Input("each class needs at least four subjects".into()));
        }
    }
    let n = matrices[0].nrows();
    if matrices.iter().any(|m| m.shape() != (n, n)) {
        return Err(Error::dim("all connectivity matrices must share one square shape"));
    }
    let features: Vec<Vec<f64>> = matrices.iter().map(upper_triangle).collect();
    let p = features[0].len();
    let (train, test, used) = split_indices(&positive, cfg.train_fraction, seed)?;
    let gather = |idx: &[usize]| DMatrix::from_fn(idx.len(), p, |r, c| features[idx[r]][c]);
    let y_train: Vec<bool> = train.iter().map(|&i| positive[i]).collect();
    let predicted = fit_predict(&gather(&train), &y_train, &gather(&test), cfg, used)?;
    let truth: Vec<bool> = test.iter().map(|&i| positive[i]).collect();
    let confusion = Confusion::from_predictions(&truth, &predicted);
    Ok(EvalReport {
        connectivity_kind: kind,
        acc: confusion.accuracy(),
        sen: confusion.sensitivity(),
        spe: confusion.specificity(),
        split_seed: used,
        train_fraction: cfg.train_fraction,
        confusion,
    })
}

/// Mean ACC, SEN and SPE over `reports`.
pub fn mean_metrics(reports: &[EvalReport]) -> (f64, f64, f64) {
    let k = reports.len().max(1) as f64;
    (
        reports.iter().map(|r| r.acc).sum::<f64>() / k,
        reports.iter().map(|r| r.sen).sum::<f64>() / k,
        reports.iter().map(|r| r.spe).sum::<f64>() / k,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRanking {
    pub groups: (Group, Group),
    /// Per-node mean `Co` for each group, in the order of `groups`.
    pub means: (Vec<f64>, Vec<f64>),
    pub diff: Vec<f64>,
    pub top_k: Vec<usize>,
}

/// Nodes ordered by the absolute difference of group-mean `Co`, ties to the
/// lower index.
pub fn region_ranking(co: &[DVector<f64>], labels: &[Group], k: usize) -> Result<RegionRanking> {
    if co.len() != labels.len() || co.is_empty() {
        return Err(Error::Input("one Co vector per labelled subject is required".into()));
    }
    let groups = two_groups(labels)?;
    let n = co[0].len();
    if co.iter().any(|c| c.len() != n) {
        return Err(Error::dim("Co vectors differ in length"));
    }
    if k > n {
        return Err(Error::Input(format!("k = {k} exceeds the node count {n}")));
    }
    let mean_of = |g: Group| {
        let members: Vec<&DVector<f64>> = co.iter().zip(labels).filter(|(_, &l)| l == g).map(|(c, _)| c).collect();
        (0..n)
            .map(|i| members.iter().map(|c| c[i]).sum::<f64>() / members.len() as f64)
            .collect::<Vec<f64>>()
    };
    let (ma, mb) = (mean_of(groups.0), mean_of(groups.1));
    let diff: Vec<f64> = ma.iter().zip(&mb).map(|(a, b)| (a - b).abs()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diff[j].total_cmp(&diff[i]).then(i.cmp(&j)));
    order.truncate(k);
    Ok(RegionRanking {
        groups,
        means: (ma, mb),
        diff,
        top_k: order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            "svg" => Some(Self::Svg),
            _ => None,
        }
    }
}

const REPORT_HEADER: &str = "connectivity_kind,acc,sen,spe,split_seed,train_fraction,tp,tn,fp,fn";

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        let c = &r.confusion;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{},{:?},{},{},{},{}",
            r.connectivity_kind, r.acc, r.sen, r.spe, r.split_seed, r.train_fraction, c.tp, c.tn, c.fp, c.fn_
        );
    }
    out
}

pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let bad = |reason: String| Error::Parse {
        context: "report CSV".into(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(format!("expected 10 fields in `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count `{s}`")));
            Ok(EvalReport {
                connectivity_kind: ConnectivityKind::parse(f[0]).ok_or_else(|| bad(format!("bad kind `{}`", f[0])))?,
                acc: num(f[1])?,
                sen: num(f[2])?,
                spe: num(f[3])?,
                split_seed: f[4].parse().map_err(|_| bad(format!("bad seed `{}`", f[4])))?,
                train_fraction: num(f[5])?,
                confusion: Confusion {
                    tp: int(f[6])?,
                    tn: int(f[7])?,
                    fp: int(f[8])?,
                    fn_: int(f[9])?,
                },
            })
        })
        .collect()
}

pub fn ranking_to_csv(r: &RegionRanking) -> String {
    let mut out = format!("node,mean_{},mean_{},diff,rank\n", r.groups.0, r.groups.1);
    for i in 0..r.diff.len() {
        let rank = r.top_k.iter().position(|&t| t == i).map(|p| (p + 1).to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{:?},{:?},{:?},{}", i, r.means.0[i], r.means.1[i], r.diff[i], rank);
    }
    out
}

/// Bar chart of ACC, SEN and SPE per report.
pub fn reports_to_svg(reports: &[EvalReport]) -> String {
    let (bar, gap, height) = (18.0, 30.0, 200.0);
    let width = 40.0 + reports.len() as f64 * (3.0 * bar + gap);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\">\n",
        height + 40.0
    );
    for (k, r) in reports.iter().enumerate() {
        let x0 = 20.0 + k as f64 * (3.0 * bar + gap);
        for (m, (value, color)) in [(r.acc, "#4c72b0"), (r.sen, "#55a868"), (r.spe, "#c44e52")].iter().enumerate() {
            let h = value * height;
            let _ = writeln!(
                out,
                "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar}\" height=\"{h:.1}\" fill=\"{color}\"/>",
                x0 + m as f64 * bar,
                10.0 + height - h
            );
        }
        let _ = writeln!(
            out,
            "  <text x=\"{:.1}\" y=\"{}\" font-size=\"12\">{}</text>",
            x0,
            height + 30.0,
            r.connectivity_kind
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Circular layout: one edge per node pair with opacity `|M(i,j)| / max|M|`;
/// top-ranked nodes are drawn with class `top`.
pub fn ranking_to_svg(m: &DMatrix<f64>, r: &RegionRanking) -> Result<String> {
    let n = r.diff.len();
    if m.shape() != (n, n) {
        return Err(Error::dim("connectivity does not match the ranking"));
    }
    let (size, radius) = (400.0, 160.0);
    let pos: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (size / 2.0 + radius * t.cos(), size / 2.0 + radius * t.sin())
        })
        .collect();
    let scale = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].abs())
        .fold(0.0, f64::max);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n");
    for i in 0..n {
        for j in (i + 1)..n {
            let opacity = if scale > 0.0 { m[(i, j)].abs() / scale } else { 0.0 };
            let _ = writeln!(
                out,
                "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#555\" stroke-opacity=\"{opacity:.4}\"/>",
                pos[i].0, pos[i].1, pos[j].0, pos[j].1
            );
        }
    }
    for (i, &(x, y)) in pos.iter().enumerate() {
        let top = r.top_k.contains(&i);
        let (class, fill) = if top { ("top", "#d62728") } else { ("node", "#1f77b4") };
        let _ = writeln!(
            out,
            "  <circle class=\"{class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{}\" fill=\"{fill}\"/>",
            if top { 9 } else { 6 }
        );
        let _ = writeln!(out, "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>", x + 10.0, y, i + 1);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes evaluation reports in the chosen format.
pub fn emit_reports(reports: &[EvalReport], format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => reports_to_csv(reports),
        ReportFormat::Json => serde_json::to_string_pretty(reports)?,
        ReportFormat::Svg => reports_to_svg(reports),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a ranking; SVG output needs the connectivity to draw edges.
pub fn emit_ranking(r: &RegionRanking, m: Option<&DMatrix<f64>>, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => ranking_to_csv(r),
        ReportFormat::Json => serde_json::to_string_pretty(r)?,
        ReportFormat::Svg => {
            let m = m.ok_or_else(|| Error::Input("SVG ranking needs a connectivity matrix".into()))?;
            ranking_to_svg(m, r)?
        }
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_confusion() {
        let truth = [true, true, false, false, false];
        let c = Confusion::from_predictions(&truth, &[true; 5]);
        assert_eq!((c.sensitivity(), c.specificity()), (1.0, 0.0));
        assert_eq!(c.accuracy(), 0.4);
        let c = Confusion::from_predictions(&truth, &[false; 5]);
        assert_eq!((c.sensitivity(), c.specificity()), (0.0, 1.0));
        assert_eq!(c.accuracy(), 0.6);
    }

    #[test]
    fn identical_groups_rank_by_index() {
        let co = vec![DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]); 4];
        let labels = [Group::A, Group::B, Group::A, Group::B];
        let r = region_ranking(&co, &labels, 3).unwrap();
        assert!(r.diff.iter().all(|&d| d == 0.0));
        assert_eq!(r.top_k, vec![0, 1, 2]);
        assert!(matches!(region_ranking(&co, &labels, 5), Err(Error::Input(_))));
    }

    #[test]
    fn shifted_node_ranks_first() {
        let base = DVector::from_vec(vec![0.3, 0.1, 0.4, 0.2]);
        let mut shifted = base.clone();
        shifted[2] += 1.0;
        let r = region_ranking(&[base.clone(), shifted.clone(), base, shifted], &[Group::A, Group::B, Group::A, Group::B], 1)
            .unwrap();
        assert_eq!(r.top_k, vec![2]);
    }

    #[test]
    fn report_csv_json_round_trip() {
        let r = EvalReport {
            connectivity_kind: ConnectivityKind::Mc,
            acc: 0.8571428571428571,
            sen: 5.0 / 7.0,
            spe: 1.0,
            split_seed: 12,
            train_fraction: 0.65,
            confusion: Confusion {
                tp: 5,
                tn: 7,
                fp: 0,
                fn_: 2,
            },
        };
        let json = serde_json::to_string(&[r.clone()]).unwrap();
        let back: Vec<EvalReport> = serde_json::from_str(&json).unwrap();
        let via_csv = reports_from_csv(&reports_to_csv(&back)).unwrap();
        assert_eq!(via_csv, vec![r]);
        assert_eq!(serde_json::to_string(&via_csv).unwrap(), json);
    }

    #[test]
    fn split_keeps_both_classes() {
        let positive = [true, false, false, false, false, false, false, true];
        let (train, test, _) = split_indices(&positive, 0.5, 0).unwrap();
        assert!(train.iter().any(|&i| positive[i]) && test.iter().any(|&i| positive[i]));
        assert!(matches!(split_indices(&[true, false], 0.5, 0), Err(Error::Split(_))));
    }
}
