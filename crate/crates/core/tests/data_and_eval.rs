use std::fs;

use hggan::adversary::{DiscriminatorConfig, DiscriminatorParams};
use hggan::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hggan::construct::DhcConfig;
use hggan::dataio::{
    load_manifest, pearson_fc, save_manifest, synth_cohort, synth_subject, Group, Manifest, MatrixFormat, SynthConfig,
};
use hggan::eval::{classify_eval, mean_metrics, ranking_to_svg, region_ranking, ClassifierConfig};
use hggan::hgcore::Hypergraph;
use hggan::ihen::{ConnectivityKind, GeneratorConfig, GeneratorParams};
use hggan::Error;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> SynthConfig {
    SynthConfig {
        n: 8,
        d: 40,
        subjects_per_group: 4,
        ..Default::default()
    }
}

#[test]
fn synthetic_cohort_is_reproducible() {
    let a = synth_cohort(&small()).unwrap();
    let b = synth_cohort(&small()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let pa = save_manifest(&a, &dir.path().join("a"), MatrixFormat::Binary).unwrap();
    let pb = save_manifest(&b, &dir.path().join("b"), MatrixFormat::Binary).unwrap();
    for rec in &a {
        let name = format!("{}_sc.bin", rec.id);
        assert_eq!(
            fs::read(pa.parent().unwrap().join(&name)).unwrap(),
            fs::read(pb.parent().unwrap().join(&name)).unwrap()
        );
    }
    let other = synth_cohort(&SynthConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a[0].bold, other[0].bold);
}

#[test]
fn zero_effect_makes_groups_identical() {
    let cfg = SynthConfig {
        group_effect: 0.0,
        ..small()
    };
    let a = synth_subject(&cfg, Group::A, 3).unwrap();
    let b = synth_subject(&cfg, Group::B, 3).unwrap();
    assert_eq!(a.bold, b.bold);
    assert_eq!(a.sc, b.sc);
}

#[test]
fn pearson_fc_is_symmetric_bounded_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.gen_range(2..10);
        let b = DMatrix::from_fn(n, 30, |_, _| rng.gen_range(-3.0..3.0));
        let fc = pearson_fc(&b).unwrap();
        let m = fc.entries();
        for i in 0..n {
            assert_eq!(m[(i, i)], 1.0);
            for j in 0..n {
                assert_eq!(m[(i, j)], m[(j, i)]);
                assert!((-1.0..=1.0).contains(&m[(i, j)]));
            }
        }
        // invariant to affine rescaling of a row
        let mut scaled = b.clone();
        scaled.row_mut(0).iter_mut().for_each(|x| *x = 3.0 * *x + 7.0);
        let fc2 = pearson_fc(&scaled).unwrap();
        assert!((fc.entries() - fc2.entries()).amax() < 1e-12);
    }
}

#[test]
fn planted_block_pair_raises_functional_coupling() {
    let cfg = SynthConfig {
        d: 400,
        ..Default::default()
    };
    let records = synth_cohort(&cfg).unwrap();
    let (p, q) = cfg.perturbed_blocks;
    let cross: Vec<(usize, usize)> = (0..cfg.n)
        .flat_map(|i| (0..cfg.n).map(move |j| (i, j)))
        .filter(|&(i, j)| cfg.block_of(i) == p && cfg.block_of(j) == q)
        .collect();
    let score = |g: Group| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.group == g)
            .map(|r| cross.iter().map(|&(i, j)| r.fc.entries()[(i, j)].abs()).sum::<f64>() / cross.len() as f64)
            .collect()
    };
    let (a, b) = (score(Group::A), score(Group::B));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let t = (mean(&b) - mean(&a)) / (var(&a) / a.len() as f64 + var(&b) / b.len() as f64).sqrt();
    // one-sided 1% point of the standard normal
    assert!(t > 2.326, "Welch statistic {t}");
}

#[test]
fn missing_matrix_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_cohort(&small()).unwrap();
    let path = save_manifest(&records, dir.path(), MatrixFormat::Binary).unwrap();
    let victim = dir.path().join(format!("{}_sc.bin", records[2].id));
    fs::remove_file(&victim).unwrap();
    match load_manifest(&path) {
        Err(Error::Io { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn mismatched_node_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let big = synth_cohort(&small()).unwrap();
    let odd = synth_subject(&SynthConfig { n: 6, ..small() }, Group::B, 0).unwrap();
    let mut records = big.clone();
    records.truncate(3);
    let path = save_manifest(&records, dir.path(), MatrixFormat::Csv).unwrap();
    let mut manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let other_dir = tempfile::tempdir().unwrap();
    let other = save_manifest(&[odd], other_dir.path(), MatrixFormat::Csv).unwrap();
    let other_manifest: Manifest = serde_json::from_str(&fs::read_to_string(&other).unwrap()).unwrap();
    let mut entry = other_manifest.subjects[0].clone();
    for (name, slot) in [(&entry.bold_path.clone(), "bold"), (&entry.sc_path.clone(), "sc")] {
        let dest = format!("odd_{slot}.csv");
        fs::copy(other_dir.path().join(name), dir.path().join(&dest)).unwrap();
        match slot {
            "bold" => entry.bold_path = dest.into(),
            _ => entry.sc_path = dest.into(),
        }
    }
    entry.fc_path = None;
    entry.id = "odd".into();
    manifest.subjects.push(entry);
    fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    match load_manifest(&path) {
        Err(Error::Manifest { subject, .. }) => assert_eq!(subject, "odd"),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

fn labels(per_group: usize) -> Vec<Group> {
    (0..2 * per_group).map(|i| if i < per_group { Group::A } else { Group::B }).collect()
}

#[test]
fn classification_is_reproducible() {
    let records = synth_cohort(&SynthConfig {
        subjects_per_group: 8,
        ..small()
    })
    .unwrap();
    let mats: Vec<_> = records.iter().map(|r| r.fc.entries().clone()).collect();
    let labels: Vec<_> = records.iter().map(|r| r.group).collect();
    let cfg = ClassifierConfig::default();
    let a = classify_eval(&mats, &labels, ConnectivityKind::Fc, &cfg, 3).unwrap();
    let b = classify_eval(&mats, &labels, ConnectivityKind::Fc, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.confusion.total(), 6);
}

#[test]
fn separable_groups_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = labels(20);
    let mats: Vec<DMatrix<f64>> = labels
        .iter()
        .map(|&g| {
            let shift = if g == Group::B { 1.0 } else { 0.0 };
            DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0) + shift)
        })
        .collect();
    let reports: Vec<_> = (0..5)
        .map(|s| classify_eval(&mats, &labels, ConnectivityKind::Sc, &ClassifierConfig::default(), s).unwrap())
        .collect();
    let (acc, _, _) = mean_metrics(&reports);
    assert!(acc >= 0.9, "ACC {acc}");
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let records = synth_cohort(&SynthConfig::default()).unwrap();
    let mats: Vec<_> = records.iter().map(|r| r.fc.entries().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let reports: Vec<_> = (0..20)
        .map(|s| {
            let mut l: Vec<Group> = records.iter().map(|r| r.group).collect();
            l.shuffle(&mut rng);
            classify_eval(&mats, &l, ConnectivityKind::Fc, &ClassifierConfig::default(), s).unwrap()
        })
        .collect();
    let (acc, _, _) = mean_metrics(&reports);
    assert!((acc - 0.5).abs() <= 0.15, "ACC {acc}");
}

#[test]
fn ranking_svg_is_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = labels(5);
    let co: Vec<_> = labels.iter().map(|_| DVector::from_fn(9, |_, _| rng.gen_range(0.0..1.0))).collect();
    let m = DMatrix::from_fn(9, 9, |i, j| ((i * j) % 4) as f64);
    for k in [0, 3, 9] {
        let ranking = region_ranking(&co, &labels, k).unwrap();
        let svg = ranking_to_svg(&(&m + m.transpose()), &ranking).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let circles: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
        assert_eq!(circles.len(), 9);
        assert_eq!(circles.iter().filter(|c| c.attribute("class") == Some("top")).count(), k);
    }
    assert!(region_ranking(&co, &labels, 10).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let gp = GeneratorParams::init(5, 6, &GeneratorConfig { layers: 2, ..Default::default() }).unwrap();
    let dp = DiscriminatorParams::init(6, &DiscriminatorConfig::default()).unwrap();
    let consensus = Hypergraph::new(6, vec![vec![0, 1, 2], vec![3, 4], vec![5, 0]]).unwrap();
    let ckpt = Checkpoint {
        generator: gp.clone(),
        discriminator: dp.clone(),
        consensus: consensus.clone(),
        zscore_bold: true,
        dhc: DhcConfig { k: 3 },
    };
    let dir = tempfile::tempdir().unwrap();
    let index = save_checkpoint(dir.path(), &ckpt, None).unwrap();
    for path in [dir.path().to_path_buf(), index] {
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.generator, gp);
        assert_eq!(back.discriminator, dp);
        assert_eq!(back.consensus, consensus);
        assert!(back.zscore_bold);
        assert_eq!(back.dhc, DhcConfig { k: 3 });
    }
}
