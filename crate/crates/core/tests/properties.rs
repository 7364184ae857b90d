use hggan::adversary::{discriminator_loss, DiscriminatorConfig, DiscriminatorParams, FakeEndpoints, SubjectBatch};
use hggan::dataio::Group;
use hggan::eval::{region_ranking, Confusion};
use hggan::walk::EndpointDistribution;
use nalgebra::DVector;
use proptest::prelude::*;

fn distribution(start: usize, weights: &[f64]) -> EndpointDistribution {
    let total: f64 = weights.iter().sum();
    EndpointDistribution {
        start,
        probs: weights.iter().map(|w| w / total).collect(),
    }
}

fn batch_strategy(n: usize) -> impl Strategy<Value = Vec<SubjectBatch>> {
    let subject = (
        proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, n), n),
        proptest::collection::vec(proptest::collection::vec(0..n, 1..6), n),
    )
        .prop_map(move |(real, fake)| SubjectBatch {
            real: real.iter().enumerate().map(|(s, w)| distribution(s, w)).collect(),
            fake: fake
                .into_iter()
                .enumerate()
                .map(|(start, endpoints)| FakeEndpoints { start, endpoints })
                .collect(),
        });
    proptest::collection::vec(subject, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_ignores_subject_and_start_order(batch in batch_strategy(4), seed in 0u64..1000, rot in 0usize..4) {
        let dp = DiscriminatorParams::init(4, &DiscriminatorConfig { seed, ..Default::default() }).unwrap();
        let base = discriminator_loss(&dp, &batch).unwrap();
        let mut shuffled = batch.clone();
        shuffled.reverse();
        for s in &mut shuffled {
            s.real.rotate_left(rot);
            s.fake.rotate_left(rot);
        }
        let other = discriminator_loss(&dp, &shuffled).unwrap();
        prop_assert!((base - other).abs() <= 1e-12 * base.abs().max(1.0));
        prop_assert!(base <= 0.0);
    }

    #[test]
    fn ranking_follows_node_relabelling(
        values in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 8),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        k in 0usize..=6,
    ) {
        let labels: Vec<Group> = (0..8).map(|i| if i % 2 == 0 { Group::A } else { Group::B }).collect();
        let co: Vec<DVector<f64>> = values.iter().map(|v| DVector::from_vec(v.clone())).collect();
        let moved: Vec<DVector<f64>> = co.iter().map(|c| DVector::from_fn(6, |i, _| c[perm[i]])).collect();
        let a = region_ranking(&co, &labels, 6).unwrap();
        let b = region_ranking(&moved, &labels, 6).unwrap();
        for i in 0..6 {
            prop_assert_eq!(b.diff[i], a.diff[perm[i]]);
        }
        // the sorted score sequence is invariant, ties aside
        let sorted_a: Vec<f64> = a.top_k.iter().map(|&i| a.diff[i]).collect();
        let sorted_b: Vec<f64> = b.top_k.iter().map(|&i| b.diff[i]).collect();
        prop_assert_eq!(sorted_a, sorted_b);
        let short = region_ranking(&co, &labels, k).unwrap();
        prop_assert_eq!(&short.top_k[..], &a.top_k[..k]);
    }

    #[test]
    fn accuracy_is_weighted_mean_of_sensitivity_and_specificity(
        pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60),
    ) {
        let truth: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let c = Confusion::from_predictions(&truth, &pred);
        prop_assert_eq!(c.tp + c.tn + c.fp + c.fn_, pairs.len());
        let pos = truth.iter().filter(|&&t| t).count() as f64;
        let neg = pairs.len() as f64 - pos;
        let weighted = (pos * c.sensitivity() + neg * c.specificity()) / pairs.len() as f64;
        prop_assert!((c.accuracy() - weighted).abs() < 1e-12);
    }
}
