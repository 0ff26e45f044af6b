use proptest::prelude::*;

use cthmm_dp::ctmc::{transition_matrix, GeneratorMatrix};
use cthmm_dp::diagnostics::{align_and_misclassify, effective_sample_size};
use cthmm_dp::outcome::{subject_marginal_loglik, CellStats, Family, ModelSpec, OutcomeSuffStats, PriorSpec};
use cthmm_dp::sampler::Scorer;

fn generator(k: usize) -> impl Strategy<Value = GeneratorMatrix> {
    prop::collection::vec(0.0..4.0f64, k * k)
        .prop_map(move |r| GeneratorMatrix::from_off_diagonal(k, |l, m| r[l * k + m]).unwrap())
}

fn subject_stats(k: usize) -> impl Strategy<Value = OutcomeSuffStats> {
    (
        prop::collection::vec(prop::collection::vec(0u8..12, 0..4), k),
        0..k,
        prop::collection::vec(0u8..4, k * k),
        prop::collection::vec(0.0..3.0f64, k),
    )
        .prop_map(move |(outcomes, first, jumps, holding)| {
            let mut s = OutcomeSuffStats::zeros(k, 1);
            s.cells = outcomes
                .iter()
                .map(|os| {
                    let v: Vec<f64> = os.iter().map(|&o| o as f64).collect();
                    CellStats {
                        count: v.len() as f64,
                        sum: v.iter().sum(),
                        sum_sq: v.iter().map(|x| x * x).sum(),
                        log_fact: v.iter().map(|&x| statrs::function::gamma::ln_gamma(x + 1.0)).sum(),
                    }
                })
                .collect();
            s.first_visit[first] = 1.0;
            for l in 0..k {
                s.holding[l] = holding[l];
                for m in 0..k {
                    if l != m {
                        s.jumps[l * k + m] = jumps[l * k + m] as f64;
                    }
                }
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chapman_kolmogorov(q in (2usize..6).prop_flat_map(generator), s in 0.0..3.0f64, t in 0.0..3.0f64) {
        let lhs = transition_matrix(&q, s + t).unwrap();
        let rhs = transition_matrix(&q, s).unwrap().matrix() * transition_matrix(&q, t).unwrap().matrix();
        prop_assert!((lhs.matrix() - rhs).amax() < 1e-10);
        for i in 0..q.dim() {
            prop_assert!((lhs.row(i).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn suffstats_add_then_subtract_is_identity(
        a in subject_stats(3),
        b in subject_stats(3),
    ) {
        let mut sum = a.clone();
        sum += &b;
        let mut other = b.clone();
        other += &a;
        prop_assert_eq!(&sum, &other);
        sum -= &b;
        for (x, y) in sum.cells.iter().zip(&a.cells) {
            prop_assert!((x.sum - y.sum).abs() < 1e-12 && (x.count - y.count).abs() < 1e-12);
        }
        for (x, y) in sum.holding.iter().zip(&a.holding) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    /// The joint evidence of a cluster does not depend on the order in which
    /// members are added.
    #[test]
    fn prefix_product_is_exchangeable(
        members in prop::collection::vec(subject_stats(3), 1..7),
        q_only in any::<bool>(),
    ) {
        let spec = ModelSpec::new(Family::Poisson, 3, 1, PriorSpec::default_for(Family::Poisson, 3)).unwrap();
        let scorer = Scorer::new(&spec, q_only);
        let forward = scorer.prefix_product(members.iter()).unwrap();
        let reversed = scorer.prefix_product(members.iter().rev()).unwrap();
        prop_assert!((forward - reversed).abs() < 1e-9 * forward.abs().max(1.0));
    }

    #[test]
    fn predictive_of_subject_is_a_valid_log_probability(
        others in subject_stats(2),
        subject in subject_stats(2),
    ) {
        let spec = ModelSpec::new(Family::Poisson, 2, 1, PriorSpec::default_for(Family::Poisson, 2)).unwrap();
        let v = subject_marginal_loglik(&others, &subject, &spec).unwrap();
        prop_assert!(v.is_finite());
    }

    #[test]
    fn misclassification_ignores_label_names(
        pairs in prop::collection::vec((0usize..4, 0usize..3), 1..60),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let est: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let base = align_and_misclassify(&est, &truth).unwrap();
        let renamed: Vec<usize> = est.iter().map(|&l| perm[l]).collect();
        prop_assert_eq!(align_and_misclassify(&renamed, &truth).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn ess_is_affine_invariant(
        xs in prop::collection::vec(-5.0..5.0f64, 20..200),
        scale in prop_oneof![0.01..100.0f64, -100.0..-0.01f64],
        shift in -50.0..50.0f64,
    ) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let base = effective_sample_size(&xs).unwrap();
        let moved: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        let e = effective_sample_size(&moved).unwrap();
        prop_assert!((e - base).abs() < 1e-6 * base);
        prop_assert!(e > 0.0 && e <= xs.len() as f64);
    }
}
