use aros_core::adgraph::{Activation, Layer, MlpParams, Tape, Var};
use aros_core::config::RunConfig;
use aros_core::lyapcheck::{diag_dominance, gershgorin_bound, max_real_part_bound};
use aros_core::oodforge::{
    build_embedding_set, fit_class_gaussians, sample_fake_ood, verify_fakes, BetaScale, Ridge, SamplerConfig,
};
use aros_core::redteam::{aupr, auroc, fpr95, pgd_on_score, AttackConfig, AttackNorm, Scorer, ScorerKind};
use aros_core::seed::derive_seed;
use aros_core::stabnet::{orthogonality_defect, orthonormalize_values, NodeDynamics};
use aros_core::{Result, Tensor};
use proptest::prelude::*;

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    // A coarse grid makes ties common.
    proptest::collection::vec((0i32..40).prop_map(|v| v as f64 / 8.0), 1..max_len)
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &o in ood {
        for &i in id {
            s += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (id.len() * ood.len()) as f64
}

fn brute_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    id.iter()
        .chain(ood)
        .filter_map(|&t| {
            let tpr = ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64;
            let fpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
            (tpr >= 0.95).then_some(fpr)
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pair_count(id in scores(60), ood in scores(60)) {
        prop_assert!((auroc(&id, &ood).unwrap() - brute_auroc(&id, &ood)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_is_complementary_under_swap(id in scores(60), ood in scores(60)) {
        let sum = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_are_invariant_under_increasing_maps(id in scores(60), ood in scores(60)) {
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
        let (fi, fo) = (f(&id), f(&ood));
        prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&fi, &fo).unwrap());
        prop_assert_eq!(aupr(&id, &ood).unwrap(), aupr(&fi, &fo).unwrap());
        prop_assert_eq!(fpr95(&id, &ood).unwrap(), fpr95(&fi, &fo).unwrap());
    }

    #[test]
    fn fpr95_is_the_best_admissible_threshold(id in scores(60), ood in scores(60)) {
        prop_assert_eq!(fpr95(&id, &ood).unwrap(), brute_fpr95(&id, &ood));
    }

    #[test]
    fn metrics_stay_in_unit_interval(id in scores(60), ood in scores(60)) {
        for m in [auroc(&id, &ood).unwrap(), aupr(&id, &ood).unwrap(), fpr95(&id, &ood).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_schmidt_columns_are_orthonormal(data in proptest::collection::vec(-3.0f64..3.0, 16)) {
        let v = Tensor::matrix(8, 2, data).unwrap();
        // Skip nearly parallel draws, which the head rejects as degenerate.
        if let Ok(w) = orthonormalize_values(&v) {
            prop_assert!(orthogonality_defect(&w).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn strict_dominance_certifies_a_negative_spectrum(
        data in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let a = Tensor::matrix(2, 2, data.clone()).unwrap();
        let (p, q, r, s) = (data[0], data[1], data[2], data[3]);
        // Largest real part of the eigenvalues of [[p, q], [r, s]].
        let tr = p + s;
        let disc = (p - s) * (p - s) + 4.0 * q * r;
        let re = if disc >= 0.0 { 0.5 * (tr + disc.sqrt()) } else { 0.5 * tr };
        prop_assert!(re <= gershgorin_bound(&a).unwrap() + 1e-12);
        prop_assert!(re <= max_real_part_bound(&a).unwrap() + 1e-9);
        let v = diag_dominance(&a, true).unwrap();
        if v.pass && v.negative_diagonal {
            prop_assert!(gershgorin_bound(&a).unwrap() < 0.0);
            prop_assert!(re < 0.0);
        }
    }

    #[test]
    fn class_fit_matches_two_pass_moments(
        data in proptest::collection::vec(-5.0f64..5.0, 3 * 12),
        labels in proptest::collection::vec(0usize..2, 12),
    ) {
        // d + 1 points per class keep the unridged covariance positive definite.
        prop_assume!(labels.iter().filter(|&&y| y == 0).count() >= 4);
        prop_assume!(labels.iter().filter(|&&y| y == 1).count() >= 4);
        let z = Tensor::matrix(12, 3, data).unwrap();
        let g = fit_class_gaussians(&z, &labels, 2, Ridge::Absolute(0.0)).unwrap();
        for j in 0..2 {
            let rows: Vec<&[f64]> = (0..12).filter(|&i| labels[i] == j).map(|i| z.row(i)).collect();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..3).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
            for a in 0..3 {
                prop_assert!((g.means[j][a] - mean[a]).abs() <= 1e-10);
                for b in 0..3 {
                    let c = rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0);
                    prop_assert!((g.covariances[j].at(a, b) - c).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn fakes_always_reverify(seed in any::<u64>(), log_beta in -8.0f64..-1.0, typical in any::<bool>()) {
        let z = Tensor::matrix(
            40,
            3,
            (0..120).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0 + (i % 3) as f64).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let g = fit_class_gaussians(&z, &labels, 2, Ridge::default()).unwrap();
        let cfg = SamplerConfig {
            beta: log_beta.exp(),
            beta_scale: if typical { BetaScale::TypicalRelative } else { BetaScale::Absolute },
            max_tries_factor: 100_000,
        };
        if let Ok(f) = sample_fake_ood(&g, &cfg, 10, seed) {
            prop_assert_eq!(f.classes.len(), 20);
            prop_assert_eq!(verify_fakes(&g, &cfg, &f).unwrap(), 0);
            prop_assert!(f.acceptance_rate > 0.0 && f.acceptance_rate <= 1.0);
        }
    }

    #[test]
    fn embedding_sets_are_balanced(n in 2usize..30, seed in any::<u64>()) {
        let id = Tensor::zeros(&[n, 4]);
        let fake = Tensor::from_rows(&vec![&[1.0, 1.0, 1.0, 1.0][..]; n]);
        let set = build_embedding_set(&id, &fake, 2, seed).unwrap();
        prop_assert_eq!(set.label_counts(), (n, n));
        for i in 0..set.len() {
            prop_assert_eq!(set.embeddings.row(i)[0] == 1.0, set.labels[i] == 1);
        }
    }

    #[test]
    fn seeds_are_deterministic_and_label_separated(master in any::<u64>(), counter in 0u64..1000) {
        prop_assert_eq!(derive_seed(master, "a", counter), derive_seed(master, "a", counter));
        prop_assert_ne!(derive_seed(master, "a", counter), derive_seed(master, "b", counter));
        prop_assert_ne!(derive_seed(master, "a", counter), derive_seed(master, "a", counter + 1));
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), eps in 0.0f64..1.0, steps in 1usize..500) {
        let mut cfg = RunConfig::default();
        cfg.master_seed = seed;
        cfg.attack.epsilon = eps;
        cfg.attack.steps = steps;
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

fn linear_decay(dim: usize, rate: f64, horizon: f64, steps: usize) -> NodeDynamics {
    let mut w = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        w.data_mut()[i * dim + i] = -rate;
    }
    let layer = Layer {
        weight: w,
        bias: Tensor::zeros(&[dim]),
    };
    NodeDynamics {
        net: MlpParams::from_layers("decay", vec![layer], Activation::Identity, false).unwrap(),
        horizon,
        steps,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rk4_error_shrinks_at_fourth_order(rate in 0.2f64..2.0, z0 in 0.5f64..2.0) {
        let exact = z0 * (-rate).exp();
        let err = |steps| {
            let d = linear_decay(1, rate, 1.0, steps);
            let out = d.integrate_values(&Tensor::matrix(1, 1, vec![z0]).unwrap(), false).unwrap();
            (out.last().unwrap().data()[0] - exact).abs()
        };
        for s in [2usize, 4, 8] {
            let ratio = err(s) / err(2 * s);
            prop_assert!((8.0..=32.0).contains(&ratio), "steps {s}: ratio {ratio}");
        }
    }
}

/// `‖x‖²`, a smooth score whose worst case in a box is known.
struct SquaredNorm;

impl Scorer for SquaredNorm {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Md
    }

    fn score_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let sq = tape.mul(x, x)?;
        tape.sum_last(sq)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_stay_in_the_ball_and_only_hurt(
        data in proptest::collection::vec(-2.0f64..2.0, 2 * 8),
        eps in 0.01f64..0.5,
        l2 in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let x = Tensor::matrix(8, 2, data).unwrap();
        let is_id: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let cfg = AttackConfig {
            epsilon: eps,
            steps: 10,
            restarts: 2,
            norm: if l2 { AttackNorm::L2 } else { AttackNorm::Linf },
            ..AttackConfig::default()
        };
        let out = pgd_on_score(&SquaredNorm, &x, &is_id, &cfg, seed).unwrap();
        let clean = SquaredNorm.scores(&x).unwrap();
        for i in 0..8 {
            let delta: Vec<f64> = out.x_adv.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
            let size = if l2 {
                delta.iter().map(|d| d * d).sum::<f64>().sqrt()
            } else {
                delta.iter().fold(0.0f64, |m, d| m.max(d.abs()))
            };
            prop_assert!(size <= eps * (1.0 + 1e-12) + 1e-12);
            // ID inputs are pushed up, OOD inputs down.
            if is_id[i] {
                prop_assert!(out.scores[i] >= clean[i]);
            } else {
                prop_assert!(out.scores[i] <= clean[i]);
            }
        }
    }
}
