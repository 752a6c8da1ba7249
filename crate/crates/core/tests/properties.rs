use compil_core::data::{build_splits, validate_protocol, MetadataRow, SplitPolicy};
use compil_core::losses::{dd_loss, DDConfig};
use compil_core::metrics::{avg_acc, forgetting, harmonic_mean, AccuracyMatrix};
use compil_core::prompts::{gem_fuse, select_topk};
use compil_core::tensor::{forward_eval, Tensor};
use compil_core::Error;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn gem(values: &[f64], eta: f64) -> f64 {
    let sel = Tensor::<f64>::from_f64([values.len(), 1, 1], values).unwrap();
    forward_eval::<_, Error, _>(&[sel, Tensor::scalar(eta)], |_, v| gem_fuse(v[0], v[1]))
        .unwrap()
        .item()
}

fn dd(a: &[f64], b: &[f64], m: usize, n: usize, f: usize, same: bool) -> f64 {
    let ta = Tensor::<f64>::from_f64([m, 1, f], a).unwrap();
    let tb = Tensor::<f64>::from_f64([n, 1, f], b).unwrap();
    forward_eval::<_, Error, _>(&[ta, tb], |_, v| dd_loss(v[0], v[1], &DDConfig::default(), same))
        .unwrap()
        .item()
}

fn matrix_strategy() -> impl Strategy<Value = AccuracyMatrix> {
    (2usize..7).prop_flat_map(|n| {
        proptest::collection::vec(0.0f64..=1.0, n * (n + 1) / 2).prop_map(move |flat| {
            let mut rows = Vec::new();
            let mut it = flat.into_iter();
            for t in 0..n {
                rows.push(it.by_ref().take(t + 1).collect());
            }
            AccuracyMatrix::from_rows(n, rows).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gem_lies_between_min_and_max(values in proptest::collection::vec(0.01f64..5.0, 1..8), eta in 1.0f64..10.0) {
        let g = gem(&values, eta);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(0.0, f64::max);
        prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12), "{g} outside [{lo}, {hi}]");
    }

    #[test]
    fn gem_grows_with_eta(values in proptest::collection::vec(0.01f64..5.0, 2..8), e1 in 1.0f64..10.0, e2 in 1.0f64..10.0) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(gem(&values, lo) <= gem(&values, hi) * (1.0 + 1e-12));
    }

    #[test]
    fn gem_at_one_is_arithmetic_mean(values in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((gem(&values, 1.0) - mean).abs() < 1e-10);
    }

    #[test]
    fn gem_is_odd(values in proptest::collection::vec(0.01f64..5.0, 1..6), eta in 1.0f64..10.0) {
        let neg: Vec<f64> = values.iter().map(|x| -x).collect();
        prop_assert!((gem(&values, eta) + gem(&neg, eta)).abs() < 1e-10);
    }

    #[test]
    fn dd_is_symmetric_and_bounded(a in proptest::collection::vec(-1.0f64..1.0, 9), b in proptest::collection::vec(-1.0f64..1.0, 9)) {
        prop_assume!(a.chunks(3).all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        prop_assume!(b.chunks(3).all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let ab = dd(&a, &b, 3, 3, 3, false);
        let ba = dd(&b, &a, 3, 3, 3, false);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        // 9 pairs of at most pi/2 each, scaled by 2/(3*2)
        prop_assert!(ab <= 9.0 * std::f64::consts::FRAC_PI_2 / 3.0 + 1e-12);
    }

    #[test]
    fn dd_ignores_positive_row_scales(a in proptest::collection::vec(-1.0f64..1.0, 12), s in proptest::collection::vec(0.1f64..10.0, 4)) {
        prop_assume!(a.chunks(3).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4));
        let scaled: Vec<f64> = a.chunks(3).zip(&s).flat_map(|(r, k)| r.iter().map(move |x| x * k)).collect();
        prop_assert!((dd(&a, &a, 4, 4, 3, true) - dd(&scaled, &scaled, 4, 4, 3, true)).abs() < 1e-9);
    }

    #[test]
    fn avg_acc_is_final_row_mean(m in matrix_strategy()) {
        let last = m.rows().last().unwrap();
        let brute = last.iter().sum::<f64>() / last.len() as f64;
        prop_assert!((avg_acc(&m).unwrap() - brute).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&avg_acc(&m).unwrap()));
    }

    #[test]
    fn forgetting_bounded_and_zero_without_drop(m in matrix_strategy()) {
        let f = forgetting(&m).unwrap();
        prop_assert!((-1.0..=1.0).contains(&f));
        let n = m.n_tasks();
        let flat = AccuracyMatrix::from_rows(n, (0..n).map(|t| vec![0.5; t + 1]).collect()).unwrap();
        prop_assert_eq!(forgetting(&flat).unwrap(), 0.0);
    }

    #[test]
    fn harmonic_mean_between_min_and_arithmetic_mean(s in 0.0f64..100.0, o in 0.0f64..100.0) {
        let h = harmonic_mean(s, o).unwrap();
        prop_assert!(h >= s.min(o) - 1e-12 && h <= (s + o) / 2.0 + 1e-12);
        prop_assert!((h - harmonic_mean(o, s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn topk_matches_sorted_oracle(keys in proptest::collection::vec(-1.0f64..1.0, 24), q in proptest::collection::vec(-1.0f64..1.0, 4), k in 1usize..=6) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let t = Tensor::<f64>::from_f64([6, 4], &keys).unwrap();
        let got = select_topk(&t, &q, k).unwrap();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(usize, f64)> = keys
            .chunks(4)
            .enumerate()
            .map(|(i, r)| {
                let kn = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                (i, r.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (qn * kn))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<usize> = scored[..k].iter().map(|s| s.0).collect();
        prop_assert_eq!(got.indices, want);
    }

    #[test]
    fn splits_are_disjoint_and_cover_top_k(
        counts in proptest::collection::vec(2usize..12, 8..20),
        n_tasks in 1usize..5,
        seed in 0u64..1000,
        sorted in any::<bool>(),
    ) {
        let mut rows = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for k in 0..n {
                rows.push(MetadataRow {
                    sample_id: format!("c{c}-{k}"),
                    state: format!("s{}", c % 4),
                    object: format!("o{}", c / 4),
                    pixel_path: None,
                });
            }
        }
        let top_k = counts.len().min(8).max(n_tasks);
        let policy = if sorted { SplitPolicy::CountSorted } else { SplitPolicy::RandomPartition };
        let p = build_splits(&rows, top_k, n_tasks, policy, seed).unwrap();
        validate_protocol(&p.tasks, &p.registry).unwrap();
        let mut seen = BTreeSet::new();
        for t in &p.tasks.tasks {
            for &c in &t.compositions {
                prop_assert!(seen.insert(c));
            }
        }
        prop_assert_eq!(seen.len(), top_k);
        let sizes: Vec<usize> = p.tasks.tasks.iter().map(|t| t.compositions.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for t in &p.tasks.tasks {
            let train: BTreeSet<_> = t.train.iter().collect();
            prop_assert!(t.test.iter().all(|i| !train.contains(i)));
            for &i in t.train.iter().chain(&t.test) {
                prop_assert!(t.compositions.contains(&p.samples[i].composition));
            }
        }
    }
}
