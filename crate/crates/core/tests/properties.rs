mod common;

use moab::data::{generate, split, GeneratorSpec, InteractionMode, SplitSpec};
use moab::fusion::{outer_maps, Branch, FeatureVector, Modality, DEFAULT_EPSILON_DIV};
use moab::metrics::{macro_f1, micro_f1, per_class_f1, ConfusionMatrix, MetricsReport};
use moab::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;

use common::{outer_oracle, rng, OracleOp};

fn matrix(rows: usize, cols: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(range, rows * cols)
        .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max, 1..=max, 1..=3usize).prop_flat_map(|(n, m, batch)| {
        (matrix(batch, n, -3.0..3.0), matrix(batch, m, -3.0..3.0))
    })
}

/// Every entry of `b` pushed at least 0.1 away from zero.
fn off_zero(t: Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&x| if x.abs() < 0.1 { 0.1f64.copysign(x) } else { x })
        .collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn maps(a: &Tensor, b: &Tensor) -> (Graph, Vec<Var>) {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let fa = FeatureVector::new(&g, av, Modality::Image).unwrap();
    let fb = FeatureVector::new(&g, bv, Modality::Genes).unwrap();
    let out = outer_maps(&mut g, &fa, &fb, &Branch::ALL, DEFAULT_EPSILON_DIV).unwrap();
    let vars = out.iter().map(|m| m.values).collect();
    (g, vars)
}

fn confusion_strategy() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform3(prop::array::uniform3(0u64..40))
        .prop_filter("non-empty", |c| c.iter().flatten().sum::<u64>() > 0)
        .prop_map(ConfusionMatrix::from_counts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 6, -50.0..50.0)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v);
        for row in g.value(s).data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval(x in matrix(3, 7, -30.0..30.0)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.sigmoid(v);
        prop_assert!(g.value(s).data().iter().all(|&y| y > 0.0 && y < 1.0));
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(3, 8, -10.0..10.0)) {
        prop_assume!(x.data().chunks(8).all(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0 > 1e-2
        }));
        let mut g = Graph::new();
        let v = g.constant(x);
        let gamma = g.constant(Tensor::filled(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(v, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_is_deterministic_per_seed(x in matrix(4, 8, -1.0..1.0), seed in any::<u64>()) {
        let run = || {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = g.dropout(v, 0.4, true, &mut rng(seed)).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.4, false, &mut rng(seed)).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn operators_match_double_loop((a, b) in pair(7)) {
        let (g, vars) = maps(&a, &b);
        let (n, m) = (a.shape()[1], b.shape()[1]);
        let ops = [OracleOp::Add, OracleOp::Sub, OracleOp::Mul, OracleOp::Div];
        for (var, op) in vars.iter().zip(ops) {
            let got = g.value(*var).data();
            for s in 0..a.shape()[0] {
                let want = outer_oracle(&a.data()[s * n..(s + 1) * n], &b.data()[s * m..(s + 1) * m], op, DEFAULT_EPSILON_DIV);
                for i in 0..=n {
                    for j in 0..=m {
                        prop_assert_eq!(got[s * (n + 1) * (m + 1) + i * (m + 1) + j], want[i][j]);
                    }
                }
            }
        }
    }

    #[test]
    fn padded_rows_and_columns_recover_inputs((a, b) in pair(6)) {
        let (g, vars) = maps(&a, &b);
        let (n, m) = (a.shape()[1], b.shape()[1]);
        let [add, sub, mul, div] = [0, 1, 2, 3].map(|k| g.value(vars[k]).data().to_vec());
        for s in 0..a.shape()[0] {
            let at = |t: &[f64], i: usize, j: usize| t[s * (n + 1) * (m + 1) + i * (m + 1) + j];
            for j in 1..=m {
                let bj = b.data()[s * m + j - 1];
                prop_assert_eq!(at(&add, 0, j), bj);
                prop_assert_eq!(at(&sub, 0, j), -bj);
                prop_assert_eq!(at(&mul, 0, j), bj);
            }
            for i in 1..=n {
                let ai = a.data()[s * n + i - 1];
                prop_assert_eq!(at(&add, i, 0), ai);
                prop_assert_eq!(at(&sub, i, 0), ai);
                prop_assert_eq!(at(&mul, i, 0), ai);
                prop_assert_eq!(at(&div, i, 0), ai / (1.0 + DEFAULT_EPSILON_DIV));
            }
        }
    }

    #[test]
    fn swapping_modalities_transposes((a, b) in pair(6)) {
        let (g1, ab) = maps(&a, &b);
        let (g2, ba) = maps(&b, &a);
        let (n, m) = (a.shape()[1], b.shape()[1]);
        for s in 0..a.shape()[0] {
            for i in 0..=n {
                for j in 0..=m {
                    let x = |g: &Graph, v: Var| g.value(v).data()[s * (n + 1) * (m + 1) + i * (m + 1) + j];
                    let y = |g: &Graph, v: Var| g.value(v).data()[s * (n + 1) * (m + 1) + j * (n + 1) + i];
                    prop_assert_eq!(x(&g1, ab[0]), y(&g2, ba[0]));
                    prop_assert_eq!(x(&g1, ab[1]), -y(&g2, ba[1]));
                    prop_assert_eq!(x(&g1, ab[2]), y(&g2, ba[2]));
                }
            }
        }
    }

    #[test]
    fn squashed_branches_lie_strictly_inside((a, b) in pair(6)) {
        let b = off_zero(b);
        let (mut g, vars) = maps(&a, &b);
        for v in vars {
            let s = g.sigmoid(v);
            prop_assert!(g.value(s).data().iter().all(|&y| y > 0.0 && y < 1.0));
        }
    }

    #[test]
    fn micro_f1_equals_accuracy(cm in confusion_strategy()) {
        prop_assert_eq!(micro_f1(&cm).unwrap(), cm.accuracy().unwrap());
    }

    #[test]
    fn macro_f1_between_class_extremes(cm in confusion_strategy()) {
        let per: Vec<f64> = (0..3).map(|c| per_class_f1(&cm, c).unwrap()).collect();
        let m = macro_f1(&cm).unwrap();
        let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-15 && m <= hi + 1e-15);
        let r = MetricsReport::from_confusion(&cm).unwrap();
        for v in [r.f1_micro, r.f1_macro, r.f1_grade_iv, r.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling(
        cm in confusion_strategy(),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let mut moved = [[0u64; 3]; 3];
        for t in 0..3 {
            for p in 0..3 {
                moved[perm[t]][perm[p]] = cm.counts[t][p];
            }
        }
        let moved = ConfusionMatrix::from_counts(moved);
        prop_assert_eq!(micro_f1(&cm).unwrap(), micro_f1(&moved).unwrap());
        for c in 0..3 {
            prop_assert_eq!(per_class_f1(&cm, c).unwrap(), per_class_f1(&moved, perm[c]).unwrap());
        }
        prop_assert!((macro_f1(&cm).unwrap() - macro_f1(&moved).unwrap()).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_data_is_well_formed(
        counts in prop::array::uniform3(1usize..25),
        noise in 0.0..0.5f64,
        seed in any::<u64>(),
        group_size in 1usize..4,
        easy in any::<bool>(),
    ) {
        let spec = GeneratorSpec {
            class_counts: counts,
            mode: if easy { InteractionMode::UnimodalEasy } else { InteractionMode::XorCrossModal },
            noise,
            seed,
            group_size,
        };
        let data = generate(&spec).unwrap();
        prop_assert_eq!(data.class_counts(), counts);
        for s in &data.samples {
            prop_assert_eq!(s.genes.len(), 80);
            prop_assert!(s.genes.iter().all(|g| g.is_finite()));
            prop_assert!(s.genes[79] == 0.0 || s.genes[79] == 1.0);
            prop_assert_eq!(s.image.len(), 1024);
            prop_assert!(s.image.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        prop_assert_eq!(generate(&spec).unwrap(), data);
    }

    #[test]
    fn split_keeps_groups_apart(
        seed in any::<u64>(),
        group_size in 1usize..4,
        replicas in 1usize..4,
    ) {
        let data = generate(&GeneratorSpec {
            class_counts: [9, 10, 12],
            group_size,
            seed,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let parts = split(&data, &SplitSpec { replicas, seed, ..SplitSpec::default() }).unwrap();
        let train_groups: std::collections::HashSet<_> =
            parts.train.samples.iter().map(|s| s.group_id.clone()).collect();
        prop_assert!(parts.test.samples.iter().all(|s| !train_groups.contains(&s.group_id)));
        prop_assert_eq!(parts.train.len() + parts.test.len() / replicas, data.len());
    }
}
