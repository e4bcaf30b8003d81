use latentprobe::checkpoint::{from_bytes, to_bytes};
use latentprobe::dims::classify_dimensions;
use latentprobe::embed::{parse_vectors, EmbeddingTable};
use latentprobe::eval::{
    analogy_accuracy, semantic_similarity_score, AnalogyQuestion, AnalogySection, AnalogySet,
    SimilarityPair, SimilarityPairset,
};
use latentprobe::math::{absolute_angle, histogram_entropy, spearman_rho, DEFAULT_BIN_WIDTH};
use latentprobe::model::{gaussian_kl, ModelCheckpoint, ModelKind, TrainConfig};
use latentprobe::nn::DenseNet;
use latentprobe::probe::AngleHistogram;
use latentprobe_oracles::net_finite_difference_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative(mu in -5.0f64..5.0, lv in -6.0f64..4.0) {
        let kl = gaussian_kl(mu, lv);
        prop_assert!(kl >= 0.0);
        if mu != 0.0 || lv != 0.0 {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn entropy_bounds_and_invariances(values in prop::collection::vec(-3.0f64..3.0, 1..200), shift in -20i32..20, rot in 0usize..200) {
        let h = histogram_entropy(&values, DEFAULT_BIN_WIDTH);
        prop_assert!(h >= 0.0 && h <= (values.len() as f64).ln() + 1e-12);
        let mut rotated = values.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        prop_assert_eq!(h, histogram_entropy(&rotated, DEFAULT_BIN_WIDTH));
        // shift by an exact multiple of the bin width on a dyadic lattice
        let quarter: Vec<f64> = values.iter().map(|v| (v * 64.0).round() / 64.0).collect();
        let moved: Vec<f64> = quarter.iter().map(|v| v + shift as f64 * 0.25).collect();
        prop_assert!((histogram_entropy(&quarter, 0.25) - histogram_entropy(&moved, 0.25)).abs() < 1e-12);
    }

    #[test]
    fn spearman_self_and_mirror(a in prop::collection::hash_set(-1000i32..1000, 3..50)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((spearman_rho(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((spearman_rho(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_symmetries(u in small_vec(5), v in small_vec(5)) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let a = absolute_angle(&u, &v).unwrap();
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        prop_assert!((0.0..=90.0).contains(&a));
        prop_assert!((a - absolute_angle(&v, &u).unwrap()).abs() < 1e-9);
        prop_assert!((a - absolute_angle(&neg, &v).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn classification_is_an_upper_set(entropies in prop::collection::vec(0.0f64..6.0, 1..40), rot in 0usize..40) {
        let useful = classify_dimensions(&entropies, 0.5);
        prop_assert_eq!(useful.len(), entropies.len());
        prop_assert!(useful.iter().any(|u| *u));
        let min_useful = entropies.iter().zip(&useful).filter(|(_, u)| **u).map(|(e, _)| *e).fold(f64::INFINITY, f64::min);
        let max_dep = entropies.iter().zip(&useful).filter(|(_, u)| !**u).map(|(e, _)| *e).fold(f64::NEG_INFINITY, f64::max);
        if max_dep.is_finite() {
            prop_assert!(min_useful - max_dep >= 0.5);
        }
        let mut order: Vec<usize> = (0..entropies.len()).collect();
        let len = order.len();
        order.rotate_left(rot % len);
        let permuted: Vec<f64> = order.iter().map(|&i| entropies[i]).collect();
        let again = classify_dimensions(&permuted, 0.5);
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(again[pos], useful[i]);
        }
    }

    #[test]
    fn histogram_integrates_to_one(levels in prop::collection::vec(0.0f64..=90.0, 1..100)) {
        let h = AngleHistogram::from_levels(levels.iter().copied());
        let area: f64 = h.density.iter().map(|d| d * h.bin_width).sum();
        prop_assert!((area - 1.0).abs() < 1e-12);
        prop_assert_eq!(h.counts.iter().sum::<usize>(), levels.len());
    }

    #[test]
    fn vector_text_round_trip(rows in prop::collection::vec(small_vec(3), 1..20)) {
        let words: Vec<String> = (0..rows.len()).map(|i| format!("tok{i}")).collect();
        let table = EmbeddingTable::new(words, rows.concat(), 3).unwrap();
        let mut text = Vec::new();
        table.write_vectors(&mut text).unwrap();
        let back = parse_vectors(&text[..], None).unwrap();
        let mut again = Vec::new();
        back.write_vectors(&mut again).unwrap();
        prop_assert_eq!(&text, &again);
        for r in 0..table.len() {
            for (a, b) in table.row(r).iter().zip(back.row(r)) {
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn knn_distances_sorted_and_bounded(rows in prop::collection::vec(small_vec(4), 2..30), q in small_vec(4), k in 1usize..30) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let words: Vec<String> = (0..rows.len()).map(|i| format!("t{i}")).collect();
        let table = EmbeddingTable::new(words, rows.concat(), 4).unwrap();
        let k = k.min(table.len());
        let nbs = table.nearest_neighbors(&q, k, &[]).unwrap();
        prop_assert_eq!(nbs.len(), k);
        for w in nbs.windows(2) {
            prop_assert!(w[0].distance <= w[1].distance);
        }
        for nb in &nbs {
            prop_assert!((0.0..=2.0).contains(&nb.distance));
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, n in 1usize..6, m in 1usize..5, h in 0usize..6, ae in any::<bool>()) {
        let config = TrainConfig {
            model_kind: if ae { ModelKind::Ae } else { ModelKind::Bvae },
            input_dim: n,
            latent_dim: m,
            hidden: if h == 0 { vec![] } else { vec![h] },
            seed,
            ..TrainConfig::default()
        };
        let model = ModelCheckpoint::initialize(config).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
        prop_assert_eq!(back.config, model.config);
    }

    #[test]
    fn similarity_ignores_scale_and_pair_order(seed in 0u64..500, scale in 0.01f64..100.0, rot in 0usize..20) {
        let (table, pairs, _) = random_eval_case(seed);
        let scaled = scale_table(&table, scale);
        let mut shuffled = pairs.clone();
        let len = shuffled.pairs.len();
        shuffled.pairs.rotate_left(rot % len);
        let base = semantic_similarity_score(&table, &pairs).unwrap().rho;
        prop_assert!((base - semantic_similarity_score(&scaled, &pairs).unwrap().rho).abs() < 1e-9);
        prop_assert!((base - semantic_similarity_score(&table, &shuffled).unwrap().rho).abs() < 1e-9);
    }

    #[test]
    fn analogy_ignores_scale_and_rotation(seed in 0u64..500, scale in 0.01f64..100.0) {
        let (table, _, questions) = random_eval_case(seed);
        let base = analogy_accuracy(&table, &questions, None);
        let scaled = analogy_accuracy(&scale_table(&table, scale), &questions, None);
        let turned = analogy_accuracy(&reflect_table(&table, seed), &questions, None);
        prop_assert_eq!(base.correct, scaled.correct);
        prop_assert_eq!(base.correct, turned.correct);
        prop_assert_eq!(base.answered, turned.answered);
    }
}

fn random_eval_case(seed: u64) -> (EmbeddingTable, SimilarityPairset, AnalogySet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, dim) = (30, 6);
    let words: Vec<String> = (0..rows).map(|i| format!("x{i}")).collect();
    let vectors: Vec<f64> = (0..rows * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let table = EmbeddingTable::new(words.clone(), vectors, dim).unwrap();
    let pairs = (0..15)
        .map(|_| {
            let a = rng.random_range(0..rows);
            let b = (a + rng.random_range(1..rows)) % rows;
            SimilarityPair {
                word_a: words[a].clone(),
                word_b: words[b].clone(),
                gold: rng.random_range(0.0..4.0),
            }
        })
        .collect();
    let questions = (0..20)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng| words[rng.random_range(0..rows)].clone();
            AnalogyQuestion {
                a: pick(&mut rng),
                b: pick(&mut rng),
                c: pick(&mut rng),
                d: pick(&mut rng),
            }
        })
        .collect();
    let set = AnalogySet {
        sections: vec![AnalogySection {
            name: "random".into(),
            questions,
        }],
    };
    (table, SimilarityPairset { pairs }, set)
}

fn scale_table(table: &EmbeddingTable, scale: f64) -> EmbeddingTable {
    let vectors = table
        .rows()
        .flat_map(|r| r.iter().map(move |v| v * scale))
        .collect();
    EmbeddingTable::new(table.words().to_vec(), vectors, table.dim()).unwrap()
}

/// Applies the Householder reflection `I - 2 v v^T / |v|^2`.
fn reflect_table(table: &EmbeddingTable, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let v: Vec<f64> = (0..table.dim())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let vectors = table
        .rows()
        .flat_map(|r| {
            let proj: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() * 2.0 / vv;
            r.iter()
                .zip(&v)
                .map(|(a, b)| a - proj * b)
                .collect::<Vec<_>>()
        })
        .collect();
    EmbeddingTable::new(table.words().to_vec(), vectors, table.dim()).unwrap()
}

#[test]
fn bare_network_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut skipped = 0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=8)).collect();
        let net = DenseNet::mlp(&widths, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0])
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let g: Vec<f64> = (0..widths[depth])
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &g).unwrap();
        let analytic: Vec<f64> = grads.values().collect();
        let report = net_finite_difference_check(&net, &x, &g, &analytic, 1e-5, 1e-5);
        assert!(report.max_rel_error < 1e-4, "{widths:?}: {report:?}");
        skipped += report.skipped;
    }
    assert!(skipped < 50);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = DenseNet::mlp(&[5, 7, 3], &mut rng).unwrap();
    let x = [0.1, -0.2, 0.3, 0.7, -1.1];
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn zero_beta_leaves_reconstruction_only() {
    let config = TrainConfig {
        model_kind: ModelKind::Bvae,
        input_dim: 4,
        latent_dim: 3,
        hidden: vec![5],
        beta: 0.0,
        seed: 2,
        ..TrainConfig::default()
    };
    let model = ModelCheckpoint::initialize(config).unwrap();
    let batch = vec![vec![0.3, -1.0, 0.2, 0.8], vec![1.5, 0.0, -0.4, 0.1]];
    let noise = vec![vec![0.0; 3]; 2];
    let loss = model.loss(&batch, 0.0, &noise).unwrap();
    assert_eq!(loss.total, loss.reconstruction);
    // with the noise switched off the sample is the mean
    let expected: f64 = batch
        .iter()
        .map(|x| {
            let mu = model.encode(x).unwrap().mean;
            let x_hat = model.decode(&mu).unwrap();
            x.iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    assert!((loss.reconstruction - expected).abs() < 1e-12);
}
