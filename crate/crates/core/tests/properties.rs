use jigmil::calibrate::lambda_posterior_mean;
use jigmil::data::{decode_bag, encode_bag};
use jigmil::diff::{segment_softmax, Tensor};
use jigmil::encoder::{gat_layer_forward, init_gat_layers, mlp_encode, MlpParams};
use jigmil::graph::{build_slide_graph, knn_edges, SigmaRule};
use jigmil::jigsaw::{assign_bins, permute_rows};
use jigmil::pooling::{abmil_attention, PoolParams};
use jigmil::rng;
use jigmil::trainer::roc_auc;
use jigmil::{ModelParams, ModelVariant, PatchBag, TrainConfig};
use proptest::prelude::*;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

fn brute_force_edges(points: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let n = points.len();
    let mut edges = Vec::new();
    for j in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&l| l != j).collect();
        others.sort_by(|&a, &b| {
            dist2(points[j], points[a])
                .total_cmp(&dist2(points[j], points[b]))
                .then(a.cmp(&b))
        });
        for &l in others.iter().take(k) {
            edges.push((j.min(l), j.max(l)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn points(max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    // Snapping to a coarse lattice forces distance ties.
    (prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..max), any::<bool>()).prop_map(
        |(pts, snap)| {
            pts.into_iter()
                .map(|(x, y)| if snap { [(x * 8.0).floor() / 8.0, (y * 8.0).floor() / 8.0] } else { [x, y] })
                .collect()
        },
    )
}

fn features(n: usize, d: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng::stream(seed, &[99]);
    Tensor::from_vec(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn bag(centroids: Vec<[f64; 2]>, d: usize, seed: u64) -> PatchBag {
    let n = centroids.len();
    PatchBag {
        slide_id: "s".into(),
        patient_id: "p".into(),
        label: 1,
        centroids,
        features: features(n, d, seed),
    }
}

fn small_config(variant: ModelVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        model_variant: variant,
        k_nn: 6,
        gat_hidden: 12,
        d4: 6,
        grid_g: 4,
        seed,
        ..TrainConfig::default()
    }
}

proptest! {
    #[test]
    fn segment_softmax_sums_to_one(
        entries in prop::collection::vec((-1e3..1e3f64, 0usize..5, 0.0..1.0f64), 1..60)
    ) {
        // The first `count` entries open one segment each with a positive weight.
        let count = entries.len().min(5);
        let logits: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let segments: Vec<usize> =
            entries.iter().enumerate().map(|(i, e)| if i < count { i } else { e.1 % count }).collect();
        let mut weights: Vec<f64> = entries.iter().map(|e| e.2).collect();
        weights[..count].iter_mut().for_each(|w| *w = w.max(0.5));
        let out = segment_softmax(&logits, &segments, &weights, count).unwrap();
        let mut sums = vec![0.0; count];
        for (e, &s) in segments.iter().enumerate() {
            prop_assert!(out[e] >= 0.0);
            sums[s] += out[e];
        }
        for (s, total) in sums.iter().enumerate() {
            prop_assert!((total - 1.0).abs() < 1e-9, "segment {} sums to {}", s, total);
        }
    }

    #[test]
    fn knn_edges_match_brute_force(pts in points(300), k in 1usize..12) {
        prop_assert_eq!(knn_edges(&pts, k).unwrap(), brute_force_edges(&pts, k));
    }

    #[test]
    fn roc_auc_matches_pairwise(
        cases in prop::collection::vec((0u8..6, any::<bool>()), 2..100)
    ) {
        let scores: Vec<f64> = cases.iter().map(|c| f64::from(c.0) / 5.0).collect();
        let labels: Vec<u8> = cases.iter().map(|c| u8::from(c.1)).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        match roc_auc(&scores, &labels) {
            Ok(auc) => {
                prop_assert!(both);
                prop_assert_eq!(auc, pairwise_auc(&scores, &labels));
            }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn gat_attention_sums_to_one_per_node(pts in points(40), k in 1usize..8, seed in 0u64..1000) {
        let b = bag(pts, 5, seed);
        let g = build_slide_graph(&b, k, 4, SigmaRule::Main).unwrap();
        let layers = init_gat_layers(&[5, 7], seed).unwrap();
        let (_, alpha) = gat_layer_forward(&b.features, &g, &layers[0]).unwrap();
        let index = g.message_index();
        let mut sums = vec![0.0; g.n];
        for (e, &t) in index.target.iter().enumerate() {
            sums[t] += alpha[e];
        }
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_and_bin_probabilities_sum_to_one(pts in points(40), seed in 0u64..1000) {
        let b = bag(pts, 5, seed);
        let model = ModelParams::init(&small_config(ModelVariant::GraphAbmilJigsaw, seed), 5).unwrap();
        let g = model.build_graph(&b).unwrap();
        let a = model.predict(&b, &g).unwrap().attention.unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let probs = model.jigsaw_probs(&b, &g).unwrap();
        for r in 0..probs.rows() {
            prop_assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn abmil_attention_is_permutation_equivariant(n in 1usize..30, seed in 0u64..1000) {
        let h = features(n, 6, seed);
        let mut r = rng::stream(seed, &[7]);
        let params = PoolParams::init(6, Some(4), &mut r).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let a = abmil_attention(&h, &params).unwrap();
        let ap = abmil_attention(&permute_rows(&h, &perm), &params).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            prop_assert_eq!(ap[j], a[src]);
        }
    }

    #[test]
    fn mlp_encode_commutes_with_row_permutation(n in 1usize..30, seed in 0u64..1000) {
        let x = features(n, 5, seed);
        let params = MlpParams::init(5, 9, 4, seed).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng::stream(seed, &[8]));
        let direct = permute_rows(&mlp_encode(&x, &params).unwrap(), &perm);
        let permuted = mlp_encode(&permute_rows(&x, &perm), &params).unwrap();
        prop_assert_eq!(direct, permuted);
    }

    #[test]
    fn plain_model_ignores_row_order_and_graph_model_does_not(seed in 0u64..1000) {
        let n = 24;
        let mut r = rng::stream(seed, &[9]);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rand::Rng::random(&mut r), rand::Rng::random(&mut r)]).collect();
        let b = bag(pts, 5, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + (seed as usize % (n - 1)));
        let shuffled = PatchBag { features: permute_rows(&b.features, &perm), ..b.clone() };

        let plain = ModelParams::init(&small_config(ModelVariant::Abmil, seed), 5).unwrap();
        let g = plain.build_graph(&b).unwrap();
        prop_assert_eq!(plain.predict(&b, &g).unwrap().z, plain.predict(&shuffled, &g).unwrap().z);

        let graph = ModelParams::init(&small_config(ModelVariant::GraphAbmil, seed), 5).unwrap();
        let g = graph.build_graph(&b).unwrap();
        let z = graph.predict(&b, &g).unwrap().z;
        let zs = graph.predict(&shuffled, &g).unwrap().z;
        prop_assert!(z.iter().zip(&zs).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn bag_bytes_round_trip(pts in points(50), d in 1usize..9, seed in 0u64..1000) {
        // The format stores 32-bit floats.
        let narrow = |v: f64| f64::from(v as f32);
        let mut b = bag(pts.iter().map(|p| [narrow(p[0]), narrow(p[1])]).collect(), d, seed);
        b.features = b.features.map(narrow);
        let bytes = encode_bag(&b).unwrap();
        let (centroids, feats) = decode_bag(&bytes, Some(d)).unwrap();
        prop_assert_eq!(&centroids, &b.centroids);
        prop_assert_eq!(&feats, &b.features);
        prop_assert_eq!(encode_bag(&PatchBag { centroids, features: feats, ..b }).unwrap(), bytes);
    }

    #[test]
    fn model_bytes_round_trip(variant in 0usize..5, d1 in 1usize..6, seed in 0u64..1000) {
        let config = small_config(ModelVariant::ALL[variant], seed);
        let model = ModelParams::init(&config, d1).unwrap();
        let bytes = model.to_bytes().unwrap();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn lambda_posterior_decreases_and_stays_bounded(
        alpha in 0.1..10.0f64, beta in 0.1..10.0f64, l1 in 0.0..100.0f64, dl in 1e-6..100.0f64
    ) {
        let a = lambda_posterior_mean(alpha, beta, l1).unwrap();
        let b = lambda_posterior_mean(alpha, beta, l1 + dl).unwrap();
        prop_assert!(b < a);
        for v in [a, b] {
            prop_assert!(v > 0.0 && v <= alpha / beta);
        }
    }
}

#[test]
fn lattice_partitions_into_equal_bins() {
    let lattice: Vec<[f64; 2]> = (0..100)
        .flat_map(|y| (0..100).map(move |x| [(x as f64 + 0.5) / 100.0, (y as f64 + 0.5) / 100.0]))
        .collect();
    let bins = assign_bins(&lattice, 10).unwrap();
    let mut counts = [0usize; 100];
    bins.iter().for_each(|&b| counts[b] += 1);
    assert!(counts.iter().all(|&c| c == 100));
}
