use midus::memory::{
    build_value_cache, cached_aggregate, fused_cartesian_topk, hive_aggregate, lookup_cost, param_count,
    score_subkeys, total_slots, two_stage_topk, HeadSelection, LookupScheme, MemoryConfig, ParamScheme,
    ProductKeyBank, RetrievalResult, ValueBank,
};
use midus::numerics::macs;
use midus::{Rng, Tensor};

fn scores(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[1, v.len()], v).unwrap()
}

fn brute_force(row: &[f64], col: &[f64], k: usize) -> Vec<usize> {
    let n = row.len();
    let mut all: Vec<(usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i * n + j, row[i] + col[j])))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all[..k].iter().map(|p| p.0).collect()
}

#[test]
fn two_stage_picks_best_pair() {
    let sel = two_stage_topk(&scores(&[2., 1.]), &scores(&[3., 0.]), 1).unwrap();
    assert_eq!(sel.indices, vec![0]);
    assert_eq!(sel.weights, vec![1.0]);
    let fused = fused_cartesian_topk(&scores(&[2., 1.]), &scores(&[3., 0.]), 1).unwrap();
    assert_eq!(fused, sel);
}

#[test]
fn equal_scores_fall_back_to_index_order() {
    let sel = two_stage_topk(&scores(&[1.; 4]), &scores(&[1.; 4]), 3).unwrap();
    assert_eq!(sel.indices, vec![0, 1, 2]);
    assert!(sel.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn two_stage_is_exact_at_n16() {
    let mut rng = Rng::new(11);
    for _ in 0..200 {
        let row: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let col: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let sel = two_stage_topk(&scores(&row), &scores(&col), 4).unwrap();
        assert_eq!(sel.indices, brute_force(&row, &col, 4));
    }
}

#[test]
fn fused_with_k_equal_to_all_pairs() {
    let (row, col) = ([0.3, -1.0, 2.0], [1.0, 0.5, -0.2]);
    let sel = fused_cartesian_topk(&scores(&row), &scores(&col), 9).unwrap();
    let mut idx = sel.indices.clone();
    idx.sort_unstable();
    assert_eq!(idx, (0..9).collect::<Vec<_>>());
    let z: f64 = (0..9).map(|p| (row[p / 3] + col[p % 3]).exp()).sum();
    for (&p, &w) in sel.indices.iter().zip(&sel.weights) {
        assert!((w - (row[p / 3] + col[p % 3]).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn fused_matches_two_stage() {
    let mut rng = Rng::new(12);
    for trial in 0..1000 {
        let n = [4, 16, 64][trial % 3];
        let k = [1, 4, n][(trial / 3) % 3];
        let s = 1 + trial % 3;
        let r: Tensor<f64> = rng.normal_tensor(&[s, n], 1.0);
        let c: Tensor<f64> = rng.normal_tensor(&[s, n], 1.0);
        let a = two_stage_topk(&r, &c, k).unwrap();
        let b = fused_cartesian_topk(&r, &c, k).unwrap();
        assert_eq!(a.indices, b.indices, "n={n} k={k}");
    }
}

#[test]
fn selection_rejects_bad_k() {
    assert!(two_stage_topk(&scores(&[1., 2.]), &scores(&[1., 2.]), 3).is_err());
    assert!(fused_cartesian_topk(&scores(&[1., 2.]), &scores(&[1., 2.]), 5).is_err());
    assert!(two_stage_topk(&scores(&[1., 2.]), &scores(&[1., 2., 3.]), 1).is_err());
}

fn random_retrieval(rng: &mut Rng, heads: usize, s: usize, k: usize, slots: usize) -> RetrievalResult<f64> {
    let sel: Vec<HeadSelection<f64>> = (0..heads)
        .map(|_| {
            let indices: Vec<usize> = (0..s * k).map(|_| rng.below(slots)).collect();
            let weights: Vec<f64> = (0..s * k).map(|_| rng.uniform()).collect();
            HeadSelection {
                k,
                scores: weights.clone(),
                indices,
                weights,
            }
        })
        .collect();
    RetrievalResult::from_heads(&sel).unwrap()
}

#[test]
fn cached_path_equals_factorized_path() {
    let mut rng = Rng::new(13);
    let bank = ValueBank::<f64> {
        base: rng.normal_tensor(&[64, 8], 1.0),
        transforms: rng.normal_tensor(&[4, 8, 8], 1.0),
    };
    let cache = build_value_cache(&bank).unwrap();
    for _ in 0..100 {
        let s = 1 + rng.below(6);
        let res = random_retrieval(&mut rng, 4, s, 3, 64);
        let a = hive_aggregate(&res, &bank).unwrap();
        let b = cached_aggregate(&res, &cache).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn headline_parameter_counts() {
    let cfg = MemoryConfig::new(32, 64, 4, 32 * 64).unwrap();
    assert_eq!(param_count(&cfg, ParamScheme::NaiveHeadwise), 8_388_608);
    assert_eq!(param_count(&cfg, ParamScheme::Hive), 393_216);
    assert_eq!(total_slots(&cfg, 8), 1_048_576);
}

#[test]
fn single_head_hive_adds_one_transform() {
    let cfg = MemoryConfig::new(1, 8, 2, 16).unwrap();
    let naive = param_count(&cfg, ParamScheme::NaiveHeadwise);
    let hive = param_count(&cfg, ParamScheme::Hive);
    assert_eq!(hive, naive + 16 * 16);
}

#[test]
fn product_scoring_costs_one_over_n_of_flat() {
    for (n, expected) in [(64usize, 64usize), (16, 16), (1, 1)] {
        let cfg = MemoryConfig::new(2, n, 1, 16).unwrap();
        let flat = lookup_cost(&cfg, LookupScheme::Flat).macs();
        let product = lookup_cost(&cfg, LookupScheme::Product).macs();
        assert_eq!(flat, product * expected, "n = {n}");
    }
}

#[test]
fn lookup_cost_matches_counter_on_one_token() {
    let cfg = MemoryConfig::new(2, 16, 4, 32).unwrap();
    let mut rng = Rng::new(14);
    let bank = ProductKeyBank::<f32>::random(&cfg, &mut rng);
    let q: Tensor<f32> = rng.normal_tensor(&[1, 2 * cfg.sub_dim()], 1.0);
    let (_, counted) = macs::measure(|| score_subkeys(&q, &bank, 1).unwrap());
    assert_eq!(counted as usize, lookup_cost(&cfg, LookupScheme::Product).macs());
}

#[test]
fn memory_config_invariants() {
    assert!(MemoryConfig::new(3, 8, 2, 16).is_err());
    assert!(MemoryConfig::new(4, 8, 2, 12).is_err());
    assert!(MemoryConfig::new(2, 8, 9, 16).is_err());
    assert!(MemoryConfig::new(2, 8, 0, 16).is_err());
    let c = MemoryConfig::new(4, 8, 2, 32).unwrap();
    assert_eq!((c.slots(), c.head_dim(), c.sub_dim()), (64, 8, 4));
}
