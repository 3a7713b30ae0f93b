use midus::layers::{LayerKind, MemoryLayerKind};
use midus::memory::MemoryConfig;
use midus::params::ParamTree;
use midus::train::gradcheck::{run_gradcheck, GradcheckConfig};
use midus::train::{
    dedup_scatter_backward, head_importance, train, weight_grad_backward, Corpus, RecallCorpus, RecallSpec, Sequence,
    TrainConfig,
};
use midus::transformer::{cross_entropy, ForwardOptions, HeadScale, Model, ModelDims};
use midus::upscale::{build_midus, UpscalePlan};
use midus::{Rng, Tensor};

fn naive_scatter(g: &Tensor<f64>, idx: &[usize], w: &[f64], rows: usize) -> Tensor<f64> {
    let k = idx.len() / g.rows();
    let mut out = Tensor::zeros(&[rows, g.cols()]);
    for (pos, (&v, &wv)) in idx.iter().zip(w).enumerate() {
        for (o, &x) in out.row_mut(v).iter_mut().zip(g.row(pos / k)) {
            *o += wv * x;
        }
    }
    out
}

#[test]
fn scatter_of_zero_weights_is_zero() {
    let g = Tensor::<f64>::ones(&[4, 3]);
    let (t, _) = dedup_scatter_backward(&g, &[1, 2, 3, 1, 0, 0, 2, 2], &[0.0; 8], 5).unwrap();
    assert_eq!(t.max_abs(), 0.0);
}

#[test]
fn two_hits_on_one_slot_add_up() {
    let g = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., -4., 0.5, 6.]).unwrap();
    let (t, stats) = dedup_scatter_backward(&g, &[7, 7], &[1.0, 1.0], 10).unwrap();
    for v in 0..10 {
        let want: &[f64] = if v == 7 { &[-3., 2.5, 9.] } else { &[0., 0., 0.] };
        assert_eq!(t.row(v), want);
    }
    assert_eq!((stats.contributions, stats.unique, stats.global_writes), (2, 1, 1));
}

#[test]
fn dedup_scatter_matches_naive_bitwise() {
    let mut rng = Rng::new(1);
    for _ in 0..1000 {
        let (b, k, d, rows) = (1 + rng.below(8), 1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(12));
        let g: Tensor<f64> = rng.normal_tensor(&[b, d], 1.0);
        let idx: Vec<usize> = (0..b * k).map(|_| rng.below(rows)).collect();
        let w: Vec<f64> = (0..b * k).map(|_| rng.normal()).collect();
        let (t, stats) = dedup_scatter_backward(&g, &idx, &w, rows).unwrap();
        assert_eq!(t, naive_scatter(&g, &idx, &w, rows));
        let mut uniq = idx.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert!(stats.global_writes <= uniq.len());
    }
}

#[test]
fn scatter_rejects_out_of_range_index() {
    let g = Tensor::<f64>::ones(&[1, 2]);
    assert!(dedup_scatter_backward(&g, &[3], &[1.0], 3).is_err());
}

#[test]
fn weight_gradient_cases() {
    let table = Tensor::<f64>::from_f64(&[3, 2], &[0., 1., 3., 4., 2., -1.]).unwrap();
    let g = Tensor::<f64>::from_f64(&[1, 2], &[1., 0.]).unwrap();
    assert_eq!(weight_grad_backward(&g, &[0], &table).unwrap(), vec![0.0]);
    let g = Tensor::<f64>::from_f64(&[1, 2], &[3., 4.]).unwrap();
    assert_eq!(weight_grad_backward(&g, &[1], &table).unwrap(), vec![25.0]);

    let mut rng = Rng::new(2);
    let table: Tensor<f64> = rng.normal_tensor(&[9, 4], 1.0);
    let g: Tensor<f64> = rng.normal_tensor(&[5, 4], 1.0);
    let idx: Vec<usize> = (0..15).map(|_| rng.below(9)).collect();
    let got = weight_grad_backward(&g, &idx, &table).unwrap();
    for (pos, &v) in idx.iter().enumerate() {
        let want: f64 = (0..4).map(|j| g.row(pos / 3)[j] * table.row(v)[j]).sum();
        assert!((got[pos] - want).abs() < 1e-14);
    }
}

#[test]
fn every_backward_matches_finite_differences() {
    let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
    assert!(report.cases.len() >= 5);
    for case in &report.cases {
        assert!(case.checked >= 64 || case.name == "model", "{}: {}", case.name, case.checked);
        assert!(case.max_rel_err < 1e-5, "{}: {:e}", case.name, case.max_rel_err);
    }
}

#[test]
fn deliberate_corruption_is_caught() {
    let cfg = GradcheckConfig {
        corrupt: Some("memory_hml".into()),
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg).unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures().len(), 1);
    assert_eq!(report.failures()[0].name, "memory_hml");
}

fn dims(vocab: usize) -> ModelDims {
    ModelDims {
        vocab,
        d: 16,
        heads: 4,
        d_ff: 32,
    }
}

fn recall() -> RecallCorpus {
    RecallCorpus::new(RecallSpec {
        keys: 8,
        values: 8,
        seed: 3,
    })
    .unwrap()
}

fn small_train(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        seq_len: 12,
        seed,
        ..TrainConfig::default()
    }
}

fn midus_model(seed: u64) -> Model<f64> {
    let base = Model::base(dims(16), 2, &mut Rng::new(seed)).unwrap();
    let memory = MemoryConfig::new(4, 4, 2, 16).unwrap();
    let plan = UpscalePlan::midus(MemoryLayerKind::new(LayerKind::Hml), memory, 2);
    build_midus(&base, &plan, &mut Rng::new(seed + 1)).unwrap().0
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let mut m = midus_model(4);
    let before = m.clone();
    let report = train(&mut m, &recall(), &small_train(0, 1)).unwrap();
    assert!(report.records.is_empty());
    assert_eq!(m, before);
}

#[test]
fn cpt_freezes_the_base() {
    let mut m = midus_model(5);
    let before = m.clone();
    train(&mut m, &recall(), &small_train(20, 2)).unwrap();
    for (i, (a, b)) in m.blocks.iter().zip(&before.blocks).enumerate() {
        if m.inserted[i] {
            assert_ne!(a, b, "block {i} did not train");
        } else {
            assert_eq!(a, b, "block {i} moved");
        }
    }
    assert_eq!((&m.embed, &m.unembed, &m.final_norm), (&before.embed, &before.unembed, &before.final_norm));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = midus_model(6);
        let report = train(&mut m, &recall(), &small_train(15, 3)).unwrap();
        (report, m.named().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn recall_loss_drops_over_200_steps() {
    let mut m = Model::<f64>::base(dims(16), 2, &mut Rng::new(7)).unwrap();
    let report = train(&mut m, &recall(), &small_train(200, 4)).unwrap();
    let (first, last) = (report.records[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0, report.tail_loss(10).unwrap());
    assert!(last < first, "{first} -> {last}");
}

fn dataset(n: usize, seed: u64) -> Vec<Sequence> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| recall().sample(&mut rng, 10).unwrap()).collect()
}

fn masked_loss(m: &Model<f64>, seq: &Sequence, scale: Option<HeadScale<f64>>) -> f64 {
    let opts = ForwardOptions {
        head_scale: scale,
        ..ForwardOptions::default()
    };
    let (logits, _) = m.forward_with(&seq.tokens, &opts).unwrap();
    cross_entropy(&logits, &seq.targets, Some(&seq.mask)).unwrap().0
}

#[test]
fn importance_matches_scaled_head_differences() {
    let d = ModelDims {
        vocab: 16,
        d: 4,
        heads: 4,
        d_ff: 8,
    };
    let m = Model::<f64>::base(d, 2, &mut Rng::new(8)).unwrap();
    let data = dataset(3, 9);
    let report = head_importance(&m, &data).unwrap();
    let eps = 1e-5;
    for (l, &block) in report.blocks.iter().enumerate() {
        for head in 0..4 {
            let fd: f64 = data
                .iter()
                .map(|seq| {
                    let at = |c: f64| masked_loss(&m, seq, Some(HeadScale { block, head, scale: c }));
                    (at(1.0 + eps) - at(1.0 - eps)) / (2.0 * eps)
                })
                .sum::<f64>()
                / data.len() as f64;
            let got = report.scores.row(l)[head];
            assert!((got - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "layer {l} head {head}: {got} vs {fd}");
        }
    }
}

#[test]
fn importance_ignores_dataset_duplication() {
    let m = Model::<f64>::base(dims(16), 2, &mut Rng::new(10)).unwrap();
    let data = dataset(4, 11);
    let twice: Vec<Sequence> = data.iter().chain(&data).cloned().collect();
    let a = head_importance(&m, &data).unwrap();
    let b = head_importance(&m, &twice).unwrap();
    assert!(a.scores.max_abs_diff(&b.scores) < 1e-12);
}

#[test]
fn importance_is_zero_when_loss_ignores_heads() {
    let mut m = Model::<f64>::base(dims(16), 2, &mut Rng::new(12)).unwrap();
    m.unembed.fill(0.0);
    let report = head_importance(&m, &dataset(3, 13)).unwrap();
    assert_eq!(report.scores.max_abs(), 0.0);
    assert!(report.variance.iter().all(|&v| v == 0.0));
}
