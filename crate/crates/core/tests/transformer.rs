use midus::layers::{LayerKind, MemoryBlock, MemoryLayerKind};
use midus::memory::MemoryConfig;
use midus::numerics::{matmul, rms_norm};
use midus::transformer::{
    causal_attention, lm_loss, model_forward, transformer_block_forward, AttentionParams, Block, Model, ModelDims,
    TransformerBlockParams, NORM_EPS,
};
use midus::{Rng, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mul(a: &Mat, w: &Tensor<f64>) -> Mat {
    let w = mat(w);
    a.iter()
        .map(|row| (0..w[0].len()).map(|j| (0..row.len()).map(|i| row[i] * w[i][j]).sum()).collect())
        .collect()
}

fn rms(a: &Mat, g: &Tensor<f64>) -> Mat {
    a.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            row.iter().zip(g.data()).map(|(v, g)| v / (ms + NORM_EPS).sqrt() * g).collect()
        })
        .collect()
}

fn rotate(a: &mut Mat, heads: usize, base: f64) {
    let dh = a[0].len() / heads;
    for (pos, row) in a.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..dh / 2 {
                let theta = pos as f64 / base.powf(2.0 * i as f64 / dh as f64);
                let (p, q) = (h * dh + i, h * dh + i + dh / 2);
                let (x, y) = (row[p], row[q]);
                row[p] = x * theta.cos() - y * theta.sin();
                row[q] = x * theta.sin() + y * theta.cos();
            }
        }
    }
}

fn attention_oracle(x: &Mat, p: &AttentionParams<f64>) -> Mat {
    let (mut q, mut k, v) = (mul(x, &p.w_q), mul(x, &p.w_k), mul(x, &p.w_v));
    rotate(&mut q, p.heads, p.rope_base);
    rotate(&mut k, p.heads, p.rope_base);
    let (s, d) = (x.len(), x[0].len());
    let dh = d / p.heads;
    let mut out = vec![vec![0.0; d]; s];
    for h in 0..p.heads {
        let c = h * dh..(h + 1) * dh;
        for r in 0..s {
            let logits: Vec<f64> = (0..=r)
                .map(|t| c.clone().map(|j| q[r][j] * k[t][j]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (t, l) in logits.iter().enumerate() {
                for j in c.clone() {
                    out[r][j] += l.exp() / z * v[t][j];
                }
            }
        }
    }
    match &p.w_o {
        Some(w) => mul(&out, w),
        None => out,
    }
}

fn block_oracle(x: &Mat, b: &TransformerBlockParams<f64>) -> Mat {
    let att = attention_oracle(&rms(x, &b.attn_norm), &b.attn);
    let a: Mat = x.iter().zip(&att).map(|(u, v)| u.iter().zip(v).map(|(p, q)| p + q).collect()).collect();
    let h = rms(&a, &b.ffn_norm);
    let (gate, up) = (mul(&h, &b.ffn.w_gate), mul(&h, &b.ffn.w_up));
    let act: Mat = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
        .collect();
    let f = mul(&act, &b.ffn.w_down);
    a.iter().zip(&f).map(|(u, v)| u.iter().zip(v).map(|(p, q)| p + q).collect()).collect()
}

fn max_diff(a: &Tensor<f64>, b: &Mat) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(j, v)| (a.row(r)[j] - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn dead_block_passes_input_through() {
    let mut rng = Rng::new(1);
    let mut b = TransformerBlockParams::<f64>::zeros(16, 2, 32);
    b.attn_norm.fill(0.0);
    b.ffn_norm.fill(0.0);
    let x: Tensor<f64> = rng.normal_tensor(&[5, 16], 1.0);
    assert_eq!(transformer_block_forward(&x, &b).unwrap(), x);
}

#[test]
fn single_token_attention_is_the_value_path() {
    let mut rng = Rng::new(2);
    let p = AttentionParams::<f64>::random(16, 4, true, &mut rng);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 16], 1.0);
    let v = matmul(&x, &p.w_v).unwrap();
    assert!(causal_attention(&x, &p, false).unwrap().max_abs_diff(&v) < 1e-12);
    let vo = matmul(&v, p.w_o.as_ref().unwrap()).unwrap();
    assert!(causal_attention(&x, &p, true).unwrap().max_abs_diff(&vo) < 1e-12);
}

#[test]
fn block_matches_straight_line_evaluation() {
    let mut rng = Rng::new(3);
    let mut b = TransformerBlockParams::<f64>::random(16, 4, 24, &mut rng);
    b.attn_norm = rng.normal_tensor(&[16], 1.0);
    b.ffn_norm = rng.normal_tensor(&[16], 1.0);
    let x: Tensor<f64> = rng.normal_tensor(&[6, 16], 1.0);
    let got = transformer_block_forward(&x, &b).unwrap();
    assert!(max_diff(&got, &block_oracle(&mat(&x), &b)) < 1e-5);
}

#[test]
fn projection_composes_with_bare_attention() {
    let mut rng = Rng::new(4);
    let p = AttentionParams::<f64>::random(16, 4, true, &mut rng);
    let x: Tensor<f64> = rng.normal_tensor(&[7, 16], 1.0);
    let bare = causal_attention(&x, &p, false).unwrap();
    let bare_again = causal_attention(&x, &p.without_output(), false).unwrap();
    assert_eq!(bare, bare_again);
    let composed = matmul(&bare, p.w_o.as_ref().unwrap()).unwrap();
    assert!(causal_attention(&x, &p, true).unwrap().max_abs_diff(&composed) < 1e-6);
    assert!(causal_attention(&x, &p.without_output(), true).is_err());
}

#[test]
fn loss_cases() {
    let mut rng = Rng::new(5);
    let mut confident = Tensor::<f64>::zeros(&[3, 10]);
    for (r, t) in [4, 0, 9].into_iter().enumerate() {
        confident.row_mut(r)[t] = 100.0;
    }
    assert!(lm_loss(&confident, &[4, 0, 9]).unwrap() < 1e-30);
    let uniform = Tensor::<f64>::full(&[4, 10], 0.7);
    assert!((lm_loss(&uniform, &[1, 2, 3, 4]).unwrap() - 10f64.ln()).abs() < 1e-12);

    let logits: Tensor<f64> = rng.normal_tensor(&[5, 7], 3.0);
    let targets = [6, 0, 3, 3, 1];
    let want = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = logits.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum::<f64>()
        / 5.0;
    assert!((lm_loss(&logits, &targets).unwrap() - want).abs() < 1e-12);
    assert!(lm_loss(&logits, &[0, 0, 0, 0, 7]).is_err());
    assert!(lm_loss(&logits, &[0, 0]).is_err());
}

fn dims() -> ModelDims {
    ModelDims {
        vocab: 11,
        d: 16,
        heads: 4,
        d_ff: 24,
    }
}

#[test]
fn zero_block_model_is_embed_then_unembed() {
    let mut rng = Rng::new(6);
    let m = Model::<f64>::base(dims(), 0, &mut rng).unwrap();
    let tokens = [3, 1, 10, 3];
    let mut x = Tensor::zeros(&[4, 16]);
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(m.embed.row(t));
    }
    let want = matmul(&rms_norm(&x, &m.final_norm, NORM_EPS).unwrap().0, &m.unembed).unwrap();
    assert_eq!(model_forward(&tokens, &m).unwrap(), want);
}

#[test]
fn two_block_model_matches_layer_trace() {
    let mut rng = Rng::new(7);
    let m = Model::<f64>::base(dims(), 2, &mut rng).unwrap();
    let tokens = [0, 5, 2, 9, 9, 1];
    let mut x: Mat = tokens.iter().map(|&t| m.embed.row(t).to_vec()).collect();
    for b in &m.blocks {
        let Block::Transformer(b) = b else { unreachable!() };
        x = block_oracle(&x, b);
    }
    let logits = mul(&rms(&x, &m.final_norm), &m.unembed);
    assert!(max_diff(&model_forward(&tokens, &m).unwrap(), &logits) < 1e-9);
}

#[test]
fn identity_memory_block_anywhere_keeps_logits() {
    let mut rng = Rng::new(8);
    let base = Model::<f64>::base(dims(), 3, &mut rng).unwrap();
    let tokens = [1, 2, 3, 4, 5, 6, 7];
    let want = base.forward(&tokens).unwrap();
    let cfg = MemoryConfig::new(4, 4, 2, 16).unwrap();
    for kind in [LayerKind::Linear, LayerKind::Pkm, LayerKind::Hml] {
        for at in 0..=3 {
            let mut m = base.clone();
            let mem = MemoryBlock::new(MemoryLayerKind::new(kind), cfg, &mut rng).unwrap();
            m.blocks.insert(at, Block::Memory(mem));
            m.trainable.insert(at, true);
            m.inserted.insert(at, true);
            m.validate().unwrap();
            assert_eq!(m.forward(&tokens).unwrap(), want, "{kind} at {at}");
        }
    }
}

#[test]
fn logits_ignore_future_tokens() {
    let mut rng = Rng::new(9);
    let m = Model::<f64>::base(dims(), 2, &mut rng).unwrap();
    let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
    let b = m.forward(&[1, 2, 3, 10, 0]).unwrap();
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn forward_rejects_bad_tokens() {
    let mut rng = Rng::new(10);
    let m = Model::<f64>::base(dims(), 1, &mut rng).unwrap();
    assert!(m.forward(&[]).is_err());
    assert!(m.forward(&[11]).is_err());
}
