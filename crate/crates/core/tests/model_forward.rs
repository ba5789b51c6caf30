//! Forward pass against a loop-by-loop reference implementation.

use factrace_core::model::{Blocks, EncodedExample, ModelConfig, Transformer, BOS, EOS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn block(params: &Blocks, name: &str) -> Mat {
    let b = params.get(name).unwrap();
    let cols = *b.shape.last().unwrap();
    if b.shape.len() == 1 {
        return vec![b.data.clone()];
    }
    b.data.chunks(cols).map(|r| r.to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn rms_norm(x: &Mat, gain: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + 1e-6).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * r * g).collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn attention(p: &Blocks, prefix: &str, xq: &Mat, xkv: &Mat, heads: usize, causal: bool) -> Mat {
    let q = matmul(xq, &block(p, &format!("{prefix}.q")));
    let k = matmul(xkv, &block(p, &format!("{prefix}.k")));
    let v = matmul(xkv, &block(p, &format!("{prefix}.v")));
    let d = q[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        for i in 0..xq.len() {
            let scores: Vec<f64> = (0..xkv.len())
                .map(|j| {
                    if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                    }
                })
                .collect();
            let w = softmax(&scores);
            for c in 0..dh {
                ctx[i][h * dh + c] = (0..xkv.len()).map(|j| w[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    matmul(&ctx, &block(p, &format!("{prefix}.o")))
}

fn ffn(p: &Blocks, prefix: &str, x: &Mat) -> Mat {
    let mut h = matmul(x, &block(p, &format!("{prefix}.wi")));
    for v in h.iter_mut().flatten() {
        let x = *v;
        *v = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    }
    matmul(&h, &block(p, &format!("{prefix}.wo")))
}

fn embed(p: &Blocks, tokens: &[u32], d: usize) -> Mat {
    let table = block(p, "embedding");
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                    table[t as usize][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

/// Returns per-position output distributions.
fn reference_probs(cfg: &ModelConfig, p: &Blocks, ex: &EncodedExample) -> Mat {
    let d = cfg.d_model;
    let gain = |name: &str| block(p, name)[0].clone();
    let mut x = embed(p, &ex.src, d);
    for l in 1..=cfg.n_enc_layers {
        let h = rms_norm(&x, &gain(&format!("encoder.{l}.attn_norm")));
        x = add(&x, &attention(p, &format!("encoder.{l}.attn"), &h, &h, cfg.n_heads, false));
        let h = rms_norm(&x, &gain(&format!("encoder.{l}.ffn_norm")));
        x = add(&x, &ffn(p, &format!("encoder.{l}.ffn"), &h));
    }
    let memory = rms_norm(&x, &gain("encoder.final_norm"));
    let dec_in: Vec<u32> = std::iter::once(BOS).chain(ex.tgt[..ex.tgt.len() - 1].iter().copied()).collect();
    let mut y = embed(p, &dec_in, d);
    for l in 1..=cfg.n_dec_layers {
        let h = rms_norm(&y, &gain(&format!("decoder.{l}.self_norm")));
        y = add(&y, &attention(p, &format!("decoder.{l}.self_attn"), &h, &h, cfg.n_heads, true));
        let h = rms_norm(&y, &gain(&format!("decoder.{l}.cross_norm")));
        y = add(&y, &attention(p, &format!("decoder.{l}.cross_attn"), &h, &memory, cfg.n_heads, false));
        let h = rms_norm(&y, &gain(&format!("decoder.{l}.ffn_norm")));
        y = add(&y, &ffn(p, &format!("decoder.{l}.ffn"), &h));
    }
    let hidden = rms_norm(&y, &gain("decoder.final_norm"));
    matmul(&hidden, &block(p, "lm_head")).iter().map(|r| softmax(r)).collect()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 4,
        n_heads: 2,
        d_ff: 6,
        n_enc_layers: 1,
        n_dec_layers: 1,
        max_seq_len: 8,
        include_eos_in_target: false,
        seed: 0,
    }
}

/// Fills every block with a fixed, easily reproduced pattern.
fn hand_set(model: &Transformer) -> Blocks {
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for (bi, b) in params.iter_mut().enumerate() {
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = (0.37 * i as f64 + 1.3 * bi as f64).sin() * 0.8;
        }
    }
    params
}

#[test]
fn hand_set_model_matches_reference_forward() {
    let cfg = small_config();
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = hand_set(&model);
    let ex = EncodedExample {
        src: vec![4, 5],
        tgt: vec![6, 3],
    };
    let out = model.forward(&params, &ex).unwrap();
    let want = reference_probs(&cfg, &params, &ex);
    for (t, row) in want.iter().enumerate() {
        for (v, &p) in row.iter().enumerate() {
            assert!((out.probs[[t, v]] - p).abs() < 1e-12, "position {t} token {v}");
        }
    }
    let nll = -(want[0][6].ln() + want[1][3].ln()) / 2.0;
    assert!((out.loss - nll).abs() < 1e-12);
}

#[test]
fn random_deeper_model_matches_reference_forward() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 4,
        n_enc_layers: 2,
        n_dec_layers: 2,
        ..small_config()
    };
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(9));
    let ex = EncodedExample {
        src: vec![3, 6, 4, 4, 5],
        tgt: vec![5, 6, 3],
    };
    let out = model.forward(&params, &ex).unwrap();
    let want = reference_probs(&cfg, &params, &ex);
    for (t, row) in want.iter().enumerate() {
        for (v, &p) in row.iter().enumerate() {
            assert!((out.probs[[t, v]] - p).abs() < 1e-12);
        }
    }
}

#[test]
fn eos_position_joins_the_loss_average() {
    let cfg = ModelConfig {
        include_eos_in_target: true,
        ..small_config()
    };
    let model = Transformer::new(cfg).unwrap();
    let params = hand_set(&model);
    let plain = EncodedExample {
        src: vec![4, 5],
        tgt: vec![6],
    };
    let with_eos = EncodedExample {
        src: vec![4, 5],
        tgt: vec![6, EOS],
    };
    let p1 = model.forward(&params, &plain).unwrap();
    let p2 = model.forward(&params, &with_eos).unwrap();
    let want = (-p2.probs[[0, 6]].ln() - p2.probs[[1, EOS as usize]].ln()) / 2.0;
    assert!((p2.loss - want).abs() < 1e-12);
    assert!((p1.loss + p1.probs[[0, 6]].ln()).abs() < 1e-12);
}

#[test]
fn loss_gradient_scales_linearly_with_weight() {
    let model = Transformer::new(small_config()).unwrap();
    let params = hand_set(&model);
    let ex = EncodedExample {
        src: vec![4, 5, 3],
        tgt: vec![6, 3],
    };
    let (_, g) = model.loss_and_grad(&params, &ex).unwrap();
    let mut g2 = Blocks::zeros_like(&params);
    model.accumulate_grad(&params, &ex, 2.0, &mut g2).unwrap();
    for (a, b) in g.iter().zip(g2.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }
    let names: Vec<&str> = params.names().collect();
    assert_eq!(g.names().collect::<Vec<_>>(), names);
}

#[test]
fn invalid_examples_are_rejected() {
    let model = Transformer::new(small_config()).unwrap();
    let params = hand_set(&model);
    let long = EncodedExample {
        src: vec![4; 9],
        tgt: vec![3],
    };
    assert!(model.forward(&params, &long).is_err());
    let unknown = EncodedExample {
        src: vec![4, 7],
        tgt: vec![3],
    };
    assert!(model.forward(&params, &unknown).is_err());
    let empty = EncodedExample {
        src: vec![4],
        tgt: vec![],
    };
    assert!(model.forward(&params, &empty).is_err());
}
