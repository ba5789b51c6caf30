use factrace_core::model::{Blocks, EncodedExample, ModelConfig, Transformer, PAD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        max_seq_len: 10,
        include_eos_in_target: false,
        seed: 3,
    }
}

fn example() -> EncodedExample {
    EncodedExample {
        src: vec![5, 3, 7, 9, 6],
        tgt: vec![8, 11, 5],
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let model = Transformer::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = model.init_params(&mut rng);
    let ex = example().padded(2);
    let (loss, grads) = model.loss_and_grad(&params, &ex).unwrap();
    assert!(loss.is_finite());

    let h = 1e-4;
    for (bi, block) in params.iter().enumerate() {
        let mut fd = vec![0.0; block.data.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.at_mut(bi).data[i] += h;
            let mut minus = params.clone();
            minus.at_mut(bi).data[i] -= h;
            *slot = (model.loss(&plus, &ex).unwrap() - model.loss(&minus, &ex).unwrap()) / (2.0 * h);
        }
        let analytic = &grads.at(bi).data;
        let diff: f64 = fd.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(
            diff / scale <= 1e-5,
            "block {} relative error {:.3e}",
            block.name,
            diff / scale
        );
    }
}

#[test]
fn padding_does_not_change_loss_or_gradient() {
    let model = Transformer::new(tiny_config()).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
    let ex = example();
    let (l0, g0) = model.loss_and_grad(&params, &ex).unwrap();
    let (l1, g1) = model.loss_and_grad(&params, &ex.padded(4)).unwrap();
    assert!((l0 - l1).abs() < 1e-12);
    for (a, b) in g0.iter().zip(g1.iter()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-10, "{}", a.name);
        }
    }
    assert_eq!(ex.padded(1).src.last(), Some(&PAD));
}

#[test]
fn zero_output_projection_gives_uniform_loss() {
    let cfg = tiny_config();
    let model = Transformer::new(cfg.clone()).unwrap();
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let head = params.position("lm_head").unwrap();
    params.at_mut(head).data.fill(0.0);
    let out = model.forward(&params, &example()).unwrap();
    assert!((out.loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    for row in out.probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn batched_gradient_equals_weighted_sum_of_single_gradients() {
    let model = Transformer::new(tiny_config()).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(8));
    let a = example();
    let b = EncodedExample {
        src: vec![4, 4, 10],
        tgt: vec![6, 7],
    }
    .padded(1);
    let c = EncodedExample {
        src: vec![9, 8, 7, 6, 5, 4, 3],
        tgt: vec![10],
    };
    let weights = [0.5, 2.0, -1.0];
    let mut batched = Blocks::zeros_like(&params);
    let losses = model
        .accumulate_batch_grad(&params, &[&a, &b, &c], &weights, &mut batched)
        .unwrap();
    let mut summed = Blocks::zeros_like(&params);
    for (ex, (&w, &l)) in [&a, &b, &c].iter().zip(weights.iter().zip(&losses)) {
        let single = model.accumulate_grad(&params, ex, w, &mut summed).unwrap();
        assert!((single - l).abs() < 1e-12);
    }
    for (x, y) in batched.iter().zip(summed.iter()) {
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() < 1e-10, "{}", x.name);
        }
    }
}
