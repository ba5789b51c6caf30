//! Pre-norm encoder-decoder transformer with an explicit reverse-mode pass.
//!
//! RMS norms carry a gain and no bias, attention and feed-forward weights have
//! no biases, positions are sinusoidal, and the token embedding is shared by
//! encoder and decoder inputs. The output projection is a separate block.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::blocks::{Block, Blocks};
use super::config::ModelConfig;
use super::vocab::{TokenId, BOS, PAD};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-6;

/// `(first row, length)` of one example inside a stacked batch.
type Seg = (usize, usize);

pub const EMBEDDING: &str = "embedding";
pub const LM_HEAD: &str = "lm_head";
pub const ENCODER_FINAL_NORM: &str = "encoder.final_norm";
pub const DECODER_FINAL_NORM: &str = "decoder.final_norm";

/// Token ids for one example. `tgt` are the decoder labels; the decoder input
/// is `<s>` followed by all labels but the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

impl EncodedExample {
    pub fn decoder_input(&self) -> Vec<TokenId> {
        std::iter::once(BOS)
            .chain(self.tgt[..self.tgt.len().saturating_sub(1)].iter().copied())
            .collect()
    }

    /// Appends `extra` padding tokens to the source.
    pub fn padded(&self, extra: usize) -> Self {
        let mut src = self.src.clone();
        src.extend(std::iter::repeat(PAD).take(extra));
        EncodedExample {
            src,
            tgt: self.tgt.clone(),
        }
    }
}

/// Hidden states after the embedding (index 0) and after each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub enc: Vec<Array2<f64>>,
    pub dec: Vec<Array2<f64>>,
    /// Which source positions are real tokens rather than padding.
    pub src_valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Softmax distribution per decoder position, `[tgt_len, vocab]`.
    pub probs: Array2<f64>,
    pub loss: f64,
    pub layers: LayerOutputs,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncIdx {
    attn_norm: usize,
    attn: AttnIdx,
    ffn_norm: usize,
    wi: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecIdx {
    self_norm: usize,
    self_attn: AttnIdx,
    cross_norm: usize,
    cross_attn: AttnIdx,
    ffn_norm: usize,
    wi: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: usize,
    enc: Vec<EncIdx>,
    enc_final: usize,
    dec: Vec<DecIdx>,
    dec_final: usize,
    head: usize,
}

enum Init {
    Normal(f64),
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn block_specs(c: &ModelConfig) -> Vec<Spec> {
    let d = c.d_model;
    let sd = 1.0 / (d as f64).sqrt();
    let sff = 1.0 / (c.d_ff as f64).sqrt();
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(Spec { name, shape, init });
    push(EMBEDDING.into(), vec![c.vocab_size, d], Init::Normal(1.0));
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        for w in ["q", "k", "v", "o"] {
            push(format!("{prefix}.{w}"), vec![d, d], Init::Normal(sd));
        }
    };
    for l in 1..=c.n_enc_layers {
        push(format!("encoder.{l}.attn_norm"), vec![d], Init::Ones);
        attn(&mut push, &format!("encoder.{l}.attn"));
        push(format!("encoder.{l}.ffn_norm"), vec![d], Init::Ones);
        push(format!("encoder.{l}.ffn.wi"), vec![d, c.d_ff], Init::Normal(sd));
        push(format!("encoder.{l}.ffn.wo"), vec![c.d_ff, d], Init::Normal(sff));
    }
    push(ENCODER_FINAL_NORM.into(), vec![d], Init::Ones);
    for l in 1..=c.n_dec_layers {
        push(format!("decoder.{l}.self_norm"), vec![d], Init::Ones);
        attn(&mut push, &format!("decoder.{l}.self_attn"));
        push(format!("decoder.{l}.cross_norm"), vec![d], Init::Ones);
        attn(&mut push, &format!("decoder.{l}.cross_attn"));
        push(format!("decoder.{l}.ffn_norm"), vec![d], Init::Ones);
        push(format!("decoder.{l}.ffn.wi"), vec![d, c.d_ff], Init::Normal(sd));
        push(format!("decoder.{l}.ffn.wo"), vec![c.d_ff, d], Init::Normal(sff));
    }
    push(DECODER_FINAL_NORM.into(), vec![d], Init::Ones);
    push(LM_HEAD.into(), vec![d, c.vocab_size], Init::Normal(sd));
    specs
}

/// Names of every parameter block for `config`, in storage order.
pub fn block_names(config: &ModelConfig) -> Vec<String> {
    block_specs(config).into_iter().map(|s| s.name).collect()
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    layout: Layout,
    positions: Array2<f64>,
}

struct AttnCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    q_segs: Vec<Seg>,
    kv_segs: Vec<Seg>,
    /// Attention weights per (segment, head).
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

struct NormCache {
    x: Array2<f64>,
    inv: Vec<f64>,
}

struct FfnCache {
    h: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct EncCache {
    n1: NormCache,
    attn: AttnCache,
    n2: NormCache,
    ffn: FfnCache,
}

struct DecCache {
    n1: NormCache,
    self_attn: AttnCache,
    n2: NormCache,
    cross: AttnCache,
    n3: NormCache,
    ffn: FfnCache,
}

struct EncTrace {
    src: Vec<TokenId>,
    segs: Vec<Seg>,
    src_valid: Vec<bool>,
    layers: Vec<EncCache>,
    final_norm: NormCache,
    memory: Array2<f64>,
    outputs: Vec<Array2<f64>>,
}

struct DecTrace {
    dec_in: Vec<TokenId>,
    layers: Vec<DecCache>,
    final_norm: NormCache,
    hidden: Array2<f64>,
    probs: Array2<f64>,
    outputs: Vec<Array2<f64>>,
}

/// Encoder output for one source sequence, reusable across decoding steps.
pub struct EncoderState {
    trace: EncTrace,
}

fn add_mm(acc: &mut Block, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    let mut view = acc.view2_mut();
    general_mat_mul(1.0, &a, &b, 1.0, &mut view);
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let names = block_names(&config);
        let pos = |name: &str| names.iter().position(|n| n == name).expect("layout name");
        let attn = |prefix: &str| AttnIdx {
            q: pos(&format!("{prefix}.q")),
            k: pos(&format!("{prefix}.k")),
            v: pos(&format!("{prefix}.v")),
            o: pos(&format!("{prefix}.o")),
        };
        let enc = (1..=config.n_enc_layers)
            .map(|l| EncIdx {
                attn_norm: pos(&format!("encoder.{l}.attn_norm")),
                attn: attn(&format!("encoder.{l}.attn")),
                ffn_norm: pos(&format!("encoder.{l}.ffn_norm")),
                wi: pos(&format!("encoder.{l}.ffn.wi")),
                wo: pos(&format!("encoder.{l}.ffn.wo")),
            })
            .collect();
        let dec = (1..=config.n_dec_layers)
            .map(|l| DecIdx {
                self_norm: pos(&format!("decoder.{l}.self_norm")),
                self_attn: attn(&format!("decoder.{l}.self_attn")),
                cross_norm: pos(&format!("decoder.{l}.cross_norm")),
                cross_attn: attn(&format!("decoder.{l}.cross_attn")),
                ffn_norm: pos(&format!("decoder.{l}.ffn_norm")),
                wi: pos(&format!("decoder.{l}.ffn.wi")),
                wo: pos(&format!("decoder.{l}.ffn.wo")),
            })
            .collect();
        let layout = Layout {
            embedding: pos(EMBEDDING),
            enc,
            enc_final: pos(ENCODER_FINAL_NORM),
            dec,
            dec_final: pos(DECODER_FINAL_NORM),
            head: pos(LM_HEAD),
        };
        let d = config.d_model;
        let positions = Array2::from_shape_fn((config.max_seq_len, d), |(p, i)| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        Ok(Transformer {
            config,
            layout,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Blocks {
        let blocks = block_specs(&self.config)
            .into_iter()
            .map(|spec| {
                let mut block = Block::zeros(spec.name, spec.shape);
                match spec.init {
                    Init::Ones => block.data.fill(1.0),
                    Init::Normal(std) => block.data.iter_mut().for_each(|x| *x = std * standard_normal(rng)),
                }
                block
            })
            .collect();
        Blocks::new(blocks)
    }

    /// Checks that `params` has this model's partition and shapes.
    pub fn check_params(&self, params: &Blocks) -> Result<()> {
        let specs = block_specs(&self.config);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, block) in specs.iter().zip(params.iter()) {
            if spec.name != block.name || spec.shape != block.shape {
                return Err(Error::Shape(format!(
                    "block {} {:?} does not match expected {} {:?}",
                    block.name, block.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(())
    }

    fn check_example(&self, ex: &EncodedExample) -> Result<()> {
        let max = self.config.max_seq_len;
        for len in [ex.src.len(), ex.tgt.len()] {
            if len > max {
                return Err(Error::Overlength { len, max });
            }
        }
        if ex.tgt.is_empty() {
            return Err(Error::InvalidInput("example has an empty target".into()));
        }
        if ex.src.is_empty() || ex.src.iter().all(|&t| t == PAD) {
            return Err(Error::InvalidInput("example has an empty source".into()));
        }
        let vocab = self.config.vocab_size as TokenId;
        if let Some(&bad) = ex.src.iter().chain(&ex.tgt).find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        Ok(())
    }

    fn embed(&self, params: &Blocks, tokens: &[TokenId], segs: &[Seg]) -> Array2<f64> {
        let table = params.at(self.layout.embedding).view2();
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for &(start, len) in segs {
            for p in 0..len {
                let mut row = x.row_mut(start + p);
                row.assign(&table.row(tokens[start + p] as usize));
                row += &self.positions.row(p);
            }
        }
        x
    }

    fn norm(&self, params: &Blocks, idx: usize, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let gain = &params.at(idx).data;
        let d = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (ms + NORM_EPS).sqrt();
            inv.push(r);
            for (v, g) in row.iter_mut().zip(gain) {
                *v *= r * g;
            }
        }
        (
            y,
            NormCache {
                x: x.clone(),
                inv,
            },
        )
    }

    fn norm_backward(&self, grads: &mut Blocks, idx: usize, params: &Blocks, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
        let gain = &params.at(idx).data;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        let dgain = &mut grads.at_mut(idx).data;
        for (t, &r) in cache.inv.iter().enumerate() {
            let x = cache.x.row(t);
            let dyr = dy.row(t);
            let mut dot = 0.0;
            for i in 0..dyr.len() {
                let n = x[i] * r;
                dgain[i] += dyr[i] * n;
                dot += dyr[i] * gain[i] * n;
            }
            let mean = dot / d;
            let mut out = dx.row_mut(t);
            for i in 0..dyr.len() {
                out[i] = r * (dyr[i] * gain[i] - x[i] * r * mean);
            }
        }
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        params: &Blocks,
        idx: AttnIdx,
        xq: &Array2<f64>,
        xkv: &Array2<f64>,
        q_segs: &[Seg],
        kv_segs: &[Seg],
        key_valid: &[bool],
        causal: bool,
    ) -> (Array2<f64>, AttnCache) {
        let q = xq.dot(&params.at(idx.q).view2());
        let k = xkv.dot(&params.at(idx.k).view2());
        let v = xkv.dot(&params.at(idx.v).view2());
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(q_segs.len() * self.config.n_heads);
        for (&(qs, ql), &(ks, kl)) in q_segs.iter().zip(kv_segs) {
            for h in 0..self.config.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![qs..qs + ql, cols.clone()]);
                let kh = k.slice(s![ks..ks + kl, cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                for ((i, j), s) in scores.indexed_iter_mut() {
                    if !key_valid[ks + j] || (causal && j > i) {
                        *s = f64::NEG_INFINITY;
                    } else {
                        *s *= scale;
                    }
                }
                softmax_rows(&mut scores);
                ctx.slice_mut(s![qs..qs + ql, cols.clone()])
                    .assign(&scores.dot(&v.slice(s![ks..ks + kl, cols])));
                probs.push(scores);
            }
        }
        let out = ctx.dot(&params.at(idx.o).view2());
        (
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                q_segs: q_segs.to_vec(),
                kv_segs: kv_segs.to_vec(),
                probs,
                ctx,
            },
        )
    }

    /// Returns gradients with respect to the query-side and key/value-side inputs.
    fn attention_backward(
        &self,
        params: &Blocks,
        grads: &mut Blocks,
        idx: AttnIdx,
        cache: &AttnCache,
        dout: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        add_mm(grads.at_mut(idx.o), cache.ctx.t(), dout.view());
        let dctx = dout.dot(&params.at(idx.o).view2().t());
        let n_heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (si, (&(qs, ql), &(ks, kl))) in cache.q_segs.iter().zip(&cache.kv_segs).enumerate() {
            for h in 0..n_heads {
                let p = &cache.probs[si * n_heads + h];
                let cols = h * dh..(h + 1) * dh;
                let qrows = s![qs..qs + ql, cols.clone()];
                let krows = s![ks..ks + kl, cols];
                let dctx_h = dctx.slice(qrows);
                dv.slice_mut(krows).assign(&p.t().dot(&dctx_h));
                let dp = dctx_h.dot(&cache.v.slice(krows).t());
                // Softmax backward: ds = p * (dp - rowsum(dp * p)).
                let row_dot = (&dp * p).sum_axis(Axis(1));
                let mut ds = dp;
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let prow = p.row(i);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = prow[j] * (*v - row_dot[i]);
                    }
                }
                dq.slice_mut(qrows).assign(&(ds.dot(&cache.k.slice(krows)) * scale));
                dk.slice_mut(krows).assign(&(ds.t().dot(&cache.q.slice(qrows)) * scale));
            }
        }
        add_mm(grads.at_mut(idx.q), cache.xq.t(), dq.view());
        add_mm(grads.at_mut(idx.k), cache.xkv.t(), dk.view());
        add_mm(grads.at_mut(idx.v), cache.xkv.t(), dv.view());
        let dxq = dq.dot(&params.at(idx.q).view2().t());
        let dxkv = dk.dot(&params.at(idx.k).view2().t()) + dv.dot(&params.at(idx.v).view2().t());
        (dxq, dxkv)
    }

    fn ffn(&self, params: &Blocks, wi: usize, wo: usize, h: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let pre = h.dot(&params.at(wi).view2());
        let act = pre.mapv(gelu);
        let out = act.dot(&params.at(wo).view2());
        (
            out,
            FfnCache {
                h: h.clone(),
                pre,
                act,
            },
        )
    }

    fn ffn_backward(&self, params: &Blocks, grads: &mut Blocks, wi: usize, wo: usize, cache: &FfnCache, dout: &Array2<f64>) -> Array2<f64> {
        add_mm(grads.at_mut(wo), cache.act.t(), dout.view());
        let mut dpre = dout.dot(&params.at(wo).view2().t());
        dpre.zip_mut_with(&cache.pre, |d, &x| *d *= gelu_grad(x));
        add_mm(grads.at_mut(wi), cache.h.t(), dpre.view());
        dpre.dot(&params.at(wi).view2().t())
    }

    fn run_encoder(&self, params: &Blocks, src: &[TokenId], segs: &[Seg]) -> EncTrace {
        let l = &self.layout;
        let src_valid: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        let mut x = self.embed(params, src, segs);
        let mut outputs = vec![x.clone()];
        let mut layers = Vec::with_capacity(l.enc.len());
        for idx in &l.enc {
            let (h1, n1) = self.norm(params, idx.attn_norm, &x);
            let (a, attn) = self.attention(params, idx.attn, &h1, &h1, segs, segs, &src_valid, false);
            x = x + a;
            let (h2, n2) = self.norm(params, idx.ffn_norm, &x);
            let (f, ffn) = self.ffn(params, idx.wi, idx.wo, &h2);
            x = x + f;
            outputs.push(x.clone());
            layers.push(EncCache { n1, attn, n2, ffn });
        }
        let (memory, final_norm) = self.norm(params, l.enc_final, &x);
        EncTrace {
            src: src.to_vec(),
            segs: segs.to_vec(),
            src_valid,
            layers,
            final_norm,
            memory,
            outputs,
        }
    }

    fn run_decoder(&self, params: &Blocks, enc: &EncTrace, dec_in: &[TokenId], segs: &[Seg]) -> DecTrace {
        let l = &self.layout;
        let all_valid = vec![true; dec_in.len()];
        let mut y = self.embed(params, dec_in, segs);
        let mut outputs = vec![y.clone()];
        let mut layers = Vec::with_capacity(l.dec.len());
        for idx in &l.dec {
            let (h1, n1) = self.norm(params, idx.self_norm, &y);
            let (a, self_attn) = self.attention(params, idx.self_attn, &h1, &h1, segs, segs, &all_valid, true);
            y = y + a;
            let (h2, n2) = self.norm(params, idx.cross_norm, &y);
            let (c, cross) = self.attention(
                params,
                idx.cross_attn,
                &h2,
                &enc.memory,
                segs,
                &enc.segs,
                &enc.src_valid,
                false,
            );
            y = y + c;
            let (h3, n3) = self.norm(params, idx.ffn_norm, &y);
            let (f, ffn) = self.ffn(params, idx.wi, idx.wo, &h3);
            y = y + f;
            outputs.push(y.clone());
            layers.push(DecCache {
                n1,
                self_attn,
                n2,
                cross,
                n3,
                ffn,
            });
        }
        let (hidden, final_norm) = self.norm(params, l.dec_final, &y);
        let mut probs = hidden.dot(&params.at(l.head).view2());
        softmax_rows(&mut probs);
        DecTrace {
            dec_in: dec_in.to_vec(),
            layers,
            final_norm,
            hidden,
            probs,
            outputs,
        }
    }

    fn nll(probs: ArrayView2<f64>, labels: &[TokenId]) -> f64 {
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(t, &y)| -probs[[t, y as usize]].ln())
            .sum();
        total / labels.len() as f64
    }

    pub fn forward(&self, params: &Blocks, ex: &EncodedExample) -> Result<ForwardOutput> {
        self.check_example(ex)?;
        let enc = self.run_encoder(params, &ex.src, &[(0, ex.src.len())]);
        let dec_in = ex.decoder_input();
        let dec = self.run_decoder(params, &enc, &dec_in, &[(0, dec_in.len())]);
        let loss = Self::nll(dec.probs.view(), &ex.tgt);
        Ok(ForwardOutput {
            loss,
            probs: dec.probs,
            layers: LayerOutputs {
                enc: enc.outputs,
                dec: dec.outputs,
                src_valid: enc.src_valid,
            },
        })
    }

    /// Mean negative log-likelihood of the target tokens.
    pub fn loss(&self, params: &Blocks, ex: &EncodedExample) -> Result<f64> {
        Ok(self.forward(params, ex)?.loss)
    }

    pub fn encode_source(&self, params: &Blocks, src: &[TokenId]) -> Result<EncoderState> {
        self.check_example(&EncodedExample {
            src: src.to_vec(),
            tgt: vec![PAD],
        })?;
        Ok(EncoderState {
            trace: self.run_encoder(params, src, &[(0, src.len())]),
        })
    }

    /// Log-probabilities of the next token after `<s> prefix`.
    pub fn next_token_log_probs(&self, params: &Blocks, enc: &EncoderState, prefix: &[TokenId]) -> Vec<f64> {
        let dec_in: Vec<TokenId> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let dec = self.run_decoder(params, &enc.trace, &dec_in, &[(0, dec_in.len())]);
        dec.probs.row(dec_in.len() - 1).iter().map(|p| p.ln()).collect()
    }

    /// Loss and its exact gradient with respect to every parameter block.
    pub fn loss_and_grad(&self, params: &Blocks, ex: &EncodedExample) -> Result<(f64, Blocks)> {
        let mut grads = Blocks::zeros_like(params);
        let loss = self.accumulate_grad(params, ex, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds `weight` times the loss gradient into `grads` and returns the loss.
    pub fn accumulate_grad(&self, params: &Blocks, ex: &EncodedExample, weight: f64, grads: &mut Blocks) -> Result<f64> {
        Ok(self.accumulate_batch_grad(params, &[ex], &[weight], grads)?[0])
    }

    /// Adds `sum_i weights[i] * grad loss(examples[i])` into `grads` and
    /// returns the per-example losses. Examples are processed together but
    /// never attend to each other, so the result equals the per-example sum.
    pub fn accumulate_batch_grad(
        &self,
        params: &Blocks,
        examples: &[&EncodedExample],
        weights: &[f64],
        grads: &mut Blocks,
    ) -> Result<Vec<f64>> {
        if examples.len() != weights.len() {
            return Err(Error::Shape(format!("{} examples but {} weights", examples.len(), weights.len())));
        }
        let mut src = Vec::new();
        let mut src_segs = Vec::with_capacity(examples.len());
        let mut dec_in = Vec::new();
        let mut dec_segs = Vec::with_capacity(examples.len());
        for ex in examples {
            self.check_example(ex)?;
            src_segs.push((src.len(), ex.src.len()));
            src.extend_from_slice(&ex.src);
            dec_segs.push((dec_in.len(), ex.tgt.len()));
            dec_in.extend(ex.decoder_input());
        }
        let enc = self.run_encoder(params, &src, &src_segs);
        let dec = self.run_decoder(params, &enc, &dec_in, &dec_segs);
        let l = &self.layout;

        let mut losses = Vec::with_capacity(examples.len());
        let mut dlogits = dec.probs.clone();
        for ((ex, &(start, len)), &w) in examples.iter().zip(&dec_segs).zip(weights) {
            losses.push(Self::nll(dec.probs.slice(s![start..start + len, ..]), &ex.tgt));
            let scale = w / len as f64;
            let mut rows = dlogits.slice_mut(s![start..start + len, ..]);
            for (t, &y) in ex.tgt.iter().enumerate() {
                rows[[t, y as usize]] -= 1.0;
            }
            rows.mapv_inplace(|v| v * scale);
        }
        add_mm(grads.at_mut(l.head), dec.hidden.t(), dlogits.view());
        let dhidden = dlogits.dot(&params.at(l.head).view2().t());
        let mut dy = self.norm_backward(grads, l.dec_final, params, &dec.final_norm, &dhidden);

        let mut dmemory = Array2::zeros(enc.memory.raw_dim());
        for (idx, cache) in l.dec.iter().zip(&dec.layers).rev() {
            let dh3 = self.ffn_backward(params, grads, idx.wi, idx.wo, &cache.ffn, &dy);
            dy = dy + self.norm_backward(grads, idx.ffn_norm, params, &cache.n3, &dh3);
            let (dh2, dmem) = self.attention_backward(params, grads, idx.cross_attn, &cache.cross, &dy);
            dmemory += &dmem;
            dy = dy + self.norm_backward(grads, idx.cross_norm, params, &cache.n2, &dh2);
            let (dq, dkv) = self.attention_backward(params, grads, idx.self_attn, &cache.self_attn, &dy);
            let dh1 = dq + dkv;
            dy = dy + self.norm_backward(grads, idx.self_norm, params, &cache.n1, &dh1);
        }
        self.embed_backward(grads, &dec.dec_in, &dy);

        let mut dx = self.norm_backward(grads, l.enc_final, params, &enc.final_norm, &dmemory);
        for (idx, cache) in l.enc.iter().zip(&enc.layers).rev() {
            let dh2 = self.ffn_backward(params, grads, idx.wi, idx.wo, &cache.ffn, &dx);
            dx = dx + self.norm_backward(grads, idx.ffn_norm, params, &cache.n2, &dh2);
            let (dq, dkv) = self.attention_backward(params, grads, idx.attn, &cache.attn, &dx);
            let dh1 = dq + dkv;
            dx = dx + self.norm_backward(grads, idx.attn_norm, params, &cache.n1, &dh1);
        }
        self.embed_backward(grads, &enc.src, &dx);
        Ok(losses)
    }

    fn embed_backward(&self, grads: &mut Blocks, tokens: &[TokenId], dx: &Array2<f64>) {
        let d = self.config.d_model;
        let table = &mut grads.at_mut(self.layout.embedding).data;
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut table[tok as usize * d..(tok as usize + 1) * d];
            for (g, v) in row.iter_mut().zip(dx.row(t)) {
                *g += v;
            }
        }
    }
}
