//! A small decoder-only transformer with per-head mask modes.
//!
//! Pre-norm residual blocks, GELU feed-forward, learned absolute positions,
//! f64 arithmetic throughout. Heads `[0, hierarchical_head_count)` of every
//! layer attend under the hierarchical mask; the remaining heads use the
//! plain causal mask. The backward pass is written by hand and is exact for
//! the forward computation; attention logits at disallowed positions never
//! receive gradient because they never enter the softmax.

pub mod checkpoint;
pub mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::{build_causal_mask, build_hierarchical_mask, AttentionMask};
use crate::normalize::AssemblyFunction;
use crate::objectives::Form;
use crate::tokenizer::{encode, Chunk, ChunkKind, TokenSequence, TokenizerConfig, Vocab, EOS_ID};
use linalg::{acc_at_b, acc_col_sums, add_assign, add_bias, matmul, matmul_bt, Mat};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {0} exceeds the model limit {1}")]
    SequenceTooLong(usize, usize),
    #[error("token id {0} is outside the vocabulary of size {1}")]
    TokenIdOutOfRange(u32, usize),
    #[error("invalid sampling parameters: {0}")]
    InvalidSamplingParams(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Architecture description; shipped inside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Heads [0, this) use the hierarchical mask; default is half.
    pub hierarchical_head_count: usize,
    /// Reuse the token embedding as the output projection.
    pub tied_output: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        Self {
            vocab_size,
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            max_seq_len: 2048,
            hierarchical_head_count: n_heads / 2,
            tied_output: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.hierarchical_head_count > self.n_heads {
            return Err(ModelError::BadConfig(format!(
                "hierarchical_head_count {} exceeds n_heads {}",
                self.hierarchical_head_count, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(ModelError::BadConfig("all sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// All weights of the model. Also used as the gradient container: gradients
/// have exactly the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// Output projection rows (vocab x d_model); absent when tied.
    pub w_out: Option<Mat>,
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols).map(|_| gauss(rng, std)).collect();
    Mat::from_vec(rows, cols, data)
}

impl ModelParams {
    /// Random initialization, deterministic per seed. Residual-out matrices
    /// are scaled down with depth.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("valid config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = rand_mat(&mut rng, config.vocab_size, d, std);
        let pos_emb = rand_mat(&mut rng, config.max_seq_len, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: rand_mat(&mut rng, d, d, std),
                bq: vec![0.0; d],
                wk: rand_mat(&mut rng, d, d, std),
                bk: vec![0.0; d],
                wv: rand_mat(&mut rng, d, d, std),
                bv: vec![0.0; d],
                wo: rand_mat(&mut rng, d, d, out_std),
                bo: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: rand_mat(&mut rng, config.d_ff, d, std),
                b1: vec![0.0; config.d_ff],
                w2: rand_mat(&mut rng, d, config.d_ff, out_std),
                b2: vec![0.0; d],
            })
            .collect();
        let lnf_g = vec![1.0; d];
        let lnf_b = vec![0.0; d];
        let w_out =
            (!config.tied_output).then(|| rand_mat(&mut rng, config.vocab_size, d, std));
        Self { config, tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out }
    }

    /// All-zero container of the same shapes; the gradient accumulator.
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let zl = |rows, cols| Mat::zeros(rows, cols);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: vec![0.0; d],
                ln1_b: vec![0.0; d],
                wq: zl(d, d),
                bq: vec![0.0; d],
                wk: zl(d, d),
                bk: vec![0.0; d],
                wv: zl(d, d),
                bv: vec![0.0; d],
                wo: zl(d, d),
                bo: vec![0.0; d],
                ln2_g: vec![0.0; d],
                ln2_b: vec![0.0; d],
                w1: zl(config.d_ff, d),
                b1: vec![0.0; config.d_ff],
                w2: zl(d, config.d_ff),
                b2: vec![0.0; d],
            })
            .collect();
        Self {
            config: config.clone(),
            tok_emb: zl(config.vocab_size, d),
            pos_emb: zl(config.max_seq_len, d),
            layers,
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            w_out: (!config.tied_output).then(|| zl(config.vocab_size, d)),
        }
    }

    /// Named flat views over every tensor, in a stable order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), &self.tok_emb.data),
            ("pos_emb".into(), &self.pos_emb.data),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named: [(&str, &[f64]); 16] = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq.data),
                ("bq", &l.bq),
                ("wk", &l.wk.data),
                ("bk", &l.bk),
                ("wv", &l.wv.data),
                ("bv", &l.bv),
                ("wo", &l.wo.data),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1.data),
                ("b1", &l.b1),
                ("w2", &l.w2.data),
                ("b2", &l.b2),
            ];
            for (name, slice) in named {
                out.push((format!("layers.{i}.{name}"), slice));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        if let Some(w) = &self.w_out {
            out.push(("w_out".into(), &w.data));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), &mut self.tok_emb.data[..]),
            ("pos_emb".into(), &mut self.pos_emb.data[..]),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let named: [(&str, &mut [f64]); 16] = [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq.data),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk.data),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv.data),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo.data),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1.data),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2.data),
                ("b2", &mut l.b2),
            ];
            for (name, slice) in named {
                out.push((format!("layers.{i}.{name}"), slice));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g[..]));
        out.push(("lnf_b".into(), &mut self.lnf_b[..]));
        if let Some(w) = self.w_out.as_mut() {
            out.push(("w_out".into(), &mut w.data[..]));
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        assert_eq!(mine.len(), theirs.len());
        for ((_, dst), (_, src)) in mine.iter_mut().zip(theirs.iter()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the config and every tensor, for determinism checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, tensor) in self.tensors() {
            h.update(name.as_bytes());
            for v in tensor {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn output_matrix(&self) -> &Mat {
        self.w_out.as_ref().unwrap_or(&self.tok_emb)
    }
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
    out: Mat,
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> LnCache {
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut inv_std = vec![0.0; x.rows];
    let m = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..x.cols {
            let xh = (row[c] - mu) * is;
            *xhat.at_mut(r, c) = xh;
            *out.at_mut(r, c) = gamma[c] * xh + beta[c];
        }
    }
    LnCache { xhat, inv_std, out }
}

/// Returns d_x; accumulates d_gamma/d_beta.
fn layer_norm_backward(
    cache: &LnCache,
    gamma: &[f64],
    d_out: &Mat,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Mat {
    let (n, m) = (cache.xhat.rows, cache.xhat.cols);
    let mut d_x = Mat::zeros(n, m);
    let mf = m as f64;
    for r in 0..n {
        let xhat = cache.xhat.row(r);
        let dout = d_out.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..m {
            let dxh = dout[c] * gamma[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[c];
            d_gamma[c] += dout[c] * xhat[c];
            d_beta[c] += dout[c];
        }
        mean_dxhat /= mf;
        mean_dxhat_xhat /= mf;
        let is = cache.inv_std[r];
        let drow = d_x.row_mut(r);
        for c in 0..m {
            let dxh = dout[c] * gamma[c];
            drow[c] = is * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    d_x
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul_bt(x, w);
    add_bias(&mut y, b);
    y
}

struct LayerCache {
    ln1: LnCache,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head attention probabilities (n x n each); zero at disallowed
    /// positions by construction.
    probs: Vec<Mat>,
    ctx: Mat,
    ln2: LnCache,
    ff_pre: Mat,
    ff_act: Mat,
}

/// Cached state of one forward run: enough to backprop or inspect attention.
pub struct ForwardPass {
    pub seq: TokenSequence,
    hier_mask: Option<AttentionMask>,
    causal_mask: Option<AttentionMask>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Post-final-norm hidden states (n x d_model).
    pub hidden: Mat,
    pub logits: Mat,
}

impl ForwardPass {
    pub fn n(&self) -> usize {
        self.seq.len()
    }

    /// The mask used by head `h`.
    pub fn mask_for_head(&self, h: usize, config: &ModelConfig) -> &AttentionMask {
        if h < config.hierarchical_head_count {
            self.hier_mask.as_ref().expect("hierarchical mask built")
        } else {
            self.causal_mask.as_ref().expect("causal mask built")
        }
    }

    /// Attention probabilities of (layer, head); rows are queries.
    pub fn attention_probs(&self, layer: usize, head: usize) -> &Mat {
        &self.layers[layer].probs[head]
    }
}

/// Runs the model over a token sequence, producing hidden states and logits
/// along with everything the backward pass needs.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<ForwardPass, ModelError> {
    let cfg = &params.config;
    let n = seq.len();
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    if n > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong(n, cfg.max_seq_len));
    }
    for &id in &seq.ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenIdOutOfRange(id, cfg.vocab_size));
        }
    }
    let hier_mask = (cfg.hierarchical_head_count > 0).then(|| build_hierarchical_mask(seq));
    let causal_mask =
        (cfg.hierarchical_head_count < cfg.n_heads || cfg.n_heads == 0).then(|| build_causal_mask(n));
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Mat::zeros(n, d);
    for i in 0..n {
        let tok = params.tok_emb.row(seq.ids[i] as usize);
        let pos = params.pos_emb.row(i);
        for (xv, (t, p)) in x.row_mut(i).iter_mut().zip(tok.iter().zip(pos)) {
            *xv = t + p;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let ln1 = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = linear(&ln1.out, &lp.wq, &lp.bq);
        let k = linear(&ln1.out, &lp.wk, &lp.bk);
        let v = linear(&ln1.out, &lp.wv, &lp.bv);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        let mut ctx = Mat::zeros(n, d);
        for h in 0..cfg.n_heads {
            let mask = if h < cfg.hierarchical_head_count {
                hier_mask.as_ref().expect("built")
            } else {
                causal_mask.as_ref().expect("built")
            };
            let off = h * dh;
            let mut p = Mat::zeros(n, n);
            for qi in 0..n {
                let qrow = &q.row(qi)[off..off + dh];
                // Scores only where the mask admits; softmax over that set.
                let mut maxv = f64::NEG_INFINITY;
                let mut scores: Vec<(usize, f64)> = Vec::new();
                for ki in 0..=qi {
                    if !mask.allowed(qi, ki) {
                        continue;
                    }
                    let krow = &k.row(ki)[off..off + dh];
                    let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    maxv = maxv.max(s);
                    scores.push((ki, s));
                }
                let mut z = 0.0;
                for (_, s) in scores.iter_mut() {
                    *s = (*s - maxv).exp();
                    z += *s;
                }
                let prow = p.row_mut(qi);
                for (ki, e) in scores {
                    prow[ki] = e / z;
                }
                let crow = &mut ctx.row_mut(qi)[off..off + dh];
                for ki in 0..=qi {
                    let w = p.at(qi, ki);
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &v.row(ki)[off..off + dh];
                    for (c, vv) in crow.iter_mut().zip(vrow) {
                        *c += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        let attn_out = linear(&ctx, &lp.wo, &lp.bo);
        add_assign(&mut x, &attn_out);
        let ln2 = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
        let ff_pre = linear(&ln2.out, &lp.w1, &lp.b1);
        let mut ff_act = ff_pre.clone();
        for vv in &mut ff_act.data {
            *vv = gelu(*vv);
        }
        let ff_out = linear(&ff_act, &lp.w2, &lp.b2);
        add_assign(&mut x, &ff_out);
        layers.push(LayerCache { ln1, q, k, v, probs, ctx, ln2, ff_pre, ff_act });
    }
    let lnf = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let hidden = lnf.out.clone();
    let logits = matmul_bt(&hidden, params.output_matrix());
    Ok(ForwardPass {
        seq: seq.clone(),
        hier_mask,
        causal_mask,
        layers,
        lnf,
        hidden,
        logits,
    })
}

/// Exact gradients of the forward computation.
///
/// `d_logits` is the upstream gradient on the logits (n x vocab); `d_hidden`
/// an optional additional gradient on the post-norm hidden states (n x
/// d_model), used by embedding-based objectives. Either may be absent.
pub fn backward(
    params: &ModelParams,
    pass: &ForwardPass,
    d_logits: Option<&Mat>,
    d_hidden: Option<&Mat>,
) -> ModelParams {
    let cfg = &params.config;
    let n = pass.n();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = ModelParams::zeros_like(cfg);

    let mut d_hid = Mat::zeros(n, d);
    if let Some(dl) = d_logits {
        assert_eq!(dl.rows, n);
        assert_eq!(dl.cols, cfg.vocab_size);
        let w = params.output_matrix();
        // d_hidden += d_logits @ W; dW += d_logits^T @ hidden
        let dm = matmul(dl, w);
        add_assign(&mut d_hid, &dm);
        let gw = match &mut grads.w_out {
            Some(gw) => gw,
            None => &mut grads.tok_emb,
        };
        acc_at_b(gw, dl, &pass.hidden);
    }
    if let Some(dh_extra) = d_hidden {
        assert_eq!(dh_extra.rows, n);
        assert_eq!(dh_extra.cols, d);
        add_assign(&mut d_hid, dh_extra);
    }

    let mut d_x =
        layer_norm_backward(&pass.lnf, &params.lnf_g, &d_hid, &mut grads.lnf_g, &mut grads.lnf_b);

    for (li, (lp, cache)) in params.layers.iter().zip(&pass.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];
        // Feed-forward block.
        let d_ff_out = d_x.clone(); // residual: d_x also flows to x_mid.
        let mut d_ff_act = matmul(&d_ff_out, &lp.w2);
        acc_at_b(&mut gl.w2, &d_ff_out, &cache.ff_act);
        acc_col_sums(&mut gl.b2, &d_ff_out);
        for (dv, pre) in d_ff_act.data.iter_mut().zip(&cache.ff_pre.data) {
            *dv *= gelu_grad(*pre);
        }
        let d_ln2out = matmul(&d_ff_act, &lp.w1);
        acc_at_b(&mut gl.w1, &d_ff_act, &cache.ln2.out);
        acc_col_sums(&mut gl.b1, &d_ff_act);
        let d_ln2in = layer_norm_backward(&cache.ln2, &lp.ln2_g, &d_ln2out, &mut gl.ln2_g, &mut gl.ln2_b);
        let mut d_x_mid = d_x; // residual path
        add_assign(&mut d_x_mid, &d_ln2in);

        // Attention block.
        let d_attn_out = d_x_mid.clone();
        let d_ctx_full = matmul(&d_attn_out, &lp.wo);
        acc_at_b(&mut gl.wo, &d_attn_out, &cache.ctx);
        acc_col_sums(&mut gl.bo, &d_attn_out);

        let mut d_q = Mat::zeros(n, d);
        let mut d_k = Mat::zeros(n, d);
        let mut d_v = Mat::zeros(n, d);
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let p = &cache.probs[h];
            for qi in 0..n {
                let d_ctx_row = &d_ctx_full.row(qi)[off..off + dh];
                // d_probs and d_v from ctx = probs @ v.
                let prow = p.row(qi);
                let mut d_p: Vec<(usize, f64)> = Vec::new();
                let mut dot_pdp = 0.0;
                for ki in 0..=qi {
                    let w = prow[ki];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &cache.v.row(ki)[off..off + dh];
                    let dp: f64 = d_ctx_row.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    {
                        let dvrow = &mut d_v.row_mut(ki)[off..off + dh];
                        for (dv, dc) in dvrow.iter_mut().zip(d_ctx_row) {
                            *dv += w * dc;
                        }
                    }
                    dot_pdp += w * dp;
                    d_p.push((ki, dp));
                }
                // Softmax backward over the admitted set.
                let qrow = &cache.q.row(qi)[off..off + dh];
                for (ki, dp) in d_p {
                    let ds = prow[ki] * (dp - dot_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &cache.k.row(ki)[off..off + dh];
                    {
                        let dqrow = &mut d_q.row_mut(qi)[off..off + dh];
                        for (dq, kv) in dqrow.iter_mut().zip(krow) {
                            *dq += ds * kv;
                        }
                    }
                    let dkrow = &mut d_k.row_mut(ki)[off..off + dh];
                    for (dk, qv) in dkrow.iter_mut().zip(qrow) {
                        *dk += ds * qv;
                    }
                }
            }
        }
        let mut d_ln1out = matmul(&d_q, &lp.wq);
        add_assign(&mut d_ln1out, &matmul(&d_k, &lp.wk));
        add_assign(&mut d_ln1out, &matmul(&d_v, &lp.wv));
        acc_at_b(&mut gl.wq, &d_q, &cache.ln1.out);
        acc_col_sums(&mut gl.bq, &d_q);
        acc_at_b(&mut gl.wk, &d_k, &cache.ln1.out);
        acc_col_sums(&mut gl.bk, &d_k);
        acc_at_b(&mut gl.wv, &d_v, &cache.ln1.out);
        acc_col_sums(&mut gl.bv, &d_v);
        let d_ln1in =
            layer_norm_backward(&cache.ln1, &lp.ln1_g, &d_ln1out, &mut gl.ln1_g, &mut gl.ln1_b);
        add_assign(&mut d_x_mid, &d_ln1in);
        d_x = d_x_mid;
    }

    for i in 0..n {
        let id = pass.seq.ids[i] as usize;
        let row = d_x.row(i).to_vec();
        for (g, v) in grads.tok_emb.row_mut(id).iter_mut().zip(&row) {
            *g += v;
        }
        for (g, v) in grads.pos_emb.row_mut(i).iter_mut().zip(&row) {
            *g += v;
        }
    }
    grads
}

/// Function embedding with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_id: String,
    pub form: Form,
}

/// Mean of selected hidden rows.
pub fn mean_rows(hidden: &Mat, positions: &[usize]) -> Vec<f64> {
    assert!(!positions.is_empty());
    let mut out = vec![0.0; hidden.cols];
    for &p in positions {
        for (o, v) in out.iter_mut().zip(hidden.row(p)) {
            *o += v;
        }
    }
    let inv = 1.0 / positions.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// Embedding of an assembly function: mean of the last-layer hidden states
/// at its `[INST-k]` label positions.
pub fn embed_assembly(
    params: &ModelParams,
    vocab: &Vocab,
    tok_cfg: &TokenizerConfig,
    f: &AssemblyFunction,
) -> Result<EmbeddingVector, ModelError> {
    let seq = encode(&[Chunk::Asm(f.clone())], vocab, tok_cfg)?;
    let pass = forward(params, &seq)?;
    let labels = seq.label_positions();
    Ok(EmbeddingVector {
        values: mean_rows(&pass.hidden, &labels),
        source_id: f.source_id.clone(),
        form: Form::Asm(f.opt_level),
    })
}

/// Embedding of a source function: mean of the last-layer hidden states over
/// all source tokens (BOS excluded).
pub fn embed_source(
    params: &ModelParams,
    vocab: &Vocab,
    tok_cfg: &TokenizerConfig,
    source_id: &str,
    text: &str,
) -> Result<EmbeddingVector, ModelError> {
    let seq = encode(&[Chunk::Source(text.to_string())], vocab, tok_cfg)?;
    if seq.len() <= 1 {
        return Err(ModelError::EmptyInput);
    }
    let pass = forward(params, &seq)?;
    let positions: Vec<usize> = (1..seq.len()).collect();
    Ok(EmbeddingVector {
        values: mean_rows(&pass.hidden, &positions),
        source_id: source_id.to_string(),
        form: Form::Source,
    })
}

/// Positions whose meta marks them as source-chunk tokens.
pub fn source_positions(seq: &TokenSequence) -> Vec<usize> {
    seq.meta
        .iter()
        .enumerate()
        .filter(|(_, m)| matches!(m.chunk_kind, ChunkKind::Source))
        .map(|(i, _)| i)
        .collect()
}

/// Nucleus sampling parameters.
#[derive(Debug, Clone)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.2, top_p: 0.95, n_samples: 20, max_new: 64, seed: 0 }
    }
}

/// Draws `n_samples` continuations of the prompt with nucleus sampling:
/// the smallest probability-sorted prefix reaching `top_p` is kept and
/// renormalized. Generation stops at EOS (dropped from the output) or after
/// `max_new` tokens. Deterministic for a fixed seed.
pub fn generate(
    params: &ModelParams,
    prompt: &TokenSequence,
    sp: &SamplingParams,
) -> Result<Vec<Vec<u32>>, ModelError> {
    if !(sp.temperature > 0.0) {
        return Err(ModelError::InvalidSamplingParams(format!(
            "temperature must be > 0, got {}",
            sp.temperature
        )));
    }
    if !(sp.top_p > 0.0 && sp.top_p <= 1.0) {
        return Err(ModelError::InvalidSamplingParams(format!(
            "top_p must be in (0, 1], got {}",
            sp.top_p
        )));
    }
    let mut out = Vec::with_capacity(sp.n_samples);
    for s in 0..sp.n_samples {
        let mut rng =
            ChaCha8Rng::seed_from_u64(sp.seed.wrapping_add((s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut seq = prompt.clone();
        let gen_chunk = seq.meta.last().map_or(1, |m| m.chunk_index + 1);
        let mut sample = Vec::new();
        for _ in 0..sp.max_new {
            if seq.len() >= params.config.max_seq_len {
                break;
            }
            let pass = forward(params, &seq)?;
            let row = pass.logits.row(pass.n() - 1);
            let id = sample_nucleus(row, sp.temperature, sp.top_p, &mut rng);
            if id == EOS_ID {
                break;
            }
            sample.push(id);
            seq.append_generated(id, gen_chunk);
        }
        out.push(sample);
    }
    Ok(out)
}

/// Greedy (argmax) decoding; the zero-temperature limit of `generate`.
pub fn generate_greedy(
    params: &ModelParams,
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut seq = prompt.clone();
    let gen_chunk = seq.meta.last().map_or(1, |m| m.chunk_index + 1);
    let mut sample = Vec::new();
    for _ in 0..max_new {
        if seq.len() >= params.config.max_seq_len {
            break;
        }
        let pass = forward(params, &seq)?;
        let row = pass.logits.row(pass.n() - 1);
        let id = argmax(row) as u32;
        if id == EOS_ID {
            break;
        }
        sample.push(id);
        seq.append_generated(id, gen_chunk);
    }
    Ok(sample)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_nucleus(logits: &[f64], temperature: f64, top_p: f64, rng: &mut ChaCha8Rng) -> u32 {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, ((l - maxv) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut probs {
        *p /= z;
    }
    // Sort descending by probability, index as the deterministic tiebreak.
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut kept = 0usize;
    let mut mass = 0.0;
    for (i, (_, p)) in probs.iter().enumerate() {
        mass += p;
        kept = i + 1;
        if mass >= top_p {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let total: f64 = nucleus.iter().map(|(_, p)| p).sum();
    let mut dart = rng.random::<f64>() * total;
    for (i, p) in nucleus {
        dart -= p;
        if dart <= 0.0 {
            return *i as u32;
        }
    }
    nucleus.last().expect("nonempty nucleus").0 as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::normalize::OptLevel;
    use crate::tokenizer::{build_vocab, TokenizerConfig};

    fn setup() -> (Vec<crate::corpus::FunctionRecord>, Vocab, TokenizerConfig) {
        let recs = generate_synthetic(&SyntheticSpec::new(5, 4, 8)).unwrap();
        let cfg = TokenizerConfig { max_instructions: 16, max_seq_len: 128, ..Default::default() };
        let vocab = build_vocab(&recs, &cfg).unwrap();
        (recs, vocab, cfg)
    }

    fn tiny_config(vocab: &Vocab, hier: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 128,
            hierarchical_head_count: hier,
            tied_output: false,
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 1);
        let f = recs[0].asm[&OptLevel::O0].clone();
        let seq = encode(&[Chunk::Asm(f)], &vocab, &cfg).unwrap();
        let a = forward(&params, &seq).unwrap();
        let b = forward(&params, &seq).unwrap();
        assert!(a.logits.is_finite());
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn attention_rows_sum_to_one_and_masked_probs_are_zero() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 2);
        let f = recs[1].asm[&OptLevel::O2].clone();
        let seq = encode(&[Chunk::Source(recs[1].source_text.clone()), Chunk::Asm(f)], &vocab, &cfg)
            .unwrap();
        let pass = forward(&params, &seq).unwrap();
        for layer in 0..2 {
            for head in 0..4 {
                let p = pass.attention_probs(layer, head);
                let mask = pass.mask_for_head(head, &params.config);
                for q in 0..seq.len() {
                    let mut sum = 0.0;
                    for k in 0..seq.len() {
                        let v = p.at(q, k);
                        sum += v;
                        if !mask.allowed(q, k) {
                            assert_eq!(v, 0.0, "leak at l{layer} h{head} ({q},{k})");
                        }
                    }
                    assert!((sum - 1.0).abs() < 1e-9, "row {q} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn zero_hierarchical_heads_match_pure_causal_model() {
        let (recs, vocab, cfg) = setup();
        let p0 = ModelParams::init(tiny_config(&vocab, 0), 3);
        // Same weights, different head split.
        let mut p2 = p0.clone();
        p2.config.hierarchical_head_count = 2;
        let src = Chunk::Source(recs[2].source_text.clone());
        let seq = encode(&[src], &vocab, &cfg).unwrap();
        // Pure text: masks coincide, so outputs must be bit-identical.
        let a = forward(&p0, &seq).unwrap();
        let b = forward(&p2, &seq).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
        // Assembly input: only the hierarchical_head_count=0 model equals
        // the causal reference (which it is, by construction).
        let f = recs[2].asm[&OptLevel::O0].clone();
        let seq = encode(&[Chunk::Asm(f)], &vocab, &cfg).unwrap();
        let c = forward(&p0, &seq).unwrap();
        let d = forward(&p2, &seq).unwrap();
        assert_ne!(c.logits.data, d.logits.data);
    }

    #[test]
    fn sequence_too_long_is_rejected() {
        let (_, vocab, _) = setup();
        let mut config = tiny_config(&vocab, 2);
        config.max_seq_len = 4;
        let params = ModelParams::init(config, 1);
        let cfg = TokenizerConfig { max_seq_len: 64, ..Default::default() };
        let seq = encode(&[Chunk::Text("a b c d e f".into())], &vocab, &cfg).unwrap();
        assert!(matches!(
            forward(&params, &seq),
            Err(ModelError::SequenceTooLong(7, 4))
        ));
    }

    #[test]
    fn embed_assembly_is_mean_of_label_rows() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 4);
        let f = recs[0].asm[&OptLevel::O1].clone();
        let emb = embed_assembly(&params, &vocab, &cfg, &f).unwrap();
        let seq = encode(&[Chunk::Asm(f.clone())], &vocab, &cfg).unwrap();
        let pass = forward(&params, &seq).unwrap();
        let labels = seq.label_positions();
        let manual = mean_rows(&pass.hidden, &labels);
        assert_eq!(emb.values, manual);
        // One-instruction function: embedding equals the single label row.
        let one = AssemblyFunction {
            source_id: "one".into(),
            opt_level: OptLevel::O0,
            instructions: vec![f.instructions[0].clone()],
        };
        let emb1 = embed_assembly(&params, &vocab, &cfg, &one).unwrap();
        let seq1 = encode(&[Chunk::Asm(one)], &vocab, &cfg).unwrap();
        let pass1 = forward(&params, &seq1).unwrap();
        let lab = seq1.label_positions()[0];
        assert_eq!(emb1.values, pass1.hidden.row(lab).to_vec());
    }

    #[test]
    fn trailing_padding_does_not_change_label_states() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 4);
        let f = recs[3].asm[&OptLevel::O0].clone();
        let seq = encode(&[Chunk::Asm(f)], &vocab, &cfg).unwrap();
        let mut padded = seq.clone();
        padded.append_eos();
        for _ in 0..3 {
            let ci = padded.meta.last().unwrap().chunk_index;
            padded.push(crate::tokenizer::PAD_ID, crate::tokenizer::TokenMeta {
                chunk_index: ci,
                chunk_kind: ChunkKind::Text,
                instr_index: 0,
                is_inst_label: false,
            });
        }
        let a = forward(&params, &seq).unwrap();
        let b = forward(&params, &padded).unwrap();
        for &p in &seq.label_positions() {
            assert_eq!(a.hidden.row(p), b.hidden.row(p));
        }
    }

    #[test]
    fn embed_source_excludes_bos_and_rejects_empty() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 5);
        let text = recs[0].source_text.clone();
        let emb = embed_source(&params, &vocab, &cfg, "f0", &text).unwrap();
        let seq = encode(&[Chunk::Source(text)], &vocab, &cfg).unwrap();
        let pass = forward(&params, &seq).unwrap();
        let positions: Vec<usize> = (1..seq.len()).collect();
        assert_eq!(emb.values, mean_rows(&pass.hidden, &positions));
        assert!(matches!(
            embed_source(&params, &vocab, &cfg, "e", "   "),
            Err(ModelError::EmptyInput)
        ));
    }

    #[test]
    fn near_zero_temperature_matches_greedy() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 6);
        let seq = encode(&[Chunk::Source(recs[0].source_text.clone())], &vocab, &cfg).unwrap();
        let greedy = generate_greedy(&params, &seq, 8).unwrap();
        let sp = SamplingParams { temperature: 1e-6, top_p: 1.0, n_samples: 2, max_new: 8, seed: 9 };
        let sampled = generate(&params, &seq, &sp).unwrap();
        assert_eq!(sampled[0], greedy);
        assert_eq!(sampled[1], greedy);
    }

    #[test]
    fn same_seed_same_samples() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 7);
        let seq = encode(&[Chunk::Source(recs[1].source_text.clone())], &vocab, &cfg).unwrap();
        let sp = SamplingParams { temperature: 0.8, top_p: 0.9, n_samples: 3, max_new: 12, seed: 1234 };
        let a = generate(&params, &seq, &sp).unwrap();
        let b = generate(&params, &seq, &sp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_sampling_params_are_rejected() {
        let (recs, vocab, cfg) = setup();
        let params = ModelParams::init(tiny_config(&vocab, 2), 8);
        let seq = encode(&[Chunk::Source(recs[0].source_text.clone())], &vocab, &cfg).unwrap();
        for sp in [
            SamplingParams { temperature: 0.0, ..Default::default() },
            SamplingParams { top_p: 0.0, ..Default::default() },
            SamplingParams { top_p: 1.5, ..Default::default() },
        ] {
            assert!(matches!(
                generate(&params, &seq, &sp),
                Err(ModelError::InvalidSamplingParams(_))
            ));
        }
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let (_, vocab, _) = setup();
        let a = ModelParams::init(tiny_config(&vocab, 2), 11);
        let b = ModelParams::init(tiny_config(&vocab, 2), 11);
        let c = ModelParams::init(tiny_config(&vocab, 2), 12);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
