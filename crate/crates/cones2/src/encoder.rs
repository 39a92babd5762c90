//! Small bidirectional transformer encoder mapping a tokenized prompt to
//! per-token embeddings. Pad positions are excluded from attention and the
//! output rows beyond the prompt length are replaced by the raw pad
//! embedding, so embeddings of valid positions never depend on the pad
//! region.

use crate::autodiff::{Graph, NodeId};
use crate::params::{ParamNodes, Params};
use crate::tensor::Tensor;
use crate::text::{TokenizedPrompt, PAD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_text: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { vocab_size: 0, context_len: 16, d_text: 64, n_layers: 2, n_heads: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub params: Params,
}

/// Per-token output of the encoder.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    /// context_len x d_text
    pub vectors: Tensor,
    /// Valid token count; rows at and beyond this index hold the pad
    /// embedding.
    pub length: usize,
    pub prompt: TokenizedPrompt,
}

impl EncoderParams {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        assert!(cfg.d_text % cfg.n_heads == 0, "d_text must split across heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = cfg.d_text;
        let xavier = (2.0 / (d + d) as f64).sqrt();
        p.insert("tok_table", Tensor::randn(&[cfg.vocab_size, d], 0.02, &mut rng));
        p.insert("pos_table", Tensor::randn(&[cfg.context_len, d], 0.02, &mut rng));
        for l in 0..cfg.n_layers {
            let pre = format!("layer{l}");
            p.insert(&format!("{pre}.ln1.gamma"), Tensor::full(&[d], 1.0));
            p.insert(&format!("{pre}.ln1.beta"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(&format!("{pre}.{w}"), Tensor::randn(&[d, d], xavier, &mut rng));
                p.insert(&format!("{pre}.{w}_b"), Tensor::zeros(&[d]));
            }
            p.insert(&format!("{pre}.ln2.gamma"), Tensor::full(&[d], 1.0));
            p.insert(&format!("{pre}.ln2.beta"), Tensor::zeros(&[d]));
            let xf = (2.0 / (d + 4 * d) as f64).sqrt();
            p.insert(&format!("{pre}.ffn.w1"), Tensor::randn(&[d, 4 * d], xf, &mut rng));
            p.insert(&format!("{pre}.ffn.b1"), Tensor::zeros(&[4 * d]));
            p.insert(&format!("{pre}.ffn.w2"), Tensor::randn(&[4 * d, d], xf, &mut rng));
            p.insert(&format!("{pre}.ffn.b2"), Tensor::zeros(&[d]));
        }
        p.insert("final_ln.gamma", Tensor::full(&[d], 1.0));
        p.insert("final_ln.beta", Tensor::zeros(&[d]));
        EncoderParams { cfg, params: p }
    }

    /// Deep, independent copy.
    pub fn clone_params(&self) -> Self {
        self.clone()
    }
}

/// Builds the encoder forward pass on `g`, sharing parameter leaves
/// through `pn`. Returns the (context_len x d_text) output node.
pub fn encode_nodes(
    g: &mut Graph,
    pn: &mut ParamNodes,
    enc: &EncoderParams,
    prompt: &TokenizedPrompt,
) -> NodeId {
    let cfg = &enc.cfg;
    let params = &enc.params;
    let l = cfg.context_len;
    let (d, heads) = (cfg.d_text, cfg.n_heads);
    let dh = d / heads;
    assert_eq!(prompt.ids.len(), l, "prompt tokenized for a different context length");

    let tok_table = pn.node(g, params, "tok_table");
    let pos_table = pn.node(g, params, "pos_table");
    let tok = g.gather_rows(tok_table, &prompt.ids);
    let mut x = g.add(tok, pos_table);

    // keys at pad positions are masked out for every query
    let mut mask = Tensor::zeros(&[l, l]);
    for q in 0..l {
        for k in prompt.length..l {
            mask.set2(q, k, MASK_NEG);
        }
    }
    let mask = g.constant(mask);

    let scale = 1.0 / (dh as f64).sqrt();
    for li in 0..cfg.n_layers {
        let pre = format!("layer{li}");
        let ln1g = pn.node(g, params, &format!("{pre}.ln1.gamma"));
        let ln1b = pn.node(g, params, &format!("{pre}.ln1.beta"));
        let h = g.layer_norm(x, ln1g, ln1b);
        let wq = pn.node(g, params, &format!("{pre}.wq"));
        let bq = pn.node(g, params, &format!("{pre}.wq_b"));
        let wk = pn.node(g, params, &format!("{pre}.wk"));
        let bk = pn.node(g, params, &format!("{pre}.wk_b"));
        let wv = pn.node(g, params, &format!("{pre}.wv"));
        let bv = pn.node(g, params, &format!("{pre}.wv_b"));
        let q_all = g.matmul(h, wq);
        let q_all = g.add_bias_row(q_all, bq);
        let k_all = g.matmul(h, wk);
        let k_all = g.add_bias_row(k_all, bk);
        let v_all = g.matmul(h, wv);
        let v_all = g.add_bias_row(v_all, bv);
        let mut head_outs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let (a, b) = (hi * dh, (hi + 1) * dh);
            let qh = g.slice_cols(q_all, a, b);
            let kh = g.slice_cols(k_all, a, b);
            let vh = g.slice_cols(v_all, a, b);
            let logits = g.matmul_nt(qh, kh);
            let logits = g.scale(logits, scale);
            let logits = g.add(logits, mask);
            let w = g.softmax_rows(logits);
            head_outs.push(g.matmul(w, vh));
        }
        let mut attn = head_outs[0];
        for ho in &head_outs[1..] {
            attn = g.concat_cols(attn, *ho);
        }
        let wo = pn.node(g, params, &format!("{pre}.wo"));
        let bo = pn.node(g, params, &format!("{pre}.wo_b"));
        let attn = g.matmul(attn, wo);
        let attn = g.add_bias_row(attn, bo);
        x = g.add(x, attn);

        let ln2g = pn.node(g, params, &format!("{pre}.ln2.gamma"));
        let ln2b = pn.node(g, params, &format!("{pre}.ln2.beta"));
        let h2 = g.layer_norm(x, ln2g, ln2b);
        let w1 = pn.node(g, params, &format!("{pre}.ffn.w1"));
        let b1 = pn.node(g, params, &format!("{pre}.ffn.b1"));
        let w2 = pn.node(g, params, &format!("{pre}.ffn.w2"));
        let b2 = pn.node(g, params, &format!("{pre}.ffn.b2"));
        let f = g.matmul(h2, w1);
        let f = g.add_bias_row(f, b1);
        let f = g.silu(f);
        let f = g.matmul(f, w2);
        let f = g.add_bias_row(f, b2);
        x = g.add(x, f);
    }
    let fg = pn.node(g, params, "final_ln.gamma");
    let fb = pn.node(g, params, "final_ln.beta");
    x = g.layer_norm(x, fg, fb);

    // rows past the prompt revert to the raw pad embedding
    let pad_row = g.gather_rows(tok_table, &[PAD]);
    g.pad_override(x, pad_row, prompt.length)
}

/// Inference-path encoding.
pub fn encode(enc: &EncoderParams, prompt: &TokenizedPrompt) -> EmbeddingSequence {
    let mut g = Graph::new();
    let mut pn = ParamNodes::new(false);
    let out = encode_nodes(&mut g, &mut pn, enc, prompt);
    EmbeddingSequence {
        vectors: g.value(out).clone(),
        length: prompt.length,
        prompt: prompt.clone(),
    }
}
