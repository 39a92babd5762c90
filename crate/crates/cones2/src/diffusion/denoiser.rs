//! Noise-prediction network: a small two-resolution U-shaped convnet with
//! one cross-attention layer per resolution. Cross-attention logits can be
//! intercepted by an editor callback, which is how layout guidance is
//! injected at sampling time.

use crate::autodiff::{Graph, NodeId};
use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::params::{ParamNodes, Params};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_heads: usize,
    pub d_text: usize,
    pub groups: usize,
    /// Training step count of the matching schedule; normalizes the
    /// timestep features.
    pub t_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 3,
            image_size: 16,
            channels: 64,
            n_heads: 2,
            d_text: 64,
            groups: 8,
            t_max: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    pub params: Params,
}

/// Attention state captured at one cross-attention layer.
#[derive(Debug, Clone)]
pub struct CrossAttentionRecord {
    pub layer: usize,
    pub resolution: (usize, usize),
    pub timestep: usize,
    /// Pre-softmax logits per head, (h*w) x L, after any editing.
    pub logits: Vec<Tensor>,
    /// Post-softmax weights per head, (h*w) x L.
    pub weights: Vec<Tensor>,
}

/// Identifies the call site an editor is invoked from.
#[derive(Debug, Clone, Copy)]
pub struct AttnContext {
    pub layer: usize,
    pub resolution: (usize, usize),
    pub head: usize,
    pub timestep: usize,
}

/// Maps pre-softmax logits to replacement logits of the same shape.
pub type AttnEditor<'a> = &'a dyn Fn(&AttnContext, &Tensor) -> Tensor;

impl DenoiserParams {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Self {
        assert!(cfg.image_size % 2 == 0, "image size must be even");
        assert!(cfg.channels % cfg.groups == 0);
        assert!(cfg.channels % cfg.n_heads == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let c = cfg.channels;
        let kaiming = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        p.insert("time.w1", Tensor::randn(&[c, c], kaiming(c), &mut rng));
        p.insert("time.b1", Tensor::zeros(&[c]));
        p.insert("time.w2", Tensor::randn(&[c, c], kaiming(c), &mut rng));
        p.insert("time.b2", Tensor::zeros(&[c]));

        p.insert(
            "conv_in.w",
            Tensor::randn(&[c, cfg.in_channels, 3, 3], kaiming(cfg.in_channels * 9), &mut rng),
        );
        p.insert("conv_in.b", Tensor::zeros(&[c]));

        for (name, cin) in [("res1", c), ("res1b", c), ("res2", c), ("res3", c), ("res4", 2 * c)] {
            p.insert(&format!("{name}.gn1.gamma"), Tensor::full(&[cin], 1.0));
            p.insert(&format!("{name}.gn1.beta"), Tensor::zeros(&[cin]));
            p.insert(
                &format!("{name}.conv1.w"),
                Tensor::randn(&[c, cin, 3, 3], kaiming(cin * 9), &mut rng),
            );
            p.insert(&format!("{name}.conv1.b"), Tensor::zeros(&[c]));
            p.insert(&format!("{name}.temb.w"), Tensor::randn(&[c, c], kaiming(c), &mut rng));
            p.insert(&format!("{name}.temb.b"), Tensor::zeros(&[c]));
            p.insert(&format!("{name}.gn2.gamma"), Tensor::full(&[c], 1.0));
            p.insert(&format!("{name}.gn2.beta"), Tensor::zeros(&[c]));
            // second conv starts at zero so each block begins as identity
            p.insert(&format!("{name}.conv2.w"), Tensor::zeros(&[c, c, 3, 3]));
            p.insert(&format!("{name}.conv2.b"), Tensor::zeros(&[c]));
            if cin != c {
                p.insert(&format!("{name}.skip.w"), Tensor::randn(&[cin, c], kaiming(cin), &mut rng));
                p.insert(&format!("{name}.skip.b"), Tensor::zeros(&[c]));
            }
        }

        for name in ["attn1", "attn2"] {
            p.insert(&format!("{name}.gn.gamma"), Tensor::full(&[c], 1.0));
            p.insert(&format!("{name}.gn.beta"), Tensor::zeros(&[c]));
            p.insert(&format!("{name}.wq"), Tensor::randn(&[c, c], kaiming(c), &mut rng));
            p.insert(&format!("{name}.bq"), Tensor::zeros(&[c]));
            p.insert(&format!("{name}.wk"), Tensor::randn(&[cfg.d_text, c], kaiming(cfg.d_text), &mut rng));
            p.insert(&format!("{name}.bk"), Tensor::zeros(&[c]));
            p.insert(&format!("{name}.wv"), Tensor::randn(&[cfg.d_text, c], kaiming(cfg.d_text), &mut rng));
            p.insert(&format!("{name}.bv"), Tensor::zeros(&[c]));
            p.insert(&format!("{name}.wo"), Tensor::zeros(&[c, c]));
            p.insert(&format!("{name}.bo"), Tensor::zeros(&[c]));
        }

        p.insert("out.gn.gamma", Tensor::full(&[c], 1.0));
        p.insert("out.gn.beta", Tensor::zeros(&[c]));
        p.insert("out.conv.w", Tensor::zeros(&[cfg.in_channels, c, 3, 3]));
        p.insert("out.conv.b", Tensor::zeros(&[cfg.in_channels]));

        DenoiserParams { cfg, params: p }
    }

    /// Cross-attention layers and their spatial resolutions, in forward
    /// order. Guidance masks are rasterized once per entry.
    pub fn attention_resolutions(&self) -> Vec<(usize, (usize, usize))> {
        let s = self.cfg.image_size;
        vec![(0, (s, s)), (1, (s / 2, s / 2))]
    }
}

fn sinusoidal_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(&[1, dim], v)
}

struct BlockCtx<'a> {
    dn: &'a DenoiserParams,
    editor: Option<AttnEditor<'a>>,
    timestep: usize,
    collect: bool,
    records: Vec<CrossAttentionRecord>,
}

fn res_block(
    g: &mut Graph,
    pn: &mut ParamNodes,
    dn: &DenoiserParams,
    name: &str,
    x: NodeId,
    temb: NodeId,
) -> NodeId {
    let p = &dn.params;
    let groups = dn.cfg.groups;
    let shape = g.value(x).shape().to_vec();
    let (cin, h, w) = (shape[0], shape[1], shape[2]);
    let cout = dn.cfg.channels;

    let g1g = pn.node(g, p, &format!("{name}.gn1.gamma"));
    let g1b = pn.node(g, p, &format!("{name}.gn1.beta"));
    let mut hid = g.group_norm(x, groups, g1g, g1b);
    hid = g.silu(hid);
    let c1w = pn.node(g, p, &format!("{name}.conv1.w"));
    let c1b = pn.node(g, p, &format!("{name}.conv1.b"));
    hid = g.conv2d_3x3(hid, c1w, c1b);

    let tw = pn.node(g, p, &format!("{name}.temb.w"));
    let tb = pn.node(g, p, &format!("{name}.temb.b"));
    let tproj = g.matmul(temb, tw);
    let tproj = g.add_bias_row(tproj, tb);
    hid = g.add_channel_bias(hid, tproj);

    let g2g = pn.node(g, p, &format!("{name}.gn2.gamma"));
    let g2b = pn.node(g, p, &format!("{name}.gn2.beta"));
    hid = g.group_norm(hid, groups, g2g, g2b);
    hid = g.silu(hid);
    let c2w = pn.node(g, p, &format!("{name}.conv2.w"));
    let c2b = pn.node(g, p, &format!("{name}.conv2.b"));
    hid = g.conv2d_3x3(hid, c2w, c2b);

    let skip = if cin == cout {
        x
    } else {
        // 1x1 projection via per-position matmul
        let sw = pn.node(g, p, &format!("{name}.skip.w"));
        let sb = pn.node(g, p, &format!("{name}.skip.b"));
        let flat = g.spatial_flatten(x);
        let proj = g.matmul(flat, sw);
        let proj = g.add_bias_row(proj, sb);
        g.spatial_unflatten(proj, cout, h, w)
    };
    g.add(skip, hid)
}

fn cross_attn_block(
    g: &mut Graph,
    pn: &mut ParamNodes,
    ctx: &mut BlockCtx<'_>,
    name: &str,
    layer: usize,
    x: NodeId,
    emb: NodeId,
) -> Result<NodeId> {
    let dn = ctx.dn;
    let p = &dn.params;
    let shape = g.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let heads = dn.cfg.n_heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let gg = pn.node(g, p, &format!("{name}.gn.gamma"));
    let gb = pn.node(g, p, &format!("{name}.gn.beta"));
    let hn = g.group_norm(x, dn.cfg.groups, gg, gb);
    let flat = g.spatial_flatten(hn);
    let wq = pn.node(g, p, &format!("{name}.wq"));
    let bq = pn.node(g, p, &format!("{name}.bq"));
    let wk = pn.node(g, p, &format!("{name}.wk"));
    let bk = pn.node(g, p, &format!("{name}.bk"));
    let wv = pn.node(g, p, &format!("{name}.wv"));
    let bv = pn.node(g, p, &format!("{name}.bv"));
    let q = g.matmul(flat, wq);
    let q = g.add_bias_row(q, bq);
    let k = g.matmul(emb, wk);
    let k = g.add_bias_row(k, bk);
    let v = g.matmul(emb, wv);
    let v = g.add_bias_row(v, bv);

    let mut rec = CrossAttentionRecord {
        layer,
        resolution: (h, w),
        timestep: ctx.timestep,
        logits: Vec::new(),
        weights: Vec::new(),
    };
    let mut head_outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let (a, b) = (hi * dh, (hi + 1) * dh);
        let qh = g.slice_cols(q, a, b);
        let kh = g.slice_cols(k, a, b);
        let vh = g.slice_cols(v, a, b);
        let logits = g.matmul_nt(qh, kh);
        let mut logits = g.scale(logits, scale);
        if let Some(editor) = ctx.editor {
            let actx = AttnContext {
                layer,
                resolution: (h, w),
                head: hi,
                timestep: ctx.timestep,
            };
            let before = g.value(logits);
            let edited = editor(&actx, before);
            if edited.shape() != before.shape() {
                return Err(Error::EditorShape {
                    expected: before.shape().to_vec(),
                    got: edited.shape().to_vec(),
                });
            }
            logits = g.constant(edited);
        }
        let wts = g.softmax_rows(logits);
        if ctx.collect {
            rec.logits.push(g.value(logits).clone());
            rec.weights.push(g.value(wts).clone());
        }
        head_outs.push(g.matmul(wts, vh));
    }
    if ctx.collect {
        ctx.records.push(rec);
    }
    let mut attn = head_outs[0];
    for ho in &head_outs[1..] {
        attn = g.concat_cols(attn, *ho);
    }
    let wo = pn.node(g, p, &format!("{name}.wo"));
    let bo = pn.node(g, p, &format!("{name}.bo"));
    let attn = g.matmul(attn, wo);
    let attn = g.add_bias_row(attn, bo);
    let attn = g.spatial_unflatten(attn, c, h, w);
    Ok(g.add(x, attn))
}

/// Builds the full denoiser forward pass on `g`. `x_t` enters as a
/// constant; `emb` may be any (context_len x d_text) node, which is how
/// gradients reach the text encoder during customization.
pub fn denoise_nodes(
    g: &mut Graph,
    pn: &mut ParamNodes,
    dn: &DenoiserParams,
    x_t: &LatentImage,
    emb: NodeId,
    t: usize,
    editor: Option<AttnEditor<'_>>,
    collect_records: bool,
) -> Result<(NodeId, Vec<CrossAttentionRecord>)> {
    let p = &dn.params;
    if g.value(emb).cols() != dn.cfg.d_text {
        return Err(Error::Validation(format!(
            "embedding width {} does not match denoiser d_text {}",
            g.value(emb).cols(),
            dn.cfg.d_text
        )));
    }
    if x_t.channels() != dn.cfg.in_channels || x_t.height() != dn.cfg.image_size {
        return Err(Error::Validation(format!(
            "latent shape {:?} does not match model config",
            x_t.tensor().shape()
        )));
    }
    let mut ctx = BlockCtx { dn, editor, timestep: t, collect: collect_records, records: Vec::new() };

    let tfeat = g.constant(sinusoidal_features(t, dn.cfg.channels));
    let tw1 = pn.node(g, p, "time.w1");
    let tb1 = pn.node(g, p, "time.b1");
    let tw2 = pn.node(g, p, "time.w2");
    let tb2 = pn.node(g, p, "time.b2");
    let temb = g.matmul(tfeat, tw1);
    let temb = g.add_bias_row(temb, tb1);
    let temb = g.silu(temb);
    let temb = g.matmul(temb, tw2);
    let temb = g.add_bias_row(temb, tb2);

    let x = g.constant(x_t.tensor().clone());
    let ciw = pn.node(g, p, "conv_in.w");
    let cib = pn.node(g, p, "conv_in.b");
    let h0 = g.conv2d_3x3(x, ciw, cib);

    let h1 = res_block(g, pn, dn, "res1", h0, temb);
    let h1 = res_block(g, pn, dn, "res1b", h1, temb);
    let h1 = cross_attn_block(g, pn, &mut ctx, "attn1", 0, h1, emb)?;

    let h2 = g.avg_pool2(h1);
    let h2 = res_block(g, pn, dn, "res2", h2, temb);
    let h2 = cross_attn_block(g, pn, &mut ctx, "attn2", 1, h2, emb)?;

    let h3 = res_block(g, pn, dn, "res3", h2, temb);

    let up = g.upsample_nearest2(h3);
    let cat = g.concat_channels(up, h1);
    let h4 = res_block(g, pn, dn, "res4", cat, temb);

    let og = pn.node(g, p, "out.gn.gamma");
    let ob = pn.node(g, p, "out.gn.beta");
    let out = g.group_norm(h4, dn.cfg.groups, og, ob);
    let out = g.silu(out);
    let ow = pn.node(g, p, "out.conv.w");
    let obb = pn.node(g, p, "out.conv.b");
    let eps = g.conv2d_3x3(out, ow, obb);
    Ok((eps, ctx.records))
}

/// Predicts the noise component of `x_t` under text conditioning `emb`.
/// Returns the prediction and one attention record per cross-attention
/// layer (reflecting edited logits when an editor is installed).
pub fn predict_noise(
    dn: &DenoiserParams,
    x_t: &LatentImage,
    emb: &EmbeddingSequence,
    t: usize,
    editor: Option<AttnEditor<'_>>,
) -> Result<(LatentImage, Vec<CrossAttentionRecord>)> {
    let mut g = Graph::new();
    let mut pn = ParamNodes::new(false);
    let emb_node = g.constant(emb.vectors.clone());
    let (eps, records) = denoise_nodes(&mut g, &mut pn, dn, x_t, emb_node, t, editor, true)?;
    Ok((LatentImage::new(g.value(eps).clone()), records))
}
