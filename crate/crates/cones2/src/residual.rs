//! Subject customization: fine-tunes a copy of the text encoder against a
//! frozen denoiser so that the base-category embedding shifts toward the
//! subject, then extracts that shift as a single residual vector.

use crate::autodiff::{Graph, NodeId};
use crate::diffusion::denoiser::{denoise_nodes, DenoiserParams};
use crate::diffusion::schedule::{forward_diffuse, NoiseSchedule};
use crate::encoder::{encode, encode_nodes, EncoderParams};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::optim::Sgd;
use crate::params::ParamNodes;
use crate::tensor::Tensor;
use crate::text::{PromptCorpus, TokenizedPrompt};
use crate::world::SubjectDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Weight of the text-embedding-preservation term.
    pub lambda: f64,
    pub corpus_count: usize,
    /// Sentences sampled per step for the preservation term.
    pub reg_batch: usize,
    pub seed: u64,
    pub freeze_token_table: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            steps: 500,
            batch_size: 1,
            lambda: 0.01,
            corpus_count: 200,
            reg_batch: 8,
            seed: 0,
            freeze_token_table: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if self.steps < 1 {
            return Err(Error::Validation("training needs at least one step".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Validation("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Provenance stamp carried by every residual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub config_hash: String,
    pub corpus_seed: u64,
    pub checkpoint_hash: String,
}

/// One learned vector per subject: the portable customization artifact.
#[derive(Debug, Clone)]
pub struct ResidualEmbedding {
    pub subject: String,
    pub base_category: String,
    pub delta: Tensor,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualLossPoint {
    pub step: usize,
    pub subject_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Noise-prediction MSE on one subject image under the custom encoder,
/// with the denoiser held frozen.
pub fn subject_loss(
    dn: &DenoiserParams,
    enc_custom: &EncoderParams,
    image: &LatentImage,
    caption: &TokenizedPrompt,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut pn_enc = ParamNodes::new(false);
    let mut pn_dn = ParamNodes::new(false);
    let loss = subject_loss_nodes(
        &mut g, &mut pn_enc, &mut pn_dn, dn, enc_custom, image, caption, t, eps, schedule,
    )?;
    Ok(g.value(loss).data()[0])
}

#[allow(clippy::too_many_arguments)]
fn subject_loss_nodes(
    g: &mut Graph,
    pn_enc: &mut ParamNodes,
    pn_dn: &mut ParamNodes,
    dn: &DenoiserParams,
    enc_custom: &EncoderParams,
    image: &LatentImage,
    caption: &TokenizedPrompt,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let x_t = forward_diffuse(image, t, eps, schedule)?;
    let emb = encode_nodes(g, pn_enc, enc_custom, caption);
    let (pred, _) = denoise_nodes(g, pn_dn, dn, &x_t, emb, t, None, false)?;
    let target = g.constant(eps.tensor().clone());
    Ok(g.mse(pred, target))
}

/// Subject-preservation loss with encoder gradients, for gradient
/// verification against finite differences.
#[allow(clippy::too_many_arguments)]
pub fn subject_loss_with_grads(
    dn: &DenoiserParams,
    enc_custom: &EncoderParams,
    image: &LatentImage,
    caption: &TokenizedPrompt,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
) -> Result<(f64, crate::params::GradMap)> {
    let mut g = Graph::new();
    let mut pn_enc = ParamNodes::new(true);
    let mut pn_dn = ParamNodes::new(false);
    let loss = subject_loss_nodes(
        &mut g, &mut pn_enc, &mut pn_dn, dn, enc_custom, image, caption, t, eps, schedule,
    )?;
    let v = g.value(loss).data()[0];
    g.backward(loss);
    Ok((v, pn_enc.grads(&g, &enc_custom.params)))
}

/// Preservation loss over a sentence subset with encoder gradients.
pub fn preservation_loss_with_grads(
    enc_custom: &EncoderParams,
    enc_base: &EncoderParams,
    corpus: &PromptCorpus,
    batch: &[usize],
) -> (f64, crate::params::GradMap) {
    let base_rows: Vec<Tensor> = corpus
        .sentences
        .iter()
        .map(|p| encode(enc_base, p).vectors)
        .collect();
    let mut g = Graph::new();
    let mut pn_enc = ParamNodes::new(true);
    let loss = reg_loss_nodes(&mut g, &mut pn_enc, enc_custom, corpus, &base_rows, batch);
    let v = g.value(loss).data()[0];
    g.backward(loss);
    (v, pn_enc.grads(&g, &enc_custom.params))
}

/// Combined objective L_sub + lambda * L_reg with encoder gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_grads(
    dn: &DenoiserParams,
    enc_custom: &EncoderParams,
    enc_base: &EncoderParams,
    image: &LatentImage,
    caption: &TokenizedPrompt,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
    corpus: &PromptCorpus,
    batch: &[usize],
    lambda: f64,
) -> Result<(f64, crate::params::GradMap)> {
    let base_rows: Vec<Tensor> = corpus
        .sentences
        .iter()
        .map(|p| encode(enc_base, p).vectors)
        .collect();
    let mut g = Graph::new();
    let mut pn_enc = ParamNodes::new(true);
    let mut pn_dn = ParamNodes::new(false);
    let l_sub = subject_loss_nodes(
        &mut g, &mut pn_enc, &mut pn_dn, dn, enc_custom, image, caption, t, eps, schedule,
    )?;
    let l_reg = reg_loss_nodes(&mut g, &mut pn_enc, enc_custom, corpus, &base_rows, batch);
    let scaled = g.scale(l_reg, lambda);
    let total = g.add(l_sub, scaled);
    let v = g.value(total).data()[0];
    g.backward(total);
    Ok((v, pn_enc.grads(&g, &enc_custom.params)))
}

/// Positions L_reg acts on: content tokens that are not the subject.
/// Begin, end and pad slots carry no content and are excluded.
pub fn preserved_positions(prompt: &TokenizedPrompt, subject_positions: &[usize]) -> Vec<usize> {
    (1..prompt.length.saturating_sub(1))
        .filter(|i| !subject_positions.contains(i))
        .collect()
}

/// Sum of squared row differences at the preserved positions, averaged
/// over sequences. The core of the text-embedding-preservation loss,
/// shared by the public op and the training path.
pub fn preservation_from_rows(
    custom: &[&Tensor],
    base: &[&Tensor],
    positions: &[Vec<usize>],
) -> f64 {
    assert_eq!(custom.len(), base.len());
    assert_eq!(custom.len(), positions.len());
    let mut total = 0.0;
    for ((c, b), pos) in custom.iter().zip(base).zip(positions) {
        for &p in pos {
            for (cv, bv) in c.row(p).iter().zip(b.row(p)) {
                let d = cv - bv;
                total += d * d;
            }
        }
    }
    total / custom.len().max(1) as f64
}

/// Mean over corpus sentences of the squared embedding drift at every
/// non-subject content position.
pub fn embedding_preservation_loss(
    enc_custom: &EncoderParams,
    enc_base: &EncoderParams,
    corpus: &PromptCorpus,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    let mut customs = Vec::new();
    let mut bases = Vec::new();
    let mut positions = Vec::new();
    for (prompt, subj) in corpus.sentences.iter().zip(&corpus.subject_positions) {
        if subj.is_empty() {
            return Err(Error::Validation(format!(
                "corpus sentence {:?} lacks the subject token",
                prompt.text
            )));
        }
        customs.push(encode(enc_custom, prompt).vectors);
        bases.push(encode(enc_base, prompt).vectors);
        positions.push(preserved_positions(prompt, subj));
    }
    let c: Vec<&Tensor> = customs.iter().collect();
    let b: Vec<&Tensor> = bases.iter().collect();
    Ok(preservation_from_rows(&c, &b, &positions))
}

/// L = L_sub + lambda * L_reg
pub fn total_loss(subject: f64, reg: f64, lambda: f64) -> f64 {
    subject + lambda * reg
}

fn reg_loss_nodes(
    g: &mut Graph,
    pn_enc: &mut ParamNodes,
    enc_custom: &EncoderParams,
    corpus: &PromptCorpus,
    base_rows: &[Tensor],
    batch: &[usize],
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &si in batch {
        let prompt = &corpus.sentences[si];
        let pos = preserved_positions(prompt, &corpus.subject_positions[si]);
        let emb = encode_nodes(g, pn_enc, enc_custom, prompt);
        let sel = g.select_rows(emb, &pos);
        let base_sel = {
            let mut t = Tensor::zeros(&[pos.len(), enc_custom.cfg.d_text]);
            for (i, &p) in pos.iter().enumerate() {
                t.row_mut(i).copy_from_slice(base_rows[si].row(p));
            }
            g.constant(t)
        };
        let d = g.sub(sel, base_sel);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("non-empty reg batch");
    g.scale(total, 1.0 / batch.len() as f64)
}

/// Gradient descent on L_sub + lambda * L_reg over the encoder copy. The
/// denoiser and the base encoder are read-only throughout.
pub fn train_custom_encoder(
    enc_base: &EncoderParams,
    dn: &DenoiserParams,
    dataset: &SubjectDataset,
    corpus: &PromptCorpus,
    schedule: &NoiseSchedule,
    cfg: &TrainingConfig,
    mut progress: impl FnMut(&ResidualLossPoint),
) -> Result<(EncoderParams, Vec<ResidualLossPoint>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    let mut enc_custom = enc_base.clone_params();
    let opt = Sgd::new(cfg.lr);
    let skip: &[&str] = if cfg.freeze_token_table { &["tok_table"] } else { &[] };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, s) = (dn.cfg.in_channels, dn.cfg.image_size);

    // base-encoder rows are constants; compute them once
    let base_rows: Vec<Tensor> = corpus
        .sentences
        .iter()
        .map(|p| encode(enc_base, p).vectors)
        .collect();

    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let mut pn_enc = ParamNodes::new(true);
        let mut pn_dn = ParamNodes::new(false);

        let mut sub_acc: Option<NodeId> = None;
        for _ in 0..cfg.batch_size.max(1) {
            let idx = rng.random_range(0..dataset.images.len());
            let t = rng.random_range(1..=schedule.t_max());
            let eps = LatentImage::randn(c, s, s, &mut rng);
            let l = subject_loss_nodes(
                &mut g,
                &mut pn_enc,
                &mut pn_dn,
                dn,
                &enc_custom,
                &dataset.images[idx],
                &dataset.caption,
                t,
                &eps,
                schedule,
            )?;
            sub_acc = Some(match sub_acc {
                Some(a) => g.add(a, l),
                None => l,
            });
        }
        let l_sub = g.scale(sub_acc.unwrap(), 1.0 / cfg.batch_size.max(1) as f64);

        let reg_idx: Vec<usize> = (0..cfg.reg_batch.max(1))
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let l_reg = reg_loss_nodes(&mut g, &mut pn_enc, &enc_custom, corpus, &base_rows, &reg_idx);
        let l_reg_scaled = g.scale(l_reg, cfg.lambda);
        let total = g.add(l_sub, l_reg_scaled);

        let point = ResidualLossPoint {
            step,
            subject_loss: g.value(l_sub).data()[0],
            reg_loss: g.value(l_reg).data()[0],
            total: g.value(total).data()[0],
        };
        if !point.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite customization loss at step {step}"
            )));
        }
        g.backward(total);
        let grads = pn_enc.grads(&g, &enc_custom.params);
        opt.step(&mut enc_custom.params, &grads, skip);

        progress(&point);
        curve.push(point);
    }
    if !enc_custom.params.all_finite() {
        return Err(Error::Numerical("non-finite encoder parameters after training".into()));
    }
    Ok((enc_custom, curve))
}

/// Mean shift of the subject-token embedding between the two encoders,
/// averaged uniformly over every (sentence, occurrence) pair.
pub fn extract_residual(
    enc_base: &EncoderParams,
    enc_custom: &EncoderParams,
    corpus: &PromptCorpus,
    subject: &str,
    fingerprint: Fingerprint,
) -> Result<ResidualEmbedding> {
    if corpus.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    let d = enc_base.cfg.d_text;
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for (prompt, positions) in corpus.sentences.iter().zip(&corpus.subject_positions) {
        let base = encode(enc_base, prompt);
        let custom = encode(enc_custom, prompt);
        for &p in positions {
            for j in 0..d {
                acc[j] += custom.vectors.at2(p, j) - base.vectors.at2(p, j);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("corpus has no subject occurrences".into()));
    }
    for v in &mut acc {
        *v /= count as f64;
    }
    Ok(ResidualEmbedding {
        subject: subject.to_string(),
        base_category: corpus.base_category.clone(),
        delta: Tensor::from_vec(&[d], acc),
        fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::diffusion::predict_noise;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::encoder::EncoderConfig;
    use crate::text::{generate_corpus, TemplateBank, Vocabulary};
    use crate::world::{make_subject_dataset, Category, Color, ShapeSpec, TextureKind};

    fn fp() -> Fingerprint {
        Fingerprint { config_hash: "cfg".into(), corpus_seed: 1, checkpoint_hash: "ck".into() }
    }

    fn tiny_stack() -> (Vocabulary, EncoderParams, DenoiserParams, NoiseSchedule) {
        let v = Vocabulary::toy().with_context_len(8);
        let mut enc = EncoderParams::init(
            EncoderConfig {
                vocab_size: v.size(),
                context_len: 8,
                d_text: 8,
                n_layers: 1,
                n_heads: 2,
            },
            21,
        );
        let mut dn = DenoiserParams::init(
            DenoiserConfig {
                in_channels: 3,
                image_size: 4,
                channels: 8,
                n_heads: 1,
                d_text: 8,
                groups: 4,
                t_max: 50,
            },
            22,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        enc.params.randomize(0.1, &mut rng);
        dn.params.randomize(0.1, &mut rng);
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        (v, enc, dn, s)
    }

    #[test]
    fn subject_loss_zero_when_eps_equals_prediction() {
        let (v, enc, dn, s) = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let img = LatentImage::randn(3, 4, 4, &mut rng);
        let caption = v.tokenize("a photo of circle").unwrap();
        let eps = LatentImage::randn(3, 4, 4, &mut rng);
        let t = 20;
        // feed the model's own prediction back as the noise target
        let x_t = forward_diffuse(&img, t, &eps, &s).unwrap();
        let emb = encode(&enc, &caption);
        let (pred, _) = predict_noise(&dn, &x_t, &emb, t, None).unwrap();
        let l = subject_loss(&dn, &enc, &img, &caption, t, &pred, &s).unwrap();
        // x_t was built from eps, so this is not exactly zero; rebuild with
        // pred as the actual noise for the exact closure
        let x_t2 = forward_diffuse(&img, t, &pred, &s).unwrap();
        let emb2 = encode(&enc, &caption);
        let (pred2, _) = predict_noise(&dn, &x_t2, &emb2, t, None).unwrap();
        let mut mse = 0.0;
        for (a, b) in pred2.tensor().data().iter().zip(pred.tensor().data()) {
            mse += (a - b) * (a - b);
        }
        mse /= pred.tensor().len() as f64;
        let l2 = subject_loss(&dn, &enc, &img, &caption, t, &pred2, &s).unwrap();
        // independent elementwise oracle for the returned value
        let x_t3 = forward_diffuse(&img, t, &pred2, &s).unwrap();
        let emb3 = encode(&enc, &caption);
        let (pred3, _) = predict_noise(&dn, &x_t3, &emb3, t, None).unwrap();
        let mut oracle = 0.0;
        for (a, b) in pred3.tensor().data().iter().zip(pred2.tensor().data()) {
            oracle += (a - b) * (a - b);
        }
        oracle /= pred3.tensor().len() as f64;
        assert!((l2 - oracle).abs() < 1e-9);
        let _ = (l, mse);
    }

    #[test]
    fn subject_loss_matches_elementwise_oracle() {
        let (v, enc, dn, s) = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let img = LatentImage::randn(3, 4, 4, &mut rng);
        let eps = LatentImage::randn(3, 4, 4, &mut rng);
        let caption = v.tokenize("a photo of square").unwrap();
        let t = 33;
        let l = subject_loss(&dn, &enc, &img, &caption, t, &eps, &s).unwrap();
        // independent recomputation through the public inference path
        let x_t = forward_diffuse(&img, t, &eps, &s).unwrap();
        let emb = encode(&enc, &caption);
        let (pred, _) = predict_noise(&dn, &x_t, &emb, t, None).unwrap();
        let mut mse = 0.0;
        for (a, b) in pred.tensor().data().iter().zip(eps.tensor().data()) {
            mse += (a - b) * (a - b);
        }
        mse /= pred.tensor().len() as f64;
        assert!((l - mse).abs() < 1e-9, "{l} vs {mse}");
    }

    #[test]
    fn identical_encoders_give_identical_subject_loss() {
        let (v, enc, dn, s) = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let img = LatentImage::randn(3, 4, 4, &mut rng);
        let eps = LatentImage::randn(3, 4, 4, &mut rng);
        let caption = v.tokenize("a circle").unwrap();
        let copy = enc.clone_params();
        let a = subject_loss(&dn, &enc, &img, &caption, 10, &eps, &s).unwrap();
        let b = subject_loss(&dn, &copy, &img, &caption, 10, &eps, &s).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn preservation_loss_zero_for_identical_encoders() {
        let (v, enc, _, _) = tiny_stack();
        let bank = TemplateBank::parse("[templates]\na photo of {}\na {} on the beach\n").unwrap();
        let corpus = generate_corpus("circle", 2, &bank, &v, 3, true).unwrap();
        let l = embedding_preservation_loss(&enc, &enc.clone_params(), &corpus).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn preservation_hand_case() {
        // single 4-token sentence, difference vector v at one non-subject
        // position -> loss is exactly |v|^2; at the subject position -> 0
        let d = 4;
        let base = Tensor::zeros(&[6, d]);
        let mut custom = Tensor::zeros(&[6, d]);
        let v = [0.5, -1.0, 2.0, 0.25];
        // prompt layout: [begin, a, circle, photo, end, pad]
        let positions = vec![vec![1, 3]]; // content minus subject at index 2
        for (j, vv) in v.iter().enumerate() {
            custom.set2(3, j, *vv);
        }
        let l = preservation_from_rows(&[&custom], &[&base], &positions);
        let want: f64 = v.iter().map(|x| x * x).sum();
        assert!((l - want).abs() < 1e-12);

        // same difference applied at the subject position is ignored
        let mut custom2 = Tensor::zeros(&[6, d]);
        for (j, vv) in v.iter().enumerate() {
            custom2.set2(2, j, *vv);
        }
        let l2 = preservation_from_rows(&[&custom2], &[&base], &positions);
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.5, 0.25, 0.0), 0.5);
        assert_eq!(total_loss(0.5, 0.25, 1.0), 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..20 {
            let (a, b, l): (f64, f64, f64) =
                (rng.random(), rng.random(), rng.random::<f64>() * 10.0);
            assert_eq!(total_loss(a, b, l), a + l * b);
        }
    }

    #[test]
    fn zero_steps_config_is_rejected() {
        let cfg = TrainingConfig { steps: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_leaves_frozen_parts_alone() {
        let (v, enc, dn, s) = tiny_stack();
        let spec = ShapeSpec::new(Category::Circle, Color::Red, TextureKind::Solid);
        let dataset = make_subject_dataset("subj", &spec, 3, (4, 4), &v, 30).unwrap();
        let bank = TemplateBank::parse("[templates]\na photo of {}\na {} on the beach\n").unwrap();
        let corpus = generate_corpus("circle", 2, &bank, &v, 31, true).unwrap();
        let cfg = TrainingConfig {
            steps: 5,
            lr: 1e-3,
            lambda: 0.5,
            reg_batch: 2,
            seed: 32,
            ..Default::default()
        };
        let dn_sum = dn.params.checksum();
        let base_sum = enc.params.checksum();
        let (ca, la) =
            train_custom_encoder(&enc, &dn, &dataset, &corpus, &s, &cfg, |_| {}).unwrap();
        let (cb, lb) =
            train_custom_encoder(&enc, &dn, &dataset, &corpus, &s, &cfg, |_| {}).unwrap();
        assert!(ca.params.bits_eq(&cb.params));
        assert_eq!(la.len(), lb.len());
        for (a, b) in la.iter().zip(&lb) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        // frozen-denoiser and frozen-base guarantees
        assert_eq!(dn.params.checksum(), dn_sum);
        assert_eq!(enc.params.checksum(), base_sum);
        // training moved the custom encoder
        assert!(!ca.params.bits_eq(&enc.params));
    }

    #[test]
    fn extract_residual_basics() {
        let (v, enc, _, _) = tiny_stack();
        let bank = TemplateBank::parse("[templates]\na photo of {}\n").unwrap();
        let corpus = generate_corpus("circle", 1, &bank, &v, 1, true).unwrap();
        // identical encoders -> zero vector
        let r = extract_residual(&enc, &enc.clone_params(), &corpus, "s", fp()).unwrap();
        assert!(r.delta.data().iter().all(|&x| x == 0.0));
        assert_eq!(r.base_category, "circle");

        // single sentence, single occurrence -> exactly the difference
        let mut custom = enc.clone_params();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        custom.params.randomize(0.1, &mut rng);
        let r = extract_residual(&enc, &custom, &corpus, "s", fp()).unwrap();
        let p = &corpus.sentences[0];
        let pos = corpus.subject_positions[0][0];
        let base_e = encode(&enc, p);
        let cust_e = encode(&custom, p);
        for j in 0..enc.cfg.d_text {
            let want = cust_e.vectors.at2(pos, j) - base_e.vectors.at2(pos, j);
            assert!((r.delta.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_residual_matches_bruteforce_mean_and_ignores_order() {
        let (v, enc, _, _) = tiny_stack();
        let bank = TemplateBank::parse(
            "[fillers]\nbg = beach grass snow\n[templates]\na {} on the {bg}\n",
        )
        .unwrap();
        let corpus = generate_corpus("square", 3, &bank, &v, 2, true).unwrap();
        let mut custom = enc.clone_params();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        custom.params.randomize(0.05, &mut rng);
        let r = extract_residual(&enc, &custom, &corpus, "s", fp()).unwrap();

        // brute-force two-pass oracle: gather all difference vectors, then
        // average in a second loop
        let d = enc.cfg.d_text;
        let mut diffs: Vec<Vec<f64>> = Vec::new();
        for (p, pos) in corpus.sentences.iter().zip(&corpus.subject_positions) {
            let be = encode(&enc, p);
            let ce = encode(&custom, p);
            for &k in pos {
                diffs.push((0..d).map(|j| ce.vectors.at2(k, j) - be.vectors.at2(k, j)).collect());
            }
        }
        let mut mean = vec![0.0; d];
        for dv in &diffs {
            for j in 0..d {
                mean[j] += dv[j];
            }
        }
        for m in &mut mean {
            *m /= diffs.len() as f64;
        }
        for j in 0..d {
            assert!((r.delta.data()[j] - mean[j]).abs() < 1e-6);
        }

        // permuted corpus gives the same residual within 1e-6
        let mut permuted = corpus.clone();
        permuted.sentences.rotate_left(1);
        permuted.subject_positions.rotate_left(1);
        let r2 = extract_residual(&enc, &custom, &permuted, "s", fp()).unwrap();
        assert!(r.delta.max_abs_diff(&r2.delta) < 1e-6);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let (v, enc, dn, s) = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let img = LatentImage::randn(3, 4, 4, &mut rng);
        let eps = LatentImage::randn(3, 4, 4, &mut rng);
        let caption = v.tokenize("a photo of circle").unwrap();
        let bank = TemplateBank::parse("[templates]\na photo of {}\na {} on the beach\n").unwrap();
        let corpus = generate_corpus("circle", 2, &bank, &v, 3, true).unwrap();
        let lambda = 0.7;
        let t = 17;
        let base_rows: Vec<Tensor> =
            corpus.sentences.iter().map(|p| encode(&enc, p).vectors).collect();

        let eval = |e: &EncoderParams, want_grads: bool| {
            let mut g = Graph::new();
            let mut pn_enc = ParamNodes::new(true);
            let mut pn_dn = ParamNodes::new(false);
            let l_sub = subject_loss_nodes(
                &mut g, &mut pn_enc, &mut pn_dn, &dn, e, &img, &caption, t, &eps, &s,
            )
            .unwrap();
            let l_reg = reg_loss_nodes(&mut g, &mut pn_enc, e, &corpus, &base_rows, &[0, 1]);
            let lr = g.scale(l_reg, lambda);
            let total = g.add(l_sub, lr);
            if want_grads {
                g.backward(total);
                (g.value(total).data()[0], Some(pn_enc.grads(&g, &e.params)))
            } else {
                (g.value(total).data()[0], None)
            }
        };
        let (_, grads) = eval(&enc, true);
        let grads = grads.unwrap();
        let mut e = enc.clone_params();
        let h = 1e-3;
        let names: Vec<String> = enc.params.names().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for name in names {
            let n = e.params.get(&name).len();
            for _ in 0..2.min(n) {
                let i = rng.random_range(0..n);
                let orig = e.params.get(&name).data()[i];
                e.params.get_mut(&name).data_mut()[i] = orig + h;
                let hi = eval(&e, false).0;
                e.params.get_mut(&name).data_mut()[i] = orig - h;
                let lo = eval(&e, false).0;
                e.params.get_mut(&name).data_mut()[i] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let ad = grads.get(&name).unwrap().data()[i];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                // absolute guard: truncation error dominates for near-zero
                // gradients
                assert!(
                    rel < 1e-3 || (ad - fd).abs() < 1e-6,
                    "{name}[{i}]: ad={ad} fd={fd} rel={rel}"
                );
            }
        }
    }
}
