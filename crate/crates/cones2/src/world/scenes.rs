//! Pretraining corpus: captioned scenes of one or two shapes with random
//! appearances. Most captions spell out color and texture so the denoiser
//! learns to read appearance from the text embedding.

use super::render::render_scene;
use super::{Background, Category, Color, NormBox, PixelBox, ShapeSpec, TextureKind};
use crate::error::Result;
use crate::latent::LatentImage;
use crate::text::{TokenizedPrompt, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub n_scenes: usize,
    pub canvas: usize,
    pub seed: u64,
    /// Probability that a scene holds two shapes instead of one.
    pub two_shape_prob: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig { n_scenes: 4096, canvas: 16, seed: 0, two_shape_prob: 0.35 }
    }
}

fn random_spec<R: Rng>(rng: &mut R) -> ShapeSpec {
    ShapeSpec::new(
        Category::ALL[rng.random_range(0..Category::ALL.len())],
        Color::ALL[rng.random_range(0..Color::ALL.len())],
        TextureKind::ALL[rng.random_range(0..TextureKind::ALL.len())],
    )
}

/// Caption fragment for one shape. Appearance words are included often so
/// text conditioning controls appearance; sometimes omitted so the bare
/// category prompt stays in-distribution.
fn describe<R: Rng>(spec: &ShapeSpec, rng: &mut R) -> String {
    let cat = spec.category.word();
    let color = spec.color.word();
    let tex = spec.texture.word();
    let roll: f64 = rng.random();
    if roll < 0.10 {
        cat.to_string()
    } else if roll < 0.25 {
        format!("{color} {cat}")
    } else if roll < 0.30 {
        format!("{tex} {cat}")
    } else {
        format!("{color} {tex} {cat}")
    }
}

/// Positions snap to even pixels: less nuisance variation in the corpus
/// without constraining where guidance can place subjects at inference.
fn random_box<R: Rng>(canvas: usize, side: usize, rng: &mut R) -> NormBox {
    let snap = |v: usize| (v / 2) * 2;
    let x0 = snap(rng.random_range(0..=(canvas - side)));
    let y0 = snap(rng.random_range(0..=(canvas - side)));
    [
        x0 as f64 / canvas as f64,
        y0 as f64 / canvas as f64,
        (x0 + side) as f64 / canvas as f64,
        (y0 + side) as f64 / canvas as f64,
    ]
}

/// Generates the captioned pretraining set. Deterministic per config.
pub fn generate_pretrain_set(
    vocab: &Vocabulary,
    cfg: &SceneGenConfig,
) -> Result<Vec<(LatentImage, TokenizedPrompt)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let canvas = cfg.canvas;
    let mut out = Vec::with_capacity(cfg.n_scenes);
    while out.len() < cfg.n_scenes {
        let background = Background::ALL[rng.random_range(0..Background::ALL.len())];
        let two = rng.random::<f64>() < cfg.two_shape_prob;
        let (specs, caption) = if two {
            let a = random_spec(&mut rng);
            let b = random_spec(&mut rng);
            let sides = [(canvas * 5 / 16).max(3), (canvas * 6 / 16).max(3), (canvas * 7 / 16).max(3)];
            let side_a = sides[rng.random_range(0..sides.len())];
            let side_b = sides[rng.random_range(0..sides.len())];
            let box_a = random_box(canvas, side_a, &mut rng);
            // rejection-place the second box away from the first
            let mut box_b = random_box(canvas, side_b, &mut rng);
            let mut tries = 0;
            loop {
                let pa = PixelBox::from_norm(&box_a, canvas, canvas);
                let pb = PixelBox::from_norm(&box_b, canvas, canvas);
                if pa.iou(&pb) < 0.05 {
                    break;
                }
                box_b = random_box(canvas, side_b, &mut rng);
                tries += 1;
                if tries > 100 {
                    break;
                }
            }
            let caption = format!("a {} and a {}", describe(&a, &mut rng), describe(&b, &mut rng));
            (vec![(a, box_a), (b, box_b)], caption)
        } else {
            let spec = random_spec(&mut rng);
            let sides = [(canvas / 2).max(3), (canvas * 5 / 8).max(3), (canvas * 3 / 4).max(3)];
            let side = sides[rng.random_range(0..sides.len())];
            let nbox = random_box(canvas, side, &mut rng);
            let desc = describe(&spec, &mut rng);
            let caption = if rng.random::<f64>() < 0.5 {
                format!("a photo of {desc}")
            } else {
                format!("a {desc}")
            };
            (vec![(spec, nbox)], caption)
        };
        let scene_seed: u64 = rng.random();
        let img = match render_scene(&specs, (canvas, canvas), background, scene_seed) {
            Ok(img) => img,
            // overlap beyond the occlusion limit: redraw the whole scene
            Err(_) => continue,
        };
        out.push((img, vocab.tokenize(&caption)?));
    }
    Ok(out)
}
