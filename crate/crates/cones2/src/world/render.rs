//! Deterministic scene rendering and few-shot subject reference sets.

use super::{Background, NormBox, PixelBox, ShapeSpec};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::text::{TokenizedPrompt, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Background dithering amplitude; small enough that pixel classification
/// is unaffected.
const DITHER: f64 = 0.03;

/// Maximum tolerated pairwise IoU between drawn shape boxes.
pub const OCCLUSION_LIMIT: f64 = 0.2;

/// Largest centered square inside `b`, scaled by `frac`. Shapes are always
/// drawn square so the template scan stays one-dimensional in size.
fn fit_square(b: &PixelBox, frac: f64) -> PixelBox {
    let (w, h) = (b.width() as f64, b.height() as f64);
    let side = (w.min(h) * frac.min(1.0)).round().max(3.0);
    let x0 = b.x0 + ((w - side) / 2.0).floor() as usize;
    let y0 = b.y0 + ((h - side) / 2.0).floor() as usize;
    PixelBox { x0, y0, x1: x0 + side as usize, y1: y0 + side as usize }
}

/// Renders shapes inside their boxes over a background class. Deterministic
/// in all inputs; the seed only drives low-amplitude background dithering.
pub fn render_scene(
    specs: &[(ShapeSpec, NormBox)],
    canvas: (usize, usize),
    background: Background,
    seed: u64,
) -> Result<LatentImage> {
    let (h, w) = canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = LatentImage::zeros(3, h, w);
    let bg = background.rgb();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let n = (rng.random::<f64>() * 2.0 - 1.0) * DITHER;
                img.set(c, y, x, (bg[c] + n).clamp(-1.0, 1.0));
            }
        }
    }

    let mut drawn: Vec<PixelBox> = Vec::new();
    for (spec, nbox) in specs {
        let pbox = fit_square(&PixelBox::from_norm(nbox, h, w), spec.size_frac);
        if pbox.x1 > w || pbox.y1 > h || pbox.width() < 3 || pbox.height() < 3 {
            return Err(Error::Validation(format!(
                "box {nbox:?} leaves no room for a shape on a {h}x{w} canvas"
            )));
        }
        for prev in &drawn {
            if prev.iou(&pbox) > OCCLUSION_LIMIT {
                return Err(Error::Validation(format!(
                    "boxes overlap beyond the occlusion limit: {prev:?} vs {pbox:?}"
                )));
            }
        }
        let mask = pbox.shape_mask(spec.category);
        let (bright, dim) = (spec.color.bright(), spec.color.dim());
        for y in 0..pbox.height() {
            for x in 0..pbox.width() {
                if !mask[y * pbox.width() + x] {
                    continue;
                }
                let tone = if spec.texture.is_bright(x, y) { bright } else { dim };
                for c in 0..3 {
                    img.set(c, pbox.y0 + y, pbox.x0 + x, tone[c]);
                }
            }
        }
        drawn.push(pbox);
    }
    Ok(img)
}

/// 3-5 reference images of one subject plus its base-category caption.
#[derive(Debug, Clone)]
pub struct SubjectDataset {
    pub name: String,
    pub base_category: String,
    pub images: Vec<LatentImage>,
    pub caption: TokenizedPrompt,
}

/// Renders `n` poses of the subject (jittered position and size) with the
/// caption "a photo of {base_category}".
pub fn make_subject_dataset(
    name: &str,
    spec: &ShapeSpec,
    n: usize,
    canvas: (usize, usize),
    vocab: &Vocabulary,
    seed: u64,
) -> Result<SubjectDataset> {
    if !(3..=5).contains(&n) {
        return Err(Error::Validation(format!("subject needs 3-5 reference images, got {n}")));
    }
    let (h, w) = canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let side = rng.random_range((h / 2).max(3)..=(h * 3 / 4).max(3));
        let x0 = rng.random_range(0..=(w - side));
        let y0 = rng.random_range(0..=(h - side));
        let nbox = [
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            (x0 + side) as f64 / w as f64,
            (y0 + side) as f64 / h as f64,
        ];
        let background = Background::ALL[i % Background::ALL.len()];
        images.push(render_scene(&[(*spec, nbox)], canvas, background, rng.random())?);
    }
    let caption = vocab.tokenize(&format!("a photo of {}", spec.category.word()))?;
    Ok(SubjectDataset {
        name: name.to_string(),
        base_category: spec.category.word().to_string(),
        images,
        caption,
    })
}
