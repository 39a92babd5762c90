// scratch probe for reference-run calibration (removed before release)
use cones2::checkpoint::load_checkpoint;
use cones2::config::RunConfig;
use cones2::diffusion::sampler::{sample, SamplerConfig};
use cones2::diffusion::schedule::make_schedule;
use cones2::encoder::encode;
use cones2::world::*;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let prompt_text = args.get(1).map(String::as_str).unwrap_or("a red solid circle");
    let n: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let scale: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7.5);
    let cat = args.get(4).map(String::as_str).unwrap_or("circle");
    let color = args.get(5).map(String::as_str).unwrap_or("red");
    let tex = args.get(6).map(String::as_str).unwrap_or("solid");

    let cfg = RunConfig::default();
    let ck = load_checkpoint(Path::new("/root/exp/run1/base.ckpt")).unwrap();
    let vocab = cfg.vocabulary();
    let schedule = make_schedule(ck.denoiser.cfg.t_max, ck.meta.schedule_kind).unwrap();
    let scfg = SamplerConfig { steps: 50, guidance_scale: scale, clip_predicted: true };
    let prompt = vocab.tokenize(prompt_text).unwrap();
    let emb_c = encode(&ck.encoder, &prompt);
    let emb_u = encode(&ck.encoder, &vocab.tokenize("").unwrap());

    let spec = ShapeSpec::new(
        Category::from_word(cat).unwrap(),
        Color::from_word(color).unwrap(),
        TextureKind::from_word(tex).unwrap(),
    );
    let images: Vec<_> = (0..n)
        .into_par_iter()
        .map(|seed| sample(&ck.denoiser, &emb_c, &emb_u, &schedule, &scfg, seed, None).unwrap())
        .collect();
    let items: Vec<EvalItem> = images
        .into_iter()
        .map(|image| EvalItem {
            image,
            subjects: vec![("s".into(), spec, [0.0, 0.0, 1.0, 1.0])],
        })
        .collect();
    let r = evaluate_run(&items, BTreeMap::new());
    println!(
        "prompt={prompt_text:?} scale={scale} n={n}: presence={:.2} confusion={:.2}",
        r.presence_rate, r.confusion_rate
    );
    // show what was detected per image
    for (i, item) in items.iter().enumerate().take(8) {
        let dets = detect_all(&item.image, spec.category);
        let descs: Vec<String> = Category::ALL
            .iter()
            .flat_map(|c| detect_all(&item.image, *c))
            .map(|d| format!("{} @({},{},{},{}) s={:.2}", d.appearance, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1, d.score))
            .collect();
        println!("  seed {i}: {} cat-dets; all: [{}]", dets.len(), descs.join("; "));
    }
}
