// scratch: ASCII visualization of generated images (removed before release)
use cones2::checkpoint::load_checkpoint;
use cones2::config::RunConfig;
use cones2::diffusion::sampler::{sample, SamplerConfig};
use cones2::diffusion::schedule::make_schedule;
use cones2::encoder::encode;
use cones2::world::{Background, Color};
use std::path::Path;

fn glyph(p: [f64; 3]) -> char {
    let mut best = (f64::INFINITY, '.');
    let mut consider = |rgb: [f64; 3], ch: char| {
        let d = (p[0] - rgb[0]).powi(2) + (p[1] - rgb[1]).powi(2) + (p[2] - rgb[2]).powi(2);
        if d < best.0 { best = (d, ch); }
    };
    for b in Background::ALL { consider(b.rgb(), '.'); }
    let chars = ['R', 'G', 'B', 'Y', 'M', 'C'];
    for (i, c) in Color::ALL.iter().enumerate() {
        consider(c.bright(), chars[i]);
        consider(c.dim(), chars[i].to_ascii_lowercase());
    }
    best.1
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let prompt_text = args.get(1).map(String::as_str).unwrap_or("a red solid circle");
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7.5);
    let ckpt = args.get(3).map(String::as_str).unwrap_or("/root/exp/run1/base.ckpt");
    let cfg = RunConfig::default();
    let ck = load_checkpoint(Path::new(ckpt)).unwrap();
    let vocab = cfg.vocabulary();
    let schedule = make_schedule(ck.denoiser.cfg.t_max, ck.meta.schedule_kind).unwrap();
    let scfg = SamplerConfig { steps: 50, guidance_scale: scale, clip_predicted: true };
    let emb_c = encode(&ck.encoder, &vocab.tokenize(prompt_text).unwrap());
    let emb_u = encode(&ck.encoder, &vocab.tokenize("").unwrap());
    for seed in 0..4u64 {
        let img = sample(&ck.denoiser, &emb_c, &emb_u, &schedule, &scfg, seed, None).unwrap();
        println!("--- seed {seed} ---");
        for y in 0..img.height() {
            let row: String = (0..img.width())
                .map(|x| glyph([img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)]))
                .collect();
            println!("{row}");
        }
    }
}
