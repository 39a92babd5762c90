// scratch: end-to-end calibration experiments (removed before release)
use cones2::checkpoint::load_checkpoint;
use cones2::config::RunConfig;
use cones2::diffusion::schedule::make_schedule;
use cones2::layout::{guided_sample, GuidanceConfig, Layout, LayoutBox};
use cones2::registry::{Binding, ResidualRegistry};
use cones2::world::*;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("single");
    let n: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(24);
    let ckpt = args.get(3).map(String::as_str).unwrap_or("/root/exp/run2/base.ckpt");
    let reg_dir = args.get(4).map(String::as_str).unwrap_or("/root/exp/reg2");
    let gp: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2.5);
    let gm: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(-1e-5);

    let cfg = RunConfig::default();
    let ck = load_checkpoint(Path::new(ckpt)).unwrap();
    let vocab = cfg.vocabulary();
    let schedule = make_schedule(ck.denoiser.cfg.t_max, ck.meta.schedule_kind).unwrap();
    let registry = ResidualRegistry::open(Path::new(reg_dir)).unwrap();
    let alpha_spec = ShapeSpec::new(Category::Circle, Color::Red, TextureKind::Solid);
    let beta_spec = ShapeSpec::new(Category::Circle, Color::Blue, TextureKind::Solid);

    match mode {
        "single" => {
            let alpha = Binding { word: "circle".into(), occurrence: None, entry: registry.load("alpha").unwrap() };
            let items: Vec<EvalItem> = (0..n).into_par_iter().map(|seed| {
                let (img, _) = guided_sample(&ck.denoiser, &ck.encoder, &vocab, "a photo of circle",
                    std::slice::from_ref(&alpha), None, &cfg.guidance_config(), &cfg.sampler_config(),
                    &schedule, seed, false).unwrap();
                EvalItem { image: img, subjects: vec![("alpha".into(), alpha_spec, [0.0,0.0,1.0,1.0])] }
            }).collect();
            let r = evaluate_run(&items, BTreeMap::new());
            println!("single-subject: presence={:.3} confusion={:.3}", r.presence_rate, r.confusion_rate);
        }
        "two" => {
            let layout = Layout { canvas: [16,16], boxes: vec![
                LayoutBox { subject: "alpha".into(), bbox: [0.0,0.25,0.45,0.75] },
                LayoutBox { subject: "beta".into(), bbox: [0.55,0.25,1.0,0.75] },
            ]};
            let bindings = vec![
                Binding { word: "circle".into(), occurrence: Some(1), entry: registry.load("alpha").unwrap() },
                Binding { word: "circle".into(), occurrence: Some(2), entry: registry.load("beta").unwrap() },
            ];
            let gcfg = GuidanceConfig { gamma_plus: gp, gamma_minus: gm, ..cfg.guidance_config() };
            let items: Vec<EvalItem> = (0..n).into_par_iter().map(|seed| {
                let (img, _) = guided_sample(&ck.denoiser, &ck.encoder, &vocab, "a circle and a circle",
                    &bindings, Some(&layout), &gcfg, &cfg.sampler_config(), &schedule, seed, false).unwrap();
                EvalItem { image: img, subjects: vec![
                    ("alpha".into(), alpha_spec, layout.boxes[0].bbox),
                    ("beta".into(), beta_spec, layout.boxes[1].bbox),
                ]}
            }).collect();
            let r = evaluate_run(&items, BTreeMap::new());
            println!("two-subject gp={gp} gm={gm}: presence={:.3} both={:.3} confusion={:.3} medIoU={:.3} (alpha {:.3} beta {:.3})",
                r.presence_rate, r.all_present_rate, r.confusion_rate, r.median_iou,
                r.per_subject["alpha"].median_iou(), r.per_subject["beta"].median_iou());
        }
        _ => eprintln!("unknown mode"),
    }
}
