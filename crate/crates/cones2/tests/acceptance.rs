//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (visible with `cargo test -- --nocapture`). The end-to-end
//! criteria share a single trained stack built on first use.

use cones2::autodiff::softmax_rows_value;
use cones2::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use cones2::cli::{cmd_learn_residual, BindSpec};
use cones2::config::RunConfig;
use cones2::diffusion::denoiser::{DenoiserConfig, DenoiserParams};
use cones2::diffusion::pretrain::{pretrain_base, reconstruction_loss_with_grads, PretrainConfig};
use cones2::diffusion::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use cones2::encoder::{encode, EncoderConfig, EncoderParams};
use cones2::latent::LatentImage;
use cones2::layout::{
    edit_logits, edited_cross_attention, guided_sample, GuidanceConfig, Layout, LayoutBox,
    MaskGrid,
};
use cones2::params::GradMap;
use cones2::registry::{compose_embedding, Binding, RegistryEntry, ResidualRegistry};
use cones2::residual::{
    extract_residual, preservation_loss_with_grads, preserved_positions, subject_loss_with_grads,
    total_loss_with_grads, train_custom_encoder, Fingerprint, TrainingConfig,
};
use cones2::tensor::{matmul_nn, Tensor};
use cones2::text::{generate_corpus, PromptCorpus, TemplateBank, Vocabulary};
use cones2::world::{
    evaluate_run, make_subject_dataset, Category, Color, EvalItem, EvalReport, ShapeSpec,
    TextureKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn verdict(id: u32, label: &str, ok: bool) {
    println!("criterion {id:02} ({label}): {}", if ok { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------- c01

#[test]
fn c01_attention_edit_algebra() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ok = true;
    for _ in 0..1000 {
        let hw = 16;
        let l = 8;
        let logits = Tensor::randn(&[hw, l], 2.0, &mut rng);
        let values = Tensor::randn(&[l, 4], 1.0, &mut rng);
        let gp = rng.random::<f64>() * 5.0;
        let gm = -rng.random::<f64>() * 5.0;
        let cells: Vec<f64> = (0..hw)
            .map(|_| match rng.random_range(0..3) {
                0 => gp,
                1 => gm,
                _ => 0.0,
            })
            .collect();
        let grid = MaskGrid { h: 4, w: 4, cells };
        let positions: Vec<usize> = (0..l).filter(|_| rng.random::<f64>() < 0.3).collect();
        let eta = rng.random::<f64>();
        let edited = edit_logits(&logits, &[(&grid, positions.as_slice())], eta);
        let w = softmax_rows_value(&edited);
        for r in 0..hw {
            let s: f64 = w.row(r).iter().sum();
            if (s - 1.0).abs() >= 1e-6 {
                ok = false;
            }
        }
        // all-zero masks reproduce the unedited output bit-exactly
        let zero = MaskGrid { h: 4, w: 4, cells: vec![0.0; hw] };
        let sched = cones2::layout::GuidanceSchedule {
            form: cones2::layout::EtaForm::Sqrt,
            peak: 1.0,
            t_total: 100,
        };
        let out =
            edited_cross_attention(&logits, &[(&zero, positions.as_slice())], 50, &sched, &values);
        let plain = matmul_nn(&softmax_rows_value(&logits), &values);
        if !out.bits_eq(&plain) {
            ok = false;
        }
    }
    let within_budget = t0.elapsed() < Duration::from_secs(10);
    verdict(1, "attention-edit algebra", ok && within_budget);
    assert!(ok, "softmax normalization or zero-mask equivalence violated");
    assert!(within_budget, "took {:?}, budget 10 s", t0.elapsed());
}

// ---------------------------------------------------------------- c02

#[test]
fn c02_hand_oracle_softmax() {
    let logits = Tensor::zeros(&[1, 2]);
    let grid = MaskGrid { h: 1, w: 1, cells: vec![2.5] };
    let positions = vec![0usize];
    let edited = edit_logits(&logits, &[(&grid, positions.as_slice())], 1.0);
    let w = softmax_rows_value(&edited);
    let ok = (w.at2(0, 0) - 0.924).abs() <= 1e-3 && (w.at2(0, 1) - 0.076).abs() <= 1e-3;
    verdict(2, "hand-oracle softmax", ok);
    assert!(ok, "got ({}, {})", w.at2(0, 0), w.at2(0, 1));
}

// ---------------------------------------------------------------- c03

struct TinyStack {
    vocab: Vocabulary,
    enc: EncoderParams,
    enc_base: EncoderParams,
    dn: DenoiserParams,
    schedule: NoiseSchedule,
    corpus: PromptCorpus,
}

fn tiny_stack(seed: u64) -> TinyStack {
    let vocab = Vocabulary::toy().with_context_len(8);
    let mut enc = EncoderParams::init(
        EncoderConfig {
            vocab_size: vocab.size(),
            context_len: 8,
            d_text: 8,
            n_layers: 1,
            n_heads: 2,
        },
        seed,
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
        seed + 1,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    enc.params.randomize(0.15, &mut rng);
    dn.params.randomize(0.15, &mut rng);
    let mut enc_base = enc.clone_params();
    enc_base.params.randomize(0.15, &mut rng);
    let bank = TemplateBank::parse("[templates]\na photo of {}\na {} on the beach\n").unwrap();
    let corpus = generate_corpus("circle", 2, &bank, &vocab, 5, true).unwrap();
    let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
    TinyStack { vocab, enc, enc_base, dn, schedule, corpus }
}

/// Checks sampled coordinates of `grads` against central differences of
/// `f`, mutating and restoring `params` through the accessor.
fn fd_pass_rate(
    params: &mut EncoderParams,
    grads: &GradMap,
    samples: usize,
    seed: u64,
    mut f: impl FnMut(&EncoderParams) -> f64,
) -> f64 {
    let h = 1e-4;
    let names: Vec<String> = params.params.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = 0usize;
    for _ in 0..samples {
        let name = &names[rng.random_range(0..names.len())];
        let n = params.params.get(name).len();
        let i = rng.random_range(0..n);
        let orig = params.params.get(name).data()[i];
        params.params.get_mut(name).data_mut()[i] = orig + h;
        let hi = f(params);
        params.params.get_mut(name).data_mut()[i] = orig - h;
        let lo = f(params);
        params.params.get_mut(name).data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * h);
        let ad = grads.get(name).unwrap().data()[i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        if rel < 1e-3 {
            pass += 1;
        }
    }
    pass as f64 / samples as f64
}

#[test]
fn c03_gradient_checks() {
    let t0 = Instant::now();
    let ts = tiny_stack(300);
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let image = LatentImage::randn(3, 4, 4, &mut rng);
    let eps = LatentImage::randn(3, 4, 4, &mut rng);
    let caption = ts.vocab.tokenize("a photo of circle").unwrap();
    let t = 20;
    let samples = 300;

    // Eq. 1: reconstruction loss, gradients for denoiser and encoder
    let (_, gd, ge) = reconstruction_loss_with_grads(
        &ts.dn, &ts.enc, &image, &caption, t, &eps, &ts.schedule,
    )
    .unwrap();
    let mut dn_mut = ts.dn.clone();
    let names: Vec<String> = dn_mut.params.names().cloned().collect();
    let mut pass = 0usize;
    let h = 1e-4;
    for k in 0..samples {
        let mut r2 = ChaCha8Rng::seed_from_u64(302 + k as u64);
        let name = &names[r2.random_range(0..names.len())];
        let n = dn_mut.params.get(name).len();
        let i = r2.random_range(0..n);
        let orig = dn_mut.params.get(name).data()[i];
        let eval = |dn: &DenoiserParams| {
            reconstruction_loss_with_grads(dn, &ts.enc, &image, &caption, t, &eps, &ts.schedule)
                .unwrap()
                .0
        };
        dn_mut.params.get_mut(name).data_mut()[i] = orig + h;
        let hi = eval(&dn_mut);
        dn_mut.params.get_mut(name).data_mut()[i] = orig - h;
        let lo = eval(&dn_mut);
        dn_mut.params.get_mut(name).data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * h);
        let ad = gd.get(name).unwrap().data()[i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        if rel < 1e-3 {
            pass += 1;
        }
    }
    let rate_eq1_dn = pass as f64 / samples as f64;

    let mut enc_mut = ts.enc.clone_params();
    let rate_eq1_enc = fd_pass_rate(&mut enc_mut, &ge, samples, 303, |e| {
        reconstruction_loss_with_grads(&ts.dn, e, &image, &caption, t, &eps, &ts.schedule)
            .unwrap()
            .0
    });

    // Eq. 2: subject-preservation loss
    let (_, g2) =
        subject_loss_with_grads(&ts.dn, &ts.enc, &image, &caption, t, &eps, &ts.schedule)
            .unwrap();
    let mut enc_mut = ts.enc.clone_params();
    let rate_eq2 = fd_pass_rate(&mut enc_mut, &g2, samples, 304, |e| {
        subject_loss_with_grads(&ts.dn, e, &image, &caption, t, &eps, &ts.schedule)
            .unwrap()
            .0
    });

    // Eq. 3: text-embedding-preservation loss
    let batch = vec![0usize, 1];
    let (_, g3) = preservation_loss_with_grads(&ts.enc, &ts.enc_base, &ts.corpus, &batch);
    let mut enc_mut = ts.enc.clone_params();
    let rate_eq3 = fd_pass_rate(&mut enc_mut, &g3, samples, 305, |e| {
        preservation_loss_with_grads(e, &ts.enc_base, &ts.corpus, &batch).0
    });

    // Eq. 4: combined objective
    let lambda = 0.7;
    let (_, g4) = total_loss_with_grads(
        &ts.dn, &ts.enc, &ts.enc_base, &image, &caption, t, &eps, &ts.schedule, &ts.corpus,
        &batch, lambda,
    )
    .unwrap();
    let mut enc_mut = ts.enc.clone_params();
    let rate_eq4 = fd_pass_rate(&mut enc_mut, &g4, samples, 306, |e| {
        total_loss_with_grads(
            &ts.dn, e, &ts.enc_base, &image, &caption, t, &eps, &ts.schedule, &ts.corpus,
            &batch, lambda,
        )
        .unwrap()
        .0
    });

    let rates = [rate_eq1_dn, rate_eq1_enc, rate_eq2, rate_eq3, rate_eq4];
    let ok = rates.iter().all(|r| *r >= 0.99);
    let within_budget = t0.elapsed() < Duration::from_secs(120);
    verdict(3, "gradient checks", ok && within_budget);
    assert!(ok, "pass rates {rates:?}");
    assert!(within_budget, "took {:?}, budget 2 min", t0.elapsed());
}

// ---------------------------------------------------------------- c04

#[test]
fn c04_schedule_invariant() {
    let mut ok = true;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let s = make_schedule(1000, kind).unwrap();
        for t in 0..=1000 {
            let v = s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t);
            if (v - 1.0).abs() >= 1e-6 {
                ok = false;
            }
        }
    }
    verdict(4, "schedule invariant", ok);
    assert!(ok);
}

// ---------------------------------------------------------------- c05

#[test]
fn c05_residual_extraction_oracle() {
    let ts = tiny_stack(500);
    let bank =
        TemplateBank::parse("[fillers]\nbg = beach grass snow table\n[templates]\na {} on the {bg}\na photo of {}\n")
            .unwrap();
    let corpus = generate_corpus("circle", 5, &bank, &ts.vocab, 7, true).unwrap();
    let fp = Fingerprint {
        config_hash: "t".into(),
        corpus_seed: 7,
        checkpoint_hash: "t".into(),
    };
    let r = extract_residual(&ts.enc_base, &ts.enc, &corpus, "s", fp.clone()).unwrap();

    // independent brute-force mean over (sentence, occurrence) pairs
    let d = ts.enc.cfg.d_text;
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for (p, pos) in corpus.sentences.iter().zip(&corpus.subject_positions) {
        let base = encode(&ts.enc_base, p);
        let custom = encode(&ts.enc, p);
        for &k in pos {
            diffs.push(
                (0..d)
                    .map(|j| custom.vectors.at2(k, j) - base.vectors.at2(k, j))
                    .collect(),
            );
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
    let mut ok = (0..d).all(|j| (r.delta.data()[j] - mean[j]).abs() < 1e-6);

    // corpus-order invariance
    let mut permuted = corpus.clone();
    permuted.sentences.rotate_left(2);
    permuted.subject_positions.rotate_left(2);
    let r2 = extract_residual(&ts.enc_base, &ts.enc, &permuted, "s", fp).unwrap();
    ok &= r.delta.max_abs_diff(&r2.delta) < 1e-6;

    verdict(5, "residual extraction oracle", ok);
    assert!(ok);
}

// ---------------------------------------------------------------- c07

#[test]
fn c07_composition_locality_and_storage() {
    let ts = tiny_stack(700);
    let prompt = ts.vocab.tokenize("a circle and a circle").unwrap();
    let base = encode(&ts.enc, &prompt);
    let enc_checksum = ts.enc.params.checksum();
    let dn_checksum = ts.dn.params.checksum();

    let mut rng = ChaCha8Rng::seed_from_u64(701);
    let entry = |seed: u64| RegistryEntry {
        subject: format!("e{seed}"),
        base_category: "circle".into(),
        d_text: 8,
        delta: (0..8).map(|_| ChaCha8Rng::seed_from_u64(seed).random::<f32>()).collect(),
        fingerprint: Fingerprint {
            config_hash: "t".into(),
            corpus_seed: 0,
            checkpoint_hash: "t".into(),
        },
    };
    let bindings = vec![
        Binding { word: "circle".into(), occurrence: Some(1), entry: entry(1) },
        Binding { word: "circle".into(), occurrence: Some(2), entry: entry(2) },
    ];
    let out = compose_embedding(&base, &prompt, &bindings, &ts.vocab).unwrap();
    let positions = ts.vocab.subject_positions(&prompt, "circle");
    let mut ok = true;
    for r in 0..base.vectors.rows() {
        let changed = positions.contains(&r);
        let bits_equal = base.vectors.row(r) == out.vectors.row(r);
        if changed == bits_equal {
            ok = false;
        }
    }
    // zero training steps: parameter checksums unchanged
    ok &= ts.enc.params.checksum() == enc_checksum;
    ok &= ts.dn.params.checksum() == dn_checksum;
    let _ = rng.random::<f64>();

    // storage claim at d_text = 1024
    let big = RegistryEntry {
        subject: "big".into(),
        base_category: "circle".into(),
        d_text: 1024,
        delta: vec![0.5; 1024],
        fingerprint: Fingerprint {
            config_hash: "c".repeat(64),
            corpus_seed: 123456789,
            checkpoint_hash: "d".repeat(64),
        },
    };
    let bytes = big.to_bytes();
    ok &= bytes.len() >= 4096 && bytes.len() <= 4916;

    verdict(7, "composition locality and storage", ok);
    assert!(ok, "entry bytes = {}", big.to_bytes().len());
}

// ------------------------------------------------------- shared stack

struct Stack {
    dir: PathBuf,
    cfg: RunConfig,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    ck: Checkpoint,
    ckpt_path: PathBuf,
    registry_dir: PathBuf,
    alpha: Binding,
    beta: Binding,
    alpha_spec: ShapeSpec,
    beta_spec: ShapeSpec,
    pretrain_secs: f64,
    residual_secs: f64,
}

fn stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let cfg = RunConfig::default();
        let dir = std::env::temp_dir().join(format!("cones2-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let vocab = cfg.vocabulary();
        let schedule = make_schedule(cfg.model.t_max, cfg.model.schedule).unwrap();

        eprintln!("[stack] generating scenes");
        let items = cones2::world::generate_pretrain_set(&vocab, &cfg.scene_config()).unwrap();
        let uncond = vocab.tokenize("").unwrap();
        let enc0 =
            EncoderParams::init(cfg.encoder_config(&vocab), cfg.pretrain.seed.wrapping_add(1));
        let dn0 = DenoiserParams::init(cfg.denoiser_config(), cfg.pretrain.seed.wrapping_add(2));
        eprintln!("[stack] pretraining {} steps", cfg.pretrain.steps);
        let t0 = Instant::now();
        let (dn, enc, traj) = pretrain_base(
            &items,
            &uncond,
            &enc0,
            &dn0,
            &schedule,
            &cfg.pretrain_config(),
            |p| {
                if p.step % 1000 == 0 {
                    eprintln!("[stack] pretrain step {} loss {:.4}", p.step, p.loss);
                }
            },
        )
        .unwrap();
        let pretrain_secs = t0.elapsed().as_secs_f64();
        assert!(traj.last().unwrap().loss < traj.first().unwrap().loss);

        let ckpt_path = dir.join("base.ckpt");
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                meta: CheckpointMeta {
                    config_hash: cfg.hash(),
                    encoder: enc.cfg,
                    denoiser: dn.cfg,
                    schedule_kind: cfg.model.schedule,
                },
                encoder: enc,
                denoiser: dn,
            },
        )
        .unwrap();
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap())
            .unwrap();

        let registry_dir = dir.join("registry");
        let alpha_spec = ShapeSpec::new(Category::Circle, Color::Red, TextureKind::Solid);
        let beta_spec = ShapeSpec::new(Category::Circle, Color::Blue, TextureKind::Solid);
        eprintln!("[stack] learning residuals");
        let t0 = Instant::now();
        cmd_learn_residual(&cfg, &ckpt_path, &registry_dir, "alpha", &alpha_spec, false).unwrap();
        let residual_secs = t0.elapsed().as_secs_f64();
        cmd_learn_residual(&cfg, &ckpt_path, &registry_dir, "beta", &beta_spec, false).unwrap();

        let registry = ResidualRegistry::open(&registry_dir).unwrap();
        let alpha = Binding {
            word: "circle".into(),
            occurrence: Some(1),
            entry: registry.load("alpha").unwrap(),
        };
        let beta = Binding {
            word: "circle".into(),
            occurrence: Some(2),
            entry: registry.load("beta").unwrap(),
        };
        let ck = load_checkpoint(&ckpt_path).unwrap();
        eprintln!("[stack] ready (pretrain {pretrain_secs:.0}s, residual {residual_secs:.0}s)");
        Stack {
            dir,
            cfg,
            vocab,
            schedule,
            ck,
            ckpt_path,
            registry_dir,
            alpha,
            beta,
            alpha_spec,
            beta_spec,
            pretrain_secs,
            residual_secs,
        }
    })
}

fn two_subject_layout() -> Layout {
    Layout {
        canvas: [16, 16],
        boxes: vec![
            LayoutBox { subject: "alpha".into(), bbox: [0.0, 0.25, 0.45, 0.75] },
            LayoutBox { subject: "beta".into(), bbox: [0.55, 0.25, 1.0, 0.75] },
        ],
    }
}

/// Samples `n` seeds of the two-subject prompt under the given guidance
/// parameters and scores them.
fn run_two_subject(s: &Stack, gcfg: &GuidanceConfig, n: u64) -> EvalReport {
    let layout = two_subject_layout();
    let bindings = vec![s.alpha.clone(), s.beta.clone()];
    let items: Vec<EvalItem> = (0..n)
        .into_par_iter()
        .map(|seed| {
            let (img, _) = guided_sample(
                &s.ck.denoiser,
                &s.ck.encoder,
                &s.vocab,
                "a circle and a circle",
                &bindings,
                Some(&layout),
                gcfg,
                &s.cfg.sampler_config(),
                &s.schedule,
                seed,
                false,
            )
            .unwrap();
            EvalItem {
                image: img,
                subjects: vec![
                    ("alpha".into(), s.alpha_spec, layout.boxes[0].bbox),
                    ("beta".into(), s.beta_spec, layout.boxes[1].bbox),
                ],
            }
        })
        .collect();
    evaluate_run(&items, BTreeMap::new())
}

fn full_guidance_report() -> &'static EvalReport {
    static R: OnceLock<EvalReport> = OnceLock::new();
    R.get_or_init(|| {
        let s = stack();
        run_two_subject(s, &s.cfg.guidance_config(), 50)
    })
}

fn baseline_report() -> &'static EvalReport {
    static R: OnceLock<EvalReport> = OnceLock::new();
    R.get_or_init(|| {
        let s = stack();
        // masks zeroed: composition identical, guidance off
        let gcfg = GuidanceConfig { gamma_plus: 0.0, gamma_minus: 0.0, ..s.cfg.guidance_config() };
        run_two_subject(s, &gcfg, 50)
    })
}

// ---------------------------------------------------------------- c06

#[test]
fn c06_regularizer_efficacy() {
    let s = stack();
    let t0 = Instant::now();
    let vocab = &s.vocab;
    let spec = ShapeSpec::new(Category::Square, Color::Green, TextureKind::Solid);
    let dataset = make_subject_dataset("gamma", &spec, 4, (16, 16), vocab, 77).unwrap();
    let bank = TemplateBank::default_bank();
    let full = generate_corpus("square", 240, &bank, vocab, 78, true).unwrap();
    // train on the first 200 sentences, hold out the remaining 40
    let mut train = full.clone();
    train.sentences.truncate(200);
    train.subject_positions.truncate(200);
    let held: Vec<usize> = (200..240).collect();

    let cfg = TrainingConfig {
        lambda: 10.0,
        ..s.cfg.training_config()
    };
    let (enc_custom, _) = train_custom_encoder(
        &s.ck.encoder,
        &s.ck.denoiser,
        &dataset,
        &train,
        &s.schedule,
        &cfg,
        |_| {},
    )
    .unwrap();

    let mut subject_drift = 0.0;
    let mut subject_n = 0usize;
    let mut other_drift = 0.0;
    let mut other_n = 0usize;
    for &i in &held {
        let prompt = &full.sentences[i];
        let subj = &full.subject_positions[i];
        let base = encode(&s.ck.encoder, prompt);
        let custom = encode(&enc_custom, prompt);
        let drift = |p: usize| {
            let mut d2 = 0.0;
            for j in 0..base.vectors.cols() {
                let d = custom.vectors.at2(p, j) - base.vectors.at2(p, j);
                d2 += d * d;
            }
            d2.sqrt()
        };
        for &p in subj {
            subject_drift += drift(p);
            subject_n += 1;
        }
        for p in preserved_positions(prompt, subj) {
            other_drift += drift(p);
            other_n += 1;
        }
    }
    let subject_mean = subject_drift / subject_n.max(1) as f64;
    let other_mean = other_drift / other_n.max(1) as f64;
    let ok = other_mean < 0.1 * subject_mean;
    let within_budget = t0.elapsed() < Duration::from_secs(600);
    verdict(6, "regularizer efficacy", ok && within_budget);
    assert!(
        ok,
        "non-subject drift {other_mean:.6} vs subject drift {subject_mean:.6} (ratio {:.3})",
        other_mean / subject_mean.max(1e-12)
    );
    assert!(within_budget, "took {:?}, budget 10 min", t0.elapsed());
}

// ---------------------------------------------------------------- c08

#[test]
fn c08_end_to_end_single_subject() {
    let s = stack();
    let ok_budget = s.pretrain_secs <= 1800.0 && s.residual_secs <= 600.0;

    let items: Vec<EvalItem> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let (img, _) = guided_sample(
                &s.ck.denoiser,
                &s.ck.encoder,
                &s.vocab,
                "a photo of circle",
                std::slice::from_ref(&s.alpha),
                None,
                &s.cfg.guidance_config(),
                &s.cfg.sampler_config(),
                &s.schedule,
                seed,
                false,
            )
            .unwrap();
            EvalItem {
                image: img,
                subjects: vec![("alpha".into(), s.alpha_spec, [0.0, 0.0, 1.0, 1.0])],
            }
        })
        .collect();
    let report = evaluate_run(&items, BTreeMap::new());
    let ok = report.presence_rate >= 0.8 && report.confusion_rate <= 0.1 && ok_budget;
    verdict(8, "end-to-end single subject", ok);
    assert!(
        ok,
        "presence {:.3} confusion {:.3} pretrain {:.0}s residual {:.0}s",
        report.presence_rate, report.confusion_rate, s.pretrain_secs, s.residual_secs
    );
}

// ---------------------------------------------------------------- c09

#[test]
fn c09_end_to_end_two_similar_subjects() {
    let full = full_guidance_report();
    let base = baseline_report();
    let gain = full.all_present_rate - base.all_present_rate;
    let confusion_drop = full.confusion_rate < base.confusion_rate;
    let alpha_iou = full.per_subject["alpha"].median_iou();
    let beta_iou = full.per_subject["beta"].median_iou();
    let ok = gain >= 0.20 && confusion_drop && alpha_iou >= 0.3 && beta_iou >= 0.3;
    verdict(9, "end-to-end two similar subjects", ok);
    assert!(
        ok,
        "both-present {:.3} vs {:.3} (gain {:.3}), confusion {:.3} vs {:.3}, median IoU alpha {:.3} beta {:.3}",
        full.all_present_rate,
        base.all_present_rate,
        gain,
        full.confusion_rate,
        base.confusion_rate,
        alpha_iou,
        beta_iou
    );
}

// ---------------------------------------------------------------- c10

#[test]
fn c10_guidance_ablation_directions() {
    let s = stack();
    let full = full_guidance_report();
    let strengthen_only =
        run_two_subject(s, &GuidanceConfig { gamma_minus: 0.0, ..s.cfg.guidance_config() }, 50);
    let weaken_only =
        run_two_subject(s, &GuidanceConfig { gamma_plus: 0.0, ..s.cfg.guidance_config() }, 50);
    let confusion_direction = strengthen_only.confusion_rate > full.confusion_rate;
    let presence_direction = weaken_only.presence_rate < full.presence_rate;
    let ok = confusion_direction && presence_direction;
    verdict(10, "guidance ablation directions", ok);
    assert!(
        ok,
        "strengthen-only confusion {:.3} vs full {:.3}; weaken-only presence {:.3} vs full {:.3}",
        strengthen_only.confusion_rate,
        full.confusion_rate,
        weaken_only.presence_rate,
        full.presence_rate
    );
}

// ---------------------------------------------------------------- c11

#[test]
fn c11_generate_determinism() {
    let s = stack();
    let bin = env!("CARGO_BIN_EXE_cones2");
    let cfg_path = s.dir.join("config.json");
    let run = |out: &str| {
        let out_dir = s.dir.join(out);
        let status = std::process::Command::new(bin)
            .args([
                "generate",
                "--config",
                cfg_path.to_str().unwrap(),
                "--checkpoint",
                s.ckpt_path.to_str().unwrap(),
                "--prompt",
                "a photo of circle",
                "--bind",
                "circle=alpha",
                "--seed",
                "123",
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .env("CONES2_REGISTRY", &s.registry_dir)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out_dir.join("seed_123.png")).unwrap()
    };
    let a = run("det_a");
    let b = run("det_b");
    let ok = a == b;
    verdict(11, "generation determinism", ok);
    assert!(ok);
}

// Base-model sanity that the pretraining op promises: prompted categories
// show up in unconditioned-by-residual samples.
#[test]
fn pretrained_base_draws_prompted_categories() {
    let s = stack();
    let scfg = s.cfg.sampler_config();
    let emb_u = encode(&s.ck.encoder, &s.vocab.tokenize("").unwrap());
    let mut present = 0usize;
    let total = 16;
    let results: Vec<bool> = (0..total as u64)
        .into_par_iter()
        .map(|seed| {
            let cat = Category::ALL[(seed % 4) as usize];
            let prompt = s.vocab.tokenize(&format!("a photo of {}", cat.word())).unwrap();
            let emb_c = encode(&s.ck.encoder, &prompt);
            let img = cones2::diffusion::sample(
                &s.ck.denoiser, &emb_c, &emb_u, &s.schedule, &scfg, seed, None,
            )
            .unwrap();
            !cones2::world::detect_all(&img, cat).is_empty()
        })
        .collect();
    for r in results {
        if r {
            present += 1;
        }
    }
    let rate = present as f64 / total as f64;
    assert!(rate >= 0.7, "base category presence {rate:.2}");
}
