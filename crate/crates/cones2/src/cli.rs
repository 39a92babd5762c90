//! Command implementations behind the binary: pretraining, residual
//! learning, generation, evaluation and registry management.

use crate::checkpoint::{
    checkpoint_file_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
use crate::config::{GuidanceSection, RunConfig, SamplerSection};
use crate::diffusion::pretrain::pretrain_base;
use crate::diffusion::sampler::StepTrace;
use crate::diffusion::schedule::make_schedule;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::layout::{guided_sample, Layout};
use crate::registry::{compose_embedding, Binding, RegistryEntry, ResidualRegistry};
use crate::residual::{extract_residual, train_custom_encoder, Fingerprint};
use crate::text::{generate_corpus, TemplateBank, Vocabulary};
use crate::world::{
    evaluate_run, generate_pretrain_set, make_subject_dataset, EvalItem, EvalReport, ShapeSpec,
};
use crate::diffusion::DenoiserParams;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Parsed `--bind word[@k]=entry` argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindSpec {
    pub word: String,
    pub occurrence: Option<usize>,
    pub entry: String,
}

impl BindSpec {
    pub fn parse(s: &str) -> Result<BindSpec> {
        let (lhs, entry) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("bad --bind {s:?}, expected word[@k]=entry")))?;
        let (word, occurrence) = match lhs.split_once('@') {
            None => (lhs.to_string(), None),
            Some((w, k)) => {
                let k: usize = k.parse().map_err(|_| {
                    Error::Validation(format!("bad occurrence index in --bind {s:?}"))
                })?;
                (w.to_string(), Some(k))
            }
        };
        if word.is_empty() || entry.is_empty() {
            return Err(Error::Validation(format!("bad --bind {s:?}")));
        }
        Ok(BindSpec { word, occurrence, entry: entry.to_string() })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Generates the toy dataset, trains the base denoiser and encoder, and
/// writes the checkpoint container plus loss log.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let config_hash = cfg.hash();
    let vocab = cfg.vocabulary();
    eprintln!("generating {} scenes", cfg.pretrain.scenes);
    let items = generate_pretrain_set(&vocab, &cfg.scene_config())?;
    let uncond = vocab.tokenize("")?;
    let enc0 = EncoderParams::init(cfg.encoder_config(&vocab), cfg.pretrain.seed.wrapping_add(1));
    let dn0 = DenoiserParams::init(cfg.denoiser_config(), cfg.pretrain.seed.wrapping_add(2));
    let schedule = make_schedule(cfg.model.t_max, cfg.model.schedule)?;
    eprintln!(
        "pretraining: {} steps, batch {}, {} denoiser + {} encoder parameters",
        cfg.pretrain.steps,
        cfg.pretrain.batch_size,
        dn0.params.num_scalars(),
        enc0.params.num_scalars()
    );
    let (dn, enc, losses) = pretrain_base(
        &items,
        &uncond,
        &enc0,
        &dn0,
        &schedule,
        &cfg.pretrain_config(),
        |p| eprintln!("step {:>6}  loss {:.6}", p.step, p.loss),
    )?;

    let ckpt_path = out_dir.join("base.ckpt");
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            meta: CheckpointMeta {
                config_hash: config_hash.clone(),
                encoder: enc.cfg,
                denoiser: dn.cfg,
                schedule_kind: cfg.model.schedule,
            },
            encoder: enc,
            denoiser: dn,
        },
    )?;
    let log: String = losses
        .iter()
        .map(|p| format!("{}\n", serde_json::to_string(p).unwrap()))
        .collect();
    write_text(&out_dir.join("pretrain_losses.jsonl"), &log)?;
    write_text(&out_dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;
    eprintln!("checkpoint written to {}", ckpt_path.display());
    Ok(ckpt_path)
}

/// Trains a custom encoder for one subject against the frozen base
/// checkpoint, extracts the residual and stores it in the registry along
/// with a subject-spec sidecar and the loss curve.
#[allow(clippy::too_many_arguments)]
pub fn cmd_learn_residual(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    registry_dir: &Path,
    name: &str,
    spec: &ShapeSpec,
    overwrite: bool,
) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint_path)?;
    let ckpt_hash = checkpoint_file_hash(checkpoint_path)?;
    let base_checksum = (ck.encoder.params.checksum(), ck.denoiser.params.checksum());
    let vocab = cfg.vocabulary();
    let schedule = make_schedule(ck.denoiser.cfg.t_max, ck.meta.schedule_kind)?;
    let canvas = (ck.denoiser.cfg.image_size, ck.denoiser.cfg.image_size);
    let dataset = make_subject_dataset(
        name,
        spec,
        cfg.residual.reference_images,
        canvas,
        &vocab,
        cfg.residual.subject_seed,
    )?;
    let bank = TemplateBank::default_bank();
    let corpus = generate_corpus(
        spec.category.word(),
        cfg.residual.corpus_count,
        &bank,
        &vocab,
        cfg.residual.corpus_seed,
        true,
    )?;
    eprintln!(
        "training custom encoder for {:?}: {} steps over {} reference images, corpus {}",
        name,
        cfg.residual.steps,
        dataset.images.len(),
        corpus.len()
    );
    let (enc_custom, curve) = train_custom_encoder(
        &ck.encoder,
        &ck.denoiser,
        &dataset,
        &corpus,
        &schedule,
        &cfg.training_config(),
        |p| {
            if p.step % 50 == 0 {
                eprintln!(
                    "step {:>5}  subject {:.6}  reg {:.6}  total {:.6}",
                    p.step, p.subject_loss, p.reg_loss, p.total
                );
            }
        },
    )?;
    // the base model must come out untouched
    assert_eq!(base_checksum.0, ck.encoder.params.checksum());
    assert_eq!(base_checksum.1, ck.denoiser.params.checksum());

    let fingerprint = Fingerprint {
        config_hash: cfg.hash(),
        corpus_seed: cfg.residual.corpus_seed,
        checkpoint_hash: ckpt_hash,
    };
    let residual = extract_residual(&ck.encoder, &enc_custom, &corpus, name, fingerprint)?;
    let registry = ResidualRegistry::open(registry_dir)?;
    let path = registry.save(&RegistryEntry::from_residual(&residual), overwrite)?;
    write_text(
        &registry_dir.join(format!("{name}.subject.json")),
        &serde_json::to_string_pretty(spec)?,
    )?;
    let log: String = curve
        .iter()
        .map(|p| format!("{}\n", serde_json::to_string(p).unwrap()))
        .collect();
    write_text(&registry_dir.join(format!("{name}.losses.jsonl")), &log)?;
    eprintln!("residual for {name:?} written to {}", path.display());
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestBinding {
    pub word: String,
    pub occurrence: Option<usize>,
    pub entry: String,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub config_hash: String,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    pub prompt: String,
    pub bindings: Vec<ManifestBinding>,
    pub layout: Option<Layout>,
    pub layout_hash: Option<String>,
    pub guidance: GuidanceSection,
    pub sampler: SamplerSection,
    pub image_size: usize,
    pub images: Vec<ManifestImage>,
    /// Base-model parameter checksums taken before and after sampling;
    /// equality certifies that composition performed zero training steps.
    pub params_checksum_before: String,
    pub params_checksum_after: String,
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub registry_dir: &'a Path,
    pub prompt: &'a str,
    pub binds: &'a [BindSpec],
    pub layout: Option<&'a Path>,
    pub seeds: &'a [u64],
    pub out_dir: &'a Path,
    pub dump_attention: bool,
    /// Fan seeds out to worker threads (per-image results are unchanged,
    /// but single-threaded mode is the one with the bit-reproducibility
    /// guarantee).
    pub parallel: bool,
}

fn dump_attention_json(
    out_dir: &Path,
    seed: u64,
    positions: &[usize],
    traces: &[StepTrace],
) -> Result<()> {
    #[derive(Serialize)]
    struct LayerDump {
        layer: usize,
        resolution: (usize, usize),
        /// heads x positions x cells
        weights: Vec<Vec<Vec<f32>>>,
    }
    #[derive(Serialize)]
    struct StepDump {
        step: usize,
        timestep: usize,
        layers: Vec<LayerDump>,
    }
    #[derive(Serialize)]
    struct Dump<'a> {
        seed: u64,
        positions: &'a [usize],
        steps: Vec<StepDump>,
    }
    let steps = traces
        .iter()
        .map(|t| StepDump {
            step: t.step,
            timestep: t.timestep,
            layers: t
                .records
                .iter()
                .map(|r| LayerDump {
                    layer: r.layer,
                    resolution: r.resolution,
                    weights: r
                        .weights
                        .iter()
                        .map(|w| {
                            positions
                                .iter()
                                .map(|&p| {
                                    (0..w.rows()).map(|q| w.at2(q, p) as f32).collect()
                                })
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let dump = Dump { seed, positions, steps };
    write_text(
        &out_dir.join(format!("attn_seed_{seed}.json")),
        &serde_json::to_string(&dump)?,
    )
}

/// Samples one image per seed with composition and optional layout
/// guidance, writes PNGs and the run manifest.
pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs<'_>) -> Result<PathBuf> {
    if args.seeds.is_empty() {
        return Err(Error::Validation("at least one --seed is required".into()));
    }
    std::fs::create_dir_all(args.out_dir)?;
    let ck = load_checkpoint(args.checkpoint)?;
    let ckpt_hash = checkpoint_file_hash(args.checkpoint)?;
    let vocab = cfg.vocabulary();
    let schedule = make_schedule(ck.denoiser.cfg.t_max, ck.meta.schedule_kind)?;
    let registry = ResidualRegistry::open(args.registry_dir)?;

    let mut bindings = Vec::with_capacity(args.binds.len());
    for b in args.binds {
        let entry = registry.load(&b.entry)?;
        bindings.push(Binding {
            word: b.word.clone(),
            occurrence: b.occurrence,
            entry,
        });
    }
    let layout = match args.layout {
        Some(p) => Some(Layout::load(p)?),
        None => None,
    };
    let layout_hash = match args.layout {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            let mut h = <sha2::Sha256 as sha2::Digest>::new();
            sha2::Digest::update(&mut h, &bytes);
            Some(crate::params::hex_string(&sha2::Digest::finalize(h)))
        }
        None => None,
    };

    let before = format!("{}:{}", ck.encoder.params.checksum(), ck.denoiser.params.checksum());
    let gcfg = cfg.guidance_config();
    let scfg = cfg.sampler_config();

    let run_one = |seed: u64| -> Result<(u64, LatentImage, Vec<StepTrace>)> {
        let (img, traces) = guided_sample(
            &ck.denoiser,
            &ck.encoder,
            &vocab,
            args.prompt,
            &bindings,
            layout.as_ref(),
            &gcfg,
            &scfg,
            &schedule,
            seed,
            args.dump_attention,
        )?;
        Ok((seed, img, traces))
    };
    let results: Vec<Result<(u64, LatentImage, Vec<StepTrace>)>> = if args.parallel {
        args.seeds.par_iter().map(|&s| run_one(s)).collect()
    } else {
        args.seeds.iter().map(|&s| run_one(s)).collect()
    };

    let mut images = Vec::new();
    let positions: Vec<usize> = {
        let prompt = vocab.tokenize(args.prompt)?;
        let mut all = Vec::new();
        for b in &bindings {
            all.extend(b.positions(&prompt, &vocab)?);
        }
        all.sort_unstable();
        all.dedup();
        all
    };
    for r in results {
        let (seed, img, traces) = r?;
        let file = format!("seed_{seed}.png");
        img.save_png(&args.out_dir.join(&file))?;
        if args.dump_attention {
            dump_attention_json(args.out_dir, seed, &positions, &traces)?;
        }
        images.push(ManifestImage { seed, file });
    }
    let after = format!("{}:{}", ck.encoder.params.checksum(), ck.denoiser.params.checksum());
    assert_eq!(before, after, "generation must not touch model parameters");

    let manifest = GenerateManifest {
        config_hash: cfg.hash(),
        checkpoint: args.checkpoint.display().to_string(),
        checkpoint_hash: ckpt_hash,
        prompt: args.prompt.to_string(),
        bindings: bindings
            .iter()
            .map(|b| ManifestBinding {
                word: b.word.clone(),
                occurrence: b.occurrence,
                entry: b.entry.subject.clone(),
                fingerprint: b.entry.fingerprint.clone(),
            })
            .collect(),
        layout,
        layout_hash,
        guidance: GuidanceSection {
            gamma_plus: gcfg.gamma_plus,
            gamma_minus: gcfg.gamma_minus,
            eta_form: gcfg.eta_form,
            eta_peak: gcfg.eta_peak,
            guide_steps: gcfg.guide_steps,
        },
        sampler: SamplerSection { steps: scfg.steps, scale: scfg.guidance_scale },
        image_size: ck.denoiser.cfg.image_size,
        images,
        params_checksum_before: before,
        params_checksum_after: after,
    };
    let manifest_path = args.out_dir.join("manifest.json");
    write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest_path)
}

/// Scores a generated batch with the oracle. Subject appearances come
/// from `--specs` (JSON map name -> spec) or the registry sidecars.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    manifest_path: &Path,
    registry_dir: &Path,
    specs_path: Option<&Path>,
    force: bool,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let manifest: GenerateManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.config_hash != cfg.hash() && !force {
        return Err(Error::Validation(format!(
            "manifest config hash {} does not match the current config {} (pass --force to override)",
            &manifest.config_hash[..12.min(manifest.config_hash.len())],
            &cfg.hash()[..12]
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let specs: BTreeMap<String, ShapeSpec> = match specs_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => {
            let mut m = BTreeMap::new();
            for b in &manifest.bindings {
                let sidecar = registry_dir.join(format!("{}.subject.json", b.entry));
                if !sidecar.exists() {
                    return Err(Error::Validation(format!(
                        "no subject spec for {:?}: pass --specs or keep {} next to the registry entry",
                        b.entry,
                        sidecar.display()
                    )));
                }
                let spec: ShapeSpec = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
                m.insert(b.entry.clone(), spec);
            }
            m
        }
    };

    let full_canvas = [0.0, 0.0, 1.0, 1.0];
    let mut items = Vec::new();
    for im in &manifest.images {
        let img = LatentImage::load_png(&dir.join(&im.file))?;
        let mut subjects = Vec::new();
        for b in &manifest.bindings {
            let spec = *specs.get(&b.entry).ok_or_else(|| {
                Error::Validation(format!("specs file lacks entry {:?}", b.entry))
            })?;
            let bbox = manifest
                .layout
                .as_ref()
                .and_then(|l| l.boxes_of(&b.entry).first().copied())
                .unwrap_or(full_canvas);
            subjects.push((b.entry.clone(), spec, bbox));
        }
        items.push(EvalItem { image: img, subjects });
    }
    let metadata = BTreeMap::from([
        ("config_hash".to_string(), manifest.config_hash.clone()),
        ("prompt".to_string(), manifest.prompt.clone()),
        ("manifest".to_string(), manifest_path.display().to_string()),
    ]);
    let report = evaluate_run(&items, metadata);
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("eval_report.json"));
    write_text(&out_path, &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn registry_list(registry_dir: &Path) -> Result<String> {
    let registry = ResidualRegistry::open(registry_dir)?;
    let mut out = format!(
        "{:<20} {:<10} {:>6} {:>8}  {}\n",
        "NAME", "CATEGORY", "D_TEXT", "BYTES", "FINGERPRINT"
    );
    for name in registry.list()? {
        let e = registry.load(&name)?;
        let size = std::fs::metadata(registry.path_of(&name))?.len();
        out.push_str(&format!(
            "{:<20} {:<10} {:>6} {:>8}  cfg={} corpus_seed={}\n",
            e.subject,
            e.base_category,
            e.d_text,
            size,
            &e.fingerprint.config_hash[..12.min(e.fingerprint.config_hash.len())],
            e.fingerprint.corpus_seed,
        ));
    }
    Ok(out)
}

pub fn registry_inspect(registry_dir: &Path, name: &str) -> Result<String> {
    let registry = ResidualRegistry::open(registry_dir)?;
    let e = registry.load(name)?;
    let size = std::fs::metadata(registry.path_of(name))?.len();
    let norm: f32 = e.delta.iter().map(|v| v * v).sum::<f32>().sqrt();
    Ok(format!(
        "name:            {}\nbase category:   {}\nd_text:          {}\nfile size:       {} bytes\ndelta l2 norm:   {:.6}\nconfig hash:     {}\ncorpus seed:     {}\ncheckpoint hash: {}\n",
        e.subject,
        e.base_category,
        e.d_text,
        size,
        norm,
        e.fingerprint.config_hash,
        e.fingerprint.corpus_seed,
        e.fingerprint.checkpoint_hash,
    ))
}

/// Validates every entry; the bool is false when any entry fails.
pub fn registry_verify(registry_dir: &Path) -> Result<(String, bool)> {
    let registry = ResidualRegistry::open(registry_dir)?;
    let mut out = String::new();
    let mut all_ok = true;
    for name in registry.list()? {
        match registry.load(&name) {
            Ok(_) => out.push_str(&format!("{name}: ok\n")),
            Err(e) => {
                all_ok = false;
                out.push_str(&format!("{name}: FAILED ({e})\n"));
            }
        }
    }
    if out.is_empty() {
        out.push_str("registry is empty\n");
    }
    Ok((out, all_ok))
}

/// Compose-only inspection helper used by tests: encodes the prompt,
/// applies bindings, and reports which rows changed.
pub fn compose_report(
    enc: &EncoderParams,
    vocab: &Vocabulary,
    prompt_text: &str,
    bindings: &[Binding],
) -> Result<Vec<usize>> {
    let prompt = vocab.tokenize(prompt_text)?;
    let base = crate::encoder::encode(enc, &prompt);
    let composed = compose_embedding(&base, &prompt, bindings, vocab)?;
    Ok((0..base.vectors.rows())
        .filter(|&r| base.vectors.row(r) != composed.vectors.row(r))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_spec_parsing() {
        assert_eq!(
            BindSpec::parse("circle=alpha").unwrap(),
            BindSpec { word: "circle".into(), occurrence: None, entry: "alpha".into() }
        );
        assert_eq!(
            BindSpec::parse("circle@2=beta").unwrap(),
            BindSpec { word: "circle".into(), occurrence: Some(2), entry: "beta".into() }
        );
        assert!(BindSpec::parse("circle").is_err());
        assert!(BindSpec::parse("circle@x=beta").is_err());
        assert!(BindSpec::parse("=beta").is_err());
    }
}
