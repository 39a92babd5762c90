use clap::{Parser, Subcommand};
use cones2::cli::{
    cmd_evaluate, cmd_generate, cmd_learn_residual, cmd_pretrain, registry_inspect,
    registry_list, registry_verify, BindSpec, GenerateArgs,
};
use cones2::config::RunConfig;
use cones2::error::Error;
use cones2::world::{Category, Color, ShapeSpec, TextureKind};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cones2",
    about = "Multi-subject customization for a toy conditional diffusion model"
)]
struct Cli {
    /// Run configuration (JSON); defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Residual registry directory (CONES2_REGISTRY overrides the config).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy dataset and train the base model.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Override pretraining step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn one subject's residual embedding against a base checkpoint.
    LearnResidual {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Registry key for the new residual.
        #[arg(long)]
        name: String,
        #[arg(long)]
        category: String,
        #[arg(long)]
        color: String,
        #[arg(long, default_value = "solid")]
        texture: String,
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compose residuals and sample images, optionally layout-guided.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Repeatable: word[@k]=entry.
        #[arg(long = "bind")]
        bind: Vec<String>,
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Repeatable: one image per seed.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        gamma_plus: Option<f64>,
        #[arg(long)]
        gamma_minus: Option<f64>,
        #[arg(long)]
        guide_steps: Option<usize>,
        /// Dump per-step subject-token attention maps as JSON.
        #[arg(long)]
        dump_attention: bool,
        /// Fan seeds out across threads (disables the single-thread
        /// bit-reproducibility guarantee).
        #[arg(long)]
        parallel: bool,
    },
    /// Score a generated batch with the procedural oracle.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON map entry-name -> shape spec; defaults to registry sidecars.
        #[arg(long)]
        specs: Option<PathBuf>,
        /// Accept a manifest produced under a different config hash.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect the residual registry.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
}

#[derive(Subcommand)]
enum RegistryAction {
    List,
    Inspect { name: String },
    Verify,
}

fn parse_spec(category: &str, color: &str, texture: &str) -> Result<ShapeSpec, Error> {
    let category = Category::from_word(category)
        .ok_or_else(|| Error::Validation(format!("unknown category {category:?}")))?;
    let color = Color::from_word(color)
        .ok_or_else(|| Error::Validation(format!("unknown color {color:?}")))?;
    let texture = TextureKind::from_word(texture)
        .ok_or_else(|| Error::Validation(format!("unknown texture {texture:?}")))?;
    Ok(ShapeSpec::new(category, color, texture))
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let registry_dir = std::env::var("CONES2_REGISTRY")
        .map(PathBuf::from)
        .ok()
        .or(cli.registry.clone())
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.registry));

    match cli.cmd {
        Cmd::Pretrain { out, steps, seed } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            cmd_pretrain(&cfg, &out)?;
        }
        Cmd::LearnResidual {
            checkpoint,
            name,
            category,
            color,
            texture,
            overwrite,
            steps,
            lr,
            lambda,
            seed,
        } => {
            if let Some(s) = steps {
                cfg.residual.steps = s;
            }
            if let Some(v) = lr {
                cfg.residual.lr = v;
            }
            if let Some(v) = lambda {
                cfg.residual.lambda = v;
            }
            if let Some(s) = seed {
                cfg.residual.seed = s;
            }
            let spec = parse_spec(&category, &color, &texture)?;
            cmd_learn_residual(&cfg, &checkpoint, &registry_dir, &name, &spec, overwrite)?;
        }
        Cmd::Generate {
            checkpoint,
            prompt,
            bind,
            layout,
            seeds,
            out,
            steps,
            scale,
            gamma_plus,
            gamma_minus,
            guide_steps,
            dump_attention,
            parallel,
        } => {
            if let Some(v) = steps {
                cfg.sampler.steps = v;
            }
            if let Some(v) = scale {
                cfg.sampler.scale = v;
            }
            if let Some(v) = gamma_plus {
                cfg.guidance.gamma_plus = v;
            }
            if let Some(v) = gamma_minus {
                cfg.guidance.gamma_minus = v;
            }
            if let Some(v) = guide_steps {
                cfg.guidance.guide_steps = v;
            }
            let binds = bind
                .iter()
                .map(|s| BindSpec::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            let seeds = if seeds.is_empty() { vec![0] } else { seeds };
            let manifest = cmd_generate(
                &cfg,
                &GenerateArgs {
                    checkpoint: &checkpoint,
                    registry_dir: &registry_dir,
                    prompt: &prompt,
                    binds: &binds,
                    layout: layout.as_deref(),
                    seeds: &seeds,
                    out_dir: &out,
                    dump_attention,
                    parallel,
                },
            )?;
            println!("{}", manifest.display());
        }
        Cmd::Evaluate { manifest, specs, force, out } => {
            let report = cmd_evaluate(
                &cfg,
                &manifest,
                &registry_dir,
                specs.as_deref(),
                force,
                out.as_deref(),
            )?;
            println!(
                "images: {}  pairs: {}\npresence rate:   {:.3}\nconfusion rate:  {:.3}\nall-present:     {:.3}\nmedian IoU:      {:.3}",
                report.n_images,
                report.n_pairs,
                report.presence_rate,
                report.confusion_rate,
                report.all_present_rate,
                report.median_iou
            );
        }
        Cmd::Registry { action } => match action {
            RegistryAction::List => print!("{}", registry_list(&registry_dir)?),
            RegistryAction::Inspect { name } => {
                print!("{}", registry_inspect(&registry_dir, &name)?)
            }
            RegistryAction::Verify => {
                let (text, ok) = registry_verify(&registry_dir)?;
                print!("{text}");
                if !ok {
                    return Err(Error::Corrupt {
                        path: registry_dir.display().to_string(),
                        reason: "one or more entries failed verification".into(),
                    });
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
