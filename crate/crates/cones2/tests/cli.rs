//! End-to-end command tests on a miniature configuration: every command
//! runs through the real binary, artifacts land on disk, and exit codes
//! follow the validation/numerical/io convention.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cones2")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = r#"{
        "model": {"d_text": 16, "n_layers": 1, "n_heads": 2, "context_len": 16,
                  "channels": 16, "image_size": 8, "attn_heads": 2, "groups": 4,
                  "t_max": 100},
        "pretrain": {"steps": 30, "batch_size": 2, "scenes": 48, "log_every": 10,
                     "two_shape_prob": 0.3},
        "residual": {"steps": 6, "corpus_count": 8, "reg_batch": 2,
                     "reference_images": 3, "lr": 0.001},
        "sampler": {"steps": 5, "scale": 3.0}
    }"#;
    let p = dir.join("config.json");
    std::fs::write(&p, cfg).unwrap();
    p
}

fn run(args: &[&str], registry: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .env("CONES2_REGISTRY", registry)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Stack {
    dir: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
    registry: PathBuf,
}

/// Pretrains the miniature model once and learns one residual; shared by
/// all command tests in this file.
fn stack() -> &'static Stack {
    use std::sync::OnceLock;
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let registry = dir.path().join("registry");
        let pretrain_dir = dir.path().join("pretrain");
        let out = run(
            &[
                "pretrain",
                "--config",
                config.to_str().unwrap(),
                "--out",
                pretrain_dir.to_str().unwrap(),
            ],
            &registry,
        );
        ok(&out);
        let checkpoint = pretrain_dir.join("base.ckpt");
        assert!(checkpoint.exists());
        let out = run(
            &[
                "learn-residual",
                "--config",
                config.to_str().unwrap(),
                "--checkpoint",
                checkpoint.to_str().unwrap(),
                "--name",
                "alpha",
                "--category",
                "circle",
                "--color",
                "red",
            ],
            &registry,
        );
        ok(&out);
        Stack { dir, config, checkpoint, registry }
    })
}

#[test]
fn pretrain_writes_loadable_checkpoint_and_deterministic_logs() {
    let s = stack();
    let ck = cones2::checkpoint::load_checkpoint(&s.checkpoint).unwrap();
    assert_eq!(ck.denoiser.cfg.image_size, 8);
    assert!(ck.encoder.params.all_finite());
    assert!(ck.denoiser.params.all_finite());

    // rerun with the same seed: byte-identical loss log and checkpoint
    let rerun = s.dir.path().join("pretrain2");
    let out = run(
        &[
            "pretrain",
            "--config",
            s.config.to_str().unwrap(),
            "--out",
            rerun.to_str().unwrap(),
        ],
        &s.registry,
    );
    ok(&out);
    let log_a = std::fs::read(s.checkpoint.parent().unwrap().join("pretrain_losses.jsonl")).unwrap();
    let log_b = std::fs::read(rerun.join("pretrain_losses.jsonl")).unwrap();
    assert_eq!(log_a, log_b);
    let ck_a = std::fs::read(&s.checkpoint).unwrap();
    let ck_b = std::fs::read(rerun.join("base.ckpt")).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn learn_residual_writes_entry_sidecar_and_losses() {
    let s = stack();
    let entry_path = s.registry.join("alpha.residual");
    assert!(entry_path.exists());
    assert!(s.registry.join("alpha.subject.json").exists());
    assert!(s.registry.join("alpha.losses.jsonl").exists());

    // size consistent with the binary layout: header + 4 * d_text + metadata
    let size = std::fs::metadata(&entry_path).unwrap().len() as usize;
    assert!(size >= 4 * 16, "entry too small: {size}");
    assert!(size <= 4 * 16 + 820, "entry too large: {size}");

    // the learned delta is non-zero
    let reg = cones2::registry::ResidualRegistry::open(&s.registry).unwrap();
    let e = reg.load("alpha").unwrap();
    assert!(e.delta.iter().any(|&v| v != 0.0));
    assert_eq!(e.base_category, "circle");

    // re-learning with the same seed reproduces the identical artifact
    let before = std::fs::read(&entry_path).unwrap();
    let out = run(
        &[
            "learn-residual",
            "--config",
            s.config.to_str().unwrap(),
            "--checkpoint",
            s.checkpoint.to_str().unwrap(),
            "--name",
            "alpha",
            "--category",
            "circle",
            "--color",
            "red",
            "--overwrite",
        ],
        &s.registry,
    );
    ok(&out);
    let after = std::fs::read(&entry_path).unwrap();
    assert_eq!(before, after);

    // duplicate without --overwrite is a validation error (exit 2)
    let out = run(
        &[
            "learn-residual",
            "--config",
            s.config.to_str().unwrap(),
            "--checkpoint",
            s.checkpoint.to_str().unwrap(),
            "--name",
            "alpha",
            "--category",
            "circle",
            "--color",
            "red",
        ],
        &s.registry,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_plain_and_deterministic() {
    let s = stack();
    let out_dir = s.dir.path().join("gen_plain");
    // no bindings, no layout: plain conditional samples
    let out = run(
        &[
            "generate",
            "--config",
            s.config.to_str().unwrap(),
            "--checkpoint",
            s.checkpoint.to_str().unwrap(),
            "--prompt",
            "a photo of circle",
            "--seed",
            "3",
            "--seed",
            "4",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &s.registry,
    );
    ok(&out);
    assert!(out_dir.join("seed_3.png").exists());
    assert!(out_dir.join("seed_4.png").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["prompt"], "a photo of circle");
    assert_eq!(
        manifest["params_checksum_before"],
        manifest["params_checksum_after"]
    );

    // identical config and seed: byte-identical image
    let out_dir2 = s.dir.path().join("gen_plain2");
    let out = run(
        &[
            "generate",
            "--config",
            s.config.to_str().unwrap(),
            "--checkpoint",
            s.checkpoint.to_str().unwrap(),
            "--prompt",
            "a photo of circle",
            "--seed",
            "3",
            "--out",
            out_dir2.to_str().unwrap(),
        ],
        &s.registry,
    );
    ok(&out);
    assert_eq!(
        std::fs::read(out_dir.join("seed_3.png")).unwrap(),
        std::fs::read(out_dir2.join("seed_3.png")).unwrap()
    );
}

#[test]
fn generate_with_binding_layout_mismatch_is_an_error() {
    let s = stack();
    // layout naming a subject that is not bound
    let layout = s.dir.path().join("bad_layout.json");
    std::fs::write(
        &layout,
        r#"{"canvas":[8,8],"boxes":[{"subject":"ghost","box":[0.0,0.0,0.5,0.5]}]}"#,
    )
    .unwrap();
    let out = run(
        &[
            "generate",
            "--config",
            s.config.to_str().unwrap(),
            "--checkpoint",
            s.checkpoint.to_str().unwrap(),
            "--prompt",
            "a photo of circle",
            "--bind",
            "circle=alpha",
            "--layout",
            layout.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            s.dir.path().join("gen_bad").to_str().unwrap(),
        ],
        &s.registry,
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_guided_runs_and_evaluate_consumes_manifest() {
    let s = stack();
    let layout = s.dir.path().join("layout.json");
    std::fs::write(
        &layout,
        r#"{"canvas":[8,8],"boxes":[{"subject":"alpha","box":[0.1,0.1,0.9,0.9]}]}"#,
    )
    .unwrap();
    let out_dir = s.dir.path().join("gen_guided");
    let out = run(
        &[
            "generate",
            "--config",
            s.config.to_str().unwrap(),
            "--checkpoint",
            s.checkpoint.to_str().unwrap(),
            "--prompt",
            "a photo of circle",
            "--bind",
            "circle=alpha",
            "--layout",
            layout.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
            "--dump-attention",
        ],
        &s.registry,
    );
    ok(&out);
    assert!(out_dir.join("attn_seed_7.json").exists());

    let manifest = out_dir.join("manifest.json");
    let out = run(
        &[
            "evaluate",
            "--config",
            s.config.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
        ],
        &s.registry,
    );
    ok(&out);
    let report = out_dir.join("eval_report.json");
    assert!(report.exists());
    let r: cones2::world::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n_images, 1);

    // mismatched config hash is refused without --force
    let other_cfg = s.dir.path().join("other.json");
    std::fs::write(&other_cfg, r#"{"sampler":{"steps":4}}"#).unwrap();
    let out = run(
        &[
            "evaluate",
            "--config",
            other_cfg.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
        ],
        &s.registry,
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        &[
            "evaluate",
            "--config",
            other_cfg.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--force",
        ],
        &s.registry,
    );
    ok(&out);
}

#[test]
fn registry_commands_and_corruption_detection() {
    let s = stack();
    // list contains the learned entry
    let out = run(&["registry", "list"], &s.registry);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("alpha"));
    assert!(text.contains("circle"));

    // inspect prints d_text and size
    let out = run(&["registry", "inspect", "alpha"], &s.registry);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("d_text:          16"));
    assert!(text.contains("file size:"));

    // empty registry lists cleanly
    let empty = s.dir.path().join("empty_reg");
    let out = run(&["registry", "list"], &empty);
    ok(&out);

    // verify passes, then detects injected corruption with exit code 4
    let out = run(&["registry", "verify"], &s.registry);
    ok(&out);
    let path = s.registry.join("alpha.residual");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    let out = run(&["registry", "verify"], &s.registry);
    assert_eq!(out.status.code(), Some(4));
    // restore for other tests
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
}
