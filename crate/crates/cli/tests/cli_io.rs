//! Command-line behavior: error codes, artifact determinism, resume, and
//! the warp identity case.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fskd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fskd"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fskd-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const MINI_CONF: &str = "\
species_count = 3
images_per_species = 10
image_size = 72
patch_size = 12
channels = 8
descriptor_dim = 12
head_hidden = 6
sd_hidden = 4
group_hidden = 6
latent_dim = 4
scales = 4,6
group_size = 2
train_episodes = 20
eval_episodes = 5
val_every = 0
overlay_count = 1
ukp_episodes = 3
test_species_fraction = 0.34
";

fn write_conf(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    let text = format!(
        "{MINI_CONF}data_dir = {}\nout_root = {}\n",
        dir.join("data").display(),
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("command runs")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_string()
}

#[test]
fn unknown_config_key_is_single_line_error() {
    let dir = workdir("badkey");
    let conf = dir.join("bad.conf");
    std::fs::write(&conf, "frobnicator = 1\n").unwrap();
    let out = run(fskd().args(["gen-data", "--config"]).arg(&conf));
    assert!(!out.status.success());
    let err = stderr_line(&out);
    assert!(err.starts_with("error: config.unknown-key:"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn unknown_command_and_empty_data_dir_fail() {
    let out = run(fskd().arg("transmogrify"));
    assert_eq!(out.status.code(), Some(2));

    let dir = workdir("nopath");
    let conf = dir.join("run.conf");
    std::fs::write(&conf, "data_dir =\n").unwrap();
    let out = run(fskd().args(["gen-data", "--config"]).arg(&conf));
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("data.missing-path"));
}

#[test]
fn gen_data_digest_is_idempotent() {
    let dir = workdir("digest");
    let conf = write_conf(&dir);
    let first = run(fskd().args(["gen-data", "--config"]).arg(&conf));
    assert!(first.status.success(), "{}", stderr_line(&first));
    let second = run(fskd().args(["gen-data", "--config"]).arg(&conf));
    assert!(second.status.success());
    let digest = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .find(|l| l.starts_with("digest:"))
            .unwrap()
            .to_string()
    };
    assert_eq!(digest(&first), digest(&second));
}

#[test]
fn eval_requires_episodes_and_produces_identical_metrics() {
    let dir = workdir("eval");
    let conf = write_conf(&dir);
    assert!(run(fskd().args(["gen-data", "--config"]).arg(&conf)).status.success());
    let trained = run(fskd().args(["train", "--config"]).arg(&conf));
    assert!(trained.status.success(), "{}", stderr_line(&trained));
    let ckpt = dir.join("out/run/checkpoint.json");

    let zero = run(fskd()
        .args(["eval", "--config"])
        .arg(&conf)
        .args(["--checkpoint"])
        .arg(&ckpt)
        .arg("eval_episodes=0"));
    assert!(!zero.status.success());
    assert!(stderr_line(&zero).contains("eval.zero-episodes"));

    let once = run(fskd().args(["eval", "--config"]).arg(&conf).args(["--checkpoint"]).arg(&ckpt));
    assert!(once.status.success(), "{}", stderr_line(&once));
    let metrics = dir.join("out/run/eval/metrics.json");
    let first = std::fs::read(&metrics).unwrap();
    let again = run(fskd().args(["eval", "--config"]).arg(&conf).args(["--checkpoint"]).arg(&ckpt));
    assert!(again.status.success());
    let second = std::fs::read(&metrics).unwrap();
    assert_eq!(first, second, "metrics.json must be byte-identical across reruns");
    assert!(dir.join("out/run/eval/overlay_0.svg").exists());
}

#[test]
fn resumed_cli_training_matches_single_run() {
    let dir = workdir("resume");
    let conf = write_conf(&dir);
    assert!(run(fskd().args(["gen-data", "--config"]).arg(&conf)).status.success());

    // identical configs; output roots differ only via the env override so
    // the checkpoints embed byte-identical configuration
    let full = run(fskd()
        .args(["train", "--config"])
        .arg(&conf)
        .arg("train_episodes=14")
        .env("FSKD_OUT_ROOT", dir.join("out_full")));
    assert!(full.status.success(), "{}", stderr_line(&full));

    // half, then resume to the same total
    assert!(run(fskd()
        .args(["train", "--config"])
        .arg(&conf)
        .arg("train_episodes=7")
        .env("FSKD_OUT_ROOT", dir.join("out_half")))
    .status
    .success());
    let resumed = run(fskd()
        .args(["train", "--config"])
        .arg(&conf)
        .arg("train_episodes=14")
        .env("FSKD_OUT_ROOT", dir.join("out_resumed"))
        .args(["--resume"])
        .arg(dir.join("out_half/run")));
    assert!(resumed.status.success(), "{}", stderr_line(&resumed));

    let a = std::fs::read(dir.join("out_full/run/checkpoint.json")).unwrap();
    let b = std::fs::read(dir.join("out_resumed/run/checkpoint.json")).unwrap();
    assert_eq!(a, b, "resumed checkpoint must match the uninterrupted run");
}

#[test]
fn checkpoint_file_roundtrips_bit_exactly() {
    let dir = workdir("ckpt");
    let conf = write_conf(&dir);
    assert!(run(fskd().args(["gen-data", "--config"]).arg(&conf)).status.success());
    assert!(run(fskd().args(["train", "--config"]).arg(&conf)).status.success());
    let path = dir.join("out/run/checkpoint.json");
    let bytes = std::fs::read(&path).unwrap();
    let state = fskd_core::pipeline::ModelState::load(&path).unwrap();
    assert_eq!(state.to_json().into_bytes(), bytes);
}

#[test]
fn warp_identity_correspondences_reproduce_input() {
    let dir = workdir("warp");
    // checkerboard query image
    let mut img = fskd_core::io::image::ImageRgb::new(48, 48);
    for y in 0..48 {
        for x in 0..48 {
            let v = if (x / 8 + y / 8) % 2 == 0 { 220 } else { 40 };
            img.put(x, y, [v, v / 2, 255 - v]);
        }
    }
    let query = dir.join("query.ppm");
    fskd_core::io::ppm::write_ppm(&query, &img).unwrap();
    let corr = serde_json::json!({
        "P": [[4.0, 4.0], [44.0, 4.0], [4.0, 44.0], [44.0, 44.0], [24.0, 20.0]],
        "P_prime": [[4.0, 4.0], [44.0, 4.0], [4.0, 44.0], [44.0, 44.0], [24.0, 20.0]],
        "J": [1.0, 1.0, 1.0, 1.0, 1.0],
        "lambda": 1.0
    });
    let corr_path = dir.join("corr.json");
    std::fs::write(&corr_path, serde_json::to_string(&corr).unwrap()).unwrap();
    let out = run(fskd()
        .args(["warp", "--query"])
        .arg(&query)
        .args(["--corr"])
        .arg(&corr_path)
        .args(["--mode", "uncertainty", "--out"])
        .arg(dir.join("warped")));
    assert!(out.status.success(), "{}", stderr_line(&out));
    let warped =
        fskd_core::io::ppm::read_ppm(&dir.join("warped/warped_uncertainty.ppm")).unwrap();
    assert_eq!(warped, img, "identity warp must reproduce the input bit-exactly");
}

#[test]
fn warp_reports_malformed_json_position() {
    let dir = workdir("warpbad");
    let corr_path = dir.join("corr.json");
    std::fs::write(&corr_path, "{\n  \"P\": [[0, 0], [1, 1]],\n  oops\n}").unwrap();
    let query = dir.join("q.ppm");
    fskd_core::io::ppm::write_ppm(&query, &fskd_core::io::image::ImageRgb::new(8, 8)).unwrap();
    let out = run(fskd()
        .args(["warp", "--query"])
        .arg(&query)
        .args(["--corr"])
        .arg(&corr_path)
        .args(["--out"])
        .arg(dir.join("w")));
    assert!(!out.status.success());
    let err = stderr_line(&out);
    assert!(err.contains("warp.corr-parse"), "{err}");
    assert!(err.contains("line 3"), "position missing: {err}");
}

#[test]
fn ukp_document_is_deterministic() {
    let dir = workdir("ukp");
    let conf = write_conf(&dir);
    assert!(run(fskd().args(["gen-data", "--config"]).arg(&conf)).status.success());
    assert!(run(fskd().args(["train", "--config"]).arg(&conf)).status.success());
    let ckpt = dir.join("out/run/checkpoint.json");
    assert!(run(fskd().args(["ukp", "--config"]).arg(&conf).args(["--checkpoint"]).arg(&ckpt))
        .status
        .success());
    let first = std::fs::read(dir.join("out/run/ukp.json")).unwrap();
    assert!(run(fskd().args(["ukp", "--config"]).arg(&conf).args(["--checkpoint"]).arg(&ckpt))
        .status
        .success());
    let second = std::fs::read(dir.join("out/run/ukp.json")).unwrap();
    assert_eq!(first, second);
}
