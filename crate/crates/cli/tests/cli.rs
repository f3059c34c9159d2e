use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
[data]
base_classes = 3
sessions = 2
way = 1
shot = 2
[data.synthetic]
image_size = 16
class_count = 5
samples_per_class = 6
test_samples_per_class = 3
signal_patch_size = 6
nuisance_patch_size = 6
[model]
input_size = 16
widths = [4, 4, 8, 8]
[protocol]
base_epochs = 1
rdi_epochs = 1
batch_size = 8
[analysis]
mask_exports = 2
"#;

fn rdi(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdi"))
        .args(args)
        .env("RDI_RUN_ROOT", run_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_config_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "seed = 5\n");
    let out = rdi(&["validate-config", &cfg], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 5") && text.contains("[protocol.optimizer]"), "{text}");
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[rdi]\nbeta = -1.0\n");
    let out = rdi(&["validate-config", &bad], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rdi.beta"));
    let typo = write(dir.path(), "typo.toml", "[rdi]\nlamda = 1.0\n");
    assert_eq!(rdi(&["run", "--config", &typo], dir.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_its_own_code_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}[protocol.optimizer]\nlearning_rate = 1e30\nwarmup_epochs = 0\n");
    let cfg = write(dir.path(), "div.toml", &text);
    let out = rdi(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("tiny-seed0").join("divergence.json").exists());
}

#[test]
fn schedule_only_plans() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdi(&["plan", "--preset", "cifar100"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    let counts: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(counts, ["60", "65", "70", "75", "80", "85", "90", "95", "100"]);
    let out = rdi(&["plan", "--preset", "cub200"], dir.path());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 12);
}

#[test]
fn run_then_report_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = rdi(&["run", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("tiny-seed0");
    for f in ["config.json", "metrics.csv", "reports/session_2.json", "checkpoints/base.ckpt", "report.md"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("session,top1,ba,na,aa,nn,gap"));
    assert_eq!(csv.lines().count(), 4);

    let echo = run.join("config.json");
    let out = rdi(&["run", "--config", echo.to_str().unwrap(), "--seed", "1"], dir.path());
    assert!(out.status.success());
    let other = dir.path().join("tiny-seed1");
    let out = rdi(
        &["report", run.to_str().unwrap(), "--compare", other.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    let md = fs::read_to_string(dir.path().join("comparison.md")).unwrap();
    assert!(md.contains("tiny-seed0") && md.contains("tiny-seed1"));
}
