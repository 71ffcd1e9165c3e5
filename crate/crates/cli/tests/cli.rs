use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mflab");

const SOFTPLUS: &str = r#"[data]
input = "uniform_sphere"
labels = "binary"
class_probability = "halfspace"
normal = [1.0, 0.0]
positive = 0.8
negative = 0.2
seed = 4

[loss]
kind = "softplus"

[init]
m = 128
d = 2
seed = 4

[flow]
dt = 0.05
T = 1.0
batch_size = 256
record_every = 4

[probe]
grid_size = 64
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn mflab(&self, args: &[&str], out: &Path) -> Output {
        Command::new(BIN).args(args).env("MFLAB_OUT", out).output().unwrap()
    }
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn run_writes_all_outputs() {
    let env = Env::new();
    let cfg = env.config("exp.toml", SOFTPLUS);
    let out = env.out("run");
    let o = env.mflab(&["run", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,risk,N,sup_g,sup_V,mink_drift,cone_violations,dissipation,barron\n"));
    assert_eq!(traj.lines().count(), 1 + 6);
    let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
    assert!(verdict.starts_with("verdict="));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.contains(&verdict.trim().replace('=', ",")));
    let ensemble = fs::read_to_string(out.join("final_ensemble.csv")).unwrap();
    assert_eq!(ensemble.lines().count(), 1 + 128);
}

#[test]
fn reruns_are_bit_identical() {
    let env = Env::new();
    let cfg = env.config("exp.toml", SOFTPLUS);
    let (a, b) = (env.out("a"), env.out("b"));
    env.mflab(&["run", cfg.to_str().unwrap()], &a);
    env.mflab(&["run", cfg.to_str().unwrap(), "--threads", "3"], &b);
    for f in ["trajectory.csv", "report.csv", "verdict.txt", "final_ensemble.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let env = Env::new();
    let cfg = env.config("exp.toml", SOFTPLUS);
    let (a, b) = (env.out("a"), env.out("b"));
    env.mflab(&["run", cfg.to_str().unwrap()], &a);
    env.mflab(&["run", cfg.to_str().unwrap(), "--seed-override", "99"], &b);
    assert_ne!(fs::read(a.join("final_ensemble.csv")).unwrap(), fs::read(b.join("final_ensemble.csv")).unwrap());
}

#[test]
fn power_loss_with_gaussian_data_is_a_config_error() {
    let env = Env::new();
    let bad = SOFTPLUS
        .replace("\"uniform_sphere\"", "\"gaussian\"")
        .replace("labels = \"binary\"", "labels = \"regression\"\ntarget = \"zero\"")
        .replace("kind = \"softplus\"", "kind = \"power\"\np = 2.0");
    let cfg = env.config("bad.toml", &bad);
    let o = env.mflab(&["run", cfg.to_str().unwrap()], &env.out("bad"));
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    let kind_line = bad.lines().position(|l| l.starts_with("kind = \"power\"")).unwrap() + 1;
    assert!(err.contains(&format!("bad.toml:{kind_line}:")), "{err}");
    assert!(err.contains("compact support"), "{err}");
    assert!(!env.out("bad").exists());
}

#[test]
fn unknown_key_is_reported_with_its_line() {
    let env = Env::new();
    let typo = SOFTPLUS.replace("record_every = 4", "record_evry = 4");
    let line = typo.lines().position(|l| l.starts_with("record_evry")).unwrap() + 1;
    let cfg = env.config("typo.toml", &typo);
    let o = env.mflab(&["run", cfg.to_str().unwrap()], &env.out("typo"));
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains(&format!("typo.toml:{line}:")), "{}", text(&o.stderr));
}

#[test]
fn frozen_field_gives_growing_moments() {
    let env = Env::new();
    let frozen = SOFTPLUS
        .replace("record_every = 4", "record_every = 4\nT = 4.0\nfreeze_field = \"constant\"\nfreeze_residual = -0.5")
        .replace("T = 1.0\n", "");
    let cfg = env.config("frozen.toml", &frozen);
    let out = env.out("frozen");
    let o = env.mflab(&["run", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("verdict.txt")).unwrap(), "verdict=growing-moments\n");
}

#[test]
fn non_finite_run_exits_2_with_a_dump() {
    let env = Env::new();
    let cfg = env.config(
        "blow.toml",
        r#"[data]
input = "uniform_sphere"
labels = "regression"
target = "linear"
target_w = [50.0, 50.0]

[loss]
kind = "power"
p = 4.0

[init]
m = 16
d = 2

[flow]
dt = 0.5
T = 50.0
batch_size = 64
integrator = "euler"
"#,
    );
    let out = env.out("blow");
    let o = env.mflab(&["run", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("aborted_ensemble.csv").exists());
    assert!(!out.join("verdict.txt").exists());
}

#[test]
fn check_passes_and_catches_a_perturbed_gradient() {
    let env = Env::new();
    let cfg = env.config("exp.toml", SOFTPLUS);
    let o = env.mflab(&["check", cfg.to_str().unwrap()], &env.out("c"));
    let stdout = text(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("halving ratios"));

    let o = env.mflab(&["check", cfg.to_str().unwrap(), "--perturb-gradient", "1e-3"], &env.out("c"));
    let stdout = text(&o.stdout);
    assert_eq!(o.status.code(), Some(3), "{stdout}");
    let failed: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert!(failed.iter().any(|l| l.contains("field.euler_identity")), "{stdout}");
    assert!(failed.iter().any(|l| l.contains("flow.homogeneity_identity")), "{stdout}");
}

#[test]
fn admissible_writes_the_delta_table() {
    let env = Env::new();
    let cfg = env.config("g.toml", &SOFTPLUS.replace("\"uniform_sphere\"", "\"gaussian\""));
    let out = env.out("adm");
    let o = env.mflab(&["admissible", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("admissible.csv")).unwrap();
    assert!(csv.starts_with("delta,ratio_max\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(text(&o.stdout).contains("verdict=pass"), "{}", text(&o.stdout));
}

#[test]
fn sard_writes_a_histogram() {
    let env = Env::new();
    let cfg = env.config("exp.toml", SOFTPLUS);
    let out = env.out("sard");
    let o = env.mflab(&["sard", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("sard.csv")).unwrap();
    assert!(csv.starts_with("level_lo,level_hi,count,near_critical\n"));
    assert_eq!(csv.lines().count(), 1 + 20);
}

#[test]
fn sweep_runs_every_cell() {
    let env = Env::new();
    let cfg = env.config("s.toml", &format!("{SOFTPLUS}\n[sweep]\n\"init.seed\" = [1, 2]\n\"flow.integrator\" = [\"euler\", \"rk4\"]\n"));
    let out = env.out("sweep");
    let o = env.mflab(&["sweep", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let index = fs::read_to_string(out.join("cells.csv")).unwrap();
    let rows: Vec<&str> = index.lines().collect();
    assert_eq!(rows[0], "cell,flow.integrator,init.seed,verdict");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("cell-000,euler,1,"));
    for i in 0..4 {
        assert!(out.join(format!("cell-{i:03}/trajectory.csv")).exists());
    }
}

#[test]
fn invalid_sweep_value_is_a_config_error() {
    let env = Env::new();
    let cfg = env.config("s.toml", &format!("{SOFTPLUS}\n[sweep]\n\"flow.integrator\" = [\"rk5\"]\n"));
    let o = env.mflab(&["sweep", cfg.to_str().unwrap()], &env.out("sweep"));
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("s.toml:"), "{}", text(&o.stderr));
}
