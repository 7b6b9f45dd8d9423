use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[run]
seeds = [0, 1]

[cohort]
dim = 4
slides_per_client = 30
patches_min = 20
patches_max = 30
components_per_class = 2

[distill]
synthetic_patches = 8
components = 2
iterations = 20

[train]
epochs = 4
hidden_dim = 4

[curriculum]
t0 = 2

[mia]
seeds = 2
"#;

fn fedhd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhd")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn gen(dir: &Path, cfg: &str, seed: &str, out: &str) -> String {
    let out = dir.join(out);
    let o = fedhd(&["gen-cohort", "--config", cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out.join("manifest.csv").to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(fedhd(&["--help"]).status.code(), Some(0));
    assert_eq!(fedhd(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(fedhd(&["federate", "--seed", "minus-one"]).status.code(), Some(1));
    assert_eq!(fedhd(&["sweep", "--param", "K", "--values", "1"]).status.code(), Some(1));
    let o = fedhd(&["federate", "--config", "/nonexistent/fedhd.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/fedhd.toml"));
}

#[test]
fn unknown_config_key_names_key_and_line() {
    let (dir, _) = setup("");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 4\nepohcs = 5\n").unwrap();
    let out = dir.path().join("o");
    let o = fedhd(&["gen-cohort", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("epohcs") && err.contains("line 3"), "{err}");
    assert!(!out.exists());

    fs::write(&cfg, "[curriculum]\nt0 = 50\n").unwrap();
    let o = fedhd(&["gen-cohort", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("t0"));
}

#[test]
fn gen_cohort_is_deterministic_and_guarded() {
    let (dir, cfg) = setup("");
    let a = gen(dir.path(), &cfg, "3", "a");
    let b = gen(dir.path(), &cfg, "3", "b");
    let c = gen(dir.path(), &cfg, "4", "c");
    assert_eq!(data_rows(Path::new(&a)), 3 * 30);
    let bag = |m: &str| fs::read(Path::new(m).parent().unwrap().join("bags/c1-s0007.bag")).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(bag(&a), bag(&b));
    assert_ne!(bag(&a), bag(&c));

    let out = dir.path().join("a");
    let again = fedhd(&["gen-cohort", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let forced = fedhd(&["gen-cohort", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap(), "--force"]);
    assert_eq!(forced.status.code(), Some(0));
    assert_eq!(bag(&a), bag(&c));
}

#[test]
fn distill_writes_one_synthetic_slide_per_training_slide() {
    let (dir, cfg) = setup("");
    let manifest = gen(dir.path(), &cfg, "0", "cohort");
    let train = fs::read_to_string(&manifest).unwrap().lines().filter(|l| l.contains(",train,")).count();
    let out = dir.path().join("syn");
    let o = fedhd(&["distill", "--manifest", &manifest, "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("synthetic_manifest.csv")), train);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("8 patches x 4 dims"), "{stdout}");
    // initial loss plus one row per iteration, best-so-far never rising
    assert_eq!(data_rows(&out.join("loss_traces.csv")), train * 21);
    let text = fs::read_to_string(out.join("loss_traces.csv")).unwrap();
    let mut last: Option<(String, f64)> = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let best: f64 = f[4].parse().unwrap();
        if let Some((id, prev)) = &last {
            if id == f[1] {
                assert!(best <= *prev);
            }
        }
        last = Some((f[1].to_string(), best));
    }
}

#[test]
fn distill_without_o2o_emits_fixed_slides_per_class() {
    let (dir, cfg) = setup("\n[ablation]\no2o = false\n");
    let out = dir.path().join("syn");
    let o = fedhd(&["distill", "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("synthetic_manifest.csv")), 3 * 10 * 2);
}

#[test]
fn federate_rows_and_reproducibility() {
    let (dir, cfg) = setup("");
    let manifest = gen(dir.path(), &cfg, "0", "cohort");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fedhd(&["federate", "--manifest", &manifest, "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("f1"), run("f2"));
    assert_eq!(data_rows(&a.join("metrics.csv")), 3 * 3);
    assert_eq!(data_rows(&a.join("summary.csv")), 3);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());

    // both config seeds, cohort generated in memory
    let out = dir.path().join("f3");
    let o = fedhd(&["federate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("metrics.csv")), 2 * 3 * 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("±"));
}

#[test]
fn missing_bag_is_a_runtime_error_without_output() {
    let (dir, cfg) = setup("");
    let manifest = gen(dir.path(), &cfg, "0", "cohort");
    fs::remove_file(dir.path().join("cohort/bags/c2-s0011.bag")).unwrap();
    let out = dir.path().join("f");
    let o = fedhd(&["federate", "--manifest", &manifest, "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c2-s0011"), "{}", stderr(&o));
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn mia_reports_each_partition() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("m");
    let o = fedhd(&["mia", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("mia.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 2);
    assert!(lines[3].starts_with("max,") && lines[4].starts_with("mean,"));
}

#[test]
fn sweep_rows_and_validation() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("s");
    let o = fedhd(&["sweep", "--param", "M", "--values", "1,2", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with("param,value,seed,client,accuracy,mcc\n"));
    assert_eq!(data_rows(&out.join("sweep.csv")), 2 * 2 * 3);

    // T = 3 is below 2M; rejected before anything runs
    let bad = dir.path().join("bad");
    let o = fedhd(&["sweep", "--param", "T", "--values", "16,3", "--config", &cfg, "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("T = \"3\""), "{}", stderr(&o));
    assert!(!bad.exists());
}
