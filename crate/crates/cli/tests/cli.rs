use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn so3mar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_so3mar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = so3mar(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const GEN: &str = "\
world = benchmark
mode_std = 0.08
n_cond = 6
n_uncond = 6
occlusion = fixed:18,20,22
beta_std = 0.05
scale_min = 0.8
scale_max = 1.2
shift = 0.1
";

fn train_cfg(steps: u64, p_uncond: f64) -> String {
    format!(
        "lambda_diff = 1\nlambda_3d = 1\nlambda_2d = 1\nmask_ratio_min = 0.7\nmask_ratio_max = 1\n\
         p_uncond = {p_uncond}\nlr = 0.001\nbatch_size = 3\nsteps = {steps}\nseed = 4\ngrad_clip = 1\n\
         checkpoint_every = 2\nvariant = so3\nwidth = 8\nheads = 2\nenc_blocks = 1\ndec_blocks = 1\n\
         den_width = 8\nden_blocks = 1\ntime_dim = 4\ndiffusion_steps = 50\nalpha_max = 4.41\n"
    )
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("gen.cfg"), GEN).unwrap();
        Fixture { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, out: &str, seed: &str) -> PathBuf {
        let dir = self.p(out);
        ok(&["gen-data", "--config", s(&self.p("gen.cfg")), "--out", s(&dir), "--seed", seed]);
        dir
    }

    fn train(&self, data: &Path, out: &str, cfg: &str, resume: bool) -> PathBuf {
        let cfg_path = self.p(&format!("{out}.cfg"));
        std::fs::write(&cfg_path, cfg).unwrap();
        let dir = self.p(out);
        let (cond, uncond) = (data.join("cond.txt"), data.join("uncond.txt"));
        let mut args = vec![
            "train",
            "--config",
            s(&cfg_path),
            "--data-cond",
            s(&cond),
            "--data-uncond",
            s(&uncond),
            "--out",
            s(&dir),
        ];
        if resume {
            args.push("--resume");
        }
        ok(&args);
        dir
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_echoes_seed() {
    let f = Fixture::new();
    let a = f.gen("a", "7");
    let b = f.gen("b", "7");
    let c = f.gen("c", "8");
    for name in ["cond.txt", "uncond.txt", "skeleton.txt"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
    assert_ne!(read(&a.join("cond.txt")), read(&c.join("cond.txt")));
    let out = ok(&["gen-data", "--config", s(&f.p("gen.cfg")), "--out", s(&f.p("d")), "--seed", "7"]);
    assert!(out.contains("# seed = 7"));
}

#[test]
fn config_errors_exit_with_usage_status() {
    let f = Fixture::new();
    let cfg = f.p("missing.cfg");
    std::fs::write(&cfg, GEN.replace("n_uncond = 6\n", "")).unwrap();
    let out = so3mar(&["gen-data", "--config", s(&cfg), "--out", s(&f.p("x")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_uncond"));

    std::fs::write(&cfg, GEN.replace("n_cond = 6", "n_cond = 0")).unwrap();
    let out = so3mar(&["gen-data", "--config", s(&cfg), "--out", s(&f.p("y")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.p("y").exists());

    let out = so3mar(&["gen-data", "--config", s(&cfg), "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = so3mar(&["gen-data", "--config", s(&f.p("nope.cfg")), "--out", s(&f.p("z")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let f = Fixture::new();
    let data = f.gen("data", "1");
    let a = f.train(&data, "a", &train_cfg(4, 0.5), false);
    let b = f.train(&data, "b", &train_cfg(4, 0.5), false);
    assert_eq!(read(&a.join("model.ckpt")), read(&b.join("model.ckpt")));
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    let log = String::from_utf8(read(&a.join("metrics.csv"))).unwrap();
    assert!(log.starts_with("step,l_diff,l_3d,l_2d,total\n"));
    assert_eq!(log.lines().count(), 5);

    f.train(&data, "c", &train_cfg(2, 0.5), false);
    let c = f.train(&data, "c", &train_cfg(4, 0.5), true);
    assert_eq!(read(&a.join("model.ckpt")), read(&c.join("model.ckpt")));
    assert_eq!(read(&a.join("metrics.csv")), read(&c.join("metrics.csv")));
}

#[test]
fn unconditional_training_logs_zero_keypoint_loss() {
    let f = Fixture::new();
    let data = f.gen("data", "2");
    let run = f.train(&data, "u", &train_cfg(3, 1.0), false);
    let log = String::from_utf8(read(&run.join("metrics.csv"))).unwrap();
    for line in log.lines().skip(1) {
        let l_2d: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(l_2d, 0.0);
    }
}

#[test]
fn sample_eval_export_round() {
    let f = Fixture::new();
    let data = f.gen("data", "3");
    let run = f.train(&data, "run", &train_cfg(2, 0.5), false);
    let ckpt = run.join("model.ckpt");
    let obs = data.join("cond.txt");
    let sample = |out: &str, q: &str, eta: &str| {
        let p = f.p(out);
        ok(&[
            "sample", "--ckpt", s(&ckpt), "--mode", "cond", "--obs-file", s(&obs), "--q", q, "--k-steps", "2",
            "--t-steps", "4", "--eta", eta, "--seed", "5", "--out", s(&p),
        ]);
        p
    };
    let a = sample("a.txt", "1", "0");
    let b = sample("b.txt", "1", "0");
    assert_eq!(read(&a), read(&b));
    let many = sample("m.txt", "3", "1");
    let text = String::from_utf8(read(&many)).unwrap();
    assert_eq!(text.lines().count(), 1 + 6 * 3);
    assert!(f.p("m.txt.timing.csv").exists());

    let missing = so3mar(&["sample", "--ckpt", s(&ckpt), "--mode", "cond", "--q", "1", "--out", s(&f.p("x.txt"))]);
    assert_eq!(missing.status.code(), Some(2));

    let un = f.p("u.txt");
    ok(&["sample", "--ckpt", s(&ckpt), "--mode", "uncond", "--q", "25", "--t-steps", "3", "--out", s(&un)]);
    assert_eq!(String::from_utf8(read(&un)).unwrap().lines().count(), 26);

    // ground truth scored against itself
    let report = f.p("self.csv");
    ok(&[
        "eval", "--pred", s(&obs), "--gt", s(&obs), "--metrics", "mpjpe,pa", "--q-list", "1", "--out", s(&report),
    ]);
    let csv = String::from_utf8(read(&report)).unwrap();
    for line in csv.lines().skip(1) {
        let mean: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(mean.abs() < 1e-9, "{line}");
    }

    let report = f.p("m.csv");
    let args = [
        "eval", "--pred", s(&many), "--gt", s(&obs), "--metrics", "mpjpe,pa,apd,coverage", "--q-list", "1,3",
        "--out", s(&report),
    ];
    ok(&args);
    let first = read(&report);
    ok(&args);
    assert_eq!(first, read(&report));
    let csv = String::from_utf8(first).unwrap();
    assert!(csv.starts_with("q,metric,mean,ci95,n,monotone\n"));
    assert!(csv.lines().any(|l| l.starts_with("3,mpjpe,") && l.ends_with(",pass")));

    let bad = so3mar(&["eval", "--pred", s(&many), "--gt", s(&obs), "--metrics", "bleu"]);
    assert_eq!(bad.status.code(), Some(2));

    let broken = f.p("broken.txt");
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = "{not json".into();
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let out = so3mar(&["eval", "--pred", s(&broken), "--gt", s(&obs), "--q-list", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3"));

    let csv = f.p("export.csv");
    ok(&["export", "--input", s(&obs), "--out", s(&csv)]);
    let exported = String::from_utf8(read(&csv)).unwrap();
    assert_eq!(exported.lines().count(), 1 + 6 * 24);
    assert!(exported.lines().nth(19).unwrap().ends_with(",,0"));
}

#[test]
fn oracle_checks() {
    for (check, n) in [("exp-log", "2000"), ("reverse-consistency", "50"), ("posterior", "100"), ("grad", "20")] {
        let out = ok(&["oracle", "--check", check, "--n", n, "--seed", "3"]);
        assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
    }
}
