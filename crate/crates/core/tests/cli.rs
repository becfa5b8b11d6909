use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rangeseg");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn rangeseg(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let scene = configs().join("scene_toy.toml");
    let o = rangeseg(&[
        "synth",
        "--config",
        scene.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        seed,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_triplets_and_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", "4");
    let b = synth(dir.path(), "b", "4");
    let scans = std::fs::read_dir(a.join("scans")).unwrap().count();
    let labels = std::fs::read_dir(a.join("labels")).unwrap().count();
    let poses = std::fs::read_to_string(a.join("poses.txt")).unwrap();
    assert_eq!((scans, labels, poses.lines().count()), (25, 25, 25));
    assert!(a.join("manifest.toml").exists());
    for i in [0, 12, 24] {
        let f = format!("scans/{i:06}.bin");
        assert_eq!(
            std::fs::read(a.join(&f)).unwrap(),
            std::fs::read(b.join(&f)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(a.join("poses.txt")).unwrap(),
        std::fs::read(b.join("poses.txt")).unwrap()
    );
}

#[test]
fn project_reports_collision_free_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), "seq", "0");
    let scan = seq.join("scans/000000.bin");
    let sensor = seq.join("sensor.toml");
    let dump = dir.path().join("ri.ckpt");
    let o = rangeseg(&[
        "project",
        s(&scan),
        "--config",
        s(&sensor),
        "--mode",
        "simple",
        "--out",
        s(&dump),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("# seed = 0"), "{text}");
    assert!(text.contains("# mode = \"simple\""), "{text}");
    assert!(text.contains("fraction=1.0000"), "{text}");
    assert!(dump.exists());
}

#[test]
fn simple_projection_on_nonuniform_sensor_collides() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.toml");
    let text = std::fs::read_to_string(configs().join("scene_toy.toml")).unwrap();
    let sensor = std::fs::read_to_string(configs().join("sensor_nonuniform64.toml")).unwrap();
    let head = text
        .split("[sensor]")
        .next()
        .unwrap()
        .replace("frames = 25", "frames = 1");
    let rest = text.split("[ground]").nth(1).unwrap();
    let sensor_table: String = sensor
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(
        &scene,
        format!("{head}[sensor]\n{sensor_table}\n[ground]{rest}")
            .replace("noise_sigma = 0.01", "noise_sigma = 0.0"),
    )
    .unwrap();
    let out = dir.path().join("seq");
    let o = rangeseg(&["synth", "--config", s(&scene), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scan = out.join("scans/000000.bin");
    let cfg = out.join("sensor.toml");
    let fraction = |mode: &str| -> f64 {
        let o = rangeseg(&["project", s(&scan), "--config", s(&cfg), "--mode", mode]);
        assert!(o.status.success());
        let line = stdout(&o);
        let v = line.rsplit("fraction=").next().unwrap().trim();
        v.parse().unwrap()
    };
    assert_eq!(fraction("adaptive"), 1.0);
    assert!(fraction("simple") < 1.0);
}

#[test]
fn empty_scan_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("empty.bin");
    std::fs::write(&scan, []).unwrap();
    let sensor = configs().join("sensor_uniform64.toml");
    let o = rangeseg(&["project", s(&scan), "--config", s(&sensor)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    assert_eq!(rangeseg(&["train"]).status.code(), Some(2));
    assert_eq!(rangeseg(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn k3_longer_than_subsequence_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    let text = std::fs::read_to_string(configs().join("train_toy.toml"))
        .unwrap()
        .replace("k3 = 5", "k3 = 30");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let o = rangeseg(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        "/nonexistent/manifest.toml",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("k3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(!out.exists());
}

#[test]
fn train_resume_and_deterministic_eval() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), "seq", "1");
    let manifest = seq.join("manifest.toml");
    let cfg = configs().join("train_toy.toml");
    let run1 = dir.path().join("run1");
    let o = rangeseg(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run1),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("# seed = 3"));
    let log = std::fs::read_to_string(run1.join("metrics.tsv")).unwrap();
    let first: Vec<&str> = log.lines().collect();
    assert_eq!(first[0], "iteration\tframe\tloss\tlr");
    let n1 = first.len() - 1;
    assert!(first[1].starts_with("0\t"));

    let run2 = dir.path().join("run2");
    let ck = run1.join("model.ckpt");
    let o = rangeseg(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run2),
        "--resume",
        s(&ck),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log2 = std::fs::read_to_string(run2.join("metrics.tsv")).unwrap();
    let it: u64 = log2
        .lines()
        .nth(1)
        .unwrap()
        .split('\t')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(it, n1 as u64);

    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--checkpoint",
            s(&ck),
            "--manifest",
            s(&manifest),
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        let o = rangeseg(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let labels_a = dir.path().join("labels_a");
    let labels_b = dir.path().join("labels_b");
    let a = eval(
        &dir.path().join("a.tsv"),
        &["--knn", "--labels-out", s(&labels_a)],
    );
    let b = eval(
        &dir.path().join("b.tsv"),
        &["--knn", "--labels-out", s(&labels_b)],
    );
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("class\tiou"));
    assert!(text.contains("config_sha256"));
    for i in [0, 24] {
        let f = format!("seq/{i:06}.label");
        assert_eq!(
            std::fs::read(labels_a.join(&f)).unwrap(),
            std::fs::read(labels_b.join(&f)).unwrap()
        );
    }
}

#[test]
fn mismatched_checkpoint_names_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), "seq", "2");
    let manifest = seq.join("manifest.toml");
    let cfg = configs().join("train_toy.toml");
    let run = dir.path().join("run");
    let o = rangeseg(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let wide = dir.path().join("wide.toml");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("widths = [8, 8, 16]", "widths = [8, 8, 24]");
    std::fs::write(&wide, text).unwrap();
    let ck = run.join("model.ckpt");
    let out = dir.path().join("run2");
    let o = rangeseg(&[
        "train",
        "--config",
        s(&wide),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--init",
        s(&ck),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("parameter '"), "{err}");
}
