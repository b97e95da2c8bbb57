use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[phantom]
size = 16
count = 4
test_fraction = 0.5

[model]
critic_channels = [4, 8, 8, 8]
seg_channels = [4, 8, 8]

[train]
phases = [1, 1, 1]

[eval]
harness_epochs = 1
"#;

fn dosegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dosegan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn line_with<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let o = dosegan(&["phantom", "--config", p(&cfg), "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    p(&cfg).to_string()
}

#[test]
fn reference_config_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let o = dosegan(&["--config-reference"]);
    assert!(o.status.success());
    let path = dir.path().join("ref.toml");
    fs::write(&path, &o.stdout).unwrap();
    let o = dosegan(&["gradcheck", "--config", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn phantom_is_idempotent_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dosegan(&["phantom", "--count", "4", "--size", "16", "--seed", "7", "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let e = stderr(&o);
        assert!(line_with(&e, "wrote").contains("drf 6"));
        line_with(&e, "dataset digest").to_string()
    };
    assert_eq!(run("a"), run("b"));

    let bad = dir.path().join("bad");
    let o = dosegan(&["phantom", "--size", "24", "--out", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bad.exists());

    let a = dir.path().join("a");
    let o = dosegan(&["phantom", "--count", "4", "--size", "16", "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(2));
    let o = dosegan(&["phantom", "--count", "4", "--size", "16", "--out", p(&a), "--force"]);
    assert!(o.status.success());
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n\n[train]\nepochz = 3\n").unwrap();
    let o = dosegan(&["phantom", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:4"), "{}", stderr(&o));
}

#[test]
fn train_requires_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = dosegan(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_resume_translate_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let data = dir.path().join("data");
    let full = dir.path().join("full");
    let o = dosegan(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = stderr(&o);
    assert!(line_with(&e, "config digest").len() > 20);
    assert!(line_with(&e, "phase boundaries").ends_with("[1, 2, 3]"));
    let log = fs::read_to_string(full.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch phase loss_adv loss_content loss_seg psnr_val"));
    for f in ["phase1.sgck", "phase2.sgck", "phase3.sgck", "final.sgck"] {
        assert!(full.join(f).exists(), "{f}");
    }

    let part = dir.path().join("part");
    fs::create_dir_all(&part).unwrap();
    fs::copy(full.join("phase1.sgck"), part.join("latest.sgck")).unwrap();
    let head: Vec<&str> = log.lines().take(2).collect();
    fs::write(part.join("metrics.log"), head.join("\n") + "\n").unwrap();
    let o = dosegan(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&part), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(part.join("metrics.log")).unwrap(), log);
    assert_eq!(fs::read(part.join("final.sgck")).unwrap(), fs::read(full.join("final.sgck")).unwrap());

    let o = dosegan(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&full)]);
    assert_eq!(o.status.code(), Some(2));

    let ckpt = full.join("final.sgck");
    let x = data.join("test").join("case_0002").join("x.pvol");
    let (a, b) = (dir.path().join("a.pvol"), dir.path().join("b.pvol"));
    for out in [&a, &b] {
        let o = dosegan(&["translate", "--ckpt", p(&ckpt), "--in", p(&x), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let report = dir.path().join("eval.tsv");
    let o = dosegan(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(&report).unwrap();
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    assert_eq!(header.len(), 1 + 4 * 5);
    assert_eq!(&header[1..6], ["psnr_roi0", "psnr_roi1", "psnr_roi2", "psnr_roi3", "psnr_all"]);
    assert_eq!(header[20], "unet_all");
    let labels: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["low-dose", "model", "full-dose"]);

    let text = dir.path().join("eval.txt");
    let again = dir.path().join("again.tsv");
    let o = dosegan(&["report", "--in", p(&text), "--format", "tsv", "--out", p(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&again).unwrap().lines().next(), tsv.lines().next());
}

#[test]
fn translate_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = dosegan(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&run), "--scale", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let junk = dir.path().join("junk.pvol");
    fs::write(&junk, b"not a volume").unwrap();
    let o = dosegan(&["translate", "--ckpt", p(&run.join("final.sgck")), "--in", p(&junk), "--out", p(&dir.path().join("y.pvol"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = dosegan(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = stderr(&o);
    let worst: f64 = line_with(&e, "max relative error").rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-4);
}
