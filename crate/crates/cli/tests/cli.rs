use std::path::{Path, PathBuf};
use std::process::Command;

use zj_cli::{load_dataset, RunConfig};
use zj_core::zoo::Checkpoint;

const MLP: &str = "model.kind = mlp\nmodel.widths = 2,16,3\ndata.source = blobs\ndata.n = 300\ndata.sigma = 0.1\n";

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn zj(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_zj")).args(args).env("ZJ_LOG", "quiet").output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the blobs mlp into `dir/name` and returns the checkpoint path.
fn train(dir: &Path, name: &str, extra: &str, seed: u64) -> PathBuf {
    let cfg = write_cfg(dir, &format!("{name}.cfg"), &format!("{MLP}{extra}"));
    let out = dir.join(name);
    let r = zj(&["train", "--config", s(&cfg), "--seed", &seed.to_string(), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out.join("final.zjk1")
}

#[test]
fn plan_tables() {
    let d = tempfile::tempdir().unwrap();
    let vit = "model.kind = mini_vit\nmodel.in_dim = 4\nmodel.dim = 8\nmodel.blocks = 12\nmodel.heads = 2\n\
               model.mlp_dim = 16\nmodel.classes = 3\nmodel.seq_len = 4\n";
    let cfg = write_cfg(d.path(), "a.cfg", &format!("{vit}architect.config = \"(LoRA.adapt):->(blocks[0:12].attn.qkv){{inout1}}\"\n"));
    let r = zj(&["plan", "--config", s(&cfg), "--out", s(&d.path().join("a"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout.lines().filter(|l| l.contains(" lora ")).count(), 12);
    assert!(d.path().join("a/resolved.cfg").exists());

    let cfg = write_cfg(d.path(), "b.cfg", &format!("{MLP}architect.config = \"(LinearProbe.adapt):\"\n"));
    let r = zj(&["plan", "--config", s(&cfg), "--out", s(&d.path().join("b"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let tuned: Vec<&str> = r.stdout.lines().filter(|l| l.contains(" tune ")).collect();
    assert!(tuned.iter().all(|l| l.starts_with("layers[1].")), "{tuned:?}");
    assert_eq!(tuned.len(), 2);

    let cfg = write_cfg(d.path(), "c.cfg", &format!("{MLP}architect.config = \"(LoRA.adapt)->(x){{in}}\"\n"));
    let r = zj(&["plan", "--config", s(&cfg), "--out", s(&d.path().join("c"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("byte 12") && r.stderr.contains("            ^"), "{}", r.stderr);
}

#[test]
fn bad_input_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let unknown = write_cfg(d.path(), "u.cfg", "model.depth = 3\n");
    assert_eq!(zj(&["plan", "--config", s(&unknown)]).code, 3);
    assert_eq!(zj(&["frobnicate"]).code, 2);

    let kd = write_cfg(d.path(), "kd.cfg", &format!("{MLP}tuner.loss = kd_kl:1\n"));
    let r = zj(&["train", "--config", s(&kd), "--out", s(&out)]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    let sp = write_cfg(d.path(), "sp.cfg", &format!("{MLP}tuner.reg = l2_sp:0.1\n"));
    assert_eq!(zj(&["train", "--config", s(&sp), "--out", s(&out)]).code, 3);

    let ev = write_cfg(d.path(), "ev.cfg", MLP);
    let r = zj(&["eval", "--config", s(&ev), "--ckpt", s(&d.path().join("missing.zjk1")), "--out", s(&out)]);
    assert_eq!(r.code, 5);
    assert!(r.stderr.contains("missing.zjk1"));
}

#[test]
fn train_is_deterministic_and_learns() {
    let d = tempfile::tempdir().unwrap();
    let extra = "architect.config = \"(LinearProbe.adapt):\"\ntuner.epochs = 5\n";
    let a = train(d.path(), "a", extra, 3);
    let b = train(d.path(), "b", extra, 3);
    let hist = |p: &Path| std::fs::read(p.parent().unwrap().join("history.jsonl")).unwrap();
    assert_eq!(hist(&a), hist(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(hist(&a)).unwrap().lines().count(), 5);

    let full = train(d.path(), "full", "tuner.epochs = 50\n", 1);
    let ev = write_cfg(d.path(), "ev.cfg", &format!("{MLP}eval.split = train\nseed = 1\n"));
    let r = zj(&["eval", "--config", s(&ev), "--ckpt", s(&full), "--out", s(&d.path().join("ev"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("ev/metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(m["accuracy"], 1.0);
    assert!(r.stdout.contains("accuracy"));

    let r = zj(&["eval", "--config", s(&ev), "--ckpt", s(&full), "--ckpt", s(&full), "--ckpt", s(&full), "--out", s(&d.path().join("ev3"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let m3: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("ev3/metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(m3["accuracy"], m["accuracy"]);
    assert_eq!(m3["per_class_accuracy"], m["per_class_accuracy"]);
    assert!((m3["mean_loss"].as_f64().unwrap() - m["mean_loss"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn merge_commands() {
    let d = tempfile::tempdir().unwrap();
    let a = train(d.path(), "a", "tuner.epochs = 3\n", 1);
    let b = train(d.path(), "b", "tuner.epochs = 3\n", 2);
    let payload = |p: &Path| Checkpoint::load(p).unwrap().entries;

    let soup = write_cfg(d.path(), "soup.cfg", "merger.method = soup\n");
    let r = zj(&["merge", "--config", s(&soup), "--ckpt", s(&a), "--ckpt", s(&a), "--out", s(&d.path().join("m1"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(payload(&d.path().join("m1/merged.zjk1")), payload(&a));
    assert!(d.path().join("m1/merge_report.json").exists());

    let wise = write_cfg(d.path(), "wise.cfg", "merger.method = wise_ft\nmerger.alpha = 1\n");
    let r = zj(&["merge", "--config", s(&wise), "--ckpt", s(&a), "--ckpt", s(&b), "--out", s(&d.path().join("m2"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(payload(&d.path().join("m2/merged.zjk1")), payload(&b));

    let other = write_cfg(d.path(), "o.cfg", "model.kind = mlp\nmodel.widths = 2,8,3\ndata.source = blobs\n");
    let r = zj(&["train", "--config", s(&other), "--out", s(&d.path().join("o"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = zj(&["merge", "--config", s(&soup), "--ckpt", s(&a), "--ckpt", s(&d.path().join("o/final.zjk1")), "--out", s(&d.path().join("m3"))]);
    assert_eq!(r.code, 4, "{}", r.stderr);

    for (method, extra) in [
        ("greedy_soup", ""),
        ("fisher", ""),
        ("weight_match", ""),
        ("ot_fusion", "merger.eps = 0.002\nmerger.iters = 20000\n"),
        ("repair", "merger.align = weight_match\n"),
    ] {
        let cfg = write_cfg(d.path(), "x.cfg", &format!("{MLP}merger.method = {method}\n{extra}"));
        let out = d.path().join(method);
        let r = zj(&["merge", "--config", s(&cfg), "--ckpt", s(&a), "--ckpt", s(&b), "--out", s(&out)]);
        assert_eq!(r.code, 0, "{method}: {}", r.stderr);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("merge_report.json")).unwrap()).unwrap();
        assert_eq!(report["recipe"], method);
    }

    let vague = write_cfg(d.path(), "v.cfg", &format!("{MLP}merger.method = ot_fusion\nmerger.eps = 100\n"));
    let r = zj(&["merge", "--config", s(&vague), "--ckpt", s(&a), "--ckpt", s(&b), "--out", s(&d.path().join("v"))]);
    assert_eq!(r.code, 8, "{}", r.stderr);

    let r = zj(&["inspect", "--ckpt", s(&a)]);
    assert_eq!(r.code, 0);
    assert!(r.stdout.contains("layers[0].weight") && r.stdout.contains("[16, 2]"));
}

#[test]
fn dataset_sources() {
    let cfg = RunConfig::parse("data.source = blobs\ndata.k = 3\ndata.d = 2\ndata.n = 300\ndata.sigma = 0.1\ndata.seed = 7\n").unwrap();
    let ds = load_dataset(&cfg).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (210, 45, 45));
    assert!(ds.labels.iter().all(|&l| l < 3));

    let d = tempfile::tempdir().unwrap();
    let idx = |name: &str, magic: u32, dims: &[u32], n: usize| {
        let mut b = magic.to_be_bytes().to_vec();
        for v in dims {
            b.extend(v.to_be_bytes());
        }
        b.extend(vec![1u8; n]);
        let p = d.path().join(name);
        std::fs::write(&p, b).unwrap();
        p
    };
    let images = idx("img", 0x0803, &[3, 2, 2], 12);
    let labels = idx("lab", 0x0801, &[4], 4);
    let cfg = RunConfig::parse(&format!("data.source = idx\ndata.images = {}\ndata.labels = {}\n", s(&images), s(&labels))).unwrap();
    assert!(matches!(load_dataset(&cfg), Err(zj_core::Error::LabelMismatch(_))));

    let csv = d.path().join("x.csv");
    std::fs::write(&csv, "1.0,2.0,0\n3.0,abc,1\n").unwrap();
    let cfg = RunConfig::parse(&format!("data.source = csv\ndata.path = {}\ndata.label_col = 2\n", s(&csv))).unwrap();
    assert!(matches!(load_dataset(&cfg), Err(zj_core::Error::MalformedCsv { row: 2, col: 1, .. })));
}
