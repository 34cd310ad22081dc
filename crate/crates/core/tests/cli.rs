use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lfnet::evaluation::{load_image, save_image, ImageBuffer};
use lfnet::synthetic::texture_set;
use lfnet::training::save_model;
use lfnet::{ArchSpec, LatticeSpec, NetworkModel};

fn lfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_images(dir: &Path, count: usize, size: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in texture_set(count, size, size, 1, seed).iter().enumerate() {
        save_image(img, dir.join(format!("img_{i:02}.pgm"))).unwrap();
    }
}

fn zero_model(path: &Path, rows: usize, cols: usize) {
    let model: NetworkModel<f32> = NetworkModel::zeroed(&ArchSpec::Lattice(LatticeSpec::new(rows, cols, 1))).unwrap();
    save_model(&model, path).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn analyze_reports_structure() {
    let o = lfnet(&["analyze", "--rows", "4", "--cols", "5", "--channels", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("288,481"), "{text}");
    assert!(text.contains("43x43"));

    let text = stdout(&lfnet(&["analyze", "--rows", "4", "--cols", "6", "--channels", "1"]));
    assert!(text.contains("depth (with output)     min 5  max 25"), "{text}");

    let text = stdout(&lfnet(&["analyze", "--rows", "1", "--cols", "1", "--channels", "1"]));
    assert!(text.contains("depth (with output)     min 2  max 2"), "{text}");

    let text = stdout(&lfnet(&["analyze", "--rows", "4", "--cols", "10", "--channels", "3"]));
    assert!(text.contains("614,691") && text.contains("83x83"));
}

#[test]
fn analyze_json_is_stable() {
    let a = stdout(&lfnet(&["analyze", "--rows", "3", "--cols", "4", "--json"]));
    let b = stdout(&lfnet(&["analyze", "--rows", "3", "--cols", "4", "--json"]));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    for key in [
        "min_depth",
        "max_depth",
        "min_depth_without_output",
        "max_depth_without_output",
        "distances",
        "max_in_degree",
        "max_out_degree",
        "parameters",
        "receptive_field",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["max_in_degree"], 2);
}

#[test]
fn analyze_rejects_bad_dimensions() {
    let o = lfnet(&["analyze", "--rows", "0", "--cols", "3"]);
    assert!(!o.status.success());
    assert!(!stderr(&o).is_empty());
}

const DESK_CONFIG: &str = "\
# small desk run
rows = 2
cols = 3
channels = 1
noise = 25
patch_size = 16
pairs_per_epoch = 64
batch_size = 16
epochs = 10
";

#[test]
fn train_desk_config_writes_model_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_images(&data, 6, 32, 1);
    let cfg = dir.path().join("desk.cfg");
    fs::write(&cfg, DESK_CONFIG).unwrap();
    let model = dir.path().join("run/model.lfnt");
    let o = lfnet(&["train", "--config", p(&cfg), "--train-dir", p(&data), "--model", p(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(model.exists());
    let csv = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,val_psnr_db");
    assert_eq!(lines.len(), 11);
    assert!(stderr(&o).contains("epoch 10/10"));
}

#[test]
fn train_is_byte_identical_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_images(&data, 4, 24, 2);
    let run = |name: &str| {
        let model = dir.path().join(name).join("m.lfnt");
        let o = lfnet(&[
            "train", "--train-dir", p(&data), "--rows", "2", "--cols", "2", "--epochs", "3", "--pairs-per-epoch", "32",
            "--seed", "7", "--deterministic", "--model", p(&model),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(&model).unwrap(), fs::read(dir.path().join(name).join("history.csv")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn train_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dir");
    let o = lfnet(&["train", "--train-dir", p(&missing)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_dir"), "{}", stderr(&o));
    let data_code = o.status.code();

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "rows = 2\ncolour = 3\n").unwrap();
    let o = lfnet(&["train", "--config", p(&cfg)]);
    assert!(stderr(&o).contains("colour"));
    let config_code = o.status.code();

    let data = dir.path().join("data");
    write_images(&data, 2, 20, 3);
    let o = lfnet(&[
        "train", "--train-dir", p(&data), "--rows", "1", "--cols", "2", "--epochs", "3", "--pairs-per-epoch", "32",
        "--lr-start", "1e30", "--lr-end", "1e30", "--model", p(&dir.path().join("m.lfnt")),
    ]);
    assert!(stderr(&o).contains("non-finite loss"), "{}", stderr(&o));
    let nan_code = o.status.code();

    let codes = [data_code, config_code, nan_code];
    assert!(codes.iter().all(|c| matches!(c, Some(c) if *c != 0)));
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2], "{codes:?}");
}

#[test]
fn denoise_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("zero.lfnt");
    zero_model(&model, 2, 2);

    let color = dir.path().join("color.ppm");
    save_image(&texture_set(1, 16, 16, 3, 4)[0], &color).unwrap();
    let o = lfnet(&["denoise", "--model", p(&model), "--input", p(&color), "--output", p(&dir.path().join("x.ppm"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("channel"), "{}", stderr(&o));

    let gray = dir.path().join("gray.pgm");
    save_image(&texture_set(1, 321, 481, 1, 5)[0], &gray).unwrap();
    let out = dir.path().join("out.pgm");
    let o = lfnet(&["denoise", "--model", p(&model), "--input", p(&gray), "--output", p(&out), "--sigma", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("psnr_db=inf"), "{}", stdout(&o));
    let result = load_image(&out).unwrap();
    assert_eq!((result.height, result.width), (321, 481));
    assert_eq!(result, load_image(&gray).unwrap());

    let o = lfnet(&["denoise", "--model", p(&model), "--input", p(&gray), "--output", p(&out)]);
    assert!(o.status.success());
    assert_eq!(load_image(&out).unwrap(), load_image(&gray).unwrap());
}

#[test]
fn eval_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("zero.lfnt");
    zero_model(&model, 1, 2);
    let data = dir.path().join("data");
    write_images(&data, 4, 64, 6);

    let run = |report: &Path| {
        let o = lfnet(&[
            "eval", "--model", p(&model), "--data", p(&data), "--sigma", "25", "--seed", "3", "--report", p(report),
            "--json",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        (v["mean_psnr_db"].as_f64().unwrap(), fs::read_to_string(report).unwrap())
    };
    let (mean, csv) = run(&dir.path().join("a.csv"));
    assert!((mean - 20.17).abs() <= 0.3, "mean {mean}");
    let (_, csv2) = run(&dir.path().join("b.csv"));
    assert_eq!(csv, csv2);
    assert!(csv.starts_with("image,psnr_db,ssim\n"));
    assert_eq!(csv.lines().count(), 5);

    let o = lfnet(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--sigma"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = lfnet(&["eval", "--model", p(&model), "--data", p(&empty), "--sigma", "25"]);
    assert!(!o.status.success());
}

#[test]
fn compare_writes_both_columns() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let val = dir.path().join("val");
    write_images(&train, 4, 24, 7);
    write_images(&val, 2, 24, 8);
    let base = |out: &Path| -> Vec<String> {
        [
            "compare", "--train-dir", p(&train), "--val-dir", p(&val), "--rows", "2", "--cols", "3", "--epochs", "15",
            "--pairs-per-epoch", "16", "--seed", "4", "--out", p(out),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let out = dir.path().join("cmp.csv");
    let args = base(&out);
    let o = lfnet(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("plain-7-"), "{text}");
    assert!(text.contains("auto-selected"));
    let pct: f64 = text
        .split("auto-selected, ")
        .nth(1)
        .and_then(|s| s.split('%').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(pct.abs() <= 15.0, "{pct}");
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lfnet_psnr,plain_psnr");
    assert_eq!(lines.len(), 16);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert!(cols.len() == 3 && cols.iter().all(|c| !c.is_empty()), "{l}");
    }

    let out2 = dir.path().join("control.csv");
    let mut args = base(&out2);
    args.push("--control".into());
    let o = lfnet(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    for l in fs::read_to_string(&out2).unwrap().lines().skip(1) {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[1], cols[2]);
    }
}

#[test]
fn synth_writes_disjoint_sets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = lfnet(&["synth", "--out", p(&a), "--count", "3", "--height", "20", "--width", "30", "--seed", "5"]);
    assert!(o.status.success());
    let b = dir.path().join("b");
    lfnet(&["synth", "--out", p(&b), "--count", "2", "--height", "20", "--width", "30", "--seed", "5", "--skip", "3"]);
    let img: ImageBuffer = load_image(a.join("texture_0000.pgm")).unwrap();
    assert_eq!((img.width, img.height), (30, 20));
    assert_eq!(fs::read_dir(&a).unwrap().count(), 3);
    assert!(b.join("texture_0003.pgm").exists() && b.join("texture_0004.pgm").exists());
}
