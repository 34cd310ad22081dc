//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lfnet::autograd::{grad_check, random_input, GradCheckOptions};
use lfnet::evaluation::{evaluate_dataset, psnr, save_image, ssim, EvalOptions};
use lfnet::lattice::{
    analyze, build_lattice, distance_to_output, matched_plain, max_degrees, min_max_depth,
    receptive_field,
};
use lfnet::synthetic::texture_set;
use lfnet::training::{decode_model, encode_model, load_model, save_model, train, NoiseMode, TrainConfig, TrainHistory, Validation};
use lfnet::{initialize_model, ArchSpec, Fusion, LatticeSpec, NetworkModel, PlainSpec, Shape, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn check(failures: &mut Vec<String>, id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if elapsed > budget {
        o.passed = false;
        o.detail.push_str(&format!("; over the {:?} budget", budget));
    }
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {name}: {} ({:.2}s)", o.detail, elapsed.as_secs_f64());
    if !o.passed {
        failures.push(id.to_string());
    }
}

fn lattice(n: usize, m: usize, c: usize) -> ArchSpec {
    ArchSpec::Lattice(LatticeSpec::new(n, m, c))
}

fn criterion_1() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (n, m, c, expect, rounded) in [(4, 5, 1, 288_481, "0.29"), (4, 6, 1, 353_377, "0.35"), (4, 10, 3, 614_691, "0.61")] {
        let arch = lattice(n, m, c);
        let analytic = analyze(&arch).unwrap().parameters.total;
        let model: NetworkModel<f32> = initialize_model(&arch, 1).unwrap();
        let brute = model.num_learnable();
        let cli = Command::new(env!("CARGO_BIN_EXE_lfnet"))
            .args(["analyze", "--rows", &n.to_string(), "--cols", &m.to_string(), "--channels", &c.to_string()])
            .output()
            .unwrap();
        let cli_text = String::from_utf8_lossy(&cli.stdout);
        let grouped = format!("{},{:03}", expect / 1000, expect % 1000);
        let millions = format!("{:.2}", analytic as f64 / 1e6);
        let good = analytic == expect && brute == expect && cli_text.contains(&grouped) && millions == rounded;
        ok &= good;
        notes.push(format!("{n}x{m}x{c}={analytic} ({millions} M, brute {brute})"));
    }
    outcome(ok, notes.join(", "))
}

fn criterion_2() -> Outcome {
    let got: Vec<usize> = [(4, 5, 1), (4, 6, 1), (4, 10, 3)]
        .iter()
        .map(|&(n, m, c)| receptive_field(&lattice(n, m, c).build().unwrap()).unwrap())
        .collect();
    outcome(got == [43, 51, 83], format!("{got:?}"))
}

fn criterion_3() -> Outcome {
    let t46 = build_lattice(&LatticeSpec::new(4, 6, 1)).unwrap();
    let t44 = build_lattice(&LatticeSpec::new(4, 4, 1)).unwrap();
    let t47 = build_lattice(&LatticeSpec::new(4, 7, 1)).unwrap();
    let d46 = min_max_depth(&t46, true).unwrap();
    let d44 = min_max_depth(&t44, false).unwrap();
    let dist44 = distance_to_output(&t44, t44.node_at(1, 4).unwrap()).unwrap();
    let dist47 = distance_to_output(&t47, t47.node_at(1, 7).unwrap()).unwrap();
    let mut degrees_ok = true;
    for n in 1..=8 {
        for m in 1..=8 {
            let (i, o) = max_degrees(&build_lattice(&LatticeSpec::new(n, m, 1)).unwrap());
            degrees_ok &= i <= 2 && o <= 2 && (n * m < 2 || (i == 2 && o == 2));
        }
    }
    let ok = d46 == (5, 25) && d44 == (4, 16) && dist44 == 6 && dist47 == 9 && degrees_ok;
    outcome(
        ok,
        format!(
            "(4,6) depth {}/{} with output, (4,4) {}/{} without, dist (1,4)={dist44} in 4x4, (1,7)={dist47} in 4x7, degree<=2 up to 8x8: {degrees_ok}",
            d46.0, d46.1, d44.0, d44.1
        ),
    )
}

fn criterion_4() -> Outcome {
    let archs = [
        lattice(1, 1, 1),
        lattice(2, 2, 1),
        lattice(2, 3, 1),
        lattice(3, 3, 1),
        ArchSpec::Plain(PlainSpec::new(5, 0, 1)),
    ];
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for arch in archs {
        for seed in 0..3u64 {
            let model: NetworkModel<f64> = initialize_model(&arch, 100 + seed).unwrap();
            let x = random_input(Shape::new(2, 1, 8, 8), 200 + seed);
            let opts = GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            };
            assert_eq!((opts.step, opts.tolerance), (1e-5, 1e-6));
            let report = grad_check(&model, &x, &opts).unwrap();
            worst = worst.max(report.max_rel_error);
            ok &= report.passed();
        }
    }
    outcome(ok, format!("5 networks x 3 seeds, worst relative error {worst:.2e} (tolerance 1e-6)"))
}

const DESK_CONFIG: &str = "\
rows = 2
cols = 3
channels = 1
noise = 25
patch_size = 16
pairs_per_epoch = 128
batch_size = 16
epochs = 10
seed = 7
deterministic = true
";

fn criterion_5(dir: &Path) -> Outcome {
    let data = dir.join("desk_data");
    fs::create_dir_all(&data).unwrap();
    for (i, img) in texture_set(8, 32, 32, 1, 5).iter().enumerate() {
        save_image(img, data.join(format!("t{i}.pgm"))).unwrap();
    }
    let cfg = dir.join("desk.cfg");
    fs::write(&cfg, DESK_CONFIG).unwrap();
    let run = |name: &str| {
        let model = dir.join(name).join("model.lfnt");
        let status = Command::new(env!("CARGO_BIN_EXE_lfnet"))
            .args(["train", "--config", cfg.to_str().unwrap(), "--train-dir", data.to_str().unwrap()])
            .args(["--model", model.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        (fs::read(&model).unwrap(), fs::read(dir.join(name).join("history.csv")).unwrap())
    };
    let a = run("run_a");
    let b = run("run_b");
    outcome(
        a == b,
        format!("model files {} bytes, identical: {}; history identical: {}", a.0.len(), a.0 == b.0, a.1 == b.1),
    )
}

struct DeskRun {
    history: TrainHistory,
    gain_db: f64,
    denoised_db: f64,
    noisy_db: f64,
}

const DESK_SIGMA: f64 = 25.0;

fn desk_training(arch: ArchSpec, train_images: &[Tensor<f32>], held_out: &[(String, Tensor<f32>)]) -> DeskRun {
    let config = TrainConfig {
        noise: NoiseMode::Fixed(DESK_SIGMA),
        patch_size: 16,
        pairs_per_epoch: 2048,
        batch_size: 16,
        epochs: 30,
        lr_start: 1e-3,
        lr_end: 1e-5,
        seed: 11,
        augment: false,
    };
    let validation = Validation {
        images: held_out,
        noise: NoiseMode::Fixed(DESK_SIGMA),
        seed: 12,
    };
    let mut model: NetworkModel<f32> = initialize_model(&arch, config.seed).unwrap();
    let history = train(&mut model, train_images, &config, Some(&validation), |_| {}).unwrap();
    let report = evaluate_dataset(&model, held_out, NoiseMode::Fixed(DESK_SIGMA), 13, EvalOptions::default()).unwrap();
    DeskRun {
        history,
        gain_db: report.mean_psnr_db - report.mean_input_psnr_db,
        denoised_db: report.mean_psnr_db,
        noisy_db: report.mean_input_psnr_db,
    }
}

fn desk_data() -> (Vec<Tensor<f32>>, Vec<(String, Tensor<f32>)>) {
    let all = texture_set(40, 64, 64, 1, 2024);
    let train = all[..32].iter().map(|i| i.to_tensor()).collect();
    let held = all[32..]
        .iter()
        .enumerate()
        .map(|(i, img)| (format!("held_{i}"), img.to_tensor()))
        .collect();
    (train, held)
}

fn criterion_7(lfnet: &DeskRun, plain: &DeskRun, plain_spec: &PlainSpec) -> Outcome {
    let curve = |h: &TrainHistory| h.records.iter().map(|r| r.val_psnr_db.unwrap()).collect::<Vec<f64>>();
    let l = curve(&lfnet.history);
    let p = curve(&plain.history);
    let plain_epoch5 = p[4];
    let reach = l.iter().position(|&v| v >= plain_epoch5).map(|i| i + 1);
    let final_ok = l[l.len() - 1] >= p[p.len() - 1];
    let reach_ok = matches!(reach, Some(e) if e <= 5);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    println!("      lfnet curve: {}", fmt(&l));
    println!("      plain curve: {} ({} layers, wide prefix {})", fmt(&p), plain_spec.layers, plain_spec.wide_prefix);
    outcome(
        final_ok && reach_ok,
        format!(
            "final {:.3} vs {:.3} dB; plain epoch-5 {:.3} dB reached by lfnet at epoch {}",
            l[l.len() - 1],
            p[p.len() - 1],
            plain_epoch5,
            reach.map(|e| e.to_string()).unwrap_or_else(|| "never".into())
        ),
    )
}

fn criterion_8() -> Outcome {
    let shape = Shape::new(1, 1, 16, 16);
    let base = Tensor::<f64>::full(shape, 0.5);
    let p20 = psnr(&base, &base.map(|v| v + 0.1), 1.0).unwrap();
    let p24 = psnr(&base, &base.map(|v| v + 16.0 / 255.0), 1.0).unwrap();
    // Independent closed form: 10·log10(1/MSE).
    let p24_oracle = 10.0 * (1.0 / (16.0f64 / 255.0).powi(2)).log10();
    let img = texture_set(1, 32, 32, 1, 3)[0].to_tensor::<f64>();
    let self_ssim = ssim(&img, &img).unwrap();
    let x = Tensor::<f64>::full(shape, 0.3);
    let y = Tensor::<f64>::full(shape, 0.7);
    let c1 = 0.01f64.powi(2);
    let const_oracle = (2.0 * 0.3 * 0.7 + c1) / (0.09 + 0.49 + c1);
    let const_ssim = ssim(&x, &y).unwrap();
    let ok = (p20 - 20.0).abs() <= 1e-3
        && (p24 - 24.048).abs() <= 1e-3
        && (p24 - p24_oracle).abs() <= 1e-9
        && self_ssim == 1.0
        && (const_ssim - const_oracle).abs() <= 1e-4;
    outcome(
        ok,
        format!("PSNR {p20:.4} / {p24:.4} dB, SSIM(a,a) = {self_ssim}, constant SSIM {const_ssim:.6} vs {const_oracle:.6}"),
    )
}

fn criterion_9(dir: &Path) -> Outcome {
    let specs = [
        lattice(4, 5, 1),
        lattice(4, 6, 1),
        lattice(4, 10, 3),
        lattice(1, 1, 1),
        lattice(3, 2, 1),
        ArchSpec::Lattice(LatticeSpec::new(3, 3, 1).with_fusion(Fusion::Sum)),
        ArchSpec::Lattice(LatticeSpec::new(2, 4, 3).with_fusion(Fusion::Sum)),
        ArchSpec::Plain(PlainSpec::new(21, 4, 1)),
        ArchSpec::Plain(matched_plain(&LatticeSpec::new(4, 3, 1)).unwrap()),
    ];
    let mut ok = true;
    for (i, arch) in specs.iter().enumerate() {
        let mut model: NetworkModel<f32> = initialize_model(arch, 40 + i as u64).unwrap();
        for (j, node) in model.nodes.iter_mut().enumerate() {
            node.conv.bias.iter_mut().for_each(|b| *b = (j as f32 + 0.25).sin());
            if let Some(bn) = node.bn.as_mut() {
                bn.gamma.iter_mut().for_each(|g| *g = 1.0 + j as f32 * 1e-3);
                bn.running_mean.iter_mut().enumerate().for_each(|(k, v)| *v = (k as f32).cos() * 0.1);
                bn.running_var.iter_mut().enumerate().for_each(|(k, v)| *v = 1.0 + k as f32 * 0.01);
            }
        }
        let path = dir.join(format!("model_{i}.lfnt"));
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        let bits = |m: &NetworkModel<f32>| -> Vec<u32> {
            m.param_ids().iter().flat_map(|&id| m.param(id).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        let bitwise = bits(&back) == bits(&model) && back == model;
        let reencoded = encode_model(&decode_model(&encode_model(&model)).unwrap()) == fs::read(&path).unwrap();
        ok &= bitwise && reencoded && back.arch() == arch;
    }
    outcome(ok, format!("{} specs including sum fusion and plain chains", specs.len()))
}

fn main() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let second = Duration::from_secs(1);

    check(&mut failures, "1", "parameter counts", second, criterion_1);
    check(&mut failures, "2", "receptive fields", second, criterion_2);
    check(&mut failures, "3", "depth and distance arithmetic", second, criterion_3);
    check(&mut failures, "4", "whole-network gradient check", Duration::from_secs(120), criterion_4);
    check(&mut failures, "5", "train determinism", Duration::from_secs(60), || criterion_5(dir.path()));
    check(&mut failures, "8", "metric closed forms", second, criterion_8);
    check(&mut failures, "9", "model persistence", Duration::from_secs(10), || criterion_9(dir.path()));

    let (train_images, held_out) = desk_data();
    let lfnet_spec = LatticeSpec::new(4, 3, 1);
    let mut lfnet_run = None;
    check(&mut failures, "6", "desk-scale denoising gain", Duration::from_secs(15 * 60), || {
        let run = desk_training(ArchSpec::Lattice(lfnet_spec), &train_images, &held_out);
        let o = outcome(
            run.gain_db >= 3.0,
            format!(
                "held-out PSNR {:.3} dB denoised vs {:.3} dB noisy, gain {:.3} dB (need >= 3)",
                run.denoised_db, run.noisy_db, run.gain_db
            ),
        );
        lfnet_run = Some(run);
        o
    });
    let plain_spec = matched_plain(&lfnet_spec).unwrap();
    check(&mut failures, "7", "lattice vs parameter-matched plain chain", Duration::from_secs(30 * 60), || {
        let plain_run = desk_training(ArchSpec::Plain(plain_spec), &train_images, &held_out);
        criterion_7(lfnet_run.as_ref().unwrap(), &plain_run, &plain_spec)
    });

    if failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {}", failures.join(", "));
        std::process::exit(1);
    }
}
