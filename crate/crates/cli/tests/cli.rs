use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn latrex(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latrex"))
        .args(args)
        .env("LATREX_OUTPUT_ROOT", root)
        .output()
        .expect("spawn latrex")
}

fn ok(args: &[&str], root: &Path) -> Output {
    let out = latrex(args, root);
    assert!(
        out.status.success(),
        "latrex {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_png(path: &Path, w: u32, h: u32, scale: f64) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let v = |k: u32| (((x * 7 + y * 13 + k * 31) % 97) as f64 / 97.0 * 255.0 * scale) as u8;
        image::Rgb([v(0), v(1), v(2)])
    });
    img.save(path).unwrap();
}

fn dataset(root: &Path, n: usize) {
    for (sub, scale) in [("low", 0.2), ("high", 1.0)] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
        for i in 0..n {
            write_png(&root.join(sub).join(format!("{i}.png")), 16, 16, scale);
        }
    }
}

const FAST: [&str; 6] = [
    "--set",
    "iterations=12",
    "--set",
    "patch_size=16",
    "--set",
    "channels=4",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn training_and_enhancement_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    dataset(&data, 2);
    let before = files(&data);
    let d = data.to_str().unwrap();

    ok(&with(&["train-decomp", "--data", d], &FAST), root);
    let decomp_dir = root.join("train-decomp");
    let ckpt = decomp_dir.join("decomposer.ckpt");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(decomp_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,total,recon,is_smooth,ir_consistency\n"));
    assert_eq!(log.lines().count(), 13);
    let m = manifest(&decomp_dir);
    assert_eq!(m["command"], "train-decomp");
    assert_eq!(m["config"]["iterations"], 12);
    assert_eq!(m["data"]["pairs"], 2);

    let c = ckpt.to_str().unwrap();
    ok(
        &with(&["train-enhance", "--data", d, "--decomposer", c], &FAST),
        root,
    );
    let refiner = root.join("train-enhance");
    assert!(refiner.join("refiner_r.ckpt").is_file() && refiner.join("refiner_l.ckpt").is_file());
    let m = manifest(&refiner);
    let frozen = &m["summary"]["frozen_checksum"];
    assert_eq!(frozen[0], frozen[1]);

    let one = root.join("one");
    std::fs::create_dir(&one).unwrap();
    write_png(&one.join("shot.png"), 18, 14, 0.3);
    let r = refiner.to_str().unwrap();
    ok(
        &[
            "enhance",
            "--decomposer",
            c,
            "--refiner",
            r,
            "--input",
            one.to_str().unwrap(),
        ],
        root,
    );
    let out = files(&root.join("enhance"));
    let names: Vec<_> = out
        .keys()
        .map(|p| p.to_str().unwrap().to_string())
        .collect();
    assert_eq!(names, ["manifest.json", "shot.png"]);
    let enhanced = image::load_from_memory(&out[Path::new("shot.png")]).unwrap();
    assert_eq!((enhanced.width(), enhanced.height()), (18, 14));

    ok(
        &["eval", "--data", d, "--decomposer", c, "--refiner", r],
        root,
    );
    let metrics = std::fs::read_to_string(root.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("image_id,psnr,ssim\n"));
    assert_eq!(metrics.lines().count(), 3);

    ok(&["swap", "--data", d, "--decomposer", c], root);
    let swap = std::fs::read_to_string(root.join("swap/swap.csv")).unwrap();
    assert_eq!(swap.lines().count(), 4);

    assert_eq!(files(&data), before, "dataset directory was modified");
}

#[test]
fn stability_single_run_has_zero_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(
        &[
            "stability",
            "--synthetic",
            "2",
            "--runs",
            "1",
            "--set",
            "epoch_steps=4",
        ],
        &FAST,
    );
    ok(&args, tmp.path());
    let dir = tmp.path().join("stability");
    for s in ["full", "v1_latent_mult"] {
        let csv = std::fs::read_to_string(dir.join(format!("stability_{s}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,mean_loss,var_loss"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        for row in rows {
            let var: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(var, 0.0);
        }
    }
    assert!(std::fs::read_to_string(dir.join("stability.txt"))
        .unwrap()
        .contains("23.84"));
}

#[test]
fn ablation_table_has_one_row_per_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &with(
            &["ablate", "--synthetic", "2", "--strategies", "full,v1,v2"],
            &FAST,
        ),
        tmp.path(),
    );
    let csv = std::fs::read_to_string(tmp.path().join("ablate/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("strategy,psnr_ll,psnr_ln,psnr_nl,psnr_nn,"));
    assert_eq!(lines.len(), 4);
    for (line, name) in lines[1..]
        .iter()
        .zip(["full", "v1_latent_mult", "v2_latent_add_nolog"])
    {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], name);
        for c in &cols[1..5] {
            assert!(c.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn reruns_reproduce_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let base = with(
        &["train-decomp", "--synthetic", "2", "--set", "seed=5"],
        &FAST,
    );
    ok(&with(&base, &["-o", a.to_str().unwrap()]), tmp.path());
    // Second run only from the resolved config written by the first.
    let cfg = a.join("config.toml");
    ok(
        &[
            "train-decomp",
            "--synthetic",
            "2",
            "--config",
            cfg.to_str().unwrap(),
            "-o",
            b.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(
        std::fs::read(a.join("decomposer.ckpt")).unwrap(),
        std::fs::read(b.join("decomposer.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("train_log.csv")).unwrap(),
        std::fs::read(b.join("train_log.csv")).unwrap()
    );
    assert_eq!(manifest(&a)["summary"], manifest(&b)["summary"]);
}

fn failure(args: &[&str], root: &Path) -> (i32, String) {
    let out = latrex(args, root);
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    (out.status.code().unwrap(), stderr)
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let (code, err) = failure(
        &["train-decomp", "--synthetic", "1", "--set", "lamda1=0.1"],
        root,
    );
    assert_eq!(code, 2);
    assert!(err.starts_with("error kind=config code=2 msg=\""), "{err}");
    assert!(err.contains("lambda1"));
    assert_eq!(err.trim_end().lines().count(), 1);

    let (code, err) = failure(&["train-decomp", "--data", "/definitely/not/here"], root);
    assert_eq!(code, 3, "{err}");

    let (code, err) = failure(
        &[
            "swap",
            "--synthetic",
            "1",
            "--decomposer",
            root.join("missing.ckpt").to_str().unwrap(),
        ],
        root,
    );
    assert_eq!(code, 5, "{err}");
    assert!(err.contains("missing.ckpt"));

    let nan = with(
        &[
            "train-decomp",
            "--synthetic",
            "1",
            "--set",
            "lr_initial=1e300",
            "--set",
            "lr_final=0",
        ],
        &FAST,
    );
    let (code, err) = failure(&nan, root);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("kind=numerical"));
}
