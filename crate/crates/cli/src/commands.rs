use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use latrex::checkpoint::{self, DECOMPOSER_FILE};
use latrex::dataset::{load_image, load_pairs, save_png, scan_pairs_in};
use latrex::evaluator::{Identity, Pipeline};
use latrex::report::emit_plot_data;
use latrex::synthetic::toy_pairs;
use latrex::{ImagePair, Stage, Strategy, TrainConfig};
use serde_json::{json, Value};

use crate::{Command, Common, Data};

pub const OUTPUT_ROOT_VAR: &str = "LATREX_OUTPUT_ROOT";

/// Output directory plus the manifest written at the end of a command.
struct Run {
    name: &'static str,
    out: PathBuf,
    cfg: TrainConfig,
    data: Value,
    inputs: Vec<(String, PathBuf)>,
    artifacts: Vec<PathBuf>,
    start: Instant,
}

impl Run {
    fn new(name: &'static str, common: &Common, mut cfg: TrainConfig) -> Result<Self> {
        let out = match &common.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUTPUT_ROOT_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(name),
        };
        std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
        if matches!(name, "train-enhance") {
            cfg.stage = Stage::Enhancement;
        }
        Ok(Self {
            name,
            out,
            cfg,
            data: Value::Null,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            start: Instant::now(),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn write(&mut self, file: &str, text: &str) -> Result<()> {
        let p = self.path(file);
        std::fs::write(&p, text).map_err(|e| io_error(&p, e))?;
        self.artifacts.push(p);
        Ok(())
    }

    fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    fn finish(mut self, summary: Value) -> Result<()> {
        let config: Value =
            toml::from_str(&self.cfg.to_toml()).context("re-reading resolved config")?;
        let manifest = json!({
            "command": self.name,
            "argv": std::env::args().collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "deterministic": true,
            "config": config,
            "data": self.data,
            "inputs": self.inputs.iter().map(|(r, p)| json!({"role": r, "path": p})).collect::<Vec<_>>(),
            "artifacts": self.artifacts.iter().map(|p| p.strip_prefix(&self.out).unwrap_or(p)).collect::<Vec<_>>(),
            "summary": summary,
            "wall_time_secs": self.start.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        self.write("manifest.json", &text)?;
        println!("{} -> {}", self.name, self.out.display());
        Ok(())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> latrex::Error {
    latrex::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn config(common: &Common, data: Option<&Data>) -> Result<TrainConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(d) = data {
        if let Some(root) = &d.data {
            overrides.push(format!(
                "data_root={}",
                toml::Value::String(root.display().to_string())
            ));
        }
        if let Some(n) = d.max_pairs {
            overrides.push(format!("max_pairs={n}"));
        }
    }
    let cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p, &overrides)?,
        None => TrainConfig::from_toml_str("", &overrides)?,
    };
    Ok(cfg)
}

fn load_data(run: &mut Run, data: &Data) -> Result<Vec<ImagePair>> {
    let cfg = &run.cfg;
    let mut pairs = if let Some(n) = data.synthetic {
        if n == 0 {
            return Err(latrex::Error::Config("--synthetic needs at least one pair".into()).into());
        }
        run.data =
            json!({"source": "synthetic", "pairs": n, "size": cfg.patch_size, "seed": cfg.seed});
        toy_pairs(n, cfg.patch_size, cfg.seed)
    } else {
        let (low, high) = cfg.pair_dirs().ok_or_else(|| {
            latrex::Error::Config("no dataset: pass --data, --synthetic or set data_root".into())
        })?;
        let mut index = scan_pairs_in(&low, &high)?;
        if cfg.max_pairs > 0 {
            index.truncate(cfg.max_pairs);
        }
        run.data = json!({
            "source": "directory",
            "low": low,
            "high": high,
            "pairs": index.len(),
            "unmatched": index.unmatched,
        });
        load_pairs(&index)?
    };
    if cfg.max_pairs > 0 {
        pairs.truncate(cfg.max_pairs);
    }
    Ok(pairs)
}

fn parse_strategies(names: &[String]) -> Result<Vec<Strategy>> {
    Ok(names
        .iter()
        .map(|s| s.trim().parse())
        .collect::<latrex::Result<Vec<Strategy>>>()?)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainDecomp { common, data } => train_decomp(&common, &data),
        Command::TrainEnhance {
            common,
            data,
            decomposer,
        } => train_enhance(&common, &data, &decomposer),
        Command::Enhance {
            common,
            decomposer,
            refiner,
            input,
        } => enhance(&common, &decomposer, &refiner, &input),
        Command::Swap {
            common,
            data,
            decomposer,
        } => swap(&common, &data, &decomposer),
        Command::Ablate {
            common,
            data,
            strategies,
        } => ablate(&common, &data, &strategies),
        Command::Stability {
            common,
            data,
            runs,
            strategies,
        } => stability(&common, &data, runs, &strategies),
        Command::Eval {
            common,
            data,
            decomposer,
            refiner,
            identity,
        } => eval(
            &common,
            &data,
            decomposer.as_deref(),
            refiner.as_deref(),
            identity,
        ),
    }
}

fn train_decomp(common: &Common, data: &Data) -> Result<()> {
    let mut cfg = config(common, Some(data))?;
    cfg.stage = Stage::Decomposition;
    let mut run = Run::new("train-decomp", common, cfg)?;
    let pairs = load_data(&mut run, data)?;
    let (w, rec) = latrex::train_decomposition(&run.cfg, &pairs)?;
    let ckpt = run.path(DECOMPOSER_FILE);
    checkpoint::save_decomposer(&ckpt, &w)?;
    run.artifacts.push(ckpt);
    run.artifacts
        .extend(emit_plot_data(&rec, &run.path("train_log.csv"))?);
    run.write("config.toml", &run.cfg.to_toml())?;
    run.finish(json!({
        "final_loss": rec.final_loss(),
        "clip_events": rec.clip_events,
        "weights_checksum": rec.weights_checksum,
    }))
}

fn train_enhance(common: &Common, data: &Data, decomposer: &Path) -> Result<()> {
    let cfg = config(common, Some(data))?;
    let mut run = Run::new("train-enhance", common, cfg)?;
    run.input("decomposer", decomposer);
    let dw = checkpoint::load_decomposer(decomposer)?;
    let pairs = load_data(&mut run, data)?;
    let (rw, rec) = latrex::train_enhancement(&run.cfg, &pairs, &dw)?;
    let (pr, pl) = checkpoint::save_refiner(&run.out, &rw)?;
    run.artifacts.extend([pr, pl]);
    run.artifacts
        .extend(emit_plot_data(&rec, &run.path("train_log.csv"))?);
    run.write("config.toml", &run.cfg.to_toml())?;
    run.finish(json!({
        "final_loss": rec.final_loss(),
        "weights_checksum": rec.weights_checksum,
        "frozen_checksum": rec.frozen_checksum,
    }))
}

fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| io_error(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(latrex::Error::Data(format!("no images in {}", input.display())).into());
    }
    Ok(files)
}

fn enhance(common: &Common, decomposer: &Path, refiner: &Path, input: &Path) -> Result<()> {
    let cfg = config(common, None)?;
    let mut run = Run::new("enhance", common, cfg)?;
    run.input("decomposer", decomposer);
    run.input("refiner", refiner);
    run.input("images", input);
    let dw = checkpoint::load_decomposer(decomposer)?;
    let rw = checkpoint::load_refiner(refiner)?;
    let files = list_inputs(input)?;
    for f in &files {
        let low = load_image(f)?;
        let out = latrex::enhance(&low, &dw, &rw)
            .with_context(|| format!("enhancing {}", f.display()))?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = run.path(&format!("{stem}.png"));
        save_png(&dest, &out)?;
        run.artifacts.push(dest);
    }
    run.finish(json!({ "images": files.len() }))
}

fn swap(common: &Common, data: &Data, decomposer: &Path) -> Result<()> {
    let cfg = config(common, Some(data))?;
    let mut run = Run::new("swap", common, cfg)?;
    run.input("decomposer", decomposer);
    let dw = checkpoint::load_decomposer(decomposer)?;
    run.cfg.strategy = dw.strategy();
    let pairs = load_data(&mut run, data)?;
    let mut csv = String::from("pair,psnr_ll,psnr_ln,psnr_nl,psnr_nn,mean_psnr\n");
    let mut results = Vec::new();
    for p in &pairs {
        let r = latrex::swap_protocol(&p.low, &p.normal, &dw)?;
        let _ = writeln!(
            csv,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            p.scene_id,
            r.psnr_ll,
            r.psnr_ln,
            r.psnr_nl,
            r.psnr_nn,
            r.mean()
        );
        results.push(r);
    }
    let avg = latrex::SwapResult::average(&results).expect("at least one pair");
    let _ = writeln!(
        csv,
        "mean,{:.4},{:.4},{:.4},{:.4},{:.4}",
        avg.psnr_ll,
        avg.psnr_ln,
        avg.psnr_nl,
        avg.psnr_nn,
        avg.mean()
    );
    run.write("swap.csv", &csv)?;
    run.finish(json!({ "strategy": dw.strategy(), "mean": avg }))
}

fn ablate(common: &Common, data: &Data, strategies: &[String]) -> Result<()> {
    let strategies = parse_strategies(strategies)?;
    let cfg = config(common, Some(data))?;
    let mut run = Run::new("ablate", common, cfg)?;
    let pairs = load_data(&mut run, data)?;
    let report = latrex::ablation_study(&run.cfg, &pairs, &strategies)?;
    run.write("ablation.csv", &report.to_csv())?;
    run.write("config.toml", &run.cfg.to_toml())?;
    let summary: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({"strategy": r.strategy, "mean_psnr": r.swap.map(|s| s.mean()), "abort": r.abort}))
        .collect();
    run.finish(json!(summary))
}

fn stability(common: &Common, data: &Data, runs: usize, strategies: &[String]) -> Result<()> {
    let strategies = parse_strategies(strategies)?;
    let cfg = config(common, Some(data))?;
    let mut run = Run::new("stability", common, cfg)?;
    let pairs = load_data(&mut run, data)?;
    let report = latrex::stability_study(&run.cfg, &pairs, runs, &strategies)?;
    run.artifacts
        .extend(emit_plot_data(&report, &run.path("stability.csv"))?);
    run.write("stability.txt", &report.to_text())?;
    run.write("config.toml", &run.cfg.to_toml())?;
    let summary: Vec<Value> = report
        .strategies
        .iter()
        .map(|s| {
            json!({
                "strategy": s.strategy,
                "final_psnr_mean": s.final_mean,
                "final_psnr_var": s.final_var,
                "aborted": s.aborted.len(),
            })
        })
        .collect();
    run.finish(json!(summary))
}

fn eval(
    common: &Common,
    data: &Data,
    decomposer: Option<&Path>,
    refiner: Option<&Path>,
    identity: bool,
) -> Result<()> {
    let cfg = config(common, Some(data))?;
    let mut run = Run::new("eval", common, cfg)?;
    let pairs = load_data(&mut run, data)?;
    let report = match (identity, decomposer, refiner) {
        (false, Some(d), Some(r)) => {
            run.input("decomposer", d);
            run.input("refiner", r);
            let dw = checkpoint::load_decomposer(d)?;
            let rw = checkpoint::load_refiner(r)?;
            latrex::eval_dataset(
                &Pipeline {
                    decomposer: &dw,
                    refiner: &rw,
                },
                &pairs,
            )?
        }
        _ => latrex::eval_dataset(&Identity, &pairs)?,
    };
    run.write("metrics.csv", &report.to_csv())?;
    run.write("metrics.txt", &report.to_text())?;
    run.finish(json!({
        "images": report.count,
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
    }))
}
