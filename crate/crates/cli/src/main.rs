//! Command-line driver. One command per process:
//!
//!   fsn gen-data   write a synthetic dataset to disk
//!   fsn train      train a detector, write checkpoint + loss log
//!   fsn eval       per-class AP and mAP of a checkpoint on a dataset
//!   fsn infer      detections for one image (text, one per line)
//!   fsn gradcheck  finite-difference verification of every operator
//!   fsn ablate     4 attention variants x 3 shift directions, one table
//!
//! Configuration is a plain-text key=value file (--config FILE) with
//! trailing key=value arguments as overrides; unknown keys are rejected.
//! FSN_SEED overrides the seed last. Every command echoes its effective
//! config next to its outputs so any run can be reproduced from that file.
//! Exit codes: 0 success, 1 usage or missing input, 2 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::exit;

use fsn_core::detector::{
    load_checkpoint, save_checkpoint, train_detector, Detector, DetectorConfig,
};
use fsn_core::error::{Error, Result};
use fsn_core::gradcheck::{render_reports, standard_battery};
use fsn_core::synth::{
    generate_dataset, grid_proposals, load_dataset, read_ppm, save_dataset, DatasetParams, Scene,
    CLASS_NAMES,
};
use fsn_core::tensor::Tensor4;

const USAGE: &str = "usage: fsn <command> [--config FILE] [key=value ...]

commands:
  gen-data    generate a synthetic dataset into `dataset=`
  train       train on `dataset=`, write checkpoint + loss log into `out=`
  eval        evaluate `checkpoint=` on `dataset=`, report AP per class
  infer       detect objects in `image=` using `checkpoint=`
  gradcheck   run the finite-difference operator battery (exit 2 on failure)
  ablate      train/eval the 4x3 attention-variant grid, write a table

common keys: dataset, out, checkpoint, image, scenes, width, height, seed,
eval_iou, gradcheck_seeds, heldout_scenes, heldout_seed, plus every detector
key (channels, selective_channels, iterations, ...). FSN_SEED overrides the
seed.";

/// Detector config plus the run-level keys the commands need.
#[derive(Clone, Debug)]
struct RunConfig {
    det: DetectorConfig,
    dataset: Option<PathBuf>,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    image: Option<PathBuf>,
    scenes: usize,
    width: usize,
    height: usize,
    eval_iou: f64,
    gradcheck_seeds: usize,
    heldout_scenes: usize,
    heldout_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            det: DetectorConfig::default(),
            dataset: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            image: None,
            scenes: 200,
            width: 128,
            height: 128,
            eval_iou: 0.5,
            gradcheck_seeds: 20,
            heldout_scenes: 40,
            heldout_seed: 1,
        }
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Format(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "image" => self.image = Some(PathBuf::from(value)),
            "scenes" => self.scenes = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "eval_iou" => self.eval_iou = parse(key, value)?,
            "gradcheck_seeds" => self.gradcheck_seeds = parse(key, value)?,
            "heldout_scenes" => self.heldout_scenes = parse(key, value)?,
            "heldout_seed" => self.heldout_seed = parse(key, value)?,
            _ => {
                if !self.det.try_set(key, value)? {
                    return Err(Error::Format(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The effective config, loadable back through `load_file`.
    fn echo(&self) -> String {
        let mut s = self.det.canonical_text();
        if let Some(d) = &self.dataset {
            let _ = writeln!(s, "dataset={}", d.display());
        }
        let _ = writeln!(s, "out={}", self.out.display());
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint={}", c.display());
        }
        if let Some(i) = &self.image {
            let _ = writeln!(s, "image={}", i.display());
        }
        let _ = writeln!(s, "scenes={}", self.scenes);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "eval_iou={}", self.eval_iou);
        let _ = writeln!(s, "gradcheck_seeds={}", self.gradcheck_seeds);
        let _ = writeln!(s, "heldout_scenes={}", self.heldout_scenes);
        let _ = writeln!(s, "heldout_seed={}", self.heldout_seed);
        s
    }

    fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.echo())?;
        Ok(())
    }

    fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Format("missing required key 'dataset'".into()))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.fsn"))
    }
}

fn parse_args(args: &[String]) -> Result<(String, RunConfig)> {
    if args.is_empty() {
        return Err(Error::Format("missing command".into()));
    }
    let command = args[0].clone();
    let mut cfg = RunConfig::default();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                let path = args
                    .get(i + 1)
                    .ok_or_else(|| Error::Format("--config needs a path".into()))?;
                cfg.load_file(Path::new(path))?;
                i += 2;
            }
            arg => {
                let (key, value) = arg
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("expected key=value, got '{arg}'")))?;
                cfg.set(key.trim(), value.trim())?;
                i += 1;
            }
        }
    }
    if let Ok(seed) = std::env::var("FSN_SEED") {
        let seed = seed
            .parse()
            .map_err(|_| Error::Format(format!("bad FSN_SEED '{seed}'")))?;
        cfg.det.seed = seed;
    }
    Ok((command, cfg))
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.dataset_dir()?.to_path_buf();
    let params = DatasetParams {
        n_scenes: cfg.scenes,
        width: cfg.width,
        height: cfg.height,
        seed: cfg.det.seed,
    };
    let scenes = generate_dataset(&params);
    save_dataset(&dir, &scenes, &params)?;
    cfg.write_echo(&dir)?;
    let objects: usize = scenes.iter().map(|s| s.annotations.len()).sum();
    println!(
        "wrote {} scenes ({objects} objects) to {}",
        scenes.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (scenes, _) = load_dataset(cfg.dataset_dir()?)?;
    fs::create_dir_all(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    let mut model: Detector<f32> = Detector::new(cfg.det.clone())?;
    let mut log_text = String::new();
    let log = train_detector(&mut model, &scenes, |step, losses| {
        let _ = writeln!(
            log_text,
            "{step}\t{}\t{}\t{}",
            losses.cls,
            losses.reg,
            losses.total()
        );
        if step % 50 == 0 {
            println!(
                "step {step}: cls {:.4} reg {:.4} total {:.4}",
                losses.cls,
                losses.reg,
                losses.total()
            );
        }
    })?;
    fs::write(cfg.out.join("loss_log.txt"), log_text)?;
    let ckpt = cfg.checkpoint_path();
    save_checkpoint(&mut model, &ckpt)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} steps: cls {:.4} -> {:.4}; checkpoint {}",
            log.len(),
            first.cls,
            last.cls,
            ckpt.display()
        );
    }
    Ok(())
}

fn format_eval(aps: &[Option<f64>], map: f64) -> String {
    let mut s = String::new();
    for (i, ap) in aps.iter().enumerate() {
        match ap {
            Some(v) => {
                let _ = writeln!(s, "class {} ap {v:.4}", CLASS_NAMES[i]);
            }
            None => {
                let _ = writeln!(s, "class {} ap n/a", CLASS_NAMES[i]);
            }
        }
    }
    let _ = writeln!(s, "mAP {map:.4}");
    s
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (scenes, _) = load_dataset(cfg.dataset_dir()?)?;
    let model: Detector<f32> = load_checkpoint(&cfg.checkpoint_path())?;
    let (aps, map) = fsn_core::detector::evaluate_detector(&model, &scenes, cfg.eval_iou)?;
    let text = format_eval(&aps, map);
    fs::create_dir_all(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    fs::write(cfg.out.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let image_path = cfg
        .image
        .as_deref()
        .ok_or_else(|| Error::Format("missing required key 'image'".into()))?;
    let (w, h, pixels) = read_ppm(image_path)?;
    let scene = Scene {
        width: w,
        height: h,
        pixels,
        annotations: Vec::new(),
        seed: cfg.det.seed,
    };
    let model: Detector<f32> = load_checkpoint(&cfg.checkpoint_path())?;
    let image: Tensor4<f32> = scene.image_tensor();
    let proposals = grid_proposals(w, h, model.cfg.proposals_per_image, cfg.det.seed);
    let detections = model.infer(&image, &proposals)?;
    let mut text = String::new();
    for d in &detections {
        let _ = writeln!(
            text,
            "{} {:.4} {:.1} {:.1} {:.1} {:.1}",
            CLASS_NAMES[d.class - 1],
            d.score,
            d.rect.x1,
            d.rect.y1,
            d.rect.x2,
            d.rect.y2
        );
    }
    fs::create_dir_all(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    fs::write(cfg.out.join("detections.txt"), &text)?;
    print!("{text}");
    println!("{} detections", detections.len());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let reports = standard_battery(cfg.det.seed, cfg.gradcheck_seeds)?;
    let (text, pass) = render_reports(&reports);
    fs::create_dir_all(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    fs::write(cfg.out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    println!(
        "gradcheck: {} ({} reports, {} seeds)",
        if pass { "PASS" } else { "FAIL" },
        reports.len(),
        cfg.gradcheck_seeds
    );
    Ok(pass)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let (scenes, _) = load_dataset(cfg.dataset_dir()?)?;
    let heldout = generate_dataset(&DatasetParams {
        n_scenes: cfg.heldout_scenes,
        width: cfg.width,
        height: cfg.height,
        seed: cfg.heldout_seed,
    });
    let variants: [(&str, bool, bool); 4] = [
        ("none", false, false),
        ("sub-region", true, false),
        ("aspect", false, true),
        ("both", true, true),
    ];
    let directions = ["center", "outside", "random"];

    let mut rows: Vec<(String, String, f64, f64, f64)> = Vec::new();
    for (name, use_sr, use_ar) in variants {
        for dir in directions {
            let mut det = cfg.det.clone();
            det.use_subregion = use_sr;
            det.use_aspect = use_ar;
            det.shift_direction = fsn_core::attention::ShiftDirection::parse(dir)?;
            let mut model: Detector<f32> = Detector::new(det)?;
            let log = train_detector(&mut model, &scenes, |_, _| {})?;
            let (_, map) = fsn_core::detector::evaluate_detector(&model, &heldout, cfg.eval_iou)?;
            let (cls, reg) = log
                .last()
                .map(|l| (l.cls, l.reg))
                .unwrap_or((f64::NAN, f64::NAN));
            println!("variant {name:<10} direction {dir:<7} mAP {map:.4}");
            rows.push((name.to_string(), dir.to_string(), map, cls, reg));
        }
    }

    let mut table = format!(
        "{:<12} {:<8} {:>8} {:>12} {:>12} {:>6}\n",
        "variant", "shift", "mAP", "final_cls", "final_reg", "seed"
    );
    let mut tsv = String::from("variant\tshift\tmAP\tfinal_cls\tfinal_reg\tseed\n");
    for (name, dir, map, cls, reg) in &rows {
        let _ = writeln!(
            table,
            "{name:<12} {dir:<8} {map:>8.4} {cls:>12.6} {reg:>12.6} {:>6}",
            cfg.det.seed
        );
        let _ = writeln!(tsv, "{name}\t{dir}\t{map}\t{cls}\t{reg}\t{}", cfg.det.seed);
    }
    fs::create_dir_all(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    fs::write(cfg.out.join("ablation.txt"), &table)?;
    fs::write(cfg.out.join("ablation.tsv"), &tsv)?;
    print!("{table}");
    Ok(())
}

fn run() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (command, cfg) = match parse_args(&args) {
        Ok(parsed) => parsed,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{USAGE}");
            return 1;
        }
    };
    let outcome = match command.as_str() {
        "gen-data" => cmd_gen_data(&cfg).map(|_| true),
        "train" => cmd_train(&cfg).map(|_| true),
        "eval" => cmd_eval(&cfg).map(|_| true),
        "infer" => cmd_infer(&cfg).map(|_| true),
        "gradcheck" => cmd_gradcheck(&cfg),
        "ablate" => cmd_ablate(&cfg).map(|_| true),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("error: unknown command '{other}'");
            eprintln!("{USAGE}");
            return 1;
        }
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 2, // verification failure
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn main() {
    exit(run());
}
