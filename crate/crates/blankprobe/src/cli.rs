//! Command-line driver: `train | probe-random | probe-progressive |
//! consistency | ablate`.
//!
//! Exit codes: 0 success, 2 usage or configuration problems, 3 a probe ran
//! out of correct masked predictions, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::LabeledImageSet;
use crate::error::{Error, Result};
use crate::masking::make_progressive_sequence;
use crate::models::{
    load_checkpoint, save_checkpoint, train, Arch, Model, ModelCheckpoint, ModelSpec,
    TrainConfig, TrainingMeta,
};
use crate::probes::{
    ablation_sweep, consistency_eval, progressive_probe, random_mask_probe, Mechanism,
    ProbeConfig,
};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::viz::{
    probe_file_name, render_grid, render_signed_overlay, upscale, write_png, Colormap,
    RenderSpec,
};

const USAGE: &str = "\
blankprobe - visualize how an image classifier fills in masked patches

USAGE:
    blankprobe <COMMAND> [FLAGS]

COMMANDS:
    train               Train a classifier on IDX data and write a checkpoint
    probe-random        Prototype images via expectation over random masks
    probe-progressive   Fill an image region-by-region over a mask partition
    consistency         Score generated prototypes with the generating model
    ablate              Sweep masking ratio x patch size on one image

COMMON FLAGS:
    --config FILE        Flat key = value config file (flags override it)
    --seed N             Root seed; all randomness derives from it
    --data DIR           Directory with IDX files (raw or .gz)
    --checkpoint FILE    Trained model checkpoint (probe commands)
    --out-dir DIR        Output directory (probe commands; default ./out)
    --threads: set the BLANKPROBE_THREADS environment variable instead

TRAIN FLAGS:
    --arch NAME          simple_cnn3 | micro_resnet5
    --epochs N  --lr X  --momentum X  --batch N  --classes K
    --out FILE           Checkpoint path to write
    --train-limit N      Truncate the training set (0 = all)
    --test-limit N       Truncate the test set (0 = all)

PROBE FLAGS:
    --eta X[,X...]       Masking ratio (list for ablate)
    --patch P[,P...]     Superpixel edge length (list for ablate)
    --samples N          Mask budget per image
    --min-correct N      Required correct masked predictions per image
    --gamma X            First-order step scale
    --order first|bfgs   Update direction order
    --bfgs-iters N       BFGS iterations when --order bfgs
    --no-binarize        Skip Otsu binarization in the threshold transform
    --average-stage S    raw | masked update averaging
    --count N            Images to probe (probe commands; consistency: 1000)
    --image-index N      First test-set index (ablate probes exactly this one)
    --k N                Progressive sequence length
    --mechanism M        random | progressive (consistency)
    --paper-fidelity     Raise the accepted-sample requirement past 10,000
";

pub fn run(args: &[String]) -> i32 {
    match execute(args) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InsufficientSignal { .. } => 3,
        Error::Numeric(_) | Error::TrainingDiverged { .. } => 4,
        _ => 2,
    }
}

fn execute(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Err(Error::Config("missing command".into()));
    };
    match command.as_str() {
        "-h" | "--help" | "help" => {
            println!("{USAGE}");
            return Ok(());
        }
        "-V" | "--version" => {
            println!("blankprobe {}", env!("CARGO_PKG_VERSION"));
            return Ok(());
        }
        _ => {}
    }
    let cfg = parse_flags(&args[1..])?;
    match command.as_str() {
        "train" => cmd_train(cfg),
        "probe-random" => cmd_probe_random(cfg),
        "probe-progressive" => cmd_probe_progressive(cfg),
        "consistency" => cmd_consistency(cfg),
        "ablate" => cmd_ablate(cfg),
        other => Err(Error::Config(format!(
            "unknown command '{other}'; run with --help for usage"
        ))),
    }
}

/// defaults < config file < flags, in that order.
fn parse_flags(args: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    // First pass: apply any config file.
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            let path = args
                .get(i + 1)
                .ok_or_else(|| Error::Config("--config needs a file path".into()))?;
            cfg.apply_file(Path::new(path))?;
        }
        i += 1;
    }
    // Second pass: the flags themselves.
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        let take_value = |i: &mut usize| -> Result<String> {
            *i += 1;
            args.get(*i)
                .cloned()
                .ok_or_else(|| Error::Config(format!("flag {flag} needs a value")))
        };
        match flag.as_str() {
            "--config" => {
                i += 1; // handled in the first pass
            }
            "--no-binarize" => cfg.set("binarize", "false")?,
            "--paper-fidelity" => cfg.set("paper_fidelity", "true")?,
            "--data" => {
                let v = take_value(&mut i)?;
                cfg.set("data_dir", &v)?;
            }
            _ if flag.starts_with("--") => {
                let key = flag[2..].replace('-', "_");
                let v = take_value(&mut i)?;
                cfg.set(&key, &v)?;
            }
            other => {
                return Err(Error::Config(format!(
                    "unexpected argument '{other}'; flags look like --key value"
                )))
            }
        }
        i += 1;
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

fn require_data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("--data DIR is required".into()))
}

/// Locate an IDX file by stem, accepting a `.gz` variant.
fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Config(format!(
        "dataset file not found: tried {} and {}",
        plain.display(),
        gz.display()
    )))
}

fn load_split(dir: &Path, prefix: &str, classes: usize, limit: usize) -> Result<LabeledImageSet> {
    let images = find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let mut set = LabeledImageSet::load(&images, &labels, classes)?;
    if limit > 0 {
        set.truncate(limit);
    }
    Ok(set)
}

fn load_train_set(cfg: &RunConfig) -> Result<LabeledImageSet> {
    load_split(require_data_dir(cfg)?, "train", cfg.classes, cfg.train_limit)
}

fn load_test_set(cfg: &RunConfig) -> Result<LabeledImageSet> {
    load_split(require_data_dir(cfg)?, "t10k", cfg.classes, cfg.test_limit)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint FILE is required".into()))?;
    Model::from_checkpoint(&load_checkpoint(path)?)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn write_snapshot(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let path = cfg.out_dir.join("config_snapshot.cfg");
    fs::write(&path, cfg.snapshot(command)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn save_gray(image: &Tensor, scale: usize, path: &Path) -> Result<()> {
    let spec = RenderSpec {
        rows: 1,
        cols: 1,
        scale,
        colormap: Colormap::Grayscale,
        border: 0,
    };
    write_png(&render_grid(&[image], &spec)?, path)
}

fn save_row_grid(images: &[&Tensor], path: &Path) -> Result<()> {
    let cols = images.len().min(5).max(1);
    let rows = images.len().div_ceil(cols);
    let spec = RenderSpec {
        rows,
        cols,
        scale: 4,
        colormap: Colormap::Grayscale,
        border: 2,
    };
    write_png(&render_grid(images, &spec)?, path)
}

fn probe_seed(cfg: &ProbeConfig, image_index: usize) -> ProbeConfig {
    ProbeConfig {
        seed: derive_seed(cfg.seed, "image", image_index as u64),
        ..*cfg
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(cfg: RunConfig) -> Result<()> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out FILE is required".into()))?;
    let train_set = load_train_set(&cfg)?;
    let test_set = load_test_set(&cfg)?;
    let arch = Arch::parse(&cfg.arch)?;
    let shape = train_set.image_shape();
    let spec = ModelSpec::new(arch, [shape[0], shape[1], shape[2]], cfg.classes)?;
    let mut model = Model::build(spec, cfg.seed)?;

    let snapshot_path = PathBuf::from(format!("{}.cfg", out.display()));
    fs::write(&snapshot_path, cfg.snapshot("train")).map_err(|e| Error::io(&snapshot_path, e))?;

    let train_cfg = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        batch: cfg.batch.min(train_set.len()),
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    let history = train(&mut model, &train_set, Some(&test_set), &train_cfg)?;
    for stat in &history.epochs {
        println!(
            "epoch {}: train loss {:.4}, train acc {:.4}, test acc {:.4}",
            stat.epoch,
            stat.train_loss,
            stat.train_accuracy,
            stat.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    let final_accuracy = match history.final_test_accuracy {
        Some(acc) => acc,
        None => model.evaluate(&test_set)?.0,
    };

    let checkpoint = ModelCheckpoint::of(
        &model,
        TrainingMeta {
            epochs: cfg.epochs as u32,
            final_test_accuracy: final_accuracy as f32,
            seed: cfg.seed,
        },
    );
    // Stage to a temp file so a failed run leaves no partial checkpoint.
    let tmp = PathBuf::from(format!("{}.tmp", out.display()));
    save_checkpoint(&tmp, &checkpoint)?;
    fs::rename(&tmp, &out).map_err(|e| Error::io(&out, e))?;

    let history_path = PathBuf::from(format!("{}.history.json", out.display()));
    let json = serde_json::to_string_pretty(&history).expect("history serializes");
    fs::write(&history_path, json).map_err(|e| Error::io(&history_path, e))?;

    println!("test accuracy {final_accuracy:.4}");
    println!("wrote {}", out.display());
    println!("wrote {}", history_path.display());
    println!("wrote {}", snapshot_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// probe-random
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PrototypeSummary {
    image_id: usize,
    label: usize,
    predicted_label: usize,
    accepted: usize,
    rejected: usize,
    drawn: usize,
    eta: f64,
    patch: usize,
    order: &'static str,
    binarize: bool,
}

fn cmd_probe_random(mut cfg: RunConfig) -> Result<()> {
    if cfg.count == 0 {
        cfg.count = 10;
    }
    let model = load_model(&cfg)?;
    let test = load_test_set(&cfg)?;
    ensure_out_dir(&cfg)?;
    let snapshot = write_snapshot(&cfg, "probe-random")?;
    let base = cfg.probe_config()?;

    let mut prototypes: Vec<(usize, Tensor)> = Vec::new();
    for idx in cfg.image_index..(cfg.image_index + cfg.count).min(test.len()) {
        let image = test.image(idx);
        let label = test.label(idx);
        let probe_cfg = probe_seed(&base, idx);
        let mut result = random_mask_probe(&model, &image, label, &probe_cfg)?;
        result.image_id = idx;

        let proto_path = cfg.out_dir.join(probe_file_name(
            "prototype",
            idx,
            "random",
            probe_cfg.eta,
            probe_cfg.patch,
            "png",
        ));
        save_gray(&result.prototype, 8, &proto_path)?;

        let masked_ref = result.reference_mask.apply(&image)?;
        let overlay = render_signed_overlay(&masked_ref, &result.mean_update)?;
        let overlay_path = cfg.out_dir.join(probe_file_name(
            "overlay",
            idx,
            "random",
            probe_cfg.eta,
            probe_cfg.patch,
            "png",
        ));
        write_png(&upscale(&overlay, 8), &overlay_path)?;

        let summary = PrototypeSummary {
            image_id: idx,
            label,
            predicted_label: result.predicted_label,
            accepted: result.accepted,
            rejected: result.rejected,
            drawn: result.drawn,
            eta: probe_cfg.eta,
            patch: probe_cfg.patch,
            order: probe_cfg.order.label(),
            binarize: probe_cfg.binarize,
        };
        let json_path = cfg.out_dir.join(probe_file_name(
            "prototype",
            idx,
            "random",
            probe_cfg.eta,
            probe_cfg.patch,
            "json",
        ));
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )
        .map_err(|e| Error::io(&json_path, e))?;

        println!(
            "image {idx} (label {label}): accepted {} of {} drawn",
            result.accepted, result.drawn
        );
        prototypes.push((label, result.prototype));
    }

    let refs: Vec<&Tensor> = prototypes.iter().map(|(_, t)| t).collect();
    let grid_path = cfg.out_dir.join(format!(
        "prototypes_random_{}_{}.png",
        base.eta, base.patch
    ));
    save_row_grid(&refs, &grid_path)?;

    // Per-class grids for every class that produced a prototype.
    for class in 0..model.spec().classes {
        let members: Vec<&Tensor> = prototypes
            .iter()
            .filter(|(label, _)| *label == class)
            .map(|(_, t)| t)
            .collect();
        if members.is_empty() {
            continue;
        }
        let path = cfg.out_dir.join(format!(
            "prototypes_class{class}_random_{}_{}.png",
            base.eta, base.patch
        ));
        save_row_grid(&members, &path)?;
    }
    println!("wrote {}", grid_path.display());
    println!("wrote {}", snapshot.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// probe-progressive
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ProgressiveSummary {
    image_id: usize,
    label: usize,
    first_prediction: usize,
    step_predictions: Vec<usize>,
    step_correct: Vec<bool>,
    all_pixels_predicted: bool,
}

fn cmd_probe_progressive(mut cfg: RunConfig) -> Result<()> {
    if cfg.count == 0 {
        cfg.count = 10;
    }
    let model = load_model(&cfg)?;
    let test = load_test_set(&cfg)?;
    ensure_out_dir(&cfg)?;
    let snapshot = write_snapshot(&cfg, "probe-progressive")?;
    let base = cfg.probe_config()?;
    let shape = test.image_shape();
    let (h, w) = (shape[1], shape[2]);
    let eta = 1.0 / cfg.k as f64;

    let mut finals: Vec<Tensor> = Vec::new();
    for idx in cfg.image_index..(cfg.image_index + cfg.count).min(test.len()) {
        let image = test.image(idx);
        let label = test.label(idx);
        let seq = make_progressive_sequence(
            h,
            w,
            cfg.k,
            base.patch,
            derive_seed(base.seed, "sequence", idx as u64),
        )?;
        let result = progressive_probe(&model, &image, label, &seq, &probe_seed(&base, idx))?;

        let mut strip: Vec<&Tensor> = vec![&image];
        for step in &result.steps {
            strip.push(&step.filled);
        }
        let strip_path = cfg.out_dir.join(probe_file_name(
            "progressive",
            idx,
            "progressive",
            eta,
            base.patch,
            "png",
        ));
        let spec = RenderSpec {
            rows: 1,
            cols: strip.len(),
            scale: 4,
            colormap: Colormap::Grayscale,
            border: 2,
        };
        write_png(&render_grid(&strip, &spec)?, &strip_path)?;

        let summary = ProgressiveSummary {
            image_id: idx,
            label,
            first_prediction: result.first_prediction,
            step_predictions: result.steps.iter().map(|s| s.prediction).collect(),
            step_correct: result.steps.iter().map(|s| s.prediction_correct).collect(),
            all_pixels_predicted: result.provenance.iter().all(|&p| p != 0),
        };
        let json_path = cfg.out_dir.join(probe_file_name(
            "progressive",
            idx,
            "progressive",
            eta,
            base.patch,
            "json",
        ));
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )
        .map_err(|e| Error::io(&json_path, e))?;

        println!(
            "image {idx} (label {label}): steps predicted {:?}",
            summary.step_predictions
        );
        finals.push(result.final_image);
    }

    let refs: Vec<&Tensor> = finals.iter().collect();
    let grid_path = cfg
        .out_dir
        .join(format!("finals_progressive_{}_{}.png", eta, base.patch));
    save_row_grid(&refs, &grid_path)?;
    println!("wrote {}", grid_path.display());
    println!("wrote {}", snapshot.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// consistency
// ---------------------------------------------------------------------------

fn cmd_consistency(mut cfg: RunConfig) -> Result<()> {
    if cfg.count == 0 {
        cfg.count = 1000;
    }
    let mechanism = match cfg.mechanism.as_str() {
        "random" => Mechanism::Random,
        "progressive" => Mechanism::Progressive,
        other => {
            return Err(Error::Config(format!(
                "unknown mechanism '{other}' (expected random or progressive)"
            )))
        }
    };
    let model = load_model(&cfg)?;
    let test = load_test_set(&cfg)?;
    ensure_out_dir(&cfg)?;
    let snapshot = write_snapshot(&cfg, "consistency")?;
    let base = cfg.probe_config()?;
    let shape = test.image_shape();
    let (h, w) = (shape[1], shape[2]);

    let count = cfg.count.min(test.len());
    let mut prototypes: Vec<(Tensor, usize)> = Vec::with_capacity(count);
    let mut skipped = 0usize;
    for idx in 0..count {
        let image = test.image(idx);
        let label = test.label(idx);
        match mechanism {
            Mechanism::Random => {
                match random_mask_probe(&model, &image, label, &probe_seed(&base, idx)) {
                    Ok(result) => prototypes.push((result.prototype, result.predicted_label)),
                    Err(Error::InsufficientSignal { achieved, .. }) => {
                        skipped += 1;
                        eprintln!(
                            "warning: image {idx} skipped ({achieved} correct masked predictions)"
                        );
                    }
                    Err(other) => return Err(other),
                }
            }
            Mechanism::Progressive => {
                let seq = make_progressive_sequence(
                    h,
                    w,
                    cfg.k,
                    base.patch,
                    derive_seed(base.seed, "sequence", idx as u64),
                )?;
                let result =
                    progressive_probe(&model, &image, label, &seq, &probe_seed(&base, idx))?;
                prototypes.push((result.final_image, result.first_prediction));
            }
        }
        if (idx + 1) % 100 == 0 {
            println!("generated {} / {count} prototypes", idx + 1);
        }
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} of {count} images produced no prototype");
    }

    let report = consistency_eval(&model, &prototypes, mechanism)?;
    let csv_path = cfg
        .out_dir
        .join(format!("consistency_{}.csv", mechanism.tag()));
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = cfg
        .out_dir
        .join(format!("consistency_{}.json", mechanism.tag()));
    fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;

    println!(
        "{}: accuracy {:.1}, macro-F1 {:.1}, weighted-F1 {:.1} ({} prototypes)",
        report.mechanism,
        report.accuracy,
        report.macro_f1,
        report.weighted_f1,
        prototypes.len()
    );
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    println!("wrote {}", snapshot.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(cfg: RunConfig) -> Result<()> {
    let model = load_model(&cfg)?;
    let test = load_test_set(&cfg)?;
    ensure_out_dir(&cfg)?;
    let snapshot = write_snapshot(&cfg, "ablate")?;
    let base = cfg.probe_config()?;

    let idx = cfg.image_index;
    if idx >= test.len() {
        return Err(Error::Index {
            context: "test-set image index",
            index: idx,
            len: test.len(),
        });
    }
    let image = test.image(idx);
    let label = test.label(idx);
    let grid = ablation_sweep(
        &model,
        &image,
        label,
        &cfg.etas,
        &cfg.patches,
        &probe_seed(&base, idx),
    )?;

    let mut stats = String::from("eta,patch,accepted,rejected,drawn,acceptance_rate\n");
    for (i, &eta) in grid.etas.iter().enumerate() {
        for (j, &patch) in grid.patches.iter().enumerate() {
            let cell = grid.cell(i, j);
            stats.push_str(&format!(
                "{eta},{patch},{},{},{},{:.4}\n",
                cell.accepted,
                cell.rejected,
                cell.drawn,
                cell.accepted as f64 / cell.drawn as f64
            ));
            let cell_path = cfg.out_dir.join(probe_file_name(
                "prototype",
                idx,
                "random",
                eta,
                patch,
                "png",
            ));
            save_gray(&cell.prototype, 8, &cell_path)?;
        }
    }
    let stats_path = cfg.out_dir.join("ablation_stats.csv");
    fs::write(&stats_path, stats).map_err(|e| Error::io(&stats_path, e))?;

    let cells: Vec<&Tensor> = grid.cells.iter().map(|c| &c.prototype).collect();
    let spec = RenderSpec {
        rows: grid.etas.len(),
        cols: grid.patches.len(),
        scale: 4,
        colormap: Colormap::Grayscale,
        border: 2,
    };
    let grid_path = cfg.out_dir.join("ablation_grid.png");
    write_png(&render_grid(&cells, &spec)?, &grid_path)?;

    println!("wrote {}", grid_path.display());
    println!("wrote {}", stats_path.display());
    println!("wrote {}", snapshot.display());
    Ok(())
}
