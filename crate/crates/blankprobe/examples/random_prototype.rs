//! Prototype a class by averaging update directions over many random
//! masks, then thresholding the mean.
//!
//!     cargo run --release --example random_prototype -- [data_dir] [checkpoint]

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::models::{load_checkpoint, train, Arch, Model, ModelSpec, TrainConfig};
use blankprobe::probes::{random_mask_probe, ProbeConfig};
use blankprobe::rng::derive_seed;
use blankprobe::tensor::Tensor;
use blankprobe::viz::{render_grid, write_png, RenderSpec};

fn quick_model(data: &Path, checkpoint: Option<&Path>) -> blankprobe::Result<Model> {
    if let Some(path) = checkpoint {
        return Model::from_checkpoint(&load_checkpoint(path)?);
    }
    let mut slice = LabeledImageSet::load(
        &data.join("train-images-idx3-ubyte.gz"),
        &data.join("train-labels-idx1-ubyte.gz"),
        10,
    )?;
    slice.truncate(8000);
    let mut model = Model::build(ModelSpec::new(Arch::SimpleCnn3, [1, 28, 28], 10)?, 7)?;
    println!("no checkpoint given; training one epoch on 8000 digits ...");
    train(&mut model, &slice, None, &TrainConfig { epochs: 1, seed: 7, ..TrainConfig::default() })?;
    Ok(model)
}

fn main() -> blankprobe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = PathBuf::from(args.first().map(String::as_str).unwrap_or("data/mnist"));
    let model = quick_model(&data, args.get(1).map(Path::new))?;

    let test = LabeledImageSet::load(
        &data.join("t10k-images-idx3-ubyte.gz"),
        &data.join("t10k-labels-idx1-ubyte.gz"),
        10,
    )?;

    let cfg = ProbeConfig {
        samples: 1024,
        min_correct: 256,
        ..ProbeConfig::default()
    };
    let mut cells: Vec<Tensor> = Vec::new();
    for idx in 0..8 {
        let image = test.image(idx);
        let label = test.label(idx);
        let probe_cfg = ProbeConfig {
            seed: derive_seed(0, "image", idx as u64),
            ..cfg
        };
        let result = random_mask_probe(&model, &image, label, &probe_cfg)?;
        println!(
            "digit {label}: accepted {} of {} drawn masks",
            result.accepted, result.drawn
        );
        cells.push(image);
        cells.push(result.prototype);
    }

    let refs: Vec<&Tensor> = cells.iter().collect();
    let spec = RenderSpec {
        rows: 8,
        cols: 2,
        scale: 4,
        ..RenderSpec::grid(8, 2)
    };
    std::fs::create_dir_all("example-out").ok();
    write_png(
        &render_grid(&refs, &spec)?,
        Path::new("example-out/random_prototypes.png"),
    )?;
    println!("wrote example-out/random_prototypes.png (original | prototype per row)");
    Ok(())
}
