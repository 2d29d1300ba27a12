//! The core single-mask pipeline: mask a digit, read the model's update
//! direction for the hidden pixels, threshold it, and overlay the fill.
//!
//!     cargo run --release --example fill_single_mask -- [data_dir] [checkpoint]
//!
//! Without a checkpoint a small model is trained on the spot (one epoch on
//! a training-set slice).

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::masking::sample_uniform_mask;
use blankprobe::models::{load_checkpoint, train, Arch, Model, ModelSpec, TrainConfig};
use blankprobe::update::{compose_fill, first_order_update, threshold_t};
use blankprobe::viz::{render_signed_overlay, upscale, write_pgm, write_png};

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
    let checkpoint = args.get(1).map(PathBuf::from);
    let model = quick_model(&data, checkpoint.as_deref())?;

    let test = LabeledImageSet::load(
        &data.join("t10k-images-idx3-ubyte.gz"),
        &data.join("t10k-labels-idx1-ubyte.gz"),
        10,
    )?;
    let image = test.image(0);
    let label = test.label(0);

    let mask = sample_uniform_mask(28, 28, 0.25, 2, 42)?;
    let masked = mask.apply(&image)?;
    let prediction = model.predict_class(&masked)?;
    println!("true label {label}, masked prediction {prediction}");

    let mut update = first_order_update(&model, &masked, label, 1e-2)?;
    let thresholded = threshold_t(&mut update, &mask, true)?;
    let filled = compose_fill(&masked, &thresholded)?;

    let out = Path::new("example-out");
    std::fs::create_dir_all(out).ok();
    write_pgm(&masked, &out.join("fill_masked.pgm"), true)?;
    write_png(
        &upscale(&render_signed_overlay(&masked, &update.raw)?, 8),
        &out.join("fill_update_overlay.png"),
    )?;
    write_pgm(&filled, &out.join("fill_composed.pgm"), true)?;
    println!("wrote example-out/fill_masked.pgm, fill_update_overlay.png, fill_composed.pgm");
    Ok(())
}
