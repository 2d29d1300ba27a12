//! Compare first-order update fills with the quasi-Newton (BFGS)
//! comparator on the same masked digit.
//!
//!     cargo run --release --example bfgs_comparison -- [data_dir] [checkpoint]

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::masking::sample_uniform_mask;
use blankprobe::models::{load_checkpoint, train, Arch, Model, ModelSpec, TrainConfig};
use blankprobe::tensor::Tensor;
use blankprobe::update::{bfgs_direction, compose_fill, first_order_update, threshold_t};
use blankprobe::viz::{render_grid, write_png, Colormap, RenderSpec};

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
    let image = test.image(1);
    let label = test.label(1);
    let mask = sample_uniform_mask(28, 28, 0.25, 2, 11)?;
    let masked = mask.apply(&image)?;

    let mut first = first_order_update(&model, &masked, label, 1e-2)?;
    let fill_first = compose_fill(&masked, &threshold_t(&mut first, &mask, true)?)?;

    let mut quasi = bfgs_direction(&model, &masked, label, 5)?;
    let fill_bfgs = compose_fill(&masked, &threshold_t(&mut quasi, &mask, true)?)?;

    let grad = model.input_gradient(&masked, label)?;
    let dot: f64 = quasi
        .raw
        .data()
        .iter()
        .zip(grad.data())
        .map(|(p, g)| *p as f64 * *g as f64)
        .sum();
    println!("bfgs direction . gradient = {dot:.3e} (negative = descent)");

    let cells: Vec<&Tensor> = vec![&image, &masked, &fill_first, &fill_bfgs];
    let spec = RenderSpec {
        rows: 1,
        cols: 4,
        scale: 6,
        colormap: Colormap::Grayscale,
        border: 2,
    };
    std::fs::create_dir_all("example-out").ok();
    write_png(
        &render_grid(&cells, &spec)?,
        Path::new("example-out/bfgs_comparison.png"),
    )?;
    println!("wrote example-out/bfgs_comparison.png (original | masked | first-order | bfgs)");
    Ok(())
}
