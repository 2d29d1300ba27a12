//! Re-synthesize a digit by filling non-overlapping mask regions one at a
//! time, each step conditioned on the fills so far.
//!
//!     cargo run --release --example progressive_fill -- [data_dir] [checkpoint]

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::masking::make_progressive_sequence;
use blankprobe::models::{load_checkpoint, train, Arch, Model, ModelSpec, TrainConfig};
use blankprobe::probes::{progressive_probe, ProbeConfig};
use blankprobe::tensor::Tensor;
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
    let image = test.image(3);
    let label = test.label(3);

    // Four disjoint masks, each hiding 25% of the pixels; together they
    // cover the whole image, so the final composite is fully synthesized.
    let seq = make_progressive_sequence(28, 28, 4, 2, 9)?;
    let result = progressive_probe(&model, &image, label, &seq, &ProbeConfig::default())?;
    for step in &result.steps {
        println!(
            "step {}: prediction {} ({})",
            step.step,
            step.prediction,
            if step.prediction_correct { "correct" } else { "wrong" }
        );
    }
    assert!(result.provenance.iter().all(|&p| p != 0));
    println!("after step {}, every pixel is model-predicted", seq.len());

    let mut strip: Vec<&Tensor> = vec![&image];
    for step in &result.steps {
        strip.push(&step.filled);
    }
    let spec = RenderSpec {
        rows: 1,
        cols: strip.len(),
        scale: 6,
        colormap: Colormap::Grayscale,
        border: 2,
    };
    std::fs::create_dir_all("example-out").ok();
    write_png(
        &render_grid(&strip, &spec)?,
        Path::new("example-out/progressive_strip.png"),
    )?;
    println!("wrote example-out/progressive_strip.png (original, then after each step)");
    Ok(())
}
