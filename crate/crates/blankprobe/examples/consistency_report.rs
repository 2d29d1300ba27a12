//! Ask the model to classify its own generated prototypes and report
//! accuracy and F1 metrics.
//!
//!     cargo run --release --example consistency_report -- [data_dir] [checkpoint] [count]

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::models::{load_checkpoint, train, Arch, Model, ModelSpec, TrainConfig};
use blankprobe::probes::{consistency_eval, random_mask_probe, Mechanism, ProbeConfig};
use blankprobe::rng::derive_seed;

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
    let count: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(100);

    let test = LabeledImageSet::load(
        &data.join("t10k-images-idx3-ubyte.gz"),
        &data.join("t10k-labels-idx1-ubyte.gz"),
        10,
    )?;

    // Continuous (non-binarized) fills keep the most signal for the model.
    let cfg = ProbeConfig {
        samples: 1024,
        min_correct: 256,
        binarize: false,
        ..ProbeConfig::default()
    };
    let mut prototypes = Vec::new();
    for idx in 0..count.min(test.len()) {
        let probe_cfg = ProbeConfig {
            seed: derive_seed(0, "image", idx as u64),
            ..cfg
        };
        match random_mask_probe(&model, &test.image(idx), test.label(idx), &probe_cfg) {
            Ok(r) => prototypes.push((r.prototype, r.predicted_label)),
            Err(err) => eprintln!("image {idx} skipped: {err}"),
        }
        if (idx + 1) % 50 == 0 {
            println!("generated {}/{count}", idx + 1);
        }
    }

    let report = consistency_eval(&model, &prototypes, Mechanism::Random)?;
    println!("\n{}", report.to_csv());
    Ok(())
}
