//! Train a classifier on MNIST and write a checkpoint.
//!
//!     cargo run --release --example train_mnist -- [data_dir] [out.bpck] [epochs]
//!
//! Defaults: data/mnist, example-out/simple_cnn3.bpck, 1 epoch.

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::models::{
    save_checkpoint, train, Arch, Model, ModelCheckpoint, ModelSpec, TrainConfig, TrainingMeta,
};

fn main() -> blankprobe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = PathBuf::from(args.first().map(String::as_str).unwrap_or("data/mnist"));
    let out = PathBuf::from(
        args.get(1)
            .map(String::as_str)
            .unwrap_or("example-out/simple_cnn3.bpck"),
    );
    let epochs: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(1);

    let train_set = LabeledImageSet::load(
        &data.join("train-images-idx3-ubyte.gz"),
        &data.join("train-labels-idx1-ubyte.gz"),
        10,
    )?;
    let test_set = LabeledImageSet::load(
        &data.join("t10k-images-idx3-ubyte.gz"),
        &data.join("t10k-labels-idx1-ubyte.gz"),
        10,
    )?;
    println!("{} train / {} test images", train_set.len(), test_set.len());

    let spec = ModelSpec::new(Arch::SimpleCnn3, [1, 28, 28], 10)?;
    let mut model = Model::build(spec, 7)?;
    let cfg = TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &train_set, Some(&test_set), &cfg)?;
    for stat in &history.epochs {
        println!(
            "epoch {}: train loss {:.4}, test accuracy {:.4}",
            stat.epoch,
            stat.train_loss,
            stat.test_accuracy.unwrap_or(f64::NAN)
        );
    }

    let accuracy = history.final_test_accuracy.unwrap_or_default();
    if let Some(parent) = out.parent().filter(|p| *p != Path::new("")) {
        std::fs::create_dir_all(parent).ok();
    }
    save_checkpoint(
        &out,
        &ModelCheckpoint::of(
            &model,
            TrainingMeta {
                epochs: epochs as u32,
                final_test_accuracy: accuracy as f32,
                seed: 7,
            },
        ),
    )?;
    println!("wrote {} (test accuracy {:.4})", out.display(), accuracy);
    Ok(())
}
