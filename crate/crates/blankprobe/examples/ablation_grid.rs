//! Sweep masking ratio against patch size for one digit and lay the
//! prototypes out on a grid.
//!
//!     cargo run --release --example ablation_grid -- [data_dir] [checkpoint]

use std::path::{Path, PathBuf};

use blankprobe::dataset::LabeledImageSet;
use blankprobe::models::{load_checkpoint, train, Arch, Model, ModelSpec, TrainConfig};
use blankprobe::probes::{ablation_sweep, ProbeConfig};
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
    let image = test.image(0);
    let label = test.label(0);

    let etas = [0.1, 0.25, 0.5];
    let patches = [2usize, 4, 7];
    let cfg = ProbeConfig {
        samples: 1024,
        min_correct: 128,
        ..ProbeConfig::default()
    };
    let grid = ablation_sweep(&model, &image, label, &etas, &patches, &cfg)?;
    for (i, &eta) in etas.iter().enumerate() {
        for (j, &patch) in patches.iter().enumerate() {
            let cell = grid.cell(i, j);
            println!(
                "eta {eta:.2} patch {patch}: acceptance rate {:.3}",
                cell.accepted as f64 / cell.drawn as f64
            );
        }
    }

    let cells: Vec<&Tensor> = grid.cells.iter().map(|c| &c.prototype).collect();
    let spec = RenderSpec {
        rows: etas.len(),
        cols: patches.len(),
        scale: 4,
        colormap: Colormap::Grayscale,
        border: 2,
    };
    std::fs::create_dir_all("example-out").ok();
    write_png(
        &render_grid(&cells, &spec)?,
        Path::new("example-out/ablation_grid.png"),
    )?;
    println!("wrote example-out/ablation_grid.png (rows: eta, cols: patch size)");
    Ok(())
}
