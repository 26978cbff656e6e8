//! Checkpoint lifecycle: train briefly, write the parameter file, rebuild
//! the model from it, and render an occluded-region results row.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example evaluate_checkpoint
//! ```

use swarmfuse::metrics::{render_csv, render_table};
use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::tensor::{read_checkpoint, write_checkpoint};
use swarmfuse::train::{evaluate, fit, model_from_checkpoint, Hyperparams, Method, ModelConfig};

fn main() {
    let train_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 21, 200, 2)).unwrap();
    let val_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 22, 50, 2)).unwrap();
    let hyper = Hyperparams { epochs: 4, ..Hyperparams::default() };
    let result = fit(&train_ds, &val_ds, Method::Main, &ModelConfig::default(), &hyper, 3).unwrap();

    let dir = std::env::temp_dir().join("swarmfuse_example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("main.swfz");
    write_checkpoint(&path, &result.model.params).unwrap();
    println!(
        "checkpoint: {} tensors, {} scalar parameters -> {}",
        result.model.params.len(),
        result.model.params.scalar_count(),
        path.display()
    );

    // Reload: widths are inferred from tensor shapes, geometry from the
    // dataset it will run against.
    let params = read_checkpoint(&path).unwrap();
    let model = model_from_checkpoint(Method::Main, params, &val_ds.config, 1.0).unwrap();
    let report = evaluate(&model, &val_ds).unwrap();
    let row = report.method_row(model.method);
    print!("{}", render_table(std::slice::from_ref(&row), val_ds.config.num_classes));
    print!("{}", render_csv(std::slice::from_ref(&row), val_ds.config.num_classes));
}
