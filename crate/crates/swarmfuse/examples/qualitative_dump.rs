//! Render one sample's inputs, masks, prediction, warped-feature magnitudes
//! and fusion sources as PNG files for visual inspection.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example qualitative_dump
//! ```

use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::train::{fit, Hyperparams, Method, ModelConfig};
use swarmfuse::viz::dump_sample;

fn main() {
    let train_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 41, 150, 2)).unwrap();
    let val_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 42, 30, 2)).unwrap();
    let hyper = Hyperparams { epochs: 3, ..Hyperparams::default() };
    let result = fit(&train_ds, &val_ds, Method::Main, &ModelConfig::default(), &hyper, 11).unwrap();

    let out = std::env::temp_dir().join("swarmfuse_example").join("dump");
    let files = dump_sample(&result.model, &val_ds.samples[0], &out).unwrap();
    println!("wrote {} files:", files.len());
    for f in files {
        println!("  {}", f.display());
    }
}
