//! Procedural multi-view scenes: worlds, viewports, exact cell
//! correspondences, degradation, and the dataset file round-trip.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example generate_dataset
//! ```

use swarmfuse::scenegen::{
    file_size_bytes, generate_dataset, generate_world, ground_truth_correspondence, read_dataset,
    sample_views, write_dataset, GenConfig, Preset,
};

use rand::SeedableRng;

fn main() {
    // A world is a semantic grid plus a textured rendering of it.
    let world = generate_world(7, 128, 5, 12).unwrap();
    let mut histogram = [0usize; 5];
    for &c in world.grid() {
        histogram[c as usize] += 1;
    }
    println!("world 128x128, class histogram: {histogram:?}");

    // Two overlapping views and their exact cell-to-cell correspondence.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let views = sample_views(&world, 2, (32, 32), 0.5, 1.0, 0.0, 4, &mut rng).unwrap();
    let corr = ground_truth_correspondence(&views[0], &views[1], 4);
    let no_match = corr.iter().filter(|&&c| c == 64).count();
    println!(
        "views {:?} / {:?}: {} of 64 cells have no counterpart",
        views[0], views[1], no_match
    );

    // Full dataset generation and the binary round-trip.
    let cfg = GenConfig::preset_defaults(Preset::Cross, 42, 25, 3);
    let ds = generate_dataset(&cfg).unwrap();
    let dir = std::env::temp_dir().join("swarmfuse_example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cross25.swfd");
    write_dataset(&path, &ds).unwrap();
    let on_disk = std::fs::metadata(&path).unwrap().len();
    println!(
        "wrote {} samples to {} ({} bytes, formula says {})",
        ds.samples.len(),
        path.display(),
        on_disk,
        file_size_bytes(&ds.config, ds.samples.len())
    );
    let back = read_dataset(&path).unwrap();
    println!("round-trip equal: {}", back == ds);
}
