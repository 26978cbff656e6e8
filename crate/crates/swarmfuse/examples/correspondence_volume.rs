//! From feature grids to a correspondence map: distance volume, no-match
//! scores, softmax normalization, smoothing, argmax, and accuracy against
//! the generator's ground truth.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example correspondence_volume
//! ```

use swarmfuse::backbone::{self};
use swarmfuse::fuse::{to_correspondence_map, warp_features};
use swarmfuse::metrics::correspondence_accuracy;
use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::smooth::smooth_volume;
use swarmfuse::tensor::Graph;
use swarmfuse::train::{init_model, Method, ModelConfig};

fn main() {
    let gen = GenConfig::preset_defaults(Preset::Sequence, 11, 1, 2);
    let ds = generate_dataset(&gen).unwrap();
    let sample = &ds.samples[0];

    // Untrained weights: the volume machinery works, the accuracies are
    // near chance until training shapes the features.
    let model = init_model(Method::Main, &ModelConfig::default(), 2, 1).unwrap();
    let bb = &model.config.backbone;

    let mut g = Graph::new();
    let img0 = backbone::image_input(&mut g, &sample.images[0], bb.height, bb.width).unwrap();
    let img1 = backbone::image_input(&mut g, &sample.images[1], bb.height, bb.width).unwrap();
    let f0 = backbone::encode(&mut g, &model.params, bb, img0).unwrap();
    let f1 = backbone::encode(&mut g, &model.params, bb, img1).unwrap();
    let own = backbone::squeeze_batch(&mut g, f0).unwrap();
    let aux = backbone::squeeze_batch(&mut g, f1).unwrap();

    let volume = swarmfuse::correspond::build_normalized_volume(&mut g, own, aux, 1.0, (0, 1)).unwrap();
    println!(
        "volume fibers: {} cells x {} channels (last = no-match)",
        volume.cells_a(),
        volume.channels()
    );
    let fiber0 = &g.value(volume.var).data()[..volume.channels()];
    println!(
        "cell 0 fiber: max {:.3}, no-match {:.3}, sum {:.5}",
        fiber0.iter().fold(f32::MIN, |a, &b| a.max(b)),
        fiber0[volume.no_match_channel()],
        fiber0.iter().sum::<f32>()
    );

    let raw_map = to_correspondence_map(&g, &volume).unwrap();
    let smoothed = smooth_volume(&mut g, &model.params, &volume).unwrap();
    let smooth_map = to_correspondence_map(&g, &smoothed).unwrap();
    let gt = sample.gt_corr(1);
    println!(
        "correspondence accuracy vs ground truth: raw {:.3}, smoothed {:.3} (chance {:.3})",
        correspondence_accuracy(&raw_map, gt).unwrap(),
        correspondence_accuracy(&smooth_map, gt).unwrap(),
        1.0 / volume.channels() as f64
    );

    let (warped, validity) = warp_features(&mut g, &smooth_map, aux).unwrap();
    let valid = validity.iter().filter(|&&v| v == 1).count();
    println!(
        "warped features: {:?}, {} of {} cells matched",
        g.value(warped).shape(),
        valid,
        validity.len()
    );
}
